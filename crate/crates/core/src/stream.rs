//! Chunked streaming: the latency/throughput calculator and the staged
//! capture -> encode -> denoise -> decode runtime.

use std::fmt;
use std::path::Path;
use std::thread;
use std::time::{Duration, Instant};

use crossbeam_channel::bounded;
use serde::{Deserialize, Serialize};

use crate::codec::{chunk_boundaries, Codec, LatentVideo, RgbVideo, TEMPORAL};
use crate::distill::{chunk_noise, Rollout};
use crate::error::{Error, Result};
use crate::model::{CausalModel, EditChunkCond};
use crate::params::{Bound, ParamSet};
use crate::tensor::{Graph, Scalar, Tensor, Var};

/// Stage costs of one deployment. `*_first` apply to the first chunk (or the
/// whole clip when not streaming), `*_next` to every later chunk.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingProfile {
    #[serde(default)]
    pub name: String,
    pub capture_fps: f64,
    pub first_chunk_frames: usize,
    /// 0 when the clip is produced in one piece.
    #[serde(default)]
    pub next_chunk_frames: usize,
    pub ae_ms_first: f64,
    #[serde(default)]
    pub ae_ms_next: f64,
    pub model_ms_first: f64,
    #[serde(default)]
    pub model_ms_next: f64,
    pub nfe: usize,
    pub total_frames: usize,
}

impl TimingProfile {
    pub fn streaming(&self) -> bool {
        self.next_chunk_frames > 0
    }

    pub fn validate(&self) -> Result<()> {
        let times = [
            self.capture_fps,
            self.ae_ms_first,
            self.ae_ms_next,
            self.model_ms_first,
            self.model_ms_next,
        ];
        if times.iter().any(|t| !(t.is_finite() && *t >= 0.0)) || self.capture_fps == 0.0 {
            return Err(Error::invalid(format!("profile {:?} has negative or missing times", self.name)));
        }
        if self.first_chunk_frames == 0 || self.first_chunk_frames > self.total_frames {
            return Err(Error::invalid("first chunk must hold 1..=total_frames frames"));
        }
        if self.first_chunk_frames % TEMPORAL != 1 {
            return Err(Error::invalid(format!(
                "first chunk of {} frames is not 1 + {TEMPORAL}k",
                self.first_chunk_frames
            )));
        }
        if self.streaming() {
            if !self.next_chunk_frames.is_multiple_of(TEMPORAL) {
                return Err(Error::invalid(format!(
                    "next chunk of {} frames is not a multiple of {TEMPORAL}",
                    self.next_chunk_frames
                )));
            }
            if !(self.total_frames - self.first_chunk_frames).is_multiple_of(self.next_chunk_frames) {
                return Err(Error::invalid("total frames do not split into chunks"));
            }
        } else if self.first_chunk_frames != self.total_frames {
            return Err(Error::invalid("a non-streaming profile processes the whole clip at once"));
        }
        Ok(())
    }

    pub fn from_toml(s: &str) -> Result<Self> {
        let p: Self = toml::from_str(s).map_err(|e| Error::Format(e.to_string()))?;
        p.validate()?;
        Ok(p)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }
}

/// Whole milliseconds spent recording `frames` at `fps`, truncated.
pub fn recording_ms(frames: usize, fps: f64) -> f64 {
    (1000.0 * frames as f64 / fps).floor()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Latency {
    pub recording_ms: f64,
    pub ae_ms: f64,
    pub model_ms: f64,
    /// Rounded to whole milliseconds.
    pub total_ms: f64,
}

/// Time from pressing record to the first edited frame on screen.
pub fn first_chunk_latency(p: &TimingProfile) -> Latency {
    let recording_ms = recording_ms(p.first_chunk_frames, p.capture_fps);
    Latency {
        recording_ms,
        ae_ms: p.ae_ms_first,
        model_ms: p.model_ms_first,
        total_ms: (recording_ms + p.ae_ms_first + p.model_ms_first).round(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// One chunk in flight: encode, denoise and decode run back to back.
    Sequential,
    /// Stages overlap on consecutive chunks.
    Pipelined,
}

/// Processing stage costs in steady state: `(encode, denoise, decode)` ms.
/// The autoencoder time is split evenly between encoding and decoding.
pub fn steady_stage_ms(p: &TimingProfile) -> [f64; 3] {
    if p.streaming() {
        [p.ae_ms_next / 2.0, p.model_ms_next, p.ae_ms_next / 2.0]
    } else {
        [p.ae_ms_first / 2.0, p.model_ms_first, p.ae_ms_first / 2.0]
    }
}

fn steady_frames(p: &TimingProfile) -> usize {
    if p.streaming() {
        p.next_chunk_frames
    } else {
        p.total_frames
    }
}

/// Frames per second of edited output, model and autoencoder included.
pub fn throughput(p: &TimingProfile, mode: Mode) -> Result<f64> {
    let frames = steady_frames(p) as f64;
    let stages = steady_stage_ms(p);
    let ms = match mode {
        Mode::Sequential => stages.iter().sum::<f64>(),
        Mode::Pipelined => {
            if stages.contains(&0.0) {
                return Err(Error::invalid("pipelined throughput needs non-zero stage times"));
            }
            stages.iter().cloned().fold(0.0, f64::max)
        }
    };
    if ms <= 0.0 {
        return Err(Error::invalid("zero processing time"));
    }
    Ok(1000.0 * frames / ms)
}

/// Frames per second of the denoiser alone.
pub fn model_throughput(p: &TimingProfile) -> Result<f64> {
    let ms = steady_stage_ms(p)[1];
    if ms <= 0.0 {
        return Err(Error::invalid("zero model time"));
    }
    Ok(1000.0 * steady_frames(p) as f64 / ms)
}

#[derive(Clone, Debug, Serialize)]
pub struct LatencyReport {
    pub name: String,
    pub streaming: bool,
    pub nfe: usize,
    pub first_chunk_frames: usize,
    pub next_chunk_frames: usize,
    pub latency: Latency,
    pub model_fps: f64,
    pub model_ae_fps: f64,
    pub pipelined_fps: Option<f64>,
}

impl LatencyReport {
    pub fn new(p: &TimingProfile) -> Result<Self> {
        p.validate()?;
        Ok(Self {
            name: p.name.clone(),
            streaming: p.streaming(),
            nfe: p.nfe,
            first_chunk_frames: p.first_chunk_frames,
            next_chunk_frames: p.next_chunk_frames,
            latency: first_chunk_latency(p),
            model_fps: model_throughput(p)?,
            model_ae_fps: throughput(p, Mode::Sequential)?,
            pipelined_fps: throughput(p, Mode::Pipelined).ok(),
        })
    }
}

impl fmt::Display for LatencyReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let next = if self.streaming {
            format!("{} frames", self.next_chunk_frames)
        } else {
            "N/A".into()
        };
        writeln!(f, "{}", if self.name.is_empty() { "profile" } else { &self.name })?;
        writeln!(f, "  streaming          {}", if self.streaming { "yes" } else { "no" })?;
        writeln!(f, "  NFEs               {}", self.nfe)?;
        writeln!(f, "  first chunk size   {} frames", self.first_chunk_frames)?;
        writeln!(f, "  next chunk size    {next}")?;
        writeln!(f, "  first chunk latency [ms]")?;
        writeln!(f, "    recording        {}", self.latency.recording_ms)?;
        writeln!(f, "    AE               {}", self.latency.ae_ms)?;
        writeln!(f, "    model            {}", self.latency.model_ms)?;
        writeln!(f, "    total            {}", self.latency.total_ms)?;
        writeln!(f, "  throughput [fps]")?;
        writeln!(f, "    model            {:.2}", self.model_fps)?;
        write!(f, "    model + AE       {:.2}", self.model_ae_fps)?;
        if let Some(p) = self.pipelined_fps {
            write!(f, "\n    pipelined        {p:.2}")?;
        }
        Ok(())
    }
}

/// Edits one chunk of source latents at a time. Lives on the denoise stage,
/// which owns any cache exclusively.
pub trait ChunkEditor<S: Scalar>: Send {
    fn nfe_per_chunk(&self) -> usize;

    /// `src` is `[chunk_latents, C, h, w]`; returns edited latents of the same shape.
    fn edit(&mut self, chunk: usize, src: &Tensor<S>) -> Result<Tensor<S>>;
}

/// Where each chunk's denoising starts.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    /// Seeded per-chunk Gaussian noise, as in offline rollouts.
    Noise,
    /// The source latents themselves.
    Source,
}

/// A causal editor driven through the shared [`Rollout`].
pub struct RolloutEditor<'m, S: Scalar, M: CausalModel<S, ChunkCond = EditChunkCond<S>>> {
    rollout: Rollout<'m, S, M>,
    text: Tensor<S>,
    seed: u64,
    init: Init,
    steps: usize,
}

impl<'m, S, M> RolloutEditor<'m, S, M>
where
    S: Scalar,
    M: CausalModel<S, ChunkCond = EditChunkCond<S>>,
{
    pub fn new(
        model: &'m M,
        text: Tensor<S>,
        steps: usize,
        n_chunks: usize,
        mask_first_for_last: bool,
        seed: u64,
        init: Init,
    ) -> Result<Self> {
        Ok(Self {
            rollout: Rollout::new(model, steps, n_chunks, mask_first_for_last)?,
            text,
            seed,
            init,
            steps,
        })
    }

    pub fn rollout(&self) -> &Rollout<'m, S, M> {
        &self.rollout
    }
}

impl<S, M> ChunkEditor<S> for RolloutEditor<'_, S, M>
where
    S: Scalar,
    M: CausalModel<S, ChunkCond = EditChunkCond<S>> + Sync,
{
    fn nfe_per_chunk(&self) -> usize {
        self.steps
    }

    fn edit(&mut self, chunk: usize, src: &Tensor<S>) -> Result<Tensor<S>> {
        if chunk != self.rollout.next_chunk() {
            return Err(Error::Cache(format!(
                "chunk {chunk} arrived while the cache expects {}",
                self.rollout.next_chunk()
            )));
        }
        let dim = src.len();
        let x0 = match self.init {
            Init::Noise => chunk_noise(self.seed, chunk, 1, dim),
            Init::Source => src.clone().reshape(&[1, dim])?,
        };
        let cond = EditChunkCond {
            src: src.clone(),
            text: self.text.clone(),
        };
        self.rollout.generate(&x0, &cond)?.reshape(src.shape())
    }
}

/// Causal model whose velocity is identically zero; with [`Init::Source`]
/// it passes the source through unchanged.
#[derive(Clone, Debug)]
pub struct ZeroVelocity<S> {
    params: ParamSet<S>,
    chunk_dim: usize,
    window: usize,
}

impl<S: Scalar> ZeroVelocity<S> {
    pub fn new(chunk_dim: usize, window: usize) -> Self {
        Self {
            params: ParamSet::new(),
            chunk_dim,
            window,
        }
    }
}

impl<S: Scalar> CausalModel<S> for ZeroVelocity<S> {
    type Entry = ();
    type ChunkCond = EditChunkCond<S>;

    fn params(&self) -> &ParamSet<S> {
        &self.params
    }

    fn chunk_dim(&self) -> usize {
        self.chunk_dim
    }

    fn window(&self) -> usize {
        self.window
    }

    fn chunk_velocity(
        &self,
        g: &mut Graph<S>,
        _: &Bound,
        x: Var,
        _: S,
        _: usize,
        _: &EditChunkCond<S>,
        _: &[&()],
    ) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        Ok(g.constant(&Tensor::zeros(&shape)))
    }

    fn chunk_entry(&self, _: &mut Graph<S>, _: &Bound, _: Var, _: usize, _: &EditChunkCond<S>, _: &[&()]) -> Result<()> {
        Ok(())
    }
}

/// Timing source for the runtime.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Clock {
    /// Real elapsed time; configured delays are slept on top of the work.
    Wall,
    /// Virtual time: every stage takes exactly its configured delay.
    Simulated,
}

/// Per-chunk stage delays in ms for `[capture, encode, denoise, decode]`.
/// Each list is indexed by chunk and repeats its last value when short.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StageDelays {
    pub stages: [Vec<f64>; 4],
}

pub const STAGES: [&str; 4] = ["capture", "encode", "denoise", "decode"];

impl StageDelays {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn constant(ms: [f64; 4]) -> Self {
        Self {
            stages: ms.map(|m| vec![m]),
        }
    }

    /// Real-time camera plus the profile's autoencoder and model costs.
    pub fn from_profile(p: &TimingProfile, chunks: usize) -> Self {
        let mut stages: [Vec<f64>; 4] = Default::default();
        let next = steady_stage_ms(p);
        for k in 0..chunks {
            let (frames, [e, m, d]) = if k == 0 {
                (p.first_chunk_frames, [p.ae_ms_first / 2.0, p.model_ms_first, p.ae_ms_first / 2.0])
            } else {
                (p.next_chunk_frames, next)
            };
            stages[0].push(1000.0 * frames as f64 / p.capture_fps);
            stages[1].push(e);
            stages[2].push(m);
            stages[3].push(d);
        }
        Self { stages }
    }

    pub fn get(&self, stage: usize, chunk: usize) -> f64 {
        let s = &self.stages[stage];
        s.get(chunk).or(s.last()).copied().unwrap_or(0.0)
    }
}

#[derive(Clone, Debug)]
pub struct StreamConfig {
    pub mode: Mode,
    pub clock: Clock,
    pub delays: StageDelays,
    pub chunk_latents: usize,
}

/// A stage waited for input after it became free.
#[derive(Clone, Debug, PartialEq)]
pub struct StallEvent {
    pub stage: &'static str,
    pub chunk: usize,
    pub waited_ms: f64,
}

/// Start and end of each stage for one chunk, ms since the run started.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ChunkTimes {
    pub chunk: usize,
    pub stages: [(f64, f64); 4],
}

/// Bookkeeping of emitted output.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StreamState {
    pub chunks_emitted: usize,
    pub frames_emitted: usize,
    pub times: Vec<ChunkTimes>,
    /// Cache entries held by the denoise stage after the last chunk.
    pub cache_len: usize,
}

/// Frames on screen after `chunks` chunks: the first chunk carries one frame
/// plus whole groups, later chunks whole groups only.
pub fn emitted_frames(chunks: usize, chunk_latents: usize) -> usize {
    match chunks {
        0 => 0,
        k => 1 + TEMPORAL * (chunk_latents - 1) + TEMPORAL * chunk_latents * (k - 1),
    }
}

impl StreamState {
    fn emit(&mut self, chunk: usize, frames: usize, times: ChunkTimes, chunk_latents: usize) -> Result<()> {
        if chunk != self.chunks_emitted {
            return Err(Error::Pipeline(format!(
                "chunk {chunk} emitted after {} chunks",
                self.chunks_emitted
            )));
        }
        self.chunks_emitted += 1;
        self.frames_emitted += frames;
        if self.frames_emitted != emitted_frames(self.chunks_emitted, chunk_latents) {
            return Err(Error::Pipeline(format!(
                "{} frames emitted after {} chunks",
                self.frames_emitted, self.chunks_emitted
            )));
        }
        self.times.push(times);
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StageStats {
    pub stage: &'static str,
    pub mean_ms: f64,
    pub max_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TimingReport {
    pub stages: Vec<StageStats>,
    pub first_chunk_latency_ms: f64,
    /// Mean spacing of output chunks in steady state; `None` for one chunk.
    pub period_ms: Option<f64>,
    pub fps: Option<f64>,
    pub chunks: usize,
    pub frames: usize,
}

/// Summarises a finished run.
pub fn measure(state: &StreamState, chunk_latents: usize) -> TimingReport {
    let n = state.times.len();
    let stages = (0..4)
        .map(|s| {
            let d: Vec<f64> = state.times.iter().map(|t| t.stages[s].1 - t.stages[s].0).collect();
            StageStats {
                stage: STAGES[s],
                mean_ms: if n > 0 { d.iter().sum::<f64>() / n as f64 } else { 0.0 },
                max_ms: d.iter().cloned().fold(0.0, f64::max),
            }
        })
        .collect();
    let ends: Vec<f64> = state.times.iter().map(|t| t.stages[3].1).collect();
    // the first chunk is a different size, so steady state starts at the second
    let period_ms = match n {
        0 | 1 => None,
        2 => Some(ends[1] - ends[0]),
        _ => Some((ends[n - 1] - ends[1]) / (n - 2) as f64),
    };
    TimingReport {
        stages,
        first_chunk_latency_ms: ends.first().copied().unwrap_or(0.0),
        period_ms,
        fps: period_ms.map(|p| 1000.0 * (TEMPORAL * chunk_latents) as f64 / p),
        chunks: state.chunks_emitted,
        frames: state.frames_emitted,
    }
}

pub struct StreamOutput<S> {
    pub video: RgbVideo<S>,
    pub state: StreamState,
    pub report: TimingReport,
    pub stalls: Vec<StallEvent>,
}

struct Msg<T> {
    chunk: usize,
    payload: T,
    times: ChunkTimes,
}

/// Per-stage clock: wall time since start, or a virtual cursor.
struct StageClock {
    clock: Clock,
    origin: Instant,
    free_at: f64,
}

impl StageClock {
    fn now(&self) -> f64 {
        self.origin.elapsed().as_secs_f64() * 1000.0
    }

    /// Runs `work` for a chunk whose input became ready at `ready`; returns
    /// `(start, end, waited)`.
    fn run<T>(&mut self, ready: f64, delay: f64, work: impl FnOnce() -> Result<T>) -> Result<(T, f64, f64, f64)> {
        match self.clock {
            Clock::Simulated => {
                let start = ready.max(self.free_at);
                let waited = (ready - self.free_at).max(0.0);
                let out = work()?;
                self.free_at = start + delay;
                Ok((out, start, self.free_at, waited))
            }
            Clock::Wall => {
                let start = self.now();
                let waited = (start - self.free_at).max(0.0);
                let out = work()?;
                if delay > 0.0 {
                    thread::sleep(Duration::from_secs_f64(delay / 1000.0));
                }
                self.free_at = self.now();
                Ok((out, start, self.free_at, waited))
            }
        }
    }
}

/// Streams `source` through encode, the editor and decode chunk by chunk.
/// Stages are threads joined by FIFO queues of capacity one.
pub fn run_stream<S: Scalar, E: ChunkEditor<S>>(
    source: &RgbVideo<S>,
    codec: &Codec,
    editor: &mut E,
    config: &StreamConfig,
) -> Result<StreamOutput<S>> {
    if source.len() % TEMPORAL != 1 {
        return Err(Error::invalid(format!("source of {} frames is not 1 + 4k", source.len())));
    }
    let latents = (source.len() - 1) / TEMPORAL + 1;
    let plan = chunk_boundaries(latents, config.chunk_latents)?;
    let n_chunks = plan.len();
    let fps = source.fps;
    let origin = Instant::now();
    let clock = |free_at| StageClock {
        clock: config.clock,
        origin,
        free_at,
    };
    let delays = &config.delays;
    let sequential = config.mode == Mode::Sequential;

    let (cap_tx, cap_rx) = bounded::<Msg<(usize, RgbVideo<S>)>>(1);
    let (enc_tx, enc_rx) = bounded::<Msg<LatentVideo<S>>>(1);
    let (den_tx, den_rx) = bounded::<Msg<LatentVideo<S>>>(1);
    let (dec_tx, dec_rx) = bounded::<Msg<RgbVideo<S>>>(1);
    // sequential mode: the sink releases the next chunk once the previous one is out
    let (done_tx, done_rx) = bounded::<f64>(1);

    thread::scope(|scope| {
        let capture = scope.spawn(move || -> Result<()> {
            let mut clk = clock(0.0);
            let mut offset = 0;
            let mut gate = 0.0;
            for (k, &(frames, _)) in plan.iter().enumerate() {
                if sequential && k > 0 {
                    gate = match done_rx.recv() {
                        Ok(t) => t,
                        Err(_) => return Ok(()),
                    };
                }
                let (chunk, start, end, _) = clk.run(0.0, delays.get(0, k), || source.slice(offset, frames))?;
                let mut times = ChunkTimes {
                    chunk: k,
                    ..Default::default()
                };
                times.stages[0] = (start, end);
                let ready = match config.clock {
                    Clock::Simulated => end.max(gate),
                    Clock::Wall => end,
                };
                times.stages[1].0 = ready;
                if cap_tx
                    .send(Msg {
                        chunk: k,
                        payload: (offset, chunk),
                        times,
                    })
                    .is_err()
                {
                    return Ok(());
                }
                offset += frames;
            }
            Ok(())
        });

        let encode = scope.spawn(move || -> Result<Vec<StallEvent>> {
            let mut clk = clock(0.0);
            let mut stalls = Vec::new();
            for mut m in cap_rx {
                let (offset, video) = &m.payload;
                let ready = m.times.stages[1].0;
                let (lat, start, end, waited) =
                    clk.run(ready, delays.get(1, m.chunk), || codec.encode_frames(video, *offset))?;
                if m.chunk > 0 && waited > 0.0 {
                    stalls.push(StallEvent {
                        stage: STAGES[1],
                        chunk: m.chunk,
                        waited_ms: waited,
                    });
                }
                m.times.stages[1] = (start, end);
                if enc_tx
                    .send(Msg {
                        chunk: m.chunk,
                        payload: lat,
                        times: m.times,
                    })
                    .is_err()
                {
                    break;
                }
            }
            Ok(stalls)
        });

        let denoise = scope.spawn(move || -> Result<()> {
            let mut clk = clock(0.0);
            for mut m in enc_rx {
                let ready = m.times.stages[1].1;
                let src = m.payload.latents.clone();
                let (edited, start, end, _) = clk.run(ready, delays.get(2, m.chunk), || editor.edit(m.chunk, &src))?;
                m.times.stages[2] = (start, end);
                let out = LatentVideo {
                    latents: edited,
                    spans: m.payload.spans,
                };
                if den_tx
                    .send(Msg {
                        chunk: m.chunk,
                        payload: out,
                        times: m.times,
                    })
                    .is_err()
                {
                    break;
                }
            }
            Ok(())
        });

        let decode = scope.spawn(move || -> Result<()> {
            let mut clk = clock(0.0);
            for mut m in den_rx {
                let ready = m.times.stages[2].1;
                let (rgb, start, end, _) = clk.run(ready, delays.get(3, m.chunk), || codec.decode(&m.payload, fps))?;
                m.times.stages[3] = (start, end);
                if dec_tx
                    .send(Msg {
                        chunk: m.chunk,
                        payload: rgb,
                        times: m.times,
                    })
                    .is_err()
                {
                    break;
                }
            }
            Ok(())
        });

        let mut state = StreamState::default();
        let mut parts = Vec::with_capacity(n_chunks);
        let mut sink_err = None;
        for m in dec_rx {
            let end = m.times.stages[3].1;
            if let Err(e) = state.emit(m.chunk, m.payload.len(), m.times, config.chunk_latents) {
                sink_err = Some(e);
                break;
            }
            parts.push(m.payload);
            if sequential && state.chunks_emitted < n_chunks {
                let _ = done_tx.send(end);
            }
        }
        drop(done_tx);
        let join = |h: thread::ScopedJoinHandle<'_, Result<()>>| {
            h.join().map_err(|_| Error::Pipeline("stage panicked".into()))?
        };
        join(capture)?;
        let stalls = encode.join().map_err(|_| Error::Pipeline("stage panicked".into()))??;
        join(denoise)?;
        join(decode)?;
        if let Some(e) = sink_err {
            return Err(e);
        }
        if state.chunks_emitted != n_chunks {
            return Err(Error::Pipeline(format!(
                "{} of {n_chunks} chunks emitted",
                state.chunks_emitted
            )));
        }
        let report = measure(&state, config.chunk_latents);
        Ok(StreamOutput {
            video: RgbVideo::concat(&parts)?,
            state,
            report,
            stalls,
        })
    })
}
