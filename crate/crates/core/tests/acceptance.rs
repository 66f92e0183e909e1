//! Acceptance run: one PASS/FAIL line per criterion, non-zero exit if any fails.
//!
//! `cargo test -p rtedit-core --test acceptance` runs all ten; pass criterion
//! numbers (`-- 3 7`) to run a subset.

// `ensure!(a <= tol)` must fail on NaN, so negated comparisons are wanted.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod common;

use std::collections::BTreeMap;
use std::panic::{self, AssertUnwindSafe};
use std::path::PathBuf;
use std::time::Instant;

use rand::Rng as _;
use serde::Deserialize;

use common::{chunk_changed, fixture, frames, full_causal, incremental, recompute, small};
use rtedit_core::benchmark::{
    build_benchmark, preference_agreement, aggregate, BenchEntry, Choice, Metric, PreferenceSample, ScoreRecord, Source,
    Task, Templates,
};
use rtedit_core::codec::{chunk_boundaries, frames_for_latents, Codec, LatentVideo, RgbVideo};
use rtedit_core::curation::{
    build_pairs, dataset_stats, interaction_gate, Category, Clip, EditPair, GateThresholds, GenerativeEditor,
    HandGeometry, MockEditor, PairPolicy, Pixel, RetentionLedger, Version, VersionContent,
};
use rtedit_core::distill::toys::{dmd_mixture, self_forcing_ar, ArSetup, MixtureSetup};
use rtedit_core::distill::{column_block, critic_ratio, self_rollout, student_sample, teacher_forced_rollout};
use rtedit_core::flow::{euler_sample, rf_loss_fixed, NfeCounter, SamplerConfig, VelocityModel};
use rtedit_core::model::{
    attention_cost, build_chunk_causal_mask, token_count, AttentionMask, CausalModel, Conditioning, EditChunkCond,
    EditorModel, ModelConfig,
};
use rtedit_core::stream::{
    emitted_frames, first_chunk_latency, recording_ms, run_stream, throughput, Clock, Init, Mode, RolloutEditor,
    StageDelays, StreamConfig, TimingProfile, ZeroVelocity,
};
use rtedit_core::tensor::gradcheck::check;
use rtedit_core::tensor::{MacTag, NormKind, Unary};
use rtedit_core::toy::{fit_gaussian, ArProcess, ChunkMlp, GaussianFitSetup, MlpVelocity};
use rtedit_core::{rng, Bound, Graph, ParamSet, Result, Tensor, Var};

type Outcome = std::result::Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
}

fn fixture_text(name: &str) -> String {
    std::fs::read_to_string(root().join("tests/fixtures").join(name)).unwrap()
}

fn profile(name: &str) -> TimingProfile {
    TimingProfile::load(&root().join("../../profiles").join(name)).unwrap()
}

// ---------------------------------------------------------------- 1

type OpFn = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>>;

fn ops() -> Vec<(&'static str, Vec<Vec<usize>>, OpFn)> {
    let tri: Vec<bool> = (0..16).map(|i| i % 4 <= i / 4).collect();
    let tri2 = tri.clone();
    let mut out: Vec<(&'static str, Vec<Vec<usize>>, OpFn)> = vec![
        ("matmul", vec![vec![3, 4], vec![4, 5]], Box::new(|g, v| g.matmul(v[0], v[1]))),
        ("transpose", vec![vec![3, 4]], Box::new(|g, v| g.transpose(v[0]))),
        ("add", vec![vec![3, 4], vec![4]], Box::new(|g, v| g.add(v[0], v[1]))),
        ("sub", vec![vec![4], vec![2, 3, 4]], Box::new(|g, v| g.sub(v[0], v[1]))),
        ("mul", vec![vec![2, 3, 4], vec![3, 4]], Box::new(|g, v| g.mul(v[0], v[1]))),
        ("scale", vec![vec![5]], Box::new(|g, v| Ok(g.scale(v[0], -1.7)))),
        ("add_const", vec![vec![5]], Box::new(|g, v| Ok(g.add_const(v[0], 0.3)))),
        ("softmax0", vec![vec![4, 5]], Box::new(|g, v| g.softmax(v[0], 0))),
        ("softmax1", vec![vec![4, 5]], Box::new(|g, v| g.softmax(v[0], 1))),
        ("softmax_masked", vec![vec![4, 4]], Box::new(move |g, v| g.softmax_masked(v[0], 1, Some(tri.clone())))),
        ("rms_norm", vec![vec![3, 6]], Box::new(|g, v| g.normalize(v[0], NormKind::RmsNorm, 1, 1e-6))),
        ("qk_norm", vec![vec![3, 6]], Box::new(|g, v| g.normalize(v[0], NormKind::QkNorm, 1, 1e-6))),
        ("sum", vec![vec![3, 4]], Box::new(|g, v| Ok(g.sum(v[0])))),
        ("mean", vec![vec![3, 4]], Box::new(|g, v| Ok(g.mean(v[0])))),
        ("sq_dist", vec![vec![3, 4], vec![3, 4]], Box::new(|g, v| g.sq_dist(v[0], v[1]))),
        ("reshape", vec![vec![3, 4]], Box::new(|g, v| g.reshape(v[0], &[2, 6]))),
        ("slice_cols", vec![vec![3, 6]], Box::new(|g, v| g.slice_cols(v[0], 1, 3))),
        ("slice_rows", vec![vec![5, 2]], Box::new(|g, v| g.slice_rows(v[0], 1, 3))),
        ("concat_cols", vec![vec![3, 2], vec![3, 4]], Box::new(|g, v| g.concat_cols(&[v[0], v[1], v[0]]))),
        ("concat_rows", vec![vec![2, 3], vec![4, 3]], Box::new(|g, v| g.concat_rows(&[v[1], v[0]]))),
        ("gather_rows", vec![vec![4, 3]], Box::new(|g, v| g.gather_rows(v[0], &[3, 0, 3, 1]))),
        ("gather", vec![vec![2, 3]], Box::new(|g, v| g.gather(v[0], &[5, 0, 0, 2, 4, 1, 3, 3], &[2, 4]))),
        (
            "rope",
            vec![vec![3, 4]],
            Box::new(|g, v| {
                let ang: Vec<f64> = (0..6).map(|i| 0.4 * i as f64 - 1.0).collect();
                g.rope(v[0], ang.iter().map(|a| a.cos()).collect(), ang.iter().map(|a| a.sin()).collect())
            }),
        ),
        (
            "attention",
            vec![vec![4, 6], vec![4, 6], vec![4, 6]],
            Box::new(move |g, v| {
                let q = g.normalize(v[0], NormKind::RmsNorm, 1, 1e-6)?;
                let k = g.normalize(v[1], NormKind::RmsNorm, 1, 1e-6)?;
                let kt = g.transpose(k)?;
                let s = g.matmul(q, kt)?;
                let s = g.scale(s, 1.0 / 6f64.sqrt());
                let a = g.softmax_masked(s, 1, Some(tri2.clone()))?;
                g.matmul(a, v[2])
            }),
        ),
    ];
    for (name, kind) in [
        ("silu", Unary::Silu),
        ("gelu", Unary::Gelu),
        ("sigmoid", Unary::Sigmoid),
        ("tanh", Unary::Tanh),
        ("square", Unary::Square),
        ("neg", Unary::Neg),
        ("exp", Unary::Exp),
    ] {
        out.push((name, vec![vec![3, 5]], Box::new(move |g, v| Ok(g.unary(v[0], kind)))));
    }
    out
}

fn readout(g: &mut Graph<f64>, v: Var, seed: u64) -> Result<Var> {
    let w = rng::randn::<f64>(&mut rng::seeded(seed), g.shape(v));
    let w = g.constant(&w);
    let p = g.mul(v, w)?;
    Ok(g.sum(p))
}

fn gradients() -> Outcome {
    const H: f64 = 1e-5;
    let start = Instant::now();
    let mut worst = 0.0f64;
    let list = ops();
    for (i, (name, shapes, f)) in list.iter().enumerate() {
        let mut r = rng::seeded(100 + i as u64);
        let xs: Vec<Tensor<f64>> = shapes.iter().map(|s| rng::randn(&mut r, s)).collect();
        let rep = check(&xs, |g, v| f(g, v).and_then(|o| readout(g, o, 99)), H, None, &mut rng::seeded(0)).unwrap();
        ensure!(rep.checked > 0, "{name}: nothing checked");
        ensure!(rep.max_rel_error < 1e-4, "{name}: max rel error {:e}", rep.max_rel_error);
        worst = worst.max(rep.max_rel_error);
    }

    let cfg = ModelConfig {
        blocks: 2,
        hidden: 16,
        heads: 2,
        latent_channels: 4,
        latent_height: 4,
        latent_width: 4,
        text_dim: 8,
        chunk_latents: 3,
        window_chunks: 5,
        mask_first_for_last: true,
        ..ModelConfig::default()
    };
    let mut r = rng::seeded(5);
    let mut model = EditorModel::<f64>::new(cfg.clone(), &mut r).unwrap();
    let mut params: ParamSet<f64> = VelocityModel::params(&model).clone();
    for t in params.tensors_mut() {
        for x in t.data_mut() {
            *x += 0.2 * rng::normal::<f64>(&mut r);
        }
    }
    model.set_params(params.clone()).unwrap();
    let shape = [2 * cfg.chunk_latents, cfg.latent_channels, cfg.latent_height, cfg.latent_width];
    let src = rng::randn::<f64>(&mut r, &shape);
    let tgt = rng::randn::<f64>(&mut r, &shape);
    let text = rng::randn::<f64>(&mut r, &[3, cfg.text_dim]);
    let mask = build_chunk_causal_mask(2, cfg.tokens_per_chunk(), cfg.window_chunks, false).unwrap();
    let np = params.len();
    let mut all: Vec<Tensor<f64>> = params.tensors().to_vec();
    all.extend([src, tgt, text]);
    let rep = check(
        &all,
        |g, v| {
            let p = Bound::from(v[..np].to_vec());
            let out = model.forward(g, &p, v[np], v[np + 1], &[0.3, 0.7], v[np + 2], &mask)?;
            readout(g, out, 7)
        },
        H,
        None,
        &mut rng::seeded(0),
    )
    .unwrap();
    ensure!(rep.checked == all.iter().map(Tensor::len).sum::<usize>(), "editor: partial check");
    ensure!(rep.max_rel_error < 1e-4, "editor: max rel error {:e}", rep.max_rel_error);
    worst = worst.max(rep.max_rel_error);
    let secs = start.elapsed().as_secs_f64();
    ensure!(secs < 120.0, "took {secs:.1}s");
    Ok(format!("{} ops + editor ({} coords), max rel err {worst:.2e}, {secs:.1}s", list.len(), rep.checked))
}

// ---------------------------------------------------------------- 2

struct Oracle {
    params: ParamSet<f64>,
    v: Tensor<f64>,
}

impl VelocityModel<f64> for Oracle {
    type Cond = ();

    fn params(&self) -> &ParamSet<f64> {
        &self.params
    }

    fn velocity(&self, g: &mut Graph<f64>, _: &Bound, _: Var, _: &[f64], _: Option<&()>) -> Result<Var> {
        Ok(g.constant(&self.v))
    }
}

fn flow() -> Outcome {
    let mut r = rng::seeded(1);
    let x0 = rng::randn::<f64>(&mut r, &[16, 3]);
    let x1 = rng::randn::<f64>(&mut r, &[16, 3]);
    let v = x1.data().iter().zip(x0.data()).map(|(a, b)| a - b).collect();
    let oracle = Oracle {
        params: ParamSet::new(),
        v: Tensor::new(vec![16, 3], v).unwrap(),
    };
    let mut g = Graph::new();
    let p = oracle.params.bind(&mut g, false);
    let (a, b) = (g.constant(&x1), g.constant(&x0));
    let t: Vec<f64> = (0..16).map(|i| i as f64 / 15.0).collect();
    let loss = rf_loss_fixed(&oracle, &mut g, &p, a, b, &t, None).unwrap();
    ensure!(g.item(loss) == 0.0, "oracle loss {}", g.item(loss));
    for steps in [1, 40] {
        let out = euler_sample(&oracle, &x0, &SamplerConfig::uniform(steps, 1.0).unwrap(), None).unwrap();
        let err = out.max_abs_diff(&x1);
        ensure!(err < 1e-12, "{steps}-step euler error {err:e}");
    }
    let setup = GaussianFitSetup::default();
    let rep = fit_gaussian(&setup).unwrap();
    ensure!(rep.losses.len() == 2000 && setup.eval_draws == 10_000, "fit setup drifted");
    let (dm, dc) = (rep.mean_error(&setup.mean), rep.cov_error(&setup.cov));
    ensure!(dm <= 0.05 && dc <= 0.1, "mean err {dm:.4}, cov err {dc:.4}");
    Ok(format!("oracle loss 0, euler exact, gaussian mean err {dm:.4} cov err {dc:.4}"))
}

// ---------------------------------------------------------------- 3

fn causality() -> Outcome {
    // exact no-future-influence
    let f = fixture::<f64>(small(2, 5, false), 5, 13);
    let t = vec![0.2, 0.4, 0.6, 0.8, 0.5];
    let base = full_causal(&f.model, &f.src, &f.noisy, &t, &f.text, false);
    for j in 0..5 {
        let mut bumped = f.noisy.clone();
        let per = bumped.len() / 5;
        for v in &mut bumped.data_mut()[j * per..(j + 1) * per] {
            *v += 0.5;
        }
        let out = full_causal(&f.model, &f.src, &bumped, &t, &f.text, false);
        for k in 0..5 {
            let same = frames(&out, 3 * k, 3) == frames(&base, 3 * k, 3);
            ensure!(same == (k < j), "perturbing chunk {j} vs output chunk {k}");
        }
    }

    let mut worst = 0.0f64;
    for (blocks, window, mask_first) in [(2, 5, true), (2, 3, false)] {
        let f = fixture::<f32>(small(blocks, window, mask_first), 7, 11);
        for (k, v) in incremental(&f, 7, 0.4, mask_first).iter().enumerate() {
            let oracle = recompute(&f, k, 7, 0.4, mask_first);
            let err = v.clone().reshape(oracle.shape()).unwrap().max_abs_diff(&oracle);
            ensure!(err < 1e-5, "blocks {blocks} window {window}: chunk {k} error {err:e}");
            worst = worst.max(err);
        }
    }

    let cfg = small(1, 5, false);
    let f = fixture::<f64>(cfg.clone(), 7, 14);
    for j in 0..7 {
        ensure!(chunk_changed(&f, &cfg, 7, j, false) == (j >= 2), "window-5 locality at chunk {j}");
    }
    let cfg = small(1, 7, true);
    let f = fixture::<f64>(cfg.clone(), 7, 16);
    ensure!(!chunk_changed(&f, &cfg, 7, 0, true), "masked last chunk sees chunk 0");
    ensure!(chunk_changed(&f, &cfg, 7, 0, false), "unmasked last chunk ignores chunk 0");
    ensure!(chunk_changed(&f, &cfg, 7, 1, true), "masked last chunk ignores chunk 1");
    Ok(format!("incremental vs full max err {worst:.1e} over 7 chunks"))
}

// ---------------------------------------------------------------- 4

fn self_attention_macs(conditioning: Conditioning) -> (u64, usize) {
    let cfg = ModelConfig {
        blocks: 1,
        conditioning,
        ..ModelConfig::default()
    };
    let mut r = rng::seeded(2);
    let m = EditorModel::<f32>::new(cfg.clone(), &mut r).unwrap();
    let shape = [3, 4, 8, 8];
    let src = rng::randn::<f32>(&mut r, &shape);
    let tgt = rng::randn::<f32>(&mut r, &shape);
    let n = token_count(&shape, 2).unwrap();
    let seq = match conditioning {
        Conditioning::Channel => n,
        Conditioning::Sequence => 2 * n,
    };
    let mut g = Graph::new();
    let p = CausalModel::params(&m).bind(&mut g, false);
    let (s, x) = (g.constant(&src), g.constant(&tgt));
    let c = g.constant(&Tensor::zeros(&[2, cfg.text_dim]));
    m.forward(&mut g, &p, s, x, &[0.5], c, &AttentionMask::full(seq)).unwrap();
    (g.macs(MacTag::AttnScores), seq)
}

fn conditioning_cost() -> Outcome {
    let n = token_count(&[3, 4, 8, 8], 2).unwrap();
    let (channel, n1) = self_attention_macs(Conditioning::Channel);
    let (sequence, n2) = self_attention_macs(Conditioning::Sequence);
    ensure!(n1 == n, "channel concat changed token count {n} -> {n1}");
    ensure!(n2 == 2 * n, "sequence concat gives {n2} tokens, want {}", 2 * n);
    let a1 = attention_cost(n1, 64, 4).unwrap();
    let a2 = attention_cost(n2, 64, 4).unwrap();
    ensure!(a2.scores == 4 * a1.scores, "analytic ratio {} / {}", a2.scores, a1.scores);
    ensure!(channel == a1.scores && sequence == a2.scores, "counter {channel}/{sequence} vs analytic {}/{}", a1.scores, a2.scores);
    Ok(format!("{n1} -> {n2} tokens, score MACs {channel} -> {sequence} (4x, counter = analytic)"))
}

// ---------------------------------------------------------------- 5

fn latency_table() -> Outcome {
    let none = profile("no_distill.toml");
    let dmd = profile("dmd.toml");
    let sf = profile("self_forcing.toml");
    let totals = [first_chunk_latency(&sf).total_ms, first_chunk_latency(&dmd).total_ms, first_chunk_latency(&none).total_ms];
    ensure!(totals == [855.0, 6925.0, 13432.0], "latency totals {totals:?}");
    ensure!(recording_ms(9, 16.0) == 562.0 && recording_ms(81, 16.0) == 5062.0, "recording times");
    let fps_none = throughput(&none, Mode::Sequential).unwrap();
    let fps_dmd = throughput(&dmd, Mode::Sequential).unwrap();
    ensure!((fps_none - 9.68).abs() < 0.05 && (fps_dmd - 43.5).abs() < 0.05, "throughputs {fps_none:.3} / {fps_dmd:.3}");

    let m = MlpVelocity::<f64>::new(1, 0, 8, &mut rng::seeded(1));
    let z = rng::randn::<f64>(&mut rng::seeded(2), &[5, 1]);
    let teacher = NfeCounter::new(&m);
    euler_sample(&teacher, &z, &SamplerConfig::teacher(3.0).unwrap(), None).unwrap();
    let student = NfeCounter::new(&m);
    student_sample(&student, &z, 4, None).unwrap();
    let chunked = ChunkMlp::<f64>::new(3, 5, 2, 16, &mut rng::seeded(3)).unwrap();
    let (_, records) = self_rollout(&chunked, &[(); 7], 4, true, 2, 9).unwrap();
    let counters = [teacher.count(), student.count(), records[0].nfe];
    ensure!(counters == [80, 4, 4] && records.iter().all(|r| r.nfe == 4), "NFE counters {counters:?}");
    ensure!((none.nfe, dmd.nfe, sf.nfe) == (80, 4, 4), "profile NFE");
    Ok(format!("855/6925/13432 ms, 562/5062 ms, {fps_none:.2}/{fps_dmd:.2} fps, NFE 80/4/4"))
}

// ---------------------------------------------------------------- 6

fn rgb(t: usize, h: usize, w: usize, seed: u64) -> RgbVideo<f32> {
    let mut r = rng::seeded(seed);
    let data = (0..t * 3 * h * w).map(|_| r.random::<f32>()).collect();
    RgbVideo::new(Tensor::new(vec![t, 3, h, w], data).unwrap(), 16.0).unwrap()
}

fn codec() -> Outcome {
    let c = Codec::lossless();
    let mut worst = 0.0f64;
    for (t, seed) in [(1, 1), (9, 2), (81, 3)] {
        let v = rgb(t, 16, 16, seed);
        let err = c.decode(&c.encode(&v).unwrap(), v.fps).unwrap().frames.max_abs_diff(&v.frames);
        ensure!(err < 1e-6, "{t} frames: round trip error {err:e}");
        worst = worst.max(err);
    }
    let b = chunk_boundaries(21, 3).unwrap();
    ensure!(b.len() == 7 && b[0] == (9, 3) && b[1..].iter().all(|&c| c == (12, 3)), "chunk mapping {b:?}");
    ensure!(b.iter().map(|c| c.0).sum::<usize>() == 81 && frames_for_latents(21) == 81, "21 latents vs 81 frames");

    let v = rgb(81, 8, 16, 4);
    let batch = c.encode(&v).unwrap();
    ensure!(batch.len() == 21, "81 frames -> {} latents", batch.len());
    let mut start = 0;
    let mut parts = Vec::new();
    for (frames, _) in b {
        parts.push(c.encode_frames(&v.slice(start, frames).unwrap(), start).unwrap());
        start += frames;
    }
    ensure!(LatentVideo::concat(&parts).unwrap() == batch, "streamed encode differs from batch");
    Ok(format!("round trip max err {worst:.1e}, 9->3 / 12->3, 21 <-> 81, streaming == batch"))
}

// ---------------------------------------------------------------- 7

fn distillation() -> Outcome {
    let start = Instant::now();
    let mix = dmd_mixture(&MixtureSetup::default()).unwrap();
    let e_dmd = mix.student.rel_err(&mix.teacher);
    ensure!(mix.student_nfe == 4, "student NFE {}", mix.student_nfe);
    ensure!(e_dmd <= 0.05, "DMD moments off by {:.1}%", 100.0 * e_dmd);
    ensure!(critic_ratio(&mix.log.records) == Some(5), "DMD critic ratio {:?}", critic_ratio(&mix.log.records));

    let ar = self_forcing_ar(&ArSetup::default()).unwrap();
    let e_sf = ar.student.rel_err(&ar.teacher);
    ensure!(e_sf <= 0.10, "Self-Forcing marginals off by {:.1}%", 100.0 * e_sf);
    ensure!(ar.log.critic_ratio() == Some(10), "Self-Forcing critic ratio {:?}", ar.log.critic_ratio());

    // exposure bias witness: the student's own context differs from the teacher's
    let process = ArProcess {
        n_chunks: 7,
        chunk_dim: 3,
        mu: 2.0,
        rho: 0.8,
        sigma: 0.6,
        s0: 1.0,
    };
    let m = ChunkMlp::<f64>::new(3, 5, 2, 16, &mut rng::seeded(12)).unwrap();
    let truth = process.sample_tensor::<f64>(&mut rng::seeded(3), 4);
    let (own, _) = self_rollout(&m, &[(); 7], 4, true, 4, 99).unwrap();
    let forced = teacher_forced_rollout(&m, &[(); 7], &truth, 4, true, 99).unwrap();
    let block = |t: &Tensor<f64>, k: usize| column_block(t, 3 * k, 3).unwrap();
    ensure!(block(&own, 0) == block(&forced, 0), "first chunk depends on context");
    for k in 1..7 {
        ensure!(block(&own, k).max_abs_diff(&block(&forced, k)) > 1e-6, "chunk {k} ignores its context");
    }
    let secs = start.elapsed().as_secs_f64();
    ensure!(secs < 600.0, "took {secs:.0}s");
    Ok(format!(
        "DMD moments {:.1}% (<5), SF marginals {:.1}% (<10), critic ratios 5/10, {secs:.0}s",
        100.0 * e_dmd,
        100.0 * e_sf
    ))
}

// ---------------------------------------------------------------- 8

fn stream_config(mode: Mode, clock: Clock, delays: StageDelays) -> StreamConfig {
    StreamConfig {
        mode,
        clock,
        delays,
        chunk_latents: 3,
    }
}

fn streaming() -> Outcome {
    let cfg = ModelConfig {
        blocks: 1,
        hidden: 16,
        heads: 2,
        latent_channels: 4,
        latent_height: 2,
        latent_width: 2,
        text_dim: 8,
        chunk_latents: 3,
        window_chunks: 5,
        ..ModelConfig::default()
    };
    let model = EditorModel::<f32>::new(cfg, &mut rng::seeded(3)).unwrap();
    let codec = Codec::lossy(4).unwrap();
    let src = rgb(81, 16, 16, 1);
    let text = rng::randn::<f32>(&mut rng::seeded(5), &[3, 8]);
    let lat = codec.encode(&src).unwrap();
    let conds: Vec<_> = (0..7)
        .map(|k| EditChunkCond {
            src: lat.slice(3 * k, 3).unwrap().latents,
            text: text.clone(),
        })
        .collect();
    let (offline, _) = self_rollout(&model, &conds, 4, true, 1, 42).unwrap();
    let offline = LatentVideo {
        latents: offline.reshape(lat.latents.shape()).unwrap(),
        spans: lat.spans.clone(),
    };
    let offline = codec.decode(&offline, 16.0).unwrap();
    let mut worst = 0.0f64;
    for mode in [Mode::Sequential, Mode::Pipelined] {
        let mut editor = RolloutEditor::new(&model, text.clone(), 4, 7, true, 42, Init::Noise).unwrap();
        let out = run_stream(&src, &codec, &mut editor, &stream_config(mode, Clock::Wall, StageDelays::none())).unwrap();
        let err = out.video.frames.max_abs_diff(&offline.frames);
        ensure!(err <= 1e-5, "{mode:?} stream vs offline {err:e}");
        worst = worst.max(err);
    }
    for k in 1..=7 {
        ensure!(emitted_frames(k, 3) == 9 + 12 * (k - 1), "emitted frames after {k} chunks");
    }

    let lossless = Codec::lossless();
    let zero = ZeroVelocity::new(3 * lossless.latent_channels() * 4, 5);
    let identity = |chunks| RolloutEditor::new(&zero, Tensor::zeros(&[1, 8]), 4, chunks, true, 0, Init::Source).unwrap();
    let mut r = rng::seeded(77);
    for trial in 0..4 {
        let stages: [Vec<f64>; 4] = std::array::from_fn(|_| (0..7).map(|_| 3.0 * r.random::<f64>()).collect());
        let mode = if trial % 2 == 0 { Mode::Pipelined } else { Mode::Sequential };
        let mut editor = identity(7);
        let out = run_stream(&src, &lossless, &mut editor, &stream_config(mode, Clock::Wall, StageDelays { stages })).unwrap();
        let order: Vec<usize> = out.state.times.iter().map(|t| t.chunk).collect();
        ensure!(order == (0..7).collect::<Vec<_>>(), "trial {trial}: chunk order {order:?}");
        ensure!(out.state.frames_emitted == 81, "trial {trial}: {} frames", out.state.frames_emitted);
        ensure!(out.video.frames.max_abs_diff(&src.frames) < 1e-6, "trial {trial}: frames altered");
    }

    let mut editor = identity(7);
    let delays = StageDelays::constant([1.0, 30.0, 50.0, 20.0]);
    let out = run_stream(&src, &lossless, &mut editor, &stream_config(Mode::Pipelined, Clock::Simulated, delays)).unwrap();
    let period = out.report.period_ms.unwrap();
    ensure!((period - 50.0).abs() <= 10.0, "pipelined period {period} ms vs slowest stage 50 ms");
    Ok(format!("stream vs offline max err {worst:.1e}, order kept under random delays, period {period} ms (max stage 50)"))
}

// ---------------------------------------------------------------- 9

fn sources(n: usize, prefix: &str) -> Vec<Source> {
    let objects = ["mug", "knife", "phone", "book", "ball", "bottle", "spoon"];
    (0..n)
        .map(|i| Source {
            id: format!("{prefix}{i:04}"),
            caption: format!("a person holds a {}", objects[i % objects.len()]),
            object: objects[i % objects.len()].to_string(),
            scene: "kitchen".to_string(),
        })
        .collect()
}

#[derive(Deserialize)]
struct PerTaskFixture {
    overall: f64,
    per_task: BTreeMap<Task, f64>,
}

#[derive(Deserialize)]
struct AgreementRow {
    task: Task,
    machine_prefers_a: usize,
    human_prefers_a: usize,
    agree: usize,
}

#[derive(Deserialize)]
struct AgreementFixture {
    samples_per_task: usize,
    overall_percent: f64,
    rows: Vec<AgreementRow>,
}

fn benchmark() -> Outcome {
    let entries = build_benchmark(&sources(100, "s"), &sources(50, "a"), &sources(50, "r"), &Templates::default()).unwrap();
    let change = entries.iter().filter(|e| e.task == Task::ChangeObject).count();
    ensure!(entries.len() == 1700 && change == 400, "{} entries, {change} change-object", entries.len());

    let fx: PerTaskFixture = serde_json::from_str(&fixture_text("per_task_vlm.json")).unwrap();
    let mut scored = Vec::new();
    let mut records = Vec::new();
    for (i, &task) in Task::ALL.iter().enumerate() {
        // uneven per-task counts so a pooled mean would differ
        for _ in 0..=(i % 3) {
            let id = scored.len();
            scored.push(BenchEntry {
                id,
                source_id: format!("v{id}"),
                task,
                instruction: String::new(),
                conditioning_kind: task.conditioning(),
                change_kind: None,
            });
            records.push(ScoreRecord {
                entry_id: id,
                metric: Metric::Vlm,
                value: fx.per_task[&task],
            });
        }
    }
    let overall = aggregate(&records, &scored).unwrap().overall[&Metric::Vlm];
    ensure!((overall - fx.overall).abs() <= 0.01, "overall VLM {overall:.4} vs {}", fx.overall);

    let ag: AgreementFixture = serde_json::from_str(&fixture_text("agreement_vs_baseline1.json")).unwrap();
    let n = ag.samples_per_task;
    let mut samples = Vec::new();
    for row in &ag.rows {
        let both_a = (row.agree + row.machine_prefers_a + row.human_prefers_a - n) / 2;
        let m_only = row.machine_prefers_a - both_a;
        let h_only = row.human_prefers_a - both_a;
        for (count, m, h) in [
            (both_a, Choice::A, Choice::A),
            (m_only, Choice::A, Choice::B),
            (h_only, Choice::B, Choice::A),
            (n - both_a - m_only - h_only, Choice::B, Choice::B),
        ] {
            for _ in 0..count {
                let (score_a, score_b) = if m == Choice::A { (7.0, 5.0) } else { (5.0, 7.0) };
                samples.push(PreferenceSample {
                    task: row.task,
                    score_a,
                    score_b,
                    human: h,
                });
            }
        }
    }
    let rep = preference_agreement(&samples).unwrap();
    let shown = (rep.overall_percent * 10.0).round() / 10.0;
    ensure!(shown == ag.overall_percent, "agreement {:.3}% vs {}%", rep.overall_percent, ag.overall_percent);
    Ok(format!("1700 entries / 400 change-object, overall VLM {overall:.3}, agreement {shown}%"))
}

// ---------------------------------------------------------------- 10

fn square(x0: i32, y0: i32, side: i32) -> Vec<Pixel> {
    (x0..x0 + side).flat_map(|x| (y0..y0 + side).map(move |y| (x, y))).collect()
}

fn versions(variants: usize) -> Vec<Version> {
    let clip = Clip {
        id: "c".into(),
        camera: "cam".into(),
        ..Clip::default()
    };
    let mut vs = vec![Version {
        id: "c/orig".into(),
        clip_id: "c".into(),
        content: VersionContent::Original { object: "cup".into() },
    }];
    let targets = [
        VersionContent::Removed,
        VersionContent::Replaced {
            object: "lemon".into(),
            effect: None,
        },
        VersionContent::Replaced {
            object: "orb".into(),
            effect: Some("frost".into()),
        },
    ];
    for k in 0..variants {
        let mut v = MockEditor.edit(&clip, &targets[k % 3]).unwrap();
        v.id = format!("{}#{k}", v.id);
        vs.push(v);
    }
    vs
}

fn curation() -> Outcome {
    let ledger = RetentionLedger::load(&root().join("tests/fixtures/stage_rates.toml")).unwrap();
    let product: f64 = ledger.stages.iter().map(|s| s.rate()).product();
    ensure!(ledger.cumulative_rate() == product, "ledger {} vs product {product}", ledger.cumulative_rate());
    ensure!((product - 0.018 * 0.496 * 0.436 * 0.378).abs() < 1e-15, "stage rates {product}");

    for k in 1..=8 {
        let n = build_pairs(&versions(k - 1), PairPolicy::AllPermutations).unwrap().len();
        ensure!(n == k * (k - 1), "{k} versions gave {n} pairs");
    }

    let counts: BTreeMap<Category, usize> = serde_json::from_str(&fixture_text("category_counts.json")).unwrap();
    let pairs: Vec<EditPair> = counts
        .iter()
        .flat_map(|(&category, &n)| {
            (0..n).map(move |i| EditPair {
                source_version_id: format!("s{i}"),
                target_version_id: format!("t{i}"),
                instruction: String::new(),
                category,
                source_object: None,
                target_object: None,
            })
        })
        .collect();
    let stats = dataset_stats(&pairs, 50);
    ensure!(stats.total == 99_659, "dataset total {}", stats.total);

    let hand = HandGeometry {
        mask: square(0, 0, 3),
        keypoints: vec![(4.0, 1.0)],
    };
    let object = square(5, 0, 3);
    let at = interaction_gate(&hand, &object, &GateThresholds { edge: 3.0, keypoint: 1.0 });
    ensure!(at.passed && at.edge_distance == Some(3.0) && at.keypoint_distance == Some(1.0), "gate at threshold: {at:?}");
    ensure!(!interaction_gate(&hand, &object, &GateThresholds { edge: 3.0 - 1e-9, keypoint: 1.0 }).passed, "edge below threshold passed");
    ensure!(!interaction_gate(&hand, &object, &GateThresholds { edge: 3.0, keypoint: 1.0 - 1e-9 }).passed, "keypoint below threshold passed");
    ensure!(!interaction_gate(&hand, &[], &GateThresholds::default()).passed, "empty object mask passed");
    Ok(format!("cumulative retention {:.4}%, k(k-1) for k <= 8, total 99659, gate boundary inclusive", 100.0 * product))
}

// ----------------------------------------------------------------

fn main() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("gradient suite", gradients),
        ("flow suite", flow),
        ("causality and caching", causality),
        ("conditioning cost", conditioning_cost),
        ("latency table", latency_table),
        ("codec", codec),
        ("distillation", distillation),
        ("streaming", streaming),
        ("benchmark", benchmark),
        ("curation", curation),
    ];
    let only: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = Vec::new();
    for (i, (name, run)) in criteria.iter().enumerate() {
        let n = i + 1;
        if !only.is_empty() && !only.contains(&n) {
            continue;
        }
        let outcome = panic::catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match outcome {
            Ok(detail) => println!("PASS {n:>2} {name}: {detail}"),
            Err(why) => {
                println!("FAIL {n:>2} {name}: {why}");
                failed.push(n);
            }
        }
    }
    if !failed.is_empty() {
        println!("acceptance: failed criteria {failed:?}");
        std::process::exit(1);
    }
}
