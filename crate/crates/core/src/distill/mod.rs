//! Step distillation. [`Dmd`] compresses a guided many-step teacher into a
//! few-step student with a distribution-matching loss (the minimal
//! score-difference form: real-minus-fake denoised estimates, normalised per
//! sample). [`SelfForcing`] applies the same loss to the chunk-causal
//! student's own autoregressive rollouts.

mod rollout;
pub mod toys;

pub use rollout::*;

use std::io::{BufRead, Write};
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{
    euler_sample, euler_sample_tail, guided_velocity, rf_loss_fixed, SamplerConfig, TimeSampler, VelocityModel,
};
use crate::model::{CausalModel, RollingCache};
use crate::params::{Adam, AdamConfig, Bound, Ema, ParamSet, Trainable};
use crate::rng::{self, Rng};
use crate::tensor::{c, Graph, Scalar, Tensor, Var};

/// Teacher step count the student is distilled from.
pub const TEACHER_STEPS: usize = 40;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DistillConfig {
    pub student_steps: usize,
    pub critic_steps_per_gen: usize,
    pub lr_gen: f64,
    pub lr_critic: f64,
    /// Multiplies both learning rates; 1 for the reference values.
    pub lr_scale: f64,
    pub ema_decay: f64,
    pub n_chunks: usize,
    pub chunk_latents: usize,
    pub window: usize,
    pub batch: usize,
    /// Guidance applied to the real score.
    pub guidance_scale: f64,
    /// Trailing student steps that carry gradient.
    pub grad_steps: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub mask_first_for_last: bool,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self::dmd()
    }
}

impl DistillConfig {
    pub fn dmd() -> Self {
        Self {
            student_steps: 4,
            critic_steps_per_gen: 5,
            lr_gen: 1e-6,
            lr_critic: 4e-7,
            lr_scale: 1.0,
            ema_decay: 0.99,
            n_chunks: 1,
            chunk_latents: 3,
            window: 5,
            batch: 64,
            guidance_scale: 3.0,
            grad_steps: 4,
            weight_decay: 0.1,
            beta1: 0.9,
            beta2: 0.99,
            mask_first_for_last: true,
        }
    }

    pub fn self_forcing() -> Self {
        Self {
            critic_steps_per_gen: 10,
            n_chunks: 7,
            grad_steps: 1,
            ..Self::dmd()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            self.student_steps,
            self.critic_steps_per_gen,
            self.n_chunks,
            self.chunk_latents,
            self.window,
            self.batch,
        ];
        if counts.contains(&0) {
            return Err(Error::invalid("distill counts must be positive"));
        }
        if self.student_steps > TEACHER_STEPS {
            return Err(Error::invalid(format!(
                "student steps {} exceed teacher steps {TEACHER_STEPS}",
                self.student_steps
            )));
        }
        let rates = [self.lr_gen, self.lr_critic, self.lr_scale, self.guidance_scale];
        if rates.iter().any(|r| !(r.is_finite() && *r > 0.0)) {
            return Err(Error::invalid("learning rates and guidance must be positive"));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(Error::invalid(format!("ema decay {} outside [0, 1)", self.ema_decay)));
        }
        if self.grad_steps == 0 || self.grad_steps > self.student_steps {
            return Err(Error::invalid("grad_steps must be in 1..=student_steps"));
        }
        Ok(())
    }

    /// Student time grid, `student_steps + 1` points from 0 to 1.
    pub fn schedule(&self) -> Vec<f64> {
        (0..=self.student_steps)
            .map(|k| k as f64 / self.student_steps as f64)
            .collect()
    }

    /// Start times of the student steps; also the critic's noise levels.
    pub fn grid(&self) -> Vec<f64> {
        let mut s = self.schedule();
        s.pop();
        s
    }

    pub fn total_latents(&self) -> usize {
        self.n_chunks * self.chunk_latents
    }

    fn adam(&self, lr: f64) -> Adam {
        Adam::new(AdamConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            weight_decay: self.weight_decay,
            ..AdamConfig::with_lr(lr * self.lr_scale)
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Critic,
    Generator,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub phase: Phase,
    pub step: usize,
    pub loss: f64,
    /// Student velocity evaluations spent producing the batch.
    pub nfe: usize,
    /// Critic updates since the previous generator update.
    pub critic_steps: usize,
}

/// Update log, serialised one JSON object per line.
#[derive(Clone, Debug, Default)]
pub struct TrainLog {
    pub records: Vec<LogRecord>,
}

impl TrainLog {
    pub fn push(&mut self, r: LogRecord) {
        self.records.push(r);
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        for r in &self.records {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.write_jsonl(std::io::BufWriter::new(std::fs::File::create(path)?))
    }

    pub fn read_jsonl<R: BufRead>(r: R) -> Result<Self> {
        let mut records = Vec::new();
        for line in r.lines() {
            let line = line?;
            if !line.trim().is_empty() {
                records.push(serde_json::from_str(&line)?);
            }
        }
        Ok(Self { records })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_jsonl(std::io::BufReader::new(std::fs::File::open(path)?))
    }

    pub fn critic_ratio(&self) -> Option<usize> {
        critic_ratio(&self.records)
    }
}

/// Critic updates per generator update, counted from the record order.
/// `None` unless every generator update was preceded by the same number.
pub fn critic_ratio(records: &[LogRecord]) -> Option<usize> {
    let mut ratio = None;
    let mut run = 0;
    for r in records {
        match r.phase {
            Phase::Critic => run += 1,
            Phase::Generator => {
                if *ratio.get_or_insert(run) != run {
                    return None;
                }
                run = 0;
            }
        }
    }
    ratio
}

/// The frozen real score and the trainable fake score (critic).
pub struct ScorePair<R, F> {
    pub real: R,
    pub fake: F,
}

/// Few-step student sampling: uniform Euler, no guidance branch.
pub fn student_sample<S: Scalar, M: VelocityModel<S>>(
    student: &M,
    x0: &Tensor<S>,
    steps: usize,
    cond: Option<&M::Cond>,
) -> Result<Tensor<S>> {
    euler_sample(student, x0, &SamplerConfig::uniform(steps, 1.0)?, cond)
}

fn grid_times<S: Scalar>(grid: &[f64], rows: usize, rng: &mut Rng) -> Vec<S> {
    (0..rows)
        .map(|_| S::from_f64(grid[rng.random_range(0..grid.len())]))
        .collect()
}

fn noised<S: Scalar>(x: &Tensor<S>, noise: &Tensor<S>, t: &[S]) -> Tensor<S> {
    let cols = x.shape()[1];
    let data = x
        .data()
        .iter()
        .zip(noise.data())
        .enumerate()
        .map(|(i, (&a, &n))| {
            let ti = t[i / cols];
            (S::one() - ti) * n + ti * a
        })
        .collect();
    Tensor::new(x.shape().to_vec(), data).expect("same shape")
}

/// Denoised estimate `x_t + (1 - t) v(x_t, t)`.
fn denoised<S: Scalar>(xt: &Tensor<S>, v: &[S], t: &[S]) -> Vec<S> {
    let cols = xt.shape()[1];
    xt.data()
        .iter()
        .zip(v)
        .enumerate()
        .map(|(i, (&x, &vi))| x + (S::one() - t[i / cols]) * vi)
        .collect()
}

/// Distribution-matching direction for student samples `x` (`[B, D]`):
/// re-noise at a grid time, take the denoised estimates of both scores and
/// return `(x1_fake - x1_real) / mean|x - x1_real|` per row. Descending along
/// it moves samples toward the real distribution.
#[allow(clippy::too_many_arguments)]
pub fn dmd_direction<S, C, R, F>(
    pair: &ScorePair<R, F>,
    x: &Tensor<S>,
    cond: Option<&C>,
    guidance: f64,
    grid: &[f64],
    rng: &mut Rng,
) -> Result<Tensor<S>>
where
    S: Scalar,
    R: VelocityModel<S, Cond = C>,
    F: VelocityModel<S, Cond = C>,
{
    let (rows, cols) = (x.shape()[0], x.shape()[1]);
    let t = grid_times::<S>(grid, rows, rng);
    let noise = rng::randn::<S>(rng, x.shape());
    let xt = noised(x, &noise, &t);

    let mut g = Graph::new();
    let pr = pair.real.params().bind(&mut g, false);
    let pf = pair.fake.params().bind(&mut g, false);
    let xv = g.constant(&xt);
    let vr = guided_velocity(&pair.real, &mut g, &pr, xv, &t, cond, guidance)?;
    let vf = pair.fake.velocity(&mut g, &pf, xv, &t, cond)?;
    let real = denoised(&xt, g.value(vr), &t);
    let fake = denoised(&xt, g.value(vf), &t);

    let mut out = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        let span = r * cols..(r + 1) * cols;
        let norm: f64 = x.data()[span.clone()]
            .iter()
            .zip(&real[span.clone()])
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .sum::<f64>()
            / cols as f64;
        let norm = S::from_f64(norm + 1e-8);
        out.extend(span.map(|i| (fake[i] - real[i]) / norm));
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// `0.5 || x - sg(x - d) ||^2 / B`, whose gradient in `x` is `d / B`.
pub fn generator_loss<S: Scalar>(g: &mut Graph<S>, x: Var, direction: &Tensor<S>) -> Result<Var> {
    let rows = g.shape(x)[0];
    let xd = g.tensor(x);
    let target: Vec<S> = xd.data().iter().zip(direction.data()).map(|(&a, &d)| a - d).collect();
    let target = g.constant_vec(xd.shape(), target)?;
    let sq = g.sq_dist(x, target)?;
    Ok(g.scale(sq, c::<S>(0.5) / c(rows as f64)))
}

/// Denoising regression of the critic on detached student samples at grid times.
pub fn critic_loss<S: Scalar, F: VelocityModel<S>>(
    critic: &F,
    g: &mut Graph<S>,
    p: &Bound,
    samples: &Tensor<S>,
    cond: Option<&F::Cond>,
    grid: &[f64],
    rng: &mut Rng,
) -> Result<Var> {
    let t = grid_times::<S>(grid, samples.shape()[0], rng);
    let noise = rng::randn::<S>(rng, samples.shape());
    let x1 = g.constant(samples);
    let x0 = g.constant(&noise);
    rf_loss_fixed(critic, g, p, x1, x0, &t, cond)
}

fn finite(loss: f64, what: &str, step: usize) -> Result<f64> {
    if loss.is_finite() {
        Ok(loss)
    } else {
        log::error!("{what} diverged at step {step}: loss {loss}");
        Err(Error::NonFinite {
            what: what.into(),
            step,
        })
    }
}

fn train_critic<S: Scalar, F: VelocityModel<S> + Trainable<S>>(
    critic: &mut F,
    opt: &mut Adam,
    samples: &Tensor<S>,
    cond: Option<&F::Cond>,
    grid: &[f64],
    rng: &mut Rng,
    step: usize,
) -> Result<f64> {
    let mut g = Graph::new();
    let p = critic.params().bind(&mut g, true);
    let loss = critic_loss(&*critic, &mut g, &p, samples, cond, grid, rng)?;
    let l = finite(g.item(loss).as_f64(), "critic loss", step)?;
    let grads = g.backward(loss)?;
    opt.step(critic.params_mut(), &p.grads(&grads));
    Ok(l)
}

/// Losses from one [`Dmd::update`] or [`SelfForcing::update`].
#[derive(Clone, Debug, PartialEq)]
pub struct UpdateStats {
    pub critic_loss: f64,
    pub generator_loss: f64,
}

/// Distribution-matching distillation of a few-step student.
pub struct Dmd<S: Scalar, G, R, F> {
    pub config: DistillConfig,
    pub student: G,
    pub pair: ScorePair<R, F>,
    pub log: TrainLog,
    ema: Ema<S>,
    gen_opt: Adam,
    critic_opt: Adam,
    rng: Rng,
    dim: usize,
    step: usize,
}

impl<S, C, G, R, F> Dmd<S, G, R, F>
where
    S: Scalar,
    G: VelocityModel<S, Cond = C> + Trainable<S>,
    R: VelocityModel<S, Cond = C>,
    F: VelocityModel<S, Cond = C> + Trainable<S>,
{
    /// `dim` is the sample width the student maps noise to.
    pub fn new(config: DistillConfig, student: G, pair: ScorePair<R, F>, dim: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            ema: Ema::new(student.params(), config.ema_decay),
            gen_opt: config.adam(config.lr_gen),
            critic_opt: config.adam(config.lr_critic),
            rng: rng::seeded(seed),
            config,
            student,
            pair,
            log: TrainLog::default(),
            dim,
            step: 0,
        })
    }

    pub fn ema(&self) -> &Ema<S> {
        &self.ema
    }

    pub fn steps(&self) -> usize {
        self.step
    }

    /// Student gradients of the generator loss on a fresh batch.
    pub fn generator_grads(&mut self, cond: Option<&C>) -> Result<(f64, Vec<Tensor<S>>)> {
        let z = rng::randn::<S>(&mut self.rng, &[self.config.batch, self.dim]);
        let mut g = Graph::new();
        let p = self.student.params().bind(&mut g, true);
        let schedule = self.config.schedule();
        let x = euler_sample_tail(&self.student, &mut g, &p, &z, &schedule, self.config.grad_steps, cond)?;
        let xs = g.tensor(x);
        let d = dmd_direction(
            &self.pair,
            &xs,
            cond,
            self.config.guidance_scale,
            &self.config.grid(),
            &mut self.rng,
        )?;
        let loss = generator_loss(&mut g, x, &d)?;
        let l = finite(g.item(loss).as_f64(), "generator loss", self.step)?;
        let grads = g.backward(loss)?;
        Ok((l, p.grads(&grads)))
    }

    /// Critic steps, then one generator step, then the EMA update.
    pub fn update(&mut self, cond: Option<&C>) -> Result<UpdateStats> {
        let grid = self.config.grid();
        let mut critic_loss = 0.0;
        for k in 0..self.config.critic_steps_per_gen {
            let z = rng::randn::<S>(&mut self.rng, &[self.config.batch, self.dim]);
            let x = student_sample(&self.student, &z, self.config.student_steps, cond)?;
            critic_loss = train_critic(
                &mut self.pair.fake,
                &mut self.critic_opt,
                &x,
                cond,
                &grid,
                &mut self.rng,
                self.step,
            )?;
            self.log.push(LogRecord {
                phase: Phase::Critic,
                step: self.step,
                loss: critic_loss,
                nfe: self.config.student_steps,
                critic_steps: k + 1,
            });
        }
        let (generator_loss, grads) = self.generator_grads(cond)?;
        self.gen_opt.step(self.student.params_mut(), &grads);
        if !self.student.params().all_finite() {
            return Err(Error::NonFinite {
                what: "student parameters".into(),
                step: self.step,
            });
        }
        self.ema.update(self.student.params());
        self.log.push(LogRecord {
            phase: Phase::Generator,
            step: self.step,
            loss: generator_loss,
            nfe: self.config.student_steps,
            critic_steps: self.config.critic_steps_per_gen,
        });
        self.step += 1;
        Ok(UpdateStats {
            critic_loss,
            generator_loss,
        })
    }
}

/// Adapts chunk 0 of a causal model (empty context) to the plain
/// [`VelocityModel`] interface, so a one-chunk rollout can be compared with
/// [`student_sample`].
pub struct FirstChunk<'a, S: Scalar, M: CausalModel<S>> {
    pub model: &'a M,
    pub cond: &'a M::ChunkCond,
}

impl<S: Scalar, M: CausalModel<S>> VelocityModel<S> for FirstChunk<'_, S, M> {
    type Cond = ();

    fn params(&self) -> &ParamSet<S> {
        self.model.params()
    }

    fn velocity(&self, g: &mut Graph<S>, p: &Bound, x: Var, t: &[S], _: Option<&()>) -> Result<Var> {
        let t0 = *t.first().ok_or_else(|| Error::invalid("empty batch"))?;
        if t.iter().any(|&ti| ti != t0) {
            return Err(Error::invalid("chunk velocity takes one time per call"));
        }
        self.model.chunk_velocity(g, p, x, t0, 0, self.cond, &[])
    }
}

/// Rollout recorded on `g`: every chunk is denoised from
/// [`chunk_noise`]`(seed, k, ..)` with the last `grad_steps` steps tracked
/// and committed detached. Returns `[batch, n_chunks * chunk_dim]`.
#[allow(clippy::too_many_arguments)]
pub fn training_rollout<S: Scalar, M: CausalModel<S>>(
    model: &M,
    g: &mut Graph<S>,
    p: &Bound,
    conds: &[M::ChunkCond],
    steps: usize,
    mask_first_for_last: bool,
    batch: usize,
    seed: u64,
    grad_steps: usize,
) -> Result<(Var, Vec<ChunkRecord>)> {
    let mut r = Rollout::new(model, steps, conds.len(), mask_first_for_last)?;
    let mut vars = Vec::with_capacity(conds.len());
    for (k, cond) in conds.iter().enumerate() {
        let x0 = chunk_noise(seed, k, batch, model.chunk_dim());
        let x = r.denoise(g, p, &x0, cond, grad_steps)?;
        let clean = g.tensor(x);
        r.commit(&clean, cond)?;
        vars.push(x);
    }
    Ok((g.concat_cols(&vars)?, r.records().to_vec()))
}

/// Teacher-forced rectified-flow loss for a causal model: each chunk of
/// `truth` (`[B, n_chunks * chunk_dim]`) is noised at its own time and
/// regressed with ground-truth context. Mean over chunks.
#[allow(clippy::too_many_arguments)]
pub fn causal_rf_loss<S: Scalar, M: CausalModel<S>>(
    model: &M,
    g: &mut Graph<S>,
    p: &Bound,
    truth: &Tensor<S>,
    conds: &[M::ChunkCond],
    mask_first_for_last: bool,
    sampler: &TimeSampler,
    rng: &mut Rng,
) -> Result<Var> {
    let cd = model.chunk_dim();
    let n = conds.len();
    if truth.shape().len() != 2 || truth.shape()[1] != n * cd {
        return Err(Error::Shape {
            op: "causal rf loss",
            lhs: truth.shape().to_vec(),
            rhs: vec![0, n * cd],
        });
    }
    let rows = truth.shape()[0];
    let mut cache = RollingCache::new(model.window())?;
    let mut total = None;
    for (k, cond) in conds.iter().enumerate() {
        let x1 = column_block(truth, k * cd, cd)?;
        let drop_first = mask_first_for_last && n > 1 && k == n - 1;
        let ctx: Vec<&M::Entry> = cache.visible(k, drop_first)?.into_iter().map(|(_, e)| e).collect();
        let t = S::from_f64(sampler.sample(rng));
        let x0 = rng::randn::<S>(rng, &[rows, cd]);
        let xt = noised(&x1, &x0, &vec![t; rows]);
        let xt = g.constant(&xt);
        let v = model.chunk_velocity(g, p, xt, t, k, cond, &ctx)?;
        let target: Vec<S> = x1.data().iter().zip(x0.data()).map(|(&a, &b)| a - b).collect();
        let target = g.constant_vec(&[rows, cd], target)?;
        let sq = g.sq_dist(v, target)?;
        let term = g.scale(sq, S::one() / c(rows as f64 * n as f64));
        total = Some(match total {
            Some(acc) => g.add(acc, term)?,
            None => term,
        });
        if k + 1 < n {
            let entry = {
                let mut eg = Graph::new();
                let ep = model.params().bind(&mut eg, false);
                let xv = eg.constant(&x1);
                model.chunk_entry(&mut eg, &ep, xv, k, cond, &ctx)?
            };
            cache.push(k, entry)?;
        }
    }
    total.ok_or_else(|| Error::invalid("no chunks"))
}

/// Teacher-forced pretraining of a causal model on batches from `data`.
#[allow(clippy::too_many_arguments)]
pub fn pretrain_causal<S, M, D>(
    model: &mut M,
    opt: &mut Adam,
    steps: usize,
    conds: &[M::ChunkCond],
    mask_first_for_last: bool,
    sampler: &TimeSampler,
    mut data: D,
    rng: &mut Rng,
) -> Result<Vec<f64>>
where
    S: Scalar,
    M: CausalModel<S> + Trainable<S>,
    D: FnMut(&mut Rng) -> Tensor<S>,
{
    let mut losses = Vec::with_capacity(steps);
    for step in 0..steps {
        let truth = data(rng);
        let mut g = Graph::new();
        let p = model.params().bind(&mut g, true);
        let loss = causal_rf_loss(&*model, &mut g, &p, &truth, conds, mask_first_for_last, sampler, rng)?;
        let l = finite(g.item(loss).as_f64(), "causal rf loss", step)?;
        let grads = g.backward(loss)?;
        opt.step(model.params_mut(), &p.grads(&grads));
        losses.push(l);
    }
    Ok(losses)
}

/// Self-rollout distillation of a chunk-causal student. Scores act on the
/// whole `[B, n_chunks * chunk_dim]` rollout.
pub struct SelfForcing<S: Scalar, M, R, F> {
    pub config: DistillConfig,
    pub student: M,
    pub pair: ScorePair<R, F>,
    pub log: TrainLog,
    ema: Ema<S>,
    gen_opt: Adam,
    critic_opt: Adam,
    rng: Rng,
    step: usize,
    last_records: Vec<ChunkRecord>,
}

impl<S, C, M, R, F> SelfForcing<S, M, R, F>
where
    S: Scalar,
    M: CausalModel<S> + Trainable<S>,
    R: VelocityModel<S, Cond = C>,
    F: VelocityModel<S, Cond = C> + Trainable<S>,
{
    pub fn new(config: DistillConfig, student: M, pair: ScorePair<R, F>, seed: u64) -> Result<Self> {
        config.validate()?;
        if student.window() != config.window {
            return Err(Error::invalid(format!(
                "student window {} differs from configured {}",
                student.window(),
                config.window
            )));
        }
        Ok(Self {
            ema: Ema::new(student.params(), config.ema_decay),
            gen_opt: config.adam(config.lr_gen),
            critic_opt: config.adam(config.lr_critic),
            rng: rng::seeded(seed),
            config,
            student,
            pair,
            log: TrainLog::default(),
            step: 0,
            last_records: Vec::new(),
        })
    }

    pub fn ema(&self) -> &Ema<S> {
        &self.ema
    }

    pub fn steps(&self) -> usize {
        self.step
    }

    /// Per-chunk records of the latest generator rollout.
    pub fn last_records(&self) -> &[ChunkRecord] {
        &self.last_records
    }

    fn check_conds(&self, conds: &[M::ChunkCond]) -> Result<()> {
        if conds.len() != self.config.n_chunks {
            return Err(Error::invalid(format!(
                "{} chunk conditions for {} chunks",
                conds.len(),
                self.config.n_chunks
            )));
        }
        Ok(())
    }

    pub fn update(&mut self, conds: &[M::ChunkCond], score_cond: Option<&C>) -> Result<UpdateStats> {
        self.check_conds(conds)?;
        let cfg = self.config.clone();
        let grid = cfg.grid();
        let mut critic_loss = 0.0;
        for k in 0..cfg.critic_steps_per_gen {
            let seed = self.rng.random::<u64>();
            let (x, _) = self_rollout(
                &self.student,
                conds,
                cfg.student_steps,
                cfg.mask_first_for_last,
                cfg.batch,
                seed,
            )?;
            critic_loss = train_critic(
                &mut self.pair.fake,
                &mut self.critic_opt,
                &x,
                score_cond,
                &grid,
                &mut self.rng,
                self.step,
            )?;
            self.log.push(LogRecord {
                phase: Phase::Critic,
                step: self.step,
                loss: critic_loss,
                nfe: cfg.student_steps * cfg.n_chunks,
                critic_steps: k + 1,
            });
        }

        let seed = self.rng.random::<u64>();
        let mut g = Graph::new();
        let p = self.student.params().bind(&mut g, true);
        let (x, records) = training_rollout(
            &self.student,
            &mut g,
            &p,
            conds,
            cfg.student_steps,
            cfg.mask_first_for_last,
            cfg.batch,
            seed,
            cfg.grad_steps,
        )?;
        let xs = g.tensor(x);
        let d = dmd_direction(&self.pair, &xs, score_cond, cfg.guidance_scale, &grid, &mut self.rng)?;
        let loss = generator_loss(&mut g, x, &d)?;
        let generator_loss = finite(g.item(loss).as_f64(), "generator loss", self.step)?;
        let grads = g.backward(loss)?;
        self.gen_opt.step(self.student.params_mut(), &p.grads(&grads));
        if !self.student.params().all_finite() {
            return Err(Error::NonFinite {
                what: "student parameters".into(),
                step: self.step,
            });
        }
        self.ema.update(self.student.params());
        let nfe = records.iter().map(|r| r.nfe).sum();
        self.last_records = records;
        self.log.push(LogRecord {
            phase: Phase::Generator,
            step: self.step,
            loss: generator_loss,
            nfe,
            critic_steps: cfg.critic_steps_per_gen,
        });
        self.step += 1;
        Ok(UpdateStats {
            critic_loss,
            generator_loss,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(phase: Phase) -> LogRecord {
        LogRecord {
            phase,
            step: 0,
            loss: 0.0,
            nfe: 4,
            critic_steps: 0,
        }
    }

    #[test]
    fn ratio_from_records() {
        use Phase::*;
        let seq = |p: &[Phase]| p.iter().map(|&x| rec(x)).collect::<Vec<_>>();
        assert_eq!(critic_ratio(&seq(&[Critic, Critic, Generator, Critic, Critic, Generator])), Some(2));
        assert_eq!(critic_ratio(&seq(&[Critic, Generator, Critic, Critic, Generator])), None);
        assert_eq!(critic_ratio(&seq(&[Critic])), None);
    }

    #[test]
    fn log_round_trip() {
        let mut log = TrainLog::default();
        log.push(rec(Phase::Critic));
        log.push(rec(Phase::Generator));
        let mut buf = Vec::new();
        log.write_jsonl(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(text.lines().count(), 2);
        assert!(text.contains("\"phase\":\"critic\""));
        let back = TrainLog::read_jsonl(buf.as_slice()).unwrap();
        assert_eq!(back.records, log.records);
    }

    #[test]
    fn config_checks() {
        assert!(DistillConfig::dmd().validate().is_ok());
        assert!(DistillConfig::self_forcing().validate().is_ok());
        assert_eq!(DistillConfig::self_forcing().total_latents(), 21);
        let bad = DistillConfig {
            student_steps: 41,
            ..DistillConfig::dmd()
        };
        assert!(bad.validate().is_err());
        assert_eq!(DistillConfig::dmd().grid(), vec![0.0, 0.25, 0.5, 0.75]);
    }

    #[test]
    fn generator_loss_gradient_is_direction_over_batch() {
        let mut g = Graph::<f64>::new();
        let x = g.param(&Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let d = Tensor::new(vec![2, 2], vec![0.5, -1.0, 2.0, 0.0]).unwrap();
        let loss = generator_loss(&mut g, x, &d).unwrap();
        let grads = g.backward(loss).unwrap();
        let gx = grads.tensor(x);
        for (a, b) in gx.data().iter().zip(d.data()) {
            assert!((a - b / 2.0).abs() < 1e-12);
        }
    }
}
