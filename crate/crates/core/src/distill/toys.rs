//! Small end-to-end distillation problems with known answers.

use serde::Serialize;

use super::{pretrain_causal, self_rollout, student_sample, DistillConfig, Dmd, ScorePair, SelfForcing, TrainLog};
use crate::error::Result;
use crate::flow::{euler_sample, train_rf, NfeCounter, SamplerConfig, TimeSampler};
use crate::params::{Adam, AdamConfig, Trainable};
use crate::rng;
use crate::tensor::Tensor;
use crate::toy::{column_stats, ArProcess, ChunkMlp, GaussianFlow, GaussianMixture1d, MlpVelocity};

#[derive(Clone, Debug, Serialize)]
pub struct Moments {
    pub mean: f64,
    pub second: f64,
}

impl Moments {
    pub fn of(t: &Tensor<f64>) -> Self {
        let n = t.len() as f64;
        Self {
            mean: t.data().iter().sum::<f64>() / n,
            second: t.data().iter().map(|x| x * x).sum::<f64>() / n,
        }
    }

    /// Largest relative deviation of either moment from `reference`.
    pub fn rel_err(&self, reference: &Moments) -> f64 {
        let m = ((self.mean - reference.mean) / reference.mean).abs();
        let s = ((self.second - reference.second) / reference.second).abs();
        m.max(s)
    }
}

#[derive(Clone, Debug)]
pub struct MixtureSetup {
    pub teacher_steps: usize,
    pub distill_steps: usize,
    pub hidden: usize,
    pub eval_draws: usize,
    pub seed: u64,
    pub config: DistillConfig,
}

impl Default for MixtureSetup {
    fn default() -> Self {
        Self {
            teacher_steps: 3000,
            distill_steps: 600,
            hidden: 64,
            eval_draws: 10_000,
            seed: 7,
            config: DistillConfig {
                lr_scale: 100.0,
                weight_decay: 0.0,
                batch: 256,
                ..DistillConfig::dmd()
            },
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct MixtureReport {
    pub data: Moments,
    pub teacher: Moments,
    /// The student before distillation, sampled in the same few steps.
    pub undistilled: Moments,
    pub student: Moments,
    pub teacher_nfe: usize,
    pub student_nfe: usize,
    pub critic_ratio: Option<usize>,
    #[serde(skip)]
    pub log: TrainLog,
}

/// Rectified-flow teacher for the two-mode mixture. Times are logit-normal
/// with a wide spread so the denoiser is also fitted near pure noise, and a
/// short low-rate phase settles the weights.
pub fn fit_mixture_teacher(setup: &MixtureSetup) -> Result<MlpVelocity<f64>> {
    let mix = GaussianMixture1d::two_mode();
    let mut rng = rng::seeded(setup.seed);
    let mut teacher = MlpVelocity::<f64>::new(1, 0, setup.hidden, &mut rng);
    let mut opt = Adam::new(AdamConfig::with_lr(2e-3));
    let sampler = TimeSampler::new(0.0, 2.0)?;
    let batch = setup.config.batch;
    for (steps, lr) in [(setup.teacher_steps, 2e-3), (setup.teacher_steps / 3, 2e-4)] {
        opt.config.lr = lr;
        train_rf(
            &mut teacher,
            &mut opt,
            steps,
            &sampler,
            |r| mix.sample_tensor(r, batch),
            None,
            &mut rng,
        )?;
    }
    Ok(teacher)
}

/// Distils a rectified-flow teacher fitted to a two-mode mixture into a
/// few-step student and compares moments against the teacher's own samples.
pub fn dmd_mixture(setup: &MixtureSetup) -> Result<MixtureReport> {
    let mix = GaussianMixture1d::two_mode();
    let teacher = fit_mixture_teacher(setup)?;
    let mut eval = rng::stream(setup.seed, 1);
    let z = rng::randn::<f64>(&mut eval, &[setup.eval_draws, 1]);
    let counted = NfeCounter::new(&teacher);
    let reference = euler_sample(&counted, &z, &SamplerConfig::teacher(setup.config.guidance_scale)?, None)?;
    let teacher_nfe = counted.count();
    let data = Moments::of(&mix.sample_tensor(&mut eval, setup.eval_draws));
    let z = rng::randn::<f64>(&mut eval, &[setup.eval_draws, 1]);
    let steps = setup.config.student_steps;
    let undistilled = Moments::of(&student_sample(&teacher, &z, steps, None)?);

    let pair = ScorePair {
        real: teacher.clone(),
        fake: teacher.clone(),
    };
    let mut dmd = Dmd::new(setup.config.clone(), teacher.clone(), pair, 1, setup.seed ^ 0x5eed)?;
    for _ in 0..setup.distill_steps {
        dmd.update(None)?;
    }
    let mut student = teacher;
    student.set_params(dmd.ema().params().clone());
    let counted = NfeCounter::new(&student);
    let out = student_sample(&counted, &z, steps, None)?;
    Ok(MixtureReport {
        data,
        teacher: Moments::of(&reference),
        undistilled,
        student: Moments::of(&out),
        teacher_nfe,
        student_nfe: counted.count(),
        critic_ratio: dmd.log.critic_ratio(),
        log: dmd.log,
    })
}

#[derive(Clone, Debug)]
pub struct ArSetup {
    pub process: ArProcess,
    pub pretrain_steps: usize,
    pub critic_pretrain_steps: usize,
    pub distill_steps: usize,
    pub hidden: usize,
    pub slots: usize,
    pub eval_draws: usize,
    pub seed: u64,
    pub config: DistillConfig,
}

impl Default for ArSetup {
    fn default() -> Self {
        let config = DistillConfig {
            lr_scale: 1000.0,
            weight_decay: 0.0,
            batch: 128,
            guidance_scale: 1.0,
            ..DistillConfig::self_forcing()
        };
        Self {
            process: ArProcess {
                n_chunks: config.n_chunks,
                chunk_dim: config.chunk_latents,
                mu: 2.0,
                rho: 0.8,
                sigma: 0.6,
                s0: 1.0,
            },
            pretrain_steps: 1500,
            critic_pretrain_steps: 1500,
            distill_steps: 150,
            hidden: 64,
            slots: 2,
            eval_draws: 10_000,
            seed: 11,
            config,
        }
    }
}

/// Per-chunk marginal statistics, pooled over the lanes of a chunk.
#[derive(Clone, Debug, Serialize)]
pub struct ChunkStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ChunkStats {
    pub fn of(t: &Tensor<f64>, chunk_dim: usize) -> Self {
        let (means, stds) = column_stats(t);
        let n = means.len() / chunk_dim;
        let pool = |v: &[f64], k: usize| v[k * chunk_dim..(k + 1) * chunk_dim].iter().sum::<f64>() / chunk_dim as f64;
        let vars: Vec<f64> = stds.iter().map(|s| s * s).collect();
        Self {
            mean: (0..n).map(|k| pool(&means, k)).collect(),
            std: (0..n).map(|k| pool(&vars, k).sqrt()).collect(),
        }
    }

    /// Largest relative deviation of any chunk mean or std from `reference`.
    pub fn rel_err(&self, reference: &ChunkStats) -> f64 {
        let rel = |a: &[f64], b: &[f64]| {
            a.iter()
                .zip(b)
                .map(|(x, y)| ((x - y) / y).abs())
                .fold(0.0, f64::max)
        };
        rel(&self.mean, &reference.mean).max(rel(&self.std, &reference.std))
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ArReport {
    pub teacher: ChunkStats,
    /// Teacher-forced pretrained student rolled out on its own outputs.
    pub pretrained: ChunkStats,
    pub student: ChunkStats,
    pub nfe_per_chunk: Vec<usize>,
    pub critic_ratio: Option<usize>,
    #[serde(skip)]
    pub log: TrainLog,
    #[serde(skip)]
    pub student_model: ChunkMlp<f64>,
}

/// Causal student on a chunked AR Gaussian: teacher-forced pretraining,
/// then self-rollout distillation against the analytic joint flow.
pub fn self_forcing_ar(setup: &ArSetup) -> Result<ArReport> {
    let cfg = &setup.config;
    let ar = &setup.process;
    let conds = vec![(); cfg.n_chunks];
    let mut rng = rng::seeded(setup.seed);
    let sampler = TimeSampler::default();
    let batch = cfg.batch;

    let mut student = ChunkMlp::<f64>::new(ar.chunk_dim, cfg.window, setup.slots, setup.hidden, &mut rng)?;
    let mut opt = Adam::new(AdamConfig::with_lr(2e-3));
    pretrain_causal(
        &mut student,
        &mut opt,
        setup.pretrain_steps,
        &conds,
        cfg.mask_first_for_last,
        &sampler,
        |r| ar.sample_tensor(r, batch),
        &mut rng,
    )?;

    let mut critic = MlpVelocity::<f64>::new(ar.dim(), 0, setup.hidden, &mut rng);
    let mut copt = Adam::new(AdamConfig::with_lr(2e-3));
    train_rf(
        &mut critic,
        &mut copt,
        setup.critic_pretrain_steps,
        &sampler,
        |r| ar.sample_tensor(r, batch),
        None,
        &mut rng,
    )?;

    let teacher: GaussianFlow<f64> = ar.teacher();
    let mut eval = rng::stream(setup.seed, 1);
    let z = rng::randn::<f64>(&mut eval, &[setup.eval_draws, ar.dim()]);
    let reference = euler_sample(&teacher, &z, &SamplerConfig::uniform(40, 1.0)?, None)?;
    let eval_seed = setup.seed ^ 0xe7a1;
    let (before, _) = self_rollout(
        &student,
        &conds,
        cfg.student_steps,
        cfg.mask_first_for_last,
        setup.eval_draws,
        eval_seed,
    )?;

    let pair = ScorePair {
        real: teacher,
        fake: critic,
    };
    let mut sf = SelfForcing::new(cfg.clone(), student, pair, setup.seed ^ 0x5eed)?;
    for _ in 0..setup.distill_steps {
        sf.update(&conds, None)?;
    }
    let mut student = sf.student.clone();
    *student.params_mut() = sf.ema().params().clone();
    let (after, records) = self_rollout(
        &student,
        &conds,
        cfg.student_steps,
        cfg.mask_first_for_last,
        setup.eval_draws,
        eval_seed,
    )?;
    Ok(ArReport {
        teacher: ChunkStats::of(&reference, ar.chunk_dim),
        pretrained: ChunkStats::of(&before, ar.chunk_dim),
        student: ChunkStats::of(&after, ar.chunk_dim),
        nfe_per_chunk: records.iter().map(|r| r.nfe).collect(),
        critic_ratio: sf.log.critic_ratio(),
        log: sf.log,
        student_model: student,
    })
}
