//! Rectified flow: straight-line noise-to-data paths, the velocity
//! regression loss, logit-normal time sampling, Euler integration and
//! classifier-free guidance.
//!
//! Conventions: `t = 0` is pure noise `x0 ~ N(0, I)`, `t = 1` is data `x1`,
//! `x_t = (1 - t) x0 + t x1`, and the target velocity is `x1 - x0`.
//! Batched quantities are `[batch, dim]` matrices with one time per row.

use std::cell::Cell;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Adam, Bound, ParamSet, Trainable};
use crate::rng::{self, Rng};
use crate::tensor::{c, Graph, Scalar, Tensor, Var};

/// A learned (or analytic) velocity field `v(x, t | cond)`.
pub trait VelocityModel<S: Scalar> {
    type Cond;

    fn params(&self) -> &ParamSet<S>;

    /// Velocity for a `[batch, dim]` state with one time per row. `cond =
    /// None` selects the unconditional branch used by guidance.
    fn velocity(
        &self,
        g: &mut Graph<S>,
        p: &Bound,
        x: Var,
        t: &[S],
        cond: Option<&Self::Cond>,
    ) -> Result<Var>;
}

impl<S: Scalar, M: VelocityModel<S> + ?Sized> VelocityModel<S> for &M {
    type Cond = M::Cond;
    fn params(&self) -> &ParamSet<S> {
        (**self).params()
    }
    fn velocity(&self, g: &mut Graph<S>, p: &Bound, x: Var, t: &[S], cond: Option<&M::Cond>) -> Result<Var> {
        (**self).velocity(g, p, x, t, cond)
    }
}

/// Wraps a model and counts forward invocations (NFEs).
pub struct NfeCounter<M> {
    pub inner: M,
    count: Cell<usize>,
}

impl<M> NfeCounter<M> {
    pub fn new(inner: M) -> Self {
        Self {
            inner,
            count: Cell::new(0),
        }
    }

    pub fn count(&self) -> usize {
        self.count.get()
    }

    pub fn reset(&self) {
        self.count.set(0);
    }
}

impl<S: Scalar, M: VelocityModel<S>> VelocityModel<S> for NfeCounter<M> {
    type Cond = M::Cond;
    fn params(&self) -> &ParamSet<S> {
        self.inner.params()
    }
    fn velocity(&self, g: &mut Graph<S>, p: &Bound, x: Var, t: &[S], cond: Option<&M::Cond>) -> Result<Var> {
        self.count.set(self.count.get() + 1);
        self.inner.velocity(g, p, x, t, cond)
    }
}

/// One point on the rectified path together with its regression target.
#[derive(Clone, Debug)]
pub struct FlowSample<S> {
    pub x0: Tensor<S>,
    pub x1: Tensor<S>,
    pub t: S,
    pub xt: Tensor<S>,
    pub v_target: Tensor<S>,
}

impl<S: Scalar> FlowSample<S> {
    pub fn new(x0: Tensor<S>, x1: Tensor<S>, t: S) -> Result<Self> {
        let xt = interpolate(&x0, &x1, t)?;
        let v_target = Tensor::new(
            x1.shape().to_vec(),
            x1.data().iter().zip(x0.data()).map(|(&a, &b)| a - b).collect(),
        )?;
        Ok(Self {
            x0,
            x1,
            t,
            xt,
            v_target,
        })
    }
}

/// `(1 - t) x0 + t x1`.
pub fn interpolate<S: Scalar>(x0: &Tensor<S>, x1: &Tensor<S>, t: S) -> Result<Tensor<S>> {
    if x0.shape() != x1.shape() {
        return Err(Error::Shape {
            op: "interpolate",
            lhs: x0.shape().to_vec(),
            rhs: x1.shape().to_vec(),
        });
    }
    if !(S::zero()..=S::one()).contains(&t) {
        return Err(Error::invalid(format!("interpolation time {t} outside [0, 1]")));
    }
    let data = x0
        .data()
        .iter()
        .zip(x1.data())
        .map(|(&a, &b)| (S::one() - t) * a + t * b)
        .collect();
    Tensor::new(x0.shape().to_vec(), data)
}

/// Logit-normal law over `t`: `t = sigmoid(z)`, `z ~ N(mean, std^2)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeSampler {
    pub mean: f64,
    pub std: f64,
}

impl Default for TimeSampler {
    fn default() -> Self {
        Self { mean: 0.0, std: 1.0 }
    }
}

impl TimeSampler {
    pub fn new(mean: f64, std: f64) -> Result<Self> {
        if !(std > 0.0) || !mean.is_finite() {
            return Err(Error::invalid(format!(
                "logit-normal needs finite mean and std > 0, got ({mean}, {std})"
            )));
        }
        Ok(Self { mean, std })
    }

    /// A sample strictly inside `(0, 1)`.
    pub fn sample(&self, rng: &mut Rng) -> f64 {
        let z = self.mean + self.std * rng::normal::<f64>(rng);
        let t = 1.0 / (1.0 + (-z).exp());
        t.clamp(f64::EPSILON, 1.0 - f64::EPSILON)
    }
}

/// Euler integration settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub steps: usize,
    pub guidance_scale: f64,
    pub schedule: Vec<f64>,
}

impl SamplerConfig {
    /// Uniform grid `0, 1/steps, ..., 1`.
    pub fn uniform(steps: usize, guidance_scale: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::invalid("sampler needs at least one step"));
        }
        let schedule = (0..=steps).map(|k| k as f64 / steps as f64).collect();
        let cfg = Self {
            steps,
            guidance_scale,
            schedule,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// The many-step teacher profile: 40 steps with guidance.
    pub fn teacher(guidance_scale: f64) -> Result<Self> {
        Self::uniform(40, guidance_scale)
    }

    pub fn validate(&self) -> Result<()> {
        let s = &self.schedule;
        if self.steps == 0 || s.len() != self.steps + 1 {
            return Err(Error::invalid(format!(
                "schedule of {} points for {} steps",
                s.len(),
                self.steps
            )));
        }
        if s[0] != 0.0 || s[self.steps] != 1.0 {
            return Err(Error::invalid("schedule must start at 0 and end at 1"));
        }
        if s.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::invalid("schedule must be strictly increasing"));
        }
        if !(self.guidance_scale >= 0.0) {
            return Err(Error::invalid("guidance scale must be >= 0"));
        }
        Ok(())
    }

    pub fn guided(&self) -> bool {
        self.guidance_scale != 1.0
    }

    /// Model invocations one sample costs under this configuration.
    pub fn nfe(&self) -> usize {
        if self.guided() {
            2 * self.steps
        } else {
            self.steps
        }
    }
}

/// `v_uncond + scale * (v_cond - v_uncond)`.
pub fn cfg_velocity<S: Scalar>(v_cond: &Tensor<S>, v_uncond: &Tensor<S>, scale: f64) -> Result<Tensor<S>> {
    if v_cond.shape() != v_uncond.shape() {
        return Err(Error::Shape {
            op: "cfg_velocity",
            lhs: v_cond.shape().to_vec(),
            rhs: v_uncond.shape().to_vec(),
        });
    }
    let k = S::from_f64(scale);
    let data = v_cond
        .data()
        .iter()
        .zip(v_uncond.data())
        .map(|(&vc, &vu)| vu + k * (vc - vu))
        .collect();
    Tensor::new(v_cond.shape().to_vec(), data)
}

/// Guided velocity on a graph; a single invocation when `scale == 1`.
pub fn guided_velocity<S: Scalar, M: VelocityModel<S>>(
    model: &M,
    g: &mut Graph<S>,
    p: &Bound,
    x: Var,
    t: &[S],
    cond: Option<&M::Cond>,
    scale: f64,
) -> Result<Var> {
    let vc = model.velocity(g, p, x, t, cond)?;
    if scale == 1.0 {
        return Ok(vc);
    }
    let vu = model.velocity(g, p, x, t, None)?;
    let diff = g.sub(vc, vu)?;
    let scaled = g.scale(diff, S::from_f64(scale));
    g.add(vu, scaled)
}

/// Squared-error velocity regression for fixed noise and times:
/// mean over rows of `|| v(x_t, t) - (x1 - x0) ||^2`.
pub fn rf_loss_fixed<S: Scalar, M: VelocityModel<S>>(
    model: &M,
    g: &mut Graph<S>,
    p: &Bound,
    x1: Var,
    x0: Var,
    t: &[S],
    cond: Option<&M::Cond>,
) -> Result<Var> {
    let shape = g.shape(x1).to_vec();
    if g.shape(x0) != shape.as_slice() || shape.len() != 2 || shape[0] != t.len() {
        return Err(Error::Shape {
            op: "rf_loss",
            lhs: shape,
            rhs: g.shape(x0).to_vec(),
        });
    }
    let (rows, cols) = (shape[0], shape[1]);
    // x_t = x0 + t (x1 - x0), with t broadcast per row.
    let mut tcol = Vec::with_capacity(rows * cols);
    for &ti in t {
        tcol.extend(std::iter::repeat_n(ti, cols));
    }
    let tv = g.constant_vec(&shape, tcol)?;
    let target = g.sub(x1, x0)?;
    let moved = g.mul(tv, target)?;
    let xt = g.add(x0, moved)?;
    let v = model.velocity(g, p, xt, t, cond)?;
    if g.shape(v) != shape.as_slice() {
        return Err(Error::Shape {
            op: "rf_loss model output",
            lhs: g.shape(v).to_vec(),
            rhs: shape,
        });
    }
    let sq = g.sq_dist(v, target)?;
    Ok(g.scale(sq, S::one() / c(rows as f64)))
}

/// The rectified-flow training loss with `x0 ~ N(0, I)` and logit-normal
/// times drawn from `rng`.
pub fn rf_loss<S: Scalar, M: VelocityModel<S>>(
    model: &M,
    g: &mut Graph<S>,
    p: &Bound,
    x1: Var,
    cond: Option<&M::Cond>,
    sampler: &TimeSampler,
    rng: &mut Rng,
) -> Result<Var> {
    let shape = g.shape(x1).to_vec();
    let rows = shape[0];
    let t: Vec<S> = (0..rows).map(|_| S::from_f64(sampler.sample(rng))).collect();
    let noise = rng::randn::<S>(rng, &shape);
    let x0 = g.constant(&noise);
    rf_loss_fixed(model, g, p, x1, x0, &t, cond)
}

/// Integrates `dx/dt = v(x, t)` from `x0` over the configured schedule.
pub fn euler_sample<S: Scalar, M: VelocityModel<S>>(
    model: &M,
    x0: &Tensor<S>,
    config: &SamplerConfig,
    cond: Option<&M::Cond>,
) -> Result<Tensor<S>> {
    config.validate()?;
    let rows = x0.shape()[0];
    let mut x = x0.clone();
    for w in config.schedule.windows(2) {
        let (t0, t1) = (w[0], w[1]);
        let mut g = Graph::new();
        let p = model.params().bind(&mut g, false);
        let xv = g.constant(&x);
        let t = vec![S::from_f64(t0); rows];
        let v = guided_velocity(model, &mut g, &p, xv, &t, cond, config.guidance_scale)?;
        let dt = S::from_f64(t1 - t0);
        for (xi, &vi) in x.data_mut().iter_mut().zip(g.value(v)) {
            *xi += dt * vi;
        }
    }
    Ok(x)
}

/// Euler integration kept on the graph so gradients reach the model.
pub fn euler_sample_graph<S: Scalar, M: VelocityModel<S>>(
    model: &M,
    g: &mut Graph<S>,
    p: &Bound,
    x0: Var,
    schedule: &[f64],
    cond: Option<&M::Cond>,
) -> Result<Var> {
    let rows = g.shape(x0)[0];
    let mut x = x0;
    for w in schedule.windows(2) {
        let t = vec![S::from_f64(w[0]); rows];
        let v = model.velocity(g, p, x, &t, cond)?;
        let step = g.scale(v, S::from_f64(w[1] - w[0]));
        x = g.add(x, step)?;
    }
    Ok(x)
}

/// Euler integration where only the last `grad_steps` steps are recorded on
/// `g`; earlier steps run on scratch graphs and enter `g` as a constant.
pub fn euler_sample_tail<S: Scalar, M: VelocityModel<S>>(
    model: &M,
    g: &mut Graph<S>,
    p: &Bound,
    x0: &Tensor<S>,
    schedule: &[f64],
    grad_steps: usize,
    cond: Option<&M::Cond>,
) -> Result<Var> {
    let steps = schedule.len().saturating_sub(1);
    let split = steps.saturating_sub(grad_steps);
    let mut x = x0.clone();
    let rows = x.shape()[0];
    for w in schedule[..=split].windows(2) {
        let mut sg = Graph::new();
        let sp = model.params().bind(&mut sg, false);
        let xv = sg.constant(&x);
        let v = model.velocity(&mut sg, &sp, xv, &vec![S::from_f64(w[0]); rows], cond)?;
        let dt = S::from_f64(w[1] - w[0]);
        for (xi, &vi) in x.data_mut().iter_mut().zip(sg.value(v)) {
            *xi += dt * vi;
        }
    }
    let start = g.constant(&x);
    euler_sample_graph(model, g, p, start, &schedule[split..], cond)
}

/// Plain rectified-flow training: `steps` Adam updates on batches drawn
/// by `data`. Returns the loss trajectory.
#[allow(clippy::too_many_arguments)]
pub fn train_rf<S, M, D>(
    model: &mut M,
    opt: &mut Adam,
    steps: usize,
    sampler: &TimeSampler,
    mut data: D,
    cond: Option<&M::Cond>,
    rng: &mut Rng,
) -> Result<Vec<f64>>
where
    S: Scalar,
    M: VelocityModel<S> + Trainable<S>,
    D: FnMut(&mut Rng) -> Tensor<S>,
{
    let mut losses = Vec::with_capacity(steps);
    for step in 0..steps {
        let batch = data(rng);
        let mut g = Graph::new();
        let p = model.params().bind(&mut g, true);
        let x1 = g.constant(&batch);
        let loss = rf_loss(&*model, &mut g, &p, x1, cond, sampler, rng)?;
        let l = g.item(loss).as_f64();
        if !l.is_finite() {
            return Err(Error::NonFinite {
                what: "rf loss".into(),
                step,
            });
        }
        let grads = g.backward(loss)?;
        opt.step(model.params_mut(), &p.grads(&grads));
        losses.push(l);
    }
    Ok(losses)
}
