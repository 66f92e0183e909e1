//! Small models and synthetic distributions used to exercise the training
//! and distillation machinery at a size where results can be checked by
//! Monte Carlo in seconds.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};
use crate::flow::VelocityModel;
use crate::model::CausalModel;
use crate::params::{Bound, ParamId, ParamSet, Trainable};
use crate::rng::{self, Rng};
use crate::tensor::{Graph, Scalar, Tensor, Var};

/// Number of time features produced by [`time_features`].
pub const TIME_FEATURES: usize = 9;

/// `[t, sin(pi f t), cos(pi f t)]` for `f` in 1, 2, 4, 8; one row per time.
pub fn time_features<S: Scalar>(t: &[S]) -> Tensor<S> {
    let mut out = Vec::with_capacity(t.len() * TIME_FEATURES);
    for &ti in t {
        let x = ti.as_f64();
        out.push(x);
        for f in [1.0, 2.0, 4.0, 8.0] {
            let a = std::f64::consts::PI * f * x;
            out.push(a.sin());
            out.push(a.cos());
        }
    }
    Tensor::new(vec![t.len(), TIME_FEATURES], out.into_iter().map(S::from_f64).collect())
        .expect("time feature shape")
}

#[derive(Clone, Debug)]
struct Linear {
    w: ParamId,
    b: ParamId,
}

impl Linear {
    fn new<S: Scalar>(p: &mut ParamSet<S>, name: &str, fan_in: usize, fan_out: usize, rng: &mut Rng) -> Self {
        let std = (1.0 / fan_in as f64).sqrt();
        Self {
            w: p.add_normal(format!("{name}.w"), &[fan_in, fan_out], std, rng),
            b: p.add_zeros(format!("{name}.b"), &[fan_out]),
        }
    }

    fn apply<S: Scalar>(&self, g: &mut Graph<S>, p: &Bound, x: Var) -> Result<Var> {
        let y = g.matmul(x, p[self.w])?;
        g.add(y, p[self.b])
    }
}

/// Three-layer SiLU MLP on `[x, time features, condition]`.
#[derive(Clone, Debug)]
pub struct MlpVelocity<S> {
    params: ParamSet<S>,
    dim: usize,
    cond_dim: usize,
    layers: [Linear; 3],
}

impl<S: Scalar> MlpVelocity<S> {
    pub fn new(dim: usize, cond_dim: usize, hidden: usize, rng: &mut Rng) -> Self {
        let mut params = ParamSet::new();
        let input = dim + TIME_FEATURES + cond_dim;
        let layers = [
            Linear::new(&mut params, "mlp.0", input, hidden, rng),
            Linear::new(&mut params, "mlp.1", hidden, hidden, rng),
            Linear::new(&mut params, "mlp.2", hidden, dim, rng),
        ];
        Self {
            params,
            dim,
            cond_dim,
            layers,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn set_params(&mut self, params: ParamSet<S>) {
        assert_eq!(params.len(), self.params.len());
        self.params = params;
    }
}

impl<S: Scalar> Trainable<S> for MlpVelocity<S> {
    fn params_mut(&mut self) -> &mut ParamSet<S> {
        &mut self.params
    }
}

impl<S: Scalar> VelocityModel<S> for MlpVelocity<S> {
    /// `[batch, cond_dim]` condition rows; `None` feeds zeros.
    type Cond = Tensor<S>;

    fn params(&self) -> &ParamSet<S> {
        &self.params
    }

    fn velocity(&self, g: &mut Graph<S>, p: &Bound, x: Var, t: &[S], cond: Option<&Tensor<S>>) -> Result<Var> {
        let rows = g.shape(x)[0];
        if g.shape(x) != [rows, self.dim] || t.len() != rows {
            return Err(Error::Shape {
                op: "mlp velocity",
                lhs: g.shape(x).to_vec(),
                rhs: vec![t.len(), self.dim],
            });
        }
        let tf = g.constant(&time_features(t));
        let mut parts = vec![x, tf];
        if self.cond_dim > 0 {
            let c = match cond {
                Some(c) => c.clone(),
                None => Tensor::zeros(&[rows, self.cond_dim]),
            };
            parts.push(g.constant(&c));
        }
        let h = g.concat_cols(&parts)?;
        let h = self.layers[0].apply(g, p, h)?;
        let h = g.silu(h);
        let h = self.layers[1].apply(g, p, h)?;
        let h = g.silu(h);
        self.layers[2].apply(g, p, h)
    }
}

/// Chunk-causal MLP. Each chunk sees itself, the time features and up to
/// `slots` earlier clean chunks (most recent first) with presence flags.
#[derive(Clone, Debug)]
pub struct ChunkMlp<S> {
    params: ParamSet<S>,
    chunk_dim: usize,
    window: usize,
    slots: usize,
    layers: [Linear; 3],
}

impl<S: Scalar> ChunkMlp<S> {
    pub fn new(chunk_dim: usize, window: usize, slots: usize, hidden: usize, rng: &mut Rng) -> Result<Self> {
        if window == 0 || chunk_dim == 0 || slots >= window {
            return Err(Error::invalid(format!(
                "chunk mlp needs 0 <= slots < window, got slots {slots}, window {window}"
            )));
        }
        let mut params = ParamSet::new();
        let input = chunk_dim + TIME_FEATURES + slots * (chunk_dim + 1);
        let layers = [
            Linear::new(&mut params, "chunk.0", input, hidden, rng),
            Linear::new(&mut params, "chunk.1", hidden, hidden, rng),
            Linear::new(&mut params, "chunk.2", hidden, chunk_dim, rng),
        ];
        Ok(Self {
            params,
            chunk_dim,
            window,
            slots,
            layers,
        })
    }
}

impl<S: Scalar> Trainable<S> for ChunkMlp<S> {
    fn params_mut(&mut self) -> &mut ParamSet<S> {
        &mut self.params
    }
}

impl<S: Scalar> CausalModel<S> for ChunkMlp<S> {
    /// The clean chunk, `[batch, chunk_dim]`.
    type Entry = Tensor<S>;
    type ChunkCond = ();

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
        p: &Bound,
        x: Var,
        t: S,
        _chunk: usize,
        _cond: &(),
        context: &[&Tensor<S>],
    ) -> Result<Var> {
        let rows = g.shape(x)[0];
        if g.shape(x) != [rows, self.chunk_dim] {
            return Err(Error::Shape {
                op: "chunk mlp",
                lhs: g.shape(x).to_vec(),
                rhs: vec![rows, self.chunk_dim],
            });
        }
        let tf = g.constant(&time_features(&vec![t; rows]));
        let mut parts = vec![x, tf];
        let mut flags = Vec::with_capacity(rows * self.slots);
        for s in 0..self.slots {
            let entry = context.len().checked_sub(s + 1).map(|i| context[i]);
            match entry {
                Some(e) if e.shape() == [rows, self.chunk_dim] => parts.push(g.constant(e)),
                Some(e) => {
                    return Err(Error::Cache(format!(
                        "context entry {:?} for batch of {rows}",
                        e.shape()
                    )))
                }
                None => parts.push(g.constant(&Tensor::zeros(&[rows, self.chunk_dim]))),
            }
            flags.push(if entry.is_some() { S::one() } else { S::zero() });
        }
        if self.slots > 0 {
            let f: Vec<S> = (0..rows).flat_map(|_| flags.iter().copied()).collect();
            parts.push(g.constant_vec(&[rows, self.slots], f)?);
        }
        let h = g.concat_cols(&parts)?;
        let h = self.layers[0].apply(g, p, h)?;
        let h = g.silu(h);
        let h = self.layers[1].apply(g, p, h)?;
        let h = g.silu(h);
        self.layers[2].apply(g, p, h)
    }

    fn chunk_entry(
        &self,
        g: &mut Graph<S>,
        _: &Bound,
        clean: Var,
        _: usize,
        _: &(),
        _: &[&Tensor<S>],
    ) -> Result<Tensor<S>> {
        Ok(g.tensor(clean))
    }
}

/// Exact rectified-flow velocity for a Gaussian data law `N(mean, cov)`.
///
/// With `x_t = (1 - t) x0 + t x1`, `E[x1 | x_t] = m + t C ((1-t)^2 I + t^2 C)^{-1} (x_t - t m)`
/// and `v = (E[x1 | x_t] - x_t) / (1 - t)`. The covariance is diagonalised
/// once so each evaluation is two small matrix products.
#[derive(Clone, Debug)]
pub struct GaussianFlow<S> {
    params: ParamSet<S>,
    mean: DVector<f64>,
    eigvecs: DMatrix<f64>,
    eigvals: DVector<f64>,
}

impl<S: Scalar> GaussianFlow<S> {
    pub fn new(mean: Vec<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let d = mean.len();
        if cov.nrows() != d || cov.ncols() != d {
            return Err(Error::invalid("covariance does not match mean dimension"));
        }
        let eig = SymmetricEigen::new(cov);
        if eig.eigenvalues.iter().any(|&l| l < -1e-12) {
            return Err(Error::invalid("covariance is not positive semi-definite"));
        }
        Ok(Self {
            params: ParamSet::new(),
            mean: DVector::from_vec(mean),
            eigvecs: eig.eigenvectors,
            eigvals: eig.eigenvalues.map(|l| l.max(0.0)),
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    fn velocity_row(&self, x: &[f64], t: f64) -> Vec<f64> {
        let t = t.min(1.0 - 1e-9);
        let centered = DVector::from_iterator(x.len(), x.iter().zip(self.mean.iter()).map(|(&xi, &mi)| xi - t * mi));
        let proj = self.eigvecs.transpose() * centered;
        let gain = DVector::from_iterator(
            proj.len(),
            self.eigvals
                .iter()
                .zip(proj.iter())
                .map(|(&l, &z)| t * l / ((1.0 - t).powi(2) + t * t * l) * z),
        );
        let x1_hat = &self.mean + &self.eigvecs * gain;
        x.iter()
            .zip(x1_hat.iter())
            .map(|(&xi, &hi)| (hi - xi) / (1.0 - t))
            .collect()
    }
}

impl<S: Scalar> VelocityModel<S> for GaussianFlow<S> {
    /// Unconditional; the condition is accepted for interface parity with [`MlpVelocity`] and ignored.
    type Cond = Tensor<S>;

    fn params(&self) -> &ParamSet<S> {
        &self.params
    }

    fn velocity(&self, g: &mut Graph<S>, _: &Bound, x: Var, t: &[S], _: Option<&Tensor<S>>) -> Result<Var> {
        let d = self.dim();
        let shape = g.shape(x).to_vec();
        if shape.len() != 2 || shape[1] != d || shape[0] != t.len() {
            return Err(Error::Shape {
                op: "gaussian flow",
                lhs: shape,
                rhs: vec![t.len(), d],
            });
        }
        let xs = g.value(x);
        let mut out = Vec::with_capacity(xs.len());
        for (r, &ti) in t.iter().enumerate() {
            let row: Vec<f64> = xs[r * d..(r + 1) * d].iter().map(|v| v.as_f64()).collect();
            out.extend(self.velocity_row(&row, ti.as_f64()).into_iter().map(S::from_f64));
        }
        g.constant_vec(&shape, out)
    }
}

/// One-dimensional Gaussian mixture.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianMixture1d {
    pub weights: Vec<f64>,
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
}

impl GaussianMixture1d {
    /// Asymmetric two-mode mixture with a clearly non-zero mean.
    pub fn two_mode() -> Self {
        Self {
            weights: vec![0.3, 0.7],
            means: vec![-1.0, 2.0],
            stds: vec![0.35, 0.35],
        }
    }

    pub fn sample(&self, rng: &mut Rng) -> f64 {
        let u: f64 = rand::Rng::random(rng);
        let mut acc = 0.0;
        let mut k = self.weights.len() - 1;
        for (i, w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                k = i;
                break;
            }
        }
        self.means[k] + self.stds[k] * rng::normal::<f64>(rng)
    }

    pub fn sample_tensor<S: Scalar>(&self, rng: &mut Rng, n: usize) -> Tensor<S> {
        let data = (0..n).map(|_| S::from_f64(self.sample(rng))).collect();
        Tensor::new(vec![n, 1], data).expect("shape")
    }

    pub fn mean(&self) -> f64 {
        self.weights.iter().zip(&self.means).map(|(w, m)| w * m).sum()
    }

    pub fn second_moment(&self) -> f64 {
        self.weights
            .iter()
            .zip(self.means.iter().zip(&self.stds))
            .map(|(w, (m, s))| w * (m * m + s * s))
            .sum()
    }
}

/// Chunked first-order autoregressive Gaussian process. Chunk `k` holds
/// `chunk_dim` values: `y_0 ~ N(mu, s0^2)`, `y_{k+1} = mu + rho (y_k - mu) + sigma e`.
#[derive(Clone, Debug, PartialEq)]
pub struct ArProcess {
    pub n_chunks: usize,
    pub chunk_dim: usize,
    pub mu: f64,
    pub rho: f64,
    pub sigma: f64,
    pub s0: f64,
}

impl ArProcess {
    pub fn dim(&self) -> usize {
        self.n_chunks * self.chunk_dim
    }

    pub fn sample(&self, rng: &mut Rng) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.dim());
        for _ in 0..self.chunk_dim {
            out.push(self.mu + self.s0 * rng::normal::<f64>(rng));
        }
        for k in 1..self.n_chunks {
            for j in 0..self.chunk_dim {
                let prev = out[(k - 1) * self.chunk_dim + j];
                out.push(self.mu + self.rho * (prev - self.mu) + self.sigma * rng::normal::<f64>(rng));
            }
        }
        out
    }

    pub fn sample_tensor<S: Scalar>(&self, rng: &mut Rng, n: usize) -> Tensor<S> {
        let data = (0..n).flat_map(|_| self.sample(rng)).map(S::from_f64).collect();
        Tensor::new(vec![n, self.dim()], data).expect("shape")
    }

    /// Per-chunk marginal standard deviation.
    pub fn chunk_std(&self, k: usize) -> f64 {
        let mut var = self.s0 * self.s0;
        for _ in 0..k {
            var = self.rho * self.rho * var + self.sigma * self.sigma;
        }
        var.sqrt()
    }

    pub fn mean_vector(&self) -> Vec<f64> {
        vec![self.mu; self.dim()]
    }

    /// Joint covariance; coordinates in different lanes are independent.
    pub fn covariance(&self) -> DMatrix<f64> {
        let d = self.dim();
        let var: Vec<f64> = (0..self.n_chunks).map(|k| self.chunk_std(k).powi(2)).collect();
        DMatrix::from_fn(d, d, |a, b| {
            let (ka, ja) = (a / self.chunk_dim, a % self.chunk_dim);
            let (kb, jb) = (b / self.chunk_dim, b % self.chunk_dim);
            if ja != jb {
                return 0.0;
            }
            let (lo, hi) = (ka.min(kb), ka.max(kb));
            self.rho.powi((hi - lo) as i32) * var[lo]
        })
    }

    pub fn teacher<S: Scalar>(&self) -> GaussianFlow<S> {
        GaussianFlow::new(self.mean_vector(), self.covariance()).expect("valid AR covariance")
    }
}

/// Column means and standard deviations of a `[n, d]` tensor.
pub fn column_stats<S: Scalar>(t: &Tensor<S>) -> (Vec<f64>, Vec<f64>) {
    let (n, d) = (t.shape()[0], t.shape()[1]);
    let mut mean = vec![0.0; d];
    for r in 0..n {
        for j in 0..d {
            mean[j] += t.data()[r * d + j].as_f64();
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut var = vec![0.0; d];
    for r in 0..n {
        for j in 0..d {
            var[j] += (t.data()[r * d + j].as_f64() - mean[j]).powi(2);
        }
    }
    let std = var.iter().map(|v| (v / (n as f64 - 1.0)).sqrt()).collect();
    (mean, std)
}

/// `n` rows from `N(mean, cov)` through a Cholesky factor.
pub fn sample_gaussian<S: Scalar>(mean: &[f64], cov: &DMatrix<f64>, n: usize, rng: &mut Rng) -> Result<Tensor<S>> {
    let d = mean.len();
    let chol = nalgebra::Cholesky::new(cov.clone()).ok_or_else(|| Error::invalid("covariance is not positive definite"))?;
    let l = chol.l();
    let mut data = Vec::with_capacity(n * d);
    for _ in 0..n {
        let z = DVector::from_vec(rng::normal_vec::<f64>(rng, d));
        let x = &l * z;
        data.extend(x.iter().zip(mean).map(|(&xi, &m)| S::from_f64(xi + m)));
    }
    Tensor::new(vec![n, d], data)
}

/// Sample mean and unbiased covariance of a `[n, d]` tensor.
pub fn mean_cov<S: Scalar>(t: &Tensor<S>) -> (Vec<f64>, DMatrix<f64>) {
    let (n, d) = (t.shape()[0], t.shape()[1]);
    let (mean, _) = column_stats(t);
    let mut cov = DMatrix::zeros(d, d);
    for r in 0..n {
        let row: Vec<f64> = (0..d).map(|j| t.data()[r * d + j].as_f64() - mean[j]).collect();
        for a in 0..d {
            for b in 0..d {
                cov[(a, b)] += row[a] * row[b];
            }
        }
    }
    (mean, cov / (n as f64 - 1.0))
}

/// A small MLP velocity fitted by rectified flow to a fixed 2-D Gaussian.
#[derive(Clone, Debug)]
pub struct GaussianFitSetup {
    pub mean: Vec<f64>,
    pub cov: DMatrix<f64>,
    pub steps: usize,
    pub batch: usize,
    pub hidden: usize,
    pub lr: f64,
    pub sample_steps: usize,
    pub eval_draws: usize,
    pub seed: u64,
}

impl Default for GaussianFitSetup {
    fn default() -> Self {
        Self {
            mean: vec![1.0, -0.5],
            cov: DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.5, 0.6]),
            steps: 2000,
            batch: 256,
            hidden: 64,
            lr: 2e-3,
            sample_steps: 40,
            eval_draws: 10_000,
            seed: 3,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GaussianFitReport {
    pub mean: Vec<f64>,
    pub cov: DMatrix<f64>,
    pub losses: Vec<f64>,
    pub model: MlpVelocity<f64>,
}

impl GaussianFitReport {
    pub fn mean_error(&self, target: &[f64]) -> f64 {
        self.mean.iter().zip(target).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }

    pub fn cov_error(&self, target: &DMatrix<f64>) -> f64 {
        (&self.cov - target).abs().max()
    }
}

/// Trains for `steps` Adam updates (the last quarter at a tenth of the rate),
/// then integrates `eval_draws` noise rows with uniform Euler steps.
pub fn fit_gaussian(setup: &GaussianFitSetup) -> Result<GaussianFitReport> {
    use crate::flow::{euler_sample, train_rf, SamplerConfig, TimeSampler};
    use crate::params::{Adam, AdamConfig};

    let d = setup.mean.len();
    let mut r = rng::seeded(setup.seed);
    let mut model = MlpVelocity::<f64>::new(d, 0, setup.hidden, &mut r);
    let mut opt = Adam::new(AdamConfig::with_lr(setup.lr));
    let sampler = TimeSampler::default();
    let fine = setup.steps / 4;
    let mut losses = Vec::with_capacity(setup.steps);
    for (steps, lr) in [(setup.steps - fine, setup.lr), (fine, setup.lr / 10.0)] {
        opt.config.lr = lr;
        let draw = |rng: &mut Rng| sample_gaussian(&setup.mean, &setup.cov, setup.batch, rng).expect("validated covariance");
        losses.extend(train_rf(&mut model, &mut opt, steps, &sampler, draw, None, &mut r)?);
    }
    let mut eval = rng::stream(setup.seed, 1);
    let z = rng::randn::<f64>(&mut eval, &[setup.eval_draws, d]);
    let x = euler_sample(&model, &z, &SamplerConfig::uniform(setup.sample_steps, 1.0)?, None)?;
    let (mean, cov) = mean_cov(&x);
    Ok(GaussianFitReport { mean, cov, losses, model })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::{euler_sample, SamplerConfig};

    #[test]
    fn gaussian_flow_transports_noise_to_target() {
        let cov = DMatrix::from_row_slice(2, 2, &[1.0, 0.6, 0.6, 0.5]);
        let flow = GaussianFlow::<f64>::new(vec![1.0, -2.0], cov).unwrap();
        let mut rng = rng::seeded(5);
        let x0 = rng::randn::<f64>(&mut rng, &[20_000, 2]);
        let out = euler_sample(&flow, &x0, &SamplerConfig::uniform(200, 1.0).unwrap(), None).unwrap();
        let (m, s) = column_stats(&out);
        assert!((m[0] - 1.0).abs() < 0.03 && (m[1] + 2.0).abs() < 0.03, "{m:?}");
        assert!((s[0] - 1.0).abs() < 0.03 && (s[1] - 0.5f64.sqrt()).abs() < 0.03, "{s:?}");
    }

    #[test]
    fn ar_covariance_matches_simulation() {
        let p = ArProcess {
            n_chunks: 3,
            chunk_dim: 2,
            mu: 1.0,
            rho: 0.8,
            sigma: 0.3,
            s0: 0.5,
        };
        let mut rng = rng::seeded(9);
        let samples = p.sample_tensor::<f64>(&mut rng, 50_000);
        let (m, s) = column_stats(&samples);
        for k in 0..3 {
            assert!((m[2 * k] - 1.0).abs() < 0.02);
            assert!((s[2 * k] - p.chunk_std(k)).abs() < 0.02);
        }
        let cov = p.covariance();
        assert!((cov[(0, 2)] - 0.8 * 0.25).abs() < 1e-12);
        assert_eq!(cov[(0, 1)], 0.0);
    }

    #[test]
    fn mixture_moments() {
        let m = GaussianMixture1d::two_mode();
        assert!((m.mean() - 1.1).abs() < 1e-12);
        let mut rng = rng::seeded(1);
        let n = 100_000;
        let xs: Vec<f64> = (0..n).map(|_| m.sample(&mut rng)).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        assert!((mean - m.mean()).abs() < 0.02);
    }
}
