//! Named parameter storage, optimisers and exponential moving averages.

use std::fs;
use std::ops::Index;
use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use crate::tensor::{io, Gradients, Graph, Scalar, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<S> {
    names: Vec<String>,
    tensors: Vec<Tensor<S>>,
}

impl<S: Scalar> Default for ParamSet<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> ParamSet<S> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor<S>) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(t);
        ParamId(self.tensors.len() - 1)
    }

    /// Normal init with standard deviation `std`.
    pub fn add_normal(&mut self, name: impl Into<String>, shape: &[usize], std: f64, rng: &mut Rng) -> ParamId {
        let mut t = rng::randn::<S>(rng, shape);
        for v in t.data_mut() {
            *v = *v * S::from_f64(std);
        }
        self.add(name, t)
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        self.add(name, Tensor::zeros(shape))
    }

    pub fn add_ones(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        self.add(name, Tensor::full(shape, S::one()))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<S> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<S> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn tensors(&self) -> &[Tensor<S>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<S>] {
        &mut self.tensors
    }

    /// Registers every parameter on `g`, as trainable leaves or as constants.
    pub fn bind(&self, g: &mut Graph<S>, trainable: bool) -> Bound {
        Bound(
            self.tensors
                .iter()
                .map(|t| if trainable { g.param(t) } else { g.constant(t) })
                .collect(),
        )
    }

    pub fn cast<T: Scalar>(&self) -> ParamSet<T> {
        ParamSet {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors
            .iter()
            .all(|t| t.data().iter().all(|v| v.is_finite()))
    }

    /// Writes one tensor file per parameter into `dir`.
    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        for (name, t) in self.names.iter().zip(&self.tensors) {
            io::save(&dir.join(format!("{name}.tensor")), t)?;
        }
        Ok(())
    }

    /// Overwrites every parameter from `dir`; shapes must match.
    pub fn load_dir(&mut self, dir: &Path) -> Result<()> {
        for (name, t) in self.names.iter().zip(self.tensors.iter_mut()) {
            let loaded: Tensor<S> = io::load(&dir.join(format!("{name}.tensor")))?;
            if loaded.shape() != t.shape() {
                return Err(Error::Shape {
                    op: "load parameter",
                    lhs: t.shape().to_vec(),
                    rhs: loaded.shape().to_vec(),
                });
            }
            *t = loaded;
        }
        Ok(())
    }
}

/// A model whose parameters an optimiser may update in place.
pub trait Trainable<S> {
    fn params_mut(&mut self) -> &mut ParamSet<S>;
}

/// Graph vars for a bound [`ParamSet`].
#[derive(Clone, Debug)]
pub struct Bound(Vec<Var>);

impl Index<ParamId> for Bound {
    type Output = Var;
    fn index(&self, id: ParamId) -> &Var {
        &self.0[id.0]
    }
}

impl From<Vec<Var>> for Bound {
    /// Vars in parameter order, e.g. leaves registered by a gradient check.
    fn from(vars: Vec<Var>) -> Self {
        Bound(vars)
    }
}

impl Bound {
    pub fn vars(&self) -> &[Var] {
        &self.0
    }

    /// Per-parameter gradients, zero-filled where none flowed.
    pub fn grads<S: Scalar>(&self, grads: &Gradients<S>) -> Vec<Tensor<S>> {
        self.0.iter().map(|&v| grads.tensor(v)).collect()
    }
}

#[derive(Clone, Debug)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Adam with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            m: Vec::new(),
            v: Vec::new(),
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step<S: Scalar>(&mut self, params: &mut ParamSet<S>, grads: &[Tensor<S>]) {
        assert_eq!(params.len(), grads.len(), "one gradient per parameter");
        if self.m.is_empty() {
            self.m = params.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (i, (p, g)) in params.tensors_mut().iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, (w, gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                let gj = gj.as_f64();
                m[j] = beta1 * m[j] + (1.0 - beta1) * gj;
                v[j] = beta2 * v[j] + (1.0 - beta2) * gj * gj;
                let update = (m[j] / bc1) / ((v[j] / bc2).sqrt() + eps);
                let wf = w.as_f64();
                *w = S::from_f64(wf - lr * (update + weight_decay * wf));
            }
        }
    }
}

/// Exponential moving average of a parameter trajectory:
/// `shadow <- decay * shadow + (1 - decay) * params`.
#[derive(Clone, Debug)]
pub struct Ema<S> {
    pub decay: f64,
    shadow: ParamSet<S>,
}

impl<S: Scalar> Ema<S> {
    pub fn new(params: &ParamSet<S>, decay: f64) -> Self {
        Self {
            decay,
            shadow: params.clone(),
        }
    }

    pub fn update(&mut self, params: &ParamSet<S>) {
        let d = self.decay;
        for (s, p) in self.shadow.tensors_mut().iter_mut().zip(params.tensors()) {
            for (a, b) in s.data_mut().iter_mut().zip(p.data()) {
                *a = S::from_f64(d * a.as_f64() + (1.0 - d) * b.as_f64());
            }
        }
    }

    pub fn params(&self) -> &ParamSet<S> {
        &self.shadow
    }
}
