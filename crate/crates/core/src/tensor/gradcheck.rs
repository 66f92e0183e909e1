//! Central finite-difference gradient checking in 64-bit.
//!
//! Only the forward pass of the function under test is used to build the
//! numerical estimate, so the estimate is independent of the reverse-mode
//! rules it is compared against.

use super::{Graph, Tensor, Var};
use crate::error::Result;
use crate::rng::Rng;
use rand::seq::index::sample;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    /// (input index, flat offset, analytic, numeric) of the worst coordinate.
    pub worst: Option<(usize, usize, f64, f64)>,
}

/// Relative error with a floor tied to the overall gradient scale, so that
/// coordinates with near-zero gradient are judged on an absolute basis.
pub fn rel_error(analytic: f64, numeric: f64, scale: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-3 * scale).max(1e-10);
    (analytic - numeric).abs() / denom
}

/// Compares reverse-mode gradients of `f` against central differences with
/// step `h`. `f` must build a scalar loss from the supplied input vars.
/// When `max_coords` is set, at most that many coordinates per input are
/// perturbed, chosen with `rng`.
pub fn check<F>(
    inputs: &[Tensor<f64>],
    f: F,
    h: f64,
    max_coords: Option<usize>,
    rng: &mut Rng,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t)).collect();
    let loss = f(&mut g, &vars)?;
    let grads = g.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = vars.iter().map(|&v| grads.tensor(v)).collect();
    let scale = analytic
        .iter()
        .flat_map(|t| t.data().iter())
        .fold(0.0f64, |m, v| m.max(v.abs()));

    let eval = |perturbed: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| g.constant(t)).collect();
        let l = f(&mut g, &vars)?;
        Ok(g.item(l))
    };

    let mut report = GradCheckReport {
        checked: 0,
        max_rel_error: 0.0,
        worst: None,
    };
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (ti, t) in inputs.iter().enumerate() {
        let coords: Vec<usize> = match max_coords {
            Some(k) if k < t.len() => sample(rng, t.len(), k).into_vec(),
            _ => (0..t.len()).collect(),
        };
        for i in coords {
            let orig = t.data()[i];
            work[ti].data_mut()[i] = orig + h;
            let plus = eval(&work)?;
            work[ti].data_mut()[i] = orig - h;
            let minus = eval(&work)?;
            work[ti].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[ti].data()[i];
            let e = rel_error(a, numeric, scale);
            report.checked += 1;
            if e > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(e);
                report.worst = Some((ti, i, a, numeric));
            }
        }
    }
    Ok(report)
}
