//! Token layout: patchification, conditioning concatenation and the
//! analytic attention cost model.

use crate::error::{Error, Result};
use crate::tensor::{Graph, Scalar, Tensor, Var};

/// `(T, C, H, W)` of a rank-4 latent.
pub fn dims4(shape: &[usize]) -> Result<(usize, usize, usize, usize)> {
    match shape {
        &[t, c, h, w] => Ok((t, c, h, w)),
        s => Err(Error::invalid(format!("expected [T, C, H, W], got {s:?}"))),
    }
}

/// Source offsets for the `[T·(H/p)·(W/p), C·p²]` token layout of a
/// `[T, C, H, W]` latent. Tokens run over `(t, y, x)`; features over `(c, dy, dx)`.
pub fn patchify_indices(shape: &[usize], p: usize) -> Result<Vec<usize>> {
    let (t, c, h, w) = dims4(shape)?;
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(Error::invalid(format!(
            "patch {p} does not divide latent {h}x{w}"
        )));
    }
    let (gh, gw) = (h / p, w / p);
    let mut idx = Vec::with_capacity(t * c * h * w);
    for ti in 0..t {
        for gy in 0..gh {
            for gx in 0..gw {
                for ci in 0..c {
                    for dy in 0..p {
                        for dx in 0..p {
                            let (y, x) = (gy * p + dy, gx * p + dx);
                            idx.push(((ti * c + ci) * h + y) * w + x);
                        }
                    }
                }
            }
        }
    }
    Ok(idx)
}

fn invert(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &j) in perm.iter().enumerate() {
        inv[j] = i;
    }
    inv
}

pub fn token_count(shape: &[usize], p: usize) -> Result<usize> {
    let (t, _, h, w) = dims4(shape)?;
    patchify_indices(&[1, 1, h, w], p)?;
    Ok(t * (h / p) * (w / p))
}

/// Lossless rearrangement into tokens (no projection).
pub fn patchify<S: Scalar>(x: &Tensor<S>, p: usize) -> Result<Tensor<S>> {
    let (_, c, _, _) = dims4(x.shape())?;
    let idx = patchify_indices(x.shape(), p)?;
    let data = idx.iter().map(|&i| x.data()[i]).collect();
    Tensor::new(vec![idx.len() / (c * p * p), c * p * p], data)
}

/// Inverse of [`patchify`] for a latent of shape `shape`.
pub fn unpatchify<S: Scalar>(tokens: &Tensor<S>, shape: &[usize], p: usize) -> Result<Tensor<S>> {
    let idx = patchify_indices(shape, p)?;
    if tokens.len() != idx.len() {
        return Err(Error::Shape {
            op: "unpatchify",
            lhs: tokens.shape().to_vec(),
            rhs: shape.to_vec(),
        });
    }
    let data = invert(&idx).iter().map(|&i| tokens.data()[i]).collect();
    Tensor::new(shape.to_vec(), data)
}

pub fn patchify_var<S: Scalar>(g: &mut Graph<S>, x: Var, p: usize) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    let (_, c, _, _) = dims4(&shape)?;
    let idx = patchify_indices(&shape, p)?;
    let f = c * p * p;
    g.gather(x, &idx, &[idx.len() / f, f])
}

pub fn unpatchify_var<S: Scalar>(g: &mut Graph<S>, tokens: Var, shape: &[usize], p: usize) -> Result<Var> {
    let idx = patchify_indices(shape, p)?;
    if g.value(tokens).len() != idx.len() {
        return Err(Error::Shape {
            op: "unpatchify",
            lhs: g.shape(tokens).to_vec(),
            rhs: shape.to_vec(),
        });
    }
    g.gather(tokens, &invert(&idx), shape)
}

fn concat_channel_indices(shape: &[usize]) -> Result<(Vec<usize>, Vec<usize>)> {
    let (t, c, h, w) = dims4(shape)?;
    let plane = h * w;
    let half = t * c * plane;
    let mut idx = Vec::with_capacity(2 * half);
    for ti in 0..t {
        for src in [0, half] {
            for ci in 0..c {
                let base = src + (ti * c + ci) * plane;
                idx.extend(base..base + plane);
            }
        }
    }
    Ok((idx, vec![t, 2 * c, h, w]))
}

fn same_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::Shape {
            op,
            lhs: a.to_vec(),
            rhs: b.to_vec(),
        });
    }
    Ok(())
}

/// `[T, C, H, W]` pair to `[T, 2C, H, W]`; source channels come first.
pub fn channel_concat<S: Scalar>(src: &Tensor<S>, tgt: &Tensor<S>) -> Result<Tensor<S>> {
    same_shape("channel_concat", src.shape(), tgt.shape())?;
    let (idx, shape) = concat_channel_indices(src.shape())?;
    let both: Vec<S> = src.data().iter().chain(tgt.data()).copied().collect();
    Tensor::new(shape, idx.iter().map(|&i| both[i]).collect())
}

pub fn channel_concat_var<S: Scalar>(g: &mut Graph<S>, src: Var, tgt: Var) -> Result<Var> {
    same_shape("channel_concat", g.shape(src), g.shape(tgt))?;
    let (idx, shape) = concat_channel_indices(g.shape(src))?;
    let flat_s = g.reshape(src, &[1, g.value(src).len()])?;
    let flat_t = g.reshape(tgt, &[1, g.value(tgt).len()])?;
    let both = g.concat_cols(&[flat_s, flat_t])?;
    g.gather(both, &idx, &shape)
}

/// Reference conditioning: source tokens followed by target tokens.
pub fn sequence_concat<S: Scalar>(src: &Tensor<S>, tgt: &Tensor<S>, p: usize) -> Result<Tensor<S>> {
    same_shape("sequence_concat", src.shape(), tgt.shape())?;
    let (a, b) = (patchify(src, p)?, patchify(tgt, p)?);
    let shape = vec![a.shape()[0] + b.shape()[0], a.shape()[1]];
    Tensor::new(shape, a.into_data().into_iter().chain(b.into_data()).collect())
}

/// Multiply-accumulate counts of one self-attention layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionCost {
    /// `Q Kᵀ` over all heads: `n² · hidden`.
    pub scores: u64,
    /// `A V` over all heads: `n² · hidden`.
    pub values: u64,
    /// Q, K, V and output projections: `4 · n · hidden²`.
    pub projections: u64,
}

impl AttentionCost {
    /// The term quadratic in sequence length.
    pub fn quadratic(&self) -> u64 {
        self.scores + self.values
    }

    pub fn total(&self) -> u64 {
        self.quadratic() + self.projections
    }
}

pub fn attention_cost(seq_len: usize, hidden: usize, heads: usize) -> Result<AttentionCost> {
    if seq_len == 0 || hidden == 0 || heads == 0 || !hidden.is_multiple_of(heads) {
        return Err(Error::invalid(format!(
            "attention_cost({seq_len}, {hidden}, {heads})"
        )));
    }
    let (n, d) = (seq_len as u64, hidden as u64);
    Ok(AttentionCost {
        scores: n * n * d,
        values: n * n * d,
        projections: 4 * n * d * d,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(shape: &[usize]) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|i| i as f64).collect()).unwrap()
    }

    #[test]
    fn patch_counts() {
        let x = ramp(&[1, 1, 4, 4]);
        let t = patchify(&x, 2).unwrap();
        assert_eq!(t.shape(), &[4, 4]);
        assert_eq!(&t.data()[..4], &[0.0, 1.0, 4.0, 5.0]);
        assert_eq!(token_count(&[3, 4, 8, 8], 2).unwrap(), 48);
    }

    #[test]
    fn patch_round_trip_is_exact() {
        let x = ramp(&[2, 3, 4, 6]);
        let back = unpatchify(&patchify(&x, 2).unwrap(), x.shape(), 2).unwrap();
        assert_eq!(back, x);
        assert!(patchify(&ramp(&[1, 1, 5, 4]), 2).is_err());
    }

    #[test]
    fn channel_concat_layout() {
        let s = ramp(&[2, 4, 2, 2]);
        let t = Tensor::full(&[2, 4, 2, 2], -1.0);
        let cat = channel_concat(&s, &t).unwrap();
        assert_eq!(cat.shape(), &[2, 8, 2, 2]);
        for ti in 0..2 {
            let frame = &cat.data()[ti * 32..(ti + 1) * 32];
            assert_eq!(&frame[..16], &s.data()[ti * 16..(ti + 1) * 16]);
            assert!(frame[16..].iter().all(|&v| v == -1.0));
        }
        assert_eq!(
            token_count(cat.shape(), 2).unwrap(),
            token_count(s.shape(), 2).unwrap()
        );
    }

    #[test]
    fn graph_layout_matches_tensor_layout() {
        let s = ramp(&[2, 2, 4, 4]);
        let t = s.cast::<f64>();
        let mut g = Graph::new();
        let (vs, vt) = (g.constant(&s), g.constant(&t));
        let cat = channel_concat_var(&mut g, vs, vt).unwrap();
        assert_eq!(g.tensor(cat), channel_concat(&s, &t).unwrap());
        let tok = patchify_var(&mut g, vs, 2).unwrap();
        assert_eq!(g.tensor(tok), patchify(&s, 2).unwrap());
        let back = unpatchify_var(&mut g, tok, s.shape(), 2).unwrap();
        assert_eq!(g.tensor(back), s);
    }

    #[test]
    fn sequence_concat_doubles_tokens_and_quadruples_scores() {
        let s = ramp(&[3, 4, 8, 8]);
        assert_eq!(sequence_concat(&s, &s, 2).unwrap().shape()[0], 96);
        let one = attention_cost(48, 64, 4).unwrap();
        let two = attention_cost(96, 64, 4).unwrap();
        assert_eq!(two.quadratic(), 4 * one.quadratic());
        assert_eq!(attention_cost(1, 64, 4).unwrap().quadratic(), 128);
    }
}
