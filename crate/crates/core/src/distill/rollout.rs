//! Chunk-by-chunk autoregressive generation. The same [`Rollout`] drives
//! training (with gradients through the final denoising steps) and
//! streaming inference (values only).

use crate::error::{Error, Result};
use crate::model::{CausalModel, RollingCache};
use crate::params::Bound;
use crate::rng;
use crate::tensor::{Graph, Scalar, Tensor, Var};

/// Per-chunk bookkeeping.
#[derive(Clone, Debug, PartialEq)]
pub struct ChunkRecord {
    pub chunk: usize,
    /// Chunks the generator attended to, oldest first.
    pub context: Vec<usize>,
    /// Velocity evaluations spent denoising this chunk.
    pub nfe: usize,
}

/// Autoregressive generation state: the cache plus counters.
pub struct Rollout<'m, S: Scalar, M: CausalModel<S>> {
    model: &'m M,
    cache: RollingCache<M::Entry>,
    schedule: Vec<f64>,
    n_chunks: usize,
    mask_first_for_last: bool,
    nfe: usize,
    context_passes: usize,
    records: Vec<ChunkRecord>,
}

impl<'m, S: Scalar, M: CausalModel<S>> Rollout<'m, S, M> {
    /// `steps` uniform Euler steps per chunk over `n_chunks` chunks.
    pub fn new(model: &'m M, steps: usize, n_chunks: usize, mask_first_for_last: bool) -> Result<Self> {
        if steps == 0 || n_chunks == 0 {
            return Err(Error::invalid("rollout needs at least one step and one chunk"));
        }
        Ok(Self {
            model,
            cache: RollingCache::new(model.window())?,
            schedule: (0..=steps).map(|k| k as f64 / steps as f64).collect(),
            n_chunks,
            mask_first_for_last,
            nfe: 0,
            context_passes: 0,
            records: Vec::new(),
        })
    }

    pub fn next_chunk(&self) -> usize {
        self.cache.next_chunk()
    }

    pub fn is_done(&self) -> bool {
        self.next_chunk() >= self.n_chunks
    }

    pub fn nfe(&self) -> usize {
        self.nfe
    }

    /// Forward passes spent turning finished chunks into cache entries.
    pub fn context_passes(&self) -> usize {
        self.context_passes
    }

    pub fn records(&self) -> &[ChunkRecord] {
        &self.records
    }

    pub fn cache(&self) -> &RollingCache<M::Entry> {
        &self.cache
    }

    fn context(&self) -> Result<Vec<(usize, &M::Entry)>> {
        let k = self.next_chunk();
        if k >= self.n_chunks {
            return Err(Error::Cache(format!("rollout already produced {} chunks", self.n_chunks)));
        }
        let drop_first = self.mask_first_for_last && self.n_chunks > 1 && k == self.n_chunks - 1;
        self.cache.visible(k, drop_first)
    }

    /// Denoises the next chunk from `x0` (`[batch, chunk_dim]`). Steps before
    /// the last `grad_steps` run on scratch graphs; the remaining ones are
    /// recorded on `g` against the parameters bound in `p`. The returned var
    /// lives on `g`. Does not advance the cache; see [`Rollout::commit`].
    pub fn denoise(
        &mut self,
        g: &mut Graph<S>,
        p: &Bound,
        x0: &Tensor<S>,
        cond: &M::ChunkCond,
        grad_steps: usize,
    ) -> Result<Var> {
        if x0.shape().len() != 2 || x0.shape()[1] != self.model.chunk_dim() {
            return Err(Error::Shape {
                op: "rollout noise",
                lhs: x0.shape().to_vec(),
                rhs: vec![0, self.model.chunk_dim()],
            });
        }
        let ctx = self.context()?;
        let chunk = self.next_chunk();
        let ids: Vec<usize> = ctx.iter().map(|(c, _)| *c).collect();
        let entries: Vec<&M::Entry> = ctx.into_iter().map(|(_, e)| e).collect();
        let steps = self.schedule.len() - 1;
        let first_tracked = steps.saturating_sub(grad_steps);
        let mut x = x0.clone();
        let mut xv = None;
        for (j, w) in self.schedule.windows(2).enumerate() {
            let (t0, dt) = (S::from_f64(w[0]), S::from_f64(w[1] - w[0]));
            if j < first_tracked {
                let mut scratch = Graph::new();
                let sp = self.model.params().bind(&mut scratch, false);
                let xs = scratch.constant(&x);
                let v = self.model.chunk_velocity(&mut scratch, &sp, xs, t0, chunk, cond, &entries)?;
                let step = scratch.scale(v, dt);
                let next = scratch.add(xs, step)?;
                x = scratch.tensor(next);
            } else {
                let cur = match xv {
                    Some(v) => v,
                    None => g.constant(&x),
                };
                let v = self.model.chunk_velocity(g, p, cur, t0, chunk, cond, &entries)?;
                let step = g.scale(v, dt);
                xv = Some(g.add(cur, step)?);
            }
        }
        self.nfe += steps;
        self.records.push(ChunkRecord {
            chunk,
            context: ids,
            nfe: steps,
        });
        Ok(match xv {
            Some(v) => v,
            None => g.constant(&x),
        })
    }

    /// Caches `clean` as the context entry of the next chunk and advances.
    /// Self-rollout commits the model's own output; teacher forcing commits
    /// ground truth.
    pub fn commit(&mut self, clean: &Tensor<S>, cond: &M::ChunkCond) -> Result<()> {
        let chunk = self.next_chunk();
        if chunk + 1 < self.n_chunks {
            let ctx: Vec<&M::Entry> = self.context()?.into_iter().map(|(_, e)| e).collect();
            let mut g = Graph::new();
            let p = self.model.params().bind(&mut g, false);
            let x = g.constant(clean);
            let entry = self.model.chunk_entry(&mut g, &p, x, chunk, cond, &ctx)?;
            self.context_passes += 1;
            self.cache.push(chunk, entry)?;
        } else {
            // the final chunk is never attended to; only advance the position
            self.cache.skip(chunk)?;
        }
        Ok(())
    }

    /// Values-only generation of the next chunk followed by a self-commit.
    pub fn generate(&mut self, x0: &Tensor<S>, cond: &M::ChunkCond) -> Result<Tensor<S>> {
        let mut g = Graph::new();
        let p = self.model.params().bind(&mut g, false);
        let out = self.denoise(&mut g, &p, x0, cond, 0)?;
        let out = g.tensor(out);
        self.commit(&out, cond)?;
        Ok(out)
    }
}

/// Noise for chunk `chunk` of stream `seed`; shared by offline and streaming callers.
pub fn chunk_noise<S: Scalar>(seed: u64, chunk: usize, batch: usize, chunk_dim: usize) -> Tensor<S> {
    let mut r = rng::stream(seed, chunk as u64);
    rng::randn(&mut r, &[batch, chunk_dim])
}

/// Offline self-rollout over all chunks with per-chunk seeded noise.
/// Returns `[batch, n_chunks * chunk_dim]` and the per-chunk records.
pub fn self_rollout<S: Scalar, M: CausalModel<S>>(
    model: &M,
    conds: &[M::ChunkCond],
    steps: usize,
    mask_first_for_last: bool,
    batch: usize,
    seed: u64,
) -> Result<(Tensor<S>, Vec<ChunkRecord>)> {
    let mut r = Rollout::new(model, steps, conds.len(), mask_first_for_last)?;
    let mut chunks = Vec::with_capacity(conds.len());
    for (k, cond) in conds.iter().enumerate() {
        let x0 = chunk_noise(seed, k, batch, model.chunk_dim());
        chunks.push(r.generate(&x0, cond)?);
    }
    Ok((concat_chunks(&chunks)?, r.records().to_vec()))
}

/// Rollout whose context comes from `truth` (`[batch, n_chunks * chunk_dim]`)
/// instead of the model's own outputs.
pub fn teacher_forced_rollout<S: Scalar, M: CausalModel<S>>(
    model: &M,
    conds: &[M::ChunkCond],
    truth: &Tensor<S>,
    steps: usize,
    mask_first_for_last: bool,
    seed: u64,
) -> Result<Tensor<S>> {
    let batch = truth.shape()[0];
    let cd = model.chunk_dim();
    let mut r = Rollout::new(model, steps, conds.len(), mask_first_for_last)?;
    let mut chunks = Vec::with_capacity(conds.len());
    for (k, cond) in conds.iter().enumerate() {
        let x0 = chunk_noise(seed, k, batch, cd);
        let mut g = Graph::new();
        let p = model.params().bind(&mut g, false);
        let out = r.denoise(&mut g, &p, &x0, cond, 0)?;
        chunks.push(g.tensor(out));
        r.commit(&column_block(truth, k * cd, cd)?, cond)?;
    }
    concat_chunks(&chunks)
}

/// Columns `start..start + len` of a rank-2 tensor.
pub fn column_block<S: Scalar>(x: &Tensor<S>, start: usize, len: usize) -> Result<Tensor<S>> {
    let (rows, cols) = (x.shape()[0], x.shape()[1]);
    if start + len > cols {
        return Err(Error::invalid(format!("columns {start}..{} of {cols}", start + len)));
    }
    let mut out = Vec::with_capacity(rows * len);
    for r in 0..rows {
        out.extend_from_slice(&x.data()[r * cols + start..r * cols + start + len]);
    }
    Tensor::new(vec![rows, len], out)
}

pub fn concat_chunks<S: Scalar>(chunks: &[Tensor<S>]) -> Result<Tensor<S>> {
    let first = chunks.first().ok_or_else(|| Error::invalid("no chunks"))?;
    let rows = first.shape()[0];
    let cols: usize = chunks.iter().map(|c| c.shape()[1]).sum();
    let mut out = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in chunks {
            let w = c.shape()[1];
            out.extend_from_slice(&c.data()[r * w..(r + 1) * w]);
        }
    }
    Tensor::new(vec![rows, cols], out)
}
