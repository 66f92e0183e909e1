//! Interface shared by every chunk-causal generator.

use crate::error::Result;
use crate::params::{Bound, ParamSet};
use crate::tensor::{Graph, Scalar, Var};

/// A model that produces a video one chunk at a time, attending only to a
/// window of cached context from earlier chunks.
pub trait CausalModel<S: Scalar> {
    /// What is cached per finished chunk.
    type Entry: Clone + Send;
    /// Per-chunk conditioning (source chunk, instruction, ...).
    type ChunkCond;

    fn params(&self) -> &ParamSet<S>;

    /// Flattened size of one chunk.
    fn chunk_dim(&self) -> usize;

    /// Window in chunks, including the chunk being generated.
    fn window(&self) -> usize;

    /// Velocity for chunk `chunk` at a `[batch, chunk_dim]` noisy state.
    /// `context` is ordered oldest first.
    #[allow(clippy::too_many_arguments)]
    fn chunk_velocity(
        &self,
        g: &mut Graph<S>,
        p: &Bound,
        x: Var,
        t: S,
        chunk: usize,
        cond: &Self::ChunkCond,
        context: &[&Self::Entry],
    ) -> Result<Var>;

    /// Cache entry for a finished (clean) chunk.
    fn chunk_entry(
        &self,
        g: &mut Graph<S>,
        p: &Bound,
        clean: Var,
        chunk: usize,
        cond: &Self::ChunkCond,
        context: &[&Self::Entry],
    ) -> Result<Self::Entry>;
}
