//! Editor fixtures shared by the editor tests and the acceptance run.
#![allow(dead_code)]

use rtedit_core::model::{build_chunk_causal_mask, CausalModel, ChunkKv, EditChunkCond, EditorModel, KvCache, ModelConfig};
use rtedit_core::rng;
use rtedit_core::{Graph, Scalar, Tensor};

pub fn small(blocks: usize, window: usize, mask_first: bool) -> ModelConfig {
    ModelConfig {
        blocks,
        hidden: 16,
        heads: 2,
        latent_height: 4,
        latent_width: 4,
        text_dim: 8,
        chunk_latents: 3,
        window_chunks: window,
        mask_first_for_last: mask_first,
        ..ModelConfig::default()
    }
}

pub fn frames<S: Scalar>(x: &Tensor<S>, start: usize, len: usize) -> Tensor<S> {
    let per: usize = x.shape()[1..].iter().product();
    let mut shape = x.shape().to_vec();
    shape[0] = len;
    Tensor::new(shape, x.data()[start * per..(start + len) * per].to_vec()).unwrap()
}

pub fn full_causal<S: Scalar>(
    m: &EditorModel<S>,
    src: &Tensor<S>,
    tgt: &Tensor<S>,
    t: &[S],
    text: &Tensor<S>,
    mask_first: bool,
) -> Tensor<S> {
    let cfg = m.config();
    let n_chunks = src.shape()[0] / cfg.chunk_latents;
    let mask = build_chunk_causal_mask(n_chunks, cfg.tokens_per_chunk(), cfg.window_chunks, mask_first).unwrap();
    let mut g = Graph::new();
    let p = CausalModel::params(m).bind(&mut g, false);
    let (s, x, c) = (g.constant(src), g.constant(tgt), g.constant(text));
    let out = m.forward(&mut g, &p, s, x, t, c, &mask).unwrap();
    g.tensor(out)
}

pub struct Fixture<S> {
    pub model: EditorModel<S>,
    pub src: Tensor<S>,
    pub clean: Tensor<S>,
    pub noisy: Tensor<S>,
    pub text: Tensor<S>,
}

pub fn fixture<S: Scalar>(cfg: ModelConfig, n_chunks: usize, seed: u64) -> Fixture<S> {
    let mut r = rng::seeded(seed);
    let model = EditorModel::new(cfg.clone(), &mut r).unwrap();
    let shape = [n_chunks * cfg.chunk_latents, cfg.latent_channels, cfg.latent_height, cfg.latent_width];
    Fixture {
        model,
        src: rng::randn(&mut r, &shape),
        clean: rng::randn(&mut r, &shape),
        noisy: rng::randn(&mut r, &shape),
        text: rng::randn(&mut r, &[3, cfg.text_dim]),
    }
}

/// Incremental decoding of every chunk: chunk k is denoised at time `tk`
/// against the cache of the clean earlier chunks.
pub fn incremental<S: Scalar>(f: &Fixture<S>, n_chunks: usize, tk: S, mask_first: bool) -> Vec<Tensor<S>> {
    let cfg = f.model.config();
    let cl = cfg.chunk_latents;
    let mut cache: KvCache<S> = KvCache::new(cfg.window_chunks).unwrap();
    let mut outs = Vec::new();
    for k in 0..n_chunks {
        let cond = EditChunkCond {
            src: frames(&f.src, k * cl, cl),
            text: f.text.clone(),
        };
        let drop_first = mask_first && k == n_chunks - 1;
        let ctx: Vec<&ChunkKv<S>> = cache.visible(k, drop_first).unwrap().into_iter().map(|(_, e)| e).collect();
        let mut g = Graph::new();
        let p = CausalModel::params(&f.model).bind(&mut g, false);
        let x = g.constant(&frames(&f.noisy, k * cl, cl).reshape(&[1, f.model.chunk_dim()]).unwrap());
        let v = f.model.chunk_velocity(&mut g, &p, x, tk, k, &cond, &ctx).unwrap();
        outs.push(g.tensor(v));
        let clean = g.constant(&frames(&f.clean, k * cl, cl).reshape(&[1, f.model.chunk_dim()]).unwrap());
        let entry = f.model.chunk_entry(&mut g, &p, clean, k, &cond, &ctx).unwrap();
        drop(ctx);
        cache.push(k, entry).unwrap();
        assert!(cache.len() < cfg.window_chunks);
    }
    outs
}

/// Oracle for chunk k: full masked forward over chunks 0..=k where earlier
/// chunks are clean at t = 1 and chunk k is noisy at `tk`.
pub fn recompute<S: Scalar>(f: &Fixture<S>, k: usize, n_chunks: usize, tk: S, mask_first: bool) -> Tensor<S> {
    let cl = f.model.config().chunk_latents;
    let mut data = if k == 0 { Vec::new() } else { frames(&f.clean, 0, k * cl).into_data() };
    data.extend_from_slice(frames(&f.noisy, k * cl, cl).data());
    let mut shape = f.src.shape().to_vec();
    shape[0] = (k + 1) * cl;
    let tgt = Tensor::new(shape, data).unwrap();
    let src = frames(&f.src, 0, (k + 1) * cl);
    let mut t = vec![S::one(); k + 1];
    t[k] = tk;
    let out = full_causal(&f.model, &src, &tgt, &t, &f.text, mask_first && k == n_chunks - 1);
    frames(&out, k * cl, cl)
}


pub fn chunk_changed(f: &Fixture<f64>, cfg: &ModelConfig, n: usize, perturb: usize, mask_first: bool) -> bool {
    let t = vec![0.5; n];
    let base = full_causal(&f.model, &f.src, &f.noisy, &t, &f.text, mask_first);
    let mut bumped = f.noisy.clone();
    let per = bumped.len() / n;
    let cl = cfg.chunk_latents;
    for v in &mut bumped.data_mut()[perturb * per..(perturb + 1) * per] {
        *v += 1.0;
    }
    let out = full_causal(&f.model, &f.src, &bumped, &t, &f.text, mask_first);
    frames(&out, (n - 1) * cl, cl) != frames(&base, (n - 1) * cl, cl)
}
