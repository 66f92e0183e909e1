//! The editing transformer.
//!
//! Source and noisy target latents are concatenated along channels,
//! patchified and projected to tokens. Each block runs self-attention
//! (RMS-normalised queries and keys, factorised rotary positions over
//! frame/row/column), cross-attention to the instruction embedding and an
//! MLP, each sublayer modulated by shift/scale/gate vectors derived from the
//! diffusion time. The same weights run bidirectionally, under a chunk-causal
//! mask, or incrementally one chunk at a time against a [`KvCache`].

pub mod cache;
pub mod causal;
pub mod layout;
pub mod mask;
pub mod text;

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::VelocityModel;
use crate::params::{Bound, ParamId, ParamSet, Trainable};
use crate::rng::Rng;
use crate::tensor::{c, Graph, MacTag, NormKind, Scalar, Tensor, Var};

pub use cache::RollingCache;
pub use causal::CausalModel;
pub use layout::{
    attention_cost, channel_concat, patchify, sequence_concat, token_count, unpatchify, AttentionCost,
};
pub use mask::{build_chunk_causal_mask, AttentionMask};
pub use text::HashTextEmbedder;

const NORM_EPS: f64 = 1e-6;
const ROPE_BASE: f64 = 100.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Conditioning {
    /// Source and target share tokens: `2C` input channels.
    Channel,
    /// Source tokens are prepended to target tokens: twice the sequence.
    Sequence,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub blocks: usize,
    pub hidden: usize,
    pub heads: usize,
    pub patch: usize,
    pub latent_channels: usize,
    pub latent_height: usize,
    pub latent_width: usize,
    pub text_dim: usize,
    pub chunk_latents: usize,
    pub window_chunks: usize,
    pub mask_first_for_last: bool,
    pub mlp_ratio: usize,
    pub time_freqs: usize,
    pub conditioning: Conditioning,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            blocks: 4,
            hidden: 64,
            heads: 4,
            patch: 2,
            latent_channels: 4,
            latent_height: 8,
            latent_width: 8,
            text_dim: 16,
            chunk_latents: 3,
            window_chunks: 5,
            mask_first_for_last: true,
            mlp_ratio: 4,
            time_freqs: 32,
            conditioning: Conditioning::Channel,
        }
    }
}

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    pub fn tokens_per_frame(&self) -> usize {
        (self.latent_height / self.patch) * (self.latent_width / self.patch)
    }

    pub fn tokens_per_chunk(&self) -> usize {
        self.chunk_latents * self.tokens_per_frame()
    }

    pub fn frame_shape(&self) -> [usize; 3] {
        [self.latent_channels, self.latent_height, self.latent_width]
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.blocks,
            self.hidden,
            self.heads,
            self.patch,
            self.latent_channels,
            self.latent_height,
            self.latent_width,
            self.text_dim,
            self.chunk_latents,
            self.window_chunks,
            self.mlp_ratio,
            self.time_freqs,
        ];
        if positive.contains(&0) {
            return Err(Error::invalid("model config fields must be positive"));
        }
        if !self.hidden.is_multiple_of(self.heads) {
            return Err(Error::invalid(format!(
                "hidden {} not divisible by heads {}",
                self.hidden, self.heads
            )));
        }
        if !self.head_dim().is_multiple_of(2) || !self.time_freqs.is_multiple_of(2) {
            return Err(Error::invalid("head dim and time_freqs must be even"));
        }
        if !self.latent_height.is_multiple_of(self.patch) || !self.latent_width.is_multiple_of(self.patch) {
            return Err(Error::invalid(format!(
                "patch {} does not divide latent {}x{}",
                self.patch, self.latent_height, self.latent_width
            )));
        }
        Ok(())
    }

    pub fn to_manifest(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn from_manifest(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| Error::Format(format!("model manifest: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug)]
struct Lin {
    w: ParamId,
    b: Option<ParamId>,
}

impl Lin {
    fn new<S: Scalar>(p: &mut ParamSet<S>, name: &str, fan_in: usize, fan_out: usize, bias: bool, rng: &mut Rng) -> Self {
        Self {
            w: p.add_normal(format!("{name}.w"), &[fan_in, fan_out], (1.0 / fan_in as f64).sqrt(), rng),
            b: bias.then(|| p.add_zeros(format!("{name}.b"), &[fan_out])),
        }
    }

    fn apply<S: Scalar>(&self, g: &mut Graph<S>, p: &Bound, x: Var, tag: MacTag) -> Result<Var> {
        let y = g.matmul_tagged(x, p[self.w], tag)?;
        match self.b {
            Some(b) => g.add(y, p[b]),
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
struct Attn {
    q: Lin,
    k: Lin,
    v: Lin,
    o: Lin,
    q_gain: ParamId,
    k_gain: ParamId,
}

impl Attn {
    fn new<S: Scalar>(p: &mut ParamSet<S>, name: &str, kv_in: usize, cfg: &ModelConfig, rng: &mut Rng) -> Self {
        let h = cfg.hidden;
        Self {
            q: Lin::new(p, &format!("{name}.q"), h, h, false, rng),
            k: Lin::new(p, &format!("{name}.k"), kv_in, h, false, rng),
            v: Lin::new(p, &format!("{name}.v"), kv_in, h, false, rng),
            o: Lin::new(p, &format!("{name}.o"), h, h, false, rng),
            q_gain: p.add_ones(format!("{name}.q_gain"), &[cfg.head_dim()]),
            k_gain: p.add_ones(format!("{name}.k_gain"), &[cfg.head_dim()]),
        }
    }
}

#[derive(Clone, Debug)]
struct Block {
    modulation: Lin,
    attn: Attn,
    cross: Attn,
    fc1: Lin,
    fc2: Lin,
}

/// Keys and values of one chunk at every layer, after normalisation and
/// rotary encoding. Rows are the chunk's tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct ChunkKv<S> {
    pub k: Vec<Tensor<S>>,
    pub v: Vec<Tensor<S>>,
}

/// The per-stream KV cache of the editor.
pub type KvCache<S> = RollingCache<ChunkKv<S>>;

/// Token bookkeeping for one trunk call.
struct TokenMeta {
    /// `(frame, row, col)` per token.
    coords: Vec<[usize; 3]>,
    /// Index into the time vector per token.
    time_of: Vec<usize>,
}

/// Conditioning for a bidirectional call through [`VelocityModel`].
#[derive(Clone, Debug)]
pub struct EditCond<S> {
    /// `[T, C, H, W]` source latents.
    pub src: Tensor<S>,
    /// `[L, text_dim]` instruction embedding.
    pub text: Tensor<S>,
}

/// Conditioning for one chunk of a causal rollout.
#[derive(Clone, Debug)]
pub struct EditChunkCond<S> {
    /// `[chunk_latents, C, H, W]` source latents of this chunk.
    pub src: Tensor<S>,
    pub text: Tensor<S>,
}

#[derive(Clone, Debug)]
pub struct EditorModel<S> {
    config: ModelConfig,
    params: ParamSet<S>,
    embed: Lin,
    time1: Lin,
    time2: Lin,
    blocks: Vec<Block>,
    final_mod: Lin,
    head: Lin,
}

impl<S: Scalar> EditorModel<S> {
    pub fn new(config: ModelConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let mut p = ParamSet::new();
        let h = config.hidden;
        let pp = config.patch * config.patch;
        let raw_in = match config.conditioning {
            Conditioning::Channel => 2 * config.latent_channels * pp,
            Conditioning::Sequence => config.latent_channels * pp,
        };
        let embed = Lin::new(&mut p, "embed", raw_in, h, true, rng);
        let time1 = Lin::new(&mut p, "time.0", config.time_freqs, h, true, rng);
        let time2 = Lin::new(&mut p, "time.1", h, h, true, rng);
        let blocks = (0..config.blocks)
            .map(|i| Block {
                modulation: Lin::new(&mut p, &format!("block{i}.mod"), h, 9 * h, true, rng),
                attn: Attn::new(&mut p, &format!("block{i}.attn"), h, &config, rng),
                cross: Attn::new(&mut p, &format!("block{i}.cross"), config.text_dim, &config, rng),
                fc1: Lin::new(&mut p, &format!("block{i}.fc1"), h, config.mlp_ratio * h, true, rng),
                fc2: Lin::new(&mut p, &format!("block{i}.fc2"), config.mlp_ratio * h, h, true, rng),
            })
            .collect();
        let final_mod = Lin::new(&mut p, "final.mod", h, 2 * h, true, rng);
        let head = Lin::new(&mut p, "head", h, config.latent_channels * pp, true, rng);
        Ok(Self {
            config,
            params: p,
            embed,
            time1,
            time2,
            blocks,
            final_mod,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn set_params(&mut self, params: ParamSet<S>) -> Result<()> {
        if params.len() != self.params.len()
            || params.tensors().iter().zip(self.params.tensors()).any(|(a, b)| a.shape() != b.shape())
        {
            return Err(Error::invalid("parameter set does not fit this model"));
        }
        self.params = params;
        Ok(())
    }

    /// Zeroes the output projection, making the model predict zero velocity.
    pub fn zero_head(&mut self) {
        for id in [Some(self.head.w), self.head.b].into_iter().flatten() {
            self.params.get_mut(id).data_mut().iter_mut().for_each(|v| *v = S::zero());
        }
    }

    pub fn cast<T: Scalar>(&self) -> EditorModel<T> {
        EditorModel {
            config: self.config.clone(),
            params: self.params.cast(),
            embed: self.embed.clone(),
            time1: self.time1.clone(),
            time2: self.time2.clone(),
            blocks: self.blocks.clone(),
            final_mod: self.final_mod.clone(),
            head: self.head.clone(),
        }
    }

    /// Writes parameters and a `config.toml` manifest into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        self.params.save_dir(dir)?;
        fs::write(dir.join("config.toml"), self.config.to_manifest())?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let config = ModelConfig::from_manifest(&fs::read_to_string(dir.join("config.toml"))?)?;
        let mut model = Self::new(config, &mut crate::rng::seeded(0))?;
        model.params.load_dir(dir)?;
        Ok(model)
    }

    fn time_embedding(&self, g: &mut Graph<S>, p: &Bound, times: &[S]) -> Result<Var> {
        let half = self.config.time_freqs / 2;
        let mut feats = Vec::with_capacity(times.len() * 2 * half);
        for &t in times {
            for i in 0..half {
                let f = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
                feats.push(S::from_f64((1000.0 * t.as_f64() * f).cos()));
            }
            for i in 0..half {
                let f = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
                feats.push(S::from_f64((1000.0 * t.as_f64() * f).sin()));
            }
        }
        let x = g.constant_vec(&[times.len(), 2 * half], feats)?;
        let h = self.time1.apply(g, p, x, MacTag::Other)?;
        let h = g.silu(h);
        self.time2.apply(g, p, h, MacTag::Other)
    }

    /// Rotary tables for `[rows, head_dim]`: pair `j` rotates with axis
    /// `j % 3` (frame, row, col) at frequency index `j / 3`.
    fn rope_tables(&self, coords: &[[usize; 3]]) -> (Vec<S>, Vec<S>) {
        let pairs = self.config.head_dim() / 2;
        let per_axis: Vec<usize> = (0..3).map(|a| (pairs + 2 - a) / 3).collect();
        let mut cos = Vec::with_capacity(coords.len() * pairs);
        let mut sin = Vec::with_capacity(coords.len() * pairs);
        for xyz in coords {
            for j in 0..pairs {
                let (axis, m) = (j % 3, j / 3);
                let freq = ROPE_BASE.powf(-(m as f64) / per_axis[axis] as f64);
                let angle = xyz[axis] as f64 * freq;
                cos.push(S::from_f64(angle.cos()));
                sin.push(S::from_f64(angle.sin()));
            }
        }
        (cos, sin)
    }

    fn modulate(&self, g: &mut Graph<S>, x: Var, shift: Var, scale: Var) -> Result<Var> {
        let n = g.normalize(x, NormKind::RmsNorm, 1, c(NORM_EPS))?;
        let s1 = g.add_const(scale, S::one());
        let y = g.mul(n, s1)?;
        g.add(y, shift)
    }

    /// Per-head normalised (and optionally rotated) projections, re-joined to `[rows, hidden]`.
    fn heads_qk(&self, g: &mut Graph<S>, x: Var, gain: Var, rope: Option<&(Vec<S>, Vec<S>)>) -> Result<Var> {
        let dh = self.config.head_dim();
        let mut parts = Vec::with_capacity(self.config.heads);
        for hd in 0..self.config.heads {
            let s = g.slice_cols(x, hd * dh, dh)?;
            let s = g.normalize(s, NormKind::RmsNorm, 1, c(NORM_EPS))?;
            let s = g.mul(s, gain)?;
            let s = match rope {
                Some((cs, sn)) => g.rope(s, cs.clone(), sn.clone())?,
                None => s,
            };
            parts.push(s);
        }
        if parts.len() == 1 {
            return Ok(parts[0]);
        }
        g.concat_cols(&parts)
    }

    fn attend(&self, g: &mut Graph<S>, q: Var, k: Var, v: Var, mask: Option<&Vec<bool>>, tags: (MacTag, MacTag)) -> Result<Var> {
        let dh = self.config.head_dim();
        let scale = c::<S>(1.0 / (dh as f64).sqrt());
        let mut outs = Vec::with_capacity(self.config.heads);
        for hd in 0..self.config.heads {
            let qh = g.slice_cols(q, hd * dh, dh)?;
            let kh = g.slice_cols(k, hd * dh, dh)?;
            let vh = g.slice_cols(v, hd * dh, dh)?;
            let kt = g.transpose(kh)?;
            let s = g.matmul_tagged(qh, kt, tags.0)?;
            let s = g.scale(s, scale);
            let a = g.softmax_masked(s, 1, mask.cloned())?;
            outs.push(g.matmul_tagged(a, vh, tags.1)?);
        }
        if outs.len() == 1 {
            return Ok(outs[0]);
        }
        g.concat_cols(&outs)
    }

    /// Runs all blocks. `context[l]` holds earlier keys/values for layer `l`;
    /// `mask` is `[N, context_rows + N]`. Returns the final hidden states and
    /// this call's keys/values per layer.
    #[allow(clippy::too_many_arguments)]
    fn trunk(
        &self,
        g: &mut Graph<S>,
        p: &Bound,
        mut x: Var,
        meta: &TokenMeta,
        times: &[S],
        text: Var,
        context: Option<&[(Var, Var)]>,
        mask: Option<&Vec<bool>>,
    ) -> Result<(Var, Vec<(Var, Var)>)> {
        let h = self.config.hidden;
        let temb = self.time_embedding(g, p, times)?;
        let temb = g.silu(temb);
        let rope = self.rope_tables(&meta.coords);
        let mut kv = Vec::with_capacity(self.blocks.len());
        for (l, blk) in self.blocks.iter().enumerate() {
            let m = blk.modulation.apply(g, p, temb, MacTag::Other)?;
            let m = g.gather_rows(m, &meta.time_of)?;
            let mut part = Vec::with_capacity(9);
            for i in 0..9 {
                part.push(g.slice_cols(m, i * h, h)?);
            }

            let a = self.modulate(g, x, part[0], part[1])?;
            let q = blk.attn.q.apply(g, p, a, MacTag::Projection)?;
            let k = blk.attn.k.apply(g, p, a, MacTag::Projection)?;
            let v = blk.attn.v.apply(g, p, a, MacTag::Projection)?;
            let q = self.heads_qk(g, q, p[blk.attn.q_gain], Some(&rope))?;
            let k = self.heads_qk(g, k, p[blk.attn.k_gain], Some(&rope))?;
            kv.push((k, v));
            let (keys, values) = match context {
                Some(ctx) => (g.concat_rows(&[ctx[l].0, k])?, g.concat_rows(&[ctx[l].1, v])?),
                None => (k, v),
            };
            let o = self.attend(g, q, keys, values, mask, (MacTag::AttnScores, MacTag::AttnValues))?;
            let o = blk.attn.o.apply(g, p, o, MacTag::Projection)?;
            let o = g.mul(part[2], o)?;
            x = g.add(x, o)?;

            let b = self.modulate(g, x, part[3], part[4])?;
            let q = blk.cross.q.apply(g, p, b, MacTag::Other)?;
            let k = blk.cross.k.apply(g, p, text, MacTag::Other)?;
            let v = blk.cross.v.apply(g, p, text, MacTag::Other)?;
            let q = self.heads_qk(g, q, p[blk.cross.q_gain], None)?;
            let k = self.heads_qk(g, k, p[blk.cross.k_gain], None)?;
            let o = self.attend(g, q, k, v, None, (MacTag::Other, MacTag::Other))?;
            let o = blk.cross.o.apply(g, p, o, MacTag::Other)?;
            let o = g.mul(part[5], o)?;
            x = g.add(x, o)?;

            let cc = self.modulate(g, x, part[6], part[7])?;
            let f = blk.fc1.apply(g, p, cc, MacTag::Other)?;
            let f = g.gelu(f);
            let f = blk.fc2.apply(g, p, f, MacTag::Other)?;
            let f = g.mul(part[8], f)?;
            x = g.add(x, f)?;
        }
        let fm = self.final_mod.apply(g, p, temb, MacTag::Other)?;
        let fm = g.gather_rows(fm, &meta.time_of)?;
        let shift = g.slice_cols(fm, 0, h)?;
        let scale = g.slice_cols(fm, h, h)?;
        let y = self.modulate(g, x, shift, scale)?;
        Ok((y, kv))
    }

    fn check_latent(&self, g: &Graph<S>, src: Var, tgt: Var) -> Result<(usize, usize, usize, usize)> {
        if g.shape(src) != g.shape(tgt) {
            return Err(Error::Shape {
                op: "editor input",
                lhs: g.shape(src).to_vec(),
                rhs: g.shape(tgt).to_vec(),
            });
        }
        let (t, ch, hh, ww) = layout::dims4(g.shape(src))?;
        let cfg = &self.config;
        if [ch, hh, ww] != cfg.frame_shape() {
            return Err(Error::Shape {
                op: "editor input",
                lhs: g.shape(src).to_vec(),
                rhs: vec![t, cfg.latent_channels, cfg.latent_height, cfg.latent_width],
            });
        }
        Ok((t, ch, hh, ww))
    }

    fn meta(&self, frames: usize, frame0: usize, time_of_frame: impl Fn(usize) -> usize) -> TokenMeta {
        let gw = self.config.latent_width / self.config.patch;
        let tpf = self.config.tokens_per_frame();
        let mut meta = TokenMeta {
            coords: Vec::with_capacity(frames * tpf),
            time_of: Vec::with_capacity(frames * tpf),
        };
        for f in 0..frames {
            for r in 0..tpf {
                meta.coords.push([frame0 + f, r / gw, r % gw]);
                meta.time_of.push(time_of_frame(f));
            }
        }
        meta
    }

    /// Velocity for the noisy target. `t` holds one time, or one per chunk of
    /// `chunk_latents` frames. `text` is `[L, text_dim]`.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        g: &mut Graph<S>,
        p: &Bound,
        src: Var,
        tgt: Var,
        t: &[S],
        text: Var,
        mask: &AttentionMask,
    ) -> Result<Var> {
        let cfg = &self.config;
        let (frames, _, _, _) = self.check_latent(g, src, tgt)?;
        let shape = g.shape(tgt).to_vec();
        let cl = cfg.chunk_latents;
        let time_of: Box<dyn Fn(usize) -> usize> = if t.len() == 1 {
            Box::new(|_| 0)
        } else if frames % cl == 0 && t.len() == frames / cl {
            Box::new(move |f| f / cl)
        } else {
            return Err(Error::invalid(format!(
                "{} time values for {frames} latent frames in chunks of {cl}",
                t.len()
            )));
        };
        let n = frames * cfg.tokens_per_frame();
        let meta = self.meta(frames, 0, time_of);
        let (tokens, meta, dense) = match cfg.conditioning {
            Conditioning::Channel => {
                if mask.tokens() != n {
                    return Err(Error::invalid(format!(
                        "mask covers {} tokens, input has {n}",
                        mask.tokens()
                    )));
                }
                let cat = layout::channel_concat_var(g, src, tgt)?;
                let raw = layout::patchify_var(g, cat, cfg.patch)?;
                let dense = (!mask.is_full()).then(|| mask.dense());
                (self.embed.apply(g, p, raw, MacTag::Other)?, meta, dense)
            }
            Conditioning::Sequence => {
                if !mask.is_full() || mask.tokens() != 2 * n {
                    return Err(Error::invalid(
                        "sequence conditioning supports only a full mask over both streams",
                    ));
                }
                let rs = layout::patchify_var(g, src, cfg.patch)?;
                let rt = layout::patchify_var(g, tgt, cfg.patch)?;
                let es = self.embed.apply(g, p, rs, MacTag::Other)?;
                let et = self.embed.apply(g, p, rt, MacTag::Other)?;
                let both = g.concat_rows(&[es, et])?;
                let meta = TokenMeta {
                    coords: meta.coords.iter().chain(&meta.coords).copied().collect(),
                    time_of: meta.time_of.iter().chain(&meta.time_of).copied().collect(),
                };
                (both, meta, None)
            }
        };
        let (y, _) = self.trunk(g, p, tokens, &meta, t, text, None, dense.as_ref())?;
        let y = match cfg.conditioning {
            Conditioning::Channel => y,
            Conditioning::Sequence => g.slice_rows(y, n, n)?,
        };
        let out = self.head.apply(g, p, y, MacTag::Other)?;
        layout::unpatchify_var(g, out, &shape, cfg.patch)
    }

    /// One chunk against cached context. Returns the chunk's velocity and
    /// its own keys/values. `context` holds earlier chunks, oldest first.
    #[allow(clippy::too_many_arguments)]
    pub fn forward_chunk(
        &self,
        g: &mut Graph<S>,
        p: &Bound,
        src: Var,
        tgt: Var,
        t: S,
        chunk: usize,
        text: Var,
        context: &[&ChunkKv<S>],
    ) -> Result<(Var, ChunkKv<S>)> {
        let cfg = &self.config;
        if cfg.conditioning != Conditioning::Channel {
            return Err(Error::invalid("incremental decoding needs channel conditioning"));
        }
        let (frames, _, _, _) = self.check_latent(g, src, tgt)?;
        if frames != cfg.chunk_latents {
            return Err(Error::invalid(format!(
                "chunk has {frames} latent frames, expected {}",
                cfg.chunk_latents
            )));
        }
        if context.len() >= cfg.window_chunks {
            return Err(Error::Cache(format!(
                "{} context chunks exceed window {}",
                context.len(),
                cfg.window_chunks
            )));
        }
        for e in context {
            if e.k.len() != cfg.blocks || e.v.len() != cfg.blocks {
                return Err(Error::Cache("cache entry layer count does not match model".into()));
            }
        }
        let shape = g.shape(tgt).to_vec();
        let meta = self.meta(frames, chunk * cfg.chunk_latents, |_| 0);
        let cat = layout::channel_concat_var(g, src, tgt)?;
        let raw = layout::patchify_var(g, cat, cfg.patch)?;
        let tokens = self.embed.apply(g, p, raw, MacTag::Other)?;
        let ctx = if context.is_empty() {
            None
        } else {
            let mut per_layer = Vec::with_capacity(cfg.blocks);
            for l in 0..cfg.blocks {
                let ks: Vec<Var> = context.iter().map(|e| g.constant(&e.k[l])).collect();
                let vs: Vec<Var> = context.iter().map(|e| g.constant(&e.v[l])).collect();
                per_layer.push((g.concat_rows(&ks)?, g.concat_rows(&vs)?));
            }
            Some(per_layer)
        };
        let (y, kv) = self.trunk(g, p, tokens, &meta, &[t], text, ctx.as_deref(), None)?;
        let out = self.head.apply(g, p, y, MacTag::Other)?;
        let out = layout::unpatchify_var(g, out, &shape, cfg.patch)?;
        let entry = ChunkKv {
            k: kv.iter().map(|(k, _)| g.tensor(*k)).collect(),
            v: kv.iter().map(|(_, v)| g.tensor(*v)).collect(),
        };
        Ok((out, entry))
    }

    /// Convenience wrapper: bidirectional prediction on plain tensors.
    pub fn predict(&self, src: &Tensor<S>, tgt: &Tensor<S>, t: &[S], text: &Tensor<S>) -> Result<Tensor<S>> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let (s, x, c_) = (g.constant(src), g.constant(tgt), g.constant(text));
        let n = token_count(src.shape(), self.config.patch)?;
        let n = match self.config.conditioning {
            Conditioning::Channel => n,
            Conditioning::Sequence => 2 * n,
        };
        let out = self.forward(&mut g, &p, s, x, t, c_, &AttentionMask::full(n))?;
        Ok(g.tensor(out))
    }
}

impl<S: Scalar> Trainable<S> for EditorModel<S> {
    fn params_mut(&mut self) -> &mut ParamSet<S> {
        &mut self.params
    }
}

impl<S: Scalar> VelocityModel<S> for EditorModel<S> {
    type Cond = EditCond<S>;

    fn params(&self) -> &ParamSet<S> {
        &self.params
    }

    /// Each row of `x` is a flattened `[T, C, H, W]` target; `None` drops both
    /// source and instruction.
    fn velocity(&self, g: &mut Graph<S>, p: &Bound, x: Var, t: &[S], cond: Option<&EditCond<S>>) -> Result<Var> {
        let cfg = &self.config;
        let rows = g.shape(x)[0];
        let dim = g.shape(x).get(1).copied().unwrap_or(0);
        let per_frame: usize = cfg.frame_shape().iter().product();
        if g.shape(x).len() != 2 || dim % per_frame != 0 || t.len() != rows {
            return Err(Error::Shape {
                op: "editor velocity",
                lhs: g.shape(x).to_vec(),
                rhs: vec![t.len(), per_frame],
            });
        }
        let shape = [dim / per_frame, cfg.latent_channels, cfg.latent_height, cfg.latent_width];
        let (src, text) = match cond {
            Some(c_) => (g.constant(&c_.src), g.constant(&c_.text)),
            None => (
                g.constant(&Tensor::zeros(&shape)),
                g.constant(&Tensor::zeros(&[1, cfg.text_dim])),
            ),
        };
        let n = token_count(&shape, cfg.patch)?;
        let mask = AttentionMask::full(match cfg.conditioning {
            Conditioning::Channel => n,
            Conditioning::Sequence => 2 * n,
        });
        let mut outs = Vec::with_capacity(rows);
        for r in 0..rows {
            let xr = g.slice_rows(x, r, 1)?;
            let xr = g.reshape(xr, &shape)?;
            let v = self.forward(g, p, src, xr, &t[r..r + 1], text, &mask)?;
            outs.push(g.reshape(v, &[1, dim])?);
        }
        if outs.len() == 1 {
            return Ok(outs[0]);
        }
        g.concat_rows(&outs)
    }
}

impl<S: Scalar> CausalModel<S> for EditorModel<S> {
    type Entry = ChunkKv<S>;
    type ChunkCond = EditChunkCond<S>;

    fn params(&self) -> &ParamSet<S> {
        &self.params
    }

    fn chunk_dim(&self) -> usize {
        self.config.chunk_latents * self.config.frame_shape().iter().product::<usize>()
    }

    fn window(&self) -> usize {
        self.config.window_chunks
    }

    fn chunk_velocity(
        &self,
        g: &mut Graph<S>,
        p: &Bound,
        x: Var,
        t: S,
        chunk: usize,
        cond: &EditChunkCond<S>,
        context: &[&ChunkKv<S>],
    ) -> Result<Var> {
        if g.shape(x) != [1, self.chunk_dim()] {
            return Err(Error::Shape {
                op: "editor chunk",
                lhs: g.shape(x).to_vec(),
                rhs: vec![1, self.chunk_dim()],
            });
        }
        let xs = g.reshape(x, cond.src.shape())?;
        let (s, txt) = (g.constant(&cond.src), g.constant(&cond.text));
        let (v, _) = self.forward_chunk(g, p, s, xs, t, chunk, txt, context)?;
        g.reshape(v, &[1, self.chunk_dim()])
    }

    fn chunk_entry(
        &self,
        g: &mut Graph<S>,
        p: &Bound,
        clean: Var,
        chunk: usize,
        cond: &EditChunkCond<S>,
        context: &[&ChunkKv<S>],
    ) -> Result<ChunkKv<S>> {
        let xs = g.reshape(clean, cond.src.shape())?;
        let (s, txt) = (g.constant(&cond.src), g.constant(&cond.text));
        let (_, entry) = self.forward_chunk(g, p, s, xs, S::one(), chunk, txt, context)?;
        Ok(entry)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn tiny() -> ModelConfig {
        ModelConfig {
            blocks: 2,
            hidden: 16,
            heads: 2,
            latent_height: 4,
            latent_width: 4,
            text_dim: 8,
            chunk_latents: 1,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn output_shape_matches_target() {
        let mut r = rng::seeded(3);
        let m = EditorModel::<f64>::new(tiny(), &mut r).unwrap();
        let src = rng::randn::<f64>(&mut r, &[2, 4, 4, 4]);
        let tgt = rng::randn::<f64>(&mut r, &[2, 4, 4, 4]);
        let text = rng::randn::<f64>(&mut r, &[3, 8]);
        let out = m.predict(&src, &tgt, &[0.3], &text).unwrap();
        assert_eq!(out.shape(), tgt.shape());
    }

    #[test]
    fn zero_head_predicts_zero() {
        let mut r = rng::seeded(4);
        let mut m = EditorModel::<f64>::new(tiny(), &mut r).unwrap();
        m.zero_head();
        let x = rng::randn::<f64>(&mut r, &[1, 4, 4, 4]);
        let text = rng::randn::<f64>(&mut r, &[2, 8]);
        let out = m.predict(&x, &x, &[0.5], &text).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn manifest_round_trip() {
        let cfg = ModelConfig::default();
        assert_eq!(ModelConfig::from_manifest(&cfg.to_manifest()).unwrap(), cfg);
        let bad = ModelConfig { heads: 5, ..cfg };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = EditorModel::<f32>::new(tiny(), &mut rng::seeded(1)).unwrap();
        m.save(dir.path()).unwrap();
        let back = EditorModel::<f32>::load(dir.path()).unwrap();
        assert_eq!(back.params, m.params);
        assert_eq!(back.config, m.config);
    }
}
