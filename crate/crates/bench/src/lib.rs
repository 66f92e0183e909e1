//! Fixtures shared by the benchmarks.

use rtedit_core::codec::RgbVideo;
use rtedit_core::model::{EditChunkCond, EditorModel, ModelConfig};
use rtedit_core::{rng, Tensor};

pub fn editor(blocks: usize, hidden: usize) -> EditorModel<f32> {
    let cfg = ModelConfig {
        blocks,
        hidden,
        heads: 4,
        latent_channels: 4,
        latent_height: 4,
        latent_width: 4,
        text_dim: 16,
        ..ModelConfig::default()
    };
    EditorModel::new(cfg, &mut rng::seeded(1)).unwrap()
}

/// Per-chunk conditions with random source latents.
pub fn chunk_conds(model: &EditorModel<f32>, chunks: usize) -> Vec<EditChunkCond<f32>> {
    let c = model.config();
    let mut r = rng::seeded(2);
    let text = rng::randn::<f32>(&mut r, &[4, c.text_dim]);
    (0..chunks)
        .map(|_| EditChunkCond {
            src: rng::randn(&mut r, &[c.chunk_latents, c.latent_channels, c.latent_height, c.latent_width]),
            text: text.clone(),
        })
        .collect()
}

pub fn video(frames: usize, height: usize, width: usize) -> RgbVideo<f32> {
    let data = rng::randn::<f32>(&mut rng::seeded(3), &[frames, 3, height, width]);
    RgbVideo::new(data, 16.0).unwrap()
}

pub fn points(n: usize, dim: usize) -> Vec<Vec<f64>> {
    let t: Tensor<f64> = rng::randn(&mut rng::seeded(4), &[n, dim]);
    t.data().chunks(dim).map(<[f64]>::to_vec).collect()
}
