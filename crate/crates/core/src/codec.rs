//! Exactly invertible causal video codec.
//!
//! RGB frames are grouped in time as `[1, 4, 4, ...]`. Each group covers
//! four frames (the leading single frame is replicated four times) and each
//! 8x8 spatial block of a group is flattened per colour into 256 values and
//! mixed by an orthonormal Walsh-Hadamard transform. A latent frame has
//! `3 * 256 = 768` channels at 1/8 the spatial size, and depends only on its
//! own temporal group.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::io::{parse_field, read_f32_payload, read_header, write_f32_payload};
use crate::tensor::{Scalar, Tensor};

pub const SPATIAL: usize = 8;
pub const TEMPORAL: usize = 4;
const BLOCK: usize = TEMPORAL * SPATIAL * SPATIAL;
/// Channels of a lossless latent frame.
pub const LATENT_CHANNELS: usize = 3 * BLOCK;

#[derive(Clone, Debug, PartialEq)]
pub struct RgbVideo<S> {
    /// `[T, 3, H, W]`, values nominally in `[0, 1]`.
    pub frames: Tensor<S>,
    pub fps: f64,
}

impl<S: Scalar> RgbVideo<S> {
    pub fn new(frames: Tensor<S>, fps: f64) -> Result<Self> {
        match frames.shape() {
            [_, 3, h, w] if h % SPATIAL == 0 && w % SPATIAL == 0 => {}
            s => {
                return Err(Error::invalid(format!(
                    "video must be [T, 3, H, W] with H, W divisible by {SPATIAL}, got {s:?}"
                )))
            }
        }
        if !(fps > 0.0) {
            return Err(Error::invalid("fps must be positive"));
        }
        Ok(Self { frames, fps })
    }

    pub fn len(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn height(&self) -> usize {
        self.frames.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.frames.shape()[3]
    }

    /// Frames `start..start + len` as a new video.
    pub fn slice(&self, start: usize, len: usize) -> Result<Self> {
        let per = 3 * self.height() * self.width();
        if len == 0 || start + len > self.len() {
            return Err(Error::invalid(format!(
                "frames {start}..{} out of {}",
                start + len,
                self.len()
            )));
        }
        let data = self.frames.data()[start * per..(start + len) * per].to_vec();
        Self::new(Tensor::new(vec![len, 3, self.height(), self.width()], data)?, self.fps)
    }

    pub fn concat(parts: &[Self]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| Error::invalid("concat of no videos"))?;
        let mut data = Vec::new();
        let mut t = 0;
        for p in parts {
            if p.frames.shape()[1..] != first.frames.shape()[1..] {
                return Err(Error::Shape {
                    op: "video concat",
                    lhs: first.frames.shape().to_vec(),
                    rhs: p.frames.shape().to_vec(),
                });
            }
            t += p.len();
            data.extend_from_slice(p.frames.data());
        }
        Self::new(Tensor::new(vec![t, 3, first.height(), first.width()], data)?, first.fps)
    }
}

/// Latent frames plus the RGB frame span `(start, len)` each one covers.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentVideo<S> {
    /// `[T_lat, C_lat, H/8, W/8]`.
    pub latents: Tensor<S>,
    pub spans: Vec<(usize, usize)>,
}

impl<S: Scalar> LatentVideo<S> {
    pub fn len(&self) -> usize {
        self.latents.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn rgb_frames(&self) -> usize {
        self.spans.last().map_or(0, |(s, l)| s + l)
    }

    /// Checks that spans are contiguous from 0 with lengths `[1, 4, 4, ...]`,
    /// or `[4, 4, ...]` when the video does not start at frame 0.
    pub fn validate(&self) -> Result<()> {
        if self.latents.shape().len() != 4 || self.spans.len() != self.len() {
            return Err(Error::invalid(format!(
                "{} spans for latent shape {:?}",
                self.spans.len(),
                self.latents.shape()
            )));
        }
        let mut next = self.spans.first().map_or(0, |s| s.0);
        for (i, &(s, l)) in self.spans.iter().enumerate() {
            let want = if i == 0 && s == 0 { 1 } else { TEMPORAL };
            if s != next || l != want {
                return Err(Error::invalid(format!("malformed temporal span {i}: ({s}, {l})")));
            }
            next = s + l;
        }
        Ok(())
    }

    pub fn concat(parts: &[Self]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| Error::invalid("concat of no latents"))?;
        let mut data = Vec::new();
        let mut spans = Vec::new();
        for p in parts {
            if p.latents.shape()[1..] != first.latents.shape()[1..] {
                return Err(Error::Shape {
                    op: "latent concat",
                    lhs: first.latents.shape().to_vec(),
                    rhs: p.latents.shape().to_vec(),
                });
            }
            data.extend_from_slice(p.latents.data());
            spans.extend_from_slice(&p.spans);
        }
        let mut shape = first.latents.shape().to_vec();
        shape[0] = spans.len();
        let out = Self {
            latents: Tensor::new(shape, data)?,
            spans,
        };
        out.validate()?;
        Ok(out)
    }

    /// Latent frames `start..start + len`.
    pub fn slice(&self, start: usize, len: usize) -> Result<Self> {
        if len == 0 || start + len > self.len() {
            return Err(Error::invalid(format!("latents {start}..{} out of {}", start + len, self.len())));
        }
        let per: usize = self.latents.shape()[1..].iter().product();
        let mut shape = self.latents.shape().to_vec();
        shape[0] = len;
        Ok(Self {
            latents: Tensor::new(shape, self.latents.data()[start * per..(start + len) * per].to_vec())?,
            spans: self.spans[start..start + len].to_vec(),
        })
    }
}

/// In-place orthonormal Walsh-Hadamard transform (self-inverse).
fn wht(x: &mut [f64]) {
    let n = x.len();
    let mut h = 1;
    while h < n {
        for i in (0..n).step_by(2 * h) {
            for j in i..i + h {
                let (a, b) = (x[j], x[j + h]);
                x[j] = a + b;
                x[j + h] = a - b;
            }
        }
        h *= 2;
    }
    let s = 1.0 / (n as f64).sqrt();
    x.iter_mut().for_each(|v| *v *= s);
}

/// Number of RGB frames that encode to `latents` latent frames from the start of a video.
pub fn frames_for_latents(latents: usize) -> usize {
    if latents == 0 {
        0
    } else {
        1 + TEMPORAL * (latents - 1)
    }
}

/// `(rgb_frames, latent_frames)` per streaming chunk.
pub fn chunk_boundaries(total_latents: usize, chunk_latents: usize) -> Result<Vec<(usize, usize)>> {
    if chunk_latents == 0 || !total_latents.is_multiple_of(chunk_latents) {
        return Err(Error::invalid(format!(
            "{total_latents} latents do not split into chunks of {chunk_latents}"
        )));
    }
    Ok((0..total_latents / chunk_latents)
        .map(|i| {
            let rgb = if i == 0 {
                frames_for_latents(chunk_latents)
            } else {
                TEMPORAL * chunk_latents
            };
            (rgb, chunk_latents)
        })
        .collect())
}

/// The block codec. `keep_channels` truncates latents for a lossy variant.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Codec {
    pub keep_channels: Option<usize>,
}

impl Codec {
    pub fn lossless() -> Self {
        Self { keep_channels: None }
    }

    pub fn lossy(keep: usize) -> Result<Self> {
        if keep == 0 || keep > LATENT_CHANNELS {
            return Err(Error::invalid(format!("keep_channels must be in 1..={LATENT_CHANNELS}")));
        }
        Ok(Self {
            keep_channels: Some(keep),
        })
    }

    pub fn latent_channels(&self) -> usize {
        self.keep_channels.unwrap_or(LATENT_CHANNELS)
    }

    /// Encodes a whole video; needs `T = 1 + 4k`.
    pub fn encode<S: Scalar>(&self, video: &RgbVideo<S>) -> Result<LatentVideo<S>> {
        if video.len() % TEMPORAL != 1 {
            return Err(Error::invalid(format!(
                "video of {} frames is not 1 + 4k",
                video.len()
            )));
        }
        self.encode_frames(video, 0)
    }

    /// Encodes frames that start at absolute frame `offset`. At offset 0 the
    /// first frame forms its own group; elsewhere the frame count must be a
    /// multiple of 4. This is the streaming entry point.
    pub fn encode_frames<S: Scalar>(&self, video: &RgbVideo<S>, offset: usize) -> Result<LatentVideo<S>> {
        let t = video.len();
        let mut spans = Vec::new();
        let mut start = 0;
        if offset == 0 {
            spans.push((0, 1));
            start = 1;
        } else if offset % TEMPORAL != 1 {
            return Err(Error::invalid(format!("chunk offset {offset} is not on a group boundary")));
        }
        if !(t - start).is_multiple_of(TEMPORAL) {
            return Err(Error::invalid(format!(
                "{} frames after offset {offset} do not fill groups of {TEMPORAL}",
                t - start
            )));
        }
        while start < t {
            spans.push((start, TEMPORAL));
            start += TEMPORAL;
        }
        let (h, w) = (video.height(), video.width());
        let (bh, bw) = (h / SPATIAL, w / SPATIAL);
        let c_out = self.latent_channels();
        let mut out = vec![S::zero(); spans.len() * c_out * bh * bw];
        let px = video.frames.data();
        let mut buf = vec![0.0f64; BLOCK];
        for (li, &(s, len)) in spans.iter().enumerate() {
            for by in 0..bh {
                for bx in 0..bw {
                    for color in 0..3 {
                        for f in 0..TEMPORAL {
                            let frame = s + if len == 1 { 0 } else { f };
                            for y in 0..SPATIAL {
                                for x in 0..SPATIAL {
                                    let i = ((frame * 3 + color) * h + by * SPATIAL + y) * w + bx * SPATIAL + x;
                                    buf[(f * SPATIAL + y) * SPATIAL + x] = px[i].as_f64();
                                }
                            }
                        }
                        wht(&mut buf);
                        for (k, &v) in buf.iter().enumerate() {
                            let ch = color * BLOCK + k;
                            if ch < c_out {
                                out[((li * c_out + ch) * bh + by) * bw + bx] = S::from_f64(v);
                            }
                        }
                    }
                }
            }
        }
        let spans = spans.into_iter().map(|(s, l)| (s + offset, l)).collect();
        Ok(LatentVideo {
            latents: Tensor::new(vec![out.len() / (c_out * bh * bw), c_out, bh, bw], out)?,
            spans,
        })
    }

    pub fn decode<S: Scalar>(&self, latent: &LatentVideo<S>, fps: f64) -> Result<RgbVideo<S>> {
        latent.validate()?;
        let shape = latent.latents.shape();
        let (bh, bw) = (shape[2], shape[3]);
        if shape[1] != self.latent_channels() {
            return Err(Error::Shape {
                op: "decode",
                lhs: shape.to_vec(),
                rhs: vec![shape[0], self.latent_channels(), bh, bw],
            });
        }
        let (h, w) = (bh * SPATIAL, bw * SPATIAL);
        let base = latent.spans[0].0;
        let t = latent.rgb_frames() - base;
        let mut px = vec![S::zero(); t * 3 * h * w];
        let lat = latent.latents.data();
        let c_in = shape[1];
        let mut buf = vec![0.0f64; BLOCK];
        for (li, &(s, len)) in latent.spans.iter().enumerate() {
            for by in 0..bh {
                for bx in 0..bw {
                    for color in 0..3 {
                        buf.iter_mut().for_each(|v| *v = 0.0);
                        for k in 0..BLOCK {
                            let ch = color * BLOCK + k;
                            if ch < c_in {
                                buf[k] = lat[((li * c_in + ch) * bh + by) * bw + bx].as_f64();
                            }
                        }
                        wht(&mut buf);
                        for y in 0..SPATIAL {
                            for x in 0..SPATIAL {
                                let vals = (0..TEMPORAL).map(|f| buf[(f * SPATIAL + y) * SPATIAL + x]);
                                let row = by * SPATIAL + y;
                                let col = bx * SPATIAL + x;
                                if len == 1 {
                                    let mean = vals.sum::<f64>() / TEMPORAL as f64;
                                    px[(((s - base) * 3 + color) * h + row) * w + col] = S::from_f64(mean);
                                } else {
                                    for (f, v) in vals.enumerate() {
                                        px[(((s - base + f) * 3 + color) * h + row) * w + col] = S::from_f64(v);
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        RgbVideo::new(Tensor::new(vec![t, 3, h, w], px)?, fps)
    }
}

const VIDEO_MAGIC: &str = "RTVIDEO 1";

/// Raw video fixture: text header (`frames`, `height`, `width`, `fps`) then
/// `[T, 3, H, W]` little-endian `f32`.
pub fn save_video<S: Scalar>(path: &Path, v: &RgbVideo<S>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write!(
        w,
        "{VIDEO_MAGIC}\nframes = {}\nheight = {}\nwidth = {}\nfps = {}\nbyte_order = little\n\n",
        v.len(),
        v.height(),
        v.width(),
        v.fps
    )?;
    write_f32_payload(&mut w, v.frames.data())?;
    w.flush()?;
    Ok(())
}

pub fn load_video<S: Scalar>(path: &Path) -> Result<RgbVideo<S>> {
    let mut r = BufReader::new(File::open(path)?);
    let fields = read_header(&mut r, VIDEO_MAGIC)?;
    let t: usize = parse_field(&fields, "frames")?;
    let h: usize = parse_field(&fields, "height")?;
    let w: usize = parse_field(&fields, "width")?;
    let fps: f64 = parse_field(&fields, "fps")?;
    let data = read_f32_payload(&mut r, t * 3 * h * w)?;
    RgbVideo::new(Tensor::new(vec![t, 3, h, w], data)?, fps)
}
