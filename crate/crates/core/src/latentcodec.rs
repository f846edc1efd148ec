//! Causal video <-> latent codec with 4x temporal and 8x spatial compression.
//!
//! Frame 0 is replicate-padded three times so that the clip splits into
//! groups of four frames; latent group 0 then holds only frame 0 and group
//! `g >= 1` holds frames `4g-3..=4g`. The default codec is a lossless
//! space-to-depth shuffle with `3 * 4 * 8 * 8 = 768` channels, laid out as
//! `((c * 4 + dt) * 8 + dy) * 8 + dx`. A small linear codec with a
//! configurable channel count is available for 16-channel experiments.

use ndarray::{Array1, Array2, Array4, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::Video;

pub const TEMPORAL_STRIDE: usize = 4;
pub const SPATIAL_STRIDE: usize = 8;
pub const PIXEL_CHANNELS: usize = 3;
pub const LOSSLESS_CHANNELS: usize = PIXEL_CHANNELS * TEMPORAL_STRIDE * SPATIAL_STRIDE * SPATIAL_STRIDE;

/// Latent tensor, `c_lat x T_lat x h x w`.
pub type Latent = Array4<f32>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CodecMode {
    LosslessShuffle,
    Trainable,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CodecConfig {
    pub mode: CodecMode,
    pub c_lat: usize,
}

impl Default for CodecConfig {
    fn default() -> Self {
        CodecConfig {
            mode: CodecMode::LosslessShuffle,
            c_lat: LOSSLESS_CHANNELS,
        }
    }
}

impl CodecConfig {
    pub fn trainable(c_lat: usize) -> Self {
        CodecConfig {
            mode: CodecMode::Trainable,
            c_lat,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.mode {
            CodecMode::LosslessShuffle if self.c_lat != LOSSLESS_CHANNELS => Err(Error::config(
                format!("lossless codec has {LOSSLESS_CHANNELS} channels, got {}", self.c_lat),
            )),
            CodecMode::Trainable if self.c_lat == 0 || self.c_lat > LOSSLESS_CHANNELS => {
                Err(Error::config(format!("trainable codec channels {} out of range", self.c_lat)))
            }
            _ => Ok(()),
        }
    }
}

/// `(T_lat, h, w)` for a clip of `frames x height x width`.
pub fn latent_shape(frames: usize, height: usize, width: usize) -> Result<(usize, usize, usize)> {
    if frames == 0 || (frames - 1) % TEMPORAL_STRIDE != 0 {
        return Err(Error::shape(format!("frame count {frames} must be 1 mod 4")));
    }
    if height == 0 || width == 0 || height % SPATIAL_STRIDE != 0 || width % SPATIAL_STRIDE != 0 {
        return Err(Error::shape(format!(
            "frame size {height}x{width} must be a nonzero multiple of 8"
        )));
    }
    Ok((
        1 + (frames - 1) / TEMPORAL_STRIDE,
        height / SPATIAL_STRIDE,
        width / SPATIAL_STRIDE,
    ))
}

/// Pixel frame count that decodes from `t_lat` latent groups.
pub fn frames_for(t_lat: usize) -> usize {
    1 + TEMPORAL_STRIDE * (t_lat - 1)
}

/// Temporal slot `dt` of a lossless latent channel.
pub fn lossless_time_slot(channel: usize) -> usize {
    (channel / (SPATIAL_STRIDE * SPATIAL_STRIDE)) % TEMPORAL_STRIDE
}

/// Original frame index feeding padded frame `4g + dt`.
fn source_frame(g: usize, dt: usize) -> usize {
    (TEMPORAL_STRIDE * g + dt).saturating_sub(TEMPORAL_STRIDE - 1)
}

/// Lossless encode: replicate pad then space-to-depth.
pub fn shuffle(video: &Video) -> Result<Latent> {
    let (c, t, h, w) = video.dim();
    if c != PIXEL_CHANNELS {
        return Err(Error::shape(format!("expected 3 channels, got {c}")));
    }
    let (tl, hl, wl) = latent_shape(t, h, w)?;
    let s = SPATIAL_STRIDE;
    let mut out = Array4::<f32>::zeros((LOSSLESS_CHANNELS, tl, hl, wl));
    for ci in 0..c {
        for g in 0..tl {
            for dt in 0..TEMPORAL_STRIDE {
                let src = source_frame(g, dt);
                for dy in 0..s {
                    for dx in 0..s {
                        let ch = ((ci * TEMPORAL_STRIDE + dt) * s + dy) * s + dx;
                        for i in 0..hl {
                            for j in 0..wl {
                                out[[ch, g, i, j]] = video[[ci, src, s * i + dy, s * j + dx]];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Lossless decode: inverse shuffle; group 0 contributes only its last slot.
pub fn unshuffle(latent: &Latent) -> Result<Video> {
    let (ch, tl, hl, wl) = latent.dim();
    if ch != LOSSLESS_CHANNELS || tl == 0 || hl == 0 || wl == 0 {
        return Err(Error::shape(format!(
            "lossless latent must be {LOSSLESS_CHANNELS} x T x h x w, got {:?}",
            latent.shape()
        )));
    }
    let s = SPATIAL_STRIDE;
    let t = frames_for(tl);
    let mut out = Array4::<f32>::zeros((PIXEL_CHANNELS, t, hl * s, wl * s));
    for ci in 0..PIXEL_CHANNELS {
        for g in 0..tl {
            let first_slot = if g == 0 { TEMPORAL_STRIDE - 1 } else { 0 };
            for dt in first_slot..TEMPORAL_STRIDE {
                let dst = source_frame(g, dt);
                for dy in 0..s {
                    for dx in 0..s {
                        let c = ((ci * TEMPORAL_STRIDE + dt) * s + dy) * s + dx;
                        for i in 0..hl {
                            for j in 0..wl {
                                out[[ci, dst, s * i + dy, s * j + dx]] = latent[[c, g, i, j]];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Linear codec acting on shuffled 768-vectors (a 3D convolution whose
/// kernel equals its stride). The decoder output is clamped to `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearCodec {
    /// `c_lat x 768`
    pub enc_w: Array2<f32>,
    pub enc_b: Array1<f32>,
    /// `768 x c_lat`
    pub dec_w: Array2<f32>,
    pub dec_b: Array1<f32>,
}

/// Columns of a latent as rows: `(T_lat * h * w) x c`.
fn latent_rows(latent: &Latent) -> Array2<f32> {
    let (c, tl, hl, wl) = latent.dim();
    let perm = latent.view().permuted_axes([1, 2, 3, 0]);
    perm.as_standard_layout()
        .into_owned()
        .into_shape_with_order((tl * hl * wl, c))
        .expect("contiguous")
}

fn rows_to_latent(rows: Array2<f32>, tl: usize, hl: usize, wl: usize) -> Latent {
    let c = rows.ncols();
    let grid = rows.into_shape_with_order((tl, hl, wl, c)).expect("row count");
    grid.permuted_axes([3, 0, 1, 2]).as_standard_layout().into_owned()
}

impl LinearCodec {
    pub fn new(c_lat: usize, seed: u64) -> Result<Self> {
        CodecConfig::trainable(c_lat).validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0f32, (1.0 / LOSSLESS_CHANNELS as f32).sqrt()).expect("std > 0");
        let enc_w = Array2::from_shape_simple_fn((c_lat, LOSSLESS_CHANNELS), || normal.sample(&mut rng));
        let dec_w = enc_w.t().as_standard_layout().into_owned();
        Ok(LinearCodec {
            enc_w,
            enc_b: Array1::zeros(c_lat),
            dec_w,
            dec_b: Array1::from_elem(LOSSLESS_CHANNELS, 0.5),
        })
    }

    pub fn channels(&self) -> usize {
        self.enc_w.nrows()
    }

    pub fn encode(&self, video: &Video) -> Result<Latent> {
        let shuffled = shuffle(video)?;
        let (_, tl, hl, wl) = shuffled.dim();
        let rows = latent_rows(&shuffled).dot(&self.enc_w.t()) + &self.enc_b;
        Ok(rows_to_latent(rows, tl, hl, wl))
    }

    pub fn decode(&self, latent: &Latent) -> Result<Video> {
        let (c, tl, hl, wl) = latent.dim();
        if c != self.channels() {
            return Err(Error::shape(format!(
                "latent has {c} channels, codec expects {}",
                self.channels()
            )));
        }
        let rows = latent_rows(latent).dot(&self.dec_w.t()) + &self.dec_b;
        let mut full = rows_to_latent(rows, tl, hl, wl);
        full.mapv_inplace(|v| v.clamp(0.0, 1.0));
        unshuffle(&full)
    }

    /// Fits encoder and decoder to reconstruct the given clips with Adam on
    /// the mean squared reconstruction error. Returns the loss per step.
    pub fn fit(&mut self, clips: &[Video], steps: usize, lr: f32, batch: usize, seed: u64) -> Result<Vec<f32>> {
        let mut rows = Vec::new();
        for clip in clips {
            rows.push(latent_rows(&shuffle(clip)?));
        }
        let views: Vec<_> = rows.iter().map(|r| r.view()).collect();
        let data = ndarray::concatenate(Axis(0), &views).map_err(|e| Error::shape(e.to_string()))?;
        if data.nrows() == 0 {
            return Err(Error::config("no data to fit the codec on"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut adam = [
            AdamSlot::new(self.enc_w.len()),
            AdamSlot::new(self.enc_b.len()),
            AdamSlot::new(self.dec_w.len()),
            AdamSlot::new(self.dec_b.len()),
        ];
        let mut losses = Vec::with_capacity(steps);
        for step in 1..=steps {
            let idx: Vec<usize> = (0..batch)
                .map(|_| rand::Rng::random_range(&mut rng, 0..data.nrows()))
                .collect();
            let x = data.select(Axis(0), &idx);
            let z = x.dot(&self.enc_w.t()) + &self.enc_b;
            let y = z.dot(&self.dec_w.t()) + &self.dec_b;
            let diff = &y - &x;
            let n = diff.len() as f32;
            losses.push(diff.iter().map(|d| d * d).sum::<f32>() / n);
            let gy = diff * (2.0 / n);
            let g_dec_w = gy.t().dot(&z);
            let g_dec_b = gy.sum_axis(Axis(0));
            let gz = gy.dot(&self.dec_w);
            let g_enc_w = gz.t().dot(&x);
            let g_enc_b = gz.sum_axis(Axis(0));
            adam[0].update(self.enc_w.as_slice_mut().expect("contiguous"), g_enc_w.as_slice().expect("contiguous"), lr, step);
            adam[1].update(self.enc_b.as_slice_mut().expect("contiguous"), g_enc_b.as_slice().expect("contiguous"), lr, step);
            adam[2].update(self.dec_w.as_slice_mut().expect("contiguous"), g_dec_w.as_slice().expect("contiguous"), lr, step);
            adam[3].update(self.dec_b.as_slice_mut().expect("contiguous"), g_dec_b.as_slice().expect("contiguous"), lr, step);
        }
        Ok(losses)
    }
}

struct AdamSlot {
    m: Vec<f32>,
    v: Vec<f32>,
}

impl AdamSlot {
    fn new(n: usize) -> Self {
        AdamSlot {
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    fn update(&mut self, p: &mut [f32], g: &[f32], lr: f32, step: usize) {
        let (b1, b2, eps) = (0.9f32, 0.999f32, 1e-8f32);
        let c1 = 1.0 - b1.powi(step as i32);
        let c2 = 1.0 - b2.powi(step as i32);
        for i in 0..p.len() {
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g[i];
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g[i] * g[i];
            p[i] -= lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + eps);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Codec {
    Lossless,
    Trainable(LinearCodec),
}

impl Codec {
    pub fn from_config(config: &CodecConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        Ok(match config.mode {
            CodecMode::LosslessShuffle => Codec::Lossless,
            CodecMode::Trainable => Codec::Trainable(LinearCodec::new(config.c_lat, seed)?),
        })
    }

    pub fn config(&self) -> CodecConfig {
        match self {
            Codec::Lossless => CodecConfig::default(),
            Codec::Trainable(c) => CodecConfig::trainable(c.channels()),
        }
    }

    pub fn channels(&self) -> usize {
        self.config().c_lat
    }

    pub fn encode(&self, video: &Video) -> Result<Latent> {
        if video.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("codec input".into()));
        }
        match self {
            Codec::Lossless => shuffle(video),
            Codec::Trainable(c) => c.encode(video),
        }
    }

    pub fn decode(&self, latent: &Latent) -> Result<Video> {
        match self {
            Codec::Lossless => unshuffle(latent),
            Codec::Trainable(c) => c.decode(latent),
        }
    }
}
