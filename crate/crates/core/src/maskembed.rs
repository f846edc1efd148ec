//! Preservation masks over the joint sequence and their packed latent form.
//!
//! A mask video is `1 x T_joint x H x W` with 1 meaning "keep this content"
//! and 0 meaning "generate". Packing downsamples each 8x8 cell by its area
//! average, repeats frame 0 so the frame count becomes `4 * T_lat`, and folds
//! each group of four frames into channels, giving `4 x T_lat x H/8 x W/8`.

use ndarray::{s, Array4};

use crate::error::{Error, Result};
use crate::latentcodec::{frames_for, latent_shape, SPATIAL_STRIDE, TEMPORAL_STRIDE};
use crate::Video;

/// Packed latent mask, `4 x T_lat x h x w`.
pub type MaskLatent = Array4<f32>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskMode {
    /// Keep frame 0, generate all later frames.
    BaseI2v,
    /// Keep frame 0 and the background, regenerate the (soft) body region.
    Avatar,
}

/// Frame 0 all ones, frames `1..t_joint` all zeros.
pub fn base_i2v_mask(t_joint: usize, height: usize, width: usize) -> Result<Video> {
    if t_joint == 0 || height == 0 || width == 0 {
        return Err(Error::shape("mask dimensions must be nonzero"));
    }
    let mut m = Array4::zeros((1, t_joint, height, width));
    m.slice_mut(s![0, 0, .., ..]).fill(1.0);
    Ok(m)
}

/// Frame 0 all ones; frame `t >= 1` is `1 - soft[t - 1]`, where `soft` holds
/// the blurred body mask of the motion frames.
pub fn avatar_mask(soft_body_mask: &Video) -> Result<Video> {
    let (c, t, h, w) = soft_body_mask.dim();
    if c != 1 {
        return Err(Error::shape(format!("soft mask must have one channel, got {c}")));
    }
    if let Some(v) = soft_body_mask.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::Range(format!("soft mask value {v} outside [0, 1]")));
    }
    let mut m = Array4::zeros((1, t + 1, h, w));
    m.slice_mut(s![0, 0, .., ..]).fill(1.0);
    m.slice_mut(s![.., 1.., .., ..])
        .assign(&soft_body_mask.mapv(|v| 1.0 - v));
    Ok(m)
}

/// Area-averaged value of the `8 x 8` cell `(i, j)` of frame `t`.
fn cell_mean(mask: &Video, t: usize, i: usize, j: usize) -> f32 {
    let s = SPATIAL_STRIDE;
    let mut acc = 0.0f64;
    for dy in 0..s {
        for dx in 0..s {
            acc += mask[[0, t, s * i + dy, s * j + dx]] as f64;
        }
    }
    (acc / (s * s) as f64) as f32
}

/// Packs a `1 x T_joint x H x W` mask into `4 x T_lat x H/8 x W/8`.
///
/// Channel `k` of latent frame `g` is the downsampled padded frame `4g + k`,
/// i.e. source frame `max(4g + k - 3, 0)`.
pub fn pack_mask(mask: &Video) -> Result<MaskLatent> {
    let (c, t, h, w) = mask.dim();
    if c != 1 {
        return Err(Error::shape(format!("mask must have one channel, got {c}")));
    }
    let (tl, hl, wl) = latent_shape(t, h, w)?;
    let mut down = Array4::<f32>::zeros((1, t, hl, wl));
    for ti in 0..t {
        for i in 0..hl {
            for j in 0..wl {
                down[[0, ti, i, j]] = cell_mean(mask, ti, i, j);
            }
        }
    }
    let mut out = Array4::zeros((TEMPORAL_STRIDE, tl, hl, wl));
    for g in 0..tl {
        for k in 0..TEMPORAL_STRIDE {
            let src = (TEMPORAL_STRIDE * g + k).saturating_sub(TEMPORAL_STRIDE - 1);
            out.slice_mut(s![k, g, .., ..]).assign(&down.slice(s![0, src, .., ..]));
        }
    }
    Ok(out)
}

/// Inverse of the temporal folding with nearest spatial upsampling. Group 0
/// contributes only its last channel, mirroring the codec's decode.
pub fn unpack_mask(mask_latent: &MaskLatent) -> Result<Video> {
    let (k, tl, hl, wl) = mask_latent.dim();
    if k != TEMPORAL_STRIDE || tl == 0 || hl == 0 || wl == 0 {
        return Err(Error::shape(format!(
            "mask latent must be 4 x T x h x w, got {:?}",
            mask_latent.shape()
        )));
    }
    let s = SPATIAL_STRIDE;
    let t = frames_for(tl);
    let mut out = Array4::zeros((1, t, hl * s, wl * s));
    for f in 0..t {
        let padded = f + TEMPORAL_STRIDE - 1;
        let (g, kk) = (padded / TEMPORAL_STRIDE, padded % TEMPORAL_STRIDE);
        for y in 0..hl * s {
            for x in 0..wl * s {
                out[[0, f, y, x]] = mask_latent[[kk, g, y / s, x / s]];
            }
        }
    }
    Ok(out)
}

/// Per-mode preservation mask for a joint sequence.
pub fn joint_mask(mode: MaskMode, soft_motion_mask: &Video) -> Result<Video> {
    match mode {
        MaskMode::Avatar => avatar_mask(soft_motion_mask),
        MaskMode::BaseI2v => {
            let (_, t, h, w) = soft_motion_mask.dim();
            base_i2v_mask(t + 1, h, w)
        }
    }
}
