//! Euler integration of the learned velocity field from noise (`t = 1`) to
//! data (`t = 0`), producing the joint `[reference, motion frames]` clip.

use std::path::Path;

use image::{Rgb, RgbImage};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dit::{ForwardMode, ModelInput, ModelState};
use crate::error::{Error, Result};
use crate::latentcodec::{Codec, Latent};
use crate::nn::check_finite;
use crate::trainer::{standard_normal_latent, Conditioning};
use crate::Video;

pub const DEFAULT_STEPS: usize = 30;

/// `x - dt * v`: one step toward data under the rectified-flow convention.
pub fn euler_step(x: &Latent, v: &Latent, dt: f32) -> Result<Latent> {
    if x.dim() != v.dim() {
        return Err(Error::shape(format!("velocity {:?} vs state {:?}", v.dim(), x.dim())));
    }
    Ok(x - &(v * dt))
}

/// Integrates `dx/dt = v(x, t)` backwards over `steps` uniform steps,
/// evaluating `v` at `t = 1, 1 - 1/steps, ..., 1/steps`.
pub fn integrate(
    x1: Latent,
    steps: usize,
    mut velocity: impl FnMut(&Latent, f32) -> Result<Latent>,
) -> Result<Latent> {
    if steps == 0 {
        return Err(Error::config("sampling needs at least one step"));
    }
    let mut x = x1;
    for k in 0..steps {
        let t = (steps - k) as f64 / steps as f64;
        let dt = 1.0 / steps as f64;
        let v = velocity(&x, t as f32)?;
        x = euler_step(&x, &v, dt as f32)?;
        check_finite("sampler state", &x)?;
    }
    Ok(x)
}

/// Samples the joint clip for one conditioning. Output frames are clamped
/// to `[0, 1]`; frame 0 is the reconstructed reference.
pub fn sample(
    state: &ModelState<f32>,
    codec: &Codec,
    conditioning: &Conditioning,
    steps: usize,
    seed: u64,
) -> Result<Video> {
    let c = conditioning;
    if c.cond.dim().0 != codec.channels() {
        return Err(Error::shape(format!(
            "condition latent has {} channels, codec has {}",
            c.cond.dim().0,
            codec.channels()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x1 = standard_normal_latent(&mut rng, c.cond.dim());
    let x0 = integrate(x1, steps, |x, t| {
        let input = ModelInput {
            noisy: x.view(),
            cond: c.cond.view(),
            mask: c.mask.view(),
            mesh_video: c.mesh_joint.view(),
            condition_video: c.condition_joint.view(),
            t,
        };
        state.forward(&input, ForwardMode::Full).map(|(v, _)| v)
    })?;
    let mut video = codec.decode(&x0)?;
    video.mapv_inplace(|v| v.clamp(0.0, 1.0));
    Ok(video)
}

/// 8-bit value with `v * 255` rounded half up.
pub fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

/// Writes frame `t` of a 1- or 3-channel clip as `{prefix}_{t:03}.png`.
pub fn write_png_frames(video: &Video, dir: impl AsRef<Path>, prefix: &str) -> Result<Vec<std::path::PathBuf>> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (c, t, h, w) = video.dim();
    if c != 1 && c != 3 {
        return Err(Error::shape(format!("PNG frames need 1 or 3 channels, got {c}")));
    }
    let mut paths = Vec::with_capacity(t);
    for ti in 0..t {
        let img = RgbImage::from_fn(w as u32, h as u32, |x, y| {
            let px = |ch: usize| to_u8(video[[ch.min(c - 1), ti, y as usize, x as usize]]);
            Rgb([px(0), px(1), px(2)])
        });
        let path = dir.join(format!("{prefix}_{ti:03}.png"));
        img.save(&path)
            .map_err(|e| Error::io(&path, std::io::Error::other(e.to_string())))?;
        paths.push(path);
    }
    Ok(paths)
}
