//! Alpha compositing of the avatar over the background and soft body masks.

use ndarray::{s, Array2, Array4, Zip};

use crate::error::{Error, Result};
use crate::synthdata::TrainingSample;
use crate::Video;

/// Default mask blur in pixels at 64x64; scale with resolution.
pub const DEFAULT_MASK_SIGMA: f64 = 2.0;

/// Mask blur sigma for a given frame size, proportional to the shorter side.
pub fn mask_sigma_for(height: usize, width: usize) -> f64 {
    DEFAULT_MASK_SIGMA * height.min(width) as f64 / 64.0
}

fn check_unit(name: &str, v: &Video) -> Result<()> {
    if let Some(bad) = v.iter().find(|x| !(0.0..=1.0).contains(*x)) {
        return Err(Error::Range(format!("{name} has value {bad} outside [0, 1]")));
    }
    Ok(())
}

/// `opacity * avatar + (1 - opacity) * background`, per channel.
///
/// `avatar` and `background` are `C x T x H x W`; `opacity` is `1 x T x H x W`.
pub fn alpha_blend(avatar: &Video, opacity: &Video, background: &Video) -> Result<Video> {
    if avatar.dim() != background.dim() {
        return Err(Error::shape(format!(
            "avatar {:?} vs background {:?}",
            avatar.shape(),
            background.shape()
        )));
    }
    let (_, t, h, w) = avatar.dim();
    if opacity.dim() != (1, t, h, w) {
        return Err(Error::shape(format!(
            "opacity {:?} does not match frames {:?}",
            opacity.shape(),
            (1, t, h, w)
        )));
    }
    check_unit("avatar", avatar)?;
    check_unit("opacity", opacity)?;
    check_unit("background", background)?;
    let mut out = background.clone();
    Zip::indexed(&mut out)
        .and(avatar)
        .for_each(|(_, ti, y, x), o, &a| {
            let al = opacity[[0, ti, y, x]];
            *o = al * a + (1.0 - al) * *o;
        });
    Ok(out)
}

/// Truncated Gaussian taps `k[-radius..=radius]`, normalized to sum 1.
pub fn gaussian_kernel_1d(sigma: f64, radius: usize) -> Result<Vec<f64>> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::config(format!("blur sigma must be positive, got {sigma}")));
    }
    if radius == 0 {
        return Err(Error::config("blur radius must be at least 1"));
    }
    let r = radius as isize;
    let taps: Vec<f64> = (-r..=r)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let z: f64 = taps.iter().sum();
    Ok(taps.into_iter().map(|v| v / z).collect())
}

/// Radius used by [`soften_mask`] for a given sigma.
pub fn blur_radius(sigma: f64) -> usize {
    ((3.0 * sigma).ceil() as usize).max(1)
}

/// Index into `0..n` with symmetric (edge-repeating) reflection.
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - 1 - m }) as usize
}

/// Separable per-frame Gaussian blur of a `C x T x H x W` clip with
/// reflection padding.
pub fn blur_frames(video: &Video, sigma: f64) -> Result<Video> {
    let radius = blur_radius(sigma);
    let k = gaussian_kernel_1d(sigma, radius)?;
    let r = radius as isize;
    let (cn, tn, h, w) = video.dim();
    let mut out = Array4::<f32>::zeros(video.raw_dim());
    let mut row = Array2::<f64>::zeros((h, w));
    for c in 0..cn {
        for t in 0..tn {
            let frame = video.slice(s![c, t, .., ..]);
            for y in 0..h {
                for x in 0..w {
                    let mut acc = 0.0;
                    for (j, kv) in k.iter().enumerate() {
                        acc += kv * frame[[y, reflect(x as isize + j as isize - r, w)]] as f64;
                    }
                    row[[y, x]] = acc;
                }
            }
            for y in 0..h {
                for x in 0..w {
                    let mut acc = 0.0;
                    for (j, kv) in k.iter().enumerate() {
                        acc += kv * row[[reflect(y as isize + j as isize - r, h), x]];
                    }
                    out[[c, t, y, x]] = (acc as f32).clamp(0.0, 1.0);
                }
            }
        }
    }
    Ok(out)
}

/// Gaussian-blurred binary body mask (`1 x T x H x W`), radius `ceil(3 sigma)`.
pub fn soften_mask(body_mask: &Video, sigma: f64) -> Result<Video> {
    if body_mask.shape()[0] != 1 {
        return Err(Error::shape(format!(
            "body mask must have one channel, got {:?}",
            body_mask.shape()
        )));
    }
    if body_mask.iter().any(|v| *v != 0.0 && *v != 1.0) {
        return Err(Error::Range("body mask must be binary".into()));
    }
    blur_frames(body_mask, sigma)
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Provenance {
    pub avatar_sample: String,
    pub background_sample: String,
}

/// The avatar-background condition `V_r` over all clip frames.
#[derive(Debug, Clone)]
pub struct ConditionVideo {
    pub frames: Video,
    pub provenance: Provenance,
}

impl ConditionVideo {
    /// Frames used as motion frames of the joint sequence (all but frame 0).
    pub fn motion_frames(&self) -> Video {
        self.frames.slice(s![.., 1.., .., ..]).to_owned()
    }
}

/// Blends the avatar over the background and softens the body mask.
pub fn build_condition(sample: &TrainingSample, sigma: f64) -> Result<(ConditionVideo, Video)> {
    let frames = alpha_blend(&sample.avatar_video, &sample.opacity_video, &sample.background_video)?;
    let soft = soften_mask(&sample.body_mask, sigma)?;
    Ok((
        ConditionVideo {
            frames,
            provenance: Provenance::default(),
        },
        soft,
    ))
}

/// Soft-mask level below which a pixel lies outside the blur footprint of
/// every body pixel: the squared edge tap of the kernel.
pub fn background_threshold(sigma: f64) -> Result<f64> {
    let k = gaussian_kernel_1d(sigma, blur_radius(sigma))?;
    Ok(k[0] * k[0])
}
