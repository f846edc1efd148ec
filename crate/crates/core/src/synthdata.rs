//! Procedural scenes with analytically exact pipeline products.
//!
//! A scene is a 2D articulated figure moving over a toroidally translating
//! background. From one [`SceneSpec`] we render the ground-truth clip, the
//! character-free background, a degraded "avatar" rendering with its opacity,
//! a texture-free structural rendering (the mesh condition), and the binary
//! body mask. Every render is a pure function of the scene (plus the
//! degradation for the avatar), so the compositing oracles are exact.
//!
//! Coordinates are continuous pixels with pixel `(x, y)` centred at
//! `(x + 0.5, y + 0.5)`; `y` grows downward.

use ndarray::{s, Array2, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::compositor::gaussian_kernel_1d;
use crate::error::{Error, Result};
use crate::Video;

/// Half-extent of the figure in body units, including a fully swung appendage.
const FIGURE_EXTENT: f32 = 1.45;
/// Slack for the centroid correction that recentres the silhouette.
const CENTROID_SLACK: f32 = 0.35;
const PENDULUM_SUBSTEPS: usize = 8;
const MAX_APPENDAGE_ANGLE: f32 = 1.2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    /// Probability that a scene gets a moving background.
    #[serde(default = "default_dynamic_fraction")]
    pub dynamic_background_fraction: f64,
}

fn default_dynamic_fraction() -> f64 {
    0.5
}

impl SceneConfig {
    pub fn new(frames: usize, height: usize, width: usize) -> Self {
        SceneConfig {
            frames,
            height,
            width,
            dynamic_background_fraction: default_dynamic_fraction(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        validate_dims(self.frames, self.height, self.width)?;
        if !(0.0..=1.0).contains(&self.dynamic_background_fraction) {
            return Err(Error::config("dynamic_background_fraction must be in [0, 1]"));
        }
        Ok(())
    }
}

pub fn validate_dims(frames: usize, height: usize, width: usize) -> Result<()> {
    if frames == 0 || frames % 4 != 1 {
        return Err(Error::config(format!(
            "frame count {frames} must be 1 mod 4"
        )));
    }
    if height == 0 || width == 0 || height % 8 != 0 || width % 8 != 0 {
        return Err(Error::config(format!(
            "frame size {height}x{width} must be a nonzero multiple of 8"
        )));
    }
    if height.min(width) < 16 {
        return Err(Error::config("frames smaller than 16 px cannot hold a figure"));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CharacterShape {
    CapsuleFigure,
    TwoEllipseFigure,
}

/// The swinging "hair": a damped pendulum hinged on the side of the head.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Appendage {
    /// Length and thickness in body units.
    pub length: f32,
    pub radius: f32,
    /// Natural angular frequency, radians per frame.
    pub natural_frequency: f32,
    /// Damping rate per frame.
    pub damping: f32,
    /// Angle from the downward vertical at frame 0, and its rate.
    pub initial_angle: f32,
    pub initial_velocity: f32,
    /// Angle the appendage is held at when rendered rigid.
    pub rest_angle: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Character {
    pub shape: CharacterShape,
    pub base_color: [f32; 3],
    pub skin_color: [f32; 3],
    pub hair_color: [f32; 3],
    /// Torso stripe texture: period in body units and relative amplitude.
    pub texture_period: f32,
    pub texture_amplitude: f32,
    pub limb_amplitude: f32,
    /// Cycles per frame.
    pub limb_frequency: f32,
    pub limb_phase: f32,
    pub appendage: Appendage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    /// Silhouette centroid per frame, `[x, y]` in pixels.
    pub centers: Vec<[f32; 2]>,
    /// Pixels per body unit per frame.
    pub scales: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackgroundSpec {
    pub pattern: u8,
    pub palette: [[f32; 3]; 3],
    /// Integer wave numbers; every pattern is periodic over the frame.
    pub frequencies: [u32; 4],
    pub phases: [f32; 4],
    /// Cumulative toroidal offset `[dx, dy]` per frame.
    pub offsets: Vec<[i64; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub seed: u64,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub character: Option<Character>,
    pub trajectory: Trajectory,
    pub background: BackgroundSpec,
}

/// Low-level deficits of the avatar rendering relative to the true character.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Degradation {
    pub texture_blur_sigma: f32,
    pub appendage_frozen: bool,
    pub color_quantization_levels: u32,
    /// Per-frame random offset of the avatar, in pixels. Off unless set.
    pub misalignment_jitter_px: f32,
}

impl Degradation {
    pub fn none() -> Self {
        Degradation {
            texture_blur_sigma: 0.0,
            appendage_frozen: false,
            color_quantization_levels: 256,
            misalignment_jitter_px: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.texture_blur_sigma >= 0.0) || !self.texture_blur_sigma.is_finite() {
            return Err(Error::config("texture_blur_sigma must be finite and >= 0"));
        }
        if self.color_quantization_levels < 2 {
            return Err(Error::config("color_quantization_levels must be >= 2"));
        }
        if !(self.misalignment_jitter_px >= 0.0) || !self.misalignment_jitter_px.is_finite() {
            return Err(Error::config("misalignment_jitter_px must be finite and >= 0"));
        }
        Ok(())
    }

    /// Footprint of the blur in pixels (0 when unblurred).
    pub fn blur_radius(&self) -> usize {
        if self.texture_blur_sigma > 0.0 {
            (3.0 * self.texture_blur_sigma).ceil() as usize
        } else {
            0
        }
    }
}

impl Default for Degradation {
    fn default() -> Self {
        Degradation {
            texture_blur_sigma: 1.0,
            appendage_frozen: true,
            color_quantization_levels: 8,
            misalignment_jitter_px: 0.0,
        }
    }
}

/// Everything the conditioning pipeline consumes for one scene.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSample {
    /// `3 x 1 x H x W`, ground-truth frame `ref_index`.
    pub reference_image: Video,
    pub target_video: Video,
    pub background_video: Video,
    pub avatar_video: Video,
    /// `1 x T x H x W`.
    pub opacity_video: Video,
    pub mesh_video: Video,
    /// `1 x T x H x W`, values in `{0, 1}`.
    pub body_mask: Video,
    pub ref_index: usize,
}

impl TrainingSample {
    pub fn frames(&self) -> usize {
        self.target_video.shape()[1]
    }

    pub fn height(&self) -> usize {
        self.target_video.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.target_video.shape()[3]
    }

    /// Ground truth of the joint sequence: `[reference, target frames 1..]`.
    pub fn joint_target(&self) -> Result<Video> {
        joint(&self.reference_image, &self.target_video)
    }

    /// Body mask over the joint sequence; frame 0 is the mask of the
    /// reference frame.
    pub fn joint_body_mask(&self) -> Result<Video> {
        if self.ref_index >= self.body_mask.shape()[1] {
            return Err(Error::shape(format!("reference index {} outside the body mask", self.ref_index)));
        }
        let first = self.body_mask.slice(s![.., self.ref_index..self.ref_index + 1, .., ..]);
        joint(&first.to_owned(), &self.body_mask)
    }
}

/// `first` followed by frames `1..` of `clip`.
fn joint(first: &Video, clip: &Video) -> Result<Video> {
    if clip.shape()[1] < 2 {
        return Err(Error::shape("a clip needs at least one motion frame"));
    }
    ndarray::concatenate(ndarray::Axis(1), &[first.view(), clip.slice(s![.., 1.., .., ..])])
        .map_err(|e| Error::shape(format!("joint sequence: {e}")))
}

fn quantize8(v: f32) -> f32 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

fn rand_color(rng: &mut ChaCha8Rng, lo: f32, hi: f32) -> [f32; 3] {
    [
        rng.random_range(lo..hi),
        rng.random_range(lo..hi),
        rng.random_range(lo..hi),
    ]
}

/// Draws a random scene. Deterministic in `(seed, config)`.
pub fn make_scene(seed: u64, config: &SceneConfig) -> Result<SceneSpec> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (t_len, h, w) = (config.frames, config.height, config.width);

    let shape = if rng.random_bool(0.5) {
        CharacterShape::CapsuleFigure
    } else {
        CharacterShape::TwoEllipseFigure
    };
    let appendage = Appendage {
        length: rng.random_range(0.6..0.8),
        radius: rng.random_range(0.09..0.13),
        natural_frequency: rng.random_range(0.5..0.9),
        damping: rng.random_range(0.02..0.08),
        initial_angle: rng.random_range(-0.7..0.7),
        initial_velocity: rng.random_range(-0.15..0.15),
        rest_angle: 0.0,
    };
    let character = Character {
        shape,
        base_color: rand_color(&mut rng, 0.15, 0.85),
        skin_color: [
            rng.random_range(0.55..0.9),
            rng.random_range(0.4..0.7),
            rng.random_range(0.3..0.55),
        ],
        hair_color: rand_color(&mut rng, 0.02, 0.3),
        texture_period: rng.random_range(0.3..0.45),
        texture_amplitude: rng.random_range(0.15..0.3),
        limb_amplitude: rng.random_range(0.2..0.6),
        limb_frequency: rng.random_range(0.04..0.12),
        limb_phase: rng.random_range(0.0..std::f32::consts::TAU),
        appendage,
    };

    let base_scale = 0.17 * h.min(w) as f32;
    let scale_wobble = 0.04;
    let bob = 1.0;
    let max_scale = base_scale * (1.0 + scale_wobble);
    let margin = (FIGURE_EXTENT + CENTROID_SLACK) * max_scale + bob + 1.0;
    let safe = |extent: usize| (margin, extent as f32 - margin);
    let (x_lo, x_hi) = safe(w);
    let (y_lo, y_hi) = safe(h);
    let pick = |rng: &mut ChaCha8Rng, lo: f32, hi: f32| {
        if hi > lo {
            rng.random_range(lo..hi)
        } else {
            0.5 * (lo + hi)
        }
    };
    let start = [pick(&mut rng, x_lo, x_hi), pick(&mut rng, y_lo, y_hi)];
    let end = [pick(&mut rng, x_lo, x_hi), pick(&mut rng, y_lo, y_hi)];
    let bob_phase = rng.random_range(0.0..std::f32::consts::TAU);
    let scale_phase = rng.random_range(0.0..std::f32::consts::TAU);
    let denom = (t_len.max(2) - 1) as f32;
    let mut centers = Vec::with_capacity(t_len);
    let mut scales = Vec::with_capacity(t_len);
    for t in 0..t_len {
        let u = t as f32 / denom;
        let bob_y = bob * (0.7 * t as f32 + bob_phase).sin();
        centers.push([
            start[0] + u * (end[0] - start[0]),
            start[1] + u * (end[1] - start[1]) + bob_y,
        ]);
        scales.push(base_scale * (1.0 + scale_wobble * (0.3 * t as f32 + scale_phase).sin()));
    }

    let dynamic = rng.random_bool(config.dynamic_background_fraction);
    let velocity: [i64; 2] = if dynamic {
        loop {
            let v = [rng.random_range(-1..=1), rng.random_range(-1..=1)];
            if v != [0, 0] {
                break v;
            }
        }
    } else {
        [0, 0]
    };
    let background = BackgroundSpec {
        pattern: rng.random_range(0..4),
        palette: [
            rand_color(&mut rng, 0.05, 0.95),
            rand_color(&mut rng, 0.05, 0.95),
            rand_color(&mut rng, 0.05, 0.95),
        ],
        frequencies: [
            rng.random_range(1..4),
            rng.random_range(1..4),
            rng.random_range(2..6),
            rng.random_range(2..6),
        ],
        phases: [
            rng.random_range(0.0..1.0),
            rng.random_range(0.0..1.0),
            rng.random_range(0.0..1.0),
            rng.random_range(0.0..1.0),
        ],
        offsets: (0..t_len as i64)
            .map(|t| [velocity[0] * t, velocity[1] * t])
            .collect(),
    };

    Ok(SceneSpec {
        seed,
        frames: t_len,
        height: h,
        width: w,
        character: Some(character),
        trajectory: Trajectory { centers, scales },
        background,
    })
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        validate_dims(self.frames, self.height, self.width)?;
        if self.trajectory.centers.len() != self.frames
            || self.trajectory.scales.len() != self.frames
            || self.background.offsets.len() != self.frames
        {
            return Err(Error::config("trajectory and background offsets need one entry per frame"));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Geometry

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Part {
    Torso,
    Head,
    LeftArm,
    RightArm,
    LeftLeg,
    RightLeg,
    Appendage,
}

#[derive(Debug, Clone, Copy)]
enum Prim {
    Capsule { a: [f32; 2], b: [f32; 2], r: f32 },
    Ellipse { c: [f32; 2], rx: f32, ry: f32 },
}

fn segment_distance(p: [f32; 2], a: [f32; 2], b: [f32; 2]) -> f32 {
    let ab = [b[0] - a[0], b[1] - a[1]];
    let ap = [p[0] - a[0], p[1] - a[1]];
    let len2 = ab[0] * ab[0] + ab[1] * ab[1];
    let u = if len2 > 0.0 {
        ((ap[0] * ab[0] + ap[1] * ab[1]) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let d = [ap[0] - u * ab[0], ap[1] - u * ab[1]];
    (d[0] * d[0] + d[1] * d[1]).sqrt()
}

impl Prim {
    fn contains(&self, p: [f32; 2]) -> bool {
        match *self {
            Prim::Capsule { a, b, r } => segment_distance(p, a, b) <= r,
            Prim::Ellipse { c, rx, ry } => {
                let dx = (p[0] - c[0]) / rx;
                let dy = (p[1] - c[1]) / ry;
                dx * dx + dy * dy <= 1.0
            }
        }
    }

    fn translated(self, d: [f32; 2]) -> Prim {
        let mv = |p: [f32; 2]| [p[0] + d[0], p[1] + d[1]];
        match self {
            Prim::Capsule { a, b, r } => Prim::Capsule { a: mv(a), b: mv(b), r },
            Prim::Ellipse { c, rx, ry } => Prim::Ellipse { c: mv(c), rx, ry },
        }
    }
}

/// One frame of the figure in pixel space, in back-to-front draw order.
#[derive(Debug, Clone)]
struct Pose {
    parts: Vec<(Part, Prim)>,
    /// Skeleton strokes for the structural rendering.
    bones: Vec<([f32; 2], [f32; 2])>,
    origin: [f32; 2],
    scale: f32,
}

impl Pose {
    fn part_at(&self, p: [f32; 2], with_appendage: bool) -> Option<Part> {
        self.parts
            .iter()
            .rev()
            .filter(|(part, _)| with_appendage || *part != Part::Appendage)
            .find(|(_, prim)| prim.contains(p))
            .map(|(part, _)| *part)
    }

    fn translated(&self, d: [f32; 2]) -> Pose {
        let mv = |p: [f32; 2]| [p[0] + d[0], p[1] + d[1]];
        Pose {
            parts: self.parts.iter().map(|(k, p)| (*k, p.translated(d))).collect(),
            bones: self.bones.iter().map(|(a, b)| (mv(*a), mv(*b))).collect(),
            origin: mv(self.origin),
            scale: self.scale,
        }
    }
}

fn limb_angle(ch: &Character, t: usize, base: f32, gain: f32) -> f32 {
    let phase = std::f32::consts::TAU * ch.limb_frequency * t as f32 + ch.limb_phase;
    base + gain * ch.limb_amplitude * phase.sin()
}

const APPENDAGE_PIVOT: [f32; 2] = [0.18, -1.2];

fn build_pose(ch: &Character, t: usize, origin: [f32; 2], scale: f32, hair_angle: f32) -> Pose {
    let at = |p: [f32; 2]| [origin[0] + scale * p[0], origin[1] + scale * p[1]];
    let dir = |angle: f32, side: f32| [side * angle.sin(), angle.cos()];
    let limb = |root: [f32; 2], angle: f32, side: f32, len: f32| {
        let d = dir(angle, side);
        (root, [root[0] + len * d[0], root[1] + len * d[1]])
    };

    let (torso, head, shoulder_x, hip_x) = match ch.shape {
        CharacterShape::CapsuleFigure => (
            Prim::Capsule {
                a: at([0.0, -0.55]),
                b: at([0.0, 0.45]),
                r: 0.33 * scale,
            },
            Prim::Ellipse {
                c: at([0.0, -1.05]),
                rx: 0.27 * scale,
                ry: 0.27 * scale,
            },
            0.33,
            0.15,
        ),
        CharacterShape::TwoEllipseFigure => (
            Prim::Ellipse {
                c: at([0.0, -0.05]),
                rx: 0.42 * scale,
                ry: 0.62 * scale,
            },
            Prim::Ellipse {
                c: at([0.0, -1.0]),
                rx: 0.25 * scale,
                ry: 0.31 * scale,
            },
            0.36,
            0.17,
        ),
    };
    let head_center = match head {
        Prim::Ellipse { c, .. } => c,
        Prim::Capsule { a, .. } => a,
    };

    let arm = limb_angle(ch, t, 0.35, 1.0);
    let leg = limb_angle(ch, t, 0.12, 0.5);
    let arms = [
        (Part::LeftArm, limb([-shoulder_x, -0.45], arm, -1.0, 0.75)),
        (Part::RightArm, limb([shoulder_x, -0.45], arm, 1.0, 0.75)),
    ];
    let legs = [
        (Part::LeftLeg, limb([-hip_x, 0.45], leg, -1.0, 0.85)),
        (Part::RightLeg, limb([hip_x, 0.45], leg, 1.0, 0.85)),
    ];
    let hair = limb(APPENDAGE_PIVOT, hair_angle, 1.0, ch.appendage.length);

    let mut parts = Vec::with_capacity(7);
    let mut bones = Vec::with_capacity(5);
    for (part, (a, b)) in legs {
        parts.push((part, Prim::Capsule { a: at(a), b: at(b), r: 0.12 * scale }));
        bones.push((at(a), at(b)));
    }
    parts.push((Part::Torso, torso));
    for (part, (a, b)) in arms {
        parts.push((part, Prim::Capsule { a: at(a), b: at(b), r: 0.1 * scale }));
        bones.push((at(a), at(b)));
    }
    parts.push((Part::Head, head));
    parts.push((
        Part::Appendage,
        Prim::Capsule {
            a: at(hair.0),
            b: at(hair.1),
            r: ch.appendage.radius * scale,
        },
    ));
    bones.push((head_center, at([0.0, 0.45])));
    Pose {
        parts,
        bones,
        origin,
        scale,
    }
}

/// Area centroid of the silhouette, estimated on a 4x4 subpixel grid.
fn silhouette_centroid(pose: &Pose) -> [f32; 2] {
    let reach = (FIGURE_EXTENT + 0.1) * pose.scale;
    let step = 0.25f32;
    let n = (2.0 * reach / step).ceil() as usize;
    let (x0, y0) = (pose.origin[0] - reach, pose.origin[1] - reach);
    let (mut sx, mut sy, mut count) = (0.0f64, 0.0f64, 0usize);
    for iy in 0..n {
        let y = y0 + (iy as f32 + 0.5) * step;
        for ix in 0..n {
            let x = x0 + (ix as f32 + 0.5) * step;
            if pose.part_at([x, y], true).is_some() {
                sx += x as f64;
                sy += y as f64;
                count += 1;
            }
        }
    }
    if count == 0 {
        return pose.origin;
    }
    [(sx / count as f64) as f32, (sy / count as f64) as f32]
}

/// Pendulum angle per frame, driven by the acceleration of the hinge.
fn appendage_angles(scene: &SceneSpec, ch: &Character) -> Vec<f32> {
    let app = &ch.appendage;
    let centers = &scene.trajectory.centers;
    let scales = &scene.trajectory.scales;
    let n = scene.frames;
    let mut angles = Vec::with_capacity(n);
    let (mut theta, mut omega) = (app.initial_angle, app.initial_velocity);
    for t in 0..n {
        angles.push(theta.clamp(-MAX_APPENDAGE_ANGLE, MAX_APPENDAGE_ANGLE));
        if t + 1 == n {
            break;
        }
        let prev = centers[t.saturating_sub(1)];
        let next = centers[t + 1];
        let accel = [
            next[0] - 2.0 * centers[t][0] + prev[0],
            next[1] - 2.0 * centers[t][1] + prev[1],
        ];
        let length = app.length * scales[t];
        let dt = 1.0 / PENDULUM_SUBSTEPS as f32;
        let w2 = app.natural_frequency * app.natural_frequency;
        for _ in 0..PENDULUM_SUBSTEPS {
            let alpha = -w2 * theta.sin() - (accel[0] * theta.cos() - accel[1] * theta.sin()) / length
                - app.damping * omega;
            omega += dt * alpha;
            theta += dt * omega;
        }
    }
    angles
}

/// Posed figures for every frame. The silhouette centroid (with the true
/// appendage) lands on the trajectory point; a frozen appendage reuses the
/// same placement so the body stays pose-aligned.
fn poses(scene: &SceneSpec, frozen_appendage: bool) -> Option<Vec<Pose>> {
    let ch = scene.character.as_ref()?;
    let angles = appendage_angles(scene, ch);
    let out = (0..scene.frames)
        .map(|t| {
            let center = scene.trajectory.centers[t];
            let scale = scene.trajectory.scales[t];
            let tentative = build_pose(ch, t, center, scale, angles[t]);
            let c = silhouette_centroid(&tentative);
            let shift = [center[0] - c[0], center[1] - c[1]];
            let placed = [center[0] + shift[0], center[1] + shift[1]];
            let hair = if frozen_appendage {
                ch.appendage.rest_angle
            } else {
                angles[t]
            };
            build_pose(ch, t, placed, scale, hair)
        })
        .collect();
    Some(out)
}

fn pixel_center(x: usize, y: usize) -> [f32; 2] {
    [x as f32 + 0.5, y as f32 + 0.5]
}

// ---------------------------------------------------------------------------
// Background

fn background_tile(scene: &SceneSpec) -> Array4<f32> {
    use std::f32::consts::TAU;
    let bg = &scene.background;
    let (h, w) = (scene.height, scene.width);
    let f = bg.frequencies.map(|k| k as f32);
    let ph = bg.phases;
    let mut tile = Array4::<f32>::zeros((3, 1, h, w));
    for y in 0..h {
        let v = y as f32 / h as f32;
        for x in 0..w {
            let u = x as f32 / w as f32;
            // Two blend weights in [0, 1] over the three palette colours.
            let (a, b) = match bg.pattern {
                0 => (
                    0.5 + 0.5 * (TAU * (f[0] * u + ph[0])).sin(),
                    0.5 + 0.5 * (TAU * (f[1] * v + ph[1])).sin(),
                ),
                1 => {
                    let cx = (f[2] * 2.0 * u + ph[2]).floor() as i64;
                    let cy = (f[3] * 2.0 * v + ph[3]).floor() as i64;
                    let checker = ((cx + cy).rem_euclid(2)) as f32;
                    (checker, 0.5 + 0.5 * (TAU * (f[0] * u + f[1] * v + ph[0])).sin())
                }
                2 => (
                    0.5 + 0.5 * (TAU * (f[2] * u + f[3] * v + ph[2])).sin(),
                    0.5 + 0.5 * (TAU * (f[0] * u - f[1] * v + ph[1])).sin(),
                ),
                _ => {
                    let blob = |cx: f32, cy: f32, k: f32| {
                        let du = (u - cx).rem_euclid(1.0);
                        let dv = (v - cy).rem_euclid(1.0);
                        let du = du.min(1.0 - du);
                        let dv = dv.min(1.0 - dv);
                        (-(du * du + dv * dv) * 40.0 * k).exp()
                    };
                    (
                        blob(ph[0], ph[1], f[0]).max(blob(ph[2], ph[3], f[1])),
                        0.5 + 0.5 * (TAU * (f[2] * u + ph[2])).sin() * (TAU * (f[3] * v)).cos(),
                    )
                }
            };
            for c in 0..3 {
                let p = &bg.palette;
                let base = p[0][c] * (1.0 - a) + p[1][c] * a;
                let val = base * (1.0 - 0.35 * b) + p[2][c] * 0.35 * b;
                tile[[c, 0, y, x]] = quantize8(val);
            }
        }
    }
    tile
}

/// Character-free background clip with toroidal translation.
pub fn render_background(scene: &SceneSpec) -> Video {
    let tile = background_tile(scene);
    let (h, w) = (scene.height, scene.width);
    let mut out = Array4::<f32>::zeros((3, scene.frames, h, w));
    for (t, off) in scene.background.offsets.iter().enumerate() {
        for y in 0..h {
            let sy = (y as i64 - off[1]).rem_euclid(h as i64) as usize;
            for x in 0..w {
                let sx = (x as i64 - off[0]).rem_euclid(w as i64) as usize;
                for c in 0..3 {
                    out[[c, t, y, x]] = tile[[c, 0, sy, sx]];
                }
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Character

fn part_color(ch: &Character, pose: &Pose, part: Part, p: [f32; 2]) -> [f32; 3] {
    match part {
        Part::Torso => {
            let v = (p[1] - pose.origin[1]) / (ch.texture_period * pose.scale);
            let m = 1.0 + ch.texture_amplitude * (std::f32::consts::TAU * v).sin();
            ch.base_color.map(|c| quantize8(c * m))
        }
        Part::LeftArm | Part::RightArm | Part::LeftLeg | Part::RightLeg => {
            ch.base_color.map(|c| quantize8(0.7 * c))
        }
        Part::Head => ch.skin_color.map(quantize8),
        Part::Appendage => ch.hair_color.map(quantize8),
    }
}

/// Straight (not premultiplied) character colour and its binary opacity.
fn render_layer(scene: &SceneSpec, poses: Option<&[Pose]>) -> (Video, Video) {
    let (t_len, h, w) = (scene.frames, scene.height, scene.width);
    let mut color = Array4::<f32>::zeros((3, t_len, h, w));
    let mut alpha = Array4::<f32>::zeros((1, t_len, h, w));
    let (Some(ch), Some(poses)) = (scene.character.as_ref(), poses) else {
        return (color, alpha);
    };
    for (t, pose) in poses.iter().enumerate() {
        for y in 0..h {
            for x in 0..w {
                let p = pixel_center(x, y);
                if let Some(part) = pose.part_at(p, true) {
                    let rgb = part_color(ch, pose, part, p);
                    for c in 0..3 {
                        color[[c, t, y, x]] = rgb[c];
                    }
                    alpha[[0, t, y, x]] = 1.0;
                }
            }
        }
    }
    (color, alpha)
}

/// Ground-truth character layer: straight colour and opacity.
pub fn render_character_layer(scene: &SceneSpec) -> (Video, Video) {
    let poses = poses(scene, false);
    render_layer(scene, poses.as_deref())
}

/// `opacity * layer + (1 - opacity) * background`. This is the generator's own
/// compositing rule, kept separate from the compositor so it can serve as
/// that module's oracle.
fn blend_over(layer: &Video, alpha: &Video, background: &Video) -> Video {
    let mut out = background.clone();
    ndarray::Zip::indexed(&mut out).for_each(|(c, t, y, x), o| {
        let a = alpha[[0, t, y, x]];
        *o = a * layer[[c, t, y, x]] + (1.0 - a) * *o;
    });
    out
}

pub fn render_ground_truth(scene: &SceneSpec) -> Video {
    let (layer, alpha) = render_character_layer(scene);
    blend_over(&layer, &alpha, &render_background(scene))
}

pub fn body_mask(scene: &SceneSpec) -> Video {
    render_character_layer(scene).1
}

/// Texture-free structural rendering: flat per-part shading of the body
/// (no appendage) plus one-pixel skeleton strokes.
pub fn render_mesh_condition(scene: &SceneSpec) -> Video {
    let (t_len, h, w) = (scene.frames, scene.height, scene.width);
    let mut out = Array4::<f32>::zeros((3, t_len, h, w));
    let Some(poses) = poses(scene, false) else {
        return out;
    };
    for (t, pose) in poses.iter().enumerate() {
        for y in 0..h {
            for x in 0..w {
                let p = pixel_center(x, y);
                let on_bone = pose
                    .bones
                    .iter()
                    .any(|(a, b)| segment_distance(p, *a, *b) <= 0.5);
                let rgb = if on_bone {
                    Some([1.0, 1.0, 1.0])
                } else {
                    pose.part_at(p, false).map(|part| match part {
                        Part::Torso => [0.45, 0.45, 0.75],
                        Part::Head => [0.6, 0.6, 0.85],
                        Part::LeftArm | Part::LeftLeg => [0.35, 0.65, 0.45],
                        Part::RightArm | Part::RightLeg => [0.65, 0.4, 0.4],
                        Part::Appendage => unreachable!("appendage excluded"),
                    })
                };
                if let Some(rgb) = rgb {
                    for c in 0..3 {
                        out[[c, t, y, x]] = rgb[c];
                    }
                }
            }
        }
    }
    out
}

/// Zero-padded separable blur of each frame of a `C x T x H x W` clip.
fn blur_zero_padded(video: &Video, sigma: f32) -> Video {
    let radius = (3.0 * sigma).ceil() as usize;
    let kernel: Vec<f32> = gaussian_kernel_1d(sigma as f64, radius.max(1))
        .expect("sigma > 0")
        .into_iter()
        .map(|k| k as f32)
        .collect();
    let r = (kernel.len() / 2) as isize;
    let (cn, tn, h, w) = video.dim();
    let mut out = Array4::<f32>::zeros((cn, tn, h, w));
    let mut tmp = Array2::<f32>::zeros((h, w));
    for c in 0..cn {
        for t in 0..tn {
            let frame = video.slice(s![c, t, .., ..]);
            for y in 0..h {
                for x in 0..w {
                    let mut acc = 0.0;
                    for (k, kv) in kernel.iter().enumerate() {
                        let xx = x as isize + k as isize - r;
                        if xx >= 0 && (xx as usize) < w {
                            acc += kv * frame[[y, xx as usize]];
                        }
                    }
                    tmp[[y, x]] = acc;
                }
            }
            for y in 0..h {
                for x in 0..w {
                    let mut acc = 0.0;
                    for (k, kv) in kernel.iter().enumerate() {
                        let yy = y as isize + k as isize - r;
                        if yy >= 0 && (yy as usize) < h {
                            acc += kv * tmp[[yy as usize, x]];
                        }
                    }
                    out[[c, t, y, x]] = acc;
                }
            }
        }
    }
    out
}

/// Chebyshev dilation of a `1 x T x H x W` binary mask.
pub fn dilate_mask(mask: &Video, radius: usize) -> Video {
    if radius == 0 {
        return mask.clone();
    }
    let (_, tn, h, w) = mask.dim();
    let mut out = Array4::<f32>::zeros(mask.raw_dim());
    let r = radius as isize;
    for t in 0..tn {
        for y in 0..h {
            for x in 0..w {
                if mask[[0, t, y, x]] <= 0.0 {
                    continue;
                }
                for yy in (y as isize - r).max(0)..=(y as isize + r).min(h as isize - 1) {
                    for xx in (x as isize - r).max(0)..=(x as isize + r).min(w as isize - 1) {
                        out[[0, t, yy as usize, xx as usize]] = 1.0;
                    }
                }
            }
        }
    }
    out
}

fn jitter_offset(seed: u64, t: usize, amount: f32) -> [f32; 2] {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6a09_e667_f3bc_c908 ^ (t as u64).wrapping_mul(0x9e37_79b9));
    [
        rng.random_range(-amount..=amount),
        rng.random_range(-amount..=amount),
    ]
}

/// Degraded, pose-aligned rendering of the character alone on black.
///
/// The avatar layer is blurred (premultiplied), colour-quantized, optionally
/// rendered with a rigid appendage, and confined to the body mask dilated by
/// the blur footprint.
pub fn render_avatar(scene: &SceneSpec, degradation: &Degradation) -> Result<(Video, Video)> {
    degradation.validate()?;
    let Some(mut poses) = poses(scene, degradation.appendage_frozen) else {
        let (c, a) = render_layer(scene, None);
        return Ok((c, a));
    };
    if degradation.misalignment_jitter_px > 0.0 {
        for (t, pose) in poses.iter_mut().enumerate() {
            *pose = pose.translated(jitter_offset(scene.seed, t, degradation.misalignment_jitter_px));
        }
    }
    let (color, alpha) = render_layer(scene, Some(&poses));

    let (mut color, mut alpha) = if degradation.texture_blur_sigma > 0.0 {
        let mut premult = color.clone();
        ndarray::Zip::indexed(&mut premult).for_each(|(_, t, y, x), v| *v *= alpha[[0, t, y, x]]);
        let p = blur_zero_padded(&premult, degradation.texture_blur_sigma);
        let a = blur_zero_padded(&alpha, degradation.texture_blur_sigma);
        let mut straight = Array4::<f32>::zeros(p.raw_dim());
        ndarray::Zip::indexed(&mut straight).for_each(|(c, t, y, x), v| {
            let av = a[[0, t, y, x]];
            if av > 1e-6 {
                *v = (p[[c, t, y, x]] / av).clamp(0.0, 1.0);
            }
        });
        (straight, a.mapv(|v| v.clamp(0.0, 1.0)))
    } else {
        (color, alpha)
    };

    let levels = (degradation.color_quantization_levels - 1) as f32;
    color.mapv_inplace(|v| (v * levels).round() / levels);

    let support = dilate_mask(&body_mask(scene), degradation.blur_radius());
    ndarray::Zip::indexed(&mut alpha).for_each(|(_, t, y, x), a| {
        if support[[0, t, y, x]] <= 0.0 {
            *a = 0.0;
        }
    });
    ndarray::Zip::indexed(&mut color).for_each(|(_, t, y, x), v| {
        if alpha[[0, t, y, x]] <= 0.0 {
            *v = 0.0;
        }
    });
    Ok((color, alpha))
}

/// Uniform reference frame index in `0..frames`.
pub fn draw_reference_index<R: Rng + ?Sized>(rng: &mut R, frames: usize) -> usize {
    rng.random_range(0..frames)
}

/// Renders every product of a scene and picks a uniformly random reference frame.
pub fn build_sample<R: Rng + ?Sized>(
    scene: &SceneSpec,
    degradation: &Degradation,
    rng: &mut R,
) -> Result<TrainingSample> {
    scene.validate()?;
    let ref_index = draw_reference_index(rng, scene.frames);
    let target_video = render_ground_truth(scene);
    let (avatar_video, opacity_video) = render_avatar(scene, degradation)?;
    let reference_image = target_video.slice(s![.., ref_index..ref_index + 1, .., ..]).to_owned();
    Ok(TrainingSample {
        reference_image,
        background_video: render_background(scene),
        avatar_video,
        opacity_video,
        mesh_video: render_mesh_condition(scene),
        body_mask: body_mask(scene),
        target_video,
        ref_index,
    })
}

/// Index of the first target frame that is bit-identical to the reference.
pub fn find_reference_index(target: &Video, reference: &Video) -> Option<usize> {
    let frames = target.shape()[1];
    (0..frames).find(|&t| {
        target
            .slice(s![.., t, .., ..])
            .iter()
            .zip(reference.slice(s![.., 0, .., ..]).iter())
            .all(|(a, b)| a.to_bits() == b.to_bits())
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> SceneConfig {
        SceneConfig::new(17, 64, 64)
    }

    fn frozen_scene(seed: u64) -> SceneSpec {
        let mut scene = make_scene(seed, &cfg()).unwrap();
        let c0 = scene.trajectory.centers[0];
        let s0 = scene.trajectory.scales[0];
        scene.trajectory.centers.iter_mut().for_each(|c| *c = c0);
        scene.trajectory.scales.iter_mut().for_each(|s| *s = s0);
        scene.background.offsets.iter_mut().for_each(|o| *o = [0, 0]);
        let ch = scene.character.as_mut().unwrap();
        ch.limb_amplitude = 0.0;
        ch.appendage.initial_angle = 0.0;
        ch.appendage.initial_velocity = 0.0;
        scene
    }

    #[test]
    fn make_scene_is_deterministic() {
        assert_eq!(make_scene(7, &cfg()).unwrap(), make_scene(7, &cfg()).unwrap());
    }

    #[test]
    fn frame_count_must_be_one_mod_four() {
        assert!(make_scene(7, &SceneConfig::new(16, 64, 64)).is_err());
        assert!(make_scene(7, &SceneConfig::new(17, 60, 64)).is_err());
    }

    #[test]
    fn distinct_seeds_give_distinct_trajectories() {
        let a = make_scene(1, &cfg()).unwrap();
        let b = make_scene(2, &cfg()).unwrap();
        assert!(a
            .trajectory
            .centers
            .iter()
            .zip(&b.trajectory.centers)
            .any(|(p, q)| p != q));
    }

    #[test]
    fn static_scene_renders_identical_frames() {
        let gt = render_ground_truth(&frozen_scene(3));
        let f0 = gt.slice(s![.., 0, .., ..]);
        for t in 1..17 {
            assert_eq!(gt.slice(s![.., t, .., ..]), f0);
        }
    }

    #[test]
    fn background_translation_is_an_exact_toroidal_shift() {
        let mut scene = make_scene(5, &cfg()).unwrap();
        scene.character = None;
        scene.background.offsets = (0..17).map(|t| [t as i64, 0]).collect();
        let gt = render_ground_truth(&scene);
        for t in 0..17 {
            for y in 0..64 {
                for x in 0..64 {
                    for c in 0..3 {
                        let src = (x + 64 - t % 64) % 64;
                        assert_eq!(gt[[c, t, y, x]], gt[[c, 0, y, src]]);
                    }
                }
            }
        }
        assert_eq!(render_background(&scene), gt);
    }

    #[test]
    fn renders_stay_in_unit_range() {
        for seed in 0..100 {
            let scene = make_scene(seed, &SceneConfig::new(5, 32, 32)).unwrap();
            let gt = render_ground_truth(&scene);
            assert!(gt.iter().all(|v| (0.0..=1.0).contains(v)), "seed {seed}");
        }
    }

    #[test]
    fn background_matches_ground_truth_off_body() {
        let scene = make_scene(9, &cfg()).unwrap();
        let gt = render_ground_truth(&scene);
        let bg = render_background(&scene);
        let mask = body_mask(&scene);
        ndarray::Zip::indexed(&gt).for_each(|(c, t, y, x), v| {
            if mask[[0, t, y, x]] == 0.0 {
                assert_eq!(*v, bg[[c, t, y, x]]);
            }
        });
    }

    #[test]
    fn static_background_has_identical_frames() {
        let mut scene = make_scene(4, &cfg()).unwrap();
        scene.background.offsets.iter_mut().for_each(|o| *o = [0, 0]);
        let bg = render_background(&scene);
        for t in 1..17 {
            assert_eq!(bg.slice(s![.., t, .., ..]), bg.slice(s![.., 0, .., ..]));
        }
    }

    #[test]
    fn undegraded_avatar_reproduces_character_layer() {
        let scene = make_scene(12, &cfg()).unwrap();
        let (layer, alpha) = render_character_layer(&scene);
        let (avatar, opacity) = render_avatar(&scene, &Degradation::none()).unwrap();
        assert_eq!(opacity, alpha);
        ndarray::Zip::indexed(&avatar).for_each(|(c, t, y, x), v| {
            let a = opacity[[0, t, y, x]];
            assert_eq!(v * a, layer[[c, t, y, x]] * alpha[[0, t, y, x]]);
        });
    }

    #[test]
    fn frozen_appendage_only_changes_appendage_region() {
        let scene = make_scene(21, &cfg()).unwrap();
        let deg = Degradation {
            appendage_frozen: true,
            ..Degradation::none()
        };
        let (layer, alpha) = render_character_layer(&scene);
        let (avatar, opacity) = render_avatar(&scene, &deg).unwrap();
        let true_poses = poses(&scene, false).unwrap();
        let rigid_poses = poses(&scene, true).unwrap();
        let in_appendage = |pose: &Pose, p| {
            pose.parts
                .iter()
                .any(|(k, prim)| *k == Part::Appendage && prim.contains(p))
        };
        let mut changed = 0;
        for t in 0..17 {
            for y in 0..64 {
                for x in 0..64 {
                    let p = pixel_center(x, y);
                    let region = in_appendage(&true_poses[t], p) || in_appendage(&rigid_poses[t], p);
                    for c in 0..3 {
                        let a = avatar[[c, t, y, x]] * opacity[[0, t, y, x]];
                        let b = layer[[c, t, y, x]] * alpha[[0, t, y, x]];
                        if a != b {
                            changed += 1;
                            assert!(region, "difference outside appendage at t={t} ({x},{y})");
                        }
                    }
                }
            }
        }
        assert!(changed > 0);
    }

    #[test]
    fn avatar_opacity_confined_to_dilated_body() {
        let scene = make_scene(30, &cfg()).unwrap();
        let deg = Degradation::default();
        let (_, opacity) = render_avatar(&scene, &deg).unwrap();
        let support = dilate_mask(&body_mask(&scene), deg.blur_radius());
        ndarray::Zip::from(&opacity).and(&support).for_each(|&o, &s| {
            assert!((0.0..=1.0).contains(&o));
            if s == 0.0 {
                assert_eq!(o, 0.0);
            }
        });
    }

    #[test]
    fn mesh_is_texture_invariant() {
        let a = make_scene(8, &cfg()).unwrap();
        let mut b = a.clone();
        let ch = b.character.as_mut().unwrap();
        ch.base_color = [0.9, 0.1, 0.3];
        ch.skin_color = [0.2, 0.2, 0.2];
        ch.texture_amplitude = 0.0;
        assert_eq!(render_mesh_condition(&a), render_mesh_condition(&b));
        assert_ne!(render_ground_truth(&a), render_ground_truth(&b));
    }

    #[test]
    fn mesh_within_dilated_body_mask() {
        for seed in 0..10 {
            let scene = make_scene(seed, &cfg()).unwrap();
            let mesh = render_mesh_condition(&scene);
            let support = dilate_mask(&body_mask(&scene), 1);
            ndarray::Zip::indexed(&mesh).for_each(|(_, t, y, x), v| {
                if *v != 0.0 {
                    assert_eq!(support[[0, t, y, x]], 1.0);
                }
            });
        }
    }

    #[test]
    fn empty_character_gives_black_mesh() {
        let mut scene = make_scene(8, &cfg()).unwrap();
        scene.character = None;
        assert!(render_mesh_condition(&scene).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn body_mask_is_binary_visible_and_centred() {
        for seed in 0..10 {
            let scene = make_scene(seed, &cfg()).unwrap();
            let mask = body_mask(&scene);
            assert!(mask.iter().all(|v| *v == 0.0 || *v == 1.0));
            for t in 0..17 {
                let (mut n, mut sx, mut sy) = (0.0f64, 0.0f64, 0.0f64);
                for y in 0..64 {
                    for x in 0..64 {
                        if mask[[0, t, y, x]] == 1.0 {
                            n += 1.0;
                            sx += x as f64 + 0.5;
                            sy += y as f64 + 0.5;
                        }
                    }
                }
                assert!(n > 0.0);
                let c = scene.trajectory.centers[t];
                assert!((sx / n - c[0] as f64).abs() <= 1.0, "seed {seed} t {t}");
                assert!((sy / n - c[1] as f64).abs() <= 1.0, "seed {seed} t {t}");
            }
        }
    }

    #[test]
    fn body_mask_is_thresholded_undegraded_opacity() {
        let scene = make_scene(14, &cfg()).unwrap();
        let (_, opacity) = render_avatar(&scene, &Degradation::none()).unwrap();
        assert_eq!(opacity.mapv(|o| if o >= 0.5 { 1.0 } else { 0.0 }), body_mask(&scene));
    }

    #[test]
    fn joint_sequences_lead_with_the_reference() {
        let scene = make_scene(4, &cfg()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = build_sample(&scene, &Degradation::default(), &mut rng).unwrap();
        let target = s.joint_target().unwrap();
        let body = s.joint_body_mask().unwrap();
        assert_eq!(target.dim(), s.target_video.dim());
        assert_eq!(target.slice(s![.., 0, .., ..]), s.reference_image.slice(s![.., 0, .., ..]));
        assert_eq!(target.slice(s![.., 1.., .., ..]), s.target_video.slice(s![.., 1.., .., ..]));
        assert_eq!(body.slice(s![.., 0, .., ..]), s.body_mask.slice(s![.., s.ref_index, .., ..]));
        assert_eq!(body.slice(s![.., 1.., .., ..]), s.body_mask.slice(s![.., 1.., .., ..]));
    }

    #[test]
    fn build_sample_reference_is_ground_truth_frame() {
        let scene = make_scene(2, &cfg()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s1 = build_sample(&scene, &Degradation::default(), &mut rng).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s2 = build_sample(&scene, &Degradation::default(), &mut rng).unwrap();
        assert_eq!(s1.ref_index, s2.ref_index);
        assert_eq!(
            s1.reference_image.slice(s![.., 0, .., ..]),
            s1.target_video.slice(s![.., s1.ref_index, .., ..])
        );
    }

    #[test]
    fn reference_index_is_uniform() {
        let (frames, draws) = (17usize, 10_000usize);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut counts = vec![0usize; frames];
        for _ in 0..draws {
            counts[draw_reference_index(&mut rng, frames)] += 1;
        }
        let p = 1.0 / frames as f64;
        let mean = draws as f64 * p;
        let sd = (draws as f64 * p * (1.0 - p)).sqrt();
        for c in counts {
            assert!((c as f64 - mean).abs() <= 5.0 * sd);
        }
    }

    #[test]
    fn degradation_validation() {
        let mut d = Degradation::none();
        d.color_quantization_levels = 1;
        assert!(d.validate().is_err());
        d = Degradation::none();
        d.texture_blur_sigma = -1.0;
        assert!(d.validate().is_err());
    }
}
