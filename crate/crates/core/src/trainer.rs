//! Rectified-flow training of the trainable set on synthetic samples.
//!
//! Each sample becomes a joint clip `[reference, motion frames 1..T]`. The
//! clean latent `x0` encodes the ground truth, the condition latent encodes
//! the avatar-background video behind the same reference frame, and the
//! mask latent packs the softened body mask. Noise follows
//! `x_t = (1 - t) x0 + t eps` with target velocity `eps - x0` and
//! logit-normal `t`.
//!
//! Data preparation runs on worker threads feeding a bounded queue. The
//! sample order, timesteps and noise are drawn on the optimizer thread, so a
//! run is a pure function of its configuration regardless of worker count.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{concatenate, s, Array4, ArrayD, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::compositor::{build_condition, mask_sigma_for};
use crate::dataset::SampleSource;
use crate::dit::{ForwardMode, ModelConfig, ModelInput, ModelState};
use crate::error::{Error, Result};
use crate::latentcodec::{lossless_time_slot, Codec, CodecMode, Latent, LinearCodec};
use crate::maskembed::{joint_mask, pack_mask, MaskLatent, MaskMode};
use crate::nn::{clip_grad_norm, AdamW, Module};
use crate::synthdata::TrainingSample;
use crate::tensorio::{read_array, write_array};
use crate::Video;

/// Environment variable capping the number of data workers.
pub const THREADS_ENV: &str = "ANICRAFTER_MINI_THREADS";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossMasking {
    Uniform,
    /// Latent positions are weighted by `1 + body_weight * body_fraction`.
    BodyWeighted,
}

/// Per-sample weight of the velocity error as a function of `t`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TimeWeighting {
    /// Plain velocity MSE.
    Velocity,
    /// Velocity MSE times `t^2`, i.e. the clean-latent error `|x0 - x0_hat|^2`.
    Data,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablation {
    /// Replace the avatar-background video with the character-free
    /// background in the condition latent and the avatar tower.
    pub no_avatar_condition: bool,
    /// Use the base image-to-video mask instead of the body mask.
    pub no_mask_strategy: bool,
}

impl Ablation {
    pub fn label(&self) -> &'static str {
        match (self.no_avatar_condition, self.no_mask_strategy) {
            (false, false) => "full",
            (true, false) => "no_avatar",
            (false, true) => "no_mask",
            (true, true) => "no_avatar_no_mask",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub loss_masking: LossMasking,
    pub body_weight: f64,
    pub time_weighting: TimeWeighting,
    pub ablation: Ablation,
    pub seed: u64,
    /// Sampled timesteps are clamped to `[t_min, 1]`.
    pub t_min: f64,
    pub ema_decay: f64,
    pub grad_clip: Option<f64>,
    /// Mask softening sigma; derived from the frame size when absent.
    pub mask_sigma: Option<f64>,
    /// Worker threads; the environment cap still applies.
    pub workers: Option<usize>,
    /// Adam steps used to fit a trainable codec before training.
    pub codec_fit_steps: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::default(),
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 0.01,
            steps: 2000,
            batch_size: 4,
            loss_masking: LossMasking::Uniform,
            body_weight: 4.0,
            time_weighting: TimeWeighting::Velocity,
            ablation: Ablation::default(),
            seed: 0,
            t_min: 0.02,
            ema_decay: 0.98,
            grad_clip: Some(1.0),
            mask_sigma: None,
            workers: None,
            codec_fit_steps: 300,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::config(format!("learning rate must be positive, got {}", self.lr)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::config(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if self.weight_decay < 0.0 || self.body_weight < 0.0 {
            return Err(Error::config("weight_decay and body_weight must be non-negative"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if !(self.t_min > 0.0 && self.t_min < 1.0) {
            return Err(Error::config(format!("t_min must lie in (0, 1), got {}", self.t_min)));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(Error::config(format!("ema_decay must lie in [0, 1), got {}", self.ema_decay)));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::config("grad_clip must be positive"));
            }
        }
        if let Some(s) = self.mask_sigma {
            if !(s > 0.0) {
                return Err(Error::config("mask_sigma must be positive"));
            }
        }
        Ok(())
    }

    pub fn sigma_for(&self, height: usize, width: usize) -> f64 {
        self.mask_sigma.unwrap_or_else(|| mask_sigma_for(height, width))
    }

    pub fn mask_mode(&self) -> MaskMode {
        if self.ablation.no_mask_strategy {
            MaskMode::BaseI2v
        } else {
            MaskMode::Avatar
        }
    }
}

/// Everything the model sees besides the noisy latent.
#[derive(Debug, Clone, PartialEq)]
pub struct Conditioning {
    /// Encoded `[reference, condition motion frames]`.
    pub cond: Latent,
    pub mask: MaskLatent,
    /// `[mesh of the reference frame, mesh motion frames]`.
    pub mesh_joint: Video,
    /// `[reference, condition motion frames]` in pixels.
    pub condition_joint: Video,
}

#[derive(Debug, Clone, PartialEq)]
pub struct JointLatents {
    pub x0: Latent,
    pub conditioning: Conditioning,
    /// Packed avatar mask, independent of the ablation flags; used for
    /// body-weighted losses.
    pub body_mask_latent: MaskLatent,
}

fn prepend(first: &Video, rest: ndarray::ArrayView4<'_, f32>) -> Result<Video> {
    concatenate(Axis(1), &[first.view(), rest]).map_err(|e| Error::shape(e.to_string()))
}

/// Builds the conditioning for a sample without touching its ground truth
/// motion frames.
pub fn build_conditioning(
    sample: &TrainingSample,
    sigma: f64,
    codec: &Codec,
    ablation: Ablation,
) -> Result<(Conditioning, MaskLatent)> {
    let frames = sample.frames();
    if frames < 2 {
        return Err(Error::shape("a sample needs at least one motion frame"));
    }
    if sample.ref_index >= frames {
        return Err(Error::shape(format!("reference index {} outside {frames} frames", sample.ref_index)));
    }
    let (condition, soft) = build_condition(sample, sigma)?;
    let motion = s![.., 1.., .., ..];
    let source = if ablation.no_avatar_condition {
        sample.background_video.slice(motion)
    } else {
        condition.frames.slice(motion)
    };
    let condition_joint = prepend(&sample.reference_image, source)?;
    let mesh_ref = sample
        .mesh_video
        .slice(s![.., sample.ref_index..sample.ref_index + 1, .., ..])
        .to_owned();
    let mesh_joint = prepend(&mesh_ref, sample.mesh_video.slice(motion))?;
    let soft_motion = soft.slice(motion).to_owned();
    let mode = if ablation.no_mask_strategy {
        MaskMode::BaseI2v
    } else {
        MaskMode::Avatar
    };
    let mask = pack_mask(&joint_mask(mode, &soft_motion)?)?;
    let body = pack_mask(&joint_mask(MaskMode::Avatar, &soft_motion)?)?;
    Ok((
        Conditioning {
            cond: codec.encode(&condition_joint)?,
            mask,
            mesh_joint,
            condition_joint,
        },
        body,
    ))
}

/// Clean latent plus conditioning for one sample.
pub fn build_joint_latents(sample: &TrainingSample, sigma: f64, codec: &Codec, ablation: Ablation) -> Result<JointLatents> {
    let (conditioning, body_mask_latent) = build_conditioning(sample, sigma, codec, ablation)?;
    Ok(JointLatents {
        x0: codec.encode(&sample.joint_target()?)?,
        conditioning,
        body_mask_latent,
    })
}

/// `(x_t, v)` with `x_t = (1 - t) x0 + t eps` and `v = eps - x0`.
pub fn add_noise(x0: &Latent, eps: &Latent, t: f32) -> Result<(Latent, Latent)> {
    if x0.dim() != eps.dim() {
        return Err(Error::shape(format!("noise {:?} vs latent {:?}", eps.dim(), x0.dim())));
    }
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Range(format!("time {t} outside [0, 1]")));
    }
    let xt = x0 * (1.0 - t) + eps * t;
    Ok((xt, eps - x0))
}

/// Logit-normal draw (mean 0, std 1) clamped to `[t_min, 1]`.
pub fn sample_time<R: Rng + ?Sized>(rng: &mut R, t_min: f64) -> f32 {
    let z: f64 = rng.sample(StandardNormal);
    (1.0 / (1.0 + (-z).exp())).clamp(t_min, 1.0) as f32
}

pub fn standard_normal_latent<R: Rng + ?Sized>(rng: &mut R, dim: (usize, usize, usize, usize)) -> Latent {
    Array4::from_shape_simple_fn(dim, || rng.sample::<f32, _>(StandardNormal))
}

/// Per-element loss weights over the latent.
fn loss_weights(joint: &JointLatents, config: &TrainConfig, codec_mode: CodecMode) -> Option<Latent> {
    if config.loss_masking == LossMasking::Uniform {
        return None;
    }
    let m = &joint.body_mask_latent;
    let lambda = config.body_weight as f32;
    let (c, t, h, w) = joint.x0.dim();
    Some(match codec_mode {
        CodecMode::LosslessShuffle => Array4::from_shape_fn((c, t, h, w), |(ch, g, i, j)| {
            1.0 + lambda * (1.0 - m[[lossless_time_slot(ch), g, i, j]])
        }),
        CodecMode::Trainable => {
            let mean = m.mean_axis(Axis(0)).expect("four mask channels");
            Array4::from_shape_fn((c, t, h, w), |(_, g, i, j)| 1.0 + lambda * (1.0 - mean[[g, i, j]]))
        }
    })
}

/// Noise draw for one sample of a step.
#[derive(Debug, Clone)]
pub struct NoiseDraw {
    pub t: f32,
    pub eps: Latent,
}

/// Mean weighted squared velocity error over the batch, with gradients
/// accumulated into the trainable parameters. Does not step the optimizer.
pub fn batch_loss_and_grad(
    state: &mut ModelState<f32>,
    batch: &[JointLatents],
    draws: &[NoiseDraw],
    config: &TrainConfig,
    mode: ForwardMode,
) -> Result<f64> {
    if batch.len() != draws.len() || batch.is_empty() {
        return Err(Error::shape("batch and noise draws must be nonempty and equal in length"));
    }
    let codec_mode = state.config.codec.mode;
    let mut total = 0.0f64;
    let inv_batch = 1.0 / batch.len() as f32;
    for (joint, draw) in batch.iter().zip(draws) {
        let (xt, v) = add_noise(&joint.x0, &draw.eps, draw.t)?;
        let c = &joint.conditioning;
        let input = ModelInput {
            noisy: xt.view(),
            cond: c.cond.view(),
            mask: c.mask.view(),
            mesh_video: c.mesh_joint.view(),
            condition_video: c.condition_joint.view(),
            t: draw.t,
        };
        let (pred, cache) = state.forward(&input, mode)?;
        let mut diff = pred - &v;
        let n = diff.len() as f32;
        let weights = loss_weights(joint, config, codec_mode);
        let tw = match config.time_weighting {
            TimeWeighting::Velocity => 1.0,
            TimeWeighting::Data => draw.t * draw.t,
        };
        let sq: f64 = match &weights {
            None => diff.iter().map(|d| (*d as f64).powi(2)).sum(),
            Some(w) => diff.iter().zip(w.iter()).map(|(d, w)| *w as f64 * (*d as f64).powi(2)).sum(),
        };
        total += tw as f64 * sq / n as f64;
        let scale = 2.0 * tw * inv_batch / n;
        match &weights {
            None => diff.mapv_inplace(|d| d * scale),
            Some(w) => ndarray::Zip::from(&mut diff).and(w).for_each(|d, w| *d *= scale * w),
        }
        state.backward(&cache, &diff)?;
    }
    let loss = total / batch.len() as f64;
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("training loss ({loss})")));
    }
    Ok(loss)
}

/// One optimizer step. Returns the batch loss before the update.
pub fn train_step(
    state: &mut ModelState<f32>,
    optimizer: &mut AdamW<f32>,
    batch: &[JointLatents],
    draws: &[NoiseDraw],
    config: &TrainConfig,
) -> Result<f64> {
    state.zero_grad();
    let loss = batch_loss_and_grad(state, batch, draws, config, ForwardMode::Full)?;
    if let Some(max) = config.grad_clip {
        clip_grad_norm(state, max as f32);
    }
    optimizer.step(state);
    Ok(loss)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub loss: f64,
    pub ema_loss: f64,
}

pub struct TrainOutcome {
    pub state: ModelState<f32>,
    pub codec: Codec,
    pub log: Vec<LossRecord>,
    pub frozen_checksum: u64,
}

impl TrainOutcome {
    pub fn final_ema(&self) -> Option<f64> {
        self.log.last().map(|r| r.ema_loss)
    }
}

/// Worker count from the configuration, the machine and the environment cap.
pub fn worker_count(requested: Option<usize>) -> usize {
    let available = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    let mut n = requested.unwrap_or(available.min(4));
    if let Some(cap) = std::env::var(THREADS_ENV).ok().and_then(|v| v.trim().parse::<usize>().ok()) {
        n = n.min(cap);
    }
    n.max(1)
}

/// Sample indices for the whole run: concatenated shuffled epochs.
fn sample_order(n: usize, count: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x0da7_a0de_0000_0001);
    let mut order = Vec::with_capacity(count);
    let mut epoch: Vec<usize> = (0..n).collect();
    while order.len() < count {
        epoch.shuffle(&mut rng);
        order.extend(epoch.iter().take(count - order.len()));
    }
    order
}

/// Fits a trainable codec on the target clips of up to 16 samples.
fn fit_codec(source: &dyn SampleSource, config: &TrainConfig) -> Result<Codec> {
    let codec_cfg = config.model.codec;
    let mut codec = Codec::from_config(&codec_cfg, config.model.base_seed)?;
    if let Codec::Trainable(lin) = &mut codec {
        let clips = (0..source.len().min(16))
            .map(|i| source.load(i).map(|s| s.target_video))
            .collect::<Result<Vec<_>>>()?;
        let mut fitted = LinearCodec::new(codec_cfg.c_lat, config.model.base_seed)?;
        fitted.fit(&clips, config.codec_fit_steps, 1e-2, 256, config.seed)?;
        *lin = fitted;
    }
    Ok(codec)
}

/// Trains from scratch. `on_step` sees every loss record as it is produced.
pub fn train(
    source: &dyn SampleSource,
    config: &TrainConfig,
    mut on_step: impl FnMut(&LossRecord),
) -> Result<TrainOutcome> {
    config.validate()?;
    if source.is_empty() {
        return Err(Error::config("training needs at least one sample"));
    }
    let codec = fit_codec(source, config)?;
    let mut state = ModelState::<f32>::new(config.model.clone())?;
    let frozen_checksum = state.frozen_checksum();
    let mut optimizer = AdamW::new(
        config.lr as f32,
        config.beta1 as f32,
        config.beta2 as f32,
        config.weight_decay as f32,
    );
    let total = config.steps * config.batch_size;
    let order = sample_order(source.len(), total, config.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let workers = worker_count(config.workers);
    let capacity = 2 * config.batch_size.max(workers);
    let mut log = Vec::with_capacity(config.steps);

    std::thread::scope(|scope| -> Result<()> {
        let (job_tx, job_rx) = crossbeam::channel::bounded::<(usize, usize)>(capacity);
        let (res_tx, res_rx) = crossbeam::channel::bounded::<(usize, Result<JointLatents>)>(capacity);
        let order_ref = &order;
        scope.spawn(move || {
            for (k, &idx) in order_ref.iter().enumerate() {
                if job_tx.send((k, idx)).is_err() {
                    break;
                }
            }
        });
        for _ in 0..workers {
            let (rx, tx, codec) = (job_rx.clone(), res_tx.clone(), &codec);
            scope.spawn(move || {
                for (k, idx) in rx {
                    let prepared = source.load(idx).and_then(|s| {
                        let sigma = config.sigma_for(s.height(), s.width());
                        build_joint_latents(&s, sigma, codec, config.ablation)
                    });
                    if tx.send((k, prepared)).is_err() {
                        break;
                    }
                }
            });
        }
        drop((job_rx, res_tx));

        let mut pending: BTreeMap<usize, Result<JointLatents>> = BTreeMap::new();
        let mut next = 0usize;
        let mut ema = 0.0;
        for step in 0..config.steps {
            let mut batch = Vec::with_capacity(config.batch_size);
            for _ in 0..config.batch_size {
                while !pending.contains_key(&next) {
                    let (k, r) = res_rx
                        .recv()
                        .map_err(|_| Error::config("data workers stopped unexpectedly"))?;
                    pending.insert(k, r);
                }
                batch.push(pending.remove(&next).expect("present")?);
                next += 1;
            }
            let draws: Vec<NoiseDraw> = batch
                .iter()
                .map(|j| NoiseDraw {
                    t: sample_time(&mut rng, config.t_min),
                    eps: standard_normal_latent(&mut rng, j.x0.dim()),
                })
                .collect();
            let loss = train_step(&mut state, &mut optimizer, &batch, &draws, config)?;
            ema = if step == 0 {
                loss
            } else {
                config.ema_decay * ema + (1.0 - config.ema_decay) * loss
            };
            let rec = LossRecord {
                step,
                loss,
                ema_loss: ema,
            };
            on_step(&rec);
            log.push(rec);
        }
        drop(res_rx);
        Ok(())
    })?;

    if state.frozen_checksum() != frozen_checksum {
        return Err(Error::config("frozen parameters changed during training"));
    }
    Ok(TrainOutcome {
        state,
        codec,
        log,
        frozen_checksum,
    })
}

pub fn write_loss_csv(path: impl AsRef<Path>, log: &[LossRecord]) -> Result<()> {
    let path = path.as_ref();
    let mut wtr = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
    for rec in log {
        wtr.serialize(rec).map_err(|e| Error::csv(path, e))?;
    }
    wtr.flush().map_err(|e| Error::io(path, e))
}

pub fn read_loss_csv(path: impl AsRef<Path>) -> Result<Vec<LossRecord>> {
    let path = path.as_ref();
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::csv(path, e))?;
    rdr.deserialize()
        .map(|r| r.map_err(|e| Error::csv(path, e)))
        .collect()
}

// ---------------------------------------------------------------------------
// Checkpoints

pub const CHECKPOINT_INDEX: &str = "index.json";
pub const CHECKPOINT_FORMAT: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointEntry {
    pub name: String,
    pub file: String,
    pub frozen: bool,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointIndex {
    pub format: u32,
    pub config: TrainConfig,
    pub ablation: String,
    pub steps_completed: usize,
    pub frozen_checksum: u64,
    pub entries: Vec<CheckpointEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub state: ModelState<f32>,
    pub codec: Codec,
    pub steps_completed: usize,
}

fn codec_tensors(codec: &Codec) -> Vec<(&'static str, ArrayD<f32>)> {
    match codec {
        Codec::Lossless => Vec::new(),
        Codec::Trainable(c) => vec![
            ("codec.enc_w", c.enc_w.clone().into_dyn()),
            ("codec.enc_b", c.enc_b.clone().into_dyn()),
            ("codec.dec_w", c.dec_w.clone().into_dyn()),
            ("codec.dec_b", c.dec_b.clone().into_dyn()),
        ],
    }
}

pub fn save_checkpoint(
    dir: impl AsRef<Path>,
    config: &TrainConfig,
    state: &ModelState<f32>,
    codec: &Codec,
    steps_completed: usize,
) -> Result<()> {
    let dir = dir.as_ref();
    let tensors = dir.join("tensors");
    fs::create_dir_all(&tensors).map_err(|e| Error::io(&tensors, e))?;
    let mut entries = Vec::new();
    let mut result = Ok(());
    state.visit("", &mut |name, p| {
        if result.is_err() {
            return;
        }
        let file = format!("tensors/{name}.bin");
        result = write_array(dir.join(&file), &p.value);
        entries.push(CheckpointEntry {
            name: name.to_string(),
            file,
            frozen: !p.trainable,
            shape: p.value.shape().to_vec(),
        });
    });
    result?;
    for (name, value) in codec_tensors(codec) {
        let file = format!("tensors/{name}.bin");
        write_array(dir.join(&file), &value)?;
        entries.push(CheckpointEntry {
            name: name.to_string(),
            file,
            frozen: true,
            shape: value.shape().to_vec(),
        });
    }
    let index = CheckpointIndex {
        format: CHECKPOINT_FORMAT,
        config: config.clone(),
        ablation: config.ablation.label().to_string(),
        steps_completed,
        frozen_checksum: state.frozen_checksum(),
        entries,
    };
    let path = dir.join(CHECKPOINT_INDEX);
    fs::write(&path, serde_json::to_string_pretty(&index)? + "\n").map_err(|e| Error::io(&path, e))
}

pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<Checkpoint> {
    let dir = dir.as_ref();
    let path = dir.join(CHECKPOINT_INDEX);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let index: CheckpointIndex = serde_json::from_str(&text)?;
    if index.format != CHECKPOINT_FORMAT {
        return Err(Error::config(format!("unsupported checkpoint format {}", index.format)));
    }
    let mut state = ModelState::<f32>::new(index.config.model.clone())?;
    let mut values: BTreeMap<&str, (PathBuf, &CheckpointEntry)> = BTreeMap::new();
    for e in &index.entries {
        values.insert(e.name.as_str(), (dir.join(&e.file), e));
    }
    let mut result = Ok(());
    let mut seen = 0usize;
    state.visit_mut("", &mut |name, p| {
        if result.is_err() {
            return;
        }
        let Some((file, entry)) = values.get(name) else {
            result = Err(Error::config(format!("checkpoint lacks tensor {name}")));
            return;
        };
        if entry.frozen == p.trainable || entry.shape != p.value.shape() {
            result = Err(Error::config(format!("checkpoint tensor {name} does not match the model")));
            return;
        }
        match read_array(file) {
            Ok(v) if v.shape() == p.value.shape() => {
                p.value = v;
                seen += 1;
            }
            Ok(_) => result = Err(Error::config(format!("tensor file for {name} has the wrong shape"))),
            Err(e) => result = Err(e),
        }
    });
    result?;
    let codec = match index.config.model.codec.mode {
        CodecMode::LosslessShuffle => Codec::Lossless,
        CodecMode::Trainable => {
            let mut load = |name: &str| -> Result<ArrayD<f32>> {
                let (file, _) = values
                    .get(name)
                    .ok_or_else(|| Error::config(format!("checkpoint lacks tensor {name}")))?;
                seen += 1;
                read_array(file)
            };
            let as2 = |a: ArrayD<f32>| a.into_dimensionality().map_err(|e| Error::shape(e.to_string()));
            let as1 = |a: ArrayD<f32>| a.into_dimensionality().map_err(|e| Error::shape(e.to_string()));
            Codec::Trainable(LinearCodec {
                enc_w: as2(load("codec.enc_w")?)?,
                enc_b: as1(load("codec.enc_b")?)?,
                dec_w: as2(load("codec.dec_w")?)?,
                dec_b: as1(load("codec.dec_b")?)?,
            })
        }
    };
    if seen != index.entries.len() {
        return Err(Error::config("checkpoint holds tensors the model does not know"));
    }
    if state.frozen_checksum() != index.frozen_checksum {
        return Err(Error::config("frozen tensors do not match the recorded checksum"));
    }
    Ok(Checkpoint {
        config: index.config,
        state,
        codec,
        steps_completed: index.steps_completed,
    })
}

/// Writes checkpoint, loss log and effective configuration into `dir`.
pub fn write_run(dir: impl AsRef<Path>, config: &TrainConfig, outcome: &TrainOutcome) -> Result<()> {
    let dir = dir.as_ref();
    save_checkpoint(dir, config, &outcome.state, &outcome.codec, outcome.log.len())?;
    write_loss_csv(dir.join("loss.csv"), &outcome.log)?;
    let path = dir.join("effective_config.json");
    fs::write(&path, serde_json::to_string_pretty(config)? + "\n").map_err(|e| Error::io(&path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_memory, MemorySource};
    use crate::dit::tiny_config;
    use crate::synthdata::{Degradation, SceneConfig};

    fn tiny_train_config(steps: usize) -> TrainConfig {
        let mut model = tiny_config(8);
        model.dit.head_init_std = 1e-3;
        TrainConfig {
            model,
            steps,
            batch_size: 2,
            lr: 1e-3,
            codec_fit_steps: 20,
            ..TrainConfig::default()
        }
    }

    fn data(n: usize) -> MemorySource {
        generate_memory(3, n, &SceneConfig::new(5, 16, 16), &Degradation::default()).unwrap()
    }

    #[test]
    fn joint_latents_shapes_and_noop_identity() {
        let cfg = SceneConfig::new(9, 16, 16);
        let src = generate_memory(1, 1, &cfg, &Degradation::none()).unwrap();
        let s = src.load(0).unwrap();
        let j = build_joint_latents(&s, 1.0, &Codec::Lossless, Ablation::default()).unwrap();
        assert_eq!(j.x0.dim(), (768, 3, 2, 2));
        assert_eq!(j.conditioning.mask.dim(), (4, 3, 2, 2));
        assert_eq!(j.conditioning.mesh_joint.dim(), (3, 9, 16, 16));
        assert_eq!(j.conditioning.cond, j.x0);

        let base = build_joint_latents(
            &s,
            1.0,
            &Codec::Lossless,
            Ablation {
                no_mask_strategy: true,
                ..Ablation::default()
            },
        )
        .unwrap();
        let expect = pack_mask(&crate::maskembed::base_i2v_mask(9, 16, 16).unwrap()).unwrap();
        assert_eq!(base.conditioning.mask, expect);
        assert_eq!(base.body_mask_latent, j.body_mask_latent);

        let no_avatar = build_joint_latents(
            &s,
            1.0,
            &Codec::Lossless,
            Ablation {
                no_avatar_condition: true,
                ..Ablation::default()
            },
        )
        .unwrap();
        assert_eq!(
            no_avatar.conditioning.condition_joint.slice(s![.., 1.., .., ..]),
            s.background_video.slice(s![.., 1.., .., ..])
        );
        assert_eq!(no_avatar.x0, j.x0);
    }

    #[test]
    fn noise_identities() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x0 = standard_normal_latent(&mut rng, (3, 2, 2, 2));
        let eps = standard_normal_latent(&mut rng, (3, 2, 2, 2));
        let (x, v) = add_noise(&x0, &eps, 0.0).unwrap();
        assert_eq!(x, x0);
        assert!((&v + &x0 - &eps).iter().all(|d| d.abs() <= 1e-6));
        let (x, _) = add_noise(&x0, &eps, 1.0).unwrap();
        assert_eq!(x, eps);
        assert!(add_noise(&x0, &eps, 1.5).is_err());
        for _ in 0..1000 {
            let t = sample_time(&mut rng, 0.05);
            assert!((0.05..=1.0).contains(&t));
        }
    }

    fn step_inputs(cfg: &TrainConfig, src: &MemorySource) -> (Vec<JointLatents>, Vec<NoiseDraw>, Codec) {
        let codec = fit_codec(src, cfg).unwrap();
        let batch: Vec<_> = (0..2)
            .map(|i| build_joint_latents(&src.load(i).unwrap(), 1.0, &codec, cfg.ablation).unwrap())
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let draws = batch
            .iter()
            .map(|j| NoiseDraw {
                t: sample_time(&mut rng, cfg.t_min),
                eps: standard_normal_latent(&mut rng, j.x0.dim()),
            })
            .collect();
        (batch, draws, codec)
    }

    #[test]
    fn zero_lr_step_leaves_parameters_unchanged() {
        let cfg = tiny_train_config(1);
        let src = data(2);
        let (batch, draws, _) = step_inputs(&cfg, &src);
        let mut state = ModelState::<f32>::new(cfg.model.clone()).unwrap();
        let before = state.clone();
        let mut opt = AdamW::new(0.0, 0.9, 0.999, 0.01);
        let loss = train_step(&mut state, &mut opt, &batch, &draws, &cfg).unwrap();
        assert!(loss.is_finite() && loss > 0.0);
        let mut same = true;
        state.visit("", &mut |n, p| {
            before.visit("", &mut |m, q| {
                if n == m && p.value != q.value {
                    same = false;
                }
            });
        });
        assert!(same);
    }

    #[test]
    fn step_zero_loss_equals_frozen_base_loss() {
        let cfg = tiny_train_config(1);
        let src = data(2);
        let (batch, draws, _) = step_inputs(&cfg, &src);
        let mut a = ModelState::<f32>::new(cfg.model.clone()).unwrap();
        let mut b = a.clone();
        let full = batch_loss_and_grad(&mut a, &batch, &draws, &cfg, ForwardMode::Full).unwrap();
        let base = batch_loss_and_grad(&mut b, &batch, &draws, &cfg, ForwardMode::Base).unwrap();
        assert_eq!(full, base);
    }

    #[test]
    fn mask_flag_changes_step_zero_loss() {
        let cfg = tiny_train_config(1);
        let src = data(2);
        let (batch, draws, _) = step_inputs(&cfg, &src);
        let mut no_mask = cfg.clone();
        no_mask.ablation.no_mask_strategy = true;
        let (batch_nm, _, _) = step_inputs(&no_mask, &src);
        let mut a = ModelState::<f32>::new(cfg.model.clone()).unwrap();
        let mut b = a.clone();
        let la = batch_loss_and_grad(&mut a, &batch, &draws, &cfg, ForwardMode::Full).unwrap();
        let lb = batch_loss_and_grad(&mut b, &batch_nm, &draws, &no_mask, ForwardMode::Full).unwrap();
        assert_ne!(la, lb);
    }

    #[test]
    fn training_is_deterministic_and_keeps_frozen_weights() {
        let cfg = tiny_train_config(6);
        let src = data(3);
        let run = |workers| {
            let mut c = cfg.clone();
            c.workers = Some(workers);
            train(&src, &c, |_| {}).unwrap()
        };
        let a = run(1);
        let b = run(3);
        let losses = |o: &TrainOutcome| o.log.iter().map(|r| r.loss).collect::<Vec<_>>();
        assert_eq!(losses(&a), losses(&b));
        assert_eq!(a.log.len(), 6);
        assert_eq!(a.log[0].ema_loss, a.log[0].loss);
        assert_eq!(a.state.frozen_checksum(), ModelState::<f32>::new(cfg.model.clone()).unwrap().frozen_checksum());
        assert_eq!(a.state, b.state);
    }

    #[test]
    fn checkpoint_and_logs_round_trip() {
        let mut cfg = tiny_train_config(3);
        cfg.ablation.no_avatar_condition = true;
        let src = data(2);
        let out = train(&src, &cfg, |_| {}).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_run(dir.path(), &cfg, &out).unwrap();
        let ck = load_checkpoint(dir.path()).unwrap();
        let mut trained = out.state.clone();
        trained.zero_grad();
        assert_eq!(ck.state, trained);
        assert_eq!(ck.codec, out.codec);
        assert_eq!(ck.config, cfg);
        assert_eq!(ck.steps_completed, 3);
        let log = read_loss_csv(dir.path().join("loss.csv")).unwrap();
        assert_eq!(log, out.log);
        let index = fs::read_to_string(dir.path().join(CHECKPOINT_INDEX)).unwrap();
        assert!(index.contains("\"no_avatar_condition\": true"));
        assert!(dir.path().join("effective_config.json").exists());
    }

    #[test]
    fn config_parsing_and_validation() {
        let cfg: TrainConfig = serde_json::from_str(r#"{"steps": 5, "ablation": {"no_mask_strategy": true}}"#).unwrap();
        assert_eq!(cfg.steps, 5);
        assert!(cfg.ablation.no_mask_strategy);
        assert_eq!(cfg.lr, 1e-4);
        assert!(serde_json::from_str::<TrainConfig>(r#"{"stepz": 5}"#).is_err());
        let mut bad = TrainConfig::default();
        bad.lr = 0.0;
        assert!(bad.validate().is_err());
        bad = TrainConfig::default();
        bad.t_min = 0.0;
        assert!(bad.validate().is_err());
        assert!(TrainConfig::default().validate().is_ok());
    }

    #[test]
    fn sample_order_covers_epochs() {
        let order = sample_order(5, 12, 1);
        assert_eq!(order.len(), 12);
        let mut first: Vec<_> = order[..5].to_vec();
        first.sort();
        assert_eq!(first, vec![0, 1, 2, 3, 4]);
    }
}
