//! Shared fixtures for the pipeline benchmarks in `benches/`.

use avatarbg_core::dataset::generate_sample;
use avatarbg_core::dit::ModelState;
use avatarbg_core::latentcodec::Codec;
use avatarbg_core::synthdata::{Degradation, SceneConfig, TrainingSample};
use avatarbg_core::trainer::{build_joint_latents, JointLatents, TrainConfig};
use avatarbg_core::Result;

/// One rendered scene with its latents under the default training config.
pub struct Fixture {
    pub config: TrainConfig,
    pub codec: Codec,
    pub sample: TrainingSample,
    pub joint: JointLatents,
}

impl Fixture {
    pub fn new(frames: usize, height: usize, width: usize) -> Result<Self> {
        let config = TrainConfig::default();
        let codec = Codec::from_config(&config.model.codec, config.model.base_seed)?;
        let scene = SceneConfig::new(frames, height, width);
        let sample = generate_sample(0, 0, &scene, &Degradation::default())?;
        let joint = build_joint_latents(&sample, config.sigma_for(height, width), &codec, config.ablation)?;
        Ok(Fixture {
            config,
            codec,
            sample,
            joint,
        })
    }

    pub fn model(&self) -> Result<ModelState<f32>> {
        ModelState::new(self.config.model.clone())
    }
}
