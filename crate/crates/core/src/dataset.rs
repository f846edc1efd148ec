//! Sample sources: synthetic scenes on disk (manifest plus TensorFiles) or
//! in memory, behind one trait the trainer and sampler read from.

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::synthdata::{build_sample, find_reference_index, make_scene, Degradation, SceneConfig, TrainingSample};
use crate::tensorio::{read_video, write_video, Manifest, ManifestEntry, Role};
use crate::Video;

/// Read-only indexed collection of training samples.
pub trait SampleSource: Sync {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn id(&self, index: usize) -> &str;

    fn load(&self, index: usize) -> Result<TrainingSample>;

    fn position(&self, sample_id: &str) -> Option<usize> {
        (0..self.len()).find(|&i| self.id(i) == sample_id)
    }
}

/// Samples held in memory.
#[derive(Debug, Clone, Default)]
pub struct MemorySource {
    pub samples: Vec<(String, TrainingSample)>,
}

impl SampleSource for MemorySource {
    fn len(&self) -> usize {
        self.samples.len()
    }

    fn id(&self, index: usize) -> &str {
        &self.samples[index].0
    }

    fn load(&self, index: usize) -> Result<TrainingSample> {
        self.samples
            .get(index)
            .map(|(_, s)| s.clone())
            .ok_or_else(|| Error::MissingSample(format!("#{index}")))
    }
}

/// Dataset directory with a manifest; clips are read on demand.
#[derive(Debug, Clone)]
pub struct DiskDataset {
    pub dir: PathBuf,
    pub manifest: Manifest,
    ids: Vec<String>,
}

impl DiskDataset {
    pub fn open(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        let manifest = Manifest::load(&dir)?;
        let ids = manifest.sample_ids();
        Ok(DiskDataset { dir, manifest, ids })
    }

    pub fn read_role(&self, sample_id: &str, role: Role) -> Result<Video> {
        read_video(self.manifest.resolve(&self.dir, sample_id, role)?)
    }
}

impl SampleSource for DiskDataset {
    fn len(&self) -> usize {
        self.ids.len()
    }

    fn id(&self, index: usize) -> &str {
        &self.ids[index]
    }

    fn load(&self, index: usize) -> Result<TrainingSample> {
        let id = self
            .ids
            .get(index)
            .ok_or_else(|| Error::MissingSample(format!("#{index}")))?;
        let target_video = self.read_role(id, Role::Target)?;
        let reference_image = self.read_role(id, Role::Reference)?;
        let ref_index = find_reference_index(&target_video, &reference_image)
            .ok_or_else(|| Error::Manifest(format!("reference of {id} matches no target frame")))?;
        Ok(TrainingSample {
            background_video: self.read_role(id, Role::Background)?,
            avatar_video: self.read_role(id, Role::Avatar)?,
            opacity_video: self.read_role(id, Role::Opacity)?,
            mesh_video: self.read_role(id, Role::Mesh)?,
            body_mask: self.read_role(id, Role::Bodymask)?,
            reference_image,
            target_video,
            ref_index,
        })
    }
}

/// Scene seed of the `index`-th scene of a dataset seeded with `seed`.
pub fn scene_seed(seed: u64, index: usize) -> u64 {
    // SplitMix64 finalizer over the pair.
    let mut z = seed
        .wrapping_mul(0x9e37_79b9_7f4a_7c15)
        .wrapping_add(index as u64)
        .wrapping_add(0x632b_e59b_d9b4_e019);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn sample_id(index: usize) -> String {
    format!("scene_{index:04}")
}

/// Renders the `index`-th sample of a dataset.
pub fn generate_sample(seed: u64, index: usize, config: &SceneConfig, degradation: &Degradation) -> Result<TrainingSample> {
    let s = scene_seed(seed, index);
    let scene = make_scene(s, config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(s);
    build_sample(&scene, degradation, &mut rng)
}

/// Renders `count` samples into memory.
pub fn generate_memory(
    seed: u64,
    count: usize,
    config: &SceneConfig,
    degradation: &Degradation,
) -> Result<MemorySource> {
    let samples = (0..count)
        .map(|i| Ok((sample_id(i), generate_sample(seed, i, config, degradation)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(MemorySource { samples })
}

fn role_clip(sample: &TrainingSample, role: Role) -> &Video {
    match role {
        Role::Target => &sample.target_video,
        Role::Background => &sample.background_video,
        Role::Avatar => &sample.avatar_video,
        Role::Opacity => &sample.opacity_video,
        Role::Mesh => &sample.mesh_video,
        Role::Bodymask => &sample.body_mask,
        Role::Reference => &sample.reference_image,
    }
}

/// Writes one sample's seven clips and appends their manifest entries.
pub fn write_sample(dir: &Path, id: &str, sample: &TrainingSample, manifest: &mut Manifest) -> Result<()> {
    for role in Role::ALL {
        let clip = role_clip(sample, role);
        let rel = format!("{id}_{}.bin", role.as_str());
        write_video(dir.join(&rel), clip)?;
        let (_, frames, height, width) = clip.dim();
        manifest.entries.push(ManifestEntry {
            sample_id: id.to_string(),
            role,
            path: rel,
            frames,
            height,
            width,
        });
    }
    Ok(())
}

/// Renders `count` samples into `dir` and writes the manifest.
pub fn generate_to_dir(
    dir: impl AsRef<Path>,
    seed: u64,
    count: usize,
    config: &SceneConfig,
    degradation: &Degradation,
) -> Result<Manifest> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = Manifest::default();
    for i in 0..count {
        let sample = generate_sample(seed, i, config, degradation)?;
        write_sample(dir, &sample_id(i), &sample, &mut manifest)?;
    }
    manifest.validate()?;
    manifest.save(dir)?;
    Ok(manifest)
}
