//! On-disk tensor files and the dataset manifest.
//!
//! A tensor file is a small fixed header followed by the raw row-major
//! payload, always little-endian:
//!
//! ```text
//! "ANIC" | version: u32 | dtype: u8 | ndim: u8 | dims: ndim x u64 | payload
//! ```
//!
//! dtype 0 is `f32`, dtype 1 is `u8`. Float payloads round-trip bit-exactly.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array4, ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"ANIC";
pub const VERSION: u32 = 1;
pub const MAX_DIMS: usize = 8;
pub const MANIFEST_SCHEMA_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32,
    U8,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::U8 => 1,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(DType::F32),
            1 => Ok(DType::U8),
            other => Err(Error::UnknownDtype(other)),
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::U8 => 1,
        }
    }
}

/// Typed payload of a tensor file.
#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    U8(Vec<u8>),
}

impl TensorData {
    pub fn dtype(&self) -> DType {
        match self {
            TensorData::F32(_) => DType::F32,
            TensorData::U8(_) => DType::U8,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::U8(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn element_count(dims: &[usize]) -> Result<usize> {
    if dims.is_empty() {
        return Err(Error::EmptyDims);
    }
    if dims.len() > MAX_DIMS {
        return Err(Error::TooManyDims(dims.len()));
    }
    dims.iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::DimsOverflow(dims.to_vec()))
}

pub fn header_len(ndim: usize) -> usize {
    4 + 4 + 1 + 1 + 8 * ndim
}

/// Serializes a tensor to its file representation.
pub fn encode_tensor(values: &TensorData, dims: &[usize]) -> Result<Vec<u8>> {
    let count = element_count(dims)?;
    if values.len() != count {
        return Err(Error::LengthMismatch {
            values: values.len(),
            expected: count,
        });
    }
    let payload = count
        .checked_mul(values.dtype().size())
        .ok_or_else(|| Error::DimsOverflow(dims.to_vec()))?;
    let mut out = Vec::with_capacity(header_len(dims.len()) + payload);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(values.dtype().code());
    out.push(dims.len() as u8);
    for &d in dims {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    match values {
        TensorData::F32(v) => {
            for x in v {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        TensorData::U8(v) => out.extend_from_slice(v),
    }
    Ok(out)
}

/// Parses a tensor from its file representation.
pub fn decode_tensor(bytes: &[u8]) -> Result<(TensorData, Vec<usize>)> {
    let fixed = header_len(0);
    if bytes.len() < fixed {
        if bytes.len() >= 4 && bytes[..4] != MAGIC {
            return Err(Error::BadMagic(bytes[..4].try_into().unwrap()));
        }
        return Err(Error::Truncated {
            expected: fixed,
            found: bytes.len(),
        });
    }
    let magic: [u8; 4] = bytes[..4].try_into().unwrap();
    if magic != MAGIC {
        return Err(Error::BadMagic(magic));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let dtype = DType::from_code(bytes[8])?;
    let ndim = bytes[9] as usize;
    if ndim == 0 {
        return Err(Error::EmptyDims);
    }
    if ndim > MAX_DIMS {
        return Err(Error::TooManyDims(ndim));
    }
    let header = header_len(ndim);
    if bytes.len() < header {
        return Err(Error::Truncated {
            expected: header,
            found: bytes.len(),
        });
    }
    let dims = bytes[fixed..header]
        .chunks_exact(8)
        .map(|c| {
            let d = u64::from_le_bytes(c.try_into().unwrap());
            usize::try_from(d).map_err(|_| Error::DimsOverflow(vec![usize::MAX]))
        })
        .collect::<Result<Vec<_>>>()?;
    let count = element_count(&dims)?;
    let expected = count
        .checked_mul(dtype.size())
        .and_then(|p| p.checked_add(header))
        .ok_or_else(|| Error::DimsOverflow(dims.clone()))?;
    if bytes.len() < expected {
        return Err(Error::Truncated {
            expected,
            found: bytes.len(),
        });
    }
    if bytes.len() > expected {
        return Err(Error::TrailingBytes(bytes.len() - expected));
    }
    let payload = &bytes[header..];
    let data = match dtype {
        DType::F32 => TensorData::F32(
            payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        ),
        DType::U8 => TensorData::U8(payload.to_vec()),
    };
    Ok((data, dims))
}

pub fn write_tensor(path: impl AsRef<Path>, values: &TensorData, dims: &[usize]) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_tensor(values, dims)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<(TensorData, Vec<usize>)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_tensor(&bytes)
}

pub fn write_array(path: impl AsRef<Path>, array: &ArrayD<f32>) -> Result<()> {
    let values: Vec<f32> = array.iter().copied().collect();
    write_tensor(path, &TensorData::F32(values), array.shape())
}

pub fn read_array(path: impl AsRef<Path>) -> Result<ArrayD<f32>> {
    let path = path.as_ref();
    match read_tensor(path)? {
        (TensorData::F32(v), dims) => Ok(ArrayD::from_shape_vec(IxDyn(&dims), v)
            .expect("dims validated against payload length")),
        (TensorData::U8(_), _) => Err(Error::shape(format!(
            "{} holds u8 data where f32 was expected",
            path.display()
        ))),
    }
}

/// Writes a `channels x frames x height x width` clip.
pub fn write_video(path: impl AsRef<Path>, video: &Array4<f32>) -> Result<()> {
    write_array(path, &video.clone().into_dyn())
}

pub fn read_video(path: impl AsRef<Path>) -> Result<Array4<f32>> {
    let path = path.as_ref();
    let array = read_array(path)?;
    array.into_dimensionality().map_err(|_| {
        Error::shape(format!("{} is not a 4-d clip", path.display()))
    })
}

/// Checks that a video has the expected `(channels, frames, height, width)`.
pub fn expect_shape(name: &str, video: &Array4<f32>, shape: [usize; 4]) -> Result<()> {
    if video.shape() != shape {
        return Err(Error::shape(format!(
            "{name}: expected {:?}, got {:?}",
            shape,
            video.shape()
        )));
    }
    Ok(())
}

/// Checks that all values lie in `[0, 1]`.
pub fn expect_unit_range(name: &str, video: &Array4<f32>) -> Result<()> {
    if let Some(v) = video.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::Range(format!("{name} contains {v} outside [0, 1]")));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Target,
    Background,
    Avatar,
    Opacity,
    Mesh,
    Bodymask,
    Reference,
}

impl Role {
    pub const ALL: [Role; 7] = [
        Role::Target,
        Role::Background,
        Role::Avatar,
        Role::Opacity,
        Role::Mesh,
        Role::Bodymask,
        Role::Reference,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Role::Target => "target",
            Role::Background => "background",
            Role::Avatar => "avatar",
            Role::Opacity => "opacity",
            Role::Mesh => "mesh",
            Role::Bodymask => "bodymask",
            Role::Reference => "reference",
        }
    }

    pub fn channels(self) -> usize {
        match self {
            Role::Opacity | Role::Bodymask => 1,
            _ => 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub sample_id: String,
    pub role: Role,
    pub path: String,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub entries: Vec<ManifestEntry>,
}

impl Default for Manifest {
    fn default() -> Self {
        Manifest {
            schema_version: MANIFEST_SCHEMA_VERSION,
            entries: Vec::new(),
        }
    }
}

impl Manifest {
    pub fn sample_ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = Vec::new();
        for e in &self.entries {
            if !ids.contains(&e.sample_id) {
                ids.push(e.sample_id.clone());
            }
        }
        ids
    }

    pub fn entry(&self, sample_id: &str, role: Role) -> Option<&ManifestEntry> {
        self.entries
            .iter()
            .find(|e| e.sample_id == sample_id && e.role == role)
    }

    /// Every sample carries all seven roles with consistent clip sizes.
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != MANIFEST_SCHEMA_VERSION {
            return Err(Error::Manifest(format!(
                "unsupported schema_version {}",
                self.schema_version
            )));
        }
        let mut by_sample: BTreeMap<&str, BTreeMap<Role, &ManifestEntry>> = BTreeMap::new();
        for e in &self.entries {
            let roles = by_sample.entry(e.sample_id.as_str()).or_default();
            if roles.insert(e.role, e).is_some() {
                return Err(Error::Manifest(format!(
                    "sample {} lists role {} twice",
                    e.sample_id,
                    e.role.as_str()
                )));
            }
        }
        for (id, roles) in &by_sample {
            for role in Role::ALL {
                if !roles.contains_key(&role) {
                    return Err(Error::Manifest(format!(
                        "sample {id} is missing role {}",
                        role.as_str()
                    )));
                }
            }
            let target = roles[&Role::Target];
            for (role, e) in roles {
                let frames = if *role == Role::Reference { 1 } else { target.frames };
                if e.frames != frames || e.height != target.height || e.width != target.width {
                    return Err(Error::Manifest(format!(
                        "sample {id} role {} has size {}x{}x{}, expected {}x{}x{}",
                        role.as_str(),
                        e.frames,
                        e.height,
                        e.width,
                        frames,
                        target.height,
                        target.width
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Manifest> {
        let path = dir.as_ref().join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: Manifest = serde_json::from_str(&text)?;
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let path = dir.as_ref().join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self)?;
        fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
    }

    /// Absolute location of one clip, resolved against the dataset directory.
    pub fn resolve(&self, dir: impl AsRef<Path>, sample_id: &str, role: Role) -> Result<PathBuf> {
        let entry = self
            .entry(sample_id, role)
            .ok_or_else(|| Error::MissingSample(sample_id.to_string()))?;
        Ok(dir.as_ref().join(&entry.path))
    }
}
