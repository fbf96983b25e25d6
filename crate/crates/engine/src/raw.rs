//! Raw interchange format: a JSON manifest plus an x-fastest voxel blob.

use std::path::{Path, PathBuf};

use kipa_core::volume::{LabelVolume, Mat3, ScalarVolume, Vec3, VolumeHeader};
use serde::{Deserialize, Serialize};

use crate::error::{EngineError, Result};
use crate::fsutil::write_atomic;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RawDtype {
    #[serde(rename = "f32le")]
    F32Le,
    #[serde(rename = "u8")]
    U8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawManifest {
    pub shape: [usize; 3],
    pub spacing: Vec3,
    #[serde(default)]
    pub origin: Vec3,
    #[serde(default = "identity")]
    pub direction: Mat3,
    pub dtype: RawDtype,
}

fn identity() -> Mat3 {
    kipa_core::volume::IDENTITY
}

impl RawManifest {
    pub fn of(header: &VolumeHeader, dtype: RawDtype) -> Self {
        RawManifest {
            shape: header.shape,
            spacing: header.spacing,
            origin: header.origin,
            direction: header.direction,
            dtype,
        }
    }

    pub fn header(&self) -> Result<VolumeHeader> {
        let h = VolumeHeader {
            shape: self.shape,
            spacing: self.spacing,
            origin: self.origin,
            direction: self.direction,
            intensity_scale: 1.0,
            intensity_offset: 0.0,
        };
        h.validate()?;
        Ok(h)
    }

    pub fn blob_len(&self) -> usize {
        let n: usize = self.shape.iter().product();
        match self.dtype {
            RawDtype::F32Le => 4 * n,
            RawDtype::U8 => n,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum RawVolume {
    Scalar(ScalarVolume),
    Labels(LabelVolume),
}

pub fn encode_f32le(values: &[f32]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub fn decode_f32le(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect()
}

/// Blob path paired with a manifest path (`x.json` -> `x.raw`).
pub fn blob_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("raw")
}

pub fn decode_raw(manifest: &RawManifest, blob: &[u8]) -> Result<RawVolume> {
    if blob.len() != manifest.blob_len() {
        return Err(EngineError::Invalid(format!(
            "raw blob has {} bytes, manifest implies {}",
            blob.len(),
            manifest.blob_len()
        )));
    }
    let header = manifest.header()?;
    Ok(match manifest.dtype {
        RawDtype::F32Le => RawVolume::Scalar(ScalarVolume::scalar(header, decode_f32le(blob))?),
        RawDtype::U8 => RawVolume::Labels(LabelVolume::labels(header, blob.to_vec())?),
    })
}

pub fn read_raw(manifest_path: &Path) -> Result<RawVolume> {
    let text = std::fs::read_to_string(manifest_path).map_err(EngineError::io(manifest_path))?;
    let manifest: RawManifest =
        serde_json::from_str(&text).map_err(|e| EngineError::config(manifest_path.display().to_string(), e))?;
    let blob_file = blob_path(manifest_path);
    let blob = std::fs::read(&blob_file).map_err(EngineError::io(&blob_file))?;
    decode_raw(&manifest, &blob)
}

pub fn write_raw(manifest_path: &Path, volume: &RawVolume) -> Result<()> {
    let (manifest, blob) = match volume {
        RawVolume::Scalar(v) => (RawManifest::of(v.header(), RawDtype::F32Le), encode_f32le(v.data())),
        RawVolume::Labels(v) => (RawManifest::of(v.header(), RawDtype::U8), v.data().to_vec()),
    };
    write_atomic(&blob_path(manifest_path), &blob)?;
    crate::fsutil::write_json(manifest_path, &manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_dtype_names() {
        let h = VolumeHeader::new([2, 3, 4], [0.5, 1.0, 2.0]).unwrap();
        let json = serde_json::to_string(&RawManifest::of(&h, RawDtype::F32Le)).unwrap();
        assert!(json.contains("\"dtype\":\"f32le\""));
        let m: RawManifest = serde_json::from_str(r#"{"shape":[1,1,2],"spacing":[1,1,1],"dtype":"u8"}"#).unwrap();
        assert_eq!(m.blob_len(), 2);
        assert_eq!(m.direction, kipa_core::volume::IDENTITY);
    }

    #[test]
    fn round_trip_on_disk() {
        let dir = tempfile::tempdir().unwrap();
        let h = VolumeHeader::new([3, 2, 2], [0.7, 0.7, 1.5]).unwrap();
        let v = ScalarVolume::scalar(h.clone(), (0..12).map(|i| i as f32 * -0.25).collect()).unwrap();
        let p = dir.path().join("vol.json");
        write_raw(&p, &RawVolume::Scalar(v.clone())).unwrap();
        assert_eq!(read_raw(&p).unwrap(), RawVolume::Scalar(v));
        let l = LabelVolume::labels(h, (0..12).map(|i| (i % 5) as u8).collect()).unwrap();
        write_raw(&p, &RawVolume::Labels(l.clone())).unwrap();
        assert_eq!(read_raw(&p).unwrap(), RawVolume::Labels(l));
    }

    #[test]
    fn blob_length_checked() {
        let m = RawManifest::of(&VolumeHeader::new([2, 2, 2], [1.0; 3]).unwrap(), RawDtype::F32Le);
        assert!(decode_raw(&m, &[0u8; 31]).is_err());
    }
}
