//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! | bytes        | content                                        |
//! |--------------|------------------------------------------------|
//! | 0..8         | magic `LRDGCKPT`                               |
//! | 8..12        | format version, `u32` (currently 1)            |
//! | 12..20       | header length `L`, `u64`                       |
//! | 20..20+L     | UTF-8 JSON header ([`CheckpointHeader`])       |
//! | 20+L..       | `num_params` parameters as `f64`               |
//!
//! The header carries the network spec, the training-stage tag, the seed,
//! the config digest and a SHA-256 of the parameter bytes, which is verified
//! on load.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ClassifierSpec, MapperSpec};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"LRDGCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StageTag {
    Specific,
    Invariant,
    Baseline,
}

impl std::fmt::Display for StageTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            StageTag::Specific => "specific",
            StageTag::Invariant => "invariant",
            StageTag::Baseline => "baseline",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "spec", rename_all = "kebab-case")]
pub enum NetworkSpec {
    Classifier(ClassifierSpec),
    Mapper(MapperSpec),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub network: NetworkSpec,
    pub stage: StageTag,
    pub seed: u64,
    pub config_digest: String,
    pub num_params: usize,
    pub sha256: String,
    /// Free-form labels, e.g. the domain a specific classifier belongs to.
    #[serde(default)]
    pub labels: std::collections::BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub params: Vec<f64>,
}

pub fn params_to_bytes(params: &[f64]) -> Vec<u8> {
    params.iter().flat_map(|p| p.to_le_bytes()).collect()
}

/// SHA-256 of the little-endian parameter bytes, hex encoded.
pub fn param_checksum(params: &[f64]) -> String {
    let digest = Sha256::digest(params_to_bytes(params));
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

impl Checkpoint {
    pub fn new(network: NetworkSpec, stage: StageTag, seed: u64, config_digest: &str, params: Vec<f64>) -> Self {
        let header = CheckpointHeader {
            network,
            stage,
            seed,
            config_digest: config_digest.to_string(),
            num_params: params.len(),
            sha256: param_checksum(&params),
            labels: Default::default(),
        };
        Checkpoint { header, params }
    }

    pub fn with_label(mut self, key: &str, value: impl ToString) -> Self {
        self.header.labels.insert(key.to_string(), value.to_string());
        self
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.header).expect("header serializes");
        let mut out = Vec::with_capacity(20 + header.len() + 8 * self.params.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&params_to_bytes(&self.params));
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version}")));
        }
        let header_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(20..20 + header_len).ok_or_else(|| bad("truncated header"))?;
        let header: CheckpointHeader =
            serde_json::from_slice(body).map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
        let data = &bytes[20 + header_len..];
        if data.len() != 8 * header.num_params {
            return Err(Error::Checkpoint(format!(
                "expected {} parameters, found {} bytes",
                header.num_params,
                data.len()
            )));
        }
        let params: Vec<f64> = data
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        if param_checksum(&params) != header.sha256 {
            return Err(bad("parameter checksum mismatch"));
        }
        Ok(Checkpoint { header, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Loads and checks that the checkpoint carries the expected stage tag.
    pub fn load_expecting(path: &Path, stage: StageTag) -> Result<Self> {
        let ckpt = Self::load(path)?;
        if ckpt.header.stage != stage {
            return Err(Error::Checkpoint(format!(
                "{} has stage tag `{}`, expected `{stage}`",
                path.display(),
                ckpt.header.stage
            )));
        }
        Ok(ckpt)
    }

    pub fn classifier_spec(&self) -> Result<&ClassifierSpec> {
        match &self.header.network {
            NetworkSpec::Classifier(spec) => Ok(spec),
            NetworkSpec::Mapper(_) => Err(Error::Checkpoint("expected a classifier checkpoint".into())),
        }
    }

    pub fn mapper_spec(&self) -> Result<&MapperSpec> {
        match &self.header.network {
            NetworkSpec::Mapper(spec) => Ok(spec),
            NetworkSpec::Classifier(_) => Err(Error::Checkpoint("expected a mapper checkpoint".into())),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::ImageShape;

    fn sample() -> Checkpoint {
        let spec = ClassifierSpec::desk(3, ImageShape::new(3, 8, 8));
        Checkpoint::new(NetworkSpec::Classifier(spec), StageTag::Specific, 11, "abc", vec![0.5, -1.25, 3.0])
            .with_label("domain", "tint")
    }

    #[test]
    fn roundtrip_preserves_everything() {
        let ckpt = sample();
        let back = Checkpoint::from_bytes(&ckpt.to_bytes()).unwrap();
        assert_eq!(back, ckpt);
    }

    #[test]
    fn corrupted_parameters_are_rejected() {
        let mut bytes = sample().to_bytes();
        let last = bytes.len() - 1;
        bytes[last] ^= 0x40;
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn stage_tag_is_checked_on_load() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ckpt");
        sample().save(&path).unwrap();
        assert!(Checkpoint::load_expecting(&path, StageTag::Specific).is_ok());
        assert!(Checkpoint::load_expecting(&path, StageTag::Baseline).is_err());
    }
}
