//! Versioned checkpoint container: magic, version, a JSON header (config,
//! metadata, section index) and little-endian f32 sections in header order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::network::Network;
use super::{ModelConfig, ModelError};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"CDWQCKPT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub task: Option<String>,
    pub fold: Option<usize>,
    pub best_val_loss: f64,
    pub epoch: usize,
    pub seed: u64,
    pub class_weights: [f64; 2],
    #[serde(default)]
    pub finetuned: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SectionKind {
    Param,
    Buffer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Section {
    pub name: String,
    pub kind: SectionKind,
    pub data: Vec<f32>,
}

#[derive(Serialize, Deserialize)]
struct SectionIndex {
    name: String,
    kind: SectionKind,
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    config: ModelConfig,
    meta: CheckpointMeta,
    sections: Vec<SectionIndex>,
}

/// Serialized network weights with configuration and training metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub meta: CheckpointMeta,
    pub sections: Vec<Section>,
}

fn bad(msg: impl Into<String>) -> ModelError {
    ModelError::Checkpoint(msg.into())
}

impl Checkpoint {
    pub fn from_network(net: &Network<f32>, meta: CheckpointMeta) -> Self {
        let mut sections = Vec::new();
        for (name, data) in net.param_names().into_iter().zip(net.params()) {
            sections.push(Section {
                name,
                kind: SectionKind::Param,
                data: data.to_vec(),
            });
        }
        for (name, data) in net.buffer_names().into_iter().zip(net.buffers()) {
            sections.push(Section {
                name,
                kind: SectionKind::Buffer,
                data: data.to_vec(),
            });
        }
        Self {
            config: net.config.clone(),
            meta,
            sections,
        }
    }

    /// Trainable weight count (buffers excluded).
    pub fn weight_count(&self) -> usize {
        self.sections
            .iter()
            .filter(|s| s.kind == SectionKind::Param)
            .map(|s| s.data.len())
            .sum()
    }

    pub fn section(&self, name: &str) -> Option<&Section> {
        self.sections.iter().find(|s| s.name == name)
    }

    /// Rebuilds the network, checking every section against the config's architecture.
    pub fn network(&self) -> Result<Network<f32>, ModelError> {
        let mut net = Network::<f32>::new(self.config.clone(), 0)?;
        let names: Vec<String> = net
            .param_names()
            .into_iter()
            .chain(net.buffer_names())
            .collect();
        if names.len() != self.sections.len() {
            return Err(ModelError::ArchitectureMismatch(format!(
                "expected {} sections, found {}",
                names.len(),
                self.sections.len()
            )));
        }
        let n_params = net.param_names().len();
        let lens: Vec<usize> = net
            .params()
            .iter()
            .chain(&net.buffers())
            .map(|s| s.len())
            .collect();
        for ((name, section), len) in names.iter().zip(&self.sections).zip(&lens) {
            if &section.name != name || section.data.len() != *len {
                return Err(ModelError::ArchitectureMismatch(format!(
                    "section {} ({} values) does not match {name} ({len} values)",
                    section.name,
                    section.data.len()
                )));
            }
        }
        for (slot, section) in net.params_mut().into_iter().zip(&self.sections[..n_params]) {
            slot.copy_from_slice(&section.data);
        }
        for (slot, section) in net
            .buffers_mut()
            .into_iter()
            .zip(&self.sections[n_params..])
        {
            slot.copy_from_slice(&section.data);
        }
        Ok(net)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            format_version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            meta: self.meta.clone(),
            sections: self
                .sections
                .iter()
                .map(|s| SectionIndex {
                    name: s.name.clone(),
                    kind: s.kind,
                    len: s.data.len(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(
            20 + json.len() + 4 * self.sections.iter().map(|s| s.data.len()).sum::<usize>(),
        );
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for s in &self.sections {
            for v in &s.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ModelError> {
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("missing magic bytes"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(bad(format!("unsupported format version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = bytes
            .get(20..20 + hlen)
            .ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(body).map_err(|e| bad(e.to_string()))?;
        let mut offset = 20 + hlen;
        let mut sections = Vec::with_capacity(header.sections.len());
        for s in header.sections {
            let end = offset + 4 * s.len;
            let raw = bytes
                .get(offset..end)
                .ok_or_else(|| bad(format!("truncated section {}", s.name)))?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            sections.push(Section {
                name: s.name,
                kind: s.kind,
                data,
            });
            offset = end;
        }
        if offset != bytes.len() {
            return Err(bad("trailing bytes after last section"));
        }
        Ok(Self {
            config: header.config,
            meta: header.meta,
            sections,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        std::fs::write(path, self.to_bytes()).map_err(|source| ModelError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let bytes = std::fs::read(path).map_err(|source| ModelError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{parameter_count, predict_inputs};

    fn meta() -> CheckpointMeta {
        CheckpointMeta {
            task: Some("noise0vs12".into()),
            fold: Some(2),
            best_val_loss: 0.123456789,
            epoch: 7,
            seed: 11,
            class_weights: [0.75, 1.25],
            finetuned: false,
        }
    }

    #[test]
    fn round_trip_is_bit_stable() {
        let net = Network::<f32>::new(ModelConfig::default(), 5).unwrap();
        let ckpt = Checkpoint::from_network(&net, meta());
        assert_eq!(ckpt.weight_count(), parameter_count(&ckpt.config));
        let back = Checkpoint::from_bytes(&ckpt.to_bytes()).unwrap();
        assert_eq!(back, ckpt);
        let restored = back.network().unwrap();
        let x: Vec<f32> = (0..32 * 32 * 32).map(|i| (i % 13) as f32 / 13.0).collect();
        let a = predict_inputs(&net, &[&x]).unwrap();
        let b = predict_inputs(&restored, &[&x]).unwrap();
        assert_eq!(a[0].probability.to_bits(), b[0].probability.to_bits());
    }

    #[test]
    fn corrupt_bytes_are_rejected() {
        let net = Network::<f32>::new(ModelConfig::default(), 5).unwrap();
        let bytes = Checkpoint::from_network(&net, meta()).to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(Checkpoint::from_bytes(b"not a checkpoint at all").is_err());
        let mut other = Checkpoint::from_network(&net, meta());
        other.sections[0].data.pop();
        assert!(matches!(
            other.network(),
            Err(ModelError::ArchitectureMismatch(_))
        ));
    }
}
