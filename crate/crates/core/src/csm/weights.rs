//! `.csmw` weight interchange.
//!
//! Layout: an 8-byte little-endian header length, a UTF-8 JSON header, then
//! the float32 little-endian payload with tensors in manifest order. The
//! header checksum is the SHA-256 of the payload bytes.

use std::collections::HashMap;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::seeding::rng_for;

pub const FORMAT_VERSION: u32 = 1;
pub const LAYER_COUNT: usize = 3;
pub const HEAD_COUNT: usize = 8;
pub const LAYER_NORM_EPS: f64 = 1e-5;
pub const NORM: &str = "pre-layernorm";
pub const ACTIVATION: &str = "gelu-erf";
pub const POSITIONAL: &str = "none";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsmMetadata {
    pub format_version: u32,
    pub d_model: usize,
    pub layer_count: usize,
    pub head_count: usize,
    pub ffn_dim: usize,
    pub mlp_hidden: usize,
    pub local_encoder: String,
    pub norm: String,
    pub activation: String,
    pub positional_encoding: String,
    pub layer_norm_eps: f64,
}

impl CsmMetadata {
    pub fn new(d_model: usize, ffn_dim: usize, mlp_hidden: usize, local_encoder: impl Into<String>) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            d_model,
            layer_count: LAYER_COUNT,
            head_count: HEAD_COUNT,
            ffn_dim,
            mlp_hidden,
            local_encoder: local_encoder.into(),
            norm: NORM.into(),
            activation: ACTIVATION.into(),
            positional_encoding: POSITIONAL.into(),
            layer_norm_eps: LAYER_NORM_EPS,
        }
    }

    fn validate(&self) -> Result<()> {
        let shape = |m: String| Err(Error::WeightsShape(m));
        if self.format_version != FORMAT_VERSION {
            return Err(Error::WeightsParse(format!(
                "unsupported format version {}",
                self.format_version
            )));
        }
        if (
            self.norm.as_str(),
            self.activation.as_str(),
            self.positional_encoding.as_str(),
        ) != (NORM, ACTIVATION, POSITIONAL)
        {
            return Err(Error::WeightsParse(format!(
                "unsupported architecture {}/{}/{}",
                self.norm, self.activation, self.positional_encoding
            )));
        }
        if self.layer_count != LAYER_COUNT || self.head_count != HEAD_COUNT {
            return shape(format!(
                "expected {LAYER_COUNT} layers of {HEAD_COUNT} heads, found {} of {}",
                self.layer_count, self.head_count
            ));
        }
        if self.d_model == 0 || !self.d_model.is_multiple_of(self.head_count) {
            return shape(format!(
                "model dimension {} is not a positive multiple of {}",
                self.d_model, self.head_count
            ));
        }
        if self.ffn_dim == 0 || self.mlp_hidden == 0 {
            return shape("feed-forward and output widths must be positive".into());
        }
        if !(self.layer_norm_eps > 0.0) {
            return Err(Error::WeightsParse("layer norm epsilon must be positive".into()));
        }
        Ok(())
    }
}

/// Affine map `y = W x + b` with `W` stored row-major as `out × in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Linear {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            in_dim,
            out_dim,
            weight: vec![0.0; in_dim * out_dim],
            bias: vec![0.0; out_dim],
        }
    }

    fn random(in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (in_dim as f32).sqrt();
        let mut draw = |_| rng.random_range(-bound..bound) as f64;
        Self {
            in_dim,
            out_dim,
            weight: (0..in_dim * out_dim).map(&mut draw).collect(),
            bias: (0..out_dim).map(&mut draw).collect(),
        }
    }

    pub fn apply(&self, x: &[f64], out: &mut [f64]) {
        for (o, slot) in out.iter_mut().enumerate() {
            let row = &self.weight[o * self.in_dim..(o + 1) * self.in_dim];
            *slot = self.bias[o] + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>();
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl LayerNorm {
    fn identity(d: usize) -> Self {
        Self {
            weight: vec![1.0; d],
            bias: vec![0.0; d],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub ln1: LayerNorm,
    pub q_proj: Linear,
    pub k_proj: Linear,
    pub v_proj: Linear,
    pub out_proj: Linear,
    pub ln2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

/// Global-layer and output-head parameters. Immutable after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct CsmWeights {
    pub metadata: CsmMetadata,
    pub blocks: Vec<Block>,
    pub head_fc1: Linear,
    pub head_fc2: Linear,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    metadata: CsmMetadata,
    tensors: Vec<TensorEntry>,
    checksum: String,
}

fn tensor_plan(m: &CsmMetadata) -> Vec<(String, Vec<usize>)> {
    let (d, f, h) = (m.d_model, m.ffn_dim, m.mlp_hidden);
    let mut plan = Vec::new();
    for i in 0..m.layer_count {
        let p = format!("layers.{i}");
        plan.push((format!("{p}.ln1.weight"), vec![d]));
        plan.push((format!("{p}.ln1.bias"), vec![d]));
        for proj in ["q_proj", "k_proj", "v_proj", "out_proj"] {
            plan.push((format!("{p}.attn.{proj}.weight"), vec![d, d]));
            plan.push((format!("{p}.attn.{proj}.bias"), vec![d]));
        }
        plan.push((format!("{p}.ln2.weight"), vec![d]));
        plan.push((format!("{p}.ln2.bias"), vec![d]));
        plan.push((format!("{p}.ffn.fc1.weight"), vec![f, d]));
        plan.push((format!("{p}.ffn.fc1.bias"), vec![f]));
        plan.push((format!("{p}.ffn.fc2.weight"), vec![d, f]));
        plan.push((format!("{p}.ffn.fc2.bias"), vec![d]));
    }
    plan.push(("mlp.fc1.weight".into(), vec![h, d]));
    plan.push(("mlp.fc1.bias".into(), vec![h]));
    plan.push(("mlp.fc2.weight".into(), vec![1, h]));
    plan.push(("mlp.fc2.bias".into(), vec![1]));
    plan
}

impl CsmWeights {
    /// Seeded uniform initialisation; values are float32-representable.
    pub fn random(metadata: CsmMetadata, seed: u64) -> Result<Self> {
        metadata.validate()?;
        let mut rng = rng_for(seed, 0);
        let (d, f, h) = (metadata.d_model, metadata.ffn_dim, metadata.mlp_hidden);
        let ln = |rng: &mut rand_chacha::ChaCha8Rng| LayerNorm {
            weight: (0..d).map(|_| rng.random_range(0.5f32..1.5) as f64).collect(),
            bias: (0..d).map(|_| rng.random_range(-0.1f32..0.1) as f64).collect(),
        };
        let blocks = (0..metadata.layer_count)
            .map(|_| Block {
                ln1: ln(&mut rng),
                q_proj: Linear::random(d, d, &mut rng),
                k_proj: Linear::random(d, d, &mut rng),
                v_proj: Linear::random(d, d, &mut rng),
                out_proj: Linear::random(d, d, &mut rng),
                ln2: ln(&mut rng),
                fc1: Linear::random(d, f, &mut rng),
                fc2: Linear::random(f, d, &mut rng),
            })
            .collect();
        Ok(Self {
            head_fc1: Linear::random(d, h, &mut rng),
            head_fc2: Linear::random(h, 1, &mut rng),
            metadata,
            blocks,
        })
    }

    /// All parameters zero, layer norms at identity.
    pub fn zeros(metadata: CsmMetadata) -> Result<Self> {
        metadata.validate()?;
        let (d, f, h) = (metadata.d_model, metadata.ffn_dim, metadata.mlp_hidden);
        let blocks = (0..metadata.layer_count)
            .map(|_| Block {
                ln1: LayerNorm::identity(d),
                q_proj: Linear::zeros(d, d),
                k_proj: Linear::zeros(d, d),
                v_proj: Linear::zeros(d, d),
                out_proj: Linear::zeros(d, d),
                ln2: LayerNorm::identity(d),
                fc1: Linear::zeros(d, f),
                fc2: Linear::zeros(f, d),
            })
            .collect();
        Ok(Self {
            head_fc1: Linear::zeros(d, h),
            head_fc2: Linear::zeros(h, 1),
            metadata,
            blocks,
        })
    }

    /// Copy with every block's attention and feed-forward output projection zeroed.
    pub fn with_zeroed_block_outputs(&self) -> Self {
        let mut w = self.clone();
        for b in &mut w.blocks {
            b.out_proj = Linear::zeros(b.out_proj.in_dim, b.out_proj.out_dim);
            b.fc2 = Linear::zeros(b.fc2.in_dim, b.fc2.out_dim);
        }
        w
    }

    pub fn d_model(&self) -> usize {
        self.metadata.d_model
    }

    fn tensors(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        for b in &self.blocks {
            out.extend([&b.ln1.weight[..], &b.ln1.bias[..]]);
            for p in [&b.q_proj, &b.k_proj, &b.v_proj, &b.out_proj] {
                out.extend([&p.weight[..], &p.bias[..]]);
            }
            out.extend([&b.ln2.weight[..], &b.ln2.bias[..]]);
            out.extend([&b.fc1.weight[..], &b.fc1.bias[..], &b.fc2.weight[..], &b.fc2.bias[..]]);
        }
        out.extend([
            &self.head_fc1.weight[..],
            &self.head_fc1.bias[..],
            &self.head_fc2.weight[..],
            &self.head_fc2.bias[..],
        ]);
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let plan = tensor_plan(&self.metadata);
        let mut payload = Vec::new();
        let mut entries = Vec::with_capacity(plan.len());
        for ((name, shape), data) in plan.into_iter().zip(self.tensors()) {
            entries.push(TensorEntry {
                name,
                shape,
                dtype: "float32".into(),
                offset: payload.len(),
            });
            for &v in data {
                payload.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        let header = Header {
            metadata: self.metadata.clone(),
            tensors: entries,
            checksum: format!("sha256:{}", hex::encode(Sha256::digest(&payload))),
        };
        let header = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(8 + header.len() + payload.len());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let parse = |m: &str| Error::WeightsParse(m.to_string());
        let len_bytes: [u8; 8] = bytes
            .get(..8)
            .ok_or_else(|| parse("file shorter than its length prefix"))?
            .try_into()
            .expect("8 bytes");
        let header_len =
            usize::try_from(u64::from_le_bytes(len_bytes)).map_err(|_| parse("header length overflows"))?;
        let header_end = 8usize
            .checked_add(header_len)
            .ok_or_else(|| parse("header length overflows"))?;
        let header_bytes = bytes.get(8..header_end).ok_or_else(|| parse("header truncated"))?;
        let header: Header =
            serde_json::from_slice(header_bytes).map_err(|e| Error::WeightsParse(format!("header: {e}")))?;
        let payload = &bytes[header_end..];

        let actual = format!("sha256:{}", hex::encode(Sha256::digest(payload)));
        if actual != header.checksum {
            return Err(Error::WeightsChecksum {
                expected: header.checksum,
                actual,
            });
        }
        header.metadata.validate()?;

        let mut by_name: HashMap<&str, &TensorEntry> = HashMap::new();
        for t in &header.tensors {
            if t.dtype != "float32" {
                return Err(Error::WeightsParse(format!("tensor {} has dtype {}", t.name, t.dtype)));
            }
            if by_name.insert(t.name.as_str(), t).is_some() {
                return Err(Error::WeightsParse(format!("tensor {} listed twice", t.name)));
            }
        }
        let mut read = |name: &str, shape: &[usize]| -> Result<Vec<f64>> {
            let t = by_name
                .remove(name)
                .ok_or_else(|| Error::WeightsParse(format!("missing tensor {name}")))?;
            if t.shape != shape {
                return Err(Error::WeightsShape(format!(
                    "tensor {name} has shape {:?}, expected {shape:?}",
                    t.shape
                )));
            }
            let count: usize = shape.iter().product();
            let raw = t
                .offset
                .checked_add(count * 4)
                .and_then(|end| payload.get(t.offset..end))
                .ok_or_else(|| Error::WeightsParse(format!("tensor {name} runs past the payload")))?;
            Ok(raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect())
        };

        let m = &header.metadata;
        let (d, f, h) = (m.d_model, m.ffn_dim, m.mlp_hidden);
        fn linear(
            read: &mut impl FnMut(&str, &[usize]) -> Result<Vec<f64>>,
            name: &str,
            in_dim: usize,
            out_dim: usize,
        ) -> Result<Linear> {
            Ok(Linear {
                in_dim,
                out_dim,
                weight: read(&format!("{name}.weight"), &[out_dim, in_dim])?,
                bias: read(&format!("{name}.bias"), &[out_dim])?,
            })
        }
        fn norm(read: &mut impl FnMut(&str, &[usize]) -> Result<Vec<f64>>, name: &str, d: usize) -> Result<LayerNorm> {
            Ok(LayerNorm {
                weight: read(&format!("{name}.weight"), &[d])?,
                bias: read(&format!("{name}.bias"), &[d])?,
            })
        }
        let mut blocks = Vec::with_capacity(m.layer_count);
        for i in 0..m.layer_count {
            let p = format!("layers.{i}");
            blocks.push(Block {
                ln1: norm(&mut read, &format!("{p}.ln1"), d)?,
                q_proj: linear(&mut read, &format!("{p}.attn.q_proj"), d, d)?,
                k_proj: linear(&mut read, &format!("{p}.attn.k_proj"), d, d)?,
                v_proj: linear(&mut read, &format!("{p}.attn.v_proj"), d, d)?,
                out_proj: linear(&mut read, &format!("{p}.attn.out_proj"), d, d)?,
                ln2: norm(&mut read, &format!("{p}.ln2"), d)?,
                fc1: linear(&mut read, &format!("{p}.ffn.fc1"), d, f)?,
                fc2: linear(&mut read, &format!("{p}.ffn.fc2"), f, d)?,
            });
        }
        let head_fc1 = linear(&mut read, "mlp.fc1", d, h)?;
        let head_fc2 = linear(&mut read, "mlp.fc2", h, 1)?;
        if let Some(extra) = by_name.keys().next() {
            return Err(Error::WeightsParse(format!("unexpected tensor {extra}")));
        }
        Ok(Self {
            metadata: header.metadata,
            blocks,
            head_fc1,
            head_fc2,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }
}

/// Reads, shape-checks and checksum-verifies a `.csmw` file.
pub fn load_weights(path: &Path) -> Result<CsmWeights> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    CsmWeights::from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn meta() -> CsmMetadata {
        CsmMetadata::new(16, 32, 8, "test-encoder")
    }

    #[test]
    fn round_trip_is_exact() {
        let w = CsmWeights::random(meta(), 7).unwrap();
        let back = CsmWeights::from_bytes(&w.to_bytes()).unwrap();
        assert_eq!(back, w);
        assert_eq!(back.metadata.layer_count, 3);
        assert_eq!(back.metadata.head_count, 8);
    }

    #[test]
    fn truncated_payload_fails_checksum() {
        let bytes = CsmWeights::random(meta(), 7).unwrap().to_bytes();
        let err = CsmWeights::from_bytes(&bytes[..bytes.len() - 5]).unwrap_err();
        assert!(matches!(err, Error::WeightsChecksum { .. }), "{err}");
        assert!(matches!(
            CsmWeights::from_bytes(&bytes[..4]),
            Err(Error::WeightsParse(_))
        ));
    }

    #[test]
    fn corrupted_payload_fails_checksum() {
        let mut bytes = CsmWeights::random(meta(), 7).unwrap().to_bytes();
        let last = bytes.len() - 1;
        bytes[last] ^= 0x40;
        assert!(matches!(
            CsmWeights::from_bytes(&bytes),
            Err(Error::WeightsChecksum { .. })
        ));
    }

    fn rewrite_header(bytes: &[u8], edit: impl FnOnce(&mut serde_json::Value)) -> Vec<u8> {
        let len = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
        let mut header: serde_json::Value = serde_json::from_slice(&bytes[8..8 + len]).unwrap();
        edit(&mut header);
        let header = serde_json::to_vec(&header).unwrap();
        let mut out = (header.len() as u64).to_le_bytes().to_vec();
        out.extend(header);
        out.extend(&bytes[8 + len..]);
        out
    }

    #[test]
    fn inconsistent_shapes_rejected() {
        let bytes = CsmWeights::random(meta(), 1).unwrap().to_bytes();
        let bad = rewrite_header(&bytes, |h| h["tensors"][2]["shape"] = serde_json::json!([16, 8]));
        assert!(matches!(CsmWeights::from_bytes(&bad), Err(Error::WeightsShape(_))));
        let bad = rewrite_header(&bytes, |h| h["metadata"]["d_model"] = serde_json::json!(24));
        assert!(matches!(CsmWeights::from_bytes(&bad), Err(Error::WeightsShape(_))));
        let bad = rewrite_header(&bytes, |h| h["metadata"]["head_count"] = serde_json::json!(4));
        assert!(matches!(CsmWeights::from_bytes(&bad), Err(Error::WeightsShape(_))));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csmw");
        let w = CsmWeights::random(meta(), 3).unwrap();
        w.save(&path).unwrap();
        assert_eq!(load_weights(&path).unwrap(), w);
        assert!(matches!(
            load_weights(&dir.path().join("none.csmw")),
            Err(Error::Io { .. })
        ));
    }
}
