//! Model parameters plus metadata, and the `PFGDF1` on-disk format.
//!
//! ```text
//! "PFGDF1"                      6 bytes magic
//! header_len                    u64 little-endian
//! header                        UTF-8 JSON: version, graph, meta, tensor directory
//! header_crc32                  u32 little-endian, over the header bytes
//! payload                       f32 little-endian tensors, row-major, back to back
//! ```
//!
//! Tensor `byte_offset`s are relative to the start of the payload. The
//! header also stores the payload length and its CRC32.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, FormatError, Result};
use crate::model::graph::{LayerKind, ModelGraph};
use crate::optim::TensorMap;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 6] = b"PFGDF1";
pub const FORMAT_VERSION: u32 = 1;
/// Magic, length prefix and header checksum.
pub const FRAMING_BYTES: u64 = 6 + 8 + 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    /// Reference accuracy for the recovery gate, in `[0, 1]`.
    pub baseline_accuracy: f64,
    pub seed: u64,
    pub epoch: usize,
    pub dataset_id: String,
    #[serde(default)]
    pub snapshot_epochs: Vec<usize>,
    /// Most recent measured accuracy of these exact weights, if any.
    #[serde(default)]
    pub accuracy: Option<f64>,
    #[serde(default)]
    pub normalization: Option<Normalization>,
}

impl CheckpointMeta {
    pub fn new(seed: u64) -> Self {
        Self {
            baseline_accuracy: 0.0,
            seed,
            epoch: 0,
            dataset_id: String::new(),
            snapshot_epochs: Vec::new(),
            accuracy: None,
            normalization: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub graph: ModelGraph,
    pub tensors: TensorMap,
    pub meta: CheckpointMeta,
}

pub fn weight_name(layer: usize) -> String {
    format!("l{layer}.weight")
}
pub fn bias_name(layer: usize) -> String {
    format!("l{layer}.bias")
}
pub fn gamma_name(layer: usize) -> String {
    format!("l{layer}.gamma")
}
pub fn beta_name(layer: usize) -> String {
    format!("l{layer}.beta")
}
pub fn running_mean_name(layer: usize) -> String {
    format!("l{layer}.running_mean")
}
pub fn running_var_name(layer: usize) -> String {
    format!("l{layer}.running_var")
}

/// Whether the named tensor is updated by the optimizer (running statistics
/// are not).
pub fn is_trainable(name: &str) -> bool {
    !(name.ends_with(".running_mean") || name.ends_with(".running_var"))
}

/// Every tensor a graph implies, with its shape, in layer order.
pub fn expected_tensors(graph: &ModelGraph) -> Vec<(String, Vec<usize>)> {
    let mut out = Vec::new();
    for (i, l) in graph.layers.iter().enumerate() {
        match l.kind {
            LayerKind::Conv => {
                out.push((
                    weight_name(i),
                    vec![l.out_channels, l.in_channels, l.kernel, l.kernel],
                ));
                if l.bias {
                    out.push((bias_name(i), vec![l.out_channels]));
                }
            }
            LayerKind::Batchnorm => {
                for name in [
                    gamma_name(i),
                    beta_name(i),
                    running_mean_name(i),
                    running_var_name(i),
                ] {
                    out.push((name, vec![l.out_channels]));
                }
            }
            LayerKind::Linear => {
                out.push((weight_name(i), vec![l.out_channels, l.in_channels]));
                out.push((bias_name(i), vec![l.out_channels]));
            }
            LayerKind::Relu | LayerKind::Maxpool | LayerKind::Gap => {}
        }
    }
    out
}

/// RNG keyed by `seed` and a path of stream identifiers, so that drawing
/// from one stream never disturbs another.
pub(crate) fn derive_rng(seed: u64, parts: &[u64]) -> ChaCha8Rng {
    // splitmix64 over the key path
    let mix = |mut z: u64| {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    };
    let key = parts.iter().fold(mix(seed), |acc, &p| mix(acc ^ mix(p)));
    ChaCha8Rng::seed_from_u64(key)
}

pub(crate) fn layer_rng(seed: u64, layer: usize, salt: u64) -> ChaCha8Rng {
    derive_rng(seed, &[layer as u64, salt])
}

pub(crate) const INIT_SALT: u64 = 0;
pub(crate) const REINIT_SALT: u64 = 1;

/// Std of the classifier weights. Small enough that a fresh network starts
/// near uniform class probabilities.
pub const CLASSIFIER_STD: f64 = 0.01;

/// He-normal weight with `std = sqrt(2 / fan_in)`.
pub(crate) fn he_normal(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let fan_in: usize = shape[1..].iter().product();
    normal(shape, (2.0 / fan_in as f64).sqrt(), rng)
}

fn normal(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let dist = Normal::new(0.0, std).expect("positive std");
    let n = shape.iter().product();
    let data = (0..n).map(|_| dist.sample(rng) as f32).collect();
    Tensor::from_vec(shape.to_vec(), data).expect("shape and data agree")
}

/// Fresh parameters for one layer; empty for parameter-free layers.
pub(crate) fn init_layer(
    graph: &ModelGraph,
    layer: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<(String, Tensor)> {
    let l = &graph.layers[layer];
    let c = l.out_channels;
    match l.kind {
        LayerKind::Conv => {
            let shape = [c, l.in_channels, l.kernel, l.kernel];
            let mut out = vec![(weight_name(layer), he_normal(&shape, rng))];
            if l.bias {
                out.push((bias_name(layer), Tensor::zeros(&[c])));
            }
            out
        }
        LayerKind::Linear => vec![
            (
                weight_name(layer),
                normal(&[c, l.in_channels], CLASSIFIER_STD, rng),
            ),
            (bias_name(layer), Tensor::zeros(&[c])),
        ],
        LayerKind::Batchnorm => vec![
            (gamma_name(layer), Tensor::full(&[c], 1.0)),
            (beta_name(layer), Tensor::zeros(&[c])),
            (running_mean_name(layer), Tensor::zeros(&[c])),
            (running_var_name(layer), Tensor::full(&[c], 1.0)),
        ],
        LayerKind::Relu | LayerKind::Maxpool | LayerKind::Gap => Vec::new(),
    }
}

pub fn init_params(graph: &ModelGraph, seed: u64) -> Result<Checkpoint> {
    graph.validate()?;
    let mut tensors = BTreeMap::new();
    for i in 0..graph.layers.len() {
        let mut rng = layer_rng(seed, i, INIT_SALT);
        tensors.extend(init_layer(graph, i, &mut rng));
    }
    let ckpt = Checkpoint {
        graph: graph.clone(),
        tensors,
        meta: CheckpointMeta::new(seed),
    };
    ckpt.validate()?;
    Ok(ckpt)
}

impl Checkpoint {
    /// Graph consistency plus an exact match between the tensors present and
    /// those the graph implies.
    pub fn validate(&self) -> Result<()> {
        self.graph.validate()?;
        let expected = expected_tensors(&self.graph);
        for (name, shape) in &expected {
            match self.tensors.get(name) {
                None => return Err(Error::Invariant(format!("missing tensor {name}"))),
                Some(t) if t.shape() != shape.as_slice() => {
                    return Err(Error::dim(
                        "checkpoint",
                        format!("{name} of shape {shape:?}"),
                        format!("{:?}", t.shape()),
                    ))
                }
                Some(_) => {}
            }
        }
        if self.tensors.len() != expected.len() {
            let known: std::collections::BTreeSet<_> = expected.iter().map(|(n, _)| n).collect();
            let extra: Vec<_> = self.tensors.keys().filter(|k| !known.contains(k)).collect();
            return Err(Error::Invariant(format!("unexpected tensors {extra:?}")));
        }
        if !(0.0..=1.0).contains(&self.meta.baseline_accuracy) {
            return Err(Error::Invariant(format!(
                "baseline accuracy {} outside [0, 1]",
                self.meta.baseline_accuracy
            )));
        }
        Ok(())
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Invariant(format!("missing tensor {name}")))
    }

    pub fn bit_eq(&self, other: &Checkpoint) -> bool {
        self.graph == other.graph
            && self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|((na, a), (nb, b))| na == nb && a.bit_eq(b))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let mut directory = Vec::with_capacity(self.tensors.len());
        let mut payload = Vec::new();
        for (name, t) in &self.tensors {
            directory.push(TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                byte_offset: payload.len() as u64,
            });
            payload.reserve(t.numel() * 4);
            for v in t.data() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
        let header = Header {
            format_version: FORMAT_VERSION,
            graph: self.graph.clone(),
            meta: self.meta.clone(),
            tensors: directory,
            payload_bytes: payload.len() as u64,
            payload_crc32: crc32fast::hash(&payload),
        };
        let header = serde_json::to_vec(&header).map_err(|e| Error::Invariant(e.to_string()))?;
        let mut out = Vec::with_capacity(FRAMING_BYTES as usize + header.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&crc32fast::hash(&header).to_le_bytes());
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, FormatError> {
        let have = bytes.len() as u64;
        let need = |n: u64| {
            if have < n {
                Err(FormatError::Truncated { needed: n, have })
            } else {
                Ok(())
            }
        };
        need(6)?;
        if &bytes[..6] != MAGIC {
            return Err(FormatError::BadMagic {
                found: bytes[..6].to_vec(),
                expected: "PFGDF1",
            });
        }
        need(14)?;
        let header_len = u64::from_le_bytes(bytes[6..14].try_into().expect("8 bytes"));
        let header_end = 14u64
            .checked_add(header_len)
            .ok_or_else(|| FormatError::Header(format!("absurd header length {header_len}")))?;
        need(header_end + 4)?;
        let header_bytes = &bytes[14..header_end as usize];
        let stored = u32::from_le_bytes(
            bytes[header_end as usize..header_end as usize + 4]
                .try_into()
                .expect("4 bytes"),
        );
        let computed = crc32fast::hash(header_bytes);
        if stored != computed {
            return Err(FormatError::HeaderChecksum { stored, computed });
        }
        let version = serde_json::from_slice::<VersionProbe>(header_bytes)
            .map_err(|e| FormatError::Header(e.to_string()))?
            .format_version;
        if version != FORMAT_VERSION {
            return Err(FormatError::Version {
                found: version,
                supported: FORMAT_VERSION,
            });
        }
        let header: Header =
            serde_json::from_slice(header_bytes).map_err(|e| FormatError::Header(e.to_string()))?;

        let payload_start = header_end + 4;
        need(payload_start + header.payload_bytes)?;
        if have != payload_start + header.payload_bytes {
            return Err(FormatError::Header(format!(
                "{} trailing bytes after payload",
                have - payload_start - header.payload_bytes
            )));
        }
        let payload = &bytes[payload_start as usize..];
        let computed = crc32fast::hash(payload);
        if computed != header.payload_crc32 {
            return Err(FormatError::PayloadChecksum {
                stored: header.payload_crc32,
                computed,
            });
        }

        let mut tensors = BTreeMap::new();
        let mut cursor = 0u64;
        for entry in &header.tensors {
            let numel: u64 = entry.shape.iter().map(|&d| d as u64).product();
            if entry.byte_offset != cursor {
                return Err(FormatError::ShapePayload {
                    name: entry.name.clone(),
                    detail: format!(
                        "offset {} but previous tensor ended at {cursor}",
                        entry.byte_offset
                    ),
                });
            }
            let end = cursor + 4 * numel;
            if end > header.payload_bytes {
                return Err(FormatError::ShapePayload {
                    name: entry.name.clone(),
                    detail: format!(
                        "shape {:?} overruns payload of {} bytes",
                        entry.shape, header.payload_bytes
                    ),
                });
            }
            let data = payload[cursor as usize..end as usize]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
                .collect();
            let t = Tensor::from_vec(entry.shape.clone(), data).map_err(|e| {
                FormatError::ShapePayload {
                    name: entry.name.clone(),
                    detail: e.to_string(),
                }
            })?;
            if tensors.insert(entry.name.clone(), t).is_some() {
                return Err(FormatError::ShapePayload {
                    name: entry.name.clone(),
                    detail: "duplicate directory entry".into(),
                });
            }
            cursor = end;
        }
        if cursor != header.payload_bytes {
            return Err(FormatError::Header(format!(
                "directory covers {cursor} of {} payload bytes",
                header.payload_bytes
            )));
        }
        let ckpt = Checkpoint {
            graph: header.graph,
            tensors,
            meta: header.meta,
        };
        ckpt.validate()
            .map_err(|e| FormatError::Header(format!("inconsistent model: {e}")))?;
        Ok(ckpt)
    }
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    byte_offset: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    graph: ModelGraph,
    meta: CheckpointMeta,
    tensors: Vec<TensorEntry>,
    payload_bytes: u64,
    payload_crc32: u32,
}

#[derive(Deserialize)]
struct VersionProbe {
    format_version: u32,
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = ckpt.to_bytes()?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes).map_err(|e| Error::format(path, e))
}
