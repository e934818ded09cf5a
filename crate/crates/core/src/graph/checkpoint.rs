//! Checkpoint container.
//!
//! Layout: magic "S2C1", a version byte, a precision byte (bytes per float),
//! a little-endian u64 header length, a JSON header (topology, step counter,
//! rng state, normalization stats, blob index), then raw little-endian
//! IEEE-754 tensor blobs. Tensor bytes round-trip bitwise.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{LayerName, NodeId, SeriesNetwork};
use crate::data::ChannelStats;
use crate::error::{CheckpointError, Error, Result};
use crate::layers::{BnParams, ConvParams, ConvSpec, HeadParams};
use crate::optim::EmaState;
use crate::rng::SeededRng;
use crate::tensor::{Element, Tensor};

pub const MAGIC: [u8; 4] = *b"S2C1";
pub const VERSION: u8 = 1;

/// A training snapshot: the network plus everything needed to resume or
/// evaluate it exactly.
#[derive(Debug, Clone)]
pub struct Checkpoint<E: Element> {
    pub net: SeriesNetwork<E>,
    pub ema: Option<EmaState<E>>,
    pub step: u64,
    pub rng: SeededRng,
    pub norm_stats: Option<ChannelStats>,
}

#[derive(Serialize, Deserialize)]
struct EdgeMeta {
    name: String,
    from: u32,
    to: u32,
    in_channels: usize,
    out_channels: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    origin_stage: u32,
    epsilon: f64,
    ema_decay: f64,
}

#[derive(Serialize, Deserialize)]
struct Topology {
    in_channels: usize,
    classes: usize,
    features: usize,
    node_count: usize,
    input: u32,
    output: u32,
    stage_count: u32,
    edges: Vec<EdgeMeta>,
}

#[derive(Serialize, Deserialize)]
struct BlobEntry {
    key: String,
    shape: Vec<usize>,
    offset: u64,
    byte_len: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    topology: Topology,
    step: u64,
    rng_state: u64,
    rng_inc: u64,
    norm_mean: Option<Vec<f64>>,
    norm_std: Option<Vec<f64>>,
    ema_decay: Option<f64>,
    blobs: Vec<BlobEntry>,
}

fn push_blob<E: Element>(
    blobs: &mut Vec<u8>,
    index: &mut Vec<BlobEntry>,
    key: String,
    tensor: &Tensor<E>,
) {
    let offset = blobs.len() as u64;
    for &v in tensor.data() {
        v.write_le(blobs);
    }
    index.push(BlobEntry {
        key,
        shape: tensor.shape().to_vec(),
        offset,
        byte_len: (tensor.len() * E::WIDTH as usize) as u64,
    });
}

impl<E: Element> Checkpoint<E> {
    /// Serialize to bytes (the on-disk format).
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let net = &self.net;
        let mut blobs = Vec::new();
        let mut index = Vec::new();
        for edge in net.edges() {
            let n = edge.name;
            push_blob(&mut blobs, &mut index, format!("conv/{n}"), &edge.conv.weights);
            push_blob(&mut blobs, &mut index, format!("gamma/{n}"), &edge.bn.gamma);
            push_blob(&mut blobs, &mut index, format!("beta/{n}"), &edge.bn.beta);
            push_blob(
                &mut blobs,
                &mut index,
                format!("running_mean/{n}"),
                &edge.bn.running_mean,
            );
            push_blob(
                &mut blobs,
                &mut index,
                format!("running_var/{n}"),
                &edge.bn.running_var,
            );
        }
        push_blob(&mut blobs, &mut index, "head/weight".into(), &net.head.weight);
        push_blob(&mut blobs, &mut index, "head/bias".into(), &net.head.bias);
        if let Some(ema) = &self.ema {
            for (key, shadow) in ema.shadows() {
                push_blob(&mut blobs, &mut index, format!("ema/{key}"), shadow);
            }
        }
        let (rng_state, rng_inc) = self.rng.state_words();
        let header = Header {
            topology: Topology {
                in_channels: net.in_channels(),
                classes: net.head.classes(),
                features: net.head.features(),
                node_count: net.node_count(),
                input: net.input_node().0,
                output: net.output_node().0,
                stage_count: net.stage_count(),
                edges: net
                    .edges()
                    .iter()
                    .map(|e| EdgeMeta {
                        name: e.name.to_string(),
                        from: e.from.0,
                        to: e.to.0,
                        in_channels: e.conv.spec.in_channels,
                        out_channels: e.conv.spec.out_channels,
                        kernel: e.conv.spec.kernel,
                        stride: e.conv.spec.stride,
                        padding: e.conv.spec.padding,
                        origin_stage: e.origin_stage,
                        epsilon: e.bn.epsilon,
                        ema_decay: e.bn.ema_decay,
                    })
                    .collect(),
            },
            step: self.step,
            rng_state,
            rng_inc,
            norm_mean: self.norm_stats.as_ref().map(|s| s.mean.clone()),
            norm_std: self.norm_stats.as_ref().map(|s| s.std.clone()),
            ema_decay: self.ema.as_ref().map(|e| e.decay),
            blobs: index,
        };
        let header_json = serde_json::to_vec(&header)
            .map_err(|e| Error::Checkpoint(CheckpointError::Header(e.to_string())))?;
        let mut out = Vec::with_capacity(14 + header_json.len() + blobs.len());
        out.extend_from_slice(&MAGIC);
        out.push(VERSION);
        out.push(E::WIDTH);
        out.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
        out.extend_from_slice(&header_json);
        out.extend_from_slice(&blobs);
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    /// Deserialize, rejecting every corruption mode with its own error.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || bytes[..4] != MAGIC {
            let mut found = [0u8; 4];
            for (i, b) in bytes.iter().take(4).enumerate() {
                found[i] = *b;
            }
            return Err(CheckpointError::BadMagic { found }.into());
        }
        if bytes.len() < 14 {
            return Err(CheckpointError::Header("file shorter than fixed prelude".into()).into());
        }
        if bytes[4] != VERSION {
            return Err(CheckpointError::Version {
                found: bytes[4],
                supported: VERSION,
            }
            .into());
        }
        if bytes[5] != E::WIDTH {
            return Err(CheckpointError::Precision {
                found: bytes[5],
                expected: E::WIDTH,
            }
            .into());
        }
        let header_len = u64::from_le_bytes(bytes[6..14].try_into().unwrap()) as usize;
        let header_end = 14usize
            .checked_add(header_len)
            .ok_or_else(|| CheckpointError::Header("header length overflows".into()))?;
        if bytes.len() < header_end {
            return Err(CheckpointError::Header("truncated header".into()).into());
        }
        let header: Header = serde_json::from_slice(&bytes[14..header_end])
            .map_err(|e| CheckpointError::Header(e.to_string()))?;
        let blob_section = &bytes[header_end..];

        // Index sanity: entries must tile the blob section exactly.
        let mut sorted: Vec<&BlobEntry> = header.blobs.iter().collect();
        sorted.sort_by_key(|b| b.offset);
        let mut cursor = 0u64;
        for entry in &sorted {
            if entry.offset != cursor {
                return Err(CheckpointError::Index(format!(
                    "blob {} at offset {} leaves a gap or overlap (expected {})",
                    entry.key, entry.offset, cursor
                ))
                .into());
            }
            cursor += entry.byte_len;
        }
        if cursor < blob_section.len() as u64 {
            return Err(CheckpointError::Index(format!(
                "{} trailing bytes after the last indexed blob",
                blob_section.len() as u64 - cursor
            ))
            .into());
        }

        let blob_map: BTreeMap<&str, &BlobEntry> = header
            .blobs
            .iter()
            .map(|b| (b.key.as_str(), b))
            .collect();
        if blob_map.len() != header.blobs.len() {
            return Err(CheckpointError::Index("duplicate blob keys".into()).into());
        }
        let read_tensor = |key: &str, expect_shape: Option<&[usize]>| -> Result<Tensor<E>> {
            let entry = blob_map
                .get(key)
                .ok_or_else(|| CheckpointError::Index(format!("missing blob {key}")))?;
            if let Some(s) = expect_shape {
                if entry.shape != s {
                    return Err(CheckpointError::Index(format!(
                        "blob {key} has shape {:?}, expected {s:?}",
                        entry.shape
                    ))
                    .into());
                }
            }
            let count: usize = entry.shape.iter().product();
            let need = (count * E::WIDTH as usize) as u64;
            if entry.byte_len != need {
                return Err(CheckpointError::Index(format!(
                    "blob {key} length {} does not match shape {:?}",
                    entry.byte_len, entry.shape
                ))
                .into());
            }
            let start = entry.offset;
            let end = start + need;
            if end > blob_section.len() as u64 {
                return Err(CheckpointError::Truncated {
                    tensor: key.to_string(),
                    start,
                    end,
                    available: blob_section.len() as u64,
                }
                .into());
            }
            let raw = &blob_section[start as usize..end as usize];
            let data: Vec<E> = raw
                .chunks_exact(E::WIDTH as usize)
                .map(E::read_le)
                .collect();
            Tensor::from_vec(&entry.shape, data)
        };

        // Rebuild the graph.
        let topo = &header.topology;
        let mut net = SeriesNetwork {
            nodes: Vec::new(),
            edges: Vec::new(),
            input: NodeId(topo.input),
            output: NodeId(topo.output),
            head: HeadParams {
                weight: read_tensor("head/weight", Some(&[topo.classes, topo.features]))?,
                bias: read_tensor("head/bias", Some(&[topo.classes]))?,
            },
            stage_count: topo.stage_count,
            in_channels: topo.in_channels,
            version: 0,
        };
        for _ in 0..topo.node_count {
            net.add_node();
        }
        if topo.input as usize >= topo.node_count || topo.output as usize >= topo.node_count {
            return Err(CheckpointError::Header("input/output node out of range".into()).into());
        }
        for meta in &topo.edges {
            let name: LayerName = meta
                .name
                .parse()
                .map_err(|_| CheckpointError::Header(format!("bad layer name {}", meta.name)))?;
            if meta.from as usize >= topo.node_count || meta.to as usize >= topo.node_count {
                return Err(
                    CheckpointError::Header(format!("edge {name} references bad node")).into(),
                );
            }
            let spec = ConvSpec {
                in_channels: meta.in_channels,
                out_channels: meta.out_channels,
                kernel: meta.kernel,
                stride: meta.stride,
                padding: meta.padding,
            };
            let conv = ConvParams::from_weights(
                spec,
                read_tensor(&format!("conv/{name}"), Some(&spec.weight_shape()))?,
            )?;
            let c = meta.out_channels;
            let bn = BnParams {
                gamma: read_tensor(&format!("gamma/{name}"), Some(&[c]))?,
                beta: read_tensor(&format!("beta/{name}"), Some(&[c]))?,
                running_mean: read_tensor(&format!("running_mean/{name}"), Some(&[c]))?,
                running_var: read_tensor(&format!("running_var/{name}"), Some(&[c]))?,
                epsilon: meta.epsilon,
                ema_decay: meta.ema_decay,
            };
            net.add_edge(name, NodeId(meta.from), NodeId(meta.to), conv, bn, meta.origin_stage)?;
        }
        net.validate()?;

        let ema = match header.ema_decay {
            Some(decay) => {
                let mut shadows = BTreeMap::new();
                for key in net.trainable_keys() {
                    let shape = net.param(&key).expect("listed key").shape().to_vec();
                    shadows.insert(key, read_tensor(&format!("ema/{key}"), Some(&shape))?);
                }
                Some(EmaState::from_shadows(decay, shadows))
            }
            None => None,
        };

        // Every indexed blob must be one we consumed.
        let expected = expected_blob_count(&net, ema.is_some());
        if header.blobs.len() != expected {
            return Err(CheckpointError::Index(format!(
                "index lists {} blobs but topology implies {expected}",
                header.blobs.len()
            ))
            .into());
        }

        let norm_stats = match (header.norm_mean, header.norm_std) {
            (Some(mean), Some(std)) => Some(ChannelStats { mean, std }),
            (None, None) => None,
            _ => {
                return Err(
                    CheckpointError::Header("normalization stats half-present".into()).into(),
                )
            }
        };

        Ok(Checkpoint {
            net,
            ema,
            step: header.step,
            rng: SeededRng::from_state_words(header.rng_state, header.rng_inc),
            norm_stats,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::from_bytes(&bytes)
    }
}

fn expected_blob_count<E: Element>(net: &SeriesNetwork<E>, has_ema: bool) -> usize {
    let per_edge = 5; // conv, gamma, beta, running_mean, running_var
    let base = net.edges().len() * per_edge + 2;
    if has_ema {
        base + net.trainable_keys().len()
    } else {
        base
    }
}

/// Read just the fixed prelude of a checkpoint file: (version, precision).
pub fn peek(path: &Path) -> Result<(u8, u8)> {
    let mut bytes = [0u8; 6];
    use std::io::Read;
    let mut f = std::fs::File::open(path)?;
    f.read_exact(&mut bytes).map_err(|_| {
        Error::Checkpoint(CheckpointError::Header("file shorter than prelude".into()))
    })?;
    if bytes[..4] != MAGIC {
        let mut found = [0u8; 4];
        found.copy_from_slice(&bytes[..4]);
        return Err(CheckpointError::BadMagic { found }.into());
    }
    Ok((bytes[4], bytes[5]))
}

/// Export the human-readable topology description of a stored checkpoint.
pub fn describe_file(path: &Path) -> Result<String> {
    let (_, precision) = peek(path)?;
    match precision {
        4 => Ok(Checkpoint::<f32>::load(path)?.net.describe()),
        8 => Ok(Checkpoint::<f64>::load(path)?.net.describe()),
        other => Err(CheckpointError::Precision {
            found: other,
            expected: 4,
        }
        .into()),
    }
}
