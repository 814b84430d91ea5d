//! Model files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! offset 0   8 bytes   magic "NNLMODEL"
//! offset 8   u64       header length H
//! offset 16  H bytes   UTF-8 JSON header
//!            0–7 bytes zero padding to a multiple of 8
//!            payload   raw tensors, each starting at a multiple of 8
//! ```
//!
//! The header holds the format version, the architecture text, the
//! vocabulary with counts, class ids and membership probabilities, an
//! index of payload tensors (name, shape, byte offset within the payload,
//! element type), and optionally the optimizer state and training
//! history. Parameters are stored as `f64` or `f32` according to the
//! model precision; optimizer accumulators are always `f64`.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::classes::ClassMap;
use crate::error::{Error, Result};
use crate::graph::ParamStore;
use crate::network::Network;
use crate::optim::{Algorithm, OptimizerState};
use crate::tensor::{Precision, Tensor};
use crate::train::{StopReason, TrainingState, ValidationRecord};
use crate::vocab::{self, Vocabulary, NUM_RESERVED};

pub const MAGIC: &[u8; 8] = b"NNLMODEL";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct WordEntry {
    word: String,
    count: u64,
    class: usize,
    membership: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
    dtype: Precision,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct OptimizerHeader {
    algorithm: Algorithm,
    step: u64,
    /// Parameter names; accumulator `k` of parameter `p` is the payload
    /// tensor `optimizer/{p}/{k}`.
    parameters: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RecordHeader {
    epoch: usize,
    batch: usize,
    /// `null` for an infinite perplexity.
    perplexity: Option<f64>,
    learning_rate_scale: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TrainingHeader {
    epoch: usize,
    batches: usize,
    learning_rate_scale: f64,
    best_perplexity: Option<f64>,
    failures: usize,
    history: Vec<RecordHeader>,
    stop_reason: Option<StopReason>,
    optimizer: OptimizerHeader,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    precision: Precision,
    architecture: String,
    vocabulary: Vec<WordEntry>,
    tensors: Vec<TensorEntry>,
    payload_bytes: u64,
    training: Option<TrainingHeader>,
}

/// A model read back from disk.
#[derive(Debug, Clone)]
pub struct LoadedModel {
    pub network: Network,
    pub training: Option<TrainingState>,
}

fn align8(n: usize) -> usize {
    n.div_ceil(8) * 8
}

struct PayloadWriter {
    bytes: Vec<u8>,
    entries: Vec<TensorEntry>,
}

impl PayloadWriter {
    fn push(&mut self, name: String, tensor: &Tensor, dtype: Precision) {
        let offset = self.bytes.len();
        for &x in tensor.data() {
            match dtype {
                Precision::Double => self.bytes.extend_from_slice(&x.to_le_bytes()),
                Precision::Single => self.bytes.extend_from_slice(&(x as f32).to_le_bytes()),
            }
        }
        self.bytes.resize(align8(self.bytes.len()), 0);
        self.entries.push(TensorEntry {
            name,
            shape: tensor.shape().to_vec(),
            offset: offset as u64,
            dtype,
        });
    }
}

/// File contents for a model; identical inputs give identical bytes.
pub fn model_bytes(network: &Network, training: Option<&TrainingState>) -> Result<Vec<u8>> {
    let vocab = network.vocab();
    let classes = network.classes();
    let vocabulary = (0..vocab.len())
        .map(|w| WordEntry {
            word: vocab.word(w).to_string(),
            count: vocab.count(w),
            class: classes.class_of(w),
            membership: classes.membership(w),
        })
        .collect();

    let mut payload = PayloadWriter {
        bytes: Vec::new(),
        entries: Vec::new(),
    };
    for (name, tensor) in network.params().iter() {
        payload.push(name.clone(), tensor, network.precision());
    }
    let training = training.map(|state| {
        let opt = &state.optimizer;
        for (name, slots) in opt.slots() {
            for (k, slot) in slots.iter().enumerate() {
                payload.push(format!("optimizer/{name}/{k}"), slot, Precision::Double);
            }
        }
        TrainingHeader {
            epoch: state.epoch,
            batches: state.batches,
            learning_rate_scale: state.learning_rate_scale,
            best_perplexity: state.best_perplexity,
            failures: state.failures,
            history: state
                .history
                .iter()
                .map(|r| RecordHeader {
                    epoch: r.epoch,
                    batch: r.batch,
                    perplexity: Some(r.perplexity).filter(|p| p.is_finite()),
                    learning_rate_scale: r.learning_rate_scale,
                })
                .collect(),
            stop_reason: state.stop_reason,
            optimizer: OptimizerHeader {
                algorithm: opt.algorithm(),
                step: opt.step(),
                parameters: opt.slots().keys().cloned().collect(),
            },
        }
    });

    let header = Header {
        format_version: FORMAT_VERSION,
        precision: network.precision(),
        architecture: network.arch_text().to_string(),
        vocabulary,
        tensors: payload.entries,
        payload_bytes: payload.bytes.len() as u64,
        training,
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(16 + json.len() + 8 + payload.bytes.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.resize(align8(out.len()), 0);
    out.extend_from_slice(&payload.bytes);
    Ok(out)
}

/// Writes the model atomically: a temporary file in the target directory
/// is renamed over `path`.
pub fn save_model(network: &Network, training: Option<&TrainingState>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = model_bytes(network, training)?;
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(&bytes).map_err(|e| Error::io(tmp.path(), e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

fn read_tensor(payload: &[u8], entry: &TensorEntry, what: &str) -> Result<Tensor> {
    let n = entry
        .shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Corrupt(format!("{what} '{}' has an impossible shape", entry.name)))?;
    let width = entry.dtype.bytes_per_element();
    let start = entry.offset as usize;
    let end = n
        .checked_mul(width)
        .and_then(|b| b.checked_add(start))
        .ok_or_else(|| Error::Corrupt(format!("{what} '{}' has an impossible extent", entry.name)))?;
    if end > payload.len() {
        return Err(Error::Corrupt(format!(
            "payload truncated: {what} '{}' needs bytes {start}..{end} but the payload has {}",
            entry.name,
            payload.len()
        )));
    }
    let bytes = &payload[start..end];
    let data: Vec<f64> = match entry.dtype {
        Precision::Double => bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
        Precision::Single => bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
    };
    Tensor::new(entry.shape.clone(), data).map_err(|e| Error::Corrupt(format!("{what} '{}': {e}", entry.name)))
}

pub fn parse_model(bytes: &[u8]) -> Result<LoadedModel> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(Error::Corrupt("not a model file (bad magic)".into()));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let header_end = 16usize
        .checked_add(header_len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::Corrupt("header extends past the end of the file".into()))?;
    let header_bytes = &bytes[16..header_end];
    let value: serde_json::Value =
        serde_json::from_slice(header_bytes).map_err(|e| Error::Corrupt(format!("unreadable header: {e}")))?;
    let version = value
        .get("format_version")
        .and_then(serde_json::Value::as_u64)
        .ok_or_else(|| Error::Corrupt("header has no format version".into()))?;
    if version != FORMAT_VERSION as u64 {
        return Err(Error::UnsupportedVersion {
            found: version.min(u32::MAX as u64) as u32,
            supported: FORMAT_VERSION,
        });
    }
    let header: Header = serde_json::from_value(value).map_err(|e| Error::Corrupt(format!("invalid header: {e}")))?;
    let payload = bytes.get(align8(header_end)..).unwrap_or(&[]);

    let mut sorted: Vec<&TensorEntry> = header.tensors.iter().collect();
    sorted.sort_by_key(|e| e.offset);
    let mut tensors = std::collections::BTreeMap::new();
    let mut previous_end = 0u64;
    for entry in sorted {
        if entry.offset < previous_end || entry.offset % 8 != 0 {
            return Err(Error::Corrupt(format!(
                "tensor '{}' overlaps its predecessor or is misaligned",
                entry.name
            )));
        }
        let what = if entry.name.starts_with("optimizer/") {
            "optimizer tensor"
        } else {
            "parameter"
        };
        let tensor = read_tensor(payload, entry, what)?;
        previous_end = entry.offset + (tensor.len() * entry.dtype.bytes_per_element()) as u64;
        if tensors.insert(entry.name.clone(), tensor).is_some() {
            return Err(Error::Corrupt(format!("tensor '{}' listed twice", entry.name)));
        }
    }

    let words = &header.vocabulary;
    let reserved = [vocab::SENTENCE_START, vocab::SENTENCE_END, vocab::UNKNOWN];
    if words.len() < NUM_RESERVED || words.iter().zip(reserved).any(|(e, r)| e.word != r) {
        return Err(Error::Corrupt(
            "vocabulary does not start with the reserved tokens".into(),
        ));
    }
    let vocab = Vocabulary::from_words(
        [words[0].count, words[1].count, words[2].count],
        words[NUM_RESERVED..].iter().map(|e| (e.word.clone(), e.count)),
    )
    .map_err(|e| Error::Corrupt(e.to_string()))?;
    let classes = ClassMap::new(
        words.iter().map(|e| e.class).collect(),
        words.iter().map(|e| e.membership).collect(),
    )
    .map_err(|e| Error::Corrupt(format!("class table: {e}")))?;

    let mut network = Network::from_text(&header.architecture, vocab, Some(classes), 0, header.precision)?;
    let mut params = ParamStore::new();
    for name in network.params().names() {
        let t = tensors
            .remove(name)
            .ok_or_else(|| Error::Corrupt(format!("parameter '{name}' missing from the file")))?;
        params.insert(name.clone(), t);
    }
    network
        .set_params(params)
        .map_err(|_| Error::Corrupt("parameter shapes do not match the architecture".into()))?;

    let training = match header.training {
        None => None,
        Some(th) => {
            let mut slots = std::collections::BTreeMap::new();
            for name in &th.optimizer.parameters {
                let prefix = format!("optimizer/{name}/");
                let keys: Vec<String> = tensors.keys().filter(|k| k.starts_with(&prefix)).cloned().collect();
                let mut list = Vec::with_capacity(keys.len());
                for k in 0..keys.len() {
                    let t = tensors
                        .remove(&format!("{prefix}{k}"))
                        .ok_or_else(|| Error::Corrupt(format!("optimizer state for '{name}' is incomplete")))?;
                    list.push(t);
                }
                slots.insert(name.clone(), list);
            }
            let optimizer = OptimizerState::from_parts(th.optimizer.algorithm, th.optimizer.step, slots)
                .map_err(|e| Error::Corrupt(e.to_string()))?;
            Some(TrainingState {
                epoch: th.epoch,
                batches: th.batches,
                learning_rate_scale: th.learning_rate_scale,
                best_perplexity: th.best_perplexity,
                best_params: None,
                failures: th.failures,
                history: th
                    .history
                    .iter()
                    .map(|r| ValidationRecord {
                        epoch: r.epoch,
                        batch: r.batch,
                        perplexity: r.perplexity.unwrap_or(f64::INFINITY),
                        learning_rate_scale: r.learning_rate_scale,
                    })
                    .collect(),
                stop_reason: th.stop_reason,
                optimizer,
            })
        }
    };
    if payload.len() as u64 != header.payload_bytes {
        return Err(Error::Corrupt(format!(
            "payload has {} bytes but the header declares {}",
            payload.len(),
            header.payload_bytes
        )));
    }
    if let Some(extra) = tensors.keys().next() {
        return Err(Error::Corrupt(format!("unexpected tensor '{extra}' in the file")));
    }
    Ok(LoadedModel { network, training })
}

pub fn load_model(path: impl AsRef<Path>) -> Result<LoadedModel> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_model(&bytes)
}
