//! `VIPF1` checkpoint files.
//!
//! Layout: the 6-byte magic `VIPF1\n`, a little-endian `u64` header length,
//! a compact JSON header, then the tensor payload (little-endian values,
//! entries back to back in header order). The header carries a CRC-32 of
//! the payload so any corrupted byte fails the load.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::optim::{AdamWConfig, AdamWState};
use super::schedule::SchedulerState;
use crate::data::formats::{read_file, write_file};
use crate::error::{Error, Result};
use crate::model::{ParamKind, ParamStore, ViPFormerConfig};
use crate::real::{DType, Real};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 6] = b"VIPF1\n";
const PREFIX: u64 = 14;

/// Loss sums of a partially completed epoch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochAccum {
    pub imc_sum: f64,
    pub cmc_sum: f64,
    pub total_sum: f64,
    pub steps: u64,
    pub last_lr: f64,
}

/// Where training stands; together with the seed this fixes every random
/// draw still to come.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Progress {
    pub seed: u64,
    /// Completed epochs.
    pub epoch: u64,
    /// Completed optimizer steps within the current epoch.
    pub step: u64,
    pub global_step: u64,
    pub accum: EpochAccum,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BestRecord {
    pub metric: String,
    pub value: f64,
    /// 1-based epoch at which `value` was reached (0 = before training).
    pub epoch: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// `"pretrain"` or `"finetune"`.
    pub stage: String,
    pub model: ViPFormerConfig,
    /// Resolved run configuration, echoed verbatim.
    pub run: BTreeMap<String, String>,
    pub weights: ParamStore<f32>,
    pub optimizer: Option<AdamWState<f32>>,
    pub scheduler: SchedulerState,
    pub progress: Progress,
    pub best: Option<BestRecord>,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    group: String,
    name: String,
    kind: ParamKind,
    dtype: DType,
    shape: Vec<usize>,
    offset: u64,
    len: u64,
}

#[derive(Serialize, Deserialize)]
struct OptimizerHeader {
    config: AdamWConfig,
    step: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    stage: String,
    model: ViPFormerConfig,
    run: BTreeMap<String, String>,
    optimizer: Option<OptimizerHeader>,
    scheduler: SchedulerState,
    progress: Progress,
    best: Option<BestRecord>,
    entries: Vec<Entry>,
    payload_len: u64,
    payload_crc32: u32,
}

const WEIGHTS: &str = "weights";
const ADAM_M: &str = "adam_m";
const ADAM_V: &str = "adam_v";

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut payload = Vec::new();
        let mut entries = Vec::new();
        let mut push = |group: &str, store: &ParamStore<f32>| {
            for p in store.iter() {
                let offset = payload.len() as u64;
                for v in p.value.data() {
                    v.write_le(&mut payload);
                }
                entries.push(Entry {
                    group: group.into(),
                    name: p.name.clone(),
                    kind: p.kind,
                    dtype: DType::F32,
                    shape: p.value.shape().to_vec(),
                    offset,
                    len: payload.len() as u64 - offset,
                });
            }
        };
        push(WEIGHTS, &self.weights);
        if let Some(opt) = &self.optimizer {
            push(ADAM_M, &opt.m);
            push(ADAM_V, &opt.v);
        }
        let header = Header {
            stage: self.stage.clone(),
            model: self.model.clone(),
            run: self.run.clone(),
            optimizer: self.optimizer.as_ref().map(|o| OptimizerHeader {
                config: o.config,
                step: o.step,
            }),
            scheduler: self.scheduler,
            progress: self.progress,
            best: self.best.clone(),
            entries,
            payload_len: payload.len() as u64,
            payload_crc32: crc32fast::hash(&payload),
        };
        let json = serde_json::to_vec(&header).expect("header serialises");
        let mut out = Vec::with_capacity(PREFIX as usize + json.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        let fail = |offset: u64, msg: String| Error::Format { offset, msg };
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(fail(0, "missing VIPF1 magic".into()));
        }
        if bytes.len() < PREFIX as usize {
            return Err(fail(bytes.len() as u64, "truncated header length".into()));
        }
        let hlen = u64::from_le_bytes(bytes[6..14].try_into().unwrap());
        let body = bytes.len() as u64 - PREFIX;
        if hlen > body {
            return Err(fail(6, format!("header length {hlen} exceeds the {body} bytes that follow")));
        }
        let payload_start = PREFIX + hlen;
        let header: Header = serde_json::from_slice(&bytes[PREFIX as usize..payload_start as usize])
            .map_err(|e| fail(PREFIX + e.column().saturating_sub(1) as u64, format!("bad header: {e}")))?;
        let payload = &bytes[payload_start as usize..];
        if payload.len() as u64 != header.payload_len {
            return Err(fail(
                payload_start + (payload.len() as u64).min(header.payload_len),
                format!("payload has {} bytes, header declares {}", payload.len(), header.payload_len),
            ));
        }
        if crc32fast::hash(payload) != header.payload_crc32 {
            return Err(fail(payload_start, "payload checksum mismatch".into()));
        }

        let mut groups: BTreeMap<&str, ParamStore<f32>> = BTreeMap::new();
        for e in &header.entries {
            let at = payload_start + e.offset;
            let numel: usize = e.shape.iter().product();
            let end = e.offset.checked_add(e.len).filter(|&end| end <= header.payload_len);
            if end.is_none() || e.len != (numel * e.dtype.size()) as u64 {
                return Err(fail(at, format!("entry {}/{} has inconsistent extent", e.group, e.name)));
            }
            let raw = &payload[e.offset as usize..(e.offset + e.len) as usize];
            let values: Vec<f32> = match e.dtype {
                DType::F32 => raw.chunks_exact(4).map(f32::read_le).collect(),
                DType::F64 => raw.chunks_exact(8).map(|c| f64::read_le(c) as f32).collect(),
            };
            let t = Tensor::from_vec(&e.shape, values).map_err(|err| fail(at, err.to_string()))?;
            let store = match e.group.as_str() {
                WEIGHTS => groups.entry(WEIGHTS),
                ADAM_M => groups.entry(ADAM_M),
                ADAM_V => groups.entry(ADAM_V),
                other => return Err(fail(at, format!("unknown entry group {other:?}"))),
            }
            .or_default();
            store
                .insert(e.name.clone(), t, e.kind)
                .map_err(|err| fail(at, err.to_string()))?;
        }
        let weights = groups.remove(WEIGHTS).unwrap_or_default();
        let optimizer = header.optimizer.map(|o| AdamWState {
                config: o.config,
                step: o.step,
                m: groups.remove(ADAM_M).unwrap_or_default(),
                v: groups.remove(ADAM_V).unwrap_or_default(),
            });
        Ok(Checkpoint {
            stage: header.stage,
            model: header.model,
            run: header.run,
            weights,
            optimizer,
            scheduler: header.scheduler,
            progress: header.progress,
            best: header.best,
        })
    }
}

/// Writes to a sibling temporary file and renames it into place.
pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let tmp = path.with_extension("tmp");
    write_file(&tmp, &ckpt.to_bytes())?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&read_file(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_weights;
    use crate::rng::RngStream;

    fn tiny() -> Checkpoint {
        let cfg = ViPFormerConfig::tiny();
        let weights = init_weights::<f32>(&cfg, &RngStream::new(3)).unwrap();
        let optimizer = Some(AdamWState::new(AdamWConfig::default(), &weights));
        Checkpoint {
            stage: "pretrain".into(),
            model: cfg,
            run: BTreeMap::from([("seed".to_string(), "3".to_string())]),
            weights,
            optimizer,
            scheduler: SchedulerState::default(),
            progress: Progress {
                seed: 3,
                epoch: 1,
                step: 2,
                global_step: 9,
                accum: EpochAccum {
                    imc_sum: 1.25,
                    cmc_sum: 0.5,
                    total_sum: 0.1,
                    steps: 2,
                    last_lr: 1e-4,
                },
            },
            best: Some(BestRecord {
                metric: "probe_acc".into(),
                value: 0.5,
                epoch: 1,
            }),
        }
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let c = tiny();
        let bytes = c.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn corruption_is_detected() {
        let bytes = tiny().to_bytes();
        let mut bad = bytes.clone();
        let last = bad.len() - 3;
        bad[last] ^= 0x40;
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Format { .. })));
        assert!(matches!(
            Checkpoint::from_bytes(&bytes[..bytes.len() - 1]),
            Err(Error::Format { .. })
        ));
        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&magic), Err(Error::Format { offset: 0, .. })));
    }
}
