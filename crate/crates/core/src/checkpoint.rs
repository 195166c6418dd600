//! `.haafp` parameter checkpoints.
//!
//! Layout, integers little-endian and values `f64` LE:
//!
//! ```text
//! "HAAP" | version u32
//! meta count u32 | per entry: key len u32 | key | value len u32 | value
//! tensor count u32 | per tensor: name len u32 | name | rank u32 | dims u32… | offset u64
//! value count u64 | values
//! ```
//!
//! `offset` indexes into the value block, so each tensor can be located by
//! name without decoding the others.

use std::collections::BTreeSet;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::backbone::BackboneSpec;
use crate::error::{Error, Result};
use crate::io::{ByteReader, ByteWriter};
use crate::model::{HaafParams, ModelConfig, ModelState};
use crate::numcore::Tensor;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"HAAP";
pub const CHECKPOINT_VERSION: u32 = 1;

const MAX_NAME: usize = 4096;
const MAX_RANK: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// Architecture fields checked before loading into a model.
    pub meta: Vec<(String, String)>,
    pub tensors: Vec<(String, Tensor)>,
}

fn join(xs: &[usize]) -> String {
    xs.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

fn architecture(d: usize, visual: &[usize], text: &[usize], config: &ModelConfig) -> Vec<(String, String)> {
    vec![
        ("d".into(), d.to_string()),
        ("prompt_len".into(), config.prompt_len.to_string()),
        ("visual_taps".into(), join(visual)),
        ("text_taps".into(), join(text)),
        ("reduction".into(), config.reduction.to_string()),
        ("heads".into(), config.heads.to_string()),
    ]
}

impl Checkpoint {
    pub fn from_model(model: &ModelState) -> Self {
        let p = &model.params;
        Self {
            meta: architecture(model.width(), &p.visual_taps, &p.text_taps, &model.config),
            tensors: p.entries().into_iter().map(|(n, t)| (n, t.clone())).collect(),
        }
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn names(&self) -> Vec<&str> {
        self.tensors.iter().map(|(n, _)| n.as_str()).collect()
    }

    /// Rejects a checkpoint whose architecture differs from the run's,
    /// naming the first differing field.
    pub fn check_compatible(&self, spec: &BackboneSpec, config: &ModelConfig) -> Result<()> {
        for (key, want) in architecture(spec.d, &spec.selected_visual, &spec.selected_text, config) {
            match self.meta(&key) {
                Some(got) if got == want => {}
                Some(got) => {
                    return Err(Error::Compatibility {
                        field: key,
                        reason: format!("checkpoint has {got}, run expects {want}"),
                    })
                }
                None => {
                    return Err(Error::Compatibility {
                        field: key,
                        reason: "missing from checkpoint".into(),
                    })
                }
            }
        }
        Ok(())
    }

    /// Fills `template`'s layout with the stored tensors; names and shapes
    /// must match exactly.
    pub fn into_params(&self, template: &HaafParams) -> Result<HaafParams> {
        let expected: BTreeSet<String> = template.names().into_iter().collect();
        if let Some((extra, _)) = self.tensors.iter().find(|(n, _)| !expected.contains(n)) {
            return Err(Error::Compatibility {
                field: extra.clone(),
                reason: "tensor not part of the model".into(),
            });
        }
        let mut out = template.clone();
        for (name, slot) in out.entries_mut() {
            let stored = self.get(&name).ok_or_else(|| Error::Compatibility {
                field: name.clone(),
                reason: "missing from checkpoint".into(),
            })?;
            if stored.shape() != slot.shape() {
                return Err(Error::Compatibility {
                    field: name,
                    reason: format!("shape {:?}, model expects {:?}", stored.shape(), slot.shape()),
                });
            }
            *slot = stored.clone();
        }
        Ok(out)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::default();
        w.bytes(&CHECKPOINT_MAGIC);
        w.u32(CHECKPOINT_VERSION);
        w.u32(self.meta.len() as u32);
        for (k, v) in &self.meta {
            w.u32(k.len() as u32);
            w.bytes(k.as_bytes());
            w.u32(v.len() as u32);
            w.bytes(v.as_bytes());
        }
        w.u32(self.tensors.len() as u32);
        let mut offset = 0u64;
        for (name, t) in &self.tensors {
            w.u32(name.len() as u32);
            w.bytes(name.as_bytes());
            w.u32(t.rank() as u32);
            for &d in t.shape() {
                w.u32(d as u32);
            }
            w.u64(offset);
            offset += t.numel() as u64;
        }
        w.u64(offset);
        for (_, t) in &self.tensors {
            w.f64s(t.data());
        }
        w.into_inner()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        r.magic(&CHECKPOINT_MAGIC)?;
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(r.error_at(r.offset() - 4, format!("unsupported version {version}")));
        }
        let n_meta = r.u32()? as usize;
        let mut meta = Vec::with_capacity(n_meta.min(64));
        for _ in 0..n_meta {
            meta.push((read_string(&mut r)?, read_string(&mut r)?));
        }
        let n_tensors = r.u32()? as usize;
        let mut directory = Vec::with_capacity(n_tensors.min(1024));
        let mut seen = BTreeSet::new();
        for _ in 0..n_tensors {
            let at = r.offset();
            let name = read_string(&mut r)?;
            if !seen.insert(name.clone()) {
                return Err(r.error_at(at, format!("duplicate tensor {name}")));
            }
            let rank_at = r.offset();
            let rank = r.u32()? as usize;
            if rank > MAX_RANK {
                return Err(r.error_at(rank_at, format!("implausible rank {rank}")));
            }
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let offset_at = r.offset();
            let offset = r.u64()?;
            directory.push((name, shape, offset, offset_at));
        }
        let count_at = r.offset();
        let count = r.u64()?;
        let remaining = (bytes.len() - r.offset()) as u64;
        if count.checked_mul(8) != Some(remaining) {
            return Err(r.error_at(
                count_at,
                format!("{count} values declared, {remaining} bytes of data present"),
            ));
        }
        let values = r.f64s(count as usize)?;
        r.finish()?;
        let mut tensors = Vec::with_capacity(directory.len());
        for (name, shape, offset, offset_at) in directory {
            let n = shape.iter().try_fold(1u64, |acc, &d| acc.checked_mul(d as u64));
            let end = n.and_then(|n| offset.checked_add(n)).filter(|&e| e <= count);
            let Some(end) = end else {
                return Err(r.error_at(
                    offset_at,
                    format!("tensor {name} at {offset} with shape {shape:?} exceeds {count} values"),
                ));
            };
            let data = values[offset as usize..end as usize].to_vec();
            let t = Tensor::new(shape, data).map_err(|e| r.error_at(offset_at, e.to_string()))?;
            tensors.push((name, t));
        }
        Ok(Self { meta, tensors })
    }

    pub fn checksum(&self) -> String {
        hex::encode(Sha256::digest(self.to_bytes()))
    }
}

fn read_string(r: &mut ByteReader<'_>) -> Result<String> {
    let at = r.offset();
    let len = r.u32()? as usize;
    if len > MAX_NAME {
        return Err(r.error_at(at, format!("implausible string length {len}")));
    }
    let b = r.bytes(len)?;
    String::from_utf8(b.to_vec()).map_err(|_| r.error_at(at + 4, "string is not UTF-8".into()))
}

pub fn save_checkpoint(model: &ModelState, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, Checkpoint::from_model(model).to_bytes())?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&std::fs::read(path)?)
}

/// Loads `checkpoint` into a freshly initialized model of the run's
/// architecture.
pub fn restore_model(checkpoint: &Checkpoint, template: &ModelState, spec: &BackboneSpec) -> Result<ModelState> {
    checkpoint.check_compatible(spec, &template.config)?;
    let params = checkpoint.into_params(&template.params)?;
    Ok(ModelState::from_params(
        template.config.clone(),
        params,
        [
            template.class_embedding(crate::Class::Normal).clone(),
            template.class_embedding(crate::Class::Abnormal).clone(),
        ],
    ))
}
