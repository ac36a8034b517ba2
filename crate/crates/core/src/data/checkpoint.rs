use std::path::Path;

use super::grid::{decode_grid, encode_grid};
use super::{read_bytes, write_bytes, Reader};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::params::ParamGroup;

const MAGIC: [u8; 4] = *b"SSCK";
const VERSION: u32 = 1;

/// Stored model: architecture, step counter and every parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub step: u64,
    pub params: ModelParams<crate::tensor::Tensor<f32>>,
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn get_str(r: &mut Reader<'_>, what: &str) -> Result<String> {
    let n = r.u32(what)? as usize;
    String::from_utf8(r.take(n, what)?.to_vec())
        .map_err(|_| Error::Format(format!("{what} is not UTF-8")))
}

impl Checkpoint {
    /// Layout: magic, version, model config text, step, then one record per
    /// tensor (name, group label, frozen flag, embedded grid).
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_str(&mut out, &self.config.to_meta());
        out.extend_from_slice(&self.step.to_le_bytes());
        let entries = self.params.entries();
        out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
        for e in entries {
            put_str(&mut out, &e.name);
            put_str(&mut out, e.group.label());
            out.push(u8::from(e.group.is_frozen()));
            let grid = encode_grid(e.value);
            out.extend_from_slice(&(grid.len() as u32).to_le_bytes());
            out.extend_from_slice(&grid);
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        if r.take(4, "magic")? != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let config = ModelConfig::from_meta(&get_str(&mut r, "model config")?)?;
        let step = r.u64("step")?;
        let count = r.u32("tensor count")? as usize;
        // Each parameter occupies at least four payload bytes.
        let needed = config
            .param_count()
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::Format("model config overflows".into()))?;
        if needed > r.remaining() {
            return Err(Error::Format(format!(
                "model config needs {needed} payload bytes, {} remain",
                r.remaining()
            )));
        }
        let mut params = ModelParams::init(&config, 0).map_err(|e| Error::Format(e.to_string()))?;
        let expected: Vec<(String, ParamGroup)> = params
            .entries()
            .iter()
            .map(|e| (e.name.clone(), e.group))
            .collect();
        if count != expected.len() {
            return Err(Error::Format(format!(
                "checkpoint holds {count} tensors, model needs {}",
                expected.len()
            )));
        }
        for ((name, group), slot) in expected.into_iter().zip(params.leaves_mut()) {
            let got = get_str(&mut r, "tensor name")?;
            let label = get_str(&mut r, "group label")?;
            let frozen = r.take(1, "frozen flag")?[0];
            if got != name || ParamGroup::from_label(&label) != Some(group) {
                return Err(Error::Format(format!(
                    "expected {name} ({group}), found {got} ({label})"
                )));
            }
            if frozen != u8::from(group.is_frozen()) {
                return Err(Error::Format(format!("bad frozen flag on {name}")));
            }
            let len = r.u32("grid length")? as usize;
            let t = decode_grid(r.take(len, "tensor grid")?)?;
            if t.shape() != slot.shape() {
                return Err(Error::Format(format!(
                    "{name} has shape {:?}, model needs {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t;
        }
        r.finish("checkpoint")?;
        Ok(Self {
            config,
            step,
            params,
        })
    }
}

pub fn write_checkpoint(path: impl AsRef<Path>, ck: &Checkpoint) -> Result<()> {
    write_bytes(path.as_ref(), &ck.encode())
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    Checkpoint::decode(&read_bytes(path.as_ref())?)
}
