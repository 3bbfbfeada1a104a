//! Checkpoint directories: `tensors.bin` plus a `checkpoint.toml` sidecar.
//!
//! `tensors.bin` starts with a little-endian `u64` header length, then a
//! UTF-8 header with one `name<TAB>dtype<TAB>shape<TAB>offset` line per
//! tensor (shape comma-separated, offset in bytes from the payload start),
//! then the little-endian payloads.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::codec::CodecConfig;
use crate::dit::{DiT, ModelConfig};
use crate::optim::AdamW;
use crate::trainer::TrainConfig;
use crate::{Error, Result, Scalar};

pub const TENSOR_FILE: &str = "tensors.bin";
pub const SIDECAR_FILE: &str = "checkpoint.toml";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl TensorEntry {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// A tensor to be written: name, shape, values.
pub type NamedTensor<'a, T> = (String, Vec<usize>, &'a [T]);

pub fn write_tensors<T: Scalar>(path: &Path, tensors: &[NamedTensor<'_, T>]) -> Result<()> {
    let mut header = String::new();
    let mut offset = 0;
    for (name, shape, data) in tensors {
        if name.contains(['\t', '\n']) {
            return Err(Error::State(format!("tensor name {name:?} contains a separator")));
        }
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::Shape(format!("tensor {name} has {} values for shape {shape:?}", data.len())));
        }
        let dims: Vec<String> = shape.iter().map(|d| d.to_string()).collect();
        header.push_str(&format!("{name}\t{}\t{}\t{offset}\n", T::DTYPE, dims.join(",")));
        offset += data.len() * T::BYTES;
    }
    let mut bytes = Vec::with_capacity(8 + header.len() + offset);
    bytes.extend_from_slice(&(header.len() as u64).to_le_bytes());
    bytes.extend_from_slice(header.as_bytes());
    for (_, _, data) in tensors {
        for &v in *data {
            v.write_le(&mut bytes);
        }
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn parse_header(path: &Path, bytes: &[u8]) -> Result<(Vec<TensorEntry>, usize)> {
    if bytes.len() < 8 {
        return Err(Error::format(path, "file too short for a header length"));
    }
    let len = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
    let end = 8usize
        .checked_add(len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::format(path, "header length exceeds file size"))?;
    let text = std::str::from_utf8(&bytes[8..end]).map_err(|_| Error::format(path, "header is not UTF-8"))?;
    let mut entries = Vec::new();
    for line in text.lines() {
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 4 {
            return Err(Error::format(path, format!("bad header line {line:?}")));
        }
        let shape = if f[2].is_empty() {
            Vec::new()
        } else {
            f[2].split(',')
                .map(|d| d.parse().map_err(|_| Error::format(path, format!("bad dimension {d:?}"))))
                .collect::<Result<_>>()?
        };
        let offset = f[3].parse().map_err(|_| Error::format(path, format!("bad offset {:?}", f[3])))?;
        entries.push(TensorEntry {
            name: f[0].to_string(),
            dtype: f[1].to_string(),
            shape,
            offset,
        });
    }
    Ok((entries, end))
}

/// Header entries only; reads just the header bytes.
pub fn read_index(path: &Path) -> Result<Vec<TensorEntry>> {
    use std::io::Read;
    let mut f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut len = [0u8; 8];
    f.read_exact(&mut len).map_err(|e| Error::io(path, e))?;
    let n = u64::from_le_bytes(len) as usize;
    let mut buf = len.to_vec();
    buf.resize(8 + n, 0);
    f.read_exact(&mut buf[8..]).map_err(|e| Error::io(path, e))?;
    Ok(parse_header(path, &buf)?.0)
}

pub fn read_tensors<T: Scalar>(path: &Path) -> Result<Vec<(TensorEntry, Vec<T>)>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (entries, start) = parse_header(path, &bytes)?;
    let payload = &bytes[start..];
    entries
        .into_iter()
        .map(|e| {
            if e.dtype != T::DTYPE {
                return Err(Error::format(path, format!("tensor {} is {}, expected {}", e.name, e.dtype, T::DTYPE)));
            }
            let n = e.numel() * T::BYTES;
            let raw = payload
                .get(e.offset..e.offset + n)
                .ok_or_else(|| Error::format(path, format!("tensor {} runs past the payload", e.name)))?;
            let vals = raw.chunks_exact(T::BYTES).map(T::read_le).collect();
            Ok((e, vals))
        })
        .collect()
}

/// Sidecar contents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub step: u64,
    /// Trailing mean of the logged loss at `step`.
    pub smoothed_loss: f64,
    pub model: ModelConfig,
    pub codec: CodecConfig,
    pub train: TrainConfig,
}

/// Full training state. The optimizer's update count equals `meta.step`.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: Vec<f32>,
    pub ema: Vec<f32>,
    pub opt: AdamW<f32>,
}

const GROUPS: [&str; 4] = ["model", "ema", "adam_m", "adam_v"];

pub fn checkpoint_dir(run: &Path, step: u64) -> PathBuf {
    run.join(format!("ckpt_{step}"))
}

impl Checkpoint {
    pub fn save(&self, dir: &Path) -> Result<()> {
        let arch = DiT::new(self.meta.model.clone())?;
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut tensors: Vec<NamedTensor<'_, f32>> = Vec::new();
        for (group, buf) in GROUPS.iter().zip([&self.params, &self.ema, &self.opt.m, &self.opt.v]) {
            for spec in &arch.layout.entries {
                tensors.push((format!("{group}/{}", spec.name), spec.shape.clone(), &buf[spec.slot.range()]));
            }
        }
        write_tensors(&dir.join(TENSOR_FILE), &tensors)?;
        let side = toml::to_string(&self.meta).map_err(|e| Error::State(format!("cannot serialize checkpoint metadata: {e}")))?;
        let p = dir.join(SIDECAR_FILE);
        fs::write(&p, side).map_err(|e| Error::io(&p, e))
    }

    pub fn read_meta(dir: &Path) -> Result<CheckpointMeta> {
        let p = dir.join(SIDECAR_FILE);
        let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        toml::from_str(&text).map_err(|e| Error::format(&p, e.to_string()))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta = Self::read_meta(dir)?;
        let arch = DiT::new(meta.model.clone())?;
        let path = dir.join(TENSOR_FILE);
        let tensors = read_tensors::<f32>(&path)?;
        let n = arch.num_params();
        let mut bufs = vec![vec![0f32; n]; GROUPS.len()];
        let mut seen = vec![vec![false; arch.layout.entries.len()]; GROUPS.len()];
        for (e, vals) in tensors {
            let (group, name) = e
                .name
                .split_once('/')
                .ok_or_else(|| Error::format(&path, format!("unknown tensor {}", e.name)))?;
            let g = GROUPS
                .iter()
                .position(|x| *x == group)
                .ok_or_else(|| Error::format(&path, format!("unknown tensor group {group}")))?;
            let idx = arch
                .layout
                .entries
                .iter()
                .position(|s| s.name == name)
                .ok_or_else(|| Error::State(format!("checkpoint tensor {name} is not part of the model")))?;
            let spec = &arch.layout.entries[idx];
            if spec.shape != e.shape {
                return Err(Error::State(format!(
                    "tensor {name} has shape {:?}, model expects {:?}",
                    e.shape, spec.shape
                )));
            }
            bufs[g][spec.slot.range()].copy_from_slice(&vals);
            seen[g][idx] = true;
        }
        if let Some((g, _)) = seen.iter().enumerate().find(|(_, s)| s.iter().any(|x| !x)) {
            return Err(Error::State(format!("checkpoint lacks some {} tensors", GROUPS[g])));
        }
        let t = meta.step;
        let v = bufs.pop().expect("4");
        let m = bufs.pop().expect("3");
        let ema = bufs.pop().expect("2");
        let params = bufs.pop().expect("1");
        Ok(Checkpoint {
            meta,
            params,
            ema,
            opt: AdamW { m, v, t },
        })
    }
}

/// Checkpoint directories under `run`, sorted by step.
pub fn list_checkpoints(run: &Path) -> Result<Vec<(u64, PathBuf)>> {
    let mut out = Vec::new();
    let rd = match fs::read_dir(run) {
        Ok(rd) => rd,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(out),
        Err(e) => return Err(Error::io(run, e)),
    };
    for entry in rd {
        let entry = entry.map_err(|e| Error::io(run, e))?;
        let name = entry.file_name();
        if let Some(step) = name.to_str().and_then(|n| n.strip_prefix("ckpt_")).and_then(|s| s.parse().ok()) {
            out.push((step, entry.path()));
        }
    }
    out.sort();
    Ok(out)
}

/// Deletes all checkpoints except the newest `keep_last` and the one with
/// the lowest smoothed loss.
pub fn prune_checkpoints(run: &Path, keep_last: usize) -> Result<()> {
    let all = list_checkpoints(run)?;
    if all.len() <= keep_last {
        return Ok(());
    }
    let best = all
        .iter()
        .filter_map(|(s, p)| Checkpoint::read_meta(p).ok().map(|m| (m.smoothed_loss, *s)))
        .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)))
        .map(|(_, s)| s);
    let cut = all.len() - keep_last;
    for (step, path) in &all[..cut] {
        if Some(*step) != best {
            fs::remove_dir_all(path).map_err(|e| Error::io(path, e))?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.bin");
        let a = [1.0f32, -2.5, 3.25, 0.0, 7.0, 8.0];
        let b = [9.0f32];
        write_tensors(&p, &[("a/w".into(), vec![2, 3], &a[..]), ("b".into(), vec![1], &b[..])]).unwrap();
        let idx = read_index(&p).unwrap();
        assert_eq!(idx[0].shape, vec![2, 3]);
        assert_eq!(idx[1].offset, 24);
        let back = read_tensors::<f32>(&p).unwrap();
        assert_eq!(back[0].1, a.to_vec());
        assert_eq!(back[1].1, b.to_vec());
        assert!(read_tensors::<f64>(&p).is_err());
        let bad = [0.0f32; 5];
        assert!(write_tensors(&p, &[("x".into(), vec![2, 3], &bad[..])]).is_err());
    }

    #[test]
    fn truncated_file_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.bin");
        fs::write(&p, 100u64.to_le_bytes()).unwrap();
        assert!(matches!(read_tensors::<f32>(&p), Err(Error::Format { .. })));
    }
}
