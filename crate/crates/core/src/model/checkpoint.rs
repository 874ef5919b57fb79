//! Binary checkpoint container.
//!
//! Layout (little-endian): magic `MPAE`, u32 version, u32 tensor count, then
//! per tensor a u16 name length, the UTF-8 name, a u8 rank, `rank` u64
//! extents and the f32 values; a CRC32 of everything before it closes the
//! file. Metadata travels as the bytes of a rank-1 tensor named `__meta__`.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use super::{param_specs, Model, ModelConfig, Param};
use crate::error::{Error, Result};
use crate::tensor::{Tensor, MAX_RANK};

pub const MAGIC: [u8; 4] = *b"MPAE";
pub const VERSION: u32 = 1;
pub const META_NAME: &str = "__meta__";
const WHAT: &str = "checkpoint";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Pretrained,
    Finetuned,
    Teacher,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Pretrained => "pretrained",
            Phase::Finetuned => "finetuned",
            Phase::Teacher => "teacher",
        })
    }
}

impl FromStr for Phase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pretrained" => Ok(Phase::Pretrained),
            "finetuned" => Ok(Phase::Finetuned),
            "teacher" => Ok(Phase::Teacher),
            _ => Err(Error::Config(format!("unknown phase {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CheckpointMeta {
    pub phase: Phase,
    pub seed: u64,
    pub epoch: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LoadMode {
    /// Every tensor must be present.
    Full,
    /// Only `encoder.*` tensors are taken; the decoder is freshly initialized.
    EncoderOnly,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub meta: CheckpointMeta,
    pub tensors: Vec<(String, Tensor)>,
}

fn meta_text(config: &ModelConfig, meta: &CheckpointMeta) -> String {
    let mut s = format!("phase={}\nseed={}\nepoch={}\n", meta.phase, meta.seed, meta.epoch);
    for (k, v) in config.to_pairs() {
        s.push_str(&format!("model.{k}={v}\n"));
    }
    s
}

fn parse_meta(text: &str) -> Result<(ModelConfig, CheckpointMeta)> {
    let corrupt = |detail: String| Error::Corrupt { what: WHAT, detail };
    let mut config = ModelConfig::default();
    let (mut phase, mut seed, mut epoch) = (None, None, None);
    for line in text.lines().filter(|l| !l.is_empty()) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| corrupt(format!("metadata line {line:?}")))?;
        match k {
            "phase" => phase = Some(v.parse()?),
            "seed" => seed = Some(v.parse().map_err(|_| corrupt(format!("seed {v:?}")))?),
            "epoch" => epoch = Some(v.parse().map_err(|_| corrupt(format!("epoch {v:?}")))?),
            _ => match k.strip_prefix("model.") {
                Some(key) => config.set(key, v)?,
                None => return Err(corrupt(format!("unknown metadata key {k:?}"))),
            },
        }
    }
    match (phase, seed, epoch) {
        (Some(phase), Some(seed), Some(epoch)) => Ok((config, CheckpointMeta { phase, seed, epoch })),
        _ => Err(corrupt("metadata lacks phase, seed or epoch".into())),
    }
}

fn put_tensor(buf: &mut Vec<u8>, name: &str, shape: &[usize], values: impl Iterator<Item = f32>) {
    buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
    buf.extend_from_slice(name.as_bytes());
    buf.push(shape.len() as u8);
    for &e in shape {
        buf.extend_from_slice(&(e as u64).to_le_bytes());
    }
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

/// Serializes a model. Values are stored as f32, so a loaded model holds
/// the f32-rounded parameters.
pub fn encode_checkpoint(model: &Model, meta: &CheckpointMeta) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(&MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(model.params().len() as u32 + 1).to_le_bytes());
    let text = meta_text(model.config(), meta);
    put_tensor(&mut buf, META_NAME, &[text.len()], text.bytes().map(f32::from));
    for p in model.params() {
        put_tensor(&mut buf, &p.name, p.value.shape(), p.value.data().iter().map(|&v| v as f32));
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    buf
}

pub fn save_checkpoint(model: &Model, meta: &CheckpointMeta, path: &Path) -> Result<()> {
    std::fs::write(path, encode_checkpoint(model, meta))?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, field: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Truncated {
                what: WHAT,
                detail: format!("{field} needs {n} bytes at offset {}", self.pos),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, field: &str) -> Result<u8> {
        Ok(self.take(1, field)?[0])
    }

    fn u16(&mut self, field: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, field)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, field: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, field)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, field: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, field)?.try_into().expect("8 bytes")))
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}

impl Checkpoint {
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupt = |detail: String| Error::Corrupt { what: WHAT, detail };
        let mut cur = Cursor { bytes, pos: 0 };
        let magic = cur.take(4, "magic")?;
        if magic != MAGIC {
            return Err(Error::BadMagic {
                what: WHAT,
                expected: MAGIC,
                found: magic.to_vec(),
            });
        }
        let version = cur.u32("version")?;
        if version != VERSION {
            return Err(Error::UnsupportedVersion { what: WHAT, version });
        }
        if bytes.len() < 12 + 4 {
            return Err(Error::Truncated {
                what: WHAT,
                detail: "missing footer".into(),
            });
        }
        let body = &bytes[..bytes.len() - 4];
        let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().expect("4 bytes"));
        let count = cur.u32("tensor count")? as usize;
        cur.bytes = body;

        let mut meta = None;
        let mut tensors = Vec::with_capacity(count.min(4096));
        for i in 0..count {
            let len = cur.u16("name length")? as usize;
            let name = std::str::from_utf8(cur.take(len, "name")?)
                .map_err(|_| corrupt(format!("tensor {i} name is not UTF-8")))?
                .to_string();
            let rank = cur.u8("rank")? as usize;
            if rank == 0 || rank > MAX_RANK {
                return Err(corrupt(format!("tensor {name:?} has rank {rank}")));
            }
            let mut shape = Vec::with_capacity(rank);
            let mut n: usize = 1;
            for _ in 0..rank {
                let e = usize::try_from(cur.u64("extent")?)
                    .map_err(|_| corrupt(format!("tensor {name:?} extent overflows")))?;
                n = n
                    .checked_mul(e)
                    .filter(|&n| n <= cur.remaining() / 4)
                    .ok_or_else(|| Error::Truncated {
                        what: WHAT,
                        detail: format!("tensor {name:?} extends past the end of the file"),
                    })?;
                shape.push(e);
            }
            let raw = cur.take(4 * n, "values")?;
            let data: Vec<f64> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect();
            if name == META_NAME {
                let text: Vec<u8> = data
                    .iter()
                    .map(|&v| if (0.0..=255.0).contains(&v) && v.fract() == 0.0 { Ok(v as u8) } else { Err(()) })
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| corrupt("metadata holds non-byte values".into()))?;
                let text = String::from_utf8(text).map_err(|_| corrupt("metadata is not UTF-8".into()))?;
                meta = Some(parse_meta(&text)?);
            } else {
                tensors.push((name, Tensor::new(shape, data).map_err(|e| corrupt(e.to_string()))?));
            }
        }
        if cur.remaining() != 0 {
            return Err(corrupt(format!("{} trailing bytes", cur.remaining())));
        }
        let crc = crc32fast::hash(body);
        if crc != stored {
            return Err(corrupt(format!("crc {crc:08x} != stored {stored:08x}")));
        }
        let (config, meta) = meta.ok_or_else(|| corrupt("no metadata tensor".into()))?;
        Ok(Self { config, meta, tensors })
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Builds a model. `init_seed` seeds the parameters not taken from the
    /// file (the decoder under [`LoadMode::EncoderOnly`]).
    pub fn into_model(self, mode: LoadMode, init_seed: u64) -> Result<Model> {
        self.config.validate()?;
        let expected = param_specs(&self.config);
        let known: std::collections::HashSet<&str> = expected.iter().map(|(n, _, _)| n.as_str()).collect();
        if let Some((n, _)) = self.tensors.iter().find(|(n, _)| !known.contains(n.as_str())) {
            return Err(Error::Corrupt {
                what: WHAT,
                detail: format!("unexpected tensor {n:?}"),
            });
        }
        let mut model = Model::new(self.config.clone(), init_seed)?;
        let mut params: Vec<Param> = model.params.drain(..).collect();
        for p in &mut params {
            if mode == LoadMode::EncoderOnly && !p.name.starts_with("encoder.") {
                continue;
            }
            let t = self.tensor(&p.name).ok_or_else(|| Error::Corrupt {
                what: WHAT,
                detail: format!("missing tensor {:?}", p.name),
            })?;
            if t.shape() != p.value.shape() {
                return Err(Error::shape("load_checkpoint", p.value.shape(), t.shape()));
            }
            p.value = t.clone();
        }
        Ok(Model::assemble(self.config, params))
    }
}

pub fn load_checkpoint(path: &Path, mode: LoadMode, init_seed: u64) -> Result<(Model, CheckpointMeta)> {
    let ckpt = Checkpoint::read(path)?;
    let meta = ckpt.meta;
    Ok((ckpt.into_model(mode, init_seed)?, meta))
}
