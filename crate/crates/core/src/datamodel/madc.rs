//! The `MADC` tensor container and the checkpoint layered on top of it.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "MADC" | version u32 = 1 | count u32
//! per tensor, in lexicographic name order:
//!   name_len u32 | name (UTF-8) | ndim u32 | dims u64 x ndim | payload f32 x prod(dims)
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const MADC_MAGIC: &[u8; 4] = b"MADC";
pub const MADC_VERSION: u32 = 1;

const DIGEST_KEY: &str = "meta.digest";
const EPOCH_KEY: &str = "meta.epoch";
const OPTIM_PREFIX: &str = "optim.";

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub dims: Vec<u64>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(dims: Vec<u64>, data: Vec<f32>) -> Result<Self> {
        let n = numel(&dims)?;
        if n != data.len() {
            return Err(Error::Contract(format!(
                "tensor dims {dims:?} hold {n} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { dims, data })
    }

    pub fn scalar(v: f32) -> Self {
        Tensor {
            dims: vec![1],
            data: vec![v],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Bitwise equality, so NaN payloads and signed zeros compare exactly.
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.dims == other.dims
            && self.data.len() == other.data.len()
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

fn numel(dims: &[u64]) -> Result<usize> {
    dims.iter().try_fold(1usize, |acc, &d| {
        usize::try_from(d)
            .ok()
            .and_then(|d| acc.checked_mul(d))
            .ok_or_else(|| Error::Capacity(format!("tensor dims {dims:?} overflow")))
    })
}

pub fn encode_tensors(tensors: &BTreeMap<String, Tensor>) -> Result<Vec<u8>> {
    let count = u32::try_from(tensors.len())
        .map_err(|_| Error::Capacity(format!("{} tensors", tensors.len())))?;
    let mut out = Vec::new();
    out.extend_from_slice(MADC_MAGIC);
    out.extend_from_slice(&MADC_VERSION.to_le_bytes());
    out.extend_from_slice(&count.to_le_bytes());
    for (name, t) in tensors {
        let name_len = u32::try_from(name.len())
            .map_err(|_| Error::Capacity(format!("tensor name of {} bytes", name.len())))?;
        let ndim = u32::try_from(t.dims.len())
            .map_err(|_| Error::Capacity(format!("{} dims", t.dims.len())))?;
        if numel(&t.dims)? != t.data.len() {
            return Err(Error::Contract(format!("tensor {name} dims disagree with payload")));
        }
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&ndim.to_le_bytes());
        for d in &t.dims {
            out.extend_from_slice(&d.to_le_bytes());
        }
        for v in &t.data {
            out.extend_from_slice(&v.to_bits().to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| {
                Error::format(
                    self.pos,
                    format!(
                        "truncated {what}: need {n} bytes, {} left",
                        self.bytes.len() - self.pos
                    ),
                )
            })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn decode_tensors(bytes: &[u8]) -> Result<BTreeMap<String, Tensor>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MADC_MAGIC {
        return Err(Error::format(0, "bad magic (expected MADC)"));
    }
    let version = r.u32("version")?;
    if version != MADC_VERSION {
        return Err(Error::format(4, format!("unsupported version {version}")));
    }
    let count = r.u32("tensor count")?;
    let mut out = BTreeMap::new();
    for _ in 0..count {
        let name_at = r.pos;
        let name_len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "name")?)
            .map_err(|_| Error::format(name_at + 4, "tensor name is not UTF-8"))?
            .to_string();
        let ndim = r.u32("ndim")? as usize;
        let dims = (0..ndim)
            .map(|_| r.u64("dims"))
            .collect::<Result<Vec<_>>>()?;
        let n = numel(&dims)?;
        let nbytes = n
            .checked_mul(4)
            .ok_or_else(|| Error::Capacity(format!("tensor {name} payload size overflows")))?;
        let data = r
            .take(nbytes, "payload")?
            .chunks_exact(4)
            .map(|c| f32::from_bits(u32::from_le_bytes(c.try_into().unwrap())))
            .collect();
        if out.insert(name.clone(), Tensor { dims, data }).is_some() {
            return Err(Error::format(name_at, format!("duplicate tensor {name}")));
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::format(r.pos, "trailing bytes after last tensor"));
    }
    Ok(out)
}

pub fn write_tensors(tensors: &BTreeMap<String, Tensor>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_tensors(tensors)?).map_err(|e| Error::io(path, e))
}

pub fn read_tensors(path: impl AsRef<Path>) -> Result<BTreeMap<String, Tensor>> {
    let path = path.as_ref();
    decode_tensors(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

/// Model parameters plus optimizer state and provenance.
///
/// On disk, optimizer tensors live under `optim.*`, the 32-byte config
/// digest under `meta.digest` (one byte per element) and the epoch counter
/// under `meta.epoch` as two bit-cast u32 halves.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct Checkpoint {
    pub params: BTreeMap<String, Tensor>,
    pub optim: BTreeMap<String, Tensor>,
    pub config_digest: [u8; 32],
    pub epoch: u64,
}

impl Checkpoint {
    pub fn to_tensors(&self) -> BTreeMap<String, Tensor> {
        let mut out = self.params.clone();
        for (k, v) in &self.optim {
            out.insert(format!("{OPTIM_PREFIX}{k}"), v.clone());
        }
        out.insert(
            DIGEST_KEY.into(),
            Tensor {
                dims: vec![32],
                data: self.config_digest.iter().map(|&b| b as f32).collect(),
            },
        );
        out.insert(
            EPOCH_KEY.into(),
            Tensor {
                dims: vec![2],
                data: vec![
                    f32::from_bits((self.epoch >> 32) as u32),
                    f32::from_bits(self.epoch as u32),
                ],
            },
        );
        out
    }

    pub fn from_tensors(mut tensors: BTreeMap<String, Tensor>) -> Result<Self> {
        let digest = tensors
            .remove(DIGEST_KEY)
            .ok_or_else(|| Error::format(0, "checkpoint lacks meta.digest"))?;
        let epoch = tensors
            .remove(EPOCH_KEY)
            .ok_or_else(|| Error::format(0, "checkpoint lacks meta.epoch"))?;
        if digest.data.len() != 32 || epoch.data.len() != 2 {
            return Err(Error::format(0, "malformed checkpoint metadata"));
        }
        let mut config_digest = [0u8; 32];
        for (d, v) in config_digest.iter_mut().zip(&digest.data) {
            *d = *v as u8;
        }
        let epoch = ((epoch.data[0].to_bits() as u64) << 32) | epoch.data[1].to_bits() as u64;
        let mut params = BTreeMap::new();
        let mut optim = BTreeMap::new();
        for (k, v) in tensors {
            match k.strip_prefix(OPTIM_PREFIX) {
                Some(rest) => {
                    optim.insert(rest.to_string(), v);
                }
                None => {
                    params.insert(k, v);
                }
            }
        }
        Ok(Checkpoint {
            params,
            optim,
            config_digest,
            epoch,
        })
    }

    pub fn bit_eq(&self, other: &Checkpoint) -> bool {
        fn maps_eq(a: &BTreeMap<String, Tensor>, b: &BTreeMap<String, Tensor>) -> bool {
            a.len() == b.len() && a.iter().zip(b).all(|((ka, ta), (kb, tb))| ka == kb && ta.bit_eq(tb))
        }
        self.config_digest == other.config_digest
            && self.epoch == other.epoch
            && maps_eq(&self.params, &other.params)
            && maps_eq(&self.optim, &other.optim)
    }
}

pub fn write_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    write_tensors(&ckpt.to_tensors(), path)
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    Checkpoint::from_tensors(read_tensors(path)?)
}
