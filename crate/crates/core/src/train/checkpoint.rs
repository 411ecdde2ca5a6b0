//! Checkpoints and the named-tensor container they share with feature caches.
//!
//! Layout (little-endian):
//!
//! ```text
//! "DIChkpt1"  u32 version  u32 epoch  u32 n
//! n × (u16 name_len, name, u8 rank, rank × u32 extent, f32 payload)
//! u32 m   m × tensor           optimizer moments, "adam.m.<param>" / "adam.v.<param>"
//! u64 adam_step
//! u32 blob_len  blob           generator state
//! ```

use std::path::Path;

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use crate::data::write_atomic;
use crate::error::{Error, Result};
use crate::model::Architecture;
use crate::optim::{AdamConfig, AdamState};
use crate::params::{is_trainable, ParamSet};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"DIChkpt1";
pub const VERSION: u32 = 1;
const RNG_BLOB_LEN: usize = 32 + 8 + 16;

/// Everything needed to continue or reproduce a run.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    /// Completed epochs.
    pub epoch: u32,
    pub params: ParamSet<f32>,
    pub adam: AdamState<f32>,
    pub rng: ChaCha8Rng,
}

impl Checkpoint {
    /// Bitwise equality of every stored field.
    pub fn bitwise_eq(&self, other: &Self) -> bool {
        self.epoch == other.epoch
            && self.params.bitwise_eq(&other.params)
            && self.adam.m.bitwise_eq(&other.adam.m)
            && self.adam.v.bitwise_eq(&other.adam.v)
            && self.adam.t == other.adam.t
            && self.rng == other.rng
    }
}

pub fn rng_to_bytes(rng: &ChaCha8Rng) -> Vec<u8> {
    let mut out = Vec::with_capacity(RNG_BLOB_LEN);
    out.extend_from_slice(&rng.get_seed());
    out.extend_from_slice(&rng.get_stream().to_le_bytes());
    out.extend_from_slice(&rng.get_word_pos().to_le_bytes());
    out
}

pub fn rng_from_bytes(b: &[u8]) -> Option<ChaCha8Rng> {
    if b.len() != RNG_BLOB_LEN {
        return None;
    }
    let mut rng = ChaCha8Rng::from_seed(b[..32].try_into().ok()?);
    rng.set_stream(u64::from_le_bytes(b[32..40].try_into().ok()?));
    rng.set_word_pos(u128::from_le_bytes(b[40..56].try_into().ok()?));
    Some(rng)
}

/// Raw contents of a container file.
#[derive(Debug, Clone)]
pub struct Container {
    pub epoch: u32,
    pub tensors: ParamSet<f32>,
    pub optimizer: ParamSet<f32>,
    pub step: u64,
    pub blob: Vec<u8>,
}

fn put_tensors(out: &mut Vec<u8>, set: &ParamSet<f32>) -> Result<()> {
    out.extend_from_slice(&(set.len() as u32).to_le_bytes());
    for (name, t) in set.iter() {
        let name_len = u16::try_from(name.len()).map_err(|_| Error::invalid(format!("tensor name too long: {name}")))?;
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.rank() as u8);
        for &e in t.shape() {
            let e = u32::try_from(e).map_err(|_| Error::invalid(format!("extent of {name} exceeds u32")))?;
            out.extend_from_slice(&e.to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(())
}

pub fn encode_container(c: &Container) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&c.epoch.to_le_bytes());
    put_tensors(&mut out, &c.tensors)?;
    put_tensors(&mut out, &c.optimizer)?;
    out.extend_from_slice(&c.step.to_le_bytes());
    out.extend_from_slice(&(c.blob.len() as u32).to_le_bytes());
    out.extend_from_slice(&c.blob);
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).ok_or_else(|| Error::ExtentOverflow { path: self.path.into() })?;
        if end > self.bytes.len() {
            return Err(Error::Truncated {
                path: self.path.into(),
                expected: end as u64,
                found: self.bytes.len() as u64,
            });
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn tensors(&mut self) -> Result<ParamSet<f32>> {
        let count = self.u32()?;
        let mut set = ParamSet::new();
        for _ in 0..count {
            let len = self.u16()? as usize;
            let name = String::from_utf8(self.take(len)?.to_vec())
                .map_err(|_| Error::invalid(format!("{}: tensor name is not utf-8", self.path.display())))?;
            let rank = self.u8()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(self.u32()? as usize);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |a, &e| a.checked_mul(e))
                .and_then(|n| n.checked_mul(4))
                .ok_or_else(|| Error::ExtentOverflow { path: self.path.into() })?;
            let data = self
                .take(n)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            set.insert(name, Tensor::new(shape, data)?)?;
        }
        Ok(set)
    }
}

pub fn decode_container(bytes: &[u8], path: &Path) -> Result<Container> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::BadMagic { path: path.into() });
    }
    let mut r = Reader {
        bytes,
        pos: MAGIC.len(),
        path,
    };
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::VersionMismatch {
            path: path.into(),
            expected: VERSION,
            found: version,
        });
    }
    let epoch = r.u32()?;
    let tensors = r.tensors()?;
    let optimizer = r.tensors()?;
    let step = r.u64()?;
    let blob_len = r.u32()? as usize;
    let blob = r.take(blob_len)?.to_vec();
    if r.pos != bytes.len() {
        return Err(Error::Truncated {
            path: path.into(),
            expected: r.pos as u64,
            found: bytes.len() as u64,
        });
    }
    Ok(Container {
        epoch,
        tensors,
        optimizer,
        step,
        blob,
    })
}

pub fn read_container(path: &Path) -> Result<Container> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_container(&bytes, path)
}

pub fn write_container(path: &Path, c: &Container) -> Result<()> {
    write_atomic(path, &encode_container(c)?)
}

pub fn encode_checkpoint(ck: &Checkpoint) -> Result<Vec<u8>> {
    let mut optimizer = ParamSet::new();
    for (n, t) in ck.adam.m.iter() {
        optimizer.insert(format!("adam.m.{n}"), t.clone())?;
    }
    for (n, t) in ck.adam.v.iter() {
        optimizer.insert(format!("adam.v.{n}"), t.clone())?;
    }
    encode_container(&Container {
        epoch: ck.epoch,
        tensors: ck.params.clone(),
        optimizer,
        step: ck.adam.t,
        blob: rng_to_bytes(&ck.rng),
    })
}

/// Decodes and validates a checkpoint. With `arch` given, the parameters
/// must match its manifest; otherwise the architecture is detected. Returns
/// the checkpoint and the architecture it belongs to.
pub fn decode_checkpoint(bytes: &[u8], path: &Path, arch: Option<&Architecture>) -> Result<(Checkpoint, Architecture)> {
    let c = decode_container(bytes, path)?;
    let arch = match arch {
        Some(a) => {
            a.validate(&c.tensors)?;
            a.clone()
        }
        None => Architecture::detect(&c.tensors)?,
    };
    let mut adam = AdamState::new(&c.tensors, AdamConfig::default());
    let expected = 2 * adam.m.len();
    if c.optimizer.len() != expected {
        return Err(Error::ManifestMismatch(format!(
            "expected {expected} optimizer tensors, found {}",
            c.optimizer.len()
        )));
    }
    for (prefix, set) in [("adam.m.", &mut adam.m), ("adam.v.", &mut adam.v)] {
        let names: Vec<String> = set.names().map(str::to_string).collect();
        for n in names {
            let t = c.optimizer.get(&format!("{prefix}{n}"))?;
            let slot = set.get_mut(&n)?;
            if t.shape() != slot.shape() {
                return Err(Error::ManifestMismatch(format!("{prefix}{n} has shape {:?}", t.shape())));
            }
            *slot = t.clone();
        }
    }
    adam.t = c.step;
    let rng = rng_from_bytes(&c.blob)
        .ok_or_else(|| Error::ManifestMismatch(format!("generator state of {} bytes", c.blob.len())))?;
    debug_assert!(c.tensors.names().filter(|n| is_trainable(n)).count() == adam.m.len());
    Ok((
        Checkpoint {
            epoch: c.epoch,
            params: c.tensors,
            adam,
            rng,
        },
        arch,
    ))
}

pub fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<()> {
    write_atomic(path, &encode_checkpoint(ck)?)
}

pub fn load_checkpoint(path: &Path, arch: Option<&Architecture>) -> Result<(Checkpoint, Architecture)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, path, arch)
}
