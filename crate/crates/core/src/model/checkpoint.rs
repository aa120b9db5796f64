//! Checkpoint container.
//!
//! ```text
//! magic      "D3CK"
//! u32        format version (1)
//! u64        spec hash (first 8 bytes of SHA-256 of the spec text)
//! u64        seed
//! u32        completed epochs
//! u32        flags (bit 0: final checkpoint, bit 1: optimizer state present)
//! u64        optimizer step
//! u32 + [u8] network spec as key = value text
//! u32        entry count
//! entries:   u16 kind, u32 + [u8] name, u32 rank, u64 x rank dims, u64 byte offset
//! u64        payload length in bytes
//! payload:   little-endian f32, entries back to back in manifest order
//! ```
//!
//! Entry kinds: 0 learnable, 1 buffer, 2 Adam first moment, 3 Adam second moment.

use std::collections::BTreeMap;
use std::path::Path;

use super::{Model, NetworkSpec};
use crate::binio::{put_f32s, put_u16, put_u32, put_u64, Reader};
use crate::error::{Error, Result};
use crate::params::Parameters;
use crate::tensor::Tensor;
use crate::train::AdamState;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"D3CK";
pub const CHECKPOINT_VERSION: u32 = 1;

const FLAG_FINAL: u32 = 1;
const FLAG_OPTIMIZER: u32 = 2;

/// Upper bound on any single tensor, a guard against corrupt manifests.
const MAX_ELEMENTS: u64 = 1 << 32;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub seed: u64,
    pub epoch: u32,
    pub is_final: bool,
    pub optimizer: Option<AdamState>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let spec_text = self.model.spec.to_text();
        let mut entries: Vec<(u16, &str, &Tensor)> = Vec::new();
        for (k, v) in self.model.params.learnable() {
            entries.push((0, k, v));
        }
        for (k, v) in self.model.params.buffers() {
            entries.push((1, k, v));
        }
        if let Some(adam) = &self.optimizer {
            entries.extend(adam.first.iter().map(|(k, v)| (2, k.as_str(), v)));
            entries.extend(adam.second.iter().map(|(k, v)| (3, k.as_str(), v)));
        }

        let mut out = Vec::new();
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        put_u32(&mut out, CHECKPOINT_VERSION);
        put_u64(&mut out, self.model.spec.hash64());
        put_u64(&mut out, self.seed);
        put_u32(&mut out, self.epoch);
        let mut flags = 0;
        if self.is_final {
            flags |= FLAG_FINAL;
        }
        if self.optimizer.is_some() {
            flags |= FLAG_OPTIMIZER;
        }
        put_u32(&mut out, flags);
        put_u64(&mut out, self.optimizer.as_ref().map_or(0, |a| a.step));
        put_u32(&mut out, spec_text.len() as u32);
        out.extend_from_slice(spec_text.as_bytes());
        put_u32(&mut out, entries.len() as u32);
        let mut offset = 0u64;
        for (kind, name, t) in &entries {
            put_u16(&mut out, *kind);
            put_u32(&mut out, name.len() as u32);
            out.extend_from_slice(name.as_bytes());
            put_u32(&mut out, t.shape().len() as u32);
            for &d in t.shape() {
                put_u64(&mut out, d as u64);
            }
            put_u64(&mut out, offset);
            offset += 4 * t.len() as u64;
        }
        put_u64(&mut out, offset);
        for (_, _, t) in &entries {
            put_f32s(&mut out, t.data());
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader::new(buf);
        let magic = r.array::<4>()?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::BadMagic {
                expected: CHECKPOINT_MAGIC,
                found: magic,
            });
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::VersionMismatch {
                expected: CHECKPOINT_VERSION,
                found: version,
            });
        }
        let hash = r.u64()?;
        let seed = r.u64()?;
        let epoch = r.u32()?;
        let flags = r.u32()?;
        if flags & !(FLAG_FINAL | FLAG_OPTIMIZER) != 0 {
            return Err(Error::CorruptCheckpoint(format!("unknown flags {flags:#x}")));
        }
        let step = r.u64()?;
        let spec_len = r.u32()? as usize;
        let spec_text = std::str::from_utf8(r.bytes(spec_len)?)
            .map_err(|_| Error::CorruptCheckpoint("spec text is not UTF-8".into()))?;
        let spec =
            NetworkSpec::from_text(spec_text).map_err(|e| Error::CorruptCheckpoint(format!("spec text: {e}")))?;
        if spec.hash64() != hash {
            return Err(Error::CorruptCheckpoint(format!(
                "spec hash {hash:#018x} does not match spec text ({:#018x})",
                spec.hash64()
            )));
        }

        let n = r.u32()? as usize;
        let mut manifest = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            let kind = r.u16()?;
            if kind > 3 {
                return Err(Error::CorruptCheckpoint(format!("unknown entry kind {kind}")));
            }
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.bytes(name_len)?)
                .map_err(|_| Error::CorruptCheckpoint("entry name is not UTF-8".into()))?
                .to_string();
            let rank = r.u32()? as usize;
            if rank == 0 || rank > 8 {
                return Err(Error::CorruptCheckpoint(format!("{name}: rank {rank}")));
            }
            let mut dims = Vec::with_capacity(rank);
            let mut elems = 1u64;
            for _ in 0..rank {
                let d = r.u64()?;
                elems = elems
                    .checked_mul(d)
                    .filter(|&e| e <= MAX_ELEMENTS)
                    .ok_or_else(|| Error::ExtentOverflow(format!("{name}: dims overflow")))?;
                dims.push(d as usize);
            }
            let offset = r.u64()?;
            manifest.push((kind, name, dims, offset, elems));
        }
        let payload_len = r.u64()?;
        let payload_start = r.position() as u64;
        let available = buf.len() as u64 - payload_start;
        if payload_len > available {
            return Err(Error::Truncated {
                needed: payload_start + payload_len,
                available: buf.len() as u64,
            });
        }
        if payload_len < available {
            return Err(Error::CorruptCheckpoint(format!(
                "{} trailing bytes after payload",
                available - payload_len
            )));
        }

        let mut params = Parameters::new();
        let mut first = BTreeMap::new();
        let mut second = BTreeMap::new();
        let mut expect = 0u64;
        for (kind, name, dims, offset, elems) in manifest {
            if offset != expect {
                return Err(Error::CorruptCheckpoint(format!(
                    "{name}: offset {offset}, expected {expect}"
                )));
            }
            expect += 4 * elems;
            if expect > payload_len {
                return Err(Error::Truncated {
                    needed: payload_start + expect,
                    available: buf.len() as u64,
                });
            }
            let start = (payload_start + offset) as usize;
            let mut pr = Reader::new(&buf[start..]);
            let t = Tensor::from_vec(&dims, pr.f32s(elems as usize)?)
                .map_err(|e| Error::CorruptCheckpoint(format!("{name}: {e}")))?;
            match kind {
                0 | 1 => params
                    .insert(&name, t, kind == 1)
                    .map_err(|e| Error::CorruptCheckpoint(e.to_string()))?,
                2 => {
                    first.insert(name, t);
                }
                _ => {
                    second.insert(name, t);
                }
            }
        }
        if expect != payload_len {
            return Err(Error::CorruptCheckpoint(
                "payload length disagrees with manifest".into(),
            ));
        }
        let model = Model::from_parts(spec, params)?;
        let optimizer = if flags & FLAG_OPTIMIZER != 0 {
            let adam = AdamState { step, first, second };
            adam.check_against(&model.params)?;
            Some(adam)
        } else {
            None
        };
        Ok(Checkpoint {
            model,
            seed,
            epoch,
            is_final: flags & FLAG_FINAL != 0,
            optimizer,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&buf)
    }
}
