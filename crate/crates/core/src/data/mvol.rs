//! MVOL container (little-endian).
//!
//! ```text
//! magic    "MVOL"
//! u32      version word: format version 1; bit 31 set marks a labels-only file
//! u32 x 3  D, H, W
//! f32 x 3  voxel spacing
//! f32      FLAIR, T1, T1-CE, T2 grids, row-major [D, H, W] (absent when labels-only)
//! u8       label grid over {0, 1, 2, 4}
//! ```

use std::path::Path;

use super::{check_labels, voxel_count, LabelMap, Volume};
use crate::binio::{put_f32s, put_u32, Reader};
use crate::error::{Error, Result};

pub const MVOL_MAGIC: [u8; 4] = *b"MVOL";
pub const MVOL_VERSION: u32 = 1;
pub const LABELS_ONLY_FLAG: u32 = 1 << 31;

/// Largest voxel count accepted from a file header.
const MAX_VOXELS: usize = 1 << 31;

fn header(out: &mut Vec<u8>, version: u32, extents: [usize; 3], spacing: [f32; 3]) {
    out.extend_from_slice(&MVOL_MAGIC);
    put_u32(out, version);
    for e in extents {
        put_u32(out, e as u32);
    }
    put_f32s(out, &spacing);
}

pub fn volume_to_bytes(v: &Volume) -> Vec<u8> {
    let mut out = Vec::with_capacity(32 + 17 * v.voxels());
    header(&mut out, MVOL_VERSION, v.extents, v.spacing);
    for grid in &v.modalities {
        put_f32s(&mut out, grid);
    }
    out.extend_from_slice(&v.labels);
    out
}

pub fn labels_to_bytes(m: &LabelMap) -> Vec<u8> {
    let mut out = Vec::with_capacity(32 + m.labels.len());
    header(&mut out, MVOL_VERSION | LABELS_ONLY_FLAG, m.extents, m.spacing);
    out.extend_from_slice(&m.labels);
    out
}

enum Parsed {
    Full(Volume),
    Labels(LabelMap),
}

fn parse(buf: &[u8]) -> Result<Parsed> {
    let mut r = Reader::new(buf);
    let magic = r.array::<4>()?;
    if magic != MVOL_MAGIC {
        return Err(Error::BadMagic {
            expected: MVOL_MAGIC,
            found: magic,
        });
    }
    let word = r.u32()?;
    let labels_only = word & LABELS_ONLY_FLAG != 0;
    let version = word & !LABELS_ONLY_FLAG;
    if version != MVOL_VERSION {
        return Err(Error::VersionMismatch {
            expected: MVOL_VERSION,
            found: version,
        });
    }
    let extents = [r.u32()? as usize, r.u32()? as usize, r.u32()? as usize];
    let spacing = [r.f32()?, r.f32()?, r.f32()?];
    let n = voxel_count(extents)?;
    if n > MAX_VOXELS {
        return Err(Error::ExtentOverflow(format!(
            "{extents:?} exceeds {MAX_VOXELS} voxels"
        )));
    }
    let grids = if labels_only { 0 } else { 4 };
    let needed = (r.position() + n * (4 * grids + 1)) as u64;
    if (buf.len() as u64) < needed {
        return Err(Error::Truncated {
            needed,
            available: buf.len() as u64,
        });
    }
    if (buf.len() as u64) > needed {
        return Err(Error::invalid(format!(
            "MVOL has {} trailing bytes",
            buf.len() as u64 - needed
        )));
    }
    let mut modalities: [Vec<f32>; 4] = Default::default();
    for grid in modalities.iter_mut().take(grids) {
        *grid = r.f32s(n)?;
    }
    let labels = r.bytes(n)?.to_vec();
    check_labels(&labels)?;
    Ok(if labels_only {
        Parsed::Labels(LabelMap {
            extents,
            spacing,
            labels,
        })
    } else {
        Parsed::Full(Volume {
            extents,
            spacing,
            modalities,
            labels,
        })
    })
}

pub fn volume_from_bytes(buf: &[u8]) -> Result<Volume> {
    match parse(buf)? {
        Parsed::Full(v) => Ok(v),
        Parsed::Labels(_) => Err(Error::invalid("MVOL is labels-only; expected modality grids")),
    }
}

/// Label grid of either a full or a labels-only MVOL.
pub fn labels_from_bytes(buf: &[u8]) -> Result<LabelMap> {
    match parse(buf)? {
        Parsed::Full(v) => Ok(v.label_map()),
        Parsed::Labels(m) => Ok(m),
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_volume(path: &Path) -> Result<Volume> {
    volume_from_bytes(&read_file(path)?).map_err(|e| e.context(path.display().to_string()))
}

pub fn write_volume(path: &Path, v: &Volume) -> Result<()> {
    write_file(path, &volume_to_bytes(v))
}

pub fn read_labels(path: &Path) -> Result<LabelMap> {
    labels_from_bytes(&read_file(path)?).map_err(|e| e.context(path.display().to_string()))
}

pub fn write_labels(path: &Path, m: &LabelMap) -> Result<()> {
    write_file(path, &labels_to_bytes(m))
}
