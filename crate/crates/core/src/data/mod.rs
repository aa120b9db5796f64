//! Multi-modal volumes, their on-disk container, normalization, patch
//! sampling and the synthetic phantom generator.

pub mod mvol;
pub mod patches;
pub mod phantom;

use crate::error::{Error, Result};

pub use mvol::{read_labels, read_volume, write_labels, write_volume};
pub use patches::{
    draw_centers, extract_batch, extract_inputs, reflect_index, sample_centers, sample_patches, PatchBatch,
    PatchCenter, PatchGeometry,
};
pub use phantom::{generate_phantom, Ellipsoid, PhantomSpec, SynthConfig, TumorSpec};

/// Modality channel order of a [`Volume`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Modality {
    Flair = 0,
    T1 = 1,
    T1ce = 2,
    T2 = 3,
}

impl Modality {
    pub const ALL: [Modality; 4] = [Modality::Flair, Modality::T1, Modality::T1ce, Modality::T2];

    pub fn name(self) -> &'static str {
        match self {
            Modality::Flair => "FLAIR",
            Modality::T1 => "T1",
            Modality::T1ce => "T1CE",
            Modality::T2 => "T2",
        }
    }
}

/// Label values used on disk: background, necrotic/non-enhancing core,
/// edema, enhancing tumor.
pub const LABELS: [u8; 4] = [0, 1, 2, 4];

/// Maps a label value to its class index `{0, 1, 2, 4} -> {0, 1, 2, 3}`.
pub fn label_to_class(label: u8) -> Option<u8> {
    match label {
        0 => Some(0),
        1 => Some(1),
        2 => Some(2),
        4 => Some(3),
        _ => None,
    }
}

/// Inverse of [`label_to_class`].
pub fn class_to_label(class: u8) -> Option<u8> {
    LABELS.get(class as usize).copied()
}

pub fn check_labels(labels: &[u8]) -> Result<()> {
    match labels.iter().position(|&l| label_to_class(l).is_none()) {
        Some(index) => Err(Error::InvalidLabel {
            value: labels[index],
            index,
        }),
        None => Ok(()),
    }
}

/// An integer label grid over `{0, 1, 2, 4}`, row-major `[D, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelMap {
    pub extents: [usize; 3],
    pub spacing: [f32; 3],
    pub labels: Vec<u8>,
}

impl LabelMap {
    pub fn new(extents: [usize; 3], labels: Vec<u8>) -> Result<Self> {
        let n = voxel_count(extents)?;
        if labels.len() != n {
            return Err(Error::invalid(format!(
                "label map {extents:?} needs {n} voxels, got {}",
                labels.len()
            )));
        }
        check_labels(&labels)?;
        Ok(LabelMap {
            extents,
            spacing: [1.0; 3],
            labels,
        })
    }
}

pub(crate) fn voxel_count(extents: [usize; 3]) -> Result<usize> {
    if extents.contains(&0) {
        return Err(Error::invalid(format!("extents must be >= 1, got {extents:?}")));
    }
    extents
        .iter()
        .try_fold(1usize, |acc, &e| acc.checked_mul(e))
        .ok_or_else(|| Error::ExtentOverflow(format!("{extents:?}")))
}

/// A four-modality scan with its label map.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    pub extents: [usize; 3],
    pub spacing: [f32; 3],
    /// FLAIR, T1, T1-CE, T2; each row-major `[D, H, W]`.
    pub modalities: [Vec<f32>; 4],
    pub labels: Vec<u8>,
}

impl Volume {
    pub fn new(extents: [usize; 3], spacing: [f32; 3], modalities: [Vec<f32>; 4], labels: Vec<u8>) -> Result<Self> {
        let n = voxel_count(extents)?;
        for (m, grid) in Modality::ALL.iter().zip(&modalities) {
            if grid.len() != n {
                return Err(Error::invalid(format!(
                    "{} grid has {} voxels, extents {extents:?} need {n}",
                    m.name(),
                    grid.len()
                )));
            }
        }
        if labels.len() != n {
            return Err(Error::invalid(format!(
                "label grid has {} voxels, extents {extents:?} need {n}",
                labels.len()
            )));
        }
        check_labels(&labels)?;
        Ok(Volume {
            extents,
            spacing,
            modalities,
            labels,
        })
    }

    pub fn voxels(&self) -> usize {
        self.labels.len()
    }

    pub fn index(&self, d: usize, h: usize, w: usize) -> usize {
        (d * self.extents[1] + h) * self.extents[2] + w
    }

    pub fn modality(&self, m: Modality) -> &[f32] {
        &self.modalities[m as usize]
    }

    pub fn lesion_voxels(&self) -> usize {
        self.labels.iter().filter(|&&l| l != 0).count()
    }

    pub fn label_map(&self) -> LabelMap {
        LabelMap {
            extents: self.extents,
            spacing: self.spacing,
            labels: self.labels.clone(),
        }
    }
}

/// Per-modality standardization over nonzero voxels: `(v - mean) / std`.
/// Zero voxels (outside the head) stay zero.
pub fn normalize(volume: &Volume) -> Result<Volume> {
    let mut out = volume.clone();
    for (m, grid) in Modality::ALL.iter().zip(out.modalities.iter_mut()) {
        let (mut n, mut sum) = (0usize, 0.0f64);
        for &v in grid.iter().filter(|&&v| v != 0.0) {
            n += 1;
            sum += v as f64;
        }
        if n == 0 {
            return Err(Error::DegenerateVolume { modality: m.name() });
        }
        let mean = sum / n as f64;
        let var = grid
            .iter()
            .filter(|&&v| v != 0.0)
            .map(|&v| (v as f64 - mean).powi(2))
            .sum::<f64>()
            / n as f64;
        let std = var.sqrt();
        if std == 0.0 || !std.is_finite() {
            return Err(Error::DegenerateVolume { modality: m.name() });
        }
        for v in grid.iter_mut().filter(|v| **v != 0.0) {
            *v = ((*v as f64 - mean) / std) as f32;
        }
    }
    Ok(out)
}
