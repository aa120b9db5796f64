//! Lesion-balanced patch sampling with reflect padding.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{label_to_class, Volume};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Input and output patch extents. The input is the output grown by the
/// network's valid-convolution margin on each side.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchGeometry {
    pub input_extent: usize,
    pub output_extent: usize,
}

impl PatchGeometry {
    pub const PROPOSED: PatchGeometry = PatchGeometry {
        input_extent: 38,
        output_extent: 12,
    };

    pub fn margin(&self) -> usize {
        (self.input_extent - self.output_extent) / 2
    }
}

/// Where a patch came from: volume index and the voxel at the center of its
/// output block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct PatchCenter {
    pub volume: usize,
    pub center: [usize; 3],
}

impl std::fmt::Display for PatchCenter {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let [d, h, w] = self.center;
        write!(f, "volume {} center ({d}, {h}, {w})", self.volume)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatchBatch {
    /// `[N, e, e, e, 2]` with channels (FLAIR, T2).
    pub inputs_ft: Tensor,
    /// `[N, e, e, e, 2]` with channels (T1, T1-CE).
    pub inputs_t1: Tensor,
    /// Class indices `0..4`, row-major `[N, o, o, o]`.
    pub labels_full: Vec<u8>,
    /// `labels_full != 0`.
    pub labels_binary: Vec<u8>,
    pub provenance: Vec<PatchCenter>,
}

impl PatchBatch {
    pub fn len(&self) -> usize {
        self.provenance.len()
    }

    pub fn is_empty(&self) -> bool {
        self.provenance.is_empty()
    }
}

/// Maps any integer coordinate onto `0..n` by mirroring about the edge
/// voxels (`-1 -> 1`, `n -> n - 2`), repeating as often as needed.
pub fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - m) as usize
    }
}

/// Valid centers keep the whole output block inside the volume.
fn center_range(n: usize, o: usize) -> std::ops::RangeInclusive<usize> {
    o / 2..=n.saturating_sub(o - o / 2)
}

/// Draws `round(count * lesion_fraction)` centers uniformly (with
/// replacement) from lesion voxels, the rest from background voxels. Lesion
/// centers come first.
pub fn sample_centers<R: Rng + ?Sized>(
    volume: &Volume,
    count: usize,
    lesion_fraction: f64,
    output_extent: usize,
    rng: &mut R,
) -> Result<Vec<[usize; 3]>> {
    if !(0.0..=1.0).contains(&lesion_fraction) {
        return Err(Error::invalid(format!(
            "lesion_fraction {lesion_fraction} outside [0, 1]"
        )));
    }
    let n_lesion = (count as f64 * lesion_fraction).round() as usize;
    draw_centers(volume, n_lesion, count - n_lesion, output_extent, rng)
}

/// Draws exact numbers of lesion and background centers.
pub fn draw_centers<R: Rng + ?Sized>(
    volume: &Volume,
    n_lesion: usize,
    n_background: usize,
    output_extent: usize,
    rng: &mut R,
) -> Result<Vec<[usize; 3]>> {
    let [d, h, w] = volume.extents;
    if volume.extents.iter().any(|&n| n < output_extent) {
        return Err(Error::invalid(format!(
            "volume {:?} is smaller than the {output_extent}^3 output block",
            volume.extents
        )));
    }
    let (mut lesion, mut background) = (Vec::new(), Vec::new());
    for z in center_range(d, output_extent) {
        for y in center_range(h, output_extent) {
            for x in center_range(w, output_extent) {
                let c = [z, y, x];
                if volume.labels[volume.index(z, y, x)] != 0 {
                    lesion.push(c);
                } else {
                    background.push(c);
                }
            }
        }
    }
    // lesion voxels too close to the border to center a block do not count
    if n_lesion > 0 && lesion.is_empty() {
        return Err(Error::NoLesionVoxels {
            available: lesion.len(),
            requested: n_lesion,
        });
    }
    if n_background > 0 && background.is_empty() {
        return Err(Error::invalid("no background voxels available for sampling"));
    }
    let mut out = Vec::with_capacity(n_lesion + n_background);
    out.extend((0..n_lesion).map(|_| lesion[rng.random_range(0..lesion.len())]));
    out.extend((0..n_background).map(|_| background[rng.random_range(0..background.len())]));
    Ok(out)
}

/// Copies the reflect-padded `[e, e, e]` window starting at `origin` into
/// the two pathway inputs `(FLAIR, T2)` and `(T1, T1-CE)`, channels last.
pub fn extract_inputs(volume: &Volume, origin: [isize; 3], extent: usize, ft: &mut [f32], t1: &mut [f32]) {
    let [d, h, w] = volume.extents;
    let [flair, t1n, t1ce, t2] = &volume.modalities;
    let xs: Vec<usize> = (0..extent).map(|i| reflect_index(origin[2] + i as isize, w)).collect();
    let mut o = 0;
    for i in 0..extent {
        let z = reflect_index(origin[0] + i as isize, d);
        for j in 0..extent {
            let y = reflect_index(origin[1] + j as isize, h);
            let row = (z * h + y) * w;
            for &x in &xs {
                let s = row + x;
                ft[o] = flair[s];
                ft[o + 1] = t2[s];
                t1[o] = t1n[s];
                t1[o + 1] = t1ce[s];
                o += 2;
            }
        }
    }
}

/// Builds a batch from explicit centers. `volumes[c.volume]` must exist.
pub fn extract_batch(volumes: &[&Volume], centers: &[PatchCenter], geom: PatchGeometry) -> Result<PatchBatch> {
    let e = geom.input_extent;
    let o = geom.output_extent;
    if e < o || !(e - o).is_multiple_of(2) {
        return Err(Error::invalid(format!("bad patch geometry {geom:?}")));
    }
    let per_in = e * e * e * 2;
    let per_out = o * o * o;
    let n = centers.len();
    let mut ft = vec![0.0f32; n * per_in];
    let mut t1 = vec![0.0f32; n * per_in];
    let mut labels_full = vec![0u8; n * per_out];
    for (p, c) in centers.iter().enumerate() {
        let v = volumes
            .get(c.volume)
            .ok_or_else(|| Error::invalid(format!("{c}: no such volume")))?;
        for a in 0..3 {
            if !center_range(v.extents[a], o).contains(&c.center[a]) {
                return Err(Error::invalid(format!(
                    "{c}: output block leaves the volume {:?}",
                    v.extents
                )));
            }
        }
        let out_origin = c.center.map(|x| x - o / 2);
        let in_origin = out_origin.map(|x| x as isize - geom.margin() as isize);
        let r = p * per_in..(p + 1) * per_in;
        extract_inputs(v, in_origin, e, &mut ft[r.clone()], &mut t1[r]);
        let mut k = p * per_out;
        for z in 0..o {
            for y in 0..o {
                for x in 0..o {
                    let l = v.labels[v.index(out_origin[0] + z, out_origin[1] + y, out_origin[2] + x)];
                    labels_full[k] = label_to_class(l).expect("volume labels are validated");
                    k += 1;
                }
            }
        }
    }
    let labels_binary = labels_full.iter().map(|&c| (c != 0) as u8).collect();
    Ok(PatchBatch {
        inputs_ft: Tensor::from_vec(&[n, e, e, e, 2], ft)?,
        inputs_t1: Tensor::from_vec(&[n, e, e, e, 2], t1)?,
        labels_full,
        labels_binary,
        provenance: centers.to_vec(),
    })
}

/// Samples and extracts `count` patches from one volume.
pub fn sample_patches(
    volume: &Volume,
    count: usize,
    lesion_fraction: f64,
    seed: u64,
    geom: PatchGeometry,
) -> Result<PatchBatch> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers: Vec<PatchCenter> = sample_centers(volume, count, lesion_fraction, geom.output_extent, &mut rng)?
        .into_iter()
        .map(|center| PatchCenter { volume: 0, center })
        .collect();
    extract_batch(&[volume], &centers, geom)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reflection_mirrors_about_edges() {
        let n = 5;
        let got: Vec<usize> = (-6..11).map(|i| reflect_index(i, n)).collect();
        assert_eq!(got, [2, 3, 4, 3, 2, 1, 0, 1, 2, 3, 4, 3, 2, 1, 0, 1, 2]);
        assert_eq!(reflect_index(-3, 1), 0);
    }

    fn striped(extent: usize) -> Volume {
        let n = extent.pow(3);
        let grids = std::array::from_fn(|m| (0..n).map(|i| (i * 4 + m) as f32 + 1.0).collect());
        let mut labels = vec![0u8; n];
        let c = extent / 2;
        labels[(c * extent + c) * extent + c] = 4;
        Volume::new([extent; 3], [1.0; 3], grids, labels).unwrap()
    }

    #[test]
    fn fraction_is_exact_after_rounding() {
        let v = striped(16);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let c = sample_centers(&v, 7, 0.5, 12, &mut rng).unwrap();
        let lesion = c.iter().filter(|c| v.labels[v.index(c[0], c[1], c[2])] != 0).count();
        assert_eq!(lesion, 4);
    }

    #[test]
    fn no_lesion_is_reported() {
        let mut v = striped(16);
        v.labels.iter_mut().for_each(|l| *l = 0);
        let err = sample_patches(&v, 4, 0.5, 0, PatchGeometry::PROPOSED).unwrap_err();
        assert!(matches!(
            err,
            Error::NoLesionVoxels {
                available: 0,
                requested: 2
            }
        ));
        let b = sample_patches(&v, 4, 0.0, 0, PatchGeometry::PROPOSED).unwrap();
        assert!(b.labels_binary.iter().all(|&l| l == 0));
    }

    #[test]
    fn channels_follow_pathway_order() {
        let v = striped(12);
        let b = sample_patches(
            &v,
            1,
            1.0,
            3,
            PatchGeometry {
                input_extent: 14,
                output_extent: 12,
            },
        )
        .unwrap();
        let [cz, cy, cx] = b.provenance[0].center;
        let src = v.index(cz - 6, cy - 6, cx - 6);
        // window origin is one voxel before the output block
        let o = b.inputs_ft.offset(&[0, 1, 1, 1, 0]);
        assert_eq!(b.inputs_ft.data()[o], v.modalities[0][src]);
        assert_eq!(b.inputs_ft.data()[o + 1], v.modalities[3][src]);
        assert_eq!(b.inputs_t1.data()[o], v.modalities[1][src]);
        assert_eq!(b.inputs_t1.data()[o + 1], v.modalities[2][src]);
        assert_eq!(b.labels_full.iter().filter(|&&l| l == 3).count(), 1);
    }
}
