//! Sliding-window prediction over whole volumes and the receptive-field
//! perturbation probe.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{class_to_label, extract_inputs, LabelMap, Volume};
use crate::error::{Error, Result};
use crate::layers::Mode;
use crate::model::Model;
use crate::tensor::Tensor;

/// Tiles evaluated per forward pass.
const TILE_BATCH: usize = 4;

/// Start offsets of the output blocks along one axis: multiples of `o`,
/// with the last block moved back to end at the far edge.
pub fn tile_starts(n: usize, o: usize) -> Vec<usize> {
    let count = n.div_ceil(o);
    (0..count).map(|k| (k * o).min(n - o)).collect()
}

/// All tile origins in lexicographic `(d, h, w)` order.
pub fn tile_origins(extents: [usize; 3], o: usize) -> Vec<[usize; 3]> {
    let [a, b, c] = extents.map(|n| tile_starts(n, o));
    let mut out = Vec::with_capacity(a.len() * b.len() * c.len());
    for &z in &a {
        for &y in &b {
            for &x in &c {
                out.push([z, y, x]);
            }
        }
    }
    out
}

/// Which head to read at inference.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Head {
    /// 4-class scores, mapped back to labels `{0, 1, 2, 4}`.
    Full,
    /// Whole-tumor scores as `{0, 1}`; diagnostics only.
    Binary,
}

/// Per-voxel argmax of the chosen head over the whole volume.
pub fn predict_head(volume: &Volume, model: &Model, head: Head) -> Result<Vec<u8>> {
    let spec = &model.spec;
    let o = spec.output_extent;
    let e = spec.input_extent();
    let m = spec.margin() as isize;
    if volume.extents.iter().any(|&n| n < o) {
        return Err(Error::invalid(format!(
            "volume {:?} is smaller than the {o}^3 output block",
            volume.extents
        )));
    }
    if head == Head::Binary && !spec.is_hierarchical() {
        return Err(Error::invalid("this variant has no binary head"));
    }
    let [_, h, w] = volume.extents;
    let mut out = vec![0u8; volume.voxels()];
    let per = e * e * e * 2;
    for group in tile_origins(volume.extents, o).chunks(TILE_BATCH) {
        let n = group.len();
        let mut ft = vec![0.0f32; n * per];
        let mut t1 = vec![0.0f32; n * per];
        for (i, origin) in group.iter().enumerate() {
            let r = i * per..(i + 1) * per;
            extract_inputs(
                volume,
                origin.map(|x| x as isize - m),
                e,
                &mut ft[r.clone()],
                &mut t1[r],
            );
        }
        let (g, fwd) = model.run(
            Tensor::from_vec(&[n, e, e, e, 2], ft)?,
            Tensor::from_vec(&[n, e, e, e, 2], t1)?,
            Mode::Infer,
        )?;
        let scores = match head {
            Head::Full => g.value(fwd.full),
            Head::Binary => g.value(fwd.binary.expect("hierarchical")),
        };
        let k = scores.channels();
        let s = scores.data();
        for (i, origin) in group.iter().enumerate() {
            let mut v = i * o * o * o * k;
            for z in 0..o {
                for y in 0..o {
                    let row = ((origin[0] + z) * h + origin[1] + y) * w + origin[2];
                    for x in 0..o {
                        let best = argmax(&s[v..v + k]);
                        out[row + x] = match head {
                            Head::Full => class_to_label(best as u8).expect("4-class head"),
                            Head::Binary => best as u8,
                        };
                        v += k;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// First index of the maximum.
fn argmax(xs: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Dense label map for a normalized volume.
pub fn predict_volume(volume: &Volume, model: &Model) -> Result<LabelMap> {
    let labels = predict_head(volume, model, Head::Full)?;
    Ok(LabelMap {
        extents: volume.extents,
        spacing: volume.spacing,
        labels,
    })
}

/// Evaluation regions derived from a label map.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RegionMasks {
    /// Labels 1, 2 and 4.
    pub complete: Vec<bool>,
    /// Labels 1 and 4.
    pub core: Vec<bool>,
    /// Label 4.
    pub enhancing: Vec<bool>,
}

pub fn aggregate_regions(labels: &[u8]) -> RegionMasks {
    RegionMasks {
        complete: labels.iter().map(|&l| l != 0).collect(),
        core: labels.iter().map(|&l| l == 1 || l == 4).collect(),
        enhancing: labels.iter().map(|&l| l == 4).collect(),
    }
}

/// Outcome of [`rf_probe`].
#[derive(Clone, Debug, PartialEq)]
pub struct RfReport {
    /// Extent of the full receptive field.
    pub receptive_field: usize,
    /// Extent of the first stage's receptive field.
    pub stage1_field: usize,
    pub voxels: usize,
    pub outside_trials: usize,
    /// Out-of-window perturbations that changed any score (must be 0).
    pub outside_changed: usize,
    pub inside_trials: usize,
    /// Perturbations inside the stage-1 window that changed the stage-1 scores.
    pub inside_changed: usize,
}

impl RfReport {
    pub fn inside_fraction(&self) -> f64 {
        self.inside_changed as f64 / self.inside_trials.max(1) as f64
    }

    pub fn passed(&self) -> bool {
        self.outside_changed == 0 && self.inside_fraction() > 0.99
    }
}

impl std::fmt::Display for RfReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(
            f,
            "receptive field: {0}^3 (stage 1: {1}^3), {2} output voxels",
            self.receptive_field, self.stage1_field, self.voxels
        )?;
        writeln!(
            f,
            "outside window: {}/{} perturbations changed the scores",
            self.outside_changed, self.outside_trials
        )?;
        writeln!(
            f,
            "inside stage-1 window: {}/{} perturbations changed the stage-1 scores ({:.2}%)",
            self.inside_changed,
            self.inside_trials,
            100.0 * self.inside_fraction()
        )?;
        write!(f, "{}", if self.passed() { "PASS" } else { "FAIL" })
    }
}

/// One single-voxel perturbation of the probe.
struct Job {
    target: usize,
    pathway: usize,
    pos: [usize; 3],
    channel: usize,
    delta: f64,
    inside: bool,
}

/// Perturbs single input voxels of a random patch and checks which scores
/// move. For each of `voxels` random output voxels, `trials` perturbations
/// land outside its full receptive window, where the summed scores must stay
/// bit-identical, and `trials` land inside its stage-1 window, where the
/// stage-1 scores should nearly always change. Each perturbation adds a
/// random offset of magnitude 5 to 10 to one channel of one pathway. Runs in
/// inference mode so batch statistics cannot couple voxels.
pub fn rf_probe(model: &Model, voxels: usize, trials: usize, seed: u64) -> Result<RfReport> {
    let model: Model<f64> = model.cast();
    let spec = &model.spec;
    let e = spec.input_extent();
    let o = spec.output_extent;
    let ledger = spec.ledger();
    let rf = ledger.last().expect("at least one stage").receptive_field;
    let rf1 = ledger[1].receptive_field;
    if rf != e - o + 1 {
        return Err(Error::invalid(format!(
            "receptive field {rf} does not match the input margin ({e} -> {o})"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = [e, e, e, 2];
    let ft = Tensor::<f64>::randn(&shape, 1.0, &mut rng);
    let t1 = Tensor::<f64>::randn(&shape, 1.0, &mut rng);
    let mut report = RfReport {
        receptive_field: rf,
        stage1_field: rf1,
        voxels,
        outside_trials: 0,
        outside_changed: 0,
        inside_trials: 0,
        inside_changed: 0,
    };

    let mut jobs = Vec::new();
    let mut targets = Vec::new();
    // the stage-1 window sits centered inside the full one
    let off1 = (rf - rf1) / 2;
    for _ in 0..voxels {
        let v: [usize; 3] = std::array::from_fn(|_| rng.random_range(0..o));
        // output voxel v sees input window [v, v + rf) on each axis
        let inside = |p: [usize; 3]| (0..3).all(|a| p[a] >= v[a] && p[a] < v[a] + rf);
        let mut positions = Vec::with_capacity(2 * trials);
        while positions.len() < trials {
            let p: [usize; 3] = std::array::from_fn(|_| rng.random_range(0..e));
            if !inside(p) {
                positions.push((p, false));
            }
        }
        for _ in 0..trials {
            positions.push((std::array::from_fn(|a| v[a] + off1 + rng.random_range(0..rf1)), true));
        }
        for (pos, inside) in positions {
            let magnitude: f64 = rng.random_range(5.0..10.0);
            jobs.push(Job {
                target: targets.len(),
                pathway: rng.random_range(0..2),
                pos,
                channel: rng.random_range(0..2),
                delta: if rng.random_bool(0.5) { magnitude } else { -magnitude },
                inside,
            });
        }
        targets.push(v);
    }

    let scores_at = |t: &Tensor<f64>, n: usize, v: [usize; 3]| -> Vec<f64> {
        let k = t.channels();
        let off = t.offset(&[n, v[0], v[1], v[2], 0]);
        t.data()[off..off + k].to_vec()
    };
    // (summed scores, stage-1 scores)
    let run = |a: &[Tensor<f64>], b: &[Tensor<f64>]| -> Result<(Tensor<f64>, Tensor<f64>)> {
        let (g, fwd) = model.run(crate::tensor::stack(a)?, crate::tensor::stack(b)?, Mode::Infer)?;
        Ok((g.value(fwd.full).clone(), g.value(fwd.full_stages[0]).clone()))
    };
    let (base, base1) = run(std::slice::from_ref(&ft), std::slice::from_ref(&t1))?;

    for group in jobs.chunks(TILE_BATCH) {
        let mut a = Vec::with_capacity(group.len());
        let mut b = Vec::with_capacity(group.len());
        for job in group {
            let (mut x, mut y) = (ft.clone(), t1.clone());
            let t = if job.pathway == 0 { &mut x } else { &mut y };
            let idx = [job.pos[0], job.pos[1], job.pos[2], job.channel];
            t.set(&idx, t.get(&idx) + job.delta);
            a.push(x);
            b.push(y);
        }
        let (out, out1) = run(&a, &b)?;
        for (n, job) in group.iter().enumerate() {
            let v = targets[job.target];
            if job.inside {
                report.inside_trials += 1;
                report.inside_changed += (scores_at(&out1, n, v) != scores_at(&base1, 0, v)) as usize;
            } else {
                report.outside_trials += 1;
                report.outside_changed += (scores_at(&out, n, v) != scores_at(&base, 0, v)) as usize;
            }
        }
    }
    Ok(report)
}
