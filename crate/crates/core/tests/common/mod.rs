//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

pub mod audit;
pub mod checks;

use dense3d::data::{LabelMap, Volume};
use dense3d::tensor::Graph;
use dense3d::{NodeId, Result, Tensor};
use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use rand::Rng;

/// Nested-loop valid cross-correlation in f64. `x` is `[N,D,H,W,Cin]`,
/// `w` is `[k,k,k,Cin,Cout]`.
pub fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
    let s = x.shape();
    let (n, d, h, wd, cin) = (s[0], s[1], s[2], s[3], s[4]);
    let k = w.shape()[0];
    let cout = w.shape()[4];
    let (od, oh, ow) = (d - k + 1, h - k + 1, wd - k + 1);
    let mut y = Tensor::<f64>::zeros(&[n, od, oh, ow, cout]);
    for bi in 0..n {
        for z in 0..od {
            for r in 0..oh {
                for c in 0..ow {
                    for co in 0..cout {
                        let mut acc = b.get(&[co]);
                        for i in 0..k {
                            for j in 0..k {
                                for l in 0..k {
                                    for ci in 0..cin {
                                        acc += x.get(&[bi, z + i, r + j, c + l, ci]) * w.get(&[i, j, l, ci, co]);
                                    }
                                }
                            }
                        }
                        y.set(&[bi, z, r, c, co], acc);
                    }
                }
            }
        }
    }
    y
}

/// Builds a scalar loss from differentiable leaves.
pub type LossFn<'a> = dyn Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId> + 'a;

pub const FD_STEP: f64 = 1e-3;

/// Which node entries are exactly zero. A change between two evaluations
/// means some ReLU switched on or off in between, so the loss is not smooth
/// along that finite-difference segment.
pub fn kink_signature(g: &Graph<f64>) -> u64 {
    let mut h = DefaultHasher::new();
    for v in g.values() {
        for &x in v.data() {
            (x == 0.0).hash(&mut h);
        }
    }
    h.finish()
}

/// Relative error `|a - n|_2 / max(|a|_2, |n|_2)` of analytic against
/// numerical derivatives at up to `samples` coordinates of a tensor of `len`
/// entries. `probe(c)` returns `(analytic, numerical)` at coordinate `c`, or
/// `None` when the segment crosses a kink; such coordinates are replaced by
/// fresh draws. Also returns how many coordinates were actually compared.
pub fn relative_error<R: Rng>(
    len: usize,
    samples: usize,
    rng: &mut R,
    mut probe: impl FnMut(usize) -> Option<(f64, f64)>,
) -> (f64, usize) {
    let exhaustive = len <= samples;
    let want = samples.min(len);
    let (mut diff, mut na, mut nn) = (0.0, 0.0, 0.0);
    let mut checked = 0;
    for attempt in 0..if exhaustive { len } else { 8 * samples } {
        if checked == want {
            break;
        }
        let c = if exhaustive { attempt } else { rng.random_range(0..len) };
        if let Some((a, num)) = probe(c) {
            diff += (a - num).powi(2);
            na += a * a;
            nn += num * num;
            checked += 1;
        }
    }
    let denom = f64::max(na, nn).sqrt();
    let err = if denom == 0.0 { 0.0 } else { diff.sqrt() / denom };
    (err, checked)
}

/// Central finite-difference check of every input of `loss`, returning the
/// worst [`relative_error`] over the inputs. An input without a single
/// smooth coordinate counts as a failure.
pub fn grad_check<R: Rng>(inputs: &[Tensor<f64>], loss: &LossFn<'_>, samples: usize, rng: &mut R) -> f64 {
    let eval = |xs: &[Tensor<f64>]| -> (f64, u64) {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = xs.iter().map(|x| g.input(x.clone())).collect();
        let l = loss(&mut g, &ids).expect("loss");
        (g.value(l).data()[0], kink_signature(&g))
    };
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|x| g.variable(x.clone())).collect();
    let l = loss(&mut g, &ids).expect("loss");
    let base = kink_signature(&g);
    g.backward(l).expect("backward");
    let mut worst: f64 = 0.0;
    for (i, x) in inputs.iter().enumerate() {
        let analytic = g.grad_or_zeros(ids[i]);
        let (err, checked) = relative_error(x.len(), samples, rng, |c| {
            let mut xs = inputs.to_vec();
            xs[i].data_mut()[c] += FD_STEP;
            let (up, su) = eval(&xs);
            xs[i].data_mut()[c] -= 2.0 * FD_STEP;
            let (down, sd) = eval(&xs);
            (su == base && sd == base).then(|| (analytic.data()[c], (up - down) / (2.0 * FD_STEP)))
        });
        worst = worst.max(if checked == 0 { f64::INFINITY } else { err });
    }
    worst
}

/// Per-voxel Dice over the three nested regions, written without the
/// library's region masks.
pub fn brute_force_dice(pred: &[u8], truth: &[u8]) -> [f64; 3] {
    let regions: [&dyn Fn(u8) -> bool; 3] = [&|l| l != 0, &|l| l == 1 || l == 4, &|l| l == 4];
    regions.map(|inside| {
        let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
        for (&p, &t) in pred.iter().zip(truth) {
            match (inside(p), inside(t)) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                _ => {}
            }
        }
        if tp + fp + fn_ == 0 {
            1.0
        } else {
            2.0 * tp as f64 / (fn_ + fp + 2 * tp) as f64
        }
    })
}

pub const LABELS: [u8; 4] = [0, 1, 2, 4];

pub fn random_labels<R: Rng>(extents: [usize; 3], rng: &mut R) -> LabelMap {
    let n = extents.iter().product();
    LabelMap::new(extents, (0..n).map(|_| LABELS[rng.random_range(0..4)]).collect()).unwrap()
}

pub fn random_volume<R: Rng>(extents: [usize; 3], rng: &mut R) -> Volume {
    let n: usize = extents.iter().product();
    let grid = |rng: &mut R| (0..n).map(|_| rng.random_range(-2.0f32..2.0)).collect::<Vec<_>>();
    let modalities = [grid(rng), grid(rng), grid(rng), grid(rng)];
    let labels = random_labels(extents, rng).labels;
    Volume::new(extents, [1.0, 1.0, 1.2], modalities, labels).unwrap()
}
