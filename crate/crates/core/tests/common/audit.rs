//! Finite-difference audit of every differentiable op and of the full
//! two-pathway loss, all in f64.

use std::collections::BTreeMap;

use dense3d::layers::{Binder, Mode};
use dense3d::model::Model;
use dense3d::tensor::Graph;
use dense3d::train::loss_nodes;
use dense3d::{NetworkSpec, NodeId, Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{grad_check, kink_signature, relative_error, LossFn, FD_STEP};

pub const TOLERANCE: f64 = 1e-4;
pub const SEEDS: u64 = 20;
const SAMPLES: usize = 24;

pub const OPS: [&str; 13] = [
    "conv3d",
    "batch_norm_train",
    "batch_norm_infer",
    "relu",
    "add",
    "concat_channels",
    "crop_center",
    "crop_concat",
    "softmax_channels",
    "cross_entropy",
    "sum",
    "scale",
    "two_pathway_loss",
];

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, rng)
}

fn targets(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Vec<u8> {
    (0..n).map(|_| rng.random_range(0..k as u8)).collect()
}

/// Cross entropy of `x` against fixed random targets: a scalar readout
/// whose gradient differs per element.
fn readout(g: &mut Graph<f64>, x: NodeId, t: &[u8]) -> Result<NodeId> {
    g.cross_entropy(x, t)
}

/// Worst relative error of `op` over one seed.
pub fn check_op(op: &str, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(1..3usize);
    let sp: [usize; 3] = std::array::from_fn(|_| rng.random_range(3..6usize));
    let c = rng.random_range(2..5usize);
    let shape = [n, sp[0], sp[1], sp[2], c];
    let voxels = n * sp[0] * sp[1] * sp[2];
    let t = targets(&mut rng, voxels, c);
    let mut probe = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut check = |inputs: Vec<Tensor<f64>>, f: &LossFn<'_>| grad_check(&inputs, f, SAMPLES, &mut probe);
    match op {
        "conv3d" => {
            let k = [1, 2, 3][(seed % 3) as usize];
            let cout = 3;
            let x = randn(&mut ChaCha8Rng::seed_from_u64(seed + 1000), &shape);
            let w = Tensor::randn(&[k, k, k, c, cout], 0.5, &mut ChaCha8Rng::seed_from_u64(seed + 2000));
            let b = randn(&mut ChaCha8Rng::seed_from_u64(seed + 3000), &[cout]);
            let o = sp.map(|e| e - k + 1);
            let tt: Vec<u8> = t
                .iter()
                .take(n * o.iter().product::<usize>())
                .map(|&v| v % cout as u8)
                .collect();
            check(vec![x, w, b], &move |g, ids| {
                let y = g.conv3d(ids[0], ids[1], ids[2])?;
                readout(g, y, &tt)
            })
        }
        "batch_norm_train" | "batch_norm_infer" => {
            let mut r = ChaCha8Rng::seed_from_u64(seed + 1000);
            let x = Tensor::randn(&shape, 2.0, &mut r);
            let gamma = Tensor::rand_uniform(&[c], 0.5, 1.5, &mut r);
            let beta = randn(&mut r, &[c]);
            let mean = randn(&mut r, &[c]);
            let var = Tensor::rand_uniform(&[c], 0.5, 2.0, &mut r);
            let train = op == "batch_norm_train";
            check(vec![x, gamma, beta], &move |g, ids| {
                let y = if train {
                    g.batch_norm_train(ids[0], ids[1], ids[2])?
                } else {
                    g.batch_norm_infer(ids[0], ids[1], ids[2], &mean, &var)?
                };
                readout(g, y, &t)
            })
        }
        "relu" => {
            // keep every entry well clear of the kink
            let x = randn(&mut rng, &shape).map(|v| if v.abs() < 0.05 { v + 0.1f64.copysign(v) } else { v });
            check(vec![x], &move |g, ids| {
                let y = g.relu(ids[0]);
                readout(g, y, &t)
            })
        }
        "add" => {
            let (a, b) = (randn(&mut rng, &shape), randn(&mut rng, &shape));
            check(vec![a, b], &move |g, ids| {
                let y = g.add(ids[0], ids[1])?;
                readout(g, y, &t)
            })
        }
        "concat_channels" => {
            let mut s2 = shape;
            s2[4] = 1;
            let (a, b) = (randn(&mut rng, &shape), randn(&mut rng, &s2));
            let tt = targets(&mut rng, voxels, c + 1);
            check(vec![a, b], &move |g, ids| {
                let y = g.concat_channels(&[ids[1], ids[0]])?;
                readout(g, y, &tt)
            })
        }
        "crop_center" => {
            let x = randn(&mut rng, &shape);
            let target = sp.map(|e| e - 2);
            let tt = targets(&mut rng, n * target.iter().product::<usize>(), c);
            check(vec![x], &move |g, ids| {
                let y = g.crop_center(ids[0], target)?;
                readout(g, y, &tt)
            })
        }
        "crop_concat" => {
            let a = randn(&mut rng, &shape);
            let b = randn(&mut rng, &[n, sp[0] + 2, sp[1] + 2, sp[2] + 2, 2]);
            let target = sp.map(|e| e - 2);
            let tt = targets(&mut rng, n * target.iter().product::<usize>(), c + 2);
            check(vec![a, b], &move |g, ids| {
                let y = g.crop_concat(&[ids[0], ids[1]], target)?;
                readout(g, y, &tt)
            })
        }
        "softmax_channels" => {
            let x = randn(&mut rng, &shape);
            check(vec![x], &move |g, ids| {
                let y = g.softmax_channels(ids[0]);
                let y = g.scale(y, 3.0);
                readout(g, y, &t)
            })
        }
        "cross_entropy" => {
            let x = Tensor::randn(&shape, 3.0, &mut rng);
            check(vec![x], &move |g, ids| readout(g, ids[0], &t))
        }
        "sum" => {
            let x = randn(&mut rng, &shape).map(|v| if v.abs() < 0.05 { v + 0.1f64.copysign(v) } else { v });
            let gamma = randn(&mut rng, &[c]);
            let beta = randn(&mut rng, &[c]);
            let mean = randn(&mut rng, &[c]);
            let var = Tensor::rand_uniform(&[c], 0.5, 2.0, &mut rng);
            check(vec![x, gamma, beta], &move |g, ids| {
                let y = g.relu(ids[0]);
                let y = g.batch_norm_infer(y, ids[1], ids[2], &mean, &var)?;
                Ok(g.sum(y))
            })
        }
        "scale" => {
            let x = randn(&mut rng, &shape);
            let k = rng.random_range(-2.0..2.0);
            check(vec![x], &move |g, ids| {
                let y = g.scale(ids[0], k);
                readout(g, y, &t)
            })
        }
        "two_pathway_loss" => two_pathway_loss(seed).0,
        other => panic!("unknown op {other}"),
    }
}

/// Smooth coordinates compared per parameter tensor, summed over seeds.
pub const MIN_COVERAGE: usize = 10;

/// Gradient of `full + lambda * binary` with respect to every learnable
/// parameter of a small two-stage network, in training mode. Returns the
/// worst error and the number of smooth coordinates compared per tensor.
/// Parameters that shift a whole channel (gamma, beta) often cross a ReLU
/// kink within one step, so a single seed may not reach all of them.
pub fn two_pathway_loss(seed: u64) -> (f64, BTreeMap<String, usize>) {
    let spec = NetworkSpec {
        initial_channels: 2,
        growth_rate: 2,
        layers_per_stage: 2,
        output_extent: 1,
        ..NetworkSpec::proposed()
    };
    let e = spec.input_extent();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model: Model<f64> = Model::<f32>::build(spec, seed).unwrap().cast();
    // random affine parameters so that every gamma/beta gradient is generic
    for (name, p) in model.params.learnable_mut() {
        if name.ends_with(".gamma") || name.ends_with(".beta") || name.ends_with(".b") {
            for v in p.data_mut() {
                *v = rng.random_range(-0.5..0.5) + if name.ends_with(".gamma") { 1.0 } else { 0.0 };
            }
        }
    }
    let ft = Tensor::<f64>::randn(&[1, e, e, e, 2], 1.0, &mut rng);
    let t1 = Tensor::<f64>::randn(&[1, e, e, e, 2], 1.0, &mut rng);
    let full_t = targets(&mut rng, 1, 4);
    let bin_t: Vec<u8> = full_t.iter().map(|&v| (v != 0) as u8).collect();
    let lambda = rng.random_range(0.5..2.0);

    let run = |model: &Model<f64>| -> (Graph<f64>, NodeId, Vec<(String, NodeId)>) {
        let mut g = Graph::new();
        let a = g.input(ft.clone());
        let b = g.input(t1.clone());
        let mut binder = Binder::new(&mut g, &model.params, Mode::Train);
        let out = model.forward(&mut binder, a, b).unwrap();
        let bound: Vec<(String, NodeId)> = binder.bound().map(|(k, v)| (k.clone(), *v)).collect();
        let l = loss_nodes(&mut g, &out, &full_t, &bin_t, lambda).unwrap().total;
        (g, l, bound)
    };

    let (mut g, l, bound) = run(&model);
    let base = kink_signature(&g);
    g.backward(l).unwrap();
    let mut worst: f64 = 0.0;
    let mut coverage = BTreeMap::new();
    for (name, id) in bound {
        if model.params.is_buffer(&name) {
            continue;
        }
        let grad = g.grad_or_zeros(id);
        let (err, checked) = relative_error(grad.len(), SAMPLES, &mut rng, |c| {
            let orig = model.params.get(&name).unwrap().data()[c];
            let mut at = |v: f64| {
                model.params.get_mut(&name).unwrap().data_mut()[c] = v;
                let (g, l, _) = run(&model);
                (g.value(l).data()[0], kink_signature(&g))
            };
            let (up, su) = at(orig + FD_STEP);
            let (down, sd) = at(orig - FD_STEP);
            model.params.get_mut(&name).unwrap().data_mut()[c] = orig;
            (su == base && sd == base).then(|| (grad.data()[c], (up - down) / (2.0 * FD_STEP)))
        });
        worst = worst.max(err);
        coverage.insert(name, checked);
    }
    (worst, coverage)
}

/// Full-loss audit over all seeds: worst error and the least-covered
/// parameter tensor with its coverage.
pub fn two_pathway_audit() -> (f64, String, usize) {
    let mut worst: f64 = 0.0;
    let mut total: BTreeMap<String, usize> = BTreeMap::new();
    for seed in 0..SEEDS {
        let (err, cov) = two_pathway_loss(seed);
        worst = worst.max(err);
        for (k, v) in cov {
            *total.entry(k).or_default() += v;
        }
    }
    let (name, least) = total.into_iter().min_by_key(|(_, v)| *v).unwrap();
    (worst, name, least)
}

/// Worst error over `SEEDS` seeds for each single op.
pub fn audit_ops() -> Vec<(&'static str, f64)> {
    OPS.iter()
        .filter(|&&op| op != "two_pathway_loss")
        .map(|&op| (op, (0..SEEDS).map(|s| check_op(op, s)).fold(0.0, f64::max)))
        .collect()
}
