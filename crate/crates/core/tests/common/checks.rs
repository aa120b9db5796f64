//! Checks shared by the focused integration tests and the acceptance suite.
//! Each returns `Err` with a description of the first violation.

use dense3d::data::mvol::{labels_from_bytes, labels_to_bytes, volume_from_bytes, volume_to_bytes};
use dense3d::data::{generate_phantom, normalize, sample_patches, PatchGeometry, PhantomSpec, Volume};
use dense3d::infer::{predict_volume, rf_probe, RfReport};
use dense3d::tensor::conv::conv3d_forward;
use dense3d::train::{run_training, train_step, AdamState, LogRow, OutputDir, TrainConfig, TrainState};
use dense3d::{Checkpoint, Error, Model, NetworkSpec, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{naive_conv, random_volume};

pub const CONV_TOLERANCE: f64 = 1e-5;

/// Largest absolute difference between the f32 convolution and the f64
/// nested-loop oracle over `count` random shapes.
pub fn conv_oracle(count: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..count {
        let k = rng.random_range(1..4usize);
        let n = rng.random_range(1..3usize);
        let sp: [usize; 3] = std::array::from_fn(|_| rng.random_range(k..k + 5));
        let cin = rng.random_range(1..9usize);
        let cout = rng.random_range(1..9usize);
        let batched = rng.random_bool(0.5);
        let scale = 1.0 / ((k * k * k * cin) as f64).sqrt();
        let x = Tensor::<f32>::rand_uniform(&[n, sp[0], sp[1], sp[2], cin], -1.0, 1.0, &mut rng);
        let w = Tensor::<f32>::rand_uniform(&[k, k, k, cin, cout], -scale, scale, &mut rng);
        let b = Tensor::<f32>::rand_uniform(&[cout], -1.0, 1.0, &mut rng);
        let expected = naive_conv(&x.cast(), &w.cast(), &b.cast());
        let got = if batched {
            conv3d_forward(&x, &w, &b).unwrap()
        } else {
            // one sample at a time through the unbatched entry point
            let per = x.len() / n;
            let parts: Vec<Tensor<f32>> = (0..n)
                .map(|i| {
                    let xi = Tensor::from_vec(&x.shape()[1..], x.data()[i * per..(i + 1) * per].to_vec()).unwrap();
                    conv3d_forward(&xi, &w, &b).unwrap()
                })
                .collect();
            dense3d::tensor::stack(&parts).unwrap()
        };
        worst = worst.max(got.cast::<f64>().max_abs_diff(&expected));
    }
    worst
}

fn expect_err(what: &str, r: dense3d::Result<impl std::fmt::Debug>, ok: impl Fn(&Error) -> bool) -> Result<(), String> {
    match r {
        Err(e) if ok(e.root()) => Ok(()),
        Err(e) => Err(format!("{what}: wrong error {e:?}")),
        Ok(v) => Err(format!("{what}: accepted ({v:?})")),
    }
}

/// MVOL write/read is bit exact, and each corruption maps to its own error.
pub fn mvol_round_trips() -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut vols: Vec<Volume> = (0..3)
        .map(|_| {
            let e = std::array::from_fn(|_| rng.random_range(1..9));
            random_volume(e, &mut rng)
        })
        .collect();
    let phantom = generate_phantom(&PhantomSpec::random([24; 3], 5)).map_err(|e| e.to_string())?;
    vols.push(phantom);
    // special values survive bit for bit
    vols[0].modalities[1][0] = -0.0;
    vols[0].modalities[2][0] = f32::from_bits(0x7fc0_1234);
    vols[0].modalities[3][0] = f32::MIN_POSITIVE / 4.0;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    for (i, v) in vols.iter().enumerate() {
        let bytes = volume_to_bytes(v);
        let back = volume_from_bytes(&bytes).map_err(|e| e.to_string())?;
        if volume_to_bytes(&back) != bytes || back.labels != v.labels {
            return Err(format!("volume {i} did not round-trip"));
        }
        let same_bits = v
            .modalities
            .iter()
            .zip(&back.modalities)
            .all(|(a, b)| a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()));
        if !same_bits {
            return Err(format!("volume {i}: intensities changed"));
        }
        let path = dir.path().join(format!("v{i}.mvol"));
        dense3d::data::write_volume(&path, v).map_err(|e| e.to_string())?;
        if std::fs::read(&path).map_err(|e| e.to_string())? != bytes {
            return Err(format!("volume {i}: file differs from in-memory encoding"));
        }
        let labels = v.label_map();
        let lb = labels_to_bytes(&labels);
        if labels_from_bytes(&lb).map_err(|e| e.to_string())? != labels {
            return Err(format!("labels {i} did not round-trip"));
        }
        expect_err("labels-only file read as a volume", volume_from_bytes(&lb), |e| {
            matches!(e, Error::InvalidArgument(_))
        })?;
    }

    let good = volume_to_bytes(&vols[0]);
    let mut bad = good.clone();
    bad[0] = b'X';
    expect_err("bad magic", volume_from_bytes(&bad), |e| {
        matches!(e, Error::BadMagic { .. })
    })?;
    let mut bad = good.clone();
    bad[4] = 2;
    expect_err("version 2", volume_from_bytes(&bad), |e| {
        matches!(e, Error::VersionMismatch { .. })
    })?;
    for cut in [0, 3, 7, 20, 31, good.len() / 2, good.len() - 1] {
        expect_err(&format!("truncated at {cut}"), volume_from_bytes(&good[..cut]), |e| {
            matches!(e, Error::Truncated { .. })
        })?;
    }
    let mut bad = good.clone();
    bad[8..20].copy_from_slice(&[0xff; 12]);
    expect_err("huge extents", volume_from_bytes(&bad), |e| {
        matches!(e, Error::ExtentOverflow(_))
    })?;
    let mut bad = good.clone();
    bad[8..12].copy_from_slice(&0u32.to_le_bytes());
    expect_err("zero extent", volume_from_bytes(&bad), |e| {
        matches!(e, Error::InvalidArgument(_))
    })?;
    let mut bad = good.clone();
    *bad.last_mut().unwrap() = 3;
    expect_err("label 3", volume_from_bytes(&bad), |e| {
        matches!(e, Error::InvalidLabel { value: 3, .. })
    })?;
    let mut bad = good;
    bad.push(0);
    expect_err("trailing byte", volume_from_bytes(&bad), |_| true)?;
    Ok(())
}

/// A checkpoint with optimizer state after a few real steps.
pub fn trained_checkpoint() -> Checkpoint {
    let cfg = tiny_config(1);
    let vols = tiny_volumes(2, 20);
    let refs: Vec<&Volume> = vols.iter().collect();
    let mut state = TrainState::new(&cfg).unwrap();
    run_training(&refs, &cfg, &mut state, None, |_| {}).unwrap();
    state.checkpoint(&cfg)
}

/// Checkpoint write/read is bit exact, and corrupt files are rejected.
pub fn checkpoint_round_trips() -> Result<(), String> {
    let ck = trained_checkpoint();
    let bytes = ck.to_bytes();
    let back = Checkpoint::from_bytes(&bytes).map_err(|e| e.to_string())?;
    if back.to_bytes() != bytes {
        return Err("re-encoding differs".into());
    }
    if !back.model.params.bit_eq(&ck.model.params) || back.model.spec != ck.model.spec {
        return Err("parameters changed".into());
    }
    let (a, b) = (back.optimizer.as_ref().unwrap(), ck.optimizer.as_ref().unwrap());
    if a.step != b.step || a.first.len() != b.first.len() {
        return Err("optimizer state changed".into());
    }
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("c.ckpt");
    ck.write(&path).map_err(|e| e.to_string())?;
    if Checkpoint::read(&path).map_err(|e| e.to_string())?.to_bytes() != bytes {
        return Err("file round trip differs".into());
    }

    let mut bad = bytes.clone();
    bad[1] ^= 1;
    expect_err("bad magic", Checkpoint::from_bytes(&bad), |e| {
        matches!(e, Error::BadMagic { .. })
    })?;
    let mut bad = bytes.clone();
    bad[4] = 9;
    expect_err("version 9", Checkpoint::from_bytes(&bad), |e| {
        matches!(e, Error::VersionMismatch { .. })
    })?;
    let mut bad = bytes.clone();
    bad[8] ^= 0xff;
    expect_err("spec hash", Checkpoint::from_bytes(&bad), |e| {
        matches!(e, Error::CorruptCheckpoint(_))
    })?;
    for cut in [0, 5, 40, bytes.len() / 2, bytes.len() - 4, bytes.len() - 1] {
        expect_err(
            &format!("truncated at {cut}"),
            Checkpoint::from_bytes(&bytes[..cut]),
            |e| matches!(e, Error::Truncated { .. }),
        )?;
    }
    let mut bad = bytes;
    bad.extend_from_slice(&[0; 4]);
    expect_err("trailing bytes", Checkpoint::from_bytes(&bad), |e| {
        matches!(e, Error::CorruptCheckpoint(_))
    })?;
    // parameters from a different architecture
    let other = Model::<f32>::build(NetworkSpec::narrow(dense3d::Variant::SingleScale), 0).unwrap();
    expect_err(
        "mismatched parameters",
        Model::from_parts(ck.model.spec.clone(), other.params),
        |e| matches!(e, Error::SpecMismatch(_)),
    )?;
    Ok(())
}

/// Narrow full-depth network, a handful of steps per epoch.
pub fn tiny_config(epochs: usize) -> TrainConfig {
    TrainConfig {
        network: NetworkSpec::narrow(dense3d::Variant::Proposed),
        epochs,
        patches_per_epoch: 8,
        mini_batch_size: 2,
        seed: 42,
        ..TrainConfig::default()
    }
}

pub fn tiny_volumes(count: usize, extent: usize) -> Vec<Volume> {
    (0..count)
        .map(|i| normalize(&generate_phantom(&PhantomSpec::random([extent; 3], 100 + i as u64)).unwrap()).unwrap())
        .collect()
}

/// Loss columns only; the wall clock legitimately differs between runs.
pub fn losses(log: &[LogRow]) -> Vec<(usize, u64, [u32; 3])> {
    log.iter()
        .map(|r| {
            (
                r.epoch,
                r.step,
                [
                    r.losses.total.to_bits(),
                    r.losses.binary.to_bits(),
                    r.losses.full.to_bits(),
                ],
            )
        })
        .collect()
}

fn log_losses(text: &str) -> Vec<String> {
    text.lines()
        .map(|l| l.rsplit_once(' ').unwrap().0.to_string())
        .collect()
}

/// Two identical training runs agree bit for bit in their logs and
/// checkpoint files; a resumed run matches an uninterrupted one; inference
/// does not depend on the thread count.
pub fn determinism() -> Result<(), String> {
    let vols = tiny_volumes(2, 24);
    let refs: Vec<&Volume> = vols.iter().collect();
    let cfg = tiny_config(2);
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut logs = Vec::new();
    let mut finals = Vec::new();
    for run in 0..2 {
        let out = OutputDir {
            dir: dir.path().join(format!("run{run}")),
        };
        let mut state = TrainState::new(&cfg).map_err(|e| e.to_string())?;
        let log = run_training(&refs, &cfg, &mut state, Some(&out), |_| {}).map_err(|e| e.to_string())?;
        let text = std::fs::read_to_string(out.log_path()).map_err(|e| e.to_string())?;
        logs.push((losses(&log), log_losses(&text)));
        let mut files = Vec::new();
        for p in [out.checkpoint_path(1), out.checkpoint_path(2), out.final_path()] {
            files.push(std::fs::read(&p).map_err(|e| format!("{}: {e}", p.display()))?);
        }
        finals.push(files);
    }
    if logs[0] != logs[1] {
        return Err("loss logs differ between identical runs".into());
    }
    if finals[0] != finals[1] {
        return Err("checkpoint files differ between identical runs".into());
    }

    // resume from the epoch-1 checkpoint
    let ck = Checkpoint::read(&dir.path().join("run0").join("epoch_001.ckpt")).map_err(|e| e.to_string())?;
    let mut state = TrainState::from_checkpoint(ck, &cfg).map_err(|e| e.to_string())?;
    let resumed = run_training(&refs, &cfg, &mut state, None, |_| {}).map_err(|e| e.to_string())?;
    let full = &logs[0].0;
    if losses(&resumed) != full[full.len() - resumed.len()..] {
        return Err("resumed run diverged from the uninterrupted one".into());
    }
    if state.checkpoint(&cfg).to_bytes() != finals[0][2] {
        return Err("resumed final checkpoint differs".into());
    }

    let model = Checkpoint::from_bytes(&finals[0][2]).map_err(|e| e.to_string())?.model;
    let vol = &tiny_volumes(1, 30)[0];
    let mut preds = Vec::new();
    for threads in [1, 2, 4, 1] {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| e.to_string())?;
        let labels = pool
            .install(|| predict_volume(vol, &model))
            .map_err(|e| e.to_string())?;
        preds.push((threads, labels.labels));
    }
    if let Some((t, _)) = preds.iter().find(|(_, p)| *p != preds[0].1) {
        return Err(format!("inference with {t} threads differs"));
    }
    Ok(())
}

pub const OVERFIT_TARGET: f32 = 0.05;
pub const OVERFIT_STEPS: usize = 300;

/// Adam steps at the default rate on one fixed mini-batch of the proposed
/// network, stopping once the total loss drops below `OVERFIT_TARGET`.
/// Returns the losses of every step taken.
pub fn overfit(batch_size: usize) -> Vec<f32> {
    let volume = &tiny_volumes(1, 48)[0];
    let cfg = TrainConfig {
        mini_batch_size: batch_size,
        ..TrainConfig::default()
    };
    let batch = sample_patches(volume, batch_size, 0.5, 9, PatchGeometry::PROPOSED).unwrap();
    let mut model = Model::build(cfg.network.clone(), cfg.seed).unwrap();
    let mut adam = AdamState::new(&model.params);
    let mut out = Vec::new();
    while out.len() < OVERFIT_STEPS {
        let total = train_step(&mut model, &mut adam, &batch, &cfg).unwrap().total;
        out.push(total);
        if total < OVERFIT_TARGET {
            break;
        }
    }
    out
}

/// Probe on a random-weight network with full channel widths and a 2^3
/// output block.
pub fn rf_acceptance(voxels: usize, trials: usize) -> RfReport {
    let spec = NetworkSpec {
        output_extent: 2,
        ..NetworkSpec::proposed()
    };
    rf_probe(&Model::build(spec, 7).unwrap(), voxels, trials, 7).unwrap()
}
