//! A short training run with checkpoints and a metrics log, followed by a
//! resume from the first epoch that reproduces the same final weights.
//!
//! ```text
//! cargo run --release --example training
//! ```

use dense3d::data::{generate_phantom, normalize, PhantomSpec};
use dense3d::train::{run_training, OutputDir, TrainConfig, TrainState};
use dense3d::{Checkpoint, NetworkSpec, Variant};

fn main() -> dense3d::Result<()> {
    let cfg = TrainConfig {
        network: NetworkSpec::narrow(Variant::Proposed),
        epochs: 2,
        patches_per_epoch: 8,
        mini_batch_size: 2,
        seed: 5,
        ..TrainConfig::default()
    };
    let volumes = (0..2)
        .map(|i| normalize(&generate_phantom(&PhantomSpec::random([32; 3], i))?))
        .collect::<dense3d::Result<Vec<_>>>()?;
    let refs: Vec<_> = volumes.iter().collect();

    let out = OutputDir {
        dir: std::env::temp_dir().join("dense3d_training"),
    };
    let _ = std::fs::remove_dir_all(&out.dir);
    let mut state = TrainState::new(&cfg)?;
    run_training(&refs, &cfg, &mut state, Some(&out), |row| println!("{row}"))?;
    println!("{}:", out.dir.display());
    let mut names: Vec<_> = std::fs::read_dir(&out.dir)
        .map_err(|e| dense3d::Error::io(&out.dir, e))?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name())
        .collect();
    names.sort();
    for n in names {
        println!("  {}", n.to_string_lossy());
    }

    let first = Checkpoint::read(&out.checkpoint_path(1))?;
    let mut resumed = TrainState::from_checkpoint(first, &cfg)?;
    run_training(&refs, &cfg, &mut resumed, None, |_| {})?;
    println!(
        "resumed from epoch 1, final weights identical: {}",
        resumed.model.params.bit_eq(&state.model.params)
    );
    Ok(())
}
