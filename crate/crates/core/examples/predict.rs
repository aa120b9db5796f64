//! Sliding-window segmentation of a whole volume and Dice evaluation against
//! its ground truth. Uses a trained checkpoint if one is given, otherwise
//! briefly trains a narrow network so the example runs on its own.
//!
//! ```text
//! cargo run --release --example predict -- [checkpoint.ckpt]
//! ```

use std::path::Path;
use std::time::Instant;

use dense3d::data::{generate_phantom, normalize, PhantomSpec};
use dense3d::infer::{predict_head, predict_volume, tile_origins, Head};
use dense3d::metrics::{evaluate, format_report};
use dense3d::train::{run_training, TrainConfig, TrainState};
use dense3d::{Checkpoint, Model, NetworkSpec, Variant};

fn quick_model() -> dense3d::Result<Model> {
    let cfg = TrainConfig {
        network: NetworkSpec::narrow(Variant::Proposed),
        epochs: 1,
        patches_per_epoch: 16,
        mini_batch_size: 4,
        ..TrainConfig::default()
    };
    let vol = normalize(&generate_phantom(&PhantomSpec::random([40; 3], 1))?)?;
    let mut state = TrainState::new(&cfg)?;
    run_training(&[&vol], &cfg, &mut state, None, |_| {})?;
    Ok(state.model)
}

fn main() -> dense3d::Result<()> {
    let model = match std::env::args().nth(1) {
        Some(p) => Checkpoint::read(Path::new(&p))?.model,
        None => quick_model()?,
    };
    let vol = normalize(&generate_phantom(&PhantomSpec::random([40, 44, 50], 7))?)?;
    let tiles = tile_origins(vol.extents, model.spec.output_extent);
    println!(
        "{:?} volume, {} tiles of {}^3",
        vol.extents,
        tiles.len(),
        model.spec.output_extent
    );

    let t = Instant::now();
    let pred = predict_volume(&vol, &model)?;
    println!("predicted in {:.2?}", t.elapsed());
    let binary = predict_head(&vol, &model, Head::Binary)?;
    let whole = binary.iter().filter(|&&b| b == 1).count();
    println!(
        "binary head (diagnostics only): {whole} whole-tumor voxels, truth {}",
        vol.lesion_voxels()
    );

    let e = evaluate(&pred, &vol.label_map())?;
    print!("{}", format_report(&[("phantom7".to_string(), e)]));
    Ok(())
}
