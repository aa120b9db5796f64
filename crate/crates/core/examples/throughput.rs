//! Times forward and training steps of the full-size network on random
//! patches.
//!
//! ```text
//! cargo run --release --example throughput -- [batch] [steps]
//! ```

use std::time::Instant;

use dense3d::data::{generate_phantom, normalize, sample_patches, PhantomSpec};
use dense3d::layers::Mode;
use dense3d::train::{train_step, AdamState, TrainConfig};
use dense3d::{Model, NetworkSpec};

fn main() -> dense3d::Result<()> {
    let args: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let batch = args.first().copied().unwrap_or(4);
    let steps = args.get(1).copied().unwrap_or(3);
    let spec = NetworkSpec::proposed();
    let vol = normalize(&generate_phantom(&PhantomSpec::random([48; 3], 1))?)?;
    let patches = sample_patches(&vol, batch, 0.5, 7, spec.patch_geometry())?;
    let cfg = TrainConfig::default();
    let mut model = Model::build(spec, 0)?;
    let mut adam = AdamState::new(&model.params);

    for mode in [Mode::Infer, Mode::Infer, Mode::Train] {
        let t = Instant::now();
        model.run(patches.inputs_ft.clone(), patches.inputs_t1.clone(), mode)?;
        println!("{mode:?} forward, batch {batch}: {:.2?}", t.elapsed());
    }
    for i in 0..steps {
        let t = Instant::now();
        let l = train_step(&mut model, &mut adam, &patches, &cfg)?;
        println!("train step {i}: {:.2?}  loss {:.4}", t.elapsed(), l.total);
    }
    Ok(())
}
