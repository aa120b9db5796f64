//! Drives the full-size network to near-zero loss on one repeated mini-batch.
//!
//! ```text
//! cargo run --release --example overfit -- [batch] [max_steps]
//! ```

use std::time::Instant;

use dense3d::data::{generate_phantom, normalize, sample_patches, PhantomSpec};
use dense3d::train::{train_step, AdamState, TrainConfig};
use dense3d::Model;

fn main() -> dense3d::Result<()> {
    let args: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let cfg = TrainConfig {
        mini_batch_size: args.first().copied().unwrap_or(2),
        ..TrainConfig::default()
    };
    let max_steps = args.get(1).copied().unwrap_or(300);
    let vol = normalize(&generate_phantom(&PhantomSpec::random([48; 3], 100))?)?;
    let batch = sample_patches(&vol, cfg.mini_batch_size, 0.5, 9, cfg.network.patch_geometry())?;
    let mut model = Model::build(cfg.network.clone(), cfg.seed)?;
    let mut adam = AdamState::new(&model.params);
    let t = Instant::now();
    for step in 1..=max_steps {
        let l = train_step(&mut model, &mut adam, &batch, &cfg)?;
        println!(
            "step {step:3}: total {:.5}  binary {:.5}  full {:.5}",
            l.total, l.binary, l.full
        );
        if l.total < 0.05 {
            println!("below 0.05 after {step} steps, {:.1?}", t.elapsed());
            break;
        }
    }
    Ok(())
}
