//! Trains every network variant under the same synthetic protocol and ranks
//! them by mean core + enhancing Dice.
//!
//! ```text
//! cargo run --release --example ablation -- [reduced|full]
//! ```

use dense3d::experiment::{run, Protocol};
use dense3d::{NetworkSpec, Variant};

fn main() -> dense3d::Result<()> {
    let protocol = match std::env::args().nth(1).as_deref() {
        Some("full") => Protocol::full(),
        _ => Protocol::reduced(),
    };
    let (train, test) = protocol.phantoms()?;
    let mut rows = Vec::new();
    for variant in Variant::ALL {
        let o = run(
            &protocol,
            NetworkSpec::proposed().with_variant(variant),
            &train,
            &test,
            |_| {},
        )?;
        println!(
            "{variant:17} complete {:.4}  core {:.4}  enhancing {:.4}  ({:.0?} train)",
            o.mean[0], o.mean[1], o.mean[2], o.train_time
        );
        rows.push((variant, o.core_enhancing()));
    }
    rows.sort_by(|a, b| b.1.total_cmp(&a.1));
    println!("ranking by core + enhancing:");
    for (v, s) in rows {
        println!("  {v:17} {s:.4}");
    }
    Ok(())
}
