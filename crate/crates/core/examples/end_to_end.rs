//! Trains a network on synthetic phantoms and scores it on held-out ones.
//!
//! ```text
//! cargo run --release --example end_to_end -- [reduced|full] [variant]
//! ```

use dense3d::experiment::{run, Protocol};
use dense3d::metrics::format_report;
use dense3d::{NetworkSpec, Variant};

fn main() -> dense3d::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let protocol = match args.first().map(String::as_str) {
        Some("full") => Protocol::full(),
        _ => Protocol::reduced(),
    };
    let variant: Variant = args.get(1).map_or(Ok(Variant::Proposed), |s| s.parse())?;
    println!("{protocol:?}, variant {variant}");
    let (train, test) = protocol.phantoms()?;
    let outcome = run(
        &protocol,
        NetworkSpec::proposed().with_variant(variant),
        &train,
        &test,
        |row| {
            if row.step % 10 == 0 {
                println!("{row}");
            }
        },
    )?;
    let rows: Vec<(String, _)> = outcome
        .evaluations
        .iter()
        .enumerate()
        .map(|(i, e)| (format!("test{i}"), *e))
        .collect();
    print!("{}", format_report(&rows));
    println!("train {:.1?}, test {:.1?}", outcome.train_time, outcome.test_time);
    Ok(())
}
