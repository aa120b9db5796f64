//! Stage-by-stage shapes, channel counts and receptive fields of every
//! network variant, plus parameter counts.
//!
//! ```text
//! cargo run --release --example architecture
//! ```

use dense3d::layers::receptive_field;
use dense3d::{Model, NetworkSpec, Variant};

fn main() -> dense3d::Result<()> {
    for variant in Variant::ALL {
        let spec = NetworkSpec::proposed().with_variant(variant);
        spec.check_structure()?;
        let model = Model::<f32>::build(spec.clone(), 0)?;
        let weights: usize = model.params.learnable().map(|(_, t)| t.len()).sum();
        println!(
            "{variant}: input {0}^3 -> output {1}^3, extractors {2:?}, {weights} weights",
            spec.input_extent(),
            spec.output_extent,
            spec.extractors()
        );
        for (i, s) in spec.ledger().iter().enumerate() {
            let what = if i == 0 {
                "initial conv".to_string()
            } else {
                format!("stage {i}")
            };
            println!("  {what:12} {s}");
        }
    }
    // six 3^3 convs plus a 1^3 transition per stage, after one initial 3^3
    let mut layers = vec![(3, 1)];
    for _ in 0..2 {
        layers.extend([(3, 1); 6]);
        layers.push((1, 1));
    }
    println!("receptive field of the layer list: {}^3", receptive_field(&layers)?);
    Ok(())
}
