//! Black-box receptive-field probe: single-voxel input perturbations outside
//! an output voxel's 27^3 window leave its scores bit-identical, while those
//! inside its 15^3 stage-1 window move the stage-1 scores.
//!
//! ```text
//! cargo run --release --example rf_probe -- [voxels] [trials] [seed]
//! ```

use std::time::Instant;

use dense3d::infer::rf_probe;
use dense3d::{Model, NetworkSpec};

fn main() -> dense3d::Result<()> {
    let args: Vec<u64> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let voxels = args.first().copied().unwrap_or(5) as usize;
    let trials = args.get(1).copied().unwrap_or(20) as usize;
    let seed = args.get(2).copied().unwrap_or(0);
    // full widths, 2^3 output block keeps each forward pass small
    let spec = NetworkSpec {
        output_extent: 2,
        ..NetworkSpec::proposed()
    };
    let model = Model::build(spec, seed)?;
    let t = Instant::now();
    let report = rf_probe(&model, voxels, trials, seed)?;
    println!("{report}");
    println!("{:.1?}", t.elapsed());
    Ok(())
}
