//! Lesion-balanced patch sampling: where the centers land, what the label
//! blocks contain, and how reflect padding fills inputs near the border.
//!
//! ```text
//! cargo run --release --example patches
//! ```

use dense3d::data::{generate_phantom, normalize, reflect_index, sample_patches, PatchGeometry, PhantomSpec};

fn main() -> dense3d::Result<()> {
    let vol = normalize(&generate_phantom(&PhantomSpec::random([48; 3], 3))?)?;
    let geom = PatchGeometry::PROPOSED;
    let batch = sample_patches(&vol, 8, 0.5, 11, geom)?;
    println!(
        "{} patches: inputs {:?} x 2 pathways, margin {} voxels",
        batch.len(),
        batch.inputs_ft.shape(),
        geom.margin()
    );
    let block = geom.output_extent.pow(3);
    for (i, p) in batch.provenance.iter().enumerate() {
        let labels = &batch.labels_full[i * block..(i + 1) * block];
        let mut hist = [0usize; 4];
        for &c in labels {
            hist[c as usize] += 1;
        }
        let center = vol.labels[vol.index(p.center[0], p.center[1], p.center[2])];
        println!("  center {:?} (label {center}): class counts {hist:?}", p.center);
    }
    let mirrored: Vec<usize> = (-4..4).map(|i| reflect_index(i, 48)).collect();
    println!("reflect padding, indices -4..4 -> {mirrored:?}");
    Ok(())
}
