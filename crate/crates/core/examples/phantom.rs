//! Generates a synthetic glioma phantom, normalizes it and writes it as an
//! MVOL file, then reads it back.
//!
//! ```text
//! cargo run --release --example phantom -- [extent] [seed]
//! ```

use dense3d::data::{generate_phantom, normalize, read_volume, write_volume, Modality, PhantomSpec};

fn main() -> dense3d::Result<()> {
    let args: Vec<u64> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let extent = args.first().copied().unwrap_or(64) as usize;
    let seed = args.get(1).copied().unwrap_or(0);
    let spec = PhantomSpec::random([extent; 3], seed);
    let raw = generate_phantom(&spec)?;

    let mut counts = [0usize; 5];
    for &l in &raw.labels {
        counts[l as usize] += 1;
    }
    println!("{extent}^3 phantom, seed {seed}");
    println!(
        "  necrotic {}  edema {}  enhancing {}  (lesion {})",
        counts[1],
        counts[2],
        counts[4],
        raw.lesion_voxels()
    );
    let brain = raw.modality(Modality::Flair).iter().filter(|&&v| v != 0.0).count();
    println!("  brain voxels {brain} of {}", raw.voxels());

    let vol = normalize(&raw)?;
    for m in Modality::ALL {
        let xs: Vec<f32> = vol.modality(m).iter().copied().filter(|&v| v != 0.0).collect();
        let mean = xs.iter().map(|&v| v as f64).sum::<f64>() / xs.len() as f64;
        let var = xs.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / xs.len() as f64;
        println!(
            "  {:5} normalized over the brain: mean {mean:+.4}, std {:.4}",
            m.name(),
            var.sqrt()
        );
    }

    let path = std::env::temp_dir().join(format!("phantom_{seed}.mvol"));
    write_volume(&path, &vol)?;
    let back = read_volume(&path)?;
    println!(
        "wrote {} ({} bytes), read back identical: {}",
        path.display(),
        std::fs::metadata(&path).map_or(0, |m| m.len()),
        back == vol
    );
    Ok(())
}
