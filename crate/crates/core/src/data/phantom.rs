//! Synthetic glioma phantoms.
//!
//! A phantom is an ellipsoidal brain with an edema ellipsoid inside it and
//! two disjoint cores (enhancing, necrotic) inside the edema. Intensities are
//! per-region constants, scaled by a smooth polynomial bias field, plus
//! Gaussian noise. Outside the brain every modality is exactly zero.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{voxel_count, Volume};
use crate::config::KeyValues;
use crate::error::{Error, Result};

/// Region order used by the intensity tables: brain, necrotic core, edema,
/// enhancing core (the class-index order).
pub const REGIONS: [&str; 4] = ["brain", "necrotic", "edema", "enhancing"];

/// Mean intensity per modality (FLAIR, T1, T1-CE, T2) and region.
/// T1-CE separates the enhancing core best; FLAIR and T2 separate edema.
pub const DEFAULT_MEANS: [[f32; 4]; 4] = [
    [1.0, 1.5, 2.0, 1.7],
    [1.0, 0.6, 0.85, 0.9],
    [1.0, 0.5, 0.95, 2.2],
    [1.0, 2.2, 1.8, 1.5],
];

/// Axis-aligned ellipsoid in voxel coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ellipsoid {
    pub center: [f64; 3],
    pub radii: [f64; 3],
}

impl Ellipsoid {
    pub fn contains(&self, p: [f64; 3]) -> bool {
        self.level(p) <= 1.0
    }

    /// Squared normalized distance from the center; `<= 1` inside.
    pub fn level(&self, p: [f64; 3]) -> f64 {
        (0..3).map(|i| ((p[i] - self.center[i]) / self.radii[i]).powi(2)).sum()
    }

    pub fn volume(&self) -> f64 {
        4.0 / 3.0 * std::f64::consts::PI * self.radii.iter().product::<f64>()
    }
}

/// Nested lesion regions: both cores must lie inside the edema ellipsoid and
/// must not overlap each other.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TumorSpec {
    pub edema: Ellipsoid,
    pub enhancing: Ellipsoid,
    pub necrotic: Ellipsoid,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhantomSpec {
    pub extents: [usize; 3],
    pub brain: Ellipsoid,
    pub tumor: Option<TumorSpec>,
    /// `means[modality][region]`, see [`REGIONS`].
    pub means: [[f32; 4]; 4],
    /// Per-region noise multipliers, `stds[modality][region] * noise_std`.
    pub stds: [[f32; 4]; 4],
    /// Peak deviation of the multiplicative bias field from 1.
    pub bias_amplitude: f32,
    pub noise_std: f32,
    pub seed: u64,
}

impl PhantomSpec {
    /// A randomly placed tumor in a centered brain, drawn from `seed`.
    pub fn random(extents: [usize; 3], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let e = extents.map(|x| x as f64);
        let mid = e.map(|x| (x - 1.0) / 2.0);
        let brain = Ellipsoid {
            center: mid,
            radii: std::array::from_fn(|i| e[i] * rng.random_range(0.42..0.46)),
        };
        let ed_radii: [f64; 3] = std::array::from_fn(|i| e[i] * rng.random_range(0.16..0.24));
        let ed_center: [f64; 3] = std::array::from_fn(|i| mid[i] + e[i] * rng.random_range(-0.08..0.08));
        let mut u: [f64; 3] = std::array::from_fn(|_| rng.sample(StandardNormal));
        let norm = u.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-9);
        u = u.map(|x| x / norm);
        // cores sit on opposite sides of the edema center along `u`
        let core = |offset: f64, frac: f64| Ellipsoid {
            center: std::array::from_fn(|i| ed_center[i] + offset * u[i] * ed_radii[i]),
            radii: ed_radii.map(|r| frac * r),
        };
        let tumor = TumorSpec {
            edema: Ellipsoid {
                center: ed_center,
                radii: ed_radii,
            },
            enhancing: core(0.45, 0.42),
            necrotic: core(-0.45, 0.38),
        };
        PhantomSpec {
            extents,
            brain,
            tumor: Some(tumor),
            means: DEFAULT_MEANS,
            stds: [[1.0; 4]; 4],
            bias_amplitude: 0.15,
            noise_std: 0.1,
            seed: rng.random(),
        }
    }

    /// The same spec without a lesion.
    pub fn without_tumor(mut self) -> Self {
        self.tumor = None;
        self
    }
}

/// Low-order polynomial on `[-1, 1]^3` with `|p| <= 1`.
struct BiasField {
    coef: [f64; 9],
}

impl BiasField {
    fn random<R: Rng>(rng: &mut R) -> Self {
        let mut coef: [f64; 9] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
        let l1 = coef.iter().map(|c: &f64| c.abs()).sum::<f64>().max(1e-9);
        coef.iter_mut().for_each(|c| *c /= l1);
        BiasField { coef }
    }

    fn eval(&self, p: [f64; 3]) -> f64 {
        let [x, y, z] = p;
        let basis = [x, y, z, x * y, y * z, z * x, x * x, y * y, z * z];
        basis.iter().zip(&self.coef).map(|(b, c)| b * c).sum()
    }
}

fn check_spec(spec: &PhantomSpec) -> Result<usize> {
    let n = voxel_count(spec.extents)?;
    let inside = |e: &Ellipsoid, what: &str| -> Result<()> {
        for i in 0..3 {
            if e.radii[i].is_nan() || e.radii[i] <= 0.0 || !e.center[i].is_finite() {
                return Err(Error::InvalidPhantom(format!("{what} ellipsoid is degenerate")));
            }
            if e.center[i] - e.radii[i] < -0.5 || e.center[i] + e.radii[i] > spec.extents[i] as f64 - 0.5 {
                return Err(Error::InvalidPhantom(format!(
                    "{what} ellipsoid does not fit in extents {:?}",
                    spec.extents
                )));
            }
        }
        Ok(())
    };
    inside(&spec.brain, "brain")?;
    if let Some(t) = &spec.tumor {
        inside(&t.edema, "edema")?;
        inside(&t.enhancing, "enhancing")?;
        inside(&t.necrotic, "necrotic")?;
    }
    if spec.noise_std.is_nan() || spec.noise_std < 0.0 || !(0.0..1.0).contains(&spec.bias_amplitude) {
        return Err(Error::InvalidPhantom(
            "noise_std must be >= 0 and bias_amplitude in [0, 1)".into(),
        ));
    }
    Ok(n)
}

/// Paints labels by ellipsoid membership and samples intensities.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<Volume> {
    let n = check_spec(spec)?;
    let [d, h, w] = spec.extents;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let bias: [BiasField; 4] = std::array::from_fn(|_| BiasField::random(&mut rng));

    let mut labels = vec![0u8; n];
    let mut region = vec![u8::MAX; n];
    let mut i = 0;
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let p = [z as f64, y as f64, x as f64];
                if spec.brain.contains(p) {
                    region[i] = 0;
                }
                if let Some(t) = &spec.tumor {
                    let et = t.enhancing.contains(p);
                    let ncr = t.necrotic.contains(p);
                    if et && ncr {
                        return Err(Error::InvalidPhantom(format!(
                            "enhancing and necrotic cores overlap at voxel {p:?}"
                        )));
                    }
                    if (et || ncr) && !t.edema.contains(p) {
                        return Err(Error::InvalidPhantom(format!(
                            "tumor core leaves the edema at voxel {p:?}"
                        )));
                    }
                    let (label, r) = match (t.edema.contains(p), et, ncr) {
                        (_, true, _) => (4, 3),
                        (_, _, true) => (1, 1),
                        (true, _, _) => (2, 2),
                        _ => (0, region[i]),
                    };
                    if label != 0 && region[i] == u8::MAX {
                        return Err(Error::InvalidPhantom(format!(
                            "lesion outside the brain at voxel {p:?}"
                        )));
                    }
                    labels[i] = label;
                    region[i] = r;
                }
                i += 1;
            }
        }
    }

    let norm = |v: usize, e: usize| {
        if e > 1 {
            2.0 * v as f64 / (e - 1) as f64 - 1.0
        } else {
            0.0
        }
    };
    let modalities: [Vec<f32>; 4] = std::array::from_fn(|m| {
        let mut grid = vec![0.0f32; n];
        let mut i = 0;
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    let r = region[i];
                    if r != u8::MAX {
                        let r = r as usize;
                        let b = 1.0 + spec.bias_amplitude as f64 * bias[m].eval([norm(z, d), norm(y, h), norm(x, w)]);
                        let noise: f64 = rng.sample(StandardNormal);
                        let sd = (spec.noise_std * spec.stds[m][r]) as f64;
                        let v = spec.means[m][r] as f64 * b + sd * noise;
                        // keep brain voxels off the zero background
                        grid[i] = (v as f32).max(1e-3);
                    }
                    i += 1;
                }
            }
        }
        grid
    });
    Volume::new(spec.extents, [1.0; 3], modalities, labels)
}

/// Options for generating a set of phantoms from a `key = value` file.
///
/// Keys: `count`, `extent` (one value or three), `seed`, `noise_std`,
/// `bias_amplitude`, `tumor_free` (how many of the phantoms have no lesion).
#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub count: usize,
    pub extents: [usize; 3],
    pub seed: u64,
    pub noise_std: f32,
    pub bias_amplitude: f32,
    pub tumor_free: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            count: 1,
            extents: [96; 3],
            seed: 0,
            noise_std: 0.1,
            bias_amplitude: 0.15,
            tumor_free: 0,
        }
    }
}

impl SynthConfig {
    pub fn from_key_values(kv: &KeyValues) -> Result<Self> {
        kv.reject_unknown(&["count", "extent", "seed", "noise_std", "bias_amplitude", "tumor_free"])?;
        let d = SynthConfig::default();
        let extents = match kv.get_list::<usize>("extent")?.as_deref() {
            None => d.extents,
            Some(&[e]) => [e; 3],
            Some(&[a, b, c]) => [a, b, c],
            Some(other) => return Err(Error::invalid(format!("extent needs 1 or 3 values, got {other:?}"))),
        };
        let cfg = SynthConfig {
            count: kv.get_or("count", d.count)?,
            extents,
            seed: kv.get_or("seed", d.seed)?,
            noise_std: kv.get_or("noise_std", d.noise_std)?,
            bias_amplitude: kv.get_or("bias_amplitude", d.bias_amplitude)?,
            tumor_free: kv.get_or("tumor_free", d.tumor_free)?,
        };
        if cfg.tumor_free > cfg.count {
            return Err(Error::invalid("tumor_free exceeds count"));
        }
        Ok(cfg)
    }

    /// One spec per phantom; the last `tumor_free` phantoms have no lesion.
    pub fn specs(&self) -> Vec<PhantomSpec> {
        (0..self.count)
            .map(|i| {
                let seed = self.seed ^ (i as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
                let mut s = PhantomSpec::random(self.extents, seed);
                s.noise_std = self.noise_std;
                s.bias_amplitude = self.bias_amplitude;
                if i >= self.count - self.tumor_free {
                    s = s.without_tumor();
                }
                s
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_noise_gives_exact_means() {
        let mut s = PhantomSpec::random([32; 3], 3);
        s.noise_std = 0.0;
        s.bias_amplitude = 0.0;
        let v = generate_phantom(&s).unwrap();
        for m in 0..4 {
            for (i, &l) in v.labels.iter().enumerate() {
                let g = v.modalities[m][i];
                if g == 0.0 {
                    continue;
                }
                let r = crate::data::label_to_class(l).unwrap() as usize;
                assert_eq!(g, s.means[m][r]);
            }
        }
    }

    #[test]
    fn cores_stay_inside_edema() {
        for seed in 0..5 {
            let s = PhantomSpec::random([40; 3], seed);
            let v = generate_phantom(&s).unwrap();
            let ed = s.tumor.unwrap().edema;
            for z in 0..40 {
                for y in 0..40 {
                    for x in 0..40 {
                        let l = v.labels[v.index(z, y, x)];
                        if l == 1 || l == 4 {
                            assert!(ed.contains([z as f64, y as f64, x as f64]));
                        }
                    }
                }
            }
            assert!(v.labels.contains(&1) && v.labels.contains(&4));
        }
    }

    #[test]
    fn overlapping_cores_are_rejected() {
        let mut s = PhantomSpec::random([32; 3], 1);
        let t = s.tumor.as_mut().unwrap();
        t.necrotic = t.enhancing;
        assert!(matches!(generate_phantom(&s), Err(Error::InvalidPhantom(_))));
    }

    #[test]
    fn tumor_free_has_no_lesion() {
        let s = PhantomSpec::random([24; 3], 2).without_tumor();
        let v = generate_phantom(&s).unwrap();
        assert_eq!(v.lesion_voxels(), 0);
        assert!(v.modalities[0].iter().any(|&x| x > 0.0));
    }

    #[test]
    fn synth_config_parses() {
        let kv = KeyValues::parse("count = 3\nextent = 48\ntumor_free = 1\n").unwrap();
        let c = SynthConfig::from_key_values(&kv).unwrap();
        assert_eq!(c.extents, [48; 3]);
        let specs = c.specs();
        assert_eq!(specs.len(), 3);
        assert!(specs[2].tumor.is_none() && specs[0].tumor.is_some());
        assert!(SynthConfig::from_key_values(&KeyValues::parse("bogus = 1").unwrap()).is_err());
    }
}
