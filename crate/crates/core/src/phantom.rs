//! Synthetic labelled volumes.
//!
//! Tube phantoms follow a random-walk centerline along z with a disk cross
//! section in every slice. Blob phantoms are unions of ellipsoids. Both add
//! background distractor spheres drawn from the foreground intensity
//! distribution, so intensity alone does not separate the classes.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{plan_patches, Phase, PatchPolicy, Volume, VolumeMeta};
use crate::tensor::Tensor;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PhantomKind {
    Tube,
    Blob,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomSpec {
    pub kind: PhantomKind,
    /// `(X, Y, L)`.
    pub dims: [usize; 3],
    /// Inclusive radius range in voxels.
    pub radius: [f64; 2],
    /// Per-slice standard deviation of the centerline step (tube only).
    pub wobble: f64,
    pub foreground_mean: f64,
    pub foreground_sigma: f64,
    pub background_mean: f64,
    pub background_sigma: f64,
    pub distractors: usize,
    /// Distractor radius as a fraction of the structure radius.
    pub distractor_scale: f64,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            kind: PhantomKind::Tube,
            dims: [64, 64, 32],
            radius: [5.0, 7.0],
            wobble: 0.5,
            foreground_mean: 0.7,
            foreground_sigma: 0.1,
            background_mean: 0.3,
            background_sigma: 0.1,
            distractors: 3,
            distractor_scale: 0.5,
            seed: 0,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        let [x, y, l] = self.dims;
        if x < 8 || y < 8 || l == 0 {
            return Err(Error::InvalidShape(format!("phantom dims {:?} are degenerate", self.dims)));
        }
        let [r0, r1] = self.radius;
        if !(r0 > 0.0 && r0 <= r1 && r1 < x.min(y) as f64 / 4.0) {
            return Err(Error::InvalidData(format!(
                "radius range {:?} must be positive, ordered and below a quarter of the in-plane extent",
                self.radius
            )));
        }
        let finite = [
            self.wobble,
            self.foreground_mean,
            self.foreground_sigma,
            self.background_mean,
            self.background_sigma,
            self.distractor_scale,
        ];
        if finite.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidData("phantom intensities and scales must be finite and non-negative".into()));
        }
        Ok(())
    }

    /// Same spec with the seed replaced, for generating a series.
    pub fn with_seed(&self, seed: u64) -> Self {
        PhantomSpec { seed, ..self.clone() }
    }
}

fn sample_sigma(rng: &mut ChaCha8Rng, mean: f64, sigma: f64) -> f64 {
    if sigma == 0.0 {
        return mean;
    }
    Normal::new(mean, sigma).expect("sigma is positive").sample(rng)
}

fn reflect(v: f64, lo: f64, hi: f64) -> f64 {
    if hi <= lo {
        return (lo + hi) / 2.0;
    }
    let mut v = v;
    while v < lo || v > hi {
        if v < lo {
            v = 2.0 * lo - v;
        }
        if v > hi {
            v = 2.0 * hi - v;
        }
    }
    v
}

/// Image and label volumes, both tagged with `source`.
pub fn generate(spec: &PhantomSpec, source: &str) -> Result<(Volume, Volume)> {
    spec.validate()?;
    let [nx, ny, nl] = spec.dims;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let radius = rng.gen_range(spec.radius[0]..=spec.radius[1]);
    let meta = VolumeMeta::label(nx, ny, nl, String::from(source));
    let shape = meta.shape()?;
    let mut label = vec![0.0; shape.len()];
    let idx = |x: usize, y: usize, z: usize| shape.index(0, y, x, z, 0);

    match spec.kind {
        PhantomKind::Tube => {
            let margin = 2.0 * radius;
            let (hi_x, hi_y) = (nx as f64 - 1.0 - margin, ny as f64 - 1.0 - margin);
            let mut cx = rng.gen_range(margin..=hi_x.max(margin));
            let mut cy = rng.gen_range(margin..=hi_y.max(margin));
            for z in 0..nl {
                if z > 0 {
                    cx = reflect(cx + sample_sigma(&mut rng, 0.0, spec.wobble), margin, hi_x);
                    cy = reflect(cy + sample_sigma(&mut rng, 0.0, spec.wobble), margin, hi_y);
                }
                for y in 0..ny {
                    for x in 0..nx {
                        let (dx, dy) = (x as f64 - cx, y as f64 - cy);
                        if dx * dx + dy * dy <= radius * radius {
                            label[idx(x, y, z)] = 1.0;
                        }
                    }
                }
            }
        }
        PhantomKind::Blob => {
            let count = rng.gen_range(1..=3);
            for _ in 0..count {
                let r = [0, 1, 2].map(|_| rng.gen_range(spec.radius[0]..=spec.radius[1]));
                let c = [0, 1, 2].map(|a| {
                    let n = spec.dims[a] as f64;
                    let m = r[a].min(n / 2.0 - 0.5);
                    rng.gen_range(m..=n - 1.0 - m)
                });
                for z in 0..nl {
                    for y in 0..ny {
                        for x in 0..nx {
                            let q = [x, y, z]
                                .iter()
                                .enumerate()
                                .map(|(a, &p)| {
                                    let t = (p as f64 - c[a]) / r[a];
                                    t * t
                                })
                                .sum::<f64>();
                            if q <= 1.0 {
                                label[idx(x, y, z)] = 1.0;
                            }
                        }
                    }
                }
            }
        }
    }

    let mut bright: Vec<bool> = label.iter().map(|&v| v == 1.0).collect();
    let rd = (radius * spec.distractor_scale).max(1.0);
    for _ in 0..spec.distractors {
        let c = [0, 1, 2].map(|a| rng.gen_range(0.0..spec.dims[a] as f64));
        for z in 0..nl {
            for y in 0..ny {
                for x in 0..nx {
                    let d2: f64 = [x, y, z].iter().zip(&c).map(|(&p, &q)| (p as f64 - q) * (p as f64 - q)).sum();
                    if d2 <= rd * rd {
                        bright[idx(x, y, z)] = true;
                    }
                }
            }
        }
    }

    let image: Vec<f64> = bright
        .iter()
        .map(|&b| {
            let v = if b {
                sample_sigma(&mut rng, spec.foreground_mean, spec.foreground_sigma)
            } else {
                sample_sigma(&mut rng, spec.background_mean, spec.background_sigma)
            };
            v.clamp(0.0, 1.0)
        })
        .collect();

    let image = Volume::new(VolumeMeta::image(nx, ny, nl, String::from(source)), Tensor::from_vec(shape, image)?)?;
    let label = Volume::new(meta, Tensor::from_vec(shape, label)?)?;
    Ok((image, label))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImbalanceReport {
    /// Foreground fraction of every training patch, in plan order.
    pub fractions: Vec<f64>,
    /// Patches without any foreground voxel.
    pub empty: usize,
}

impl ImbalanceReport {
    pub fn empty_fraction(&self) -> f64 {
        if self.fractions.is_empty() {
            0.0
        } else {
            self.empty as f64 / self.fractions.len() as f64
        }
    }
}

/// Foreground fraction of each training-phase patch of `label` under `policy`.
pub fn imbalance_report(label: &Volume, policy: &PatchPolicy) -> Result<ImbalanceReport> {
    let plan = plan_patches(&label.meta, policy, Phase::Train)?;
    let mut fractions = Vec::with_capacity(plan.len());
    for i in 0..plan.len() {
        let p = crate::data::extract(&label.data, &plan, i)?;
        fractions.push(p.sum() / p.len() as f64);
    }
    let empty = fractions.iter().filter(|&&f| f == 0.0).count();
    Ok(ImbalanceReport { fractions, empty })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{check_binary, VolumeKind};

    #[test]
    fn tube_hits_every_slice() {
        let spec = PhantomSpec { radius: [4.0, 4.0], ..PhantomSpec::default() };
        let (image, label) = generate(&spec, "t0").unwrap();
        assert_eq!(image.meta.kind, VolumeKind::Image);
        check_binary(&label.data).unwrap();
        let per_slice = label.data.slice_z(0, 1).unwrap().sum();
        let frac = per_slice / (64.0 * 64.0);
        assert!((frac - core::f64::consts::PI * 16.0 / 4096.0).abs() < 0.004, "{frac}");
        for z in 0..32 {
            assert!(label.data.slice_z(z, 1).unwrap().sum() > 0.0);
        }
        assert!(image.data.as_slice().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn deterministic_by_seed() {
        for kind in [PhantomKind::Tube, PhantomKind::Blob] {
            let spec = PhantomSpec { kind, seed: 9, ..PhantomSpec::default() };
            let a = generate(&spec, "a").unwrap();
            let b = generate(&spec, "a").unwrap();
            assert_eq!(a, b);
            let c = generate(&spec.with_seed(10), "a").unwrap();
            assert_ne!(a.1, c.1);
        }
    }

    #[test]
    fn invalid_specs() {
        let too_wide = PhantomSpec { radius: [5.0, 16.0], ..PhantomSpec::default() };
        assert!(generate(&too_wide, "x").is_err());
        let tiny = PhantomSpec { dims: [4, 4, 4], ..PhantomSpec::default() };
        assert!(generate(&tiny, "x").is_err());
    }

    #[test]
    fn imbalance() {
        let spec = PhantomSpec { dims: [256, 256, 64], seed: 1, ..PhantomSpec::default() };
        let (_, label) = generate(&spec, "big").unwrap();
        let slab = imbalance_report(&label, &PatchPolicy::patch512()).unwrap();
        assert_eq!(slab.fractions.len(), 57);
        assert_eq!(slab.empty, 0);
        let cubes = imbalance_report(&label, &PatchPolicy::patch64()).unwrap();
        assert!(cubes.empty_fraction() > 0.5, "{}", cubes.empty_fraction());

        let ones = Volume::new(
            VolumeMeta::label(16, 16, 8, "ones"),
            Tensor::new_filled(VolumeMeta::label(16, 16, 8, "").shape().unwrap(), 1.0).unwrap(),
        )
        .unwrap();
        let all = imbalance_report(&ones, &PatchPolicy::cube(8)).unwrap();
        assert!(all.fractions.iter().all(|&f| f == 1.0));
    }
}
