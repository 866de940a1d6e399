//! Synthetic angiogram-like frames: a recursively branching vessel tree drawn
//! dark on a bright background, with an illumination ramp and noise.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{GrayImage, Sample};
use crate::error::{Error, Result};
use crate::metrics::{BinaryMask, Spacing};

const VIEW_TAGS: [&str; 4] = ["LCA-LAO", "LCA-RAO", "RCA-LAO", "RCA-RAO"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    /// Side length in pixels; a power of two.
    pub size: usize,
    /// Levels of bifurcation below the root segment.
    pub branch_depth: usize,
    /// Leaf and root vessel widths in pixels.
    pub vessel_width_range: [f64; 2],
    pub noise_sigma: f64,
    /// Strength of the linear illumination ramp across the frame.
    pub illumination_gradient: f64,
    pub background: f64,
    pub vessel_intensity: f64,
    pub spacing_mm: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            size: 64,
            branch_depth: 3,
            vessel_width_range: [1.5, 4.0],
            noise_sigma: 0.03,
            illumination_gradient: 0.15,
            background: 0.85,
            vessel_intensity: 0.35,
            spacing_mm: 0.30,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.size < 8 || !self.size.is_power_of_two() {
            return Err(Error::Config(format!(
                "synthetic size must be a power of two >= 8, got {}",
                self.size
            )));
        }
        let [lo, hi] = self.vessel_width_range;
        if !(lo > 0.0 && hi >= lo) {
            return Err(Error::Config(format!(
                "vessel_width_range must satisfy 0 < min <= max, got [{lo}, {hi}]"
            )));
        }
        if !(self.noise_sigma >= 0.0 && self.illumination_gradient >= 0.0) {
            return Err(Error::Config(
                "noise_sigma and illumination_gradient must be non-negative".into(),
            ));
        }
        for (name, v) in [
            ("background", self.background),
            ("vessel_intensity", self.vessel_intensity),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        Spacing::isotropic(self.spacing_mm).validate()
    }
}

/// Tapered line piece between two centers.
struct Capsule {
    a: (f64, f64),
    b: (f64, f64),
    ra: f64,
    rb: f64,
}

impl Capsule {
    fn covers(&self, p: (f64, f64)) -> bool {
        let (dx, dy) = (self.b.0 - self.a.0, self.b.1 - self.a.1);
        let len2 = dx * dx + dy * dy;
        let t = if len2 == 0.0 {
            0.0
        } else {
            (((p.0 - self.a.0) * dx + (p.1 - self.a.1) * dy) / len2).clamp(0.0, 1.0)
        };
        let (qx, qy) = (self.a.0 + t * dx - p.0, self.a.1 + t * dy - p.1);
        let r = self.ra + t * (self.rb - self.ra);
        qx * qx + qy * qy <= r * r
    }
}

struct Tree {
    rng: ChaCha8Rng,
    min_width: f64,
    pieces: Vec<Capsule>,
}

impl Tree {
    /// One quadratic-curve segment from `start`, then two children.
    fn grow(&mut self, start: (f64, f64), angle: f64, length: f64, width: f64, depth: usize) {
        let dir = (angle.cos(), angle.sin());
        let end = (start.0 + length * dir.0, start.1 + length * dir.1);
        let bend = self.rng.random_range(-0.3..0.3) * length;
        let ctrl = (
            0.5 * (start.0 + end.0) - bend * dir.1,
            0.5 * (start.1 + end.1) + bend * dir.0,
        );
        let end_width = (width * 0.85).max(self.min_width);
        let steps = ((length / 1.5).ceil() as usize).max(4);
        let at = |t: f64| {
            let u = 1.0 - t;
            (
                u * u * start.0 + 2.0 * u * t * ctrl.0 + t * t * end.0,
                u * u * start.1 + 2.0 * u * t * ctrl.1 + t * t * end.1,
            )
        };
        for s in 0..steps {
            let (t0, t1) = (s as f64 / steps as f64, (s + 1) as f64 / steps as f64);
            self.pieces.push(Capsule {
                a: at(t0),
                b: at(t1),
                ra: 0.5 * (width + t0 * (end_width - width)),
                rb: 0.5 * (width + t1 * (end_width - width)),
            });
        }
        if depth == 0 {
            return;
        }
        let child_width = (end_width * self.rng.random_range(0.65..0.8)).max(self.min_width);
        let out_angle = (end.1 - ctrl.1).atan2(end.0 - ctrl.0);
        for sign in [-1.0, 1.0] {
            let spread = self.rng.random_range(0.35..0.8);
            let child_len = length * self.rng.random_range(0.55..0.75);
            self.grow(end, out_angle + sign * spread, child_len, child_width, depth - 1);
        }
    }
}

/// Render one sample; a pure function of `config`.
pub fn generate(config: &SynthConfig) -> Result<Sample> {
    config.validate()?;
    let n = config.size;
    let size = n as f64;
    let [wmin, wmax] = config.vessel_width_range;
    let mut tree = Tree {
        rng: ChaCha8Rng::seed_from_u64(config.seed),
        min_width: wmin,
        pieces: Vec::new(),
    };
    let start = (tree.rng.random_range(0.25..0.75) * size, -0.5);
    let angle = std::f64::consts::FRAC_PI_2 + tree.rng.random_range(-0.4..0.4);
    let length = size * tree.rng.random_range(0.4..0.55);
    let width = wmax * tree.rng.random_range(0.85..1.0);
    tree.grow(start, angle, length, width, config.branch_depth);

    let mut mask = vec![0u8; n * n];
    for cap in &tree.pieces {
        let r = cap.ra.max(cap.rb);
        let x0 = (cap.a.0.min(cap.b.0) - r).floor().max(0.0) as usize;
        let x1 = (cap.a.0.max(cap.b.0) + r).ceil().min(size - 1.0);
        let y0 = (cap.a.1.min(cap.b.1) - r).floor().max(0.0) as usize;
        let y1 = (cap.a.1.max(cap.b.1) + r).ceil().min(size - 1.0);
        if x1 < 0.0 || y1 < 0.0 {
            continue;
        }
        for y in y0..=y1 as usize {
            for x in x0..=x1 as usize {
                if cap.covers((x as f64, y as f64)) {
                    mask[y * n + x] = 1;
                }
            }
        }
    }

    let mut rng = tree.rng;
    let theta = rng.random_range(0.0..std::f64::consts::TAU);
    let (ct, st) = (theta.cos(), theta.sin());
    let noise = (config.noise_sigma > 0.0)
        .then(|| Normal::new(0.0, config.noise_sigma).expect("sigma is positive"));
    let image: Vec<f32> = (0..n * n)
        .map(|i| {
            let (y, x) = ((i / n) as f64, (i % n) as f64);
            let base = if mask[i] != 0 {
                config.vessel_intensity
            } else {
                config.background
            };
            let ramp = config.illumination_gradient
                * ((x / (size - 1.0) - 0.5) * ct + (y / (size - 1.0) - 0.5) * st);
            let eps = noise.as_ref().map_or(0.0, |d| d.sample(&mut rng));
            (base + ramp + eps).clamp(0.0, 1.0) as f32
        })
        .collect();

    let spacing = Spacing::isotropic(config.spacing_mm);
    Sample::new(
        format!("synth-{:016x}", config.seed),
        GrayImage::from_raw(n, n, image),
        BinaryMask::new(n, n, mask, spacing)?,
        format!("patient-{:016x}", config.seed),
        VIEW_TAGS[(config.seed % VIEW_TAGS.len() as u64) as usize],
    )
}

/// Per-sample seed derived from a run seed and an index (splitmix64 mix).
pub fn sample_seed(run_seed: u64, index: u64) -> u64 {
    let mut z = (run_seed ^ index).wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// `count` samples, grouped `images_per_patient` to a patient, with ids
/// `img-0000`, `img-0001`, ...
pub fn generate_dataset(
    config: &SynthConfig,
    count: usize,
    images_per_patient: usize,
) -> Result<Vec<Sample>> {
    if images_per_patient == 0 {
        return Err(Error::Config("images_per_patient must be positive".into()));
    }
    (0..count)
        .map(|i| {
            let cfg = SynthConfig {
                seed: sample_seed(config.seed, i as u64),
                ..config.clone()
            };
            let mut s = generate(&cfg)?;
            s.id = format!("img-{i:04}");
            s.patient_id = format!("p{:03}", i / images_per_patient);
            s.view_tag = VIEW_TAGS[i % VIEW_TAGS.len()].to_string();
            Ok(s)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_sample() {
        let cfg = SynthConfig {
            seed: 42,
            ..Default::default()
        };
        assert_eq!(generate(&cfg).unwrap(), generate(&cfg).unwrap());
        let other = SynthConfig { seed: 43, ..cfg.clone() };
        assert_ne!(generate(&other).unwrap().mask, generate(&cfg).unwrap().mask);
    }

    #[test]
    fn noiseless_render_is_two_level() {
        let cfg = SynthConfig {
            noise_sigma: 0.0,
            illumination_gradient: 0.0,
            seed: 5,
            ..Default::default()
        };
        let s = generate(&cfg).unwrap();
        for (&v, &m) in s.image.data().iter().zip(s.mask.data()) {
            let want = if m == 1 { 0.35f32 } else { 0.85 };
            assert_eq!(v, want);
        }
    }

    #[test]
    fn rejects_bad_config() {
        let bad = SynthConfig {
            size: 60,
            ..Default::default()
        };
        assert!(generate(&bad).is_err());
        let bad = SynthConfig {
            vessel_width_range: [0.0, 1.0],
            ..Default::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn dataset_groups_patients() {
        let ds = generate_dataset(&SynthConfig::default(), 7, 3).unwrap();
        let p: Vec<&str> = ds.iter().map(|s| s.patient_id.as_str()).collect();
        assert_eq!(p, ["p000", "p000", "p000", "p001", "p001", "p001", "p002"]);
        assert_eq!(ds[6].id, "img-0006");
    }
}
