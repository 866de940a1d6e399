//! Paired image/mask augmentation.
//!
//! Geometric ops move image and mask together; the image is resampled
//! bilinearly and the mask by nearest neighbour. Intensity ops touch the image
//! only. Uncovered pixels take the background value (1.0 image, 0 mask).

use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{GrayImage, Sample};
use crate::error::{Error, Result};
use crate::metrics::BinaryMask;

const IMAGE_FILL: f32 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentKind {
    Hflip,
    Vflip,
    Rotate,
    Scale,
    Crop,
    Shift,
    GaussNoise,
    GaussBlur,
}

impl AugmentKind {
    /// Application order of [`random_augment`]: geometric first, then
    /// intensity.
    pub const ALL: [AugmentKind; 8] = [
        AugmentKind::Hflip,
        AugmentKind::Vflip,
        AugmentKind::Rotate,
        AugmentKind::Scale,
        AugmentKind::Crop,
        AugmentKind::Shift,
        AugmentKind::GaussNoise,
        AugmentKind::GaussBlur,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AugmentKind::Hflip => "hflip",
            AugmentKind::Vflip => "vflip",
            AugmentKind::Rotate => "rotate",
            AugmentKind::Scale => "scale",
            AugmentKind::Crop => "crop",
            AugmentKind::Shift => "shift",
            AugmentKind::GaussNoise => "gauss_noise",
            AugmentKind::GaussBlur => "gauss_blur",
        }
    }

    pub fn is_geometric(self) -> bool {
        !matches!(self, AugmentKind::GaussNoise | AugmentKind::GaussBlur)
    }
}

impl FromStr for AugmentKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Usage(format!("unknown augmentation '{s}'")))
    }
}

/// One augmentation with its parameters fixed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AugmentOp {
    Hflip,
    Vflip,
    /// About the image center.
    Rotate { degrees: f64 },
    /// About the image center; > 1 zooms in.
    Scale { factor: f64 },
    /// Keep the window and re-pad it, centered, to the original size.
    Crop {
        top: usize,
        left: usize,
        height: usize,
        width: usize,
    },
    /// Move content down by `dy` and right by `dx` pixels.
    Shift { dy: i64, dx: i64 },
    GaussNoise { sigma: f64, seed: u64 },
    GaussBlur { sigma: f64 },
}

impl AugmentOp {
    pub fn kind(&self) -> AugmentKind {
        match self {
            AugmentOp::Hflip => AugmentKind::Hflip,
            AugmentOp::Vflip => AugmentKind::Vflip,
            AugmentOp::Rotate { .. } => AugmentKind::Rotate,
            AugmentOp::Scale { .. } => AugmentKind::Scale,
            AugmentOp::Crop { .. } => AugmentKind::Crop,
            AugmentOp::Shift { .. } => AugmentKind::Shift,
            AugmentOp::GaussNoise { .. } => AugmentKind::GaussNoise,
            AugmentOp::GaussBlur { .. } => AugmentKind::GaussBlur,
        }
    }

    pub fn apply(&self, sample: &Sample) -> Sample {
        let (h, w) = (sample.image.height, sample.image.width);
        let (image, mask) = match *self {
            AugmentOp::Hflip => remap(sample, |r, c| Some((r, w - 1 - c))),
            AugmentOp::Vflip => remap(sample, |r, c| Some((h - 1 - r, c))),
            AugmentOp::Shift { dy, dx } => remap(sample, |r, c| {
                let (sr, sc) = (r as i64 - dy, c as i64 - dx);
                ((0..h as i64).contains(&sr) && (0..w as i64).contains(&sc))
                    .then_some((sr as usize, sc as usize))
            }),
            AugmentOp::Crop {
                top,
                left,
                height,
                width,
            } => {
                let (oy, ox) = ((h - height) / 2, (w - width) / 2);
                remap(sample, |r, c| {
                    ((oy..oy + height).contains(&r) && (ox..ox + width).contains(&c))
                        .then(|| (r - oy + top, c - ox + left))
                })
            }
            AugmentOp::Rotate { degrees } => {
                let (s, co) = degrees.to_radians().sin_cos();
                warp(sample, |y, x| (co * y - s * x, s * y + co * x))
            }
            AugmentOp::Scale { factor } => warp(sample, |y, x| (y / factor, x / factor)),
            AugmentOp::GaussNoise { sigma, seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let dist = Normal::new(0.0, sigma).expect("sigma is finite");
                let data = sample
                    .image
                    .data
                    .iter()
                    .map(|&v| (v as f64 + dist.sample(&mut rng)).clamp(0.0, 1.0) as f32)
                    .collect();
                (GrayImage::from_raw(h, w, data), sample.mask.clone())
            }
            AugmentOp::GaussBlur { sigma } => (blur(&sample.image, sigma), sample.mask.clone()),
        };
        Sample {
            image,
            mask,
            ..sample.clone()
        }
    }
}

/// Integer resampling: output `(r, c)` reads input `src(r, c)` or fill.
fn remap(
    sample: &Sample,
    src: impl Fn(usize, usize) -> Option<(usize, usize)>,
) -> (GrayImage, BinaryMask) {
    let (h, w) = (sample.image.height, sample.image.width);
    let mut img = vec![IMAGE_FILL; h * w];
    let mut m = vec![0u8; h * w];
    for r in 0..h {
        for c in 0..w {
            if let Some((sr, sc)) = src(r, c) {
                img[r * w + c] = sample.image.get(sr, sc);
                m[r * w + c] = sample.mask.get(sr, sc) as u8;
            }
        }
    }
    (
        GrayImage::from_raw(h, w, img),
        BinaryMask::new(h, w, m, sample.mask.spacing()).expect("remapped mask stays binary"),
    )
}

/// Inverse-mapped resampling about the center. `inverse(dy, dx)` maps an
/// output offset from the center to an input offset.
fn warp(sample: &Sample, inverse: impl Fn(f64, f64) -> (f64, f64)) -> (GrayImage, BinaryMask) {
    let (h, w) = (sample.image.height, sample.image.width);
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let (ymax, xmax) = ((h - 1) as f64, (w - 1) as f64);
    let mut img = vec![IMAGE_FILL; h * w];
    let mut m = vec![0u8; h * w];
    for r in 0..h {
        for c in 0..w {
            let (dy, dx) = inverse(r as f64 - cy, c as f64 - cx);
            let (sy, sx) = (dy + cy, dx + cx);
            if (0.0..=ymax).contains(&sy) && (0.0..=xmax).contains(&sx) {
                let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
                let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
                let (fy, fx) = (sy - y0 as f64, sx - x0 as f64);
                let p = |y, x| sample.image.get(y, x) as f64;
                let v = (1.0 - fy) * ((1.0 - fx) * p(y0, x0) + fx * p(y0, x1))
                    + fy * ((1.0 - fx) * p(y1, x0) + fx * p(y1, x1));
                img[r * w + c] = v.clamp(0.0, 1.0) as f32;
            }
            let (ny, nx) = (sy.round(), sx.round());
            if (0.0..=ymax).contains(&ny) && (0.0..=xmax).contains(&nx) {
                m[r * w + c] = sample.mask.get(ny as usize, nx as usize) as u8;
            }
        }
    }
    (
        GrayImage::from_raw(h, w, img),
        BinaryMask::new(h, w, m, sample.mask.spacing()).expect("nearest sampling keeps binarity"),
    )
}

/// Separable Gaussian blur with clamped borders.
fn blur(image: &GrayImage, sigma: f64) -> GrayImage {
    let radius = (3.0 * sigma).ceil().max(1.0) as i64;
    let mut kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);
    let (h, w) = (image.height as i64, image.width as i64);
    let pass = |src: &[f64], horizontal: bool| -> Vec<f64> {
        let mut out = vec![0.0; src.len()];
        for r in 0..h {
            for c in 0..w {
                out[(r * w + c) as usize] = kernel
                    .iter()
                    .enumerate()
                    .map(|(k, &wk)| {
                        let o = k as i64 - radius;
                        let (rr, cc) = if horizontal {
                            (r, (c + o).clamp(0, w - 1))
                        } else {
                            ((r + o).clamp(0, h - 1), c)
                        };
                        wk * src[(rr * w + cc) as usize]
                    })
                    .sum();
            }
        }
        out
    };
    let src: Vec<f64> = image.data.iter().map(|&v| v as f64).collect();
    let out = pass(&pass(&src, true), false);
    GrayImage::from_raw(
        image.height,
        image.width,
        out.into_iter().map(|v| v.clamp(0.0, 1.0) as f32).collect(),
    )
}

/// Per-op application probabilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentProbabilities {
    pub hflip: f64,
    pub vflip: f64,
    pub rotate: f64,
    pub scale: f64,
    pub crop: f64,
    pub shift: f64,
    pub gauss_noise: f64,
    pub gauss_blur: f64,
}

impl Default for AugmentProbabilities {
    fn default() -> Self {
        Self {
            hflip: 0.5,
            vflip: 0.5,
            rotate: 0.3,
            scale: 0.3,
            crop: 0.2,
            shift: 0.3,
            gauss_noise: 0.3,
            gauss_blur: 0.2,
        }
    }
}

impl AugmentProbabilities {
    pub fn uniform(p: f64) -> Self {
        Self {
            hflip: p,
            vflip: p,
            rotate: p,
            scale: p,
            crop: p,
            shift: p,
            gauss_noise: p,
            gauss_blur: p,
        }
    }

    pub fn get(&self, kind: AugmentKind) -> f64 {
        match kind {
            AugmentKind::Hflip => self.hflip,
            AugmentKind::Vflip => self.vflip,
            AugmentKind::Rotate => self.rotate,
            AugmentKind::Scale => self.scale,
            AugmentKind::Crop => self.crop,
            AugmentKind::Shift => self.shift,
            AugmentKind::GaussNoise => self.gauss_noise,
            AugmentKind::GaussBlur => self.gauss_blur,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentPolicy {
    pub probability: AugmentProbabilities,
    /// Rotation drawn from `[-max, max]` degrees.
    pub rotate_max_degrees: f64,
    pub scale_range: [f64; 2],
    /// Crop side as a fraction of the image side.
    pub crop_fraction_range: [f64; 2],
    /// Shift drawn from `[-max, max]` times the image side, per axis.
    pub shift_max_fraction: f64,
    pub noise_sigma_range: [f64; 2],
    pub blur_sigma_range: [f64; 2],
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        Self {
            probability: AugmentProbabilities::default(),
            rotate_max_degrees: 15.0,
            scale_range: [0.9, 1.1],
            crop_fraction_range: [0.8, 1.0],
            shift_max_fraction: 0.1,
            noise_sigma_range: [0.01, 0.05],
            blur_sigma_range: [0.5, 1.0],
        }
    }
}

impl AugmentPolicy {
    /// A policy that never fires.
    pub fn none() -> Self {
        Self {
            probability: AugmentProbabilities::uniform(0.0),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for kind in AugmentKind::ALL {
            let p = self.probability.get(kind);
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!(
                    "probability of {} must lie in [0, 1], got {p}",
                    kind.name()
                )));
            }
        }
        let ordered = |name: &str, [lo, hi]: [f64; 2], min: f64| {
            if lo.is_finite() && hi.is_finite() && min <= lo && lo <= hi {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must be an ordered range above {min}, got [{lo}, {hi}]")))
            }
        };
        ordered("scale_range", self.scale_range, 1e-3)?;
        ordered("noise_sigma_range", self.noise_sigma_range, 0.0)?;
        ordered("blur_sigma_range", self.blur_sigma_range, 1e-3)?;
        ordered("crop_fraction_range", self.crop_fraction_range, 1e-3)?;
        if self.crop_fraction_range[1] > 1.0 {
            return Err(Error::Config("crop fraction cannot exceed 1".into()));
        }
        if !(0.0..1.0).contains(&self.shift_max_fraction) || !(self.rotate_max_degrees >= 0.0) {
            return Err(Error::Config(
                "shift_max_fraction must lie in [0, 1) and rotate_max_degrees be non-negative"
                    .into(),
            ));
        }
        Ok(())
    }

    /// Draw the parameters of `kind` for an `h x w` image.
    pub fn draw(&self, kind: AugmentKind, h: usize, w: usize, rng: &mut impl Rng) -> AugmentOp {
        let range = |rng: &mut dyn rand::RngCore, [lo, hi]: [f64; 2]| {
            if lo < hi {
                rng.random_range(lo..=hi)
            } else {
                lo
            }
        };
        match kind {
            AugmentKind::Hflip => AugmentOp::Hflip,
            AugmentKind::Vflip => AugmentOp::Vflip,
            AugmentKind::Rotate => AugmentOp::Rotate {
                degrees: range(rng, [-self.rotate_max_degrees, self.rotate_max_degrees]),
            },
            AugmentKind::Scale => AugmentOp::Scale {
                factor: range(rng, self.scale_range),
            },
            AugmentKind::Crop => {
                let f = range(rng, self.crop_fraction_range);
                let height = ((h as f64 * f).round() as usize).clamp(1, h);
                let width = ((w as f64 * f).round() as usize).clamp(1, w);
                AugmentOp::Crop {
                    top: rng.random_range(0..=h - height),
                    left: rng.random_range(0..=w - width),
                    height,
                    width,
                }
            }
            AugmentKind::Shift => {
                let my = (h as f64 * self.shift_max_fraction).floor() as i64;
                let mx = (w as f64 * self.shift_max_fraction).floor() as i64;
                AugmentOp::Shift {
                    dy: rng.random_range(-my..=my),
                    dx: rng.random_range(-mx..=mx),
                }
            }
            AugmentKind::GaussNoise => AugmentOp::GaussNoise {
                sigma: range(rng, self.noise_sigma_range),
                seed: rng.random(),
            },
            AugmentKind::GaussBlur => AugmentOp::GaussBlur {
                sigma: range(rng, self.blur_sigma_range),
            },
        }
    }
}

/// Apply one op of `kind` with parameters drawn from `policy`.
pub fn augment(
    sample: &Sample,
    kind: AugmentKind,
    policy: &AugmentPolicy,
    rng: &mut impl Rng,
) -> Sample {
    let op = policy.draw(kind, sample.image.height, sample.image.width, rng);
    op.apply(sample)
}

/// Toss each op's coin in [`AugmentKind::ALL`] order and apply the winners.
/// Returns the result and the ops applied.
pub fn random_augment(
    sample: &Sample,
    rng: &mut impl Rng,
    policy: &AugmentPolicy,
) -> (Sample, Vec<AugmentOp>) {
    let mut out = sample.clone();
    let mut applied = Vec::new();
    for kind in AugmentKind::ALL {
        let p = policy.probability.get(kind);
        if p > 0.0 && rng.random_bool(p) {
            let op = policy.draw(kind, out.image.height, out.image.width, rng);
            out = op.apply(&out);
            applied.push(op);
        }
    }
    (out, applied)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, SynthConfig};

    fn sample() -> Sample {
        generate(&SynthConfig {
            size: 16,
            seed: 3,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn parse_kinds() {
        assert_eq!("gauss_blur".parse::<AugmentKind>().unwrap(), AugmentKind::GaussBlur);
        assert!(matches!("sharpen".parse::<AugmentKind>(), Err(Error::Usage(_))));
    }

    #[test]
    fn flips_are_involutions() {
        let s = sample();
        assert_eq!(AugmentOp::Hflip.apply(&AugmentOp::Hflip.apply(&s)), s);
        assert_eq!(AugmentOp::Vflip.apply(&AugmentOp::Vflip.apply(&s)), s);
        assert_ne!(AugmentOp::Hflip.apply(&s), s);
    }

    #[test]
    fn identity_warps() {
        let s = sample();
        assert_eq!(AugmentOp::Rotate { degrees: 0.0 }.apply(&s), s);
        assert_eq!(AugmentOp::Scale { factor: 1.0 }.apply(&s), s);
        assert_eq!(AugmentOp::Shift { dy: 0, dx: 0 }.apply(&s), s);
        let full = AugmentOp::Crop {
            top: 0,
            left: 0,
            height: 16,
            width: 16,
        };
        assert_eq!(full.apply(&s), s);
    }

    #[test]
    fn shift_fills_background() {
        let s = sample();
        let out = AugmentOp::Shift { dy: 2, dx: -3 }.apply(&s);
        assert_eq!(out.image.get(0, 0), 1.0);
        assert!(!out.mask.get(1, 15));
        assert_eq!(out.image.get(5, 5), s.image.get(3, 8));
    }

    #[test]
    fn intensity_ops_keep_mask() {
        let s = sample();
        let n = AugmentOp::GaussNoise {
            sigma: 0.05,
            seed: 9,
        }
        .apply(&s);
        assert_eq!(n.mask, s.mask);
        assert_ne!(n.image, s.image);
        let b = AugmentOp::GaussBlur { sigma: 0.8 }.apply(&s);
        assert_eq!(b.mask, s.mask);
    }

    #[test]
    fn zero_policy_is_identity() {
        let s = sample();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (out, ops) = random_augment(&s, &mut rng, &AugmentPolicy::none());
        assert_eq!(out, s);
        assert!(ops.is_empty());
    }

    #[test]
    fn full_policy_order() {
        let s = sample();
        let policy = AugmentPolicy {
            probability: AugmentProbabilities::uniform(1.0),
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (a, ops) = random_augment(&s, &mut rng, &policy);
        let kinds: Vec<AugmentKind> = ops.iter().map(|o| o.kind()).collect();
        assert_eq!(kinds, AugmentKind::ALL);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(random_augment(&s, &mut rng, &policy).0, a);
    }
}
