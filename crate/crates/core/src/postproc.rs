//! Probability maps, 256-bin Otsu thresholding and binarization.

use crate::error::{Error, Result};
use crate::metrics::{BinaryMask, Spacing};

pub const BINS: usize = 256;

/// Row-major `height x width` map of values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityMap {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl ProbabilityMap {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != height * width {
            return Err(Error::dim(
                "probability map",
                format!("{height}x{width} with {} values", data.len()),
            ));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Format(format!("probability {v} outside [0, 1]")));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }
}

/// Bin of a value: `floor(v * 256)`, with 1.0 going to the last bin.
pub fn bin_of(v: f32) -> usize {
    ((v.clamp(0.0, 1.0) as f64 * BINS as f64) as usize).min(BINS - 1)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Histogram256 {
    counts: [u64; BINS],
}

impl Histogram256 {
    pub fn from_values(values: &[f32]) -> Self {
        let mut counts = [0u64; BINS];
        for &v in values {
            counts[bin_of(v)] += 1;
        }
        Self { counts }
    }

    pub fn counts(&self) -> &[u64; BINS] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn occupied(&self) -> usize {
        self.counts.iter().filter(|&&c| c > 0).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OtsuResult {
    /// Threshold in `[0, 1]`; values at or above it are foreground.
    pub threshold: f32,
    /// Last bin of the background class.
    pub bin: usize,
    /// Set when every value fell into one bin; the threshold is then 0.5.
    pub degenerate: bool,
}

/// Between-class separation of the split after bin `k`, kept as the exact
/// fraction `num / den` with `num = (s0*n1 - s1*n0)^2` and `den = n0*n1`.
/// This is proportional to the between-class variance.
#[derive(Clone, Copy)]
struct Separation {
    num: u128,
    den: u128,
}

impl Separation {
    fn exceeds(&self, other: &Separation) -> bool {
        match (
            self.num.checked_mul(other.den),
            other.num.checked_mul(self.den),
        ) {
            (Some(a), Some(b)) => a > b,
            _ => self.num as f64 / self.den as f64 > other.num as f64 / other.den as f64,
        }
    }
}

/// Otsu's threshold over a 256-bin histogram: the split maximising the
/// between-class variance, ties broken toward the lower bin.
pub fn otsu(hist: &Histogram256) -> Result<OtsuResult> {
    let total = hist.total();
    if total == 0 {
        return Err(Error::EmptySet("otsu needs at least one value"));
    }
    if hist.occupied() < 2 {
        return Ok(OtsuResult {
            threshold: 0.5,
            bin: BINS / 2 - 1,
            degenerate: true,
        });
    }
    let weighted_total: u128 = hist
        .counts
        .iter()
        .enumerate()
        .map(|(i, &c)| i as u128 * c as u128)
        .sum();
    let (mut n0, mut s0) = (0u128, 0u128);
    let mut best: Option<(usize, Separation)> = None;
    for (k, &c) in hist.counts.iter().enumerate().take(BINS - 1) {
        n0 += c as u128;
        s0 += k as u128 * c as u128;
        let n1 = total as u128 - n0;
        if n0 == 0 || n1 == 0 {
            continue;
        }
        let s1 = weighted_total - s0;
        let diff = (s0 * n1).abs_diff(s1 * n0);
        let sep = Separation {
            num: diff * diff,
            den: n0 * n1,
        };
        if best.as_ref().is_none_or(|(_, b)| sep.exceeds(b)) {
            best = Some((k, sep));
        }
    }
    let (bin, _) = best.expect("two occupied bins give at least one split");
    Ok(OtsuResult {
        threshold: (bin + 1) as f32 / BINS as f32,
        bin,
        degenerate: false,
    })
}

pub fn otsu_threshold(values: &[f32]) -> Result<OtsuResult> {
    otsu(&Histogram256::from_values(values))
}

/// `1` where `v >= threshold`.
pub fn binarize(values: &[f32], threshold: f32) -> Vec<u8> {
    values.iter().map(|&v| (v >= threshold) as u8).collect()
}

/// Otsu-threshold a map into a mask with the given spacing.
pub fn otsu_mask(map: &ProbabilityMap, spacing: Spacing) -> Result<(BinaryMask, OtsuResult)> {
    let otsu = otsu_threshold(map.data())?;
    let mask = BinaryMask::new(
        map.height,
        map.width,
        binarize(map.data(), otsu.threshold),
        spacing,
    )?;
    Ok((mask, otsu))
}
