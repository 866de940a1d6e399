//! Overlap and surface-distance metrics on binary masks.
//!
//! Distances are between pixel centers, scaled per axis by the physical
//! spacing, and computed exactly over all point pairs.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Physical pixel size in millimetres.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Spacing {
    pub row_mm: f64,
    pub col_mm: f64,
}

impl Default for Spacing {
    fn default() -> Self {
        Self::isotropic(0.30)
    }
}

impl Spacing {
    pub fn isotropic(mm: f64) -> Self {
        Self {
            row_mm: mm,
            col_mm: mm,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v > 0.0 && v < 10.0;
        if !ok(self.row_mm) || !ok(self.col_mm) {
            return Err(Error::Config(format!(
                "pixel spacing must lie in (0, 10) mm, got {} x {}",
                self.row_mm, self.col_mm
            )));
        }
        Ok(())
    }

    pub fn scaled(&self, t: f64) -> Self {
        Self {
            row_mm: self.row_mm * t,
            col_mm: self.col_mm * t,
        }
    }

    fn dist2(&self, a: (usize, usize), b: (usize, usize)) -> f64 {
        let dr = (a.0 as f64 - b.0 as f64) * self.row_mm;
        let dc = (a.1 as f64 - b.1 as f64) * self.col_mm;
        dr * dr + dc * dc
    }
}

/// Strictly binary `height x width` mask with physical spacing.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    data: Vec<u8>,
    spacing: Spacing,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, data: Vec<u8>, spacing: Spacing) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::dim(
                "mask",
                format!("{height}x{width} needs {} values, got {}", height * width, data.len()),
            ));
        }
        if let Some(v) = data.iter().find(|&&v| v > 1) {
            return Err(Error::Format(format!("mask value {v} is not binary")));
        }
        spacing.validate()?;
        Ok(Self {
            height,
            width,
            data,
            spacing,
        })
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        spacing: Spacing,
        f: impl Fn(usize, usize) -> bool,
    ) -> Self {
        let data = (0..height * width)
            .map(|i| f(i / width, i % width) as u8)
            .collect();
        Self {
            height,
            width,
            data,
            spacing,
        }
    }

    pub fn zeros(height: usize, width: usize, spacing: Spacing) -> Self {
        Self::from_fn(height, width, spacing, |_, _| false)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn spacing(&self) -> Spacing {
        self.spacing
    }

    pub fn with_spacing(mut self, spacing: Spacing) -> Self {
        self.spacing = spacing;
        self
    }

    pub fn get(&self, r: usize, c: usize) -> bool {
        self.data[r * self.width + c] != 0
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    pub fn foreground(&self) -> Vec<(usize, usize)> {
        self.data
            .iter()
            .enumerate()
            .filter(|(_, &v)| v != 0)
            .map(|(i, _)| (i / self.width, i % self.width))
            .collect()
    }

    fn same_grid(&self, other: &Self, op: &'static str) -> Result<()> {
        if (self.height, self.width) != (other.height, other.width) {
            return Err(Error::dim(
                op,
                format!(
                    "{}x{} vs {}x{}",
                    self.height, self.width, other.height, other.width
                ),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

/// `ratio(num, den)` with the absent-class rule for empty denominators.
fn ratio(num: usize, den: usize, absent_from_both: bool) -> f64 {
    if den == 0 {
        if absent_from_both {
            1.0
        } else {
            0.0
        }
    } else {
        num as f64 / den as f64
    }
}

impl Confusion {
    pub fn dsc(&self) -> f64 {
        let den = 2 * self.tp + self.fp + self.fn_;
        ratio(2 * self.tp, den, true)
    }

    pub fn sensitivity(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_, self.fp == 0)
    }

    pub fn specificity(&self) -> f64 {
        ratio(self.tn, self.tn + self.fp, self.fn_ == 0)
    }
}

pub fn confusion(pred: &BinaryMask, gt: &BinaryMask) -> Result<Confusion> {
    pred.same_grid(gt, "confusion")?;
    let mut c = Confusion::default();
    for (&p, &g) in pred.data.iter().zip(&gt.data) {
        match (p != 0, g != 0) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    Ok(c)
}

/// Foreground pixels with at least one 4-neighbour that is background or
/// outside the image.
pub fn surface(mask: &BinaryMask) -> Vec<(usize, usize)> {
    let (h, w) = (mask.height, mask.width);
    mask.foreground()
        .into_iter()
        .filter(|&(r, c)| {
            r == 0
                || c == 0
                || r + 1 == h
                || c + 1 == w
                || !mask.get(r - 1, c)
                || !mask.get(r + 1, c)
                || !mask.get(r, c - 1)
                || !mask.get(r, c + 1)
        })
        .collect()
}

/// Squared distance from `a` to its nearest point of `to`.
fn nearest2(a: (usize, usize), to: &[(usize, usize)], spacing: &Spacing) -> f64 {
    to.iter()
        .map(|&b| spacing.dist2(a, b))
        .fold(f64::INFINITY, f64::min)
}

/// Directed Hausdorff distance `max_{a in from} min_{b in to} |a - b|`.
pub fn directed_hausdorff(
    from: &[(usize, usize)],
    to: &[(usize, usize)],
    spacing: &Spacing,
) -> f64 {
    from.iter()
        .map(|&a| nearest2(a, to, spacing))
        .fold(0.0, f64::max)
        .sqrt()
}

fn directed_sum(from: &[(usize, usize)], to: &[(usize, usize)], spacing: &Spacing) -> f64 {
    from.iter().map(|&a| nearest2(a, to, spacing).sqrt()).sum()
}

fn check_pair(pred: &BinaryMask, gt: &BinaryMask, op: &'static str) -> Result<Spacing> {
    pred.same_grid(gt, op)?;
    if pred.spacing != gt.spacing {
        return Err(Error::Usage(format!(
            "{op}: masks have different spacing {:?} vs {:?}",
            pred.spacing, gt.spacing
        )));
    }
    Ok(pred.spacing)
}

/// Symmetric Hausdorff distance in mm between the foreground point sets.
pub fn hausdorff(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    let spacing = check_pair(pred, gt, "hausdorff")?;
    let (c, d) = (pred.foreground(), gt.foreground());
    if c.is_empty() || d.is_empty() {
        return Err(Error::EmptySet("hausdorff needs two non-empty masks"));
    }
    Ok(directed_hausdorff(&c, &d, &spacing).max(directed_hausdorff(&d, &c, &spacing)))
}

/// Average symmetric surface distance in mm.
pub fn asd(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    let spacing = check_pair(pred, gt, "asd")?;
    let (a, b) = (surface(pred), surface(gt));
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptySet("average surface distance needs two non-empty surfaces"));
    }
    let total = directed_sum(&a, &b, &spacing) + directed_sum(&b, &a, &spacing);
    Ok(total / (a.len() + b.len()) as f64)
}

/// The five metrics of one image; distances are `None` when undefined.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageMetrics {
    pub id: String,
    pub dsc: f64,
    pub sn: f64,
    pub sp: f64,
    pub hd_mm: Option<f64>,
    pub asd_mm: Option<f64>,
}

fn defined(r: Result<f64>) -> Result<Option<f64>> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(Error::EmptySet(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

pub fn image_metrics(id: &str, pred: &BinaryMask, gt: &BinaryMask) -> Result<ImageMetrics> {
    let c = confusion(pred, gt)?;
    Ok(ImageMetrics {
        id: id.to_string(),
        dsc: c.dsc(),
        sn: c.sensitivity(),
        sp: c.specificity(),
        hd_mm: defined(hausdorff(pred, gt))?,
        asd_mm: defined(asd(pred, gt))?,
    })
}

/// Mean and population standard deviation over the defined values.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Aggregate {
    pub mean: f64,
    pub std: f64,
    pub count: usize,
    pub undefined: usize,
}

impl Aggregate {
    pub fn of(values: impl IntoIterator<Item = Option<f64>>) -> Self {
        let mut xs = Vec::new();
        let mut undefined = 0;
        for v in values {
            match v {
                Some(x) => xs.push(x),
                None => undefined += 1,
            }
        }
        if xs.is_empty() {
            return Self {
                mean: f64::NAN,
                std: f64::NAN,
                count: 0,
                undefined,
            };
        }
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        Self {
            mean,
            std: var.sqrt(),
            count: xs.len(),
            undefined,
        }
    }
}

/// Aggregates in table column order.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Summary {
    pub hd: Aggregate,
    pub dsc: Aggregate,
    pub sn: Aggregate,
    pub sp: Aggregate,
    pub asd: Aggregate,
}

impl Summary {
    pub fn columns(&self) -> [Aggregate; 5] {
        [self.hd, self.dsc, self.sn, self.sp, self.asd]
    }
}

/// Metric columns of the comparison table, in order.
pub const TABLE_COLUMNS: [&str; 5] = ["HD(mm)", "DSC", "SN", "SP", "ASD(mm)"];

pub(crate) fn fmt_value(v: f64) -> String {
    if v.is_nan() {
        "undefined".to_string()
    } else {
        format!("{v:.6}")
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "undefined".to_string(), fmt_value)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub model: String,
    pub fold: Option<usize>,
    pub images: Vec<ImageMetrics>,
}

impl MetricsReport {
    pub fn summary(&self) -> Summary {
        let col = |f: fn(&ImageMetrics) -> Option<f64>| Aggregate::of(self.images.iter().map(f));
        Summary {
            hd: col(|m| m.hd_mm),
            dsc: col(|m| Some(m.dsc)),
            sn: col(|m| Some(m.sn)),
            sp: col(|m| Some(m.sp)),
            asd: col(|m| m.asd_mm),
        }
    }

    /// Per-image rows: `id,HD(mm),DSC,SN,SP,ASD(mm)`, undefined distances
    /// written as `undefined`.
    pub fn to_csv(&self) -> String {
        let mut s = format!("id,{}\n", TABLE_COLUMNS.join(","));
        for m in &self.images {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                m.id,
                fmt_opt(m.hd_mm),
                fmt_value(m.dsc),
                fmt_value(m.sn),
                fmt_value(m.sp),
                fmt_opt(m.asd_mm)
            );
        }
        s
    }

    /// Mean and standard-deviation rows plus the count of undefined distances.
    pub fn summary_csv(&self) -> String {
        let sum = self.summary();
        let mut s = format!("model,{},undefined_hd,undefined_asd\n", TABLE_COLUMNS.join(","));
        let row = |f: fn(&Aggregate) -> f64| {
            sum.columns()
                .iter()
                .map(|a| fmt_value(f(a)))
                .collect::<Vec<_>>()
                .join(",")
        };
        let _ = writeln!(
            s,
            "{},{},{},{}",
            self.model,
            row(|a| a.mean),
            sum.hd.undefined,
            sum.asd.undefined
        );
        let _ = writeln!(
            s,
            "{} (std),{},{},{}",
            self.model,
            row(|a| a.std),
            sum.hd.undefined,
            sum.asd.undefined
        );
        s
    }
}
