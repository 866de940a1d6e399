//! Cross-validated comparison of several training configurations.

use std::fmt::Write as _;

use super::checkpoint::{load_pretrained, Checkpoint, LoadMode};
use super::evaluate::evaluate;
use super::trainer::{select, train_on, Control, TrainConfig};
use crate::arch::Network;
use crate::data::{kfold, Sample};
use crate::error::{Error, Result};
use crate::metrics::{fmt_value, MetricsReport, Summary, TABLE_COLUMNS};

/// One row of the comparison.
#[derive(Debug, Clone)]
pub struct AblationEntry {
    pub name: String,
    pub config: TrainConfig,
    /// Weights copied by name before training on every fold.
    pub init: Option<Checkpoint>,
}

#[derive(Debug, Clone)]
pub struct ModelResult {
    pub name: String,
    /// Test metrics of every image, pooled over folds (each image is tested
    /// exactly once).
    pub report: MetricsReport,
    pub folds: Vec<Summary>,
}

#[derive(Debug, Clone)]
pub struct AblationResult {
    pub k: usize,
    pub models: Vec<ModelResult>,
}

/// Per-fold series selectable by column name.
fn column(s: &Summary, name: &str) -> f64 {
    let i = TABLE_COLUMNS
        .iter()
        .position(|c| *c == name)
        .expect("known column");
    s.columns()[i].mean
}

impl AblationResult {
    /// `model,HD(mm),DSC,SN,SP,ASD(mm)` with the mean over all test images.
    pub fn table_csv(&self) -> String {
        let mut s = format!("model,{}\n", TABLE_COLUMNS.join(","));
        for m in &self.models {
            let sum = m.report.summary();
            let vals: Vec<String> = sum.columns().iter().map(|a| fmt_value(a.mean)).collect();
            let _ = writeln!(s, "{},{}", m.name, vals.join(","));
        }
        s
    }

    /// Mean of `metric` on each fold's test set: `fold,<model>,...`.
    pub fn fold_series_csv(&self, metric: &str) -> Result<String> {
        if !TABLE_COLUMNS.contains(&metric) {
            return Err(Error::Usage(format!("unknown metric column '{metric}'")));
        }
        let names: Vec<&str> = self.models.iter().map(|m| m.name.as_str()).collect();
        let mut s = format!("fold,{}\n", names.join(","));
        for f in 0..self.k {
            let vals: Vec<String> = self
                .models
                .iter()
                .map(|m| fmt_value(column(&m.folds[f], metric)))
                .collect();
            let _ = writeln!(s, "{},{}", f + 1, vals.join(","));
        }
        Ok(s)
    }
}

/// Train and test every entry on each of `k` patient-level folds.
pub fn run_ablation(
    entries: &[AblationEntry],
    samples: &[Sample],
    k: usize,
    seed: u64,
) -> Result<AblationResult> {
    if entries.len() < 2 {
        return Err(Error::Usage("a comparison needs at least two configurations".into()));
    }
    for e in entries {
        e.config.validate()?;
    }
    let items: Vec<(String, String)> = samples
        .iter()
        .map(|s| (s.id.clone(), s.patient_id.clone()))
        .collect();
    let plans = kfold(&items, k, seed)?;
    let mut models = Vec::with_capacity(entries.len());
    for e in entries {
        let mut pooled = Vec::new();
        let mut folds = Vec::with_capacity(k);
        for plan in &plans {
            let init = match &e.init {
                Some(ck) => {
                    let mut net = Network::build(&e.config.arch, e.config.seed)?;
                    load_pretrained(ck, &mut net, LoadMode::ByName)?;
                    Some(net)
                }
                None => None,
            };
            let (tr, va, te) = (
                select(samples, &plan.train)?,
                select(samples, &plan.val)?,
                select(samples, &plan.test)?,
            );
            let out = train_on(&e.config, init, &tr, &va, |_, _| Control::Continue)?;
            let mut report = evaluate(&out.best_network, &te, &e.name)?;
            report.fold = plan.fold;
            folds.push(report.summary());
            pooled.extend(report.images);
        }
        let order: std::collections::HashMap<&str, usize> =
            samples.iter().enumerate().map(|(i, s)| (s.id.as_str(), i)).collect();
        pooled.sort_by_key(|m| order[m.id.as_str()]);
        models.push(ModelResult {
            name: e.name.clone(),
            report: MetricsReport {
                model: e.name.clone(),
                fold: None,
                images: pooled,
            },
            folds,
        });
    }
    Ok(AblationResult { k, models })
}
