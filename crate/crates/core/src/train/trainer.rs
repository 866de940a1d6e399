//! The training loop: shuffled, augmented mini-batches, hybrid loss,
//! RMSProp, and best-validation checkpoint retention.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use super::evaluate::mean_dsc;
use super::optim::{OptimizerState, RmsPropConfig};
use crate::arch::{ArchConfig, Mode, Network};
use crate::data::io::Manifest;
use crate::data::{image_batch, mask_batch, random_augment, AugmentPolicy, Sample, SplitPlan};
use crate::error::{Error, Result};
use crate::loss::{hybrid_loss_on_tape, LossConfig};
use crate::tensor::GradTape;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub arch: ArchConfig,
    pub loss: LossConfig,
    pub lr: f64,
    /// Per-epoch multiplicative decay: `lr * (1 - lr_decay)^(epoch - 1)`.
    pub lr_decay: f64,
    pub rmsprop: RmsPropConfig,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub augment: AugmentPolicy,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            arch: ArchConfig::default(),
            loss: LossConfig::default(),
            lr: 1e-4,
            lr_decay: 0.0,
            rmsprop: RmsPropConfig::default(),
            batch_size: 2,
            epochs: 50,
            seed: 0,
            augment: AugmentPolicy::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        self.loss.validate()?;
        self.augment.validate()?;
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.lr_decay) {
            return Err(Error::Config(format!(
                "lr_decay must lie in [0, 1), got {}",
                self.lr_decay
            )));
        }
        if !(0.0..1.0).contains(&self.rmsprop.alpha) || !(self.rmsprop.eps > 0.0) {
            return Err(Error::Config(
                "rmsprop alpha must lie in [0, 1) and eps be positive".into(),
            ));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be at least 1".into()));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * (1.0 - self.lr_decay).powi(epoch as i32 - 1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HistoryRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_bce: f64,
    pub train_dice_term: f64,
    pub train_l2: f64,
    pub val_dsc: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct History {
    pub rows: Vec<HistoryRow>,
}

pub const HISTORY_HEADER: &str = "epoch,train_loss,train_bce,train_dice_term,train_l2,val_dsc";

impl History {
    pub fn to_csv(&self) -> String {
        let mut s = format!("{HISTORY_HEADER}\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                r.epoch, r.train_loss, r.train_bce, r.train_dice_term, r.train_l2, r.val_dsc
            );
        }
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Returned by the per-epoch callback of [`train_on`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Control {
    Continue,
    Stop,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Weights of the epoch with the highest validation DSC.
    pub best: Checkpoint,
    pub best_network: Network,
    pub best_epoch: usize,
    /// Weights after the last epoch run.
    pub network: Network,
    pub history: History,
}

fn check_samples(samples: &[Sample], size: usize, what: &str) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::Usage(format!("{what} set is empty")));
    }
    for s in samples {
        if (s.image.height(), s.image.width()) != (size, size) {
            return Err(Error::dim(
                "train",
                format!(
                    "{what} sample {} is {}x{}, network expects {size}x{size}",
                    s.id,
                    s.image.height(),
                    s.image.width()
                ),
            ));
        }
    }
    Ok(())
}

/// Train from `init` (or fresh weights seeded by `config.seed`). `on_epoch`
/// sees each history row and the current weights and may stop the run early.
pub fn train_on(
    config: &TrainConfig,
    init: Option<Network>,
    train: &[Sample],
    val: &[Sample],
    mut on_epoch: impl FnMut(&HistoryRow, &Network) -> Control,
) -> Result<TrainOutcome> {
    config.validate()?;
    check_samples(train, config.arch.input_size, "training")?;
    check_samples(val, config.arch.input_size, "validation")?;
    let mut net = match init {
        Some(n) if n.config() == &config.arch => n,
        Some(n) => {
            return Err(Error::Usage(format!(
                "initial network {:?} differs from configured {:?}",
                n.config(),
                config.arch
            )))
        }
        None => Network::build(&config.arch, config.seed)?,
    };
    let mut optim = OptimizerState::new(net.params(), config.rmsprop);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = History::default();
    let mut best: Option<(f64, usize, Checkpoint, Network)> = None;

    for epoch in 1..=config.epochs {
        let lr = config.lr_at(epoch);
        order.shuffle(&mut rng);
        let mut sums = [0.0f64; 4];
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<Sample> = chunk
                .iter()
                .map(|&i| random_augment(&train[i], &mut rng, &config.augment).0)
                .collect();
            let refs: Vec<&Sample> = batch.iter().collect();
            let (x, y) = (image_batch(&refs)?, mask_batch(&refs)?);
            let mut tape = GradTape::new();
            let xv = tape.leaf(x, false);
            let out = net.forward_on_tape(&mut tape, xv, Mode::Train, true)?;
            let (loss, parts) = hybrid_loss_on_tape(&mut tape, &out, &y, &net, &config.loss)?;
            if !parts.total.is_finite() {
                return Err(Error::Numerical(format!("loss is {} at epoch {epoch}", parts.total)));
            }
            let mut grads = tape.backward(loss)?;
            let grads: Vec<_> = out.params.iter().map(|&v| grads.take(v)).collect();
            net.update_running_stats(&out.batch_stats, chunk.len());
            optim.step(net.params_mut(), &grads, lr)?;
            let w = chunk.len() as f64;
            for (s, v) in sums.iter_mut().zip([parts.total, parts.bce, parts.dice_term, parts.l2]) {
                *s += w * v;
            }
        }
        let n = train.len() as f64;
        let row = HistoryRow {
            epoch,
            train_loss: sums[0] / n,
            train_bce: sums[1] / n,
            train_dice_term: sums[2] / n,
            train_l2: sums[3] / n,
            val_dsc: mean_dsc(&net, val)?,
        };
        history.rows.push(row);
        if best.as_ref().is_none_or(|(d, ..)| row.val_dsc > *d) {
            let ck = Checkpoint::from_network(&net, epoch as u64, Some(&rng), Some(&optim));
            best = Some((row.val_dsc, epoch, ck, net.clone()));
        }
        if on_epoch(&row, &net) == Control::Stop {
            break;
        }
    }
    let (_, best_epoch, best, best_network) = best.expect("at least one epoch ran");
    Ok(TrainOutcome {
        best,
        best_network,
        best_epoch,
        network: net,
        history,
    })
}

/// Select `ids` from `samples` in list order.
pub fn select<'a>(samples: &'a [Sample], ids: &[String]) -> Result<Vec<Sample>> {
    let by_id: std::collections::HashMap<&str, &'a Sample> =
        samples.iter().map(|s| (s.id.as_str(), s)).collect();
    ids.iter()
        .map(|id| {
            by_id
                .get(id.as_str())
                .map(|&s| s.clone())
                .ok_or_else(|| Error::Split(format!("id '{id}' is not in the dataset")))
        })
        .collect()
}

/// Train on the plan's train ids, selecting by DSC on its validation ids.
pub fn train(
    config: &TrainConfig,
    init: Option<Network>,
    manifest: &Manifest,
    plan: &SplitPlan,
) -> Result<TrainOutcome> {
    config.validate()?;
    let samples = manifest.load_all()?;
    let train_set = select(&samples, &plan.train)?;
    let val_set = select(&samples, &plan.val)?;
    train_on(config, init, &train_set, &val_set, |_, _| Control::Continue)
}
