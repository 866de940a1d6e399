//! Binary cross-entropy, soft Dice, weight penalty and the deep-supervision
//! hybrid objective.
//!
//! Each branch contributes `bce + dice_term`, and the final branch also carries
//! the conv-weight penalty. The hybrid total is the mean over all branches.
//!
//! Two flavours of every term exist: plain evaluators returning `f64` (used
//! for reporting and as test references) and tape builders that record the
//! same arithmetic for differentiation.

use serde::{Deserialize, Serialize};

use crate::arch::{Network, ParamKind, TapeOutputs};
use crate::error::{Error, Result};
use crate::tensor::{GradTape, Real, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DiceMode {
    /// `ln(1 - dsc + eps) - ln(eps)`: zero at a perfect match.
    Log,
    /// `1 - dsc`.
    Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub epsilon_clamp: f64,
    pub l2_coefficient: f64,
    pub dice_mode: DiceMode,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            epsilon_clamp: 1e-7,
            l2_coefficient: 1e-4,
            dice_mode: DiceMode::Log,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon_clamp > 0.0 && self.epsilon_clamp < 0.5) {
            return Err(Error::Config(format!(
                "epsilon_clamp must lie in (0, 0.5), got {}",
                self.epsilon_clamp
            )));
        }
        if !(self.l2_coefficient >= 0.0) {
            return Err(Error::Config(format!(
                "l2_coefficient must be non-negative, got {}",
                self.l2_coefficient
            )));
        }
        Ok(())
    }
}

/// Parts of one hybrid-loss evaluation.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    /// Mean cross-entropy over branches.
    pub bce: f64,
    /// Mean Dice term over branches.
    pub dice_term: f64,
    /// Weight penalty (counted once, in the final branch).
    pub l2: f64,
    /// Branch totals, final branch first.
    pub per_branch: Vec<f64>,
}

impl LossBreakdown {
    /// Recombine the parts: `bce + dice_term + l2 / s`.
    pub fn recombined(&self) -> f64 {
        self.bce + self.dice_term + self.l2 / self.per_branch.len() as f64
    }
}

fn check_same(pred: &[usize], target: &[usize], op: &'static str) -> Result<()> {
    if pred != target {
        return Err(Error::Dimension {
            op,
            detail: format!("{pred:?} vs {target:?}"),
        });
    }
    Ok(())
}

/// Mean binary cross-entropy, evaluated in 64-bit.
pub fn bce<T: Real>(pred: &Tensor<T>, target: &Tensor<T>, epsilon_clamp: f64) -> Result<f64> {
    check_same(pred.shape(), target.shape(), "bce")?;
    let (lo, hi) = (epsilon_clamp, 1.0 - epsilon_clamp);
    let sum: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &y)| {
            let (p, y) = (p.as_f64().clamp(lo, hi), y.as_f64());
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum();
    Ok(sum / pred.len() as f64)
}

/// Soft Dice coefficient in 64-bit; 1 when both inputs are all zero.
pub fn soft_dice<T: Real>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<f64> {
    check_same(pred.shape(), target.shape(), "soft_dice")?;
    let (mut inter, mut denom) = (0.0, 0.0);
    for (&p, &y) in pred.data().iter().zip(target.data()) {
        let (p, y) = (p.as_f64(), y.as_f64());
        inter += p * y;
        denom += p + y;
    }
    Ok(if denom == 0.0 { 1.0 } else { 2.0 * inter / denom })
}

pub fn dice_term(dsc: f64, cfg: &LossConfig) -> f64 {
    match cfg.dice_mode {
        DiceMode::Log => ((1.0 - dsc) + cfg.epsilon_clamp).ln() - cfg.epsilon_clamp.ln(),
        DiceMode::Linear => 1.0 - dsc,
    }
}

/// `lambda * sum of squared conv weights`; biases and norm parameters excluded.
pub fn l2_penalty<T: Real>(network: &Network<T>, lambda: f64) -> f64 {
    if lambda == 0.0 {
        return 0.0;
    }
    let ss: f64 = network
        .params()
        .iter()
        .filter(|p| p.kind == ParamKind::ConvWeight)
        .flat_map(|p| p.value.data())
        .map(|&w| w.as_f64() * w.as_f64())
        .sum();
    lambda * ss
}

/// `bce + dice_term + l2` for one output map. Pass `network = None` to omit
/// the weight penalty (side branches).
pub fn branch_loss<T: Real>(
    pred: &Tensor<T>,
    target: &Tensor<T>,
    network: Option<&Network<T>>,
    cfg: &LossConfig,
) -> Result<f64> {
    let b = bce(pred, target, cfg.epsilon_clamp)?;
    let d = dice_term(soft_dice(pred, target)?, cfg);
    let l2 = network.map_or(0.0, |n| l2_penalty(n, cfg.l2_coefficient));
    Ok(b + d + l2)
}

/// Mean of the final-branch loss (with weight penalty) and every side-branch
/// loss.
pub fn hybrid_loss<T: Real>(
    final_map: &Tensor<T>,
    side_maps: &[Tensor<T>],
    target: &Tensor<T>,
    network: &Network<T>,
    cfg: &LossConfig,
) -> Result<LossBreakdown> {
    let mut out = LossBreakdown {
        l2: l2_penalty(network, cfg.l2_coefficient),
        ..Default::default()
    };
    for (k, map) in std::iter::once(final_map).chain(side_maps).enumerate() {
        let b = bce(map, target, cfg.epsilon_clamp)?;
        let d = dice_term(soft_dice(map, target)?, cfg);
        out.bce += b;
        out.dice_term += d;
        out.per_branch.push(b + d + if k == 0 { out.l2 } else { 0.0 });
    }
    let s = out.per_branch.len() as f64;
    out.bce /= s;
    out.dice_term /= s;
    out.total = out.per_branch.iter().sum::<f64>() / s;
    Ok(out)
}

/// Tape handles of one branch loss.
#[derive(Debug, Clone, Copy)]
pub struct BranchVars {
    pub total: Var,
    pub bce: Var,
    pub dice_term: Var,
}

/// Record `dice_term(soft_dice(pred, target))` on the tape.
pub fn dice_term_on_tape<T: Real>(
    tape: &mut GradTape<T>,
    pred: Var,
    target: &Tensor<T>,
    cfg: &LossConfig,
) -> Result<Var> {
    let dsc = tape.soft_dice(pred, target)?;
    let complement = tape.affine(dsc, -T::one(), T::one())?;
    match cfg.dice_mode {
        DiceMode::Linear => Ok(complement),
        DiceMode::Log => {
            let eps = T::of(cfg.epsilon_clamp);
            let shifted = tape.affine(complement, T::one(), eps)?;
            let log = tape.ln(shifted)?;
            tape.affine(log, T::one(), -eps.ln())
        }
    }
}

/// Record one branch loss; `l2` is added to the total when given.
pub fn branch_loss_on_tape<T: Real>(
    tape: &mut GradTape<T>,
    pred: Var,
    target: &Tensor<T>,
    l2: Option<Var>,
    cfg: &LossConfig,
) -> Result<BranchVars> {
    let bce = tape.bce(pred, target, cfg.epsilon_clamp)?;
    let dice_term = dice_term_on_tape(tape, pred, target, cfg)?;
    let mut terms = vec![(bce, T::one()), (dice_term, T::one())];
    terms.extend(l2.map(|v| (v, T::one())));
    let total = tape.weighted_sum(&terms)?;
    Ok(BranchVars {
        total,
        bce,
        dice_term,
    })
}

/// Record the conv-weight penalty over the parameter leaves of a forward pass.
pub fn l2_on_tape<T: Real>(
    tape: &mut GradTape<T>,
    network: &Network<T>,
    params: &[Var],
    lambda: f64,
) -> Result<Var> {
    let weights: Vec<Var> = network
        .params()
        .iter()
        .zip(params)
        .filter(|(p, _)| p.kind == ParamKind::ConvWeight)
        .map(|(_, &v)| v)
        .collect();
    tape.sum_squares(&weights, T::of(lambda))
}

/// Record the hybrid loss over the outputs of [`Network::forward_on_tape`].
/// Returns the scalar total and its breakdown.
pub fn hybrid_loss_on_tape<T: Real>(
    tape: &mut GradTape<T>,
    outputs: &TapeOutputs<T>,
    target: &Tensor<T>,
    network: &Network<T>,
    cfg: &LossConfig,
) -> Result<(Var, LossBreakdown)> {
    let l2 = l2_on_tape(tape, network, &outputs.params, cfg.l2_coefficient)?;
    let mut branches = Vec::with_capacity(1 + outputs.side_maps.len());
    branches.push(branch_loss_on_tape(
        tape,
        outputs.final_map,
        target,
        Some(l2),
        cfg,
    )?);
    for &side in &outputs.side_maps {
        branches.push(branch_loss_on_tape(tape, side, target, None, cfg)?);
    }
    let s = branches.len() as f64;
    let w = T::of(1.0 / s);
    let terms: Vec<(Var, T)> = branches.iter().map(|b| (b.total, w)).collect();
    let total = tape.weighted_sum(&terms)?;
    // Reported parts are recombined in 64-bit from the recorded terms.
    let scalar = |v: Var| tape.value(v).data()[0].as_f64();
    let l2 = scalar(l2);
    let per_branch: Vec<f64> = branches
        .iter()
        .enumerate()
        .map(|(i, b)| scalar(b.bce) + scalar(b.dice_term) + if i == 0 { l2 } else { 0.0 })
        .collect();
    let breakdown = LossBreakdown {
        total: per_branch.iter().sum::<f64>() / s,
        bce: branches.iter().map(|b| scalar(b.bce)).sum::<f64>() / s,
        dice_term: branches.iter().map(|b| scalar(b.dice_term)).sum::<f64>() / s,
        l2,
        per_branch,
    };
    Ok((total, breakdown))
}
