//! Prediction and test-set evaluation.

use rayon::prelude::*;

use super::checkpoint::Checkpoint;
use crate::arch::Network;
use crate::data::io::Manifest;
use crate::data::{image_batch, Sample};
use crate::error::{Error, Result};
use crate::metrics::{confusion, image_metrics, BinaryMask, MetricsReport};
use crate::postproc::{otsu_mask, ProbabilityMap};

const PREDICT_BATCH: usize = 8;

/// Final-map probabilities of each sample, eval mode.
pub fn predict(net: &Network, samples: &[&Sample]) -> Result<Vec<ProbabilityMap>> {
    let mut maps = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(PREDICT_BATCH) {
        let out = net.forward(&image_batch(chunk)?)?;
        let (_, _, h, w) = out.final_map.dims4()?;
        for b in 0..chunk.len() {
            let plane = out.final_map.batch_slice(b, b + 1)?.into_data();
            maps.push(ProbabilityMap::new(h, w, plane)?);
        }
    }
    Ok(maps)
}

/// Otsu-binarized predictions, carrying each sample's spacing.
pub fn segment(net: &Network, samples: &[&Sample]) -> Result<Vec<BinaryMask>> {
    predict(net, samples)?
        .iter()
        .zip(samples)
        .map(|(m, s)| otsu_mask(m, s.mask.spacing()).map(|(mask, _)| mask))
        .collect()
}

/// Mean DSC of the binarized predictions against the masks.
pub fn mean_dsc(net: &Network, samples: &[Sample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Usage("cannot score an empty set".into()));
    }
    let refs: Vec<&Sample> = samples.iter().collect();
    let preds = segment(net, &refs)?;
    let mut total = 0.0;
    for (p, s) in preds.iter().zip(samples) {
        total += confusion(p, &s.mask)?.dsc();
    }
    Ok(total / samples.len() as f64)
}

/// Five metrics per `(id, prediction, ground truth)`, in input order.
pub fn evaluate_masks(model: &str, pairs: &[(String, BinaryMask, BinaryMask)]) -> Result<MetricsReport> {
    if pairs.is_empty() {
        return Err(Error::Usage("evaluation subset is empty".into()));
    }
    let images = pairs
        .par_iter()
        .map(|(id, pred, gt)| image_metrics(id, pred, gt))
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricsReport {
        model: model.to_string(),
        fold: None,
        images,
    })
}

pub fn evaluate(net: &Network, samples: &[Sample], model: &str) -> Result<MetricsReport> {
    if samples.is_empty() {
        return Err(Error::Usage("evaluation subset is empty".into()));
    }
    let refs: Vec<&Sample> = samples.iter().collect();
    let preds = segment(net, &refs)?;
    let pairs: Vec<(String, BinaryMask, BinaryMask)> = preds
        .into_iter()
        .zip(samples)
        .map(|(p, s)| (s.id.clone(), p, s.mask.clone()))
        .collect();
    evaluate_masks(model, &pairs)
}

/// Evaluate a strictly loaded checkpoint on `ids` (all entries when `None`),
/// rows in manifest order.
pub fn evaluate_checkpoint(
    ckpt: &Checkpoint,
    manifest: &Manifest,
    ids: Option<&[String]>,
    model: &str,
) -> Result<MetricsReport> {
    let net = ckpt.to_network()?;
    let entries: Vec<_> = manifest
        .entries
        .iter()
        .filter(|e| ids.is_none_or(|ids| ids.contains(&e.id)))
        .collect();
    let samples = entries
        .iter()
        .map(|e| manifest.load_sample(e))
        .collect::<Result<Vec<_>>>()?;
    evaluate(&net, &samples, model)
}
