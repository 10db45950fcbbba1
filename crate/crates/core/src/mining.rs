//! Batch-hard negative mining.
//!
//! Each anchor keeps its single designated positive and the closest sample of
//! a different identity from the negative pool. Ties go to the lowest index.
//! Mining distances are plain values; no gradient flows through the argmin.

use crate::coremath::{distance, pairwise_distances, DistanceMetric};
use crate::error::{Error, Result};
use crate::triplet::{LabeledBatch, Triplet};

/// Index of the hardest valid negative for one anchor.
pub fn hardest_negative(
    anchor_index: usize,
    anchor_batch: &LabeledBatch,
    negative_pool: &LabeledBatch,
    metric: DistanceMetric,
    normalize: bool,
) -> Result<usize> {
    if anchor_index >= anchor_batch.len() {
        return Err(Error::Shape(format!(
            "anchor index {anchor_index} out of range for batch of {}",
            anchor_batch.len()
        )));
    }
    let label = anchor_batch.label(anchor_index);
    let anchor = anchor_batch.embedding(anchor_index);
    let mut best: Option<(usize, f64)> = None;
    for (j, &lj) in negative_pool.labels().iter().enumerate() {
        if lj == label {
            continue;
        }
        let d = distance(metric, anchor, negative_pool.embedding(j), normalize)?;
        if best.is_none_or(|(_, bd)| d < bd) {
            best = Some((j, d));
        }
    }
    best.map(|(j, _)| j).ok_or_else(|| {
        Error::Domain(format!("anchor {anchor_index} (label {label}) has no valid negative"))
    })
}

/// One triplet per anchor: its unique positive and its hardest negative.
///
/// With `same_source` the anchor batch and the positive batch are the same
/// batch, so an anchor never serves as its own positive.
pub fn mine_triplet_set(
    anchors: &LabeledBatch,
    positives: &LabeledBatch,
    negative_pool: &LabeledBatch,
    metric: DistanceMetric,
    normalize: bool,
    same_source: bool,
) -> Result<Vec<Triplet>> {
    let dist = pairwise_distances(anchors.embeddings(), negative_pool.embeddings(), metric, normalize)?;
    let mut out = Vec::with_capacity(anchors.len());
    for (i, &label) in anchors.labels().iter().enumerate() {
        let mut partners = positives
            .labels()
            .iter()
            .enumerate()
            .filter(|&(j, &lj)| lj == label && !(same_source && j == i))
            .map(|(j, _)| j);
        let positive = match (partners.next(), partners.next()) {
            (Some(p), None) => p,
            (None, _) => {
                return Err(Error::Protocol(format!("anchor {i} (label {label}) has no positive")))
            }
            (Some(_), Some(_)) => {
                return Err(Error::Protocol(format!(
                    "anchor {i} (label {label}) has more than one positive"
                )))
            }
        };
        let mut best: Option<(usize, f64)> = None;
        for (j, &d) in dist.row(i).iter().enumerate() {
            if negative_pool.label(j) != label && best.is_none_or(|(_, bd)| d < bd) {
                best = Some((j, d));
            }
        }
        let (negative, _) = best.ok_or_else(|| {
            Error::Domain(format!("anchor {i} (label {label}) has no valid negative"))
        })?;
        out.push(Triplet::new(i, positive, negative));
    }
    Ok(out)
}
