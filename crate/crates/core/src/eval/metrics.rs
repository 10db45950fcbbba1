//! Verification metrics over pair distances: k-fold accuracy, ROC, EER and
//! TAR at a given FAR. A pair is accepted as genuine when its distance is at
//! or below the threshold for ROC purposes, and strictly below the selected
//! midpoint threshold for k-fold accuracy (midpoints never coincide with a
//! training distance).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn check_lengths(distances: &[f64], genuine: &[bool]) -> Result<()> {
    if distances.len() != genuine.len() {
        return Err(Error::Shape(format!(
            "{} distances but {} labels",
            distances.len(),
            genuine.len()
        )));
    }
    if distances.iter().any(|d| d.is_nan()) {
        return Err(Error::Domain("NaN distance".into()));
    }
    Ok(())
}

/// Threshold maximizing accuracy of `d < t` on the given samples. Candidates
/// are -inf, the midpoints of consecutive distinct distances and +inf; ties go
/// to the smaller threshold.
pub fn best_threshold(samples: &[(f64, bool)]) -> (f64, usize) {
    let mut sorted: Vec<(f64, bool)> = samples.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let imposters = sorted.iter().filter(|s| !s.1).count();
    // threshold below everything: every pair rejected
    let mut best = (f64::NEG_INFINITY, imposters);
    let (mut genuine_below, mut imposter_below) = (0usize, 0usize);
    let mut i = 0;
    while i < sorted.len() {
        let v = sorted[i].0;
        while i < sorted.len() && sorted[i].0 == v {
            if sorted[i].1 {
                genuine_below += 1;
            } else {
                imposter_below += 1;
            }
            i += 1;
        }
        let correct = genuine_below + (imposters - imposter_below);
        let t = if i < sorted.len() {
            0.5 * (v + sorted[i].0)
        } else {
            f64::INFINITY
        };
        if correct > best.1 {
            best = (t, correct);
        }
    }
    best
}

/// Mean and population standard deviation of the per-fold test accuracies,
/// each fold scored with the threshold selected on the remaining folds.
pub fn kfold_accuracy(distances: &[f64], genuine: &[bool], folds: &[usize]) -> Result<(f64, f64)> {
    check_lengths(distances, genuine)?;
    if folds.len() != distances.len() {
        return Err(Error::Shape("fold assignment length differs from pair count".into()));
    }
    let k = folds.iter().max().map_or(0, |m| m + 1);
    if k < 2 {
        return Err(Error::Protocol("k-fold evaluation needs at least two folds".into()));
    }
    let mut accs = Vec::with_capacity(k);
    for fold in 0..k {
        let train: Vec<(f64, bool)> = (0..distances.len())
            .filter(|&i| folds[i] != fold)
            .map(|i| (distances[i], genuine[i]))
            .collect();
        let test: Vec<usize> = (0..distances.len()).filter(|&i| folds[i] == fold).collect();
        if test.is_empty() {
            return Err(Error::Protocol(format!("fold {fold} is empty")));
        }
        let (t, _) = best_threshold(&train);
        let correct = test.iter().filter(|&&i| (distances[i] < t) == genuine[i]).count();
        accs.push(correct as f64 / test.len() as f64);
    }
    let mean = accs.iter().sum::<f64>() / k as f64;
    let var = accs.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / k as f64;
    Ok((mean, var.sqrt()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub far: f64,
    pub tar: f64,
}

/// ROC over thresholds -inf and every distinct distance, in increasing order.
pub fn roc_curve(distances: &[f64], genuine: &[bool]) -> Result<Vec<RocPoint>> {
    check_lengths(distances, genuine)?;
    let n_gen = genuine.iter().filter(|&&g| g).count();
    let n_imp = genuine.len() - n_gen;
    if n_gen == 0 || n_imp == 0 {
        return Err(Error::Domain("ROC needs both genuine and imposter pairs".into()));
    }
    let mut sorted: Vec<(f64, bool)> = distances.iter().copied().zip(genuine.iter().copied()).collect();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut out = vec![RocPoint {
        threshold: f64::NEG_INFINITY,
        far: 0.0,
        tar: 0.0,
    }];
    let (mut ga, mut ia) = (0usize, 0usize);
    let mut i = 0;
    while i < sorted.len() {
        let v = sorted[i].0;
        while i < sorted.len() && sorted[i].0 == v {
            if sorted[i].1 {
                ga += 1;
            } else {
                ia += 1;
            }
            i += 1;
        }
        out.push(RocPoint {
            threshold: v,
            far: ia as f64 / n_imp as f64,
            tar: ga as f64 / n_gen as f64,
        });
    }
    Ok(out)
}

/// Rate at which FAR equals FRR = 1 - TAR, linearly interpolated between the
/// two sweep points that bracket the crossing.
pub fn equal_error_rate(roc: &[RocPoint]) -> f64 {
    let gap = |p: &RocPoint| p.far - (1.0 - p.tar);
    for w in roc.windows(2) {
        let (g0, g1) = (gap(&w[0]), gap(&w[1]));
        if g0 <= 0.0 && g1 >= 0.0 {
            if g1 == g0 {
                return w[0].far;
            }
            let t = g0 / (g0 - g1);
            return w[0].far + t * (w[1].far - w[0].far);
        }
    }
    roc.first().map_or(0.5, |p| p.far.max(1.0 - p.tar))
}

/// Largest TAR among sweep points with FAR at or below `far`.
pub fn tar_at_far(roc: &[RocPoint], far: f64) -> f64 {
    roc.iter()
        .filter(|p| p.far <= far)
        .map(|p| p.tar)
        .fold(0.0, f64::max)
}
