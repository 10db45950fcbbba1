//! Triplet enumeration and the hinge triplet loss.

use serde::{Deserialize, Serialize};

use crate::coremath::{distance, distance_with_grad, DistanceMetric, Embedding};
use crate::error::{Error, Result};

/// Indices of anchor, positive and negative into their respective batches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Triplet {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
}

impl Triplet {
    pub fn new(anchor: usize, positive: usize, negative: usize) -> Self {
        Self {
            anchor,
            positive,
            negative,
        }
    }
}

/// Minimum required gap between anchor-negative and anchor-positive distances.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct Margin(f64);

impl Margin {
    pub fn new(m: f64) -> Result<Self> {
        if !m.is_finite() || m < 0.0 {
            return Err(Error::Config(format!("margin must be finite and >= 0, got {m}")));
        }
        Ok(Self(m))
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

/// Embeddings with one identity label each.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledBatch {
    embeddings: Vec<Embedding>,
    labels: Vec<usize>,
}

impl LabeledBatch {
    pub fn new(embeddings: Vec<Embedding>, labels: Vec<usize>) -> Result<Self> {
        if embeddings.len() != labels.len() {
            return Err(Error::Shape(format!(
                "{} embeddings but {} labels",
                embeddings.len(),
                labels.len()
            )));
        }
        if let Some(first) = embeddings.first() {
            let d = first.dim();
            if let Some(bad) = embeddings.iter().find(|e| e.dim() != d) {
                return Err(Error::Shape(format!(
                    "mixed embedding dimensions {d} and {}",
                    bad.dim()
                )));
            }
        }
        Ok(Self { embeddings, labels })
    }

    /// Builds a batch from raw vectors, validating every entry.
    pub fn from_vecs(vectors: Vec<Vec<f64>>, labels: Vec<usize>) -> Result<Self> {
        let embeddings = vectors
            .into_iter()
            .map(Embedding::new)
            .collect::<Result<Vec<_>>>()?;
        Self::new(embeddings, labels)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.first().map_or(0, Embedding::dim)
    }

    pub fn embeddings(&self) -> &[Embedding] {
        &self.embeddings
    }

    pub fn embedding(&self, i: usize) -> &[f64] {
        &self.embeddings[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }
}

/// Every `(a, p, n)` with `id(a) = id(p)`, `id(a) != id(n)` and, when the
/// anchor and positive batches are the same batch, `a != p`.
pub fn enumerate_triplets(
    anchors: &LabeledBatch,
    positives: &LabeledBatch,
    negatives: &LabeledBatch,
    same_source: bool,
) -> Vec<Triplet> {
    let mut out = Vec::new();
    for (a, &la) in anchors.labels().iter().enumerate() {
        for (p, &lp) in positives.labels().iter().enumerate() {
            if la != lp || (same_source && a == p) {
                continue;
            }
            for (n, &ln) in negatives.labels().iter().enumerate() {
                if ln != la {
                    out.push(Triplet::new(a, p, n));
                }
            }
        }
    }
    out
}

fn check_indices(
    triplets: &[Triplet],
    anchors: &LabeledBatch,
    positives: &LabeledBatch,
    negatives: &LabeledBatch,
) -> Result<()> {
    for t in triplets {
        if t.anchor >= anchors.len() || t.positive >= positives.len() || t.negative >= negatives.len()
        {
            return Err(Error::Shape(format!(
                "triplet {t:?} out of range for batches of size {}/{}/{}",
                anchors.len(),
                positives.len(),
                negatives.len()
            )));
        }
    }
    Ok(())
}

/// Mean hinge `[d(a,p) - d(a,n) + m]+` over the supplied triplets.
///
/// An empty triplet set has loss 0.
pub fn triplet_loss(
    triplets: &[Triplet],
    anchors: &LabeledBatch,
    positives: &LabeledBatch,
    negatives: &LabeledBatch,
    metric: DistanceMetric,
    margin: Margin,
    normalize: bool,
) -> Result<f64> {
    check_indices(triplets, anchors, positives, negatives)?;
    if triplets.is_empty() {
        return Ok(0.0);
    }
    let mut sum = 0.0;
    for t in triplets {
        let a = anchors.embedding(t.anchor);
        let dap = distance(metric, a, positives.embedding(t.positive), normalize)?;
        let dan = distance(metric, a, negatives.embedding(t.negative), normalize)?;
        sum += (dap - dan + margin.value()).max(0.0);
    }
    Ok(sum / triplets.len() as f64)
}

/// Loss value plus its gradient with respect to every embedding of the three
/// batches. Gradient buffers have the shape of the batch they belong to.
#[derive(Debug, Clone)]
pub struct TripletGrad {
    pub loss: f64,
    pub anchors: Vec<Vec<f64>>,
    pub positives: Vec<Vec<f64>>,
    pub negatives: Vec<Vec<f64>>,
    /// Number of triplets with a strictly positive hinge.
    pub active: usize,
}

/// [`triplet_loss`] together with its (sub)gradient. At the hinge kink the
/// inactive branch is taken, so the contribution is zero.
pub fn triplet_loss_grad(
    triplets: &[Triplet],
    anchors: &LabeledBatch,
    positives: &LabeledBatch,
    negatives: &LabeledBatch,
    metric: DistanceMetric,
    margin: Margin,
    normalize: bool,
) -> Result<TripletGrad> {
    check_indices(triplets, anchors, positives, negatives)?;
    let d = anchors.dim().max(positives.dim()).max(negatives.dim());
    let zeros = |n: usize| vec![vec![0.0; d]; n];
    let mut out = TripletGrad {
        loss: 0.0,
        anchors: zeros(anchors.len()),
        positives: zeros(positives.len()),
        negatives: zeros(negatives.len()),
        active: 0,
    };
    if triplets.is_empty() {
        return Ok(out);
    }
    let scale = 1.0 / triplets.len() as f64;
    let mut sum = 0.0;
    for t in triplets {
        let a = anchors.embedding(t.anchor);
        let (dap, ga_p, gp) = distance_with_grad(metric, a, positives.embedding(t.positive), normalize)?;
        let (dan, ga_n, gn) = distance_with_grad(metric, a, negatives.embedding(t.negative), normalize)?;
        let hinge = dap - dan + margin.value();
        if hinge > 0.0 {
            sum += hinge;
            out.active += 1;
            axpy(&mut out.anchors[t.anchor], scale, &ga_p);
            axpy(&mut out.anchors[t.anchor], -scale, &ga_n);
            axpy(&mut out.positives[t.positive], scale, &gp);
            axpy(&mut out.negatives[t.negative], -scale, &gn);
        }
    }
    out.loss = sum * scale;
    Ok(out)
}

pub(crate) fn axpy(y: &mut [f64], alpha: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn batch(vectors: Vec<Vec<f64>>, labels: Vec<usize>) -> LabeledBatch {
        LabeledBatch::from_vecs(vectors, labels).unwrap()
    }

    fn random_batch(rng: &mut ChaCha8Rng, labels: &[usize], d: usize) -> LabeledBatch {
        let v = labels
            .iter()
            .map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        batch(v, labels.to_vec())
    }

    fn twice(n_ids: usize) -> Vec<usize> {
        (0..n_ids).flat_map(|i| [i, i]).collect()
    }

    /// Independent filter over the full cube of index triples.
    fn brute_force(labels: &[usize]) -> Vec<Triplet> {
        let n = labels.len();
        let mut out = Vec::new();
        for a in 0..n {
            for p in 0..n {
                for q in 0..n {
                    if labels[a] == labels[p] && labels[a] != labels[q] && a != p {
                        out.push(Triplet::new(a, p, q));
                    }
                }
            }
        }
        out
    }

    #[test]
    fn cardinality_b4() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = random_batch(&mut rng, &[0, 0, 1, 1], 3);
        let t = enumerate_triplets(&b, &b, &b, true);
        assert_eq!(t.len(), 8);
        assert_eq!(t.len(), 4 * 4 - 2 * 4);
    }

    #[test]
    fn single_identity_has_no_triplets() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = random_batch(&mut rng, &[3, 3, 3], 3);
        assert!(enumerate_triplets(&b, &b, &b, true).is_empty());
    }

    #[test]
    fn b6_matches_brute_force() {
        let labels = twice(3);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let b = random_batch(&mut rng, &labels, 3);
        let mut got = enumerate_triplets(&b, &b, &b, true);
        let mut want = brute_force(&labels);
        got.sort();
        want.sort();
        assert_eq!(got.len(), 24);
        assert_eq!(got, want);
    }

    #[test]
    fn cardinality_law() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for bsz in [4usize, 8, 16, 32] {
            let b = random_batch(&mut rng, &twice(bsz / 2), 2);
            assert_eq!(enumerate_triplets(&b, &b, &b, true).len(), bsz * bsz - 2 * bsz);
        }
    }

    fn line(points: &[f64]) -> LabeledBatch {
        batch(points.iter().map(|&x| vec![x]).collect(), vec![0; points.len()])
    }

    #[test]
    fn hinge_examples() {
        // a = 0, p = 10, n = 20 / 40 on a line, euclidean distances 10 and 20 / 40.
        let a = line(&[0.0]);
        let p = line(&[10.0]);
        let n20 = line(&[20.0]);
        let n40 = line(&[40.0]);
        let m = Margin::new(25.0).unwrap();
        let t = [Triplet::new(0, 0, 0)];
        let l = triplet_loss(&t, &a, &p, &n20, DistanceMetric::Euclidean, m, false).unwrap();
        assert_eq!(l, 15.0);
        let l = triplet_loss(&t, &a, &p, &n40, DistanceMetric::Euclidean, m, false).unwrap();
        assert_eq!(l, 0.0);
    }

    #[test]
    fn empty_set_and_bad_index() {
        let a = line(&[0.0]);
        let m = Margin::new(1.0).unwrap();
        assert_eq!(triplet_loss(&[], &a, &a, &a, DistanceMetric::Euclidean, m, false).unwrap(), 0.0);
        let g = triplet_loss_grad(&[], &a, &a, &a, DistanceMetric::Euclidean, m, false).unwrap();
        assert_eq!(g.loss, 0.0);
        assert!(matches!(
            triplet_loss(&[Triplet::new(0, 0, 5)], &a, &a, &a, DistanceMetric::Euclidean, m, false),
            Err(Error::Shape(_))
        ));
        assert!(Margin::new(-1.0).is_err());
    }

    #[test]
    fn matches_per_triplet_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let labels: Vec<usize> = (0..20).map(|i| i % 5).collect();
        let b = random_batch(&mut rng, &labels, 8);
        let all = enumerate_triplets(&b, &b, &b, true);
        let picked: Vec<Triplet> = (0..50).map(|_| all[rng.gen_range(0..all.len())]).collect();
        for metric in DistanceMetric::ALL {
            let m = Margin::new(0.3).unwrap();
            let got = triplet_loss(&picked, &b, &b, &b, metric, m, false).unwrap();
            let mut acc = 0.0;
            for t in &picked {
                let x = b.embedding(t.anchor);
                let dp = metric.distance(x, b.embedding(t.positive)).unwrap();
                let dn = metric.distance(x, b.embedding(t.negative)).unwrap();
                acc += f64::max(0.0, dp - dn + 0.3);
            }
            let want = acc / 50.0;
            assert!((got - want).abs() <= 1e-10 * want.abs().max(1e-12), "{metric}");
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let labels = twice(4);
        let h = 1e-5;
        for metric in DistanceMetric::ALL {
            for normalize in [false, true] {
                let b = random_batch(&mut rng, &labels, 5);
                let t = enumerate_triplets(&b, &b, &b, true);
                let m = Margin::new(0.2).unwrap();
                // stay away from kinks
                let kinked = t.iter().any(|t| {
                    let x = b.embedding(t.anchor);
                    let dp = distance(metric, x, b.embedding(t.positive), normalize).unwrap();
                    let dn = distance(metric, x, b.embedding(t.negative), normalize).unwrap();
                    (dp - dn + 0.2).abs() < 1e-3
                });
                if kinked {
                    continue;
                }
                let g = triplet_loss_grad(&t, &b, &b, &b, metric, m, normalize).unwrap();
                for i in 0..b.len() {
                    for k in 0..5 {
                        let analytic = g.anchors[i][k] + g.positives[i][k] + g.negatives[i][k];
                        let eval = |delta: f64| {
                            let mut v: Vec<Vec<f64>> =
                                b.embeddings().iter().map(|e| e.to_vec()).collect();
                            v[i][k] += delta;
                            let bb = LabeledBatch::from_vecs(v, labels.clone()).unwrap();
                            triplet_loss(&t, &bb, &bb, &bb, metric, m, normalize).unwrap()
                        };
                        let numeric = (eval(h) - eval(-h)) / (2.0 * h);
                        let denom = analytic.abs().max(numeric.abs()).max(1e-4);
                        assert!((analytic - numeric).abs() / denom < 1e-3);
                    }
                }
            }
        }
    }

    proptest! {
        #[test]
        fn nonnegative_and_monotone_in_margin(seed in 0u64..1000, m1 in 0.0f64..2.0, dm in 0.0f64..2.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let b = random_batch(&mut rng, &twice(3), 4);
            let t = enumerate_triplets(&b, &b, &b, true);
            let l1 = triplet_loss(&t, &b, &b, &b, DistanceMetric::Euclidean, Margin::new(m1).unwrap(), false).unwrap();
            let l2 = triplet_loss(&t, &b, &b, &b, DistanceMetric::Euclidean, Margin::new(m1 + dm).unwrap(), false).unwrap();
            prop_assert!(l1 >= 0.0);
            prop_assert!(l2 >= l1);
        }

        #[test]
        fn zero_loss_when_margins_hold(offset in 5.0f64..50.0) {
            // two tight clusters far apart
            let v = vec![vec![0.0, 0.0], vec![0.1, 0.0], vec![offset, 0.0], vec![offset + 0.1, 0.0]];
            let b = batch(v, vec![0, 0, 1, 1]);
            let t = enumerate_triplets(&b, &b, &b, true);
            let l = triplet_loss(&t, &b, &b, &b, DistanceMetric::Euclidean, Margin::new(offset - 1.0).unwrap(), false).unwrap();
            prop_assert_eq!(l, 0.0);
        }
    }
}
