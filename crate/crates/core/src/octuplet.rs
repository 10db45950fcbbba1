//! The octuplet loss: four mined triplet sets over a batch of high-resolution
//! embeddings and their degraded counterparts, summed without weights.
//!
//! | set  | anchor | positive | negative pool |
//! |------|--------|----------|---------------|
//! | `h`  | HR     | HR       | HR            |
//! | `hl` | HR     | LR       | LR            |
//! | `lh` | LR     | HR       | HR            |
//! | `l`  | LR     | LR       | LR            |
//!
//! Mining runs separately per set, so positive and negative of a triplet are
//! always of the same resolution.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::coremath::DistanceMetric;
use crate::error::{Error, Result};
use crate::mining::mine_triplet_set;
use crate::triplet::{axpy, triplet_loss, triplet_loss_grad, LabeledBatch, Margin, Triplet};

/// High-resolution embeddings and the embeddings of their degraded copies,
/// index-aligned, every identity exactly twice.
#[derive(Debug, Clone)]
pub struct PairedBatch {
    hr: LabeledBatch,
    lr: LabeledBatch,
}

impl PairedBatch {
    pub fn new(hr: LabeledBatch, lr: LabeledBatch) -> Result<Self> {
        if hr.len() != lr.len() {
            return Err(Error::Shape(format!(
                "{} high-resolution vs {} low-resolution embeddings",
                hr.len(),
                lr.len()
            )));
        }
        if hr.labels() != lr.labels() {
            return Err(Error::Protocol("HR and LR labels are not index-aligned".into()));
        }
        if hr.dim() != lr.dim() {
            return Err(Error::Shape("HR and LR embedding dimensions differ".into()));
        }
        let mut counts: HashMap<usize, usize> = HashMap::new();
        for &l in hr.labels() {
            *counts.entry(l).or_default() += 1;
        }
        if let Some((l, c)) = counts.iter().find(|(_, &c)| c != 2) {
            return Err(Error::Protocol(format!(
                "identity {l} appears {c} times; every identity must appear exactly twice"
            )));
        }
        Ok(Self { hr, lr })
    }

    pub fn len(&self) -> usize {
        self.hr.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hr.is_empty()
    }

    pub fn hr(&self) -> &LabeledBatch {
        &self.hr
    }

    pub fn lr(&self) -> &LabeledBatch {
        &self.lr
    }
}

/// Which of the four triplet terms enter the loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TermMask {
    pub hh: bool,
    pub hl: bool,
    pub lh: bool,
    pub ll: bool,
}

impl TermMask {
    pub const ALL: TermMask = TermMask {
        hh: true,
        hl: true,
        lh: true,
        ll: true,
    };

    pub fn new(hh: bool, hl: bool, lh: bool, ll: bool) -> Self {
        Self { hh, hl, lh, ll }
    }

    pub fn flags(self) -> [bool; 4] {
        [self.hh, self.hl, self.lh, self.ll]
    }

    pub fn any(self) -> bool {
        self.flags().iter().any(|&f| f)
    }

    pub fn is_disjoint(self, other: TermMask) -> bool {
        self.flags().iter().zip(other.flags()).all(|(a, b)| !(*a && b))
    }

    pub fn union(self, other: TermMask) -> TermMask {
        TermMask::new(
            self.hh || other.hh,
            self.hl || other.hl,
            self.lh || other.lh,
            self.ll || other.ll,
        )
    }

    /// The twelve partial-term configurations of the loss-term ablation, in
    /// table order: four singles, four pairs, four triples.
    pub fn ablation_rows() -> Vec<TermMask> {
        let t = true;
        let f = false;
        vec![
            TermMask::new(t, f, f, f),
            TermMask::new(f, t, f, f),
            TermMask::new(f, f, t, f),
            TermMask::new(f, f, f, t),
            TermMask::new(t, t, f, f),
            TermMask::new(t, f, t, f),
            TermMask::new(t, f, f, t),
            TermMask::new(f, t, t, f),
            TermMask::new(t, t, t, f),
            TermMask::new(t, t, f, t),
            TermMask::new(t, f, t, t),
            TermMask::new(f, t, t, t),
        ]
    }
}

impl Default for TermMask {
    fn default() -> Self {
        TermMask::ALL
    }
}

pub const TERM_NAMES: [&str; 4] = ["hh", "hl", "lh", "ll"];

impl fmt::Display for TermMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<&str> = TERM_NAMES
            .iter()
            .zip(self.flags())
            .filter(|(_, on)| *on)
            .map(|(n, _)| *n)
            .collect();
        f.write_str(&names.join(","))
    }
}

impl FromStr for TermMask {
    type Err = Error;

    /// Comma-separated subset of `hh,hl,lh,ll` (or `all`).
    fn from_str(s: &str) -> Result<Self> {
        let mut m = TermMask::new(false, false, false, false);
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            match part.to_ascii_lowercase().as_str() {
                "hh" | "h" => m.hh = true,
                "hl" => m.hl = true,
                "lh" => m.lh = true,
                "ll" | "l" => m.ll = true,
                "all" => m = TermMask::ALL,
                other => return Err(Error::Config(format!("unknown loss term '{other}'"))),
            }
        }
        if !m.any() {
            return Err(Error::Config("term mask selects no loss term".into()));
        }
        Ok(m)
    }
}

/// How the positive of the two cross-resolution sets is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CrossPositive {
    /// The other image of the anchor's identity, taken at the other
    /// resolution: `(A, P_lr)` and `(A_lr, P)`.
    #[default]
    Partner,
    /// The anchor's own copy at the other resolution: `(A, A_lr)`.
    Counterpart,
}

impl FromStr for CrossPositive {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "partner" => Ok(CrossPositive::Partner),
            "counterpart" => Ok(CrossPositive::Counterpart),
            other => Err(Error::Config(format!("unknown cross positive '{other}'"))),
        }
    }
}

impl fmt::Display for CrossPositive {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CrossPositive::Partner => "partner",
            CrossPositive::Counterpart => "counterpart",
        })
    }
}

/// Loss settings shared by all four terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OctupletParams {
    pub metric: DistanceMetric,
    pub margin: Margin,
    pub normalize: bool,
    pub mask: TermMask,
    pub cross_positive: CrossPositive,
}

impl OctupletParams {
    pub fn new(metric: DistanceMetric, margin: Margin, normalize: bool, mask: TermMask) -> Self {
        Self {
            metric,
            margin,
            normalize,
            mask,
            cross_positive: CrossPositive::default(),
        }
    }
}

/// The four mined sets, each with one triplet per anchor.
#[derive(Debug, Clone, PartialEq)]
pub struct OctupletSets {
    pub h: Vec<Triplet>,
    pub hl: Vec<Triplet>,
    pub lh: Vec<Triplet>,
    pub l: Vec<Triplet>,
}

fn mine_cross(
    anchors: &LabeledBatch,
    other: &LabeledBatch,
    metric: DistanceMetric,
    normalize: bool,
    cross: CrossPositive,
) -> Result<Vec<Triplet>> {
    // index exclusion picks the partner's copy as positive
    let mut t = mine_triplet_set(anchors, other, other, metric, normalize, true)?;
    if cross == CrossPositive::Counterpart {
        for t in &mut t {
            t.positive = t.anchor;
        }
    }
    Ok(t)
}

pub fn build_octuplet_sets(
    batch: &PairedBatch,
    metric: DistanceMetric,
    normalize: bool,
    cross: CrossPositive,
) -> Result<OctupletSets> {
    if batch.len() < 4 {
        return Err(Error::Protocol(format!(
            "octuplet sets need at least 4 images per batch, got {}",
            batch.len()
        )));
    }
    let (hr, lr) = (batch.hr(), batch.lr());
    Ok(OctupletSets {
        h: mine_triplet_set(hr, hr, hr, metric, normalize, true)?,
        hl: mine_cross(hr, lr, metric, normalize, cross)?,
        lh: mine_cross(lr, hr, metric, normalize, cross)?,
        l: mine_triplet_set(lr, lr, lr, metric, normalize, true)?,
    })
}

/// Sum of the masked triplet losses.
pub fn octuplet_loss(batch: &PairedBatch, params: &OctupletParams) -> Result<f64> {
    let sets = build_octuplet_sets(batch, params.metric, params.normalize, params.cross_positive)?;
    let (hr, lr) = (batch.hr(), batch.lr());
    let terms: [(&[Triplet], &LabeledBatch, &LabeledBatch); 4] =
        [(&sets.h, hr, hr), (&sets.hl, hr, lr), (&sets.lh, lr, hr), (&sets.l, lr, lr)];
    let mut total = 0.0;
    for ((triplets, a, other), on) in terms.into_iter().zip(params.mask.flags()) {
        if on {
            total += triplet_loss(triplets, a, other, other, params.metric, params.margin, params.normalize)?;
        }
    }
    Ok(total)
}

/// Loss, per-term breakdown and gradients with respect to every HR and LR
/// embedding.
#[derive(Debug, Clone)]
pub struct OctupletOutput {
    pub total: f64,
    /// `None` for masked-out terms.
    pub terms: [Option<f64>; 4],
    pub grad_hr: Vec<Vec<f64>>,
    pub grad_lr: Vec<Vec<f64>>,
    pub sets: OctupletSets,
}

pub fn octuplet_loss_grad(batch: &PairedBatch, params: &OctupletParams) -> Result<OctupletOutput> {
    let sets = build_octuplet_sets(batch, params.metric, params.normalize, params.cross_positive)?;
    let (hr, lr) = (batch.hr(), batch.lr());
    let d = hr.dim();
    let mut grad_hr = vec![vec![0.0; d]; hr.len()];
    let mut grad_lr = vec![vec![0.0; d]; lr.len()];
    let mut terms = [None; 4];
    let mut total = 0.0;
    // (triplets, anchor source is HR, other source is HR)
    let layout: [(&[Triplet], bool, bool); 4] = [
        (&sets.h, true, true),
        (&sets.hl, true, false),
        (&sets.lh, false, true),
        (&sets.l, false, false),
    ];
    for (k, ((triplets, anchor_hr, other_hr), on)) in
        layout.into_iter().zip(params.mask.flags()).enumerate()
    {
        if !on {
            continue;
        }
        let a = if anchor_hr { hr } else { lr };
        let o = if other_hr { hr } else { lr };
        let g = triplet_loss_grad(triplets, a, o, o, params.metric, params.margin, params.normalize)?;
        terms[k] = Some(g.loss);
        total += g.loss;
        let ga = if anchor_hr { &mut grad_hr } else { &mut grad_lr };
        for (dst, src) in ga.iter_mut().zip(&g.anchors) {
            axpy(dst, 1.0, src);
        }
        let go = if other_hr { &mut grad_hr } else { &mut grad_lr };
        for (dst, (p, n)) in go.iter_mut().zip(g.positives.iter().zip(&g.negatives)) {
            axpy(dst, 1.0, p);
            axpy(dst, 1.0, n);
        }
    }
    Ok(OctupletOutput {
        total,
        terms,
        grad_hr,
        grad_lr,
        sets,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mining::hardest_negative;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn twice(n: usize) -> Vec<usize> {
        (0..n).flat_map(|i| [i, i]).collect()
    }

    fn random_paired(rng: &mut ChaCha8Rng, b: usize, d: usize) -> PairedBatch {
        let labels = twice(b / 2);
        let mut gen = |scale: f64| -> Vec<Vec<f64>> {
            (0..b).map(|_| (0..d).map(|_| scale * rng.gen_range(-1.0..1.0)).collect()).collect()
        };
        let hr = gen(3.0);
        let lr = gen(3.0);
        PairedBatch::new(
            LabeledBatch::from_vecs(hr, labels.clone()).unwrap(),
            LabeledBatch::from_vecs(lr, labels).unwrap(),
        )
        .unwrap()
    }

    fn params(mask: TermMask) -> OctupletParams {
        OctupletParams::new(DistanceMetric::Euclidean, Margin::new(2.0).unwrap(), false, mask)
    }

    #[test]
    fn four_sets_of_b() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pb = random_paired(&mut rng, 4, 6);
        let s = build_octuplet_sets(&pb, DistanceMetric::Euclidean, false, CrossPositive::Partner)
            .unwrap();
        for set in [&s.h, &s.hl, &s.lh, &s.l] {
            assert_eq!(set.len(), 4);
        }
        // partner positives: 0<->1, 2<->3
        assert_eq!(s.hl.iter().map(|t| t.positive).collect::<Vec<_>>(), vec![1, 0, 3, 2]);
        // images touched by anchor 0: A, A_lr, P, P_lr and four negatives
        let c = build_octuplet_sets(&pb, DistanceMetric::Euclidean, false, CrossPositive::Counterpart)
            .unwrap();
        assert_eq!(c.hl.iter().map(|t| t.positive).collect::<Vec<_>>(), vec![0, 1, 2, 3]);
        assert_eq!(c.h, s.h);
    }

    #[test]
    fn equal_resolution_gives_identical_structure() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pb = random_paired(&mut rng, 8, 4);
        let same = PairedBatch::new(pb.hr().clone(), pb.hr().clone()).unwrap();
        let s = build_octuplet_sets(&same, DistanceMetric::Euclidean, false, CrossPositive::Partner)
            .unwrap();
        assert_eq!(s.h, s.l);
        assert_eq!(s.hl, s.lh);
    }

    #[test]
    fn per_set_negatives_come_from_own_pool() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let pb = random_paired(&mut rng, 8, 5);
            let s = build_octuplet_sets(&pb, DistanceMetric::Euclidean, false, CrossPositive::Partner)
                .unwrap();
            let (hr, lr) = (pb.hr(), pb.lr());
            let m = DistanceMetric::Euclidean;
            for i in 0..8 {
                assert_eq!(s.h[i].negative, hardest_negative(i, hr, hr, m, false).unwrap());
                assert_eq!(s.hl[i].negative, hardest_negative(i, hr, lr, m, false).unwrap());
                assert_eq!(s.lh[i].negative, hardest_negative(i, lr, hr, m, false).unwrap());
                assert_eq!(s.l[i].negative, hardest_negative(i, lr, lr, m, false).unwrap());
            }
        }
    }

    #[test]
    fn decomposes_into_four_terms() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for b in [4usize, 8, 16] {
            let pb = random_paired(&mut rng, b, 6);
            let p = params(TermMask::ALL);
            let s = build_octuplet_sets(&pb, p.metric, false, p.cross_positive).unwrap();
            let (hr, lr) = (pb.hr(), pb.lr());
            let sum = triplet_loss(&s.h, hr, hr, hr, p.metric, p.margin, false).unwrap()
                + triplet_loss(&s.hl, hr, lr, lr, p.metric, p.margin, false).unwrap()
                + triplet_loss(&s.lh, lr, hr, hr, p.metric, p.margin, false).unwrap()
                + triplet_loss(&s.l, lr, lr, lr, p.metric, p.margin, false).unwrap();
            let got = octuplet_loss(&pb, &p).unwrap();
            assert!((got - sum).abs() <= 1e-10 * sum.abs().max(1e-300));
            let g = octuplet_loss_grad(&pb, &p).unwrap();
            assert!((g.total - got).abs() <= 1e-12 * got.abs().max(1.0));
        }
    }

    #[test]
    fn mask_linearity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pb = random_paired(&mut rng, 8, 4);
        let rows = TermMask::ablation_rows();
        for &a in &rows {
            for &b in &rows {
                if !a.is_disjoint(b) {
                    continue;
                }
                let la = octuplet_loss(&pb, &params(a)).unwrap();
                let lb = octuplet_loss(&pb, &params(b)).unwrap();
                let lu = octuplet_loss(&pb, &params(a.union(b))).unwrap();
                assert!((la + lb - lu).abs() < 1e-10 * lu.max(1.0));
            }
        }
    }

    #[test]
    fn well_separated_hr_only_is_zero() {
        let hr = LabeledBatch::from_vecs(
            vec![vec![0.0, 0.0], vec![0.1, 0.0], vec![100.0, 0.0], vec![100.1, 0.0]],
            vec![0, 0, 1, 1],
        )
        .unwrap();
        let lr = LabeledBatch::from_vecs(vec![vec![0.0, 0.0]; 4], vec![0, 0, 1, 1]).unwrap();
        let pb = PairedBatch::new(hr, lr).unwrap();
        let p = OctupletParams::new(
            DistanceMetric::Euclidean,
            Margin::new(25.0).unwrap(),
            false,
            TermMask::new(true, false, false, false),
        );
        assert_eq!(octuplet_loss(&pb, &p).unwrap(), 0.0);
    }

    #[test]
    fn rejects_bad_batches() {
        let three = LabeledBatch::from_vecs(vec![vec![0.0]; 3], vec![0, 0, 0]).unwrap();
        assert!(matches!(PairedBatch::new(three.clone(), three), Err(Error::Protocol(_))));
        let two = LabeledBatch::from_vecs(vec![vec![0.0], vec![1.0]], vec![0, 0]).unwrap();
        let pb = PairedBatch::new(two.clone(), two).unwrap();
        assert!(build_octuplet_sets(&pb, DistanceMetric::Euclidean, false, CrossPositive::Partner)
            .is_err());
    }

    #[test]
    fn mask_parsing_and_rows() {
        assert_eq!("hh,hl,lh,ll".parse::<TermMask>().unwrap(), TermMask::ALL);
        assert_eq!("ll".parse::<TermMask>().unwrap(), TermMask::new(false, false, false, true));
        assert!("".parse::<TermMask>().is_err());
        assert!("xx".parse::<TermMask>().is_err());
        let rows = TermMask::ablation_rows();
        assert_eq!(rows.len(), 12);
        assert!(!rows.contains(&TermMask::ALL));
        assert_eq!(TermMask::ALL.to_string(), "hh,hl,lh,ll");
    }
}
