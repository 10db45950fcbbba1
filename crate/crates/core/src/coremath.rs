//! Distance metrics, feature normalization and pairwise distance matrices.
//!
//! Everything here is a pure function over borrowed slices. Scalar distances
//! are the reference path: [`pairwise_distances`] applies exactly the same
//! scalar routine per entry, so matrix and scalar results agree bit for bit.

use std::fmt;
use std::ops::Deref;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A d-dimensional feature vector with finite entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding(Vec<f64>);

impl Embedding {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Shape("embedding must have at least one entry".into()));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Domain(format!(
                "embedding entry {i} is not finite ({})",
                values[i]
            )));
        }
        Ok(Self(values))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl Deref for Embedding {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

/// The three feature distances supported by the losses and the miner.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DistanceMetric {
    Cosine,
    Euclidean,
    SquaredEuclidean,
}

impl DistanceMetric {
    pub const ALL: [DistanceMetric; 3] = [
        DistanceMetric::Cosine,
        DistanceMetric::Euclidean,
        DistanceMetric::SquaredEuclidean,
    ];

    pub fn distance(self, a: &[f64], b: &[f64]) -> Result<f64> {
        match self {
            DistanceMetric::Cosine => cosine_distance(a, b),
            DistanceMetric::Euclidean => euclidean_distance(a, b),
            DistanceMetric::SquaredEuclidean => squared_euclidean_distance(a, b),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            DistanceMetric::Cosine => "cosine",
            DistanceMetric::Euclidean => "euclidean",
            DistanceMetric::SquaredEuclidean => "squared-euclidean",
        }
    }
}

impl fmt::Display for DistanceMetric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DistanceMetric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "cosine" | "cos" => Ok(DistanceMetric::Cosine),
            "euclidean" | "euc" | "l2" => Ok(DistanceMetric::Euclidean),
            "squared-euclidean" | "squared_euclidean" | "euc2" | "sqeuclidean" => {
                Ok(DistanceMetric::SquaredEuclidean)
            }
            other => Err(Error::Config(format!("unknown distance metric '{other}'"))),
        }
    }
}

fn check_dims(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "embedding dimensions differ: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    Ok(())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn l2_norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `1 - a.b / (|a| |b|)`, in `[0, 2]`.
pub fn cosine_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    check_dims(a, b)?;
    let (na, nb) = (l2_norm(a), l2_norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Domain("cosine distance of a zero-norm vector".into()));
    }
    let cos = (dot(a, b) / (na * nb)).clamp(-1.0, 1.0);
    Ok(1.0 - cos)
}

pub fn squared_euclidean_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    check_dims(a, b)?;
    Ok(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum())
}

pub fn euclidean_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    squared_euclidean_distance(a, b).map(f64::sqrt)
}

pub fn l2_normalize(a: &[f64]) -> Result<Vec<f64>> {
    let n = l2_norm(a);
    if n == 0.0 || !n.is_finite() {
        return Err(Error::Domain("cannot normalize a zero-norm vector".into()));
    }
    Ok(a.iter().map(|v| v / n).collect())
}

/// Distance and its gradients with respect to both arguments.
///
/// With `normalize` set both inputs are L2-normalized before the metric is
/// applied and the gradient is propagated back through the normalization.
/// The euclidean gradient at coincident points is defined as zero.
pub fn distance_with_grad(
    metric: DistanceMetric,
    a: &[f64],
    b: &[f64],
    normalize: bool,
) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    check_dims(a, b)?;
    if normalize {
        let (na, nb) = (l2_norm(a), l2_norm(b));
        let ua = l2_normalize(a)?;
        let ub = l2_normalize(b)?;
        let (d, gua, gub) = distance_with_grad(metric, &ua, &ub, false)?;
        return Ok((d, normalize_backward(&ua, na, &gua), normalize_backward(&ub, nb, &gub)));
    }
    match metric {
        DistanceMetric::SquaredEuclidean => {
            let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
            let d = dot(&diff, &diff);
            let ga: Vec<f64> = diff.iter().map(|v| 2.0 * v).collect();
            let gb = ga.iter().map(|v| -v).collect();
            Ok((d, ga, gb))
        }
        DistanceMetric::Euclidean => {
            let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
            let d = dot(&diff, &diff).sqrt();
            if d == 0.0 {
                return Ok((0.0, vec![0.0; a.len()], vec![0.0; a.len()]));
            }
            let ga: Vec<f64> = diff.iter().map(|v| v / d).collect();
            let gb = ga.iter().map(|v| -v).collect();
            Ok((d, ga, gb))
        }
        DistanceMetric::Cosine => {
            let (na, nb) = (l2_norm(a), l2_norm(b));
            if na == 0.0 || nb == 0.0 {
                return Err(Error::Domain("cosine distance of a zero-norm vector".into()));
            }
            let ab = dot(a, b);
            let cos = ab / (na * nb);
            // d = 1 - cos; dcos/da = b/(|a||b|) - cos * a/|a|^2
            let ga = a
                .iter()
                .zip(b)
                .map(|(x, y)| -(y / (na * nb) - cos * x / (na * na)))
                .collect();
            let gb = a
                .iter()
                .zip(b)
                .map(|(x, y)| -(x / (na * nb) - cos * y / (nb * nb)))
                .collect();
            Ok((1.0 - cos.clamp(-1.0, 1.0), ga, gb))
        }
    }
}

/// Back-propagates `grad_u` through `u = a / |a|`.
fn normalize_backward(u: &[f64], norm: f64, grad_u: &[f64]) -> Vec<f64> {
    let proj = dot(u, grad_u);
    u.iter()
        .zip(grad_u)
        .map(|(ui, gi)| (gi - ui * proj) / norm)
        .collect()
}

/// Dense row-major `rows x cols` distance matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DistanceMatrix {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }
}

/// All distances between the rows of `a` and the rows of `b`.
pub fn pairwise_distances<A, B>(
    a: &[A],
    b: &[B],
    metric: DistanceMetric,
    normalize: bool,
) -> Result<DistanceMatrix>
where
    A: AsRef<[f64]>,
    B: AsRef<[f64]>,
{
    let prep = |v: &[f64]| -> Result<Vec<f64>> {
        if normalize {
            l2_normalize(v)
        } else {
            Ok(v.to_vec())
        }
    };
    let left = a.iter().map(|v| prep(v.as_ref())).collect::<Result<Vec<_>>>()?;
    let right = b.iter().map(|v| prep(v.as_ref())).collect::<Result<Vec<_>>>()?;
    let mut data = Vec::with_capacity(left.len() * right.len());
    for x in &left {
        for y in &right {
            data.push(metric.distance(x, y)?);
        }
    }
    Ok(DistanceMatrix {
        rows: left.len(),
        cols: right.len(),
        data,
    })
}

/// Metric applied after the optional normalization of both arguments.
pub fn distance(metric: DistanceMetric, a: &[f64], b: &[f64], normalize: bool) -> Result<f64> {
    if normalize {
        metric.distance(&l2_normalize(a)?, &l2_normalize(b)?)
    } else {
        metric.distance(a, b)
    }
}

impl AsRef<[f64]> for Embedding {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}
