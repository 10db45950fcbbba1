//! Epoch-wise mini-batch construction with every identity exactly twice.
//!
//! For each batch, `B/2` distinct identities are drawn without replacement
//! with probability proportional to their current number of unpicked images.
//! Only identities with at least two unpicked images are eligible. Two images
//! per chosen identity are then taken uniformly from its unpicked list, and the
//! counts change only once the batch is complete.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeds::{rng_for, tag};

/// One image of a batch with its identity label.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BatchItem {
    pub reference: String,
    pub label: usize,
}

pub type Batch = Vec<BatchItem>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Identity {
    pub name: String,
    pub images: Vec<String>,
}

/// Identities with their images and the unpicked subset of the current epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct IdentityPool {
    identities: Vec<Identity>,
    unpicked: Vec<Vec<usize>>,
}

impl IdentityPool {
    pub fn new(identities: Vec<Identity>) -> Self {
        let unpicked = identities.iter().map(|i| (0..i.images.len()).collect()).collect();
        Self {
            identities,
            unpicked,
        }
    }

    /// Builds a pool from `(identity, image reference)` rows. Identities are
    /// ordered by name so the label assignment is stable.
    pub fn from_rows<I, S, T>(rows: I) -> Self
    where
        I: IntoIterator<Item = (S, T)>,
        S: Into<String>,
        T: Into<String>,
    {
        let mut map: BTreeMap<String, Vec<String>> = BTreeMap::new();
        for (id, img) in rows {
            map.entry(id.into()).or_default().push(img.into());
        }
        Self::new(
            map.into_iter()
                .map(|(name, images)| Identity { name, images })
                .collect(),
        )
    }

    /// Reads a tab-separated manifest of `identity<TAB>relative/path` lines.
    pub fn from_manifest(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut rows = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim_end();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut parts = line.split('\t');
            match (parts.next(), parts.next(), parts.next()) {
                (Some(id), Some(img), None) if !id.is_empty() && !img.is_empty() => {
                    rows.push((id.to_string(), img.to_string()))
                }
                _ => {
                    return Err(Error::Parse(format!(
                        "{}:{}: expected 'identity<TAB>path'",
                        path.display(),
                        n + 1
                    )))
                }
            }
        }
        Ok(Self::from_rows(rows))
    }

    /// Scans `root/<identity>/<image>` for image files.
    pub fn from_directory(root: &Path) -> Result<Self> {
        let mut rows = Vec::new();
        let entries = std::fs::read_dir(root).map_err(|e| Error::io(root, e))?;
        for entry in entries {
            let entry = entry.map_err(|e| Error::io(root, e))?;
            let path = entry.path();
            if !path.is_dir() {
                continue;
            }
            let name = entry.file_name().to_string_lossy().into_owned();
            let files = std::fs::read_dir(&path).map_err(|e| Error::io(&path, e))?;
            for f in files {
                let f = f.map_err(|e| Error::io(&path, e))?;
                let fname = f.file_name().to_string_lossy().into_owned();
                let lower = fname.to_ascii_lowercase();
                if [".png", ".jpg", ".jpeg"].iter().any(|ext| lower.ends_with(ext)) {
                    rows.push((name.clone(), format!("{name}/{fname}")));
                }
            }
        }
        let mut pool = Self::from_rows(rows);
        for id in &mut pool.identities {
            id.images.sort();
        }
        Ok(pool)
    }

    pub fn identities(&self) -> &[Identity] {
        &self.identities
    }

    pub fn len(&self) -> usize {
        self.identities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.identities.is_empty()
    }

    pub fn image_count(&self) -> usize {
        self.identities.iter().map(|i| i.images.len()).sum()
    }

    pub fn unpicked_counts(&self) -> Vec<usize> {
        self.unpicked.iter().map(Vec::len).collect()
    }

    /// Replenishes every identity for a new epoch.
    pub fn reset(&mut self) {
        for (u, id) in self.unpicked.iter_mut().zip(&self.identities) {
            *u = (0..id.images.len()).collect();
        }
    }

    fn eligible(&self) -> Vec<usize> {
        (0..self.identities.len())
            .filter(|&i| self.unpicked[i].len() >= 2)
            .collect()
    }

    /// Number of further full batches possible under the exactly-twice rule:
    /// the largest `k` with `sum_i min(pairs_i, k) >= k * B/2`.
    pub fn remaining_capacity(&self, batch_size: usize) -> usize {
        if batch_size < 2 || !batch_size.is_multiple_of(2) {
            return 0;
        }
        let per_batch = batch_size / 2;
        let pairs: Vec<usize> = self.unpicked.iter().map(|u| u.len() / 2).collect();
        let feasible = |k: usize| pairs.iter().map(|&p| p.min(k)).sum::<usize>() >= k * per_batch;
        let mut hi = pairs.iter().sum::<usize>() / per_batch;
        while hi > 0 && !feasible(hi) {
            hi -= 1;
        }
        hi
    }

    /// Draws one batch and marks its images as picked; `None` once fewer than
    /// `B/2` identities are eligible.
    pub fn draw_batch<R: Rng>(&mut self, batch_size: usize, rng: &mut R) -> Option<Batch> {
        let ids = self.draw_identities(batch_size / 2, rng)?;
        let mut batch = Vec::with_capacity(batch_size);
        for id in ids {
            let pos = sample(rng, self.unpicked[id].len(), 2).into_vec();
            let mut chosen: Vec<usize> = pos.iter().map(|&p| self.unpicked[id][p]).collect();
            // remove higher position first so the lower one stays valid
            let (a, b) = if pos[0] > pos[1] { (pos[0], pos[1]) } else { (pos[1], pos[0]) };
            self.unpicked[id].swap_remove(a);
            self.unpicked[id].swap_remove(b);
            chosen.sort_unstable();
            for img in chosen {
                batch.push(BatchItem {
                    reference: self.identities[id].images[img].clone(),
                    label: id,
                });
            }
        }
        Some(batch)
    }

    /// Proportional draw of `n` distinct eligible identities, in draw order.
    pub fn draw_identities<R: Rng>(&self, n: usize, rng: &mut R) -> Option<Vec<usize>> {
        let mut candidates = self.eligible();
        if n == 0 || candidates.len() < n {
            return None;
        }
        let mut weights: Vec<f64> = candidates.iter().map(|&i| self.unpicked[i].len() as f64).collect();
        let mut chosen = Vec::with_capacity(n);
        for _ in 0..n {
            let total: f64 = weights.iter().sum();
            let mut u = rng.gen::<f64>() * total;
            let mut k = weights.len() - 1;
            for (j, w) in weights.iter().enumerate() {
                if u < *w {
                    k = j;
                    break;
                }
                u -= w;
            }
            chosen.push(candidates.remove(k));
            weights.remove(k);
        }
        Some(chosen)
    }
}

pub fn validate_batch_size(batch_size: usize) -> Result<()> {
    if batch_size < 2 || !batch_size.is_multiple_of(2) {
        return Err(Error::Config(format!(
            "batch size must be even and >= 2, got {batch_size}"
        )));
    }
    Ok(())
}

/// All batches of one epoch. The pool is replenished first and left in its
/// end-of-epoch state.
pub fn build_epoch_batches(pool: &mut IdentityPool, batch_size: usize, seed: u64) -> Result<Vec<Batch>> {
    validate_batch_size(batch_size)?;
    pool.reset();
    let eligible = pool.eligible().len();
    if eligible < batch_size / 2 {
        return Err(Error::Config(format!(
            "batch size {batch_size} needs {} identities with two images, only {eligible} available",
            batch_size / 2
        )));
    }
    let mut rng = rng_for(seed, &[tag::SAMPLER]);
    let mut out = Vec::new();
    while let Some(b) = pool.draw_batch(batch_size, &mut rng) {
        out.push(b);
    }
    Ok(out)
}
