//! Verification pair protocols.
//!
//! The native file format is tab-separated with a header line and the columns
//! `ref1 ref2 genuine fold`, where `genuine` is `1` or `0`. LFW-style
//! `pairs.txt` files can be read as well.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::batching::IdentityPool;
use crate::error::{Error, Result};
use crate::seeds::{rng_for, tag};

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PairRecord {
    pub ref1: String,
    pub ref2: String,
    pub genuine: bool,
    pub fold: usize,
}

/// Ordered verification pairs with a fold assignment. The order matters:
/// the second reference of each pair is the one degraded in cross-resolution
/// evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairProtocol {
    pairs: Vec<PairRecord>,
    folds: usize,
}

impl PairProtocol {
    /// Checks that every fold index is below `folds` and every fold is used.
    pub fn new(pairs: Vec<PairRecord>, folds: usize) -> Result<Self> {
        if folds == 0 {
            return Err(Error::Protocol("fold count must be positive".into()));
        }
        let mut used = vec![false; folds];
        for p in &pairs {
            if p.fold >= folds {
                return Err(Error::Protocol(format!(
                    "pair {} / {} has fold {} outside [0, {folds})",
                    p.ref1, p.ref2, p.fold
                )));
            }
            used[p.fold] = true;
        }
        if let Some(empty) = used.iter().position(|u| !u) {
            return Err(Error::Protocol(format!("fold {empty} has no pairs")));
        }
        Ok(Self { pairs, folds })
    }

    pub fn pairs(&self) -> &[PairRecord] {
        &self.pairs
    }

    pub fn folds(&self) -> usize {
        self.folds
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn genuine_flags(&self) -> Vec<bool> {
        self.pairs.iter().map(|p| p.genuine).collect()
    }

    pub fn fold_ids(&self) -> Vec<usize> {
        self.pairs.iter().map(|p| p.fold).collect()
    }

    pub fn genuine_count(&self) -> usize {
        self.pairs.iter().filter(|p| p.genuine).count()
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::from("ref1\tref2\tgenuine\tfold\n");
        for p in &self.pairs {
            out.push_str(&format!("{}\t{}\t{}\t{}\n", p.ref1, p.ref2, u8::from(p.genuine), p.fold));
        }
        out
    }

    /// Parses the native format. The fold count is one more than the largest
    /// fold index.
    pub fn from_tsv(text: &str) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .delimiter(b'\t')
            .has_headers(true)
            .from_reader(text.as_bytes());
        let headers = reader.headers().map_err(|e| Error::Parse(e.to_string()))?.clone();
        let expected = ["ref1", "ref2", "genuine", "fold"];
        if headers.iter().collect::<Vec<_>>() != expected {
            return Err(Error::Parse(format!(
                "protocol header must be '{}', found '{}'",
                expected.join("\t"),
                headers.iter().collect::<Vec<_>>().join("\t")
            )));
        }
        let mut pairs = Vec::new();
        for (i, row) in reader.records().enumerate() {
            let row = row.map_err(|e| Error::Parse(format!("protocol row {}: {e}", i + 2)))?;
            let genuine = match &row[2] {
                "1" | "true" => true,
                "0" | "false" => false,
                other => return Err(Error::Parse(format!("row {}: genuine flag '{other}'", i + 2))),
            };
            let fold = row[3]
                .parse()
                .map_err(|_| Error::Parse(format!("row {}: fold '{}'", i + 2, &row[3])))?;
            pairs.push(PairRecord {
                ref1: row[0].to_string(),
                ref2: row[1].to_string(),
                genuine,
                fold,
            });
        }
        let folds = pairs.iter().map(|p| p.fold + 1).max().unwrap_or(0);
        Self::new(pairs, folds)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_tsv(&text)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        crate::io::write_text(path, &self.to_tsv())
    }

    /// Parses an LFW-style `pairs.txt`: an optional `folds n` header, then per
    /// fold `n` genuine lines `name i j` followed by `n` imposter lines
    /// `name1 i name2 j`. References become `name/name_XXXX.<extension>`.
    /// Without a header all pairs land in a single fold.
    pub fn from_lfw_pairs(text: &str, extension: &str) -> Result<Self> {
        let mut lines = text.lines().map(str::trim).filter(|l| !l.is_empty()).peekable();
        let mut layout = None;
        if let Some(first) = lines.peek() {
            let nums: Vec<&str> = first.split_whitespace().collect();
            if nums.len() == 2 && nums.iter().all(|t| t.parse::<usize>().is_ok()) {
                let k: usize = nums[0].parse().unwrap_or(0);
                let n: usize = nums[1].parse().unwrap_or(0);
                if k == 0 || n == 0 {
                    return Err(Error::Parse("pairs.txt header must have positive counts".into()));
                }
                layout = Some((k, n));
                lines.next();
            }
        }
        let image = |name: &str, idx: &str| -> Result<String> {
            let i: usize = idx
                .parse()
                .map_err(|_| Error::Parse(format!("image number '{idx}' in pairs.txt")))?;
            Ok(format!("{name}/{name}_{i:04}.{extension}"))
        };
        let mut pairs = Vec::new();
        for (i, line) in lines.enumerate() {
            let t: Vec<&str> = line.split_whitespace().collect();
            let (ref1, ref2, genuine) = match t.as_slice() {
                [name, a, b] => (image(name, a)?, image(name, b)?, true),
                [n1, a, n2, b] => (image(n1, a)?, image(n2, b)?, false),
                _ => return Err(Error::Parse(format!("malformed pairs.txt line '{line}'"))),
            };
            let fold = match layout {
                Some((_, n)) => i / (2 * n),
                None => 0,
            };
            pairs.push(PairRecord {
                ref1,
                ref2,
                genuine,
                fold,
            });
        }
        let folds = match layout {
            Some((k, n)) => {
                if pairs.len() != 2 * k * n {
                    return Err(Error::Parse(format!(
                        "pairs.txt header announces {} pairs, found {}",
                        2 * k * n,
                        pairs.len()
                    )));
                }
                k
            }
            None => 1,
        };
        Self::new(pairs, folds)
    }

    pub fn read_lfw_pairs(path: &Path, extension: &str) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_lfw_pairs(&text, extension)
    }
}

type ImagePair = (usize, usize, usize, usize);

fn genuine_total(pool: &IdentityPool) -> u64 {
    pool.identities()
        .iter()
        .map(|i| {
            let n = i.images.len() as u64;
            n * n.saturating_sub(1) / 2
        })
        .sum()
}

fn imposter_total(pool: &IdentityPool) -> u64 {
    let n = pool.image_count() as u64;
    n * n.saturating_sub(1) / 2 - genuine_total(pool)
}

/// Samples `n` distinct unordered pairs with `draw`, which returns a pair in
/// canonical order. Sampling is by rejection; callers guarantee `n` does not
/// exceed the number of available pairs.
fn sample_distinct<R: Rng>(n: usize, rng: &mut R, mut draw: impl FnMut(&mut R) -> ImagePair) -> Vec<ImagePair> {
    let mut seen = HashSet::with_capacity(n);
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let p = draw(rng);
        if seen.insert(p) {
            out.push(p);
        }
    }
    out
}

fn enumerate_genuine(pool: &IdentityPool) -> Vec<ImagePair> {
    let mut out = Vec::new();
    for (id, ident) in pool.identities().iter().enumerate() {
        for a in 0..ident.images.len() {
            for b in a + 1..ident.images.len() {
                out.push((id, a, id, b));
            }
        }
    }
    out
}

fn enumerate_imposter(pool: &IdentityPool) -> Vec<ImagePair> {
    let ids = pool.identities();
    let mut out = Vec::new();
    for i in 0..ids.len() {
        for j in i + 1..ids.len() {
            for a in 0..ids[i].images.len() {
                for b in 0..ids[j].images.len() {
                    out.push((i, a, j, b));
                }
            }
        }
    }
    out
}

fn choose_pairs<R: Rng>(
    n: usize,
    total: u64,
    rng: &mut R,
    enumerate: impl FnOnce() -> Vec<ImagePair>,
    draw: impl FnMut(&mut R) -> ImagePair,
) -> Vec<ImagePair> {
    if (n as u64) * 2 > total {
        // dense request: enumerate and take a random subset
        let all = enumerate();
        rand::seq::index::sample(rng, all.len(), n)
            .into_iter()
            .map(|i| all[i])
            .collect()
    } else {
        sample_distinct(n, rng, draw)
    }
}

/// Random genuine and imposter pairs without duplicates. Folds are assigned
/// round-robin within each class after shuffling, so per-fold class counts
/// differ by at most one, and the final row order is shuffled.
pub fn generate_pairs(
    pool: &IdentityPool,
    n_genuine: usize,
    n_imposter: usize,
    folds: usize,
    seed: u64,
) -> Result<PairProtocol> {
    if folds == 0 || n_genuine + n_imposter < folds {
        return Err(Error::Protocol(format!(
            "{} pairs cannot fill {folds} folds",
            n_genuine + n_imposter
        )));
    }
    let g_total = genuine_total(pool);
    let i_total = imposter_total(pool);
    if n_genuine as u64 > g_total {
        return Err(Error::Protocol(format!(
            "requested {n_genuine} genuine pairs, only {g_total} distinct ones exist"
        )));
    }
    if n_imposter as u64 > i_total {
        return Err(Error::Protocol(format!(
            "requested {n_imposter} imposter pairs, only {i_total} distinct ones exist"
        )));
    }
    let ids = pool.identities();
    let mut rng = rng_for(seed, &[tag::PAIRS]);

    let weights: Vec<u64> = ids
        .iter()
        .map(|i| {
            let n = i.images.len() as u64;
            n * n.saturating_sub(1) / 2
        })
        .collect();
    let genuine = choose_pairs(n_genuine, g_total, &mut rng, || enumerate_genuine(pool), |rng| {
        let mut t = rng.gen_range(0..g_total);
        let id = weights
            .iter()
            .position(|&w| {
                if t < w {
                    true
                } else {
                    t -= w;
                    false
                }
            })
            .expect("weights cover the total");
        let picked = rand::seq::index::sample(rng, ids[id].images.len(), 2);
        let (a, b) = (picked.index(0), picked.index(1));
        (id, a.min(b), id, a.max(b))
    });

    // flat image index -> (identity, image)
    let flat: Vec<(usize, usize)> = ids
        .iter()
        .enumerate()
        .flat_map(|(i, ident)| (0..ident.images.len()).map(move |j| (i, j)))
        .collect();
    let imposter = choose_pairs(n_imposter, i_total, &mut rng, || enumerate_imposter(pool), |rng| loop {
        let a = flat[rng.gen_range(0..flat.len())];
        let b = flat[rng.gen_range(0..flat.len())];
        if a.0 != b.0 {
            let (x, y) = if a < b { (a, b) } else { (b, a) };
            break (x.0, x.1, y.0, y.1);
        }
    });

    let mut records = Vec::with_capacity(n_genuine + n_imposter);
    for (class, mut list) in [(true, genuine), (false, imposter)] {
        list.shuffle(&mut rng);
        for (k, (i1, a, i2, b)) in list.into_iter().enumerate() {
            let (mut r1, mut r2) = (ids[i1].images[a].clone(), ids[i2].images[b].clone());
            if rng.gen::<bool>() {
                std::mem::swap(&mut r1, &mut r2);
            }
            records.push(PairRecord {
                ref1: r1,
                ref2: r2,
                genuine: class,
                fold: k % folds,
            });
        }
    }
    records.shuffle(&mut rng);
    PairProtocol::new(records, folds)
}
