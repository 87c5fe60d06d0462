//! Inter-head representational similarity via unbiased linear CKA.
//!
//! HSIC₁ is evaluated in feature space: with `K = AAᵀ`, `L = BBᵀ` and zeroed
//! diagonals, every term of the estimator reduces to `AᵀB`, row norms and
//! column sums, so no n×n Gram matrix is formed.

use std::path::Path;

use indexmap::IndexMap;
use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::model::Model;
use crate::tensor::{Scalar, Tensor};
use crate::train::MeshBank;

pub const DEFAULT_SUBSAMPLE_CAP: usize = 4096;

/// `B×D×P×T` head output to a `(B·P·T)×D` matrix; rows ordered by
/// (sample, patch, time).
pub fn flatten_head<S: Scalar>(rep: &Tensor<S>) -> Result<DMatrix<f64>> {
    if rep.rank() != 4 {
        return Err(shape_err!(
            "head representation must be B×D×P×T, got {:?}",
            rep.shape()
        ));
    }
    let [b, d, p, t] = [
        rep.shape()[0],
        rep.shape()[1],
        rep.shape()[2],
        rep.shape()[3],
    ];
    let x = rep.data();
    Ok(DMatrix::from_fn(b * p * t, d, |row, col| {
        let (bi, rest) = (row / (p * t), row % (p * t));
        x[((bi * d + col) * p * t) + rest].as_f64()
    }))
}

/// Sums needed by HSIC₁ for one pair of feature matrices.
fn hsic1(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    ka: &[f64],
    kb: &[f64],
    sa: &[f64],
    sb: &[f64],
) -> f64 {
    let n = a.nrows() as f64;
    let cross = a.transpose() * b;
    let diag: f64 = ka.iter().zip(kb).map(|(x, y)| x * y).sum();
    let trace = cross.norm_squared() - diag;
    let dot = |v: &[f64], w: &[f64]| v.iter().zip(w).map(|(x, y)| x * y).sum::<f64>();
    let total_a = dot(sa, sa) - ka.iter().sum::<f64>();
    let total_b = dot(sb, sb) - kb.iter().sum::<f64>();
    // (K̃1)_i = a_i·Σa − k_i
    let row_a = a * DMatrix::from_column_slice(sa.len(), 1, sa);
    let row_b = b * DMatrix::from_column_slice(sb.len(), 1, sb);
    let mixed: f64 = (0..a.nrows())
        .map(|i| (row_a[i] - ka[i]) * (row_b[i] - kb[i]))
        .sum();
    (trace + total_a * total_b / ((n - 1.0) * (n - 2.0)) - 2.0 / (n - 2.0) * mixed)
        / (n * (n - 3.0))
}

struct Features {
    norms: Vec<f64>,
    sums: Vec<f64>,
    self_hsic: f64,
}

fn features(a: &DMatrix<f64>) -> Result<Features> {
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(
            "representation contains NaN or infinity".into(),
        ));
    }
    let norms: Vec<f64> = a.row_iter().map(|r| r.norm_squared()).collect();
    let sums: Vec<f64> = a.column_iter().map(|c| c.sum()).collect();
    let self_hsic = hsic1(a, a, &norms, &norms, &sums, &sums);
    if self_hsic.is_nan() || self_hsic <= 0.0 {
        return Err(Error::Degenerate("degenerate representation".into()));
    }
    Ok(Features {
        norms,
        sums,
        self_hsic,
    })
}

fn cka_with<'a>(
    mut a: &'a DMatrix<f64>,
    mut fa: &'a Features,
    mut b: &'a DMatrix<f64>,
    mut fb: &'a Features,
) -> f64 {
    // fixed argument order makes the result exactly symmetric
    let order = (a.ncols(), a.nrows())
        .cmp(&(b.ncols(), b.nrows()))
        .then_with(|| {
            a.iter()
                .zip(b.iter())
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(std::cmp::Ordering::Equal)
        });
    if order.is_gt() {
        std::mem::swap(&mut a, &mut b);
        std::mem::swap(&mut fa, &mut fb);
    }
    hsic1(a, b, &fa.norms, &fb.norms, &fa.sums, &fb.sums) / (fa.self_hsic * fb.self_hsic).sqrt()
}

/// Unbiased linear CKA between `n×d1` and `n×d2` feature matrices. The
/// estimator centers internally; inputs are used as given. Small negative
/// values are possible and not clamped.
pub fn unbiased_linear_cka(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<f64> {
    if a.nrows() != b.nrows() {
        return Err(shape_err!(
            "CKA inputs have {} and {} rows",
            a.nrows(),
            b.nrows()
        ));
    }
    if a.nrows() < 4 {
        return Err(Error::InvalidArgument(format!(
            "unbiased HSIC needs at least 4 samples, got {}",
            a.nrows()
        )));
    }
    Ok(cka_with(a, &features(a)?, b, &features(b)?))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadPair {
    pub head_i: usize,
    pub head_j: usize,
    pub cka: f64,
}

/// All unordered head pairs of one CT module for one validation fold.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CkaSampleSet {
    pub task: String,
    pub variant: String,
    pub subject: usize,
    pub fold: usize,
    pub ct_index: usize,
    pub pairs: Vec<HeadPair>,
}

/// Row subset shared by every head: all rows if `n ≤ cap`, otherwise `cap`
/// rows drawn uniformly without replacement, in ascending order.
pub fn subsample_rows(n: usize, cap: usize, seed: u64) -> Vec<usize> {
    if n <= cap {
        return (0..n).collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = rand::seq::index::sample(&mut rng, n, cap).into_vec();
    rows.sort_unstable();
    rows
}

/// Flattened eval-mode representations of every head of CT module
/// `ct_index` over the given bank rows.
pub fn head_features<S: Scalar>(
    model: &Model<S>,
    bank: &MeshBank<S>,
    rows: &[usize],
    ct_index: usize,
    batch_size: usize,
) -> Result<Vec<DMatrix<f64>>> {
    if rows.is_empty() {
        return Err(Error::Empty("no validation samples for CKA".into()));
    }
    let mut per_head: Vec<Vec<DMatrix<f64>>> = Vec::new();
    for chunk in rows.chunks(batch_size.max(1)) {
        let reps = model.head_representations(&bank.batch(chunk), ct_index)?;
        per_head.resize(reps.len(), Vec::new());
        for (h, rep) in reps.iter().enumerate() {
            per_head[h].push(flatten_head(rep)?);
        }
    }
    Ok(per_head
        .into_iter()
        .map(|blocks| {
            let d = blocks[0].ncols();
            let n: usize = blocks.iter().map(|m| m.nrows()).sum();
            let mut out = DMatrix::zeros(n, d);
            let mut at = 0;
            for m in blocks {
                out.rows_mut(at, m.nrows()).copy_from(&m);
                at += m.nrows();
            }
            out
        })
        .collect())
}

/// CKA of every head pair `i < j` on a shared row subset.
pub fn pairwise_cka(heads: &[DMatrix<f64>], cap: usize, seed: u64) -> Result<Vec<HeadPair>> {
    let n = heads.first().map_or(0, |h| h.nrows());
    let rows = subsample_rows(n, cap, seed);
    let picked: Vec<DMatrix<f64>> = heads.iter().map(|h| h.select_rows(&rows)).collect();
    if rows.len() < 4 {
        return Err(Error::InvalidArgument(format!(
            "unbiased HSIC needs at least 4 samples, got {}",
            rows.len()
        )));
    }
    let feats = picked.iter().map(features).collect::<Result<Vec<_>>>()?;
    let mut pairs = Vec::new();
    for i in 0..picked.len() {
        for j in i + 1..picked.len() {
            pairs.push(HeadPair {
                head_i: i,
                head_j: j,
                cka: cka_with(&picked[i], &feats[i], &picked[j], &feats[j]),
            });
        }
    }
    Ok(pairs)
}

/// Head-pair CKA of a model over validation rows of a bank.
#[allow(clippy::too_many_arguments)]
pub fn pairwise_head_cka<S: Scalar>(
    model: &Model<S>,
    bank: &MeshBank<S>,
    rows: &[usize],
    ct_index: usize,
    cap: usize,
    seed: u64,
    batch_size: usize,
) -> Result<Vec<HeadPair>> {
    let heads = head_features(model, bank, rows, ct_index, batch_size)?;
    pairwise_cka(&heads, cap, seed)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CkaSummary {
    pub task: String,
    pub variant: String,
    pub ct_index: usize,
    pub samples: usize,
    pub mean: f64,
}

/// Mean CKA per (task, variant, CT module), in first-seen order.
pub fn summarize(sets: &[CkaSampleSet]) -> Result<Vec<CkaSummary>> {
    let mut acc: IndexMap<(String, String, usize), (usize, f64)> = IndexMap::new();
    for s in sets {
        let e = acc
            .entry((s.task.clone(), s.variant.clone(), s.ct_index))
            .or_default();
        for p in &s.pairs {
            e.0 += 1;
            e.1 += p.cka;
        }
    }
    if acc.values().all(|e| e.0 == 0) {
        return Err(Error::Empty("no CKA samples to summarize".into()));
    }
    Ok(acc
        .into_iter()
        .filter(|(_, e)| e.0 > 0)
        .map(|((task, variant, ct_index), (n, sum))| CkaSummary {
            task,
            variant,
            ct_index,
            samples: n,
            mean: sum / n as f64,
        })
        .collect())
}

#[derive(Serialize, Deserialize)]
pub struct CkaRow {
    pub task: String,
    pub variant: String,
    pub subject: usize,
    pub fold: usize,
    pub ct_index: usize,
    pub head_i: usize,
    pub head_j: usize,
    pub cka: f64,
}

/// One CSV row per head pair: `task,variant,subject,fold,ct_index,head_i,head_j,cka`.
pub fn write_samples_csv(path: &Path, sets: &[CkaSampleSet]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for s in sets {
        for p in &s.pairs {
            w.serialize(CkaRow {
                task: s.task.clone(),
                variant: s.variant.clone(),
                subject: s.subject,
                fold: s.fold,
                ct_index: s.ct_index,
                head_i: p.head_i,
                head_j: p.head_j,
                cka: p.cka,
            })?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_samples_csv(path: &Path) -> Result<Vec<CkaRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize()
        .map(|row| row.map_err(Error::from))
        .collect()
}
