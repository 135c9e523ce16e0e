//! Quantitative checks on a learned joint space.
//!
//! All metrics are cosine-based, so scaling any embedding row by a positive
//! factor changes nothing. Ranking ties are broken by the lower row index.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::io::Write;

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{concatenate, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::contrastive::{cosine_matrix, l2_normalize};
use crate::embedstore::{PairDataset, SplitIndices};
use crate::error::{Error, Result};
use crate::trainer::HeadPair;

/// A rate measured in both retrieval directions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Directional {
    pub a_to_b: f64,
    pub b_to_a: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RecallAtK {
    pub k: usize,
    pub a_to_b: f64,
    pub b_to_a: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_queries: usize,
    /// Sorted by `k`.
    pub recall: Vec<RecallAtK>,
    pub class_match_accuracy: Option<Directional>,
    pub silhouette: Option<f64>,
}

impl EvalReport {
    pub fn recall_at(&self, k: usize) -> Option<Directional> {
        self.recall.iter().find(|r| r.k == k).map(|r| Directional {
            a_to_b: r.a_to_b,
            b_to_a: r.b_to_a,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Report(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Report(e.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Modality {
    A,
    B,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectedPoint {
    pub pair_id: u64,
    pub modality: Modality,
    pub label: i32,
    pub x: f64,
    pub y: f64,
}

/// One A row and one B row per evaluated pair, interleaved.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ProjectedPoints {
    pub rows: Vec<ProjectedPoint>,
}

impl ProjectedPoints {
    /// `pair_id,modality,label,x,y` with LF line endings.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("pair_id,modality,label,x,y\n");
        for p in &self.rows {
            let m = match p.modality {
                Modality::A => "A",
                Modality::B => "B",
            };
            let _ = writeln!(out, "{},{},{},{},{}", p.pair_id, m, p.label, p.x, p.y);
        }
        out
    }

    pub fn write_csv<W: Write>(&self, mut sink: W) -> Result<()> {
        sink.write_all(self.to_csv().as_bytes())?;
        Ok(())
    }
}

fn check_pairs(a: &Array2<f64>, b: &Array2<f64>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!("a is {:?} but b is {:?}", a.dim(), b.dim())));
    }
    if a.nrows() < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 pairs, got {}", a.nrows())));
    }
    Ok(())
}

/// Zero-based rank of the true match `i` within `row`, ties to the lower index.
fn rank_of(row: ndarray::ArrayView1<'_, f64>, i: usize) -> usize {
    let target = row[i];
    row.iter()
        .enumerate()
        .filter(|&(j, &s)| s > target || (s == target && j < i))
        .count()
}

/// Index of the highest score, ties to the lower index.
fn argmax(row: ndarray::ArrayView1<'_, f64>) -> usize {
    let mut best = 0;
    for (j, &s) in row.iter().enumerate() {
        if s > row[best] {
            best = j;
        }
    }
    best
}

/// Fraction of queries whose ground-truth partner ranks in the top `k`, both directions.
pub fn recall_at_k(a_emb: &Array2<f64>, b_emb: &Array2<f64>, ks: &[usize]) -> Result<Vec<RecallAtK>> {
    check_pairs(a_emb, b_emb)?;
    let n = a_emb.nrows();
    let ks: BTreeSet<usize> = ks.iter().copied().collect();
    if ks.is_empty() {
        return Err(Error::InvalidArgument("no k values given".into()));
    }
    if let Some(&bad) = ks.iter().find(|&&k| k == 0 || k > n) {
        return Err(Error::InvalidArgument(format!("k = {bad} outside [1, {n}]")));
    }
    let sim = cosine_matrix(a_emb, b_emb)?;
    let ranks_ab: Vec<usize> = (0..n).map(|i| rank_of(sim.row(i), i)).collect();
    let ranks_ba: Vec<usize> = (0..n).map(|i| rank_of(sim.column(i), i)).collect();
    let rate = |ranks: &[usize], k: usize| ranks.iter().filter(|&&r| r < k).count() as f64 / n as f64;
    Ok(ks
        .into_iter()
        .map(|k| RecallAtK {
            k,
            a_to_b: rate(&ranks_ab, k),
            b_to_a: rate(&ranks_ba, k),
        })
        .collect())
}

fn distinct_labels(labels: &[i32]) -> usize {
    labels.iter().collect::<BTreeSet<_>>().len()
}

/// Fraction of queries whose nearest cross-modal neighbor shares the query's label.
pub fn class_match_accuracy(a_emb: &Array2<f64>, b_emb: &Array2<f64>, labels: &[i32]) -> Result<Directional> {
    check_pairs(a_emb, b_emb)?;
    let n = a_emb.nrows();
    if labels.len() != n {
        return Err(Error::Shape(format!("{} labels for {n} pairs", labels.len())));
    }
    if distinct_labels(labels) < 2 {
        return Err(Error::InvalidArgument("class match needs at least 2 distinct labels".into()));
    }
    let sim = cosine_matrix(a_emb, b_emb)?;
    let hits_ab = (0..n).filter(|&i| labels[argmax(sim.row(i))] == labels[i]).count();
    let hits_ba = (0..n).filter(|&i| labels[argmax(sim.column(i))] == labels[i]).count();
    Ok(Directional {
        a_to_b: hits_ab as f64 / n as f64,
        b_to_a: hits_ba as f64 / n as f64,
    })
}

/// Mean silhouette coefficient under cosine distance `1 - cos`.
/// Points in singleton classes contribute 0.
pub fn silhouette(embeddings: &Array2<f64>, labels: &[i32]) -> Result<f64> {
    let m = embeddings.nrows();
    if labels.len() != m {
        return Err(Error::Shape(format!("{} labels for {m} points", labels.len())));
    }
    if m < 3 {
        return Err(Error::InvalidArgument(format!("silhouette needs at least 3 points, got {m}")));
    }
    let classes: Vec<i32> = labels.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
    if classes.len() < 2 {
        return Err(Error::InvalidArgument("silhouette needs at least 2 classes".into()));
    }
    let class_of: Vec<usize> = labels.iter().map(|l| classes.binary_search(l).unwrap()).collect();
    let mut sizes = vec![0usize; classes.len()];
    for &c in &class_of {
        sizes[c] += 1;
    }
    let sim = cosine_matrix(embeddings, embeddings)?;

    let mut total = 0.0;
    let mut sums = vec![0.0; classes.len()];
    for i in 0..m {
        let own = class_of[i];
        if sizes[own] == 1 {
            continue;
        }
        sums.iter_mut().for_each(|s| *s = 0.0);
        for j in 0..m {
            if j != i {
                sums[class_of[j]] += 1.0 - sim[[i, j]];
            }
        }
        let within = sums[own] / (sizes[own] - 1) as f64;
        let nearest = (0..classes.len())
            .filter(|&c| c != own)
            .map(|c| sums[c] / sizes[c] as f64)
            .fold(f64::INFINITY, f64::min);
        let denom = within.max(nearest);
        if denom > 0.0 {
            total += (nearest - within) / denom;
        }
    }
    Ok(total / m as f64)
}

/// Projects rows onto the top two principal axes of the centered data. Each
/// axis is signed so that its largest-magnitude entry is positive.
pub fn pca_project_2d(embeddings: &Array2<f64>) -> Result<Array2<f64>> {
    let (m, d) = embeddings.dim();
    if m < 2 || d < 2 {
        return Err(Error::InvalidArgument(format!("PCA needs at least 2 rows and 2 columns, got {m}x{d}")));
    }
    if !embeddings.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("PCA input".into()));
    }
    let mean = embeddings.mean_axis(Axis(0)).expect("non-empty");
    let centered = embeddings - &mean;
    let scale = embeddings.iter().fold(0.0f64, |s, v| s.max(v.abs()));
    let spread = centered.iter().fold(0.0f64, |s, v| s.max(v.abs()));
    if spread <= 1e-12 * scale.max(1.0) {
        return Err(Error::InvalidArgument("PCA input has rank 0 (all rows equal)".into()));
    }

    let cov = centered.t().dot(&centered) / (m - 1) as f64;
    let eig = SymmetricEigen::new(DMatrix::from_fn(d, d, |i, j| cov[[i, j]]));
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&x, &y| eig.eigenvalues[y].total_cmp(&eig.eigenvalues[x]).then(x.cmp(&y)));

    let mut axes = Array2::zeros((d, 2));
    for (col, &k) in order.iter().take(2).enumerate() {
        let v = eig.eigenvectors.column(k);
        let mut pivot = 0;
        for i in 1..d {
            if v[i].abs() > v[pivot].abs() {
                pivot = i;
            }
        }
        let sign = if v[pivot] < 0.0 { -1.0 } else { 1.0 };
        for i in 0..d {
            axes[[i, col]] = sign * v[i];
        }
    }
    Ok(centered.dot(&axes))
}

/// Embeds the validation pairs, scores them and projects both modalities jointly.
pub fn evaluate(
    dataset: &PairDataset,
    heads: &HeadPair,
    split: &SplitIndices,
    ks: &[usize],
) -> Result<(EvalReport, ProjectedPoints)> {
    evaluate_indices(dataset, heads, &split.val, ks)
}

/// [`evaluate`] over an explicit set of record indices.
pub fn evaluate_indices(
    dataset: &PairDataset,
    heads: &HeadPair,
    indices: &[usize],
    ks: &[usize],
) -> Result<(EvalReport, ProjectedPoints)> {
    heads.check_dims(dataset)?;
    let (a, b) = heads.embed(dataset, indices)?;
    let a = l2_normalize(&a);
    let b = l2_normalize(&b);
    let recall = recall_at_k(&a, &b, ks)?;

    let labels = dataset.labels(indices);
    let class_metrics = dataset.labeled && labels.iter().all(|&l| l >= 0) && distinct_labels(&labels) >= 2;
    let joint = concatenate(Axis(0), &[a.view(), b.view()]).map_err(|e| Error::Shape(e.to_string()))?;
    let (class_match_accuracy, silhouette) = if class_metrics {
        let joint_labels: Vec<i32> = labels.iter().chain(&labels).copied().collect();
        (
            Some(class_match_accuracy(&a, &b, &labels)?),
            Some(silhouette(&joint, &joint_labels)?),
        )
    } else {
        (None, None)
    };

    let n = indices.len();
    let coords = pca_project_2d(&joint)?;
    let mut rows = Vec::with_capacity(2 * n);
    for (r, &idx) in indices.iter().enumerate() {
        let rec = &dataset.records[idx];
        for (modality, row) in [(Modality::A, r), (Modality::B, n + r)] {
            rows.push(ProjectedPoint {
                pair_id: rec.pair_id,
                modality,
                label: rec.label,
                x: coords[[row, 0]],
                y: coords[[row, 1]],
            });
        }
    }

    Ok((
        EvalReport {
            n_queries: n,
            recall,
            class_match_accuracy,
            silhouette,
        },
        ProjectedPoints { rows },
    ))
}
