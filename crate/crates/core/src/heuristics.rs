//! Pairwise class-confusion scores computed from prediction logits.
//!
//! Every heuristic returns a symmetric |Y| x |Y| [`ConfusionReport`] with a
//! zero diagonal. Larger values mean the two classes are harder to tell
//! apart; negative values (correlation-based heuristics only) are kept here
//! and clamped when sampling.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::adapter::PredictionMatrix;
use crate::concept::LabelSet;

#[derive(Debug, Error, PartialEq)]
pub enum HeuristicError {
    #[error("logit column for class {0} has zero variance")]
    DegenerateColumn(usize),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("labeled confusion needs labels")]
    NoLabels,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Heuristic {
    /// Co-occurrence counts within each image's `k` highest-scoring classes.
    TopK { k: usize },
    /// Pearson correlation between logit columns.
    Pearson,
    /// Average-linkage clustering of logit columns; earlier merges score higher.
    Agglomerative { n_clusters: usize },
    /// Symmetrized true-vs-predicted confusion counts. Requires labels.
    LabeledConfusion,
    /// `1 / (1 + W1)` between the empirical distributions of two logit columns.
    Emd,
    /// Pearson correlation after projecting onto the top principal directions.
    PcaCorr { n_components: usize },
    /// Uniform random scores; an uninformative critic for ablations.
    Random,
}

impl Heuristic {
    pub fn name(&self) -> String {
        match self {
            Heuristic::TopK { k } => format!("topk({k})"),
            Heuristic::Pearson => "pearson".into(),
            Heuristic::Agglomerative { n_clusters } => format!("agglomerative({n_clusters})"),
            Heuristic::LabeledConfusion => "labeled_confusion".into(),
            Heuristic::Emd => "emd".into(),
            Heuristic::PcaCorr { n_components } => format!("pca_corr({n_components})"),
            Heuristic::Random => "random".into(),
        }
    }

    pub fn needs_labels(&self) -> bool {
        matches!(self, Heuristic::LabeledConfusion)
    }

    /// Dispatches to the heuristic. `labels` is only read by
    /// [`Heuristic::LabeledConfusion`]; `seed` only by [`Heuristic::Random`].
    pub fn compute(
        &self,
        pred: &PredictionMatrix,
        labels: Option<&[usize]>,
        seed: u64,
    ) -> Result<ConfusionReport, HeuristicError> {
        match *self {
            Heuristic::TopK { k } => topk_confusion(pred, k),
            Heuristic::Pearson => pearson_confusion(pred),
            Heuristic::Agglomerative { n_clusters } => agglomerative_confusion(pred, n_clusters),
            Heuristic::LabeledConfusion => labeled_confusion(pred, labels.ok_or(HeuristicError::NoLabels)?),
            Heuristic::Emd => emd_confusion(pred),
            Heuristic::PcaCorr { n_components } => pca_corr_confusion(pred, n_components),
            Heuristic::Random => Ok(random_confusion(pred.n_classes(), seed)),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConfusionReport {
    n_classes: usize,
    r: Vec<f64>,
    heuristic: Heuristic,
    iteration: u32,
}

impl ConfusionReport {
    fn from_fn(n: usize, heuristic: Heuristic, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut r = vec![0.0; n * n];
        for i in 0..n {
            for j in (i + 1)..n {
                let v = f(i, j);
                r[i * n + j] = v;
                r[j * n + i] = v;
            }
        }
        Self { n_classes: n, r, heuristic, iteration: 0 }
    }

    /// Builds a report from a full matrix, symmetrizing by averaging and
    /// zeroing the diagonal.
    pub fn from_matrix(n: usize, values: &[f64], heuristic: Heuristic) -> Self {
        assert_eq!(values.len(), n * n);
        Self::from_fn(n, heuristic, |i, j| 0.5 * (values[i * n + j] + values[j * n + i]))
    }

    pub fn with_iteration(mut self, iteration: u32) -> Self {
        self.iteration = iteration;
        self
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.r[i * self.n_classes + j]
    }

    pub fn values(&self) -> &[f64] {
        &self.r
    }

    pub fn heuristic(&self) -> Heuristic {
        self.heuristic
    }

    pub fn iteration(&self) -> u32 {
        self.iteration
    }

    /// Upper-triangle pairs `(i, j, r_ij)` with `i < j`, row-major.
    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        let n = self.n_classes;
        (0..n).flat_map(move |i| ((i + 1)..n).map(move |j| (i, j, self.get(i, j))))
    }

    pub fn to_json(&self, labels: &LabelSet) -> String {
        let rows: Vec<&[f64]> = self.r.chunks(self.n_classes.max(1)).collect();
        let doc = json!({
            "iteration": self.iteration,
            "heuristic": self.heuristic.name(),
            "labels": labels,
            "r": rows,
        });
        serde_json::to_string_pretty(&doc).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<(Self, Vec<String>), serde_json::Error> {
        #[derive(Deserialize)]
        struct Doc {
            iteration: u32,
            heuristic: String,
            labels: Vec<String>,
            r: Vec<Vec<f64>>,
        }
        let doc: Doc = serde_json::from_str(text)?;
        let n = doc.r.len();
        let heuristic = parse_heuristic_name(&doc.heuristic)
            .ok_or_else(|| serde::de::Error::custom(format!("unknown heuristic {}", doc.heuristic)))?;
        let report = Self {
            n_classes: n,
            r: doc.r.into_iter().flatten().collect(),
            heuristic,
            iteration: doc.iteration,
        };
        Ok((report, doc.labels))
    }
}

fn parse_heuristic_name(name: &str) -> Option<Heuristic> {
    let arg = |prefix: &str| -> Option<usize> {
        name.strip_prefix(prefix)?.strip_prefix('(')?.strip_suffix(')')?.parse().ok()
    };
    Some(match name {
        "pearson" => Heuristic::Pearson,
        "labeled_confusion" => Heuristic::LabeledConfusion,
        "emd" => Heuristic::Emd,
        "random" => Heuristic::Random,
        _ => {
            if let Some(k) = arg("topk") {
                Heuristic::TopK { k }
            } else if let Some(n) = arg("agglomerative") {
                Heuristic::Agglomerative { n_clusters: n }
            } else {
                Heuristic::PcaCorr { n_components: arg("pca_corr")? }
            }
        }
    })
}

/// Class indices of the `k` largest entries of `row`, ties toward lower index.
pub fn top_k_classes(row: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// `r_ij` = number of images whose top-`k` classes contain both `i` and `j`.
pub fn topk_confusion(pred: &PredictionMatrix, k: usize) -> Result<ConfusionReport, HeuristicError> {
    let n = pred.n_classes();
    if k < 2 || k > n {
        return Err(HeuristicError::InvalidParameter(format!("k={k} must lie in [2, {n}]")));
    }
    let mut counts = vec![0.0; n * n];
    for r in 0..pred.n_rows() {
        let top = top_k_classes(pred.row(r), k);
        for (a, &i) in top.iter().enumerate() {
            for &j in &top[a + 1..] {
                counts[i * n + j] += 1.0;
                counts[j * n + i] += 1.0;
            }
        }
    }
    Ok(ConfusionReport::from_fn(n, Heuristic::TopK { k }, |i, j| counts[i * n + j]))
}

fn centered_columns(pred: &PredictionMatrix) -> Vec<Vec<f64>> {
    (0..pred.n_classes())
        .map(|c| {
            let col = pred.column(c);
            let mean = col.iter().sum::<f64>() / col.len() as f64;
            col.into_iter().map(|v| v - mean).collect()
        })
        .collect()
}

fn correlation_matrix(
    columns: &[Vec<f64>],
    degenerate_below: f64,
    heuristic: Heuristic,
) -> Result<ConfusionReport, HeuristicError> {
    let norms: Vec<f64> = columns.iter().map(|c| c.iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
    if let Some(bad) = norms.iter().position(|&s| s <= degenerate_below) {
        return Err(HeuristicError::DegenerateColumn(bad));
    }
    Ok(ConfusionReport::from_fn(columns.len(), heuristic, |i, j| {
        let dot: f64 = columns[i].iter().zip(&columns[j]).map(|(a, b)| a * b).sum();
        (dot / (norms[i] * norms[j])).clamp(-1.0, 1.0)
    }))
}

/// `r_ij` = Pearson correlation between logit columns `i` and `j`.
pub fn pearson_confusion(pred: &PredictionMatrix) -> Result<ConfusionReport, HeuristicError> {
    if pred.n_rows() < 2 {
        return Err(HeuristicError::InvalidParameter("pearson needs at least two rows".into()));
    }
    correlation_matrix(&centered_columns(pred), 0.0, Heuristic::Pearson)
}

/// Average-linkage agglomerative clustering of logit columns under
/// correlation distance `1 - pearson`.
///
/// With `M = |Y| - 1` total merges, a pair first joined by merge number
/// `rank` (1-based) scores `(M - rank + 1) / M`, so the earliest merge
/// scores 1. Only the first `|Y| - n_clusters` merges are performed; pairs still
/// apart at the cut score 0. Distance ties merge the lowest-indexed pair.
pub fn agglomerative_confusion(
    pred: &PredictionMatrix,
    n_clusters: usize,
) -> Result<ConfusionReport, HeuristicError> {
    let n = pred.n_classes();
    if n_clusters < 1 || n_clusters > n {
        return Err(HeuristicError::InvalidParameter(format!("n_clusters={n_clusters} must lie in [1, {n}]")));
    }
    let heuristic = Heuristic::Agglomerative { n_clusters };
    if n == 1 {
        return Ok(ConfusionReport::from_fn(1, heuristic, |_, _| 0.0));
    }
    let corr = pearson_confusion(pred)?;
    let mut dist = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            if i != j {
                dist[i * n + j] = 1.0 - corr.get(i, j);
            }
        }
    }
    // cluster slot -> member classes; slots are retired when merged away
    let mut members: Vec<Vec<usize>> = (0..n).map(|i| vec![i]).collect();
    let mut active: Vec<bool> = vec![true; n];
    let total_merges = (n - 1) as f64;
    let mut score = vec![0.0; n * n];
    for rank in 1..=(n - n_clusters) {
        let mut best: Option<(usize, usize, f64)> = None;
        for a in 0..n {
            if !active[a] {
                continue;
            }
            for b in (a + 1)..n {
                if !active[b] {
                    continue;
                }
                let d = dist[a * n + b];
                if best.is_none_or(|(_, _, bd)| d < bd) {
                    best = Some((a, b, d));
                }
            }
        }
        let (a, b, _) = best.expect("at least two active clusters before the cut");
        let value = (total_merges - rank as f64 + 1.0) / total_merges;
        for &i in &members[a] {
            for &j in &members[b] {
                score[i * n + j] = value;
                score[j * n + i] = value;
            }
        }
        let (sa, sb) = (members[a].len() as f64, members[b].len() as f64);
        for k in 0..n {
            if active[k] && k != a && k != b {
                let d = (sa * dist[a * n + k] + sb * dist[b * n + k]) / (sa + sb);
                dist[a * n + k] = d;
                dist[k * n + a] = d;
            }
        }
        let moved = std::mem::take(&mut members[b]);
        members[a].extend(moved);
        active[b] = false;
    }
    Ok(ConfusionReport::from_fn(n, heuristic, |i, j| score[i * n + j]))
}

/// `r_ij` = images of class `i` predicted `j` plus images of `j` predicted `i`.
pub fn labeled_confusion(pred: &PredictionMatrix, labels: &[usize]) -> Result<ConfusionReport, HeuristicError> {
    if labels.len() != pred.n_rows() {
        return Err(HeuristicError::InvalidParameter(format!(
            "{} labels for {} rows",
            labels.len(),
            pred.n_rows()
        )));
    }
    let n = pred.n_classes();
    let mut counts = vec![0.0; n * n];
    for (&truth, &guess) in labels.iter().zip(pred.argmax()) {
        if truth != guess {
            counts[truth * n + guess] += 1.0;
        }
    }
    Ok(ConfusionReport::from_fn(n, Heuristic::LabeledConfusion, |i, j| {
        counts[i * n + j] + counts[j * n + i]
    }))
}

/// 1-Wasserstein distance between two equal-size empirical distributions.
pub fn wasserstein1(u: &[f64], v: &[f64]) -> f64 {
    assert_eq!(u.len(), v.len());
    let mut a = u.to_vec();
    let mut b = v.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64
}

/// `r_ij = 1 / (1 + W1(col_i, col_j))`.
pub fn emd_confusion(pred: &PredictionMatrix) -> Result<ConfusionReport, HeuristicError> {
    if pred.n_rows() < 2 {
        return Err(HeuristicError::InvalidParameter("emd needs at least two rows".into()));
    }
    let columns: Vec<Vec<f64>> = (0..pred.n_classes()).map(|c| pred.column(c)).collect();
    Ok(ConfusionReport::from_fn(pred.n_classes(), Heuristic::Emd, |i, j| {
        1.0 / (1.0 + wasserstein1(&columns[i], &columns[j]))
    }))
}

/// Projects the column-centered logits onto their top `n_components`
/// principal directions and correlates the projected columns.
pub fn pca_corr_confusion(
    pred: &PredictionMatrix,
    n_components: usize,
) -> Result<ConfusionReport, HeuristicError> {
    let (rows, n) = (pred.n_rows(), pred.n_classes());
    if n_components < 1 || n_components > rows.min(n) {
        return Err(HeuristicError::InvalidParameter(format!(
            "n_components={n_components} must lie in [1, {}]",
            rows.min(n)
        )));
    }
    let centered = centered_columns(pred);
    let x = DMatrix::from_fn(rows, n, |r, c| centered[c][r]);
    let eig = SymmetricEigen::new(x.transpose() * &x);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let basis = DMatrix::from_fn(n, n_components, |r, k| eig.eigenvectors[(r, order[k])]);
    let projected = &x * &basis * basis.transpose();
    let columns: Vec<Vec<f64>> = (0..n).map(|c| projected.column(c).iter().copied().collect()).collect();
    let scale = centered.iter().flatten().map(|v| v * v).sum::<f64>().sqrt();
    correlation_matrix(&columns, 1e-10 * scale, Heuristic::PcaCorr { n_components })
}

/// Symmetric uniform `[0, 1)` scores from a seeded generator.
pub fn random_confusion(n_classes: usize, seed: u64) -> ConfusionReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ConfusionReport::from_fn(n_classes, Heuristic::Random, |_, _| rng.random::<f64>())
}
