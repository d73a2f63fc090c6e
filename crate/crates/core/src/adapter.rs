//! The concept-bottleneck adapter: a |C| x |Y| linear map from concept scores
//! to class logits.
//!
//! Zero-shot weights give each class the mean of its own concepts' scores.
//! Trained weights minimize mean softmax cross-entropy plus an optional L1
//! penalty by plain mini-batch SGD.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::concept::{ConceptId, ConceptLibrary};
use crate::scoring::ScoreMatrix;

#[derive(Debug, Error)]
pub enum AdapterError {
    #[error("fit needs labels; none are available in the zero-shot regime")]
    NoLabels,
    #[error("training loss became non-finite at epoch {epoch} (learning rate too high?)")]
    DivergedLoss { epoch: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("malformed weights file: {0}")]
    Format(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdapterMode {
    ZeroShot,
    Trained,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdapterWeights {
    n_concepts: usize,
    n_classes: usize,
    /// Row-major: `data[c * n_classes + y]`.
    data: Vec<f64>,
    mode: AdapterMode,
    l1_lambda: f64,
    seed: u64,
}

impl AdapterWeights {
    pub fn zeros(n_concepts: usize, n_classes: usize) -> Self {
        Self {
            n_concepts,
            n_classes,
            data: vec![0.0; n_concepts * n_classes],
            mode: AdapterMode::Trained,
            l1_lambda: 0.0,
            seed: 0,
        }
    }

    pub fn from_matrix(n_concepts: usize, n_classes: usize, data: Vec<f64>) -> Result<Self, AdapterError> {
        if data.len() != n_concepts * n_classes {
            return Err(AdapterError::Shape(format!(
                "{} values for a {n_concepts}x{n_classes} matrix",
                data.len()
            )));
        }
        Ok(Self { data, ..Self::zeros(n_concepts, n_classes) })
    }

    pub fn n_concepts(&self) -> usize {
        self.n_concepts
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn get(&self, concept: usize, class: usize) -> f64 {
        self.data[concept * self.n_classes + class]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn mode(&self) -> AdapterMode {
        self.mode
    }

    pub fn l1_lambda(&self) -> f64 {
        self.l1_lambda
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn column_sum(&self, class: usize) -> f64 {
        (0..self.n_concepts).map(|c| self.get(c, class)).sum()
    }

    /// Carries rows over to a new concept ordering. Rows for concepts absent
    /// from `old_ids` start at zero.
    pub fn remap_rows(&self, old_ids: &[ConceptId], new_ids: &[ConceptId]) -> Result<Self, AdapterError> {
        if old_ids.len() != self.n_concepts {
            return Err(AdapterError::Shape(format!(
                "{} ids for {} weight rows",
                old_ids.len(),
                self.n_concepts
            )));
        }
        let index: HashMap<ConceptId, usize> = old_ids.iter().enumerate().map(|(i, id)| (*id, i)).collect();
        let y = self.n_classes;
        let mut data = vec![0.0; new_ids.len() * y];
        for (row, id) in new_ids.iter().enumerate() {
            if let Some(&old) = index.get(id) {
                data[row * y..(row + 1) * y].copy_from_slice(&self.data[old * y..(old + 1) * y]);
            }
        }
        Ok(Self { n_concepts: new_ids.len(), data, ..self.clone() })
    }

    /// Binary layout: `u32` header length, JSON header, then row-major f64
    /// little-endian values.
    pub fn to_bytes(&self, iteration: u32) -> Vec<u8> {
        let header = serde_json::json!({
            "iteration": iteration,
            "mode": self.mode,
            "shape": [self.n_concepts, self.n_classes],
            "seed": self.seed,
            "l1_lambda": self.l1_lambda,
            "dtype": "f64",
        });
        let header = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(4 + header.len() + 8 * self.data.len());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    /// Inverse of [`to_bytes`](Self::to_bytes); returns the weights and the
    /// iteration recorded in the header.
    pub fn from_bytes(bytes: &[u8]) -> Result<(Self, u32), AdapterError> {
        #[derive(Deserialize)]
        struct Header {
            iteration: u32,
            mode: AdapterMode,
            shape: (usize, usize),
            seed: u64,
            l1_lambda: f64,
            dtype: String,
        }
        let fmt = |m: &str| AdapterError::Format(m.to_string());
        let len = bytes.get(..4).ok_or_else(|| fmt("truncated"))?;
        let len = u32::from_le_bytes(len.try_into().unwrap()) as usize;
        let header = bytes.get(4..4 + len).ok_or_else(|| fmt("truncated header"))?;
        let header: Header = serde_json::from_slice(header).map_err(|e| AdapterError::Format(e.to_string()))?;
        if header.dtype != "f64" {
            return Err(AdapterError::Format(format!("unsupported dtype {}", header.dtype)));
        }
        let (rows, cols) = header.shape;
        let body = &bytes[4 + len..];
        if body.len() != rows * cols * 8 {
            return Err(fmt("body length does not match shape"));
        }
        let data = body.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect();
        Ok((
            Self {
                n_concepts: rows,
                n_classes: cols,
                data,
                mode: header.mode,
                l1_lambda: header.l1_lambda,
                seed: header.seed,
            },
            header.iteration,
        ))
    }
}

/// Block-diagonal weights: concept `c` of class `y` gets `1/|c_y|` in column
/// `y` and zero elsewhere.
pub fn zero_shot_weights(lib: &ConceptLibrary) -> AdapterWeights {
    let n_classes = lib.n_classes();
    let classes = lib.column_classes();
    let mut w = AdapterWeights::zeros(classes.len(), n_classes);
    w.mode = AdapterMode::ZeroShot;
    for (row, &class) in classes.iter().enumerate() {
        w.data[row * n_classes + class] = 1.0 / lib.class_concepts(class).len() as f64;
    }
    w
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch: usize,
    pub l1_lambda: f64,
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self { lr: 1e-2, epochs: 50, batch: 32, l1_lambda: 0.0, seed: 0 }
    }
}

fn softmax_in_place(logits: &mut [f64]) {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in logits.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in logits.iter_mut() {
        *v /= sum;
    }
}

/// Mean cross-entropy over `rows` plus `l1 * ||w||_1`, and its (sub)gradient.
///
/// `scores` is row-major with `w.n_concepts()` columns.
pub fn loss_and_gradient(
    w: &AdapterWeights,
    scores: &[f64],
    labels: &[usize],
    rows: &[usize],
    l1: f64,
) -> (f64, Vec<f64>) {
    let nc = w.n_concepts;
    let ny = w.n_classes;
    let mut grad = vec![0.0; nc * ny];
    let mut loss = 0.0;
    let mut probs = vec![0.0; ny];
    for &r in rows {
        let x = &scores[r * nc..(r + 1) * nc];
        probs.iter_mut().for_each(|p| *p = 0.0);
        for (c, &xc) in x.iter().enumerate() {
            let wrow = &w.data[c * ny..(c + 1) * ny];
            for (p, &wv) in probs.iter_mut().zip(wrow) {
                *p += xc * wv;
            }
        }
        let max = probs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + probs.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
        loss += lse - probs[labels[r]];
        softmax_in_place(&mut probs);
        probs[labels[r]] -= 1.0;
        for (c, &xc) in x.iter().enumerate() {
            if xc == 0.0 {
                continue;
            }
            let grow = &mut grad[c * ny..(c + 1) * ny];
            for (g, &d) in grow.iter_mut().zip(&probs) {
                *g += xc * d;
            }
        }
    }
    let n = rows.len().max(1) as f64;
    loss /= n;
    grad.iter_mut().for_each(|g| *g /= n);
    if l1 > 0.0 {
        loss += l1 * w.data.iter().map(|v| v.abs()).sum::<f64>();
        for (g, &v) in grad.iter_mut().zip(&w.data) {
            // subgradient 0 at 0
            *g += l1 * if v > 0.0 { 1.0 } else if v < 0.0 { -1.0 } else { 0.0 };
        }
    }
    (loss, grad)
}

/// Trains from `init` and returns the weights. See [`fit_traced`].
pub fn fit(
    init: &AdapterWeights,
    scores: &ScoreMatrix,
    labels: Option<&[usize]>,
    cfg: &FitConfig,
) -> Result<AdapterWeights, AdapterError> {
    fit_traced(init, scores, labels, cfg).map(|(w, _)| w)
}

/// Mini-batch SGD on mean softmax cross-entropy + L1. Rows are reshuffled
/// every epoch from a generator seeded with `cfg.seed`, so equal inputs give
/// bit-identical weights. Also returns the full-data loss after each epoch.
pub fn fit_traced(
    init: &AdapterWeights,
    scores: &ScoreMatrix,
    labels: Option<&[usize]>,
    cfg: &FitConfig,
) -> Result<(AdapterWeights, Vec<f64>), AdapterError> {
    let labels = labels.ok_or(AdapterError::NoLabels)?;
    if scores.n_cols() != init.n_concepts {
        return Err(AdapterError::Shape(format!(
            "{} score columns for {} weight rows",
            scores.n_cols(),
            init.n_concepts
        )));
    }
    if labels.len() != scores.n_rows() {
        return Err(AdapterError::Shape(format!("{} labels for {} rows", labels.len(), scores.n_rows())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= init.n_classes) {
        return Err(AdapterError::Shape(format!("label {bad} out of range")));
    }
    let mut w = init.clone();
    w.mode = AdapterMode::Trained;
    w.l1_lambda = cfg.l1_lambda;
    w.seed = cfg.seed;
    if cfg.epochs == 0 || labels.is_empty() {
        return Ok((if cfg.epochs == 0 { init.clone() } else { w }, Vec::new()));
    }

    let x = scores.to_f64();
    let all: Vec<usize> = (0..scores.n_rows()).collect();
    let mut order = all.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let batch = cfg.batch.max(1);
    let mut trace = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for rows in order.chunks(batch) {
            let (_, grad) = loss_and_gradient(&w, &x, labels, rows, cfg.l1_lambda);
            for (v, g) in w.data.iter_mut().zip(&grad) {
                *v -= cfg.lr * g;
            }
        }
        let (loss, _) = loss_and_gradient(&w, &x, labels, &all, cfg.l1_lambda);
        if !loss.is_finite() || w.data.iter().any(|v| !v.is_finite()) {
            return Err(AdapterError::DivergedLoss { epoch });
        }
        trace.push(loss);
    }
    Ok((w, trace))
}

/// Class logits and their argmax (ties go to the lowest class index).
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionMatrix {
    n_classes: usize,
    logits: Vec<f64>,
    argmax: Vec<usize>,
}

impl PredictionMatrix {
    pub fn from_logits(n_classes: usize, logits: Vec<f64>) -> Self {
        assert!(n_classes > 0 && logits.len().is_multiple_of(n_classes), "logits not a multiple of class count");
        let argmax = logits
            .chunks(n_classes)
            .map(|row| {
                let mut best = 0;
                for (j, &v) in row.iter().enumerate().skip(1) {
                    if v > row[best] {
                        best = j;
                    }
                }
                best
            })
            .collect();
        Self { n_classes, logits, argmax }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let n_classes = rows.first().map_or(0, Vec::len);
        Self::from_logits(n_classes, rows.iter().flatten().copied().collect())
    }

    pub fn n_rows(&self) -> usize {
        self.argmax.len()
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.logits[r * self.n_classes..(r + 1) * self.n_classes]
    }

    pub fn logit(&self, r: usize, class: usize) -> f64 {
        self.logits[r * self.n_classes + class]
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn argmax(&self) -> &[usize] {
        &self.argmax
    }

    /// Column `class` of the logit matrix.
    pub fn column(&self, class: usize) -> Vec<f64> {
        (0..self.n_rows()).map(|r| self.logit(r, class)).collect()
    }
}

/// `logits = scores * weights`, accumulated in f64.
pub fn evaluate(weights: &AdapterWeights, scores: &ScoreMatrix) -> Result<PredictionMatrix, AdapterError> {
    if scores.n_cols() != weights.n_concepts {
        return Err(AdapterError::Shape(format!(
            "{} score columns for {} weight rows",
            scores.n_cols(),
            weights.n_concepts
        )));
    }
    let ny = weights.n_classes;
    let mut logits = vec![0.0; scores.n_rows() * ny];
    for r in 0..scores.n_rows() {
        let out = &mut logits[r * ny..(r + 1) * ny];
        for (c, &x) in scores.row(r).iter().enumerate() {
            if x == 0.0 {
                continue;
            }
            let x = x as f64;
            for (o, &wv) in out.iter_mut().zip(&weights.data[c * ny..(c + 1) * ny]) {
                *o += x * wv;
            }
        }
    }
    Ok(PredictionMatrix::from_logits(ny, logits))
}

/// Fraction of rows whose argmax equals the label.
pub fn accuracy(pred: &PredictionMatrix, labels: &[usize]) -> f64 {
    assert_eq!(pred.n_rows(), labels.len(), "prediction and label counts differ");
    if labels.is_empty() {
        return 0.0;
    }
    let correct = pred.argmax().iter().zip(labels).filter(|(p, l)| p == l).count();
    correct as f64 / labels.len() as f64
}

/// Picks up to `per_class` rows of every class, seeded; returned in
/// ascending row order.
pub fn few_shot_subsample(labels: &[usize], n_classes: usize, per_class: usize, seed: u64) -> Vec<usize> {
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); n_classes];
    for (row, &label) in labels.iter().enumerate() {
        by_class[label].push(row);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out: Vec<usize> = by_class
        .into_iter()
        .flat_map(|mut rows| {
            rows.shuffle(&mut rng);
            rows.truncate(per_class);
            rows
        })
        .collect();
    out.sort_unstable();
    out
}
