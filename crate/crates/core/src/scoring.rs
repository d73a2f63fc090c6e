//! Concept-image score matrices.
//!
//! A [`ScorerBackend`] turns (image, concept) pairs into scalar scores. The
//! [`score`] entry point consults a [`ScoreCache`] first so that, across
//! iterations, only columns for newly added concepts reach the backend.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Duration;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::concept::{ConceptId, ConceptLibrary, DatasetManifest, ManifestItem};
use crate::llm::ServiceError;
use crate::util::digest64;

pub const DEFAULT_SCORE_TEMPLATE: &str = "a photo of a {class}. {concept}";

const CACHE_MAGIC: &[u8; 8] = b"CBMSCORE";
const CACHE_VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;
const COLUMN_CHUNK: usize = 64;

#[derive(Debug, Error)]
pub enum ScoreError {
    #[error(transparent)]
    Service(#[from] ServiceError),
    #[error("score cache corrupt: {0}")]
    CacheCorrupt(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("old score columns are not a subset of the new library (concept {0})")]
    IncompatibleVersions(ConceptId),
    #[error("template is missing the {0} placeholder")]
    MissingPlaceholder(&'static str),
    #[error("non-finite score for image {image:?}, concept {concept}")]
    NonFinite { image: String, concept: ConceptId },
    #[error("no precomputed column for concept {0}")]
    MissingColumn(ConceptId),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// N x |C| matrix of scores; rows follow the manifest, columns follow the
/// library's class-major flattening.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix {
    values: Vec<f32>,
    row_ids: Vec<String>,
    col_ids: Vec<ConceptId>,
}

impl ScoreMatrix {
    /// Builds a matrix from row-major values, rejecting non-finite entries.
    pub fn new(
        values: Vec<f32>,
        row_ids: Vec<String>,
        col_ids: Vec<ConceptId>,
    ) -> Result<Self, ScoreError> {
        if values.len() != row_ids.len() * col_ids.len() {
            return Err(ScoreError::Shape(format!(
                "{} values for a {}x{} matrix",
                values.len(),
                row_ids.len(),
                col_ids.len()
            )));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            let ncols = col_ids.len();
            return Err(ScoreError::NonFinite {
                image: row_ids[pos / ncols].clone(),
                concept: col_ids[pos % ncols],
            });
        }
        Ok(Self { values, row_ids, col_ids })
    }

    /// Convenience constructor for tests and synthetic inputs.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, ScoreError> {
        let ncols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != ncols) {
            return Err(ScoreError::Shape("ragged rows".into()));
        }
        let values = rows.iter().flatten().map(|&v| v as f32).collect();
        let row_ids = (0..rows.len()).map(|i| format!("row{i}")).collect();
        let col_ids = (0..ncols as u64).map(ConceptId).collect();
        Self::new(values, row_ids, col_ids)
    }

    pub fn n_rows(&self) -> usize {
        self.row_ids.len()
    }

    pub fn n_cols(&self) -> usize {
        self.col_ids.len()
    }

    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.values[row * self.n_cols() + col]
    }

    pub fn row(&self, row: usize) -> &[f32] {
        let n = self.n_cols();
        &self.values[row * n..(row + 1) * n]
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn row_ids(&self) -> &[String] {
        &self.row_ids
    }

    pub fn col_ids(&self) -> &[ConceptId] {
        &self.col_ids
    }

    /// Row-major copy widened to f64 for adapter arithmetic.
    pub fn to_f64(&self) -> Vec<f64> {
        self.values.iter().map(|&v| v as f64).collect()
    }

    /// Keeps the given rows, in the given order.
    pub fn select_rows(&self, rows: &[usize]) -> Self {
        let mut values = Vec::with_capacity(rows.len() * self.n_cols());
        for &r in rows {
            values.extend_from_slice(self.row(r));
        }
        Self {
            values,
            row_ids: rows.iter().map(|&r| self.row_ids[r].clone()).collect(),
            col_ids: self.col_ids.clone(),
        }
    }

    /// Returns `c * self`; used for scale-invariance checks.
    pub fn scaled(&self, c: f32) -> Self {
        Self {
            values: self.values.iter().map(|v| v * c).collect(),
            row_ids: self.row_ids.clone(),
            col_ids: self.col_ids.clone(),
        }
    }
}

/// One column to be scored: the concept plus its rendered text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ColumnQuery {
    pub id: ConceptId,
    pub class_label: String,
    pub concept_text: String,
    /// `template` with `{class}` and `{concept}` substituted.
    pub prompt_text: String,
}

pub trait ScorerBackend: Send + Sync {
    /// Backbone identifier; cache files are keyed on it.
    fn backbone_id(&self) -> String;

    /// Scores every image against every query. Returns one column per query,
    /// each of length `images.len()`.
    fn score_columns(
        &self,
        images: &[ManifestItem],
        queries: &[ColumnQuery],
    ) -> Result<Vec<Vec<f32>>, ScoreError>;
}

pub fn render_template(template: &str, class_label: &str, concept: &str) -> String {
    template.replace("{class}", class_label).replace("{concept}", concept)
}

fn check_template(template: &str) -> Result<(), ScoreError> {
    if !template.contains("{class}") {
        return Err(ScoreError::MissingPlaceholder("{class}"));
    }
    if !template.contains("{concept}") {
        return Err(ScoreError::MissingPlaceholder("{concept}"));
    }
    Ok(())
}

fn queries_for(lib: &ConceptLibrary, template: &str) -> Vec<ColumnQuery> {
    lib.flatten()
        .map(|(class, concept)| {
            let label = lib.labels().name(class);
            ColumnQuery {
                id: ConceptId::of(label, concept.text()),
                class_label: label.to_string(),
                concept_text: concept.text().to_string(),
                prompt_text: render_template(template, label, concept.text()),
            }
        })
        .collect()
}

/// Concept ids present in `lib_new` but not among `old`'s columns, in
/// library order.
pub fn incremental_columns(
    old: &ScoreMatrix,
    lib_new: &ConceptLibrary,
) -> Result<Vec<ConceptId>, ScoreError> {
    let new_ids = lib_new.concept_ids();
    let new_set: HashSet<ConceptId> = new_ids.iter().copied().collect();
    if let Some(missing) = old.col_ids.iter().find(|id| !new_set.contains(id)) {
        return Err(ScoreError::IncompatibleVersions(*missing));
    }
    let old_set: HashSet<ConceptId> = old.col_ids.iter().copied().collect();
    Ok(new_ids.into_iter().filter(|id| !old_set.contains(id)).collect())
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ScoreStats {
    /// Entries served from the cache.
    pub cache_hits: usize,
    /// Columns sent to the backend.
    pub columns_scored: usize,
    /// Backend invocations.
    pub backend_calls: usize,
}

/// Scores `lib` against every image of `manifest`, reusing cached columns.
///
/// New columns are requested in chunks over at most `max_inflight` workers;
/// they are inserted into the cache only after every chunk has succeeded.
pub fn score(
    backend: &dyn ScorerBackend,
    manifest: &DatasetManifest,
    lib: &ConceptLibrary,
    template: &str,
    cache: &mut ScoreCache,
    max_inflight: usize,
) -> Result<(ScoreMatrix, ScoreStats), ScoreError> {
    check_template(template)?;
    let row_ids: Vec<String> = manifest.items().iter().map(|i| i.image_id.clone()).collect();
    cache.bind(&row_ids, template)?;

    let queries = queries_for(lib, template);
    let missing: Vec<ColumnQuery> =
        queries.iter().filter(|q| !cache.contains(q.id)).cloned().collect();
    let mut stats = ScoreStats {
        cache_hits: (queries.len() - missing.len()) * row_ids.len(),
        ..Default::default()
    };

    if !missing.is_empty() {
        let chunks: Vec<&[ColumnQuery]> = missing.chunks(COLUMN_CHUNK).collect();
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(max_inflight.max(1))
            .build()
            .map_err(|e| ScoreError::Io(io::Error::other(e.to_string())))?;
        let results: Vec<Vec<Vec<f32>>> = pool.install(|| {
            chunks
                .par_iter()
                .map(|chunk| backend.score_columns(manifest.items(), chunk))
                .collect::<Result<_, _>>()
        })?;
        stats.backend_calls = chunks.len();
        for (chunk, columns) in chunks.iter().zip(results) {
            if columns.len() != chunk.len() {
                return Err(ScoreError::Shape(format!(
                    "backend returned {} columns for {} queries",
                    columns.len(),
                    chunk.len()
                )));
            }
            for (query, column) in chunk.iter().zip(columns) {
                if column.len() != row_ids.len() {
                    return Err(ScoreError::Shape(format!(
                        "backend returned {} scores for {} images",
                        column.len(),
                        row_ids.len()
                    )));
                }
                if let Some(pos) = column.iter().position(|v| !v.is_finite()) {
                    return Err(ScoreError::NonFinite { image: row_ids[pos].clone(), concept: query.id });
                }
                cache.insert(query, column);
                stats.columns_scored += 1;
            }
        }
    }

    let n = row_ids.len();
    let m = queries.len();
    let mut values = vec![0f32; n * m];
    for (c, q) in queries.iter().enumerate() {
        let column = cache.column(q.id).expect("column cached above");
        for (r, &v) in column.iter().enumerate() {
            values[r * m + c] = v;
        }
    }
    let col_ids = queries.iter().map(|q| q.id).collect();
    Ok((ScoreMatrix::new(values, row_ids, col_ids)?, stats))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CacheColumnMeta {
    id: ConceptId,
    class: String,
    text: String,
}

/// Column store for one (backbone, dataset) pair.
///
/// On disk: a binary file with a fixed header followed by one block per
/// column (`id: u64`, `checksum: u64`, `N` little-endian f32 values), plus a
/// JSON sidecar index with row ids, template and column metadata.
#[derive(Debug, Clone, Default)]
pub struct ScoreCache {
    backbone: String,
    dataset: String,
    template: Option<String>,
    row_ids: Option<Vec<String>>,
    order: Vec<CacheColumnMeta>,
    columns: HashMap<ConceptId, Vec<f32>>,
}

impl ScoreCache {
    pub fn new(backbone: impl Into<String>, dataset: impl Into<String>) -> Self {
        Self { backbone: backbone.into(), dataset: dataset.into(), ..Default::default() }
    }

    fn bind(&mut self, row_ids: &[String], template: &str) -> Result<(), ScoreError> {
        match (&self.row_ids, &self.template) {
            (None, _) => {
                self.row_ids = Some(row_ids.to_vec());
                self.template = Some(template.to_string());
                Ok(())
            }
            (Some(rows), Some(t)) if rows == row_ids && t == template => Ok(()),
            (Some(rows), _) if rows != row_ids => {
                Err(ScoreError::CacheCorrupt("cached rows do not match the manifest".into()))
            }
            _ => Err(ScoreError::CacheCorrupt("cache was built with a different template".into())),
        }
    }

    pub fn contains(&self, id: ConceptId) -> bool {
        self.columns.contains_key(&id)
    }

    pub fn column(&self, id: ConceptId) -> Option<&[f32]> {
        self.columns.get(&id).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.columns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.columns.is_empty()
    }

    fn insert(&mut self, query: &ColumnQuery, column: Vec<f32>) {
        if self.columns.insert(query.id, column).is_none() {
            self.order.push(CacheColumnMeta {
                id: query.id,
                class: query.class_label.clone(),
                text: query.concept_text.clone(),
            });
        }
    }

    pub fn index_path(path: &Path) -> PathBuf {
        let mut p = path.as_os_str().to_owned();
        p.push(".index.json");
        PathBuf::from(p)
    }

    /// Writes the binary file and its sidecar. Both are written to temporary
    /// names and renamed into place.
    pub fn save(&self, path: &Path) -> Result<(), ScoreError> {
        let n_rows = self.row_ids.as_ref().map_or(0, Vec::len);
        let mut buf = Vec::with_capacity(32 + self.order.len() * (16 + 4 * n_rows));
        buf.extend_from_slice(CACHE_MAGIC);
        buf.extend_from_slice(&CACHE_VERSION.to_le_bytes());
        buf.extend_from_slice(&(n_rows as u64).to_le_bytes());
        buf.push(DTYPE_F32);
        buf.extend_from_slice(&(self.order.len() as u64).to_le_bytes());
        for meta in &self.order {
            let column = &self.columns[&meta.id];
            let bytes: Vec<u8> = column.iter().flat_map(|v| v.to_le_bytes()).collect();
            buf.extend_from_slice(&meta.id.0.to_le_bytes());
            buf.extend_from_slice(&digest64(&[&bytes]).to_le_bytes());
            buf.extend_from_slice(&bytes);
        }
        let index = json!({
            "backbone": self.backbone,
            "dataset": self.dataset,
            "version": CACHE_VERSION,
            "dtype": "f32",
            "n_rows": n_rows,
            "template": self.template,
            "row_ids": self.row_ids,
            "columns": self.order,
        });
        write_atomic(path, &buf)?;
        let index = serde_json::to_string_pretty(&index).map_err(io::Error::other)?;
        write_atomic(&Self::index_path(path), index.as_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ScoreError> {
        let index_text = fs::read_to_string(Self::index_path(path))?;
        let index: Value = serde_json::from_str(&index_text)
            .map_err(|e| ScoreError::CacheCorrupt(format!("index: {e}")))?;
        let corrupt = |msg: &str| ScoreError::CacheCorrupt(msg.to_string());
        let row_ids: Option<Vec<String>> = serde_json::from_value(index["row_ids"].clone())
            .map_err(|e| ScoreError::CacheCorrupt(format!("index row_ids: {e}")))?;
        let order: Vec<CacheColumnMeta> = serde_json::from_value(index["columns"].clone())
            .map_err(|e| ScoreError::CacheCorrupt(format!("index columns: {e}")))?;
        let template = index["template"].as_str().map(str::to_string);

        let mut file = fs::File::open(path)?;
        let mut data = Vec::new();
        file.read_to_end(&mut data)?;
        let mut cursor = ByteCursor { data: &data, pos: 0 };
        if cursor.take(8).ok_or_else(|| corrupt("truncated header"))? != CACHE_MAGIC {
            return Err(corrupt("bad magic"));
        }
        let version = cursor.u32().ok_or_else(|| corrupt("truncated header"))?;
        if version != CACHE_VERSION {
            return Err(ScoreError::CacheCorrupt(format!("unsupported version {version}")));
        }
        let n_rows = cursor.u64().ok_or_else(|| corrupt("truncated header"))? as usize;
        if cursor.take(1).ok_or_else(|| corrupt("truncated header"))? != [DTYPE_F32] {
            return Err(corrupt("unsupported dtype"));
        }
        let n_cols = cursor.u64().ok_or_else(|| corrupt("truncated header"))? as usize;
        if n_rows != row_ids.as_ref().map_or(0, Vec::len) || n_cols != order.len() {
            return Err(corrupt("binary header disagrees with index"));
        }
        let mut columns = HashMap::with_capacity(n_cols);
        for meta in &order {
            let id = cursor.u64().ok_or_else(|| corrupt("truncated column header"))?;
            let checksum = cursor.u64().ok_or_else(|| corrupt("truncated column header"))?;
            let bytes = cursor.take(4 * n_rows).ok_or_else(|| corrupt("truncated column"))?;
            if id != meta.id.0 {
                return Err(ScoreError::CacheCorrupt(format!("column {} out of order", meta.id)));
            }
            if digest64(&[bytes]) != checksum {
                return Err(ScoreError::CacheCorrupt(format!("checksum mismatch in column {}", meta.id)));
            }
            let column = bytes
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().expect("4-byte chunk")))
                .collect();
            columns.insert(meta.id, column);
        }
        Ok(Self {
            backbone: index["backbone"].as_str().unwrap_or_default().to_string(),
            dataset: index["dataset"].as_str().unwrap_or_default().to_string(),
            template,
            row_ids,
            order,
            columns,
        })
    }
}

struct ByteCursor<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> ByteCursor<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let out = self.data.get(self.pos..end)?;
        self.pos = end;
        Some(out)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn u64(&mut self) -> Option<u64> {
        self.take(8).map(|b| u64::from_le_bytes(b.try_into().unwrap()))
    }
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(tmp, path)
}

/// Serves columns from a precomputed cache file; never computes new scores.
pub struct CacheFileBackend {
    cache: ScoreCache,
}

impl CacheFileBackend {
    pub fn open(path: &Path) -> Result<Self, ScoreError> {
        Ok(Self { cache: ScoreCache::load(path)? })
    }

    pub fn from_cache(cache: ScoreCache) -> Self {
        Self { cache }
    }
}

impl ScorerBackend for CacheFileBackend {
    fn backbone_id(&self) -> String {
        self.cache.backbone.clone()
    }

    fn score_columns(
        &self,
        images: &[ManifestItem],
        queries: &[ColumnQuery],
    ) -> Result<Vec<Vec<f32>>, ScoreError> {
        let rows = self.cache.row_ids.as_deref().unwrap_or_default();
        let positions: HashMap<&str, usize> =
            rows.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
        let picks: Vec<usize> = images
            .iter()
            .map(|item| {
                positions.get(item.image_id.as_str()).copied().ok_or_else(|| {
                    ScoreError::Shape(format!("image {:?} not in precomputed cache", item.image_id))
                })
            })
            .collect::<Result<_, _>>()?;
        queries
            .iter()
            .map(|q| {
                let column = self.cache.column(q.id).ok_or(ScoreError::MissingColumn(q.id))?;
                Ok(picks.iter().map(|&p| column[p]).collect())
            })
            .collect()
    }
}

/// Cosine similarity computed in f64.
pub fn cosine(u: &[f32], v: &[f32]) -> f64 {
    let mut dot = 0f64;
    let mut nu = 0f64;
    let mut nv = 0f64;
    for (&a, &b) in u.iter().zip(v) {
        let (a, b) = (a as f64, b as f64);
        dot += a * b;
        nu += a * a;
        nv += b * b;
    }
    if nu == 0.0 || nv == 0.0 {
        return 0.0;
    }
    dot / (nu.sqrt() * nv.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingClientConfig {
    /// Base URL without the `/v1/...` suffix.
    pub base_url: String,
    pub model: String,
    #[serde(default = "default_batch_limit")]
    pub batch_limit: usize,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
}

fn default_batch_limit() -> usize {
    256
}
fn default_timeout_secs() -> u64 {
    120
}

#[derive(Deserialize)]
struct EmbeddingResponse {
    data: Vec<EmbeddingDatum>,
}

#[derive(Deserialize)]
struct EmbeddingDatum {
    embedding: Vec<f32>,
}

/// Scores by cosine similarity between image and text embeddings fetched
/// from `POST /v1/embeddings`. Image embeddings are requested once per image
/// id and kept for the lifetime of the backend.
pub struct EmbeddingBackend {
    config: EmbeddingClientConfig,
    http: reqwest::blocking::Client,
    image_cache: Mutex<HashMap<String, Vec<f32>>>,
}

impl EmbeddingBackend {
    pub fn new(config: EmbeddingClientConfig) -> Result<Self, ScoreError> {
        let http = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build()
            .map_err(|e| ServiceError::Transport(e.to_string()))?;
        Ok(Self { config, http, image_cache: Mutex::new(HashMap::new()) })
    }

    fn embed(&self, inputs: Vec<Value>) -> Result<Vec<Vec<f32>>, ScoreError> {
        let mut out = Vec::with_capacity(inputs.len());
        for batch in inputs.chunks(self.config.batch_limit.max(1)) {
            let url = format!("{}/v1/embeddings", self.config.base_url.trim_end_matches('/'));
            let body = json!({ "model": self.config.model, "input": batch });
            let response = self
                .http
                .post(url)
                .json(&body)
                .send()
                .map_err(|e| ServiceError::Transport(e.to_string()))?;
            let status = response.status();
            let text = response.text().map_err(|e| ServiceError::Transport(e.to_string()))?;
            if !status.is_success() {
                return Err(ServiceError::Http { status: status.as_u16(), body: text }.into());
            }
            let parsed: EmbeddingResponse =
                serde_json::from_str(&text).map_err(|e| ServiceError::Decode(e.to_string()))?;
            if parsed.data.len() != batch.len() {
                return Err(ScoreError::Shape(format!(
                    "embedding service returned {} vectors for {} inputs",
                    parsed.data.len(),
                    batch.len()
                )));
            }
            out.extend(parsed.data.into_iter().map(|d| d.embedding));
        }
        Ok(out)
    }

    fn image_embeddings(&self, images: &[ManifestItem]) -> Result<Vec<Vec<f32>>, ScoreError> {
        let missing: Vec<&ManifestItem> = {
            let cache = self.image_cache.lock().expect("image cache lock");
            images.iter().filter(|i| !cache.contains_key(&i.image_id)).collect()
        };
        if !missing.is_empty() {
            let inputs = missing.iter().map(|i| json!({ "image_id": i.image_id })).collect();
            let vectors = self.embed(inputs)?;
            let mut cache = self.image_cache.lock().expect("image cache lock");
            for (item, v) in missing.iter().zip(vectors) {
                cache.insert(item.image_id.clone(), v);
            }
        }
        let cache = self.image_cache.lock().expect("image cache lock");
        Ok(images.iter().map(|i| cache[&i.image_id].clone()).collect())
    }
}

impl ScorerBackend for EmbeddingBackend {
    fn backbone_id(&self) -> String {
        self.config.model.clone()
    }

    fn score_columns(
        &self,
        images: &[ManifestItem],
        queries: &[ColumnQuery],
    ) -> Result<Vec<Vec<f32>>, ScoreError> {
        let image_vecs = self.image_embeddings(images)?;
        let texts = queries.iter().map(|q| Value::String(q.prompt_text.clone())).collect();
        let text_vecs = self.embed(texts)?;
        Ok(text_vecs
            .iter()
            .map(|t| image_vecs.iter().map(|img| cosine(img, t) as f32).collect())
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::concept::{Concept, LabelSet};
    use std::sync::atomic::{AtomicUsize, Ordering};

    struct CountingBackend {
        calls: AtomicUsize,
    }

    impl ScorerBackend for CountingBackend {
        fn backbone_id(&self) -> String {
            "counting".into()
        }

        fn score_columns(
            &self,
            images: &[ManifestItem],
            queries: &[ColumnQuery],
        ) -> Result<Vec<Vec<f32>>, ScoreError> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            Ok(queries
                .iter()
                .map(|q| {
                    images
                        .iter()
                        .map(|i| (digest64(&[i.image_id.as_bytes(), q.prompt_text.as_bytes()]) % 1000) as f32 / 1000.0)
                        .collect()
                })
                .collect())
        }
    }

    struct ShortBackend;

    impl ScorerBackend for ShortBackend {
        fn backbone_id(&self) -> String {
            "short".into()
        }

        fn score_columns(&self, _: &[ManifestItem], queries: &[ColumnQuery]) -> Result<Vec<Vec<f32>>, ScoreError> {
            Ok(queries.iter().map(|_| vec![0.5]).collect())
        }
    }

    fn fixture() -> (LabelSet, DatasetManifest, ConceptLibrary) {
        let labels = LabelSet::new(["a", "b", "c", "d"]).unwrap();
        let items = (0..5)
            .map(|i| ManifestItem { image_id: format!("img{i}"), image_ref: format!("{i}.jpg"), label: Some(i % 4) })
            .collect();
        let manifest = DatasetManifest::new(items, &labels).unwrap();
        let per_class = (0..4)
            .map(|c| vec![Concept::initial(&format!("concept {c}-0")).unwrap(), Concept::initial(&format!("concept {c}-1")).unwrap()])
            .collect();
        let lib = ConceptLibrary::new(labels.clone(), per_class, 0).unwrap();
        (labels, manifest, lib)
    }

    #[test]
    fn full_cache_makes_no_backend_calls() {
        let (_, manifest, lib) = fixture();
        let backend = CountingBackend { calls: AtomicUsize::new(0) };
        let mut cache = ScoreCache::new("counting", "toy");
        let (first, s1) = score(&backend, &manifest, &lib, DEFAULT_SCORE_TEMPLATE, &mut cache, 4).unwrap();
        assert_eq!(s1.columns_scored, 8);
        let calls = backend.calls.load(Ordering::SeqCst);
        let (second, s2) = score(&backend, &manifest, &lib, DEFAULT_SCORE_TEMPLATE, &mut cache, 4).unwrap();
        assert_eq!(backend.calls.load(Ordering::SeqCst), calls);
        assert_eq!(s2.backend_calls, 0);
        assert_eq!(s2.cache_hits, 5 * 8);
        assert_eq!(first, second);
    }

    #[test]
    fn only_new_columns_hit_the_backend() {
        let (_, manifest, lib) = fixture();
        let backend = CountingBackend { calls: AtomicUsize::new(0) };
        let mut cache = ScoreCache::new("counting", "toy");
        let (old, _) = score(&backend, &manifest, &lib, DEFAULT_SCORE_TEMPLATE, &mut cache, 4).unwrap();
        let grown = lib.merge_concepts(2, &[Concept::initial("new one").unwrap()]);
        let (new, stats) = score(&backend, &manifest, &grown, DEFAULT_SCORE_TEMPLATE, &mut cache, 4).unwrap();
        assert_eq!(stats.columns_scored, 1);
        assert_eq!(stats.cache_hits, 5 * 8);
        // old columns carried over bit-identically
        for (c, id) in old.col_ids().iter().enumerate() {
            let nc = new.col_ids().iter().position(|x| x == id).unwrap();
            for r in 0..old.n_rows() {
                assert_eq!(old.get(r, c).to_bits(), new.get(r, nc).to_bits());
            }
        }
    }

    #[test]
    fn incremental_columns_rules() {
        let (_, manifest, lib) = fixture();
        let backend = CountingBackend { calls: AtomicUsize::new(0) };
        let mut cache = ScoreCache::new("counting", "toy");
        let (old, _) = score(&backend, &manifest, &lib, DEFAULT_SCORE_TEMPLATE, &mut cache, 1).unwrap();
        assert!(incremental_columns(&old, &lib).unwrap().is_empty());

        let one = lib.merge_concepts(3, &[Concept::initial("x").unwrap()]);
        assert_eq!(incremental_columns(&old, &one).unwrap(), vec![ConceptId::of("d", "x")]);

        let two = lib
            .merge_concepts(2, &[Concept::initial("p").unwrap(), Concept::initial("q").unwrap()])
            .merge_concepts(0, &[Concept::initial("r").unwrap(), Concept::initial("s").unwrap()]);
        let expected: Vec<ConceptId> = vec![
            ConceptId::of("a", "r"),
            ConceptId::of("a", "s"),
            ConceptId::of("c", "p"),
            ConceptId::of("c", "q"),
        ];
        assert_eq!(incremental_columns(&old, &two).unwrap(), expected);

        let labels = LabelSet::new(["a", "b", "c", "d"]).unwrap();
        let other = ConceptLibrary::new(
            labels,
            (0..4).map(|c| vec![Concept::initial(&format!("other {c}")).unwrap()]).collect(),
            0,
        )
        .unwrap();
        assert!(matches!(incremental_columns(&old, &other), Err(ScoreError::IncompatibleVersions(_))));
    }

    #[test]
    fn wrong_length_column_is_a_shape_error() {
        let (_, manifest, lib) = fixture();
        let mut cache = ScoreCache::new("short", "toy");
        let err = score(&ShortBackend, &manifest, &lib, DEFAULT_SCORE_TEMPLATE, &mut cache, 1).unwrap_err();
        assert!(matches!(err, ScoreError::Shape(_)));
        assert!(cache.is_empty(), "failed columns must not reach the cache");
    }

    #[test]
    fn template_placeholders_required() {
        let (_, manifest, lib) = fixture();
        let backend = CountingBackend { calls: AtomicUsize::new(0) };
        let mut cache = ScoreCache::new("counting", "toy");
        assert!(matches!(
            score(&backend, &manifest, &lib, "{concept}", &mut cache, 1),
            Err(ScoreError::MissingPlaceholder("{class}"))
        ));
        assert!(matches!(
            score(&backend, &manifest, &lib, "{class}", &mut cache, 1),
            Err(ScoreError::MissingPlaceholder("{concept}"))
        ));
    }

    #[test]
    fn cache_round_trip_and_corruption() {
        let (_, manifest, lib) = fixture();
        let backend = CountingBackend { calls: AtomicUsize::new(0) };
        let mut cache = ScoreCache::new("counting", "toy");
        let (m, _) = score(&backend, &manifest, &lib, DEFAULT_SCORE_TEMPLATE, &mut cache, 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scores.bin");
        cache.save(&path).unwrap();

        let mut loaded = ScoreCache::load(&path).unwrap();
        let before = backend.calls.load(Ordering::SeqCst);
        let (m2, stats) = score(&backend, &manifest, &lib, DEFAULT_SCORE_TEMPLATE, &mut loaded, 2).unwrap();
        assert_eq!(backend.calls.load(Ordering::SeqCst), before);
        assert_eq!(stats.columns_scored, 0);
        assert_eq!(m, m2);

        // precomputed backend serves the same values
        let pre = CacheFileBackend::open(&path).unwrap();
        let mut fresh = ScoreCache::new("counting", "toy");
        let (m3, _) = score(&pre, &manifest, &lib, DEFAULT_SCORE_TEMPLATE, &mut fresh, 2).unwrap();
        assert_eq!(m, m3);

        let mut bytes = fs::read(&path).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 0xff;
        fs::write(&path, bytes).unwrap();
        assert!(matches!(ScoreCache::load(&path), Err(ScoreError::CacheCorrupt(_))));
    }

    #[test]
    fn cache_rejects_different_template() {
        let (_, manifest, lib) = fixture();
        let backend = CountingBackend { calls: AtomicUsize::new(0) };
        let mut cache = ScoreCache::new("counting", "toy");
        score(&backend, &manifest, &lib, DEFAULT_SCORE_TEMPLATE, &mut cache, 1).unwrap();
        let err = score(&backend, &manifest, &lib, "{class}: {concept}", &mut cache, 1).unwrap_err();
        assert!(matches!(err, ScoreError::CacheCorrupt(_)));
    }

    #[test]
    fn cosine_identical_and_symmetric() {
        let u = [0.6f32, 0.8, 0.0];
        assert!((cosine(&u, &u) - 1.0).abs() < 1e-12);
        let v = [0.1f32, -0.3, 0.9];
        assert!((cosine(&u, &v) - cosine(&v, &u)).abs() < 1e-12);
    }

    #[test]
    fn matrix_rejects_non_finite() {
        assert!(ScoreMatrix::from_rows(&[vec![1.0, f64::NAN]]).is_err());
        assert!(ScoreMatrix::from_rows(&[vec![1.0], vec![1.0, 2.0]]).is_err());
    }
}
