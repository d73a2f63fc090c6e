//! The outer loop: fit, evaluate, measure confusion, sample pairs, evolve
//! concepts, merge, re-score. Also run configuration, per-iteration
//! checkpoints and resume.
//!
//! Every random choice of iteration `t` draws from a generator seeded with
//! `(config.seed, purpose, t)`, so a resumed run needs no saved RNG state.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::adapter::{
    accuracy, evaluate, few_shot_subsample, fit, zero_shot_weights, AdapterError, AdapterWeights, FitConfig,
    PredictionMatrix,
};
use crate::concept::{
    init_concepts, ConceptError, ConceptId, ConceptLibrary, ConceptOrigin, DatasetManifest, InitOptions, LabelSet,
    DEFAULT_INIT_TEMPLATE,
};
use crate::evolution::{
    build_disambiguation_prompt, concept_evol, prompt_rounds, subsample_pairs, EvolError, EvolOptions, HistoryBank,
    SampledPair,
};
use crate::heuristics::{ConfusionReport, Heuristic, HeuristicError};
use crate::llm::{ChatClientConfig, ChatService, OpenAiChatClient, ReplayChat, ServiceError};
use crate::scoring::{
    score, write_atomic, CacheFileBackend, EmbeddingBackend, EmbeddingClientConfig, ScoreCache, ScoreError,
    ScoreMatrix, ScorerBackend, DEFAULT_SCORE_TEMPLATE,
};
use crate::simulation::{generate_world, SimulatedLlm, SimulatedLlmConfig, SimulatedScorer, SyntheticWorld, WorldError, WorldParams};
use crate::util::derive_seed;

#[derive(Debug, Error)]
pub enum RunError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("labels accessed on the evolution path of a zero-shot run ({0})")]
    LabelAccess(&'static str),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Concept(#[from] ConceptError),
    #[error(transparent)]
    Score(#[from] ScoreError),
    #[error(transparent)]
    Adapter(#[from] AdapterError),
    #[error(transparent)]
    Heuristic(#[from] HeuristicError),
    #[error(transparent)]
    Evol(#[from] EvolError),
    #[error(transparent)]
    World(#[from] WorldError),
    #[error(transparent)]
    Service(#[from] ServiceError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("iteration {t}: {source}")]
    AtIteration {
        t: u32,
        #[source]
        source: Box<RunError>,
    },
}

impl RunError {
    fn at(t: u32) -> impl FnOnce(RunError) -> RunError {
        move |e| RunError::AtIteration { t, source: Box::new(e) }
    }

    /// Short machine-readable kind, for CLI error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            RunError::Config(_) => "config",
            RunError::LabelAccess(_) => "label_access",
            RunError::Checkpoint(_) => "checkpoint",
            RunError::Concept(_) => "concept",
            RunError::Score(_) => "scoring",
            RunError::Adapter(_) => "adapter",
            RunError::Heuristic(_) => "heuristic",
            RunError::Evol(_) => "evolution",
            RunError::World(_) => "world",
            RunError::Service(_) => "service",
            RunError::Io(_) => "io",
            RunError::Json(_) => "json",
            RunError::AtIteration { source, .. } => source.kind(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeuristicKind {
    Topk,
    Pearson,
    Agglomerative,
    LabeledConfusion,
    Emd,
    PcaCorr,
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AdapterSetting {
    /// Block-diagonal uniform weights; labels are never read.
    ZeroShot,
    /// Trained on `shots_per_class` labeled images per class.
    FewShot { shots_per_class: usize },
    /// Trained on every labeled image.
    FineTuned,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScorerSetting {
    /// Scores from the planted world in `RunConfig::world`.
    Simulated,
    /// Precomputed score cache file; never computes new columns.
    CacheFile { path: PathBuf },
    /// Cosine similarity of embeddings from an embeddings service.
    Embedding(EmbeddingClientConfig),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LlmSetting {
    Simulated(SimulatedLlmConfig),
    /// OpenAI-compatible chat endpoint. The key is read from `api_key_env`.
    Openai {
        #[serde(flatten)]
        client: ChatClientConfig,
        #[serde(default = "default_api_key_env")]
        api_key_env: String,
    },
    /// Recorded responses: an ordered JSON array, or an object keyed by
    /// prompt substring (see `ReplayChat`).
    Replay { path: PathBuf },
}

fn default_api_key_env() -> String {
    "OPENAI_API_KEY".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldSetting {
    /// Load the world from this JSON file instead of generating it.
    #[serde(default)]
    pub path: Option<PathBuf>,
    #[serde(default)]
    pub params: WorldParams,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataSetting {
    /// Labels file: a JSON array of names, or one name per line.
    pub labels: Option<PathBuf>,
    /// JSON-lines manifest of `{image_id, image_ref, label?}`.
    pub manifest: Option<PathBuf>,
    /// Initial library JSON; when absent the library is generated by the LLM.
    pub library: Option<PathBuf>,
    pub dataset_name: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// Number of iterations T.
    pub iterations: u32,
    /// Pairs evolved per iteration K.
    pub pairs_per_iteration: usize,
    pub heuristic: HeuristicKind,
    /// k of the top-k heuristic.
    pub top_k: usize,
    pub n_clusters: usize,
    pub pca_components: usize,
    /// Repeat-decay rate gamma.
    pub gamma: f64,
    pub adapter: AdapterSetting,
    pub fit: FitConfig,
    pub seed: u64,
    pub history_conditioning: bool,
    /// Stop as soon as no pair has a positive sampling weight.
    pub early_stop: bool,
    pub evol: EvolOptions,
    pub max_inflight: usize,
    pub score_template: String,
    pub init_template: String,
    pub min_initial_concepts: usize,
    pub scorer: ScorerSetting,
    pub llm: LlmSetting,
    pub world: Option<WorldSetting>,
    pub data: DataSetting,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            iterations: 60,
            pairs_per_iteration: 50,
            heuristic: HeuristicKind::Topk,
            top_k: 3,
            n_clusters: 1,
            pca_components: 2,
            gamma: 1.0 / 30.0,
            adapter: AdapterSetting::ZeroShot,
            fit: FitConfig::default(),
            seed: 0,
            history_conditioning: true,
            early_stop: true,
            evol: EvolOptions::default(),
            max_inflight: 8,
            score_template: DEFAULT_SCORE_TEMPLATE.into(),
            init_template: DEFAULT_INIT_TEMPLATE.into(),
            min_initial_concepts: crate::concept::DEFAULT_MIN_INITIAL_CONCEPTS,
            scorer: ScorerSetting::Simulated,
            llm: LlmSetting::Simulated(SimulatedLlmConfig::default()),
            world: None,
            data: DataSetting::default(),
        }
    }
}

fn key_alias(key: &str) -> &str {
    match key {
        "T" => "iterations",
        "K" => "pairs_per_iteration",
        "k" => "top_k",
        other => other,
    }
}

impl RunConfig {
    /// A simulated run over the planted acceptance world.
    pub fn simulated(world: WorldParams) -> Self {
        Self { world: Some(WorldSetting { path: None, params: world }), ..Self::default() }
    }

    pub fn from_json(text: &str) -> Result<Self, RunError> {
        let mut value: Value = serde_json::from_str(text)?;
        if let Value::Object(map) = &mut value {
            for alias in ["T", "K", "k"] {
                if let Some(v) = map.remove(alias) {
                    map.insert(key_alias(alias).to_string(), v);
                }
            }
        }
        let cfg: Self = serde_json::from_value(value).map_err(|e| RunError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Applies one `key=value` override. `key` is a dotted path into the
    /// JSON form (`fit.lr=0.1`, `llm.model=...`); `T`, `K` and `k` are
    /// accepted as aliases. `value` is parsed as JSON, falling back to a
    /// plain string.
    pub fn apply_override(&mut self, assignment: &str) -> Result<(), RunError> {
        let assignment = assignment.trim_start_matches("--");
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| RunError::Config(format!("override {assignment:?} is not key=value")))?;
        let value: Value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        let mut doc = serde_json::to_value(&*self)?;
        let parts: Vec<&str> = key.split('.').map(key_alias).collect();
        let mut node = &mut doc;
        for (n, part) in parts.iter().enumerate() {
            if node.is_null() {
                *node = Value::Object(Default::default());
            }
            let map = node
                .as_object_mut()
                .ok_or_else(|| RunError::Config(format!("{key}: {} is not an object", parts[..n].join("."))))?;
            if n + 1 == parts.len() {
                map.insert(part.to_string(), value.clone());
                break;
            }
            node = map.entry(part.to_string()).or_insert(Value::Null);
        }
        let updated: Self =
            serde_json::from_value(doc).map_err(|e| RunError::Config(format!("override {key}: {e}")))?;
        updated.validate()?;
        *self = updated;
        Ok(())
    }

    pub fn validate(&self) -> Result<(), RunError> {
        let bad = |m: String| Err(RunError::Config(m));
        if self.iterations < 1 {
            return bad("iterations must be at least 1".into());
        }
        if self.pairs_per_iteration < 1 {
            return bad("pairs_per_iteration must be at least 1".into());
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return bad(format!("gamma {} must be finite and non-negative", self.gamma));
        }
        if self.heuristic == HeuristicKind::Topk && self.top_k < 2 {
            return bad("top_k must be at least 2".into());
        }
        if self.max_inflight < 1 {
            return bad("max_inflight must be at least 1".into());
        }
        if let AdapterSetting::FewShot { shots_per_class: 0 } = self.adapter {
            return bad("few_shot needs shots_per_class >= 1".into());
        }
        if self.heuristic == HeuristicKind::LabeledConfusion && self.adapter == AdapterSetting::ZeroShot {
            return Err(RunError::LabelAccess("labeled_confusion heuristic"));
        }
        Ok(())
    }

    pub fn init_options(&self) -> InitOptions {
        InitOptions {
            min_initial_concepts: self.min_initial_concepts,
            max_concept_chars: self.evol.max_concept_chars,
            retry_budget: self.evol.retry_budget,
            max_inflight: self.max_inflight,
        }
    }

    pub fn heuristic(&self) -> Heuristic {
        match self.heuristic {
            HeuristicKind::Topk => Heuristic::TopK { k: self.top_k },
            HeuristicKind::Pearson => Heuristic::Pearson,
            HeuristicKind::Agglomerative => Heuristic::Agglomerative { n_clusters: self.n_clusters },
            HeuristicKind::LabeledConfusion => Heuristic::LabeledConfusion,
            HeuristicKind::Emd => Heuristic::Emd,
            HeuristicKind::PcaCorr => Heuristic::PcaCorr { n_components: self.pca_components },
            HeuristicKind::Random => Heuristic::Random,
        }
    }

    pub fn dataset_name(&self) -> String {
        if let Some(name) = &self.data.dataset_name {
            return name.clone();
        }
        match &self.world {
            Some(w) => format!("simulated-{}", w.params.seed),
            None => "dataset".into(),
        }
    }
}

/// Holds the labels and decides who may read them.
///
/// In zero-shot runs only accuracy reporting may see labels; any attempt from
/// fitting or the confusion heuristic is an error.
#[derive(Debug, Clone)]
pub struct LabelGuard {
    labels: Option<Vec<usize>>,
    zero_shot: bool,
}

impl LabelGuard {
    pub fn new(labels: Option<Vec<usize>>, zero_shot: bool) -> Self {
        Self { labels, zero_shot }
    }

    /// Labels for the evolution path (fitting, labeled heuristics).
    pub fn for_evolution(&self, purpose: &'static str) -> Result<Option<&[usize]>, RunError> {
        if self.zero_shot {
            return Err(RunError::LabelAccess(purpose));
        }
        Ok(self.labels.as_deref())
    }

    /// Labels for accuracy reporting; always allowed.
    pub fn for_reporting(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }
}

/// Everything a run needs besides its configuration.
pub struct RunInputs {
    pub labels: LabelSet,
    pub manifest: DatasetManifest,
    pub scorer: Box<dyn ScorerBackend>,
    pub llm: Box<dyn ChatService>,
    /// Initial library; generated through `llm` when `None`.
    pub library: Option<ConceptLibrary>,
}

/// `fs::read_to_string` with the path in the error message.
fn read_text(path: impl AsRef<Path>) -> Result<String, RunError> {
    let path = path.as_ref();
    fs::read_to_string(path).map_err(|e| with_path(e, path))
}

fn open_file(path: &Path) -> Result<fs::File, RunError> {
    fs::File::open(path).map_err(|e| with_path(e, path))
}

fn with_path(e: std::io::Error, path: &Path) -> RunError {
    RunError::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
}

/// Reads a label file: a JSON array of names, or one name per line.
pub fn read_labels(path: &Path) -> Result<LabelSet, RunError> {
    let text = read_text(path)?;
    let names: Vec<String> = match serde_json::from_str::<Vec<String>>(&text) {
        Ok(names) => names,
        Err(_) => text.lines().map(str::trim).filter(|l| !l.is_empty()).map(str::to_string).collect(),
    };
    Ok(LabelSet::new(names)?)
}

pub fn load_world(setting: &WorldSetting) -> Result<SyntheticWorld, RunError> {
    match &setting.path {
        Some(path) => Ok(SyntheticWorld::from_json(&read_text(path)?)?),
        None => Ok(generate_world(&setting.params)?),
    }
}

fn dataset_from(config: &RunConfig, world: Option<&SyntheticWorld>) -> Result<(LabelSet, DatasetManifest), RunError> {
    match (&config.data.labels, &config.data.manifest, world) {
        (Some(labels), Some(manifest), _) => {
            let labels = read_labels(labels)?;
            let reader = std::io::BufReader::new(open_file(manifest)?);
            let manifest = DatasetManifest::from_jsonl(reader, &labels)?;
            Ok((labels, manifest))
        }
        (None, None, Some(w)) => Ok((w.labels(), w.manifest())),
        _ => Err(RunError::Config("set both data.labels and data.manifest, or a world".into())),
    }
}

/// Label set and manifest named by the configuration, without building any
/// backend.
pub fn load_dataset(config: &RunConfig) -> Result<(LabelSet, DatasetManifest), RunError> {
    let world = config.world.as_ref().map(load_world).transpose()?;
    dataset_from(config, world.as_ref())
}

fn llm_from(config: &RunConfig, world: Option<&SyntheticWorld>) -> Result<Box<dyn ChatService>, RunError> {
    let needs_world = || RunError::Config("simulated backends need a `world` section".into());
    Ok(match &config.llm {
        LlmSetting::Simulated(sim) => Box::new(SimulatedLlm::new(world.cloned().ok_or_else(needs_world)?, sim.clone())),
        LlmSetting::Openai { client, api_key_env } => {
            let key = std::env::var(api_key_env).ok().filter(|k| !k.is_empty());
            Box::new(OpenAiChatClient::new(client.clone(), key)?)
        }
        LlmSetting::Replay { path } => Box::new(ReplayChat::from_json(&read_text(path)?)?),
    })
}

/// The configured chat backend alone.
pub fn build_llm(config: &RunConfig) -> Result<Box<dyn ChatService>, RunError> {
    let world = config.world.as_ref().map(load_world).transpose()?;
    llm_from(config, world.as_ref())
}

/// Builds backends, labels, manifest and (optionally) the initial library
/// from the configuration.
pub fn build_inputs(config: &RunConfig) -> Result<RunInputs, RunError> {
    let world = config.world.as_ref().map(load_world).transpose()?;
    let needs_world = || RunError::Config("simulated backends need a `world` section".into());
    let (labels, manifest) = dataset_from(config, world.as_ref())?;
    let scorer: Box<dyn ScorerBackend> = match &config.scorer {
        ScorerSetting::Simulated => Box::new(SimulatedScorer::new(world.clone().ok_or_else(needs_world)?)),
        ScorerSetting::CacheFile { path } => Box::new(CacheFileBackend::open(path)?),
        ScorerSetting::Embedding(client) => Box::new(EmbeddingBackend::new(client.clone())?),
    };
    let llm = llm_from(config, world.as_ref())?;
    let library = match &config.data.library {
        Some(path) => Some(ConceptLibrary::from_json(&read_text(path)?)?),
        None => None,
    };
    Ok(RunInputs { labels, manifest, scorer, llm, library })
}

/// One row per completed iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub t: u32,
    /// Version of the library that was fitted and evaluated.
    pub library_version: u32,
    pub library_size: usize,
    pub weights_ref: String,
    pub confusion_ref: String,
    /// Top-1 accuracy, when labels exist.
    pub accuracy: Option<f64>,
    pub sampled_pairs: Vec<SampledPair>,
    /// Pairs whose model call failed and were skipped.
    pub skipped_pairs: Vec<(usize, usize)>,
    pub concepts_added: usize,
    /// Columns scored for the concepts this iteration added.
    pub columns_scored: usize,
    /// Set when the loop stopped at this iteration.
    pub stop_reason: Option<String>,
    pub wall_time_ms: u64,
}

impl IterationRecord {
    /// The record with its wall-clock time cleared; everything else is a
    /// deterministic function of the configuration.
    pub fn without_timing(&self) -> Self {
        Self { wall_time_ms: 0, ..self.clone() }
    }
}

/// Result of a finished run.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub library: ConceptLibrary,
    pub weights: AdapterWeights,
    pub records: Vec<IterationRecord>,
    /// Accuracy of the final library, when labels exist.
    pub final_accuracy: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RunSummary {
    iterations_completed: usize,
    final_library_version: u32,
    final_library_size: usize,
    final_accuracy: Option<f64>,
    stop_reason: Option<String>,
}

pub fn iter_dir(run_dir: &Path, t: u32) -> PathBuf {
    run_dir.join(format!("iter_{t:03}"))
}

/// Score cache of a run directory.
pub fn scores_path(run_dir: &Path) -> PathBuf {
    run_dir.join("scores.bin")
}

/// Drives the loop one iteration at a time.
pub struct Runner {
    config: RunConfig,
    inputs: RunInputs,
    run_dir: Option<PathBuf>,
    guard: LabelGuard,
    pool: rayon::ThreadPool,
    cache: ScoreCache,
    library: ConceptLibrary,
    scores: ScoreMatrix,
    weights: Option<(AdapterWeights, Vec<ConceptId>)>,
    bank: HistoryBank,
    records: Vec<IterationRecord>,
    stopped: bool,
}

impl Runner {
    /// Starts a run. With a `run_dir`, the configuration is written there and
    /// each iteration is checkpointed; without one the run stays in memory.
    pub fn create(config: RunConfig, mut inputs: RunInputs, run_dir: Option<&Path>) -> Result<Self, RunError> {
        config.validate()?;
        if let Some(dir) = run_dir {
            if dir.join("config.json").exists() {
                return Err(RunError::Checkpoint(format!("{} already holds a run; use resume", dir.display())));
            }
            fs::create_dir_all(dir)?;
            write_atomic(&dir.join("config.json"), config.to_json().as_bytes())?;
        }
        let library = match inputs.library.take() {
            Some(lib) => lib,
            None => {
                init_concepts(&inputs.labels, inputs.llm.as_ref(), &config.init_template, &config.init_options())?
            }
        };
        if library.labels() != &inputs.labels {
            return Err(RunError::Config("initial library labels differ from the label set".into()));
        }
        if let Some(dir) = run_dir {
            write_atomic(&dir.join("library_init.json"), library.to_json().as_bytes())?;
        }
        let cache = ScoreCache::new(inputs.scorer.backbone_id(), config.dataset_name());
        Self::assemble(config, inputs, run_dir, cache, library, HistoryBank::new(), None, Vec::new())
    }

    /// Continues a checkpointed run from its last complete iteration.
    /// `config` overrides the stored configuration when given (for a larger
    /// iteration budget, say); `inputs` must describe the same data.
    pub fn resume(run_dir: &Path, inputs: RunInputs, config: Option<RunConfig>) -> Result<Self, RunError> {
        let stored = RunConfig::from_json(&read_text(run_dir.join("config.json"))?)?;
        let config = config.unwrap_or(stored);
        let records = load_records(run_dir)?;
        let cache_path = scores_path(run_dir);
        let cache = if cache_path.exists() {
            ScoreCache::load(&cache_path)?
        } else {
            ScoreCache::new(inputs.scorer.backbone_id(), config.dataset_name())
        };
        let Some(last) = records.last() else {
            let library = ConceptLibrary::from_json(&read_text(run_dir.join("library_init.json"))?)?;
            return Self::assemble(config, inputs, Some(run_dir), cache, library, HistoryBank::new(), None, records);
        };
        let dir = iter_dir(run_dir, last.t);
        let library = ConceptLibrary::from_json(&read_text(dir.join("library.json"))?)?;
        let bank = HistoryBank::from_json(&read_text(dir.join("history.json"))?)?;
        let (weights, _) = AdapterWeights::from_bytes(&fs::read(dir.join("weights.bin"))?)?;
        let fitted_ids = ids_before(&library, last.t);
        if fitted_ids.len() != weights.n_concepts() {
            return Err(RunError::Checkpoint(format!("weights of iteration {} do not match its library", last.t)));
        }
        let stopped = last.stop_reason.is_some();
        let mut runner =
            Self::assemble(config, inputs, Some(run_dir), cache, library, bank, Some((weights, fitted_ids)), records)?;
        runner.stopped = stopped;
        Ok(runner)
    }

    #[allow(clippy::too_many_arguments)]
    fn assemble(
        config: RunConfig,
        inputs: RunInputs,
        run_dir: Option<&Path>,
        mut cache: ScoreCache,
        library: ConceptLibrary,
        bank: HistoryBank,
        weights: Option<(AdapterWeights, Vec<ConceptId>)>,
        records: Vec<IterationRecord>,
    ) -> Result<Self, RunError> {
        let zero_shot = config.adapter == AdapterSetting::ZeroShot;
        let guard = LabelGuard::new(inputs.manifest.labels(), zero_shot);
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(config.max_inflight)
            .build()
            .map_err(|e| RunError::Config(format!("thread pool: {e}")))?;
        let (scores, _) = score(
            inputs.scorer.as_ref(),
            &inputs.manifest,
            &library,
            &config.score_template,
            &mut cache,
            config.max_inflight,
        )?;
        Ok(Self {
            config,
            inputs,
            run_dir: run_dir.map(Path::to_path_buf),
            guard,
            pool,
            cache,
            library,
            scores,
            weights,
            bank,
            records,
            stopped: false,
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn library(&self) -> &ConceptLibrary {
        &self.library
    }

    pub fn bank(&self) -> &HistoryBank {
        &self.bank
    }

    pub fn records(&self) -> &[IterationRecord] {
        &self.records
    }

    /// Next iteration index.
    pub fn t(&self) -> u32 {
        self.records.len() as u32
    }

    pub fn is_done(&self) -> bool {
        self.stopped || self.t() >= self.config.iterations
    }

    fn fit_weights(&self, t: u32) -> Result<AdapterWeights, RunError> {
        let ids = self.library.concept_ids();
        let (rows, fit_cfg) = match &self.config.adapter {
            AdapterSetting::ZeroShot => return Ok(zero_shot_weights(&self.library)),
            AdapterSetting::FewShot { shots_per_class } => {
                let labels = self.guard.for_evolution("adapter fit")?.ok_or(AdapterError::NoLabels)?;
                let seed = derive_seed(self.config.seed, "few_shot", 0);
                (Some(few_shot_subsample(labels, self.library.n_classes(), *shots_per_class, seed)), &self.config.fit)
            }
            AdapterSetting::FineTuned => (None, &self.config.fit),
        };
        let labels = self.guard.for_evolution("adapter fit")?.ok_or(AdapterError::NoLabels)?;
        let init = match &self.weights {
            Some((w, old_ids)) => w.remap_rows(old_ids, &ids)?,
            None => zero_shot_weights(&self.library),
        };
        let cfg = FitConfig { seed: derive_seed(self.config.seed, "fit", t as u64), ..fit_cfg.clone() };
        Ok(match rows {
            Some(rows) => {
                let sub_labels: Vec<usize> = rows.iter().map(|&r| labels[r]).collect();
                fit(&init, &self.scores.select_rows(&rows), Some(&sub_labels), &cfg)?
            }
            None => fit(&init, &self.scores, Some(labels), &cfg)?,
        })
    }

    fn confusion(&self, pred: &PredictionMatrix, t: u32) -> Result<ConfusionReport, RunError> {
        let heuristic = self.config.heuristic();
        let labels = if heuristic.needs_labels() { self.guard.for_evolution("labeled confusion")? } else { None };
        let seed = derive_seed(self.config.seed, "heuristic", t as u64);
        Ok(heuristic.compute(pred, labels, seed)?.with_iteration(t))
    }

    /// Runs one iteration and checkpoints it. Returns the new record.
    pub fn step(&mut self) -> Result<&IterationRecord, RunError> {
        let t = self.t();
        self.step_inner(t).map_err(RunError::at(t))?;
        Ok(self.records.last().expect("step pushed a record"))
    }

    fn step_inner(&mut self, t: u32) -> Result<(), RunError> {
        let start = Instant::now();
        let weights = self.fit_weights(t)?;
        let pred = evaluate(&weights, &self.scores)?;
        let acc = self.guard.for_reporting().map(|labels| accuracy(&pred, labels));
        let report = self.confusion(&pred, t)?;

        for pair in self.bank.pending_followups(t) {
            self.bank.record_followup(pair, t, report.get(pair.0, pair.1))?;
        }

        let sample_seed = derive_seed(self.config.seed, "sample", t as u64);
        let sample = match subsample_pairs(&report, &self.bank, self.config.pairs_per_iteration, self.config.gamma, sample_seed) {
            Ok(sample) => Some(sample),
            Err(EvolError::NoEligiblePairs) => None,
            Err(e) => return Err(e.into()),
        };
        let stop_reason = match (&sample, self.config.early_stop) {
            (None, true) => {
                log::info!("iteration {t}: no pair has a positive sampling weight; stopping early");
                Some("no_eligible_pairs".to_string())
            }
            _ => None,
        };
        let sampled: Vec<SampledPair> = sample.map(|s| s.pairs).unwrap_or_default();

        let library = &self.library;
        let bank = &self.bank;
        let llm = self.inputs.llm.as_ref();
        let (history, evol_opts) = (self.config.history_conditioning, &self.config.evol);
        let replies: Vec<_> = self.pool.install(|| {
            sampled
                .par_iter()
                .map(|p| {
                    let labels = library.labels();
                    let doc = build_disambiguation_prompt(
                        p.pair(),
                        t,
                        labels.name(p.i),
                        labels.name(p.j),
                        &library.class_texts(p.i),
                        &library.class_texts(p.j),
                        prompt_rounds(bank, p.pair(), history),
                    );
                    concept_evol(llm, &doc, evol_opts)
                })
                .collect()
        });

        let before = self.library.len();
        let mut next = self.library.clone();
        let mut skipped = Vec::new();
        for (p, reply) in sampled.iter().zip(replies) {
            match reply {
                Ok(reply) => {
                    next = next.merge_concepts(p.i, &reply.new_i).merge_concepts(p.j, &reply.new_j);
                    self.bank.update_history(p.pair(), t, reply.new_i, reply.new_j, p.r)?;
                }
                Err(e) => {
                    log::warn!("iteration {t}: skipping pair {:?}: {e}", p.pair());
                    skipped.push(p.pair());
                }
            }
        }
        let next = next.with_version(t + 1);
        let concepts_added = next.len() - before;

        let fitted_ids = self.library.concept_ids();
        let record = IterationRecord {
            t,
            library_version: self.library.version(),
            library_size: before,
            weights_ref: format!("iter_{t:03}/weights.bin"),
            confusion_ref: format!("iter_{t:03}/confusion.json"),
            accuracy: acc,
            sampled_pairs: sampled,
            skipped_pairs: skipped,
            concepts_added,
            columns_scored: 0,
            stop_reason,
            wall_time_ms: 0,
        };

        self.library = next;
        let (scores, stats) = score(
            self.inputs.scorer.as_ref(),
            &self.inputs.manifest,
            &self.library,
            &self.config.score_template,
            &mut self.cache,
            self.config.max_inflight,
        )?;
        self.scores = scores;

        let record = IterationRecord {
            columns_scored: stats.columns_scored,
            wall_time_ms: start.elapsed().as_millis() as u64,
            ..record
        };
        if let Some(dir) = &self.run_dir {
            self.checkpoint(dir, &weights, &report, &record)?;
        }
        self.stopped = record.stop_reason.is_some();
        self.weights = Some((weights, fitted_ids));
        self.records.push(record);
        Ok(())
    }

    fn checkpoint(
        &self,
        run_dir: &Path,
        weights: &AdapterWeights,
        report: &ConfusionReport,
        record: &IterationRecord,
    ) -> Result<(), RunError> {
        let dir = iter_dir(run_dir, record.t);
        fs::create_dir_all(&dir)?;
        write_atomic(&dir.join("library.json"), self.library.to_json().as_bytes())?;
        write_atomic(&dir.join("weights.bin"), &weights.to_bytes(record.t))?;
        write_atomic(&dir.join("confusion.json"), report.to_json(self.library.labels()).as_bytes())?;
        write_atomic(&dir.join("history.json"), self.bank.to_json().as_bytes())?;
        self.cache.save(&scores_path(run_dir))?;
        // written last: its presence marks the iteration complete
        write_atomic(&dir.join("record.json"), serde_json::to_string_pretty(record)?.as_bytes())?;
        Ok(())
    }

    /// Runs the remaining iterations.
    pub fn run_to_end(&mut self) -> Result<(), RunError> {
        while !self.is_done() {
            self.step()?;
        }
        Ok(())
    }

    /// Fits and evaluates the final library and writes `summary.json`.
    pub fn finish(self) -> Result<RunOutcome, RunError> {
        let t = self.t();
        let weights = self.fit_weights(t).map_err(RunError::at(t))?;
        let pred = evaluate(&weights, &self.scores)?;
        let final_accuracy = self.guard.for_reporting().map(|labels| accuracy(&pred, labels));
        if let Some(dir) = &self.run_dir {
            let summary = RunSummary {
                iterations_completed: self.records.len(),
                final_library_version: self.library.version(),
                final_library_size: self.library.len(),
                final_accuracy,
                stop_reason: self.records.last().and_then(|r| r.stop_reason.clone()),
            };
            write_atomic(&dir.join("summary.json"), serde_json::to_string_pretty(&summary)?.as_bytes())?;
            write_atomic(&dir.join("weights_final.bin"), &weights.to_bytes(t))?;
        }
        Ok(RunOutcome { library: self.library, weights, records: self.records, final_accuracy })
    }
}

/// Column ids of the concepts that existed before iteration `t` merged its
/// proposals.
fn ids_before(library: &ConceptLibrary, t: u32) -> Vec<ConceptId> {
    library
        .flatten()
        .filter(|(_, c)| match c.origin() {
            ConceptOrigin::Initial => true,
            ConceptOrigin::Evolved { iteration, .. } => iteration < t,
        })
        .map(|(class, c)| ConceptId::of(library.labels().name(class), c.text()))
        .collect()
}

/// Records of every complete iteration, in order. Stops at the first
/// iteration directory without a `record.json`.
pub fn load_records(run_dir: &Path) -> Result<Vec<IterationRecord>, RunError> {
    let mut out = Vec::new();
    loop {
        let path = iter_dir(run_dir, out.len() as u32).join("record.json");
        if !path.exists() {
            break;
        }
        let record: IterationRecord = serde_json::from_str(&read_text(&path)?)?;
        if record.t as usize != out.len() {
            return Err(RunError::Checkpoint(format!("{} holds iteration {}", path.display(), record.t)));
        }
        out.push(record);
    }
    Ok(out)
}

/// Library after the last complete iteration, or the initial library.
pub fn load_latest_library(run_dir: &Path) -> Result<ConceptLibrary, RunError> {
    let path = match load_records(run_dir)?.last() {
        Some(r) => iter_dir(run_dir, r.t).join("library.json"),
        None => run_dir.join("library_init.json"),
    };
    Ok(ConceptLibrary::from_json(&read_text(path)?)?)
}

/// Latest checkpointed history bank, if any iteration completed.
pub fn load_latest_history(run_dir: &Path) -> Result<Option<HistoryBank>, RunError> {
    let records = load_records(run_dir)?;
    match records.last() {
        Some(r) => Ok(Some(HistoryBank::from_json(&read_text(iter_dir(run_dir, r.t).join("history.json"))?)?)),
        None => Ok(None),
    }
}

/// Runs a configuration from scratch to the end.
pub fn run(config: RunConfig, inputs: RunInputs, run_dir: Option<&Path>) -> Result<RunOutcome, RunError> {
    let mut runner = Runner::create(config, inputs, run_dir)?;
    runner.run_to_end()?;
    runner.finish()
}

/// One row of the per-iteration report.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportRow {
    pub t: u32,
    pub library_version: u32,
    pub library_size: usize,
    pub concepts_added: usize,
    pub pairs_sampled: usize,
    pub pairs_skipped: usize,
    pub accuracy: Option<f64>,
    /// Best accuracy over iterations `0..=t`.
    pub best_accuracy: Option<f64>,
    pub wall_time_ms: u64,
}

pub fn report_rows(records: &[IterationRecord]) -> Vec<ReportRow> {
    let mut best: Option<f64> = None;
    records
        .iter()
        .map(|r| {
            if let Some(a) = r.accuracy {
                best = Some(best.map_or(a, |b: f64| b.max(a)));
            }
            ReportRow {
                t: r.t,
                library_version: r.library_version,
                library_size: r.library_size,
                concepts_added: r.concepts_added,
                pairs_sampled: r.sampled_pairs.len(),
                pairs_skipped: r.skipped_pairs.len(),
                accuracy: r.accuracy,
                best_accuracy: best,
                wall_time_ms: r.wall_time_ms,
            }
        })
        .collect()
}

/// One-shot accuracy of `weights` (zero-shot weights when `None`) over a
/// score matrix whose columns follow `library`.
pub fn eval_accuracy(
    library: &ConceptLibrary,
    weights: Option<&AdapterWeights>,
    scores: &ScoreMatrix,
    labels: &[usize],
) -> Result<f64, RunError> {
    if scores.col_ids() != library.concept_ids().as_slice() {
        return Err(RunError::Config("score columns do not follow the library".into()));
    }
    let zs;
    let w = match weights {
        Some(w) => w,
        None => {
            zs = zero_shot_weights(library);
            &zs
        }
    };
    if labels.len() != scores.n_rows() {
        return Err(RunError::Config(format!("{} labels for {} images", labels.len(), scores.n_rows())));
    }
    Ok(accuracy(&evaluate(w, scores)?, labels))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulation::SimulatedLlmMode;

    fn small_config() -> RunConfig {
        let world = WorldParams { n_classes: 4, images_per_class: 5, seed: 11, ..WorldParams::default() };
        RunConfig { iterations: 6, pairs_per_iteration: 4, max_inflight: 2, ..RunConfig::simulated(world) }
    }

    #[test]
    fn defaults_match_published_settings() {
        let c = RunConfig::default();
        assert_eq!((c.iterations, c.top_k, c.pairs_per_iteration), (60, 3, 50));
        assert_eq!(c.gamma, 1.0 / 30.0);
        assert_eq!(c.fit.epochs, 50);
    }

    #[test]
    fn overrides_and_aliases() {
        let mut c = RunConfig::default();
        c.apply_override("--T=15").unwrap();
        c.apply_override("K=10").unwrap();
        c.apply_override("fit.lr=0.5").unwrap();
        c.apply_override("heuristic=pearson").unwrap();
        c.apply_override("world.params.n_classes=3").unwrap();
        c.apply_override("llm.mode=random_phrase").unwrap();
        assert_eq!(c.iterations, 15);
        assert_eq!(c.pairs_per_iteration, 10);
        assert_eq!(c.fit.lr, 0.5);
        assert_eq!(c.heuristic, HeuristicKind::Pearson);
        assert_eq!(c.world.as_ref().unwrap().params.n_classes, 3);
        assert!(matches!(&c.llm, LlmSetting::Simulated(s) if s.mode == SimulatedLlmMode::RandomPhrase));
        assert!(c.apply_override("T=0").is_err());
        assert!(c.apply_override("nonsense").is_err());
        assert!(c.apply_override("fit.lr=fast").is_err());
        assert_eq!(c.iterations, 15);
    }

    #[test]
    fn config_json_round_trip_with_aliases() {
        let c = small_config();
        assert_eq!(RunConfig::from_json(&c.to_json()).unwrap(), c);
        let aliased = RunConfig::from_json(r#"{"T": 5, "K": 2, "k": 2}"#).unwrap();
        assert_eq!((aliased.iterations, aliased.pairs_per_iteration, aliased.top_k), (5, 2, 2));
    }

    #[test]
    fn openai_setting_parses() {
        let c = RunConfig::from_json(
            r#"{"llm": {"kind": "openai", "base_url": "http://localhost:8000", "model": "m"}}"#,
        )
        .unwrap();
        match c.llm {
            LlmSetting::Openai { client, api_key_env } => {
                assert_eq!(client.model, "m");
                assert_eq!(client.max_retries, 3);
                assert_eq!(api_key_env, "OPENAI_API_KEY");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn label_guard() {
        let zs = LabelGuard::new(Some(vec![0, 1]), true);
        assert!(matches!(zs.for_evolution("fit"), Err(RunError::LabelAccess("fit"))));
        assert_eq!(zs.for_reporting(), Some(&[0, 1][..]));
        let trained = LabelGuard::new(Some(vec![0, 1]), false);
        assert_eq!(trained.for_evolution("fit").unwrap(), Some(&[0, 1][..]));
    }

    #[test]
    fn labeled_heuristic_in_zero_shot_is_refused() {
        let c = RunConfig { heuristic: HeuristicKind::LabeledConfusion, ..RunConfig::default() };
        assert!(matches!(c.validate(), Err(RunError::LabelAccess(_))));
    }

    #[test]
    fn small_simulated_run_improves() {
        let config = small_config();
        let inputs = build_inputs(&config).unwrap();
        let out = run(config, inputs, None).unwrap();
        let first = out.records[0].accuracy.unwrap();
        assert!(out.final_accuracy.unwrap() > first, "{first} -> {:?}", out.final_accuracy);
        for w in out.records.windows(2) {
            assert_eq!(w[1].library_size, w[0].library_size + w[0].concepts_added);
        }
        for r in &out.records {
            assert!(r.concepts_added <= 4 * 5 * 2);
            assert!(r.sampled_pairs.len() <= 4);
        }
    }

    #[test]
    fn separated_world_stops_early() {
        // disjoint attributes and the full library: nothing is confused
        let world = WorldParams { n_classes: 3, overlap_fraction: 0.0, noise_sigma: 0.0, seed: 2, ..WorldParams::default() };
        let config = RunConfig {
            iterations: 1,
            heuristic: HeuristicKind::Pearson,
            ..RunConfig::simulated(world.clone())
        };
        let mut inputs = build_inputs(&config).unwrap();
        inputs.library = Some(generate_world(&world).unwrap().oracle_library().unwrap());
        let out = run(config, inputs, None).unwrap();
        assert_eq!(out.records.len(), 1);
        assert_eq!(out.records[0].concepts_added, 0);
        assert_eq!(out.records[0].stop_reason.as_deref(), Some("no_eligible_pairs"));
    }

    #[test]
    fn trained_mode_runs() {
        let config = RunConfig {
            adapter: AdapterSetting::FewShot { shots_per_class: 3 },
            heuristic: HeuristicKind::LabeledConfusion,
            fit: FitConfig { lr: 0.5, epochs: 20, ..FitConfig::default() },
            ..small_config()
        };
        let inputs = build_inputs(&config).unwrap();
        let out = run(config, inputs, None).unwrap();
        assert!(out.final_accuracy.is_some());
        assert_eq!(out.weights.n_concepts(), out.library.len());
    }

    #[test]
    fn checkpoint_resume_matches() {
        let dir = tempfile::tempdir().unwrap();
        let config = RunConfig { adapter: AdapterSetting::FineTuned, fit: FitConfig { lr: 0.5, epochs: 5, ..FitConfig::default() }, ..small_config() };
        let full = run(config.clone(), build_inputs(&config).unwrap(), None).unwrap();

        let mut first = Runner::create(config.clone(), build_inputs(&config).unwrap(), Some(dir.path())).unwrap();
        for _ in 0..3 {
            first.step().unwrap();
        }
        drop(first);
        let mut resumed = Runner::resume(dir.path(), build_inputs(&config).unwrap(), None).unwrap();
        assert_eq!(resumed.t(), 3);
        resumed.run_to_end().unwrap();
        let out = resumed.finish().unwrap();
        let strip = |rs: &[IterationRecord]| rs.iter().map(IterationRecord::without_timing).collect::<Vec<_>>();
        assert_eq!(strip(&out.records), strip(&full.records));
        assert_eq!(out.library, full.library);
        assert_eq!(out.weights, full.weights);
        assert!(dir.path().join("summary.json").exists());
        assert!(Runner::create(config.clone(), build_inputs(&config).unwrap(), Some(dir.path())).is_err());
    }

    #[test]
    fn report_rows_best_so_far() {
        let mk = |t: u32, acc: f64| IterationRecord {
            t,
            library_version: t,
            library_size: 1,
            weights_ref: String::new(),
            confusion_ref: String::new(),
            accuracy: Some(acc),
            sampled_pairs: vec![],
            skipped_pairs: vec![],
            concepts_added: 0,
            columns_scored: 0,
            stop_reason: None,
            wall_time_ms: 0,
        };
        let rows = report_rows(&[mk(0, 0.5), mk(1, 0.7), mk(2, 0.6)]);
        let best: Vec<f64> = rows.iter().map(|r| r.best_accuracy.unwrap()).collect();
        assert_eq!(best, vec![0.5, 0.7, 0.7]);
    }
}
