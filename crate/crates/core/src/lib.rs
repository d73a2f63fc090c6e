//! Concept-library evolution for concept-bottleneck image classifiers.
//!
//! The engine alternates between two steps. A linear adapter is fitted over
//! vision-language concept scores, and the classes it confuses most are
//! handed to a language model that proposes new discriminative concepts.
//! The proposals, and how much each one reduced confusion afterwards, are
//! kept per class pair and fed back into later prompts.
//!
//! Module map:
//!
//! - [`concept`]: labels, concepts, the versioned library, dataset manifests.
//! - [`llm`]: chat-completion service interface and an OpenAI-compatible client.
//! - [`scoring`]: concept-image score matrices, backends and the incremental cache.
//! - [`adapter`]: zero-shot and trained bottleneck weights, evaluation, accuracy.
//! - [`heuristics`]: pairwise class-confusion scores from prediction logits.
//! - [`evolution`]: pair sampling with repeat decay, history bank, prompts, parsing.
//! - [`simulation`]: a planted-attribute world with simulated scorer and LLM.
//! - [`orchestrator`]: the outer loop, configuration, checkpoints and reports.

pub mod adapter;
pub mod concept;
pub mod evolution;
pub mod heuristics;
pub mod llm;
pub mod orchestrator;
pub mod scoring;
pub mod simulation;
mod util;

pub use adapter::{AdapterMode, AdapterWeights, FitConfig, PredictionMatrix};
pub use concept::{Concept, ConceptId, ConceptLibrary, ConceptOrigin, DatasetManifest, LabelSet};
pub use evolution::{HistoryBank, HistoryRound, PairSample, PromptDocument};
pub use heuristics::{ConfusionReport, Heuristic};
pub use llm::{ChatMessage, ChatService};
pub use orchestrator::{IterationRecord, RunConfig};
pub use scoring::{ScoreMatrix, ScorerBackend};
pub use simulation::{SimulatedLlm, SyntheticWorld, WorldParams};
