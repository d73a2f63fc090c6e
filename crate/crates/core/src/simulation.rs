//! A planted-attribute world with a simulated scorer and language model.
//!
//! Classes are laid out on a chain: class `c` owns attributes
//! `c*(n-m) .. c*(n-m)+n`, so neighbours share `m` attributes and the
//! initial half-library leaves them tied. Every attribute has a phrase; the
//! simulated scorer reports a high score when an image has the attribute
//! named by a concept. Each class also has decoy phrases that name no
//! attribute at all. The simulated model proposes them before the useful
//! phrases, which is what makes history feedback matter.

use std::collections::{HashMap, HashSet};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::concept::{dedup_key, Concept, ConceptError, ConceptLibrary, DatasetManifest, LabelSet, ManifestItem};
use crate::evolution::{concepts_key, HISTORY_HEADER};
use crate::llm::{ChatMessage, ChatService, ServiceError};
use crate::scoring::{ColumnQuery, ScoreError, ScorerBackend};
use crate::util::digest64;

#[derive(Debug, Error)]
pub enum WorldError {
    #[error("infeasible world: {0}")]
    InfeasibleWorld(String),
    #[error("malformed world document: {0}")]
    Document(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldParams {
    pub n_classes: usize,
    pub n_attrs_per_class: usize,
    pub overlap_fraction: f64,
    pub noise_sigma: f64,
    pub base_hit: f64,
    pub base_miss: f64,
    pub images_per_class: usize,
    /// Phrases per class that name no attribute.
    pub decoys_per_class: usize,
    /// Probability that an image lacks one of its class's attributes.
    pub flip_prob: f64,
    pub seed: u64,
}

impl Default for WorldParams {
    fn default() -> Self {
        Self {
            n_classes: 10,
            n_attrs_per_class: 6,
            overlap_fraction: 0.5,
            noise_sigma: 0.05,
            base_hit: 0.8,
            base_miss: 0.2,
            images_per_class: 10,
            decoys_per_class: 3,
            flip_prob: 0.0,
            seed: 0,
        }
    }
}

impl WorldParams {
    /// 10 classes, 6 attributes each, half shared with each neighbour.
    pub fn acceptance(seed: u64) -> Self {
        Self { seed, ..Self::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimImage {
    pub image_id: String,
    pub label: usize,
    pub attrs: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticWorld {
    pub params: WorldParams,
    pub class_names: Vec<String>,
    /// Attribute ids per class, ascending.
    pub class_attrs: Vec<Vec<usize>>,
    /// Phrase of each attribute id.
    pub phrase_map: Vec<String>,
    pub decoys: Vec<Vec<String>>,
    pub images: Vec<SimImage>,
    #[serde(skip)]
    index: WorldIndex,
}

#[derive(Debug, Clone, Default, PartialEq)]
struct WorldIndex {
    phrase_to_attr: HashMap<String, usize>,
    image_pos: HashMap<String, usize>,
}

const COLORS: &[&str] = &[
    "red", "orange", "yellow", "green", "blue", "purple", "pink", "brown", "black", "white", "grey",
    "golden", "silver", "olive", "teal", "crimson", "ivory", "amber", "navy", "maroon",
];
const PARTS: &[&str] = &[
    "crown", "beak", "wing bars", "tail", "legs", "throat", "belly", "eye ring", "nape", "breast",
    "back", "forehead", "cheek patch", "rump", "flank", "bill tip", "wing tips", "collar", "mantle",
    "crest",
];
const TEXTURES: &[&str] =
    &["striped", "spotted", "glossy", "speckled", "mottled", "barred", "streaked", "banded", "dull", "iridescent"];

fn phrase_pool() -> Vec<String> {
    let mut out = Vec::with_capacity(COLORS.len() * PARTS.len() * (1 + TEXTURES.len()));
    for c in COLORS {
        for p in PARTS {
            out.push(format!("{c} {p}"));
        }
    }
    for t in TEXTURES {
        for c in COLORS {
            for p in PARTS {
                out.push(format!("{t} {c} {p}"));
            }
        }
    }
    out
}

fn class_name(c: usize, n_classes: usize) -> String {
    let width = n_classes.saturating_sub(1).to_string().len().max(2);
    format!("class_{c:0width$}")
}

pub fn generate_world(params: &WorldParams) -> Result<SyntheticWorld, WorldError> {
    let p = params;
    let infeasible = |msg: String| Err(WorldError::InfeasibleWorld(msg));
    if p.n_classes == 0 || p.n_attrs_per_class == 0 {
        return infeasible("need at least one class and one attribute per class".into());
    }
    if !(0.0..1.0).contains(&p.overlap_fraction) {
        return infeasible(format!("overlap_fraction {} outside [0, 1)", p.overlap_fraction));
    }
    if !(p.noise_sigma >= 0.0 && p.noise_sigma.is_finite()) || !(0.0..=1.0).contains(&p.flip_prob) {
        return infeasible("noise_sigma must be finite and non-negative, flip_prob in [0, 1]".into());
    }
    let n = p.n_attrs_per_class;
    let m = (p.overlap_fraction * n as f64).round() as usize;
    if m >= n {
        return infeasible(format!("{m} shared of {n} attributes leaves neighbouring classes identical"));
    }
    let step = n - m;
    let n_attrs = (p.n_classes - 1) * step + n;
    let needed = n_attrs + p.n_classes * p.decoys_per_class;
    let mut pool = phrase_pool();
    if needed > pool.len() {
        return infeasible(format!("{needed} phrases needed, only {} available", pool.len()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    pool.shuffle(&mut rng);
    let phrase_map: Vec<String> = pool[..n_attrs].to_vec();
    let decoys: Vec<Vec<String>> = pool[n_attrs..needed].chunks(p.decoys_per_class.max(1)).map(<[String]>::to_vec).collect();
    let decoys = if p.decoys_per_class == 0 { vec![Vec::new(); p.n_classes] } else { decoys };
    let class_attrs: Vec<Vec<usize>> = (0..p.n_classes).map(|c| (c * step..c * step + n).collect()).collect();
    let class_names: Vec<String> = (0..p.n_classes).map(|c| class_name(c, p.n_classes)).collect();
    let width = p.images_per_class.saturating_sub(1).to_string().len().max(2);
    let mut images = Vec::with_capacity(p.n_classes * p.images_per_class);
    for (c, attrs) in class_attrs.iter().enumerate() {
        for k in 0..p.images_per_class {
            let kept = attrs.iter().copied().filter(|_| p.flip_prob == 0.0 || !rng.random_bool(p.flip_prob)).collect();
            images.push(SimImage { image_id: format!("img_{}_{k:0width$}", &class_names[c][6..]), label: c, attrs: kept });
        }
    }
    Ok(SyntheticWorld { params: p.clone(), class_names, class_attrs, phrase_map, decoys, images, index: WorldIndex::default() }
        .indexed())
}

impl SyntheticWorld {
    fn indexed(mut self) -> Self {
        self.index = WorldIndex {
            phrase_to_attr: self.phrase_map.iter().enumerate().map(|(a, s)| (dedup_key(s), a)).collect(),
            image_pos: self.images.iter().enumerate().map(|(i, im)| (im.image_id.clone(), i)).collect(),
        };
        self
    }

    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn labels(&self) -> LabelSet {
        LabelSet::new(self.class_names.clone()).expect("generated names are distinct")
    }

    pub fn manifest(&self) -> DatasetManifest {
        let items = self
            .images
            .iter()
            .map(|im| ManifestItem {
                image_id: im.image_id.clone(),
                image_ref: format!("sim://{}", im.image_id),
                label: Some(im.label),
            })
            .collect();
        DatasetManifest::new(items, &self.labels()).expect("generated manifest is valid")
    }

    pub fn attr_of(&self, phrase: &str) -> Option<usize> {
        self.index.phrase_to_attr.get(&dedup_key(phrase)).copied()
    }

    /// Attribute phrases of class `c` in salience order: the first
    /// `n_init` attributes, then the decoys, then the remaining attributes.
    pub fn belief(&self, c: usize, n_init: usize) -> Vec<String> {
        let attrs = &self.class_attrs[c];
        let n_init = n_init.min(attrs.len());
        let mut out: Vec<String> = attrs[..n_init].iter().map(|&a| self.phrase_map[a].clone()).collect();
        out.extend(self.decoys[c].iter().cloned());
        out.extend(attrs[n_init..].iter().map(|&a| self.phrase_map[a].clone()));
        out
    }

    /// Every phrase the world knows: attribute phrases then decoys.
    pub fn all_phrases(&self) -> Vec<String> {
        self.phrase_map.iter().chain(self.decoys.iter().flatten()).cloned().collect()
    }

    /// Library with the first `n_init` attribute phrases of every class.
    pub fn initial_library(&self, n_init: usize) -> Result<ConceptLibrary, ConceptError> {
        let per_class = self
            .class_attrs
            .iter()
            .map(|attrs| attrs.iter().take(n_init.max(1)).map(|&a| Concept::initial(&self.phrase_map[a])).collect())
            .collect::<Result<Vec<_>, _>>()?;
        ConceptLibrary::new(self.labels(), per_class, 0)
    }

    /// Library with every attribute phrase of every class.
    pub fn oracle_library(&self) -> Result<ConceptLibrary, ConceptError> {
        self.initial_library(self.params.n_attrs_per_class)
    }

    /// `base_hit` if the concept names an attribute of the image, else
    /// `base_miss`, plus Gaussian noise seeded per (world, image, concept).
    pub fn simulated_score(&self, image_id: &str, concept_text: &str) -> Option<f64> {
        let image = &self.images[*self.index.image_pos.get(image_id)?];
        let hit = self.attr_of(concept_text).is_some_and(|a| image.attrs.contains(&a));
        let base = if hit { self.params.base_hit } else { self.params.base_miss };
        if self.params.noise_sigma == 0.0 {
            return Some(base);
        }
        let key = dedup_key(concept_text);
        let seed = digest64(&[&self.params.seed.to_le_bytes(), image_id.as_bytes(), key.as_bytes()]);
        let noise = Normal::new(0.0, self.params.noise_sigma).expect("sigma validated");
        Some(base + noise.sample(&mut ChaCha8Rng::seed_from_u64(seed)))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("world serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, WorldError> {
        let world: Self = serde_json::from_str(text).map_err(|e| WorldError::Document(e.to_string()))?;
        let keys: HashSet<String> = world.phrase_map.iter().map(|s| dedup_key(s)).collect();
        if keys.len() != world.phrase_map.len() {
            return Err(WorldError::Document("phrase_map is not invertible".into()));
        }
        if world.class_attrs.len() != world.class_names.len() || world.decoys.len() != world.class_names.len() {
            return Err(WorldError::Document("per-class tables disagree in length".into()));
        }
        Ok(world.indexed())
    }
}

/// Scores concepts against the world's images without any model.
pub struct SimulatedScorer {
    world: SyntheticWorld,
}

impl SimulatedScorer {
    pub fn new(world: SyntheticWorld) -> Self {
        Self { world }
    }
}

impl ScorerBackend for SimulatedScorer {
    fn backbone_id(&self) -> String {
        format!("simulated:{:016x}", self.world.params.seed)
    }

    fn score_columns(&self, images: &[ManifestItem], queries: &[ColumnQuery]) -> Result<Vec<Vec<f32>>, ScoreError> {
        queries
            .iter()
            .map(|q| {
                images
                    .iter()
                    .map(|im| {
                        self.world
                            .simulated_score(&im.image_id, &q.concept_text)
                            .map(|v| v as f32)
                            .ok_or_else(|| ScoreError::Shape(format!("unknown image {:?}", im.image_id)))
                    })
                    .collect()
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimulatedLlmMode {
    /// Proposes discriminative phrases in salience order, skipping phrases
    /// listed in the prompt's history blocks.
    Discriminative,
    /// Proposes one uniformly random unused phrase per class.
    RandomPhrase,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimulatedLlmConfig {
    pub mode: SimulatedLlmMode,
    pub proposals_per_class: usize,
    /// Fraction of a class's attributes returned for an initial-concept query.
    pub init_fraction: f64,
}

impl Default for SimulatedLlmConfig {
    fn default() -> Self {
        Self { mode: SimulatedLlmMode::Discriminative, proposals_per_class: 1, init_fraction: 0.5 }
    }
}

/// A language model that knows the world's ground truth.
///
/// It reads class names, current concept lists and earlier proposals back
/// out of the prompt text, so it sees exactly what a real model would.
pub struct SimulatedLlm {
    world: SyntheticWorld,
    config: SimulatedLlmConfig,
}

/// What the simulated model extracts from a disambiguation prompt.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParsedPrompt {
    pub classes: Vec<String>,
    pub current: Vec<Vec<String>>,
    pub proposed: Vec<String>,
}

pub fn parse_disambiguation_prompt(text: &str) -> Option<ParsedPrompt> {
    let mut parsed = ParsedPrompt::default();
    let mut in_history = false;
    // Some(index) while reading a current-concepts list
    let mut list: Option<usize> = None;
    for line in text.lines() {
        if line == HISTORY_HEADER {
            in_history = true;
            list = None;
            continue;
        }
        if !in_history {
            if let Some(rest) = line.strip_prefix("Current concepts for \"") {
                let name = rest.strip_suffix("\":")?;
                parsed.classes.push(name.to_string());
                parsed.current.push(Vec::new());
                list = Some(parsed.current.len() - 1);
            } else if let (Some(idx), Some(item)) = (list, line.strip_prefix("- ")) {
                parsed.current[idx].push(item.to_string());
            } else if line != "(none)" {
                list = None;
            }
        } else if let Some(item) = line.strip_prefix("    - ") {
            parsed.proposed.push(item.to_string());
        }
    }
    (parsed.classes.len() == 2).then_some(parsed)
}

impl SimulatedLlm {
    pub fn new(world: SyntheticWorld, config: SimulatedLlmConfig) -> Self {
        Self { world, config }
    }

    pub fn world(&self) -> &SyntheticWorld {
        &self.world
    }

    fn n_init(&self) -> usize {
        let n = self.world.params.n_attrs_per_class;
        ((self.config.init_fraction * n as f64).round() as usize).clamp(1, n)
    }

    fn class_index(&self, name: &str) -> Option<usize> {
        self.world.class_names.iter().position(|c| c == name)
    }

    fn init_reply(&self, prompt: &str) -> Result<String, ServiceError> {
        let class = (0..self.world.n_classes())
            .filter(|&c| prompt.contains(&self.world.class_names[c]))
            .max_by_key(|&c| self.world.class_names[c].len())
            .ok_or_else(|| ServiceError::Decode("no known class named in prompt".into()))?;
        let concepts: Vec<String> =
            self.world.class_attrs[class][..self.n_init()].iter().map(|&a| self.world.phrase_map[a].clone()).collect();
        Ok(json!({ "concepts": concepts }).to_string())
    }

    fn proposals(&self, parsed: &ParsedPrompt, own: usize, other: usize, slot: usize, prompt: &str) -> Vec<String> {
        let present: HashSet<String> = parsed.current[slot].iter().map(|s| dedup_key(s)).collect();
        let tried: HashSet<String> = parsed.proposed.iter().map(|s| dedup_key(s)).collect();
        match self.config.mode {
            SimulatedLlmMode::Discriminative => {
                let theirs: HashSet<String> =
                    self.world.belief(other, self.n_init()).iter().map(|s| dedup_key(s)).collect();
                self.world
                    .belief(own, self.n_init())
                    .into_iter()
                    .filter(|p| !theirs.contains(&dedup_key(p)) && !tried.contains(&dedup_key(p)))
                    .take(self.config.proposals_per_class)
                    .filter(|p| !present.contains(&dedup_key(p)))
                    .collect()
            }
            SimulatedLlmMode::RandomPhrase => {
                let unused: Vec<String> = self
                    .world
                    .all_phrases()
                    .into_iter()
                    .filter(|p| !present.contains(&dedup_key(p)) && !tried.contains(&dedup_key(p)))
                    .collect();
                let seed = digest64(&[prompt.as_bytes(), &(slot as u64).to_le_bytes()]);
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                unused.choose_multiple(&mut rng, self.config.proposals_per_class).cloned().collect()
            }
        }
    }

    fn evol_reply(&self, prompt: &str, parsed: &ParsedPrompt) -> Result<String, ServiceError> {
        let a = self.class_index(&parsed.classes[0]);
        let b = self.class_index(&parsed.classes[1]);
        let (Some(a), Some(b)) = (a, b) else {
            return Ok(json!({
                "reasoning": "I do not recognize these classes.",
                concepts_key(&parsed.classes[0]): [],
                concepts_key(&parsed.classes[1]): [],
            })
            .to_string());
        };
        let for_a = self.proposals(parsed, a, b, 0, prompt);
        let for_b = self.proposals(parsed, b, a, 1, prompt);
        Ok(json!({
            "reasoning": format!("Looking for visual traits that separate {} from {}.", parsed.classes[0], parsed.classes[1]),
            concepts_key(&parsed.classes[0]): for_a,
            concepts_key(&parsed.classes[1]): for_b,
        })
        .to_string())
    }
}

impl ChatService for SimulatedLlm {
    fn complete(&self, messages: &[ChatMessage]) -> Result<String, ServiceError> {
        let prompt = messages
            .iter()
            .find(|m| m.role == "user")
            .map(|m| m.content.as_str())
            .ok_or_else(|| ServiceError::Decode("no user message".into()))?;
        match parse_disambiguation_prompt(prompt) {
            Some(parsed) => self.evol_reply(prompt, &parsed),
            None => self.init_reply(prompt),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapter::{accuracy, evaluate, zero_shot_weights};
    use crate::evolution::{build_disambiguation_prompt, concept_evol, EvolOptions, HistoryRound};
    use crate::scoring::{score, ScoreCache, DEFAULT_SCORE_TEMPLATE};

    fn small() -> SyntheticWorld {
        generate_world(&WorldParams { n_classes: 2, n_attrs_per_class: 4, ..WorldParams::default() }).unwrap()
    }

    #[test]
    fn two_classes_share_half() {
        let w = small();
        let a: HashSet<_> = w.class_attrs[0].iter().collect();
        let b: HashSet<_> = w.class_attrs[1].iter().collect();
        assert_eq!(a.intersection(&b).count(), 2);
        assert_eq!(a.symmetric_difference(&b).count(), 4);
    }

    #[test]
    fn zero_overlap_is_disjoint() {
        let w = generate_world(&WorldParams { overlap_fraction: 0.0, ..WorldParams::default() }).unwrap();
        for i in 0..w.n_classes() {
            for j in (i + 1)..w.n_classes() {
                assert!(w.class_attrs[i].iter().all(|a| !w.class_attrs[j].contains(a)));
            }
        }
    }

    #[test]
    fn single_class_is_fine() {
        let w = generate_world(&WorldParams { n_classes: 1, ..WorldParams::default() }).unwrap();
        assert_eq!(w.n_classes(), 1);
    }

    #[test]
    fn infeasible_parameters() {
        for p in [
            WorldParams { overlap_fraction: 1.0, ..WorldParams::default() },
            WorldParams { overlap_fraction: 0.95, ..WorldParams::default() },
            WorldParams { n_attrs_per_class: 0, ..WorldParams::default() },
            WorldParams { n_classes: 0, ..WorldParams::default() },
            WorldParams { n_classes: 2000, ..WorldParams::default() },
        ] {
            assert!(matches!(generate_world(&p), Err(WorldError::InfeasibleWorld(_))), "{p:?}");
        }
    }

    #[test]
    fn separable_and_invertible() {
        let w = generate_world(&WorldParams::acceptance(3)).unwrap();
        for i in 0..w.n_classes() {
            for j in (i + 1)..w.n_classes() {
                assert_ne!(w.class_attrs[i], w.class_attrs[j]);
            }
        }
        for (a, p) in w.phrase_map.iter().enumerate() {
            assert_eq!(w.attr_of(p), Some(a));
        }
        for d in w.decoys.iter().flatten() {
            assert_eq!(w.attr_of(d), None);
        }
    }

    #[test]
    fn scores_hit_miss_and_noise() {
        let w = generate_world(&WorldParams { noise_sigma: 0.0, ..WorldParams::acceptance(1) }).unwrap();
        let img = &w.images[0];
        let own = &w.phrase_map[img.attrs[0]];
        assert_eq!(w.simulated_score(&img.image_id, own), Some(0.8));
        assert_eq!(w.simulated_score(&img.image_id, "a meaningless concept"), Some(0.2));
        assert_eq!(w.simulated_score("nope", own), None);
        let noisy = generate_world(&WorldParams::acceptance(1)).unwrap();
        let s1 = noisy.simulated_score(&img.image_id, own).unwrap();
        assert_eq!(s1, noisy.simulated_score(&img.image_id, &own.to_uppercase()).unwrap());
        assert!((s1 - 0.8).abs() < 0.3 && s1 != 0.8);
    }

    #[test]
    fn json_round_trip() {
        let w = generate_world(&WorldParams::acceptance(5)).unwrap();
        let back = SyntheticWorld::from_json(&w.to_json()).unwrap();
        assert_eq!(back, w);
        assert_eq!(back.simulated_score(&w.images[3].image_id, &w.phrase_map[2]), w.simulated_score(&w.images[3].image_id, &w.phrase_map[2]));
    }

    fn zero_shot_accuracy(w: &SyntheticWorld, lib: &ConceptLibrary) -> f64 {
        let scorer = SimulatedScorer::new(w.clone());
        let manifest = w.manifest();
        let mut cache = ScoreCache::new(scorer.backbone_id(), "sim");
        let (s, _) = score(&scorer, &manifest, lib, DEFAULT_SCORE_TEMPLATE, &mut cache, 2).unwrap();
        let pred = evaluate(&zero_shot_weights(lib), &s).unwrap();
        accuracy(&pred, &manifest.labels().unwrap())
    }

    #[test]
    fn oracle_library_is_perfect_without_noise() {
        let w = generate_world(&WorldParams { noise_sigma: 0.0, ..WorldParams::acceptance(2) }).unwrap();
        assert_eq!(zero_shot_accuracy(&w, &w.oracle_library().unwrap()), 1.0);
    }

    #[test]
    fn half_library_is_confused() {
        let w = generate_world(&WorldParams::acceptance(2)).unwrap();
        let acc = zero_shot_accuracy(&w, &w.initial_library(3).unwrap());
        assert!((0.3..=0.7).contains(&acc), "{acc}");
    }

    fn ask(llm: &SimulatedLlm, lib: &ConceptLibrary, i: usize, j: usize, rounds: &[HistoryRound]) -> (Vec<String>, Vec<String>) {
        let doc = build_disambiguation_prompt(
            (i, j),
            1,
            lib.labels().name(i),
            lib.labels().name(j),
            &lib.class_texts(i),
            &lib.class_texts(j),
            rounds,
        );
        let out = concept_evol(llm, &doc, &EvolOptions::default()).unwrap();
        let t = |cs: &[Concept]| cs.iter().map(|c| c.text().to_string()).collect();
        (t(&out.new_i), t(&out.new_j))
    }

    #[test]
    fn discriminative_mode_walks_decoys_then_attributes() {
        let w = generate_world(&WorldParams::acceptance(4)).unwrap();
        let llm = SimulatedLlm::new(w.clone(), SimulatedLlmConfig::default());
        let lib = w.initial_library(3).unwrap();
        let (a, b) = ask(&llm, &lib, 0, 1, &[]);
        assert!(a.is_empty());
        assert_eq!(b, vec![w.decoys[1][0].clone()]);
        let round = |t: u32, text: &str| HistoryRound {
            iteration: t,
            proposed_i: vec![],
            proposed_j: vec![Concept::initial(text).unwrap()],
            confusion_before: 1.0,
            followup_r: Some(1.0),
        };
        let mut current = lib.clone();
        let mut rounds = Vec::new();
        for (t, decoy) in w.decoys[1].iter().enumerate() {
            let (_, b) = ask(&llm, &current, 0, 1, &rounds);
            assert_eq!(&b, std::slice::from_ref(decoy));
            current = current.merge_concepts(1, &[Concept::initial(decoy).unwrap()]);
            rounds.push(round(t as u32, decoy));
        }
        let (_, fix) = ask(&llm, &current, 0, 1, &rounds);
        assert_eq!(fix, vec![w.phrase_map[w.class_attrs[1][3]].clone()]);
        let lib1 = lib.merge_concepts(1, &[Concept::initial(&w.decoys[1][0]).unwrap()]);
        // without history the model repeats its first idea, which is now present
        let (_, stuck) = ask(&llm, &lib1, 0, 1, &[]);
        assert!(stuck.is_empty());
    }

    #[test]
    fn distant_pairs_add_nothing() {
        let w = generate_world(&WorldParams::acceptance(4)).unwrap();
        let llm = SimulatedLlm::new(w.clone(), SimulatedLlmConfig::default());
        let lib = w.initial_library(3).unwrap();
        let (a, b) = ask(&llm, &lib, 2, 5, &[]);
        assert!(a.is_empty() && b.is_empty());
    }

    #[test]
    fn random_phrase_mode_is_seeded_and_unused() {
        let w = generate_world(&WorldParams::acceptance(4)).unwrap();
        let cfg = SimulatedLlmConfig { mode: SimulatedLlmMode::RandomPhrase, ..Default::default() };
        let llm = SimulatedLlm::new(w.clone(), cfg);
        let lib = w.initial_library(3).unwrap();
        let first = ask(&llm, &lib, 0, 1, &[]);
        assert_eq!(first, ask(&llm, &lib, 0, 1, &[]));
        assert_eq!((first.0.len(), first.1.len()), (1, 1));
        assert!(!lib.contains(0, &first.0[0]));
    }

    #[test]
    fn init_reply_returns_leading_attributes() {
        let w = generate_world(&WorldParams::acceptance(4)).unwrap();
        let llm = SimulatedLlm::new(w.clone(), SimulatedLlmConfig::default());
        let lib = crate::concept::init_concepts(
            &w.labels(),
            &llm,
            crate::concept::DEFAULT_INIT_TEMPLATE,
            &crate::concept::InitOptions::default(),
        )
        .unwrap();
        assert_eq!(lib, w.initial_library(3).unwrap());
    }

    #[test]
    fn prompt_parser_reads_rendered_prompt() {
        let lib = generate_world(&WorldParams::acceptance(0)).unwrap().initial_library(3).unwrap();
        let round = HistoryRound {
            iteration: 2,
            proposed_i: vec![Concept::initial("red crown").unwrap()],
            proposed_j: vec![],
            confusion_before: 0.4,
            followup_r: Some(0.2),
        };
        let doc = build_disambiguation_prompt((3, 4), 3, "class_03", "class_04", &lib.class_texts(3), &[], &[round]);
        let parsed = parse_disambiguation_prompt(&doc.render()).unwrap();
        assert_eq!(parsed.classes, vec!["class_03", "class_04"]);
        assert_eq!(parsed.current[0], lib.class_texts(3));
        assert!(parsed.current[1].is_empty());
        assert_eq!(parsed.proposed, vec!["red crown"]);
    }
}
