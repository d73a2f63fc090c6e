//! Labels, concepts, the versioned concept library and dataset manifests.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::io::BufRead;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::llm::{ChatMessage, ChatService, ServiceError};
use crate::util::{digest64, extract_json_object};

pub const DEFAULT_MAX_CONCEPT_CHARS: usize = 250;
pub const DEFAULT_MIN_INITIAL_CONCEPTS: usize = 3;

#[derive(Debug, Error)]
pub enum ConceptError {
    #[error("invalid label set: {0}")]
    InvalidLabels(String),
    #[error("invalid concept: {0}")]
    InvalidConcept(String),
    #[error("service error while querying class {class:?}: {source}")]
    Service {
        class: String,
        #[source]
        source: ServiceError,
    },
    #[error("unparseable model output for class {class:?} after {attempts} attempts: {message}")]
    Parse { class: String, attempts: usize, message: String },
    #[error("model returned no valid concepts for class {0:?}")]
    EmptyClass(String),
    #[error("class {class:?} has {got} valid concepts, need at least {need}")]
    InsufficientConcepts { class: String, got: usize, need: usize },
    #[error("template is missing the {0} placeholder")]
    MissingPlaceholder(&'static str),
    #[error("malformed library document: {0}")]
    Document(String),
    #[error("manifest line {line}: {message}")]
    Manifest { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Ordered, duplicate-free class names. Indices are stable for the lifetime
/// of a run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct LabelSet(Vec<String>);

impl LabelSet {
    pub fn new<I, S>(labels: I) -> Result<Self, ConceptError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let labels: Vec<String> = labels.into_iter().map(Into::into).collect();
        if labels.is_empty() {
            return Err(ConceptError::InvalidLabels("label set is empty".into()));
        }
        let mut seen = HashSet::new();
        for label in &labels {
            if label.trim().is_empty() {
                return Err(ConceptError::InvalidLabels("blank label".into()));
            }
            if !seen.insert(label.as_str()) {
                return Err(ConceptError::InvalidLabels(format!("duplicate label {label:?}")));
            }
        }
        Ok(Self(labels))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, index: usize) -> Option<&str> {
        self.0.get(index).map(String::as_str)
    }

    pub fn name(&self, index: usize) -> &str {
        &self.0[index]
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.0.iter().position(|l| l == label)
    }

    pub fn iter(&self) -> impl Iterator<Item = &str> {
        self.0.iter().map(String::as_str)
    }

    pub fn as_slice(&self) -> &[String] {
        &self.0
    }
}

impl TryFrom<Vec<String>> for LabelSet {
    type Error = ConceptError;

    fn try_from(value: Vec<String>) -> Result<Self, Self::Error> {
        Self::new(value)
    }
}

impl From<LabelSet> for Vec<String> {
    fn from(value: LabelSet) -> Self {
        value.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConceptOrigin {
    Initial,
    Evolved { iteration: u32, pair: (usize, usize) },
}

/// Lowercased text with internal whitespace collapsed; two concepts of one
/// class are duplicates iff their keys are equal.
pub fn dedup_key(text: &str) -> String {
    text.split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Concept {
    text: String,
    origin: ConceptOrigin,
    created_at_iteration: u32,
}

impl Concept {
    /// Trims `text` and rejects it if empty or longer than `max_chars`
    /// characters. Over-long text is rejected, never truncated.
    pub fn new(
        text: &str,
        origin: ConceptOrigin,
        created_at_iteration: u32,
        max_chars: usize,
    ) -> Result<Self, ConceptError> {
        let text = text.trim();
        if text.is_empty() {
            return Err(ConceptError::InvalidConcept("empty concept text".into()));
        }
        let n = text.chars().count();
        if n > max_chars {
            return Err(ConceptError::InvalidConcept(format!(
                "concept has {n} characters, limit is {max_chars}"
            )));
        }
        Ok(Self { text: text.to_string(), origin, created_at_iteration })
    }

    pub fn initial(text: &str) -> Result<Self, ConceptError> {
        Self::new(text, ConceptOrigin::Initial, 0, DEFAULT_MAX_CONCEPT_CHARS)
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    pub fn origin(&self) -> ConceptOrigin {
        self.origin
    }

    pub fn created_at_iteration(&self) -> u32 {
        self.created_at_iteration
    }

    pub fn key(&self) -> String {
        dedup_key(&self.text)
    }
}

/// Stable identifier of a (class, concept) column.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ConceptId(pub u64);

impl ConceptId {
    pub fn of(class_label: &str, text: &str) -> Self {
        Self(digest64(&[class_label.as_bytes(), dedup_key(text).as_bytes()]))
    }
}

impl fmt::Display for ConceptId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:016x}", self.0)
    }
}

impl Serialize for ConceptId {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for ConceptId {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        u64::from_str_radix(&s, 16).map(ConceptId).map_err(serde::de::Error::custom)
    }
}

/// Per-class concept lists plus the iteration index that produced them.
///
/// Concepts are only ever appended; a later version is a per-class superset
/// of an earlier one.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConceptLibrary {
    labels: LabelSet,
    per_class: Vec<Vec<Concept>>,
    version: u32,
}

impl ConceptLibrary {
    /// Builds a library, dropping within-class duplicates. Fails if any
    /// class ends up empty.
    pub fn new(
        labels: LabelSet,
        per_class: Vec<Vec<Concept>>,
        version: u32,
    ) -> Result<Self, ConceptError> {
        if per_class.len() != labels.len() {
            return Err(ConceptError::Document(format!(
                "{} concept lists for {} labels",
                per_class.len(),
                labels.len()
            )));
        }
        let per_class: Vec<Vec<Concept>> = per_class.into_iter().map(dedup_list).collect();
        for (i, list) in per_class.iter().enumerate() {
            if list.is_empty() {
                return Err(ConceptError::EmptyClass(labels.name(i).to_string()));
            }
        }
        Ok(Self { labels, per_class, version })
    }

    pub fn labels(&self) -> &LabelSet {
        &self.labels
    }

    pub fn version(&self) -> u32 {
        self.version
    }

    pub fn with_version(mut self, version: u32) -> Self {
        self.version = version;
        self
    }

    pub fn n_classes(&self) -> usize {
        self.per_class.len()
    }

    pub fn class_concepts(&self, class_idx: usize) -> &[Concept] {
        &self.per_class[class_idx]
    }

    pub fn class_texts(&self, class_idx: usize) -> Vec<String> {
        self.per_class[class_idx].iter().map(|c| c.text.clone()).collect()
    }

    /// Total concept count |C|.
    pub fn len(&self) -> usize {
        self.per_class.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn contains(&self, class_idx: usize, text: &str) -> bool {
        let key = dedup_key(text);
        self.per_class[class_idx].iter().any(|c| c.key() == key)
    }

    /// Class-major flattening: `(class index, concept)` in column order.
    pub fn flatten(&self) -> impl Iterator<Item = (usize, &Concept)> {
        self.per_class
            .iter()
            .enumerate()
            .flat_map(|(i, list)| list.iter().map(move |c| (i, c)))
    }

    /// Column identifiers in flattening order.
    pub fn concept_ids(&self) -> Vec<ConceptId> {
        self.flatten()
            .map(|(i, c)| ConceptId::of(self.labels.name(i), c.text()))
            .collect()
    }

    /// Class index owning each column, in flattening order.
    pub fn column_classes(&self) -> Vec<usize> {
        self.flatten().map(|(i, _)| i).collect()
    }

    /// Appends `new` to class `class_idx`, silently dropping duplicates of
    /// existing concepts and of each other. The input is left untouched and
    /// the version is not bumped.
    ///
    /// Panics if `class_idx` is out of range.
    pub fn merge_concepts(&self, class_idx: usize, new: &[Concept]) -> Self {
        assert!(class_idx < self.n_classes(), "class index {class_idx} out of range");
        let mut out = self.clone();
        let list = &mut out.per_class[class_idx];
        let mut keys: HashSet<String> = list.iter().map(Concept::key).collect();
        for concept in new {
            if keys.insert(concept.key()) {
                list.push(concept.clone());
            }
        }
        out
    }

    /// Canonical JSON document: keys sorted, byte-stable for equal content.
    pub fn to_json(&self) -> String {
        let classes: BTreeMap<&str, &Vec<Concept>> =
            self.labels.iter().zip(self.per_class.iter()).collect();
        let doc = json!({
            "version": self.version,
            "labels": self.labels,
            "classes": classes,
        });
        // serde_json's default map is ordered by key, so this is canonical.
        let value: Value = serde_json::to_value(&doc).expect("library serializes");
        serde_json::to_string_pretty(&value).expect("library serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, ConceptError> {
        #[derive(Deserialize)]
        struct Doc {
            version: u32,
            labels: Option<LabelSet>,
            classes: BTreeMap<String, Vec<Concept>>,
        }
        let doc: Doc = serde_json::from_str(text)?;
        let labels = match doc.labels {
            Some(labels) => labels,
            None => LabelSet::new(doc.classes.keys().cloned())?,
        };
        let mut classes = doc.classes;
        let mut per_class = Vec::with_capacity(labels.len());
        for label in labels.iter() {
            let list = classes
                .remove(label)
                .ok_or_else(|| ConceptError::Document(format!("no concepts for label {label:?}")))?;
            per_class.push(list);
        }
        if let Some(extra) = classes.keys().next() {
            return Err(ConceptError::Document(format!("class {extra:?} is not in labels")));
        }
        Self::new(labels, per_class, doc.version)
    }
}

fn dedup_list(list: Vec<Concept>) -> Vec<Concept> {
    let mut seen = HashSet::new();
    list.into_iter().filter(|c| seen.insert(c.key())).collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestItem {
    pub image_id: String,
    pub image_ref: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct DatasetManifest {
    items: Vec<ManifestItem>,
}

impl DatasetManifest {
    pub fn new(items: Vec<ManifestItem>, labels: &LabelSet) -> Result<Self, ConceptError> {
        let mut seen = HashSet::new();
        for (line, item) in items.iter().enumerate() {
            if !seen.insert(item.image_id.as_str()) {
                return Err(ConceptError::Manifest {
                    line: line + 1,
                    message: format!("duplicate image_id {:?}", item.image_id),
                });
            }
            if let Some(label) = item.label {
                if label >= labels.len() {
                    return Err(ConceptError::Manifest {
                        line: line + 1,
                        message: format!("label {label} out of range"),
                    });
                }
            }
        }
        Ok(Self { items })
    }

    /// Reads one `{image_id, image_ref, label?}` object per line. `label` may
    /// be a class index or a class name.
    pub fn from_jsonl<R: BufRead>(reader: R, labels: &LabelSet) -> Result<Self, ConceptError> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum RawLabel {
            Index(usize),
            Name(String),
        }
        #[derive(Deserialize)]
        struct RawItem {
            image_id: String,
            image_ref: String,
            #[serde(default)]
            label: Option<RawLabel>,
        }

        let mut items = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let raw: RawItem = serde_json::from_str(&line)
                .map_err(|e| ConceptError::Manifest { line: i + 1, message: e.to_string() })?;
            let label = match raw.label {
                None => None,
                Some(RawLabel::Index(idx)) => Some(idx),
                Some(RawLabel::Name(name)) => Some(labels.index_of(&name).ok_or_else(|| {
                    ConceptError::Manifest { line: i + 1, message: format!("unknown label {name:?}") }
                })?),
            };
            items.push(ManifestItem { image_id: raw.image_id, image_ref: raw.image_ref, label });
        }
        Self::new(items, labels)
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for item in &self.items {
            out.push_str(&serde_json::to_string(item).expect("manifest item serializes"));
            out.push('\n');
        }
        out
    }

    pub fn items(&self) -> &[ManifestItem] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// All labels, or `None` if any item is unlabeled.
    pub fn labels(&self) -> Option<Vec<usize>> {
        self.items.iter().map(|i| i.label).collect()
    }
}

#[derive(Debug, Clone)]
pub struct InitOptions {
    pub max_concept_chars: usize,
    pub min_initial_concepts: usize,
    /// Attempts per class before a malformed reply becomes a hard error.
    pub retry_budget: usize,
    pub max_inflight: usize,
}

impl Default for InitOptions {
    fn default() -> Self {
        Self {
            max_concept_chars: DEFAULT_MAX_CONCEPT_CHARS,
            min_initial_concepts: DEFAULT_MIN_INITIAL_CONCEPTS,
            retry_budget: 3,
            max_inflight: 8,
        }
    }
}

pub const DEFAULT_INIT_TEMPLATE: &str = "What are useful visual features for distinguishing a \"{class}\" in a photo? \
List short descriptive phrases of its appearance (shape, color, texture, parts, context). \
Respond with a single JSON object of the form {\"concepts\": [\"...\", \"...\"]} and nothing else.";

/// Parses an initial-concept reply: `{"concepts": [...]}` or a bare array.
pub fn parse_concept_list(text: &str) -> Result<Vec<String>, String> {
    if let Some(obj) = extract_json_object(text) {
        if let Ok(value) = serde_json::from_str::<Value>(obj) {
            if let Some(list) = value.get("concepts").and_then(Value::as_array) {
                return string_array(list);
            }
        }
    }
    let start = text.find('[').ok_or("no JSON list in reply")?;
    let end = text.rfind(']').ok_or("no JSON list in reply")?;
    if end < start {
        return Err("no JSON list in reply".into());
    }
    let value: Value = serde_json::from_str(&text[start..=end]).map_err(|e| e.to_string())?;
    string_array(value.as_array().ok_or("expected a JSON list")?)
}

fn string_array(values: &[Value]) -> Result<Vec<String>, String> {
    values
        .iter()
        .map(|v| v.as_str().map(str::to_string).ok_or_else(|| format!("non-string concept {v}")))
        .collect()
}

/// Queries the model once per class for an initial concept list.
///
/// Requests fan out over at most `opts.max_inflight` workers; the library is
/// assembled in class order regardless of completion order.
pub fn init_concepts(
    labels: &LabelSet,
    llm: &dyn ChatService,
    prompt_template: &str,
    opts: &InitOptions,
) -> Result<ConceptLibrary, ConceptError> {
    if !prompt_template.contains("{class}") {
        return Err(ConceptError::MissingPlaceholder("{class}"));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.max_inflight.max(1))
        .build()
        .map_err(|e| ConceptError::Document(format!("thread pool: {e}")))?;
    let per_class = pool.install(|| {
        labels
            .as_slice()
            .par_iter()
            .map(|label| init_one_class(label, llm, prompt_template, opts))
            .collect::<Result<Vec<_>, _>>()
    })?;
    ConceptLibrary::new(labels.clone(), per_class, 0)
}

fn init_one_class(
    label: &str,
    llm: &dyn ChatService,
    template: &str,
    opts: &InitOptions,
) -> Result<Vec<Concept>, ConceptError> {
    let prompt = template.replace("{class}", label);
    let attempts = opts.retry_budget.max(1);
    let mut parse_failures = 0;
    let mut last_error = String::new();
    let mut best: Vec<Concept> = Vec::new();
    for _ in 0..attempts {
        let reply = llm
            .complete(&[ChatMessage::user(prompt.clone())])
            .map_err(|source| ConceptError::Service { class: label.to_string(), source })?;
        let texts = match parse_concept_list(&reply) {
            Ok(texts) => texts,
            Err(e) => {
                log::warn!("unparseable initial concepts for {label:?}: {e}");
                parse_failures += 1;
                last_error = e;
                continue;
            }
        };
        let concepts = dedup_list(
            texts
                .iter()
                .filter_map(|t| Concept::new(t, ConceptOrigin::Initial, 0, opts.max_concept_chars).ok())
                .collect(),
        );
        if concepts.len() >= opts.min_initial_concepts {
            return Ok(concepts);
        }
        if concepts.len() > best.len() {
            best = concepts;
        }
    }
    if parse_failures == attempts {
        return Err(ConceptError::Parse { class: label.to_string(), attempts, message: last_error });
    }
    if best.is_empty() {
        return Err(ConceptError::EmptyClass(label.to_string()));
    }
    Err(ConceptError::InsufficientConcepts {
        class: label.to_string(),
        got: best.len(),
        need: opts.min_initial_concepts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::ReplayChat;

    fn labels() -> LabelSet {
        LabelSet::new(["donut", "beignet"]).unwrap()
    }

    fn lib() -> ConceptLibrary {
        ConceptLibrary::new(
            labels(),
            vec![
                vec![Concept::initial("ring shape").unwrap(), Concept::initial("glazed").unwrap()],
                vec![Concept::initial("powdered sugar").unwrap()],
            ],
            0,
        )
        .unwrap()
    }

    #[test]
    fn label_set_rejects_duplicates_and_empty() {
        assert!(LabelSet::new(Vec::<String>::new()).is_err());
        assert!(LabelSet::new(["a", "a"]).is_err());
        assert!(LabelSet::new(["a", " "]).is_err());
        assert_eq!(labels().index_of("beignet"), Some(1));
    }

    #[test]
    fn concept_guards() {
        assert!(Concept::initial("   ").is_err());
        assert_eq!(Concept::initial("  red beak ").unwrap().text(), "red beak");
        let long = "x".repeat(251);
        assert!(Concept::initial(&long).is_err());
        assert!(Concept::initial(&"x".repeat(250)).is_ok());
    }

    #[test]
    fn dedup_key_normalizes_case_and_whitespace() {
        assert_eq!(dedup_key("Red   Beak"), "red beak");
        assert_eq!(dedup_key("red beak"), dedup_key(" RED\tbeak "));
    }

    #[test]
    fn merge_empty_is_identity() {
        let l = lib();
        assert_eq!(l.merge_concepts(0, &[]), l);
    }

    #[test]
    fn merge_novel_and_duplicate() {
        let l = lib();
        let grown = l.merge_concepts(1, &[Concept::initial("pillow shape").unwrap()]);
        assert_eq!(grown.class_concepts(1).len(), 2);
        assert_eq!(l.class_concepts(1).len(), 1, "input untouched");
        let same = l.merge_concepts(0, &[Concept::initial("Ring  Shape").unwrap()]);
        assert_eq!(same.class_concepts(0).len(), 2);
        assert_eq!(same.version(), l.version());
    }

    #[test]
    fn init_collapses_case_insensitive_duplicates() {
        let chat = ReplayChat::new([
            r#"{"concepts": ["Red Beak", "red beak", "long tail", "webbed feet"]}"#,
            r#"{"concepts": ["square shape", "powdered sugar", "fried dough"]}"#,
        ]);
        let opts = InitOptions { max_inflight: 1, ..Default::default() };
        let lib = init_concepts(&labels(), &chat, "describe {class}", &opts).unwrap();
        assert_eq!(lib.class_texts(0), vec!["Red Beak", "long tail", "webbed feet"]);
        assert_eq!(lib.version(), 0);
        assert!(lib.flatten().all(|(_, c)| c.origin() == ConceptOrigin::Initial));
    }

    #[test]
    fn init_requires_placeholder() {
        let chat = ReplayChat::new(Vec::<String>::new());
        let err = init_concepts(&labels(), &chat, "no placeholder", &InitOptions::default());
        assert!(matches!(err, Err(ConceptError::MissingPlaceholder(_))));
    }

    #[test]
    fn init_retries_malformed_then_fails() {
        let chat = ReplayChat::new(["not json", "still not json"]);
        let opts = InitOptions { retry_budget: 2, max_inflight: 1, ..Default::default() };
        let labels = LabelSet::new(["donut"]).unwrap();
        let err = init_concepts(&labels, &chat, "{class}", &opts).unwrap_err();
        assert!(matches!(err, ConceptError::Parse { attempts: 2, .. }), "{err}");
    }

    #[test]
    fn init_empty_class() {
        let chat = ReplayChat::new([r#"{"concepts": []}"#]);
        let opts = InitOptions { retry_budget: 1, max_inflight: 1, ..Default::default() };
        let labels = LabelSet::new(["donut"]).unwrap();
        let err = init_concepts(&labels, &chat, "{class}", &opts).unwrap_err();
        assert!(matches!(err, ConceptError::EmptyClass(_)), "{err}");
    }

    #[test]
    fn init_propagates_service_errors() {
        let chat = ReplayChat::new(Vec::<String>::new());
        let labels = LabelSet::new(["donut"]).unwrap();
        let opts = InitOptions { max_inflight: 1, ..Default::default() };
        let err = init_concepts(&labels, &chat, "{class}", &opts).unwrap_err();
        assert!(matches!(err, ConceptError::Service { .. }));
    }

    #[test]
    fn json_is_canonical_and_round_trips() {
        let l = lib().merge_concepts(
            1,
            &[Concept::new("pillow shape", ConceptOrigin::Evolved { iteration: 3, pair: (0, 1) }, 3, 250)
                .unwrap()],
        );
        let text = l.to_json();
        let back = ConceptLibrary::from_json(&text).unwrap();
        assert_eq!(back, l);
        assert_eq!(back.to_json(), text);
        // keys sorted: "classes" < "labels" < "version"
        let c = text.find("\"classes\"").unwrap();
        let v = text.find("\"version\"").unwrap();
        assert!(c < v);
    }

    #[test]
    fn manifest_parses_names_and_indices() {
        let text = "{\"image_id\":\"a\",\"image_ref\":\"a.jpg\",\"label\":\"beignet\"}\n\
                    {\"image_id\":\"b\",\"image_ref\":\"b.jpg\",\"label\":0}\n\
                    \n{\"image_id\":\"c\",\"image_ref\":\"c.jpg\"}\n";
        let m = DatasetManifest::from_jsonl(text.as_bytes(), &labels()).unwrap();
        assert_eq!(m.len(), 3);
        assert_eq!(m.items()[0].label, Some(1));
        assert_eq!(m.labels(), None);
        let again = DatasetManifest::from_jsonl(m.to_jsonl().as_bytes(), &labels()).unwrap();
        assert_eq!(again, m);
    }

    #[test]
    fn manifest_rejects_duplicates_and_bad_labels() {
        let dup = "{\"image_id\":\"a\",\"image_ref\":\"x\"}\n{\"image_id\":\"a\",\"image_ref\":\"y\"}\n";
        assert!(DatasetManifest::from_jsonl(dup.as_bytes(), &labels()).is_err());
        let bad = "{\"image_id\":\"a\",\"image_ref\":\"x\",\"label\":7}\n";
        assert!(DatasetManifest::from_jsonl(bad.as_bytes(), &labels()).is_err());
    }
}
