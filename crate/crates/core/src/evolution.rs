//! Confusion-driven concept evolution: repeat-decayed sampling weights, pair
//! subsampling, the per-pair history bank, the history-conditioned
//! disambiguation prompt and parsing of the model's structured reply.

use std::collections::{BTreeMap, HashSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::concept::{dedup_key, Concept, ConceptOrigin, DEFAULT_MAX_CONCEPT_CHARS};
use crate::heuristics::ConfusionReport;
use crate::llm::{ChatMessage, ChatService, ServiceError};
use crate::util::extract_json_object;

#[derive(Debug, Error)]
pub enum EvolError {
    #[error("no class pair has a positive sampling weight")]
    NoEligiblePairs,
    #[error("no open round for pair {pair:?} at iteration {iteration}")]
    UnknownRound { pair: (usize, usize), iteration: u32 },
    #[error("round for pair {pair:?} at iteration {iteration} precedes the latest round ({latest})")]
    OutOfOrder { pair: (usize, usize), iteration: u32, latest: u32 },
    #[error("unparseable model output after {attempts} attempts: {message}")]
    Parse { attempts: usize, message: String },
    #[error(transparent)]
    Service(#[from] ServiceError),
    #[error("malformed history document: {0}")]
    Document(String),
}

/// Returns `(min, max)` of two distinct class indices.
pub fn ordered_pair(a: usize, b: usize) -> (usize, usize) {
    assert_ne!(a, b, "a class cannot be paired with itself");
    if a < b {
        (a, b)
    } else {
        (b, a)
    }
}

/// `max(r, 0) * 2^(-gamma * repeat_count)`: the weight halves every
/// `1 / gamma` evolution rounds of the pair.
pub fn compute_sample_prob(r: f64, repeat_count: usize, gamma: f64) -> f64 {
    debug_assert!(gamma >= 0.0);
    if r <= 0.0 || r.is_nan() {
        return 0.0;
    }
    r * (-(gamma * repeat_count as f64)).exp2()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampledPair {
    pub i: usize,
    pub j: usize,
    pub r: f64,
    pub s: f64,
}

impl SampledPair {
    pub fn pair(&self) -> (usize, usize) {
        (self.i, self.j)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairSample {
    pub pairs: Vec<SampledPair>,
    pub seed: u64,
}

/// Draws up to `k` distinct pairs without replacement, each draw
/// proportional to the decayed weight among the pairs still available.
/// Pairs with zero weight are never drawn.
pub fn subsample_pairs(
    report: &ConfusionReport,
    bank: &HistoryBank,
    k: usize,
    gamma: f64,
    seed: u64,
) -> Result<PairSample, EvolError> {
    assert!(k >= 1, "K must be at least 1");
    let mut pool: Vec<SampledPair> = report
        .pairs()
        .map(|(i, j, r)| SampledPair { i, j, r, s: compute_sample_prob(r, bank.repeat_count((i, j)), gamma) })
        .filter(|p| p.s > 0.0)
        .collect();
    if pool.is_empty() {
        return Err(EvolError::NoEligiblePairs);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pairs = Vec::with_capacity(k.min(pool.len()));
    while pairs.len() < k && !pool.is_empty() {
        let total: f64 = pool.iter().map(|p| p.s).sum();
        let target = rng.random::<f64>() * total;
        let mut acc = 0.0;
        let mut pick = pool.len() - 1;
        for (idx, p) in pool.iter().enumerate() {
            acc += p.s;
            if target < acc {
                pick = idx;
                break;
            }
        }
        pairs.push(pool.remove(pick));
    }
    Ok(PairSample { pairs, seed })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRound {
    pub iteration: u32,
    pub proposed_i: Vec<Concept>,
    pub proposed_j: Vec<Concept>,
    /// Confusion score that triggered this round.
    pub confusion_before: f64,
    /// Score observed on the next iteration; `None` until recorded.
    pub followup_r: Option<f64>,
}

/// Evolution rounds per class pair `(i, j)` with `i < j`, in iteration order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct HistoryBank {
    entries: BTreeMap<(usize, usize), Vec<HistoryRound>>,
}

#[derive(Serialize, Deserialize)]
struct PairEntry {
    pair: (usize, usize),
    rounds: Vec<HistoryRound>,
}

impl HistoryBank {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn rounds(&self, pair: (usize, usize)) -> &[HistoryRound] {
        let pair = ordered_pair(pair.0, pair.1);
        self.entries.get(&pair).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn repeat_count(&self, pair: (usize, usize)) -> usize {
        self.rounds(pair).len()
    }

    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.entries.keys().copied()
    }

    pub fn total_rounds(&self) -> usize {
        self.entries.values().map(Vec::len).sum()
    }

    /// Opens a round for `pair` at iteration `t`. Re-opening the same
    /// `(pair, t)` is a no-op; opening an earlier iteration is an error.
    pub fn update_history(
        &mut self,
        pair: (usize, usize),
        t: u32,
        proposed_i: Vec<Concept>,
        proposed_j: Vec<Concept>,
        confusion_before: f64,
    ) -> Result<(), EvolError> {
        let pair = ordered_pair(pair.0, pair.1);
        let rounds = self.entries.entry(pair).or_default();
        if let Some(last) = rounds.last() {
            if last.iteration == t {
                return Ok(());
            }
            if last.iteration > t {
                return Err(EvolError::OutOfOrder { pair, iteration: t, latest: last.iteration });
            }
        }
        rounds.push(HistoryRound { iteration: t, proposed_i, proposed_j, confusion_before, followup_r: None });
        Ok(())
    }

    /// Stores the confusion score `r` observed at iteration `t` on the round
    /// opened at `t - 1`. A second call for the same round is a no-op.
    pub fn record_followup(&mut self, pair: (usize, usize), t: u32, r: f64) -> Result<(), EvolError> {
        let pair = ordered_pair(pair.0, pair.1);
        let unknown = EvolError::UnknownRound { pair, iteration: t };
        let opened_at = t.checked_sub(1).ok_or(unknown)?;
        let round = self
            .entries
            .get_mut(&pair)
            .and_then(|rounds| rounds.iter_mut().find(|r| r.iteration == opened_at))
            .ok_or(EvolError::UnknownRound { pair, iteration: t })?;
        if round.followup_r.is_none() {
            round.followup_r = Some(r);
        }
        Ok(())
    }

    /// Pairs whose most recent round was opened at `t - 1` and still awaits
    /// its follow-up score.
    pub fn pending_followups(&self, t: u32) -> Vec<(usize, usize)> {
        self.entries
            .iter()
            .filter(|(_, rounds)| {
                rounds.last().is_some_and(|r| r.followup_r.is_none() && t.checked_sub(1) == Some(r.iteration))
            })
            .map(|(&pair, _)| pair)
            .collect()
    }

    pub fn to_json(&self) -> String {
        let entries: Vec<PairEntry> = self
            .entries
            .iter()
            .map(|(&pair, rounds)| PairEntry { pair, rounds: rounds.clone() })
            .collect();
        serde_json::to_string_pretty(&entries).expect("history serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, EvolError> {
        let entries: Vec<PairEntry> = serde_json::from_str(text).map_err(|e| EvolError::Document(e.to_string()))?;
        let mut bank = Self::new();
        for entry in entries {
            let (i, j) = entry.pair;
            if i >= j {
                return Err(EvolError::Document(format!("pair ({i}, {j}) is not ordered")));
            }
            if entry.rounds.windows(2).any(|w| w[0].iteration >= w[1].iteration) {
                return Err(EvolError::Document(format!("rounds of ({i}, {j}) are not increasing")));
            }
            bank.entries.insert(entry.pair, entry.rounds);
        }
        Ok(bank)
    }
}

/// Past round as rendered in a prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct HistoryBlock {
    pub iteration: u32,
    pub proposed_i: Vec<String>,
    pub proposed_j: Vec<String>,
    pub followup_r: Option<f64>,
}

/// A disambiguation request for one class pair. Rendering is deterministic:
/// equal documents produce byte-identical text.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptDocument {
    pub pair: (usize, usize),
    pub iteration: u32,
    pub class_i: String,
    pub class_j: String,
    pub concepts_i: Vec<String>,
    pub concepts_j: Vec<String>,
    pub history: Vec<HistoryBlock>,
}

pub const SYSTEM_PROMPT: &str = "You are an expert in visual recognition helping to improve an image \
classifier that recognizes classes by checking images against short natural-language visual concepts.";

pub const HISTORY_HEADER: &str = "Previous attempts for this pair:";
pub const FEEDBACK_LINE: &str = "The concepts proposed in earlier attempts did not remove the confusion. \
Do not repeat them; propose different visual differences instead.";

pub fn build_disambiguation_prompt(
    pair: (usize, usize),
    iteration: u32,
    class_i: &str,
    class_j: &str,
    concepts_i: &[String],
    concepts_j: &[String],
    rounds: &[HistoryRound],
) -> PromptDocument {
    let texts = |cs: &[Concept]| cs.iter().map(|c| c.text().to_string()).collect();
    PromptDocument {
        pair,
        iteration,
        class_i: class_i.to_string(),
        class_j: class_j.to_string(),
        concepts_i: concepts_i.to_vec(),
        concepts_j: concepts_j.to_vec(),
        history: rounds
            .iter()
            .map(|r| HistoryBlock {
                iteration: r.iteration,
                proposed_i: texts(&r.proposed_i),
                proposed_j: texts(&r.proposed_j),
                followup_r: r.followup_r,
            })
            .collect(),
    }
}

/// The bank's rounds for `pair`, or none when history conditioning is off.
pub fn prompt_rounds(bank: &HistoryBank, pair: (usize, usize), history_conditioning: bool) -> &[HistoryRound] {
    if history_conditioning {
        bank.rounds(pair)
    } else {
        &[]
    }
}

pub fn concepts_key(class: &str) -> String {
    format!("concepts_for_{class}")
}

fn push_list(out: &mut String, indent: &str, items: &[String]) {
    if items.is_empty() {
        out.push_str(indent);
        out.push_str("(none)\n");
    }
    for item in items {
        out.push_str(indent);
        out.push_str("- ");
        out.push_str(item);
        out.push('\n');
    }
}

impl PromptDocument {
    pub fn render(&self) -> String {
        let (a, b) = (&self.class_i, &self.class_j);
        let mut out = String::new();
        out.push_str(&format!(
            "The classes \"{a}\" and \"{b}\" are frequently confused: images of one are often \
             scored as the other. Propose new visual concepts that separate them.\n\n"
        ));
        out.push_str(&format!("Current concepts for \"{a}\":\n"));
        push_list(&mut out, "", &self.concepts_i);
        out.push_str(&format!("Current concepts for \"{b}\":\n"));
        push_list(&mut out, "", &self.concepts_j);
        if !self.history.is_empty() {
            out.push('\n');
            out.push_str(HISTORY_HEADER);
            out.push('\n');
            for (n, block) in self.history.iter().enumerate() {
                out.push_str(&format!("Attempt {} (iteration {}):\n", n + 1, block.iteration));
                out.push_str(&format!("  proposed for \"{a}\":\n"));
                push_list(&mut out, "    ", &block.proposed_i);
                out.push_str(&format!("  proposed for \"{b}\":\n"));
                push_list(&mut out, "    ", &block.proposed_j);
                match block.followup_r {
                    Some(r) => out.push_str(&format!("  confusion after update: {r:.2}\n")),
                    None => out.push_str("  confusion after update: pending\n"),
                }
            }
            out.push_str(FEEDBACK_LINE);
            out.push('\n');
        }
        out.push_str(&format!(
            "\nFirst explain your reasoning, then give the concepts. Each concept must be a short visual \
             phrase that is true of one class and not the other. Respond with a single JSON object and \
             nothing else, with exactly these fields:\n\
             {{\"reasoning\": \"...\", \"{}\": [\"...\"], \"{}\": [\"...\"]}}\n",
            concepts_key(a),
            concepts_key(b)
        ));
        out
    }

    pub fn messages(&self) -> Vec<ChatMessage> {
        vec![ChatMessage::system(SYSTEM_PROMPT), ChatMessage::user(self.render())]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvolOptions {
    /// Model replies tried before a malformed reply becomes an error.
    pub retry_budget: usize,
    pub max_concepts_per_reply: usize,
    pub max_concept_chars: usize,
}

impl Default for EvolOptions {
    fn default() -> Self {
        Self { retry_budget: 3, max_concepts_per_reply: 5, max_concept_chars: DEFAULT_MAX_CONCEPT_CHARS }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvolReply {
    pub reasoning: String,
    pub new_i: Vec<Concept>,
    pub new_j: Vec<Concept>,
    pub attempts: usize,
}

fn field_for<'a>(obj: &'a serde_json::Map<String, Value>, class: &str) -> Option<&'a Value> {
    let key = concepts_key(class);
    obj.get(&key)
        .or_else(|| obj.iter().find(|(k, _)| dedup_key(k) == dedup_key(&key)).map(|(_, v)| v))
}

fn string_list(value: &Value, what: &str) -> Result<Vec<String>, String> {
    let list = value.as_array().ok_or_else(|| format!("{what} is not a list"))?;
    list.iter()
        .map(|v| v.as_str().map(str::to_string).ok_or_else(|| format!("{what} has a non-string entry")))
        .collect()
}

/// Parses `{reasoning, concepts_for_<a>, concepts_for_<b>}`. A missing or
/// empty `reasoning` field, or a missing concept field, is malformed.
pub fn parse_evol_reply(text: &str, class_i: &str, class_j: &str) -> Result<(String, Vec<String>, Vec<String>), String> {
    let body = extract_json_object(text).ok_or("reply contains no JSON object")?;
    let value: Value = serde_json::from_str(body).map_err(|e| format!("invalid JSON: {e}"))?;
    let obj = value.as_object().ok_or("reply is not a JSON object")?;
    let reasoning = obj
        .get("reasoning")
        .and_then(Value::as_str)
        .filter(|s| !s.trim().is_empty())
        .ok_or("missing \"reasoning\" field")?;
    let list_i = field_for(obj, class_i).ok_or_else(|| format!("missing \"{}\" field", concepts_key(class_i)))?;
    let list_j = field_for(obj, class_j).ok_or_else(|| format!("missing \"{}\" field", concepts_key(class_j)))?;
    Ok((reasoning.to_string(), string_list(list_i, class_i)?, string_list(list_j, class_j)?))
}

fn keep_new(
    texts: &[String],
    existing: &[String],
    origin: ConceptOrigin,
    t: u32,
    opts: &EvolOptions,
) -> Vec<Concept> {
    let mut seen: HashSet<String> = existing.iter().map(|s| dedup_key(s)).collect();
    texts
        .iter()
        .filter_map(|text| Concept::new(text, origin, t, opts.max_concept_chars).ok())
        .filter(|c| seen.insert(c.key()))
        .take(opts.max_concepts_per_reply)
        .collect()
}

/// Queries the model for one pair and returns the concepts it proposes.
///
/// Malformed replies are answered with a corrective message and retried up to
/// `opts.retry_budget` replies in total. Invalid, over-long and duplicate
/// concepts are dropped; the lists may come back empty.
pub fn concept_evol(llm: &dyn ChatService, prompt: &PromptDocument, opts: &EvolOptions) -> Result<EvolReply, EvolError> {
    let mut messages = prompt.messages();
    let attempts = opts.retry_budget.max(1);
    let mut last_error = String::new();
    for attempt in 1..=attempts {
        let reply = llm.complete(&messages)?;
        match parse_evol_reply(&reply, &prompt.class_i, &prompt.class_j) {
            Ok((reasoning, texts_i, texts_j)) => {
                let origin = ConceptOrigin::Evolved { iteration: prompt.iteration, pair: prompt.pair };
                return Ok(EvolReply {
                    reasoning,
                    new_i: keep_new(&texts_i, &prompt.concepts_i, origin, prompt.iteration, opts),
                    new_j: keep_new(&texts_j, &prompt.concepts_j, origin, prompt.iteration, opts),
                    attempts: attempt,
                });
            }
            Err(e) => {
                log::debug!("malformed reply for {:?} (attempt {attempt}): {e}", prompt.pair);
                messages.push(ChatMessage::assistant(reply));
                messages.push(ChatMessage::user(format!(
                    "Your reply could not be used: {e}. Reply again with only the JSON object, keeping the \
                     reasoning in its own \"reasoning\" field and the concepts in \"{}\" and \"{}\".",
                    concepts_key(&prompt.class_i),
                    concepts_key(&prompt.class_j)
                )));
                last_error = e;
            }
        }
    }
    Err(EvolError::Parse { attempts, message: last_error })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::concept::LabelSet;
    use crate::llm::ReplayChat;

    fn doc(rounds: &[HistoryRound]) -> PromptDocument {
        build_disambiguation_prompt(
            (0, 1),
            5,
            "donut",
            "beignet",
            &["ring shape".to_string()],
            &["powdered sugar".to_string(), "square".to_string()],
            rounds,
        )
    }

    fn round(t: u32, followup: Option<f64>) -> HistoryRound {
        HistoryRound {
            iteration: t,
            proposed_i: vec![Concept::initial(&format!("idea {t}")).unwrap()],
            proposed_j: vec![],
            confusion_before: 0.5,
            followup_r: followup,
        }
    }

    #[test]
    fn decay_examples() {
        assert_eq!(compute_sample_prob(0.7, 0, 1.0 / 30.0), 0.7);
        assert_eq!(compute_sample_prob(0.8, 30, 1.0 / 30.0), 0.4);
        assert_eq!(compute_sample_prob(-0.3, 0, 1.0 / 30.0), 0.0);
        assert_eq!(compute_sample_prob(0.8, 60, 1.0 / 30.0), 0.2);
        assert_eq!(compute_sample_prob(0.8, 7, 0.0), 0.8);
    }

    fn report(values: &[(usize, usize, f64)], n: usize) -> ConfusionReport {
        let mut m = vec![0.0; n * n];
        for &(i, j, v) in values {
            m[i * n + j] = v;
            m[j * n + i] = v;
        }
        ConfusionReport::from_matrix(n, &m, crate::heuristics::Heuristic::Pearson)
    }

    #[test]
    fn single_eligible_pair() {
        let r = report(&[(1, 3, 0.4), (0, 2, -0.5)], 4);
        let s = subsample_pairs(&r, &HistoryBank::new(), 5, 1.0 / 30.0, 1).unwrap();
        assert_eq!(s.pairs.len(), 1);
        assert_eq!(s.pairs[0].pair(), (1, 3));
    }

    #[test]
    fn exhaustive_draw_is_a_seeded_permutation() {
        let n = 5;
        let all: Vec<(usize, usize, f64)> =
            (0..n).flat_map(|i| ((i + 1)..n).map(move |j| (i, j, 1.0))).collect();
        let r = report(&all, n);
        let a = subsample_pairs(&r, &HistoryBank::new(), 10, 0.0, 9).unwrap();
        let b = subsample_pairs(&r, &HistoryBank::new(), 10, 0.0, 9).unwrap();
        assert_eq!(a, b);
        let mut got: Vec<_> = a.pairs.iter().map(SampledPair::pair).collect();
        got.sort();
        let mut want: Vec<_> = all.iter().map(|&(i, j, _)| (i, j)).collect();
        want.sort();
        assert_eq!(got, want);
    }

    #[test]
    fn no_eligible_pairs() {
        let r = report(&[(0, 1, -0.1)], 3);
        assert!(matches!(
            subsample_pairs(&r, &HistoryBank::new(), 3, 0.1, 0),
            Err(EvolError::NoEligiblePairs)
        ));
    }

    #[test]
    fn history_open_and_followup() {
        let mut bank = HistoryBank::new();
        bank.update_history((1, 0), 4, vec![], vec![], 0.3).unwrap();
        assert_eq!(bank.pending_followups(5), vec![(0, 1)]);
        bank.record_followup((0, 1), 5, 0.12).unwrap();
        assert_eq!(bank.rounds((0, 1))[0].followup_r, Some(0.12));
        bank.record_followup((0, 1), 5, 0.99).unwrap();
        assert_eq!(bank.rounds((0, 1))[0].followup_r, Some(0.12));
        assert!(bank.pending_followups(5).is_empty());
        assert!(matches!(bank.record_followup((0, 2), 5, 0.1), Err(EvolError::UnknownRound { .. })));
        assert!(matches!(bank.record_followup((0, 1), 9, 0.1), Err(EvolError::UnknownRound { .. })));
        assert!(matches!(bank.record_followup((0, 1), 0, 0.1), Err(EvolError::UnknownRound { .. })));
    }

    #[test]
    fn history_open_is_idempotent_and_ordered() {
        let mut bank = HistoryBank::new();
        bank.update_history((0, 1), 2, vec![], vec![], 0.3).unwrap();
        bank.update_history((0, 1), 2, vec![], vec![], 0.9).unwrap();
        assert_eq!(bank.repeat_count((0, 1)), 1);
        assert!(matches!(
            bank.update_history((0, 1), 1, vec![], vec![], 0.3),
            Err(EvolError::OutOfOrder { .. })
        ));
        bank.update_history((0, 1), 3, vec![], vec![], 0.3).unwrap();
        bank.update_history((0, 1), 7, vec![], vec![], 0.3).unwrap();
        assert_eq!(bank.repeat_count((1, 0)), 3);
    }

    #[test]
    fn history_json_round_trip() {
        let mut bank = HistoryBank::new();
        bank.update_history((0, 2), 1, vec![Concept::initial("a").unwrap()], vec![], 0.3).unwrap();
        bank.record_followup((0, 2), 2, 0.1).unwrap();
        bank.update_history((1, 2), 3, vec![], vec![Concept::initial("b").unwrap()], 0.4).unwrap();
        assert_eq!(HistoryBank::from_json(&bank.to_json()).unwrap(), bank);
    }

    #[test]
    fn prompt_without_history() {
        let text = doc(&[]).render();
        assert!(!text.contains(HISTORY_HEADER));
        assert!(!text.contains("Attempt 1"));
        assert!(text.contains("\"reasoning\""));
        assert!(text.contains("concepts_for_donut"));
        assert!(text.contains("concepts_for_beignet"));
        assert!(text.contains("- powdered sugar"));
    }

    #[test]
    fn prompt_history_blocks() {
        let text = doc(&[round(1, Some(0.5)), round(3, Some(0.123))]).render();
        assert_eq!(text.matches("confusion after update:").count(), 2);
        let first = text.find("Attempt 1 (iteration 1)").unwrap();
        let second = text.find("Attempt 2 (iteration 3)").unwrap();
        assert!(first < second);
        assert!(text.contains("confusion after update: 0.12\n"));
        assert!(text.contains("confusion after update: 0.50\n"));
        assert!(text.contains(FEEDBACK_LINE));
        assert_eq!(text, doc(&[round(1, Some(0.5)), round(3, Some(0.123))]).render());
    }

    #[test]
    fn history_flag_hides_rounds() {
        let mut bank = HistoryBank::new();
        bank.update_history((0, 1), 0, vec![], vec![], 0.5).unwrap();
        assert_eq!(prompt_rounds(&bank, (0, 1), true).len(), 1);
        assert!(prompt_rounds(&bank, (0, 1), false).is_empty());
    }

    #[test]
    fn evol_tags_origin_and_filters() {
        let reply = serde_json::json!({
            "reasoning": "donuts have a hole",
            "concepts_for_donut": ["central hole", "x".repeat(600), "Ring  Shape", "central hole"],
            "concepts_for_beignet": ["puffy pillow shape"],
        });
        let chat = ReplayChat::new([reply.to_string()]);
        let out = concept_evol(&chat, &doc(&[]), &EvolOptions::default()).unwrap();
        assert_eq!(out.new_i.len(), 1);
        assert_eq!(out.new_i[0].text(), "central hole");
        assert_eq!(out.new_i[0].origin(), ConceptOrigin::Evolved { iteration: 5, pair: (0, 1) });
        assert_eq!(out.new_j.len(), 1);
        assert_eq!(out.attempts, 1);
    }

    #[test]
    fn evol_retries_when_reasoning_is_missing() {
        let bad = r#"{"concepts_for_donut": ["because it has a hole: central hole"], "concepts_for_beignet": []}"#;
        let good = r#"{"reasoning": "r", "concepts_for_donut": ["central hole"], "concepts_for_beignet": []}"#;
        let chat = ReplayChat::new([bad, good]);
        let out = concept_evol(&chat, &doc(&[]), &EvolOptions::default()).unwrap();
        assert_eq!(out.attempts, 2);
        assert_eq!(out.new_i.len(), 1);
        assert!(out.new_j.is_empty());
        let second = &chat.requests()[1];
        assert_eq!(second.len(), 4);
        assert_eq!(second[2].role, "assistant");
        assert!(second[3].content.contains("reasoning"));
    }

    #[test]
    fn evol_parse_error_after_budget() {
        let chat = ReplayChat::new(["nope", "still nope"]);
        let opts = EvolOptions { retry_budget: 2, ..Default::default() };
        assert!(matches!(concept_evol(&chat, &doc(&[]), &opts), Err(EvolError::Parse { attempts: 2, .. })));
    }

    #[test]
    fn evol_caps_reply_length() {
        let reply = serde_json::json!({
            "reasoning": "r",
            "concepts_for_donut": ["a", "b", "c"],
            "concepts_for_beignet": [],
        });
        let chat = ReplayChat::new([reply.to_string()]);
        let opts = EvolOptions { max_concepts_per_reply: 2, ..Default::default() };
        assert_eq!(concept_evol(&chat, &doc(&[]), &opts).unwrap().new_i.len(), 2);
    }

    #[test]
    fn labels_with_spaces_round_trip_keys() {
        let labels = LabelSet::new(["Black footed Albatross", "Laysan Albatross"]).unwrap();
        let d = build_disambiguation_prompt((0, 1), 0, labels.name(0), labels.name(1), &[], &[], &[]);
        let reply = format!(
            "Sure! {{\"reasoning\": \"r\", \"{}\": [\"dark plumage\"], \"{}\": [\"white head\"]}}",
            concepts_key(labels.name(0)),
            concepts_key(labels.name(1))
        );
        let (_, a, b) = parse_evol_reply(&reply, &d.class_i, &d.class_j).unwrap();
        assert_eq!((a.len(), b.len()), (1, 1));
    }
}
