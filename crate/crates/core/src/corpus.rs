//! Question/passage data in the HotpotQA distractor layout, ±1 training
//! targets, and a seeded synthetic generator with matching statistics.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::path::Path;

use log::warn;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sentence {
    pub text: String,
    /// Position within the parent passage.
    pub index: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Passage {
    pub title: String,
    pub sentences: Vec<Sentence>,
}

impl Passage {
    pub fn new(title: impl Into<String>, sentences: &[&str]) -> Self {
        Self {
            title: title.into(),
            sentences: sentences
                .iter()
                .enumerate()
                .map(|(index, text)| Sentence {
                    text: text.to_string(),
                    index,
                })
                .collect(),
        }
    }
}

/// A (passage title, sentence index) pair naming one evidence sentence.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SupportingFact {
    pub title: String,
    pub sent_index: usize,
}

impl SupportingFact {
    pub fn new(title: impl Into<String>, sent_index: usize) -> Self {
        Self {
            title: title.into(),
            sent_index,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QAExample {
    pub qid: String,
    pub question: String,
    pub candidates: Vec<Passage>,
    pub gold_sp: BTreeSet<SupportingFact>,
    pub gold_passages: BTreeSet<String>,
}

impl QAExample {
    /// Builds an example, deriving `gold_passages` from `gold_sp`.
    pub fn new(
        qid: impl Into<String>,
        question: impl Into<String>,
        candidates: Vec<Passage>,
        gold_sp: BTreeSet<SupportingFact>,
    ) -> Self {
        let gold_passages = gold_sp.iter().map(|sp| sp.title.clone()).collect();
        Self {
            qid: qid.into(),
            question: question.into(),
            candidates,
            gold_sp,
            gold_passages,
        }
    }

    pub fn passage(&self, title: &str) -> Option<&Passage> {
        self.candidates.iter().find(|p| p.title == title)
    }

    pub fn resolves(&self, sp: &SupportingFact) -> bool {
        self.passage(&sp.title)
            .is_some_and(|p| sp.sent_index < p.sentences.len())
    }

    /// Checks the structural invariants every downstream module relies on.
    pub fn validate(&self) -> Result<()> {
        let schema = |field: &str| Error::Schema {
            qid: self.qid.clone(),
            field: field.to_string(),
        };
        let mut titles = HashSet::new();
        for p in &self.candidates {
            if !titles.insert(p.title.as_str()) {
                return Err(schema("context (duplicate title)"));
            }
            if p.sentences.is_empty() {
                return Err(schema("context (passage without sentences)"));
            }
            if p.sentences.iter().enumerate().any(|(i, s)| s.index != i) {
                return Err(schema("context (sentence index)"));
            }
        }
        if !self.gold_sp.iter().all(|sp| self.resolves(sp)) {
            return Err(schema("supporting_facts"));
        }
        let derived: BTreeSet<String> = self.gold_sp.iter().map(|sp| sp.title.clone()).collect();
        if derived != self.gold_passages {
            return Err(schema("gold_passages"));
        }
        Ok(())
    }

    /// Extra checks that hold for real distractor-setting data.
    pub fn validate_distractor_setting(&self) -> Result<()> {
        self.validate()?;
        if self.candidates.len() != 10 || self.gold_passages.len() != 2 {
            return Err(Error::Schema {
                qid: self.qid.clone(),
                field: format!(
                    "context ({} candidates, {} gold passages; expected 10 and 2)",
                    self.candidates.len(),
                    self.gold_passages.len()
                ),
            });
        }
        Ok(())
    }
}

/// Result of loading a HotpotQA-format file.
#[derive(Clone, Debug, Default)]
pub struct Loaded {
    pub examples: Vec<QAExample>,
    /// Supporting facts that did not resolve to a sentence and were dropped.
    pub dropped_sp: usize,
    pub warnings: Vec<String>,
}

pub fn load_hotpotqa(path: impl AsRef<Path>) -> Result<Loaded> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_hotpotqa(&text)
}

fn byte_offset(text: &str, line: usize, column: usize) -> usize {
    let line_start: usize = text
        .split_inclusive('\n')
        .take(line.saturating_sub(1))
        .map(str::len)
        .sum();
    line_start + column.saturating_sub(1)
}

pub fn parse_hotpotqa(text: &str) -> Result<Loaded> {
    let root: Value = serde_json::from_str(text).map_err(|e| Error::Parse {
        offset: byte_offset(text, e.line(), e.column()),
        message: e.to_string(),
    })?;
    let records = root.as_array().ok_or_else(|| Error::Parse {
        offset: 0,
        message: "top level must be a JSON array".into(),
    })?;

    let mut loaded = Loaded::default();
    for (n, record) in records.iter().enumerate() {
        let (example, dropped) = parse_record(record, n)?;
        if !dropped.is_empty() {
            for sp in &dropped {
                let msg = format!(
                    "record {}: supporting fact ({:?}, {}) does not resolve; dropped",
                    example.qid, sp.title, sp.sent_index
                );
                warn!("{msg}");
                loaded.warnings.push(msg);
            }
            loaded.dropped_sp += dropped.len();
        }
        loaded.examples.push(example);
    }
    Ok(loaded)
}

fn parse_record(record: &Value, position: usize) -> Result<(QAExample, Vec<SupportingFact>)> {
    let qid = record
        .get("_id")
        .and_then(Value::as_str)
        .map(str::to_string)
        .ok_or_else(|| Error::Schema {
            qid: format!("#{position}"),
            field: "_id".into(),
        })?;
    let schema = |field: &str| Error::Schema {
        qid: qid.clone(),
        field: field.into(),
    };

    let question = record
        .get("question")
        .and_then(Value::as_str)
        .ok_or_else(|| schema("question"))?
        .to_string();

    let context = record
        .get("context")
        .and_then(Value::as_array)
        .ok_or_else(|| schema("context"))?;
    let mut candidates = Vec::with_capacity(context.len());
    for entry in context {
        let pair = entry.as_array().filter(|a| a.len() == 2).ok_or_else(|| schema("context"))?;
        let title = pair[0].as_str().ok_or_else(|| schema("context"))?;
        let sentences = pair[1]
            .as_array()
            .ok_or_else(|| schema("context"))?
            .iter()
            .enumerate()
            .map(|(index, s)| {
                s.as_str()
                    .map(|text| Sentence {
                        text: text.to_string(),
                        index,
                    })
                    .ok_or_else(|| schema("context"))
            })
            .collect::<Result<Vec<_>>>()?;
        candidates.push(Passage {
            title: title.to_string(),
            sentences,
        });
    }

    let facts = record
        .get("supporting_facts")
        .and_then(Value::as_array)
        .ok_or_else(|| schema("supporting_facts"))?;
    let mut gold_sp = BTreeSet::new();
    let mut dropped = Vec::new();
    for fact in facts {
        let pair = fact.as_array().filter(|a| a.len() == 2).ok_or_else(|| schema("supporting_facts"))?;
        let title = pair[0].as_str().ok_or_else(|| schema("supporting_facts"))?;
        let index = pair[1].as_u64().ok_or_else(|| schema("supporting_facts"))? as usize;
        let sp = SupportingFact::new(title, index);
        let resolves = candidates
            .iter()
            .any(|p| p.title == sp.title && index < p.sentences.len());
        if resolves {
            gold_sp.insert(sp);
        } else {
            dropped.push(sp);
        }
    }
    Ok((QAExample::new(qid, question, candidates, gold_sp), dropped))
}

#[derive(Serialize)]
struct Record<'a> {
    #[serde(rename = "_id")]
    id: &'a str,
    question: &'a str,
    context: Vec<(&'a str, Vec<&'a str>)>,
    supporting_facts: Vec<(&'a str, usize)>,
}

/// Serialises examples in the same schema [`load_hotpotqa`] reads.
pub fn to_hotpotqa_json(examples: &[QAExample]) -> String {
    let records: Vec<Record> = examples
        .iter()
        .map(|ex| Record {
            id: &ex.qid,
            question: &ex.question,
            context: ex
                .candidates
                .iter()
                .map(|p| {
                    (
                        p.title.as_str(),
                        p.sentences.iter().map(|s| s.text.as_str()).collect(),
                    )
                })
                .collect(),
            supporting_facts: ex
                .gold_sp
                .iter()
                .map(|sp| (sp.title.as_str(), sp.sent_index))
                .collect(),
        })
        .collect();
    serde_json::to_string(&records).expect("records serialise")
}

pub fn save_hotpotqa(path: impl AsRef<Path>, examples: &[QAExample]) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, to_hotpotqa_json(examples)).map_err(|e| Error::io(path, e))
}

/// ±1 regression targets for one (question, passage) pair.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingTarget {
    pub passage_score: f64,
    pub sentence_scores: Vec<f64>,
}

pub const RELEVANT: f64 = 1.0;
pub const IRRELEVANT: f64 = -1.0;

pub fn make_targets(example: &QAExample) -> BTreeMap<String, TrainingTarget> {
    example
        .candidates
        .iter()
        .map(|p| (p.title.clone(), target_for(example, p)))
        .collect()
}

pub(crate) fn target_for(example: &QAExample, passage: &Passage) -> TrainingTarget {
    let relevant = example.gold_passages.contains(&passage.title);
    let sentence_scores = passage
        .sentences
        .iter()
        .map(|s| {
            let sp = SupportingFact::new(passage.title.clone(), s.index);
            if relevant && example.gold_sp.contains(&sp) {
                RELEVANT
            } else {
                IRRELEVANT
            }
        })
        .collect();
    TrainingTarget {
        passage_score: if relevant { RELEVANT } else { IRRELEVANT },
        sentence_scores,
    }
}

/// Parameters of the synthetic corpus generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_questions: usize,
    pub n_candidates: usize,
    /// Relevant passages planted per question.
    pub n_relevant: usize,
    pub min_sentences: usize,
    pub max_sentences: usize,
    /// Tokens per sentence, marker included.
    pub sentence_len: usize,
    /// Tokens per question, marker included.
    pub question_len: usize,
    /// Number of distinct filler words.
    pub vocab_size: usize,
    /// Number of distinct marker words questions draw from.
    pub marker_pool: usize,
    pub fraction_two_sp: f64,
    pub fraction_first_sentence: f64,
    /// Probability that an irrelevant sentence carries some other question's
    /// marker. Non-zero values make relevance depend on matching the exact token.
    pub distractor_marker_rate: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_questions: 64,
            n_candidates: 10,
            n_relevant: 2,
            min_sentences: 3,
            max_sentences: 5,
            sentence_len: 5,
            question_len: 4,
            vocab_size: 200,
            marker_pool: 32,
            fraction_two_sp: 0.704,
            fraction_first_sentence: 0.600,
            distractor_marker_rate: 0.0,
        }
    }
}

/// Share of questions with more than two supporting facts that get exactly three;
/// the rest get four.
const THREE_SP_SHARE: f64 = 0.75;

impl SynthConfig {
    fn expected_sp_per_question(&self) -> f64 {
        let extra = THREE_SP_SHARE * 3.0 + (1.0 - THREE_SP_SHARE) * 4.0;
        self.fraction_two_sp * 2.0 + (1.0 - self.fraction_two_sp) * extra
    }

    /// Probability that a relevant passage includes its first sentence as evidence,
    /// chosen so the expected share of first-sentence facts matches the config.
    fn first_sentence_rate(&self) -> f64 {
        self.fraction_first_sentence * self.expected_sp_per_question() / self.n_relevant as f64
    }

    /// Applies one `key=value` setting. Returns `false` for unknown keys.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<bool> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::Config(format!("bad value {value:?} for {key}")))
        }
        match key {
            "n_questions" => self.n_questions = num(key, value)?,
            "n_candidates" => self.n_candidates = num(key, value)?,
            "n_relevant" => self.n_relevant = num(key, value)?,
            "min_sentences" => self.min_sentences = num(key, value)?,
            "max_sentences" => self.max_sentences = num(key, value)?,
            "sentence_len" => self.sentence_len = num(key, value)?,
            "question_len" => self.question_len = num(key, value)?,
            "vocab_size" => self.vocab_size = num(key, value)?,
            "marker_pool" => self.marker_pool = num(key, value)?,
            "fraction_two_sp" => self.fraction_two_sp = num(key, value)?,
            "fraction_first_sentence" => self.fraction_first_sentence = num(key, value)?,
            "distractor_marker_rate" => self.distractor_marker_rate = num(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        for (name, v) in [
            ("fraction_two_sp", self.fraction_two_sp),
            ("fraction_first_sentence", self.fraction_first_sentence),
            ("distractor_marker_rate", self.distractor_marker_rate),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} must lie in [0, 1], got {v}"));
            }
        }
        if self.n_relevant != 2 {
            return bad(format!(
                "the supporting-fact distribution assumes 2 relevant passages, got {}",
                self.n_relevant
            ));
        }
        if self.n_candidates < self.n_relevant {
            return bad(format!(
                "n_candidates ({}) must be at least n_relevant ({})",
                self.n_candidates, self.n_relevant
            ));
        }
        if self.min_sentences < 3 || self.max_sentences < self.min_sentences {
            return bad(format!(
                "sentence range {}..={} must start at 3 or more",
                self.min_sentences, self.max_sentences
            ));
        }
        if self.sentence_len < 1 || self.question_len < 1 {
            return bad("sentence_len and question_len must be at least 1".into());
        }
        if self.vocab_size < 1 || self.marker_pool < 2 {
            return bad("need at least 1 filler word and 2 markers".into());
        }
        let q = self.first_sentence_rate();
        if q > 1.0 {
            return bad(format!(
                "fraction_first_sentence {} is unattainable with this supporting-fact distribution",
                self.fraction_first_sentence
            ));
        }
        Ok(())
    }
}

fn filler(rng: &mut ChaCha8Rng, cfg: &SynthConfig) -> String {
    format!("w{}", rng.gen_range(0..cfg.vocab_size))
}

fn sentence_text(rng: &mut ChaCha8Rng, cfg: &SynthConfig, marker: Option<usize>) -> String {
    let mut words: Vec<String> = (0..cfg.sentence_len).map(|_| filler(rng, cfg)).collect();
    if let Some(m) = marker {
        let at = rng.gen_range(0..cfg.sentence_len);
        words[at] = format!("m{m}");
    }
    words.join(" ")
}

/// Picks `count` evidence sentence indices in a passage of `n` sentences.
fn evidence_indices(rng: &mut ChaCha8Rng, n: usize, count: usize, first_rate: f64) -> Vec<usize> {
    let mut chosen = Vec::with_capacity(count);
    if rng.gen_bool(first_rate) {
        chosen.push(0);
    }
    let mut rest: Vec<usize> = (1..n).collect();
    rest.shuffle(rng);
    for i in rest {
        if chosen.len() == count {
            break;
        }
        chosen.push(i);
    }
    chosen.sort_unstable();
    chosen
}

/// Generates a corpus in which the question and each evidence sentence share a
/// question-specific marker word that no irrelevant sentence contains.
pub fn generate_synthetic(config: &SynthConfig, seed: u64) -> Result<Vec<QAExample>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let first_rate = config.first_sentence_rate();
    let mut out = Vec::with_capacity(config.n_questions);

    for qi in 0..config.n_questions {
        let marker = rng.gen_range(0..config.marker_pool);
        let mut q_words: Vec<String> = (0..config.question_len - 1).map(|_| filler(&mut rng, config)).collect();
        q_words.insert(rng.gen_range(0..config.question_len), format!("m{marker}"));

        let n_sp = if rng.gen_bool(config.fraction_two_sp) {
            2
        } else if rng.gen_bool(THREE_SP_SHARE) {
            3
        } else {
            4
        };
        // one fact per relevant passage, extras split as evenly as possible
        let per_passage = [n_sp - n_sp / 2, n_sp / 2];

        let mut order: Vec<usize> = (0..config.n_candidates).collect();
        order.shuffle(&mut rng);
        let relevant_slots = &order[..config.n_relevant];

        let mut candidates = Vec::with_capacity(config.n_candidates);
        let mut gold_sp = BTreeSet::new();
        for slot in 0..config.n_candidates {
            let title = format!("T{slot}");
            let n_sent = rng.gen_range(config.min_sentences..=config.max_sentences);
            let evidence = relevant_slots
                .iter()
                .position(|&r| r == slot)
                .map(|k| evidence_indices(&mut rng, n_sent, per_passage[k], first_rate))
                .unwrap_or_default();
            let sentences = (0..n_sent)
                .map(|index| {
                    let carried = if evidence.contains(&index) {
                        Some(marker)
                    } else if rng.gen_bool(config.distractor_marker_rate) {
                        let other = rng.gen_range(0..config.marker_pool - 1);
                        Some(if other >= marker { other + 1 } else { other })
                    } else {
                        None
                    };
                    Sentence {
                        text: sentence_text(&mut rng, config, carried),
                        index,
                    }
                })
                .collect();
            for &i in &evidence {
                gold_sp.insert(SupportingFact::new(title.clone(), i));
            }
            candidates.push(Passage { title, sentences });
        }
        out.push(QAExample::new(format!("syn-{seed}-{qi}"), q_words.join(" "), candidates, gold_sp));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture_record(id: &str, sp_title: &str) -> String {
        let context: Vec<String> = (0..10)
            .map(|i| format!(r#"["P{i}", ["s0 of {i}.", "s1 of {i}."]]"#))
            .collect();
        format!(
            r#"{{"_id": "{id}", "question": "q?", "answer": "x", "context": [{}],
                "supporting_facts": [["P0", 0], ["{sp_title}", 1]]}}"#,
            context.join(",")
        )
    }

    #[test]
    fn loads_ten_candidate_record() {
        let text = format!("[{}]", fixture_record("a", "P3"));
        let loaded = parse_hotpotqa(&text).unwrap();
        let ex = &loaded.examples[0];
        assert_eq!(ex.candidates.len(), 10);
        assert_eq!(ex.gold_sp.len(), 2);
        assert_eq!(ex.gold_passages.len(), 2);
        ex.validate_distractor_setting().unwrap();
        assert_eq!(loaded.dropped_sp, 0);
    }

    #[test]
    fn empty_array_loads_nothing() {
        assert!(parse_hotpotqa("[]").unwrap().examples.is_empty());
    }

    #[test]
    fn unresolvable_fact_is_dropped_and_counted() {
        let text = format!("[{}, {}]", fixture_record("a", "P3"), fixture_record("b", "Nope"));
        let loaded = parse_hotpotqa(&text).unwrap();
        assert_eq!(loaded.examples.len(), 2);
        assert_eq!(loaded.dropped_sp, 1);
        assert_eq!(loaded.warnings.len(), 1);
        let b = &loaded.examples[1];
        assert_eq!(b.gold_sp.len(), 1);
        assert_eq!(b.gold_passages.len(), 1);
        b.validate().unwrap();
    }

    #[test]
    fn malformed_json_reports_byte_offset() {
        let err = parse_hotpotqa("[\n  {\"_id\": }\n]").unwrap_err();
        match err {
            Error::Parse { offset, .. } => assert_eq!(offset, 12),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn missing_field_names_qid_and_field() {
        let err = parse_hotpotqa(r#"[{"_id": "abc", "question": "q", "context": []}]"#).unwrap_err();
        match err {
            Error::Schema { qid, field } => {
                assert_eq!(qid, "abc");
                assert_eq!(field, "supporting_facts");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    fn small_example() -> QAExample {
        QAExample::new(
            "q",
            "w",
            vec![
                Passage::new("T", &["a", "b", "c"]),
                Passage::new("U", &["d", "e"]),
                Passage::new("V", &["f"]),
            ],
            [SupportingFact::new("T", 0), SupportingFact::new("V", 0)].into_iter().collect(),
        )
    }

    #[test]
    fn targets_follow_gold_labels() {
        let t = make_targets(&small_example());
        assert_eq!(t["T"].passage_score, 1.0);
        assert_eq!(t["T"].sentence_scores, vec![1.0, -1.0, -1.0]);
        assert_eq!(t["U"].passage_score, -1.0);
        assert_eq!(t["U"].sentence_scores, vec![-1.0, -1.0]);
    }

    #[test]
    fn ten_candidate_example_has_two_positive_targets() {
        let text = format!("[{}]", fixture_record("a", "P3"));
        let ex = &parse_hotpotqa(&text).unwrap().examples[0];
        let t = make_targets(ex);
        assert_eq!(t.len(), 10);
        assert_eq!(t.values().filter(|t| t.passage_score > 0.0).count(), 2);
    }

    #[test]
    fn synthetic_is_deterministic_and_round_trips() {
        let cfg = SynthConfig {
            n_questions: 20,
            ..SynthConfig::default()
        };
        let a = generate_synthetic(&cfg, 9).unwrap();
        let b = generate_synthetic(&cfg, 9).unwrap();
        assert_eq!(to_hotpotqa_json(&a), to_hotpotqa_json(&b));
        let c = generate_synthetic(&cfg, 10).unwrap();
        assert_ne!(to_hotpotqa_json(&a), to_hotpotqa_json(&c));

        let reloaded = parse_hotpotqa(&to_hotpotqa_json(&a)).unwrap();
        assert_eq!(reloaded.examples, a);
        for ex in &a {
            ex.validate_distractor_setting().unwrap();
        }
    }

    #[test]
    fn zero_questions_is_empty() {
        let cfg = SynthConfig {
            n_questions: 0,
            ..SynthConfig::default()
        };
        assert!(generate_synthetic(&cfg, 1).unwrap().is_empty());
    }

    #[test]
    fn fractions_outside_unit_interval_are_rejected() {
        let cfg = SynthConfig {
            fraction_two_sp: 1.2,
            ..SynthConfig::default()
        };
        assert!(matches!(generate_synthetic(&cfg, 1), Err(Error::Config(_))));
        let cfg = SynthConfig {
            fraction_first_sentence: -0.1,
            ..SynthConfig::default()
        };
        assert!(matches!(generate_synthetic(&cfg, 1), Err(Error::Config(_))));
    }

    #[test]
    fn marker_separates_evidence_from_other_sentences() {
        let cfg = SynthConfig {
            n_questions: 50,
            distractor_marker_rate: 0.5,
            ..SynthConfig::default()
        };
        for ex in generate_synthetic(&cfg, 3).unwrap() {
            let marker = ex.question.split(' ').find(|w| w.starts_with('m')).unwrap();
            for p in &ex.candidates {
                for s in &p.sentences {
                    let has = s.text.split(' ').any(|w| w == marker);
                    let gold = ex.gold_sp.contains(&SupportingFact::new(p.title.clone(), s.index));
                    assert_eq!(has, gold, "{} {} {}", ex.qid, p.title, s.index);
                }
            }
        }
    }
}
