//! Passage ranking, thresholded supporting-fact selection, the consistency-gap
//! diagnostic, and the two single-head baselines.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{QAExample, SupportingFact};
use crate::encoder::{EncoderConfig, ModelParams};
use crate::encoding::{encode_pair, Vocab};
use crate::error::{Error, Result};
use crate::heads::ScoredCandidate;
use crate::model::score_sequence;
use crate::training::{merged_passage, single_sentence};

#[derive(Clone, Debug, PartialEq)]
pub struct InferenceConfig {
    pub top_k: usize,
    /// A sentence is selected when its logit is strictly greater than this.
    pub sentence_threshold: f64,
    /// Select the best sentence of a chosen passage when none clears the threshold.
    pub force_nonempty: bool,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            top_k: 2,
            sentence_threshold: 0.0,
            force_nonempty: false,
        }
    }
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.top_k == 0 {
            return Err(Error::Config("top_k must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Prediction {
    pub qid: String,
    /// All candidate titles, best first.
    pub ranked_passages: Vec<String>,
    /// The first `top_k` entries of `ranked_passages`.
    pub selected_passages: Vec<String>,
    pub sp: BTreeSet<SupportingFact>,
}

impl Prediction {
    pub fn selected_set(&self) -> BTreeSet<String> {
        self.selected_passages.iter().cloned().collect()
    }
}

/// Scores every candidate of `example` with the joint model.
pub fn score_all(
    params: &ModelParams,
    enc: &EncoderConfig,
    example: &QAExample,
    vocab: &Vocab,
    max_len: usize,
) -> Result<Vec<ScoredCandidate>> {
    example
        .candidates
        .iter()
        .map(|p| {
            let seq = encode_pair(&example.question, p, vocab, max_len)?;
            score_sequence(params, enc, &seq, &p.title)
        })
        .collect()
}

/// Indices sorted by descending score; equal scores keep their input order.
fn rank_desc(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    idx
}

fn select_sentences(c: &ScoredCandidate, config: &InferenceConfig, out: &mut BTreeSet<SupportingFact>) {
    let before = out.len();
    for (&i, &x) in c.kept_sentences.iter().zip(&c.x_hat) {
        if x > config.sentence_threshold {
            out.insert(SupportingFact::new(c.title.clone(), i));
        }
    }
    if config.force_nonempty && out.len() == before {
        if let Some(best) = rank_desc(&c.x_hat).first() {
            out.insert(SupportingFact::new(c.title.clone(), c.kept_sentences[*best]));
        }
    }
}

/// Ranks passages by `ŷ` and keeps sentences with `x̂ > threshold` inside the
/// top-k passages.
pub fn predict(qid: &str, scored: &[ScoredCandidate], config: &InferenceConfig) -> Result<Prediction> {
    config.validate()?;
    if scored.is_empty() {
        return Err(Error::Config(format!("question {qid} has no candidates")));
    }
    let y: Vec<f64> = scored.iter().map(|c| c.y_hat).collect();
    let order = rank_desc(&y);
    let k = config.top_k.min(scored.len());
    let mut sp = BTreeSet::new();
    for &i in &order[..k] {
        select_sentences(&scored[i], config, &mut sp);
    }
    let ranked_passages: Vec<String> = order.iter().map(|&i| scored[i].title.clone()).collect();
    Ok(Prediction {
        qid: qid.to_string(),
        selected_passages: ranked_passages[..k].to_vec(),
        ranked_passages,
        sp,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GapStats {
    /// Mean of `|ŷ − max x̂|` over pairs with at least one scored sentence.
    pub mean_gap: f64,
    pub pairs: usize,
    /// Pairs without any scored sentence.
    pub skipped: usize,
}

pub fn consistency_gap<'a>(scored: impl IntoIterator<Item = &'a ScoredCandidate>) -> GapStats {
    let mut total = 0.0;
    let mut pairs = 0;
    let mut skipped = 0;
    for c in scored {
        match c.x_hat.iter().copied().reduce(f64::max) {
            Some(m) => {
                total += (c.y_hat - m).abs();
                pairs += 1;
            }
            None => skipped += 1,
        }
    }
    GapStats {
        mean_gap: if pairs == 0 { 0.0 } else { total / pairs as f64 },
        pairs,
        skipped,
    }
}

/// Per-sentence scores for one candidate passage.
#[derive(Clone, Debug, PartialEq)]
pub struct SentenceScores {
    pub title: String,
    pub scores: Vec<f64>,
}

/// Outcome of the sentence-driven baseline.
#[derive(Clone, Debug, PartialEq)]
pub struct SentenceBaseline {
    pub prediction: Prediction,
    /// Fewer than `top_k` distinct passages had any sentence.
    pub degenerate: bool,
}

/// Walks the global sentence ranking, skipping sentences from passages already
/// taken, until `top_k` distinct passages are found. Evidence is every sentence
/// of those passages scoring above the threshold.
pub fn baseline_sentence_select(qid: &str, candidates: &[SentenceScores], config: &InferenceConfig) -> Result<SentenceBaseline> {
    config.validate()?;
    let mut flat: Vec<(usize, usize, f64)> = Vec::new();
    for (p, c) in candidates.iter().enumerate() {
        for (s, &x) in c.scores.iter().enumerate() {
            flat.push((p, s, x));
        }
    }
    // stable: ties keep (passage, sentence) order
    flat.sort_by(|a, b| b.2.total_cmp(&a.2));

    let mut ranked: Vec<usize> = Vec::new();
    for &(p, _, _) in &flat {
        if !ranked.contains(&p) {
            ranked.push(p);
        }
    }
    let k = config.top_k.min(ranked.len());
    let degenerate = ranked.len() < config.top_k;
    if degenerate {
        warn!("question {qid}: only {} passage(s) have scored sentences", ranked.len());
    }
    let mut sp = BTreeSet::new();
    for &p in &ranked[..k] {
        let c = &candidates[p];
        let scored = ScoredCandidate {
            title: c.title.clone(),
            y_hat: 0.0,
            x_hat: c.scores.clone(),
            v_passage: Vec::new(),
            v_sentences: Vec::new(),
            kept_sentences: (0..c.scores.len()).collect(),
        };
        select_sentences(&scored, config, &mut sp);
    }
    // passages without sentences trail the ranking in input order
    for p in 0..candidates.len() {
        if !ranked.contains(&p) {
            ranked.push(p);
        }
    }
    let ranked_passages: Vec<String> = ranked.iter().map(|&p| candidates[p].title.clone()).collect();
    Ok(SentenceBaseline {
        prediction: Prediction {
            qid: qid.to_string(),
            selected_passages: ranked_passages[..k].to_vec(),
            ranked_passages,
            sp,
        },
        degenerate,
    })
}

/// Top-k passages by score; evidence is the first sentence of each.
pub fn baseline_passage_select(qid: &str, candidates: &[(String, f64)], config: &InferenceConfig) -> Result<Prediction> {
    config.validate()?;
    if candidates.is_empty() {
        return Err(Error::Config(format!("question {qid} has no candidates")));
    }
    let scores: Vec<f64> = candidates.iter().map(|c| c.1).collect();
    let order = rank_desc(&scores);
    let k = config.top_k.min(candidates.len());
    let ranked_passages: Vec<String> = order.iter().map(|&i| candidates[i].0.clone()).collect();
    let sp = ranked_passages[..k]
        .iter()
        .map(|t| SupportingFact::new(t.clone(), 0))
        .collect();
    Ok(Prediction {
        qid: qid.to_string(),
        selected_passages: ranked_passages[..k].to_vec(),
        ranked_passages,
        sp,
    })
}

/// Sentence-head score of every sentence, each encoded on its own with the question.
pub fn score_sentences_isolated(
    params: &ModelParams,
    enc: &EncoderConfig,
    example: &QAExample,
    vocab: &Vocab,
    max_len: usize,
) -> Result<Vec<SentenceScores>> {
    example
        .candidates
        .iter()
        .map(|p| {
            let scores = (0..p.sentences.len())
                .map(|i| {
                    let seq = encode_pair(&example.question, &single_sentence(p, i), vocab, max_len)?;
                    let c = score_sequence(params, enc, &seq, &p.title)?;
                    c.x_hat
                        .first()
                        .copied()
                        .ok_or_else(|| Error::Internal("sentence dropped from a one-sentence input".into()))
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(SentenceScores {
                title: p.title.clone(),
                scores,
            })
        })
        .collect()
}

/// Passage-head score of every candidate encoded as one merged unit.
pub fn score_passages_merged(
    params: &ModelParams,
    enc: &EncoderConfig,
    example: &QAExample,
    vocab: &Vocab,
    max_len: usize,
) -> Result<Vec<(String, f64)>> {
    example
        .candidates
        .iter()
        .map(|p| {
            let seq = encode_pair(&example.question, &merged_passage(p), vocab, max_len)?;
            Ok((p.title.clone(), score_sequence(params, enc, &seq, &p.title)?.y_hat))
        })
        .collect()
}

/// A trained model with everything needed to score a corpus.
pub struct Scorer<'a> {
    pub params: &'a ModelParams,
    pub encoder: &'a EncoderConfig,
    pub vocab: &'a Vocab,
    pub max_len: usize,
}

impl Scorer<'_> {
    /// Joint-model scores for every question, in corpus order.
    pub fn score_corpus(&self, corpus: &[QAExample]) -> Result<Vec<Vec<ScoredCandidate>>> {
        corpus
            .par_iter()
            .map(|ex| score_all(self.params, self.encoder, ex, self.vocab, self.max_len))
            .collect()
    }

    pub fn predict_corpus(&self, corpus: &[QAExample], config: &InferenceConfig) -> Result<Vec<Prediction>> {
        let scored = self.score_corpus(corpus)?;
        corpus
            .iter()
            .zip(&scored)
            .map(|(ex, s)| predict(&ex.qid, s, config))
            .collect()
    }

    pub fn sentence_baseline_corpus(&self, corpus: &[QAExample], config: &InferenceConfig) -> Result<Vec<Prediction>> {
        corpus
            .par_iter()
            .map(|ex| {
                let scores = score_sentences_isolated(self.params, self.encoder, ex, self.vocab, self.max_len)?;
                Ok(baseline_sentence_select(&ex.qid, &scores, config)?.prediction)
            })
            .collect()
    }

    pub fn passage_baseline_corpus(&self, corpus: &[QAExample], config: &InferenceConfig) -> Result<Vec<Prediction>> {
        corpus
            .par_iter()
            .map(|ex| {
                let scores = score_passages_merged(self.params, self.encoder, ex, self.vocab, self.max_len)?;
                baseline_passage_select(&ex.qid, &scores, config)
            })
            .collect()
    }
}

/// On-disk predictions: `sp` follows the HotpotQA evaluation layout,
/// `passages` lists the selected titles.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictionFile {
    #[serde(default)]
    pub sp: BTreeMap<String, Vec<(String, usize)>>,
    #[serde(default)]
    pub passages: BTreeMap<String, Vec<String>>,
}

impl PredictionFile {
    pub fn from_predictions(preds: &[Prediction]) -> Self {
        let mut f = PredictionFile::default();
        for p in preds {
            f.sp.insert(
                p.qid.clone(),
                p.sp.iter().map(|s| (s.title.clone(), s.sent_index)).collect(),
            );
            f.passages.insert(p.qid.clone(), p.selected_passages.clone());
        }
        f
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("prediction file serialises")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Parse {
            offset: e.column(),
            message: e.to_string(),
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}
