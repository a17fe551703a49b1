//! Supporting-fact precision/recall/F1/EM and passage exact match.
//!
//! An empty prediction scores precision 0, not 1. Evaluation scripts differ on
//! this, so absolute numbers are only comparable under the same convention.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use log::warn;
use serde::Serialize;

use crate::corpus::{QAExample, SupportingFact};
use crate::inference::PredictionFile;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct SpScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub em: f64,
}

pub fn sp_metrics(pred: &BTreeSet<SupportingFact>, gold: &BTreeSet<SupportingFact>) -> SpScores {
    let tp = pred.intersection(gold).count() as f64;
    let precision = if pred.is_empty() { 0.0 } else { tp / pred.len() as f64 };
    let recall = if gold.is_empty() { 0.0 } else { tp / gold.len() as f64 };
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    SpScores {
        precision,
        recall,
        f1,
        em: if pred == gold { 1.0 } else { 0.0 },
    }
}

pub fn passage_em(pred: &BTreeSet<String>, gold: &BTreeSet<String>) -> f64 {
    if pred == gold {
        1.0
    } else {
        0.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct QuestionMetrics {
    pub qid: String,
    pub sp: SpScores,
    pub passage_em: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SPMetrics {
    pub per_question: Vec<QuestionMetrics>,
    pub sp_precision: f64,
    pub sp_recall: f64,
    pub sp_f1: f64,
    pub sp_em: f64,
    pub passage_em: f64,
    pub warnings: Vec<String>,
}

#[derive(Serialize)]
struct Summary {
    sp_precision: f64,
    sp_recall: f64,
    sp_f1: f64,
    sp_em: f64,
    passage_em: f64,
}

impl SPMetrics {
    pub fn to_json(&self) -> String {
        let s = Summary {
            sp_precision: self.sp_precision,
            sp_recall: self.sp_recall,
            sp_f1: self.sp_f1,
            sp_em: self.sp_em,
            passage_em: self.passage_em,
        };
        serde_json::to_string_pretty(&s).expect("summary serialises")
    }

    pub fn to_table(&self) -> String {
        let cols = [
            ("SP Precision", self.sp_precision),
            ("SP Recall", self.sp_recall),
            ("SP F1", self.sp_f1),
            ("SP EM", self.sp_em),
            ("Passage EM", self.passage_em),
        ];
        let mut head = String::new();
        let mut vals = String::new();
        for (i, (name, v)) in cols.iter().enumerate() {
            let sep = if i == 0 { "" } else { "  " };
            let w = name.len();
            let _ = write!(head, "{sep}{name:>w$}");
            let _ = write!(vals, "{sep}{:>w$}", format!("{v:.4}"));
        }
        format!("{head}\n{vals}\n")
    }
}

/// Macro-averages over every gold question. Questions absent from the
/// prediction file score as empty predictions. When a question has `sp` but no
/// `passages` entry, the predicted passages are the titles named in `sp`.
pub fn evaluate(predictions: &PredictionFile, gold: &[QAExample]) -> SPMetrics {
    let mut out = SPMetrics::default();
    let gold_ids: BTreeSet<&str> = gold.iter().map(|g| g.qid.as_str()).collect();
    for qid in predictions.sp.keys().chain(predictions.passages.keys()) {
        if !gold_ids.contains(qid.as_str()) {
            let msg = format!("prediction for unknown question {qid} ignored");
            if !out.warnings.contains(&msg) {
                warn!("{msg}");
                out.warnings.push(msg);
            }
        }
    }
    for g in gold {
        let sp_pred = predictions.sp.get(&g.qid);
        if sp_pred.is_none() && !predictions.passages.contains_key(&g.qid) {
            let msg = format!("no prediction for question {}", g.qid);
            warn!("{msg}");
            out.warnings.push(msg);
        }
        let pred_sp: BTreeSet<SupportingFact> = sp_pred
            .into_iter()
            .flatten()
            .map(|(t, i)| SupportingFact::new(t.clone(), *i))
            .collect();
        let pred_passages: BTreeSet<String> = match predictions.passages.get(&g.qid) {
            Some(p) => p.iter().cloned().collect(),
            None => pred_sp.iter().map(|s| s.title.clone()).collect(),
        };
        out.per_question.push(QuestionMetrics {
            qid: g.qid.clone(),
            sp: sp_metrics(&pred_sp, &g.gold_sp),
            passage_em: passage_em(&pred_passages, &g.gold_passages),
        });
    }
    let n = out.per_question.len();
    if n > 0 {
        let mean = |f: fn(&QuestionMetrics) -> f64| out.per_question.iter().map(f).sum::<f64>() / n as f64;
        out.sp_precision = mean(|q| q.sp.precision);
        out.sp_recall = mean(|q| q.sp.recall);
        out.sp_f1 = mean(|q| q.sp.f1);
        out.sp_em = mean(|q| q.sp.em);
        out.passage_em = mean(|q| q.passage_em);
    }
    out
}
