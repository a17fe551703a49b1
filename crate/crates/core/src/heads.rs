//! Passage and sentence scoring heads and the training losses.
//!
//! Each head is a two-layer MLP, `w2ᵀ · tanh(w1ᵀ v + b1) + b2`, with hidden
//! width `d_model`. Both heads share that structure but not their weights.
//!
//! Losses, per (question, passage) pair with ±1 targets:
//!
//! | term        | value                                                     |
//! |-------------|-----------------------------------------------------------|
//! | passage     | `(ŷ − y)²`                                                |
//! | sentence    | `Σᵢ (x̂ᵢ − xᵢ)²` over kept sentences                        |
//! | joint       | passage + sentence                                        |
//! | consistency | `(ŷ − max x̂)²`                                            |
//! | similarity  | `1/(N·M) Σᵢ Σⱼ max(d(vᵖ, vʳᵢ) − d(vᵖ, vⁿⱼ) + m, 0)`        |
//!
//! where `d` is Euclidean distance and the similarity term only applies to
//! relevant passages.

use std::collections::BTreeMap;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{TrainingTarget, RELEVANT};
use crate::encoder::{normal_tensor, INIT_STD};
use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadKind {
    Passage,
    Sentence,
}

impl HeadKind {
    pub fn prefix(self) -> &'static str {
        match self {
            HeadKind::Passage => "head.passage",
            HeadKind::Sentence => "head.sentence",
        }
    }
}

pub(crate) fn init_head_params(d_model: usize, rng: &mut ChaCha8Rng) -> Vec<(String, Tensor)> {
    let hidden = d_model;
    let mut out = Vec::new();
    for kind in [HeadKind::Passage, HeadKind::Sentence] {
        let p = kind.prefix();
        out.push((format!("{p}.w1"), normal_tensor(rng, &[d_model, hidden], INIT_STD)));
        out.push((format!("{p}.b1"), Tensor::zeros(&[hidden])));
        out.push((format!("{p}.w2"), normal_tensor(rng, &[hidden, 1], INIT_STD)));
        out.push((format!("{p}.b2"), Tensor::zeros(&[1])));
    }
    out
}

/// Weights of one head.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadParams {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl HeadParams {
    pub fn from_params(tensors: &BTreeMap<String, Tensor>, kind: HeadKind) -> Result<Self> {
        let get = |s: &str| {
            let name = format!("{}.{s}", kind.prefix());
            tensors
                .get(&name)
                .cloned()
                .ok_or_else(|| Error::Internal(format!("missing parameter {name}")))
        };
        Ok(Self {
            w1: get("w1")?,
            b1: get("b1")?,
            w2: get("w2")?,
            b2: get("b2")?,
        })
    }
}

/// Logit of one head for the representation `v`.
pub fn score(head: &HeadParams, v: &[f64]) -> Result<f64> {
    let (d, h) = match head.w1.shape() {
        [d, h] => (*d, *h),
        s => return Err(Error::Dimension(format!("head w1 has shape {s:?}"))),
    };
    if v.len() != d || head.b1.len() != h || head.w2.len() != h || head.b2.len() != 1 {
        return Err(Error::Dimension(format!(
            "head expects {d}-dim input and hidden width {h}, got input of {}",
            v.len()
        )));
    }
    let w1 = head.w1.data();
    let mut logit = head.b2.data()[0];
    for j in 0..h {
        let mut pre = head.b1.data()[j];
        for (i, vi) in v.iter().enumerate() {
            pre += vi * w1[i * h + j];
        }
        logit += head.w2.data()[j] * pre.tanh();
    }
    Ok(logit)
}

/// Applies a head to every row of `rows` (`k × d`), giving `k × 1` logits.
pub fn score_on_tape(tape: &mut Tape, vars: &BTreeMap<String, Var>, kind: HeadKind, rows: Var) -> Result<Var> {
    let get = |s: &str| {
        let name = format!("{}.{s}", kind.prefix());
        vars.get(&name)
            .copied()
            .ok_or_else(|| Error::Internal(format!("missing parameter {name}")))
    };
    let hidden = tape.matmul(rows, get("w1")?)?;
    let hidden = tape.add_row_bias(hidden, get("b1")?)?;
    let hidden = tape.tanh(hidden)?;
    let out = tape.matmul(hidden, get("w2")?)?;
    tape.add_row_bias(out, get("b2")?)
}

pub fn passage_loss(y_hat: f64, y: f64) -> f64 {
    (y_hat - y) * (y_hat - y)
}

pub fn sentence_loss(x_hat: &[f64], x: &[f64]) -> Result<f64> {
    if x_hat.len() != x.len() {
        return Err(Error::Dimension(format!(
            "{} sentence predictions for {} targets",
            x_hat.len(),
            x.len()
        )));
    }
    Ok(x_hat.iter().zip(x).map(|(p, t)| (p - t) * (p - t)).sum())
}

pub fn joint_loss(y_hat: f64, y: f64, x_hat: &[f64], x: &[f64]) -> Result<f64> {
    Ok(passage_loss(y_hat, y) + sentence_loss(x_hat, x)?)
}

/// `(ŷ − max x̂)²`; 0 when there are no sentence predictions.
pub fn consistency_loss(y_hat: f64, x_hat: &[f64]) -> f64 {
    match x_hat.iter().copied().reduce(f64::max) {
        Some(m) => (y_hat - m) * (y_hat - m),
        None => 0.0,
    }
}

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Mean triplet hinge over all (relevant, irrelevant) sentence pairs;
/// 0 when either side is empty.
pub fn similarity_loss(v_passage: &[f64], relevant: &[Vec<f64>], irrelevant: &[Vec<f64>], margin: f64) -> Result<f64> {
    let d = v_passage.len();
    if let Some(v) = relevant.iter().chain(irrelevant).find(|v| v.len() != d) {
        return Err(Error::Dimension(format!(
            "sentence vector of {} entries for a {d}-dim passage vector",
            v.len()
        )));
    }
    if relevant.is_empty() || irrelevant.is_empty() {
        return Ok(0.0);
    }
    let dn: Vec<f64> = irrelevant.iter().map(|v| euclidean(v_passage, v)).collect();
    let mut total = 0.0;
    for r in relevant {
        let dr = euclidean(v_passage, r);
        for n in &dn {
            total += (dr - n + margin).max(0.0);
        }
    }
    Ok(total / (relevant.len() * irrelevant.len()) as f64)
}

/// Which supervised terms make up the joint loss. The consistency and
/// similarity constraints couple the two heads and only apply to `Joint`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Supervision {
    /// Passage and sentence heads (the two-in-one model).
    Joint,
    PassageOnly,
    SentenceOnly,
}

impl Supervision {
    pub fn passage(self) -> bool {
        matches!(self, Supervision::Joint | Supervision::PassageOnly)
    }

    pub fn sentence(self) -> bool {
        matches!(self, Supervision::Joint | Supervision::SentenceOnly)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Supervision::Joint => "joint",
            Supervision::PassageOnly => "passage",
            Supervision::SentenceOnly => "sentence",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "joint" => Ok(Supervision::Joint),
            "passage" => Ok(Supervision::PassageOnly),
            "sentence" => Ok(Supervision::SentenceOnly),
            other => Err(Error::Config(format!("unknown supervision mode {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub joint: f64,
    pub con: f64,
    pub sim: f64,
    pub margin: f64,
    pub use_con: bool,
    pub use_sim: bool,
    pub supervision: Supervision,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            joint: 1.0,
            con: 1.0,
            sim: 1.0,
            margin: 1.0,
            use_con: true,
            use_sim: true,
            supervision: Supervision::Joint,
        }
    }
}

impl LossWeights {
    /// Joint loss only, both constraints off.
    pub fn plain() -> Self {
        Self {
            use_con: false,
            use_sim: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("joint", self.joint), ("con", self.con), ("sim", self.sim)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("loss weight {name} must be non-negative, got {v}")));
            }
        }
        if !(self.margin >= 0.0 && self.margin.is_finite()) {
            return Err(Error::Config(format!("margin must be non-negative, got {}", self.margin)));
        }
        Ok(())
    }
}

/// Head outputs and boundary representations for one (question, passage) pair.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoredCandidate {
    pub title: String,
    pub y_hat: f64,
    /// One logit per kept sentence.
    pub x_hat: Vec<f64>,
    pub v_passage: Vec<f64>,
    pub v_sentences: Vec<Vec<f64>>,
    pub kept_sentences: Vec<usize>,
}

/// Per-term values for one pair or averaged over a batch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub pass: f64,
    pub sent: f64,
    pub con: f64,
    pub sim: f64,
    pub total: f64,
}

impl LossTerms {
    pub fn joint(&self) -> f64 {
        self.pass + self.sent
    }

    pub(crate) fn add(&mut self, o: &LossTerms) {
        self.pass += o.pass;
        self.sent += o.sent;
        self.con += o.con;
        self.sim += o.sim;
        self.total += o.total;
    }

    pub(crate) fn scaled(mut self, f: f64) -> Self {
        self.pass *= f;
        self.sent *= f;
        self.con *= f;
        self.sim *= f;
        self.total *= f;
        self
    }
}

fn kept_targets(target: &TrainingTarget, kept: &[usize]) -> Result<Vec<f64>> {
    kept.iter()
        .map(|&i| {
            target
                .sentence_scores
                .get(i)
                .copied()
                .ok_or_else(|| Error::Dimension(format!("no target for sentence {i}")))
        })
        .collect()
}

/// Unweighted loss terms and weighted total for one pair.
pub fn pair_terms(c: &ScoredCandidate, target: &TrainingTarget, w: &LossWeights) -> Result<LossTerms> {
    let x = kept_targets(target, &c.kept_sentences)?;
    let mut t = LossTerms::default();
    if w.supervision.passage() {
        t.pass = passage_loss(c.y_hat, target.passage_score);
    }
    if w.supervision.sentence() {
        t.sent = sentence_loss(&c.x_hat, &x)?;
    }
    let joint = w.supervision == Supervision::Joint;
    if w.use_con && joint {
        t.con = consistency_loss(c.y_hat, &c.x_hat);
    }
    if w.use_sim && joint && target.passage_score == RELEVANT {
        let (rel, irr) = split_by_target(&c.v_sentences, &x);
        t.sim = similarity_loss(&c.v_passage, &rel, &irr, w.margin)?;
    }
    t.total = w.joint * t.joint() + w.con * t.con + w.sim * t.sim;
    Ok(t)
}

fn split_by_target(vs: &[Vec<f64>], x: &[f64]) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let mut rel = Vec::new();
    let mut irr = Vec::new();
    for (v, &t) in vs.iter().zip(x) {
        if t == RELEVANT {
            rel.push(v.clone());
        } else {
            irr.push(v.clone());
        }
    }
    (rel, irr)
}

/// Mean over pairs of `λ_joint·L^joint + λ_con·L^con + λ_sim·L^sim`.
pub fn total_objective(batch: &[(ScoredCandidate, TrainingTarget)], w: &LossWeights) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Dimension("objective over an empty batch".into()));
    }
    let mut sum = 0.0;
    for (c, t) in batch {
        sum += pair_terms(c, t, w)?.total;
    }
    Ok(sum / batch.len() as f64)
}

/// Tape nodes produced for one pair by [`pair_objective_on_tape`].
pub struct PairObjective {
    pub total: Var,
    pub terms: LossTerms,
}

fn distance_on_tape(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let diff = tape.sub(a, b)?;
    let sq = tape.square(diff)?;
    let s = tape.sum(sq)?;
    tape.sqrt(s)
}

/// Builds the weighted objective for one pair from the passage logit
/// (`1 × 1`), sentence logits (`k × 1`) and boundary representations.
pub fn pair_objective_on_tape(
    tape: &mut Tape,
    y_hat: Var,
    x_hat: Option<Var>,
    v_passage: Var,
    v_sentences: Option<Var>,
    kept: &[usize],
    target: &TrainingTarget,
    w: &LossWeights,
) -> Result<PairObjective> {
    let x = kept_targets(target, kept)?;
    let y_scalar = tape.sum(y_hat)?;
    let mut parts: Vec<(Var, f64)> = Vec::new();
    let mut terms = LossTerms::default();

    if w.supervision.passage() {
        let d = tape.add_scalar(y_scalar, -target.passage_score)?;
        let l = tape.square(d)?;
        terms.pass = tape.value(l).data()[0];
        parts.push((l, w.joint));
    }
    if let (true, Some(xh)) = (w.supervision.sentence(), x_hat) {
        let k = x.len();
        let targets = tape.constant(Tensor::matrix(k, 1, x.clone())?)?;
        let d = tape.sub(xh, targets)?;
        let sq = tape.square(d)?;
        let l = tape.sum(sq)?;
        terms.sent = tape.value(l).data()[0];
        parts.push((l, w.joint));
    }
    let joint = w.supervision == Supervision::Joint;
    if let (true, Some(xh)) = (w.use_con && joint, x_hat) {
        let m = tape.max(xh)?;
        let d = tape.sub(y_scalar, m)?;
        let l = tape.square(d)?;
        terms.con = tape.value(l).data()[0];
        parts.push((l, w.con));
    }
    if let (true, true, Some(vs)) = (w.use_sim && joint, target.passage_score == RELEVANT, v_sentences) {
        let rel: Vec<usize> = (0..x.len()).filter(|&j| x[j] == RELEVANT).collect();
        let irr: Vec<usize> = (0..x.len()).filter(|&j| x[j] != RELEVANT).collect();
        if !rel.is_empty() && !irr.is_empty() {
            let dist = |j: usize, tape: &mut Tape| -> Result<Var> {
                let row = tape.select_rows(vs, &[j])?;
                distance_on_tape(tape, v_passage, row)
            };
            let dr: Vec<Var> = rel.iter().map(|&j| dist(j, tape)).collect::<Result<_>>()?;
            let dn: Vec<Var> = irr.iter().map(|&j| dist(j, tape)).collect::<Result<_>>()?;
            let mut acc: Option<Var> = None;
            for &r in &dr {
                for &n in &dn {
                    let gap = tape.sub(r, n)?;
                    let shifted = tape.add_scalar(gap, w.margin)?;
                    let h = tape.relu(shifted)?;
                    acc = Some(match acc {
                        Some(a) => tape.add(a, h)?,
                        None => h,
                    });
                }
            }
            let l = tape.scale(acc.expect("nonempty"), 1.0 / (dr.len() * dn.len()) as f64)?;
            terms.sim = tape.value(l).data()[0];
            parts.push((l, w.sim));
        }
    }

    let mut total: Option<Var> = None;
    for (l, weight) in parts {
        let scaled = tape.scale(l, weight)?;
        total = Some(match total {
            Some(t) => tape.add(t, scaled)?,
            None => scaled,
        });
    }
    let total = match total {
        Some(t) => t,
        None => tape.constant(Tensor::scalar(0.0))?,
    };
    terms.total = tape.value(total).data()[0];
    Ok(PairObjective { total, terms })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_head_scores_zero() {
        let head = HeadParams {
            w1: Tensor::zeros(&[3, 3]),
            b1: Tensor::zeros(&[3]),
            w2: Tensor::zeros(&[3, 1]),
            b2: Tensor::zeros(&[1]),
        };
        assert_eq!(score(&head, &[1.0, -2.0, 3.0]).unwrap(), 0.0);
        assert!(score(&head, &[1.0]).is_err());
    }

    #[test]
    fn one_by_one_head_with_zero_preactivation() {
        let head = HeadParams {
            w1: Tensor::matrix(1, 1, vec![1.0]).unwrap(),
            b1: Tensor::vector(vec![0.0]),
            w2: Tensor::matrix(1, 1, vec![1.0]).unwrap(),
            b2: Tensor::vector(vec![0.0]),
        };
        assert_eq!(score(&head, &[0.0]).unwrap(), 0.0);
    }

    #[test]
    fn sentence_loss_rejects_length_mismatch() {
        assert!(sentence_loss(&[0.0], &[1.0, -1.0]).is_err());
    }

    #[test]
    fn similarity_rejects_mismatched_vectors() {
        assert!(similarity_loss(&[0.0, 0.0], &[vec![1.0]], &[vec![0.0, 1.0]], 1.0).is_err());
    }

    #[test]
    fn supervision_round_trip() {
        for s in [Supervision::Joint, Supervision::PassageOnly, Supervision::SentenceOnly] {
            assert_eq!(Supervision::parse(s.as_str()).unwrap(), s);
        }
        assert!(Supervision::parse("both").is_err());
    }
}
