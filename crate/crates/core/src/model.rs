//! Encoder plus heads evaluated on one encoded (question, passage) pair.

use std::collections::BTreeMap;

use crate::encoder::{encode_on_tape, extract_reps_on_tape, Dropout, EncoderConfig, ModelParams};
use crate::encoding::EncodedSequence;
use crate::error::Result;
use crate::heads::{score_on_tape, HeadKind, ScoredCandidate};
use crate::numerics::{Tape, Var};

/// Tape nodes for one pair.
pub struct PairForward {
    /// `1 × 1` passage logit.
    pub y_hat: Var,
    /// `k × 1` sentence logits, absent when no sentence survived encoding.
    pub x_hat: Option<Var>,
    /// `1 × d` passage representation.
    pub v_passage: Var,
    /// `k × d` sentence representations.
    pub v_sentences: Option<Var>,
}

pub fn forward_pair(
    tape: &mut Tape,
    vars: &BTreeMap<String, Var>,
    config: &EncoderConfig,
    seq: &EncodedSequence,
    dropout: Option<Dropout<'_>>,
) -> Result<PairForward> {
    let hidden = encode_on_tape(tape, vars, config, seq, dropout)?;
    let (v_passage, v_sentences) = extract_reps_on_tape(tape, hidden, seq)?;
    let y_hat = score_on_tape(tape, vars, HeadKind::Passage, v_passage)?;
    let x_hat = match v_sentences {
        Some(vs) => Some(score_on_tape(tape, vars, HeadKind::Sentence, vs)?),
        None => None,
    };
    Ok(PairForward {
        y_hat,
        x_hat,
        v_passage,
        v_sentences,
    })
}

/// Forward-only scoring of one sequence.
pub fn score_sequence(
    params: &ModelParams,
    config: &EncoderConfig,
    seq: &EncodedSequence,
    title: &str,
) -> Result<ScoredCandidate> {
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape, false)?;
    let f = forward_pair(&mut tape, &vars, config, seq, None)?;
    let rows = |v: Option<Var>, tape: &Tape| -> Vec<Vec<f64>> {
        v.map(|v| {
            let t = tape.value(v);
            (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
        })
        .unwrap_or_default()
    };
    Ok(ScoredCandidate {
        title: title.to_string(),
        y_hat: tape.value(f.y_hat).data()[0],
        x_hat: f.x_hat.map(|x| tape.value(x).data().to_vec()).unwrap_or_default(),
        v_passage: tape.value(f.v_passage).data().to_vec(),
        v_sentences: rows(f.v_sentences, &tape),
        kept_sentences: seq.kept_sentences.clone(),
    })
}
