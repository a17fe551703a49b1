//! A small pre-norm transformer encoder and the parameter store shared with
//! the scoring heads.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::encoding::{EncodedSequence, PAD};
use crate::error::{Error, Result};
use crate::heads;
use crate::numerics::{Tape, Tensor, Var};

pub const INIT_STD: f64 = 0.02;
const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_len: usize,
    pub dropout_rate: f64,
    pub seed: u64,
}

impl EncoderConfig {
    /// 2 layers, d_model 64, 4 heads, d_ff 128, max_len 128.
    pub fn desk_scale(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            d_ff: 128,
            max_len: 128,
            dropout_rate: 0.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let extents = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("max_len", self.max_len),
        ];
        if let Some((name, _)) = extents.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!("dropout_rate {} outside [0, 1)", self.dropout_rate)));
        }
        Ok(())
    }

    /// Applies one architecture setting. Returns `false` for unknown keys;
    /// `vocab_size` and `seed` are not settable here.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<bool> {
        let bad = || Error::Config(format!("bad value {value:?} for {key}"));
        match key {
            "d_model" => self.d_model = value.parse().map_err(|_| bad())?,
            "n_layers" => self.n_layers = value.parse().map_err(|_| bad())?,
            "n_heads" => self.n_heads = value.parse().map_err(|_| bad())?,
            "d_ff" => self.d_ff = value.parse().map_err(|_| bad())?,
            "dropout_rate" => self.dropout_rate = value.parse().map_err(|_| bad())?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// Flat `key=value` lines in a fixed order.
    pub fn to_kv(&self) -> String {
        format!(
            "vocab_size={}\nd_model={}\nn_layers={}\nn_heads={}\nd_ff={}\nmax_len={}\ndropout_rate={}\nseed={}\n",
            self.vocab_size, self.d_model, self.n_layers, self.n_heads, self.d_ff, self.max_len, self.dropout_rate, self.seed
        )
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let map = crate::config::parse_kv(text)?;
        let get = |k: &str| -> Result<&str> {
            map.get(k)
                .map(String::as_str)
                .ok_or_else(|| Error::Config(format!("missing encoder key {k}")))
        };
        let num = |k: &str| -> Result<usize> {
            get(k)?.parse().map_err(|_| Error::Config(format!("bad value for {k}")))
        };
        Ok(Self {
            vocab_size: num("vocab_size")?,
            d_model: num("d_model")?,
            n_layers: num("n_layers")?,
            n_heads: num("n_heads")?,
            d_ff: num("d_ff")?,
            max_len: num("max_len")?,
            dropout_rate: get("dropout_rate")?
                .parse()
                .map_err(|_| Error::Config("bad value for dropout_rate".into()))?,
            seed: get("seed")?
                .parse()
                .map_err(|_| Error::Config("bad value for seed".into()))?,
        })
    }
}

/// All trainable tensors of the model, keyed by unique name.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub tensors: BTreeMap<String, Tensor>,
}

impl ModelParams {
    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Internal(format!("missing parameter {name}")))
    }

    pub fn num_values(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn check_finite(&self) -> Result<()> {
        match self.tensors.iter().find(|(_, t)| !t.is_finite()) {
            Some((name, _)) => Err(Error::Numeric(format!("parameter {name} is not finite"))),
            None => Ok(()),
        }
    }

    /// Registers every tensor on `tape`; `trainable` controls gradient tracking.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Result<BTreeMap<String, Var>> {
        self.tensors
            .iter()
            .map(|(name, t)| {
                let v = if trainable {
                    tape.leaf(t.clone())?
                } else {
                    tape.constant(t.clone())?
                };
                Ok((name.clone(), v))
            })
            .collect()
    }
}

fn param(vars: &BTreeMap<String, Var>, name: &str) -> Result<Var> {
    vars.get(name)
        .copied()
        .ok_or_else(|| Error::Internal(format!("missing parameter {name}")))
}

pub(crate) fn normal_tensor(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor {
    let dist = Normal::new(0.0, std).expect("valid std");
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| dist.sample(rng)).collect()).expect("shape")
}

/// Seeded initialisation of encoder and head parameters: weights ~ N(0, 0.02²),
/// layer-norm scales 1, biases and offsets 0.
pub fn init_params(config: &EncoderConfig) -> Result<ModelParams> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let d = config.d_model;
    let mut t = BTreeMap::new();
    t.insert("embed.token".to_string(), normal_tensor(&mut rng, &[config.vocab_size, d], INIT_STD));
    t.insert("embed.position".to_string(), normal_tensor(&mut rng, &[config.max_len, d], INIT_STD));
    for l in 0..config.n_layers {
        let p = |s: &str| format!("layer{l}.{s}");
        for ln in ["ln1", "ln2"] {
            t.insert(p(&format!("{ln}.scale")), Tensor::filled(&[d], 1.0));
            t.insert(p(&format!("{ln}.offset")), Tensor::zeros(&[d]));
        }
        for w in ["q", "k", "v", "o"] {
            t.insert(p(&format!("attn.w{w}")), normal_tensor(&mut rng, &[d, d], INIT_STD));
            t.insert(p(&format!("attn.b{w}")), Tensor::zeros(&[d]));
        }
        t.insert(p("ff.w1"), normal_tensor(&mut rng, &[d, config.d_ff], INIT_STD));
        t.insert(p("ff.b1"), Tensor::zeros(&[config.d_ff]));
        t.insert(p("ff.w2"), normal_tensor(&mut rng, &[config.d_ff, d], INIT_STD));
        t.insert(p("ff.b2"), Tensor::zeros(&[d]));
    }
    t.insert("final_ln.scale".to_string(), Tensor::filled(&[d], 1.0));
    t.insert("final_ln.offset".to_string(), Tensor::zeros(&[d]));
    for (name, tensor) in heads::init_head_params(d, &mut rng) {
        t.insert(name, tensor);
    }
    Ok(ModelParams { tensors: t })
}

/// Dropout masks drawn during a training forward pass.
pub struct Dropout<'a> {
    pub rate: f64,
    pub rng: &'a mut ChaCha8Rng,
}

impl Dropout<'_> {
    fn mask(&mut self, n: usize) -> Vec<f64> {
        let keep = 1.0 - self.rate;
        (0..n)
            .map(|_| if self.rng.gen_bool(keep) { 1.0 / keep } else { 0.0 })
            .collect()
    }
}

fn maybe_dropout(tape: &mut Tape, x: Var, dropout: &mut Option<Dropout<'_>>) -> Result<Var> {
    match dropout {
        Some(d) if d.rate > 0.0 => {
            let mask = d.mask(tape.value(x).len());
            tape.mask_mul(x, mask)
        }
        _ => Ok(x),
    }
}

fn linear(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    tape.add_row_bias(y, b)
}

/// Runs the encoder on `tape`, returning the `|tokens| × d_model` hidden states.
pub fn encode_on_tape(
    tape: &mut Tape,
    vars: &BTreeMap<String, Var>,
    config: &EncoderConfig,
    seq: &EncodedSequence,
    mut dropout: Option<Dropout<'_>>,
) -> Result<Var> {
    let n = seq.token_ids.len();
    if n == 0 || n > config.max_len {
        return Err(Error::Dimension(format!(
            "sequence of {n} tokens for max_len {}",
            config.max_len
        )));
    }
    if let Some(bad) = seq.token_ids.iter().find(|&&id| id as usize >= config.vocab_size) {
        return Err(Error::Dimension(format!(
            "token id {bad} outside vocabulary of {}",
            config.vocab_size
        )));
    }
    let ids: Vec<usize> = seq.token_ids.iter().map(|&i| i as usize).collect();
    let positions: Vec<usize> = (0..n).collect();
    let pad_mask: Vec<bool> = seq.token_ids.iter().map(|&i| i == PAD).collect();
    let mask = pad_mask.iter().any(|m| *m).then_some(pad_mask.as_slice());

    let tok = tape.gather_rows(param(vars, "embed.token")?, &ids)?;
    let pos = tape.gather_rows(param(vars, "embed.position")?, &positions)?;
    let mut h = tape.add(tok, pos)?;
    h = maybe_dropout(tape, h, &mut dropout)?;

    let d = config.d_model;
    let dh = d / config.n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    for l in 0..config.n_layers {
        let p = |s: &str| param(vars, &format!("layer{l}.{s}"));

        let a = tape.layer_norm_rows(h, p("ln1.scale")?, p("ln1.offset")?, LN_EPS)?;
        let q = linear(tape, a, p("attn.wq")?, p("attn.bq")?)?;
        let k = linear(tape, a, p("attn.wk")?, p("attn.bk")?)?;
        let v = linear(tape, a, p("attn.wv")?, p("attn.bv")?)?;
        let mut heads_out = Vec::with_capacity(config.n_heads);
        for head in 0..config.n_heads {
            let qh = tape.slice_cols(q, head * dh, dh)?;
            let kh = tape.slice_cols(k, head * dh, dh)?;
            let vh = tape.slice_cols(v, head * dh, dh)?;
            let scores = tape.matmul_nt(qh, kh)?;
            let scores = tape.scale(scores, scale)?;
            let probs = tape.softmax_rows(scores, mask)?;
            heads_out.push(tape.matmul(probs, vh)?);
        }
        let merged = if heads_out.len() == 1 {
            heads_out[0]
        } else {
            tape.concat_cols(&heads_out)?
        };
        let attn = linear(tape, merged, p("attn.wo")?, p("attn.bo")?)?;
        let attn = maybe_dropout(tape, attn, &mut dropout)?;
        h = tape.add(h, attn)?;

        let f = tape.layer_norm_rows(h, p("ln2.scale")?, p("ln2.offset")?, LN_EPS)?;
        let f = linear(tape, f, p("ff.w1")?, p("ff.b1")?)?;
        let f = tape.gelu(f)?;
        let f = linear(tape, f, p("ff.w2")?, p("ff.b2")?)?;
        let f = maybe_dropout(tape, f, &mut dropout)?;
        h = tape.add(h, f)?;
    }
    tape.layer_norm_rows(h, param(vars, "final_ln.scale")?, param(vars, "final_ln.offset")?, LN_EPS)
}

/// Hidden states for one sequence, computed without dropout.
pub fn encode(params: &ModelParams, config: &EncoderConfig, seq: &EncodedSequence) -> Result<Tensor> {
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape, false)?;
    let h = encode_on_tape(&mut tape, &vars, config, seq, None)?;
    Ok(tape.value(h).clone())
}

/// Passage row (at `passage_slot`) and sentence rows (at `sentence_slots`).
pub fn extract_reps(hidden: &Tensor, seq: &EncodedSequence) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    let rows = hidden.rows();
    if hidden.shape().len() != 2 || rows != seq.token_ids.len() {
        return Err(Error::Internal(format!(
            "hidden state of shape {:?} for a {}-token sequence",
            hidden.shape(),
            seq.token_ids.len()
        )));
    }
    let row = |i: usize| -> Result<Vec<f64>> {
        if i >= rows {
            return Err(Error::Internal(format!("slot {i} out of range for {rows} rows")));
        }
        Ok(hidden.row(i).to_vec())
    };
    let passage = row(seq.passage_slot)?;
    let sentences = seq.sentence_slots.iter().map(|&s| row(s)).collect::<Result<Vec<_>>>()?;
    Ok((passage, sentences))
}

/// Tape counterpart of [`extract_reps`]: a `1 × d` passage row and a
/// `k × d` block of sentence rows (`None` when no sentence survived).
pub fn extract_reps_on_tape(tape: &mut Tape, hidden: Var, seq: &EncodedSequence) -> Result<(Var, Option<Var>)> {
    let passage = tape.select_rows(hidden, &[seq.passage_slot])?;
    let sentences = if seq.sentence_slots.is_empty() {
        None
    } else {
        Some(tape.select_rows(hidden, &seq.sentence_slots)?)
    };
    Ok((passage, sentences))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoding::{SEP, SEQ_START};

    fn tiny_config() -> EncoderConfig {
        EncoderConfig {
            vocab_size: 12,
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            d_ff: 16,
            max_len: 16,
            dropout_rate: 0.0,
            seed: 5,
        }
    }

    fn seq(ids: &[u32], slots: &[usize]) -> EncodedSequence {
        EncodedSequence {
            token_ids: ids.to_vec(),
            passage_slot: 0,
            sentence_slots: slots.to_vec(),
            kept_sentences: (0..slots.len()).collect(),
        }
    }

    #[test]
    fn init_is_seeded_and_well_formed() {
        let cfg = tiny_config();
        let a = init_params(&cfg).unwrap();
        assert_eq!(a, init_params(&cfg).unwrap());
        assert_eq!(a.get("embed.token").unwrap().shape(), &[12, 8]);
        assert!(a.get("layer0.ln1.scale").unwrap().data().iter().all(|v| *v == 1.0));
        assert!(a.get("final_ln.offset").unwrap().data().iter().all(|v| *v == 0.0));
        let other = init_params(&EncoderConfig { seed: 6, ..cfg }).unwrap();
        assert_ne!(a, other);
    }

    #[test]
    fn bad_configs_are_rejected() {
        assert!(EncoderConfig { n_heads: 3, ..tiny_config() }.validate().is_err());
        assert!(EncoderConfig { d_model: 0, ..tiny_config() }.validate().is_err());
    }

    #[test]
    fn encode_shape_and_determinism() {
        let cfg = EncoderConfig {
            d_model: 32,
            n_heads: 4,
            ..tiny_config()
        };
        let params = init_params(&cfg).unwrap();
        let s = seq(&[SEQ_START, 5, SEP, 6, SEP, 7, SEP], &[2, 4]);
        let h = encode(&params, &cfg, &s).unwrap();
        assert_eq!(h.shape(), &[7, 32]);
        assert_eq!(h, encode(&params, &cfg, &s).unwrap());
    }

    #[test]
    fn oversize_sequences_are_rejected() {
        let cfg = tiny_config();
        let params = init_params(&cfg).unwrap();
        let s = seq(&[SEQ_START; 17], &[]);
        assert!(matches!(encode(&params, &cfg, &s), Err(Error::Dimension(_))));
    }

    #[test]
    fn extract_picks_slot_rows() {
        let hidden = Tensor::matrix(5, 2, (0..10).map(f64::from).collect()).unwrap();
        let s = seq(&[SEQ_START, 4, SEP, 5, SEP], &[2, 4]);
        let (p, sents) = extract_reps(&hidden, &s).unwrap();
        assert_eq!(p, vec![0.0, 1.0]);
        assert_eq!(sents, vec![vec![4.0, 5.0], vec![8.0, 9.0]]);

        let one = seq(&[SEQ_START, 4, SEP, 5, SEP], &[2]);
        assert_eq!(extract_reps(&hidden, &one).unwrap().1.len(), 1);

        let bad = seq(&[SEQ_START, 4, SEP, 5, SEP], &[7]);
        assert!(matches!(extract_reps(&hidden, &bad), Err(Error::Internal(_))));
    }

    #[test]
    fn perturbing_second_sentence_changes_its_representation() {
        let cfg = tiny_config();
        let params = init_params(&cfg).unwrap();
        let a = seq(&[SEQ_START, 4, SEP, 5, 6, SEP, 7, 8, SEP], &[2, 5]);
        let mut b = a.clone();
        b.token_ids[6] = 9;
        let (_, ra) = extract_reps(&encode(&params, &cfg, &a).unwrap(), &a).unwrap();
        let (_, rb) = extract_reps(&encode(&params, &cfg, &b).unwrap(), &b).unwrap();
        let diff: f64 = ra[1].iter().zip(&rb[1]).map(|(x, y)| (x - y).abs()).sum();
        assert!(diff > 1e-9, "{diff}");
    }

    #[test]
    fn dropout_changes_training_forward_only() {
        let cfg = EncoderConfig {
            dropout_rate: 0.5,
            ..tiny_config()
        };
        let params = init_params(&cfg).unwrap();
        let s = seq(&[SEQ_START, 4, SEP, 5, SEP], &[2]);
        let clean = encode(&params, &cfg, &s).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut tape = Tape::new();
        let vars = params.bind(&mut tape, false).unwrap();
        let h = encode_on_tape(
            &mut tape,
            &vars,
            &cfg,
            &s,
            Some(Dropout {
                rate: 0.5,
                rng: &mut rng,
            }),
        )
        .unwrap();
        assert!(tape.value(h).max_abs_diff(&clean) > 0.0);
    }
}
