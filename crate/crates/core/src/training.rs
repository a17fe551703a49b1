//! Mini-batch training with Adam, seeded shuffling and resumable checkpoints.

use std::collections::BTreeMap;

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::corpus::{target_for, Passage, QAExample, Sentence, TrainingTarget, RELEVANT};
use crate::encoder::{init_params, Dropout, EncoderConfig, ModelParams};
use crate::encoding::{encode_pair, EncodedSequence, Vocab};
use crate::error::{Error, Result};
use crate::heads::{pair_objective_on_tape, LossTerms, LossWeights, Supervision};
use crate::model::forward_pair;
use crate::numerics::{Graph, Tape, Tensor, Var};

pub mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, RngState, FORMAT_VERSION};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub weights: LossWeights,
    pub max_len: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
    /// Extra copies of each relevant pair added to every epoch.
    pub oversample_positive: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 8,
            epochs: 5,
            seed: 0,
            weights: LossWeights::default(),
            max_len: 128,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: None,
            oversample_positive: 0,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("bad value {value:?} for {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("bad boolean {value:?} for {key}"))),
    }
}

impl TrainConfig {
    /// Settings used in the original large-encoder fine-tuning runs.
    pub fn paper_scale() -> Self {
        Self {
            learning_rate: 1e-5,
            batch_size: 32,
            epochs: 5,
            max_len: 512,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be non-negative, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(Error::Config(format!("clip_norm must be positive, got {c}")));
            }
        }
        self.weights.validate()
    }

    /// Applies one `key=value` setting. Returns `false` for unknown keys.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "learning_rate" => self.learning_rate = parse_num(key, value)?,
            "batch_size" => self.batch_size = parse_num(key, value)?,
            "epochs" => self.epochs = parse_num(key, value)?,
            "seed" => self.seed = parse_num(key, value)?,
            "max_len" => self.max_len = parse_num(key, value)?,
            "beta1" => self.beta1 = parse_num(key, value)?,
            "beta2" => self.beta2 = parse_num(key, value)?,
            "eps" => self.eps = parse_num(key, value)?,
            "clip_norm" => {
                self.clip_norm = match value {
                    "off" | "none" | "0" => None,
                    v => Some(parse_num(key, v)?),
                }
            }
            "oversample_positive" => self.oversample_positive = parse_num(key, value)?,
            "lambda_joint" => self.weights.joint = parse_num(key, value)?,
            "lambda_con" => self.weights.con = parse_num(key, value)?,
            "lambda_sim" => self.weights.sim = parse_num(key, value)?,
            "margin" => self.weights.margin = parse_num(key, value)?,
            "use_con" => self.weights.use_con = parse_bool(key, value)?,
            "use_sim" => self.weights.use_sim = parse_bool(key, value)?,
            "mode" => self.weights.supervision = Supervision::parse(value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// Canonical `key=value` listing, used for the checkpoint digest.
    pub fn to_kv(&self) -> String {
        let w = &self.weights;
        let clip = self.clip_norm.map_or("off".to_string(), |c| c.to_string());
        format!(
            "batch_size={}\nbeta1={}\nbeta2={}\nclip_norm={clip}\nepochs={}\neps={}\nlambda_con={}\nlambda_joint={}\nlambda_sim={}\nlearning_rate={}\nmargin={}\nmax_len={}\nmode={}\noversample_positive={}\nseed={}\nuse_con={}\nuse_sim={}\n",
            self.batch_size,
            self.beta1,
            self.beta2,
            self.epochs,
            self.eps,
            w.con,
            w.joint,
            w.sim,
            self.learning_rate,
            w.margin,
            self.max_len,
            w.supervision.as_str(),
            self.oversample_positive,
            self.seed,
            w.use_con,
            w.use_sim,
        )
    }

    /// Digest of every setting except the epoch count, so a run can be extended.
    pub fn digest(&self) -> String {
        let resumable = TrainConfig {
            epochs: 0,
            ..self.clone()
        };
        let hash = Sha256::digest(resumable.to_kv().as_bytes());
        hash.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// One encoded training unit with its targets.
#[derive(Clone, Debug)]
pub struct TrainingPair {
    pub seq: EncodedSequence,
    pub target: TrainingTarget,
}

impl TrainingPair {
    pub fn relevant(&self) -> bool {
        self.target.passage_score == RELEVANT
    }
}

/// The passage with all its sentences joined into one unit, for passage-only models.
pub fn merged_passage(p: &Passage) -> Passage {
    let text = p.sentences.iter().map(|s| s.text.as_str()).collect::<Vec<_>>().join(" ");
    Passage {
        title: p.title.clone(),
        sentences: vec![Sentence { text, index: 0 }],
    }
}

/// A passage holding only sentence `i`, for sentence-only models.
pub fn single_sentence(p: &Passage, i: usize) -> Passage {
    Passage {
        title: p.title.clone(),
        sentences: vec![Sentence {
            text: p.sentences[i].text.clone(),
            index: 0,
        }],
    }
}

/// Encodes every training unit of `corpus` for the given supervision mode:
/// full passages (joint), merged passages (passage-only) or single sentences
/// (sentence-only).
pub fn build_pairs(corpus: &[QAExample], vocab: &Vocab, max_len: usize, mode: Supervision) -> Result<Vec<TrainingPair>> {
    let mut out = Vec::new();
    for ex in corpus {
        for p in &ex.candidates {
            let target = target_for(ex, p);
            match mode {
                Supervision::Joint => out.push(TrainingPair {
                    seq: encode_pair(&ex.question, p, vocab, max_len)?,
                    target,
                }),
                Supervision::PassageOnly => out.push(TrainingPair {
                    seq: encode_pair(&ex.question, &merged_passage(p), vocab, max_len)?,
                    target: TrainingTarget {
                        passage_score: target.passage_score,
                        sentence_scores: vec![target.passage_score],
                    },
                }),
                Supervision::SentenceOnly => {
                    for (i, &x) in target.sentence_scores.iter().enumerate() {
                        out.push(TrainingPair {
                            seq: encode_pair(&ex.question, &single_sentence(p, i), vocab, max_len)?,
                            target: TrainingTarget {
                                passage_score: x,
                                sentence_scores: vec![x],
                            },
                        });
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Adam moment estimates.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        let zeros: BTreeMap<String, Tensor> = params
            .tensors
            .iter()
            .map(|(k, t)| (k.clone(), Tensor::zeros(t.shape())))
            .collect();
        Self {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn update(&mut self, params: &mut ModelParams, grads: &BTreeMap<String, Tensor>, cfg: &TrainConfig) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - cfg.beta1.powi(t);
        let c2 = 1.0 - cfg.beta2.powi(t);
        for (name, p) in params.tensors.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            let m = self.m.get_mut(name).expect("moment for every parameter");
            let v = self.v.get_mut(name).expect("moment for every parameter");
            for (((pv, gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mv = cfg.beta1 * *mv + (1.0 - cfg.beta1) * gv;
                *vv = cfg.beta2 * *vv + (1.0 - cfg.beta2) * gv * gv;
                let m_hat = *mv / c1;
                let v_hat = *vv / c2;
                *pv -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.eps);
            }
        }
    }
}

/// Mean weighted objective of `batch` on `tape`, with unweighted term means.
fn batch_objective_on_tape(
    tape: &mut Tape,
    vars: &BTreeMap<String, Var>,
    enc: &EncoderConfig,
    batch: &[&TrainingPair],
    weights: &LossWeights,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<(Var, LossTerms)> {
    if batch.is_empty() {
        return Err(Error::Dimension("empty batch".into()));
    }
    let mut terms = LossTerms::default();
    let mut acc = None;
    for pair in batch {
        let dropout = match (&mut rng, enc.dropout_rate > 0.0) {
            (Some(r), true) => Some(Dropout {
                rate: enc.dropout_rate,
                rng: r,
            }),
            _ => None,
        };
        let f = forward_pair(tape, vars, enc, &pair.seq, dropout)?;
        let obj = pair_objective_on_tape(
            tape,
            f.y_hat,
            f.x_hat,
            f.v_passage,
            f.v_sentences,
            &pair.seq.kept_sentences,
            &pair.target,
            weights,
        )?;
        terms.add(&obj.terms);
        acc = Some(match acc {
            Some(a) => tape.add(a, obj.total)?,
            None => obj.total,
        });
    }
    let n = batch.len() as f64;
    let mean = tape.scale(acc.expect("nonempty batch"), 1.0 / n)?;
    Ok((mean, terms.scaled(1.0 / n)))
}

/// Objective value and gradients for a batch, without updating anything.
pub fn batch_gradients(
    params: &ModelParams,
    enc: &EncoderConfig,
    batch: &[&TrainingPair],
    weights: &LossWeights,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<(LossTerms, BTreeMap<String, Tensor>)> {
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape, true)?;
    let (mean, terms) = batch_objective_on_tape(&mut tape, &vars, enc, batch, weights, rng)?;
    let mut grads = tape.backward(mean)?;
    let mut out = BTreeMap::new();
    for (name, var) in &vars {
        let g = grads
            .take(*var)
            .unwrap_or_else(|| Tensor::zeros(params.tensors[name].shape()));
        if !g.is_finite() {
            return Err(Error::Numeric(format!("gradient of {name} is not finite")));
        }
        out.insert(name.clone(), g);
    }
    if !terms.total.is_finite() {
        return Err(Error::Numeric("batch loss is not finite".into()));
    }
    Ok((terms, out))
}

/// The batch objective as a function of every model tensor, for gradient checks.
/// Feed it `ModelParams::tensors`.
pub fn objective_graph(enc: EncoderConfig, batch: Vec<TrainingPair>, weights: LossWeights) -> Graph {
    Graph::new(move |tape, vars| {
        let refs: Vec<&TrainingPair> = batch.iter().collect();
        Ok(batch_objective_on_tape(tape, vars, &enc, &refs, &weights, None)?.0)
    })
}

fn clip(grads: &mut BTreeMap<String, Tensor>, max_norm: f64) {
    let norm = grads.values().map(Tensor::norm_sq).sum::<f64>().sqrt();
    if norm > max_norm {
        let f = max_norm / norm;
        for g in grads.values_mut() {
            g.scale_in_place(f);
        }
    }
}

/// One forward/backward pass and one Adam update. Returns the pre-update loss.
pub fn train_step(
    params: &mut ModelParams,
    opt: &mut AdamState,
    enc: &EncoderConfig,
    batch: &[&TrainingPair],
    cfg: &TrainConfig,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<LossTerms> {
    let (terms, mut grads) = batch_gradients(params, enc, batch, &cfg.weights, rng)?;
    if let Some(c) = cfg.clip_norm {
        clip(&mut grads, c);
    }
    opt.update(params, &grads, cfg);
    params.check_finite()?;
    Ok(terms)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: u64,
    /// Mean per-pair loss terms over the epoch.
    pub means: LossTerms,
    pub step_losses: Vec<f64>,
}

/// Training state that can be checkpointed and resumed.
pub struct Trainer {
    pub encoder: EncoderConfig,
    pub config: TrainConfig,
    pub params: ModelParams,
    pub optimizer: AdamState,
    pub rng: ChaCha8Rng,
    pub epoch: u64,
}

impl Trainer {
    pub fn new(encoder: EncoderConfig, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let params = init_params(&encoder)?;
        Ok(Self {
            optimizer: AdamState::new(&params),
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            encoder,
            config,
            params,
            epoch: 0,
        })
    }

    pub fn from_checkpoint(ckpt: Checkpoint, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        if ckpt.train_digest != config.digest() {
            return Err(Error::Incompatible(
                "checkpoint was written with a different training configuration".into(),
            ));
        }
        let optimizer = ckpt.optimizer.unwrap_or_else(|| AdamState::new(&ckpt.params));
        Ok(Self {
            rng: ckpt.rng.restore(),
            encoder: ckpt.encoder,
            config,
            params: ckpt.params,
            optimizer,
            epoch: ckpt.epoch,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            encoder: self.encoder.clone(),
            train_digest: self.config.digest(),
            params: self.params.clone(),
            optimizer: Some(self.optimizer.clone()),
            epoch: self.epoch,
            rng: RngState::capture(&self.rng),
        }
    }

    pub fn run_epoch(&mut self, pairs: &[TrainingPair]) -> Result<EpochStats> {
        if pairs.is_empty() {
            return Err(Error::Config("training corpus is empty".into()));
        }
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        for _ in 0..self.config.oversample_positive {
            order.extend((0..pairs.len()).filter(|&i| pairs[i].relevant()));
        }
        order.shuffle(&mut self.rng);

        let mut sums = LossTerms::default();
        let mut step_losses = Vec::new();
        for chunk in order.chunks(self.config.batch_size) {
            let batch: Vec<&TrainingPair> = chunk.iter().map(|&i| &pairs[i]).collect();
            let terms = train_step(
                &mut self.params,
                &mut self.optimizer,
                &self.encoder,
                &batch,
                &self.config,
                Some(&mut self.rng),
            )?;
            sums.add(&terms.scaled(batch.len() as f64));
            step_losses.push(terms.total);
        }
        self.epoch += 1;
        Ok(EpochStats {
            epoch: self.epoch,
            means: sums.scaled(1.0 / order.len() as f64),
            step_losses,
        })
    }

    /// Runs epochs until `config.epochs` have completed in total.
    pub fn run(&mut self, pairs: &[TrainingPair]) -> Result<Vec<EpochStats>> {
        let mut history = Vec::new();
        while self.epoch < self.config.epochs as u64 {
            let stats = self.run_epoch(pairs)?;
            info!(
                "epoch {} pass={:.5} sent={:.5} con={:.5} sim={:.5} total={:.5}",
                stats.epoch, stats.means.pass, stats.means.sent, stats.means.con, stats.means.sim, stats.means.total
            );
            history.push(stats);
        }
        Ok(history)
    }
}

/// Trains a fresh model on `corpus` and returns it with per-epoch history.
pub fn train(
    corpus: &[QAExample],
    vocab: &Vocab,
    encoder: EncoderConfig,
    config: TrainConfig,
) -> Result<(ModelParams, Vec<EpochStats>)> {
    if corpus.is_empty() {
        return Err(Error::Config("training corpus is empty".into()));
    }
    let pairs = build_pairs(corpus, vocab, config.max_len.min(encoder.max_len), config.weights.supervision)?;
    let mut trainer = Trainer::new(encoder, config)?;
    let history = trainer.run(&pairs)?;
    Ok((trainer.params, history))
}
