//! Tokenisation and the `<s> Q </s> S1 </s> ... Sk </s>` input layout.

use std::collections::HashMap;
use std::path::Path;

use crate::corpus::{Passage, QAExample};
use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
/// Sequence start; its hidden state represents the passage.
pub const SEQ_START: u32 = 2;
/// Separator; the one in front of each sentence represents that sentence.
pub const SEP: u32 = 3;
pub const RESERVED: usize = 4;

const RESERVED_NAMES: [&str; RESERVED] = ["<pad>", "<unk>", "<s>", "</s>"];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    /// Index is the token id.
    tokens: Vec<String>,
    ids: HashMap<String, u32>,
}

/// Lowercased alphanumeric runs; every other non-space character is its own token.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut word = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            word.extend(ch.to_lowercase());
            continue;
        }
        if !word.is_empty() {
            out.push(std::mem::take(&mut word));
        }
        if !ch.is_whitespace() {
            out.push(ch.to_string());
        }
    }
    if !word.is_empty() {
        out.push(word);
    }
    out
}

impl Vocab {
    fn from_tokens(words: impl IntoIterator<Item = String>) -> Self {
        let mut tokens: Vec<String> = RESERVED_NAMES.iter().map(|s| s.to_string()).collect();
        tokens.extend(words);
        let ids = tokens
            .iter()
            .enumerate()
            .skip(RESERVED)
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Self { tokens, ids }
    }

    /// Total size including the reserved ids.
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.len() == RESERVED
    }

    pub fn id(&self, token: &str) -> u32 {
        self.ids.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn encode_text(&self, text: &str) -> Vec<u32> {
        tokenize(text).iter().map(|t| self.id(t)).collect()
    }

    /// One token per line; line `n` holds id `n + 4`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for t in &self.tokens[RESERVED..] {
            s.push_str(t);
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let words: Vec<String> = text.lines().map(str::to_string).collect();
        let mut seen = std::collections::HashSet::new();
        for (n, w) in words.iter().enumerate() {
            if w.is_empty() || !seen.insert(w.as_str()) {
                return Err(Error::Parse {
                    offset: n,
                    message: format!("vocab line {} is empty or duplicated", n + 1),
                });
            }
        }
        Ok(Self::from_tokens(words))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }
}

/// Frequency-ranked vocabulary over questions and passage sentences.
/// Ties break lexicographically; `max_size` counts the reserved ids.
pub fn build_vocab(corpus: &[QAExample], max_size: usize) -> Result<Vocab> {
    if max_size < RESERVED + 1 {
        return Err(Error::Config(format!("vocab max_size must be at least 5, got {max_size}")));
    }
    let mut counts: HashMap<String, usize> = HashMap::new();
    let mut add = |text: &str| {
        for t in tokenize(text) {
            *counts.entry(t).or_default() += 1;
        }
    };
    for ex in corpus {
        add(&ex.question);
        for p in &ex.candidates {
            for s in &p.sentences {
                add(&s.text);
            }
        }
    }
    let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    ranked.truncate(max_size - RESERVED);
    Ok(Vocab::from_tokens(ranked.into_iter().map(|(t, _)| t)))
}

/// Token ids for one (question, passage) pair plus the positions whose hidden
/// states represent the passage and each surviving sentence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedSequence {
    pub token_ids: Vec<u32>,
    /// Always 0, the `SEQ_START` token.
    pub passage_slot: usize,
    /// Position of the `SEP` immediately before each kept sentence.
    pub sentence_slots: Vec<usize>,
    /// Original indices of the sentences that survived truncation.
    pub kept_sentences: Vec<usize>,
}

impl EncodedSequence {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }
}

pub const MIN_MAX_LEN: usize = 4;

/// Assembles `SEQ_START Q SEP S1 SEP ... Sk SEP`, dropping whole sentences from
/// the end until the sequence fits in `max_len`.
pub fn encode_pair(question: &str, passage: &Passage, vocab: &Vocab, max_len: usize) -> Result<EncodedSequence> {
    if max_len < MIN_MAX_LEN {
        return Err(Error::Encoding(format!(
            "max_len {max_len} cannot hold the start token, one question token and two separators"
        )));
    }
    let mut q = vocab.encode_text(question);
    if q.is_empty() {
        q.push(UNK);
    }
    // leaves room for a one-token first sentence
    q.truncate((max_len - 4).max(1));

    let mut token_ids = Vec::with_capacity(max_len);
    token_ids.push(SEQ_START);
    token_ids.extend_from_slice(&q);
    token_ids.push(SEP);

    let mut sentence_slots = Vec::new();
    let mut kept_sentences = Vec::new();
    for s in &passage.sentences {
        let ids = vocab.encode_text(&s.text);
        if token_ids.len() + ids.len() + 1 > max_len {
            break;
        }
        sentence_slots.push(token_ids.len() - 1);
        kept_sentences.push(s.index);
        token_ids.extend_from_slice(&ids);
        token_ids.push(SEP);
    }
    if kept_sentences.is_empty() && !passage.sentences.is_empty() {
        return Err(Error::Encoding(format!(
            "passage {:?}: first sentence does not fit in max_len {max_len}",
            passage.title
        )));
    }
    Ok(EncodedSequence {
        token_ids,
        passage_slot: 0,
        sentence_slots,
        kept_sentences,
    })
}
