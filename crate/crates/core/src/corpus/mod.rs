//! Dataset ingestion, tokenization, vocabularies and batching, plus the
//! degenerative-attribute scores used to split training examples.

mod attributes;
mod cluster;
pub mod synthetic;

use std::collections::{HashMap, HashSet};
use std::fs;
use std::hash::Hash;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use attributes::{
    avg_frequency, context_overlap, read_scores_csv, repetition_attr, score_records,
    split_by_attribute, write_scores_csv, AttributeMetric, AttributeScore, ScoringOptions,
};
pub use cluster::{mean_shift, source_entropy, CharTrigramEmbedder, ClusterAssignment, Embedder};

pub type Token = usize;

pub const PAD: Token = 0;
pub const BOS: Token = 1;
pub const EOS: Token = 2;
pub const UNK: Token = 3;
const SPECIALS: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// Dialogue turn separator inside a history field.
pub const TURN_SEPARATOR: &str = "__eou__";

/// Integer-encoded training pair. `x` may be empty for plain language modeling.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Example {
    pub id: String,
    pub x: Vec<Token>,
    pub y: Vec<Token>,
}

impl Example {
    pub fn new(id: impl Into<String>, x: Vec<Token>, y: Vec<Token>) -> Result<Self> {
        if y.is_empty() {
            return Err(Error::EmptyInput("example target"));
        }
        Ok(Self {
            id: id.into(),
            x,
            y,
        })
    }
}

/// A tokenized record before vocabulary lookup.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TextRecord {
    pub id: String,
    pub source: Vec<String>,
    pub target: Vec<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Lm,
    Dialogue,
    Summarization,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tokenizer {
    #[default]
    Whitespace,
    Char,
}

impl Tokenizer {
    pub fn tokenize(&self, text: &str) -> Vec<String> {
        match self {
            Tokenizer::Whitespace => text.split_whitespace().map(str::to_string).collect(),
            Tokenizer::Char => text.trim().chars().map(|c| c.to_string()).collect(),
        }
    }

    pub fn detokenize(&self, tokens: &[String]) -> String {
        match self {
            Tokenizer::Whitespace => tokens.join(" "),
            Tokenizer::Char => tokens.concat(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LoadOptions {
    pub tokenizer: Tokenizer,
    /// Pair records whose source or target exceeds this many tokens are dropped.
    pub max_tokens: Option<usize>,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self {
            tokenizer: Tokenizer::Whitespace,
            max_tokens: Some(100),
        }
    }
}

/// Reads a dataset file in the layout of `task`.
///
/// * `lm`: plain text, one document per blank-line-separated block.
/// * `dialogue`: `history<TAB>response` per line, turns joined by ` __eou__ `.
/// * `summarization`: `article<TAB>summary` per line.
///
/// Record ids are the 1-based document or line number, zero padded so that
/// string order equals file order.
pub fn read_records(path: &Path, task: Task, opts: &LoadOptions) -> Result<Vec<TextRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_records(&text, path, task, opts)
}

pub fn parse_records(
    text: &str,
    path: &Path,
    task: Task,
    opts: &LoadOptions,
) -> Result<Vec<TextRecord>> {
    let mut out = Vec::new();
    match task {
        Task::Lm => {
            let mut block: Vec<String> = Vec::new();
            let flush = |block: &mut Vec<String>, out: &mut Vec<TextRecord>| {
                if !block.is_empty() {
                    let n = out.len() + 1;
                    out.push(TextRecord {
                        id: format!("doc{n:06}"),
                        source: Vec::new(),
                        target: std::mem::take(block),
                    });
                }
            };
            for line in text.lines() {
                if line.trim().is_empty() {
                    flush(&mut block, &mut out);
                } else {
                    block.extend(opts.tokenizer.tokenize(line));
                }
            }
            flush(&mut block, &mut out);
        }
        Task::Dialogue | Task::Summarization => {
            for (i, line) in text.lines().enumerate() {
                let lineno = i + 1;
                if line.trim().is_empty() {
                    continue;
                }
                let mut fields = line.split('\t');
                let (Some(src), Some(tgt), None) = (fields.next(), fields.next(), fields.next())
                else {
                    return Err(Error::Parse {
                        path: path.to_path_buf(),
                        line: lineno,
                        message: "expected exactly two TAB-separated fields".into(),
                    });
                };
                let source = opts.tokenizer.tokenize(src);
                let target = opts.tokenizer.tokenize(tgt);
                if target.is_empty() {
                    return Err(Error::Parse {
                        path: path.to_path_buf(),
                        line: lineno,
                        message: "empty target field".into(),
                    });
                }
                if let Some(cap) = opts.max_tokens {
                    if task == Task::Dialogue && (source.len() > cap || target.len() > cap) {
                        continue;
                    }
                }
                out.push(TextRecord {
                    id: format!("line{lineno:06}"),
                    source,
                    target,
                });
            }
        }
    }
    Ok(out)
}

/// Token-string to id mapping. Ids 0..4 are the special tokens.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, Token>,
}

impl Vocab {
    /// Builds a vocabulary ordered by descending count, then lexicographically.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a [String]>) -> Self {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for seq in texts {
            for t in seq {
                *counts.entry(t.as_str()).or_default() += 1;
            }
        }
        let mut words: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|(w, _)| !SPECIALS.contains(w))
            .collect();
        words.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        Self::from_tokens(
            SPECIALS
                .iter()
                .map(|s| s.to_string())
                .chain(words.into_iter().map(|(w, _)| w.to_string()))
                .collect(),
        )
        .expect("specials lead")
    }

    pub fn from_records(records: &[TextRecord]) -> Self {
        Self::build(
            records
                .iter()
                .flat_map(|r| [r.source.as_slice(), r.target.as_slice()]),
        )
    }

    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < SPECIALS.len() || tokens[..SPECIALS.len()] != SPECIALS {
            return Err(Error::contract(
                "vocabulary must start with the special tokens",
            ));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::contract(format!("duplicate vocabulary entry `{t}`")));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Token {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: Token) -> &str {
        self.tokens.get(id).map_or("<unk>", String::as_str)
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<Token> {
        tokens.iter().map(|t| self.id(t)).collect()
    }

    /// Decodes ids, dropping padding and sequence markers.
    pub fn decode(&self, ids: &[Token]) -> Vec<String> {
        ids.iter()
            .filter(|&&i| i != PAD && i != BOS && i != EOS)
            .map(|&i| self.token(i).to_string())
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(&self.tokens)
            .map_err(|e| Error::contract(e.to_string()))?;
        fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let tokens: Vec<String> = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            message: e.to_string(),
        })?;
        Self::from_tokens(tokens)
    }
}

/// Encodes records into examples, appending `EOS` to every target. Targets
/// longer than `max_target` tokens (including `EOS`) are cut into consecutive
/// windows with ids `<id>.<k>`.
pub fn encode_records(
    records: &[TextRecord],
    vocab: &Vocab,
    max_target: usize,
) -> Result<Vec<Example>> {
    if max_target == 0 {
        return Err(Error::contract("max_target must be positive"));
    }
    let mut out = Vec::with_capacity(records.len());
    for r in records {
        let x = vocab.encode(&r.source);
        let mut y = vocab.encode(&r.target);
        y.push(EOS);
        if y.len() <= max_target {
            out.push(Example::new(r.id.clone(), x, y)?);
        } else {
            for (k, chunk) in y.chunks(max_target).enumerate() {
                out.push(Example::new(
                    format!("{}.{}", r.id, k + 1),
                    x.clone(),
                    chunk.to_vec(),
                )?);
            }
        }
    }
    Ok(out)
}

/// Shuffled mini-batches of example indices; the last batch may be short.
pub fn batch_indices<R: Rng + ?Sized>(n: usize, batch_size: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order
        .chunks(batch_size.max(1))
        .map(<[usize]>::to_vec)
        .collect()
}

/// Number of batches `batch_indices` yields for `n` examples.
pub fn batches_per_epoch(n: usize, batch_size: usize) -> usize {
    n.div_ceil(batch_size.max(1))
}

/// Contiguous n-grams of `seq`, in order.
pub fn ngrams<T>(seq: &[T], n: usize) -> impl Iterator<Item = &[T]> {
    let count = if n == 0 {
        0
    } else {
        seq.len().saturating_sub(n - 1)
    };
    (0..count).map(move |i| &seq[i..i + n])
}

pub fn ngram_set<T: Eq + Hash>(seq: &[T], n: usize) -> HashSet<&[T]> {
    ngrams(seq, n).collect()
}

pub fn ngram_counts<T: Eq + Hash>(seq: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut m = HashMap::new();
    for g in ngrams(seq, n) {
        *m.entry(g).or_default() += 1;
    }
    m
}

/// Corpus-wide token counts over the targets (and sources) of `records`.
pub fn token_counts(records: &[TextRecord]) -> HashMap<String, usize> {
    let mut counts = HashMap::new();
    for r in records {
        for t in r.source.iter().chain(&r.target) {
            *counts.entry(t.clone()).or_default() += 1;
        }
    }
    counts
}
