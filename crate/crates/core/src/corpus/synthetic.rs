//! Deterministic toy corpora for experiments and fixtures.
//!
//! The LM corpus mixes two kinds of documents. Plain documents follow a
//! sparse word-bigram chain over a Zipf-weighted vocabulary. Degenerate
//! documents repeat a short phrase of head words, so they score high on
//! repetition and low on average frequency rank.

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{TextRecord, TURN_SEPARATOR};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticLmConfig {
    pub documents: usize,
    pub doc_len: usize,
    pub vocab_words: usize,
    /// Share of documents built from a repeated head-word phrase.
    pub degenerate_fraction: f64,
    /// The head of the vocabulary that degenerate phrases draw from.
    pub head_words: usize,
    pub zipf_exponent: f64,
    /// Successors preferred by each word in plain documents.
    pub successors: usize,
    pub seed: u64,
}

impl Default for SyntheticLmConfig {
    fn default() -> Self {
        Self {
            documents: 120,
            doc_len: 24,
            vocab_words: 60,
            degenerate_fraction: 0.5,
            head_words: 6,
            zipf_exponent: 1.0,
            successors: 3,
            seed: 0,
        }
    }
}

fn word(i: usize) -> String {
    format!("w{i}")
}

fn zipf_weights(n: usize, s: f64) -> Vec<f64> {
    (1..=n).map(|r| (r as f64).powf(-s)).collect()
}

/// Generates the mixed LM corpus. Ids are `doc000001`, ... in order; the
/// returned flags mark the degenerate documents.
pub fn synthetic_lm(cfg: &SyntheticLmConfig) -> (Vec<TextRecord>, Vec<bool>) {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let v = cfg.vocab_words.max(2);
    let unigram = WeightedIndex::new(zipf_weights(v, cfg.zipf_exponent)).expect("positive weights");
    let succ: Vec<Vec<usize>> = (0..v)
        .map(|_| {
            (0..cfg.successors)
                .map(|_| unigram.sample(&mut rng))
                .collect()
        })
        .collect();
    let n_degen = (cfg.documents as f64 * cfg.degenerate_fraction).round() as usize;
    // Interleave degenerate documents evenly instead of clustering them.
    let degenerate: Vec<bool> = (0..cfg.documents)
        .map(|i| (i + 1) * n_degen / cfg.documents.max(1) != i * n_degen / cfg.documents.max(1))
        .collect();

    let head = cfg.head_words.clamp(1, v);
    let mut records = Vec::with_capacity(cfg.documents);
    for (i, &degen) in degenerate.iter().enumerate() {
        let tokens: Vec<usize> = if degen {
            let len = rng.gen_range(2..=3);
            let phrase: Vec<usize> = (0..len).map(|_| rng.gen_range(0..head)).collect();
            phrase.iter().copied().cycle().take(cfg.doc_len).collect()
        } else {
            let mut t = vec![unigram.sample(&mut rng)];
            while t.len() < cfg.doc_len {
                let prev = *t.last().expect("nonempty");
                let next = if rng.gen::<f64>() < 0.7 {
                    succ[prev][rng.gen_range(0..succ[prev].len().max(1))]
                } else {
                    unigram.sample(&mut rng)
                };
                t.push(next);
            }
            t
        };
        records.push(TextRecord {
            id: format!("doc{:06}", i + 1),
            source: Vec::new(),
            target: tokens.into_iter().map(word).collect(),
        });
    }
    (records, degenerate)
}

/// Renders LM records in the blank-line-separated document layout.
pub fn lm_text(records: &[TextRecord]) -> String {
    records
        .iter()
        .map(|r| r.target.join(" ") + "\n")
        .collect::<Vec<_>>()
        .join("\n")
}

/// Per topic: a question and two on-topic replies.
const TOPICS: [(&str, [&str; 2]); 8] = [
    (
        "did you like the espresso at that cafe",
        ["the espresso was bitter", "that cafe makes great espresso"],
    ),
    (
        "is it going to rain tomorrow afternoon",
        ["rain is likely after lunch", "bring an umbrella tomorrow"],
    ),
    (
        "which film should we watch tonight",
        ["watch the new thriller film", "that comedy film looks fun"],
    ),
    (
        "what are we cooking for dinner",
        ["pasta with tomato sauce", "let us grill some fish"],
    ),
    (
        "when does the train to boston leave",
        ["the train leaves at noon", "boston trains run hourly"],
    ),
    (
        "have you finished reading that novel",
        ["the novel ending surprised me", "i am on the last chapter"],
    ),
    (
        "who won the football match yesterday",
        ["our team won the match", "the match ended in a draw"],
    ),
    (
        "where should we travel this summer",
        ["a beach trip in july", "the mountains are cooler"],
    ),
];
const GREETINGS: [&str; 3] = ["hi", "hello", "hey"];
const GENERIC: [&str; 3] = ["i do not know", "i see", "ok"];

/// Template dialogues: a greeting turn, then a topical question. Three in
/// four replies stay on topic; the rest are generic and fit any context.
pub fn synthetic_dialogue(dialogues: usize, seed: u64) -> Vec<TextRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..dialogues)
        .map(|i| {
            let (question, replies) = TOPICS[rng.gen_range(0..TOPICS.len())];
            let greet = GREETINGS[rng.gen_range(0..GREETINGS.len())];
            let history = format!("{greet} {TURN_SEPARATOR} {question} ?");
            let response = if rng.gen::<f64>() < 0.25 {
                GENERIC[rng.gen_range(0..GENERIC.len())]
            } else {
                replies[rng.gen_range(0..replies.len())]
            };
            TextRecord {
                id: format!("line{:06}", i + 1),
                source: history.split_whitespace().map(str::to_string).collect(),
                target: response.split_whitespace().map(str::to_string).collect(),
            }
        })
        .collect()
}

/// Renders pair records as `source<TAB>target` lines.
pub fn pair_text(records: &[TextRecord]) -> String {
    records
        .iter()
        .map(|r| format!("{}\t{}\n", r.source.join(" "), r.target.join(" ")))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{parse_records, repetition_attr, LoadOptions, Task};
    use std::path::Path;

    #[test]
    fn lm_corpus_is_deterministic_and_half_degenerate() {
        let cfg = SyntheticLmConfig::default();
        let (a, flags) = synthetic_lm(&cfg);
        let (b, _) = synthetic_lm(&cfg);
        assert_eq!(a, b);
        assert_eq!(flags.iter().filter(|&&f| f).count(), 60);
        let rep = |r: &TextRecord| repetition_attr(&r.target).unwrap();
        let degen: f64 = a
            .iter()
            .zip(&flags)
            .filter(|(_, &f)| f)
            .map(|(r, _)| rep(r))
            .sum::<f64>()
            / 60.0;
        let plain: f64 = a
            .iter()
            .zip(&flags)
            .filter(|(_, &f)| !f)
            .map(|(r, _)| rep(r))
            .sum::<f64>()
            / 60.0;
        assert!(degen > plain + 0.3, "{degen} vs {plain}");
    }

    #[test]
    fn rendered_text_parses_back() {
        let (recs, _) = synthetic_lm(&SyntheticLmConfig {
            documents: 5,
            ..Default::default()
        });
        let back = parse_records(
            &lm_text(&recs),
            Path::new("t"),
            Task::Lm,
            &LoadOptions::default(),
        )
        .unwrap();
        assert_eq!(back, recs);
        let d = synthetic_dialogue(7, 1);
        let back = parse_records(
            &pair_text(&d),
            Path::new("t"),
            Task::Dialogue,
            &LoadOptions::default(),
        )
        .unwrap();
        assert_eq!(back, d);
    }
}
