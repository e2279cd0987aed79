//! Greedy decoding and top-k sampling.
//!
//! Sampling uses `ChaCha8Rng` and draws exactly one uniform `f64` per sampled
//! token, so a seed fixes the output given identical floats.

use std::collections::BTreeSet;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Token, BOS, EOS};
use crate::error::{Error, Result};
use crate::model::{Arch, Model, ParameterSet};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Greedy,
    TopK,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecodeConfig {
    pub strategy: Strategy,
    pub k: usize,
    pub max_new_tokens: usize,
    /// Tokens of each evaluation unit used as the condition.
    pub prefix_len: usize,
    pub seed: u64,
    pub stop_tokens: BTreeSet<Token>,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::TopK,
            k: 20,
            max_new_tokens: 100,
            prefix_len: 50,
            seed: 0,
            stop_tokens: BTreeSet::from([EOS]),
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::config("decode.k", "must be at least 1"));
        }
        if self.max_new_tokens == 0 {
            return Err(Error::config("decode.max_new_tokens", "must be at least 1"));
        }
        Ok(())
    }
}

/// Argmax of a log-probability row, smallest index on exact ties.
pub fn greedy_step(row: &[f64]) -> Token {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Indices of the `k` most probable entries, by descending probability and
/// then ascending index.
pub fn top_k_indices(row: &[f64], k: usize) -> Vec<Token> {
    let mut idx: Vec<Token> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    idx.truncate(k.max(1));
    idx
}

/// The distribution `top_k_step` samples from, as probabilities over the
/// full vocabulary.
pub fn top_k_distribution(row: &[f64], k: usize) -> Vec<f64> {
    let keep = top_k_indices(row, k);
    let total: f64 = keep.iter().map(|&i| row[i].exp()).sum();
    let mut out = vec![0.0; row.len()];
    for &i in &keep {
        out[i] = row[i].exp() / total;
    }
    out
}

/// Samples from the renormalized top-k set by inverse CDF over the sorted
/// candidates. Consumes one uniform draw.
pub fn top_k_step<R: RngCore + ?Sized>(row: &[f64], k: usize, rng: &mut R) -> Token {
    let keep = top_k_indices(row, k);
    let probs: Vec<f64> = keep.iter().map(|&i| row[i].exp()).collect();
    let total: f64 = probs.iter().sum();
    let u = rng.gen::<f64>() * total;
    let mut acc = 0.0;
    for (&i, &p) in keep.iter().zip(&probs) {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // Rounding can leave u just above the accumulated mass.
    *keep
        .iter()
        .zip(&probs)
        .rev()
        .find(|(_, &p)| p > 0.0)
        .map_or(&keep[0], |(i, _)| i)
}

/// Continues `condition` with a fresh `ChaCha8Rng` seeded from `cfg.seed`.
pub fn generate(
    model: &Model,
    params: &ParameterSet,
    cfg: &DecodeConfig,
    condition: &[Token],
) -> Result<Vec<Token>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    generate_with_rng(model, params, cfg, condition, &mut rng)
}

/// Autoregressive continuation. Decoder-only models read `[BOS] ++ condition`
/// as the target prefix; encoder-decoder models encode the condition and
/// start the target from `BOS`. The returned tokens exclude the condition and
/// any stop token.
pub fn generate_with_rng<R: RngCore + ?Sized>(
    model: &Model,
    params: &ParameterSet,
    cfg: &DecodeConfig,
    condition: &[Token],
    rng: &mut R,
) -> Result<Vec<Token>> {
    cfg.validate()?;
    let max = model.config().max_positions;
    if condition.len() + cfg.max_new_tokens > max {
        return Err(Error::LengthExceeded {
            len: condition.len() + cfg.max_new_tokens,
            max,
        });
    }
    let (x, mut y_in): (&[Token], Vec<Token>) = match model.config().arch {
        Arch::DecoderOnly => (
            &[],
            std::iter::once(BOS)
                .chain(condition.iter().copied())
                .collect(),
        ),
        Arch::EncoderDecoder => (condition, vec![BOS]),
    };
    let start = y_in.len();
    for _ in 0..cfg.max_new_tokens {
        let lp = model.forward(params, x, &y_in)?;
        let row = lp.row(lp.rows() - 1);
        let tok = match cfg.strategy {
            Strategy::Greedy => greedy_step(row),
            Strategy::TopK => top_k_step(row, cfg.k, rng),
        };
        if cfg.stop_tokens.contains(&tok) {
            break;
        }
        y_in.push(tok);
    }
    Ok(y_in.split_off(start))
}

/// The prefix-continuation protocol: the first `prefix_len` tokens condition
/// the model, the rest is the reference continuation.
pub fn split_prefix(seq: &[Token], prefix_len: usize) -> (&[Token], &[Token]) {
    seq.split_at(prefix_len.min(seq.len()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub id: String,
    pub condition: String,
    pub output: String,
}

pub fn write_generations(path: &Path, records: &[GenerationRecord]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for r in records {
        let line = serde_json::to_string(r).expect("records serialize");
        writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

pub fn read_generations(path: &Path) -> Result<Vec<GenerationRecord>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{any, prop, prop_assert, prop_assert_eq, proptest};
    use proptest::strategy::Strategy as _;

    fn ln(p: &[f64]) -> Vec<f64> {
        p.iter().map(|x| x.ln()).collect()
    }

    #[test]
    fn greedy_examples() {
        assert_eq!(greedy_step(&ln(&[0.1, 0.7, 0.2])), 1);
        assert_eq!(greedy_step(&ln(&[0.5, 0.5])), 0);
        assert_eq!(greedy_step(&ln(&[0.0, 0.0, 1.0])), 2);
    }

    #[test]
    fn top_k_renormalizes_by_hand() {
        let d = top_k_distribution(&ln(&[0.6, 0.3, 0.1]), 2);
        assert!((d[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((d[1] - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(d[2], 0.0);
    }

    #[test]
    fn full_k_sampling_matches_the_row_within_three_sigma() {
        let p = [0.5, 0.25, 0.15, 0.1];
        let row = ln(&p);
        let mut rng = ChaCha8Rng::seed_from_u64(123);
        let n = 100_000;
        let mut counts = [0usize; 4];
        for _ in 0..n {
            counts[top_k_step(&row, 4, &mut rng)] += 1;
        }
        for (c, q) in counts.iter().zip(p) {
            let sigma = (n as f64 * q * (1.0 - q)).sqrt();
            assert!((*c as f64 - n as f64 * q).abs() < 3.0 * sigma, "{counts:?}");
        }
    }

    #[test]
    fn one_draw_per_sampled_token() {
        let row = ln(&[0.2, 0.3, 0.5]);
        let mut a = ChaCha8Rng::seed_from_u64(5);
        let mut b = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10 {
            top_k_step(&row, 2, &mut a);
            let _: f64 = b.gen();
        }
        assert_eq!(a.gen::<u64>(), b.gen::<u64>());
    }

    #[test]
    fn config_validation() {
        assert!(DecodeConfig::default().validate().is_ok());
        assert!(DecodeConfig {
            k: 0,
            ..DecodeConfig::default()
        }
        .validate()
        .is_err());
        assert!(DecodeConfig {
            max_new_tokens: 0,
            ..DecodeConfig::default()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn prefix_split() {
        assert_eq!(split_prefix(&[1, 2, 3], 2), (&[1, 2][..], &[3][..]));
        assert_eq!(split_prefix(&[1], 5), (&[1][..], &[][..]));
    }

    fn row_strategy() -> impl proptest::strategy::Strategy<Value = Vec<f64>> {
        prop::collection::vec(0.01f64..1.0, 2..12).prop_map(|w| {
            let s: f64 = w.iter().sum();
            w.iter().map(|x| (x / s).ln()).collect()
        })
    }

    proptest! {
        #[test]
        fn k_one_is_greedy(row in row_strategy(), seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            prop_assert_eq!(top_k_step(&row, 1, &mut rng), greedy_step(&row));
        }

        #[test]
        fn samples_stay_in_the_top_k(row in row_strategy(), k in 1usize..6, seed in any::<u64>()) {
            let keep = top_k_indices(&row, k);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for _ in 0..20 {
                prop_assert!(keep.contains(&top_k_step(&row, k, &mut rng)));
            }
        }
    }
}
