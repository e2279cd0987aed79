//! Training objectives.
//!
//! Every loss exists twice: as a plain evaluation over [`LogProbMatrix`]
//! values (tolerating `-inf` log-probabilities, so deterministic rows can be
//! expressed exactly) and as a graph recorded on a [`Tape`] for training.
//! Reductions are sums over target positions; callers decide on rescaling.

use serde::{Deserialize, Serialize};

use crate::corpus::Token;
use crate::error::{Error, Result};
use crate::model::LogProbMatrix;
use crate::tensor::{Tape, Tensor, Var};

/// Lower bound on `1 - p` inside the unlikelihood term of the tape graph.
const UL_FLOOR: f64 = 1e-12;

/// Per-position negative log-likelihoods with a validity mask.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenLossVector {
    pub values: Vec<f64>,
    pub mask: Vec<bool>,
}

impl TokenLossVector {
    pub fn new(values: Vec<f64>) -> Self {
        let mask = vec![true; values.len()];
        Self { values, mask }
    }

    pub fn with_mask(values: Vec<f64>, mask: Vec<bool>) -> Result<Self> {
        if values.len() != mask.len() {
            return Err(Error::contract("loss values and mask differ in length"));
        }
        Ok(Self { values, mask })
    }

    pub fn num_valid(&self) -> usize {
        self.mask.iter().filter(|m| **m).count()
    }

    /// Masked sum.
    pub fn total(&self) -> f64 {
        self.values
            .iter()
            .zip(&self.mask)
            .filter(|(_, m)| **m)
            .map(|(v, _)| v)
            .sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveKind {
    Mle,
    Focal,
    Cp,
    UlRepeat,
    TruncatedCe,
    PoeCombined,
    Face,
    DialogueUl,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ObjectiveConfig {
    pub kind: ObjectiveKind,
    pub gamma: f64,
    pub cp_weight: f64,
    pub ul_weight: f64,
    pub r: f64,
    pub lambda: f64,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            kind: ObjectiveKind::Mle,
            gamma: 2.0,
            cp_weight: 2.5,
            ul_weight: 1.0,
            r: 0.7,
            lambda: 0.5,
        }
    }
}

impl ObjectiveConfig {
    pub fn validate(&self) -> Result<()> {
        let nonneg = |field: &str, v: f64| {
            if v >= 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::config(
                    format!("objective.{field}"),
                    "must be finite and >= 0",
                ))
            }
        };
        nonneg("gamma", self.gamma)?;
        nonneg("cp_weight", self.cp_weight)?;
        nonneg("ul_weight", self.ul_weight)?;
        nonneg("lambda", self.lambda)?;
        if !(self.r > 0.0 && self.r <= 1.0) {
            return Err(Error::config("objective.r", "must lie in (0, 1]"));
        }
        match self.kind {
            ObjectiveKind::Face => Err(Error::Unimplemented("face objective")),
            ObjectiveKind::DialogueUl => Err(Error::Unimplemented("dialogue_ul objective")),
            _ => Ok(()),
        }
    }
}

fn check_rows(logp: &LogProbMatrix, y: &[Token]) -> Result<()> {
    if logp.rows() != y.len() {
        return Err(Error::contract(format!(
            "{} log-prob rows for {} targets",
            logp.rows(),
            y.len()
        )));
    }
    if let Some(&t) = y.iter().find(|&&t| t >= logp.cols()) {
        return Err(Error::InvalidToken {
            token: t,
            vocab_size: logp.cols(),
        });
    }
    Ok(())
}

/// Negative log-likelihood `sum_t -log p(y_t)` and its per-token terms.
pub fn mle_loss(logp: &LogProbMatrix, y: &[Token]) -> Result<(f64, TokenLossVector)> {
    check_rows(logp, y)?;
    let values: Vec<f64> = y
        .iter()
        .enumerate()
        .map(|(t, &v)| -logp.get(t, v))
        .collect();
    let v = TokenLossVector::new(values);
    Ok((v.total(), v))
}

/// `sum_t (1 - p_t)^gamma * -log p_t`.
pub fn focal_loss(logp: &LogProbMatrix, y: &[Token], gamma: f64) -> Result<f64> {
    if gamma < 0.0 {
        return Err(Error::contract("focal gamma must be >= 0"));
    }
    check_rows(logp, y)?;
    Ok(y.iter()
        .enumerate()
        .map(|(t, &v)| {
            let lp = logp.get(t, v);
            let nll = -lp;
            if nll == 0.0 {
                0.0
            } else {
                (1.0 - lp.exp()).powf(gamma) * nll
            }
        })
        .sum())
}

/// Shannon entropy (nats) of a log-probability row; `0 * log 0 = 0`.
pub fn row_entropy(row: &[f64]) -> f64 {
    row.iter()
        .filter(|lp| lp.is_finite())
        .map(|&lp| {
            let p = lp.exp();
            if p == 0.0 {
                0.0
            } else {
                -p * lp
            }
        })
        .sum()
}

/// Confidence penalty: `mle - cp_weight * sum_t H(p_t)`.
pub fn cp_loss(logp: &LogProbMatrix, y: &[Token], cp_weight: f64) -> Result<f64> {
    if cp_weight < 0.0 {
        return Err(Error::contract("cp weight must be >= 0"));
    }
    let (mle, _) = mle_loss(logp, y)?;
    let h: f64 = (0..logp.rows()).map(|t| row_entropy(logp.row(t))).sum();
    Ok(mle - cp_weight * h)
}

/// Candidates penalized at position `t`: distinct earlier targets other than `y_t`.
pub fn ul_candidates(y: &[Token], t: usize) -> Vec<Token> {
    let mut c: Vec<Token> = y[..t].iter().copied().filter(|&v| v != y[t]).collect();
    c.sort_unstable();
    c.dedup();
    c
}

/// Token-level unlikelihood: `mle + ul_weight * sum_t sum_c -log(1 - p_t(c))`.
pub fn ul_repeat_loss(logp: &LogProbMatrix, y: &[Token], ul_weight: f64) -> Result<f64> {
    if ul_weight < 0.0 {
        return Err(Error::contract("unlikelihood weight must be >= 0"));
    }
    let (mle, _) = mle_loss(logp, y)?;
    let mut penalty = 0.0;
    for t in 0..y.len() {
        for c in ul_candidates(y, t) {
            let p = logp.get(t, c).exp();
            if p > 0.0 {
                penalty -= (1.0 - p).ln();
            }
        }
    }
    Ok(mle + ul_weight * penalty)
}

/// Number of tokens kept by the small-loss selection: `max(1, floor(r * n))`.
pub fn selection_size(r: f64, n_valid: usize) -> usize {
    // The epsilon keeps products like 0.7 * 10 from flooring to 6.
    (((r * n_valid as f64) + 1e-9).floor() as usize).clamp(1, n_valid.max(1))
}

/// Keeps the `max(1, floor(r * N_valid))` valid tokens with the smallest loss,
/// pooled across the whole batch. Ties go to the lower `(sequence, position)`.
pub fn small_loss_select(batch: &[TokenLossVector], r: f64) -> Result<Vec<Vec<bool>>> {
    if !(r > 0.0 && r <= 1.0) {
        return Err(Error::contract("selection ratio must lie in (0, 1]"));
    }
    let mut pool: Vec<(f64, usize, usize)> = Vec::new();
    for (s, v) in batch.iter().enumerate() {
        for (p, (&loss, &valid)) in v.values.iter().zip(&v.mask).enumerate() {
            if valid {
                pool.push((loss, s, p));
            }
        }
    }
    if pool.is_empty() {
        return Err(Error::EmptyInput("small-loss selection batch"));
    }
    let keep = selection_size(r, pool.len());
    pool.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut mask: Vec<Vec<bool>> = batch.iter().map(|v| vec![false; v.values.len()]).collect();
    for &(_, s, p) in &pool[..keep] {
        mask[s][p] = true;
    }
    Ok(mask)
}

/// Sum of per-token NLL over the small-loss selection of the batch.
pub fn truncated_ce_loss(logps: &[LogProbMatrix], ys: &[&[Token]], r: f64) -> Result<f64> {
    if logps.len() != ys.len() {
        return Err(Error::contract("batch sizes differ"));
    }
    let losses = logps
        .iter()
        .zip(ys)
        .map(|(lp, y)| mle_loss(lp, y).map(|(_, v)| v))
        .collect::<Result<Vec<_>>>()?;
    let mask = small_loss_select(&losses, r)?;
    Ok(losses
        .iter()
        .zip(&mask)
        .flat_map(|(l, m)| l.values.iter().zip(m).filter(|(_, k)| **k).map(|(v, _)| *v))
        .sum())
}

/// `sigma = log p_D + log p_M`, elementwise.
pub fn poe_sigma(logp_d: &LogProbMatrix, logp_m: &LogProbMatrix) -> Result<Tensor> {
    if logp_d.rows() != logp_m.rows() || logp_d.cols() != logp_m.cols() {
        return Err(Error::contract("expert and main log-probs differ in shape"));
    }
    let data = logp_d
        .data()
        .iter()
        .zip(logp_m.data())
        .map(|(a, b)| a + b)
        .collect();
    Tensor::matrix(logp_d.rows(), logp_d.cols(), data)
}

/// Row-wise log-softmax that tolerates `-inf` entries.
fn normalize_scores(scores: &Tensor) -> Result<Vec<f64>> {
    let (_, n) = scores.dims2()?;
    let mut out = Vec::with_capacity(scores.numel());
    for row in scores.data().chunks(n) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !max.is_finite() {
            return Err(Error::contract(
                "product of experts has no support in a row",
            ));
        }
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        out.extend(row.iter().map(|v| v - lse));
    }
    Ok(out)
}

/// Normalized product distribution `softmax(sigma)` as log-probabilities.
pub fn poe_log_probs(logp_d: &LogProbMatrix, logp_m: &LogProbMatrix) -> Result<LogProbMatrix> {
    let sigma = poe_sigma(logp_d, logp_m)?;
    LogProbMatrix::new(logp_d.rows(), logp_d.cols(), normalize_scores(&sigma)?)
}

/// `-sum_t log softmax(sigma_t)[y_t]`.
pub fn poe_loss(logp_d: &LogProbMatrix, logp_m: &LogProbMatrix, y: &[Token]) -> Result<f64> {
    check_rows(logp_m, y)?;
    let combined = poe_log_probs(logp_d, logp_m)?;
    Ok(y.iter()
        .enumerate()
        .map(|(t, &v)| -combined.get(t, v))
        .sum())
}

/// `mle(logp_M) + lambda * poe(logp_D, logp_M)`.
pub fn lfd_loss(
    logp_d: &LogProbMatrix,
    logp_m: &LogProbMatrix,
    y: &[Token],
    lambda: f64,
) -> Result<f64> {
    if lambda < 0.0 {
        return Err(Error::contract("lambda must be >= 0"));
    }
    let (mle, _) = mle_loss(logp_m, y)?;
    Ok(mle + lambda * poe_loss(logp_d, logp_m, y)?)
}

/// Tape versions of the objectives. `logp` arguments are `rows x V`
/// log-probability nodes; expert inputs should be constants so no gradient
/// reaches the frozen model.
pub mod graph {
    use super::*;

    fn target_index(tape: &Tape, logp: Var, y: &[Token]) -> Result<Vec<(usize, usize)>> {
        let (rows, cols) = tape.value(logp).dims2()?;
        if rows != y.len() {
            return Err(Error::contract(format!(
                "{rows} log-prob rows for {} targets",
                y.len()
            )));
        }
        if let Some(&t) = y.iter().find(|&&t| t >= cols) {
            return Err(Error::InvalidToken {
                token: t,
                vocab_size: cols,
            });
        }
        Ok(y.iter().copied().enumerate().collect())
    }

    /// Per-token NLL vector.
    pub fn token_nll(tape: &mut Tape, logp: Var, y: &[Token]) -> Result<Var> {
        let idx = target_index(tape, logp, y)?;
        let picked = tape.gather(logp, idx)?;
        tape.scale(picked, -1.0)
    }

    pub fn mle(tape: &mut Tape, logp: Var, y: &[Token]) -> Result<Var> {
        let nll = token_nll(tape, logp, y)?;
        tape.sum(nll)
    }

    pub fn focal(tape: &mut Tape, logp: Var, y: &[Token], gamma: f64) -> Result<Var> {
        let idx = target_index(tape, logp, y)?;
        let lp = tape.gather(logp, idx)?;
        let p = tape.exp(lp)?;
        let neg_p = tape.scale(p, -1.0)?;
        let one_minus = tape.add_scalar(neg_p, 1.0)?;
        let one_minus = tape.clamp_min(one_minus, 0.0)?;
        let w = tape.powf(one_minus, gamma)?;
        let nll = tape.scale(lp, -1.0)?;
        let terms = tape.mul(w, nll)?;
        tape.sum(terms)
    }

    /// `sum_t sum_v p log p`, i.e. minus the total entropy.
    pub fn neg_entropy(tape: &mut Tape, logp: Var) -> Result<Var> {
        let p = tape.exp(logp)?;
        let plp = tape.mul(p, logp)?;
        tape.sum(plp)
    }

    pub fn cp(tape: &mut Tape, logp: Var, y: &[Token], cp_weight: f64) -> Result<Var> {
        let mle = mle(tape, logp, y)?;
        let ne = neg_entropy(tape, logp)?;
        let pen = tape.scale(ne, cp_weight)?;
        tape.add(mle, pen)
    }

    pub fn ul_repeat(tape: &mut Tape, logp: Var, y: &[Token], ul_weight: f64) -> Result<Var> {
        let mle = mle(tape, logp, y)?;
        let idx: Vec<(usize, usize)> = (0..y.len())
            .flat_map(|t| ul_candidates(y, t).into_iter().map(move |c| (t, c)))
            .collect();
        if idx.is_empty() {
            return Ok(mle);
        }
        let lp = tape.gather(logp, idx)?;
        let p = tape.exp(lp)?;
        let neg_p = tape.scale(p, -1.0)?;
        let one_minus = tape.add_scalar(neg_p, 1.0)?;
        let one_minus = tape.clamp_min(one_minus, UL_FLOOR)?;
        let log_one_minus = tape.ln(one_minus)?;
        let s = tape.sum(log_one_minus)?;
        let pen = tape.scale(s, -ul_weight)?;
        tape.add(mle, pen)
    }

    /// Truncated cross-entropy over a batch. Returns the summed loss of the
    /// selected tokens and the selection size. Unselected tokens are masked
    /// with zero weights, so their gradient is exactly zero.
    pub fn truncated_ce(
        tape: &mut Tape,
        logps: &[Var],
        ys: &[&[Token]],
        r: f64,
    ) -> Result<(Var, usize)> {
        if logps.len() != ys.len() || logps.is_empty() {
            return Err(Error::contract(
                "truncated_ce needs matching, nonempty batches",
            ));
        }
        let mut nlls = Vec::with_capacity(logps.len());
        let mut losses = Vec::with_capacity(logps.len());
        for (&lp, y) in logps.iter().zip(ys) {
            let nll = token_nll(tape, lp, y)?;
            losses.push(TokenLossVector::new(tape.value(nll).data().to_vec()));
            nlls.push(nll);
        }
        let mask = small_loss_select(&losses, r)?;
        let selected = mask.iter().flatten().filter(|k| **k).count();
        let mut total: Option<Var> = None;
        for (nll, m) in nlls.into_iter().zip(mask) {
            let w = m.into_iter().map(|k| if k { 1.0 } else { 0.0 }).collect();
            let s = tape.weighted_sum(nll, w)?;
            total = Some(match total {
                None => s,
                Some(acc) => tape.add(acc, s)?,
            });
        }
        Ok((total.expect("nonempty batch"), selected))
    }

    /// PoE NLL: `-sum_t log_softmax(logp_d + logp_m)[y_t]`.
    pub fn poe(tape: &mut Tape, logp_d: Var, logp_m: Var, y: &[Token]) -> Result<Var> {
        let sigma = tape.add(logp_d, logp_m)?;
        let combined = tape.log_softmax(sigma)?;
        mle(tape, combined, y)
    }

    pub fn lfd(tape: &mut Tape, logp_d: Var, logp_m: Var, y: &[Token], lambda: f64) -> Result<Var> {
        let mle = mle(tape, logp_m, y)?;
        let poe = poe(tape, logp_d, logp_m, y)?;
        let weighted = tape.scale(poe, lambda)?;
        tape.add(mle, weighted)
    }
}
