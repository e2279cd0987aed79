//! Per-group log-perplexity across training checkpoints.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{split_by_attribute, AttributeMetric, AttributeScore, Example, Token};
use crate::error::{Error, Result};
use crate::model::{LogProbMatrix, Model, ParameterSet};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    High,
    Low,
}

impl Group {
    pub fn name(self) -> &'static str {
        match self {
            Group::High => "high",
            Group::Low => "low",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DynamicsCurve {
    pub metric: AttributeMetric,
    pub group: Group,
    /// `(epoch, mean natural-log NLL per token)`, epochs strictly increasing.
    pub points: Vec<(usize, f64)>,
}

/// Splits target positions into sentences, each ending at a terminator token
/// (inclusive). A trailing unterminated run forms its own sentence.
fn sentence_spans(y: &[Token], terminators: &BTreeSet<Token>) -> Vec<(usize, usize)> {
    let mut spans = Vec::new();
    let mut start = 0;
    for (t, tok) in y.iter().enumerate() {
        if terminators.contains(tok) {
            spans.push((start, t + 1));
            start = t + 1;
        }
    }
    if start < y.len() {
        spans.push((start, y.len()));
    }
    spans
}

/// Mean over units of per-token NLL. Units are examples, or sentences when
/// `sentence_terminators` is given.
pub fn group_log_ppl(
    model: &Model,
    params: &ParameterSet,
    group: &[Example],
    sentence_terminators: Option<&BTreeSet<Token>>,
) -> Result<f64> {
    group_log_ppl_with(
        |ex| model.score(params, &ex.x, &ex.y),
        group,
        sentence_terminators,
    )
}

/// [`group_log_ppl`] with an arbitrary scorer in place of a model.
pub fn group_log_ppl_with<F>(
    mut score: F,
    group: &[Example],
    sentence_terminators: Option<&BTreeSet<Token>>,
) -> Result<f64>
where
    F: FnMut(&Example) -> Result<LogProbMatrix>,
{
    if group.is_empty() {
        return Err(Error::EmptyInput("dynamics group"));
    }
    let mut sum = 0.0;
    let mut units = 0usize;
    for ex in group {
        let lp = score(ex)?;
        let nll: Vec<f64> =
            ex.y.iter()
                .enumerate()
                .map(|(t, &y)| -lp.get(t, y))
                .collect();
        let spans = match sentence_terminators {
            Some(term) => sentence_spans(&ex.y, term),
            None => vec![(0, ex.y.len())],
        };
        for (a, b) in spans {
            sum += nll[a..b].iter().sum::<f64>() / (b - a) as f64;
            units += 1;
        }
    }
    Ok(sum / units as f64)
}

/// Curves for the top-`n` and bottom-`n` examples under `metric`, one point
/// per `(epoch, params)` checkpoint.
pub fn run_dynamics(
    model: &Model,
    checkpoints: &[(usize, ParameterSet)],
    examples: &[Example],
    scores: &[AttributeScore],
    metric: AttributeMetric,
    n: usize,
    sentence_terminators: Option<&BTreeSet<Token>>,
) -> Result<(DynamicsCurve, DynamicsCurve)> {
    if checkpoints.len() < 2 {
        return Err(Error::TooFew {
            need: 2,
            got: checkpoints.len(),
        });
    }
    if checkpoints.windows(2).any(|w| w[0].0 >= w[1].0) {
        return Err(Error::contract(
            "checkpoint epochs must be strictly increasing",
        ));
    }
    let relevant: Vec<AttributeScore> = scores
        .iter()
        .filter(|s| s.metric == metric)
        .cloned()
        .collect();
    let (top, bottom) = split_by_attribute(&relevant, n)?;
    let pick = |ids: &BTreeSet<String>| -> Vec<Example> {
        examples
            .iter()
            .filter(|e| ids.contains(&e.id))
            .cloned()
            .collect()
    };
    let (high, low) = (pick(&top), pick(&bottom));
    let mut curves = (
        DynamicsCurve {
            metric,
            group: Group::High,
            points: Vec::new(),
        },
        DynamicsCurve {
            metric,
            group: Group::Low,
            points: Vec::new(),
        },
    );
    for (epoch, params) in checkpoints {
        curves.0.points.push((
            *epoch,
            group_log_ppl(model, params, &high, sentence_terminators)?,
        ));
        curves.1.points.push((
            *epoch,
            group_log_ppl(model, params, &low, sentence_terminators)?,
        ));
    }
    Ok(curves)
}

/// CSV with header `metric,group,epoch,log_ppl`.
pub fn write_dynamics_csv(path: &Path, curves: &[DynamicsCurve]) -> Result<()> {
    let mut s = String::from("metric,group,epoch,log_ppl\n");
    for c in curves {
        for (epoch, v) in &c.points {
            s.push_str(&format!("{},{},{epoch},{v}\n", c.metric, c.group.name()));
        }
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sentence_spans_split_on_terminators() {
        let term = BTreeSet::from([9]);
        assert_eq!(
            sentence_spans(&[4, 9, 5, 6, 9, 7], &term),
            vec![(0, 2), (2, 5), (5, 6)]
        );
        assert_eq!(sentence_spans(&[4, 5], &term), vec![(0, 2)]);
    }

    /// Each target token gets probability `p[t]`, the rest spread evenly.
    fn rigged(ex: &Example, p: &[f64]) -> Result<LogProbMatrix> {
        let v = 4;
        let rows: Vec<Vec<f64>> =
            ex.y.iter()
                .zip(p)
                .map(|(&y, &q)| {
                    (0..v)
                        .map(|j| {
                            if j == y {
                                q
                            } else {
                                (1.0 - q) / (v - 1) as f64
                            }
                        })
                        .collect()
                })
                .collect();
        LogProbMatrix::from_probs(&rows)
    }

    #[test]
    fn hand_set_probabilities() {
        let a = Example::new("a", vec![], vec![1, 2]).unwrap();
        let b = Example::new("b", vec![], vec![3]).unwrap();
        let group = [a, b];
        let certain = group_log_ppl_with(|ex| rigged(ex, &[1.0, 1.0]), &group, None).unwrap();
        assert_eq!(certain, 0.0);
        // a: (ln2 + ln4)/2, b: ln2; mean of the two units.
        let v = group_log_ppl_with(
            |ex| rigged(ex, if ex.id == "a" { &[0.5, 0.25] } else { &[0.5] }),
            &group,
            None,
        )
        .unwrap();
        let ln2 = std::f64::consts::LN_2;
        assert!((v - (1.5 * ln2 + ln2) / 2.0).abs() < 1e-12);
        // Sentence units: terminator 1 splits a into [1] and [2].
        let term = BTreeSet::from([1]);
        let s = group_log_ppl_with(
            |ex| rigged(ex, if ex.id == "a" { &[0.5, 0.25] } else { &[0.5] }),
            &group,
            Some(&term),
        )
        .unwrap();
        assert!((s - (ln2 + 2.0 * ln2 + ln2) / 3.0).abs() < 1e-12);
        let reversed = [group[1].clone(), group[0].clone()];
        let r = group_log_ppl_with(
            |ex| rigged(ex, if ex.id == "a" { &[0.5, 0.25] } else { &[0.5] }),
            &reversed,
            None,
        )
        .unwrap();
        assert!((r - v).abs() < 1e-15);
        assert!(group_log_ppl_with(|ex| rigged(ex, &[1.0]), &[], None).is_err());
    }
}
