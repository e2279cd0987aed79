use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::hash::Hash;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

use super::cluster::{mean_shift, source_entropy, CharTrigramEmbedder, Embedder};
use super::{ngram_set, TextRecord};

#[derive(
    Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize, serde::Deserialize,
)]
#[serde(rename_all = "snake_case")]
pub enum AttributeMetric {
    AvgFrequency,
    Repetition,
    SourceEntropy,
    ContextOverlap,
}

impl AttributeMetric {
    pub const ALL: [AttributeMetric; 4] = [
        AttributeMetric::AvgFrequency,
        AttributeMetric::Repetition,
        AttributeMetric::SourceEntropy,
        AttributeMetric::ContextOverlap,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AttributeMetric::AvgFrequency => "avg_frequency",
            AttributeMetric::Repetition => "repetition",
            AttributeMetric::SourceEntropy => "source_entropy",
            AttributeMetric::ContextOverlap => "context_overlap",
        }
    }
}

impl fmt::Display for AttributeMetric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AttributeMetric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::config("metric", format!("unknown attribute metric `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttributeScore {
    pub example_id: String,
    pub metric: AttributeMetric,
    pub value: f64,
}

/// Mean corpus count of the tokens of `y` (repeats counted each time).
pub fn avg_frequency<T>(y: &[T], counts: &HashMap<T, usize>) -> Result<f64>
where
    T: Eq + Hash + fmt::Debug,
{
    if y.is_empty() {
        return Err(Error::EmptyInput("avg_frequency target"));
    }
    let mut total = 0usize;
    for t in y {
        match counts.get(t) {
            Some(&c) if c > 0 => total += c,
            _ => return Err(Error::MissingCount(format!("{t:?}"))),
        }
    }
    Ok(total as f64 / y.len() as f64)
}

/// Fraction of positions whose token already occurred earlier in the sequence.
pub fn repetition_attr<T: Eq + Hash>(seq: &[T]) -> Result<f64> {
    if seq.is_empty() {
        return Err(Error::EmptyInput("repetition sequence"));
    }
    let mut seen = HashSet::with_capacity(seq.len());
    let repeats = seq.iter().filter(|t| !seen.insert(*t)).count();
    Ok(repeats as f64 / seq.len() as f64)
}

/// `|N(x) ∩ N(y)| / |N(y)|` over the sets of token n-grams.
pub fn context_overlap<T: Eq + Hash>(x: &[T], y: &[T], n: usize) -> Result<f64> {
    if n == 0 {
        return Err(Error::contract("context_overlap needs n >= 1"));
    }
    if y.len() < n {
        return Err(Error::TooShort { len: y.len(), n });
    }
    let ny = ngram_set(y, n);
    let nx = ngram_set(x, n);
    Ok(ny.intersection(&nx).count() as f64 / ny.len() as f64)
}

/// Top and bottom `n` example ids by score. Scores are ranked ascending by
/// `(value, id)`; the bottom group is the first `n`, the top group the last `n`.
pub fn split_by_attribute(
    scores: &[AttributeScore],
    n: usize,
) -> Result<(BTreeSet<String>, BTreeSet<String>)> {
    if n == 0 || 2 * n > scores.len() {
        return Err(Error::contract(format!(
            "cannot take two disjoint groups of {n} from {} scores",
            scores.len()
        )));
    }
    let mut ranked: Vec<&AttributeScore> = scores.iter().collect();
    ranked.sort_by(|a, b| {
        a.value
            .total_cmp(&b.value)
            .then_with(|| a.example_id.cmp(&b.example_id))
    });
    let bottom = ranked[..n].iter().map(|s| s.example_id.clone()).collect();
    let top = ranked[ranked.len() - n..]
        .iter()
        .map(|s| s.example_id.clone())
        .collect();
    Ok((top, bottom))
}

#[derive(Clone, Debug)]
pub struct ScoringOptions {
    /// n-gram order for context overlap.
    pub overlap_n: usize,
    /// Mean-shift bandwidth for source entropy clustering.
    pub bandwidth: f64,
    pub embedding_dim: usize,
}

impl Default for ScoringOptions {
    fn default() -> Self {
        Self {
            overlap_n: 2,
            bandwidth: 0.8,
            embedding_dim: 64,
        }
    }
}

/// Scores every record. Frequency counts come from `counts` (the training
/// split). Context metrics are produced only when every record has a source;
/// context overlap skips targets shorter than the n-gram order.
pub fn score_records(
    records: &[TextRecord],
    counts: &HashMap<String, usize>,
    opts: &ScoringOptions,
) -> Result<Vec<AttributeScore>> {
    let with_context = !records.is_empty() && records.iter().all(|r| !r.source.is_empty());
    let entropy = if with_context {
        let embedder = CharTrigramEmbedder::new(opts.embedding_dim);
        let ctx: Vec<Vec<f64>> = records.iter().map(|r| embedder.embed(&r.source)).collect();
        let resp: Vec<Vec<f64>> = records.iter().map(|r| embedder.embed(&r.target)).collect();
        let c_ctx = mean_shift(&ctx, opts.bandwidth)?;
        let c_resp = mean_shift(&resp, opts.bandwidth)?;
        Some(source_entropy(records.len(), &c_ctx, &c_resp)?)
    } else {
        None
    };

    let mut out = Vec::with_capacity(records.len() * 4);
    for (i, r) in records.iter().enumerate() {
        let mut push = |metric, value| {
            out.push(AttributeScore {
                example_id: r.id.clone(),
                metric,
                value,
            })
        };
        push(
            AttributeMetric::AvgFrequency,
            avg_frequency(&r.target, counts)?,
        );
        push(AttributeMetric::Repetition, repetition_attr(&r.target)?);
        if let Some(h) = &entropy {
            push(AttributeMetric::SourceEntropy, h[i]);
            if r.target.len() >= opts.overlap_n {
                push(
                    AttributeMetric::ContextOverlap,
                    context_overlap(&r.source, &r.target, opts.overlap_n)?,
                );
            }
        }
    }
    Ok(out)
}

pub fn write_scores_csv(path: &Path, scores: &[AttributeScore]) -> Result<()> {
    let mut s = String::from("example_id,metric,value\n");
    for sc in scores {
        s.push_str(&format!("{},{},{}\n", sc.example_id, sc.metric, sc.value));
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub fn read_scores_csv(path: &Path) -> Result<Vec<AttributeScore>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, "example_id,metric,value")) => {}
        _ => {
            return Err(parse_err(
                1,
                "expected header `example_id,metric,value`".into(),
            ))
        }
    }
    let mut out = Vec::new();
    for (i, line) in lines {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        let [id, metric, value] = fields[..] else {
            return Err(parse_err(i + 1, "expected three fields".into()));
        };
        out.push(AttributeScore {
            example_id: id.to_string(),
            metric: metric
                .parse()
                .map_err(|e: Error| parse_err(i + 1, e.to_string()))?,
            value: value
                .parse()
                .map_err(|e: std::num::ParseFloatError| parse_err(i + 1, e.to_string()))?,
        });
    }
    Ok(out)
}
