//! Evaluation metrics over generated corpora.
//!
//! Corpora are slices of token sequences; any hashable token type works, so
//! the same code scores id sequences and whitespace-split text.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::hash::Hash;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{ngram_counts, ngram_set, ngrams, Example};
use crate::error::{Error, Result};
use crate::model::{Model, ParameterSet};

/// Smoothing constant for [`kld_unigram`].
pub const KLD_EPSILON: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Perplexity {
    /// Arithmetic mean of reciprocal target probabilities.
    pub arithmetic: f64,
    /// `exp` of the mean negative log-likelihood.
    pub standard: f64,
    /// Set when some target had probability zero in floating point.
    pub zero_probability: bool,
}

/// Both perplexity variants from target-token log-probabilities, pooled over
/// every target position of every unit.
pub fn perplexity(target_logps: &[f64]) -> Result<Perplexity> {
    if target_logps.is_empty() {
        return Err(Error::EmptyInput("perplexity targets"));
    }
    let n = target_logps.len() as f64;
    let zero = target_logps.contains(&f64::NEG_INFINITY);
    if zero {
        return Ok(Perplexity {
            arithmetic: f64::INFINITY,
            standard: f64::INFINITY,
            zero_probability: true,
        });
    }
    let arithmetic = target_logps.iter().map(|&l| (-l).exp()).sum::<f64>() / n;
    let standard = (-target_logps.iter().sum::<f64>() / n).exp();
    Ok(Perplexity {
        arithmetic,
        standard,
        zero_probability: false,
    })
}

/// Log-probabilities the model assigns to each target token of `data`.
pub fn target_log_probs(
    model: &Model,
    params: &ParameterSet,
    data: &[Example],
) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    for ex in data {
        let lp = model.score(params, &ex.x, &ex.y)?;
        out.extend(ex.y.iter().enumerate().map(|(t, &y)| lp.get(t, y)));
    }
    Ok(out)
}

pub fn ppl_paper(target_logps: &[f64]) -> Result<f64> {
    perplexity(target_logps).map(|p| p.arithmetic)
}

pub fn ppl_standard(target_logps: &[f64]) -> Result<f64> {
    perplexity(target_logps).map(|p| p.standard)
}

fn unigram_counts<T: Eq + Hash>(corpus: &[Vec<T>]) -> HashMap<&T, usize> {
    let mut counts = HashMap::new();
    for t in corpus.iter().flatten() {
        *counts.entry(t).or_insert(0) += 1;
    }
    counts
}

/// Negated least-squares slope of log frequency against log rank.
pub fn zipf_coefficient<T: Eq + Hash>(corpus: &[Vec<T>]) -> Result<f64> {
    let mut freqs: Vec<usize> = unigram_counts(corpus).into_values().collect();
    if freqs.len() < 2 {
        return Err(Error::Undefined(
            "zipf coefficient needs at least two token types",
        ));
    }
    freqs.sort_unstable_by(|a, b| b.cmp(a));
    let pts: Vec<(f64, f64)> = freqs
        .iter()
        .enumerate()
        .map(|(i, &f)| (((i + 1) as f64).ln(), (f as f64).ln()))
        .collect();
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = pts.iter().map(|(x, _)| (x - mx).powi(2)).sum();
    // Adding zero turns a flat fit's -0 into 0.
    Ok(-sxy / sxx + 0.0)
}

/// Fraction of positions whose token already occurred within the previous
/// `window` tokens (`None` looks back to the start).
pub fn repetition_gen<T: Eq + Hash>(seq: &[T], window: Option<usize>) -> Result<f64> {
    if seq.is_empty() {
        return Err(Error::EmptyInput("generation"));
    }
    let hits = (0..seq.len())
        .filter(|&t| {
            let lo = window.map_or(0, |w| t.saturating_sub(w));
            seq[lo..t].contains(&seq[t])
        })
        .count();
    Ok(hits as f64 / seq.len() as f64)
}

/// Mean of [`repetition_gen`] over the nonempty sequences of a corpus.
pub fn corpus_repetition<T: Eq + Hash>(corpus: &[Vec<T>], window: Option<usize>) -> Result<f64> {
    let vals: Vec<f64> = corpus
        .iter()
        .filter(|s| !s.is_empty())
        .map(|s| repetition_gen(s, window))
        .collect::<Result<_>>()?;
    if vals.is_empty() {
        return Err(Error::EmptyInput("generations"));
    }
    Ok(vals.iter().sum::<f64>() / vals.len() as f64)
}

pub fn unique_tokens<T: Eq + Hash>(corpus: &[Vec<T>]) -> usize {
    corpus.iter().flatten().collect::<HashSet<_>>().len()
}

/// `KL(P_ref || P_gen)` over the union vocabulary, after adding `epsilon` to
/// every unigram probability and renormalizing.
pub fn kld_unigram<T: Eq + Hash>(
    generated: &[Vec<T>],
    reference: &[Vec<T>],
    epsilon: f64,
) -> Result<f64> {
    let g = unigram_counts(generated);
    let r = unigram_counts(reference);
    let (ng, nr) = (g.values().sum::<usize>(), r.values().sum::<usize>());
    if ng == 0 || nr == 0 {
        return Err(Error::EmptyInput("unigram corpus"));
    }
    // First-occurrence order keeps the float sum reproducible across runs.
    let mut seen = HashSet::new();
    let vocab: Vec<&T> = reference
        .iter()
        .chain(generated)
        .flatten()
        .filter(|t| seen.insert(*t))
        .collect();
    let v = vocab.len() as f64;
    let smooth = |counts: &HashMap<&T, usize>, n: usize, tok: &T| {
        (counts.get(tok).copied().unwrap_or(0) as f64 / n as f64 + epsilon) / (1.0 + v * epsilon)
    };
    let kl = vocab
        .iter()
        .map(|tok| {
            let p = smooth(&r, nr, tok);
            let q = smooth(&g, ng, tok);
            p * (p / q).ln()
        })
        .sum::<f64>();
    Ok(kl.max(0.0))
}

/// Corpus-free sentence BLEU with clipped precisions and a brevity penalty
/// against the closest reference length (shorter on ties).
///
/// Orders above the candidate length are dropped from the geometric mean.
/// A zero unigram precision yields 0; zero precisions of higher orders get
/// add-one smoothing.
pub fn bleu<T: Eq + Hash>(candidate: &[T], references: &[&[T]], max_n: usize) -> Result<f64> {
    if candidate.is_empty() {
        return Err(Error::EmptyInput("bleu candidate"));
    }
    if references.is_empty() {
        return Err(Error::EmptyInput("bleu references"));
    }
    let orders = max_n.max(1).min(candidate.len());
    let mut log_sum = 0.0;
    for n in 1..=orders {
        let cand = ngram_counts(candidate, n);
        let mut max_ref: HashMap<&[T], usize> = HashMap::new();
        for r in references {
            for (g, c) in ngram_counts(r, n) {
                let e = max_ref.entry(g).or_insert(0);
                *e = (*e).max(c);
            }
        }
        let total: usize = cand.values().sum();
        let clipped: usize = cand
            .iter()
            .map(|(g, &c)| c.min(max_ref.get(g).copied().unwrap_or(0)))
            .sum();
        let p = match (clipped, n) {
            (0, 1) => return Ok(0.0),
            (0, _) => 1.0 / (total + 1) as f64,
            _ => clipped as f64 / total as f64,
        };
        log_sum += p.ln();
    }
    let c = candidate.len();
    let r = references
        .iter()
        .map(|r| r.len())
        .min_by_key(|&l| (l.abs_diff(c), l))
        .expect("nonempty references");
    let bp = if c >= r {
        1.0
    } else {
        (1.0 - r as f64 / c as f64).exp()
    };
    Ok(bp * (log_sum / orders as f64).exp())
}

/// Mean BLEU of each generation against all the others.
pub fn self_bleu<T: Eq + Hash>(corpus: &[Vec<T>], n: usize) -> Result<f64> {
    if corpus.len() < 2 {
        return Err(Error::TooFew {
            need: 2,
            got: corpus.len(),
        });
    }
    let mut total = 0.0;
    for (i, cand) in corpus.iter().enumerate() {
        let refs: Vec<&[T]> = corpus
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != i)
            .map(|(_, s)| s.as_slice())
            .collect();
        total += bleu(cand, &refs, n)?;
    }
    Ok(total / corpus.len() as f64)
}

/// Distinct n-grams over total n-gram occurrences, pooled corpus-wide.
pub fn distinct_n<T: Eq + Hash>(corpus: &[Vec<T>], n: usize) -> Result<f64> {
    let mut seen = HashSet::new();
    let mut total = 0usize;
    for s in corpus {
        for g in ngrams(s, n) {
            seen.insert(g);
            total += 1;
        }
    }
    if total == 0 {
        return Err(Error::Undefined("distinct-n of a corpus without n-grams"));
    }
    Ok(seen.len() as f64 / total as f64)
}

/// Fraction of summary n-gram occurrences that never occur in the article.
pub fn novel_n<T: Eq + Hash>(summary: &[T], article: &[T], n: usize) -> Result<f64> {
    if n == 0 || summary.len() < n {
        return Err(Error::TooShort {
            len: summary.len(),
            n,
        });
    }
    let art = ngram_set(article, n);
    let grams: Vec<&[T]> = ngrams(summary, n).collect();
    let novel = grams.iter().filter(|g| !art.contains(*g)).count();
    Ok(novel as f64 / grams.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RougeVariant {
    R1,
    R2,
    RL,
}

fn f1(overlap: usize, cand: usize, reference: usize) -> f64 {
    if overlap == 0 {
        return 0.0;
    }
    let p = overlap as f64 / cand as f64;
    let r = overlap as f64 / reference as f64;
    2.0 * p * r / (p + r)
}

fn lcs_len<T: Eq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    for x in a {
        let mut cur = vec![0usize; b.len() + 1];
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        prev = cur;
    }
    prev[b.len()]
}

/// ROUGE F1. Sequences too short for the variant score 0.
pub fn rouge<T: Eq + Hash>(candidate: &[T], reference: &[T], variant: RougeVariant) -> f64 {
    match variant {
        RougeVariant::RL => f1(
            lcs_len(candidate, reference),
            candidate.len(),
            reference.len(),
        ),
        RougeVariant::R1 | RougeVariant::R2 => {
            let n = if variant == RougeVariant::R1 { 1 } else { 2 };
            let c = ngram_counts(candidate, n);
            let r = ngram_counts(reference, n);
            let overlap: usize = c
                .iter()
                .map(|(g, &k)| k.min(r.get(g).copied().unwrap_or(0)))
                .sum();
            f1(overlap, c.values().sum(), r.values().sum())
        }
    }
}

/// An input file identified by name and content digest.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileRef {
    pub name: String,
    pub sha256: String,
}

impl FileRef {
    pub fn of(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let name = path.file_name().map_or_else(
            || path.display().to_string(),
            |n| n.to_string_lossy().into_owned(),
        );
        Ok(Self::from_bytes(name, &bytes))
    }

    pub fn from_bytes(name: impl Into<String>, bytes: &[u8]) -> Self {
        let sha256 = Sha256::digest(bytes)
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect();
        Self {
            name: name.into(),
            sha256,
        }
    }
}

/// One computed metric and the inputs it came from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub metric: String,
    pub value: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n: Option<usize>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub counts: BTreeMap<String, usize>,
    pub generation_file: FileRef,
    pub reference_file: Option<FileRef>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub flags: Vec<String>,
}

impl MetricReport {
    pub fn new(
        metric: impl Into<String>,
        value: f64,
        generation_file: FileRef,
        reference_file: Option<FileRef>,
    ) -> Self {
        Self {
            metric: metric.into(),
            value,
            n: None,
            counts: BTreeMap::new(),
            generation_file,
            reference_file,
            flags: Vec::new(),
        }
    }

    pub fn with_n(mut self, n: usize) -> Self {
        self.n = Some(n);
        self
    }

    pub fn with_count(mut self, key: &str, value: usize) -> Self {
        self.counts.insert(key.to_string(), value);
        self
    }

    pub fn with_flag(mut self, flag: impl Into<String>) -> Self {
        self.flags.push(flag.into());
        self
    }

    /// Column label used by the CSV summary, e.g. `distinct_2`.
    pub fn column(&self) -> String {
        match self.n {
            Some(n) => format!("{}_{n}", self.metric),
            None => self.metric.clone(),
        }
    }
}

pub fn write_reports_jsonl(path: &Path, reports: &[MetricReport]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for r in reports {
        writeln!(
            f,
            "{}",
            serde_json::to_string(r).expect("reports serialize")
        )
        .map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

/// One header row of metric columns and one row of values.
pub fn write_summary_csv(path: &Path, reports: &[MetricReport]) -> Result<()> {
    let header: Vec<String> = reports.iter().map(MetricReport::column).collect();
    let values: Vec<String> = reports.iter().map(|r| r.value.to_string()).collect();
    fs::write(
        path,
        format!("{}\n{}\n", header.join(","), values.join(",")),
    )
    .map_err(|e| Error::io(path, e))
}
