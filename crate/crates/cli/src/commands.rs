use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use lfd_core::corpus::{
    encode_records, read_records, read_scores_csv, score_records, token_counts, write_scores_csv,
    AttributeMetric, AttributeScore, Example, LoadOptions, Task, TextRecord, Token, Tokenizer,
    Vocab, EOS,
};
use lfd_core::decode::{
    generate, read_generations, split_prefix, write_generations, DecodeConfig, GenerationRecord,
};
use lfd_core::dynamics::{run_dynamics, write_dynamics_csv};
use lfd_core::metrics::{
    bleu, corpus_repetition, distinct_n, kld_unigram, novel_n, perplexity, rouge, self_bleu,
    target_log_probs, unique_tokens, write_reports_jsonl, write_summary_csv, zipf_coefficient,
    FileRef, MetricReport, RougeVariant, KLD_EPSILON,
};
use lfd_core::model::{load_checkpoint, save_checkpoint, Model, ParameterSet};
use lfd_core::objectives::ObjectiveKind;
use lfd_core::trainer::{train_degenerative, train_lfd_main, train_standard};
use serde::{Deserialize, Serialize};

use crate::config::{MetricsConfig, RunConfig};
use crate::UsageError;

const CONFIG_ECHO: &str = "config.toml";
const VOCAB_FILE: &str = "vocab.json";
const SUMMARY_FILE: &str = "summary.json";
const CHECKPOINT_DIR: &str = "checkpoints";

/// Written at the end of `train`; lets later stages find the chosen model.
#[derive(Debug, Serialize, Deserialize)]
pub struct RunSummary {
    pub objective: ObjectiveKind,
    /// Relative to the run directory.
    pub best_checkpoint: String,
    pub best_epoch: Option<usize>,
    pub train_log_sha256: String,
}

/// Empties `dir` when `overwrite` is set, refuses a nonempty one otherwise.
fn prepare_dir(dir: &Path, overwrite: bool) -> Result<()> {
    if dir.exists()
        && fs::read_dir(dir)
            .map(|mut d| d.next().is_some())
            .unwrap_or(true)
    {
        if !overwrite {
            bail!(UsageError(format!(
                "{} is not empty; pass --overwrite to replace it",
                dir.display()
            )));
        }
        fs::remove_dir_all(dir).with_context(|| format!("clearing {}", dir.display()))?;
    }
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(())
}

fn check_file_target(path: &Path, overwrite: bool) -> Result<()> {
    if path.exists() && !overwrite {
        bail!(UsageError(format!(
            "{} exists; pass --overwrite to replace it",
            path.display()
        )));
    }
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    Ok(())
}

fn load_options(cfg: &RunConfig) -> LoadOptions {
    LoadOptions {
        tokenizer: cfg.data.tokenizer,
        max_tokens: cfg.data.max_tokens,
    }
}

fn read_split(cfg: &RunConfig, path: &Path) -> Result<Vec<TextRecord>> {
    Ok(read_records(path, cfg.task, &load_options(cfg))?)
}

/// A finished or in-progress run directory.
struct Run {
    dir: PathBuf,
    cfg: RunConfig,
    vocab: Vocab,
}

impl Run {
    fn open(dir: &Path) -> Result<Self> {
        let echo = dir.join(CONFIG_ECHO);
        if !echo.exists() {
            bail!(UsageError(format!(
                "{} is not a run directory (no {CONFIG_ECHO})",
                dir.display()
            )));
        }
        let cfg = RunConfig::load(&echo)?;
        let vocab = Vocab::load(&dir.join(VOCAB_FILE))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            cfg,
            vocab,
        })
    }

    fn examples(&self, records: &[TextRecord]) -> Result<Vec<Example>> {
        Ok(encode_records(
            records,
            &self.vocab,
            self.cfg.data.max_target,
        )?)
    }

    fn summary(&self) -> Result<RunSummary> {
        let path = self.dir.join(SUMMARY_FILE);
        let text = fs::read_to_string(&path).map_err(|e| {
            UsageError(format!(
                "cannot read {}: {e}; has training finished?",
                path.display()
            ))
        })?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }

    fn load_model(&self, checkpoint: Option<&Path>) -> Result<(Model, ParameterSet)> {
        let path = match checkpoint {
            Some(p) => p.to_path_buf(),
            None => self.dir.join(self.summary()?.best_checkpoint),
        };
        if !path.exists() {
            bail!(UsageError(format!(
                "checkpoint {} does not exist",
                path.display()
            )));
        }
        let (mcfg, params) = load_checkpoint(&path)?;
        Ok((Model::new(mcfg)?, params))
    }

    fn epoch_checkpoints(&self) -> Result<Vec<(usize, PathBuf)>> {
        let dir = self.dir.join(CHECKPOINT_DIR);
        let mut out = Vec::new();
        for entry in fs::read_dir(&dir).with_context(|| format!("listing {}", dir.display()))? {
            let path = entry?.path();
            let name = path
                .file_name()
                .and_then(|n| n.to_str())
                .unwrap_or_default();
            if let Some(epoch) = name
                .strip_prefix("epoch_")
                .and_then(|s| s.strip_suffix(".ckpt"))
            {
                if let Ok(e) = epoch.parse() {
                    out.push((e, path.clone()));
                }
            }
        }
        out.sort();
        Ok(out)
    }
}

pub fn default_out_dir(config: &Path, cfg: &RunConfig, out_root: Option<&Path>) -> PathBuf {
    if let Some(dir) = &cfg.output_dir {
        return dir.clone();
    }
    let stem = config
        .file_stem()
        .map_or_else(|| "run".into(), |s| s.to_string_lossy().into_owned());
    out_root.unwrap_or(Path::new("runs")).join(stem)
}

pub fn train(
    config: &Path,
    out: Option<PathBuf>,
    out_root: Option<&Path>,
    seed: Option<u64>,
    overwrite: bool,
) -> Result<PathBuf> {
    let mut cfg = RunConfig::load(config)?;
    if let Some(s) = seed {
        cfg.set_seed(s);
    }
    cfg.validate()?;
    let out = out.unwrap_or_else(|| default_out_dir(config, &cfg, out_root));

    let train_records = read_split(&cfg, &cfg.data.train)?;
    let valid_records = match &cfg.data.valid {
        Some(p) => read_split(&cfg, p)?,
        None => Vec::new(),
    };
    let vocab = Vocab::from_records(&train_records);
    cfg.finalize_model(vocab.len())?;

    prepare_dir(&out, overwrite)?;
    fs::write(out.join(CONFIG_ECHO), cfg.to_toml())?;
    vocab.save(&out.join(VOCAB_FILE))?;
    let run = Run {
        dir: out.clone(),
        cfg,
        vocab,
    };
    let train = run.examples(&train_records)?;
    let valid = run.examples(&valid_records)?;
    let cfg = &run.cfg;
    let model = Model::new(cfg.model.clone())?;
    let ckdir = out.join(CHECKPOINT_DIR);
    fs::create_dir_all(&ckdir)?;

    let (log, best) = match cfg.objective.kind {
        ObjectiveKind::PoeCombined => {
            let (expert, elog) = train_degenerative(&model, &cfg.train, None, &train)?;
            save_checkpoint(&ckdir.join("expert.ckpt"), model.config(), &expert)?;
            elog.write(&out.join("expert_log.jsonl"))?;
            let o = train_lfd_main(
                &model,
                &cfg.train,
                &model,
                &expert,
                None,
                &train,
                &valid,
                Some(&ckdir),
            )?;
            (o.log, None)
        }
        ObjectiveKind::TruncatedCe => {
            let (params, log) = train_degenerative(&model, &cfg.train, None, &train)?;
            save_checkpoint(&ckdir.join("degenerative.ckpt"), model.config(), &params)?;
            (log, Some(format!("{CHECKPOINT_DIR}/degenerative.ckpt")))
        }
        _ => {
            let o = train_standard(
                &model,
                &cfg.train,
                None,
                &train,
                &valid,
                &cfg.objective,
                Some(&ckdir),
            )?;
            (o.log, None)
        }
    };
    log.write(&out.join("train_log.jsonl"))?;
    let best_checkpoint = best.unwrap_or_else(|| {
        let e = log
            .best_epoch
            .map(|i| &log.epochs[i])
            .and_then(|e| e.checkpoint_path.clone());
        format!("{CHECKPOINT_DIR}/{}", e.unwrap_or_default())
    });
    let summary = RunSummary {
        objective: cfg.objective.kind,
        best_checkpoint,
        best_epoch: log.best_epoch.map(|i| log.epochs[i].epoch),
        train_log_sha256: log.digest(),
    };
    fs::write(
        out.join(SUMMARY_FILE),
        serde_json::to_string_pretty(&summary)? + "\n",
    )?;
    Ok(out)
}

fn text(run: &Run, ids: &[Token]) -> String {
    run.cfg.data.tokenizer.detokenize(&run.vocab.decode(ids))
}

/// Condition and reference continuation for one test example.
fn condition_of<'a>(run: &Run, ex: &'a Example) -> (&'a [Token], Vec<Token>) {
    let strip = |s: &[Token]| s.iter().copied().filter(|&t| t != EOS).collect::<Vec<_>>();
    match run.cfg.task {
        Task::Lm => {
            let (c, rest) = split_prefix(&ex.y, run.cfg.decode.prefix_len);
            (c, strip(rest))
        }
        Task::Dialogue | Task::Summarization => (&ex.x, strip(&ex.y)),
    }
}

/// Seed for the `i`-th unit, so each generation owns an independent stream.
fn unit_seed(seed: u64, i: usize) -> u64 {
    seed ^ (i as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

pub fn generate_cmd(
    run_dir: &Path,
    checkpoint: Option<&Path>,
    out: Option<PathBuf>,
    seed: Option<u64>,
    overwrite: bool,
) -> Result<PathBuf> {
    let run = Run::open(run_dir)?;
    let out = out.unwrap_or_else(|| run_dir.join("generations.jsonl"));
    let refs_out = out.with_file_name("references.jsonl");
    check_file_target(&out, overwrite)?;
    check_file_target(&refs_out, overwrite)?;
    let (model, params) = run.load_model(checkpoint)?;
    let test = run.examples(&read_split(&run.cfg, &run.cfg.data.test)?)?;
    let base = DecodeConfig {
        seed: seed.unwrap_or(run.cfg.decode.seed),
        ..run.cfg.decode.clone()
    };
    let mut gens = Vec::with_capacity(test.len());
    let mut refs = Vec::with_capacity(test.len());
    for (i, ex) in test.iter().enumerate() {
        let (cond, reference) = condition_of(&run, ex);
        let dc = DecodeConfig {
            seed: unit_seed(base.seed, i),
            ..base.clone()
        };
        let output = generate(&model, &params, &dc, cond)?;
        gens.push(GenerationRecord {
            id: ex.id.clone(),
            condition: text(&run, cond),
            output: text(&run, &output),
        });
        refs.push(GenerationRecord {
            id: ex.id.clone(),
            condition: text(&run, cond),
            output: text(&run, &reference),
        });
    }
    write_generations(&out, &gens)?;
    write_generations(&refs_out, &refs)?;
    Ok(out)
}

/// Records a metric, or why it could not be computed.
fn keep(
    reports: &mut Vec<MetricReport>,
    skipped: &mut Vec<String>,
    r: lfd_core::Result<MetricReport>,
    name: String,
) {
    match r {
        Ok(r) => reports.push(r),
        Err(e) => skipped.push(format!("{name}: {e}")),
    }
}

fn split_words(t: Tokenizer, s: &str) -> Vec<String> {
    t.tokenize(s)
}

#[allow(clippy::too_many_arguments)]
pub fn evaluate_cmd(
    generations: &Path,
    reference: &Path,
    run_dir: Option<&Path>,
    checkpoint: Option<&Path>,
    metric_names: Option<Vec<String>>,
    out: Option<PathBuf>,
    overwrite: bool,
) -> Result<PathBuf> {
    let run = run_dir.map(Run::open).transpose()?;
    let mut mcfg = run
        .as_ref()
        .map_or_else(MetricsConfig::default, |r| r.cfg.metrics.clone());
    if let Some(names) = metric_names {
        mcfg.names = names;
    }
    for name in &mcfg.names {
        if !crate::config::METRIC_NAMES.contains(&name.as_str()) {
            bail!(UsageError(format!("unknown metric `{name}`")));
        }
    }
    let tokenizer = run
        .as_ref()
        .map_or(Tokenizer::Whitespace, |r| r.cfg.data.tokenizer);
    let out_dir =
        out.unwrap_or_else(|| generations.parent().unwrap_or(Path::new(".")).to_path_buf());
    let reports_path = out_dir.join("reports.jsonl");
    let summary_path = out_dir.join("metrics.csv");
    check_file_target(&reports_path, overwrite)?;
    check_file_target(&summary_path, overwrite)?;

    let gens = read_generations(generations)?;
    let refs = read_generations(reference)?;
    if gens.is_empty() {
        bail!(UsageError(format!(
            "{} holds no generations",
            generations.display()
        )));
    }
    let ref_by_id: HashMap<&str, &GenerationRecord> =
        refs.iter().map(|r| (r.id.as_str(), r)).collect();
    let mut pairs = Vec::with_capacity(gens.len());
    for g in &gens {
        let r = ref_by_id
            .get(g.id.as_str())
            .ok_or_else(|| UsageError(format!("generation `{}` has no reference record", g.id)))?;
        pairs.push((g, *r));
    }
    let gen_tokens: Vec<Vec<String>> = gens
        .iter()
        .map(|g| split_words(tokenizer, &g.output))
        .collect();
    let ref_tokens: Vec<Vec<String>> = pairs
        .iter()
        .map(|(_, r)| split_words(tokenizer, &r.output))
        .collect();
    let cond_tokens: Vec<Vec<String>> = gens
        .iter()
        .map(|g| split_words(tokenizer, &g.condition))
        .collect();

    let gfile = FileRef::of(generations)?;
    let rfile = Some(FileRef::of(reference)?);
    let report =
        |name: &str, value: f64| MetricReport::new(name, value, gfile.clone(), rfile.clone());
    let mut reports = Vec::new();
    let mut skipped = Vec::new();
    let nonempty_gens: Vec<&Vec<String>> = gen_tokens.iter().filter(|g| !g.is_empty()).collect();
    let n_units = gens.len();

    if let Some(run) = &run {
        if mcfg.wants("ppl_paper") || mcfg.wants("ppl_standard") {
            let (model, params) = run.load_model(checkpoint)?;
            let test = run.examples(&read_split(&run.cfg, &run.cfg.data.test)?)?;
            let lps = target_log_probs(&model, &params, &test)?;
            let p = perplexity(&lps)?;
            let flag = |r: MetricReport| {
                if p.zero_probability {
                    r.with_flag("zero_probability")
                } else {
                    r
                }
            };
            for (name, v) in [("ppl_paper", p.arithmetic), ("ppl_standard", p.standard)] {
                if mcfg.wants(name) {
                    reports.push(flag(report(name, v).with_count("target_tokens", lps.len())));
                }
            }
        }
    }
    if mcfg.wants("length") {
        let total: usize = gen_tokens.iter().map(Vec::len).sum();
        reports.push(report("length", total as f64 / n_units as f64).with_count("tokens", total));
    }
    if mcfg.wants("zipf") {
        keep(
            &mut reports,
            &mut skipped,
            zipf_coefficient(&gen_tokens).map(|v| report("zipf", v)),
            "zipf".into(),
        );
    }
    if mcfg.wants("repetition") {
        let r = corpus_repetition(&gen_tokens, mcfg.repetition_window).map(|v| {
            let r = report("repetition", v).with_count("sequences", nonempty_gens.len());
            match mcfg.repetition_window {
                Some(w) => r.with_count("window", w),
                None => r,
            }
        });
        keep(&mut reports, &mut skipped, r, "repetition".into());
    }
    if mcfg.wants("unique") {
        reports.push(
            report("unique", unique_tokens(&gen_tokens) as f64).with_count("sequences", n_units),
        );
    }
    if mcfg.wants("kld") {
        keep(
            &mut reports,
            &mut skipped,
            kld_unigram(&gen_tokens, &ref_tokens, KLD_EPSILON).map(|v| report("kld", v)),
            "kld".into(),
        );
    }
    if mcfg.wants("bleu") {
        let mut scores = Vec::new();
        for (g, r) in gen_tokens.iter().zip(&ref_tokens) {
            // An empty output scores zero against its reference.
            scores.push(if g.is_empty() || r.is_empty() {
                0.0
            } else {
                bleu(g, &[r.as_slice()], mcfg.bleu_max_n)?
            });
        }
        let mean = scores.iter().sum::<f64>() / scores.len() as f64;
        reports.push(
            report("bleu", mean)
                .with_n(mcfg.bleu_max_n)
                .with_count("pairs", scores.len()),
        );
    }
    if mcfg.wants("self_bleu") {
        let corpus: Vec<Vec<String>> = nonempty_gens.iter().map(|g| (*g).clone()).collect();
        keep(
            &mut reports,
            &mut skipped,
            self_bleu(&corpus, mcfg.self_bleu_n)
                .map(|v| report("self_bleu", v).with_n(mcfg.self_bleu_n)),
            "self_bleu".into(),
        );
    }
    if mcfg.wants("distinct") {
        for &n in &mcfg.distinct_n {
            keep(
                &mut reports,
                &mut skipped,
                distinct_n(&gen_tokens, n).map(|v| report("distinct", v).with_n(n)),
                format!("distinct_{n}"),
            );
        }
    }
    if mcfg.wants("novel") {
        for &n in &mcfg.novel_n {
            let vals: Vec<f64> = gen_tokens
                .iter()
                .zip(&cond_tokens)
                .filter(|(g, _)| g.len() >= n)
                .map(|(g, c)| novel_n(g, c, n))
                .collect::<lfd_core::Result<_>>()?;
            if vals.is_empty() {
                skipped.push(format!("novel_{n}: no generation has {n} tokens"));
            } else {
                let mean = vals.iter().sum::<f64>() / vals.len() as f64;
                reports.push(
                    report("novel", mean)
                        .with_n(n)
                        .with_count("sequences", vals.len()),
                );
            }
        }
    }
    for (name, variant) in [
        ("rouge_1", RougeVariant::R1),
        ("rouge_2", RougeVariant::R2),
        ("rouge_l", RougeVariant::RL),
    ] {
        if mcfg.wants(name) {
            let mean = gen_tokens
                .iter()
                .zip(&ref_tokens)
                .map(|(g, r)| rouge(g, r, variant))
                .sum::<f64>()
                / n_units as f64;
            reports.push(report(name, mean).with_count("pairs", n_units));
        }
    }
    for s in &skipped {
        eprintln!("skipped {s}");
    }
    fs::create_dir_all(&out_dir)?;
    write_reports_jsonl(&reports_path, &reports)?;
    write_summary_csv(&summary_path, &reports)?;
    Ok(reports_path)
}

pub struct DynamicsArgs<'a> {
    pub run_dir: &'a Path,
    pub metric: Option<AttributeMetric>,
    pub n: usize,
    pub sentence_level: bool,
    pub scores: Option<&'a Path>,
    pub out: Option<PathBuf>,
    pub overwrite: bool,
}

pub fn dynamics_cmd(a: DynamicsArgs<'_>) -> Result<PathBuf> {
    let run = Run::open(a.run_dir)?;
    let out = a.out.unwrap_or_else(|| a.run_dir.join("dynamics.csv"));
    check_file_target(&out, a.overwrite)?;
    let records = read_split(&run.cfg, &run.cfg.data.train)?;
    let scores = match a.scores {
        Some(p) => read_scores_csv(p)?,
        None => score_records(&records, &token_counts(&records), &Default::default())?,
    };
    let examples = run.examples(&records)?;
    // Windowed examples (`<id>.<k>`) inherit the score of their record.
    let by_id: HashMap<(&str, AttributeMetric), f64> = scores
        .iter()
        .map(|s| ((s.example_id.as_str(), s.metric), s.value))
        .collect();
    let metrics: Vec<AttributeMetric> = match a.metric {
        Some(m) => vec![m],
        None => AttributeMetric::ALL
            .into_iter()
            .filter(|m| scores.iter().any(|s| s.metric == *m))
            .collect(),
    };
    let ckpts = run.epoch_checkpoints()?;
    if ckpts.len() < 2 {
        bail!(UsageError(format!(
            "dynamics needs at least two epoch checkpoints, found {}",
            ckpts.len()
        )));
    }
    let mut loaded = Vec::with_capacity(ckpts.len());
    let mut model = None;
    for (epoch, path) in &ckpts {
        let (mcfg, params) = load_checkpoint(path)?;
        model.get_or_insert(Model::new(mcfg)?);
        loaded.push((*epoch, params));
    }
    let model = model.expect("at least two checkpoints");
    let terminators: BTreeSet<Token> = BTreeSet::from([run.vocab.id(".")]);
    let mut curves = Vec::new();
    for metric in metrics {
        let expanded: Vec<AttributeScore> = examples
            .iter()
            .filter_map(|ex| {
                let record = ex.id.split_once('.').map_or(ex.id.as_str(), |(r, _)| r);
                by_id.get(&(record, metric)).map(|&value| AttributeScore {
                    example_id: ex.id.clone(),
                    metric,
                    value,
                })
            })
            .collect();
        let n = a.n.min(expanded.len() / 2);
        if n == 0 {
            bail!(UsageError(format!(
                "too few scored examples for metric {metric}"
            )));
        }
        if n < a.n {
            eprintln!(
                "{metric}: group size reduced to {n} ({} scored examples)",
                expanded.len()
            );
        }
        let (hi, lo) = run_dynamics(
            &model,
            &loaded,
            &examples,
            &expanded,
            metric,
            n,
            a.sentence_level.then_some(&terminators),
        )?;
        curves.push(hi);
        curves.push(lo);
    }
    write_dynamics_csv(&out, &curves)?;
    Ok(out)
}

pub fn score_attrs_cmd(
    data: &Path,
    task: Task,
    tokenizer: Tokenizer,
    out: &Path,
    overlap_n: usize,
    bandwidth: f64,
    overwrite: bool,
) -> Result<()> {
    check_file_target(out, overwrite)?;
    let records = read_records(
        data,
        task,
        &LoadOptions {
            tokenizer,
            ..LoadOptions::default()
        },
    )?;
    let opts = lfd_core::corpus::ScoringOptions {
        overlap_n,
        bandwidth,
        ..Default::default()
    };
    let scores = score_records(&records, &token_counts(&records), &opts)?;
    write_scores_csv(out, &scores)?;
    Ok(())
}
