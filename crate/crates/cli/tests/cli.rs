//! End-to-end checks of the `lfd` binary: exit codes, run layout, and
//! agreement of the attribute scorer with hand-written oracles.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

fn lfd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lfd"))
        .args(args)
        .env_remove("LFD_OUT_ROOT")
        .output()
        .expect("lfd runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// A small LM config over the bundled fixture corpus.
fn lm_config(dir: &Path, objective: &str, train_extra: &str) -> PathBuf {
    let data = fixtures().join("lm");
    let text = format!(
        r#"task = "lm"

[data]
train = "{train}"
valid = "{valid}"
test = "{test}"

[model]
arch = "decoder_only"
layers = 1
model_dim = 16
heads = 2
ffn_dim = 32
max_positions = 32

[train]
learning_rate = 0.003
epochs = 3
batch_size = 20
k = {{ epochs = 1.0 }}
h = {{ epochs = 1.0 }}
{train_extra}

[objective]
kind = "{objective}"

[decode]
strategy = "top_k"
k = 10
prefix_len = 4
max_new_tokens = 8
"#,
        train = data.join("train.txt").display(),
        valid = data.join("valid.txt").display(),
        test = data.join("test.txt").display(),
    );
    let path = dir.join(format!("{objective}.toml"));
    fs::write(&path, text).unwrap();
    path
}

fn train(config: &Path, out: &Path) -> Output {
    lfd(&[
        "train",
        "--config",
        config.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ])
}

fn files_under(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((
                    p.strip_prefix(dir).unwrap().to_path_buf(),
                    fs::read(&p).unwrap(),
                ));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn zero_ratio_is_rejected_before_training() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = lm_config(tmp.path(), "mle", "r = 0.0");
    let out = tmp.path().join("run");
    let o = train(&cfg, &out);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    assert!(!out.exists());
}

#[test]
fn malformed_data_reports_its_line() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.tsv");
    fs::write(&bad, "hi there\thello\nno tab on this line\n").unwrap();
    let o = lfd(&[
        "score-attrs",
        "--data",
        bad.to_str().unwrap(),
        "--task",
        "dialogue",
        "--out",
        tmp.path().join("s.csv").to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("bad.tsv:2:"), "{}", stderr(&o));
}

#[test]
fn divergence_exits_with_run_failure() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = lm_config(tmp.path(), "mle", "divergence_factor = 1.01");
    let text = fs::read_to_string(&cfg)
        .unwrap()
        .replace("learning_rate = 0.003", "learning_rate = 1000000.0");
    fs::write(&cfg, text).unwrap();
    let o = train(&cfg, &tmp.path().join("run"));
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    assert!(stderr(&o).contains("diverged"));
}

#[test]
fn missing_required_argument_is_usage_error() {
    let o = lfd(&["train"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn lfd_run_layout_and_downstream_commands() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = lm_config(tmp.path(), "poe_combined", "");
    let run = tmp.path().join("run");
    let o = train(&cfg, &run);
    assert_eq!(code(&o), 0, "{}", stderr(&o));

    // One checkpoint per epoch plus the frozen expert.
    let ckpts: Vec<String> = fs::read_dir(run.join("checkpoints"))
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    assert_eq!(ckpts.len(), 4, "{ckpts:?}");
    assert!(ckpts.contains(&"expert.ckpt".to_string()));
    for f in [
        "config.toml",
        "vocab.json",
        "summary.json",
        "train_log.jsonl",
        "expert_log.jsonl",
    ] {
        assert!(run.join(f).is_file(), "{f}");
    }

    let rs = run.to_str().unwrap();
    let missing = lfd(&[
        "generate",
        "--run",
        rs,
        "--checkpoint",
        "checkpoints/nope.ckpt",
    ]);
    assert_eq!(code(&missing), 2, "{}", stderr(&missing));

    let o = lfd(&["generate", "--run", rs]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let gens = run.join("generations.jsonl");
    let refs = run.join("references.jsonl");
    assert_eq!(fs::read_to_string(&gens).unwrap().lines().count(), 20);
    let again = lfd(&["generate", "--run", rs]);
    assert_eq!(code(&again), 2, "existing output needs --overwrite");

    // References scored against themselves.
    let eval_dir = tmp.path().join("self_eval");
    let o = lfd(&[
        "evaluate",
        "--generations",
        refs.to_str().unwrap(),
        "--reference",
        refs.to_str().unwrap(),
        "--metrics",
        "kld,bleu,unique",
        "--out",
        eval_dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let values: HashMap<String, f64> = fs::read_to_string(eval_dir.join("reports.jsonl"))
        .unwrap()
        .lines()
        .map(|l| {
            let v: serde_json::Value = serde_json::from_str(l).unwrap();
            (
                v["metric"].as_str().unwrap().to_string(),
                v["value"].as_f64().unwrap(),
            )
        })
        .collect();
    assert!(values["kld"].abs() < 1e-6, "{values:?}");
    assert!((values["bleu"] - 1.0).abs() < 1e-12, "{values:?}");
    assert_eq!(
        fs::read_to_string(eval_dir.join("metrics.csv"))
            .unwrap()
            .lines()
            .count(),
        2
    );

    let o = lfd(&[
        "dynamics",
        "--run",
        rs,
        "--metric",
        "repetition",
        "--n",
        "10",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let csv = fs::read_to_string(run.join("dynamics.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("metric,group,epoch,log_ppl"));
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 2 * 3, "{csv}");
    for group in ["high", "low"] {
        assert_eq!(
            rows.iter()
                .filter(|r| r.split(',').nth(1) == Some(group))
                .count(),
            3,
            "{csv}"
        );
    }
}

#[test]
fn identical_configs_give_identical_runs_and_overwrite_is_idempotent() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = lm_config(tmp.path(), "mle", "");
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    assert_eq!(code(&train(&cfg, &a)), 0);
    assert_eq!(code(&train(&cfg, &b)), 0);
    assert_eq!(files_under(&a), files_under(&b));

    assert_eq!(
        code(&train(&cfg, &a)),
        2,
        "nonempty run dir without --overwrite"
    );
    let o = lfd(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        a.to_str().unwrap(),
        "--overwrite",
    ]);
    assert_eq!(code(&o), 0);
    assert_eq!(files_under(&a), files_under(&b));
}

#[test]
fn out_root_environment_variable_places_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = lm_config(tmp.path(), "mle", "");
    let root = tmp.path().join("root");
    let o = Command::new(env!("CARGO_BIN_EXE_lfd"))
        .args(["train", "--config", cfg.to_str().unwrap()])
        .env("LFD_OUT_ROOT", &root)
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(root.join("mle").join("summary.json").is_file());
}

// Oracles below are written independently of the library's scorers.

fn oracle_counts(rows: &[(Vec<String>, Vec<String>)]) -> HashMap<String, usize> {
    let mut c = HashMap::new();
    for (x, y) in rows {
        for t in x.iter().chain(y) {
            *c.entry(t.clone()).or_insert(0) += 1;
        }
    }
    c
}

fn oracle_repetition(y: &[String]) -> f64 {
    let repeats = (0..y.len()).filter(|&i| y[..i].contains(&y[i])).count();
    repeats as f64 / y.len() as f64
}

fn oracle_overlap(x: &[String], y: &[String]) -> f64 {
    let bigrams = |s: &[String]| -> HashSet<(String, String)> {
        s.windows(2).map(|w| (w[0].clone(), w[1].clone())).collect()
    };
    let (bx, by) = (bigrams(x), bigrams(y));
    by.iter().filter(|g| bx.contains(*g)).count() as f64 / by.len() as f64
}

#[test]
fn score_attrs_matches_golden_file_and_oracles() {
    let tmp = tempfile::tempdir().unwrap();
    let data = fixtures().join("dialogue/train.tsv");
    let out = tmp.path().join("scores.csv");
    let o = lfd(&[
        "score-attrs",
        "--data",
        data.to_str().unwrap(),
        "--task",
        "dialogue",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let golden_path =
        Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden/dialogue_train_scores.csv");
    let golden = fs::read_to_string(golden_path).unwrap();
    assert_eq!(fs::read_to_string(&out).unwrap(), golden);

    let rows: Vec<(Vec<String>, Vec<String>)> = fs::read_to_string(&data)
        .unwrap()
        .lines()
        .map(|l| {
            let (x, y) = l.split_once('\t').unwrap();
            let split = |s: &str| s.split_whitespace().map(str::to_string).collect::<Vec<_>>();
            (split(x), split(y))
        })
        .collect();
    let counts = oracle_counts(&rows);
    let mut table: HashMap<(String, String), f64> = HashMap::new();
    for line in golden.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        table.insert((f[0].to_string(), f[1].to_string()), f[2].parse().unwrap());
    }
    let mut entropy_by_response: HashMap<&[String], f64> = HashMap::new();
    let contexts: HashSet<&[String]> = rows.iter().map(|(x, _)| x.as_slice()).collect();
    for (i, (x, y)) in rows.iter().enumerate() {
        let id = format!("line{:06}", i + 1);
        let get = |m: &str| table[&(id.clone(), m.to_string())];
        let freq = y.iter().map(|t| counts[t] as f64).sum::<f64>() / y.len() as f64;
        assert!((get("avg_frequency") - freq).abs() < 1e-12, "{id}");
        assert!(
            (get("repetition") - oracle_repetition(y)).abs() < 1e-12,
            "{id}"
        );
        if y.len() >= 2 {
            assert!(
                (get("context_overlap") - oracle_overlap(x, y)).abs() < 1e-12,
                "{id}"
            );
        } else {
            assert!(!table.contains_key(&(id.clone(), "context_overlap".into())));
        }
        // Identical responses share a cluster, hence an entropy value, which
        // cannot exceed log2 of the number of distinct contexts.
        let h = get("source_entropy");
        assert!(h >= 0.0 && h <= (contexts.len() as f64).log2() + 1e-12);
        let prev = *entropy_by_response.entry(y.as_slice()).or_insert(h);
        assert_eq!(prev, h, "{id}");
    }
    // Generic replies follow many topics; on-topic ones do not.
    let generic = entropy_by_response[["ok".to_string()].as_slice()];
    let topical = entropy_by_response
        .iter()
        .find(|(y, _)| y.join(" ") == "the espresso was bitter")
        .map(|(_, h)| *h)
        .unwrap();
    assert!(generic > topical, "{generic} vs {topical}");
}
