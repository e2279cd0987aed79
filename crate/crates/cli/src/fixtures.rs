//! Writes the bundled toy corpora and matching run configs.

use std::fs;
use std::path::Path;

use anyhow::Result;
use lfd_core::corpus::synthetic::{
    lm_text, pair_text, synthetic_dialogue, synthetic_lm, SyntheticLmConfig,
};

const LM_DOCS: (usize, usize, usize) = (100, 10, 20);
const DIALOGUES: (usize, usize, usize) = (160, 20, 20);

fn lm_config(name: &str, objective: &str, lambda: f64) -> String {
    format!(
        r#"# Toy language-modeling run ({name}).
task = "lm"

[data]
train = "lm/train.txt"
valid = "lm/valid.txt"
test = "lm/test.txt"

[model]
arch = "decoder_only"
layers = 2
model_dim = 32
heads = 4
ffn_dim = 64
max_positions = 64

[train]
learning_rate = 0.003
epochs = 10
batch_size = 10
lambda = {lambda}
k = {{ epochs = 5.0 }}
h = {{ epochs = 5.0 }}

[objective]
kind = "{objective}"
lambda = {lambda}

[decode]
strategy = "top_k"
k = 20
prefix_len = 4
max_new_tokens = 20
"#
    )
}

fn dialogue_config(objective: &str) -> String {
    format!(
        r#"# Toy dialogue run.
task = "dialogue"

[data]
train = "dialogue/train.tsv"
valid = "dialogue/valid.tsv"
test = "dialogue/test.tsv"

[model]
arch = "encoder_decoder"
layers = 1
model_dim = 32
heads = 4
ffn_dim = 64
max_positions = 32

[train]
learning_rate = 0.003
epochs = 6
batch_size = 16
lambda = 0.25
k = {{ epochs = 3.0 }}
h = {{ epochs = 3.0 }}

[objective]
kind = "{objective}"
lambda = 0.25

[decode]
strategy = "greedy"
max_new_tokens = 12
"#
    )
}

pub fn write_fixtures(out: &Path, seed: u64) -> Result<()> {
    let (tr, va, te) = LM_DOCS;
    let (docs, _) = synthetic_lm(&SyntheticLmConfig {
        documents: tr + va + te,
        seed,
        ..SyntheticLmConfig::default()
    });
    let lm = out.join("lm");
    fs::create_dir_all(&lm)?;
    fs::write(lm.join("train.txt"), lm_text(&docs[..tr]))?;
    fs::write(lm.join("valid.txt"), lm_text(&docs[tr..tr + va]))?;
    fs::write(lm.join("test.txt"), lm_text(&docs[tr + va..]))?;

    let (tr, va, te) = DIALOGUES;
    let dialogues = synthetic_dialogue(tr + va + te, seed);
    let dd = out.join("dialogue");
    fs::create_dir_all(&dd)?;
    fs::write(dd.join("train.tsv"), pair_text(&dialogues[..tr]))?;
    fs::write(dd.join("valid.tsv"), pair_text(&dialogues[tr..tr + va]))?;
    fs::write(dd.join("test.tsv"), pair_text(&dialogues[tr + va..]))?;

    fs::write(
        out.join("lm_mle.toml"),
        lm_config("MLE baseline", "mle", 0.5),
    )?;
    fs::write(
        out.join("lm_lfd.toml"),
        lm_config(
            "degenerative expert, then LfD main model",
            "poe_combined",
            0.5,
        ),
    )?;
    fs::write(
        out.join("lm_degenerative.toml"),
        lm_config("degenerative model only", "truncated_ce", 0.5),
    )?;
    fs::write(out.join("dialogue_mle.toml"), dialogue_config("mle"))?;
    fs::write(
        out.join("dialogue_lfd.toml"),
        dialogue_config("poe_combined"),
    )?;
    Ok(())
}
