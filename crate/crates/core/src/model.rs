//! Small pre-norm transformers: decoder-only for language modeling and
//! encoder-decoder for conditional generation.
//!
//! A forward pass takes the condition `x` and the decoder input `y_in`
//! (which starts with [`BOS`]) and returns one log-probability row per
//! position of `y_in`: row `t` is `log p(. | y_in[..=t], x)`. The
//! decoder-only model reads `x ++ y_in` as one causal stream and keeps the
//! last `|y_in|` rows.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr_normal::standard_normal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{Token, BOS};
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

const LN_EPS: f64 = 1e-5;
const CHECKPOINT_MAGIC: &str = "LFD-CHECKPOINT";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    DecoderOnly,
    EncoderDecoder,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub arch: Arch,
    pub layers: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    /// Zero in a config file means "take it from the vocabulary".
    #[serde(default)]
    pub vocab_size: usize,
    pub max_positions: usize,
    #[serde(default = "default_dropout")]
    pub dropout_rate: f64,
    #[serde(default = "default_init_std")]
    pub init_std: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_dropout() -> f64 {
    0.1
}

fn default_init_std() -> f64 {
    0.02
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            arch: Arch::DecoderOnly,
            layers: 6,
            model_dim: 64,
            heads: 4,
            ffn_dim: 256,
            vocab_size: 2,
            max_positions: 256,
            dropout_rate: default_dropout(),
            init_std: default_init_std(),
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return Err(Error::config("model.layers", "must be at least 1"));
        }
        if self.vocab_size < 2 {
            return Err(Error::config("model.vocab_size", "must be at least 2"));
        }
        if self.heads == 0 || !self.model_dim.is_multiple_of(self.heads) {
            return Err(Error::config(
                "model.heads",
                format!(
                    "model_dim {} is not divisible by {} heads",
                    self.model_dim, self.heads
                ),
            ));
        }
        if self.ffn_dim == 0 || self.max_positions == 0 {
            return Err(Error::config(
                "model",
                "ffn_dim and max_positions must be positive",
            ));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::config("model.dropout_rate", "must lie in [0, 1)"));
        }
        if !(self.init_std > 0.0 && self.init_std.is_finite()) {
            return Err(Error::config("model.init_std", "must be positive"));
        }
        Ok(())
    }
}

// Box-Muller on ChaCha8 output, so initial weights depend only on the seed.
mod rand_distr_normal {
    use rand::Rng;

    pub fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
        let u1: f64 = 1.0 - rng.gen::<f64>();
        let u2: f64 = rng.gen::<f64>();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }
}

/// Named model weights in a stable order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterSet {
    entries: Vec<(String, Tensor)>,
    index: HashMap<String, usize>,
    frozen: bool,
}

impl ParameterSet {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
            index: HashMap::new(),
            frozen: false,
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::contract(format!("duplicate parameter `{name}`")));
        }
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push((name, tensor));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn frozen(mut self) -> Self {
        self.frozen = true;
        self
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Mutable access for the optimizer; refused once frozen.
    pub fn values_mut(&mut self) -> Result<impl Iterator<Item = (&str, &mut Tensor)>> {
        if self.frozen {
            return Err(Error::contract(
                "attempted to update a frozen parameter set",
            ));
        }
        Ok(self.entries.iter_mut().map(|(n, t)| (n.as_str(), t)))
    }

    /// SHA-256 over names, shapes and little-endian values.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in &self.entries {
            h.update(name.as_bytes());
            h.update([0u8]);
            for d in t.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

impl Default for ParameterSet {
    fn default() -> Self {
        Self::new()
    }
}

/// Per-position log-probabilities over the vocabulary.
#[derive(Clone, Debug, PartialEq)]
pub struct LogProbMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl LogProbMatrix {
    /// Wraps raw log-probabilities, checking every row normalizes to 1 within 1e-9.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() || cols == 0 {
            return Err(Error::contract("log-prob matrix shape mismatch"));
        }
        for r in 0..rows {
            let total: f64 = data[r * cols..(r + 1) * cols].iter().map(|v| v.exp()).sum();
            if (total - 1.0).abs() > 1e-9 {
                return Err(Error::contract(format!("row {r} sums to {total}, not 1")));
            }
        }
        Ok(Self { rows, cols, data })
    }

    /// Normalizes arbitrary finite scores row-wise.
    pub fn from_logits(rows: usize, cols: usize, logits: &[f64]) -> Result<Self> {
        if rows * cols != logits.len() || cols == 0 {
            return Err(Error::contract("logit matrix shape mismatch"));
        }
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidValue { op: "log_softmax" });
        }
        Ok(Self {
            rows,
            cols,
            data: crate::tensor::log_softmax_rows(logits, cols),
        })
    }

    /// Builds a matrix from probability rows. Zero probabilities become `-inf`.
    pub fn from_probs(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let data = rows.iter().flat_map(|r| r.iter().map(|p| p.ln())).collect();
        Self::new(rows.len(), cols, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.data[t * self.cols..(t + 1) * self.cols]
    }

    pub fn get(&self, t: usize, v: usize) -> f64 {
        self.data[t * self.cols + v]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::matrix(self.rows, self.cols, self.data.clone()).expect("consistent shape")
    }
}

/// Parameter set bound to tape leaves for one forward pass.
pub struct BoundParams {
    vars: HashMap<String, Var>,
    order: Vec<(String, Var)>,
}

impl BoundParams {
    /// Records every parameter as a leaf. Frozen sets become constants.
    pub fn bind(tape: &mut Tape, params: &ParameterSet) -> Result<Self> {
        let trainable = !params.is_frozen();
        let mut vars = HashMap::with_capacity(params.len());
        let mut order = Vec::with_capacity(params.len());
        for (name, t) in params.iter() {
            let v = tape.leaf(t.clone().with_requires_grad(trainable))?;
            vars.insert(name.to_string(), v);
            order.push((name.to_string(), v));
        }
        Ok(Self { vars, order })
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::contract(format!("missing parameter `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.order.iter().map(|(n, v)| (n.as_str(), *v))
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    cfg: ModelConfig,
}

struct Ctx<'a, 'r> {
    tape: &'a mut Tape,
    params: &'a BoundParams,
    dropout: Option<(&'r mut (dyn RngCore + 'r), f64)>,
}

impl Ctx<'_, '_> {
    fn p(&self, name: &str) -> Result<Var> {
        self.params.var(name)
    }

    fn dropout(&mut self, x: Var) -> Result<Var> {
        match self.dropout.as_mut() {
            Some((rng, rate)) => self.tape.dropout(x, *rate, rng),
            None => Ok(x),
        }
    }

    fn linear(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let w = self.p(&format!("{prefix}.weight"))?;
        let b = self.p(&format!("{prefix}.bias"))?;
        let h = self.tape.matmul(x, w)?;
        self.tape.add_row(h, b)
    }

    fn layer_norm(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let g = self.p(&format!("{prefix}.gain"))?;
        let b = self.p(&format!("{prefix}.bias"))?;
        let n = self.tape.layer_norm(x, LN_EPS)?;
        let s = self.tape.mul_row(n, g)?;
        self.tape.add_row(s, b)
    }

    fn attention(
        &mut self,
        q_in: Var,
        kv_in: Var,
        prefix: &str,
        heads: usize,
        causal: bool,
    ) -> Result<Var> {
        let q = self.linear(q_in, &format!("{prefix}.query"))?;
        let k = self.linear(kv_in, &format!("{prefix}.key"))?;
        let v = self.linear(kv_in, &format!("{prefix}.value"))?;
        let dim = self.tape.value(q).dims2()?.1;
        let head_dim = dim / heads;
        let scale = 1.0 / (head_dim as f64).sqrt();
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = self.tape.slice_cols(q, h * head_dim, head_dim)?;
            let kh = self.tape.slice_cols(k, h * head_dim, head_dim)?;
            let vh = self.tape.slice_cols(v, h * head_dim, head_dim)?;
            let kt = self.tape.transpose(kh)?;
            let scores = self.tape.matmul(qh, kt)?;
            let scores = self.tape.scale(scores, scale)?;
            let attn = self.tape.softmax(scores, causal)?;
            let attn = self.dropout(attn)?;
            outs.push(self.tape.matmul(attn, vh)?);
        }
        let cat = if outs.len() == 1 {
            outs[0]
        } else {
            self.tape.concat_cols(&outs)?
        };
        self.linear(cat, &format!("{prefix}.out"))
    }

    fn feed_forward(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let h = self.linear(x, &format!("{prefix}.ffn.up"))?;
        let h = self.tape.gelu(h)?;
        self.linear(h, &format!("{prefix}.ffn.down"))
    }

    fn residual(&mut self, x: Var, delta: Var) -> Result<Var> {
        let d = self.dropout(delta)?;
        self.tape.add(x, d)
    }

    fn embed(&mut self, tokens: &[Token]) -> Result<Var> {
        let tok = self.p("embed.tokens")?;
        let pos = self.p("embed.positions")?;
        let e = self.tape.embedding(tok, tokens)?;
        let positions: Vec<usize> = (0..tokens.len()).collect();
        let p = self.tape.embedding(pos, &positions)?;
        let s = self.tape.add(e, p)?;
        self.dropout(s)
    }
}

fn push_linear(
    params: &mut ParameterSet,
    rng: &mut ChaCha8Rng,
    std: f64,
    prefix: &str,
    fan_in: usize,
    fan_out: usize,
) -> Result<()> {
    params.insert(
        format!("{prefix}.weight"),
        normal(rng, std, vec![fan_in, fan_out]),
    )?;
    params.insert(format!("{prefix}.bias"), Tensor::zeros(vec![fan_out]))
}

fn push_norm(params: &mut ParameterSet, prefix: &str, dim: usize) -> Result<()> {
    params.insert(
        format!("{prefix}.gain"),
        Tensor::new(vec![dim], vec![1.0; dim])?,
    )?;
    params.insert(format!("{prefix}.bias"), Tensor::zeros(vec![dim]))
}

fn normal(rng: &mut ChaCha8Rng, std: f64, shape: Vec<usize>) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| std * standard_normal(rng)).collect();
    Tensor::new(shape, data).expect("shape matches data")
}

impl Model {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    /// Weights ~ N(0, init_std), biases zero, layer-norm gains one.
    /// Deterministic in `cfg.seed`.
    pub fn init_parameters(&self) -> ParameterSet {
        self.try_init().expect("parameter names are unique")
    }

    fn try_init(&self) -> Result<ParameterSet> {
        let c = &self.cfg;
        let mut rng = ChaCha8Rng::seed_from_u64(c.seed);
        let mut p = ParameterSet::new();
        p.insert(
            "embed.tokens",
            normal(&mut rng, c.init_std, vec![c.vocab_size, c.model_dim]),
        )?;
        p.insert(
            "embed.positions",
            normal(&mut rng, c.init_std, vec![c.max_positions, c.model_dim]),
        )?;
        match c.arch {
            Arch::DecoderOnly => self.push_stack(&mut p, &mut rng, "decoder", false)?,
            Arch::EncoderDecoder => {
                self.push_stack(&mut p, &mut rng, "encoder", false)?;
                self.push_stack(&mut p, &mut rng, "decoder", true)?;
                push_linear(
                    &mut p,
                    &mut rng,
                    c.init_std,
                    "lm_head",
                    c.model_dim,
                    c.vocab_size,
                )?;
            }
        }
        Ok(p)
    }

    fn push_stack(
        &self,
        p: &mut ParameterSet,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        cross: bool,
    ) -> Result<()> {
        let c = &self.cfg;
        let d = c.model_dim;
        for l in 0..c.layers {
            let lp = format!("{prefix}.{l}");
            push_norm(p, &format!("{lp}.norm_attn"), d)?;
            for part in ["query", "key", "value", "out"] {
                push_linear(p, rng, c.init_std, &format!("{lp}.attn.{part}"), d, d)?;
            }
            if cross {
                push_norm(p, &format!("{lp}.norm_cross"), d)?;
                for part in ["query", "key", "value", "out"] {
                    push_linear(p, rng, c.init_std, &format!("{lp}.cross.{part}"), d, d)?;
                }
            }
            push_norm(p, &format!("{lp}.norm_ffn"), d)?;
            push_linear(p, rng, c.init_std, &format!("{lp}.ffn.up"), d, c.ffn_dim)?;
            push_linear(p, rng, c.init_std, &format!("{lp}.ffn.down"), c.ffn_dim, d)?;
        }
        push_norm(p, &format!("{prefix}.norm_final"), d)
    }

    fn check_tokens(&self, tokens: &[Token], max: usize) -> Result<()> {
        if let Some(&t) = tokens.iter().find(|&&t| t >= self.cfg.vocab_size) {
            return Err(Error::InvalidToken {
                token: t,
                vocab_size: self.cfg.vocab_size,
            });
        }
        if tokens.len() > max {
            return Err(Error::LengthExceeded {
                len: tokens.len(),
                max,
            });
        }
        Ok(())
    }

    /// Records the forward pass on `tape` and returns the `|y_in| x V`
    /// log-probability node. Passing an rng enables dropout.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        params: &BoundParams,
        x: &[Token],
        y_in: &[Token],
        dropout: Option<&mut dyn RngCore>,
    ) -> Result<Var> {
        let c = &self.cfg;
        if y_in.is_empty() {
            return Err(Error::EmptyInput("decoder input"));
        }
        let rate = c.dropout_rate;
        let mut ctx = Ctx {
            tape,
            params,
            dropout: dropout.filter(|_| rate > 0.0).map(|r| (r, rate)),
        };
        let h = match c.arch {
            Arch::DecoderOnly => {
                let mut stream = Vec::with_capacity(x.len() + y_in.len());
                stream.extend_from_slice(x);
                stream.extend_from_slice(y_in);
                self.check_tokens(&stream, c.max_positions)?;
                let h = ctx.embed(&stream)?;
                let h = self.run_stack(&mut ctx, h, "decoder", true, None)?;
                ctx.tape.slice_rows(h, x.len(), y_in.len())?
            }
            Arch::EncoderDecoder => {
                if x.is_empty() {
                    return Err(Error::EmptyInput("encoder input"));
                }
                self.check_tokens(x, c.max_positions)?;
                self.check_tokens(y_in, c.max_positions)?;
                let e = ctx.embed(x)?;
                let memory = self.run_stack(&mut ctx, e, "encoder", false, None)?;
                let d = ctx.embed(y_in)?;
                self.run_stack(&mut ctx, d, "decoder", true, Some(memory))?
            }
        };
        let logits = match c.arch {
            Arch::DecoderOnly => {
                let tok = ctx.p("embed.tokens")?;
                let tt = ctx.tape.transpose(tok)?;
                ctx.tape.matmul(h, tt)?
            }
            Arch::EncoderDecoder => ctx.linear(h, "lm_head")?,
        };
        ctx.tape.log_softmax(logits)
    }

    fn run_stack(
        &self,
        ctx: &mut Ctx<'_, '_>,
        mut h: Var,
        prefix: &str,
        causal: bool,
        memory: Option<Var>,
    ) -> Result<Var> {
        let heads = self.cfg.heads;
        for l in 0..self.cfg.layers {
            let lp = format!("{prefix}.{l}");
            let n = ctx.layer_norm(h, &format!("{lp}.norm_attn"))?;
            let a = ctx.attention(n, n, &format!("{lp}.attn"), heads, causal)?;
            h = ctx.residual(h, a)?;
            if let Some(mem) = memory {
                let n = ctx.layer_norm(h, &format!("{lp}.norm_cross"))?;
                let a = ctx.attention(n, mem, &format!("{lp}.cross"), heads, false)?;
                h = ctx.residual(h, a)?;
            }
            let n = ctx.layer_norm(h, &format!("{lp}.norm_ffn"))?;
            let f = ctx.feed_forward(n, &lp)?;
            h = ctx.residual(h, f)?;
        }
        ctx.layer_norm(h, &format!("{prefix}.norm_final"))
    }

    /// Evaluation-mode forward pass (no dropout, no gradients kept).
    pub fn forward(
        &self,
        params: &ParameterSet,
        x: &[Token],
        y_in: &[Token],
    ) -> Result<LogProbMatrix> {
        let mut tape = Tape::new();
        let bound = BoundParams::bind(&mut tape, &params.clone().frozen())?;
        let out = self.forward_on_tape(&mut tape, &bound, x, y_in, None)?;
        let t = tape.value(out);
        let (rows, cols) = t.dims2()?;
        Ok(LogProbMatrix {
            rows,
            cols,
            data: t.data().to_vec(),
        })
    }

    /// Teacher-forced log-probabilities of target `y` given `x`.
    pub fn score(&self, params: &ParameterSet, x: &[Token], y: &[Token]) -> Result<LogProbMatrix> {
        self.forward(params, x, &teacher_input(y))
    }
}

/// Decoder input for target `y`: `BOS` followed by `y` without its last token.
pub fn teacher_input(y: &[Token]) -> Vec<Token> {
    let mut v = Vec::with_capacity(y.len());
    v.push(BOS);
    v.extend_from_slice(&y[..y.len().saturating_sub(1)]);
    v
}

#[derive(Serialize, Deserialize)]
struct CheckpointEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    format_version: u32,
    model: ModelConfig,
    frozen: bool,
    params: Vec<CheckpointEntry>,
}

/// Serializes a checkpoint: a magic line, one line of JSON manifest, then the
/// raw little-endian `f64` values in manifest order. Offsets are in bytes from
/// the start of the data section.
pub fn encode_checkpoint(cfg: &ModelConfig, params: &ParameterSet) -> Result<Vec<u8>> {
    let mut entries = Vec::with_capacity(params.len());
    let mut offset = 0;
    for (name, t) in params.iter() {
        let len = t.numel() * 8;
        entries.push(CheckpointEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            offset,
            len,
        });
        offset += len;
    }
    let header = CheckpointHeader {
        format_version: CHECKPOINT_VERSION,
        model: cfg.clone(),
        frozen: params.is_frozen(),
        params: entries,
    };
    let json = serde_json::to_string(&header).map_err(|e| Error::contract(e.to_string()))?;
    let mut out = Vec::with_capacity(json.len() + offset + 32);
    out.extend_from_slice(CHECKPOINT_MAGIC.as_bytes());
    out.push(b'\n');
    out.extend_from_slice(json.as_bytes());
    out.push(b'\n');
    for (_, t) in params.iter() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(ModelConfig, ParameterSet)> {
    let bad = |m: &str| Error::contract(format!("malformed checkpoint: {m}"));
    let magic_end = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| bad("no magic line"))?;
    if &bytes[..magic_end] != CHECKPOINT_MAGIC.as_bytes() {
        return Err(bad("wrong magic"));
    }
    let rest = &bytes[magic_end + 1..];
    let header_end = rest
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| bad("no manifest"))?;
    let header: CheckpointHeader =
        serde_json::from_slice(&rest[..header_end]).map_err(|e| bad(&e.to_string()))?;
    if header.format_version != CHECKPOINT_VERSION {
        return Err(bad(&format!(
            "unsupported version {}",
            header.format_version
        )));
    }
    let data = &rest[header_end + 1..];
    let mut params = ParameterSet::new();
    for e in header.params {
        let chunk = data
            .get(e.offset..e.offset + e.len)
            .ok_or_else(|| bad(&format!("`{}` runs past the end", e.name)))?;
        let values = chunk
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        params.insert(e.name, Tensor::new(e.shape, values)?)?;
    }
    if header.frozen {
        params.freeze();
    }
    Ok((header.model, params))
}

pub fn save_checkpoint(path: &Path, cfg: &ModelConfig, params: &ParameterSet) -> Result<()> {
    let bytes = encode_checkpoint(cfg, params)?;
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelConfig, ParameterSet)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn tiny(arch: Arch) -> ModelConfig {
        ModelConfig {
            arch,
            layers: 2,
            model_dim: 8,
            heads: 2,
            ffn_dim: 12,
            vocab_size: 7,
            max_positions: 16,
            dropout_rate: 0.0,
            init_std: 0.3,
            seed: 5,
        }
    }

    #[test]
    fn config_validation() {
        let mut c = tiny(Arch::DecoderOnly);
        c.heads = 3;
        assert!(Model::new(c).is_err());
        let mut c = tiny(Arch::DecoderOnly);
        c.layers = 0;
        assert!(Model::new(c).is_err());
        let mut c = tiny(Arch::DecoderOnly);
        c.vocab_size = 1;
        assert!(Model::new(c).is_err());
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let m = Model::new(tiny(Arch::EncoderDecoder)).unwrap();
        assert_eq!(m.init_parameters(), m.init_parameters());
        let mut c = tiny(Arch::EncoderDecoder);
        c.seed = 6;
        let other = Model::new(c).unwrap().init_parameters();
        assert_ne!(m.init_parameters().checksum(), other.checksum());
    }

    #[test]
    fn init_scale_matches_configured_std() {
        let cfg = ModelConfig {
            model_dim: 16,
            heads: 2,
            ffn_dim: 32,
            vocab_size: 50,
            max_positions: 32,
            layers: 1,
            ..ModelConfig::default()
        };
        let params = Model::new(cfg).unwrap().init_parameters();
        for (name, t) in params
            .iter()
            .filter(|(n, _)| n.ends_with(".weight") || n.starts_with("embed"))
        {
            let n = t.numel() as f64;
            let mean = t.data().iter().sum::<f64>() / n;
            let var = t.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
            let rel = (var.sqrt() - 0.02).abs() / 0.02;
            assert!(rel < 0.2, "{name}: sample std {}", var.sqrt());
        }
        for (_, t) in params.iter().filter(|(n, _)| n.ends_with(".bias")) {
            assert!(t.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn rows_are_normalized() {
        for arch in [Arch::DecoderOnly, Arch::EncoderDecoder] {
            let m = Model::new(tiny(arch)).unwrap();
            let p = m.init_parameters();
            let lp = m.forward(&p, &[4, 5, 6], &[BOS, 4, 3, 2]).unwrap();
            assert_eq!(lp.rows(), 4);
            for t in 0..lp.rows() {
                let s: f64 = lp.row(t).iter().map(|v| v.exp()).sum();
                assert!((s - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn token_and_length_errors() {
        let m = Model::new(tiny(Arch::DecoderOnly)).unwrap();
        let p = m.init_parameters();
        assert!(matches!(
            m.forward(&p, &[], &[BOS, 9]),
            Err(Error::InvalidToken { token: 9, .. })
        ));
        let long = vec![4; 17];
        assert!(matches!(
            m.forward(&p, &[], &long),
            Err(Error::LengthExceeded { len: 17, max: 16 })
        ));
    }

    proptest! {
        #[test]
        fn decoder_is_causal(seq in prop::collection::vec(0usize..7, 2..10), t in 0usize..9, tok in 0usize..7) {
            let t = t % (seq.len() - 1);
            for arch in [Arch::DecoderOnly, Arch::EncoderDecoder] {
                let m = Model::new(tiny(arch)).unwrap();
                let p = m.init_parameters();
                let x = [3, 4];
                let a = m.forward(&p, &x, &seq).unwrap();
                let mut perturbed = seq.clone();
                perturbed[t + 1] = tok;
                let b = m.forward(&p, &x, &perturbed).unwrap();
                for r in 0..=t {
                    prop_assert_eq!(a.row(r), b.row(r));
                }
            }
        }

        #[test]
        fn encoder_conditioning_changes_outputs(x in prop::collection::vec(3usize..7, 1..6), y in prop::collection::vec(0usize..7, 1..6)) {
            let m = Model::new(tiny(Arch::EncoderDecoder)).unwrap();
            let p = m.init_parameters();
            let a = m.forward(&p, &x, &y).unwrap();
            let mut x2 = x.clone();
            x2[0] = if x[0] == 3 { 4 } else { 3 };
            let b = m.forward(&p, &x2, &y).unwrap();
            prop_assert_eq!(a.rows(), b.rows());
            prop_assert_eq!(a.cols(), b.cols());
            prop_assert!(a.data() != b.data());
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let m = Model::new(tiny(Arch::EncoderDecoder)).unwrap();
        let p = m.init_parameters().frozen();
        let bytes = encode_checkpoint(m.config(), &p).unwrap();
        let (cfg, q) = decode_checkpoint(&bytes).unwrap();
        assert_eq!(&cfg, m.config());
        assert_eq!(p, q);
        assert!(q.is_frozen());
        assert_eq!(encode_checkpoint(&cfg, &q).unwrap(), bytes);
        let y = [BOS, 3, 4];
        assert_eq!(
            m.forward(&p, &[5], &y).unwrap(),
            m.forward(&q, &[5], &y).unwrap()
        );
    }

    #[test]
    fn truncated_checkpoint_is_rejected() {
        let m = Model::new(tiny(Arch::DecoderOnly)).unwrap();
        let bytes = encode_checkpoint(m.config(), &m.init_parameters()).unwrap();
        assert!(decode_checkpoint(&bytes[..bytes.len() - 3]).is_err());
        assert!(decode_checkpoint(b"nope\n{}\n").is_err());
    }

    #[test]
    fn frozen_set_refuses_updates() {
        let m = Model::new(tiny(Arch::DecoderOnly)).unwrap();
        let mut p = m.init_parameters();
        assert!(p.values_mut().is_ok());
        p.freeze();
        assert!(p.values_mut().is_err());
    }

    #[test]
    fn dropout_only_changes_training_passes() {
        let mut cfg = tiny(Arch::DecoderOnly);
        cfg.dropout_rate = 0.5;
        let m = Model::new(cfg).unwrap();
        let p = m.init_parameters();
        let y = [BOS, 3, 4, 5];
        assert_eq!(
            m.forward(&p, &[], &y).unwrap(),
            m.forward(&p, &[], &y).unwrap()
        );
        let mut tape = Tape::new();
        let b = BoundParams::bind(&mut tape, &p).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let _: f64 = rng.gen();
        let out = m
            .forward_on_tape(&mut tape, &b, &[], &y, Some(&mut rng))
            .unwrap();
        assert_ne!(
            tape.value(out).data(),
            m.forward(&p, &[], &y).unwrap().data()
        );
    }
}
