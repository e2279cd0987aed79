//! Optimization loops.
//!
//! * [`train_standard`]: epochs of mini-batch training under one objective,
//!   with a checkpoint per epoch and validation-loss model selection.
//! * [`train_degenerative`]: `K` standard steps followed by `H` truncated
//!   cross-entropy steps; the result is frozen.
//! * [`train_lfd_main`]: trains a fresh model on `L_MLE + lambda * L_PoE`
//!   against a frozen expert.
//!
//! Step losses are rescaled to a per-token mean (over the valid tokens, or
//! over the selected tokens for truncated steps) before differentiation.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{batch_indices, batches_per_epoch, Example};
use crate::error::{Error, Result};
use crate::model::{save_checkpoint, teacher_input, BoundParams, Model, ParameterSet};
use crate::objectives::{graph, mle_loss, ObjectiveConfig, ObjectiveKind};
use crate::tensor::{Tape, Tensor, Var};

/// Stream used for dropout masks, kept apart from the batch-order stream.
const DROPOUT_STREAM: u64 = 0x9e37_79b9_7f4a_7c15;

/// Step budget given directly or as a multiple of one epoch of batches.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepCount {
    Steps(usize),
    Epochs(f64),
}

impl StepCount {
    pub fn resolve(self, steps_per_epoch: usize) -> usize {
        match self {
            StepCount::Steps(n) => n,
            StepCount::Epochs(e) => (e * steps_per_epoch as f64).round() as usize,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LfdConfig {
    /// Standard steps before truncation starts.
    pub k: StepCount,
    /// Truncated cross-entropy steps.
    pub h: StepCount,
    /// Fraction of batch tokens kept by the small-loss selection.
    pub r: f64,
    pub lambda: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub adam: AdamConfig,
    pub warmup_steps: usize,
    /// Evaluate and keep a candidate checkpoint every this many steps.
    pub eval_every: Option<usize>,
    /// Reset Adam moments when the degenerative run switches to truncation.
    pub reset_optimizer_at_truncation: bool,
    /// Abort when a step loss exceeds this multiple of the epoch's first loss.
    pub divergence_factor: f64,
}

impl Default for LfdConfig {
    fn default() -> Self {
        Self {
            k: StepCount::Epochs(1.0),
            h: StepCount::Epochs(1.0),
            r: 0.7,
            lambda: 0.5,
            learning_rate: 1e-5,
            epochs: 1,
            batch_size: 8,
            seed: 0,
            adam: AdamConfig::default(),
            warmup_steps: 0,
            eval_every: None,
            reset_optimizer_at_truncation: false,
            divergence_factor: 10.0,
        }
    }
}

impl LfdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.r > 0.0 && self.r <= 1.0) {
            return Err(Error::config("train.r", "must lie in (0, 1]"));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::config("train.lambda", "must be finite and >= 0"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("train.learning_rate", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be at least 1"));
        }
        if let StepCount::Epochs(e) = self.k {
            if !(e >= 0.0 && e.is_finite()) {
                return Err(Error::config("train.k", "epoch multiple must be >= 0"));
            }
        }
        match self.h {
            StepCount::Steps(0) => return Err(Error::config("train.h", "must be at least 1 step")),
            StepCount::Epochs(e) if !(e > 0.0 && e.is_finite()) => {
                return Err(Error::config("train.h", "epoch multiple must be > 0"))
            }
            _ => {}
        }
        if self.eval_every == Some(0) {
            return Err(Error::config("train.eval_every", "must be at least 1"));
        }
        if self.divergence_factor.is_nan() || self.divergence_factor <= 1.0 {
            return Err(Error::config("train.divergence_factor", "must exceed 1"));
        }
        let a = &self.adam;
        if !((0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2) && a.eps > 0.0) {
            return Err(Error::config(
                "train.adam",
                "betas must lie in [0, 1) and eps > 0",
            ));
        }
        Ok(())
    }
}

/// Linear warmup from 0 to `base_lr` over `warmup` steps, then linear decay
/// to 0 at `total_steps`.
pub fn schedule_lr(step: usize, total_steps: usize, warmup: usize, base_lr: f64) -> f64 {
    if step >= total_steps {
        return 0.0;
    }
    if step < warmup {
        return base_lr * step as f64 / warmup as f64;
    }
    let span = (total_steps - warmup) as f64;
    base_lr * (total_steps - step) as f64 / span
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    cfg: AdamConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl Adam {
    pub fn new(cfg: AdamConfig, params: &ParameterSet) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        Self {
            cfg,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn reset(&mut self) {
        self.m
            .iter_mut()
            .chain(self.v.iter_mut())
            .for_each(|b| b.fill(0.0));
        self.t = 0;
    }

    /// One update; `grads` is aligned with the parameter order.
    pub fn step(&mut self, params: &mut ParameterSet, grads: &[Tensor], lr: f64) -> Result<()> {
        if grads.len() != self.m.len() {
            return Err(Error::contract("gradient count does not match parameters"));
        }
        self.t += 1;
        let (b1, b2, eps) = (self.cfg.beta1, self.cfg.beta2, self.cfg.eps);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        for (i, (_, p)) in params.values_mut()?.enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (((w, g), m), v) in p
                .data_mut()
                .iter_mut()
                .zip(grads[i].data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let mhat = *m / c1;
                let vhat = *v / c2;
                *w -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Standard,
    Truncated,
    Lfd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub phase: Phase,
    pub loss: f64,
    pub valid_token_count: usize,
    pub selected_token_count: usize,
    pub learning_rate: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub validation_loss: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub validation_loss: f64,
    /// File name inside the checkpoint directory.
    pub checkpoint_path: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
    /// Index into `epochs` of the selected checkpoint.
    pub best_epoch: Option<usize>,
}

#[derive(Serialize)]
#[serde(tag = "record", rename_all = "snake_case")]
enum LogLine<'a> {
    Meta {
        loss_reduction: &'static str,
        best_epoch: Option<usize>,
    },
    Step(&'a StepRecord),
    Epoch(&'a EpochRecord),
}

impl TrainLog {
    /// One JSON object per line: a meta record, then steps, then epochs.
    pub fn to_jsonl(&self) -> String {
        let mut s = String::new();
        let meta = LogLine::Meta {
            loss_reduction: "per-token mean over contributing tokens",
            best_epoch: self.best_epoch.map(|i| self.epochs[i].epoch),
        };
        let lines = std::iter::once(meta)
            .chain(self.steps.iter().map(LogLine::Step))
            .chain(self.epochs.iter().map(LogLine::Epoch));
        for line in lines {
            s.push_str(&serde_json::to_string(&line).expect("log records serialize"));
            s.push('\n');
        }
        s
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_jsonl().as_bytes())
            .map_err(|e| Error::io(path, e))
    }

    pub fn digest(&self) -> String {
        Sha256::digest(self.to_jsonl().as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters selected by validation loss (or the final ones when no
    /// evaluation happened).
    pub best: ParameterSet,
    pub last: ParameterSet,
    pub log: TrainLog,
}

/// Mean per-token NLL of `params` on `data`.
pub fn mean_nll(model: &Model, params: &ParameterSet, data: &[Example]) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyInput("evaluation data"));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for ex in data {
        let lp = model.score(params, &ex.x, &ex.y)?;
        let (s, v) = mle_loss(&lp, &ex.y)?;
        total += s;
        count += v.num_valid();
    }
    Ok(total / count as f64)
}

/// What a training step optimizes.
enum StepObjective<'a> {
    Plain(&'a ObjectiveConfig),
    Truncated(f64),
    Lfd {
        expert: &'a Model,
        expert_params: &'a ParameterSet,
        lambda: f64,
    },
}

struct StepLoss {
    loss: Var,
    valid: usize,
    selected: usize,
}

/// Shared mutable state of a training run.
struct Runner<'a> {
    model: &'a Model,
    cfg: &'a LfdConfig,
    data: &'a [Example],
    params: ParameterSet,
    adam: Adam,
    order_rng: ChaCha8Rng,
    dropout_rng: ChaCha8Rng,
    queue: Vec<Vec<usize>>,
    step: usize,
    total_steps: usize,
    log: TrainLog,
    epoch_ref_loss: Option<f64>,
}

impl<'a> Runner<'a> {
    fn new(
        model: &'a Model,
        cfg: &'a LfdConfig,
        data: &'a [Example],
        init: ParameterSet,
        total_steps: usize,
    ) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::EmptyInput("training data"));
        }
        if init.is_frozen() {
            return Err(Error::contract("cannot train a frozen parameter set"));
        }
        Ok(Self {
            model,
            cfg,
            data,
            adam: Adam::new(cfg.adam.clone(), &init),
            params: init,
            order_rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            dropout_rng: ChaCha8Rng::seed_from_u64(cfg.seed ^ DROPOUT_STREAM),
            queue: Vec::new(),
            step: 0,
            total_steps,
            log: TrainLog::default(),
            epoch_ref_loss: None,
        })
    }

    fn steps_per_epoch(&self) -> usize {
        batches_per_epoch(self.data.len(), self.cfg.batch_size)
    }

    fn next_batch(&mut self) -> Vec<usize> {
        if self.queue.is_empty() {
            let mut b = batch_indices(self.data.len(), self.cfg.batch_size, &mut self.order_rng);
            b.reverse();
            self.queue = b;
        }
        self.queue.pop().expect("refilled queue")
    }

    fn build_loss(
        &mut self,
        tape: &mut Tape,
        bound: &BoundParams,
        batch: &[usize],
        obj: &StepObjective<'_>,
    ) -> Result<StepLoss> {
        let mut logps = Vec::with_capacity(batch.len());
        for &i in batch {
            let ex = &self.data[i];
            let y_in = teacher_input(&ex.y);
            logps.push(self.model.forward_on_tape(
                tape,
                bound,
                &ex.x,
                &y_in,
                Some(&mut self.dropout_rng),
            )?);
        }
        let valid: usize = batch.iter().map(|&i| self.data[i].y.len()).sum();
        let ys: Vec<&[usize]> = batch.iter().map(|&i| self.data[i].y.as_slice()).collect();

        let (sum, selected) = match obj {
            StepObjective::Truncated(r) => graph::truncated_ce(tape, &logps, &ys, *r)?,
            StepObjective::Plain(oc) => {
                let mut total: Option<Var> = None;
                for (&lp, y) in logps.iter().zip(&ys) {
                    let s = match oc.kind {
                        ObjectiveKind::Mle => graph::mle(tape, lp, y)?,
                        ObjectiveKind::Focal => graph::focal(tape, lp, y, oc.gamma)?,
                        ObjectiveKind::Cp => graph::cp(tape, lp, y, oc.cp_weight)?,
                        ObjectiveKind::UlRepeat => graph::ul_repeat(tape, lp, y, oc.ul_weight)?,
                        ObjectiveKind::TruncatedCe | ObjectiveKind::PoeCombined => {
                            return Err(Error::contract(
                                "objective needs a dedicated training routine",
                            ))
                        }
                        ObjectiveKind::Face => return Err(Error::Unimplemented("face objective")),
                        ObjectiveKind::DialogueUl => {
                            return Err(Error::Unimplemented("dialogue_ul objective"))
                        }
                    };
                    total = Some(match total {
                        None => s,
                        Some(acc) => tape.add(acc, s)?,
                    });
                }
                (total.expect("nonempty batch"), valid)
            }
            StepObjective::Lfd {
                expert,
                expert_params,
                lambda,
            } => {
                let mut total: Option<Var> = None;
                for (&lp, &i) in logps.iter().zip(batch) {
                    let ex = &self.data[i];
                    let lp_d = expert.score(expert_params, &ex.x, &ex.y)?;
                    let d = tape.constant(lp_d.to_tensor())?;
                    let s = graph::lfd(tape, d, lp, &ex.y, *lambda)?;
                    total = Some(match total {
                        None => s,
                        Some(acc) => tape.add(acc, s)?,
                    });
                }
                (total.expect("nonempty batch"), valid)
            }
        };
        let loss = tape.scale(sum, 1.0 / selected as f64)?;
        Ok(StepLoss {
            loss,
            valid,
            selected,
        })
    }

    fn step(&mut self, phase: Phase, obj: &StepObjective<'_>) -> Result<()> {
        let batch = self.next_batch();
        let step = self.step + 1;
        let diverged = |loss: f64| Error::DivergenceDetected { step, loss };
        let mut tape = Tape::new();
        let bound = BoundParams::bind(&mut tape, &self.params)?;
        let sl = match self.build_loss(&mut tape, &bound, &batch, obj) {
            Err(Error::InvalidValue { .. }) => return Err(diverged(f64::NAN)),
            r => r?,
        };
        let loss = tape.value(sl.loss).item();
        let reference = *self.epoch_ref_loss.get_or_insert(loss);
        if !loss.is_finite() || loss > self.cfg.divergence_factor * reference.max(1e-12) {
            return Err(diverged(loss));
        }
        let grads = match tape.backward(sl.loss) {
            Err(Error::InvalidValue { .. }) => return Err(diverged(loss)),
            r => r?,
        };
        let grads: Vec<Tensor> = bound
            .iter()
            .zip(self.params.iter())
            .map(|((_, v), (_, t))| grads.get_or_zeros(v, t))
            .collect();
        let lr = schedule_lr(
            self.step,
            self.total_steps,
            self.cfg.warmup_steps,
            self.cfg.learning_rate,
        );
        self.adam.step(&mut self.params, &grads, lr)?;
        self.step = step;
        self.log.steps.push(StepRecord {
            step,
            phase,
            loss,
            valid_token_count: sl.valid,
            selected_token_count: sl.selected,
            learning_rate: lr,
            validation_loss: None,
        });
        Ok(())
    }
}

fn checkpoint_file(dir: &Path, name: &str) -> PathBuf {
    dir.join(name)
}

/// Epoch-based loop shared by standard and LfD training.
#[allow(clippy::too_many_arguments)]
fn run_epochs(
    model: &Model,
    cfg: &LfdConfig,
    init: ParameterSet,
    train: &[Example],
    valid: &[Example],
    phase: Phase,
    obj: StepObjective<'_>,
    checkpoint_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let steps_per_epoch = batches_per_epoch(train.len(), cfg.batch_size);
    let total = cfg.epochs * steps_per_epoch;
    let mut r = Runner::new(model, cfg, train, init, total)?;
    let eval_set = if valid.is_empty() { train } else { valid };
    let mut best: Option<(f64, ParameterSet)> = None;
    let consider = |loss: f64, params: &ParameterSet, best: &mut Option<(f64, ParameterSet)>| {
        if best.as_ref().is_none_or(|(b, _)| loss < *b) {
            *best = Some((loss, params.clone()));
        }
    };

    for epoch in 1..=cfg.epochs {
        r.epoch_ref_loss = None;
        let first_step = r.log.steps.len();
        for _ in 0..steps_per_epoch {
            r.step(phase, &obj)?;
            if let Some(every) = cfg.eval_every {
                if r.step % every == 0 {
                    let vl = mean_nll(model, &r.params, eval_set)?;
                    r.log
                        .steps
                        .last_mut()
                        .expect("just stepped")
                        .validation_loss = Some(vl);
                    if let Some(dir) = checkpoint_dir {
                        save_checkpoint(
                            &checkpoint_file(dir, &format!("step_{:06}.ckpt", r.step)),
                            model.config(),
                            &r.params,
                        )?;
                    }
                    consider(vl, &r.params, &mut best);
                }
            }
        }
        let steps = &r.log.steps[first_step..];
        let train_loss = steps.iter().map(|s| s.loss).sum::<f64>() / steps.len().max(1) as f64;
        let validation_loss = mean_nll(model, &r.params, eval_set)?;
        let checkpoint_path = match checkpoint_dir {
            Some(dir) => {
                let p = checkpoint_file(dir, &format!("epoch_{epoch:03}.ckpt"));
                save_checkpoint(&p, model.config(), &r.params)?;
                Some(format!("epoch_{epoch:03}.ckpt"))
            }
            None => None,
        };
        let before = best.as_ref().map(|(b, _)| *b);
        consider(validation_loss, &r.params, &mut best);
        if before.is_none_or(|b| validation_loss < b) {
            r.log.best_epoch = Some(r.log.epochs.len());
        }
        r.log.epochs.push(EpochRecord {
            epoch,
            train_loss,
            validation_loss,
            checkpoint_path,
        });
    }
    let last = r.params.clone();
    Ok(TrainOutcome {
        best: best.map_or_else(|| last.clone(), |(_, p)| p),
        last,
        log: r.log,
    })
}

/// Standard training under `objective` (MLE, Focal, CP or token unlikelihood).
/// `init` defaults to a fresh initialization.
pub fn train_standard(
    model: &Model,
    cfg: &LfdConfig,
    init: Option<ParameterSet>,
    train: &[Example],
    valid: &[Example],
    objective: &ObjectiveConfig,
    checkpoint_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    objective.validate()?;
    let init = init.unwrap_or_else(|| model.init_parameters());
    run_epochs(
        model,
        cfg,
        init,
        train,
        valid,
        Phase::Standard,
        StepObjective::Plain(objective),
        checkpoint_dir,
    )
}

/// Degenerative expert: `K` MLE steps, then `H` steps on the truncated
/// cross-entropy at ratio `R`. The Adam state carries over unless
/// `reset_optimizer_at_truncation` is set. Returns frozen parameters.
pub fn train_degenerative(
    model: &Model,
    cfg: &LfdConfig,
    init: Option<ParameterSet>,
    train: &[Example],
) -> Result<(ParameterSet, TrainLog)> {
    cfg.validate()?;
    let spe = batches_per_epoch(train.len(), cfg.batch_size);
    let k = cfg.k.resolve(spe);
    let h = cfg.h.resolve(spe).max(1);
    let init = init.unwrap_or_else(|| model.init_parameters());
    let mle = ObjectiveConfig::default();
    let mut r = Runner::new(model, cfg, train, init, k + h)?;
    for i in 0..k {
        if i % spe == 0 {
            r.epoch_ref_loss = None;
        }
        r.step(Phase::Standard, &StepObjective::Plain(&mle))?;
    }
    if cfg.reset_optimizer_at_truncation {
        r.adam.reset();
    }
    for i in 0..h {
        if i % spe == 0 {
            r.epoch_ref_loss = None;
        }
        r.step(Phase::Truncated, &StepObjective::Truncated(cfg.r))?;
    }
    debug_assert_eq!(r.steps_per_epoch(), spe);
    Ok((r.params.frozen(), r.log))
}

/// Main-model training against a frozen expert on `L_MLE + lambda * L_PoE`.
/// Only the main model's parameters are updated.
#[allow(clippy::too_many_arguments)]
pub fn train_lfd_main(
    model: &Model,
    cfg: &LfdConfig,
    expert: &Model,
    expert_params: &ParameterSet,
    init: Option<ParameterSet>,
    train: &[Example],
    valid: &[Example],
    checkpoint_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    if !expert_params.is_frozen() {
        return Err(Error::contract("the expert's parameters must be frozen"));
    }
    if expert.config().vocab_size != model.config().vocab_size {
        return Err(Error::contract("expert and main model vocabularies differ"));
    }
    let init = init.unwrap_or_else(|| model.init_parameters());
    let obj = StepObjective::Lfd {
        expert,
        expert_params,
        lambda: cfg.lambda,
    };
    run_epochs(
        model,
        cfg,
        init,
        train,
        valid,
        Phase::Lfd,
        obj,
        checkpoint_dir,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_examples() {
        assert_eq!(schedule_lr(10, 100, 10, 0.5), 0.5);
        assert_eq!(schedule_lr(100, 100, 10, 0.5), 0.0);
        assert_eq!(schedule_lr(50, 100, 0, 0.5), 0.25);
        assert_eq!(schedule_lr(5, 100, 10, 0.5), 0.25);
        assert_eq!(schedule_lr(0, 100, 0, 0.5), 0.5);
    }

    #[test]
    fn adam_minimizes_a_quadratic() {
        // f(w) = (w - 3)^2, minimum at 3.
        let mut p = ParameterSet::new();
        p.insert("w", Tensor::new(vec![1], vec![0.0]).unwrap())
            .unwrap();
        let mut adam = Adam::new(AdamConfig::default(), &p);
        for _ in 0..500 {
            let w = p.get("w").unwrap().data()[0];
            let g = Tensor::new(vec![1], vec![2.0 * (w - 3.0)]).unwrap();
            adam.step(&mut p, &[g], 0.1).unwrap();
        }
        assert!((p.get("w").unwrap().data()[0] - 3.0).abs() < 1e-3);
    }

    #[test]
    fn adam_refuses_frozen_params() {
        let mut p = ParameterSet::new();
        p.insert("w", Tensor::new(vec![1], vec![0.0]).unwrap())
            .unwrap();
        let mut adam = Adam::new(AdamConfig::default(), &p);
        p.freeze();
        let g = Tensor::new(vec![1], vec![1.0]).unwrap();
        assert!(adam.step(&mut p, &[g], 0.1).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(LfdConfig::default().validate().is_ok());
        for bad in [
            LfdConfig {
                r: 0.0,
                ..LfdConfig::default()
            },
            LfdConfig {
                r: 1.5,
                ..LfdConfig::default()
            },
            LfdConfig {
                lambda: -1.0,
                ..LfdConfig::default()
            },
            LfdConfig {
                h: StepCount::Steps(0),
                ..LfdConfig::default()
            },
            LfdConfig {
                batch_size: 0,
                ..LfdConfig::default()
            },
        ] {
            assert!(matches!(bad.validate(), Err(Error::Config { .. })));
        }
    }

    #[test]
    fn step_counts_resolve_against_epoch_length() {
        assert_eq!(StepCount::Epochs(3.0).resolve(7), 21);
        assert_eq!(StepCount::Steps(5).resolve(7), 5);
    }
}
