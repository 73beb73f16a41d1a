//! Multi-task loss, Adam, amplitude augmentation and the early-stopped
//! training loop.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::ops::Range;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::PreparedExample;
use crate::error::{Error, Result};
use crate::layers::NUM_STAGES;
use crate::model::{build_model, forward_on_tape, ModelConfig, ModelParams};
use crate::tensor::{Float, Tape, Var};

/// Weights of the arousal (`w1`) and stage (`w2`) loss terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub w1: f64,
    pub w2: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { w1: 1.0, w2: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.w1 >= 0.0 && self.w2 >= 0.0 && self.w1.is_finite() && self.w2.is_finite()) {
            return Err(Error::Config(format!(
                "loss weights must be finite and non-negative, got {self:?}"
            )));
        }
        Ok(())
    }
}

/// Mean binary cross-entropy over `valid`.
pub fn bce_loss<S: Float>(
    tape: &mut Tape<S>,
    pred: Var,
    target: &[S],
    valid: Range<usize>,
) -> Result<Var> {
    if valid.is_empty() {
        return Err(Error::InvalidArgument(
            "arousal loss over an empty range".into(),
        ));
    }
    tape.bce_mean(pred, target, valid)
}

/// Mean categorical cross-entropy over `valid`; all-zero target rows add 0.
pub fn cce_loss<S: Float>(
    tape: &mut Tape<S>,
    pred: Var,
    target: &[S],
    valid: Range<usize>,
) -> Result<Var> {
    if valid.is_empty() {
        return Err(Error::InvalidArgument(
            "stage loss over an empty range".into(),
        ));
    }
    tape.cce_mean(pred, target, valid)
}

/// Handles to the total loss and its two terms.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub total: Var,
    pub arousal: Var,
    pub stage: Var,
}

/// `w1·BCE + w2·CCE` over the same valid range.
pub fn combined_loss<S: Float>(
    tape: &mut Tape<S>,
    arousal_pred: Var,
    arousal_target: &[S],
    stage_pred: Var,
    stage_target: &[S],
    weights: LossWeights,
    valid: Range<usize>,
) -> Result<LossVars> {
    let arousal = bce_loss(tape, arousal_pred, arousal_target, valid.clone())?;
    let stage = cce_loss(tape, stage_pred, stage_target, valid)?;
    let a = tape.scale(arousal, S::from_f64(weights.w1))?;
    let s = tape.scale(stage, S::from_f64(weights.w2))?;
    let total = tape.add(a, s)?;
    Ok(LossVars {
        total,
        arousal,
        stage,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-7,
        }
    }
}

/// First and second moment estimates for every parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<S = f64> {
    pub config: AdamConfig,
    pub step: u64,
    m: BTreeMap<String, Vec<S>>,
    v: BTreeMap<String, Vec<S>>,
}

impl<S: Float> AdamState<S> {
    pub fn new(params: &ModelParams<S>, config: AdamConfig) -> Self {
        let zeros = || {
            params
                .iter()
                .map(|(k, t)| (k.to_string(), vec![S::zero(); t.numel()]))
                .collect()
        };
        AdamState {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn first_moment(&self, name: &str) -> Option<&[S]> {
        self.m.get(name).map(Vec::as_slice)
    }

    pub fn second_moment(&self, name: &str) -> Option<&[S]> {
        self.v.get(name).map(Vec::as_slice)
    }
}

/// One bias-corrected Adam update of every parameter.
pub fn adam_step<S: Float>(
    params: &mut ModelParams<S>,
    grads: &BTreeMap<String, Vec<S>>,
    state: &mut AdamState<S>,
) -> Result<()> {
    for (name, t) in params.iter() {
        match grads.get(name) {
            Some(g) if g.len() == t.numel() => {}
            Some(g) => {
                return Err(Error::Shape(format!(
                    "gradient for {name} has {} values, parameter has {}",
                    g.len(),
                    t.numel()
                )))
            }
            None => return Err(Error::InvalidArgument(format!("no gradient for {name}"))),
        }
    }
    state.step = state
        .step
        .checked_add(1)
        .ok_or_else(|| Error::InvalidArgument("Adam step counter overflow".into()))?;
    let c = state.config;
    let t = state.step as i32;
    let bias1 = 1.0 - c.beta1.powi(t);
    let bias2 = 1.0 - c.beta2.powi(t);
    let (b1, b2) = (S::from_f64(c.beta1), S::from_f64(c.beta2));
    let (one_b1, one_b2) = (S::from_f64(1.0 - c.beta1), S::from_f64(1.0 - c.beta2));
    let (bias1, bias2) = (S::from_f64(bias1), S::from_f64(bias2));
    let (lr, eps) = (S::from_f64(c.lr), S::from_f64(c.epsilon));
    for (name, tensor) in params.iter_mut() {
        let g = &grads[name];
        let m = state
            .m
            .entry(name.to_string())
            .or_insert_with(|| vec![S::zero(); g.len()]);
        let v = state
            .v
            .entry(name.to_string())
            .or_insert_with(|| vec![S::zero(); g.len()]);
        for (((theta, &gi), mi), vi) in tensor
            .data_mut()
            .iter_mut()
            .zip(g)
            .zip(m.iter_mut())
            .zip(v.iter_mut())
        {
            *mi = b1 * *mi + one_b1 * gi;
            *vi = b2 * *vi + one_b2 * gi * gi;
            let m_hat = *mi / bias1;
            let v_hat = *vi / bias2;
            *theta -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Multiplies the signal by `c ~ U[0.9, 1.1]`. Returns the scaled copy and `c`.
pub fn augment_scale<S: Float>(signal: &[S], rng: &mut impl Rng) -> (Vec<S>, f64) {
    let c: f64 = rng.gen_range(0.9..=1.1);
    let cs = S::from_f64(c);
    (signal.iter().map(|&v| v * cs).collect(), c)
}

/// Rescales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm<S: Float>(grads: &mut BTreeMap<String, Vec<S>>, max_norm: f64) -> f64 {
    let norm = grads
        .values()
        .flat_map(|g| g.iter())
        .map(|&v| v.as_f64() * v.as_f64())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let k = S::from_f64(max_norm / norm);
        for g in grads.values_mut() {
            g.iter_mut().for_each(|v| *v *= k);
        }
    }
    norm
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub adam: AdamConfig,
    pub loss_weights: LossWeights,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub max_epochs: usize,
    /// Hard cap on optimizer steps across all epochs.
    pub max_steps: Option<usize>,
    /// Random amplitude scaling of training inputs.
    pub augment: bool,
    /// Average the loss over padded steps too, instead of the valid region only.
    pub include_padding: bool,
    /// Global gradient-norm clip. Off by default.
    pub clip_norm: Option<f64>,
    /// Seeds data order and augmentation draws.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            adam: AdamConfig::default(),
            loss_weights: LossWeights::default(),
            patience: 20,
            max_epochs: 200,
            max_steps: None,
            augment: true,
            include_padding: false,
            clip_norm: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss_weights.validate()?;
        let a = &self.adam;
        if !(a.lr > 0.0
            && (0.0..1.0).contains(&a.beta1)
            && (0.0..1.0).contains(&a.beta2)
            && a.epsilon > 0.0)
        {
            return Err(Error::Config(format!("invalid Adam settings {a:?}")));
        }
        if self.max_epochs == 0 || self.patience == 0 {
            return Err(Error::Config(
                "max_epochs and patience must be at least 1".into(),
            ));
        }
        if self.clip_norm.is_some_and(|c| !(c > 0.0)) {
            return Err(Error::Config("clip_norm must be positive".into()));
        }
        Ok(())
    }
}

/// Patience-based early stopping on a loss to be minimised.
#[derive(Clone, Debug, PartialEq)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best: f64,
    pub best_epoch: usize,
    pub epochs_since_improvement: usize,
    epoch: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StopDecision {
    pub improved: bool,
    pub stop: bool,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            best: f64::INFINITY,
            best_epoch: 0,
            epochs_since_improvement: 0,
            epoch: 0,
        }
    }

    /// Records the loss of the next epoch (1-based).
    pub fn observe(&mut self, loss: f64) -> StopDecision {
        self.epoch += 1;
        let improved = loss < self.best;
        if improved {
            self.best = loss;
            self.best_epoch = self.epoch;
            self.epochs_since_improvement = 0;
        } else {
            self.epochs_since_improvement += 1;
        }
        StopDecision {
            improved,
            stop: self.epochs_since_improvement >= self.patience,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<S = f64> {
    /// Parameters after the epoch with the lowest validation loss.
    pub best_params: ModelParams<S>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub history: Vec<EpochStats>,
    /// Loss of every optimizer step, in order.
    pub step_losses: Vec<f64>,
    pub stopped_early: bool,
}

/// Loss-region length for one example.
fn loss_range<S: Float>(ex: &PreparedExample<S>, include_padding: bool) -> Result<Range<usize>> {
    let end = if include_padding {
        ex.steps()
    } else {
        ex.valid_steps
    };
    if end == 0 {
        return Err(Error::InvalidArgument(format!(
            "record {} is shorter than one output step ({} samples)",
            ex.id, ex.factor
        )));
    }
    Ok(0..end)
}

/// Loss and gradients for one example.
pub fn loss_and_grads<S: Float>(
    params: &ModelParams<S>,
    cfg: &ModelConfig,
    ex: &PreparedExample<S>,
    signal: Vec<S>,
    weights: LossWeights,
    include_padding: bool,
) -> Result<(f64, BTreeMap<String, Vec<S>>)> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let input = tape.constant(vec![signal.len(), 1], signal)?;
    let out = forward_on_tape(&mut tape, &bound, cfg, input)?;
    let range = loss_range(ex, include_padding)?;
    let loss = combined_loss(
        &mut tape,
        out.arousal,
        &ex.arousal_target,
        out.stage,
        &ex.stage_target,
        weights,
        range,
    )?;
    let value = tape.scalar(loss.total)?.as_f64();
    if !value.is_finite() {
        return Ok((value, BTreeMap::new()));
    }
    let mut grads = tape.backward(loss.total)?;
    let mut by_name = BTreeMap::new();
    for (name, var) in bound.iter() {
        let g = grads
            .take(var)
            .ok_or_else(|| Error::InvalidArgument(format!("no gradient reached {name}")))?;
        by_name.insert(name.to_string(), g);
    }
    Ok((value, by_name))
}

/// Loss of one example without recording gradients.
pub fn evaluate_loss<S: Float>(
    params: &ModelParams<S>,
    cfg: &ModelConfig,
    ex: &PreparedExample<S>,
    weights: LossWeights,
    include_padding: bool,
) -> Result<f64> {
    let mut tape = Tape::inference();
    let bound = params.bind(&mut tape);
    let input = tape.constant(vec![ex.signal.len(), 1], ex.signal.clone())?;
    let out = forward_on_tape(&mut tape, &bound, cfg, input)?;
    let range = loss_range(ex, include_padding)?;
    let loss = combined_loss(
        &mut tape,
        out.arousal,
        &ex.arousal_target,
        out.stage,
        &ex.stage_target,
        weights,
        range,
    )?;
    Ok(tape.scalar(loss.total)?.as_f64())
}

/// Mean of per-record losses, summed in record order.
pub fn validation_loss<S: Float>(
    params: &ModelParams<S>,
    cfg: &ModelConfig,
    examples: &[PreparedExample<S>],
    weights: LossWeights,
    include_padding: bool,
) -> Result<f64> {
    let losses: Vec<f64> = examples
        .par_iter()
        .map(|ex| evaluate_loss(params, cfg, ex, weights, include_padding))
        .collect::<Result<_>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

fn check_examples<S: Float>(
    cfg: &ModelConfig,
    examples: &[PreparedExample<S>],
    what: &str,
) -> Result<()> {
    if examples.is_empty() {
        return Err(Error::InvalidArgument(format!("{what} set is empty")));
    }
    let factor = cfg.downsampling_factor();
    for ex in examples {
        if ex.factor != factor || ex.stage_target.len() != ex.steps() * NUM_STAGES {
            return Err(Error::Shape(format!(
                "record {} was prepared for factor {}, model needs {factor}",
                ex.id, ex.factor
            )));
        }
    }
    Ok(())
}

/// Trains from a fresh initialisation of `cfg`.
pub fn train<S: Float>(
    cfg: &ModelConfig,
    train_set: &[PreparedExample<S>],
    val_set: &[PreparedExample<S>],
    tc: &TrainConfig,
) -> Result<TrainOutcome<S>> {
    let params = build_model::<S>(cfg)?;
    train_from(cfg, params, train_set, val_set, tc, &mut |_| {})
}

/// Trains `params`, reporting each finished epoch to `on_epoch`.
///
/// One optimizer step per training record, records shuffled every epoch.
/// After each pass the mean validation loss decides early stopping; the
/// returned parameters are those of the best validation epoch.
pub fn train_from<S: Float>(
    cfg: &ModelConfig,
    mut params: ModelParams<S>,
    train_set: &[PreparedExample<S>],
    val_set: &[PreparedExample<S>],
    tc: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochStats),
) -> Result<TrainOutcome<S>> {
    tc.validate()?;
    params.check_against(cfg)?;
    check_examples(cfg, train_set, "training")?;
    check_examples(cfg, val_set, "validation")?;

    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    let mut adam = AdamState::new(&params, tc.adam);
    let mut stopper = EarlyStopping::new(tc.patience);
    let mut best_params = params.clone();
    let mut history = Vec::new();
    let mut step_losses = Vec::new();
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut stopped_early = false;

    'epochs: for epoch in 1..=tc.max_epochs {
        let started = Instant::now();
        order.shuffle(&mut rng);
        let mut epoch_total = 0.0;
        let mut epoch_steps = 0usize;
        for &i in &order {
            if tc.max_steps.is_some_and(|m| step_losses.len() >= m) {
                break;
            }
            let ex = &train_set[i];
            let signal = if tc.augment {
                augment_scale(&ex.signal, &mut rng).0
            } else {
                ex.signal.clone()
            };
            let (loss, mut grads) = loss_and_grads(
                &params,
                cfg,
                ex,
                signal,
                tc.loss_weights,
                tc.include_padding,
            )?;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!(
                    "training loss is {loss} on record {} at step {} (epoch {epoch})",
                    ex.id,
                    step_losses.len() + 1
                )));
            }
            if let Some(max_norm) = tc.clip_norm {
                clip_global_norm(&mut grads, max_norm);
            }
            adam_step(&mut params, &grads, &mut adam)?;
            step_losses.push(loss);
            epoch_total += loss;
            epoch_steps += 1;
        }
        if epoch_steps == 0 {
            break;
        }
        let val_loss = validation_loss(&params, cfg, val_set, tc.loss_weights, tc.include_padding)?;
        if !val_loss.is_finite() {
            return Err(Error::NonFinite(format!(
                "validation loss is {val_loss} after epoch {epoch}"
            )));
        }
        let stats = EpochStats {
            epoch,
            train_loss: epoch_total / epoch_steps as f64,
            val_loss,
            seconds: started.elapsed().as_secs_f64(),
        };
        on_epoch(&stats);
        history.push(stats);
        let decision = stopper.observe(val_loss);
        if decision.improved {
            best_params = params.clone();
        }
        if decision.stop {
            stopped_early = true;
            break 'epochs;
        }
        if tc.max_steps.is_some_and(|m| step_losses.len() >= m) {
            break;
        }
    }
    Ok(TrainOutcome {
        best_params,
        best_epoch: stopper.best_epoch,
        best_val_loss: stopper.best,
        history,
        step_losses,
        stopped_early,
    })
}

/// Tab-separated history with a header row.
pub fn history_tsv(history: &[EpochStats]) -> String {
    let mut out = String::from("epoch\ttrain_loss\tval_loss\tseconds\n");
    for h in history {
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{:.3}",
            h.epoch, h.train_loss, h.val_loss, h.seconds
        );
    }
    out
}

pub fn write_history_tsv(history: &[EpochStats], path: &Path) -> Result<()> {
    fs::write(path, history_tsv(history)).map_err(|e| Error::io(path, e))
}
