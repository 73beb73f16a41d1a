//! Network assembly: configuration, named parameters, forward pass.

mod checkpoint;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{
    load_checkpoint, save_checkpoint, save_checkpoint_with_meta, Checkpoint, CheckpointMeta,
    FORMAT_VERSION, MAGIC,
};

use crate::error::{Error, Result};
use crate::layers::{
    attention_forward, bilstm_forward, conv_block_forward, segmentation_heads_forward,
    AttentionParams, ConvBlockParams, HeadParams, LstmParams, NUM_STAGES,
};
use crate::tensor::{Float, Tape, Tensor, Var};

/// Which optional modules sit between the convolution stack and the heads.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    /// Convolution only.
    C,
    /// Convolution + recurrent.
    CR,
    /// Convolution + attention over the convolution features.
    CA,
    /// Convolution + recurrent + attention.
    CRA,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::C, Variant::CR, Variant::CA, Variant::CRA];

    pub fn recurrent(self) -> bool {
        matches!(self, Variant::CR | Variant::CRA)
    }

    pub fn attention(self) -> bool {
        matches!(self, Variant::CA | Variant::CRA)
    }

    pub fn from_flags(recurrent: bool, attention: bool) -> Self {
        match (recurrent, attention) {
            (false, false) => Variant::C,
            (true, false) => Variant::CR,
            (false, true) => Variant::CA,
            (true, true) => Variant::CRA,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Variant::C => "C",
            Variant::CR => "CR",
            Variant::CA => "CA",
            Variant::CRA => "CRA",
        };
        f.write_str(s)
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "C" => Ok(Variant::C),
            "CR" => Ok(Variant::CR),
            "CA" => Ok(Variant::CA),
            "CRA" => Ok(Variant::CRA),
            other => Err(Error::Config(format!(
                "unknown variant {other:?}; expected one of C, CR, CA, CRA"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_blocks: usize,
    /// Output channels of each convolution block.
    pub filters: Vec<usize>,
    /// `(large, small)` kernel sizes of each convolution block.
    pub kernels: Vec<(usize, usize)>,
    pub lstm_layers: usize,
    /// Hidden units per direction.
    pub lstm_units: usize,
    pub enable_recurrent: bool,
    pub enable_attention: bool,
    pub num_stages: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::full_scale()
    }
}

impl ModelConfig {
    /// Eight blocks ramping from 32 to 192 filters and from (11, 9) to (5, 3)
    /// kernels, three BiLSTM layers of 128 units per direction, attention on.
    pub fn full_scale() -> Self {
        ModelConfig {
            num_blocks: 8,
            filters: vec![32, 32, 64, 64, 96, 128, 160, 192],
            kernels: vec![
                (11, 9),
                (11, 9),
                (9, 7),
                (9, 7),
                (7, 5),
                (7, 5),
                (5, 3),
                (5, 3),
            ],
            lstm_layers: 3,
            lstm_units: 128,
            enable_recurrent: true,
            enable_attention: true,
            num_stages: NUM_STAGES,
            seed: 0,
        }
    }

    /// Three blocks of 16 filters and one BiLSTM layer of 16 units per
    /// direction. Small enough to train on a laptop CPU in minutes.
    pub fn toy() -> Self {
        ModelConfig {
            num_blocks: 3,
            filters: vec![16; 3],
            kernels: vec![(11, 9), (9, 7), (7, 5)],
            lstm_layers: 1,
            lstm_units: 16,
            enable_recurrent: true,
            enable_attention: true,
            num_stages: NUM_STAGES,
            seed: 0,
        }
    }

    pub fn with_variant(mut self, variant: Variant) -> Self {
        self.enable_recurrent = variant.recurrent();
        self.enable_attention = variant.attention();
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn variant(&self) -> Variant {
        Variant::from_flags(self.enable_recurrent, self.enable_attention)
    }

    /// Temporal reduction from input samples to output steps, `2^num_blocks`.
    pub fn downsampling_factor(&self) -> usize {
        1 << self.num_blocks
    }

    /// Width of the features entering the segmentation heads.
    pub fn feature_width(&self) -> usize {
        if self.enable_recurrent {
            2 * self.lstm_units
        } else {
            *self.filters.last().expect("validated config has blocks")
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.num_blocks == 0 || self.num_blocks > 30 {
            return bad(format!(
                "num_blocks must be in 1..=30, got {}",
                self.num_blocks
            ));
        }
        if self.filters.len() != self.num_blocks || self.kernels.len() != self.num_blocks {
            return bad(format!(
                "{} blocks need {} filter and kernel entries, got {} and {}",
                self.num_blocks,
                self.num_blocks,
                self.filters.len(),
                self.kernels.len()
            ));
        }
        if self.filters.contains(&0) {
            return bad("filter counts must be positive".into());
        }
        for (i, &(large, small)) in self.kernels.iter().enumerate() {
            if large % 2 == 0 || small % 2 == 0 || large <= small {
                return bad(format!(
                    "block {} kernels ({large}, {small}) must be odd with large > small",
                    i + 1
                ));
            }
        }
        if self.enable_recurrent && (self.lstm_layers == 0 || self.lstm_units == 0) {
            return bad("recurrent module needs at least one layer and one unit".into());
        }
        if self.num_stages != NUM_STAGES {
            return bad(format!(
                "the stage head has {NUM_STAGES} classes, got num_stages = {}",
                self.num_stages
            ));
        }
        Ok(())
    }

    /// Every parameter name with its shape, in construction order.
    pub fn parameter_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let mut cin = 1;
        for (i, (&cf, &(k1, k2))) in self.filters.iter().zip(&self.kernels).enumerate() {
            let b = i + 1;
            out.push((format!("block{b}.kernels_large"), vec![k1, cin, cf]));
            out.push((format!("block{b}.bias_large"), vec![cf]));
            out.push((format!("block{b}.kernels_small"), vec![k2, cf, cf]));
            out.push((format!("block{b}.bias_small"), vec![cf]));
            cin = cf;
        }
        if self.enable_recurrent {
            let u = self.lstm_units;
            for l in 1..=self.lstm_layers {
                let dim = if l == 1 { cin } else { 2 * u };
                for dir in ["fwd", "bwd"] {
                    out.push((format!("lstm{l}.{dir}.w_in"), vec![dim, 4 * u]));
                    out.push((format!("lstm{l}.{dir}.w_rec"), vec![u, 4 * u]));
                    out.push((format!("lstm{l}.{dir}.bias"), vec![4 * u]));
                }
            }
        }
        let d = self.feature_width();
        if self.enable_attention {
            out.push(("attention.weight".into(), vec![d, 1]));
            out.push(("attention.bias".into(), vec![1]));
        }
        out.push(("head.arousal.kernels".into(), vec![1, d, 1]));
        out.push(("head.arousal.bias".into(), vec![1]));
        out.push(("head.stage.kernels".into(), vec![1, d, self.num_stages]));
        out.push(("head.stage.bias".into(), vec![self.num_stages]));
        out
    }
}

/// Named parameter tensors of one model.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<S = f64> {
    tensors: BTreeMap<String, Tensor<S>>,
}

impl<S: Float> ModelParams<S> {
    pub fn from_map(tensors: BTreeMap<String, Tensor<S>>) -> Self {
        ModelParams { tensors }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<S>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<S>> {
        self.tensors.get_mut(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<S>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<S>)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn cast<T: Float>(&self) -> ModelParams<T> {
        ModelParams {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }

    /// Checks that names and shapes are exactly those `cfg` induces.
    pub fn check_against(&self, cfg: &ModelConfig) -> Result<()> {
        let expected = cfg.parameter_shapes();
        for (name, shape) in &expected {
            match self.tensors.get(name) {
                None => {
                    return Err(Error::Format(format!(
                        "parameter {name} required by the {} configuration is missing",
                        cfg.variant()
                    )))
                }
                Some(t) if t.shape() != shape.as_slice() => {
                    return Err(Error::Format(format!(
                        "parameter {name} has shape {:?}, configuration expects {shape:?}",
                        t.shape()
                    )))
                }
                Some(_) => {}
            }
        }
        if self.tensors.len() != expected.len() {
            let extra: Vec<&str> = self
                .names()
                .filter(|n| !expected.iter().any(|(e, _)| e == n))
                .collect();
            return Err(Error::Format(format!(
                "parameters {extra:?} are not part of the {} configuration",
                cfg.variant()
            )));
        }
        Ok(())
    }

    /// Places every parameter on `tape`, trainable when `tape` records.
    pub fn bind(&self, tape: &mut Tape<S>) -> BoundParams {
        let vars = self
            .tensors
            .iter()
            .map(|(name, t)| (name.clone(), tape.param(t.clone())))
            .collect();
        BoundParams { vars }
    }
}

/// Tape handles for a [`ModelParams`] set.
#[derive(Clone, Debug)]
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Format(format!("parameter {name} is not bound")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

impl FromIterator<(String, Var)> for BoundParams {
    fn from_iter<I: IntoIterator<Item = (String, Var)>>(iter: I) -> Self {
        BoundParams {
            vars: iter.into_iter().collect(),
        }
    }
}

/// Deterministically initialises every parameter of `cfg`.
///
/// Convolution, dense and LSTM input weights draw from a Glorot-style
/// uniform range, recurrent weights from `±1/√units`. Biases start at zero
/// except the LSTM forget-gate block, which starts at one.
pub fn build_model<S: Float>(cfg: &ModelConfig) -> Result<ModelParams<S>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut tensors = BTreeMap::new();
    for (name, shape) in cfg.parameter_shapes() {
        let numel: usize = shape.iter().product();
        let data: Vec<f64> = if name.ends_with("w_rec") {
            let bound = 1.0 / (shape[0] as f64).sqrt();
            (0..numel).map(|_| rng.gen_range(-bound..bound)).collect()
        } else if name.contains("bias") {
            let mut b = vec![0.0; numel];
            if name.starts_with("lstm") {
                let units = numel / 4;
                b[units..2 * units].fill(1.0);
            }
            b
        } else {
            let (fan_in, fan_out) = fans(&shape);
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            (0..numel).map(|_| rng.gen_range(-bound..bound)).collect()
        };
        tensors.insert(name, Tensor::from_f64(shape, &data)?);
    }
    Ok(ModelParams { tensors })
}

fn fans(shape: &[usize]) -> (usize, usize) {
    match shape {
        [k, cin, cout] => (k * cin, k * cout),
        [din, dout] => (*din, *dout),
        [n] => (*n, *n),
        _ => (1, 1),
    }
}

/// Handles to the two output masks on a tape.
#[derive(Clone, Copy, Debug)]
pub struct OutputVars {
    /// `[T, 1]`
    pub arousal: Var,
    /// `[T, 5]`
    pub stage: Var,
    /// Attention weights `[T]`, when attention is enabled.
    pub alpha: Option<Var>,
}

/// Runs the network on a `[L, 1]` signal already on `tape`.
pub fn forward_on_tape<S: Float>(
    tape: &mut Tape<S>,
    params: &BoundParams,
    cfg: &ModelConfig,
    signal: Var,
) -> Result<OutputVars> {
    let shape = tape.shape(signal).to_vec();
    let factor = cfg.downsampling_factor();
    match shape[..] {
        [len, 1] if len % factor == 0 => {}
        _ => {
            return Err(Error::Shape(format!(
                "input must be [L, 1] with L a multiple of {factor}, got {shape:?}"
            )))
        }
    }
    let mut x = signal;
    for b in 1..=cfg.num_blocks {
        let p = ConvBlockParams {
            kernels_large: params.var(&format!("block{b}.kernels_large"))?,
            bias_large: params.var(&format!("block{b}.bias_large"))?,
            kernels_small: params.var(&format!("block{b}.kernels_small"))?,
            bias_small: params.var(&format!("block{b}.bias_small"))?,
        };
        let next = conv_block_forward(tape, x, &p)?;
        if x != signal {
            tape.release(x);
        }
        x = next;
    }
    if cfg.enable_recurrent {
        for l in 1..=cfg.lstm_layers {
            let dir = |d: &str| -> Result<LstmParams> {
                Ok(LstmParams {
                    w_in: params.var(&format!("lstm{l}.{d}.w_in"))?,
                    w_rec: params.var(&format!("lstm{l}.{d}.w_rec"))?,
                    bias: params.var(&format!("lstm{l}.{d}.bias"))?,
                })
            };
            let next = bilstm_forward(tape, x, &dir("fwd")?, &dir("bwd")?)?;
            tape.release(x);
            x = next;
        }
    }
    let mut alpha = None;
    if cfg.enable_attention {
        let p = AttentionParams {
            weight: params.var("attention.weight")?,
            bias: params.var("attention.bias")?,
        };
        let (h_tilde, a) = attention_forward(tape, x, &p)?;
        tape.release(x);
        x = h_tilde;
        alpha = Some(a);
    }
    let heads = HeadParams {
        arousal_kernels: params.var("head.arousal.kernels")?,
        arousal_bias: params.var("head.arousal.bias")?,
        stage_kernels: params.var("head.stage.kernels")?,
        stage_bias: params.var("head.stage.bias")?,
    };
    let (arousal, stage) = segmentation_heads_forward(tape, x, &heads)?;
    Ok(OutputVars {
        arousal,
        stage,
        alpha,
    })
}

/// Output masks of one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelOutput<S = f64> {
    /// Arousal probability per output step, length `T`.
    pub arousal: Vec<S>,
    /// Stage probabilities, row-major `[T, 5]`.
    pub stage: Vec<S>,
    pub steps: usize,
}

impl<S: Float> ModelOutput<S> {
    pub fn stage_row(&self, t: usize) -> &[S] {
        &self.stage[t * NUM_STAGES..(t + 1) * NUM_STAGES]
    }
}

/// Inference on a `[L, 1]` signal. Intermediates are freed as soon as they
/// are consumed, so full-night inputs fit in memory.
pub fn model_forward<S: Float>(
    params: &ModelParams<S>,
    cfg: &ModelConfig,
    signal: &Tensor<S>,
) -> Result<ModelOutput<S>> {
    let mut tape = Tape::inference();
    let bound = params.bind(&mut tape);
    let input = tape.leaf(signal.clone());
    let out = forward_on_tape(&mut tape, &bound, cfg, input)?;
    let steps = tape.shape(out.arousal)[0];
    Ok(ModelOutput {
        arousal: tape.value(out.arousal).to_vec(),
        stage: tape.value(out.stage).to_vec(),
        steps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_scale_schedule_ends_at_192_filters() {
        let cfg = ModelConfig::full_scale();
        cfg.validate().unwrap();
        assert_eq!(*cfg.filters.last().unwrap(), 192);
        assert_eq!(cfg.filters[..2], [32, 32]);
        assert_eq!(cfg.kernels[0], (11, 9));
        assert_eq!(*cfg.kernels.last().unwrap(), (5, 3));
        assert_eq!(cfg.downsampling_factor(), 256);
        let shapes = cfg.parameter_shapes();
        let (_, last_conv) = shapes
            .iter()
            .find(|(n, _)| n == "block8.kernels_small")
            .unwrap();
        assert_eq!(last_conv[2], 192);
    }

    #[test]
    fn invalid_schedules_are_rejected() {
        let mut cfg = ModelConfig::toy();
        cfg.filters.pop();
        assert!(build_model::<f64>(&cfg).is_err());
        let mut cfg = ModelConfig::toy();
        cfg.kernels[1] = (7, 9);
        assert!(cfg.validate().is_err());
        let mut cfg = ModelConfig::toy();
        cfg.kernels[0] = (10, 9);
        assert!(cfg.validate().is_err());
        let mut cfg = ModelConfig::toy();
        cfg.num_stages = 4;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn variant_strings_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.to_string().parse::<Variant>().unwrap(), v);
            assert_eq!(Variant::from_flags(v.recurrent(), v.attention()), v);
        }
        assert!("CRAB".parse::<Variant>().is_err());
    }

    #[test]
    fn lstm_forget_bias_starts_at_one() {
        let params = build_model::<f64>(&ModelConfig::toy()).unwrap();
        let b = params.get("lstm1.fwd.bias").unwrap().data();
        assert!(b[..16].iter().all(|&v| v == 0.0));
        assert!(b[16..32].iter().all(|&v| v == 1.0));
        assert!(b[32..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_rejects_lengths_not_divisible_by_factor() {
        let cfg = ModelConfig::toy();
        let params = build_model::<f64>(&cfg).unwrap();
        let x = Tensor::zeros(vec![100, 1]);
        assert!(model_forward(&params, &cfg, &x).is_err());
    }
}
