//! The four network building blocks as forward functions over a [`Tape`].
//!
//! Parameter structs hold [`Var`] handles to tensors already placed on the
//! tape, so the same functions serve training (recording tape) and inference.

use crate::error::{Error, Result};
use crate::tensor::{Float, Tape, Var};

/// Number of sleep-stage classes (W, N1, N2, N3, REM).
pub const NUM_STAGES: usize = 5;

/// Two "same" convolutions: the large kernel first, then the small one.
#[derive(Clone, Copy, Debug)]
pub struct ConvBlockParams {
    /// `[K1, Cin, Cf]`
    pub kernels_large: Var,
    pub bias_large: Var,
    /// `[K2, Cf, Cf]`, `K2 < K1`
    pub kernels_small: Var,
    pub bias_small: Var,
}

/// One LSTM direction with the four gates packed along the last axis in
/// (input, forget, cell, output) order.
#[derive(Clone, Copy, Debug)]
pub struct LstmParams {
    /// `[D, 4U]`
    pub w_in: Var,
    /// `[U, 4U]`
    pub w_rec: Var,
    /// `[4U]`
    pub bias: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct AttentionParams {
    /// `[D, 1]`
    pub weight: Var,
    /// `[1]`
    pub bias: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct HeadParams {
    /// `[1, D, 1]`
    pub arousal_kernels: Var,
    pub arousal_bias: Var,
    /// `[1, D, 5]`
    pub stage_kernels: Var,
    pub stage_bias: Var,
}

/// conv(K1) → ReLU → conv(K2) → ReLU → maxpool(2, 2). Halves the time axis.
pub fn conv_block_forward<S: Float>(
    tape: &mut Tape<S>,
    input: Var,
    p: &ConvBlockParams,
) -> Result<Var> {
    let len = tape.shape(input)[0];
    if len % 2 != 0 {
        return Err(Error::Shape(format!(
            "convolution block needs an even input length, got {len}"
        )));
    }
    let (k1, k2) = (
        tape.shape(p.kernels_large)[0],
        tape.shape(p.kernels_small)[0],
    );
    if k1 <= k2 {
        return Err(Error::Shape(format!(
            "large kernel ({k1}) must exceed small kernel ({k2})"
        )));
    }
    let c1 = tape.conv1d_same(input, p.kernels_large, p.bias_large)?;
    let r1 = tape.relu(c1)?;
    tape.release(c1);
    let c2 = tape.conv1d_same(r1, p.kernels_small, p.bias_small)?;
    tape.release(r1);
    let r2 = tape.relu(c2)?;
    tape.release(c2);
    let pooled = tape.maxpool1d(r2, 2, 2)?;
    tape.release(r2);
    Ok(pooled)
}

/// Bidirectional LSTM with zero initial states. Output row `t` is the
/// forward hidden state at `t` followed by the backward hidden state at `t`.
pub fn bilstm_forward<S: Float>(
    tape: &mut Tape<S>,
    input: Var,
    fwd: &LstmParams,
    bwd: &LstmParams,
) -> Result<Var> {
    let forward = tape.lstm(input, fwd.w_in, fwd.w_rec, fwd.bias, false)?;
    let backward = tape.lstm(input, bwd.w_in, bwd.w_rec, bwd.bias, true)?;
    let out = tape.concat_lastdim(forward, backward)?;
    tape.release(forward);
    tape.release(backward);
    Ok(out)
}

/// Additive attention over time.
///
/// Scores `s_t = tanh(h_t · W + b)` are normalised by a softmax over the time
/// axis into weights `α`, the context `a = Σ_t α_t h_t` is added back to every
/// step. Returns `(h + a, α)` with `α` of shape `[T]`.
pub fn attention_forward<S: Float>(
    tape: &mut Tape<S>,
    h: Var,
    p: &AttentionParams,
) -> Result<(Var, Var)> {
    let shape = tape.shape(h).to_vec();
    let [len, width] = shape[..] else {
        return Err(Error::Shape(format!(
            "attention input must be [T, D], got {shape:?}"
        )));
    };
    if tape.shape(p.weight) != [width, 1] {
        return Err(Error::Shape(format!(
            "attention weight {:?} does not match width {width}",
            tape.shape(p.weight)
        )));
    }
    let projected = tape.dense(h, p.weight, p.bias)?;
    let scores = tape.tanh(projected)?;
    let row = tape.reshape(scores, vec![1, len])?;
    let alpha = tape.softmax_lastdim(row)?;
    let context = tape.matmul(alpha, h)?;
    let context = tape.reshape(context, vec![width])?;
    let h_tilde = tape.add(h, context)?;
    let alpha = tape.reshape(alpha, vec![len])?;
    Ok((h_tilde, alpha))
}

/// Two 1×1 convolution branches: a sigmoid arousal mask `[T, 1]` and a
/// softmax stage mask `[T, 5]`.
pub fn segmentation_heads_forward<S: Float>(
    tape: &mut Tape<S>,
    h_tilde: Var,
    p: &HeadParams,
) -> Result<(Var, Var)> {
    for k in [p.arousal_kernels, p.stage_kernels] {
        if tape.shape(k)[0] != 1 {
            return Err(Error::Shape(format!(
                "segmentation heads use kernel length 1, got {:?}",
                tape.shape(k)
            )));
        }
    }
    if tape.shape(p.stage_kernels)[2] != NUM_STAGES {
        return Err(Error::Shape(format!(
            "stage head must have {NUM_STAGES} filters, got {:?}",
            tape.shape(p.stage_kernels)
        )));
    }
    let a_logits = tape.conv1d_same(h_tilde, p.arousal_kernels, p.arousal_bias)?;
    let arousal = tape.sigmoid(a_logits)?;
    let s_logits = tape.conv1d_same(h_tilde, p.stage_kernels, p.stage_bias)?;
    let stage = tape.softmax_lastdim(s_logits)?;
    Ok((arousal, stage))
}
