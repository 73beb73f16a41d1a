//! Signal preprocessing and label resampling to the loss resolution.

use serde::{Deserialize, Serialize};

use super::record::{Record, EPOCH_SECONDS, UNSCORED};
use crate::error::{Error, Result};
use crate::layers::NUM_STAGES;
use crate::tensor::Float;

/// Zero mean, unit population standard deviation.
pub fn standardize(signal: &[f64]) -> Result<Vec<f64>> {
    if signal.is_empty() {
        return Err(Error::Degenerate("empty signal".into()));
    }
    let n = signal.len() as f64;
    let mean = signal.iter().sum::<f64>() / n;
    let var = signal.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    if !std.is_finite() {
        return Err(Error::NonFinite(
            "signal contains non-finite samples".into(),
        ));
    }
    if std <= 1e-12 {
        return Err(Error::Degenerate(format!(
            "standard deviation {std:e} is too small to standardize"
        )));
    }
    Ok(signal.iter().map(|v| (v - mean) / std).collect())
}

/// Pair means: `out[i] = (x[2i] + x[2i+1]) / 2`. A trailing odd sample is dropped.
pub fn downsample_signal_by2(signal: &[f64]) -> Vec<f64> {
    signal
        .chunks_exact(2)
        .map(|p| (p[0] + p[1]) / 2.0)
        .collect()
}

/// Zero-pads at the end to `max(next_pow2(n), min_len)`. Returns the padded
/// signal and the original length.
pub fn pad_signal_pow2(signal: &[f64], min_len: Option<usize>) -> (Vec<f64>, usize) {
    let n = signal.len();
    let target = n.max(1).next_power_of_two().max(min_len.unwrap_or(0));
    let mut out = Vec::with_capacity(target);
    out.extend_from_slice(signal);
    out.resize(target, 0.0);
    (out, n)
}

/// How a window of per-sample arousal labels collapses to one output step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArousalRule {
    /// 1 iff strictly more than half of the window is 1.
    #[default]
    Majority,
    /// 1 iff any sample in the window is 1.
    Any,
}

pub fn downsample_arousal_labels(
    labels: &[u8],
    factor: usize,
    rule: ArousalRule,
) -> Result<Vec<u8>> {
    if factor == 0 || labels.len() % factor != 0 {
        return Err(Error::Shape(format!(
            "label length {} is not divisible by {factor}",
            labels.len()
        )));
    }
    Ok(labels
        .chunks_exact(factor)
        .map(|w| {
            let ones = w.iter().filter(|&&v| v != 0).count();
            let on = match rule {
                ArousalRule::Majority => 2 * ones > factor,
                ArousalRule::Any => ones > 0,
            };
            on as u8
        })
        .collect())
}

/// One-hot stage targets, `[L / factor, 5]` flattened row-major.
///
/// Step `t` takes the stage of the epoch holding its centre sample
/// `t·factor + factor/2`. Steps centred at or past `valid_len`, past the last
/// epoch, or in an unscored epoch get an all-zero row.
pub fn upsample_stage_labels(
    stages: &[u8],
    fs: f64,
    factor: usize,
    len: usize,
    valid_len: Option<usize>,
) -> Result<Vec<f64>> {
    if factor == 0 || len % factor != 0 {
        return Err(Error::Shape(format!(
            "input length {len} is not divisible by {factor}"
        )));
    }
    let steps = len / factor;
    let per_epoch = EPOCH_SECONDS * fs;
    let limit = valid_len.unwrap_or(len);
    let mut out = vec![0.0; steps * NUM_STAGES];
    for t in 0..steps {
        let center = t * factor + factor / 2;
        if center >= limit {
            continue;
        }
        let epoch = (center as f64 / per_epoch).floor() as usize;
        match stages.get(epoch) {
            Some(&code) if code != UNSCORED && (code as usize) < NUM_STAGES => {
                out[t * NUM_STAGES + code as usize] = 1.0;
            }
            _ => {}
        }
    }
    Ok(out)
}

/// Options shared by every record of a dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrepareOptions {
    /// Output resolution factor `2^B`.
    pub factor: usize,
    /// Dataset-wide padded length. `None` pads each record to its own next
    /// power of two.
    #[serde(default)]
    pub min_len: Option<usize>,
    #[serde(default)]
    pub arousal_rule: ArousalRule,
    /// Halve the sampling rate (pair means) before anything else.
    #[serde(default)]
    pub downsample_by2: bool,
}

impl PrepareOptions {
    pub fn new(factor: usize) -> Self {
        PrepareOptions {
            factor,
            min_len: None,
            arousal_rule: ArousalRule::Majority,
            downsample_by2: false,
        }
    }
}

/// A record ready for the network.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedExample<S = f64> {
    pub id: String,
    /// Standardized, zero-padded signal of length `L`.
    pub signal: Vec<S>,
    /// Length before padding.
    pub valid_len: usize,
    /// `[L / factor]`
    pub arousal_target: Vec<S>,
    /// `[L / factor, 5]`, flattened.
    pub stage_target: Vec<S>,
    /// `floor(valid_len / factor)`
    pub valid_steps: usize,
    pub factor: usize,
    /// Rate of the prepared signal (after optional halving).
    pub sampling_rate_hz: f64,
}

impl<S: Float> PreparedExample<S> {
    pub fn input_len(&self) -> usize {
        self.signal.len()
    }

    pub fn steps(&self) -> usize {
        self.arousal_target.len()
    }
}

/// Halves a record's rate: pair-mean signal, pairwise OR of arousal labels,
/// and stage codes trimmed to the shorter span.
pub fn downsample_record_by2(record: &Record) -> Result<Record> {
    let signal: Vec<f64> = record.signal.iter().map(|&v| v as f64).collect();
    let signal: Vec<f32> = downsample_signal_by2(&signal)
        .into_iter()
        .map(|v| v as f32)
        .collect();
    let arousal: Vec<u8> = record
        .arousal
        .chunks_exact(2)
        .map(|p| p[0].max(p[1]))
        .collect();
    let fs = record.sampling_rate_hz / 2.0;
    let epochs = super::record::epochs_for(signal.len(), fs);
    let mut out = Record::new(
        record.id.clone(),
        fs,
        signal,
        arousal,
        record.stages[..epochs.min(record.stages.len())].to_vec(),
    )?;
    out.labeled = record.labeled;
    Ok(out)
}

/// Standardize, pad and resample labels for one record.
pub fn prepare_record<S: Float>(
    record: &Record,
    opts: &PrepareOptions,
) -> Result<PreparedExample<S>> {
    let factor = opts.factor;
    if factor == 0 || !factor.is_power_of_two() {
        return Err(Error::Config(format!(
            "factor {factor} is not a power of two"
        )));
    }
    if let Some(m) = opts.min_len {
        if m % factor != 0 {
            return Err(Error::Config(format!(
                "padded length {m} is not a multiple of {factor}"
            )));
        }
    }
    let halved;
    let record = if opts.downsample_by2 {
        halved = downsample_record_by2(record)?;
        &halved
    } else {
        record
    };
    let raw: Vec<f64> = record.signal.iter().map(|&v| v as f64).collect();
    let standardized = standardize(&raw).map_err(|e| match e {
        Error::Degenerate(msg) => Error::Degenerate(format!("{}: {msg}", record.id)),
        other => other,
    })?;
    let (padded, valid_len) = pad_signal_pow2(&standardized, opts.min_len);
    let len = padded.len().max(factor);
    let mut padded = padded;
    padded.resize(len, 0.0);

    let mut arousal = record.arousal.clone();
    arousal.resize(len, 0);
    let arousal = downsample_arousal_labels(&arousal, factor, opts.arousal_rule)?;
    let stage = upsample_stage_labels(
        &record.stages,
        record.sampling_rate_hz,
        factor,
        len,
        Some(valid_len),
    )?;
    Ok(PreparedExample {
        id: record.id.clone(),
        signal: padded.into_iter().map(S::from_f64).collect(),
        valid_len,
        arousal_target: arousal.into_iter().map(|v| S::from_f64(v as f64)).collect(),
        stage_target: stage.into_iter().map(S::from_f64).collect(),
        valid_steps: valid_len / factor,
        factor,
        sampling_rate_hz: record.sampling_rate_hz,
    })
}

/// Smallest power of two that holds every record (after optional halving).
pub fn dataset_input_len(records: &[Record], factor: usize, downsample_by2: bool) -> usize {
    records
        .iter()
        .map(|r| if downsample_by2 { r.len() / 2 } else { r.len() })
        .max()
        .unwrap_or(1)
        .max(1)
        .next_power_of_two()
        .max(factor)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standardize_examples() {
        assert_eq!(standardize(&[1.0, 3.0]).unwrap(), vec![-1.0, 1.0]);
        assert!(matches!(standardize(&[4.0; 10]), Err(Error::Degenerate(_))));
        let x = standardize(&[0.3, 1.7, -2.0, 5.5, 0.1]).unwrap();
        let y = standardize(&x).unwrap();
        for (a, b) in x.iter().zip(&y) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn downsample_examples() {
        assert_eq!(downsample_signal_by2(&[1.0, 3.0, 5.0, 7.0]), vec![2.0, 6.0]);
        assert_eq!(downsample_signal_by2(&[2.5; 5]), vec![2.5, 2.5]);
    }

    #[test]
    fn padding_examples() {
        let (p, n) = pad_signal_pow2(&[1.0; 5], None);
        assert_eq!((p.len(), n), (8, 5));
        assert_eq!(&p[5..], &[0.0; 3]);
        assert_eq!(pad_signal_pow2(&[1.0; 8], None).0.len(), 8);
        let (p, n) = pad_signal_pow2(&vec![1.0; 3 << 20], Some(1 << 22));
        assert_eq!((p.len(), n), (1 << 22, 3 << 20));
    }

    #[test]
    fn arousal_majority_counting() {
        let mut w = vec![0u8; 512];
        w[..100].fill(1);
        w[256..256 + 129].fill(1);
        let out = downsample_arousal_labels(&w, 256, ArousalRule::Majority).unwrap();
        assert_eq!(out, vec![0, 1]);
        let any = downsample_arousal_labels(&w, 256, ArousalRule::Any).unwrap();
        assert_eq!(any, vec![1, 1]);
        assert_eq!(
            downsample_arousal_labels(&[1; 256], 256, ArousalRule::Majority).unwrap(),
            vec![1]
        );
        assert!(downsample_arousal_labels(&[0; 300], 256, ArousalRule::Majority).is_err());
        // exactly half is not a majority
        let mut half = vec![0u8; 256];
        half[..128].fill(1);
        assert_eq!(
            downsample_arousal_labels(&half, 256, ArousalRule::Majority).unwrap(),
            vec![0]
        );
    }

    #[test]
    fn stage_upsampling_at_128_hz() {
        let out = upsample_stage_labels(&[0, 2], 128.0, 256, 8192, None).unwrap();
        assert_eq!(out.len(), 32 * 5);
        for t in 0..32 {
            let row = &out[t * 5..(t + 1) * 5];
            let expect = if t < 15 {
                [1.0, 0.0, 0.0, 0.0, 0.0]
            } else if t < 30 {
                [0.0, 0.0, 1.0, 0.0, 0.0]
            } else {
                [0.0; 5]
            };
            assert_eq!(row, expect, "step {t}");
        }
        let none = upsample_stage_labels(&[UNSCORED; 3], 128.0, 256, 16384, None).unwrap();
        assert!(none.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn padding_region_gets_zero_rows() {
        let out = upsample_stage_labels(&[3, 3], 128.0, 256, 8192, Some(3840)).unwrap();
        let hot: Vec<usize> = out
            .chunks(5)
            .map(|r| r.iter().sum::<f64>() as usize)
            .collect();
        assert_eq!(hot.iter().sum::<usize>(), 15);
        assert!(hot[15..].iter().all(|&h| h == 0));
    }

    #[test]
    fn prepare_shapes() {
        let n = 128 * 70;
        let signal: Vec<f32> = (0..n).map(|i| ((i * 7919) % 101) as f32).collect();
        let mut arousal = vec![0u8; n];
        arousal[4000..5000].fill(1);
        let r = Record::new("x", 128.0, signal, arousal, vec![0, 1, 4]).unwrap();
        let p: PreparedExample<f64> = prepare_record(&r, &PrepareOptions::new(256)).unwrap();
        assert_eq!(p.input_len(), 16384);
        assert_eq!(p.steps(), 64);
        assert_eq!(p.stage_target.len(), 64 * 5);
        assert_eq!(p.valid_steps, n / 256);
        assert!(p.signal[n..].iter().all(|&v| v == 0.0));

        let mut opts = PrepareOptions::new(256);
        opts.min_len = Some(1 << 15);
        let p: PreparedExample<f32> = prepare_record(&r, &opts).unwrap();
        assert_eq!(p.input_len(), 1 << 15);
        opts.downsample_by2 = true;
        let p: PreparedExample<f32> = prepare_record(&r, &opts).unwrap();
        assert_eq!(p.valid_len, n / 2);
        assert_eq!(p.sampling_rate_hz, 64.0);
    }
}
