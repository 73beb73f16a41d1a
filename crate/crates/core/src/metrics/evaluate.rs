use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::scores::{
    auprc, auroc, binary_scores, classification_scores, cohens_kappa, confusion_matrix, pr_curve,
    roc_curve, BinaryScores, ClassScores, ConfusionMatrix,
};
use crate::data::{epochs_for, Record, EPOCH_SECONDS, STAGE_NAMES, UNSCORED};
use crate::error::{Error, Result};
use crate::layers::NUM_STAGES;
use crate::model::ModelOutput;
use crate::tensor::Float;

/// Network output masks at loss resolution, as plain `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    /// `[T]`
    pub arousal: Vec<f64>,
    /// `[T, 5]`, flattened.
    pub stage: Vec<f64>,
    /// Samples per output step.
    pub factor: usize,
}

impl Prediction {
    pub fn from_output<S: Float>(out: &ModelOutput<S>, factor: usize) -> Self {
        Prediction {
            arousal: out.arousal.iter().map(|v| v.as_f64()).collect(),
            stage: out.stage.iter().map(|v| v.as_f64()).collect(),
            factor,
        }
    }

    pub fn steps(&self) -> usize {
        self.arousal.len()
    }

    fn check(&self) -> Result<()> {
        if self.stage.len() != self.steps() * NUM_STAGES || self.factor == 0 {
            return Err(Error::Shape(format!(
                "prediction has {} arousal steps and {} stage values",
                self.steps(),
                self.stage.len()
            )));
        }
        Ok(())
    }
}

/// Predictions brought back to label resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct ResampledPrediction {
    /// Arousal probability per input sample, length `valid_len`.
    pub arousal: Vec<f64>,
    /// One predicted stage code per 30-s epoch.
    pub stages: Vec<u8>,
    /// Mean stage probabilities behind each code.
    pub stage_probs: Vec<[f64; NUM_STAGES]>,
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Upsamples the arousal mask by repetition and downsamples the stage mask
/// to one code per epoch.
///
/// An epoch's stage is the argmax (lowest index on ties) of the mean row
/// over the steps whose centre sample lies in that epoch and before
/// `valid_len`. An epoch too short to contain any step centre uses the step
/// covering its midpoint.
pub fn resample_prediction_masks(
    arousal: &[f64],
    stage: &[f64],
    factor: usize,
    valid_len: usize,
    fs: f64,
) -> Result<ResampledPrediction> {
    let steps = arousal.len();
    if stage.len() != steps * NUM_STAGES {
        return Err(Error::Shape(format!(
            "stage mask holds {} values for {steps} steps",
            stage.len()
        )));
    }
    if factor == 0 || valid_len > steps * factor {
        return Err(Error::InvalidArgument(format!(
            "valid length {valid_len} exceeds {steps} steps of {factor} samples"
        )));
    }
    let mut up = Vec::with_capacity(valid_len);
    for &a in arousal {
        let room = valid_len - up.len();
        up.extend(std::iter::repeat(a).take(factor.min(room)));
    }

    let per_epoch = EPOCH_SECONDS * fs;
    let epochs = epochs_for(valid_len, fs);
    let mut sums = vec![[0.0f64; NUM_STAGES]; epochs];
    let mut counts = vec![0usize; epochs];
    for t in 0..steps {
        let center = t * factor + factor / 2;
        if center >= valid_len {
            break;
        }
        let e = (center as f64 / per_epoch).floor() as usize;
        if e >= epochs {
            break;
        }
        for (c, s) in sums[e].iter_mut().enumerate() {
            *s += stage[t * NUM_STAGES + c];
        }
        counts[e] += 1;
    }
    let mut codes = Vec::with_capacity(epochs);
    let mut probs = Vec::with_capacity(epochs);
    for e in 0..epochs {
        let mut mean = [0.0; NUM_STAGES];
        if counts[e] == 0 {
            let start = (e as f64 * per_epoch).ceil() as usize;
            let end = (((e + 1) as f64 * per_epoch).ceil() as usize).min(valid_len);
            let mid = (start + end.max(start + 1) - 1) / 2;
            let t = (mid / factor).min(steps.saturating_sub(1));
            mean.copy_from_slice(&stage[t * NUM_STAGES..(t + 1) * NUM_STAGES]);
        } else {
            for (m, s) in mean.iter_mut().zip(&sums[e]) {
                *m = s / counts[e] as f64;
            }
        }
        codes.push(argmax(&mean) as u8);
        probs.push(mean);
    }
    Ok(ResampledPrediction {
        arousal: up,
        stages: codes,
        stage_probs: probs,
    })
}

/// Per-epoch arousal presence: 1 iff some sample in the epoch reaches
/// `threshold`. With `min_duration_s`, the samples at or above threshold
/// must form a run at least that long inside the epoch.
pub fn arousal_epoch_labels(
    values: &[f64],
    fs: f64,
    threshold: f64,
    min_duration_s: Option<f64>,
) -> Vec<u8> {
    let per_epoch = EPOCH_SECONDS * fs;
    let need = min_duration_s.map_or(1, |d| ((d * fs).ceil() as usize).max(1));
    (0..epochs_for(values.len(), fs))
        .map(|e| {
            let start = (e as f64 * per_epoch).ceil() as usize;
            let end = (((e + 1) as f64 * per_epoch).ceil() as usize).min(values.len());
            let mut run = 0;
            for &v in &values[start..end] {
                run = if v >= threshold { run + 1 } else { 0 };
                if run >= need {
                    return 1;
                }
            }
            0
        })
        .collect()
}

/// Fraction of scored samples whose step-level argmax matches the epoch
/// stage. Returns `(correct, scored)`.
pub fn stage_sample_agreement(record: &Record, pred: &Prediction) -> (u64, u64) {
    let n = record.len().min(pred.steps() * pred.factor);
    let per_epoch = record.samples_per_epoch();
    let (mut correct, mut scored) = (0, 0);
    for t in 0..pred.steps() {
        let lo = t * pred.factor;
        if lo >= n {
            break;
        }
        let hi = (lo + pred.factor).min(n);
        let guess = argmax(&pred.stage[t * NUM_STAGES..(t + 1) * NUM_STAGES]) as u8;
        for i in lo..hi {
            let code = record.stages[(i as f64 / per_epoch) as usize];
            if code != UNSCORED {
                scored += 1;
                correct += (code == guess) as u64;
            }
        }
    }
    (correct, scored)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalOptions {
    /// Arousal probability threshold for thresholded and epoch-level scores.
    pub threshold: f64,
    /// Minimum run length for an epoch to count as containing an arousal.
    pub epoch_min_duration_s: Option<f64>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            threshold: 0.5,
            epoch_min_duration_s: None,
        }
    }
}

/// Sample-level arousal scores pooled over all records.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArousalSampleReport {
    /// `None` when the pooled labels hold no positive.
    pub auprc: Option<f64>,
    /// `None` when the pooled labels are single-class.
    pub auroc: Option<f64>,
    #[serde(flatten)]
    pub thresholded: BinaryScores,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageClassReport {
    pub stage: String,
    #[serde(flatten)]
    pub scores: ClassScores,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub per_class: Vec<StageClassReport>,
    pub accuracy: f64,
    pub macro_f1: f64,
    pub kappa: Option<f64>,
    /// Agreement over scored samples at step resolution.
    pub sample_accuracy: f64,
    pub confusion: ConfusionMatrix,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecordScores {
    pub id: String,
    pub auprc: Option<f64>,
    pub auroc: Option<f64>,
    pub stage_accuracy: Option<f64>,
    pub stage_kappa: Option<f64>,
}

/// Everything `evaluate` reports. Pooled scores cover all samples or
/// epochs of all records; `per_record` lists individual scores.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub num_records: usize,
    pub threshold: f64,
    pub arousal_sample: ArousalSampleReport,
    pub arousal_epoch: BinaryScores,
    /// `None` when no epoch is scored.
    pub stage: Option<StageReport>,
    pub per_record: Vec<RecordScores>,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))
    }
}

/// Pooled label-resolution data of an evaluation, kept for curve export.
#[derive(Clone, Debug, Default)]
pub struct Pooled {
    pub arousal_scores: Vec<f64>,
    pub arousal_labels: Vec<u8>,
    /// `(record id, true codes, predicted codes)` per record.
    pub hypnograms: Vec<(String, Vec<u8>, Vec<u8>)>,
}

/// Scores predictions against their records.
pub fn evaluate(
    records: &[Record],
    preds: &[Prediction],
    opts: &EvalOptions,
) -> Result<EvalReport> {
    evaluate_pooled(records, preds, opts).map(|(r, _)| r)
}

/// [`evaluate`], also returning the pooled arrays behind the report.
pub fn evaluate_pooled(
    records: &[Record],
    preds: &[Prediction],
    opts: &EvalOptions,
) -> Result<(EvalReport, Pooled)> {
    if records.is_empty() {
        return Err(Error::InvalidArgument("no records to evaluate".into()));
    }
    if records.len() != preds.len() {
        return Err(Error::Shape(format!(
            "{} records but {} predictions",
            records.len(),
            preds.len()
        )));
    }
    let mut pooled = Pooled::default();
    let mut epoch_truth = Vec::new();
    let mut epoch_pred = Vec::new();
    let mut stage_cm = ConfusionMatrix::zeros(STAGE_NAMES.iter().map(|s| s.to_string()).collect());
    let (mut sample_hits, mut sample_scored) = (0u64, 0u64);
    let mut per_record = Vec::with_capacity(records.len());

    for (record, pred) in records.iter().zip(preds) {
        if !record.labeled {
            return Err(Error::InvalidArgument(format!(
                "record {} carries no annotations",
                record.id
            )));
        }
        pred.check()?;
        let fs = record.sampling_rate_hz;
        let r =
            resample_prediction_masks(&pred.arousal, &pred.stage, pred.factor, record.len(), fs)?;

        let cm = confusion_matrix(&record.stages, &r.stages, NUM_STAGES)?;
        stage_cm.add(&cm)?;
        let (hits, scored) = stage_sample_agreement(record, pred);
        sample_hits += hits;
        sample_scored += scored;

        let truth_f: Vec<f64> = record.arousal.iter().map(|&v| v as f64).collect();
        epoch_truth.extend(arousal_epoch_labels(&truth_f, fs, 0.5, None));
        epoch_pred.extend(arousal_epoch_labels(
            &r.arousal,
            fs,
            opts.threshold,
            opts.epoch_min_duration_s,
        ));

        per_record.push(RecordScores {
            id: record.id.clone(),
            auprc: auprc(&r.arousal, &record.arousal).ok(),
            auroc: auroc(&r.arousal, &record.arousal).ok(),
            stage_accuracy: classification_scores(&cm).ok().map(|s| s.accuracy),
            stage_kappa: cohens_kappa(&cm).ok(),
        });
        pooled.arousal_scores.extend_from_slice(&r.arousal);
        pooled.arousal_labels.extend_from_slice(&record.arousal);
        pooled
            .hypnograms
            .push((record.id.clone(), record.stages.clone(), r.stages));
    }

    let thresholded: Vec<u8> = pooled
        .arousal_scores
        .iter()
        .map(|&v| (v >= opts.threshold) as u8)
        .collect();
    let arousal_sample = ArousalSampleReport {
        auprc: auprc(&pooled.arousal_scores, &pooled.arousal_labels).ok(),
        auroc: auroc(&pooled.arousal_scores, &pooled.arousal_labels).ok(),
        thresholded: binary_scores(&pooled.arousal_labels, &thresholded)?,
    };
    let arousal_epoch = binary_scores(&epoch_truth, &epoch_pred)?;

    let stage = match classification_scores(&stage_cm) {
        Ok(s) => Some(StageReport {
            per_class: s
                .per_class
                .into_iter()
                .zip(STAGE_NAMES)
                .map(|(scores, name)| StageClassReport {
                    stage: name.to_string(),
                    scores,
                })
                .collect(),
            accuracy: s.accuracy,
            macro_f1: s.macro_f1,
            kappa: cohens_kappa(&stage_cm).ok(),
            sample_accuracy: if sample_scored == 0 {
                0.0
            } else {
                sample_hits as f64 / sample_scored as f64
            },
            confusion: stage_cm,
        }),
        Err(_) => None,
    };

    Ok((
        EvalReport {
            num_records: records.len(),
            threshold: opts.threshold,
            arousal_sample,
            arousal_epoch,
            stage,
            per_record,
        },
        pooled,
    ))
}

fn stage_name(code: u8) -> &'static str {
    STAGE_NAMES
        .get(code as usize)
        .copied()
        .unwrap_or("unscored")
}

pub fn roc_tsv(scores: &[f64], labels: &[u8]) -> Result<String> {
    let mut out = String::from("threshold\tfpr\ttpr\n");
    for (th, fpr, tpr) in roc_curve(scores, labels)? {
        let _ = writeln!(out, "{th}\t{fpr}\t{tpr}");
    }
    Ok(out)
}

pub fn pr_tsv(scores: &[f64], labels: &[u8]) -> Result<String> {
    let mut out = String::from("threshold\trecall\tprecision\n");
    for (th, re, pr) in pr_curve(scores, labels)? {
        let _ = writeln!(out, "{th}\t{re}\t{pr}");
    }
    Ok(out)
}

/// `epoch_index`, `true_stage`, `predicted_stage` per epoch. Missing or
/// unscored truth is written as `unscored`.
pub fn hypnogram_tsv(truth: &[u8], predicted: &[u8]) -> String {
    let mut out = String::from("epoch_index\ttrue_stage\tpredicted_stage\n");
    for (e, &p) in predicted.iter().enumerate() {
        let t = truth.get(e).copied().unwrap_or(UNSCORED);
        let _ = writeln!(out, "{e}\t{}\t{}", stage_name(t), stage_name(p));
    }
    out
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn onehot(code: usize, steps: usize) -> Vec<f64> {
        let mut v = vec![0.0; steps * NUM_STAGES];
        for t in 0..steps {
            v[t * NUM_STAGES + code] = 1.0;
        }
        v
    }

    #[test]
    fn resample_examples() {
        let r = resample_prediction_masks(&[0.7; 32], &onehot(2, 32), 256, 7000, 128.0).unwrap();
        assert_eq!(r.arousal, vec![0.7; 7000]);
        assert_eq!(r.stages, vec![2, 2]);
        assert!(resample_prediction_masks(&[0.7; 2], &onehot(2, 2), 256, 600, 128.0).is_err());
    }

    #[test]
    fn tie_goes_to_lowest_index() {
        // fs chosen so one 30-s epoch spans exactly two 8-sample steps
        let fs = 16.0 / 30.0;
        let stage = vec![0.6, 0.4, 0.0, 0.0, 0.0, 0.4, 0.6, 0.0, 0.0, 0.0];
        let r = resample_prediction_masks(&[0.0, 0.0], &stage, 8, 16, fs).unwrap();
        assert_eq!(r.stages, vec![0]);
    }

    #[test]
    fn epoch_labels() {
        let mut truth = vec![0.0; 3840 * 3];
        truth[4000..4000 + 384].fill(1.0);
        assert_eq!(
            arousal_epoch_labels(&truth, 128.0, 0.5, None),
            vec![0, 1, 0]
        );
        let mut pred = vec![0.1; 3840];
        pred[77] = 0.51;
        assert_eq!(arousal_epoch_labels(&pred, 128.0, 0.5, None), vec![1]);
        assert_eq!(arousal_epoch_labels(&pred, 128.0, 0.5, Some(1.0)), vec![0]);
    }

    fn record(id: &str, stages: Vec<u8>, arousal_at: std::ops::Range<usize>) -> Record {
        let n = stages.len() * 3840;
        let mut a = vec![0u8; n];
        a[arousal_at].fill(1);
        Record::new(id, 128.0, vec![0.0; n], a, stages).unwrap()
    }

    fn perfect(r: &Record, factor: usize) -> Prediction {
        let steps = r.len().div_ceil(factor);
        let mut arousal = vec![0.0; steps];
        let mut stage = vec![0.0; steps * NUM_STAGES];
        for t in 0..steps {
            arousal[t] = r.arousal[t * factor] as f64;
            let code = r.stages[(t * factor) / 3840];
            stage[t * NUM_STAGES + code as usize] = 1.0;
        }
        Prediction {
            arousal,
            stage,
            factor,
        }
    }

    #[test]
    fn perfect_predictions_score_one() {
        let r = record("a", vec![0, 2, 3, 4, 1], 3840 + 256..3840 + 256 * 3);
        let rep = evaluate(&[r.clone()], &[perfect(&r, 256)], &EvalOptions::default()).unwrap();
        let st = rep.stage.as_ref().unwrap();
        assert_eq!(st.accuracy, 1.0);
        assert_eq!(st.kappa, Some(1.0));
        assert_eq!(st.sample_accuracy, 1.0);
        assert_eq!(rep.arousal_sample.auprc, Some(1.0));
        assert_eq!(rep.arousal_sample.auroc, Some(1.0));
        assert_eq!(rep.arousal_epoch.f1, 1.0);
    }

    #[test]
    fn pooling_equals_manual_concatenation() {
        let a = record("a", vec![0, 2, 2], 4000..4500);
        let b = record("b", vec![3, 4], 1000..2000);
        let mut pa = perfect(&a, 256);
        let mut pb = perfect(&b, 256);
        for (i, v) in pa.arousal.iter_mut().enumerate() {
            *v = (*v + (i % 7) as f64 / 10.0) / 2.0;
        }
        for (i, v) in pb.arousal.iter_mut().enumerate() {
            *v = (*v + (i % 5) as f64 / 9.0) / 2.0;
        }
        let both = evaluate(
            &[a.clone(), b.clone()],
            &[pa.clone(), pb.clone()],
            &EvalOptions::default(),
        )
        .unwrap();

        let mut joined_arousal = a.arousal.clone();
        joined_arousal.extend(&b.arousal);
        let mut joined_stages = a.stages.clone();
        joined_stages.extend(&b.stages);
        let joined = Record::new(
            "ab",
            128.0,
            vec![0.0; a.len() + b.len()],
            joined_arousal,
            joined_stages,
        )
        .unwrap();
        let mut pj = pa.clone();
        pj.arousal.extend(&pb.arousal);
        pj.stage.extend(&pb.stage);
        let manual = evaluate(&[joined], &[pj], &EvalOptions::default()).unwrap();
        assert_eq!(both.arousal_sample, manual.arousal_sample);
        assert_eq!(both.arousal_epoch, manual.arousal_epoch);
        assert_eq!(both.stage, manual.stage);
        assert_eq!(both.per_record.len(), 2);
    }

    #[test]
    fn unlabeled_records_are_rejected() {
        let r = Record::unlabeled("u", 128.0, vec![0.0; 3840]).unwrap();
        let p = perfect(&record("x", vec![0], 0..0), 256);
        assert!(evaluate(&[r], &[p], &EvalOptions::default()).is_err());
        assert!(evaluate(&[], &[], &EvalOptions::default()).is_err());
    }

    #[test]
    fn tsv_exports() {
        assert_eq!(
            hypnogram_tsv(&[0, UNSCORED], &[0, 4]),
            "epoch_index\ttrue_stage\tpredicted_stage\n0\tW\tW\n1\tunscored\tREM\n"
        );
        let roc = roc_tsv(&[0.2, 0.8], &[0, 1]).unwrap();
        assert!(roc.starts_with("threshold\tfpr\ttpr\ninf\t0\t0\n0.8\t0\t1\n"));
        let pr = pr_tsv(&[0.2, 0.8], &[0, 1]).unwrap();
        assert!(pr.starts_with("threshold\trecall\tprecision\n0.8\t1\t1\n"));
    }
}
