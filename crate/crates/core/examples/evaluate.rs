//! Score a briefly trained model: sample-level AUPRC and AUROC for arousals,
//! epoch-level confusion matrix, per-class F1 and Cohen's kappa for stages.

use fullsleepnet::data::{
    prepare_record, synth_dataset, PrepareOptions, PreparedExample, SynthConfig, STAGE_NAMES,
};
use fullsleepnet::metrics::{evaluate, EvalOptions, Prediction};
use fullsleepnet::model::{model_forward, ModelConfig};
use fullsleepnet::training::{train, AdamConfig, TrainConfig};
use fullsleepnet::{Result, Tensor};

fn main() -> Result<()> {
    let synth = SynthConfig {
        num_samples: Some(1 << 14),
        arousal_rate: 0.15,
        seed: 5,
        ..SynthConfig::default()
    };
    let records = synth_dataset(&synth, 10)?;

    let cfg = ModelConfig::toy();
    let opts = PrepareOptions::new(cfg.downsampling_factor());
    let prepared: Vec<PreparedExample<f32>> = records
        .iter()
        .map(|r| prepare_record(r, &opts))
        .collect::<Result<_>>()?;
    let tc = TrainConfig {
        adam: AdamConfig {
            lr: 3e-3,
            ..AdamConfig::default()
        },
        max_epochs: 12,
        patience: 4,
        ..TrainConfig::default()
    };
    // Records 0-4 train, 5 validates, 6-9 are held out.
    let outcome = train(&cfg, &prepared[..5], &prepared[5..6], &tc)?;

    let preds = prepared[6..]
        .iter()
        .map(|ex| {
            let x = Tensor::new(vec![ex.input_len(), 1], ex.signal.clone())?;
            let out = model_forward(&outcome.best_params, &cfg, &x)?;
            Ok(Prediction::from_output(&out, cfg.downsampling_factor()))
        })
        .collect::<Result<Vec<_>>>()?;
    let report = evaluate(&records[6..], &preds, &EvalOptions::default())?;

    let a = &report.arousal_sample;
    println!(
        "arousal  AUPRC {:.3}  AUROC {:.3}  F1@0.5 {:.3}",
        a.auprc.unwrap_or(f64::NAN),
        a.auroc.unwrap_or(f64::NAN),
        a.thresholded.f1
    );
    let s = report.stage.as_ref().expect("labeled records");
    println!(
        "stages   ACC {:.3}  macro-F1 {:.3}  kappa {:.3}",
        s.accuracy,
        s.macro_f1,
        s.kappa.unwrap_or(f64::NAN)
    );
    println!(
        "\n        {}",
        STAGE_NAMES.map(|n| format!("{n:>5}")).join("")
    );
    for (name, row) in STAGE_NAMES.iter().zip(&s.confusion.counts) {
        println!(
            "{name:>5}   {}",
            row.iter().map(|c| format!("{c:>5}")).collect::<String>()
        );
    }
    println!();
    for c in &s.per_class {
        println!(
            "{:>5}  precision {:.3}  recall {:.3}  F1 {:.3}  support {}",
            c.stage, c.scores.precision, c.scores.recall, c.scores.f1, c.scores.support
        );
    }
    Ok(())
}
