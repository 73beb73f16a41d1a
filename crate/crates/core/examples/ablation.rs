//! The four module combinations: convolution only (C), with recurrence (CR),
//! with attention (CA), and all three (CRA). Each one is built, trained
//! briefly on the same data, checkpointed, reloaded and scored.
//!
//! `cargo run --release --example ablation -- [max_epochs]`

use fullsleepnet::data::{
    prepare_record, synth_dataset, PrepareOptions, PreparedExample, SynthConfig,
};
use fullsleepnet::metrics::{evaluate, EvalOptions, Prediction};
use fullsleepnet::model::{
    build_model, load_checkpoint, model_forward, save_checkpoint, ModelConfig, Variant,
};
use fullsleepnet::training::{train, AdamConfig, TrainConfig};
use fullsleepnet::{Result, Tensor};

fn main() -> Result<()> {
    let max_epochs = std::env::args()
        .nth(1)
        .map_or(8, |a| a.parse().expect("epoch count"));
    let synth = SynthConfig {
        num_samples: Some(1 << 14),
        arousal_rate: 0.15,
        seed: 11,
        ..SynthConfig::default()
    };
    let records = synth_dataset(&synth, 12)?;
    let opts = PrepareOptions::new(8);
    let prepared: Vec<PreparedExample<f32>> = records
        .iter()
        .map(|r| prepare_record(r, &opts))
        .collect::<Result<_>>()?;
    let (train_set, rest) = prepared.split_at(8);
    let (val_set, test_set) = rest.split_at(2);
    let tc = TrainConfig {
        adam: AdamConfig {
            lr: 3e-3,
            ..AdamConfig::default()
        },
        max_epochs,
        patience: 4,
        ..TrainConfig::default()
    };

    println!("variant  params  best_epoch  val_loss  test_AUPRC  test_stage_ACC");
    for v in Variant::ALL {
        let cfg = ModelConfig::toy().with_variant(v);
        let outcome = train(&cfg, train_set, val_set, &tc)?;
        let path = std::env::temp_dir().join(format!("fullsleepnet-{v}.fsnw"));
        save_checkpoint(&outcome.best_params, &cfg, &path)?;
        let ck = load_checkpoint::<f32>(&path)?;
        ck.ensure_compatible(&cfg)?;

        let preds = test_set
            .iter()
            .map(|ex| {
                let x = Tensor::new(vec![ex.input_len(), 1], ex.signal.clone())?;
                Ok(Prediction::from_output(
                    &model_forward(&ck.params, &cfg, &x)?,
                    8,
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        let report = evaluate(&records[10..], &preds, &EvalOptions::default())?;
        println!(
            "{:<7}  {:>6}  {:>10}  {:>8.4}  {:>10.3}  {:>14.3}",
            v.to_string(),
            build_model::<f32>(&cfg)?.count(),
            outcome.best_epoch,
            outcome.best_val_loss,
            report.arousal_sample.auprc.unwrap_or(f64::NAN),
            report.stage.map_or(f64::NAN, |s| s.accuracy)
        );
    }
    Ok(())
}
