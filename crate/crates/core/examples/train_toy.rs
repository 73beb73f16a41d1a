//! Train the toy network on synthetic nights with early stopping, then save
//! the best weights.
//!
//! `cargo run --release --example train_toy -- [records] [max_epochs]`

use fullsleepnet::data::{
    prepare_record, split_dataset, synth_dataset, PrepareOptions, PreparedExample, SynthConfig,
};
use fullsleepnet::model::{build_model, save_checkpoint_with_meta, CheckpointMeta, ModelConfig};
use fullsleepnet::training::{train_from, AdamConfig, TrainConfig};
use fullsleepnet::Result;

fn main() -> Result<()> {
    let mut args = std::env::args()
        .skip(1)
        .map(|a| a.parse::<usize>().expect("numeric argument"));
    let count = args.next().unwrap_or(12);
    let max_epochs = args.next().unwrap_or(15);

    let synth = SynthConfig {
        num_samples: Some(1 << 14),
        arousal_rate: 0.15,
        seed: 1,
        ..SynthConfig::default()
    };
    let records = synth_dataset(&synth, count)?;
    let ids: Vec<String> = records.iter().map(|r| r.id.clone()).collect();
    let split = split_dataset(&ids, 0)?;

    let cfg = ModelConfig::toy();
    let opts = PrepareOptions::new(cfg.downsampling_factor());
    let prepare = |names: &[String]| -> Result<Vec<PreparedExample<f32>>> {
        records
            .iter()
            .filter(|r| names.contains(&r.id))
            .map(|r| prepare_record(r, &opts))
            .collect()
    };
    let (train, val) = (prepare(&split.train)?, prepare(&split.val)?);

    let tc = TrainConfig {
        adam: AdamConfig {
            lr: 3e-3,
            ..AdamConfig::default()
        },
        patience: 4,
        max_epochs,
        seed: 0,
        ..TrainConfig::default()
    };
    println!(
        "{} train / {} validation records, {} parameters",
        train.len(),
        val.len(),
        build_model::<f32>(&cfg)?.count()
    );
    let outcome = train_from(&cfg, build_model(&cfg)?, &train, &val, &tc, &mut |h| {
        println!(
            "epoch {:>2}  train {:.4}  val {:.4}",
            h.epoch, h.train_loss, h.val_loss
        );
    })?;
    println!(
        "best epoch {} (val {:.4}){}",
        outcome.best_epoch,
        outcome.best_val_loss,
        if outcome.stopped_early {
            ", stopped early"
        } else {
            ""
        }
    );

    let path = std::env::temp_dir().join("fullsleepnet-toy.fsnw");
    let meta = CheckpointMeta {
        input_len: Some(1 << 14),
        sampling_rate_hz: Some(synth.sampling_rate_hz),
        downsample_by2: false,
    };
    save_checkpoint_with_meta(&outcome.best_params, &cfg, Some(&meta), &path)?;
    println!("saved {}", path.display());
    Ok(())
}
