//! From a raw record to model-ready tensors: standardize, zero-pad to a power
//! of two, and resample the labels to the output resolution.

use fullsleepnet::data::{
    downsample_record_by2, prepare_record, synth_dataset, PrepareOptions, PreparedExample,
    SynthConfig,
};
use fullsleepnet::Result;

fn main() -> Result<()> {
    let cfg = SynthConfig {
        num_epochs: 10,
        arousal_rate: 0.15,
        ..SynthConfig::default()
    };
    let record = &synth_dataset(&cfg, 1)?[0];
    println!(
        "{}: {} samples at {} Hz, {} epochs",
        record.id,
        record.len(),
        record.sampling_rate_hz,
        record.num_epochs()
    );

    for blocks in [3, 8] {
        let factor = 1 << blocks;
        let ex: PreparedExample<f64> = prepare_record(record, &PrepareOptions::new(factor))?;
        let scored = ex
            .stage_target
            .chunks(5)
            .filter(|row| row.iter().any(|&v| v > 0.0))
            .count();
        let arousal_steps = ex.arousal_target.iter().filter(|&&v| v > 0.5).count();
        println!(
            "B = {blocks}: L = {} ({} valid), T = {} steps ({} valid, {} scored), {:.1} steps per epoch, {arousal_steps} arousal steps",
            ex.input_len(),
            ex.valid_len,
            ex.steps(),
            ex.valid_steps,
            scored,
            30.0 * record.sampling_rate_hz / factor as f64,
        );
    }

    // Recordings sampled at twice the working rate are halved first.
    let half = downsample_record_by2(record)?;
    println!(
        "halved: {} samples at {} Hz, {} epochs",
        half.len(),
        half.sampling_rate_hz,
        half.num_epochs()
    );
    Ok(())
}
