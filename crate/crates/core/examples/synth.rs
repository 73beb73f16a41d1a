//! Synthetic polysomnography: a Markov hypnogram rendered as band-limited
//! EEG with arousal bursts, written to and read back from FSN1 files.

use fullsleepnet::data::{
    arousal_rule_violations, read_record, synth_dataset, write_record, SynthConfig, STAGE_NAMES,
};
use fullsleepnet::Result;

fn main() -> Result<()> {
    let cfg = SynthConfig {
        num_epochs: 40,
        seed: 3,
        ..SynthConfig::default()
    };
    let records = synth_dataset(&cfg, 4)?;
    let dir = std::env::temp_dir().join("fullsleepnet-synth-example");
    std::fs::create_dir_all(&dir)
        .map_err(|e| fullsleepnet::Error::InvalidArgument(e.to_string()))?;

    for r in &records {
        let hypnogram: String = r
            .stages
            .iter()
            .map(|&s| match STAGE_NAMES[s as usize] {
                "REM" => 'R',
                name => name.chars().last().unwrap(),
            })
            .collect();
        let on = r.arousal.iter().filter(|&&a| a == 1).count();
        let events = r.arousal.windows(2).filter(|w| w == &[0, 1]).count();
        println!(
            "{}  {}  arousal {:.1}% in {events} events",
            r.id,
            hypnogram,
            100.0 * on as f64 / r.len() as f64
        );
        assert!(arousal_rule_violations(r, 3.0, 10.0).is_empty());

        let path = dir.join(format!("{}.fsn1", r.id));
        write_record(r, &path)?;
        assert_eq!(&read_record(&path)?, r);
    }
    println!(
        "stages: W=wake, 1/2/3=N1..N3, R=REM; files in {}",
        dir.display()
    );
    Ok(())
}
