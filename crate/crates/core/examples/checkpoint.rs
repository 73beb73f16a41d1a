//! FSNW checkpoints: bit-exact round trips, stored input geometry, and
//! refusal to load weights into the wrong architecture.

use fullsleepnet::model::{
    build_model, load_checkpoint, model_forward, save_checkpoint_with_meta, CheckpointMeta,
    ModelConfig, Variant,
};
use fullsleepnet::{Result, Tensor};

fn main() -> Result<()> {
    let cfg = ModelConfig::toy().with_variant(Variant::CR).with_seed(42);
    let params = build_model::<f64>(&cfg)?;
    let meta = CheckpointMeta {
        input_len: Some(1 << 14),
        sampling_rate_hz: Some(128.0),
        downsample_by2: false,
    };
    let path = std::env::temp_dir().join("fullsleepnet-example.fsnw");
    save_checkpoint_with_meta(&params, &cfg, Some(&meta), &path)?;
    let size = std::fs::metadata(&path).map(|m| m.len()).unwrap_or(0);
    println!(
        "wrote {} tensors ({} values, {size} bytes) to {}",
        params.len(),
        params.count(),
        path.display()
    );

    let ck = load_checkpoint::<f64>(&path)?;
    assert_eq!(ck.params, params);
    println!("reloaded {} with meta {:?}", ck.config.variant(), ck.meta);

    let x = Tensor::new(
        vec![64, 1],
        (0..64).map(|i| (i as f64 / 5.0).sin()).collect(),
    )?;
    let before = model_forward(&params, &cfg, &x)?;
    let after = model_forward(&ck.params, &ck.config, &x)?;
    assert_eq!(before, after);
    println!(
        "identical outputs, first arousal probability {:.6}",
        after.arousal[0]
    );

    // Single precision reads the same file.
    let single = load_checkpoint::<f32>(&path)?;
    println!("as f32: {} tensors", single.params.len());

    match ck.ensure_compatible(&ModelConfig::toy()) {
        Ok(()) => println!("unexpectedly compatible"),
        Err(e) => println!("CRA config rejected: {e}"),
    }
    Ok(())
}
