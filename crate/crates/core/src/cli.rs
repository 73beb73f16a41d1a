//! The `fullsleepnet` command-line front end: `synth`, `train`, `evaluate`
//! and `predict`, driven by a TOML run configuration plus flag overrides.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{
    dataset_input_len, downsample_record_by2, prepare_record, read_record, split_dataset,
    synth_dataset, write_record, ArousalRule, PrepareOptions, PreparedExample, Record, SynthConfig,
};
use crate::error::{Error, Result};
use crate::layers::NUM_STAGES;
use crate::metrics::{
    evaluate, evaluate_pooled, hypnogram_tsv, pr_tsv, resample_prediction_masks, roc_tsv,
    write_text, EvalOptions, EvalReport, Prediction,
};
use crate::model::{
    build_model, load_checkpoint, model_forward, save_checkpoint_with_meta, CheckpointMeta,
    ModelConfig, ModelParams, Variant,
};
use crate::tensor::{Float, Tensor};
use crate::training::{train_from, write_history_tsv, TrainConfig};

#[derive(Parser, Debug)]
#[command(
    name = "fullsleepnet",
    version,
    about = "Arousal and sleep-stage segmentation of full-night EEG"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct CommonArgs {
    /// TOML run configuration.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Seed for model init, training order, data split and synthesis.
    #[arg(long, value_name = "N")]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Floating-point width of all computation.
    #[arg(long, value_parser = ["32", "64"])]
    pub precision: Option<String>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write synthetic FSN1 records and a manifest.
    Synth {
        #[command(flatten)]
        common: CommonArgs,
        /// Number of records to write.
        #[arg(long, value_name = "N")]
        count: Option<usize>,
    },
    /// Split, train with early stopping, and save the best checkpoint.
    Train {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long, value_parser = parse_variant)]
        variant: Option<Variant>,
        /// Record files; synthetic records are generated in memory when absent.
        #[arg(long, value_name = "GLOB")]
        records: Option<String>,
    },
    /// Score a checkpoint on labeled records.
    Evaluate {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        #[arg(long, value_name = "GLOB")]
        records: String,
        /// Arousal probability threshold.
        #[arg(long, value_name = "X")]
        threshold: Option<f64>,
    },
    /// Write per-sample arousal probabilities and per-epoch stages.
    Predict {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        #[arg(long, value_name = "GLOB")]
        records: String,
        #[arg(long, value_name = "X")]
        threshold: Option<f64>,
    },
}

fn parse_variant(s: &str) -> std::result::Result<Variant, String> {
    s.parse::<Variant>().map_err(|e| e.to_string())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    #[default]
    Toy,
    Full,
}

/// `[model]` section. Unset fields come from the preset.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub preset: Preset,
    pub variant: Option<Variant>,
    pub num_blocks: Option<usize>,
    pub filters: Option<Vec<usize>>,
    pub kernels: Option<Vec<(usize, usize)>>,
    pub lstm_layers: Option<usize>,
    pub lstm_units: Option<usize>,
    pub seed: Option<u64>,
}

impl ModelSection {
    pub fn resolve(&self) -> Result<ModelConfig> {
        let mut cfg = match self.preset {
            Preset::Toy => ModelConfig::toy(),
            Preset::Full => ModelConfig::full_scale(),
        };
        if let Some(n) = self.num_blocks {
            cfg.num_blocks = n;
        }
        if let Some(f) = &self.filters {
            cfg.filters = f.clone();
        }
        if let Some(k) = &self.kernels {
            cfg.kernels = k.clone();
        }
        if let Some(l) = self.lstm_layers {
            cfg.lstm_layers = l;
        }
        if let Some(u) = self.lstm_units {
            cfg.lstm_units = u;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(v) = self.variant {
            cfg = cfg.with_variant(v);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn from_config(cfg: &ModelConfig, preset: Preset) -> Self {
        ModelSection {
            preset,
            variant: Some(cfg.variant()),
            num_blocks: Some(cfg.num_blocks),
            filters: Some(cfg.filters.clone()),
            kernels: Some(cfg.kernels.clone()),
            lstm_layers: Some(cfg.lstm_layers),
            lstm_units: Some(cfg.lstm_units),
            seed: Some(cfg.seed),
        }
    }
}

/// `[data]` section.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Glob of FSN1 files. When unset, `synth_count` synthetic records are
    /// generated from `synth`.
    pub records: Option<String>,
    pub synth_count: usize,
    pub split_seed: u64,
    pub arousal_rule: ArousalRule,
    pub downsample_by2: bool,
    /// Padded input length for every record; defaults to the next power of
    /// two above the longest record.
    pub input_len: Option<usize>,
    pub synth: SynthConfig,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            records: None,
            synth_count: 16,
            split_seed: 0,
            arousal_rule: ArousalRule::Majority,
            downsample_by2: false,
            input_len: None,
            synth: SynthConfig::default(),
        }
    }
}

/// A complete run configuration as read from `--config`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub output_dir: PathBuf,
    /// 32 or 64.
    pub precision: u32,
    pub model: ModelSection,
    pub training: TrainConfig,
    pub data: DataSection,
    pub evaluation: EvalOptions,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            output_dir: PathBuf::from("fsn_out"),
            precision: 64,
            model: ModelSection::default(),
            training: TrainConfig::default(),
            data: DataSection::default(),
            evaluation: EvalOptions::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Flags win over file values. `--seed` reseeds every random stage.
    pub fn apply(&mut self, common: &CommonArgs) -> Result<()> {
        if let Some(seed) = common.seed {
            self.model.seed = Some(seed);
            self.training.seed = seed;
            self.data.split_seed = seed;
            self.data.synth.seed = seed;
        }
        if let Some(out) = &common.out {
            self.output_dir = out.clone();
        }
        if let Some(p) = &common.precision {
            self.precision = p
                .parse()
                .map_err(|_| Error::Config(format!("precision {p}")))?;
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        if self.precision != 32 && self.precision != 64 {
            return Err(Error::Config(format!(
                "precision must be 32 or 64, got {}",
                self.precision
            )));
        }
        self.training.validate()?;
        self.model.resolve()?;
        if !(0.0..=1.0).contains(&self.evaluation.threshold) {
            return Err(Error::Config("threshold must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

fn load_config(common: &CommonArgs) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.apply(common)?;
    Ok(cfg)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
    text.push('\n');
    write_text(path, &text)
}

/// Reads every file matching `pattern`, in sorted path order.
pub fn read_records(pattern: &str) -> Result<Vec<Record>> {
    let paths: Vec<PathBuf> = glob::glob(pattern)
        .map_err(|e| Error::InvalidArgument(format!("bad glob {pattern:?}: {e}")))?
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    if paths.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "no records match {pattern:?}"
        )));
    }
    paths.par_iter().map(|p| read_record(p)).collect()
}

#[derive(Serialize)]
struct ManifestEntry {
    id: String,
    file: String,
    seed: u64,
    stream: u64,
}

#[derive(Serialize)]
struct Manifest<'a> {
    count: usize,
    synth: &'a SynthConfig,
    records: Vec<ManifestEntry>,
}

/// Writes `count` synthetic records and `manifest.json` into `out_dir`.
pub fn cmd_synth(cfg: &SynthConfig, count: usize, out_dir: &Path) -> Result<()> {
    cfg.validate()?;
    let records = synth_dataset(cfg, count)?;
    create_dir(out_dir)?;
    let mut entries = Vec::with_capacity(count);
    for (i, r) in records.iter().enumerate() {
        let file = format!("{}.fsn1", r.id);
        write_record(r, &out_dir.join(&file))?;
        entries.push(ManifestEntry {
            id: r.id.clone(),
            file,
            seed: cfg.seed,
            stream: i as u64,
        });
    }
    write_json(
        &out_dir.join("manifest.json"),
        &Manifest {
            count,
            synth: cfg,
            records: entries,
        },
    )?;
    println!("wrote {count} records to {}", out_dir.display());
    Ok(())
}

fn prepare_all<S: Float>(
    records: &[&Record],
    opts: &PrepareOptions,
) -> Result<Vec<PreparedExample<S>>> {
    records
        .par_iter()
        .map(|r| prepare_record(r, opts))
        .collect()
}

/// What `cmd_train` produced.
pub struct TrainSummary {
    pub out_dir: PathBuf,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub epochs_run: usize,
    pub test_report: Option<EvalReport>,
}

pub fn cmd_train(cfg: &RunConfig) -> Result<TrainSummary> {
    match cfg.precision {
        32 => train_typed::<f32>(cfg),
        _ => train_typed::<f64>(cfg),
    }
}

fn train_typed<S: Float>(run: &RunConfig) -> Result<TrainSummary> {
    let model_cfg = run.model.resolve()?;
    let records = match &run.data.records {
        Some(pattern) => read_records(pattern)?,
        None => synth_dataset(&run.data.synth, run.data.synth_count)?,
    };
    let ids: Vec<String> = records.iter().map(|r| r.id.clone()).collect();
    let split = split_dataset(&ids, run.data.split_seed)?;
    let factor = model_cfg.downsampling_factor();
    let input_len = run
        .data
        .input_len
        .unwrap_or_else(|| dataset_input_len(&records, factor, run.data.downsample_by2));
    let opts = PrepareOptions {
        factor,
        min_len: Some(input_len),
        arousal_rule: run.data.arousal_rule,
        downsample_by2: run.data.downsample_by2,
    };
    let pick = |names: &[String]| -> Vec<&Record> {
        names
            .iter()
            .map(|n| {
                records
                    .iter()
                    .find(|r| &r.id == n)
                    .expect("split ids come from records")
            })
            .collect()
    };
    let train_set = prepare_all::<S>(&pick(&split.train), &opts)?;
    let val_set = prepare_all::<S>(&pick(&split.val), &opts)?;
    if let Some(ex) = train_set
        .iter()
        .chain(&val_set)
        .find(|e| e.input_len() != input_len)
    {
        return Err(Error::Shape(format!(
            "record {} needs padding to {} samples, above the configured input length {input_len}",
            ex.id,
            ex.input_len()
        )));
    }

    let out_dir = run.output_dir.clone();
    create_dir(&out_dir)?;
    let mut resolved = run.clone();
    resolved.model = ModelSection::from_config(&model_cfg, run.model.preset);
    resolved.data.input_len = Some(input_len);
    write_text(&out_dir.join("config.toml"), &resolved.to_toml()?)?;
    write_json(&out_dir.join("split.json"), &split)?;

    eprintln!(
        "training {} on {} records ({} validation), L = {input_len}, {} parameters",
        model_cfg.variant(),
        train_set.len(),
        val_set.len(),
        build_model::<S>(&model_cfg)?.count()
    );
    let params = build_model::<S>(&model_cfg)?;
    let outcome = train_from(
        &model_cfg,
        params,
        &train_set,
        &val_set,
        &run.training,
        &mut |h| {
            eprintln!(
                "epoch {:>3}  train {:.5}  val {:.5}  ({:.1} s)",
                h.epoch, h.train_loss, h.val_loss, h.seconds
            );
        },
    )?;
    let meta = CheckpointMeta {
        input_len: Some(input_len),
        sampling_rate_hz: records.first().map(|r| r.sampling_rate_hz),
        downsample_by2: run.data.downsample_by2,
    };
    save_checkpoint_with_meta(
        &outcome.best_params,
        &model_cfg,
        Some(&meta),
        &out_dir.join("best.fsnw"),
    )?;
    write_history_tsv(&outcome.history, &out_dir.join("history.tsv"))?;

    let test_report = if split.test.is_empty() {
        None
    } else {
        let test: Vec<Record> = pick(&split.test).into_iter().cloned().collect();
        let (report, _) = score_records(
            &outcome.best_params,
            &model_cfg,
            &meta,
            &test,
            &run.evaluation,
        )?;
        write_text(
            &out_dir.join("test_report.json"),
            &(report.to_json()? + "\n"),
        )?;
        Some(report)
    };
    println!(
        "best epoch {} of {} (validation loss {:.5}); checkpoint at {}",
        outcome.best_epoch,
        outcome.history.len(),
        outcome.best_val_loss,
        out_dir.join("best.fsnw").display()
    );
    Ok(TrainSummary {
        out_dir,
        best_epoch: outcome.best_epoch,
        best_val_loss: outcome.best_val_loss,
        epochs_run: outcome.history.len(),
        test_report,
    })
}

/// Applies the checkpoint's input geometry to `record`: optional halving,
/// then a length and rate check against the trained input length.
fn fit_record(record: &Record, meta: &CheckpointMeta) -> Result<Record> {
    if let Some(fs) = meta.sampling_rate_hz {
        if fs != record.sampling_rate_hz {
            return Err(Error::Shape(format!(
                "record {} is sampled at {} Hz, the checkpoint expects {fs} Hz",
                record.id, record.sampling_rate_hz
            )));
        }
    }
    let r = if meta.downsample_by2 {
        downsample_record_by2(record)?
    } else {
        record.clone()
    };
    if let Some(l) = meta.input_len {
        if r.len() > l {
            return Err(Error::Shape(format!(
                "record {} has {} samples but the checkpoint was trained on inputs of L = {l}; \
                 it would need padding to {} samples",
                r.id,
                r.len(),
                r.len().next_power_of_two()
            )));
        }
    }
    Ok(r)
}

fn predict_one<S: Float>(
    params: &ModelParams<S>,
    cfg: &ModelConfig,
    meta: &CheckpointMeta,
    record: &Record,
) -> Result<(Record, Prediction)> {
    let r = fit_record(record, meta)?;
    let mut opts = PrepareOptions::new(cfg.downsampling_factor());
    opts.min_len = meta.input_len;
    let ex = prepare_record::<S>(&r, &opts)?;
    let out = model_forward(
        params,
        cfg,
        &Tensor::new(vec![ex.input_len(), 1], ex.signal)?,
    )?;
    Ok((r, Prediction::from_output(&out, cfg.downsampling_factor())))
}

/// Runs the model on `records` and scores the result.
pub fn score_records<S: Float>(
    params: &ModelParams<S>,
    cfg: &ModelConfig,
    meta: &CheckpointMeta,
    records: &[Record],
    opts: &EvalOptions,
) -> Result<(EvalReport, crate::metrics::Pooled)> {
    let mut fitted = Vec::with_capacity(records.len());
    let mut preds = Vec::with_capacity(records.len());
    for record in records {
        let (r, p) = predict_one(params, cfg, meta, record)?;
        fitted.push(r);
        preds.push(p);
    }
    evaluate_pooled(&fitted, &preds, opts)
}

pub fn cmd_evaluate(run: &RunConfig, checkpoint: &Path, pattern: &str) -> Result<EvalReport> {
    match run.precision {
        32 => evaluate_typed::<f32>(run, checkpoint, pattern),
        _ => evaluate_typed::<f64>(run, checkpoint, pattern),
    }
}

fn evaluate_typed<S: Float>(
    run: &RunConfig,
    checkpoint: &Path,
    pattern: &str,
) -> Result<EvalReport> {
    let ck = load_checkpoint::<S>(checkpoint)?;
    let meta = ck.meta.clone().unwrap_or_default();
    let records = read_records(pattern)?;
    let (report, pooled) = score_records(&ck.params, &ck.config, &meta, &records, &run.evaluation)?;
    let out = &run.output_dir;
    create_dir(&out.join("hypnograms"))?;
    write_text(&out.join("report.json"), &(report.to_json()? + "\n"))?;
    write_text(
        &out.join("roc.tsv"),
        &roc_tsv(&pooled.arousal_scores, &pooled.arousal_labels)?,
    )?;
    write_text(
        &out.join("pr.tsv"),
        &pr_tsv(&pooled.arousal_scores, &pooled.arousal_labels)?,
    )?;
    for (id, truth, pred) in &pooled.hypnograms {
        write_text(
            &out.join("hypnograms").join(format!("{id}.tsv")),
            &hypnogram_tsv(truth, pred),
        )?;
    }
    print_summary(&report);
    Ok(report)
}

fn print_summary(r: &EvalReport) {
    let opt = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.3}"));
    println!(
        "arousal: AUPRC {}  AUROC {}  epoch F1 {:.3}",
        opt(r.arousal_sample.auprc),
        opt(r.arousal_sample.auroc),
        r.arousal_epoch.f1
    );
    if let Some(s) = &r.stage {
        println!(
            "stages:  ACC {:.3}  macro-F1 {:.3}  kappa {}",
            s.accuracy,
            s.macro_f1,
            opt(s.kappa)
        );
    }
}

pub fn cmd_predict(run: &RunConfig, checkpoint: &Path, pattern: &str) -> Result<()> {
    match run.precision {
        32 => predict_typed::<f32>(run, checkpoint, pattern),
        _ => predict_typed::<f64>(run, checkpoint, pattern),
    }
}

fn predict_typed<S: Float>(run: &RunConfig, checkpoint: &Path, pattern: &str) -> Result<()> {
    let ck = load_checkpoint::<S>(checkpoint)?;
    let meta = ck.meta.clone().unwrap_or_default();
    let records = read_records(pattern)?;
    create_dir(&run.output_dir)?;
    for record in &records {
        let (r, pred) = predict_one(&ck.params, &ck.config, &meta, record)?;
        let masks = resample_prediction_masks(
            &pred.arousal,
            &pred.stage,
            pred.factor,
            r.len(),
            r.sampling_rate_hz,
        )?;
        let mut arousal = String::from("sample_index\tprobability\n");
        for (i, p) in masks.arousal.iter().enumerate() {
            let _ = writeln!(arousal, "{i}\t{p}");
        }
        let mut stages = String::from("epoch_index\tstage\tp_W\tp_N1\tp_N2\tp_N3\tp_REM\n");
        for (e, (code, probs)) in masks.stages.iter().zip(&masks.stage_probs).enumerate() {
            let _ = write!(stages, "{e}\t{}", crate::data::STAGE_NAMES[*code as usize]);
            for p in probs.iter().take(NUM_STAGES) {
                let _ = write!(stages, "\t{p}");
            }
            stages.push('\n');
        }
        let dir = &run.output_dir;
        write_text(&dir.join(format!("{}.arousal.tsv", r.id)), &arousal)?;
        write_text(&dir.join(format!("{}.stages.tsv", r.id)), &stages)?;
        if r.labeled {
            let report = evaluate(std::slice::from_ref(&r), &[pred], &run.evaluation)?;
            write_text(
                &dir.join(format!("{}.metrics.json", r.id)),
                &(report.to_json()? + "\n"),
            )?;
            println!("{}:", r.id);
            print_summary(&report);
        } else {
            println!("{}: {} epochs predicted", r.id, masks.stages.len());
        }
    }
    Ok(())
}

/// Caps the global thread pool at `FSN_THREADS` when set.
pub fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var("FSN_THREADS") {
        let n: usize = v
            .parse()
            .map_err(|_| Error::Config(format!("FSN_THREADS={v:?} is not a thread count")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(e.to_string()))?;
    }
    Ok(())
}

pub fn run(cli: Cli) -> Result<()> {
    init_threads()?;
    match cli.command {
        Command::Synth { common, count } => {
            let cfg = load_config(&common)?;
            let count = count.unwrap_or(cfg.data.synth_count);
            cmd_synth(&cfg.data.synth, count, &cfg.output_dir)
        }
        Command::Train {
            common,
            variant,
            records,
        } => {
            let mut cfg = load_config(&common)?;
            if let Some(v) = variant {
                cfg.model.variant = Some(v);
            }
            if records.is_some() {
                cfg.data.records = records;
            }
            cmd_train(&cfg).map(|_| ())
        }
        Command::Evaluate {
            common,
            checkpoint,
            records,
            threshold,
        } => {
            let mut cfg = load_config(&common)?;
            if let Some(t) = threshold {
                cfg.evaluation.threshold = t;
                cfg.validate()?;
            }
            cmd_evaluate(&cfg, &checkpoint, &records).map(|_| ())
        }
        Command::Predict {
            common,
            checkpoint,
            records,
            threshold,
        } => {
            let mut cfg = load_config(&common)?;
            if let Some(t) = threshold {
                cfg.evaluation.threshold = t;
                cfg.validate()?;
            }
            cmd_predict(&cfg, &checkpoint, &records)
        }
    }
}

/// Parses `args`, runs the command and returns the process exit code:
/// 0 success, 1 usage or configuration error, 2 data error, 3 numeric failure.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
