//! Deterministic synthetic polysomnography.
//!
//! Stages follow a sticky Markov chain over 30-s epochs. Each stage drives a
//! band-limited oscillator; neighbouring epochs are cross-faded over one
//! second. N2 carries sigma-band spindles. Arousals are 16–30 Hz bursts
//! placed only inside sleep and only after at least `min_preceding_sleep_s`
//! seconds of arousal-free sleep.

use std::f64::consts::PI;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::record::{Record, EPOCH_SECONDS};
use crate::error::{Error, Result};
use crate::layers::NUM_STAGES;

/// Frequency range in Hz and peak amplitude of one signal component.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Band {
    pub lo: f64,
    pub hi: f64,
    pub amplitude: f64,
}

impl Band {
    pub const fn new(lo: f64, hi: f64, amplitude: f64) -> Self {
        Band { lo, hi, amplitude }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub sampling_rate_hz: f64,
    pub num_epochs: usize,
    /// Exact record length in samples. Overrides `num_epochs`; the last
    /// epoch may be partial.
    pub num_samples: Option<usize>,
    /// Row-stochastic, rows and columns in W, N1, N2, N3, REM order.
    pub transition: [[f64; NUM_STAGES]; NUM_STAGES],
    pub initial: [f64; NUM_STAGES],
    /// Target fraction of samples inside arousals.
    pub arousal_rate: f64,
    pub arousal_min_s: f64,
    pub arousal_max_s: f64,
    pub min_preceding_sleep_s: f64,
    /// Background oscillation per stage. For N2 this excludes spindles.
    pub stage_bands: [Band; NUM_STAGES],
    pub spindle: Band,
    /// Mean spindle count per N2 epoch.
    pub spindles_per_epoch: f64,
    pub arousal_band: Band,
    /// Standard deviation of additive white noise.
    pub noise_level: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            sampling_rate_hz: 128.0,
            num_epochs: 60,
            num_samples: None,
            transition: [
                [0.80, 0.15, 0.04, 0.00, 0.01],
                [0.08, 0.55, 0.30, 0.00, 0.07],
                [0.03, 0.05, 0.80, 0.08, 0.04],
                [0.01, 0.01, 0.13, 0.85, 0.00],
                [0.04, 0.05, 0.06, 0.00, 0.85],
            ],
            initial: [0.20, 0.15, 0.35, 0.15, 0.15],
            arousal_rate: 0.05,
            arousal_min_s: 3.0,
            arousal_max_s: 15.0,
            min_preceding_sleep_s: 10.0,
            stage_bands: [
                Band::new(8.0, 12.0, 20.0),
                Band::new(4.0, 7.0, 25.0),
                Band::new(2.0, 4.0, 30.0),
                Band::new(0.5, 2.0, 80.0),
                Band::new(4.0, 8.0, 12.0),
            ],
            spindle: Band::new(12.0, 14.0, 35.0),
            spindles_per_epoch: 1.5,
            arousal_band: Band::new(16.0, 30.0, 40.0),
            noise_level: 5.0,
            seed: 0,
        }
    }
}

/// Output resolution the sampling rate must divide evenly into.
const EPOCH_ALIGNMENT: usize = 256;

impl SynthConfig {
    pub fn samples_per_epoch(&self) -> usize {
        (EPOCH_SECONDS * self.sampling_rate_hz).round() as usize
    }

    pub fn num_samples(&self) -> usize {
        self.num_samples
            .unwrap_or(self.num_epochs * self.samples_per_epoch())
    }

    pub fn epochs(&self) -> usize {
        self.num_samples().div_ceil(self.samples_per_epoch())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let fs = self.sampling_rate_hz;
        let per_epoch = EPOCH_SECONDS * fs;
        if !(fs > 0.0 && per_epoch.fract() == 0.0) || per_epoch as usize % EPOCH_ALIGNMENT != 0 {
            return bad(format!(
                "30 s at {fs} Hz must be a whole multiple of {EPOCH_ALIGNMENT} samples"
            ));
        }
        if self.num_samples() == 0 {
            return bad("records must hold at least one sample".into());
        }
        let stochastic = |row: &[f64]| {
            row.iter().all(|&p| p.is_finite() && p >= 0.0)
                && (row.iter().sum::<f64>() - 1.0).abs() < 1e-9
        };
        if !self.transition.iter().all(|r| stochastic(r)) {
            return bad("every transition row must be a probability distribution".into());
        }
        if !stochastic(&self.initial) {
            return bad("initial stage distribution must sum to 1".into());
        }
        if !(0.0..=0.5).contains(&self.arousal_rate) {
            return bad(format!(
                "arousal_rate {} outside [0, 0.5]",
                self.arousal_rate
            ));
        }
        if !(self.arousal_min_s >= 3.0 && self.arousal_max_s >= self.arousal_min_s) {
            return bad(format!(
                "arousal durations [{}, {}] s must satisfy 3 ≤ min ≤ max",
                self.arousal_min_s, self.arousal_max_s
            ));
        }
        if !(self.min_preceding_sleep_s >= 0.0) {
            return bad("min_preceding_sleep_s must be non-negative".into());
        }
        let nyquist = fs / 2.0;
        let bands = self
            .stage_bands
            .iter()
            .chain([&self.spindle, &self.arousal_band]);
        for b in bands {
            if !(b.lo > 0.0 && b.lo < b.hi && b.hi < nyquist && b.amplitude >= 0.0) {
                return bad(format!("band {b:?} invalid below Nyquist {nyquist} Hz"));
            }
        }
        if !(self.noise_level >= 0.0 && self.spindles_per_epoch >= 0.0) {
            return bad("noise_level and spindles_per_epoch must be non-negative".into());
        }
        Ok(())
    }
}

fn draw_categorical(p: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, &w) in p.iter().enumerate() {
        acc += w;
        if u < acc {
            return i;
        }
    }
    p.iter().rposition(|&w| w > 0.0).unwrap_or(0)
}

/// Sum of sinusoids with frequencies drawn from `band`.
struct Oscillator {
    components: Vec<(f64, f64, f64)>,
}

impl Oscillator {
    fn new(band: &Band, count: usize, fs: f64, rng: &mut impl Rng) -> Self {
        let amp = band.amplitude * (2.0 / count as f64).sqrt();
        let components = (0..count)
            .map(|_| {
                let f = rng.gen_range(band.lo..band.hi);
                let phase = rng.gen_range(0.0..2.0 * PI);
                let gain = amp * rng.gen_range(0.7..1.3);
                (2.0 * PI * f / fs, phase, gain)
            })
            .collect();
        Oscillator { components }
    }

    fn at(&self, i: usize) -> f64 {
        let t = i as f64;
        self.components
            .iter()
            .map(|&(w, ph, g)| g * (w * t + ph).sin())
            .sum()
    }
}

fn is_sleep(stage: u8) -> bool {
    (1..=4).contains(&stage)
}

/// One synthetic night. Deterministic in `cfg` and the state of `rng`.
pub fn generate_synthetic_record(cfg: &SynthConfig, rng: &mut impl Rng) -> Result<Record> {
    cfg.validate()?;
    let fs = cfg.sampling_rate_hz;
    let per_epoch = cfg.samples_per_epoch();
    let n = cfg.num_samples();

    let mut stages = Vec::with_capacity(cfg.epochs());
    let mut s = draw_categorical(&cfg.initial, rng);
    for e in 0..cfg.epochs() {
        if e > 0 {
            s = draw_categorical(&cfg.transition[s], rng);
        }
        stages.push(s as u8);
    }

    // Per-stage mixing weights, cross-faded with a one-second moving average.
    let half = (fs / 2.0).round() as usize;
    let mut weights = vec![vec![0.0f64; n]; NUM_STAGES];
    for (k, w) in weights.iter_mut().enumerate() {
        let mut prefix = vec![0.0f64; n + 1];
        for i in 0..n {
            let hot = stages[i / per_epoch] as usize == k;
            prefix[i + 1] = prefix[i] + hot as u8 as f64;
        }
        for (i, wi) in w.iter_mut().enumerate() {
            let lo = i.saturating_sub(half);
            let hi = (i + half + 1).min(n);
            *wi = (prefix[hi] - prefix[lo]) / (hi - lo) as f64;
        }
    }

    let mut signal = vec![0.0f64; n];
    for (k, band) in cfg.stage_bands.iter().enumerate() {
        let osc = Oscillator::new(band, 8, fs, rng);
        for (i, x) in signal.iter_mut().enumerate() {
            let w = weights[k][i];
            if w > 0.0 {
                *x += w * osc.at(i);
            }
        }
    }
    drop(weights);

    for (e, &st) in stages.iter().enumerate() {
        if st != 2 {
            continue;
        }
        let count = stochastic_round(cfg.spindles_per_epoch, rng);
        for _ in 0..count {
            let len = (rng.gen_range(0.5..2.0) * fs) as usize;
            let span = per_epoch.min(n - e * per_epoch);
            if span <= len {
                continue;
            }
            let start = e * per_epoch + rng.gen_range(0..span - len);
            let osc = Oscillator::new(&cfg.spindle, 1, fs, rng);
            for j in 0..len {
                let env = 0.5 - 0.5 * (2.0 * PI * j as f64 / len as f64).cos();
                signal[start + j] += env * osc.at(start + j) / 2f64.sqrt();
            }
        }
    }

    let arousal = place_arousals(cfg, &stages, n, rng);
    let ramp = (0.25 * fs) as usize;
    let mut i = 0;
    while i < n {
        if arousal[i] == 0 {
            i += 1;
            continue;
        }
        let start = i;
        while i < n && arousal[i] == 1 {
            i += 1;
        }
        let len = i - start;
        let osc = Oscillator::new(&cfg.arousal_band, 4, fs, rng);
        for j in 0..len {
            let edge = j.min(len - 1 - j);
            let env = if edge < ramp {
                0.5 - 0.5 * (PI * edge as f64 / ramp as f64).cos()
            } else {
                1.0
            };
            signal[start + j] += env * osc.at(start + j);
        }
    }

    if cfg.noise_level > 0.0 {
        let noise = Normal::new(0.0, cfg.noise_level).map_err(|e| Error::Config(e.to_string()))?;
        for x in signal.iter_mut() {
            *x += noise.sample(rng);
        }
    }

    Record::new(
        "synthetic",
        fs,
        signal.into_iter().map(|v| v as f32).collect(),
        arousal,
        stages,
    )
}

fn stochastic_round(x: f64, rng: &mut impl Rng) -> usize {
    let base = x.floor();
    base as usize + rng.gen_bool((x - base).clamp(0.0, 1.0)) as usize
}

fn place_arousals(cfg: &SynthConfig, stages: &[u8], n: usize, rng: &mut impl Rng) -> Vec<u8> {
    let fs = cfg.sampling_rate_hz;
    let per_epoch = cfg.samples_per_epoch();
    let mut labels = vec![0u8; n];
    let min_len = (cfg.arousal_min_s * fs).ceil() as usize;
    let max_len = ((cfg.arousal_max_s * fs).floor() as usize).max(min_len);
    let pre = (cfg.min_preceding_sleep_s * fs).ceil() as usize;
    let mean_len = (min_len + max_len) as f64 / 2.0;
    let target = stochastic_round(cfg.arousal_rate * n as f64 / mean_len, rng);

    let mut sleep_prefix = vec![0usize; n + 1];
    for i in 0..n {
        sleep_prefix[i + 1] = sleep_prefix[i] + is_sleep(stages[i / per_epoch]) as usize;
    }
    let all_sleep = |a: usize, b: usize| sleep_prefix[b] - sleep_prefix[a] == b - a;

    for _ in 0..target {
        for _attempt in 0..100 {
            let len = rng.gen_range(min_len..=max_len);
            if pre + len > n {
                break;
            }
            let start = rng.gen_range(pre..=n - len);
            let end = start + len;
            // The event and its lead-in must be sleep, and no other event
            // may sit inside the lead-in of either this one or the next.
            if !all_sleep(start - pre, end) {
                continue;
            }
            let guard_end = (end + pre).min(n);
            if labels[start - pre..guard_end].iter().any(|&v| v == 1) {
                continue;
            }
            labels[start..end].fill(1);
            break;
        }
    }
    labels
}

/// Arousal runs that break the scoring constraints the generator encodes:
/// shorter than `min_s`, or not preceded by `pre_s` seconds of arousal-free
/// sleep. Returns the start sample of each offending run.
pub fn arousal_rule_violations(record: &Record, min_s: f64, pre_s: f64) -> Vec<usize> {
    let fs = record.sampling_rate_hz;
    let per_epoch = record.samples_per_epoch();
    let min_len = (min_s * fs).ceil() as usize;
    let pre = (pre_s * fs).ceil() as usize;
    let a = &record.arousal;
    let n = a.len();
    let sleep = |i: usize| {
        let e = (i as f64 / per_epoch).floor() as usize;
        record.stages.get(e).is_some_and(|&s| is_sleep(s))
    };
    let mut bad = Vec::new();
    let mut i = 0;
    while i < n {
        if a[i] == 0 {
            i += 1;
            continue;
        }
        let start = i;
        while i < n && a[i] == 1 {
            i += 1;
        }
        let preceded = start >= pre && (start - pre..start).all(|j| a[j] == 0 && sleep(j));
        if i - start < min_len || !preceded {
            bad.push(start);
        }
    }
    bad
}

/// Generator for record `index` of a dataset seeded with `seed`.
pub fn record_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// `count` records named `record_0000`, `record_0001`, … generated in parallel.
pub fn synth_dataset(cfg: &SynthConfig, count: usize) -> Result<Vec<Record>> {
    cfg.validate()?;
    (0..count)
        .into_par_iter()
        .map(|i| {
            let mut rng = record_rng(cfg.seed, i as u64);
            let mut r = generate_synthetic_record(cfg, &mut rng)?;
            r.id = format!("record_{i:04}");
            Ok(r)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig {
            num_epochs: 20,
            seed: 9,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn fixed_seed_is_bitwise_reproducible() {
        let cfg = small();
        let a = generate_synthetic_record(&cfg, &mut record_rng(1, 0)).unwrap();
        let b = generate_synthetic_record(&cfg, &mut record_rng(1, 0)).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic_record(&cfg, &mut record_rng(1, 1)).unwrap();
        assert_ne!(a.signal, c.signal);
    }

    #[test]
    fn shape_and_alignment() {
        let r = generate_synthetic_record(&small(), &mut record_rng(2, 0)).unwrap();
        assert_eq!(r.len(), 20 * 3840);
        assert_eq!(r.num_epochs(), 20);
        assert!(r.signal.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn exact_sample_count_gives_partial_last_epoch() {
        let cfg = SynthConfig {
            num_samples: Some(1 << 14),
            ..small()
        };
        let r = generate_synthetic_record(&cfg, &mut record_rng(4, 0)).unwrap();
        assert_eq!(r.len(), 1 << 14);
        assert_eq!(r.num_epochs(), 5);
        assert!(arousal_rule_violations(&r, 3.0, 10.0).is_empty());
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut c = small();
        c.arousal_min_s = 2.0;
        assert!(c.validate().is_err());
        let mut c = small();
        c.sampling_rate_hz = 125.0;
        assert!(c.validate().is_err());
        let mut c = small();
        c.transition[0][0] = 0.9;
        assert!(c.validate().is_err());
        let mut c = small();
        c.arousal_band.hi = 70.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn arousals_obey_the_scoring_rules() {
        for i in 0..5 {
            let r = generate_synthetic_record(&small(), &mut record_rng(3, i)).unwrap();
            assert!(arousal_rule_violations(&r, 3.0, 10.0).is_empty());
        }
    }

    #[test]
    fn violation_scan_flags_short_and_unprepared_events() {
        let fs = 128.0;
        let n = 3840 * 2;
        let mut arousal = vec![0u8; n];
        arousal[100..200].fill(1);
        arousal[3000..3000 + 400].fill(1);
        let r = Record::new("v", fs, vec![0.0; n], arousal, vec![2, 2]).unwrap();
        assert_eq!(arousal_rule_violations(&r, 3.0, 10.0), vec![100]);
        let mut arousal = vec![0u8; n];
        arousal[4000..4400].fill(1);
        let r = Record::new("w", fs, vec![0.0; n], arousal, vec![0, 2]).unwrap();
        assert_eq!(arousal_rule_violations(&r, 3.0, 10.0), vec![4000]);
    }
}
