//! In-memory records and the FSN1 record file format.
//!
//! FSN1 layout: magic `FSN1`, little-endian `u32` header length, UTF-8 JSON
//! header, then `num_samples` little-endian `f32` signal values,
//! `num_samples` `u8` arousal labels and `num_epochs` `u8` stage codes.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const RECORD_MAGIC: &[u8; 4] = b"FSN1";
pub const RECORD_FORMAT_VERSION: u32 = 1;
pub const EPOCH_SECONDS: f64 = 30.0;
/// Stage code of an epoch without a scored stage.
pub const UNSCORED: u8 = 255;
pub const STAGE_NAMES: [&str; 5] = ["W", "N1", "N2", "N3", "REM"];

/// Number of 30-second epochs covering `num_samples` at `fs` Hz.
pub fn epochs_for(num_samples: usize, fs: f64) -> usize {
    (num_samples as f64 / (EPOCH_SECONDS * fs)).ceil() as usize
}

/// One night of single-channel EEG with its annotations.
#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub id: String,
    pub sampling_rate_hz: f64,
    pub signal: Vec<f32>,
    /// 1 inside an arousal event, per sample.
    pub arousal: Vec<u8>,
    /// One code per 30-s epoch: 0..=4 for W, N1, N2, N3, REM, or [`UNSCORED`].
    pub stages: Vec<u8>,
    /// False for records whose label payloads are placeholders.
    pub labeled: bool,
}

impl Record {
    pub fn new(
        id: impl Into<String>,
        sampling_rate_hz: f64,
        signal: Vec<f32>,
        arousal: Vec<u8>,
        stages: Vec<u8>,
    ) -> Result<Self> {
        let r = Record {
            id: id.into(),
            sampling_rate_hz,
            signal,
            arousal,
            stages,
            labeled: true,
        };
        r.validate()?;
        Ok(r)
    }

    /// A record without annotations: all-zero arousal and unscored epochs.
    pub fn unlabeled(
        id: impl Into<String>,
        sampling_rate_hz: f64,
        signal: Vec<f32>,
    ) -> Result<Self> {
        let n = signal.len();
        let mut r = Record::new(
            id,
            sampling_rate_hz,
            signal,
            vec![0; n],
            vec![UNSCORED; epochs_for(n, sampling_rate_hz)],
        )?;
        r.labeled = false;
        Ok(r)
    }

    pub fn len(&self) -> usize {
        self.signal.len()
    }

    pub fn is_empty(&self) -> bool {
        self.signal.is_empty()
    }

    pub fn num_epochs(&self) -> usize {
        self.stages.len()
    }

    pub fn samples_per_epoch(&self) -> f64 {
        EPOCH_SECONDS * self.sampling_rate_hz
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.signal.len();
        if n == 0 {
            return Err(Error::Format(format!("record {} has no samples", self.id)));
        }
        if !(self.sampling_rate_hz.is_finite() && self.sampling_rate_hz > 0.0) {
            return Err(Error::Format(format!(
                "record {} has sampling rate {}",
                self.id, self.sampling_rate_hz
            )));
        }
        if self.arousal.len() != n {
            return Err(Error::Format(format!(
                "record {}: {} arousal labels for {n} samples",
                self.id,
                self.arousal.len()
            )));
        }
        if let Some(v) = self.arousal.iter().find(|&&v| v > 1) {
            return Err(Error::Format(format!(
                "record {}: arousal label {v} is not 0 or 1",
                self.id
            )));
        }
        let expected = epochs_for(n, self.sampling_rate_hz);
        if self.stages.len() != expected {
            return Err(Error::Format(format!(
                "record {}: {} stage labels, expected {expected} for {n} samples at {} Hz",
                self.id,
                self.stages.len(),
                self.sampling_rate_hz
            )));
        }
        if let Some(v) = self.stages.iter().find(|&&v| v > 4 && v != UNSCORED) {
            return Err(Error::Format(format!(
                "record {}: stage code {v} is not 0..=4 or 255",
                self.id
            )));
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct RecordHeader {
    format_version: u32,
    id: String,
    sampling_rate_hz: f64,
    num_samples: usize,
    epoch_seconds: f64,
    num_epochs: usize,
    stage_code_map: BTreeMap<String, u8>,
    #[serde(default = "default_true")]
    labeled: bool,
}

fn default_true() -> bool {
    true
}

fn stage_code_map() -> BTreeMap<String, u8> {
    let mut m: BTreeMap<String, u8> = STAGE_NAMES
        .iter()
        .enumerate()
        .map(|(i, s)| (s.to_string(), i as u8))
        .collect();
    m.insert("unscored".into(), UNSCORED);
    m
}

pub fn write_record(record: &Record, path: &Path) -> Result<()> {
    fs::write(path, encode_record(record)?).map_err(|e| Error::io(path, e))
}

pub fn encode_record(record: &Record) -> Result<Vec<u8>> {
    record.validate()?;
    let header = RecordHeader {
        format_version: RECORD_FORMAT_VERSION,
        id: record.id.clone(),
        sampling_rate_hz: record.sampling_rate_hz,
        num_samples: record.len(),
        epoch_seconds: EPOCH_SECONDS,
        num_epochs: record.num_epochs(),
        stage_code_map: stage_code_map(),
        labeled: record.labeled,
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Format(e.to_string()))?;
    let n = record.len();
    let mut out = Vec::with_capacity(8 + json.len() + 5 * n + record.num_epochs());
    out.extend_from_slice(RECORD_MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for v in &record.signal {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&record.arousal);
    out.extend_from_slice(&record.stages);
    Ok(out)
}

pub fn read_record(path: &Path) -> Result<Record> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_record(&bytes).map_err(|e| match e {
        Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn decode_record(bytes: &[u8]) -> Result<Record> {
    if bytes.len() < 8 {
        return Err(Error::Format("file too short for a record header".into()));
    }
    if &bytes[..4] != RECORD_MAGIC {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected FSN1",
            &bytes[..4]
        )));
    }
    let header_len = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let start = 8usize
        .checked_add(header_len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::Format("truncated header".into()))?;
    let h: RecordHeader = serde_json::from_slice(&bytes[8..start])
        .map_err(|e| Error::Format(format!("unreadable header: {e}")))?;
    if h.format_version != RECORD_FORMAT_VERSION {
        return Err(Error::Format(format!(
            "record format version {} is not supported",
            h.format_version
        )));
    }
    if h.epoch_seconds != EPOCH_SECONDS {
        return Err(Error::Format(format!(
            "epoch length {} s is not supported",
            h.epoch_seconds
        )));
    }
    let n = h.num_samples;
    let payload = &bytes[start..];
    let expected = 4 * n + n + h.num_epochs;
    if payload.len() != expected {
        return Err(Error::Format(format!(
            "payload holds {} bytes, header implies {expected}",
            payload.len()
        )));
    }
    let signal: Vec<f32> = payload[..4 * n]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    let record = Record {
        id: h.id,
        sampling_rate_hz: h.sampling_rate_hz,
        signal,
        arousal: payload[4 * n..5 * n].to_vec(),
        stages: payload[5 * n..].to_vec(),
        labeled: h.labeled,
    };
    record.validate()?;
    Ok(record)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Record {
        let n = 128 * 45;
        let signal: Vec<f32> = (0..n).map(|i| (i as f32 * 0.1).sin()).collect();
        let mut arousal = vec![0u8; n];
        arousal[1000..1500].fill(1);
        Record::new("night-1", 128.0, signal, arousal, vec![2, UNSCORED]).unwrap()
    }

    #[test]
    fn write_then_read_is_lossless() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.fsn1");
        let r = sample();
        write_record(&r, &path).unwrap();
        assert_eq!(read_record(&path).unwrap(), r);
    }

    #[test]
    fn unlabeled_flag_survives_round_trip() {
        let r = Record::unlabeled("u", 100.0, vec![0.5; 3001]).unwrap();
        assert_eq!(r.num_epochs(), 2);
        let back = decode_record(&encode_record(&r).unwrap()).unwrap();
        assert!(!back.labeled);
        assert_eq!(back, r);
    }

    #[test]
    fn label_length_mismatches_are_rejected() {
        let mut r = sample();
        r.arousal.pop();
        assert!(r.validate().is_err());
        let mut r = sample();
        r.stages.push(0);
        assert!(encode_record(&r).is_err());
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let good = encode_record(&sample()).unwrap();
        let mut bad = good.clone();
        bad[3] = b'2';
        assert!(decode_record(&bad).is_err());
        assert!(decode_record(&good[..good.len() - 1]).is_err());
        assert!(decode_record(&good[..10]).is_err());

        // header claims one epoch too many: payload length no longer matches
        let text = String::from_utf8_lossy(&good[8..8 + 200]).to_string();
        assert!(text.contains("\"num_epochs\":2"));
        let mut bytes = good.clone();
        let key = b"\"num_epochs\":2";
        let at = bytes.windows(key.len()).position(|w| w == key).unwrap();
        bytes[at + key.len() - 1] = b'3';
        assert!(decode_record(&bytes).is_err());
    }

    #[test]
    fn stage_count_must_match_sample_count() {
        // 3 epochs for a record that only spans 2 → rejected on decode
        let r = sample();
        let mut bytes = encode_record(&r).unwrap();
        bytes.push(0);
        let key = b"\"num_epochs\":2";
        let at = bytes.windows(key.len()).position(|w| w == key).unwrap();
        bytes[at + key.len() - 1] = b'3';
        assert!(matches!(decode_record(&bytes), Err(Error::Format(_))));
    }
}
