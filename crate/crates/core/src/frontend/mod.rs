//! Audio clips, the log-mel frontend, synthetic corpora and WAV ingestion.

mod mel;
mod synth;
mod wav;

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub use mel::{
    hz_to_mel, mel_filterbank, mel_to_hz, MelConfig, MelFrontend, MelSpectrogram, DEFAULT_MEL_BINS, SAMPLE_RATE,
};
pub use synth::{synthesize_corpus, GeneratorKind, SplitCounts, SyntheticTaskSpec};
pub use wav::{ingest_wav_dir, read_wav, resample, write_wav, IngestOutcome};

pub const MIN_DURATION_S: f64 = 0.5;
pub const MAX_DURATION_S: f64 = 30.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Dev, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }

    /// 80/10/10 assignment from a stable hash of the clip id.
    pub fn for_clip_id(clip_id: &str) -> Split {
        let bucket = stable_hash(clip_id) % 100;
        match bucket {
            0..=79 => Split::Train,
            80..=89 => Split::Dev,
            _ => Split::Test,
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "dev" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            other => Err(Error::Invalid(format!("unknown split {other:?}"))),
        }
    }
}

/// First eight bytes of SHA-256, little-endian.
pub fn stable_hash(s: &str) -> u64 {
    let digest = Sha256::digest(s.as_bytes());
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    pub clip_id: String,
    pub task_id: String,
    pub label: String,
    pub split: Split,
    pub sample_rate: u32,
    pub samples: Vec<f32>,
}

impl AudioClip {
    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |reason: String| {
            Err(Error::InvalidClip {
                clip_id: self.clip_id.clone(),
                reason,
            })
        };
        if self.sample_rate != SAMPLE_RATE {
            return fail(format!("sample rate {} != {SAMPLE_RATE}", self.sample_rate));
        }
        let d = self.duration_s();
        if !(MIN_DURATION_S..=MAX_DURATION_S).contains(&d) {
            return fail(format!("duration {d:.3}s outside [{MIN_DURATION_S}, {MAX_DURATION_S}]"));
        }
        if let Some(v) = self.samples.iter().find(|v| !v.is_finite() || v.abs() > 1.0) {
            return fail(format!("sample {v} outside [-1, 1]"));
        }
        Ok(())
    }

    pub fn manifest_entry(&self) -> ManifestEntry {
        ManifestEntry {
            clip_id: self.clip_id.clone(),
            task_id: self.task_id.clone(),
            label: self.label.clone(),
            split: self.split,
            duration_s: self.duration_s(),
            path: None,
        }
    }
}

/// Convenience wrapper: validated clip → log-mel with the default framing.
pub fn log_mel(clip: &AudioClip, mel_bins: usize) -> Result<MelSpectrogram> {
    if clip.sample_rate != SAMPLE_RATE {
        return Err(Error::InvalidClip {
            clip_id: clip.clip_id.clone(),
            reason: format!("sample rate {} != {SAMPLE_RATE}", clip.sample_rate),
        });
    }
    MelFrontend::new(MelConfig::with_bins(mel_bins)).compute(&clip.samples)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub clip_id: String,
    pub task_id: String,
    pub label: String,
    pub split: Split,
    pub duration_s: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<String>,
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut out = String::new();
    for e in entries {
        out.push_str(&serde_json::to_string(e)?);
        out.push('\n');
    }
    crate::io::write_atomic(path, out.as_bytes())
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_is_stable_and_roughly_80_10_10() {
        let mut counts = [0usize; 3];
        for i in 0..10_000 {
            let id = format!("clip-{i}");
            let s = Split::for_clip_id(&id);
            assert_eq!(s, Split::for_clip_id(&id));
            counts[s as usize] += 1;
        }
        assert!((7_700..8_300).contains(&counts[0]), "{counts:?}");
        assert!((850..1_150).contains(&counts[1]), "{counts:?}");
        assert!((850..1_150).contains(&counts[2]), "{counts:?}");
    }

    #[test]
    fn clip_validation() {
        let mut clip = AudioClip {
            clip_id: "a".into(),
            task_id: "t".into(),
            label: "x".into(),
            split: Split::Train,
            sample_rate: SAMPLE_RATE,
            samples: vec![0.0; 8_000],
        };
        clip.validate().unwrap();
        clip.samples = vec![0.0; 7_999];
        assert!(clip.validate().is_err());
        clip.samples = vec![1.5; 8_000];
        assert!(clip.validate().is_err());
        clip.samples = vec![0.0; 8_000];
        clip.sample_rate = 8_000;
        assert!(clip.validate().is_err());
    }
}
