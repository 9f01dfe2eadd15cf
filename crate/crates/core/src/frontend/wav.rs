//! RIFF/WAV ingestion for `<split>/<label>/<file>.wav` trees.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};

use super::{AudioClip, Split, SAMPLE_RATE};
use crate::error::{Error, Result};

/// Reads a 16-bit PCM mono file, returning samples in [-1, 1] and the rate.
pub fn read_wav(path: &Path) -> Result<(Vec<f32>, u32)> {
    let reader = WavReader::open(path)?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(Error::Invalid(format!(
            "expected mono, found {} channels",
            spec.channels
        )));
    }
    if spec.sample_format != SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(Error::Invalid(format!(
            "expected 16-bit PCM, found {:?} {}-bit",
            spec.sample_format, spec.bits_per_sample
        )));
    }
    let samples = reader
        .into_samples::<i16>()
        .map(|s| s.map(|v| v as f32 / 32768.0))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    Ok((samples, spec.sample_rate))
}

pub fn write_wav(path: &Path, samples: &[f32], sample_rate: u32) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let spec = WavSpec {
        channels: 1,
        sample_rate,
        bits_per_sample: 16,
        sample_format: SampleFormat::Int,
    };
    let mut writer = WavWriter::create(path, spec)?;
    for &s in samples {
        let v = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        writer.write_sample(v)?;
    }
    writer.finalize()?;
    Ok(())
}

const SINC_ZEROS: f64 = 16.0;

/// Band-limited resampling with a Hann-windowed sinc kernel. The output has
/// `round(len · to / from)` samples.
pub fn resample(samples: &[f32], from: u32, to: u32) -> Vec<f32> {
    if from == to {
        return samples.to_vec();
    }
    let ratio = to as f64 / from as f64;
    let out_len = (samples.len() as f64 * ratio).round() as usize;
    let cutoff = ratio.min(1.0);
    let half_width = SINC_ZEROS / cutoff;
    (0..out_len)
        .map(|m| {
            let t = m as f64 / ratio;
            let lo = (t - half_width).ceil().max(0.0) as usize;
            let hi = ((t + half_width).floor() as usize).min(samples.len().saturating_sub(1));
            let mut acc = 0.0;
            for (n, &x) in samples.iter().enumerate().take(hi + 1).skip(lo) {
                let d = t - n as f64;
                let window = 0.5 + 0.5 * (PI * d / half_width).cos();
                acc += x as f64 * cutoff * sinc(cutoff * d) * window;
            }
            acc.clamp(-1.0, 1.0) as f32
        })
        .collect()
}

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        (PI * x).sin() / (PI * x)
    }
}

#[derive(Debug, Clone, Default)]
pub struct IngestOutcome {
    pub clips: Vec<AudioClip>,
    /// Files that failed to load, only populated when `skip_bad` is set.
    pub skipped: Vec<(PathBuf, String)>,
}

/// Loads `root/<split>/<label>/*.wav`. Unreadable or non-conforming files
/// abort the run unless `skip_bad` is set, in which case they are listed in
/// the outcome.
pub fn ingest_wav_dir(root: &Path, task_id: &str, skip_bad: bool) -> Result<IngestOutcome> {
    let mut outcome = IngestOutcome::default();
    let mut bad = Vec::new();
    for split in Split::ALL {
        let split_dir = root.join(split.as_str());
        let mut found = 0usize;
        if split_dir.is_dir() {
            for label_dir in sorted_entries(&split_dir)? {
                if !label_dir.is_dir() {
                    continue;
                }
                let label = label_dir.file_name().unwrap().to_string_lossy().into_owned();
                for file in sorted_entries(&label_dir)? {
                    if file.extension().and_then(|e| e.to_str()) != Some("wav") {
                        continue;
                    }
                    let stem = file.file_stem().unwrap().to_string_lossy().into_owned();
                    match load_clip(&file, task_id, split, &label, &stem) {
                        Ok(clip) => {
                            found += 1;
                            outcome.clips.push(clip);
                        }
                        Err(e) => bad.push((file.clone(), e.to_string())),
                    }
                }
            }
        }
        if found == 0 && bad.is_empty() {
            return Err(Error::EmptySplit(split_dir));
        }
    }
    if !bad.is_empty() {
        if !skip_bad {
            return Err(Error::BadWavFiles(bad));
        }
        outcome.skipped = bad;
    }
    Ok(outcome)
}

fn load_clip(path: &Path, task_id: &str, split: Split, label: &str, stem: &str) -> Result<AudioClip> {
    let (samples, rate) = read_wav(path)?;
    let samples = resample(&samples, rate, SAMPLE_RATE);
    let clip = AudioClip {
        clip_id: format!("{task_id}/{split}/{label}/{stem}"),
        task_id: task_id.to_string(),
        label: label.to_string(),
        split,
        sample_rate: SAMPLE_RATE,
        samples,
    };
    clip.validate()?;
    Ok(clip)
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut entries = fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    entries.sort();
    Ok(entries)
}
