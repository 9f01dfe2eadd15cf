use std::f64::consts::PI;
use std::path::Path;

use paraconf::frontend::*;
use paraconf::Error;
use proptest::prelude::*;

fn tone(hz: f64, secs: f64, sr: u32, amp: f64) -> Vec<f32> {
    (0..(secs * sr as f64) as usize)
        .map(|n| (amp * (2.0 * PI * hz * n as f64 / sr as f64).sin()) as f32)
        .collect()
}

// Direct DFT of one Hann-windowed frame, then HTK triangles built from scratch.
fn tone_band_oracle(hz: f64, bins: usize) -> usize {
    let (win, nfft, sr) = (400usize, 512usize, 16_000.0);
    let x: Vec<f64> = (0..win)
        .map(|n| {
            let w = 0.5 - 0.5 * (2.0 * PI * n as f64 / win as f64).cos();
            w * (2.0 * PI * hz * n as f64 / sr).sin()
        })
        .collect();
    let power: Vec<f64> = (0..=nfft / 2)
        .map(|k| {
            let (mut re, mut im) = (0.0, 0.0);
            for (n, v) in x.iter().enumerate() {
                let a = -2.0 * PI * (k * n) as f64 / nfft as f64;
                re += v * a.cos();
                im += v * a.sin();
            }
            re * re + im * im
        })
        .collect();
    let mel = |f: f64| 1127.0 * (1.0 + f / 700.0).ln();
    let top = mel(sr / 2.0);
    let centers: Vec<f64> = (0..bins + 2).map(|i| top * i as f64 / (bins + 1) as f64).collect();
    let energy: Vec<f64> = (0..bins)
        .map(|m| {
            (0..=nfft / 2)
                .map(|k| {
                    let f = mel(k as f64 * sr / nfft as f64);
                    let w = if f > centers[m] && f <= centers[m + 1] {
                        (f - centers[m]) / (centers[m + 1] - centers[m])
                    } else if f > centers[m + 1] && f < centers[m + 2] {
                        (centers[m + 2] - f) / (centers[m + 2] - centers[m + 1])
                    } else {
                        0.0
                    };
                    w * power[k]
                })
                .sum()
        })
        .collect();
    (0..bins).fold(0, |b, m| if energy[m] > energy[b] { m } else { b })
}

#[test]
fn one_khz_tone_peaks_in_one_band() {
    let mel = MelFrontend::new(MelConfig::default())
        .compute(&tone(1000.0, 1.0, 16_000, 0.5))
        .unwrap();
    let argmax: Vec<usize> = mel
        .frames
        .rows()
        .into_iter()
        .map(|r| (0..r.len()).fold(0, |b, m| if r[m] > r[b] { m } else { b }))
        .collect();
    assert!(argmax.iter().all(|&a| a == argmax[0]));
    assert_eq!(argmax[0], tone_band_oracle(1000.0, 80));
}

#[test]
fn four_second_clip_frame_count() {
    let mel = MelFrontend::new(MelConfig::default())
        .compute(&vec![0.0; 64_000])
        .unwrap();
    assert_eq!(mel.frames.dim(), (398, 80));
    assert_eq!(mel.frame_period, 0.010);
    assert!(mel.frames.iter().all(|&v| v == (1e-10f64).ln() as f32));
}

fn write_tree(root: &Path, rate: u32) {
    for split in ["train", "dev", "test"] {
        for (label, hz) in [("low", 300.0), ("high", 900.0)] {
            for i in 0..3 {
                let p = root.join(split).join(label).join(format!("{i}.wav"));
                write_wav(&p, &tone(hz, 0.75 + 0.1 * i as f64, rate, 0.3), rate).unwrap();
            }
        }
    }
}

#[test]
fn ingest_enumerates_and_resamples() {
    let dir = tempfile::tempdir().unwrap();
    write_tree(dir.path(), 8_000);
    let out = ingest_wav_dir(dir.path(), "tones", false).unwrap();
    assert_eq!(out.clips.len(), 18);
    assert!(out.skipped.is_empty());
    for c in &out.clips {
        assert_eq!(c.sample_rate, 16_000);
        let i: usize = c.clip_id.rsplit('/').next().unwrap().parse().unwrap();
        let n8 = ((0.75 + 0.1 * i as f64) * 8_000.0) as usize;
        assert!((c.samples.len() as i64 - 2 * n8 as i64).abs() <= 1);
        assert!(["low", "high"].contains(&c.label.as_str()));
        assert!(c.clip_id.starts_with(&format!("tones/{}/{}/", c.split, c.label)));
    }
}

#[test]
fn resampled_tone_keeps_its_frequency() {
    // independent check: zero crossings of an upsampled 440 Hz tone
    let y = resample(&tone(440.0, 1.0, 8_000, 0.5), 8_000, 16_000);
    assert_eq!(y.len(), 16_000);
    let crossings = y[100..15_900].windows(2).filter(|w| w[0] < 0.0 && w[1] >= 0.0).count();
    assert!((crossings as f64 - 440.0 * 15_800.0 / 16_000.0).abs() <= 1.0);
}

#[test]
fn ingest_errors() {
    let dir = tempfile::tempdir().unwrap();
    write_tree(dir.path(), 16_000);
    std::fs::remove_dir_all(dir.path().join("dev")).unwrap();
    std::fs::create_dir_all(dir.path().join("dev/low")).unwrap();
    let err = ingest_wav_dir(dir.path(), "t", false).unwrap_err();
    assert!(err.to_string().contains("split has no clips"));

    let dir = tempfile::tempdir().unwrap();
    write_tree(dir.path(), 16_000);
    std::fs::write(dir.path().join("train/low/bad.wav"), b"not a wav").unwrap();
    let stereo = hound::WavSpec {
        channels: 2,
        sample_rate: 16_000,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::create(dir.path().join("test/high/stereo.wav"), stereo).unwrap();
    for _ in 0..32_000 {
        w.write_sample(0i16).unwrap();
    }
    w.finalize().unwrap();
    match ingest_wav_dir(dir.path(), "t", false) {
        Err(Error::BadWavFiles(list)) => assert_eq!(list.len(), 2),
        other => panic!("expected bad files, got {other:?}"),
    }
    let out = ingest_wav_dir(dir.path(), "t", true).unwrap();
    assert_eq!(out.clips.len(), 18);
    assert_eq!(out.skipped.len(), 2);
}

// Autocorrelation pitch per 40 ms frame, voiced frames only.
fn pitch_track(x: &[f32]) -> Vec<(f64, f64)> {
    let (sr, win, hop) = (16_000.0, 640usize, 160usize);
    let (min_lag, max_lag) = ((sr / 400.0) as usize, (sr / 60.0) as usize);
    let mut out = Vec::new();
    let mut start = 0;
    while start + win + max_lag <= x.len() {
        let f = &x[start..start + win + max_lag];
        let r = |lag: usize| (0..win).map(|n| f[n] as f64 * f[n + lag] as f64).sum::<f64>();
        let r0 = r(0);
        if r0 > 1e-4 {
            let rs: Vec<f64> = (min_lag..=max_lag).map(r).collect();
            let best = rs.iter().cloned().fold(f64::MIN, f64::max);
            // shortest lag near the top peak, so period multiples do not win
            let lag = min_lag + rs.iter().position(|&v| v >= 0.9 * best).unwrap();
            if best > 0.5 * r0 {
                out.push((start as f64 / sr, (sr / lag as f64).log2()));
            }
        }
        start += hop;
    }
    out
}

fn slope(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let (mx, my) = (
        points.iter().map(|p| p.0).sum::<f64>() / n,
        points.iter().map(|p| p.1).sum::<f64>() / n,
    );
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    sxy / sxx
}

#[test]
fn prosody_classes_have_distinct_pitch_slopes() {
    let spec = SyntheticTaskSpec {
        task_id: "pros".into(),
        kind: GeneratorKind::Prosody,
        num_classes: 3,
        clips_per_class: SplitCounts {
            train: 4,
            dev: 0,
            test: 0,
        },
        class_weights: None,
        duration_s: (1.5, 2.0),
        seed: 5,
    };
    let clips = synthesize_corpus(&spec).unwrap();
    let mut by_label: std::collections::BTreeMap<String, Vec<f64>> = Default::default();
    for c in &clips {
        let track = pitch_track(&c.samples);
        assert!(track.len() > 20, "{} has too few voiced frames", c.clip_id);
        by_label.entry(c.label.clone()).or_default().push(slope(&track));
    }
    let mean = |l: &str| by_label[l].iter().sum::<f64>() / by_label[l].len() as f64;
    // octaves per second
    assert!(mean("rising") > 0.1, "rising {}", mean("rising"));
    assert!(mean("falling") < -0.1, "falling {}", mean("falling"));
    assert!(mean("flat").abs() < 0.05, "flat {}", mean("flat"));
}

#[test]
fn spoof_task_labels() {
    let spec = SyntheticTaskSpec {
        task_id: "sp".into(),
        kind: GeneratorKind::Spoof,
        num_classes: 2,
        clips_per_class: SplitCounts {
            train: 2,
            dev: 1,
            test: 1,
        },
        class_weights: None,
        duration_s: (0.5, 0.6),
        seed: 1,
    };
    let labels: std::collections::BTreeSet<String> =
        synthesize_corpus(&spec).unwrap().into_iter().map(|c| c.label).collect();
    assert_eq!(labels.into_iter().collect::<Vec<_>>(), ["bonafide", "spoof"]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn random_clips_give_finite_frames(seed in any::<u64>(), n in 400usize..20_000, bins in 8usize..96) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let scale: f32 = rng.gen_range(0.0..1.0);
        let x: Vec<f32> = (0..n).map(|_| rng.gen_range(-1.0f32..1.0) * scale).collect();
        let mel = MelFrontend::new(MelConfig::with_bins(bins)).compute(&x).unwrap();
        prop_assert_eq!(mel.frames.dim(), ((n - 400) / 160 + 1, bins));
        prop_assert!(mel.frames.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn split_depends_only_on_id(id in "[a-z0-9/-]{1,24}") {
        prop_assert_eq!(Split::for_clip_id(&id), Split::for_clip_id(&id.clone()));
    }
}
