//! Deterministic synthetic corpora standing in for real paralinguistic
//! datasets.
//!
//! Every generator is a source-filter model: a harmonic glottal source
//! shaped by a formant envelope, plus noise. What varies between classes
//! depends on the generator kind:
//!
//! * `speaker`: per-class fundamental, vocal-tract scale and spectral tilt;
//!   per clip the vowel sequence, intonation and noise are random.
//! * `prosody`: per-class pitch contour (rising, flat, falling, ...) and
//!   amplitude-modulation rate.
//! * `spoof`: `bonafide` clips carry cycle-level jitter and shimmer,
//!   `spoof` clips are perfectly periodic.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{stable_hash, AudioClip, Split, MAX_DURATION_S, MIN_DURATION_S, SAMPLE_RATE};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GeneratorKind {
    Speaker,
    Prosody,
    Spoof,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub dev: usize,
    pub test: usize,
}

impl SplitCounts {
    pub fn get(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::Dev => self.dev,
            Split::Test => self.test,
        }
    }

    pub fn total(&self) -> usize {
        self.train + self.dev + self.test
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTaskSpec {
    pub task_id: String,
    pub kind: GeneratorKind,
    pub num_classes: usize,
    pub clips_per_class: SplitCounts,
    /// Relative class sizes; when set, class `c` receives
    /// `round(clips_per_class · weight_c / max_weight)` clips per split.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_weights: Option<Vec<f64>>,
    /// Clip duration range in seconds.
    pub duration_s: (f64, f64),
    pub seed: u64,
}

impl SyntheticTaskSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |reason: &str| {
            Err(Error::InvalidTaskSpec {
                task_id: self.task_id.clone(),
                reason: reason.to_string(),
            })
        };
        if self.num_classes == 0 {
            return fail("zero classes");
        }
        if self.clips_per_class.total() == 0 {
            return fail("zero clips");
        }
        if self.kind == GeneratorKind::Spoof && self.num_classes != 2 {
            return fail("spoof task has exactly 2 classes");
        }
        let (lo, hi) = self.duration_s;
        if !(MIN_DURATION_S..=MAX_DURATION_S).contains(&lo) || !(lo..=MAX_DURATION_S).contains(&hi) {
            return fail("duration range outside [0.5, 30] s");
        }
        if let Some(w) = &self.class_weights {
            if w.len() != self.num_classes || w.iter().any(|&v| !(v > 0.0)) {
                return fail("class_weights must be positive, one per class");
            }
        }
        Ok(())
    }

    pub fn class_labels(&self) -> Vec<String> {
        match self.kind {
            GeneratorKind::Spoof => vec!["bonafide".into(), "spoof".into()],
            GeneratorKind::Speaker => (0..self.num_classes).map(|c| format!("spk{c:02}")).collect(),
            GeneratorKind::Prosody => (0..self.num_classes)
                .map(|c| {
                    let contour = Contour::for_class(c);
                    let am = c / Contour::COUNT;
                    if am == 0 {
                        contour.name().to_string()
                    } else {
                        format!("{}-am{am}", contour.name())
                    }
                })
                .collect(),
        }
    }

    fn quota(&self, class: usize, split: Split) -> usize {
        let base = self.clips_per_class.get(split);
        match &self.class_weights {
            None => base,
            Some(w) => {
                let max = w.iter().cloned().fold(f64::MIN, f64::max);
                (base as f64 * w[class] / max).round() as usize
            }
        }
    }
}

/// Generates the full corpus for one task. Pure in `spec`.
pub fn synthesize_corpus(spec: &SyntheticTaskSpec) -> Result<Vec<AudioClip>> {
    spec.validate()?;
    let labels = spec.class_labels();
    let mut clips = Vec::new();
    for (class, label) in labels.iter().enumerate() {
        let voice = ClassVoice::new(spec, class);
        let mut remaining: BTreeMap<Split, usize> = Split::ALL.iter().map(|&s| (s, spec.quota(class, s))).collect();
        let mut index = 0usize;
        while remaining.values().any(|&n| n > 0) {
            let clip_id = format!("{}-{}-{index:05}", spec.task_id, label);
            index += 1;
            let split = Split::for_clip_id(&clip_id);
            let left = remaining.get_mut(&split).unwrap();
            if *left == 0 {
                continue;
            }
            *left -= 1;
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ stable_hash(&clip_id));
            let (lo, hi) = spec.duration_s;
            let duration = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
            let n = (duration * SAMPLE_RATE as f64).round() as usize;
            let samples = voice.render(spec.kind, n, &mut rng);
            clips.push(AudioClip {
                clip_id,
                task_id: spec.task_id.clone(),
                label: label.clone(),
                split,
                sample_rate: SAMPLE_RATE,
                samples,
            });
        }
    }
    Ok(clips)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Contour {
    Rising,
    Flat,
    Falling,
    RiseFall,
    FallRise,
}

impl Contour {
    const COUNT: usize = 5;

    fn for_class(c: usize) -> Self {
        [Self::Rising, Self::Flat, Self::Falling, Self::RiseFall, Self::FallRise][c % Self::COUNT]
    }

    fn name(self) -> &'static str {
        match self {
            Self::Rising => "rising",
            Self::Flat => "flat",
            Self::Falling => "falling",
            Self::RiseFall => "risefall",
            Self::FallRise => "fallrise",
        }
    }

    /// Pitch offset in semitones at normalized time `u ∈ [0, 1]`.
    fn semitones(self, u: f64, depth: f64) -> f64 {
        match self {
            Self::Rising => depth * (u - 0.5),
            Self::Flat => 0.0,
            Self::Falling => -depth * (u - 0.5),
            Self::RiseFall => depth * (0.5 - 2.0 * (u - 0.5).abs()),
            Self::FallRise => -depth * (0.5 - 2.0 * (u - 0.5).abs()),
        }
    }
}

/// Shared vowel inventory (F1, F2, F3 in Hz for a neutral vocal tract).
const VOWELS: [[f64; 3]; 6] = [
    [730.0, 1090.0, 2440.0],
    [270.0, 2290.0, 3010.0],
    [530.0, 1840.0, 2480.0],
    [570.0, 840.0, 2410.0],
    [300.0, 870.0, 2240.0],
    [660.0, 1720.0, 2410.0],
];

/// Class-level voice parameters, drawn once per (task, class).
#[derive(Debug, Clone)]
struct ClassVoice {
    class: usize,
    f0: f64,
    tract_scale: f64,
    tilt: f64,
    breath: f64,
}

impl ClassVoice {
    fn new(spec: &SyntheticTaskSpec, class: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ stable_hash(&format!("{}#class{class}", spec.task_id)));
        match spec.kind {
            GeneratorKind::Speaker => Self {
                class,
                f0: 90.0 * 2f64.powf(rng.gen_range(0.0..1.4)),
                tract_scale: rng.gen_range(0.85..1.15),
                tilt: rng.gen_range(0.6..1.4),
                breath: rng.gen_range(0.01..0.08),
            },
            _ => Self {
                class,
                f0: 0.0,
                tract_scale: 1.0,
                tilt: 1.0,
                breath: 0.03,
            },
        }
    }

    fn render<R: Rng>(&self, kind: GeneratorKind, n: usize, rng: &mut R) -> Vec<f32> {
        let sr = SAMPLE_RATE as f64;
        let mut src = SourceParams {
            f0: vec![0.0; n],
            amp: vec![1.0; n],
            formants: vec![[0.0; 3]; n],
            jitter: 0.0,
            shimmer: 0.0,
            tilt: self.tilt,
        };
        let noise_level;
        match kind {
            GeneratorKind::Speaker => {
                let base = self.f0 * 2f64.powf(rng.gen_range(-0.1..0.1));
                let depth = rng.gen_range(-3.0..3.0);
                let vowels = vowel_track(n, rng, self.tract_scale);
                for i in 0..n {
                    let u = i as f64 / n as f64;
                    src.f0[i] = base * 2f64.powf(depth * (u - 0.5) / 12.0);
                    src.formants[i] = vowels[i];
                }
                syllable_envelope(&mut src.amp, rng.gen_range(3.0..6.0), rng);
                noise_level = self.breath;
            }
            GeneratorKind::Prosody => {
                let contour = Contour::for_class(self.class);
                let am_class = self.class / Contour::COUNT;
                let base = 100.0 * 2f64.powf(rng.gen_range(0.0..1.2));
                let depth = rng.gen_range(6.0..9.0);
                let scale = rng.gen_range(0.9..1.1);
                let vowels = vowel_track(n, rng, scale);
                for i in 0..n {
                    let u = i as f64 / n as f64;
                    src.f0[i] = base * 2f64.powf(contour.semitones(u, depth) / 12.0);
                    src.formants[i] = vowels[i];
                }
                let am_rate = 3.0 + 2.5 * am_class as f64 + rng.gen_range(-0.3..0.3);
                let am_phase = rng.gen_range(0.0..2.0 * PI);
                for (i, a) in src.amp.iter_mut().enumerate() {
                    let t = i as f64 / sr;
                    *a = 0.6 + 0.4 * (2.0 * PI * am_rate * t + am_phase).sin();
                }
                noise_level = rng.gen_range(0.01..0.04);
            }
            GeneratorKind::Spoof => {
                let bonafide = self.class == 0;
                let base = 100.0 * 2f64.powf(rng.gen_range(0.0..1.2));
                let depth = rng.gen_range(-4.0..4.0);
                let scale = rng.gen_range(0.9..1.1);
                let vowels = vowel_track(n, rng, scale);
                for i in 0..n {
                    let u = i as f64 / n as f64;
                    src.f0[i] = base * 2f64.powf(depth * (u - 0.5) / 12.0);
                    src.formants[i] = vowels[i];
                }
                if bonafide {
                    src.jitter = rng.gen_range(0.01..0.03);
                    src.shimmer = rng.gen_range(0.05..0.15);
                    syllable_envelope(&mut src.amp, rng.gen_range(3.0..6.0), rng);
                }
                noise_level = rng.gen_range(0.005..0.03);
            }
        }
        let mut out = harmonic_source(&src, rng);
        let normal = Normal::new(0.0, 1.0).unwrap();
        for v in out.iter_mut() {
            *v += noise_level * normal.sample(rng);
        }
        let peak = out.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-9);
        let gain = rng.gen_range(0.3..0.9) / peak;
        out.iter().map(|v| (v * gain) as f32).collect()
    }
}

struct SourceParams {
    f0: Vec<f64>,
    amp: Vec<f64>,
    formants: Vec<[f64; 3]>,
    /// Relative per-cycle f0 perturbation (std-dev).
    jitter: f64,
    /// Relative per-cycle amplitude perturbation (std-dev).
    shimmer: f64,
    tilt: f64,
}

/// Piecewise-constant vowel targets with 30 ms linear transitions.
fn vowel_track<R: Rng>(n: usize, rng: &mut R, scale: f64) -> Vec<[f64; 3]> {
    let sr = SAMPLE_RATE as f64;
    let mut targets = Vec::new();
    let mut pos = 0usize;
    while pos < n {
        let len = (rng.gen_range(0.10..0.25) * sr) as usize;
        let v = VOWELS[rng.gen_range(0..VOWELS.len())];
        targets.push((pos, [v[0] * scale, v[1] * scale, v[2] * scale]));
        pos += len.max(1);
    }
    let ramp = (0.03 * sr) as usize;
    let mut track = vec![[0.0; 3]; n];
    let mut seg = 0usize;
    for (i, slot) in track.iter_mut().enumerate() {
        while seg + 1 < targets.len() && targets[seg + 1].0 <= i {
            seg += 1;
        }
        let (start, cur) = targets[seg];
        let prev = if seg == 0 { cur } else { targets[seg - 1].1 };
        let w = ((i - start) as f64 / ramp as f64).min(1.0);
        for k in 0..3 {
            slot[k] = prev[k] + w * (cur[k] - prev[k]);
        }
    }
    track
}

fn syllable_envelope<R: Rng>(amp: &mut [f64], rate: f64, rng: &mut R) {
    let sr = SAMPLE_RATE as f64;
    let phase = rng.gen_range(0.0..2.0 * PI);
    for (i, a) in amp.iter_mut().enumerate() {
        let t = i as f64 / sr;
        *a = 0.55 + 0.45 * (2.0 * PI * rate * t + phase).sin();
    }
}

fn formant_gain(freq: f64, formants: &[f64; 3], tilt: f64) -> f64 {
    let mut g = 0.0;
    for (k, &f) in formants.iter().enumerate() {
        let bw = 60.0 + 40.0 * k as f64;
        let x = (freq - f) / bw;
        g += 1.0 / (1.0 + x * x) / (1.0 + k as f64);
    }
    g * (freq / 100.0).max(1.0).powf(-tilt)
}

/// Additive harmonic synthesis with per-cycle jitter and shimmer.
fn harmonic_source<R: Rng>(src: &SourceParams, rng: &mut R) -> Vec<f64> {
    let sr = SAMPLE_RATE as f64;
    let n = src.f0.len();
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut out = vec![0.0; n];
    let mut phase = 0.0f64;
    let mut cycle_f0 = 1.0;
    let mut cycle_amp = 1.0;
    for i in 0..n {
        let f0 = src.f0[i] * cycle_f0;
        phase += 2.0 * PI * f0 / sr;
        if phase >= 2.0 * PI {
            phase -= 2.0 * PI;
            if src.jitter > 0.0 {
                cycle_f0 = 1.0 + src.jitter * normal.sample(rng);
            }
            if src.shimmer > 0.0 {
                cycle_amp = (1.0 + src.shimmer * normal.sample(rng)).max(0.0);
            }
        }
        let harmonics = ((sr / 2.0 - 200.0) / f0).floor().max(1.0) as usize;
        // sin(kφ) by the Chebyshev recurrence
        let (s1, c1) = phase.sin_cos();
        let (mut s_prev, mut s_cur) = (0.0, s1);
        let mut acc = 0.0;
        for k in 1..=harmonics {
            acc += formant_gain(k as f64 * f0, &src.formants[i], src.tilt) * s_cur;
            let next = 2.0 * c1 * s_cur - s_prev;
            s_prev = s_cur;
            s_cur = next;
        }
        out[i] = acc * src.amp[i] * cycle_amp;
    }
    out
}
