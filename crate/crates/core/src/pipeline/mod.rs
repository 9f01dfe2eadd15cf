//! Declarative end-to-end runs: synthesize → pretrain → extract → probe →
//! analyze → report. Every stage writes a fingerprint next to its outputs
//! and is skipped when a later run asks for the same thing.

mod report;

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use report::{
    render_markdown, report_context_sweep, summarize, BestLayer, ContextLoss, ContextRatio, ContextSweep, ModelSummary,
    RunSummary, TaskScore, PUBLISHED_CONTEXT_REFERENCE,
};

use crate::analysis::{
    attention_csv, attention_profile, cka_csv, cka_grid, curves_csv, layer_curve, AttnDistanceProfile, CkaMatrix,
    LayerCurve,
};
use crate::error::{Error, Result};
use crate::extract::{extract_all, read_store, write_store, EmbeddingTable, WindowPolicy};
use crate::frontend::{
    ingest_wav_dir, log_mel, read_manifest, read_wav, stable_hash, synthesize_corpus, write_manifest, write_wav,
    AudioClip, ManifestEntry, SyntheticTaskSpec, SAMPLE_RATE,
};
use crate::io::write_atomic;
use crate::model::{hex_digest, EncoderModel, ModelConfig};
use crate::pretrain::{train, Checkpoint, PretrainConfig};
use crate::probe::{
    disagreement_matrix, probe_csv, run_benchmark, write_predictions_jsonl, DisagreementMatrix, MetricKind,
    ModelPredictions, ProbeReport, ProbeSpec, ProbeTask,
};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Synth,
    Pretrain,
    Extract,
    Probe,
    Analyze,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 6] = [
        Stage::Synth,
        Stage::Pretrain,
        Stage::Extract,
        Stage::Probe,
        Stage::Analyze,
        Stage::Report,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Synth => "synth",
            Stage::Pretrain => "pretrain",
            Stage::Extract => "extract",
            Stage::Probe => "probe",
            Stage::Analyze => "analyze",
            Stage::Report => "report",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown stage {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WavSource {
    pub task_id: String,
    /// Root of a `<split>/<label>/*.wav` tree.
    pub path: PathBuf,
}

/// One corpus: either generated or read from disk. `pretrain` adds all of
/// its clips to the pretraining set; `probe` makes it a labelled task
/// scored with the given metric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusEntry {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticTaskSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wav_dir: Option<WavSource>,
    #[serde(default)]
    pub pretrain: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub probe: Option<MetricKind>,
}

impl CorpusEntry {
    pub fn task_id(&self) -> &str {
        match (&self.synthetic, &self.wav_dir) {
            (Some(s), _) => &s.task_id,
            (None, Some(w)) => &w.task_id,
            (None, None) => "",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelEntry {
    pub name: String,
    #[serde(default)]
    pub config: ModelConfig,
    /// `steps: 0` keeps the random initialization.
    #[serde(default)]
    pub pretrain: PretrainConfig,
    /// Overrides the run seed for this model's initialization and training.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisConfig {
    pub attention_clips: usize,
    pub cka_examples: usize,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            attention_clips: 8,
            cka_examples: 256,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    pub corpora: Vec<CorpusEntry>,
    pub models: Vec<ModelEntry>,
    #[serde(default = "default_policies")]
    pub policies: Vec<WindowPolicy>,
    /// Layers to extract and probe; all of `0..=L` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layers: Option<Vec<usize>>,
    #[serde(default = "ProbeSpec::standard_set")]
    pub probes: Vec<ProbeSpec>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub analysis: AnalysisConfig,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

fn default_policies() -> Vec<WindowPolicy> {
    vec![WindowPolicy::Full]
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs/default")
}

fn valid_name(name: &str) -> bool {
    !name.is_empty()
        && name != "."
        && name != ".."
        && name.chars().all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c))
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::Config(format!(
                "config version {} is not supported (expected {CONFIG_VERSION})",
                self.version
            )));
        }
        let mut tasks = BTreeMap::new();
        for c in &self.corpora {
            if c.synthetic.is_some() == c.wav_dir.is_some() {
                return Err(Error::Config(
                    "each corpus needs exactly one of `synthetic` and `wav_dir`".into(),
                ));
            }
            if let Some(s) = &c.synthetic {
                s.validate()?;
            }
            let id = c.task_id();
            if !valid_name(id) {
                return Err(Error::Config(format!("task id {id:?} must be [A-Za-z0-9._-]+")));
            }
            if tasks.insert(id.to_string(), ()).is_some() {
                return Err(Error::Config(format!("duplicate task id {id}")));
            }
            if !c.pretrain && c.probe.is_none() {
                return Err(Error::Config(format!(
                    "corpus {id} is used neither for pretraining nor probing"
                )));
            }
        }
        if !self.corpora.iter().any(|c| c.pretrain) {
            return Err(Error::Config("no corpus is marked for pretraining".into()));
        }
        if !self.corpora.iter().any(|c| c.probe.is_some()) {
            return Err(Error::Config("no corpus is marked for probing".into()));
        }
        if self.models.is_empty() {
            return Err(Error::Config("no models".into()));
        }
        let mut names = BTreeMap::new();
        for m in &self.models {
            if !valid_name(&m.name) {
                return Err(Error::Config(format!(
                    "model name {:?} must be [A-Za-z0-9._-]+",
                    m.name
                )));
            }
            if names.insert(m.name.clone(), ()).is_some() {
                return Err(Error::Config(format!("duplicate model name {}", m.name)));
            }
            m.config.validate()?;
            m.pretrain.validate()?;
            if let Some(layers) = &self.layers {
                if let Some(l) = layers.iter().find(|&&l| l > m.config.encoder.num_layers) {
                    return Err(Error::Config(format!(
                        "layer {l} is out of range for model {} (0..={})",
                        m.name, m.config.encoder.num_layers
                    )));
                }
            }
        }
        if self.layers.as_ref().is_some_and(|l| l.is_empty()) {
            return Err(Error::Config("layer set is empty".into()));
        }
        if self.policies.is_empty() {
            return Err(Error::Config("no window policies".into()));
        }
        for (i, p) in self.policies.iter().enumerate() {
            if self.policies[..i].contains(p) {
                return Err(Error::Config(format!("duplicate window policy {p}")));
            }
        }
        if self.probes.is_empty() {
            return Err(Error::Config("no probe specs".into()));
        }
        for p in &self.probes {
            p.validate()?;
        }
        Ok(())
    }

    /// Stable hash of everything except the output directory.
    pub fn fingerprint(&self) -> String {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        hex_digest(serde_json::to_string(&c).expect("config serializes").as_bytes())
    }

    pub fn model_seed(&self, model: &ModelEntry) -> u64 {
        model.seed.unwrap_or(self.seed)
    }

    pub fn layers_for(&self, model: &ModelEntry) -> Vec<usize> {
        match &self.layers {
            Some(l) => {
                let mut l = l.clone();
                l.sort_unstable();
                l.dedup();
                l
            }
            None => (0..=model.config.encoder.num_layers).collect(),
        }
    }

    pub fn probe_tasks(&self) -> Vec<ProbeTask> {
        self.corpora
            .iter()
            .filter_map(|c| {
                c.probe.map(|metric| ProbeTask {
                    task_id: c.task_id().to_string(),
                    metric,
                })
            })
            .collect()
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub skip_bad: bool,
}

impl RunOptions {
    pub fn apply(&self, cfg: &mut RunConfig) {
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(o) = &self.out {
            cfg.output_dir = o.clone();
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: Stage,
    /// Task or model the record is about, empty for run-wide stages.
    pub unit: String,
    pub cached: bool,
    pub seconds: f64,
    /// Relative to the output directory.
    pub outputs: Vec<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageFailure {
    pub stage: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub fingerprint: String,
    pub output_dir: PathBuf,
    pub stages: Vec<StageRecord>,
    pub failed: Option<StageFailure>,
    pub warnings: Vec<String>,
    pub summary: Option<RunSummary>,
}

impl RunReport {
    pub fn wall_clock(&self) -> f64 {
        self.stages.iter().map(|s| s.seconds).sum()
    }
}

#[derive(Serialize, Deserialize)]
struct Stamp {
    fingerprint: String,
}

fn read_stamp(path: &Path) -> Option<String> {
    let text = fs::read_to_string(path).ok()?;
    serde_json::from_str::<Stamp>(&text).ok().map(|s| s.fingerprint)
}

fn write_stamp(path: &Path, fingerprint: &str) -> Result<()> {
    let s = serde_json::to_vec(&Stamp {
        fingerprint: fingerprint.to_string(),
    })?;
    write_atomic(path, &s)
}

fn digest<S: Serialize>(value: &S) -> String {
    hex_digest(serde_json::to_string(value).expect("serializable").as_bytes())
}

#[derive(Serialize, Deserialize)]
struct CachedProbe {
    fingerprint: String,
    report: ProbeReport,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AnalysisResults {
    pub cka: Vec<CkaMatrix>,
    pub attention: Vec<AttnDistanceProfile>,
    pub curves: Vec<LayerCurve>,
    pub disagreement: Option<DisagreementMatrix>,
}

#[derive(Serialize, Deserialize)]
struct CachedAnalysis {
    fingerprint: String,
    results: AnalysisResults,
}

struct LoadedCorpus {
    fingerprint: String,
    clips: Vec<AudioClip>,
}

struct Pipeline {
    cfg: RunConfig,
    fingerprint: String,
    root: PathBuf,
    skip_bad: bool,
    records: Vec<StageRecord>,
    warnings: Vec<String>,
    corpora: BTreeMap<String, LoadedCorpus>,
    pretrain_fps: Vec<String>,
    models: Vec<EncoderModel<f32>>,
    extract_fps: Vec<String>,
    tables: Vec<EmbeddingTable>,
    probe_fps: Vec<String>,
    probes: Vec<ProbeReport>,
    analysis: Option<AnalysisResults>,
    summary: Option<RunSummary>,
}

fn rel(root: &Path, p: &Path) -> PathBuf {
    p.strip_prefix(root)
        .map(Path::to_path_buf)
        .unwrap_or_else(|_| p.to_path_buf())
}

fn stage_err(stage: Stage, unit: &str, e: Error) -> Error {
    let stage = if unit.is_empty() {
        stage.to_string()
    } else {
        format!("{stage} ({unit})")
    };
    Error::Stage {
        stage,
        source: Box::new(e),
    }
}

/// Clips listed in a manifest, read back from their WAV files.
fn load_manifest_clips(dir: &Path) -> Result<Vec<AudioClip>> {
    read_manifest(&dir.join("manifest.jsonl"))?
        .into_iter()
        .map(|e| {
            let path = e
                .path
                .as_ref()
                .ok_or_else(|| Error::Invalid(format!("manifest entry {} has no path", e.clip_id)))?;
            let (samples, rate) = read_wav(&dir.join(path))?;
            if rate != SAMPLE_RATE {
                return Err(Error::InvalidClip {
                    clip_id: e.clip_id,
                    reason: format!("sample rate {rate}"),
                });
            }
            Ok(AudioClip {
                clip_id: e.clip_id,
                task_id: e.task_id,
                label: e.label,
                split: e.split,
                sample_rate: rate,
                samples,
            })
        })
        .collect()
}

fn write_synthetic(dir: &Path, spec: &SyntheticTaskSpec) -> Result<()> {
    let clips = synthesize_corpus(spec)?;
    let entries: Vec<ManifestEntry> = clips
        .par_iter()
        .map(|c| {
            let path = format!("{}/{}/{}.wav", c.split, c.label, c.clip_id);
            write_wav(&dir.join(&path), &c.samples, c.sample_rate)?;
            Ok(ManifestEntry {
                path: Some(path),
                ..c.manifest_entry()
            })
        })
        .collect::<Result<_>>()?;
    write_manifest(&dir.join("manifest.jsonl"), &entries)
}

fn clip_digest(clips: &[AudioClip]) -> String {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    for c in clips {
        h.update(c.clip_id.as_bytes());
        h.update(c.label.as_bytes());
        for s in &c.samples {
            h.update(s.to_le_bytes());
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

impl Pipeline {
    fn new(cfg: RunConfig, skip_bad: bool) -> Self {
        Self {
            fingerprint: cfg.fingerprint(),
            root: cfg.output_dir.clone(),
            skip_bad,
            cfg,
            records: Vec::new(),
            warnings: Vec::new(),
            corpora: BTreeMap::new(),
            pretrain_fps: Vec::new(),
            models: Vec::new(),
            extract_fps: Vec::new(),
            tables: Vec::new(),
            probe_fps: Vec::new(),
            probes: Vec::new(),
            analysis: None,
            summary: None,
        }
    }

    fn record(&mut self, stage: Stage, unit: &str, cached: bool, started: Instant, outputs: &[PathBuf]) {
        let root = self.root.clone();
        self.records.push(StageRecord {
            stage,
            unit: unit.to_string(),
            cached,
            seconds: started.elapsed().as_secs_f64(),
            outputs: outputs.iter().map(|p| rel(&root, p)).collect(),
        });
    }

    fn model_dir(&self, i: usize) -> PathBuf {
        self.root.join("models").join(&self.cfg.models[i].name)
    }

    fn synth(&mut self) -> Result<()> {
        let corpora = self.cfg.corpora.clone();
        for c in &corpora {
            let id = c.task_id().to_string();
            let started = Instant::now();
            let (loaded, cached, outputs) = self.load_corpus(c).map_err(|e| stage_err(Stage::Synth, &id, e))?;
            log::info!(
                "synth {id}: {} clips{}",
                loaded.clips.len(),
                if cached { " (cached)" } else { "" }
            );
            self.record(Stage::Synth, &id, cached, started, &outputs);
            self.corpora.insert(id, loaded);
        }
        Ok(())
    }

    fn load_corpus(&mut self, c: &CorpusEntry) -> Result<(LoadedCorpus, bool, Vec<PathBuf>)> {
        if let Some(spec) = &c.synthetic {
            let dir = self.root.join("data").join(&spec.task_id);
            let fp = digest(spec);
            let stamp = dir.join("stage.json");
            let cached = read_stamp(&stamp).as_deref() == Some(fp.as_str());
            if !cached {
                if dir.exists() {
                    fs::remove_dir_all(&dir)?;
                }
                write_synthetic(&dir, spec)?;
                write_stamp(&stamp, &fp)?;
            }
            let clips = load_manifest_clips(&dir)?;
            Ok((
                LoadedCorpus { fingerprint: fp, clips },
                cached,
                vec![dir.join("manifest.jsonl"), stamp],
            ))
        } else {
            let src = c.wav_dir.as_ref().expect("validated");
            let outcome = ingest_wav_dir(&src.path, &src.task_id, self.skip_bad)?;
            for (p, e) in &outcome.skipped {
                self.warnings.push(format!("skipped {}: {e}", p.display()));
            }
            let fp = hex_digest(format!("{}:{}", src.task_id, clip_digest(&outcome.clips)).as_bytes());
            Ok((
                LoadedCorpus {
                    fingerprint: fp,
                    clips: outcome.clips,
                },
                false,
                Vec::new(),
            ))
        }
    }

    fn pretrain(&mut self) -> Result<()> {
        let corpus_fps: Vec<&str> = self
            .cfg
            .corpora
            .iter()
            .filter(|c| c.pretrain)
            .map(|c| self.corpora[c.task_id()].fingerprint.as_str())
            .collect();
        let clips: Vec<&AudioClip> = self
            .cfg
            .corpora
            .iter()
            .filter(|c| c.pretrain)
            .flat_map(|c| self.corpora[c.task_id()].clips.iter())
            .collect();
        let results = (0..self.cfg.models.len())
            .into_par_iter()
            .map(|i| {
                let entry = &self.cfg.models[i];
                let started = Instant::now();
                let dir = self.model_dir(i);
                let pcfg = PretrainConfig {
                    seed: self.cfg.model_seed(entry),
                    ..entry.pretrain.clone()
                };
                let ckpt_fp = pcfg.fingerprint(&entry.config);
                let fp = digest(&(&ckpt_fp, &corpus_fps));
                let stamp = dir.join("pretrain.json");
                let ckpt_path = dir.join("checkpoint.bin");
                let run = || -> Result<(EncoderModel<f32>, bool)> {
                    if read_stamp(&stamp).as_deref() == Some(fp.as_str()) {
                        if let Ok(c) = Checkpoint::load(&ckpt_path, Some(&ckpt_fp)) {
                            if c.step as usize == pcfg.steps {
                                return Ok((c.model, true));
                            }
                        }
                    }
                    let mels = clips
                        .iter()
                        .map(|c| log_mel(c, entry.config.mel_bins).map(|m| m.frames))
                        .collect::<Result<Vec<_>>>()?;
                    let out = train(&entry.config, &pcfg, &mels, Some(&dir))?;
                    log::info!(
                        "pretrain {}: {} steps, final contrastive accuracy {:.3}",
                        entry.name,
                        pcfg.steps,
                        out.final_accuracy(50)
                    );
                    write_stamp(&stamp, &fp)?;
                    Ok((out.checkpoint.model, false))
                };
                let (model, cached) = run().map_err(|e| stage_err(Stage::Pretrain, &entry.name, e))?;
                let outputs = vec![ckpt_path.clone(), dir.join("metrics.csv"), stamp.clone()];
                Ok((model, fp, cached, started, outputs))
            })
            .collect::<Vec<Result<_>>>();
        for (i, r) in results.into_iter().enumerate() {
            let (model, fp, cached, started, outputs) = r?;
            let name = self.cfg.models[i].name.clone();
            self.record(Stage::Pretrain, &name, cached, started, &outputs);
            self.models.push(model);
            self.pretrain_fps.push(fp);
        }
        Ok(())
    }

    fn probe_clips(&self) -> Vec<AudioClip> {
        self.cfg
            .corpora
            .iter()
            .filter(|c| c.probe.is_some())
            .flat_map(|c| self.corpora[c.task_id()].clips.iter().cloned())
            .collect()
    }

    fn extract(&mut self) -> Result<()> {
        let clips = self.probe_clips();
        let task_fps: Vec<(&str, &str)> = self
            .cfg
            .corpora
            .iter()
            .filter(|c| c.probe.is_some())
            .map(|c| (c.task_id(), self.corpora[c.task_id()].fingerprint.as_str()))
            .collect();
        let results = (0..self.cfg.models.len())
            .into_par_iter()
            .map(|i| {
                let entry = &self.cfg.models[i];
                let started = Instant::now();
                let dir = self.model_dir(i);
                let layers = self.cfg.layers_for(entry);
                let fp = digest(&(&self.pretrain_fps[i], &task_fps, &layers, &self.cfg.policies));
                let (bin, manifest) = (dir.join("embeddings.bin"), dir.join("embeddings.jsonl"));
                let run = || -> Result<(EmbeddingTable, bool)> {
                    if let Ok(t) = read_store(&bin, &manifest, Some(&fp)) {
                        return Ok((t, true));
                    }
                    let (table, n) = extract_all(&clips, &self.models[i], &layers, &self.cfg.policies, None)?;
                    log::info!("extract {}: {n} embeddings", entry.name);
                    write_store(&bin, &manifest, &table, &fp)?;
                    Ok((table, false))
                };
                let (table, cached) = run().map_err(|e| stage_err(Stage::Extract, &entry.name, e))?;
                Ok((table, fp, cached, started, vec![bin.clone(), manifest.clone()]))
            })
            .collect::<Vec<Result<_>>>();
        for (i, r) in results.into_iter().enumerate() {
            let (table, fp, cached, started, outputs) = r?;
            let name = self.cfg.models[i].name.clone();
            self.record(Stage::Extract, &name, cached, started, &outputs);
            self.tables.push(table);
            self.extract_fps.push(fp);
        }
        Ok(())
    }

    fn probe(&mut self) -> Result<()> {
        let tasks = self.cfg.probe_tasks();
        let results = (0..self.cfg.models.len())
            .into_par_iter()
            .map(|i| {
                let entry = &self.cfg.models[i];
                let started = Instant::now();
                let dir = self.model_dir(i);
                let fp = digest(&(&self.extract_fps[i], &tasks, &self.cfg.probes));
                let (json, csv, preds) = (
                    dir.join("probe.json"),
                    dir.join("probe.csv"),
                    dir.join("predictions.jsonl"),
                );
                let run = || -> Result<(ProbeReport, bool)> {
                    if let Ok(text) = fs::read_to_string(&json) {
                        if let Ok(c) = serde_json::from_str::<CachedProbe>(&text) {
                            if c.fingerprint == fp {
                                return Ok((c.report, true));
                            }
                        }
                    }
                    let report = run_benchmark(&self.tables[i], &tasks, &self.cfg.probes)?;
                    write_atomic(&csv, probe_csv(&report, &fp).as_bytes())?;
                    let sets: Vec<_> = report.predictions.iter().collect();
                    write_predictions_jsonl(&preds, &entry.name, &sets, &fp)?;
                    let cached = CachedProbe {
                        fingerprint: fp.clone(),
                        report,
                    };
                    write_atomic(&json, &serde_json::to_vec(&cached)?)?;
                    Ok((cached.report, false))
                };
                let (report, cached) = run().map_err(|e| stage_err(Stage::Probe, &entry.name, e))?;
                Ok((
                    report,
                    fp,
                    cached,
                    started,
                    vec![csv.clone(), preds.clone(), json.clone()],
                ))
            })
            .collect::<Vec<Result<_>>>();
        for (i, r) in results.into_iter().enumerate() {
            let (report, fp, cached, started, outputs) = r?;
            let name = self.cfg.models[i].name.clone();
            self.record(Stage::Probe, &name, cached, started, &outputs);
            self.probes.push(report);
            self.probe_fps.push(fp);
        }
        Ok(())
    }

    /// The policy used for single-policy views: full context when present.
    fn primary_policy(&self) -> WindowPolicy {
        if self.cfg.policies.contains(&WindowPolicy::Full) {
            WindowPolicy::Full
        } else {
            self.cfg.policies[0]
        }
    }

    /// Test clips of all probe tasks in a fixed pseudo-random order.
    fn analysis_clip_ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = self
            .probe_clips()
            .into_iter()
            .filter(|c| c.split == crate::frontend::Split::Test)
            .map(|c| c.clip_id)
            .collect();
        ids.sort_by_key(|id| (stable_hash(id), id.clone()));
        ids
    }

    fn layer_matrices(&self, i: usize, ids: &[String]) -> Result<Vec<ndarray::Array2<f64>>> {
        let policy = self.primary_policy();
        let table = &self.tables[i];
        let pos: BTreeMap<&str, usize> = ids.iter().enumerate().map(|(k, id)| (id.as_str(), k)).collect();
        let layers = table.layers();
        layers
            .iter()
            .map(|&l| {
                let mut m = ndarray::Array2::<f64>::zeros((ids.len(), table.dim));
                let mut seen = 0;
                for r in table.rows.iter().filter(|r| r.layer == l && r.policy == policy) {
                    if let Some(&k) = pos.get(r.clip_id.as_str()) {
                        m.row_mut(k).iter_mut().zip(&r.vector).for_each(|(a, &b)| *a = b as f64);
                        seen += 1;
                    }
                }
                if seen != ids.len() {
                    return Err(Error::Store(format!("layer {l} is missing analysis clips")));
                }
                Ok(m)
            })
            .collect()
    }

    fn analyze(&mut self) -> Result<()> {
        let started = Instant::now();
        let dir = self.root.join("analysis");
        let fp = digest(&(&self.fingerprint, &self.probe_fps));
        let cache = dir.join("analysis.json");
        let mut outputs = vec![cache.clone()];
        let cached = fs::read_to_string(&cache)
            .ok()
            .and_then(|t| serde_json::from_str::<CachedAnalysis>(&t).ok())
            .filter(|c| c.fingerprint == fp);
        let (results, was_cached) = match cached {
            Some(c) => (c.results, true),
            None => (
                self.compute_analysis().map_err(|e| stage_err(Stage::Analyze, "", e))?,
                false,
            ),
        };
        let run_fp = self.fingerprint.clone();
        let write = |name: String, text: String, outputs: &mut Vec<PathBuf>| -> Result<()> {
            let p = dir.join(name);
            write_atomic(&p, text.as_bytes())?;
            outputs.push(p);
            Ok(())
        };
        let emit = || -> Result<Vec<PathBuf>> {
            let mut out = Vec::new();
            for m in &results.cka {
                let name = if m.model_a == m.model_b {
                    format!("cka_{}.csv", m.model_a)
                } else {
                    format!("cka_{}__{}.csv", m.model_a, m.model_b)
                };
                write(name, cka_csv(m, &run_fp), &mut out)?;
            }
            for p in &results.attention {
                write(
                    format!("attention_{}.csv", p.model),
                    attention_csv(p, &run_fp),
                    &mut out,
                )?;
            }
            write(
                "layer_curves.csv".into(),
                curves_csv(&results.curves, &run_fp),
                &mut out,
            )?;
            if let Some(d) = &results.disagreement {
                write(
                    "disagreement.csv".into(),
                    report::disagreement_csv(d, &run_fp),
                    &mut out,
                )?;
            }
            if !was_cached {
                let c = CachedAnalysis {
                    fingerprint: fp.clone(),
                    results: results.clone(),
                };
                write_atomic(&cache, &serde_json::to_vec(&c)?)?;
            }
            Ok(out)
        };
        outputs.extend(emit().map_err(|e| stage_err(Stage::Analyze, "", e))?);
        self.record(Stage::Analyze, "", was_cached, started, &outputs);
        self.analysis = Some(results);
        Ok(())
    }

    fn compute_analysis(&self) -> Result<AnalysisResults> {
        let names: Vec<&str> = self.cfg.models.iter().map(|m| m.name.as_str()).collect();
        let ids = self.analysis_clip_ids();
        let cka_ids: Vec<String> = ids.iter().take(self.cfg.analysis.cka_examples).cloned().collect();
        let mut cka = Vec::new();
        if cka_ids.len() >= 2 {
            let acts = (0..names.len())
                .map(|i| self.layer_matrices(i, &cka_ids))
                .collect::<Result<Vec<_>>>()?;
            for a in 0..names.len() {
                cka.push(cka_grid((names[a], names[a]), &acts[a], None)?);
                for b in a + 1..names.len() {
                    cka.push(cka_grid((names[a], names[b]), &acts[a], Some(&acts[b]))?);
                }
            }
        }

        let by_id: BTreeMap<String, AudioClip> =
            self.probe_clips().into_iter().map(|c| (c.clip_id.clone(), c)).collect();
        let attn_clips: Vec<&AudioClip> = ids
            .iter()
            .take(self.cfg.analysis.attention_clips)
            .map(|id| &by_id[id])
            .collect();
        let mut attention = Vec::new();
        if !attn_clips.is_empty() {
            for (i, model) in self.models.iter().enumerate() {
                let mels = attn_clips
                    .iter()
                    .map(|c| log_mel(c, model.config.mel_bins))
                    .collect::<Result<Vec<_>>>()?;
                attention.push(attention_profile(names[i], model, &mels)?);
            }
        }

        let policy = self.primary_policy();
        let mut curves = Vec::new();
        for (i, rep) in self.probes.iter().enumerate() {
            let scores: Vec<f64> = rep
                .aggregates
                .iter()
                .filter(|a| a.policy == policy)
                .map(|a| a.test)
                .collect();
            curves.push(layer_curve(names[i], &scores)?);
        }

        let disagreement = if names.len() >= 2 {
            let mut labels: BTreeMap<String, BTreeMap<String, String>> = BTreeMap::new();
            let mut models = Vec::new();
            for (i, rep) in self.probes.iter().enumerate() {
                let best = rep
                    .best_layer(policy)
                    .ok_or_else(|| Error::Invalid(format!("model {} has no aggregate scores", names[i])))?;
                let mut preds: ModelPredictions = BTreeMap::new();
                for set in rep
                    .predictions
                    .iter()
                    .filter(|s| s.layer == best.layer && s.policy == policy)
                {
                    let t = labels.entry(set.task.clone()).or_default();
                    let p = preds.entry(set.task.clone()).or_default();
                    for e in &set.examples {
                        t.insert(e.clip_id.clone(), e.label.clone());
                        p.insert(e.clip_id.clone(), e.predicted.clone());
                    }
                }
                models.push((names[i].to_string(), preds));
            }
            Some(disagreement_matrix(&models, &labels)?)
        } else {
            None
        };
        Ok(AnalysisResults {
            cka,
            attention,
            curves,
            disagreement,
        })
    }

    fn report(&mut self) -> Result<()> {
        let started = Instant::now();
        let build = || -> Result<(RunSummary, Vec<String>)> {
            let named: Vec<(&str, &ProbeReport)> = self
                .cfg
                .models
                .iter()
                .map(|m| m.name.as_str())
                .zip(self.probes.iter())
                .collect();
            report::summarize(
                &self.fingerprint,
                &self.cfg,
                self.primary_policy(),
                &named,
                self.analysis.as_ref().expect("analysis ran"),
            )
        };
        let (summary, warnings) = build().map_err(|e| stage_err(Stage::Report, "", e))?;
        for w in warnings {
            log::warn!("{w}");
            self.warnings.push(w);
        }
        let files = report::write_report_files(&self.root, &summary).map_err(|e| stage_err(Stage::Report, "", e))?;
        self.record(Stage::Report, "", false, started, &files);
        self.summary = Some(summary);
        Ok(())
    }

    fn run_stage(&mut self, stage: Stage) -> Result<()> {
        match stage {
            Stage::Synth => self.synth(),
            Stage::Pretrain => self.pretrain(),
            Stage::Extract => self.extract(),
            Stage::Probe => self.probe(),
            Stage::Analyze => self.analyze(),
            Stage::Report => self.report(),
        }
    }

    fn into_report(self, failed: Option<StageFailure>) -> RunReport {
        RunReport {
            fingerprint: self.fingerprint,
            output_dir: self.root,
            stages: self.records,
            failed,
            warnings: self.warnings,
            summary: self.summary,
        }
    }
}

/// Runs every stage up to and including `until`, reusing cached outputs.
/// The returned report is also written as `status.json` (without timings)
/// and `timings.json`; on failure it names the failing stage and carries
/// whatever finished before it.
pub fn run_until(mut cfg: RunConfig, opts: &RunOptions, until: Stage) -> (RunReport, Option<Error>) {
    opts.apply(&mut cfg);
    let mut p = Pipeline::new(cfg, opts.skip_bad);
    let mut error = None;
    if let Err(e) = p.cfg.validate() {
        error = Some(stage_err(Stage::Synth, "config", e));
    } else {
        for stage in Stage::ALL.into_iter().filter(|&s| s <= until) {
            log::info!("stage {stage}");
            if let Err(e) = p.run_stage(stage) {
                error = Some(e);
                break;
            }
        }
    }
    let failed = error.as_ref().map(|e| match e {
        Error::Stage { stage, source } => StageFailure {
            stage: stage.clone(),
            error: source.to_string(),
        },
        other => StageFailure {
            stage: "unknown".into(),
            error: other.to_string(),
        },
    });
    let report = p.into_report(failed);
    if let Err(e) = write_status(&report) {
        log::warn!("could not write run status: {e}");
    }
    (report, error)
}

pub fn run(cfg: RunConfig, opts: &RunOptions) -> Result<RunReport> {
    match run_until(cfg, opts, Stage::Report) {
        (r, None) => Ok(r),
        (_, Some(e)) => Err(e),
    }
}

#[derive(Serialize)]
struct Status<'a> {
    fingerprint: &'a str,
    completed: Vec<String>,
    failed: &'a Option<StageFailure>,
}

#[derive(Serialize)]
struct Timing<'a> {
    stage: Stage,
    unit: &'a str,
    cached: bool,
    seconds: f64,
}

fn write_status(r: &RunReport) -> Result<()> {
    let failed_stage = r.failed.as_ref().and_then(|f| f.stage.split(' ').next());
    let mut completed: Vec<String> = Vec::new();
    for s in &r.stages {
        let name = s.stage.to_string();
        if Some(name.as_str()) != failed_stage && !completed.contains(&name) {
            completed.push(name);
        }
    }
    let status = Status {
        fingerprint: &r.fingerprint,
        completed,
        failed: &r.failed,
    };
    write_atomic(&r.output_dir.join("status.json"), &serde_json::to_vec_pretty(&status)?)?;
    let timings: Vec<Timing> = r
        .stages
        .iter()
        .map(|s| Timing {
            stage: s.stage,
            unit: &s.unit,
            cached: s.cached,
            seconds: s.seconds,
        })
        .collect();
    write_atomic(
        &r.output_dir.join("timings.json"),
        &serde_json::to_vec_pretty(&timings)?,
    )
}
