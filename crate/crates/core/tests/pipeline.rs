use std::fs;
use std::path::Path;

use paraconf::pipeline::*;
use serde_json::{json, Value};

fn model(name: &str, steps: usize) -> Value {
    json!({
        "name": name,
        "config": {
            "mel_bins": 16,
            "featenc": {"kernels": [3, 3, 3], "strides": [2, 2, 1], "channels": [8, 8, 8]},
            "encoder": {"num_layers": 2, "num_heads": 2, "model_dim": 8, "ffn_expansion": 2, "conv_kernel": 4, "relative_attention": true}
        },
        "pretrain": {"steps": steps, "batch_size": 2, "checkpoint_every": 0}
    })
}

fn base() -> Value {
    json!({
        "version": 1,
        "seed": 3,
        "corpora": [
            {"synthetic": {"task_id": "pre", "kind": "speaker", "num_classes": 3,
                "clips_per_class": {"train": 2, "dev": 0, "test": 0}, "duration_s": [0.8, 1.0], "seed": 1},
             "pretrain": true},
            {"synthetic": {"task_id": "spk", "kind": "speaker", "num_classes": 3,
                "clips_per_class": {"train": 4, "dev": 2, "test": 2}, "duration_s": [0.8, 1.2], "seed": 2},
             "probe": "accuracy"}
        ],
        "models": [model("m", 2)],
        "policies": ["full"],
        "layers": [2],
        "probes": [{"classifier": "logreg"}],
        "analysis": {"attention_clips": 2, "cka_examples": 16}
    })
}

fn cfg(v: &Value) -> RunConfig {
    RunConfig::from_json(&v.to_string()).unwrap()
}

fn opts(dir: &Path) -> RunOptions {
    RunOptions {
        out: Some(dir.to_path_buf()),
        ..Default::default()
    }
}

fn cached(r: &RunReport, stage: Stage) -> Vec<bool> {
    r.stages.iter().filter(|s| s.stage == stage).map(|s| s.cached).collect()
}

#[test]
fn minimal_run_and_cached_rerun() {
    let dir = tempfile::tempdir().unwrap();
    let r = run(cfg(&base()), &opts(dir.path())).unwrap();
    let cached_probe: Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("models/m/probe.json")).unwrap()).unwrap();
    let probe: paraconf::probe::ProbeReport = serde_json::from_value(cached_probe["report"].clone()).unwrap();
    assert_eq!(probe.aggregates.len(), 1);
    assert_eq!(probe.aggregates[0].layer, 2);
    assert!(r.stages.iter().all(|s| !s.cached));
    let report = fs::read(dir.path().join("report.md")).unwrap();
    let json = fs::read(dir.path().join("report.json")).unwrap();

    let again = run(cfg(&base()), &opts(dir.path())).unwrap();
    for s in &again.stages {
        assert_eq!(s.cached, s.stage != Stage::Report, "{} {}", s.stage, s.unit);
    }
    assert_eq!(fs::read(dir.path().join("report.md")).unwrap(), report);
    assert_eq!(fs::read(dir.path().join("report.json")).unwrap(), json);
    let status: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("status.json")).unwrap()).unwrap();
    assert!(status["failed"].is_null());
    assert_eq!(status["completed"].as_array().unwrap().len(), Stage::ALL.len());
}

#[test]
fn changing_probes_reruns_only_downstream_stages() {
    let dir = tempfile::tempdir().unwrap();
    run(cfg(&base()), &opts(dir.path())).unwrap();
    let mut v = base();
    v["probes"] = json!([{"classifier": "lda", "shrinkage": 0.2}]);
    let r = run(cfg(&v), &opts(dir.path())).unwrap();
    assert_eq!(cached(&r, Stage::Synth), [true, true]);
    assert_eq!(cached(&r, Stage::Pretrain), [true]);
    assert_eq!(cached(&r, Stage::Extract), [true]);
    assert_eq!(cached(&r, Stage::Probe), [false]);
    assert_eq!(cached(&r, Stage::Analyze), [false]);
}

#[test]
fn two_models_give_cross_grids_and_disagreement() {
    let dir = tempfile::tempdir().unwrap();
    let mut v = base();
    v["models"] = json!([model("a", 2), model("b", 0)]);
    v["layers"] = Value::Null;
    let r = run(cfg(&v), &opts(dir.path())).unwrap();
    let s = r.summary.unwrap();
    assert_eq!(s.cka_diagonals.len(), 1);
    let d = s.disagreement.unwrap();
    assert_eq!(d.models, ["a", "b"]);
    assert_eq!(d.values.len(), 2);
    assert!(d.values.iter().all(|row| row.len() == 2));
    assert!(d.values[0][0].is_none() && d.values[1][1].is_none());
    let grid = fs::read_to_string(dir.path().join("analysis/cka_a__b.csv")).unwrap();
    assert_eq!(grid.lines().filter(|l| !l.starts_with('#')).count(), 4);
    assert!(dir.path().join("analysis/disagreement.csv").exists());
}

#[test]
fn chunk_longer_than_every_clip_matches_full_context() {
    let dir = tempfile::tempdir().unwrap();
    let mut v = base();
    v["policies"] = json!(["full", "chunk4s"]);
    let r = run(cfg(&v), &opts(dir.path())).unwrap();
    let sweep = r.summary.unwrap().sweep.unwrap();
    assert_eq!(sweep.ratios.len(), 1);
    assert!((sweep.ratios[0].ratio - 1.0).abs() <= 1e-6, "{}", sweep.ratios[0].ratio);
}

#[test]
fn failures_name_the_stage() {
    let dir = tempfile::tempdir().unwrap();
    let mut v = base();
    v["corpora"][1] = json!({"wav_dir": {"task_id": "gone", "path": dir.path().join("nowhere")}, "probe": "accuracy"});
    let (r, err) = run_until(cfg(&v), &opts(dir.path()), Stage::Report);
    let err = err.unwrap();
    assert!(err.to_string().starts_with("stage synth (gone) failed"), "{err}");
    assert_eq!(r.failed.as_ref().unwrap().stage, "synth (gone)");
    let status: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("status.json")).unwrap()).unwrap();
    assert_eq!(status["failed"]["stage"], "synth (gone)");
    assert_eq!(status["completed"].as_array().unwrap().len(), 0);

    let mut v = base();
    v["layers"] = json!([7]);
    assert!(RunConfig::from_json(&v.to_string()).is_err());
    let mut c = cfg(&base());
    c.layers = Some(vec![7]);
    let (_, err) = run_until(c, &opts(dir.path()), Stage::Report);
    assert!(err.unwrap().to_string().contains("synth (config)"));
}

#[test]
fn stops_at_the_requested_stage() {
    let dir = tempfile::tempdir().unwrap();
    let (r, err) = run_until(cfg(&base()), &opts(dir.path()), Stage::Extract);
    assert!(err.is_none());
    assert!(r.stages.iter().all(|s| s.stage <= Stage::Extract));
    assert!(dir.path().join("models/m/embeddings.bin").exists());
    assert!(!dir.path().join("report.md").exists());
}

#[test]
fn output_dir_is_not_part_of_the_fingerprint() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ra = run(cfg(&base()), &opts(a.path())).unwrap();
    let rb = run(cfg(&base()), &opts(b.path())).unwrap();
    assert_eq!(ra.fingerprint, rb.fingerprint);
    for f in [
        "models/m/checkpoint.bin",
        "models/m/embeddings.bin",
        "report.md",
        "report.json",
    ] {
        assert_eq!(
            fs::read(a.path().join(f)).unwrap(),
            fs::read(b.path().join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn shipped_configs_parse() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let smoke = RunConfig::load(&root.join("smoke.json")).unwrap();
    assert_eq!(smoke.policies.len(), 3);
    let desk = RunConfig::load(&root.join("desk.json")).unwrap();
    assert_eq!(desk.models[0].config, paraconf::model::ModelConfig::default());
    assert_eq!(
        desk.models[0].pretrain,
        paraconf::pretrain::PretrainConfig {
            checkpoint_every: 500,
            ..Default::default()
        }
    );
}
