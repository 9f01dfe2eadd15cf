//! One line per acceptance criterion. Run alone with
//! `cargo test -p paraconf-cli --test acceptance`; pass criterion numbers
//! as arguments to run a subset.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use ndarray::{Array2, Array3};
use paraconf::analysis::{linear_cka, mean_attention_distance, uniform_attention};
use paraconf::conformer::EncoderConfig;
use paraconf::extract::{extract_all, EmbeddingRow, EmbeddingTable, Extractor, WindowPolicy};
use paraconf::featenc::FeatEncConfig;
use paraconf::frontend::*;
use paraconf::model::{EncoderModel, ModelConfig};
use paraconf::params::Parameterized;
use paraconf::pipeline::{render_markdown, summarize, AnalysisResults, RunConfig, PUBLISHED_CONTEXT_REFERENCE};
use paraconf::pretrain::*;
use paraconf::probe::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, Box<dyn std::error::Error>>;

fn check(cond: bool, msg: impl Into<String>) -> Result<(), Box<dyn std::error::Error>> {
    if cond {
        Ok(())
    } else {
        Err(msg.into().into())
    }
}

fn randn(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
    // Box–Muller keeps this file free of extra distributions
    Array2::from_shape_fn((r, c), |_| {
        let (u, v): (f64, f64) = (rng.gen_range(f64::EPSILON..1.0), rng.gen());
        (-2.0 * u.ln()).sqrt() * (2.0 * std::f64::consts::PI * v).cos()
    })
}

fn c1_frame_rate() -> Outcome {
    let t = Instant::now();
    let clip = AudioClip {
        clip_id: "four".into(),
        task_id: "t".into(),
        label: "x".into(),
        split: Split::Train,
        sample_rate: 16_000,
        samples: (0..64_000).map(|n| (n as f32 * 0.07).sin() * 0.2).collect(),
    };
    let mel = log_mel(&clip, 80)?;
    check(
        mel.frames.dim() == (398, 80),
        format!("mel frames {:?}", mel.frames.dim()),
    )?;
    let model = EncoderModel::<f32>::new(&ModelConfig::default(), 0)?;
    let acts = model.encode(&mel, false)?;
    let want = 398usize.div_ceil(2).div_ceil(2);
    check(want == 100, "ceil arithmetic")?;
    for (l, a) in acts.layers.iter().enumerate() {
        check(a.nrows() == want, format!("layer {l} has {} frames", a.nrows()))?;
    }
    let secs = t.elapsed().as_secs_f64();
    check(secs < 1.0, format!("took {secs:.2}s"))?;
    Ok(format!("398 mel frames, 100 encoded frames, {secs:.2}s"))
}

fn c2_gradients() -> Outcome {
    let t = Instant::now();
    let mut worst = 0.0f64;
    let mut groups = 0;
    for (relative, seed) in [(true, 3u64), (false, 4)] {
        let cfg = ModelConfig {
            mel_bins: 8,
            featenc: FeatEncConfig::new(8),
            encoder: EncoderConfig {
                num_layers: 2,
                num_heads: 2,
                model_dim: 8,
                ffn_expansion: 2,
                conv_kernel: 4,
                relative_attention: relative,
                max_relative_offset: 5,
                dropout: 0.0,
                final_norm: true,
            },
        };
        let mut model = EncoderModel::<f64>::new(&cfg, seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        for (_, p) in model.params_mut() {
            for v in p.iter_mut() {
                *v += rng.gen_range(-0.1..0.1);
            }
        }
        let mel = Array2::from_shape_fn((46, 8), |_| rng.gen_range(-2.0..2.0));
        let t_enc = cfg.featenc.output_len(46);
        let masked = vec![1, 2, 3, 6, 7, 8, 10];
        let (distractors, reduced) = sample_distractors(masked.len(), 4, &mut rng);
        let plan = ClipPlan {
            mask: MaskPlan {
                len: t_enc,
                masked,
                span_starts: vec![1, 6, 9],
                span: 3,
            },
            distractors,
            reduced,
            dropout_seed: 0,
        };
        for g in check_gradients(&model, mel.view(), &plan, 0.1, 1e-5, 1e-6)? {
            groups += 1;
            worst = worst.max(g.max_rel_error);
            check(g.max_rel_error <= 1e-4, format!("{}: {:.3e}", g.name, g.max_rel_error))?;
        }
    }
    let secs = t.elapsed().as_secs_f64();
    check(secs < 120.0, format!("took {secs:.0}s"))?;
    Ok(format!(
        "{groups} parameter groups, worst relative error {worst:.2e}, T'=12"
    ))
}

fn c3_loss_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let m = rng.gen_range(2..30);
        let d = rng.gen_range(1..16);
        let k = rng.gen_range(1..m.min(11));
        let ctx = randn(&mut rng, m, d);
        let tgt = randn(&mut rng, m, d);
        let (lists, _) = sample_distractors(m, k, &mut rng);
        let got = contrastive_loss(ctx.view(), tgt.view(), &lists, 0.1)?.loss;
        let cos = |i: usize, j: usize| {
            let (a, b) = (ctx.row(i), tgt.row(j));
            a.dot(&b) / (a.dot(&a).sqrt() * b.dot(&b).sqrt())
        };
        let mut want = 0.0;
        for (i, l) in lists.iter().enumerate() {
            let num = (cos(i, i) / 0.1).exp();
            let den = num + l.iter().map(|&j| (cos(i, j) / 0.1).exp()).sum::<f64>();
            want -= (num / den).ln();
        }
        want /= m as f64;
        worst = worst.max((got - want).abs());
    }
    check(worst <= 1e-12, format!("max deviation {worst:.2e}"))?;
    // every candidate orthogonal to its context: all logits are 0
    for k in 1..=10usize {
        let m = k + 1;
        let ctx = Array2::from_shape_fn((m, 2 * m), |(i, j)| if j == i { 1.0 } else { 0.0 });
        let tgt = Array2::from_shape_fn((m, 2 * m), |(i, j)| if j == m + i { 1.0 } else { 0.0 });
        let lists: Vec<Vec<usize>> = (0..m).map(|i| (0..m).filter(|&j| j != i).collect()).collect();
        let l = contrastive_loss(ctx.view(), tgt.view(), &lists, 0.1)?;
        let want = (m as f64).ln();
        check(
            l.per_position.iter().all(|&v| v == want),
            format!("K={k}: {:?} vs {want}", l.per_position),
        )?;
    }
    Ok(format!(
        "100 cases, max deviation {worst:.1e}; orthogonal case exact for K=1..10"
    ))
}

fn c4_cka() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst_oracle = 0.0f64;
    for _ in 0..100 {
        let x = randn(&mut rng, 24, 5);
        let y = &x.dot(&randn(&mut rng, 5, 6)) * 0.5 + randn(&mut rng, 24, 6);
        let n = x.nrows();
        let h = Array2::from_shape_fn((n, n), |(i, j)| if i == j { 1.0 } else { 0.0 } - 1.0 / n as f64);
        let k = h.dot(&x.dot(&x.t())).dot(&h);
        let l = h.dot(&y.dot(&y.t())).dot(&h);
        let tr = |a: &Array2<f64>, b: &Array2<f64>| (a * &b.t()).sum();
        let oracle = tr(&k, &l) / (tr(&k, &k) * tr(&l, &l)).sqrt();
        let got = linear_cka(x.view(), y.view())?;
        worst_oracle = worst_oracle.max((got - oracle).abs());

        check((linear_cka(x.view(), x.view())? - 1.0).abs() <= 1e-9, "CKA(X,X) != 1")?;
        check((linear_cka(y.view(), x.view())? - got).abs() <= 1e-12, "asymmetric")?;
        let scaled = &x * rng.gen_range(0.01..100.0);
        check((linear_cka(scaled.view(), y.view())? - got).abs() <= 1e-9, "scale")?;
        // Householder reflection: orthogonal by construction
        let v = randn(&mut rng, 5, 1);
        let q = Array2::eye(5) - &(v.dot(&v.t()) * (2.0 / v.iter().map(|a| a * a).sum::<f64>()));
        check(
            (linear_cka(x.dot(&q).view(), y.view())? - got).abs() <= 1e-9,
            "orthogonal",
        )?;
    }
    check(worst_oracle <= 1e-10, format!("oracle deviation {worst_oracle:.2e}"))?;
    Ok(format!(
        "100 pairs, oracle deviation {worst_oracle:.1e}; identity, symmetry, invariances hold"
    ))
}

fn c5_metrics() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst = 0.0f64;
    for case in 0..100 {
        let n = rng.gen_range(10..200);
        let mut pos: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.5)).collect();
        pos[0] = true;
        pos[1] = false;
        let scores: Vec<f64> = pos
            .iter()
            .map(|&p| {
                let s: f64 = rng.gen_range(0.0..1.0) + if p { 0.5 } else { 0.0 };
                if case % 2 == 0 {
                    (s * 8.0).round() / 8.0
                } else {
                    s
                }
            })
            .collect();
        worst = worst.max((eer(&scores, &pos)? - eer_sweep(&scores, &pos)).abs());
    }
    check(worst <= 1e-9, format!("EER deviation {worst:.2e}"))?;

    let s = |v: &[&str]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>();
    // recalls: a 2/3, b 1/1 -> 5/6
    let u = uar(&s(&["a", "a", "b", "b"]), &s(&["a", "a", "a", "b"]))?;
    check((u - 5.0 / 6.0).abs() < 1e-15, format!("fixture 1 gave {u}"))?;
    // recalls: x 1/2, y 0/1, z 3/3 -> 1/2
    let u = uar(&s(&["x", "z", "x", "z", "z", "z"]), &s(&["x", "x", "y", "z", "z", "z"]))?;
    check((u - 0.5).abs() < 1e-15, format!("fixture 2 gave {u}"))?;
    for seed in 0..50u64 {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let classes = r.gen_range(2..5);
        let labels: Vec<usize> = (0..classes * r.gen_range(1..6)).map(|i| i % classes).collect();
        let pred: Vec<usize> = labels.iter().map(|_| r.gen_range(0..classes)).collect();
        check(
            uar(&pred, &labels)? == accuracy(&pred, &labels)?,
            "balanced UAR != accuracy",
        )?;
    }
    Ok(format!(
        "EER max deviation {worst:.1e} over 100 sets; UAR fixtures exact"
    ))
}

// every distinct score (and +inf) as threshold, linear crossing of FAR and FRR
fn eer_sweep(scores: &[f64], pos: &[bool]) -> f64 {
    let mut th: Vec<f64> = scores.to_vec();
    th.sort_by(f64::total_cmp);
    th.dedup();
    th.push(f64::INFINITY);
    let np = pos.iter().filter(|&&p| p).count() as f64;
    let nn = pos.len() as f64 - np;
    let pts: Vec<(f64, f64)> = th
        .iter()
        .map(|&t| {
            let fa = scores.iter().zip(pos).filter(|(&s, &p)| !p && s >= t).count() as f64 / nn;
            let fr = scores.iter().zip(pos).filter(|(&s, &p)| p && s < t).count() as f64 / np;
            (fa, fr)
        })
        .collect();
    for w in pts.windows(2) {
        let (a, b) = (w[0].0 - w[0].1, w[1].0 - w[1].1);
        if a == 0.0 {
            return w[0].0;
        }
        if a > 0.0 && b <= 0.0 {
            return w[0].0 + a / (a - b) * (w[1].0 - w[0].0);
        }
    }
    f64::NAN
}

fn c6_attention() -> Outcome {
    let uniform = mean_attention_distance(uniform_attention(1, 4).view(), 0.04)?[0];
    check((uniform - 0.05).abs() < 1e-15, format!("uniform T'=4 gave {uniform}s"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let (h, t) = (rng.gen_range(1..5), rng.gen_range(1..30));
        let mut a = Array3::from_shape_fn((h, t, t), |_| rng.gen_range(0.0..1.0f64));
        for mut row in a.lanes_mut(ndarray::Axis(2)) {
            let s = row.sum();
            row.mapv_inplace(|v| v / s);
        }
        let got = mean_attention_distance(a.view(), 0.04)?;
        for (k, g) in got.iter().enumerate() {
            let mut sum = 0.0;
            for i in 0..t {
                for j in 0..t {
                    sum += a[[k, i, j]] * (i as f64 - j as f64).abs();
                }
            }
            worst = worst.max((g - sum / t as f64 * 0.04).abs());
        }
    }
    check(worst <= 1e-12, format!("deviation {worst:.2e}"))?;
    Ok(format!(
        "uniform T'=4 gives {:.2} frames ({uniform:.3}s); brute force deviation {worst:.1e}",
        uniform / 0.04
    ))
}

fn c7_chunking() -> Outcome {
    let model = EncoderModel::<f32>::new(&ModelConfig::default(), 7)?;
    let ex = Extractor::new(&model);
    let mut worst = 0.0f32;
    for i in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(i);
        let secs = rng.gen_range(0.3..3.0);
        let n = (secs * 16_000.0) as usize;
        let clip = AudioClip {
            clip_id: format!("c{i}"),
            task_id: "t".into(),
            label: "x".into(),
            split: Split::Test,
            sample_rate: 16_000,
            samples: (0..n).map(|_| rng.gen_range(-0.3..0.3)).collect(),
        };
        let full = ex.embed_clip(&clip, WindowPolicy::Full)?;
        let chunked = ex.embed_clip(&clip, WindowPolicy::Chunked(secs * rng.gen_range(1.0..2.0) + 1e-3))?;
        for (a, b) in full.iter().zip(&chunked) {
            for (x, y) in a.iter().zip(b) {
                worst = worst.max((x - y).abs());
            }
        }
    }
    check(worst <= 1e-6, format!("max coordinate deviation {worst:.2e}"))?;
    Ok(format!("50 clips, all layers, max deviation {worst:.1e}"))
}

struct TrendSeed {
    accuracy: f64,
    pretrained: f64,
    random: f64,
}

fn c8_trend() -> Outcome {
    let corpus = SyntheticTaskSpec {
        task_id: "unlabelled".into(),
        kind: GeneratorKind::Speaker,
        num_classes: 32,
        clips_per_class: SplitCounts {
            train: 16,
            dev: 0,
            test: 0,
        },
        class_weights: None,
        duration_s: (1.5, 1.5),
        seed: 1,
    };
    let clips = synthesize_corpus(&corpus)?;
    check(clips.len() == 512, format!("{} clips", clips.len()))?;
    let mels: Vec<Array2<f32>> = clips
        .iter()
        .map(|c| log_mel(c, 80).map(|m| m.frames))
        .collect::<paraconf::Result<_>>()?;
    let task = SyntheticTaskSpec {
        task_id: "speaker".into(),
        kind: GeneratorKind::Speaker,
        num_classes: 16,
        clips_per_class: SplitCounts {
            train: 12,
            dev: 4,
            test: 4,
        },
        class_weights: None,
        duration_s: (1.0, 2.0),
        seed: 101,
    };
    let probe_clips = synthesize_corpus(&task)?;
    let cfg = ModelConfig::default();
    let layers: Vec<usize> = (0..=cfg.encoder.num_layers).collect();
    let tasks = [ProbeTask {
        task_id: "speaker".into(),
        metric: MetricKind::Accuracy,
    }];
    let best = |model: &EncoderModel<f32>| -> Result<f64, Box<dyn std::error::Error>> {
        let (table, _) = extract_all(&probe_clips, model, &layers, &[WindowPolicy::Full], None)?;
        let rep = run_benchmark(&table, &tasks, &ProbeSpec::standard_set())?;
        Ok(rep.best_layer(WindowPolicy::Full).ok_or("no aggregate")?.test)
    };
    let mut seeds = Vec::new();
    for seed in [1u64, 2, 3] {
        let t = Instant::now();
        let pcfg = PretrainConfig {
            seed,
            checkpoint_every: 0,
            ..Default::default()
        };
        let out = train(&cfg, &pcfg, &mels, None)?;
        let r = TrendSeed {
            accuracy: out.final_accuracy(50),
            pretrained: best(&out.checkpoint.model)?,
            random: best(&EncoderModel::new(&cfg, seed)?)?,
        };
        println!(
            "    seed {seed}: contrastive accuracy {:.3}, best-layer probe {:.3} vs random init {:.3} ({:.0}s)",
            r.accuracy,
            r.pretrained,
            r.random,
            t.elapsed().as_secs_f64()
        );
        seeds.push(r);
    }
    let contrastive = seeds.iter().filter(|s| s.accuracy > 0.5).count();
    let uplift = seeds.iter().filter(|s| s.pretrained - s.random >= 0.10).count();
    let summary = format!("contrastive > 0.5 on {contrastive}/3 seeds; uplift >= 10 points on {uplift}/3 seeds");
    check(contrastive >= 2 && uplift >= 2, summary.clone())?;
    Ok(summary)
}

fn c9_selection() -> Outcome {
    let specs = vec![ProbeSpec::new(Classifier::Logreg), ProbeSpec::new(Classifier::Lda)];
    let tasks = [ProbeTask {
        task_id: "t".into(),
        metric: MetricKind::Accuracy,
    }];
    let cfg = RunConfig::from_json(
        r#"{"version": 1, "seed": 0,
            "corpora": [{"synthetic": {"task_id": "t", "kind": "speaker", "num_classes": 2,
                "clips_per_class": {"train": 1, "dev": 1, "test": 1}, "duration_s": [1, 1], "seed": 0},
                "pretrain": true, "probe": "accuracy"}],
            "models": [{"name": "m", "config": {"mel_bins": 8,
                "featenc": {"kernels": [3, 3, 3], "strides": [2, 2, 1], "channels": [8, 8, 8]},
                "encoder": {"num_layers": 1, "num_heads": 2, "model_dim": 8, "ffn_expansion": 2,
                    "conv_kernel": 4, "relative_attention": true}}, "pretrain": {"steps": 0}}]}"#,
    )?;
    for seed in 0..500u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rows = Vec::new();
        for (split, n) in [(Split::Train, 60), (Split::Dev, 20), (Split::Test, 20)] {
            for i in 0..n {
                let label = if i % 2 == 0 { "a" } else { "b" };
                let v = randn(&mut rng, 1, 3);
                let vector = v
                    .iter()
                    .enumerate()
                    .map(|(j, x)| (x + if j == 0 && label == "b" { 0.3 } else { 0.0 }) as f32);
                rows.push(EmbeddingRow {
                    clip_id: format!("t/{split:?}/{i}"),
                    task_id: "t".into(),
                    label: label.into(),
                    split,
                    layer: 0,
                    policy: WindowPolicy::Full,
                    vector: vector.collect(),
                });
            }
        }
        let table = EmbeddingTable { dim: 3, rows };
        let report = run_benchmark(&table, &tasks, &specs)?;
        let get = |c| report.rows.iter().find(|r| r.classifier == c).unwrap();
        let (lr, lda) = (get(Classifier::Logreg), get(Classifier::Lda));
        if !(lda.dev_metric > lr.dev_metric && lda.test_metric < lr.test_metric) {
            continue;
        }
        let (summary, _) = summarize(
            "fp",
            &cfg,
            WindowPolicy::Full,
            &[("m", &report)],
            &AnalysisResults::default(),
        )?;
        let md = render_markdown(&summary);
        let cell = format!("{:.4} (L0, lda)", lda.test_metric);
        check(md.contains(&cell), format!("report lacks {cell}"))?;
        check(
            summary.models[0].best_per_task[0].test == lda.test_metric,
            "summary carries another number",
        )?;
        return Ok(format!(
            "LDA dev {:.3} > logreg dev {:.3}, test {:.3} < {:.3}; report shows LDA's {:.4}",
            lda.dev_metric, lr.dev_metric, lda.test_metric, lr.test_metric, lda.test_metric
        ));
    }
    Err("no dataset with a dev/test reversal in 500 seeds".into())
}

fn workspace_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn cli_run(out: &Path) -> Result<(), Box<dyn std::error::Error>> {
    let status = Command::new(env!("CARGO_BIN_EXE_paraconf"))
        .args(["run", "--single-thread", "--seed", "7", "--config"])
        .arg(workspace_root().join("configs/smoke.json"))
        .arg("--out")
        .arg(out)
        .env("RUST_LOG", "warn")
        .stdout(std::process::Stdio::null())
        .status()?;
    check(status.success(), format!("run exited with {status}"))
}

fn files_under(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) {
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            files_under(root, &p, out);
        } else {
            out.push(p.strip_prefix(root).unwrap().to_path_buf());
        }
    }
}

fn c10_determinism(shared: &Path) -> Outcome {
    let (a, b) = (shared.join("a"), shared.join("b"));
    cli_run(&a)?;
    cli_run(&b)?;
    let mut files = Vec::new();
    files_under(&a, &a, &mut files);
    files.sort();
    let wanted = |p: &Path| {
        let name = p.file_name().unwrap().to_string_lossy();
        name == "checkpoint.bin" || name.starts_with("embeddings.") || name.starts_with("report.")
    };
    let compared: Vec<&PathBuf> = files.iter().filter(|p| wanted(p)).collect();
    check(compared.len() >= 8, format!("only {} files to compare", compared.len()))?;
    for f in &compared {
        let (x, y) = (std::fs::read(a.join(f)), std::fs::read(b.join(f)));
        check(x.is_ok() && x.ok() == y.ok(), format!("{} differs", f.display()))?;
    }
    Ok(format!(
        "{} checkpoint, embedding and report files byte-identical",
        compared.len()
    ))
}

fn c11_context_report(shared: &Path) -> Outcome {
    let dir = shared.join("a");
    if !dir.join("report.json").exists() {
        cli_run(&dir)?;
    }
    let md = std::fs::read_to_string(dir.join("report.md"))?;
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.join("report.json"))?)?;
    let sweep = &json["sweep"];
    let ratios = sweep["ratios"].as_array().ok_or("no ratios")?;
    for model in ["pretrained", "random"] {
        for w in ["chunk2s", "chunk0.5s"] {
            let found = ratios
                .iter()
                .any(|r| r["model"] == model && r["policy"] == w && r["ratio"].is_f64());
            check(found, format!("no ratio for {model} at {w}"))?;
        }
    }
    let losses = sweep["losses"].as_array().ok_or("no loss table")?;
    check(!losses.is_empty(), "empty loss table")?;
    check(md.contains("## Context windows"), "no context section")?;
    check(md.contains("(EER tasks as 1 − EER)"), "no per-window loss table")?;
    check(md.contains(PUBLISHED_CONTEXT_REFERENCE), "reference text missing")?;
    check(
        sweep["reference"] == PUBLISHED_CONTEXT_REFERENCE,
        "reference not carried as text",
    )?;
    Ok(format!(
        "{} ratios and {} loss rows; published row present as cited text",
        ratios.len(),
        losses.len()
    ))
}

fn main() {
    let only: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let shared = tempfile::tempdir().expect("temp dir");
    let shared_path = shared.path().to_path_buf();
    let criteria: Vec<(usize, &str, Box<dyn Fn() -> Outcome>)> = vec![
        (1, "frame-rate contract", Box::new(c1_frame_rate)),
        (2, "gradient verification", Box::new(c2_gradients)),
        (3, "contrastive-loss oracle", Box::new(c3_loss_oracle)),
        (4, "CKA suite", Box::new(c4_cka)),
        (5, "metric oracles", Box::new(c5_metrics)),
        (6, "attention-distance oracle", Box::new(c6_attention)),
        (7, "chunking degeneracy", Box::new(c7_chunking)),
        (8, "desk-scale learning trend", Box::new(c8_trend)),
        (9, "selection logic", Box::new(c9_selection)),
        (10, "determinism", Box::new(|| c10_determinism(&shared_path))),
        (
            11,
            "context-sweep report",
            Box::new(|| c11_context_report(&shared_path)),
        ),
    ];
    let mut failed = Vec::new();
    for (n, name, f) in &criteria {
        if !only.is_empty() && !only.contains(n) {
            continue;
        }
        let t = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).map_err(|p| {
            p.downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into())
        });
        let secs = t.elapsed().as_secs_f64();
        match outcome.and_then(|o| o.map_err(|e| e.to_string())) {
            Ok(detail) => println!("criterion {n:>2} PASS  {name}: {detail} [{secs:.1}s]"),
            Err(detail) => {
                println!("criterion {n:>2} FAIL  {name}: {detail} [{secs:.1}s]");
                failed.push(*n);
            }
        }
    }
    if !failed.is_empty() {
        println!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
