//! Headline tables, the context-window sweep and the rendered run report.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{AnalysisResults, RunConfig};
use crate::analysis::{AttnDistanceProfile, LayerCurve};
use crate::error::{Error, Result};
use crate::extract::WindowPolicy;
use crate::io::write_atomic;
use crate::probe::{Classifier, DisagreementMatrix, MetricKind, ProbeReport, ProbeRow};

pub const PUBLISHED_CONTEXT_REFERENCE: &str = "Published reference, cited for comparison only and not checked \
against this run: 4 s / 3 s / 2 s / 1 s / 0.5 s windows kept 99% / 99% / 98% / 96% / 91% of full-context accuracy.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskScore {
    pub task: String,
    pub metric: MetricKind,
    pub layer: usize,
    pub classifier: Classifier,
    pub dev: f64,
    pub test: f64,
}

impl From<&ProbeRow> for TaskScore {
    fn from(r: &ProbeRow) -> Self {
        Self {
            task: r.task.clone(),
            metric: r.metric,
            layer: r.layer,
            classifier: r.classifier,
            dev: r.dev_metric,
            test: r.test_metric,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BestLayer {
    pub layer: usize,
    pub dev: f64,
    pub test: f64,
    pub tasks: Vec<TaskScore>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    pub model: String,
    pub best_per_task: Vec<TaskScore>,
    pub best_layer: BestLayer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextRatio {
    pub model: String,
    pub policy: WindowPolicy,
    pub layer: usize,
    pub aggregate: f64,
    pub full_layer: usize,
    pub full_aggregate: f64,
    pub ratio: f64,
}

/// Score lost by one (model, layer, task) when moving from full context to
/// a shorter window, on the higher-is-better scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextLoss {
    pub model: String,
    pub policy: WindowPolicy,
    pub layer: usize,
    pub task: String,
    pub full: f64,
    pub windowed: f64,
    pub lost: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextSweep {
    pub ratios: Vec<ContextRatio>,
    pub losses: Vec<ContextLoss>,
    pub reference: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub fingerprint: String,
    pub policy: WindowPolicy,
    pub tasks: Vec<(String, MetricKind)>,
    pub models: Vec<ModelSummary>,
    pub sweep: Option<ContextSweep>,
    pub curves: Vec<LayerCurve>,
    pub attention: Vec<AttnDistanceProfile>,
    pub disagreement: Option<DisagreementMatrix>,
    /// `(model a, model b, mean diagonal CKA)` for cross-model grids.
    pub cka_diagonals: Vec<(String, String, f64)>,
}

/// For every window `w ≠ full` in `policies`: the best-layer test aggregate
/// under `w` divided by the best-layer test aggregate under full context,
/// plus per-(model, layer, task) losses. Policies a model was not probed
/// with are left out and reported as warnings.
pub fn report_context_sweep(
    reports: &[(&str, &ProbeReport)],
    policies: &[WindowPolicy],
) -> Result<(ContextSweep, Vec<String>)> {
    let mut warnings = Vec::new();
    let mut sweep = ContextSweep {
        ratios: Vec::new(),
        losses: Vec::new(),
        reference: PUBLISHED_CONTEXT_REFERENCE.to_string(),
    };
    for &(model, rep) in reports {
        let full = rep
            .best_layer(WindowPolicy::Full)
            .ok_or_else(|| Error::Invalid(format!("model {model} has no full-context results")))?;
        let full_rows: BTreeMap<(usize, &str), &ProbeRow> = rep
            .chosen()
            .filter(|r| r.policy == WindowPolicy::Full)
            .map(|r| ((r.layer, r.task.as_str()), r))
            .collect();
        for &w in policies.iter().filter(|&&p| p != WindowPolicy::Full) {
            let Some(best) = rep.best_layer(w) else {
                warnings.push(format!(
                    "model {model} has no results for window {w}; omitted from the sweep"
                ));
                continue;
            };
            sweep.ratios.push(ContextRatio {
                model: model.to_string(),
                policy: w,
                layer: best.layer,
                aggregate: best.test,
                full_layer: full.layer,
                full_aggregate: full.test,
                ratio: best.test / full.test,
            });
            for r in rep.chosen().filter(|r| r.policy == w) {
                if let Some(f) = full_rows.get(&(r.layer, r.task.as_str())) {
                    let (full, windowed) = (f.metric.as_score(f.test_metric), r.metric.as_score(r.test_metric));
                    sweep.losses.push(ContextLoss {
                        model: model.to_string(),
                        policy: w,
                        layer: r.layer,
                        task: r.task.clone(),
                        full,
                        windowed,
                        lost: full - windowed,
                    });
                }
            }
        }
    }
    Ok((sweep, warnings))
}

fn model_summary(model: &str, rep: &ProbeReport, policy: WindowPolicy) -> Result<ModelSummary> {
    let best = rep
        .best_layer(policy)
        .ok_or_else(|| Error::Invalid(format!("model {model} has no results for window {policy}")))?;
    let tasks = rep
        .chosen()
        .filter(|r| r.policy == policy && r.layer == best.layer)
        .map(TaskScore::from)
        .collect();
    Ok(ModelSummary {
        model: model.to_string(),
        best_per_task: rep.best_per_task(policy).into_iter().map(TaskScore::from).collect(),
        best_layer: BestLayer {
            layer: best.layer,
            dev: best.dev,
            test: best.test,
            tasks,
        },
    })
}

/// Report tables for the probe results of every model under `policy`.
pub fn summarize(
    fingerprint: &str,
    cfg: &RunConfig,
    policy: WindowPolicy,
    reports: &[(&str, &ProbeReport)],
    analysis: &AnalysisResults,
) -> Result<(RunSummary, Vec<String>)> {
    let mut tasks: Vec<(String, MetricKind)> = cfg.probe_tasks().into_iter().map(|t| (t.task_id, t.metric)).collect();
    tasks.sort();
    let models = reports
        .iter()
        .map(|&(m, r)| model_summary(m, r, policy))
        .collect::<Result<Vec<_>>>()?;
    let mut warnings = Vec::new();
    let sweep = if cfg.policies.contains(&WindowPolicy::Full) {
        let (s, w) = report_context_sweep(reports, &cfg.policies)?;
        warnings.extend(w);
        Some(s)
    } else {
        warnings.push("no full-context policy configured; context sweep skipped".into());
        None
    };
    let cka_diagonals = analysis
        .cka
        .iter()
        .filter(|m| m.model_a != m.model_b)
        .map(|m| {
            let n = m.grid.len().min(m.grid.first().map_or(0, |r| r.len()));
            let mean = (0..n).map(|i| m.grid[i][i]).sum::<f64>() / n.max(1) as f64;
            (m.model_a.clone(), m.model_b.clone(), mean)
        })
        .collect();
    Ok((
        RunSummary {
            fingerprint: fingerprint.to_string(),
            policy,
            tasks,
            models,
            sweep,
            curves: analysis.curves.clone(),
            attention: analysis.attention.clone(),
            disagreement: analysis.disagreement.clone(),
            cka_diagonals,
        },
        warnings,
    ))
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"))
}

pub(super) fn disagreement_csv(d: &DisagreementMatrix, fingerprint: &str) -> String {
    let mut out = format!("# fingerprint: {fingerprint}\n# value[x][y] = P(y correct | x and y disagree)\nx");
    for m in &d.models {
        write!(out, ",{m}").unwrap();
    }
    out.push('\n');
    for (x, row) in d.models.iter().zip(&d.values) {
        out.push_str(x);
        for v in row {
            match v {
                Some(v) => write!(out, ",{v:.6}").unwrap(),
                None => out.push(','),
            }
        }
        out.push('\n');
    }
    for (x, y, t) in &d.excluded {
        writeln!(out, "# excluded: {x} vs {y} on {t} (no disagreements)").unwrap();
    }
    out
}

fn best_per_task_csv(s: &RunSummary) -> String {
    let mut out = format!(
        "# fingerprint: {}\n# policy: {}\nmodel,task,metric,layer,classifier,dev,test\n",
        s.fingerprint, s.policy
    );
    for m in &s.models {
        for t in &m.best_per_task {
            writeln!(
                out,
                "{},{},{},{},{},{:.6},{:.6}",
                m.model,
                t.task,
                t.metric.as_str(),
                t.layer,
                t.classifier.as_str(),
                t.dev,
                t.test
            )
            .unwrap();
        }
    }
    out
}

fn best_single_layer_csv(s: &RunSummary) -> String {
    let mut out = format!(
        "# fingerprint: {}\n# policy: {}\nmodel,layer,task,metric,classifier,dev,test\n",
        s.fingerprint, s.policy
    );
    for m in &s.models {
        let b = &m.best_layer;
        for t in &b.tasks {
            writeln!(
                out,
                "{},{},{},{},{},{:.6},{:.6}",
                m.model,
                b.layer,
                t.task,
                t.metric.as_str(),
                t.classifier.as_str(),
                t.dev,
                t.test
            )
            .unwrap();
        }
        writeln!(
            out,
            "{},{},aggregate,score,,{:.6},{:.6}",
            m.model, b.layer, b.dev, b.test
        )
        .unwrap();
    }
    out
}

fn context_ratio_csv(s: &RunSummary, sweep: &ContextSweep) -> String {
    let mut out = format!(
        "# fingerprint: {}\n# {}\nmodel,window,layer,aggregate,full_layer,full_aggregate,ratio\n",
        s.fingerprint, sweep.reference
    );
    for r in &sweep.ratios {
        writeln!(
            out,
            "{},{},{},{:.6},{},{:.6},{:.6}",
            r.model, r.policy, r.layer, r.aggregate, r.full_layer, r.full_aggregate, r.ratio
        )
        .unwrap();
    }
    out
}

fn context_loss_csv(s: &RunSummary, sweep: &ContextSweep) -> String {
    let mut out = format!(
        "# fingerprint: {}\nmodel,window,layer,task,full,windowed,lost\n",
        s.fingerprint
    );
    for l in &sweep.losses {
        writeln!(
            out,
            "{},{},{},{},{:.6},{:.6},{:.6}",
            l.model, l.policy, l.layer, l.task, l.full, l.windowed, l.lost
        )
        .unwrap();
    }
    out
}

pub fn render_markdown(s: &RunSummary) -> String {
    let mut o = String::new();
    writeln!(o, "# Run report\n").unwrap();
    writeln!(o, "fingerprint: `{}`  ", s.fingerprint).unwrap();
    writeln!(o, "single-window tables use window `{}`\n", s.policy).unwrap();

    writeln!(o, "## Best per-task\n").unwrap();
    writeln!(o, "Test metric of the layer and classifier chosen on dev, per task.\n").unwrap();
    write!(o, "| task | metric |").unwrap();
    for m in &s.models {
        write!(o, " {} |", m.model).unwrap();
    }
    write!(o, "\n|---|---|").unwrap();
    o.push_str(&"---|".repeat(s.models.len()));
    o.push('\n');
    for (task, metric) in &s.tasks {
        write!(o, "| {task} | {} |", metric.as_str()).unwrap();
        for m in &s.models {
            match m.best_per_task.iter().find(|t| &t.task == task) {
                Some(t) => write!(o, " {:.4} (L{}, {}) |", t.test, t.layer, t.classifier.as_str()).unwrap(),
                None => o.push_str(" - |"),
            }
        }
        o.push('\n');
    }

    writeln!(o, "\n## Best single layer\n").unwrap();
    writeln!(o, "One layer per model, chosen by the dev aggregate over tasks.\n").unwrap();
    write!(o, "| model | layer | dev aggregate | test aggregate |").unwrap();
    for (task, _) in &s.tasks {
        write!(o, " {task} |").unwrap();
    }
    write!(o, "\n|---|---|---|---|").unwrap();
    o.push_str(&"---|".repeat(s.tasks.len()));
    o.push('\n');
    for m in &s.models {
        let b = &m.best_layer;
        write!(o, "| {} | {} | {:.4} | {:.4} |", m.model, b.layer, b.dev, b.test).unwrap();
        for (task, _) in &s.tasks {
            match b.tasks.iter().find(|t| &t.task == task) {
                Some(t) => write!(o, " {:.4} |", t.test).unwrap(),
                None => o.push_str(" - |"),
            }
        }
        o.push('\n');
    }

    writeln!(o, "\n## Context windows\n").unwrap();
    match &s.sweep {
        None => writeln!(o, "No full-context results; sweep skipped.").unwrap(),
        Some(sw) => {
            writeln!(
                o,
                "Relative accuracy: best-layer aggregate under the window over the full-context one.\n"
            )
            .unwrap();
            writeln!(o, "| model | window | layer | aggregate | full aggregate | relative |").unwrap();
            writeln!(o, "|---|---|---|---|---|---|").unwrap();
            for r in &sw.ratios {
                writeln!(
                    o,
                    "| {} | {} | {} | {:.4} | {:.4} | {:.4} |",
                    r.model, r.policy, r.layer, r.aggregate, r.full_aggregate, r.ratio
                )
                .unwrap();
            }
            writeln!(o, "\n> {}\n", sw.reference).unwrap();
            writeln!(
                o,
                "Accuracy lost to the shorter window, per model, layer and task (EER tasks as 1 − EER).\n"
            )
            .unwrap();
            writeln!(o, "| model | window | layer | task | full | windowed | lost |").unwrap();
            writeln!(o, "|---|---|---|---|---|---|---|").unwrap();
            for l in &sw.losses {
                writeln!(
                    o,
                    "| {} | {} | {} | {} | {:.4} | {:.4} | {:.4} |",
                    l.model, l.policy, l.layer, l.task, l.full, l.windowed, l.lost
                )
                .unwrap();
            }
        }
    }

    if let Some(d) = &s.disagreement {
        writeln!(o, "\n## Disagreement\n").unwrap();
        writeln!(
            o,
            "Row x, column y: P(y correct | x and y disagree), averaged over tasks, best single layers.\n"
        )
        .unwrap();
        write!(o, "| x \\ y |").unwrap();
        for m in &d.models {
            write!(o, " {m} |").unwrap();
        }
        write!(o, "\n|---|").unwrap();
        o.push_str(&"---|".repeat(d.models.len()));
        o.push('\n');
        for (x, row) in d.models.iter().zip(&d.values) {
            write!(o, "| {x} |").unwrap();
            for v in row {
                write!(o, " {} |", opt(*v)).unwrap();
            }
            o.push('\n');
        }
        for (x, y, t) in &d.excluded {
            writeln!(o, "\nexcluded: {x} vs {y} on {t} (no disagreements)").unwrap();
        }
    }

    writeln!(o, "\n## Layer curves\n").unwrap();
    writeln!(o, "| model | layer | depth | test aggregate | plateau |").unwrap();
    writeln!(o, "|---|---|---|---|---|").unwrap();
    for c in &s.curves {
        for (l, (pos, v)) in c.points.iter().enumerate() {
            let mark = if l >= c.plateau.0 && l <= c.plateau.1 { "*" } else { "" };
            writeln!(o, "| {} | {l} | {pos:.3} | {v:.4} | {mark} |", c.model).unwrap();
        }
    }

    if !s.attention.is_empty() {
        writeln!(o, "\n## Attention distance\n").unwrap();
        writeln!(o, "Shortest mean attention distance per layer, seconds.\n").unwrap();
        write!(o, "| model |").unwrap();
        let layers = s.attention.iter().map(|p| p.per_head.len()).max().unwrap_or(0);
        for l in 1..=layers {
            write!(o, " L{l} |").unwrap();
        }
        write!(o, "\n|---|").unwrap();
        o.push_str(&"---|".repeat(layers));
        o.push('\n');
        for p in &s.attention {
            write!(o, "| {} |", p.model).unwrap();
            for v in p.min_per_layer() {
                write!(o, " {v:.3} |").unwrap();
            }
            o.push('\n');
        }
    }

    if !s.cka_diagonals.is_empty() {
        writeln!(o, "\n## Cross-model CKA\n").unwrap();
        writeln!(o, "| model a | model b | mean same-layer CKA |").unwrap();
        writeln!(o, "|---|---|---|").unwrap();
        for (a, b, v) in &s.cka_diagonals {
            writeln!(o, "| {a} | {b} | {v:.4} |").unwrap();
        }
    }
    o
}

/// Writes the report and its plot-ready CSVs; returns the paths written.
pub(super) fn write_report_files(root: &Path, s: &RunSummary) -> Result<Vec<PathBuf>> {
    let mut files: Vec<(PathBuf, Vec<u8>)> = vec![
        (root.join("report.md"), render_markdown(s).into_bytes()),
        (root.join("report.json"), serde_json::to_vec_pretty(s)?),
        (root.join("tables/best_per_task.csv"), best_per_task_csv(s).into_bytes()),
        (
            root.join("tables/best_single_layer.csv"),
            best_single_layer_csv(s).into_bytes(),
        ),
    ];
    if let Some(sw) = &s.sweep {
        files.push((
            root.join("tables/context_ratio.csv"),
            context_ratio_csv(s, sw).into_bytes(),
        ));
        files.push((
            root.join("tables/context_loss.csv"),
            context_loss_csv(s, sw).into_bytes(),
        ));
    }
    for (p, bytes) in &files {
        write_atomic(p, bytes)?;
    }
    Ok(files.into_iter().map(|f| f.0).collect())
}
