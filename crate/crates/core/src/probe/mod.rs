//! Linear probes on frozen clip embeddings.

mod disagree;
mod linear;
mod metrics;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use disagree::{disagreement_matrix, DisagreementMatrix, ModelPredictions};
pub use linear::{
    balanced_weights, fit_balanced_logreg, fit_lda, fit_logreg, minimize_lbfgs, FitSummary, LinearModel,
    LogRegObjective, Standardizer,
};
pub use metrics::{accuracy, eer, uar, MetricKind};

use crate::error::{Error, Result};
use crate::extract::{EmbeddingRow, EmbeddingTable, WindowPolicy};
use crate::frontend::Split;
use crate::io::write_atomic;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Classifier {
    Logreg,
    BalancedLogreg,
    Lda,
}

impl Classifier {
    pub fn as_str(self) -> &'static str {
        match self {
            Classifier::Logreg => "logreg",
            Classifier::BalancedLogreg => "balanced_logreg",
            Classifier::Lda => "lda",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeSpec {
    pub classifier: Classifier,
    #[serde(default = "default_l2")]
    pub l2: f64,
    #[serde(default = "default_shrinkage")]
    pub shrinkage: f64,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
    #[serde(default = "default_tol")]
    pub tol: f64,
}

fn default_l2() -> f64 {
    1e-3
}
fn default_shrinkage() -> f64 {
    1e-2
}
fn default_max_iter() -> usize {
    500
}
fn default_tol() -> f64 {
    1e-6
}

impl ProbeSpec {
    pub fn new(classifier: Classifier) -> Self {
        Self {
            classifier,
            l2: default_l2(),
            shrinkage: default_shrinkage(),
            max_iter: default_max_iter(),
            tol: default_tol(),
        }
    }

    /// logreg, balanced logreg and LDA with default settings.
    pub fn standard_set() -> Vec<Self> {
        [Classifier::Logreg, Classifier::BalancedLogreg, Classifier::Lda]
            .into_iter()
            .map(Self::new)
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.l2 >= 0.0) || !(self.shrinkage > 0.0) || !(self.tol > 0.0) {
            return Err(Error::Config(format!(
                "probe {}: need l2 ≥ 0, shrinkage > 0, tol > 0",
                self.classifier.as_str()
            )));
        }
        Ok(())
    }

    /// Fits on standardized features.
    pub fn fit(&self, x: ndarray::ArrayView2<f64>, y: &[usize], classes: usize) -> Result<LinearModel> {
        match self.classifier {
            Classifier::Logreg => fit_logreg(x, y, classes, self.l2, None, self.max_iter, self.tol).map(|r| r.0),
            Classifier::BalancedLogreg => {
                fit_balanced_logreg(x, y, classes, self.l2, self.max_iter, self.tol).map(|r| r.0)
            }
            Classifier::Lda => fit_lda(x, y, classes, self.shrinkage),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeTask {
    pub task_id: String,
    pub metric: MetricKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeRow {
    pub task: String,
    pub layer: usize,
    pub policy: WindowPolicy,
    pub classifier: Classifier,
    pub metric: MetricKind,
    pub dev_metric: f64,
    pub test_metric: f64,
    pub chosen: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub clip_id: String,
    pub label: String,
    pub predicted: String,
    /// Probability of the positive class (binary tasks only).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
}

/// Test predictions of the chosen classifier for one (task, layer, policy).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionSet {
    pub task: String,
    pub layer: usize,
    pub policy: WindowPolicy,
    pub classifier: Classifier,
    pub examples: Vec<Prediction>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateScore {
    pub layer: usize,
    pub policy: WindowPolicy,
    /// Mean over tasks of the chosen classifiers' dev scores (EER as 1 − EER).
    pub dev: f64,
    pub test: f64,
    pub tasks: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub rows: Vec<ProbeRow>,
    pub predictions: Vec<PredictionSet>,
    pub aggregates: Vec<AggregateScore>,
}

impl ProbeReport {
    pub fn chosen(&self) -> impl Iterator<Item = &ProbeRow> {
        self.rows.iter().filter(|r| r.chosen)
    }

    /// Layer with the highest dev aggregate under `policy` (lowest index
    /// on ties).
    pub fn best_layer(&self, policy: WindowPolicy) -> Option<&AggregateScore> {
        self.aggregates.iter().filter(|a| a.policy == policy).fold(
            None,
            |best: Option<&AggregateScore>, a| match best {
                Some(b) if b.dev >= a.dev => Some(b),
                _ => Some(a),
            },
        )
    }

    /// Per task: the chosen row of the layer with the best dev metric.
    pub fn best_per_task(&self, policy: WindowPolicy) -> Vec<&ProbeRow> {
        let mut best: BTreeMap<&str, &ProbeRow> = BTreeMap::new();
        for r in self.chosen().filter(|r| r.policy == policy) {
            let e = best.entry(&r.task).or_insert(r);
            if r.metric.as_score(r.dev_metric) > e.metric.as_score(e.dev_metric) {
                *e = r;
            }
        }
        best.into_values().collect()
    }

    pub fn predictions_for(&self, task: &str, layer: usize, policy: WindowPolicy) -> Option<&PredictionSet> {
        self.predictions
            .iter()
            .find(|p| p.task == task && p.layer == layer && p.policy == policy)
    }
}

struct SplitData {
    x: Array2<f64>,
    labels: Vec<String>,
    clip_ids: Vec<String>,
}

fn split_data(
    table: &EmbeddingTable,
    task: &str,
    layer: usize,
    policy: WindowPolicy,
    split: Split,
) -> Result<SplitData> {
    let rows: Vec<&EmbeddingRow> = table.select(task, layer, policy, split).collect();
    if rows.is_empty() {
        return Err(Error::MissingSplit {
            task: task.to_string(),
            split: split.as_str().to_string(),
        });
    }
    let x = Array2::from_shape_fn((rows.len(), table.dim), |(i, j)| rows[i].vector[j] as f64);
    Ok(SplitData {
        x,
        labels: rows.iter().map(|r| r.label.clone()).collect(),
        clip_ids: rows.iter().map(|r| r.clip_id.clone()).collect(),
    })
}

fn metric_value(
    kind: MetricKind,
    model: &LinearModel,
    x: ndarray::ArrayView2<f64>,
    y: &[usize],
) -> Result<(f64, Vec<usize>, Option<Vec<f64>>)> {
    let pred = model.predict(x);
    match kind {
        MetricKind::Accuracy => Ok((accuracy(&pred, y)?, pred, None)),
        MetricKind::Uar => Ok((uar(&pred, y)?, pred, None)),
        MetricKind::Eer => {
            if model.bias.len() != 2 {
                return Err(Error::Metric(format!(
                    "EER needs a binary task, got {} classes",
                    model.bias.len()
                )));
            }
            let scores: Vec<f64> = model.probabilities(x).column(1).to_vec();
            let positive: Vec<bool> = y.iter().map(|&c| c == 1).collect();
            Ok((eer(&scores, &positive)?, pred, Some(scores)))
        }
    }
}

type UnitResult = (Vec<ProbeRow>, PredictionSet);

fn probe_unit(
    table: &EmbeddingTable,
    task: &ProbeTask,
    layer: usize,
    policy: WindowPolicy,
    specs: &[ProbeSpec],
) -> Result<UnitResult> {
    let id = task.task_id.as_str();
    let train = split_data(table, id, layer, policy, Split::Train)?;
    let dev = split_data(table, id, layer, policy, Split::Dev)?;
    let test = split_data(table, id, layer, policy, Split::Test)?;
    let classes: Vec<String> = train
        .labels
        .iter()
        .cloned()
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let encode = |labels: &[String]| -> Result<Vec<usize>> {
        labels
            .iter()
            .map(|l| classes.binary_search(l).map_err(|_| Error::MissingClass(l.clone())))
            .collect()
    };
    let (ytr, ydev, yte) = (encode(&train.labels)?, encode(&dev.labels)?, encode(&test.labels)?);
    let std = Standardizer::fit(train.x.view());
    let (xtr, xdev, xte) = (
        std.apply(train.x.view()),
        std.apply(dev.x.view()),
        std.apply(test.x.view()),
    );

    let mut rows = Vec::with_capacity(specs.len());
    let mut outputs = Vec::with_capacity(specs.len());
    for spec in specs {
        let model = spec.fit(xtr.view(), &ytr, classes.len())?;
        let (dev_metric, _, _) = metric_value(task.metric, &model, xdev.view(), &ydev)?;
        let (test_metric, pred, scores) = metric_value(task.metric, &model, xte.view(), &yte)?;
        rows.push(ProbeRow {
            task: task.task_id.clone(),
            layer,
            policy,
            classifier: spec.classifier,
            metric: task.metric,
            dev_metric,
            test_metric,
            chosen: false,
        });
        outputs.push((pred, scores));
    }
    let best = (0..rows.len())
        .fold(None, |best: Option<usize>, i| match best {
            Some(b) if task.metric.as_score(rows[b].dev_metric) >= task.metric.as_score(rows[i].dev_metric) => Some(b),
            _ => Some(i),
        })
        .ok_or_else(|| Error::Config("no probe specs".into()))?;
    rows[best].chosen = true;
    let (pred, scores) = &outputs[best];
    let examples = (0..pred.len())
        .map(|i| Prediction {
            clip_id: test.clip_ids[i].clone(),
            label: test.labels[i].clone(),
            predicted: classes[pred[i]].clone(),
            score: scores.as_ref().map(|s| s[i]),
        })
        .collect();
    Ok((
        rows,
        PredictionSet {
            task: task.task_id.clone(),
            layer,
            policy,
            classifier: specs[best].classifier,
            examples,
        },
    ))
}

/// Probes every (task, layer, policy) in the table: fits each spec on train,
/// keeps the one with the best dev metric and reports its test metric.
pub fn run_benchmark(table: &EmbeddingTable, tasks: &[ProbeTask], specs: &[ProbeSpec]) -> Result<ProbeReport> {
    if specs.is_empty() {
        return Err(Error::Config("no probe specs".into()));
    }
    for s in specs {
        s.validate()?;
    }
    let mut tasks = tasks.to_vec();
    tasks.sort_by(|a, b| a.task_id.cmp(&b.task_id));
    let present = table.tasks();
    if let Some(t) = tasks.iter().find(|t| !present.contains(&t.task_id)) {
        return Err(Error::Invalid(format!("task {} has no embeddings", t.task_id)));
    }
    let layers = table.layers();
    let policies = table.policies();
    let mut units: Vec<(&ProbeTask, usize, WindowPolicy)> = Vec::new();
    for t in &tasks {
        for &p in &policies {
            units.extend(layers.iter().map(|&l| (t, l, p)));
        }
    }
    let results = units
        .par_iter()
        .map(|&(t, l, p)| probe_unit(table, t, l, p, specs))
        .collect::<Result<Vec<_>>>()?;

    let mut report = ProbeReport::default();
    for (rows, preds) in results {
        report.rows.extend(rows);
        report.predictions.push(preds);
    }
    for &p in &policies {
        for &l in &layers {
            let chosen: Vec<&ProbeRow> = report.chosen().filter(|r| r.layer == l && r.policy == p).collect();
            let n = chosen.len() as f64;
            report.aggregates.push(AggregateScore {
                layer: l,
                policy: p,
                dev: chosen.iter().map(|r| r.metric.as_score(r.dev_metric)).sum::<f64>() / n,
                test: chosen.iter().map(|r| r.metric.as_score(r.test_metric)).sum::<f64>() / n,
                tasks: chosen.len(),
            });
        }
    }
    Ok(report)
}

pub fn probe_csv(report: &ProbeReport, fingerprint: &str) -> String {
    let mut out =
        format!("# fingerprint: {fingerprint}\ntask,layer,policy,classifier,metric,dev_metric,test_metric,chosen\n");
    for r in &report.rows {
        writeln!(
            out,
            "{},{},{},{},{},{:.6},{:.6},{}",
            r.task,
            r.layer,
            r.policy,
            r.classifier.as_str(),
            r.metric.as_str(),
            r.dev_metric,
            r.test_metric,
            r.chosen
        )
        .unwrap();
    }
    out
}

pub fn write_probe_csv(path: &Path, report: &ProbeReport, fingerprint: &str) -> Result<()> {
    write_atomic(path, probe_csv(report, fingerprint).as_bytes())
}

/// One JSON object per example, tagged with model, task and fingerprint.
pub fn write_predictions_jsonl(path: &Path, model: &str, sets: &[&PredictionSet], fingerprint: &str) -> Result<()> {
    #[derive(Serialize)]
    struct Line<'a> {
        model: &'a str,
        task: &'a str,
        layer: usize,
        policy: WindowPolicy,
        classifier: Classifier,
        #[serde(flatten)]
        example: &'a Prediction,
        fingerprint: &'a str,
    }
    let mut out = String::new();
    for s in sets {
        for e in &s.examples {
            out.push_str(&serde_json::to_string(&Line {
                model,
                task: &s.task,
                layer: s.layer,
                policy: s.policy,
                classifier: s.classifier,
                example: e,
                fingerprint,
            })?);
            out.push('\n');
        }
    }
    write_atomic(path, out.as_bytes())
}
