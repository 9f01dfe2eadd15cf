//! Pairwise "who is right when two models disagree" analysis.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Test predictions of one model: task → clip id → predicted label.
pub type ModelPredictions = BTreeMap<String, BTreeMap<String, String>>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DisagreementMatrix {
    pub models: Vec<String>,
    /// `values[x][y]`: mean over tasks of P(y correct | x and y disagree).
    /// `None` on the diagonal and for pairs that never disagree.
    pub values: Vec<Vec<Option<f64>>>,
    /// `(x, y, task)` triples left out for having no disagreements.
    pub excluded: Vec<(String, String, String)>,
}

/// `labels`: task → clip id → true label. Every model must cover exactly
/// the labelled clips of every task.
pub fn disagreement_matrix(
    models: &[(String, ModelPredictions)],
    labels: &BTreeMap<String, BTreeMap<String, String>>,
) -> Result<DisagreementMatrix> {
    if models.len() < 2 {
        return Err(Error::Invalid("disagreement analysis needs at least two models".into()));
    }
    for (name, preds) in models {
        for (task, truth) in labels {
            let p = preds
                .get(task)
                .ok_or_else(|| Error::Invalid(format!("model {name} has no predictions for task {task}")))?;
            if p.len() != truth.len() || !truth.keys().all(|k| p.contains_key(k)) {
                return Err(Error::Invalid(format!(
                    "model {name} predicts a different example set for task {task}"
                )));
            }
        }
    }
    let n = models.len();
    let mut values = vec![vec![None; n]; n];
    let mut excluded = Vec::new();
    for x in 0..n {
        for y in 0..n {
            if x == y {
                continue;
            }
            let mut per_task = Vec::new();
            for (task, truth) in labels {
                let px = &models[x].1[task];
                let py = &models[y].1[task];
                let (mut disagree, mut y_right) = (0usize, 0usize);
                for (clip, label) in truth {
                    if px[clip] != py[clip] {
                        disagree += 1;
                        if &py[clip] == label {
                            y_right += 1;
                        }
                    }
                }
                if disagree == 0 {
                    excluded.push((models[x].0.clone(), models[y].0.clone(), task.clone()));
                } else {
                    per_task.push(y_right as f64 / disagree as f64);
                }
            }
            if !per_task.is_empty() {
                values[x][y] = Some(per_task.iter().sum::<f64>() / per_task.len() as f64);
            }
        }
    }
    Ok(DisagreementMatrix {
        models: models.iter().map(|(n, _)| n.clone()).collect(),
        values,
        excluded,
    })
}
