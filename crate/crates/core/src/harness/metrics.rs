//! Accuracy and mean class recall per task step, and their Last/Avg
//! aggregates.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::inference::Strategy;

/// Predictions for one evaluation step, over the test data of every class
/// seen so far.
#[derive(Debug, Clone, PartialEq)]
pub struct StepPredictions {
    pub predictions: Vec<u32>,
    pub labels: Vec<u32>,
    /// Classes evaluated at this step.
    pub class_ids: Vec<u32>,
    /// How many samples were routed to the branch of their own task.
    pub true_task_selections: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub num_classes: usize,
    pub num_samples: usize,
    pub accuracy: f64,
    pub mcr: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task_selection_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyMetrics {
    pub strategy: Strategy,
    pub steps: Vec<StepMetrics>,
    pub last_a: f64,
    pub avg_a: f64,
    pub last_m: f64,
    pub avg_m: f64,
}

/// `(accuracy, mean class recall)`. Classes without test samples are left out
/// of the recall mean.
pub fn accuracy_and_mcr(predictions: &[u32], labels: &[u32], class_ids: &[u32]) -> Result<(f64, f64)> {
    if predictions.len() != labels.len() {
        return Err(invalid(format!("{} predictions for {} labels", predictions.len(), labels.len())));
    }
    if labels.is_empty() {
        return Err(invalid("no samples to score"));
    }
    let correct = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    let accuracy = correct as f64 / labels.len() as f64;

    let mut per_class: BTreeMap<u32, (usize, usize)> = class_ids.iter().map(|&c| (c, (0, 0))).collect();
    for (p, l) in predictions.iter().zip(labels) {
        let entry = per_class.get_mut(l).ok_or_else(|| invalid(format!("label {l} is not an evaluated class")))?;
        entry.1 += 1;
        if p == l {
            entry.0 += 1;
        }
    }
    let mut recalls = Vec::with_capacity(per_class.len());
    for (c, (hit, total)) in per_class {
        if total == 0 {
            log::warn!("class {c} has no test samples; it is left out of mean class recall");
            continue;
        }
        recalls.push(hit as f64 / total as f64);
    }
    let mcr = recalls.iter().sum::<f64>() / recalls.len() as f64;
    Ok((accuracy, mcr))
}

/// Per-step metrics and the Last/Avg aggregates for one strategy.
pub fn compute_metrics(strategy: Strategy, steps: &[StepPredictions]) -> Result<StrategyMetrics> {
    if steps.is_empty() {
        return Err(invalid("no evaluation steps"));
    }
    let rows = steps
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let (accuracy, mcr) = accuracy_and_mcr(&s.predictions, &s.labels, &s.class_ids)?;
            Ok(StepMetrics {
                step: i,
                num_classes: s.class_ids.len(),
                num_samples: s.labels.len(),
                accuracy,
                mcr,
                task_selection_accuracy: s.true_task_selections.map(|n| n as f64 / s.labels.len() as f64),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(aggregate(strategy, rows))
}

pub fn aggregate(strategy: Strategy, steps: Vec<StepMetrics>) -> StrategyMetrics {
    let n = steps.len().max(1) as f64;
    let last = steps.last();
    StrategyMetrics {
        strategy,
        last_a: last.map_or(0.0, |s| s.accuracy),
        last_m: last.map_or(0.0, |s| s.mcr),
        avg_a: steps.iter().map(|s| s.accuracy).sum::<f64>() / n,
        avg_m: steps.iter().map(|s| s.mcr).sum::<f64>() / n,
        steps,
    }
}
