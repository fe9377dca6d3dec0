//! Per-class Gaussian feature memory: estimation after Stage-I, append-only
//! storage across tasks, and pseudo-feature sampling for Stage-II.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, CilError, Result};
use crate::numerics::{cholesky, Matrix, SeededRng};

/// Floor for the diagonal jitter added before factorization.
pub const MIN_JITTER: f64 = 1e-6;
/// Jitter relative to the mean variance, `trace(Σ)/D`.
pub const RELATIVE_JITTER: f64 = 1e-4;
/// Number of ×10 jitter escalations tried after the first failure.
pub const JITTER_ESCALATIONS: usize = 3;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovarianceMode {
    #[default]
    Full,
    /// Off-diagonal terms are dropped at estimation time.
    Diagonal,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianClassStats {
    pub task_id: usize,
    pub class_id: u32,
    pub mean: Vec<f64>,
    pub covariance: Matrix,
    pub sample_count: usize,
}

impl GaussianClassStats {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Diagonal jitter used on the first factorization attempt.
    pub fn base_jitter(&self) -> f64 {
        let d = self.dim().max(1) as f64;
        MIN_JITTER.max(RELATIVE_JITTER * self.covariance.trace() / d)
    }

    /// Cholesky factor of `Σ + εI`, escalating ε ×10 up to
    /// [`JITTER_ESCALATIONS`] times.
    pub fn sampling_factor(&self) -> Result<(Matrix, f64)> {
        let mut eps = self.base_jitter();
        for attempt in 0..=JITTER_ESCALATIONS {
            let mut s = self.covariance.clone();
            for i in 0..s.rows() {
                s.set(i, i, s.get(i, i) + eps);
            }
            match cholesky(&s) {
                Ok(l) => return Ok((l, eps)),
                Err(e) => {
                    log::debug!(
                        "cholesky failed for task {} class {} (attempt {attempt}, eps {eps:e}): {e}",
                        self.task_id,
                        self.class_id
                    );
                    eps *= 10.0;
                }
            }
        }
        Err(CilError::DegenerateCovariance { task: self.task_id, class: self.class_id })
    }
}

/// Mean and unbiased (n−1) covariance of `features`, symmetrized.
pub fn estimate_gaussian(features: &[Vec<f64>], task_id: usize, class_id: u32) -> Result<GaussianClassStats> {
    estimate_gaussian_with(features, task_id, class_id, CovarianceMode::Full)
}

pub fn estimate_gaussian_with(
    features: &[Vec<f64>],
    task_id: usize,
    class_id: u32,
    mode: CovarianceMode,
) -> Result<GaussianClassStats> {
    let n = features.len();
    if n < 2 {
        return Err(CilError::InsufficientData { task: task_id, class: class_id, count: n });
    }
    let d = features[0].len();
    if d == 0 {
        return Err(invalid("features must have at least one dimension"));
    }
    for f in features {
        if f.len() != d {
            return Err(invalid(format!("feature dim {} does not match {d}", f.len())));
        }
        if f.iter().any(|v| !v.is_finite()) {
            return Err(invalid("features must be finite"));
        }
    }

    let mut mean = vec![0.0; d];
    for f in features {
        for (m, v) in mean.iter_mut().zip(f) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);

    let mut cov = Matrix::zeros(d, d);
    let mut centered = vec![0.0; d];
    for f in features {
        for ((c, v), m) in centered.iter_mut().zip(f).zip(&mean) {
            *c = v - m;
        }
        for i in 0..d {
            let ci = centered[i];
            if ci == 0.0 {
                continue;
            }
            let row = cov.row_mut(i);
            for j in i..d {
                row[j] += ci * centered[j];
            }
        }
    }
    let denom = (n - 1) as f64;
    for i in 0..d {
        for j in i..d {
            let v = cov.get(i, j) / denom;
            let v = if mode == CovarianceMode::Diagonal && i != j { 0.0 } else { v };
            cov.set(i, j, v);
            cov.set(j, i, v);
        }
    }

    Ok(GaussianClassStats { task_id, class_id, mean, covariance: cov, sample_count: n })
}

/// `n` draws of `μ + L·ξ` with `L·Lᵀ = Σ + εI`, one per row.
pub fn sample_pseudo(stats: &GaussianClassStats, n: usize, rng: &mut SeededRng) -> Result<Matrix> {
    if n == 0 {
        return Err(invalid("sample count must be at least 1"));
    }
    let (l, _) = stats.sampling_factor()?;
    let d = stats.dim();
    let mut out = Matrix::zeros(n, d);
    let mut xi = vec![0.0; d];
    for r in 0..n {
        xi.iter_mut().for_each(|v| *v = rng.standard_normal());
        let row = out.row_mut(r);
        for i in 0..d {
            let lrow = &l.row(i)[..=i];
            row[i] = stats.mean[i] + lrow.iter().zip(&xi).map(|(a, b)| a * b).sum::<f64>();
        }
    }
    Ok(out)
}

/// Append-only store of class statistics, one entry per learned class.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DistributionStore {
    entries: Vec<GaussianClassStats>,
    classes: BTreeSet<u32>,
}

impl DistributionStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn append(&mut self, stats: GaussianClassStats) -> Result<()> {
        if self.classes.contains(&stats.class_id) {
            return Err(CilError::DuplicateClass { task: stats.task_id, class: stats.class_id });
        }
        if let Some(last) = self.entries.last() {
            if stats.task_id < last.task_id {
                return Err(invalid(format!(
                    "store is append-only across tasks: task {} after task {}",
                    stats.task_id, last.task_id
                )));
            }
            if stats.mean.len() != last.mean.len() {
                return Err(invalid("stats dimension differs from stored entries"));
            }
        }
        self.classes.insert(stats.class_id);
        self.entries.push(stats);
        Ok(())
    }

    /// All entries of tasks `0..=up_to_task`, ordered by (task, class).
    pub fn snapshot(&self, up_to_task: usize) -> Vec<&GaussianClassStats> {
        let mut out: Vec<_> = self.entries.iter().filter(|s| s.task_id <= up_to_task).collect();
        out.sort_by_key(|s| (s.task_id, s.class_id));
        out
    }

    pub fn entries(&self) -> &[GaussianClassStats] {
        &self.entries
    }
}
