//! Multi-branch prediction.
//!
//! A test embedding is pushed through every task's adapter and then the
//! shared MoP, giving one calibrated feature and one class distribution per
//! task. A selection strategy picks the branch that makes the prediction.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::encoders::{AdapterParams, TextEmbeddingTable};
use crate::error::{invalid, Result};
use crate::mop::{self, MoPParams};
use crate::numerics::{self, Matrix, ProbVector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Lowest Shannon entropy of the class distribution.
    Entropy,
    /// Highest single class probability.
    Max,
    /// Lowest energy `−τ·log Σ exp(cos/τ)`.
    Energy,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::Entropy, Strategy::Max, Strategy::Energy];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Entropy => "entropy",
            Strategy::Max => "max",
            Strategy::Energy => "energy",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "entropy" => Ok(Strategy::Entropy),
            "max" => Ok(Strategy::Max),
            "energy" => Ok(Strategy::Energy),
            other => Err(format!("unknown strategy '{other}' (expected entropy, max or energy)")),
        }
    }
}

/// Temperature used inside the energy score.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnergyMode {
    /// Same τ as classification.
    #[default]
    TauScaled,
    /// τ = 1 on the raw cosines.
    RawCosine,
}

impl EnergyMode {
    pub fn temperature(self, tau: f64) -> f64 {
        match self {
            EnergyMode::TauScaled => tau,
            EnergyMode::RawCosine => 1.0,
        }
    }
}

impl FromStr for EnergyMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "tau_scaled" | "tau-scaled" => Ok(EnergyMode::TauScaled),
            "raw_cosine" | "raw-cosine" => Ok(EnergyMode::RawCosine),
            other => Err(format!("unknown energy mode '{other}' (expected tau-scaled or raw-cosine)")),
        }
    }
}

/// One task branch's view of a test sample.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BranchRecord {
    pub task_id: usize,
    pub calibrated: Vec<f64>,
    /// Cosine similarity to each class, ascending class id.
    pub cosines: Vec<f64>,
    pub probs: ProbVector,
    pub entropy: f64,
    pub energy: f64,
    pub max_prob: f64,
}

/// `−t·log Σ_c exp(s_c / t)`.
pub fn energy_score(similarities: &[f64], temperature: f64) -> f64 {
    let scaled: Vec<f64> = similarities.iter().map(|s| s / temperature).collect();
    -temperature * numerics::logsumexp(&scaled)
}

/// Precomputed scoring context for a fixed set of branches and classes.
pub struct BranchScorer<'a> {
    adapters: &'a [AdapterParams],
    mop: &'a MoPParams,
    class_ids: Vec<u32>,
    text: Matrix,
    tau: f64,
    energy_temperature: f64,
}

impl<'a> BranchScorer<'a> {
    /// Scores against every class in `table`.
    pub fn new(
        adapters: &'a [AdapterParams],
        mop: &'a MoPParams,
        table: &TextEmbeddingTable,
        tau: f64,
        energy_mode: EnergyMode,
    ) -> Result<Self> {
        let ids: Vec<u32> = table.entries().map(|e| e.class_id).collect();
        Self::with_classes(adapters, mop, table, &ids, tau, energy_mode)
    }

    /// Scores against `class_ids` only (sorted internally).
    pub fn with_classes(
        adapters: &'a [AdapterParams],
        mop: &'a MoPParams,
        table: &TextEmbeddingTable,
        class_ids: &[u32],
        tau: f64,
        energy_mode: EnergyMode,
    ) -> Result<Self> {
        if adapters.is_empty() {
            return Err(invalid("at least one task branch is required"));
        }
        if !(tau > 0.0) {
            return Err(invalid(format!("temperature must be positive, got {tau}")));
        }
        for a in adapters {
            if a.dim() != table.dim() {
                return Err(invalid(format!(
                    "adapter of task {} has dim {}, table has {}",
                    a.task_id,
                    a.dim(),
                    table.dim()
                )));
            }
        }
        if mop.dim() != table.dim() {
            return Err(invalid(format!("MoP dim {} does not match table dim {}", mop.dim(), table.dim())));
        }
        let mut ids = class_ids.to_vec();
        ids.sort_unstable();
        ids.dedup();
        let text = table.matrix_for(&ids)?;
        Ok(Self { adapters, mop, class_ids: ids, text, tau, energy_temperature: energy_mode.temperature(tau) })
    }

    /// Class ids in the order used by every record's probability vector.
    pub fn class_ids(&self) -> &[u32] {
        &self.class_ids
    }

    pub fn energy_temperature(&self) -> f64 {
        self.energy_temperature
    }

    pub fn branch(&self, e: &[f64], adapter: &AdapterParams) -> Result<BranchRecord> {
        let f = adapter.forward(e)?;
        let z = mop::mop_forward(&f, self.mop)?;
        let (cosines, probs) = mop::classify_with_text(&z, &self.text, self.tau)?;
        Ok(BranchRecord {
            task_id: adapter.task_id,
            entropy: numerics::entropy_unchecked(probs.values()),
            energy: energy_score(&cosines, self.energy_temperature),
            max_prob: probs.max(),
            calibrated: z,
            cosines,
            probs,
        })
    }

    /// Every branch, in adapter order. No branch is skipped.
    pub fn branch_all(&self, e: &[f64]) -> Result<Vec<BranchRecord>> {
        if e.len() != self.text.cols() {
            return Err(invalid(format!("embedding dim {} does not match table dim {}", e.len(), self.text.cols())));
        }
        self.adapters.iter().map(|a| self.branch(e, a)).collect()
    }

    /// Branch records plus one selection per strategy.
    pub fn trace(&self, e: &[f64], strategies: &[Strategy]) -> Result<PredictionTrace> {
        let records = self.branch_all(e)?;
        let selections = strategies
            .iter()
            .map(|&s| {
                let (task, class_index) = select(s, &records, self.energy_temperature)?;
                Ok(Selection { strategy: s, selected_task: task, predicted_class: self.class_ids[class_index] })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(PredictionTrace { records, selections })
    }
}

/// Records for all branches against every class of `table`.
pub fn branch_all(
    e: &[f64],
    adapters: &[AdapterParams],
    mop: &MoPParams,
    table: &TextEmbeddingTable,
    tau: f64,
) -> Result<Vec<BranchRecord>> {
    BranchScorer::new(adapters, mop, table, tau, EnergyMode::TauScaled)?.branch_all(e)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Selection {
    pub strategy: Strategy,
    pub selected_task: usize,
    pub predicted_class: u32,
}

/// All branch records of one sample and the choice each strategy made from
/// them. Every selection reads the same records.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PredictionTrace {
    pub records: Vec<BranchRecord>,
    pub selections: Vec<Selection>,
}

impl PredictionTrace {
    pub fn selection(&self, strategy: Strategy) -> Option<&Selection> {
        self.selections.iter().find(|s| s.strategy == strategy)
    }
}

/// Position of the record minimizing `key`; ties go to the lowest task id.
fn argmin_by_task(records: &[BranchRecord], key: impl Fn(&BranchRecord) -> f64) -> Result<usize> {
    if records.is_empty() {
        return Err(invalid("no branch records to select from"));
    }
    let mut best = 0;
    let mut best_key = key(&records[0]);
    for (i, r) in records.iter().enumerate().skip(1) {
        let k = key(r);
        if k < best_key || (k == best_key && r.task_id < records[best].task_id) {
            best = i;
            best_key = k;
        }
    }
    Ok(best)
}

/// `(selected task id, class index)` for the lowest-entropy branch.
pub fn select_entropy(records: &[BranchRecord]) -> Result<(usize, usize)> {
    let i = argmin_by_task(records, |r| r.entropy)?;
    Ok((records[i].task_id, records[i].probs.argmax()))
}

/// `(selected task id, class index)` for the branch with the largest class
/// probability.
pub fn select_max(records: &[BranchRecord]) -> Result<(usize, usize)> {
    let i = argmin_by_task(records, |r| -r.max_prob)?;
    Ok((records[i].task_id, records[i].probs.argmax()))
}

/// `(selected task id, class index)` for the lowest-energy branch, with the
/// energy recomputed from each record's cosines at `temperature`.
pub fn select_energy(records: &[BranchRecord], temperature: f64) -> Result<(usize, usize)> {
    if !(temperature > 0.0) {
        return Err(invalid(format!("energy temperature must be positive, got {temperature}")));
    }
    let i = argmin_by_task(records, |r| energy_score(&r.cosines, temperature))?;
    Ok((records[i].task_id, records[i].probs.argmax()))
}

pub fn select(strategy: Strategy, records: &[BranchRecord], energy_temperature: f64) -> Result<(usize, usize)> {
    match strategy {
        Strategy::Entropy => select_entropy(records),
        Strategy::Max => select_max(records),
        Strategy::Energy => select_energy(records, energy_temperature),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::TextEntry;
    use crate::numerics::{softmax, SeededRng};
    use proptest::prelude::{prop, prop_assert_eq, proptest};
    use proptest::strategy::Strategy as PropStrategy;

    fn record(task_id: usize, probs: Vec<f64>) -> BranchRecord {
        let probs = ProbVector::new(probs).unwrap();
        BranchRecord {
            task_id,
            calibrated: vec![],
            cosines: vec![0.0; probs.len()],
            entropy: numerics::entropy(probs.values()).unwrap(),
            energy: 0.0,
            max_prob: probs.max(),
            probs,
        }
    }

    fn with_entropy(task_id: usize, entropy: f64) -> BranchRecord {
        BranchRecord { entropy, ..record(task_id, vec![0.5, 0.5]) }
    }

    #[test]
    fn entropy_argmin_and_ties() {
        let r = vec![with_entropy(0, 2.1), with_entropy(1, 0.3), with_entropy(2, 1.7)];
        assert_eq!(select_entropy(&r).unwrap().0, 1);
        let r = vec![with_entropy(0, 2.0), with_entropy(1, 0.5), with_entropy(2, 0.9), with_entropy(3, 0.5)];
        assert_eq!(select_entropy(&r).unwrap().0, 1);
        // the tie rule follows task id, not position
        let mut rev = r.clone();
        rev.reverse();
        assert_eq!(select_entropy(&rev).unwrap().0, 1);
        assert!(select_entropy(&[]).is_err());
    }

    #[test]
    fn single_branch_is_forced() {
        let r = vec![record(4, vec![0.2, 0.3, 0.5])];
        for s in Strategy::ALL {
            assert_eq!(select(s, &r, 0.01).unwrap(), (4, 2));
        }
    }

    #[test]
    fn max_selection() {
        let r = vec![record(0, vec![0.5, 0.5]), record(1, vec![0.1, 0.9]), record(2, vec![0.7, 0.3])];
        assert_eq!(select_max(&r).unwrap(), (1, 1));
        let u = vec![record(0, vec![0.25; 4]), record(1, vec![0.25; 4])];
        assert_eq!(select_max(&u).unwrap(), (0, 0));
        assert_eq!(select_entropy(&u).unwrap(), (0, 0));
    }

    #[test]
    fn one_hot_versus_uniform_agree() {
        let r = vec![record(0, vec![1.0 / 3.0; 3]), record(1, vec![0.0, 0.0, 1.0]), record(2, vec![1.0 / 3.0; 3])];
        assert_eq!(select_max(&r).unwrap(), (1, 2));
        assert_eq!(select_entropy(&r).unwrap(), (1, 2));
    }

    #[test]
    fn energy_examples() {
        let a = BranchRecord { cosines: vec![1.0, 0.0], ..record(0, vec![0.5, 0.5]) };
        let b = BranchRecord { cosines: vec![0.0, 0.0], ..record(1, vec![0.5, 0.5]) };
        assert!((energy_score(&a.cosines, 1.0) + (1.0f64.exp() + 1.0).ln()).abs() < 1e-15);
        assert!((energy_score(&b.cosines, 1.0) + 2f64.ln()).abs() < 1e-15);
        assert!((energy_score(&a.cosines, 1.0) + 1.3133).abs() < 1e-4);
        assert_eq!(select_energy(&[b.clone(), a.clone()], 1.0).unwrap().0, 0);
        let b0 = BranchRecord { task_id: 0, ..b.clone() };
        let b1 = BranchRecord { task_id: 1, ..b };
        assert_eq!(select_energy(&[b1, b0], 1.0).unwrap().0, 0);
    }

    #[test]
    fn energy_does_not_overflow_at_small_tau() {
        let cos = vec![1.0, -1.0, 0.999, 0.5];
        let e = energy_score(&cos, 0.01);
        assert!(e.is_finite());
        // max-shift form: −τ(max/τ + log Σ exp((s−max)/τ))
        let m = 1.0;
        let tail: f64 = cos.iter().map(|s: &f64| ((s - m) / 0.01).exp()).sum();
        assert!((e - (-(m + 0.01 * tail.ln()))).abs() < 1e-14);
    }

    fn stream_fixture(seed: u64, branches: usize) -> (Vec<AdapterParams>, MoPParams, TextEmbeddingTable) {
        let d = 8;
        let mut rng = SeededRng::new(seed);
        let entries = (0..6u32)
            .map(|c| TextEntry { class_id: 100 - c, task_id: (c / 2) as usize, vector: rng.normal_vec(d) })
            .collect();
        let table = TextEmbeddingTable::new(d, entries).unwrap();
        let adapters = (0..branches)
            .map(|t| {
                let mut a = AdapterParams::new(t, d, 3, &mut rng).unwrap();
                for v in a.w_up.data_mut() {
                    *v = 0.3 * rng.standard_normal();
                }
                a
            })
            .collect();
        let mut mop = MoPParams::new(d, 2, 2, &mut rng).unwrap();
        for p in &mut mop.projectors {
            for v in p.w2.data_mut() {
                *v = 0.3 * rng.standard_normal();
            }
        }
        (adapters, mop, table)
    }

    #[test]
    fn records_match_single_branch_recomputation() {
        let (adapters, mop, table) = stream_fixture(3, 3);
        let mut rng = SeededRng::new(9);
        let e = rng.normal_vec(8);
        let records = branch_all(&e, &adapters, &mop, &table, 0.01).unwrap();
        assert_eq!(records.len(), 3);
        let mut ids: Vec<u32> = table.entries().map(|x| x.class_id).collect();
        ids.sort_unstable();
        for (t, r) in records.iter().enumerate() {
            assert_eq!(r.task_id, t);
            let z = mop::mop_forward(&adapters[t].forward(&e).unwrap(), &mop).unwrap();
            assert_eq!(r.calibrated, z);
            let p = mop::mop_classify(&z, &table, &ids, 0.01).unwrap();
            assert_eq!(r.probs, p);
            let logits: Vec<f64> = ids
                .iter()
                .map(|&c| numerics::cosine_similarity(&z, table.vector(c).unwrap()).unwrap() / 0.01)
                .collect();
            let direct = softmax(&logits).unwrap();
            for (a, b) in r.probs.values().iter().zip(direct.values()) {
                assert!((a - b).abs() < 1e-12);
            }
            assert_eq!(r.entropy, numerics::entropy(p.values()).unwrap());
            assert_eq!(r.max_prob, p.max());
        }
        assert!(branch_all(&e[..7], &adapters, &mop, &table, 0.01).is_err());
    }

    #[test]
    fn identical_adapters_give_identical_records() {
        let (adapters, mop, table) = stream_fixture(4, 1);
        let copies: Vec<AdapterParams> = (0..3).map(|t| AdapterParams { task_id: t, ..adapters[0].clone() }).collect();
        let e = SeededRng::new(1).normal_vec(8);
        let r = branch_all(&e, &copies, &mop, &table, 0.01).unwrap();
        for x in &r[1..] {
            assert_eq!(x.probs, r[0].probs);
            assert_eq!(x.calibrated, r[0].calibrated);
        }
        let scorer = BranchScorer::new(&copies, &mop, &table, 0.01, EnergyMode::TauScaled).unwrap();
        let trace = scorer.trace(&e, &Strategy::ALL).unwrap();
        for s in &trace.selections {
            assert_eq!(s.selected_task, 0);
        }
    }

    #[test]
    fn trace_prediction_is_argmax_of_selected_record() {
        let (adapters, mop, table) = stream_fixture(5, 3);
        let scorer = BranchScorer::new(&adapters, &mop, &table, 0.05, EnergyMode::RawCosine).unwrap();
        let mut rng = SeededRng::new(2);
        for _ in 0..50 {
            let trace = scorer.trace(&rng.normal_vec(8), &Strategy::ALL).unwrap();
            for s in &trace.selections {
                let rec = trace.records.iter().find(|r| r.task_id == s.selected_task).unwrap();
                assert_eq!(s.predicted_class, scorer.class_ids()[rec.probs.argmax()]);
            }
            let line = serde_json::to_string(&trace).unwrap();
            assert!(line.contains("\"strategy\":\"entropy\""));
        }
    }

    #[test]
    fn strategy_names_round_trip() {
        for s in Strategy::ALL {
            assert_eq!(s.name().parse::<Strategy>().unwrap(), s);
        }
        assert!("softmax".parse::<Strategy>().is_err());
    }

    fn arb_records() -> impl PropStrategy<Value = Vec<BranchRecord>> {
        prop::collection::vec(prop::collection::vec(-3.0f64..3.0, 4), 1..6).prop_map(|logit_rows| {
            logit_rows
                .into_iter()
                .enumerate()
                .map(|(t, l)| {
                    let p = softmax(&l).unwrap();
                    BranchRecord { cosines: l.iter().map(|v| v / 3.0).collect(), ..record(t, p.into_inner()) }
                })
                .collect()
        })
    }

    proptest! {
        #[test]
        fn entropy_selection_is_order_invariant(records in arb_records(), seed in 0u64..1000) {
            let base = select_entropy(&records).unwrap();
            let mut shuffled = records.clone();
            SeededRng::new(seed).shuffle(&mut shuffled);
            prop_assert_eq!(select_entropy(&shuffled).unwrap(), base);
            prop_assert_eq!(select_max(&shuffled).unwrap(), select_max(&records).unwrap());
            prop_assert_eq!(select_energy(&shuffled, 0.1).unwrap(), select_energy(&records, 0.1).unwrap());
        }

        #[test]
        fn entropy_selection_is_monotone_invariant(records in arb_records()) {
            let base = select_entropy(&records).unwrap();
            let mapped: Vec<BranchRecord> =
                records.iter().map(|r| BranchRecord { entropy: r.entropy.exp(), ..r.clone() }).collect();
            prop_assert_eq!(select_entropy(&mapped).unwrap(), base);
        }

        #[test]
        fn higher_entropy_branch_never_wins(records in arb_records()) {
            let base = select_entropy(&records).unwrap();
            let worst = records.iter().map(|r| r.entropy).fold(f64::NEG_INFINITY, f64::max);
            let mut extended = records.clone();
            extended.push(BranchRecord { entropy: worst + 0.1, ..record(records.len(), vec![0.25; 4]) });
            prop_assert_eq!(select_entropy(&extended).unwrap(), base);
        }
    }
}
