//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::borrow::Cow;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use cil_core::encoders::{AdapterParams, TextEmbeddingTable, TextEntry};
use cil_core::harness::metrics::{compute_metrics, StepPredictions};
use cil_core::harness::studies::{self, DEFAULT_PROJECTOR_COUNTS, DEFAULT_PSEUDO_COUNTS};
use cil_core::harness::{run_experiment, RunConfig};
use cil_core::inference::{BranchScorer, EnergyMode, Strategy};
use cil_core::memory::{estimate_gaussian, sample_pseudo};
use cil_core::mop::{mop_forward, MoPParams};
use cil_core::numerics::{GradTape, Matrix, SeededRng};
use cil_core::ParamSet;

const SEEDS: [u64; 3] = [0, 1, 2];

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self { pass, detail: detail.into() }
    }
}

fn random_params(p: &mut impl ParamSet, std: f64, rng: &mut SeededRng) {
    for s in p.param_slices_mut() {
        s.iter_mut().for_each(|v| *v = std * rng.standard_normal());
    }
}

struct Mini {
    adapter: AdapterParams,
    mop: MoPParams,
    x: Vec<f64>,
    text: Matrix,
    targets: Vec<usize>,
    tau: f64,
}

impl Mini {
    fn loss_and_grads(&self, want_grads: bool) -> (f64, Vec<Vec<f64>>) {
        let d = self.text.cols();
        let mut tape = GradTape::new();
        let x = tape.constant(self.targets.len(), d, Cow::Borrowed(&self.x)).unwrap();
        let f = self.adapter.record(&mut tape, x).unwrap();
        let z = self.mop.record(&mut tape, f).unwrap();
        let zn = tape.row_normalize(z).unwrap();
        let t = tape.constant_matrix(&self.text).unwrap();
        let cos = tape.matmul_nt(zn, t).unwrap();
        let logits = tape.scale(cos, 1.0 / self.tau).unwrap();
        let loss = tape.softmax_cross_entropy(logits, &self.targets).unwrap();
        let value = tape.value(loss)[0];
        let grads = if want_grads { tape.backward(loss).unwrap().into_inner() } else { Vec::new() };
        (value, grads)
    }

    fn loss(&self) -> f64 {
        self.loss_and_grads(false).0
    }
}

fn gradient_integrity() -> Outcome {
    let start = Instant::now();
    let (d, r, m, h, classes, batch) = (8, 2, 2, 2, 3, 6);
    let mut rng = SeededRng::new(11);
    let mut adapter = AdapterParams::new(0, d, r, &mut rng).unwrap();
    random_params(&mut adapter, 0.5, &mut rng);
    let mut mop = MoPParams::new(d, m, h, &mut rng).unwrap();
    random_params(&mut mop, 0.5, &mut rng);
    let mut mini = Mini {
        adapter,
        mop,
        x: rng.normal_vec(batch * d),
        text: Matrix::random_normal(classes, d, 1.0, &mut rng),
        targets: (0..batch).map(|i| i % classes).collect(),
        tau: 0.1,
    };
    let (_, analytic) = mini.loss_and_grads(true);
    let step = 1e-5;
    let n_adapter = mini.adapter.param_slices().len();
    let mut worst = 0.0f64;
    let mut checked = 0;
    for (slot, grad) in analytic.iter().enumerate() {
        for (i, &g) in grad.iter().enumerate() {
            let poke = |mini: &mut Mini, delta: f64| {
                if slot < n_adapter {
                    mini.adapter.param_slices_mut()[slot][i] += delta;
                } else {
                    mini.mop.param_slices_mut()[slot - n_adapter][i] += delta;
                }
            };
            poke(&mut mini, step);
            let up = mini.loss();
            poke(&mut mini, -2.0 * step);
            let down = mini.loss();
            poke(&mut mini, step);
            let fd = (up - down) / (2.0 * step);
            let rel = (g - fd).abs() / g.abs().max(fd.abs()).max(1e-6);
            worst = worst.max(rel);
            checked += 1;
        }
    }
    let elapsed = start.elapsed();
    let expected = mini.adapter.num_params() + mini.mop.num_params();
    Outcome::new(
        worst <= 1e-4 && checked == expected && elapsed < Duration::from_secs(10),
        format!("{checked} parameters, worst relative error {worst:.2e}, {elapsed:.2?}"),
    )
}

fn raw_cosine_class(e: &[f64], table: &TextEmbeddingTable) -> u32 {
    let en = e.iter().map(|v| v * v).sum::<f64>().sqrt();
    let mut best = (f64::NEG_INFINITY, 0);
    for entry in table.entries() {
        let t = table.vector(entry.class_id).unwrap();
        let c = e.iter().zip(t).map(|(a, b)| a * b).sum::<f64>() / en;
        if c > best.0 {
            best = (c, entry.class_id);
        }
    }
    best.1
}

fn identity_at_init() -> Outcome {
    let (d, tasks, per_task) = (64, 3, 10);
    let mut rng = SeededRng::new(21);
    let entries = (0..tasks * per_task)
        .map(|c| TextEntry { class_id: c as u32, task_id: c / per_task, vector: rng.normal_vec(d) })
        .collect();
    let table = TextEmbeddingTable::new(d, entries).unwrap();
    let adapters: Vec<AdapterParams> = (0..tasks).map(|t| AdapterParams::new(t, d, 64, &mut rng).unwrap()).collect();
    let mop = MoPParams::new(d, 3, d / 4, &mut rng).unwrap();
    let scorer = BranchScorer::new(&adapters, &mop, &table, 0.01, EnergyMode::TauScaled).unwrap();
    let mut feature_mismatch = 0;
    let mut prediction_mismatch = 0;
    for _ in 0..1000 {
        let e = rng.normal_vec(d);
        let trace = scorer.trace(&e, &Strategy::ALL).unwrap();
        for rec in &trace.records {
            if rec.calibrated.iter().zip(&e).any(|(a, b)| a.to_bits() != b.to_bits()) {
                feature_mismatch += 1;
            }
        }
        let expected = raw_cosine_class(&e, &table);
        prediction_mismatch += trace.selections.iter().filter(|s| s.predicted_class != expected).count();
    }
    Outcome::new(
        feature_mismatch == 0 && prediction_mismatch == 0,
        format!("1000 samples, {feature_mismatch} feature mismatch(es), {prediction_mismatch} prediction mismatch(es)"),
    )
}

/// Gate softmax, projector MLPs and residual sum written out with plain
/// loops over the raw parameter arrays.
fn straight_line_mop(f: &[f64], mop: &MoPParams) -> Vec<f64> {
    let d = f.len();
    let m = mop.projectors.len();
    let gate = mop.gate.data();
    let logits: Vec<f64> = (0..m).map(|j| (0..d).map(|k| gate[j * d + k] * f[k]).sum()).collect();
    let top = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - top).exp()).collect();
    let total: f64 = exps.iter().sum();
    let mut z = f.to_vec();
    for (j, p) in mop.projectors.iter().enumerate() {
        let g = exps[j] / total;
        let hidden = p.b1.len();
        let w1 = p.w1.data();
        let w2 = p.w2.data();
        let act: Vec<f64> =
            (0..hidden).map(|a| ((0..d).map(|k| w1[a * d + k] * f[k]).sum::<f64>() + p.b1[a]).max(0.0)).collect();
        for i in 0..d {
            let out: f64 = (0..hidden).map(|a| w2[i * hidden + a] * act[a]).sum::<f64>() + p.b2[i];
            z[i] += g * out;
        }
    }
    z
}

fn mop_equivalence() -> Outcome {
    let mut rng = SeededRng::new(31);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let mut mop = MoPParams::new(8, 3, 2, &mut rng).unwrap();
        random_params(&mut mop, 1.0, &mut rng);
        let f = rng.normal_vec(8);
        let a = mop_forward(&f, &mop).unwrap();
        let b = straight_line_mop(&f, &mop);
        worst = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(worst, f64::max);
    }
    Outcome::new(worst <= 1e-12, format!("100 instances, max abs difference {worst:.2e}"))
}

fn gaussian_round_trip() -> Outcome {
    let start = Instant::now();
    let (d, n) = (4, 100_000);
    let mut rng = SeededRng::new(41);
    let mixing = Matrix::random_normal(d, d, 0.7, &mut rng);
    let offset = rng.normal_vec(d);
    let source: Vec<Vec<f64>> = (0..2000)
        .map(|_| {
            let xi = rng.normal_vec(d);
            let mut v = mixing.matvec(&xi).unwrap();
            v.iter_mut().zip(&offset).for_each(|(a, b)| *a += b);
            v
        })
        .collect();
    let stats = estimate_gaussian(&source, 0, 0).unwrap();
    let drawn = sample_pseudo(&stats, n, &mut rng).unwrap();
    let rows: Vec<Vec<f64>> = (0..n).map(|r| drawn.row(r).to_vec()).collect();
    let back = estimate_gaussian(&rows, 0, 0).unwrap();
    let mean_err = stats.mean.iter().zip(&back.mean).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let cov_err =
        stats.covariance.data().iter().zip(back.covariance.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let elapsed = start.elapsed();
    Outcome::new(
        mean_err <= 0.02 && cov_err <= 0.05 && elapsed < Duration::from_secs(30),
        format!("mean err {mean_err:.4}, covariance err {cov_err:.4}, {elapsed:.2?}"),
    )
}

fn pct(v: f64) -> String {
    format!("{:.2}", 100.0 * v)
}

fn base_config() -> RunConfig {
    RunConfig { strategies: Strategy::ALL.to_vec(), checkpoint_every: 0, ..RunConfig::default() }
}

fn ablation_and_strategies() -> (Outcome, Outcome) {
    let start = Instant::now();
    let (ablation, reports) = match studies::run_ablation(&base_config(), &SEEDS, studies::default_jobs()) {
        Ok(r) => r,
        Err(e) => {
            let o = Outcome::new(false, format!("ablation failed: {e}"));
            return (o, Outcome::new(false, "no runs to compare"));
        }
    };
    let elapsed = start.elapsed();
    let last = |v: &str| ablation.row(v).map_or(f64::NAN, |r| r.mean_last_a);
    let (zero, mop, tsa, full) = (last("zero-shot"), last("mop-only"), last("adapters-only"), last("full"));
    let ordered = full >= tsa && full >= mop && tsa >= zero && full - zero >= 0.05;
    let ablation_outcome = Outcome::new(
        ordered && elapsed < Duration::from_secs(600),
        format!(
            "Last-A zero-shot {} mop-only {} adapters-only {} full {}, {elapsed:.1?}",
            pct(zero),
            pct(mop),
            pct(tsa),
            pct(full)
        ),
    );

    let full_runs: Vec<_> = reports.into_iter().filter(|r| r.variant == "full").collect();
    let strategy_outcome = match studies::compare_strategies(&full_runs, &SEEDS) {
        Ok(cmp) => {
            let last = |s| cmp.row(s).map_or(f64::NAN, |r| r.mean_last_a);
            let (ent, max, energy) = (last(Strategy::Entropy), last(Strategy::Max), last(Strategy::Energy));
            Outcome::new(
                ent >= max && ent >= energy,
                format!("Last-A entropy {} max {} energy {}", pct(ent), pct(max), pct(energy)),
            )
        }
        Err(e) => Outcome::new(false, format!("comparison failed: {e}")),
    };
    (ablation_outcome, strategy_outcome)
}

fn sensitivity() -> Outcome {
    let mut base = base_config();
    base.strategies = vec![Strategy::Entropy];
    match studies::run_sensitivity(
        &base,
        &SEEDS,
        &DEFAULT_PROJECTOR_COUNTS,
        &DEFAULT_PSEUDO_COUNTS,
        studies::default_jobs(),
    ) {
        Ok(report) => {
            let pass = report.sweeps.len() == 2 && report.sweeps.iter().all(|s| s.spread < 0.05);
            let detail: Vec<String> =
                report.sweeps.iter().map(|s| format!("{} spread {} points", s.parameter, pct(s.spread))).collect();
            Outcome::new(pass, detail.join(", "))
        }
        Err(e) => Outcome::new(false, format!("sweep failed: {e}")),
    }
}

fn audit_and_determinism() -> Outcome {
    let cfg = base_config();
    let (a, b) = match (run_experiment(&cfg), run_experiment(&cfg)) {
        (Ok(a), Ok(b)) => (a, b),
        (Err(e), _) | (_, Err(e)) => return Outcome::new(false, format!("run failed: {e}")),
    };
    let reads = a.audit.old_task_reads + b.audit.old_task_reads;
    let violations = a.audit.violations.len() + b.audit.violations.len();
    let identical = a.to_json().as_bytes() == b.to_json().as_bytes();
    Outcome::new(
        reads == 0 && violations == 0 && identical && a.audit.splits_released == a.completed_tasks,
        format!(
            "{reads} old-task read(s), {violations} violation(s), {} split(s) released, reports identical: {identical}",
            a.audit.splits_released
        ),
    )
}

fn step(classes: &[u32], labels: &[u32], predictions: &[u32]) -> StepPredictions {
    StepPredictions {
        predictions: predictions.to_vec(),
        labels: labels.to_vec(),
        class_ids: classes.to_vec(),
        true_task_selections: None,
    }
}

fn metric_fixture() -> Outcome {
    let steps = [
        step(&[0, 1], &[0, 0, 0, 1], &[0, 0, 1, 0]),
        step(&[0, 1, 2, 3], &[0, 1, 2, 3, 3, 3], &[0, 1, 2, 3, 0, 0]),
        step(&[0, 1, 2, 3, 4, 5], &[0, 1, 2, 3, 4, 5, 5, 5], &[0, 1, 0, 3, 4, 5, 5, 2]),
    ];
    // Worked by hand: accuracy 2/4, 4/6, 6/8; recall per class
    // {2/3, 0}, {1, 1, 1, 1/3}, {1, 1, 0, 1, 1, 2/3}.
    let acc = [2.0 / 4.0, 4.0 / 6.0, 6.0 / 8.0];
    let mcr =
        [(2.0 / 3.0 + 0.0) / 2.0, (1.0 + 1.0 + 1.0 + 1.0 / 3.0) / 4.0, (1.0 + 1.0 + 0.0 + 1.0 + 1.0 + 2.0 / 3.0) / 6.0];
    let m = match compute_metrics(Strategy::Entropy, &steps) {
        Ok(m) => m,
        Err(e) => return Outcome::new(false, format!("compute_metrics failed: {e}")),
    };
    let exact = m.steps.iter().zip(acc.iter().zip(&mcr)).all(|(s, (a, c))| s.accuracy == *a && s.mcr == *c)
        && m.last_a == acc[2]
        && m.last_m == mcr[2]
        && m.avg_a == (acc[0] + acc[1] + acc[2]) / 3.0
        && m.avg_m == (mcr[0] + mcr[1] + mcr[2]) / 3.0;
    Outcome::new(
        exact,
        format!("Last-A {:.6} Avg-A {:.6} Last-M {:.6} Avg-M {:.6}", m.last_a, m.avg_a, m.last_m, m.avg_m),
    )
}

fn main() -> ExitCode {
    let mut results: Vec<(u32, &str, Outcome)> = vec![
        (1, "gradient integrity", gradient_integrity()),
        (2, "identity at init", identity_at_init()),
        (3, "MoP straight-line equivalence", mop_equivalence()),
        (4, "Gaussian round trip", gaussian_round_trip()),
    ];
    let (ablation, strategies) = ablation_and_strategies();
    results.push((5, "ablation ordering", ablation));
    results.push((6, "strategy ordering", strategies));
    results.push((7, "sensitivity stability", sensitivity()));
    results.push((8, "exemplar-free audit and determinism", audit_and_determinism()));
    results.push((9, "metric definitions", metric_fixture()));

    let mut failed = 0;
    for (id, name, o) in &results {
        if !o.pass {
            failed += 1;
        }
        println!("{} criterion {id}: {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
    }
    println!("{} of {} criteria passed", results.len() - failed, results.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
