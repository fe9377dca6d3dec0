//! Human-readable reports and columnar plot data.

use std::fmt::Write as _;

use super::experiment::{MetricsReport, RunStatus};
use super::studies::{AblationReport, SensitivityReport, StrategyComparison};

fn pct(v: f64) -> String {
    format!("{:.2}", 100.0 * v)
}

pub fn render_run(r: &MetricsReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "variant:  {}", r.variant);
    let _ = writeln!(s, "seed:     {}", r.seed);
    let _ = writeln!(
        s,
        "stream:   {} (crc32 {}), {} tasks, dim {}",
        r.stream.source, r.stream.checksum, r.stream.num_tasks, r.stream.dim
    );
    match &r.status {
        RunStatus::Complete => {
            let _ = writeln!(s, "status:   complete");
        }
        RunStatus::Failed { error } => {
            let _ = writeln!(s, "status:   FAILED after {} task(s): {error}", r.completed_tasks);
        }
    }
    let _ = writeln!(
        s,
        "audit:    {} old-task reads, {} splits released, {} violation(s)",
        r.audit.old_task_reads,
        r.audit.splits_released,
        r.audit.violations.len()
    );
    let _ = writeln!(s);
    let _ = writeln!(s, "{:<10} {:>8} {:>8} {:>8} {:>8}", "strategy", "Last-A", "Avg-A", "Last-M", "Avg-M");
    for m in &r.strategies {
        let _ = writeln!(
            s,
            "{:<10} {:>8} {:>8} {:>8} {:>8}",
            m.strategy.name(),
            pct(m.last_a),
            pct(m.avg_a),
            pct(m.last_m),
            pct(m.avg_m)
        );
    }
    let _ = writeln!(s);
    let _ = write!(s, "{:<10}", "step");
    for m in &r.strategies {
        let _ = write!(s, " {:>10}", format!("{}-acc", m.strategy.name()));
    }
    let _ = writeln!(s);
    for i in 0..r.completed_tasks {
        let _ = write!(s, "{:<10}", i + 1);
        for m in &r.strategies {
            let _ = write!(s, " {:>10}", pct(m.steps[i].accuracy));
        }
        let _ = writeln!(s);
    }
    s
}

/// `step` column followed by accuracy, recall and task-selection columns per
/// strategy. Steps are 1-based.
pub fn run_curves_tsv(r: &MetricsReport) -> String {
    let mut s = String::from("step");
    for m in &r.strategies {
        let n = m.strategy.name();
        let _ = write!(s, "\t{n}_accuracy\t{n}_mcr\t{n}_task_selection");
    }
    s.push('\n');
    for i in 0..r.completed_tasks {
        let _ = write!(s, "{}", i + 1);
        for m in &r.strategies {
            let st = &m.steps[i];
            let sel = st.task_selection_accuracy.map_or(String::new(), |v| format!("{v:.6}"));
            let _ = write!(s, "\t{:.6}\t{:.6}\t{sel}", st.accuracy, st.mcr);
        }
        s.push('\n');
    }
    s
}

pub fn render_ablation(a: &AblationReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "component ablation ({} selection, seeds {:?})", a.strategy, a.seeds);
    let _ = writeln!(
        s,
        "{:<14} {:>8} {:>4} {:>8} {:>8} {:>8} {:>8}  per-seed Last-A",
        "variant", "adapters", "mop", "Last-A", "Avg-A", "Last-M", "Avg-M"
    );
    for r in &a.rows {
        let seeds: Vec<String> = r.last_a.iter().map(|v| pct(*v)).collect();
        let _ = writeln!(
            s,
            "{:<14} {:>8} {:>4} {:>8} {:>8} {:>8} {:>8}  {}",
            r.variant,
            if r.use_adapters { "yes" } else { "no" },
            if r.use_mop { "yes" } else { "no" },
            pct(r.mean_last_a),
            pct(r.mean_avg_a),
            pct(r.mean_last_m),
            pct(r.mean_avg_m),
            seeds.join(" ")
        );
    }
    s
}

pub fn ablation_curves_tsv(a: &AblationReport) -> String {
    let mut s = String::from("step");
    for r in &a.rows {
        let _ = write!(s, "\t{}", r.variant);
    }
    s.push('\n');
    let steps = a.rows.iter().map(|r| r.curve.len()).max().unwrap_or(0);
    for i in 0..steps {
        let _ = write!(s, "{}", i + 1);
        for r in &a.rows {
            let _ = write!(s, "\t{}", r.curve.get(i).map_or(String::new(), |v| format!("{v:.6}")));
        }
        s.push('\n');
    }
    s
}

pub fn render_strategies(c: &StrategyComparison) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "selection strategies (seeds {:?})", c.seeds);
    let _ = writeln!(
        s,
        "{:<10} {:>8} {:>8} {:>8} {:>8} {:>10}  per-seed Last-A",
        "strategy", "Last-A", "Avg-A", "Last-M", "Avg-M", "task-sel"
    );
    for r in &c.rows {
        let seeds: Vec<String> = r.last_a.iter().map(|v| pct(*v)).collect();
        let _ = writeln!(
            s,
            "{:<10} {:>8} {:>8} {:>8} {:>8} {:>10}  {}",
            r.strategy.name(),
            pct(r.mean_last_a),
            pct(r.mean_avg_a),
            pct(r.mean_last_m),
            pct(r.mean_avg_m),
            r.mean_task_selection.map_or("-".into(), pct),
            seeds.join(" ")
        );
    }
    s
}

pub fn strategy_curves_tsv(c: &StrategyComparison) -> String {
    let mut s = String::from("step");
    for r in &c.rows {
        let _ = write!(s, "\t{}", r.strategy.name());
    }
    s.push('\n');
    let steps = c.rows.iter().map(|r| r.curve.len()).max().unwrap_or(0);
    for i in 0..steps {
        let _ = write!(s, "{}", i + 1);
        for r in &c.rows {
            let _ = write!(s, "\t{}", r.curve.get(i).map_or(String::new(), |v| format!("{v:.6}")));
        }
        s.push('\n');
    }
    s
}

pub fn render_sensitivity(r: &SensitivityReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "sensitivity ({} selection, seeds {:?})", r.strategy, r.seeds);
    for sw in &r.sweeps {
        let _ = writeln!(s, "\n{} (spread {} points)", sw.parameter, pct(sw.spread));
        for p in &sw.points {
            let seeds: Vec<String> = p.last_a.iter().map(|v| pct(*v)).collect();
            let _ = writeln!(s, "  {:>6}  Last-A {:>7}   {}", p.value, pct(p.mean_last_a), seeds.join(" "));
        }
    }
    s
}

/// Long format: `parameter  value  mean_last_a`.
pub fn sensitivity_tsv(r: &SensitivityReport) -> String {
    let mut s = String::from("parameter\tvalue\tmean_last_a\n");
    for sw in &r.sweeps {
        for p in &sw.points {
            let _ = writeln!(s, "{}\t{}\t{:.6}", sw.parameter, p.value, p.mean_last_a);
        }
    }
    s
}
