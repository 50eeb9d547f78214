use std::fmt::Write as _;

use serde::Serialize;

use crate::behavior::Strategy;

use super::metrics::RunSummary;

pub const COMPARE_CSV_HEADER: &str =
    "strategy,runs,cost_mean,cost_std,violations_mean,violations_std,final_failures_mean";

/// Per-strategy statistics over seeds. Standard deviations use the n-1
/// denominator and are 0 for a single run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Aggregate {
    pub strategy: Strategy,
    pub runs: usize,
    pub cost_mean: f64,
    pub cost_std: f64,
    pub violations_mean: f64,
    pub violations_std: f64,
    pub final_failures_mean: f64,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let ss: f64 = xs.iter().map(|x| (x - mean).powi(2)).sum();
    (mean, (ss / (n - 1) as f64).sqrt())
}

impl Aggregate {
    pub fn from_runs(strategy: Strategy, runs: &[&RunSummary]) -> Self {
        let costs: Vec<f64> = runs.iter().map(|r| r.accumulated_cost).collect();
        let viol: Vec<f64> = runs.iter().map(|r| r.violation_episodes as f64).collect();
        let fin: Vec<f64> = runs.iter().map(|r| r.final_active_failures.len() as f64).collect();
        let (cost_mean, cost_std) = mean_std(&costs);
        let (violations_mean, violations_std) = mean_std(&viol);
        Self {
            strategy,
            runs: runs.len(),
            cost_mean,
            cost_std,
            violations_mean,
            violations_std,
            final_failures_mean: mean_std(&fin).0,
        }
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.strategy,
            self.runs,
            self.cost_mean,
            self.cost_std,
            self.violations_mean,
            self.violations_std,
            self.final_failures_mean
        )
    }
}

/// Groups summaries by strategy, in the order strategies first appear.
pub fn aggregate(summaries: &[RunSummary]) -> Vec<Aggregate> {
    let mut order: Vec<Strategy> = Vec::new();
    for s in summaries {
        if !order.contains(&s.strategy) {
            order.push(s.strategy);
        }
    }
    order
        .into_iter()
        .map(|st| {
            let runs: Vec<&RunSummary> = summaries.iter().filter(|s| s.strategy == st).collect();
            Aggregate::from_runs(st, &runs)
        })
        .collect()
}

pub fn compare_csv(rows: &[Aggregate]) -> String {
    let mut s = String::from(COMPARE_CSV_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}

/// Aligned text table, plus a footnote when remedial costs at least 1.5x
/// passive.
pub fn compare_table(rows: &[Aggregate]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<12} {:>4} {:>20} {:>18} {:>14}",
        "strategy", "runs", "accumulated cost", "violations", "final failures"
    );
    for r in rows {
        let _ = writeln!(
            out,
            "{:<12} {:>4} {:>20} {:>18} {:>14.2}",
            r.strategy.name(),
            r.runs,
            format!("{:.2} ± {:.2}", r.cost_mean, r.cost_std),
            format!("{:.2} ± {:.2}", r.violations_mean, r.violations_std),
            r.final_failures_mean
        );
    }
    let find = |st: Strategy| rows.iter().find(|r| r.strategy == st);
    if let (Some(p), Some(r)) = (find(Strategy::Passive), find(Strategy::Remedial)) {
        if r.cost_mean >= 1.5 * p.cost_mean {
            let _ = writeln!(
                out,
                "* remedial mean cost is {:.2}x passive (>= 1.5x)",
                r.cost_mean / p.cost_mean
            );
        }
    }
    out
}
