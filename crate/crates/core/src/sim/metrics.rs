use serde::Serialize;

use crate::behavior::Strategy;

use super::scenario::Scenario;

pub const CSV_HEADER: &str = "episode,strategy,response_time_ms,cost_units,violation,active_failures";

/// What the top client saw in one episode.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsRecord {
    pub episode: u32,
    pub strategy: Strategy,
    pub response_time_ms: f64,
    pub cost_units: f64,
    pub violation: bool,
    /// Failures still active when the episode ended.
    pub active_failures: Vec<String>,
}

impl MetricsRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.episode,
            self.strategy,
            self.response_time_ms,
            self.cost_units,
            self.violation,
            self.active_failures.join(";")
        )
    }
}

pub fn to_csv(records: &[MetricsRecord]) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for r in records {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}

/// A labelled run of episodes `first..=last`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Phase {
    pub label: String,
    pub first: u32,
    pub last: u32,
}

/// Splits `1..=episodes` at each distinct failure onset. Failures sharing an
/// onset share a boundary; labels read `pre-F1`, `F1-F2`, ..., `post-Fn`.
pub fn phase_boundaries(scenario: &Scenario, episodes: u32) -> Vec<Phase> {
    let mut onsets: Vec<(u32, String)> = Vec::new();
    let mut sorted: Vec<_> = scenario
        .failures
        .iter()
        .filter(|f| f.onset_episode <= episodes)
        .collect();
    sorted.sort_by_key(|f| f.onset_episode);
    for f in sorted {
        match onsets.last_mut() {
            Some((e, label)) if *e == f.onset_episode => {
                label.push('+');
                label.push_str(&f.id);
            }
            _ => onsets.push((f.onset_episode, f.id.clone())),
        }
    }
    phases_from_onsets(&onsets, episodes)
}

pub fn phases_from_onsets(onsets: &[(u32, String)], episodes: u32) -> Vec<Phase> {
    if onsets.is_empty() {
        return vec![Phase {
            label: "all".into(),
            first: 1,
            last: episodes,
        }];
    }
    let mut out = Vec::new();
    if onsets[0].0 > 1 {
        out.push(Phase {
            label: format!("pre-{}", onsets[0].1),
            first: 1,
            last: onsets[0].0 - 1,
        });
    }
    for (i, (start, label)) in onsets.iter().enumerate() {
        let (last, name) = match onsets.get(i + 1) {
            Some((next, next_label)) => (next - 1, format!("{label}-{next_label}")),
            None => (episodes, format!("post-{label}")),
        };
        out.push(Phase {
            label: name,
            first: *start,
            last,
        });
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PhaseMean {
    pub phase: Phase,
    pub mean_response_ms: f64,
    pub violations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub strategy: Strategy,
    pub seed: u64,
    pub episodes: u32,
    pub accumulated_cost: f64,
    pub violation_episodes: usize,
    pub mean_response_ms: f64,
    /// Failures still active after the final drain.
    pub final_active_failures: Vec<String>,
    pub phases: Vec<PhaseMean>,
}

impl RunSummary {
    pub fn from_metrics(
        strategy: Strategy,
        seed: u64,
        metrics: &[MetricsRecord],
        final_active_failures: Vec<String>,
        phases: &[Phase],
    ) -> Self {
        let mean = |rs: &[&MetricsRecord]| {
            if rs.is_empty() {
                f64::NAN
            } else {
                rs.iter().map(|r| r.response_time_ms).sum::<f64>() / rs.len() as f64
            }
        };
        let all: Vec<&MetricsRecord> = metrics.iter().collect();
        Self {
            strategy,
            seed,
            episodes: metrics.len() as u32,
            accumulated_cost: metrics.iter().map(|r| r.cost_units).sum(),
            violation_episodes: metrics.iter().filter(|r| r.violation).count(),
            mean_response_ms: mean(&all),
            final_active_failures,
            phases: phases
                .iter()
                .map(|p| {
                    let rs: Vec<&MetricsRecord> = metrics
                        .iter()
                        .filter(|r| (p.first..=p.last).contains(&r.episode))
                        .collect();
                    PhaseMean {
                        phase: p.clone(),
                        mean_response_ms: mean(&rs),
                        violations: rs.iter().filter(|r| r.violation).count(),
                    }
                })
                .collect(),
        }
    }
}
