//! Confidence-based early exit and threshold sweeps.
//!
//! Exit indices are zero-based in the API: exit 0 is the first internal
//! classifier and exit `n − 1` is the final classifier.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::dataset::LabeledInstance;
use crate::error::{Error, Result};
use crate::metrics::FairnessReport;
use crate::model::{BatchTrace, ExitTrace, MultiExitNet};
use crate::numkit::argmax;

pub const DEFAULT_THETA: f64 = 0.85;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExitMode {
    /// Earliest exit whose confidence is at least θ, else the final exit.
    #[default]
    Earliest,
    FixedExit(usize),
    FinalOnly,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EarlyExitPolicy {
    pub theta: f64,
    pub mode: ExitMode,
}

impl Default for EarlyExitPolicy {
    fn default() -> Self {
        Self {
            theta: DEFAULT_THETA,
            mode: ExitMode::Earliest,
        }
    }
}

impl EarlyExitPolicy {
    pub fn earliest(theta: f64) -> Self {
        Self {
            theta,
            mode: ExitMode::Earliest,
        }
    }

    pub fn fixed_exit(exit: usize) -> Self {
        Self {
            theta: DEFAULT_THETA,
            mode: ExitMode::FixedExit(exit),
        }
    }

    pub fn final_only() -> Self {
        Self {
            theta: DEFAULT_THETA,
            mode: ExitMode::FinalOnly,
        }
    }

    /// θ must not be NaN; values outside `[0, 1]` are accepted and act as
    /// "always exit" (θ ≤ 1/N) or "never exit early" (θ > 1).
    pub fn validate(&self, n_exits: usize) -> Result<()> {
        if self.theta.is_nan() {
            return Err(Error::Parameter("theta is NaN".into()));
        }
        if let ExitMode::FixedExit(k) = self.mode {
            if k >= n_exits {
                return Err(Error::Parameter(format!(
                    "fixed exit {k} out of range for {n_exits} exits"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExitDecision {
    pub exit: usize,
    pub prediction: usize,
    pub confidence: f64,
}

fn choose_exit(n_exits: usize, confidence: impl Fn(usize) -> f64, policy: &EarlyExitPolicy) -> usize {
    match policy.mode {
        ExitMode::Earliest => (0..n_exits)
            .find(|&k| confidence(k) >= policy.theta)
            .unwrap_or(n_exits - 1),
        ExitMode::FixedExit(k) => k,
        ExitMode::FinalOnly => n_exits - 1,
    }
}

/// Applies `policy` to one instance. Panics if a fixed exit is out of range;
/// use [`EarlyExitPolicy::validate`] first.
pub fn decide(trace: &ExitTrace, policy: &EarlyExitPolicy) -> ExitDecision {
    let exit = choose_exit(trace.n_exits(), |k| trace.confidences[k], policy);
    ExitDecision {
        exit,
        prediction: argmax(&trace.probs[exit]),
        confidence: trace.confidences[exit],
    }
}

/// Decisions for every instance of a batch trace.
pub fn decide_batch(trace: &BatchTrace, policy: &EarlyExitPolicy) -> Result<Vec<ExitDecision>> {
    policy.validate(trace.n_exits())?;
    Ok((0..trace.len())
        .map(|i| {
            let exit = choose_exit(trace.n_exits(), |k| trace.exits[k].confidence[i], policy);
            let e = &trace.exits[exit];
            ExitDecision {
                exit,
                prediction: e.probs.argmax_row(i),
                confidence: e.confidence[i],
            }
        })
        .collect())
}

/// Earliest exit among `eligible` (ascending) with confidence ≥ θ, else the
/// last eligible exit.
pub fn decide_among(trace: &BatchTrace, theta: f64, eligible: &[usize]) -> Vec<usize> {
    let last = *eligible.last().expect("at least one eligible exit");
    (0..trace.len())
        .map(|i| {
            let exit = eligible
                .iter()
                .copied()
                .find(|&k| trace.exits[k].confidence[i] >= theta)
                .unwrap_or(last);
            trace.exits[exit].probs.argmax_row(i)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyReport {
    pub policy: EarlyExitPolicy,
    pub report: FairnessReport,
    /// Fraction of instances leaving at each exit.
    pub usage: Vec<f64>,
}

pub fn evaluate_trace(
    trace: &BatchTrace,
    data: &[LabeledInstance],
    n_classes: usize,
    n_groups: usize,
    policy: &EarlyExitPolicy,
) -> Result<PolicyReport> {
    if trace.len() != data.len() {
        return Err(Error::dim(
            "evaluate_trace",
            format!("trace of {} instances for {} labels", trace.len(), data.len()),
        ));
    }
    let decisions = decide_batch(trace, policy)?;
    let predictions: Vec<usize> = decisions.iter().map(|d| d.prediction).collect();
    let mut counts = vec![0usize; trace.n_exits()];
    for d in &decisions {
        counts[d.exit] += 1;
    }
    let n = decisions.len().max(1) as f64;
    Ok(PolicyReport {
        policy: *policy,
        report: FairnessReport::for_instances(&predictions, data, n_classes, n_groups)?,
        usage: counts.iter().map(|&c| c as f64 / n).collect(),
    })
}

pub fn evaluate_policy(
    net: &MultiExitNet,
    data: &[LabeledInstance],
    n_groups: usize,
    policy: &EarlyExitPolicy,
) -> Result<PolicyReport> {
    let trace = net.trace_instances(data)?;
    evaluate_trace(&trace, data, net.config().n_classes, n_groups, policy)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrontierRow {
    pub theta: f64,
    pub accuracy: f64,
    pub eo: f64,
    pub dp: f64,
    pub usage: Vec<f64>,
}

impl FrontierRow {
    /// Validation trade-off used for θ and model selection: accuracy − EO.
    pub fn score(&self) -> f64 {
        self.accuracy - self.eo
    }
}

pub fn sweep_trace(
    trace: &BatchTrace,
    data: &[LabeledInstance],
    n_classes: usize,
    n_groups: usize,
    grid: &[f64],
) -> Result<Vec<FrontierRow>> {
    if grid.is_empty() {
        return Err(Error::Parameter("theta grid is empty".into()));
    }
    if let Some(t) = grid.iter().find(|t| !(0.0..=1.0).contains(*t)) {
        return Err(Error::Parameter(format!("theta {t} outside [0, 1]")));
    }
    let mut sorted = grid.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted
        .into_iter()
        .map(|theta| {
            let r = evaluate_trace(trace, data, n_classes, n_groups, &EarlyExitPolicy::earliest(theta))?;
            Ok(FrontierRow {
                theta,
                accuracy: r.report.accuracy,
                eo: r.report.eo,
                dp: r.report.dp_gap,
                usage: r.usage,
            })
        })
        .collect()
}

/// Early-exit frontier over `grid`, rows sorted by θ ascending.
pub fn sweep_theta(
    net: &MultiExitNet,
    data: &[LabeledInstance],
    n_groups: usize,
    grid: &[f64],
) -> Result<Vec<FrontierRow>> {
    let trace = net.trace_instances(data)?;
    sweep_trace(&trace, data, net.config().n_classes, n_groups, grid)
}

/// Index of the row with the best score; the lowest θ wins ties.
pub fn select_theta(rows: &[FrontierRow]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, r) in rows.iter().enumerate() {
        if best.is_none_or(|b| r.score() > rows[b].score()) {
            best = Some(i);
        }
    }
    best
}

/// Evenly spaced grid over `[0, 1]` with `points` entries.
pub fn theta_grid(points: usize) -> Vec<f64> {
    match points {
        0 => Vec::new(),
        1 => vec![0.0],
        n => (0..n).map(|i| i as f64 / (n - 1) as f64).collect(),
    }
}

/// CSV with columns `theta,accuracy,eo,dp,usage_exit_1..n` and, when a
/// selection is given, a trailing `selected` flag.
pub fn write_frontier_csv<W: Write>(
    mut out: W,
    rows: &[FrontierRow],
    selected: Option<usize>,
) -> Result<()> {
    let n_exits = rows.first().map_or(0, |r| r.usage.len());
    let io = |e: std::io::Error| Error::Serde(e.to_string());
    let mut header = String::from("theta,accuracy,eo,dp");
    for k in 1..=n_exits {
        header.push_str(&format!(",usage_exit_{k}"));
    }
    if selected.is_some() {
        header.push_str(",selected");
    }
    writeln!(out, "{header}").map_err(io)?;
    for (i, r) in rows.iter().enumerate() {
        let mut line = format!("{},{},{},{}", r.theta, r.accuracy, r.eo, r.dp);
        for u in &r.usage {
            line.push_str(&format!(",{u}"));
        }
        if let Some(s) = selected {
            line.push_str(if s == i { ",1" } else { ",0" });
        }
        writeln!(out, "{line}").map_err(io)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn trace_with(confidences: &[f64]) -> ExitTrace {
        ExitTrace {
            logits: vec![vec![0.0, 0.0]; confidences.len()],
            probs: confidences.iter().map(|&c| vec![c, 1.0 - c]).collect(),
            confidences: confidences.to_vec(),
            features: vec![vec![]; confidences.len()],
        }
    }

    #[test]
    fn earliest_above_threshold() {
        let t = trace_with(&[0.9, 0.5, 0.7, 0.6]);
        let d = decide(&t, &EarlyExitPolicy::earliest(0.85));
        assert_eq!(d.exit, 0);
        assert_eq!(d.prediction, 0);
        assert_eq!(d.confidence, 0.9);

        let t = trace_with(&[0.6, 0.5, 0.9, 0.95]);
        assert_eq!(decide(&t, &EarlyExitPolicy::earliest(0.85)).exit, 2);
    }

    #[test]
    fn unreachable_threshold_uses_final() {
        let t = trace_with(&[0.99, 1.0, 0.7, 0.6]);
        assert_eq!(decide(&t, &EarlyExitPolicy::earliest(1.0 + 1e-9)).exit, 3);
    }

    #[test]
    fn inclusive_threshold() {
        let t = trace_with(&[0.6, 1.0, 0.7, 0.6]);
        assert_eq!(decide(&t, &EarlyExitPolicy::earliest(1.0)).exit, 1);
        assert_eq!(decide(&t, &EarlyExitPolicy::earliest(0.5)).exit, 0);
    }

    #[test]
    fn fixed_and_final_modes() {
        let t = trace_with(&[0.9, 0.5, 0.7, 0.6]);
        assert_eq!(decide(&t, &EarlyExitPolicy::fixed_exit(2)).exit, 2);
        assert_eq!(decide(&t, &EarlyExitPolicy::final_only()).exit, 3);
        assert!(EarlyExitPolicy::fixed_exit(4).validate(4).is_err());
    }

    #[test]
    fn ties_break_to_lowest_class() {
        let t = ExitTrace {
            logits: vec![vec![0.0; 3]],
            probs: vec![vec![0.4, 0.4, 0.2]],
            confidences: vec![0.4],
            features: vec![vec![]],
        };
        assert_eq!(decide(&t, &EarlyExitPolicy::final_only()).prediction, 0);
    }

    #[test]
    fn grid_and_selection() {
        let g = theta_grid(21);
        assert_eq!(g.len(), 21);
        assert_eq!(g[0], 0.0);
        assert_eq!(g[20], 1.0);
        let rows = vec![
            FrontierRow { theta: 0.0, accuracy: 80.0, eo: 5.0, dp: 0.0, usage: vec![1.0] },
            FrontierRow { theta: 0.5, accuracy: 85.0, eo: 8.0, dp: 0.0, usage: vec![1.0] },
            FrontierRow { theta: 1.0, accuracy: 84.0, eo: 7.0, dp: 0.0, usage: vec![1.0] },
        ];
        assert_eq!(select_theta(&rows), Some(1));
        assert_eq!(select_theta(&[]), None);
    }
}
