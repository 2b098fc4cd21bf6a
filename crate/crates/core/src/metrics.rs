//! Accuracy, demographic parity and equalized odds.
//!
//! All fairness scores are in percentage points. Rate differences are formed
//! as exact integer rationals before the single conversion to `f64`, so
//! hand-sized confusion tables give exact results.

use serde::{Deserialize, Serialize};

use crate::dataset::LabeledInstance;
use crate::error::{Error, Result};
use crate::model::MultiExitNet;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EoVariant {
    /// `Σ_k |ΔTPR_k + ΔFPR_k|`, signed sum inside one absolute value.
    #[default]
    Paper,
    /// `Σ_k (|ΔTPR_k| + |ΔFPR_k|)`.
    SplitAbs,
}

/// One-vs-rest confusion counts for class `class` within group `group`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCell {
    pub class: usize,
    pub group: usize,
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionCell {
    pub fn tpr(&self) -> Option<f64> {
        let p = self.tp + self.fn_;
        (p > 0).then(|| self.tp as f64 / p as f64)
    }

    pub fn fpr(&self) -> Option<f64> {
        let n = self.fp + self.tn;
        (n > 0).then(|| self.fp as f64 / n as f64)
    }
}

fn check_inputs(predictions: &[usize], targets: &[usize], sensitives: &[usize]) -> Result<()> {
    if predictions.len() != targets.len() || predictions.len() != sensitives.len() {
        return Err(Error::dim(
            "metrics",
            format!(
                "{} predictions, {} targets, {} sensitive labels",
                predictions.len(),
                targets.len(),
                sensitives.len()
            ),
        ));
    }
    Ok(())
}

/// Confusion cells indexed `[class][group]`.
pub fn confusion_cells(
    predictions: &[usize],
    targets: &[usize],
    sensitives: &[usize],
    n_classes: usize,
    n_groups: usize,
) -> Result<Vec<Vec<ConfusionCell>>> {
    check_inputs(predictions, targets, sensitives)?;
    let mut cells: Vec<Vec<ConfusionCell>> = (0..n_classes)
        .map(|k| {
            (0..n_groups)
                .map(|a| ConfusionCell {
                    class: k,
                    group: a,
                    ..Default::default()
                })
                .collect()
        })
        .collect();
    for (i, ((&p, &t), &a)) in predictions.iter().zip(targets).zip(sensitives).enumerate() {
        if p >= n_classes || t >= n_classes || a >= n_groups {
            return Err(Error::Input(format!(
                "instance {i}: prediction {p}, target {t} or group {a} out of range"
            )));
        }
        for (k, row) in cells.iter_mut().enumerate() {
            let c = &mut row[a];
            match (t == k, p == k) {
                (true, true) => c.tp += 1,
                (true, false) => c.fn_ += 1,
                (false, true) => c.fp += 1,
                (false, false) => c.tn += 1,
            }
        }
    }
    Ok(cells)
}

/// Equalized-odds score in percentage points. With more than two groups the
/// score is the maximum over unordered group pairs.
pub fn equalized_odds(
    predictions: &[usize],
    targets: &[usize],
    sensitives: &[usize],
    n_classes: usize,
    n_groups: usize,
    variant: EoVariant,
) -> Result<f64> {
    if n_groups < 2 {
        return Err(Error::Input("equalized odds needs at least two groups".into()));
    }
    let cells = confusion_cells(predictions, targets, sensitives, n_classes, n_groups)?;
    for row in &cells {
        for c in row {
            if c.tp + c.fn_ == 0 || c.fp + c.tn == 0 {
                return Err(Error::EmptyCell {
                    class: c.class,
                    group: c.group,
                    context: "true or false positive rate undefined".into(),
                });
            }
        }
    }
    let mut worst: f64 = 0.0;
    for g0 in 0..n_groups {
        for g1 in (g0 + 1)..n_groups {
            let score: f64 = cells
                .iter()
                .map(|row| pair_term(&row[g1], &row[g0], variant))
                .sum();
            worst = worst.max(score);
        }
    }
    Ok(worst)
}

/// Per-class term for group `one` against group `zero`, in points.
fn pair_term(one: &ConfusionCell, zero: &ConfusionCell, variant: EoVariant) -> f64 {
    let (p1, n1) = ((one.tp + one.fn_) as i128, (one.fp + one.tn) as i128);
    let (p0, n0) = ((zero.tp + zero.fn_) as i128, (zero.fp + zero.tn) as i128);
    // ΔTPR = d_tpr / (p1 p0), ΔFPR = d_fpr / (n1 n0)
    let d_tpr = one.tp as i128 * p0 - zero.tp as i128 * p1;
    let d_fpr = one.fp as i128 * n0 - zero.fp as i128 * n1;
    let to_points = |num: i128, den: i128| (num * 100) as f64 / den as f64;
    match variant {
        EoVariant::Paper => {
            let num = d_tpr * n1 * n0 + d_fpr * p1 * p0;
            to_points(num.abs(), p1 * p0 * n1 * n0)
        }
        EoVariant::SplitAbs => to_points(d_tpr.abs(), p1 * p0) + to_points(d_fpr.abs(), n1 * n0),
    }
}

/// `|P(ŷ = positive | A = 0) − P(ŷ = positive | A = 1)|` in points; the
/// maximum pairwise gap when more than two groups occur.
pub fn demographic_parity_gap(
    predictions: &[usize],
    sensitives: &[usize],
    positive_class: usize,
) -> Result<f64> {
    if predictions.len() != sensitives.len() {
        return Err(Error::dim(
            "demographic_parity_gap",
            format!("{} predictions, {} groups", predictions.len(), sensitives.len()),
        ));
    }
    let n_groups = sensitives.iter().max().map_or(0, |m| m + 1).max(2);
    let mut pos = vec![0i128; n_groups];
    let mut tot = vec![0i128; n_groups];
    for (&p, &a) in predictions.iter().zip(sensitives) {
        tot[a] += 1;
        if p == positive_class {
            pos[a] += 1;
        }
    }
    if let Some(a) = tot.iter().position(|&t| t == 0) {
        return Err(Error::Input(format!("group {a} has no instances")));
    }
    let mut worst: f64 = 0.0;
    for g0 in 0..n_groups {
        for g1 in (g0 + 1)..n_groups {
            let num = (pos[g0] * tot[g1] - pos[g1] * tot[g0]).abs() * 100;
            worst = worst.max(num as f64 / (tot[g0] * tot[g1]) as f64);
        }
    }
    Ok(worst)
}

pub fn accuracy(predictions: &[usize], targets: &[usize]) -> f64 {
    let correct = predictions.iter().zip(targets).filter(|(p, t)| p == t).count();
    correct as f64 / predictions.len().max(1) as f64 * 100.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FairnessReport {
    /// Percent.
    pub accuracy: f64,
    /// Percentage points.
    pub eo: f64,
    /// Percentage points.
    pub dp_gap: f64,
    pub cells: Vec<ConfusionCell>,
}

impl FairnessReport {
    pub fn compute(
        predictions: &[usize],
        targets: &[usize],
        sensitives: &[usize],
        n_classes: usize,
        n_groups: usize,
    ) -> Result<Self> {
        let eo = equalized_odds(
            predictions,
            targets,
            sensitives,
            n_classes,
            n_groups,
            EoVariant::Paper,
        )?;
        // Binary targets use class 1 as positive; otherwise the worst class.
        let dp_gap = if n_classes == 2 {
            demographic_parity_gap(predictions, sensitives, 1)?
        } else {
            (0..n_classes)
                .map(|k| demographic_parity_gap(predictions, sensitives, k))
                .collect::<Result<Vec<_>>>()?
                .into_iter()
                .fold(0.0, f64::max)
        };
        let cells = confusion_cells(predictions, targets, sensitives, n_classes, n_groups)?
            .into_iter()
            .flatten()
            .collect();
        Ok(Self {
            accuracy: accuracy(predictions, targets),
            eo,
            dp_gap,
            cells,
        })
    }

    pub fn for_instances(
        predictions: &[usize],
        data: &[LabeledInstance],
        n_classes: usize,
        n_groups: usize,
    ) -> Result<Self> {
        let targets: Vec<usize> = data.iter().map(|i| i.target).collect();
        let sensitives: Vec<usize> = data.iter().map(|i| i.sensitive).collect();
        Self::compute(predictions, &targets, &sensitives, n_classes, n_groups)
    }
}

/// Display label for an exit: `IC1`, `IC2`, ... and `CLS_f` for the last.
pub fn exit_label(exit: usize, n_exits: usize) -> String {
    if exit + 1 == n_exits {
        "CLS_f".to_string()
    } else {
        format!("IC{}", exit + 1)
    }
}

/// Fixed-exit evaluation at every exit, in exit order.
pub fn per_exit_report(
    net: &MultiExitNet,
    data: &[LabeledInstance],
    n_groups: usize,
) -> Result<Vec<FairnessReport>> {
    let trace = net.trace_instances(data)?;
    (0..trace.n_exits())
        .map(|k| {
            FairnessReport::for_instances(
                &trace.predictions(k),
                data,
                net.config().n_classes,
                n_groups,
            )
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Group 1: TPR 0.9, FPR 0.3. Group 0: TPR 0.7, FPR 0.1.
    fn hand_example() -> (Vec<usize>, Vec<usize>, Vec<usize>) {
        let mut p = Vec::new();
        let mut t = Vec::new();
        let mut a = Vec::new();
        let mut push = |group: usize, target: usize, pred: usize, count: usize| {
            for _ in 0..count {
                p.push(pred);
                t.push(target);
                a.push(group);
            }
        };
        push(1, 1, 1, 9);
        push(1, 1, 0, 1);
        push(1, 0, 1, 3);
        push(1, 0, 0, 7);
        push(0, 1, 1, 7);
        push(0, 1, 0, 3);
        push(0, 0, 1, 1);
        push(0, 0, 0, 9);
        (p, t, a)
    }

    #[test]
    fn hand_worked_eo_is_80_points() {
        let (p, t, a) = hand_example();
        let eo = equalized_odds(&p, &t, &a, 2, 2, EoVariant::Paper).unwrap();
        assert_eq!(eo, 80.0);
        let split = equalized_odds(&p, &t, &a, 2, 2, EoVariant::SplitAbs).unwrap();
        assert_eq!(split, 80.0);
    }

    #[test]
    fn identical_group_rates_give_zero() {
        let p = vec![1, 0, 1, 0, 1, 0, 1, 0];
        let t = vec![1, 1, 0, 0, 1, 1, 0, 0];
        let a = vec![0, 0, 0, 0, 1, 1, 1, 1];
        assert_eq!(equalized_odds(&p, &t, &a, 2, 2, EoVariant::Paper).unwrap(), 0.0);
    }

    #[test]
    fn signed_sum_can_cancel() {
        // Group 1 has higher TPR but lower FPR by the same amount.
        let p = vec![1, 1, 0, 0, 1, 0, 1, 0];
        let t = vec![1, 1, 0, 0, 1, 1, 0, 0];
        let a = vec![1, 1, 1, 1, 0, 0, 0, 0];
        let paper = equalized_odds(&p, &t, &a, 2, 2, EoVariant::Paper).unwrap();
        let split = equalized_odds(&p, &t, &a, 2, 2, EoVariant::SplitAbs).unwrap();
        assert_eq!(paper, 0.0);
        assert_eq!(split, 200.0);
    }

    #[test]
    fn empty_cell_is_named() {
        let p = vec![0, 1, 0];
        let t = vec![0, 1, 0];
        let a = vec![0, 0, 1];
        match equalized_odds(&p, &t, &a, 2, 2, EoVariant::Paper) {
            Err(Error::EmptyCell { class, group, .. }) => assert_eq!((class, group), (0, 1)),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn demographic_parity_cases() {
        let mut p = vec![1; 12];
        p.extend(vec![0; 8]);
        p.extend(vec![1; 7]);
        p.extend(vec![0; 13]);
        let mut a = vec![0; 20];
        a.extend(vec![1; 20]);
        assert_eq!(demographic_parity_gap(&p, &a, 1).unwrap(), 25.0);
        assert_eq!(demographic_parity_gap(&vec![1; 40], &a, 1).unwrap(), 0.0);
        assert!(demographic_parity_gap(&[1, 1], &[0, 0], 1).is_err());
    }

    #[test]
    fn accuracy_is_mean_times_100() {
        assert_eq!(accuracy(&[1, 0, 1, 1], &[1, 1, 1, 0]), 50.0);
    }

    #[test]
    fn labels() {
        assert_eq!(exit_label(0, 4), "IC1");
        assert_eq!(exit_label(3, 4), "CLS_f");
    }
}
