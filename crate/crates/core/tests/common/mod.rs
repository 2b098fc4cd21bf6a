//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use fairexit::fairloss::{adversarial_term, hsic_tape, mmd_distill_tape, Bandwidth};
use fairexit::model::Head;
use fairexit::numkit::{finite_diff_check, GradCheck, Matrix, ParamId, Tape, Var, REL_ERROR_FLOOR};
use fairexit::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Equalized odds recomputed in floating point from per-instance filters,
/// without the library's confusion cells or integer rationals.
pub fn brute_eo(preds: &[usize], targets: &[usize], groups: &[usize], k: usize, m: usize) -> f64 {
    let rate = |class: usize, group: usize, positives: bool| -> f64 {
        let rows: Vec<usize> = (0..preds.len())
            .filter(|&i| groups[i] == group && (targets[i] == class) == positives)
            .collect();
        let hits = rows.iter().filter(|&&i| preds[i] == class).count();
        hits as f64 / rows.len() as f64
    };
    let mut worst: f64 = 0.0;
    for g0 in 0..m {
        for g1 in (g0 + 1)..m {
            let s: f64 = (0..k)
                .map(|c| {
                    let d_tpr = rate(c, g1, true) - rate(c, g0, true);
                    let d_fpr = rate(c, g1, false) - rate(c, g0, false);
                    (d_tpr + d_fpr).abs()
                })
                .sum();
            worst = worst.max(100.0 * s);
        }
    }
    worst
}

pub fn brute_dp(preds: &[usize], groups: &[usize], positive: usize, m: usize) -> f64 {
    let share = |g: usize| {
        let rows: Vec<usize> = (0..preds.len()).filter(|&i| groups[i] == g).collect();
        rows.iter().filter(|&&i| preds[i] == positive).count() as f64 / rows.len() as f64
    };
    let mut worst: f64 = 0.0;
    for g0 in 0..m {
        for g1 in (g0 + 1)..m {
            worst = worst.max(100.0 * (share(g0) - share(g1)).abs());
        }
    }
    worst
}

/// Random `(prediction, target, group)` triples in which every
/// (class, group) cell has at least one positive and one negative.
pub fn random_triples(rng: &mut impl Rng, k: usize, m: usize) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
    let mut preds = Vec::new();
    let mut targets = Vec::new();
    let mut groups = Vec::new();
    for g in 0..m {
        for c in 0..k {
            preds.push(rng.random_range(0..k));
            targets.push(c);
            groups.push(g);
        }
    }
    let extra = rng.random_range(0..200);
    for _ in 0..extra {
        preds.push(rng.random_range(0..k));
        targets.push(rng.random_range(0..k));
        groups.push(rng.random_range(0..m));
    }
    (preds, targets, groups)
}

/// Group 1: TPR 0.9, FPR 0.3. Group 0: TPR 0.7, FPR 0.1. Binary targets.
pub fn hand_worked_example() -> (Vec<usize>, Vec<usize>, Vec<usize>) {
    let (mut p, mut t, mut a) = (Vec::new(), Vec::new(), Vec::new());
    for (group, target, pred, count) in [
        (1, 1, 1, 9),
        (1, 1, 0, 1),
        (1, 0, 1, 3),
        (1, 0, 0, 7),
        (0, 1, 1, 7),
        (0, 1, 0, 3),
        (0, 0, 1, 1),
        (0, 0, 0, 9),
    ] {
        for _ in 0..count {
            p.push(pred);
            t.push(target);
            a.push(group);
        }
    }
    (p, t, a)
}

fn random_matrix(rng: &mut impl Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.random_range(-scale..scale)).collect();
    Matrix::new(rows, cols, data).unwrap()
}

/// Shape-preserving middle steps of a composition.
#[derive(Clone, Copy, Debug)]
enum Step {
    Relu,
    Reversal(f64),
    Softmax,
    Affine,
}

/// Scalar reduction closing a composition.
#[derive(Clone, Copy, Debug)]
enum Reduce {
    CrossEntropy,
    Hsic,
    Mmd,
    Adversary,
    Weighted,
}

/// A random differentiable program over matmul, relu, softmax,
/// cross-entropy, HSIC, MMD and gradient reversal, with its inputs.
pub struct Composition {
    pub point: Vec<Matrix>,
    steps: Vec<Step>,
    reduce: Reduce,
    targets: Vec<usize>,
    groups: Vec<usize>,
    teacher: Matrix,
    weights: Matrix,
    adversary: Head,
    pub description: String,
}

const ROWS: usize = 8;
const WIDTH: usize = 3;

impl Composition {
    pub fn sample(rng: &mut ChaCha8Rng) -> Self {
        let n_steps = rng.random_range(1..=3);
        let steps: Vec<Step> = (0..n_steps)
            .map(|_| match rng.random_range(0..4) {
                0 => Step::Relu,
                1 => Step::Reversal(rng.random_range(0.1..2.0)),
                2 => Step::Softmax,
                _ => Step::Affine,
            })
            .collect();
        let reduce = match rng.random_range(0..5) {
            0 => Reduce::CrossEntropy,
            1 => Reduce::Hsic,
            2 => Reduce::Mmd,
            3 => Reduce::Adversary,
            _ => Reduce::Weighted,
        };
        // Inputs: x (ROWS×4), w0 (4×WIDTH), then one weight per affine step.
        let mut point = vec![random_matrix(rng, ROWS, 4, 1.0), random_matrix(rng, 4, WIDTH, 1.0)];
        for s in &steps {
            if matches!(s, Step::Affine) {
                point.push(random_matrix(rng, WIDTH, WIDTH, 1.0));
                point.push(random_matrix(rng, 1, WIDTH, 0.5));
            }
        }
        // Two of each (class, group) pair so every MMD cell is populated.
        let targets = (0..ROWS).map(|i| (i / 2) % 2).collect();
        let groups = (0..ROWS).map(|i| i % 2).collect();
        let mut head_rng = ChaCha8Rng::seed_from_u64(rng.random());
        let adversary = Head::init(WIDTH, 4, 2, &mut head_rng);
        let description = format!("{steps:?} -> {reduce:?}");
        Self {
            point,
            steps,
            reduce,
            targets,
            groups,
            teacher: random_matrix(rng, ROWS, WIDTH, 1.0),
            weights: random_matrix(rng, ROWS, WIDTH, 1.0),
            adversary,
            description,
        }
    }

    pub fn eval(&self, tape: &mut Tape, v: &[Var]) -> Result<Var> {
        let mut h = tape.matmul(v[0], v[1])?;
        let mut next = 2;
        for s in &self.steps {
            h = match *s {
                Step::Relu => tape.relu(h),
                Step::Reversal(k) => tape.gradient_reversal(h, k)?,
                Step::Softmax => tape.softmax_rows(h),
                Step::Affine => {
                    let out = tape.affine(h, v[next], v[next + 1])?;
                    next += 2;
                    out
                }
            };
        }
        let bw = Bandwidth::Fixed(1.5);
        match self.reduce {
            Reduce::CrossEntropy => tape.cross_entropy(h, &self.targets.iter().map(|&t| t + 1).collect::<Vec<_>>()),
            Reduce::Hsic => hsic_tape(tape, h, &self.groups, bw),
            Reduce::Mmd => mmd_distill_tape(tape, h, &self.teacher, &self.targets, &self.groups, bw),
            // The adversary's own tensors are constants here; ids past the inputs.
            Reduce::Adversary => adversarial_term(tape, h, &self.groups, &self.adversary, 1000, 1.0),
            Reduce::Weighted => {
                let m = tape.mul_const(h, self.weights.clone())?;
                Ok(tape.sum(m))
            }
        }
    }

    /// Per input, the product of `-k` over the reversals downstream of it.
    /// Reversals sit in series with the output, so the tape gradient of an
    /// input is this factor times the true derivative of the forward value.
    pub fn reversal_factors(&self) -> Vec<f64> {
        let tail = if matches!(self.reduce, Reduce::Adversary) { -1.0 } else { 1.0 };
        // Factor for inputs entering before step i, for i = n_steps down to 0.
        let mut after = vec![tail; self.steps.len() + 1];
        for (i, s) in self.steps.iter().enumerate().rev() {
            after[i] = after[i + 1] * if let Step::Reversal(k) = *s { -k } else { 1.0 };
        }
        let mut factors = vec![after[0], after[0]];
        for (i, s) in self.steps.iter().enumerate() {
            if matches!(s, Step::Affine) {
                factors.extend([after[i + 1], after[i + 1]]);
            }
        }
        factors
    }

    pub fn has_reversal(&self) -> bool {
        matches!(self.reduce, Reduce::Adversary) || self.steps.iter().any(|s| matches!(s, Step::Reversal(_)))
    }

    /// Tape gradients against central differences of the forward value,
    /// corrected by [`Self::reversal_factors`].
    pub fn check(&self) -> Result<GradCheck> {
        let factors = self.reversal_factors();
        let eps = 1e-5;
        let eval = |point: &[Matrix]| -> Result<(Tape, Var)> {
            let mut tape = Tape::new();
            let vars: Vec<Var> = point
                .iter()
                .enumerate()
                .map(|(i, m)| tape.param(ParamId(i), m.clone()))
                .collect();
            let out = self.eval(&mut tape, &vars)?;
            Ok((tape, out))
        };
        let (tape, out) = eval(&self.point)?;
        let grads = tape.backward(out)?;
        let mut work = self.point.clone();
        let mut max_rel_error: f64 = 0.0;
        for i in 0..work.len() {
            for j in 0..work[i].data().len() {
                let orig = work[i].data()[j];
                work[i].data_mut()[j] = orig + eps;
                let (t, o) = eval(&work)?;
                let plus = t.value(o).item()?;
                work[i].data_mut()[j] = orig - eps;
                let (t, o) = eval(&work)?;
                let minus = t.value(o).item()?;
                work[i].data_mut()[j] = orig;
                let numeric = factors[i] * (plus - minus) / (2.0 * eps);
                let analytic = grads.get(ParamId(i)).expect("every input is a parameter").data()[j];
                let denom = analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR);
                max_rel_error = max_rel_error.max((analytic - numeric).abs() / denom);
            }
        }
        Ok(GradCheck {
            max_rel_error,
            min_relu_margin: tape.min_relu_margin(),
        })
    }

    /// The library's own checker; valid only without reversals.
    pub fn library_check(&self) -> Result<GradCheck> {
        finite_diff_check(|t, v| self.eval(t, v), &self.point, 1e-5)
    }
}

/// Relu inputs closer to zero than this are treated as sitting on the kink.
pub const KINK_MARGIN: f64 = 1e-3;

/// Checks `count` random compositions drawn from `seed`, resampling any
/// that land on a relu kink. Returns the worst relative error and the
/// composition that produced it.
pub fn gradient_oracle(seed: u64, count: usize) -> (f64, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = (0.0, String::new());
    let mut done = 0;
    while done < count {
        let c = Composition::sample(&mut rng);
        let check = c.check().expect("composition evaluates");
        if check.min_relu_margin < KINK_MARGIN {
            continue;
        }
        if check.max_rel_error > worst.0 {
            worst = (check.max_rel_error, c.description.clone());
        }
        done += 1;
    }
    worst
}
