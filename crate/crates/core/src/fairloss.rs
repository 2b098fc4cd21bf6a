//! Per-exit target and fairness losses and their weighted aggregate.
//!
//! Each exit contributes `cross_entropy + λ · fairness_term`, where the
//! fairness term is one of
//!
//! * HSIC between the head-input features and the sensitive label (biased
//!   trace estimator, Gaussian kernel on features, delta kernel on labels);
//! * class-conditional cross-group MMD² between student features and the
//!   features of a frozen teacher;
//! * the cross-entropy of an adversary predicting the sensitive label from
//!   gradient-reversed features.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Head;
use crate::numkit::{median_bandwidth, Matrix, Tape, Var};

/// Exit weights α and fairness trade-off λ.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub alpha: Vec<f64>,
    pub lambda: f64,
}

impl LossWeights {
    /// α for three internal classifiers plus the final classifier.
    pub const DEFAULT_ALPHA: [f64; 4] = [0.3, 0.45, 0.6, 0.9];

    /// Default α for `n_exits` exits: the four-exit values when they fit,
    /// otherwise an even ramp from 0.3 to 0.9.
    pub fn for_exits(n_exits: usize, lambda: f64) -> Self {
        let alpha = match n_exits {
            4 => Self::DEFAULT_ALPHA.to_vec(),
            1 => vec![0.9],
            n => (0..n)
                .map(|i| {
                    let t = i as f64 / (n - 1) as f64;
                    0.3 * (1.0 - t) + 0.9 * t
                })
                .collect(),
        };
        Self { alpha, lambda }
    }

    /// Only the final exit is trained.
    pub fn final_only(n_exits: usize, lambda: f64) -> Self {
        let mut alpha = vec![0.0; n_exits];
        alpha[n_exits - 1] = 1.0;
        Self { alpha, lambda }
    }

    pub fn validate(&self, n_exits: usize) -> Result<()> {
        if self.alpha.len() != n_exits {
            return Err(Error::Usage(format!(
                "{} exit weights for {n_exits} exits",
                self.alpha.len()
            )));
        }
        if self.alpha.iter().any(|&a| !(a >= 0.0 && a.is_finite())) {
            return Err(Error::Parameter("exit weights must be finite and >= 0".into()));
        }
        if self.alpha.iter().all(|&a| a == 0.0) {
            return Err(Error::Parameter("at least one exit weight must be positive".into()));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Parameter(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        Ok(())
    }

    /// Indices of exits with positive weight.
    pub fn active_exits(&self) -> Vec<usize> {
        (0..self.alpha.len()).filter(|&i| self.alpha[i] > 0.0).collect()
    }
}

/// Feature-kernel bandwidth.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bandwidth {
    /// Median pairwise distance of the samples involved.
    #[default]
    Median,
    Fixed(f64),
}

impl Bandwidth {
    fn resolve(self, parts: &[&Matrix]) -> f64 {
        match self {
            Bandwidth::Median => median_bandwidth(parts),
            Bandwidth::Fixed(s) => s,
        }
    }
}

/// Fairness regularizer attached to every exit.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "tag", rename_all = "snake_case", deny_unknown_fields)]
pub enum FairnessMethod {
    #[default]
    None,
    Hsic {
        #[serde(default)]
        bandwidth: Bandwidth,
    },
    MmdDistill {
        #[serde(default)]
        bandwidth: Bandwidth,
    },
    Adversarial {
        hidden: usize,
        reversal_strength: f64,
    },
}

impl FairnessMethod {
    pub fn name(&self) -> &'static str {
        match self {
            FairnessMethod::None => "none",
            FairnessMethod::Hsic { .. } => "hsic",
            FairnessMethod::MmdDistill { .. } => "mmd_distill",
            FairnessMethod::Adversarial { .. } => "adversarial",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            FairnessMethod::Hsic { bandwidth: Bandwidth::Fixed(s) }
            | FairnessMethod::MmdDistill { bandwidth: Bandwidth::Fixed(s) }
                if !(s > 0.0 && s.is_finite()) =>
            {
                Err(Error::Parameter(format!("fixed bandwidth must be positive, got {s}")))
            }
            FairnessMethod::Adversarial {
                hidden,
                reversal_strength,
            } if hidden == 0 || !(reversal_strength >= 0.0 && reversal_strength.is_finite()) => {
                Err(Error::Parameter(
                    "adversary needs hidden >= 1 and a finite nonnegative reversal strength".into(),
                ))
            }
            _ => Ok(()),
        }
    }
}

/// Per-exit inputs a fairness term needs beyond the batch itself.
#[derive(Clone, Copy, Debug)]
pub enum FairnessTerm<'a> {
    None,
    Hsic {
        bandwidth: Bandwidth,
    },
    Mmd {
        teacher_features: &'a Matrix,
        bandwidth: Bandwidth,
    },
    Adversarial {
        adversary: &'a Head,
        first_param_id: usize,
        reversal_strength: f64,
    },
}

/// Logits and head-input features of one exit.
#[derive(Clone, Copy, Debug)]
pub struct ExitVars {
    pub logits: Var,
    pub features: Var,
}

/// `cross_entropy(logits, targets) + λ · fairness_term`. The term is skipped
/// entirely when λ = 0 or the method is `None`.
pub fn exit_loss(
    tape: &mut Tape,
    exit: ExitVars,
    targets: &[usize],
    sensitives: &[usize],
    term: FairnessTerm<'_>,
    lambda: f64,
) -> Result<Var> {
    let ce = tape.cross_entropy(exit.logits, targets)?;
    if lambda == 0.0 || matches!(term, FairnessTerm::None) {
        return Ok(ce);
    }
    let fair = match term {
        FairnessTerm::None => unreachable!(),
        FairnessTerm::Hsic { bandwidth } => hsic_tape(tape, exit.features, sensitives, bandwidth)?,
        FairnessTerm::Mmd {
            teacher_features,
            bandwidth,
        } => mmd_distill_tape(
            tape,
            exit.features,
            teacher_features,
            targets,
            sensitives,
            bandwidth,
        )?,
        FairnessTerm::Adversarial {
            adversary,
            first_param_id,
            reversal_strength,
        } => adversarial_term(
            tape,
            exit.features,
            sensitives,
            adversary,
            first_param_id,
            reversal_strength,
        )?,
    };
    let scaled = tape.scale(fair, lambda);
    tape.add(ce, scaled)
}

fn single_group(sensitives: &[usize]) -> bool {
    sensitives.windows(2).all(|w| w[0] == w[1])
}

/// Biased HSIC `trace(K_c L_c) / (n−1)²` on the tape.
pub fn hsic_tape(
    tape: &mut Tape,
    features: Var,
    sensitives: &[usize],
    bandwidth: Bandwidth,
) -> Result<Var> {
    let n = tape.value(features).rows();
    if n < 4 {
        return Err(Error::Input(format!("hsic needs at least 4 samples, got {n}")));
    }
    if sensitives.len() != n {
        return Err(Error::dim(
            "hsic",
            format!("{} sensitive labels for {n} rows", sensitives.len()),
        ));
    }
    if single_group(sensitives) {
        warn!("hsic: batch holds a single sensitive group; term is zero");
    }
    let sigma = bandwidth.resolve(&[tape.value(features)]);
    let k = tape.gaussian_kernel(features, sigma)?;
    // trace(HKH · HLH) = Σ K ⊙ (HLH) since H is idempotent and HLH symmetric.
    let lc = centered_delta_kernel(sensitives);
    let prod = tape.mul_const(k, lc)?;
    let total = tape.sum(prod);
    let denom = ((n - 1) * (n - 1)) as f64;
    Ok(tape.scale(total, 1.0 / denom))
}

/// `H L H` for the delta kernel `L[i,j] = [a_i = a_j]`.
fn centered_delta_kernel(sensitives: &[usize]) -> Matrix {
    let n = sensitives.len();
    let nf = n as f64;
    let groups = sensitives.iter().max().map_or(0, |m| m + 1);
    let mut counts = vec![0.0; groups];
    for &a in sensitives {
        counts[a] += 1.0;
    }
    // (HLH)_ij = L_ij − r_i/n − r_j/n + s/n², r_i = count of i's group.
    let total: f64 = counts.iter().map(|c| c * c).sum();
    let mut out = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let l = if sensitives[i] == sensitives[j] { 1.0 } else { 0.0 };
            let v = l - counts[sensitives[i]] / nf - counts[sensitives[j]] / nf + total / (nf * nf);
            out.set(i, j, v);
        }
    }
    out
}

pub fn hsic(features: &Matrix, sensitives: &[usize], bandwidth: Bandwidth) -> Result<f64> {
    let mut tape = Tape::new();
    let f = tape.constant(features.clone());
    let v = hsic_tape(&mut tape, f, sensitives, bandwidth)?;
    tape.value(v).item()
}

/// Biased MMD² between two sample sets on the tape; `y` is untracked.
fn mmd2_tape(tape: &mut Tape, x: Var, y: Var, sigma: f64) -> Result<Var> {
    let kxx = tape.gaussian_kernel(x, sigma)?;
    let kyy = tape.gaussian_kernel(y, sigma)?;
    let kxy = tape.gaussian_cross_kernel(x, y, sigma)?;
    let mxx = tape.mean(kxx);
    let myy = tape.mean(kyy);
    let mxy = tape.mean(kxy);
    let cross = tape.scale(mxy, -2.0);
    let within = tape.add(mxx, myy)?;
    tape.add(within, cross)
}

/// Biased MMD² between the rows of `x` and the rows of `y`.
pub fn mmd2(x: &Matrix, y: &Matrix, bandwidth: Bandwidth) -> Result<f64> {
    let sigma = bandwidth.resolve(&[x, y]);
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let yv = tape.constant(y.clone());
    let v = mmd2_tape(&mut tape, xv, yv, sigma)?;
    tape.value(v).item()
}

/// `Σ_y MMD²(S[y,0], T[y,1]) + MMD²(S[y,1], T[y,0])` for student features `S`
/// and frozen teacher features `T`. Cells with fewer than two samples on
/// either side contribute zero.
pub fn mmd_distill_tape(
    tape: &mut Tape,
    student: Var,
    teacher: &Matrix,
    targets: &[usize],
    sensitives: &[usize],
    bandwidth: Bandwidth,
) -> Result<Var> {
    let n = tape.value(student).rows();
    if teacher.shape() != tape.value(student).shape() || targets.len() != n || sensitives.len() != n {
        return Err(Error::dim(
            "mmd_distill",
            "student, teacher, targets and sensitive labels must cover the same batch",
        ));
    }
    if let Some(&a) = sensitives.iter().find(|&&a| a > 1) {
        return Err(Error::Usage(format!(
            "mmd distillation needs exactly two sensitive groups, saw group {a}"
        )));
    }
    let n_classes = targets.iter().max().map_or(0, |m| m + 1);
    let rows_of = |y: usize, a: usize| -> Vec<usize> {
        (0..n).filter(|&i| targets[i] == y && sensitives[i] == a).collect()
    };
    let mut terms = Vec::new();
    for y in 0..n_classes {
        for (sa, ta) in [(0, 1), (1, 0)] {
            let s_rows = rows_of(y, sa);
            let t_rows = rows_of(y, ta);
            if s_rows.len() < 2 || t_rows.len() < 2 {
                warn!(
                    "mmd_distill: class {y} has {} student / {} teacher samples; term skipped",
                    s_rows.len(),
                    t_rows.len()
                );
                continue;
            }
            let s = tape.select_rows(student, &s_rows)?;
            let t_mat = teacher.select_rows(&t_rows)?;
            let sigma = bandwidth.resolve(&[tape.value(s), &t_mat]);
            let t = tape.constant(t_mat);
            terms.push(mmd2_tape(tape, s, t, sigma)?);
        }
    }
    match tape.add_all(&terms)? {
        Some(v) => Ok(v),
        None => Ok(tape.constant(Matrix::scalar(0.0))),
    }
}

pub fn mmd_distill(
    student: &Matrix,
    teacher: &Matrix,
    targets: &[usize],
    sensitives: &[usize],
    bandwidth: Bandwidth,
) -> Result<f64> {
    let mut tape = Tape::new();
    let s = tape.constant(student.clone());
    let v = mmd_distill_tape(&mut tape, s, teacher, targets, sensitives, bandwidth)?;
    tape.value(v).item()
}

/// Cross-entropy of `adversary` predicting the sensitive label from
/// gradient-reversed features.
pub fn adversarial_term(
    tape: &mut Tape,
    features: Var,
    sensitives: &[usize],
    adversary: &Head,
    first_param_id: usize,
    reversal_strength: f64,
) -> Result<Var> {
    let reversed = tape.gradient_reversal(features, reversal_strength)?;
    let logits = adversary.forward_tape(tape, reversed, first_param_id)?;
    tape.cross_entropy(logits, sensitives)
}

/// `Σᵢ αᵢ · lossᵢ`.
pub fn aggregate_loss(per_exit_losses: &[f64], weights: &LossWeights) -> Result<f64> {
    check_lengths(per_exit_losses.len(), weights)?;
    Ok(per_exit_losses
        .iter()
        .zip(&weights.alpha)
        .map(|(l, a)| a * l)
        .sum())
}

/// Tape form of [`aggregate_loss`]; `None` entries are exits whose loss was
/// not computed and must carry zero weight.
pub fn aggregate_loss_tape(
    tape: &mut Tape,
    per_exit_losses: &[Option<Var>],
    weights: &LossWeights,
) -> Result<Var> {
    check_lengths(per_exit_losses.len(), weights)?;
    let mut terms = Vec::new();
    for (loss, &alpha) in per_exit_losses.iter().zip(&weights.alpha) {
        match loss {
            Some(v) => terms.push(tape.scale(*v, alpha)),
            None if alpha == 0.0 => {}
            None => {
                return Err(Error::Usage("missing loss for an exit with positive weight".into()))
            }
        }
    }
    tape.add_all(&terms)?
        .ok_or_else(|| Error::Usage("no exit losses to aggregate".into()))
}

fn check_lengths(n: usize, weights: &LossWeights) -> Result<()> {
    if n != weights.alpha.len() {
        return Err(Error::Usage(format!(
            "{n} exit losses for {} weights",
            weights.alpha.len()
        )));
    }
    Ok(())
}
