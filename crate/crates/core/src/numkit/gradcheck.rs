use super::matrix::Matrix;
use super::tape::{ParamId, Tape, Var};
use crate::error::{Error, Result};

/// Relative error denominators never drop below this value, so components
/// whose true gradient is ~0 are compared on an absolute scale.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

/// Outcome of comparing analytic and central-difference gradients.
#[derive(Clone, Copy, Debug)]
pub struct GradCheck {
    pub max_rel_error: f64,
    /// Smallest |input| seen by a relu at the check point. Configurations
    /// where this is below the perturbation scale sit on a kink and should be
    /// resampled by the caller.
    pub min_relu_margin: f64,
}

/// Compares reverse-mode gradients of `f` at `point` with central finite
/// differences of step `epsilon`, componentwise over every input matrix.
pub fn finite_diff_check<F>(f: F, point: &[Matrix], epsilon: f64) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(epsilon > 0.0) {
        return Err(Error::Parameter(format!(
            "epsilon must be positive, got {epsilon}"
        )));
    }
    let eval = |values: &[Matrix]| -> Result<(Tape, Var)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values
            .iter()
            .enumerate()
            .map(|(i, m)| tape.param(ParamId(i), m.clone()))
            .collect();
        let out = f(&mut tape, &vars)?;
        Ok((tape, out))
    };

    let (tape, out) = eval(point)?;
    let analytic = tape.backward(out)?;
    let min_relu_margin = tape.min_relu_margin();

    let mut max_rel_error: f64 = 0.0;
    let mut work: Vec<Matrix> = point.to_vec();
    for (i, m) in point.iter().enumerate() {
        let grad = analytic
            .get(ParamId(i))
            .ok_or_else(|| Error::Usage(format!("missing gradient for input {i}")))?;
        for k in 0..m.data().len() {
            let orig = m.data()[k];
            work[i].data_mut()[k] = orig + epsilon;
            let (t, o) = eval(&work)?;
            let plus = t.value(o).item()?;
            work[i].data_mut()[k] = orig - epsilon;
            let (t, o) = eval(&work)?;
            let minus = t.value(o).item()?;
            work[i].data_mut()[k] = orig;

            let numeric = (plus - minus) / (2.0 * epsilon);
            let a = grad.data()[k];
            let denom = a.abs().max(numeric.abs()).max(REL_ERROR_FLOOR);
            max_rel_error = max_rel_error.max((a - numeric).abs() / denom);
        }
    }
    Ok(GradCheck {
        max_rel_error,
        min_relu_margin,
    })
}
