use crate::error::{Error, Result};
use crate::linalg::Matrix;

use super::tape::{Tape, Var};

/// Outcome of comparing analytic gradients with central differences.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(leaf, row, col)` of the worst entry.
    pub worst: Option<(usize, usize, usize)>,
    pub entries_checked: usize,
    pub tol: f64,
    pub passed: bool,
}

/// Denominator floor for the relative error: entries whose gradients are
/// smaller than this are compared on an absolute scale.
pub const REL_ERROR_FLOOR: f64 = 1e-3;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// Checks the tape gradient of a scalar function against central differences.
///
/// `f` builds the computation on a fresh tape from the leaf handles it is
/// given and returns the `1 x 1` root.
pub fn grad_check<F>(f: F, leaves: &[Matrix], step: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let analytic = analytic_grads(&f, leaves)?;
    grad_check_against(&f, leaves, &analytic, step, tol)
}

/// Runs `f` once on a tape and returns the gradient of every leaf.
pub fn analytic_grads<F>(f: &F, leaves: &[Matrix]) -> Result<Vec<Matrix>>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = leaves.iter().map(|m| tape.param(m.clone())).collect();
    let root = f(&mut tape, &vars)?;
    tape.backward(root)?;
    Ok(vars.iter().map(|v| tape.grad(*v).clone()).collect())
}

/// Same as [`grad_check`] but with caller-supplied analytic gradients, so a
/// deliberately wrong gradient can be checked as a negative control.
pub fn grad_check_against<F>(
    f: &F,
    leaves: &[Matrix],
    analytic: &[Matrix],
    step: f64,
    tol: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(step > 0.0) {
        return Err(Error::Config(format!("grad_check step must be > 0, got {step}")));
    }
    if analytic.len() != leaves.len() {
        return Err(Error::shape(
            "grad_check",
            format!("{} gradients for {} leaves", analytic.len(), leaves.len()),
        ));
    }
    let eval = |values: &[Matrix]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|m| tape.param(m.clone())).collect();
        let root = f(&mut tape, &vars)?;
        Ok(tape.value(root).item())
    };

    let mut work: Vec<Matrix> = leaves.to_vec();
    let mut max_rel_error = 0.0;
    let mut worst = None;
    let mut entries_checked = 0;
    for (l, leaf) in leaves.iter().enumerate() {
        if analytic[l].shape() != leaf.shape() {
            return Err(Error::shape(
                "grad_check",
                format!("gradient {:?} for leaf {:?}", analytic[l].shape(), leaf.shape()),
            ));
        }
        for r in 0..leaf.rows() {
            for c in 0..leaf.cols() {
                let orig = leaf[(r, c)];
                work[l][(r, c)] = orig + step;
                let plus = eval(&work)?;
                work[l][(r, c)] = orig - step;
                let minus = eval(&work)?;
                work[l][(r, c)] = orig;
                let numeric = (plus - minus) / (2.0 * step);
                let err = relative_error(analytic[l][(r, c)], numeric);
                entries_checked += 1;
                if err > max_rel_error || err.is_nan() {
                    max_rel_error = err;
                    worst = Some((l, r, c));
                }
            }
        }
    }
    Ok(GradCheckReport {
        max_rel_error,
        worst,
        entries_checked,
        tol,
        passed: max_rel_error <= tol,
    })
}
