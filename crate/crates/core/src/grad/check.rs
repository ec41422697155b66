use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{invalid, Error, Result};
use crate::scalar::Scalar;

/// Outcome of comparing analytic gradients against central differences.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    /// `max |analytic - numeric| / max(|analytic|, |numeric|, 1e-12)` over all entries.
    pub max_rel_error: f64,
    /// `(parameter index, flat entry index)` where the maximum occurred.
    pub worst: (usize, usize),
    pub entries: usize,
}

impl GradCheck {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-12)
}

fn evaluate<T, F>(f: &F, params: &[Tensor<T>]) -> Result<(T, Tape<T>, Var, Vec<Var>)>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let out = f(&mut tape, &vars)?;
    Ok((tape.item(out), tape, out, vars))
}

/// Analytic gradients of `f` at `params`, one tensor per parameter.
pub fn analytic_gradients<T, F>(f: &F, params: &[Tensor<T>]) -> Result<Vec<Tensor<T>>>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    let (_, tape, out, vars) = evaluate(f, params)?;
    let grads = tape.backward(out)?;
    Ok(vars.iter().map(|&v| grads.wrt(v).clone()).collect())
}

/// Checks tape gradients of the scalar function `f` against central
/// differences with step `step`.
///
/// `f` receives a fresh tape and one parameter handle per entry of `params`
/// and must return a scalar node.
pub fn finite_difference_check<T, F>(f: F, params: &[Tensor<T>], step: T) -> Result<GradCheck>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    let analytic = analytic_gradients(&f, params)?;
    check_against(f, params, step, &analytic)
}

/// Compares the supplied `analytic` gradients against central differences of `f`.
pub fn check_against<T, F>(f: F, params: &[Tensor<T>], step: T, analytic: &[Tensor<T>]) -> Result<GradCheck>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    if step <= T::zero() {
        return Err(invalid("finite-difference step must be positive"));
    }
    if analytic.len() != params.len() || analytic.iter().zip(params).any(|(a, p)| a.shape() != p.shape()) {
        return Err(invalid("analytic gradients do not match parameter shapes"));
    }
    let base1 = evaluate(&f, params)?.0;
    let base2 = evaluate(&f, params)?.0;
    if base1 != base2 {
        return Err(Error::NonDeterministic(base1.as_f64(), base2.as_f64()));
    }

    let mut work: Vec<Tensor<T>> = params.to_vec();
    let mut report = GradCheck { max_rel_error: 0.0, worst: (0, 0), entries: 0 };
    let two_h = (step + step).as_f64();
    for p in 0..params.len() {
        for e in 0..params[p].len() {
            let orig = params[p].data()[e];
            work[p].data_mut()[e] = orig + step;
            let plus = evaluate(&f, &work)?.0.as_f64();
            work[p].data_mut()[e] = orig - step;
            let minus = evaluate(&f, &work)?.0.as_f64();
            work[p].data_mut()[e] = orig;
            let numeric = (plus - minus) / two_h;
            let err = relative_error(analytic[p].data()[e].as_f64(), numeric);
            if err > report.max_rel_error || report.entries == 0 {
                report.max_rel_error = err;
                report.worst = (p, e);
            }
            report.entries += 1;
        }
    }
    Ok(report)
}
