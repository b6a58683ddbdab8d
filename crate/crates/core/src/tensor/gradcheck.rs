//! Central finite-difference gradient oracle.

use super::{Tape, Tensor, Var};
use crate::error::Result;

/// Outcome of comparing analytic and numeric gradients.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// `max |analytic - numeric| / max(|analytic|, |numeric|, 1e-6)` over every entry.
    pub max_rel_error: f64,
    /// `(param index, entry index)` of the worst entry.
    pub worst: Option<(usize, usize)>,
    pub entries_checked: usize,
    pub tol: f64,
    pub passed: bool,
    /// Set when `f` itself failed; the check then counts as failed.
    pub error: Option<String>,
}

const DENOM_FLOOR: f64 = 1e-6;

/// Relative error with an absolute floor so entries whose true gradient is ~0
/// are judged against finite-difference round-off instead of exploding.
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(DENOM_FLOOR)
}

/// Checks the gradient of the scalar computation `f` with respect to every
/// entry of `params`, using `(f(x + eps) - f(x - eps)) / 2 eps`.
pub fn grad_check<F>(f: F, params: &[Tensor], eps: f64, tol: f64) -> GradCheckReport
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let failed = |e: String| GradCheckReport {
        max_rel_error: f64::INFINITY,
        worst: None,
        entries_checked: 0,
        tol,
        passed: false,
        error: Some(e),
    };

    let analytic = match analytic_grads(&f, params) {
        Ok(g) => g,
        Err(e) => return failed(e.to_string()),
    };

    let eval = |ps: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps.iter().map(|p| tape.constant(p)).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.scalar(out))
    };

    let mut work: Vec<Tensor> = params.to_vec();
    let mut max_err = 0.0f64;
    let mut worst = None;
    let mut count = 0;
    for pi in 0..params.len() {
        for e in 0..params[pi].numel() {
            let orig = params[pi].data()[e];
            work[pi].data_mut()[e] = orig + eps;
            let plus = eval(&work);
            work[pi].data_mut()[e] = orig - eps;
            let minus = eval(&work);
            work[pi].data_mut()[e] = orig;
            let (plus, minus) = match (plus, minus) {
                (Ok(a), Ok(b)) => (a, b),
                (Err(err), _) | (_, Err(err)) => return failed(err.to_string()),
            };
            let numeric = (plus - minus) / (2.0 * eps);
            let err = rel_error(analytic[pi][e], numeric);
            count += 1;
            if err > max_err || worst.is_none() {
                max_err = max_err.max(err);
                worst = Some((pi, e));
            }
        }
    }
    GradCheckReport {
        max_rel_error: max_err,
        worst,
        entries_checked: count,
        tol,
        passed: max_err <= tol,
        error: None,
    }
}

/// Analytic gradients of `f` for each parameter, in order.
pub fn analytic_grads<F>(f: &F, params: &[Tensor]) -> Result<Vec<Vec<f64>>>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params
        .iter()
        .map(|p| tape.leaf(&p.clone().with_grad(true)))
        .collect();
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;
    Ok(vars
        .iter()
        .zip(params)
        .map(|(&v, p)| tape.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; p.numel()]))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn sum_has_all_ones_gradient() {
        let mut rng = Rng::new(3);
        let w = Tensor::randn([3, 4], 1.0, &mut rng);
        let f = |t: &mut Tape, v: &[Var]| t.sum(v[0]);
        let g = analytic_grads(&f, std::slice::from_ref(&w)).unwrap();
        assert!(g[0].iter().all(|&x| x == 1.0));
        let report = grad_check(f, &[w], 1e-5, 1e-4);
        assert!(report.passed);
        assert!(report.max_rel_error < 1e-9);
        assert_eq!(report.entries_checked, 12);
    }

    #[test]
    fn wrong_gradient_is_reported_not_aborted() {
        // log of a negative number fails inside f; the report says so.
        let w = Tensor::new([2], vec![-1.0, 2.0]).unwrap();
        let report = grad_check(|t, v| { let l = t.log(v[0])?; t.sum(l) }, &[w], 1e-5, 1e-4);
        assert!(!report.passed);
        assert!(report.error.is_some());
    }
}
