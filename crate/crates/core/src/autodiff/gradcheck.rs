use serde::Serialize;

use super::{Tape, Tensor, Var};
use crate::error::Result;
use crate::scalar::Scalar;

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckEntry {
    pub param: usize,
    pub element: usize,
    pub autodiff: f64,
    pub finite_difference: f64,
    pub rel_err: f64,
}

/// Outcome of comparing autodiff gradients against central differences.
///
/// `rel_err = |autodiff - fd| / max(1, |fd|)` per parameter element.
#[derive(Clone, Debug, Default, Serialize)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    /// Largest errors first, at most ten.
    pub worst: Vec<GradCheckEntry>,
    /// Set when the graph was non-deterministic and the check did not run.
    pub skipped: Option<String>,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.skipped.is_none() && self.max_rel_err < tolerance
    }
}

/// Checks the gradient of the scalar graph built by `f` with respect to each
/// tensor in `params`.
///
/// `f` receives a fresh tape and the parameter handles and must return a
/// scalar. It is re-run for every perturbed element, so it has to be
/// deterministic; graphs that record train-mode dropout are skipped.
pub fn check_gradients<T, F>(f: F, params: &[Tensor<T>]) -> Result<GradCheckReport>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    let eval = |params: &[Tensor<T>]| -> Result<(Tape<T>, Vec<Var>, Var)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok((tape, vars, out))
    };

    let (mut tape, vars, out) = eval(params)?;
    if tape.is_stochastic() {
        return Ok(GradCheckReport {
            skipped: Some("graph records train-mode dropout; gradient check skipped".into()),
            ..Default::default()
        });
    }
    tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(params)
        .map(|(&v, p)| match tape.grad(v) {
            Some(g) => g.iter().map(|x| x.as_f64()).collect(),
            None => vec![0.0; p.len()],
        })
        .collect();

    let h = T::lit(FD_STEP);
    let mut work = params.to_vec();
    let mut entries = Vec::new();
    for (pi, p) in params.iter().enumerate() {
        for e in 0..p.len() {
            let orig = p.data()[e];
            work[pi].data_mut()[e] = orig + h;
            let plus = eval(&work)?;
            let fp = plus.0.value(plus.2).data()[0].as_f64();
            work[pi].data_mut()[e] = orig - h;
            let minus = eval(&work)?;
            let fm = minus.0.value(minus.2).data()[0].as_f64();
            work[pi].data_mut()[e] = orig;

            let fd = (fp - fm) / (2.0 * FD_STEP);
            let ad = analytic[pi][e];
            entries.push(GradCheckEntry {
                param: pi,
                element: e,
                autodiff: ad,
                finite_difference: fd,
                rel_err: (ad - fd).abs() / fd.abs().max(1.0),
            });
        }
    }
    let checked = entries.len();
    entries.sort_by(|a, b| b.rel_err.total_cmp(&a.rel_err));
    let max_rel_err = entries.first().map_or(0.0, |e| e.rel_err);
    entries.truncate(10);
    Ok(GradCheckReport {
        checked,
        max_rel_err,
        worst: entries,
        skipped: None,
    })
}
