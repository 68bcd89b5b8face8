//! Central finite-difference verification of [`Tape::backward`].

use ndarray::Array2;

use crate::error::Result;
use crate::tape::{Tape, Var};

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Largest per-parameter relative error.
    pub max_rel_error: f64,
    /// `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖)` per parameter.
    pub per_param: Vec<f64>,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error <= tolerance
    }
}

/// Norms below this are treated as an exact zero gradient.
const ZERO_FLOOR: f64 = 1e-10;

/// Compares reverse-mode gradients of `build` with central differences of
/// step `h`.
///
/// `build` must be deterministic: it receives a fresh tape and one leaf per
/// entry of `params` and returns the scalar loss.
pub fn grad_check<F>(build: F, params: &[Array2<f64>], h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |ps: &[Array2<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps.iter().map(|p| tape.constant(p.clone())).collect();
        let loss = build(&mut tape, &vars)?;
        Ok(tape.scalar(loss))
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let loss = build(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;

    let mut work: Vec<Array2<f64>> = params.to_vec();
    let mut per_param = Vec::with_capacity(params.len());
    for (k, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var);
        let mut diff2 = 0.0;
        let mut a2 = 0.0;
        let mut n2 = 0.0;
        for idx in 0..params[k].len() {
            let (r, c) = (idx / params[k].ncols(), idx % params[k].ncols());
            let orig = work[k][[r, c]];
            work[k][[r, c]] = orig + h;
            let plus = eval(&work)?;
            work[k][[r, c]] = orig - h;
            let minus = eval(&work)?;
            work[k][[r, c]] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[[r, c]];
            diff2 += (a - numeric).powi(2);
            a2 += a * a;
            n2 += numeric * numeric;
        }
        let denom = a2.sqrt().max(n2.sqrt());
        per_param.push(if denom < ZERO_FLOOR {
            diff2.sqrt()
        } else {
            diff2.sqrt() / denom
        });
    }
    let max_rel_error = per_param.iter().cloned().fold(0.0, f64::max);
    Ok(GradCheckReport {
        max_rel_error,
        per_param,
    })
}
