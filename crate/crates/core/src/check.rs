//! Finite-difference verification of tape gradients.
//!
//! Central differences, f64 only: perturbing by eps = 1e-5 and comparing
//! (f(x+eps) - f(x-eps)) / 2 eps against the analytic gradient. Relative
//! error uses max(|analytic|, |numeric|, 1e-8) in the denominator so
//! near-zero gradients don't blow up the ratio.

use crate::error::Result;
use crate::tensor::{Tape, Var};

pub const DEFAULT_EPS: f64 = 1e-5;

/// Relative disagreement between an analytic and numeric derivative.
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-8);
    (analytic - numeric).abs() / denom
}

/// Check the gradient of a scalar-valued tape program.
///
/// `build` receives a fresh tape plus leaves created from `inputs` (each a
/// buffer with its shape) and must return a 1 x 1 loss. Returns the worst
/// relative error across every input element.
pub fn grad_check<F>(inputs: &[(Vec<f64>, (usize, usize))], eps: f64, build: F) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |bufs: &[Vec<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = bufs
            .iter()
            .zip(inputs.iter())
            .map(|(buf, (_, (r, c)))| tape.leaf(buf.clone(), *r, *c, true))
            .collect();
        let loss = build(&mut tape, &vars)?;
        Ok(tape.scalar_value(loss))
    };

    // Analytic pass.
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|(buf, (r, c))| tape.leaf(buf.clone(), *r, *c, true))
        .collect();
    let loss = build(&mut tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs.iter())
        .map(|(v, (buf, _))| {
            tape.grad(*v)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; buf.len()])
        })
        .collect();

    // Numeric pass, one central difference per element.
    let mut bufs: Vec<Vec<f64>> = inputs.iter().map(|(buf, _)| buf.clone()).collect();
    let mut worst = 0.0f64;
    for k in 0..bufs.len() {
        for i in 0..bufs[k].len() {
            let orig = bufs[k][i];
            bufs[k][i] = orig + eps;
            let up = eval(&bufs)?;
            bufs[k][i] = orig - eps;
            let down = eval(&bufs)?;
            bufs[k][i] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let err = rel_error(analytic[k][i], numeric);
            if err > worst {
                worst = err;
            }
        }
    }
    Ok(worst)
}
