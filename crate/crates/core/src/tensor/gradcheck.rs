//! Central finite-difference gradient checking in 64-bit precision.
//!
//! The numerical side only ever evaluates forward values, so it stays
//! independent of the gradient rules it is checking.

use super::{Tape, Tensor, Var};
use crate::error::Result;

pub const DEFAULT_STEP: f64 = 1e-4;

/// Entries whose gradients are both below this are compared absolutely.
pub const MAGNITUDE_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// (input index, element index, analytic, numeric) of the worst entry.
    pub worst: Option<(usize, usize, f64, f64)>,
    pub checked: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(MAGNITUDE_FLOOR)
}

fn eval<F>(build: &F, inputs: &[Tensor<f64>]) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::no_grad();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = build(&mut tape, &vars)?;
    tape.scalar(out)
}

/// Compares `backward()` against central differences for every element of
/// every input. `build` maps input nodes to a scalar output.
pub fn check_gradients<F>(inputs: &[Tensor<f64>], step: f64, build: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = build(&mut tape, &vars)?;
    tape.backward(out)?;

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
    };
    let mut probe: Vec<Tensor<f64>> = inputs.to_vec();
    for (k, input) in inputs.iter().enumerate() {
        let analytic = tape
            .grad(vars[k])
            .unwrap_or_else(|| Tensor::zeros(input.shape()));
        for i in 0..input.len() {
            let orig = input.data()[i];
            probe[k].data_mut()[i] = orig + step;
            let up = eval(&build, &probe)?;
            probe[k].data_mut()[i] = orig - step;
            let down = eval(&build, &probe)?;
            probe[k].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * step);
            let a = analytic.data()[i];
            let err = relative_error(a, numeric);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = Some((k, i, a, numeric));
            }
        }
    }
    Ok(report)
}
