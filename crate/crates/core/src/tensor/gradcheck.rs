use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Below this magnitude, gradient discrepancies are measured absolutely.
const MAGNITUDE_FLOOR: f64 = 1e-6;

/// `|analytic − numeric| / max(|analytic|, |numeric|, 1e-6)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(MAGNITUDE_FLOOR);
    (analytic - numeric).abs() / scale
}

/// Compares reverse-mode gradients of a scalar function against five-point
/// central differences and returns the worst relative error over all input
/// coordinates.
pub fn grad_check<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape<'_>, &[Var]) -> Result<Var>,
{
    if !(eps > 0.0 && eps <= 1e-2) {
        return Err(Error::Contract(format!("grad_check eps {eps} outside (0, 1e-2]")));
    }

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t)).collect();
    let out = f(&mut tape, &vars)?;
    let mut grads = tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars.iter().map(|&v| grads.take(v)).collect();

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| tape.param(t)).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).data()[0])
    };

    let mut worst: f64 = 0.0;
    let mut work = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.numel() {
            let orig = input.data()[j];
            let mut at = |offset: f64| -> Result<f64> {
                work[i].data_mut()[j] = orig + offset;
                eval(&work)
            };
            let (p1, m1) = (at(eps)?, at(-eps)?);
            let (p2, m2) = (at(2.0 * eps)?, at(-2.0 * eps)?);
            work[i].data_mut()[j] = orig;
            let numeric = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * eps);
            worst = worst.max(relative_error(analytic[i][j], numeric));
        }
    }
    Ok(worst)
}
