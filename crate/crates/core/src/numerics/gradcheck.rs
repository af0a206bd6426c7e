//! Central finite-difference gradient checking.
//!
//! The numeric side only ever evaluates the forward function on fresh tapes,
//! so it shares no code path with [`Tape::backward`].

use crate::error::Result;
use crate::numerics::{Tape, Tensor, Var};

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// `||analytic - numeric|| / max(||analytic||, ||numeric||)` per input.
    pub relative_errors: Vec<f64>,
    pub analytic: Vec<Vec<f64>>,
    pub numeric: Vec<Vec<f64>>,
}

impl GradCheckReport {
    pub fn compare(analytic: Vec<Vec<f64>>, numeric: Vec<Vec<f64>>) -> Self {
        let relative_errors = analytic
            .iter()
            .zip(&numeric)
            .map(|(a, n)| relative_error(a, n))
            .collect();
        Self {
            relative_errors,
            analytic,
            numeric,
        }
    }

    pub fn max_relative_error(&self) -> f64 {
        self.relative_errors.iter().copied().fold(0.0, f64::max)
    }
}

fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let denom = na.max(nb);
    if denom < 1e-12 {
        diff
    } else {
        diff / denom
    }
}

/// Compares reverse-mode gradients of a scalar function against central
/// differences with step `h`, for every element of every input.
pub fn check_gradients<F>(inputs: &[Tensor<f64>], f: F, h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).data()[0])
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.variable(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars.iter().map(|&v| grads.wrt(v)).collect();

    let numeric = numeric_gradients(inputs, eval, h)?;
    Ok(GradCheckReport::compare(analytic, numeric))
}

/// Central differences of `eval` with respect to every element of `inputs`.
pub fn numeric_gradients<F>(inputs: &[Tensor<f64>], mut eval: F, h: f64) -> Result<Vec<Vec<f64>>>
where
    F: FnMut(&[Tensor<f64>]) -> Result<f64>,
{
    let mut numeric = Vec::with_capacity(inputs.len());
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for i in 0..inputs.len() {
        let mut g = vec![0.0; inputs[i].numel()];
        for (j, gj) in g.iter_mut().enumerate() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + h;
            let up = eval(&work)?;
            work[i].data_mut()[j] = orig - h;
            let down = eval(&work)?;
            work[i].data_mut()[j] = orig;
            *gj = (up - down) / (2.0 * h);
        }
        numeric.push(g);
    }
    Ok(numeric)
}
