//! Central finite-difference gradient checks against [`Tape::backward`].

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Denominator floor for the relative error, so entries whose true gradient
/// is zero are compared absolutely.
pub const RELATIVE_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub max_rel_err: f64,
    /// `(input, element)` where the worst error occurred.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(RELATIVE_FLOOR)
}

/// Compares reverse-mode gradients of the scalar `f(inputs)` with central
/// differences of step `h` on every input element.
pub fn check_gradients<F>(f: F, inputs: &[Tensor], h: f64) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars = inputs.iter().map(|t| tape.param(t.clone())).collect::<Result<Vec<_>>>()?;
    let root = f(&mut tape, &vars)?;
    let mut grads = tape.backward(root)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| grads.take(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars = xs.iter().map(|t| tape.constant(t.clone())).collect::<Result<Vec<_>>>()?;
        let r = f(&mut tape, &vars)?;
        let v = tape.value(r);
        if v.len() != 1 {
            return Err(Error::NonScalarRoot(v.shape().to_vec()));
        }
        Ok(v.item())
    };

    let mut out = GradCheck {
        max_rel_err: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    let mut work = inputs.to_vec();
    for (i, g) in analytic.iter().enumerate() {
        for k in 0..inputs[i].len() {
            let x = inputs[i].data()[k];
            work[i].data_mut()[k] = x + h;
            let up = eval(&work)?;
            work[i].data_mut()[k] = x - h;
            let down = eval(&work)?;
            work[i].data_mut()[k] = x;
            let numeric = (up - down) / (2.0 * h);
            let a = g.data()[k];
            let e = relative_error(a, numeric);
            if e > out.max_rel_err || out.checked == 0 {
                out.max_rel_err = e;
                out.worst = (i, k);
                out.analytic = a;
                out.numeric = numeric;
            }
            out.checked += 1;
        }
    }
    Ok(out)
}
