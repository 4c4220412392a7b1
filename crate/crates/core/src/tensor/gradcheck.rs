use super::{Real, Tape, Tensor, Var};
use crate::error::{contract_err, Result};

/// Outcome of comparing tape gradients with central differences.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Largest `|analytic - numeric| / max(1, |analytic|, |numeric|)`.
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub tol: f64,
    pub passed: bool,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

fn eval<T: Real, F>(f: &F, x: Tensor<T>, requires_grad: bool) -> Result<(Tape<T>, Var, Var)>
where
    F: Fn(&mut Tape<T>, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let input = tape.leaf(x, requires_grad);
    let out = f(&mut tape, input)?;
    if tape.value(out).len() != 1 {
        return Err(contract_err!(
            "gradient_check needs a scalar function, got shape {:?}",
            tape.value(out).shape()
        ));
    }
    Ok((tape, input, out))
}

/// Checks the gradient of scalar `f` at `x` against central differences
/// with step `h`. The error of each element is relative with a unit floor,
/// so vanishing gradients are compared absolutely.
pub fn gradient_check<T: Real, F>(f: F, x: &Tensor<T>, h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<T>, Var) -> Result<Var>,
{
    let (mut tape, input, out) = eval(&f, x.clone(), true)?;
    tape.backward(out)?;
    let analytic: Vec<f64> = match tape.grad(input) {
        Some(g) => g.iter().map(|v| v.to_f64()).collect(),
        None => vec![0.0; x.len()],
    };

    let mut numeric = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let probe = |delta: f64| -> Result<f64> {
            let mut shifted = x.clone();
            let v = &mut shifted.data_mut()[i];
            *v = T::from_f64(v.to_f64() + delta);
            let (tape, _, out) = eval(&f, shifted, false)?;
            Ok(tape.value(out).data()[0].to_f64())
        };
        let (plus, minus) = (probe(h)?, probe(-h)?);
        numeric.push((plus - minus) / (2.0 * h));
    }

    let (worst_index, max_rel_error) = analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1.0))
        .enumerate()
        .fold((0, 0.0f64), |best, (i, e)| if e > best.1 { (i, e) } else { best });

    Ok(GradCheckReport {
        max_rel_error,
        worst_index,
        tol,
        passed: max_rel_error < tol,
        analytic,
        numeric,
    })
}
