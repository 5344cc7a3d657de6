//! Dense `f64` tensors, a reverse-mode tape, and a central-difference
//! gradient checker.

mod tape;
mod tensor;

pub use tape::{softmax_rows, Gradients, Tape, Var};
pub use tensor::{dot, Tensor};

use thiserror::Error;

/// Floor applied to norms before dividing.
pub const EPS_NORM: f64 = 1e-12;
/// Clamp applied inside every logarithm of a probability.
pub const EPS_LOG: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("dimension mismatch: {0}")]
    Shape(String),
    #[error("degenerate vector with norm {0:e}")]
    Degenerate(f64),
    #[error("non-finite function value during evaluation")]
    NonFinite,
}

/// Softmax over each row (a rank 1 tensor is a single row).
pub fn softmax(v: &Tensor) -> Tensor {
    softmax_rows(v)
}

/// Euclidean normalisation of a whole tensor.
pub fn l2_normalize(v: &Tensor) -> Result<Tensor, NumericsError> {
    let n = v.norm();
    if n < EPS_NORM || !n.is_finite() {
        return Err(NumericsError::Degenerate(n));
    }
    Ok(v.map(|x| x / n))
}

/// In-place normalisation of a slice; returns the original norm.
pub fn normalize_slice(v: &mut [f64]) -> Result<f64, NumericsError> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n < EPS_NORM || !n.is_finite() {
        return Err(NumericsError::Degenerate(n));
    }
    v.iter_mut().for_each(|x| *x /= n);
    Ok(n)
}

fn eval_scalar<F>(f: &F, xs: &[Tensor]) -> Result<f64, NumericsError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, NumericsError>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let v = tape.value(out);
    if v.len() != 1 {
        return Err(NumericsError::Shape("gradient check needs a scalar".into()));
    }
    let v = v.item();
    if !v.is_finite() {
        return Err(NumericsError::NonFinite);
    }
    Ok(v)
}

/// Max over coordinates of `|analytic − central| / max(1, |central|)` for a
/// scalar function of one tensor.
pub fn grad_check<F>(f: F, x: &Tensor, step: f64) -> Result<f64, NumericsError>
where
    F: Fn(&mut Tape, Var) -> Result<Var, NumericsError>,
{
    grad_check_many(|t, vs| f(t, vs[0]), std::slice::from_ref(x), step)
}

/// [`grad_check`] for a scalar function of several tensors.
pub fn grad_check_many<F>(f: F, xs: &[Tensor], step: f64) -> Result<f64, NumericsError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, NumericsError>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone())).collect();
    let out = f(&mut tape, &vars)?;
    if !tape.value(out).is_finite() {
        return Err(NumericsError::NonFinite);
    }
    let grads = tape.backward(out)?;

    let mut worst = 0.0f64;
    let mut probe = xs.to_vec();
    for (k, x) in xs.iter().enumerate() {
        let analytic = grads.get(vars[k], &tape);
        for c in 0..x.len() {
            let orig = x.data()[c];
            probe[k].data_mut()[c] = orig + step;
            let up = eval_scalar(&f, &probe)?;
            probe[k].data_mut()[c] = orig - step;
            let down = eval_scalar(&f, &probe)?;
            probe[k].data_mut()[c] = orig;
            let central = (up - down) / (2.0 * step);
            let err = (analytic.data()[c] - central).abs() / central.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
