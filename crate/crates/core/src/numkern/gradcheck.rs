//! Central finite differences against tape gradients.

use crate::error::{Error, Result};

use super::matrix::Matrix;
use super::tape::{Tape, Var};

/// A scalar function with two evaluation routes: a plain forward pass and a
/// recorded tape. Finite differences use the former, gradients the latter.
pub trait ScalarFn {
    /// Shape the flat input is reshaped into before recording.
    fn input_shape(&self) -> (usize, usize);

    /// Plain forward pass on a flat input.
    fn eval(&self, x: &[f64]) -> Result<f64>;

    /// Forward pass over many flat inputs (one per row). Implementors with a
    /// batched forward should override this.
    fn eval_batch(&self, xs: &Matrix) -> Result<Vec<f64>> {
        xs.iter_rows().map(|r| self.eval(r)).collect()
    }

    /// Records the function on `tape`, returning a `1 x 1` node.
    fn record<'t>(&'t self, tape: &mut Tape<'t>, x: Var) -> Result<Var>;
}

/// Value and tape gradient of `f` at `x`.
pub fn value_and_gradient<F: ScalarFn>(f: &F, x: &[f64]) -> Result<(f64, Vec<f64>)> {
    let (rows, cols) = f.input_shape();
    let mut tape = Tape::new();
    let input = tape.leaf(Matrix::from_vec(rows, cols, x.to_vec())?);
    let out = f.record(&mut tape, input)?;
    let value = tape.value(out).get(0, 0);
    if !value.is_finite() {
        return Err(Error::NonFinite("recorded forward value".into()));
    }
    let grads = tape.backward(out)?;
    let g = grads.get(input).map(|m| m.data().to_vec()).unwrap_or_else(|| vec![0.0; x.len()]);
    Ok((value, g))
}

/// Max over coordinates of `|g_fd - g_ad| / max(1, |g_fd|)`.
pub fn grad_check<F: ScalarFn>(f: &F, x: &[f64], h: f64) -> Result<f64> {
    let coords: Vec<usize> = (0..x.len()).collect();
    grad_check_coords(f, x, h, &coords)
}

/// [`grad_check`] restricted to the listed coordinates.
pub fn grad_check_coords<F: ScalarFn>(f: &F, x: &[f64], h: f64, coords: &[usize]) -> Result<f64> {
    if h <= 0.0 {
        return Err(Error::InvalidArgument(format!("step h must be positive, got {h}")));
    }
    let (_, grad) = value_and_gradient(f, x)?;
    let fd = central_differences(f, x, h, coords)?;
    Ok(coords.iter().zip(fd).map(|(&i, g_fd)| (g_fd - grad[i]).abs() / g_fd.abs().max(1.0)).fold(0.0, f64::max))
}

/// Directional check: compares `∇f·v` with `(f(x+hv) - f(x-hv)) / 2h` for a
/// unit direction `v`; returns the relative error.
pub fn directional_check<F: ScalarFn>(f: &F, x: &[f64], v: &[f64], h: f64) -> Result<f64> {
    let (_, grad) = value_and_gradient(f, x)?;
    let ad: f64 = grad.iter().zip(v).map(|(g, d)| g * d).sum();
    let plus: Vec<f64> = x.iter().zip(v).map(|(a, d)| a + h * d).collect();
    let minus: Vec<f64> = x.iter().zip(v).map(|(a, d)| a - h * d).collect();
    let vals = f.eval_batch(&Matrix::from_rows(&[plus, minus])?)?;
    check_finite(&vals)?;
    let fd = (vals[0] - vals[1]) / (2.0 * h);
    Ok((fd - ad).abs() / fd.abs().max(1.0))
}

fn central_differences<F: ScalarFn>(f: &F, x: &[f64], h: f64, coords: &[usize]) -> Result<Vec<f64>> {
    let n = x.len();
    let mut probes = Matrix::zeros(2 * coords.len(), n);
    for (k, &i) in coords.iter().enumerate() {
        probes.row_mut(2 * k).copy_from_slice(x);
        probes.row_mut(2 * k + 1).copy_from_slice(x);
        probes.row_mut(2 * k)[i] += h;
        probes.row_mut(2 * k + 1)[i] -= h;
    }
    let vals = f.eval_batch(&probes)?;
    check_finite(&vals)?;
    Ok(vals.chunks_exact(2).map(|p| (p[0] - p[1]) / (2.0 * h)).collect())
}

fn check_finite(vals: &[f64]) -> Result<()> {
    if vals.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite("finite-difference probe".into()))
    }
}
