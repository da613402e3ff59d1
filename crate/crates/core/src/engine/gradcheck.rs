use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// `|a - b| / max(1, |a|, |b|)`.
pub fn relative_error<T: Scalar>(a: T, b: T) -> T {
    (a - b).abs() / T::one().max(a.abs()).max(b.abs())
}

/// Central differences `(f(x + h eᵢ) - f(x - h eᵢ)) / 2h` for every coordinate.
pub fn central_difference<T, F>(mut f: F, x: &Tensor<T>, h: T) -> Result<Tensor<T>>
where
    T: Scalar,
    F: FnMut(&Tensor<T>) -> Result<T>,
{
    let mut probe = x.clone();
    let mut out = Tensor::zeros(x.rows(), x.cols());
    let two_h = h + h;
    for i in 0..x.len() {
        let orig = probe.values()[i];
        probe.values_mut()[i] = orig + h;
        let plus = f(&probe)?;
        probe.values_mut()[i] = orig - h;
        let minus = f(&probe)?;
        probe.values_mut()[i] = orig;
        out.values_mut()[i] = (plus - minus) / two_h;
    }
    Ok(out)
}

/// Largest relative error between the tape gradient of a scalar function
/// and its central-difference estimate at `x`.
///
/// `build` records the function on the given tape starting from the leaf it
/// is handed and returns the `1 x 1` output.
pub fn finite_diff_check<T, F>(build: F, x: &Tensor<T>, h: T) -> Result<T>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let leaf = tape.leaf(x.clone());
    let out = build(&mut tape, leaf)?;
    let mut grads = tape.backward(out)?;
    let analytic = grads
        .take(leaf)
        .unwrap_or_else(|| Tensor::zeros(x.rows(), x.cols()));

    let numeric = central_difference(
        |probe| {
            let mut t = Tape::new();
            let v = t.leaf(probe.clone());
            let o = build(&mut t, v)?;
            let val = t.value(o);
            if val.shape() != [1, 1] {
                return Err(Error::shape("finite_diff_check", "function must be scalar"));
            }
            Ok(val.values()[0])
        },
        x,
        h,
    )?;
    Ok(max_relative_error(&analytic, &numeric))
}

pub fn max_relative_error<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> T {
    a.values()
        .iter()
        .zip(b.values())
        .map(|(&x, &y)| relative_error(x, y))
        .fold(T::zero(), T::max)
}
