use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// A learnable tensor with its gradient and Adam moment estimates.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    pub adam_m: Tensor<T>,
    pub adam_v: Tensor<T>,
    pub step_count: u64,
}

impl<T: Scalar> Parameter<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>) -> Self {
        let [r, c] = value.shape();
        Self {
            name: name.into(),
            value,
            grad: Tensor::zeros(r, c),
            adam_m: Tensor::zeros(r, c),
            adam_v: Tensor::zeros(r, c),
            step_count: 0,
        }
    }

    pub fn shape(&self) -> [usize; 2] {
        self.value.shape()
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(T::zero());
    }

    pub fn accumulate_grad(&mut self, g: &Tensor<T>) -> Result<()> {
        if g.shape() != self.grad.shape() {
            return Err(Error::shape(
                "accumulate_grad",
                format!(
                    "{} expects {:?}, got {:?}",
                    self.name,
                    self.grad.shape(),
                    g.shape()
                ),
            ));
        }
        self.grad.add_assign(g);
        Ok(())
    }
}

/// Glorot/Xavier uniform: entries in `[-a, a]` with `a = sqrt(6 / (rows + cols))`.
pub fn glorot_init<T: Scalar>(rows: usize, cols: usize, seed: u64) -> Tensor<T> {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let values = (0..rows * cols)
        .map(|_| T::of(rng.gen_range(-bound..=bound)))
        .collect();
    Tensor::from_vec(rows, cols, values).expect("sized by construction")
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// One bias-corrected Adam update of every parameter, then zeroes grads.
    ///
    /// Fails without touching any parameter if a gradient is non-finite.
    pub fn step<T: Scalar>(&self, params: &mut [&mut Parameter<T>]) -> Result<()> {
        if let Some(p) = params.iter().find(|p| !p.grad.is_finite()) {
            return Err(Error::NonFinite(format!("gradient of {}", p.name)));
        }
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let (lr, eps) = (T::of(self.lr), T::of(self.eps));
        for p in params.iter_mut() {
            p.step_count += 1;
            let t = p.step_count as i32;
            let c1 = T::one() - b1.powi(t);
            let c2 = T::one() - b2.powi(t);
            let Parameter {
                value,
                grad,
                adam_m,
                adam_v,
                ..
            } = &mut **p;
            for (((x, &g), m), v) in value
                .values_mut()
                .iter_mut()
                .zip(grad.values())
                .zip(adam_m.values_mut())
                .zip(adam_v.values_mut())
            {
                *m = b1 * *m + (T::one() - b1) * g;
                *v = b2 * *v + (T::one() - b2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *x = *x - lr * m_hat / (v_hat.sqrt() + eps);
            }
            p.zero_grad();
        }
        Ok(())
    }
}

/// Free-function form of [`Adam::step`].
pub fn adam_step<T: Scalar>(
    params: &mut [&mut Parameter<T>],
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) -> Result<()> {
    Adam {
        lr,
        beta1,
        beta2,
        eps,
    }
    .step(params)
}
