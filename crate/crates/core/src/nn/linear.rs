use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Parameters;

/// Affine map `y = x W + b` applied to every row of its input.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    /// `in x out`
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Linear {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            weight: Array2::zeros((in_dim, out_dim)),
            bias: Array1::zeros(out_dim),
        }
    }

    /// Weights and biases drawn from `U(-1/sqrt(in), 1/sqrt(in))`.
    pub fn fan_in_uniform<R: Rng + ?Sized>(in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        Self {
            weight: Array2::from_shape_simple_fn((in_dim, out_dim), || {
                rng.random_range(-bound..bound)
            }),
            bias: Array1::from_shape_simple_fn(out_dim, || rng.random_range(-bound..bound)),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn forward(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        let mut y = x.dot(&self.weight);
        y += &self.bias;
        y
    }

    /// Accumulates parameter gradients into `grad` and returns `dL/dx` when
    /// requested.
    pub fn backward(
        &self,
        x: ArrayView2<'_, f64>,
        dy: ArrayView2<'_, f64>,
        grad: &mut Linear,
        need_input_grad: bool,
    ) -> Option<Array2<f64>> {
        grad.weight += &x.t().dot(&dy);
        grad.bias += &dy.sum_axis(Axis(0));
        need_input_grad.then(|| dy.dot(&self.weight.t()))
    }
}

impl Parameters for Linear {
    fn visit(&self, f: &mut dyn FnMut(&[f64])) {
        self.weight.visit(f);
        self.bias.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        self.weight.visit_mut(f);
        self.bias.visit_mut(f);
    }
}
