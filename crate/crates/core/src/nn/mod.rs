//! Differentiable building blocks shared by the augmentor and the classifier.
//!
//! Every block exposes a cached forward pass and an explicit reverse pass.
//! Gradient containers reuse the block's own type, so a gradient for an
//! [`Mlp`] is another [`Mlp`] with the same shapes.

mod linear;
mod mlp;
mod pool;

pub use linear::Linear;
pub use mlp::{fc_head_forward, shared_mlp_forward, Activation, Mlp, MlpCache, MlpSpec};
pub use pool::{max_pool_points, segment_max_pool, segment_max_pool_backward, SegmentPool};

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Per-point feature matrix, `N x C`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerPointFeatures(pub Array2<f64>);

/// Per-shape feature vector of length `C`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeFeature(pub Array1<f64>);

/// Uniform traversal over the trainable tensors of a network.
///
/// Implementations must visit tensors in a fixed order; optimizers and
/// gradient checks rely on it to align parameters with their gradients.
pub trait Parameters {
    fn visit(&self, f: &mut dyn FnMut(&[f64]));

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64]));

    fn num_parameters(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |t| n += t.len());
        n
    }

    fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_parameters());
        self.visit(&mut |t| out.extend_from_slice(t));
        out
    }

    fn assign_flat(&mut self, values: &[f64]) {
        let mut offset = 0;
        self.visit_mut(&mut |t| {
            t.copy_from_slice(&values[offset..offset + t.len()]);
            offset += t.len();
        });
        assert_eq!(offset, values.len(), "flat parameter length mismatch");
    }

    fn fill(&mut self, value: f64) {
        self.visit_mut(&mut |t| t.fill(value));
    }

    /// SHA-256 over the little-endian bytes of every parameter.
    fn fingerprint(&self) -> [u8; 32] {
        let mut hasher = Sha256::new();
        self.visit(&mut |t| {
            for v in t {
                hasher.update(v.to_le_bytes());
            }
        });
        hasher.finalize().into()
    }
}

impl Parameters for Array2<f64> {
    fn visit(&self, f: &mut dyn FnMut(&[f64])) {
        f(self.as_slice().expect("standard layout"));
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        f(self.as_slice_mut().expect("standard layout"));
    }
}

impl Parameters for Array1<f64> {
    fn visit(&self, f: &mut dyn FnMut(&[f64])) {
        f(self.as_slice().expect("standard layout"));
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        f(self.as_slice_mut().expect("standard layout"));
    }
}

/// Returns a structurally identical copy with every parameter set to zero.
pub fn zeros_like<P: Parameters + Clone>(p: &P) -> P {
    let mut z = p.clone();
    z.fill(0.0);
    z
}
