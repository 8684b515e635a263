use ndarray::{Array1, Array2, ArrayView2, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Linear, Parameters};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    #[default]
    Relu,
    Identity,
}

/// Shape of a stack of per-row affine layers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input_width: usize,
    pub layer_widths: Vec<usize>,
    pub activation: Activation,
    /// Apply the activation after the last layer as well.
    pub final_activation: bool,
    /// Normalize each row to zero mean and unit variance across channels
    /// before every activation.
    pub normalize: bool,
}

impl MlpSpec {
    pub fn new(input_width: usize, layer_widths: &[usize], final_activation: bool) -> Self {
        Self {
            input_width,
            layer_widths: layer_widths.to_vec(),
            activation: Activation::Relu,
            final_activation,
            normalize: false,
        }
    }

    pub fn normalized(mut self, normalize: bool) -> Self {
        self.normalize = normalize;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_width == 0 {
            return Err(Error::Config("MLP input width must be positive".into()));
        }
        if self.layer_widths.is_empty() {
            return Err(Error::Config("MLP needs at least one layer".into()));
        }
        if self.layer_widths.contains(&0) {
            return Err(Error::Config(format!(
                "MLP layer widths must be positive: {:?}",
                self.layer_widths
            )));
        }
        Ok(())
    }
}

/// A stack of [`Linear`] layers with a shared nonlinearity. Applied row-wise,
/// it is the shared per-point MLP; applied to a single row it is a
/// fully-connected head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub activation: Activation,
    pub final_activation: bool,
    #[serde(default)]
    pub normalize: bool,
}

const NORM_EPS: f64 = 1e-5;

/// Activations saved by [`Mlp::forward_cached`]. `acts[0]` is the input and
/// `acts[i + 1]` the (post-activation) output of layer `i`.
#[derive(Clone, Debug)]
pub struct MlpCache {
    acts: Vec<Array2<f64>>,
    /// Per layer: normalized pre-activation and inverse row deviation.
    norms: Vec<Option<(Array2<f64>, Array1<f64>)>>,
}

impl MlpCache {
    pub fn output(&self) -> &Array2<f64> {
        self.acts.last().expect("cache holds input and outputs")
    }
}

impl Mlp {
    /// Fan-in uniform initialization for every layer.
    pub fn new<R: Rng + ?Sized>(spec: &MlpSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let mut layers = Vec::with_capacity(spec.layer_widths.len());
        let mut in_dim = spec.input_width;
        for &w in &spec.layer_widths {
            layers.push(Linear::fan_in_uniform(in_dim, w, rng));
            in_dim = w;
        }
        Ok(Self {
            layers,
            activation: spec.activation,
            final_activation: spec.final_activation,
            normalize: spec.normalize,
        })
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn output_width(&self) -> usize {
        self.layers.last().expect("at least one layer").out_dim()
    }

    pub fn last_layer_mut(&mut self) -> &mut Linear {
        self.layers.last_mut().expect("at least one layer")
    }

    fn activated(&self, layer: usize) -> bool {
        self.activation == Activation::Relu
            && (layer + 1 < self.layers.len() || self.final_activation)
    }

    fn check_input(&self, x: &ArrayView2<'_, f64>) -> Result<()> {
        if x.ncols() != self.input_width() {
            return Err(Error::Config(format!(
                "MLP expects {} input channels, got {}",
                self.input_width(),
                x.ncols()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.check_input(&x)?;
        let mut h = self.layers[0].forward(x);
        if self.activated(0) {
            if self.normalize {
                normalize_rows(&mut h);
            }
            relu_inplace(&mut h);
        }
        for (i, layer) in self.layers.iter().enumerate().skip(1) {
            h = layer.forward(h.view());
            if self.activated(i) {
                if self.normalize {
                    normalize_rows(&mut h);
                }
                relu_inplace(&mut h);
            }
        }
        Ok(h)
    }

    pub fn forward_cached(&self, x: Array2<f64>) -> Result<(Array2<f64>, MlpCache)> {
        self.check_input(&x.view())?;
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        let mut norms = Vec::with_capacity(self.layers.len());
        acts.push(x);
        for (i, layer) in self.layers.iter().enumerate() {
            let mut h = layer.forward(acts[i].view());
            let mut norm = None;
            if self.activated(i) {
                if self.normalize {
                    let inv = normalize_rows(&mut h);
                    norm = Some((h.clone(), inv));
                }
                relu_inplace(&mut h);
            }
            norms.push(norm);
            acts.push(h);
        }
        let out = acts.last().expect("non-empty").clone();
        Ok((out, MlpCache { acts, norms }))
    }

    /// Reverse pass. Accumulates into `grad` and returns `dL/dinput` when
    /// requested.
    pub fn backward(
        &self,
        cache: &MlpCache,
        d_out: Array2<f64>,
        grad: &mut Mlp,
        need_input_grad: bool,
    ) -> Option<Array2<f64>> {
        let mut d = d_out;
        for i in (0..self.layers.len()).rev() {
            if self.activated(i) {
                Zip::from(&mut d).and(&cache.acts[i + 1]).for_each(|g, &a| {
                    if a <= 0.0 {
                        *g = 0.0;
                    }
                });
                if let Some((xhat, inv)) = &cache.norms[i] {
                    normalize_rows_backward(&mut d, xhat, inv);
                }
            }
            let want_dx = i > 0 || need_input_grad;
            d = self.layers[i].backward(
                cache.acts[i].view(),
                d.view(),
                &mut grad.layers[i],
                want_dx,
            )?;
        }
        Some(d)
    }
}

impl Parameters for Mlp {
    fn visit(&self, f: &mut dyn FnMut(&[f64])) {
        for l in &self.layers {
            l.visit(f);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        for l in &mut self.layers {
            l.visit_mut(f);
        }
    }
}

/// Standardizes each row in place; returns the inverse deviations.
fn normalize_rows(x: &mut Array2<f64>) -> Array1<f64> {
    let c = x.ncols() as f64;
    let mut inv = Array1::zeros(x.nrows());
    for (mut row, s) in x.rows_mut().into_iter().zip(inv.iter_mut()) {
        let mean = row.sum() / c;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c;
        *s = 1.0 / (var + NORM_EPS).sqrt();
        let k = *s;
        row.mapv_inplace(|v| (v - mean) * k);
    }
    inv
}

/// Maps the gradient w.r.t. standardized rows to the gradient w.r.t. the
/// raw rows.
fn normalize_rows_backward(d: &mut Array2<f64>, xhat: &Array2<f64>, inv: &Array1<f64>) {
    let c = d.ncols() as f64;
    for ((mut g, xh), &s) in d.rows_mut().into_iter().zip(xhat.rows()).zip(inv) {
        let mean_g = g.sum() / c;
        let mean_gx = g.dot(&xh) / c;
        Zip::from(&mut g).and(&xh).for_each(|g, &x| {
            *g = s * (*g - mean_g - x * mean_gx);
        });
    }
}

fn relu_inplace(x: &mut Array2<f64>) {
    x.mapv_inplace(|v| if v > 0.0 { v } else { 0.0 });
}

/// Applies the same layer stack to every row of `input`.
pub fn shared_mlp_forward(mlp: &Mlp, input: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    mlp.forward(input)
}

/// Fully-connected head on a single feature vector.
pub fn fc_head_forward(mlp: &Mlp, input: &[f64]) -> Result<Array1<f64>> {
    let x = ArrayView2::from_shape((1, input.len()), input)
        .map_err(|e| Error::InvalidInput(e.to_string()))?;
    let y = mlp.forward(x)?;
    Ok(y.row(0).to_owned())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::zeros_like;
    use ndarray::{array, Axis};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
        Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-1.0..1.0))
    }

    #[test]
    fn identity_layer_passes_through() {
        let mut mlp = Mlp::new(
            &MlpSpec::new(3, &[3], false),
            &mut ChaCha8Rng::seed_from_u64(0),
        )
        .unwrap();
        mlp.layers[0].weight = Array2::eye(3);
        mlp.layers[0].bias.fill(0.0);
        let x = array![[1.0, -2.0, 3.0], [0.5, 0.0, -0.25]];
        assert_eq!(shared_mlp_forward(&mlp, x.view()).unwrap(), x);
        assert_eq!(
            fc_head_forward(&mlp, &[1.0, -2.0, 3.0]).unwrap().to_vec(),
            vec![1.0, -2.0, 3.0]
        );
    }

    #[test]
    fn zero_weights_yield_bias() {
        let mut mlp = Mlp::new(
            &MlpSpec::new(4, &[2], false),
            &mut ChaCha8Rng::seed_from_u64(0),
        )
        .unwrap();
        mlp.layers[0].weight.fill(0.0);
        mlp.layers[0].bias = array![0.3, -0.7];
        assert_eq!(
            fc_head_forward(&mlp, &[9.0, 8.0, 7.0, 6.0])
                .unwrap()
                .to_vec(),
            vec![0.3, -0.7]
        );
    }

    #[test]
    fn width_mismatch_is_config_error() {
        let mlp = Mlp::new(
            &MlpSpec::new(3, &[4], true),
            &mut ChaCha8Rng::seed_from_u64(0),
        )
        .unwrap();
        let x = Array2::zeros((2, 5));
        assert!(matches!(mlp.forward(x.view()), Err(Error::Config(_))));
        assert!(matches!(
            fc_head_forward(&mlp, &[1.0]),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn invalid_spec_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(Mlp::new(&MlpSpec::new(3, &[], true), &mut rng).is_err());
        assert!(Mlp::new(&MlpSpec::new(3, &[4, 0], true), &mut rng).is_err());
    }

    #[test]
    fn single_layer_matches_rowwise_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mlp = Mlp::new(&MlpSpec::new(4, &[5], true), &mut rng).unwrap();
        let x = random_matrix(7, 4, &mut rng);
        let y = mlp.forward(x.view()).unwrap();
        let l = &mlp.layers[0];
        for r in 0..7 {
            for j in 0..5 {
                let mut acc = l.bias[j];
                for k in 0..4 {
                    acc += x[[r, k]] * l.weight[[k, j]];
                }
                let expect = acc.max(0.0);
                assert!((y[[r, j]] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn shared_weights_commute_with_row_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mlp = Mlp::new(&MlpSpec::new(3, &[8, 6], true), &mut rng).unwrap();
        let x = random_matrix(10, 3, &mut rng);
        let perm = [3, 1, 4, 0, 9, 2, 6, 5, 8, 7];
        let y = mlp.forward(x.view()).unwrap();
        let yp = mlp.forward(x.select(Axis(0), &perm).view()).unwrap();
        assert_eq!(yp, y.select(Axis(0), &perm));
    }

    #[test]
    fn backward_matches_finite_differences() {
        check_gradients(false);
    }

    #[test]
    fn normalized_backward_matches_finite_differences() {
        check_gradients(true);
    }

    #[test]
    fn normalized_rows_are_standardized() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut h = random_matrix(4, 16, &mut rng) * 5.0;
        normalize_rows(&mut h);
        for row in h.rows() {
            assert!(row.mean().unwrap().abs() < 1e-12);
            assert!((row.mapv(|v| v * v).mean().unwrap() - 1.0).abs() < 1e-5);
        }
    }

    fn check_gradients(normalize: bool) {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let spec = MlpSpec::new(3, &[6, 4], true).normalized(normalize);
        let mlp = Mlp::new(&spec, &mut rng).unwrap();
        let x = random_matrix(5, 3, &mut rng);
        let w = random_matrix(5, 4, &mut rng);
        let loss = |m: &Mlp, x: &Array2<f64>| (m.forward(x.view()).unwrap() * &w).sum();

        let (_, cache) = mlp.forward_cached(x.clone()).unwrap();
        let mut grad = zeros_like(&mlp);
        let dx = mlp.backward(&cache, w.clone(), &mut grad, true).unwrap();

        let h = 1e-5;
        let flat = mlp.flatten();
        let g = grad.flatten();
        for i in 0..flat.len() {
            let mut p = mlp.clone();
            let mut v = flat.clone();
            v[i] += h;
            p.assign_flat(&v);
            let up = loss(&p, &x);
            v[i] -= 2.0 * h;
            p.assign_flat(&v);
            let down = loss(&p, &x);
            let fd = (up - down) / (2.0 * h);
            assert!(
                (fd - g[i]).abs() <= 1e-6 * (1.0 + fd.abs()),
                "param {i}: {fd} vs {}",
                g[i]
            );
        }
        for idx in [(0, 0), (2, 1), (4, 2)] {
            let mut xp = x.clone();
            xp[idx] += h;
            let up = loss(&mlp, &xp);
            xp[idx] -= 2.0 * h;
            let down = loss(&mlp, &xp);
            let fd = (up - down) / (2.0 * h);
            assert!((fd - dx[idx]).abs() <= 1e-6 * (1.0 + fd.abs()));
        }
    }
}
