//! The sample-aware augmentation network.
//!
//! A shared per-point MLP embeds every point into `C` channels (`F`), max
//! pooling turns those into a shape feature `G`, and two heads regress the
//! augmentation:
//!
//! * the shape head maps `[G | z]` (with `z` a `C`-dimensional Gaussian draw)
//!   to a `3 x 3` transform `M`;
//! * the displacement head maps `[F | G | Z]` per point (with `Z` an `N x C`
//!   Gaussian draw) to an `N x 3` displacement `D`.
//!
//! The augmented cloud is `P M + D`. Both heads end in a zero-weight layer
//! whose bias is the identity (for `M`) or zero (for `D`), so a fresh
//! augmentor is a no-op.

use ndarray::{concatenate, s, Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{AffineAugmentation, PointCloud};
use crate::nn::{
    segment_max_pool, segment_max_pool_backward, Mlp, MlpCache, MlpSpec, Parameters,
    PerPointFeatures, SegmentPool, ShapeFeature,
};

const IDENTITY_FLAT: [f64; 9] = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentorConfig {
    /// Channel count `C` of the per-point features and of each noise draw.
    pub feature_channels: usize,
    /// Hidden widths of the feature MLP; a final layer of width `C` follows.
    pub feature_hidden: Vec<usize>,
    /// Hidden widths of the shape head (input `2C`, output 9).
    pub shape_hidden: Vec<usize>,
    /// Hidden widths of the displacement head (input `3C`, output 3).
    pub displacement_hidden: Vec<usize>,
    pub noise_std: f64,
    /// Probability of independently dropping `M` and `D` during training.
    pub dropout_prob: f64,
    pub use_shape_transform: bool,
    pub use_displacement: bool,
    /// Standardize every hidden activation across channels.
    pub normalize_features: bool,
}

impl Default for AugmentorConfig {
    fn default() -> Self {
        Self {
            feature_channels: 64,
            feature_hidden: vec![64],
            shape_hidden: vec![256, 128],
            displacement_hidden: vec![256, 128],
            noise_std: 1.0,
            dropout_prob: 0.5,
            use_shape_transform: true,
            use_displacement: true,
            normalize_features: false,
        }
    }
}

impl AugmentorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.feature_channels == 0 {
            return Err(Error::Config(
                "augmentor feature_channels must be positive".into(),
            ));
        }
        for (name, widths) in [
            ("feature_hidden", &self.feature_hidden),
            ("shape_hidden", &self.shape_hidden),
            ("displacement_hidden", &self.displacement_hidden),
        ] {
            if widths.contains(&0) {
                return Err(Error::Config(format!("augmentor {name} has a zero width")));
            }
        }
        if !(self.noise_std > 0.0 && self.noise_std.is_finite()) {
            return Err(Error::Config(format!(
                "noise_std must be positive, got {}",
                self.noise_std
            )));
        }
        if !(0.0..=1.0).contains(&self.dropout_prob) {
            return Err(Error::Config(format!(
                "dropout_prob must lie in [0, 1], got {}",
                self.dropout_prob
            )));
        }
        Ok(())
    }
}

/// Random inputs for one augmentation of one sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentDraw {
    pub keep_shape_transform: bool,
    pub keep_displacement: bool,
    /// Length `C`.
    pub shape_noise: Array1<f64>,
    /// `N x C`.
    pub point_noise: Array2<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentorOutput {
    /// The augmentation actually applied (dropped parts already replaced).
    pub augmentation: AffineAugmentation,
    pub augmented: PointCloud,
    pub dropped_shape_transform: bool,
    pub dropped_displacement: bool,
}

/// Output of [`Augmentor::forward_batch`].
#[derive(Clone, Debug)]
pub struct AugmentedBatch {
    /// `(B * N) x 3` augmented points.
    pub points: Array2<f64>,
    pub n_points: usize,
    /// Effective `M` per sample.
    pub shape_transforms: Vec<Array2<f64>>,
    /// Effective `(B * N) x 3` displacement.
    pub displacements: Array2<f64>,
}

impl AugmentedBatch {
    pub fn cloud(&self, b: usize) -> PointCloud {
        let n = self.n_points;
        PointCloud::from_trusted(self.points.slice(s![b * n..(b + 1) * n, ..]).to_owned())
    }
}

pub struct AugmentorCache {
    input: Array2<f64>,
    n_points: usize,
    feature: MlpCache,
    pool: SegmentPool,
    shape: MlpCache,
    /// Samples whose displacement is kept, in batch order.
    displaced: Vec<usize>,
    displacement: Option<MlpCache>,
    keep_shape: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Augmentor {
    pub config: AugmentorConfig,
    pub feature: Mlp,
    pub shape_head: Mlp,
    pub displacement_head: Mlp,
}

impl Augmentor {
    /// Fan-in uniform hidden layers; identity-producing final layers.
    pub fn new<R: Rng + ?Sized>(config: AugmentorConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let c = config.feature_channels;
        let mut feature_widths = config.feature_hidden.clone();
        feature_widths.push(c);
        let feature = Mlp::new(
            &MlpSpec::new(3, &feature_widths, true).normalized(config.normalize_features),
            rng,
        )?;

        let mut shape_widths = config.shape_hidden.clone();
        shape_widths.push(9);
        let mut shape_head = Mlp::new(
            &MlpSpec::new(2 * c, &shape_widths, false).normalized(config.normalize_features),
            rng,
        )?;
        let last = shape_head.last_layer_mut();
        last.weight.fill(0.0);
        last.bias = Array1::from(IDENTITY_FLAT.to_vec());

        let mut disp_widths = config.displacement_hidden.clone();
        disp_widths.push(3);
        let mut displacement_head = Mlp::new(
            &MlpSpec::new(3 * c, &disp_widths, false).normalized(config.normalize_features),
            rng,
        )?;
        let last = displacement_head.last_layer_mut();
        last.weight.fill(0.0);
        last.bias.fill(0.0);

        Ok(Self {
            config,
            feature,
            shape_head,
            displacement_head,
        })
    }

    pub fn channels(&self) -> usize {
        self.config.feature_channels
    }

    /// Draws dropout decisions (training only) and then the noise.
    pub fn draw<R: Rng + ?Sized>(
        &self,
        n_points: usize,
        rng: &mut R,
        training: bool,
    ) -> AugmentDraw {
        let (mut keep_m, mut keep_d) = (true, true);
        if training {
            keep_m = !rng.random_bool(self.config.dropout_prob);
            keep_d = !rng.random_bool(self.config.dropout_prob);
        }
        let c = self.channels();
        let normal = Normal::new(0.0, self.config.noise_std).expect("validated noise_std");
        let shape_noise = Array1::from_shape_simple_fn(c, || normal.sample(rng));
        let point_noise = Array2::from_shape_simple_fn((n_points, c), || normal.sample(rng));
        AugmentDraw {
            keep_shape_transform: keep_m && self.config.use_shape_transform,
            keep_displacement: keep_d && self.config.use_displacement,
            shape_noise,
            point_noise,
        }
    }

    /// Per-point features `F` and their max-pooled shape feature `G`.
    pub fn extract_features(&self, cloud: &PointCloud) -> Result<(PerPointFeatures, ShapeFeature)> {
        let f = self.feature.forward(cloud.points())?;
        let pool = segment_max_pool(f.view(), f.nrows())?;
        Ok((
            PerPointFeatures(f),
            ShapeFeature(pool.pooled.row(0).to_owned()),
        ))
    }

    pub fn regress_shape_transform(&self, g: &ShapeFeature, noise: &[f64]) -> Result<Array2<f64>> {
        let c = self.channels();
        if g.0.len() != c || noise.len() != c {
            return Err(Error::Config(format!(
                "shape head expects G and noise of length {c}, got {} and {}",
                g.0.len(),
                noise.len()
            )));
        }
        let input: Vec<f64> = g.0.iter().chain(noise).copied().collect();
        let out = crate::nn::fc_head_forward(&self.shape_head, &input)?;
        Ok(out.into_shape_with_order((3, 3)).expect("nine outputs"))
    }

    pub fn regress_displacement(
        &self,
        f: &PerPointFeatures,
        g: &ShapeFeature,
        noise: ArrayView2<'_, f64>,
    ) -> Result<Array2<f64>> {
        let c = self.channels();
        let n = f.0.nrows();
        if f.0.ncols() != c || g.0.len() != c || noise.dim() != (n, c) {
            return Err(Error::Config(format!(
                "displacement head expects F {n}x{c}, G {c}, noise {n}x{c}; got F {:?}, G {}, noise {:?}",
                f.0.dim(),
                g.0.len(),
                noise.dim()
            )));
        }
        let g_rep = g.0.broadcast((n, c)).expect("broadcast G");
        let input = concatenate![Axis(1), f.0.view(), g_rep, noise];
        self.displacement_head.forward(input.view())
    }

    /// Augments a single cloud, drawing noise and dropout from `rng`.
    pub fn augment<R: Rng + ?Sized>(
        &self,
        cloud: &PointCloud,
        rng: &mut R,
        training: bool,
    ) -> Result<AugmentorOutput> {
        let draw = self.draw(cloud.n_points(), rng, training);
        self.augment_with(cloud, &draw)
    }

    pub fn augment_with(&self, cloud: &PointCloud, draw: &AugmentDraw) -> Result<AugmentorOutput> {
        let (batch, _) = self.forward_batch(
            &cloud.points().to_owned(),
            cloud.n_points(),
            std::slice::from_ref(draw),
        )?;
        Ok(AugmentorOutput {
            augmentation: AffineAugmentation {
                shape_transform: batch.shape_transforms[0].clone(),
                displacement: batch.displacements.clone(),
            },
            augmented: PointCloud::from_trusted(batch.points),
            dropped_shape_transform: !draw.keep_shape_transform,
            dropped_displacement: !draw.keep_displacement,
        })
    }

    /// Augments a stacked batch of `B` clouds with `n_points` points each.
    pub fn forward_batch(
        &self,
        input: &Array2<f64>,
        n_points: usize,
        draws: &[AugmentDraw],
    ) -> Result<(AugmentedBatch, AugmentorCache)> {
        let c = self.channels();
        let batch = draws.len();
        if n_points == 0 || input.dim() != (batch * n_points, 3) {
            return Err(Error::InvalidInput(format!(
                "augmentor input {:?} does not match {batch} clouds of {n_points} points",
                input.dim()
            )));
        }
        for d in draws {
            if d.shape_noise.len() != c || d.point_noise.dim() != (n_points, c) {
                return Err(Error::Config(
                    "noise draw does not match augmentor channels".into(),
                ));
            }
        }

        let (features, feature_cache) = self.feature.forward_cached(input.clone())?;
        let pool = segment_max_pool(features.view(), n_points)?;

        let mut shape_in = Array2::zeros((batch, 2 * c));
        shape_in.slice_mut(s![.., ..c]).assign(&pool.pooled);
        for (b, d) in draws.iter().enumerate() {
            shape_in.slice_mut(s![b, c..]).assign(&d.shape_noise);
        }
        let (shape_out, shape_cache) = self.shape_head.forward_cached(shape_in)?;

        let displaced: Vec<usize> = (0..batch).filter(|&b| draws[b].keep_displacement).collect();
        let mut displacements = Array2::zeros((batch * n_points, 3));
        let displacement_cache = if displaced.is_empty() {
            None
        } else {
            let mut disp_in = Array2::zeros((displaced.len() * n_points, 3 * c));
            for (k, &b) in displaced.iter().enumerate() {
                let rows = s![k * n_points..(k + 1) * n_points, ..];
                let mut block = disp_in.slice_mut(rows);
                block
                    .slice_mut(s![.., ..c])
                    .assign(&features.slice(s![b * n_points..(b + 1) * n_points, ..]));
                block
                    .slice_mut(s![.., c..2 * c])
                    .assign(&pool.pooled.row(b));
                block
                    .slice_mut(s![.., 2 * c..])
                    .assign(&draws[b].point_noise);
            }
            let (disp_out, cache) = self.displacement_head.forward_cached(disp_in)?;
            for (k, &b) in displaced.iter().enumerate() {
                displacements
                    .slice_mut(s![b * n_points..(b + 1) * n_points, ..])
                    .assign(&disp_out.slice(s![k * n_points..(k + 1) * n_points, ..]));
            }
            Some(cache)
        };

        let mut points = Array2::zeros((batch * n_points, 3));
        let mut shape_transforms = Vec::with_capacity(batch);
        for (b, d) in draws.iter().enumerate() {
            let rows = s![b * n_points..(b + 1) * n_points, ..];
            let p = input.slice(rows);
            let mut out = points.slice_mut(rows);
            let m = if d.keep_shape_transform {
                let m = shape_out
                    .row(b)
                    .to_owned()
                    .into_shape_with_order((3, 3))
                    .expect("nine outputs");
                out.assign(&p.dot(&m));
                m
            } else {
                out.assign(&p);
                Array2::eye(3)
            };
            if d.keep_displacement {
                out += &displacements.slice(rows);
            }
            shape_transforms.push(m);
        }

        let cache = AugmentorCache {
            input: input.clone(),
            n_points,
            feature: feature_cache,
            pool,
            shape: shape_cache,
            displaced,
            displacement: displacement_cache,
            keep_shape: draws.iter().map(|d| d.keep_shape_transform).collect(),
        };
        Ok((
            AugmentedBatch {
                points,
                n_points,
                shape_transforms,
                displacements,
            },
            cache,
        ))
    }

    /// Accumulates `dL/dparams` into `grad` given `dL/d(augmented points)`.
    pub fn backward_batch(
        &self,
        cache: &AugmentorCache,
        d_points: &Array2<f64>,
        grad: &mut Augmentor,
    ) {
        let c = self.channels();
        let n = cache.n_points;
        let batch = cache.keep_shape.len();
        let mut d_pooled = Array2::<f64>::zeros((batch, c));
        let mut d_features = Array2::<f64>::zeros((batch * n, c));

        let mut d_shape_out = Array2::<f64>::zeros((batch, 9));
        for (b, &keep) in cache.keep_shape.iter().enumerate() {
            if keep {
                let rows = s![b * n..(b + 1) * n, ..];
                let dm = cache.input.slice(rows).t().dot(&d_points.slice(rows));
                d_shape_out
                    .row_mut(b)
                    .assign(&dm.into_shape_with_order(9).expect("3x3"));
            }
        }
        let d_shape_in = self
            .shape_head
            .backward(&cache.shape, d_shape_out, &mut grad.shape_head, true)
            .expect("input gradient requested");
        d_pooled += &d_shape_in.slice(s![.., ..c]);

        if let Some(disp_cache) = &cache.displacement {
            let mut d_disp_out = Array2::zeros((cache.displaced.len() * n, 3));
            for (k, &b) in cache.displaced.iter().enumerate() {
                d_disp_out
                    .slice_mut(s![k * n..(k + 1) * n, ..])
                    .assign(&d_points.slice(s![b * n..(b + 1) * n, ..]));
            }
            let d_disp_in = self
                .displacement_head
                .backward(disp_cache, d_disp_out, &mut grad.displacement_head, true)
                .expect("input gradient requested");
            for (k, &b) in cache.displaced.iter().enumerate() {
                let block = d_disp_in.slice(s![k * n..(k + 1) * n, ..]);
                d_features
                    .slice_mut(s![b * n..(b + 1) * n, ..])
                    .assign(&block.slice(s![.., ..c]));
                let mut row = d_pooled.row_mut(b);
                row += &block.slice(s![.., c..2 * c]).sum_axis(Axis(0));
            }
        }

        d_features += &segment_max_pool_backward(&cache.pool, d_pooled.view());
        self.feature
            .backward(&cache.feature, d_features, &mut grad.feature, false);
    }
}

impl Parameters for Augmentor {
    fn visit(&self, f: &mut dyn FnMut(&[f64])) {
        self.feature.visit(f);
        self.shape_head.visit(f);
        self.displacement_head.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        self.feature.visit_mut(f);
        self.shape_head.visit_mut(f);
        self.displacement_head.visit_mut(f);
    }
}
