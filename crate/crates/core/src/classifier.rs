//! Classifier interface and the PointNet-style reference network.

use ndarray::{Array1, Array2, ArrayView2};
use rand::Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::PointCloud;
use crate::losses::{argmax, softmax, ClassProbabilities};
use crate::nn::{
    segment_max_pool, segment_max_pool_backward, Mlp, MlpCache, MlpSpec, Parameters, SegmentPool,
};

/// Logits and pooled global features for a batch of clouds.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierOutput {
    /// `B x K`
    pub logits: Array2<f64>,
    /// `B x C_g`
    pub features: Array2<f64>,
}

/// A point cloud classifier usable inside the adversarial training loop.
///
/// The global feature must be invariant to the order of the input points.
/// Gradients are accumulated into a parameter set of the same type.
pub trait Classifier: Parameters + Clone + Serialize + DeserializeOwned + Send + Sync {
    type Cache;

    fn num_classes(&self) -> usize;

    fn feature_dim(&self) -> usize;

    /// Forward pass on `(B * n_points) x 3` stacked clouds.
    fn forward_batch(
        &self,
        points: ArrayView2<'_, f64>,
        n_points: usize,
    ) -> Result<ClassifierOutput>;

    fn forward_batch_cached(
        &self,
        points: Array2<f64>,
        n_points: usize,
    ) -> Result<(ClassifierOutput, Self::Cache)>;

    /// Accumulates parameter gradients and returns the gradient with respect
    /// to the input points when `need_input_grad` is set.
    fn backward_batch(
        &self,
        cache: &Self::Cache,
        d_logits: &Array2<f64>,
        d_features: Option<&Array2<f64>>,
        grad: &mut Self,
        need_input_grad: bool,
    ) -> Option<Array2<f64>>;

    /// Logits and global feature for one cloud.
    fn forward(&self, cloud: &PointCloud) -> Result<(Array1<f64>, Array1<f64>)> {
        let out = self.forward_batch(cloud.points(), cloud.n_points())?;
        Ok((out.logits.row(0).to_owned(), out.features.row(0).to_owned()))
    }

    fn probabilities(&self, cloud: &PointCloud) -> Result<ClassProbabilities> {
        let (logits, _) = self.forward(cloud)?;
        Ok(softmax(logits.as_slice().expect("contiguous")))
    }

    /// Arg-max class, lowest index on ties.
    fn predict(&self, cloud: &PointCloud) -> Result<usize> {
        let (logits, _) = self.forward(cloud)?;
        Ok(argmax(logits.as_slice().expect("contiguous")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    /// Widths of the shared point MLP; the last entry is `C_g`.
    pub point_widths: Vec<usize>,
    /// Hidden widths of the head; a final linear layer of width `K` follows.
    pub head_hidden: Vec<usize>,
    pub num_classes: usize,
    /// Standardize every hidden activation across channels. Keeps the
    /// pooled feature from shrinking toward zero under the consistency term.
    pub normalize_features: bool,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            point_widths: vec![64, 128, 128],
            head_hidden: vec![64],
            num_classes: 4,
            normalize_features: true,
        }
    }
}

/// Shared per-point MLP, max pool, fully-connected head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointNetClassifier {
    pub point_mlp: Mlp,
    pub head: Mlp,
}

pub struct PointNetCache {
    points: MlpCache,
    pool: SegmentPool,
    head: MlpCache,
}

impl PointNetClassifier {
    pub fn new<R: Rng + ?Sized>(config: &ClassifierConfig, rng: &mut R) -> Result<Self> {
        if config.num_classes < 2 {
            return Err(Error::Config(format!(
                "classifier needs at least 2 classes, got {}",
                config.num_classes
            )));
        }
        let point_mlp = Mlp::new(
            &MlpSpec::new(3, &config.point_widths, true).normalized(config.normalize_features),
            rng,
        )?;
        let mut head_widths = config.head_hidden.clone();
        head_widths.push(config.num_classes);
        let head = Mlp::new(
            &MlpSpec::new(point_mlp.output_width(), &head_widths, false)
                .normalized(config.normalize_features),
            rng,
        )?;
        Ok(Self { point_mlp, head })
    }
}

impl Parameters for PointNetClassifier {
    fn visit(&self, f: &mut dyn FnMut(&[f64])) {
        self.point_mlp.visit(f);
        self.head.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        self.point_mlp.visit_mut(f);
        self.head.visit_mut(f);
    }
}

impl Classifier for PointNetClassifier {
    type Cache = PointNetCache;

    fn num_classes(&self) -> usize {
        self.head.output_width()
    }

    fn feature_dim(&self) -> usize {
        self.point_mlp.output_width()
    }

    fn forward_batch(
        &self,
        points: ArrayView2<'_, f64>,
        n_points: usize,
    ) -> Result<ClassifierOutput> {
        let f = self.point_mlp.forward(points)?;
        let pool = segment_max_pool(f.view(), n_points)?;
        let logits = self.head.forward(pool.pooled.view())?;
        Ok(ClassifierOutput {
            logits,
            features: pool.pooled,
        })
    }

    fn forward_batch_cached(
        &self,
        points: Array2<f64>,
        n_points: usize,
    ) -> Result<(ClassifierOutput, PointNetCache)> {
        let (f, points_cache) = self.point_mlp.forward_cached(points)?;
        let pool = segment_max_pool(f.view(), n_points)?;
        let (logits, head_cache) = self.head.forward_cached(pool.pooled.clone())?;
        let out = ClassifierOutput {
            logits,
            features: pool.pooled.clone(),
        };
        Ok((
            out,
            PointNetCache {
                points: points_cache,
                pool,
                head: head_cache,
            },
        ))
    }

    fn backward_batch(
        &self,
        cache: &PointNetCache,
        d_logits: &Array2<f64>,
        d_features: Option<&Array2<f64>>,
        grad: &mut Self,
        need_input_grad: bool,
    ) -> Option<Array2<f64>> {
        let mut d_pooled = self
            .head
            .backward(&cache.head, d_logits.clone(), &mut grad.head, true)
            .expect("input gradient requested");
        if let Some(df) = d_features {
            d_pooled += df;
        }
        let d_f = segment_max_pool_backward(&cache.pool, d_pooled.view());
        self.point_mlp
            .backward(&cache.points, d_f, &mut grad.point_mlp, need_input_grad)
    }
}
