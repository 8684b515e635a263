//! Point clouds, unit-ball normalization, affine augmentation and the
//! hand-designed perturbations used by the conventional augmentation
//! baseline and the robustness suite.

use ndarray::{s, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// An ordered set of `N` points in 3D, stored as an `N x 3` matrix of row
/// vectors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointCloud {
    points: Array2<f64>,
}

impl PointCloud {
    pub fn new(points: Array2<f64>) -> Result<Self> {
        if points.ncols() != 3 {
            return Err(Error::InvalidInput(format!(
                "point cloud must have 3 columns, got {}",
                points.ncols()
            )));
        }
        if points.nrows() == 0 {
            return Err(Error::InvalidInput("point cloud has no points".into()));
        }
        if let Some(bad) = points.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "non-finite coordinate at point {}",
                bad / 3
            )));
        }
        Ok(Self {
            points: points.as_standard_layout().into_owned(),
        })
    }

    pub fn from_points(points: &[[f64; 3]]) -> Result<Self> {
        let flat: Vec<f64> = points.iter().flatten().copied().collect();
        let arr = Array2::from_shape_vec((points.len(), 3), flat)
            .map_err(|e| Error::InvalidInput(e.to_string()))?;
        Self::new(arr)
    }

    /// Wraps a matrix produced by internal arithmetic on valid clouds.
    pub(crate) fn from_trusted(points: Array2<f64>) -> Self {
        debug_assert_eq!(points.ncols(), 3);
        Self {
            points: points.as_standard_layout().into_owned(),
        }
    }

    pub fn points(&self) -> ArrayView2<'_, f64> {
        self.points.view()
    }

    pub fn point(&self, i: usize) -> ArrayView1<'_, f64> {
        self.points.row(i)
    }

    pub fn n_points(&self) -> usize {
        self.points.nrows()
    }

    pub fn into_array(self) -> Array2<f64> {
        self.points
    }

    pub fn centroid(&self) -> [f64; 3] {
        let mean = self.points.mean_axis(Axis(0)).expect("non-empty cloud");
        [mean[0], mean[1], mean[2]]
    }

    pub fn max_norm(&self) -> f64 {
        self.points
            .rows()
            .into_iter()
            .map(|r| r.dot(&r).sqrt())
            .fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.points.iter().all(|v| v.is_finite())
    }

    /// Returns a copy whose rows are reordered so that row `i` is the input's
    /// row `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        if perm.len() != self.n_points() {
            return Err(Error::InvalidInput(format!(
                "permutation length {} does not match {} points",
                perm.len(),
                self.n_points()
            )));
        }
        Ok(Self::from_trusted(self.points.select(Axis(0), perm)))
    }
}

/// A per-sample affine augmentation: a `3 x 3` shape transform applied by
/// right-multiplication plus an `N x 3` displacement field.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffineAugmentation {
    pub shape_transform: Array2<f64>,
    pub displacement: Array2<f64>,
}

impl AffineAugmentation {
    pub fn identity(n_points: usize) -> Self {
        Self {
            shape_transform: Array2::eye(3),
            displacement: Array2::zeros((n_points, 3)),
        }
    }
}

/// Centers the cloud on its centroid and scales it so the farthest point has
/// norm 1. A cloud with zero spread maps to the all-zero cloud.
pub fn normalize_unit_ball(cloud: &PointCloud) -> Result<PointCloud> {
    if !cloud.is_finite() {
        return Err(Error::InvalidInput("non-finite coordinates".into()));
    }
    let centroid = cloud.points.mean_axis(Axis(0)).expect("non-empty cloud");
    let mut centered = &cloud.points - &centroid.insert_axis(Axis(0));
    let radius = centered
        .rows()
        .into_iter()
        .map(|r| r.dot(&r).sqrt())
        .fold(0.0, f64::max);
    if radius > 0.0 {
        centered.mapv_inplace(|v| v / radius);
    } else {
        centered.fill(0.0);
    }
    Ok(PointCloud::from_trusted(centered))
}

/// Computes `P * M + D`.
pub fn apply_affine(cloud: &PointCloud, aug: &AffineAugmentation) -> Result<PointCloud> {
    if aug.shape_transform.dim() != (3, 3) {
        return Err(Error::InvalidInput(format!(
            "shape transform must be 3x3, got {:?}",
            aug.shape_transform.dim()
        )));
    }
    if aug.displacement.dim() != (cloud.n_points(), 3) {
        return Err(Error::InvalidInput(format!(
            "displacement is {:?} but cloud has {} points",
            aug.displacement.dim(),
            cloud.n_points()
        )));
    }
    let out = cloud.points.dot(&aug.shape_transform) + &aug.displacement;
    Ok(PointCloud::from_trusted(out))
}

/// The vertical axis of the canonical object frame.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum GravityAxis {
    X,
    #[default]
    Y,
    Z,
}

impl GravityAxis {
    fn index(self) -> usize {
        match self {
            GravityAxis::X => 0,
            GravityAxis::Y => 1,
            GravityAxis::Z => 2,
        }
    }
}

/// Right-hand-rule rotation about the `+Y` axis acting on row vectors.
pub fn rotate_gravity_axis(cloud: &PointCloud, angle: f64) -> Result<PointCloud> {
    rotate_about(cloud, angle, GravityAxis::Y)
}

pub fn rotate_about(cloud: &PointCloud, angle: f64, axis: GravityAxis) -> Result<PointCloud> {
    if !angle.is_finite() {
        return Err(Error::InvalidInput(format!("rotation angle {angle}")));
    }
    let (sin, cos) = angle.sin_cos();
    // (a, b) are the two coordinates rotated into each other, ordered so that
    // a -> b is counter-clockwise when viewed from the positive axis.
    let (a, b) = match axis {
        GravityAxis::X => (1, 2),
        GravityAxis::Y => (2, 0),
        GravityAxis::Z => (0, 1),
    };
    debug_assert!(a != axis.index() && b != axis.index());
    let mut out = cloud.points.clone();
    for mut row in out.rows_mut() {
        let (pa, pb) = (row[a], row[b]);
        row[a] = cos * pa - sin * pb;
        row[b] = sin * pa + cos * pb;
    }
    Ok(PointCloud::from_trusted(out))
}

pub fn uniform_scale(cloud: &PointCloud, ratio: f64) -> Result<PointCloud> {
    if !(ratio > 0.0 && ratio.is_finite()) {
        return Err(Error::InvalidInput(format!(
            "scale ratio must be positive, got {ratio}"
        )));
    }
    Ok(PointCloud::from_trusted(cloud.points.mapv(|v| v * ratio)))
}

/// Adds clipped zero-mean Gaussian noise to every coordinate.
pub fn jitter<R: Rng + ?Sized>(
    cloud: &PointCloud,
    sigma: f64,
    clip: f64,
    rng: &mut R,
) -> Result<PointCloud> {
    if !(sigma >= 0.0 && clip >= 0.0) {
        return Err(Error::InvalidInput(format!(
            "jitter needs sigma >= 0 and clip >= 0, got sigma={sigma} clip={clip}"
        )));
    }
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::InvalidInput(e.to_string()))?;
    let mut out = cloud.points.clone();
    for v in out.iter_mut() {
        *v += normal.sample(rng).clamp(-clip, clip);
    }
    Ok(PointCloud::from_trusted(out))
}

/// Settings for the random rotate/scale/jitter pipeline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConventionalDaParams {
    pub rotate: bool,
    pub axis: GravityAxis,
    /// Uniform scale range `[lo, hi]`; `None` disables scaling.
    pub scale_range: Option<(f64, f64)>,
    /// `(sigma, clip)`; `None` disables jitter.
    pub jitter: Option<(f64, f64)>,
}

impl Default for ConventionalDaParams {
    fn default() -> Self {
        Self {
            rotate: true,
            axis: GravityAxis::Y,
            scale_range: Some((0.8, 1.25)),
            jitter: Some((0.01, 0.05)),
        }
    }
}

impl ConventionalDaParams {
    pub fn disabled() -> Self {
        Self {
            rotate: false,
            axis: GravityAxis::Y,
            scale_range: None,
            jitter: None,
        }
    }
}

/// Random rotation about the gravity axis, then random uniform scaling, then
/// clipped jitter. Draw order from `rng` is angle, scale, noise.
pub fn conventional_da<R: Rng + ?Sized>(
    cloud: &PointCloud,
    rng: &mut R,
    params: &ConventionalDaParams,
) -> Result<PointCloud> {
    let mut out = cloud.clone();
    if params.rotate {
        let angle = rng.random_range(0.0..std::f64::consts::TAU);
        out = rotate_about(&out, angle, params.axis)?;
    }
    if let Some((lo, hi)) = params.scale_range {
        if !(lo > 0.0 && lo <= hi) {
            return Err(Error::Config(format!("invalid scale range [{lo}, {hi}]")));
        }
        let ratio = if lo == hi {
            lo
        } else {
            rng.random_range(lo..=hi)
        };
        out = uniform_scale(&out, ratio)?;
    }
    if let Some((sigma, clip)) = params.jitter {
        out = jitter(&out, sigma, clip, rng)?;
    }
    Ok(out)
}

/// Stacks clouds with a common point count into a `(B * N) x 3` matrix.
pub fn stack_clouds<'a, I>(clouds: I) -> Result<(Array2<f64>, usize)>
where
    I: IntoIterator<Item = &'a PointCloud>,
{
    let clouds: Vec<&PointCloud> = clouds.into_iter().collect();
    let first = clouds
        .first()
        .ok_or_else(|| Error::InvalidInput("empty batch".into()))?;
    let n = first.n_points();
    if let Some(bad) = clouds.iter().find(|c| c.n_points() != n) {
        return Err(Error::InvalidInput(format!(
            "batch mixes point counts {} and {}",
            n,
            bad.n_points()
        )));
    }
    let mut out = Array2::zeros((clouds.len() * n, 3));
    for (b, c) in clouds.iter().enumerate() {
        out.slice_mut(s![b * n..(b + 1) * n, ..]).assign(&c.points);
    }
    Ok((out, n))
}
