use ndarray::{Array1, Array2, ArrayView2};

use super::{PerPointFeatures, ShapeFeature};
use crate::error::{Error, Result};

/// Result of a channel-wise max over consecutive row segments.
#[derive(Clone, Debug)]
pub struct SegmentPool {
    /// `segments x C`
    pub pooled: Array2<f64>,
    /// Absolute row index of each maximum, `segments * C` entries row-major.
    pub argmax: Vec<usize>,
    pub rows: usize,
}

/// Max-pools each block of `segment_len` consecutive rows. Ties resolve to
/// the first row.
pub fn segment_max_pool(x: ArrayView2<'_, f64>, segment_len: usize) -> Result<SegmentPool> {
    if segment_len == 0 || x.nrows() == 0 {
        return Err(Error::InvalidInput("max pool over zero points".into()));
    }
    if !x.nrows().is_multiple_of(segment_len) {
        return Err(Error::InvalidInput(format!(
            "{} rows do not split into segments of {}",
            x.nrows(),
            segment_len
        )));
    }
    let segments = x.nrows() / segment_len;
    let channels = x.ncols();
    let mut pooled = Array2::from_elem((segments, channels), f64::NEG_INFINITY);
    let mut argmax = vec![0usize; segments * channels];
    for s in 0..segments {
        let base = s * segment_len;
        for c in 0..channels {
            argmax[s * channels + c] = base;
        }
        for r in base..base + segment_len {
            let row = x.row(r);
            for c in 0..channels {
                if row[c] > pooled[[s, c]] {
                    pooled[[s, c]] = row[c];
                    argmax[s * channels + c] = r;
                }
            }
        }
    }
    Ok(SegmentPool {
        pooled,
        argmax,
        rows: x.nrows(),
    })
}

/// Routes pooled gradients back to the winning rows.
pub fn segment_max_pool_backward(pool: &SegmentPool, d_pooled: ArrayView2<'_, f64>) -> Array2<f64> {
    let channels = pool.pooled.ncols();
    let mut dx = Array2::zeros((pool.rows, channels));
    for s in 0..pool.pooled.nrows() {
        for c in 0..channels {
            dx[[pool.argmax[s * channels + c], c]] += d_pooled[[s, c]];
        }
    }
    dx
}

/// Channel-wise maximum over all points.
pub fn max_pool_points(input: &PerPointFeatures) -> Result<ShapeFeature> {
    let pool = segment_max_pool(input.0.view(), input.0.nrows().max(1))?;
    let row: Array1<f64> = pool.pooled.row(0).to_owned();
    Ok(ShapeFeature(row))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Axis};
    use proptest::prelude::*;

    #[test]
    fn two_rows() {
        let f = PerPointFeatures(array![[1.0, 5.0], [3.0, 2.0]]);
        assert_eq!(max_pool_points(&f).unwrap().0.to_vec(), vec![3.0, 5.0]);
    }

    #[test]
    fn single_point_is_its_row() {
        let f = PerPointFeatures(array![[-1.0, 0.5, 7.0]]);
        assert_eq!(
            max_pool_points(&f).unwrap().0.to_vec(),
            vec![-1.0, 0.5, 7.0]
        );
    }

    #[test]
    fn empty_input_rejected() {
        let f = PerPointFeatures(Array2::zeros((0, 4)));
        assert!(matches!(max_pool_points(&f), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn segments_pool_independently() {
        let x = array![[1.0], [4.0], [2.0], [-3.0], [-1.0], [-2.0]];
        let p = segment_max_pool(x.view(), 3).unwrap();
        assert_eq!(p.pooled, array![[4.0], [-1.0]]);
        assert_eq!(p.argmax, vec![1, 4]);
        let dx = segment_max_pool_backward(&p, array![[2.0], [5.0]].view());
        assert_eq!(dx, array![[0.0], [2.0], [0.0], [0.0], [5.0], [0.0]]);
    }

    proptest! {
        #[test]
        fn invariant_under_row_permutation(
            rows in prop::collection::vec(prop::collection::vec(-10.0f64..10.0, 4), 1..20),
            seed in any::<u64>(),
        ) {
            let n = rows.len();
            let flat: Vec<f64> = rows.into_iter().flatten().collect();
            let x = Array2::from_shape_vec((n, 4), flat).unwrap();
            let mut perm: Vec<usize> = (0..n).collect();
            let mut state = seed;
            for i in (1..n).rev() {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                perm.swap(i, (state >> 33) as usize % (i + 1));
            }
            let a = max_pool_points(&PerPointFeatures(x.clone())).unwrap();
            let b = max_pool_points(&PerPointFeatures(x.select(Axis(0), &perm))).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
