//! Streaming second-order statistics for one layer.
//!
//! For compressed-path inputs `X` and full-precision inputs `X^f` (both
//! `d_in × N`, tokens as columns) the accumulator tracks
//!
//! ```text
//! H = (2/n)·X·Xᵀ        Δ = (2/n)·(X^f − X)·Xᵀ
//! ```
//!
//! over all `n` tokens seen so far, without keeping any activation around.
//! Each batch first decays the old statistics by `n_old / (n_old + m)` and
//! then adds the batch scaled by `√(2/n)`.

use crate::error::{Error, Result};
use crate::linalg::{symmetrize, Matrix};

/// Compressed-path and full-precision activations for the same tokens.
#[derive(Debug, Clone, Copy)]
pub struct ActivationBatch<'a> {
    pub x: &'a Matrix,
    pub xf: &'a Matrix,
}

impl<'a> ActivationBatch<'a> {
    pub fn new(x: &'a Matrix, xf: &'a Matrix) -> Result<Self> {
        if x.shape() != xf.shape() {
            return Err(Error::ShapeMismatch {
                left: x.shape(),
                right: xf.shape(),
            });
        }
        Ok(Self { x, xf })
    }

    pub fn width(&self) -> usize {
        self.x.ncols()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerStats {
    pub h: Matrix,
    pub delta: Matrix,
    pub n_tokens: u64,
}

impl LayerStats {
    pub fn new(d_in: usize) -> Self {
        Self {
            h: Matrix::zeros(d_in, d_in),
            delta: Matrix::zeros(d_in, d_in),
            n_tokens: 0,
        }
    }

    /// Statistics given directly, e.g. unscaled `X·Xᵀ` from an oracle.
    pub fn from_parts(h: Matrix, delta: Matrix, n_tokens: u64) -> Result<Self> {
        if h.nrows() != h.ncols() {
            return Err(Error::NonSquare {
                rows: h.nrows(),
                cols: h.ncols(),
            });
        }
        if delta.shape() != h.shape() {
            return Err(Error::ShapeMismatch {
                left: h.shape(),
                right: delta.shape(),
            });
        }
        Ok(Self { h, delta, n_tokens })
    }

    pub fn dim(&self) -> usize {
        self.h.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.n_tokens == 0
    }

    /// Folds one batch into the running statistics.
    pub fn update(&mut self, batch: ActivationBatch<'_>) -> Result<()> {
        if batch.x.nrows() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                actual: batch.x.nrows(),
            });
        }
        let m = batch.width() as u64;
        if m == 0 {
            return Err(Error::DimensionMismatch {
                expected: 1,
                actual: 0,
            });
        }
        let t = self.n_tokens;
        let gamma = t as f64 / (t + m) as f64;
        self.h *= gamma;
        self.delta *= gamma;
        self.n_tokens = t + m;

        let s = (2.0 / self.n_tokens as f64).sqrt();
        let xs = batch.x * s;
        let xfs = batch.xf * s;
        let xs_t = xs.transpose();
        self.h += &xs * &xs_t;
        let dx = xfs - &xs;
        self.delta += dx * &xs_t;
        symmetrize(&mut self.h);
        Ok(())
    }
}

/// Streams `batch` into `stats`, returning the updated statistics.
pub fn stats_update(mut stats: LayerStats, batch: ActivationBatch<'_>) -> Result<LayerStats> {
    stats.update(batch)?;
    Ok(stats)
}

/// One-shot `((2/N)·X·Xᵀ, (2/N)·(X^f − X)·Xᵀ)` over all tokens.
pub fn batch_stats_oracle(x_all: &Matrix, xf_all: &Matrix) -> Result<(Matrix, Matrix)> {
    if x_all.shape() != xf_all.shape() {
        return Err(Error::ShapeMismatch {
            left: x_all.shape(),
            right: xf_all.shape(),
        });
    }
    let n = x_all.ncols();
    if n == 0 {
        return Err(Error::DimensionMismatch {
            expected: 1,
            actual: 0,
        });
    }
    let scale = 2.0 / n as f64;
    let xt = x_all.transpose();
    let h = (x_all * &xt) * scale;
    let delta = ((xf_all - x_all) * &xt) * scale;
    Ok((h, delta))
}

/// Relative Frobenius distance `‖a − b‖ / max(‖b‖, tiny)`.
pub fn rel_frob(a: &Matrix, b: &Matrix) -> f64 {
    (a - b).norm() / b.norm().max(f64::MIN_POSITIVE)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{gaussian_matrix, rng_from_seed};
    use nalgebra::DVector;

    fn stream(x: &Matrix, xf: &Matrix, splits: &[usize]) -> LayerStats {
        let mut stats = LayerStats::new(x.nrows());
        let mut start = 0;
        for &end in splits.iter().chain(std::iter::once(&x.ncols())) {
            if end > start {
                let xb = x.columns(start, end - start).into_owned();
                let xfb = xf.columns(start, end - start).into_owned();
                stats.update(ActivationBatch::new(&xb, &xfb).unwrap()).unwrap();
            }
            start = end;
        }
        stats
    }

    #[test]
    fn first_batch_is_two_over_n() {
        let mut rng = rng_from_seed(1);
        let x = gaussian_matrix(&mut rng, 3, 5, 1.0);
        let stats = stats_update(LayerStats::new(3), ActivationBatch::new(&x, &x).unwrap()).unwrap();
        let expected = (&x * x.transpose()) * (2.0 / 5.0);
        assert!(rel_frob(&stats.h, &expected) < 1e-14);
        assert_eq!(stats.delta, Matrix::zeros(3, 3));
        assert_eq!(stats.n_tokens, 5);
    }

    #[test]
    fn two_batches_telescope() {
        let mut rng = rng_from_seed(2);
        let x1 = gaussian_matrix(&mut rng, 4, 6, 1.0);
        let x2 = gaussian_matrix(&mut rng, 4, 9, 1.0);
        let mut stats = LayerStats::new(4);
        stats.update(ActivationBatch::new(&x1, &x1).unwrap()).unwrap();
        stats.update(ActivationBatch::new(&x2, &x2).unwrap()).unwrap();
        let expected = (&x1 * x1.transpose() + &x2 * x2.transpose()) * (2.0 / 15.0);
        assert!(rel_frob(&stats.h, &expected) < 1e-13);
    }

    #[test]
    fn identical_paths_leave_delta_untouched() {
        let mut rng = rng_from_seed(3);
        let x1 = gaussian_matrix(&mut rng, 3, 4, 1.0);
        let xf1 = gaussian_matrix(&mut rng, 3, 4, 1.0);
        let x2 = gaussian_matrix(&mut rng, 3, 4, 1.0);
        let mut stats = LayerStats::new(3);
        stats.update(ActivationBatch::new(&x1, &xf1).unwrap()).unwrap();
        let before = stats.delta.clone() * 0.5; // γ = 4/8
        stats.update(ActivationBatch::new(&x2, &x2).unwrap()).unwrap();
        assert!(rel_frob(&stats.delta, &before) < 1e-14);
    }

    #[test]
    fn single_unit_token() {
        let x = Matrix::from_column_slice(3, 1, &[1.0, 0.0, 0.0]);
        let (h, delta) = batch_stats_oracle(&x, &x).unwrap();
        let expected = Matrix::from_diagonal(&DVector::from_vec(vec![2.0, 0.0, 0.0]));
        assert_eq!(h, expected);
        assert_eq!(delta, Matrix::zeros(3, 3));
    }

    #[test]
    fn dimension_errors() {
        let mut stats = LayerStats::new(3);
        let x = Matrix::zeros(2, 4);
        assert!(matches!(
            stats.update(ActivationBatch::new(&x, &x).unwrap()),
            Err(Error::DimensionMismatch { .. })
        ));
        let y = Matrix::zeros(2, 5);
        assert!(ActivationBatch::new(&x, &y).is_err());
        assert!(batch_stats_oracle(&x, &y).is_err());
    }

    #[test]
    fn empty_iff_zero() {
        let stats = LayerStats::new(4);
        assert!(stats.is_empty());
        assert_eq!(stats.h, Matrix::zeros(4, 4));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(48))]

            #[test]
            fn partition_invariance(seed in any::<u64>(), cuts in proptest::collection::vec(0usize..40, 0..6)) {
                let mut rng = rng_from_seed(seed);
                let x = gaussian_matrix(&mut rng, 5, 40, 1.0);
                let xf = &x + gaussian_matrix(&mut rng, 5, 40, 0.1);
                let mut cuts = cuts;
                cuts.sort_unstable();
                let streamed = stream(&x, &xf, &cuts);
                let (h, delta) = batch_stats_oracle(&x, &xf).unwrap();
                prop_assert!(rel_frob(&streamed.h, &h) < 1e-10);
                prop_assert!(rel_frob(&streamed.delta, &delta) < 1e-10);
            }

            #[test]
            fn permutation_and_scaling(seed in any::<u64>(), c in 0.1f64..10.0) {
                let mut rng = rng_from_seed(seed);
                let x = gaussian_matrix(&mut rng, 4, 12, 1.0);
                let xf = &x + gaussian_matrix(&mut rng, 4, 12, 0.2);
                let (h, delta) = batch_stats_oracle(&x, &xf).unwrap();

                let mut perm = x.clone();
                for j in 0..12 {
                    perm.set_column(j, &x.column(11 - j));
                }
                let (hp, _) = batch_stats_oracle(&perm, &perm).unwrap();
                prop_assert!(rel_frob(&hp, &h) < 1e-12);

                let (hs, ds) = batch_stats_oracle(&(&x * c), &(&xf * c)).unwrap();
                prop_assert!(rel_frob(&hs, &(&h * (c * c))) < 1e-12);
                prop_assert!(rel_frob(&ds, &(&delta * (c * c))) < 1e-12);
            }

            #[test]
            fn h_stays_symmetric_psd(seed in any::<u64>()) {
                let mut rng = rng_from_seed(seed);
                let x = gaussian_matrix(&mut rng, 6, 30, 1.0);
                let streamed = stream(&x, &x, &[3, 7, 20]);
                let h = &streamed.h;
                prop_assert!((h - h.transpose()).norm() <= 1e-9 * h.norm());
                let tol = -1e-9 * h.trace() / 6.0;
                let eig = h.clone().symmetric_eigen();
                prop_assert!(eig.eigenvalues.iter().all(|&l| l >= tol));
            }
        }
    }
}
