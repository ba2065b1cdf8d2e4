//! Dense real-matrix primitives: symmetric (inverse) square roots, truncated
//! SVD, Frobenius inner products.
//!
//! Matrices are `nalgebra::DMatrix<f64>`. Storage is column-major internally;
//! every file format and constructor in this crate speaks row-major.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

pub type Matrix = DMatrix<f64>;

/// Relative Frobenius asymmetry accepted by the symmetric routines.
pub const SYMMETRY_TOL: f64 = 1e-10;

/// Eigenvalues below `EIGEN_FLOOR * max_eigenvalue` are clamped to that floor.
pub const EIGEN_FLOOR: f64 = 1e-14;

/// Builds a matrix from row-major entries, rejecting wrong lengths and
/// non-finite values.
pub fn matrix_from_row_major(rows: usize, cols: usize, data: &[f64]) -> Result<Matrix> {
    if rows == 0 || cols == 0 || rows.checked_mul(cols) != Some(data.len()) {
        return Err(Error::BadBufferLength {
            rows,
            cols,
            len: data.len(),
        });
    }
    let m = Matrix::from_row_slice(rows, cols, data);
    ensure_finite(&m)?;
    Ok(m)
}

/// Row-major copy of the entries.
pub fn to_row_major(m: &Matrix) -> Vec<f64> {
    let mut out = Vec::with_capacity(m.len());
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            out.push(m[(i, j)]);
        }
    }
    out
}

pub fn ensure_finite(m: &Matrix) -> Result<()> {
    for j in 0..m.ncols() {
        for i in 0..m.nrows() {
            if !m[(i, j)].is_finite() {
                return Err(Error::NonFinite { row: i, col: j });
            }
        }
    }
    Ok(())
}

fn ensure_same_shape(x: &Matrix, y: &Matrix) -> Result<()> {
    if x.shape() != y.shape() {
        return Err(Error::ShapeMismatch {
            left: x.shape(),
            right: y.shape(),
        });
    }
    Ok(())
}

/// `Σᵢⱼ xᵢⱼ·yᵢⱼ`.
pub fn frob_inner(x: &Matrix, y: &Matrix) -> Result<f64> {
    ensure_same_shape(x, y)?;
    Ok(x.iter().zip(y.iter()).map(|(a, b)| a * b).sum())
}

pub fn frob_norm_sq(x: &Matrix) -> f64 {
    x.iter().map(|v| v * v).sum()
}

/// Replaces `h` by `(h + hᵀ)/2`.
pub fn symmetrize(h: &mut Matrix) {
    let n = h.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let avg = 0.5 * (h[(i, j)] + h[(j, i)]);
            h[(i, j)] = avg;
            h[(j, i)] = avg;
        }
    }
}

fn relative_asymmetry(h: &Matrix) -> f64 {
    let norm = h.norm();
    if norm == 0.0 {
        return 0.0;
    }
    (h - h.transpose()).norm() / norm
}

/// Symmetric square root and inverse square root of `h + ridge·I`.
#[derive(Debug, Clone)]
pub struct SymmetricRoots {
    pub inv_sqrt: Matrix,
    pub sqrt: Matrix,
    /// Number of eigenvalues raised to the floor.
    pub floored: usize,
}

/// Computes both roots of `h + ridge·I` from one symmetric eigendecomposition.
pub fn symmetric_roots(h: &Matrix, ridge: f64) -> Result<SymmetricRoots> {
    let (rows, cols) = h.shape();
    if rows != cols {
        return Err(Error::NonSquare { rows, cols });
    }
    let asymmetry = relative_asymmetry(h);
    if asymmetry > SYMMETRY_TOL {
        return Err(Error::NotSymmetric { asymmetry });
    }
    let mut shifted = h.clone();
    symmetrize(&mut shifted);
    for i in 0..rows {
        shifted[(i, i)] += ridge;
    }
    let eig = shifted.symmetric_eigen();
    let max_eigenvalue = eig.eigenvalues.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(max_eigenvalue > 0.0) {
        return Err(Error::NotPositiveDefinite { max_eigenvalue });
    }
    let floor = EIGEN_FLOOR * max_eigenvalue;
    let mut floored = 0;
    let values: Vec<f64> = eig
        .eigenvalues
        .iter()
        .map(|&l| {
            if l < floor {
                floored += 1;
                floor
            } else {
                l
            }
        })
        .collect();

    let q = &eig.eigenvectors;
    let mut scaled_inv = q.clone();
    let mut scaled_sqrt = q.clone();
    for (j, &l) in values.iter().enumerate() {
        let root = l.sqrt();
        scaled_inv.column_mut(j).scale_mut(1.0 / root);
        scaled_sqrt.column_mut(j).scale_mut(root);
    }
    let mut inv_sqrt = &scaled_inv * q.transpose();
    let mut sqrt = &scaled_sqrt * q.transpose();
    symmetrize(&mut inv_sqrt);
    symmetrize(&mut sqrt);
    Ok(SymmetricRoots {
        inv_sqrt,
        sqrt,
        floored,
    })
}

/// The symmetric positive-definite inverse square root of `h + ridge·I`.
pub fn sym_inv_sqrt(h: &Matrix, ridge: f64) -> Result<Matrix> {
    symmetric_roots(h, ridge).map(|r| r.inv_sqrt)
}

/// Top-r singular triplets. Columns of `u` and `v` are orthonormal, `sigma`
/// is nonincreasing.
#[derive(Debug, Clone)]
pub struct SvdFactors {
    pub u: Matrix,
    pub sigma: Vec<f64>,
    pub v: Matrix,
}

impl SvdFactors {
    pub fn rank(&self) -> usize {
        self.sigma.len()
    }

    /// `u·diag(sigma)·vᵀ`.
    pub fn reconstruct(&self) -> Matrix {
        let mut us = self.u.clone();
        for (j, s) in self.sigma.iter().enumerate() {
            us.column_mut(j).scale_mut(*s);
        }
        us * self.v.transpose()
    }
}

/// Full thin SVD sorted descending, with the sign convention applied.
fn sorted_svd(g: &Matrix) -> SvdFactors {
    let svd = g.clone().svd(true, true);
    let u = svd.u.expect("left singular vectors requested");
    let v_t = svd.v_t.expect("right singular vectors requested");
    let k = svd.singular_values.len();

    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&i, &j| {
        svd.singular_values[j]
            .partial_cmp(&svd.singular_values[i])
            .unwrap_or(std::cmp::Ordering::Equal)
    });

    let mut out_u = Matrix::zeros(g.nrows(), k);
    let mut out_v = Matrix::zeros(g.ncols(), k);
    let mut sigma = Vec::with_capacity(k);
    for (dst, &src) in order.iter().enumerate() {
        let mut col_u = u.column(src).into_owned();
        let mut col_v = v_t.row(src).transpose();
        // Largest-magnitude entry of the left vector is made positive.
        let mut pivot = 0;
        for i in 1..col_u.len() {
            if col_u[i].abs() > col_u[pivot].abs() {
                pivot = i;
            }
        }
        if col_u[pivot] < 0.0 {
            col_u.neg_mut();
            col_v.neg_mut();
        }
        out_u.set_column(dst, &col_u);
        out_v.set_column(dst, &col_v);
        sigma.push(svd.singular_values[src].max(0.0));
    }
    SvdFactors {
        u: out_u,
        sigma,
        v: out_v,
    }
}

/// The top-`r` factors of `g`; `u·diag(sigma)·vᵀ` is the best rank-`r`
/// Frobenius approximation.
pub fn truncated_svd(g: &Matrix, r: usize) -> Result<SvdFactors> {
    let max = g.nrows().min(g.ncols());
    if r == 0 || r > max {
        return Err(Error::RankOutOfRange { rank: r, max });
    }
    let full = sorted_svd(g);
    Ok(SvdFactors {
        u: full.u.columns(0, r).into_owned(),
        sigma: full.sigma[..r].to_vec(),
        v: full.v.columns(0, r).into_owned(),
    })
}

/// All `min(m, n)` singular values, descending.
pub fn singular_values(g: &Matrix) -> Vec<f64> {
    let mut s: Vec<f64> = g
        .clone()
        .svd(false, false)
        .singular_values
        .iter()
        .map(|v| v.max(0.0))
        .collect();
    s.sort_by(|a, b| b.partial_cmp(a).unwrap_or(std::cmp::Ordering::Equal));
    s
}

pub fn spectral_norm(g: &Matrix) -> f64 {
    singular_values(g).first().copied().unwrap_or(0.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{gaussian_matrix, random_spd};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Cyclic Jacobi eigensolver, independent of the nalgebra routine used
    /// by the implementation.
    fn jacobi_eigen(a: &Matrix) -> (Vec<f64>, Matrix) {
        let n = a.nrows();
        let mut a = a.clone();
        let mut v = Matrix::identity(n, n);
        for _sweep in 0..100 {
            let mut off = 0.0;
            for i in 0..n {
                for j in 0..n {
                    if i != j {
                        off += a[(i, j)] * a[(i, j)];
                    }
                }
            }
            if off < 1e-30 {
                break;
            }
            for p in 0..n {
                for q in (p + 1)..n {
                    if a[(p, q)].abs() < 1e-300 {
                        continue;
                    }
                    let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * a[(p, q)]);
                    let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                    let t = if theta == 0.0 { 1.0 } else { t };
                    let c = 1.0 / (t * t + 1.0).sqrt();
                    let s = t * c;
                    for k in 0..n {
                        let akp = a[(k, p)];
                        let akq = a[(k, q)];
                        a[(k, p)] = c * akp - s * akq;
                        a[(k, q)] = s * akp + c * akq;
                    }
                    for k in 0..n {
                        let apk = a[(p, k)];
                        let aqk = a[(q, k)];
                        a[(p, k)] = c * apk - s * aqk;
                        a[(q, k)] = s * apk + c * aqk;
                    }
                    for k in 0..n {
                        let vkp = v[(k, p)];
                        let vkq = v[(k, q)];
                        v[(k, p)] = c * vkp - s * vkq;
                        v[(k, q)] = s * vkp + c * vkq;
                    }
                }
            }
        }
        ((0..n).map(|i| a[(i, i)]).collect(), v)
    }

    #[test]
    fn inv_sqrt_identity() {
        let l = sym_inv_sqrt(&Matrix::identity(3, 3), 0.0).unwrap();
        assert!((l - Matrix::identity(3, 3)).norm() < 1e-14);
    }

    #[test]
    fn inv_sqrt_diagonal() {
        let h = Matrix::from_diagonal(&nalgebra::DVector::from_vec(vec![4.0, 9.0]));
        let l = sym_inv_sqrt(&h, 0.0).unwrap();
        assert!((l[(0, 0)] - 0.5).abs() < 1e-14);
        assert!((l[(1, 1)] - 1.0 / 3.0).abs() < 1e-14);
        assert!(l[(0, 1)].abs() < 1e-14);
    }

    #[test]
    fn inv_sqrt_matches_jacobi_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let h = random_spd(&mut rng, 8);
        let ridge = 1e-6;
        let l = sym_inv_sqrt(&h, ridge).unwrap();
        let shifted = &h + Matrix::identity(8, 8) * ridge;
        let resid = (&l * &shifted * &l - Matrix::identity(8, 8)).norm();
        assert!(resid < 1e-8, "residual {resid}");

        let (vals, vecs) = jacobi_eigen(&shifted);
        let mut oracle = Matrix::zeros(8, 8);
        for (k, lam) in vals.iter().enumerate() {
            let q = vecs.column(k);
            oracle += (q * q.transpose()) / lam.sqrt();
        }
        assert!((&l - &oracle).norm() < 1e-9 * oracle.norm());
        assert!((&l - l.transpose()).norm() <= 1e-12 * l.norm());
    }

    #[test]
    fn inv_sqrt_errors() {
        let rect = Matrix::zeros(2, 3);
        assert!(matches!(sym_inv_sqrt(&rect, 0.0), Err(Error::NonSquare { .. })));
        let asym = Matrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        assert!(matches!(sym_inv_sqrt(&asym, 0.0), Err(Error::NotSymmetric { .. })));
        let neg = -Matrix::identity(2, 2);
        assert!(matches!(
            sym_inv_sqrt(&neg, 0.0),
            Err(Error::NotPositiveDefinite { .. })
        ));
        assert!(matches!(
            sym_inv_sqrt(&Matrix::zeros(3, 3), 0.0),
            Err(Error::NotPositiveDefinite { .. })
        ));
    }

    #[test]
    fn inv_sqrt_floors_singular_input() {
        let h = Matrix::from_diagonal(&nalgebra::DVector::from_vec(vec![1.0, 0.0]));
        let roots = symmetric_roots(&h, 0.0).unwrap();
        assert_eq!(roots.floored, 1);
        assert!(roots.inv_sqrt.iter().all(|v| v.is_finite()));
        let prod = &roots.inv_sqrt * &roots.sqrt;
        assert!((prod - Matrix::identity(2, 2)).norm() < 1e-8);
    }

    #[test]
    fn monotone_in_ridge() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let h = random_spd(&mut rng, 6);
        let s1 = singular_values(&sym_inv_sqrt(&h, 1e-3).unwrap());
        let s2 = singular_values(&sym_inv_sqrt(&h, 1e-1).unwrap());
        for (a, b) in s1.iter().zip(&s2) {
            assert!(b <= &(a * (1.0 + 1e-12)));
        }
    }

    #[test]
    fn truncated_diagonal() {
        let g = Matrix::from_diagonal(&nalgebra::DVector::from_vec(vec![3.0, 2.0, 1.0]));
        let f = truncated_svd(&g, 2).unwrap();
        assert!((f.sigma[0] - 3.0).abs() < 1e-14 && (f.sigma[1] - 2.0).abs() < 1e-14);
        let expected = Matrix::from_diagonal(&nalgebra::DVector::from_vec(vec![3.0, 2.0, 0.0]));
        assert!((f.reconstruct() - expected).norm() < 1e-13);
    }

    #[test]
    fn truncated_full_rank_and_orthonormal() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &(m, n) in &[(7, 4), (4, 7), (5, 5)] {
            let g = gaussian_matrix(&mut rng, m, n, 1.0);
            let k = m.min(n);
            let f = truncated_svd(&g, k).unwrap();
            assert!((f.reconstruct() - &g).norm() <= 1e-9 * g.norm());
            let eye = Matrix::identity(k, k);
            assert!((f.u.transpose() * &f.u - &eye).norm() < 1e-9);
            assert!((f.v.transpose() * &f.v - &eye).norm() < 1e-9);
            assert!(f.sigma.windows(2).all(|w| w[0] >= w[1]));
        }
    }

    #[test]
    fn truncated_rank_errors() {
        let g = Matrix::zeros(3, 2);
        assert!(matches!(truncated_svd(&g, 0), Err(Error::RankOutOfRange { .. })));
        assert!(matches!(truncated_svd(&g, 3), Err(Error::RankOutOfRange { .. })));
    }

    #[test]
    fn sign_convention_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let g = gaussian_matrix(&mut rng, 6, 5, 1.0);
        let f1 = truncated_svd(&g, 3).unwrap();
        let f2 = truncated_svd(&(-&g), 3).unwrap();
        assert!((&f1.u - &f2.u).norm() < 1e-12);
        assert!((&f1.v + &f2.v).norm() < 1e-12);
        for j in 0..3 {
            let col = f1.u.column(j);
            let pivot = col.iamax();
            assert!(col[pivot] > 0.0);
        }
    }

    #[test]
    fn eckart_young_random_candidate_dominance() {
        use rand_distr::{Distribution, StandardNormal};
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let g = gaussian_matrix(&mut rng, 12, 9, 1.0);
        let best = (truncated_svd(&g, 3).unwrap().reconstruct() - &g).norm();
        for _ in 0..10_000 {
            let a = gaussian_matrix(&mut rng, 12, 3, 1.0);
            let b = gaussian_matrix(&mut rng, 3, 9, 1.0);
            let scale: f64 = StandardNormal.sample(&mut rng);
            let q = a * b * scale;
            assert!(best <= (q - &g).norm());
        }
    }

    #[test]
    fn frob_inner_basics() {
        let i2 = Matrix::identity(2, 2);
        assert_eq!(frob_inner(&i2, &i2).unwrap(), 2.0);
        assert_eq!(frob_inner(&i2, &Matrix::zeros(2, 2)).unwrap(), 0.0);
        assert!(matches!(
            frob_inner(&i2, &Matrix::zeros(2, 3)),
            Err(Error::ShapeMismatch { .. })
        ));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = gaussian_matrix(&mut rng, 4, 3, 1.0);
        let y = gaussian_matrix(&mut rng, 4, 3, 1.0);
        let mut naive = 0.0;
        for i in 0..4 {
            for j in 0..3 {
                naive += x[(i, j)] * y[(i, j)];
            }
        }
        assert!((frob_inner(&x, &y).unwrap() - naive).abs() < 1e-13);
        assert!((frob_inner(&x, &x).unwrap() - frob_norm_sq(&x)).abs() < 1e-13);
    }

    #[test]
    fn row_major_constructor() {
        let m = matrix_from_row_major(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(m[(0, 2)], 3.0);
        assert_eq!(m[(1, 0)], 4.0);
        assert_eq!(to_row_major(&m), vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert!(matrix_from_row_major(2, 2, &[1.0; 3]).is_err());
        assert!(matches!(
            matrix_from_row_major(1, 2, &[1.0, f64::NAN]),
            Err(Error::NonFinite { row: 0, col: 1 })
        ));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            #[test]
            fn energy_identity(seed in any::<u64>(), m in 1usize..9, n in 1usize..9, r_frac in 0.0f64..1.0) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let g = gaussian_matrix(&mut rng, m, n, 1.0);
                let k = m.min(n);
                let r = 1 + ((k - 1) as f64 * r_frac) as usize;
                let f = truncated_svd(&g, r).unwrap();
                let kept: f64 = f.sigma.iter().map(|s| s * s).sum();
                let tail = frob_norm_sq(&(&g - f.reconstruct()));
                let total = frob_norm_sq(&g);
                prop_assert!((kept + tail - total).abs() <= 1e-8 * total);
            }
        }
    }
}
