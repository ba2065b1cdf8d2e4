//! Seeded random models, calibration sets and test matrices.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::linalg::Matrix;
use crate::model_io::{Activation, CalibrationSet, LayerDef, LayerWeights, ModelSpec};

pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// i.i.d. `N(0, scale²)` entries, drawn in row-major order.
pub fn gaussian_matrix<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, scale: f64) -> Matrix {
    let mut m = Matrix::zeros(rows, cols);
    for i in 0..rows {
        for j in 0..cols {
            let z: f64 = rng.sample(StandardNormal);
            m[(i, j)] = scale * z;
        }
    }
    m
}

/// `G·Gᵀ/n + I/n` for a Gaussian `n×2n` matrix `G`: well conditioned SPD.
pub fn random_spd<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Matrix {
    let g = gaussian_matrix(rng, n, 2 * n, 1.0);
    (&g * g.transpose()) / n as f64 + Matrix::identity(n, n) / n as f64
}

/// Random orthonormal basis (`rows×cols`, `cols ≤ rows`) from a QR factorization.
pub fn random_orthonormal<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> Matrix {
    let g = gaussian_matrix(rng, rows, cols, 1.0);
    g.qr().q().columns(0, cols).into_owned()
}

/// Dense layer stack with `W ~ N(0, 1/d_in)` entries.
///
/// `dims` lists boundary widths: `dims[0]` is the input width and layer `i`
/// maps `dims[i]` to `dims[i + 1]`.
pub fn random_model(dims: &[usize], activation: Activation, seed: u64) -> ModelSpec {
    let mut rng = rng_from_seed(seed);
    let layers = dims
        .windows(2)
        .map(|w| {
            let (d_in, d_out) = (w[0], w[1]);
            let weights = gaussian_matrix(&mut rng, d_out, d_in, 1.0 / (d_in as f64).sqrt());
            LayerDef {
                activation,
                weights: LayerWeights::Dense(weights),
            }
        })
        .collect();
    ModelSpec { layers }
}

/// `n_tokens` i.i.d. standard-normal tokens of width `d_in`, drawn token by token.
pub fn random_calibration(d_in: usize, n_tokens: usize, seed: u64) -> CalibrationSet {
    let mut rng = rng_from_seed(seed);
    let mut data = Matrix::zeros(d_in, n_tokens);
    for t in 0..n_tokens {
        for i in 0..d_in {
            data[(i, t)] = rng.sample(StandardNormal);
        }
    }
    CalibrationSet { data }
}
