//! Cumulative-error-aware low-rank compression of layer stacks.
//!
//! Each dense layer `W` is replaced by rank-`r` factors `A·B` chosen to fit
//! both its own output on the compressed-path inputs and the full-precision
//! output of the uncompressed network. Statistics are streamed per layer as
//! `H = (2/N)·X·Xᵀ` and `Δ = (2/N)·(X^f − X)·Xᵀ`; the factors come from a
//! truncated SVD of the whitened target `W·(H + βΔ)·(H + λI)^{-1/2}`, with `β`
//! chosen per layer by a closed-form first-order criterion.

pub mod aces;
pub mod cealc;
pub mod error;
pub mod linalg;
pub mod model_io;
pub mod oracle;
pub mod pipeline;
pub mod stats;
pub mod synth;

pub use aces::{aces_select_beta, exact_rer, BetaSelection, FoaCoefficients, FoaDiagnostics, Guardrails, Objective};
pub use cealc::{alpha_to_beta, beta_to_alpha, cealc_compress, rank_from_ratio, LayerFactors};
pub use error::{Error, Result};
pub use linalg::Matrix;
pub use model_io::{Activation, CalibrationSet, FormatError, LayerDef, LayerWeights, ModelSpec};
pub use pipeline::{compress_model, evaluate, CompressionConfig, CompressionReport, EvalMetrics, LayerReport, RankPolicy};
pub use stats::{stats_update, ActivationBatch, LayerStats};
