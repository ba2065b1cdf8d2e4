//! Cumulative-error-aware layer compression.
//!
//! For statistics `(H, Δ)` and alignment weight `β = α/(1+α)` the rank-`r`
//! minimizer of
//!
//! ```text
//! ‖(AB − W)X‖² + α‖ABX − W·X^f‖²
//! ```
//!
//! is read off the truncated SVD of the whitened target
//! `G = W·(H + βΔ)·L` with `L = (H + λI)^{-1/2}`:
//! `A = Ũ·Σ^{1/2}`, `B = Σ^{1/2}·Ṽᵀ·L`.

use crate::error::{Error, Result};
use crate::linalg::{symmetric_roots, truncated_svd, Matrix};
use crate::stats::LayerStats;

/// Default relative ridge: `λ = ridge_rel · mean(diag(H))`.
pub const DEFAULT_RIDGE_REL: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct WhitenedContext {
    /// `(H + λI)^{-1/2}`
    pub l: Matrix,
    /// `(H + λI)^{1/2}`
    pub h_sqrt: Matrix,
    /// Absolute ridge `λ` that was applied.
    pub ridge_used: f64,
}

impl WhitenedContext {
    pub fn new(stats: &LayerStats, ridge_rel: f64) -> Result<Self> {
        if stats.is_empty() {
            return Err(Error::EmptyStats);
        }
        if !(ridge_rel >= 0.0) || !ridge_rel.is_finite() {
            return Err(Error::ConfigInvalid(format!(
                "relative ridge must be nonnegative, got {ridge_rel}"
            )));
        }
        let ridge = ridge_rel * stats.h.trace() / stats.dim() as f64;
        let roots = symmetric_roots(&stats.h, ridge)?;
        Ok(Self {
            l: roots.inv_sqrt,
            h_sqrt: roots.sqrt,
            ridge_used: ridge,
        })
    }
}

/// A rank-`r` factor pair replacing a dense `d_out×d_in` weight.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerFactors {
    /// `d_out × r`
    pub a: Matrix,
    /// `r × d_in`
    pub b: Matrix,
    pub rank: usize,
    pub beta_used: f64,
    pub alpha_used: f64,
}

impl LayerFactors {
    pub fn d_out(&self) -> usize {
        self.a.nrows()
    }

    pub fn d_in(&self) -> usize {
        self.b.ncols()
    }

    /// The compressed weight `A·B`.
    pub fn effective_weight(&self) -> Matrix {
        &self.a * &self.b
    }

    pub fn param_count(&self) -> usize {
        self.rank * (self.d_out() + self.d_in())
    }
}

pub fn alpha_to_beta(alpha: f64) -> f64 {
    if alpha.is_infinite() {
        1.0
    } else {
        alpha / (1.0 + alpha)
    }
}

pub fn beta_to_alpha(beta: f64) -> f64 {
    if beta >= 1.0 {
        f64::INFINITY
    } else {
        beta / (1.0 - beta)
    }
}

fn check_beta(beta: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::ConfigInvalid(format!("beta must lie in [0, 1], got {beta}")));
    }
    Ok(())
}

fn check_weight(w: &Matrix, stats: &LayerStats) -> Result<()> {
    if w.ncols() != stats.dim() {
        return Err(Error::DimensionMismatch {
            expected: stats.dim(),
            actual: w.ncols(),
        });
    }
    Ok(())
}

/// `G = W·(H + βΔ)·L`.
pub fn build_target(w: &Matrix, stats: &LayerStats, beta: f64, ctx: &WhitenedContext) -> Result<Matrix> {
    check_weight(w, stats)?;
    check_beta(beta)?;
    if ctx.l.nrows() != stats.dim() {
        return Err(Error::DimensionMismatch {
            expected: stats.dim(),
            actual: ctx.l.nrows(),
        });
    }
    let mixed = &stats.h + &stats.delta * beta;
    Ok(w * mixed * &ctx.l)
}

/// Closed-form factors against an already whitened context.
pub fn compress_with_context(
    w: &Matrix,
    stats: &LayerStats,
    r: usize,
    beta: f64,
    ctx: &WhitenedContext,
) -> Result<LayerFactors> {
    let g = build_target(w, stats, beta, ctx)?;
    let svd = truncated_svd(&g, r)?;
    let mut a = svd.u.clone();
    let mut vt = svd.v.transpose();
    for (j, s) in svd.sigma.iter().enumerate() {
        let root = s.sqrt();
        a.column_mut(j).scale_mut(root);
        vt.row_mut(j).scale_mut(root);
    }
    let b = vt * &ctx.l;
    Ok(LayerFactors {
        a,
        b,
        rank: r,
        beta_used: beta,
        alpha_used: beta_to_alpha(beta),
    })
}

/// Whitens `stats.h` with the relative ridge and returns the rank-`r` factors.
pub fn cealc_compress(
    w: &Matrix,
    stats: &LayerStats,
    r: usize,
    beta: f64,
    ridge_rel: f64,
) -> Result<LayerFactors> {
    check_weight(w, stats)?;
    let max = w.nrows().min(w.ncols());
    if r == 0 || r > max {
        return Err(Error::RankOutOfRange { rank: r, max });
    }
    let ctx = WhitenedContext::new(stats, ridge_rel)?;
    compress_with_context(w, stats, r, beta, &ctx)
}

/// Largest rank whose factor pair stores at most `(1 − ratio)` of the dense
/// parameters, clamped to `[1, min(d_out, d_in)]`.
pub fn rank_from_ratio(d_out: usize, d_in: usize, ratio: f64) -> usize {
    let budget = (1.0 - ratio) * (d_out as f64) * (d_in as f64) / ((d_out + d_in) as f64);
    let r = budget.floor().max(1.0) as usize;
    r.min(d_out.min(d_in))
}
