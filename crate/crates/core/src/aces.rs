//! Adaptive selection of the alignment weight `β` per layer.
//!
//! The whitened target is affine in `β`: `G(β) = S + βD` with `S = W·H·L` and
//! `D = W·Δ·L`. Freezing the top-`r` singular subspaces of `S` turns the
//! truncation tail ratio into a ratio of quadratics,
//!
//! ```text
//! ρ̃(β)² = (a + 2bβ + cβ²) / (A + 2Bβ + Cβ²)
//! ```
//!
//! whose stationary points solve a quadratic in closed form, so a single SVD
//! of `S` is enough to pick `β`.

use crate::cealc::{beta_to_alpha, WhitenedContext};
use crate::error::{Error, Result};
use crate::linalg::{frob_inner, frob_norm_sq, singular_values, spectral_norm, truncated_svd, Matrix};
use crate::stats::LayerStats;

/// Relative tolerance under which two candidate scores count as equal.
pub const SCORE_TIE_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    /// Minimize tail energy over total energy.
    Ratio,
    /// Minimize tail energy alone.
    Energy,
}

impl std::str::FromStr for Objective {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "ratio" => Ok(Objective::Ratio),
            "energy" => Ok(Objective::Energy),
            other => Err(format!("unknown objective `{other}` (expected ratio|energy)")),
        }
    }
}

impl std::fmt::Display for Objective {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Objective::Ratio => "ratio",
            Objective::Energy => "energy",
        })
    }
}

/// Clip interval, cap and shrink applied to every candidate before scoring.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Guardrails {
    pub beta_min: f64,
    pub beta_max: f64,
    pub beta_cap: f64,
    pub shrink: f64,
    pub objective: Objective,
}

impl Guardrails {
    /// Bounds `[0, 1]`, cap 1, shrink 1.
    pub fn disabled(objective: Objective) -> Self {
        Self {
            beta_min: 0.0,
            beta_max: 1.0,
            beta_cap: 1.0,
            shrink: 1.0,
            objective,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = (0.0..=1.0).contains(&self.beta_min)
            && (0.0..=1.0).contains(&self.beta_max)
            && self.beta_min <= self.beta_max
            && (0.0..=1.0).contains(&self.beta_cap)
            && self.shrink > 0.0
            && self.shrink <= 1.0;
        if ok {
            Ok(())
        } else {
            Err(Error::ConfigInvalid(format!("invalid beta guardrails {self:?}")))
        }
    }

    /// Clip to `[beta_min, beta_max]`, then `shrink · min(β, beta_cap)`.
    pub fn apply(&self, beta: f64) -> f64 {
        let clipped = beta.max(self.beta_min).min(self.beta_max);
        self.shrink * clipped.min(self.beta_cap)
    }
}

/// Frozen principal subspace of `S` and the projected pair `(S⊥, D⊥)`.
#[derive(Debug, Clone)]
pub struct FoaContext {
    pub s: Matrix,
    pub d: Matrix,
    pub u_r: Matrix,
    pub v_r: Matrix,
    pub s_perp: Matrix,
    pub d_perp: Matrix,
    /// Leading singular values of `S`: `r` of them, plus `σ_{r+1}` when it exists.
    pub sigma: Vec<f64>,
    pub rank: usize,
}

impl FoaContext {
    /// `δ = σ_r(S) − σ_{r+1}(S)`, with `σ_{r+1} = 0` at full rank.
    pub fn gap(&self) -> f64 {
        let next = self.sigma.get(self.rank).copied().unwrap_or(0.0);
        (self.sigma[self.rank - 1] - next).max(0.0)
    }
}

/// `P_L·M·P_R` with `P_L = I − UUᵀ`, `P_R = I − VVᵀ`.
fn project_out(m: &Matrix, u: &Matrix, v: &Matrix) -> Matrix {
    let left = m - u * (u.transpose() * m);
    &left - (&left * v) * v.transpose()
}

pub fn foa_context_with(w: &Matrix, stats: &LayerStats, r: usize, ctx: &WhitenedContext) -> Result<FoaContext> {
    if w.ncols() != stats.dim() {
        return Err(Error::DimensionMismatch {
            expected: stats.dim(),
            actual: w.ncols(),
        });
    }
    let k = w.nrows().min(w.ncols());
    if r == 0 || r > k {
        return Err(Error::RankOutOfRange { rank: r, max: k });
    }
    foa_context_from_targets(w * &stats.h * &ctx.l, w * &stats.delta * &ctx.l, r)
}

/// Frozen subspace for whitened targets `S = W·H·L` and `D = W·Δ·L` given
/// directly.
pub fn foa_context_from_targets(s: Matrix, d: Matrix, r: usize) -> Result<FoaContext> {
    if s.shape() != d.shape() {
        return Err(Error::ShapeMismatch {
            left: s.shape(),
            right: d.shape(),
        });
    }
    let k = s.nrows().min(s.ncols());
    if r == 0 || r > k {
        return Err(Error::RankOutOfRange { rank: r, max: k });
    }
    // One SVD, one extra value for the gap diagnostic.
    let svd = truncated_svd(&s, (r + 1).min(k))?;
    let u_r = svd.u.columns(0, r).into_owned();
    let v_r = svd.v.columns(0, r).into_owned();
    let s_perp = project_out(&s, &u_r, &v_r);
    let d_perp = project_out(&d, &u_r, &v_r);
    Ok(FoaContext {
        s,
        d,
        u_r,
        v_r,
        s_perp,
        d_perp,
        sigma: svd.sigma,
        rank: r,
    })
}

pub fn foa_context(w: &Matrix, stats: &LayerStats, r: usize, ridge_rel: f64) -> Result<FoaContext> {
    let ctx = WhitenedContext::new(stats, ridge_rel)?;
    foa_context_with(w, stats, r, &ctx)
}

/// Coefficients of the numerator `a + 2bβ + cβ²` (tail energy in the frozen
/// complement) and denominator `A + 2Bβ + Cβ²` (total energy).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FoaCoefficients {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub big_a: f64,
    pub big_b: f64,
    pub big_c: f64,
}

pub fn foa_coefficients(ctx: &FoaContext) -> FoaCoefficients {
    let inner = |x: &Matrix, y: &Matrix| frob_inner(x, y).expect("context matrices share a shape");
    #[allow(unused_mut)]
    let mut b = inner(&ctx.s_perp, &ctx.d_perp);
    #[cfg(feature = "fault-injection")]
    {
        b = -b;
    }
    FoaCoefficients {
        a: frob_norm_sq(&ctx.s_perp),
        b,
        c: frob_norm_sq(&ctx.d_perp),
        big_a: frob_norm_sq(&ctx.s),
        big_b: inner(&ctx.s, &ctx.d),
        big_c: frob_norm_sq(&ctx.d),
    }
}

impl FoaCoefficients {
    pub fn tail_energy(&self, beta: f64) -> f64 {
        self.a + 2.0 * self.b * beta + self.c * beta * beta
    }

    pub fn total_energy(&self, beta: f64) -> f64 {
        self.big_a + 2.0 * self.big_b * beta + self.big_c * beta * beta
    }

    /// `ρ̃(β)²`; infinite where the total energy vanishes.
    pub fn ratio_sq(&self, beta: f64) -> f64 {
        let den = self.total_energy(beta);
        if den > 0.0 {
            self.tail_energy(beta).max(0.0) / den
        } else {
            f64::INFINITY
        }
    }

    /// `ρ̃(β) = ‖S⊥ + βD⊥‖ / ‖S + βD‖`.
    pub fn foa_ratio(&self, beta: f64) -> f64 {
        self.ratio_sq(beta).sqrt()
    }

    /// Both `S` and `D` vanish, so the ratio carries no information.
    pub fn is_degenerate(&self) -> bool {
        self.big_a == 0.0 && self.big_c == 0.0
    }
}

/// Real roots of `(cB − bC)β² + (cA − aC)β + (bA − aB) = 0`.
pub fn stationary_roots(coef: &FoaCoefficients) -> Vec<f64> {
    let FoaCoefficients {
        a,
        b,
        c,
        big_a,
        big_b,
        big_c,
    } = *coef;
    let q2 = c * big_b - b * big_c;
    let q1 = c * big_a - a * big_c;
    let q0 = b * big_a - a * big_b;
    if q2 == 0.0 {
        if q1 == 0.0 {
            return Vec::new();
        }
        return vec![-q0 / q1];
    }
    let disc = q1 * q1 - 4.0 * q2 * q0;
    if disc < 0.0 {
        return Vec::new();
    }
    if disc == 0.0 {
        return vec![-q1 / (2.0 * q2)];
    }
    // Cancellation-free pair of roots.
    let sign = if q1 >= 0.0 { 1.0 } else { -1.0 };
    let q = -0.5 * (q1 + sign * disc.sqrt());
    let mut roots = vec![q / q2, q0 / q];
    roots.sort_by(|x, y| y.partial_cmp(x).unwrap_or(std::cmp::Ordering::Equal));
    roots
}

#[derive(Debug, Clone, PartialEq)]
pub struct BetaSelection {
    pub beta_star: f64,
    pub alpha_star: f64,
    /// `(β, score)` for every candidate, `β` after the guardrail transform.
    pub candidates: Vec<(f64, f64)>,
    pub objective: Objective,
    /// Zero `S` and `D`: `β*` falls back to the lower bound.
    pub degenerate: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FoaDiagnostics {
    /// `δ = σ_r(S) − σ_{r+1}(S)`
    pub gap: f64,
    /// `τ = β*·‖D‖₂ / δ`
    pub tau: f64,
}

fn ties(x: f64, y: f64) -> bool {
    x == y || (x - y).abs() <= SCORE_TIE_TOL * x.abs().max(y.abs())
}

/// Candidate generation, guardrails and scoring on precomputed coefficients.
pub fn select_beta(coef: &FoaCoefficients, guard: &Guardrails) -> BetaSelection {
    let lower = guard.apply(guard.beta_min);
    if coef.is_degenerate() {
        return BetaSelection {
            beta_star: lower,
            alpha_star: beta_to_alpha(lower),
            candidates: vec![(lower, 0.0)],
            objective: guard.objective,
            degenerate: true,
        };
    }
    let raw: Vec<f64> = match guard.objective {
        Objective::Ratio => {
            let mut c = stationary_roots(coef);
            c.push(guard.beta_min);
            c.push(guard.beta_max);
            c
        }
        Objective::Energy => {
            let minimizer = if coef.c > 0.0 {
                (-coef.b / coef.c).max(guard.beta_min).min(guard.beta_max)
            } else {
                guard.beta_min
            };
            vec![minimizer]
        }
    };
    let candidates: Vec<(f64, f64)> = raw
        .into_iter()
        .filter(|b| b.is_finite())
        .map(|b| {
            let beta = guard.apply(b);
            let score = match guard.objective {
                Objective::Ratio => coef.ratio_sq(beta),
                Objective::Energy => coef.tail_energy(beta),
            };
            (beta, score)
        })
        .collect();

    let mut best = candidates[0];
    for &(beta, score) in &candidates[1..] {
        if ties(score, best.1) {
            if beta < best.0 {
                best = (beta, score);
            }
        } else if score < best.1 {
            best = (beta, score);
        }
    }
    BetaSelection {
        beta_star: best.0,
        alpha_star: beta_to_alpha(best.0),
        candidates,
        objective: guard.objective,
        degenerate: false,
    }
}

pub fn diagnostics(ctx: &FoaContext, beta_star: f64) -> FoaDiagnostics {
    let gap = ctx.gap();
    let push = beta_star * spectral_norm(&ctx.d);
    let tau = if push == 0.0 {
        0.0
    } else if gap == 0.0 {
        f64::INFINITY
    } else {
        push / gap
    };
    FoaDiagnostics { gap, tau }
}

/// Full selection for one layer: whitening, frozen subspace, closed-form
/// candidates and guardrails.
pub fn aces_select_beta(
    w: &Matrix,
    stats: &LayerStats,
    r: usize,
    ridge_rel: f64,
    guard: &Guardrails,
) -> Result<(BetaSelection, FoaDiagnostics)> {
    guard.validate()?;
    let ctx = foa_context(w, stats, r, ridge_rel)?;
    let coef = foa_coefficients(&ctx);
    let selection = select_beta(&coef, guard);
    let diag = diagnostics(&ctx, selection.beta_star);
    Ok((selection, diag))
}

/// Retained energy ratio `Σ_{i≤r} σᵢ² / Σᵢ σᵢ²` from a full SVD. A zero
/// matrix retains everything.
pub fn exact_rer(g: &Matrix, r: usize) -> Result<f64> {
    let k = g.nrows().min(g.ncols());
    if r == 0 || r > k {
        return Err(Error::RankOutOfRange { rank: r, max: k });
    }
    let sv = singular_values(g);
    let total: f64 = sv.iter().map(|s| s * s).sum();
    if total == 0.0 {
        return Ok(1.0);
    }
    let kept: f64 = sv[..r].iter().map(|s| s * s).sum();
    Ok((kept / total).min(1.0))
}

/// True tail ratio `ρ(β) = √(Σ_{i>r} σᵢ²) / ‖G‖_F` from a full SVD.
pub fn exact_tail_ratio(g: &Matrix, r: usize) -> Result<f64> {
    let k = g.nrows().min(g.ncols());
    if r == 0 || r > k {
        return Err(Error::RankOutOfRange { rank: r, max: k });
    }
    let sv = singular_values(g);
    let total: f64 = sv.iter().map(|s| s * s).sum();
    if total == 0.0 {
        return Ok(0.0);
    }
    let tail: f64 = sv[r..].iter().map(|s| s * s).sum();
    Ok((tail / total).sqrt())
}
