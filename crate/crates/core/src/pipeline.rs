//! Sequential layer-by-layer compression.
//!
//! Layers are compressed in order. Before layer `ℓ` is touched, every
//! upstream layer has already been replaced by its factors, so the
//! compressed-path inputs `X_ℓ` carry the accumulated upstream error while
//! `X_ℓ^f` comes from the dense prefix. The frontier holds, per calibration
//! batch, just the two activation blocks at the current layer boundary and is
//! advanced by one layer after each replacement.

use std::fmt::Write as _;

use crate::aces::{diagnostics, exact_rer, foa_coefficients, foa_context_with, select_beta, Guardrails, Objective};
use crate::cealc::{alpha_to_beta, beta_to_alpha, compress_with_context, rank_from_ratio, WhitenedContext, DEFAULT_RIDGE_REL};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::model_io::{CalibrationSet, LayerDef, LayerWeights, ModelSpec};
use crate::stats::{ActivationBatch, LayerStats};

pub const REPORT_HEADER: &str =
    "layer,d_out,d_in,rank,beta_star,alpha_star,rer,foa_tail_ratio,cos_sim,frob_rel_err,gap,tau";
pub const SWEEP_HEADER: &str = "beta,exact_rer,foa_tail_ratio";

#[derive(Debug, Clone, PartialEq)]
pub enum RankPolicy {
    /// Uniform compression ratio, see [`rank_from_ratio`].
    Ratio(f64),
    /// One rank per layer.
    Explicit(Vec<usize>),
}

/// Interval for the alignment weight, given on `α` or directly on `β`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CoefficientBounds {
    Alpha { min: f64, max: f64 },
    Beta { min: f64, max: f64 },
}

impl CoefficientBounds {
    pub fn beta_range(&self) -> (f64, f64) {
        match *self {
            CoefficientBounds::Alpha { min, max } => (alpha_to_beta(min), alpha_to_beta(max)),
            CoefficientBounds::Beta { min, max } => (min, max),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompressionConfig {
    pub ranks: RankPolicy,
    pub ridge_rel: f64,
    pub bounds: CoefficientBounds,
    pub beta_cap: f64,
    pub shrink: f64,
    pub objective: Objective,
    /// Skip adaptive selection: every layer uses `β = α/(1+α)` passed through
    /// the guardrails.
    pub fixed_alpha: Option<f64>,
    pub batch_tokens: usize,
}

impl Default for CompressionConfig {
    fn default() -> Self {
        Self {
            ranks: RankPolicy::Ratio(0.2),
            ridge_rel: DEFAULT_RIDGE_REL,
            bounds: CoefficientBounds::Alpha { min: 0.25, max: 0.75 },
            beta_cap: 0.95,
            shrink: 1.0,
            objective: Objective::Ratio,
            fixed_alpha: None,
            batch_tokens: 512,
        }
    }
}

fn invalid(msg: impl Into<String>) -> Error {
    Error::ConfigInvalid(msg.into())
}

impl CompressionConfig {
    pub fn guardrails(&self) -> Guardrails {
        let (beta_min, beta_max) = self.bounds.beta_range();
        Guardrails {
            beta_min,
            beta_max,
            beta_cap: self.beta_cap,
            shrink: self.shrink,
            objective: self.objective,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match &self.ranks {
            RankPolicy::Ratio(r) if !(0.0..1.0).contains(r) => {
                return Err(invalid(format!("ratio must lie in [0, 1), got {r}")))
            }
            RankPolicy::Explicit(v) if v.is_empty() => return Err(invalid("empty rank list")),
            _ => {}
        }
        if !(self.ridge_rel >= 0.0 && self.ridge_rel.is_finite()) {
            return Err(invalid(format!("ridge must be nonnegative, got {}", self.ridge_rel)));
        }
        if let CoefficientBounds::Alpha { min, max } = self.bounds {
            if !(min >= 0.0 && min <= max) {
                return Err(invalid(format!("need 0 <= alpha_min <= alpha_max, got [{min}, {max}]")));
            }
        }
        if self.batch_tokens == 0 {
            return Err(invalid("batch_tokens must be positive"));
        }
        match self.fixed_alpha {
            Some(a) if !(a >= 0.0 && a.is_finite()) => {
                return Err(invalid(format!("fixed alpha must be finite and nonnegative, got {a}")))
            }
            _ => {}
        }
        let guard = self.guardrails();
        guard.validate()?;
        if guard.apply(guard.beta_max) >= 1.0 {
            return Err(invalid("guardrails admit beta = 1 (infinite alpha)"));
        }
        Ok(())
    }

    pub fn ranks_for(&self, model: &ModelSpec) -> Result<Vec<usize>> {
        let ranks: Vec<usize> = match &self.ranks {
            RankPolicy::Ratio(ratio) => model
                .layers
                .iter()
                .map(|l| rank_from_ratio(l.d_out(), l.d_in(), *ratio))
                .collect(),
            RankPolicy::Explicit(v) => {
                if v.len() != model.layers.len() {
                    return Err(invalid(format!(
                        "{} ranks given for {} layers",
                        v.len(),
                        model.layers.len()
                    )));
                }
                v.clone()
            }
        };
        for (rank, layer) in ranks.iter().zip(&model.layers) {
            let max = layer.d_out().min(layer.d_in());
            if *rank == 0 || *rank > max {
                return Err(Error::RankOutOfRange { rank: *rank, max });
            }
        }
        Ok(ranks)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerReport {
    /// 1-based layer index.
    pub index: usize,
    pub d_out: usize,
    pub d_in: usize,
    pub rank: usize,
    pub beta_star: f64,
    pub alpha_star: f64,
    /// Retained energy ratio of `G(β*)` at the layer rank.
    pub rer: f64,
    pub foa_tail_ratio: f64,
    pub cos_sim: f64,
    pub frob_rel_err: f64,
    pub gap: f64,
    pub tau: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompressionReport {
    pub layers: Vec<LayerReport>,
    pub final_cos_sim: f64,
    pub final_frob_rel_err: f64,
}

/// Fidelity of a compressed model against its dense reference.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalMetrics {
    /// One entry per boundary: layer inputs `1..=L`, then the final output.
    pub cos_sim: Vec<f64>,
    pub frob_rel_err: Vec<f64>,
}

impl EvalMetrics {
    pub fn final_cos_sim(&self) -> f64 {
        *self.cos_sim.last().expect("at least one boundary")
    }

    pub fn final_frob_rel_err(&self) -> f64 {
        *self.frob_rel_err.last().expect("at least one boundary")
    }
}

impl CompressionReport {
    /// Replaces the fidelity columns with metrics from a separate evaluation.
    pub fn apply_eval(&mut self, eval: &EvalMetrics) {
        for row in &mut self.layers {
            row.cos_sim = eval.cos_sim[row.index];
            row.frob_rel_err = eval.frob_rel_err[row.index];
        }
        self.final_cos_sim = eval.final_cos_sim();
        self.final_frob_rel_err = eval.final_frob_rel_err();
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        out.push_str(REPORT_HEADER);
        out.push('\n');
        for r in &self.layers {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{},{}",
                r.index,
                r.d_out,
                r.d_in,
                r.rank,
                fmt_f64(r.beta_star),
                fmt_f64(r.alpha_star),
                fmt_f64(r.rer),
                fmt_f64(r.foa_tail_ratio),
                fmt_f64(r.cos_sim),
                fmt_f64(r.frob_rel_err),
                fmt_f64(r.gap),
                fmt_f64(r.tau),
            );
        }
        out
    }
}

/// 17 significant digits, `.` decimal separator.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// Running `⟨X_c, X_f⟩`, `‖X_c‖²`, `‖X_f‖²`, `‖X_c − X_f‖²` over batches.
#[derive(Debug, Clone, Copy, Default)]
struct Agreement {
    inner: f64,
    norm_c: f64,
    norm_f: f64,
    diff: f64,
}

impl Agreement {
    fn add(&mut self, xc: &Matrix, xf: &Matrix) {
        for (c, f) in xc.iter().zip(xf.iter()) {
            self.inner += c * f;
            self.norm_c += c * c;
            self.norm_f += f * f;
            self.diff += (c - f) * (c - f);
        }
    }

    fn cos_sim(&self) -> f64 {
        if self.norm_c == 0.0 && self.norm_f == 0.0 {
            return 1.0;
        }
        let den = self.norm_c.sqrt() * self.norm_f.sqrt();
        if den == 0.0 {
            0.0
        } else {
            (self.inner / den).clamp(-1.0, 1.0)
        }
    }

    fn frob_rel_err(&self) -> f64 {
        if self.diff == 0.0 {
            0.0
        } else {
            self.diff.sqrt() / self.norm_f.sqrt().max(f64::MIN_POSITIVE)
        }
    }
}

fn dense_weight(layer: &LayerDef, index: usize) -> Result<&Matrix> {
    match &layer.weights {
        LayerWeights::Dense(w) => Ok(w),
        LayerWeights::Factored(_) => Err(invalid(format!("layer {} is already factored", index + 1))),
    }
}

/// Stepwise compression state.
pub struct Session<'a> {
    cfg: &'a CompressionConfig,
    reference: &'a ModelSpec,
    model: ModelSpec,
    ranks: Vec<usize>,
    /// Per batch: (compressed-path, full-precision) inputs of layer `next`.
    frontier: Vec<(Matrix, Matrix)>,
    next: usize,
}

impl<'a> Session<'a> {
    pub fn new(model: &'a ModelSpec, calib: &CalibrationSet, cfg: &'a CompressionConfig) -> Result<Self> {
        cfg.validate()?;
        model.validate()?;
        if !model.is_fp() {
            return Err(invalid("input model must be all-dense"));
        }
        if calib.d_in() != model.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: model.input_dim(),
                actual: calib.d_in(),
            });
        }
        let ranks = cfg.ranks_for(model)?;
        let n = calib.n_tokens();
        let frontier = (0..n)
            .step_by(cfg.batch_tokens)
            .map(|start| {
                let end = (start + cfg.batch_tokens).min(n);
                let x = calib.data.columns(start, end - start).into_owned();
                (x.clone(), x)
            })
            .collect();
        Ok(Self {
            cfg,
            reference: model,
            model: model.clone(),
            ranks,
            frontier,
            next: 0,
        })
    }

    /// 0-based index of the next layer to compress.
    pub fn next_layer(&self) -> usize {
        self.next
    }

    pub fn is_done(&self) -> bool {
        self.next == self.model.layers.len()
    }

    pub fn rank(&self, layer: usize) -> usize {
        self.ranks[layer]
    }

    /// Streams the frontier into fresh statistics for the next layer.
    pub fn collect_stats(&self) -> Result<LayerStats> {
        let d_in = self.model.layers[self.next].d_in();
        let mut stats = LayerStats::new(d_in);
        for (xc, xf) in &self.frontier {
            stats.update(ActivationBatch::new(xc, xf)?)?;
        }
        Ok(stats)
    }

    pub fn next_weight(&self) -> Result<&Matrix> {
        dense_weight(&self.reference.layers[self.next], self.next)
    }

    /// Compresses the next layer, swaps it in and advances the frontier.
    pub fn compress_next(&mut self) -> Result<LayerReport> {
        let index = self.next;
        let stats = self.collect_stats()?;
        let w = self.next_weight()?.clone();
        let w = &w;
        let r = self.ranks[index];

        let ctx = WhitenedContext::new(&stats, self.cfg.ridge_rel)?;
        let foa = foa_context_with(w, &stats, r, &ctx)?;
        let coef = foa_coefficients(&foa);
        let beta = match self.cfg.fixed_alpha {
            Some(alpha) => self.cfg.guardrails().apply(alpha_to_beta(alpha)),
            None => select_beta(&coef, &self.cfg.guardrails()).beta_star,
        };
        let factors = compress_with_context(w, &stats, r, beta, &ctx)?;
        let target = &foa.s + &foa.d * beta;
        let rer = exact_rer(&target, r)?;
        let diag = diagnostics(&foa, beta);

        let dense = self.reference.layers[index].clone();
        let compressed = LayerDef {
            activation: dense.activation,
            weights: LayerWeights::Factored(factors),
        };
        let mut agreement = Agreement::default();
        for (xc, xf) in &mut self.frontier {
            *xc = compressed.apply(xc);
            *xf = dense.apply(xf);
            agreement.add(xc, xf);
        }
        self.model.layers[index] = compressed;
        self.next += 1;

        Ok(LayerReport {
            index: index + 1,
            d_out: w.nrows(),
            d_in: w.ncols(),
            rank: r,
            beta_star: beta,
            alpha_star: beta_to_alpha(beta),
            rer,
            foa_tail_ratio: coef.foa_ratio(beta),
            cos_sim: agreement.cos_sim(),
            frob_rel_err: agreement.frob_rel_err(),
            gap: diag.gap,
            tau: diag.tau,
        })
    }

    pub fn into_model(self) -> ModelSpec {
        self.model
    }
}

/// Compresses every layer of a dense model in order.
///
/// Fidelity columns in the returned report are measured on the calibration
/// tokens; use [`evaluate`] and [`CompressionReport::apply_eval`] for held-out
/// numbers.
pub fn compress_model(
    model: &ModelSpec,
    calib: &CalibrationSet,
    cfg: &CompressionConfig,
) -> Result<(ModelSpec, CompressionReport)> {
    let mut session = Session::new(model, calib, cfg)?;
    let mut rows = Vec::with_capacity(model.layers.len());
    while !session.is_done() {
        rows.push(session.compress_next()?);
    }
    let last = rows.last().expect("validated non-empty model");
    let report = CompressionReport {
        final_cos_sim: last.cos_sim,
        final_frob_rel_err: last.frob_rel_err,
        layers: rows,
    };
    Ok((session.into_model(), report))
}

/// Per-boundary cosine similarity and relative error of `model_c` against
/// `model_fp`, accumulated over token batches.
pub fn evaluate(
    model_fp: &ModelSpec,
    model_c: &ModelSpec,
    eval_set: &CalibrationSet,
    batch_tokens: usize,
) -> Result<EvalMetrics> {
    if model_fp.layers.len() != model_c.layers.len() {
        return Err(Error::DimensionMismatch {
            expected: model_fp.layers.len(),
            actual: model_c.layers.len(),
        });
    }
    for (a, b) in model_fp.layers.iter().zip(&model_c.layers) {
        if a.d_in() != b.d_in() || a.d_out() != b.d_out() {
            return Err(Error::ShapeMismatch {
                left: (a.d_out(), a.d_in()),
                right: (b.d_out(), b.d_in()),
            });
        }
    }
    if eval_set.d_in() != model_fp.input_dim() {
        return Err(Error::DimensionMismatch {
            expected: model_fp.input_dim(),
            actual: eval_set.d_in(),
        });
    }
    let batch = batch_tokens.max(1);
    let mut acc = vec![Agreement::default(); model_fp.layers.len() + 1];
    let n = eval_set.n_tokens();
    for start in (0..n).step_by(batch) {
        let end = (start + batch).min(n);
        let x = eval_set.data.columns(start, end - start).into_owned();
        let mut xc = x.clone();
        let mut xf = x;
        acc[0].add(&xc, &xf);
        for (i, (lf, lc)) in model_fp.layers.iter().zip(&model_c.layers).enumerate() {
            xc = lc.apply(&xc);
            xf = lf.apply(&xf);
            acc[i + 1].add(&xc, &xf);
        }
    }
    Ok(EvalMetrics {
        cos_sim: acc.iter().map(Agreement::cos_sim).collect(),
        frob_rel_err: acc.iter().map(Agreement::frob_rel_err).collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepPoint {
    pub beta: f64,
    pub exact_rer: f64,
    pub foa_tail_ratio: f64,
}

/// Exact retained energy and surrogate tail ratio of `G(β)` on a uniform
/// grid over `[0, 1]`.
pub fn beta_sweep(
    w: &Matrix,
    stats: &LayerStats,
    r: usize,
    grid_points: usize,
    ridge_rel: f64,
) -> Result<Vec<SweepPoint>> {
    if grid_points < 2 {
        return Err(invalid("sweep needs at least two grid points"));
    }
    let ctx = WhitenedContext::new(stats, ridge_rel)?;
    let foa = foa_context_with(w, stats, r, &ctx)?;
    let coef = foa_coefficients(&foa);
    (0..grid_points)
        .map(|i| {
            let beta = i as f64 / (grid_points - 1) as f64;
            let g = &foa.s + &foa.d * beta;
            Ok(SweepPoint {
                beta,
                exact_rer: exact_rer(&g, r)?,
                foa_tail_ratio: coef.foa_ratio(beta),
            })
        })
        .collect()
}

pub fn sweep_to_csv(points: &[SweepPoint], beta_star: f64) -> String {
    let mut out = String::new();
    out.push_str(SWEEP_HEADER);
    out.push('\n');
    for p in points {
        let _ = writeln!(
            out,
            "{},{},{}",
            fmt_f64(p.beta),
            fmt_f64(p.exact_rer),
            fmt_f64(p.foa_tail_ratio)
        );
    }
    let _ = writeln!(out, "beta_star,{}", fmt_f64(beta_star));
    out
}

/// Compresses layers `1..layer` (1-based) and returns the weight, streamed
/// statistics and configured rank of `layer`.
pub fn stats_at_layer(
    model: &ModelSpec,
    calib: &CalibrationSet,
    cfg: &CompressionConfig,
    layer: usize,
) -> Result<(Matrix, LayerStats, usize)> {
    if layer == 0 || layer > model.layers.len() {
        return Err(invalid(format!(
            "layer {layer} out of range 1..={}",
            model.layers.len()
        )));
    }
    let mut session = Session::new(model, calib, cfg)?;
    while session.next_layer() + 1 < layer {
        session.compress_next()?;
    }
    let stats = session.collect_stats()?;
    let w = session.next_weight()?.clone();
    Ok((w, stats, session.rank(layer - 1)))
}
