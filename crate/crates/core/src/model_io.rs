//! Layer-stack models, calibration sets, their binary formats and the
//! forward pass.
//!
//! Model file (all integers and floats little-endian):
//!
//! ```text
//! "SAES"  u32 version=1  u32 layer_count
//! per layer:
//!   u32 d_out  u32 d_in  u8 activation  u8 storage (0 dense, 1 factored)
//!   dense:    d_out·d_in f64, row-major
//!   factored: u32 rank  f64 beta_used  f64 alpha_used
//!             A: d_out·rank f64 row-major, then B: rank·d_in f64 row-major
//! ```
//!
//! Calibration file:
//!
//! ```text
//! "SAEC"  u32 version=1  u32 d_in  u64 n_tokens
//! d_in·n_tokens f64, token-contiguous (column-major)
//! ```

use std::io::Write;
use std::path::Path;

use thiserror::Error;

use crate::cealc::LayerFactors;
use crate::error::{Error, Result};
use crate::linalg::Matrix;

pub const MODEL_MAGIC: [u8; 4] = *b"SAES";
pub const CALIB_MAGIC: [u8; 4] = *b"SAEC";
pub const FORMAT_VERSION: u32 = 1;

const FACTOR_META_TOL: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FormatError {
    #[error("bad magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),
    #[error("file truncated: needed {needed} more bytes at offset {offset}")]
    TruncatedFile { offset: usize, needed: usize },
    #[error("{0} trailing bytes after payload")]
    TrailingBytes(usize),
    #[error("invalid activation code {0}")]
    InvalidActivationCode(u8),
    #[error("invalid storage code {0}")]
    InvalidStorageCode(u8),
    #[error("layer {layer}: input width {d_in} does not match previous output {prev_out}")]
    ChainMismatch { layer: usize, d_in: usize, prev_out: usize },
    #[error("zero-sized dimension in layer {0}")]
    ZeroDimension(usize),
    #[error("model has no layers")]
    EmptyModel,
    #[error("calibration set has no tokens or zero width")]
    EmptyCalibration,
    #[error("layer {layer}: rank {rank} outside 1..={max}")]
    InvalidRank { layer: usize, rank: usize, max: usize },
    #[error("layer {layer}: inconsistent factor metadata beta={beta} alpha={alpha}")]
    InvalidFactorMetadata { layer: usize, beta: f64, alpha: f64 },
    #[error("non-finite value at byte offset {0}")]
    NonFiniteValue(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Identity = 0,
    Relu = 1,
    Tanh = 2,
}

impl Activation {
    pub fn from_code(code: u8) -> std::result::Result<Self, FormatError> {
        match code {
            0 => Ok(Activation::Identity),
            1 => Ok(Activation::Relu),
            2 => Ok(Activation::Tanh),
            other => Err(FormatError::InvalidActivationCode(other)),
        }
    }

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn apply_mut(self, m: &mut Matrix) {
        match self {
            Activation::Identity => {}
            Activation::Relu => m.apply(|v| *v = v.max(0.0)),
            Activation::Tanh => m.apply(|v| *v = v.tanh()),
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "identity" => Ok(Activation::Identity),
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            other => Err(format!("unknown activation `{other}` (expected identity|relu|tanh)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerWeights {
    Dense(Matrix),
    Factored(LayerFactors),
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerDef {
    pub activation: Activation,
    pub weights: LayerWeights,
}

impl LayerDef {
    pub fn d_out(&self) -> usize {
        match &self.weights {
            LayerWeights::Dense(w) => w.nrows(),
            LayerWeights::Factored(f) => f.a.nrows(),
        }
    }

    pub fn d_in(&self) -> usize {
        match &self.weights {
            LayerWeights::Dense(w) => w.ncols(),
            LayerWeights::Factored(f) => f.b.ncols(),
        }
    }

    pub fn param_count(&self) -> usize {
        match &self.weights {
            LayerWeights::Dense(w) => w.len(),
            LayerWeights::Factored(f) => f.param_count(),
        }
    }

    /// `act(W̃·x)`, with factored layers evaluated as `A·(B·x)`.
    pub fn apply(&self, x: &Matrix) -> Matrix {
        let mut y = match &self.weights {
            LayerWeights::Dense(w) => w * x,
            LayerWeights::Factored(f) => &f.a * (&f.b * x),
        };
        self.activation.apply_mut(&mut y);
        y
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub layers: Vec<LayerDef>,
}

impl ModelSpec {
    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, LayerDef::d_in)
    }

    /// Every layer dense.
    pub fn is_fp(&self) -> bool {
        self.layers
            .iter()
            .all(|l| matches!(l.weights, LayerWeights::Dense(_)))
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(LayerDef::param_count).sum()
    }

    pub fn validate(&self) -> std::result::Result<(), FormatError> {
        if self.layers.is_empty() {
            return Err(FormatError::EmptyModel);
        }
        for (i, pair) in self.layers.windows(2).enumerate() {
            if pair[1].d_in() != pair[0].d_out() {
                return Err(FormatError::ChainMismatch {
                    layer: i + 1,
                    d_in: pair[1].d_in(),
                    prev_out: pair[0].d_out(),
                });
            }
        }
        Ok(())
    }
}

/// Per-boundary activations `[X₁ = x, X₂, …, X_L, output]`.
pub fn forward(model: &ModelSpec, x: &Matrix) -> Result<Vec<Matrix>> {
    if x.nrows() != model.input_dim() {
        return Err(Error::DimensionMismatch {
            expected: model.input_dim(),
            actual: x.nrows(),
        });
    }
    let mut out = Vec::with_capacity(model.layers.len() + 1);
    out.push(x.clone());
    for layer in &model.layers {
        let next = layer.apply(out.last().expect("non-empty"));
        out.push(next);
    }
    Ok(out)
}

/// Calibration tokens as the columns of a `d_in × N` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationSet {
    pub data: Matrix,
}

impl CalibrationSet {
    pub fn d_in(&self) -> usize {
        self.data.nrows()
    }

    pub fn n_tokens(&self) -> usize {
        self.data.ncols()
    }

    /// Tokens `[start, end)`.
    pub fn slice(&self, start: usize, end: usize) -> CalibrationSet {
        CalibrationSet {
            data: self.data.columns(start, end - start).into_owned(),
        }
    }

    /// Leading `1 − eval_fraction` tokens for calibration, the rest for
    /// evaluation. Both parts keep at least one token when `N ≥ 2`.
    pub fn split_holdout(&self, eval_fraction: f64) -> (CalibrationSet, CalibrationSet) {
        let n = self.n_tokens();
        let mut n_eval = ((n as f64) * eval_fraction).round() as usize;
        n_eval = n_eval.clamp(1, n.saturating_sub(1).max(1));
        let n_calib = n - n_eval;
        if n_calib == 0 {
            return (self.clone(), self.clone());
        }
        (self.slice(0, n_calib), self.slice(n_calib, n))
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], FormatError> {
        let remaining = self.bytes.len() - self.pos;
        if n > remaining {
            return Err(FormatError::TruncatedFile {
                offset: self.pos,
                needed: n - remaining,
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self) -> std::result::Result<u8, FormatError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> std::result::Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> std::result::Result<u64, FormatError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> std::result::Result<f64, FormatError> {
        let offset = self.pos;
        let v = f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes"));
        if !v.is_finite() {
            return Err(FormatError::NonFiniteValue(offset));
        }
        Ok(v)
    }

    fn magic(&mut self, expected: [u8; 4]) -> std::result::Result<(), FormatError> {
        let got: [u8; 4] = self.take(4)?.try_into().expect("4 bytes");
        if got != expected {
            return Err(FormatError::BadMagic(got));
        }
        let version = self.u32()?;
        if version != FORMAT_VERSION {
            return Err(FormatError::UnsupportedVersion(version));
        }
        Ok(())
    }

    /// Fails before allocating when fewer than `count` floats remain.
    fn reserve_f64(&self, count: Option<usize>) -> std::result::Result<usize, FormatError> {
        let remaining = self.bytes.len() - self.pos;
        match count.and_then(|c| c.checked_mul(8)) {
            Some(bytes) if bytes <= remaining => Ok(count.expect("checked")),
            Some(bytes) => Err(FormatError::TruncatedFile {
                offset: self.pos,
                needed: bytes - remaining,
            }),
            None => Err(FormatError::TruncatedFile {
                offset: self.pos,
                needed: usize::MAX,
            }),
        }
    }

    fn row_major(&mut self, rows: usize, cols: usize) -> std::result::Result<Matrix, FormatError> {
        self.reserve_f64(rows.checked_mul(cols))?;
        let mut m = Matrix::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                m[(i, j)] = self.f64()?;
            }
        }
        Ok(m)
    }

    fn finish(self) -> std::result::Result<(), FormatError> {
        let trailing = self.bytes.len() - self.pos;
        if trailing != 0 {
            return Err(FormatError::TrailingBytes(trailing));
        }
        Ok(())
    }
}

fn put_row_major(out: &mut Vec<u8>, m: &Matrix) {
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            out.extend_from_slice(&m[(i, j)].to_le_bytes());
        }
    }
}

pub fn read_model(bytes: &[u8]) -> std::result::Result<ModelSpec, FormatError> {
    let mut r = Reader::new(bytes);
    r.magic(MODEL_MAGIC)?;
    let layer_count = r.u32()? as usize;
    if layer_count == 0 {
        return Err(FormatError::EmptyModel);
    }
    let mut layers = Vec::new();
    for index in 0..layer_count {
        let d_out = r.u32()? as usize;
        let d_in = r.u32()? as usize;
        if d_out == 0 || d_in == 0 {
            return Err(FormatError::ZeroDimension(index));
        }
        let activation = Activation::from_code(r.u8()?)?;
        let weights = match r.u8()? {
            0 => LayerWeights::Dense(r.row_major(d_out, d_in)?),
            1 => {
                let rank = r.u32()? as usize;
                let max = d_out.min(d_in);
                if rank == 0 || rank > max {
                    return Err(FormatError::InvalidRank {
                        layer: index,
                        rank,
                        max,
                    });
                }
                let beta = r.f64()?;
                let alpha = r.f64()?;
                let consistent = (0.0..1.0).contains(&beta)
                    && alpha >= 0.0
                    && (beta - alpha / (1.0 + alpha)).abs() <= FACTOR_META_TOL;
                if !consistent {
                    return Err(FormatError::InvalidFactorMetadata {
                        layer: index,
                        beta,
                        alpha,
                    });
                }
                let a = r.row_major(d_out, rank)?;
                let b = r.row_major(rank, d_in)?;
                LayerWeights::Factored(LayerFactors {
                    a,
                    b,
                    rank,
                    beta_used: beta,
                    alpha_used: alpha,
                })
            }
            other => return Err(FormatError::InvalidStorageCode(other)),
        };
        if let Some(prev) = layers.last().map(LayerDef::d_out) {
            if prev != d_in {
                return Err(FormatError::ChainMismatch {
                    layer: index,
                    d_in,
                    prev_out: prev,
                });
            }
        }
        layers.push(LayerDef { activation, weights });
    }
    r.finish()?;
    Ok(ModelSpec { layers })
}

pub fn write_model(model: &ModelSpec) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 8 * model.param_count() + 40 * model.layers.len());
    out.extend_from_slice(&MODEL_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(model.layers.len() as u32).to_le_bytes());
    for layer in &model.layers {
        out.extend_from_slice(&(layer.d_out() as u32).to_le_bytes());
        out.extend_from_slice(&(layer.d_in() as u32).to_le_bytes());
        out.push(layer.activation.code());
        match &layer.weights {
            LayerWeights::Dense(w) => {
                out.push(0);
                put_row_major(&mut out, w);
            }
            LayerWeights::Factored(f) => {
                out.push(1);
                out.extend_from_slice(&(f.rank as u32).to_le_bytes());
                out.extend_from_slice(&f.beta_used.to_le_bytes());
                out.extend_from_slice(&f.alpha_used.to_le_bytes());
                put_row_major(&mut out, &f.a);
                put_row_major(&mut out, &f.b);
            }
        }
    }
    out
}

pub fn read_calib(bytes: &[u8]) -> std::result::Result<CalibrationSet, FormatError> {
    let mut r = Reader::new(bytes);
    r.magic(CALIB_MAGIC)?;
    let d_in = r.u32()? as usize;
    let n_tokens = usize::try_from(r.u64()?).map_err(|_| FormatError::TruncatedFile {
        offset: 12,
        needed: usize::MAX,
    })?;
    if d_in == 0 || n_tokens == 0 {
        return Err(FormatError::EmptyCalibration);
    }
    r.reserve_f64(d_in.checked_mul(n_tokens))?;
    let mut data = Matrix::zeros(d_in, n_tokens);
    for t in 0..n_tokens {
        for i in 0..d_in {
            data[(i, t)] = r.f64()?;
        }
    }
    r.finish()?;
    Ok(CalibrationSet { data })
}

pub fn write_calib(calib: &CalibrationSet) -> Vec<u8> {
    let mut out = Vec::with_capacity(20 + 8 * calib.data.len());
    out.extend_from_slice(&CALIB_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(calib.d_in() as u32).to_le_bytes());
    out.extend_from_slice(&(calib.n_tokens() as u64).to_le_bytes());
    // Column-major storage is already token-contiguous.
    for v in calib.data.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Writes through a sibling temp file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.flush()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<ModelSpec> {
    Ok(read_model(&std::fs::read(path)?)?)
}

pub fn save_model(path: &Path, model: &ModelSpec) -> Result<()> {
    write_atomic(path, &write_model(model))
}

pub fn load_calib(path: &Path) -> Result<CalibrationSet> {
    Ok(read_calib(&std::fs::read(path)?)?)
}

pub fn save_calib(path: &Path, calib: &CalibrationSet) -> Result<()> {
    write_atomic(path, &write_calib(calib))
}
