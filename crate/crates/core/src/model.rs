//! Shared model interface, architecture tags and the `GZWT` weights format.
//!
//! ```text
//! magic "GZWT" | u32 version=1 | u8 arch (1=lstm, 2=transformer) | u8 n_classes | u32 param_count
//! per tensor, in the model's parameter order:
//!     u32 name_len | name bytes | u32 rows | u32 cols | rows*cols f64 (row-major, LE)
//! ```

use std::fmt;
use std::str::FromStr;

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lstm::LstmGazeModel;
use crate::nn::{Matrix, Mode, Param};
use crate::preprocess::WINDOW_LEN;
use crate::transformer::TransformerGazeModel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arch {
    Lstm,
    Transformer,
}

impl Arch {
    pub fn code(self) -> u8 {
        match self {
            Arch::Lstm => 1,
            Arch::Transformer => 2,
        }
    }

    pub fn from_code(code: u8) -> Result<Arch> {
        match code {
            1 => Ok(Arch::Lstm),
            2 => Ok(Arch::Transformer),
            other => Err(Error::format(format!("unknown architecture code {other}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Arch::Lstm => "lstm",
            Arch::Transformer => "transformer",
        }
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Arch> {
        match s {
            "lstm" => Ok(Arch::Lstm),
            "transformer" => Ok(Arch::Transformer),
            other => Err(Error::invalid(format!("unknown architecture `{other}`"))),
        }
    }
}

/// A mini-batch of windows with per-class target counts.
///
/// A row of `counts` is a one-hot vector for a single sample, or the class
/// histogram of several samples that share the same window.
#[derive(Debug, Clone)]
pub struct Batch {
    /// `size x (30 * 24)` window values, sample-major.
    pub inputs: Vec<f64>,
    /// `size x n_classes`.
    pub counts: Vec<f64>,
    pub size: usize,
}

impl Batch {
    pub fn new(inputs: Vec<f64>, counts: Vec<f64>, size: usize) -> Result<Batch> {
        if inputs.len() != size * WINDOW_LEN || size == 0 || counts.len() % size != 0 {
            return Err(Error::shape(format!("batch of {size} with {} inputs / {} counts", inputs.len(), counts.len())));
        }
        Ok(Batch { inputs, counts, size })
    }

    /// One sample per window with a hard target.
    pub fn from_windows(windows: &[&[u8]], targets: &[usize], n_classes: usize) -> Result<Batch> {
        let mut inputs = Vec::with_capacity(windows.len() * WINDOW_LEN);
        for w in windows {
            if w.len() != WINDOW_LEN {
                return Err(Error::shape(format!("window of {} values", w.len())));
            }
            inputs.extend(w.iter().map(|&b| b as f64));
        }
        let mut counts = vec![0.0; windows.len() * n_classes];
        for (i, &t) in targets.iter().enumerate() {
            if t >= n_classes {
                return Err(Error::invalid(format!("target {t} out of range")));
            }
            counts[i * n_classes + t] = 1.0;
        }
        Batch::new(inputs, counts, windows.len())
    }

    pub fn n_classes(&self) -> usize {
        self.counts.len() / self.size
    }

    pub fn total_count(&self) -> f64 {
        self.counts.iter().sum()
    }
}

pub fn window_to_f64(window: &[u8]) -> Vec<f64> {
    window.iter().map(|&b| b as f64).collect()
}

/// Common surface of both classifiers.
pub trait GazeModel: Send + Sync {
    fn arch(&self) -> Arch;
    fn n_classes(&self) -> usize;
    fn params(&self) -> &[Param];
    fn params_mut(&mut self) -> &mut [Param];

    /// Eval-mode class probabilities, `n x n_classes` for `n` windows.
    fn predict(&self, inputs: &[f64]) -> Result<Matrix>;

    /// Mean loss over the batch (plus regularization) with gradients accumulated
    /// into the parameters.
    fn loss_and_grad(&mut self, batch: &Batch, mode: Mode, rng: &mut dyn RngCore) -> Result<f64>;

    fn param_count(&self) -> usize {
        self.params().iter().map(Param::len).sum()
    }

    fn predict_window(&self, window: &[u8]) -> Result<Vec<f64>> {
        Ok(self.predict(&window_to_f64(window))?.into_vec())
    }
}

/// Either architecture behind one type.
#[derive(Debug, Clone)]
pub enum AnyModel {
    Lstm(LstmGazeModel),
    Transformer(TransformerGazeModel),
}

impl AnyModel {
    pub fn new(arch: Arch, n_classes: usize, seed: u64) -> Result<AnyModel> {
        Ok(match arch {
            Arch::Lstm => AnyModel::Lstm(LstmGazeModel::new(n_classes, seed)?),
            Arch::Transformer => AnyModel::Transformer(TransformerGazeModel::new(n_classes, seed)?),
        })
    }

    fn inner(&self) -> &dyn GazeModel {
        match self {
            AnyModel::Lstm(m) => m,
            AnyModel::Transformer(m) => m,
        }
    }

    fn inner_mut(&mut self) -> &mut dyn GazeModel {
        match self {
            AnyModel::Lstm(m) => m,
            AnyModel::Transformer(m) => m,
        }
    }
}

impl GazeModel for AnyModel {
    fn arch(&self) -> Arch {
        self.inner().arch()
    }

    fn n_classes(&self) -> usize {
        self.inner().n_classes()
    }

    fn params(&self) -> &[Param] {
        self.inner().params()
    }

    fn params_mut(&mut self) -> &mut [Param] {
        self.inner_mut().params_mut()
    }

    fn predict(&self, inputs: &[f64]) -> Result<Matrix> {
        self.inner().predict(inputs)
    }

    fn loss_and_grad(&mut self, batch: &Batch, mode: Mode, rng: &mut dyn RngCore) -> Result<f64> {
        self.inner_mut().loss_and_grad(batch, mode, rng)
    }
}

pub const GZWT_MAGIC: &[u8; 4] = b"GZWT";
pub const GZWT_VERSION: u32 = 1;

pub fn write_weights(model: &dyn GazeModel) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(GZWT_MAGIC);
    out.extend_from_slice(&GZWT_VERSION.to_le_bytes());
    out.push(model.arch().code());
    out.push(model.n_classes() as u8);
    out.extend_from_slice(&(model.param_count() as u32).to_le_bytes());
    for p in model.params() {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.extend_from_slice(&(p.value.rows() as u32).to_le_bytes());
        out.extend_from_slice(&(p.value.cols() as u32).to_le_bytes());
        for v in p.value.as_slice() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| Error::format("truncated weights file"))?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
}

/// Loads a `GZWT` file into a freshly built model of the recorded architecture.
/// Tensor names and shapes must match that architecture exactly.
pub fn read_weights(bytes: &[u8]) -> Result<AnyModel> {
    let mut r = Reader { bytes, at: 0 };
    if r.take(4)? != GZWT_MAGIC {
        return Err(Error::format("not a GZWT file"));
    }
    let version = r.u32()?;
    if version != GZWT_VERSION {
        return Err(Error::format(format!("unsupported GZWT version {version}")));
    }
    let arch = Arch::from_code(r.u8()?)?;
    let n_classes = r.u8()? as usize;
    let count = r.u32()? as usize;
    let mut model = AnyModel::new(arch, n_classes, 0)?;
    if count != model.param_count() {
        return Err(Error::format(format!("param_count {count} does not match {arch} with {n_classes} classes")));
    }
    for p in model.params_mut() {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?).map_err(|_| Error::format("tensor name is not UTF-8"))?;
        if name != p.name {
            return Err(Error::format(format!("expected tensor `{}`, found `{name}`", p.name)));
        }
        let (rows, cols) = (r.u32()? as usize, r.u32()? as usize);
        if (rows, cols) != (p.value.rows(), p.value.cols()) {
            return Err(Error::format(format!("tensor `{name}` has shape {rows}x{cols}")));
        }
        let raw = r.take(rows * cols * 8)?;
        let values: Vec<f64> = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::format(format!("tensor `{name}` holds non-finite values")));
        }
        *p = Param::new(name, Matrix::from_vec(rows, cols, values));
    }
    if r.at != bytes.len() {
        return Err(Error::format("trailing bytes after last tensor"));
    }
    Ok(model)
}

/// Row-wise softmax of `logits` in place plus the count-weighted cross-entropy.
///
/// Returns the loss averaged over the total count and `d loss / d logits`, which
/// per row is `(row_total * p - counts) / total`.
pub(crate) fn softmax_soft_ce(logits: &mut Matrix, counts: &[f64]) -> Result<(f64, Matrix)> {
    let n = logits.cols();
    if counts.len() != logits.len() {
        return Err(Error::shape(format!("{} counts for {} logits", counts.len(), logits.len())));
    }
    let total: f64 = counts.iter().sum();
    if total <= 0.0 {
        return Err(Error::invalid("batch has no target mass"));
    }
    let mut loss = 0.0;
    let mut dlogits = Matrix::zeros(logits.rows(), n);
    for r in 0..logits.rows() {
        let p = crate::nn::stable_softmax(logits.row(r))?;
        let c = &counts[r * n..(r + 1) * n];
        let row_total: f64 = c.iter().sum();
        for k in 0..n {
            if c[k] > 0.0 {
                loss -= c[k] * p[k].max(crate::nn::LOSS_FLOOR).ln();
            }
            dlogits.set(r, k, (row_total * p[k] - c[k]) / total);
        }
        logits.row_mut(r).copy_from_slice(&p);
    }
    Ok((loss / total, dlogits))
}

pub(crate) fn check_inputs(inputs: &[f64]) -> Result<usize> {
    if inputs.is_empty() || inputs.len() % WINDOW_LEN != 0 {
        return Err(Error::shape(format!("{} input values is not a whole number of 30x24 windows", inputs.len())));
    }
    if inputs.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("model input".into()));
    }
    Ok(inputs.len() / WINDOW_LEN)
}
