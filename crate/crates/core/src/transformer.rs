//! Two-block post-norm Transformer encoder classifier.
//!
//! ```text
//! window (30 x 24) + sinusoidal positions
//!   -> 2 x [ LN(X + MHA(X)) -> LN(X + W2 silu(W1 X)) ]   (4 heads of width 6, FFN 1024)
//!   -> max over time (24) -> dense n_classes (softmax)
//! ```
//!
//! Dense weights are stored `in x out`; activations are sample-major
//! (`row = sample * 30 + t`).

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{check_inputs, softmax_soft_ce, Arch, Batch, GazeModel};
use crate::nn::{gemm_slice, glorot_uniform, sigmoid, stable_softmax, Matrix, Mode, Param, RegConfig};
use crate::preprocess::SEQ_LEN;
use crate::scenario::N_FEATURES;

pub const D_MODEL: usize = N_FEATURES;
pub const HEADS: usize = 4;
pub const HEAD_DIM: usize = D_MODEL / HEADS;
pub const FFN_UNITS: usize = 1024;
pub const BLOCKS: usize = 2;
pub const LN_EPS: f64 = 1e-10;

const PER_BLOCK: usize = 16;
// offsets inside a block
const WQ: usize = 0;
const WK: usize = 2;
const WV: usize = 4;
const WO: usize = 6;
const LN1: usize = 8;
const W1: usize = 10;
const W2: usize = 12;
const LN2: usize = 14;
const HEAD_W: usize = BLOCKS * PER_BLOCK;
const HEAD_B: usize = HEAD_W + 1;

pub fn transformer_param_count(n_classes: usize) -> usize {
    let block = 4 * (D_MODEL * D_MODEL + D_MODEL) + 4 * D_MODEL + (D_MODEL * FFN_UNITS + FFN_UNITS) + (FFN_UNITS * D_MODEL + D_MODEL);
    BLOCKS * block + D_MODEL * n_classes + n_classes
}

/// `PE[t][2i] = sin(t / 10000^(2i/d))`, `PE[t][2i+1] = cos(..)`.
pub fn sinusoidal_positions(len: usize, dim: usize) -> Matrix {
    Matrix::from_fn(len, dim, |t, c| {
        let angle = t as f64 / 10000f64.powf((c / 2 * 2) as f64 / dim as f64);
        if c % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

/// Row-wise `(x - mean) / sqrt(var + eps)` without gain or bias.
pub fn layer_norm(x: &Matrix) -> Matrix {
    let mut out = x.clone();
    for r in 0..x.rows() {
        normalize_row(out.row_mut(r));
    }
    out
}

fn normalize_row(row: &mut [f64]) -> f64 {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv = 1.0 / (var + LN_EPS).sqrt();
    row.iter_mut().for_each(|v| *v = (*v - mean) * inv);
    inv
}

/// `y = x * W + b` with `x: rows x din`, `W: din x dout`.
fn affine(x: &[f64], rows: usize, w: &Param, b: Option<&Param>) -> Vec<f64> {
    let (din, dout) = (w.value.rows(), w.value.cols());
    let mut y = vec![0.0; rows * dout];
    gemm_slice(1.0, x, (rows, din), false, w.value.as_slice(), (din, dout), false, 0.0, &mut y);
    if let Some(b) = b {
        for row in y.chunks_exact_mut(dout) {
            row.iter_mut().zip(b.value.as_slice()).for_each(|(v, bb)| *v += bb);
        }
    }
    y
}

/// Backward of [`affine`]: accumulates into `W`/`b` grads and returns `dx` when asked.
fn affine_backward(x: &[f64], dy: &[f64], rows: usize, w: &mut Param, b: Option<&mut Param>, want_dx: bool) -> Option<Vec<f64>> {
    let (din, dout) = (w.value.rows(), w.value.cols());
    gemm_slice(1.0, x, (rows, din), true, dy, (rows, dout), false, 1.0, w.grad.as_mut_slice());
    if let Some(b) = b {
        let gb = b.grad.as_mut_slice();
        for row in dy.chunks_exact(dout) {
            gb.iter_mut().zip(row).for_each(|(a, v)| *a += v);
        }
    }
    want_dx.then(|| {
        let mut dx = vec![0.0; rows * din];
        gemm_slice(1.0, dy, (rows, dout), false, w.value.as_slice(), (din, dout), true, 0.0, &mut dx);
        dx
    })
}

struct MhaCache {
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    /// `batch x heads x T x T` attention probabilities.
    attn: Vec<f64>,
    /// Concatenated head outputs before the output projection.
    concat: Vec<f64>,
    out: Vec<f64>,
}

fn mha(block: &[Param], x: &[f64], batch: usize) -> Result<MhaCache> {
    let rows = batch * SEQ_LEN;
    let q = affine(x, rows, &block[WQ], Some(&block[WQ + 1]));
    // The key bias adds q_i . b_k to every score of query i; softmax cancels it
    // exactly, so it is kept as a tensor but left out of the arithmetic.
    let k = affine(x, rows, &block[WK], None);
    let v = affine(x, rows, &block[WV], Some(&block[WV + 1]));
    let scale = 1.0 / (HEAD_DIM as f64).sqrt();
    let mut attn = vec![0.0; batch * HEADS * SEQ_LEN * SEQ_LEN];
    let mut concat = vec![0.0; rows * D_MODEL];
    let mut scores = [0.0; SEQ_LEN];
    for b in 0..batch {
        for h in 0..HEADS {
            let off = h * HEAD_DIM;
            let a_base = (b * HEADS + h) * SEQ_LEN * SEQ_LEN;
            for i in 0..SEQ_LEN {
                let qi = &q[(b * SEQ_LEN + i) * D_MODEL + off..][..HEAD_DIM];
                for (j, s) in scores.iter_mut().enumerate() {
                    let kj = &k[(b * SEQ_LEN + j) * D_MODEL + off..][..HEAD_DIM];
                    *s = qi.iter().zip(kj).map(|(a, c)| a * c).sum::<f64>() * scale;
                }
                let p = stable_softmax(&scores)?;
                attn[a_base + i * SEQ_LEN..][..SEQ_LEN].copy_from_slice(&p);
                let oi = &mut concat[(b * SEQ_LEN + i) * D_MODEL + off..][..HEAD_DIM];
                for (j, pj) in p.iter().enumerate() {
                    let vj = &v[(b * SEQ_LEN + j) * D_MODEL + off..][..HEAD_DIM];
                    oi.iter_mut().zip(vj).for_each(|(o, vv)| *o += pj * vv);
                }
            }
        }
    }
    let out = affine(&concat, rows, &block[WO], Some(&block[WO + 1]));
    Ok(MhaCache { q, k, v, attn, concat, out })
}

/// Returns `dx` of the attention sublayer for upstream `dout`.
fn mha_backward(block: &mut [Param], x: &[f64], cache: &MhaCache, dout: &[f64], batch: usize) -> Vec<f64> {
    let rows = batch * SEQ_LEN;
    let (wo, rest) = block[WO..].split_at_mut(1);
    let dconcat = affine_backward(&cache.concat, dout, rows, &mut wo[0], Some(&mut rest[0]), true).expect("dx requested");
    let scale = 1.0 / (HEAD_DIM as f64).sqrt();
    let mut dq = vec![0.0; rows * D_MODEL];
    let mut dk = vec![0.0; rows * D_MODEL];
    let mut dv = vec![0.0; rows * D_MODEL];
    let mut da = [0.0; SEQ_LEN];
    for b in 0..batch {
        for h in 0..HEADS {
            let off = h * HEAD_DIM;
            let a_base = (b * HEADS + h) * SEQ_LEN * SEQ_LEN;
            for i in 0..SEQ_LEN {
                let p = &cache.attn[a_base + i * SEQ_LEN..][..SEQ_LEN];
                let doi = &dconcat[(b * SEQ_LEN + i) * D_MODEL + off..][..HEAD_DIM];
                for j in 0..SEQ_LEN {
                    let r = (b * SEQ_LEN + j) * D_MODEL + off;
                    da[j] = doi.iter().zip(&cache.v[r..r + HEAD_DIM]).map(|(a, c)| a * c).sum();
                    dv[r..r + HEAD_DIM].iter_mut().zip(doi).for_each(|(g, d)| *g += p[j] * d);
                }
                let dot: f64 = da.iter().zip(p).map(|(a, c)| a * c).sum();
                let qi_row = (b * SEQ_LEN + i) * D_MODEL + off;
                for j in 0..SEQ_LEN {
                    let ds = p[j] * (da[j] - dot) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    let kj_row = (b * SEQ_LEN + j) * D_MODEL + off;
                    for c in 0..HEAD_DIM {
                        dq[qi_row + c] += ds * cache.k[kj_row + c];
                        dk[kj_row + c] += ds * cache.q[qi_row + c];
                    }
                }
            }
        }
    }
    let mut dx = vec![0.0; rows * D_MODEL];
    for (w, g) in [(WQ, &dq), (WK, &dk), (WV, &dv)] {
        let (wp, rest) = block[w..].split_at_mut(1);
        let bias = if w == WK { None } else { Some(&mut rest[0]) };
        let part = affine_backward(x, g, rows, &mut wp[0], bias, true).expect("dx requested");
        dx.iter_mut().zip(&part).for_each(|(a, v)| *a += v);
    }
    dx
}

struct LnCache {
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    out: Vec<f64>,
}

fn ln_forward(r: &[f64], gain: &Param, bias: &Param) -> LnCache {
    let mut xhat = r.to_vec();
    let inv_std: Vec<f64> = xhat.chunks_exact_mut(D_MODEL).map(normalize_row).collect();
    let mut out = xhat.clone();
    for row in out.chunks_exact_mut(D_MODEL) {
        for ((v, g), b) in row.iter_mut().zip(gain.value.as_slice()).zip(bias.value.as_slice()) {
            *v = *v * g + b;
        }
    }
    LnCache { xhat, inv_std, out }
}

fn ln_backward(cache: &LnCache, dout: &[f64], gain: &mut Param, bias: &mut Param) -> Vec<f64> {
    let mut dr = vec![0.0; dout.len()];
    let n = D_MODEL as f64;
    let mut dxhat = [0.0; D_MODEL];
    for (row, inv) in cache.inv_std.iter().enumerate() {
        let xh = &cache.xhat[row * D_MODEL..][..D_MODEL];
        let dy = &dout[row * D_MODEL..][..D_MODEL];
        for c in 0..D_MODEL {
            gain.grad.as_mut_slice()[c] += dy[c] * xh[c];
            bias.grad.as_mut_slice()[c] += dy[c];
            dxhat[c] = dy[c] * gain.value.as_slice()[c];
        }
        let mean_d = dxhat.iter().sum::<f64>() / n;
        let mean_dx = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / n;
        for c in 0..D_MODEL {
            dr[row * D_MODEL + c] = inv * (dxhat[c] - mean_d - xh[c] * mean_dx);
        }
    }
    dr
}

struct BlockCache {
    x: Vec<f64>,
    mha: MhaCache,
    ln1: LnCache,
    pre: Vec<f64>,
    /// `sigmoid(pre)`, reused by the SiLU derivative.
    gate: Vec<f64>,
    hidden: Vec<f64>,
    ln2: LnCache,
}

fn block_forward(block: &[Param], x: Vec<f64>, batch: usize) -> Result<BlockCache> {
    let rows = batch * SEQ_LEN;
    let mha = mha(block, &x, batch)?;
    let r1: Vec<f64> = x.iter().zip(&mha.out).map(|(a, b)| a + b).collect();
    let ln1 = ln_forward(&r1, &block[LN1], &block[LN1 + 1]);
    let pre = affine(&ln1.out, rows, &block[W1], Some(&block[W1 + 1]));
    let gate: Vec<f64> = pre.iter().map(|&v| sigmoid(v)).collect();
    let hidden: Vec<f64> = pre.iter().zip(&gate).map(|(x, s)| x * s).collect();
    let ffn = affine(&hidden, rows, &block[W2], Some(&block[W2 + 1]));
    let r2: Vec<f64> = ln1.out.iter().zip(&ffn).map(|(a, b)| a + b).collect();
    let ln2 = ln_forward(&r2, &block[LN2], &block[LN2 + 1]);
    Ok(BlockCache { x, mha, ln1, pre, gate, hidden, ln2 })
}

fn block_backward(block: &mut [Param], cache: &BlockCache, dout: &[f64], batch: usize) -> Vec<f64> {
    let rows = batch * SEQ_LEN;
    let (g2, b2) = block[LN2..].split_at_mut(1);
    let dr2 = ln_backward(&cache.ln2, dout, &mut g2[0], &mut b2[0]);
    let (w2, rest) = block[W2..].split_at_mut(1);
    let mut dpre = affine_backward(&cache.hidden, &dr2, rows, &mut w2[0], Some(&mut rest[0]), true).expect("dx requested");
    // silu'(x) = s + x s (1 - s)
    for ((g, &x), &s) in dpre.iter_mut().zip(&cache.pre).zip(&cache.gate) {
        *g *= s + x * s * (1.0 - s);
    }
    let (w1, rest) = block[W1..].split_at_mut(1);
    let dln1 = affine_backward(&cache.ln1.out, &dpre, rows, &mut w1[0], Some(&mut rest[0]), true).expect("dx requested");
    let dx1: Vec<f64> = dr2.iter().zip(&dln1).map(|(a, b)| a + b).collect();
    let (g1, b1) = block[LN1..].split_at_mut(1);
    let dr1 = ln_backward(&cache.ln1, &dx1, &mut g1[0], &mut b1[0]);
    let dx_attn = mha_backward(block, &cache.x, &cache.mha, &dr1, batch);
    dr1.iter().zip(&dx_attn).map(|(a, b)| a + b).collect()
}

#[derive(Debug, Clone)]
pub struct TransformerGazeModel {
    n_classes: usize,
    /// Disable to study the model without position information.
    pub use_positions: bool,
    pub reg: RegConfig,
    positions: Matrix,
    params: Vec<Param>,
}

struct Cache {
    batch: usize,
    blocks: Vec<BlockCache>,
    pooled: Vec<f64>,
    /// Winning time step per (sample, feature).
    argmax: Vec<usize>,
}

impl TransformerGazeModel {
    pub fn new(n_classes: usize, seed: u64) -> Result<Self> {
        if !(2..=255).contains(&n_classes) {
            return Err(Error::invalid(format!("n_classes must be in 2..=255, got {n_classes}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::with_capacity(BLOCKS * PER_BLOCK + 2);
        for blk in 1..=BLOCKS {
            let p = format!("enc{blk}");
            for w in ["q", "k", "v", "o"] {
                params.push(Param::new(format!("{p}.attn.W{w}"), glorot_uniform(D_MODEL, D_MODEL, D_MODEL, D_MODEL, &mut rng)));
                params.push(Param::zeros(format!("{p}.attn.b{w}"), 1, D_MODEL));
            }
            params.push(Param::new(format!("{p}.ln1.gain"), Matrix::from_fn(1, D_MODEL, |_, _| 1.0)));
            params.push(Param::zeros(format!("{p}.ln1.bias"), 1, D_MODEL));
            params.push(Param::new(format!("{p}.ffn.W1"), glorot_uniform(D_MODEL, FFN_UNITS, D_MODEL, FFN_UNITS, &mut rng)));
            params.push(Param::zeros(format!("{p}.ffn.b1"), 1, FFN_UNITS));
            params.push(Param::new(format!("{p}.ffn.W2"), glorot_uniform(FFN_UNITS, D_MODEL, FFN_UNITS, D_MODEL, &mut rng)));
            params.push(Param::zeros(format!("{p}.ffn.b2"), 1, D_MODEL));
            params.push(Param::new(format!("{p}.ln2.gain"), Matrix::from_fn(1, D_MODEL, |_, _| 1.0)));
            params.push(Param::zeros(format!("{p}.ln2.bias"), 1, D_MODEL));
        }
        params.push(Param::new("head.W", glorot_uniform(D_MODEL, n_classes, D_MODEL, n_classes, &mut rng)));
        params.push(Param::zeros("head.b", 1, n_classes));
        Ok(TransformerGazeModel {
            n_classes,
            use_positions: true,
            reg: RegConfig::disabled(),
            positions: sinusoidal_positions(SEQ_LEN, D_MODEL),
            params,
        })
    }

    pub fn positions(&self) -> &Matrix {
        &self.positions
    }

    /// Multi-head self-attention of block `block` on a single `30 x 24` input.
    /// Returns the projected output and the `heads x 30 x 30` attention weights.
    pub fn mha_forward(&self, block: usize, x: &Matrix) -> Result<(Matrix, Vec<f64>)> {
        if block >= BLOCKS || (x.rows(), x.cols()) != (SEQ_LEN, D_MODEL) {
            return Err(Error::shape(format!("block {block}, input {}x{}", x.rows(), x.cols())));
        }
        let c = mha(&self.params[block * PER_BLOCK..(block + 1) * PER_BLOCK], x.as_slice(), 1)?;
        Ok((Matrix::from_vec(SEQ_LEN, D_MODEL, c.out), c.attn))
    }

    /// Per-sample pooled encoder features (`n x 24`) in eval mode.
    pub fn pooled_features(&self, inputs: &[f64]) -> Result<Matrix> {
        let (_, cache) = self.forward(&self.params, inputs)?;
        Ok(Matrix::from_vec(cache.batch, D_MODEL, cache.pooled))
    }

    fn forward(&self, params: &[Param], inputs: &[f64]) -> Result<(Matrix, Cache)> {
        let batch = check_inputs(inputs)?;
        let mut x = inputs.to_vec();
        if self.use_positions {
            for row in x.chunks_exact_mut(WINDOW) {
                row.iter_mut().zip(self.positions.as_slice()).for_each(|(v, p)| *v += p);
            }
        }
        let mut blocks = Vec::with_capacity(BLOCKS);
        for blk in 0..BLOCKS {
            let cache = block_forward(&params[blk * PER_BLOCK..(blk + 1) * PER_BLOCK], x, batch)?;
            x = cache.ln2.out.clone();
            blocks.push(cache);
        }
        let mut pooled = vec![0.0; batch * D_MODEL];
        let mut argmax = vec![0; batch * D_MODEL];
        for b in 0..batch {
            for c in 0..D_MODEL {
                let mut best = 0;
                for t in 1..SEQ_LEN {
                    if x[(b * SEQ_LEN + t) * D_MODEL + c] > x[(b * SEQ_LEN + best) * D_MODEL + c] {
                        best = t;
                    }
                }
                argmax[b * D_MODEL + c] = best;
                pooled[b * D_MODEL + c] = x[(b * SEQ_LEN + best) * D_MODEL + c];
            }
        }
        let logits = affine(&pooled, batch, &params[HEAD_W], Some(&params[HEAD_B]));
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("transformer logits".into()));
        }
        Ok((Matrix::from_vec(batch, self.n_classes, logits), Cache { batch, blocks, pooled, argmax }))
    }

    fn backward(&self, params: &mut [Param], cache: &Cache, dlogits: &Matrix) {
        let batch = cache.batch;
        let (hw, hb) = params[HEAD_W..].split_at_mut(1);
        let dpooled = affine_backward(&cache.pooled, dlogits.as_slice(), batch, &mut hw[0], Some(&mut hb[0]), true).expect("dx requested");
        let mut dx = vec![0.0; batch * SEQ_LEN * D_MODEL];
        for b in 0..batch {
            for c in 0..D_MODEL {
                dx[(b * SEQ_LEN + cache.argmax[b * D_MODEL + c]) * D_MODEL + c] = dpooled[b * D_MODEL + c];
            }
        }
        for blk in (0..BLOCKS).rev() {
            dx = block_backward(&mut params[blk * PER_BLOCK..(blk + 1) * PER_BLOCK], &cache.blocks[blk], &dx, batch);
        }
    }

    pub fn loss_with(&self, params: &mut [Param], batch: &Batch, want_grad: bool) -> Result<f64> {
        if batch.n_classes() != self.n_classes {
            return Err(Error::shape(format!("batch has {} classes, model {}", batch.n_classes(), self.n_classes)));
        }
        let (mut logits, cache) = self.forward(params, &batch.inputs)?;
        let (loss, dlogits) = softmax_soft_ce(&mut logits, &batch.counts)?;
        if !want_grad {
            return Ok(loss + self.reg.penalty(params));
        }
        self.backward(params, &cache, &dlogits);
        Ok(loss + self.reg.apply(params))
    }
}

const WINDOW: usize = SEQ_LEN * D_MODEL;

impl GazeModel for TransformerGazeModel {
    fn arch(&self) -> Arch {
        Arch::Transformer
    }

    fn n_classes(&self) -> usize {
        self.n_classes
    }

    fn params(&self) -> &[Param] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    fn predict(&self, inputs: &[f64]) -> Result<Matrix> {
        let (mut logits, _) = self.forward(&self.params, inputs)?;
        for r in 0..logits.rows() {
            let p = stable_softmax(logits.row(r))?;
            logits.row_mut(r).copy_from_slice(&p);
        }
        Ok(logits)
    }

    /// No stochastic layers, so `mode` and `rng` are unused.
    fn loss_and_grad(&mut self, batch: &Batch, _mode: Mode, _rng: &mut dyn RngCore) -> Result<f64> {
        let mut params = std::mem::take(&mut self.params);
        let out = self.loss_with(&mut params, batch, true);
        self.params = params;
        out
    }
}

/// Random `30 x 24` binary window, for tests and benchmarks.
pub fn random_window<R: Rng + ?Sized>(rng: &mut R, density: f64) -> Vec<f64> {
    (0..WINDOW).map(|_| if rng.gen::<f64>() < density { 1.0 } else { 0.0 }).collect()
}
