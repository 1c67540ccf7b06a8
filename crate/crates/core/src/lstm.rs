//! Two-layer bidirectional LSTM classifier.
//!
//! ```text
//! window (30 x 24)
//!   -> BiLSTM(32 per direction, full sequence)   -> 30 x 64
//!   -> BiLSTM(32 per direction, final states)    -> 64
//!   -> dropout 0.2 -> dense 32 (sigmoid) -> dense n_classes (softmax)
//! ```
//!
//! Gates are packed `[i, f, g, o]` in the `4 * 32` rows of `W` and `U`. The backward
//! direction reads the sequence reversed; its "final" state is the one at frame 0.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{check_inputs, softmax_soft_ce, Arch, Batch, GazeModel};
use crate::nn::{dropout_apply, gemm_slice, glorot_uniform, orthogonal, sigmoid, DropoutMask, Matrix, Mode, Param, RegConfig};
use crate::preprocess::SEQ_LEN;
use crate::scenario::N_FEATURES;

pub const HIDDEN: usize = 32;
pub const DENSE_UNITS: usize = 32;
pub const DROPOUT_RATE: f64 = 0.2;

const GATES: usize = 4 * HIDDEN;
const L1_FWD: usize = 0;
const L1_BWD: usize = 3;
const L2_FWD: usize = 6;
const L2_BWD: usize = 9;
const DENSE_W: usize = 12;
const DENSE_B: usize = 13;
const HEAD_W: usize = 14;
const HEAD_B: usize = 15;

/// Trainable parameter count for `n_classes` outputs.
pub fn lstm_param_count(n_classes: usize) -> usize {
    let dir = |d: usize| GATES * d + GATES * HIDDEN + GATES;
    2 * dir(N_FEATURES) + 2 * dir(2 * HIDDEN) + 2 * HIDDEN * DENSE_UNITS + DENSE_UNITS + DENSE_UNITS * n_classes + n_classes
}

/// One LSTM step for a single sequence, written out element by element.
///
/// `w` is `4h x d`, `u` is `4h x h`, `b` has `4h` entries. Returns `(h, c)`.
pub fn lstm_cell_step(w: &Matrix, u: &Matrix, b: &[f64], x: &[f64], h_prev: &[f64], c_prev: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let h = h_prev.len();
    let z: Vec<f64> = (0..4 * h)
        .map(|r| b[r] + w.row(r).iter().zip(x).map(|(a, v)| a * v).sum::<f64>() + u.row(r).iter().zip(h_prev).map(|(a, v)| a * v).sum::<f64>())
        .collect();
    let mut h_out = vec![0.0; h];
    let mut c_out = vec![0.0; h];
    for j in 0..h {
        let i = sigmoid(z[j]);
        let f = sigmoid(z[h + j]);
        let g = z[2 * h + j].tanh();
        let o = sigmoid(z[3 * h + j]);
        c_out[j] = f * c_prev[j] + i * g;
        h_out[j] = o * c_out[j].tanh();
    }
    (h_out, c_out)
}

#[derive(Debug, Clone)]
pub struct LstmGazeModel {
    n_classes: usize,
    pub dropout: f64,
    pub reg: RegConfig,
    params: Vec<Param>,
}

/// Activations of one direction over a batch, time-major (`row = t * batch + b`).
struct DirCache {
    /// Activated gates, `T*B x 4h`.
    gates: Vec<f64>,
    c: Vec<f64>,
    tanh_c: Vec<f64>,
    h: Vec<f64>,
}

struct Cache {
    batch: usize,
    x1: Vec<f64>,
    l1: [DirCache; 2],
    /// Layer-1 output, `T*B x 2h`.
    x2: Vec<f64>,
    l2: [DirCache; 2],
    pooled: Matrix,
    mask: Option<DropoutMask>,
    dropped: Matrix,
    dense: Matrix,
}

#[inline]
fn time_index(step: usize, reverse: bool) -> usize {
    if reverse {
        SEQ_LEN - 1 - step
    } else {
        step
    }
}

fn dir_forward(w: &Matrix, u: &Matrix, b: &Matrix, x: &[f64], d: usize, batch: usize, reverse: bool) -> DirCache {
    let rows = SEQ_LEN * batch;
    let mut gates = vec![0.0; rows * GATES];
    gemm_slice(1.0, x, (rows, d), false, w.as_slice(), (GATES, d), true, 0.0, &mut gates);
    for row in gates.chunks_exact_mut(GATES) {
        row.iter_mut().zip(b.as_slice()).for_each(|(z, bb)| *z += bb);
    }
    let mut c = vec![0.0; rows * HIDDEN];
    let mut tanh_c = vec![0.0; rows * HIDDEN];
    let mut h = vec![0.0; rows * HIDDEN];
    let bh = batch * HIDDEN;
    for step in 0..SEQ_LEN {
        let t = time_index(step, reverse);
        let zt = &mut gates[t * batch * GATES..(t + 1) * batch * GATES];
        let prev = (step > 0).then(|| time_index(step - 1, reverse));
        if let Some(tp) = prev {
            gemm_slice(1.0, &h[tp * bh..(tp + 1) * bh], (batch, HIDDEN), false, u.as_slice(), (GATES, HIDDEN), true, 1.0, zt);
        }
        for bi in 0..batch {
            let z = &mut zt[bi * GATES..(bi + 1) * GATES];
            for j in 0..HIDDEN {
                let i = sigmoid(z[j]);
                let f = sigmoid(z[HIDDEN + j]);
                let g = z[2 * HIDDEN + j].tanh();
                let o = sigmoid(z[3 * HIDDEN + j]);
                z[j] = i;
                z[HIDDEN + j] = f;
                z[2 * HIDDEN + j] = g;
                z[3 * HIDDEN + j] = o;
                let cp = prev.map_or(0.0, |tp| c[tp * bh + bi * HIDDEN + j]);
                let k = t * bh + bi * HIDDEN + j;
                c[k] = f * cp + i * g;
                tanh_c[k] = c[k].tanh();
                h[k] = o * tanh_c[k];
            }
        }
    }
    DirCache { gates, c, tanh_c, h }
}

/// BPTT for one direction. `dh_out` is the upstream gradient on every `h_t`
/// (`T*B x h`). Accumulates into the three parameter grads and, when given, `dx`.
#[allow(clippy::too_many_arguments)]
fn dir_backward(
    params: &mut [Param],
    base: usize,
    x: &[f64],
    d: usize,
    cache: &DirCache,
    dh_out: &[f64],
    batch: usize,
    reverse: bool,
    dx: Option<&mut [f64]>,
) {
    let rows = SEQ_LEN * batch;
    let bh = batch * HIDDEN;
    let mut dz = vec![0.0; rows * GATES];
    let mut dh_next = vec![0.0; bh];
    let mut dc_next = vec![0.0; bh];
    for step in (0..SEQ_LEN).rev() {
        let t = time_index(step, reverse);
        let prev = (step > 0).then(|| time_index(step - 1, reverse));
        let dzt = &mut dz[t * batch * GATES..(t + 1) * batch * GATES];
        for bi in 0..batch {
            let g = &cache.gates[(t * batch + bi) * GATES..(t * batch + bi + 1) * GATES];
            let dzr = &mut dzt[bi * GATES..(bi + 1) * GATES];
            for j in 0..HIDDEN {
                let k = t * bh + bi * HIDDEN + j;
                let nb = bi * HIDDEN + j;
                let (i, f, gg, o) = (g[j], g[HIDDEN + j], g[2 * HIDDEN + j], g[3 * HIDDEN + j]);
                let tc = cache.tanh_c[k];
                let dh = dh_out[k] + dh_next[nb];
                let dc = dh * o * (1.0 - tc * tc) + dc_next[nb];
                let cp = prev.map_or(0.0, |tp| cache.c[tp * bh + nb]);
                dzr[j] = dc * gg * i * (1.0 - i);
                dzr[HIDDEN + j] = dc * cp * f * (1.0 - f);
                dzr[2 * HIDDEN + j] = dc * i * (1.0 - gg * gg);
                dzr[3 * HIDDEN + j] = dh * tc * o * (1.0 - o);
                dc_next[nb] = dc * f;
            }
        }
        if let Some(tp) = prev {
            let h_prev = &cache.h[tp * bh..(tp + 1) * bh];
            gemm_slice(1.0, dzt, (batch, GATES), true, h_prev, (batch, HIDDEN), false, 1.0, params[base + 1].grad.as_mut_slice());
            let u = params[base + 1].value.as_slice();
            gemm_slice(1.0, dzt, (batch, GATES), false, u, (GATES, HIDDEN), false, 0.0, &mut dh_next);
        }
    }
    gemm_slice(1.0, &dz, (rows, GATES), true, x, (rows, d), false, 1.0, params[base].grad.as_mut_slice());
    let gb = params[base + 2].grad.as_mut_slice();
    for row in dz.chunks_exact(GATES) {
        gb.iter_mut().zip(row).for_each(|(a, v)| *a += v);
    }
    if let Some(dx) = dx {
        gemm_slice(1.0, &dz, (rows, GATES), false, params[base].value.as_slice(), (GATES, d), false, 1.0, dx);
    }
}

impl LstmGazeModel {
    pub fn new(n_classes: usize, seed: u64) -> Result<Self> {
        if !(2..=255).contains(&n_classes) {
            return Err(Error::invalid(format!("n_classes must be in 2..=255, got {n_classes}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::with_capacity(16);
        for (layer, d) in [("lstm1", N_FEATURES), ("lstm2", 2 * HIDDEN)] {
            for dir in ["fwd", "bwd"] {
                params.push(Param::new(format!("{layer}.{dir}.W"), glorot_uniform(GATES, d, d, GATES, &mut rng)));
                params.push(Param::new(format!("{layer}.{dir}.U"), orthogonal(GATES, HIDDEN, &mut rng)));
                let bias = Matrix::from_fn(1, GATES, |_, c| if (HIDDEN..2 * HIDDEN).contains(&c) { 1.0 } else { 0.0 });
                params.push(Param::new(format!("{layer}.{dir}.b"), bias));
            }
        }
        params.push(Param::new("dense.W", glorot_uniform(2 * HIDDEN, DENSE_UNITS, 2 * HIDDEN, DENSE_UNITS, &mut rng)));
        params.push(Param::zeros("dense.b", 1, DENSE_UNITS));
        params.push(Param::new("head.W", glorot_uniform(DENSE_UNITS, n_classes, DENSE_UNITS, n_classes, &mut rng)));
        params.push(Param::zeros("head.b", 1, n_classes));
        let reg = RegConfig::new(vec!["lstm2.fwd.W".into(), "lstm2.bwd.W".into()]);
        Ok(LstmGazeModel { n_classes, dropout: DROPOUT_RATE, reg, params })
    }

    pub fn take_params(&mut self) -> Vec<Param> {
        std::mem::take(&mut self.params)
    }

    pub fn set_params(&mut self, params: Vec<Param>) {
        self.params = params;
    }

    fn forward(&self, params: &[Param], inputs: &[f64], mode: Mode, rng: &mut dyn RngCore) -> Result<(Matrix, Cache)> {
        let batch = check_inputs(inputs)?;
        // sample-major -> time-major
        let mut x1 = vec![0.0; SEQ_LEN * batch * N_FEATURES];
        for b in 0..batch {
            for t in 0..SEQ_LEN {
                let src = &inputs[b * SEQ_LEN * N_FEATURES + t * N_FEATURES..][..N_FEATURES];
                x1[(t * batch + b) * N_FEATURES..][..N_FEATURES].copy_from_slice(src);
            }
        }
        let run = |base: usize, x: &[f64], d: usize, reverse: bool| {
            dir_forward(&params[base].value, &params[base + 1].value, &params[base + 2].value, x, d, batch, reverse)
        };
        let l1 = [run(L1_FWD, &x1, N_FEATURES, false), run(L1_BWD, &x1, N_FEATURES, true)];
        let rows = SEQ_LEN * batch;
        let mut x2 = vec![0.0; rows * 2 * HIDDEN];
        for r in 0..rows {
            x2[r * 2 * HIDDEN..][..HIDDEN].copy_from_slice(&l1[0].h[r * HIDDEN..][..HIDDEN]);
            x2[r * 2 * HIDDEN + HIDDEN..][..HIDDEN].copy_from_slice(&l1[1].h[r * HIDDEN..][..HIDDEN]);
        }
        let l2 = [run(L2_FWD, &x2, 2 * HIDDEN, false), run(L2_BWD, &x2, 2 * HIDDEN, true)];
        let last = (SEQ_LEN - 1) * batch;
        let pooled = Matrix::from_fn(batch, 2 * HIDDEN, |b, j| {
            if j < HIDDEN {
                l2[0].h[(last + b) * HIDDEN + j]
            } else {
                l2[1].h[b * HIDDEN + j - HIDDEN]
            }
        });
        let (dropped, mask) = dropout_apply(&pooled, self.dropout, mode, rng)?;
        let mut dense = Matrix::zeros(batch, DENSE_UNITS);
        gemm_slice(1.0, dropped.as_slice(), (batch, 2 * HIDDEN), false, params[DENSE_W].value.as_slice(), (2 * HIDDEN, DENSE_UNITS), false, 0.0, dense.as_mut_slice());
        dense.add_row_vector(params[DENSE_B].value.as_slice());
        dense = dense.map(sigmoid);
        let mut logits = Matrix::zeros(batch, self.n_classes);
        gemm_slice(1.0, dense.as_slice(), (batch, DENSE_UNITS), false, params[HEAD_W].value.as_slice(), (DENSE_UNITS, self.n_classes), false, 0.0, logits.as_mut_slice());
        logits.add_row_vector(params[HEAD_B].value.as_slice());
        if !logits.all_finite() {
            return Err(Error::NonFinite("lstm logits".into()));
        }
        Ok((logits, Cache { batch, x1, l1, x2, l2, pooled, mask, dropped, dense }))
    }

    fn backward(&self, params: &mut [Param], cache: &Cache, dlogits: &Matrix) {
        let batch = cache.batch;
        let n = self.n_classes;
        gemm_slice(1.0, cache.dense.as_slice(), (batch, DENSE_UNITS), true, dlogits.as_slice(), (batch, n), false, 1.0, params[HEAD_W].grad.as_mut_slice());
        dlogits.sum_rows_into(params[HEAD_B].grad.as_mut_slice());
        let mut ddense = Matrix::zeros(batch, DENSE_UNITS);
        gemm_slice(1.0, dlogits.as_slice(), (batch, n), false, params[HEAD_W].value.as_slice(), (DENSE_UNITS, n), true, 0.0, ddense.as_mut_slice());
        for (g, s) in ddense.as_mut_slice().iter_mut().zip(cache.dense.as_slice()) {
            *g *= s * (1.0 - s);
        }
        gemm_slice(1.0, cache.dropped.as_slice(), (batch, 2 * HIDDEN), true, ddense.as_slice(), (batch, DENSE_UNITS), false, 1.0, params[DENSE_W].grad.as_mut_slice());
        ddense.sum_rows_into(params[DENSE_B].grad.as_mut_slice());
        let mut dpooled = Matrix::zeros(batch, 2 * HIDDEN);
        gemm_slice(1.0, ddense.as_slice(), (batch, DENSE_UNITS), false, params[DENSE_W].value.as_slice(), (2 * HIDDEN, DENSE_UNITS), true, 0.0, dpooled.as_mut_slice());
        if let Some(mask) = &cache.mask {
            mask.apply(&mut dpooled);
        }
        debug_assert_eq!(cache.pooled.rows(), batch);

        let rows = SEQ_LEN * batch;
        let last = (SEQ_LEN - 1) * batch;
        let mut dh_fwd = vec![0.0; rows * HIDDEN];
        let mut dh_bwd = vec![0.0; rows * HIDDEN];
        for b in 0..batch {
            dh_fwd[(last + b) * HIDDEN..][..HIDDEN].copy_from_slice(&dpooled.row(b)[..HIDDEN]);
            dh_bwd[b * HIDDEN..][..HIDDEN].copy_from_slice(&dpooled.row(b)[HIDDEN..]);
        }
        let mut dx2 = vec![0.0; rows * 2 * HIDDEN];
        dir_backward(params, L2_FWD, &cache.x2, 2 * HIDDEN, &cache.l2[0], &dh_fwd, batch, false, Some(&mut dx2));
        dir_backward(params, L2_BWD, &cache.x2, 2 * HIDDEN, &cache.l2[1], &dh_bwd, batch, true, Some(&mut dx2));
        for r in 0..rows {
            dh_fwd[r * HIDDEN..][..HIDDEN].copy_from_slice(&dx2[r * 2 * HIDDEN..][..HIDDEN]);
            dh_bwd[r * HIDDEN..][..HIDDEN].copy_from_slice(&dx2[r * 2 * HIDDEN + HIDDEN..][..HIDDEN]);
        }
        dir_backward(params, L1_FWD, &cache.x1, N_FEATURES, &cache.l1[0], &dh_fwd, batch, false, None);
        dir_backward(params, L1_BWD, &cache.x1, N_FEATURES, &cache.l1[1], &dh_bwd, batch, true, None);
    }

    /// Loss and gradients against an explicit parameter set (used by gradient checks).
    pub fn loss_with(&self, params: &mut [Param], batch: &Batch, mode: Mode, rng: &mut dyn RngCore, want_grad: bool) -> Result<f64> {
        if batch.n_classes() != self.n_classes {
            return Err(Error::shape(format!("batch has {} classes, model {}", batch.n_classes(), self.n_classes)));
        }
        let (mut logits, cache) = self.forward(params, &batch.inputs, mode, rng)?;
        let (loss, dlogits) = softmax_soft_ce(&mut logits, &batch.counts)?;
        if !want_grad {
            return Ok(loss + self.reg.penalty(params));
        }
        self.backward(params, &cache, &dlogits);
        Ok(loss + self.reg.apply(params))
    }
}

impl GazeModel for LstmGazeModel {
    fn arch(&self) -> Arch {
        Arch::Lstm
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
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (mut logits, _) = self.forward(&self.params, inputs, Mode::Eval, &mut rng)?;
        for r in 0..logits.rows() {
            let p = crate::nn::stable_softmax(logits.row(r))?;
            logits.row_mut(r).copy_from_slice(&p);
        }
        Ok(logits)
    }

    fn loss_and_grad(&mut self, batch: &Batch, mode: Mode, rng: &mut dyn RngCore) -> Result<f64> {
        let mut params = std::mem::take(&mut self.params);
        let out = self.loss_with(&mut params, batch, mode, rng, true);
        self.params = params;
        out
    }
}
