use rand::Rng;

use super::{Matrix, Mode, Param, RegConfig};
use crate::error::{Error, Result};

/// Floor added inside the log of the cross-entropy loss.
pub const LOSS_FLOOR: f64 = 1e-12;

/// Max-shifted softmax.
pub fn stable_softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("softmax logits".into()));
    }
    let mut out = logits.to_vec();
    softmax_in_place(&mut out);
    Ok(out)
}

pub(crate) fn softmax_in_place(xs: &mut [f64]) {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in xs.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    let inv = 1.0 / sum;
    for x in xs.iter_mut() {
        *x *= inv;
    }
}

/// Loss `-ln(p[target] + floor)` and its gradient with respect to the logits.
pub fn cross_entropy(probs: &[f64], target: usize) -> Result<(f64, Vec<f64>)> {
    if target >= probs.len() {
        return Err(Error::invalid(format!("target {target} out of range for {} classes", probs.len())));
    }
    let loss = -(probs[target] + LOSS_FLOOR).ln();
    let mut grad = probs.to_vec();
    grad[target] -= 1.0;
    Ok((loss, grad))
}

/// Cross-entropy against a vector of non-negative class counts.
///
/// Equivalent to summing [`cross_entropy`] over `counts[c]` copies of each class `c`:
/// the loss is `sum_c counts[c] * -ln(p[c] + floor)` and the logit gradient is
/// `total * p - counts`.
pub fn soft_cross_entropy(probs: &[f64], counts: &[f64]) -> (f64, Vec<f64>) {
    debug_assert_eq!(probs.len(), counts.len());
    let total: f64 = counts.iter().sum();
    let mut loss = 0.0;
    for (&p, &n) in probs.iter().zip(counts) {
        if n != 0.0 {
            loss -= n * (p + LOSS_FLOOR).ln();
        }
    }
    let grad = probs.iter().zip(counts).map(|(&p, &n)| total * p - n).collect();
    (loss, grad)
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Derivative of sigmoid given its output `s`.
#[inline]
pub fn sigmoid_grad(s: f64) -> f64 {
    s * (1.0 - s)
}

/// Derivative of tanh given its output `t`.
#[inline]
pub fn tanh_grad(t: f64) -> f64 {
    1.0 - t * t
}

#[inline]
pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

#[inline]
pub fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s + x * s * (1.0 - s)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Sigmoid,
    Silu,
}

impl Activation {
    pub fn value(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => sigmoid(x),
            Activation::Silu => silu(x),
        }
    }

    /// Derivative with respect to the pre-activation `x`.
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => tanh_grad(x.tanh()),
            Activation::Sigmoid => sigmoid_grad(sigmoid(x)),
            Activation::Silu => silu_grad(x),
        }
    }
}

/// Per-element multipliers from inverted dropout: `0` or `1 / (1 - rate)`.
#[derive(Debug, Clone)]
pub struct DropoutMask {
    pub scale: Vec<f64>,
}

impl DropoutMask {
    pub fn apply(&self, x: &mut Matrix) {
        for (v, s) in x.as_mut_slice().iter_mut().zip(&self.scale) {
            *v *= s;
        }
    }
}

/// Inverted dropout. Eval mode (and `rate == 0`) returns `x` unchanged and no mask.
pub fn dropout_apply<R: Rng + ?Sized>(
    x: &Matrix,
    rate: f64,
    mode: Mode,
    rng: &mut R,
) -> Result<(Matrix, Option<DropoutMask>)> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::invalid(format!("dropout rate {rate} outside [0, 1)")));
    }
    if mode == Mode::Eval || rate == 0.0 {
        return Ok((x.clone(), None));
    }
    let keep = 1.0 / (1.0 - rate);
    let scale: Vec<f64> = (0..x.len()).map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep }).collect();
    let mask = DropoutMask { scale };
    let mut out = x.clone();
    mask.apply(&mut out);
    Ok((out, Some(mask)))
}

/// `l1 * sum|w| + l2 * sum w^2` and its gradient `l1 * sign(w) + 2 * l2 * w`.
pub fn l1l2_penalty(param: &Param, cfg: &RegConfig) -> (f64, Matrix) {
    let w = &param.value;
    let mut penalty = 0.0;
    let grad = w.map(|x| {
        let sign = if x > 0.0 {
            1.0
        } else if x < 0.0 {
            -1.0
        } else {
            0.0
        };
        cfg.l1 * sign + 2.0 * cfg.l2 * x
    });
    for &x in w.as_slice() {
        penalty += cfg.l1 * x.abs() + cfg.l2 * x * x;
    }
    (penalty, grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn softmax_uniform() {
        let p = stable_softmax(&[0.0; 6]).unwrap();
        for x in p {
            assert!((x - 1.0 / 6.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_large_logit_does_not_overflow() {
        let p = stable_softmax(&[1000.0, 0.0, 0.0]).unwrap();
        assert!((p[0] - 1.0).abs() < 1e-15);
        assert!(p[1] < 1e-300 && p[2] < 1e-300);
    }

    #[test]
    fn softmax_rejects_nan() {
        assert!(stable_softmax(&[0.0, f64::NAN]).is_err());
        assert!(stable_softmax(&[f64::INFINITY]).is_err());
    }

    proptest! {
        #[test]
        fn softmax_shift_invariant(xs in prop::collection::vec(-50.0f64..50.0, 1..10), c in -100.0f64..100.0) {
            let a = stable_softmax(&xs).unwrap();
            let shifted: Vec<f64> = xs.iter().map(|x| x + c).collect();
            let b = stable_softmax(&shifted).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn softmax_is_probability_vector_and_keeps_argmax(xs in prop::collection::vec(-30.0f64..30.0, 2..10)) {
            let p = stable_softmax(&xs).unwrap();
            let sum: f64 = p.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12);
            prop_assert!(p.iter().all(|&x| (0.0..=1.0).contains(&x)));
            let am = |v: &[f64]| v.iter().enumerate().fold(0, |b, (i, &x)| if x > v[b] { i } else { b });
            prop_assert_eq!(am(&xs), am(&p));
        }

        #[test]
        fn cross_entropy_gradient_is_probs_minus_onehot(xs in prop::collection::vec(-5.0f64..5.0, 2..8), t in 0usize..8) {
            let t = t % xs.len();
            let p = stable_softmax(&xs).unwrap();
            let (_, g) = cross_entropy(&p, t).unwrap();
            for (i, (gi, pi)) in g.iter().zip(&p).enumerate() {
                let onehot = if i == t { 1.0 } else { 0.0 };
                prop_assert!((gi - (pi - onehot)).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn cross_entropy_uniform_is_ln6() {
        let p = vec![1.0 / 6.0; 6];
        let (loss, _) = cross_entropy(&p, 4).unwrap();
        assert!((loss - 1.791_759_469_228_055).abs() < 1e-9);
    }

    #[test]
    fn cross_entropy_perfect_prediction() {
        let (loss, g) = cross_entropy(&[0.0, 1.0, 0.0], 1).unwrap();
        assert!(loss.abs() < 1e-11);
        assert!(g.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn cross_entropy_gradient_example() {
        let (_, g) = cross_entropy(&[0.7, 0.2, 0.1], 0).unwrap();
        let expect = [-0.3, 0.2, 0.1];
        for (a, b) in g.iter().zip(expect) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!(cross_entropy(&[0.5, 0.5], 2).is_err());
    }

    #[test]
    fn soft_cross_entropy_equals_sum_of_hard() {
        let p = stable_softmax(&[0.3, -1.0, 2.0]).unwrap();
        let counts = [2.0, 0.0, 3.0];
        let (loss, grad) = soft_cross_entropy(&p, &counts);
        let mut hard_loss = 0.0;
        let mut hard_grad = vec![0.0; 3];
        for (c, &n) in counts.iter().enumerate() {
            for _ in 0..n as usize {
                let (l, g) = cross_entropy(&p, c).unwrap();
                hard_loss += l;
                hard_grad.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
            }
        }
        assert!((loss - hard_loss).abs() < 1e-12);
        for (a, b) in grad.iter().zip(&hard_grad) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn activation_origin_values() {
        assert_eq!(Activation::Tanh.value(0.0), 0.0);
        assert_eq!(Activation::Sigmoid.value(0.0), 0.5);
        assert_eq!(Activation::Silu.value(0.0), 0.0);
        assert_eq!(silu_grad(0.0), 0.5);
    }

    #[test]
    fn silu_tails() {
        // -20 * sigmoid(-20) = -20 * e^-20 / (1 + e^-20)
        let expect = -20.0 * (-20.0f64).exp() / (1.0 + (-20.0f64).exp());
        assert!((silu(-20.0) - expect).abs() < 1e-20);
        assert!((silu(-20.0) + 4.122e-8).abs() < 1e-10);
        assert!((silu(40.0) - 40.0).abs() < 1e-12);
    }

    #[test]
    fn activation_derivatives_match_central_differences() {
        let h = 1e-6;
        for act in [Activation::Tanh, Activation::Sigmoid, Activation::Silu] {
            for &x in &[-3.0, -0.7, 0.0, 0.4, 2.5] {
                let num = (act.value(x + h) - act.value(x - h)) / (2.0 * h);
                assert!((num - act.derivative(x)).abs() < 1e-8, "{act:?} at {x}");
            }
        }
    }

    #[test]
    fn dropout_eval_and_zero_rate_are_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Matrix::from_fn(4, 5, |r, c| (r * 5 + c) as f64);
        let (y, mask) = dropout_apply(&x, 0.2, Mode::Eval, &mut rng).unwrap();
        assert_eq!(y, x);
        assert!(mask.is_none());
        let (y, _) = dropout_apply(&x, 0.0, Mode::Train, &mut rng).unwrap();
        assert_eq!(y, x);
        assert!(dropout_apply(&x, 1.0, Mode::Train, &mut rng).is_err());
    }

    #[test]
    fn dropout_statistics() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = Matrix::from_vec(1, 100_000, vec![1.0; 100_000]);
        let (y, _) = dropout_apply(&x, 0.2, Mode::Train, &mut rng).unwrap();
        let mean = y.as_slice().iter().sum::<f64>() / 1e5;
        let zeros = y.as_slice().iter().filter(|&&v| v == 0.0).count() as f64 / 1e5;
        assert!((mean - 1.0).abs() < 0.01, "mean {mean}");
        assert!((zeros - 0.2).abs() < 0.01, "zero fraction {zeros}");
    }

    #[test]
    fn dropout_is_deterministic_per_seed() {
        let x = Matrix::from_vec(1, 64, vec![1.0; 64]);
        let a = dropout_apply(&x, 0.2, Mode::Train, &mut ChaCha8Rng::seed_from_u64(5)).unwrap().0;
        let b = dropout_apply(&x, 0.2, Mode::Train, &mut ChaCha8Rng::seed_from_u64(5)).unwrap().0;
        assert_eq!(a, b);
    }

    #[test]
    fn l1l2_examples() {
        let cfg = RegConfig { l1: 1e-5, l2: 1e-4, applies_to: vec!["w".into()] };
        let p = Param::new("w", Matrix::from_vec(1, 2, vec![1.0, -1.0]));
        let (pen, g) = l1l2_penalty(&p, &cfg);
        assert!((pen - 2.2e-4).abs() < 1e-18);
        assert!((g.get(0, 0) - (1e-5 + 2e-4)).abs() < 1e-18);
        assert!((g.get(0, 1) + (1e-5 + 2e-4)).abs() < 1e-18);

        let z = Param::zeros("w", 2, 2);
        let (pen, g) = l1l2_penalty(&z, &cfg);
        assert_eq!(pen, 0.0);
        assert!(g.as_slice().iter().all(|&x| x == 0.0));

        let l2_only = RegConfig { l1: 0.0, ..cfg };
        let w = Param::new("w", Matrix::from_vec(1, 3, vec![0.5, -2.0, 3.0]));
        let w2 = Param::new("w", w.value.map(|x| 2.0 * x));
        let ratio = l1l2_penalty(&w2, &l2_only).0 / l1l2_penalty(&w, &l2_only).0;
        assert!((ratio - 4.0).abs() < 1e-12);
    }
}
