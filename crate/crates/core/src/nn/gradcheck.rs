use rand::seq::index::sample;
use rand::Rng;

use super::Param;
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(param name, flat index)` of the worst coordinate.
    pub worst: (String, usize),
    /// Per-tensor maximum relative error in parameter order.
    pub per_param: Vec<(String, f64)>,
    pub coords_checked: usize,
}

/// Compares analytic gradients with central differences `(f(w+h) - f(w-h)) / 2h`.
///
/// `loss_fn(params, want_grad)` must return the loss and, when `want_grad` is set,
/// accumulate the analytic gradient into `params[..].grad` (which the checker zeroes
/// beforehand). It has to be deterministic, i.e. dropout off.
///
/// Up to `samples_per_param` coordinates are sampled per tensor (all when fewer).
/// Relative error is `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn grad_check<R, F>(
    params: &mut [Param],
    mut loss_fn: F,
    step: f64,
    samples_per_param: usize,
    rng: &mut R,
) -> Result<GradCheckReport>
where
    R: Rng + ?Sized,
    F: FnMut(&mut [Param], bool) -> Result<f64>,
{
    params.iter_mut().for_each(Param::zero_grad);
    let base = loss_fn(params, true)?;
    if !base.is_finite() {
        return Err(Error::NonFinite("loss".into()));
    }
    let analytic: Vec<Vec<f64>> = params.iter().map(|p| p.grad.as_slice().to_vec()).collect();

    let mut report =
        GradCheckReport { max_rel_error: 0.0, worst: (String::new(), 0), per_param: Vec::new(), coords_checked: 0 };
    for pi in 0..params.len() {
        let n = params[pi].len();
        let coords: Vec<usize> =
            if n <= samples_per_param { (0..n).collect() } else { sample(rng, n, samples_per_param).into_vec() };
        let mut tensor_max = 0.0f64;
        for idx in coords {
            let orig = params[pi].value.as_slice()[idx];
            params[pi].value.as_mut_slice()[idx] = orig + step;
            let plus = loss_fn(params, false)?;
            params[pi].value.as_mut_slice()[idx] = orig - step;
            let minus = loss_fn(params, false)?;
            params[pi].value.as_mut_slice()[idx] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::NonFinite("loss".into()));
            }
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic[pi][idx];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = (params[pi].name.clone(), idx);
            }
            tensor_max = tensor_max.max(rel);
            report.coords_checked += 1;
        }
        report.per_param.push((params[pi].name.clone(), tensor_max));
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{cross_entropy, matmul, stable_softmax, tanh_grad, Matrix};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// tanh(x W + b) followed by softmax cross-entropy.
    fn dense_tanh_loss(params: &mut [Param], x: &Matrix, target: usize, want_grad: bool) -> Result<f64> {
        let mut z = matmul(x, false, &params[0].value, false);
        z.add_row_vector(params[1].value.as_slice());
        let a = z.map(f64::tanh);
        let p = stable_softmax(a.row(0))?;
        let (loss, dlogits) = cross_entropy(&p, target)?;
        if want_grad {
            let dz: Vec<f64> = dlogits.iter().zip(a.row(0)).map(|(g, &t)| g * tanh_grad(t)).collect();
            let dz = Matrix::from_vec(1, dz.len(), dz);
            params[0].grad.add_assign(&matmul(x, true, &dz, false));
            params[1].grad.add_assign(&dz);
        }
        Ok(loss)
    }

    #[test]
    fn dense_tanh_layer_passes() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let x = Matrix::from_fn(1, 7, |_, _| rng.gen_range(-1.0..1.0));
        let mut params = vec![
            Param::new("w", Matrix::from_fn(7, 5, |_, _| rng.gen_range(-0.8..0.8))),
            Param::new("b", Matrix::from_fn(1, 5, |_, _| rng.gen_range(-0.2..0.2))),
        ];
        let report =
            grad_check(&mut params, |p, g| dense_tanh_loss(p, &x, 2, g), 1e-5, 200, &mut rng).unwrap();
        assert_eq!(report.coords_checked, 40);
        assert!(report.max_rel_error < 1e-6, "{report:?}");
    }

    #[test]
    fn wrong_gradient_is_detected() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut params = vec![Param::new("w", Matrix::from_vec(1, 1, vec![0.5]))];
        let report = grad_check(
            &mut params,
            |p, g| {
                let w = p[0].value.get(0, 0);
                if g {
                    p[0].grad.set(0, 0, 3.0 * w); // true derivative is 2w
                }
                Ok(w * w)
            },
            1e-5,
            200,
            &mut rng,
        )
        .unwrap();
        assert!(report.max_rel_error > 0.3);
    }

    #[test]
    fn non_finite_loss_is_an_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut params = vec![Param::zeros("w", 1, 1)];
        let r = grad_check(&mut params, |_, _| Ok(f64::NAN), 1e-5, 10, &mut rng);
        assert!(matches!(r, Err(Error::NonFinite(_))));
    }
}
