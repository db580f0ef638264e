use super::{KernelError, Tape, Tensor, Var};

/// Compares analytic gradients against central differences.
///
/// `f` maps inputs to a scalar value and its analytic gradients (one tensor
/// per input). Returns the maximum over all input coordinates of
/// `|analytic − numeric| / max(1, |numeric|)`.
pub fn grad_check<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<f64, KernelError>
where
    F: Fn(&[Tensor]) -> (f64, Vec<Tensor>),
{
    let (_, analytic) = f(inputs);
    if analytic.len() != inputs.len() {
        return Err(KernelError::ShapeMismatch(format!(
            "{} gradients for {} inputs",
            analytic.len(),
            inputs.len()
        )));
    }
    let mut worst: f64 = 0.0;
    let mut probe = inputs.to_vec();
    for (input, grad) in analytic.iter().enumerate() {
        if grad.shape() != inputs[input].shape() {
            return Err(KernelError::ShapeMismatch(format!(
                "gradient {input} has shape {:?}, input {:?}",
                grad.shape(),
                inputs[input].shape()
            )));
        }
        for coord in 0..inputs[input].len() {
            let orig = inputs[input].data()[coord];
            probe[input].data_mut()[coord] = orig + eps;
            let plus = f(&probe).0;
            probe[input].data_mut()[coord] = orig - eps;
            let minus = f(&probe).0;
            probe[input].data_mut()[coord] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = grad.data()[coord];
            if !numeric.is_finite() || !a.is_finite() {
                return Err(KernelError::NonFiniteGradient { input, coord });
            }
            worst = worst.max((a - numeric).abs() / numeric.abs().max(1.0));
        }
    }
    Ok(worst)
}

/// [`grad_check`] for a scalar graph built on a [`Tape`]: `build` receives
/// one leaf per input and returns the scalar output node.
pub fn grad_check_tape<B>(build: B, inputs: &[Tensor], eps: f64) -> Result<f64, KernelError>
where
    B: Fn(&mut Tape, &[Var]) -> Var,
{
    grad_check(
        |xs| {
            let mut tape = Tape::new();
            let leaves: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone())).collect();
            let out = build(&mut tape, &leaves);
            let value = tape.value(out).item();
            let grads = tape.backward(out);
            let per_input = leaves
                .iter()
                .zip(xs)
                .map(|(&l, x)| grads.get(l).cloned().unwrap_or_else(|| Tensor::zeros(x.shape())))
                .collect();
            (value, per_input)
        },
        inputs,
        eps,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn linear_map_is_at_noise_level() {
        let w = Tensor::matrix(2, 3, vec![0.5, -1.0, 2.0, 0.25, 3.0, -0.75]);
        let x = Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let err = grad_check(
            |xs| {
                let v = xs[0].data().iter().zip(w.data()).map(|(a, b)| a * b).sum();
                (v, vec![w.clone()])
            },
            &[x],
            // No truncation error for a linear map, so a wide step only reduces roundoff.
            1e-3,
        )
        .unwrap();
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn softmax_sum_of_squares() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let x = Tensor::matrix(3, 5, (0..15).map(|_| rng.gen_range(-2.0..2.0)).collect());
        let err = grad_check_tape(
            |t, v| {
                let s = t.softmax_rows(v[0]);
                let sq = t.mul(s, s);
                t.sum(sq)
            },
            &[x],
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn non_finite_is_reported() {
        let x = Tensor::scalar(0.0);
        let res = grad_check(|xs| (xs[0].item().ln(), vec![Tensor::scalar(f64::NAN)]), &[x], 1e-6);
        assert!(matches!(res, Err(KernelError::NonFiniteGradient { input: 0, coord: 0 })));
    }
}
