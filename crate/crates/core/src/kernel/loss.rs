use super::{KernelError, Tensor};

pub fn softmax_row(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|&x| (x - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

pub fn log_softmax_row(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
    row.iter().map(|&x| x - lse).collect()
}

/// Weighted mean negative log-likelihood of `targets` under row-wise
/// softmax of `logits` (`n × V`): `Σ wᵢ·nllᵢ / Σ wᵢ`, or zero when every
/// weight is zero. Returns the loss and its gradient w.r.t. `logits`.
pub fn cross_entropy(logits: &Tensor, targets: &[usize], weights: &[f64]) -> Result<(f64, Tensor), KernelError> {
    let (n, vocab) = (logits.rows(), logits.cols());
    if targets.len() != n || weights.len() != n {
        return Err(KernelError::ShapeMismatch(format!(
            "{n} logit rows, {} targets, {} weights",
            targets.len(),
            weights.len()
        )));
    }
    if let Some(&target) = targets.iter().find(|&&t| t >= vocab) {
        return Err(KernelError::IndexOutOfVocab { target, vocab });
    }
    let total_w: f64 = weights.iter().sum();
    let mut grad = Tensor::zeros(&[n, vocab]);
    if total_w <= 0.0 {
        return Ok((0.0, grad));
    }
    let mut loss = 0.0;
    for i in 0..n {
        if weights[i] == 0.0 {
            continue;
        }
        let p = softmax_row(logits.row(i));
        let ls = log_softmax_row(logits.row(i));
        let w = weights[i] / total_w;
        loss -= w * ls[targets[i]];
        let g = grad.row_mut(i);
        for (gv, pv) in g.iter_mut().zip(&p) {
            *gv = w * pv;
        }
        g[targets[i]] -= w;
    }
    Ok((loss, grad))
}

fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Independent binary cross-entropy per bit: per row the mean over bits,
/// then a weighted mean over rows. `targets` holds 0/1 values.
pub fn bce_with_logits(logits: &Tensor, targets: &Tensor, weights: &[f64]) -> Result<(f64, Tensor), KernelError> {
    if logits.shape() != targets.shape() || weights.len() != logits.rows() {
        return Err(KernelError::ShapeMismatch(format!(
            "logits {:?}, targets {:?}, {} weights",
            logits.shape(),
            targets.shape(),
            weights.len()
        )));
    }
    let (n, bits) = (logits.rows(), logits.cols());
    let total_w: f64 = weights.iter().sum();
    let mut grad = Tensor::zeros(&[n, bits]);
    if total_w <= 0.0 || bits == 0 {
        return Ok((0.0, grad));
    }
    let mut loss = 0.0;
    for i in 0..n {
        let w = weights[i] / total_w / bits as f64;
        if w == 0.0 {
            continue;
        }
        for b in 0..bits {
            let z = logits.get(i, b);
            let y = targets.get(i, b);
            loss += w * (softplus(z) - y * z);
            grad.set(i, b, w * (sigmoid(z) - y));
        }
    }
    Ok((loss, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn uniform_logits_give_ln_vocab() {
        let logits = Tensor::zeros(&[3, 4]);
        let (loss, _) = cross_entropy(&logits, &[0, 1, 3], &[1.0, 1.0, 1.0]).unwrap();
        assert!((loss - 4f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn zero_weight_token_contributes_nothing() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let logits = Tensor::matrix(2, 5, (0..10).map(|_| rng.gen_range(-2.0..2.0)).collect());
        let (both, grad) = cross_entropy(&logits, &[1, 4], &[1.0, 0.0]).unwrap();
        let (first, _) = cross_entropy(&logits.select_rows(&[0]), &[1], &[1.0]).unwrap();
        assert!((both - first).abs() < 1e-15);
        assert!(grad.row(1).iter().all(|&g| g == 0.0));
    }

    #[test]
    fn gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let logits = Tensor::matrix(4, 6, (0..24).map(|_| rng.gen_range(-2.0..2.0)).collect());
        let targets = [0, 5, 2, 2];
        let weights = [1.0, 0.5, 2.0, 0.25];
        let (_, grad) = cross_entropy(&logits, &targets, &weights).unwrap();
        let eps = 1e-6;
        for idx in 0..logits.len() {
            let mut plus = logits.clone();
            plus.data_mut()[idx] += eps;
            let mut minus = logits.clone();
            minus.data_mut()[idx] -= eps;
            let fd = (cross_entropy(&plus, &targets, &weights).unwrap().0
                - cross_entropy(&minus, &targets, &weights).unwrap().0)
                / (2.0 * eps);
            let rel = (grad.data()[idx] - fd).abs() / fd.abs().max(1.0);
            assert!(rel < 1e-6, "coord {idx}: {rel}");
        }
    }

    #[test]
    fn out_of_vocab_target() {
        let logits = Tensor::zeros(&[1, 3]);
        assert_eq!(
            cross_entropy(&logits, &[3], &[1.0]).unwrap_err(),
            KernelError::IndexOutOfVocab { target: 3, vocab: 3 }
        );
    }

    #[test]
    fn bce_at_zero_logit_is_ln2() {
        let logits = Tensor::zeros(&[2, 3]);
        let targets = Tensor::matrix(2, 3, vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0]);
        let (loss, _) = bce_with_logits(&logits, &targets, &[1.0, 1.0]).unwrap();
        assert!((loss - 2f64.ln()).abs() < 1e-15);
    }
}
