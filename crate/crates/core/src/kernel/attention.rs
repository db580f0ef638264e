use num_traits::Float;

use super::{KernelError, Tensor};
use crate::maskgen::MaskSpec;

/// Single-head masked attention over `n × d` row-major buffers, generic over
/// the float width. Row `i` is the softmax-weighted sum of the `v` rows whose
/// keys are visible to query `i`.
pub fn masked_attention_rows<T: Float>(
    q: &[T],
    k: &[T],
    v: &[T],
    d: usize,
    mask: &MaskSpec,
    scale: T,
) -> Result<Vec<T>, KernelError> {
    let n = mask.len();
    if q.len() != n * d || k.len() != n * d || v.len() != n * d {
        return Err(KernelError::ShapeMismatch(format!(
            "attention expects {n}x{d} operands"
        )));
    }
    let rows = mask.row_keys();
    // Empty rows are rejected before any exponentiation.
    if let Some(i) = rows.iter().position(Vec::is_empty) {
        return Err(KernelError::EmptyAttentionRow(i));
    }
    let mut out = vec![T::zero(); n * d];
    let mut logits = Vec::new();
    for (i, keys) in rows.iter().enumerate() {
        let qi = &q[i * d..(i + 1) * d];
        logits.clear();
        logits.extend(keys.iter().map(|&j| {
            let kj = &k[j * d..(j + 1) * d];
            qi.iter().zip(kj).fold(T::zero(), |acc, (&a, &b)| acc + a * b) * scale
        }));
        let max = logits.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
        let mut total = T::zero();
        for l in logits.iter_mut() {
            *l = (*l - max).exp();
            total = total + *l;
        }
        let oi = &mut out[i * d..(i + 1) * d];
        for (&w, &j) in logits.iter().zip(keys) {
            let p = w / total;
            for (o, &vj) in oi.iter_mut().zip(&v[j * d..(j + 1) * d]) {
                *o = *o + p * vj;
            }
        }
    }
    Ok(out)
}

/// Masked attention on `n × d` tensors.
pub fn masked_attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    mask: &MaskSpec,
    scale: f64,
) -> Result<Tensor, KernelError> {
    if q.shape() != k.shape() || q.shape() != v.shape() || q.shape().len() != 2 {
        return Err(KernelError::ShapeMismatch(format!(
            "q {:?}, k {:?}, v {:?}",
            q.shape(),
            k.shape(),
            v.shape()
        )));
    }
    if q.rows() != mask.len() {
        return Err(KernelError::ShapeMismatch(format!(
            "mask covers {} tokens, operands have {}",
            mask.len(),
            q.rows()
        )));
    }
    let d = q.cols();
    let out = masked_attention_rows(q.data(), k.data(), v.data(), d, mask, scale)?;
    Ok(Tensor::matrix(q.rows(), d, out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::maskgen::{build_causal, Interval};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn seeded(n: usize, d: usize, rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::matrix(n, d, (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    /// Dense-mask O(n²) reference, written independently of the interval path.
    fn dense_reference(q: &Tensor, k: &Tensor, v: &Tensor, dense: &[Vec<bool>], scale: f64) -> Tensor {
        let (n, d) = (q.rows(), q.cols());
        let mut out = Tensor::zeros(&[n, d]);
        for i in 0..n {
            let s: Vec<f64> = (0..n)
                .map(|j| (0..d).map(|c| q.get(i, c) * k.get(j, c)).sum::<f64>() * scale)
                .collect();
            let m = (0..n).filter(|&j| dense[i][j]).map(|j| s[j]).fold(f64::MIN, f64::max);
            let z: f64 = (0..n).filter(|&j| dense[i][j]).map(|j| (s[j] - m).exp()).sum();
            for j in (0..n).filter(|&j| dense[i][j]) {
                let p = (s[j] - m).exp() / z;
                for c in 0..d {
                    let cur = out.get(i, c);
                    out.set(i, c, cur + p * v.get(j, c));
                }
            }
        }
        out
    }

    #[test]
    fn single_token_returns_v() {
        let q = Tensor::matrix(1, 3, vec![0.3, -0.2, 0.9]);
        let v = Tensor::matrix(1, 3, vec![1.0, 2.0, 3.0]);
        let out = masked_attention(&q, &q, &v, &build_causal(1), 0.5).unwrap();
        assert_eq!(out, v);
    }

    #[test]
    fn causal_matches_dense_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (q, k, v) = (seeded(8, 4, &mut rng), seeded(8, 4, &mut rng), seeded(8, 4, &mut rng));
        let mask = build_causal(8);
        let got = masked_attention(&q, &k, &v, &mask, 0.5).unwrap();
        let want = dense_reference(&q, &k, &v, &mask.densify(), 0.5);
        assert!(got.max_abs_diff(&want) < 1e-12);
    }

    #[test]
    fn empty_row_is_an_error() {
        let mask = MaskSpec::new(2, vec![vec![Interval::new(1, 2)], vec![]]).unwrap();
        let t = Tensor::zeros(&[2, 2]);
        assert_eq!(
            masked_attention(&t, &t, &t, &mask, 1.0),
            Err(KernelError::EmptyAttentionRow(0))
        );
    }

    #[test]
    fn ones_value_gives_ones_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (q, k) = (seeded(12, 5, &mut rng), seeded(12, 5, &mut rng));
        let ones = Tensor::full(&[12, 5], 1.0);
        let out = masked_attention(&q, &k, &ones, &build_causal(12), 1.3).unwrap();
        assert!(out.data().iter().all(|&x| (x - 1.0).abs() < 1e-12));
    }

    #[test]
    fn single_precision_mode_tracks_double() {
        // 32-bit mode: tolerance relaxed to 1e-5.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (q, k, v) = (seeded(10, 6, &mut rng), seeded(10, 6, &mut rng), seeded(10, 6, &mut rng));
        let mask = build_causal(10);
        let want = masked_attention(&q, &k, &v, &mask, 0.4).unwrap();
        let f = |t: &Tensor| t.data().iter().map(|&x| x as f32).collect::<Vec<f32>>();
        let got = masked_attention_rows(&f(&q), &f(&k), &f(&v), 6, &mask, 0.4f32).unwrap();
        for (a, b) in got.iter().zip(want.data()) {
            assert!((*a as f64 - b).abs() < 1e-5);
        }
    }
}
