//! Modality-agnostic top-k routing with auxiliary-loss-free balancing.
//!
//! Gate scores are a softmax over the candidate experts' logits. A
//! per-expert balance bias is added to the scores for *selection only*; the
//! mixing weights are the selected scores renormalized to sum to one. After
//! each step [`RouterState::update_bias`] nudges every bias by a fixed speed
//! toward the mean load. Nothing is ever dropped: every token is dispatched
//! to exactly `k` experts.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kernel::{softmax_row, Tensor};

#[derive(Debug, Error, PartialEq)]
pub enum MoeError {
    #[error("top-k {k} exceeds {experts} candidate experts (or is zero)")]
    KTooLarge { k: usize, experts: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("all expert loads are zero")]
    AllZeroLoads,
}

/// Bias update speed of the 8K pre-training stage.
pub const BIAS_SPEED_PRETRAIN: f64 = 1e-4;
/// Bias update speed during mid-training.
pub const BIAS_SPEED_MIDTRAIN: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouterState {
    /// `d × E` gate projection.
    pub gate: Tensor,
    /// Per-expert selection bias.
    pub bias: Vec<f64>,
    /// Bias update speed `u`.
    pub speed: f64,
}

/// One token's routing decision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenRoute {
    pub experts: Vec<usize>,
    pub weights: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DispatchPlan {
    pub num_experts: usize,
    pub per_token: Vec<TokenRoute>,
    /// Token indices assigned to each expert, ascending.
    pub per_expert: Vec<Vec<usize>>,
}

impl DispatchPlan {
    pub fn k(&self) -> usize {
        self.per_token.first().map_or(0, |t| t.experts.len())
    }

    pub fn loads(&self) -> Vec<f64> {
        self.per_expert.iter().map(|t| t.len() as f64).collect()
    }

    /// Builds a plan from per-token selections over `num_experts` experts.
    pub fn from_routes(num_experts: usize, per_token: Vec<TokenRoute>) -> Self {
        let mut per_expert = vec![Vec::new(); num_experts];
        for (t, route) in per_token.iter().enumerate() {
            for &e in &route.experts {
                per_expert[e].push(t);
            }
        }
        Self {
            num_experts,
            per_token,
            per_expert,
        }
    }
}

impl RouterState {
    pub fn new(gate: Tensor, speed: f64) -> Self {
        let e = gate.cols();
        Self {
            gate,
            bias: vec![0.0; e],
            speed,
        }
    }

    pub fn num_experts(&self) -> usize {
        self.gate.cols()
    }

    /// See [`update_bias`].
    pub fn update_bias(&mut self, loads: &[f64]) -> Result<(), MoeError> {
        update_bias(&mut self.bias, loads, self.speed)
    }

    /// Routes `tokens` (`n × d`) to their top-`k` experts.
    pub fn route(&self, tokens: &Tensor, k: usize) -> Result<DispatchPlan, MoeError> {
        if tokens.cols() != self.gate.rows() {
            return Err(MoeError::ShapeMismatch(format!(
                "token width {} vs gate rows {}",
                tokens.cols(),
                self.gate.rows()
            )));
        }
        let logits = tokens.matmul(&self.gate);
        let per_token = select_top_k(&logits, &self.bias, k)?;
        Ok(DispatchPlan::from_routes(self.num_experts(), per_token))
    }
}

/// `b_i ← b_i + u·sign(mean(loads) − loads_i)` with `sign(0) = 0`.
pub fn update_bias(bias: &mut [f64], loads: &[f64], speed: f64) -> Result<(), MoeError> {
    if loads.len() != bias.len() {
        return Err(MoeError::ShapeMismatch(format!("{} loads for {} experts", loads.len(), bias.len())));
    }
    let mean = loads.iter().sum::<f64>() / loads.len() as f64;
    for (b, &l) in bias.iter_mut().zip(loads) {
        let diff = mean - l;
        if diff > 0.0 {
            *b += speed;
        } else if diff < 0.0 {
            *b -= speed;
        }
    }
    Ok(())
}

/// Top-k selection over router logits (`n × E`): experts ranked by
/// `softmax(logits)_e + bias_e`, ties to the lower index; weights are the
/// selected softmax scores renormalized (bias excluded).
pub fn select_top_k(logits: &Tensor, bias: &[f64], k: usize) -> Result<Vec<TokenRoute>, MoeError> {
    let e = logits.cols();
    if k == 0 || k > e {
        return Err(MoeError::KTooLarge { k, experts: e });
    }
    if bias.len() != e {
        return Err(MoeError::ShapeMismatch(format!("{} biases for {e} experts", bias.len())));
    }
    let mut routes = Vec::with_capacity(logits.rows());
    let mut order: Vec<usize> = Vec::with_capacity(e);
    for i in 0..logits.rows() {
        let scores = softmax_row(logits.row(i));
        order.clear();
        order.extend(0..e);
        let key = |j: usize| scores[j] + bias[j];
        // Partial selection: k passes of a stable max scan.
        for slot in 0..k {
            let mut best = slot;
            for cand in slot + 1..e {
                let (c, b) = (order[cand], order[best]);
                if key(c) > key(b) || (key(c) == key(b) && c < b) {
                    best = cand;
                }
            }
            order.swap(slot, best);
        }
        let experts: Vec<usize> = order[..k].to_vec();
        let total: f64 = experts.iter().map(|&j| scores[j]).sum();
        let weights = experts.iter().map(|&j| scores[j] / total).collect();
        routes.push(TokenRoute { experts, weights });
    }
    Ok(routes)
}

/// Weighted per-token sum of expert outputs. `outputs[e]` holds one row per
/// token in `plan.per_expert[e]`, in that order.
pub fn combine(outputs: &[Tensor], plan: &DispatchPlan) -> Result<Tensor, MoeError> {
    if outputs.len() != plan.num_experts {
        return Err(MoeError::ShapeMismatch(format!(
            "{} expert outputs for {} experts",
            outputs.len(),
            plan.num_experts
        )));
    }
    let width = outputs
        .iter()
        .zip(&plan.per_expert)
        .find(|(_, toks)| !toks.is_empty())
        .map_or(0, |(o, _)| o.cols());
    for (e, (out, toks)) in outputs.iter().zip(&plan.per_expert).enumerate() {
        if toks.is_empty() {
            continue;
        }
        if out.shape().len() != 2 || out.rows() != toks.len() || out.cols() != width {
            return Err(MoeError::ShapeMismatch(format!(
                "expert {e}: output {:?} for {} tokens",
                out.shape(),
                toks.len()
            )));
        }
    }
    let n = plan.per_token.len();
    let mut result = Tensor::zeros(&[n, width]);
    // Row position of each token inside each expert's output block.
    let mut cursor = vec![0usize; plan.num_experts];
    let mut slot_row = vec![Vec::new(); n];
    for (e, toks) in plan.per_expert.iter().enumerate() {
        for &t in toks {
            slot_row[t].push((e, cursor[e]));
            cursor[e] += 1;
        }
    }
    for (t, route) in plan.per_token.iter().enumerate() {
        let acc = result.row_mut(t);
        for (&e, &w) in route.experts.iter().zip(&route.weights) {
            let &(_, r) = slot_row[t].iter().find(|(x, _)| *x == e).expect("plan is consistent");
            for (a, &v) in acc.iter_mut().zip(outputs[e].row(r)) {
                *a += w * v;
            }
        }
    }
    Ok(result)
}

/// `−Σ pᵢ log pᵢ / log N` over the load distribution; 1 means perfectly
/// balanced; equal loads (including a single expert) give exactly 1.
pub fn normalized_entropy(loads: &[f64]) -> Result<f64, MoeError> {
    let total: f64 = loads.iter().sum();
    if total <= 0.0 || loads.iter().any(|&l| l < 0.0) {
        return Err(MoeError::AllZeroLoads);
    }
    if loads.iter().all(|&l| l == loads[0]) {
        return Ok(1.0);
    }
    let h: f64 = loads
        .iter()
        .filter(|&&l| l > 0.0)
        .map(|&l| {
            let p = l / total;
            -p * p.ln()
        })
        .sum();
    Ok((h / (loads.len() as f64).ln()).clamp(0.0, 1.0))
}

/// The `⌈fraction·E⌉` most loaded experts, ties to the lower index.
pub fn top_share(loads: &[f64], fraction: f64) -> Vec<usize> {
    let count = ((fraction * loads.len() as f64).ceil() as usize).min(loads.len());
    let mut idx: Vec<usize> = (0..loads.len()).collect();
    idx.sort_by(|&a, &b| loads[b].total_cmp(&loads[a]).then(a.cmp(&b)));
    idx.truncate(count);
    idx.sort_unstable();
    idx
}

/// Intersection over union of the top-share expert sets of two load vectors.
pub fn top_share_iou(a: &[f64], b: &[f64], fraction: f64) -> Result<f64, MoeError> {
    if a.len() != b.len() {
        return Err(MoeError::ShapeMismatch(format!("{} vs {} experts", a.len(), b.len())));
    }
    let sa = top_share(a, fraction);
    let sb = top_share(b, fraction);
    let inter = sa.iter().filter(|e| sb.contains(e)).count();
    let union = sa.len() + sb.len() - inter;
    if union == 0 {
        return Ok(1.0);
    }
    Ok(inter as f64 / union as f64)
}

/// One normalized-entropy row of the routing report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeRow {
    pub layer: usize,
    pub tag: String,
    pub ne: f64,
}

pub const NE_CSV_HEADER: &str = "layer,tag,ne";
pub const IOU_CSV_HEADER: &str = "layer,tag_a,tag_b,iou";

pub fn ne_csv(rows: &[NeRow]) -> String {
    let mut s = String::from(NE_CSV_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(s, "{},{},{:.12}", r.layer, r.tag, r.ne);
    }
    s
}

/// IoU matrix rows `(layer, tag_a, tag_b, iou)` for every ordered tag pair.
pub fn iou_csv(layer_loads: &[(usize, Vec<(String, Vec<f64>)>)], fraction: f64) -> Result<String, MoeError> {
    let mut s = String::from(IOU_CSV_HEADER);
    s.push('\n');
    for (layer, tagged) in layer_loads {
        for (ta, la) in tagged {
            for (tb, lb) in tagged {
                let iou = top_share_iou(la, lb, fraction)?;
                let _ = writeln!(s, "{layer},{ta},{tb},{iou:.12}");
            }
        }
    }
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Full-sort brute force: order all experts by (−(score+bias), index).
    fn brute_force(logits: &Tensor, bias: &[f64], k: usize) -> Vec<TokenRoute> {
        (0..logits.rows())
            .map(|i| {
                let row = logits.row(i);
                let m = row.iter().copied().fold(f64::MIN, f64::max);
                let z: f64 = row.iter().map(|x| (x - m).exp()).sum();
                let s: Vec<f64> = row.iter().map(|x| (x - m).exp() / z).collect();
                let mut all: Vec<usize> = (0..row.len()).collect();
                all.sort_by(|&a, &b| (s[b] + bias[b]).partial_cmp(&(s[a] + bias[a])).unwrap().then(a.cmp(&b)));
                let experts = all[..k].to_vec();
                let tot: f64 = experts.iter().map(|&e| s[e]).sum();
                TokenRoute { weights: experts.iter().map(|&e| s[e] / tot).collect(), experts }
            })
            .collect()
    }

    fn router_from_scores(scores: &[f64], bias: Vec<f64>) -> (RouterState, Tensor) {
        // One-hot token through a gate whose logits are log-scores reproduces the scores.
        let e = scores.len();
        let gate = Tensor::matrix(1, e, scores.iter().map(|s| s.ln()).collect());
        let mut st = RouterState::new(gate, 0.0);
        st.bias = bias;
        (st, Tensor::matrix(1, 1, vec![1.0]))
    }

    #[test]
    fn trivial_routes() {
        let (st, x) = router_from_scores(&[0.9, 0.1], vec![0.0, 0.0]);
        let plan = st.route(&x, 1).unwrap();
        assert_eq!(plan.per_token[0].experts, vec![0]);
        assert_eq!(plan.per_token[0].weights, vec![1.0]);

        let (st, x) = router_from_scores(&[0.5, 0.5], vec![0.0, 0.1]);
        let plan = st.route(&x, 1).unwrap();
        assert_eq!(plan.per_token[0].experts, vec![1]);
        assert_eq!(plan.per_token[0].weights, vec![1.0]);

        let (st, x) = router_from_scores(&[0.5, 0.3, 0.2], vec![0.0, 0.0, 0.25]);
        let plan = st.route(&x, 2).unwrap();
        // Keys 0.5, 0.3, 0.45: bias promotes expert 2 past expert 1.
        assert_eq!(plan.per_token[0].experts, vec![0, 2]);
        let w = &plan.per_token[0].weights;
        assert!((w[0] - 0.5 / 0.7).abs() < 1e-12 && (w[1] - 0.2 / 0.7).abs() < 1e-12);
    }

    #[test]
    fn k_too_large() {
        let (st, x) = router_from_scores(&[0.5, 0.5], vec![0.0, 0.0]);
        assert_eq!(st.route(&x, 3), Err(MoeError::KTooLarge { k: 3, experts: 2 }));
        assert_eq!(st.route(&x, 0), Err(MoeError::KTooLarge { k: 0, experts: 2 }));
    }

    #[test]
    fn ties_break_to_lower_index() {
        let logits = Tensor::matrix(1, 4, vec![0.0; 4]);
        let r = select_top_k(&logits, &[0.0; 4], 2).unwrap();
        assert_eq!(r[0].experts, vec![0, 1]);
    }

    #[test]
    fn matches_brute_force_on_seeded_case() {
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let logits = Tensor::matrix(32, 16, (0..512).map(|_| rng.gen_range(-3.0..3.0)).collect());
        let bias: Vec<f64> = (0..16).map(|_| rng.gen_range(-0.05..0.05)).collect();
        let got = select_top_k(&logits, &bias, 4).unwrap();
        assert_eq!(got, brute_force(&logits, &bias, 4));
        let plan = DispatchPlan::from_routes(16, got);
        assert_eq!(plan.per_expert.iter().map(Vec::len).sum::<usize>(), 32 * 4);
    }

    #[test]
    fn bias_update_rules() {
        let mut st = RouterState::new(Tensor::zeros(&[2, 3]), 0.01);
        st.update_bias(&[5.0, 5.0, 5.0]).unwrap();
        assert_eq!(st.bias, vec![0.0; 3]);
        st.update_bias(&[9.0, 3.0, 3.0]).unwrap();
        assert_eq!(st.bias, vec![-0.01, 0.01, 0.01]);
        assert!(st.update_bias(&[1.0]).is_err());
    }

    #[test]
    fn skewed_scores_become_more_balanced() {
        // Persistent 90/10 skew: expert 0 gets logit boost so its score is ~0.9.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let e = 4;
        let n = 200;
        let mut logits = Tensor::zeros(&[n, e]);
        for i in 0..n {
            for j in 0..e {
                let boost = if j == 0 { (0.9f64 / 0.1 * (e - 1) as f64).ln() } else { 0.0 };
                logits.set(i, j, boost + rng.gen_range(-0.3..0.3));
            }
        }
        let mut bias = vec![0.0; e];
        let ratio = |bias: &[f64]| {
            let plan = DispatchPlan::from_routes(e, select_top_k(&logits, bias, 1).unwrap());
            let l = plan.loads();
            let max = l.iter().copied().fold(0.0, f64::max);
            let min = l.iter().copied().fold(f64::INFINITY, f64::min).max(1.0);
            (max / min, l)
        };
        let (r0, _) = ratio(&bias);
        let mut st = RouterState::new(Tensor::zeros(&[1, e]), 1e-3);
        for _ in 0..500 {
            let (_, loads) = ratio(&bias);
            st.bias = bias.clone();
            st.update_bias(&loads).unwrap();
            bias = st.bias.clone();
        }
        let (r1, _) = ratio(&bias);
        assert!(r1 < r0, "{r1} !< {r0}");
    }

    #[test]
    fn combine_cases() {
        let plan = DispatchPlan::from_routes(2, vec![
            TokenRoute { experts: vec![1], weights: vec![1.0] },
            TokenRoute { experts: vec![0], weights: vec![1.0] },
        ]);
        let outs = vec![Tensor::matrix(1, 2, vec![3.0, 4.0]), Tensor::matrix(1, 2, vec![1.0, 2.0])];
        assert_eq!(combine(&outs, &plan).unwrap().data(), &[1.0, 2.0, 3.0, 4.0]);

        // Two identity experts with weights summing to one return the input.
        let x = Tensor::matrix(2, 2, vec![0.5, -1.0, 2.0, 7.0]);
        let plan = DispatchPlan::from_routes(2, vec![
            TokenRoute { experts: vec![0, 1], weights: vec![0.3, 0.7] },
            TokenRoute { experts: vec![1, 0], weights: vec![0.9, 0.1] },
        ]);
        let got = combine(&[x.clone(), x.clone()], &plan).unwrap();
        assert!(got.max_abs_diff(&x) < 1e-15);

        let bad = vec![Tensor::zeros(&[1, 2]), Tensor::zeros(&[2, 2])];
        assert!(combine(&bad, &plan).is_err());
    }

    #[test]
    fn combine_matches_direct_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let (n, e, d, k) = (10, 5, 3, 2);
        let logits = Tensor::matrix(n, e, (0..n * e).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let plan = DispatchPlan::from_routes(e, select_top_k(&logits, &vec![0.0; e], k).unwrap());
        // Expert e computes row ↦ (e+1)·row + token index.
        let x = Tensor::matrix(n, d, (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let f = |ex: usize, t: usize, c: usize| (ex as f64 + 1.0) * x.get(t, c) + t as f64;
        let outs: Vec<Tensor> = plan
            .per_expert
            .iter()
            .enumerate()
            .map(|(ex, toks)| {
                Tensor::matrix(toks.len(), d, toks.iter().flat_map(|&t| (0..d).map(move |c| (t, c))).map(|(t, c)| f(ex, t, c)).collect())
            })
            .collect();
        let got = combine(&outs, &plan).unwrap();
        for t in 0..n {
            for c in 0..d {
                let r = &plan.per_token[t];
                let want: f64 = r.experts.iter().zip(&r.weights).map(|(&ex, &w)| w * f(ex, t, c)).sum();
                assert_eq!(got.get(t, c), want);
            }
        }
    }

    #[test]
    fn normalized_entropy_endpoints() {
        assert_eq!(normalized_entropy(&[3.0; 8]).unwrap(), 1.0);
        assert_eq!(normalized_entropy(&[0.0, 5.0, 0.0]).unwrap(), 0.0);
        assert!((normalized_entropy(&[0.5, 0.5, 0.0, 0.0]).unwrap() - 0.5).abs() < 1e-12);
        assert_eq!(normalized_entropy(&[0.0, 0.0]), Err(MoeError::AllZeroLoads));
    }

    #[test]
    fn iou_cases() {
        let a = [5.0, 4.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0];
        assert_eq!(top_share_iou(&a, &a, 0.25).unwrap(), 1.0);
        let b = [0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 5.0, 4.0];
        assert_eq!(top_share_iou(&a, &b, 0.25).unwrap(), 0.0);
        let c = [0.0, 5.0, 4.0, 1.0, 0.0, 0.0, 0.0, 0.0];
        assert!((top_share_iou(&a, &c, 0.25).unwrap() - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn report_csv_headers() {
        let s = ne_csv(&[NeRow { layer: 0, tag: "text".into(), ne: 0.5 }]);
        assert!(s.starts_with("layer,tag,ne\n0,text,0.5"));
        let m = iou_csv(&[(1, vec![("a".into(), vec![1.0, 0.0]), ("b".into(), vec![0.0, 1.0])])], 0.5).unwrap();
        assert_eq!(m.lines().count(), 5);
    }

    proptest! {
        #[test]
        fn conservation_and_shift_invariance(seed in 0u64..500, k in 1usize..5, shift in -2.0f64..2.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (n, e) = (12, 6);
            let logits = Tensor::matrix(n, e, (0..n * e).map(|_| rng.gen_range(-2.0..2.0)).collect());
            let bias: Vec<f64> = (0..e).map(|_| rng.gen_range(-0.1..0.1)).collect();
            let a = select_top_k(&logits, &bias, k).unwrap();
            let plan = DispatchPlan::from_routes(e, a.clone());
            prop_assert_eq!(plan.per_expert.iter().map(Vec::len).sum::<usize>(), n * k);
            for r in &a {
                prop_assert!((r.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                prop_assert!(r.weights.iter().all(|&w| w >= 0.0));
            }
            let shifted: Vec<f64> = bias.iter().map(|b| b + shift).collect();
            let b = select_top_k(&logits, &shifted, k).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert_eq!(&x.experts, &y.experts);
            }
        }

        #[test]
        fn routing_is_permutation_equivariant(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (n, e, k) = (9, 7, 3);
            let logits = Tensor::matrix(n, e, (0..n * e).map(|_| rng.gen_range(-2.0..2.0)).collect());
            let mut perm: Vec<usize> = (0..n).collect();
            for i in (1..n).rev() {
                perm.swap(i, rng.gen_range(0..=i));
            }
            let bias = vec![0.0; e];
            let a = select_top_k(&logits, &bias, k).unwrap();
            let b = select_top_k(&logits.select_rows(&perm), &bias, k).unwrap();
            for (pos, &src) in perm.iter().enumerate() {
                prop_assert_eq!(&b[pos], &a[src]);
            }
        }

        #[test]
        fn entropy_is_scale_invariant(loads in proptest::collection::vec(0.0f64..10.0, 2..12), s in 0.01f64..100.0) {
            prop_assume!(loads.iter().sum::<f64>() > 0.0);
            let scaled: Vec<f64> = loads.iter().map(|l| l * s).collect();
            let a = normalized_entropy(&loads).unwrap();
            let b = normalized_entropy(&scaled).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&a));
        }
    }
}
