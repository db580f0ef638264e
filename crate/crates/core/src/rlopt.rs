//! Post-training optimization: calibrated clipped policy objectives (token,
//! sequence and mixed granularity), the well-learned positive sample mask,
//! annealed hints, and a discrete-time rollout scheduling simulator.
//!
//! Every objective is evaluated together with its analytic gradient with
//! respect to the current-policy per-token log-probabilities. Use
//! [`chain_to_logits`] to carry that gradient to the policy logits.

use std::cmp::Reverse;
use std::collections::BinaryHeap;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kernel::{log_softmax_row, softmax_row, Tensor};

#[derive(Debug, Error, PartialEq)]
pub enum RlError {
    #[error("invalid rollout: {0}")]
    InvalidRollout(String),
    #[error("invalid rollout group: {0}")]
    InvalidGroup(String),
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("invalid workload: {0}")]
    InvalidWorkload(String),
}

/// Standard-deviation floor for group-relative advantages.
pub const ADVANTAGE_STD_FLOOR: f64 = 1e-6;

/// One sampled response with its per-token log-probabilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rollout {
    /// `log π_infer(y_j | θ_old)`.
    pub logp_infer_old: Vec<f64>,
    /// `log π_train(y_j | θ_old)`.
    pub logp_train_old: Vec<f64>,
    /// `log π_train(y_j | θ)`, the only differentiated quantity.
    pub logp: Vec<f64>,
    pub reward: f64,
    /// Mean per-token policy entropy under the current policy.
    pub entropy: f64,
}

impl Rollout {
    pub fn new(
        logp_infer_old: Vec<f64>,
        logp_train_old: Vec<f64>,
        logp: Vec<f64>,
        reward: f64,
        entropy: f64,
    ) -> Result<Self, RlError> {
        let n = logp.len();
        if n == 0 {
            return Err(RlError::InvalidRollout("empty response".into()));
        }
        if logp_infer_old.len() != n || logp_train_old.len() != n {
            return Err(RlError::InvalidRollout(format!(
                "log-prob lengths {} / {} / {n} differ",
                logp_infer_old.len(),
                logp_train_old.len()
            )));
        }
        let all = logp_infer_old.iter().chain(&logp_train_old).chain(&logp);
        if !all.copied().chain([reward, entropy]).all(f64::is_finite) {
            return Err(RlError::InvalidRollout("non-finite value".into()));
        }
        Ok(Self { logp_infer_old, logp_train_old, logp, reward, entropy })
    }

    pub fn len(&self) -> usize {
        self.logp.len()
    }

    pub fn is_empty(&self) -> bool {
        self.logp.is_empty()
    }

    /// Per-token `π_train(θ_old) / π_infer(θ_old)`.
    pub fn calibration_ratios(&self) -> Vec<f64> {
        self.logp_train_old.iter().zip(&self.logp_infer_old).map(|(t, i)| (t - i).exp()).collect()
    }

    /// Length-normalized sequence calibration ratio (geometric mean of the
    /// token ratios).
    pub fn sequence_calibration(&self) -> f64 {
        let n = self.len() as f64;
        (self.logp_train_old.iter().zip(&self.logp_infer_old).map(|(t, i)| t - i).sum::<f64>() / n).exp()
    }
}

/// `G` rollouts for one query with their advantages and group accuracy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutGroup {
    pub query: usize,
    pub rollouts: Vec<Rollout>,
    pub advantages: Vec<f64>,
    /// Fraction of rollouts with positive reward.
    pub accuracy: f64,
}

impl RolloutGroup {
    /// Group with group-relative advantages computed from the rewards.
    pub fn new(query: usize, rollouts: Vec<Rollout>) -> Result<Self, RlError> {
        let rewards: Vec<f64> = rollouts.iter().map(|r| r.reward).collect();
        let advantages = group_advantages(&rewards);
        Self::with_advantages(query, rollouts, advantages)
    }

    pub fn with_advantages(query: usize, rollouts: Vec<Rollout>, advantages: Vec<f64>) -> Result<Self, RlError> {
        if rollouts.len() < 2 {
            return Err(RlError::InvalidGroup(format!("group size {} < 2", rollouts.len())));
        }
        if advantages.len() != rollouts.len() || !advantages.iter().all(|a| a.is_finite()) {
            return Err(RlError::InvalidGroup("one finite advantage per rollout required".into()));
        }
        let positive = rollouts.iter().filter(|r| r.reward > 0.0).count();
        let accuracy = positive as f64 / rollouts.len() as f64;
        Ok(Self { query, rollouts, advantages, accuracy })
    }

    pub fn size(&self) -> usize {
        self.rollouts.len()
    }
}

/// `(rᵢ − mean) / max(std, floor)` with the population standard deviation.
pub fn group_advantages(rewards: &[f64]) -> Vec<f64> {
    if rewards.is_empty() {
        return Vec::new();
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt().max(ADVANTAGE_STD_FLOOR);
    rewards.iter().map(|r| (r - mean) / std).collect()
}

/// Calibration band `[α, β]` and clip range `ε`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MiscParams {
    pub alpha: f64,
    pub beta: f64,
    pub epsilon: f64,
}

impl MiscParams {
    pub fn new(alpha: f64, beta: f64, epsilon: f64) -> Result<Self, RlError> {
        if !(alpha > 0.0 && alpha <= 1.0 && beta >= 1.0 && beta.is_finite()) {
            return Err(RlError::InvalidParams(format!("need 0 < α ≤ 1 ≤ β, got [{alpha}, {beta}]")));
        }
        if !(epsilon > 0.0 && epsilon < 1.0) {
            return Err(RlError::InvalidParams(format!("need ε in (0, 1), got {epsilon}")));
        }
        Ok(Self { alpha, beta, epsilon })
    }
}

/// Well-learned mask parameters. `epsilon` is the clip range of the
/// sequence surrogate the mask is applied to.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WpsmParams {
    pub eta: f64,
    pub tau: f64,
    pub alpha_mask: f64,
    pub epsilon: f64,
}

impl WpsmParams {
    pub fn new(eta: f64, tau: f64, alpha_mask: f64, epsilon: f64) -> Result<Self, RlError> {
        if !(0.0..=1.0).contains(&alpha_mask) {
            return Err(RlError::InvalidParams(format!("α_mask {alpha_mask} outside [0, 1]")));
        }
        if !(epsilon > 0.0 && epsilon < 1.0) {
            return Err(RlError::InvalidParams(format!("need ε in (0, 1), got {epsilon}")));
        }
        if !eta.is_finite() || !tau.is_finite() {
            return Err(RlError::InvalidParams("non-finite threshold".into()));
        }
        Ok(Self { eta, tau, alpha_mask, epsilon })
    }

    /// `M` for one rollout of a group with accuracy `acc`.
    pub fn mask(&self, entropy: f64, acc: f64) -> f64 {
        if entropy < self.eta && acc > self.tau {
            self.alpha_mask
        } else {
            0.0
        }
    }
}

/// `k` inside the closed band `[α, β]`, else 0.
pub fn mask_band(k: f64, alpha: f64, beta: f64) -> f64 {
    if k >= alpha && k <= beta {
        k
    } else {
        0.0
    }
}

/// Objective value and `∂J/∂ log π_train(y_{i,j} | θ)` per rollout and token.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveEval {
    pub value: f64,
    pub grad_logp: Vec<Vec<f64>>,
}

/// `min(x·A, clip(x, 1−ε, 1+ε)·A)` and its derivative in `x`.
fn clipped_surrogate(x: f64, adv: f64, eps: f64) -> (f64, f64) {
    let clipped = x.clamp(1.0 - eps, 1.0 + eps);
    if x * adv <= clipped * adv {
        (x * adv, adv)
    } else {
        (clipped * adv, 0.0)
    }
}

/// Sequence importance ratio `exp(mean_j(log π(θ) − log π(θ_old)))`.
pub fn gspo_seq_ratio(rollout: &Rollout) -> f64 {
    let n = rollout.len() as f64;
    (rollout.logp.iter().zip(&rollout.logp_train_old).map(|(a, b)| a - b).sum::<f64>() / n).exp()
}

/// Token-level calibrated clipped objective.
pub fn grpo_icepop_objective(group: &RolloutGroup, params: &MiscParams) -> ObjectiveEval {
    let g = group.size() as f64;
    let mut value = 0.0;
    let mut grad_logp = Vec::with_capacity(group.size());
    for (rollout, &adv) in group.rollouts.iter().zip(&group.advantages) {
        let n = rollout.len() as f64;
        let calib = rollout.calibration_ratios();
        let mut per_token = 0.0;
        let mut grads = Vec::with_capacity(rollout.len());
        for j in 0..rollout.len() {
            let m = mask_band(calib[j], params.alpha, params.beta);
            if m == 0.0 {
                grads.push(0.0);
                continue;
            }
            let r = (rollout.logp[j] - rollout.logp_train_old[j]).exp();
            let (f, df) = clipped_surrogate(r, adv, params.epsilon);
            per_token += m * f;
            grads.push(m * df * r / (n * g));
        }
        value += per_token / n;
        grad_logp.push(grads);
    }
    ObjectiveEval { value: value / g, grad_logp }
}

/// Shared sequence-level form: `(1/G) Σᵢ wᵢ·min(sᵢÂᵢ, clip(sᵢ)Âᵢ)`.
fn sequence_objective(group: &RolloutGroup, epsilon: f64, factor: impl Fn(&Rollout) -> f64) -> ObjectiveEval {
    let g = group.size() as f64;
    let mut value = 0.0;
    let mut grad_logp = Vec::with_capacity(group.size());
    for (rollout, &adv) in group.rollouts.iter().zip(&group.advantages) {
        let w = factor(rollout);
        if w == 0.0 {
            grad_logp.push(vec![0.0; rollout.len()]);
            continue;
        }
        let s = gspo_seq_ratio(rollout);
        let (f, df) = clipped_surrogate(s, adv, epsilon);
        value += w * f;
        let per_token = w * df * s / (rollout.len() as f64 * g);
        grad_logp.push(vec![per_token; rollout.len()]);
    }
    ObjectiveEval { value: value / g, grad_logp }
}

/// Sequence-level objective gated by the length-normalized calibration ratio.
pub fn gspo_icepop_objective(group: &RolloutGroup, params: &MiscParams) -> ObjectiveEval {
    sequence_objective(group, params.epsilon, |r| {
        mask_band(r.sequence_calibration(), params.alpha, params.beta)
    })
}

/// Sequence-level objective gated on *every* token calibration ratio lying
/// in the band; surviving rollouts are weighted by the geometric mean of
/// their token ratios.
pub fn mixed_icepop_objective(group: &RolloutGroup, params: &MiscParams) -> ObjectiveEval {
    sequence_objective(group, params.epsilon, |r| {
        let gate = r.calibration_ratios().iter().all(|&k| mask_band(k, params.alpha, params.beta) != 0.0);
        if gate {
            r.sequence_calibration()
        } else {
            0.0
        }
    })
}

/// Sequence-level objective with well-learned rollouts scaled by `1 − M`.
pub fn wpsm_objective(group: &RolloutGroup, params: &WpsmParams) -> ObjectiveEval {
    sequence_objective(group, params.epsilon, |r| 1.0 - params.mask(r.entropy, group.accuracy))
}

/// Selects one of the objectives by name.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Objective {
    GrpoIcepop(MiscParams),
    GspoIcepop(MiscParams),
    MixedIcepop(MiscParams),
    Wpsm(WpsmParams),
}

impl Objective {
    pub fn name(&self) -> &'static str {
        match self {
            Objective::GrpoIcepop(_) => "grpo_icepop",
            Objective::GspoIcepop(_) => "gspo_icepop",
            Objective::MixedIcepop(_) => "mixed_icepop",
            Objective::Wpsm(_) => "wpsm",
        }
    }

    pub fn evaluate(&self, group: &RolloutGroup) -> ObjectiveEval {
        match self {
            Objective::GrpoIcepop(p) => grpo_icepop_objective(group, p),
            Objective::GspoIcepop(p) => gspo_icepop_objective(group, p),
            Objective::MixedIcepop(p) => mixed_icepop_objective(group, p),
            Objective::Wpsm(p) => wpsm_objective(group, p),
        }
    }
}

/// Log-probabilities of `tokens` under row-wise softmax of `logits`
/// (`|y| × V`).
pub fn logp_from_logits(logits: &Tensor, tokens: &[usize]) -> Vec<f64> {
    tokens.iter().enumerate().map(|(j, &y)| log_softmax_row(logits.row(j))[y]).collect()
}

/// Mean per-token entropy of the row-wise softmax of `logits`.
pub fn mean_token_entropy(logits: &Tensor) -> f64 {
    let rows = logits.rows();
    let total: f64 = (0..rows)
        .map(|j| {
            let p = softmax_row(logits.row(j));
            -p.iter().filter(|&&q| q > 0.0).map(|q| q * q.ln()).sum::<f64>()
        })
        .sum();
    total / rows as f64
}

/// Carries `∂J/∂ log p(y_j)` to the logits: `(onehot(y_j) − softmax_j)·g_j`.
pub fn chain_to_logits(logits: &Tensor, tokens: &[usize], grad_logp: &[f64]) -> Tensor {
    let mut out = Tensor::zeros(logits.shape());
    for (j, (&y, &g)) in tokens.iter().zip(grad_logp).enumerate() {
        if g == 0.0 {
            continue;
        }
        let p = softmax_row(logits.row(j));
        let row = out.row_mut(j);
        for (v, pv) in p.iter().enumerate() {
            row[v] = -pv * g;
        }
        row[y] += g;
    }
    out
}

/// Annealed hint fraction `p_initial · exp(−γ·t·pass_initial)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HintParams {
    pub p_initial: f64,
    pub gamma: f64,
}

pub fn hint_prob(params: &HintParams, t: u64, pass_initial: f64) -> f64 {
    params.p_initial * (-params.gamma * t as f64 * pass_initial).exp()
}

/// Query followed by the first `⌈p·|think|⌉` think tokens.
pub fn build_hinted_query<T: Clone>(query: &[T], think: &[T], p: f64) -> Vec<T> {
    let take = ((p.clamp(0.0, 1.0) * think.len() as f64).ceil() as usize).min(think.len());
    query.iter().chain(&think[..take]).cloned().collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchedulePolicy {
    Sync,
    April,
    Urb,
}

impl SchedulePolicy {
    pub const ALL: [SchedulePolicy; 3] = [SchedulePolicy::Sync, SchedulePolicy::April, SchedulePolicy::Urb];

    pub fn tag(self) -> &'static str {
        match self {
            SchedulePolicy::Sync => "sync",
            SchedulePolicy::April => "april",
            SchedulePolicy::Urb => "urb",
        }
    }
}

/// Inference and training pool capacities in queries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Pools {
    /// Training batch size `Ω_BS`.
    pub batch: usize,
    /// Buffer size `N`.
    pub buffer: usize,
}

impl Pools {
    /// Inference pool capacity `Ω_RBS = Ω_BS·N`.
    pub fn inference_capacity(&self) -> usize {
        self.batch * self.buffer
    }

    pub fn training_capacity(&self) -> usize {
        self.batch
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationTrace {
    pub iteration: usize,
    pub trained_queries: Vec<usize>,
    /// Mean true length over every response of the trained queries.
    pub trained_mean_length: f64,
    /// Empty slot-steps since the previous update.
    pub idle_slot_steps: u64,
    /// Step at which this update happens.
    pub wall_steps: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceMetrics {
    pub policy: SchedulePolicy,
    pub slots: usize,
    pub iterations: Vec<IterationTrace>,
    pub total_idle_slot_steps: u64,
    pub total_wall_steps: u64,
}

pub const TRACE_CSV_HEADER: &str = "iteration,policy,trained-mean-length,idle-slot-steps,wall-steps";

impl TraceMetrics {
    pub fn to_csv_rows(&self) -> String {
        let mut out = String::new();
        for it in &self.iterations {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                it.iteration,
                self.policy.tag(),
                it.trained_mean_length,
                it.idle_slot_steps,
                it.wall_steps
            );
        }
        out
    }
}

/// CSV with [`TRACE_CSV_HEADER`] and one row per iteration of every trace.
pub fn traces_csv(traces: &[TraceMetrics]) -> String {
    let mut out = format!("{TRACE_CSV_HEADER}\n");
    for t in traces {
        out.push_str(&t.to_csv_rows());
    }
    out
}

/// Discrete-time rollout scheduling over `Ω_BS·N·G` generation slots, one
/// token per occupied slot per step, zero update time.
///
/// `workload[q]` holds the true response lengths of query `q`; iteration `t`
/// is assigned the queries `[t·Ω_BS, (t+1)·Ω_BS)`. `sync` launches one full
/// pool of `Ω_BS·N` queries at a time and waits for all of it. `april` and
/// `urb` refill a slot as soon as it frees, in query order; `urb` updates on
/// the assigned group, `april` on the next `Ω_BS` queries to complete.
/// `seed` orders `april` completions that land on the same step.
pub fn simulate_rollout_scheduling(
    policy: SchedulePolicy,
    workload: &[Vec<usize>],
    pools: Pools,
    group: usize,
    seed: u64,
) -> Result<TraceMetrics, RlError> {
    validate_workload(workload, pools, group)?;
    let slots = pools.inference_capacity() * group;
    let jobs: Vec<(usize, u64)> = workload
        .iter()
        .enumerate()
        .flat_map(|(q, lens)| lens.iter().map(move |&l| (q, l as u64)))
        .collect();
    let intervals = match policy {
        SchedulePolicy::Sync => barrier_schedule(workload, pools.inference_capacity()),
        SchedulePolicy::April | SchedulePolicy::Urb => list_schedule(&jobs, slots),
    };
    let mut finish = vec![0u64; workload.len()];
    for (&(q, _), &(_, end)) in jobs.iter().zip(&intervals) {
        finish[q] = finish[q].max(end);
    }

    let batches: Vec<Vec<usize>> = match policy {
        SchedulePolicy::Sync | SchedulePolicy::Urb => {
            (0..workload.len()).collect::<Vec<_>>().chunks(pools.batch).map(<[usize]>::to_vec).collect()
        }
        SchedulePolicy::April => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut order: Vec<(u64, u64, usize)> = finish.iter().enumerate().map(|(q, &f)| (f, rng.gen(), q)).collect();
            order.sort_unstable();
            order.chunks(pools.batch).map(|c| c.iter().map(|&(_, _, q)| q).collect()).collect()
        }
    };

    let mut iterations = Vec::with_capacity(batches.len());
    let mut prev = 0u64;
    for (t, queries) in batches.into_iter().enumerate() {
        let ready = queries.iter().map(|&q| finish[q]).max().unwrap_or(0).max(prev);
        let busy: u64 = intervals.iter().map(|&(s, e)| e.min(ready).saturating_sub(s.max(prev))).sum();
        let lens: Vec<usize> = queries.iter().flat_map(|&q| workload[q].iter().copied()).collect();
        iterations.push(IterationTrace {
            iteration: t,
            trained_mean_length: lens.iter().sum::<usize>() as f64 / lens.len() as f64,
            trained_queries: queries,
            idle_slot_steps: slots as u64 * (ready - prev) - busy,
            wall_steps: ready,
        });
        prev = ready;
    }
    let total_wall_steps = intervals.iter().map(|&(_, e)| e).max().unwrap_or(0);
    let work: u64 = jobs.iter().map(|&(_, l)| l).sum();
    Ok(TraceMetrics {
        policy,
        slots,
        iterations,
        total_idle_slot_steps: slots as u64 * total_wall_steps - work,
        total_wall_steps,
    })
}

fn validate_workload(workload: &[Vec<usize>], pools: Pools, group: usize) -> Result<(), RlError> {
    if pools.batch == 0 || pools.buffer == 0 || group == 0 {
        return Err(RlError::InvalidWorkload("Ω_BS, N and G must be positive".into()));
    }
    for (q, lens) in workload.iter().enumerate() {
        if lens.len() != group {
            return Err(RlError::InvalidWorkload(format!("query {q} has {} responses, expected {group}", lens.len())));
        }
        if lens.contains(&0) {
            return Err(RlError::InvalidWorkload(format!("query {q} has a zero-length response")));
        }
    }
    Ok(())
}

/// Each job takes the earliest-free slot, in list order.
fn list_schedule(jobs: &[(usize, u64)], slots: usize) -> Vec<(u64, u64)> {
    let mut free: BinaryHeap<Reverse<(u64, usize)>> = (0..slots).map(|s| Reverse((0, s))).collect();
    jobs.iter()
        .map(|&(_, len)| {
            let Reverse((start, slot)) = free.pop().expect("at least one slot");
            free.push(Reverse((start + len, slot)));
            (start, start + len)
        })
        .collect()
}

/// Pool batches of `pool` queries start together once the previous batch
/// has fully finished.
fn barrier_schedule(workload: &[Vec<usize>], pool: usize) -> Vec<(u64, u64)> {
    let mut out = Vec::new();
    let mut start = 0u64;
    for batch in workload.chunks(pool) {
        let mut end = start;
        for &l in batch.iter().flatten() {
            out.push((start, start + l as u64));
            end = end.max(start + l as u64);
        }
        start = end;
    }
    out
}

/// Shape of a synthetic long-tail workload.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LongTailParams {
    pub queries: usize,
    pub group: usize,
    pub base_length: usize,
    pub tail_length: usize,
    /// Uniform per-response jitter half-width.
    pub jitter: usize,
}

impl Default for LongTailParams {
    fn default() -> Self {
        Self { queries: 24, group: 4, base_length: 100, tail_length: 1000, jitter: 20 }
    }
}

/// One randomly placed long query among base-length queries.
pub fn long_tail_workload(params: &LongTailParams, seed: u64) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ids: Vec<usize> = (0..params.queries).collect();
    ids.shuffle(&mut rng);
    let tail = ids.first().copied();
    (0..params.queries)
        .map(|q| {
            let base = if Some(q) == tail { params.tail_length } else { params.base_length };
            (0..params.group)
                .map(|_| {
                    let lo = base.saturating_sub(params.jitter).max(1);
                    rng.gen_range(lo..=base + params.jitter)
                })
                .collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::grad_check;
    use proptest::prelude::*;
    use rand::Rng;

    fn misc() -> MiscParams {
        MiscParams::new(0.5, 2.0, 0.2).unwrap()
    }

    /// Rollouts with mild train/infer mismatch and policy drift.
    fn seeded_group(seed: u64, g: usize, max_len: usize, drift: f64, mismatch: f64) -> RolloutGroup {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rollouts = (0..g)
            .map(|_| {
                let n = rng.gen_range(1..=max_len);
                let old: Vec<f64> = (0..n).map(|_| rng.gen_range(-3.0..-0.05)).collect();
                let infer = old.iter().map(|o| o + rng.gen_range(-mismatch..=mismatch)).collect();
                let cur = old.iter().map(|o| o + rng.gen_range(-drift..=drift)).collect();
                let reward = if rng.gen_bool(0.5) { 1.0 } else { 0.0 };
                Rollout::new(infer, old, cur, reward, rng.gen_range(0.1..2.0)).unwrap()
            })
            .collect();
        let advantages = (0..g).map(|_| rng.gen_range(-1.5..1.5)).collect();
        RolloutGroup::with_advantages(seed as usize, rollouts, advantages).unwrap()
    }

    /// Objectives written directly from the ratio definitions, in
    /// probability space.
    mod oracle {
        use super::super::*;

        fn surrogate(x: f64, a: f64, eps: f64) -> f64 {
            let lo = 1.0 - eps;
            let hi = 1.0 + eps;
            let c = if x < lo { lo } else if x > hi { hi } else { x };
            (x * a).min(c * a)
        }

        fn band(k: f64, p: &MiscParams) -> f64 {
            if p.alpha <= k && k <= p.beta { k } else { 0.0 }
        }

        fn seq_ratio(num: &[f64], den: &[f64]) -> f64 {
            let prod: f64 = num.iter().zip(den).map(|(a, b)| a.exp() / b.exp()).product();
            prod.powf(1.0 / num.len() as f64)
        }

        pub fn grpo(g: &RolloutGroup, p: &MiscParams) -> f64 {
            let mut total = 0.0;
            for (r, a) in g.rollouts.iter().zip(&g.advantages) {
                let mut inner = 0.0;
                for j in 0..r.len() {
                    let calib = r.logp_train_old[j].exp() / r.logp_infer_old[j].exp();
                    let ratio = r.logp[j].exp() / r.logp_train_old[j].exp();
                    inner += band(calib, p) * surrogate(ratio, *a, p.epsilon);
                }
                total += inner / r.len() as f64;
            }
            total / g.size() as f64
        }

        pub fn gspo(g: &RolloutGroup, p: &MiscParams) -> f64 {
            let mut total = 0.0;
            for (r, a) in g.rollouts.iter().zip(&g.advantages) {
                let calib = seq_ratio(&r.logp_train_old, &r.logp_infer_old);
                let s = seq_ratio(&r.logp, &r.logp_train_old);
                total += band(calib, p) * surrogate(s, *a, p.epsilon);
            }
            total / g.size() as f64
        }

        pub fn mixed(g: &RolloutGroup, p: &MiscParams) -> f64 {
            let mut total = 0.0;
            for (r, a) in g.rollouts.iter().zip(&g.advantages) {
                let ks: Vec<f64> = (0..r.len()).map(|j| r.logp_train_old[j].exp() / r.logp_infer_old[j].exp()).collect();
                if ks.iter().any(|&k| band(k, p) == 0.0) {
                    continue;
                }
                let geo = ks.iter().product::<f64>().powf(1.0 / ks.len() as f64);
                let s = seq_ratio(&r.logp, &r.logp_train_old);
                total += geo * surrogate(s, *a, p.epsilon);
            }
            total / g.size() as f64
        }

        pub fn wpsm(g: &RolloutGroup, p: &WpsmParams) -> f64 {
            let mut total = 0.0;
            for (r, a) in g.rollouts.iter().zip(&g.advantages) {
                let m = if r.entropy < p.eta && g.accuracy > p.tau { p.alpha_mask } else { 0.0 };
                let s = seq_ratio(&r.logp, &r.logp_train_old);
                total += (1.0 - m) * surrogate(s, *a, p.epsilon);
            }
            total / g.size() as f64
        }
    }

    #[test]
    fn mask_band_cases() {
        assert_eq!(mask_band(1.0, 0.5, 2.0), 1.0);
        assert_eq!(mask_band(3.0, 0.5, 2.0), 0.0);
        assert_eq!(mask_band(2.0, 0.5, 2.0), 2.0);
        assert_eq!(mask_band(0.5, 0.5, 2.0), 0.5);
        assert_eq!(mask_band(0.4999, 0.5, 2.0), 0.0);
    }

    #[test]
    fn params_validation() {
        assert!(MiscParams::new(0.0, 2.0, 0.2).is_err());
        assert!(MiscParams::new(1.2, 2.0, 0.2).is_err());
        assert!(MiscParams::new(0.5, 0.9, 0.2).is_err());
        assert!(MiscParams::new(0.5, 2.0, 1.0).is_err());
        assert!(WpsmParams::new(0.5, 0.5, 1.5, 0.2).is_err());
        assert!(Rollout::new(vec![0.0], vec![0.0, 0.0], vec![0.0], 1.0, 0.0).is_err());
        assert!(Rollout::new(vec![], vec![], vec![], 1.0, 0.0).is_err());
    }

    #[test]
    fn advantages_are_standardized() {
        let a = group_advantages(&[1.0, 0.0, 0.0, 1.0]);
        assert_eq!(a, vec![1.0, -1.0, -1.0, 1.0]);
        assert_eq!(group_advantages(&[1.0, 1.0, 1.0]), vec![0.0; 3]);
    }

    #[test]
    fn seq_ratio_cases() {
        let r = Rollout::new(vec![0.0; 2], vec![-1.0, -2.0], vec![-1.0, -2.0], 0.0, 0.0).unwrap();
        assert_eq!(gspo_seq_ratio(&r), 1.0);
        let r = Rollout::new(vec![0.0; 2], vec![-2.0, -1.0], vec![-2.0 + 4f64.ln(), -1.0], 0.0, 0.0).unwrap();
        assert!((gspo_seq_ratio(&r) - 2.0).abs() < 1e-15);
    }

    #[test]
    fn seq_ratio_matches_product_oracle() {
        for seed in 0..50 {
            let g = seeded_group(seed, 4, 16, 0.3, 0.0);
            for r in &g.rollouts {
                let prod: f64 = r.logp.iter().zip(&r.logp_train_old).map(|(a, b)| a.exp() / b.exp()).product();
                let oracle = prod.powf(1.0 / r.len() as f64);
                assert!((gspo_seq_ratio(r) - oracle).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn objectives_match_direct_oracles() {
        let wp = WpsmParams::new(1.0, 0.4, 0.7, 0.2).unwrap();
        for seed in 0..100 {
            let g = seeded_group(seed, 4, 16, 0.4, 0.8);
            let p = misc();
            assert!((grpo_icepop_objective(&g, &p).value - oracle::grpo(&g, &p)).abs() < 1e-12);
            assert!((gspo_icepop_objective(&g, &p).value - oracle::gspo(&g, &p)).abs() < 1e-12);
            assert!((mixed_icepop_objective(&g, &p).value - oracle::mixed(&g, &p)).abs() < 1e-12);
            assert!((wpsm_objective(&g, &wp).value - oracle::wpsm(&g, &wp)).abs() < 1e-12);
        }
    }

    #[test]
    fn no_mismatch_on_policy_gives_mean_advantage() {
        for seed in 0..20 {
            let mut g = seeded_group(seed, 4, 16, 0.0, 0.0);
            for r in &mut g.rollouts {
                r.logp_infer_old = r.logp_train_old.clone();
                r.logp = r.logp_train_old.clone();
            }
            let mean = g.advantages.iter().sum::<f64>() / 4.0;
            for v in [
                grpo_icepop_objective(&g, &misc()).value,
                gspo_icepop_objective(&g, &misc()).value,
                mixed_icepop_objective(&g, &misc()).value,
            ] {
                assert!((v - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn out_of_band_token_has_zero_gradient() {
        let mut g = seeded_group(3, 4, 8, 0.1, 0.0);
        g.rollouts[1].logp_infer_old[0] = g.rollouts[1].logp_train_old[0] - 2.0;
        let e = grpo_icepop_objective(&g, &misc());
        assert_eq!(e.grad_logp[1][0], 0.0);
        assert!(e.grad_logp[0].iter().any(|&x| x != 0.0));
        let m = mixed_icepop_objective(&g, &misc());
        assert!(m.grad_logp[1].iter().all(|&x| x == 0.0));
    }

    #[test]
    fn out_of_band_sequence_contributes_nothing() {
        let mut g = seeded_group(4, 3, 6, 0.1, 0.0);
        let full = gspo_icepop_objective(&g, &misc()).value;
        let r = &mut g.rollouts[2];
        for j in 0..r.len() {
            r.logp_infer_old[j] = r.logp_train_old[j] - 1.0;
        }
        let cut = gspo_icepop_objective(&g, &misc());
        assert!(cut.grad_logp[2].iter().all(|&x| x == 0.0));
        let only_two = {
            let mut h = g.clone();
            h.advantages[2] = 0.0;
            gspo_icepop_objective(&h, &misc()).value
        };
        assert_eq!(cut.value, only_two);
        assert!(full != cut.value);
    }

    #[test]
    fn single_token_groups_collapse_all_three() {
        for seed in 0..30 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let rollouts = (0..4)
                .map(|_| {
                    let old = rng.gen_range(-3.0..-0.1);
                    let cur = old + rng.gen_range(-0.5..0.5);
                    Rollout::new(vec![old], vec![old], vec![cur], 0.0, 1.0).unwrap()
                })
                .collect();
            let adv = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let g = RolloutGroup::with_advantages(0, rollouts, adv).unwrap();
            let a = grpo_icepop_objective(&g, &misc());
            let b = gspo_icepop_objective(&g, &misc());
            let c = mixed_icepop_objective(&g, &misc());
            assert!((a.value - b.value).abs() < 1e-12 && (b.value - c.value).abs() < 1e-12);
            for i in 0..4 {
                assert!((a.grad_logp[i][0] - b.grad_logp[i][0]).abs() < 1e-12);
                assert!((b.grad_logp[i][0] - c.grad_logp[i][0]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn wpsm_full_and_half_masks() {
        let mut g = seeded_group(9, 4, 6, 0.1, 0.0);
        for r in &mut g.rollouts {
            r.reward = 1.0;
        }
        g.rollouts[0].reward = 0.0;
        g.accuracy = 0.75;
        g.rollouts[1].entropy = 0.1;
        for i in [0, 2, 3] {
            g.rollouts[i].entropy = 1.5;
        }
        let full = WpsmParams::new(0.5, 0.5, 1.0, 0.2).unwrap();
        let half = WpsmParams::new(0.5, 0.5, 0.5, 0.2).unwrap();
        let none = WpsmParams::new(0.5, 0.5, 0.0, 0.2).unwrap();
        let ef = wpsm_objective(&g, &full);
        let eh = wpsm_objective(&g, &half);
        let en = wpsm_objective(&g, &none);
        assert!(ef.grad_logp[1].iter().all(|&x| x == 0.0));
        for j in 0..g.rollouts[1].len() {
            assert!((eh.grad_logp[1][j] / en.grad_logp[1][j] - 0.5).abs() < 1e-12);
        }
        assert_eq!(ef.grad_logp[0], en.grad_logp[0]);
        let mut low_acc = g.clone();
        low_acc.accuracy = 0.5;
        assert_eq!(wpsm_objective(&low_acc, &full), wpsm_objective(&low_acc, &none));
    }

    /// Logit-parameterized group: logits per rollout, sampled tokens and the
    /// θ_old quantities held fixed.
    struct LogitGroup {
        base: RolloutGroup,
        tokens: Vec<Vec<usize>>,
        logits: Vec<Tensor>,
    }

    fn logit_group(seed: u64, vocab: usize, mismatch: f64) -> LogitGroup {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = 4;
        let mut rollouts = Vec::new();
        let mut tokens = Vec::new();
        let mut logits = Vec::new();
        for _ in 0..g {
            let n = rng.gen_range(1..=6);
            let z = Tensor::matrix(n, vocab, (0..n * vocab).map(|_| rng.gen_range(-1.0..1.0)).collect());
            let ys: Vec<usize> = (0..n).map(|_| rng.gen_range(0..vocab)).collect();
            let cur = logp_from_logits(&z, &ys);
            let old: Vec<f64> = cur.iter().map(|c| c + rng.gen_range(-0.05..0.05)).collect();
            let infer = old.iter().map(|o| o + rng.gen_range(-mismatch..=mismatch)).collect();
            rollouts.push(Rollout::new(infer, old, cur, 0.0, mean_token_entropy(&z)).unwrap());
            tokens.push(ys);
            logits.push(z);
        }
        let adv = (0..g).map(|_| rng.gen_range(-1.0..1.0)).collect();
        LogitGroup { base: RolloutGroup::with_advantages(0, rollouts, adv).unwrap(), tokens, logits }
    }

    fn check_logit_grads(lg: &LogitGroup, objective: Objective) -> f64 {
        grad_check(
            |zs| {
                let mut g = lg.base.clone();
                for (i, z) in zs.iter().enumerate() {
                    g.rollouts[i].logp = logp_from_logits(z, &lg.tokens[i]);
                }
                let e = objective.evaluate(&g);
                let grads = zs
                    .iter()
                    .enumerate()
                    .map(|(i, z)| chain_to_logits(z, &lg.tokens[i], &e.grad_logp[i]))
                    .collect();
                (e.value, grads)
            },
            &lg.logits,
            1e-6,
        )
        .unwrap()
    }

    #[test]
    fn gradients_match_finite_differences() {
        let p = MiscParams::new(0.8, 1.25, 0.2).unwrap();
        let w = WpsmParams::new(1.0, 0.0, 0.6, 0.2).unwrap();
        for seed in 0..10 {
            let lg = logit_group(seed, 5, 0.3);
            for obj in [Objective::GrpoIcepop(p), Objective::GspoIcepop(p), Objective::MixedIcepop(p), Objective::Wpsm(w)] {
                let err = check_logit_grads(&lg, obj);
                assert!(err < 1e-5, "{} seed {seed}: {err}", obj.name());
            }
        }
    }

    #[test]
    fn hint_schedule() {
        let p = HintParams { p_initial: 0.8, gamma: 0.1 };
        assert_eq!(hint_prob(&p, 0, 0.7), 0.8);
        for t in [0, 5, 100] {
            assert_eq!(hint_prob(&p, t, 0.0), 0.8);
        }
        assert!((hint_prob(&p, 10, 0.5) - 0.485_224_527_770_107).abs() < 1e-12);
    }

    #[test]
    fn hinted_query_lengths() {
        let q = [1, 2];
        let think: Vec<i32> = (10..20).collect();
        assert_eq!(build_hinted_query(&q, &think, 0.0), vec![1, 2]);
        assert_eq!(build_hinted_query(&q, &think, 1.0).len(), 12);
        assert_eq!(build_hinted_query(&q, &think, 0.25), vec![1, 2, 10, 11, 12]);
    }

    #[test]
    fn equal_lengths_sync_matches_urb() {
        let w = vec![vec![50; 3]; 12];
        let pools = Pools { batch: 2, buffer: 2 };
        let s = simulate_rollout_scheduling(SchedulePolicy::Sync, &w, pools, 3, 0).unwrap();
        let u = simulate_rollout_scheduling(SchedulePolicy::Urb, &w, pools, 3, 0).unwrap();
        assert_eq!(s.total_wall_steps, u.total_wall_steps);
        assert_eq!(s.total_idle_slot_steps, u.total_idle_slot_steps);
        assert_eq!(s.total_wall_steps, 150);
        assert_eq!(s.total_idle_slot_steps, 0);
    }

    #[test]
    fn hand_traced_small_schedule() {
        // Two slots (Ω_BS = 1, N = 1, G = 2); queries: [3, 1], [1, 1], [2, 2].
        let w = vec![vec![3, 1], vec![1, 1], vec![2, 2]];
        let pools = Pools { batch: 1, buffer: 1 };
        let s = simulate_rollout_scheduling(SchedulePolicy::Sync, &w, pools, 2, 0).unwrap();
        assert_eq!(s.total_wall_steps, 3 + 1 + 2);
        assert_eq!(s.total_idle_slot_steps, 2);
        // List schedule: q0 = (0,3),(0,1); q1 = (1,2),(2,3); q2 = (3,5),(3,5).
        let u = simulate_rollout_scheduling(SchedulePolicy::Urb, &w, pools, 2, 0).unwrap();
        assert_eq!(u.total_wall_steps, 5);
        assert_eq!(u.total_idle_slot_steps, 0);
        let walls: Vec<u64> = u.iterations.iter().map(|i| i.wall_steps).collect();
        assert_eq!(walls, vec![3, 3, 5]);
        let a = simulate_rollout_scheduling(SchedulePolicy::April, &w, pools, 2, 0).unwrap();
        let order: Vec<usize> = a.iterations.iter().map(|i| i.trained_queries[0]).collect();
        assert_eq!(order[2], 2);
        assert_eq!(a.iterations[2].wall_steps, 5);
    }

    #[test]
    fn invalid_workloads() {
        let pools = Pools { batch: 1, buffer: 1 };
        assert!(simulate_rollout_scheduling(SchedulePolicy::Urb, &[vec![1]], pools, 2, 0).is_err());
        assert!(simulate_rollout_scheduling(SchedulePolicy::Urb, &[vec![0, 1]], pools, 2, 0).is_err());
        assert!(simulate_rollout_scheduling(SchedulePolicy::Urb, &[vec![1, 1]], Pools { batch: 0, buffer: 1 }, 2, 0).is_err());
    }

    #[test]
    fn long_tail_properties() {
        let params = LongTailParams::default();
        let pools = Pools { batch: 4, buffer: 2 };
        for seed in 0..50 {
            let w = long_tail_workload(&params, seed);
            let all: Vec<usize> = w.iter().flatten().copied().collect();
            let pop_mean = all.iter().sum::<usize>() as f64 / all.len() as f64;
            let s = simulate_rollout_scheduling(SchedulePolicy::Sync, &w, pools, params.group, seed).unwrap();
            let a = simulate_rollout_scheduling(SchedulePolicy::April, &w, pools, params.group, seed).unwrap();
            let u = simulate_rollout_scheduling(SchedulePolicy::Urb, &w, pools, params.group, seed).unwrap();
            for (t, it) in u.iterations.iter().enumerate() {
                let expect: Vec<usize> = (t * 4..(t * 4 + 4).min(w.len())).collect();
                assert_eq!(it.trained_queries, expect);
            }
            assert!(a.iterations[0].trained_mean_length < pop_mean);
            assert!(u.total_idle_slot_steps < s.total_idle_slot_steps, "seed {seed}");
        }
    }

    #[test]
    fn csv_shape() {
        let w = vec![vec![2, 3], vec![1, 1]];
        let t = simulate_rollout_scheduling(SchedulePolicy::Urb, &w, Pools { batch: 1, buffer: 1 }, 2, 0).unwrap();
        let csv = traces_csv(&[t]);
        assert_eq!(csv, "iteration,policy,trained-mean-length,idle-slot-steps,wall-steps\n0,urb,2.5,0,3\n1,urb,1,1,4\n");
    }

    proptest! {
        #[test]
        fn every_response_trained_once(
            lens in prop::collection::vec(prop::collection::vec(1usize..40, 3), 1..20),
            batch in 1usize..5, buffer in 1usize..4, seed in 0u64..1000,
        ) {
            let pools = Pools { batch, buffer };
            for policy in SchedulePolicy::ALL {
                let t = simulate_rollout_scheduling(policy, &lens, pools, 3, seed).unwrap();
                let mut seen: Vec<usize> = t.iterations.iter().flat_map(|i| i.trained_queries.clone()).collect();
                seen.sort_unstable();
                prop_assert_eq!(seen, (0..lens.len()).collect::<Vec<_>>());
                let idle: u64 = t.iterations.iter().map(|i| i.idle_slot_steps).sum();
                prop_assert_eq!(idle, t.total_idle_slot_steps);
                prop_assert_eq!(t.iterations.last().unwrap().wall_steps, t.total_wall_steps);
            }
            let s = simulate_rollout_scheduling(SchedulePolicy::Sync, &lens, pools, 3, seed).unwrap();
            let u = simulate_rollout_scheduling(SchedulePolicy::Urb, &lens, pools, 3, seed).unwrap();
            prop_assert!(u.total_idle_slot_steps <= s.total_idle_slot_steps);
        }

        #[test]
        fn hint_prob_is_monotone(p in 0.0f64..1.0, gamma in 0.001f64..1.0, t in 0u64..100, pass in 0.0f64..1.0) {
            let h = HintParams { p_initial: p, gamma };
            prop_assert!(hint_prob(&h, t + 1, pass) <= hint_prob(&h, t, pass));
            prop_assert!(hint_prob(&h, t, (pass + 0.1).min(1.0)) <= hint_prob(&h, t, pass));
        }
    }
}
