//! Adam training loop with per-instance elastic sub-model sampling.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::corpus::Prepared;
use super::schedule::{batch_ramp, LossRescaler};
use super::HarnessError;
use crate::elastic::{sample_spec, SubModelSpec};
use crate::kernel::{Tape, Tensor, Var};
use crate::model::Model;
use crate::moe::update_bias;
use crate::sequence::{Modality, TokenSequence};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl Adam {
    pub fn new(params: &[&Tensor], beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self { beta1, beta2, eps, step: 0, m: zeros.clone(), v: zeros }
    }

    /// Bias-corrected Adam update; a missing gradient counts as zero.
    pub fn update(&mut self, params: Vec<&mut Tensor>, grads: &[Option<&Tensor>], lr: f64) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, p) in params.into_iter().enumerate() {
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let g = grads[i].map(Tensor::data);
            for (j, x) in p.data_mut().iter_mut().enumerate() {
                let gj = g.map_or(0.0, |g| g[j]);
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                *x -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + self.eps);
            }
        }
    }
}

/// One logged optimizer step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub lr: f64,
    pub batch: usize,
    /// Raw per-modality batch losses.
    pub losses: [Option<f64>; 3],
    /// Sum of EMA-rescaled losses (the optimized objective).
    pub objective: f64,
}

/// Everything needed to resume or evaluate a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub config: RunConfig,
    pub model: Model,
    pub adam: Adam,
    pub rescaler: LossRescaler,
    pub step: usize,
    pub rng: ChaCha8Rng,
}

impl TrainState {
    pub fn new(config: RunConfig) -> Result<Self, HarnessError> {
        config.validate()?;
        let model = Model::new(config.model.clone(), config.seed)?;
        let t = &config.train;
        let adam = Adam::new(&model.weights.flat(), t.beta1, t.beta2, t.adam_eps);
        let rescaler = LossRescaler::new(t.ema_decay);
        let rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5EED_0F_7241_4E);
        Ok(Self { config, model, adam, rescaler, step: 0, rng })
    }

    /// Runs one optimizer step on a freshly drawn batch.
    pub fn step(&mut self, data: &Prepared) -> Result<StepMetrics, HarnessError> {
        let t = &self.config.train;
        let batch = batch_ramp(self.step, t.batch_start, t.batch_end, t.ramp_steps);
        let lr = t.lr.at(self.step);
        let schedule = self.config.elastic_schedule();
        let dims = self.config.dims();

        let mut tape = Tape::new();
        let w = self.model.bind(&mut tape);
        let mut per_mod: [Vec<(Var, f64)>; 3] = Default::default();
        let mut full_loads: Vec<Vec<f64>> = vec![vec![0.0; self.model.config.experts]; self.model.num_layers()];
        for _ in 0..batch {
            let seq = &data.train[self.rng.gen_range(0..data.train.len())];
            let spec = sample_spec(&schedule, dims, &mut self.rng);
            let plan = spec.plan(&self.model)?;
            let out = self.model.forward(&mut tape, &w, seq, &plan)?;
            for m in Modality::ALL {
                if let Some(l) = out.losses.losses[m.index()] {
                    per_mod[m.index()].push((l, out.losses.weight[m.index()]));
                }
            }
            for l in out.loads.iter().filter(|l| l.full_width) {
                for (acc, x) in full_loads[l.layer].iter_mut().zip(l.total()) {
                    *acc += x;
                }
            }
        }

        let mut raw_vars: [Option<Var>; 3] = [None; 3];
        for m in 0..3 {
            let total: f64 = per_mod[m].iter().map(|p| p.1).sum();
            if per_mod[m].is_empty() || total <= 0.0 {
                continue;
            }
            let mut acc: Option<Var> = None;
            for &(l, wt) in &per_mod[m] {
                let s = tape.scale(l, wt / total);
                acc = Some(acc.map_or(s, |a| tape.add(a, s)));
            }
            raw_vars[m] = acc;
        }
        let raw: [Option<f64>; 3] = raw_vars.map(|v| v.map(|v| tape.value(v).item()));
        if raw.iter().flatten().any(|v| !v.is_finite()) {
            return Err(HarnessError::NumericFailure(format!("loss at step {}", self.step)));
        }
        self.rescaler.observe(&raw);
        let factors = self.rescaler.factors(&raw)?;
        let mut objective: Option<Var> = None;
        for m in 0..3 {
            if let (Some(v), Some(f)) = (raw_vars[m], factors[m]) {
                let s = tape.scale(v, f);
                objective = Some(objective.map_or(s, |a| tape.add(a, s)));
            }
        }
        let objective = objective.ok_or_else(|| HarnessError::NumericFailure("batch carried no loss".into()))?;
        let obj_value = tape.value(objective).item();

        let grads = tape.backward(objective);
        let flat_vars = w.flat();
        let grad_refs: Vec<Option<&Tensor>> = flat_vars.iter().map(|&&v| grads.get(v)).collect();
        if grad_refs.iter().flatten().any(|g| !g.is_finite()) {
            return Err(HarnessError::NumericFailure(format!("gradient at step {}", self.step)));
        }
        self.adam.update(self.model.weights.flat_mut(), &grad_refs, lr);

        let speed = self.model.config.bias_speed;
        for (layer, loads) in full_loads.iter().enumerate() {
            if loads.iter().sum::<f64>() > 0.0 {
                update_bias(&mut self.model.biases[layer], loads, speed).map_err(crate::model::ModelError::from)?;
            }
        }

        let metrics = StepMetrics { step: self.step, lr, batch, losses: raw, objective: obj_value };
        self.step += 1;
        Ok(metrics)
    }

    /// Runs the remaining configured steps.
    pub fn run(&mut self, data: &Prepared) -> Result<Vec<StepMetrics>, HarnessError> {
        let mut log = Vec::new();
        while self.step < self.config.train.steps {
            log.push(self.step(data)?);
        }
        Ok(log)
    }
}

/// Token-weighted mean validation loss per modality under `spec`.
pub fn evaluate(model: &Model, spec: &SubModelSpec, seqs: &[TokenSequence]) -> Result<[Option<f64>; 3], HarnessError> {
    let plan = spec.plan(model)?;
    let mut sum = [0.0; 3];
    let mut weight = [0.0; 3];
    for seq in seqs {
        let e = model.evaluate(seq, &plan)?;
        for m in 0..3 {
            if let Some(l) = e.losses[m] {
                sum[m] += l * e.weight[m];
                weight[m] += e.weight[m];
            }
        }
    }
    let out = [0, 1, 2].map(|m| (weight[m] > 0.0).then(|| sum[m] / weight[m]));
    if out.iter().flatten().any(|v| !v.is_finite()) {
        return Err(HarnessError::NumericFailure("validation loss".into()));
    }
    Ok(out)
}
