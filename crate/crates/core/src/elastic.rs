//! Elastic depth, width and sparsity sub-networks.
//!
//! A [`SubModelSpec`] names the active blocks, the experts each active block
//! may route to, and each block's top-k. [`restrict_forward`] runs the full
//! model under a spec; [`extract`] copies the selected parameters into a
//! standalone model that computes the same function.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{BlockWeights, Evaluation, LayerPlan, Model, ModelError};
use crate::sequence::TokenSequence;

/// Full-depth probability of the flagship schedule.
pub const P_FULL_DEPTH: f64 = 0.75;
/// Full-depth probability reported for the small-scale ablations.
pub const P_FULL_DEPTH_SMALL_SCALE: f64 = 0.8;
pub const P_FULL_WIDTH: f64 = 0.8;
pub const P_FULL_SPARSITY: f64 = 0.8;

#[derive(Debug, Error, PartialEq)]
pub enum ElasticError {
    #[error("invalid elastic schedule: {0}")]
    InvalidSchedule(String),
    #[error("sub-model spec JSON: {0}")]
    Parse(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ElasticSchedule {
    pub p_full_depth: f64,
    /// Reduced layer counts, each below the model depth.
    pub depth_options: Vec<usize>,
    pub p_full_width: f64,
    /// Reduced expert counts, each below the model width.
    pub width_options: Vec<usize>,
    pub p_full_sparsity: f64,
    /// Inclusive range of reduced top-k values.
    pub top_k_range: (usize, usize),
}

/// Full-model extents a schedule samples within.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelDims {
    pub layers: usize,
    pub experts: usize,
    pub top_k: usize,
}

impl ModelDims {
    pub fn of(model: &Model) -> Self {
        Self {
            layers: model.num_layers(),
            experts: model.num_experts(0),
            top_k: model.layer_top_k[0],
        }
    }
}

impl ElasticSchedule {
    /// Every dimension always full.
    pub fn disabled() -> Self {
        Self {
            p_full_depth: 1.0,
            depth_options: Vec::new(),
            p_full_width: 1.0,
            width_options: Vec::new(),
            p_full_sparsity: 1.0,
            top_k_range: (1, 1),
        }
    }

    /// Reduced depths `1..L`, half width, top-k in `[1, k − 1]`.
    pub fn all_dimensions(dims: ModelDims) -> Self {
        Self {
            p_full_depth: P_FULL_DEPTH,
            depth_options: (1..dims.layers).collect(),
            p_full_width: P_FULL_WIDTH,
            width_options: vec![dims.experts / 2],
            p_full_sparsity: P_FULL_SPARSITY,
            top_k_range: (1, dims.top_k.saturating_sub(1).max(1)),
        }
    }

    pub fn validate(&self, dims: ModelDims) -> Result<(), ElasticError> {
        let bad = |m: String| Err(ElasticError::InvalidSchedule(m));
        for (name, p) in [
            ("p_full_depth", self.p_full_depth),
            ("p_full_width", self.p_full_width),
            ("p_full_sparsity", self.p_full_sparsity),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} = {p} outside [0, 1]"));
            }
        }
        if self.depth_options.iter().any(|&l| l == 0 || l >= dims.layers) {
            return bad(format!("depth options must lie in [1, {})", dims.layers));
        }
        if self.width_options.iter().any(|&e| e == 0 || e >= dims.experts) {
            return bad(format!("width options must lie in [1, {})", dims.experts));
        }
        let (lo, hi) = self.top_k_range;
        if self.p_full_sparsity < 1.0 && (lo == 0 || lo > hi || hi >= dims.top_k) {
            return bad(format!("top-k range ({lo}, {hi}) must lie in [1, {})", dims.top_k));
        }
        if self.p_full_depth < 1.0 && self.depth_options.is_empty() {
            return bad("reduced depth possible but no depth options".into());
        }
        if self.p_full_width < 1.0 && self.width_options.is_empty() {
            return bad("reduced width possible but no width options".into());
        }
        Ok(())
    }
}

/// An elastic restriction of a model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubModelSpec {
    /// Active block ids, ascending.
    pub layers: Vec<usize>,
    /// Active expert ids of each active block, ascending.
    pub experts: Vec<Vec<usize>>,
    /// Top-k of each active block.
    pub top_k: Vec<usize>,
}

impl SubModelSpec {
    pub fn full(model: &Model) -> Self {
        let layers: Vec<usize> = (0..model.num_layers()).collect();
        Self {
            experts: layers.iter().map(|&l| (0..model.num_experts(l)).collect()).collect(),
            top_k: layers.iter().map(|&l| model.layer_top_k[l]).collect(),
            layers,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("spec serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, ElasticError> {
        serde_json::from_str(text).map_err(|e| ElasticError::Parse(e.to_string()))
    }

    /// Whether every active block, expert and top-k of `self` is within `other`.
    pub fn is_within(&self, other: &SubModelSpec) -> bool {
        self.layers.iter().enumerate().all(|(i, l)| {
            other.layers.iter().position(|x| x == l).is_some_and(|j| {
                self.experts[i].iter().all(|e| other.experts[j].contains(e)) && self.top_k[i] <= other.top_k[j]
            })
        })
    }

    /// Validated execution plan of this spec on `model`.
    pub fn plan(&self, model: &Model) -> Result<Vec<LayerPlan>, ModelError> {
        let n = self.layers.len();
        if n == 0 || self.experts.len() != n || self.top_k.len() != n {
            return Err(ModelError::SpecIncompatible(format!(
                "{n} layers, {} expert sets, {} top-k values",
                self.experts.len(),
                self.top_k.len()
            )));
        }
        let plan: Vec<LayerPlan> = self
            .layers
            .iter()
            .zip(&self.experts)
            .zip(&self.top_k)
            .map(|((&layer, experts), &top_k)| LayerPlan {
                layer,
                experts: Some(experts.clone()),
                top_k,
            })
            .collect();
        for p in &plan {
            if p.layer >= model.num_layers() {
                return Err(ModelError::SpecIncompatible(format!("layer {} out of range", p.layer)));
            }
            if p.experts.as_ref().is_some_and(Vec::is_empty) {
                return Err(ModelError::SpecIncompatible(format!("layer {} has no experts", p.layer)));
            }
        }
        Ok(plan)
    }
}

/// `L'` uniformly spaced block ids out of `L`, first and last kept.
pub fn kept_layers(total: usize, keep: usize) -> Vec<usize> {
    match keep {
        0 => Vec::new(),
        1 => vec![0],
        _ if keep >= total => (0..total).collect(),
        _ => (0..keep)
            .map(|i| ((i * (total - 1)) as f64 / (keep - 1) as f64).round() as usize)
            .collect(),
    }
}

/// Draws a spec. Order of draws: depth coin, depth option, width coin,
/// width option and per-layer subsets, sparsity coin, top-k.
pub fn sample_spec<R: Rng>(schedule: &ElasticSchedule, dims: ModelDims, rng: &mut R) -> SubModelSpec {
    let layers = if rng.gen::<f64>() < schedule.p_full_depth {
        (0..dims.layers).collect()
    } else {
        let keep = schedule.depth_options[rng.gen_range(0..schedule.depth_options.len())];
        kept_layers(dims.layers, keep)
    };
    let experts: Vec<Vec<usize>> = if rng.gen::<f64>() < schedule.p_full_width {
        vec![(0..dims.experts).collect(); layers.len()]
    } else {
        let width = schedule.width_options[rng.gen_range(0..schedule.width_options.len())];
        layers
            .iter()
            .map(|_| {
                let mut set = sample(rng, dims.experts, width).into_vec();
                set.sort_unstable();
                set
            })
            .collect()
    };
    let k = if rng.gen::<f64>() < schedule.p_full_sparsity {
        dims.top_k
    } else {
        rng.gen_range(schedule.top_k_range.0..=schedule.top_k_range.1)
    };
    let top_k = experts.iter().map(|set| k.min(set.len())).collect();
    SubModelSpec { layers, experts, top_k }
}

pub fn sample_spec_seeded(schedule: &ElasticSchedule, dims: ModelDims, seed: u64) -> SubModelSpec {
    sample_spec(schedule, dims, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Runs `model` restricted to `spec`: inactive blocks are skipped (the
/// residual stream passes through), routing sees only active experts.
pub fn restrict_forward(model: &Model, spec: &SubModelSpec, seq: &TokenSequence) -> Result<Evaluation, ModelError> {
    model.evaluate(seq, &spec.plan(model)?)
}

/// Copies the parameters selected by `spec` into a standalone model.
pub fn extract(model: &Model, spec: &SubModelSpec) -> Result<Model, ModelError> {
    let plan = spec.plan(model)?;
    // Validates expert sets and top-k against the source model.
    model.evaluate(&TokenSequence::text(&[0]), &plan)?;
    let mut weights = model.weights.clone();
    let mut biases = Vec::with_capacity(plan.len());
    weights.blocks = plan
        .iter()
        .map(|p| {
            let src = &model.weights.blocks[p.layer];
            let experts = p.experts.clone().expect("spec plans list experts");
            biases.push(experts.iter().map(|&e| model.biases[p.layer][e]).collect());
            BlockWeights {
                attn_norm: src.attn_norm.clone(),
                wq: src.wq.clone(),
                wk: src.wk.clone(),
                wv: src.wv.clone(),
                wo: src.wo.clone(),
                ffn_norm: src.ffn_norm.clone(),
                gate: src.gate.select_cols(&experts),
                experts: experts.iter().map(|&e| src.experts[e].clone()).collect(),
            }
        })
        .collect();
    let mut config = model.config.clone();
    config.layers = plan.len();
    config.experts = spec.experts.iter().map(Vec::len).max().unwrap_or(0);
    config.top_k = spec.top_k.iter().copied().max().unwrap_or(0);
    Ok(Model {
        config,
        weights,
        biases,
        layer_top_k: spec.top_k.clone(),
    })
}
