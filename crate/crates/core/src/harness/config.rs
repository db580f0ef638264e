//! Run configuration, parsed from TOML or JSON text.

use serde::{Deserialize, Serialize};

use super::schedule::LrSchedule;
use super::HarnessError;
use crate::elastic::{ElasticSchedule, ModelDims, P_FULL_DEPTH, P_FULL_SPARSITY, P_FULL_WIDTH};
use crate::model::ModelConfig;
use crate::rlopt::{HintParams, LongTailParams, MiscParams, Pools, WpsmParams};

/// Everything a run needs. `seed` has no default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    #[serde(default)]
    pub elastic: ElasticConfig,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub ablation: AblationConfig,
    #[serde(default)]
    pub rl: RlConfig,
    #[serde(default = "default_out_dir")]
    pub out_dir: String,
}

fn default_out_dir() -> String {
    "runs/default".into()
}

/// Elastic sampling. Unset option lists default to every reduced depth,
/// half width and top-k in `[1, k − 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ElasticConfig {
    pub enabled: bool,
    pub p_full_depth: f64,
    pub p_full_width: f64,
    pub p_full_sparsity: f64,
    pub depth_options: Option<Vec<usize>>,
    pub width_options: Option<Vec<usize>>,
    pub top_k_range: Option<(usize, usize)>,
}

impl Default for ElasticConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            p_full_depth: P_FULL_DEPTH,
            p_full_width: P_FULL_WIDTH,
            p_full_sparsity: P_FULL_SPARSITY,
            depth_options: None,
            width_options: None,
            top_k_range: None,
        }
    }
}

impl ElasticConfig {
    pub fn schedule(&self, dims: ModelDims) -> ElasticSchedule {
        if !self.enabled {
            return ElasticSchedule::disabled();
        }
        let all = ElasticSchedule::all_dimensions(dims);
        let mut s = ElasticSchedule {
            p_full_depth: self.p_full_depth,
            depth_options: self.depth_options.clone().unwrap_or(all.depth_options),
            p_full_width: self.p_full_width,
            width_options: self.width_options.clone().unwrap_or(all.width_options),
            p_full_sparsity: self.p_full_sparsity,
            top_k_range: self.top_k_range.unwrap_or(all.top_k_range),
        };
        // A dimension with no reduced option stays full.
        if s.depth_options.is_empty() {
            s.p_full_depth = 1.0;
        }
        if s.width_options.is_empty() || s.width_options == [0] {
            s.width_options.clear();
            s.p_full_width = 1.0;
        }
        if dims.top_k < 2 {
            s.p_full_sparsity = 1.0;
        }
        s
    }
}

/// Corpus sizes (in sequences) and shapes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Corpus seed; the run seed when unset.
    pub seed: Option<u64>,
    pub text_train: usize,
    pub text_val: usize,
    pub text_length: usize,
    pub vision_train: usize,
    pub vision_val: usize,
    pub vision_pyramid: Vec<(usize, usize)>,
    /// History bit-flip probability for visual inputs.
    pub vision_flip_prob: f64,
    pub audio_train: usize,
    pub audio_val: usize,
    pub audio_frames: usize,
    pub audio_dim: usize,
    pub codebook_iters: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            seed: None,
            text_train: 256,
            text_val: 32,
            text_length: 24,
            vision_train: 0,
            vision_val: 0,
            vision_pyramid: vec![(1, 1), (2, 2), (4, 4)],
            vision_flip_prob: 0.0,
            audio_train: 0,
            audio_val: 0,
            audio_frames: 12,
            audio_dim: 6,
            codebook_iters: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: LrSchedule,
    /// Sequences per step at step 0.
    pub batch_start: usize,
    /// Sequences per step once the ramp completes.
    pub batch_end: usize,
    pub ramp_steps: usize,
    pub ema_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            lr: LrSchedule::default(),
            batch_start: 4,
            batch_end: 8,
            ramp_steps: 50,
            ema_decay: 0.99,
            beta1: 0.9,
            beta2: 0.95,
            adam_eps: 1e-8,
        }
    }
}

/// Inference restrictions compared by `elastic-ablate`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    /// Training seeds, each offset from the run seed.
    pub seeds: usize,
    /// Training recipes: `elastic` and/or `static`.
    pub train_configs: Vec<String>,
    pub depths: Vec<usize>,
    pub widths: Vec<usize>,
    pub top_ks: Vec<usize>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            seeds: 5,
            train_configs: vec!["elastic".into()],
            depths: Vec::new(),
            widths: Vec::new(),
            top_ks: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RlConfig {
    pub pools: Pools,
    pub workload: LongTailParams,
    pub workloads: usize,
    pub misc: MiscParams,
    pub wpsm: WpsmParams,
    pub hint: HintParams,
    pub groups: usize,
    pub vocab: usize,
    pub max_length: usize,
    /// Half-width of the uniform train/infer log-prob mismatch.
    pub mismatch: f64,
}

impl Default for RlConfig {
    fn default() -> Self {
        Self {
            pools: Pools { batch: 4, buffer: 2 },
            workload: LongTailParams::default(),
            workloads: 10,
            misc: MiscParams { alpha: 0.5, beta: 2.0, epsilon: 0.2 },
            wpsm: WpsmParams { eta: 0.8, tau: 0.5, alpha_mask: 1.0, epsilon: 0.2 },
            hint: HintParams { p_initial: 0.8, gamma: 0.1 },
            groups: 8,
            vocab: 16,
            max_length: 12,
            mismatch: 0.5,
        }
    }
}

impl RunConfig {
    /// Parses TOML, or JSON when the text starts with `{`.
    pub fn parse(text: &str) -> Result<Self, HarnessError> {
        let parsed: Self = if text.trim_start().starts_with('{') {
            serde_json::from_str(text).map_err(|e| HarnessError::ConfigInvalid(e.to_string()))?
        } else {
            toml::from_str(text).map_err(|e| HarnessError::ConfigInvalid(e.to_string()))?
        };
        parsed.validate()?;
        Ok(parsed)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn dims(&self) -> ModelDims {
        ModelDims { layers: self.model.layers, experts: self.model.experts, top_k: self.model.top_k }
    }

    pub fn data_seed(&self) -> u64 {
        self.data.seed.unwrap_or(self.seed)
    }

    pub fn elastic_schedule(&self) -> ElasticSchedule {
        self.elastic.schedule(self.dims())
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: &str| Err(HarnessError::ConfigInvalid(m.into()));
        self.model.validate().map_err(|e| HarnessError::ConfigInvalid(e.to_string()))?;
        self.elastic_schedule()
            .validate(self.dims())
            .map_err(|e| HarnessError::ConfigInvalid(e.to_string()))?;
        let d = &self.data;
        if d.text_train + d.vision_train + d.audio_train == 0 {
            return bad("no training data");
        }
        if (d.text_train + d.text_val > 0 && d.text_length < 2) || (d.audio_train + d.audio_val > 0 && d.audio_frames < 2) {
            return bad("sequences need at least two items");
        }
        if d.audio_dim == 0 {
            return bad("audio_dim must be positive");
        }
        if !(0.0..=1.0).contains(&d.vision_flip_prob) {
            return bad("vision_flip_prob outside [0, 1]");
        }
        crate::vision::validate_pyramid(&d.vision_pyramid).map_err(|e| HarnessError::ConfigInvalid(e.to_string()))?;
        let t = &self.train;
        if t.batch_start == 0 || t.batch_end == 0 {
            return bad("batch sizes must be positive");
        }
        if !(t.ema_decay > 0.0 && t.ema_decay < 1.0) {
            return bad("ema_decay must lie in (0, 1)");
        }
        if !(0.0..1.0).contains(&t.beta1) || !(0.0..1.0).contains(&t.beta2) || t.adam_eps <= 0.0 {
            return bad("Adam parameters out of range");
        }
        t.lr.validate()?;
        let a = &self.ablation;
        if a.train_configs.iter().any(|c| c != "elastic" && c != "static") {
            return bad("ablation train_configs must be `elastic` or `static`");
        }
        if a.depths.iter().any(|&l| l == 0 || l > self.model.layers)
            || a.widths.iter().any(|&e| e == 0 || e > self.model.experts)
            || a.top_ks.iter().any(|&k| k == 0 || k > self.model.experts)
        {
            return bad("ablation restriction outside model extents");
        }
        let r = &self.rl;
        MiscParams::new(r.misc.alpha, r.misc.beta, r.misc.epsilon)?;
        WpsmParams::new(r.wpsm.eta, r.wpsm.tau, r.wpsm.alpha_mask, r.wpsm.epsilon)?;
        if r.pools.batch == 0 || r.pools.buffer == 0 || r.workload.group == 0 || r.vocab < 2 || r.max_length == 0 {
            return bad("rl extents must be positive");
        }
        if r.workload.base_length == 0 || r.workload.tail_length == 0 {
            return bad("rl workload lengths must be positive");
        }
        Ok(())
    }
}

/// Small configuration used by smoke tests and the README example.
pub fn smoke_config(seed: u64) -> RunConfig {
    RunConfig {
        seed,
        model: ModelConfig {
            d_model: 16,
            layers: 2,
            heads: 2,
            experts: 8,
            expert_hidden: 16,
            top_k: 2,
            text_vocab: 16,
            bits: 4,
            audio_levels: 2,
            audio_codes: 8,
            rope_base: 10_000.0,
            ncp_placement: Default::default(),
            bias_speed: 1e-3,
        },
        elastic: ElasticConfig { enabled: true, ..Default::default() },
        data: DataConfig {
            seed: None,
            text_train: 32,
            text_val: 8,
            text_length: 12,
            vision_train: 8,
            vision_val: 4,
            vision_pyramid: vec![(1, 1), (2, 2), (3, 3)],
            vision_flip_prob: 0.05,
            audio_train: 8,
            audio_val: 4,
            audio_frames: 8,
            audio_dim: 4,
            codebook_iters: 4,
        },
        train: TrainConfig { steps: 20, ramp_steps: 10, ..Default::default() },
        ablation: AblationConfig { seeds: 2, ..Default::default() },
        rl: RlConfig { workloads: 3, groups: 3, ..Default::default() },
        out_dir: "runs/smoke".into(),
    }
}
