//! Toy unified MoE transformer.
//!
//! Pre-norm blocks of multi-head attention with Uni-RoPE followed by an MoE
//! feed-forward in every layer. Text tokens use an embedding table, visual
//! tokens a bit-vector projection, audio tokens an additive per-level table.
//! Heads: a text vocabulary head, `B` independent bit logits, and `L`
//! next-codec heads with teacher-forced add-back of each level's embedding.

use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::ncp_loss_tape;
use crate::kernel::{KernelError, Tape, Tensor, Var};
use crate::moe::{select_top_k, DispatchPlan, MoeError, BIAS_SPEED_PRETRAIN};
use crate::sequence::{Modality, Target, TokenInput, TokenSequence};
use crate::unirope::{band_pairs, rope_angles, RopeError, DEFAULT_ROPE_BASE};

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("sub-model spec incompatible with model: {0}")]
    SpecIncompatible(String),
    #[error("invalid token sequence: {0}")]
    Sequence(String),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Moe(#[from] MoeError),
    #[error(transparent)]
    Rope(#[from] RopeError),
}

/// Where the next-codec heads read the backbone.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NcpPlacement {
    /// Every head reads the final hidden state.
    #[default]
    Final,
    /// Head `l` of `L` reads the state after executed block `depth − L + l`.
    TopLayers,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub experts: usize,
    pub expert_hidden: usize,
    pub top_k: usize,
    pub text_vocab: usize,
    pub bits: usize,
    pub audio_levels: usize,
    pub audio_codes: usize,
    #[serde(default = "default_rope_base")]
    pub rope_base: f64,
    #[serde(default)]
    pub ncp_placement: NcpPlacement,
    #[serde(default = "default_bias_speed")]
    pub bias_speed: f64,
}

fn default_rope_base() -> f64 {
    DEFAULT_ROPE_BASE
}

fn default_bias_speed() -> f64 {
    BIAS_SPEED_PRETRAIN
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let positive = [
            ("d_model", self.d_model),
            ("layers", self.layers),
            ("heads", self.heads),
            ("experts", self.experts),
            ("expert_hidden", self.expert_hidden),
            ("top_k", self.top_k),
            ("text_vocab", self.text_vocab),
            ("bits", self.bits),
            ("audio_levels", self.audio_levels),
            ("audio_codes", self.audio_codes),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(ModelError::Config(format!("{name} must be positive")));
        }
        if self.d_model % self.heads != 0 {
            return Err(ModelError::Config(format!("d_model {} not divisible by heads {}", self.d_model, self.heads)));
        }
        band_pairs(self.d_model / self.heads)?;
        if self.top_k > self.experts {
            return Err(ModelError::Config(format!("top_k {} exceeds experts {}", self.top_k, self.experts)));
        }
        if !(self.rope_base > 1.0 && self.rope_base.is_finite()) {
            return Err(ModelError::Config("rope_base must exceed 1".into()));
        }
        if !(self.bias_speed >= 0.0 && self.bias_speed.is_finite()) {
            return Err(ModelError::Config("bias_speed must be non-negative".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertWeights<T> {
    pub w_in: T,
    pub w_out: T,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockWeights<T> {
    pub attn_norm: T,
    pub wq: T,
    pub wk: T,
    pub wv: T,
    pub wo: T,
    pub ffn_norm: T,
    pub gate: T,
    pub experts: Vec<ExpertWeights<T>>,
}

/// Every trainable parameter. `T` is `Tensor` for storage and `Var` once
/// bound to a tape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Weights<T> {
    pub embed: T,
    pub bit_in: T,
    pub start: T,
    pub audio_tables: Vec<T>,
    pub blocks: Vec<BlockWeights<T>>,
    pub final_norm: T,
    pub text_head: T,
    pub bit_head: T,
    pub audio_heads: Vec<T>,
}

impl<T> Weights<T> {
    /// Parameters in a fixed canonical order.
    pub fn flat(&self) -> Vec<&T> {
        let mut out = vec![&self.embed, &self.bit_in, &self.start];
        out.extend(&self.audio_tables);
        for b in &self.blocks {
            out.extend([&b.attn_norm, &b.wq, &b.wk, &b.wv, &b.wo, &b.ffn_norm, &b.gate]);
            for e in &b.experts {
                out.extend([&e.w_in, &e.w_out]);
            }
        }
        out.extend([&self.final_norm, &self.text_head, &self.bit_head]);
        out.extend(&self.audio_heads);
        out
    }

    pub fn flat_mut(&mut self) -> Vec<&mut T> {
        let mut out = vec![&mut self.embed, &mut self.bit_in, &mut self.start];
        out.extend(&mut self.audio_tables);
        for b in &mut self.blocks {
            out.extend([&mut b.attn_norm, &mut b.wq, &mut b.wk, &mut b.wv, &mut b.wo, &mut b.ffn_norm, &mut b.gate]);
            for e in &mut b.experts {
                out.extend([&mut e.w_in, &mut e.w_out]);
            }
        }
        out.extend([&mut self.final_norm, &mut self.text_head, &mut self.bit_head]);
        out.extend(&mut self.audio_heads);
        out
    }

    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> Weights<U> {
        let mut f = |t: &T| f(t);
        Weights {
            embed: f(&self.embed),
            bit_in: f(&self.bit_in),
            start: f(&self.start),
            audio_tables: self.audio_tables.iter().map(&mut f).collect(),
            blocks: self
                .blocks
                .iter()
                .map(|b| BlockWeights {
                    attn_norm: f(&b.attn_norm),
                    wq: f(&b.wq),
                    wk: f(&b.wk),
                    wv: f(&b.wv),
                    wo: f(&b.wo),
                    ffn_norm: f(&b.ffn_norm),
                    gate: f(&b.gate),
                    experts: b.experts.iter().map(|e| ExpertWeights { w_in: f(&e.w_in), w_out: f(&e.w_out) }).collect(),
                })
                .collect(),
            final_norm: f(&self.final_norm),
            text_head: f(&self.text_head),
            bit_head: f(&self.bit_head),
            audio_heads: self.audio_heads.iter().map(&mut f).collect(),
        }
    }
}

impl Weights<Tensor> {
    pub fn param_count(&self) -> usize {
        self.flat().iter().map(|t| t.len()).sum()
    }
}

/// Execution plan of one block: which experts may be routed to and with
/// what top-k. `experts == None` means every expert of the block.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerPlan {
    pub layer: usize,
    pub experts: Option<Vec<usize>>,
    pub top_k: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub config: ModelConfig,
    pub weights: Weights<Tensor>,
    /// Per-block balance biases (selection only, not trained by gradient).
    pub biases: Vec<Vec<f64>>,
    /// Per-block routing top-k.
    pub layer_top_k: Vec<usize>,
}

/// Per-layer, per-modality expert load counts from one forward pass.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LayerLoads {
    pub layer: usize,
    /// Whether this block ran with every expert available.
    pub full_width: bool,
    /// `per_modality[m][e]` tokens of modality `m` routed to expert `e`.
    pub per_modality: [Vec<f64>; 3],
}

impl LayerLoads {
    pub fn total(&self) -> Vec<f64> {
        let e = self.per_modality[0].len();
        (0..e).map(|i| self.per_modality.iter().map(|m| m[i]).sum()).collect()
    }
}

/// Per-modality loss nodes plus the summed token weight behind each.
#[derive(Debug, Clone, Copy, Default)]
pub struct ModalityLosses {
    pub losses: [Option<Var>; 3],
    pub weight: [f64; 3],
}

pub struct ForwardOutput {
    /// Final normalized hidden states, `n × d`.
    pub hidden: Var,
    pub losses: ModalityLosses,
    pub loads: Vec<LayerLoads>,
}

/// Forward results detached from the tape.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub hidden: Tensor,
    pub losses: [Option<f64>; 3],
    pub weight: [f64; 3],
    pub loads: Vec<LayerLoads>,
}

fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, bound: f64) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect())
}

/// Variance `1/fan_in` uniform init.
fn fan_in(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    uniform(rng, rows, cols, (3.0 / rows as f64).sqrt())
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = &config;
        let d = c.d_model;
        let residual_scale = 1.0 / (2.0 * c.layers as f64).sqrt();
        let embed = uniform(&mut rng, c.text_vocab, d, 1.0);
        let bit_in = uniform(&mut rng, c.bits, d, (3.0 / c.bits as f64).sqrt());
        let start = uniform(&mut rng, 1, d, 1.0);
        let audio_tables = (0..c.audio_levels)
            .map(|_| uniform(&mut rng, c.audio_codes, d, (3.0 / c.audio_levels as f64).sqrt()))
            .collect();
        let blocks = (0..c.layers)
            .map(|_| {
                let wq = fan_in(&mut rng, d, d);
                let wk = fan_in(&mut rng, d, d);
                let wv = fan_in(&mut rng, d, d);
                let mut wo = fan_in(&mut rng, d, d);
                wo.scale_assign(residual_scale);
                let gate = fan_in(&mut rng, d, c.experts);
                let experts = (0..c.experts)
                    .map(|_| {
                        let w_in = fan_in(&mut rng, d, c.expert_hidden);
                        let mut w_out = fan_in(&mut rng, c.expert_hidden, d);
                        w_out.scale_assign(residual_scale);
                        ExpertWeights { w_in, w_out }
                    })
                    .collect();
                BlockWeights {
                    attn_norm: Tensor::full(&[1, d], 1.0),
                    wq,
                    wk,
                    wv,
                    wo,
                    ffn_norm: Tensor::full(&[1, d], 1.0),
                    gate,
                    experts,
                }
            })
            .collect();
        let text_head = fan_in(&mut rng, d, c.text_vocab);
        let bit_head = fan_in(&mut rng, d, c.bits);
        let audio_heads = (0..c.audio_levels).map(|_| fan_in(&mut rng, d, c.audio_codes)).collect();
        let weights = Weights {
            embed,
            bit_in,
            start,
            audio_tables,
            blocks,
            final_norm: Tensor::full(&[1, d], 1.0),
            text_head,
            bit_head,
            audio_heads,
        };
        Ok(Self {
            biases: vec![vec![0.0; c.experts]; c.layers],
            layer_top_k: vec![c.top_k; c.layers],
            config,
            weights,
        })
    }

    pub fn num_layers(&self) -> usize {
        self.weights.blocks.len()
    }

    pub fn num_experts(&self, layer: usize) -> usize {
        self.weights.blocks[layer].experts.len()
    }

    pub fn param_count(&self) -> usize {
        self.weights.param_count()
    }

    /// Plan that runs every block with every expert at its own top-k.
    pub fn full_plan(&self) -> Vec<LayerPlan> {
        (0..self.num_layers())
            .map(|layer| LayerPlan {
                layer,
                experts: None,
                top_k: self.layer_top_k[layer],
            })
            .collect()
    }

    pub fn bind(&self, tape: &mut Tape) -> Weights<Var> {
        self.weights.map(|t| tape.leaf(t.clone()))
    }

    fn check_plan(&self, plan: &[LayerPlan]) -> Result<(), ModelError> {
        let mut prev: Option<usize> = None;
        for p in plan {
            if p.layer >= self.num_layers() || prev.is_some_and(|q| q >= p.layer) {
                return Err(ModelError::SpecIncompatible(format!("layer {} out of order or range", p.layer)));
            }
            prev = Some(p.layer);
            let e = self.num_experts(p.layer);
            let active = p.experts.as_ref().map_or(e, Vec::len);
            if let Some(list) = &p.experts {
                if list.windows(2).any(|w| w[0] >= w[1]) || list.iter().any(|&x| x >= e) {
                    return Err(ModelError::SpecIncompatible(format!("layer {} expert set invalid", p.layer)));
                }
            }
            if p.top_k == 0 || p.top_k > active {
                return Err(ModelError::SpecIncompatible(format!(
                    "layer {} top-k {} with {active} active experts",
                    p.layer, p.top_k
                )));
            }
        }
        Ok(())
    }

    fn check_sequence(&self, seq: &TokenSequence) -> Result<(), ModelError> {
        if !seq.is_consistent() {
            return Err(ModelError::Sequence("per-token arrays disagree in length".into()));
        }
        if seq.is_empty() {
            return Err(ModelError::Sequence("empty sequence".into()));
        }
        let c = &self.config;
        let codes_ok = |codes: &[usize]| codes.len() == c.audio_levels && codes.iter().all(|&x| x < c.audio_codes);
        let bits_ok = |bits: &[u8]| bits.len() == c.bits && bits.iter().all(|&b| b <= 1);
        for (i, (inp, tgt)) in seq.inputs.iter().zip(&seq.targets).enumerate() {
            let ok_in = match inp {
                TokenInput::Text(t) => *t < c.text_vocab,
                TokenInput::Bits(b) => bits_ok(b),
                TokenInput::Start => true,
                TokenInput::Audio(a) => codes_ok(a),
            };
            let ok_tgt = match tgt {
                Target::None => true,
                Target::Text(t) => *t < c.text_vocab,
                Target::Bits(b) => bits_ok(b),
                Target::Audio(a) => codes_ok(a),
            };
            if !ok_in || !ok_tgt {
                return Err(ModelError::Sequence(format!("token {i} out of range for model config")));
            }
        }
        Ok(())
    }

    /// Runs `plan` over `seq` on `tape` using bound weights `w`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        w: &Weights<Var>,
        seq: &TokenSequence,
        plan: &[LayerPlan],
    ) -> Result<ForwardOutput, ModelError> {
        self.check_plan(plan)?;
        self.check_sequence(seq)?;
        let n = seq.len();
        let c = &self.config;
        let mut x = self.embed(tape, w, seq);

        let dh = c.head_dim();
        let angles: Vec<Vec<f64>> = seq
            .positions
            .iter()
            .map(|&p| rope_angles(p, dh, c.rope_base))
            .collect::<Result<_, _>>()?;
        let angles = Rc::new(angles);
        let rows = Rc::new(seq.mask.row_keys());
        if let Some(i) = rows.iter().position(Vec::is_empty) {
            return Err(KernelError::EmptyAttentionRow(i).into());
        }
        let scale = 1.0 / (dh as f64).sqrt();

        let mut loads = Vec::with_capacity(plan.len());
        let mut states = Vec::with_capacity(plan.len());
        for p in plan {
            let b = &w.blocks[p.layer];
            let h = tape.rms_norm(x, b.attn_norm);
            let q = tape.matmul(h, b.wq);
            let k = tape.matmul(h, b.wk);
            let v = tape.matmul(h, b.wv);
            let q = tape.rotate_pairs(q, angles.clone(), c.heads);
            let k = tape.rotate_pairs(k, angles.clone(), c.heads);
            let a = tape.attention(q, k, v, rows.clone(), c.heads, scale);
            let a = tape.matmul(a, b.wo);
            x = tape.add(x, a);
            let (m, l) = self.moe(tape, b, x, p, seq)?;
            x = tape.add(x, m);
            loads.push(l);
            states.push(x);
        }

        let hidden = tape.rms_norm(x, w.final_norm);
        let mut losses = ModalityLosses::default();
        self.text_loss(tape, w, hidden, seq, &mut losses)?;
        self.bit_loss(tape, w, hidden, seq, &mut losses)?;
        self.audio_loss(tape, w, hidden, &states, seq, &mut losses)?;
        debug_assert_eq!(tape.value(hidden).rows(), n);
        Ok(ForwardOutput { hidden, losses, loads })
    }

    /// Forward on a private tape, returning plain values.
    pub fn evaluate(&self, seq: &TokenSequence, plan: &[LayerPlan]) -> Result<Evaluation, ModelError> {
        let mut tape = Tape::new();
        let w = self.bind(&mut tape);
        let out = self.forward(&mut tape, &w, seq, plan)?;
        Ok(Evaluation {
            hidden: tape.value(out.hidden).clone(),
            losses: out.losses.losses.map(|l| l.map(|v| tape.value(v).item())),
            weight: out.losses.weight,
            loads: out.loads,
        })
    }

    fn embed(&self, tape: &mut Tape, w: &Weights<Var>, seq: &TokenSequence) -> Var {
        let n = seq.len();
        let mut parts: Vec<Var> = Vec::new();
        let mut text = (Vec::new(), Vec::new());
        let mut bits = (Vec::new(), Vec::new());
        let mut start = Vec::new();
        let mut audio = (Vec::new(), Vec::new());
        for (i, inp) in seq.inputs.iter().enumerate() {
            match inp {
                TokenInput::Text(t) => {
                    text.0.push(i);
                    text.1.push(*t);
                }
                TokenInput::Bits(b) => {
                    bits.0.push(i);
                    bits.1.extend(b.iter().map(|&x| 2.0 * f64::from(x) - 1.0));
                }
                TokenInput::Start => start.push(i),
                TokenInput::Audio(codes) => {
                    audio.0.push(i);
                    audio.1.push(codes.clone());
                }
            }
        }
        if !text.0.is_empty() {
            let e = tape.gather_rows(w.embed, text.1);
            parts.push(tape.scatter_rows(e, text.0, n));
        }
        if !bits.0.is_empty() {
            let m = bits.0.len();
            let signs = tape.leaf(Tensor::matrix(m, self.config.bits, bits.1));
            let e = tape.matmul(signs, w.bit_in);
            parts.push(tape.scatter_rows(e, bits.0, n));
        }
        if !start.is_empty() {
            let e = tape.gather_rows(w.start, vec![0; start.len()]);
            parts.push(tape.scatter_rows(e, start, n));
        }
        for (level, &table) in w.audio_tables.iter().enumerate() {
            if audio.0.is_empty() {
                break;
            }
            let codes = audio.1.iter().map(|c| c[level]).collect();
            let e = tape.gather_rows(table, codes);
            parts.push(tape.scatter_rows(e, audio.0.clone(), n));
        }
        let mut x = parts[0];
        for &p in &parts[1..] {
            x = tape.add(x, p);
        }
        x
    }

    fn moe(
        &self,
        tape: &mut Tape,
        b: &BlockWeights<Var>,
        x: Var,
        p: &LayerPlan,
        seq: &TokenSequence,
    ) -> Result<(Var, LayerLoads), ModelError> {
        let n = seq.len();
        let full_e = self.num_experts(p.layer);
        let active: Vec<usize> = p.experts.clone().unwrap_or_else(|| (0..full_e).collect());
        let h = tape.rms_norm(x, b.ffn_norm);
        let gate = match &p.experts {
            None => b.gate,
            Some(list) => tape.select_cols(b.gate, list.clone()),
        };
        let logits = tape.matmul(h, gate);
        let bias: Vec<f64> = active.iter().map(|&e| self.biases[p.layer][e]).collect();
        let routes = select_top_k(tape.value(logits), &bias, p.top_k)?;
        let selection: Vec<Vec<usize>> = routes.iter().map(|r| r.experts.clone()).collect();
        let gates = tape.select_softmax(logits, selection);
        let dispatch = DispatchPlan::from_routes(active.len(), routes);

        let mut loads = LayerLoads {
            layer: p.layer,
            full_width: p.experts.is_none() || active.len() == full_e,
            per_modality: std::array::from_fn(|_| vec![0.0; full_e]),
        };
        let mut out: Option<Var> = None;
        for (slot, tokens) in dispatch.per_expert.iter().enumerate() {
            if tokens.is_empty() {
                continue;
            }
            let expert = active[slot];
            for &t in tokens {
                loads.per_modality[seq.modality[t].index()][expert] += 1.0;
            }
            let ew = &b.experts[expert];
            let xin = tape.gather_rows(h, tokens.clone());
            let a = tape.matmul(xin, ew.w_in);
            let a = tape.silu(a);
            let y = tape.matmul(a, ew.w_out);
            let pos = tokens
                .iter()
                .map(|&t| {
                    let k = dispatch.per_token[t].experts.iter().position(|&e| e == slot).expect("token routed to slot");
                    (t, k)
                })
                .collect();
            let g = tape.gather_entries(gates, pos);
            let y = tape.mul_col(y, g);
            let y = tape.scatter_rows(y, tokens.clone(), n);
            out = Some(match out {
                None => y,
                Some(acc) => tape.add(acc, y),
            });
        }
        Ok((out.expect("every token routes to at least one expert"), loads))
    }

    fn text_loss(
        &self,
        tape: &mut Tape,
        w: &Weights<Var>,
        hidden: Var,
        seq: &TokenSequence,
        losses: &mut ModalityLosses,
    ) -> Result<(), ModelError> {
        let (mut rows, mut targets, mut weights) = (Vec::new(), Vec::new(), Vec::new());
        for (i, t) in seq.targets.iter().enumerate() {
            if let Target::Text(id) = t {
                rows.push(i);
                targets.push(*id);
                weights.push(seq.weights[i]);
            }
        }
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return Ok(());
        }
        let h = tape.gather_rows(hidden, rows);
        let logits = tape.matmul(h, w.text_head);
        let m = Modality::Text.index();
        losses.losses[m] = Some(tape.cross_entropy(logits, &targets, &weights)?);
        losses.weight[m] = total;
        Ok(())
    }

    fn bit_loss(
        &self,
        tape: &mut Tape,
        w: &Weights<Var>,
        hidden: Var,
        seq: &TokenSequence,
        losses: &mut ModalityLosses,
    ) -> Result<(), ModelError> {
        let (mut rows, mut targets, mut weights) = (Vec::new(), Vec::new(), Vec::new());
        for (i, t) in seq.targets.iter().enumerate() {
            if let Target::Bits(b) = t {
                rows.push(i);
                targets.extend(b.iter().map(|&x| f64::from(x)));
                weights.push(seq.weights[i]);
            }
        }
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return Ok(());
        }
        let targets = Tensor::matrix(rows.len(), self.config.bits, targets);
        let h = tape.gather_rows(hidden, rows);
        let logits = tape.matmul(h, w.bit_head);
        let m = Modality::Vision.index();
        losses.losses[m] = Some(tape.bce_with_logits(logits, &targets, &weights)?);
        losses.weight[m] = total;
        Ok(())
    }

    /// Teacher-forced next-codec loss: mean over levels of the weighted
    /// cross-entropy of each level's head.
    fn audio_loss(
        &self,
        tape: &mut Tape,
        w: &Weights<Var>,
        hidden: Var,
        states: &[Var],
        seq: &TokenSequence,
        losses: &mut ModalityLosses,
    ) -> Result<(), ModelError> {
        let (mut rows, mut codes, mut weights) = (Vec::new(), Vec::new(), Vec::new());
        for (i, t) in seq.targets.iter().enumerate() {
            if let Target::Audio(c) = t {
                rows.push(i);
                codes.push(c.clone());
                weights.push(seq.weights[i]);
            }
        }
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return Ok(());
        }
        let levels = self.config.audio_levels;
        let bases: Vec<Var> = (0..levels)
            .map(|l| match self.config.ncp_placement {
                NcpPlacement::Final => hidden,
                NcpPlacement::TopLayers => {
                    let depth = states.len();
                    let idx = (depth + l).saturating_sub(levels).min(depth.saturating_sub(1));
                    match states.get(idx) {
                        Some(&s) => tape.rms_norm(s, w.final_norm),
                        None => hidden,
                    }
                }
            })
            .collect();
        let bases: Vec<Var> = bases.into_iter().map(|b| tape.gather_rows(b, rows.clone())).collect();
        let mean = ncp_loss_tape(tape, &bases, &w.audio_heads, &w.audio_tables, &codes, &weights)?;
        let m = Modality::Audio.index();
        losses.losses[m] = Some(mean);
        losses.weight[m] = total;
        Ok(())
    }
}

/// Small configuration used throughout the test suites.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        d_model: 12,
        layers: 4,
        heads: 2,
        experts: 8,
        expert_hidden: 6,
        top_k: 2,
        text_vocab: 11,
        bits: 5,
        audio_levels: 3,
        audio_codes: 7,
        rope_base: 10_000.0,
        ncp_placement: NcpPlacement::Final,
        bias_speed: 1e-3,
    }
}
