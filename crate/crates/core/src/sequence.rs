//! The unified token stream every modality is serialized into.

use serde::{Deserialize, Serialize};

use crate::maskgen::{build_causal, MaskSpec};
use crate::unirope::{assign_positions, PositionTriple, Segment};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Modality {
    Text,
    Vision,
    Audio,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Text, Modality::Vision, Modality::Audio];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn tag(self) -> &'static str {
        match self {
            Modality::Text => "text",
            Modality::Vision => "vision",
            Modality::Audio => "audio",
        }
    }
}

/// What a token feeds into the backbone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum TokenInput {
    Text(usize),
    /// A bit vector, embedded as `Σ_b (2·bit_b − 1)·W_b`.
    Bits(Vec<u8>),
    /// Learned start vector (coarsest scale of a frame).
    Start,
    /// RVQ codes of one frame, embedded additively across levels.
    Audio(Vec<usize>),
}

/// What a token is trained to predict.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Target {
    None,
    Text(usize),
    Bits(Vec<u8>),
    Audio(Vec<usize>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    pub inputs: Vec<TokenInput>,
    pub modality: Vec<Modality>,
    pub positions: Vec<PositionTriple>,
    pub mask: MaskSpec,
    pub targets: Vec<Target>,
    pub weights: Vec<f64>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    /// All per-token arrays share one length and the mask covers it.
    pub fn is_consistent(&self) -> bool {
        let n = self.inputs.len();
        self.modality.len() == n
            && self.positions.len() == n
            && self.targets.len() == n
            && self.weights.len() == n
            && self.mask.len() == n
    }

    /// Next-token text sequence: token `i` predicts token `i + 1`.
    pub fn text(tokens: &[usize]) -> Self {
        Self::autoregressive(tokens, Modality::Text, |&t| TokenInput::Text(t), |&t| Target::Text(t))
    }

    /// Next-frame audio sequence over RVQ code frames.
    pub fn audio(frames: &[Vec<usize>]) -> Self {
        Self::autoregressive(frames, Modality::Audio, |f| TokenInput::Audio(f.clone()), |f| Target::Audio(f.clone()))
    }

    fn autoregressive<T>(
        items: &[T],
        modality: Modality,
        input: impl Fn(&T) -> TokenInput,
        target: impl Fn(&T) -> Target,
    ) -> Self {
        let n = items.len();
        let segment = match modality {
            Modality::Audio => Segment::Audio(n),
            _ => Segment::Text(n),
        };
        Self {
            inputs: items.iter().map(input).collect(),
            modality: vec![modality; n],
            positions: assign_positions(&[segment], 0),
            mask: build_causal(n),
            targets: (0..n).map(|i| items.get(i + 1).map_or(Target::None, &target)).collect(),
            weights: (0..n).map(|i| if i + 1 < n { 1.0 } else { 0.0 }).collect(),
        }
    }
}
