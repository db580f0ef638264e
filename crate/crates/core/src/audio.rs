//! Residual vector quantization and next-codec prediction.
//!
//! Each audio frame is `L` codes; level 0 carries the coarsest content and
//! every later level quantizes the residual left by the earlier ones. A
//! frame is embedded as the sum of its per-level table rows. Generation
//! predicts one level at a time and adds the chosen code's embedding back
//! into the hidden state before predicting the next level.

use std::fmt::Write as _;

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kernel::{softmax_row, KernelError, Tape, Tensor, Var};

/// Nominal codec frame rate.
pub const FRAME_RATE_HZ: f64 = 12.5;

#[derive(Debug, Error, PartialEq)]
pub enum AudioError {
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("code {code} at level {level} outside [0, {size})")]
    CodeOutOfRange { level: usize, code: usize, size: usize },
    #[error("teacher-forced generation needs a ground-truth frame")]
    ModeMissingGroundTruth,
    #[error("codebooks need at least one level and one entry")]
    EmptyCodebooks,
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Kernel(#[from] KernelError),
}

/// `L` levels of `C × D` entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Codebooks {
    pub levels: Vec<Tensor>,
}

impl Codebooks {
    pub fn new(levels: Vec<Tensor>) -> Result<Self, AudioError> {
        let Some(first) = levels.first() else {
            return Err(AudioError::EmptyCodebooks);
        };
        let (c, d) = (first.rows(), first.cols());
        if c == 0 || d == 0 {
            return Err(AudioError::EmptyCodebooks);
        }
        if levels.iter().any(|t| t.shape() != [c, d] || !t.is_finite()) {
            return Err(AudioError::DimMismatch("levels must share a finite C × D shape".into()));
        }
        Ok(Self { levels })
    }

    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn size(&self) -> usize {
        self.levels[0].rows()
    }

    pub fn dim(&self) -> usize {
        self.levels[0].cols()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CodecFrame {
    pub codes: Vec<usize>,
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the entry nearest to `x`, ties to the lower index.
pub fn nearest_entry(book: &Tensor, x: &[f64]) -> usize {
    let mut best = (0, f64::INFINITY);
    for i in 0..book.rows() {
        let d = squared_distance(book.row(i), x);
        if d < best.1 {
            best = (i, d);
        }
    }
    best.0
}

/// Greedy residual quantization; returns the frame and final residual.
pub fn rvq_encode(feature: &[f64], books: &Codebooks) -> Result<(CodecFrame, Vec<f64>), AudioError> {
    if feature.len() != books.dim() {
        return Err(AudioError::DimMismatch(format!("feature {} vs codebook {}", feature.len(), books.dim())));
    }
    let mut residual = feature.to_vec();
    let mut codes = Vec::with_capacity(books.num_levels());
    for book in &books.levels {
        let c = nearest_entry(book, &residual);
        residual.iter_mut().zip(book.row(c)).for_each(|(r, e)| *r -= e);
        codes.push(c);
    }
    Ok((CodecFrame { codes }, residual))
}

fn check_codes(frame: &CodecFrame, tables: &[Tensor]) -> Result<(), AudioError> {
    if frame.codes.len() != tables.len() {
        return Err(AudioError::DimMismatch(format!("{} codes for {} levels", frame.codes.len(), tables.len())));
    }
    for (level, (&code, t)) in frame.codes.iter().zip(tables).enumerate() {
        if code >= t.rows() {
            return Err(AudioError::CodeOutOfRange { level, code, size: t.rows() });
        }
    }
    Ok(())
}

/// `Σ_l tables[l][code_l]`.
pub fn additive_embed(frame: &CodecFrame, tables: &[Tensor]) -> Result<Vec<f64>, AudioError> {
    check_codes(frame, tables)?;
    let d = tables.first().map_or(0, Tensor::cols);
    if tables.iter().any(|t| t.cols() != d) {
        return Err(AudioError::DimMismatch("tables disagree in width".into()));
    }
    let mut out = vec![0.0; d];
    for (&code, t) in frame.codes.iter().zip(tables) {
        out.iter_mut().zip(t.row(code)).for_each(|(o, v)| *o += v);
    }
    Ok(out)
}

/// Reconstruction: the sum of the selected entries.
pub fn rvq_decode(frame: &CodecFrame, books: &Codebooks) -> Result<Vec<f64>, AudioError> {
    additive_embed(frame, &books.levels)
}

/// Level-by-level k-means on residuals. Centroids start at distinct
/// training points; empty clusters keep their previous centroid.
pub fn fit_codebooks(features: &[Vec<f64>], levels: usize, size: usize, iters: usize, seed: u64) -> Result<Codebooks, AudioError> {
    let Some(d) = features.first().map(Vec::len) else {
        return Err(AudioError::EmptyCodebooks);
    };
    if levels == 0 || size == 0 || d == 0 {
        return Err(AudioError::EmptyCodebooks);
    }
    if features.iter().any(|f| f.len() != d) {
        return Err(AudioError::DimMismatch("features disagree in width".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut residuals: Vec<Vec<f64>> = features.to_vec();
    let mut books = Vec::with_capacity(levels);
    for _ in 0..levels {
        let picks: Vec<usize> = if residuals.len() >= size {
            sample(&mut rng, residuals.len(), size).into_vec()
        } else {
            (0..size).map(|i| i % residuals.len()).collect()
        };
        let mut book = Tensor::from_rows(&picks.iter().map(|&i| residuals[i].clone()).collect::<Vec<_>>());
        for _ in 0..iters {
            let mut sums = Tensor::zeros(&[size, d]);
            let mut counts = vec![0usize; size];
            for r in &residuals {
                let c = nearest_entry(&book, r);
                counts[c] += 1;
                sums.row_mut(c).iter_mut().zip(r).for_each(|(s, v)| *s += v);
            }
            for (c, &n) in counts.iter().enumerate() {
                if n > 0 {
                    let mean: Vec<f64> = sums.row(c).iter().map(|s| s / n as f64).collect();
                    book.row_mut(c).copy_from_slice(&mean);
                }
            }
        }
        for r in residuals.iter_mut() {
            let c = nearest_entry(&book, r);
            r.iter_mut().zip(book.row(c)).for_each(|(x, e)| *x -= e);
        }
        books.push(book);
    }
    Codebooks::new(books)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NcpMode {
    /// Feed back the ground-truth code at every level.
    TeacherForced,
    /// Feed back the argmax code.
    Greedy,
    /// Feed back a code drawn from `softmax(logits / temperature)`.
    Sampled { seed: u64, temperature: f64 },
}

/// Next-codec generation from one hidden state. `heads[l]` is `d × C`,
/// `tables[l]` is `C × d`. Returns the predicted code of every level; in
/// teacher-forced mode the predictions are argmax codes while the fed-back
/// codes come from `ground_truth`.
pub fn ncp_generate(
    hidden: &[f64],
    heads: &[Tensor],
    tables: &[Tensor],
    mode: NcpMode,
    ground_truth: Option<&CodecFrame>,
) -> Result<CodecFrame, AudioError> {
    let d = hidden.len();
    if heads.len() != tables.len()
        || heads.iter().any(|h| h.rows() != d)
        || tables.iter().zip(heads).any(|(t, h)| t.cols() != d || t.rows() != h.cols())
    {
        return Err(AudioError::DimMismatch("heads and tables are not aligned with the hidden width".into()));
    }
    if mode == NcpMode::TeacherForced {
        let gt = ground_truth.ok_or(AudioError::ModeMissingGroundTruth)?;
        check_codes(gt, tables)?;
    }
    let mut rng = match mode {
        NcpMode::Sampled { seed, .. } => Some(ChaCha8Rng::seed_from_u64(seed)),
        _ => None,
    };
    let mut h = hidden.to_vec();
    let mut codes = Vec::with_capacity(heads.len());
    for (l, (head, table)) in heads.iter().zip(tables).enumerate() {
        let logits: Vec<f64> = (0..head.cols()).map(|c| (0..d).map(|i| h[i] * head.get(i, c)).sum()).collect();
        let predicted = match (mode, rng.as_mut()) {
            (NcpMode::Sampled { temperature, .. }, Some(r)) => {
                let scaled: Vec<f64> = logits.iter().map(|x| x / temperature.max(1e-12)).collect();
                let probs = softmax_row(&scaled);
                WeightedIndex::new(&probs).map_err(|e| AudioError::DimMismatch(e.to_string()))?.sample(r)
            }
            _ => argmax(&logits),
        };
        let fed = match (mode, ground_truth) {
            (NcpMode::TeacherForced, Some(gt)) => gt.codes[l],
            _ => predicted,
        };
        h.iter_mut().zip(table.row(fed)).for_each(|(x, e)| *x += e);
        codes.push(predicted);
    }
    Ok(CodecFrame { codes })
}

/// First index of the maximum.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Teacher-forced next-codec loss on a tape: the mean over levels of the
/// weighted cross-entropy of head `l` applied to `bases[l] + Σ_{m<l}
/// tables[m][target_m]`. Every `bases[l]` is `rows × d`.
pub fn ncp_loss_tape(
    tape: &mut Tape,
    bases: &[Var],
    heads: &[Var],
    tables: &[Var],
    targets: &[Vec<usize>],
    weights: &[f64],
) -> Result<Var, KernelError> {
    let levels = heads.len();
    let mut fed: Option<Var> = None;
    let mut mean: Option<Var> = None;
    for l in 0..levels {
        let h = match fed {
            None => bases[l],
            Some(f) => tape.add(bases[l], f),
        };
        let logits = tape.matmul(h, heads[l]);
        let level_targets: Vec<usize> = targets.iter().map(|c| c[l]).collect();
        let loss = tape.cross_entropy(logits, &level_targets, weights)?;
        let term = tape.scale(loss, 1.0 / levels as f64);
        mean = Some(match mean {
            None => term,
            Some(m) => tape.add(m, term),
        });
        if l + 1 < levels {
            let e = tape.gather_rows(tables[l], level_targets);
            fed = Some(match fed {
                None => e,
                Some(f) => tape.add(f, e),
            });
        }
    }
    mean.ok_or_else(|| KernelError::ShapeMismatch("no codec levels".into()))
}

/// One frame per line, codes comma-separated.
pub fn frames_to_csv(frames: &[CodecFrame]) -> String {
    let mut s = String::new();
    for f in frames {
        let row: Vec<String> = f.codes.iter().map(usize::to_string).collect();
        let _ = writeln!(s, "{}", row.join(","));
    }
    s
}

/// Parses codec CSV; every row must have the same number of codes and,
/// when `books` is given, codes must be in range.
pub fn frames_from_csv(text: &str, books: Option<&Codebooks>) -> Result<Vec<CodecFrame>, AudioError> {
    let mut frames: Vec<CodecFrame> = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let body = raw.trim();
        if body.is_empty() || body.starts_with('#') {
            continue;
        }
        let codes = body
            .split(',')
            .map(|t| t.trim().parse::<usize>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| AudioError::Parse { line, msg: e.to_string() })?;
        if let Some(first) = frames.first() {
            if first.codes.len() != codes.len() {
                return Err(AudioError::Parse { line, msg: "row length differs from first row".into() });
            }
        }
        let frame = CodecFrame { codes };
        if let Some(b) = books {
            check_codes(&frame, &b.levels).map_err(|e| AudioError::Parse { line, msg: e.to_string() })?;
        }
        frames.push(frame);
    }
    Ok(frames)
}
