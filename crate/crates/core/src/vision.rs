//! Bit-code visual tokens, next-frame-and-scale sequences, and the
//! attention-based CNN/ViT patch merger.
//!
//! The quantizer is a stand-in: a latent channel maps to bit 1 iff it is
//! non-negative, and coarser scales average-pool the finest latent first.

use std::fmt::Write as _;
use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kernel::{KernelError, Tape, Tensor, Var};
use crate::maskgen::{build_scale_causal, MaskError};
use crate::sequence::{Modality, Target, TokenInput, TokenSequence};
use crate::unirope::{assign_positions, Segment};

#[derive(Debug, Error, PartialEq)]
pub enum VisionError {
    #[error("pyramid is empty or not coarse-to-fine")]
    BadPyramid,
    #[error("latent grid {got:?} does not match finest scale {expected:?}")]
    GridMismatch { expected: (usize, usize), got: (usize, usize) },
    #[error("frame does not match the pyramid: {0}")]
    PyramidMismatch(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("probability {0} outside [0, 1]")]
    BadProbability(f64),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error(transparent)]
    Kernel(#[from] KernelError),
}

/// Grids `(h_s, w_s)` from coarse to fine.
pub type ScalePyramid = Vec<(usize, usize)>;

pub fn validate_pyramid(pyramid: &[(usize, usize)]) -> Result<(), VisionError> {
    let ok = !pyramid.is_empty()
        && pyramid.iter().all(|&(h, w)| h > 0 && w > 0)
        && pyramid.windows(2).all(|p| p[0].0 <= p[1].0 && p[0].1 <= p[1].1);
    if ok {
        Ok(())
    } else {
        Err(VisionError::BadPyramid)
    }
}

/// A `h × w × channels` latent, channel-fastest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Latent {
    pub h: usize,
    pub w: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Latent {
    pub fn new(h: usize, w: usize, channels: usize, data: Vec<f64>) -> Result<Self, VisionError> {
        if data.len() != h * w * channels {
            return Err(VisionError::ShapeMismatch(format!(
                "{} values for {h}×{w}×{channels}",
                data.len()
            )));
        }
        Ok(Self { h, w, channels, data })
    }

    pub fn cell(&self, r: usize, c: usize) -> &[f64] {
        let start = (r * self.w + c) * self.channels;
        &self.data[start..start + self.channels]
    }
}

/// Bit vectors of one scale in raster order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BitGrid {
    pub h: usize,
    pub w: usize,
    pub cells: Vec<Vec<u8>>,
}

impl BitGrid {
    pub fn cell(&self, r: usize, c: usize) -> &[u8] {
        &self.cells[r * self.w + c]
    }
}

/// Per-scale bit codes of one frame.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BitCodeMap {
    pub bits: usize,
    pub scales: Vec<BitGrid>,
}

impl BitCodeMap {
    pub fn pyramid(&self) -> ScalePyramid {
        self.scales.iter().map(|g| (g.h, g.w)).collect()
    }

    pub fn bit_count(&self) -> usize {
        self.scales.iter().map(|g| g.cells.len() * self.bits).sum()
    }
}

pub fn bit_quantize(latent: &Latent) -> BitGrid {
    BitGrid {
        h: latent.h,
        w: latent.w,
        cells: latent
            .data
            .chunks(latent.channels.max(1))
            .take(latent.h * latent.w)
            .map(|cell| cell.iter().map(|&v| u8::from(v >= 0.0)).collect())
            .collect(),
    }
}

/// Adaptive average pooling: output cell `i` covers input rows
/// `⌊i·H/h⌋ .. ⌈(i+1)·H/h⌉`, and likewise for columns.
pub fn average_pool(latent: &Latent, h: usize, w: usize) -> Latent {
    let ch = latent.channels;
    let mut data = Vec::with_capacity(h * w * ch);
    for i in 0..h {
        let (r0, r1) = (i * latent.h / h, ((i + 1) * latent.h).div_ceil(h));
        for j in 0..w {
            let (c0, c1) = (j * latent.w / w, ((j + 1) * latent.w).div_ceil(w));
            let mut acc = vec![0.0; ch];
            for r in r0..r1 {
                for c in c0..c1 {
                    acc.iter_mut().zip(latent.cell(r, c)).for_each(|(a, v)| *a += v);
                }
            }
            let count = ((r1 - r0) * (c1 - c0)) as f64;
            data.extend(acc.into_iter().map(|a| a / count));
        }
    }
    Latent { h, w, channels: ch, data }
}

pub fn build_pyramid_codes(latent: &Latent, pyramid: &[(usize, usize)]) -> Result<BitCodeMap, VisionError> {
    validate_pyramid(pyramid)?;
    let finest = *pyramid.last().expect("validated non-empty");
    if (latent.h, latent.w) != finest {
        return Err(VisionError::GridMismatch {
            expected: finest,
            got: (latent.h, latent.w),
        });
    }
    let scales = pyramid
        .iter()
        .map(|&(h, w)| {
            if (h, w) == finest {
                bit_quantize(latent)
            } else {
                bit_quantize(&average_pool(latent, h, w))
            }
        })
        .collect();
    Ok(BitCodeMap {
        bits: latent.channels,
        scales,
    })
}

/// Flips every bit independently with probability `flip_prob`, drawing
/// one uniform per bit in scale, raster, bit order.
pub fn corrupt_bits(codes: &BitCodeMap, flip_prob: f64, seed: u64) -> Result<BitCodeMap, VisionError> {
    if !(0.0..=1.0).contains(&flip_prob) {
        return Err(VisionError::BadProbability(flip_prob));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = codes.clone();
    for grid in &mut out.scales {
        for cell in &mut grid.cells {
            for bit in cell.iter_mut() {
                if rng.gen::<f64>() < flip_prob {
                    *bit ^= 1;
                }
            }
        }
    }
    Ok(out)
}

/// `w_s = (1/T_s) / Σ_j (1/T_j)` with `T_s = h_s·w_s`.
pub fn scale_loss_weights(pyramid: &[(usize, usize)]) -> Result<Vec<f64>, VisionError> {
    validate_pyramid(pyramid)?;
    let inv: Vec<f64> = pyramid.iter().map(|&(h, w)| 1.0 / (h * w) as f64).collect();
    let total: f64 = inv.iter().sum();
    Ok(inv.into_iter().map(|v| v / total).collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NfspOptions {
    /// Probability of flipping each history bit.
    pub flip_prob: f64,
    pub seed: u64,
    /// Temporal position of the first frame.
    pub start_t: usize,
}

impl NfspOptions {
    pub fn clean() -> Self {
        Self { flip_prob: 0.0, seed: 0, start_t: 0 }
    }
}

/// Serializes frames for next-frame-and-scale prediction.
///
/// Order is frame-major, then scale, then raster. A scale-0 token reads the
/// start vector; a scale-`s` token reads the (corrupted) bits of its parent
/// cell at scale `s − 1`. Targets are the token's own uncorrupted bits.
pub fn build_nfsp_sequence(
    frames: &[BitCodeMap],
    pyramid: &[(usize, usize)],
    opts: NfspOptions,
) -> Result<TokenSequence, VisionError> {
    validate_pyramid(pyramid)?;
    if frames.is_empty() {
        return Err(VisionError::PyramidMismatch("no frames".into()));
    }
    let bits = frames[0].bits;
    for (f, frame) in frames.iter().enumerate() {
        if frame.pyramid() != pyramid || frame.bits != bits {
            return Err(VisionError::PyramidMismatch(format!("frame {f}")));
        }
        if frame.scales.iter().flat_map(|g| &g.cells).any(|c| c.len() != bits || c.iter().any(|&b| b > 1)) {
            return Err(VisionError::PyramidMismatch(format!("frame {f} has malformed bit cells")));
        }
    }
    let weights = scale_loss_weights(pyramid)?;
    let mut seq = TokenSequence {
        inputs: Vec::new(),
        modality: Vec::new(),
        positions: Vec::new(),
        mask: build_scale_causal(&vec![pyramid.iter().map(|&(h, w)| h * w).collect(); frames.len()])?,
        targets: Vec::new(),
        weights: Vec::new(),
    };
    for (f, frame) in frames.iter().enumerate() {
        let history = corrupt_bits(frame, opts.flip_prob, opts.seed.wrapping_add(f as u64))?;
        for (s, grid) in frame.scales.iter().enumerate() {
            for r in 0..grid.h {
                for c in 0..grid.w {
                    let input = if s == 0 {
                        TokenInput::Start
                    } else {
                        let parent = &history.scales[s - 1];
                        TokenInput::Bits(parent.cell(r * parent.h / grid.h, c * parent.w / grid.w).to_vec())
                    };
                    seq.inputs.push(input);
                    seq.targets.push(Target::Bits(grid.cell(r, c).to_vec()));
                    seq.weights.push(weights[s]);
                    seq.modality.push(Modality::Vision);
                }
            }
        }
    }
    let segments: Vec<Segment> = frames.iter().map(|_| Segment::Frame(pyramid.to_vec())).collect();
    seq.positions = assign_positions(&segments, opts.start_t);
    Ok(seq)
}

/// Hex fixture text: a `bits B` line opens each frame, a `scale h w` line
/// opens each scale, followed by `h` rows of `w` hex cells. Each cell holds
/// `⌈B/4⌉` hex digits with bit 0 as the most significant of the `B` bits.
pub fn codes_to_hex(frames: &[BitCodeMap]) -> String {
    let mut s = String::new();
    for frame in frames {
        let digits = frame.bits.div_ceil(4);
        let _ = writeln!(s, "bits {}", frame.bits);
        for grid in &frame.scales {
            let _ = writeln!(s, "scale {} {}", grid.h, grid.w);
            for r in 0..grid.h {
                let row: Vec<String> = (0..grid.w)
                    .map(|c| {
                        let v = grid.cell(r, c).iter().fold(0u128, |acc, &b| (acc << 1) | u128::from(b));
                        format!("{v:0digits$x}")
                    })
                    .collect();
                let _ = writeln!(s, "{}", row.join(" "));
            }
        }
    }
    s
}

/// Bits per cell accepted by the hex format.
pub const MAX_HEX_BITS: usize = 128;

pub fn codes_from_hex(text: &str) -> Result<Vec<BitCodeMap>, VisionError> {
    let err = |line: usize, msg: &str| VisionError::Parse { line, msg: msg.to_string() };
    let mut frames: Vec<BitCodeMap> = Vec::new();
    let mut pending_rows = 0usize;
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let body = raw.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let mut words = body.split_whitespace();
        let head = words.next().unwrap_or("");
        let parse_num = |w: Option<&str>| -> Result<usize, VisionError> {
            w.ok_or_else(|| err(line, "missing number"))?
                .parse::<usize>()
                .map_err(|_| err(line, "bad number"))
        };
        if pending_rows == 0 {
            match head {
                "bits" => {
                    let b = parse_num(words.next())?;
                    if b == 0 || b > MAX_HEX_BITS {
                        return Err(err(line, "bit width must be in 1..=128"));
                    }
                    frames.push(BitCodeMap { bits: b, scales: Vec::new() });
                }
                "scale" => {
                    let frame = frames.last_mut().ok_or_else(|| err(line, "scale before bits"))?;
                    let (h, w) = (parse_num(words.next())?, parse_num(words.next())?);
                    if h == 0 || w == 0 || h.saturating_mul(w) > 1 << 20 {
                        return Err(err(line, "scale extents must be positive and small"));
                    }
                    frame.scales.push(BitGrid { h, w, cells: Vec::with_capacity(h * w) });
                    pending_rows = h;
                }
                _ => return Err(err(line, "expected `bits` or `scale`")),
            }
            if words.next().is_some() {
                return Err(err(line, "trailing tokens"));
            }
            continue;
        }
        let frame = frames.last_mut().expect("rows follow a scale");
        let (bits, digits) = (frame.bits, frame.bits.div_ceil(4));
        let grid = frame.scales.last_mut().expect("rows follow a scale");
        let cells: Vec<&str> = body.split_whitespace().collect();
        if cells.len() != grid.w {
            return Err(err(line, "wrong number of cells in row"));
        }
        for cell in cells {
            if cell.len() != digits {
                return Err(err(line, "wrong number of hex digits"));
            }
            let v = u128::from_str_radix(cell, 16).map_err(|_| err(line, "bad hex digit"))?;
            if bits < 128 && v >> bits != 0 {
                return Err(err(line, "value exceeds bit width"));
            }
            grid.cells.push((0..bits).map(|b| ((v >> (bits - 1 - b)) & 1) as u8).collect());
        }
        pending_rows -= 1;
    }
    if pending_rows != 0 {
        return Err(err(text.lines().count(), "truncated scale"));
    }
    if let Some(f) = frames.iter().position(|f| f.scales.is_empty()) {
        return Err(err(0, &format!("frame {f} has no scales")));
    }
    Ok(frames)
}

/// CNN and ViT features of `N` merged tokens, `K` patches each.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchFeatures {
    pub n: usize,
    pub k: usize,
    /// `(N·K) × D_cnn`, token-major.
    pub cnn: Tensor,
    /// `(N·K) × D_vit`, token-major.
    pub vit: Tensor,
}

/// Patches merged per token for images.
pub const PATCHES_IMAGE: usize = 4;
/// Patches merged per token for video.
pub const PATCHES_VIDEO: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchMergerParams<T> {
    /// `D_cnn × D_vit`.
    pub proj: T,
    pub wq: T,
    pub wk: T,
    pub wv: T,
    pub wo: T,
    /// `D_vit × D_out`.
    pub out: T,
}

impl<T> PatchMergerParams<T> {
    pub fn flat(&self) -> [&T; 6] {
        [&self.proj, &self.wq, &self.wk, &self.wv, &self.wo, &self.out]
    }
}

impl PatchMergerParams<Tensor> {
    pub fn seeded(d_cnn: usize, d_vit: usize, d_out: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = |r: usize, c: usize| {
            let b = (3.0 / r as f64).sqrt();
            Tensor::matrix(r, c, (0..r * c).map(|_| rng.gen_range(-b..b)).collect())
        };
        Self {
            proj: m(d_cnn, d_vit),
            wq: m(d_vit, d_vit),
            wk: m(d_vit, d_vit),
            wv: m(d_vit, d_vit),
            wo: m(d_vit, d_vit),
            out: m(d_vit, d_out),
        }
    }

    pub fn bind(&self, tape: &mut Tape) -> PatchMergerParams<Var> {
        PatchMergerParams {
            proj: tape.leaf(self.proj.clone()),
            wq: tape.leaf(self.wq.clone()),
            wk: tape.leaf(self.wk.clone()),
            wv: tape.leaf(self.wv.clone()),
            wo: tape.leaf(self.wo.clone()),
            out: tape.leaf(self.out.clone()),
        }
    }
}

fn check_features(cnn: &Tensor, vit: &Tensor, n: usize, k: usize, p: &PatchMergerParams<Tensor>) -> Result<(), VisionError> {
    let (d_cnn, d_vit) = (p.proj.rows(), p.proj.cols());
    let ok = cnn.shape() == [n * k, d_cnn]
        && vit.shape() == [n * k, d_vit]
        && p.wq.shape() == [d_vit, d_vit]
        && p.wk.shape() == [d_vit, d_vit]
        && p.wv.shape() == [d_vit, d_vit]
        && p.wo.shape() == [d_vit, d_vit]
        && p.out.rows() == d_vit
        && k > 0;
    if ok {
        Ok(())
    } else {
        Err(VisionError::ShapeMismatch(format!(
            "cnn {:?}, vit {:?}, N={n}, K={k}, proj {:?}",
            cnn.shape(),
            vit.shape(),
            p.proj.shape()
        )))
    }
}

/// Patch merger on a tape. `cnn` and `vit` are the feature variables.
/// Per token: project CNN patches to `D_vit`, stack with the ViT patches
/// into `2K` rows, single-head self-attention over all of them, mean-pool,
/// then project to the output width.
pub fn patch_merge_tape(
    tape: &mut Tape,
    params: &PatchMergerParams<Var>,
    cnn: Var,
    vit: Var,
    n: usize,
    k: usize,
) -> Var {
    let d_vit = tape.value(params.wq).rows();
    let all: Rc<Vec<Vec<usize>>> = Rc::new(vec![(0..2 * k).collect(); 2 * k]);
    let scale = 1.0 / (d_vit as f64).sqrt();
    let projected = tape.matmul(cnn, params.proj);
    let mut pooled = Vec::with_capacity(n);
    for t in 0..n {
        let rows: Vec<usize> = (t * k..(t + 1) * k).collect();
        let a = tape.gather_rows(projected, rows.clone());
        let b = tape.gather_rows(vit, rows);
        let x = tape.concat_rows(&[a, b]);
        let q = tape.matmul(x, params.wq);
        let kk = tape.matmul(x, params.wk);
        let v = tape.matmul(x, params.wv);
        let att = tape.attention(q, kk, v, all.clone(), 1, scale);
        let o = tape.matmul(att, params.wo);
        pooled.push(tape.mean_rows(o));
    }
    let stacked = tape.concat_rows(&pooled);
    tape.matmul(stacked, params.out)
}

/// Patch merger forward: `N × D_out`.
pub fn patch_merge(feat: &PatchFeatures, params: &PatchMergerParams<Tensor>) -> Result<Tensor, VisionError> {
    check_features(&feat.cnn, &feat.vit, feat.n, feat.k, params)?;
    if feat.n == 0 {
        return Ok(Tensor::zeros(&[0, params.out.cols()]));
    }
    let mut tape = Tape::new();
    let p = params.bind(&mut tape);
    let cnn = tape.leaf(feat.cnn.clone());
    let vit = tape.leaf(feat.vit.clone());
    let out = patch_merge_tape(&mut tape, &p, cnn, vit, feat.n, feat.k);
    Ok(tape.value(out).clone())
}
