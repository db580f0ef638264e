//! Unified spatiotemporal rotary positions.
//!
//! Every token carries a `(t, h, w)` triple. Text and audio tokens use
//! `t = h = w` equal to a running counter; all tokens of a visual frame
//! share one `t` and take center-aligned spatial coordinates on the finest
//! grid, so coarse scales land on the geometric centers of the regions they
//! cover.
//!
//! The head dimension is split into three contiguous bands of rotary pairs
//! for `t`, `h` and `w`. When the pair count is not divisible by three the
//! remainder pairs go to the `t` band.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// RoPE base used by the flagship configuration.
pub const DEFAULT_ROPE_BASE: f64 = 1_000_000.0;

#[derive(Debug, Error, PartialEq)]
pub enum RopeError {
    #[error("head dimension {0} must be even and at least 6")]
    BadHeadDim(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PositionTriple {
    pub t: f64,
    pub h: f64,
    pub w: f64,
}

impl PositionTriple {
    pub fn new(t: f64, h: f64, w: f64) -> Self {
        Self { t, h, w }
    }

    /// Sequence-style position with `t = h = w`.
    pub fn uniform(index: f64) -> Self {
        Self::new(index, index, index)
    }
}

/// One segment of an interleaved multimodal layout.
#[derive(Debug, Clone, PartialEq)]
pub enum Segment {
    Text(usize),
    Audio(usize),
    /// A visual frame given by its scale grids `(h_s, w_s)`, coarse to fine.
    Frame(Vec<(usize, usize)>),
}

/// Center-aligned coordinates of the cells of an axis of extent `coarse`
/// on an axis of extent `fine`: `(i + 0.5)·(fine / coarse) − 0.5`.
pub fn center_align_axis(coarse: usize, fine: usize) -> Vec<f64> {
    let ratio = fine as f64 / coarse as f64;
    (0..coarse).map(|i| (i as f64 + 0.5) * ratio - 0.5).collect()
}

/// Center-aligned `(h, w)` for every cell of a `hs × ws` grid in raster
/// order, relative to the finest `H × W` grid.
pub fn center_align_scale(scale: (usize, usize), finest: (usize, usize)) -> Vec<(f64, f64)> {
    let hs = center_align_axis(scale.0, finest.0);
    let ws = center_align_axis(scale.1, finest.1);
    hs.iter().flat_map(|&h| ws.iter().map(move |&w| (h, w))).collect()
}

/// Assigns a position triple to every token of `layout`, in layout order.
///
/// Text and audio tokens take the running counter (starting at `start`) on
/// all three axes. Each frame takes the next counter value as `t` for all
/// of its tokens and advances the counter by one, so text after a frame
/// resumes at `max(previous t) + 1`.
pub fn assign_positions(layout: &[Segment], start: usize) -> Vec<PositionTriple> {
    let mut out = Vec::new();
    let mut counter = start as f64;
    for seg in layout {
        match seg {
            Segment::Text(n) | Segment::Audio(n) => {
                for _ in 0..*n {
                    out.push(PositionTriple::uniform(counter));
                    counter += 1.0;
                }
            }
            Segment::Frame(scales) => {
                let Some(&finest) = scales.last() else { continue };
                for &grid in scales {
                    for (h, w) in center_align_scale(grid, finest) {
                        out.push(PositionTriple::new(counter, h, w));
                    }
                }
                counter += 1.0;
            }
        }
    }
    out
}

/// Pair counts of the `(t, h, w)` bands for a head of dimension `dim`.
pub fn band_pairs(dim: usize) -> Result<[usize; 3], RopeError> {
    if dim % 2 != 0 || dim < 6 {
        return Err(RopeError::BadHeadDim(dim));
    }
    let pairs = dim / 2;
    let per = pairs / 3;
    Ok([per + pairs % 3, per, per])
}

/// Rotation angle of every pair of a head of dimension `dim` at `pos`.
/// Within a band of `m` pairs, pair `p` turns at frequency `base^(−p/m)`.
pub fn rope_angles(pos: PositionTriple, dim: usize, base: f64) -> Result<Vec<f64>, RopeError> {
    let bands = band_pairs(dim)?;
    let mut angles = Vec::with_capacity(dim / 2);
    for (m, coord) in bands.into_iter().zip([pos.t, pos.h, pos.w]) {
        for p in 0..m {
            let freq = base.powf(-(p as f64) / m as f64);
            angles.push(coord * freq);
        }
    }
    Ok(angles)
}

/// Rotates a head vector by its position. Norm-preserving.
pub fn rotate(vec: &[f64], pos: PositionTriple, base: f64) -> Result<Vec<f64>, RopeError> {
    let angles = rope_angles(pos, vec.len(), base)?;
    let mut out = vec.to_vec();
    for (p, &theta) in angles.iter().enumerate() {
        let (s, c) = theta.sin_cos();
        let (a, b) = (vec[2 * p], vec[2 * p + 1]);
        out[2 * p] = a * c - b * s;
        out[2 * p + 1] = a * s + b * c;
    }
    Ok(out)
}
