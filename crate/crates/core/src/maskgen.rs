//! Heterogeneous attention masks in a compact column-interval form.
//!
//! For every key column `j`, a [`MaskSpec`] stores the sorted, disjoint,
//! merged list of query-row intervals `[lo, hi)` that may attend to `j`.
//! Every mask used by the crate (plain causal, scale-wise causal, windowed
//! temporal, history-dropped) is built here and converted to a dense boolean
//! matrix only for testing.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MaskError {
    #[error("visual layout has no frames or a frame with no scales")]
    EmptyPyramid,
    #[error("scale token counts must be >= 1")]
    EmptyScale,
    #[error("window must be >= 1 frame")]
    ZeroWindow,
    #[error("drop probability {0} outside [0, 1]")]
    BadProbability(f64),
    #[error("interval [{lo}, {hi}) invalid for sequence length {n}")]
    BadInterval { lo: usize, hi: usize, n: usize },
    #[error("expected {expected} columns, got {got}")]
    ColumnCount { expected: usize, got: usize },
    #[error("dense mask is not square")]
    NotSquare,
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

/// Half-open query-row interval `[lo, hi)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Interval {
    pub lo: usize,
    pub hi: usize,
}

impl Interval {
    pub fn new(lo: usize, hi: usize) -> Self {
        Self { lo, hi }
    }

    pub fn len(&self) -> usize {
        self.hi - self.lo
    }

    pub fn is_empty(&self) -> bool {
        self.hi <= self.lo
    }

    pub fn contains(&self, row: usize) -> bool {
        self.lo <= row && row < self.hi
    }
}

/// Column-interval attention mask over a sequence of length `n`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskSpec {
    n: usize,
    columns: Vec<Vec<Interval>>,
}

impl MaskSpec {
    /// Validates and canonicalizes: intervals are sorted, overlapping or
    /// adjacent ones merged, empty ones dropped.
    pub fn new(n: usize, columns: Vec<Vec<Interval>>) -> Result<Self, MaskError> {
        if columns.len() != n {
            return Err(MaskError::ColumnCount {
                expected: n,
                got: columns.len(),
            });
        }
        let mut canon = Vec::with_capacity(n);
        for mut col in columns {
            for iv in &col {
                if iv.lo > iv.hi || iv.hi > n {
                    return Err(MaskError::BadInterval {
                        lo: iv.lo,
                        hi: iv.hi,
                        n,
                    });
                }
            }
            col.retain(|iv| !iv.is_empty());
            col.sort();
            canon.push(merge_sorted(col));
        }
        Ok(Self { n, columns: canon })
    }

    /// A mask with no visible pairs.
    pub fn empty(n: usize) -> Self {
        Self {
            n,
            columns: vec![Vec::new(); n],
        }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn columns(&self) -> &[Vec<Interval>] {
        &self.columns
    }

    pub fn column(&self, key: usize) -> &[Interval] {
        &self.columns[key]
    }

    pub fn is_visible(&self, query: usize, key: usize) -> bool {
        let col = &self.columns[key];
        // Intervals are sorted by `lo`; find the last one starting at or before `query`.
        let idx = col.partition_point(|iv| iv.lo <= query);
        idx > 0 && col[idx - 1].contains(query)
    }

    pub fn visible_pairs(&self) -> usize {
        self.columns
            .iter()
            .flat_map(|c| c.iter())
            .map(Interval::len)
            .sum()
    }

    /// Visible key indices for each query row, ascending.
    pub fn row_keys(&self) -> Vec<Vec<usize>> {
        let mut rows = vec![Vec::new(); self.n];
        for (key, col) in self.columns.iter().enumerate() {
            for iv in col {
                for row in &mut rows[iv.lo..iv.hi] {
                    row.push(key);
                }
            }
        }
        rows
    }

    /// Dense `n × n` boolean matrix indexed `[query][key]`.
    pub fn densify(&self) -> Vec<Vec<bool>> {
        let mut dense = vec![vec![false; self.n]; self.n];
        for (key, col) in self.columns.iter().enumerate() {
            for iv in col {
                for row in &mut dense[iv.lo..iv.hi] {
                    row[key] = true;
                }
            }
        }
        dense
    }

    /// Inverse of [`MaskSpec::densify`].
    pub fn compact(dense: &[Vec<bool>]) -> Result<Self, MaskError> {
        let n = dense.len();
        if dense.iter().any(|r| r.len() != n) {
            return Err(MaskError::NotSquare);
        }
        let mut columns = Vec::with_capacity(n);
        for key in 0..n {
            let mut col = Vec::new();
            let mut start = None;
            for (q, row) in dense.iter().enumerate() {
                match (row[key], start) {
                    (true, None) => start = Some(q),
                    (false, Some(lo)) => {
                        col.push(Interval::new(lo, q));
                        start = None;
                    }
                    _ => {}
                }
            }
            if let Some(lo) = start {
                col.push(Interval::new(lo, n));
            }
            columns.push(col);
        }
        Ok(Self { n, columns })
    }

    /// Serializes to the line-oriented fixture format: the length on the
    /// first line, then one line per key column listing `lo..hi` intervals.
    pub fn to_text(&self) -> String {
        self.to_string()
    }

    pub fn from_text(text: &str) -> Result<Self, MaskError> {
        let mut lines = text.lines();
        let header = lines.next().ok_or(MaskError::Parse {
            line: 1,
            msg: "missing length line".into(),
        })?;
        let n: usize = header.trim().parse().map_err(|_| MaskError::Parse {
            line: 1,
            msg: format!("bad length {header:?}"),
        })?;
        let mut columns = Vec::new();
        for (idx, line) in lines.enumerate() {
            let line_no = idx + 2;
            if columns.len() == n {
                if line.trim().is_empty() {
                    continue;
                }
                return Err(MaskError::Parse {
                    line: line_no,
                    msg: "more columns than the declared length".into(),
                });
            }
            let mut col = Vec::new();
            for tok in line.split_whitespace() {
                let (lo, hi) = tok.split_once("..").ok_or_else(|| MaskError::Parse {
                    line: line_no,
                    msg: format!("expected lo..hi, got {tok:?}"),
                })?;
                let parse = |s: &str| {
                    s.parse::<usize>().map_err(|_| MaskError::Parse {
                        line: line_no,
                        msg: format!("bad bound {s:?}"),
                    })
                };
                col.push(Interval::new(parse(lo)?, parse(hi)?));
            }
            columns.push(col);
        }
        if columns.len() != n {
            return Err(MaskError::ColumnCount {
                expected: n,
                got: columns.len(),
            });
        }
        Self::new(n, columns)
    }
}

impl fmt::Display for MaskSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{}", self.n)?;
        for col in &self.columns {
            let parts: Vec<String> = col.iter().map(|iv| format!("{}..{}", iv.lo, iv.hi)).collect();
            writeln!(f, "{}", parts.join(" "))?;
        }
        Ok(())
    }
}

fn merge_sorted(col: Vec<Interval>) -> Vec<Interval> {
    let mut out: Vec<Interval> = Vec::with_capacity(col.len());
    for iv in col {
        match out.last_mut() {
            Some(last) if iv.lo <= last.hi => last.hi = last.hi.max(iv.hi),
            _ => out.push(iv),
        }
    }
    out
}

/// Standard causal mask: query `i` sees key `j` iff `j <= i`.
pub fn build_causal(n: usize) -> MaskSpec {
    MaskSpec {
        n,
        columns: (0..n).map(|j| vec![Interval::new(j, n)]).collect(),
    }
}

/// Block-causal mask over consecutive groups: a token sees every token of
/// earlier groups and every token of its own group.
pub fn build_group_causal(group_sizes: &[usize]) -> MaskSpec {
    let n: usize = group_sizes.iter().sum();
    let mut columns = Vec::with_capacity(n);
    let mut start = 0;
    for &g in group_sizes {
        for _ in 0..g {
            columns.push(vec![Interval::new(start, n)]);
        }
        start += g;
    }
    MaskSpec::new(n, columns).expect("group-causal intervals are valid")
}

/// Token layout of a frame sequence: per frame, the token count of each scale
/// (coarse to fine).
fn validate_frames(frames: &[Vec<usize>]) -> Result<(), MaskError> {
    if frames.is_empty() || frames.iter().any(Vec::is_empty) {
        return Err(MaskError::EmptyPyramid);
    }
    if frames.iter().flatten().any(|&c| c == 0) {
        return Err(MaskError::EmptyScale);
    }
    Ok(())
}

/// Shared builder: own-frame visibility follows the scale rule; history
/// visibility between frames is decided by `sees_frame(query_frame, key_frame)`
/// for `key_frame < query_frame`.
fn build_frames_with(
    frames: &[Vec<usize>],
    sees_frame: impl Fn(usize, usize) -> bool,
) -> Result<MaskSpec, MaskError> {
    validate_frames(frames)?;
    let frame_sizes: Vec<usize> = frames.iter().map(|f| f.iter().sum()).collect();
    let mut frame_start = Vec::with_capacity(frames.len());
    let mut acc = 0;
    for &s in &frame_sizes {
        frame_start.push(acc);
        acc += s;
    }
    let n = acc;
    let mut columns = Vec::with_capacity(n);
    for (fj, scales) in frames.iter().enumerate() {
        let frame_end = frame_start[fj] + frame_sizes[fj];
        let mut group_start = frame_start[fj];
        for &count in scales {
            let mut col = vec![Interval::new(group_start, frame_end)];
            for fi in fj + 1..frames.len() {
                if sees_frame(fi, fj) {
                    col.push(Interval::new(frame_start[fi], frame_start[fi] + frame_sizes[fi]));
                }
            }
            let merged = merge_sorted(col);
            for _ in 0..count {
                columns.push(merged.clone());
            }
            group_start += count;
        }
    }
    Ok(MaskSpec { n, columns })
}

/// Scale-wise causal mask for next-frame-and-scale prediction. A token sees
/// all tokens of earlier frames, all tokens of earlier scales in its frame,
/// and every token of its own scale.
pub fn build_scale_causal(frames: &[Vec<usize>]) -> Result<MaskSpec, MaskError> {
    build_frames_with(frames, |_, _| true)
}

/// Scale-wise causal mask where history is limited to the `window - 1`
/// preceding frames.
pub fn build_windowed_temporal(frames: &[Vec<usize>], window: usize) -> Result<MaskSpec, MaskError> {
    if window == 0 {
        return Err(MaskError::ZeroWindow);
    }
    build_frames_with(frames, |fi, fj| fi - fj < window)
}

/// Draws which historical frames are hidden. One uniform variate is drawn
/// per historical frame (every frame except the last), in frame order, from
/// a `ChaCha8Rng` seeded with `seed`; the frame is dropped iff the variate is
/// below `drop_prob`.
pub fn draw_dropped_frames(num_frames: usize, drop_prob: f64, seed: u64) -> Result<Vec<bool>, MaskError> {
    if !(0.0..=1.0).contains(&drop_prob) {
        return Err(MaskError::BadProbability(drop_prob));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut dropped = vec![false; num_frames];
    for d in dropped.iter_mut().take(num_frames.saturating_sub(1)) {
        *d = rng.gen::<f64>() < drop_prob;
    }
    Ok(dropped)
}

/// Scale-wise causal mask with random historical frame masking: dropped
/// frames are invisible to every later frame but keep their intra-frame
/// visibility.
pub fn drop_history_frames(frames: &[Vec<usize>], drop_prob: f64, seed: u64) -> Result<MaskSpec, MaskError> {
    validate_frames(frames)?;
    let dropped = draw_dropped_frames(frames.len(), drop_prob, seed)?;
    build_frames_with(frames, |_, fj| !dropped[fj])
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn frame_of(frames: &[Vec<usize>]) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for (f, scales) in frames.iter().enumerate() {
            for (s, &c) in scales.iter().enumerate() {
                out.extend(std::iter::repeat((f, s)).take(c));
            }
        }
        out
    }

    /// Direct enumeration of the three-clause scale rule, plus a history predicate.
    fn enumerate_rule(frames: &[Vec<usize>], history: impl Fn(usize, usize) -> bool) -> Vec<Vec<bool>> {
        let tags = frame_of(frames);
        let n = tags.len();
        let mut dense = vec![vec![false; n]; n];
        for i in 0..n {
            for j in 0..n {
                let (fi, si) = tags[i];
                let (fj, sj) = tags[j];
                dense[i][j] = (fj < fi && history(fi, fj)) || (fj == fi && sj <= si);
            }
        }
        dense
    }

    fn all_small_pyramids() -> Vec<Vec<Vec<usize>>> {
        let mut scale_lists = Vec::new();
        for len in 1..=3 {
            let mut idx = vec![1usize; len];
            loop {
                scale_lists.push(idx.clone());
                let mut p = 0;
                while p < len {
                    idx[p] += 1;
                    if idx[p] <= 4 {
                        break;
                    }
                    idx[p] = 1;
                    p += 1;
                }
                if p == len {
                    break;
                }
            }
        }
        let mut out = Vec::new();
        for nf in 1..=3 {
            for s in &scale_lists {
                out.push(vec![s.clone(); nf]);
            }
        }
        out
    }

    #[test]
    fn causal_small_cases() {
        assert_eq!(build_causal(1).visible_pairs(), 1);
        let m = build_causal(3);
        assert_eq!(m.visible_pairs(), 6);
        let d = m.densify();
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(d[i][j], j <= i);
            }
        }
        assert_eq!(build_causal(4).densify().iter().flatten().filter(|&&b| b).count(), 10);
    }

    #[test]
    fn causal_matches_enumeration_at_64() {
        let d = build_causal(64).densify();
        for i in 0..64 {
            for j in 0..64 {
                assert_eq!(d[i][j], i >= j);
            }
        }
    }

    #[test]
    fn scale_causal_examples() {
        assert_eq!(build_scale_causal(&[vec![1]]).unwrap().visible_pairs(), 1);
        let m = build_scale_causal(&[vec![1, 4]]).unwrap();
        assert_eq!(m.visible_pairs(), 21);
        let d = m.densify();
        assert_eq!(d[0], vec![true, false, false, false, false]);
        for row in &d[1..] {
            assert!(row.iter().all(|&b| b));
        }
        assert_eq!(build_scale_causal(&[vec![1], vec![1]]).unwrap().visible_pairs(), 3);
    }

    #[test]
    fn scale_causal_errors() {
        assert_eq!(build_scale_causal(&[]), Err(MaskError::EmptyPyramid));
        assert_eq!(build_scale_causal(&[vec![]]), Err(MaskError::EmptyPyramid));
        assert_eq!(build_scale_causal(&[vec![1, 0]]), Err(MaskError::EmptyScale));
    }

    #[test]
    fn builders_match_enumeration_on_all_small_pyramids() {
        for frames in all_small_pyramids() {
            let got = build_scale_causal(&frames).unwrap().densify();
            assert_eq!(got, enumerate_rule(&frames, |_, _| true), "{frames:?}");
            for w in 1..=3 {
                let got = build_windowed_temporal(&frames, w).unwrap().densify();
                assert_eq!(got, enumerate_rule(&frames, |fi, fj| fi - fj < w), "{frames:?} w={w}");
            }
            for seed in 0..3 {
                let dropped = draw_dropped_frames(frames.len(), 0.5, seed).unwrap();
                let got = drop_history_frames(&frames, 0.5, seed).unwrap().densify();
                assert_eq!(got, enumerate_rule(&frames, |_, fj| !dropped[fj]));
            }
        }
    }

    #[test]
    fn no_token_sees_the_future() {
        for frames in all_small_pyramids() {
            let tags = frame_of(&frames);
            for mask in [
                build_scale_causal(&frames).unwrap(),
                build_windowed_temporal(&frames, 2).unwrap(),
                drop_history_frames(&frames, 0.3, 11).unwrap(),
            ] {
                let d = mask.densify();
                for (i, row) in d.iter().enumerate() {
                    for (j, &vis) in row.iter().enumerate() {
                        if vis {
                            assert!(tags[j].0 <= tags[i].0 && (tags[j].0 < tags[i].0 || tags[j].1 <= tags[i].1));
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn windowed_examples() {
        let frames = vec![vec![1, 2], vec![1, 2]];
        assert_eq!(
            build_windowed_temporal(&frames, 5).unwrap(),
            build_scale_causal(&frames).unwrap()
        );
        let single = vec![vec![1]; 3];
        assert_eq!(build_windowed_temporal(&single, 1).unwrap().visible_pairs(), 3);
        assert_eq!(build_windowed_temporal(&single, 0), Err(MaskError::ZeroWindow));

        let four = vec![vec![2]; 4];
        let d = build_windowed_temporal(&four, 2).unwrap().densify();
        for i in 0..8 {
            for j in 0..8 {
                let (fi, fj) = (i / 2, j / 2);
                assert_eq!(d[i][j], fj <= fi && fi - fj < 2, "({i},{j})");
            }
        }
    }

    #[test]
    fn history_drop_extremes() {
        let frames = vec![vec![1, 4]; 4];
        assert_eq!(drop_history_frames(&frames, 0.0, 3).unwrap(), build_scale_causal(&frames).unwrap());
        let all = drop_history_frames(&frames, 1.0, 3).unwrap();
        let per_frame: Vec<Vec<usize>> = frames.clone();
        let expected = enumerate_rule(&per_frame, |_, _| false);
        assert_eq!(all.densify(), expected);
        assert!(matches!(drop_history_frames(&frames, 1.5, 0), Err(MaskError::BadProbability(_))));
    }

    #[test]
    fn history_drop_replays_seeded_stream() {
        let seed = 2024;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let expected: Vec<bool> = (0..6)
            .map(|f| if f < 5 { rng.gen::<f64>() < 0.5 } else { false })
            .collect();
        assert_eq!(draw_dropped_frames(6, 0.5, seed).unwrap(), expected);
        let frames = vec![vec![1, 4]; 6];
        let d = drop_history_frames(&frames, 0.5, seed).unwrap().densify();
        let last_row = &d[6 * 5 - 1];
        for (f, &dropped) in expected.iter().enumerate().take(5) {
            assert_eq!(last_row[f * 5], !dropped);
        }
    }

    #[test]
    fn empty_columns_densify_false() {
        let m = MaskSpec::empty(3);
        assert!(m.densify().iter().flatten().all(|&b| !b));
    }

    #[test]
    fn canonicalizes_adjacent_intervals() {
        let m = MaskSpec::new(4, vec![
            vec![Interval::new(2, 4), Interval::new(0, 2)],
            vec![],
            vec![Interval::new(1, 1)],
            vec![Interval::new(0, 1), Interval::new(0, 3)],
        ])
        .unwrap();
        assert_eq!(m.column(0), &[Interval::new(0, 4)]);
        assert!(m.column(2).is_empty());
        assert_eq!(m.column(3), &[Interval::new(0, 3)]);
        assert!(MaskSpec::new(2, vec![vec![Interval::new(0, 3)], vec![]]).is_err());
    }

    #[test]
    fn round_trip_on_seeded_random_specs() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..1000 {
            let n = rng.gen_range(1..=24);
            let cols = (0..n)
                .map(|_| {
                    (0..rng.gen_range(0..4))
                        .map(|_| {
                            let a = rng.gen_range(0..=n);
                            let b = rng.gen_range(0..=n);
                            Interval::new(a.min(b), a.max(b))
                        })
                        .collect()
                })
                .collect();
            let spec = MaskSpec::new(n, cols).unwrap();
            assert_eq!(MaskSpec::compact(&spec.densify()).unwrap(), spec);
            assert_eq!(MaskSpec::from_text(&spec.to_text()).unwrap(), spec);
        }
    }

    #[test]
    fn text_format_errors() {
        assert!(MaskSpec::from_text("").is_err());
        assert!(MaskSpec::from_text("2\n0..2\n").is_err());
        assert!(MaskSpec::from_text("1\n0-1\n").is_err());
        assert!(MaskSpec::from_text("1\n0..5\n").is_err());
        assert!(MaskSpec::from_text("1\n0..1\n0..1\n").is_err());
        assert_eq!(MaskSpec::from_text("2\n0..2\n1..2\n").unwrap(), build_causal(2));
    }

    proptest! {
        #[test]
        fn equal_densifications_have_equal_canonical_forms(
            n in 1usize..10,
            raw in proptest::collection::vec(proptest::collection::vec((0usize..10, 0usize..10), 0..4), 10),
        ) {
            let cols: Vec<Vec<Interval>> = raw.iter().take(n)
                .map(|c| c.iter().map(|&(a, b)| Interval::new(a.min(b).min(n), a.max(b).min(n))).collect())
                .collect();
            let a = MaskSpec::new(n, cols.clone()).unwrap();
            // Split every interval at its midpoint: same visibility, different raw form.
            let split: Vec<Vec<Interval>> = cols.iter().map(|c| c.iter().flat_map(|iv| {
                let mid = (iv.lo + iv.hi) / 2;
                [Interval::new(iv.lo, mid), Interval::new(mid, iv.hi)]
            }).rev().collect()).collect();
            let b = MaskSpec::new(n, split).unwrap();
            prop_assert_eq!(a.densify(), b.densify());
            prop_assert_eq!(a, b);
        }

        #[test]
        fn is_visible_agrees_with_densify(sizes in proptest::collection::vec(1usize..4, 1..6)) {
            let m = build_group_causal(&sizes);
            let d = m.densify();
            for (i, row) in d.iter().enumerate() {
                for (j, &v) in row.iter().enumerate() {
                    prop_assert_eq!(m.is_visible(i, j), v);
                }
            }
        }
    }
}
