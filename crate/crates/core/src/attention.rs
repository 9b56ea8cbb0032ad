//! Instrumented full attention and area attention.
//!
//! A [`FeatureMap`] holds `n` tokens, each with `h` heads of dimension `d`,
//! stored token-major: `values[(token * h + head) * d + dim]`. Area
//! attention partitions the tokens into `l` equal groups (horizontal strips,
//! vertical strips, or contiguous index blocks) and runs ordinary scaled
//! dot-product attention inside each group.
//!
//! Multiply-accumulates are counted inside the two matmul loops (`QKᵀ` and
//! `PV`); softmax exponentials and any projections are not counted. Full
//! attention costs `2·n²·h·d` MACs and area attention `2·n²·h·d / l`.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::par;
use crate::rng::SplitMix64;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum AttentionError {
    #[error("feature map dimensions must be >= 1, got n={n} h={h} d={d}")]
    EmptyShape { n: usize, h: usize, d: usize },
    #[error("value buffer has {actual} entries, expected n*h*d = {expected}")]
    BufferSize { expected: usize, actual: usize },
    #[error("spatial shape {height}x{width} does not match n={n}")]
    SpatialMismatch { height: usize, width: usize, n: usize },
    #[error("q/k/v shapes differ: {0}")]
    ShapeMismatch(String),
    #[error("segment count must be >= 1")]
    ZeroSegments,
    #[error("{axis} split needs spatial (H, W) metadata")]
    MissingSpatial { axis: Axis },
    #[error("{axis} split: {len} is not divisible by l={segments} (remainder {remainder})")]
    NotDivisible {
        axis: Axis,
        len: usize,
        segments: usize,
        remainder: usize,
    },
    #[error("MAC count overflows u64")]
    Overflow,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    n: usize,
    h: usize,
    d: usize,
    values: Vec<f64>,
    spatial: Option<(usize, usize)>,
}

impl FeatureMap {
    pub fn new(n: usize, h: usize, d: usize, values: Vec<f64>) -> Result<Self, AttentionError> {
        if n == 0 || h == 0 || d == 0 {
            return Err(AttentionError::EmptyShape { n, h, d });
        }
        let expected = n * h * d;
        if values.len() != expected {
            return Err(AttentionError::BufferSize {
                expected,
                actual: values.len(),
            });
        }
        Ok(Self {
            n,
            h,
            d,
            values,
            spatial: None,
        })
    }

    /// Attaches a row-major `(height, width)` token grid.
    pub fn with_spatial(mut self, height: usize, width: usize) -> Result<Self, AttentionError> {
        if height * width != self.n {
            return Err(AttentionError::SpatialMismatch {
                height,
                width,
                n: self.n,
            });
        }
        self.spatial = Some((height, width));
        Ok(self)
    }

    /// Uniform values in `[-1, 1)` from a seeded generator.
    pub fn random(n: usize, h: usize, d: usize, rng: &mut SplitMix64) -> Result<Self, AttentionError> {
        let values = (0..n * h * d).map(|_| rng.range_f64(-1.0, 1.0)).collect();
        Self::new(n, h, d, values)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn heads(&self) -> usize {
        self.h
    }

    pub fn head_dim(&self) -> usize {
        self.d
    }

    pub fn spatial(&self) -> Option<(usize, usize)> {
        self.spatial
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// The `d` features of `token` in `head`.
    pub fn row(&self, token: usize, head: usize) -> &[f64] {
        let start = (token * self.h + head) * self.d;
        &self.values[start..start + self.d]
    }

    fn row_mut(&mut self, token: usize, head: usize) -> &mut [f64] {
        let start = (token * self.h + head) * self.d;
        &mut self.values[start..start + self.d]
    }

    fn shape_matches(&self, other: &FeatureMap) -> bool {
        (self.n, self.h, self.d) == (other.n, other.h, other.d)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Axis {
    /// Strips of `H/l` full rows.
    Horizontal,
    /// Strips of `W/l` full columns.
    Vertical,
    /// Contiguous blocks of `n/l` token indices; needs no spatial metadata.
    Token,
}

impl Axis {
    pub fn name(self) -> &'static str {
        match self {
            Axis::Horizontal => "horizontal",
            Axis::Vertical => "vertical",
            Axis::Token => "token",
        }
    }
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Axis {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "horizontal" => Ok(Axis::Horizontal),
            "vertical" => Ok(Axis::Vertical),
            "token" => Ok(Axis::Token),
            other => Err(format!("unknown axis `{other}` (expected horizontal, vertical or token)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttentionConfig {
    /// Number of areas `l`.
    pub segments: usize,
    pub axis: Axis,
    /// Softmax scale; `None` means `1/sqrt(d)`.
    pub scale: Option<f64>,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        Self {
            segments: 4,
            axis: Axis::Horizontal,
            scale: None,
        }
    }
}

impl AttentionConfig {
    pub fn scale_for(&self, d: usize) -> f64 {
        self.scale.unwrap_or_else(|| default_scale(d))
    }
}

pub fn default_scale(d: usize) -> f64 {
    1.0 / (d as f64).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Default)]
pub struct FlopCount {
    pub macs: u64,
}

/// `2·n²·h·d / l` in exact integer arithmetic.
pub fn count_flops(n: usize, h: usize, d: usize, l: usize) -> Result<FlopCount, AttentionError> {
    if l == 0 {
        return Err(AttentionError::ZeroSegments);
    }
    if !n.is_multiple_of(l) {
        return Err(AttentionError::NotDivisible {
            axis: Axis::Token,
            len: n,
            segments: l,
            remainder: n % l,
        });
    }
    let full = 2u128 * (n as u128) * (n as u128) * (h as u128) * (d as u128);
    u64::try_from(full / l as u128)
        .map(|macs| FlopCount { macs })
        .map_err(|_| AttentionError::Overflow)
}

fn check_divisible(axis: Axis, len: usize, l: usize) -> Result<(), AttentionError> {
    if !len.is_multiple_of(l) {
        return Err(AttentionError::NotDivisible {
            axis,
            len,
            segments: l,
            remainder: len % l,
        });
    }
    Ok(())
}

/// Token indices of each area, in row-major order within the area.
pub fn segment_tokens(fm: &FeatureMap, cfg: &AttentionConfig) -> Result<Vec<Vec<usize>>, AttentionError> {
    let l = cfg.segments;
    if l == 0 {
        return Err(AttentionError::ZeroSegments);
    }
    match cfg.axis {
        Axis::Token => {
            check_divisible(Axis::Token, fm.n, l)?;
            let size = fm.n / l;
            Ok((0..l).map(|i| (i * size..(i + 1) * size).collect()).collect())
        }
        Axis::Horizontal => {
            let (height, width) = fm.spatial.ok_or(AttentionError::MissingSpatial { axis: cfg.axis })?;
            check_divisible(Axis::Horizontal, height, l)?;
            let rows = height / l;
            Ok((0..l)
                .map(|i| (i * rows * width..(i + 1) * rows * width).collect())
                .collect())
        }
        Axis::Vertical => {
            let (height, width) = fm.spatial.ok_or(AttentionError::MissingSpatial { axis: cfg.axis })?;
            check_divisible(Axis::Vertical, width, l)?;
            let cols = width / l;
            Ok((0..l)
                .map(|i| {
                    (0..height)
                        .flat_map(|r| (i * cols..(i + 1) * cols).map(move |c| r * width + c))
                        .collect()
                })
                .collect())
        }
    }
}

/// Max-subtracted softmax.
pub fn softmax_in_place(xs: &mut [f64]) {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in xs.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in xs.iter_mut() {
        *x /= sum;
    }
}

/// Scaled scores of one query row against `tokens`, counting `len·d` MACs.
fn score_row(qrow: &[f64], k: &FeatureMap, tokens: &[usize], head: usize, scale: f64, scores: &mut [f64], macs: &mut u64) {
    for (s, &tk) in scores.iter_mut().zip(tokens) {
        let mut acc = 0.0;
        for (a, b) in qrow.iter().zip(k.row(tk, head)) {
            acc += a * b;
            *macs += 1;
        }
        *s = acc * scale;
    }
}

/// Softmax attention rows for one head over one token group.
pub fn attention_probs(q: &FeatureMap, k: &FeatureMap, head: usize, tokens: &[usize], scale: f64) -> Vec<Vec<f64>> {
    let mut macs = 0;
    tokens
        .iter()
        .map(|&tq| {
            let mut scores = vec![0.0; tokens.len()];
            score_row(q.row(tq, head), k, tokens, head, scale, &mut scores, &mut macs);
            softmax_in_place(&mut scores);
            scores
        })
        .collect()
}

/// Attention for one head restricted to `tokens`. Returns the output rows
/// (`tokens.len() × d`, in `tokens` order) and the MACs performed.
fn attend_group(q: &FeatureMap, k: &FeatureMap, v: &FeatureMap, tokens: &[usize], head: usize, scale: f64) -> (Vec<f64>, u64) {
    let d = q.d;
    let m = tokens.len();
    let mut out = vec![0.0; m * d];
    let mut scores = vec![0.0; m];
    let mut macs = 0u64;
    for (qi, &tq) in tokens.iter().enumerate() {
        score_row(q.row(tq, head), k, tokens, head, scale, &mut scores, &mut macs);
        softmax_in_place(&mut scores);
        let orow = &mut out[qi * d..(qi + 1) * d];
        for (&p, &tv) in scores.iter().zip(tokens) {
            for (o, x) in orow.iter_mut().zip(v.row(tv, head)) {
                *o += p * x;
                macs += 1;
            }
        }
    }
    (out, macs)
}

fn check_qkv(q: &FeatureMap, k: &FeatureMap, v: &FeatureMap) -> Result<(), AttentionError> {
    if !q.shape_matches(k) || !q.shape_matches(v) {
        return Err(AttentionError::ShapeMismatch(format!(
            "q=({}, {}, {}) k=({}, {}, {}) v=({}, {}, {})",
            q.n, q.h, q.d, k.n, k.h, k.d, v.n, v.h, v.d
        )));
    }
    Ok(())
}

/// Runs every (group, head) pair, possibly in parallel, and scatters the
/// results back to token positions. The MAC total is summed in task order.
fn attend_groups(
    q: &FeatureMap,
    k: &FeatureMap,
    v: &FeatureMap,
    groups: &[Vec<usize>],
    scale: f64,
) -> (FeatureMap, FlopCount) {
    let h = q.h;
    let results = par::map_range(groups.len() * h, |task| {
        let (g, head) = (task / h, task % h);
        attend_group(q, k, v, &groups[g], head, scale)
    });
    let mut out = FeatureMap {
        values: vec![0.0; q.values.len()],
        ..q.clone()
    };
    let mut macs = 0u64;
    for (task, (rows, m)) in results.into_iter().enumerate() {
        let (g, head) = (task / h, task % h);
        for (qi, &t) in groups[g].iter().enumerate() {
            out.row_mut(t, head).copy_from_slice(&rows[qi * q.d..(qi + 1) * q.d]);
        }
        macs += m;
    }
    (out, FlopCount { macs })
}

/// `softmax(scale·QKᵀ)V` per head over all `n` tokens.
pub fn full_attention(
    q: &FeatureMap,
    k: &FeatureMap,
    v: &FeatureMap,
    scale: f64,
) -> Result<(FeatureMap, FlopCount), AttentionError> {
    check_qkv(q, k, v)?;
    let all: Vec<usize> = (0..q.n).collect();
    Ok(attend_groups(q, k, v, &[all], scale))
}

/// Attention applied independently inside each of the `l` areas of `q`.
pub fn area_attention(
    q: &FeatureMap,
    k: &FeatureMap,
    v: &FeatureMap,
    cfg: &AttentionConfig,
) -> Result<(FeatureMap, FlopCount), AttentionError> {
    check_qkv(q, k, v)?;
    let groups = segment_tokens(q, cfg)?;
    Ok(attend_groups(q, k, v, &groups, cfg.scale_for(q.d)))
}
