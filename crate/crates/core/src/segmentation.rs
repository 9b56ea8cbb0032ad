//! Hue-band and Otsu segmentation of whole cells and nuclei.
//!
//! Four variants come out of this module: `{hue, otsu} x {cell, nucleus}`.
//! The nucleus mask is always computed inside the cell mask of the same
//! technique, so nucleus ⊆ cell holds pixelwise by construction.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use num_bigint::BigUint;
use thiserror::Error;

use crate::image_core::{apply_mask, rgb_to_hsv, to_gray, BinaryMask, GrayImage, ImageError, RgbImage};

#[derive(Debug, Error)]
pub enum SegmentationError {
    #[error("histogram is empty; Otsu needs at least one sample")]
    EmptyHistogram,
    #[error("invalid hue band: {0}")]
    InvalidBand(String),
    #[error(transparent)]
    Image(#[from] ImageError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SegTechnique {
    Hue,
    Otsu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SegTarget {
    Cell,
    Nucleus,
}

impl SegTechnique {
    pub fn name(self) -> &'static str {
        match self {
            SegTechnique::Hue => "hue",
            SegTechnique::Otsu => "otsu",
        }
    }
}

impl SegTarget {
    pub fn name(self) -> &'static str {
        match self {
            SegTarget::Cell => "cell",
            SegTarget::Nucleus => "nucleus",
        }
    }
}

impl FromStr for SegTechnique {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "hue" => Ok(SegTechnique::Hue),
            "otsu" => Ok(SegTechnique::Otsu),
            other => Err(format!("unknown segmentation method `{other}` (expected hue or otsu)")),
        }
    }
}

impl FromStr for SegTarget {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "cell" => Ok(SegTarget::Cell),
            "nucleus" => Ok(SegTarget::Nucleus),
            other => Err(format!("unknown segmentation target `{other}` (expected cell or nucleus)")),
        }
    }
}

/// One of the four segmented dataset flavours.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SegMethod {
    pub technique: SegTechnique,
    pub target: SegTarget,
}

impl SegMethod {
    /// Summary-table order: cell-hue, cell-otsu, nucleus-hue, nucleus-otsu.
    pub const ALL: [SegMethod; 4] = [
        SegMethod::new(SegTechnique::Hue, SegTarget::Cell),
        SegMethod::new(SegTechnique::Otsu, SegTarget::Cell),
        SegMethod::new(SegTechnique::Hue, SegTarget::Nucleus),
        SegMethod::new(SegTechnique::Otsu, SegTarget::Nucleus),
    ];

    pub const fn new(technique: SegTechnique, target: SegTarget) -> Self {
        Self { technique, target }
    }

    /// Variant name used in reports, e.g. `cell-otsu`.
    pub fn variant_name(self) -> String {
        format!("{}-{}", self.target.name(), self.technique.name())
    }

    /// Suffix of the mirrored output tree, e.g. `otsu-cell`.
    pub fn dir_suffix(self) -> String {
        format!("{}-{}", self.technique.name(), self.target.name())
    }
}

impl fmt::Display for SegMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.variant_name())
    }
}

impl FromStr for SegMethod {
    type Err = String;

    /// Accepts the variant name (`cell-otsu`) or the directory suffix
    /// (`otsu-cell`).
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (a, b) = s
            .split_once('-')
            .ok_or_else(|| format!("bad variant `{s}` (expected e.g. cell-otsu)"))?;
        if let (Ok(target), Ok(technique)) = (a.parse(), b.parse()) {
            return Ok(SegMethod { technique, target });
        }
        if let (Ok(technique), Ok(target)) = (a.parse(), b.parse()) {
            return Ok(SegMethod { technique, target });
        }
        Err(format!("bad variant `{s}` (expected e.g. cell-otsu)"))
    }
}

/// Circular hue interval `[lo, hi]` plus a saturation floor. `lo > hi`
/// wraps through 0.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct HueBand {
    pub lo: f64,
    pub hi: f64,
    pub min_saturation: f64,
}

impl HueBand {
    pub fn new(lo: f64, hi: f64, min_saturation: f64) -> Result<Self, SegmentationError> {
        let band = Self {
            lo,
            hi,
            min_saturation,
        };
        band.validate()?;
        Ok(band)
    }

    pub fn validate(&self) -> Result<(), SegmentationError> {
        for (name, v) in [("lo", self.lo), ("hi", self.hi)] {
            if !(0.0..360.0).contains(&v) {
                return Err(SegmentationError::InvalidBand(format!(
                    "{name}={v} outside [0, 360)"
                )));
            }
        }
        if !(0.0..=1.0).contains(&self.min_saturation) {
            return Err(SegmentationError::InvalidBand(format!(
                "min_saturation={} outside [0, 1]",
                self.min_saturation
            )));
        }
        Ok(())
    }

    /// Violet/magenta nuclear stain.
    pub fn default_nucleus() -> Self {
        Self {
            lo: 220.0,
            hi: 340.0,
            min_saturation: 0.15,
        }
    }

    /// Whole cell: nucleus plus pink or blue-grey cytoplasm.
    pub fn default_cell() -> Self {
        Self {
            lo: 180.0,
            hi: 359.0,
            min_saturation: 0.08,
        }
    }

    pub fn contains_hue(&self, h: f64) -> bool {
        if self.lo <= self.hi {
            self.lo <= h && h <= self.hi
        } else {
            h >= self.lo || h <= self.hi
        }
    }

    pub fn accepts(&self, rgb: [u8; 3]) -> bool {
        let hsv = rgb_to_hsv(rgb);
        hsv.s >= self.min_saturation && self.contains_hue(hsv.h)
    }

    /// True when every pixel accepted by `self` is accepted by `other`.
    pub fn is_within(&self, other: &HueBand) -> bool {
        if self.min_saturation < other.min_saturation {
            return false;
        }
        let arcs = |b: &HueBand| -> Vec<(f64, f64)> {
            if b.lo <= b.hi {
                vec![(b.lo, b.hi)]
            } else {
                vec![(b.lo, 360.0), (0.0, b.hi)]
            }
        };
        let outer = arcs(other);
        arcs(self)
            .iter()
            .all(|&(lo, hi)| outer.iter().any(|&(olo, ohi)| olo <= lo && hi <= ohi))
    }
}

impl FromStr for HueBand {
    type Err = String;

    /// `lo,hi,min_saturation`, e.g. `220,340,0.15`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<&str> = s.split(',').map(str::trim).collect();
        if parts.len() != 3 {
            return Err(format!("hue band `{s}` must be lo,hi,min_saturation"));
        }
        let num = |p: &str| p.parse::<f64>().map_err(|e| format!("hue band `{s}`: {e}"));
        HueBand::new(num(parts[0])?, num(parts[1])?, num(parts[2])?).map_err(|e| e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SegmentParams {
    pub cell_band: HueBand,
    pub nucleus_band: HueBand,
}

impl Default for SegmentParams {
    fn default() -> Self {
        Self {
            cell_band: HueBand::default_cell(),
            nucleus_band: HueBand::default_nucleus(),
        }
    }
}

/// 256-bin intensity histogram.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Histogram256 {
    counts: [u64; 256],
    total: u64,
}

impl Histogram256 {
    pub fn from_counts(counts: [u64; 256]) -> Self {
        Self {
            total: counts.iter().sum(),
            counts,
        }
    }

    pub fn counts(&self) -> &[u64; 256] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn distinct_values(&self) -> usize {
        self.counts.iter().filter(|&&c| c > 0).count()
    }
}

pub fn histogram(img: &GrayImage) -> Histogram256 {
    let mut counts = [0u64; 256];
    for &v in img.pixels() {
        counts[v as usize] += 1;
    }
    Histogram256::from_counts(counts)
}

/// Histogram of the pixels where `mask` is foreground.
pub fn masked_histogram(img: &GrayImage, mask: &BinaryMask) -> Result<Histogram256, ImageError> {
    if (img.width(), img.height()) != mask.dimensions() {
        return Err(ImageError::DimensionMismatch {
            image_w: img.width(),
            image_h: img.height(),
            mask_w: mask.width(),
            mask_h: mask.height(),
        });
    }
    let mut counts = [0u64; 256];
    for (&v, &fg) in img.pixels().iter().zip(mask.bits()) {
        if fg {
            counts[v as usize] += 1;
        }
    }
    Ok(Histogram256::from_counts(counts))
}

/// Between-class variance at one threshold, kept as the exact fraction
/// `(S0·N − S·n0)² / (n0·n1)`, which is `N²·ω0·ω1·(μ0 − μ1)²`.
struct Score {
    num: BigUint,
    den: BigUint,
}

impl Score {
    fn cmp(&self, other: &Score) -> Ordering {
        (&self.num * &other.den).cmp(&(&other.num * &self.den))
    }
}

/// Otsu's threshold: the `t` maximising between-class variance with class 0
/// being intensities `<= t`. Computed in exact integer arithmetic; ties go to
/// the smallest `t`. A histogram with a single occupied bin returns that bin.
pub fn otsu_threshold(h: &Histogram256) -> Result<u8, SegmentationError> {
    let n = h.total();
    if n == 0 {
        return Err(SegmentationError::EmptyHistogram);
    }
    let sum: u128 = h
        .counts
        .iter()
        .enumerate()
        .map(|(v, &c)| v as u128 * c as u128)
        .sum();

    let mut best: Option<(u8, Score)> = None;
    let (mut n0, mut s0) = (0u64, 0u128);
    for (t, &c) in h.counts.iter().enumerate() {
        n0 += c;
        s0 += t as u128 * c as u128;
        let n1 = n - n0;
        if n0 == 0 {
            continue;
        }
        if n1 == 0 {
            break;
        }
        let d = (s0 * n as u128) as i128 - (sum * n0 as u128) as i128;
        let d = BigUint::from(d.unsigned_abs());
        let score = Score {
            num: &d * &d,
            den: BigUint::from(n0) * BigUint::from(n1),
        };
        let better = match &best {
            None => true,
            Some((_, b)) => score.cmp(b) == Ordering::Greater,
        };
        if better {
            best = Some((t as u8, score));
        }
    }
    match best {
        Some((t, _)) => Ok(t),
        // All mass in one bin.
        None => Ok(h.counts.iter().position(|&c| c > 0).expect("total > 0") as u8),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Polarity {
    /// Intensities `<= t` are foreground; stained cells on a bright smear.
    DarkFg,
    BrightFg,
}

pub fn hue_mask(img: &RgbImage, band: &HueBand) -> BinaryMask {
    let bits = img.pixels().iter().map(|&p| band.accepts(p)).collect();
    BinaryMask::new(img.width(), img.height(), bits).expect("dimensions copied from a valid image")
}

pub fn otsu_mask(img: &RgbImage, polarity: Polarity) -> Result<BinaryMask, SegmentationError> {
    let gray = to_gray(img);
    let t = otsu_threshold(&histogram(&gray))?;
    Ok(threshold_mask(&gray, t, polarity))
}

fn threshold_mask(gray: &GrayImage, t: u8, polarity: Polarity) -> BinaryMask {
    let bits = gray
        .pixels()
        .iter()
        .map(|&v| match polarity {
            Polarity::DarkFg => v <= t,
            Polarity::BrightFg => v > t,
        })
        .collect();
    BinaryMask::new(gray.width(), gray.height(), bits).expect("dimensions copied from a valid image")
}

/// Keeps the largest 4-connected foreground component. Equal sizes go to the
/// component reached first in raster order.
pub fn largest_component(mask: &BinaryMask) -> BinaryMask {
    let (w, h) = mask.dimensions();
    let bits = mask.bits();
    let mut label = vec![0u32; bits.len()];
    let mut best: Option<(u32, usize)> = None;
    let mut next = 1u32;
    let mut stack = Vec::new();
    for start in 0..bits.len() {
        if !bits[start] || label[start] != 0 {
            continue;
        }
        let id = next;
        next += 1;
        label[start] = id;
        stack.push(start);
        let mut size = 0usize;
        while let Some(i) = stack.pop() {
            size += 1;
            let (x, y) = (i % w, i / w);
            let mut visit = |j: usize| {
                if bits[j] && label[j] == 0 {
                    label[j] = id;
                    stack.push(j);
                }
            };
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < w {
                visit(i + 1);
            }
            if y > 0 {
                visit(i - w);
            }
            if y + 1 < h {
                visit(i + w);
            }
        }
        if best.is_none_or(|(_, s)| size > s) {
            best = Some((id, size));
        }
    }
    match best {
        None => BinaryMask::empty(w, h),
        Some((id, _)) => {
            BinaryMask::new(w, h, label.iter().map(|&l| l == id).collect()).expect("same dims")
        }
    }
}

/// Cell mask for one technique, already reduced to its largest component.
/// An image with a single gray level has no stained content and yields an
/// empty Otsu mask.
pub fn cell_mask(
    img: &RgbImage,
    technique: SegTechnique,
    params: &SegmentParams,
) -> Result<BinaryMask, SegmentationError> {
    let raw = match technique {
        SegTechnique::Hue => hue_mask(img, &params.cell_band),
        SegTechnique::Otsu => {
            let gray = to_gray(img);
            let hist = histogram(&gray);
            if hist.distinct_values() < 2 {
                return Ok(BinaryMask::empty(img.width(), img.height()));
            }
            threshold_mask(&gray, otsu_threshold(&hist)?, Polarity::DarkFg)
        }
    };
    Ok(largest_component(&raw))
}

/// Nucleus mask restricted to `cell`.
///
/// Hue: nucleus band AND cell. Otsu: a second Otsu pass over the histogram
/// of within-cell pixels, keeping the darker class.
pub fn nucleus_mask(
    img: &RgbImage,
    technique: SegTechnique,
    params: &SegmentParams,
    cell: &BinaryMask,
) -> Result<BinaryMask, SegmentationError> {
    let raw = match technique {
        SegTechnique::Hue => hue_mask(img, &params.nucleus_band).and(cell)?,
        SegTechnique::Otsu => {
            let gray = to_gray(img);
            let hist = masked_histogram(&gray, cell)?;
            if hist.distinct_values() < 2 {
                return Ok(BinaryMask::empty(img.width(), img.height()));
            }
            let t = otsu_threshold(&hist)?;
            threshold_mask(&gray, t, Polarity::DarkFg).and(cell)?
        }
    };
    Ok(largest_component(&raw))
}

/// Cell and nucleus masks for one technique.
#[derive(Debug, Clone)]
pub struct CellNucleusMasks {
    pub cell: BinaryMask,
    pub nucleus: BinaryMask,
}

pub fn cell_and_nucleus(
    img: &RgbImage,
    technique: SegTechnique,
    params: &SegmentParams,
) -> Result<CellNucleusMasks, SegmentationError> {
    let cell = cell_mask(img, technique, params)?;
    let nucleus = nucleus_mask(img, technique, params, &cell)?;
    Ok(CellNucleusMasks { cell, nucleus })
}

/// Final foreground mask for a variant.
pub fn segment_mask(
    img: &RgbImage,
    method: SegMethod,
    params: &SegmentParams,
) -> Result<BinaryMask, SegmentationError> {
    let cell = cell_mask(img, method.technique, params)?;
    match method.target {
        SegTarget::Cell => Ok(cell),
        SegTarget::Nucleus => nucleus_mask(img, method.technique, params, &cell),
    }
}

/// Segments an image: everything outside the selected region is zeroed.
pub fn segment(
    img: &RgbImage,
    method: SegMethod,
    params: &SegmentParams,
) -> Result<RgbImage, SegmentationError> {
    let mask = segment_mask(img, method, params)?;
    Ok(apply_mask(img, &mask)?)
}
