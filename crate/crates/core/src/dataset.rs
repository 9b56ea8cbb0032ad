//! Class-per-directory corpora, the stratified train/val/test split, and the
//! synthetic smear fixture.
//!
//! Layout on disk:
//!
//! ```text
//! root/
//!   basophil/0000.png ...
//!   erythroblast/ monocyte/ myeloblast/ seg_neutrophil/
//!   masks/            (optional, ignored by `scan`)
//! ```

use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image_core::{save_mask_png, save_png, BinaryMask, ImageError, RgbImage};
use crate::par;
use crate::rng::SplitMix64;

/// Directory name reserved for sidecar masks inside a dataset tree.
pub const MASKS_DIR: &str = "masks";

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("dataset root {0} does not exist or is not a directory")]
    MissingRoot(PathBuf),
    #[error("unknown class directory `{name}` under {root}")]
    UnknownClass { root: PathBuf, name: String },
    #[error("class `{0}` has no images")]
    EmptyClass(ClassLabel),
    #[error("class `{label}` has {count} samples; at least 3 are needed to split")]
    ClassTooSmall { label: ClassLabel, count: usize },
    #[error("split fractions {0:?} must be non-negative and sum to 1")]
    BadFractions([f64; 3]),
    #[error("fixture needs at least 3 images per class, got {0}")]
    FixtureTooSmall(usize),
    #[error("duplicate path `{0}` in manifest")]
    DuplicatePath(String),
    #[error("manifest {path}: {msg}")]
    BadManifest { path: PathBuf, msg: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Image(#[from] ImageError),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// The five cell types, with stable ordinals 0..4.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassLabel {
    Basophil,
    Erythroblast,
    Monocyte,
    Myeloblast,
    SegNeutrophil,
}

impl ClassLabel {
    pub const ALL: [ClassLabel; 5] = [
        ClassLabel::Basophil,
        ClassLabel::Erythroblast,
        ClassLabel::Monocyte,
        ClassLabel::Myeloblast,
        ClassLabel::SegNeutrophil,
    ];
    pub const COUNT: usize = 5;

    pub fn ordinal(self) -> usize {
        self as usize
    }

    pub fn from_ordinal(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    /// Canonical directory and CSV name.
    pub fn dir_name(self) -> &'static str {
        match self {
            ClassLabel::Basophil => "basophil",
            ClassLabel::Erythroblast => "erythroblast",
            ClassLabel::Monocyte => "monocyte",
            ClassLabel::Myeloblast => "myeloblast",
            ClassLabel::SegNeutrophil => "seg_neutrophil",
        }
    }

    pub fn names() -> Vec<String> {
        Self::ALL.iter().map(|c| c.dir_name().to_string()).collect()
    }
}

impl fmt::Display for ClassLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.dir_name())
    }
}

impl FromStr for ClassLabel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .iter()
            .copied()
            .find(|c| c.dir_name() == s)
            .ok_or_else(|| format!("unknown class `{s}`"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

fn is_image_file(p: &Path) -> bool {
    p.extension()
        .and_then(|e| e.to_str())
        .map(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
        .unwrap_or(false)
}

/// Lists `(relative path, label)` for every image under `root`, sorted by
/// path. Paths use `/` separators. The `masks` directory and hidden entries
/// are skipped; loose files at the root are ignored.
pub fn scan(root: &Path) -> Result<Vec<(String, ClassLabel)>, DatasetError> {
    if !root.is_dir() {
        return Err(DatasetError::MissingRoot(root.to_path_buf()));
    }
    let mut per_class: Vec<Vec<String>> = vec![Vec::new(); ClassLabel::COUNT];
    let mut seen = [false; ClassLabel::COUNT];
    for entry in fs::read_dir(root).map_err(io_err(root))? {
        let entry = entry.map_err(io_err(root))?;
        let path = entry.path();
        if !path.is_dir() {
            continue;
        }
        let name = entry.file_name().to_string_lossy().into_owned();
        if name == MASKS_DIR || name.starts_with('.') {
            continue;
        }
        let label: ClassLabel = name.parse().map_err(|_| DatasetError::UnknownClass {
            root: root.to_path_buf(),
            name: name.clone(),
        })?;
        seen[label.ordinal()] = true;
        for file in fs::read_dir(&path).map_err(io_err(&path))? {
            let file = file.map_err(io_err(&path))?;
            let fp = file.path();
            if fp.is_file() && is_image_file(&fp) {
                per_class[label.ordinal()]
                    .push(format!("{}/{}", name, file.file_name().to_string_lossy()));
            }
        }
    }
    let mut out = Vec::new();
    for label in ClassLabel::ALL {
        if !seen[label.ordinal()] || per_class[label.ordinal()].is_empty() {
            return Err(DatasetError::EmptyClass(label));
        }
        out.extend(per_class[label.ordinal()].drain(..).map(|p| (p, label)));
    }
    out.sort();
    Ok(out)
}

/// Train/val/test fractions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl SplitFractions {
    pub fn new(train: f64, val: f64, test: f64) -> Result<Self, DatasetError> {
        let f = Self { train, val, test };
        f.validate()?;
        Ok(f)
    }

    pub fn validate(&self) -> Result<(), DatasetError> {
        let all = [self.train, self.val, self.test];
        let ok = all.iter().all(|v| v.is_finite() && *v >= 0.0)
            && (all.iter().sum::<f64>() - 1.0).abs() <= 1e-9;
        if ok {
            Ok(())
        } else {
            Err(DatasetError::BadFractions(all))
        }
    }
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self {
            train: 0.70,
            val: 0.15,
            test: 0.15,
        }
    }
}

impl FromStr for SplitFractions {
    type Err = String;

    /// `train,val,test`, e.g. `0.7,0.15,0.15`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let v: Vec<f64> = s
            .split(',')
            .map(|p| p.trim().parse::<f64>().map_err(|e| format!("fractions `{s}`: {e}")))
            .collect::<Result<_, _>>()?;
        if v.len() != 3 {
            return Err(format!("fractions `{s}` must be train,val,test"));
        }
        SplitFractions::new(v[0], v[1], v[2]).map_err(|e| e.to_string())
    }
}

// Guards floor/ceil against products like 0.7 * 1000 landing a hair below
// the integer.
const ROUNDING_SLACK: f64 = 1e-9;

/// Per-class split sizes: train takes `floor(train·n)`; val takes the
/// remainder's share rounded up; test gets what is left.
pub fn split_sizes(n: usize, f: &SplitFractions) -> (usize, usize, usize) {
    let train = ((f.train * n as f64 + ROUNDING_SLACK).floor() as usize).min(n);
    let rest = n - train;
    let held = f.val + f.test;
    let val = if held <= 0.0 {
        0
    } else {
        ((rest as f64 * f.val / held - ROUNDING_SLACK).ceil().max(0.0) as usize).min(rest)
    };
    (train, val, rest - val)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub path: String,
    pub label: ClassLabel,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitManifest {
    /// Sorted by path.
    pub records: Vec<SampleRecord>,
    pub seed: u64,
    pub fractions: SplitFractions,
}

impl SplitManifest {
    pub fn records_in(&self, split: Split) -> impl Iterator<Item = &SampleRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    /// `counts[class][split]`.
    pub fn counts(&self) -> [[usize; 3]; ClassLabel::COUNT] {
        let mut c = [[0usize; 3]; ClassLabel::COUNT];
        for r in &self.records {
            c[r.label.ordinal()][r.split as usize] += 1;
        }
        c
    }

    pub fn split_totals(&self) -> [usize; 3] {
        let mut t = [0; 3];
        for r in &self.records {
            t[r.split as usize] += 1;
        }
        t
    }

    /// Writes `path,label,split` CSV with LF endings, sorted by path.
    pub fn write_csv<W: io::Write>(&self, w: W) -> Result<(), DatasetError> {
        let mut wtr = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(w);
        wtr.write_record(["path", "label", "split"])?;
        for r in &self.records {
            wtr.write_record([r.path.as_str(), r.label.dir_name(), r.split.name()])?;
        }
        wtr.flush().map_err(|e| DatasetError::Csv(e.into()))?;
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<(), DatasetError> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(io_err(parent))?;
        }
        let f = fs::File::create(path).map_err(io_err(path))?;
        self.write_csv(io::BufWriter::new(f))
    }

    /// Reads a manifest CSV. Seed and fractions are not stored in the file,
    /// so they come back as 0 and the observed proportions.
    pub fn load(path: &Path) -> Result<Self, DatasetError> {
        let bad = |msg: String| DatasetError::BadManifest {
            path: path.to_path_buf(),
            msg,
        };
        let f = fs::File::open(path).map_err(io_err(path))?;
        let mut rdr = csv::Reader::from_reader(io::BufReader::new(f));
        let headers = rdr.headers()?.clone();
        if headers.iter().collect::<Vec<_>>() != ["path", "label", "split"] {
            return Err(bad(format!("header must be path,label,split, got {headers:?}")));
        }
        let mut records: Vec<SampleRecord> = Vec::new();
        for row in rdr.deserialize() {
            records.push(row.map_err(|e| bad(e.to_string()))?);
        }
        let mut paths: Vec<&str> = records.iter().map(|r| r.path.as_str()).collect();
        paths.sort_unstable();
        if let Some(w) = paths.windows(2).find(|w| w[0] == w[1]) {
            return Err(DatasetError::DuplicatePath(w[0].to_string()));
        }
        records.sort_by(|a, b| a.path.cmp(&b.path));
        let n = records.len().max(1) as f64;
        let mut t = [0usize; 3];
        for r in &records {
            t[r.split as usize] += 1;
        }
        Ok(Self {
            records,
            seed: 0,
            fractions: SplitFractions {
                train: t[0] as f64 / n,
                val: t[1] as f64 / n,
                test: t[2] as f64 / n,
            },
        })
    }
}

/// Stratified split. Each class is sorted by path, shuffled with
/// `SplitMix64::derive(seed, ordinal)`, then cut into train, val and test
/// by [`split_sizes`].
pub fn stratified_split(
    samples: &[(String, ClassLabel)],
    fractions: SplitFractions,
    seed: u64,
) -> Result<SplitManifest, DatasetError> {
    fractions.validate()?;
    let mut records = Vec::with_capacity(samples.len());
    for label in ClassLabel::ALL {
        let mut paths: Vec<&str> = samples
            .iter()
            .filter(|(_, l)| *l == label)
            .map(|(p, _)| p.as_str())
            .collect();
        if paths.is_empty() {
            continue;
        }
        if paths.len() < 3 {
            return Err(DatasetError::ClassTooSmall {
                label,
                count: paths.len(),
            });
        }
        paths.sort_unstable();
        SplitMix64::derive(seed, label.ordinal() as u64).shuffle(&mut paths);
        let (train, val, _) = split_sizes(paths.len(), &fractions);
        for (i, p) in paths.into_iter().enumerate() {
            let split = if i < train {
                Split::Train
            } else if i < train + val {
                Split::Val
            } else {
                Split::Test
            };
            records.push(SampleRecord {
                path: p.to_string(),
                label,
                split,
            });
        }
    }
    records.sort_by(|a, b| a.path.cmp(&b.path));
    if let Some(w) = records.windows(2).find(|w| w[0].path == w[1].path) {
        return Err(DatasetError::DuplicatePath(w[0].path.clone()));
    }
    Ok(SplitManifest {
        records,
        seed,
        fractions,
    })
}

// ---------------------------------------------------------------------------
// Synthetic fixture

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FixtureConfig {
    pub per_class: usize,
    pub seed: u64,
    /// Square image side in pixels.
    pub size: usize,
}

impl Default for FixtureConfig {
    fn default() -> Self {
        Self {
            per_class: 100,
            seed: 0,
            size: 128,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct FixtureSummary {
    pub images: usize,
    pub masks: usize,
}

/// One rendered smear with its ground truth.
#[derive(Debug, Clone)]
pub struct FixtureSample {
    pub image: RgbImage,
    pub cell: BinaryMask,
    pub nucleus: BinaryMask,
}

const BACKGROUND: u8 = 250;

#[derive(Clone, Copy)]
enum NucleusShape {
    Round { r: f64 },
    /// Disc with a circular bite taken out of one side.
    Kidney { r: f64, bite_r: f64, bite_offset: f64 },
    /// Overlapping lobes on an arc around the centre.
    Lobed { lobe_r: f64, arc_r: f64, lobes: usize, spread: f64 },
}

struct Style {
    cell_r: f64,
    nucleus: NucleusShape,
    cytoplasm: [u8; 3],
    nucleus_rgb: [u8; 3],
}

/// Geometry is in pixels at 128x128 and scaled for other sizes.
fn style(label: ClassLabel) -> Style {
    match label {
        ClassLabel::Basophil => Style {
            cell_r: 27.0,
            nucleus: NucleusShape::Round { r: 17.0 },
            cytoplasm: [215, 120, 137],
            nucleus_rgb: [70, 25, 110],
        },
        ClassLabel::Erythroblast => Style {
            cell_r: 23.0,
            nucleus: NucleusShape::Round { r: 11.0 },
            cytoplasm: [220, 125, 135],
            nucleus_rgb: [40, 30, 90],
        },
        ClassLabel::Monocyte => Style {
            cell_r: 34.0,
            nucleus: NucleusShape::Kidney {
                r: 18.0,
                bite_r: 11.0,
                bite_offset: 16.0,
            },
            cytoplasm: [120, 150, 185],
            nucleus_rgb: [125, 55, 125],
        },
        ClassLabel::Myeloblast => Style {
            cell_r: 30.0,
            nucleus: NucleusShape::Round { r: 22.0 },
            cytoplasm: [110, 145, 190],
            nucleus_rgb: [105, 70, 160],
        },
        ClassLabel::SegNeutrophil => Style {
            cell_r: 28.0,
            nucleus: NucleusShape::Lobed {
                lobe_r: 7.0,
                arc_r: 11.0,
                lobes: 3,
                spread: 0.9,
            },
            cytoplasm: [225, 140, 160],
            nucleus_rgb: [170, 50, 110],
        },
    }
}

fn shift(rgb: [u8; 3], delta: i32) -> [u8; 3] {
    rgb.map(|c| (i32::from(c) + delta).clamp(0, 255) as u8)
}

/// Renders sample `index` of `label`. Pure function of its arguments.
///
/// Each image is a near-white background with one centred cell: a disc of
/// cytoplasm holding a class-specific nucleus. Jitter covers the centre
/// (±6 px), radii (±2 px cell, ±1 px nucleus), nucleus orientation, a
/// per-image brightness offset (±6) and per-pixel brightness noise (±3).
/// Brightness offsets are applied equally to all channels so hue is kept.
pub fn render_fixture_sample(label: ClassLabel, index: usize, seed: u64, size: usize) -> FixtureSample {
    let s = size as f64 / 128.0;
    let st = style(label);
    let mut rng = SplitMix64::derive(seed, (label.ordinal() as u64) << 32 | index as u64);
    let cx = size as f64 / 2.0 + rng.range_f64(-6.0, 6.0) * s;
    let cy = size as f64 / 2.0 + rng.range_f64(-6.0, 6.0) * s;
    let cell_r = (st.cell_r + rng.range_f64(-2.0, 2.0)) * s;
    let nuc_jitter = rng.range_f64(-1.0, 1.0);
    let theta = rng.range_f64(0.0, std::f64::consts::TAU);
    let brightness = rng.range_f64(-6.0, 6.0).round() as i32;

    let in_disc = |x: f64, y: f64, ox: f64, oy: f64, r: f64| (x - ox).powi(2) + (y - oy).powi(2) <= r * r;
    let in_nucleus = |x: f64, y: f64| -> bool {
        match st.nucleus {
            NucleusShape::Round { r } => in_disc(x, y, cx, cy, (r + nuc_jitter) * s),
            NucleusShape::Kidney {
                r,
                bite_r,
                bite_offset,
            } => {
                let (bx, by) = (cx + bite_offset * s * theta.cos(), cy + bite_offset * s * theta.sin());
                in_disc(x, y, cx, cy, (r + nuc_jitter) * s) && !in_disc(x, y, bx, by, bite_r * s)
            }
            NucleusShape::Lobed {
                lobe_r,
                arc_r,
                lobes,
                spread,
            } => (0..lobes).any(|k| {
                let a = theta + (k as f64 - (lobes - 1) as f64 / 2.0) * spread;
                let (lx, ly) = (cx + arc_r * s * a.cos(), cy + arc_r * s * a.sin());
                in_disc(x, y, lx, ly, (lobe_r + nuc_jitter * 0.5) * s)
            }),
        }
    };

    let mut pixels = Vec::with_capacity(size * size);
    let mut cell = Vec::with_capacity(size * size);
    let mut nucleus = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
            let is_cell = in_disc(fx, fy, cx, cy, cell_r);
            let is_nuc = is_cell && in_nucleus(fx, fy);
            let noise = rng.below(7) as i32 - 3;
            let base = if is_nuc {
                shift(st.nucleus_rgb, brightness)
            } else if is_cell {
                shift(st.cytoplasm, brightness)
            } else {
                [BACKGROUND; 3]
            };
            pixels.push(shift(base, noise));
            cell.push(is_cell);
            nucleus.push(is_nuc);
        }
    }
    FixtureSample {
        image: RgbImage::new(size, size, pixels).expect("size >= 1"),
        cell: BinaryMask::new(size, size, cell).expect("size >= 1"),
        nucleus: BinaryMask::new(size, size, nucleus).expect("size >= 1"),
    }
}

pub fn fixture_file_name(index: usize) -> String {
    format!("{index:04}.png")
}

/// Ground-truth mask path for `rel` (`<class>/<name>.png`) in a fixture.
pub fn ground_truth_path(root: &Path, target: &str, rel: &str) -> PathBuf {
    root.join(MASKS_DIR).join(target).join(rel)
}

/// Writes `per_class` images per class under `out/<class>/NNNN.png` and the
/// ground truth under `out/masks/{cell,nucleus}/<class>/NNNN.png`.
pub fn make_fixture(out: &Path, cfg: &FixtureConfig) -> Result<FixtureSummary, DatasetError> {
    if cfg.per_class < 3 {
        return Err(DatasetError::FixtureTooSmall(cfg.per_class));
    }
    if cfg.size == 0 {
        return Err(DatasetError::Image(ImageError::EmptyDimensions { width: 0, height: 0 }));
    }
    for label in ClassLabel::ALL {
        for dir in [
            out.join(label.dir_name()),
            out.join(MASKS_DIR).join("cell").join(label.dir_name()),
            out.join(MASKS_DIR).join("nucleus").join(label.dir_name()),
        ] {
            fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        }
    }
    let jobs: Vec<(ClassLabel, usize)> = ClassLabel::ALL
        .iter()
        .flat_map(|&l| (0..cfg.per_class).map(move |i| (l, i)))
        .collect();
    par::try_map(&jobs, |&(label, i)| -> Result<(), DatasetError> {
        let sample = render_fixture_sample(label, i, cfg.seed, cfg.size);
        let rel = format!("{}/{}", label.dir_name(), fixture_file_name(i));
        save_png(&sample.image, &out.join(&rel))?;
        save_mask_png(&sample.cell, &ground_truth_path(out, "cell", &rel))?;
        save_mask_png(&sample.nucleus, &ground_truth_path(out, "nucleus", &rel))?;
        Ok(())
    })?;
    Ok(FixtureSummary {
        images: jobs.len(),
        masks: 2 * jobs.len(),
    })
}
