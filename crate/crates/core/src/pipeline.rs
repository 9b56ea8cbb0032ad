//! End-to-end workflows: fixture generation, batch segmentation of a
//! dataset tree, splitting, training/evaluation per segmented variant, and
//! the attention benchmark grid.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use thiserror::Error;

use crate::attention::{self, AttentionConfig, AttentionError, Axis, FeatureMap};
use crate::dataset::{self, ClassLabel, DatasetError, FixtureConfig, FixtureSummary, Split, SplitFractions, SplitManifest};
use crate::image_core::{self, ImageError};
use crate::metrics::{self, ConfusionMatrix, MetricsError, MetricsReport};
use crate::par;
use crate::rng::SplitMix64;
use crate::segmentation::{self, SegMethod, SegTarget, SegmentParams, SegmentationError};
use crate::trainer::{self, Example, TrainConfig, TrainError};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("input not found: {0}")]
    MissingInput(PathBuf),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}: {source}")]
    ImageAt {
        path: PathBuf,
        #[source]
        source: ImageError,
    },
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Segmentation(#[from] SegmentationError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Attention(#[from] AttentionError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl PipelineError {
    /// Bad paths or arguments rather than failures while doing the work.
    pub fn is_usage(&self) -> bool {
        matches!(
            self,
            PipelineError::MissingInput(_)
                | PipelineError::Dataset(
                    DatasetError::MissingRoot(_)
                        | DatasetError::UnknownClass { .. }
                        | DatasetError::BadFractions(_)
                        | DatasetError::FixtureTooSmall(_)
                )
                | PipelineError::Segmentation(SegmentationError::InvalidBand(_))
                | PipelineError::Train(TrainError::BadConfig(_))
        )
    }
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), PipelineError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    fs::write(path, bytes).map_err(io_err(path))
}

pub fn make_fixture(out: &Path, cfg: &FixtureConfig) -> Result<FixtureSummary, PipelineError> {
    Ok(dataset::make_fixture(out, cfg)?)
}

/// `<root>-<method>-<target>` next to `root`.
pub fn default_segment_out(root: &Path, method: SegMethod) -> PathBuf {
    let name = root
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "data".into());
    root.with_file_name(format!("{name}-{}", method.dir_suffix()))
}

#[derive(Debug, Clone, Default)]
pub struct SegmentOptions {
    /// Write the selected mask to `<out>/masks/<class>/<name>.png`.
    pub write_masks: bool,
    /// Tree holding `masks/{cell,nucleus}/<class>/<name>.png` ground truth.
    pub ground_truth: Option<PathBuf>,
    /// Rescale the segmented image before writing.
    pub resize: Option<(usize, usize)>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ClassSegStats {
    pub label: ClassLabel,
    pub images: usize,
    pub mean_foreground_fraction: f64,
    pub mean_dice: Option<f64>,
    pub min_dice: Option<f64>,
    /// Images whose nucleus mask lies inside the cell mask (nucleus target only).
    pub nucleus_in_cell: Option<usize>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SegmentSummary {
    pub variant: String,
    pub output: PathBuf,
    pub images: usize,
    pub per_class: Vec<ClassSegStats>,
}

impl SegmentSummary {
    pub fn min_dice(&self) -> Option<f64> {
        self.per_class.iter().filter_map(|c| c.min_dice).reduce(f64::min)
    }

    pub fn all_nucleus_in_cell(&self) -> Option<bool> {
        let mut any = false;
        let mut ok = true;
        for c in &self.per_class {
            if let Some(n) = c.nucleus_in_cell {
                any = true;
                ok &= n == c.images;
            }
        }
        any.then_some(ok)
    }
}

struct ImageOutcome {
    label: ClassLabel,
    fg_fraction: f64,
    dice: Option<f64>,
    nucleus_in_cell: Option<bool>,
}

/// Segments every image of `root` into the mirrored tree `out`.
pub fn segment_tree(
    root: &Path,
    out: &Path,
    method: SegMethod,
    params: &SegmentParams,
    opts: &SegmentOptions,
) -> Result<SegmentSummary, PipelineError> {
    params.cell_band.validate()?;
    params.nucleus_band.validate()?;
    let samples = dataset::scan(root)?;
    for label in ClassLabel::ALL {
        let dir = out.join(label.dir_name());
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        if opts.write_masks {
            let dir = out.join(dataset::MASKS_DIR).join(label.dir_name());
            fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        }
    }
    let outcomes = par::try_map(&samples, |(rel, label)| -> Result<ImageOutcome, PipelineError> {
        let src = root.join(rel);
        let img = image_core::load_rgb(&src).map_err(|source| PipelineError::ImageAt { path: src.clone(), source })?;
        let masks = segmentation::cell_and_nucleus(&img, method.technique, params)?;
        let mask = match method.target {
            SegTarget::Cell => &masks.cell,
            SegTarget::Nucleus => &masks.nucleus,
        };
        let mut seg = image_core::apply_mask(&img, mask)?;
        if let Some((w, h)) = opts.resize {
            seg = image_core::resize(&seg, w, h)?;
        }
        let dst = out.join(rel);
        image_core::save_png(&seg, &dst).map_err(|source| PipelineError::ImageAt { path: dst.clone(), source })?;
        if opts.write_masks {
            let mp = out.join(dataset::MASKS_DIR).join(rel);
            image_core::save_mask_png(mask, &mp).map_err(|source| PipelineError::ImageAt { path: mp.clone(), source })?;
        }
        let dice = match &opts.ground_truth {
            Some(gt_root) => {
                let gp = dataset::ground_truth_path(gt_root, method.target.name(), rel);
                if gp.is_file() {
                    let gt = image_core::load_mask_png(&gp).map_err(|source| PipelineError::ImageAt { path: gp.clone(), source })?;
                    Some(mask.dice(&gt)?)
                } else {
                    None
                }
            }
            None => None,
        };
        let nucleus_in_cell = match method.target {
            SegTarget::Nucleus => Some(masks.nucleus.is_subset_of(&masks.cell)?),
            SegTarget::Cell => None,
        };
        Ok(ImageOutcome {
            label: *label,
            fg_fraction: mask.count() as f64 / (img.width() * img.height()) as f64,
            dice,
            nucleus_in_cell,
        })
    })?;

    let per_class = ClassLabel::ALL
        .iter()
        .map(|&label| {
            let mine: Vec<&ImageOutcome> = outcomes.iter().filter(|o| o.label == label).collect();
            let n = mine.len();
            let dices: Vec<f64> = mine.iter().filter_map(|o| o.dice).collect();
            ClassSegStats {
                label,
                images: n,
                mean_foreground_fraction: mine.iter().map(|o| o.fg_fraction).sum::<f64>() / n.max(1) as f64,
                mean_dice: (!dices.is_empty()).then(|| dices.iter().sum::<f64>() / dices.len() as f64),
                min_dice: dices.iter().copied().reduce(f64::min),
                nucleus_in_cell: (method.target == SegTarget::Nucleus)
                    .then(|| mine.iter().filter(|o| o.nucleus_in_cell == Some(true)).count()),
            }
        })
        .collect();
    Ok(SegmentSummary {
        variant: method.variant_name(),
        output: out.to_path_buf(),
        images: outcomes.len(),
        per_class,
    })
}

pub fn split_tree(root: &Path, manifest_out: &Path, fractions: SplitFractions, seed: u64) -> Result<SplitManifest, PipelineError> {
    let samples = dataset::scan(root)?;
    let manifest = dataset::stratified_split(&samples, fractions, seed)?;
    manifest.save(manifest_out)?;
    Ok(manifest)
}

#[derive(Debug, Clone, Serialize)]
pub struct VariantResult {
    pub variant: String,
    pub val_accuracy: f64,
    pub test_accuracy: f64,
    pub epochs: usize,
}

/// Summary table: `variant,val_accuracy,test_accuracy`.
pub fn summary_csv(results: &[VariantResult]) -> String {
    let mut s = String::from("variant,val_accuracy,test_accuracy\n");
    for r in results {
        s.push_str(&format!("{},{:.6},{:.6}\n", r.variant, r.val_accuracy, r.test_accuracy));
    }
    s
}

fn load_examples(root: &Path, manifest: &SplitManifest, split: Split, side: usize) -> Result<Vec<Example>, PipelineError> {
    let records: Vec<_> = manifest.records_in(split).collect();
    par::try_map(&records, |r| {
        let path = root.join(&r.path);
        if !path.is_file() {
            return Err(PipelineError::MissingInput(path));
        }
        let img = image_core::load_rgb(&path).map_err(|source| PipelineError::ImageAt { path, source })?;
        Ok(Example {
            features: trainer::featurize_with(&img, side),
            label: r.label.ordinal(),
        })
    })
}

fn confusion(params: &trainer::ModelParams, data: &[Example]) -> Result<ConfusionMatrix, PipelineError> {
    let mut cm = ConfusionMatrix::for_cell_classes();
    let preds = par::try_map(data, |ex| trainer::predict_index(params, &ex.features))?;
    for (ex, p) in data.iter().zip(preds) {
        cm.accumulate(ex.label, p)?;
    }
    Ok(cm)
}

fn write_report(dir: &Path, name: &str, cm: &ConfusionMatrix) -> Result<MetricsReport, PipelineError> {
    let mut csv = Vec::new();
    cm.write_csv(&mut csv)?;
    write_file(&dir.join(format!("confusion_{name}.csv")), &csv)?;
    let report = metrics::report(cm)?;
    let mut json = serde_json::to_vec_pretty(&report)?;
    json.push(b'\n');
    write_file(&dir.join(format!("report_{name}.json")), &json)?;
    Ok(report)
}

/// Trains on the train split of `data_root`, evaluates on val, then reads
/// the test split once and evaluates on it. Artifacts go to `out_dir`:
/// `loss_curve.csv`, `confusion_{val,test}.csv`, `report_{val,test}.json`
/// and `model.bin`.
pub fn train_eval_variant(
    variant: &str,
    data_root: &Path,
    manifest: &SplitManifest,
    cfg: &TrainConfig,
    input_side: usize,
    out_dir: &Path,
) -> Result<VariantResult, PipelineError> {
    if !data_root.is_dir() {
        return Err(PipelineError::MissingInput(data_root.to_path_buf()));
    }
    cfg.validate()?;
    let train_set = load_examples(data_root, manifest, Split::Train, input_side)?;
    let val_set = load_examples(data_root, manifest, Split::Val, input_side)?;
    let (params, curve) = trainer::train(&train_set, &val_set, ClassLabel::COUNT, cfg)?;
    write_file(&out_dir.join("loss_curve.csv"), curve.to_csv().as_bytes())?;
    let mut blob = Vec::new();
    params.write_to(&mut blob)?;
    write_file(&out_dir.join("model.bin"), &blob)?;
    let val_report = write_report(out_dir, "val", &confusion(&params, &val_set)?)?;

    // The test split is touched exactly here, after all fitting is done.
    let test_set = load_examples(data_root, manifest, Split::Test, input_side)?;
    if test_set.is_empty() {
        return Err(TrainError::EmptySplit("test").into());
    }
    let test_report = write_report(out_dir, "test", &confusion(&params, &test_set)?)?;
    Ok(VariantResult {
        variant: variant.to_string(),
        val_accuracy: val_report.overall_accuracy,
        test_accuracy: test_report.overall_accuracy,
        epochs: curve.entries.len(),
    })
}

/// Runs [`train_eval_variant`] for each `(name, root)` and writes
/// `summary.csv` to `out_dir`.
pub fn train_eval(
    manifest_path: &Path,
    variants: &[(String, PathBuf)],
    cfg: &TrainConfig,
    input_side: usize,
    out_dir: &Path,
) -> Result<Vec<VariantResult>, PipelineError> {
    if !manifest_path.is_file() {
        return Err(PipelineError::MissingInput(manifest_path.to_path_buf()));
    }
    for (_, root) in variants {
        if !root.is_dir() {
            return Err(PipelineError::MissingInput(root.clone()));
        }
    }
    let manifest = SplitManifest::load(manifest_path)?;
    let mut results = Vec::with_capacity(variants.len());
    for (name, root) in variants {
        log::info!("train-eval {name} from {}", root.display());
        let r = train_eval_variant(name, root, &manifest, cfg, input_side, &out_dir.join(name))?;
        log::info!("{name}: val {:.4} test {:.4}", r.val_accuracy, r.test_accuracy);
        results.push(r);
    }
    write_file(&out_dir.join("summary.csv"), summary_csv(&results).as_bytes())?;
    Ok(results)
}

// ---------------------------------------------------------------------------
// Attention benchmark

#[derive(Debug, Clone)]
pub struct BenchGrid {
    pub tokens: Vec<usize>,
    pub heads: Vec<usize>,
    pub dims: Vec<usize>,
    pub segments: Vec<usize>,
    pub axis: Axis,
    pub seed: u64,
    /// Record wall-clock times; when false the time columns are 0 so the CSV
    /// is reproducible byte for byte.
    pub timing: bool,
}

impl Default for BenchGrid {
    fn default() -> Self {
        Self {
            tokens: vec![64, 256, 1024],
            heads: vec![2],
            dims: vec![16],
            segments: vec![1, 2, 4, 8],
            axis: Axis::Horizontal,
            seed: 0,
            timing: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct BenchRow {
    pub n: usize,
    pub h: usize,
    pub d: usize,
    pub l: usize,
    pub axis: String,
    pub macs_full: u64,
    pub macs_area: u64,
    pub wall_ns_full: u128,
    pub wall_ns_area: u128,
}

/// Near-square `(H, W)` grid for `n` tokens, `W` being the largest divisor
/// of `n` not above `sqrt(n)`.
pub fn grid_shape(n: usize) -> (usize, usize) {
    let mut w = (n as f64).sqrt() as usize;
    while w > 1 && !n.is_multiple_of(w) {
        w -= 1;
    }
    let w = w.max(1);
    (n / w, w)
}

/// Runs full and area attention over the grid. Configurations that cannot
/// be split evenly are skipped with a warning and reported in the second
/// return value.
pub fn attn_bench(grid: &BenchGrid) -> Result<(Vec<BenchRow>, Vec<String>), PipelineError> {
    let mut rows = Vec::new();
    let mut skipped = Vec::new();
    let mut rng = SplitMix64::new(grid.seed);
    for &n in &grid.tokens {
        for &h in &grid.heads {
            for &d in &grid.dims {
                let (height, width) = grid_shape(n);
                let mut make = || -> Result<FeatureMap, AttentionError> {
                    FeatureMap::random(n, h, d, &mut rng)?.with_spatial(height, width)
                };
                let (q, k, v) = (make()?, make()?, make()?);
                let t0 = Instant::now();
                let (_, full) = attention::full_attention(&q, &k, &v, attention::default_scale(d))?;
                let wall_full = t0.elapsed().as_nanos();
                for &l in &grid.segments {
                    let cfg = AttentionConfig {
                        segments: l,
                        axis: grid.axis,
                        scale: None,
                    };
                    let t1 = Instant::now();
                    let area = match attention::area_attention(&q, &k, &v, &cfg) {
                        Ok((_, area)) => area,
                        Err(e @ (AttentionError::NotDivisible { .. } | AttentionError::ZeroSegments)) => {
                            let msg = format!("skipping n={n} h={h} d={d} l={l} ({height}x{width} grid): {e}");
                            log::warn!("{msg}");
                            skipped.push(msg);
                            continue;
                        }
                        Err(e) => return Err(e.into()),
                    };
                    let wall_area = t1.elapsed().as_nanos();
                    rows.push(BenchRow {
                        n,
                        h,
                        d,
                        l,
                        axis: grid.axis.name().to_string(),
                        macs_full: full.macs,
                        macs_area: area.macs,
                        wall_ns_full: if grid.timing { wall_full } else { 0 },
                        wall_ns_area: if grid.timing { wall_area } else { 0 },
                    });
                }
            }
        }
    }
    Ok((rows, skipped))
}

/// `n,h,d,l,axis,macs_full,macs_area,wall_ns_full,wall_ns_area`
pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut s = String::from("n,h,d,l,axis,macs_full,macs_area,wall_ns_full,wall_ns_area\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            r.n, r.h, r.d, r.l, r.axis, r.macs_full, r.macs_area, r.wall_ns_full, r.wall_ns_area
        ));
    }
    s
}

/// Metrics report from a confusion-matrix CSV.
pub fn report_from_csv(path: &Path) -> Result<MetricsReport, PipelineError> {
    if !path.is_file() {
        return Err(PipelineError::MissingInput(path.to_path_buf()));
    }
    let f = fs::File::open(path).map_err(io_err(path))?;
    let cm = ConfusionMatrix::read_csv(io::BufReader::new(f))?;
    Ok(metrics::report(&cm)?)
}
