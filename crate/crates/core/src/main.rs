use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use cellpipe::attention::Axis;
use cellpipe::dataset::{FixtureConfig, SplitFractions};
use cellpipe::pipeline::{self, BenchGrid, PipelineError, SegmentOptions};
use cellpipe::segmentation::{HueBand, SegMethod, SegTarget, SegTechnique, SegmentParams};
use cellpipe::trainer::{TrainConfig, FEATURE_SIDE};

/// Blood-cell smear segmentation, classification and area-attention toolkit.
#[derive(Debug, Parser)]
#[command(name = "cellpipe", version)]
struct Cli {
    /// Print a machine-readable summary to stdout.
    #[arg(long, global = true)]
    json: bool,
    /// Worker threads (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    jobs: usize,
    /// JSON config file; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render a synthetic labelled smear tree with ground-truth masks.
    Fixture(FixtureArgs),
    /// Segment every image of a class tree into a mirrored tree.
    Segment(SegmentArgs),
    /// Write a stratified train/val/test manifest.
    Split(SplitArgs),
    /// Train and evaluate the classifier on segmented trees.
    TrainEval(TrainEvalArgs),
    /// Compare full and area attention over a size grid.
    AttnBench(BenchArgs),
    /// Metrics JSON from a confusion-matrix CSV.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
struct FixtureArgs {
    #[arg(long)]
    out: PathBuf,
    /// Images per class [default: 100].
    #[arg(long)]
    per_class: Option<usize>,
    /// [default: 0]
    #[arg(long)]
    seed: Option<u64>,
    /// Image side in pixels [default: 128].
    #[arg(long)]
    size: Option<usize>,
}

#[derive(Debug, Args)]
struct SegmentArgs {
    /// Class tree to segment.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Output tree [default: <input>-<method>-<target>].
    #[arg(long)]
    out: Option<PathBuf>,
    /// hue or otsu.
    #[arg(long)]
    method: Option<SegTechnique>,
    /// cell or nucleus.
    #[arg(long)]
    target: Option<SegTarget>,
    /// Cell hue band `lo,hi,min_saturation` [default: 180,359,0.08].
    #[arg(long)]
    cell_band: Option<HueBand>,
    /// Nucleus hue band `lo,hi,min_saturation` [default: 220,340,0.15].
    #[arg(long)]
    nucleus_band: Option<HueBand>,
    /// Rescale outputs to `WxH`.
    #[arg(long, value_parser = parse_size)]
    resize: Option<(usize, usize)>,
    /// Tree with `masks/{cell,nucleus}` ground truth for Dice scores
    /// [default: the input tree when it has a masks directory].
    #[arg(long)]
    ground_truth: Option<PathBuf>,
    /// Also write the binary masks under `<out>/masks`.
    #[arg(long)]
    write_masks: bool,
}

#[derive(Debug, Args)]
struct SplitArgs {
    #[arg(long)]
    input: Option<PathBuf>,
    /// Manifest CSV to write.
    #[arg(long)]
    out: PathBuf,
    /// `train,val,test` [default: 0.7,0.15,0.15].
    #[arg(long)]
    fractions: Option<SplitFractions>,
    /// [default: 0]
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct TrainEvalArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Segmented tree, optionally `name=path`; repeatable.
    #[arg(long = "data")]
    data: Vec<String>,
    /// Use the four default segmented trees next to this original tree.
    #[arg(long)]
    variants_of: Option<PathBuf>,
    /// Results directory.
    #[arg(long)]
    out: PathBuf,
    /// Side of the square feature image [default: 32].
    #[arg(long)]
    input_size: Option<usize>,
    /// [default: 50]
    #[arg(long)]
    epochs: Option<usize>,
    /// [default: 0.1]
    #[arg(long)]
    learning_rate: Option<f64>,
    /// [default: 16]
    #[arg(long)]
    batch_size: Option<usize>,
    /// [default: 0.0001]
    #[arg(long)]
    l2: Option<f64>,
    /// [default: 0]
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct BenchArgs {
    /// CSV to write; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Token counts [default: 64,256,1024].
    #[arg(long, value_delimiter = ',')]
    tokens: Option<Vec<usize>>,
    /// Head counts [default: 2].
    #[arg(long, value_delimiter = ',')]
    heads: Option<Vec<usize>>,
    /// Head dims [default: 16].
    #[arg(long, value_delimiter = ',')]
    dims: Option<Vec<usize>>,
    /// Area counts [default: 1,2,4,8].
    #[arg(long, value_delimiter = ',')]
    segments: Option<Vec<usize>>,
    /// horizontal, vertical or token [default: horizontal].
    #[arg(long)]
    axis: Option<Axis>,
    /// [default: 0]
    #[arg(long)]
    seed: Option<u64>,
    /// Write 0 in the timing columns.
    #[arg(long)]
    no_timing: bool,
}

#[derive(Debug, Args)]
struct ReportArgs {
    /// Confusion-matrix CSV.
    #[arg(long)]
    confusion: PathBuf,
    /// JSON to write; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_size(s: &str) -> Result<(usize, usize), String> {
    let (w, h) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("size `{s}` must be WxH"))?;
    let p = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("size `{s}`: {e}"));
    let (w, h) = (p(w)?, p(h)?);
    if w == 0 || h == 0 {
        return Err(format!("size `{s}` must be positive"));
    }
    Ok((w, h))
}

/// Config file schema. Every field is optional.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    seed: Option<u64>,
    jobs: Option<usize>,
    dataset_root: Option<PathBuf>,
    output_root: Option<PathBuf>,
    method: Option<String>,
    target: Option<String>,
    cell_band: Option<HueBand>,
    nucleus_band: Option<HueBand>,
    fractions: Option<SplitFractions>,
    resize: Option<[usize; 2]>,
    input_size: Option<usize>,
    per_class: Option<usize>,
    fixture_size: Option<usize>,
    #[serde(default)]
    train: FileTrain,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileTrain {
    epochs: Option<usize>,
    learning_rate: Option<f64>,
    batch_size: Option<usize>,
    l2: Option<f64>,
}

fn load_config(path: Option<&Path>) -> Result<FileConfig, Failure> {
    let Some(path) = path else {
        return Ok(FileConfig::default());
    };
    let text = fs::read_to_string(path).map_err(|e| Failure::usage(format!("config {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Failure::usage(format!("config {}: {e}", path.display())))
}

struct Failure {
    code: u8,
    err: anyhow::Error,
}

impl Failure {
    fn usage(msg: impl Into<String>) -> Self {
        Self {
            code: 2,
            err: anyhow::anyhow!(msg.into()),
        }
    }
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        Self {
            code: if e.is_usage() { 2 } else { 1 },
            err: e.into(),
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(err: anyhow::Error) -> Self {
        Self { code: 1, err }
    }
}

fn emit<T: Serialize>(json: bool, value: &T, human: impl FnOnce()) -> Result<(), Failure> {
    if json {
        println!("{}", serde_json::to_string(value).context("serializing summary")?);
    } else {
        human();
    }
    Ok(())
}

fn parse_or_usage<T: std::str::FromStr<Err = String>>(what: &str, s: &str) -> Result<T, Failure> {
    s.parse().map_err(|e| Failure::usage(format!("{what}: {e}")))
}

fn run(cli: Cli) -> Result<(), Failure> {
    let file = load_config(cli.config.as_deref())?;
    let jobs = if cli.jobs > 0 { cli.jobs } else { file.jobs.unwrap_or(0) };
    cellpipe::par::with_jobs(jobs, || dispatch(cli, file))
}

fn dispatch(cli: Cli, file: FileConfig) -> Result<(), Failure> {
    let json = cli.json;
    match cli.cmd {
        Command::Fixture(a) => {
            let d = FixtureConfig::default();
            let cfg = FixtureConfig {
                per_class: a.per_class.or(file.per_class).unwrap_or(d.per_class),
                seed: a.seed.or(file.seed).unwrap_or(d.seed),
                size: a.size.or(file.fixture_size).unwrap_or(d.size),
            };
            let summary = pipeline::make_fixture(&a.out, &cfg)?;
            emit(json, &summary, || {
                println!("wrote {} images and {} masks to {}", summary.images, summary.masks, a.out.display())
            })
        }
        Command::Segment(a) => {
            let input = a
                .input
                .or(file.dataset_root)
                .ok_or_else(|| Failure::usage("segment needs --input"))?;
            let technique = match (a.method, &file.method) {
                (Some(m), _) => m,
                (None, Some(s)) => parse_or_usage("method", s)?,
                (None, None) => return Err(Failure::usage("segment needs --method hue|otsu")),
            };
            let target = match (a.target, &file.target) {
                (Some(t), _) => t,
                (None, Some(s)) => parse_or_usage("target", s)?,
                (None, None) => return Err(Failure::usage("segment needs --target cell|nucleus")),
            };
            let method = SegMethod::new(technique, target);
            let d = SegmentParams::default();
            let params = SegmentParams {
                cell_band: a.cell_band.or(file.cell_band).unwrap_or(d.cell_band),
                nucleus_band: a.nucleus_band.or(file.nucleus_band).unwrap_or(d.nucleus_band),
            };
            let out = a
                .out
                .or(file.output_root)
                .unwrap_or_else(|| pipeline::default_segment_out(&input, method));
            let ground_truth = a.ground_truth.or_else(|| {
                input
                    .join(cellpipe::dataset::MASKS_DIR)
                    .is_dir()
                    .then(|| input.clone())
            });
            let opts = SegmentOptions {
                write_masks: a.write_masks,
                ground_truth,
                resize: a.resize.or(file.resize.map(|[w, h]| (w, h))),
            };
            let summary = pipeline::segment_tree(&input, &out, method, &params, &opts)?;
            emit(json, &summary, || {
                println!("{}: {} images -> {}", summary.variant, summary.images, summary.output.display());
                for c in &summary.per_class {
                    let mut line = format!(
                        "  {:<15} n={:<5} fg={:.4}",
                        c.label.dir_name(),
                        c.images,
                        c.mean_foreground_fraction
                    );
                    if let (Some(mean), Some(min)) = (c.mean_dice, c.min_dice) {
                        line.push_str(&format!(" dice mean={mean:.4} min={min:.4}"));
                    }
                    if let Some(ok) = c.nucleus_in_cell {
                        line.push_str(&format!(" nucleus_in_cell={ok}/{}", c.images));
                    }
                    println!("{line}");
                }
            })
        }
        Command::Split(a) => {
            let input = a
                .input
                .or(file.dataset_root)
                .ok_or_else(|| Failure::usage("split needs --input"))?;
            let fractions = a.fractions.or(file.fractions).unwrap_or_default();
            fractions
                .validate()
                .map_err(|e| Failure::usage(e.to_string()))?;
            let seed = a.seed.or(file.seed).unwrap_or(0);
            let manifest = pipeline::split_tree(&input, &a.out, fractions, seed)?;
            let totals = manifest.split_totals();
            #[derive(Serialize)]
            struct SplitSummary {
                manifest: PathBuf,
                train: usize,
                val: usize,
                test: usize,
            }
            let s = SplitSummary {
                manifest: a.out.clone(),
                train: totals[0],
                val: totals[1],
                test: totals[2],
            };
            emit(json, &s, || {
                println!("train={} val={} test={} -> {}", s.train, s.val, s.test, s.manifest.display())
            })
        }
        Command::TrainEval(a) => {
            let d = TrainConfig::default();
            let cfg = TrainConfig {
                epochs: a.epochs.or(file.train.epochs).unwrap_or(d.epochs),
                learning_rate: a.learning_rate.or(file.train.learning_rate).unwrap_or(d.learning_rate),
                batch_size: a.batch_size.or(file.train.batch_size).unwrap_or(d.batch_size),
                seed: a.seed.or(file.seed).unwrap_or(d.seed),
                l2: a.l2.or(file.train.l2).unwrap_or(d.l2),
            };
            cfg.validate().map_err(|e| Failure::usage(e.to_string()))?;
            let side = a.input_size.or(file.input_size).unwrap_or(FEATURE_SIDE);
            if side == 0 {
                return Err(Failure::usage("--input-size must be positive"));
            }
            let mut variants = Vec::new();
            if let Some(base) = a.variants_of.or(file.dataset_root) {
                for m in SegMethod::ALL {
                    variants.push((m.variant_name(), pipeline::default_segment_out(&base, m)));
                }
            }
            for spec in &a.data {
                let (name, path) = match spec.split_once('=') {
                    Some((n, p)) => (n.to_string(), PathBuf::from(p)),
                    None => {
                        let p = PathBuf::from(spec);
                        (variant_from_dir(&p), p)
                    }
                };
                variants.push((name, path));
            }
            if variants.is_empty() {
                return Err(Failure::usage("train-eval needs --data or --variants-of"));
            }
            let results = pipeline::train_eval(&a.manifest, &variants, &cfg, side, &a.out)?;
            emit(json, &results, || {
                print!("{}", pipeline::summary_csv(&results));
            })
        }
        Command::AttnBench(a) => {
            let d = BenchGrid::default();
            let grid = BenchGrid {
                tokens: a.tokens.unwrap_or(d.tokens),
                heads: a.heads.unwrap_or(d.heads),
                dims: a.dims.unwrap_or(d.dims),
                segments: a.segments.unwrap_or(d.segments),
                axis: a.axis.unwrap_or(d.axis),
                seed: a.seed.or(file.seed).unwrap_or(d.seed),
                timing: !a.no_timing,
            };
            if grid.tokens.contains(&0) || grid.heads.contains(&0) || grid.dims.contains(&0) {
                return Err(Failure::usage("grid sizes must be positive"));
            }
            let (rows, skipped) = pipeline::attn_bench(&grid)?;
            let csv = pipeline::bench_csv(&rows);
            match &a.out {
                Some(p) => fs::write(p, &csv).with_context(|| format!("writing {}", p.display()))?,
                None if !json => print!("{csv}"),
                None => {}
            }
            if json {
                #[derive(Serialize)]
                struct BenchSummary<'a> {
                    rows: &'a [pipeline::BenchRow],
                    skipped: &'a [String],
                }
                emit(true, &BenchSummary { rows: &rows, skipped: &skipped }, || {})?;
            }
            Ok(())
        }
        Command::Report(a) => {
            let report = pipeline::report_from_csv(&a.confusion)?;
            let mut text = serde_json::to_string_pretty(&report).context("serializing report")?;
            text.push('\n');
            match &a.out {
                Some(p) => fs::write(p, &text).with_context(|| format!("writing {}", p.display()))?,
                None => print!("{text}"),
            }
            Ok(())
        }
    }
}

/// `fixture-otsu-cell` names the `cell-otsu` variant; other names are kept.
fn variant_from_dir(p: &Path) -> String {
    let name = p
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    SegMethod::ALL
        .into_iter()
        .find(|m| name.ends_with(&format!("-{}", m.dir_suffix())))
        .map(|m| m.variant_name())
        .unwrap_or(name)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stderr)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.err);
            ExitCode::from(f.code)
        }
    }
}
