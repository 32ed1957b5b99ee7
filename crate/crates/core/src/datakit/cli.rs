//! `pixelseg` command line.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data error,
//! 3 non-finite numerics.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::error::{Error, Result};
use crate::metrics::{self, DistanceMode, LabelMap, MetricsReport, RegionSpec};
use crate::sampling::{self, SampleStrategy, SkewFallback};
use crate::segmenter::{LabeledSlice, ModelConfig, Segmenter, Trainer};

use super::synth::{self, SynthConfig};
use super::volume::{self, Volume};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

pub const COMPARE_HEADER: &str = "seed,sampler,region,dice,hd95";
pub const SAMPLE_STATS_HEADER: &str = "volume,slice,class,count";

#[derive(Parser, Debug)]
#[command(
    name = "pixelseg",
    version,
    about = "Sparse-pixel hypercolumn segmentation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset.
    Synth {
        /// SynthConfig JSON; defaults are used when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model on every volume in a dataset directory.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// ModelConfig JSON; defaults are used when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides the config's iteration count.
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Per-step loss CSV.
        #[arg(long)]
        loss_csv: Option<PathBuf>,
    },
    /// Predict label volumes for a volume file or a directory of them.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare predicted and ground-truth volumes with matching file names.
    Evaluate {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// JSON list of {"name", "labels"} regions; one region per
        /// foreground class when omitted.
        #[arg(long)]
        regions: Option<PathBuf>,
        /// Voxel spacing as z,y,x.
        #[arg(long, value_parser = parse_spacing, default_value = "1,1,1")]
        spacing: [f64; 3],
        #[arg(long, value_enum, default_value_t = ModeArg::Surface)]
        distance: ModeArg,
        #[command(flatten)]
        out: OutArg,
    },
    /// Per-class counts of the pixels a sampling plan draws from each slice.
    SampleStats {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 256)]
        n: usize,
        #[arg(long, value_enum, default_value_t = StrategyArg::ClassBalanced)]
        strategy: StrategyArg,
        #[arg(long, value_enum, default_value_t = FallbackArg::Replacement)]
        skew_fallback: FallbackArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        ignore_label: Option<u8>,
        #[command(flatten)]
        out: OutArg,
    },
    /// Train uniform and class-balanced twins from identical seeds and
    /// report per-region Dice and HD95 on a test set.
    CompareSamplers {
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        test: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 10)]
        runs: usize,
        /// Seed of the first run; run r uses seed + r.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        out: OutArg,
    },
}

#[derive(Args, Debug)]
struct OutArg {
    /// Output CSV; standard output when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum StrategyArg {
    Uniform,
    ClassBalanced,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum FallbackArg {
    Replacement,
    Redistribute,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum ModeArg {
    Surface,
    AllVoxels,
}

/// Parses `argv` (including the program name) and runs the subcommand.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(error: &Error) -> i32 {
    match error {
        Error::NonFinite(_) => EXIT_NUMERIC,
        Error::Config(_) | Error::Json(_) => EXIT_USAGE,
        _ => EXIT_DATA,
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Synth { config, seed, out } => {
            let mut cfg = match config {
                Some(path) => SynthConfig::from_json(&read_text(&path)?)?,
                None => SynthConfig::default(),
            };
            if let Some(seed) = seed {
                cfg.seed = seed;
            }
            synth::generate_synthetic(&cfg, out)?;
            Ok(())
        }
        Command::Train {
            data,
            config,
            iterations,
            checkpoint,
            loss_csv,
        } => {
            let mut cfg = load_model_config(config.as_deref())?;
            if let Some(n) = iterations {
                cfg.iterations = n;
            }
            cfg.validate()?;
            let slices = load_slices(&data)?;
            let (model, losses) = train_model(cfg, &slices)?;
            model.save_checkpoint(&checkpoint)?;
            if let Some(path) = loss_csv {
                let mut out = String::from("step,loss\n");
                for (step, loss) in losses.iter().enumerate() {
                    out.push_str(&format!("{step},{loss}\n"));
                }
                fs::write(path, out)?;
            }
            Ok(())
        }
        Command::Predict {
            checkpoint,
            input,
            out,
        } => {
            let model = Segmenter::load_checkpoint(&checkpoint)?;
            if input.is_dir() {
                fs::create_dir_all(&out)?;
                for path in volume::list_volumes(&input)? {
                    let pred = predict_volume(&model, &Volume::load(&path)?)?;
                    pred.save(out.join(path.file_name().expect("listed file")))?;
                }
            } else {
                predict_volume(&model, &Volume::load(&input)?)?.save(&out)?;
            }
            Ok(())
        }
        Command::Evaluate {
            pred,
            gt,
            regions,
            spacing,
            distance,
            out,
        } => {
            let mode = match distance {
                ModeArg::Surface => DistanceMode::Surface,
                ModeArg::AllVoxels => DistanceMode::AllVoxels,
            };
            let specs = match regions {
                Some(path) => serde_json::from_str(&read_text(&path)?)?,
                None => None,
            };
            let reports = evaluate_dirs(&pred, &gt, specs, &spacing, mode)?;
            let mut buf = Vec::new();
            metrics::write_csv(&mut buf, reports.iter().map(|(n, r)| (n.as_str(), r)))?;
            emit(&out, &buf)
        }
        Command::SampleStats {
            data,
            n,
            strategy,
            skew_fallback,
            seed,
            ignore_label,
            out,
        } => {
            let mut plan = sampling::SamplePlan::new(n, strategy.into(), seed);
            plan.ignore_label = ignore_label;
            plan.skew_fallback = match skew_fallback {
                FallbackArg::Replacement => SkewFallback::Replacement,
                FallbackArg::Redistribute => SkewFallback::Redistribute,
            };
            let mut buf = format!("{SAMPLE_STATS_HEADER}\n");
            let mut image_index = 0u64;
            for path in volume::list_volumes(&data)? {
                let vol = Volume::load(&path)?;
                let name = case_name(&path);
                for z in 0..vol.dims().1 {
                    let batch = sampling::sample(&vol.slice_mask(z), &plan.for_image(image_index))?;
                    for (class, count) in &batch.per_class_counts {
                        buf.push_str(&format!("{name},{z},{class},{count}\n"));
                    }
                    image_index += 1;
                }
            }
            emit(&out, buf.as_bytes())
        }
        Command::CompareSamplers {
            train,
            test,
            config,
            runs,
            seed,
            out,
        } => {
            let cfg = load_model_config(config.as_deref())?;
            let train_slices = load_slices(&train)?;
            let test_volumes = load_volumes(&test)?;
            let rows = compare_samplers(&cfg, &train_slices, &test_volumes, runs, seed)?;
            emit(&out, comparison_csv(&rows).as_bytes())
        }
    }
}

impl From<StrategyArg> for SampleStrategy {
    fn from(s: StrategyArg) -> Self {
        match s {
            StrategyArg::Uniform => SampleStrategy::Uniform,
            StrategyArg::ClassBalanced => SampleStrategy::ClassBalanced,
        }
    }
}

fn parse_spacing(text: &str) -> std::result::Result<[f64; 3], String> {
    let parts: Vec<f64> = text
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<std::result::Result<_, _>>()?;
    match parts[..] {
        [z, y, x] if parts.iter().all(|v| v.is_finite() && *v > 0.0) => Ok([z, y, x]),
        _ => Err(format!(
            "expected three positive spacings z,y,x, got {text:?}"
        )),
    }
}

fn read_text(path: &Path) -> Result<String> {
    Ok(fs::read_to_string(path)?)
}

fn emit(out: &OutArg, bytes: &[u8]) -> Result<()> {
    match &out.out {
        Some(path) => fs::write(path, bytes)?,
        None => std::io::stdout().lock().write_all(bytes)?,
    }
    Ok(())
}

fn case_name(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

fn load_model_config(path: Option<&Path>) -> Result<ModelConfig> {
    match path {
        Some(p) => ModelConfig::from_json(&read_text(p)?),
        None => Ok(ModelConfig::default()),
    }
}

pub fn load_volumes(dir: impl AsRef<Path>) -> Result<Vec<Volume>> {
    let paths = volume::list_volumes(&dir)?;
    if paths.is_empty() {
        return Err(Error::invalid(
            "load_volumes",
            format!(
                "no .{} files in {}",
                volume::EXTENSION,
                dir.as_ref().display()
            ),
        ));
    }
    paths.iter().map(Volume::load).collect()
}

/// Every slice of every volume in `dir`, normalised.
pub fn load_slices(dir: impl AsRef<Path>) -> Result<Vec<LabeledSlice>> {
    let mut slices = Vec::new();
    for v in load_volumes(dir)? {
        slices.extend(v.labeled_slices()?);
    }
    Ok(slices)
}

/// Trains a fresh model for `config.iterations` steps.
pub fn train_model(config: ModelConfig, slices: &[LabeledSlice]) -> Result<(Segmenter, Vec<f64>)> {
    let iterations = config.iterations;
    let mut trainer = Trainer::new(Segmenter::new(config)?)?;
    let losses = trainer.train(slices, iterations, |_, _| {})?;
    Ok((trainer.into_model(), losses))
}

/// Label-only volume predicted slice by slice.
pub fn predict_volume(model: &Segmenter, vol: &Volume) -> Result<Volume> {
    let mut labels = Vec::with_capacity(vol.labels().len());
    for slice in vol.labeled_slices()? {
        labels.extend(model.segment(&slice)?);
    }
    Volume::labels_like(vol, labels)
}

/// Metrics for every prediction in `pred_dir` against the same-named file in
/// `gt_dir`. Without `specs`, each foreground label present is a region.
pub fn evaluate_dirs(
    pred_dir: &Path,
    gt_dir: &Path,
    specs: Option<Vec<RegionSpec>>,
    spacing: &[f64],
    mode: DistanceMode,
) -> Result<Vec<(String, MetricsReport)>> {
    let pred_paths = volume::list_volumes(pred_dir)?;
    if pred_paths.is_empty() {
        return Err(Error::invalid(
            "evaluate",
            format!("no predictions in {}", pred_dir.display()),
        ));
    }
    let mut pairs = Vec::with_capacity(pred_paths.len());
    for path in pred_paths {
        let gt_path = gt_dir.join(path.file_name().expect("listed file"));
        if !gt_path.is_file() {
            return Err(Error::invalid(
                "evaluate",
                format!("no ground truth {}", gt_path.display()),
            ));
        }
        pairs.push((
            case_name(&path),
            Volume::load(&path)?.label_map(),
            Volume::load(&gt_path)?.label_map(),
        ));
    }
    let specs = specs.unwrap_or_else(|| {
        let max = pairs
            .iter()
            .flat_map(|(_, p, g)| p.labels().iter().chain(g.labels()))
            .copied()
            .max()
            .unwrap_or(0);
        RegionSpec::per_class(max.saturating_add(1).max(2))
    });
    pairs
        .into_iter()
        .map(|(name, p, g)| Ok((name, metrics::evaluate(&p, &g, &specs, spacing, mode)?)))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonRow {
    pub seed: u64,
    pub sampler: SampleStrategy,
    pub region: String,
    /// Mean over test volumes.
    pub dice: f64,
    /// Mean over test volumes where it is defined.
    pub hd95: Option<f64>,
}

pub fn sampler_name(s: SampleStrategy) -> &'static str {
    match s {
        SampleStrategy::Uniform => "uniform",
        SampleStrategy::ClassBalanced => "class_balanced",
    }
}

/// Per-class region metrics of `model` averaged over `volumes`.
pub fn score_model(
    model: &Segmenter,
    volumes: &[Volume],
) -> Result<Vec<(String, f64, Option<f64>)>> {
    let n_classes = u8::try_from(model.config().n_classes)
        .map_err(|_| Error::invalid("score_model", "per-class regions need n_classes <= 255"))?;
    let specs = RegionSpec::per_class(n_classes);
    let mut reports = Vec::with_capacity(volumes.len());
    for vol in volumes {
        let pred: LabelMap = predict_volume(model, vol)?.label_map();
        reports.push(metrics::evaluate(
            &pred,
            &vol.label_map(),
            &specs,
            &[1.0; 3],
            DistanceMode::Surface,
        )?);
    }
    let n = reports.len() as f64;
    Ok(specs
        .iter()
        .enumerate()
        .map(|(k, spec)| {
            let dice = reports.iter().map(|r| r.regions[k].dice).sum::<f64>() / n;
            let hd: Vec<f64> = reports.iter().filter_map(|r| r.regions[k].hd95).collect();
            let hd95 = (!hd.is_empty()).then(|| hd.iter().sum::<f64>() / hd.len() as f64);
            (spec.name.clone(), dice, hd95)
        })
        .collect())
}

/// `runs` paired trainings; run `r` trains a uniform and a class-balanced
/// model that share the init and sampling seed `seed + r`.
pub fn compare_samplers(
    config: &ModelConfig,
    train: &[LabeledSlice],
    test: &[Volume],
    runs: usize,
    seed: u64,
) -> Result<Vec<ComparisonRow>> {
    if test.is_empty() {
        return Err(Error::invalid("compare_samplers", "no test volumes"));
    }
    let mut rows = Vec::new();
    for r in 0..runs as u64 {
        for sampler in [SampleStrategy::Uniform, SampleStrategy::ClassBalanced] {
            let mut cfg = config.clone();
            cfg.sampler = sampler;
            cfg.sgd.seed = seed + r;
            let (model, _) = train_model(cfg, train)?;
            for (region, dice, hd95) in score_model(&model, test)? {
                rows.push(ComparisonRow {
                    seed: seed + r,
                    sampler,
                    region,
                    dice,
                    hd95,
                });
            }
        }
    }
    Ok(rows)
}

pub fn comparison_csv(rows: &[ComparisonRow]) -> String {
    let mut out = format!("{COMPARE_HEADER}\n");
    for row in rows {
        let hd = row.hd95.map(|v| format!("{v:.6}")).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{:.6},{hd}\n",
            row.seed,
            sampler_name(row.sampler),
            row.region,
            row.dice
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn usage_errors_exit_with_one() {
        assert_eq!(run(["pixelseg"]), EXIT_USAGE);
        assert_eq!(run(["pixelseg", "frobnicate"]), EXIT_USAGE);
        assert_eq!(run(["pixelseg", "train", "--data"]), EXIT_USAGE);
        assert_eq!(run(["pixelseg", "--help"]), EXIT_OK);
    }

    #[test]
    fn missing_data_exits_with_two() {
        assert_eq!(
            run([
                "pixelseg",
                "sample-stats",
                "--data",
                "/nonexistent/pixelseg"
            ]),
            EXIT_DATA
        );
    }

    #[test]
    fn error_classes_map_to_codes() {
        assert_eq!(exit_code(&Error::NonFinite("x".into())), EXIT_NUMERIC);
        assert_eq!(exit_code(&Error::Config("x".into())), EXIT_USAGE);
        assert_eq!(exit_code(&Error::EmptyMask), EXIT_DATA);
    }
}
