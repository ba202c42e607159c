//! `liverseg`: phantom generation, training, prediction, evaluation and
//! self-checks for the cascaded liver and lesion segmentation pipeline.

mod overlay;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use liverseg_core::arch::{analyze_shapes, ArchSpec};
use liverseg_core::checkpoint::{load_model, save_model};
use liverseg_core::config::RunConfig;
use liverseg_core::metrics::{evaluate, CaseMetrics, EvalReport};
use liverseg_core::pipeline::{
    all_slices, calibrate_modes, predict_volume, read_dataset, train_model, training_slices, write_dataset,
    generate_dataset, selection_seed, Case, ModeThresholds, PredictMode, HISTORY_FILE, IMAGE_SUFFIX, MASK_SUFFIX, THRESHOLDS_FILE,
};
use liverseg_core::preprocess::{select_training_slices, SliceContent};
use liverseg_core::verify::{forward_shapes_agree, gradient_suite, TABLE1_OUTPUT_COLUMN};
use liverseg_core::volume::{read_intensity, read_labels, write_volume};

#[derive(Parser)]
#[command(name = "liverseg", version, about = "Cascaded dilated ResNet liver and lesion segmentation on CT slices")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

/// Options shared by every subcommand. Flags override the config file.
#[derive(Args)]
struct Global {
    /// Run configuration (JSON). Built-in desk defaults when absent.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed for phantoms, slice selection, initialization and shuffling.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Training epochs for every network.
    #[arg(long, global = true)]
    epochs: Option<usize>,
    /// Channel width multiplier (1.0 is the full-width network).
    #[arg(long, global = true)]
    width_multiplier: Option<f64>,
    /// Dataset directory.
    #[arg(long, global = true)]
    data_dir: Option<PathBuf>,
    /// Model directory.
    #[arg(long, global = true)]
    checkpoint_dir: Option<PathBuf>,
    /// Directory for masks, reports and images.
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic training and validation phantoms.
    Phantom,
    /// Window the training phantoms and write the balanced slice selection.
    Preprocess,
    /// Train both stages, pick thresholds on training phantoms, save the model.
    Train,
    /// Write a label mask per volume.
    Predict(PredictArgs),
    /// Score masks against ground truth.
    Evaluate(EvaluateArgs),
    /// Finite-difference check of every differentiable op and residual blocks.
    Gradcheck,
    /// Per-row output extents of an architecture.
    Shapecheck(ShapecheckArgs),
    /// Render mask overlays as PNG images.
    Overlay(OverlayArgs),
}

#[derive(Args)]
struct PredictArgs {
    /// Image volumes to segment; the validation phantoms when absent.
    #[arg(long = "input", num_args = 1..)]
    inputs: Vec<PathBuf>,
    /// Average the cascade over the configured scales (the default).
    #[arg(long, conflicts_with_all = ["single_scale", "stage1"])]
    multiscale: bool,
    /// Run the cascade at the native resolution only.
    #[arg(long, conflicts_with = "stage1")]
    single_scale: bool,
    /// Use the first-stage networks only.
    #[arg(long)]
    stage1: bool,
}

impl PredictArgs {
    fn mode(&self) -> PredictMode {
        if self.stage1 {
            PredictMode::Stage1
        } else if self.single_scale {
            PredictMode::Cascade
        } else {
            PredictMode::Multiscale
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    Train,
    Val,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Which phantoms the masks belong to.
    #[arg(long, value_enum, default_value = "val")]
    split: Split,
    /// Name recorded in the report.
    #[arg(long, default_value = "masks")]
    method: String,
    /// Report path; `<output-dir>/report.json` when absent.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct ShapecheckArgs {
    /// `full`, `desk`, or a path to an architecture JSON file.
    #[arg(long, default_value = "full")]
    arch: String,
    /// Square input extent; 504 for `full`, 64 otherwise.
    #[arg(long)]
    size: Option<usize>,
}

#[derive(Args)]
struct OverlayArgs {
    /// Image volume.
    #[arg(long)]
    image: PathBuf,
    /// Label volume drawn over the image.
    #[arg(long)]
    mask: PathBuf,
    /// Slices to render; every slice with foreground when absent.
    #[arg(long, num_args = 1..)]
    slice: Vec<usize>,
    /// Nearest-neighbour magnification.
    #[arg(long, default_value_t = 4)]
    zoom: u32,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn load_config(g: &Global) -> Result<RunConfig> {
    let mut cfg = match &g.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = g.seed {
        cfg = cfg.with_seed(seed);
    }
    if let Some(epochs) = g.epochs {
        cfg = cfg.with_epochs(epochs);
    }
    if let Some(w) = g.width_multiplier {
        cfg.width_multiplier = Some(w);
    }
    if let Some(d) = &g.data_dir {
        cfg.paths.data_dir = d.clone();
    }
    if let Some(d) = &g.checkpoint_dir {
        cfg.paths.checkpoint_dir = d.clone();
    }
    if let Some(d) = &g.output_dir {
        cfg.paths.output_dir = d.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Gradcheck => gradcheck(),
        Command::Shapecheck(a) => shapecheck(a),
        Command::Overlay(a) => overlay_cmd(&load_config(&cli.global)?, a),
        Command::Phantom => phantom(&load_config(&cli.global)?),
        Command::Preprocess => preprocess(&load_config(&cli.global)?),
        Command::Train => train(&load_config(&cli.global)?),
        Command::Predict(a) => predict(&load_config(&cli.global)?, a),
        Command::Evaluate(a) => evaluate_cmd(&load_config(&cli.global)?, a),
    }
}

fn dataset(cfg: &RunConfig) -> Result<liverseg_core::pipeline::Dataset> {
    read_dataset(&cfg.paths.data_dir)
        .with_context(|| format!("cannot read the dataset in {} (run `liverseg phantom` first)", cfg.paths.data_dir.display()))
}

fn phantom(cfg: &RunConfig) -> Result<()> {
    let data = generate_dataset(cfg)?;
    write_dataset(&cfg.paths.data_dir, &data)?;
    println!("wrote {} training and {} validation phantoms to {}", data.train.len(), data.val.len(), cfg.paths.data_dir.display());
    Ok(())
}

#[derive(Serialize)]
struct SliceEntry {
    case: String,
    slice: usize,
    liver: bool,
    lesion: bool,
}

#[derive(Serialize)]
struct SliceSelection {
    pool: usize,
    with_lesion: usize,
    without_liver: usize,
    selected: Vec<SliceEntry>,
}

fn preprocess(cfg: &RunConfig) -> Result<()> {
    let data = dataset(cfg)?;
    let pool = all_slices(cfg, &data.train)?;
    let chosen = select_training_slices(&pool, cfg.dataset.training_slices, selection_seed(cfg))?;
    let selected: Vec<SliceEntry> = chosen
        .iter()
        .map(|&i| {
            let s = &pool[i];
            SliceEntry { case: data.train[s.source.0].id.clone(), slice: s.source.1, liver: s.has_liver(), lesion: s.has_lesion() }
        })
        .collect();
    let summary = SliceSelection {
        pool: pool.len(),
        with_lesion: selected.iter().filter(|e| e.lesion).count(),
        without_liver: selected.iter().filter(|e| !e.liver).count(),
        selected,
    };
    fs::create_dir_all(&cfg.paths.output_dir)?;
    let path = cfg.paths.output_dir.join("slices.json");
    fs::write(&path, serde_json::to_string_pretty(&summary)?)?;
    println!(
        "{} of {} slices selected ({} with lesion, {} without liver); wrote {}",
        summary.selected.len(),
        summary.pool,
        summary.with_lesion,
        summary.without_liver,
        path.display()
    );
    Ok(())
}

fn train(cfg: &RunConfig) -> Result<()> {
    let data = dataset(cfg)?;
    let slices = training_slices(cfg, &data.train)?;
    let (model, history) = train_model(cfg, &slices)?;
    let thresholds = calibrate_modes(&model, &data.train, cfg)?;
    let dir = &cfg.paths.checkpoint_dir;
    save_model(&model, dir)?;
    thresholds.save(dir.join(THRESHOLDS_FILE))?;
    fs::write(dir.join(HISTORY_FILE), serde_json::to_string_pretty(&history)?)?;
    for (name, h) in [
        ("stage 1 liver", &history.stage1_liver),
        ("stage 1 lesion", &history.stage1_lesion),
        ("stage 2 liver", &history.stage2_liver),
        ("stage 2 lesion", &history.stage2_lesion),
    ] {
        if let Some(last) = h.last() {
            println!("{name}: {} epochs, final loss {:.4}", h.len(), last.mean_loss);
        }
    }
    let t = thresholds.multiscale;
    println!("multiscale thresholds liver {} lesion {}; model saved to {}", t.liver, t.lesion, dir.display());
    Ok(())
}

/// Calibrated thresholds saved by `train`, or the config's when missing.
fn thresholds(cfg: &RunConfig) -> Result<ModeThresholds> {
    let path = cfg.paths.checkpoint_dir.join(THRESHOLDS_FILE);
    if path.is_file() {
        Ok(ModeThresholds::load(&path)?)
    } else {
        Ok(ModeThresholds::uniform(cfg.thresholds))
    }
}

fn case_id(path: &Path) -> String {
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    match name.strip_suffix(IMAGE_SUFFIX).or_else(|| name.strip_suffix(".ctvol")) {
        Some(stem) => stem.to_string(),
        None => name,
    }
}

fn predict(cfg: &RunConfig, a: &PredictArgs) -> Result<()> {
    let model = load_model(&cfg.paths.checkpoint_dir)
        .with_context(|| format!("cannot load the model in {}", cfg.paths.checkpoint_dir.display()))?;
    let mode = a.mode();
    let run_cfg = RunConfig { thresholds: thresholds(cfg)?.get(mode), ..cfg.clone() };
    let volumes = if a.inputs.is_empty() {
        dataset(cfg)?.val.into_iter().map(|c| (c.id, c.volume)).collect::<Vec<_>>()
    } else {
        a.inputs
            .iter()
            .map(|p| Ok((case_id(p), read_intensity(p).with_context(|| format!("reading {}", p.display()))?)))
            .collect::<Result<Vec<_>>>()?
    };
    fs::create_dir_all(&cfg.paths.output_dir)?;
    for (id, volume) in &volumes {
        let mask = predict_volume(&model, volume, mode, &run_cfg)?;
        let path = cfg.paths.output_dir.join(format!("{id}{MASK_SUFFIX}"));
        write_volume(&path, &mask.into())?;
        println!("{}", path.display());
    }
    println!("{} {} masks written", volumes.len(), mode.name());
    Ok(())
}

fn evaluate_cmd(cfg: &RunConfig, a: &EvaluateArgs) -> Result<()> {
    let data = dataset(cfg)?;
    let cases: Vec<Case> = match a.split {
        Split::Train => data.train,
        Split::Val => data.val,
    };
    let metrics = cases
        .iter()
        .map(|c| {
            let path = cfg.paths.output_dir.join(format!("{}{MASK_SUFFIX}", c.id));
            let pred = read_labels(&path).with_context(|| format!("reading mask {}", path.display()))?;
            Ok(CaseMetrics { case: c.id.clone(), metrics: evaluate(&pred, &c.labels)? })
        })
        .collect::<Result<Vec<_>>>()?;
    let report = EvalReport::new(a.method.clone(), metrics)?;
    let path = a.report.clone().unwrap_or_else(|| cfg.paths.output_dir.join("report.json"));
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(&path, report.to_json())?;
    print!("{}", report.table());
    println!("report written to {}", path.display());
    Ok(())
}

fn gradcheck() -> Result<()> {
    let cases = gradient_suite()?;
    let mut worst: f64 = 0.0;
    let mut failed = 0;
    for c in &cases {
        let status = if c.passed() { "ok" } else { "FAILED" };
        println!("{:<32} seed {}  max rel error {:.3e}  ({} probes)  {status}", c.name, c.seed, c.max_rel_error, c.probes);
        worst = worst.max(c.max_rel_error);
        failed += usize::from(!c.passed());
    }
    println!("{} checks, max relative error {worst:.3e}", cases.len());
    if failed > 0 {
        bail!("{failed} gradient checks failed");
    }
    Ok(())
}

fn shapecheck(a: &ShapecheckArgs) -> Result<()> {
    let (spec, default_size) = match a.arch.as_str() {
        "full" => (ArchSpec::full(), 504),
        "desk" => (ArchSpec::desk(), 64),
        path => (ArchSpec::load(path)?, 64),
    };
    let size = a.size.unwrap_or(default_size);
    let table = analyze_shapes(&spec, (size, size))?;
    print!("{}", table.render());
    let column: Vec<usize> = table.rows.iter().map(|r| r.height).collect();
    println!("output column {column:?}");
    if a.arch == "full" && size == 504 && column != TABLE1_OUTPUT_COLUMN {
        bail!("output column differs from {TABLE1_OUTPUT_COLUMN:?}");
    }
    if spec.width_multiplier <= 1.0 / 8.0 {
        let sizes = [(size, size), (8, 8), (40, 24), (96, 56), (16, 120)];
        for ((h, w), ok) in forward_shapes_agree(&spec, &sizes, 0)? {
            if !ok {
                bail!("forward logits at {h}x{w} disagree with the analysis");
            }
        }
        println!("forward shapes agree at {} input sizes", sizes.len());
    }
    Ok(())
}

fn overlay_cmd(cfg: &RunConfig, a: &OverlayArgs) -> Result<()> {
    let image = read_intensity(&a.image).with_context(|| format!("reading {}", a.image.display()))?;
    let mask = read_labels(&a.mask).with_context(|| format!("reading {}", a.mask.display()))?;
    if image.dim() != mask.dim() {
        bail!("image {:?} and mask {:?} differ in shape", image.dim(), mask.dim());
    }
    let written = overlay::render_slices(&image, &mask, &a.slice, a.zoom, &cfg.window, &cfg.paths.output_dir, &case_id(&a.image))?;
    for p in &written {
        println!("{}", p.display());
    }
    println!("{} overlays written", written.len());
    Ok(())
}
