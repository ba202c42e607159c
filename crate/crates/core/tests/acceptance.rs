//! Acceptance run: one PASS/FAIL line per criterion, nonzero exit if any
//! fails. The end-to-end section trains the full desk configuration twice
//! (the second run checks determinism), so expect several minutes.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use liverseg_core::arch::ArchSpec;
use liverseg_core::cascade::{CascadeModel, SlicePrediction};
use liverseg_core::config::RunConfig;
use liverseg_core::metrics::{dice, jaccard};
use liverseg_core::multiscale::{multiscale_predict, ScaleSet, SlicePredictor, StagePredictor};
use liverseg_core::network::{Class, ProbabilityMap};
use liverseg_core::phantom::stream_rng;
use liverseg_core::pipeline::{all_slices, generate_dataset, run_pipeline, PipelineRun, PredictMode};
use liverseg_core::postprocess::{fill_holes_slice, BinaryMask2D};
use liverseg_core::preprocess::{select_training_slices, SliceContent, SliceMeta, WindowSpec};
use liverseg_core::verify::{
    forward_shapes_agree, gradient_suite, overfit_single_batch, table1_shapes, zeroed_branch_identity,
    TABLE1_OUTPUT_COLUMN,
};
use liverseg_core::Result;
use ndarray::Array2;
use rand::Rng;

mod common;
use common::{border_reachable, random_mask};

const LIVER_DICE_MIN: f64 = 0.90;
const LESION_DICE_MIN: f64 = 0.60;
const MODE_SLACK: f64 = 0.02;
const E2E_BUDGET: Duration = Duration::from_secs(15 * 60);
const GRAD_BUDGET: Duration = Duration::from_secs(120);

struct Ledger {
    failed: usize,
}

impl Ledger {
    fn record(&mut self, name: &str, outcome: Result<(bool, String)>) {
        let (pass, detail) = outcome.unwrap_or_else(|e| (false, format!("error: {e}")));
        println!("{} {name}: {detail}", if pass { "PASS" } else { "FAIL" });
        self.failed += usize::from(!pass);
    }
}

fn gradient_criterion() -> Result<(bool, String)> {
    let start = Instant::now();
    let cases = gradient_suite()?;
    let elapsed = start.elapsed();
    let worst = cases.iter().map(|c| c.max_rel_error).fold(0.0, f64::max);
    let failed: Vec<String> = cases.iter().filter(|c| !c.passed()).map(|c| format!("{}#{}", c.name, c.seed)).collect();
    let pass = failed.is_empty() && elapsed < GRAD_BUDGET;
    Ok((pass, format!("{} checks over 3 seeds, max rel error {worst:.2e}, {elapsed:.1?}, failing {failed:?}", cases.len())))
}

fn table1_criterion() -> Result<(bool, String)> {
    let table = table1_shapes()?;
    let column: Vec<usize> = table.rows.iter().map(|r| r.height).collect();
    let classes = table.rows.last().map(|r| r.channels).unwrap_or(0);
    let sizes = [(64, 64), (8, 8), (40, 24), (96, 56), (16, 120)];
    let agree = forward_shapes_agree(&ArchSpec::desk(), &sizes, 0)?;
    let mismatched: Vec<_> = agree.iter().filter(|(_, ok)| !ok).map(|(s, _)| *s).collect();
    let pass = column == TABLE1_OUTPUT_COLUMN && classes == 2 && mismatched.is_empty();
    Ok((pass, format!("column {column:?}, classifier {classes} channels, desk forward mismatches {mismatched:?}")))
}

fn identity_criterion() -> Result<(bool, String)> {
    let mut checked = 0;
    for seed in 0..3 {
        checked += zeroed_branch_identity(&ArchSpec::desk(), 32, seed)?;
    }
    Ok((checked > 0, format!("{checked} identity-shortcut blocks bit-identical over 3 seeds")))
}

fn preprocess_criterion() -> Result<(bool, String)> {
    let w = WindowSpec::default();
    let anchors = [(-160.0, 0.0), (240.0, 1.0), (40.0, 0.5)];
    let window_ok = anchors.iter().all(|&(hu, v)| w.apply(hu) == v);

    // Desk phantoms for the small counts, a flag-only pool for 8802.
    let cfg = RunConfig::default();
    let data = generate_dataset(&cfg)?;
    let pool: Vec<SliceMeta> = all_slices(&cfg, &data.train)?.iter().map(SliceMeta::from).collect();
    let mut big = vec![SliceMeta { has_liver: true, has_lesion: true }; 6000];
    big.extend(vec![SliceMeta { has_liver: false, has_lesion: false }; 6000]);
    big.extend(vec![SliceMeta { has_liver: true, has_lesion: false }; 3000]);
    let mut counts = Vec::new();
    let mut counts_ok = true;
    for (n, p) in [(2, &pool), (10, &pool), (cfg.dataset.training_slices, &pool), (8802, &big)] {
        let chosen = select_training_slices(p, n, 17)?;
        let lesion = chosen.iter().filter(|&&i| p[i].has_lesion()).count();
        let empty = chosen.iter().filter(|&&i| !p[i].has_liver()).count();
        counts_ok &= lesion == n / 2 && empty == n / 2 && chosen.len() == n;
        counts.push(format!("{n}={lesion}+{empty}"));
    }
    Ok((window_ok && counts_ok, format!("window anchors exact: {window_ok}; counts {}", counts.join(", "))))
}

/// Returns a constant map whose value depends on the input extent.
struct ConstantStub;

impl SlicePredictor for ConstantStub {
    fn predict_slices(&self, images: &[Array2<f64>]) -> Result<Vec<SlicePrediction>> {
        images
            .iter()
            .map(|i| {
                let v = i.dim().0 as f64 / 200.0;
                Ok(SlicePrediction {
                    liver: ProbabilityMap::new(Array2::from_elem(i.dim(), v), Class::Liver)?,
                    lesion: ProbabilityMap::new(Array2::from_elem(i.dim(), 1.0 - v), Class::Lesion)?,
                })
            })
            .collect()
    }
}

fn fusion_criterion() -> Result<(bool, String)> {
    let full_ok = ScaleSet::full().scales == [512, 544, 576, 608, 640];
    let model = CascadeModel::build(&ArchSpec::desk(), 9)?;
    let mut rng = stream_rng(9, 1);
    let images: Vec<Array2<f64>> = (0..3).map(|_| Array2::from_shape_fn((64, 64), |_| rng.random_range(0.0..1.0))).collect();
    let direct = model.predict_cascade(&images)?;
    let single = multiscale_predict(&StagePredictor { model: &model, stage: liverseg_core::cascade::Stage::Two }, &images, &ScaleSet::single(64))?;
    let single_ok = single == direct;

    let desk = ScaleSet::desk();
    let mean = desk.scales.iter().map(|&s| s as f64 / 200.0).sum::<f64>() / desk.scales.len() as f64;
    let fused = multiscale_predict(&ConstantStub, &images[..1], &desk)?;
    let err = fused[0]
        .liver
        .values
        .iter()
        .map(|v| (v - mean).abs())
        .chain(fused[0].lesion.values.iter().map(|v| (v - (1.0 - mean)).abs()))
        .fold(0.0, f64::max);
    let pass = full_ok && single_ok && err <= 1e-12;
    Ok((pass, format!("full set exact: {full_ok}; single-scale identical: {single_ok}; stub mean error {err:.1e}")))
}

fn postprocess_criterion() -> Result<(bool, String)> {
    let mut rng = stream_rng(2024, 0);
    let (mut idem, mut mono, mut cavity) = (0, 0, 0);
    for _ in 0..1000 {
        let m = BinaryMask2D(random_mask(&mut rng));
        let filled = fill_holes_slice(&m);
        idem += usize::from(fill_holes_slice(&filled) != filled);
        mono += usize::from(m.0.iter().zip(&filled.0).any(|(&a, &b)| a && !b));
        cavity += usize::from(filled.0 != border_reachable(&m.0).mapv(|r| !r));
    }
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let a = random_mask(&mut rng);
        let b = Array2::from_shape_fn(a.dim(), |_| rng.random_bool(0.5));
        let (d, j) = (dice(&a, &b)?, jaccard(&a, &b)?);
        worst = worst.max((d - 2.0 * j / (1.0 + j)).abs());
    }
    let pass = idem + mono + cavity == 0 && worst <= 1e-12;
    Ok((pass, format!("1000 masks: {idem} idempotence, {mono} monotonicity, {cavity} border-cavity violations; dice/jaccard identity error {worst:.1e}")))
}

fn dice_line(run: &PipelineRun, mode: PredictMode) -> String {
    let m = run.report(mode).mean;
    let t = run.thresholds.get(mode);
    format!("{} liver {:.4} lesion {:.4} (thresholds {}/{})", mode.name(), m.liver_dice, m.lesion_dice, t.liver, t.lesion)
}

/// Every file under `dir`, keyed by relative path.
fn snapshot(dir: &Path) -> Result<BTreeMap<String, Vec<u8>>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d)? {
            let p = entry?.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).expect("under root").to_string_lossy().into_owned();
                out.insert(rel, std::fs::read(&p)?);
            }
        }
    }
    Ok(out)
}

fn main() -> ExitCode {
    let mut ledger = Ledger { failed: 0 };
    ledger.record("gradient suite", gradient_criterion());
    ledger.record("architecture table conformance", table1_criterion());
    ledger.record("zeroed residual branch identity", identity_criterion());
    ledger.record("preprocessing", preprocess_criterion());
    ledger.record("multiscale fusion", fusion_criterion());
    ledger.record("post-processing and metrics", postprocess_criterion());

    let start = Instant::now();
    ledger.record(
        "e2e single-batch overfit",
        overfit_single_batch(0, 500, 0.05).map(|r| {
            (r.reached(0.05), format!("loss {:.4} -> {:.4} after {} steps", r.initial_loss, r.final_loss, r.steps))
        }),
    );
    let cfg = RunConfig::default();
    let dirs = [tempfile::tempdir().expect("temp dir"), tempfile::tempdir().expect("temp dir")];
    match run_pipeline(&cfg, dirs[0].path()) {
        Err(e) => {
            for name in ["e2e liver dice", "e2e lesion dice", "e2e cascade vs stage 1", "e2e multiscale vs single scale", "e2e runtime", "determinism"] {
                ledger.record(name, Ok((false, format!("pipeline failed: {e}"))));
            }
        }
        Ok(run) => {
            let elapsed = start.elapsed();
            let final_mode = run.report(PredictMode::Multiscale).mean;
            let (s1, cas) = (run.report(PredictMode::Stage1).mean, run.report(PredictMode::Cascade).mean);
            ledger.record(
                "e2e liver dice",
                Ok((final_mode.liver_dice >= LIVER_DICE_MIN, format!("{} >= {LIVER_DICE_MIN}", dice_line(&run, PredictMode::Multiscale)))),
            );
            ledger.record(
                "e2e lesion dice",
                Ok((final_mode.lesion_dice >= LESION_DICE_MIN, format!("multiscale lesion {:.4} >= {LESION_DICE_MIN}", final_mode.lesion_dice))),
            );
            ledger.record(
                "e2e cascade vs stage 1",
                Ok((cas.lesion_dice >= s1.lesion_dice - MODE_SLACK, format!("{}; {}", dice_line(&run, PredictMode::Cascade), dice_line(&run, PredictMode::Stage1)))),
            );
            ledger.record(
                "e2e multiscale vs single scale",
                Ok((
                    final_mode.lesion_dice >= cas.lesion_dice - MODE_SLACK,
                    format!("multiscale lesion {:.4} vs single-scale cascade {:.4}", final_mode.lesion_dice, cas.lesion_dice),
                )),
            );
            ledger.record(
                "e2e runtime",
                Ok((elapsed < E2E_BUDGET, format!("{elapsed:.1?} for overfit + 20/5-phantom train, calibrate, predict, evaluate on {} cores", cores()))),
            );
            let second = run_pipeline(&cfg, dirs[1].path()).and_then(|_| Ok((snapshot(dirs[0].path())?, snapshot(dirs[1].path())?)));
            ledger.record(
                "determinism",
                second.map(|(a, b)| {
                    let differing: Vec<&String> = a.keys().filter(|k| b.get(*k) != a.get(*k)).collect();
                    let pass = !a.is_empty() && a.len() == b.len() && differing.is_empty();
                    (pass, format!("{} files (checkpoints, thresholds, history, masks, reports), differing {differing:?}", a.len()))
                }),
            );
        }
    }

    if ledger.failed == 0 {
        println!("all acceptance criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("{} acceptance criteria failed", ledger.failed);
        ExitCode::FAILURE
    }
}

fn cores() -> usize {
    std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
}
