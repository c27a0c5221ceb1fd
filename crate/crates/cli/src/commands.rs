//! Subcommand bodies. Each writes only under its output directory and
//! reports to `log`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};

use milpath_core::embed::{build_embedding_table, centroid_separation, embedding_csv, fit_pca_2d};
use milpath_core::ensemble::{combine, combined_csv, load_score_set, subset_label, EnsembleMode};
use milpath_core::eval::{
    augment_cells, confusion, balanced_error, magnification_cells, parse_sweep_csv, roc_auc, run_cell, run_cells, score_records,
    scores_csv, size_cells, summarize, sweep_csv, weight_cells, CellResult, RocCurve, ScoreRecord, SweepCell,
    SweepKind, SweepRow,
};
use milpath_core::mil::{build_bags, metrics_csv, train_observed, EpochMetrics};
use milpath_core::numerics::{Checkpoint, Model};
use milpath_core::slide::{generate_dataset, load_split, Bag, DatasetSpec, Magnification, Manifest, SlideRaster, Split, TilingConfig};

use crate::config::RunConfig;
use crate::plot::{line_chart, scatter, Series};

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).with_context(|| format!("creating {}", path.display()))
}

pub struct GenDataArgs {
    pub out: PathBuf,
    pub spec: DatasetSpec,
    pub force: bool,
    pub workers: usize,
}

pub fn gen_data(args: &GenDataArgs, log: &mut impl Write) -> Result<()> {
    if args.out.exists() {
        let occupied = fs::read_dir(&args.out)
            .with_context(|| format!("reading {}", args.out.display()))?
            .next()
            .is_some();
        if occupied && !args.force {
            bail!("{} is not empty; pass --force to overwrite", args.out.display());
        }
        if args.force {
            let slides = args.out.join("slides");
            if slides.exists() {
                fs::remove_dir_all(&slides).with_context(|| format!("clearing {}", slides.display()))?;
            }
        }
    }
    create_dir(&args.out)?;
    let pool = milpath_core::mil::worker_pool(args.workers)?;
    let manifest = pool.install(|| generate_dataset(&args.out, &args.spec))?;
    let positives = manifest.records.iter().filter(|r| r.label == 1).count();
    writeln!(
        log,
        "wrote {} slides ({} positive): train {}, val {}, test {}",
        manifest.records.len(),
        positives,
        manifest.count(Split::Train),
        manifest.count(Split::Val),
        manifest.count(Split::Test)
    )?;
    Ok(())
}

fn history_svg(history: &[EpochMetrics]) -> String {
    let pts = |f: fn(&EpochMetrics) -> f64| history.iter().map(|m| (m.epoch as f64, f(m))).collect();
    line_chart(
        "Training history",
        "epoch",
        "value",
        &[
            Series { name: "train loss", points: pts(|m| m.train_loss) },
            Series { name: "val balanced error", points: pts(|m| m.val_balanced_error) },
            Series { name: "val FNR", points: pts(|m| m.val_fnr) },
            Series { name: "val FPR", points: pts(|m| m.val_fpr) },
        ],
        false,
    )
}

fn load_bags_for(manifest: &Manifest, split: Split, tiling: &TilingConfig, workers: usize) -> Result<Vec<Bag>> {
    let slides = load_split(manifest, split)?;
    Ok(build_bags(&slides, tiling, workers)?)
}

pub fn train(cfg: &RunConfig, log: &mut impl Write) -> Result<()> {
    cfg.check_paths()?;
    let manifest = Manifest::load(&cfg.manifest)?;
    for split in [Split::Train, Split::Val] {
        if manifest.count(split) == 0 {
            return Err(milpath_core::Error::Config(format!("manifest has no {split} slides")).into());
        }
    }
    create_dir(&cfg.out)?;
    let tiling = cfg.train.tiling();
    let train_bags = load_bags_for(&manifest, Split::Train, &tiling, cfg.train.workers)?;
    let val_bags = load_bags_for(&manifest, Split::Val, &tiling, cfg.train.workers)?;
    let mut lines = Vec::new();
    let outcome = train_observed(&cfg.train, &train_bags, &val_bags, |m| {
        lines.push(format!(
            "epoch {:>3}  loss {:.4}  val balanced error {:.4}  fnr {:.4}  fpr {:.4}",
            m.epoch, m.train_loss, m.val_balanced_error, m.val_fnr, m.val_fpr
        ));
    })?;
    for l in &lines {
        writeln!(log, "{l}")?;
    }
    outcome.checkpoint.save(&cfg.out.join("checkpoint.milc"))?;
    write_file(&cfg.out.join("metrics.csv"), metrics_csv(&outcome.history))?;
    write_file(&cfg.out.join("metrics.svg"), history_svg(&outcome.history))?;
    match outcome.best() {
        Some(b) => writeln!(log, "best epoch {} with val balanced error {:.4}", outcome.best_epoch, b.val_balanced_error)?,
        None => writeln!(log, "no epochs run; saved the initial model")?,
    }
    Ok(())
}

/// Tiling used when the checkpoint was trained; falls back to 20x at the
/// model's input side.
fn checkpoint_tiling(ck: &Checkpoint) -> Result<TilingConfig> {
    let mag = match ck.meta("magnification") {
        Some(m) => m.parse()?,
        None => Magnification::X20,
    };
    Ok(TilingConfig::new(mag, ck.model.config().input_side))
}

fn roc_svg(title: &str, curve: &RocCurve) -> String {
    let pts = curve.points.iter().map(|p| (p.fpr, p.tpr)).collect();
    line_chart(
        &format!("{title} (AUC {:.3})", curve.auc),
        "false positive rate",
        "true positive rate",
        &[Series { name: "ROC", points: pts }, Series { name: "chance", points: vec![(0.0, 0.0), (1.0, 1.0)] }],
        true,
    )
}

pub struct EvalArgs {
    pub checkpoint: PathBuf,
    pub manifest: PathBuf,
    pub split: Split,
    pub out: PathBuf,
    pub threshold: Option<f64>,
    pub workers: usize,
}

pub fn eval(args: &EvalArgs, log: &mut impl Write) -> Result<()> {
    let ck = Checkpoint::load(&args.checkpoint)?;
    let manifest = Manifest::load(&args.manifest)?;
    if manifest.count(args.split) == 0 {
        bail!("manifest has no {} slides", args.split);
    }
    let threshold = match (args.threshold, ck.meta("threshold")) {
        (Some(t), _) => t,
        (None, Some(t)) => t.parse().context("checkpoint threshold")?,
        (None, None) => 0.5,
    };
    let tiling = checkpoint_tiling(&ck)?;
    let bags = load_bags_for(&manifest, args.split, &tiling, args.workers)?;
    let records = score_records(&ck.model, &bags, tiling.magnification, args.workers)?;
    create_dir(&args.out)?;
    let split = args.split;
    write_file(&args.out.join(format!("{split}_scores.csv")), scores_csv(&records))?;
    report_scores(&records, threshold, &args.out, &format!("{split}"), log)
}

fn report_scores(records: &[ScoreRecord], threshold: f64, out: &Path, stem: &str, log: &mut impl Write) -> Result<()> {
    let scores: Vec<f64> = records.iter().map(|r| r.score).collect();
    let labels: Vec<u8> = records.iter().map(|r| r.label).collect();
    let cm = confusion(&scores, &labels, threshold)?;
    let curve = roc_auc(&scores, &labels)?;
    let be = balanced_error(&cm)?;
    let rows = [
        ("auc", curve.auc),
        ("balanced_error", be),
        ("fnr", cm.fnr()?),
        ("fpr", cm.fpr()?),
        ("accuracy", cm.accuracy()),
        ("threshold", threshold),
        ("tp", cm.tp as f64),
        ("fp", cm.fp as f64),
        ("tn", cm.tn as f64),
        ("fn", cm.fn_ as f64),
    ];
    let mut metrics = String::from("metric,value\n");
    for (k, v) in rows {
        metrics.push_str(&format!("{k},{v}\n"));
    }
    write_file(&out.join(format!("{stem}_metrics.csv")), metrics)?;
    write_file(&out.join(format!("{stem}_roc.csv")), curve.to_csv())?;
    write_file(&out.join(format!("{stem}_roc.svg")), roc_svg(stem, &curve))?;
    writeln!(
        log,
        "AUC {:.3}  balanced error {:.3}  FNR {:.3}  FPR {:.3}  (tp {} fp {} tn {} fn {})",
        curve.auc,
        be,
        cm.fnr()?,
        cm.fpr()?,
        cm.tp,
        cm.fp,
        cm.tn,
        cm.fn_
    )?;
    Ok(())
}

pub struct SweepArgs {
    pub kind: SweepKind,
    pub config: RunConfig,
}

fn sweep_svg(kind: SweepKind, rows: &[SweepRow]) -> String {
    let summary = summarize(rows);
    let numeric: Option<Vec<f64>> = summary.iter().map(|(p, _)| p.parse().ok()).collect();
    let points = summary
        .iter()
        .enumerate()
        .map(|(i, (_, v))| (numeric.as_ref().map_or(i as f64, |n| n[i]), *v))
        .collect();
    let x_label = match &numeric {
        Some(_) => kind.to_string(),
        None => format!("{kind} ({})", summary.iter().map(|s| s.0.as_str()).collect::<Vec<_>>().join(", ")),
    };
    line_chart(
        &format!("{kind} sweep"),
        &x_label,
        "median best val balanced error",
        &[Series { name: "median", points }],
        false,
    )
}

struct SplitSlides {
    train: Vec<SlideRaster>,
    val: Vec<SlideRaster>,
    test: Vec<SlideRaster>,
}

pub fn sweep(args: &SweepArgs, log: &mut impl Write) -> Result<()> {
    let cfg = &args.config;
    cfg.check_paths()?;
    let manifest = Manifest::load(&cfg.manifest)?;
    create_dir(&cfg.out)?;
    let csv_path = cfg.out.join(format!("sweep_{}.csv", args.kind));
    let prior = if csv_path.exists() {
        let text = fs::read_to_string(&csv_path).with_context(|| format!("reading {}", csv_path.display()))?;
        parse_sweep_csv(&text, &csv_path)?
    } else {
        Vec::new()
    };
    let slides = SplitSlides {
        train: load_split(&manifest, Split::Train)?,
        val: load_split(&manifest, Split::Val)?,
        test: load_split(&manifest, cfg.eval_split)?,
    };
    let workers = cfg.train.workers;
    let base = &cfg.train;
    let cells: Vec<SweepCell> = match args.kind {
        SweepKind::Weight => weight_cells(base, &cfg.sweep_weights, cfg.sweep_repeats)?,
        SweepKind::Augment => augment_cells(base, cfg.sweep_repeats)?,
        SweepKind::Magnification => magnification_cells(base, &cfg.sweep_magnifications, cfg.sweep_repeats)?,
        SweepKind::Size => {
            let labels: Vec<u8> = slides.train.iter().map(|s| s.label()).collect();
            size_cells(base, &cfg.sweep_sizes, cfg.sweep_repeats, &labels)?
        }
    };
    let mut cache: Option<(Magnification, Vec<Bag>, Vec<Bag>)> = None;
    let mut done: Vec<SweepRow> = Vec::new();
    let mut failure: Option<anyhow::Error> = None;
    let mut messages = Vec::new();
    run_cells(
        &cells,
        &prior,
        |cell| {
            let tiling = cell.config.tiling();
            // Bags for one magnification at a time keeps memory flat.
            if cache.as_ref().map(|c| c.0) != Some(tiling.magnification) {
                cache = None;
                let t = build_bags(&slides.train, &tiling, workers)?;
                let v = build_bags(&slides.val, &tiling, workers)?;
                cache = Some((tiling.magnification, t, v));
            }
            let (_, t, v) = cache.as_ref().expect("filled above");
            run_cell(cell, t, v)
        },
        |cell, result, row| {
            match result {
                CellResult::Failed(e) => messages.push(format!("{} repeat {} failed: {e}", cell.param, cell.repeat)),
                _ => messages.push(format!(
                    "{} repeat {} seed {}: best val balanced error {} at epoch {}{}",
                    cell.param,
                    cell.repeat,
                    cell.config.seed,
                    row.best_val_balanced_error,
                    row.best_epoch,
                    if matches!(result, CellResult::Reused) { " (reused)" } else { "" }
                )),
            }
            if args.kind == SweepKind::Magnification && failure.is_none() {
                if let Err(e) = export_magnification_scores(cfg, cell, result, &slides) {
                    failure = Some(e);
                }
            }
            done.push(row.clone());
            // Persist after every cell so an interrupted sweep resumes here.
            let mut all = done.clone();
            all.extend(prior.iter().filter(|p| !done.iter().any(|d| same_cell(d, p))).cloned());
            if let Err(e) = fs::write(&csv_path, sweep_csv(&all)) {
                failure.get_or_insert(anyhow::Error::from(e).context(format!("writing {}", csv_path.display())));
            }
        },
    );
    for m in &messages {
        writeln!(log, "{m}")?;
    }
    if let Some(e) = failure {
        return Err(e);
    }
    write_file(&csv_path, sweep_csv(&done))?;
    write_file(&cfg.out.join(format!("sweep_{}.svg", args.kind)), sweep_svg(args.kind, &done))?;
    for (param, med) in summarize(&done) {
        writeln!(log, "{param}: median best val balanced error {med}")?;
    }
    Ok(())
}

fn same_cell(a: &SweepRow, b: &SweepRow) -> bool {
    a.sweep_param == b.sweep_param && a.repeat == b.repeat && a.seed == b.seed
}

/// Saves each magnification model and its val/eval-split scores, so the
/// ensemble step can run from files alone.
fn export_magnification_scores(cfg: &RunConfig, cell: &SweepCell, result: &CellResult, slides: &SplitSlides) -> Result<()> {
    let mag = cell.config.magnification;
    let stem = format!("{mag}_r{}", cell.repeat);
    let ck_path = cfg.out.join(format!("model_{stem}.milc"));
    let checkpoint = match result {
        CellResult::Trained(out) => {
            out.checkpoint.save(&ck_path)?;
            out.checkpoint.clone()
        }
        CellResult::Reused if ck_path.exists() => Checkpoint::load(&ck_path)?,
        _ => return Ok(()),
    };
    let tiling = cell.config.tiling();
    for (split, set) in [(Split::Val, &slides.val), (cfg.eval_split, &slides.test)] {
        let bags = build_bags(set, &tiling, cell.config.workers)?;
        let records = score_records(&checkpoint.model, &bags, mag, cell.config.workers)?;
        write_file(&cfg.out.join(format!("scores_{split}_{stem}.csv")), scores_csv(&records))?;
    }
    Ok(())
}

pub struct EnsembleArgs {
    pub scores: Vec<PathBuf>,
    pub mode: EnsembleMode,
    pub magnifications: Option<Vec<Magnification>>,
    pub out: PathBuf,
    pub threshold: f64,
}

pub fn ensemble(args: &EnsembleArgs, log: &mut impl Write) -> Result<()> {
    if args.scores.is_empty() {
        bail!("no score files given");
    }
    let paths: Vec<&Path> = args.scores.iter().map(PathBuf::as_path).collect();
    let set = load_score_set(&paths)?;
    let subset = args.magnifications.clone().unwrap_or_else(|| set.magnifications());
    let combined = combine(&set, args.mode, &subset)?;
    create_dir(&args.out)?;
    let stem = format!("ensemble_{}", args.mode);
    write_file(&args.out.join(format!("{stem}.csv")), combined_csv(&combined, args.mode, &subset))?;
    writeln!(log, "combined {} slides over {} with {}", combined.len(), subset_label(&subset), args.mode)?;
    let records: Vec<ScoreRecord> = combined
        .iter()
        .map(|c| ScoreRecord { slide_id: c.slide_id.clone(), label: c.label, score: c.score, magnification: subset[0] })
        .collect();
    report_scores(&records, args.threshold, &args.out, &stem, log)
}

pub struct EmbedArgs {
    pub checkpoint: PathBuf,
    pub manifest: PathBuf,
    pub split: Split,
    pub out: PathBuf,
    pub per_slide: usize,
    pub seed: u64,
    pub workers: usize,
}

pub fn embed(args: &EmbedArgs, log: &mut impl Write) -> Result<()> {
    let ck = Checkpoint::load(&args.checkpoint)?;
    let manifest = Manifest::load(&args.manifest)?;
    let tiling = checkpoint_tiling(&ck)?;
    let bags = load_bags_for(&manifest, args.split, &tiling, args.workers)?;
    let model: &Model = &ck.model;
    let table = build_embedding_table(model, &bags, args.per_slide, args.seed, args.workers)?;
    let features = table.features_f64();
    let pca = fit_pca_2d(&features)?;
    let points = pca.project(&features)?;
    create_dir(&args.out)?;
    write_file(&args.out.join("embedding.csv"), embedding_csv(&table, &points)?)?;
    let group = |top: bool, label: u8| -> Vec<(f64, f64)> {
        table
            .rows
            .iter()
            .zip(&points)
            .filter(|(r, _)| r.is_top == top && r.label == label)
            .map(|(_, p)| (p[0], p[1]))
            .collect()
    };
    let svg = scatter(
        "Tile embedding",
        "PC 1",
        "PC 2",
        &[
            Series { name: "tile, negative", points: group(false, 0) },
            Series { name: "tile, positive", points: group(false, 1) },
            Series { name: "top, negative", points: group(true, 0) },
            Series { name: "top, positive", points: group(true, 1) },
        ],
    );
    write_file(&args.out.join("embedding.svg"), svg)?;
    writeln!(
        log,
        "{} rows, explained variance {:.4} / {:.4}",
        table.rows.len(),
        pca.variances[0],
        pca.variances[1]
    )?;
    let as_arr = |v: Vec<(f64, f64)>| v.into_iter().map(|(x, y)| [x, y]).collect::<Vec<_>>();
    if let Ok(sep) = centroid_separation(&as_arr(group(true, 1)), &as_arr(group(true, 0))) {
        writeln!(log, "top-tile centroid separation {sep:.3} pooled SD")?;
    }
    Ok(())
}

/// Builds the training config from a run config with CLI overrides.
pub fn with_overrides(mut cfg: RunConfig, workers: Option<usize>, seed: Option<u64>) -> RunConfig {
    if let Some(w) = workers {
        cfg.train.workers = w;
    }
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    cfg
}
