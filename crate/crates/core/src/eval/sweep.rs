//! Repeated training runs over one varied setting.
//!
//! Repeat `r` of every setting trains with seed `base.seed + r`, so settings
//! are compared on matched initialisations and shuffles.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;

use super::scores::ScoreRecord;
use crate::error::{Error, Result};
use crate::mil::{inference_pass, train, TrainConfig, TrainOutcome};
use crate::seeding::{proportional_interleave, rng_for};
use crate::slide::{Bag, Magnification};
use crate::tabular::{csv_rows, parse_field, write_csv};

pub const SWEEP_HEADER: [&str; 5] = ["sweep_param", "repeat", "seed", "best_val_balanced_error", "best_epoch"];

/// Stream for drawing nested training subsets.
const SUBSET_STREAM: u64 = 23;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepKind {
    Weight,
    Size,
    Magnification,
    Augment,
}

impl fmt::Display for SweepKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SweepKind::Weight => "weight",
            SweepKind::Size => "size",
            SweepKind::Magnification => "magnification",
            SweepKind::Augment => "augment",
        })
    }
}

impl FromStr for SweepKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "weight" => Ok(SweepKind::Weight),
            "size" => Ok(SweepKind::Size),
            "magnification" => Ok(SweepKind::Magnification),
            "augment" => Ok(SweepKind::Augment),
            _ => Err(Error::Argument(format!("unknown sweep kind {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub sweep_param: String,
    pub repeat: usize,
    pub seed: u64,
    /// NaN when the run failed or ran no epochs.
    pub best_val_balanced_error: f64,
    pub best_epoch: usize,
}

impl SweepRow {
    pub fn failed(&self) -> bool {
        self.best_val_balanced_error.is_nan()
    }
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    write_csv(
        &SWEEP_HEADER,
        rows.iter().map(|r| {
            vec![
                r.sweep_param.clone(),
                r.repeat.to_string(),
                r.seed.to_string(),
                r.best_val_balanced_error.to_string(),
                r.best_epoch.to_string(),
            ]
        }),
    )
}

pub fn parse_sweep_csv(text: &str, path: &Path) -> Result<Vec<SweepRow>> {
    csv_rows(text, path, &SWEEP_HEADER)?
        .into_iter()
        .map(|(line, row)| {
            Ok(SweepRow {
                sweep_param: row[0].to_string(),
                repeat: parse_field(path, line, "repeat", &row[1])?,
                seed: parse_field(path, line, "seed", &row[2])?,
                best_val_balanced_error: parse_field(path, line, "balanced error", &row[3])?,
                best_epoch: parse_field(path, line, "epoch", &row[4])?,
            })
        })
        .collect()
}

pub fn repeat_seed(base: u64, repeat: usize) -> u64 {
    base.wrapping_add(repeat as u64)
}

/// One training run of a sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepCell {
    pub param: String,
    pub repeat: usize,
    pub config: TrainConfig,
    /// Indices into the training bags; `None` trains on all of them.
    pub subset: Option<Vec<usize>>,
}

fn cells_over<T: fmt::Display>(
    base: &TrainConfig,
    values: &[T],
    repeats: usize,
    apply: impl Fn(&mut TrainConfig, &T),
) -> Result<Vec<SweepCell>> {
    if values.is_empty() {
        return Err(Error::Argument("sweep needs at least one value".into()));
    }
    if repeats == 0 {
        return Err(Error::Argument("sweep needs at least one repeat".into()));
    }
    let mut cells = Vec::with_capacity(values.len() * repeats);
    for v in values {
        for repeat in 0..repeats {
            let mut config = base.clone();
            config.seed = repeat_seed(base.seed, repeat);
            apply(&mut config, v);
            config.validate()?;
            cells.push(SweepCell { param: v.to_string(), repeat, config, subset: None });
        }
    }
    Ok(cells)
}

pub fn weight_cells(base: &TrainConfig, w1_values: &[f32], repeats: usize) -> Result<Vec<SweepCell>> {
    cells_over(base, w1_values, repeats, |c, &w| c.w1 = w)
}

pub fn augment_cells(base: &TrainConfig, repeats: usize) -> Result<Vec<SweepCell>> {
    cells_over(base, &[false, true], repeats, |c, &a| c.augment = a)
}

pub fn magnification_cells(base: &TrainConfig, magnifications: &[Magnification], repeats: usize) -> Result<Vec<SweepCell>> {
    cells_over(base, magnifications, repeats, |c, &m| c.magnification = m)
}

/// Prefixes of one seeded, class-stratified ordering of the training set, so
/// each subset contains every smaller one.
pub fn nested_subsets(labels: &[u8], sizes: &[usize], seed: u64) -> Result<Vec<Vec<usize>>> {
    if sizes.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Argument(format!("sizes {sizes:?} must be strictly ascending")));
    }
    if let Some(&s) = sizes.iter().find(|&&s| s == 0 || s > labels.len()) {
        return Err(Error::Argument(format!(
            "subset size {s} outside 1..={} training slides",
            labels.len()
        )));
    }
    let mut rng = rng_for(seed, SUBSET_STREAM);
    let mut pos: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == 1).collect();
    let mut neg: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] != 1).collect();
    pos.shuffle(&mut rng);
    neg.shuffle(&mut rng);
    let order = proportional_interleave(pos, neg);
    Ok(sizes
        .iter()
        .map(|&s| {
            let mut subset = order[..s].to_vec();
            subset.sort_unstable();
            subset
        })
        .collect())
}

pub fn size_cells(base: &TrainConfig, sizes: &[usize], repeats: usize, train_labels: &[u8]) -> Result<Vec<SweepCell>> {
    let mut cells = cells_over(base, sizes, repeats, |_, _| {})?;
    for repeat in 0..repeats {
        let subsets = nested_subsets(train_labels, sizes, repeat_seed(base.seed, repeat))?;
        for (cell, subset) in cells.iter_mut().filter(|c| c.repeat == repeat).zip(subsets) {
            cell.subset = Some(subset);
        }
    }
    Ok(cells)
}

/// What happened to one cell.
#[derive(Debug)]
pub enum CellResult {
    Trained(Box<TrainOutcome>),
    /// Taken from an earlier run of the same sweep.
    Reused,
    Failed(Error),
}

fn row_for(cell: &SweepCell, result: &CellResult, prior: Option<&SweepRow>) -> SweepRow {
    let (best, epoch) = match result {
        CellResult::Trained(out) => out.best().map_or((f64::NAN, 0), |m| (m.val_balanced_error, out.best_epoch)),
        CellResult::Reused => {
            let p = prior.expect("reused cells have a prior row");
            (p.best_val_balanced_error, p.best_epoch)
        }
        CellResult::Failed(_) => (f64::NAN, 0),
    };
    SweepRow {
        sweep_param: cell.param.clone(),
        repeat: cell.repeat,
        seed: cell.config.seed,
        best_val_balanced_error: best,
        best_epoch: epoch,
    }
}

/// Trains one cell on its slice of the training bags.
pub fn run_cell(cell: &SweepCell, train_bags: &[Bag], val_bags: &[Bag]) -> Result<TrainOutcome> {
    match &cell.subset {
        None => train(&cell.config, train_bags, val_bags),
        Some(idx) => {
            let subset: Vec<Bag> = idx
                .iter()
                .map(|&i| {
                    train_bags
                        .get(i)
                        .cloned()
                        .ok_or_else(|| Error::Argument(format!("subset index {i} beyond training set")))
                })
                .collect::<Result<_>>()?;
            train(&cell.config, &subset, val_bags)
        }
    }
}

/// Runs every cell in order through `train_cell` (usually a wrapper around
/// [`run_cell`] that supplies the bags). A cell already present in `prior` with a
/// finite result is not retrained. Failures are recorded as NaN rows and
/// the sweep moves on.
pub fn run_cells(
    cells: &[SweepCell],
    prior: &[SweepRow],
    mut train_cell: impl FnMut(&SweepCell) -> Result<TrainOutcome>,
    mut on_cell: impl FnMut(&SweepCell, &CellResult, &SweepRow),
) -> Vec<SweepRow> {
    cells
        .iter()
        .map(|cell| {
            let earlier = prior
                .iter()
                .find(|r| r.sweep_param == cell.param && r.repeat == cell.repeat && r.seed == cell.config.seed && !r.failed());
            let result = match earlier {
                Some(_) => CellResult::Reused,
                None => match train_cell(cell) {
                    Ok(out) => CellResult::Trained(Box::new(out)),
                    Err(e) => CellResult::Failed(e),
                },
            };
            let row = row_for(cell, &result, earlier);
            on_cell(cell, &result, &row);
            row
        })
        .collect()
}

/// Slide scores of `model` on `bags`, tagged with the magnification they were cut at.
pub fn score_records(
    model: &crate::numerics::Model,
    bags: &[Bag],
    magnification: Magnification,
    workers: usize,
) -> Result<Vec<ScoreRecord>> {
    let scores = inference_pass(model, bags, workers)?;
    Ok(scores
        .into_iter()
        .zip(bags)
        .map(|(s, b)| ScoreRecord {
            slide_id: s.slide_id,
            label: b.label,
            score: s.top_prob as f64,
            magnification,
        })
        .collect())
}

/// Median of the finite values; NaN when there are none.
pub fn median(values: &[f64]) -> f64 {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Median best validation error per parameter, in first-seen order.
pub fn summarize(rows: &[SweepRow]) -> Vec<(String, f64)> {
    let mut params: Vec<&str> = Vec::new();
    for r in rows {
        if !params.contains(&r.sweep_param.as_str()) {
            params.push(&r.sweep_param);
        }
    }
    params
        .into_iter()
        .map(|p| {
            let values: Vec<f64> = rows
                .iter()
                .filter(|r| r.sweep_param == p)
                .map(|r| r.best_val_balanced_error)
                .collect();
            (p.to_string(), median(&values))
        })
        .collect()
}
