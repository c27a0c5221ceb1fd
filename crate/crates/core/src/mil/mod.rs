//! Top-1 multiple instance learning: score every tile, train on the best
//! tile of each slide, call a slide positive when its best tile is.

mod augment;

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use rayon::ThreadPool;

pub use augment::Transform;

use crate::error::{Error, Result};
use crate::eval::{error_rates, roc_auc};
use crate::numerics::{AdamState, Checkpoint, Graph, Model, ModelConfig, Tensor};
use crate::seeding::{derive_seed, rng_for};
use crate::slide::{build_bag, load_split, stack_tiles, Bag, Magnification, Manifest, SlideRaster, Split, Tile, TilingConfig};

/// Tiles per forward call during inference. Results do not depend on it.
pub const INFERENCE_CHUNK: usize = 128;

const MODEL_STREAM: u64 = 11;
const EPOCH_STREAM_BASE: u64 = 1 << 20;

/// Positive-class probabilities of every tile in one bag.
#[derive(Debug, Clone, PartialEq)]
pub struct SlideScores {
    pub slide_id: String,
    pub probs: Vec<f32>,
    /// Smallest index attaining the maximum.
    pub top_index: usize,
    pub top_prob: f32,
}

impl SlideScores {
    pub fn new(slide_id: impl Into<String>, probs: Vec<f32>) -> Result<Self> {
        let slide_id = slide_id.into();
        let mut top_index = 0;
        for (i, &p) in probs.iter().enumerate() {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Numeric(format!("slide {slide_id}: tile probability {p} outside [0, 1]")));
            }
            if p > probs[top_index] {
                top_index = i;
            }
        }
        let top_prob = *probs
            .get(top_index)
            .ok_or_else(|| Error::EmptyBag(slide_id.clone()))?;
        Ok(Self { slide_id, probs, top_index, top_prob })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SelectionMetric {
    /// Lowest validation balanced error.
    BalancedError,
    /// Highest validation AUC.
    Auc,
}

impl fmt::Display for SelectionMetric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SelectionMetric::BalancedError => "balanced_error",
            SelectionMetric::Auc => "auc",
        })
    }
}

impl FromStr for SelectionMetric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "balanced_error" => Ok(SelectionMetric::BalancedError),
            "auc" => Ok(SelectionMetric::Auc),
            _ => Err(Error::Argument(format!("unknown selection metric {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    /// Positive-class loss weight; the negative class gets `1 - w1`.
    pub w1: f32,
    pub seed: u64,
    pub augment: bool,
    pub threshold: f64,
    pub magnification: Magnification,
    pub tile_size: usize,
    pub selection: SelectionMetric,
    /// Inference threads. Outputs do not depend on it.
    pub workers: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 32,
            lr: 1e-4,
            w1: 0.9,
            seed: 0,
            augment: false,
            threshold: 0.5,
            magnification: Magnification::X20,
            tile_size: 32,
            selection: SelectionMetric::BalancedError,
            workers: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.w1 > 0.0 && self.w1 < 1.0) {
            return Err(Error::Config(format!("w1 = {} must lie in (0, 1)", self.w1)));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Config(format!("threshold = {} must lie in (0, 1)", self.threshold)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be finite and non-negative", self.lr)));
        }
        if self.tile_size == 0 {
            return Err(Error::Config("tile size must be positive".into()));
        }
        Ok(())
    }

    pub fn w0(&self) -> f32 {
        1.0 - self.w1
    }

    pub fn tiling(&self) -> TilingConfig {
        TilingConfig::new(self.magnification, self.tile_size)
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig::small_cnn(self.tile_size)
    }
}

pub fn worker_pool(workers: usize) -> Result<ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Config(format!("cannot start {workers} workers: {e}")))
}

/// Scores every tile of every bag once. Per-tile outputs do not depend on
/// chunking or thread count.
pub fn inference_pass_in(pool: &ThreadPool, model: &Model, bags: &[Bag]) -> Result<Vec<SlideScores>> {
    if bags.is_empty() {
        return Err(Error::Argument("inference over no bags".into()));
    }
    if let Some(b) = bags.iter().find(|b| b.tiles.is_empty()) {
        return Err(Error::EmptyBag(b.slide_id.to_string()));
    }
    let tiles: Vec<&Tile> = bags.iter().flat_map(|b| &b.tiles).collect();
    let chunks: Vec<Vec<f32>> = pool.install(|| {
        tiles
            .par_chunks(INFERENCE_CHUNK)
            .map(|chunk| {
                let probs = model.forward(&stack_tiles(chunk.iter().copied())?)?;
                Ok(probs.data().chunks_exact(2).map(|p| p[1]).collect())
            })
            .collect::<Result<_>>()
    })?;
    let mut flat = chunks.into_iter().flatten();
    bags.iter()
        .map(|b| SlideScores::new(b.slide_id.as_ref(), flat.by_ref().take(b.m()).collect()))
        .collect()
}

pub fn inference_pass(model: &Model, bags: &[Bag], workers: usize) -> Result<Vec<SlideScores>> {
    inference_pass_in(&worker_pool(workers)?, model, bags)
}

/// One `(tile, slide label)` pair per bag.
pub fn select_top_instances<'a>(scores: &[SlideScores], bags: &'a [Bag]) -> Result<Vec<(&'a Tile, u8)>> {
    if scores.len() != bags.len() {
        return Err(Error::Usage(format!("{} score sets for {} bags", scores.len(), bags.len())));
    }
    scores
        .iter()
        .zip(bags)
        .map(|(s, b)| {
            if s.slide_id != *b.slide_id || s.probs.len() != b.m() {
                return Err(Error::Usage(format!("scores for {} do not match bag {}", s.slide_id, b.slide_id)));
            }
            Ok((&b.tiles[s.top_index], b.label))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    /// Per-instance mean of the weighted loss over the epoch.
    pub mean_loss: f64,
    /// Training-set scores from the pass that picked this epoch's instances.
    pub scores: Vec<SlideScores>,
}

/// Runs one gradient step on a batch and returns the batch loss.
pub fn train_step(model: &mut Model, adam: &mut AdamState, batch: Tensor, targets: &[u8], w0: f32, w1: f32) -> Result<f32> {
    let mut graph = Graph::new();
    let taped = model.forward_taped(&mut graph, batch)?;
    let loss = graph.weighted_cross_entropy(taped.probs, targets, w0, w1)?;
    let value = graph.value(loss).item()?;
    graph.backward(loss)?;
    model.load_grads(&graph, &taped.params)?;
    adam.step(model.params_mut())?;
    Ok(value)
}

/// Inference, top-1 selection, seeded shuffle (and augmentation), then
/// mini-batch updates. `epoch` only selects the random stream.
pub fn train_epoch_in(
    pool: &ThreadPool,
    model: &mut Model,
    adam: &mut AdamState,
    bags: &[Bag],
    config: &TrainConfig,
    epoch: usize,
) -> Result<EpochStats> {
    config.validate()?;
    let scores = inference_pass_in(pool, model, bags)?;
    let mut instances = select_top_instances(&scores, bags)?;
    let mut rng = rng_for(config.seed, EPOCH_STREAM_BASE + epoch as u64);
    instances.shuffle(&mut rng);
    let side = config.tile_size;
    let mut total = 0.0f64;
    for batch in instances.chunks(config.batch_size) {
        let mut data = Vec::with_capacity(batch.len() * 3 * side * side);
        for (tile, _) in batch {
            if tile.side != side {
                return Err(Error::Config(format!("tile side {} but config says {side}", tile.side)));
            }
            let t = if config.augment { Transform::sample(&mut rng) } else { Transform::Identity };
            data.extend(t.apply(&tile.pixels, side));
        }
        let targets: Vec<u8> = batch.iter().map(|(_, y)| *y).collect();
        let x = Tensor::new(vec![batch.len(), 3, side, side], data)?;
        let loss = train_step(model, adam, x, &targets, config.w0(), config.w1)
            .map_err(|e| Error::Numeric(format!("epoch {epoch}: {e}")))?;
        total += loss as f64 * batch.len() as f64;
    }
    Ok(EpochStats { mean_loss: total / instances.len() as f64, scores })
}

pub fn train_epoch(model: &mut Model, adam: &mut AdamState, bags: &[Bag], config: &TrainConfig, epoch: usize) -> Result<EpochStats> {
    train_epoch_in(&worker_pool(config.workers)?, model, adam, bags, config, epoch)
}

/// Slide call and score: positive iff the best tile reaches `threshold`.
pub fn predict_slide(model: &Model, bag: &Bag, threshold: f64) -> Result<(u8, f32)> {
    let scores = inference_pass(model, std::slice::from_ref(bag), 1)?;
    let score = scores[0].top_prob;
    Ok(((score as f64 >= threshold) as u8, score))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochMetrics {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub val_balanced_error: f64,
    pub val_fnr: f64,
    pub val_fpr: f64,
    pub val_auc: f64,
}

pub const METRICS_HEADER: &str = "epoch,train_loss,val_balanced_error,val_fnr,val_fpr";

pub fn metrics_csv(history: &[EpochMetrics]) -> String {
    let mut out = format!("{METRICS_HEADER}\n");
    for m in history {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            m.epoch, m.train_loss, m.val_balanced_error, m.val_fnr, m.val_fpr
        ));
    }
    out
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Model and optimizer state at the selected epoch.
    pub checkpoint: Checkpoint,
    pub history: Vec<EpochMetrics>,
    /// 0 when no epoch ran.
    pub best_epoch: usize,
}

impl TrainOutcome {
    pub fn best(&self) -> Option<&EpochMetrics> {
        self.history.get(self.best_epoch.checked_sub(1)?)
    }
}

fn slide_scores_f64(scores: &[SlideScores]) -> Vec<f64> {
    scores.iter().map(|s| s.top_prob as f64).collect()
}

fn labels(bags: &[Bag]) -> Vec<u8> {
    bags.iter().map(|b| b.label).collect()
}

fn improves(metric: SelectionMetric, candidate: &EpochMetrics, best: Option<&EpochMetrics>) -> bool {
    let Some(best) = best else { return true };
    match metric {
        SelectionMetric::BalancedError => candidate.val_balanced_error < best.val_balanced_error,
        SelectionMetric::Auc => candidate.val_auc > best.val_auc,
    }
}

/// Trains for `config.epochs`, keeping the epoch that scores best on the
/// validation bags (earliest on ties). `observe` sees each epoch's metrics.
pub fn train_observed(
    config: &TrainConfig,
    train_bags: &[Bag],
    val_bags: &[Bag],
    mut observe: impl FnMut(&EpochMetrics),
) -> Result<TrainOutcome> {
    config.validate()?;
    if train_bags.is_empty() || val_bags.is_empty() {
        return Err(Error::Config("training needs non-empty train and val splits".into()));
    }
    let pool = worker_pool(config.workers)?;
    let mut model = Model::new(config.model_config(), derive_seed(config.seed, MODEL_STREAM))?;
    let mut adam = AdamState::new(model.params(), config.lr);
    let val_labels = labels(val_bags);

    let mut best = Checkpoint::new(model.clone(), adam.clone());
    let mut best_epoch = 0usize;
    let mut history: Vec<EpochMetrics> = Vec::with_capacity(config.epochs);
    for epoch in 1..=config.epochs {
        let stats = train_epoch_in(&pool, &mut model, &mut adam, train_bags, config, epoch)?;
        let val = slide_scores_f64(&inference_pass_in(&pool, &model, val_bags)?);
        let (fnr, fpr, be) = error_rates(&val, &val_labels, config.threshold)?;
        let metrics = EpochMetrics {
            epoch,
            train_loss: stats.mean_loss,
            val_balanced_error: be,
            val_fnr: fnr,
            val_fpr: fpr,
            val_auc: roc_auc(&val, &val_labels)?.auc,
        };
        observe(&metrics);
        if improves(config.selection, &metrics, history.get(best_epoch.wrapping_sub(1))) {
            best = Checkpoint::new(model.clone(), adam.clone());
            best_epoch = epoch;
        }
        history.push(metrics);
    }
    best.set_meta("best_epoch", best_epoch);
    if let Some(m) = history.get(best_epoch.wrapping_sub(1)) {
        best.set_meta("val_balanced_error", m.val_balanced_error);
        best.set_meta("val_auc", m.val_auc);
    }
    best.set_meta("magnification", config.magnification);
    best.set_meta("tile_size", config.tile_size);
    best.set_meta("seed", config.seed);
    best.set_meta("w1", config.w1);
    best.set_meta("threshold", config.threshold);
    Ok(TrainOutcome { checkpoint: best, history, best_epoch })
}

pub fn train(config: &TrainConfig, train_bags: &[Bag], val_bags: &[Bag]) -> Result<TrainOutcome> {
    train_observed(config, train_bags, val_bags, |_| {})
}

/// Tiles every slide; order follows `slides`.
pub fn build_bags(slides: &[SlideRaster], tiling: &TilingConfig, workers: usize) -> Result<Vec<Bag>> {
    worker_pool(workers)?.install(|| slides.par_iter().map(|s| build_bag(s, tiling)).collect())
}

/// Loads and tiles one split of a manifest.
pub fn load_bags(manifest: &Manifest, split: Split, tiling: &TilingConfig, workers: usize) -> Result<Vec<Bag>> {
    build_bags(&load_split(manifest, split)?, tiling, workers)
}

pub fn train_from_manifest(config: &TrainConfig, manifest: &Manifest) -> Result<TrainOutcome> {
    config.validate()?;
    for split in [Split::Train, Split::Val] {
        if manifest.count(split) == 0 {
            return Err(Error::Config(format!("manifest has no {split} slides")));
        }
    }
    let tiling = config.tiling();
    let train_bags = load_bags(manifest, Split::Train, &tiling, config.workers)?;
    let val_bags = load_bags(manifest, Split::Val, &tiling, config.workers)?;
    train(config, &train_bags, &val_bags)
}
