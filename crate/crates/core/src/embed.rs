//! Penultimate-layer embeddings of tiles and their 2-D PCA projection.

use rand::seq::index::sample;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::mil::{inference_pass_in, worker_pool, INFERENCE_CHUNK};
use crate::numerics::Model;
use crate::seeding::rng_for;
use crate::slide::{stack_tiles, Bag, Tile};
use crate::tabular::write_csv;

pub const TILES_PER_SLIDE: usize = 50;
pub const PCA_TOLERANCE: f64 = 1e-9;
pub const PCA_MAX_ITERATIONS: usize = 10_000;
pub const EMBEDDING_HEADER: [&str; 7] = ["slide_id", "row", "col", "is_top", "label", "x", "y"];

const SAMPLE_STREAM: u64 = 31;

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingRow {
    pub slide_id: String,
    pub row: usize,
    pub col: usize,
    pub is_top: bool,
    pub label: u8,
    pub features: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct EmbeddingTable {
    pub rows: Vec<EmbeddingRow>,
}

impl EmbeddingTable {
    pub fn dim(&self) -> usize {
        self.rows.first().map_or(0, |r| r.features.len())
    }

    pub fn features_f64(&self) -> Vec<Vec<f64>> {
        self.rows
            .iter()
            .map(|r| r.features.iter().map(|&v| v as f64).collect())
            .collect()
    }
}

/// Hidden activations feeding the classifier, one vector per tile.
pub fn extract_features(model: &Model, tiles: &[&Tile], workers: usize) -> Result<Vec<Vec<f32>>> {
    let hidden = model.config().hidden_units;
    if hidden == 0 {
        return Err(Error::Config("model has no hidden layer to read features from".into()));
    }
    let chunks: Vec<Vec<f32>> = worker_pool(workers)?.install(|| {
        tiles
            .par_chunks(INFERENCE_CHUNK)
            .map(|chunk| Ok(model.features(&stack_tiles(chunk.iter().copied())?)?.into_data()))
            .collect::<Result<_>>()
    })?;
    Ok(chunks
        .into_iter()
        .flat_map(|c| c.chunks_exact(hidden).map(<[f32]>::to_vec).collect::<Vec<_>>())
        .collect())
}

/// Each slide contributes its top-ranked tile plus up to `per_slide` other
/// tiles drawn without replacement (all of them when fewer remain).
pub fn build_embedding_table(
    model: &Model,
    bags: &[Bag],
    per_slide: usize,
    seed: u64,
    workers: usize,
) -> Result<EmbeddingTable> {
    let pool = worker_pool(workers)?;
    let scores = inference_pass_in(&pool, model, bags)?;
    let mut picked: Vec<(&Bag, &Tile, bool)> = Vec::new();
    for (i, (bag, s)) in bags.iter().zip(&scores).enumerate() {
        picked.push((bag, &bag.tiles[s.top_index], true));
        let others: Vec<usize> = (0..bag.m()).filter(|&j| j != s.top_index).collect();
        let mut chosen: Vec<usize> = if others.len() <= per_slide {
            others
        } else {
            let mut rng = rng_for(seed, SAMPLE_STREAM + i as u64);
            sample(&mut rng, others.len(), per_slide).into_iter().map(|k| others[k]).collect()
        };
        chosen.sort_unstable();
        picked.extend(chosen.into_iter().map(|j| (bag, &bag.tiles[j], false)));
    }
    let tiles: Vec<&Tile> = picked.iter().map(|p| p.1).collect();
    let features = extract_features(model, &tiles, workers)?;
    Ok(EmbeddingTable {
        rows: picked
            .into_iter()
            .zip(features)
            .map(|((bag, tile, is_top), features)| EmbeddingRow {
                slide_id: bag.slide_id.to_string(),
                row: tile.row,
                col: tile.col,
                is_top,
                label: bag.label,
                features,
            })
            .collect(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PcaModel {
    pub mean: Vec<f64>,
    /// Unit-norm, mutually orthogonal.
    pub axes: [Vec<f64>; 2],
    /// Sample variances along the axes, descending.
    pub variances: [f64; 2],
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn mat_vec(m: &[f64], v: &[f64]) -> Vec<f64> {
    m.chunks_exact(v.len()).map(|row| dot(row, v)).collect()
}

/// Removes the component along each (unit) vector in `basis`.
fn orthogonalize(v: &mut [f64], basis: &[&[f64]]) {
    for b in basis {
        let d = dot(v, b);
        for (x, y) in v.iter_mut().zip(b.iter()) {
            *x -= d * y;
        }
    }
}

fn normalize(v: &mut [f64]) -> f64 {
    let n = norm(v);
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    n
}

/// Flips `v` so its largest-magnitude coordinate (first on ties) is positive.
fn fix_sign(v: &mut [f64]) {
    let mut k = 0;
    for i in 1..v.len() {
        if v[i].abs() > v[k].abs() {
            k = i;
        }
    }
    if v[k] < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

/// Unit vector orthogonal to `basis`, built from the coordinate axis least
/// aligned with it.
fn any_orthogonal(d: usize, basis: &[&[f64]]) -> Vec<f64> {
    let mut best = Vec::new();
    let mut best_norm = -1.0;
    for k in 0..d {
        let mut e = vec![0.0; d];
        e[k] = 1.0;
        orthogonalize(&mut e, basis);
        let n = norm(&e);
        if n > best_norm {
            best_norm = n;
            best = e;
        }
    }
    normalize(&mut best);
    best
}

/// Leading eigenvector of the symmetric PSD `cov` restricted to the
/// complement of `basis`.
fn power_iteration(cov: &[f64], d: usize, basis: &[&[f64]]) -> Vec<f64> {
    // Start from the column of largest variance, which lies in the span of
    // the matrix and so is not orthogonal to its leading eigenvector.
    let j = (0..d)
        .max_by(|&a, &b| cov[a * d + a].total_cmp(&cov[b * d + b]))
        .unwrap_or(0);
    let mut v: Vec<f64> = (0..d).map(|i| cov[i * d + j]).collect();
    orthogonalize(&mut v, basis);
    if normalize(&mut v) <= f64::EPSILON {
        return any_orthogonal(d, basis);
    }
    for _ in 0..PCA_MAX_ITERATIONS {
        let mut next = mat_vec(cov, &v);
        orthogonalize(&mut next, basis);
        if normalize(&mut next) <= f64::EPSILON {
            return any_orthogonal(d, basis);
        }
        let change = next.iter().zip(&v).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        v = next;
        if change < PCA_TOLERANCE {
            break;
        }
    }
    v
}

/// Sample covariance (divisor n - 1), row-major `d x d`.
pub fn covariance(data: &[Vec<f64>]) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = data.len();
    if n < 2 {
        return Err(Error::Argument("covariance needs at least two rows".into()));
    }
    let d = data[0].len();
    if d == 0 || data.iter().any(|r| r.len() != d) {
        return Err(Error::Usage("rows of unequal or zero dimension".into()));
    }
    let mut mean = vec![0.0; d];
    for r in data {
        for (m, x) in mean.iter_mut().zip(r) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut cov = vec![0.0; d * d];
    for r in data {
        let c: Vec<f64> = r.iter().zip(&mean).map(|(x, m)| x - m).collect();
        for i in 0..d {
            for j in i..d {
                cov[i * d + j] += c[i] * c[j];
            }
        }
    }
    for i in 0..d {
        for j in i..d {
            let v = cov[i * d + j] / (n - 1) as f64;
            cov[i * d + j] = v;
            cov[j * d + i] = v;
        }
    }
    Ok((mean, cov))
}

/// Top two principal axes by power iteration with deflation.
pub fn fit_pca_2d(data: &[Vec<f64>]) -> Result<PcaModel> {
    if data.len() < 3 {
        return Err(Error::Argument(format!("PCA needs at least 3 rows, got {}", data.len())));
    }
    let (mean, cov) = covariance(data)?;
    let d = mean.len();
    if d < 2 {
        return Err(Error::Argument("PCA to 2-D needs at least 2 features".into()));
    }
    let total: f64 = (0..d).map(|i| cov[i * d + i]).sum();
    let scale = mean.iter().map(|m| m * m).sum::<f64>().max(1.0);
    if !(total > 1e-24 * scale) {
        return Err(Error::DegenerateData("features have zero variance".into()));
    }
    let mut first = power_iteration(&cov, d, &[]);
    let l1 = dot(&first, &mat_vec(&cov, &first)).max(0.0);
    let deflated: Vec<f64> = (0..d * d)
        .map(|k| cov[k] - l1 * first[k / d] * first[k % d])
        .collect();
    let mut second = power_iteration(&deflated, d, &[&first]);
    let mut l2 = dot(&second, &mat_vec(&cov, &second)).max(0.0);
    if l2 > l1 {
        // Near-degenerate top pair: keep the ordering contract.
        std::mem::swap(&mut first, &mut second);
        l2 = l1;
    }
    let l1 = dot(&first, &mat_vec(&cov, &first)).max(0.0);
    fix_sign(&mut first);
    fix_sign(&mut second);
    Ok(PcaModel { mean, axes: [first, second], variances: [l1, l2] })
}

impl PcaModel {
    pub fn project_one(&self, x: &[f64]) -> Result<[f64; 2]> {
        if x.len() != self.mean.len() {
            return Err(Error::Usage(format!(
                "feature dimension {} but PCA was fit on {}",
                x.len(),
                self.mean.len()
            )));
        }
        let c: Vec<f64> = x.iter().zip(&self.mean).map(|(a, m)| a - m).collect();
        Ok([dot(&self.axes[0], &c), dot(&self.axes[1], &c)])
    }

    pub fn project(&self, data: &[Vec<f64>]) -> Result<Vec<[f64; 2]>> {
        data.iter().map(|x| self.project_one(x)).collect()
    }

    /// Point in feature space whose projection is `p`.
    pub fn reconstruct(&self, p: [f64; 2]) -> Vec<f64> {
        (0..self.mean.len())
            .map(|i| self.mean[i] + p[0] * self.axes[0][i] + p[1] * self.axes[1][i])
            .collect()
    }
}

/// Distance between the two groups' centroids in units of their pooled
/// standard deviation (square root of the pooled per-axis variance).
pub fn centroid_separation(a: &[[f64; 2]], b: &[[f64; 2]]) -> Result<f64> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::Argument("each group needs at least two points".into()));
    }
    let centroid = |g: &[[f64; 2]]| {
        let n = g.len() as f64;
        [g.iter().map(|p| p[0]).sum::<f64>() / n, g.iter().map(|p| p[1]).sum::<f64>() / n]
    };
    let scatter = |g: &[[f64; 2]], c: [f64; 2]| g.iter().map(|p| (p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2)).sum::<f64>();
    let (ca, cb) = (centroid(a), centroid(b));
    let pooled = (scatter(a, ca) + scatter(b, cb)) / ((a.len() + b.len() - 2) as f64 * 2.0);
    if pooled <= 0.0 {
        return Err(Error::DegenerateData("groups have zero spread".into()));
    }
    let dist = ((ca[0] - cb[0]).powi(2) + (ca[1] - cb[1]).powi(2)).sqrt();
    Ok(dist / pooled.sqrt())
}

pub fn embedding_csv(table: &EmbeddingTable, points: &[[f64; 2]]) -> Result<String> {
    if table.rows.len() != points.len() {
        return Err(Error::Usage("projection not aligned with table".into()));
    }
    Ok(write_csv(
        &EMBEDDING_HEADER,
        table.rows.iter().zip(points).map(|(r, p)| {
            vec![
                r.slide_id.clone(),
                r.row.to_string(),
                r.col.to_string(),
                (r.is_top as u8).to_string(),
                r.label.to_string(),
                p[0].to_string(),
                p[1].to_string(),
            ]
        }),
    ))
}
