//! Post-hoc combination of slide scores from models cut at different
//! magnifications.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::eval::{ScoreRecord, SCORE_HEADER};
use crate::slide::Magnification;
use crate::tabular::write_csv;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EnsembleMode {
    Max,
    Avg,
}

impl fmt::Display for EnsembleMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EnsembleMode::Max => "max",
            EnsembleMode::Avg => "avg",
        })
    }
}

impl FromStr for EnsembleMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "max" => Ok(EnsembleMode::Max),
            "avg" => Ok(EnsembleMode::Avg),
            _ => Err(Error::Argument(format!("unknown ensemble mode {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct SlideEntry {
    slide_id: String,
    label: u8,
    scores: Vec<(Magnification, f64)>,
}

/// Scores per slide and magnification, in first-seen slide order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ScoreSet {
    slides: Vec<SlideEntry>,
    index: HashMap<String, usize>,
}

impl ScoreSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, record: &ScoreRecord) -> Result<()> {
        let i = match self.index.get(&record.slide_id) {
            Some(&i) => i,
            None => {
                self.slides.push(SlideEntry { slide_id: record.slide_id.clone(), label: record.label, scores: Vec::new() });
                self.index.insert(record.slide_id.clone(), self.slides.len() - 1);
                self.slides.len() - 1
            }
        };
        let entry = &mut self.slides[i];
        if entry.label != record.label {
            return Err(Error::Data(format!(
                "slide {} labelled both {} and {}",
                record.slide_id, entry.label, record.label
            )));
        }
        if entry.scores.iter().any(|(m, _)| *m == record.magnification) {
            return Err(Error::Data(format!(
                "slide {} has two scores at {}",
                record.slide_id, record.magnification
            )));
        }
        entry.scores.push((record.magnification, record.score));
        Ok(())
    }

    pub fn from_records<'a>(records: impl IntoIterator<Item = &'a ScoreRecord>) -> Result<Self> {
        let mut set = Self::new();
        for r in records {
            set.insert(r)?;
        }
        Ok(set)
    }

    pub fn len(&self) -> usize {
        self.slides.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slides.is_empty()
    }

    /// Magnifications present for at least one slide, finest first.
    pub fn magnifications(&self) -> Vec<Magnification> {
        let mut mags: Vec<Magnification> = Magnification::ALL
            .into_iter()
            .filter(|m| self.slides.iter().any(|s| s.scores.iter().any(|(x, _)| x == m)))
            .collect();
        mags.sort_by_key(|m| m.downsample_factor());
        mags
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CombinedScore {
    pub slide_id: String,
    pub label: u8,
    pub score: f64,
}

/// Mean that is exact for identical inputs and independent of input order.
fn stable_mean(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let lo = values[0];
    let hi = values[values.len() - 1];
    let spread: f64 = values.iter().map(|v| v - lo).sum();
    (lo + spread / values.len() as f64).clamp(lo, hi)
}

/// Combines the scores of `subset` for every slide.
pub fn combine(set: &ScoreSet, mode: EnsembleMode, subset: &[Magnification]) -> Result<Vec<CombinedScore>> {
    if subset.is_empty() {
        return Err(Error::Argument("ensemble over no magnifications".into()));
    }
    set.slides
        .iter()
        .map(|s| {
            let mut values = subset
                .iter()
                .map(|m| {
                    s.scores
                        .iter()
                        .find(|(x, _)| x == m)
                        .map(|(_, v)| *v)
                        .ok_or_else(|| Error::Data(format!("slide {} has no score at {m}", s.slide_id)))
                })
                .collect::<Result<Vec<f64>>>()?;
            let score = match mode {
                EnsembleMode::Max => values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                EnsembleMode::Avg => stable_mean(&mut values),
            };
            Ok(CombinedScore { slide_id: s.slide_id.clone(), label: s.label, score })
        })
        .collect()
}

pub fn subset_label(subset: &[Magnification]) -> String {
    subset.iter().map(|m| m.to_string()).collect::<Vec<_>>().join("+")
}

/// Score-export layout plus a `mode` column; `magnification` lists the
/// combined scales joined by `+`.
pub fn combined_csv(scores: &[CombinedScore], mode: EnsembleMode, subset: &[Magnification]) -> String {
    let mut header = SCORE_HEADER.to_vec();
    header.push("mode");
    let label = subset_label(subset);
    write_csv(
        &header,
        scores.iter().map(|s| {
            vec![s.slide_id.clone(), s.label.to_string(), s.score.to_string(), label.clone(), mode.to_string()]
        }),
    )
}

pub fn load_score_set(paths: &[&Path]) -> Result<ScoreSet> {
    let mut set = ScoreSet::new();
    for p in paths {
        for r in crate::eval::load_scores(p)? {
            set.insert(&r)?;
        }
    }
    Ok(set)
}
