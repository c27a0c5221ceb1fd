//! Run configuration: a UTF-8 `key = value` file.
//!
//! Blank lines and lines starting with `#` are ignored. Relative paths are
//! resolved against the directory holding the file.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use milpath_core::mil::{SelectionMetric, TrainConfig};
use milpath_core::slide::Magnification;
use milpath_core::{Error, Result};

pub const KEYS: [&str; 18] = [
    "manifest",
    "out",
    "epochs",
    "batch_size",
    "lr",
    "w1",
    "seed",
    "augment",
    "threshold",
    "magnification",
    "tile_size",
    "selection",
    "workers",
    "sweep_weights",
    "sweep_sizes",
    "sweep_magnifications",
    "sweep_repeats",
    "eval_split",
];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub manifest: PathBuf,
    pub out: PathBuf,
    pub train: TrainConfig,
    pub sweep_weights: Vec<f32>,
    pub sweep_sizes: Vec<usize>,
    pub sweep_magnifications: Vec<Magnification>,
    pub sweep_repeats: usize,
    /// Split scored after training and in magnification sweeps.
    pub eval_split: milpath_core::slide::Split,
}

fn list<T: FromStr>(raw: &str) -> std::result::Result<Vec<T>, ()> {
    raw.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().map_err(|_| ()))
        .collect()
}

fn boolean(raw: &str) -> std::result::Result<bool, ()> {
    match raw {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(()),
    }
}

fn unit_open(raw: &str) -> std::result::Result<f64, ()> {
    let v: f64 = raw.parse().map_err(|_| ())?;
    if v > 0.0 && v < 1.0 {
        Ok(v)
    } else {
        Err(())
    }
}

impl RunConfig {
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let base = path.parent().unwrap_or(Path::new(""));
        let resolve = |raw: &str| {
            let p = PathBuf::from(raw);
            if p.is_absolute() {
                p
            } else {
                base.join(p)
            }
        };
        let mut manifest = None;
        let mut out = None;
        let mut train = TrainConfig::default();
        let mut cfg = RunConfig {
            manifest: PathBuf::new(),
            out: PathBuf::new(),
            train: TrainConfig::default(),
            sweep_weights: vec![0.5, 0.7, 0.9, 0.95, 0.99],
            sweep_sizes: vec![25, 50, 100, 200, 400],
            sweep_magnifications: vec![Magnification::X20, Magnification::X10, Magnification::X5],
            sweep_repeats: 5,
            eval_split: milpath_core::slide::Split::Test,
        };
        let mut seen: Vec<&str> = Vec::new();
        for (i, raw_line) in text.lines().enumerate() {
            let line = i + 1;
            let err = |message: String| Error::Parse { path: path.to_path_buf(), line, message };
            let trimmed = raw_line.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let (key, value) = trimmed
                .split_once('=')
                .ok_or_else(|| err(format!("expected key = value, found {trimmed:?}")))?;
            let (key, value) = (key.trim(), value.trim());
            let Some(&known) = KEYS.iter().find(|&&k| k == key) else {
                return Err(err(format!("unknown key {key:?}")));
            };
            if seen.contains(&known) {
                return Err(err(format!("key {key:?} given twice")));
            }
            seen.push(known);
            let bad = |_| err(format!("invalid value {value:?} for {key}"));
            match known {
                "manifest" => manifest = Some(resolve(value)),
                "out" => out = Some(resolve(value)),
                "epochs" => train.epochs = value.parse().map_err(|_| bad(()))?,
                "batch_size" => {
                    train.batch_size = value.parse().map_err(|_| bad(()))?;
                    if train.batch_size == 0 {
                        return Err(bad(()));
                    }
                }
                "lr" => {
                    train.lr = value.parse().map_err(|_| bad(()))?;
                    if !(train.lr >= 0.0 && train.lr.is_finite()) {
                        return Err(bad(()));
                    }
                }
                "w1" => train.w1 = unit_open(value).map_err(bad)? as f32,
                "seed" => train.seed = value.parse().map_err(|_| bad(()))?,
                "augment" => train.augment = boolean(value).map_err(bad)?,
                "threshold" => train.threshold = unit_open(value).map_err(bad)?,
                "magnification" => train.magnification = value.parse().map_err(|_| bad(()))?,
                "tile_size" => {
                    train.tile_size = value.parse().map_err(|_| bad(()))?;
                    if train.tile_size < 16 {
                        return Err(err(format!("tile_size {value} is below the model's minimum of 16")));
                    }
                }
                "selection" => train.selection = value.parse::<SelectionMetric>().map_err(|_| bad(()))?,
                "workers" => train.workers = value.parse().map_err(|_| bad(()))?,
                "sweep_weights" => {
                    cfg.sweep_weights = list(value).map_err(bad)?;
                    if cfg.sweep_weights.is_empty() || cfg.sweep_weights.iter().any(|w| !(*w > 0.0 && *w < 1.0)) {
                        return Err(bad(()));
                    }
                }
                "sweep_sizes" => {
                    cfg.sweep_sizes = list(value).map_err(bad)?;
                    if cfg.sweep_sizes.is_empty() || cfg.sweep_sizes.windows(2).any(|w| w[0] >= w[1]) {
                        return Err(err(format!("sweep_sizes {value:?} must be non-empty and strictly ascending")));
                    }
                }
                "sweep_magnifications" => {
                    cfg.sweep_magnifications = list(value).map_err(bad)?;
                    if cfg.sweep_magnifications.is_empty() {
                        return Err(bad(()));
                    }
                }
                "sweep_repeats" => {
                    cfg.sweep_repeats = value.parse().map_err(|_| bad(()))?;
                    if cfg.sweep_repeats == 0 {
                        return Err(bad(()));
                    }
                }
                "eval_split" => cfg.eval_split = value.parse().map_err(|_| bad(()))?,
                _ => unreachable!("every known key is handled"),
            }
        }
        let missing = |key: &str| Error::Parse {
            path: path.to_path_buf(),
            line: text.lines().count().max(1),
            message: format!("missing required key {key:?}"),
        };
        cfg.manifest = manifest.ok_or_else(|| missing("manifest"))?;
        cfg.out = out.ok_or_else(|| missing("out"))?;
        cfg.train = train;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let text = String::from_utf8(text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: 1 + e.as_bytes()[..e.utf8_error().valid_up_to()].iter().filter(|&&b| b == b'\n').count(),
            message: "config is not valid UTF-8".into(),
        })?;
        Self::parse(&text, path)
    }

    /// Checks that inputs exist and the output directory can be created.
    pub fn check_paths(&self) -> Result<()> {
        if !self.manifest.is_file() {
            return Err(Error::Config(format!("manifest {} does not exist", self.manifest.display())));
        }
        if self.out.exists() && !self.out.is_dir() {
            return Err(Error::Config(format!("output path {} is not a directory", self.out.display())));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<RunConfig> {
        RunConfig::parse(text, Path::new("/runs/a/run.cfg"))
    }

    #[test]
    fn defaults_and_overrides() {
        let cfg = parse("# comment\nmanifest = data/manifest.csv\nout=/tmp/o\n\nw1 = 0.7\naugment = true\nmagnification = 5x\nsweep_sizes = 10, 20\n").unwrap();
        assert_eq!(cfg.manifest, PathBuf::from("/runs/a/data/manifest.csv"));
        assert_eq!(cfg.out, PathBuf::from("/tmp/o"));
        assert_eq!(cfg.train.w1, 0.7);
        assert!(cfg.train.augment);
        assert_eq!(cfg.train.magnification, Magnification::X5);
        assert_eq!(cfg.train.lr, 1e-4);
        assert_eq!(cfg.sweep_sizes, vec![10, 20]);
        assert_eq!(cfg.sweep_repeats, 5);
    }

    fn line_of(r: Result<RunConfig>) -> usize {
        match r {
            Err(Error::Parse { line, .. }) => line,
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn rejects_with_line_numbers() {
        assert_eq!(line_of(parse("manifest=m\nout=o\nlearning_rate=0.1\n")), 3);
        assert_eq!(line_of(parse("manifest=m\n\nw1=1.5\nout=o\n")), 3);
        assert_eq!(line_of(parse("manifest=m\nout=o\nout=p\n")), 3);
        assert_eq!(line_of(parse("manifest=m\njust text\n")), 2);
        assert_eq!(line_of(parse("manifest=m\nout=o\nsweep_sizes=50,25\n")), 3);
        assert_eq!(line_of(parse("manifest=m\nout=o\nmagnification=40x\n")), 3);
        assert!(matches!(parse("out=o\n"), Err(Error::Parse { .. })));
    }
}
