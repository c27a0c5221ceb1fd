//! Per-slide score exports shared by evaluation and ensembling.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tabular::{csv_rows, parse_field, write_csv};
use crate::slide::Magnification;

pub const SCORE_HEADER: [&str; 4] = ["slide_id", "label", "score", "magnification"];

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreRecord {
    pub slide_id: String,
    pub label: u8,
    pub score: f64,
    pub magnification: Magnification,
}

pub fn scores_csv(records: &[ScoreRecord]) -> String {
    write_csv(
        &SCORE_HEADER,
        records.iter().map(|r| {
            vec![r.slide_id.clone(), r.label.to_string(), r.score.to_string(), r.magnification.to_string()]
        }),
    )
}

pub fn parse_scores(text: &str, path: &Path) -> Result<Vec<ScoreRecord>> {
    csv_rows(text, path, &SCORE_HEADER)?
        .into_iter()
        .map(|(line, row)| {
            let label = match &row[1] {
                "0" => 0,
                "1" => 1,
                other => {
                    return Err(Error::Parse {
                        path: path.to_path_buf(),
                        line,
                        message: format!("label must be 0 or 1, found {other:?}"),
                    })
                }
            };
            let score: f64 = parse_field(path, line, "score", &row[2])?;
            if !score.is_finite() {
                return Err(Error::Parse { path: path.to_path_buf(), line, message: "score is not finite".into() });
            }
            Ok(ScoreRecord {
                slide_id: row[0].to_string(),
                label,
                score,
                magnification: parse_field(path, line, "magnification", &row[3])?,
            })
        })
        .collect()
}

pub fn load_scores(path: &Path) -> Result<Vec<ScoreRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_scores(&text, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let records = vec![
            ScoreRecord { slide_id: "a".into(), label: 1, score: 0.875, magnification: Magnification::X20 },
            ScoreRecord { slide_id: "b".into(), label: 0, score: 0.1, magnification: Magnification::X5 },
        ];
        let text = scores_csv(&records);
        assert_eq!(parse_scores(&text, Path::new("s.csv")).unwrap(), records);
    }

    #[test]
    fn reports_bad_lines() {
        let text = "slide_id,label,score,magnification\na,1,0.5,20x\nb,0,high,20x\n";
        match parse_scores(text, Path::new("s.csv")) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        let text = "slide_id,label,score,magnification\na,1,0.5,40x\n";
        assert!(matches!(parse_scores(text, Path::new("s.csv")), Err(Error::Parse { line: 2, .. })));
    }
}
