//! Line-numbered CSV reading for the crate's text formats.

use std::path::Path;

use crate::error::{Error, Result};

/// Checks the header and returns every data row with its 1-based line number.
pub(crate) fn csv_rows(text: &str, path: &Path, header: &[&str]) -> Result<Vec<(usize, csv::StringRecord)>> {
    let parse_err = |line: usize, message: String| Error::Parse { path: path.to_path_buf(), line, message };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(text.as_bytes());
    let mut rows = reader.records();
    match rows.next() {
        Some(Ok(h)) if h.iter().eq(header.iter().copied()) => {}
        Some(Ok(h)) => {
            return Err(parse_err(
                1,
                format!("expected header {}, found {}", header.join(","), h.iter().collect::<Vec<_>>().join(",")),
            ))
        }
        Some(Err(e)) => return Err(parse_err(1, e.to_string())),
        None => return Err(parse_err(1, "empty file".into())),
    }
    let mut out = Vec::new();
    for row in rows {
        let row = row.map_err(|e| parse_err(e.position().map_or(0, |p| p.line() as usize), e.to_string()))?;
        let line = row.position().map_or(0, |p| p.line() as usize);
        if row.len() != header.len() {
            return Err(parse_err(line, format!("expected {} fields, found {}", header.len(), row.len())));
        }
        out.push((line, row));
    }
    Ok(out)
}

pub(crate) fn parse_field<T: std::str::FromStr>(path: &Path, line: usize, name: &str, raw: &str) -> Result<T> {
    raw.parse().map_err(|_| Error::Parse {
        path: path.to_path_buf(),
        line,
        message: format!("invalid {name} {raw:?}"),
    })
}


/// Serialises rows with standard quoting.
pub(crate) fn write_csv<R, F>(header: &[&str], rows: R) -> String
where
    R: IntoIterator<Item = Vec<F>>,
    F: AsRef<[u8]>,
{
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).expect("writing to memory");
    for row in rows {
        w.write_record(row).expect("writing to memory");
    }
    String::from_utf8(w.into_inner().expect("writing to memory")).expect("csv of utf-8 fields is utf-8")
}
