use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{NstError, Result};
use crate::tensor::Tensor;

const TIME_HEADERS: [&str; 6] = ["date", "time", "timestamp", "datetime", "index", "step"];

/// What to do with empty cells.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MissingPolicy {
    /// Reject the file, naming the first incomplete row.
    #[default]
    Strict,
    /// Repeat the previous row's value.
    ForwardFill,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct CsvOptions {
    pub missing: MissingPolicy,
}

fn is_missing(cell: &str) -> bool {
    matches!(cell, "" | "NA" | "NaN" | "nan" | "null")
}

/// Reads a header-first CSV of numeric columns. A leading column is treated
/// as a timestamp and dropped when its header is a usual time name or its
/// first value is not numeric.
pub fn load_csv(path: &Path, options: &CsvOptions) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)?;
    let headers: Vec<String> = reader
        .headers()?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    let records: Vec<csv::StringRecord> =
        reader.records().collect::<std::result::Result<_, _>>()?;
    if headers.is_empty() || records.is_empty() {
        return Err(NstError::Data(format!(
            "{} has no data rows",
            path.display()
        )));
    }

    let first = records[0].get(0).unwrap_or("").trim();
    let named_time = TIME_HEADERS.contains(&headers[0].to_ascii_lowercase().as_str());
    let skip = usize::from(named_time || (first.parse::<f64>().is_err() && !is_missing(first)));
    let columns: Vec<String> = headers[skip..].to_vec();
    if columns.is_empty() {
        return Err(NstError::Data(format!(
            "{} has no feature columns",
            path.display()
        )));
    }
    let c = columns.len();

    let mut data = Vec::with_capacity(records.len() * c);
    let mut filled = 0usize;
    for (r, rec) in records.iter().enumerate() {
        // header is line 1
        let line = r + 2;
        if rec.len() != headers.len() {
            return Err(NstError::Data(format!(
                "{}: line {line} has {} fields, expected {}",
                path.display(),
                rec.len(),
                headers.len()
            )));
        }
        for j in 0..c {
            let cell = rec.get(j + skip).unwrap_or("").trim();
            if is_missing(cell) {
                match (options.missing, r) {
                    (MissingPolicy::ForwardFill, r) if r > 0 => {
                        data.push(data[data.len() - c]);
                        filled += 1;
                        continue;
                    }
                    _ => {
                        return Err(NstError::Data(format!(
                            "{}: missing value at line {line}, column {}",
                            path.display(),
                            columns[j]
                        )))
                    }
                }
            }
            let v: f64 = cell.parse().map_err(|_| NstError::Parse {
                path: path.to_path_buf(),
                row: line,
                col: j + skip + 1,
                value: cell.to_string(),
            })?;
            if !v.is_finite() {
                return Err(NstError::Parse {
                    path: path.to_path_buf(),
                    row: line,
                    col: j + skip + 1,
                    value: cell.to_string(),
                });
            }
            data.push(v);
        }
    }
    if filled > 0 {
        log::warn!("{}: forward-filled {filled} missing cells", path.display());
    }
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".into());
    let values = Tensor::new([records.len(), c], data)?;
    Dataset::new(name, values, columns)
}

/// Writes `dataset` with a leading `step` column.
pub fn write_csv(dataset: &Dataset, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["step".to_string()];
    header.extend(dataset.columns.iter().cloned());
    w.write_record(&header)?;
    for t in 0..dataset.len() {
        let mut row = vec![t.to_string()];
        row.extend(dataset.values.row(t).iter().map(|v| v.to_string()));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}
