//! CSV matrices and activity filtering.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::dense::DenseMatrix;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("row {row}, column {col}: cannot parse {value:?} as a number")]
    Parse { row: usize, col: usize, value: String },
    #[error("row {row}, column {col}: value is not finite")]
    NonFinite { row: usize, col: usize },
    #[error("row {row} has {found} fields, expected {expected}")]
    RaggedRows { row: usize, expected: usize, found: usize },
    #[error("no numeric rows")]
    Empty,
    #[error("every column falls below the activity threshold {threshold}")]
    AllColumnsDropped { threshold: f64 },
    #[error("activity threshold must lie in [0, 1], got {0}")]
    InvalidThreshold(f64),
}

/// Reads a rectangular numeric CSV file. See [`parse_csv_matrix`].
pub fn load_csv_matrix(path: impl AsRef<Path>) -> Result<DenseMatrix, IngestError> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|source| IngestError::Io {
        path: path.to_owned(),
        source,
    })?;
    parse_csv_matrix(file)
}

/// Parses a rectangular numeric CSV. A first row with any non-numeric cell
/// is taken as a header and skipped. Positions in errors are 1-based and
/// count the header row.
pub fn parse_csv_matrix(reader: impl Read) -> Result<DenseMatrix, IngestError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut data = Vec::new();
    let mut width = None;
    let mut rows = 0;
    for (idx, record) in rdr.records().enumerate() {
        let record = record?;
        let row = idx + 1;
        if record.iter().all(|c| c.is_empty()) {
            continue;
        }
        if row == 1 && record.iter().any(|c| c.parse::<f64>().is_err()) {
            width = Some(record.len());
            continue;
        }
        let expected = *width.get_or_insert(record.len());
        if record.len() != expected {
            return Err(IngestError::RaggedRows {
                row,
                expected,
                found: record.len(),
            });
        }
        for (c, cell) in record.iter().enumerate() {
            let v: f64 = cell.parse().map_err(|_| IngestError::Parse {
                row,
                col: c + 1,
                value: cell.to_owned(),
            })?;
            if !v.is_finite() {
                return Err(IngestError::NonFinite { row, col: c + 1 });
            }
            data.push(v);
        }
        rows += 1;
    }
    let cols = width.filter(|_| rows > 0).ok_or(IngestError::Empty)?;
    Ok(DenseMatrix::from_row_major(rows, cols, data).expect("finite values checked"))
}

/// Writes `m` as CSV with an optional header row. Values use the shortest
/// representation that round-trips.
pub fn write_csv_matrix(m: &DenseMatrix, out: impl Write, header: Option<&[String]>) -> Result<(), IngestError> {
    let mut w = csv::Writer::from_writer(out);
    if let Some(h) = header {
        w.write_record(h)?;
    }
    for r in 0..m.rows() {
        w.write_record(m.row(r).iter().map(|v| v.to_string()))?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

/// Keeps the columns whose fraction of nonzero entries is at least
/// `min_fraction`; returns the filtered matrix and the kept column indices.
pub fn preprocess_activity(m: &DenseMatrix, min_fraction: f64) -> Result<(DenseMatrix, Vec<usize>), IngestError> {
    if !(0.0..=1.0).contains(&min_fraction) {
        return Err(IngestError::InvalidThreshold(min_fraction));
    }
    let rows = m.rows();
    let kept: Vec<usize> = (0..m.cols())
        .filter(|&c| {
            let active = (0..rows).filter(|&r| m[(r, c)] != 0.0).count();
            active as f64 >= min_fraction * rows as f64
        })
        .collect();
    if kept.is_empty() {
        return Err(IngestError::AllColumnsDropped { threshold: min_fraction });
    }
    let mut out = DenseMatrix::zeros(rows, kept.len());
    for r in 0..rows {
        for (j, &c) in kept.iter().enumerate() {
            out[(r, j)] = m[(r, c)];
        }
    }
    Ok((out, kept))
}

/// Scales every column to unit root-mean-square; zero columns are left alone.
pub fn scale_columns(m: &DenseMatrix) -> DenseMatrix {
    let mut out = m.clone();
    for c in 0..m.cols() {
        let rms = ((0..m.rows()).map(|r| m[(r, c)] * m[(r, c)]).sum::<f64>() / m.rows() as f64).sqrt();
        if rms > 0.0 {
            for r in 0..m.rows() {
                out[(r, c)] /= rms;
            }
        }
    }
    out
}
