//! Estimation datasets: an outcome, an exposure and a matrix of candidate
//! instruments, plus CSV ingestion and write-back.
//!
//! The CSV dialect is deliberately narrow: comma separated, a mandatory header
//! row, `.` as the decimal point and unquoted numeric fields. Columns are bound
//! by header name only.

use std::collections::HashSet;
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};

/// Observations `(y_i, d_i, z_i)` for `i = 1..n`.
///
/// Instruments are stored as reals in row-major order. Binary `{0,1}` coding is
/// the canonical case but nothing downstream requires it.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    y: Vec<f64>,
    d: Vec<f64>,
    z: Vec<f64>,
    p: usize,
    instrument_names: Option<Vec<String>>,
}

/// Which invariant a [`Violation`] breaks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationKind {
    TooFewRows,
    LengthMismatch,
    NonFinite,
    ConstantInstrument,
    NonBinary,
    NameCount,
}

impl fmt::Display for ViolationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ViolationKind::TooFewRows => "too few rows",
            ViolationKind::LengthMismatch => "length mismatch",
            ViolationKind::NonFinite => "non-finite value",
            ViolationKind::ConstantInstrument => "constant instrument",
            ViolationKind::NonBinary => "non-binary instrument",
            ViolationKind::NameCount => "instrument name count",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Violation {
    pub kind: ViolationKind,
    /// Column label (`y`, `d` or the instrument name), when applicable.
    pub column: Option<String>,
    /// Zero-based row, when applicable.
    pub row: Option<usize>,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.kind)?;
        match (&self.column, self.row) {
            (Some(c), Some(r)) => write!(f, " in column `{c}` at row {r}"),
            (Some(c), None) => write!(f, " in column `{c}`"),
            (None, Some(r)) => write!(f, " at row {r}"),
            (None, None) => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ValidateOptions {
    /// Additionally require every instrument value to be exactly 0 or 1.
    pub require_binary: bool,
}

impl Dataset {
    /// Builds a dataset and rejects it unless every invariant holds.
    pub fn new(y: Vec<f64>, d: Vec<f64>, z: Vec<f64>, p: usize, instrument_names: Option<Vec<String>>) -> Result<Self> {
        let ds = Self::from_parts(y, d, z, p, instrument_names)?;
        let report = ds.validate();
        if let Some(first) = report.first() {
            return Err(Error::InvalidData(if report.len() == 1 {
                first.to_string()
            } else {
                format!("{first} (and {} more violations)", report.len() - 1)
            }));
        }
        Ok(ds)
    }

    /// Assembles a dataset checking only that the buffer shapes agree. Use
    /// [`Dataset::validate`] to inspect the remaining invariants.
    pub fn from_parts(
        y: Vec<f64>,
        d: Vec<f64>,
        z: Vec<f64>,
        p: usize,
        instrument_names: Option<Vec<String>>,
    ) -> Result<Self> {
        let n = y.len();
        if d.len() != n {
            return Err(Error::Dimension {
                context: "data: exposure length",
                expected: n,
                got: d.len(),
            });
        }
        if z.len() != n * p {
            return Err(Error::Dimension {
                context: "data: instrument buffer",
                expected: n * p,
                got: z.len(),
            });
        }
        Ok(Self {
            y,
            d,
            z,
            p,
            instrument_names,
        })
    }

    /// Builds a dataset from per-row instrument vectors.
    pub fn from_rows(y: Vec<f64>, d: Vec<f64>, rows: &[Vec<f64>]) -> Result<Self> {
        let p = rows.first().map_or(0, Vec::len);
        let mut z = Vec::with_capacity(rows.len() * p);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != p {
                return Err(Error::InvalidData(format!(
                    "length mismatch: instrument row {i} has {} entries, expected {p}",
                    row.len()
                )));
            }
            z.extend_from_slice(row);
        }
        Self::new(y, d, z, p, None)
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn d(&self) -> &[f64] {
        &self.d
    }

    /// Row-major `n x p` instrument buffer.
    pub fn z(&self) -> &[f64] {
        &self.z
    }

    pub fn z_row(&self, i: usize) -> &[f64] {
        &self.z[i * self.p..(i + 1) * self.p]
    }

    pub fn z_col(&self, j: usize) -> impl Iterator<Item = f64> + Clone + '_ {
        self.z.iter().skip(j).step_by(self.p.max(1)).copied()
    }

    pub fn instrument_names(&self) -> Option<&[String]> {
        self.instrument_names.as_deref()
    }

    pub fn instrument_label(&self, j: usize) -> String {
        self.instrument_names
            .as_ref()
            .and_then(|names| names.get(j).cloned())
            .unwrap_or_else(|| format!("z{}", j + 1))
    }

    /// Returns a copy with the outcome replaced.
    pub fn with_outcome(&self, y: Vec<f64>) -> Result<Self> {
        Self::new(y, self.d.clone(), self.z.clone(), self.p, self.instrument_names.clone())
    }

    /// Returns a copy with the exposure replaced.
    pub fn with_exposure(&self, d: Vec<f64>) -> Result<Self> {
        Self::new(self.y.clone(), d, self.z.clone(), self.p, self.instrument_names.clone())
    }

    pub fn validate(&self) -> Vec<Violation> {
        self.validate_with(ValidateOptions::default())
    }

    /// Lists every violated invariant. An empty report means the dataset is
    /// usable for estimation.
    pub fn validate_with(&self, opts: ValidateOptions) -> Vec<Violation> {
        let mut out = Vec::new();
        let n = self.n();
        if n < 2 {
            out.push(Violation {
                kind: ViolationKind::TooFewRows,
                column: None,
                row: None,
            });
        }
        if let Some(names) = &self.instrument_names {
            if names.len() != self.p {
                out.push(Violation {
                    kind: ViolationKind::NameCount,
                    column: None,
                    row: None,
                });
            }
        }
        for (label, col) in [("y", &self.y), ("d", &self.d)] {
            if let Some(i) = col.iter().position(|v| !v.is_finite()) {
                out.push(Violation {
                    kind: ViolationKind::NonFinite,
                    column: Some(label.to_string()),
                    row: Some(i),
                });
            }
        }
        for j in 0..self.p {
            let label = self.instrument_label(j);
            if let Some(i) = self.z_col(j).position(|v| !v.is_finite()) {
                out.push(Violation {
                    kind: ViolationKind::NonFinite,
                    column: Some(label),
                    row: Some(i),
                });
                continue;
            }
            if n >= 2 && sample_variance(self.z_col(j)) <= 0.0 {
                out.push(Violation {
                    kind: ViolationKind::ConstantInstrument,
                    column: Some(label.clone()),
                    row: None,
                });
            }
            if opts.require_binary {
                if let Some(i) = self.z_col(j).position(|v| v != 0.0 && v != 1.0) {
                    out.push(Violation {
                        kind: ViolationKind::NonBinary,
                        column: Some(label),
                        row: Some(i),
                    });
                }
            }
        }
        out
    }

    /// Writes the dataset as CSV with header `outcome,exposure,<instruments>`.
    ///
    /// Values use the shortest decimal representation that parses back to the
    /// same `f64`, so [`load_csv`] reproduces them bit for bit.
    pub fn write_csv<W: Write>(&self, writer: W, outcome: &str, exposure: &str) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec![outcome.to_string(), exposure.to_string()];
        header.extend((0..self.p).map(|j| self.instrument_label(j)));
        w.write_record(&header).map_err(csv_err)?;
        let mut record = Vec::with_capacity(self.p + 2);
        for i in 0..self.n() {
            record.clear();
            record.push(self.y[i].to_string());
            record.push(self.d[i].to_string());
            record.extend(self.z_row(i).iter().map(f64::to_string));
            w.write_record(&record).map_err(csv_err)?;
        }
        w.flush().map_err(|e| Error::Csv(e.to_string()))?;
        Ok(())
    }
}

fn sample_variance(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let (count, sum) = values.clone().fold((0usize, 0.0), |(c, s), v| (c + 1, s + v));
    if count < 2 {
        return 0.0;
    }
    let mean = sum / count as f64;
    values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / (count - 1) as f64
}

fn csv_err(e: csv::Error) -> Error {
    Error::Csv(e.to_string())
}

/// Reads a dataset from a CSV file, binding columns by header name.
pub fn load_csv(
    path: impl AsRef<Path>,
    outcome_col: &str,
    exposure_col: &str,
    instrument_cols: &[String],
) -> Result<Dataset> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    read_csv(file, outcome_col, exposure_col, instrument_cols)
}

/// Column names from the header row of a CSV file.
pub fn read_header(path: impl AsRef<Path>) -> Result<Vec<String>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .quoting(false)
        .trim(csv::Trim::All)
        .from_reader(file);
    Ok(rdr.headers().map_err(csv_err)?.iter().map(str::to_string).collect())
}

/// Reads a dataset from any CSV source. See [`load_csv`].
pub fn read_csv<R: Read>(
    reader: R,
    outcome_col: &str,
    exposure_col: &str,
    instrument_cols: &[String],
) -> Result<Dataset> {
    let mut selected: Vec<&str> = vec![outcome_col, exposure_col];
    selected.extend(instrument_cols.iter().map(String::as_str));
    let mut seen = HashSet::new();
    for name in &selected {
        if !seen.insert(*name) {
            return Err(Error::DuplicateColumn(name.to_string()));
        }
    }

    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .quoting(false)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr.headers().map_err(csv_err)?.clone();
    let positions = selected
        .iter()
        .map(|name| {
            headers
                .iter()
                .position(|h| h == *name)
                .ok_or_else(|| Error::MissingColumn(name.to_string()))
        })
        .collect::<Result<Vec<_>>>()?;

    let p = instrument_cols.len();
    let (mut y, mut d, mut z) = (Vec::new(), Vec::new(), Vec::new());
    for (row, record) in rdr.records().enumerate() {
        let record = record.map_err(csv_err)?;
        for (slot, (&pos, name)) in positions.iter().zip(&selected).enumerate() {
            let raw = record.get(pos).unwrap_or("");
            let value = raw
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::BadCell {
                    // one-based data row, header excluded
                    row: row + 1,
                    column: name.to_string(),
                    value: raw.to_string(),
                })?;
            match slot {
                0 => y.push(value),
                1 => d.push(value),
                _ => z.push(value),
            }
        }
    }
    Dataset::new(y, d, z, p, Some(instrument_cols.to_vec()))
}
