//! CSV layouts for matrices and sample sets.
//!
//! Matrices are `p` rows of `p` comma-separated values, no header, each
//! value printed with 17 significant digits so doubles round-trip exactly.
//! Sample files start with a `p,n` record followed by `n` rows of `p` values.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array2, ArrayView2};

use crate::data_gen::GroundTruth;
use crate::error::{Error, Result};
use crate::linalg::SymmetricMatrix;

/// 17 significant digits.
pub fn format_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn parse_f64(field: &str) -> Result<f64> {
    field
        .trim()
        .parse::<f64>()
        .map_err(|e| Error::Parse(format!("invalid number {field:?}: {e}")))
}

fn parse_usize(field: &str) -> Result<usize> {
    field
        .trim()
        .parse::<usize>()
        .map_err(|e| Error::Parse(format!("invalid integer {field:?}: {e}")))
}

fn writer<W: Write>(w: W) -> csv::Writer<W> {
    csv::WriterBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_writer(w)
}

fn reader<R: Read>(r: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(r)
}

pub fn write_matrix<W: Write>(w: W, a: ArrayView2<f64>) -> Result<()> {
    let mut wr = writer(w);
    for row in a.rows() {
        wr.write_record(row.iter().map(|&v| format_f64(v)))?;
    }
    wr.flush()?;
    Ok(())
}

pub fn read_matrix<R: Read>(r: R) -> Result<Array2<f64>> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for rec in reader(r).records() {
        let rec = rec?;
        rows.push(rec.iter().map(parse_f64).collect::<Result<_>>()?);
    }
    let p = rows.len();
    if p == 0 || rows.iter().any(|r| r.len() != p) {
        return Err(Error::Parse(format!("expected a square matrix, got {p} rows")));
    }
    Ok(Array2::from_shape_fn((p, p), |(i, j)| rows[i][j]))
}

pub fn write_matrix_file(path: &Path, a: ArrayView2<f64>) -> Result<()> {
    write_matrix(File::create(path)?, a)
}

pub fn read_matrix_file(path: &Path) -> Result<Array2<f64>> {
    read_matrix(File::open(path)?)
}

pub fn read_symmetric_file(path: &Path) -> Result<SymmetricMatrix> {
    SymmetricMatrix::try_from_array(read_matrix_file(path)?)
}

pub fn write_ground_truth(path: &Path, truth: &GroundTruth) -> Result<()> {
    write_matrix_file(path, truth.theta_true.view())
}

pub fn read_ground_truth(path: &Path) -> Result<GroundTruth> {
    GroundTruth::from_precision(read_symmetric_file(path)?)
}

pub fn write_samples<W: Write>(w: W, samples: ArrayView2<f64>) -> Result<()> {
    let (n, p) = samples.dim();
    let mut wr = writer(w);
    wr.write_record([p.to_string(), n.to_string()])?;
    for row in samples.rows() {
        wr.write_record(row.iter().map(|&v| format_f64(v)))?;
    }
    wr.flush()?;
    Ok(())
}

pub fn read_samples<R: Read>(r: R) -> Result<Array2<f64>> {
    let mut records = reader(r).into_records();
    let header = records
        .next()
        .ok_or_else(|| Error::Parse("missing p,n header".into()))??;
    if header.len() != 2 {
        return Err(Error::Parse("header must be `p,n`".into()));
    }
    let (p, n) = (parse_usize(&header[0])?, parse_usize(&header[1])?);
    let mut out = Array2::zeros((n, p));
    let mut count = 0;
    for rec in records {
        let rec = rec?;
        if count >= n || rec.len() != p {
            return Err(Error::Parse(format!(
                "sample row {count} has {} fields, expected {p}",
                rec.len()
            )));
        }
        for (j, f) in rec.iter().enumerate() {
            out[[count, j]] = parse_f64(f)?;
        }
        count += 1;
    }
    if count != n {
        return Err(Error::Parse(format!("expected {n} samples, found {count}")));
    }
    Ok(out)
}

pub fn write_samples_file(path: &Path, samples: ArrayView2<f64>) -> Result<()> {
    write_samples(File::create(path)?, samples)
}

pub fn read_samples_file(path: &Path) -> Result<Array2<f64>> {
    read_samples(File::open(path)?)
}
