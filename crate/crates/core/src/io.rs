//! CSV readers and writers.
//!
//! Every matrix file uses the header `u_1,...,u_{n_u},b_1,...,b_{n_b}`,
//! one row per line, values printed with 17 significant digits so that a
//! write/read cycle is lossless.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use nalgebra::DMatrix;

use crate::covariance::ResidualMatrix;
use crate::error::{ReconError, Result};
use crate::hierarchy::SampleCloud;

pub fn series_header(n_u: usize, n_b: usize) -> Vec<String> {
    (1..=n_u)
        .map(|i| format!("u_{i}"))
        .chain((1..=n_b).map(|i| format!("b_{i}")))
        .collect()
}

/// Scientific notation with 17 significant digits.
pub fn format_value(v: f64) -> String {
    format!("{v:.16e}")
}

/// Counts `(n_u, n_b)` from a header and checks the canonical order.
pub fn parse_header(header: &[String]) -> Result<(usize, usize)> {
    let n_u = header.iter().take_while(|h| h.starts_with("u_")).count();
    let n_b = header.len() - n_u;
    if header != series_header(n_u, n_b).as_slice() {
        return Err(ReconError::InvalidInput(format!(
            "header {header:?} does not follow u_1..u_nu,b_1..b_nb"
        )));
    }
    Ok((n_u, n_b))
}

pub fn write_matrix<W: Write>(writer: W, header: &[String], m: &DMatrix<f64>) -> Result<()> {
    if header.len() != m.ncols() {
        return Err(ReconError::DimensionMismatch {
            context: "csv header",
            expected: m.ncols(),
            got: header.len(),
        });
    }
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(header)?;
    for i in 0..m.nrows() {
        w.write_record(m.row(i).iter().map(|v| format_value(*v)))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_matrix<R: Read>(reader: R) -> Result<(Vec<String>, DMatrix<f64>)> {
    let mut r = csv::Reader::from_reader(reader);
    let header: Vec<String> = r.headers()?.iter().map(|h| h.trim().to_string()).collect();
    let mut values = Vec::new();
    let mut rows = 0;
    for (i, record) in r.records().enumerate() {
        let record = record?;
        if record.len() != header.len() {
            return Err(ReconError::InvalidInput(format!(
                "line {} has {} fields, expected {}",
                i + 2,
                record.len(),
                header.len()
            )));
        }
        for (j, field) in record.iter().enumerate() {
            let v: f64 = field.trim().parse().map_err(|_| {
                ReconError::InvalidInput(format!("line {}, column {}: cannot parse `{field}`", i + 2, j + 1))
            })?;
            values.push(v);
        }
        rows += 1;
    }
    Ok((header.clone(), DMatrix::from_row_slice(rows, header.len(), &values)))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    Ok(BufWriter::new(File::create(path)?))
}

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| ReconError::Config(format!("cannot open {}: {e}", path.display())))
}

/// Writes a matrix with the standard series header.
pub fn write_series_csv(path: &Path, n_u: usize, m: &DMatrix<f64>) -> Result<()> {
    if n_u > m.ncols() {
        return Err(ReconError::InvalidInput("n_u exceeds column count".into()));
    }
    write_matrix(create(path)?, &series_header(n_u, m.ncols() - n_u), m)
}

/// Reads a matrix with the standard series header; returns `n_u` too.
pub fn read_series_csv(path: &Path) -> Result<(usize, DMatrix<f64>)> {
    let (header, m) = read_matrix(open(path)?).map_err(|e| e.context(path.display().to_string()))?;
    let (n_u, _) = parse_header(&header).map_err(|e| e.context(path.display().to_string()))?;
    Ok((n_u, m))
}

pub fn write_cloud(path: &Path, n_u: usize, cloud: &SampleCloud) -> Result<()> {
    write_series_csv(path, n_u, cloud.samples())
}

pub fn read_cloud(path: &Path) -> Result<(usize, SampleCloud)> {
    let (n_u, m) = read_series_csv(path)?;
    Ok((
        n_u,
        SampleCloud::new(m).map_err(|e| e.context(path.display().to_string()))?,
    ))
}

pub fn write_residuals(path: &Path, n_u: usize, r: &ResidualMatrix) -> Result<()> {
    write_series_csv(path, n_u, r.matrix())
}

pub fn read_residuals(path: &Path) -> Result<(usize, ResidualMatrix)> {
    let (n_u, m) = read_series_csv(path)?;
    Ok((
        n_u,
        ResidualMatrix::new(m).map_err(|e| e.context(path.display().to_string()))?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout() {
        assert_eq!(series_header(1, 2), vec!["u_1", "b_1", "b_2"]);
        let h: Vec<String> = ["u_1", "u_2", "b_1"].iter().map(|s| s.to_string()).collect();
        assert_eq!(parse_header(&h).unwrap(), (2, 1));
        let bad: Vec<String> = ["b_1", "u_1"].iter().map(|s| s.to_string()).collect();
        assert!(parse_header(&bad).is_err());
    }

    #[test]
    fn values_round_trip_exactly() {
        let m = DMatrix::from_row_slice(2, 3, &[0.1, -1.0 / 3.0, 1e-300, f64::MAX, 123456.789, -0.0]);
        let mut buf = Vec::new();
        write_matrix(&mut buf, &series_header(1, 2), &m).unwrap();
        let (h, back) = read_matrix(buf.as_slice()).unwrap();
        assert_eq!(h, series_header(1, 2));
        for (a, b) in m.iter().zip(back.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn ragged_and_garbage_rejected() {
        assert!(read_matrix("u_1,b_1\n1,2\n3\n".as_bytes()).is_err());
        assert!(read_matrix("u_1,b_1\n1,abc\n".as_bytes()).is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("nested/cloud.csv");
        let cloud = SampleCloud::from_rows(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]).unwrap();
        write_cloud(&path, 1, &cloud).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("u_1,b_1,b_2\n1.0000000000000000e0,"));
        let (n_u, back) = read_cloud(&path).unwrap();
        assert_eq!(n_u, 1);
        assert_eq!(back, cloud);
    }

    proptest::proptest! {
        #[test]
        fn any_finite_value_round_trips(v in proptest::num::f64::NORMAL | proptest::num::f64::SUBNORMAL | proptest::num::f64::ZERO) {
            let parsed: f64 = format_value(v).parse().unwrap();
            proptest::prop_assert_eq!(parsed.to_bits(), v.to_bits());
        }
    }
}
