//! Observed sample `(Y, D, Z, X)` and its CSV representation.
//!
//! The on-disk layout is a comma separated file with the header
//! `y,d,z,x1[,x2,...]`, `.` as decimal separator and no missing values.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// Outcomes.
    pub y: Vec<f64>,
    /// Treatment indicator, 0 or 1.
    pub d: Vec<f64>,
    /// Instrument indicator, 0 or 1.
    pub z: Vec<f64>,
    /// Covariates, one row per unit (no intercept column).
    pub x: DMatrix<f64>,
}

impl Dataset {
    pub fn new(y: Vec<f64>, d: Vec<f64>, z: Vec<f64>, x: DMatrix<f64>) -> Result<Self> {
        let n = y.len();
        if d.len() != n || z.len() != n || x.nrows() != n {
            return Err(Error::Input(format!(
                "length mismatch: y={}, d={}, z={}, x rows={}",
                n,
                d.len(),
                z.len(),
                x.nrows()
            )));
        }
        if n < 2 {
            return Err(Error::Input(format!(
                "need at least 2 observations, got {n}"
            )));
        }
        if x.ncols() == 0 {
            return Err(Error::Input(
                "at least one covariate column is required".into(),
            ));
        }
        for (name, v) in [("d", &d), ("z", &z)] {
            if let Some(i) = v.iter().position(|&t| t != 0.0 && t != 1.0) {
                return Err(Error::Input(format!(
                    "{name}[{i}] = {} is not binary",
                    v[i]
                )));
            }
        }
        if let Some(i) = y.iter().position(|t| !t.is_finite()) {
            return Err(Error::Input(format!("y[{i}] is not finite")));
        }
        if x.iter().any(|t| !t.is_finite()) {
            return Err(Error::Input("covariates contain non-finite values".into()));
        }
        let n_z1 = z.iter().filter(|&&t| t == 1.0).count();
        if n_z1 == 0 || n_z1 == n {
            return Err(Error::Degenerate(format!(
                "both instrument arms must be nonempty ({n_z1} of {n} have z = 1)"
            )));
        }
        Ok(Self { y, d, z, x })
    }

    /// Convenience constructor for a single covariate.
    pub fn from_columns(y: Vec<f64>, d: Vec<f64>, z: Vec<f64>, x1: Vec<f64>) -> Result<Self> {
        let n = x1.len();
        Self::new(y, d, z, DMatrix::from_vec(n, 1, x1))
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn n_covariates(&self) -> usize {
        self.x.ncols()
    }

    /// Number of units with `Z = 1`.
    pub fn n_instrumented(&self) -> usize {
        self.z.iter().filter(|&&t| t == 1.0).count()
    }

    /// Same sample with the outcome replaced.
    pub fn with_outcome(&self, y: Vec<f64>) -> Result<Self> {
        Self::new(y, self.d.clone(), self.z.clone(), self.x.clone())
    }

    /// Relabels the instrument arms, `Z -> 1 - Z`.
    pub fn flip_instrument(&self) -> Self {
        let mut out = self.clone();
        out.z.iter_mut().for_each(|t| *t = 1.0 - *t);
        out
    }

    /// Relabels the treatment arms, `D -> 1 - D`.
    pub fn flip_treatment(&self) -> Self {
        let mut out = self.clone();
        out.d.iter_mut().for_each(|t| *t = 1.0 - *t);
        out
    }

    /// Reorders rows so that row `k` of the result is row `perm[k]` of `self`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let x = DMatrix::from_fn(self.n(), self.n_covariates(), |i, j| self.x[(perm[i], j)]);
        Self {
            y: perm.iter().map(|&i| self.y[i]).collect(),
            d: perm.iter().map(|&i| self.d[i]).collect(),
            z: perm.iter().map(|&i| self.z[i]).collect(),
            x,
        }
    }

    /// First `n` rows.
    pub fn head(&self, n: usize) -> Result<Self> {
        Self::new(
            self.y[..n].to_vec(),
            self.d[..n].to_vec(),
            self.z[..n].to_vec(),
            self.x.rows(0, n).into_owned(),
        )
    }

    pub fn read_csv_path(path: impl AsRef<Path>) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Self::read_csv(file)
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(true)
            .from_reader(reader);
        let header: Vec<String> = rdr
            .headers()?
            .iter()
            .map(|h| h.trim().to_string())
            .collect();
        check_header(&header)?;
        let r = header.len() - 3;

        let (mut y, mut d, mut z) = (Vec::new(), Vec::new(), Vec::new());
        let mut x = Vec::new();
        for record in rdr.records() {
            let record = record?;
            let line = record.position().map(|p| p.line()).unwrap_or(0);
            if record.len() != header.len() {
                return Err(Error::Parse {
                    line,
                    column: "-".into(),
                    message: format!("expected {} fields, found {}", header.len(), record.len()),
                });
            }
            let mut values = Vec::with_capacity(header.len());
            for (field, name) in record.iter().zip(&header) {
                values.push(parse_field(field, name, line)?);
            }
            for (k, name) in ["d", "z"].iter().enumerate() {
                let v = values[k + 1];
                if v != 0.0 && v != 1.0 {
                    return Err(Error::Parse {
                        line,
                        column: (*name).into(),
                        message: format!("value {v} is not 0 or 1"),
                    });
                }
            }
            y.push(values[0]);
            d.push(values[1]);
            z.push(values[2]);
            x.extend_from_slice(&values[3..]);
        }
        let n = y.len();
        Self::new(y, d, z, DMatrix::from_row_slice(n, r, &x))
    }

    pub fn write_csv_path(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = std::fs::File::create(path)?;
        self.write_csv(file)
    }

    /// Writes with shortest round-trip float formatting, so reading the file
    /// back reproduces every value bit for bit.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        let mut header = vec!["y".to_string(), "d".into(), "z".into()];
        header.extend((1..=self.n_covariates()).map(|j| format!("x{j}")));
        wtr.write_record(&header)?;
        for i in 0..self.n() {
            let mut row = vec![fmt_num(self.y[i]), fmt_num(self.d[i]), fmt_num(self.z[i])];
            row.extend((0..self.n_covariates()).map(|j| fmt_num(self.x[(i, j)])));
            wtr.write_record(&row)?;
        }
        wtr.flush()?;
        Ok(())
    }
}

fn fmt_num(v: f64) -> String {
    format!("{v}")
}

fn check_header(header: &[String]) -> Result<()> {
    let bad = |msg: String| Error::Parse {
        line: 1,
        column: "header".into(),
        message: msg,
    };
    if header.len() < 4 {
        return Err(bad(format!(
            "expected header y,d,z,x1[,x2,...], found {}",
            header.join(",")
        )));
    }
    for (k, want) in ["y", "d", "z"].iter().enumerate() {
        if header[k] != *want {
            return Err(bad(format!(
                "column {} must be '{want}', found '{}'",
                k + 1,
                header[k]
            )));
        }
    }
    for (j, name) in header[3..].iter().enumerate() {
        let want = format!("x{}", j + 1);
        if *name != want {
            return Err(bad(format!(
                "column {} must be '{want}', found '{name}'",
                j + 4
            )));
        }
    }
    Ok(())
}

fn parse_field(field: &str, column: &str, line: u64) -> Result<f64> {
    let trimmed = field.trim();
    if trimmed.is_empty() {
        return Err(Error::Parse {
            line,
            column: column.into(),
            message: "missing value".into(),
        });
    }
    let v: f64 = trimmed.parse().map_err(|_| Error::Parse {
        line,
        column: column.into(),
        message: format!("cannot parse '{trimmed}' as a number"),
    })?;
    if !v.is_finite() {
        return Err(Error::Parse {
            line,
            column: column.into(),
            message: format!("value '{trimmed}' is not finite"),
        });
    }
    Ok(v)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> Dataset {
        Dataset::from_columns(
            vec![1.5, 0.0, -2.25, 3.0],
            vec![1.0, 0.0, 1.0, 0.0],
            vec![1.0, 1.0, 0.0, 0.0],
            vec![0.6, -0.7, 0.123456789012345, -0.99],
        )
        .unwrap()
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let data = toy();
        let mut buf = Vec::new();
        data.write_csv(&mut buf).unwrap();
        let back = Dataset::read_csv(buf.as_slice()).unwrap();
        assert_eq!(back, data);
    }

    #[test]
    fn non_binary_instrument_names_line_and_column() {
        let text = "y,d,z,x1\n1,1,0,0.5\n0,0,2,0.7\n";
        let err = Dataset::read_csv(text.as_bytes()).unwrap_err();
        assert_eq!(err.exit_code(), 1);
        let msg = err.to_string();
        assert!(msg.contains("line 3"), "{msg}");
        assert!(msg.contains("column z"), "{msg}");
    }

    #[test]
    fn missing_value_is_rejected() {
        let text = "y,d,z,x1\n1,1,1,0.5\n0,0,0,\n";
        let err = Dataset::read_csv(text.as_bytes()).unwrap_err();
        assert!(err.to_string().contains("missing value"));
    }

    #[test]
    fn bad_header_is_rejected() {
        let text = "y,z,d,x1\n1,1,1,0.5\n";
        assert!(Dataset::read_csv(text.as_bytes()).is_err());
    }

    #[test]
    fn single_instrument_arm_is_degenerate() {
        let err = Dataset::from_columns(
            vec![0.0; 3],
            vec![0.0; 3],
            vec![1.0; 3],
            vec![0.1, 0.2, 0.3],
        )
        .unwrap_err();
        assert!(matches!(err, Error::Degenerate(_)));
    }
}
