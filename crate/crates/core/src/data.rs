//! Labeled tabular data and its CSV form (`f0..f{n-1},label`).

use std::fs::File;
use std::io::Write;
use std::path::Path;

use ndarray::{Array2, ArrayView1, Axis};
use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `[rows × n]`
    pub features: Array2<f64>,
    pub labels: Vec<u8>,
}

impl Dataset {
    pub fn new(features: Array2<f64>, labels: Vec<u8>) -> Result<Self> {
        if features.nrows() != labels.len() {
            return Err(Error::InvalidData(format!(
                "{} feature rows but {} labels",
                features.nrows(),
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l > 1) {
            return Err(Error::InvalidData(format!("label {bad} is not binary")));
        }
        Ok(Self { features, labels })
    }

    pub fn rows(&self) -> usize {
        self.labels.len()
    }

    pub fn n_features(&self) -> usize {
        self.features.ncols()
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.features.row(i)
    }

    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            features: self.features.select(Axis(0), indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// Seeded shuffle, then split off the trailing `holdout_fraction` of rows.
    pub fn shuffle_split<R: Rng + ?Sized>(&self, holdout_fraction: f64, rng: &mut R) -> (Self, Self) {
        let mut idx: Vec<usize> = (0..self.rows()).collect();
        idx.shuffle(rng);
        let holdout = ((self.rows() as f64 * holdout_fraction).round() as usize).clamp(1, self.rows() - 1);
        let (train, test) = idx.split_at(self.rows() - holdout);
        (self.select(train), self.select(test))
    }

    pub fn to_csv_string(&self) -> String {
        let mut out = String::new();
        let header: Vec<String> = (0..self.n_features()).map(|i| format!("f{i}")).collect();
        out.push_str(&header.join(","));
        out.push_str(",label\n");
        for (row, label) in self.features.rows().into_iter().zip(&self.labels) {
            for v in row {
                out.push_str(&format!("{v},"));
            }
            out.push_str(&format!("{label}\n"));
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_csv_string().as_bytes())
            .map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::from_reader(file)
    }

    pub fn from_reader<R: std::io::Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(reader);
        let headers = rdr.headers()?.clone();
        if headers.iter().next_back() != Some("label") {
            return Err(Error::InvalidData("last column must be `label`".into()));
        }
        let n = headers.len() - 1;
        let mut values = Vec::new();
        let mut labels = Vec::new();
        for (line, record) in rdr.records().enumerate() {
            let record = record?;
            for (col, field) in record.iter().enumerate() {
                let parsed: f64 = field
                    .trim()
                    .parse()
                    .map_err(|_| Error::InvalidData(format!("row {line}, column {col}: `{field}` is not a number")))?;
                if col < n {
                    values.push(parsed);
                } else if parsed == 0.0 || parsed == 1.0 {
                    labels.push(parsed as u8);
                } else {
                    return Err(Error::InvalidData(format!("row {line}: label `{field}` is not binary")));
                }
            }
        }
        let features =
            Array2::from_shape_vec((labels.len(), n), values).map_err(|e| Error::InvalidData(e.to_string()))?;
        Self::new(features, labels)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn csv_round_trip_is_exact() {
        let ds = Dataset::new(array![[0.1, 1.0 / 3.0], [1e-17, 0.0]], vec![0, 1]).unwrap();
        let text = ds.to_csv_string();
        assert!(text.starts_with("f0,f1,label\n"));
        let back = Dataset::from_reader(text.as_bytes()).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn rejects_non_binary_label() {
        assert!(Dataset::from_reader("f0,label\n0.5,2\n".as_bytes()).is_err());
    }
}
