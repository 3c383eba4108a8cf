//! Preprocessing of real-world CSV tables into scaled train/valid/test
//! splits.
//!
//! Rows are shuffled and split 85/5/10 first, so imputation values, one-hot
//! vocabularies and min-max statistics come from the train rows alone;
//! valid/test values are clipped into `[0,1]`. `scale_before_split` computes
//! those statistics over all rows instead.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Read;
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::seed::rng_from_seed;

pub const TRAIN_FRACTION: f64 = 0.85;
pub const VALID_FRACTION: f64 = 0.05;
pub const TEST_FRACTION: f64 = 0.10;
pub const MINORITY_THRESHOLD: f64 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Identifier,
    Numeric,
    Ordinal,
    Categorical,
    Nominal,
    Label,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ColumnSpec {
    pub role: Role,
    /// Ordinal levels, lowest first.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub order: Option<Vec<String>>,
    /// Label only: numeric values `>= threshold` become class 1.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threshold: Option<f64>,
    /// Label only: these raw values become class 1, everything else 0.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub positive: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schema {
    pub columns: BTreeMap<String, ColumnSpec>,
    #[serde(default = "default_missing")]
    pub missing: Vec<String>,
}

fn default_missing() -> Vec<String> {
    ["", "?", "NA", "NaN", "nan"].map(String::from).to_vec()
}

impl Schema {
    pub fn from_json(text: &str) -> Result<Self> {
        let schema: Schema = serde_json::from_str(text)?;
        schema.validate()?;
        Ok(schema)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn validate(&self) -> Result<()> {
        let labels = self.columns.values().filter(|c| c.role == Role::Label).count();
        if labels != 1 {
            return Err(Error::invalid(
                "schema.columns",
                format!("exactly one label column required, found {labels}"),
            ));
        }
        for (name, c) in &self.columns {
            let field = format!("schema.columns.{name}");
            if c.role == Role::Ordinal && c.order.as_ref().is_none_or(|o| o.is_empty()) {
                return Err(Error::invalid(field, "ordinal columns need a non-empty `order`"));
            }
            if c.role != Role::Ordinal && c.order.is_some() {
                return Err(Error::invalid(field, "`order` only applies to ordinal columns"));
            }
            if c.role != Role::Label && (c.threshold.is_some() || c.positive.is_some()) {
                return Err(Error::invalid(
                    field,
                    "`threshold`/`positive` only apply to the label column",
                ));
            }
            if c.threshold.is_some() && c.positive.is_some() {
                return Err(Error::invalid(field, "use either `threshold` or `positive`, not both"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessConfig {
    pub seed: u64,
    pub scale_before_split: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingParams {
    pub feature_names: Vec<String>,
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitDataset {
    pub train: Dataset,
    pub valid: Dataset,
    pub test: Dataset,
    pub scaling: ScalingParams,
    pub rebalanced: bool,
}

/// `(train, valid, test)` row counts for `n` rows.
pub fn split_sizes(n: usize) -> (usize, usize, usize) {
    let test = (n as f64 * TEST_FRACTION).floor() as usize;
    let valid = (n as f64 * VALID_FRACTION).floor() as usize;
    (n - test - valid, valid, test)
}

struct Table {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

fn read_table<R: Read>(reader: R) -> Result<Table> {
    let mut rdr = csv::Reader::from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(|h| h.trim().to_string()).collect();
    let mut rows = Vec::new();
    for rec in rdr.records() {
        rows.push(rec?.iter().map(|v| v.trim().to_string()).collect());
    }
    Ok(Table { header, rows })
}

/// Encoder for one input column, fitted on the statistics rows.
enum Encoder {
    Numeric { fill: f64 },
    Ordinal { levels: Vec<String>, fill: f64 },
    OneHot { vocab: Vec<String>, fill: String },
}

impl Encoder {
    fn width(&self) -> usize {
        match self {
            Encoder::OneHot { vocab, .. } => vocab.len(),
            _ => 1,
        }
    }
}

fn parse_number(v: &str, col: &str, row: usize) -> Result<f64> {
    v.parse::<f64>()
        .ok()
        .filter(|x| x.is_finite())
        .ok_or_else(|| Error::InvalidData(format!("column `{col}`, row {row}: `{v}` is not a number")))
}

fn label_of(spec: &ColumnSpec, v: &str, col: &str, row: usize) -> Result<u8> {
    if let Some(pos) = &spec.positive {
        return Ok(u8::from(pos.iter().any(|p| p == v)));
    }
    if let Some(t) = spec.threshold {
        return Ok(u8::from(parse_number(v, col, row)? >= t));
    }
    match v {
        "0" | "0.0" => Ok(0),
        "1" | "1.0" => Ok(1),
        _ => Err(Error::InvalidData(format!(
            "column `{col}`, row {row}: label `{v}` is not binary"
        ))),
    }
}

/// Run the full pipeline on a CSV table.
pub fn preprocess<R: Read>(reader: R, schema: &Schema, config: &PreprocessConfig) -> Result<SplitDataset> {
    schema.validate()?;
    let table = read_table(reader)?;
    for h in &table.header {
        if !schema.columns.contains_key(h) {
            return Err(Error::InvalidData(format!(
                "column `{h}` is not described by the schema"
            )));
        }
    }
    for name in schema.columns.keys() {
        if !table.header.contains(name) {
            return Err(Error::InvalidData(format!(
                "schema column `{name}` is missing from the table"
            )));
        }
    }
    let n = table.rows.len();
    let (n_train, n_valid, _) = split_sizes(n);
    if n_train < 2 {
        return Err(Error::InvalidData(format!("{n} rows are too few to split")));
    }
    let is_missing = |v: &str| schema.missing.iter().any(|m| m == v);

    let label_col = table
        .header
        .iter()
        .position(|h| schema.columns[h].role == Role::Label)
        .expect("validated");
    let label_name = &table.header[label_col];
    let mut labels = Vec::with_capacity(n);
    for (r, row) in table.rows.iter().enumerate() {
        let v = row[label_col].as_str();
        if is_missing(v) {
            return Err(Error::InvalidData(format!(
                "column `{label_name}`, row {r}: missing label"
            )));
        }
        labels.push(label_of(&schema.columns[label_name], v, label_name, r)?);
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng_from_seed(config.seed));
    let (train_idx, rest) = order.split_at(n_train);
    let (valid_idx, test_idx) = rest.split_at(n_valid);
    let stat_rows: Vec<usize> = if config.scale_before_split {
        (0..n).collect()
    } else {
        train_idx.to_vec()
    };

    // Fit one encoder per kept column.
    let mut encoders: Vec<(usize, Encoder)> = Vec::new();
    let mut names = Vec::new();
    for (c, name) in table.header.iter().enumerate() {
        let spec = &schema.columns[name];
        let present = || {
            stat_rows
                .iter()
                .map(|&r| (r, table.rows[r][c].as_str()))
                .filter(|(_, v)| !is_missing(v))
        };
        if table.rows.iter().all(|row| is_missing(&row[c])) && !matches!(spec.role, Role::Identifier | Role::Label) {
            return Err(Error::InvalidData(format!("column `{name}` has no values")));
        }
        let encoder = match spec.role {
            Role::Identifier | Role::Label => continue,
            Role::Numeric => {
                let values: Vec<f64> = present()
                    .map(|(r, v)| parse_number(v, name, r))
                    .collect::<Result<_>>()?;
                if values.is_empty() {
                    return Err(Error::InvalidData(format!(
                        "column `{name}` has no values in the statistics rows"
                    )));
                }
                names.push(name.clone());
                Encoder::Numeric {
                    fill: values.iter().sum::<f64>() / values.len() as f64,
                }
            }
            Role::Ordinal => {
                let levels = spec.order.clone().expect("validated");
                let fill = mode(present().map(|(_, v)| v.to_string())).ok_or_else(|| {
                    Error::InvalidData(format!("column `{name}` has no values in the statistics rows"))
                })?;
                let fill =
                    levels.iter().position(|l| *l == fill).ok_or_else(|| {
                        Error::InvalidData(format!("column `{name}`: `{fill}` is not a declared level"))
                    })? as f64;
                names.push(name.clone());
                Encoder::Ordinal { levels, fill }
            }
            Role::Categorical | Role::Nominal => {
                let vocab: BTreeSet<String> = present().map(|(_, v)| v.to_string()).collect();
                let fill = mode(present().map(|(_, v)| v.to_string())).ok_or_else(|| {
                    Error::InvalidData(format!("column `{name}` has no values in the statistics rows"))
                })?;
                names.extend(vocab.iter().map(|v| format!("{name}={v}")));
                Encoder::OneHot {
                    vocab: vocab.into_iter().collect(),
                    fill,
                }
            }
        };
        encoders.push((c, encoder));
    }
    let width: usize = encoders.iter().map(|(_, e)| e.width()).sum();

    let mut features = Array2::zeros((n, width));
    for (r, row) in table.rows.iter().enumerate() {
        let mut out = features.row_mut(r);
        let mut k = 0;
        for (c, enc) in &encoders {
            let v = row[*c].as_str();
            let name = &table.header[*c];
            match enc {
                Encoder::Numeric { fill } => {
                    out[k] = if is_missing(v) {
                        *fill
                    } else {
                        parse_number(v, name, r)?
                    };
                }
                Encoder::Ordinal { levels, fill } => {
                    out[k] = if is_missing(v) {
                        *fill
                    } else {
                        levels.iter().position(|l| l == v).ok_or_else(|| {
                            Error::InvalidData(format!("column `{name}`, row {r}: `{v}` is not a declared level"))
                        })? as f64
                    };
                }
                Encoder::OneHot { vocab, fill } => {
                    let v = if is_missing(v) { fill.as_str() } else { v };
                    // Unseen categories encode as all zeros.
                    if let Ok(i) = vocab.binary_search_by(|x| x.as_str().cmp(v)) {
                        out[k + i] = 1.0;
                    }
                }
            }
            k += enc.width();
        }
    }

    let mut min = vec![f64::INFINITY; width];
    let mut max = vec![f64::NEG_INFINITY; width];
    for &r in &stat_rows {
        for (j, &v) in features.row(r).iter().enumerate() {
            min[j] = min[j].min(v);
            max[j] = max[j].max(v);
        }
    }
    for mut row in features.rows_mut() {
        for (j, v) in row.iter_mut().enumerate() {
            let span = max[j] - min[j];
            *v = if span > 0.0 {
                ((*v - min[j]) / span).clamp(0.0, 1.0)
            } else {
                0.0
            };
        }
    }

    let all = Dataset::new(features, labels)?;
    let (train, rebalanced) = rebalance(&all.select(train_idx), &mut rng_from_seed(config.seed ^ 0x5eed))?;
    Ok(SplitDataset {
        train,
        valid: all.select(valid_idx),
        test: all.select(test_idx),
        scaling: ScalingParams {
            feature_names: names,
            min,
            max,
        },
        rebalanced,
    })
}

fn mode(values: impl Iterator<Item = String>) -> Option<String> {
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for v in values {
        *counts.entry(v).or_default() += 1;
    }
    // Highest count; ties go to the lexicographically smallest value.
    counts
        .into_iter()
        .fold(None, |best: Option<(String, usize)>, (v, c)| match best {
            Some((_, bc)) if bc >= c => best,
            _ => Some((v, c)),
        })
        .map(|(v, _)| v)
}

/// Oversample the minority class with replacement up to parity when its
/// share is below 25%. Returns whether anything changed.
pub fn rebalance<R: Rng + ?Sized>(data: &Dataset, rng: &mut R) -> Result<(Dataset, bool)> {
    let ones = data.labels.iter().filter(|&&l| l == 1).count();
    let zeros = data.rows() - ones;
    if ones == 0 || zeros == 0 {
        return Err(Error::InvalidData("cannot rebalance single-class data".into()));
    }
    let (minority, count, majority) = if ones < zeros {
        (1u8, ones, zeros)
    } else {
        (0u8, zeros, ones)
    };
    if (count as f64) / (data.rows() as f64) >= MINORITY_THRESHOLD {
        return Ok((data.clone(), false));
    }
    let pool: Vec<usize> = (0..data.rows()).filter(|&i| data.labels[i] == minority).collect();
    let mut idx: Vec<usize> = (0..data.rows()).collect();
    idx.extend((0..majority - count).map(|_| pool[rng.random_range(0..pool.len())]));
    Ok((data.select(&idx), true))
}

impl SplitDataset {
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.train.write_csv(&dir.join("train.csv"))?;
        self.valid.write_csv(&dir.join("valid.csv"))?;
        self.test.write_csv(&dir.join("test.csv"))?;
        let path = dir.join("scaling.json");
        std::fs::write(&path, serde_json::to_string_pretty(&self.scaling)?).map_err(|e| Error::io(&path, e))
    }
}
