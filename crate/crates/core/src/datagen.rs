//! Multi-distribution synthetic classification tasks, the linear
//! separability filter applied to λ-net corpora, and query-point sampling for
//! sample-based distillation.
//!
//! Each feature picks one family out of uniform, normal, gamma, beta and
//! Poisson, draws two random parametrizations, fills the first `M0` rows from
//! the first and the remaining rows from the second, and is min-max scaled to
//! `[0, 1]`. The first `⌈M/2⌉` rows are class 0, the rest class 1.

use std::path::Path;

use ndarray::{Array2, ArrayViewMut1};
use rand::Rng;
use rand_distr::{Beta, Distribution, Gamma, Normal, Poisson, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::seed::rng_from_seed;

/// Lower bound for sampled distribution parameters; several families need
/// strictly positive parameters.
pub const PARAM_FLOOR: f64 = 0.05;
/// Default upper bound `p` for sampled distribution parameters.
pub const DEFAULT_PARAM_MAX: f64 = 5.0;
pub const DEFAULT_QUERY_COUNT: usize = 10_000;
pub const PERCEPTRON_EPOCHS: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistributionKind {
    Uniform,
    Normal,
    Gamma,
    Beta,
    Poisson,
}

impl DistributionKind {
    pub const ALL: [DistributionKind; 5] = [
        DistributionKind::Uniform,
        DistributionKind::Normal,
        DistributionKind::Gamma,
        DistributionKind::Beta,
        DistributionKind::Poisson,
    ];

    pub fn param_count(self) -> usize {
        match self {
            DistributionKind::Poisson => 1,
            _ => 2,
        }
    }
}

/// A family plus its parameters: uniform (min, max), normal (mean, std),
/// gamma (shape, scale), beta (α, β), Poisson (λ).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistributionSpec {
    pub kind: DistributionKind,
    pub p1: f64,
    pub p2: Option<f64>,
}

impl DistributionSpec {
    pub fn new(kind: DistributionKind, p1: f64, p2: Option<f64>) -> Result<Self> {
        let spec = Self { kind, p1, p2 };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |reason: &str| Err(Error::invalid(format!("{:?}", self.kind).to_lowercase(), reason));
        match (self.kind.param_count(), self.p2) {
            (1, Some(_)) => return bad("takes exactly one parameter"),
            (2, None) => return bad("takes two parameters"),
            _ => {}
        }
        if !self.p1.is_finite() || self.p2.is_some_and(|v| !v.is_finite()) {
            return bad("parameters must be finite");
        }
        let p2 = self.p2.unwrap_or(0.0);
        match self.kind {
            DistributionKind::Uniform if p2 < self.p1 => bad("minimum exceeds maximum"),
            DistributionKind::Normal if p2 <= 0.0 => bad("scale must be positive"),
            DistributionKind::Gamma if self.p1 <= 0.0 || p2 <= 0.0 => bad("shape and scale must be positive"),
            DistributionKind::Beta if self.p1 <= 0.0 || p2 <= 0.0 => bad("alpha and beta must be positive"),
            DistributionKind::Poisson if self.p1 <= 0.0 => bad("lambda must be positive"),
            _ => Ok(()),
        }
    }

    /// Random parametrization with every parameter in `[PARAM_FLOOR, p_max)`.
    pub fn random<R: Rng + ?Sized>(kind: DistributionKind, p_max: f64, rng: &mut R) -> Self {
        let mut draw = || rng.random_range(PARAM_FLOOR..p_max);
        let mut p1 = draw();
        let mut p2 = (kind.param_count() == 2).then(&mut draw);
        if kind == DistributionKind::Uniform {
            if let Some(hi) = p2.as_mut() {
                if *hi < p1 {
                    std::mem::swap(hi, &mut p1);
                }
            }
        }
        Self { kind, p1, p2 }
    }

    fn draw_into<R: Rng + ?Sized>(&self, out: &mut [f64], rng: &mut R) -> Result<()> {
        self.validate()?;
        let p2 = self.p2.unwrap_or(0.0);
        let fail = |e: &dyn std::fmt::Display| Error::invalid("distribution", e.to_string());
        match self.kind {
            DistributionKind::Uniform => {
                let d = Uniform::new_inclusive(self.p1, p2).map_err(|e| fail(&e))?;
                out.iter_mut().for_each(|v| *v = d.sample(rng));
            }
            DistributionKind::Normal => {
                let d = Normal::new(self.p1, p2).map_err(|e| fail(&e))?;
                out.iter_mut().for_each(|v| *v = d.sample(rng));
            }
            DistributionKind::Gamma => {
                let d = Gamma::new(self.p1, p2).map_err(|e| fail(&e))?;
                out.iter_mut().for_each(|v| *v = d.sample(rng));
            }
            DistributionKind::Beta => {
                let d = Beta::new(self.p1, p2).map_err(|e| fail(&e))?;
                out.iter_mut().for_each(|v| *v = d.sample(rng));
            }
            DistributionKind::Poisson => {
                let d = Poisson::new(self.p1).map_err(|e| fail(&e))?;
                out.iter_mut().for_each(|v| *v = d.sample(rng));
            }
        }
        Ok(())
    }
}

/// `count` i.i.d. draws. Poisson draws are whole numbers stored as reals.
pub fn sample_distribution<R: Rng + ?Sized>(spec: &DistributionSpec, count: usize, rng: &mut R) -> Result<Vec<f64>> {
    if count == 0 {
        return Err(Error::invalid("count", "must be at least 1"));
    }
    let mut out = vec![0.0; count];
    spec.draw_into(&mut out, rng)?;
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureProvenance {
    pub first: DistributionSpec,
    pub second: DistributionSpec,
    /// Rows drawn from `first`; the rest come from `second`.
    pub m0: usize,
    /// Raw column range before scaling.
    pub raw_min: f64,
    pub raw_max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetProvenance {
    pub seed: u64,
    pub n: usize,
    pub m: usize,
    pub p: f64,
    pub features: Vec<FeatureProvenance>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub data: Dataset,
    pub provenance: DatasetProvenance,
}

/// Min-max scale a column in place; a constant column becomes all zeros.
/// Returns the raw (min, max).
pub fn min_max_scale(mut column: ArrayViewMut1<f64>) -> (f64, f64) {
    let min = column.iter().copied().fold(f64::INFINITY, f64::min);
    let max = column.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = max - min;
    if range > 0.0 {
        column.mapv_inplace(|v| ((v - min) / range).clamp(0.0, 1.0));
    } else {
        column.fill(0.0);
    }
    (min, max)
}

fn draw_m0<R: Rng + ?Sized>(m: usize, rng: &mut R) -> usize {
    if m <= 2 {
        return 1;
    }
    let u: f64 = rng.random_range(1.0..(m - 1) as f64);
    (u.ceil() as usize).clamp(1, m - 1)
}

/// Generate one balanced task with `n` features and `m` rows.
pub fn generate_dataset(n: usize, m: usize, p: f64, seed: u64) -> Result<SyntheticDataset> {
    if n == 0 {
        return Err(Error::invalid("n", "must be at least 1"));
    }
    if m < 2 {
        return Err(Error::invalid("m", "must be at least 2"));
    }
    if !(p > PARAM_FLOOR) || !p.is_finite() {
        return Err(Error::invalid("p", format!("must be finite and exceed {PARAM_FLOOR}")));
    }
    let mut rng = rng_from_seed(seed);
    let mut features = Array2::zeros((m, n));
    let mut provenance = Vec::with_capacity(n);
    let mut column = vec![0.0; m];
    for i in 0..n {
        let kind = DistributionKind::ALL[rng.random_range(0..DistributionKind::ALL.len())];
        let m0 = draw_m0(m, &mut rng);
        let first = DistributionSpec::random(kind, p, &mut rng);
        let second = DistributionSpec::random(kind, p, &mut rng);
        first.draw_into(&mut column[..m0], &mut rng)?;
        second.draw_into(&mut column[m0..], &mut rng)?;
        let mut col = features.column_mut(i);
        col.iter_mut().zip(&column).for_each(|(dst, &src)| *dst = src);
        let (raw_min, raw_max) = min_max_scale(col);
        provenance.push(FeatureProvenance {
            first,
            second,
            m0,
            raw_min,
            raw_max,
        });
    }
    let labels = (0..m).map(|j| u8::from(j >= m.div_ceil(2))).collect();
    Ok(SyntheticDataset {
        data: Dataset::new(features, labels)?,
        provenance: DatasetProvenance {
            seed,
            n,
            m,
            p,
            features: provenance,
        },
    })
}

impl SyntheticDataset {
    pub fn n(&self) -> usize {
        self.provenance.n
    }

    /// Fresh points from the same generating process: a row position is drawn
    /// uniformly, each feature uses the parametrization that position would
    /// have received, and the original scaling is applied (clipped to `[0,1]`).
    pub fn sample_like<R: Rng + ?Sized>(&self, count: usize, rng: &mut R) -> Result<Array2<f64>> {
        let prov = &self.provenance;
        let mut out = Array2::zeros((count, prov.n));
        let mut one = [0.0];
        for mut row in out.rows_mut() {
            let position = rng.random_range(0..prov.m);
            for (v, f) in row.iter_mut().zip(&prov.features) {
                let spec = if position < f.m0 { &f.first } else { &f.second };
                spec.draw_into(&mut one, rng)?;
                let range = f.raw_max - f.raw_min;
                *v = if range > 0.0 {
                    ((one[0] - f.raw_min) / range).clamp(0.0, 1.0)
                } else {
                    0.0
                };
            }
        }
        Ok(out)
    }

    /// Writes `<stem>.csv` and `<stem>.provenance.json` into `dir`.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        self.data.write_csv(&dir.join(format!("{stem}.csv")))?;
        let path = dir.join(format!("{stem}.provenance.json"));
        std::fs::write(&path, serde_json::to_string_pretty(&self.provenance)?).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path, stem: &str) -> Result<Self> {
        let data = Dataset::read_csv(&dir.join(format!("{stem}.csv")))?;
        let path = dir.join(format!("{stem}.provenance.json"));
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Ok(Self {
            data,
            provenance: serde_json::from_str(&text)?,
        })
    }
}

/// Strict linear separability of the two classes.
///
/// A perceptron with a bias input runs for up to [`PERCEPTRON_EPOCHS`]
/// passes; a clean pass proves separability. When it never gets one, a
/// max-margin linear program settles the question, which catches separators
/// whose margin is too small for the perceptron to find in time.
pub fn is_linearly_separable(ds: &Dataset) -> bool {
    perceptron_separates(ds) || max_margin(ds) > MARGIN_TOL
}

/// Margins at or below this count as not separable.
pub const MARGIN_TOL: f64 = 1e-9;

fn perceptron_separates(ds: &Dataset) -> bool {
    let n = ds.n_features();
    let mut w = vec![0.0; n];
    let mut b = 0.0;
    for _ in 0..PERCEPTRON_EPOCHS {
        let mut mistakes = 0usize;
        for (row, &label) in ds.features.rows().into_iter().zip(&ds.labels) {
            let y = if label == 1 { 1.0 } else { -1.0 };
            let activation: f64 = row.iter().zip(&w).map(|(x, w)| x * w).sum::<f64>() + b;
            if y * activation <= 0.0 {
                mistakes += 1;
                w.iter_mut().zip(row.iter()).for_each(|(w, x)| *w += y * x);
                b += y;
            }
        }
        if mistakes == 0 {
            return true;
        }
    }
    false
}

/// Largest `t` with `y_i (w·x_i + b) ≥ t` for all rows, over `w, b` in the
/// unit box. Zero when the classes cannot be split.
fn max_margin(ds: &Dataset) -> f64 {
    use minilp::{ComparisonOp, OptimizationDirection, Problem};
    let mut lp = Problem::new(OptimizationDirection::Maximize);
    let w: Vec<_> = (0..ds.n_features()).map(|_| lp.add_var(0.0, (-1.0, 1.0))).collect();
    let b = lp.add_var(0.0, (-1.0, 1.0));
    let t = lp.add_var(1.0, (0.0, 1.0));
    for (row, &label) in ds.features.rows().into_iter().zip(&ds.labels) {
        let y = if label == 1 { 1.0 } else { -1.0 };
        let mut terms: Vec<_> = w.iter().zip(row.iter()).map(|(&v, &x)| (v, y * x)).collect();
        terms.push((b, y));
        terms.push((t, -1.0));
        lp.add_constraint(terms.as_slice(), ComparisonOp::Ge, 0.0);
    }
    lp.solve().map_or(0.0, |s| s.objective())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryStrategy {
    MultiDistribution,
    StandardUniform,
    StandardNormal,
}

impl QueryStrategy {
    pub const ALL: [QueryStrategy; 3] = [
        QueryStrategy::MultiDistribution,
        QueryStrategy::StandardUniform,
        QueryStrategy::StandardNormal,
    ];

    pub fn name(self) -> &'static str {
        match self {
            QueryStrategy::MultiDistribution => "multi_distribution",
            QueryStrategy::StandardUniform => "standard_uniform",
            QueryStrategy::StandardNormal => "standard_normal",
        }
    }
}

impl std::str::FromStr for QueryStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        QueryStrategy::ALL
            .into_iter()
            .find(|q| q.name() == s)
            .ok_or_else(|| Error::invalid("strategy", format!("unknown strategy `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuerySample {
    pub points: Array2<f64>,
    /// Distribution picks, for the multi-distribution strategy only.
    pub provenance: Option<DatasetProvenance>,
}

/// `count` query points in `[0,1]^n`.
pub fn sample_query_points<R: Rng + ?Sized>(
    strategy: QueryStrategy,
    count: usize,
    n: usize,
    rng: &mut R,
) -> Result<QuerySample> {
    if count == 0 {
        return Err(Error::invalid("count", "must be at least 1"));
    }
    if n == 0 {
        return Err(Error::invalid("n", "must be at least 1"));
    }
    Ok(match strategy {
        QueryStrategy::MultiDistribution => {
            // Generation needs two rows; a single query is the first of two.
            let ds = generate_dataset(n, count.max(2), DEFAULT_PARAM_MAX, rng.random())?;
            let points = ds.data.features.slice(ndarray::s![..count, ..]).to_owned();
            QuerySample {
                points,
                provenance: Some(ds.provenance),
            }
        }
        QueryStrategy::StandardUniform => QuerySample {
            points: Array2::from_shape_simple_fn((count, n), || rng.random::<f64>()),
            provenance: None,
        },
        QueryStrategy::StandardNormal => {
            let mut points = Array2::from_shape_simple_fn((count, n), || rng.sample::<f64, _>(StandardNormal));
            for col in points.columns_mut() {
                min_max_scale(col);
            }
            QuerySample {
                points,
                provenance: None,
            }
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn poisson_mean() {
        let spec = DistributionSpec::new(DistributionKind::Poisson, 2.0, None).unwrap();
        let draws = sample_distribution(&spec, 100_000, &mut rng_from_seed(11)).unwrap();
        let mean = draws.iter().sum::<f64>() / draws.len() as f64;
        assert!((mean - 2.0).abs() < 0.05, "{mean}");
        assert!(draws.iter().all(|v| v.fract() == 0.0 && *v >= 0.0));
    }

    #[test]
    fn uniform_support() {
        let spec = DistributionSpec::new(DistributionKind::Uniform, 0.0, Some(1.0)).unwrap();
        let draws = sample_distribution(&spec, 10_000, &mut rng_from_seed(12)).unwrap();
        assert!(draws.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn beta_mean() {
        let spec = DistributionSpec::new(DistributionKind::Beta, 5.0, Some(5.0)).unwrap();
        let draws = sample_distribution(&spec, 100_000, &mut rng_from_seed(13)).unwrap();
        let mean = draws.iter().sum::<f64>() / draws.len() as f64;
        assert!((mean - 0.5).abs() < 0.01, "{mean}");
    }

    #[test]
    fn invalid_parameters_rejected() {
        assert!(DistributionSpec::new(DistributionKind::Beta, 0.0, Some(1.0)).is_err());
        assert!(DistributionSpec::new(DistributionKind::Poisson, 1.0, Some(1.0)).is_err());
        assert!(DistributionSpec::new(DistributionKind::Normal, 1.0, None).is_err());
        assert!(DistributionSpec::new(DistributionKind::Gamma, 1.0, Some(-2.0)).is_err());
        let bad = DistributionSpec {
            kind: DistributionKind::Beta,
            p1: -1.0,
            p2: Some(1.0),
        };
        assert!(sample_distribution(&bad, 3, &mut rng_from_seed(0)).is_err());
    }

    #[test]
    fn random_uniform_params_are_ordered() {
        let mut rng = rng_from_seed(5);
        for _ in 0..200 {
            let s = DistributionSpec::random(DistributionKind::Uniform, 5.0, &mut rng);
            assert!(s.p1 <= s.p2.unwrap());
            assert!(s.p1 >= PARAM_FLOOR && s.p2.unwrap() < 5.0);
            s.validate().unwrap();
        }
    }

    #[test]
    fn tiny_dataset_layout() {
        let ds = generate_dataset(1, 4, 5.0, 3).unwrap();
        assert_eq!(ds.data.labels, vec![0, 0, 1, 1]);
        assert!(ds.data.features.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn odd_row_count_balance() {
        let ds = generate_dataset(2, 5, 5.0, 3).unwrap();
        assert_eq!(ds.data.labels, vec![0, 0, 0, 1, 1]);
    }

    #[test]
    fn columns_span_unit_interval() {
        let ds = generate_dataset(3, 5000, 5.0, 21).unwrap();
        for col in ds.data.features.columns() {
            let min = col.iter().copied().fold(f64::INFINITY, f64::min);
            let max = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if max > 0.0 {
                assert_eq!((min, max), (0.0, 1.0));
            }
        }
    }

    #[test]
    fn degenerate_column_is_zeroed() {
        let mut a = array![3.0, 3.0, 3.0];
        assert_eq!(min_max_scale(a.view_mut()), (3.0, 3.0));
        assert_eq!(a, array![0.0, 0.0, 0.0]);
    }

    #[test]
    fn same_seed_same_dataset() {
        let a = generate_dataset(4, 300, 5.0, 77).unwrap();
        let b = generate_dataset(4, 300, 5.0, 77).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, generate_dataset(4, 300, 5.0, 78).unwrap());
    }

    #[test]
    fn small_margin_is_still_separable() {
        // Separable only by a near-horizontal line with margin ~1e-4.
        let ds = Dataset::new(
            array![
                [0.6525, 0.8995],
                [0.4100, 1.0],
                [0.3472, 0.5397],
                [0.2832, 0.00116],
                [0.6381, 0.0],
                [1.0, 0.00078],
                [0.0, 3.24e-7]
            ],
            vec![0, 0, 0, 0, 1, 1, 1],
        )
        .unwrap();
        assert!(!perceptron_separates(&ds));
        assert!(is_linearly_separable(&ds));
    }

    #[test]
    fn separability_basics() {
        let xor = Dataset::new(array![[0.0, 0.0], [1.0, 1.0], [0.0, 1.0], [1.0, 0.0]], vec![0, 0, 1, 1]).unwrap();
        assert!(!is_linearly_separable(&xor));
        let line = Dataset::new(array![[0.0], [1.0]], vec![0, 1]).unwrap();
        assert!(is_linearly_separable(&line));
    }

    #[test]
    fn query_strategies_stay_in_unit_cube() {
        let mut rng = rng_from_seed(8);
        let u = sample_query_points(QueryStrategy::StandardUniform, 10_000, 2, &mut rng).unwrap();
        assert_eq!(u.points.dim(), (10_000, 2));
        assert!(u.points.iter().all(|v| (0.0..=1.0).contains(v)));

        let z = sample_query_points(QueryStrategy::StandardNormal, 1000, 1, &mut rng).unwrap();
        let col = z.points.column(0);
        assert_eq!(col.iter().copied().fold(f64::INFINITY, f64::min), 0.0);
        assert_eq!(col.iter().copied().fold(f64::NEG_INFINITY, f64::max), 1.0);

        let md = sample_query_points(QueryStrategy::MultiDistribution, 500, 3, &mut rng).unwrap();
        assert!(md.points.iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(md.provenance.unwrap().features.len(), 3);
    }

    #[test]
    fn sample_like_stays_in_unit_cube() {
        let ds = generate_dataset(3, 400, 5.0, 4).unwrap();
        let pts = ds.sample_like(2000, &mut rng_from_seed(1)).unwrap();
        assert!(pts.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate_dataset(2, 50, 5.0, 9).unwrap();
        ds.save(dir.path(), "d").unwrap();
        assert_eq!(SyntheticDataset::load(dir.path(), "d").unwrap(), ds);
    }
}
