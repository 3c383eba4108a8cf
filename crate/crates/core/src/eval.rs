//! Fidelity measurement, the I-Net vs sampling benchmark, decision-boundary
//! grids and the query-count sweep.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::Instant;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::datagen::QueryStrategy;
use crate::distill::{distill, DistillConfig};
use crate::error::{Error, Result};
use crate::inet::INetModel;
use crate::lambda::{round_half_up, CorpusEntry, LambdaNet};
use crate::seed::derive_seed;
use crate::trees::{TreeFamily, TreeModel};

/// Anything that yields a class-1 probability for a point.
pub trait Classifier: Sync {
    fn n_features(&self) -> usize;
    fn prob(&self, x: &[f64]) -> Result<f64>;

    fn label(&self, x: &[f64]) -> Result<u8> {
        Ok(round_half_up(self.prob(x)?))
    }
}

impl Classifier for LambdaNet {
    fn n_features(&self) -> usize {
        LambdaNet::n_features(self)
    }

    fn prob(&self, x: &[f64]) -> Result<f64> {
        self.predict(x)
    }
}

impl Classifier for TreeModel {
    fn n_features(&self) -> usize {
        TreeModel::n_features(self)
    }

    fn prob(&self, x: &[f64]) -> Result<f64> {
        self.predict(x)
    }
}

/// Fraction of rows where the thresholded surrogate agrees with `round(λ(x))`.
pub fn fidelity(surrogate: &dyn Classifier, lambda: &dyn Classifier, x: ArrayView2<f64>) -> Result<f64> {
    if x.nrows() == 0 {
        return Err(Error::InvalidData("fidelity needs at least one row".into()));
    }
    for model in [surrogate, lambda] {
        if model.n_features() != x.ncols() {
            return Err(Error::Dimension {
                expected: model.n_features(),
                actual: x.ncols(),
            });
        }
    }
    let mut agree = 0usize;
    for row in x.rows() {
        let row = row.to_vec();
        agree += usize::from(surrogate.label(&row)? == lambda.label(&row)?);
    }
    Ok(agree as f64 / x.nrows() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Method {
    Inet,
    Sampling(QueryStrategy),
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Inet => "inet",
            Method::Sampling(s) => s.name(),
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "inet" {
            Ok(Method::Inet)
        } else {
            s.parse().map(Method::Sampling)
        }
    }
}

impl Serialize for Method {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for Method {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// A λ-net plus the held-out rows it is judged on.
#[derive(Debug, Clone)]
pub struct BenchTarget {
    pub id: String,
    pub lambda: LambdaNet,
    pub test_rows: Array2<f64>,
}

impl BenchTarget {
    pub fn from_entry(entry: &CorpusEntry) -> Self {
        Self {
            id: entry.id.clone(),
            lambda: entry.lambda.clone(),
            test_rows: entry.test_rows(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub target_id: String,
    pub family: TreeFamily,
    pub method: Method,
    pub seed: Option<u64>,
    pub fidelity: f64,
    pub fidelity_on_query: Option<f64>,
    pub wall_ms: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub target_id: String,
    pub family: TreeFamily,
    pub method: Method,
    pub count: usize,
    pub mean: f64,
    pub std: f64,
    /// Winning method of the I-Net vs best-sampler comparison, or `tie`.
    pub winner: String,
    pub p_value: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct BenchmarkReport {
    pub rows: Vec<ReportRow>,
    pub aggregates: Vec<AggregateRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchmarkConfig {
    pub families: Vec<TreeFamily>,
    pub strategies: Vec<QueryStrategy>,
    pub trials: usize,
    /// Fill `wall_ms`; off by default so reports are byte-reproducible.
    pub record_timing: bool,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            families: vec![TreeFamily::StandardDt],
            strategies: QueryStrategy::ALL.to_vec(),
            trials: 10,
            record_timing: false,
        }
    }
}

impl BenchmarkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.families.is_empty() {
            return Err(Error::invalid("benchmark.families", "at least one family is required"));
        }
        if self.trials == 0 {
            return Err(Error::invalid("benchmark.trials", "must be at least 1"));
        }
        Ok(())
    }
}

struct Job<'a> {
    target: &'a BenchTarget,
    family: TreeFamily,
    method: Method,
    seed: Option<u64>,
}

fn run_job(
    job: &Job,
    inets: &BTreeMap<TreeFamily, INetModel>,
    config: &BenchmarkConfig,
    distill_config: &DistillConfig,
) -> Result<ReportRow> {
    let start = Instant::now();
    let lambda = &job.target.lambda;
    let (tree, on_query) = match job.method {
        Method::Inet => {
            let model = inets.get(&job.family).expect("checked before dispatch");
            (model.interpret(&lambda.theta())?, None)
        }
        Method::Sampling(strategy) => {
            let seed = job.seed.expect("sampling jobs carry a seed");
            // Baselines are fitted at the depth of the I-Net they are compared to.
            let depth = inets.get(&job.family).expect("checked before dispatch").layout.depth;
            let dc = distill_config.clone().with_depth(depth);
            let d = distill(lambda, job.family, strategy, &dc, seed)?;
            let q = fidelity(&d.tree, lambda, d.queries.view())?;
            (d.tree, Some(q))
        }
    };
    let fid = fidelity(&tree, lambda, job.target.test_rows.view())?;
    Ok(ReportRow {
        target_id: job.target.id.clone(),
        family: job.family,
        method: job.method,
        seed: job.seed,
        fidelity: fid,
        fidelity_on_query: on_query,
        wall_ms: config.record_timing.then(|| start.elapsed().as_millis() as u64),
    })
}

/// One I-Net row plus `trials` rows per strategy for every (target, family).
pub fn run_benchmark(
    targets: &[BenchTarget],
    inets: &BTreeMap<TreeFamily, INetModel>,
    config: &BenchmarkConfig,
    distill_config: &DistillConfig,
    master_seed: u64,
) -> Result<BenchmarkReport> {
    config.validate()?;
    distill_config.validate()?;
    for family in &config.families {
        let Some(model) = inets.get(family) else {
            return Err(Error::invalid(
                "benchmark.families",
                format!("no trained I-Net for {}", family.name()),
            ));
        };
        if let Some(t) = targets.iter().find(|t| t.lambda.n_features() != model.n()) {
            return Err(Error::Dimension {
                expected: model.n(),
                actual: t.lambda.n_features(),
            });
        }
    }
    let mut jobs = Vec::new();
    for target in targets {
        for &family in &config.families {
            jobs.push(Job {
                target,
                family,
                method: Method::Inet,
                seed: None,
            });
            for &strategy in &config.strategies {
                for trial in 0..config.trials {
                    let label = format!("{}/{}/{}", target.id, family.name(), strategy.name());
                    jobs.push(Job {
                        target,
                        family,
                        method: Method::Sampling(strategy),
                        seed: Some(derive_seed(master_seed, &label, trial as u64)),
                    });
                }
            }
        }
    }
    #[cfg(feature = "parallel")]
    let rows: Vec<ReportRow> = {
        use rayon::prelude::*;
        jobs.par_iter()
            .map(|j| run_job(j, inets, config, distill_config))
            .collect::<Result<_>>()?
    };
    #[cfg(not(feature = "parallel"))]
    let rows: Vec<ReportRow> = jobs
        .iter()
        .map(|j| run_job(j, inets, config, distill_config))
        .collect::<Result<_>>()?;
    let aggregates = aggregate(&rows);
    Ok(BenchmarkReport { rows, aggregates })
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Two-sided Welch's unpaired t-test p-value; `None` when undefined.
pub fn welch_p_value(a: &[f64], b: &[f64]) -> Option<f64> {
    let ((ma, sa), (mb, sb)) = (mean_std(a), mean_std(b));
    let (va, vb) = (sa * sa / a.len() as f64, sb * sb / b.len() as f64);
    let se2 = va + vb;
    if se2 == 0.0 {
        return Some(if ma == mb { 1.0 } else { 0.0 });
    }
    let mut df_den = 0.0;
    for (v, n) in [(va, a.len()), (vb, b.len())] {
        if v > 0.0 {
            df_den += v * v / (n as f64 - 1.0);
        }
    }
    let df = se2 * se2 / df_den;
    let t = (ma - mb) / se2.sqrt();
    let dist = StudentsT::new(0.0, 1.0, df).ok()?;
    Some(2.0 * (1.0 - dist.cdf(t.abs())))
}

/// Per (target, family, method) statistics plus the I-Net vs best-sampler
/// verdict; `target_id = "*"` rows pool all targets.
pub fn aggregate(rows: &[ReportRow]) -> Vec<AggregateRow> {
    let mut groups: BTreeMap<(String, TreeFamily, Method), Vec<f64>> = BTreeMap::new();
    for r in rows {
        groups
            .entry((r.target_id.clone(), r.family, r.method))
            .or_default()
            .push(r.fidelity);
        groups
            .entry(("*".into(), r.family, r.method))
            .or_default()
            .push(r.fidelity);
    }
    let mut verdicts: BTreeMap<(String, TreeFamily), (String, Option<f64>)> = BTreeMap::new();
    let mut keys: Vec<(String, TreeFamily)> = groups.keys().map(|(t, f, _)| (t.clone(), *f)).collect();
    keys.dedup();
    for (target, family) in keys {
        if target == "*" {
            continue;
        }
        let inet = groups.get(&(target.clone(), family, Method::Inet));
        let best = groups
            .iter()
            .filter(|((t, f, m), _)| *t == target && *f == family && *m != Method::Inet)
            .max_by(|a, b| mean_std(a.1).0.total_cmp(&mean_std(b.1).0));
        let verdict = match (inet, best) {
            (Some(i), Some(((_, _, method), s))) => {
                let p = welch_p_value(i, s);
                let winner = match p {
                    Some(p) if p < 0.05 => {
                        if mean_std(i).0 > mean_std(s).0 {
                            "inet"
                        } else {
                            method.name()
                        }
                    }
                    _ => "tie",
                };
                (winner.to_string(), p)
            }
            _ => (String::new(), None),
        };
        verdicts.insert((target, family), verdict);
    }
    groups
        .into_iter()
        .map(|((target_id, family, method), values)| {
            let (mean, std) = mean_std(&values);
            let (winner, p_value) = verdicts.get(&(target_id.clone(), family)).cloned().unwrap_or_default();
            AggregateRow {
                target_id,
                family,
                method,
                count: values.len(),
                mean,
                std,
                winner,
                p_value,
            }
        })
        .collect()
}

fn opt<T: std::fmt::Display>(v: &Option<T>) -> String {
    v.as_ref().map(ToString::to_string).unwrap_or_default()
}

impl BenchmarkReport {
    pub fn rows_csv(&self) -> String {
        let mut out = String::from("target_id,family,method,seed,fidelity,fidelity_on_query,wall_ms\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                r.target_id,
                r.family.name(),
                r.method.name(),
                opt(&r.seed),
                r.fidelity,
                opt(&r.fidelity_on_query),
                opt(&r.wall_ms)
            );
        }
        out
    }

    pub fn aggregates_csv(&self) -> String {
        let mut out = String::from("target_id,family,method,count,mean,std,winner,p_value\n");
        for a in &self.aggregates {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                a.target_id,
                a.family.name(),
                a.method.name(),
                a.count,
                a.mean,
                a.std,
                a.winner,
                opt(&a.p_value)
            );
        }
        out
    }

    /// Parse the raw rows CSV back; aggregates are recomputed.
    pub fn from_rows_csv(text: &str) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(text.as_bytes());
        let mut rows = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            let field = |i: usize| rec.get(i).unwrap_or("");
            let num = |s: &str| -> Result<f64> {
                s.parse()
                    .map_err(|_| Error::InvalidData(format!("`{s}` is not a number")))
            };
            let opt_num = |s: &str| -> Result<Option<f64>> {
                if s.is_empty() {
                    Ok(None)
                } else {
                    num(s).map(Some)
                }
            };
            let opt_int = |s: &str| -> Result<Option<u64>> {
                if s.is_empty() {
                    Ok(None)
                } else {
                    s.parse()
                        .map(Some)
                        .map_err(|_| Error::InvalidData(format!("`{s}` is not an integer")))
                }
            };
            rows.push(ReportRow {
                target_id: field(0).to_string(),
                family: field(1).parse()?,
                method: field(2).parse()?,
                seed: opt_int(field(3))?,
                fidelity: num(field(4))?,
                fidelity_on_query: opt_num(field(5))?,
                wall_ms: opt_int(field(6))?,
            });
        }
        let aggregates = aggregate(&rows);
        Ok(Self { rows, aggregates })
    }
}

/// Thresholded predictions on a `resolution × resolution` lattice over
/// `[0,1]²`. Cell `(r, c)` sits at `x = (coords[c], coords[r])` and is
/// stored at `r·resolution + c`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundaryGrid {
    pub resolution: usize,
    pub coords: Vec<f64>,
    pub labels: Vec<u8>,
}

pub fn boundary_grid(model: &dyn Classifier, resolution: usize) -> Result<BoundaryGrid> {
    if model.n_features() != 2 {
        return Err(Error::Dimension {
            expected: 2,
            actual: model.n_features(),
        });
    }
    if resolution < 2 {
        return Err(Error::invalid("resolution", "must be at least 2"));
    }
    let coords: Vec<f64> = (0..resolution).map(|i| i as f64 / (resolution - 1) as f64).collect();
    let mut labels = Vec::with_capacity(resolution * resolution);
    for &x1 in &coords {
        for &x0 in &coords {
            labels.push(model.label(&[x0, x1])?);
        }
    }
    Ok(BoundaryGrid {
        resolution,
        coords,
        labels,
    })
}

impl BoundaryGrid {
    pub fn label_at(&self, row: usize, col: usize) -> u8 {
        self.labels[row * self.resolution + col]
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("x0,x1,label\n");
        for (r, &x1) in self.coords.iter().enumerate() {
            for (c, &x0) in self.coords.iter().enumerate() {
                let _ = writeln!(out, "{x0},{x1},{}", self.label_at(r, c));
            }
        }
        out
    }

    /// Square heat map with `x1` growing upward.
    pub fn to_svg(&self, size_px: usize) -> String {
        let res = self.resolution;
        let cell = size_px as f64 / res as f64;
        let mut out = format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{size_px}\" height=\"{size_px}\" viewBox=\"0 0 {size_px} {size_px}\" shape-rendering=\"crispEdges\">\n"
        );
        for r in 0..res {
            for c in 0..res {
                let fill = if self.label_at(r, c) == 1 { "#d95f02" } else { "#1b9e77" };
                let y = (res - 1 - r) as f64 * cell;
                let _ = writeln!(
                    out,
                    "<rect x=\"{:.3}\" y=\"{y:.3}\" width=\"{cell:.3}\" height=\"{cell:.3}\" fill=\"{fill}\"/>",
                    c as f64 * cell
                );
            }
        }
        out.push_str("</svg>\n");
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub target_id: String,
    pub size: usize,
    pub strategy: QueryStrategy,
    pub trial: usize,
    pub fidelity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub size: usize,
    pub strategy: QueryStrategy,
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
    pub summary: Vec<SweepSummary>,
}

/// Fidelity of sample-based distillation as the query count grows.
pub fn sample_size_sweep(
    targets: &[BenchTarget],
    sizes: &[usize],
    strategies: &[QueryStrategy],
    trials: usize,
    family: TreeFamily,
    config: &DistillConfig,
    master_seed: u64,
) -> Result<SweepReport> {
    if sizes.is_empty() || sizes.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::invalid("sizes", "must be non-empty and strictly ascending"));
    }
    if trials == 0 {
        return Err(Error::invalid("trials", "must be at least 1"));
    }
    let mut jobs = Vec::new();
    for target in targets {
        for &size in sizes {
            for &strategy in strategies {
                for trial in 0..trials {
                    jobs.push((target, size, strategy, trial));
                }
            }
        }
    }
    let run = |&(target, size, strategy, trial): &(&BenchTarget, usize, QueryStrategy, usize)| -> Result<SweepRow> {
        let cfg = DistillConfig {
            query_count: size,
            ..config.clone()
        };
        // Same seed at every size: a trial draws the same query
        // distribution and only the sample count changes.
        let label = format!("sweep/{}/{}", target.id, strategy.name());
        let d = distill(
            &target.lambda,
            family,
            strategy,
            &cfg,
            derive_seed(master_seed, &label, trial as u64),
        )?;
        Ok(SweepRow {
            target_id: target.id.clone(),
            size,
            strategy,
            trial,
            fidelity: fidelity(&d.tree, &target.lambda, target.test_rows.view())?,
        })
    };
    #[cfg(feature = "parallel")]
    let rows: Vec<SweepRow> = {
        use rayon::prelude::*;
        jobs.par_iter().map(run).collect::<Result<_>>()?
    };
    #[cfg(not(feature = "parallel"))]
    let rows: Vec<SweepRow> = jobs.iter().map(run).collect::<Result<_>>()?;

    let mut groups: BTreeMap<(usize, QueryStrategy), Vec<f64>> = BTreeMap::new();
    for r in &rows {
        groups.entry((r.size, r.strategy)).or_default().push(r.fidelity);
    }
    let summary = groups
        .into_iter()
        .map(|((size, strategy), v)| {
            let (mean, std) = mean_std(&v);
            SweepSummary {
                size,
                strategy,
                mean,
                std,
            }
        })
        .collect();
    Ok(SweepReport { rows, summary })
}

impl SweepReport {
    pub fn rows_csv(&self) -> String {
        let mut out = String::from("target_id,size,strategy,trial,fidelity\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                r.target_id,
                r.size,
                r.strategy.name(),
                r.trial,
                r.fidelity
            );
        }
        out
    }

    pub fn summary_csv(&self) -> String {
        let mut out = String::from("size,strategy,mean,std\n");
        for s in &self.summary {
            let _ = writeln!(out, "{},{},{},{}", s.size, s.strategy.name(), s.mean, s.std);
        }
        out
    }

    pub fn mean(&self, size: usize, strategy: QueryStrategy) -> Option<f64> {
        self.summary
            .iter()
            .find(|s| s.size == size && s.strategy == strategy)
            .map(|s| s.mean)
    }
}
