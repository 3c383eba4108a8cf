//! File-level stages shared by the command-line tool and the end-to-end
//! tests. Every stage reads its inputs, writes artifacts into `out` (plus
//! `resolved-config.json`) and returns the paths it wrote. Inputs are never
//! modified.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::Axis;

use crate::config::RunConfig;
use crate::data::Dataset;
use crate::datagen::{generate_dataset, QueryStrategy};
use crate::distill::distill;
use crate::error::{Error, Result};
use crate::eval::{boundary_grid, fidelity, run_benchmark, sample_size_sweep, BenchTarget, Classifier};
use crate::inet::{train_inet, INetModel};
use crate::ingest::{preprocess, PreprocessConfig, Schema};
use crate::lambda::{build_corpus, train_lambda_net, CorpusSpec, LambdaCorpus, LambdaNet, Split};
use crate::seed::derive_seed;
use crate::trees::{export_tree, ExportFormat, TreeFamily, TreeModel};

fn prepare(config: &RunConfig, out: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    Ok(vec![config.write_resolved(out)?])
}

fn write(path: PathBuf, text: &str, written: &mut Vec<PathBuf>) -> Result<()> {
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    written.push(path);
    Ok(())
}

fn require(paths: &[&Path]) -> Result<()> {
    let missing: Vec<PathBuf> = paths.iter().filter(|p| !p.exists()).map(|p| p.to_path_buf()).collect();
    if missing.is_empty() {
        Ok(())
    } else {
        Err(Error::MissingArtifacts(missing))
    }
}

/// `dataset.csv` + `dataset.provenance.json`.
pub fn gen_data(config: &RunConfig, out: &Path) -> Result<Vec<PathBuf>> {
    let mut written = prepare(config, out)?;
    let d = &config.data;
    let ds = generate_dataset(d.n, d.m, d.p, derive_seed(config.master_seed, "gen-data", 0))?;
    ds.save(out, "dataset")?;
    written.extend([out.join("dataset.csv"), out.join("dataset.provenance.json")]);
    Ok(written)
}

/// Train one λ-net on a dataset CSV; writes `lambda.json`.
pub fn train_lambda(config: &RunConfig, dataset: &Path, out: &Path) -> Result<Vec<PathBuf>> {
    require(&[dataset])?;
    let ds = Dataset::read_csv(dataset)?;
    let mut written = prepare(config, out)?;
    let name = dataset.file_stem().and_then(|s| s.to_str()).unwrap_or("dataset");
    let lambda = train_lambda_net(
        &ds,
        name,
        &config.lambda,
        derive_seed(config.master_seed, "train-lambda", 0),
    )?;
    let path = out.join("lambda.json");
    lambda.save(&path)?;
    written.push(path);
    Ok(written)
}

/// Corpus directory at `out/corpus`.
pub fn corpus(config: &RunConfig, out: &Path) -> Result<Vec<PathBuf>> {
    let mut written = prepare(config, out)?;
    let spec = CorpusSpec {
        master_seed: config.master_seed,
        n: config.data.n,
        m: config.data.m,
        p: config.data.p,
        counts: config.corpus,
    };
    let corpus = build_corpus(&spec, &config.lambda)?;
    let dir = out.join("corpus");
    corpus.save(&dir)?;
    written.push(dir);
    Ok(written)
}

pub fn inet_path(dir: &Path, family: TreeFamily) -> PathBuf {
    dir.join(format!("inet-{}.json", family.name()))
}

/// `inet-<family>.json`, its head sidecar and `inet-<family>.training.json`.
pub fn train_inet_stage(config: &RunConfig, corpus_dir: &Path, family: TreeFamily, out: &Path) -> Result<Vec<PathBuf>> {
    let corpus = LambdaCorpus::load(corpus_dir)?;
    let mut written = prepare(config, out)?;
    let (model, report) = train_inet(
        &corpus,
        family,
        &config.inet,
        derive_seed(config.master_seed, "train-inet", 0),
    )?;
    let path = inet_path(out, family);
    model.save(&path)?;
    written.extend([path.clone(), INetModel::head_path(&path)]);
    write(
        out.join(format!("inet-{}.training.json", family.name())),
        &serde_json::to_string_pretty(&report)?,
        &mut written,
    )?;
    Ok(written)
}

pub fn load_inet(path: &Path) -> Result<INetModel> {
    require(&[path, &INetModel::head_path(path)])?;
    INetModel::load(path)
}

pub fn load_lambda(path: &Path) -> Result<LambdaNet> {
    require(&[path])?;
    LambdaNet::load(path)
}

/// Surrogate for one λ-net, rendered in `format`.
pub fn interpret(inet: &Path, lambda: &Path, format: ExportFormat) -> Result<String> {
    let model = load_inet(inet)?;
    let lambda = load_lambda(lambda)?;
    export_tree(&model.interpret(&lambda.theta())?, format)
}

/// Held-out rows of the dataset a λ-net was trained on.
pub fn holdout_rows(lambda: &LambdaNet, dataset: &Path) -> Result<ndarray::Array2<f64>> {
    require(&[dataset])?;
    let ds = Dataset::read_csv(dataset)?;
    if let Some(&bad) = lambda.holdout_rows.iter().find(|&&r| r >= ds.rows()) {
        return Err(Error::InvalidData(format!("held-out row {bad} is outside the dataset")));
    }
    Ok(ds.features.select(Axis(0), &lambda.holdout_rows))
}

/// Sample-based surrogate: `distill-<family>-<strategy>.json` and a one-row
/// `distill.csv`.
pub fn distill_stage(
    config: &RunConfig,
    lambda: &Path,
    dataset: Option<&Path>,
    family: TreeFamily,
    strategy: QueryStrategy,
    out: &Path,
) -> Result<Vec<PathBuf>> {
    let lambda = load_lambda(lambda)?;
    let test = dataset.map(|d| holdout_rows(&lambda, d)).transpose()?;
    let mut written = prepare(config, out)?;
    let dc = config.distill.clone();
    let seed = derive_seed(config.master_seed, "distill", 0);
    let d = distill(&lambda, family, strategy, &dc, seed)?;
    let on_query = fidelity(&d.tree, &lambda, d.queries.view())?;
    let on_test = test.map(|t| fidelity(&d.tree, &lambda, t.view())).transpose()?;
    let stem = format!("distill-{}-{}", family.name(), strategy.name());
    write(out.join(format!("{stem}.json")), &d.tree.to_json()?, &mut written)?;
    let csv = format!(
        "family,strategy,seed,fidelity_on_query,fidelity_on_test\n{},{},{},{},{}\n",
        family.name(),
        strategy.name(),
        seed,
        on_query,
        on_test.map(|f| f.to_string()).unwrap_or_default()
    );
    write(out.join("distill.csv"), &csv, &mut written)?;
    Ok(written)
}

fn test_targets(corpus_dir: &Path) -> Result<Vec<BenchTarget>> {
    let corpus = LambdaCorpus::load(corpus_dir)?;
    let targets: Vec<BenchTarget> = corpus.split(Split::Test).map(BenchTarget::from_entry).collect();
    if targets.is_empty() {
        return Err(Error::InvalidData("the corpus has no test entries".into()));
    }
    Ok(targets)
}

/// I-Net paths per family: explicit config inputs first, then
/// `inet_dir/inet-<family>.json`.
pub fn resolve_inets(config: &RunConfig, inet_dir: &Path) -> Result<BTreeMap<TreeFamily, INetModel>> {
    let mut missing = Vec::new();
    let mut paths = BTreeMap::new();
    for &family in &config.benchmark.families {
        let path = config
            .inputs
            .inets
            .get(&family)
            .cloned()
            .unwrap_or_else(|| inet_path(inet_dir, family));
        for p in [path.clone(), INetModel::head_path(&path)] {
            if !p.exists() {
                missing.push(p);
            }
        }
        paths.insert(family, path);
    }
    if !missing.is_empty() {
        return Err(Error::MissingArtifacts(missing));
    }
    paths.into_iter().map(|(f, p)| Ok((f, INetModel::load(&p)?))).collect()
}

/// `report.csv` (raw rows) and `aggregate.csv`.
pub fn benchmark(config: &RunConfig, corpus_dir: &Path, inet_dir: &Path, out: &Path) -> Result<Vec<PathBuf>> {
    let inets = resolve_inets(config, inet_dir)?;
    let targets = test_targets(corpus_dir)?;
    let mut written = prepare(config, out)?;
    let report = run_benchmark(&targets, &inets, &config.benchmark, &config.distill, config.master_seed)?;
    write(out.join("report.csv"), &report.rows_csv(), &mut written)?;
    write(out.join("aggregate.csv"), &report.aggregates_csv(), &mut written)?;
    Ok(written)
}

/// `sweep.csv` (per trial) and `sweep-summary.csv`.
pub fn sweep(config: &RunConfig, corpus_dir: &Path, out: &Path) -> Result<Vec<PathBuf>> {
    let targets = test_targets(corpus_dir)?;
    let mut written = prepare(config, out)?;
    let s = &config.sweep;
    let report = sample_size_sweep(
        &targets,
        &s.sizes,
        &s.strategies,
        s.trials,
        s.family,
        &config.distill,
        config.master_seed,
    )?;
    write(out.join("sweep.csv"), &report.rows_csv(), &mut written)?;
    write(out.join("sweep-summary.csv"), &report.summary_csv(), &mut written)?;
    Ok(written)
}

/// A tree or λ-net read from JSON, whichever the file holds.
pub enum AnyModel {
    Tree(TreeModel),
    Lambda(LambdaNet),
}

impl AnyModel {
    pub fn load(path: &Path) -> Result<Self> {
        require(&[path])?;
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        match TreeModel::from_json(&text) {
            Ok(t) => Ok(AnyModel::Tree(t)),
            Err(_) => LambdaNet::from_json(&text)
                .map(AnyModel::Lambda)
                .map_err(|_| Error::InvalidData(format!("{} holds neither a tree nor a λ-net", path.display()))),
        }
    }

    pub fn classifier(&self) -> &dyn Classifier {
        match self {
            AnyModel::Tree(t) => t,
            AnyModel::Lambda(l) => l,
        }
    }
}

/// `grid.csv` and `grid.svg`.
pub fn boundary(config: &RunConfig, model: &Path, out: &Path) -> Result<Vec<PathBuf>> {
    let model = AnyModel::load(model)?;
    let grid = boundary_grid(model.classifier(), config.boundary.resolution)?;
    let mut written = prepare(config, out)?;
    write(out.join("grid.csv"), &grid.to_csv(), &mut written)?;
    write(out.join("grid.svg"), &grid.to_svg(400), &mut written)?;
    Ok(written)
}

/// `train.csv`, `valid.csv`, `test.csv` and `scaling.json`.
pub fn preprocess_stage(config: &RunConfig, table: &Path, schema: &Path, out: &Path) -> Result<Vec<PathBuf>> {
    require(&[table, schema])?;
    let schema = Schema::load(schema)?;
    let file = std::fs::File::open(table).map_err(|e| Error::io(table, e))?;
    let split = preprocess(
        file,
        &schema,
        &PreprocessConfig {
            seed: derive_seed(config.master_seed, "preprocess", 0),
            scale_before_split: config.preprocess.scale_before_split,
        },
    )?;
    let mut written = prepare(config, out)?;
    split.write_dir(out)?;
    written.extend(["train.csv", "valid.csv", "test.csv", "scaling.json"].map(|f| out.join(f)));
    Ok(written)
}

pub fn export(tree: &Path, format: ExportFormat) -> Result<String> {
    require(&[tree])?;
    let text = std::fs::read_to_string(tree).map_err(|e| Error::io(tree, e))?;
    export_tree(&TreeModel::from_json(&text)?, format)
}
