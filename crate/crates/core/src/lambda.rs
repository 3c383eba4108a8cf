//! λ-nets: the small classifiers an I-Net learns to interpret, their
//! flattened parameter vectors, and the corpus of (θλ, dataset) pairs.

use std::path::{Path, PathBuf};

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::datagen::{generate_dataset, is_linearly_separable, SyntheticDataset};
use crate::error::{Error, Result};
use crate::nn::{bce_with_grad, Activation, Adam, DenseNet, ModelDocument};
use crate::seed::{derive_seed, rng_from_seed};

pub const LAMBDA_HIDDEN: usize = 128;
pub const LAMBDA_FORMAT_VERSION: u32 = 1;
/// Consecutive linearly separable draws tolerated for one corpus entry.
pub const MAX_SEPARABLE_REJECTIONS: usize = 100;

/// Length of θλ for an `n → 128 → 1` network.
pub fn lambda_theta_len(n: usize) -> usize {
    LAMBDA_HIDDEN * n + LAMBDA_HIDDEN + LAMBDA_HIDDEN + 1
}

/// Multiply hidden unit `j`'s incoming weights and bias by `scales[j]` and
/// divide its outgoing weight by the same factor. For positive factors the
/// ReLU network computes exactly the same function.
pub fn rescale_hidden_units(theta: &mut [f64], n: usize, scales: &[f64]) {
    let h = scales.len();
    debug_assert_eq!(theta.len(), h * n + 2 * h + 1);
    for (j, &c) in scales.iter().enumerate() {
        for i in 0..n {
            theta[i * h + j] *= c;
        }
        theta[n * h + j] *= c;
        theta[n * h + h + j] /= c;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LambdaConfig {
    pub hidden: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub patience: usize,
    /// Fraction of the dataset held out for early stopping and scoring.
    pub holdout_fraction: f64,
    /// Seed of the starting weights shared by every λ-net; a per-net draw
    /// from the training seed when unset.
    pub init_seed: Option<u64>,
}

impl Default for LambdaConfig {
    fn default() -> Self {
        Self {
            hidden: LAMBDA_HIDDEN,
            learning_rate: 0.001,
            epochs: 1000,
            batch_size: 64,
            patience: 25,
            holdout_fraction: 0.1,
            init_seed: Some(0),
        }
    }
}

impl LambdaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 {
            return Err(Error::invalid("lambda.hidden", "must be positive"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::invalid("lambda.learning_rate", "must be positive"));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::invalid(
                "lambda.epochs",
                "epochs and batch_size must be positive",
            ));
        }
        if !(self.holdout_fraction > 0.0 && self.holdout_fraction < 1.0) {
            return Err(Error::invalid("lambda.holdout_fraction", "must lie in (0, 1)"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LambdaNet {
    pub net: DenseNet,
    pub dataset_ref: String,
    /// Accuracy on the held-out rows.
    pub test_accuracy: f64,
    /// Rows of the source dataset never used for gradient steps.
    pub holdout_rows: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct LambdaDocument {
    format_version: u32,
    dataset_ref: String,
    test_accuracy: f64,
    holdout_rows: Vec<usize>,
    model: ModelDocument,
}

impl LambdaNet {
    pub fn n_features(&self) -> usize {
        self.net.input_dim()
    }

    /// θλ: weights row-major then biases, layer by layer.
    pub fn theta(&self) -> Vec<f64> {
        flatten_params(&self.net)
    }

    pub fn predict(&self, x: &[f64]) -> Result<f64> {
        predict_lambda(self, x)
    }

    pub fn predict_batch(&self, x: ArrayView2<f64>) -> Result<Vec<f64>> {
        Ok(self.net.forward(x)?.column(0).to_vec())
    }

    /// `round(λ(x))` per row, with 0.5 rounding up.
    pub fn predict_labels(&self, x: ArrayView2<f64>) -> Result<Vec<u8>> {
        Ok(self.predict_batch(x)?.into_iter().map(round_half_up).collect())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&LambdaDocument {
            format_version: LAMBDA_FORMAT_VERSION,
            dataset_ref: self.dataset_ref.clone(),
            test_accuracy: self.test_accuracy,
            holdout_rows: self.holdout_rows.clone(),
            model: self.net.to_document(),
        })?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: LambdaDocument = serde_json::from_str(text)?;
        if doc.format_version != LAMBDA_FORMAT_VERSION {
            return Err(Error::FormatVersion {
                found: doc.format_version,
                expected: LAMBDA_FORMAT_VERSION,
            });
        }
        let net = DenseNet::from_document(doc.model)?;
        if net.output_dim() != 1 {
            return Err(Error::InvalidData("a λ-net has exactly one output".into()));
        }
        Ok(Self {
            net,
            dataset_ref: doc.dataset_ref,
            test_accuracy: doc.test_accuracy,
            holdout_rows: doc.holdout_rows,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

#[inline]
pub fn round_half_up(p: f64) -> u8 {
    u8::from(p >= 0.5)
}

pub fn flatten_params(net: &DenseNet) -> Vec<f64> {
    net.flatten()
}

pub fn predict_lambda(lambda: &LambdaNet, x: &[f64]) -> Result<f64> {
    if x.len() != lambda.n_features() {
        return Err(Error::Dimension {
            expected: lambda.n_features(),
            actual: x.len(),
        });
    }
    let row = ArrayView2::from_shape((1, x.len()), x).expect("one row");
    Ok(lambda.net.forward(row)?[[0, 0]])
}

fn accuracy(net: &DenseNet, ds: &Dataset) -> Result<f64> {
    let probs = net.forward(ds.features.view())?;
    let hits = probs
        .column(0)
        .iter()
        .zip(&ds.labels)
        .filter(|(p, &y)| round_half_up(**p) == y)
        .count();
    Ok(hits as f64 / ds.rows() as f64)
}

fn mean_bce(net: &DenseNet, ds: &Dataset, targets: &[f64]) -> Result<f64> {
    let probs = net.forward(ds.features.view())?;
    Ok(bce_with_grad(&probs, targets).0)
}

/// Train an `n → hidden → 1` relu/sigmoid network with binary cross-entropy
/// and Adam. Early stopping watches the held-out loss and restores the best
/// parameters.
pub fn train_lambda_net(ds: &Dataset, dataset_ref: &str, config: &LambdaConfig, seed: u64) -> Result<LambdaNet> {
    config.validate()?;
    if ds.rows() < 2 {
        return Err(Error::InvalidData("a λ dataset needs at least two rows".into()));
    }
    let mut rng = rng_from_seed(seed);
    let mut order: Vec<usize> = (0..ds.rows()).collect();
    order.shuffle(&mut rng);
    let holdout_len = ((ds.rows() as f64 * config.holdout_fraction).round() as usize).clamp(1, ds.rows() - 1);
    let (train_rows, holdout_rows) = order.split_at(ds.rows() - holdout_len);
    let mut holdout_rows = holdout_rows.to_vec();
    holdout_rows.sort_unstable();
    let train = ds.select(train_rows);
    let holdout = ds.select(&holdout_rows);
    let train_targets: Vec<f64> = train.labels.iter().map(|&l| f64::from(l)).collect();
    let holdout_targets: Vec<f64> = holdout.labels.iter().map(|&l| f64::from(l)).collect();

    let n = ds.n_features();
    let sizes = [n, config.hidden, 1];
    let activations = [Activation::Relu, Activation::Sigmoid];
    let mut net = match config.init_seed {
        Some(s) => DenseNet::init(&sizes, &activations, &[0.0, 0.0], &mut rng_from_seed(s))?,
        None => DenseNet::init(&sizes, &activations, &[0.0, 0.0], &mut rng)?,
    };
    let mut opt = Adam::new(config.learning_rate);
    let mut best = (mean_bce(&net, &holdout, &holdout_targets)?, net.clone());
    let mut stale = 0;
    let mut idx: Vec<usize> = (0..train.rows()).collect();

    for epoch in 0..config.epochs {
        idx.shuffle(&mut rng);
        for batch in idx.chunks(config.batch_size) {
            let x = train.features.select(Axis(0), batch);
            let t: Vec<f64> = batch.iter().map(|&i| train_targets[i]).collect();
            let (probs, cache) = net.forward_train::<crate::seed::SeededRng>(x.view(), None)?;
            let (loss, grad) = bce_with_grad(&probs, &t);
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss(format!("λ-net {dataset_ref}, epoch {epoch}")));
            }
            let grads = net.backward(&cache, &grad)?;
            opt.step(&mut net.param_blocks_mut(), &grads.blocks())?;
        }
        let val = mean_bce(&net, &holdout, &holdout_targets)?;
        if !val.is_finite() {
            return Err(Error::NonFiniteLoss(format!(
                "λ-net {dataset_ref}, epoch {epoch} holdout"
            )));
        }
        if val < best.0 {
            best = (val, net.clone());
            stale = 0;
        } else {
            stale += 1;
            if stale >= config.patience {
                break;
            }
        }
    }
    let net = best.1;
    Ok(LambdaNet {
        test_accuracy: accuracy(&net, &holdout)?,
        net,
        dataset_ref: dataset_ref.to_string(),
        holdout_rows,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Valid,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusEntry {
    pub id: String,
    pub split: Split,
    pub dataset: SyntheticDataset,
    pub lambda: LambdaNet,
}

impl CorpusEntry {
    /// Held-out rows of the entry's own dataset.
    pub fn test_rows(&self) -> Array2<f64> {
        self.dataset.data.features.select(Axis(0), &self.lambda.holdout_rows)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusCounts {
    pub train: usize,
    pub valid: usize,
    #[serde(default)]
    pub test: usize,
}

impl CorpusCounts {
    pub fn total(&self) -> usize {
        self.train + self.valid + self.test
    }

    fn split_of(&self, index: usize) -> Split {
        if index < self.train {
            Split::Train
        } else if index < self.train + self.valid {
            Split::Valid
        } else {
            Split::Test
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub master_seed: u64,
    pub n: usize,
    pub m: usize,
    pub p: f64,
    pub counts: CorpusCounts,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LambdaCorpus {
    pub spec: CorpusSpec,
    pub entries: Vec<CorpusEntry>,
}

pub const CORPUS_FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    #[serde(flatten)]
    spec: CorpusSpec,
    entries: Vec<ManifestEntry>,
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    id: String,
    split: Split,
    dataset: String,
    model: String,
}

/// Draw datasets until one is not linearly separable.
pub fn draw_inseparable_dataset(n: usize, m: usize, p: f64, master_seed: u64, index: u64) -> Result<SyntheticDataset> {
    let label = format!("dataset-{index}");
    for attempt in 0..MAX_SEPARABLE_REJECTIONS as u64 {
        let ds = generate_dataset(n, m, p, derive_seed(master_seed, &label, attempt))?;
        if !is_linearly_separable(&ds.data) {
            return Ok(ds);
        }
    }
    Err(Error::InvalidData(format!(
        "{MAX_SEPARABLE_REJECTIONS} consecutive linearly separable datasets for corpus entry {index}"
    )))
}

fn build_entry(spec: &CorpusSpec, config: &LambdaConfig, index: usize) -> Result<CorpusEntry> {
    let id = format!("lambda-{index:05}");
    let dataset = draw_inseparable_dataset(spec.n, spec.m, spec.p, spec.master_seed, index as u64)?;
    let lambda = train_lambda_net(
        &dataset.data,
        &id,
        config,
        derive_seed(spec.master_seed, "lambda", index as u64),
    )?;
    Ok(CorpusEntry {
        id,
        split: spec.counts.split_of(index),
        dataset,
        lambda,
    })
}

/// Generate datasets (rejecting linearly separable ones), train one λ-net
/// per dataset, and tag entries train / valid / test in index order.
pub fn build_corpus(spec: &CorpusSpec, config: &LambdaConfig) -> Result<LambdaCorpus> {
    if spec.counts.train == 0 || spec.counts.valid == 0 {
        return Err(Error::invalid(
            "corpus.counts",
            "train and valid counts must be at least 1",
        ));
    }
    config.validate()?;
    let indices: Vec<usize> = (0..spec.counts.total()).collect();
    #[cfg(feature = "parallel")]
    let entries = {
        use rayon::prelude::*;
        indices
            .par_iter()
            .map(|&i| build_entry(spec, config, i))
            .collect::<Result<Vec<_>>>()?
    };
    #[cfg(not(feature = "parallel"))]
    let entries = indices
        .iter()
        .map(|&i| build_entry(spec, config, i))
        .collect::<Result<Vec<_>>>()?;
    Ok(LambdaCorpus {
        spec: spec.clone(),
        entries,
    })
}

impl LambdaCorpus {
    pub fn n(&self) -> usize {
        self.spec.n
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &CorpusEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    /// `manifest.json`, `datasets/<id>.csv` (+ provenance) and `models/<id>.json`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let datasets = dir.join("datasets");
        let models = dir.join("models");
        for d in [&datasets, &models] {
            std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
        }
        let mut manifest = Manifest {
            format_version: CORPUS_FORMAT_VERSION,
            spec: self.spec.clone(),
            entries: Vec::with_capacity(self.entries.len()),
        };
        for e in &self.entries {
            e.dataset.save(&datasets, &e.id)?;
            e.lambda.save(&models.join(format!("{}.json", e.id)))?;
            manifest.entries.push(ManifestEntry {
                id: e.id.clone(),
                split: e.split,
                dataset: format!("datasets/{}.csv", e.id),
                model: format!("models/{}.json", e.id),
            });
        }
        let path = dir.join("manifest.json");
        std::fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.json");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: Manifest = serde_json::from_str(&text)?;
        if manifest.format_version != CORPUS_FORMAT_VERSION {
            return Err(Error::FormatVersion {
                found: manifest.format_version,
                expected: CORPUS_FORMAT_VERSION,
            });
        }
        let missing: Vec<PathBuf> = manifest
            .entries
            .iter()
            .flat_map(|e| [dir.join(&e.dataset), dir.join(&e.model)])
            .filter(|p| !p.exists())
            .collect();
        if !missing.is_empty() {
            return Err(Error::MissingArtifacts(missing));
        }
        let entries = manifest
            .entries
            .into_iter()
            .map(|e| {
                Ok(CorpusEntry {
                    dataset: SyntheticDataset::load(&dir.join("datasets"), &e.id)?,
                    lambda: LambdaNet::load(&dir.join(&e.model))?,
                    id: e.id,
                    split: e.split,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            spec: manifest.spec,
            entries,
        })
    }
}
