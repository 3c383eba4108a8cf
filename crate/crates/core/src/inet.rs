//! Interpretation networks. An I-Net is a dense trunk that reads a flattened
//! λ-net parameter vector and emits a surrogate tree's parameter vector; the
//! head applies per-segment activations (softmax feature identifiers,
//! squeezed-sigmoid split values, sigmoid leaves, linear soft-tree
//! parameters) before the vector is decoded into a tree.
//!
//! Training minimizes the mean binary cross-entropy between `round(λ(x))` and
//! the surrogate's soft output `g(x)`, evaluated on each λ-net's own training
//! rows, averaged over the λ-nets in a batch.

use std::path::{Path, PathBuf};

use ndarray::{Array2, Axis};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::fidelity;
use crate::lambda::{lambda_theta_len, rescale_hidden_units, CorpusEntry, LambdaCorpus, LambdaNet, Split};
use crate::nn::{clamped_bce, Activation, Adam, DenseNet, Gradients};
use crate::seed::{derive_seed, rng_from_seed, SeededRng};
use crate::trees::{decode, HeadEvaluator, Segment, ThetaLayout, TreeFamily, TreeModel, DEFAULT_DEPTH, DEFAULT_GAMMA};

pub const HEAD_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub dropout: Vec<f64>,
}

impl Architecture {
    /// Tuned trunk per family.
    pub fn preset(family: TreeFamily) -> Self {
        match family {
            TreeFamily::StandardDt => Self {
                hidden: vec![1792, 512, 512],
                activation: Activation::Sigmoid,
                dropout: vec![0.0, 0.0, 0.5],
            },
            TreeFamily::UnivariateSdt => Self {
                hidden: vec![4096, 2048],
                activation: Activation::Swish,
                dropout: vec![0.0, 0.5],
            },
            TreeFamily::StandardSdt => Self {
                hidden: vec![1792, 512, 512],
                activation: Activation::Swish,
                dropout: vec![0.3, 0.3, 0.3],
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden.len() != self.dropout.len() {
            return Err(Error::invalid(
                "inet.architecture.dropout",
                format!("{} rates for {} hidden layers", self.dropout.len(), self.hidden.len()),
            ));
        }
        if self.hidden.contains(&0) {
            return Err(Error::invalid(
                "inet.architecture.hidden",
                "layer widths must be positive",
            ));
        }
        if self.dropout.iter().any(|r| !(0.0..1.0).contains(r)) {
            return Err(Error::invalid("inet.architecture.dropout", "rates must lie in [0, 1)"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct INetConfig {
    pub depth: usize,
    /// Sharpness of the relaxed standard-tree routing used during training.
    pub gamma: f64,
    /// Overrides the family preset when set.
    pub architecture: Option<Architecture>,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub patience: usize,
    /// Rows per λ dataset used for each training loss evaluation; all rows
    /// when unset.
    pub loss_rows: Option<usize>,
    /// Standardize each θλ coordinate with train-corpus statistics.
    pub standardize_inputs: bool,
    /// Decoupled weight decay applied to every trunk parameter per step.
    pub weight_decay: f64,
    /// Which validation number picks the returned model.
    pub select_on: Selection,
    /// Evaluate and keep an exponential moving average of the trunk
    /// weights with this per-step decay.
    pub ema_decay: Option<f64>,
    /// Per batch, rescale every λ hidden unit by `exp(u)`, `u` uniform in
    /// `[-a, a]`; the λ function is unchanged. 0 disables.
    pub augment_rescale: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    ValidLoss,
    /// Mean hard-tree fidelity on the valid λ-nets' held-out rows.
    ValidFidelity,
}

impl Default for INetConfig {
    fn default() -> Self {
        Self {
            depth: DEFAULT_DEPTH,
            gamma: DEFAULT_GAMMA,
            architecture: None,
            batch_size: 256,
            learning_rate: 0.001,
            epochs: 500,
            patience: 25,
            loss_rows: None,
            standardize_inputs: true,
            weight_decay: 0.0,
            select_on: Selection::ValidLoss,
            ema_decay: None,
            augment_rescale: 0.0,
        }
    }
}

impl INetConfig {
    pub fn architecture_for(&self, family: TreeFamily) -> Architecture {
        self.architecture
            .clone()
            .unwrap_or_else(|| Architecture::preset(family))
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.depth > 10 {
            return Err(Error::invalid("inet.depth", "must lie in 1..=10"));
        }
        if !(self.gamma > 0.0) {
            return Err(Error::invalid("inet.gamma", "must be positive"));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::invalid(
                "inet.batch_size",
                "batch_size and epochs must be positive",
            ));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::invalid("inet.learning_rate", "must be positive"));
        }
        if !(self.weight_decay >= 0.0) || self.weight_decay * self.learning_rate >= 1.0 {
            return Err(Error::invalid(
                "inet.weight_decay",
                "must be non-negative and below 1/learning_rate",
            ));
        }
        if matches!(self.ema_decay, Some(d) if !(0.0..1.0).contains(&d)) {
            return Err(Error::invalid("inet.ema_decay", "must lie in [0, 1)"));
        }
        if !(self.augment_rescale >= 0.0) {
            return Err(Error::invalid("inet.augment_rescale", "must be non-negative"));
        }
        if self.loss_rows == Some(0) {
            return Err(Error::invalid("inet.loss_rows", "must be positive when set"));
        }
        if let Some(a) = &self.architecture {
            a.validate()?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct INetModel {
    pub trunk: DenseNet,
    pub layout: ThetaLayout,
    pub gamma: f64,
    pub input_norm: Option<InputNorm>,
}

/// Per-coordinate affine map `(θ − mean) / scale` applied before the trunk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputNorm {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl InputNorm {
    /// Coordinates that never vary keep scale 1.
    pub fn fit<'a>(thetas: impl Iterator<Item = &'a [f64]>, width: usize) -> Self {
        let rows: Vec<&[f64]> = thetas.collect();
        let count = rows.len().max(1) as f64;
        let mut mean = vec![0.0; width];
        for r in &rows {
            mean.iter_mut().zip(r.iter()).for_each(|(m, v)| *m += v / count);
        }
        let mut var = vec![0.0; width];
        for r in &rows {
            var.iter_mut()
                .zip(r.iter().zip(&mean))
                .for_each(|(s, (v, m))| *s += (v - m).powi(2) / count);
        }
        let scale = var
            .into_iter()
            .map(|v| if v.sqrt() > 1e-12 { v.sqrt() } else { 1.0 })
            .collect();
        Self { mean, scale }
    }
}

/// Sidecar describing how to read the trunk's output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadDescriptor {
    pub format_version: u32,
    pub family: TreeFamily,
    pub n: usize,
    pub depth: usize,
    pub gamma: f64,
    pub input_len: usize,
    pub segments: Vec<Segment>,
    #[serde(default)]
    pub input_norm: Option<InputNorm>,
}

/// One λ-net's training signal: its θλ, the rows the loss is evaluated on,
/// and `round(λ(x))` for those rows.
#[derive(Debug, Clone, PartialEq)]
pub struct LossItem {
    pub theta: Vec<f64>,
    pub rows: Array2<f64>,
    pub targets: Vec<f64>,
}

impl LossItem {
    pub fn from_lambda(lambda: &LambdaNet, rows: Array2<f64>) -> Result<Self> {
        let targets = lambda.predict_labels(rows.view())?.into_iter().map(f64::from).collect();
        Ok(Self {
            theta: lambda.theta(),
            rows,
            targets,
        })
    }

    pub fn from_entry(entry: &CorpusEntry) -> Result<Self> {
        Self::from_lambda(&entry.lambda, entry.dataset.data.features.clone())
    }
}

/// Mean clamped binary cross-entropy between `targets` and the soft tree
/// output over `rows`; adds `scale · ∂loss/∂theta` into `grad` when given.
pub fn fidelity_bce(
    evaluator: &mut HeadEvaluator,
    theta: &[f64],
    rows: &Array2<f64>,
    targets: &[f64],
    mut grad: Option<(&mut [f64], f64)>,
) -> Result<f64> {
    if rows.nrows() != targets.len() || rows.nrows() == 0 {
        return Err(Error::Dimension {
            expected: rows.nrows(),
            actual: targets.len(),
        });
    }
    let m = rows.nrows() as f64;
    let mut total = 0.0;
    for (row, &t) in rows.rows().into_iter().zip(targets) {
        let x = row.as_slice().expect("standard layout");
        match grad.as_mut() {
            None => {
                let g = evaluator.eval(theta, x)?;
                total += clamped_bce(g, t).0;
            }
            Some((buf, scale)) => {
                // Two passes keep the per-row derivative exact: the first
                // gives g, the second accumulates dL/dg · dg/dθ.
                let g = evaluator.eval(theta, x)?;
                let (l, dl) = clamped_bce(g, t);
                total += l;
                if dl != 0.0 {
                    evaluator.eval_with_grad(theta, x, *scale * dl / m, buf)?;
                }
            }
        }
    }
    let loss = total / m;
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss("I-Net fidelity loss".into()));
    }
    Ok(loss)
}

/// Fidelity loss of an activated head vector against a λ-net on `x`.
pub fn inet_loss(
    theta_g: &[f64],
    layout: &ThetaLayout,
    lambda: &LambdaNet,
    x: &Array2<f64>,
    gamma: f64,
) -> Result<f64> {
    let targets: Vec<f64> = lambda.predict_labels(x.view())?.into_iter().map(f64::from).collect();
    let mut evaluator = HeadEvaluator::new(layout.clone(), gamma)?;
    fidelity_bce(&mut evaluator, theta_g, x, &targets, None)
}

/// Untrained I-Net for λ-nets with `n` inputs.
pub fn build_inet(family: TreeFamily, n: usize, config: &INetConfig, seed: u64) -> Result<INetModel> {
    config.validate()?;
    let layout = ThetaLayout::new(family, n, config.depth)?;
    let arch = config.architecture_for(family);
    arch.validate()?;
    let mut sizes = vec![lambda_theta_len(n)];
    sizes.extend(&arch.hidden);
    sizes.push(layout.len());
    let mut activations = vec![arch.activation; arch.hidden.len()];
    activations.push(Activation::Linear);
    let mut dropout = arch.dropout.clone();
    dropout.push(0.0);
    let trunk = DenseNet::init(&sizes, &activations, &dropout, &mut rng_from_seed(seed))?;
    Ok(INetModel {
        trunk,
        layout,
        gamma: config.gamma,
        input_norm: None,
    })
}

impl INetModel {
    pub fn family(&self) -> TreeFamily {
        self.layout.family
    }

    pub fn n(&self) -> usize {
        self.layout.n
    }

    /// Activated head vector for one θλ.
    pub fn theta_g(&self, theta_lambda: &[f64]) -> Result<Vec<f64>> {
        let expected = self.trunk.input_dim();
        if theta_lambda.len() != expected {
            return Err(Error::Dimension {
                expected,
                actual: theta_lambda.len(),
            });
        }
        let x = self.inputs(std::iter::once(theta_lambda))?;
        let raw = self.trunk.forward(x.view())?;
        self.layout.activate(raw.row(0).as_slice().expect("standard layout"))
    }

    /// θλ → surrogate tree; a pure function of the model and θλ.
    pub fn interpret(&self, theta_lambda: &[f64]) -> Result<TreeModel> {
        decode(&self.theta_g(theta_lambda)?, &self.layout)
    }

    /// Mean loss over `items` without dropout.
    pub fn loss(&self, items: &[LossItem]) -> Result<f64> {
        let mut evaluator = HeadEvaluator::new(self.layout.clone(), self.gamma)?;
        let mut total = 0.0;
        for chunk in items.chunks(512) {
            let x = self.inputs(chunk.iter().map(|i| i.theta.as_slice()))?;
            let raw = self.trunk.forward(x.view())?;
            for (item, out) in chunk.iter().zip(raw.rows()) {
                let act = self.layout.activate(out.as_slice().expect("standard layout"))?;
                total += fidelity_bce(&mut evaluator, &act, &item.rows, &item.targets, None)?;
            }
        }
        Ok(total / items.len() as f64)
    }

    /// Mean loss over `items` and its gradient w.r.t. trunk parameters.
    /// Dropout is applied only when `dropout_rng` is given.
    pub fn loss_and_grad(&self, items: &[&LossItem], dropout_rng: Option<&mut SeededRng>) -> Result<(f64, Gradients)> {
        let x = self.inputs(items.iter().map(|i| i.theta.as_slice()))?;
        let (raw, cache) = self.trunk.forward_train(x.view(), dropout_rng)?;
        let mut evaluator = HeadEvaluator::new(self.layout.clone(), self.gamma)?;
        let b = items.len() as f64;
        let mut upstream = Array2::zeros(raw.raw_dim());
        let mut total = 0.0;
        let mut grad_act = vec![0.0; self.layout.len()];
        for ((item, out), mut up) in items.iter().zip(raw.rows()).zip(upstream.rows_mut()) {
            let act = self.layout.activate(out.as_slice().expect("standard layout"))?;
            grad_act.fill(0.0);
            total += fidelity_bce(
                &mut evaluator,
                &act,
                &item.rows,
                &item.targets,
                Some((&mut grad_act, 1.0 / b)),
            )?;
            let g_raw = self.layout.activation_backward(&act, &grad_act);
            up.iter_mut().zip(g_raw).for_each(|(u, g)| *u = g);
        }
        let grads = self.trunk.backward(&cache, &upstream)?;
        Ok((total / b, grads))
    }

    /// Stack θλ rows into the trunk's (normalized) input matrix.
    pub fn inputs<'a>(&self, thetas: impl Iterator<Item = &'a [f64]>) -> Result<Array2<f64>> {
        let mut x = stack_thetas(thetas, self.trunk.input_dim())?;
        if let Some(norm) = &self.input_norm {
            for mut row in x.rows_mut() {
                for ((v, m), s) in row.iter_mut().zip(&norm.mean).zip(&norm.scale) {
                    *v = (*v - m) / s;
                }
            }
        }
        Ok(x)
    }

    pub fn head_descriptor(&self) -> HeadDescriptor {
        HeadDescriptor {
            format_version: HEAD_FORMAT_VERSION,
            family: self.layout.family,
            n: self.layout.n,
            depth: self.layout.depth,
            gamma: self.gamma,
            input_len: self.trunk.input_dim(),
            segments: self.layout.segments.clone(),
            input_norm: self.input_norm.clone(),
        }
    }

    /// Head sidecar path: `m.json` → `m.head.json`.
    pub fn head_path(model_path: &Path) -> PathBuf {
        let stem = model_path.file_stem().and_then(|s| s.to_str()).unwrap_or("inet");
        model_path.with_file_name(format!("{stem}.head.json"))
    }

    pub fn save(&self, model_path: &Path) -> Result<()> {
        std::fs::write(model_path, self.trunk.to_json()?).map_err(|e| Error::io(model_path, e))?;
        let head = Self::head_path(model_path);
        std::fs::write(&head, serde_json::to_string_pretty(&self.head_descriptor())?).map_err(|e| Error::io(&head, e))
    }

    pub fn load(model_path: &Path) -> Result<Self> {
        let head_path = Self::head_path(model_path);
        let missing: Vec<PathBuf> = [model_path.to_path_buf(), head_path.clone()]
            .into_iter()
            .filter(|p| !p.exists())
            .collect();
        if !missing.is_empty() {
            return Err(Error::MissingArtifacts(missing));
        }
        let text = std::fs::read_to_string(model_path).map_err(|e| Error::io(model_path, e))?;
        let trunk = DenseNet::from_json(&text)?;
        let text = std::fs::read_to_string(&head_path).map_err(|e| Error::io(&head_path, e))?;
        let head: HeadDescriptor = serde_json::from_str(&text)?;
        if head.format_version != HEAD_FORMAT_VERSION {
            return Err(Error::FormatVersion {
                found: head.format_version,
                expected: HEAD_FORMAT_VERSION,
            });
        }
        let layout = ThetaLayout::new(head.family, head.n, head.depth)?;
        let norm_ok = head
            .input_norm
            .as_ref()
            .is_none_or(|n| n.mean.len() == head.input_len && n.scale.len() == head.input_len);
        if layout.segments != head.segments
            || trunk.output_dim() != layout.len()
            || trunk.input_dim() != head.input_len
            || !norm_ok
        {
            return Err(Error::InvalidData("head descriptor does not match the trunk".into()));
        }
        Ok(Self {
            trunk,
            layout,
            gamma: head.gamma,
            input_norm: head.input_norm,
        })
    }
}

fn stack_thetas<'a>(thetas: impl Iterator<Item = &'a [f64]>, width: usize) -> Result<Array2<f64>> {
    let mut data = Vec::new();
    let mut rows = 0;
    for t in thetas {
        if t.len() != width {
            return Err(Error::Dimension {
                expected: width,
                actual: t.len(),
            });
        }
        data.extend_from_slice(t);
        rows += 1;
    }
    Ok(Array2::from_shape_vec((rows, width), data).expect("rows × width"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_loss: f64,
    pub valid_fidelity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingReport {
    pub initial_valid_loss: f64,
    pub best_valid_loss: f64,
    pub best_valid_fidelity: f64,
    pub best_epoch: Option<usize>,
    pub history: Vec<EpochRecord>,
}

/// Train an I-Net on the corpus train split with early stopping on the valid
/// split. Returns the best model seen.
pub fn train_inet(
    corpus: &LambdaCorpus,
    family: TreeFamily,
    config: &INetConfig,
    seed: u64,
) -> Result<(INetModel, TrainingReport)> {
    config.validate()?;
    let train: Vec<LossItem> = corpus
        .split(Split::Train)
        .map(LossItem::from_entry)
        .collect::<Result<_>>()?;
    let valid: Vec<LossItem> = corpus
        .split(Split::Valid)
        .map(LossItem::from_entry)
        .collect::<Result<_>>()?;
    if train.len() < 2 || valid.len() < 2 {
        return Err(Error::InvalidData(format!(
            "corpus too small: {} train / {} valid entries (need at least 2 each)",
            train.len(),
            valid.len()
        )));
    }
    let mut model = build_inet(family, corpus.n(), config, derive_seed(seed, "inet-init", 0))?;
    if config.standardize_inputs {
        model.input_norm = Some(InputNorm::fit(
            train.iter().map(|i| i.theta.as_slice()),
            model.trunk.input_dim(),
        ));
    }
    let mut rng = rng_from_seed(derive_seed(seed, "inet-train", 0));
    let mut opt = Adam::new(config.learning_rate);

    let holdouts: Vec<(&LambdaNet, Array2<f64>)> =
        corpus.split(Split::Valid).map(|e| (&e.lambda, e.test_rows())).collect();
    let valid_fidelity = |model: &INetModel| -> Result<f64> {
        let mut total = 0.0;
        for (lambda, rows) in &holdouts {
            total += fidelity(&model.interpret(&lambda.theta())?, *lambda, rows.view())?;
        }
        Ok(total / holdouts.len() as f64)
    };
    // Larger is better for both criteria.
    let score = |loss: f64, fid: f64| match config.select_on {
        Selection::ValidLoss => -loss,
        Selection::ValidFidelity => fid,
    };

    let initial = model.loss(&valid)?;
    let initial_fid = valid_fidelity(&model)?;
    let mut best = (score(initial, initial_fid), initial, initial_fid, model.clone(), None);
    let mut history = Vec::new();
    let mut stale = 0;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let decay = 1.0 - config.learning_rate * config.weight_decay;
    let mut ema = config.ema_decay.map(|d| (d, model.clone()));
    let n = corpus.n();

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(config.batch_size) {
            let prepared: Vec<LossItem>;
            let items: Vec<&LossItem> = if config.loss_rows.is_some() || config.augment_rescale > 0.0 {
                prepared = batch
                    .iter()
                    .map(|&i| {
                        let mut item = match config.loss_rows {
                            Some(k) => subsample(&train[i], k, &mut rng),
                            None => train[i].clone(),
                        };
                        if config.augment_rescale > 0.0 {
                            let a = config.augment_rescale;
                            let hidden = (item.theta.len() - 1) / (n + 2);
                            let scales: Vec<f64> = (0..hidden).map(|_| rng.random_range(-a..=a).exp()).collect();
                            rescale_hidden_units(&mut item.theta, n, &scales);
                        }
                        item
                    })
                    .collect();
                prepared.iter().collect()
            } else {
                batch.iter().map(|&i| &train[i]).collect()
            };
            let (loss, grads) = model.loss_and_grad(&items, Some(&mut rng))?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss(format!("I-Net epoch {epoch}")));
            }
            if config.weight_decay > 0.0 {
                for block in model.trunk.param_blocks_mut() {
                    block.iter_mut().for_each(|v| *v *= decay);
                }
            }
            opt.step(&mut model.trunk.param_blocks_mut(), &grads.blocks())?;
            if let Some((d, shadow)) = ema.as_mut() {
                let current = model.trunk.flatten();
                let mut at = 0;
                for block in shadow.trunk.param_blocks_mut() {
                    for (e, &p) in block.iter_mut().zip(&current[at..]) {
                        *e = *d * *e + (1.0 - *d) * p;
                    }
                    at += block.len();
                }
            }
            epoch_loss += loss * batch.len() as f64;
        }
        let judged = ema.as_ref().map_or(&model, |(_, shadow)| shadow);
        let valid_loss = judged.loss(&valid)?;
        let fid = valid_fidelity(judged)?;
        history.push(EpochRecord {
            epoch,
            train_loss: epoch_loss / train.len() as f64,
            valid_loss,
            valid_fidelity: fid,
        });
        let s = score(valid_loss, fid);
        if s > best.0 {
            best = (s, valid_loss, fid, judged.clone(), Some(epoch));
            stale = 0;
        } else {
            stale += 1;
            if stale >= config.patience {
                break;
            }
        }
    }
    let (_, best_valid_loss, best_valid_fidelity, model, best_epoch) = best;
    Ok((
        model,
        TrainingReport {
            initial_valid_loss: initial,
            best_valid_loss,
            best_valid_fidelity,
            best_epoch,
            history,
        },
    ))
}

fn subsample(item: &LossItem, k: usize, rng: &mut SeededRng) -> LossItem {
    if k >= item.targets.len() {
        return item.clone();
    }
    let all: Vec<usize> = (0..item.targets.len()).collect();
    let mut picked: Vec<usize> = all.choose_multiple(rng, k).copied().collect();
    picked.sort_unstable();
    LossItem {
        theta: item.theta.clone(),
        rows: item.rows.select(Axis(0), &picked),
        targets: picked.iter().map(|&i| item.targets[i]).collect(),
    }
}
