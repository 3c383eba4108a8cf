//! Gradient-trained soft decision trees.
//!
//! Branch probability at node `j` is `σ(β(x·w_j + b_j))`. The objective is
//! the clamped BCE of the all-leaf mixture `Σ_l π_l(x) Q_l`, plus the
//! depth-decayed balance penalty that pushes each node's mean branch
//! probability toward 1/2, plus `½·wd·‖w‖²`. The univariate variant feeds
//! `w ⊙ softmax(β2·|w|)` to the forward pass and keeps only the largest
//! `|w|` entry per node when decoding.

use ndarray::ArrayView2;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lambda::round_half_up;
use crate::nn::{clamped_bce, sigmoid, softmax_backward, softmax_in_place, Adam, PROB_CLAMP};
use crate::seed::{rng_from_seed, SeededRng};
use crate::trees::{internal_count, leaf_count, SoftTree, TreeModel, UnivariateSoftTree};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SdtConfig {
    pub depth: usize,
    pub learning_rate: f64,
    /// Balance penalty weight at the root; halves per level.
    pub reg_strength: f64,
    /// Inverse temperature inside the branch sigmoid.
    pub beta: f64,
    pub weight_decay: f64,
    pub max_path: bool,
    pub univariate: bool,
    /// Mask inverse temperature (univariate only).
    pub beta2: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub patience: usize,
    /// Fit rounded labels instead of raw probabilities.
    pub round_targets: bool,
}

impl Default for SdtConfig {
    fn default() -> Self {
        Self {
            depth: 3,
            learning_rate: 0.01,
            reg_strength: 0.001,
            beta: 1.0,
            weight_decay: 0.0005,
            max_path: true,
            univariate: false,
            beta2: 10.0,
            epochs: 200,
            batch_size: 64,
            patience: 20,
            round_targets: true,
        }
    }
}

impl SdtConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.depth > 10 {
            return Err(Error::invalid("sdt.depth", "must lie in 1..=10"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::invalid("sdt.learning_rate", "must be positive"));
        }
        if !(self.reg_strength >= 0.0) {
            return Err(Error::invalid("sdt.reg_strength", "must be non-negative"));
        }
        if !(self.beta > 0.0) {
            return Err(Error::invalid("sdt.beta", "must be positive"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::invalid("sdt.weight_decay", "must be non-negative"));
        }
        if self.univariate && !(self.beta2 > 0.0) {
            return Err(Error::invalid("sdt.beta2", "must be positive for univariate trees"));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::invalid("sdt.epochs", "epochs and batch_size must be positive"));
        }
        Ok(())
    }
}

/// Trainable parameters, stored flat.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SdtParams {
    pub n: usize,
    pub depth: usize,
    /// `[internal × n]`, row-major.
    pub w: Vec<f64>,
    pub b: Vec<f64>,
    /// `(φ0, φ1)` per leaf, flattened.
    pub phi: Vec<f64>,
}

impl SdtParams {
    pub fn zeros(n: usize, depth: usize) -> Self {
        let inner = internal_count(depth);
        Self {
            n,
            depth,
            w: vec![0.0; inner * n],
            b: vec![0.0; inner],
            phi: vec![0.0; 2 * leaf_count(depth)],
        }
    }

    pub fn random<R: Rng + ?Sized>(n: usize, depth: usize, rng: &mut R) -> Self {
        let mut p = Self::zeros(n, depth);
        let normal = Normal::new(0.0, 0.1).expect("valid std");
        p.w.iter_mut().chain(&mut p.phi).for_each(|v| *v = rng.sample(normal));
        p
    }

    fn blocks_mut(&mut self) -> [&mut [f64]; 3] {
        [&mut self.w, &mut self.b, &mut self.phi]
    }

    fn blocks(&self) -> [&[f64]; 3] {
        [&self.w, &self.b, &self.phi]
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.blocks().concat()
    }

    /// Filter actually used in the forward pass for node `j`.
    pub fn effective_filter(&self, j: usize, config: &SdtConfig) -> Vec<f64> {
        let w = &self.w[j * self.n..(j + 1) * self.n];
        if !config.univariate {
            return w.to_vec();
        }
        let mask = mask(w, config.beta2);
        w.iter().zip(&mask).map(|(w, m)| w * m).collect()
    }

    /// Decoded tree with `β` folded into filters and biases.
    pub fn to_tree(&self, config: &SdtConfig) -> TreeModel {
        let inner = internal_count(self.depth);
        let leaves: Vec<[f64; 2]> = self.phi.chunks(2).map(|c| [c[0], c[1]]).collect();
        let biases: Vec<f64> = self.b.iter().map(|b| config.beta * b).collect();
        if config.univariate {
            let mut features = Vec::with_capacity(inner);
            let mut values = Vec::with_capacity(inner);
            for j in 0..inner {
                let w = &self.w[j * self.n..(j + 1) * self.n];
                let mut k = 0;
                for (i, v) in w.iter().enumerate() {
                    if v.abs() > w[k].abs() {
                        k = i;
                    }
                }
                features.push(k);
                values.push(config.beta * self.effective_filter(j, config)[k]);
            }
            TreeModel::UnivariateSdt(UnivariateSoftTree {
                depth: self.depth,
                n_features: self.n,
                features,
                filter_values: values,
                biases,
                leaves,
            })
        } else {
            TreeModel::StandardSdt(SoftTree {
                depth: self.depth,
                n_features: self.n,
                filters: (0..inner)
                    .map(|j| {
                        self.effective_filter(j, config)
                            .iter()
                            .map(|w| config.beta * w)
                            .collect()
                    })
                    .collect(),
                biases,
                leaves,
            })
        }
    }
}

/// `softmax(β2·|w|)`
pub fn mask(w: &[f64], beta2: f64) -> Vec<f64> {
    let mut m: Vec<f64> = w.iter().map(|v| beta2 * v.abs()).collect();
    softmax_in_place(&mut m);
    m
}

fn node_level(j: usize) -> i32 {
    (usize::BITS - (j + 1).leading_zeros() - 1) as i32
}

/// Full objective on `(x, targets)`; accumulates its gradient into `grad`
/// when given.
pub fn sdt_loss(
    params: &SdtParams,
    x: ArrayView2<f64>,
    targets: &[f64],
    config: &SdtConfig,
    grad: Option<&mut SdtParams>,
) -> Result<f64> {
    let (n, depth) = (params.n, params.depth);
    if x.ncols() != n {
        return Err(Error::Dimension {
            expected: n,
            actual: x.ncols(),
        });
    }
    if x.nrows() != targets.len() || targets.is_empty() {
        return Err(Error::Dimension {
            expected: x.nrows(),
            actual: targets.len(),
        });
    }
    let inner = internal_count(depth);
    let nodes = inner + leaf_count(depth);
    let rows = targets.len();
    let beta = config.beta;

    let filters: Vec<Vec<f64>> = (0..inner).map(|j| params.effective_filter(j, config)).collect();
    let q: Vec<f64> = params.phi.chunks(2).map(|c| sigmoid(c[1] - c[0])).collect();

    // Forward: right probabilities and reach probabilities per row.
    let mut p = vec![0.0; rows * inner];
    let mut reach = vec![0.0; rows * nodes];
    let mut bce = 0.0;
    let mut dl = vec![0.0; rows];
    for (i, row) in x.rows().into_iter().enumerate() {
        let (p_i, a_i) = (
            &mut p[i * inner..(i + 1) * inner],
            &mut reach[i * nodes..(i + 1) * nodes],
        );
        a_i[0] = 1.0;
        for j in 0..inner {
            let dot: f64 = filters[j].iter().zip(row.iter()).map(|(w, x)| w * x).sum();
            p_i[j] = sigmoid(beta * (dot + params.b[j]));
            a_i[2 * j + 1] = a_i[j] * (1.0 - p_i[j]);
            a_i[2 * j + 2] = a_i[j] * p_i[j];
        }
        let y_hat: f64 = a_i[inner..].iter().zip(&q).map(|(a, q)| a * q).sum();
        let (l, d) = clamped_bce(y_hat, targets[i]);
        bce += l;
        dl[i] = d / rows as f64;
    }
    let mut loss = bce / rows as f64;

    // Balance penalty per internal node, computed over this batch.
    let mut alpha_grad = vec![0.0; inner];
    let mut reach_sum = vec![0.0; inner];
    let mut alpha = vec![0.0; inner];
    for j in 0..inner {
        let s0: f64 = (0..rows).map(|i| reach[i * nodes + j]).sum();
        if config.reg_strength == 0.0 || s0 <= 0.0 {
            continue;
        }
        let s1: f64 = (0..rows).map(|i| reach[i * nodes + j] * p[i * inner + j]).sum();
        let raw = s1 / s0;
        let a = raw.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
        let weight = config.reg_strength * 2f64.powi(-node_level(j));
        loss += -weight * 0.5 * (a.ln() + (1.0 - a).ln());
        if a == raw {
            alpha_grad[j] = -weight * 0.5 * (1.0 / a - 1.0 / (1.0 - a));
        }
        reach_sum[j] = s0;
        alpha[j] = a;
    }
    loss += 0.5 * config.weight_decay * params.w.iter().map(|w| w * w).sum::<f64>();
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss("soft tree objective".into()));
    }

    let Some(grad) = grad else {
        return Ok(loss);
    };

    // Backward: adjoints of reach probabilities flow bottom-up.
    let mut g_eff = vec![0.0; inner * n];
    let mut g_reach = vec![0.0; nodes];
    for (i, row) in x.rows().into_iter().enumerate() {
        let (p_i, a_i) = (&p[i * inner..(i + 1) * inner], &reach[i * nodes..(i + 1) * nodes]);
        g_reach.fill(0.0);
        for l in 0..q.len() {
            g_reach[inner + l] = dl[i] * q[l];
            let dq = dl[i] * a_i[inner + l] * q[l] * (1.0 - q[l]);
            grad.phi[2 * l + 1] += dq;
            grad.phi[2 * l] -= dq;
        }
        for j in (0..inner).rev() {
            let mut gp = 0.0;
            if alpha_grad[j] != 0.0 {
                g_reach[j] += alpha_grad[j] * (p_i[j] - alpha[j]) / reach_sum[j];
                gp += alpha_grad[j] * a_i[j] / reach_sum[j];
            }
            let (gl, gr) = (g_reach[2 * j + 1], g_reach[2 * j + 2]);
            g_reach[j] += gl * (1.0 - p_i[j]) + gr * p_i[j];
            gp += a_i[j] * (gr - gl);
            let gz = gp * p_i[j] * (1.0 - p_i[j]) * beta;
            grad.b[j] += gz;
            for (g, x) in g_eff[j * n..(j + 1) * n].iter_mut().zip(row.iter()) {
                *g += gz * x;
            }
        }
    }
    for j in 0..inner {
        let w = &params.w[j * n..(j + 1) * n];
        let ge = &g_eff[j * n..(j + 1) * n];
        let gw = &mut grad.w[j * n..(j + 1) * n];
        if config.univariate {
            let m = mask(w, config.beta2);
            let upstream: Vec<f64> = ge.iter().zip(w).map(|(g, w)| g * w).collect();
            let mut g_logits = vec![0.0; n];
            softmax_backward(&m, &upstream, &mut g_logits);
            for k in 0..n {
                gw[k] += ge[k] * m[k] + g_logits[k] * config.beta2 * w[k].signum() * f64::from(w[k] != 0.0);
            }
        } else {
            gw.iter_mut().zip(ge).for_each(|(g, e)| *g += e);
        }
        gw.iter_mut().zip(w).for_each(|(g, w)| *g += config.weight_decay * w);
    }
    Ok(loss)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SdtReport {
    pub epoch_losses: Vec<f64>,
    pub best_epoch: usize,
}

/// Fit a soft tree to black-box probabilities `y_prob`.
pub fn sdt_fit(x: ArrayView2<f64>, y_prob: &[f64], config: &SdtConfig, seed: u64) -> Result<(TreeModel, SdtReport)> {
    let (params, report) = sdt_fit_params(x, y_prob, config, seed)?;
    Ok((params.to_tree(config), report))
}

pub fn sdt_fit_params(
    x: ArrayView2<f64>,
    y_prob: &[f64],
    config: &SdtConfig,
    seed: u64,
) -> Result<(SdtParams, SdtReport)> {
    config.validate()?;
    if x.nrows() != y_prob.len() || y_prob.is_empty() {
        return Err(Error::Dimension {
            expected: x.nrows(),
            actual: y_prob.len(),
        });
    }
    if y_prob.iter().any(|p| !(0.0..=1.0).contains(p)) {
        return Err(Error::InvalidData("soft tree targets must lie in [0, 1]".into()));
    }
    let targets: Vec<f64> = if config.round_targets {
        y_prob.iter().map(|&p| f64::from(round_half_up(p))).collect()
    } else {
        y_prob.to_vec()
    };
    let mut rng: SeededRng = rng_from_seed(seed);
    let mut params = SdtParams::random(x.ncols(), config.depth, &mut rng);
    let mut opt = Adam::new(config.learning_rate);
    let mut order: Vec<usize> = (0..targets.len()).collect();
    let mut best = (f64::INFINITY, params.clone(), 0);
    let mut losses = Vec::new();
    let mut stale = 0;
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(config.batch_size) {
            let xb = x.select(ndarray::Axis(0), batch);
            let tb: Vec<f64> = batch.iter().map(|&i| targets[i]).collect();
            let mut grad = SdtParams::zeros(params.n, params.depth);
            let loss = sdt_loss(&params, xb.view(), &tb, config, Some(&mut grad))?;
            opt.step(&mut params.blocks_mut(), &grad.blocks())?;
            total += loss * batch.len() as f64;
        }
        let epoch_loss = total / targets.len() as f64;
        losses.push(epoch_loss);
        if epoch_loss < best.0 {
            best = (epoch_loss, params.clone(), epoch);
            stale = 0;
        } else {
            stale += 1;
            if stale >= config.patience {
                break;
            }
        }
    }
    Ok((
        best.1,
        SdtReport {
            epoch_losses: losses,
            best_epoch: best.2,
        },
    ))
}
