//! Gini CART grown to a complete tree of fixed depth.
//!
//! Candidate thresholds are midpoints between consecutive distinct values of
//! a feature; rows with `x < t` go left. Among equally good splits the lower
//! feature index wins, then the lower threshold. Impurities are compared as
//! exact rationals over the integer class counts so ties are real ties.
//! Nodes that cannot or need not be split get a placeholder split on
//! feature 0 whose two subtrees carry the parent's leaf value.

use std::cmp::Ordering;

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::PROB_CLAMP;
use crate::trees::{internal_count, leaf_count, StandardTree};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Criterion {
    Gini,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CartConfig {
    pub max_depth: usize,
    pub criterion: Criterion,
    pub min_samples_split: usize,
    pub min_samples_leaf: usize,
}

impl Default for CartConfig {
    fn default() -> Self {
        Self {
            max_depth: 3,
            criterion: Criterion::Gini,
            min_samples_split: 2,
            min_samples_leaf: 1,
        }
    }
}

impl CartConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_depth == 0 || self.max_depth > 16 {
            return Err(Error::invalid("cart.max_depth", "must lie in 1..=16"));
        }
        if self.min_samples_split == 0 || self.min_samples_leaf == 0 {
            return Err(Error::invalid(
                "cart.min_samples_split",
                "minimum sample counts must be at least 1",
            ));
        }
        Ok(())
    }
}

/// Gini impurity `1 − Σ p_k²` of a label multiset.
pub fn gini(labels: &[u8]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let n = labels.len() as f64;
    let ones = labels.iter().filter(|&&l| l == 1).count() as f64;
    let zeros = n - ones;
    1.0 - (ones * ones + zeros * zeros) / (n * n)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitChoice {
    pub feature: usize,
    pub threshold: f64,
    /// Size-weighted Gini of the two children.
    pub impurity: f64,
}

/// `Σ_children (c0² + c1²)/size` as the fraction `num/den`; larger is purer.
#[derive(Debug, Clone, Copy)]
struct Purity {
    num: u128,
    den: u128,
}

impl Purity {
    fn new(left: [u64; 2], right: [u64; 2]) -> Self {
        let (nl, nr) = ((left[0] + left[1]) as u128, (right[0] + right[1]) as u128);
        let sq = |c: [u64; 2]| (c[0] as u128).pow(2) + (c[1] as u128).pow(2);
        Self {
            num: sq(left) * nr + sq(right) * nl,
            den: nl * nr,
        }
    }

    fn cmp(&self, other: &Self) -> Ordering {
        (self.num * other.den).cmp(&(other.num * self.den))
    }

    fn impurity(&self, total: u64) -> f64 {
        1.0 - (self.num as f64 / self.den as f64) / total as f64
    }
}

/// Best Gini split of `rows`, or `None` when no threshold leaves at least
/// `min_leaf` rows on each side.
pub fn best_split(x: ArrayView2<f64>, y: &[u8], rows: &[usize], min_leaf: usize) -> Option<SplitChoice> {
    let total = rows.len() as u64;
    let mut counts = [0u64; 2];
    for &r in rows {
        counts[y[r] as usize] += 1;
    }
    let mut best: Option<(Purity, usize, f64)> = None;
    let mut order = rows.to_vec();
    for f in 0..x.ncols() {
        order.sort_by(|&a, &b| x[[a, f]].total_cmp(&x[[b, f]]));
        let mut left = [0u64; 2];
        for i in 0..order.len() - 1 {
            left[y[order[i]] as usize] += 1;
            let (lo, hi) = (x[[order[i], f]], x[[order[i + 1], f]]);
            if lo == hi {
                continue;
            }
            let n_left = i + 1;
            if n_left < min_leaf || order.len() - n_left < min_leaf {
                continue;
            }
            let right = [counts[0] - left[0], counts[1] - left[1]];
            let purity = Purity::new(left, right);
            let better = match &best {
                None => true,
                Some((p, _, _)) => purity.cmp(p) == Ordering::Greater,
            };
            if better {
                best = Some((purity, f, midpoint(lo, hi)));
            }
        }
    }
    best.map(|(p, feature, threshold)| SplitChoice {
        feature,
        threshold,
        impurity: p.impurity(total),
    })
}

/// Midpoint that still separates `lo` from `hi` under `x < t`.
fn midpoint(lo: f64, hi: f64) -> f64 {
    let mid = lo + (hi - lo) / 2.0;
    if mid > lo {
        mid
    } else {
        hi
    }
}

fn leaf_value(y: &[u8], rows: &[usize]) -> f64 {
    let ones = rows.iter().filter(|&&r| y[r] == 1).count();
    (ones as f64 / rows.len() as f64).clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
}

pub fn cart_fit(x: ArrayView2<f64>, y: &[u8], config: &CartConfig) -> Result<StandardTree> {
    config.validate()?;
    if x.nrows() != y.len() {
        return Err(Error::Dimension {
            expected: x.nrows(),
            actual: y.len(),
        });
    }
    if y.is_empty() || x.ncols() == 0 {
        return Err(Error::InvalidData("CART needs at least one row and one feature".into()));
    }
    if y.iter().any(|&l| l > 1) {
        return Err(Error::InvalidData("CART labels must be 0 or 1".into()));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidData("CART input contains non-finite values".into()));
    }
    let depth = config.max_depth;
    let inner = internal_count(depth);
    let mut tree = StandardTree {
        depth,
        n_features: x.ncols(),
        features: vec![0; inner],
        splits: vec![0.0; inner],
        leaves: vec![0.0; leaf_count(depth)],
    };
    // (node, rows, frozen leaf value)
    let mut stack: Vec<(usize, Vec<usize>, Option<f64>)> = vec![(0, (0..y.len()).collect(), None)];
    while let Some((node, rows, frozen)) = stack.pop() {
        if node >= inner {
            tree.leaves[node - inner] = frozen.unwrap_or_else(|| leaf_value(y, &rows));
            continue;
        }
        if frozen.is_some() {
            stack.push((2 * node + 1, Vec::new(), frozen));
            stack.push((2 * node + 2, Vec::new(), frozen));
            continue;
        }
        let impure = rows.iter().any(|&r| y[r] != y[rows[0]]);
        let choice = if impure && rows.len() >= config.min_samples_split {
            best_split(x, y, &rows, config.min_samples_leaf)
        } else {
            None
        };
        match choice {
            Some(c) => {
                tree.features[node] = c.feature;
                tree.splits[node] = c.threshold;
                let (left, right): (Vec<usize>, Vec<usize>) =
                    rows.iter().partition(|&&r| x[[r, c.feature]] < c.threshold);
                stack.push((2 * node + 1, left, None));
                stack.push((2 * node + 2, right, None));
            }
            None => {
                let value = Some(leaf_value(y, &rows));
                stack.push((2 * node + 1, Vec::new(), value));
                stack.push((2 * node + 2, Vec::new(), value));
            }
        }
    }
    Ok(tree)
}
