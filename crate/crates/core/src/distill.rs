//! Sample-based distillation: query a λ-net, then fit a surrogate to its
//! answers.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::cart::{cart_fit, CartConfig};
use crate::datagen::{sample_query_points, DatasetProvenance, QueryStrategy, DEFAULT_QUERY_COUNT};
use crate::error::{Error, Result};
use crate::lambda::{round_half_up, LambdaNet};
use crate::sdt::{sdt_fit, SdtConfig};
use crate::seed::{derive_seed, rng_from_seed};
use crate::trees::{TreeFamily, TreeModel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillConfig {
    pub query_count: usize,
    pub cart: CartConfig,
    pub sdt: SdtConfig,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            query_count: DEFAULT_QUERY_COUNT,
            cart: CartConfig::default(),
            sdt: SdtConfig::default(),
        }
    }
}

impl DistillConfig {
    /// Same config with every fitter set to depth `d`.
    pub fn with_depth(mut self, d: usize) -> Self {
        self.cart.max_depth = d;
        self.sdt.depth = d;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.query_count == 0 {
            return Err(Error::invalid("distill.query_count", "must be at least 1"));
        }
        self.cart.validate()?;
        self.sdt.validate()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Distilled {
    pub tree: TreeModel,
    pub queries: Array2<f64>,
    /// What λ answered on the queries (probabilities).
    pub answers: Vec<f64>,
    pub provenance: Option<DatasetProvenance>,
}

/// Fit `family` to λ's answers on `points`.
pub fn distill_from_points(
    lambda: &LambdaNet,
    family: TreeFamily,
    points: Array2<f64>,
    config: &DistillConfig,
    seed: u64,
) -> Result<Distilled> {
    config.validate()?;
    let answers = lambda.predict_batch(points.view())?;
    let tree = match family {
        TreeFamily::StandardDt => {
            let labels: Vec<u8> = answers.iter().map(|&p| round_half_up(p)).collect();
            TreeModel::StandardDt(cart_fit(points.view(), &labels, &config.cart)?)
        }
        TreeFamily::UnivariateSdt | TreeFamily::StandardSdt => {
            let cfg = SdtConfig {
                univariate: family == TreeFamily::UnivariateSdt,
                ..config.sdt.clone()
            };
            sdt_fit(points.view(), &answers, &cfg, seed)?.0
        }
    };
    Ok(Distilled {
        tree,
        queries: points,
        answers,
        provenance: None,
    })
}

/// Sample `config.query_count` points with `strategy`, then distill.
pub fn distill(
    lambda: &LambdaNet,
    family: TreeFamily,
    strategy: QueryStrategy,
    config: &DistillConfig,
    seed: u64,
) -> Result<Distilled> {
    config.validate()?;
    let mut rng = rng_from_seed(derive_seed(seed, "queries", 0));
    let sample = sample_query_points(strategy, config.query_count, lambda.n_features(), &mut rng)?;
    let mut out = distill_from_points(lambda, family, sample.points, config, derive_seed(seed, "fit", 0))?;
    out.provenance = sample.provenance;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Activation, Dense, DenseNet};
    use ndarray::array;

    /// λ(x) = σ(40·(x0 − 0.3)) built by hand in the λ-net shape.
    pub(crate) fn threshold_lambda() -> LambdaNet {
        let mut w1 = Array2::zeros((2, 128));
        w1[[0, 0]] = 1.0;
        let mut b1 = ndarray::Array1::zeros(128);
        b1[0] = -0.3;
        let hidden = Dense {
            weights: w1,
            bias: b1,
            activation: Activation::Relu,
        };
        // relu(x0 − 0.3) alone cannot go negative; the second unit mirrors it.
        let mut hidden = hidden;
        hidden.weights[[0, 1]] = -1.0;
        hidden.bias[1] = 0.3;
        let mut w2 = Array2::zeros((128, 1));
        w2[[0, 0]] = 40.0;
        w2[[1, 0]] = -40.0;
        let out = Dense {
            weights: w2,
            bias: array![0.0],
            activation: Activation::Sigmoid,
        };
        LambdaNet {
            net: DenseNet::new(vec![hidden, out], vec![0.0, 0.0]).unwrap(),
            dataset_ref: "hand".into(),
            test_accuracy: 1.0,
            holdout_rows: vec![],
        }
    }

    #[test]
    fn cart_recovers_threshold() {
        let lambda = threshold_lambda();
        let cfg = DistillConfig {
            query_count: 2000,
            ..Default::default()
        };
        let d = distill(&lambda, TreeFamily::StandardDt, QueryStrategy::StandardUniform, &cfg, 4).unwrap();
        let mut rng = rng_from_seed(99);
        let fresh = sample_query_points(QueryStrategy::StandardUniform, 2000, 2, &mut rng)
            .unwrap()
            .points;
        let truth = lambda.predict_labels(fresh.view()).unwrap();
        let agree = fresh
            .rows()
            .into_iter()
            .zip(&truth)
            .filter(|(r, &t)| round_half_up(d.tree.predict(r.as_slice().unwrap()).unwrap()) == t)
            .count();
        assert!(agree as f64 / 2000.0 >= 0.99, "{agree}");

        let again = distill(&lambda, TreeFamily::StandardDt, QueryStrategy::StandardUniform, &cfg, 4).unwrap();
        assert_eq!(again.tree, d.tree);
    }

    #[test]
    fn multi_distribution_redraws() {
        let lambda = threshold_lambda();
        let cfg = DistillConfig {
            query_count: 50,
            ..Default::default()
        };
        let a = distill(
            &lambda,
            TreeFamily::StandardDt,
            QueryStrategy::MultiDistribution,
            &cfg,
            1,
        )
        .unwrap();
        let b = distill(
            &lambda,
            TreeFamily::StandardDt,
            QueryStrategy::MultiDistribution,
            &cfg,
            2,
        )
        .unwrap();
        assert!(a.provenance.is_some());
        assert_ne!(a.provenance, b.provenance);
    }
}
