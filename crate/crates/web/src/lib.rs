//! Browser playground: draw a 2-D task, train a λ-net on it, distill a tree
//! from its answers and compare the two decision boundaries.
//!
//! [`Session`] holds the logic and is plain Rust; [`Playground`] is the thin
//! wasm-bindgen wrapper the page talks to.

use std::fmt::Write;

use inet_core::datagen::{QueryStrategy, SyntheticDataset};
use inet_core::distill::{distill, DistillConfig};
use inet_core::eval::{boundary_grid, fidelity, BoundaryGrid, Classifier};
use inet_core::lambda::{draw_inseparable_dataset, train_lambda_net, LambdaConfig, LambdaNet};
use inet_core::seed::derive_seed;
use inet_core::trees::{TreeFamily, TreeModel};
use inet_core::{Error, Result};
use wasm_bindgen::prelude::*;

pub struct Session {
    seed: u64,
    data: SyntheticDataset,
    lambda: Option<LambdaNet>,
    tree: Option<TreeModel>,
}

/// Result of one distillation, as shown on the page.
#[derive(Debug, Clone, PartialEq)]
pub struct DistillOutcome {
    pub fidelity: f64,
    pub dot: String,
}

impl Session {
    pub fn new(seed: u64, rows: usize) -> Result<Self> {
        let data = draw_inseparable_dataset(2, rows, 5.0, seed, 0)?;
        Ok(Self {
            seed,
            data,
            lambda: None,
            tree: None,
        })
    }

    pub fn dataset(&self) -> &SyntheticDataset {
        &self.data
    }

    /// Train the λ-net; returns its held-out accuracy.
    pub fn train_lambda(&mut self, epochs: usize) -> Result<f64> {
        let config = LambdaConfig {
            epochs,
            ..Default::default()
        };
        let lambda = train_lambda_net(
            &self.data.data,
            "playground",
            &config,
            derive_seed(self.seed, "lambda", 0),
        )?;
        let acc = lambda.test_accuracy;
        self.lambda = Some(lambda);
        self.tree = None;
        Ok(acc)
    }

    fn lambda(&self) -> Result<&LambdaNet> {
        self.lambda
            .as_ref()
            .ok_or_else(|| Error::InvalidData("train the λ-net first".into()))
    }

    pub fn distill(
        &mut self,
        family: TreeFamily,
        strategy: QueryStrategy,
        depth: usize,
        queries: usize,
    ) -> Result<DistillOutcome> {
        let lambda = self.lambda()?;
        let config = DistillConfig {
            query_count: queries,
            ..DistillConfig::default().with_depth(depth)
        };
        let d = distill(lambda, family, strategy, &config, derive_seed(self.seed, "distill", 0))?;
        let held_out = self.data.data.select(&lambda.holdout_rows).features;
        let fid = fidelity(&d.tree, lambda, held_out.view())?;
        let dot = d.tree.to_dot();
        self.tree = Some(d.tree);
        Ok(DistillOutcome { fidelity: fid, dot })
    }

    /// Boundary of the λ-net (`"lambda"`) or the last distilled tree
    /// (`"tree"`) with the dataset drawn on top.
    pub fn boundary_svg(&self, which: &str, resolution: usize, size_px: usize) -> Result<String> {
        let model: &dyn Classifier = match which {
            "lambda" => self.lambda()?,
            "tree" => self
                .tree
                .as_ref()
                .ok_or_else(|| Error::InvalidData("distill a tree first".into()))?,
            other => {
                return Err(Error::invalid(
                    "which",
                    format!("expected `lambda` or `tree`, got `{other}`"),
                ))
            }
        };
        let grid = boundary_grid(model, resolution)?;
        Ok(self.overlay(&grid, size_px))
    }

    fn overlay(&self, grid: &BoundaryGrid, size_px: usize) -> String {
        let mut svg = grid.to_svg(size_px);
        let close = svg.rfind("</svg>").unwrap_or(svg.len());
        svg.truncate(close);
        let s = size_px as f64;
        for (row, &label) in self.data.data.features.rows().into_iter().zip(&self.data.data.labels) {
            let stroke = if label == 1 { "#7a2e00" } else { "#0b4d3a" };
            let _ = writeln!(
                svg,
                "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"2\" fill=\"white\" fill-opacity=\"0.6\" stroke=\"{stroke}\"/>",
                row[0] * s,
                (1.0 - row[1]) * s
            );
        }
        svg.push_str("</svg>\n");
        svg
    }
}

fn js(e: Error) -> JsError {
    JsError::new(&e.to_string())
}

#[wasm_bindgen]
pub struct Playground {
    inner: Session,
}

#[wasm_bindgen]
impl Playground {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32, rows: usize) -> std::result::Result<Playground, JsError> {
        Session::new(u64::from(seed), rows)
            .map(|inner| Playground { inner })
            .map_err(js)
    }

    #[wasm_bindgen(js_name = trainLambda)]
    pub fn train_lambda(&mut self, epochs: usize) -> std::result::Result<f64, JsError> {
        self.inner.train_lambda(epochs).map_err(js)
    }

    /// Returns `[fidelity, dot]` as a two-element array.
    pub fn distill(
        &mut self,
        family: &str,
        strategy: &str,
        depth: usize,
        queries: usize,
    ) -> std::result::Result<Vec<JsValue>, JsError> {
        let family = family.parse().map_err(js)?;
        let strategy = strategy.parse().map_err(js)?;
        let out = self.inner.distill(family, strategy, depth, queries).map_err(js)?;
        Ok(vec![JsValue::from_f64(out.fidelity), JsValue::from_str(&out.dot)])
    }

    #[wasm_bindgen(js_name = boundarySvg)]
    pub fn boundary_svg(&self, which: &str, resolution: usize, size_px: usize) -> std::result::Result<String, JsError> {
        self.inner.boundary_svg(which, resolution, size_px).map_err(js)
    }
}
