//! Run configuration: one JSON document with a section per stage.
//!
//! Resolution layers the file over a preset (full-scale defaults or the
//! `desk` preset) key by key, so any field left out keeps the preset value.
//! The resolved document is what gets echoed to `resolved-config.json`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::datagen::{QueryStrategy, PARAM_FLOOR};
use crate::distill::DistillConfig;
use crate::error::{Error, Result};
use crate::eval::BenchmarkConfig;
use crate::inet::INetConfig;
use crate::lambda::{CorpusCounts, LambdaConfig};
use crate::trees::TreeFamily;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Full,
    Desk,
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Preset::Full),
            "desk" => Ok(Preset::Desk),
            _ => Err(Error::invalid("preset", format!("unknown preset `{s}` (full, desk)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub n: usize,
    pub m: usize,
    pub p: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub sizes: Vec<usize>,
    pub strategies: Vec<QueryStrategy>,
    pub trials: usize,
    pub family: TreeFamily,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundarySection {
    pub resolution: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreprocessSection {
    pub scale_before_split: bool,
}

/// Artifacts a run reads. Each must exist when the config is validated.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Inputs {
    pub corpus: Option<PathBuf>,
    /// Trained I-Net per family name.
    pub inets: BTreeMap<TreeFamily, PathBuf>,
    pub lambdas: Vec<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub preset: Preset,
    pub master_seed: u64,
    pub output_dir: PathBuf,
    pub data: DataSection,
    pub corpus: CorpusCounts,
    pub lambda: LambdaConfig,
    pub inet: INetConfig,
    pub distill: DistillConfig,
    pub benchmark: BenchmarkConfig,
    pub sweep: SweepSection,
    pub boundary: BoundarySection,
    pub preprocess: PreprocessSection,
    pub inputs: Inputs,
}

impl RunConfig {
    pub fn preset(preset: Preset) -> Self {
        let full = Self {
            preset: Preset::Full,
            master_seed: 0,
            output_dir: PathBuf::from("out"),
            data: DataSection { n: 2, m: 5000, p: 5.0 },
            corpus: CorpusCounts {
                train: 9000,
                valid: 1000,
                test: 100,
            },
            lambda: LambdaConfig::default(),
            inet: INetConfig::default(),
            distill: DistillConfig::default(),
            benchmark: BenchmarkConfig::default(),
            sweep: SweepSection {
                sizes: vec![1_000, 10_000, 100_000],
                strategies: QueryStrategy::ALL.to_vec(),
                trials: 10,
                family: TreeFamily::StandardDt,
            },
            boundary: BoundarySection { resolution: 100 },
            preprocess: PreprocessSection {
                scale_before_split: false,
            },
            inputs: Inputs::default(),
        };
        match preset {
            Preset::Full => full,
            Preset::Desk => {
                let mut c = full;
                c.preset = Preset::Desk;
                c.data.m = 1000;
                c.corpus = CorpusCounts {
                    train: 500,
                    valid: 50,
                    test: 50,
                };
                c.lambda.epochs = 300;
                c.inet.depth = 2;
                c.inet.gamma = 50.0;
                c.inet.epochs = 150;
                c.inet.batch_size = 32;
                c.distill.sdt.epochs = 60;
                c.benchmark.trials = 3;
                c.sweep.sizes = vec![1_000, 10_000];
                c.sweep.trials = 3;
                c
            }
        }
    }

    /// Layer `overrides` (a JSON object) on top of `preset` and validate.
    /// A `preset` key inside `overrides` wins over the argument.
    pub fn resolve(overrides: &Value, preset: Preset) -> Result<Self> {
        let Value::Object(map) = overrides else {
            return Err(Error::invalid("<root>", "configuration must be a JSON object"));
        };
        let preset = match map.get("preset") {
            Some(v) => section::<Preset>("preset", v.clone())?,
            None => preset,
        };
        let mut base = serde_json::to_value(Self::preset(preset))?;
        if let Some(k) = map.keys().find(|k| base.get(k.as_str()).is_none()) {
            return Err(Error::invalid(k.clone(), "unknown configuration section"));
        }
        merge(&mut base, overrides);
        let Value::Object(mut sections) = base else {
            unreachable!()
        };
        let mut take = |k: &str| sections.remove(k).unwrap_or(Value::Null);
        let config = Self {
            preset: section("preset", take("preset"))?,
            master_seed: section("master_seed", take("master_seed"))?,
            output_dir: section("output_dir", take("output_dir"))?,
            data: section("data", take("data"))?,
            corpus: section("corpus", take("corpus"))?,
            lambda: section("lambda", take("lambda"))?,
            inet: section("inet", take("inet"))?,
            distill: section("distill", take("distill"))?,
            benchmark: section("benchmark", take("benchmark"))?,
            sweep: section("sweep", take("sweep"))?,
            boundary: section("boundary", take("boundary"))?,
            preprocess: section("preprocess", take("preprocess"))?,
            inputs: section("inputs", take("inputs"))?,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.data.n == 0 {
            return Err(Error::invalid("data.n", "must be at least 1"));
        }
        if self.data.m < 4 {
            return Err(Error::invalid("data.m", "must be at least 4"));
        }
        if !(self.data.p > PARAM_FLOOR) {
            return Err(Error::invalid("data.p", format!("must exceed {PARAM_FLOOR}")));
        }
        self.lambda.validate()?;
        self.inet.validate()?;
        self.distill.validate()?;
        self.benchmark.validate()?;
        if self.sweep.sizes.is_empty() || self.sweep.sizes.windows(2).any(|w| w[0] >= w[1]) || self.sweep.sizes[0] == 0
        {
            return Err(Error::invalid(
                "sweep.sizes",
                "must be non-empty, positive and strictly ascending",
            ));
        }
        if self.sweep.trials == 0 {
            return Err(Error::invalid("sweep.trials", "must be at least 1"));
        }
        if self.boundary.resolution < 2 {
            return Err(Error::invalid("boundary.resolution", "must be at least 2"));
        }
        let mut paths: Vec<(String, &PathBuf)> = Vec::new();
        if let Some(p) = &self.inputs.corpus {
            paths.push(("inputs.corpus".into(), p));
        }
        for (f, p) in &self.inputs.inets {
            paths.push((format!("inputs.inets.{}", f.name()), p));
        }
        for (i, p) in self.inputs.lambdas.iter().enumerate() {
            paths.push((format!("inputs.lambdas[{i}]"), p));
        }
        for (field, p) in paths {
            if !p.exists() {
                return Err(Error::invalid(field, format!("`{}` does not exist", p.display())));
            }
        }
        Ok(())
    }

    pub fn load(path: &Path, preset: Preset) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let value: Value = if text.trim().is_empty() {
            Value::Object(Default::default())
        } else {
            serde_json::from_str(&text).map_err(|e| Error::invalid("<root>", e.to_string()))?
        };
        Self::resolve(&value, preset)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    /// Write `resolved-config.json` into `dir`.
    pub fn write_resolved(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("resolved-config.json");
        std::fs::write(&path, self.to_json()?).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

/// Read, default and cross-check a run configuration file.
pub fn validate_config(path: &Path) -> Result<RunConfig> {
    RunConfig::load(path, Preset::Full)
}

fn section<T: DeserializeOwned>(name: &str, value: Value) -> Result<T> {
    serde_json::from_value(value).map_err(|e| Error::invalid(name, e.to_string()))
}

/// Recursive object merge; non-object values in `over` replace `base`.
fn merge(base: &mut Value, over: &Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (b, o) => *b = o.clone(),
    }
}
