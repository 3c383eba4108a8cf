use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Map, Value};

use inet_core::config::{Preset, RunConfig};
use inet_core::datagen::QueryStrategy;
use inet_core::pipeline;
use inet_core::trees::{ExportFormat, TreeFamily};
use inet_core::{Error, ErrorKind};

/// Interpretation networks: train λ-nets, train I-Nets that map their
/// parameters to decision trees, and compare against sample-based
/// distillation.
///
/// Every command writes `resolved-config.json` next to its artifacts.
/// Exit status: 0 ok, 2 configuration error, 3 data error, 4 numerical failure.
/// Set INET_THREADS to cap worker threads.
#[derive(Parser)]
#[command(name = "inet", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON run configuration layered over the preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Default values to start from.
    #[arg(long, global = true, default_value = "full")]
    preset: Preset,
    /// Master seed (overrides the config).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (overrides the config).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate one synthetic dataset (CSV + provenance JSON).
    GenData {
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        m: Option<usize>,
        #[arg(long)]
        p: Option<f64>,
    },
    /// Train a λ-net on a dataset CSV.
    TrainLambda {
        #[arg(long)]
        data: PathBuf,
    },
    /// Generate datasets, train λ-nets and store them as a corpus.
    BuildCorpus {
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        m: Option<usize>,
    },
    /// Train an I-Net on a corpus.
    TrainInet {
        /// Corpus directory; defaults to inputs.corpus, then <out>/corpus.
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long, default_value = "standard_dt")]
        family: TreeFamily,
    },
    /// Print the surrogate tree an I-Net assigns to a λ-net.
    Interpret {
        #[arg(long)]
        inet: PathBuf,
        #[arg(long)]
        lambda: PathBuf,
        #[arg(long, default_value = "dot")]
        format: ExportFormat,
    },
    /// Fit a surrogate to a λ-net's answers on sampled query points.
    Distill {
        #[arg(long)]
        lambda: PathBuf,
        /// Dataset the λ-net was trained on; adds held-out fidelity.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value = "standard_dt")]
        family: TreeFamily,
        #[arg(long, default_value = "multi_distribution")]
        strategy: QueryStrategy,
    },
    /// Compare I-Nets against sample-based distillation on the corpus test split.
    Benchmark {
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Directory holding inet-<family>.json; defaults to the output directory.
        #[arg(long)]
        inets: Option<PathBuf>,
    },
    /// Fidelity of sample-based distillation across query counts.
    SweepSamples {
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
    /// Label a grid over [0,1]² with a 2-D tree or λ-net (CSV + SVG).
    Boundary {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        resolution: Option<usize>,
    },
    /// Clean, encode, scale and split a tabular CSV.
    Preprocess {
        #[arg(long)]
        table: PathBuf,
        #[arg(long)]
        schema: PathBuf,
        /// Compute scaling statistics on all rows before splitting.
        #[arg(long)]
        scale_before_split: bool,
    },
    /// Render a tree JSON file as DOT or canonical JSON.
    ExportTree {
        #[arg(long)]
        tree: PathBuf,
        #[arg(long, default_value = "dot")]
        format: ExportFormat,
    },
    /// Resolve a configuration and write resolved-config.json.
    ValidateConfig,
}

fn set(map: &mut Map<String, Value>, section: &str, key: &str, value: Value) {
    let entry = map.entry(section).or_insert_with(|| json!({}));
    if let Value::Object(obj) = entry {
        obj.insert(key.to_string(), value);
    }
}

fn load_config(common: &Common, command: &Command) -> Result<RunConfig, Error> {
    let mut overrides = match &common.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            if text.trim().is_empty() {
                Map::new()
            } else {
                match serde_json::from_str(&text).map_err(|e| Error::invalid("<root>", e.to_string()))? {
                    Value::Object(m) => m,
                    _ => return Err(Error::invalid("<root>", "configuration must be a JSON object")),
                }
            }
        }
        None => Map::new(),
    };
    if let Some(seed) = common.seed {
        overrides.insert("master_seed".into(), json!(seed));
    }
    if let Some(out) = &common.out {
        overrides.insert("output_dir".into(), json!(out));
    }
    match command {
        Command::GenData { n, m, p } => {
            n.map(|v| set(&mut overrides, "data", "n", json!(v)));
            m.map(|v| set(&mut overrides, "data", "m", json!(v)));
            p.map(|v| set(&mut overrides, "data", "p", json!(v)));
        }
        Command::BuildCorpus { n, m } => {
            n.map(|v| set(&mut overrides, "data", "n", json!(v)));
            m.map(|v| set(&mut overrides, "data", "m", json!(v)));
        }
        Command::Boundary {
            resolution: Some(r), ..
        } => set(&mut overrides, "boundary", "resolution", json!(r)),
        Command::Preprocess {
            scale_before_split: true,
            ..
        } => set(&mut overrides, "preprocess", "scale_before_split", json!(true)),
        _ => {}
    }
    RunConfig::resolve(&Value::Object(overrides), common.preset)
}

fn corpus_dir(config: &RunConfig, flag: &Option<PathBuf>) -> PathBuf {
    flag.clone()
        .or_else(|| config.inputs.corpus.clone())
        .unwrap_or_else(|| config.output_dir.join("corpus"))
}

fn print_paths(paths: &[PathBuf]) {
    for p in paths {
        println!("{}", p.display());
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    let config = load_config(&cli.common, &cli.command)?;
    let out: &Path = &config.output_dir;
    let written = match &cli.command {
        Command::GenData { .. } => pipeline::gen_data(&config, out)?,
        Command::TrainLambda { data } => pipeline::train_lambda(&config, data, out)?,
        Command::BuildCorpus { .. } => pipeline::corpus(&config, out)?,
        Command::TrainInet { corpus, family } => {
            pipeline::train_inet_stage(&config, &corpus_dir(&config, corpus), *family, out)?
        }
        Command::Interpret { inet, lambda, format } => {
            print!("{}", pipeline::interpret(inet, lambda, *format)?);
            return Ok(());
        }
        Command::Distill {
            lambda,
            data,
            family,
            strategy,
        } => pipeline::distill_stage(&config, lambda, data.as_deref(), *family, *strategy, out)?,
        Command::Benchmark { corpus, inets } => {
            let inet_dir = inets.clone().unwrap_or_else(|| out.to_path_buf());
            pipeline::benchmark(&config, &corpus_dir(&config, corpus), &inet_dir, out)?
        }
        Command::SweepSamples { corpus } => pipeline::sweep(&config, &corpus_dir(&config, corpus), out)?,
        Command::Boundary { model, .. } => pipeline::boundary(&config, model, out)?,
        Command::Preprocess { table, schema, .. } => pipeline::preprocess_stage(&config, table, schema, out)?,
        Command::ExportTree { tree, format } => {
            print!("{}", pipeline::export(tree, *format)?);
            return Ok(());
        }
        Command::ValidateConfig => vec![config.write_resolved(out)?],
    };
    print_paths(&written);
    Ok(())
}

fn error_line(err: &Error) -> (u8, String) {
    let (code, kind) = match err.kind() {
        ErrorKind::Config => (2, "config"),
        ErrorKind::Data => (3, "data"),
        ErrorKind::Numerical => (4, "numerical"),
    };
    let mut body = json!({ "kind": kind, "message": err.to_string() });
    if let Error::InvalidParameter { field, .. } = err {
        body["field"] = json!(field);
    }
    if let Error::MissingArtifacts(paths) = err {
        body["missing"] = json!(paths);
    }
    (code, format!("error: {body}"))
}

fn init_threads() -> Result<(), Error> {
    let Ok(raw) = std::env::var("INET_THREADS") else {
        return Ok(());
    };
    let threads: usize = raw
        .parse()
        .ok()
        .filter(|&t| t > 0)
        .ok_or_else(|| Error::invalid("INET_THREADS", format!("expected a positive integer, got `{raw}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| Error::invalid("INET_THREADS", e.to_string()))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match init_threads().and_then(|()| run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let (code, line) = error_line(&err);
            eprintln!("{line}");
            ExitCode::from(code)
        }
    }
}
