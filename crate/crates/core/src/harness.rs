//! Experiment runner: parses a TOML experiment file, materializes the data and
//! partitions, runs every (run, stepsize) cell and writes one CSV and one JSON
//! file per cell.
//!
//! ```toml
//! output_dir = "out/example"
//! grid = [0.05, 0.1]            # optional stepsize sweep
//!
//! [dataset]
//! kind = "synth"
//! n = 2000
//! n_features = 20
//! n_classes = 10
//! margin = 4.0
//!
//! [partition]
//! alpha = 0.7
//!
//! [model]
//! kind = "mlp"
//! hidden = [128, 64]
//!
//! [fed]
//! algorithm = "fedcomloc"
//! variant = "com"
//! n_clients = 20
//! sample_size = 5
//! p = 0.1
//! gamma = 0.05
//! iterations = 3000
//! compressor = { kind = "topk", density = 0.3 }
//!
//! [[runs]]                      # optional; each entry overrides [fed]
//! name = "k30"
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::compressors::CompressorSpec;
use crate::data::{self, FederatedDataset, PartitionSpec, SplitDataset, SynthSpec};
use crate::error::{Error, Result};
use crate::fed::{self, Algorithm, FedConfig, RunOutput, Variant, Violation};
use crate::models::{ModelKind, ModelSpec};
use crate::rng::derive_stream;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    Synth {
        n: usize,
        n_features: usize,
        n_classes: usize,
        #[serde(default = "default_margin")]
        margin: f64,
    },
    MnistIdx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
    },
}

fn default_margin() -> f64 {
    4.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionConfig {
    #[serde(default = "default_alpha")]
    pub alpha: f64,
}

fn default_alpha() -> f64 {
    0.7
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: ModelKind,
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    #[serde(default)]
    pub l2_reg: f64,
}

fn default_hidden() -> Vec<usize> {
    vec![128, 64]
}

impl ModelConfig {
    pub fn spec(&self, n_features: usize, n_classes: usize) -> ModelSpec {
        match self.kind {
            ModelKind::Logreg => ModelSpec::logreg(n_features, n_classes, self.l2_reg),
            ModelKind::Mlp => ModelSpec::mlp(n_features, &self.hidden, n_classes, self.l2_reg),
        }
    }
}

/// Per-run overrides of the `[fed]` table (and of the Dirichlet `alpha`).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunOverride {
    pub name: String,
    pub algorithm: Option<Algorithm>,
    pub variant: Option<Variant>,
    pub compressor: Option<CompressorSpec>,
    pub p: Option<f64>,
    pub gamma: Option<f64>,
    pub iterations: Option<usize>,
    pub sample_size: Option<usize>,
    pub local_steps_baseline: Option<usize>,
    pub batch_size: Option<usize>,
    pub seed: Option<u64>,
    pub alpha: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    pub dataset: DatasetConfig,
    #[serde(default = "default_partition")]
    pub partition: PartitionConfig,
    pub model: ModelConfig,
    pub fed: FedConfig,
    /// Stepsizes to sweep; empty means `fed.gamma` only.
    #[serde(default)]
    pub grid: Vec<f64>,
    #[serde(default)]
    pub runs: Vec<RunOverride>,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

fn default_partition() -> PartitionConfig {
    PartitionConfig {
        alpha: default_alpha(),
    }
}

/// Stepsize grid used when tuning.
pub const DEFAULT_GAMMA_GRID: [f64; 5] = [0.005, 0.01, 0.05, 0.1, 0.5];

/// One (run, stepsize) combination.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Cell {
    pub name: String,
    pub run: String,
    pub alpha: f64,
    pub fed: FedConfig,
}

/// What a cell's JSON file echoes.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CellEcho {
    pub name: String,
    pub run: String,
    pub alpha: f64,
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub fed: FedConfig,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(vec![e.to_string()]))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    fn run_list(&self) -> Vec<RunOverride> {
        if self.runs.is_empty() {
            vec![RunOverride {
                name: self.fed.algorithm.name().to_string(),
                ..RunOverride::default()
            }]
        } else {
            self.runs.clone()
        }
    }

    /// Expands runs x stepsize grid into cells, in file order.
    pub fn cells(&self) -> Vec<Cell> {
        let mut cells = Vec::new();
        for run in self.run_list() {
            let mut fed = self.fed.clone();
            if let Some(v) = run.algorithm {
                fed.algorithm = v;
            }
            if let Some(v) = run.variant {
                fed.variant = v;
            }
            if let Some(v) = run.compressor {
                fed.compressor = v;
            }
            if let Some(v) = run.p {
                fed.p = v;
            }
            if let Some(v) = run.gamma {
                fed.gamma = v;
            }
            if let Some(v) = run.iterations {
                fed.iterations = v;
            }
            if let Some(v) = run.sample_size {
                fed.sample_size = v;
            }
            if let Some(v) = run.local_steps_baseline {
                fed.local_steps_baseline = v;
            }
            if let Some(v) = run.batch_size {
                fed.batch_size = v;
            }
            if let Some(v) = run.seed {
                fed.seed = v;
            }
            let alpha = run.alpha.unwrap_or(self.partition.alpha);
            let gammas = if self.grid.is_empty() {
                vec![fed.gamma]
            } else {
                self.grid.clone()
            };
            for gamma in gammas {
                let mut fed = fed.clone();
                fed.gamma = gamma;
                let name = if self.grid.is_empty() {
                    run.name.clone()
                } else {
                    format!("{}__gamma-{}", run.name, gamma)
                };
                cells.push(Cell {
                    name,
                    run: run.name.clone(),
                    alpha,
                    fed,
                });
            }
        }
        cells
    }

    /// Overrides the seed of `[fed]` and of every run.
    pub fn set_seed(&mut self, seed: u64) {
        self.fed.seed = seed;
        for run in &mut self.runs {
            run.seed = None;
        }
    }
}

/// Every invariant violation, each naming its key. Empty iff the config is
/// valid.
pub fn validate_config(config: &ExperimentConfig) -> Vec<Violation> {
    let mut out = Vec::new();
    match &config.dataset {
        DatasetConfig::Synth {
            n,
            n_features,
            n_classes,
            margin,
        } => {
            if *n_classes < 2 {
                out.push(Violation::new("dataset.n_classes", "must be >= 2"));
            }
            if n < n_classes {
                out.push(Violation::new("dataset.n", format!("{n} is below n_classes = {n_classes}")));
            }
            if *n_features < 1 {
                out.push(Violation::new("dataset.n_features", "must be >= 1"));
            }
            if !(*margin >= 0.0 && margin.is_finite()) {
                out.push(Violation::new("dataset.margin", "must be >= 0"));
            }
        }
        DatasetConfig::MnistIdx { .. } => {}
    }
    if !(config.partition.alpha > 0.0 && config.partition.alpha.is_finite()) {
        out.push(Violation::new("partition.alpha", format!("must be positive, got {}", config.partition.alpha)));
    }
    if config.model.kind == ModelKind::Mlp && config.model.hidden.is_empty() {
        out.push(Violation::new("model.hidden", "an MLP needs at least one hidden layer"));
    }
    if config.model.hidden.iter().any(|&h| h == 0) {
        out.push(Violation::new("model.hidden", "layer widths must be positive"));
    }
    if !(config.model.l2_reg >= 0.0 && config.model.l2_reg.is_finite()) {
        out.push(Violation::new("model.l2_reg", "must be >= 0"));
    }
    for (i, g) in config.grid.iter().enumerate() {
        if !(*g > 0.0 && g.is_finite()) {
            out.push(Violation::new(format!("grid[{i}]"), format!("stepsize must be positive, got {g}")));
        }
    }
    let mut names = BTreeMap::new();
    for (i, run) in config.runs.iter().enumerate() {
        if run.name.is_empty() || run.name.contains(['/', '\\']) {
            out.push(Violation::new(format!("runs[{i}].name"), "must be a non-empty file-name-safe string"));
        }
        if let Some(prev) = names.insert(run.name.clone(), i) {
            out.push(Violation::new(format!("runs[{i}].name"), format!("duplicates runs[{prev}]")));
        }
        if let Some(a) = run.alpha {
            if !(a > 0.0 && a.is_finite()) {
                out.push(Violation::new(format!("runs[{i}].alpha"), format!("must be positive, got {a}")));
            }
        }
    }

    // nested fed invariants, once per distinct offending key
    let mut seen = BTreeMap::new();
    for cell in config.cells() {
        for v in cell.fed.violations() {
            let key = if config.runs.is_empty() {
                v.key.clone()
            } else {
                format!("runs[{}]: {}", cell.run, v.key)
            };
            seen.entry(key.clone()).or_insert(Violation::new(key, v.message));
        }
    }
    out.extend(seen.into_values());
    out
}

/// Loads the configured dataset.
pub fn materialize_data(config: &DatasetConfig, seed: u64) -> Result<SplitDataset> {
    match config {
        DatasetConfig::Synth {
            n,
            n_features,
            n_classes,
            margin,
        } => data::synth_classification(
            &SynthSpec {
                n: *n,
                n_features: *n_features,
                n_classes: *n_classes,
                margin: *margin,
            },
            &mut derive_stream(seed, "data/synth"),
        ),
        DatasetConfig::MnistIdx {
            train_images,
            train_labels,
            test_images,
            test_labels,
        } => {
            for path in [train_images, train_labels, test_images, test_labels] {
                if !path.exists() {
                    return Err(Error::Data(format!("dataset file {} does not exist", path.display())));
                }
            }
            let train = data::load_idx(train_images, train_labels)?;
            let test = data::load_idx(test_images, test_labels)?;
            let n_classes = train.n_classes().max(test.n_classes());
            Ok(SplitDataset {
                train: train.with_n_classes(n_classes)?,
                test: test.with_n_classes(n_classes)?,
            })
        }
    }
}

/// Options that override the file or control execution.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub seed: Option<u64>,
    pub output_dir: Option<PathBuf>,
    pub quiet: bool,
    /// Worker threads; `None` uses the global rayon pool.
    pub threads: Option<usize>,
}

#[derive(Debug)]
pub struct CellResult {
    pub cell: Cell,
    pub outcome: Result<RunOutput>,
    pub csv_path: PathBuf,
    pub json_path: PathBuf,
}

#[derive(Debug)]
pub struct ExperimentReport {
    pub output_dir: PathBuf,
    pub cells: Vec<CellResult>,
    pub partition_files: Vec<PathBuf>,
}

impl ExperimentReport {
    pub fn all_ok(&self) -> bool {
        self.cells.iter().all(|c| c.outcome.is_ok())
    }

    pub fn failures(&self) -> impl Iterator<Item = (&str, &Error)> {
        self.cells
            .iter()
            .filter_map(|c| c.outcome.as_ref().err().map(|e| (c.cell.name.as_str(), e)))
    }

    /// Best test accuracy per cell.
    pub fn summary_table(&self) -> String {
        let mut s = format!(
            "{:<36} {:>13} {:>24} {:>8} {:>9} {:>9} {:>10} {:>7} {:>14}\n",
            "cell", "algorithm", "compressor", "gamma", "best_acc", "final_acc", "final_loss", "rounds", "uplink_bits"
        );
        for c in &self.cells {
            let fed = &c.cell.fed;
            let algo = fed.algorithm.name();
            match &c.outcome {
                Ok(out) => {
                    let sm = &out.summary;
                    s.push_str(&format!(
                        "{:<36} {:>13} {:>24} {:>8} {:>9.4} {:>9.4} {:>10.5} {:>7} {:>14}\n",
                        c.cell.name,
                        algo,
                        fed.compressor.to_string(),
                        fed.gamma,
                        sm.best_accuracy,
                        sm.final_accuracy,
                        sm.final_loss,
                        sm.comm_rounds,
                        sm.uplink_bits
                    ));
                }
                Err(e) => s.push_str(&format!("{:<36} FAILED: {e}\n", c.cell.name)),
            }
        }
        s
    }
}

/// Writes `path` through a temporary file in the same directory.
pub fn write_atomic(path: &Path, write: impl FnOnce(&mut dyn Write) -> Result<()>) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    {
        let mut buf = std::io::BufWriter::new(tmp.as_file_mut());
        write(&mut buf)?;
        buf.flush().map_err(|e| Error::io(path, e))?;
    }
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

fn run_cell(
    config: &ExperimentConfig,
    cell: &Cell,
    federation: &FederatedDataset,
    spec: &ModelSpec,
    out_dir: &Path,
) -> CellResult {
    let csv_path = out_dir.join(format!("{}.csv", cell.name));
    let json_path = out_dir.join(format!("{}.json", cell.name));
    let outcome = fed::run(&cell.fed, federation, spec).and_then(|out| {
        write_atomic(&csv_path, |w| out.record.write_csv(w))?;
        let echo = CellEcho {
            name: cell.name.clone(),
            run: cell.run.clone(),
            alpha: cell.alpha,
            dataset: config.dataset.clone(),
            model: config.model.clone(),
            fed: cell.fed.clone(),
        };
        let doc = crate::metrics::RunRecord {
            config: echo,
            tau: out.record.tau,
            rows: Vec::new(),
        };
        write_atomic(&json_path, |w| doc.write_json(w, &out.summary))?;
        Ok(out)
    });
    CellResult {
        cell: cell.clone(),
        outcome,
        csv_path,
        json_path,
    }
}

fn partition_key(alpha: f64, seed: u64) -> String {
    format!("partition__alpha-{alpha}__seed-{seed}")
}

/// Runs an already-parsed experiment.
pub fn run_config(mut config: ExperimentConfig, options: &RunOptions) -> Result<ExperimentReport> {
    if let Some(seed) = options.seed {
        config.set_seed(seed);
    }
    if let Some(dir) = &options.output_dir {
        config.output_dir = dir.clone();
    }
    let violations = validate_config(&config);
    if !violations.is_empty() {
        return Err(Error::Config(violations.iter().map(ToString::to_string).collect()));
    }

    let split = materialize_data(&config.dataset, config.fed.seed)?;
    if split.test.is_empty() {
        return Err(Error::Data("the test split is empty".into()));
    }
    let spec = config.model.spec(split.train.n_features(), split.train.n_classes());
    let train = Arc::new(split.train);
    let test = Arc::new(split.test);

    let out_dir = config.output_dir.clone();
    fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;

    let cells = config.cells();
    let mut federations: BTreeMap<String, Arc<FederatedDataset>> = BTreeMap::new();
    let mut partition_files = Vec::new();
    for cell in &cells {
        let key = partition_key(cell.alpha, cell.fed.seed);
        if federations.contains_key(&key) {
            continue;
        }
        let partition = data::dirichlet_partition(
            train.labels(),
            &PartitionSpec {
                n_clients: cell.fed.n_clients,
                alpha: cell.alpha,
            },
            &mut derive_stream(cell.fed.seed, "partition"),
        )?;
        let path = out_dir.join(format!("{key}.csv"));
        write_atomic(&path, |w| partition.write_stats_csv(train.labels(), train.n_classes(), w))?;
        partition_files.push(path);
        let federation = FederatedDataset::new(Arc::clone(&train), Arc::clone(&test), partition)?;
        federations.insert(key, Arc::new(federation));
    }

    let execute = || -> Vec<CellResult> {
        cells
            .par_iter()
            .map(|cell| {
                let federation = &federations[&partition_key(cell.alpha, cell.fed.seed)];
                run_cell(&config, cell, federation, &spec, &out_dir)
            })
            .collect()
    };
    let results = match options.threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::Parameter(format!("thread pool: {e}")))?
            .install(execute),
        None => execute(),
    };

    let report = ExperimentReport {
        output_dir: out_dir,
        cells: results,
        partition_files,
    };
    if !options.quiet {
        print!("{}", report.summary_table());
    }
    Ok(report)
}

/// Reads, validates and runs the experiment file at `path`.
pub fn run_experiment(path: &Path, options: &RunOptions) -> Result<ExperimentReport> {
    run_config(ExperimentConfig::load(path)?, options)
}

/// The federation and model spec a cell with this `alpha` and `seed` runs on.
pub fn dataset_for(config: &ExperimentConfig, alpha: f64, seed: u64) -> Result<(FederatedDataset, ModelSpec)> {
    let split = materialize_data(&config.dataset, config.fed.seed)?;
    let spec = config.model.spec(split.train.n_features(), split.train.n_classes());
    let partition = data::dirichlet_partition(
        split.train.labels(),
        &PartitionSpec {
            n_clients: config.fed.n_clients,
            alpha,
        },
        &mut derive_stream(seed, "partition"),
    )?;
    Ok((FederatedDataset::from_split(split, partition)?, spec))
}
