//! Command-line flags and their resolved settings.
//!
//! Flags are all optional. Resolution layers them over an optional `--config`
//! file (key-value TOML, or a manifest's `[config]` table) and then over the
//! defaults. The resolved settings serialize back to the same key-value form,
//! which is what manifests store, and to an equivalent flag list.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use stochlab::estimator::{CountScope, Weighting, WeightingMode};
use stochlab::model::{Architecture, DEFAULT_HIDDEN};
use stochlab::trainer::{Method, TrainConfig};
use stochlab::Exec;

use crate::error::{CliError, CliResult};
use crate::manifest::load_config_table;

#[derive(Debug, Parser)]
#[command(name = "stochlab", version, about = "Learning from stochastic labels", args_override_self = true)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate stochastic-label annotation of a labeled training set.
    Annotate(AnnotateFlags),
    /// Train one model and write metrics, checkpoint and summary.
    Train(TrainFlags),
    /// Run the exact-enumeration oracle suite.
    Verify(VerifyFlags),
    /// Train over set sizes × seeds and aggregate test accuracy.
    Sweep(SweepFlags),
    /// Export a synthetic Gaussian mixture as train/test CSV.
    GenSynthetic(GenFlags),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    #[default]
    Mnist,
    Fashion,
    Kuzushiji,
    Csv,
    Synthetic,
}

impl DatasetKind {
    /// Subdirectory name for IDX datasets.
    pub fn idx_name(self) -> Option<&'static str> {
        match self {
            DatasetKind::Mnist => Some("mnist"),
            DatasetKind::Fashion => Some("fashion"),
            DatasetKind::Kuzushiji => Some("kuzushiji"),
            DatasetKind::Csv | DatasetKind::Synthetic => None,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum ArchKind {
    Linear,
    #[default]
    Mlp,
}

fn is_false(b: &bool) -> bool {
    !*b
}

#[derive(Args, Clone, Debug, Default, Serialize)]
pub struct DataFlags {
    /// Dataset source.
    #[arg(long, value_enum)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dataset: Option<DatasetKind>,
    /// Root holding `<name>/` IDX directories (default: $STOCHLAB_DATA_DIR).
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data_dir: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_csv: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_csv: Option<PathBuf>,
    /// Inclusive 1-based class range `A..B`; labels are renumbered from 1.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub classes: Option<String>,
    /// Keep only the first N training examples (after class filtering).
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_limit: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_limit: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub synth_classes: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub synth_dim: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub synth_separation: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub synth_per_class: Option<usize>,
    /// Seed of the synthetic generator (independent of the run seed).
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data_seed: Option<u64>,
}

#[derive(Args, Clone, Debug, Default, Serialize)]
pub struct TrainFlags {
    /// Key-value TOML file or a run manifest; flags override it.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    pub data: DataFlags,
    /// Pre-annotated training set written by `annotate`.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stochastic_file: Option<PathBuf>,
    /// Size l of the shown label set.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub set_size: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub method: Option<Method>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mode: Option<WeightingMode>,
    /// Where literal mode takes n and n_s from: `batch` or `global`.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub count_scope: Option<CountScope>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epochs: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lr: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub momentum: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[arg(long, value_enum)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub arch: Option<ArchKind>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hidden: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval_every: Option<usize>,
    /// Record per-epoch wall-clock milliseconds (makes metrics run-dependent).
    #[arg(long)]
    #[serde(skip_serializing_if = "is_false")]
    pub record_time: bool,
    /// Disable data-parallel evaluation.
    #[arg(long)]
    #[serde(skip_serializing_if = "is_false")]
    pub sequential: bool,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
}

#[derive(Args, Clone, Debug, Default, Serialize)]
pub struct SweepFlags {
    #[command(flatten)]
    #[serde(flatten)]
    pub train: TrainFlags,
    /// Comma-separated set sizes (ignored for `--method ol`).
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub set_sizes: Option<String>,
    /// Seeds per cell: `seed, seed+1, ...`.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub trials: Option<usize>,
}

#[derive(Args, Clone, Debug, Default)]
pub struct AnnotateFlags {
    #[command(flatten)]
    pub data: DataFlags,
    #[arg(long)]
    pub set_size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Store feature vectors in the file (otherwise `train` re-attaches them).
    #[arg(long)]
    pub with_features: bool,
}

#[derive(Args, Clone, Debug, Default, Serialize)]
pub struct VerifyFlags {
    /// Restrict the grid to K <= 4.
    #[arg(long)]
    pub quick: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Monte-Carlo trials per sample size.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub trials: Option<usize>,
    /// Test hook: corrupts the complementary weight so the identities fail.
    #[arg(long)]
    pub inject_fault: bool,
    #[arg(long)]
    pub sequential: bool,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
}

#[derive(Args, Clone, Debug, Serialize)]
pub struct GenFlags {
    #[arg(long, default_value_t = 3)]
    pub classes: usize,
    #[arg(long, default_value_t = 2)]
    pub dim: usize,
    #[arg(long, default_value_t = 6.0)]
    pub separation: f64,
    #[arg(long, default_value_t = 500)]
    pub per_class: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out_dir: PathBuf,
}

/// Fully resolved training configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSettings {
    pub dataset: DatasetKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data_dir: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_csv: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_csv: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub classes: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_limit: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_limit: Option<usize>,
    pub synth_classes: usize,
    pub synth_dim: usize,
    pub synth_separation: f64,
    pub synth_per_class: usize,
    pub data_seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stochastic_file: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub set_size: Option<usize>,
    pub method: Method,
    pub mode: WeightingMode,
    pub count_scope: CountScope,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub arch: ArchKind,
    pub hidden: usize,
    pub eval_every: usize,
    pub record_time: bool,
    pub sequential: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
}

impl Default for TrainSettings {
    fn default() -> Self {
        let base = TrainConfig::default();
        Self {
            dataset: DatasetKind::default(),
            data_dir: None,
            train_csv: None,
            test_csv: None,
            classes: None,
            train_limit: None,
            test_limit: None,
            synth_classes: 3,
            synth_dim: 2,
            synth_separation: 6.0,
            synth_per_class: 500,
            data_seed: 0,
            stochastic_file: None,
            set_size: None,
            method: base.method,
            mode: base.weighting.mode,
            count_scope: base.weighting.scope,
            epochs: base.epochs,
            batch_size: base.batch_size,
            lr: base.lr,
            momentum: base.momentum,
            weight_decay: base.weight_decay,
            seed: base.seed,
            arch: ArchKind::Mlp,
            hidden: DEFAULT_HIDDEN,
            eval_every: base.eval_every,
            record_time: false,
            sequential: false,
            out_dir: None,
        }
    }
}

fn to_table<T: Serialize>(value: &T) -> CliResult<toml::Table> {
    toml::Table::try_from(value).map_err(|e| CliError::usage(e.to_string()))
}

fn from_table<T: for<'de> Deserialize<'de>>(table: toml::Table) -> CliResult<T> {
    toml::Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| CliError::usage(format!("config: {}", e.message())))
}

/// Config file (if any) overlaid with explicitly given flags.
fn layered<T: Serialize>(config: Option<&PathBuf>, flags: &T) -> CliResult<toml::Table> {
    let mut table = match config {
        Some(path) => load_config_table(path)?,
        None => toml::Table::new(),
    };
    table.extend(to_table(flags)?);
    Ok(table)
}

fn value_to_arg(value: &toml::Value) -> Option<String> {
    match value {
        toml::Value::String(s) => Some(s.clone()),
        toml::Value::Integer(i) => Some(i.to_string()),
        toml::Value::Float(f) => Some(f.to_string()),
        toml::Value::Boolean(_) => None,
        other => Some(other.to_string()),
    }
}

/// `--key value` pairs for every entry; `true` booleans become bare flags.
fn table_to_args(table: &toml::Table) -> Vec<String> {
    let mut args = Vec::new();
    for (key, value) in table {
        let flag = format!("--{}", key.replace('_', "-"));
        match value {
            toml::Value::Boolean(true) => args.push(flag),
            toml::Value::Boolean(false) => {}
            toml::Value::Array(items) => {
                args.push(flag);
                args.push(items.iter().filter_map(value_to_arg).collect::<Vec<_>>().join(","));
            }
            _ => {
                args.push(flag);
                args.extend(value_to_arg(value));
            }
        }
    }
    args
}

/// Parses an inclusive class range `A..B` (also `A-B` or `A~B`).
pub fn parse_class_range(text: &str) -> CliResult<(usize, usize)> {
    let parts: Vec<&str> = text.split("..").collect();
    let parts = if parts.len() == 2 {
        parts
    } else {
        text.split(['-', '~']).collect()
    };
    match parts.as_slice() {
        [a, b] => match (a.trim().parse(), b.trim().parse()) {
            (Ok(lo), Ok(hi)) => Ok((lo, hi)),
            _ => Err(CliError::usage(format!("bad class range `{text}`; expected A..B"))),
        },
        _ => Err(CliError::usage(format!("bad class range `{text}`; expected A..B"))),
    }
}

impl TrainSettings {
    pub fn resolve(flags: &TrainFlags) -> CliResult<Self> {
        from_table(layered(flags.config.as_ref(), flags)?)
    }

    /// Resolves from raw `train` arguments (without the subcommand).
    pub fn from_args<I: IntoIterator<Item = S>, S: Into<String>>(args: I) -> CliResult<Self> {
        #[derive(Parser)]
        #[command(args_override_self = true)]
        struct Wrapper {
            #[command(flatten)]
            flags: TrainFlags,
        }
        let argv = std::iter::once("train".to_owned()).chain(args.into_iter().map(Into::into));
        let wrapper = Wrapper::try_parse_from(argv).map_err(|e| CliError::usage(e.to_string()))?;
        Self::resolve(&wrapper.flags)
    }

    pub fn to_table(&self) -> CliResult<toml::Table> {
        to_table(self)
    }

    /// Flags that resolve back to these settings.
    pub fn to_args(&self) -> CliResult<Vec<String>> {
        Ok(table_to_args(&self.to_table()?))
    }

    pub fn architecture(&self) -> Architecture {
        match self.arch {
            ArchKind::Linear => Architecture::Linear,
            ArchKind::Mlp => Architecture::Mlp { hidden: self.hidden },
        }
    }

    pub fn exec(&self) -> Exec {
        if self.sequential {
            Exec::Sequential
        } else {
            Exec::Parallel
        }
    }

    pub fn class_range(&self) -> CliResult<Option<(usize, usize)>> {
        self.classes.as_deref().map(parse_class_range).transpose()
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            method: self.method,
            weighting: Weighting {
                mode: self.mode,
                scope: self.count_scope,
            },
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            seed: self.seed,
            architecture: self.architecture(),
            eval_every: self.eval_every,
            record_wall_clock: self.record_time,
            exec: self.exec(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepSettings {
    pub set_sizes: Vec<usize>,
    pub trials: usize,
    pub train: TrainSettings,
}

pub const DEFAULT_TRIALS: usize = 5;

fn parse_sizes(value: &toml::Value) -> CliResult<Vec<usize>> {
    let bad = || CliError::usage(format!("bad set sizes `{value}`"));
    match value {
        toml::Value::String(s) => s
            .split(',')
            .filter(|p| !p.trim().is_empty())
            .map(|p| p.trim().parse().map_err(|_| bad()))
            .collect(),
        toml::Value::Array(items) => items
            .iter()
            .map(|v| v.as_integer().and_then(|i| usize::try_from(i).ok()).ok_or_else(bad))
            .collect(),
        toml::Value::Integer(i) => usize::try_from(*i).map(|v| vec![v]).map_err(|_| bad()),
        _ => Err(bad()),
    }
}

impl SweepSettings {
    pub fn resolve(flags: &SweepFlags) -> CliResult<Self> {
        Self::from_table(layered(flags.train.config.as_ref(), flags)?)
    }

    pub fn from_args<I: IntoIterator<Item = S>, S: Into<String>>(args: I) -> CliResult<Self> {
        #[derive(Parser)]
        #[command(args_override_self = true)]
        struct Wrapper {
            #[command(flatten)]
            flags: SweepFlags,
        }
        let argv = std::iter::once("sweep".to_owned()).chain(args.into_iter().map(Into::into));
        let wrapper = Wrapper::try_parse_from(argv).map_err(|e| CliError::usage(e.to_string()))?;
        Self::resolve(&wrapper.flags)
    }

    fn from_table(mut table: toml::Table) -> CliResult<Self> {
        let set_sizes = table.remove("set_sizes").map(|v| parse_sizes(&v)).transpose()?;
        let trials = match table.remove("trials") {
            Some(v) => v
                .as_integer()
                .and_then(|i| usize::try_from(i).ok())
                .filter(|&t| t > 0)
                .ok_or_else(|| CliError::usage(format!("bad trials `{v}`")))?,
            None => DEFAULT_TRIALS,
        };
        let train: TrainSettings = from_table(table)?;
        let set_sizes = match set_sizes {
            Some(sizes) => sizes,
            None => train.set_size.into_iter().collect(),
        };
        Ok(Self {
            set_sizes,
            trials,
            train,
        })
    }

    pub fn to_table(&self) -> CliResult<toml::Table> {
        let mut table = self.train.to_table()?;
        table.insert(
            "set_sizes".into(),
            toml::Value::Array(self.set_sizes.iter().map(|&l| toml::Value::Integer(l as i64)).collect()),
        );
        table.insert("trials".into(), toml::Value::Integer(self.trials as i64));
        Ok(table)
    }

    pub fn to_args(&self) -> CliResult<Vec<String>> {
        Ok(table_to_args(&self.to_table()?))
    }
}
