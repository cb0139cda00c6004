use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use stochlab::datasets::{synthetic_gaussians, write_csv};
use stochlab::label_mech::{annotate_all, read_dataset, selector_stats, write_dataset, StochasticDataset};
use stochlab::model::write_checkpoint;
use stochlab::oracle::{run_suite, OracleReport, SuiteConfig};
use stochlab::trainer::{train, EpochMetrics, Method, TrainData, TrainOutcome};
use stochlab::Exec;

use crate::data::{load, LoadedData};
use crate::error::{CliError, CliResult};
use crate::manifest::RunManifest;
use crate::settings::{AnnotateFlags, GenFlags, SweepSettings, TrainSettings, VerifyFlags};

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const RUNS_FILE: &str = "runs.csv";
pub const REPORT_FILE: &str = "report.txt";

fn data_settings(flags: &crate::settings::DataFlags) -> CliResult<TrainSettings> {
    let table = toml::Table::try_from(flags).map_err(|e| CliError::usage(e.to_string()))?;
    toml::Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| CliError::usage(e.message().to_owned()))
}

fn write_csv_rows<T: Serialize>(path: &Path, rows: &[T]) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::Data(e.to_string()))?;
    for row in rows {
        w.serialize(row).map_err(|e| CliError::Data(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Debug)]
pub struct AnnotateReport {
    pub dataset: StochasticDataset,
    pub none_fraction: f64,
}

pub fn annotate(flags: &AnnotateFlags) -> CliResult<AnnotateReport> {
    let settings = data_settings(&flags.data)?;
    let data = load(&settings)?;
    let k = data.train.k();
    let dataset = annotate_all(data.train.examples(), k, flags.set_size, flags.seed)?;
    if let Some(parent) = flags.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    write_dataset(&dataset, &flags.out, flags.with_features)?;

    let stats = selector_stats(&dataset)?;
    let none_fraction = stats.absent_count() as f64 / stats.total() as f64;
    println!("annotated {} examples, K={k}, l={}", stats.total(), flags.set_size);
    for (z, &count) in stats.counts().iter().enumerate() {
        let name = if z == k { "None".to_owned() } else { format!("s={}", z + 1) };
        println!("  {name:>5}: {count:>7}  ({:.4})", stats.probs()[z]);
    }
    println!("None fraction: {none_fraction:.4}");
    Ok(AnnotateReport { dataset, none_fraction })
}

#[derive(Clone, Debug, Serialize)]
pub struct TrainSummary {
    pub method: String,
    pub mode: String,
    pub set_size: Option<usize>,
    #[serde(rename = "K")]
    pub k: usize,
    pub epochs: usize,
    pub seed: u64,
    pub test_acc: f64,
    pub risk_total: f64,
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub outcome: TrainOutcome,
    pub summary: TrainSummary,
}

impl TrainReport {
    pub fn final_metrics(&self) -> &EpochMetrics {
        self.outcome.metrics.last().expect("at least one epoch")
    }
}

fn stochastic_data(settings: &TrainSettings, data: &LoadedData) -> CliResult<Option<StochasticDataset>> {
    if let Some(path) = &settings.stochastic_file {
        if !settings.method.needs_stochastic_data() {
            return Err(CliError::usage(format!(
                "--method {} trains on ordinary labels and cannot use --stochastic-file",
                settings.method
            )));
        }
        let mut dataset = read_dataset(path)?;
        if dataset.k() != data.train.k() {
            return Err(CliError::Data(format!(
                "{} has K={}, training data has K={}",
                path.display(),
                dataset.k(),
                data.train.k()
            )));
        }
        if let Some(l) = settings.set_size.filter(|&l| l != dataset.set_size()) {
            return Err(CliError::usage(format!("--set-size {l} disagrees with the file's l={}", dataset.set_size())));
        }
        if dataset.dim() == 0 {
            dataset.attach_features(data.train.examples())?;
        }
        return Ok(Some(dataset));
    }
    if !settings.method.needs_stochastic_data() {
        return Ok(None);
    }
    let l = settings
        .set_size
        .ok_or_else(|| CliError::usage(format!("--method {} needs --set-size or --stochastic-file", settings.method)))?;
    Ok(Some(annotate_all(data.train.examples(), data.train.k(), l, settings.seed)?))
}

/// Trains with already loaded data. With an `out_dir`, writes the manifest,
/// the metrics stream, the checkpoint and a one-row summary.
pub fn train_loaded(settings: &TrainSettings, data: &LoadedData, echo: bool) -> CliResult<TrainReport> {
    let stochastic = stochastic_data(settings, data)?;
    let train_data = match &stochastic {
        Some(d) => TrainData::Stochastic(d),
        None => TrainData::Labeled(&data.train),
    };
    let mut metrics_out = match &settings.out_dir {
        Some(dir) => {
            RunManifest::new("train", settings.seed, settings.to_table()?).write(dir)?;
            Some(BufWriter::new(File::create(dir.join(METRICS_FILE))?))
        }
        None => None,
    };
    let mut io_error = None;
    let outcome = train(train_data, &data.test, &settings.train_config(), |m| {
        let line = serde_json::to_string(m).expect("metrics serialize");
        if echo {
            println!("{line}");
        }
        if let Some(w) = metrics_out.as_mut() {
            if let Err(e) = writeln!(w, "{line}") {
                io_error.get_or_insert(e);
            }
        }
    });
    if let Some(w) = metrics_out.as_mut() {
        w.flush()?;
    }
    let outcome = outcome?;
    if let Some(e) = io_error {
        return Err(e.into());
    }
    let last = outcome.metrics.last().expect("at least one epoch");
    let summary = TrainSummary {
        method: settings.method.to_string(),
        mode: last.mode.map(|m| m.to_string()).unwrap_or_default(),
        set_size: last.l,
        k: last.k,
        epochs: settings.epochs,
        seed: settings.seed,
        test_acc: last.test_acc,
        risk_total: last.risk_total,
    };
    if let Some(dir) = &settings.out_dir {
        write_checkpoint(&outcome.params, dir.join(CHECKPOINT_FILE))?;
        write_csv_rows(&dir.join(SUMMARY_FILE), std::slice::from_ref(&summary))?;
    }
    Ok(TrainReport { outcome, summary })
}

pub fn train_command(settings: &TrainSettings) -> CliResult<TrainReport> {
    let data = load(settings)?;
    let report = train_loaded(settings, &data, true)?;
    eprintln!(
        "final test accuracy {:.4} ({} epochs, method {})",
        report.summary.test_acc, settings.epochs, settings.method
    );
    Ok(report)
}

pub fn verify(flags: &VerifyFlags) -> CliResult<OracleReport> {
    let base = if flags.quick {
        SuiteConfig::quick()
    } else {
        SuiteConfig::default()
    };
    let config = SuiteConfig {
        seed: flags.seed,
        trials: flags.trials.unwrap_or(base.trials),
        fault: flags.inject_fault,
        exec: if flags.sequential { Exec::Sequential } else { Exec::Parallel },
        ..base
    };
    let report = run_suite(&config)?;
    let text = report.to_string();
    println!("{text}");
    if let Some(dir) = &flags.out_dir {
        let table = toml::Table::try_from(flags).map_err(|e| CliError::usage(e.to_string()))?;
        RunManifest::new("verify", flags.seed, table).write(dir)?;
        fs::write(dir.join(REPORT_FILE), &text)?;
    }
    if !report.identities_hold() {
        return Err(CliError::Verify("identity residuals exceed tolerance".into()));
    }
    if !report.convergence_holds() {
        return Err(CliError::Verify("Monte-Carlo convergence outside the expected rate".into()));
    }
    println!("all oracle checks passed");
    Ok(report)
}

#[derive(Clone, Debug, Serialize)]
pub struct RunRow {
    pub method: String,
    pub set_size: Option<usize>,
    pub seed: u64,
    pub status: String,
    pub test_acc: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CellSummary {
    pub method: String,
    pub set_size: Option<usize>,
    pub runs: usize,
    pub mean_acc: f64,
    /// Sample standard deviation (n - 1); 0 for a single run.
    pub std_acc: f64,
}

#[derive(Clone, Debug)]
pub struct SweepReport {
    pub runs: Vec<RunRow>,
    pub cells: Vec<CellSummary>,
}

impl SweepReport {
    pub fn cell(&self, set_size: Option<usize>) -> Option<&CellSummary> {
        self.cells.iter().find(|c| c.set_size == set_size)
    }
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn child_dir(root: &Path, method: Method, set_size: Option<usize>, seed: u64) -> PathBuf {
    let cell = set_size.map_or_else(|| method.to_string(), |l| format!("{method}-l{l}"));
    root.join(format!("{cell}-seed{seed}"))
}

/// Runs every (set size, seed) cell; each run is single-threaded, cells fan
/// out unless `sequential`. Completed runs are written even if others fail.
pub fn sweep(settings: &SweepSettings) -> CliResult<SweepReport> {
    let root = settings
        .train
        .out_dir
        .clone()
        .ok_or_else(|| CliError::usage("sweep needs --out-dir"))?;
    let method = settings.train.method;
    let sizes: Vec<Option<usize>> = if method.needs_stochastic_data() {
        if settings.set_sizes.is_empty() && settings.train.stochastic_file.is_none() {
            return Err(CliError::usage("sweep needs --set-sizes"));
        }
        if settings.train.stochastic_file.is_some() {
            vec![None]
        } else {
            settings.set_sizes.iter().copied().map(Some).collect()
        }
    } else {
        vec![None]
    };
    RunManifest::new("sweep", settings.train.seed, settings.to_table()?).write(&root)?;
    let data = load(&settings.train)?;

    let cells: Vec<(Option<usize>, u64)> = sizes
        .iter()
        .flat_map(|&l| (0..settings.trials as u64).map(move |t| (l, settings.train.seed + t)))
        .collect();
    let exec = settings.train.exec();
    let results = exec.map(cells.len(), |i| {
        let (set_size, seed) = cells[i];
        let child = TrainSettings {
            set_size: set_size.or(settings.train.set_size),
            seed,
            sequential: true,
            out_dir: Some(child_dir(&root, method, set_size, seed)),
            ..settings.train.clone()
        };
        train_loaded(&child, &data, false)
    });

    let mut runs = Vec::new();
    let mut first_error = None;
    for (&(set_size, seed), result) in cells.iter().zip(results) {
        let (status, test_acc) = match result {
            Ok(report) => ("ok".to_owned(), Some(report.summary.test_acc)),
            Err(e) => {
                let status = format!("error: {e}");
                first_error.get_or_insert(e);
                (status, None)
            }
        };
        runs.push(RunRow {
            method: method.to_string(),
            set_size,
            seed,
            status,
            test_acc,
        });
    }
    let cells: Vec<CellSummary> = sizes
        .iter()
        .filter_map(|&l| {
            let accs: Vec<f64> = runs.iter().filter(|r| r.set_size == l).filter_map(|r| r.test_acc).collect();
            if accs.is_empty() {
                return None;
            }
            let (mean_acc, std_acc) = mean_std(&accs);
            Some(CellSummary {
                method: method.to_string(),
                set_size: l,
                runs: accs.len(),
                mean_acc,
                std_acc,
            })
        })
        .collect();
    write_csv_rows(&root.join(RUNS_FILE), &runs)?;
    write_csv_rows(&root.join(SUMMARY_FILE), &cells)?;
    for c in &cells {
        let l = c.set_size.map_or_else(|| "-".to_owned(), |l| l.to_string());
        println!("{} l={l}: {:.4} ± {:.4} ({} runs)", c.method, c.mean_acc, c.std_acc, c.runs);
    }
    match first_error {
        Some(e) => Err(e),
        None => Ok(SweepReport { runs, cells }),
    }
}

pub fn gen_synthetic(flags: &GenFlags) -> CliResult<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(flags.seed);
    let (train_set, test_set) = synthetic_gaussians(flags.classes, flags.dim, flags.separation, flags.per_class, &mut rng)?;
    let table = toml::Table::try_from(flags).map_err(|e| CliError::usage(e.to_string()))?;
    RunManifest::new("gen-synthetic", flags.seed, table).write(&flags.out_dir)?;
    write_csv(&train_set, flags.out_dir.join("train.csv"))?;
    write_csv(&test_set, flags.out_dir.join("test.csv"))?;
    println!(
        "wrote {} train / {} test examples to {}",
        train_set.len(),
        test_set.len(),
        flags.out_dir.display()
    );
    Ok(())
}
