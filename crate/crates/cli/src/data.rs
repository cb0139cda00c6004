use std::path::PathBuf;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use stochlab::datasets::{class_filter, load_csv, load_idx, load_idx_limited, locate_idx, synthetic_gaussians};
use stochlab::datasets::{LabeledDataset, Split};

use crate::error::{CliError, CliResult};
use crate::settings::{DatasetKind, TrainSettings};

pub const DATA_DIR_ENV: &str = "STOCHLAB_DATA_DIR";

#[derive(Clone, Debug)]
pub struct LoadedData {
    pub train: LabeledDataset,
    pub test: LabeledDataset,
}

fn data_root(settings: &TrainSettings) -> CliResult<PathBuf> {
    settings
        .data_dir
        .clone()
        .or_else(|| std::env::var_os(DATA_DIR_ENV).map(PathBuf::from))
        .ok_or_else(|| CliError::usage(format!("no data directory: pass --data-dir or set {DATA_DIR_ENV}")))
}

/// Pins the data root taken from the environment into the settings, so the
/// manifest alone reproduces the run.
pub fn pin_data_dir(settings: &mut TrainSettings) {
    if settings.data_dir.is_none() && settings.dataset.idx_name().is_some() {
        settings.data_dir = std::env::var_os(DATA_DIR_ENV).map(PathBuf::from);
    }
}

/// Loads train and test splits, applies the class range, then the limits.
pub fn load(settings: &TrainSettings) -> CliResult<LoadedData> {
    let range = settings.class_range()?;
    let (train, test) = match settings.dataset {
        DatasetKind::Csv => {
            let (Some(train_path), Some(test_path)) = (&settings.train_csv, &settings.test_csv) else {
                return Err(CliError::usage("--dataset csv needs --train-csv and --test-csv"));
            };
            let train = load_csv(train_path, None)?;
            let test = load_csv(test_path, Some(train.k()))?;
            (train, test)
        }
        DatasetKind::Synthetic => {
            let mut rng = ChaCha8Rng::seed_from_u64(settings.data_seed);
            synthetic_gaussians(
                settings.synth_classes,
                settings.synth_dim,
                settings.synth_separation,
                settings.synth_per_class,
                &mut rng,
            )?
        }
        kind => {
            let name = kind.idx_name().expect("image dataset");
            let root = data_root(settings)?;
            let (train_images, train_labels) = locate_idx(&root, name, Split::Train)?;
            let (test_images, test_labels) = locate_idx(&root, name, Split::Test)?;
            // Without a class filter the limit can be applied while decoding.
            let early_limit = if range.is_none() { settings.train_limit } else { None };
            let train = load_idx_limited(&train_images, &train_labels, early_limit)?;
            (train, load_idx(&test_images, &test_labels)?)
        }
    };
    let (train, test) = match range {
        Some((lo, hi)) => (class_filter(&train, lo, hi)?, class_filter(&test, lo, hi)?),
        None => (train, test),
    };
    let train = match settings.train_limit {
        Some(n) => train.truncate(n),
        None => train,
    };
    let test = match settings.test_limit {
        Some(n) => test.truncate(n),
        None => test,
    };
    if train.is_empty() || test.is_empty() {
        return Err(CliError::Data("empty training or test set after filtering".into()));
    }
    Ok(LoadedData { train, test })
}
