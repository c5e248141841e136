//! Run settings: JSON config files, command-line overrides and the manifest
//! written next to every run.
//!
//! Precedence is flags, then the config file, then built-in defaults. A
//! manifest is itself a valid config file, so `--config manifest.json`
//! replays the run it describes.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use unitnorm_core::{NetworkConfig, TrainConfig, UpdateRule};

use crate::idx::{MnistPaths, PixelScale};

/// Environment variable naming the directory that holds the four MNIST files.
pub const MNIST_DIR_ENV: &str = "UNITNORM_MNIST_DIR";
pub const DEFAULT_DATA_DIR: &str = "data";
pub const DEFAULT_OUT_DIR: &str = "out";

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("config {path}: {source}")]
    Parse { path: PathBuf, source: serde_json::Error },
    #[error("{0}")]
    Invalid(String),
}

/// Subcommands that produce a replayable run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Command {
    Search,
    Train,
    Protocol,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Search => "search",
            Command::Train => "train",
            Command::Protocol => "protocol",
        }
    }
}

/// Contents of a `--config` file. Every field is optional.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConfigFile {
    /// If present, must name the subcommand being run.
    pub command: Option<Command>,
    pub seed: Option<u64>,
    /// If present, must equal the seeds derived from `seed` and `train.n_runs`.
    pub seeds: Option<Vec<u64>>,
    pub network: Option<NetworkConfig>,
    pub train: Option<TrainConfig>,
    pub data_dir: Option<PathBuf>,
    pub train_images: Option<PathBuf>,
    pub train_labels: Option<PathBuf>,
    pub test_images: Option<PathBuf>,
    pub test_labels: Option<PathBuf>,
    pub pixel_scale: Option<PixelScale>,
    /// Skips the learning-rate search in `train`.
    pub base_lr: Option<f64>,
    pub out_dir: Option<PathBuf>,
    pub parallel: Option<usize>,
    /// Ignored on input.
    pub timestamp: Option<String>,
}

impl ConfigFile {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Read { path: path.into(), source })?;
        serde_json::from_str(&text).map_err(|source| ConfigError::Parse { path: path.into(), source })
    }
}

/// Values given on the command line.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Overrides {
    pub depth: Option<usize>,
    pub rule: Option<UpdateRule>,
    pub seed: Option<u64>,
    pub runs: Option<usize>,
    pub batch_size: Option<usize>,
    pub data_dir: Option<PathBuf>,
    pub train_images: Option<PathBuf>,
    pub train_labels: Option<PathBuf>,
    pub test_images: Option<PathBuf>,
    pub test_labels: Option<PathBuf>,
    pub base_lr: Option<f64>,
    pub out_dir: Option<PathBuf>,
    pub parallel: Option<usize>,
}

/// Fully resolved settings of one run, written as `manifest.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: Command,
    pub seed: u64,
    pub seeds: Vec<u64>,
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    pub test_images: PathBuf,
    pub test_labels: PathBuf,
    pub pixel_scale: PixelScale,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub base_lr: Option<f64>,
    pub out_dir: PathBuf,
    pub parallel: usize,
    pub timestamp: String,
}

impl RunManifest {
    pub fn paths(&self) -> MnistPaths {
        MnistPaths {
            train_images: self.train_images.clone(),
            train_labels: self.train_labels.clone(),
            test_images: self.test_images.clone(),
            test_labels: self.test_labels.clone(),
        }
    }

    pub fn write(&self, path: &Path) -> std::io::Result<()> {
        crate::artifacts::write_json(path, self)
    }
}

/// The data directory used when neither flags nor config name one.
pub fn default_data_dir() -> PathBuf {
    std::env::var_os(MNIST_DIR_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from(DEFAULT_DATA_DIR))
}

/// File paths for the data, by precedence: an explicit flag, the flag data
/// directory, an explicit config entry, the config data directory, then
/// [`default_data_dir`].
pub fn resolve_paths(flags: &Overrides, file: &ConfigFile) -> MnistPaths {
    let from_flag_dir = flags.data_dir.as_ref().map(MnistPaths::in_dir);
    let from_file_dir = MnistPaths::in_dir(file.data_dir.clone().unwrap_or_else(default_data_dir));
    let pick = |flag: &Option<PathBuf>, flag_dir: Option<&PathBuf>, entry: &Option<PathBuf>, file_dir: &PathBuf| {
        flag.clone().or_else(|| flag_dir.cloned()).or_else(|| entry.clone()).unwrap_or_else(|| file_dir.clone())
    };
    let fd = from_flag_dir.as_ref();
    MnistPaths {
        train_images: pick(
            &flags.train_images,
            fd.map(|d| &d.train_images),
            &file.train_images,
            &from_file_dir.train_images,
        ),
        train_labels: pick(
            &flags.train_labels,
            fd.map(|d| &d.train_labels),
            &file.train_labels,
            &from_file_dir.train_labels,
        ),
        test_images: pick(
            &flags.test_images,
            fd.map(|d| &d.test_images),
            &file.test_images,
            &from_file_dir.test_images,
        ),
        test_labels: pick(
            &flags.test_labels,
            fd.map(|d| &d.test_labels),
            &file.test_labels,
            &from_file_dir.test_labels,
        ),
    }
}

/// Merges flags over the config file over defaults and validates the result.
pub fn resolve(
    command: Command,
    flags: &Overrides,
    file: &ConfigFile,
    timestamp: String,
) -> Result<RunManifest, ConfigError> {
    if let Some(c) = file.command {
        if c != command {
            return Err(ConfigError::Invalid(format!(
                "config was written for `{}`, not `{}`",
                c.name(),
                command.name()
            )));
        }
    }
    let mut network = file.network.clone().unwrap_or_default();
    if let Some(d) = flags.depth {
        network.depth = d;
    }
    let mut train = file.train.clone().unwrap_or_default();
    if let Some(r) = flags.rule {
        train.update_rule = r;
    }
    if let Some(n) = flags.runs {
        train.n_runs = n;
    }
    if let Some(b) = flags.batch_size {
        train.batch_size = b;
    }
    network.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
    train.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;

    let seed = flags.seed.or(file.seed).unwrap_or(0);
    let seeds: Vec<u64> = match command {
        Command::Protocol => {
            if train.n_runs == 0 {
                return Err(ConfigError::Invalid("runs must be at least 1".into()));
            }
            (0..train.n_runs as u64).map(|i| seed + i).collect()
        }
        Command::Search | Command::Train => vec![seed],
    };
    // a stale seed list means the file was edited inconsistently; only an
    // overriding flag may change the seeds silently
    if let Some(listed) = &file.seeds {
        if flags.seed.is_none() && flags.runs.is_none() && *listed != seeds {
            return Err(ConfigError::Invalid(format!(
                "config lists seeds {listed:?} but seed and n_runs give {seeds:?}"
            )));
        }
    }

    let base_lr = flags.base_lr.or(file.base_lr);
    if let Some(lr) = base_lr {
        if command != Command::Train {
            return Err(ConfigError::Invalid("a fixed base learning rate only applies to `train`".into()));
        }
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(ConfigError::Invalid(format!("base learning rate must be positive, got {lr}")));
        }
    }
    let parallel = flags.parallel.or(file.parallel).unwrap_or(1);
    if parallel == 0 {
        return Err(ConfigError::Invalid("parallel must be at least 1".into()));
    }

    let paths = resolve_paths(flags, file);
    Ok(RunManifest {
        command,
        seed,
        seeds,
        network,
        train,
        train_images: paths.train_images,
        train_labels: paths.train_labels,
        test_images: paths.test_images,
        test_labels: paths.test_labels,
        pixel_scale: file.pixel_scale.unwrap_or_default(),
        base_lr,
        out_dir: flags.out_dir.clone().or_else(|| file.out_dir.clone()).unwrap_or_else(|| DEFAULT_OUT_DIR.into()),
        parallel,
        timestamp,
    })
}
