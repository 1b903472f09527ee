//! Run configuration: the file form of the training setup plus data source
//! and output directory.
//!
//! The on-disk format is flat `key = value` text with `#` comments — easy to
//! diff across experiments. Unknown keys are rejected. Every key has a
//! default; command-line flags override file values.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use crate::autodiff::TraceEstimator;
use crate::data::{load_csv, sample_toy, DatasetSplit};
use crate::error::{Error, Result};
use crate::potential::ProbeDist;
use crate::trainer::TrainConfig;

/// Where training samples come from.
#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    /// Named 2-D benchmark density.
    Toy(String),
    /// Numeric delimited file.
    Csv(PathBuf),
}

impl DataSource {
    fn parse(value: &str) -> Result<DataSource> {
        if let Some(name) = value.strip_prefix("toy:") {
            Ok(DataSource::Toy(name.to_string()))
        } else if let Some(path) = value.strip_prefix("csv:") {
            Ok(DataSource::Csv(PathBuf::from(path)))
        } else {
            Err(Error::Config(format!(
                "data source '{value}' must be 'toy:<name>' or 'csv:<path>'"
            )))
        }
    }

    fn render(&self) -> String {
        match self {
            DataSource::Toy(name) => format!("toy:{name}"),
            DataSource::Csv(path) => format!("csv:{}", path.display()),
        }
    }
}

/// Everything a run needs: training hyperparameters, data, and output
/// location.
#[derive(Clone, Debug)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub data: DataSource,
    pub out_dir: PathBuf,
    /// Sample count drawn from toy sources.
    pub toy_samples: usize,
    /// Train and validation fractions; the rest is the test split.
    pub split: (f64, f64),
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            train: TrainConfig::default(),
            data: DataSource::Toy("eight-gaussians".into()),
            out_dir: PathBuf::from("runs/latest"),
            toy_samples: 20_000,
            split: (0.8, 0.1),
        }
    }
}

impl RunConfig {
    /// Parse a config file. Later lines override earlier ones.
    pub fn from_file(path: &Path) -> Result<RunConfig> {
        let mut config = RunConfig::default();
        let text = std::fs::read_to_string(path)?;
        let mut seen = BTreeSet::new();
        for (line_no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!(
                    "{}:{}: expected 'key = value', got '{raw}'",
                    path.display(),
                    line_no + 1
                )));
            };
            let key = key.trim();
            seen.insert(key.to_string());
            config.set(key, value.trim()).map_err(|e| {
                Error::Config(format!("{}:{}: {e}", path.display(), line_no + 1))
            })?;
        }
        Ok(config)
    }

    /// Apply one `key = value` assignment. The single entry point for both
    /// file parsing and command-line overrides.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = |what: &str| Error::Config(format!("invalid {what}: '{value}'"));
        macro_rules! parse {
            ($ty:ty, $what:expr) => {
                value.parse::<$ty>().map_err(|_| bad($what))?
            };
        }
        match key {
            "data" => self.data = DataSource::parse(value)?,
            "out_dir" => self.out_dir = PathBuf::from(value),
            "toy_samples" => self.toy_samples = parse!(usize, "sample count"),
            "split_train" => self.split.0 = parse!(f64, "fraction"),
            "split_val" => self.split.1 = parse!(f64, "fraction"),
            "m" => self.train.m = parse!(usize, "width"),
            "layers" => self.train.layers = parse!(usize, "layer count"),
            "nt_train" => self.train.nt_train = parse!(usize, "step count"),
            "nt_val" => self.train.nt_val = parse!(usize, "step count"),
            "alpha1" => self.train.alpha1 = parse!(f64, "weight"),
            "alpha2" => self.train.alpha2 = parse!(f64, "weight"),
            "lr" => self.train.lr = parse!(f64, "learning rate"),
            "lr_decay" => self.train.lr_decay = parse!(f64, "decay factor"),
            "adam_beta1" => self.train.adam_beta1 = parse!(f64, "beta"),
            "adam_beta2" => self.train.adam_beta2 = parse!(f64, "beta"),
            "adam_eps" => self.train.adam_eps = parse!(f64, "epsilon"),
            "batch_size" => self.train.batch_size = parse!(usize, "batch size"),
            "max_iters" => self.train.max_iters = parse!(usize, "iteration budget"),
            "val_every" => self.train.val_every = parse!(usize, "validation cadence"),
            "patience" => self.train.patience = parse!(usize, "patience"),
            "seed" => self.train.seed = parse!(u64, "seed"),
            "rank" => {
                self.train.rank = if value == "auto" {
                    None
                } else {
                    Some(parse!(usize, "rank"))
                }
            }
            "trace" => self.train.trace = parse_trace(value)?,
            other => {
                return Err(Error::Config(format!(
                    "unknown configuration key '{other}'"
                )));
            }
        }
        Ok(())
    }

    /// Diff-able echo of the full configuration.
    pub fn to_key_values(&self) -> String {
        let trace = match self.train.trace {
            TraceEstimator::Exact => "exact".to_string(),
            TraceEstimator::Hutchinson { probes, dist } => format!(
                "hutchinson:{probes}:{}",
                match dist {
                    ProbeDist::Rademacher => "rademacher",
                    ProbeDist::Gaussian => "gaussian",
                }
            ),
        };
        let rank = self
            .train
            .rank
            .map(|r| r.to_string())
            .unwrap_or_else(|| "auto".into());
        format!(
            "data = {}\nout_dir = {}\ntoy_samples = {}\nsplit_train = {}\nsplit_val = {}\n\
             m = {}\nlayers = {}\nnt_train = {}\nnt_val = {}\nalpha1 = {}\nalpha2 = {}\n\
             lr = {}\nlr_decay = {}\nadam_beta1 = {}\nadam_beta2 = {}\nadam_eps = {}\n\
             batch_size = {}\nmax_iters = {}\nval_every = {}\npatience = {}\nseed = {}\n\
             rank = {rank}\ntrace = {trace}\n",
            self.data.render(),
            self.out_dir.display(),
            self.toy_samples,
            self.split.0,
            self.split.1,
            self.train.m,
            self.train.layers,
            self.train.nt_train,
            self.train.nt_val,
            self.train.alpha1,
            self.train.alpha2,
            self.train.lr,
            self.train.lr_decay,
            self.train.adam_beta1,
            self.train.adam_beta2,
            self.train.adam_eps,
            self.train.batch_size,
            self.train.max_iters,
            self.train.val_every,
            self.train.patience,
            self.train.seed,
        )
    }

    /// Materialize the configured data source into a standardized split.
    pub fn load_data(&self) -> Result<DatasetSplit> {
        match &self.data {
            DataSource::Toy(name) => {
                let samples = sample_toy(name, self.toy_samples, self.train.seed)?;
                DatasetSplit::from_matrix(samples, &format!("toy:{name}"), self.split, self.train.seed)
            }
            DataSource::Csv(path) => {
                let load = load_csv(path, None, self.split, self.train.seed)?;
                if load.dropped_rows > 0 {
                    eprintln!(
                        "note: dropped {} non-finite rows of {}",
                        load.dropped_rows, load.total_rows
                    );
                }
                Ok(load.split)
            }
        }
    }
}

/// `exact`, `hutchinson:<K>`, or `hutchinson:<K>:<rademacher|gaussian>`.
fn parse_trace(value: &str) -> Result<TraceEstimator> {
    if value == "exact" {
        return Ok(TraceEstimator::Exact);
    }
    let mut parts = value.split(':');
    match parts.next() {
        Some("hutchinson") => {
            let probes = parts
                .next()
                .unwrap_or("1")
                .parse::<usize>()
                .map_err(|_| Error::Config(format!("invalid probe count in '{value}'")))?;
            let dist = match parts.next() {
                None | Some("rademacher") => ProbeDist::Rademacher,
                Some("gaussian") => ProbeDist::Gaussian,
                Some(other) => {
                    return Err(Error::Config(format!("unknown probe distribution '{other}'")))
                }
            };
            Ok(TraceEstimator::Hutchinson { probes, dist })
        }
        _ => Err(Error::Config(format!(
            "trace mode '{value}' must be 'exact' or 'hutchinson:<K>[:<dist>]'"
        ))),
    }
}
