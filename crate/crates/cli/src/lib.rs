//! Subcommands of the `miseg` binary, callable as plain functions.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use miseg::data::{generate_dataset, split, SplitSpec, Splits, SyntheticSpec};
use miseg::network::SegNetConfig;
use miseg::toy::{toy_cluster, ToyConfig, ToyReport};
use miseg::trainer::{evaluate, load_model, train, RunOptions, TrainConfig, TrainReport};
use miseg::verify::{run_suite, MiFn, VerifyReport};

pub const SCHEMA_VERSION: u32 = 1;
/// Resolved configuration written next to every output.
pub const RESOLVED_CONFIG: &str = "config.resolved.toml";
pub const DATA_MANIFEST: &str = "manifest.json";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] miseg::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("verification failed: {0} check(s) did not pass")]
    Verify(usize),
}

impl CliError {
    /// 1 for bad input or configuration, 2 for failures while running.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Config(_) => 1,
            CliError::Core(e) => match e {
                miseg::Error::Config { .. } | miseg::Error::Invalid(_) | miseg::Error::Shape { .. } => 1,
                _ => 2,
            },
            CliError::Io { .. } | CliError::Verify(_) => 2,
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Everything needed to reproduce a command, in one TOML document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    /// Seed of the volume shuffle that assigns splits.
    pub split_seed: u64,
    pub data: SyntheticSpec,
    pub split: SplitSpec,
    pub network: SegNetConfig,
    pub train: TrainConfig,
    pub toy: ToyConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            split_seed: 0,
            data: SyntheticSpec::default(),
            split: SplitSpec::default(),
            network: SegNetConfig::default(),
            train: TrainConfig::default(),
            toy: ToyConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> CliResult<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        if !path.is_file() {
            return Err(CliError::Usage(format!("config file {} does not exist", path.display())));
        }
        Self::from_toml(&fs::read_to_string(path).map_err(io_err(path))?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> CliResult<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(CliError::Config(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        self.data.validate()?;
        self.network.validate()?;
        self.train.validate()?;
        self.toy.validate()?;
        let div = self.network.extent_divisor();
        if self.data.extent % div != 0 {
            return Err(miseg::Error::Config {
                field: "data.extent".into(),
                reason: format!("must be divisible by {div} for network depth {}", self.network.depth),
            }
            .into());
        }
        if self.data.classes != self.network.classes {
            return Err(miseg::Error::Config {
                field: "network.classes".into(),
                reason: format!("must equal data.classes ({})", self.data.classes),
            }
            .into());
        }
        Ok(())
    }

    pub fn write_resolved(&self, dir: &Path) -> CliResult<()> {
        let path = dir.join(RESOLVED_CONFIG);
        fs::write(&path, self.to_toml()).map_err(io_err(&path))
    }

    fn splits(&self) -> CliResult<Splits> {
        let ds = generate_dataset(&self.data)?;
        Ok(split(&ds, &self.split, self.split_seed)?)
    }
}

fn create_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataManifest {
    pub schema_version: u32,
    pub files: Vec<String>,
    pub labeled: usize,
    pub unlabeled: usize,
    pub validation: usize,
    pub volumes: [Vec<usize>; 3],
}

/// Renders the dataset, splits it and writes the split cache plus a manifest.
pub fn cmd_gen_data(cfg: &ExperimentConfig, out: &Path) -> CliResult<DataManifest> {
    cfg.validate()?;
    create_dir(out)?;
    let splits = cfg.splits()?;
    splits.save(out, &cfg.data, &cfg.split, cfg.split_seed)?;
    let manifest = DataManifest {
        schema_version: SCHEMA_VERSION,
        files: ["labeled.msd", "unlabeled.msd", "validation.msd"].map(String::from).to_vec(),
        labeled: splits.labeled.len(),
        unlabeled: splits.unlabeled.len(),
        validation: splits.validation.len(),
        volumes: [
            Splits::volumes_of(&splits.labeled),
            Splits::volumes_of(&splits.unlabeled),
            Splits::volumes_of(&splits.validation),
        ],
    };
    let path = out.join(DATA_MANIFEST);
    fs::write(&path, serde_json::to_string_pretty(&manifest).expect("manifest serializes")).map_err(io_err(&path))?;
    cfg.write_resolved(out)?;
    Ok(manifest)
}

/// Reads a split cache, checking it was rendered from `cfg`'s data settings.
pub fn load_data(cfg: &ExperimentConfig, dir: &Path) -> CliResult<Splits> {
    if !dir.join("labeled.msd").is_file() {
        return Err(CliError::Usage(format!(
            "no dataset cache in {} (run gen-data first or pass --generate)",
            dir.display()
        )));
    }
    let (header, splits) = Splits::load(dir)?;
    if header.spec != cfg.data || header.split_spec != cfg.split || header.seed != cfg.split_seed {
        return Err(CliError::Config(format!(
            "dataset cache in {} was generated from different data/split settings",
            dir.display()
        )));
    }
    Ok(splits)
}

#[derive(Clone, Debug, Default)]
pub struct TrainArgs {
    /// Split cache; rendered in memory from the config when absent and
    /// `generate` is set.
    pub data: Option<PathBuf>,
    pub generate: bool,
    pub resume: bool,
    pub stop_after: Option<usize>,
}

/// Trains the configured method; writes the report, metrics CSV, checkpoints
/// and the resolved config into `out`.
pub fn cmd_train(cfg: &ExperimentConfig, out: &Path, args: &TrainArgs) -> CliResult<TrainReport> {
    cfg.validate()?;
    let splits = match (&args.data, args.generate) {
        (Some(dir), _) => load_data(cfg, dir)?,
        (None, true) => cfg.splits()?,
        (None, false) => return Err(CliError::Usage("pass --data <dir> or --generate".into())),
    };
    create_dir(out)?;
    cfg.write_resolved(out)?;
    let opts = RunOptions {
        out_dir: Some(out.to_path_buf()),
        resume: args.resume,
        stop_after: args.stop_after,
    };
    Ok(train(&cfg.train, &cfg.network, &splits, &opts)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplitName {
    Labeled,
    Unlabeled,
    Validation,
}

impl std::str::FromStr for SplitName {
    type Err = CliError;
    fn from_str(s: &str) -> CliResult<Self> {
        match s {
            "labeled" => Ok(Self::Labeled),
            "unlabeled" => Ok(Self::Unlabeled),
            "validation" => Ok(Self::Validation),
            _ => Err(CliError::Usage(format!("unknown split `{s}`"))),
        }
    }
}

/// Per-volume 3-D Dice of a checkpoint on one cached split, as CSV text:
/// one row per volume, then a `mean` row.
pub fn cmd_eval(checkpoint: &Path, data: &Path, which: SplitName) -> CliResult<String> {
    let (params, net) = load_model(checkpoint)?;
    let (header, splits) = Splits::load(data)?;
    if header.spec.classes != net.classes {
        return Err(miseg::Error::Config {
            field: "network.classes".into(),
            reason: format!("checkpoint has {} classes, dataset has {}", net.classes, header.spec.classes),
        }
        .into());
    }
    let report = match which {
        SplitName::Labeled => evaluate(&params, &net, &splits.labeled, None)?,
        SplitName::Unlabeled => evaluate(&params, &net, &splits.unlabeled, Some(&splits.unlabeled_truth))?,
        SplitName::Validation => evaluate(&params, &net, &splits.validation, None)?,
    };
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut head = vec!["volume".to_string()];
    head.extend((1..net.classes).map(|c| format!("dsc_{c}")));
    head.push("mean_dsc".into());
    let fmt = |v: f64| format!("{v:.6}");
    let csv_err = |e: csv::Error| CliError::Core(miseg::Error::Format(e.to_string()));
    w.write_record(&head).map_err(csv_err)?;
    for v in &report.volumes {
        let mean = v.dice.iter().sum::<f64>() / v.dice.len() as f64;
        let mut row = vec![v.volume.to_string()];
        row.extend(v.dice.iter().map(|&d| fmt(d)));
        row.push(fmt(mean));
        w.write_record(&row).map_err(csv_err)?;
    }
    let mut row = vec!["mean".to_string()];
    row.extend(report.class_mean.iter().map(|&d| fmt(d)));
    row.push(fmt(report.mean));
    w.write_record(&row).map_err(csv_err)?;
    let bytes = w.into_inner().map_err(|e| CliError::Core(miseg::Error::Format(e.to_string())))?;
    Ok(String::from_utf8(bytes).expect("csv is utf-8"))
}

pub fn cmd_toy(cfg: &ToyConfig) -> CliResult<ToyReport> {
    Ok(toy_cluster(cfg)?)
}

/// Runs the property and gradient suite against `mi`; fails if any check
/// does not pass.
pub fn cmd_verify(mi: MiFn) -> CliResult<VerifyReport> {
    let report = run_suite(mi);
    for c in &report.checks {
        log::info!("{} {}: {} ({:.1}s)", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail, c.seconds);
    }
    Ok(report)
}

/// Error for a report with failed checks.
pub fn verify_outcome(report: &VerifyReport) -> CliResult<()> {
    match report.checks.iter().filter(|c| !c.passed).count() {
        0 => Ok(()),
        n => Err(CliError::Verify(n)),
    }
}
