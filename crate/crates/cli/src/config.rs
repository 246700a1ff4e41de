//! Experiment configuration files.
//!
//! A file names a network preset or a full spec, optional per-stage
//! overrides of the training schedule, data sources and an output
//! directory. Unknown keys are rejected everywhere. `resolve` turns a file
//! into an `Experiment` with every default made explicit; `Experiment::to_file`
//! goes back, so a written snapshot reloads to the same experiment.

use std::path::{Path, PathBuf};

use lgd_core::backbone::InitStrategy;
use lgd_core::seed;
use lgd_core::synth::{Dataset, SyntheticSpec, NUM_CLASSES};
use lgd_core::train::TrainConfig;
use lgd_core::{BlockVariant, NetworkKind, NetworkSpec};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

/// The only configuration schema version understood.
pub const FORMAT: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub format: u32,
    #[serde(default)]
    pub seed: u64,
    pub network: NetworkSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub sketch: SketchSection,
    pub data: DataSection,
    #[serde(default)]
    pub output: OutputSection,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    #[serde(rename = "toy_2d")]
    Toy2d,
    #[serde(rename = "toy_3d")]
    Toy3d,
    #[serde(rename = "resnet50_3d")]
    Resnet50_3d,
}

impl Preset {
    pub fn spec(self, num_classes: usize) -> NetworkSpec {
        match self {
            Preset::Toy2d => NetworkSpec::toy_2d(num_classes),
            Preset::Toy3d => NetworkSpec::toy_3d(num_classes),
            Preset::Resnet50_3d => NetworkSpec::resnet50_3d(num_classes),
        }
    }
}

/// Exactly one of `preset` and `spec`; the remaining keys override it.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<Preset>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spec: Option<NetworkSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kind: Option<NetworkKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub block_variant: Option<BlockVariant>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init: Option<InitStrategy>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub num_classes: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input_shape: Option<[usize; 3]>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    /// 30 + 10 epochs.
    #[default]
    Toy,
    /// 50 epochs per stage.
    Full,
}

impl Schedule {
    pub fn config(self, stage: u8) -> TrainConfig {
        match self {
            Schedule::Toy => TrainConfig::toy(stage),
            Schedule::Full => TrainConfig::full(stage),
        }
    }
}

/// Per-stage tables overlay the schedule's defaults key by key.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    #[serde(default)]
    pub schedule: Schedule,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stage1: Option<toml::Table>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stage2: Option<toml::Table>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SketchSection {
    /// Sketch width; overrides the network's.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dim: Option<usize>,
    /// Table seed; derived from the master seed when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Synthetic(SyntheticSpec),
    File { path: PathBuf },
}

impl DataSource {
    pub fn load(&self) -> CliResult<Dataset> {
        match self {
            DataSource::Synthetic(spec) => Ok(lgd_core::synth::generate(spec)?),
            DataSource::File { path } => Dataset::load(path)
                .map_err(|e| CliError::validation(format!("cannot load dataset {}: {e}", path.display()))),
        }
    }

    fn rebase(&mut self, dir: &Path) {
        if let DataSource::File { path } = self {
            if path.is_relative() {
                *path = dir.join(&*path);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub train: DataSource,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test: Option<DataSource>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    #[serde(default = "d_dir")]
    pub dir: PathBuf,
    /// Checkpoint after every this many epochs; 0 keeps only the final one.
    #[serde(default)]
    pub checkpoint_every: usize,
}

fn d_dir() -> PathBuf {
    PathBuf::from("runs/default")
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection { dir: d_dir(), checkpoint_every: 0 }
    }
}

/// A fully resolved experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct Experiment {
    pub seed: u64,
    pub network: NetworkSpec,
    pub stage1: TrainConfig,
    pub stage2: TrainConfig,
    /// Explicit sketch table seed; derived from `seed` when absent.
    pub sketch_seed: Option<u64>,
    pub data: DataSection,
    pub output: OutputSection,
}

impl Experiment {
    pub fn stage(&self, stage: u8) -> CliResult<&TrainConfig> {
        match stage {
            1 => Ok(&self.stage1),
            2 => Ok(&self.stage2),
            other => Err(CliError::validation(format!("stage must be 1 or 2, got {other}"))),
        }
    }

    pub fn sketch_seed(&self) -> u64 {
        self.sketch_seed.unwrap_or_else(|| seed::derive(self.seed, "sketch"))
    }

    pub fn init_seed(&self) -> u64 {
        seed::derive(self.seed, "init")
    }

    /// Master of the order/sample/augment streams of training.
    pub fn train_seed(&self) -> u64 {
        seed::derive(self.seed, "train")
    }

    /// The explicit file form: full spec, full stage tables, explicit seeds.
    pub fn to_file(&self) -> CliResult<ConfigFile> {
        Ok(ConfigFile {
            format: FORMAT,
            seed: self.seed,
            network: NetworkSection { spec: Some(self.network.clone()), ..Default::default() },
            train: TrainSection {
                schedule: Schedule::Toy,
                stage1: Some(to_table(&self.stage1)?),
                stage2: Some(to_table(&self.stage2)?),
            },
            sketch: SketchSection { dim: None, seed: self.sketch_seed },
            data: self.data.clone(),
            output: self.output.clone(),
        })
    }

    pub fn to_toml(&self) -> CliResult<String> {
        toml::to_string(&self.to_file()?).map_err(|e| CliError::validation(format!("cannot serialize config: {e}")))
    }
}

fn to_table<T: Serialize>(v: &T) -> CliResult<toml::Table> {
    toml::Table::try_from(v).map_err(|e| CliError::validation(format!("cannot serialize config: {e}")))
}

/// Overlays `top` onto `base`, recursing into tables.
fn overlay(base: &mut toml::Table, top: &toml::Table) {
    for (k, v) in top {
        match (base.get_mut(k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(t)) => overlay(b, t),
            _ => {
                base.insert(k.clone(), v.clone());
            }
        }
    }
}

fn stage_config(schedule: Schedule, stage: u8, table: Option<&toml::Table>) -> CliResult<TrainConfig> {
    let mut base = to_table(&schedule.config(stage))?;
    if let Some(t) = table {
        overlay(&mut base, t);
    }
    let cfg: TrainConfig = toml::Value::Table(base)
        .try_into()
        .map_err(|e| CliError::validation(format!("[train.stage{stage}]: {e}")))?;
    if cfg.stage != stage {
        return Err(CliError::validation(format!("[train.stage{stage}] sets stage = {}", cfg.stage)));
    }
    cfg.validate().map_err(|e| CliError::validation(format!("[train.stage{stage}]: {e}")))?;
    Ok(cfg)
}

impl ConfigFile {
    pub fn parse(text: &str) -> CliResult<ConfigFile> {
        // Check the version before the schema so old files get a clear message.
        let raw: toml::Table = text.parse().map_err(|e| CliError::validation(format!("config: {e}")))?;
        match raw.get("format") {
            Some(toml::Value::Integer(v)) if *v == i64::from(FORMAT) => {}
            Some(v) => return Err(CliError::validation(format!("config: unsupported format {v}, expected {FORMAT}"))),
            None => return Err(CliError::validation(format!("config: missing `format = {FORMAT}`"))),
        }
        toml::from_str(text).map_err(|e| CliError::validation(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> CliResult<ConfigFile> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::validation(format!("cannot read config {}: {e}", path.display())))?;
        let mut file = Self::parse(&text)?;
        let dir = path.parent().unwrap_or(Path::new("."));
        file.data.train.rebase(dir);
        if let Some(t) = &mut file.data.test {
            t.rebase(dir);
        }
        Ok(file)
    }

    pub fn resolve(&self) -> CliResult<Experiment> {
        let n = &self.network;
        let mut spec = match (n.preset, &n.spec) {
            (Some(p), None) => p.spec(NUM_CLASSES),
            (None, Some(s)) => s.clone(),
            _ => return Err(CliError::validation("[network] needs exactly one of `preset` and `spec`")),
        };
        if let Some(k) = n.kind {
            spec.kind = k;
        }
        if let Some(v) = n.block_variant {
            spec.block_variant = v;
        }
        if let Some(i) = n.init {
            spec.init = i;
        }
        if let Some(c) = n.num_classes {
            spec.num_classes = c;
        }
        if let Some(s) = n.input_shape {
            spec.input_shape = s;
        }
        if let Some(d) = self.sketch.dim {
            spec.sketch_dim = Some(d);
        }
        spec.validate()?;
        let stage1 = stage_config(self.train.schedule, 1, self.train.stage1.as_ref())?;
        let stage2 = stage_config(self.train.schedule, 2, self.train.stage2.as_ref())?;
        for src in std::iter::once(&self.data.train).chain(&self.data.test) {
            if let DataSource::Synthetic(s) = src {
                s.validate()?;
            }
        }
        Ok(Experiment {
            seed: self.seed,
            network: spec,
            stage1,
            stage2,
            sketch_seed: self.sketch.seed,
            data: self.data.clone(),
            output: self.output.clone(),
        })
    }
}

/// Reads and resolves a config, applying command-line overrides first.
pub fn load_experiment(path: &Path, seed: Option<u64>, out: Option<&Path>) -> CliResult<Experiment> {
    let mut file = ConfigFile::load(path)?;
    if let Some(s) = seed {
        file.seed = s;
    }
    if let Some(o) = out {
        file.output.dir = o.to_path_buf();
    }
    file.resolve()
}
