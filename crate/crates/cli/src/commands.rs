//! Subcommand implementations. Each returns its report and leaves printing
//! and exit codes to the binary.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use lgd_core::backbone::{shape_schedule, LayerShape};
use lgd_core::checks::{self, Scope, SketchBenchReport, SuiteEntry};
use lgd_core::synth::{Dataset, SyntheticSpec};
use lgd_core::train::{self, default_samples, evaluate, EvalReport, Scoring, Sgd};
use lgd_core::{DType, Network, NetworkSpec};
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::{load_experiment, DataSource, Experiment, Preset};
use crate::error::{CliError, CliResult};

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const TIMINGS_FILE: &str = "timings.jsonl";
pub const CONFIG_SNAPSHOT: &str = "config.toml";
pub const FAILURE_FILE: &str = "failure.json";

pub fn checkpoint_dir(out: &Path) -> PathBuf {
    out.join("checkpoints")
}

pub fn final_checkpoint(out: &Path, stage: u8) -> PathBuf {
    checkpoint_dir(out).join(format!("stage{stage}_final.ckpt"))
}

pub fn epoch_checkpoint(out: &Path, stage: u8, epoch: usize) -> PathBuf {
    checkpoint_dir(out).join(format!("stage{stage}_epoch{epoch:03}.ckpt"))
}

#[derive(Debug, Clone)]
pub struct TrainArgs {
    pub config: PathBuf,
    pub stage: u8,
    pub resume: Option<PathBuf>,
    pub from_scratch: bool,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub precision: DType,
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainSummary {
    pub stage: u8,
    pub first_epoch: usize,
    pub epochs: usize,
    pub final_loss: Option<f64>,
    pub final_test_top1: Option<f64>,
    pub checkpoint: PathBuf,
}

/// One line of the timings file; kept apart from the byte-stable metrics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TimingRecord {
    pub stage: u8,
    pub epoch: usize,
    pub wall_time_s: f64,
}

#[derive(Serialize)]
struct FailureRecord<'a> {
    stage: u8,
    error: &'a str,
}

/// Keeps the records of other stages and of epochs before `first`.
fn keep_lines(path: &Path, stage: u8, first: usize) -> CliResult<Vec<String>> {
    #[derive(Deserialize)]
    struct Key {
        stage: u8,
        epoch: usize,
    }
    if !path.exists() {
        return Ok(Vec::new());
    }
    let mut keep = Vec::new();
    for line in BufReader::new(File::open(path)?).lines() {
        let line = line?;
        let key: Key = serde_json::from_str(&line)
            .map_err(|e| CliError::validation(format!("{}: unreadable record: {e}", path.display())))?;
        if key.stage != stage || key.epoch < first {
            keep.push(line);
        }
    }
    Ok(keep)
}

fn rewrite(path: &Path, lines: &[String]) -> CliResult<File> {
    let mut f = File::create(path)?;
    for l in lines {
        writeln!(f, "{l}")?;
    }
    f.flush()?;
    Ok(OpenOptions::new().append(true).open(path)?)
}

fn start_state(exp: &Experiment, args: &TrainArgs, out: &Path) -> CliResult<(Network, Sgd, usize)> {
    let cfg = exp.stage(args.stage)?;
    let fresh_opt = || Sgd::new(cfg.momentum, cfg.weight_decay);
    let resume = match (&args.resume, args.stage) {
        (Some(p), _) => Some(p.clone()),
        (None, 2) if !args.from_scratch => {
            let p = final_checkpoint(out, 1);
            if !p.exists() {
                return Err(CliError::validation(format!(
                    "stage 2 starts from a stage-1 checkpoint, and none was found at {}; \
                     pass --resume <stage-1 checkpoint> or --from-scratch",
                    p.display()
                )));
            }
            Some(p)
        }
        _ => None,
    };
    let Some(path) = resume else {
        return Ok((Network::build(&exp.network, exp.init_seed(), exp.sketch_seed())?, fresh_opt(), 0));
    };
    let ckpt = Checkpoint::load(&path)?;
    if ckpt.config.network != exp.network {
        return Err(CliError::validation(format!("{} was trained with a different network spec", path.display())));
    }
    let net = ckpt.network()?;
    match (ckpt.stage, args.stage) {
        (s, t) if s == t => {
            if ckpt.epoch >= cfg.epochs {
                return Err(CliError::validation(format!(
                    "{} already completed {} of {} epochs",
                    path.display(),
                    ckpt.epoch,
                    cfg.epochs
                )));
            }
            Ok((net, ckpt.optimizer()?, ckpt.epoch))
        }
        (1, 2) => Ok((net, fresh_opt(), 0)),
        (s, t) => Err(CliError::validation(format!("cannot run stage {t} from a stage-{s} checkpoint"))),
    }
}

pub fn cmd_train(args: &TrainArgs) -> CliResult<TrainSummary> {
    let exp = load_experiment(&args.config, args.seed, args.out.as_deref())?;
    let cfg = exp.stage(args.stage)?.clone();
    let out = exp.output.dir.clone();
    fs::create_dir_all(checkpoint_dir(&out))?;
    let train_data = exp.data.train.load()?;
    let test_data = exp.data.test.as_ref().map(DataSource::load).transpose()?;
    let (mut net, mut opt, first) = start_state(&exp, args, &out)?;
    if out.join(FAILURE_FILE).exists() {
        fs::remove_file(out.join(FAILURE_FILE))?;
    }
    fs::write(out.join(CONFIG_SNAPSHOT), exp.to_toml()?)?;

    let metrics_path = out.join(METRICS_FILE);
    let timings_path = out.join(TIMINGS_FILE);
    let mut metrics = rewrite(&metrics_path, &keep_lines(&metrics_path, args.stage, first)?)?;
    let mut timings = rewrite(&timings_path, &keep_lines(&timings_path, args.stage, first)?)?;

    let stage = args.stage;
    let every = exp.output.checkpoint_every;
    let result = train::train(&mut net, &mut opt, &train_data, test_data.as_ref(), &cfg, first, exp.train_seed(), |n, o, m| {
        let line = serde_json::to_string(m).map_err(|e| lgd_core::Error::Io(e.to_string()))?;
        let io = |e: std::io::Error| lgd_core::Error::Io(e.to_string());
        writeln!(metrics, "{line}").and_then(|_| metrics.flush()).map_err(io)?;
        let t = TimingRecord { stage, epoch: m.epoch, wall_time_s: m.wall_time_s };
        let tl = serde_json::to_string(&t).map_err(|e| lgd_core::Error::Io(e.to_string()))?;
        writeln!(timings, "{tl}").and_then(|_| timings.flush()).map_err(io)?;
        let done = m.epoch + 1;
        if every > 0 && done % every == 0 {
            Checkpoint::capture(&exp, stage, done, n, Some(o))
                .save(&epoch_checkpoint(&out, stage, done), args.precision)
                .map_err(|e| lgd_core::Error::Io(e.to_string()))?;
        }
        Ok(())
    });
    let records = match result {
        Ok(r) => r,
        Err(e) => {
            let err = CliError::from(e);
            let msg = err.to_string();
            fs::write(out.join(FAILURE_FILE), serde_json::to_string_pretty(&FailureRecord { stage, error: &msg })?)?;
            return Err(err);
        }
    };
    let path = final_checkpoint(&out, stage);
    Checkpoint::capture(&exp, stage, cfg.epochs, &net, Some(&opt)).save(&path, args.precision)?;
    let last = records.last();
    Ok(TrainSummary {
        stage,
        first_epoch: first,
        epochs: cfg.epochs,
        final_loss: last.map(|m| m.stage_loss()),
        final_test_top1: last.and_then(|m| m.test_top1),
        checkpoint: path,
    })
}

#[derive(Debug, Clone)]
pub struct EvalArgs {
    pub checkpoint: PathBuf,
    /// Dataset file; defaults to the checkpoint's test source, then its train source.
    pub data: Option<PathBuf>,
    pub samples: Option<usize>,
    pub scoring: Option<Scoring>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOutput {
    pub stage: u8,
    pub epoch: usize,
    pub scoring: Scoring,
    pub report: EvalReport,
}

pub fn cmd_eval(args: &EvalArgs) -> CliResult<EvalOutput> {
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let net = ckpt.network()?;
    let data = match &args.data {
        Some(p) => DataSource::File { path: p.clone() }.load()?,
        None => ckpt.config.data.test.as_ref().unwrap_or(&ckpt.config.data.train).load()?,
    };
    let cfg = ckpt.config.stage(ckpt.stage)?;
    let n = args.samples.or(cfg.infer_samples).unwrap_or_else(|| default_samples(net.spec.kind));
    if n == 0 {
        return Err(CliError::validation("--samples must be positive"));
    }
    let scoring = args.scoring.unwrap_or_else(|| Scoring::for_stage(ckpt.stage));
    let report = evaluate(&net, &data, n, scoring, cfg.encoding, cfg.power_norm)?;
    Ok(EvalOutput { stage: ckpt.stage, epoch: ckpt.epoch, scoring, report })
}

#[derive(Debug, Clone, Serialize)]
pub struct GradcheckOutput {
    pub seed: u64,
    pub passed: bool,
    pub entries: Vec<SuiteEntry>,
}

/// Runs the requested scopes (all when `None`) in double precision.
pub fn cmd_gradcheck(scope: Option<Scope>, seed: u64) -> CliResult<GradcheckOutput> {
    let scopes = match scope {
        Some(s) => vec![s],
        None => vec![Scope::Ops, Scope::Block, Scope::Network],
    };
    let mut entries = Vec::new();
    for s in scopes {
        entries.extend(checks::run_scope(s, seed)?);
    }
    Ok(GradcheckOutput { seed, passed: entries.iter().all(|e| e.passed), entries })
}

pub fn cmd_sketch_bench(input_dim: usize, dims: &[usize], trials: usize, seed: u64) -> CliResult<SketchBenchReport> {
    if dims.is_empty() {
        return Err(CliError::validation("--dims needs at least one sketch width"));
    }
    Ok(checks::sketch_bench(input_dim, dims, trials, seed)?)
}

pub fn network_for_shapes(config: Option<&Path>, preset: Option<Preset>) -> CliResult<NetworkSpec> {
    match (config, preset) {
        (Some(c), None) => Ok(load_experiment(c, None, None)?.network),
        (None, Some(p)) => Ok(p.spec(lgd_core::synth::NUM_CLASSES)),
        _ => Err(CliError::validation("shapes needs exactly one of --config and --preset")),
    }
}

pub fn cmd_shapes(spec: &NetworkSpec) -> CliResult<Vec<LayerShape>> {
    Ok(shape_schedule(spec)?)
}

/// One row per layer: layer, operation, channels and the `T×H×W` local path size.
pub fn format_shapes(rows: &[LayerShape]) -> String {
    let mut s = format!("{:<8} {:<44} {:>8}  {}\n", "layer", "operation", "channels", "local path");
    for r in rows {
        let [t, h, w] = r.shape;
        s.push_str(&format!("{:<8} {:<44} {:>8}  {t}×{h}×{w}\n", r.layer, r.operation, r.channels));
    }
    s
}

#[derive(Debug, Clone)]
pub enum GenSource {
    Config(PathBuf),
    Synthetic(SyntheticSpec),
}

/// Writes datasets: `train.lgdv` and, when configured, `test.lgdv` for a
/// config; a single file for a synthetic spec.
pub fn cmd_gen_data(src: &GenSource, out: &Path, dtype: DType) -> CliResult<Vec<(PathBuf, Dataset)>> {
    let jobs: Vec<(PathBuf, DataSource)> = match src {
        GenSource::Config(c) => {
            let exp = load_experiment(c, None, None)?;
            fs::create_dir_all(out)?;
            let mut jobs = vec![(out.join("train.lgdv"), exp.data.train)];
            jobs.extend(exp.data.test.map(|t| (out.join("test.lgdv"), t)));
            jobs
        }
        GenSource::Synthetic(spec) => {
            if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
                fs::create_dir_all(parent)?;
            }
            vec![(out.to_path_buf(), DataSource::Synthetic(spec.clone()))]
        }
    };
    jobs.into_iter()
        .map(|(path, src)| {
            let data = src.load()?;
            data.save(&path, dtype)?;
            Ok((path, data))
        })
        .collect()
}
