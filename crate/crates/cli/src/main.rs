use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use lgd_cli::commands::{self, EvalArgs, GenSource, TrainArgs};
use lgd_cli::config::Preset;
use lgd_cli::{CliError, CliResult};
use lgd_core::checks::Scope;
use lgd_core::synth::SyntheticSpec;
use lgd_core::train::Scoring;
use lgd_core::DType;
use serde::Serialize;

#[derive(Parser)]
#[command(name = "lgd", version, about = "Local and global diffusion networks on synthetic video")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Precision {
    Single,
    Double,
}

impl From<Precision> for DType {
    fn from(p: Precision) -> DType {
        match p {
            Precision::Single => DType::Single,
            Precision::Double => DType::Double,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ScopeArg {
    Ops,
    Block,
    Network,
    All,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScoringArg {
    Separate,
    Combined,
}

#[derive(Clone, Copy, ValueEnum)]
enum PresetArg {
    #[value(name = "toy_2d")]
    Toy2d,
    #[value(name = "toy_3d")]
    Toy3d,
    #[value(name = "resnet50_3d")]
    Resnet50_3d,
}

#[derive(Subcommand)]
enum Command {
    /// Train one stage; stage 2 continues from a stage-1 checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u8).range(1..=2))]
        stage: u8,
        /// Checkpoint to continue from (same stage) or to start stage 2 from.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Start stage 2 from a freshly initialized network.
        #[arg(long)]
        from_scratch: bool,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Master seed; TOML integers limit it to 0..=2^63-1.
        #[arg(long, value_parser = clap::value_parser!(u64).range(0..=i64::MAX as u64))]
        seed: Option<u64>,
        /// Storage precision of checkpoints; computation is always double.
        #[arg(long, value_enum, default_value = "double")]
        precision: Precision,
    },
    /// Score a checkpoint on a dataset and write a report.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset file; defaults to the data named in the checkpoint's config.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long, value_enum)]
        scoring: Option<ScoringArg>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Central-difference gradient checks in double precision.
    Gradcheck {
        #[arg(long, value_enum, default_value = "all")]
        scope: ScopeArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Accepted for uniformity; gradient checks always run in double.
        #[arg(long, value_enum)]
        precision: Option<Precision>,
    },
    /// Kernel approximation statistics of the tensor sketch.
    SketchBench {
        #[arg(long, default_value_t = 16)]
        input_dim: usize,
        #[arg(long, value_delimiter = ',', default_value = "64,256,1024")]
        dims: Vec<usize>,
        #[arg(long, default_value_t = 200)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the local path size after every stage.
    Shapes {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum)]
        preset: Option<PresetArg>,
    },
    /// Write synthetic datasets to disk.
    GenData {
        /// Generate the config's train and test sources into the --out directory.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, conflicts_with = "config")]
        videos: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "double")]
        precision: Precision,
    },
}

fn emit<T: Serialize>(value: &T, out: Option<&Path>) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value)?;
    match out {
        Some(p) => {
            std::fs::write(p, format!("{text}\n"))?;
            eprintln!("wrote {}", p.display());
        }
        None => println!("{text}"),
    }
    Ok(())
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Train { config, stage, resume, from_scratch, out, seed, precision } => {
            let args = TrainArgs { config, stage, resume, from_scratch, out, seed, precision: precision.into() };
            let s = commands::cmd_train(&args)?;
            println!("{}", serde_json::to_string_pretty(&s)?);
        }
        Command::Eval { checkpoint, data, samples, scoring, out } => {
            let scoring = scoring.map(|s| match s {
                ScoringArg::Separate => Scoring::Separate,
                ScoringArg::Combined => Scoring::Combined,
            });
            let r = commands::cmd_eval(&EvalArgs { checkpoint, data, samples, scoring })?;
            eprintln!("top-1 {:.4} over {} videos", r.report.top1, r.report.videos);
            emit(&r, out.as_deref())?;
        }
        Command::Gradcheck { scope, seed, out, precision } => {
            if matches!(precision, Some(Precision::Single)) {
                eprintln!("note: gradient checks always run in double precision");
            }
            let scope = match scope {
                ScopeArg::Ops => Some(Scope::Ops),
                ScopeArg::Block => Some(Scope::Block),
                ScopeArg::Network => Some(Scope::Network),
                ScopeArg::All => None,
            };
            let r = commands::cmd_gradcheck(scope, seed)?;
            for e in &r.entries {
                let verdict = if e.passed { "ok" } else { "FAIL" };
                eprintln!("{verdict:<4} {:<8} {:<40} {:.3e} < {:.0e}", format!("{:?}", e.scope), e.target, e.max_rel_err, e.threshold);
            }
            emit(&r, out.as_deref())?;
            if !r.passed {
                return Err(CliError::Numeric("gradient check above threshold".into()));
            }
        }
        Command::SketchBench { input_dim, dims, trials, seed, out } => {
            let r = commands::cmd_sketch_bench(input_dim, &dims, trials, seed)?;
            emit(&r, out.as_deref())?;
            if !r.oracle_pass {
                return Err(CliError::Numeric(format!("sketch oracle differs by {:e}", r.oracle_max_abs_diff)));
            }
        }
        Command::Shapes { config, preset } => {
            let preset = preset.map(|p| match p {
                PresetArg::Toy2d => Preset::Toy2d,
                PresetArg::Toy3d => Preset::Toy3d,
                PresetArg::Resnet50_3d => Preset::Resnet50_3d,
            });
            let spec = commands::network_for_shapes(config.as_deref(), preset)?;
            print!("{}", commands::format_shapes(&commands::cmd_shapes(&spec)?));
        }
        Command::GenData { config, videos, seed, out, precision } => {
            let src = match (config, videos) {
                (Some(c), None) => GenSource::Config(c),
                (None, Some(v)) => GenSource::Synthetic(SyntheticSpec::new(v, seed)),
                _ => return Err(CliError::validation("gen-data needs --config or --videos")),
            };
            for (path, data) in commands::cmd_gen_data(&src, &out, precision.into())? {
                eprintln!("wrote {} ({} videos, classes {:?})", path.display(), data.videos.len(), data.class_counts());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code() as u8)
        }
    }
}
