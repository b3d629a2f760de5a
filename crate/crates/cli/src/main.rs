use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use gaitlab::dataset::DatasetIndex;
use gaitlab::evaluation::{evaluate, load_embedder, EvalOptions, SubsetFilter};
use gaitlab::gradcheck::{gradcheck, GradcheckConfig};
use gaitlab::synthetic::generate_dataset;
use gaitlab::training::{train, ModelSpec, TrainingPool};
use gaitlab::GaitError;

mod config;

use config::RunConfig;

/// Seed used when no `--seed` flag is given.
const SEED_ENV: &str = "GAITLAB_SEED";
/// Names a parameter group whose analytic gradient gets corrupted (test fixture).
const CORRUPT_ENV: &str = "GAITLAB_GRADCHECK_CORRUPT";

#[derive(Parser)]
#[command(name = "gaitlab", version, about = "LiDAR gait recognition toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic LiDAR gait dataset.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        subjects: u32,
        #[arg(long)]
        seqs: u32,
        #[arg(long)]
        frames: usize,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a model; resumes when the output directory holds a checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Gallery/probe evaluation on the test subjects.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Frames per sequence for the headline metrics (all when omitted).
        #[arg(long)]
        frames: Option<usize>,
        /// all, cross-view or night.
        #[arg(long, default_value = "all")]
        subset: String,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Finite-difference check of the end-to-end gradient.
    Gradcheck {
        #[arg(long)]
        seed: Option<u64>,
    },
}

enum Failure {
    Check(String),
    Usage(String),
}

impl From<GaitError> for Failure {
    fn from(e: GaitError) -> Self {
        match e {
            GaitError::NonFiniteLoss { .. }
            | GaitError::Shape(_)
            | GaitError::EmptySubject
            | GaitError::EmptySequence
            | GaitError::OutOfRange { .. }
            | GaitError::RejectedInput(_) => Failure::Check(e.to_string()),
            _ => Failure::Usage(e.to_string()),
        }
    }
}

fn resolve_seed(flag: Option<u64>) -> Result<u64, Failure> {
    if let Some(s) = flag {
        return Ok(s);
    }
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| Failure::Usage(format!("{SEED_ENV}={v} is not an unsigned integer"))),
        Err(_) => Ok(0),
    }
}

fn cmd_gen_data(out: &Path, subjects: u32, seqs: u32, frames: usize, seed: Option<u64>) -> Result<(), Failure> {
    if subjects == 0 || seqs == 0 || frames == 0 {
        return Err(Failure::Usage("--subjects, --seqs and --frames must be >= 1".into()));
    }
    let seed = resolve_seed(seed)?;
    let index = generate_dataset(subjects, seqs, frames, out, seed)?;
    let n: usize = index.subjects.iter().map(|s| s.sequences.len()).sum();
    println!("wrote {n} sequences for {subjects} subjects to {}", out.display());
    Ok(())
}

fn cmd_train(config: &Path, data: Option<&Path>, out: Option<&Path>) -> Result<(), Failure> {
    let run = RunConfig::load(config)?;
    let data = data
        .map(Path::to_path_buf)
        .or(run.data.root.clone())
        .ok_or_else(|| Failure::Usage("no dataset given (--data or [data].root)".into()))?;
    let out = out
        .map(Path::to_path_buf)
        .or(run.data.out.clone())
        .ok_or_else(|| Failure::Usage("no output directory given (--out or [data].out)".into()))?;
    let index = DatasetIndex::load(&data)?;
    let mut subjects = run.data.train_subjects.clone().unwrap_or_else(|| index.train.clone());
    subjects.sort_unstable();
    subjects.dedup();
    let spec = ModelSpec {
        net: run.model.net(subjects.len()),
        intrinsics: run.sensor,
        class_subjects: subjects.clone(),
    };
    let pool = TrainingPool::<f32>::load(
        &index,
        &subjects,
        run.train.train_sequences.as_deref(),
        &spec.preprocess(),
    )?;
    std::fs::create_dir_all(&out).map_err(|e| GaitError::io(&out, e))?;
    let copy = out.join("config.toml");
    std::fs::write(&copy, run.to_toml()).map_err(|e| GaitError::io(&copy, e))?;
    let state = train(&run.train, spec, &pool, &out)?;
    match state.history.last() {
        Some(rec) => println!("{}", rec.log_line()),
        None => println!("nothing to do: already at iteration {}", state.iteration),
    }
    Ok(())
}

fn cmd_eval(
    ckpt: &Path,
    data: &Path,
    seed: Option<u64>,
    frames: Option<usize>,
    subset: &str,
    report: Option<&Path>,
) -> Result<(), Failure> {
    let subset: SubsetFilter = subset.parse()?;
    if frames == Some(0) {
        return Err(Failure::Usage("--frames must be >= 1".into()));
    }
    let seed = resolve_seed(seed)?;
    let index = DatasetIndex::load(data)?;
    let model = load_embedder(ckpt)?;
    let opts = EvalOptions {
        frames,
        subset,
        checkpoint_id: ckpt.display().to_string(),
        ..EvalOptions::test_split(&index, seed)
    };
    let metrics = evaluate(model.as_ref(), &index, &opts)?;
    if let Some(path) = report {
        metrics.write(path)?;
    }
    println!("{}", metrics.summary_line());
    Ok(())
}

fn cmd_gradcheck(seed: Option<u64>) -> Result<(), Failure> {
    let cfg = GradcheckConfig {
        seed: resolve_seed(seed)?,
        corrupt_group: std::env::var(CORRUPT_ENV).ok(),
        ..GradcheckConfig::default()
    };
    let report = gradcheck(&cfg)?;
    for line in report.lines() {
        println!("{line}");
    }
    if report.passed() {
        println!("gradcheck passed (tolerance {:.0e})", report.tolerance);
        Ok(())
    } else {
        Err(Failure::Check(format!("gradcheck failed (tolerance {:.0e})", report.tolerance)))
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::GenData {
            out,
            subjects,
            seqs,
            frames,
            seed,
        } => cmd_gen_data(out, *subjects, *seqs, *frames, *seed),
        Command::Train { config, data, out } => cmd_train(config, data.as_deref(), out.as_deref()),
        Command::Eval {
            ckpt,
            data,
            seed,
            frames,
            subset,
            report,
        } => cmd_eval(ckpt, data, *seed, *frames, subset, report.as_deref()),
        Command::Gradcheck { seed } => cmd_gradcheck(*seed),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Check(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
