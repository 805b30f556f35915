//! The `aaface` command line.
//!
//! Exit codes: 0 success, 1 invalid input or configuration, 2 numerical
//! failure (divergence, degenerate embeddings, failed gradient checks),
//! 3 file i/o or format errors.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand};

use crate::ablation::{self, Grid, Setup};
use crate::config::{RunConfig, StageSelection};
use crate::datagen::{generate, load_dataset, make_pairs, write_dataset, Dataset};
use crate::error::{Error, Result};
use crate::evaluation::{
    ablation_records, ablation_table, attribute_table, model_attribute_accuracy, verification_records,
    verification_table, verify, TableRow,
};
use crate::gradcheck::{self, Suite};
use crate::network::Network;
use crate::tensor::{DType, Real};
use crate::training::{attribute_columns, checkpoint_name, run_stage, Model, Stage, TrainLog};
use crate::weights::{load_weights, save_weights};

#[derive(Debug, Parser)]
#[command(name = "aaface", version, about = "Attribute-aware attentional fusion for face verification")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one stage or all three, writing checkpoints and the training log
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// fr, sb, joint or all; overrides train.stage
        #[arg(long)]
        stage: Option<String>,
        /// Overrides train.seed
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides output
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Verification and attribute accuracy of a checkpoint on the evaluation split
    Eval {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides eval.pairs
        #[arg(long)]
        pairs: Option<usize>,
        /// baseline or fused; overrides eval.branch
        #[arg(long)]
        branch: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Seed-averaged ablation grid
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        /// fusion, ratio or attrs
        #[arg(long)]
        grid: String,
        #[arg(long, default_value_t = 5)]
        seeds: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference gradient checks
    Gradcheck {
        /// ops, aai or network; all three when omitted
        #[arg(long)]
        module: Option<String>,
        #[arg(long, default_value = "f64")]
        dtype: String,
        #[arg(long, default_value_t = gradcheck::DEFAULT_SEEDS)]
        seeds: usize,
    },
    /// Write the configured synthetic dataset as a dataset directory
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::from_path(p),
        None => Ok(RunConfig::default()),
    }
}

pub fn load_data(cfg: &RunConfig) -> Result<Dataset> {
    match &cfg.data_path {
        Some(dir) => {
            let loaded = load_dataset(dir)?;
            for w in &loaded.warnings {
                eprintln!("warning: {w}");
            }
            Ok(loaded.dataset)
        }
        None => generate(&cfg.data),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Latest checkpoint a stage builds on, with the stages it covers.
fn prerequisite_checkpoint(stage: Stage) -> Option<(Stage, &'static [Stage])> {
    match stage {
        Stage::Fr => None,
        Stage::Sb => Some((Stage::Fr, &[Stage::Fr])),
        Stage::Joint => Some((Stage::Sb, &[Stage::Fr, Stage::Sb])),
    }
}

fn cmd_train<T: Real>(cfg: &RunConfig) -> Result<()> {
    let data = load_data(cfg)?;
    let splits = data.split(cfg.data.eval_fraction);
    let net_cfg = cfg.network_for(&splits.train)?;
    let out = &cfg.output;
    create_dir(out)?;
    write(&out.join("config.resolved"), &cfg.to_text())?;
    let mut model = Model::new(Network::<T>::new(net_cfg, cfg.train.seed)?);
    let stages = cfg.stage.stages();
    if let Some((prev, covered)) = prerequisite_checkpoint(stages[0]) {
        let path = out.join(checkpoint_name(prev));
        if !path.exists() {
            return Err(Error::Staging(format!(
                "stage {} needs {}; run --stage {prev} first",
                stages[0],
                path.display()
            )));
        }
        load_weights(&path, model.net.params_mut())?;
        model.completed.extend(covered.iter().copied());
    }
    let mut log = TrainLog::new(model.net.config().attributes.iter().map(|a| a.name.clone()).collect());
    for stage in stages {
        let started = Instant::now();
        let part = run_stage(stage, &mut model, &splits.train, &cfg.train)?;
        if let Some(last) = part.records.last() {
            eprintln!(
                "stage {stage}: {} epochs, final loss {:.4} ({:.1}s)",
                part.records.len(),
                last.total,
                started.elapsed().as_secs_f64()
            );
        }
        log.extend(part);
        save_weights(&out.join(checkpoint_name(stage)), model.net.params())?;
    }
    let log_name = match cfg.stage {
        StageSelection::All => "train_log.tsv".to_string(),
        StageSelection::One(s) => format!("train_log_{s}.tsv"),
    };
    write(&out.join(log_name), &log.to_text(&cfg.train))?;
    println!("wrote checkpoints and training log to {}", out.display());
    Ok(())
}

fn cmd_eval<T: Real>(cfg: &RunConfig, weights: &Path) -> Result<()> {
    let data = load_data(cfg)?;
    let splits = data.split(cfg.data.eval_fraction);
    let eval = if splits.eval.is_empty() { &splits.train } else { &splits.eval };
    let mut net = Network::<T>::new(cfg.network_for(&splits.train)?, cfg.train.seed)?;
    load_weights(weights, net.params_mut())?;
    let columns = attribute_columns(&net, eval)?;
    let attrs = model_attribute_accuracy(&net, eval, &columns)?;
    let protocol = make_pairs(eval, cfg.eval.pairs, cfg.eval.seed)?;
    let report = verify(&net, eval, &protocol, cfg.eval.branch, &cfg.eval.far_targets)?;
    let rows = [TableRow {
        label: format!("aaface ({})", cfg.eval.branch),
        points: report.points.clone(),
    }];
    println!("Attribute accuracy (%)");
    print!("{}", attribute_table(&attrs));
    println!();
    println!(
        "Verification, {} genuine / {} impostor pairs",
        report.genuine.len(),
        report.impostor.len()
    );
    print!("{}", verification_table(&rows));
    create_dir(&cfg.output)?;
    write(
        &cfg.output.join(format!("eval_{}.tsv", cfg.eval.branch)),
        &verification_records(&rows),
    )?;
    let mut attr_tsv = String::from("attribute\taccuracy\n");
    for (n, a) in attrs.names.iter().zip(&attrs.accuracy) {
        attr_tsv.push_str(&format!("{n}\t{a:e}\n"));
    }
    write(&cfg.output.join("attributes.tsv"), &attr_tsv)?;
    Ok(())
}

fn cmd_ablate<T: Real>(cfg: &RunConfig, grid: Grid, seeds: usize) -> Result<()> {
    let data = load_data(cfg)?;
    let (train, eval, protocol) = ablation::prepare(cfg, &data)?;
    let setup = Setup {
        net: cfg.network_for(&train)?,
        train: cfg.train.clone(),
        train_data: &train,
        eval_data: &eval,
        protocol: &protocol,
        far_targets: &cfg.eval.far_targets,
    };
    let rows = ablation::run_grid::<T>(grid, &setup, seeds)?;
    let table = ablation_table(&rows);
    print!("{table}");
    create_dir(&cfg.output)?;
    write(&cfg.output.join(format!("ablation_{grid}.txt")), &table)?;
    write(&cfg.output.join(format!("ablation_{grid}.tsv")), &ablation_records(&rows))?;
    Ok(())
}

fn cmd_gradcheck(module: Option<&str>, dtype: &str, seeds: usize) -> Result<()> {
    if dtype != "f64" {
        return Err(Error::config(format!(
            "gradient checks run in f64 only, got --dtype {dtype}"
        )));
    }
    if seeds == 0 {
        return Err(Error::config("--seeds must be at least 1"));
    }
    let suites = match module {
        Some(m) => vec![m.parse::<Suite>()?],
        None => Suite::ALL.to_vec(),
    };
    let mut failed = Vec::new();
    for suite in suites {
        let results = gradcheck::run_suite(suite, seeds)?;
        println!("[{suite}] {seeds} seeds, step {:e}, tolerance {:e}", gradcheck::STEP, gradcheck::TOLERANCE);
        print!("{}", gradcheck::report(&results));
        failed.extend(results.into_iter().filter(|r| !r.passed()).map(|r| r.name));
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::Numerical(format!("gradient check failed for: {}", failed.join(", "))))
    }
}

fn cmd_gen_data(cfg: &RunConfig, out: &Path) -> Result<()> {
    if cfg.data_path.is_some() {
        return Err(Error::config("gen-data writes the synthetic generator; remove data.path"));
    }
    let data = generate(&cfg.data)?;
    write_dataset(out, &data)?;
    println!("wrote {} samples to {}", data.len(), out.display());
    Ok(())
}

fn apply_overrides(cfg: &mut RunConfig, pairs: &[(&str, Option<String>)]) -> Result<()> {
    for (key, value) in pairs {
        if let Some(v) = value {
            cfg.set(key, v)?;
        }
    }
    cfg.validate()
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train {
            config,
            stage,
            seed,
            out,
        } => {
            let mut cfg = load_config(config.as_deref())?;
            apply_overrides(
                &mut cfg,
                &[
                    ("train.stage", stage),
                    ("train.seed", seed.map(|s| s.to_string())),
                    ("output", out.map(|p| p.display().to_string())),
                ],
            )?;
            match cfg.dtype {
                DType::F32 => cmd_train::<f32>(&cfg),
                DType::F64 => cmd_train::<f64>(&cfg),
            }
        }
        Command::Eval {
            weights,
            config,
            pairs,
            branch,
            out,
        } => {
            let mut cfg = load_config(config.as_deref())?;
            apply_overrides(
                &mut cfg,
                &[
                    ("eval.pairs", pairs.map(|p| p.to_string())),
                    ("eval.branch", branch),
                    ("output", out.map(|p| p.display().to_string())),
                ],
            )?;
            match cfg.dtype {
                DType::F32 => cmd_eval::<f32>(&cfg, &weights),
                DType::F64 => cmd_eval::<f64>(&cfg, &weights),
            }
        }
        Command::Ablate {
            config,
            grid,
            seeds,
            out,
        } => {
            let mut cfg = load_config(config.as_deref())?;
            apply_overrides(&mut cfg, &[("output", out.map(|p| p.display().to_string()))])?;
            let grid: Grid = grid.parse()?;
            match cfg.dtype {
                DType::F32 => cmd_ablate::<f32>(&cfg, grid, seeds),
                DType::F64 => cmd_ablate::<f64>(&cfg, grid, seeds),
            }
        }
        Command::Gradcheck { module, dtype, seeds } => cmd_gradcheck(module.as_deref(), &dtype, seeds),
        Command::GenData { config, out } => {
            let cfg = load_config(config.as_deref())?;
            cmd_gen_data(&cfg, &out)
        }
    }
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with_args<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
