//! The `mosa` command line front end.
//!
//! Every subcommand is a thin wrapper over the library. Results go to stdout
//! as CSV with a header line, diagnostics to stderr, and failures map to the
//! exit codes of [`MosaError::exit_code`].

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::{error, info};

use crate::data::{gen_synthetic, parse_override, Dataset, RunConfig, RunState, SyntheticSpec};
use crate::error::{MosaError, Result};
use crate::merge::{count_params_for_config, dump_features, evaluate, merge_experts, InferenceMode, EVAL_HEADER};
use crate::training::{metrics_csv, train};

/// Environment variable supplying a seed when `--seed` is absent.
pub const SEED_ENV: &str = "MOSA_SEED";

#[derive(Debug, Parser)]
#[command(name = "mosa", version, about = "Mixture of sparse adapters: train, evaluate, merge and ablate")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train adapters from a config; writes final.mosa-ckpt, metrics.csv, resolved-config.txt.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset; prints one CSV row.
    Eval(EvalArgs),
    /// Merge a checkpoint's experts into one dense adapter.
    Merge(MergeArgs),
    /// Print the trainable parameter count of a config.
    Params(ParamsArgs),
    /// Train and evaluate every cell of a cartesian sweep.
    Ablate(AblateArgs),
    /// Generate a synthetic train/val dataset pair.
    GenData(GenDataArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// `key=value` pairs applied on top of the config file.
    #[arg(long = "override", num_args = 1.., value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_parser = ["fixed", "stochastic", "ensemble", "merge"])]
    pub mode: String,
    #[arg(long, default_value_t = 0)]
    pub fixed_index: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value_t = 128)]
    pub batch_size: usize,
    /// Also write pooled features as CSV (`label,f0,..`).
    #[arg(long)]
    pub dump_features: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct MergeArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ParamsArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long = "override", num_args = 1.., value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// `key=v1,v2,...`; repeat for a cartesian product.
    #[arg(long, required = true, value_name = "KEY=V1,V2,...")]
    pub sweep: Vec<String>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Cells trained concurrently.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// Output directory; receives train.mosa-data and val.mosa-data.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub classes: usize,
    #[arg(long, default_value_t = 200)]
    pub per_class: usize,
    #[arg(long, default_value_t = 50)]
    pub val_per_class: usize,
    #[arg(long, default_value_t = 16)]
    pub image_size: usize,
    #[arg(long, default_value_t = 3)]
    pub channels: usize,
    #[arg(long, default_value_t = 1.5)]
    pub difficulty: f64,
    #[arg(long)]
    pub seed: Option<u64>,
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            error!("{e}");
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(cmd: Command) -> Result<()> {
    match cmd {
        Command::Train(a) => cmd_train(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Merge(a) => cmd_merge(&a),
        Command::Params(a) => cmd_params(&a),
        Command::Ablate(a) => cmd_ablate(&a),
        Command::GenData(a) => cmd_gen_data(&a),
    }
}

fn env_seed() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| MosaError::Config(format!("{SEED_ENV}='{v}' is not an unsigned integer"))),
        Err(_) => Ok(None),
    }
}

/// `--seed`, else `MOSA_SEED`, else `None`.
fn resolve_seed(flag: Option<u64>) -> Result<Option<u64>> {
    match flag {
        Some(s) => Ok(Some(s)),
        None => env_seed(),
    }
}

fn load_config(path: &Path, overrides: &[String], seed: Option<u64>) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(path)?;
    let mut pairs = overrides.iter().map(|o| parse_override(o)).collect::<Result<Vec<_>>>()?;
    if let Some(s) = seed {
        pairs.push(("seed".into(), s.to_string()));
    }
    if !pairs.is_empty() {
        cfg = cfg.with_overrides(&pairs)?;
    }
    Ok(cfg)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| MosaError::io(dir, e))
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| MosaError::io(path, e))
}

fn load_data(cfg: &RunConfig) -> Result<(Dataset, Option<Dataset>)> {
    let train_path = cfg
        .train_data
        .as_ref()
        .ok_or_else(|| MosaError::Config("train_data is not set".into()))?;
    let train = Dataset::load(train_path)?;
    let val = cfg.val_data.as_ref().map(Dataset::load).transpose()?;
    Ok((train, val))
}

/// Trains one run and returns its final state.
fn train_run(cfg: &RunConfig, out: &Path) -> Result<RunState> {
    let (train_set, val_set) = load_data(cfg)?;
    let mut state = RunState::initialize(cfg)?;
    if cfg.adapter.method.is_mixture() && cfg.adapter.num_experts == 1 && cfg.plan.alpha == 0.0 && cfg.plan.beta == 0.0 {
        info!("num_experts=1, alpha=0, beta=0: degenerate configuration, training as a standard adapter");
    }
    let outcome = train(&mut state.model, &mut state.adapters, &train_set, val_set.as_ref(), &cfg.plan)?;
    state.optimizer = Some(outcome.optimizer.clone());
    create_dir(out)?;
    state.save(out.join("final.mosa-ckpt"))?;
    write(&out.join("metrics.csv"), &metrics_csv(&outcome))?;
    write(&out.join("resolved-config.txt"), &cfg.to_text())?;
    Ok(state)
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    let mut cfg = load_config(&a.config, &a.overrides, resolve_seed(a.seed)?)?;
    cfg.out_dir = Some(a.out.clone());
    train_run(&cfg, &a.out)?;
    info!("wrote {}", a.out.join("final.mosa-ckpt").display());
    Ok(())
}

fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let state = RunState::load(&a.ckpt)?;
    let data = Dataset::load(&a.data)?;
    let seed = resolve_seed(a.seed)?.unwrap_or(state.config.plan.seed);
    let mode = InferenceMode::parse(&a.mode, a.fixed_index, seed)?;
    let report = evaluate(&state.model, &state.adapters, &data, mode, a.batch_size)?;
    if let Some(p) = &a.dump_features {
        dump_features(&state.model, &state.adapters, &data, p, a.batch_size)?;
    }
    println!("{EVAL_HEADER}");
    println!("{}", report.csv_row());
    Ok(())
}

fn cmd_merge(a: &MergeArgs) -> Result<()> {
    let mut state = RunState::load(&a.ckpt)?;
    state.adapters = merge_experts(&state.adapters)?;
    state.optimizer = None;
    state.save(&a.out)?;
    info!("wrote merged checkpoint {}", a.out.display());
    Ok(())
}

fn cmd_params(a: &ParamsArgs) -> Result<()> {
    let cfg = load_config(&a.config, &a.overrides, None)?;
    let n = count_params_for_config(&cfg.backbone, &cfg.adapter)?;
    println!("method,num_experts,bottleneck_dim,params_excl_head");
    println!("{},{},{},{n}", cfg.adapter.method, cfg.adapter.experts(), cfg.adapter.bottleneck_dim);
    Ok(())
}

/// Parses `key=v1,v2,...`.
pub fn parse_sweep(s: &str) -> Result<(String, Vec<String>)> {
    let (k, vs) = parse_override(s)?;
    let values: Vec<String> = vs.split(',').map(|v| v.trim().to_string()).filter(|v| !v.is_empty()).collect();
    if values.is_empty() {
        return Err(MosaError::Config(format!("sweep '{s}' lists no values")));
    }
    Ok((k, values))
}

/// Cartesian product of the sweeps, first sweep varying slowest.
pub fn sweep_cells(sweeps: &[(String, Vec<String>)]) -> Vec<Vec<(String, String)>> {
    let mut cells = vec![vec![]];
    for (k, values) in sweeps {
        cells = cells
            .into_iter()
            .flat_map(|cell: Vec<(String, String)>| {
                values.iter().map(move |v| {
                    let mut c = cell.clone();
                    c.push((k.clone(), v.clone()));
                    c
                })
            })
            .collect();
    }
    cells
}

fn run_cell(base: &RunConfig, cell: &[(String, String)], dir: &Path) -> Result<(f64, usize)> {
    let cfg = base.with_overrides(cell)?;
    let state = train_run(&cfg, dir)?;
    let eval_path = cfg.val_data.as_ref().or(cfg.train_data.as_ref()).expect("train_data checked by train_run");
    let data = Dataset::load(eval_path)?;
    let r = evaluate(&state.model, &state.adapters, &data, cfg.eval_mode, cfg.plan.eval_batch_size)?;
    Ok((r.top1, r.params_excl_head))
}

fn cmd_ablate(a: &AblateArgs) -> Result<()> {
    let base = load_config(&a.config, &[], resolve_seed(a.seed)?)?;
    let sweeps = a.sweep.iter().map(|s| parse_sweep(s)).collect::<Result<Vec<_>>>()?;
    let cells = sweep_cells(&sweeps);
    for cell in &cells {
        base.with_overrides(cell)?;
    }
    create_dir(&a.out)?;
    let dir = |i: usize| a.out.join(format!("cell-{i:03}"));
    let jobs = a.jobs.max(1);
    let mut results: Vec<Option<Result<(f64, usize)>>> = (0..cells.len()).map(|_| None).collect();
    if jobs == 1 {
        for (i, cell) in cells.iter().enumerate() {
            info!("ablation cell {}/{}: {cell:?}", i + 1, cells.len());
            results[i] = Some(run_cell(&base, cell, &dir(i)));
        }
    } else {
        let next = std::sync::atomic::AtomicUsize::new(0);
        let slots: Vec<std::sync::Mutex<Option<Result<(f64, usize)>>>> =
            (0..cells.len()).map(|_| std::sync::Mutex::new(None)).collect();
        std::thread::scope(|s| {
            for _ in 0..jobs.min(cells.len()) {
                s.spawn(|| loop {
                    let i = next.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                    if i >= cells.len() {
                        break;
                    }
                    let r = run_cell(&base, &cells[i], &dir(i));
                    *slots[i].lock().expect("cell slot") = Some(r);
                });
            }
        });
        for (i, slot) in slots.into_iter().enumerate() {
            results[i] = slot.into_inner().expect("cell slot");
        }
    }
    let mut csv = String::new();
    for (k, _) in &sweeps {
        csv.push_str(k);
        csv.push(',');
    }
    csv.push_str("top1,params\n");
    for (cell, r) in cells.iter().zip(results) {
        let (top1, params) = r.expect("every cell ran")?;
        for (_, v) in cell {
            csv.push_str(v);
            csv.push(',');
        }
        csv.push_str(&format!("{top1:.6},{params}\n"));
    }
    write(&a.out.join("ablation.csv"), &csv)?;
    print!("{csv}");
    Ok(())
}

fn cmd_gen_data(a: &GenDataArgs) -> Result<()> {
    let spec = SyntheticSpec {
        num_classes: a.classes,
        train_per_class: a.per_class,
        val_per_class: a.val_per_class,
        image_size: a.image_size,
        channels: a.channels,
        difficulty: a.difficulty,
        seed: resolve_seed(a.seed)?.unwrap_or(0),
    };
    let (train_set, val_set) = gen_synthetic(&spec)?;
    create_dir(&a.out)?;
    train_set.save(a.out.join("train.mosa-data"))?;
    val_set.save(a.out.join("val.mosa-data"))?;
    println!("split,samples,path");
    println!("train,{},{}", train_set.len(), a.out.join("train.mosa-data").display());
    println!("val,{},{}", val_set.len(), a.out.join("val.mosa-data").display());
    Ok(())
}
