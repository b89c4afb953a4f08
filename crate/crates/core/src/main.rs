use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use moiie_core::analysis::{export_report, group_ablation_table, pathway_stats, run_sweep, sweep_configs, Sweep};
use moiie_core::autodiff::{DType, Float};
use moiie_core::data::{make_dataset, Dataset, TaskSizes};
use moiie_core::nn::checkpoint::checkpoint_dtype;
use moiie_core::nn::{load_model, save_model, Model};
use moiie_core::train::{derive_seed, evaluate, run_stage2_from, train_stage1, PhaseIo, TrainingConfig};
use moiie_core::{Error, Result};

const EVAL_BATCH: usize = 64;

#[derive(Parser)]
#[command(name = "moiie", version, about = "Modality-partitioned MoE toy: data, training, evaluation and analysis")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Stage {
    #[value(name = "1")]
    One,
    #[value(name = "2")]
    Two,
    /// Stage 1 followed by stage 2 in one run directory.
    All,
}

#[derive(Subcommand)]
enum Command {
    /// Write train.jsonl and eval.jsonl for the synthetic task mix.
    GenData {
        #[arg(long, env = "MOIIE_OUT_DIR")]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Training examples per task: cross_modal,text_only,image_only.
        #[arg(long, default_value = "4000,3000,3000")]
        sizes: TaskSizes,
        #[arg(long, default_value = "800,600,600")]
        eval_sizes: TaskSizes,
    },
    /// Train one stage (or both) of the pipeline.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum)]
        stage: Stage,
        #[arg(long)]
        variant: Option<String>,
        #[arg(long, env = "MOIIE_OUT_DIR")]
        out: PathBuf,
        /// Dense stage-1 checkpoint; required for `--stage 2`.
        #[arg(long, required_if_eq("stage", "2"))]
        stage1_ckpt: Option<PathBuf>,
        /// Directory with train.jsonl and eval.jsonl (generated from the config otherwise).
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Print per-task accuracy of a checkpoint on DIR/eval.jsonl.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Also print accuracies with routing forced to each expert group.
        #[arg(long)]
        groups: bool,
    },
    /// Write the routing-pathway trace CSV of a checkpoint on DIR/eval.jsonl.
    RouteStats {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run an ablation grid and write a consolidated report.
    Ablate {
        #[arg(long)]
        sweep: Sweep,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, env = "MOIIE_OUT_DIR")]
        out: PathBuf,
        /// Run grid points concurrently.
        #[arg(long)]
        parallel: bool,
        #[arg(long, env = "MOIIE_WORKERS", default_value_t = 2)]
        workers: usize,
    },
    /// Print the report of a finished run directory.
    Report {
        #[arg(long)]
        run: PathBuf,
    },
}

fn load_config(path: Option<&Path>) -> Result<TrainingConfig> {
    match path {
        Some(p) => TrainingConfig::load(p),
        None => Ok(TrainingConfig::default()),
    }
}

fn read_data(dir: &Path, file: &str) -> Result<Dataset> {
    Dataset::read_jsonl(&dir.join(file))
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::Io { path: parent.into(), source: e })?;
    }
    fs::write(path, text).map_err(|e| Error::Io { path: path.into(), source: e })
}

fn train<T: Float>(cfg: &TrainingConfig, stage: Stage, out: &Path, stage1_ckpt: Option<&Path>, data: Option<&Path>) -> Result<()> {
    let (train, eval) = match data {
        Some(d) => (read_data(d, "train.jsonl")?, read_data(d, "eval.jsonl")?),
        None => moiie_core::train::run_datasets(cfg)?,
    };
    let dir = out.join(cfg.run_name());
    write(&dir.join("config.txt"), &cfg.render())?;
    let stage1 = match (stage, stage1_ckpt) {
        (Stage::Two, Some(p)) => {
            let m = load_model::<T>(p)?;
            if m.config() != &cfg.model.dense_base() {
                return Err(Error::config("stage1_ckpt", "checkpoint does not match the dense base of this config"));
            }
            m
        }
        (Stage::Two, None) => return Err(Error::config("stage1_ckpt", "stage 2 needs a stage-1 checkpoint")),
        _ => {
            let dense = Model::<T>::new(cfg.model.dense_base())?;
            let (m, _) = train_stage1(dense, &train, cfg, PhaseIo { run_dir: Some(&dir), eval: None })?;
            save_model(&m, &dir.join("stage1.ckpt"))?;
            m
        }
    };
    if !matches!(stage, Stage::One) {
        let (_, _, report, _) = run_stage2_from(&stage1, &train, &eval, cfg, Some(&dir))?;
        println!("{}", report.summary());
    }
    println!("{}", dir.display());
    Ok(())
}

fn eval_ckpt<T: Float>(ckpt: &Path, data: &Path, groups: bool) -> Result<()> {
    let model = load_model::<T>(ckpt)?;
    let eval = read_data(data, "eval.jsonl")?;
    let report = evaluate(&model, &eval, EVAL_BATCH)?;
    for line in report.summary().split(' ') {
        println!("{}", line.replace('=', " "));
    }
    if groups {
        print!("{}", group_ablation_table(&model, &eval, EVAL_BATCH)?);
    }
    Ok(())
}

fn route_stats<T: Float>(ckpt: &Path, data: &Path, out: &Path) -> Result<()> {
    let model = load_model::<T>(ckpt)?;
    let eval = read_data(data, "eval.jsonl")?;
    let trace = pathway_stats(&model, &eval, EVAL_BATCH)?;
    write(out, &trace.to_csv())
}

fn dispatch_ckpt(ckpt: &Path, f32_fn: impl FnOnce() -> Result<()>, f64_fn: impl FnOnce() -> Result<()>) -> Result<()> {
    match checkpoint_dtype(ckpt)? {
        Some(DType::F64) => f64_fn(),
        _ => f32_fn(),
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { out, seed, sizes, eval_sizes } => {
            fs::create_dir_all(&out).map_err(|e| Error::Io { path: out.clone(), source: e })?;
            make_dataset(sizes, seed)?.write_jsonl(&out.join("train.jsonl"))?;
            make_dataset(eval_sizes, derive_seed(seed, 6))?.write_jsonl(&out.join("eval.jsonl"))?;
            Ok(())
        }
        Command::Train { config, stage, variant, out, stage1_ckpt, data, seed } => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(s) = seed {
                cfg.data_seed = if cfg.data_seed == cfg.model.seed { s } else { cfg.data_seed };
                cfg.model.seed = s;
            }
            if let Some(v) = variant {
                cfg.set_variant(&v)?;
            }
            let (ck, data) = (stage1_ckpt.as_deref(), data.as_deref());
            match cfg.dtype {
                DType::F32 => train::<f32>(&cfg, stage, &out, ck, data),
                DType::F64 => train::<f64>(&cfg, stage, &out, ck, data),
            }
        }
        Command::Eval { ckpt, data, groups } => {
            dispatch_ckpt(&ckpt, || eval_ckpt::<f32>(&ckpt, &data, groups), || eval_ckpt::<f64>(&ckpt, &data, groups))
        }
        Command::RouteStats { ckpt, data, out } => {
            dispatch_ckpt(&ckpt, || route_stats::<f32>(&ckpt, &data, &out), || route_stats::<f64>(&ckpt, &data, &out))
        }
        Command::Ablate { sweep, config, out, parallel, workers } => {
            let cfg = load_config(config.as_deref())?;
            let points = sweep_configs(&cfg, sweep)?;
            let report = run_sweep(&points, &out, if parallel { workers } else { 1 })?;
            let name = format!("ablate_{}.txt", format!("{sweep:?}").to_lowercase());
            write(&out.join(&name), &report)?;
            print!("{report}");
            Ok(())
        }
        Command::Report { run } => {
            let report = export_report(&run)?;
            write(&run.join("report.txt"), &report)?;
            print!("{report}");
            Ok(())
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config { .. } => 3,
        Error::NonFinite { .. } | Error::UnstableSelection { .. } => 4,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
