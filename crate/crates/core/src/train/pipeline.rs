//! Stage 1 (connector alignment), stage 2 (upcycling + joint fine-tuning) and the run layout.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::config::TrainingConfig;
use super::eval::{evaluate_with, EvalReport};
use super::loss::{total_loss, LossReport};
use super::optim::{lr_at, AdamW};
use crate::autodiff::{Float, Tape};
use crate::data::{make_dataset, BatchSampler, Dataset, Task};
use crate::error::{Error, Result};
use crate::moe::{upcycle_from_dense, widen_dense_ffn, RoutingTrace};
use crate::nn::{is_moe_param, param_group, save_model, ForwardOptions, Model, ParamGroup};

pub const METRIC_HEADER: &str =
    "step,lm,aux,total,lr_backbone,lr_connector,acc_cross_modal,acc_text_only,acc_image_only,acc_overall";

/// Stream-specific seeds derived from the run seed.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const STREAM_STAGE1: u64 = 1;
const STREAM_SFT: u64 = 2;
const STREAM_STAGE2: u64 = 3;
const STREAM_ROUTERS: u64 = 4;
const STREAM_WIDEN: u64 = 5;
const STREAM_EVAL_DATA: u64 = 6;

fn fmt_acc(r: Option<&EvalReport>, task: Option<Task>) -> String {
    match (r, task) {
        (Some(r), Some(t)) => r.accuracy(t).map(|a| a.to_string()).unwrap_or_default(),
        (Some(r), None) => r.overall().to_string(),
        (None, _) => String::new(),
    }
}

/// Append-only metric CSV, mirrored to a file when a path is given.
#[derive(Debug)]
pub struct MetricLog {
    path: Option<PathBuf>,
    text: String,
}

impl MetricLog {
    pub fn create(path: Option<&Path>) -> Result<Self> {
        let log = MetricLog { path: path.map(Path::to_path_buf), text: format!("{METRIC_HEADER}\n") };
        if let Some(p) = &log.path {
            fs::write(p, &log.text).map_err(|e| Error::io(p, e))?;
        }
        Ok(log)
    }

    fn append(&mut self, line: String) -> Result<()> {
        if let Some(p) = &self.path {
            use std::io::Write;
            let mut f = fs::OpenOptions::new().append(true).open(p).map_err(|e| Error::io(p, e))?;
            f.write_all(line.as_bytes()).map_err(|e| Error::io(p, e))?;
        }
        self.text.push_str(&line);
        Ok(())
    }

    pub fn push(&mut self, r: &LossReport, eval: Option<&EvalReport>) -> Result<()> {
        let mut line = format!("{},{},{},{},{},{}", r.step, r.lm, r.aux, r.total, r.lr_backbone, r.lr_connector);
        for t in [Some(Task::CrossModal), Some(Task::TextOnly), Some(Task::ImageOnly), None] {
            let _ = write!(line, ",{}", fmt_acc(eval, t));
        }
        line.push('\n');
        self.append(line)
    }

    /// Evaluation-only row (no loss columns).
    pub fn push_eval(&mut self, step: usize, eval: &EvalReport) -> Result<()> {
        let mut line = format!("{step},,,,,");
        for t in [Some(Task::CrossModal), Some(Task::TextOnly), Some(Task::ImageOnly), None] {
            let _ = write!(line, ",{}", fmt_acc(Some(eval), t));
        }
        line.push('\n');
        self.append(line)
    }

    pub fn text(&self) -> &str {
        &self.text
    }
}

/// One optimization phase over a fixed parameter set.
#[derive(Clone, Debug)]
pub struct Phase {
    pub name: &'static str,
    pub steps: usize,
    pub lr_connector: f64,
    pub lr_backbone: f64,
    pub lr_patch: f64,
    pub warmup_ratio: f64,
    pub alpha: f64,
    pub sampler_seed: u64,
}

impl Phase {
    fn base_lr(&self, group: ParamGroup) -> f64 {
        match group {
            ParamGroup::Connector => self.lr_connector,
            ParamGroup::Backbone => self.lr_backbone,
            ParamGroup::PatchEmbedder => self.lr_patch,
        }
    }
}

#[derive(Debug)]
pub struct PhaseLog {
    pub reports: Vec<LossReport>,
    pub metrics: MetricLog,
    /// Routing statistics accumulated since the previous snapshot, keyed by step.
    pub snapshots: Vec<(usize, RoutingTrace)>,
    pub final_eval: Option<EvalReport>,
    /// Routing statistics of the final evaluation.
    pub final_trace: Option<RoutingTrace>,
}

/// Where a phase writes its artifacts.
#[derive(Clone, Copy, Debug)]
pub struct PhaseIo<'a> {
    pub run_dir: Option<&'a Path>,
    pub eval: Option<&'a Dataset>,
}

/// Trains `model` for `phase.steps` steps; only parameters marked trainable move.
pub fn run_phase<T: Float>(
    model: &mut Model<T>,
    phase: &Phase,
    data: &Dataset,
    cfg: &TrainingConfig,
    io: PhaseIo<'_>,
) -> Result<PhaseLog> {
    let metrics_path = io.run_dir.map(|d| d.join(format!("metrics_{}.csv", phase.name)));
    let trace_dir = io.run_dir.map(|d| d.join("traces"));
    if let Some(td) = &trace_dir {
        fs::create_dir_all(td).map_err(|e| Error::io(td, e))?;
    }
    let mut log = PhaseLog { reports: Vec::new(), metrics: MetricLog::create(metrics_path.as_deref())?, snapshots: Vec::new(), final_eval: None, final_trace: None };
    let mut sampler = BatchSampler::new(data, cfg.batch_size, phase.sampler_seed)?;
    let mut opt = AdamW::new(model.params());
    let mut pending = RoutingTrace::default();
    let groups: Vec<ParamGroup> = model.params().iter().map(|(_, n, _)| param_group(n)).collect();
    for step in 0..phase.steps {
        let factor = lr_at(step + 1, phase.steps, phase.warmup_ratio, 1.0)?;
        let batch = sampler.next_batch()?;
        let mut tape = Tape::new();
        let out = model.forward(&mut tape, &batch)?;
        let (loss, mut report) = total_loss(&mut tape, &out, &batch, phase.alpha)?;
        report.step = step;
        report.lr_backbone = phase.lr_backbone * factor;
        report.lr_connector = phase.lr_connector * factor;
        tape.backward_into(loss, model.params_mut())?;
        opt.step(model.params_mut(), |id| phase.base_lr(groups[id.0]) * factor)?;
        pending.merge(&out.trace)?;

        let eval = match io.eval {
            Some(ev) if cfg.eval_every > 0 && step > 0 && step % cfg.eval_every == 0 => {
                Some(evaluate_with(model, ev, cfg.batch_size, ForwardOptions::default())?.0)
            }
            _ => None,
        };
        log.metrics.push(&report, eval.as_ref())?;
        log.reports.push(report);

        let done = step + 1;
        if cfg.trace_every > 0 && done % cfg.trace_every == 0 && !pending.is_empty() {
            let snap = std::mem::take(&mut pending);
            if let Some(td) = &trace_dir {
                snap.write_csv(&td.join(format!("{}_step{done:05}.csv", phase.name)))?;
            }
            log.snapshots.push((done, snap));
        }
    }
    if let Some(ev) = io.eval {
        let (r, trace) = evaluate_with(model, ev, cfg.batch_size, ForwardOptions::default())?;
        log.metrics.push_eval(phase.steps, &r)?;
        log.final_eval = Some(r);
        log.final_trace = Some(trace);
    }
    Ok(log)
}

/// Connector-only alignment of a dense model on the language-modeling loss.
pub fn train_stage1<T: Float>(
    mut model: Model<T>,
    data: &Dataset,
    cfg: &TrainingConfig,
    io: PhaseIo<'_>,
) -> Result<(Model<T>, PhaseLog)> {
    if model.config().moe.is_some() {
        return Err(Error::invalid("stage 1 trains a dense model"));
    }
    if cfg.stage1_trainable.iter().any(|g| *g != ParamGroup::Connector) {
        return Err(Error::config("stage1_trainable", "only the connector may be trained in stage 1"));
    }
    let allowed = cfg.stage1_trainable.clone();
    model.params_mut().set_trainable_where(|n| allowed.contains(&param_group(n)));
    let phase = Phase {
        name: "stage1",
        steps: cfg.stage1_steps,
        lr_connector: cfg.stage1_lr,
        lr_backbone: 0.0,
        lr_patch: 0.0,
        warmup_ratio: cfg.warmup_ratio,
        alpha: 0.0,
        sampler_seed: derive_seed(cfg.model.seed, STREAM_STAGE1),
    };
    let log = run_phase(&mut model, &phase, data, cfg, io)?;
    Ok((model, log))
}

fn stage2_phase(cfg: &TrainingConfig, name: &'static str, steps: usize, stream: u64) -> Phase {
    Phase {
        name,
        steps,
        lr_connector: cfg.lr,
        lr_backbone: cfg.lr,
        lr_patch: cfg.lr * cfg.patch_lr_ratio,
        warmup_ratio: cfg.warmup_ratio,
        alpha: cfg.alpha,
        sampler_seed: derive_seed(cfg.model.seed, stream),
    }
}

/// The just-upcycled sparse model for `cfg`, before any stage-2 update.
pub fn upcycle_for<T: Float>(dense: &Model<T>, cfg: &TrainingConfig) -> Result<Model<T>> {
    let moe = cfg.model.moe.as_ref().ok_or_else(|| Error::config("variant", "stage 2 needs a MoE config"))?;
    upcycle_from_dense(dense, moe, cfg.model.placement, derive_seed(cfg.model.seed, STREAM_ROUTERS))
}

/// Upcycles the stage-1 model and fine-tunes every parameter on `lm + alpha·aux`. In
/// three-stage mode the dense model is first fine-tuned in full and then only the MoE layers
/// (experts and routers) are trained after upcycling.
pub fn train_stage2<T: Float>(
    stage1: &Model<T>,
    data: &Dataset,
    cfg: &TrainingConfig,
    io: PhaseIo<'_>,
) -> Result<(Model<T>, Vec<PhaseLog>)> {
    if cfg.model.moe.is_none() {
        return Err(Error::config("variant", "stage 2 needs a MoE config"));
    }
    let mut logs = Vec::new();
    let mut dense = stage1.clone();
    if cfg.three_stage {
        dense.params_mut().set_trainable_where(|_| true);
        let phase = stage2_phase(cfg, "sft", cfg.sft_steps, STREAM_SFT);
        logs.push(run_phase(&mut dense, &phase, data, cfg, PhaseIo { eval: None, ..io })?);
    }
    let mut model = upcycle_for(&dense, cfg)?;
    if cfg.three_stage {
        model.params_mut().set_trainable_where(is_moe_param);
    } else {
        model.params_mut().set_trainable_where(|_| true);
    }
    let phase = stage2_phase(cfg, "stage2", cfg.total_steps, STREAM_STAGE2);
    logs.push(run_phase(&mut model, &phase, data, cfg, io)?);
    Ok((model, logs))
}

/// Dense baseline for stage 2: full fine-tuning of the stage-1 model, optionally widened at
/// the would-be MoE blocks to match the activated parameters of the sparse variants.
pub fn train_dense_stage2<T: Float>(
    stage1: &Model<T>,
    data: &Dataset,
    cfg: &TrainingConfig,
    io: PhaseIo<'_>,
) -> Result<(Model<T>, Vec<PhaseLog>)> {
    let mut model = if cfg.dense_match && cfg.match_top_k > 1 {
        let blocks = cfg.match_placement.moe_blocks(cfg.model.n_layers);
        widen_dense_ffn(stage1, &blocks, cfg.match_top_k, derive_seed(cfg.model.seed, STREAM_WIDEN))?
    } else {
        stage1.clone()
    };
    model.params_mut().set_trainable_where(|_| true);
    let phase = stage2_phase(cfg, "stage2", cfg.total_steps, STREAM_STAGE2);
    let log = run_phase(&mut model, &phase, data, cfg, io)?;
    Ok((model, vec![log]))
}

/// Training and evaluation sets of a run.
pub fn run_datasets(cfg: &TrainingConfig) -> Result<(Dataset, Dataset)> {
    Ok((
        make_dataset(cfg.train_sizes, cfg.data_seed)?,
        make_dataset(cfg.eval_sizes, derive_seed(cfg.data_seed, STREAM_EVAL_DATA))?,
    ))
}

/// Outcome of a full stage-1 + stage-2 run.
#[derive(Debug)]
pub struct RunSummary<T> {
    pub run_dir: Option<PathBuf>,
    pub stage1: PhaseLog,
    pub stage2: Vec<PhaseLog>,
    pub model: Model<T>,
    pub eval: EvalReport,
    /// Routing statistics over the evaluation set (empty for dense models).
    pub trace: RoutingTrace,
}

/// Runs both stages under `out/<config hash>-s<seed>/` (or fully in memory without `out`).
pub fn run_pipeline<T: Float>(cfg: &TrainingConfig, out: Option<&Path>, data: Option<(Dataset, Dataset)>) -> Result<RunSummary<T>> {
    cfg.validate()?;
    let run_dir = out.map(|o| o.join(cfg.run_name()));
    if let Some(d) = &run_dir {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
        fs::write(d.join("config.txt"), cfg.render()).map_err(|e| Error::io(d.join("config.txt"), e))?;
    }
    let (train, eval) = match data {
        Some(d) => d,
        None => run_datasets(cfg)?,
    };
    let dir = run_dir.as_deref();
    log::info!("stage 1: {} steps", cfg.stage1_steps);
    let dense = Model::<T>::new(cfg.model.dense_base())?;
    let (stage1, log1) = train_stage1(dense, &train, cfg, PhaseIo { run_dir: dir, eval: None })?;
    if let Some(d) = dir {
        save_model(&stage1, &d.join("stage1.ckpt"))?;
    }
    let result = run_stage2_from(&stage1, &train, &eval, cfg, dir)?;
    Ok(RunSummary { run_dir, stage1: log1, stage2: result.0, model: result.1, eval: result.2, trace: result.3 })
}

type Stage2Out<T> = (Vec<PhaseLog>, Model<T>, EvalReport, RoutingTrace);

/// Stage 2 for the configured variant, final evaluation, and artifacts under `dir`.
pub fn run_stage2_from<T: Float>(
    stage1: &Model<T>,
    train: &Dataset,
    eval: &Dataset,
    cfg: &TrainingConfig,
    dir: Option<&Path>,
) -> Result<Stage2Out<T>> {
    log::info!("stage 2 ({}): {} steps", cfg.model.variant_name(), cfg.total_steps);
    let io = PhaseIo { run_dir: dir, eval: Some(eval) };
    let (model, mut logs) = if cfg.model.moe.is_some() {
        train_stage2(stage1, train, cfg, io)?
    } else {
        train_dense_stage2(stage1, train, cfg, io)?
    };
    let last = logs.last_mut().expect("stage 2 runs at least one phase");
    let report = last.final_eval.clone().expect("evaluated at the end of the phase");
    let trace = last.final_trace.take().expect("evaluated at the end of the phase");
    if let Some(d) = dir {
        save_model(&model, &d.join("stage2.ckpt"))?;
        if !trace.is_empty() {
            trace.write_csv(&d.join("route_stats.csv"))?;
        }
        fs::write(d.join("eval.txt"), format!("{}\n", report.summary())).map_err(|e| Error::io(d.join("eval.txt"), e))?;
    }
    Ok((logs, model, report, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::TaskSizes;
    use crate::nn::checkpoint::encode_params;
    use crate::nn::Placement;

    fn tiny() -> TrainingConfig {
        let mut c = TrainingConfig::default();
        c.model.d = 16;
        c.model.n_heads = 2;
        c.model.n_layers = 2;
        c.model.ffn_hidden = vec![64; 2];
        c.model.max_seq_len = 24;
        c.batch_size = 8;
        c.train_sizes = TaskSizes([16, 12, 12]);
        c.eval_sizes = TaskSizes([8, 6, 6]);
        c.stage1_steps = 10;
        c.total_steps = 10;
        c.trace_every = 5;
        c
    }

    #[test]
    fn stage1_freezes_everything_but_the_connector() {
        let cfg = tiny();
        let (train, _) = run_datasets(&cfg).unwrap();
        let dense = Model::<f64>::new(cfg.model.dense_base()).unwrap();
        let before = dense.clone();
        let (after, log) = train_stage1(dense, &train, &cfg, PhaseIo { run_dir: None, eval: None }).unwrap();
        assert_eq!(log.reports.len(), 10);
        for ((id, name, t), (_, _, t0)) in after.params().iter().zip(before.params().iter()) {
            let same = t.to_le_bytes() == t0.to_le_bytes();
            if name.starts_with("connector.") {
                assert!(!same, "{name} did not move");
            } else {
                assert!(same, "{name} moved in stage 1");
                assert!(!after.params().is_trainable(id));
            }
        }
    }

    #[test]
    fn stage2_entry_matches_dense_and_unfreezes() {
        let cfg = tiny();
        let (train, _) = run_datasets(&cfg).unwrap();
        let dense = Model::<f64>::new(cfg.model.dense_base()).unwrap();
        let sparse = upcycle_for(&dense, &cfg).unwrap();
        let batch = BatchSampler::new(&train, 8, 0).unwrap().next_batch().unwrap();
        let loss_of = |m: &Model<f64>| {
            let mut tape = Tape::new();
            let out = m.forward(&mut tape, &batch).unwrap();
            total_loss(&mut tape, &out, &batch, 0.0).unwrap().1.lm
        };
        assert!((loss_of(&dense) - loss_of(&sparse)).abs() < 1e-12);

        let (model, logs) = train_stage2(&dense, &train, &cfg, PhaseIo { run_dir: None, eval: None }).unwrap();
        let start = encode_params(sparse.params());
        assert_ne!(encode_params(model.params()), start);
        let mut moved = std::collections::HashSet::new();
        for (_, name, t) in model.params().iter() {
            let t0 = sparse.params().get(name).unwrap();
            if t.to_le_bytes() != t0.to_le_bytes() {
                moved.insert(param_group(name));
            } else {
                assert!(is_moe_param(name), "{name} did not move");
            }
        }
        assert_eq!(moved.len(), 3);
        assert_eq!(logs[0].snapshots.len(), 2);
        for r in &logs[0].reports {
            assert!((r.total - (r.lm + cfg.alpha * r.aux)).abs() < 1e-9);
            assert_eq!(r.lr_backbone, r.lr_connector);
        }
    }

    #[test]
    fn three_stage_trains_only_moe_after_upcycling() {
        let mut cfg = tiny();
        cfg.three_stage = true;
        cfg.sft_steps = 4;
        let (train, _) = run_datasets(&cfg).unwrap();
        let dense = Model::<f64>::new(cfg.model.dense_base()).unwrap();
        let (model, logs) = train_stage2(&dense, &train, &cfg, PhaseIo { run_dir: None, eval: None }).unwrap();
        assert_eq!(logs.len(), 2);
        for (id, name, _) in model.params().iter() {
            assert_eq!(model.params().is_trainable(id), is_moe_param(name));
        }
    }

    #[test]
    fn dense_baseline_matches_activated_params() {
        let mut cfg = tiny();
        let (train, _) = run_datasets(&cfg).unwrap();
        let dense = Model::<f64>::new(cfg.model.dense_base()).unwrap();
        let sparse = upcycle_for(&dense, &cfg).unwrap();
        cfg.set_variant("dense").unwrap();
        cfg.total_steps = 2;
        let (wide, _) = train_dense_stage2(&dense, &train, &cfg, PhaseIo { run_dir: None, eval: None }).unwrap();
        let routers: usize = sparse.params().iter().filter(|(_, n, _)| n.contains(".router.")).map(|(_, _, t)| t.len()).sum();
        // Two experts carry one more output bias than the widened FFN.
        assert_eq!(wide.activated_params() + routers / 2 + cfg.model.d, sparse.activated_params());
        assert_eq!(wide.config().placement, Placement::Dense);
    }

    #[test]
    fn pipeline_writes_run_directory() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny();
        cfg.dtype = crate::autodiff::DType::F64;
        let a = run_pipeline::<f64>(&cfg, Some(dir.path()), None).unwrap();
        let run = a.run_dir.clone().unwrap();
        assert!(run.ends_with(cfg.run_name()));
        for f in ["config.txt", "stage1.ckpt", "stage1.ckpt.cfg", "stage2.ckpt", "metrics_stage1.csv", "metrics_stage2.csv", "route_stats.csv", "eval.txt"] {
            assert!(run.join(f).exists(), "missing {f}");
        }
        assert!(run.join("traces/stage2_step00010.csv").exists());
        let csv = fs::read_to_string(run.join("metrics_stage2.csv")).unwrap();
        assert_eq!(csv, a.stage2[0].metrics.text());
        let b = run_pipeline::<f64>(&cfg, None, None).unwrap();
        assert_eq!(b.stage2[0].metrics.text(), csv);
    }
}
