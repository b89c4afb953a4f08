//! Routing-pathway statistics, expert-group forcing and run reports.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::autodiff::{DType, Float};
use crate::data::{Dataset, Modality, Task};
use crate::error::{Error, Result};
use crate::moe::{parse_trace_csv, Balance, ExpertGroup, RoutingTrace, TraceRow};
use crate::nn::{ForwardOptions, Model, Placement};
use crate::train::{evaluate_with, run_pipeline, EvalReport, TrainingConfig, METRIC_HEADER};

/// Routing statistics of `model` over every example of `data`.
pub fn pathway_stats<T: Float>(model: &Model<T>, data: &Dataset, batch_size: usize) -> Result<RoutingTrace> {
    if model.plan().is_none() {
        return Err(Error::invalid("pathway statistics need a model with MoE layers"));
    }
    Ok(evaluate_with(model, data, batch_size, ForwardOptions::default())?.1)
}

/// Accuracy when every token is routed only to the experts of `group` (top-k capped at the
/// group size), overriding the modality partition.
pub fn expert_group_ablation<T: Float>(model: &Model<T>, data: &Dataset, group: ExpertGroup, batch_size: usize) -> Result<EvalReport> {
    if model.plan().is_none() {
        return Err(Error::invalid("expert-group forcing needs a model with MoE layers"));
    }
    let opts = ForwardOptions { force_group: Some(group), skip_aux: true };
    Ok(evaluate_with(model, data, batch_size, opts)?.0)
}

/// Forced-group accuracies for T, I and S; groups that do not exist in the variant are reported
/// as errors in their row.
pub fn group_ablation_table<T: Float>(model: &Model<T>, data: &Dataset, batch_size: usize) -> Result<String> {
    let mut s = String::from("group,cross_modal,text_only,image_only,overall\n");
    for g in [ExpertGroup::Text, ExpertGroup::Image, ExpertGroup::Shared] {
        match expert_group_ablation(model, data, g, batch_size) {
            Ok(r) => {
                let acc = |t: Task| r.accuracy(t).map(|a| format!("{a:.4}")).unwrap_or_default();
                let _ = writeln!(
                    s,
                    "{},{},{},{},{:.4}",
                    g.label(),
                    acc(Task::CrossModal),
                    acc(Task::TextOnly),
                    acc(Task::ImageOnly),
                    r.overall()
                );
            }
            Err(Error::InvalidArgument(_)) => {
                let _ = writeln!(s, "{},n/a,n/a,n/a,n/a", g.label());
            }
            Err(e) => return Err(e),
        }
    }
    Ok(s)
}

/// Checks the exported rows: fractions in [0, 1], per (layer, modality) fractions summing to
/// `top_k` and no cross-modality intra-group activation. Returns the violations found.
pub fn check_trace_rows(rows: &[TraceRow], top_k: usize) -> Vec<String> {
    let mut problems = Vec::new();
    let mut sums: std::collections::BTreeMap<(usize, Modality), f64> = Default::default();
    for r in rows {
        if !(0.0..=1.0).contains(&r.activation_fraction) || !(0.0..=1.0).contains(&r.mean_gate_prob) {
            problems.push(format!("layer {} {} expert {}: value outside [0, 1]", r.layer, r.modality.name(), r.expert_id));
        }
        let crossed = matches!(
            (r.modality, r.group),
            (Modality::Text, ExpertGroup::Image) | (Modality::Image, ExpertGroup::Text)
        );
        if crossed && r.activation_fraction != 0.0 {
            problems.push(format!(
                "layer {}: {} tokens activated {} expert {}",
                r.layer,
                r.modality.name(),
                r.group.label(),
                r.expert_id
            ));
        }
        *sums.entry((r.layer, r.modality)).or_default() += r.activation_fraction;
    }
    for ((layer, m), s) in sums {
        if (s - top_k as f64).abs() > 1e-9 {
            problems.push(format!("layer {layer} {}: fractions sum to {s}, expected {top_k}", m.name()));
        }
    }
    problems
}

fn read(dir: &Path, name: &str) -> Result<String> {
    let p = dir.join(name);
    fs::read_to_string(&p).map_err(|e| Error::io(p, e))
}

/// Report sections from the trace CSV: one table per layer plus the shared-group share.
fn pathway_section(out: &mut String, rows: &[TraceRow]) {
    let mut layers: Vec<usize> = rows.iter().map(|r| r.layer).collect();
    layers.dedup();
    for layer in layers {
        let _ = writeln!(out, "[layer {layer}]");
        let _ = writeln!(out, "modality expert group activation_fraction mean_gate_prob");
        let (mut shared, mut total) = (0.0, 0.0);
        for r in rows.iter().filter(|r| r.layer == layer) {
            let _ = writeln!(
                out,
                "{} {} {} {:.6} {:.6}",
                r.modality.name(),
                r.expert_id,
                r.group.label(),
                r.activation_fraction,
                r.mean_gate_prob
            );
            total += r.activation_fraction;
            if r.group == ExpertGroup::Shared {
                shared += r.activation_fraction;
            }
        }
        let share = if total > 0.0 { shared / total } else { 0.0 };
        let _ = writeln!(out, "shared_share {share:.6}");
    }
}

/// Consolidated plain-text report of a finished run directory.
pub fn export_report(run_dir: &Path) -> Result<String> {
    let config = read(run_dir, "config.txt").ok();
    let dense = config.as_deref().is_some_and(|c| c.lines().any(|l| l.trim() == "variant=dense"));
    let mut needed = vec!["config.txt", "metrics_stage2.csv", "eval.txt"];
    if !dense {
        needed.push("route_stats.csv");
    }
    let missing: Vec<_> = needed.iter().map(|n| run_dir.join(n)).filter(|p| !p.exists()).collect();
    if !missing.is_empty() {
        return Err(Error::MissingInputs(missing));
    }
    let config = config.expect("checked above");
    let mut out = String::new();
    let name = run_dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let _ = writeln!(out, "== run {name} ==");
    out.push_str("[config]\n");
    out.push_str(&config);
    out.push_str("[accuracy]\n");
    out.push_str(read(run_dir, "eval.txt")?.trim_end());
    out.push('\n');

    out.push_str("[aux trajectory]\nstep lm aux total\n");
    let metrics = read(run_dir, "metrics_stage2.csv")?;
    let mut lines = metrics.lines();
    if lines.next() != Some(METRIC_HEADER) {
        return Err(Error::Format { what: "metric log", detail: "unexpected header".into() });
    }
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).filter(|f: &Vec<&str>| !f[1].is_empty()).collect();
    let trace_every = config
        .lines()
        .find_map(|l| l.strip_prefix("trace_every="))
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|v| *v > 0)
        .unwrap_or(50);
    for (i, f) in rows.iter().enumerate() {
        if i % trace_every == 0 || i + 1 == rows.len() {
            let _ = writeln!(out, "{} {} {} {}", f[0], f[1], f[2], f[3]);
        }
    }
    if !dense {
        out.push_str("[pathways]\n");
        let rows = parse_trace_csv(&read(run_dir, "route_stats.csv")?)?;
        pathway_section(&mut out, &rows);
    }
    Ok(out)
}

/// Axis of an ablation sweep.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Sweep {
    Experts,
    Balance,
    Placement,
    Alpha,
}

impl std::str::FromStr for Sweep {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "experts" => Ok(Sweep::Experts),
            "balance" => Ok(Sweep::Balance),
            "placement" => Ok(Sweep::Placement),
            "alpha" => Ok(Sweep::Alpha),
            other => Err(format!("unknown sweep `{other}` (expected experts, balance, placement or alpha)")),
        }
    }
}

/// The grid points of `sweep` applied to `base`, labelled `key=value`.
pub fn sweep_configs(base: &TrainingConfig, sweep: Sweep) -> Result<Vec<(String, TrainingConfig)>> {
    let mut out = Vec::new();
    base.model.moe.as_ref().ok_or_else(|| Error::config("variant", "sweeps need a MoE variant"))?;
    let mut push = |label: String, f: &dyn Fn(&mut TrainingConfig)| -> Result<()> {
        let mut c = base.clone();
        f(&mut c);
        c.validate()?;
        out.push((label, c));
        Ok(())
    };
    match sweep {
        Sweep::Experts => {
            for n in [4, 8] {
                push(format!("experts={n}"), &|c| {
                    let m = c.model.moe.as_mut().expect("checked");
                    m.experts = n;
                    m.balance = Balance::Balanced;
                })?;
            }
        }
        Sweep::Balance => {
            for b in [Balance::Balanced, Balance::Unbalanced { vision: 3, language: 3, shared: 2 }] {
                push(format!("balance={b}"), &|c| {
                    let m = c.model.moe.as_mut().expect("checked");
                    m.experts = 8;
                    m.balance = b;
                })?;
            }
        }
        Sweep::Placement => {
            for p in [Placement::Interleaved, Placement::Full] {
                push(format!("placement={p}"), &|c| c.model.placement = p)?;
            }
        }
        Sweep::Alpha => {
            for a in [0.0, 0.001, 0.01] {
                push(format!("alpha={a}"), &|c| c.alpha = a)?;
            }
        }
    }
    Ok(out)
}

/// Runs a full pipeline in the precision named by the config; returns the run directory and
/// the final evaluation.
pub fn run_configured(cfg: &TrainingConfig, out: &Path) -> Result<(PathBuf, EvalReport)> {
    let (dir, eval) = match cfg.dtype {
        DType::F32 => {
            let s = run_pipeline::<f32>(cfg, Some(out), None)?;
            (s.run_dir, s.eval)
        }
        DType::F64 => {
            let s = run_pipeline::<f64>(cfg, Some(out), None)?;
            (s.run_dir, s.eval)
        }
    };
    Ok((dir.expect("run directory requested"), eval))
}

/// Runs every grid point (on up to `workers` threads) and concatenates the per-run reports in
/// grid order.
pub fn run_sweep(points: &[(String, TrainingConfig)], out: &Path, workers: usize) -> Result<String> {
    let workers = workers.max(1);
    let mut results: Vec<Option<Result<PathBuf>>> = (0..points.len()).map(|_| None).collect();
    for chunk in (0..points.len()).collect::<Vec<_>>().chunks(workers) {
        let done: Vec<(usize, Result<PathBuf>)> = std::thread::scope(|s| {
            let handles: Vec<_> = chunk
                .iter()
                .map(|&i| (i, s.spawn(move || run_configured(&points[i].1, out).map(|r| r.0))))
                .collect();
            handles
                .into_iter()
                .map(|(i, h)| (i, h.join().unwrap_or_else(|_| Err(Error::invalid("sweep worker panicked")))))
                .collect()
        });
        for (i, r) in done {
            results[i] = Some(r);
        }
    }
    let mut report = String::new();
    for ((label, _), r) in points.iter().zip(results) {
        let dir = r.expect("every point ran")?;
        let _ = writeln!(report, "#### {label}");
        report.push_str(&export_report(&dir)?);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_dataset, TaskSizes};
    use crate::moe::{upcycle_from_dense, MoeVariant};
    use crate::nn::{ModelConfig, MoeConfig, Placement};
    use crate::train::evaluate;

    fn models() -> (Model<f64>, Model<f64>) {
        let mut c = ModelConfig::dense(16, 2, 2, 5);
        c.max_seq_len = 24;
        let dense = Model::new(c).unwrap();
        let sparse = upcycle_from_dense(&dense, &MoeConfig::default(), Placement::Interleaved, 1).unwrap();
        (dense, sparse)
    }

    #[test]
    fn forcing_shared_on_fresh_upcycle_matches_dense() {
        let (dense, sparse) = models();
        let data = make_dataset(TaskSizes([10, 10, 10]), 2).unwrap();
        let forced = expert_group_ablation(&sparse, &data, ExpertGroup::Shared, 8).unwrap();
        assert_eq!(forced, evaluate(&dense, &data, 8).unwrap());
        let table = group_ablation_table(&sparse, &data, 8).unwrap();
        assert_eq!(table.lines().count(), 4);
        assert!(pathway_stats(&dense, &data, 8).is_err());
    }

    #[test]
    fn modality_variant_has_no_shared_row() {
        let (dense, _) = models();
        let cfg = MoeConfig { variant: MoeVariant::Modality, ..MoeConfig::default() };
        let m = upcycle_from_dense(&dense, &cfg, Placement::Interleaved, 1).unwrap();
        let data = make_dataset(TaskSizes([3, 3, 3]), 2).unwrap();
        let table = group_ablation_table(&m, &data, 8).unwrap();
        assert!(table.contains("S,n/a"));
    }

    #[test]
    fn trace_rows_checked() {
        let (_, sparse) = models();
        let data = make_dataset(TaskSizes([10, 10, 10]), 2).unwrap();
        let t = pathway_stats(&sparse, &data, 8).unwrap();
        let rows = parse_trace_csv(&t.to_csv()).unwrap();
        assert!(check_trace_rows(&rows, 2).is_empty());
        let mut bad = rows.clone();
        bad[0].activation_fraction += 0.5;
        assert!(!check_trace_rows(&bad, 2).is_empty());
    }

    #[test]
    fn report_lists_missing_inputs() {
        let dir = tempfile::tempdir().unwrap();
        match export_report(dir.path()) {
            Err(Error::MissingInputs(v)) => assert!(v.len() >= 3),
            other => panic!("{other:?}"),
        }
    }
}
