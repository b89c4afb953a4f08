use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = "d=16
n_heads=2
n_layers=2
ffn_hidden=64,64
max_seq_len=24
batch_size=4
train_sizes=8,6,6
eval_sizes=4,3,3
stage1_steps=3
total_steps=6
trace_every=2
eval_every=3
";

fn moiie(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_moiie")).args(args).env_remove("MOIIE_OUT_DIR").output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn tiny_config(dir: &Path, extra: &str) -> PathBuf {
    let path = dir.join("tiny.cfg");
    fs::write(&path, format!("{TINY}{extra}")).unwrap();
    path
}

fn tiny_data(dir: &Path) -> PathBuf {
    let data = dir.join("data");
    let o = moiie(&["gen-data", "--out", p(&data), "--seed", "4", "--sizes", "8,6,6", "--eval-sizes", "4,3,3"]);
    assert!(o.status.success(), "{}", stderr(&o));
    data
}

// Runs stage 1 and stage 2 separately and returns the run directory.
fn two_stage_run(dir: &Path, cfg: &Path, data: &Path) -> PathBuf {
    let out = dir.join("runs");
    let o = moiie(&["train", "--config", p(cfg), "--stage", "1", "--out", p(&out), "--data", p(data)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let run = PathBuf::from(stdout(&o).lines().last().unwrap());
    let ckpt = run.join("stage1.ckpt");
    assert!(ckpt.exists());
    let o = moiie(&[
        "train", "--config", p(cfg), "--stage", "2", "--out", p(&out), "--data", p(data), "--stage1-ckpt", p(&ckpt),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("overall="));
    run
}

#[test]
fn gen_data_writes_both_splits() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tiny_data(tmp.path());
    let train = fs::read_to_string(data.join("train.jsonl")).unwrap();
    let eval = fs::read_to_string(data.join("eval.jsonl")).unwrap();
    assert_eq!(train.lines().count(), 20);
    assert_eq!(eval.lines().count(), 10);
    assert_ne!(train.lines().next(), eval.lines().next());
}

#[test]
fn unknown_flag_prints_usage() {
    let o = moiie(&["train", "--no-such-flag"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("Usage"));
}

#[test]
fn invalid_config_key_is_named() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path(), "mystery_knob=3\n");
    let o = moiie(&["train", "--config", p(&cfg), "--stage", "1", "--out", p(tmp.path())]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("mystery_knob"), "{}", stderr(&o));
}

#[test]
fn stage_two_requires_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let o = moiie(&["train", "--stage", "2", "--out", p(tmp.path())]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("--stage1-ckpt"));
}

#[test]
fn stage_two_rejects_mismatched_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tiny_data(tmp.path());
    let cfg = tiny_config(tmp.path(), "");
    let run = two_stage_run(tmp.path(), &cfg, &data);
    let other = tmp.path().join("other.cfg");
    fs::write(&other, TINY.replace("d=16", "d=32")).unwrap();
    let o = moiie(&[
        "train", "--config", p(&other), "--stage", "2", "--out", p(tmp.path()), "--data", p(&data), "--stage1-ckpt",
        p(&run.join("stage1.ckpt")),
    ]);
    assert!(!o.status.success());
}

#[test]
fn train_eval_route_stats_and_report() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tiny_data(tmp.path());
    let cfg = tiny_config(tmp.path(), "");
    let run = two_stage_run(tmp.path(), &cfg, &data);
    for f in ["config.txt", "stage1.ckpt", "stage2.ckpt", "metrics_stage1.csv", "metrics_stage2.csv", "route_stats.csv", "eval.txt"] {
        assert!(run.join(f).exists(), "missing {f}");
    }

    let ckpt = run.join("stage2.ckpt");
    let first = moiie(&["eval", "--ckpt", p(&ckpt), "--data", p(&data)]);
    let second = moiie(&["eval", "--ckpt", p(&ckpt), "--data", p(&data)]);
    assert!(first.status.success(), "{}", stderr(&first));
    assert_eq!(first.stdout, second.stdout);
    let text = stdout(&first);
    for task in ["cross_modal ", "text_only ", "image_only ", "overall "] {
        assert!(text.contains(task), "{text}");
    }

    let groups = moiie(&["eval", "--ckpt", p(&ckpt), "--data", p(&data), "--groups"]);
    assert!(stdout(&groups).contains("group,cross_modal,text_only,image_only,overall"));

    let csv = tmp.path().join("stats/route.csv");
    let o = moiie(&["route-stats", "--ckpt", p(&ckpt), "--data", p(&data), "--out", p(&csv)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let rows = moiie_core::moe::parse_trace_csv(&fs::read_to_string(&csv).unwrap()).unwrap();
    assert!(moiie_core::analysis::check_trace_rows(&rows, 2).is_empty());

    let o = moiie(&["report", "--run", p(&run)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report = stdout(&o);
    assert!(report.contains("[accuracy]") && report.contains("[pathways]"));
    assert_eq!(fs::read_to_string(run.join("report.txt")).unwrap(), report);
}

#[test]
fn report_lists_missing_inputs() {
    let tmp = tempfile::tempdir().unwrap();
    let o = moiie(&["report", "--run", p(tmp.path())]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("config.txt"), "{}", stderr(&o));
}

#[test]
fn stage_all_and_variant_override() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path(), "");
    let o = moiie(&["train", "--config", p(&cfg), "--stage", "all", "--variant", "dense", "--out", p(tmp.path())]);
    assert!(o.status.success(), "{}", stderr(&o));
    let run = PathBuf::from(stdout(&o).lines().last().unwrap());
    assert!(fs::read_to_string(run.join("config.txt")).unwrap().contains("variant=dense"));
    assert!(!run.join("route_stats.csv").exists());
}

#[test]
fn ablate_alpha_sweep() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path(), "dtype=f64\n");
    let out = tmp.path().join("ablate");
    let o = moiie(&["ablate", "--sweep", "alpha", "--config", p(&cfg), "--out", p(&out), "--parallel", "--workers", "2"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report = fs::read_to_string(out.join("ablate_alpha.txt")).unwrap();
    assert_eq!(report.matches("#### ").count(), 3);
    assert_eq!(report, stdout(&o));
}
