mod common;

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

fn agentbudget(cfg: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_agentbudget")).args(args).arg("--config").arg(cfg).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn fixture(dir: &Path, n_tasks: usize, budgets: &[f64]) -> PathBuf {
    common::write_fixture(dir, &common::profile(n_tasks, true), &common::config(budgets))
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn provision_two_tiers_at_2000() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = fixture(dir.path(), 2, &[2000.0]);
    let o = agentbudget(&cfg, &["provision", "--explain"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.contains("tier 1 unit cost 1235 weight W ="), "{text}");
    assert!(text.contains("1 x deepseek-v3 (tier 1)"), "{text}");
    assert!(text.contains("3 x small-model (tier 2)"), "{text}");

    let records = read_json(&dir.path().join("out/provision.json"));
    let sol = &records[0]["solution"];
    assert_eq!(sol["counts"], json!([1, 3]));
    assert_eq!(sol["total_cost"], json!(1985.0));
    assert_eq!(records[0]["tier_costs"], json!([1235.0, 250.0]));
}

#[test]
fn provision_budget_override_and_infeasible_exit() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = fixture(dir.path(), 2, &[2000.0]);
    let o = agentbudget(&cfg, &["provision", "--budget", "400"]);
    assert_eq!(o.status.code(), Some(2), "{}", stdout(&o));
    assert!(stdout(&o).contains("infeasible"));
    // the record is still written
    let records = read_json(&dir.path().join("out/provision.json"));
    assert_eq!(records[0]["budget"], json!(400.0));
    assert_eq!(records[0]["solution"]["feasible"], json!(false));
}

#[test]
fn collect_with_no_tasks_writes_header_only() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = fixture(dir.path(), 0, &[2000.0]);
    let o = agentbudget(&cfg, &["collect"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = std::fs::read_to_string(dir.path().join("out/dataset.jsonl")).unwrap();
    assert_eq!(text.lines().count(), 1);
    let header: Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    assert_eq!(header["version"], json!(1));
}

#[test]
fn collect_rows_cover_every_topology() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = fixture(dir.path(), 3, &[2000.0, 1000.0]);
    let o = agentbudget(&cfg, &["collect", "--jobs", "3"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = std::fs::read_to_string(dir.path().join("out/dataset.jsonl")).unwrap();
    // header + 3 tasks x 2 budgets x 4 topologies
    assert_eq!(text.lines().count(), 1 + 24);
}

#[test]
fn collect_with_infeasible_budget_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = fixture(dir.path(), 2, &[100.0]);
    let o = agentbudget(&cfg, &["collect"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn mock_script_without_matching_rule_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let mut profile = common::profile(2, true);
    // drop the executor rule
    profile["mock"]["rules"].as_array_mut().unwrap().pop();
    let cfg = common::write_fixture(dir.path(), &profile, &common::config(&[2000.0]));
    let o = agentbudget(&cfg, &["collect"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("error:"), "{}", stderr(&o));
}

#[test]
fn train_rejects_zero_epochs() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = common::config(&[2000.0]);
    config["trainer"]["epochs"] = json!(0);
    let cfg = common::write_fixture(dir.path(), &common::profile(2, true), &config);
    assert_eq!(agentbudget(&cfg, &["collect"]).status.code(), Some(0));
    let o = agentbudget(&cfg, &["train"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(!dir.path().join("out/policy.json").exists());
}

#[test]
fn unknown_config_field_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = common::config(&[2000.0]);
    config["budget"] = json!(5);
    let cfg = common::write_fixture(dir.path(), &common::profile(2, true), &config);
    let o = agentbudget(&cfg, &["provision"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn run_without_weights_needs_a_topology() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = fixture(dir.path(), 2, &[2000.0]);
    let o = agentbudget(&cfg, &["run"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("train"), "{}", stderr(&o));

    let o = agentbudget(&cfg, &["run", "--topology", "feedback", "--task-id", "q01"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let trace = read_json(&dir.path().join("out/trace.json"));
    assert_eq!(trace["topology"], json!("feedback"));
    assert_eq!(trace["task_id"], json!("q01"));
}

#[test]
fn run_linear_with_fixed_mock_costs() {
    let dir = tempfile::tempdir().unwrap();
    let mut profile = common::profile(1, true);
    // every executor call: 500 prompt + 100 completion tokens on the small model = 70 units
    profile["mock"] = json!({
        "rules": [{"when": {"role": "executor"}, "fixed": {"text": "#### 9", "completion_tokens": 100, "prompt_tokens": 500}}]
    });
    let cfg = common::write_fixture(dir.path(), &profile, &common::config(&[1000.0]));
    let o = agentbudget(&cfg, &["run", "--topology", "linear", "--task", "Add 4 and 5."]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let trace = read_json(&dir.path().join("out/trace.json"));
    // budget 1000 buys four small-model agents
    assert_eq!(trace["calls"].as_array().unwrap().len(), 4);
    assert_eq!(trace["cumulative_cost"], json!(280.0));
    assert_eq!(trace["oob"], json!(false));
    assert_eq!(trace["success"], Value::Null);
}

#[test]
fn run_unstaffable_topology_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = common::config(&[1000.0]);
    config["instance_cap"] = json!(2);
    let cfg = common::write_fixture(dir.path(), &common::profile(1, true), &config);
    let o = agentbudget(&cfg, &["run", "--topology", "planner_driven"]);
    assert_eq!(o.status.code(), Some(1), "{}", stdout(&o));
}

fn trace(topology: &str, cost: f64, budget: f64, success: Option<bool>) -> Value {
    json!({
        "task_id": "t", "topology": topology, "budget": budget, "calls": [],
        "cumulative_cost": cost, "final_answer": null, "success": success,
        "oob": cost > budget, "terminated_early": false, "precheck_stopped": false,
        "failure": null, "evaluation_note": null
    })
}

fn report(dir: &Path, traces: &[Value]) -> Output {
    let path = dir.join("traces.jsonl");
    let body: String = traces.iter().map(|t| format!("{t}\n")).collect();
    std::fs::write(&path, body).unwrap();
    Command::new(env!("CARGO_BIN_EXE_agentbudget")).args(["report", "--traces"]).arg(&path).output().unwrap()
}

#[test]
fn report_summarizes_traces() {
    let dir = tempfile::tempdir().unwrap();
    let traces = [
        trace("linear", 100.0, 500.0, Some(true)),
        trace("star", 200.0, 500.0, Some(true)),
        trace("star", 300.0, 500.0, Some(true)),
        trace("feedback", 400.0, 500.0, Some(false)),
    ];
    let o = report(dir.path(), &traces);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.contains("Acc       75.0%"), "{text}");
    assert!(text.contains("Avg Cost  250.0"), "{text}");
    assert!(text.contains("OOB       0/4"), "{text}");
    assert!(text.contains("star"), "{text}");
}

#[test]
fn report_counts_oob() {
    let dir = tempfile::tempdir().unwrap();
    let traces = [
        trace("linear", 100.0, 500.0, Some(true)),
        trace("linear", 600.0, 500.0, Some(true)),
        trace("linear", 500.0, 500.0, Some(false)),
        trace("linear", 50.0, 500.0, None),
    ];
    let text = stdout(&report(dir.path(), &traces));
    assert!(text.contains("OOB       1/4"), "{text}");
    assert!(text.contains("Acc       50.0%"), "{text}");
}

#[test]
fn report_on_empty_file_warns() {
    let dir = tempfile::tempdir().unwrap();
    let o = report(dir.path(), &[]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stderr(&o).contains("no traces"));
}

#[test]
fn bad_usage_exits_1() {
    let o = Command::new(env!("CARGO_BIN_EXE_agentbudget")).arg("frobnicate").output().unwrap();
    assert_eq!(o.status.code(), Some(1));
    let o = Command::new(env!("CARGO_BIN_EXE_agentbudget")).arg("--help").output().unwrap();
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("provision"));
}

#[test]
fn full_pipeline_is_reproducible() {
    let run = || {
        let dir = tempfile::tempdir().unwrap();
        let cfg = fixture(dir.path(), 6, &[2000.0, 1000.0]);
        for args in [&["provision"][..], &["collect", "--jobs", "2"], &["train"], &["run", "--budget", "1000"], &["report"]] {
            let o = agentbudget(&cfg, args);
            assert_eq!(o.status.code(), Some(0), "{args:?}: {}", stderr(&o));
        }
        ["dataset.jsonl", "policy.json", "train_report.json", "traces.jsonl"]
            .map(|f| std::fs::read(dir.path().join("out").join(f)).unwrap())
    };
    assert_eq!(run(), run());
}
