use std::path::Path;
use std::process::{Command, Output};

use wfperf::graph_qa::read_qa_jsonl;

const ONE_WORKFLOW: &str = r#"{
  "workflows": [{
    "workflow_id": "w0",
    "nodes": [
      {"id": 0, "prompt": "Plan the approach."},
      {"id": 1, "prompt": "Write the code."},
      {"id": 2, "prompt": "Review the code."},
      {"id": 3, "prompt": "Summarise."}
    ],
    "edges": [[0, 1], [1, 2], [0, 2], [2, 3]]
  }],
  "tasks": [{"task_id": "t0", "text": "Sort a list."}],
  "samples": [{"workflow_id": "w0", "task_id": "t0", "label": 1, "split": "train"}]
}"#;

fn wfperf(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_wfperf"))
        .current_dir(dir)
        .args(args)
        .env_remove("WFPERF_ENDPOINT")
        .env_remove("RUST_LOG")
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn one_workflow(dir: &Path) -> String {
    let p = dir.join("one.json");
    std::fs::write(&p, ONE_WORKFLOW).unwrap();
    p.display().to_string()
}

fn qa_lines(dir: &Path, samples: &str) -> usize {
    let ds = one_workflow(dir);
    let out = dir.join(format!("qa{samples}"));
    let o = wfperf(dir, &["gen-qa", "--dataset", &ds, "--samples-per-type", samples, "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let items = read_qa_jsonl(&std::fs::read_to_string(out.join("qa.jsonl")).unwrap()).unwrap();
    items.len()
}

#[test]
fn gen_qa_emits_samples_per_type_for_each_of_six_types() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(qa_lines(dir.path(), "1"), 6);
    assert_eq!(qa_lines(dir.path(), "3"), 18);
}

#[test]
fn run_directory_records_config_and_version() {
    let dir = tempfile::tempdir().unwrap();
    let ds = one_workflow(dir.path());
    let o = wfperf(dir.path(), &["--seed", "11", "gen-qa", "--dataset", &ds]);
    assert!(o.status.success(), "{}", stderr(&o));
    let run = dir.path().join("out/gen-qa");
    let snap = std::fs::read_to_string(run.join("config.toml")).unwrap();
    assert!(snap.contains("seed = 11"), "{snap}");
    let version = std::fs::read_to_string(run.join("VERSION")).unwrap();
    assert!(version.contains(env!("CARGO_PKG_VERSION")), "{version}");
    for f in ["qa.jsonl", "qa_heldout.jsonl", "qa_metadata.json"] {
        assert!(run.join(f).is_file(), "{f}");
    }
}

#[test]
fn flags_override_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let ds = one_workflow(dir.path());
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, "seed = 3\n[qa]\nsamples_per_type = 2\n").unwrap();
    let out = dir.path().join("o");
    let args = ["--config", cfg.to_str().unwrap(), "gen-qa", "--dataset", &ds, "--out", out.to_str().unwrap()];
    let o = wfperf(dir.path(), &args);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(std::fs::read_to_string(out.join("qa.jsonl")).unwrap().lines().count(), 12);

    let o = wfperf(dir.path(), &[&args[..], &["--samples-per-type", "1", "--seed", "4"]].concat());
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(std::fs::read_to_string(out.join("qa.jsonl")).unwrap().lines().count(), 6);
    assert!(std::fs::read_to_string(out.join("config.toml")).unwrap().contains("seed = 4"));
}

#[test]
fn grade_qa_scores_gold_answers_fully() {
    let dir = tempfile::tempdir().unwrap();
    let ds = one_workflow(dir.path());
    let out = dir.path().join("g");
    let o = wfperf(dir.path(), &["gen-qa", "--dataset", &ds, "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let items = read_qa_jsonl(&std::fs::read_to_string(out.join("qa.jsonl")).unwrap()).unwrap();
    let answers: String = items
        .iter()
        .map(|it| serde_json::json!({"item_id": it.item_id, "answer": it.gold_answer.render()}).to_string() + "\n")
        .collect();
    let ans = dir.path().join("answers.jsonl");
    std::fs::write(&ans, answers).unwrap();
    let o = wfperf(dir.path(), &["grade-qa", "--answers", ans.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("grading_report.json")).unwrap()).unwrap();
    assert_eq!(report["accuracy_percent"]["Average"].as_f64(), Some(100.0), "{report}");
    let table: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(table["Average"].as_f64(), Some(100.0), "{table}");
}

#[test]
fn usage_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let o = wfperf(dir.path(), &["train", "--no-such-flag"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).starts_with("error[usage]:"), "{}", stderr(&o));
    let o = wfperf(dir.path(), &[]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn help_and_version_succeed() {
    let dir = tempfile::tempdir().unwrap();
    let o = wfperf(dir.path(), &["--help"]);
    assert!(o.status.success());
    let help = String::from_utf8_lossy(&o.stdout);
    for sub in ["gen-synth", "gen-qa", "grade-qa", "pretrain-gnn", "train", "eval", "predict", "rank", "search-sim", "sweep"] {
        assert!(help.contains(sub), "{sub}");
    }
    assert!(wfperf(dir.path(), &["--version"]).status.success());
}

#[test]
fn eval_without_checkpoint_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let ds = one_workflow(dir.path());
    let o = wfperf(dir.path(), &["eval", "--dataset", &ds]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).starts_with("error[config]:"), "{}", stderr(&o));
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[train]\nlearning_rat = 0.1\n").unwrap();
    let o = wfperf(dir.path(), &["--config", cfg.to_str().unwrap(), "gen-synth"]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert!(err.starts_with("error[config]:") && err.contains("learning_rat"), "{err}");
}

#[test]
fn missing_checkpoint_directory_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let ds = one_workflow(dir.path());
    let o = wfperf(dir.path(), &["eval", "--dataset", &ds, "--checkpoint", "nowhere"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("nowhere"), "{}", stderr(&o));
}
