use std::path::PathBuf;
use std::process::{Command, Output};

fn rpo_lab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rpo-lab")).args(args).output().unwrap()
}

fn scratch(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("rpo-cli-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    dir.join(name)
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn validation_failures_exit_with_one() {
    assert_eq!(rpo_lab(&["frobnicate"]).status.code(), Some(1));
    let out = scratch("t.json");
    let out = out.to_str().unwrap();

    let o = rpo_lab(&["--set", "task.V=1", "gen-task", "--out", out]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));

    // misspelled keys are rejected rather than silently ignored
    let o = rpo_lab(&["--set", "task.vocab_size=4", "gen-task", "--out", out]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    assert!(stderr(&o).contains("vocab_size"));

    let o = rpo_lab(&["--config", "/nonexistent/rpo.toml", "gen-task", "--out", out]);
    assert_eq!(o.status.code(), Some(1));

    let o = rpo_lab(&["simulate-margin", "--sigma=-1", "-n", "10"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("sigma"));

    let bad = scratch("bad.jsonl");
    std::fs::write(&bad, "{\"ctx\":0,\n").unwrap();
    let o = rpo_lab(&["train", "--corpus", bad.to_str().unwrap(), "--trace", scratch("x.csv").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    assert!(stderr(&o).contains("bad.jsonl:1"));
}

#[test]
fn missing_input_files_exit_with_two() {
    let trace = scratch("y.csv");
    let o = rpo_lab(&["train", "--corpus", "/nonexistent/c.jsonl", "--trace", trace.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert_eq!(stderr(&o).matches("No such file").count(), 1, "{}", stderr(&o));
}

#[test]
fn gen_task_round_trips_through_the_config() {
    let out = scratch("task.json");
    let o = rpo_lab(&["--set", "task.V=3", "--set", "task.L=2", "gen-task", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let task: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(task["gt"][0].as_array().unwrap().len(), 2);
}
