use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
rounds = 2
eval_every = 1

[data]
vocab_size = 60
signal_per_class = 4
seq_len_min = 5
seq_len_max = 8
signal_rate = 0.5
train_size = 80
test_size = 40

[backbone]
steps = 5
pretext_size = 50
shared_signal = 1

[encoder]
d_e = 8
layers = 1
heads = 2
d_ff = 16
max_len = 24

[generator]
hidden = 4
prompt_len = 2

[federation]
num_clients = 8
selection_ratio = 0.25

[unlearn]
rounds_before = 2
prompt_len = 3
epochs = 2
sampled_clients = 3

[grid]
selection_ratios = [0.25]
prompt_lens = [1, 2]
hiddens = [2, 3]
"#;

fn promptfed(dir: &Path, args: &[&str]) -> Output {
    let config = dir.join("tiny.toml");
    if !config.exists() {
        std::fs::write(&config, TINY).unwrap();
    }
    Command::new(env!("CARGO_BIN_EXE_promptfed"))
        .args(args)
        .arg("--config")
        .arg(&config)
        .arg("--out")
        .arg(dir.join("out"))
        .output()
        .unwrap()
}

fn stdout_json(out: &Output) -> serde_json::Value {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap()
}

#[test]
fn train_then_eval() {
    let tmp = tempfile::tempdir().unwrap();
    let summary = stdout_json(&promptfed(tmp.path(), &["train", "--seed", "3"]));
    let run_dir = Path::new(summary["run_dir"].as_str().unwrap()).to_path_buf();
    let metrics = std::fs::read_to_string(run_dir.join("metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 3);
    let acc = summary["final_accuracy"].as_f64().unwrap();

    let eval = stdout_json(&promptfed(
        tmp.path(),
        &[
            "eval",
            "--encoder",
            run_dir.join("encoder.bin").to_str().unwrap(),
            "--generator",
            run_dir.join("final.bin").to_str().unwrap(),
        ],
    ));
    assert_eq!(eval["accuracy"].as_f64().unwrap(), acc);
    assert_eq!(eval["samples"], 40);
}

#[test]
fn rounds_override_and_seed_change_the_run() {
    let tmp = tempfile::tempdir().unwrap();
    let a = stdout_json(&promptfed(tmp.path(), &["train", "--rounds", "0"]));
    assert_eq!(a["rounds"], 0);
    let b = stdout_json(&promptfed(tmp.path(), &["train", "--rounds", "0", "--seed", "99"]));
    assert_ne!(a["run_dir"], b["run_dir"]);
}

#[test]
fn ablate_grid_and_unlearn() {
    let tmp = tempfile::tempdir().unwrap();
    let ablate = stdout_json(&promptfed(tmp.path(), &["ablate", "--execution", "sequential"]));
    let finals = ablate["final_accuracy"].as_object().unwrap();
    assert_eq!(finals.len(), 3);
    assert!(finals.contains_key("prompt_and_text") && finals.contains_key("text_only"));

    let grid = stdout_json(&promptfed(tmp.path(), &["grid"]));
    assert_eq!(grid["rows"].as_array().unwrap().len(), 4);

    let report = stdout_json(&promptfed(tmp.path(), &["unlearn"]));
    assert_eq!(report["global_accuracy"].as_array().unwrap().len(), 3);
    assert_eq!(report["clients"].as_array().unwrap().len(), 3);
    assert_eq!(report["global_replaced_exactly"], true);
}

#[test]
fn gen_data_files_load_back() {
    let tmp = tempfile::tempdir().unwrap();
    let summary = stdout_json(&promptfed(tmp.path(), &["gen-data"]));
    let dir = Path::new(summary["dir"].as_str().unwrap()).to_path_buf();
    let train = std::fs::read_to_string(dir.join("train.jsonl")).unwrap();
    assert_eq!(train.lines().count(), 80);
    assert!(dir.join("spec.json").exists());

    let eval_cfg = format!(
        "{TINY}\n",
    )
    .replace(
        "test_size = 40",
        &format!(
            "test_size = 40\ntrain_path = {:?}\ntest_path = {:?}",
            dir.join("train.jsonl"),
            dir.join("test.jsonl")
        ),
    );
    std::fs::write(tmp.path().join("tiny.toml"), eval_cfg).unwrap();
    let run = stdout_json(&promptfed(tmp.path(), &["train", "--rounds", "1"]));
    assert!(run["bayes_accuracy"].is_null());
}

#[test]
fn structured_errors() {
    let tmp = tempfile::tempdir().unwrap();
    std::fs::write(tmp.path().join("tiny.toml"), "roundz = 1\n").unwrap();
    let out = promptfed(tmp.path(), &["train"]);
    assert!(!out.status.success());
    let err: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"]["kind"], "config");

    let out = promptfed(tmp.path(), &["bogus"]);
    assert!(!out.status.success());
}
