use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use sinkflow::model::{Checkpoint, ModelParams};
use tempfile::TempDir;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_sinkflow"))
}

fn run(dir: &Path, args: &[&str]) -> Output {
    bin().current_dir(dir).args(args).output().expect("spawn sinkflow")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = run(dir, args);
    assert_eq!(code(&out), 0, "{args:?}: {}", stderr(&out));
    out
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn schema_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../schemas")
}

fn assert_schema(name: &str, doc: &Value) {
    let schema = read_json(&schema_dir().join(format!("{name}.schema.json")));
    let validator = jsonschema::validator_for(&schema).expect("schema compiles");
    let errors: Vec<String> = validator
        .iter_errors(doc)
        .map(|e| format!("{} at {}", e, e.instance_path()))
        .collect();
    assert!(errors.is_empty(), "{name}: {errors:#?}");
}

/// 300 elements, 20 snapshots of a sticky 3-faction chain.
fn synthetic(dir: &Path) -> PathBuf {
    ok(
        dir,
        &[
            "synth",
            "--k",
            "3",
            "--elements",
            "300",
            "--steps",
            "20",
            "--seed",
            "5",
            "--output",
            "data.csv",
        ],
    );
    dir.join("data.csv")
}

const TOY_CSV: &str = "time_step,element_id,faction_id
0,0,0\n0,1,0\n0,2,1\n0,3,1
1,0,0\n1,1,0\n1,2,1\n1,3,1
2,0,0\n2,1,0\n2,2,1\n2,3,1
3,0,0\n3,1,0\n3,2,1\n3,3,1
4,0,0\n4,1,0\n4,2,1\n4,3,0
";

#[test]
fn synth_ingest_train_predict_validate_against_schemas() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    synthetic(dir);
    assert_schema("synth_meta", &read_json(&dir.join("data.meta.json")));

    ok(dir, &["ingest", "--input", "data.csv", "--output", "series.json"]);
    let series = read_json(&dir.join("series.json"));
    assert_schema("series", &series);
    assert_eq!(series["series"]["plans"].as_array().unwrap().len(), 19);

    ok(
        dir,
        &[
            "train",
            "--input",
            "data.csv",
            "--epochs",
            "5",
            "--output",
            "model.json",
        ],
    );
    assert_schema("checkpoint", &read_json(&dir.join("model.json")));
    let trace = read_json(&dir.join("model.loss.json"));
    assert_schema("loss_trace", &trace);
    assert_eq!(trace["loss_trace"].as_array().unwrap().len(), 5);

    let out = ok(
        dir,
        &["predict", "--input", "series.json", "--checkpoint", "model.json"],
    );
    let forecast: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_schema("forecast", &forecast);
    assert_eq!(forecast["anchor"], 19);
    assert_eq!(forecast["steps"].as_array().unwrap().len(), 1);

    let out = ok(
        dir,
        &[
            "rollout",
            "--input",
            "data.csv",
            "--method",
            "avg",
            "--horizon",
            "4",
            "--at",
            "6",
        ],
    );
    let forecast: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_schema("forecast", &forecast);
    let steps = forecast["steps"].as_array().unwrap();
    assert_eq!(steps.len(), 4);
    assert_eq!(steps[3]["step"], 9);
}

#[test]
fn eval_report_validates_with_every_method() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    synthetic(dir);
    ok(
        dir,
        &[
            "eval",
            "--input",
            "data.csv",
            "--split",
            "10,3,6",
            "--epochs",
            "10",
            "--seeds",
            "0,1",
            "--output",
            "report.json",
        ],
    );
    let report = read_json(&dir.join("report.json"));
    assert_schema("eval_report", &report);
    let methods = report["methods"].as_object().unwrap();
    assert_eq!(methods.len(), 5);
    for (name, m) in methods {
        assert!(m["flow_cost_mean"].is_number(), "{name}");
    }
    assert_eq!(report["run_config"]["seeds"], serde_json::json!([0, 1]));
}

#[test]
fn identity_eval_on_toy_timeline_matches_hand_computation() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    std::fs::write(dir.join("toy.csv"), TOY_CSV).unwrap();
    let out = ok(
        dir,
        &[
            "eval",
            "--input",
            "toy.csv",
            "--split",
            "3,0,1",
            "--method",
            "identity",
            "--horizon",
            "1",
        ],
    );
    let report: Value = serde_json::from_slice(&out.stdout).unwrap();
    let m = &report["methods"]["identity"];
    assert!((m["flow_cost_mean"].as_f64().unwrap() - (2.0f64 * 0.0625).sqrt()).abs() < 1e-15);
    assert!((m["faction_rmse"].as_f64().unwrap() - 0.25).abs() < 1e-15);
}

#[test]
fn every_command_is_byte_deterministic() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    synthetic(dir);
    let runs: Vec<Vec<&str>> = vec![
        vec!["synth", "--k", "3", "--elements", "300", "--steps", "20", "--seed", "5"],
        vec!["ingest", "--input", "data.csv"],
        vec!["train", "--input", "data.csv", "--epochs", "5", "--seed", "3"],
        vec![
            "eval",
            "--input",
            "data.csv",
            "--split",
            "10,3,6",
            "--epochs",
            "5",
            "--loss-mix",
            "0.5",
        ],
        vec![
            "rollout",
            "--input",
            "data.csv",
            "--method",
            "identity",
            "--horizon",
            "2",
        ],
        vec!["gradcheck", "--k", "3", "--trials", "2"],
        vec!["export-sankey", "--input", "data.csv"],
    ];
    for args in runs {
        let files: Vec<Vec<u8>> = ["a", "b"]
            .iter()
            .map(|tag| {
                let out = dir.join(format!("{}-{tag}.out", args[0]));
                let mut full = args.clone();
                let out_str = out.to_str().unwrap().to_string();
                full.extend(["--output", &out_str]);
                ok(dir, &full);
                let mut bytes = std::fs::read(&out).unwrap();
                if args[0] == "train" {
                    bytes.extend(std::fs::read(out.with_extension("loss.json")).unwrap());
                }
                bytes
            })
            .collect();
        assert_eq!(files[0], files[1], "{args:?}");
    }
    // The checkpoint path is echoed into the output, so reuse one.
    let a = ok(dir, &["predict", "--input", "data.csv", "--checkpoint", "train-a.out"]).stdout;
    let b = ok(dir, &["predict", "--input", "data.csv", "--checkpoint", "train-a.out"]).stdout;
    assert_eq!(a, b);
}

#[test]
fn zero_epochs_writes_the_initialization() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    synthetic(dir);
    ok(
        dir,
        &[
            "train",
            "--input",
            "data.csv",
            "--epochs",
            "0",
            "--seed",
            "11",
            "--output",
            "init.json",
        ],
    );
    let ckpt = Checkpoint::from_json(&std::fs::read_to_string(dir.join("init.json")).unwrap()).unwrap();
    let init = ModelParams::new(3, &ModelParams::default_hidden(3), 11).unwrap();
    assert_eq!(ckpt.params().unwrap(), init);
    assert!(read_json(&dir.join("init.loss.json"))["loss_trace"]
        .as_array()
        .unwrap()
        .is_empty());
}

#[test]
fn exit_codes_follow_the_contract() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    synthetic(dir);

    let out = run(dir, &["train", "--input", "no/such/file.csv", "--output", "m.json"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("no/such/file.csv"), "{}", stderr(&out));
    let out = run(dir, &["eval", "--input", "missing.csv", "--split", "10,3,6"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("missing.csv"));

    let usage: Vec<Vec<&str>> = vec![
        vec!["frobnicate"],
        vec!["train", "--input", "data.csv"],
        vec![
            "train",
            "--input",
            "data.csv",
            "--output",
            "m.json",
            "--loss-mix",
            "1.5",
        ],
        vec!["train", "--input", "data.csv", "--output", "m.json", "--k", "4"],
        vec!["eval", "--input", "data.csv"],
        vec!["eval", "--input", "data.csv", "--split", "10,3"],
        vec!["gradcheck", "--trials", "0"],
        vec!["predict", "--input", "data.csv", "--method", "sinkflow"],
        vec!["predict", "--input", "data.csv", "--method", "lr"],
        vec!["predict", "--input", "data.csv", "--method", "identity", "--at", "1"],
        vec!["rollout", "--input", "data.csv", "--method", "identity"],
        vec!["export-sankey", "--input", "data.csv", "--horizon", "2"],
        vec![
            "train",
            "--input",
            "data.csv",
            "--output",
            "m.json",
            "--sinkhorn-tol",
            "-1",
        ],
    ];
    for args in usage {
        let out = run(dir, &args);
        assert_eq!(code(&out), 2, "{args:?}: {}", stderr(&out));
    }

    // Config file: unknown keys are a usage error; flags win over the file.
    std::fs::write(dir.join("bad.json"), r#"{"epochs": 3, "colour": "red"}"#).unwrap();
    assert_eq!(
        code(&run(
            dir,
            &["train", "--config", "bad.json", "--input", "data.csv", "--output", "m.json"]
        )),
        2
    );
    std::fs::write(dir.join("cfg.json"), r#"{"epochs": 3, "seed": 9, "lags": 3}"#).unwrap();
    ok(
        dir,
        &[
            "train", "--config", "cfg.json", "--input", "data.csv", "--epochs", "2", "--output", "m.json",
        ],
    );
    let ckpt = read_json(&dir.join("m.json"));
    assert_eq!(ckpt["config"]["epochs"], 2);
    assert_eq!(ckpt["seed"], 9);
    std::fs::write(dir.join("lags.json"), r#"{"lags": 2}"#).unwrap();
    assert_eq!(
        code(&run(
            dir,
            &[
                "train",
                "--config",
                "lags.json",
                "--input",
                "data.csv",
                "--output",
                "m.json"
            ]
        )),
        2
    );
}

#[test]
fn gradcheck_default_passes_and_loose_forward_fails() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    let out = ok(dir, &["gradcheck", "--trials", "5"]);
    let report: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_schema("gradcheck", &report);
    assert_eq!(report["passed"], true);
    assert_eq!(report["reports"].as_array().unwrap().len(), 4);

    let out = run(dir, &["gradcheck", "--trials", "5", "--sinkhorn-tol", "1e-1"]);
    assert_eq!(code(&out), 1, "{}", stderr(&out));
    let report: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["passed"], false);
}

#[test]
fn sankey_ground_truth_structure() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    std::fs::write(
        dir.join("four.csv"),
        TOY_CSV.lines().take(1 + 16).collect::<Vec<_>>().join("\n"),
    )
    .unwrap();
    ok(
        dir,
        &[
            "export-sankey",
            "--input",
            "four.csv",
            "--output",
            "s.json",
            "--svg",
            "s.svg",
        ],
    );
    let doc = read_json(&dir.join("s.json"));
    assert_schema("sankey", &doc);
    let steps = doc["steps"].as_array().unwrap();
    assert_eq!(steps.len(), 4);
    assert_eq!(steps.iter().filter(|s| s.get("flows").is_some()).count(), 3);
    assert_eq!(doc["marker"], 3);
    assert!(steps.iter().all(|s| s["source"] == "observed"));
    assert!(std::fs::read_to_string(dir.join("s.svg"))
        .unwrap()
        .contains("stroke-dasharray"));
}

#[test]
fn sankey_with_predicted_rollout_keeps_row_sums() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    synthetic(dir);
    ok(
        dir,
        &["train", "--input", "data.csv", "--epochs", "5", "--output", "m.json"],
    );
    ok(
        dir,
        &[
            "export-sankey",
            "--input",
            "data.csv",
            "--checkpoint",
            "m.json",
            "--horizon",
            "3",
            "--output",
            "s.json",
        ],
    );
    let text = std::fs::read_to_string(dir.join("s.json")).unwrap();
    let doc = sinkflow_cli::SankeyDocument::from_json(&text).unwrap();
    assert_schema("sankey", &read_json(&dir.join("s.json")));
    assert_eq!(doc.marker, 3);
    assert_eq!(doc.steps.len(), 6);
    let sources: Vec<&str> = doc
        .steps
        .iter()
        .map(|s| {
            if s.source == sinkflow_cli::sankey::StepSource::Observed {
                "o"
            } else {
                "p"
            }
        })
        .collect();
    assert_eq!(sources, ["o", "o", "o", "p", "p", "p"]);
    for step in &doc.steps {
        if let Some(flows) = &step.flows {
            for (row, want) in flows.iter().zip(&step.marginal) {
                assert!((row.iter().sum::<f64>() - want).abs() <= 1e-9);
            }
        }
    }
}

#[test]
fn sankey_without_plans_is_a_usage_error() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    std::fs::write(
        dir.join("one.json"),
        r#"{"k": 2, "marginals": [[0.5, 0.5]], "plans": []}"#,
    )
    .unwrap();
    let out = run(dir, &["export-sankey", "--input", "one.json"]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));
}
