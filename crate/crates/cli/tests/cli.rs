use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name)
}

fn estimator(args: &[&str], run_config: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_estimator"));
    cmd.args(args).env_remove("ESTIMATOR_RUN_CONFIG");
    if let Some(rc) = run_config {
        cmd.env("ESTIMATOR_RUN_CONFIG", rc);
    }
    cmd.output().expect("binary runs")
}

fn json_stdout(out: &Output) -> Value {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).expect("one JSON object on stdout")
}

fn model_dir_override(dir: &Path) -> String {
    serde_json::json!({ "model_dir": dir }).to_string()
}

fn xor_config() -> String {
    fixture("xor/config.json").to_string_lossy().into_owned()
}

#[test]
fn xor_train_then_evaluate() {
    let tmp = tempfile::tempdir().unwrap();
    let rc = model_dir_override(tmp.path());
    let config = xor_config();
    let trained = json_stdout(&estimator(&["train", "--config", &config], Some(&rc)));
    assert_eq!(trained["global_step"], 2000);
    let metrics = json_stdout(&estimator(&["evaluate", "--config", &config], Some(&rc)));
    assert_eq!(metrics["accuracy"], 1.0, "{metrics}");
    assert_eq!(metrics["global_step"], 2000.0);

    // Same config and seed in a fresh directory prints the same metrics.
    let again = tempfile::tempdir().unwrap();
    let rc2 = model_dir_override(again.path());
    estimator(&["train", "--config", &config], Some(&rc2));
    let repeat = json_stdout(&estimator(&["evaluate", "--config", &config], Some(&rc2)));
    assert_eq!(repeat, metrics);
}

#[test]
fn predict_writes_one_line_per_row_and_export_loads() {
    let tmp = tempfile::tempdir().unwrap();
    let rc = model_dir_override(&tmp.path().join("model"));
    let config = xor_config();
    json_stdout(&estimator(&["train", "--config", &config], Some(&rc)));

    let input = tmp.path().join("rows.csv");
    fs::write(&input, "x1,x2\n0,0\n0,1\n1,0\n1,1\n0,0\n").unwrap();
    let output = tmp.path().join("pred.jsonl");
    let args = ["predict", "--config", &config, "--input", input.to_str().unwrap(), "--output", output.to_str().unwrap()];
    let summary = json_stdout(&estimator(&args, Some(&rc)));
    assert_eq!(summary["predictions"], 5);
    let lines: Vec<Value> = fs::read_to_string(&output)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 5);
    let classes: Vec<f64> = lines.iter().map(|l| l["class_id"][0].as_f64().unwrap()).collect();
    assert_eq!(classes, vec![0.0, 1.0, 1.0, 0.0, 0.0]);
    assert!(lines[0]["probabilities"].as_array().unwrap().len() == 2);

    let export = tmp.path().join("export");
    let out = json_stdout(&estimator(&["export", "--config", &config, "--dir", export.to_str().unwrap()], Some(&rc)));
    let dir = PathBuf::from(out["export_dir"].as_str().unwrap());
    assert!(dir.join("manifest.json").exists());
    let mut served = estimator::ServingModel::load(&dir).unwrap();
    let csv = estimator_cli::CsvDataset::read(&input).unwrap();
    let job = estimator_cli::JobConfig::parse(&fs::read_to_string(&config).unwrap(), tmp.path(), Some(&rc)).unwrap();
    let preds = served.predict(&csv.to_batch(&job.feature_kinds(), None).unwrap()).unwrap();
    let served_classes: Vec<f64> = preds.iter().map(|p| p["class_id"].data()[0]).collect();
    assert_eq!(served_classes, classes);
}

#[test]
fn config_errors_exit_2_naming_the_field() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("train.csv"), "x1,y\n0,0\n1,1\n").unwrap();
    let text = fs::read_to_string(fixture("xor/config.json")).unwrap();
    let config = tmp.path().join("config.json");
    fs::write(&config, &text).unwrap();
    let out = estimator(&["train", "--config", config.to_str().unwrap()], None);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("`x2`"), "{err}");

    fs::write(&config, text.replace("\"hidden_units\"", "\"hidden_unit\"")).unwrap();
    let out = estimator(&["train", "--config", config.to_str().unwrap()], None);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("hidden_unit"));

    let out = estimator(&["train", "--config", &xor_config()], Some(r#"{"model_dir": "m", "cluster": {"ps": 1, "worker": 1}, "task": {"type": "worker", "index": 4}}"#));
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn diverging_loss_exits_3() {
    let tmp = tempfile::tempdir().unwrap();
    let rows: String = (0..16).map(|i| format!("{},{}\n", i as f64 * 1e3, i as f64 * 1e6)).collect();
    fs::write(tmp.path().join("train.csv"), format!("x,y\n{rows}")).unwrap();
    let config = tmp.path().join("config.json");
    fs::write(
        &config,
        r#"{"estimator_type": "linear_regressor",
            "feature_spec": [{"type": "numeric", "name": "x"}],
            "linear_optimizer": {"name": "sgd", "learning_rate": 10.0},
            "data": {"train_csv": "train.csv", "label_column": "y", "batch_size": 16},
            "run": {"model_dir": "model"},
            "train_steps": 500}"#,
    )
    .unwrap();
    let out = estimator(&["train", "--config", config.to_str().unwrap()], None);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("NaN"));
}

#[test]
fn cluster_from_environment_trains_in_process() {
    let tmp = tempfile::tempdir().unwrap();
    let rc = serde_json::json!({
        "model_dir": tmp.path(),
        "cluster": {"ps": ["ps0:2222"], "worker": ["w0:2222", "w1:2222"]},
        "task": {"type": "worker", "index": 0}
    })
    .to_string();
    let out = json_stdout(&estimator(&["train", "--config", &xor_config()], Some(&rc)));
    assert_eq!(out["global_step"], 2000);
    assert!(out["accuracy"].is_number(), "{out}");
    assert_eq!(fs::read_to_string(tmp.path().join("checkpoint_writer")).unwrap(), "chief");
}

#[test]
fn benchmark_scaling_baseline_and_csv() {
    let tmp = tempfile::tempdir().unwrap();
    let csv = tmp.path().join("scaling.csv");
    let scratch = tmp.path().join("runs");
    let out = estimator(
        &[
            "benchmark-scaling",
            "--workers",
            "1",
            "--num-ps",
            "1",
            "--budget-secs",
            "0.3",
            "--output",
            csv.to_str().unwrap(),
            "--scratch",
            scratch.to_str().unwrap(),
        ],
        None,
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("ideal_linear"));
    let text = fs::read_to_string(&csv).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "workers,steps_per_sec,speedup_vs_1");
    assert_eq!(lines.len(), 2);
    assert!(lines[1].starts_with("1,") && lines[1].ends_with(",1.0000"), "{}", lines[1]);

    let out = estimator(&["benchmark-scaling", "--workers", "", "--scratch", scratch.to_str().unwrap()], None);
    assert!(!out.status.success());
}
