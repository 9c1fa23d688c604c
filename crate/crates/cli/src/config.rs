//! Job configuration files.
//!
//! ```json
//! {
//!   "estimator_type": "dnn_classifier",
//!   "feature_spec": [{"type": "numeric", "name": "x1"}],
//!   "hidden_units": [8],
//!   "data": {"train_csv": "train.csv", "label_column": "y", "batch_size": 4},
//!   "run": {"model_dir": "model", "seed": 1},
//!   "train_steps": 1000
//! }
//! ```
//!
//! Top-level keys other than the ones named in [`JobConfig`] are canned
//! model fields (`hidden_units`, `n_classes`, `dnn_optimizer`, ...). Paths
//! are resolved against the config file's directory.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use estimator::canned::{self, CannedConfig, EstimatorType};
use estimator::experiment::{parse_run_config, RUN_CONFIG_ENV};
use estimator::feature_columns::FeatureColumn;
use estimator::{Estimator, RunConfig};
use serde::Deserialize;
use serde_json::{Map, Value};

use crate::dataset::{ColumnKind, CsvDataset};
use crate::CliError;

fn default_batch_size() -> usize {
    32
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    #[serde(default)]
    pub train_csv: Option<PathBuf>,
    /// Falls back to `train_csv`.
    #[serde(default)]
    pub eval_csv: Option<PathBuf>,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    /// Defaults to the model's label name.
    #[serde(default)]
    pub label_column: Option<String>,
    /// Training batches are reshuffled each epoch only when this is set.
    #[serde(default)]
    pub shuffle_seed: Option<u64>,
}

#[derive(Deserialize)]
struct RawJob {
    estimator_type: EstimatorType,
    #[serde(default)]
    feature_spec: Vec<FeatureColumn>,
    data: DataConfig,
    #[serde(default)]
    run: Map<String, Value>,
    train_steps: u64,
    #[serde(default)]
    eval_steps: Option<u64>,
    #[serde(flatten)]
    canned: Map<String, Value>,
}

#[derive(Clone, Debug)]
pub struct JobConfig {
    pub estimator_type: EstimatorType,
    pub model: CannedConfig,
    pub data: DataConfig,
    pub run: RunConfig,
    pub train_steps: u64,
    pub eval_steps: Option<u64>,
}

impl JobConfig {
    /// Reads a config file, applying `ESTIMATOR_RUN_CONFIG` over its run
    /// section when that variable is set.
    pub fn load(path: &Path) -> Result<JobConfig, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let env = std::env::var(RUN_CONFIG_ENV).ok();
        let base = path.parent().unwrap_or(Path::new("."));
        JobConfig::parse(&text, base, env.as_deref())
    }

    pub fn parse(text: &str, base: &Path, env: Option<&str>) -> Result<JobConfig, CliError> {
        let raw: RawJob = serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        let model = canned_config(raw.estimator_type, raw.feature_spec, raw.canned)?;

        let mut data = raw.data;
        if data.batch_size == 0 {
            return Err(CliError::Config("data.batch_size must be at least 1".into()));
        }
        data.train_csv = data.train_csv.map(|p| base.join(p));
        data.eval_csv = data.eval_csv.map(|p| base.join(p));

        let mut run = raw.run;
        if let Some(Value::String(dir)) = run.get("model_dir") {
            let dir = base.join(dir).to_string_lossy().into_owned();
            run.insert("model_dir".into(), Value::String(dir));
        }
        if let Some(env) = env {
            let overrides: Map<String, Value> = serde_json::from_str(env)
                .map_err(|e| CliError::Config(format!("{RUN_CONFIG_ENV}: {e}")))?;
            run.extend(overrides);
        }
        let run = parse_run_config(&Value::Object(run).to_string(), None)
            .map_err(|e| CliError::Config(format!("run: {e}")))?;

        Ok(JobConfig {
            estimator_type: raw.estimator_type,
            model,
            data,
            run,
            train_steps: raw.train_steps,
            eval_steps: raw.eval_steps,
        })
    }

    pub fn estimator(&self) -> Result<Estimator, CliError> {
        self.estimator_in(self.run.clone())
    }

    pub fn estimator_in(&self, run: RunConfig) -> Result<Estimator, CliError> {
        canned::canned_estimator(self.estimator_type, self.model.clone(), run)
            .map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn columns(&self) -> Vec<FeatureColumn> {
        self.model
            .linear_columns
            .iter()
            .chain(&self.model.dnn_columns)
            .cloned()
            .collect()
    }

    pub fn label_column(&self) -> &str {
        self.data.label_column.as_deref().unwrap_or(&self.model.label_name)
    }

    /// Raw features the model reads and how each CSV column is parsed.
    /// Columns consumed as numbers are numeric whatever their contents;
    /// everything else is categorical.
    pub fn feature_kinds(&self) -> BTreeMap<String, ColumnKind> {
        let mut kinds = BTreeMap::new();
        for c in self.columns() {
            for name in c.source_features() {
                kinds.entry(name).or_insert(ColumnKind::Categorical);
            }
            numeric_widths(&c, &mut kinds);
        }
        if let Some(w) = &self.model.weight_column {
            kinds.insert(w.clone(), ColumnKind::Numeric(1));
        }
        kinds
    }

    /// Reads a CSV and checks that every referenced column is present; the
    /// label column only when `with_label`.
    pub fn read_csv(&self, path: &Path, with_label: bool) -> Result<CsvDataset, CliError> {
        let data = CsvDataset::read(path)?;
        let mut required: Vec<String> = self.feature_kinds().into_keys().collect();
        if with_label {
            required.push(self.label_column().to_string());
        }
        for name in required {
            if !data.has_column(&name) {
                return Err(CliError::Config(format!(
                    "column `{name}` referenced by the config is missing from {}",
                    path.display()
                )));
            }
        }
        Ok(data)
    }

    /// Classifiers take a `[n]` vector of class ids, regressors `[n, d]`.
    pub fn label_spec(&self) -> (&str, &str, usize, bool) {
        let classifier = self.estimator_type.is_classifier();
        let width = if classifier { 1 } else { self.model.label_dimension };
        (self.label_column(), &self.model.label_name, width, classifier)
    }

    pub fn train_csv(&self) -> Result<&Path, CliError> {
        self.data
            .train_csv
            .as_deref()
            .ok_or_else(|| CliError::Config("data.train_csv is required".into()))
    }

    pub fn eval_csv(&self) -> Result<&Path, CliError> {
        self.data
            .eval_csv
            .as_deref()
            .or(self.data.train_csv.as_deref())
            .ok_or_else(|| CliError::Config("data.eval_csv (or data.train_csv) is required".into()))
    }
}

fn numeric_widths(c: &FeatureColumn, out: &mut BTreeMap<String, ColumnKind>) {
    match c {
        FeatureColumn::Numeric { name, dim } => {
            out.insert(name.clone(), ColumnKind::Numeric(*dim));
        }
        FeatureColumn::Bucketized { source, .. } => numeric_widths(source, out),
        FeatureColumn::Indicator { categorical } | FeatureColumn::Embedding { categorical, .. } => {
            numeric_widths(categorical, out)
        }
        FeatureColumn::SharedEmbedding { categorical, .. } => {
            categorical.iter().for_each(|c| numeric_widths(c, out))
        }
        FeatureColumn::Hashed { .. } | FeatureColumn::Crossed { .. } => {}
    }
}

/// `feature_spec` fills whichever tower columns the config leaves unset.
fn canned_config(
    kind: EstimatorType,
    feature_spec: Vec<FeatureColumn>,
    mut fields: Map<String, Value>,
) -> Result<CannedConfig, CliError> {
    let known = serde_json::to_value(CannedConfig::default()).expect("serializable");
    let known = known.as_object().expect("struct");
    if let Some(unknown) = fields.keys().find(|k| !known.contains_key(*k)) {
        return Err(CliError::Config(format!("unknown field `{unknown}`")));
    }
    let spec = serde_json::to_value(&feature_spec).expect("serializable");
    let towers: &[&str] = match kind {
        EstimatorType::LinearClassifier | EstimatorType::LinearRegressor => &["linear_columns"],
        EstimatorType::DnnClassifier | EstimatorType::DnnRegressor => &["dnn_columns"],
        EstimatorType::DnnLinearCombinedClassifier => &["linear_columns", "dnn_columns"],
    };
    for tower in towers {
        fields.entry(tower.to_string()).or_insert_with(|| spec.clone());
    }
    let cfg: CannedConfig =
        serde_json::from_value(Value::Object(fields)).map_err(|e| CliError::Config(e.to_string()))?;
    cfg.validate(kind).map_err(|e| CliError::Config(e.to_string()))?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use estimator::estimator::TaskType;

    const XOR: &str = r#"{
        "estimator_type": "dnn_classifier",
        "feature_spec": [{"type": "numeric", "name": "x1"}, {"type": "numeric", "name": "x2"}],
        "hidden_units": [8],
        "data": {"train_csv": "train.csv", "label_column": "y", "batch_size": 4},
        "run": {"model_dir": "model", "seed": 3},
        "train_steps": 100
    }"#;

    #[test]
    fn parses_and_resolves_paths() {
        let c = JobConfig::parse(XOR, Path::new("/jobs/xor"), None).unwrap();
        assert_eq!(c.model.hidden_units, vec![8]);
        assert_eq!(c.model.dnn_columns.len(), 2);
        assert!(c.model.linear_columns.is_empty());
        assert_eq!(c.run.model_dir, PathBuf::from("/jobs/xor/model"));
        assert_eq!(c.run.seed, 3);
        assert_eq!(c.train_csv().unwrap(), Path::new("/jobs/xor/train.csv"));
        assert_eq!(c.eval_csv().unwrap(), Path::new("/jobs/xor/train.csv"));
        assert_eq!(c.label_spec(), ("y", "label", 1, true));
        assert_eq!(
            c.feature_kinds(),
            BTreeMap::from([
                ("x1".to_string(), ColumnKind::Numeric(1)),
                ("x2".to_string(), ColumnKind::Numeric(1))
            ])
        );
    }

    #[test]
    fn environment_overrides_the_run_section() {
        let env = r#"{"model_dir": "/elsewhere", "cluster": {"ps": 1, "worker": ["w0", "w1"]},
                      "task": {"type": "worker", "index": 1}}"#;
        let c = JobConfig::parse(XOR, Path::new("/jobs"), Some(env)).unwrap();
        assert_eq!(c.run.model_dir, PathBuf::from("/elsewhere"));
        assert_eq!(c.run.cluster.num_workers, 2);
        assert_eq!(c.run.task.task_type, TaskType::Worker);
        assert_eq!(c.run.seed, 3);
    }

    #[test]
    fn errors_name_the_field() {
        let cases = [
            (XOR.replace("\"hidden_units\"", "\"hiden_units\""), "hiden_units"),
            (XOR.replace("\"train_steps\": 100", "\"steps\": 100"), "train_steps"),
            (XOR.replace("\"batch_size\": 4", "\"batch\": 4"), "batch"),
            (XOR.replace("dnn_classifier", "forest"), "forest"),
            (XOR.replace("[8]", "[]"), "hidden_units"),
            (XOR.replace("\"model_dir\": \"model\", ", ""), "model_dir"),
        ];
        for (text, field) in cases {
            let err = JobConfig::parse(&text, Path::new("."), None).unwrap_err();
            assert!(matches!(err, CliError::Config(_)), "{err}");
            assert!(err.to_string().contains(field), "{field}: {err}");
        }
    }

    #[test]
    fn combined_models_share_the_feature_spec_unless_overridden() {
        let text = r#"{
            "estimator_type": "dnn_linear_combined_classifier",
            "feature_spec": [{"type": "hashed", "name": "a", "num_buckets": 8}],
            "dnn_columns": [{"type": "embedding", "dimension": 2,
                             "categorical": {"type": "hashed", "name": "a", "num_buckets": 8}}],
            "hidden_units": [4],
            "data": {"train_csv": "t.csv"},
            "run": {"model_dir": "m"},
            "train_steps": 1
        }"#;
        let c = JobConfig::parse(text, Path::new("."), None).unwrap();
        assert!(matches!(c.model.linear_columns[0], FeatureColumn::Hashed { .. }));
        assert!(matches!(c.model.dnn_columns[0], FeatureColumn::Embedding { .. }));
        assert_eq!(c.feature_kinds(), BTreeMap::from([("a".to_string(), ColumnKind::Categorical)]));
    }

    #[test]
    fn missing_csv_column_is_a_config_error() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("train.csv"), "x1,y\n0,1\n").unwrap();
        let c = JobConfig::parse(XOR, dir.path(), None).unwrap();
        let err = c.read_csv(c.train_csv().unwrap(), true).unwrap_err();
        assert!(matches!(&err, CliError::Config(m) if m.contains("`x2`")), "{err}");
    }
}
