//! Serving exports: `manifest.json` plus `variables.estckpt` in a
//! timestamped directory, and a loader that serves from that directory.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use super::checkpoint::{restore_checkpoint, save_checkpoint, Checkpoint};
use super::{build_graph, predict_batch, Estimator, ModelDescriptor, PredictionMap};
use crate::error::{Error, Result};
use crate::feature_columns::FeatureColumn;
use crate::graph::{ExecutionContext, NodeId};
use crate::input::{FeatureKind, InputBatch, InputSignature};
use crate::model_fn::{Mode, ModelFn, OutputSignature, Params};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const VARIABLES_FILE: &str = "variables.estckpt";
pub const EXPORT_FORMAT_VERSION: u32 = 1;

/// Features the serving side will receive, and optionally the columns that
/// consume them.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ServingInputSpec {
    pub features: BTreeMap<String, FeatureKind>,
    #[serde(default)]
    pub columns: Vec<FeatureColumn>,
}

impl ServingInputSpec {
    /// Numeric sources become dense features; everything else is sparse.
    pub fn from_columns(columns: &[FeatureColumn]) -> Self {
        let mut features = BTreeMap::new();
        for c in columns {
            for name in c.source_features() {
                features.entry(name).or_insert(FeatureKind::Sparse);
            }
            collect_numeric(c, &mut features);
        }
        ServingInputSpec {
            features,
            columns: columns.to_vec(),
        }
    }

    pub fn from_signature(signature: &InputSignature) -> Self {
        ServingInputSpec {
            features: signature.features.clone(),
            columns: Vec::new(),
        }
    }

    fn signature(&self) -> InputSignature {
        InputSignature {
            features: self.features.clone(),
            labels: BTreeMap::new(),
        }
    }
}

fn collect_numeric(c: &FeatureColumn, out: &mut BTreeMap<String, FeatureKind>) {
    match c {
        FeatureColumn::Numeric { name, dim } => {
            out.insert(name.clone(), FeatureKind::Dense { dims: vec![*dim] });
        }
        FeatureColumn::Bucketized { source, .. } => collect_numeric(source, out),
        _ => {}
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExportManifest {
    pub format_version: u32,
    pub global_step: u64,
    pub feature_spec: BTreeMap<String, FeatureKind>,
    pub signature: Vec<OutputSignature>,
    pub columns: Vec<FeatureColumn>,
    #[serde(default)]
    pub model: Option<ModelDescriptor>,
    #[serde(default)]
    pub params: Params,
    #[serde(default)]
    pub seed: u64,
}

fn timestamp_millis() -> u128 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis())
        .unwrap_or(0)
}

/// Creates `base/<millis>`, bumping the stamp until the name is free.
fn fresh_export_dir(base: &Path) -> Result<PathBuf> {
    fs::create_dir_all(base)?;
    let mut stamp = timestamp_millis();
    loop {
        let dir = base.join(stamp.to_string());
        match fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => stamp += 1,
            Err(e) => return Err(e.into()),
        }
    }
}

pub(super) fn export(est: &Estimator, base: &Path, serving: &ServingInputSpec) -> Result<PathBuf> {
    let ckpt_path = est
        .latest_checkpoint()?
        .ok_or_else(|| Error::NoTrainedModel(est.model_dir().to_path_buf()))?;
    let ckpt = restore_checkpoint(&ckpt_path)?;
    let (mut g, spec) = est.build_graph(Mode::Predict, &serving.signature())?;
    ckpt.restore_into(&mut g)?;
    let manifest = ExportManifest {
        format_version: EXPORT_FORMAT_VERSION,
        global_step: ckpt.global_step,
        feature_spec: serving.features.clone(),
        signature: spec.export_outputs.clone(),
        columns: serving.columns.clone(),
        model: est.descriptor().cloned(),
        params: est.params().clone(),
        seed: est.config().seed,
    };
    // The directory only becomes visible once both files are complete.
    let staging = base.join(format!(
        ".staging-{}-{}",
        std::process::id(),
        timestamp_millis()
    ));
    fs::create_dir_all(&staging)?;
    save_checkpoint(&staging.join(VARIABLES_FILE), &Checkpoint::from_graph(&g))?;
    fs::write(
        staging.join(MANIFEST_FILE),
        serde_json::to_vec_pretty(&manifest)?,
    )?;
    let dir = fresh_export_dir(base)?;
    fs::remove_dir(&dir)?;
    if let Err(e) = fs::rename(&staging, &dir) {
        let _ = fs::remove_dir_all(&staging);
        return Err(e.into());
    }
    Ok(dir)
}

/// Serves predictions from an export directory.
pub struct ServingModel {
    ctx: ExecutionContext,
    names: Vec<String>,
    nodes: Vec<NodeId>,
    manifest: ExportManifest,
}

impl ServingModel {
    /// Rebuilds the model from the manifest's model description.
    pub fn load(dir: &Path) -> Result<ServingModel> {
        let manifest = read_manifest(dir)?;
        let desc = manifest.model.as_ref().ok_or_else(|| {
            Error::Config(format!(
                "export {} carries no model description; use load_with",
                dir.display()
            ))
        })?;
        let model_fn = crate::canned::model_fn_from_descriptor(desc)?;
        Self::load_with(dir, model_fn)
    }

    /// Rebuilds the model with an explicit model function.
    pub fn load_with(dir: &Path, model_fn: ModelFn) -> Result<ServingModel> {
        let manifest = read_manifest(dir)?;
        let signature = InputSignature {
            features: manifest.feature_spec.clone(),
            labels: BTreeMap::new(),
        };
        let (mut g, spec) = build_graph(
            &model_fn,
            &manifest.params,
            manifest.seed,
            Mode::Predict,
            &signature,
        )?;
        restore_checkpoint(&dir.join(VARIABLES_FILE))?.restore_into(&mut g)?;
        Ok(ServingModel {
            ctx: ExecutionContext::new(g),
            names: spec.predictions.keys().cloned().collect(),
            nodes: spec.predictions.values().copied().collect(),
            manifest,
        })
    }

    pub fn manifest(&self) -> &ExportManifest {
        &self.manifest
    }

    pub fn predict(&mut self, batch: &InputBatch) -> Result<Vec<PredictionMap>> {
        predict_batch(&mut self.ctx, &self.names, &self.nodes, batch)
    }
}

pub fn read_manifest(dir: &Path) -> Result<ExportManifest> {
    let bytes = fs::read(dir.join(MANIFEST_FILE))?;
    Ok(serde_json::from_slice(&bytes)?)
}
