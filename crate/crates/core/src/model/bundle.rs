use std::fs::File;
use std::io::{BufReader, BufWriter, Read};
use std::path::Path;

use safetensors::tensor::TensorView;
use safetensors::{Dtype, SafeTensors};
use serde::{Deserialize, Serialize};

use super::pretrained::tensor_to_f64;
use super::{build, ModelError, Network, NetworkSpec};
use crate::dataset::{AgeBounds, AngleScale};
use crate::nn::ParamKind;
use crate::preprocess::ModelInput;

pub const BUNDLE_FORMAT_VERSION: u32 = 1;

const MANIFEST: &str = "manifest.json";
const WEIGHTS: &str = "weights.safetensors";

/// A network plus the constants needed to turn its outputs into degrees.
#[derive(Debug, Clone)]
pub struct ModelBundle {
    pub network: Network,
    /// Training-split maximum angle; `None` until training has set it.
    pub angle_scale: Option<AngleScale>,
    pub age_bounds: AgeBounds,
    /// Hex digest of the resolved configuration that produced the weights.
    pub config_digest: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
    kind: ParamKind,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    network: NetworkSpec,
    angle_max: Option<f64>,
    age_bounds: AgeBounds,
    config_digest: String,
    params: Vec<ParamEntry>,
}

impl ModelBundle {
    pub fn new(spec: NetworkSpec, age_bounds: AgeBounds) -> Result<Self, ModelError> {
        Ok(Self {
            network: build(spec)?,
            angle_scale: None,
            age_bounds,
            config_digest: String::new(),
        })
    }

    /// Normalized `(right, left)` outputs in evaluation mode.
    pub fn forward(&self, batch: &[ModelInput]) -> Result<Vec<[f64; 2]>, ModelError> {
        self.network.forward(batch)
    }

    /// `(right_deg, left_deg)` per input.
    pub fn predict_degrees(&self, batch: &[ModelInput]) -> Result<Vec<(f64, f64)>, ModelError> {
        let scale = self
            .angle_scale
            .ok_or_else(|| ModelError::Integrity("bundle carries no angle_max".into()))?;
        Ok(self
            .forward(batch)?
            .into_iter()
            .map(|[r, l]| scale.denormalize(r, l))
            .collect())
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        let params = self.network.params();
        let manifest = Manifest {
            format_version: BUNDLE_FORMAT_VERSION,
            network: self.network.spec().clone(),
            angle_max: self.angle_scale.map(AngleScale::value),
            age_bounds: self.age_bounds,
            config_digest: self.config_digest.clone(),
            params: params
                .iter()
                .map(|p| ParamEntry {
                    name: p.name.clone(),
                    shape: p.shape.clone(),
                    kind: p.kind,
                })
                .collect(),
        };
        let manifest = serde_json::to_vec_pretty(&manifest).map_err(|e| ModelError::Corrupt(e.to_string()))?;

        let bytes: Vec<Vec<u8>> = params
            .iter()
            .map(|p| p.data.iter().flat_map(|v| v.to_le_bytes()).collect())
            .collect();
        let views = params
            .iter()
            .zip(&bytes)
            .map(|(p, b)| {
                TensorView::new(Dtype::F64, p.shape.clone(), b)
                    .map(|v| (p.name.clone(), v))
                    .map_err(|e| ModelError::Corrupt(e.to_string()))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let weights = safetensors::serialize(views, None).map_err(|e| ModelError::Corrupt(e.to_string()))?;

        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let mut builder = tar::Builder::new(BufWriter::new(File::create(path)?));
        for (name, data) in [(MANIFEST, manifest.as_slice()), (WEIGHTS, weights.as_slice())] {
            let mut header = tar::Header::new_gnu();
            header.set_size(data.len() as u64);
            header.set_mode(0o644);
            header.set_mtime(0);
            header.set_cksum();
            builder.append_data(&mut header, name, data)?;
        }
        builder.into_inner()?.into_inner().map_err(|e| e.into_error())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let corrupt = |m: String| ModelError::Corrupt(format!("{}: {m}", path.display()));
        let mut archive = tar::Archive::new(BufReader::new(File::open(path)?));
        let (mut manifest, mut weights) = (None, None);
        for entry in archive.entries().map_err(|e| corrupt(e.to_string()))? {
            let mut entry = entry.map_err(|e| corrupt(e.to_string()))?;
            let name = entry.path().map_err(|e| corrupt(e.to_string()))?.to_string_lossy().into_owned();
            let mut buf = Vec::new();
            entry.read_to_end(&mut buf).map_err(|e| corrupt(e.to_string()))?;
            match name.as_str() {
                MANIFEST => manifest = Some(buf),
                WEIGHTS => weights = Some(buf),
                _ => {}
            }
        }
        let manifest = manifest.ok_or_else(|| corrupt(format!("missing {MANIFEST}")))?;
        let weights = weights.ok_or_else(|| corrupt(format!("missing {WEIGHTS}")))?;

        let raw: serde_json::Value = serde_json::from_slice(&manifest).map_err(|e| corrupt(e.to_string()))?;
        let found = raw.get("format_version").and_then(|v| v.as_u64()).ok_or_else(|| corrupt("no format_version".into()))?;
        if found != u64::from(BUNDLE_FORMAT_VERSION) {
            return Err(ModelError::VersionMismatch {
                found: found as u32,
                expected: BUNDLE_FORMAT_VERSION,
            });
        }
        let manifest: Manifest = serde_json::from_value(raw).map_err(|e| corrupt(e.to_string()))?;
        let angle_scale = manifest
            .angle_max
            .map(AngleScale::new)
            .transpose()
            .map_err(|e| ModelError::Integrity(e.to_string()))?;

        // Weights come from the file, so skip any pretrained-path loading.
        let mut network = Network::new(manifest.network)?;
        let tensors = SafeTensors::deserialize(&weights).map_err(|e| corrupt(e.to_string()))?;
        if manifest.params.len() != network.params().len() || tensors.len() != network.params().len() {
            return Err(ModelError::Integrity("parameter count does not match the architecture".into()));
        }
        for (entry, param) in manifest.params.iter().zip(network.params_mut().iter_mut()) {
            if entry.name != param.name || entry.shape != param.shape || entry.kind != param.kind {
                return Err(ModelError::Integrity(format!("parameter {} does not match the architecture", entry.name)));
            }
            let view = tensors
                .tensor(&entry.name)
                .map_err(|e| ModelError::Integrity(format!("{}: {e}", entry.name)))?;
            if view.shape() != param.shape.as_slice() {
                return Err(ModelError::Integrity(format!("{}: stored shape {:?}", entry.name, view.shape())));
            }
            param.data = tensor_to_f64(&view).map_err(|e| ModelError::Integrity(format!("{}: {e}", entry.name)))?;
        }
        Ok(Self {
            network,
            angle_scale,
            age_bounds: manifest.age_bounds,
            config_digest: manifest.config_digest,
        })
    }
}
