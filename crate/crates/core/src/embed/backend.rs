use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use image::RgbImage;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tract_onnx::pb;
use tract_onnx::prelude::*;

use super::preprocess::{preprocess, PixelTensor, PreprocessSpec};
use super::{CacheKey, EmbeddingVector};
use crate::error::{Error, Result};

/// Graph input holding the preprocessed batch.
pub const INPUT_NAME: &str = "pixel_values";

/// Which encoder output is used as the feature vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tap {
    /// Transformer output before the joint-space projection.
    Penultimate,
    /// Projected joint-space embedding.
    Final,
}

impl Tap {
    pub fn output_name(self) -> &'static str {
        match self {
            Tap::Penultimate => "features_penultimate",
            Tap::Final => "features_final",
        }
    }
}

impl fmt::Display for Tap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Tap::Penultimate => "penultimate",
            Tap::Final => "final",
        })
    }
}

impl FromStr for Tap {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "penultimate" => Ok(Tap::Penultimate),
            "final" => Ok(Tap::Final),
            other => Err(Error::Config(format!("unknown tap {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TapDims {
    pub penultimate: usize,
    #[serde(rename = "final")]
    pub final_: usize,
}

impl TapDims {
    pub fn get(&self, tap: Tap) -> usize {
        match tap {
            Tap::Penultimate => self.penultimate,
            Tap::Final => self.final_,
        }
    }
}

/// `<name>.export.json`, written next to the exported graph.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportManifest {
    pub checkpoint: String,
    pub pretrain_tag: String,
    pub graph: PathBuf,
    pub preprocess: PreprocessSpec,
    pub dims: TapDims,
    #[serde(default)]
    pub fixtures: Vec<PathBuf>,
}

impl ExportManifest {
    /// Loads the manifest, resolving relative paths against its directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut m: ExportManifest = serde_json::from_slice(&fs::read(path)?)?;
        let base = path.parent().unwrap_or(Path::new("."));
        m.graph = base.join(&m.graph);
        m.fixtures = m.fixtures.iter().map(|f| base.join(f)).collect();
        m.preprocess.validate()?;
        Ok(m)
    }
}

/// Output widths declared by the graph itself.
pub fn declared_dims(graph_path: &Path) -> Result<TapDims> {
    let proto = tract_onnx::onnx()
        .proto_model_for_path(graph_path)
        .map_err(|e| Error::Backend(format!("reading {}: {e}", graph_path.display())))?;
    declared_dims_of(&proto)
}

fn declared_dims_of(proto: &pb::ModelProto) -> Result<TapDims> {
    let graph = proto.graph.as_ref().ok_or_else(|| Error::Backend("model has no graph".into()))?;
    let width = |name: &str| -> Result<usize> {
        let out = graph
            .output
            .iter()
            .find(|o| o.name == name)
            .ok_or_else(|| Error::Backend(format!("graph has no output named {name}")))?;
        let shape = match out.r#type.as_ref().and_then(|t| t.value.as_ref()) {
            Some(pb::type_proto::Value::TensorType(t)) => t.shape.as_ref(),
            None => None,
        };
        let last = shape.and_then(|s| s.dim.last()).and_then(|d| d.value.as_ref());
        match last {
            Some(pb::tensor_shape_proto::dimension::Value::DimValue(v)) if *v > 0 => Ok(*v as usize),
            _ => Err(Error::Backend(format!("output {name} does not declare a static feature width"))),
        }
    };
    Ok(TapDims { penultimate: width(Tap::Penultimate.output_name())?, final_: width(Tap::Final.output_name())? })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendConfig {
    pub graph_path: PathBuf,
    pub tap: Tap,
    pub feature_dim: usize,
    pub pretrain_tag: String,
}

/// Stable identity of a backend, folded into every cache key.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BackendId(pub [u8; 32]);

impl BackendId {
    pub fn hex(&self) -> String {
        hex::encode(self.0)
    }
}

impl BackendConfig {
    /// Builds the config from an export manifest; the feature width comes from the graph.
    pub fn from_export(manifest: &ExportManifest, tap: Tap) -> Result<Self> {
        let declared = declared_dims(&manifest.graph)?;
        if declared != manifest.dims {
            return Err(Error::Backend(format!(
                "graph declares {declared:?} but export manifest says {:?}",
                manifest.dims
            )));
        }
        Ok(BackendConfig {
            graph_path: manifest.graph.clone(),
            tap,
            feature_dim: declared.get(tap),
            pretrain_tag: manifest.pretrain_tag.clone(),
        })
    }

    /// Derived from the graph file name, pre-training tag, tap and width; does not
    /// touch the graph file, so cache-only runs can compute it.
    pub fn id(&self) -> BackendId {
        let name = self.graph_path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        let mut h = Sha256::new();
        h.update(b"backend-v1\0");
        h.update(name.as_bytes());
        h.update(b"\0");
        h.update(self.pretrain_tag.as_bytes());
        h.update(b"\0");
        h.update(self.tap.to_string().as_bytes());
        h.update(self.feature_dim.to_le_bytes());
        BackendId(h.finalize().into())
    }
}

/// A loaded encoder graph, restricted to one feature tap.
///
/// Inference goes through an immutable plan, so one `Encoder` may be shared
/// across threads.
#[derive(Clone)]
pub struct Encoder {
    config: BackendConfig,
    spec: PreprocessSpec,
    plan: Arc<TypedRunnableModel>,
}

impl fmt::Debug for Encoder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Encoder").field("config", &self.config).field("spec", &self.spec).finish()
    }
}

impl Encoder {
    pub fn load(config: BackendConfig, spec: PreprocessSpec) -> Result<Self> {
        spec.validate()?;
        let proto = tract_onnx::onnx()
            .proto_model_for_path(&config.graph_path)
            .map_err(|e| Error::Backend(format!("reading {}: {e}", config.graph_path.display())))?;
        let declared = declared_dims_of(&proto)?.get(config.tap);
        if declared != config.feature_dim {
            return Err(Error::Backend(format!(
                "tap {} declares width {declared}, config says {}",
                config.tap, config.feature_dim
            )));
        }
        let side = spec.target_side as usize;
        let plan = tract_onnx::onnx()
            .model_for_proto_model(&proto)
            .and_then(|m| m.with_input_fact(0, f32::fact([1, 3, side, side]).into()))
            .and_then(|m| m.with_outputs_by_name([config.tap.output_name()]))
            .and_then(|m| m.into_optimized())
            .and_then(|m| m.into_runnable())
            .map_err(|e| {
                Error::Backend(format!("preparing {} for tap {}: {e:#}", config.graph_path.display(), config.tap))
            })?;
        Ok(Encoder { config, spec, plan })
    }

    /// Loads from an export manifest with its bundled preprocessing.
    pub fn from_export(manifest: &ExportManifest, tap: Tap) -> Result<Self> {
        Encoder::load(BackendConfig::from_export(manifest, tap)?, manifest.preprocess.clone())
    }

    pub fn config(&self) -> &BackendConfig {
        &self.config
    }

    pub fn spec(&self) -> &PreprocessSpec {
        &self.spec
    }

    pub fn feature_dim(&self) -> usize {
        self.config.feature_dim
    }

    /// Runs the graph on an already preprocessed tensor.
    pub fn run_tensor(&self, tensor: &PixelTensor) -> Result<Vec<f32>> {
        let side = tensor.side;
        let input = Tensor::from_shape(&[1, 3, side, side], &tensor.data)
            .map_err(|e| Error::Backend(format!("building {INPUT_NAME}: {e}")))?;
        let out = self
            .plan
            .run(tvec!(input.into()))
            .map_err(|e| Error::Backend(format!("running tap {}: {e:#}", self.config.tap)))?;
        let view = out[0]
            .to_plain_array_view::<f32>()
            .map_err(|e| Error::Backend(format!("reading {}: {e}", self.config.tap.output_name())))?;
        let values: Vec<f32> = view.iter().copied().collect();
        if values.len() != self.config.feature_dim {
            return Err(Error::DimensionMismatch { expected: self.config.feature_dim, got: values.len() });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("output of tap {}", self.config.tap)));
        }
        Ok(values)
    }

    /// Preprocesses and embeds one image.
    pub fn extract(&self, image: &RgbImage) -> Result<EmbeddingVector> {
        let tensor = preprocess(image, &self.spec)?;
        let values = self.run_tensor(&tensor)?;
        Ok(EmbeddingVector { key: CacheKey::for_image(image, &self.spec, self.config.id()), values })
    }
}
