//! JSON model artifact; numeric parameters are little-endian f32 in base64.

use std::collections::BTreeMap;
use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};

use super::{ClassifierKind, Detector, GaussianNb, LinearModel, Mahalanobis, NormMode, SoftKnn, SolverReport};
use crate::error::{Error, Result};
use crate::manifest::Label;
use crate::num::Scalar;

const FORMAT: &str = "clipforensics-model";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelArtifact {
    pub format: String,
    pub version: u32,
    pub kind: ClassifierKind,
    pub normalization: NormMode,
    pub feature_dim: usize,
    pub hyperparams: BTreeMap<String, serde_json::Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub solver_report: Option<SolverReport>,
    /// Parameter name to base64 f32 blob.
    pub params: BTreeMap<String, String>,
    /// Neighbor ids and labels for the k-NN store.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub neighbor_ids: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub neighbor_labels: Vec<Label>,
}

fn encode<T: Scalar>(values: impl IntoIterator<Item = T>) -> String {
    let bytes: Vec<u8> = values.into_iter().flat_map(|v| v.as_f32().to_le_bytes()).collect();
    STANDARD.encode(bytes)
}

impl ModelArtifact {
    pub fn from_detector<T: Scalar>(det: &Detector<T>) -> Self {
        let mut params = BTreeMap::new();
        let mut hyper = BTreeMap::new();
        let mut report = None;
        let (mut ids, mut labels) = (Vec::new(), Vec::new());
        match det {
            Detector::Svm(m) | Detector::Logistic(m) => {
                params.insert("weights".into(), encode(m.weights.iter().copied()));
                params.insert("bias".into(), encode([m.bias]));
                hyper.insert("c".into(), m.regularization_c.into());
                report = Some(m.solver_report);
            }
            Detector::Mahalanobis(m) => {
                params.insert("mean_real".into(), encode(m.mean_real.iter().copied()));
                params.insert("mean_fake".into(), encode(m.mean_fake.iter().copied()));
                params.insert("cholesky".into(), encode(m.cholesky.iter().copied()));
                hyper.insert("shrinkage".into(), m.shrinkage.into());
            }
            Detector::GaussianNb(m) => {
                params.insert("mean_real".into(), encode(m.mean_real.iter().copied()));
                params.insert("var_real".into(), encode(m.var_real.iter().copied()));
                params.insert("mean_fake".into(), encode(m.mean_fake.iter().copied()));
                params.insert("var_fake".into(), encode(m.var_fake.iter().copied()));
                hyper.insert("variance_floor".into(), m.variance_floor.into());
            }
            Detector::SoftKnn(m) => {
                params.insert("vectors".into(), encode(m.vectors.iter().flatten().copied()));
                hyper.insert("k".into(), m.k.into());
                hyper.insert("epsilon".into(), m.epsilon.into());
                ids = m.ids.clone();
                labels = m.labels.clone();
            }
        }
        ModelArtifact {
            format: FORMAT.into(),
            version: VERSION,
            kind: det.kind(),
            normalization: det.normalization(),
            feature_dim: det.feature_dim(),
            hyperparams: hyper,
            solver_report: report,
            params,
            neighbor_ids: ids,
            neighbor_labels: labels,
        }
    }

    fn param<T: Scalar>(&self, name: &str, len: Option<usize>) -> Result<Vec<T>> {
        let text = self.params.get(name).ok_or_else(|| Error::Config(format!("model lacks parameter {name:?}")))?;
        let bytes =
            STANDARD.decode(text).map_err(|e| Error::Config(format!("parameter {name:?} is not base64: {e}")))?;
        if bytes.len() % 4 != 0 {
            return Err(Error::Config(format!("parameter {name:?} has a truncated float")));
        }
        let values: Vec<T> =
            bytes.chunks_exact(4).map(|c| T::of(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)).collect();
        if let Some(len) = len {
            if values.len() != len {
                return Err(Error::DimensionMismatch { expected: len, got: values.len() });
            }
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("model parameter {name:?}")));
        }
        Ok(values)
    }

    fn hyper_f64(&self, name: &str) -> Result<f64> {
        self.hyperparams
            .get(name)
            .and_then(serde_json::Value::as_f64)
            .ok_or_else(|| Error::Config(format!("model lacks hyperparameter {name:?}")))
    }

    pub fn to_detector<T: Scalar>(&self) -> Result<Detector<T>> {
        if self.format != FORMAT || self.version != VERSION {
            return Err(Error::Config(format!("unsupported model format {} v{}", self.format, self.version)));
        }
        let d = self.feature_dim;
        let norm = self.normalization;
        Ok(match self.kind {
            ClassifierKind::Svm | ClassifierKind::LogisticRegression => {
                let m = LinearModel {
                    weights: self.param("weights", Some(d))?,
                    bias: self.param::<T>("bias", Some(1))?[0],
                    normalization: norm,
                    regularization_c: self.hyper_f64("c")?,
                    solver_report: self
                        .solver_report
                        .ok_or_else(|| Error::Config("linear model lacks a solver report".into()))?,
                };
                if self.kind == ClassifierKind::Svm {
                    Detector::Svm(m)
                } else {
                    Detector::Logistic(m)
                }
            }
            ClassifierKind::Mahalanobis => Detector::Mahalanobis(Mahalanobis {
                mean_real: self.param("mean_real", Some(d))?,
                mean_fake: self.param("mean_fake", Some(d))?,
                cholesky: self.param("cholesky", Some(d * d))?,
                shrinkage: self.hyper_f64("shrinkage")?,
                normalization: norm,
            }),
            ClassifierKind::GaussianNaiveBayes => Detector::GaussianNb(GaussianNb {
                mean_real: self.param("mean_real", Some(d))?,
                var_real: self.param("var_real", Some(d))?,
                mean_fake: self.param("mean_fake", Some(d))?,
                var_fake: self.param("var_fake", Some(d))?,
                variance_floor: self.hyper_f64("variance_floor")?,
                normalization: norm,
            }),
            ClassifierKind::SoftKnn => {
                let n = self.neighbor_ids.len();
                if self.neighbor_labels.len() != n || n == 0 {
                    return Err(Error::Config("k-NN store ids and labels disagree".into()));
                }
                let flat: Vec<T> = self.param("vectors", Some(n * d))?;
                Detector::SoftKnn(SoftKnn {
                    vectors: flat.chunks(d.max(1)).map(<[T]>::to_vec).collect(),
                    labels: self.neighbor_labels.clone(),
                    ids: self.neighbor_ids.clone(),
                    k: self.hyper_f64("k")? as usize,
                    epsilon: self.hyper_f64("epsilon")?,
                    normalization: norm,
                })
            }
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }
}
