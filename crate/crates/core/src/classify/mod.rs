//! The linear SVM detector and the ablation classifiers, all producing
//! scores in `[0, 1]` with 0.5 as the decision threshold.

mod artifact;
mod gaussian;
mod knn;
mod logistic;
mod svm;

use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use artifact::ModelArtifact;
pub use gaussian::{GaussianNb, Mahalanobis, Shrinkage};
pub use knn::SoftKnn;
pub use logistic::{train_logistic, LogisticProblem};
pub use svm::{train_svm, SvmProblem};

use crate::error::{Error, Result};
use crate::manifest::Label;
use crate::num::{dot, sigmoid, Scalar};
use crate::refset::ReferenceSet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormMode {
    /// Scale every vector to unit Euclidean norm.
    #[default]
    L2Unit,
    None,
}

impl FromStr for NormMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "l2_unit" => Ok(NormMode::L2Unit),
            "none" => Ok(NormMode::None),
            other => Err(Error::Config(format!("unknown normalization {other:?}"))),
        }
    }
}

impl NormMode {
    /// Applies the normalization. Unit-norm output is rounded to `f32`
    /// precision, which makes scores invariant to positive rescaling of the
    /// input. Zero vectors stay zero.
    pub fn apply<T: Scalar>(self, x: &[T]) -> Vec<T> {
        match self {
            NormMode::None => x.to_vec(),
            NormMode::L2Unit => {
                let norm = x.iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>().sqrt();
                if norm == 0.0 {
                    return vec![T::zero(); x.len()];
                }
                x.iter().map(|v| T::of((v.as_f64() / norm) as f32 as f64)).collect()
            }
        }
    }
}

/// Labeled rows used to fit a classifier. Labels map to `-1` (real) and `+1` (fake).
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSet<T> {
    pub rows: Vec<Vec<T>>,
    pub labels: Vec<Label>,
    /// Record ids, used for deterministic tie-breaking.
    pub ids: Vec<String>,
}

impl<T: Scalar> TrainingSet<T> {
    pub fn new(rows: Vec<Vec<T>>, labels: Vec<Label>) -> Result<Self> {
        let ids = (0..rows.len()).map(|i| format!("{i:08}")).collect();
        TrainingSet::with_ids(rows, labels, ids)
    }

    pub fn with_ids(rows: Vec<Vec<T>>, labels: Vec<Label>, ids: Vec<String>) -> Result<Self> {
        if rows.len() != labels.len() || rows.len() != ids.len() {
            return Err(Error::Config("rows, labels and ids differ in length".into()));
        }
        let set = TrainingSet { rows, labels, ids };
        set.validate()?;
        Ok(set)
    }

    pub fn from_refset(refset: &ReferenceSet) -> Result<Self> {
        let mut rows = Vec::with_capacity(2 * refset.n());
        let mut labels = Vec::with_capacity(2 * refset.n());
        let mut ids = Vec::with_capacity(2 * refset.n());
        for (label, vectors, vids) in [
            (Label::Real, &refset.real_vectors, &refset.real_ids),
            (Label::Fake, &refset.fake_vectors, &refset.fake_ids),
        ] {
            for (v, id) in vectors.iter().zip(vids) {
                rows.push(v.values.iter().map(|&x| T::of(x as f64)).collect());
                labels.push(label);
                ids.push(id.clone());
            }
        }
        TrainingSet::with_ids(rows, labels, ids)
    }

    fn validate(&self) -> Result<()> {
        let dim = self.dim();
        if dim == 0 {
            return Err(Error::Empty("training rows have no features"));
        }
        if let Some(r) = self.rows.iter().find(|r| r.len() != dim) {
            return Err(Error::DimensionMismatch { expected: dim, got: r.len() });
        }
        if self.rows.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("training features".into()));
        }
        if !self.labels.contains(&Label::Real) || !self.labels.contains(&Label::Fake) {
            return Err(Error::SingleClass("training needs at least one real and one fake row"));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.rows.first().map_or(0, Vec::len)
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn count(&self, label: Label) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }

    pub(crate) fn normalized(&self, norm: NormMode) -> Vec<Vec<T>> {
        self.rows.iter().map(|r| norm.apply(r)).collect()
    }

    /// `+1` for fake, `-1` for real.
    pub(crate) fn signs(&self) -> Vec<T> {
        self.labels.iter().map(|l| T::of(l.sign() as f64)).collect()
    }
}

/// Optimizer diagnostics carried in every linear model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverReport {
    pub iterations: usize,
    pub objective: f64,
    /// Final primal-dual gap (SVM).
    pub duality_gap: Option<f64>,
    /// Final gradient norm (logistic regression).
    pub gradient_norm: Option<f64>,
    /// `false` when the iteration cap was hit first.
    pub converged: bool,
}

/// Logistic link with strict ordering around zero: positive margins score
/// above 0.5 and negative margins below, even where the sigmoid rounds to 0.5.
pub fn margin_to_score<T: Scalar>(margin: T) -> T {
    let half = T::of(0.5);
    let s = sigmoid(margin);
    if margin > T::zero() && s <= half {
        half + T::epsilon() / T::of(2.0)
    } else if margin < T::zero() && s >= half {
        half - T::epsilon() / T::of(4.0)
    } else {
        s
    }
}

/// Hyperplane classifier shared by the SVM and logistic regression.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearModel<T> {
    pub weights: Vec<T>,
    pub bias: T,
    pub normalization: NormMode,
    pub regularization_c: f64,
    pub solver_report: SolverReport,
}

impl<T: Scalar> LinearModel<T> {
    pub fn feature_dim(&self) -> usize {
        self.weights.len()
    }

    /// Raw signed distance proxy `w . x + b` on the normalized input.
    pub fn margin(&self, x: &[T]) -> Result<T> {
        check_dim(self.weights.len(), x.len())?;
        Ok(dot(&self.weights, &self.normalization.apply(x)) + self.bias)
    }

    pub fn score(&self, x: &[T]) -> Result<T> {
        Ok(margin_to_score(self.margin(x)?))
    }
}

pub(crate) fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::DimensionMismatch { expected, got });
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassifierKind {
    Svm,
    LogisticRegression,
    Mahalanobis,
    GaussianNaiveBayes,
    SoftKnn,
}

impl FromStr for ClassifierKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "svm" => ClassifierKind::Svm,
            "logistic_regression" | "logistic" => ClassifierKind::LogisticRegression,
            "mahalanobis" => ClassifierKind::Mahalanobis,
            "gaussian_naive_bayes" | "gnb" => ClassifierKind::GaussianNaiveBayes,
            "soft_knn" | "knn" => ClassifierKind::SoftKnn,
            other => return Err(Error::Config(format!("unknown classifier {other:?}"))),
        })
    }
}

/// Classifier choice and every hyperparameter. Defaults: `c = 1`,
/// `tol = 1e-4`, automatic shrinkage, variance floor `1e-9`,
/// `k = ceil(sqrt(2N))`, `epsilon = 1e-12`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifierSpec {
    pub kind: ClassifierKind,
    pub normalization: NormMode,
    pub c: f64,
    pub tol: f64,
    pub max_epochs: usize,
    pub shrinkage: Shrinkage,
    pub variance_floor: f64,
    pub k: Option<usize>,
    pub epsilon: f64,
    pub seed: u64,
}

impl Default for ClassifierSpec {
    fn default() -> Self {
        ClassifierSpec {
            kind: ClassifierKind::Svm,
            normalization: NormMode::L2Unit,
            c: 1.0,
            tol: 1e-4,
            max_epochs: 1_000_000,
            shrinkage: Shrinkage::Auto,
            variance_floor: 1e-9,
            k: None,
            epsilon: 1e-12,
            seed: 0,
        }
    }
}

impl ClassifierSpec {
    pub fn of(kind: ClassifierKind) -> Self {
        let mut spec = ClassifierSpec { kind, ..Default::default() };
        if kind == ClassifierKind::LogisticRegression {
            spec.tol = 1e-6;
        }
        spec
    }
}

/// Any trained classifier.
#[derive(Debug, Clone, PartialEq)]
pub enum Detector<T> {
    Svm(LinearModel<T>),
    Logistic(LinearModel<T>),
    Mahalanobis(Mahalanobis<T>),
    GaussianNb(GaussianNb<T>),
    SoftKnn(SoftKnn<T>),
}

impl<T: Scalar> Detector<T> {
    pub fn kind(&self) -> ClassifierKind {
        match self {
            Detector::Svm(_) => ClassifierKind::Svm,
            Detector::Logistic(_) => ClassifierKind::LogisticRegression,
            Detector::Mahalanobis(_) => ClassifierKind::Mahalanobis,
            Detector::GaussianNb(_) => ClassifierKind::GaussianNaiveBayes,
            Detector::SoftKnn(_) => ClassifierKind::SoftKnn,
        }
    }

    pub fn feature_dim(&self) -> usize {
        match self {
            Detector::Svm(m) | Detector::Logistic(m) => m.feature_dim(),
            Detector::Mahalanobis(m) => m.feature_dim(),
            Detector::GaussianNb(m) => m.feature_dim(),
            Detector::SoftKnn(m) => m.feature_dim(),
        }
    }

    pub fn normalization(&self) -> NormMode {
        match self {
            Detector::Svm(m) | Detector::Logistic(m) => m.normalization,
            Detector::Mahalanobis(m) => m.normalization,
            Detector::GaussianNb(m) => m.normalization,
            Detector::SoftKnn(m) => m.normalization,
        }
    }

    /// Probability-like score that `x` is fake.
    pub fn predict_score(&self, x: &[T]) -> Result<T> {
        match self {
            Detector::Svm(m) | Detector::Logistic(m) => m.score(x),
            Detector::Mahalanobis(m) => m.score(x),
            Detector::GaussianNb(m) => m.score(x),
            Detector::SoftKnn(m) => m.score(x),
        }
    }

    /// Scores f32 embeddings.
    pub fn score_embedding(&self, x: &[f32]) -> Result<T> {
        let v: Vec<T> = x.iter().map(|&a| T::of(a as f64)).collect();
        self.predict_score(&v)
    }
}

/// Fits the classifier named by `spec`.
pub fn fit<T: Scalar>(data: &TrainingSet<T>, spec: &ClassifierSpec) -> Result<Detector<T>> {
    Ok(match spec.kind {
        ClassifierKind::Svm => {
            Detector::Svm(train_svm(data, spec.c, spec.normalization, spec.tol, spec.seed, spec.max_epochs)?)
        }
        ClassifierKind::LogisticRegression => Detector::Logistic(train_logistic(
            data,
            spec.c,
            spec.normalization,
            spec.tol,
            spec.max_epochs.min(100_000),
        )?),
        ClassifierKind::Mahalanobis => {
            Detector::Mahalanobis(Mahalanobis::fit(data, spec.shrinkage, spec.normalization)?)
        }
        ClassifierKind::GaussianNaiveBayes => {
            Detector::GaussianNb(GaussianNb::fit(data, spec.variance_floor, spec.normalization)?)
        }
        ClassifierKind::SoftKnn => Detector::SoftKnn(SoftKnn::fit(data, spec.k, spec.epsilon, spec.normalization)?),
    })
}
