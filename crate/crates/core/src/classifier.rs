//! One-vs-rest linear SVM over frozen features.
//!
//! Each label gets a binary L2-regularized hinge-loss separator (label vs.
//! rest) solved in the dual by coordinate descent. The bias is folded in as a
//! constant augmented feature, so it is regularized along with the weights and
//! the dual has box constraints only. Decision scores are turned into
//! probabilities with a plain softmax and into integer percentages with a
//! largest-remainder rounding that always sums to 100.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::Millis;
use crate::dataset::TrainingDataset;
use crate::features::{FeatureExtractor, FeatureVector};

/// Value of the constant feature standing in for the intercept.
pub const BIAS_FEATURE: f64 = 1.0;
/// Seed for the coordinate visiting order.
pub const SHUFFLE_SEED: u64 = 0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ClassifierError {
    #[error("training needs at least 2 non-empty categories, found {0}")]
    InsufficientCategories(usize),
    #[error("feature dimension {got} does not match model dimension {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("model was trained with extractor {model:?} but {available:?} is loaded")]
    ExtractorMismatch { model: String, available: String },
    #[error("image {index} of {category:?} failed feature extraction: {reason}")]
    Extraction {
        category: String,
        index: usize,
        reason: String,
    },
    #[error("image could not be decoded: {0}")]
    UndecodableImage(String),
    #[error("invalid hyperparameters: {0}")]
    InvalidHyperparams(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    pub c: f64,
    pub tolerance: f64,
    pub max_iter: usize,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self {
            c: 1.0,
            tolerance: 1e-4,
            max_iter: 10_000,
        }
    }
}

impl Hyperparams {
    fn validate(&self) -> Result<(), ClassifierError> {
        if !(self.c > 0.0 && self.c.is_finite()) {
            return Err(ClassifierError::InvalidHyperparams(format!("C = {}", self.c)));
        }
        if !(self.tolerance > 0.0) {
            return Err(ClassifierError::InvalidHyperparams(format!(
                "tolerance = {}",
                self.tolerance
            )));
        }
        if self.max_iter == 0 {
            return Err(ClassifierError::InvalidHyperparams("max_iter = 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BinarySolution {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub alphas: Vec<f64>,
    pub sweeps: usize,
    pub converged: bool,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Dual value `sum(alpha) - |w~|^2 / 2` for the augmented weight vector.
fn dual_objective(alphas: &[f64], weights: &[f64], bias: f64) -> f64 {
    alphas.iter().sum::<f64>() - 0.5 * (dot(weights, weights) + bias * bias)
}

/// Solves `min 1/2 |w~|^2 + C sum hinge(y_i w~.x~_i)` with `x~ = (x, 1)`
/// by dual coordinate descent. `labels` must be ±1.
pub fn solve_binary(
    samples: &[&[f64]],
    labels: &[f64],
    params: &Hyperparams,
    seed: u64,
) -> BinarySolution {
    assert_eq!(samples.len(), labels.len());
    let n = samples.len();
    let dim = samples.first().map_or(0, |s| s.len());
    let mut weights = vec![0.0; dim];
    let mut bias = 0.0;
    let mut alphas = vec![0.0; n];
    let diag: Vec<f64> = samples
        .iter()
        .map(|x| dot(x, x) + BIAS_FEATURE * BIAS_FEATURE)
        .collect();
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sweeps = 0;
    let mut converged = false;
    let mut last_dual = f64::NEG_INFINITY;

    while sweeps < params.max_iter {
        order.shuffle(&mut rng);
        let mut pg_max = f64::NEG_INFINITY;
        let mut pg_min = f64::INFINITY;
        for &i in &order {
            let x = samples[i];
            let y = labels[i];
            let grad = y * (dot(&weights, x) + bias * BIAS_FEATURE) - 1.0;
            let projected = if alphas[i] <= 0.0 {
                grad.min(0.0)
            } else if alphas[i] >= params.c {
                grad.max(0.0)
            } else {
                grad
            };
            pg_max = pg_max.max(projected);
            pg_min = pg_min.min(projected);
            if projected.abs() > 1e-12 {
                let old = alphas[i];
                alphas[i] = (old - grad / diag[i]).clamp(0.0, params.c);
                let step = (alphas[i] - old) * y;
                weights.iter_mut().zip(x).for_each(|(w, xv)| *w += step * xv);
                bias += step * BIAS_FEATURE;
            }
        }
        sweeps += 1;
        if cfg!(debug_assertions) {
            let d = dual_objective(&alphas, &weights, bias);
            debug_assert!(
                d >= last_dual - 1e-9 * (1.0 + last_dual.abs()),
                "dual objective decreased: {last_dual} -> {d}"
            );
            last_dual = d;
        }
        if pg_max - pg_min <= params.tolerance {
            converged = true;
            break;
        }
    }

    BinarySolution {
        weights,
        bias,
        alphas,
        sweeps,
        converged,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierModel {
    pub labels: Vec<String>,
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<f64>,
    pub hyperparams: Hyperparams,
    pub extractor_id: String,
    pub dim: usize,
    pub trained_at: Millis,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSummary {
    pub labels: Vec<String>,
    pub samples_per_label: Vec<usize>,
    /// Categories left out because they had no images.
    pub excluded_empty: Vec<String>,
    pub training_accuracy: f64,
    pub converged: bool,
}

/// Decision scores, calibrated probabilities and rounded percentages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub labels: Vec<String>,
    pub scores: Vec<f64>,
    pub probabilities: Vec<f64>,
    pub percentages: Vec<u32>,
    pub top_label: String,
}

impl Prediction {
    pub fn percent_of(&self, label: &str) -> Option<u32> {
        self.labels
            .iter()
            .position(|l| l == label)
            .map(|i| self.percentages[i])
    }
}

/// A stored evaluation of one test image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceResult {
    pub id: String,
    pub prediction: Prediction,
    /// SHA-256 of the evaluated image file bytes.
    pub image_digest: String,
    pub image_mime: String,
    pub created_at: Millis,
}

pub fn softmax(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.iter().map(|e| e / total).collect()
}

/// Rounds a probability simplex to integer percentages summing to exactly
/// 100. Leftover points go to the largest fractional parts, lower index first
/// on ties.
pub fn largest_remainder_percentages(probabilities: &[f64]) -> Vec<u32> {
    let scaled: Vec<f64> = probabilities.iter().map(|p| p.max(0.0) * 100.0).collect();
    let mut out: Vec<u32> = scaled.iter().map(|s| s.floor() as u32).collect();
    let assigned: u32 = out.iter().sum();
    let mut by_remainder: Vec<usize> = (0..scaled.len()).collect();
    by_remainder.sort_by(|&a, &b| {
        let ra = scaled[a] - scaled[a].floor();
        let rb = scaled[b] - scaled[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in by_remainder.iter().take(100u32.saturating_sub(assigned) as usize) {
        out[i] += 1;
    }
    out
}

fn argmax(values: &[f64]) -> usize {
    values
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| {
            if v > bv {
                (i, v)
            } else {
                (bi, bv)
            }
        })
        .0
}

impl ClassifierModel {
    /// Trains one separator per label. `samples` pairs a label index with a
    /// feature vector and is used in the given order.
    pub fn train_on_features(
        labels: Vec<String>,
        samples: &[(usize, Vec<f64>)],
        hyperparams: Hyperparams,
        extractor_id: impl Into<String>,
        trained_at: Millis,
    ) -> Result<(Self, bool), ClassifierError> {
        hyperparams.validate()?;
        let present = labels
            .iter()
            .enumerate()
            .filter(|(k, _)| samples.iter().any(|(l, _)| l == k))
            .count();
        if labels.len() < 2 || present < 2 {
            return Err(ClassifierError::InsufficientCategories(present));
        }
        let dim = samples[0].1.len();
        if let Some((_, bad)) = samples.iter().find(|(_, x)| x.len() != dim) {
            return Err(ClassifierError::DimensionMismatch {
                expected: dim,
                got: bad.len(),
            });
        }
        let xs: Vec<&[f64]> = samples.iter().map(|(_, x)| x.as_slice()).collect();
        let mut weights = Vec::with_capacity(labels.len());
        let mut biases = Vec::with_capacity(labels.len());
        let mut converged = true;
        for k in 0..labels.len() {
            let ys: Vec<f64> = samples
                .iter()
                .map(|(l, _)| if *l == k { 1.0 } else { -1.0 })
                .collect();
            let sol = solve_binary(&xs, &ys, &hyperparams, SHUFFLE_SEED);
            converged &= sol.converged;
            weights.push(sol.weights);
            biases.push(sol.bias * BIAS_FEATURE);
        }
        Ok((
            Self {
                labels,
                weights,
                biases,
                hyperparams,
                extractor_id: extractor_id.into(),
                dim,
                trained_at,
            },
            converged,
        ))
    }

    /// Extracts features for every image of every non-empty category and
    /// trains on them. Empty categories are skipped and reported.
    pub fn train(
        dataset: &TrainingDataset,
        extractor: &dyn FeatureExtractor,
        hyperparams: Hyperparams,
        trained_at: Millis,
    ) -> Result<(Self, TrainingSummary), ClassifierError> {
        let mut labels = Vec::new();
        let mut excluded_empty = Vec::new();
        let mut samples = Vec::new();
        let mut samples_per_label = Vec::new();
        for cat in dataset.categories() {
            if cat.is_empty() {
                excluded_empty.push(cat.name.clone());
                continue;
            }
            let k = labels.len();
            labels.push(cat.name.clone());
            samples_per_label.push(cat.images.len());
            for (index, image_ref) in cat.images.iter().enumerate() {
                let bytes = dataset.image_bytes(&image_ref.id).ok_or_else(|| {
                    ClassifierError::Extraction {
                        category: cat.name.clone(),
                        index,
                        reason: "image bytes missing".into(),
                    }
                })?;
                let fv = extractor
                    .extract(&bytes)
                    .map_err(|e| ClassifierError::Extraction {
                        category: cat.name.clone(),
                        index,
                        reason: e.to_string(),
                    })?;
                samples.push((k, fv.values));
            }
        }
        if labels.len() < 2 {
            return Err(ClassifierError::InsufficientCategories(labels.len()));
        }
        let (model, converged) = Self::train_on_features(
            labels.clone(),
            &samples,
            hyperparams,
            extractor.spec().extractor_id.clone(),
            trained_at,
        )?;
        let correct = samples
            .iter()
            .filter(|(k, x)| {
                let scores = model.decision_scores(x).expect("dimension checked");
                argmax(&scores) == *k
            })
            .count();
        let summary = TrainingSummary {
            labels,
            samples_per_label,
            excluded_empty,
            training_accuracy: correct as f64 / samples.len() as f64,
            converged,
        };
        Ok((model, summary))
    }

    /// `s_k = w_k . x + b_k` for every label.
    pub fn decision_scores(&self, x: &[f64]) -> Result<Vec<f64>, ClassifierError> {
        if x.len() != self.dim {
            return Err(ClassifierError::DimensionMismatch {
                expected: self.dim,
                got: x.len(),
            });
        }
        Ok(self
            .weights
            .iter()
            .zip(&self.biases)
            .map(|(w, b)| dot(w, x) + b)
            .collect())
    }

    pub fn predict_features(&self, features: &FeatureVector) -> Result<Prediction, ClassifierError> {
        if features.extractor_id != self.extractor_id {
            return Err(ClassifierError::ExtractorMismatch {
                model: self.extractor_id.clone(),
                available: features.extractor_id.clone(),
            });
        }
        let scores = self.decision_scores(&features.values)?;
        Ok(self.prediction_from_scores(scores))
    }

    pub fn prediction_from_scores(&self, scores: Vec<f64>) -> Prediction {
        let probabilities = softmax(&scores);
        let percentages = largest_remainder_percentages(&probabilities);
        let top_label = self.labels[argmax(&scores)].clone();
        Prediction {
            labels: self.labels.clone(),
            scores,
            probabilities,
            percentages,
            top_label,
        }
    }

    pub fn predict(
        &self,
        extractor: &dyn FeatureExtractor,
        image: &[u8],
    ) -> Result<Prediction, ClassifierError> {
        let available = &extractor.spec().extractor_id;
        if *available != self.extractor_id {
            return Err(ClassifierError::ExtractorMismatch {
                model: self.extractor_id.clone(),
                available: available.clone(),
            });
        }
        let fv = extractor
            .extract(image)
            .map_err(|e| ClassifierError::UndecodableImage(e.to_string()))?;
        self.predict_features(&fv)
    }
}

/// Little-endian binary model files.
///
/// Layout: magic `OVRM`, format version (u16), extractor id (u32 length +
/// UTF-8), dim (u32), label count (u32), C (f64), tolerance (f64), max_iter
/// (u64), trained_at (u64), labels (u32 length + UTF-8 each), weights
/// (label-major f64), biases (f64).
pub mod codec {
    use super::{ClassifierModel, Hyperparams};
    use thiserror::Error;

    pub const MAGIC: [u8; 4] = *b"OVRM";
    pub const FORMAT_VERSION: u16 = 1;

    #[derive(Debug, Error, PartialEq, Eq)]
    pub enum CodecError {
        #[error("not a model file")]
        BadMagic,
        #[error("model format version {found} is not supported (expected {FORMAT_VERSION})")]
        VersionMismatch { found: u16 },
        #[error("model file is truncated")]
        Truncated,
        #[error("model file has trailing bytes")]
        TrailingBytes,
        #[error("model file contains invalid UTF-8")]
        InvalidUtf8,
    }

    fn put_str(out: &mut Vec<u8>, s: &str) {
        out.extend((s.len() as u32).to_le_bytes());
        out.extend(s.as_bytes());
    }

    pub fn encode(model: &ClassifierModel) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend(MAGIC);
        out.extend(FORMAT_VERSION.to_le_bytes());
        put_str(&mut out, &model.extractor_id);
        out.extend((model.dim as u32).to_le_bytes());
        out.extend((model.labels.len() as u32).to_le_bytes());
        out.extend(model.hyperparams.c.to_le_bytes());
        out.extend(model.hyperparams.tolerance.to_le_bytes());
        out.extend((model.hyperparams.max_iter as u64).to_le_bytes());
        out.extend(model.trained_at.to_le_bytes());
        for label in &model.labels {
            put_str(&mut out, label);
        }
        for w in &model.weights {
            for v in w {
                out.extend(v.to_le_bytes());
            }
        }
        for b in &model.biases {
            out.extend(b.to_le_bytes());
        }
        out
    }

    struct Reader<'a> {
        buf: &'a [u8],
    }

    impl<'a> Reader<'a> {
        fn take(&mut self, n: usize) -> Result<&'a [u8], CodecError> {
            if self.buf.len() < n {
                return Err(CodecError::Truncated);
            }
            let (head, rest) = self.buf.split_at(n);
            self.buf = rest;
            Ok(head)
        }
        fn array<const N: usize>(&mut self) -> Result<[u8; N], CodecError> {
            Ok(self.take(N)?.try_into().expect("length checked"))
        }
        fn u16(&mut self) -> Result<u16, CodecError> {
            Ok(u16::from_le_bytes(self.array()?))
        }
        fn u32(&mut self) -> Result<u32, CodecError> {
            Ok(u32::from_le_bytes(self.array()?))
        }
        fn u64(&mut self) -> Result<u64, CodecError> {
            Ok(u64::from_le_bytes(self.array()?))
        }
        fn f64(&mut self) -> Result<f64, CodecError> {
            Ok(f64::from_le_bytes(self.array()?))
        }
        fn string(&mut self) -> Result<String, CodecError> {
            let len = self.u32()? as usize;
            String::from_utf8(self.take(len)?.to_vec()).map_err(|_| CodecError::InvalidUtf8)
        }
    }

    pub fn decode(bytes: &[u8]) -> Result<ClassifierModel, CodecError> {
        let mut r = Reader { buf: bytes };
        if r.take(4).map_err(|_| CodecError::BadMagic)? != MAGIC {
            return Err(CodecError::BadMagic);
        }
        let found = r.u16()?;
        if found != FORMAT_VERSION {
            return Err(CodecError::VersionMismatch { found });
        }
        let extractor_id = r.string()?;
        let dim = r.u32()? as usize;
        let count = r.u32()? as usize;
        let hyperparams = Hyperparams {
            c: r.f64()?,
            tolerance: r.f64()?,
            max_iter: r.u64()? as usize,
        };
        let trained_at = r.u64()?;
        // refuse absurd sizes before allocating
        if count.saturating_mul(dim).saturating_mul(8) > bytes.len() {
            return Err(CodecError::Truncated);
        }
        let labels = (0..count).map(|_| r.string()).collect::<Result<Vec<_>, _>>()?;
        let weights = (0..count)
            .map(|_| (0..dim).map(|_| r.f64()).collect::<Result<Vec<_>, _>>())
            .collect::<Result<Vec<_>, _>>()?;
        let biases = (0..count).map(|_| r.f64()).collect::<Result<Vec<_>, _>>()?;
        if !r.buf.is_empty() {
            return Err(CodecError::TrailingBytes);
        }
        Ok(ClassifierModel {
            labels,
            weights,
            biases,
            hyperparams,
            extractor_id,
            dim,
            trained_at,
        })
    }
}
