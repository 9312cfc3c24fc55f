//! Frozen image features.
//!
//! Nothing here is ever trained; the classifier only learns linear weights on
//! top of whatever an extractor produces. The builtin `histo-v1` extractor is
//! a fixed colour/gradient/layout descriptor; [`ExternalExtractor`] forwards
//! image bytes to an embedding service for a real CNN backbone.

use std::f64::consts::PI;
use std::time::Duration;

use image::imageops::{self, FilterType};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::decode_image;

pub const HISTO_V1_ID: &str = "histo-v1";
pub const HISTO_V1_DIM: usize = 59;
const SIDE: u32 = 64;
const INTENSITY_BINS: usize = 8;
const ORIENTATION_BINS: usize = 9;
const GRID_ROWS: usize = 4;
const GRID_COLS: usize = 5;

/// Component ranges of a `histo-v1` vector.
pub mod layout {
    use std::ops::Range;
    pub const COLOR_HIST: Range<usize> = 0..24;
    pub const GRADIENT_HIST: Range<usize> = 24..33;
    pub const MOMENTS: Range<usize> = 33..39;
    pub const LUMA_GRID: Range<usize> = 39..59;
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FeatureError {
    #[error("image could not be decoded: {0}")]
    UndecodableImage(String),
    #[error("external embedder unavailable: {0}")]
    ExternalEmbedderUnavailable(String),
    #[error("embedder returned {got} values, expected {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("embedder returned a non-finite value")]
    NonFinite,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub values: Vec<f64>,
    pub extractor_id: String,
}

impl FeatureVector {
    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExtractorKind {
    Builtin,
    External,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtractorSpec {
    pub extractor_id: String,
    pub dim: usize,
    pub kind: ExtractorKind,
    pub endpoint: Option<String>,
}

impl ExtractorSpec {
    pub fn histo_v1() -> Self {
        Self {
            extractor_id: HISTO_V1_ID.to_string(),
            dim: HISTO_V1_DIM,
            kind: ExtractorKind::Builtin,
            endpoint: None,
        }
    }
}

pub trait FeatureExtractor: Send + Sync {
    fn spec(&self) -> &ExtractorSpec;

    fn extract(&self, bytes: &[u8]) -> Result<FeatureVector, FeatureError>;

    /// Order-preserving; a failure at one index does not stop the rest.
    fn extract_batch(&self, images: &[&[u8]]) -> Vec<Result<FeatureVector, FeatureError>> {
        images.iter().map(|b| self.extract(b)).collect()
    }
}

/// Scales `values` to unit length; an all-zero vector stays zero.
pub fn l2_normalize(values: &mut [f64]) {
    let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > 0.0 {
        values.iter_mut().for_each(|v| *v /= norm);
    }
}

#[derive(Debug, Clone)]
pub struct BuiltinExtractor {
    spec: ExtractorSpec,
}

impl Default for BuiltinExtractor {
    fn default() -> Self {
        Self {
            spec: ExtractorSpec::histo_v1(),
        }
    }
}

impl BuiltinExtractor {
    pub fn new() -> Self {
        Self::default()
    }

    /// The unnormalized descriptor.
    pub fn raw_features(img: &image::DynamicImage) -> Vec<f64> {
        let rgb = imageops::resize(&img.to_rgb8(), SIDE, SIDE, FilterType::Triangle);
        let n = (SIDE * SIDE) as f64;
        let side = SIDE as usize;
        let mut out = Vec::with_capacity(HISTO_V1_DIM);

        let mut hist = [[0.0f64; INTENSITY_BINS]; 3];
        let mut sum = [0.0f64; 3];
        let mut sum_sq = [0.0f64; 3];
        let mut luma = vec![0.0f64; side * side];
        for (x, y, px) in rgb.enumerate_pixels() {
            for c in 0..3 {
                let v = px.0[c];
                hist[c][(v as usize * INTENSITY_BINS) / 256] += 1.0;
                let f = v as f64 / 255.0;
                sum[c] += f;
                sum_sq[c] += f * f;
            }
            let [r, g, b] = px.0.map(|v| v as f64 / 255.0);
            luma[y as usize * side + x as usize] = 0.299 * r + 0.587 * g + 0.114 * b;
        }
        for channel in &hist {
            out.extend(channel.iter().map(|c| c / n));
        }

        let mut orient = [0.0f64; ORIENTATION_BINS];
        for y in 1..side - 1 {
            for x in 1..side - 1 {
                let gx = luma[y * side + x + 1] - luma[y * side + x - 1];
                let gy = luma[(y + 1) * side + x] - luma[(y - 1) * side + x];
                let mag = (gx * gx + gy * gy).sqrt();
                if mag == 0.0 {
                    continue;
                }
                let angle = gy.atan2(gx).rem_euclid(PI);
                let bin = ((angle / (PI / ORIENTATION_BINS as f64)) as usize).min(ORIENTATION_BINS - 1);
                orient[bin] += mag;
            }
        }
        let interior = ((side - 2) * (side - 2)) as f64;
        out.extend(orient.iter().map(|m| m / interior));

        let means = sum.map(|s| s / n);
        out.extend(means);
        for c in 0..3 {
            out.push((sum_sq[c] / n - means[c] * means[c]).max(0.0).sqrt());
        }

        for gy in 0..GRID_ROWS {
            let (y0, y1) = (gy * side / GRID_ROWS, (gy + 1) * side / GRID_ROWS);
            for gx in 0..GRID_COLS {
                let (x0, x1) = (gx * side / GRID_COLS, (gx + 1) * side / GRID_COLS);
                let mut acc = 0.0;
                for y in y0..y1 {
                    for x in x0..x1 {
                        acc += luma[y * side + x];
                    }
                }
                out.push(acc / ((y1 - y0) * (x1 - x0)) as f64);
            }
        }
        debug_assert_eq!(out.len(), HISTO_V1_DIM);
        out
    }
}

impl FeatureExtractor for BuiltinExtractor {
    fn spec(&self) -> &ExtractorSpec {
        &self.spec
    }

    fn extract(&self, bytes: &[u8]) -> Result<FeatureVector, FeatureError> {
        let (_, img) = decode_image(bytes).map_err(FeatureError::UndecodableImage)?;
        let mut values = Self::raw_features(&img);
        l2_normalize(&mut values);
        Ok(FeatureVector {
            values,
            extractor_id: self.spec.extractor_id.clone(),
        })
    }
}

/// Adapter for an embedding service: `POST <endpoint>` with the raw image
/// bytes, answered by a JSON array of `dim` numbers.
#[derive(Debug, Clone)]
pub struct ExternalExtractor {
    spec: ExtractorSpec,
    client: reqwest::blocking::Client,
    retries: u32,
}

impl ExternalExtractor {
    pub fn new(
        extractor_id: impl Into<String>,
        endpoint: impl Into<String>,
        dim: usize,
        timeout: Duration,
        retries: u32,
    ) -> Result<Self, FeatureError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| FeatureError::ExternalEmbedderUnavailable(e.to_string()))?;
        Ok(Self {
            spec: ExtractorSpec {
                extractor_id: extractor_id.into(),
                dim,
                kind: ExtractorKind::External,
                endpoint: Some(endpoint.into()),
            },
            client,
            retries,
        })
    }

    fn request(&self, bytes: &[u8], mime: &str) -> Result<Vec<f64>, FeatureError> {
        let endpoint = self.spec.endpoint.as_deref().unwrap_or_default();
        let response = self
            .client
            .post(endpoint)
            .header(reqwest::header::CONTENT_TYPE, mime)
            .body(bytes.to_vec())
            .send()
            .map_err(|e| FeatureError::ExternalEmbedderUnavailable(e.to_string()))?;
        if !response.status().is_success() {
            return Err(FeatureError::ExternalEmbedderUnavailable(format!(
                "status {}",
                response.status()
            )));
        }
        response
            .json::<Vec<f64>>()
            .map_err(|e| FeatureError::ExternalEmbedderUnavailable(e.to_string()))
    }
}

impl FeatureExtractor for ExternalExtractor {
    fn spec(&self) -> &ExtractorSpec {
        &self.spec
    }

    fn extract(&self, bytes: &[u8]) -> Result<FeatureVector, FeatureError> {
        let (decoded, _) = decode_image(bytes).map_err(FeatureError::UndecodableImage)?;
        let mut attempt = 0;
        let mut values = loop {
            match self.request(bytes, decoded.kind.mime()) {
                Ok(v) => break v,
                Err(e) if attempt >= self.retries => return Err(e),
                Err(_) => attempt += 1,
            }
        };
        if values.len() != self.spec.dim {
            return Err(FeatureError::DimensionMismatch {
                expected: self.spec.dim,
                got: values.len(),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(FeatureError::NonFinite);
        }
        l2_normalize(&mut values);
        Ok(FeatureVector {
            values,
            extractor_id: self.spec.extractor_id.clone(),
        })
    }
}
