use std::fmt;
use std::time::Instant;

use serde::Serialize;

use super::{QuantError, QuantizedNetwork};
use crate::cnn::Network;
use crate::tensor::Tensor;

/// Discarded iterations before timing starts.
pub const WARMUP_ITERATIONS: usize = 10;
/// Smallest accepted number of timed frames.
pub const MIN_FRAMES: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Float,
    Quantized,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Float => "float",
            Variant::Quantized => "quantized",
        })
    }
}

/// The model under test.
#[derive(Debug, Clone, Copy)]
pub enum Model<'a> {
    Float(&'a Network<f32>),
    Quantized(&'a QuantizedNetwork),
}

impl Model<'_> {
    pub fn variant(&self) -> Variant {
        match self {
            Model::Float(_) => Variant::Float,
            Model::Quantized(_) => Variant::Quantized,
        }
    }

    pub fn input_shape(&self) -> [usize; 3] {
        match self {
            Model::Float(n) => n.input_shape(),
            Model::Quantized(q) => q.architecture().input,
        }
    }

    /// Class probabilities for a batch.
    pub fn forward(&self, batch: &Tensor<f32>) -> Result<Tensor<f32>, QuantError> {
        match self {
            Model::Float(n) => Ok(n.forward(batch)?),
            Model::Quantized(q) => q.qforward(batch),
        }
    }
}

/// Per-frame latency statistics. All times are milliseconds per frame; each
/// batch iteration contributes one observation (its wall time / batch size).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LatencyReport {
    pub variant: Variant,
    pub batch_size: usize,
    pub mean_ms: f64,
    pub p50_ms: f64,
    pub p95_ms: f64,
    pub fps: f64,
    pub threads: usize,
    #[serde(skip)]
    pub frames: usize,
    #[serde(skip)]
    pub max_ms: f64,
}

impl LatencyReport {
    /// Builds a report from per-frame observations (nearest-rank percentiles).
    pub fn from_samples(variant: Variant, batch_size: usize, per_frame_ms: &[f64]) -> Result<Self, QuantError> {
        if per_frame_ms.is_empty() || per_frame_ms.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(QuantError::InvalidArgument("latency samples must be positive and finite".into()));
        }
        let mut sorted = per_frame_ms.to_vec();
        sorted.sort_by(f64::total_cmp);
        let rank = |p: f64| sorted[((p / 100.0 * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len()) - 1];
        let mean_ms = sorted.iter().sum::<f64>() / sorted.len() as f64;
        Ok(Self {
            variant,
            batch_size,
            mean_ms,
            p50_ms: rank(50.0),
            p95_ms: rank(95.0),
            fps: 1000.0 / mean_ms,
            threads: 1,
            frames: sorted.len() * batch_size,
            max_ms: sorted[sorted.len() - 1],
        })
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("plain struct serializes")
    }
}

/// `(base − new) / base · 100`.
pub fn reduction_pct(base_ms: f64, new_ms: f64) -> f64 {
    (base_ms - new_ms) / base_ms * 100.0
}

/// Times forward passes over `batch` (shape `(B, C, H, W)`) until at least
/// `frames` frames have been timed, after [`WARMUP_ITERATIONS`] discarded
/// iterations. Runs on the calling thread only.
pub fn bench_latency(model: Model<'_>, batch: &Tensor<f32>, frames: usize) -> Result<LatencyReport, QuantError> {
    if frames < MIN_FRAMES {
        return Err(QuantError::InvalidArgument(format!("{frames} frames requested, need at least {MIN_FRAMES}")));
    }
    let b = batch.shape().first().copied().unwrap_or(0);
    if b == 0 {
        return Err(QuantError::InvalidArgument("empty benchmark batch".into()));
    }
    for _ in 0..WARMUP_ITERATIONS {
        std::hint::black_box(model.forward(batch)?);
    }
    let iterations = frames.div_ceil(b);
    let mut samples = Vec::with_capacity(iterations);
    for _ in 0..iterations {
        let t = Instant::now();
        std::hint::black_box(model.forward(std::hint::black_box(batch))?);
        samples.push(t.elapsed().as_secs_f64() * 1000.0 / b as f64);
    }
    LatencyReport::from_samples(model.variant(), b, &samples)
}
