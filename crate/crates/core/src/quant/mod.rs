//! Post-training int8 quantization, magnitude pruning and latency benchmarks.
//!
//! Activations are asymmetric per-tensor `u8` (min–max calibrated), weights
//! symmetric per-output-channel `i8` in `[−127, 127]`, biases `i32` in the
//! accumulator scale. Rounding is half away from zero everywhere.

mod bench;
mod kernels;
mod qnet;

use thiserror::Error;

use crate::cnn::{CnnError, Network};
use crate::rng::round_half_away;
use crate::tensor::Tensor;

pub use bench::{bench_latency, reduction_pct, LatencyReport, Model, Variant, MIN_FRAMES, WARMUP_ITERATIONS};
pub use qnet::{decode_quantized, encode_quantized, quantize_network, QuantizedLayer, QuantizedNetwork, QUANT_MAGIC};

#[derive(Debug, Error)]
pub enum QuantError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("state error: {0}")]
    State(String),
    #[error("{context}: shape {got:?}, expected {expected:?}")]
    Shape {
        context: String,
        got: Vec<usize>,
        expected: Vec<usize>,
    },
    #[error("quantized weights file at byte offset {offset}: {reason}")]
    Format { offset: usize, reason: String },
    #[error(transparent)]
    Cnn(#[from] CnnError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Affine mapping `real = (q − zero_point) · scale`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantParams {
    pub scale: f64,
    pub zero_point: i32,
}

impl QuantParams {
    /// Asymmetric `u8` parameters for an observed range. A degenerate range
    /// gives scale 1 and zero point 0.
    ///
    /// For `min <= 0 <= max`, rounding the zero point shifts the representable
    /// interval by at most half a step, so every value in `[min, max]` still
    /// round-trips within `scale / 2` (clipping included).
    pub fn from_range(min: f64, max: f64) -> Self {
        if !(max > min) {
            return Self { scale: 1.0, zero_point: 0 };
        }
        let scale = (max - min) / 255.0;
        let zero_point = round_half_away(-min / scale).clamp(0.0, 255.0) as i32;
        Self { scale, zero_point }
    }

    /// Symmetric `i8` parameters: `scale = max|w| / 127`, zero point 0.
    pub fn symmetric(max_abs: f64) -> Self {
        let scale = if max_abs > 0.0 { max_abs / 127.0 } else { 1.0 };
        Self { scale, zero_point: 0 }
    }

    pub fn quantize_u8(&self, x: f64) -> u8 {
        (round_half_away(x / self.scale) + self.zero_point as f64).clamp(0.0, 255.0) as u8
    }

    pub fn quantize_i8(&self, x: f64) -> i8 {
        round_half_away(x / self.scale).clamp(-127.0, 127.0) as i8
    }

    pub fn dequantize(&self, q: i32) -> f64 {
        (q - self.zero_point) as f64 * self.scale
    }

    /// Real interval representable without clipping.
    pub fn range(&self, signed: bool) -> (f64, f64) {
        if signed {
            (-127.0 * self.scale, 127.0 * self.scale)
        } else {
            (self.dequantize(0), self.dequantize(255))
        }
    }
}

/// Activation parameters for every activation of a network: index 0 is the
/// input, `l + 1` the output of layer `l`.
#[derive(Debug, Clone, PartialEq)]
pub struct Calibration {
    pub params: Vec<QuantParams>,
    pub ranges: Vec<(f64, f64)>,
    pub samples: usize,
}

/// Minimum number of calibration images.
pub const MIN_CALIBRATION_SAMPLES: usize = 16;

/// Runs the float network over `samples` `(B, C, H, W)` and records the
/// min/max of every activation. The observed range is widened to include 0
/// so that zero (ReLU floor, conv padding) is exactly representable.
pub fn calibrate(net: &Network<f32>, samples: &Tensor<f32>) -> Result<Calibration, QuantError> {
    let b = samples.shape().first().copied().unwrap_or(0);
    if samples.is_empty() || b == 0 {
        return Err(QuantError::InvalidArgument("empty calibration set".into()));
    }
    if b < MIN_CALIBRATION_SAMPLES {
        return Err(QuantError::InvalidArgument(format!(
            "{b} calibration samples, need at least {MIN_CALIBRATION_SAMPLES}"
        )));
    }
    let mut ranges = vec![(0.0f64, 0.0f64); net.layers().len() + 1];
    let mut seen = vec![false; ranges.len()];
    let item = net.input_shape().iter().product::<usize>();
    // feed in chunks of 32 to bound memory on the full preset
    for start in (0..b).step_by(32) {
        let end = (start + 32).min(b);
        let chunk = Tensor::from_vec(
            &[end - start, samples.shape()[1], samples.shape()[2], samples.shape()[3]],
            samples.data()[start * item..end * item].to_vec(),
        )
        .map_err(CnnError::from)?;
        net.forward_observed(&chunk, &mut |i, data| {
            let (lo, hi) = data
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v as f64), hi.max(v as f64)));
            let r = &mut ranges[i];
            if seen[i] {
                *r = (r.0.min(lo), r.1.max(hi));
            } else {
                *r = (lo, hi);
                seen[i] = true;
            }
        })?;
    }
    let params = ranges
        .iter()
        .map(|&(lo, hi)| QuantParams::from_range(lo.min(0.0), hi.max(0.0)))
        .collect();
    Ok(Calibration { params, ranges, samples: b })
}

/// Zeroes the `⌊fraction · N⌋` smallest-magnitude weights across all layers
/// (ties by ascending flat index over the layers in order). Weights that are
/// already zero count towards the quota, which makes the operation idempotent.
/// Biases are left alone.
pub fn prune_magnitude(net: &Network<f32>, fraction: f64) -> Result<Network<f32>, QuantError> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(QuantError::InvalidArgument(format!("prune fraction {fraction} outside [0, 1]")));
    }
    let mut out = net.clone();
    let mut candidates: Vec<(f32, usize, usize)> = Vec::new();
    for (l, p) in out.params().iter().enumerate() {
        if let Some(p) = p {
            candidates.extend(p.weights.data().iter().enumerate().map(|(i, w)| (w.abs(), l, i)));
        }
    }
    let count = (fraction * candidates.len() as f64).floor() as usize;
    candidates.sort_by(|a, b| a.0.total_cmp(&b.0).then((a.1, a.2).cmp(&(b.1, b.2))));
    for &(_, l, i) in &candidates[..count] {
        out.params_mut()[l].as_mut().expect("params").weights.data_mut()[i] = 0.0;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cnn::{Architecture, LayerParams};
    use proptest::prelude::*;

    #[test]
    fn activation_params_examples() {
        let p = QuantParams::from_range(-1.0, 1.0);
        assert!((p.scale - 2.0 / 255.0).abs() < 1e-15);
        assert_eq!(p.zero_point, 128);
        let p = QuantParams::from_range(0.0, 1.0);
        assert!((p.scale - 1.0 / 255.0).abs() < 1e-15);
        assert_eq!(p.zero_point, 0);
        assert_eq!(QuantParams::from_range(0.0, 0.0), QuantParams { scale: 1.0, zero_point: 0 });
    }

    #[test]
    fn weight_params_example() {
        let p = QuantParams::symmetric(0.5);
        let q: Vec<i8> = [-0.5, 0.25, 0.5].iter().map(|&w| p.quantize_i8(w)).collect();
        assert_eq!(q, vec![-127, 64, 127]);
        assert_eq!(p.dequantize(p.quantize_i8(0.0) as i32), 0.0);
    }

    proptest! {
        #[test]
        fn roundtrip_within_half_scale(lo in -50.0f64..=0.0, hi in 1e-3f64..50.0, t in 0.0f64..=1.0) {
            // calibrated ranges always contain 0
            let p = QuantParams::from_range(lo, hi);
            let x = lo + t * (hi - lo);
            let err = (p.dequantize(p.quantize_u8(x) as i32) - x).abs();
            prop_assert!(err <= p.scale / 2.0 + 1e-12, "err {} scale {}", err, p.scale);
        }

        #[test]
        fn weight_roundtrip_within_half_scale(ws in prop::collection::vec(-3.0f64..3.0, 1..40)) {
            let p = QuantParams::symmetric(ws.iter().fold(0.0f64, |m, w| m.max(w.abs())));
            for &w in &ws {
                let q = p.quantize_i8(w);
                prop_assert!((-127..=127).contains(&q));
                prop_assert!((p.dequantize(q as i32) - w).abs() <= p.scale / 2.0 + 1e-12);
            }
        }
    }

    fn dense_net(weights: Vec<f32>) -> Network<f32> {
        let arch = Architecture {
            input: [1, 1, weights.len()],
            layers: vec![
                crate::cnn::LayerSpec::Flatten,
                crate::cnn::LayerSpec::Dense { outputs: 1 },
                crate::cnn::LayerSpec::Softmax,
            ],
        };
        let n = weights.len();
        Network::from_params(
            arch,
            vec![
                None,
                Some(LayerParams {
                    weights: Tensor::from_vec(&[1, n], weights).unwrap(),
                    bias: Tensor::from_vec(&[1], vec![0.3]).unwrap(),
                }),
                None,
            ],
        )
        .unwrap()
    }

    fn weights_of(net: &Network<f32>) -> Vec<f32> {
        net.params()[1].as_ref().unwrap().weights.data().to_vec()
    }

    #[test]
    fn prune_examples() {
        let net = dense_net(vec![0.1, -0.5, 0.2, 0.9]);
        assert_eq!(weights_of(&prune_magnitude(&net, 0.5).unwrap()), vec![0.0, -0.5, 0.0, 0.9]);
        assert_eq!(prune_magnitude(&net, 0.0).unwrap(), net);
        let all = prune_magnitude(&net, 1.0).unwrap();
        assert_eq!(weights_of(&all), vec![0.0; 4]);
        assert_eq!(all.params()[1].as_ref().unwrap().bias.data(), &[0.3]);
        assert!(prune_magnitude(&net, 1.5).is_err());
        assert!(prune_magnitude(&net, -0.1).is_err());
    }

    #[test]
    fn prune_ties_by_index_and_idempotent() {
        let net = dense_net(vec![0.2, -0.2, 0.2, 0.5]);
        let once = prune_magnitude(&net, 0.5).unwrap();
        assert_eq!(weights_of(&once), vec![0.0, 0.0, 0.2, 0.5]);
        assert_eq!(prune_magnitude(&once, 0.5).unwrap(), once);
        let net = dense_net(vec![0.0, 0.3, 0.1, 0.5]);
        assert_eq!(weights_of(&prune_magnitude(&net, 0.25).unwrap()), vec![0.0, 0.3, 0.1, 0.5]);
        assert_eq!(weights_of(&prune_magnitude(&net, 0.5).unwrap()), vec![0.0, 0.3, 0.0, 0.5]);
    }

    #[test]
    fn calibration_requires_samples() {
        let net = Network::<f32>::new(Architecture::canonical([1, 8, 8], &[2], 4), 0).unwrap();
        assert!(matches!(calibrate(&net, &Tensor::zeros(&[0, 1, 8, 8])), Err(QuantError::InvalidArgument(_))));
        assert!(calibrate(&net, &Tensor::zeros(&[4, 1, 8, 8])).is_err());
        let c = calibrate(&net, &Tensor::zeros(&[16, 1, 8, 8])).unwrap();
        assert_eq!(c.params.len(), net.layers().len() + 1);
        assert_eq!(c.params[0], QuantParams { scale: 1.0, zero_point: 0 });
    }
}
