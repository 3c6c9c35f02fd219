use std::path::Path;

use super::kernels::{dot_i16, gemm_pairs, im2col_pairs, pack_weight_pairs};
use super::{Calibration, QuantError, QuantParams};
use crate::cnn::{Architecture, LayerSpec, Network};
use crate::rng::round_half_away;
use crate::tensor::Tensor;

pub const QUANT_MAGIC: &[u8; 4] = b"AMQQ";
const QUANT_VERSION: u32 = 1;

/// Per-output-channel symmetric int8 weights of one conv or dense layer.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedLayer {
    pub shape: Vec<usize>,
    pub weights: Vec<i8>,
    pub scales: Vec<f64>,
    /// Float bias; converted to the accumulator scale once input parameters are known.
    pub bias: Vec<f32>,
}

impl QuantizedLayer {
    fn from_float(weights: &Tensor<f32>, bias: &Tensor<f32>) -> Self {
        let f = weights.shape()[0];
        let per = weights.len() / f;
        let mut q = Vec::with_capacity(weights.len());
        let mut scales = Vec::with_capacity(f);
        for unit in weights.data().chunks_exact(per) {
            let p = QuantParams::symmetric(unit.iter().fold(0.0f64, |m, w| m.max(w.abs() as f64)));
            q.extend(unit.iter().map(|&w| p.quantize_i8(w as f64)));
            scales.push(p.scale);
        }
        Self {
            shape: weights.shape().to_vec(),
            weights: q,
            scales,
            bias: bias.data().to_vec(),
        }
    }

    pub fn channels(&self) -> usize {
        self.shape[0]
    }

    pub fn fan_in(&self) -> usize {
        self.weights.len() / self.shape[0]
    }

    pub fn dequantized(&self) -> Vec<f64> {
        let per = self.fan_in();
        self.weights
            .iter()
            .enumerate()
            .map(|(i, &q)| q as f64 * self.scales[i / per])
            .collect()
    }

    fn bias_q(&self, in_scale: f64) -> Vec<i32> {
        self.bias
            .iter()
            .zip(&self.scales)
            .map(|(&b, &s)| round_half_away(b as f64 / (in_scale * s)).clamp(i32::MIN as f64, i32::MAX as f64) as i32)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Requant {
    mult: Vec<f32>,
    zp: i32,
    lo: i32,
}

impl Requant {
    fn new(in_scale: f64, w_scales: &[f64], out: QuantParams, relu: bool) -> Self {
        Self {
            mult: w_scales.iter().map(|&s| (in_scale * s / out.scale) as f32).collect(),
            zp: out.zero_point,
            lo: if relu { out.zero_point } else { 0 },
        }
    }

    #[inline]
    fn apply(&self, acc: i32, ch: usize) -> u8 {
        ((acc as f32 * self.mult[ch]).round() as i32 + self.zp).clamp(self.lo, 255) as u8
    }
}

#[derive(Debug, Clone, PartialEq)]
enum DenseOut {
    Float(Vec<f32>),
    Quant(Requant),
}

#[derive(Debug, Clone, PartialEq)]
enum Step {
    Conv {
        dims: (usize, usize, usize),
        k: usize,
        f: usize,
        in_zp: u8,
        wpairs: Vec<i32>,
        bias_q: Vec<i32>,
        out: Requant,
    },
    Relu {
        zp: u8,
    },
    Pool {
        dims: (usize, usize, usize),
    },
    Dense {
        n: usize,
        m: usize,
        in_zp: u8,
        weights: Vec<i16>,
        bias_q: Vec<i32>,
        out: DenseOut,
    },
    Softmax {
        input: Option<QuantParams>,
    },
}

/// Integer version of a [`Network`]. Immutable after construction, so
/// [`QuantizedNetwork::qforward`] can run concurrently.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedNetwork {
    arch: Architecture,
    shapes: Vec<Vec<usize>>,
    layers: Vec<Option<QuantizedLayer>>,
    calibration: Option<Calibration>,
    plan: Vec<Step>,
}

/// Quantizes weights and wires in the calibrated activation parameters.
pub fn quantize_network(net: &Network<f32>, calibration: &Calibration) -> Result<QuantizedNetwork, QuantError> {
    let mut q = QuantizedNetwork::weights_only(net);
    q.set_calibration(calibration.clone())?;
    Ok(q)
}

impl QuantizedNetwork {
    /// Quantized weights without activation parameters; `qforward` refuses to
    /// run until a calibration is attached.
    pub fn weights_only(net: &Network<f32>) -> Self {
        let layers = net
            .params()
            .iter()
            .map(|p| p.as_ref().map(|p| QuantizedLayer::from_float(&p.weights, &p.bias)))
            .collect();
        Self {
            arch: net.architecture().clone(),
            shapes: net.shapes().to_vec(),
            layers,
            calibration: None,
            plan: Vec::new(),
        }
    }

    pub fn set_calibration(&mut self, calibration: Calibration) -> Result<(), QuantError> {
        if calibration.params.len() != self.shapes.len() {
            return Err(QuantError::InvalidArgument(format!(
                "calibration covers {} activations, network has {}",
                calibration.params.len(),
                self.shapes.len()
            )));
        }
        self.plan = self.build_plan(&calibration.params);
        self.calibration = Some(calibration);
        Ok(())
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn layers(&self) -> &[Option<QuantizedLayer>] {
        &self.layers
    }

    pub fn calibration(&self) -> Option<&Calibration> {
        self.calibration.as_ref()
    }

    pub fn classes(&self) -> usize {
        self.arch.classes()
    }

    fn build_plan(&self, act: &[QuantParams]) -> Vec<Step> {
        let specs = &self.arch.layers;
        let mut plan = Vec::new();
        let mut cur: Option<QuantParams> = Some(act[0]);
        let mut l = 0;
        while l < specs.len() {
            let fused = specs.get(l + 1) == Some(&LayerSpec::Relu);
            let in_shape = &self.shapes[l];
            match specs[l] {
                LayerSpec::Conv { kernel, .. } | LayerSpec::Dense { outputs: kernel } => {
                    let layer = self.layers[l].as_ref().expect("quantized params");
                    let inp = cur.expect("integer input");
                    let is_conv = matches!(specs[l], LayerSpec::Conv { .. });
                    let to_float = !is_conv && specs.get(l + 1) == Some(&LayerSpec::Softmax);
                    let out_idx = if fused { l + 2 } else { l + 1 };
                    let bias_q = layer.bias_q(inp.scale);
                    let in_zp = inp.zero_point as u8;
                    if is_conv {
                        let out = Requant::new(inp.scale, &layer.scales, act[out_idx], fused);
                        plan.push(Step::Conv {
                            dims: (in_shape[0], in_shape[1], in_shape[2]),
                            k: kernel,
                            f: layer.channels(),
                            in_zp,
                            wpairs: pack_weight_pairs(&layer.weights, layer.channels(), layer.fan_in()),
                            bias_q,
                            out,
                        });
                        cur = Some(act[out_idx]);
                    } else {
                        let out = if to_float {
                            DenseOut::Float(layer.scales.iter().map(|&s| (inp.scale * s) as f32).collect())
                        } else {
                            DenseOut::Quant(Requant::new(inp.scale, &layer.scales, act[out_idx], fused))
                        };
                        plan.push(Step::Dense {
                            n: layer.fan_in(),
                            m: layer.channels(),
                            in_zp,
                            weights: layer.weights.iter().map(|&w| w as i16).collect(),
                            bias_q,
                            out,
                        });
                        cur = if to_float { None } else { Some(act[out_idx]) };
                    }
                    l += if fused && !to_float { 2 } else { 1 };
                    continue;
                }
                LayerSpec::Relu => plan.push(Step::Relu {
                    zp: cur.map_or(0, |p| p.zero_point as u8),
                }),
                LayerSpec::MaxPool => plan.push(Step::Pool {
                    dims: (in_shape[0], in_shape[1], in_shape[2]),
                }),
                LayerSpec::Flatten => {}
                LayerSpec::Softmax => plan.push(Step::Softmax { input: cur }),
            }
            l += 1;
        }
        plan
    }

    /// Class probabilities `(B, k)` computed with integer convolutions and
    /// dense layers; only the final softmax runs in float.
    pub fn qforward(&self, batch: &Tensor<f32>) -> Result<Tensor<f32>, QuantError> {
        let Some(cal) = &self.calibration else {
            return Err(QuantError::State("quantized network has no activation calibration".into()));
        };
        let s = batch.shape();
        if s.len() != 4 || s[1..] != self.arch.input {
            let mut expected = vec![0];
            expected.extend_from_slice(&self.arch.input);
            return Err(QuantError::Shape {
                context: "batch (B, C, H, W)".into(),
                got: s.to_vec(),
                expected,
            });
        }
        let b = s[0];
        let p0 = cal.params[0];
        let mut q: Vec<u8> = batch.data().iter().map(|&x| p0.quantize_u8(x as f64)).collect();
        let mut float: Vec<f32> = Vec::new();
        for step in &self.plan {
            match step {
                Step::Conv {
                    dims,
                    k,
                    f,
                    in_zp,
                    wpairs,
                    bias_q,
                    out,
                } => q = conv_q(&q, b, *dims, *k, *f, *in_zp, wpairs, bias_q, out),
                Step::Relu { zp } => {
                    for v in q.iter_mut() {
                        *v = (*v).max(*zp);
                    }
                }
                Step::Pool { dims } => q = pool_q(&q, b, *dims),
                Step::Dense {
                    n,
                    m,
                    in_zp,
                    weights,
                    bias_q,
                    out,
                } => {
                    let mut xs = vec![0i16; *n];
                    let mut logits = Vec::with_capacity(b * m);
                    let mut next = Vec::with_capacity(b * m);
                    for row in q.chunks_exact(*n) {
                        for (x, &v) in xs.iter_mut().zip(row) {
                            *x = v as i16 - *in_zp as i16;
                        }
                        for j in 0..*m {
                            let acc = dot_i16(&xs, &weights[j * n..(j + 1) * n]) + bias_q[j];
                            match out {
                                DenseOut::Float(deq) => logits.push(acc as f32 * deq[j]),
                                DenseOut::Quant(r) => next.push(r.apply(acc, j)),
                            }
                        }
                    }
                    match out {
                        DenseOut::Float(_) => float = logits,
                        DenseOut::Quant(_) => q = next,
                    }
                }
                Step::Softmax { input } => {
                    if let Some(p) = input {
                        float = q.iter().map(|&v| p.dequantize(v as i32) as f32).collect();
                    }
                    let k = float.len() / b.max(1);
                    let mut probs = vec![0.0f32; float.len()];
                    for (z, o) in float.chunks_exact(k).zip(probs.chunks_exact_mut(k)) {
                        crate::cnn::softmax_row(z, o);
                    }
                    float = probs;
                }
            }
        }
        Ok(Tensor::from_vec(&[b, self.classes()], float).map_err(crate::cnn::CnnError::from)?)
    }

    pub fn predict(&self, batch: &Tensor<f32>) -> Result<Vec<usize>, QuantError> {
        let p = self.qforward(batch)?;
        Ok(crate::cnn::argmax_rows(p.data(), self.classes()))
    }
}

#[allow(clippy::too_many_arguments)]
fn conv_q(
    input: &[u8],
    batch: usize,
    (c, h, w): (usize, usize, usize),
    k: usize,
    f: usize,
    in_zp: u8,
    wpairs: &[i32],
    bias_q: &[i32],
    rq: &Requant,
) -> Vec<u8> {
    let hw = h * w;
    let kp = (c * k * k).div_ceil(2);
    let group = (2048 / hw).clamp(1, batch.max(1));
    let mut cols = vec![0i16; kp * group * hw * 2];
    let mut acc = vec![0i32; f * group * hw];
    let mut out = vec![0u8; batch * f * hw];
    for b0 in (0..batch).step_by(group) {
        let g = group.min(batch - b0);
        let n = g * hw;
        for i in 0..g {
            let img = &input[(b0 + i) * c * hw..(b0 + i + 1) * c * hw];
            im2col_pairs(img, in_zp, (c, h, w), k, &mut cols, n, i * hw);
        }
        gemm_pairs(f, n, kp, wpairs, &cols[..kp * n * 2], &mut acc[..f * n]);
        for i in 0..g {
            let dst = &mut out[(b0 + i) * f * hw..(b0 + i + 1) * f * hw];
            for fi in 0..f {
                let src = &acc[fi * n + i * hw..fi * n + (i + 1) * hw];
                for (d, &a) in dst[fi * hw..(fi + 1) * hw].iter_mut().zip(src) {
                    *d = rq.apply(a + bias_q[fi], fi);
                }
            }
        }
    }
    out
}

fn pool_q(input: &[u8], batch: usize, (c, h, w): (usize, usize, usize)) -> Vec<u8> {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(batch * c * oh * ow);
    for plane in input.chunks_exact(h * w).take(batch * c) {
        for oy in 0..oh {
            let r0 = &plane[2 * oy * w..];
            let r1 = &plane[(2 * oy + 1) * w..];
            for ox in 0..ow {
                out.push(r0[2 * ox].max(r0[2 * ox + 1]).max(r1[2 * ox]).max(r1[2 * ox + 1]));
            }
        }
    }
    out
}

const TAG_CONV: u8 = 1;
const TAG_DENSE: u8 = 2;

/// `AMQQ` file: magic, `u32` version, `u32` parameterised-layer count, then per
/// layer `u8` tag, `u32` rank, `u32` dims, `i8` weights, `f64` channel scales,
/// `f32` biases; finally `u32` activation count and per activation `f64`
/// scale + `i32` zero point (count 0 when uncalibrated). Little-endian.
pub fn encode_quantized(q: &QuantizedNetwork) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(QUANT_MAGIC);
    out.extend_from_slice(&QUANT_VERSION.to_le_bytes());
    out.extend_from_slice(&(q.layers.iter().flatten().count() as u32).to_le_bytes());
    for (spec, layer) in q.arch.layers.iter().zip(&q.layers) {
        let Some(layer) = layer else { continue };
        out.push(if matches!(spec, LayerSpec::Conv { .. }) { TAG_CONV } else { TAG_DENSE });
        out.extend_from_slice(&(layer.shape.len() as u32).to_le_bytes());
        for &d in &layer.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        out.extend(layer.weights.iter().map(|&w| w as u8));
        for s in &layer.scales {
            out.extend_from_slice(&s.to_le_bytes());
        }
        for b in &layer.bias {
            out.extend_from_slice(&b.to_le_bytes());
        }
    }
    let params = q.calibration.as_ref().map_or(&[][..], |c| &c.params[..]);
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for p in params {
        out.extend_from_slice(&p.scale.to_le_bytes());
        out.extend_from_slice(&p.zero_point.to_le_bytes());
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], QuantError> {
        let have = self.bytes.len() - self.pos;
        if have < n {
            return Err(self.err(format!("truncated {what}: need {n} bytes, {have} left")));
        }
        self.pos += n;
        Ok(&self.bytes[self.pos - n..self.pos])
    }

    fn err(&self, reason: String) -> QuantError {
        QuantError::Format { offset: self.pos, reason }
    }

    fn u32(&mut self, what: &str) -> Result<u32, QuantError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn f64(&mut self, what: &str) -> Result<f64, QuantError> {
        let v = f64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes"));
        if !(v.is_finite() && v > 0.0) {
            self.pos -= 8;
            return Err(self.err(format!("{what} {v} is not a positive finite number")));
        }
        Ok(v)
    }
}

pub fn decode_quantized(bytes: &[u8], arch: &Architecture) -> Result<QuantizedNetwork, QuantError> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != QUANT_MAGIC {
        return Err(QuantError::Format {
            offset: 0,
            reason: "bad magic (expected AMQQ)".into(),
        });
    }
    let version = r.u32("version")?;
    if version != QUANT_VERSION {
        return Err(QuantError::Format {
            offset: 4,
            reason: format!("unsupported version {version}"),
        });
    }
    let expected = arch.param_shapes()?;
    let count = r.u32("layer count")? as usize;
    if count != expected.iter().flatten().count() {
        return Err(QuantError::Format {
            offset: 8,
            reason: format!("{count} parameterised layers, architecture has {}", expected.iter().flatten().count()),
        });
    }
    let mut layers = Vec::new();
    for (spec, shape) in arch.layers.iter().zip(&expected) {
        let Some(shape) = shape else {
            layers.push(None);
            continue;
        };
        let want = if matches!(spec, LayerSpec::Conv { .. }) { TAG_CONV } else { TAG_DENSE };
        let tag = r.take(1, "kind tag")?[0];
        if tag != want {
            r.pos -= 1;
            return Err(r.err(format!("kind tag {tag}, expected {want}")));
        }
        let at = r.pos;
        let rank = r.u32("rank")? as usize;
        let mut dims = Vec::new();
        for _ in 0..rank.min(8) {
            dims.push(r.u32("dims")? as usize);
        }
        if &dims != shape {
            return Err(QuantError::Format {
                offset: at,
                reason: format!("dims {dims:?}, expected {shape:?}"),
            });
        }
        let n: usize = dims.iter().product();
        let weights: Vec<i8> = r.take(n, "weights")?.iter().map(|&b| b as i8).collect();
        if let Some(i) = weights.iter().position(|&w| w == i8::MIN) {
            return Err(QuantError::Format {
                offset: r.pos - n + i,
                reason: "weight −128 outside [−127, 127]".into(),
            });
        }
        let mut scales = Vec::with_capacity(dims[0]);
        for _ in 0..dims[0] {
            scales.push(r.f64("channel scale")?);
        }
        let mut bias = Vec::with_capacity(dims[0]);
        for _ in 0..dims[0] {
            bias.push(f32::from_le_bytes(r.take(4, "bias")?.try_into().expect("4 bytes")));
        }
        layers.push(Some(QuantizedLayer {
            shape: dims,
            weights,
            scales,
            bias,
        }));
    }
    let acts = r.u32("activation count")? as usize;
    let mut params = Vec::new();
    for _ in 0..acts.min(bytes.len()) {
        let scale = r.f64("activation scale")?;
        let zero_point = i32::from_le_bytes(r.take(4, "zero point")?.try_into().expect("4 bytes"));
        if !(0..=255).contains(&zero_point) {
            r.pos -= 4;
            return Err(r.err(format!("zero point {zero_point} outside [0, 255]")));
        }
        params.push(QuantParams { scale, zero_point });
    }
    if r.pos != bytes.len() {
        return Err(r.err(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    let mut q = QuantizedNetwork {
        arch: arch.clone(),
        shapes: arch.shapes()?,
        layers,
        calibration: None,
        plan: Vec::new(),
    };
    if acts > 0 {
        q.set_calibration(Calibration {
            ranges: params.iter().map(|p| p.range(false)).collect(),
            params,
            samples: 0,
        })?;
    }
    Ok(q)
}

impl QuantizedNetwork {
    pub fn save(&self, path: &Path) -> Result<(), QuantError> {
        std::fs::write(path, encode_quantized(self))?;
        Ok(())
    }

    pub fn load(path: &Path, arch: &Architecture) -> Result<Self, QuantError> {
        decode_quantized(&std::fs::read(path)?, arch)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quant::calibrate;
    use rand::Rng;

    fn net_and_batch(seed: u64, b: usize) -> (Network<f32>, Tensor<f32>) {
        let net = Network::<f32>::new(Architecture::canonical([1, 16, 20], &[4, 8, 8], 4), seed).unwrap();
        let mut rng = crate::rng::rng_from(seed);
        let data = (0..b * 320).map(|_| rng.random_range(0.0f32..1.0)).collect();
        (net, Tensor::from_vec(&[b, 1, 16, 20], data).unwrap())
    }

    #[test]
    fn uncalibrated_is_state_error() {
        let (net, x) = net_and_batch(1, 2);
        let q = QuantizedNetwork::weights_only(&net);
        assert!(matches!(q.qforward(&x), Err(QuantError::State(_))));
    }

    #[test]
    fn close_to_float_and_rows_sum_to_one() {
        let (net, x) = net_and_batch(2, 32);
        let q = quantize_network(&net, &calibrate(&net, &x).unwrap()).unwrap();
        assert_eq!(q.architecture(), net.architecture());
        let pq = q.qforward(&x).unwrap();
        let pf = net.forward(&x).unwrap();
        for row in pq.data().chunks(4) {
            assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-6);
        }
        assert!(pq.max_abs_diff(&pf).unwrap() < 0.05, "{:?}", pq.max_abs_diff(&pf));
        let zero = Tensor::zeros(&[1, 1, 16, 20]);
        let d = q.qforward(&zero).unwrap().max_abs_diff(&net.forward(&zero).unwrap()).unwrap();
        assert!(d <= 0.02, "{d}");
    }

    #[test]
    fn integer_conv_matches_dequantized_oracle() {
        // one conv layer: the integer accumulator must equal the exact sum over
        // (q_in − zp)·q_w computed directly
        let (net, x) = net_and_batch(3, 16);
        let cal = calibrate(&net, &x).unwrap();
        let q = quantize_network(&net, &cal).unwrap();
        let layer = q.layers()[0].as_ref().unwrap();
        let p_in = cal.params[0];
        let img: Vec<u8> = x.data()[..320].iter().map(|&v| p_in.quantize_u8(v as f64)).collect();
        let out = conv_q(
            &img,
            1,
            (1, 16, 20),
            3,
            4,
            p_in.zero_point as u8,
            &pack_weight_pairs(&layer.weights, 4, 9),
            &layer.bias_q(p_in.scale),
            &Requant::new(p_in.scale, &layer.scales, cal.params[2], true),
        );
        let p_out = cal.params[2];
        let bq = layer.bias_q(p_in.scale);
        for f in 0..4 {
            for y in 0..16 {
                for xx in 0..20 {
                    let mut acc = 0i64;
                    for dy in 0..3 {
                        for dx in 0..3 {
                            let (sy, sx) = (y as i64 + dy - 1, xx as i64 + dx - 1);
                            if sy < 0 || sy >= 16 || sx < 0 || sx >= 20 {
                                continue;
                            }
                            let v = img[(sy * 20 + sx) as usize] as i64 - p_in.zero_point as i64;
                            acc += v * layer.weights[f * 9 + (dy * 3 + dx) as usize] as i64;
                        }
                    }
                    let real = (acc + bq[f] as i64) as f64 * p_in.scale * layer.scales[f];
                    let want = (round_half_away(real / p_out.scale) as i64 + p_out.zero_point as i64).clamp(p_out.zero_point as i64, 255);
                    let got = out[f * 320 + y * 20 + xx] as i64;
                    assert!((got - want).abs() <= 1, "f{f} y{y} x{xx}: {got} vs {want}");
                }
            }
        }
    }

    #[test]
    fn weights_in_range_and_roundtrip_bound() {
        let (net, _) = net_and_batch(4, 1);
        let q = QuantizedNetwork::weights_only(&net);
        for (l, layer) in q.layers().iter().enumerate() {
            let Some(layer) = layer else { continue };
            assert!(layer.weights.iter().all(|&w| (-127..=127).contains(&w)));
            let float = net.params()[l].as_ref().unwrap().weights.data();
            let per = layer.fan_in();
            for (i, (d, &w)) in layer.dequantized().iter().zip(float).enumerate() {
                assert!((d - w as f64).abs() <= layer.scales[i / per] / 2.0 + 1e-9);
            }
        }
    }

    #[test]
    fn file_roundtrip_preserves_outputs() {
        let (net, x) = net_and_batch(5, 16);
        let q = quantize_network(&net, &calibrate(&net, &x).unwrap()).unwrap();
        let bytes = encode_quantized(&q);
        let back = decode_quantized(&bytes, net.architecture()).unwrap();
        assert_eq!(back.qforward(&x).unwrap(), q.qforward(&x).unwrap());
        assert!(matches!(decode_quantized(&bytes[..bytes.len() - 1], net.architecture()), Err(QuantError::Format { .. })));
        let mut bad = bytes.clone();
        bad[0] = 0;
        assert!(matches!(decode_quantized(&bad, net.architecture()), Err(QuantError::Format { offset: 0, .. })));
        let uncal = QuantizedNetwork::weights_only(&net);
        let back = decode_quantized(&encode_quantized(&uncal), net.architecture()).unwrap();
        assert!(back.calibration().is_none());
    }

    #[test]
    fn batch_rows_independent() {
        let (net, x) = net_and_batch(6, 20);
        let q = quantize_network(&net, &calibrate(&net, &x).unwrap()).unwrap();
        let all = q.qforward(&x).unwrap();
        let one = Tensor::from_vec(&[1, 1, 16, 20], x.data()[320 * 7..320 * 8].to_vec()).unwrap();
        assert_eq!(q.qforward(&one).unwrap().row(0), all.row(7));
    }
}
