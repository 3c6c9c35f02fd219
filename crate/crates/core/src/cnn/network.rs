use std::fmt;
use std::str::FromStr;

use rand_distr::{Distribution, Normal};

use super::ops::{self, conv_forward_batch, maxpool_forward, softmax_row};
use super::gemm::gemm_nt;
use super::CnnError;
use crate::rng::child_rng;
use crate::tensor::{Real, Tensor};

/// Centre of the normalised input range.
const INPUT_MIDPOINT: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LayerSpec {
    /// Square kernel of odd size, stride 1, zero same-padding.
    Conv { filters: usize, kernel: usize },
    Relu,
    /// 2×2 window, stride 2, floor on odd sizes.
    MaxPool,
    Flatten,
    Dense { outputs: usize },
    Softmax,
}

impl LayerSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            LayerSpec::Conv { .. } => "conv",
            LayerSpec::Relu => "relu",
            LayerSpec::MaxPool => "maxpool",
            LayerSpec::Flatten => "flatten",
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::Softmax => "softmax",
        }
    }

    pub fn has_params(&self) -> bool {
        matches!(self, LayerSpec::Conv { .. } | LayerSpec::Dense { .. })
    }
}

/// Named filter pyramids for the canonical classifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Preset {
    /// Filters 8, 16, 16, 16, 16 for quick desk-scale training.
    Tiny,
    /// Filters 32, 64, 512, 512, 256.
    Full,
}

impl Preset {
    pub fn filters(self) -> [usize; 5] {
        match self {
            Preset::Tiny => [8, 16, 16, 16, 16],
            Preset::Full => [32, 64, 512, 512, 256],
        }
    }

    pub fn architecture(self) -> Architecture {
        Architecture::canonical([1, 80, 120], &self.filters(), 4)
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Preset::Tiny => "tiny",
            Preset::Full => "full",
        })
    }
}

impl FromStr for Preset {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "tiny" => Ok(Preset::Tiny),
            "full" => Ok(Preset::Full),
            other => Err(format!("unknown preset {other:?} (expected tiny or full)")),
        }
    }
}

/// Input shape plus ordered layer list.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Architecture {
    pub input: [usize; 3],
    pub layers: Vec<LayerSpec>,
}

impl Architecture {
    /// `conv → relu → pool` for every filter count except the last, then
    /// `conv → relu → flatten → dense(classes) → softmax`.
    pub fn canonical(input: [usize; 3], filters: &[usize], classes: usize) -> Self {
        let mut layers = Vec::new();
        for (i, &f) in filters.iter().enumerate() {
            layers.push(LayerSpec::Conv { filters: f, kernel: 3 });
            layers.push(LayerSpec::Relu);
            if i + 1 < filters.len() {
                layers.push(LayerSpec::MaxPool);
            }
        }
        layers.extend([LayerSpec::Flatten, LayerSpec::Dense { outputs: classes }, LayerSpec::Softmax]);
        Self { input, layers }
    }

    /// Activation shapes: entry 0 is the input, entry `l + 1` the output of layer `l`.
    pub fn shapes(&self) -> Result<Vec<Vec<usize>>, CnnError> {
        let mut shapes = vec![self.input.to_vec()];
        if self.input.iter().any(|&d| d == 0) {
            return Err(CnnError::layer(0, CnnError::InvalidArgument(format!("empty input {:?}", self.input))));
        }
        for (l, spec) in self.layers.iter().enumerate() {
            let cur = shapes.last().expect("non-empty");
            let bad = |why: &str| CnnError::layer(l, CnnError::InvalidArgument(format!("{} on {cur:?}: {why}", spec.kind())));
            let next = match *spec {
                LayerSpec::Conv { filters, kernel } => {
                    if cur.len() != 3 || filters == 0 || kernel % 2 == 0 {
                        return Err(bad("needs (C, H, W), filters > 0 and an odd kernel"));
                    }
                    vec![filters, cur[1], cur[2]]
                }
                LayerSpec::Relu => cur.clone(),
                LayerSpec::MaxPool => {
                    if cur.len() != 3 || cur[1] < 2 || cur[2] < 2 {
                        return Err(bad("needs (C, H>=2, W>=2)"));
                    }
                    vec![cur[0], cur[1] / 2, cur[2] / 2]
                }
                LayerSpec::Flatten => vec![cur.iter().product()],
                LayerSpec::Dense { outputs } => {
                    if cur.len() != 1 || outputs == 0 {
                        return Err(bad("needs a flat input"));
                    }
                    vec![outputs]
                }
                LayerSpec::Softmax => {
                    if cur.len() != 1 || l + 1 != self.layers.len() {
                        return Err(bad("must be the final layer over a flat input"));
                    }
                    cur.clone()
                }
            };
            shapes.push(next);
        }
        if self.layers.last() != Some(&LayerSpec::Softmax) {
            return Err(CnnError::InvalidArgument("final layer must be softmax".into()));
        }
        Ok(shapes)
    }

    pub fn classes(&self) -> usize {
        self.layers
            .iter()
            .rev()
            .find_map(|l| match l {
                LayerSpec::Dense { outputs } => Some(*outputs),
                _ => None,
            })
            .unwrap_or(0)
    }

    /// `(weight shape, fan_in)` for every parameterised layer, `None` elsewhere.
    pub fn param_shapes(&self) -> Result<Vec<Option<Vec<usize>>>, CnnError> {
        let shapes = self.shapes()?;
        Ok(self
            .layers
            .iter()
            .enumerate()
            .map(|(l, spec)| match *spec {
                LayerSpec::Conv { filters, kernel } => Some(vec![filters, shapes[l][0], kernel, kernel]),
                LayerSpec::Dense { outputs } => Some(vec![outputs, shapes[l][0]]),
                _ => None,
            })
            .collect())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<T: Real = f32> {
    pub weights: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Real> LayerParams<T> {
    fn zeros(wshape: &[usize]) -> Self {
        Self {
            weights: Tensor::zeros(wshape),
            bias: Tensor::zeros(&[wshape[0]]),
        }
    }
}

/// Layer list with parameters. Immutable during inference; `forward` takes
/// `&self` and keeps no state, so it can run from many threads at once.
#[derive(Debug, Clone, PartialEq)]
pub struct Network<T: Real = f32> {
    arch: Architecture,
    shapes: Vec<Vec<usize>>,
    params: Vec<Option<LayerParams<T>>>,
}

impl<T: Real> Network<T> {
    /// He initialisation: weights ~ N(0, 2 / fan_in). Biases start at zero,
    /// except in the first layer where each unit's bias is `−0.5 · Σ w` so a
    /// mid-grey input gives zero pre-activation (inputs live in [0, 1]).
    pub fn new(arch: Architecture, seed: u64) -> Result<Self, CnnError> {
        let mut net = Self::zeros(arch)?;
        let mut first = true;
        for (l, p) in net.params.iter_mut().enumerate() {
            if let Some(p) = p {
                let fan_in: usize = p.weights.shape()[1..].iter().product();
                let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
                let mut rng = child_rng(seed, 0x1E17, l as u64);
                for w in p.weights.data_mut() {
                    *w = T::from_f64(normal.sample(&mut rng));
                }
                if first {
                    for (b, unit) in p.bias.data_mut().iter_mut().zip(p.weights.data().chunks_exact(fan_in)) {
                        let sum: f64 = unit.iter().map(|w| w.as_f64()).sum();
                        *b = T::from_f64(-INPUT_MIDPOINT * sum);
                    }
                    first = false;
                }
            }
        }
        Ok(net)
    }

    pub fn zeros(arch: Architecture) -> Result<Self, CnnError> {
        let shapes = arch.shapes()?;
        let params = arch
            .param_shapes()?
            .into_iter()
            .map(|s| s.map(|s| LayerParams::zeros(&s)))
            .collect();
        Ok(Self { arch, shapes, params })
    }

    pub fn from_params(arch: Architecture, params: Vec<Option<LayerParams<T>>>) -> Result<Self, CnnError> {
        let mut net = Self::zeros(arch)?;
        if params.len() != net.params.len() {
            return Err(CnnError::InvalidArgument(format!(
                "{} parameter slots for {} layers",
                params.len(),
                net.params.len()
            )));
        }
        for (l, (slot, given)) in net.params.iter_mut().zip(params).enumerate() {
            match (slot.as_ref(), given) {
                (None, None) => {}
                (Some(expect), Some(given)) => {
                    if given.weights.shape() != expect.weights.shape() || given.bias.shape() != expect.bias.shape() {
                        return Err(CnnError::layer(
                            l,
                            CnnError::Shape {
                                context: "parameters".into(),
                                left: given.weights.shape().to_vec(),
                                right: expect.weights.shape().to_vec(),
                            },
                        ));
                    }
                    *slot = Some(given);
                }
                _ => return Err(CnnError::layer(l, CnnError::InvalidArgument("parameter presence mismatch".into()))),
            }
        }
        Ok(net)
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.arch.layers
    }

    /// Activation shapes, see [`Architecture::shapes`].
    pub fn shapes(&self) -> &[Vec<usize>] {
        &self.shapes
    }

    pub fn params(&self) -> &[Option<LayerParams<T>>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Option<LayerParams<T>>] {
        &mut self.params
    }

    pub fn classes(&self) -> usize {
        self.arch.classes()
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.arch.input
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().flatten().map(|p| p.weights.len() + p.bias.len()).sum()
    }

    pub fn cast<U: Real>(&self) -> Network<U> {
        Network {
            arch: self.arch.clone(),
            shapes: self.shapes.clone(),
            params: self
                .params
                .iter()
                .map(|p| {
                    p.as_ref().map(|p| LayerParams {
                        weights: p.weights.cast(),
                        bias: p.bias.cast(),
                    })
                })
                .collect(),
        }
    }

    fn check_batch(&self, batch: &Tensor<T>) -> Result<usize, CnnError> {
        let s = batch.shape();
        if s.len() != 4 || s[1..] != self.arch.input {
            let mut expect = vec![0];
            expect.extend_from_slice(&self.arch.input);
            return Err(CnnError::layer(
                0,
                CnnError::Shape {
                    context: "batch (B, C, H, W)".into(),
                    left: s.to_vec(),
                    right: expect,
                },
            ));
        }
        Ok(s[0])
    }

    /// Class probabilities `(B, k)` for a batch `(B, C, H, W)`.
    pub fn forward(&self, batch: &Tensor<T>) -> Result<Tensor<T>, CnnError> {
        self.forward_observed(batch, &mut |_, _| {})
    }

    /// [`Network::forward`] that also hands every activation of the whole
    /// batch to `observe` (index 0 is the input, `l + 1` the output of layer `l`).
    pub fn forward_observed(&self, batch: &Tensor<T>, observe: &mut dyn FnMut(usize, &[T])) -> Result<Tensor<T>, CnnError> {
        let b = self.check_batch(batch)?;
        let mut cur = batch.data().to_vec();
        observe(0, &cur);
        for (l, spec) in self.arch.layers.iter().enumerate() {
            let in_shape = &self.shapes[l];
            let out_len: usize = self.shapes[l + 1].iter().product();
            cur = match *spec {
                LayerSpec::Conv { kernel, .. } => {
                    let p = self.params[l].as_ref().expect("conv params");
                    let mut out = vec![T::zero(); b * out_len];
                    conv_forward_batch(
                        &cur,
                        b,
                        (in_shape[0], in_shape[1], in_shape[2]),
                        kernel,
                        p.weights.data(),
                        p.bias.data(),
                        &mut out,
                    );
                    out
                }
                LayerSpec::Relu => {
                    for v in cur.iter_mut() {
                        if !(*v > T::zero()) {
                            *v = T::zero();
                        }
                    }
                    cur
                }
                LayerSpec::MaxPool => {
                    let in_len: usize = in_shape.iter().product();
                    let mut out = vec![T::zero(); b * out_len];
                    for (src, dst) in cur.chunks_exact(in_len).zip(out.chunks_exact_mut(out_len)) {
                        maxpool_forward(src, (in_shape[0], in_shape[1], in_shape[2]), dst, None);
                    }
                    out
                }
                LayerSpec::Flatten => cur,
                LayerSpec::Dense { outputs } => {
                    let p = self.params[l].as_ref().expect("dense params");
                    let n = in_shape[0];
                    let mut out = Vec::with_capacity(b * outputs);
                    for _ in 0..b {
                        out.extend_from_slice(p.bias.data());
                    }
                    gemm_nt(b, outputs, n, &cur, p.weights.data(), &mut out);
                    out
                }
                LayerSpec::Softmax => {
                    let k = in_shape[0];
                    let mut out = vec![T::zero(); b * k];
                    for (z, o) in cur.chunks_exact(k).zip(out.chunks_exact_mut(k)) {
                        softmax_row(z, o);
                    }
                    out
                }
            };
            observe(l + 1, &cur);
        }
        Ok(Tensor::from_parts(vec![b, self.classes()], cur))
    }

    /// Runs a single `(C, H, W)` sample through the layer primitives, returning
    /// every activation (input first, probabilities last).
    pub fn trace(&self, input: &Tensor<T>) -> Result<Vec<Tensor<T>>, CnnError> {
        if input.shape() != self.arch.input {
            return Err(CnnError::layer(
                0,
                CnnError::Shape {
                    context: "sample (C, H, W)".into(),
                    left: input.shape().to_vec(),
                    right: self.arch.input.to_vec(),
                },
            ));
        }
        let mut acts = vec![input.clone()];
        for (l, spec) in self.arch.layers.iter().enumerate() {
            let x = acts.last().expect("non-empty");
            let wrap = |e| CnnError::layer(l, e);
            let y = match spec {
                LayerSpec::Conv { .. } => {
                    let p = self.params[l].as_ref().expect("conv params");
                    ops::conv2d(x, &p.weights, &p.bias).map_err(wrap)?
                }
                LayerSpec::Relu => ops::relu(x),
                LayerSpec::MaxPool => ops::maxpool2(x).map_err(wrap)?,
                LayerSpec::Flatten => x.clone().reshape(&[x.len()]).map_err(|e| wrap(e.into()))?,
                LayerSpec::Dense { .. } => {
                    let p = self.params[l].as_ref().expect("dense params");
                    ops::dense(x, &p.weights, &p.bias).map_err(wrap)?
                }
                LayerSpec::Softmax => ops::softmax(x).map_err(wrap)?,
            };
            acts.push(y);
        }
        Ok(acts)
    }

    /// Arg-max class per batch row.
    pub fn predict(&self, batch: &Tensor<T>) -> Result<Vec<usize>, CnnError> {
        let probs = self.forward(batch)?;
        Ok(argmax_rows(probs.data(), self.classes()))
    }
}

pub fn argmax_rows<T: Real>(data: &[T], k: usize) -> Vec<usize> {
    data.chunks_exact(k)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, T::neg_infinity()), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
                .0
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_arch() -> Architecture {
        Architecture::canonical([1, 12, 16], &[3, 4], 4)
    }

    #[test]
    fn full_preset_spatial_trace() {
        let shapes = Preset::Full.architecture().shapes().unwrap();
        let spatial: Vec<(usize, usize)> = shapes
            .iter()
            .filter(|s| s.len() == 3)
            .map(|s| (s[1], s[2]))
            .collect();
        for pair in [(80, 120), (40, 60), (20, 30), (10, 15), (5, 7)] {
            assert!(spatial.contains(&pair), "{pair:?} missing from {spatial:?}");
        }
        assert!(shapes.contains(&vec![8960]));
        assert_eq!(shapes.last().unwrap(), &vec![4]);
        assert!(Preset::Tiny.architecture().shapes().unwrap().contains(&vec![560]));
    }

    #[test]
    fn invalid_architectures_name_layer() {
        let mut arch = small_arch();
        arch.layers.insert(3, LayerSpec::Dense { outputs: 3 });
        let err = arch.shapes().unwrap_err();
        assert!(matches!(err, CnnError::Layer { layer: 3, .. }), "{err}");
        let mut arch = small_arch();
        arch.layers.pop();
        assert!(arch.shapes().is_err());
    }

    #[test]
    fn batch_shape_and_row_sums() {
        let net = Network::<f64>::new(small_arch(), 3).unwrap();
        let batch = Tensor::from_vec(&[2, 1, 12, 16], (0..384).map(|i| (i as f64 * 0.01).sin()).collect()).unwrap();
        let p = net.forward(&batch).unwrap();
        assert_eq!(p.shape(), &[2, 4]);
        for row in p.data().chunks(4) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn duplicated_rows_identical_and_permutation_equivariant() {
        let net = Network::<f32>::new(small_arch(), 4).unwrap();
        let a: Vec<f32> = (0..192).map(|i| (i as f32 * 0.13).cos()).collect();
        let b: Vec<f32> = (0..192).map(|i| (i as f32 * 0.07).sin()).collect();
        let ab = Tensor::from_vec(&[2, 1, 12, 16], [a.clone(), b.clone()].concat()).unwrap();
        let ba = Tensor::from_vec(&[2, 1, 12, 16], [b, a.clone()].concat()).unwrap();
        let aa = Tensor::from_vec(&[2, 1, 12, 16], [a.clone(), a].concat()).unwrap();
        let pab = net.forward(&ab).unwrap();
        let pba = net.forward(&ba).unwrap();
        assert_eq!(pab.row(0), pba.row(1));
        assert_eq!(pab.row(1), pba.row(0));
        let paa = net.forward(&aa).unwrap();
        assert_eq!(paa.row(0), paa.row(1));
    }

    #[test]
    fn batched_path_agrees_with_trace() {
        let net = Network::<f64>::new(small_arch(), 5).unwrap();
        let xs: Vec<Tensor<f64>> = (0..3)
            .map(|s| Tensor::from_vec(&[1, 12, 16], (0..192).map(|i| ((i * (s + 2)) as f64 * 0.05).sin()).collect()).unwrap())
            .collect();
        let p = net.forward(&Tensor::stack(&xs).unwrap()).unwrap();
        for (i, x) in xs.iter().enumerate() {
            let t = net.trace(x).unwrap();
            let last = t.last().unwrap();
            for (a, b) in last.data().iter().zip(p.row(i)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn wrong_batch_shape_is_layer_zero_error() {
        let net = Network::<f32>::new(small_arch(), 0).unwrap();
        let err = net.forward(&Tensor::zeros(&[1, 1, 12, 15])).unwrap_err();
        assert!(matches!(err, CnnError::Layer { layer: 0, .. }));
    }

    #[test]
    fn he_init_is_seeded() {
        let a = Network::<f32>::new(small_arch(), 1).unwrap();
        let b = Network::<f32>::new(small_arch(), 1).unwrap();
        let c = Network::<f32>::new(small_arch(), 2).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!(a.parameter_count(), (3 * 9 + 3) + (4 * 27 + 4) + (4 * 4 * 6 * 8 + 4));
    }

    #[test]
    fn preset_names() {
        assert_eq!("tiny".parse::<Preset>().unwrap(), Preset::Tiny);
        assert_eq!(Preset::Full.to_string(), "full");
        assert!("huge".parse::<Preset>().is_err());
    }
}
