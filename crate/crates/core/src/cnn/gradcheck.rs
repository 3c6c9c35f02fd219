use rand::seq::index::sample;
use rand::Rng;

use super::network::{LayerSpec, Network};
use super::ops;
use super::train::backprop;
use super::{CnnError, ParamKind};
use crate::rng::child_rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckOptions {
    /// Minimum number of parameter coordinates compared.
    pub coordinates: usize,
    /// Central-difference step.
    pub step: f64,
    pub seed: u64,
    /// Multiplies every analytic convolution weight gradient; anything other
    /// than 1 plants a fault that the check has to catch.
    pub conv_grad_scale: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            coordinates: 50,
            step: 1e-5,
            seed: 0,
            conv_grad_scale: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamCoord {
    pub layer: usize,
    pub kind: ParamKind,
    pub index: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    pub worst: Option<ParamCoord>,
    pub loss: f64,
}

/// `|a − n| / max(1e-8, |a| + |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

fn loss_of(net: &Network<f64>, input: &Tensor<f64>, target: &Tensor<f64>) -> Result<f64, CnnError> {
    let acts = net.trace(input)?;
    ops::cross_entropy(target, acts.last().expect("output"))
}

fn pick_coordinates(net: &Network<f64>, opts: &GradCheckOptions) -> Vec<ParamCoord> {
    let mut tensors = Vec::new();
    for (l, p) in net.params().iter().enumerate() {
        if let Some(p) = p {
            tensors.push((l, ParamKind::Weight, p.weights.len()));
            tensors.push((l, ParamKind::Bias, p.bias.len()));
        }
    }
    if tensors.is_empty() {
        return Vec::new();
    }
    let per = opts.coordinates.div_ceil(tensors.len());
    let mut quotas: Vec<usize> = tensors.iter().map(|t| per.min(t.2)).collect();
    let mut deficit = opts.coordinates.saturating_sub(quotas.iter().sum());
    for (q, t) in quotas.iter_mut().zip(&tensors) {
        let extra = (t.2 - *q).min(deficit);
        *q += extra;
        deficit -= extra;
    }
    let mut rng = child_rng(opts.seed, 0x64AD, 0);
    let mut coords = Vec::new();
    for (&(layer, kind, len), &q) in tensors.iter().zip(&quotas) {
        for index in sample(&mut rng, len, q).into_iter() {
            coords.push(ParamCoord { layer, kind, index });
        }
    }
    coords
}

/// Compares backpropagated parameter gradients of the cross-entropy loss with
/// central differences on a seeded selection of coordinates.
pub fn grad_check(
    net: &Network<f64>,
    input: &Tensor<f64>,
    target: &Tensor<f64>,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport, CnnError> {
    if !(opts.step > 0.0) {
        return Err(CnnError::InvalidArgument("finite-difference step must be positive".into()));
    }
    let class = ops::one_hot_index(target)?;
    let (loss, mut grads) = backprop(net, input, class)?;
    for (spec, g) in net.layers().iter().zip(grads.layers.iter_mut()) {
        if let (LayerSpec::Conv { .. }, Some(g)) = (spec, g) {
            for v in g.weights.data_mut() {
                *v *= opts.conv_grad_scale;
            }
        }
    }
    let mut probe = net.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        worst: None,
        loss,
    };
    for c in pick_coordinates(net, opts) {
        let analytic = {
            let g = grads.layers[c.layer].as_ref().expect("gradient slot");
            match c.kind {
                ParamKind::Weight => g.weights.data()[c.index],
                ParamKind::Bias => g.bias.data()[c.index],
            }
        };
        let original = get_param(&probe, c);
        set_param(&mut probe, c, original + opts.step);
        let plus = loss_of(&probe, input, target)?;
        set_param(&mut probe, c, original - opts.step);
        let minus = loss_of(&probe, input, target)?;
        set_param(&mut probe, c, original);
        let numeric = (plus - minus) / (2.0 * opts.step);
        let err = relative_error(analytic, numeric);
        report.checked += 1;
        if err > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = report.max_rel_error.max(err);
            report.worst = Some(c);
        }
    }
    Ok(report)
}

fn get_param(net: &Network<f64>, c: ParamCoord) -> f64 {
    let p = net.params()[c.layer].as_ref().expect("params");
    match c.kind {
        ParamKind::Weight => p.weights.data()[c.index],
        ParamKind::Bias => p.bias.data()[c.index],
    }
}

fn set_param(net: &mut Network<f64>, c: ParamCoord, value: f64) {
    let p = net.params_mut()[c.layer].as_mut().expect("params");
    match c.kind {
        ParamKind::Weight => p.weights.data_mut()[c.index] = value,
        ParamKind::Bias => p.bias.data_mut()[c.index] = value,
    }
}

/// Layer types that can be checked in isolation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LayerKind {
    Conv,
    Relu,
    MaxPool,
    Dense,
    Softmax,
    CrossEntropy,
}

impl LayerKind {
    pub const ALL: [LayerKind; 6] = [
        LayerKind::Conv,
        LayerKind::Relu,
        LayerKind::MaxPool,
        LayerKind::Dense,
        LayerKind::Softmax,
        LayerKind::CrossEntropy,
    ];
}

fn random(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_parts(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect())
}

fn project(out: &Tensor<f64>, r: &Tensor<f64>) -> f64 {
    out.data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
}

/// Checks one layer's backward pass against central differences of the
/// scalar `Σ r_i · out_i` (or the loss itself for cross-entropy) over every
/// input and parameter coordinate. Returns the largest relative error.
pub fn layer_grad_check(kind: LayerKind, seed: u64, step: f64) -> Result<f64, CnnError> {
    let mut rng = child_rng(seed, 0x1A7E, kind as u64);
    let mut worst: f64 = 0.0;
    let mut check = |tensors: &mut [Tensor<f64>], analytic: &[Tensor<f64>], f: &dyn Fn(&[Tensor<f64>]) -> Result<f64, CnnError>| -> Result<(), CnnError> {
        for t in 0..tensors.len() {
            for i in 0..tensors[t].len() {
                let orig = tensors[t].data()[i];
                tensors[t].data_mut()[i] = orig + step;
                let plus = f(tensors)?;
                tensors[t].data_mut()[i] = orig - step;
                let minus = f(tensors)?;
                tensors[t].data_mut()[i] = orig;
                let numeric = (plus - minus) / (2.0 * step);
                worst = worst.max(relative_error(analytic[t].data()[i], numeric));
            }
        }
        Ok(())
    };
    match kind {
        LayerKind::Conv => {
            let mut ts = vec![random(&mut rng, &[2, 5, 6], -1.0, 1.0), random(&mut rng, &[3, 2, 3, 3], -0.5, 0.5), random(&mut rng, &[3], -0.5, 0.5)];
            let r = random(&mut rng, &[3, 5, 6], -1.0, 1.0);
            let (dx, dw, db) = ops::conv2d_backward(&ts[0], &ts[1], &r)?;
            check(&mut ts, &[dx, dw, db], &|t| Ok(project(&ops::conv2d(&t[0], &t[1], &t[2])?, &r)))?;
        }
        LayerKind::Dense => {
            let mut ts = vec![random(&mut rng, &[7], -1.0, 1.0), random(&mut rng, &[4, 7], -0.5, 0.5), random(&mut rng, &[4], -0.5, 0.5)];
            let r = random(&mut rng, &[4], -1.0, 1.0);
            let (dx, dw, db) = ops::dense_backward(&ts[0], &ts[1], &r)?;
            check(&mut ts, &[dx, dw, db], &|t| Ok(project(&ops::dense(&t[0], &t[1], &t[2])?, &r)))?;
        }
        LayerKind::Relu => {
            // Keep inputs away from the kink at zero so the step never crosses it.
            let data = (0..24)
                .map(|_| {
                    let m = rng.random_range(0.05..1.0);
                    if rng.random_bool(0.5) { m } else { -m }
                })
                .collect();
            let mut ts = vec![Tensor::from_parts(vec![2, 3, 4], data)];
            let r = random(&mut rng, &[2, 3, 4], -1.0, 1.0);
            let dx = ops::relu_backward(&ts[0], &r);
            check(&mut ts, &[dx], &|t| Ok(project(&ops::relu(&t[0]), &r)))?;
        }
        LayerKind::MaxPool => {
            let mut ts = vec![random(&mut rng, &[2, 5, 7], -1.0, 1.0)];
            let r = random(&mut rng, &[2, 2, 3], -1.0, 1.0);
            let dx = ops::maxpool2_backward(&ts[0], &r)?;
            check(&mut ts, &[dx], &|t| Ok(project(&ops::maxpool2(&t[0])?, &r)))?;
        }
        LayerKind::Softmax => {
            let mut ts = vec![random(&mut rng, &[5], -2.0, 2.0)];
            let r = random(&mut rng, &[5], -1.0, 1.0);
            let p = ops::softmax(&ts[0])?;
            let dz = ops::softmax_backward(&p, &r);
            check(&mut ts, &[dz], &|t| Ok(project(&ops::softmax(&t[0])?, &r)))?;
        }
        LayerKind::CrossEntropy => {
            let y = ops::one_hot::<f64>(5, rng.random_range(0..5));
            let mut ts = vec![random(&mut rng, &[5], 0.05, 0.95)];
            let dp = ops::cross_entropy_grad(&y, &ts[0])?;
            check(&mut ts, &[dp], &|t| ops::cross_entropy(&y, &t[0]))?;
        }
    }
    Ok(worst)
}
