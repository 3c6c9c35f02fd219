use rand::seq::SliceRandom;

use super::network::{argmax_rows, LayerParams, LayerSpec, Network};
use super::ops;
use super::CnnError;
use crate::datagen::{preprocess, Sample, SampleSet};
use crate::rng::child_rng;
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            batch_size: 32,
            epochs: 30,
            seed: 42,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), CnnError> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(CnnError::InvalidArgument(format!("learning rate {} must be positive", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(CnnError::InvalidArgument("batch size must be at least 1".into()));
        }
        Ok(())
    }
}

/// Preprocessed inputs `(C, H, W)` with their class indices.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingData<T: Real = f32> {
    pub inputs: Vec<Tensor<T>>,
    pub labels: Vec<usize>,
}

impl<T: Real> TrainingData<T> {
    pub fn new(inputs: Vec<Tensor<T>>, labels: Vec<usize>) -> Result<Self, CnnError> {
        if inputs.len() != labels.len() {
            return Err(CnnError::InvalidArgument(format!(
                "{} inputs but {} labels",
                inputs.len(),
                labels.len()
            )));
        }
        Ok(Self { inputs, labels })
    }

    /// Preprocesses every sample to `height × width`.
    pub fn from_samples(samples: &[Sample], height: usize, width: usize) -> Result<Self, CnnError> {
        let mut inputs = Vec::with_capacity(samples.len());
        for s in samples {
            let x = preprocess::<T>(&s.image, height, width).map_err(|e| CnnError::InvalidArgument(e.to_string()))?;
            inputs.push(x);
        }
        let labels = samples.iter().map(|s| s.annotation.class.index()).collect();
        Ok(Self { inputs, labels })
    }

    pub fn from_set(set: &SampleSet, height: usize, width: usize) -> Result<Self, CnnError> {
        Self::from_samples(&set.samples, height, width)
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    /// Stacks the samples at `indices` into a `(B, C, H, W)` batch.
    pub fn batch(&self, indices: &[usize]) -> Result<Tensor<T>, CnnError> {
        let items: Vec<Tensor<T>> = indices.iter().map(|&i| self.inputs[i].clone()).collect();
        Ok(Tensor::stack(&items)?)
    }
}

/// Parameter gradients laid out like [`Network::params`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T: Real = f32> {
    pub layers: Vec<Option<LayerParams<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn zeros_like(net: &Network<T>) -> Self {
        Self {
            layers: net
                .params()
                .iter()
                .map(|p| {
                    p.as_ref().map(|p| LayerParams {
                        weights: Tensor::zeros(p.weights.shape()),
                        bias: Tensor::zeros(p.bias.shape()),
                    })
                })
                .collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().flatten().all(|p| p.weights.is_finite() && p.bias.is_finite())
    }
}

fn add_into<T: Real>(acc: &mut Tensor<T>, g: &Tensor<T>) {
    for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
        *a += b;
    }
}

/// Loss of one sample and the gradient of that loss, added into `grads`.
pub fn accumulate_gradients<T: Real>(
    net: &Network<T>,
    input: &Tensor<T>,
    class: usize,
    grads: &mut Gradients<T>,
) -> Result<f64, CnnError> {
    let acts = net.trace(input)?;
    let k = net.classes();
    if class >= k {
        return Err(CnnError::InvalidArgument(format!("class {class} outside 0..{k}")));
    }
    let y = ops::one_hot::<T>(k, class);
    let p = acts.last().expect("output");
    let loss = ops::cross_entropy(&y, p)?;
    let mut g = ops::cross_entropy_grad(&y, p)?;
    for (l, spec) in net.layers().iter().enumerate().rev() {
        let x = &acts[l];
        let wrap = |e| CnnError::layer(l, e);
        g = match spec {
            LayerSpec::Softmax => ops::softmax_backward(&acts[l + 1], &g),
            LayerSpec::Dense { .. } | LayerSpec::Conv { .. } => {
                let p = net.params()[l].as_ref().expect("params");
                let (dx, dw, db) = if matches!(spec, LayerSpec::Dense { .. }) {
                    ops::dense_backward(x, &p.weights, &g).map_err(wrap)?
                } else {
                    ops::conv2d_backward(x, &p.weights, &g).map_err(wrap)?
                };
                let slot = grads.layers[l].as_mut().expect("gradient slot");
                add_into(&mut slot.weights, &dw);
                add_into(&mut slot.bias, &db);
                dx
            }
            LayerSpec::Flatten => g.reshape(x.shape()).map_err(|e| wrap(e.into()))?,
            LayerSpec::MaxPool => ops::maxpool2_backward(x, &g).map_err(wrap)?,
            LayerSpec::Relu => ops::relu_backward(x, &g),
        };
    }
    Ok(loss)
}

fn is_numeric(e: &CnnError) -> bool {
    match e {
        CnnError::Numeric(_) => true,
        CnnError::Layer { source, .. } => is_numeric(source),
        _ => false,
    }
}

/// Loss and parameter gradients for a single sample.
pub fn backprop<T: Real>(net: &Network<T>, input: &Tensor<T>, class: usize) -> Result<(f64, Gradients<T>), CnnError> {
    let mut grads = Gradients::zeros_like(net);
    let loss = accumulate_gradients(net, input, class, &mut grads)?;
    Ok((loss, grads))
}

/// One pass of mini-batch SGD over `data` in a seeded shuffled order.
/// Returns the updated network and the mean per-sample loss.
pub fn train_epoch<T: Real>(
    net: &Network<T>,
    data: &TrainingData<T>,
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<(Network<T>, f64), CnnError> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(CnnError::InvalidArgument("empty training set".into()));
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut child_rng(cfg.seed, 0x7A1E, epoch as u64));
    let mut net = net.clone();
    let mut total = 0.0;
    for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
        let mut grads = Gradients::zeros_like(&net);
        let mut batch_loss = 0.0;
        for &i in chunk {
            batch_loss += match accumulate_gradients(&net, &data.inputs[i], data.labels[i], &mut grads) {
                Ok(loss) => loss,
                Err(e) if is_numeric(&e) => return Err(CnnError::NonFiniteLoss { epoch, batch: b }),
                Err(e) => return Err(e),
            };
        }
        if !batch_loss.is_finite() || !grads.is_finite() {
            return Err(CnnError::NonFiniteLoss { epoch, batch: b });
        }
        total += batch_loss;
        let step = T::from_f64(cfg.learning_rate / chunk.len() as f64);
        for (p, g) in net.params_mut().iter_mut().zip(&grads.layers) {
            if let (Some(p), Some(g)) = (p, g) {
                for (w, &d) in p.weights.data_mut().iter_mut().zip(g.weights.data()) {
                    *w -= step * d;
                }
                for (w, &d) in p.bias.data_mut().iter_mut().zip(g.bias.data()) {
                    *w -= step * d;
                }
                if !p.weights.is_finite() || !p.bias.is_finite() {
                    return Err(CnnError::NonFiniteLoss { epoch, batch: b });
                }
            }
        }
    }
    Ok((net, total / data.len() as f64))
}

/// Arg-max predictions for every sample, evaluated in batches of 32.
pub fn evaluate<T: Real>(net: &Network<T>, data: &TrainingData<T>) -> Result<Vec<usize>, CnnError> {
    let mut out = Vec::with_capacity(data.len());
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(32) {
        let probs = net.forward(&data.batch(chunk)?)?;
        out.extend(argmax_rows(probs.data(), net.classes()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cnn::Architecture;

    fn toy() -> (Network<f64>, TrainingData<f64>) {
        let arch = Architecture::canonical([1, 8, 8], &[4, 4], 2);
        let net = Network::new(arch, 9).unwrap();
        let mut inputs = Vec::new();
        let mut labels = Vec::new();
        for i in 0..16 {
            let class = i % 2;
            let data: Vec<f64> = (0..64)
                .map(|p| {
                    let (y, x) = (p / 8, p % 8);
                    let bright = if class == 0 { x < 4 } else { y < 4 };
                    if bright { 0.9 } else { 0.1 + 0.01 * (i as f64) }
                })
                .collect();
            inputs.push(Tensor::from_vec(&[1, 8, 8], data).unwrap());
            labels.push(class);
        }
        (net, TrainingData::new(inputs, labels).unwrap())
    }

    #[test]
    fn loss_decreases_on_toy_problem() {
        let (mut net, data) = toy();
        let cfg = TrainConfig {
            learning_rate: 0.1,
            batch_size: 4,
            epochs: 0,
            seed: 1,
        };
        let (_, first) = train_epoch(&net, &data, &cfg, 0).unwrap();
        let mut last = first;
        for e in 0..20 {
            let (n, l) = train_epoch(&net, &data, &cfg, e).unwrap();
            net = n;
            last = l;
        }
        assert!(last < first * 0.5, "first {first} last {last}");
        let pred = evaluate(&net, &data).unwrap();
        assert_eq!(pred, data.labels);
    }

    #[test]
    fn epoch_is_deterministic() {
        let (net, data) = toy();
        let cfg = TrainConfig::default();
        let a = train_epoch(&net, &data, &cfg, 3).unwrap();
        let b = train_epoch(&net, &data, &cfg, 3).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
    }

    #[test]
    fn bad_config_rejected() {
        let (net, data) = toy();
        let cfg = TrainConfig {
            batch_size: 0,
            ..TrainConfig::default()
        };
        assert!(train_epoch(&net, &data, &cfg, 0).is_err());
    }

    #[test]
    fn divergence_reports_batch() {
        let (net, data) = toy();
        let cfg = TrainConfig {
            learning_rate: 1e300,
            batch_size: 4,
            ..TrainConfig::default()
        };
        let mut cur = net;
        let mut failed = None;
        for e in 0..5 {
            match train_epoch(&cur, &data, &cfg, e) {
                Ok((n, _)) => cur = n,
                Err(err) => {
                    failed = Some(err);
                    break;
                }
            }
        }
        assert!(matches!(failed, Some(CnnError::NonFiniteLoss { .. })), "{failed:?}");
    }
}
