//! Layer primitives and their backward passes.
//!
//! Feature maps are `(C, H, W)`; convolution kernels are square with odd
//! size `K`, stride 1 and zero "same" padding of `K / 2`.

use super::gemm::{gemm_nn, gemm_nt, gemm_tn};
use super::CnnError;
use crate::tensor::{Real, Tensor};

/// Probability floor applied before taking the log in the loss.
pub const PROB_FLOOR: f64 = 1e-12;

/// Unfolds `(C, H, W)` into a `(C·K·K) × (H·W)` block of `dst`, where `dst`
/// rows are `row_len` long and the block starts at column `col0`.
pub(crate) fn im2col<T: Real>(src: &[T], c: usize, h: usize, w: usize, k: usize, dst: &mut [T], row_len: usize, col0: usize) {
    let pad = (k / 2) as isize;
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for dy in 0..k {
            for dx in 0..k {
                let row = (ch * k + dy) * k + dx;
                let out = &mut dst[row * row_len + col0..row * row_len + col0 + h * w];
                let ox = dx as isize - pad;
                // valid x range: 0 <= x + ox < w
                let x0 = (-ox).max(0) as usize;
                let x1 = ((w as isize - ox).min(w as isize)).max(0) as usize;
                for y in 0..h {
                    let sy = y as isize + dy as isize - pad;
                    let orow = &mut out[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize || x0 >= x1 {
                        orow.fill(T::zero());
                        continue;
                    }
                    let srow = &plane[sy as usize * w..(sy as usize + 1) * w];
                    orow[..x0].fill(T::zero());
                    orow[x1..].fill(T::zero());
                    let sx0 = (x0 as isize + ox) as usize;
                    orow[x0..x1].copy_from_slice(&srow[sx0..sx0 + (x1 - x0)]);
                }
            }
        }
    }
}

/// Adjoint of [`im2col`] for a single image: accumulates columns back into `(C, H, W)`.
pub(crate) fn col2im<T: Real>(cols: &[T], c: usize, h: usize, w: usize, k: usize, dst: &mut [T]) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    for ch in 0..c {
        let plane = &mut dst[ch * hw..(ch + 1) * hw];
        for dy in 0..k {
            for dx in 0..k {
                let row = (ch * k + dy) * k + dx;
                let src = &cols[row * hw..(row + 1) * hw];
                let ox = dx as isize - pad;
                let x0 = (-ox).max(0) as usize;
                let x1 = ((w as isize - ox).min(w as isize)).max(0) as usize;
                if x0 >= x1 {
                    continue;
                }
                for y in 0..h {
                    let sy = y as isize + dy as isize - pad;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let sx0 = (x0 as isize + ox) as usize;
                    let prow = &mut plane[sy as usize * w + sx0..sy as usize * w + sx0 + (x1 - x0)];
                    for (p, &v) in prow.iter_mut().zip(&src[y * w + x0..y * w + x1]) {
                        *p += v;
                    }
                }
            }
        }
    }
}

/// Convolves `batch` images of shape `(C, H, W)` stored back to back.
/// `weights` is `(F, C·K·K)`, output is `(batch, F, H, W)`.
pub(crate) fn conv_forward_batch<T: Real>(
    input: &[T],
    batch: usize,
    (c, h, w): (usize, usize, usize),
    k: usize,
    weights: &[T],
    bias: &[T],
    out: &mut [T],
) {
    let f = bias.len();
    let hw = h * w;
    let ckk = c * k * k;
    // group small feature maps so each product is reasonably wide
    let group = (2048 / hw).clamp(1, batch.max(1));
    let mut cols = vec![T::zero(); ckk * group * hw];
    let mut tmp = vec![T::zero(); f * group * hw];
    for b0 in (0..batch).step_by(group) {
        let g = group.min(batch - b0);
        let n = g * hw;
        for i in 0..g {
            let img = &input[(b0 + i) * c * hw..(b0 + i + 1) * c * hw];
            im2col(img, c, h, w, k, &mut cols, n, i * hw);
        }
        let tmp = &mut tmp[..f * n];
        for (row, &bv) in tmp.chunks_exact_mut(n).zip(bias) {
            row.fill(bv);
        }
        gemm_nn(f, n, ckk, weights, &cols[..ckk * n], tmp);
        for i in 0..g {
            let dst = &mut out[(b0 + i) * f * hw..(b0 + i + 1) * f * hw];
            for fi in 0..f {
                dst[fi * hw..(fi + 1) * hw].copy_from_slice(&tmp[fi * n + i * hw..fi * n + (i + 1) * hw]);
            }
        }
    }
}

/// 2×2 stride-2 max pooling of one `(C, H, W)` map; trailing odd rows/columns
/// are dropped. Writes the flat input index of each winner into `argmax`.
pub(crate) fn maxpool_forward<T: Real>(input: &[T], (c, h, w): (usize, usize, usize), out: &mut [T], mut argmax: Option<&mut [usize]>) {
    let (oh, ow) = (h / 2, w / 2);
    for ch in 0..c {
        let base = ch * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let i0 = base + 2 * oy * w + 2 * ox;
                let mut best = i0;
                for cand in [i0 + 1, i0 + w, i0 + w + 1] {
                    if input[cand] > input[best] {
                        best = cand;
                    }
                }
                let o = (ch * oh + oy) * ow + ox;
                out[o] = input[best];
                if let Some(am) = argmax.as_deref_mut() {
                    am[o] = best;
                }
            }
        }
    }
}

fn shape_err(context: &str, left: &[usize], right: &[usize]) -> CnnError {
    CnnError::Shape {
        context: context.to_string(),
        left: left.to_vec(),
        right: right.to_vec(),
    }
}

fn conv_dims<T: Real>(input: &Tensor<T>, weights: &Tensor<T>, bias: &Tensor<T>) -> Result<(usize, usize, usize, usize, usize), CnnError> {
    let (is, ws) = (input.shape(), weights.shape());
    let ok = is.len() == 3
        && ws.len() == 4
        && ws[1] == is[0]
        && ws[2] == ws[3]
        && ws[2] % 2 == 1
        && bias.shape() == [ws[0]];
    if !ok {
        return Err(shape_err("conv2d input/weights", is, ws));
    }
    Ok((is[0], is[1], is[2], ws[0], ws[2]))
}

/// `out[f,y,x] = bias[f] + Σ input[c, y+dy-p, x+dx-p] · weights[f,c,dy,dx]`.
pub fn conv2d<T: Real>(input: &Tensor<T>, weights: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>, CnnError> {
    let (c, h, w, f, k) = conv_dims(input, weights, bias)?;
    let mut out = vec![T::zero(); f * h * w];
    conv_forward_batch(input.data(), 1, (c, h, w), k, weights.data(), bias.data(), &mut out);
    Ok(Tensor::from_parts(vec![f, h, w], out))
}

/// Gradients of a convolution: `(d_input, d_weights, d_bias)`.
pub fn conv2d_backward<T: Real>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    d_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>), CnnError> {
    let f = weights.shape().first().copied().unwrap_or(0);
    let bias = Tensor::<T>::zeros(&[f]);
    let (c, h, w, f, k) = conv_dims(input, weights, &bias)?;
    if d_out.shape() != [f, h, w] {
        return Err(shape_err("conv2d output gradient", d_out.shape(), &[f, h, w]));
    }
    let hw = h * w;
    let ckk = c * k * k;
    let mut cols = vec![T::zero(); ckk * hw];
    im2col(input.data(), c, h, w, k, &mut cols, hw, 0);
    let mut dw = vec![T::zero(); f * ckk];
    gemm_nt(f, ckk, hw, d_out.data(), &cols, &mut dw);
    let db: Vec<T> = d_out.data().chunks_exact(hw).map(|r| r.iter().copied().sum()).collect();
    let mut dcols = vec![T::zero(); ckk * hw];
    gemm_tn(ckk, hw, f, weights.data(), d_out.data(), &mut dcols);
    let mut dx = vec![T::zero(); c * hw];
    col2im(&dcols, c, h, w, k, &mut dx);
    Ok((
        Tensor::from_parts(vec![c, h, w], dx),
        Tensor::from_parts(weights.shape().to_vec(), dw),
        Tensor::from_parts(vec![f], db),
    ))
}

pub fn relu<T: Real>(input: &Tensor<T>) -> Tensor<T> {
    let data = input.data().iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect();
    Tensor::from_parts(input.shape().to_vec(), data)
}

pub fn relu_backward<T: Real>(input: &Tensor<T>, d_out: &Tensor<T>) -> Tensor<T> {
    let data = input
        .data()
        .iter()
        .zip(d_out.data())
        .map(|(&x, &g)| if x > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::from_parts(input.shape().to_vec(), data)
}

fn pool_dims(shape: &[usize]) -> Result<(usize, usize, usize), CnnError> {
    match *shape {
        [c, h, w] if h >= 2 && w >= 2 => Ok((c, h, w)),
        _ => Err(shape_err("maxpool2 needs (C, H>=2, W>=2)", shape, &[])),
    }
}

pub fn maxpool2<T: Real>(input: &Tensor<T>) -> Result<Tensor<T>, CnnError> {
    let (c, h, w) = pool_dims(input.shape())?;
    let mut out = vec![T::zero(); c * (h / 2) * (w / 2)];
    maxpool_forward(input.data(), (c, h, w), &mut out, None);
    Ok(Tensor::from_parts(vec![c, h / 2, w / 2], out))
}

pub fn maxpool2_backward<T: Real>(input: &Tensor<T>, d_out: &Tensor<T>) -> Result<Tensor<T>, CnnError> {
    let (c, h, w) = pool_dims(input.shape())?;
    let n = c * (h / 2) * (w / 2);
    if d_out.len() != n {
        return Err(shape_err("maxpool2 output gradient", d_out.shape(), &[c, h / 2, w / 2]));
    }
    let mut out = vec![T::zero(); n];
    let mut argmax = vec![0; n];
    maxpool_forward(input.data(), (c, h, w), &mut out, Some(&mut argmax));
    let mut dx = vec![T::zero(); input.len()];
    for (&i, &g) in argmax.iter().zip(d_out.data()) {
        dx[i] += g;
    }
    Ok(Tensor::from_parts(input.shape().to_vec(), dx))
}

/// `out = weights · input + bias` with `weights` of shape `(M, N)`.
pub fn dense<T: Real>(input: &Tensor<T>, weights: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>, CnnError> {
    let ws = weights.shape();
    if ws.len() != 2 || ws[1] != input.len() || bias.shape() != [ws[0]] {
        return Err(shape_err("dense input/weights", input.shape(), ws));
    }
    let mut out = bias.data().to_vec();
    gemm_nt(1, ws[0], ws[1], input.data(), weights.data(), &mut out);
    Ok(Tensor::from_parts(vec![ws[0]], out))
}

/// Gradients of a dense layer: `(d_input, d_weights, d_bias)`.
pub fn dense_backward<T: Real>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    d_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>), CnnError> {
    let ws = weights.shape();
    if ws.len() != 2 || ws[1] != input.len() || d_out.len() != ws[0] {
        return Err(shape_err("dense backward", input.shape(), ws));
    }
    let (m, n) = (ws[0], ws[1]);
    let mut dw = vec![T::zero(); m * n];
    gemm_nn(m, n, 1, d_out.data(), input.data(), &mut dw);
    let mut dx = vec![T::zero(); n];
    gemm_nn(1, n, m, d_out.data(), weights.data(), &mut dx);
    Ok((
        Tensor::from_parts(input.shape().to_vec(), dx),
        Tensor::from_parts(ws.to_vec(), dw),
        Tensor::from_parts(vec![m], d_out.data().to_vec()),
    ))
}

/// Max-shifted softmax of one row, written into `out`.
pub(crate) fn softmax_row<T: Real>(z: &[T], out: &mut [T]) {
    let max = z.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for (o, &v) in out.iter_mut().zip(z) {
        *o = (v - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o = *o / sum;
    }
}

/// `σ(z)_i = exp(z_i − max z) / Σ_j exp(z_j − max z)`.
pub fn softmax<T: Real>(z: &Tensor<T>) -> Result<Tensor<T>, CnnError> {
    if z.is_empty() {
        return Err(CnnError::InvalidArgument("softmax of an empty vector".into()));
    }
    if !z.is_finite() {
        return Err(CnnError::Numeric("softmax input is not finite".into()));
    }
    let mut out = vec![T::zero(); z.len()];
    softmax_row(z.data(), &mut out);
    Ok(Tensor::from_parts(z.shape().to_vec(), out))
}

/// Vector-Jacobian product of softmax: `dz_i = p_i (g_i − Σ_j p_j g_j)`.
pub fn softmax_backward<T: Real>(p: &Tensor<T>, d_p: &Tensor<T>) -> Tensor<T> {
    let inner: T = p.data().iter().zip(d_p.data()).map(|(&a, &b)| a * b).sum();
    let data = p.data().iter().zip(d_p.data()).map(|(&pi, &gi)| pi * (gi - inner)).collect();
    Tensor::from_parts(p.shape().to_vec(), data)
}

/// Index of the hot entry of a one-hot vector.
pub fn one_hot_index<T: Real>(y: &Tensor<T>) -> Result<usize, CnnError> {
    let mut hot = None;
    for (i, &v) in y.data().iter().enumerate() {
        if v == T::one() && hot.is_none() {
            hot = Some(i);
        } else if v != T::zero() {
            return Err(CnnError::InvalidArgument(format!("target is not one-hot (entry {i} = {v})")));
        }
    }
    hot.ok_or_else(|| CnnError::InvalidArgument("target has no hot entry".into()))
}

pub fn one_hot<T: Real>(k: usize, class: usize) -> Tensor<T> {
    let mut t = Tensor::zeros(&[k]);
    t.data_mut()[class] = T::one();
    t
}

fn check_probs<T: Real>(y: &Tensor<T>, p: &Tensor<T>) -> Result<usize, CnnError> {
    if y.len() != p.len() {
        return Err(shape_err("cross_entropy target/prediction", y.shape(), p.shape()));
    }
    if let Some(v) = p.data().iter().find(|v| !(**v >= T::zero() && **v <= T::one())) {
        return Err(CnnError::InvalidArgument(format!("probability {v} outside [0, 1]")));
    }
    one_hot_index(y)
}

/// `−Σ y_i log ŷ_i` for one-hot `y`, with `ŷ` clamped to `[1e-12, 1]`.
pub fn cross_entropy<T: Real>(y: &Tensor<T>, p: &Tensor<T>) -> Result<f64, CnnError> {
    let t = check_probs(y, p)?;
    Ok(-p.data()[t].as_f64().clamp(PROB_FLOOR, 1.0).ln())
}

/// Gradient of [`cross_entropy`] with respect to `ŷ`; zero inside the clamped region.
pub fn cross_entropy_grad<T: Real>(y: &Tensor<T>, p: &Tensor<T>) -> Result<Tensor<T>, CnnError> {
    let t = check_probs(y, p)?;
    let mut g = Tensor::zeros(p.shape());
    let pt = p.data()[t].as_f64();
    if pt >= PROB_FLOOR {
        g.data_mut()[t] = T::from_f64(-1.0 / pt);
    }
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64_slice(shape, v).unwrap()
    }

    /// Direct summation, independent of im2col/gemm.
    fn conv_oracle(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>) -> Vec<f64> {
        let (c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (f, k) = (w.shape()[0], w.shape()[2]);
        let p = (k / 2) as isize;
        let mut out = vec![0.0; f * h * wd];
        for fi in 0..f {
            for y in 0..h {
                for xx in 0..wd {
                    let mut s = b.data()[fi];
                    for ci in 0..c {
                        for dy in 0..k {
                            for dx in 0..k {
                                let sy = y as isize + dy as isize - p;
                                let sx = xx as isize + dx as isize - p;
                                if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < wd {
                                    s += x.data()[(ci * h + sy as usize) * wd + sx as usize]
                                        * w.data()[((fi * c + ci) * k + dy) * k + dx];
                                }
                            }
                        }
                    }
                    out[(fi * h + y) * wd + xx] = s;
                }
            }
        }
        out
    }

    #[test]
    fn conv_one_by_one_scales() {
        let out = conv2d(&t(&[1, 2, 2], &[1., 2., 3., 4.]), &t(&[1, 1, 1, 1], &[2.]), &t(&[1], &[0.])).unwrap();
        assert_eq!(out.data(), &[2., 4., 6., 8.]);
    }

    #[test]
    fn conv_all_ones_counts_neighbours() {
        let out = conv2d(&t(&[1, 3, 3], &[1.; 9]), &t(&[1, 1, 3, 3], &[1.; 9]), &t(&[1], &[0.])).unwrap();
        assert_eq!(out.data(), &[4., 6., 4., 6., 9., 6., 4., 6., 4.]);
    }

    #[test]
    fn conv_zero_weights_gives_bias() {
        let out = conv2d(&t(&[2, 4, 5], &[0.7; 40]), &Tensor::zeros(&[3, 2, 3, 3]), &t(&[3], &[1., -2., 0.5])).unwrap();
        for (fi, &b) in [1., -2., 0.5].iter().enumerate() {
            assert!(out.data()[fi * 20..(fi + 1) * 20].iter().all(|&v| v == b));
        }
    }

    #[test]
    fn conv_shape_error_names_both() {
        let err = conv2d(&Tensor::<f64>::zeros(&[2, 4, 4]), &Tensor::zeros(&[1, 3, 3, 3]), &Tensor::zeros(&[1])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 4, 4]") && msg.contains("[1, 3, 3, 3]"), "{msg}");
    }

    #[test]
    fn conv_batch_grouping_matches_oracle() {
        let mut s = 5u64;
        let mut rnd = |n: usize| -> Vec<f64> {
            (0..n)
                .map(|_| {
                    s = crate::rng::mix64(s);
                    (s % 2001) as f64 / 1000.0 - 1.0
                })
                .collect()
        };
        let (b, c, h, w, f) = (5, 3, 5, 7, 4);
        let input = rnd(b * c * h * w);
        let wts = t(&[f, c, 3, 3], &rnd(f * c * 9));
        let bias = t(&[f], &rnd(f));
        let mut out = vec![0.0; b * f * h * w];
        conv_forward_batch(&input, b, (c, h, w), 3, wts.data(), bias.data(), &mut out);
        for i in 0..b {
            let xi = t(&[c, h, w], &input[i * c * h * w..(i + 1) * c * h * w]);
            let expect = conv_oracle(&xi, &wts, &bias);
            for (a, e) in out[i * f * h * w..(i + 1) * f * h * w].iter().zip(&expect) {
                assert!((a - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn relu_cases() {
        assert_eq!(relu(&t(&[3], &[-1., 0., 2.])).data(), &[0., 0., 2.]);
        let x = t(&[4], &[0., 1., 2., 3.]);
        assert_eq!(relu(&x), x);
        let y = t(&[4], &[-3., 1., -2., 3.]);
        assert_eq!(relu(&relu(&y)), relu(&y));
    }

    #[test]
    fn maxpool_cases() {
        assert_eq!(maxpool2(&t(&[1, 2, 2], &[1., 2., 3., 4.])).unwrap().data(), &[4.]);
        let out = maxpool2(&Tensor::<f64>::filled(&[2, 5, 7], 3.5)).unwrap();
        assert_eq!(out.shape(), &[2, 2, 3]);
        assert!(out.data().iter().all(|&v| v == 3.5));
        assert!(maxpool2(&Tensor::<f64>::zeros(&[1, 1, 4])).is_err());
    }

    #[test]
    fn dense_cases() {
        let x = t(&[2], &[1., 1.]);
        assert_eq!(dense(&x, &t(&[2, 2], &[1., 2., 3., 4.]), &t(&[2], &[0., 0.])).unwrap().data(), &[3., 7.]);
        let x = t(&[3], &[0.5, -1., 2.]);
        let eye = t(&[3, 3], &[1., 0., 0., 0., 1., 0., 0., 0., 1.]);
        assert_eq!(dense(&x, &eye, &Tensor::zeros(&[3])).unwrap(), x);
        let b = t(&[2], &[0.25, -4.]);
        assert_eq!(dense(&Tensor::zeros(&[3]), &Tensor::filled(&[2, 3], 9.), &b).unwrap(), b);
        assert!(dense(&x, &Tensor::zeros(&[2, 2]), &Tensor::zeros(&[2])).is_err());
    }

    #[test]
    fn softmax_cases() {
        let p = softmax(&t(&[4], &[0.; 4])).unwrap();
        assert!(p.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
        let p = softmax(&t(&[2], &[1000., 0.])).unwrap();
        assert!((p.data()[0] - 1.0).abs() < 1e-12 && p.data()[1] < 1e-300 + 1e-12);
        let p = softmax(&t(&[3], &[1., 2., 3.])).unwrap();
        for (a, e) in p.data().iter().zip([0.090031, 0.244728, 0.665241]) {
            assert!((a - e).abs() < 1e-6);
        }
        assert!(matches!(
            softmax(&Tensor::<f64>::from_parts(vec![2], vec![f64::INFINITY, 0.])),
            Err(CnnError::Numeric(_))
        ));
    }

    #[test]
    fn cross_entropy_cases() {
        let e0 = one_hot::<f64>(4, 0);
        assert_eq!(cross_entropy(&e0, &t(&[4], &[1., 0., 0., 0.])).unwrap(), 0.0);
        let l = cross_entropy(&e0, &t(&[4], &[0.25; 4])).unwrap();
        assert!((l - 1.386294).abs() < 1e-6);
        let l = cross_entropy(&one_hot::<f64>(2, 1), &t(&[2], &[0.5, 0.5])).unwrap();
        assert!((l - 0.693147).abs() < 1e-6);
        // clamped zero probability stays finite
        let l = cross_entropy(&e0, &t(&[4], &[0., 1., 0., 0.])).unwrap();
        assert!((l - 1e-12f64.ln().abs()).abs() < 1e-9);
        assert!(matches!(
            cross_entropy(&t(&[2], &[0.5, 0.5]), &t(&[2], &[0.5, 0.5])),
            Err(CnnError::InvalidArgument(_))
        ));
        assert!(cross_entropy(&t(&[2], &[1., 1.]), &t(&[2], &[0.5, 0.5])).is_err());
    }

    #[test]
    fn im2col_adjoint_identity() {
        // <im2col(x), y> == <x, col2im(y)>
        let (c, h, w, k) = (2, 4, 5, 3);
        let x: Vec<f64> = (0..c * h * w).map(|i| (i as f64 * 0.37).sin()).collect();
        let y: Vec<f64> = (0..c * k * k * h * w).map(|i| (i as f64 * 0.11).cos()).collect();
        let mut cols = vec![0.0; y.len()];
        im2col(&x, c, h, w, k, &mut cols, h * w, 0);
        let mut back = vec![0.0; x.len()];
        col2im(&y, c, h, w, k, &mut back);
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    proptest! {
        #[test]
        fn softmax_normalised_and_shift_invariant(z in prop::collection::vec(-1e4f64..1e4, 1..12), shift in -1e3f64..1e3) {
            let p = softmax(&t(&[z.len()], &z)).unwrap();
            let sum: f64 = p.data().iter().sum();
            prop_assert!((sum - 1.0).abs() <= 1e-12);
            prop_assert!(p.data().iter().all(|&v| v >= 0.0));
            let zs: Vec<f64> = z.iter().map(|v| v + shift).collect();
            let q = softmax(&t(&[z.len()], &zs)).unwrap();
            prop_assert!(p.max_abs_diff(&q).unwrap() <= 1e-12);
        }

        #[test]
        fn conv_matches_direct_sum(c in 1usize..4, h in 1usize..7, w in 1usize..7, f in 1usize..4, k in prop::sample::select(vec![1usize, 3, 5]), seed in any::<u64>()) {
            let mut s = seed;
            let mut rnd = |n: usize| -> Vec<f64> { (0..n).map(|_| { s = crate::rng::mix64(s); (s % 2001) as f64 / 1000.0 - 1.0 }).collect() };
            let x = t(&[c, h, w], &rnd(c * h * w));
            let wt = t(&[f, c, k, k], &rnd(f * c * k * k));
            let b = t(&[f], &rnd(f));
            let out = conv2d(&x, &wt, &b).unwrap();
            for (a, e) in out.data().iter().zip(conv_oracle(&x, &wt, &b)) {
                prop_assert!((a - e).abs() < 1e-12);
            }
        }
    }
}
