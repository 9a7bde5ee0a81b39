//! Dense row-major `f64` tensors and the forward/backward kernels the
//! network graph is built from.
//!
//! Images are laid out as `(channels, height, width)`. All kernels are
//! deterministic: the same inputs always produce bit-identical outputs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if shape.is_empty() {
            return Err(Error::Shape("tensor shape must have at least one axis".into()));
        }
        if numel != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} holds {numel} elements but {} were given",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() || shape.is_empty() {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn flatten(self) -> Self {
        let n = self.data.len();
        Tensor {
            shape: vec![n],
            data: self.data,
        }
    }

    pub fn fill(&mut self, value: f64) {
        self.data.iter_mut().for_each(|x| *x = value);
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn l2_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    /// `self += alpha * other`, shapes must agree.
    pub fn add_scaled(&mut self, other: &Tensor, alpha: f64) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
    }

    fn dims3(&self, what: &str) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [c, h, w] => Ok((c, h, w)),
            _ => Err(Error::Shape(format!(
                "{what} expects a (C,H,W) tensor, got {:?}",
                self.shape
            ))),
        }
    }
}

/// Leading padding for a "same" convolution with kernel extent `k`; the
/// remaining `k - 1 - pad` rows/cols of padding go after the image.
pub fn same_pad(k: usize) -> usize {
    (k - 1) / 2
}

/// Output rows `o` for which `o + offset` lands inside `0..len`.
#[inline]
fn valid_range(len: usize, offset: isize) -> (usize, usize) {
    let lo = (-offset).max(0) as usize;
    let hi = (len as isize - offset).clamp(0, len as isize) as usize;
    (lo.min(hi), hi)
}

fn check_conv_shapes(input: &Tensor, kernels: &Tensor, bias: &Tensor) -> Result<[usize; 6]> {
    let (c, h, w) = input.dims3("conv2d")?;
    let [f, kc, kh, kw] = kernels.shape[..] else {
        return Err(Error::Shape(format!(
            "conv2d kernels must be (F,C,kh,kw), got {:?}",
            kernels.shape
        )));
    };
    if kc != c {
        return Err(Error::Shape(format!(
            "conv2d channel mismatch: input has {c} channels, kernels expect {kc}"
        )));
    }
    if kh == 0 || kw == 0 || h == 0 || w == 0 {
        return Err(Error::Shape("conv2d extents must be positive".into()));
    }
    if bias.shape != [f] {
        return Err(Error::Shape(format!(
            "conv2d bias must have shape [{f}], got {:?}",
            bias.shape
        )));
    }
    Ok([c, h, w, f, kh, kw])
}

/// Same-padded, stride-1 cross-correlation: `out[f] = bias[f] + sum_c input[c] * kernels[f, c]`.
pub fn conv2d(input: &Tensor, kernels: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let [c, h, w, f, kh, kw] = check_conv_shapes(input, kernels, bias)?;
    let (ph, pw) = (same_pad(kh), same_pad(kw));
    let plane = h * w;
    let mut out = vec![0.0; f * plane];
    for fo in 0..f {
        let out_plane = &mut out[fo * plane..(fo + 1) * plane];
        out_plane.iter_mut().for_each(|v| *v = bias.data[fo]);
        for ci in 0..c {
            let in_plane = &input.data[ci * plane..(ci + 1) * plane];
            let kbase = (fo * c + ci) * kh * kw;
            for ky in 0..kh {
                let dy = ky as isize - ph as isize;
                let (y_lo, y_hi) = valid_range(h, dy);
                for kx in 0..kw {
                    let wgt = kernels.data[kbase + ky * kw + kx];
                    if wgt == 0.0 {
                        continue;
                    }
                    let dx = kx as isize - pw as isize;
                    let (x_lo, x_hi) = valid_range(w, dx);
                    if x_lo >= x_hi {
                        continue;
                    }
                    for oy in y_lo..y_hi {
                        let iy = (oy as isize + dy) as usize;
                        let src = &in_plane[iy * w + (x_lo as isize + dx) as usize..][..x_hi - x_lo];
                        let dst = &mut out_plane[oy * w + x_lo..oy * w + x_hi];
                        for (o, i) in dst.iter_mut().zip(src) {
                            *o += wgt * i;
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![f, h, w], out)
}

pub struct ConvGrads {
    pub input: Option<Tensor>,
    pub kernels: Option<Tensor>,
    pub bias: Option<Tensor>,
}

pub fn conv2d_backward(
    input: &Tensor,
    kernels: &Tensor,
    grad_out: &Tensor,
    want_input: bool,
    want_params: bool,
) -> ConvGrads {
    let (c, h, w) = (input.shape[0], input.shape[1], input.shape[2]);
    let (f, kh, kw) = (kernels.shape[0], kernels.shape[2], kernels.shape[3]);
    let (ph, pw) = (same_pad(kh), same_pad(kw));
    let plane = h * w;
    let mut din = want_input.then(|| vec![0.0; c * plane]);
    let mut dk = want_params.then(|| vec![0.0; kernels.numel()]);
    for fo in 0..f {
        let g_plane = &grad_out.data[fo * plane..(fo + 1) * plane];
        for ci in 0..c {
            let in_plane = &input.data[ci * plane..(ci + 1) * plane];
            let kbase = (fo * c + ci) * kh * kw;
            for ky in 0..kh {
                let dy = ky as isize - ph as isize;
                let (y_lo, y_hi) = valid_range(h, dy);
                for kx in 0..kw {
                    let dx = kx as isize - pw as isize;
                    let (x_lo, x_hi) = valid_range(w, dx);
                    if x_lo >= x_hi {
                        continue;
                    }
                    let wgt = kernels.data[kbase + ky * kw + kx];
                    if !want_params && wgt == 0.0 {
                        continue;
                    }
                    let mut acc = 0.0;
                    for oy in y_lo..y_hi {
                        let iy = (oy as isize + dy) as usize;
                        let start = iy * w + (x_lo as isize + dx) as usize;
                        let g_row = &g_plane[oy * w + x_lo..oy * w + x_hi];
                        if want_params {
                            let src = &in_plane[start..start + (x_hi - x_lo)];
                            acc += g_row.iter().zip(src).map(|(g, i)| g * i).sum::<f64>();
                        }
                        if let Some(din) = din.as_mut() {
                            let dst = &mut din[ci * plane + start..ci * plane + start + (x_hi - x_lo)];
                            for (d, g) in dst.iter_mut().zip(g_row) {
                                *d += wgt * g;
                            }
                        }
                    }
                    if let Some(dk) = dk.as_mut() {
                        dk[kbase + ky * kw + kx] += acc;
                    }
                }
            }
        }
    }
    let db = want_params.then(|| {
        let sums = (0..f)
            .map(|fo| grad_out.data[fo * plane..(fo + 1) * plane].iter().sum())
            .collect();
        Tensor::vector(sums)
    });
    ConvGrads {
        input: din.map(|d| Tensor {
            shape: input.shape.clone(),
            data: d,
        }),
        kernels: dk.map(|d| Tensor {
            shape: kernels.shape.clone(),
            data: d,
        }),
        bias: db,
    }
}

/// Non-overlapping 2x2 max pooling. Odd trailing rows/cols are pooled over
/// the truncated window. Returns the output and, per output element, the
/// flat input index that won (first maximum in scan order on ties).
pub fn maxpool2(input: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    let (c, h, w) = input.dims3("maxpool2")?;
    if h == 0 || w == 0 {
        return Err(Error::Shape("maxpool2 extents must be positive".into()));
    }
    let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut arg = Vec::with_capacity(c * oh * ow);
    for ci in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = usize::MAX;
                for iy in 2 * oy..(2 * oy + 2).min(h) {
                    for ix in 2 * ox..(2 * ox + 2).min(w) {
                        let idx = (ci * h + iy) * w + ix;
                        let v = input.data[idx];
                        if best_idx == usize::MAX || v > best {
                            best = v;
                            best_idx = idx;
                        }
                    }
                }
                out.push(best);
                arg.push(best_idx);
            }
        }
    }
    Ok((Tensor::new(vec![c, oh, ow], out)?, arg))
}

pub fn maxpool2_backward(input_shape: &[usize], argmax: &[usize], grad_out: &Tensor) -> Tensor {
    let mut din = Tensor::zeros(input_shape);
    for (&idx, g) in argmax.iter().zip(&grad_out.data) {
        din.data[idx] += g;
    }
    din
}

/// `out = weights . input + bias` for a 1-D input.
pub fn dense(input: &Tensor, weights: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let [m, n] = weights.shape[..] else {
        return Err(Error::Shape(format!(
            "dense weights must be (m,n), got {:?}",
            weights.shape
        )));
    };
    if input.shape.len() != 1 || input.shape[0] != n {
        return Err(Error::Shape(format!(
            "dense expects a vector of length {n}, got {:?}",
            input.shape
        )));
    }
    if bias.shape != [m] {
        return Err(Error::Shape(format!(
            "dense bias must have shape [{m}], got {:?}",
            bias.shape
        )));
    }
    let out = weights
        .data
        .chunks_exact(n.max(1))
        .take(m)
        .zip(&bias.data)
        .map(|(row, b)| b + row.iter().zip(&input.data).map(|(w, x)| w * x).sum::<f64>())
        .collect();
    Ok(Tensor::vector(out))
}

pub struct DenseGrads {
    pub input: Option<Tensor>,
    pub weights: Option<Tensor>,
    pub bias: Option<Tensor>,
}

pub fn dense_backward(
    input: &Tensor,
    weights: &Tensor,
    grad_out: &Tensor,
    want_input: bool,
    want_params: bool,
) -> DenseGrads {
    let (m, n) = (weights.shape[0], weights.shape[1]);
    let din = want_input.then(|| {
        let mut d = vec![0.0; n];
        for (row, g) in weights.data.chunks_exact(n.max(1)).take(m).zip(&grad_out.data) {
            for (di, w) in d.iter_mut().zip(row) {
                *di += w * g;
            }
        }
        Tensor::vector(d)
    });
    let dw = want_params.then(|| {
        let mut d = Vec::with_capacity(m * n);
        for g in &grad_out.data {
            d.extend(input.data.iter().map(|x| g * x));
        }
        Tensor {
            shape: vec![m, n],
            data: d,
        }
    });
    DenseGrads {
        input: din,
        weights: dw,
        bias: want_params.then(|| grad_out.clone()),
    }
}

pub fn relu(input: &Tensor) -> Tensor {
    Tensor {
        shape: input.shape.clone(),
        data: input.data.iter().map(|&x| x.max(0.0)).collect(),
    }
}

/// Passes the upstream gradient where the forward input was strictly positive.
pub fn relu_backward(input: &Tensor, grad_out: &Tensor) -> Tensor {
    Tensor {
        shape: input.shape.clone(),
        data: input
            .data
            .iter()
            .zip(&grad_out.data)
            .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
            .collect(),
    }
}

fn outer_inner(shape: &[usize], axis: usize) -> (usize, usize) {
    (
        shape[..axis].iter().product(),
        shape[axis + 1..].iter().product(),
    )
}

/// Joins `a` and `b` along `axis`, `a`'s entries first. An empty operand
/// yields the other operand unchanged.
pub fn concat(a: &Tensor, b: &Tensor, axis: usize) -> Result<Tensor> {
    if a.is_empty() {
        return Ok(b.clone());
    }
    if b.is_empty() {
        return Ok(a.clone());
    }
    if a.shape.len() != b.shape.len() || axis >= a.shape.len() {
        return Err(Error::Shape(format!(
            "cannot concat {:?} and {:?} along axis {axis}",
            a.shape, b.shape
        )));
    }
    for (i, (x, y)) in a.shape.iter().zip(&b.shape).enumerate() {
        if i != axis && x != y {
            return Err(Error::Shape(format!(
                "cannot concat {:?} and {:?} along axis {axis}",
                a.shape, b.shape
            )));
        }
    }
    let (outer, inner) = outer_inner(&a.shape, axis);
    let (na, nb) = (a.shape[axis] * inner, b.shape[axis] * inner);
    let mut data = Vec::with_capacity(a.numel() + b.numel());
    for o in 0..outer {
        data.extend_from_slice(&a.data[o * na..(o + 1) * na]);
        data.extend_from_slice(&b.data[o * nb..(o + 1) * nb]);
    }
    let mut shape = a.shape.clone();
    shape[axis] += b.shape[axis];
    Tensor::new(shape, data)
}

/// Splits an upstream concat gradient back into the operands' extents.
pub fn concat_backward(
    a_shape: &[usize],
    b_shape: &[usize],
    axis: usize,
    grad_out: &Tensor,
) -> (Tensor, Tensor) {
    let a_numel: usize = a_shape.iter().product();
    let b_numel: usize = b_shape.iter().product();
    if a_numel == 0 {
        return (Tensor::zeros(a_shape), grad_out.clone());
    }
    if b_numel == 0 {
        return (grad_out.clone(), Tensor::zeros(b_shape));
    }
    let (outer, inner) = outer_inner(a_shape, axis);
    let (na, nb) = (a_shape[axis] * inner, b_shape[axis] * inner);
    let mut ga = Vec::with_capacity(a_numel);
    let mut gb = Vec::with_capacity(b_numel);
    for o in 0..outer {
        let block = &grad_out.data[o * (na + nb)..(o + 1) * (na + nb)];
        ga.extend_from_slice(&block[..na]);
        gb.extend_from_slice(&block[na..]);
    }
    (
        Tensor {
            shape: a_shape.to_vec(),
            data: ga,
        },
        Tensor {
            shape: b_shape.to_vec(),
            data: gb,
        },
    )
}

/// Numerically stable softmax followed by cross-entropy against `label`.
pub fn softmax_xent(logits: &Tensor, label: usize) -> Result<(f64, Tensor)> {
    let k = logits.numel();
    if label >= k {
        return Err(Error::Contract(format!(
            "label {label} out of range for {k} classes"
        )));
    }
    let max = logits.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.data.iter().map(|&z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    let log_total = total.ln();
    let loss = -(logits.data[label] - max - log_total);
    let probs = exps.into_iter().map(|e| e / total).collect();
    Ok((loss, Tensor::vector(probs)))
}

pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}
