//! Layer primitives with explicit forward/backward passes.
//!
//! Every layer works on batched tensors whose leading dimension is the batch.
//! Image layers expect `[N, C, H, W]`; `Dense` flattens all trailing
//! dimensions and produces `[N, out_features]`.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, LdamError, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    /// No padding; output shrinks by `kernel - 1`.
    Valid,
    /// Zero padding of `kernel / 2` on each side (odd kernels only).
    Same,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel_h: usize,
        kernel_w: usize,
        padding: Padding,
    },
    Dense {
        in_features: usize,
        out_features: usize,
    },
    Relu,
    MaxPool2x2,
    Sigmoid,
    /// Softmax over the last dimension. Cross-entropy itself is computed by
    /// [`softmax_cross_entropy`] on the logits feeding this layer.
    SoftmaxCrossEntropy,
}

impl LayerSpec {
    pub fn name(&self) -> &'static str {
        match self {
            LayerSpec::Conv2d { .. } => "Conv2d",
            LayerSpec::Dense { .. } => "Dense",
            LayerSpec::Relu => "ReLU",
            LayerSpec::MaxPool2x2 => "MaxPool2x2",
            LayerSpec::Sigmoid => "Sigmoid",
            LayerSpec::SoftmaxCrossEntropy => "SoftmaxCrossEntropy",
        }
    }

    /// Shapes of the parameter tensors this layer owns, in order.
    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        match *self {
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel_h,
                kernel_w,
                ..
            } => vec![
                vec![out_channels, in_channels, kernel_h, kernel_w],
                vec![out_channels],
            ],
            LayerSpec::Dense {
                in_features,
                out_features,
            } => vec![vec![out_features, in_features], vec![out_features]],
            _ => vec![],
        }
    }

    /// Output shape for a batched input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let kind = self.name();
        match *self {
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel_h,
                kernel_w,
                padding,
            } => {
                let [n, c, h, w] = four_d(kind, input)?;
                if c != in_channels {
                    return Err(shape_err(
                        kind,
                        format!("input has {c} channels, layer expects {in_channels}"),
                    ));
                }
                let (ph, pw) = pads(padding, kernel_h, kernel_w, kind)?;
                let (hp, wp) = (h + 2 * ph, w + 2 * pw);
                if hp < kernel_h || wp < kernel_w {
                    return Err(shape_err(
                        kind,
                        format!("input {h}x{w} smaller than kernel {kernel_h}x{kernel_w}"),
                    ));
                }
                Ok(vec![n, out_channels, hp - kernel_h + 1, wp - kernel_w + 1])
            }
            LayerSpec::Dense {
                in_features,
                out_features,
            } => {
                if input.len() < 2 {
                    return Err(shape_err(kind, format!("input {input:?} has no batch dim")));
                }
                let feat: usize = input[1..].iter().product();
                if feat != in_features {
                    return Err(shape_err(
                        kind,
                        format!("input {input:?} has {feat} features, layer expects {in_features}"),
                    ));
                }
                Ok(vec![input[0], out_features])
            }
            LayerSpec::Relu | LayerSpec::Sigmoid => Ok(input.to_vec()),
            LayerSpec::MaxPool2x2 => {
                let [n, c, h, w] = four_d(kind, input)?;
                if h < 2 || w < 2 {
                    return Err(shape_err(kind, format!("input {h}x{w} too small to pool")));
                }
                Ok(vec![n, c, h / 2, w / 2])
            }
            LayerSpec::SoftmaxCrossEntropy => {
                if input.len() != 2 {
                    return Err(shape_err(kind, format!("expects [N, K], got {input:?}")));
                }
                Ok(input.to_vec())
            }
        }
    }

    fn check_params(&self, params: &[Tensor]) -> Result<()> {
        let want = self.param_shapes();
        if want.len() != params.len() {
            return Err(shape_err(
                self.name(),
                format!("expects {} parameter tensors, got {}", want.len(), params.len()),
            ));
        }
        for (i, (w, p)) in want.iter().zip(params).enumerate() {
            if w.as_slice() != p.shape() {
                return Err(shape_err(
                    self.name(),
                    format!("parameter {i} has shape {:?}, expected {w:?}", p.shape()),
                ));
            }
        }
        Ok(())
    }
}

fn four_d(kind: &'static str, s: &[usize]) -> Result<[usize; 4]> {
    match s {
        &[n, c, h, w] => Ok([n, c, h, w]),
        _ => Err(shape_err(kind, format!("expects [N, C, H, W], got {s:?}"))),
    }
}

fn pads(padding: Padding, kh: usize, kw: usize, kind: &'static str) -> Result<(usize, usize)> {
    match padding {
        Padding::Valid => Ok((0, 0)),
        Padding::Same => {
            if kh % 2 == 0 || kw % 2 == 0 {
                return Err(shape_err(kind, "same padding needs odd kernel sizes"));
            }
            Ok((kh / 2, kw / 2))
        }
    }
}

/// Saved forward state needed by [`layer_backward`].
#[derive(Debug, Clone)]
pub struct LayerCache {
    kind: &'static str,
    input_shape: Vec<usize>,
    output_shape: Vec<usize>,
    saved: Saved,
}

#[derive(Debug, Clone)]
enum Saved {
    /// im2col matrices for every sample, `[N][C*kh*kw, OH*OW]`.
    Cols(Vec<f32>),
    Input(Vec<f32>),
    Output(Vec<f32>),
    /// Flat input index chosen by each pooled output.
    Argmax(Vec<u32>),
}

impl LayerCache {
    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn output_shape(&self) -> &[usize] {
        &self.output_shape
    }
}

pub fn layer_forward(
    spec: &LayerSpec,
    params: &[Tensor],
    input: &Tensor,
) -> Result<(Tensor, LayerCache)> {
    spec.check_params(params)?;
    let out_shape = spec.output_shape(input.shape())?;
    let x = input.data();
    let (out, saved) = match *spec {
        LayerSpec::Conv2d {
            kernel_h,
            kernel_w,
            padding,
            out_channels,
            ..
        } => {
            let [n, c, h, w] = four_d("Conv2d", input.shape())?;
            let (ph, pw) = pads(padding, kernel_h, kernel_w, "Conv2d")?;
            let geo = ConvGeometry {
                c,
                h,
                w,
                kh: kernel_h,
                kw: kernel_w,
                ph,
                pw,
                oh: out_shape[2],
                ow: out_shape[3],
            };
            let ckk = geo.ckk();
            let p = geo.oh * geo.ow;
            let mut cols = vec![0.0f32; n * ckk * p];
            let mut out = vec![0.0f32; n * out_channels * p];
            let weight = params[0].data();
            let bias = params[1].data();
            for s in 0..n {
                let col = &mut cols[s * ckk * p..(s + 1) * ckk * p];
                im2col(&geo, &x[s * c * h * w..(s + 1) * c * h * w], col);
                let o = &mut out[s * out_channels * p..(s + 1) * out_channels * p];
                for (oc, row) in o.chunks_mut(p).enumerate() {
                    row.fill(bias[oc]);
                }
                gemm(out_channels, ckk, p, weight, false, col, false, o, 1.0);
            }
            (out, Saved::Cols(cols))
        }
        LayerSpec::Dense {
            in_features,
            out_features,
        } => {
            let n = input.batch();
            let mut out = vec![0.0f32; n * out_features];
            let bias = params[1].data();
            for row in out.chunks_mut(out_features) {
                row.copy_from_slice(bias);
            }
            // out[N, O] += X[N, I] * W^T[I, O]
            gemm(n, in_features, out_features, x, false, params[0].data(), true, &mut out, 1.0);
            (out, Saved::Input(x.to_vec()))
        }
        LayerSpec::Relu => (
            x.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect(),
            Saved::Input(x.to_vec()),
        ),
        LayerSpec::Sigmoid => {
            let out: Vec<f32> = x.iter().map(|&v| sigmoid(v)).collect();
            (out.clone(), Saved::Output(out))
        }
        LayerSpec::MaxPool2x2 => {
            let [n, c, h, w] = four_d("MaxPool2x2", input.shape())?;
            let (oh, ow) = (h / 2, w / 2);
            let mut out = vec![0.0f32; n * c * oh * ow];
            let mut arg = vec![0u32; out.len()];
            let mut k = 0;
            for plane in 0..n * c {
                let base = plane * h * w;
                for i in 0..oh {
                    for j in 0..ow {
                        // Row-major scan; strict `>` keeps the first maximum.
                        let mut best = base + 2 * i * w + 2 * j;
                        for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                            let idx = base + (2 * i + di) * w + 2 * j + dj;
                            if x[idx] > x[best] {
                                best = idx;
                            }
                        }
                        out[k] = x[best];
                        arg[k] = best as u32;
                        k += 1;
                    }
                }
            }
            (out, Saved::Argmax(arg))
        }
        LayerSpec::SoftmaxCrossEntropy => {
            let k = input.shape()[1];
            let mut out = x.to_vec();
            for row in out.chunks_mut(k) {
                softmax_in_place(row);
            }
            (out.clone(), Saved::Output(out))
        }
    };
    let out = Tensor::new(out_shape.clone(), out)?;
    let cache = LayerCache {
        kind: spec.name(),
        input_shape: input.shape().to_vec(),
        output_shape: out_shape,
        saved,
    };
    Ok((out, cache))
}

pub fn layer_backward(
    spec: &LayerSpec,
    params: &[Tensor],
    cache: &LayerCache,
    grad_out: &Tensor,
) -> Result<(Tensor, Vec<Tensor>)> {
    backward_impl(spec, params, cache, grad_out, true)
}

/// Backward pass that skips parameter gradients (used for input gradients).
pub(crate) fn layer_backward_input(
    spec: &LayerSpec,
    params: &[Tensor],
    cache: &LayerCache,
    grad_out: &Tensor,
) -> Result<Tensor> {
    Ok(backward_impl(spec, params, cache, grad_out, false)?.0)
}

fn backward_impl(
    spec: &LayerSpec,
    params: &[Tensor],
    cache: &LayerCache,
    grad_out: &Tensor,
    want_params: bool,
) -> Result<(Tensor, Vec<Tensor>)> {
    spec.check_params(params)?;
    if cache.kind != spec.name() {
        return Err(LdamError::StaleCache(format!(
            "cache from {} used with {}",
            cache.kind,
            spec.name()
        )));
    }
    if grad_out.shape() != cache.output_shape.as_slice() {
        return Err(LdamError::StaleCache(format!(
            "{}: grad_out {:?} but cached output {:?}",
            spec.name(),
            grad_out.shape(),
            cache.output_shape
        )));
    }
    let g = grad_out.data();
    let in_len: usize = cache.input_shape.iter().product();
    let mut grad_in = vec![0.0f32; in_len];
    let mut grad_params = Vec::new();

    match (spec, &cache.saved) {
        (
            &LayerSpec::Conv2d {
                kernel_h,
                kernel_w,
                padding,
                out_channels,
                ..
            },
            Saved::Cols(cols),
        ) => {
            let [n, c, h, w] = four_d("Conv2d", &cache.input_shape)?;
            let (ph, pw) = pads(padding, kernel_h, kernel_w, "Conv2d")?;
            let geo = ConvGeometry {
                c,
                h,
                w,
                kh: kernel_h,
                kw: kernel_w,
                ph,
                pw,
                oh: cache.output_shape[2],
                ow: cache.output_shape[3],
            };
            let ckk = geo.ckk();
            let p = geo.oh * geo.ow;
            let weight = params[0].data();
            let mut dw = vec![0.0f32; out_channels * ckk];
            let mut db = vec![0.0f64; out_channels];
            let mut dcol = vec![0.0f32; ckk * p];
            for s in 0..n {
                let go = &g[s * out_channels * p..(s + 1) * out_channels * p];
                let col = &cols[s * ckk * p..(s + 1) * ckk * p];
                if want_params {
                    // dW[O, CKK] += dY[O, P] * cols^T[P, CKK]
                    gemm(out_channels, p, ckk, go, false, col, true, &mut dw, 1.0);
                    for (oc, row) in go.chunks(p).enumerate() {
                        db[oc] += row.iter().map(|&v| v as f64).sum::<f64>();
                    }
                }
                // dcols[CKK, P] = W^T[CKK, O] * dY[O, P]
                gemm(ckk, out_channels, p, weight, true, go, false, &mut dcol, 0.0);
                col2im(&geo, &dcol, &mut grad_in[s * c * h * w..(s + 1) * c * h * w]);
            }
            if want_params {
                grad_params.push(Tensor::new(params[0].shape().to_vec(), dw)?);
                grad_params.push(Tensor::new(
                    vec![out_channels],
                    db.into_iter().map(|v| v as f32).collect(),
                )?);
            }
        }
        (
            &LayerSpec::Dense {
                in_features,
                out_features,
            },
            Saved::Input(x),
        ) => {
            let n = cache.input_shape[0];
            if want_params {
                let mut dw = vec![0.0f32; out_features * in_features];
                // dW[O, I] = dY^T[O, N] * X[N, I]
                gemm(out_features, n, in_features, g, true, x, false, &mut dw, 0.0);
                let mut db = vec![0.0f64; out_features];
                for row in g.chunks(out_features) {
                    for (acc, &v) in db.iter_mut().zip(row) {
                        *acc += v as f64;
                    }
                }
                grad_params.push(Tensor::new(params[0].shape().to_vec(), dw)?);
                grad_params.push(Tensor::new(
                    vec![out_features],
                    db.into_iter().map(|v| v as f32).collect(),
                )?);
            }
            // dX[N, I] = dY[N, O] * W[O, I]
            gemm(n, out_features, in_features, g, false, params[0].data(), false, &mut grad_in, 0.0);
        }
        (LayerSpec::Relu, Saved::Input(x)) => {
            for ((gi, &xv), &gv) in grad_in.iter_mut().zip(x).zip(g) {
                *gi = if xv > 0.0 { gv } else { 0.0 };
            }
        }
        (LayerSpec::Sigmoid, Saved::Output(y)) => {
            for ((gi, &yv), &gv) in grad_in.iter_mut().zip(y).zip(g) {
                *gi = gv * yv * (1.0 - yv);
            }
        }
        (LayerSpec::MaxPool2x2, Saved::Argmax(arg)) => {
            for (&a, &gv) in arg.iter().zip(g) {
                grad_in[a as usize] += gv;
            }
        }
        (LayerSpec::SoftmaxCrossEntropy, Saved::Output(y)) => {
            let k = cache.input_shape[1];
            for ((gi, yr), gr) in grad_in.chunks_mut(k).zip(y.chunks(k)).zip(g.chunks(k)) {
                let dot: f64 = yr.iter().zip(gr).map(|(&a, &b)| a as f64 * b as f64).sum();
                for ((o, &yv), &gv) in gi.iter_mut().zip(yr).zip(gr) {
                    *o = (yv as f64 * (gv as f64 - dot)) as f32;
                }
            }
        }
        _ => {
            return Err(LdamError::StaleCache(format!(
                "{} cache has the wrong payload",
                spec.name()
            )))
        }
    }
    Ok((
        Tensor::new(cache.input_shape.clone(), grad_in)?,
        grad_params,
    ))
}

#[derive(Debug, Clone, Copy)]
struct ConvGeometry {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    ph: usize,
    pw: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeometry {
    fn ckk(&self) -> usize {
        self.c * self.kh * self.kw
    }
}

/// Unfolds one `[C, H, W]` image into a `[C*kh*kw, OH*OW]` matrix.
fn im2col(g: &ConvGeometry, img: &[f32], col: &mut [f32]) {
    let p = g.oh * g.ow;
    for ch in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ch * g.kh + ki) * g.kw + kj;
                let dst = &mut col[row * p..(row + 1) * p];
                for oi in 0..g.oh {
                    let ii = oi + ki;
                    let out_row = &mut dst[oi * g.ow..(oi + 1) * g.ow];
                    if ii < g.ph || ii - g.ph >= g.h {
                        out_row.fill(0.0);
                        continue;
                    }
                    let src = &img[(ch * g.h + ii - g.ph) * g.w..(ch * g.h + ii - g.ph + 1) * g.w];
                    for (oj, o) in out_row.iter_mut().enumerate() {
                        let jj = oj + kj;
                        *o = if jj < g.pw || jj - g.pw >= g.w {
                            0.0
                        } else {
                            src[jj - g.pw]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates column gradients back onto the image.
fn col2im(g: &ConvGeometry, col: &[f32], img: &mut [f32]) {
    let p = g.oh * g.ow;
    for ch in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ch * g.kh + ki) * g.kw + kj;
                let src = &col[row * p..(row + 1) * p];
                for oi in 0..g.oh {
                    let ii = oi + ki;
                    if ii < g.ph || ii - g.ph >= g.h {
                        continue;
                    }
                    let base = (ch * g.h + ii - g.ph) * g.w;
                    for oj in 0..g.ow {
                        let jj = oj + kj;
                        if jj >= g.pw && jj - g.pw < g.w {
                            img[base + jj - g.pw] += src[oi * g.ow + oj];
                        }
                    }
                }
            }
        }
    }
}

/// `C[m, n] = A[m, k] * B[k, n] + beta * C`, with optional transposed storage
/// for `A` (stored `[k, m]`) and `B` (stored `[n, k]`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_t: bool,
    b: &[f32],
    b_t: bool,
    c: &mut [f32],
    beta: f32,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the bounds above cover every index touched with these strides.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub fn sigmoid(v: f32) -> f32 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax_in_place(row: &mut [f32]) {
    let max = row.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v));
    let mut sum = 0.0f64;
    for v in row.iter_mut() {
        let e = ((*v - max) as f64).exp();
        *v = e as f32;
        sum += e;
    }
    for v in row.iter_mut() {
        *v = (*v as f64 / sum) as f32;
    }
}

/// Mean softmax cross-entropy over a batch of logits `[N, K]`, and its
/// gradient with respect to the logits.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[u8]) -> Result<(f64, Tensor)> {
    let s = logits.shape();
    if s.len() != 2 || s[0] != labels.len() {
        return Err(shape_err(
            "SoftmaxCrossEntropy",
            format!("logits {s:?} with {} labels", labels.len()),
        ));
    }
    let (n, k) = (s[0], s[1]);
    let mut grad = logits.data().to_vec();
    let mut loss = 0.0f64;
    for (row, &y) in grad.chunks_mut(k).zip(labels) {
        let y = y as usize;
        if y >= k {
            return Err(LdamError::InvalidArgument(format!("label {y} >= {k} classes")));
        }
        softmax_in_place(row);
        loss -= (row[y] as f64).max(1e-30).ln();
        row[y] -= 1.0;
        for v in row.iter_mut() {
            *v /= n as f32;
        }
    }
    Ok((loss / n as f64, Tensor::new(s.to_vec(), grad)?))
}

/// Mean binary cross-entropy of `sigmoid(logits)` against 0/1 targets, and its
/// gradient with respect to the logits. `logits` is `[N, 1]` or `[N]`.
pub fn sigmoid_bce_with_logits(logits: &Tensor, targets: &[f32]) -> Result<(f64, Tensor)> {
    if logits.len() != targets.len() {
        return Err(shape_err(
            "Sigmoid",
            format!("{} logits with {} targets", logits.len(), targets.len()),
        ));
    }
    let n = targets.len() as f64;
    let mut loss = 0.0f64;
    let mut grad = Vec::with_capacity(targets.len());
    for (&z, &t) in logits.data().iter().zip(targets) {
        let z = z as f64;
        let t = t as f64;
        // log(1 + exp(z)) - t z, written to avoid overflow
        loss += z.max(0.0) - z * t + (-z.abs()).exp().ln_1p();
        let p = 1.0 / (1.0 + (-z).exp());
        grad.push(((p - t) / n) as f32);
    }
    Ok((loss / n, Tensor::new(logits.shape().to_vec(), grad)?))
}
