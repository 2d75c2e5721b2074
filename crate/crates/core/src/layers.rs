//! Forward and backward kernels for the layer types the model graphs use:
//! stride-1 unpadded convolution (GEMM-lowered), fully connected, ReLU,
//! 2x2/2 max-pooling and softmax cross-entropy.

use crate::error::{Error, Result};
use crate::tensor::{gemm, MatRef, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
}

impl ConvGeometry {
    pub fn out_h(&self) -> usize {
        self.height - self.kernel_h + 1
    }

    pub fn out_w(&self) -> usize {
        self.width - self.kernel_w + 1
    }

    /// Rows of the unfolded input (`C*Kh*Kw`).
    pub fn patch_len(&self) -> usize {
        self.channels * self.kernel_h * self.kernel_w
    }

    pub fn out_positions(&self) -> usize {
        self.out_h() * self.out_w()
    }
}

fn conv_geometry(input: &Tensor, weights: &Tensor) -> Result<ConvGeometry> {
    if input.rank() != 4 || weights.rank() != 4 {
        return Err(Error::shape(format!(
            "conv2d needs rank-4 input and weights, got {:?} and {:?}",
            input.dims(),
            weights.dims()
        )));
    }
    let (c, h, w) = (input.dims()[1], input.dims()[2], input.dims()[3]);
    let (wc, kh, kw) = (weights.dims()[1], weights.dims()[2], weights.dims()[3]);
    if c != wc {
        return Err(Error::shape(format!(
            "conv2d channel mismatch: input has {c} channels, filters expect {wc}"
        )));
    }
    if kh > h || kw > w {
        return Err(Error::shape(format!(
            "conv2d kernel {kh}x{kw} larger than input {h}x{w}"
        )));
    }
    Ok(ConvGeometry {
        channels: c,
        height: h,
        width: w,
        kernel_h: kh,
        kernel_w: kw,
    })
}

/// Unfolds one `[C, H, W]` sample into the `[C*Kh*Kw, oh*ow]` patch matrix.
/// Row order is (channel, kernel row, kernel column), matching the weight
/// lowering.
pub fn im2col_input(sample: &[f64], g: &ConvGeometry, cols: &mut [f64]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let p = oh * ow;
    let mut row = 0;
    for c in 0..g.channels {
        let plane = &sample[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..g.kernel_h {
            for kx in 0..g.kernel_w {
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..oh {
                    let src = &plane[(oy + ky) * g.width + kx..(oy + ky) * g.width + kx + ow];
                    dst[oy * ow..(oy + 1) * ow].copy_from_slice(src);
                }
                row += 1;
            }
        }
    }
}

/// Adjoint of [`im2col_input`]: scatters patch-matrix gradients back into a
/// `[C, H, W]` sample gradient (accumulating).
pub fn col2im_add(cols: &[f64], g: &ConvGeometry, sample_grad: &mut [f64]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let p = oh * ow;
    let mut row = 0;
    for c in 0..g.channels {
        let plane = &mut sample_grad[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..g.kernel_h {
            for kx in 0..g.kernel_w {
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..oh {
                    let dst = &mut plane[(oy + ky) * g.width + kx..(oy + ky) * g.width + kx + ow];
                    for (d, s) in dst.iter_mut().zip(&src[oy * ow..(oy + 1) * ow]) {
                        *d += s;
                    }
                }
                row += 1;
            }
        }
    }
}

fn check_bias(bias: &Tensor, filters: usize) -> Result<()> {
    if bias.len() != filters {
        return Err(Error::shape(format!(
            "bias has {} entries but the layer has {filters} filters",
            bias.len()
        )));
    }
    Ok(())
}

/// Stride-1, unpadded convolution computed as `lowered(W) x im2col(x) + b`
/// per sample.
pub fn conv2d_forward(input: &Tensor, weights: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let g = conv_geometry(input, weights)?;
    let n = input.dims()[0];
    let f = weights.dims()[0];
    check_bias(bias, f)?;
    let (k, p) = (g.patch_len(), g.out_positions());
    let in_len = g.channels * g.height * g.width;
    let mut out = Tensor::zeros(&[n, f, g.out_h(), g.out_w()]);
    let mut cols = vec![0.0; k * p];
    let wmat = MatRef::row_major(weights.data(), f, k);
    for s in 0..n {
        im2col_input(&input.data()[s * in_len..(s + 1) * in_len], &g, &mut cols);
        let dst = &mut out.data_mut()[s * f * p..(s + 1) * f * p];
        for (fi, plane) in dst.chunks_exact_mut(p).enumerate() {
            plane.fill(bias.data()[fi]);
        }
        gemm(1.0, wmat, MatRef::row_major(&cols, k, p), 1.0, dst);
    }
    Ok(out)
}

pub struct ConvGrads {
    pub weights: Tensor,
    pub bias: Tensor,
    pub input: Option<Tensor>,
}

pub fn conv2d_backward(
    input: &Tensor,
    weights: &Tensor,
    grad_out: &Tensor,
    need_input_grad: bool,
) -> Result<ConvGrads> {
    let g = conv_geometry(input, weights)?;
    let n = input.dims()[0];
    let f = weights.dims()[0];
    let (k, p) = (g.patch_len(), g.out_positions());
    if grad_out.dims() != [n, f, g.out_h(), g.out_w()] {
        return Err(Error::shape(format!(
            "conv2d output gradient has dims {:?}, expected {:?}",
            grad_out.dims(),
            [n, f, g.out_h(), g.out_w()]
        )));
    }
    let in_len = g.channels * g.height * g.width;
    let mut gw = Tensor::zeros(weights.dims());
    let mut gb = Tensor::zeros(&[f]);
    let mut gin = need_input_grad.then(|| Tensor::zeros(input.dims()));
    let mut cols = vec![0.0; k * p];
    let mut dcols = vec![0.0; if need_input_grad { k * p } else { 0 }];
    let wmat = MatRef::row_major(weights.data(), f, k);
    for s in 0..n {
        let go = &grad_out.data()[s * f * p..(s + 1) * f * p];
        for (fi, plane) in go.chunks_exact(p).enumerate() {
            gb.data_mut()[fi] += plane.iter().sum::<f64>();
        }
        im2col_input(&input.data()[s * in_len..(s + 1) * in_len], &g, &mut cols);
        let gomat = MatRef::row_major(go, f, p);
        gemm(1.0, gomat, MatRef::row_major(&cols, k, p).t(), 1.0, gw.data_mut());
        if let Some(gin) = gin.as_mut() {
            gemm(1.0, wmat.t(), gomat, 0.0, &mut dcols);
            col2im_add(&dcols, &g, &mut gin.data_mut()[s * in_len..(s + 1) * in_len]);
        }
    }
    Ok(ConvGrads {
        weights: gw,
        bias: gb,
        input: gin,
    })
}

fn fc_dims(input: &Tensor, weights: &Tensor) -> Result<(usize, usize, usize)> {
    if weights.rank() != 2 {
        return Err(Error::shape(format!(
            "fc weights must be rank 2, got {:?}",
            weights.dims()
        )));
    }
    let n = input.dims()[0];
    let features = input.len() / n;
    let (out, inp) = (weights.dims()[0], weights.dims()[1]);
    if features != inp {
        return Err(Error::shape(format!(
            "fc layer expects {inp} input features, got {features}"
        )));
    }
    Ok((n, inp, out))
}

/// `y = x W^T + b` with `x` viewed as `[n, in]`.
pub fn fc_forward(input: &Tensor, weights: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (n, inp, out) = fc_dims(input, weights)?;
    check_bias(bias, out)?;
    let mut y = Tensor::zeros(&[n, out]);
    for row in y.data_mut().chunks_exact_mut(out) {
        row.copy_from_slice(bias.data());
    }
    gemm(
        1.0,
        MatRef::row_major(input.data(), n, inp),
        MatRef::row_major(weights.data(), out, inp).t(),
        1.0,
        y.data_mut(),
    );
    Ok(y)
}

pub struct FcGrads {
    pub weights: Tensor,
    pub bias: Tensor,
    pub input: Option<Tensor>,
}

pub fn fc_backward(input: &Tensor, weights: &Tensor, grad_out: &Tensor, need_input_grad: bool) -> Result<FcGrads> {
    let (n, inp, out) = fc_dims(input, weights)?;
    if grad_out.dims() != [n, out] {
        return Err(Error::shape(format!(
            "fc output gradient has dims {:?}, expected [{n}, {out}]",
            grad_out.dims()
        )));
    }
    let go = MatRef::row_major(grad_out.data(), n, out);
    let mut gw = Tensor::zeros(weights.dims());
    gemm(1.0, go.t(), MatRef::row_major(input.data(), n, inp), 0.0, gw.data_mut());
    let mut gb = Tensor::zeros(&[out]);
    for row in grad_out.data().chunks_exact(out) {
        for (b, g) in gb.data_mut().iter_mut().zip(row) {
            *b += g;
        }
    }
    let gin = if need_input_grad {
        let mut gin = Tensor::zeros(input.dims());
        gemm(
            1.0,
            go,
            MatRef::row_major(weights.data(), out, inp),
            0.0,
            gin.data_mut(),
        );
        Some(gin)
    } else {
        None
    };
    Ok(FcGrads {
        weights: gw,
        bias: gb,
        input: gin,
    })
}

pub fn relu_forward(input: &Tensor) -> Tensor {
    let mut out = input.clone();
    out.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
    out
}

pub fn relu_backward(input: &Tensor, grad_out: &Tensor) -> Tensor {
    let mut g = grad_out.clone();
    for (gv, x) in g.data_mut().iter_mut().zip(input.data()) {
        if *x <= 0.0 {
            *gv = 0.0;
        }
    }
    g
}

/// 2x2 max-pooling with stride 2; odd trailing rows/columns are dropped.
/// Returns the pooled tensor and, per output element, the flat input index
/// of the selected maximum (first maximum in scan order wins).
pub fn maxpool2_forward(input: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    if input.rank() != 4 {
        return Err(Error::shape(format!(
            "max-pool needs a rank-4 input, got {:?}",
            input.dims()
        )));
    }
    let [n, c, h, w] = [input.dims()[0], input.dims()[1], input.dims()[2], input.dims()[3]];
    let (oh, ow) = (h / 2, w / 2);
    if oh == 0 || ow == 0 {
        return Err(Error::shape(format!("max-pool input {h}x{w} too small")));
    }
    let mut out = Tensor::zeros(&[n, c, oh, ow]);
    let mut argmax = vec![0usize; n * c * oh * ow];
    let x = input.data();
    let mut o = 0;
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if x[idx] > x[best] {
                        best = idx;
                    }
                }
                out.data_mut()[o] = x[best];
                argmax[o] = best;
                o += 1;
            }
        }
    }
    Ok((out, argmax))
}

pub fn maxpool2_backward(input_dims: &[usize], argmax: &[usize], grad_out: &Tensor) -> Tensor {
    let mut g = Tensor::zeros(input_dims);
    for (&idx, &go) in argmax.iter().zip(grad_out.data()) {
        g.data_mut()[idx] += go;
    }
    g
}

/// Mean softmax cross-entropy over the rows of `logits`, plus the gradient of
/// the loss scaled by `1 / normalizer` (pass the full batch size when the
/// rows are only a chunk of it).
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize], normalizer: usize) -> Result<(f64, Tensor)> {
    if logits.rank() != 2 || logits.dims()[0] != labels.len() {
        return Err(Error::shape(format!(
            "logits {:?} do not match {} labels",
            logits.dims(),
            labels.len()
        )));
    }
    let k = logits.dims()[1];
    let mut grad = Tensor::zeros(logits.dims());
    let mut total = 0.0;
    let scale = 1.0 / normalizer as f64;
    for ((row, &label), grow) in logits
        .data()
        .chunks_exact(k)
        .zip(labels)
        .zip(grad.data_mut().chunks_exact_mut(k))
    {
        if label >= k {
            return Err(Error::Data(format!("label {label} out of range for {k} classes")));
        }
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        for (g, &z) in grow.iter_mut().zip(row) {
            let e = (z - max).exp();
            *g = e;
            denom += e;
        }
        total += denom.ln() + max - row[label];
        for g in grow.iter_mut() {
            *g = *g / denom * scale;
        }
        grow[label] -= scale;
    }
    Ok((total / normalizer as f64, grad))
}
