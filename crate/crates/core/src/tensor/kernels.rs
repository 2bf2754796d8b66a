//! Forward and backward kernels on plain tensors.
//!
//! The tape calls these; they are also usable directly for straight-line
//! reference computations. All activations are NCHW, row-major.
//!
//! Convolution uses im2col: each batch item is unfolded into a
//! `[Cin*kh*kw, H'*W']` column matrix so the convolution becomes one GEMM
//! against the `[Cout, Cin*kh*kw]` weight matrix. The backward pass reuses
//! the same unfolding (weight gradient = dOut x cols^T) and folds the
//! column gradient back with col2im.

use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2};

use super::{Result, Shape, Tensor, TensorError};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_height: usize,
    pub out_width: usize,
}

impl ConvGeometry {
    pub fn new(input: &Shape, weight: &Shape, bias: &Shape, stride: usize, padding: usize) -> Result<Self> {
        let (batch, in_channels, height, width) = input.dims4("conv2d")?;
        let (out_channels, w_in, kernel_h, kernel_w) = weight.dims4("conv2d")?;
        if w_in != in_channels {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d (input channels vs weight)",
                left: input.clone(),
                right: weight.clone(),
            });
        }
        if bias.dims() != [out_channels] {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d (bias vs weight)",
                left: bias.clone(),
                right: weight.clone(),
            });
        }
        if kernel_h % 2 == 0 || kernel_w % 2 == 0 {
            return Err(TensorError::invalid(
                "conv2d",
                format!("kernel {kernel_h}x{kernel_w} must have odd extents"),
            ));
        }
        if stride == 0 {
            return Err(TensorError::invalid("conv2d", "stride must be at least 1"));
        }
        if height + 2 * padding < kernel_h || width + 2 * padding < kernel_w {
            return Err(TensorError::invalid(
                "conv2d",
                format!("kernel {kernel_h}x{kernel_w} larger than padded input {input}"),
            ));
        }
        Ok(ConvGeometry {
            batch,
            in_channels,
            height,
            width,
            out_channels,
            kernel_h,
            kernel_w,
            stride,
            padding,
            out_height: (height + 2 * padding - kernel_h) / stride + 1,
            out_width: (width + 2 * padding - kernel_w) / stride + 1,
        })
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    fn out_pixels(&self) -> usize {
        self.out_height * self.out_width
    }

    /// A 1x1 unpadded unit-stride conv reads each input plane as its column matrix.
    fn is_pointwise(&self) -> bool {
        self.kernel_h == 1 && self.kernel_w == 1 && self.stride == 1 && self.padding == 0
    }

    /// Input row hit by output row `oy` at kernel tap `ky`, if inside the image.
    #[inline]
    fn source_row(&self, oy: usize, ky: usize) -> Option<usize> {
        (oy * self.stride + ky).checked_sub(self.padding).filter(|&y| y < self.height)
    }

    /// Output columns `lo..hi` whose tap `kx` lands inside the image, and the
    /// input column of `lo`.
    #[inline]
    fn source_cols(&self, kx: usize) -> (usize, usize, usize) {
        let lo = self.padding.saturating_sub(kx).div_ceil(self.stride);
        let hi = match (self.width + self.padding).checked_sub(kx + 1) {
            Some(last) => (last / self.stride + 1).min(self.out_width),
            None => 0,
        };
        let lo = lo.min(hi);
        (lo, hi, (lo * self.stride + kx).saturating_sub(self.padding))
    }
}

fn im2col(g: &ConvGeometry, image: &[f64], cols: &mut [f64]) {
    let n = g.out_pixels();
    for c in 0..g.in_channels {
        let plane = &image[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..g.kernel_h {
            for kx in 0..g.kernel_w {
                let row = (c * g.kernel_h + ky) * g.kernel_w + kx;
                let (lo, hi, x0) = g.source_cols(kx);
                for oy in 0..g.out_height {
                    let dst = &mut cols[row * n + oy * g.out_width..row * n + (oy + 1) * g.out_width];
                    let Some(y) = g.source_row(oy, ky) else {
                        dst.fill(0.0);
                        continue;
                    };
                    dst[..lo].fill(0.0);
                    dst[hi..].fill(0.0);
                    if lo == hi {
                        continue;
                    }
                    let src = &plane[y * g.width..(y + 1) * g.width];
                    if g.stride == 1 {
                        dst[lo..hi].copy_from_slice(&src[x0..x0 + hi - lo]);
                    } else {
                        for (d, s) in dst[lo..hi].iter_mut().zip(src[x0..].iter().step_by(g.stride)) {
                            *d = *s;
                        }
                    }
                }
            }
        }
    }
}

fn col2im(g: &ConvGeometry, cols: &[f64], image: &mut [f64]) {
    let n = g.out_pixels();
    for c in 0..g.in_channels {
        let plane = &mut image[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..g.kernel_h {
            for kx in 0..g.kernel_w {
                let row = (c * g.kernel_h + ky) * g.kernel_w + kx;
                let (lo, hi, x0) = g.source_cols(kx);
                for oy in 0..g.out_height {
                    let Some(y) = g.source_row(oy, ky).filter(|_| lo < hi) else { continue };
                    let src = &cols[row * n + oy * g.out_width + lo..row * n + oy * g.out_width + hi];
                    let dst = &mut plane[y * g.width + x0..(y + 1) * g.width];
                    for (d, s) in dst.iter_mut().step_by(g.stride).zip(src) {
                        *d += *s;
                    }
                }
            }
        }
    }
}

fn view(rows: usize, cols: usize, data: &[f64]) -> ArrayView2<'_, f64> {
    ArrayView2::from_shape((rows, cols), data).expect("matrix view matches buffer length")
}

fn view_mut(rows: usize, cols: usize, data: &mut [f64]) -> ArrayViewMut2<'_, f64> {
    ArrayViewMut2::from_shape((rows, cols), data).expect("matrix view matches buffer length")
}

pub fn conv2d(input: &Tensor, weight: &Tensor, bias: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    let g = ConvGeometry::new(input.shape(), weight.shape(), bias.shape(), stride, padding)?;
    let (k, n) = (g.patch_len(), g.out_pixels());
    let in_len = g.in_channels * g.height * g.width;
    let out_len = g.out_channels * n;
    let mut out = vec![0.0; g.batch * out_len];
    let mut cols = vec![0.0; if g.is_pointwise() { 0 } else { k * n }];
    let w = view(g.out_channels, k, weight.data());
    for b in 0..g.batch {
        let image = &input.data()[b * in_len..(b + 1) * in_len];
        let patches = if g.is_pointwise() {
            image
        } else {
            im2col(&g, image, &mut cols);
            &cols
        };
        let dst = &mut out[b * out_len..(b + 1) * out_len];
        for (co, row) in dst.chunks_mut(n).enumerate() {
            row.fill(bias.data()[co]);
        }
        general_mat_mul(1.0, &w, &view(k, n, patches), 1.0, &mut view_mut(g.out_channels, n, dst));
    }
    Tensor::new(vec![g.batch, g.out_channels, g.out_height, g.out_width], out)
}

pub struct ConvGrads {
    pub input: Option<Vec<f64>>,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

pub fn conv2d_backward(
    input: &Tensor,
    weight: &Tensor,
    stride: usize,
    padding: usize,
    grad_out: &[f64],
    need_input_grad: bool,
) -> Result<ConvGrads> {
    let bias_shape = Shape::new(vec![weight.dims()[0]])?;
    let g = ConvGeometry::new(input.shape(), weight.shape(), &bias_shape, stride, padding)?;
    let (k, n) = (g.patch_len(), g.out_pixels());
    let in_len = g.in_channels * g.height * g.width;
    let out_len = g.out_channels * n;
    let mut d_weight = vec![0.0; g.out_channels * k];
    let mut d_bias = vec![0.0; g.out_channels];
    let mut d_input = need_input_grad.then(|| vec![0.0; input.numel()]);
    let scratch = if g.is_pointwise() { 0 } else { k * n };
    let mut cols = vec![0.0; scratch];
    let mut d_cols = vec![0.0; scratch];
    let w = view(g.out_channels, k, weight.data());
    for b in 0..g.batch {
        let dout = &grad_out[b * out_len..(b + 1) * out_len];
        for (co, row) in dout.chunks(n).enumerate() {
            d_bias[co] += row.iter().sum::<f64>();
        }
        let image = &input.data()[b * in_len..(b + 1) * in_len];
        let patches = if g.is_pointwise() {
            image
        } else {
            im2col(&g, image, &mut cols);
            &cols
        };
        let dout_m = view(g.out_channels, n, dout);
        general_mat_mul(
            1.0,
            &dout_m,
            &view(k, n, patches).t(),
            1.0,
            &mut view_mut(g.out_channels, k, &mut d_weight),
        );
        if let Some(dx) = d_input.as_mut() {
            let dx = &mut dx[b * in_len..(b + 1) * in_len];
            if g.is_pointwise() {
                general_mat_mul(1.0, &w.t(), &dout_m, 0.0, &mut view_mut(k, n, dx));
            } else {
                general_mat_mul(1.0, &w.t(), &dout_m, 0.0, &mut view_mut(k, n, &mut d_cols));
                col2im(&g, &d_cols, dx);
            }
        }
    }
    Ok(ConvGrads {
        input: d_input,
        weight: d_weight,
        bias: d_bias,
    })
}

/// Per-channel batch statistics (biased variance) from a training-mode pass.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    /// Elements per channel, `B*H*W`.
    pub count: usize,
}

/// Output of a batch-norm forward pass plus what its backward needs.
pub struct BatchNormOut {
    pub output: Tensor,
    pub normalized: Vec<f64>,
    pub inv_std: Vec<f64>,
}

fn check_bn_params(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<(usize, usize, usize)> {
    let (b, c, h, w) = x.shape().dims4("batch_norm")?;
    for p in [gamma, beta] {
        if p.dims() != [c] {
            return Err(TensorError::ShapeMismatch {
                op: "batch_norm (affine vs input)",
                left: p.shape().clone(),
                right: x.shape().clone(),
            });
        }
    }
    if !(eps > 0.0) {
        return Err(TensorError::invalid("batch_norm", format!("eps must be positive, got {eps}")));
    }
    Ok((b, c, h * w))
}

fn bn_apply(x: &Tensor, gamma: &[f64], beta: &[f64], mean: &[f64], inv_std: &[f64]) -> BatchNormOut {
    let (b, c, h, w) = x.shape().dims4("batch_norm").expect("checked rank");
    let hw = h * w;
    let mut out = vec![0.0; x.numel()];
    let mut normalized = vec![0.0; x.numel()];
    for bi in 0..b {
        for ci in 0..c {
            let base = (bi * c + ci) * hw;
            for i in base..base + hw {
                let xh = (x.data()[i] - mean[ci]) * inv_std[ci];
                normalized[i] = xh;
                out[i] = gamma[ci] * xh + beta[ci];
            }
        }
    }
    BatchNormOut {
        output: Tensor::from_shape(x.shape().clone(), out).expect("same shape"),
        normalized,
        inv_std: inv_std.to_vec(),
    }
}

/// Training-mode batch norm: normalizes with the batch's own statistics.
pub fn batch_norm_train(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<(BatchNormOut, BatchStats)> {
    let (b, c, hw) = check_bn_params(x, gamma, beta, eps)?;
    let count = b * hw;
    if count < 2 {
        return Err(TensorError::invalid(
            "batch_norm",
            format!("training mode needs at least 2 values per channel, input {} has {count}", x.shape()),
        ));
    }
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ci in 0..c {
        let plane = |bi: usize| &x.data()[(bi * c + ci) * hw..(bi * c + ci + 1) * hw];
        let sum: f64 = (0..b).map(|bi| plane(bi).iter().sum::<f64>()).sum();
        let m = sum / count as f64;
        let sq: f64 = (0..b)
            .map(|bi| plane(bi).iter().map(|v| (v - m) * (v - m)).sum::<f64>())
            .sum();
        mean[ci] = m;
        var[ci] = sq / count as f64;
    }
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let out = bn_apply(x, gamma.data(), beta.data(), &mean, &inv_std);
    Ok((out, BatchStats { mean, var, count }))
}

/// Eval-mode batch norm with fixed running statistics.
pub fn batch_norm_eval(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    running_mean: &[f64],
    running_var: &[f64],
    eps: f64,
) -> Result<BatchNormOut> {
    let (_, c, _) = check_bn_params(x, gamma, beta, eps)?;
    if running_mean.len() != c || running_var.len() != c {
        return Err(TensorError::invalid(
            "batch_norm",
            format!("running statistics have {} entries, input has {c} channels", running_mean.len()),
        ));
    }
    let inv_std: Vec<f64> = running_var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    Ok(bn_apply(x, gamma.data(), beta.data(), running_mean, &inv_std))
}

/// Exponential moving average of the running statistics; the variance
/// estimate uses the unbiased (n-1) correction.
pub fn update_running_stats(running_mean: &mut [f64], running_var: &mut [f64], stats: &BatchStats, momentum: f64) {
    let correction = stats.count as f64 / (stats.count as f64 - 1.0);
    for c in 0..running_mean.len() {
        running_mean[c] = (1.0 - momentum) * running_mean[c] + momentum * stats.mean[c];
        running_var[c] = (1.0 - momentum) * running_var[c] + momentum * stats.var[c] * correction;
    }
}

pub struct BatchNormGrads {
    pub input: Vec<f64>,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

/// Backward of batch norm. `training` selects whether the statistics
/// themselves depend on the input.
pub fn batch_norm_backward(
    shape: &Shape,
    gamma: &[f64],
    normalized: &[f64],
    inv_std: &[f64],
    grad_out: &[f64],
    training: bool,
) -> BatchNormGrads {
    let (b, c, h, w) = shape.dims4("batch_norm").expect("checked rank");
    let hw = h * w;
    let count = (b * hw) as f64;
    let mut d_gamma = vec![0.0; c];
    let mut d_beta = vec![0.0; c];
    for bi in 0..b {
        for ci in 0..c {
            let base = (bi * c + ci) * hw;
            for i in base..base + hw {
                d_beta[ci] += grad_out[i];
                d_gamma[ci] += grad_out[i] * normalized[i];
            }
        }
    }
    let mut d_input = vec![0.0; grad_out.len()];
    for bi in 0..b {
        for ci in 0..c {
            let base = (bi * c + ci) * hw;
            let scale = gamma[ci] * inv_std[ci];
            for i in base..base + hw {
                d_input[i] = if training {
                    scale * (grad_out[i] - d_beta[ci] / count - normalized[i] * d_gamma[ci] / count)
                } else {
                    scale * grad_out[i]
                };
            }
        }
    }
    BatchNormGrads {
        input: d_input,
        gamma: d_gamma,
        beta: d_beta,
    }
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

#[inline]
pub fn sigmoid_scalar(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    x.map(sigmoid_scalar)
}

/// Log-softmax over the channel axis of a `[B, C, H, W]` tensor.
pub fn log_softmax_channels(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.shape().dims4("log_softmax_channels")?;
    let hw = h * w;
    let mut out = vec![0.0; x.numel()];
    let d = x.data();
    for bi in 0..b {
        let base = bi * c * hw;
        for p in 0..hw {
            let at = |ci: usize| base + ci * hw + p;
            let max = (0..c).map(|ci| d[at(ci)]).fold(f64::NEG_INFINITY, f64::max);
            let lse = max + (0..c).map(|ci| (d[at(ci)] - max).exp()).sum::<f64>().ln();
            for ci in 0..c {
                out[at(ci)] = d[at(ci)] - lse;
            }
        }
    }
    Tensor::from_shape(x.shape().clone(), out)
}

pub fn log_softmax_channels_backward(output: &Tensor, grad_out: &[f64]) -> Vec<f64> {
    let (b, c, h, w) = output.shape().dims4("log_softmax_channels").expect("checked rank");
    let hw = h * w;
    let y = output.data();
    let mut dx = vec![0.0; y.len()];
    for bi in 0..b {
        let base = bi * c * hw;
        for p in 0..hw {
            let at = |ci: usize| base + ci * hw + p;
            let total: f64 = (0..c).map(|ci| grad_out[at(ci)]).sum();
            for ci in 0..c {
                dx[at(ci)] = grad_out[at(ci)] - y[at(ci)].exp() * total;
            }
        }
    }
    dx
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(TensorError::ShapeMismatch {
            op,
            left: a.shape().clone(),
            right: b.shape().clone(),
        });
    }
    Ok(())
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape("elementwise_mul", a, b)?;
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
    Tensor::from_shape(a.shape().clone(), data)
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape("add", a, b)?;
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
    Tensor::from_shape(a.shape().clone(), data)
}

/// Channel-wise concatenation; the channels of `a` come first.
pub fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (ba, ca, ha, wa) = a.shape().dims4("concat_channels")?;
    let (bb, cb, hb, wb) = b.shape().dims4("concat_channels")?;
    if (ba, ha, wa) != (bb, hb, wb) {
        return Err(TensorError::ShapeMismatch {
            op: "concat_channels (batch/spatial extents)",
            left: a.shape().clone(),
            right: b.shape().clone(),
        });
    }
    let (na, nb) = (ca * ha * wa, cb * hb * wb);
    let mut data = Vec::with_capacity(a.numel() + b.numel());
    for bi in 0..ba {
        data.extend_from_slice(&a.data()[bi * na..(bi + 1) * na]);
        data.extend_from_slice(&b.data()[bi * nb..(bi + 1) * nb]);
    }
    Tensor::new(vec![ba, ca + cb, ha, wa], data)
}

/// Split a concat gradient back into the two operands' gradients.
pub fn split_channels(grad: &[f64], batch: usize, first: usize, second: usize) -> (Vec<f64>, Vec<f64>) {
    let mut ga = Vec::with_capacity(batch * first);
    let mut gb = Vec::with_capacity(batch * second);
    for bi in 0..batch {
        let base = bi * (first + second);
        ga.extend_from_slice(&grad[base..base + first]);
        gb.extend_from_slice(&grad[base + first..base + first + second]);
    }
    (ga, gb)
}

/// 2x2 max pooling with stride 2. Returns the output and, per output
/// element, the flat input index of the selected maximum (first maximum in
/// row-major window order wins ties).
pub fn max_pool2(x: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    let (b, c, h, w) = x.shape().dims4("max_pool2")?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(TensorError::invalid(
            "max_pool2",
            format!("spatial extents of {} must be even", x.shape()),
        ));
    }
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(b * c * ho * wo);
    let mut argmax = Vec::with_capacity(b * c * ho * wo);
    let d = x.data();
    for plane in 0..b * c {
        let base = plane * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = base + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if d[idx] > d[best] {
                        best = idx;
                    }
                }
                out.push(d[best]);
                argmax.push(best);
            }
        }
    }
    Ok((Tensor::new(vec![b, c, ho, wo], out)?, argmax))
}

/// Nearest-neighbour 2x upsampling: each pixel becomes a 2x2 block.
pub fn upsample_nearest2(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.shape().dims4("upsample_nearest2")?;
    let (ho, wo) = (2 * h, 2 * w);
    let mut out = vec![0.0; b * c * ho * wo];
    for plane in 0..b * c {
        let src = &x.data()[plane * h * w..(plane + 1) * h * w];
        let dst = &mut out[plane * ho * wo..(plane + 1) * ho * wo];
        for y in 0..ho {
            for xx in 0..wo {
                dst[y * wo + xx] = src[(y / 2) * w + xx / 2];
            }
        }
    }
    Tensor::new(vec![b, c, ho, wo], out)
}

pub fn upsample_nearest2_backward(input_shape: &Shape, grad_out: &[f64]) -> Vec<f64> {
    let (b, c, h, w) = input_shape.dims4("upsample_nearest2").expect("checked rank");
    let (ho, wo) = (2 * h, 2 * w);
    let mut dx = vec![0.0; b * c * h * w];
    for plane in 0..b * c {
        let src = &grad_out[plane * ho * wo..(plane + 1) * ho * wo];
        let dst = &mut dx[plane * h * w..(plane + 1) * h * w];
        for y in 0..ho {
            for xx in 0..wo {
                dst[(y / 2) * w + xx / 2] += src[y * wo + xx];
            }
        }
    }
    dx
}

/// Rescales every pixel's channel vector to unit L2 norm. Returns the output
/// and the per-pixel norms.
pub fn normalize_channels(x: &Tensor) -> Result<(Tensor, Vec<f64>)> {
    let (b, c, h, w) = x.shape().dims4("normalize_channels")?;
    let hw = h * w;
    let d = x.data();
    let mut out = vec![0.0; d.len()];
    let mut norms = Vec::with_capacity(b * hw);
    for bi in 0..b {
        let base = bi * c * hw;
        for p in 0..hw {
            let sq: f64 = (0..c).map(|ci| d[base + ci * hw + p].powi(2)).sum();
            let norm = (sq + NORMALIZE_FLOOR).sqrt();
            for ci in 0..c {
                out[base + ci * hw + p] = d[base + ci * hw + p] / norm;
            }
            norms.push(norm);
        }
    }
    Ok((Tensor::from_shape(x.shape().clone(), out)?, norms))
}

/// Added under the square root so an all-zero pixel stays finite.
pub const NORMALIZE_FLOOR: f64 = 1e-30;

pub fn normalize_channels_backward(output: &Tensor, norms: &[f64], grad_out: &[f64]) -> Vec<f64> {
    let (b, c, h, w) = output.shape().dims4("normalize_channels").expect("checked rank");
    let hw = h * w;
    let y = output.data();
    let mut dx = vec![0.0; y.len()];
    for bi in 0..b {
        let base = bi * c * hw;
        for p in 0..hw {
            let proj: f64 = (0..c).map(|ci| grad_out[base + ci * hw + p] * y[base + ci * hw + p]).sum();
            let norm = norms[bi * hw + p];
            for ci in 0..c {
                let i = base + ci * hw + p;
                dx[i] = (grad_out[i] - y[i] * proj) / norm;
            }
        }
    }
    dx
}
