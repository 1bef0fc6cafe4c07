//! Differentiable primitives with hand-written backward passes.
//!
//! Convolutions are cross-correlations with stride 1. A 2-D convolution is
//! the same kernel loop as the 3-D one with a unit time axis, so both share
//! [`ConvGeometry`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    /// Zero padding; output spatial dims equal input dims. Needs odd kernels.
    Same,
    Valid,
}

/// Kernel `[out, in, kh, kw]` (2-D) or `[out, in, kh, kw, kt]` (3-D) and a
/// bias of length `out`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams {
    pub kernel: Tensor,
    pub bias: Tensor,
    pub padding: Padding,
}

impl ConvParams {
    pub fn new(kernel: Tensor, bias: Tensor, padding: Padding) -> Self {
        ConvParams {
            kernel,
            bias,
            padding,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.kernel.dims()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.kernel.dims()[1]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvGrads {
    pub input: Tensor,
    pub kernel: Tensor,
    pub bias: Tensor,
}

/// Resolved shapes of one convolution call. Internally every convolution is
/// 3-D over `(h, w, t)`; 2-D calls use `t = kt = 1`.
#[derive(Debug, Clone, Copy)]
pub struct ConvGeometry {
    cin: usize,
    h: usize,
    w: usize,
    t: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    kt: usize,
    ph: usize,
    pw: usize,
    pt: usize,
    ho: usize,
    wo: usize,
    to: usize,
}

impl ConvGeometry {
    fn new(
        op: &'static str,
        input: [usize; 4],
        kernel: [usize; 5],
        padding: Padding,
    ) -> Result<Self> {
        let [cin, h, w, t] = input;
        let [cout, kcin, kh, kw, kt] = kernel;
        if kcin != cin {
            return Err(Error::invalid(
                op,
                format!(
                    "input has {cin} channels but kernel {:?} expects {kcin}",
                    kernel
                ),
            ));
        }
        let ext = [(h, kh), (w, kw), (t, kt)];
        let (pads, outs): (Vec<usize>, Vec<usize>) = match padding {
            Padding::Same => {
                if ext.iter().any(|&(_, k)| k % 2 == 0) {
                    return Err(Error::invalid(
                        op,
                        format!("same padding needs odd kernel extents, got {kernel:?}"),
                    ));
                }
                ext.iter().map(|&(n, k)| ((k - 1) / 2, n)).unzip()
            }
            Padding::Valid => {
                if ext.iter().any(|&(n, k)| k > n || k == 0) {
                    return Err(Error::invalid(
                        op,
                        format!("kernel {kernel:?} larger than input {input:?}"),
                    ));
                }
                ext.iter().map(|&(n, k)| (0, n - k + 1)).unzip()
            }
        };
        Ok(ConvGeometry {
            cin,
            h,
            w,
            t,
            cout,
            kh,
            kw,
            kt,
            ph: pads[0],
            pw: pads[1],
            pt: pads[2],
            ho: outs[0],
            wo: outs[1],
            to: outs[2],
        })
    }

    fn out_len(&self) -> usize {
        self.cout * self.ho * self.wo * self.to
    }

    /// Valid output range along one axis for kernel tap `k` with padding `p`.
    #[inline]
    fn range(k: usize, p: usize, n_in: usize, n_out: usize) -> (usize, usize) {
        let lo = p.saturating_sub(k);
        let hi = n_out.min((n_in + p).saturating_sub(k));
        (lo, hi.max(lo))
    }

    /// Calls `f(out_offset, in_offset, len)` for every contiguous run of
    /// paired output/input elements touched by tap `(ky, kx, kt)` between
    /// output channel plane `o` and input channel plane `i`.
    #[inline]
    fn for_each_run(
        &self,
        o: usize,
        i: usize,
        ky: usize,
        kx: usize,
        kt: usize,
        mut f: impl FnMut(usize, usize, usize),
    ) {
        let (y0, y1) = Self::range(ky, self.ph, self.h, self.ho);
        let (x0, x1) = Self::range(kx, self.pw, self.w, self.wo);
        let (t0, t1) = Self::range(kt, self.pt, self.t, self.to);
        if y0 >= y1 || x0 >= x1 || t0 >= t1 {
            return;
        }
        let row_contiguous = t0 == 0 && t1 == self.to && self.to == self.t;
        for y in y0..y1 {
            let yy = y + ky - self.ph;
            let out_row = ((o * self.ho + y) * self.wo) * self.to;
            let in_row = ((i * self.h + yy) * self.w) * self.t;
            if row_contiguous {
                // t shift is zero here, so (x, t) flattens identically on both sides
                let xx0 = x0 + kx - self.pw;
                f(out_row + x0 * self.to, in_row + xx0 * self.t, (x1 - x0) * self.to);
            } else {
                for x in x0..x1 {
                    let xx = x + kx - self.pw;
                    let tt0 = t0 + kt - self.pt;
                    f(
                        out_row + x * self.to + t0,
                        in_row + xx * self.t + tt0,
                        t1 - t0,
                    );
                }
            }
        }
    }

    /// Rows of the unrolled input: one per `(in channel, ky, kx, kt)`, in
    /// kernel order, so a kernel `[out, in, ..]` is already a `[out, rows]`
    /// matrix.
    fn col_rows(&self) -> usize {
        self.cin * self.kh * self.kw * self.kt
    }

    fn plane(&self) -> usize {
        self.ho * self.wo * self.to
    }

    /// Calls `f(col_offset, in_offset, len)` for every run of every tap.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let plane = self.plane();
        let mut row = 0;
        for i in 0..self.cin {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    for kt in 0..self.kt {
                        let base = row * plane;
                        self.for_each_run(0, i, ky, kx, kt, |oo, io, n| f(base + oo, io, n));
                        row += 1;
                    }
                }
            }
        }
    }

    /// Unrolled input `[col_rows, plane]`; taps that fall in the padding stay zero.
    fn im2col(&self, input: &[f64]) -> Vec<f64> {
        let mut col = vec![0.0; self.col_rows() * self.plane()];
        self.for_each_tap(|co, io, n| col[co..co + n].copy_from_slice(&input[io..io + n]));
        col
    }

    fn col2im(&self, col: &[f64], input_len: usize) -> Vec<f64> {
        let mut g = vec![0.0; input_len];
        self.for_each_tap(|co, io, n| {
            for (d, s) in g[io..io + n].iter_mut().zip(&col[co..co + n]) {
                *d += s;
            }
        });
        g
    }

    fn forward(&self, input: &[f64], kernel: &[f64], bias: &[f64]) -> Vec<f64> {
        let plane = self.plane();
        let mut out = vec![0.0; self.out_len()];
        for (o, chunk) in out.chunks_mut(plane).enumerate() {
            chunk.fill(bias[o]);
        }
        let col = self.im2col(input);
        let k = self.col_rows();
        // out[cout, plane] += kernel[cout, k] · col[k, plane]
        gemm(self.cout, k, plane, (kernel, k, 1), (&col, plane, 1), 1.0, &mut out);
        out
    }

    fn backward(
        &self,
        input: &[f64],
        kernel: &[f64],
        grad_out: &[f64],
    ) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let plane = self.plane();
        let k = self.col_rows();
        let g_b: Vec<f64> = grad_out.chunks(plane).map(|c| c.iter().sum()).collect();
        let col = self.im2col(input);
        // d kernel[cout, k] = grad_out[cout, plane] · colᵀ
        let mut g_k = vec![0.0; kernel.len()];
        gemm(self.cout, plane, k, (grad_out, plane, 1), (&col, 1, plane), 0.0, &mut g_k);
        // d col[k, plane] = kernelᵀ · grad_out
        let mut g_col = col;
        gemm(k, self.cout, plane, (kernel, 1, k), (grad_out, plane, 1), 0.0, &mut g_col);
        (self.col2im(&g_col, input.len()), g_k, g_b)
    }
}

/// `c[m, n] = a[m, k] · b[k, n] + beta · c`, with `a` and `b` given as
/// `(data, row stride, column stride)` and `c` dense row-major.
fn gemm(m: usize, k: usize, n: usize, a: (&[f64], usize, usize), b: (&[f64], usize, usize), beta: f64, c: &mut [f64]) {
    let last = |rows: usize, cols: usize, rs: usize, cs: usize| (rows - 1) * rs + (cols - 1) * cs;
    assert!(m > 0 && k > 0 && n > 0 && c.len() == m * n);
    assert!(a.0.len() > last(m, k, a.1, a.2) && b.0.len() > last(k, n, b.1, b.2));
    // SAFETY: the asserts above keep every strided access inside the slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.0.as_ptr(),
            a.1 as isize,
            a.2 as isize,
            b.0.as_ptr(),
            b.1 as isize,
            b.2 as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn conv_shapes(
    op: &'static str,
    input: &Tensor,
    kernel: &Tensor,
    bias: &Tensor,
    padding: Padding,
    three_d: bool,
) -> Result<ConvGeometry> {
    let id = input.dims();
    let kd = kernel.dims();
    let want_in = if three_d { 4 } else { 3 };
    if id.len() != want_in || kd.len() != want_in + 1 {
        return Err(Error::invalid(
            op,
            format!("input {id:?} / kernel {kd:?} have the wrong rank"),
        ));
    }
    if bias.dims() != [kd[0]] {
        return Err(Error::ShapeMismatch {
            op,
            expected: vec![kd[0]],
            got: bias.dims().to_vec(),
        });
    }
    let (input4, kernel5) = if three_d {
        ([id[0], id[1], id[2], id[3]], [kd[0], kd[1], kd[2], kd[3], kd[4]])
    } else {
        ([id[0], id[1], id[2], 1], [kd[0], kd[1], kd[2], kd[3], 1])
    };
    ConvGeometry::new(op, input4, kernel5, padding)
}

fn out_dims(g: &ConvGeometry, three_d: bool) -> Vec<usize> {
    if three_d {
        vec![g.cout, g.ho, g.wo, g.to]
    } else {
        vec![g.cout, g.ho, g.wo]
    }
}

/// 2-D cross-correlation of `[C, H, W]` with kernel `[C', C, kh, kw]`.
pub fn conv2d(input: &Tensor, params: &ConvParams) -> Result<Tensor> {
    conv_forward("conv2d", input, &params.kernel, &params.bias, params.padding, false)
}

pub fn conv2d_backward(input: &Tensor, params: &ConvParams, grad_out: &Tensor) -> Result<ConvGrads> {
    conv_backward(
        "conv2d_backward",
        input,
        &params.kernel,
        &params.bias,
        params.padding,
        grad_out,
        false,
    )
}

/// 3-D cross-correlation of `[C, H, W, T]` with kernel `[C', C, kh, kw, kt]`.
pub fn conv3d(input: &Tensor, params: &ConvParams) -> Result<Tensor> {
    conv_forward("conv3d", input, &params.kernel, &params.bias, params.padding, true)
}

pub fn conv3d_backward(input: &Tensor, params: &ConvParams, grad_out: &Tensor) -> Result<ConvGrads> {
    conv_backward(
        "conv3d_backward",
        input,
        &params.kernel,
        &params.bias,
        params.padding,
        grad_out,
        true,
    )
}

/// Convolution on borrowed kernel and bias. The kernel rank selects 2-D
/// (`[C', C, kh, kw]`) or 3-D (`[C', C, kh, kw, kt]`).
pub fn conv_forward_parts(input: &Tensor, kernel: &Tensor, bias: &Tensor, padding: Padding) -> Result<Tensor> {
    conv_forward("conv", input, kernel, bias, padding, kernel.ndim() == 5)
}

pub fn conv_backward_parts(
    input: &Tensor,
    kernel: &Tensor,
    bias: &Tensor,
    padding: Padding,
    grad_out: &Tensor,
) -> Result<ConvGrads> {
    conv_backward("conv_backward", input, kernel, bias, padding, grad_out, kernel.ndim() == 5)
}

fn conv_forward(
    op: &'static str,
    input: &Tensor,
    kernel: &Tensor,
    bias: &Tensor,
    padding: Padding,
    three_d: bool,
) -> Result<Tensor> {
    let g = conv_shapes(op, input, kernel, bias, padding, three_d)?;
    let out = g.forward(input.data(), kernel.data(), bias.data());
    Tensor::from_vec(&out_dims(&g, three_d), out)
}

fn conv_backward(
    op: &'static str,
    input: &Tensor,
    kernel: &Tensor,
    bias: &Tensor,
    padding: Padding,
    grad_out: &Tensor,
    three_d: bool,
) -> Result<ConvGrads> {
    let g = conv_shapes(op, input, kernel, bias, padding, three_d)?;
    grad_out.ensure_dims(op, &out_dims(&g, three_d))?;
    let (gi, gk, gb) = g.backward(input.data(), kernel.data(), grad_out.data());
    Ok(ConvGrads {
        input: Tensor::from_vec(input.dims(), gi)?,
        kernel: Tensor::from_vec(kernel.dims(), gk)?,
        bias: Tensor::from_vec(bias.dims(), gb)?,
    })
}

/// Flat input offsets of the maximum chosen for every pooled output element.
#[derive(Debug, Clone, PartialEq)]
pub struct PoolIndex {
    input_dims: Vec<usize>,
    argmax: Vec<usize>,
}

impl PoolIndex {
    pub fn input_dims(&self) -> &[usize] {
        &self.input_dims
    }

    /// Input offset selected for output element `j`.
    pub fn source(&self, j: usize) -> usize {
        self.argmax[j]
    }

    /// Routes `grad_out` back to the recorded maxima.
    pub fn backward(&self, grad_out: &Tensor) -> Result<Tensor> {
        if grad_out.len() != self.argmax.len() {
            return Err(Error::invalid(
                "max_pool_backward",
                format!(
                    "grad has {} elements, pool produced {}",
                    grad_out.len(),
                    self.argmax.len()
                ),
            ));
        }
        let mut g = Tensor::zeros(&self.input_dims);
        let data = g.data_mut();
        for (&src, &v) in self.argmax.iter().zip(grad_out.data()) {
            data[src] += v;
        }
        Ok(g)
    }
}

fn spatial_layout(op: &'static str, dims: &[usize]) -> Result<(usize, usize, usize, usize)> {
    match *dims {
        [c, h, w] => Ok((c, h, w, 1)),
        [c, h, w, t] => Ok((c, h, w, t)),
        _ => Err(Error::invalid(
            op,
            format!("expected [C,H,W] or [C,H,W,T], got {dims:?}"),
        )),
    }
}

/// Non-overlapping 2×2 spatial max pooling; a trailing time axis is kept.
/// Ties go to the first element in row-major order.
pub fn max_pool_spatial(input: &Tensor) -> Result<(Tensor, PoolIndex)> {
    let (c, h, w, t) = spatial_layout("max_pool_spatial", input.dims())?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::invalid(
            "max_pool_spatial",
            format!("spatial dims must be even, got {h}x{w}"),
        ));
    }
    let (ho, wo) = (h / 2, w / 2);
    let x = input.data();
    let mut out = Vec::with_capacity(c * ho * wo * t);
    let mut argmax = Vec::with_capacity(out.capacity());
    for ch in 0..c {
        for y in 0..ho {
            for xo in 0..wo {
                for tt in 0..t {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_at = usize::MAX;
                    for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                        let off = ((ch * h + 2 * y + dy) * w + 2 * xo + dx) * t + tt;
                        if best_at == usize::MAX || x[off] > best {
                            best = x[off];
                            best_at = off;
                        }
                    }
                    out.push(best);
                    argmax.push(best_at);
                }
            }
        }
    }
    let mut dims = input.dims().to_vec();
    dims[1] = ho;
    dims[2] = wo;
    Ok((
        Tensor::from_vec(&dims, out)?,
        PoolIndex {
            input_dims: input.dims().to_vec(),
            argmax,
        },
    ))
}

/// Nearest-neighbour upsampling by `factor` on H and W, and also on the time
/// axis of a 4-D input when `spatial_only` is false.
pub fn upsample_nearest(input: &Tensor, factor: usize, spatial_only: bool) -> Result<Tensor> {
    let (c, h, w, t) = spatial_layout("upsample_nearest", input.dims())?;
    if factor == 0 {
        return Err(Error::invalid("upsample_nearest", "factor must be positive"));
    }
    let ft = if spatial_only || input.ndim() == 3 {
        1
    } else {
        factor
    };
    let (ho, wo, to) = (h * factor, w * factor, t * ft);
    let x = input.data();
    let mut out = Vec::with_capacity(c * ho * wo * to);
    for ch in 0..c {
        for y in 0..ho {
            for xo in 0..wo {
                let base = ((ch * h + y / factor) * w + xo / factor) * t;
                for tt in 0..to {
                    out.push(x[base + tt / ft]);
                }
            }
        }
    }
    let mut dims = input.dims().to_vec();
    dims[1] = ho;
    dims[2] = wo;
    if input.ndim() == 4 {
        dims[3] = to;
    }
    Tensor::from_vec(&dims, out)
}

/// Adjoint of [`upsample_nearest`]: block sums of `grad_out`.
pub fn upsample_nearest_backward(
    grad_out: &Tensor,
    input_dims: &[usize],
    factor: usize,
    spatial_only: bool,
) -> Result<Tensor> {
    let (c, h, w, t) = spatial_layout("upsample_nearest_backward", input_dims)?;
    let ft = if spatial_only || input_dims.len() == 3 {
        1
    } else {
        factor
    };
    let (ho, wo, to) = (h * factor, w * factor, t * ft);
    let mut expected = input_dims.to_vec();
    expected[1] = ho;
    expected[2] = wo;
    if input_dims.len() == 4 {
        expected[3] = to;
    }
    grad_out.ensure_dims("upsample_nearest_backward", &expected)?;
    let g = grad_out.data();
    let mut out = vec![0.0; c * h * w * t];
    let mut k = 0;
    for ch in 0..c {
        for y in 0..ho {
            for xo in 0..wo {
                let base = ((ch * h + y / factor) * w + xo / factor) * t;
                for tt in 0..to {
                    out[base + tt / ft] += g[k];
                    k += 1;
                }
            }
        }
    }
    Tensor::from_vec(input_dims, out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
    Sigmoid,
    Tanh,
    Linear,
}

impl Activation {
    pub fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Relu => v.max(0.0),
            Activation::Sigmoid => sigmoid(v),
            Activation::Tanh => v.tanh(),
            Activation::Linear => v,
        }
    }

    /// Derivative expressed through the activation's output `y`.
    pub fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Tanh => 1.0 - y * y,
            Activation::Linear => 1.0,
        }
    }

    pub fn forward(self, input: &Tensor) -> Tensor {
        match self {
            Activation::Linear => input.clone(),
            _ => input.map(|v| self.apply(v)),
        }
    }

    /// Gradient w.r.t. the activation input, given its forward `output`.
    pub fn backward(self, output: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
        grad_out.ensure_dims("activation_backward", output.dims())?;
        if self == Activation::Linear {
            return Ok(grad_out.clone());
        }
        let data = output
            .data()
            .iter()
            .zip(grad_out.data())
            .map(|(&y, &g)| g * self.derivative_from_output(y))
            .collect();
        Tensor::from_vec(output.dims(), data)
    }
}

impl std::str::FromStr for Activation {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "relu" => Ok(Activation::Relu),
            "sigmoid" => Ok(Activation::Sigmoid),
            "tanh" => Ok(Activation::Tanh),
            "linear" => Ok(Activation::Linear),
            _ => Err(format!("unknown activation `{s}`")),
        }
    }
}

#[inline]
pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Concatenates along the leading (channel) axis.
pub fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.ndim() != b.ndim() || a.dims()[1..] != b.dims()[1..] {
        return Err(Error::ShapeMismatch {
            op: "concat_channels",
            expected: a.dims().to_vec(),
            got: b.dims().to_vec(),
        });
    }
    let mut dims = a.dims().to_vec();
    dims[0] += b.dims()[0];
    let mut data = Vec::with_capacity(a.len() + b.len());
    data.extend_from_slice(a.data());
    data.extend_from_slice(b.data());
    Tensor::from_vec(&dims, data)
}

/// Splits a channel-concatenated gradient back into its two parts.
pub fn concat_channels_backward(grad_out: &Tensor, a_channels: usize) -> Result<(Tensor, Tensor)> {
    let dims = grad_out.dims();
    if dims.is_empty() || a_channels > dims[0] {
        return Err(Error::invalid(
            "concat_channels_backward",
            format!("cannot split {a_channels} channels from {dims:?}"),
        ));
    }
    let plane: usize = dims[1..].iter().product();
    let split = a_channels * plane;
    let mut da = dims.to_vec();
    da[0] = a_channels;
    let mut db = dims.to_vec();
    db[0] = dims[0] - a_channels;
    Ok((
        Tensor::from_vec(&da, grad_out.data()[..split].to_vec())?,
        Tensor::from_vec(&db, grad_out.data()[split..].to_vec())?,
    ))
}

/// Mean squared error over all elements and its gradient w.r.t. `pred`.
pub fn mse_loss(pred: &Tensor, target: &Tensor) -> Result<(f64, Tensor)> {
    target.ensure_dims("mse_loss", pred.dims())?;
    let n = pred.len().max(1) as f64;
    let mut loss = 0.0;
    let grad = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| {
            let d = p - t;
            loss += d * d;
            2.0 * d / n
        })
        .collect();
    Ok((loss / n, Tensor::from_vec(pred.dims(), grad)?))
}
