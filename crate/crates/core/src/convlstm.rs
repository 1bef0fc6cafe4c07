//! Convolutional LSTM (peephole-free) with backpropagation through time.
//!
//! Gates are ordered input, forget, output, candidate:
//!
//! ```text
//! i = σ(Wxi*x + Whi*h + bi)    f = σ(Wxf*x + Whf*h + bf)
//! o = σ(Wxo*x + Who*h + bo)    g = tanh(Wxg*x + Whg*h + bg)
//! c' = f⊙c + i⊙g               h' = o⊙tanh(c')
//! ```

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops::{concat_channels, concat_channels_backward, conv_backward_parts, conv_forward_parts, sigmoid, Padding};
use crate::tensor::Tensor;

pub const GATES: [&str; 4] = ["i", "f", "o", "g"];
const FORGET: usize = 1;
const CANDIDATE: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLstmParams {
    /// Input-to-gate kernels `[hidden, in, k, k]`.
    pub w_x: [Tensor; 4],
    /// Hidden-to-gate kernels `[hidden, hidden, k, k]`.
    pub w_h: [Tensor; 4],
    /// Gate biases `[hidden]`.
    pub b: [Tensor; 4],
}

impl ConvLstmParams {
    pub fn zeros(in_channels: usize, hidden: usize, kernel: usize) -> Self {
        ConvLstmParams {
            w_x: std::array::from_fn(|_| Tensor::zeros(&[hidden, in_channels, kernel, kernel])),
            w_h: std::array::from_fn(|_| Tensor::zeros(&[hidden, hidden, kernel, kernel])),
            b: std::array::from_fn(|_| Tensor::zeros(&[hidden])),
        }
    }

    /// Uniform ±1/√fan_in kernels, zero biases except forget = 1.
    pub fn init(in_channels: usize, hidden: usize, kernel: usize, rng: &mut impl Rng) -> Self {
        let mut p = Self::zeros(in_channels, hidden, kernel);
        for w in p.w_x.iter_mut().chain(p.w_h.iter_mut()) {
            let fan_in = (w.dims()[1] * kernel * kernel) as f64;
            let bound = 1.0 / fan_in.sqrt();
            for v in w.data_mut() {
                *v = rng.gen_range(-bound..=bound);
            }
        }
        p.b[FORGET] = Tensor::full(&[hidden], 1.0);
        p
    }

    pub fn hidden(&self) -> usize {
        self.b[0].dims()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.w_x[0].dims()[1]
    }

    pub fn kernel_size(&self) -> usize {
        self.w_x[0].dims()[2]
    }

    /// All twelve tensors in a fixed order: w_x gates, w_h gates, biases.
    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.w_x.iter().chain(&self.w_h).chain(&self.b)
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.w_x
            .iter_mut()
            .chain(self.w_h.iter_mut())
            .chain(self.b.iter_mut())
    }

    /// Parameter names matching [`Self::tensors`] order.
    pub fn names() -> impl Iterator<Item = String> {
        let wx = GATES.iter().map(|g| format!("w_x{g}"));
        let wh = GATES.iter().map(|g| format!("w_h{g}"));
        let b = GATES.iter().map(|g| format!("b_{g}"));
        wx.chain(wh).chain(b)
    }

    pub fn add_assign(&mut self, other: &ConvLstmParams) {
        for (a, b) in self.tensors_mut().zip(other.tensors()) {
            a.add_assign(b);
        }
    }

    fn validate(&self) -> Result<()> {
        let (h, cin, k) = (self.hidden(), self.in_channels(), self.kernel_size());
        if k % 2 == 0 {
            return Err(Error::invalid("convlstm", format!("kernel size {k} must be odd")));
        }
        for g in 0..4 {
            self.w_x[g].ensure_dims("convlstm params", &[h, cin, k, k])?;
            self.w_h[g].ensure_dims("convlstm params", &[h, h, k, k])?;
            self.b[g].ensure_dims("convlstm params", &[h])?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLstmState {
    pub h: Tensor,
    pub c: Tensor,
}

impl ConvLstmState {
    pub fn zeros(hidden: usize, height: usize, width: usize) -> Self {
        ConvLstmState {
            h: Tensor::zeros(&[hidden, height, width]),
            c: Tensor::zeros(&[hidden, height, width]),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReturnMode {
    /// Only the final hidden state.
    Last,
    /// Every hidden state `h_1..h_T`.
    All,
}

/// Intermediate values of one cell step needed for the backward pass.
#[derive(Debug, Clone)]
pub struct CellCache {
    /// Input and previous hidden state stacked along channels.
    xh: Tensor,
    in_channels: usize,
    c_prev: Tensor,
    /// Activated gates i, f, o, g.
    gates: [Tensor; 4],
    tanh_c: Tensor,
}

/// All gate kernels as one `[4·hidden, in + hidden, k, k]` kernel over the
/// stacked `[x; h]` input, plus the matching `[4·hidden]` bias. One
/// convolution then produces every gate pre-activation.
fn fused_kernel(params: &ConvLstmParams) -> (Tensor, Tensor) {
    let (h, cin, k) = (params.hidden(), params.in_channels(), params.kernel_size());
    let (kx, kh) = (cin * k * k, h * k * k);
    let mut w = Vec::with_capacity(4 * h * (kx + kh));
    let mut b = Vec::with_capacity(4 * h);
    for g in 0..4 {
        let (wx, wh) = (params.w_x[g].data(), params.w_h[g].data());
        for o in 0..h {
            w.extend_from_slice(&wx[o * kx..(o + 1) * kx]);
            w.extend_from_slice(&wh[o * kh..(o + 1) * kh]);
        }
        b.extend_from_slice(params.b[g].data());
    }
    (
        Tensor::from_vec(&[4 * h, cin + h, k, k], w).expect("sizes follow the params"),
        Tensor::from_vec(&[4 * h], b).expect("sizes follow the params"),
    )
}

/// One cell update, returning the new state and the cache for backward.
pub fn cell_step_cached(
    x: &Tensor,
    state: &ConvLstmState,
    params: &ConvLstmParams,
) -> Result<(ConvLstmState, CellCache)> {
    params.validate()?;
    let h = params.hidden();
    let xd = x.dims();
    if xd.len() != 3 || xd[0] != params.in_channels() {
        return Err(Error::ShapeMismatch {
            op: "convlstm cell_step",
            expected: vec![params.in_channels(), state.h.dims()[1], state.h.dims()[2]],
            got: xd.to_vec(),
        });
    }
    let hd = [h, xd[1], xd[2]];
    state.h.ensure_dims("convlstm cell_step (h)", &hd)?;
    state.c.ensure_dims("convlstm cell_step (c)", &hd)?;

    let xh = concat_channels(x, &state.h)?;
    let (w, b) = fused_kernel(params);
    let z = conv_forward_parts(&xh, &w, &b, Padding::Same)?;
    let n = state.c.len();
    let gates: [Tensor; 4] = std::array::from_fn(|g| {
        let act = if g == CANDIDATE { f64::tanh } else { sigmoid };
        let v = z.data()[g * n..(g + 1) * n].iter().map(|&v| act(v)).collect();
        Tensor::from_vec(&hd, v).expect("gate block has the state shape")
    });
    let mut c_new = vec![0.0; n];
    let mut tanh_c = vec![0.0; n];
    let mut h_new = vec![0.0; n];
    let (gi, gf, go, gg) = (
        gates[0].data(),
        gates[1].data(),
        gates[2].data(),
        gates[3].data(),
    );
    let c_prev = state.c.data();
    for k in 0..n {
        c_new[k] = gf[k] * c_prev[k] + gi[k] * gg[k];
        tanh_c[k] = c_new[k].tanh();
        h_new[k] = go[k] * tanh_c[k];
    }
    let next = ConvLstmState {
        h: Tensor::from_vec(&hd, h_new)?,
        c: Tensor::from_vec(&hd, c_new)?,
    };
    let cache = CellCache {
        xh,
        in_channels: xd[0],
        c_prev: state.c.clone(),
        gates,
        tanh_c: Tensor::from_vec(&hd, tanh_c)?,
    };
    Ok((next, cache))
}

pub fn cell_step(x: &Tensor, state: &ConvLstmState, params: &ConvLstmParams) -> Result<ConvLstmState> {
    cell_step_cached(x, state, params).map(|(s, _)| s)
}

/// Backward through one cell. Accumulates parameter gradients into `grads`
/// and returns `(dx, dh_prev, dc_prev)`.
pub fn cell_backward(
    cache: &CellCache,
    params: &ConvLstmParams,
    dh: &Tensor,
    dc_next: &Tensor,
    grads: &mut ConvLstmParams,
) -> Result<(Tensor, Tensor, Tensor)> {
    let hd = cache.c_prev.dims().to_vec();
    dh.ensure_dims("convlstm cell_backward (dh)", &hd)?;
    dc_next.ensure_dims("convlstm cell_backward (dc)", &hd)?;
    let n = cache.c_prev.len();
    let [gi, gf, go, gg] = [
        cache.gates[0].data(),
        cache.gates[1].data(),
        cache.gates[2].data(),
        cache.gates[3].data(),
    ];
    let tc = cache.tanh_c.data();
    let cp = cache.c_prev.data();
    let (dhd, dcd) = (dh.data(), dc_next.data());

    // gate pre-activation gradients, stacked in fused-kernel order
    let mut dz = vec![0.0; 4 * n];
    let mut dc_prev = vec![0.0; n];
    for k in 0..n {
        let d_o = dhd[k] * tc[k];
        let dc = dcd[k] + dhd[k] * go[k] * (1.0 - tc[k] * tc[k]);
        let d_i = dc * gg[k];
        let d_g = dc * gi[k];
        let d_f = dc * cp[k];
        dc_prev[k] = dc * gf[k];
        dz[k] = d_i * gi[k] * (1.0 - gi[k]);
        dz[n + k] = d_f * gf[k] * (1.0 - gf[k]);
        dz[2 * n + k] = d_o * go[k] * (1.0 - go[k]);
        dz[3 * n + k] = d_g * (1.0 - gg[k] * gg[k]);
    }

    let h = hd[0];
    let dz = Tensor::from_vec(&[4 * h, hd[1], hd[2]], dz)?;
    let (w, b) = fused_kernel(params);
    let g = conv_backward_parts(&cache.xh, &w, &b, Padding::Same, &dz)?;
    let (dx, dh_prev) = concat_channels_backward(&g.input, cache.in_channels)?;
    let k2 = params.kernel_size() * params.kernel_size();
    let (kx, kh) = (cache.in_channels * k2, h * k2);
    let gk = g.kernel.data();
    for gate in 0..4 {
        let wx = grads.w_x[gate].data_mut();
        for o in 0..h {
            let row = &gk[(gate * h + o) * (kx + kh)..(gate * h + o + 1) * (kx + kh)];
            for (d, s) in wx[o * kx..(o + 1) * kx].iter_mut().zip(&row[..kx]) {
                *d += s;
            }
        }
        let wh = grads.w_h[gate].data_mut();
        for o in 0..h {
            let row = &gk[(gate * h + o) * (kx + kh)..(gate * h + o + 1) * (kx + kh)];
            for (d, s) in wh[o * kh..(o + 1) * kh].iter_mut().zip(&row[kx..]) {
                *d += s;
            }
        }
        for (d, s) in grads.b[gate].data_mut().iter_mut().zip(&g.bias.data()[gate * h..(gate + 1) * h]) {
            *d += s;
        }
    }
    Ok((dx, dh_prev, Tensor::from_vec(&hd, dc_prev)?))
}

/// Cached unrolled sequence.
#[derive(Debug, Clone)]
pub struct SequenceCache {
    cells: Vec<CellCache>,
    mode: ReturnMode,
}

impl SequenceCache {
    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn mode(&self) -> ReturnMode {
        self.mode
    }
}

/// Unrolls the cell from a zero state. Returns `[h_T]` in `Last` mode and
/// `[h_1, .., h_T]` in `All` mode.
pub fn forward_sequence_cached(
    xs: &[Tensor],
    params: &ConvLstmParams,
    mode: ReturnMode,
) -> Result<(Vec<Tensor>, SequenceCache)> {
    let first = xs
        .first()
        .ok_or_else(|| Error::invalid("convlstm forward_sequence", "empty input sequence"))?;
    let d = first.dims();
    if d.len() != 3 {
        return Err(Error::invalid(
            "convlstm forward_sequence",
            format!("frames must be [C,H,W], got {d:?}"),
        ));
    }
    let mut state = ConvLstmState::zeros(params.hidden(), d[1], d[2]);
    let mut outs = Vec::with_capacity(xs.len());
    let mut cells = Vec::with_capacity(xs.len());
    for x in xs {
        let (next, cache) = cell_step_cached(x, &state, params)?;
        if mode == ReturnMode::All {
            outs.push(next.h.clone());
        }
        cells.push(cache);
        state = next;
    }
    if mode == ReturnMode::Last {
        outs.push(state.h);
    }
    Ok((outs, SequenceCache { cells, mode }))
}

pub fn forward_sequence(xs: &[Tensor], params: &ConvLstmParams, mode: ReturnMode) -> Result<Vec<Tensor>> {
    forward_sequence_cached(xs, params, mode).map(|(o, _)| o)
}

/// Backpropagation through time from a cached forward pass.
pub fn backward_sequence_cached(
    cache: &SequenceCache,
    params: &ConvLstmParams,
    grad_outs: &[Tensor],
) -> Result<(Vec<Tensor>, ConvLstmParams)> {
    let t_len = cache.cells.len();
    let expected = match cache.mode {
        ReturnMode::Last => 1,
        ReturnMode::All => t_len,
    };
    if grad_outs.len() != expected {
        return Err(Error::invalid(
            "convlstm backward_sequence",
            format!("expected {expected} output gradients, got {}", grad_outs.len()),
        ));
    }
    let hd = cache.cells[0].c_prev.dims().to_vec();
    let mut grads = ConvLstmParams::zeros(params.in_channels(), params.hidden(), params.kernel_size());
    let mut dh = Tensor::zeros(&hd);
    let mut dc = Tensor::zeros(&hd);
    let mut dxs = vec![Tensor::zeros(&[0]); t_len];
    for t in (0..t_len).rev() {
        match cache.mode {
            ReturnMode::All => dh.add_assign(&grad_outs[t]),
            ReturnMode::Last if t == t_len - 1 => dh.add_assign(&grad_outs[0]),
            ReturnMode::Last => {}
        }
        let (dx, dh_prev, dc_prev) = cell_backward(&cache.cells[t], params, &dh, &dc, &mut grads)?;
        dxs[t] = dx;
        dh = dh_prev;
        dc = dc_prev;
    }
    Ok((dxs, grads))
}

/// Recomputes the forward pass of `xs` and returns input and parameter
/// gradients for the given output gradients.
pub fn backward_sequence(
    xs: &[Tensor],
    params: &ConvLstmParams,
    mode: ReturnMode,
    grad_outs: &[Tensor],
) -> Result<(Vec<Tensor>, ConvLstmParams)> {
    let (_, cache) = forward_sequence_cached(xs, params, mode)?;
    backward_sequence_cached(&cache, params, grad_outs)
}
