//! The three architectures: recurrent U-Net next-frame predictor,
//! non-recurrent 2-D U-Net, and recurrent (ConvLSTM bottleneck) autoencoder.
//!
//! All three share one encoder/decoder skeleton. Encoder levels run two
//! convolutions and a 2×2 spatial max-pool (time is never pooled); the
//! decoder mirrors them with nearest-neighbour upsampling. Parameters live in
//! a flat, ordered [`ModelWeights`] and layers refer to them by index.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::convlstm::{
    backward_sequence_cached, forward_sequence_cached, ConvLstmParams, ReturnMode, SequenceCache,
};
use crate::error::{Error, Result};
use crate::ops::{
    concat_channels, concat_channels_backward, conv_backward_parts, conv_forward_parts,
    max_pool_spatial, mse_loss, upsample_nearest, upsample_nearest_backward, Activation, Padding,
    PoolIndex,
};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    RecurrentUnet,
    Unet2d,
    RecurrentAutoencoder,
}

impl ModelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::RecurrentUnet => "recurrent_unet",
            ModelKind::Unet2d => "unet2d",
            ModelKind::RecurrentAutoencoder => "recurrent_autoencoder",
        }
    }

    /// Predictors forecast frame `T`; the autoencoder reconstructs `0..T`.
    pub fn is_predictor(self) -> bool {
        !matches!(self, ModelKind::RecurrentAutoencoder)
    }
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for ModelKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "recurrent_unet" => Ok(ModelKind::RecurrentUnet),
            "unet2d" => Ok(ModelKind::Unet2d),
            "recurrent_autoencoder" | "autoencoder" => Ok(ModelKind::RecurrentAutoencoder),
            _ => Err(format!("unknown model kind `{s}`")),
        }
    }
}

/// How a recurrent U-Net skip connection collapses the time axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SkipMode {
    /// A per-level ConvLSTM whose final hidden state is concatenated.
    #[default]
    ConvlstmLast,
    /// The encoder features of the last input frame.
    LastFrame,
}

fn default_levels() -> usize {
    2
}
fn default_channels() -> Vec<usize> {
    vec![16, 32]
}
fn default_bottleneck() -> usize {
    64
}
fn default_kernel() -> usize {
    3
}
fn default_t() -> usize {
    20
}
fn default_true() -> bool {
    true
}
fn default_output_activation() -> Activation {
    Activation::Linear
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub kind: ModelKind,
    /// Number of pooling stages.
    #[serde(default = "default_levels")]
    pub levels: usize,
    /// Feature count per encoder level.
    #[serde(default = "default_channels")]
    pub channels: Vec<usize>,
    /// Feature count at the bottleneck (ConvLSTM hidden size for the
    /// recurrent kinds).
    #[serde(default = "default_bottleneck")]
    pub bottleneck: usize,
    /// Hidden channels of the per-level skip ConvLSTMs; defaults to the
    /// level's channel count.
    #[serde(default)]
    pub convlstm_hidden: Option<Vec<usize>>,
    #[serde(default)]
    pub skip_mode: SkipMode,
    /// Skip concatenations on/off (ignored by the autoencoder, which has none).
    #[serde(default = "default_true")]
    pub skips: bool,
    #[serde(default)]
    pub hidden_activation: Activation,
    #[serde(default = "default_output_activation")]
    pub output_activation: Activation,
    /// Odd spatial (and temporal) kernel extent.
    #[serde(default = "default_kernel")]
    pub kernel: usize,
    /// Input sequence length.
    #[serde(default = "default_t")]
    pub t: usize,
}

impl ModelSpec {
    pub fn new(kind: ModelKind) -> Self {
        ModelSpec {
            kind,
            levels: default_levels(),
            channels: default_channels(),
            bottleneck: default_bottleneck(),
            convlstm_hidden: None,
            skip_mode: SkipMode::default(),
            skips: true,
            hidden_activation: Activation::default(),
            output_activation: default_output_activation(),
            kernel: default_kernel(),
            t: default_t(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field, reason: String| Err(Error::InvalidSpec { field, reason });
        if self.levels == 0 {
            return bad("levels", "must be at least 1".into());
        }
        if self.channels.len() != self.levels {
            return bad(
                "channels",
                format!("{} entries for {} levels", self.channels.len(), self.levels),
            );
        }
        if self.channels.contains(&0) {
            return bad("channels", "channel counts must be positive".into());
        }
        if self.bottleneck == 0 {
            return bad("bottleneck", "must be positive".into());
        }
        if let Some(h) = &self.convlstm_hidden {
            if h.len() != self.levels || h.contains(&0) {
                return bad(
                    "convlstm_hidden",
                    format!("need {} positive entries, got {h:?}", self.levels),
                );
            }
        }
        if self.kernel % 2 == 0 {
            return bad("kernel", format!("{} is not odd", self.kernel));
        }
        if self.t == 0 {
            return bad("t", "must be at least 1".into());
        }
        Ok(())
    }

    /// Required divisor of input height and width.
    pub fn spatial_multiple(&self) -> usize {
        1 << self.levels
    }

    fn skip_hidden(&self, level: usize) -> usize {
        self.convlstm_hidden
            .as_ref()
            .map_or(self.channels[level], |h| h[level])
    }

    fn uses_skips(&self) -> bool {
        self.skips && self.kind != ModelKind::RecurrentAutoencoder
    }

    /// Channels a decoder level receives from its skip connection.
    fn skip_channels(&self, level: usize) -> usize {
        if !self.uses_skips() {
            return 0;
        }
        match (self.kind, self.skip_mode) {
            (ModelKind::RecurrentUnet, SkipMode::ConvlstmLast) => self.skip_hidden(level),
            _ => self.channels[level],
        }
    }

    /// Expected input dims for frames of size `h × w`.
    pub fn input_dims(&self, h: usize, w: usize) -> Vec<usize> {
        match self.kind {
            ModelKind::Unet2d => vec![self.t, h, w],
            _ => vec![1, h, w, self.t],
        }
    }

    pub fn output_dims(&self, h: usize, w: usize) -> Vec<usize> {
        match self.kind {
            ModelKind::RecurrentAutoencoder => vec![1, h, w, self.t],
            _ => vec![1, h, w],
        }
    }
}

/// Ordered named parameter tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    params: Vec<(String, Tensor)>,
}

impl ModelWeights {
    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|(n, _)| n.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.params.iter_mut().map(|(_, t)| t)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params
            .iter_mut()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    pub fn tensor(&self, index: usize) -> &Tensor {
        &self.params[index].1
    }

    /// Total scalar parameter count.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn zeros_like(&self) -> ModelWeights {
        ModelWeights {
            params: self
                .params
                .iter()
                .map(|(n, t)| (n.clone(), Tensor::zeros(t.dims())))
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &ModelWeights) {
        for ((_, a), (_, b)) in self.params.iter_mut().zip(&other.params) {
            a.add_assign(b);
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for (_, t) in &mut self.params {
            t.scale(factor);
        }
    }

    pub fn sum_sq(&self) -> f64 {
        self.params.iter().map(|(_, t)| t.sum_sq()).sum()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.num_scalars());
        for (_, t) in &self.params {
            v.extend_from_slice(t.data());
        }
        v
    }

    pub fn set_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.num_scalars());
        let mut k = 0;
        for (_, t) in &mut self.params {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[k..k + n]);
            k += n;
        }
    }

    fn add_at(&mut self, index: usize, grad: &Tensor) {
        self.params[index].1.add_assign(grad);
    }

    fn lstm(&self, h: LstmHandle) -> ConvLstmParams {
        let t = |k: usize| self.params[h.first + k].1.clone();
        ConvLstmParams {
            w_x: std::array::from_fn(t),
            w_h: std::array::from_fn(|g| t(4 + g)),
            b: std::array::from_fn(|g| t(8 + g)),
        }
    }

    fn add_lstm(&mut self, h: LstmHandle, grads: &ConvLstmParams) {
        for (k, g) in grads.tensors().enumerate() {
            self.add_at(h.first + k, g);
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvHandle {
    kernel: usize,
    bias: usize,
}

#[derive(Debug, Clone, Copy)]
struct LstmHandle {
    first: usize,
}

#[derive(Debug, Clone, Copy)]
enum Bottleneck {
    Lstm(LstmHandle),
    Conv(ConvHandle),
}

/// Parameter layout for a spec.
#[derive(Debug, Clone)]
struct Arch {
    enc: Vec<[ConvHandle; 2]>,
    skip_lstm: Vec<Option<LstmHandle>>,
    bottleneck: Bottleneck,
    dec: Vec<[ConvHandle; 2]>,
    head: ConvHandle,
}

/// Parameter names and shapes plus whether each is a ConvLSTM member.
struct Registry {
    shapes: Vec<(String, Vec<usize>)>,
    lstm_blocks: Vec<(usize, usize, usize)>,
}

impl Registry {
    fn conv(&mut self, name: &str, dims: Vec<usize>) -> ConvHandle {
        let out = dims[0];
        let kernel = self.shapes.len();
        self.shapes.push((format!("{name}.kernel"), dims));
        self.shapes.push((format!("{name}.bias"), vec![out]));
        ConvHandle {
            kernel,
            bias: kernel + 1,
        }
    }

    fn lstm(&mut self, name: &str, cin: usize, hidden: usize, k: usize) -> LstmHandle {
        let first = self.shapes.len();
        let shapes = ConvLstmParams::zeros(cin, hidden, k);
        for (n, t) in ConvLstmParams::names().zip(shapes.tensors()) {
            self.shapes.push((format!("{name}.{n}"), t.dims().to_vec()));
        }
        self.lstm_blocks.push((first, cin, hidden));
        LstmHandle { first }
    }
}

fn layout(spec: &ModelSpec) -> (Arch, Registry) {
    let k = spec.kernel;
    let three_d_enc = spec.kind != ModelKind::Unet2d;
    let conv_dims = |out: usize, cin: usize, three_d: bool| {
        if three_d {
            vec![out, cin, k, k, k]
        } else {
            vec![out, cin, k, k]
        }
    };
    let mut reg = Registry {
        shapes: Vec::new(),
        lstm_blocks: Vec::new(),
    };
    let mut enc = Vec::with_capacity(spec.levels);
    let mut cin = match spec.kind {
        ModelKind::Unet2d => spec.t,
        _ => 1,
    };
    for (l, &c) in spec.channels.iter().enumerate() {
        let a = reg.conv(&format!("enc{l}.conv1"), conv_dims(c, cin, three_d_enc));
        let b = reg.conv(&format!("enc{l}.conv2"), conv_dims(c, c, three_d_enc));
        enc.push([a, b]);
        cin = c;
    }
    let mut skip_lstm = vec![None; spec.levels];
    if spec.kind == ModelKind::RecurrentUnet && spec.uses_skips() && spec.skip_mode == SkipMode::ConvlstmLast {
        for (l, slot) in skip_lstm.iter_mut().enumerate() {
            *slot = Some(reg.lstm(
                &format!("skip{l}.lstm"),
                spec.channels[l],
                spec.skip_hidden(l),
                k,
            ));
        }
    }
    let deepest = spec.channels[spec.levels - 1];
    let bottleneck = match spec.kind {
        ModelKind::Unet2d => Bottleneck::Conv(reg.conv("bottleneck.conv", conv_dims(spec.bottleneck, deepest, false))),
        _ => Bottleneck::Lstm(reg.lstm("bottleneck.lstm", deepest, spec.bottleneck, k)),
    };
    let three_d_dec = spec.kind == ModelKind::RecurrentAutoencoder;
    let mut dec: Vec<Option<[ConvHandle; 2]>> = vec![None; spec.levels];
    let mut prev = spec.bottleneck;
    for l in (0..spec.levels).rev() {
        let c = spec.channels[l];
        let a = reg.conv(
            &format!("dec{l}.conv1"),
            conv_dims(c, prev + spec.skip_channels(l), three_d_dec),
        );
        let b = reg.conv(&format!("dec{l}.conv2"), conv_dims(c, c, three_d_dec));
        dec[l] = Some([a, b]);
        prev = c;
    }
    let head_dims = if three_d_dec {
        vec![1, spec.channels[0], 1, 1, 1]
    } else {
        vec![1, spec.channels[0], 1, 1]
    };
    let head = reg.conv("head", head_dims);
    let arch = Arch {
        enc,
        skip_lstm,
        bottleneck,
        dec: dec.into_iter().map(|d| d.expect("every level assigned")).collect(),
        head,
    };
    (arch, reg)
}

/// Number of scalar parameters a spec implies, without allocating them.
pub fn parameter_count(spec: &ModelSpec) -> Result<usize> {
    spec.validate()?;
    let (_, reg) = layout(spec);
    Ok(reg.shapes.iter().map(|(_, d)| d.iter().product::<usize>()).sum())
}

/// Cached activations of one conv + activation layer.
#[derive(Debug, Clone)]
struct ConvCache {
    input: Tensor,
    output: Tensor,
}

#[derive(Debug, Clone)]
enum SkipCache {
    None,
    Lstm(SequenceCache),
    LastFrame { dims: Vec<usize> },
    Direct,
}

#[derive(Debug, Clone)]
struct LevelCache {
    convs: [ConvCache; 2],
    pool: PoolIndex,
    skip: SkipCache,
}

#[derive(Debug, Clone)]
enum BottleneckCache {
    Lstm(SequenceCache, Vec<usize>),
    Conv(ConvCache),
}

#[derive(Debug, Clone)]
struct DecCache {
    up_input_dims: Vec<usize>,
    up_channels: usize,
    convs: [ConvCache; 2],
}

/// Everything a backward pass needs from the forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    enc: Vec<LevelCache>,
    bottleneck: BottleneckCache,
    dec: Vec<DecCache>,
    head: ConvCache,
}

#[derive(Debug, Clone)]
pub struct Model {
    spec: ModelSpec,
    weights: ModelWeights,
    arch: Arch,
}

fn frames_of(x: &Tensor) -> Vec<Tensor> {
    (0..x.dims()[3]).map(|t| x.time_slice(t)).collect()
}

impl Model {
    /// Seeded initialisation: kernels uniform in ±1/√fan_in, biases zero,
    /// ConvLSTM forget-gate biases one.
    pub fn build(spec: ModelSpec, seed: u64) -> Result<Model> {
        spec.validate()?;
        let (arch, reg) = layout(&spec);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params: Vec<(String, Tensor)> = Vec::with_capacity(reg.shapes.len());
        let mut i = 0;
        while i < reg.shapes.len() {
            if let Some(&(_, cin, hidden)) = reg.lstm_blocks.iter().find(|b| b.0 == i) {
                let p = ConvLstmParams::init(cin, hidden, spec.kernel, &mut rng);
                for t in p.tensors() {
                    params.push((reg.shapes[i].0.clone(), t.clone()));
                    i += 1;
                }
                continue;
            }
            let (name, dims) = &reg.shapes[i];
            let t = if name.ends_with(".bias") {
                Tensor::zeros(dims)
            } else {
                let fan_in: usize = dims[1..].iter().product();
                let bound = 1.0 / (fan_in as f64).sqrt();
                Tensor::from_fn(dims, |_| rng.gen_range(-bound..=bound))
            };
            params.push((name.clone(), t));
            i += 1;
        }
        Ok(Model {
            spec,
            weights: ModelWeights { params },
            arch,
        })
    }

    /// Wraps existing weights, checking names and shapes against the `ModelSpec`.
    pub fn from_parts(spec: ModelSpec, weights: ModelWeights) -> Result<Model> {
        spec.validate()?;
        let (arch, reg) = layout(&spec);
        if reg.shapes.len() != weights.len() {
            return Err(Error::invalid(
                "Model::from_parts",
                format!(
                    "spec needs {} parameter tensors, got {}",
                    reg.shapes.len(),
                    weights.len()
                ),
            ));
        }
        for ((name, dims), (wn, wt)) in reg.shapes.iter().zip(weights.iter()) {
            if name != wn || dims.as_slice() != wt.dims() {
                return Err(Error::invalid(
                    "Model::from_parts",
                    format!("expected {name} {dims:?}, found {wn} {:?}", wt.dims()),
                ));
            }
        }
        Ok(Model {
            spec,
            weights,
            arch,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn kind(&self) -> ModelKind {
        self.spec.kind
    }

    pub fn weights(&self) -> &ModelWeights {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut ModelWeights {
        &mut self.weights
    }

    pub fn into_parts(self) -> (ModelSpec, ModelWeights) {
        (self.spec, self.weights)
    }

    /// Same weights applied to sequences of a different length. Only the
    /// recurrent kinds are length-agnostic; the 2-D U-Net's first layer is
    /// sized by `t`.
    pub fn with_sequence_length(&self, t: usize) -> Result<Model> {
        if self.spec.kind == ModelKind::Unet2d && t != self.spec.t {
            return Err(Error::InvalidSpec {
                field: "t",
                reason: "unet2d weights are tied to their input length".into(),
            });
        }
        let mut m = self.clone();
        m.spec.t = t;
        m.spec.validate()?;
        Ok(m)
    }

    /// Splits a `[1, H, W, T+1]` clip into `(input, target)` for this kind.
    pub fn split_clip(&self, frames: &Tensor) -> Result<(Tensor, Tensor)> {
        let d = frames.dims();
        let t = self.spec.t;
        if d.len() != 4 || d[0] != 1 || d[3] < t + usize::from(self.spec.kind.is_predictor()) {
            return Err(Error::invalid(
                "split_clip",
                format!("clip {d:?} too short for T={t}"),
            ));
        }
        let input = frames.time_range(0..t);
        Ok(match self.spec.kind {
            ModelKind::RecurrentAutoencoder => (input.clone(), input),
            ModelKind::RecurrentUnet => (input, frames.time_range(t..t + 1).reshape(&[1, d[1], d[2]])?),
            ModelKind::Unet2d => (
                time_to_channels(&input),
                frames.time_range(t..t + 1).reshape(&[1, d[1], d[2]])?,
            ),
        })
    }

    fn check_input(&self, op: &'static str, input: &Tensor) -> Result<(usize, usize)> {
        let d = input.dims();
        let (h, w) = match (self.spec.kind, d) {
            (ModelKind::Unet2d, [_, h, w]) => (*h, *w),
            (ModelKind::Unet2d, _) => {
                return Err(Error::invalid(op, format!("expected [T,H,W], got {d:?}")))
            }
            (_, [1, h, w, _]) => (*h, *w),
            _ => return Err(Error::invalid(op, format!("expected [1,H,W,T], got {d:?}"))),
        };
        let m = self.spec.spatial_multiple();
        if h % m != 0 || w % m != 0 || h == 0 || w == 0 {
            return Err(Error::invalid(
                op,
                format!("spatial dims {h}x{w} not divisible by {m}"),
            ));
        }
        input.ensure_dims(op, &self.spec.input_dims(h, w))?;
        Ok((h, w))
    }

    fn require_kind(&self, op: &'static str, kind: ModelKind) -> Result<()> {
        if self.spec.kind != kind {
            return Err(Error::KindMismatch {
                expected: format!("{kind} ({op})"),
                found: self.spec.kind.to_string(),
            });
        }
        Ok(())
    }

    /// Next frame `[1, H, W]` from a `[1, H, W, T]` clip.
    pub fn predictor_forward(&self, clip: &Tensor) -> Result<Tensor> {
        self.require_kind("predictor_forward", ModelKind::RecurrentUnet)?;
        self.forward(clip)
    }

    /// Next frame `[1, H, W]` from `[T, H, W]` (time as channels).
    pub fn unet2d_forward(&self, clip: &Tensor) -> Result<Tensor> {
        self.require_kind("unet2d_forward", ModelKind::Unet2d)?;
        self.forward(clip)
    }

    /// Reconstruction `[1, H, W, T]` of a `[1, H, W, T]` clip.
    pub fn autoencoder_forward(&self, clip: &Tensor) -> Result<Tensor> {
        self.require_kind("autoencoder_forward", ModelKind::RecurrentAutoencoder)?;
        self.forward(clip)
    }

    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        self.forward_cached(input).map(|(y, _)| y)
    }

    fn conv(&self, h: ConvHandle, x: &Tensor) -> Result<Tensor> {
        conv_forward_parts(
            x,
            self.weights.tensor(h.kernel),
            self.weights.tensor(h.bias),
            Padding::Same,
        )
    }

    fn conv_act(&self, h: ConvHandle, x: Tensor, act: Activation) -> Result<ConvCache> {
        let z = self.conv(h, &x)?;
        Ok(ConvCache {
            input: x,
            output: act.forward(&z),
        })
    }

    fn conv_act_backward(
        &self,
        h: ConvHandle,
        cache: &ConvCache,
        act: Activation,
        grad_out: &Tensor,
        grads: &mut ModelWeights,
    ) -> Result<Tensor> {
        let gz = act.backward(&cache.output, grad_out)?;
        let g = conv_backward_parts(
            &cache.input,
            self.weights.tensor(h.kernel),
            self.weights.tensor(h.bias),
            Padding::Same,
            &gz,
        )?;
        grads.add_at(h.kernel, &g.kernel);
        grads.add_at(h.bias, &g.bias);
        Ok(g.input)
    }

    pub fn forward_cached(&self, input: &Tensor) -> Result<(Tensor, ForwardCache)> {
        self.check_input("forward", input)?;
        let act = self.spec.hidden_activation;
        let kind = self.spec.kind;

        let mut x = input.clone();
        let mut enc = Vec::with_capacity(self.spec.levels);
        let mut skips = Vec::with_capacity(self.spec.levels);
        for (l, handles) in self.arch.enc.iter().enumerate() {
            let a = self.conv_act(handles[0], x, act)?;
            let b = self.conv_act(handles[1], a.output.clone(), act)?;
            let features = &b.output;
            let (skip_out, skip) = if !self.spec.uses_skips() {
                (None, SkipCache::None)
            } else if kind == ModelKind::Unet2d {
                (Some(features.clone()), SkipCache::Direct)
            } else if let Some(lh) = self.arch.skip_lstm[l] {
                let (mut outs, cache) =
                    forward_sequence_cached(&frames_of(features), &self.weights.lstm(lh), ReturnMode::Last)?;
                (outs.pop(), SkipCache::Lstm(cache))
            } else {
                let last = features.dims()[3] - 1;
                (
                    Some(features.time_slice(last)),
                    SkipCache::LastFrame {
                        dims: features.dims().to_vec(),
                    },
                )
            };
            let (pooled, pool) = max_pool_spatial(features)?;
            skips.push(skip_out);
            enc.push(LevelCache {
                convs: [a, b],
                pool,
                skip,
            });
            x = pooled;
        }

        let (mut d, bottleneck) = match self.arch.bottleneck {
            Bottleneck::Conv(h) => {
                let c = self.conv_act(h, x, act)?;
                (c.output.clone(), BottleneckCache::Conv(c))
            }
            Bottleneck::Lstm(lh) => {
                let dims = x.dims().to_vec();
                let mode = if kind == ModelKind::RecurrentAutoencoder {
                    ReturnMode::All
                } else {
                    ReturnMode::Last
                };
                let (outs, cache) = forward_sequence_cached(&frames_of(&x), &self.weights.lstm(lh), mode)?;
                let d = match mode {
                    ReturnMode::All => Tensor::stack_time(&outs)?,
                    ReturnMode::Last => outs.into_iter().next().expect("last output"),
                };
                (d, BottleneckCache::Lstm(cache, dims))
            }
        };

        let mut dec = Vec::with_capacity(self.spec.levels);
        for l in (0..self.spec.levels).rev() {
            let up_input_dims = d.dims().to_vec();
            let up = upsample_nearest(&d, 2, true)?;
            let up_channels = up.dims()[0];
            let merged = match skips[l].take() {
                Some(s) => concat_channels(&up, &s)?,
                None => up,
            };
            let a = self.conv_act(self.arch.dec[l][0], merged, act)?;
            let b = self.conv_act(self.arch.dec[l][1], a.output.clone(), act)?;
            d = b.output.clone();
            dec.push(DecCache {
                up_input_dims,
                up_channels,
                convs: [a, b],
            });
        }

        let head = self.conv_act(self.arch.head, d, self.spec.output_activation)?;
        let y = head.output.clone();
        Ok((
            y,
            ForwardCache {
                enc,
                bottleneck,
                dec,
                head,
            },
        ))
    }

    /// Parameter gradients and input gradient for `grad_out` at the output.
    pub fn backward(&self, cache: &ForwardCache, grad_out: &Tensor) -> Result<(ModelWeights, Tensor)> {
        let act = self.spec.hidden_activation;
        let mut grads = self.weights.zeros_like();
        let mut gd = self.conv_act_backward(
            self.arch.head,
            &cache.head,
            self.spec.output_activation,
            grad_out,
            &mut grads,
        )?;

        // decoder caches were pushed deepest level first
        let mut skip_grads: Vec<Option<Tensor>> = vec![None; self.spec.levels];
        for (dc, l) in cache.dec.iter().rev().zip(0..self.spec.levels) {
            let g = self.conv_act_backward(self.arch.dec[l][1], &dc.convs[1], act, &gd, &mut grads)?;
            let g = self.conv_act_backward(self.arch.dec[l][0], &dc.convs[0], act, &g, &mut grads)?;
            let g_up = if g.dims()[0] > dc.up_channels {
                let (gu, gs) = concat_channels_backward(&g, dc.up_channels)?;
                skip_grads[l] = Some(gs);
                gu
            } else {
                g
            };
            gd = upsample_nearest_backward(&g_up, &dc.up_input_dims, 2, true)?;
        }

        let mut gx = match (&cache.bottleneck, self.arch.bottleneck) {
            (BottleneckCache::Conv(c), Bottleneck::Conv(h)) => {
                self.conv_act_backward(h, c, act, &gd, &mut grads)?
            }
            (BottleneckCache::Lstm(sc, dims), Bottleneck::Lstm(lh)) => {
                let outs = match sc.mode() {
                    ReturnMode::All => frames_of(&gd),
                    ReturnMode::Last => vec![gd],
                };
                let (dxs, lg) = backward_sequence_cached(sc, &self.weights.lstm(lh), &outs)?;
                grads.add_lstm(lh, &lg);
                let g = Tensor::stack_time(&dxs)?;
                g.ensure_dims("bottleneck backward", dims)?;
                g
            }
            _ => unreachable!("bottleneck cache does not match architecture"),
        };

        for l in (0..self.spec.levels).rev() {
            let lc = &cache.enc[l];
            let mut g_feat = lc.pool.backward(&gx)?;
            if let Some(gs) = skip_grads[l].take() {
                match &lc.skip {
                    SkipCache::Direct => g_feat.add_assign(&gs),
                    SkipCache::Lstm(sc) => {
                        let lh = self.arch.skip_lstm[l].expect("skip lstm present");
                        let (dxs, lg) = backward_sequence_cached(sc, &self.weights.lstm(lh), &[gs])?;
                        grads.add_lstm(lh, &lg);
                        g_feat.add_assign(&Tensor::stack_time(&dxs)?);
                    }
                    SkipCache::LastFrame { dims } => {
                        let t_len = dims[3];
                        let plane = gs.len();
                        let data = g_feat.data_mut();
                        for (p, &v) in gs.data().iter().enumerate().take(plane) {
                            data[p * t_len + t_len - 1] += v;
                        }
                    }
                    SkipCache::None => {}
                }
            }
            let g = self.conv_act_backward(self.arch.enc[l][1], &lc.convs[1], act, &g_feat, &mut grads)?;
            gx = self.conv_act_backward(self.arch.enc[l][0], &lc.convs[0], act, &g, &mut grads)?;
        }
        Ok((grads, gx))
    }

    /// MSE loss against `target` and its parameter gradients.
    pub fn loss_and_grad(&self, input: &Tensor, target: &Tensor) -> Result<(f64, ModelWeights)> {
        let (y, cache) = self.forward_cached(input)?;
        let (loss, g) = mse_loss(&y, target)?;
        let (grads, _) = self.backward(&cache, &g)?;
        Ok((loss, grads))
    }

    pub fn loss(&self, input: &Tensor, target: &Tensor) -> Result<f64> {
        let y = self.forward(input)?;
        Ok(mse_loss(&y, target)?.0)
    }
}

/// `[1, H, W, T]` → `[T, H, W]`.
pub fn time_to_channels(x: &Tensor) -> Tensor {
    let d = x.dims();
    let (h, w, t) = (d[1], d[2], d[3]);
    let src = x.data();
    let mut out = vec![0.0; t * h * w];
    for p in 0..h * w {
        for k in 0..t {
            out[k * h * w + p] = src[p * t + k];
        }
    }
    Tensor::from_vec(&[t, h, w], out).expect("dims consistent")
}

const WEIGHTS_MAGIC: &[u8; 4] = b"VXW1";

/// Writes `VXW1 | u32 spec_len | spec JSON | records`, each record being
/// `u32 name_len | name | u32 ndim | ndim × u32 dims | f64 payload`, all
/// little-endian.
pub fn save_weights(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let spec = serde_json::to_vec(&model.spec)?;
    let mut buf = Vec::with_capacity(8 + spec.len() + model.weights.num_scalars() * 8);
    buf.extend_from_slice(WEIGHTS_MAGIC);
    buf.extend_from_slice(&(spec.len() as u32).to_le_bytes());
    buf.extend_from_slice(&spec);
    for (name, t) in model.weights.iter() {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
        for &d in t.dims() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

struct Cursor<'a> {
    path: &'a Path,
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format {
                path: self.path.to_path_buf(),
                offset: self.pos as u64,
                msg: format!(
                    "truncated: need {n} bytes for {what}, {} remain",
                    self.buf.len() - self.pos
                ),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn fail(&self, msg: String) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            offset: self.pos as u64,
            msg,
        }
    }
}

/// Reads a weights file; nothing is returned unless the whole file parses
/// and matches its embedded spec.
pub fn load_weights(path: impl AsRef<Path>) -> Result<Model> {
    let path = path.as_ref();
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut cur = Cursor {
        path,
        buf: &buf,
        pos: 0,
    };
    let magic = cur.take(4, "magic")?;
    if magic != WEIGHTS_MAGIC {
        return Err(Error::Format {
            path: path.to_path_buf(),
            offset: 0,
            msg: format!("bad magic {magic:?}, expected \"VXW1\""),
        });
    }
    let spec_len = cur.u32("spec length")? as usize;
    let spec_bytes = cur.take(spec_len, "spec block")?;
    let spec: ModelSpec = serde_json::from_slice(spec_bytes)
        .map_err(|e| cur.fail(format!("spec block is not a valid model spec: {e}")))?;
    spec.validate()?;
    let (_, reg) = layout(&spec);
    let mut params = Vec::with_capacity(reg.shapes.len());
    for (want_name, want_dims) in &reg.shapes {
        let name_len = cur.u32("name length")? as usize;
        let name = std::str::from_utf8(cur.take(name_len, "parameter name")?)
            .map_err(|_| cur.fail("parameter name is not UTF-8".into()))?
            .to_string();
        if &name != want_name {
            return Err(cur.fail(format!("expected parameter {want_name}, found {name}")));
        }
        let ndim = cur.u32("ndim")? as usize;
        let mut dims = Vec::with_capacity(ndim.min(8));
        for _ in 0..ndim {
            dims.push(cur.u32("dims")? as usize);
        }
        if &dims != want_dims {
            return Err(cur.fail(format!(
                "{name}: dims {dims:?} do not match spec {want_dims:?}"
            )));
        }
        let n: usize = dims.iter().product();
        let payload = cur.take(n * 8, &format!("{name} payload"))?;
        let data = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        params.push((name, Tensor::from_vec(&dims, data)?));
    }
    if cur.pos != buf.len() {
        return Err(cur.fail(format!("{} trailing bytes", buf.len() - cur.pos)));
    }
    Model::from_parts(spec, ModelWeights { params })
}

/// [`load_weights`] that also checks the stored model kind.
pub fn load_weights_as(path: impl AsRef<Path>, kind: ModelKind) -> Result<Model> {
    let m = load_weights(path)?;
    if m.kind() != kind {
        return Err(Error::KindMismatch {
            expected: kind.to_string(),
            found: m.kind().to_string(),
        });
    }
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(kind: ModelKind) -> ModelSpec {
        ModelSpec {
            channels: vec![2, 3],
            bottleneck: 3,
            t: 3,
            ..ModelSpec::new(kind)
        }
    }

    #[test]
    fn build_is_deterministic() {
        let a = Model::build(toy(ModelKind::RecurrentUnet), 9).unwrap();
        let b = Model::build(toy(ModelKind::RecurrentUnet), 9).unwrap();
        assert_eq!(a.weights(), b.weights());
        let c = Model::build(toy(ModelKind::RecurrentUnet), 10).unwrap();
        assert_ne!(a.weights(), c.weights());
    }

    #[test]
    fn names_are_unique() {
        for kind in [ModelKind::RecurrentUnet, ModelKind::Unet2d, ModelKind::RecurrentAutoencoder] {
            let m = Model::build(toy(kind), 0).unwrap();
            let mut names: Vec<_> = m.weights().names().collect();
            let n = names.len();
            names.sort();
            names.dedup();
            assert_eq!(names.len(), n);
        }
    }

    #[test]
    fn forget_bias_initialised_to_one() {
        let m = Model::build(toy(ModelKind::RecurrentAutoencoder), 1).unwrap();
        let b = m.weights().get("bottleneck.lstm.b_f").unwrap();
        assert!(b.data().iter().all(|&v| v == 1.0));
        assert!(m.weights().get("bottleneck.lstm.b_i").unwrap().max_abs() == 0.0);
    }

    #[test]
    fn invalid_specs_name_the_field() {
        let mut s = toy(ModelKind::RecurrentUnet);
        s.channels = vec![4];
        match Model::build(s, 0) {
            Err(Error::InvalidSpec { field, .. }) => assert_eq!(field, "channels"),
            other => panic!("unexpected {other:?}"),
        }
        let mut s = toy(ModelKind::RecurrentUnet);
        s.levels = 0;
        s.channels = vec![];
        assert!(matches!(Model::build(s, 0), Err(Error::InvalidSpec { field: "levels", .. })));
    }

    #[test]
    fn indivisible_and_wrong_length_inputs_are_rejected() {
        let m = Model::build(toy(ModelKind::RecurrentUnet), 0).unwrap();
        assert!(m.forward(&Tensor::zeros(&[1, 6, 8, 3])).is_err());
        assert!(m.forward(&Tensor::zeros(&[1, 8, 8, 4])).is_err());
        assert!(m.forward(&Tensor::zeros(&[1, 8, 8, 3])).is_ok());
        assert!(m.autoencoder_forward(&Tensor::zeros(&[1, 8, 8, 3])).is_err());
    }

    #[test]
    fn hand_counted_parameters() {
        // levels 1, channels [2], bottleneck 3, k 3, T 2, 2-D U-Net:
        // enc0.conv1 2*2*9+2 = 38, enc0.conv2 2*2*9+2 = 38,
        // bottleneck 3*2*9+3 = 57, dec0.conv1 2*(3+2)*9+2 = 92,
        // dec0.conv2 38, head 1*2+1 = 3
        let spec = ModelSpec {
            levels: 1,
            channels: vec![2],
            bottleneck: 3,
            t: 2,
            ..ModelSpec::new(ModelKind::Unet2d)
        };
        assert_eq!(parameter_count(&spec).unwrap(), 38 + 38 + 57 + 92 + 38 + 3);
        let m = Model::build(spec, 0).unwrap();
        assert_eq!(m.weights().num_scalars(), 266);
    }

    #[test]
    fn time_to_channels_transposes() {
        let x = Tensor::from_fn(&[1, 2, 2, 3], |i| i as f64);
        let y = time_to_channels(&x);
        assert_eq!(y.get(&[2, 1, 0]), x.get(&[0, 1, 0, 2]));
    }
}
