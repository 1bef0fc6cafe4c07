//! Central finite-difference verification of analytic gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::convlstm::{backward_sequence, forward_sequence, ConvLstmParams, ReturnMode};
use crate::models::{Model, ModelKind, ModelSpec, SkipMode};
use crate::ops::*;
use crate::{Result, Tensor};

/// Default finite-difference step.
pub const FD_STEP: f64 = 1e-5;

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub tolerance: f64,
    pub passed: bool,
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{:<40} {:>6} coords  max rel err {:.3e}  (tol {:.0e})  {}",
            self.name,
            self.checked,
            self.max_rel_error,
            self.tolerance,
            if self.passed { "PASS" } else { "FAIL" }
        )
    }
}

/// Compares `analytic` against central differences of `f` around `x`.
///
/// Relative error per coordinate is `|a - n| / max(|a|, |n|, floor)`, where
/// `floor` is `1e-3` of the largest analytic component. Coordinates whose
/// gradient is negligible next to the rest are judged on that scale instead
/// of their own, since their finite difference is dominated by round-off.
pub fn grad_check(
    name: impl Into<String>,
    mut f: impl FnMut(&[f64]) -> f64,
    x: &[f64],
    analytic: &[f64],
    tolerance: f64,
) -> GradCheckReport {
    assert_eq!(x.len(), analytic.len(), "gradient length mismatch");
    let scale = analytic.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    let floor = (1e-3 * scale).max(1e-12);
    let mut probe = x.to_vec();
    let mut worst = 0.0_f64;
    let mut worst_index = 0;
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + FD_STEP;
        let up = f(&probe);
        probe[i] = orig - FD_STEP;
        let down = f(&probe);
        probe[i] = orig;
        let numeric = (up - down) / (2.0 * FD_STEP);
        let a = analytic[i];
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
        if err > worst || err.is_nan() {
            worst = if err.is_nan() { f64::INFINITY } else { err };
            worst_index = i;
        }
    }
    GradCheckReport {
        name: name.into(),
        checked: x.len(),
        max_rel_error: worst,
        worst_index,
        tolerance,
        passed: worst < tolerance,
    }
}

/// Tolerance used by [`run_suite`].
pub const SUITE_TOL: f64 = 1e-4;

fn rand_tensor(dims: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(dims, |_| rng.gen_range(-1.0..1.0))
}

/// Scalar probe `L = Σ w ⊙ y` whose gradient w.r.t. `y` is `w`.
fn project(y: &Tensor, w: &Tensor) -> f64 {
    y.data().iter().zip(w.data()).map(|(a, b)| a * b).sum()
}

fn tensor(dims: &[usize], v: &[f64]) -> Tensor {
    Tensor::from_vec(dims, v.to_vec()).expect("probe keeps the shape")
}

/// Checks input, kernel and bias gradients of one convolution configuration.
pub fn check_conv(
    three_d: bool,
    input_dims: &[usize],
    kernel_dims: &[usize],
    padding: Padding,
    seed: u64,
) -> Result<Vec<GradCheckReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = rand_tensor(input_dims, &mut rng);
    let p = ConvParams::new(
        rand_tensor(kernel_dims, &mut rng),
        rand_tensor(&[kernel_dims[0]], &mut rng),
        padding,
    );
    let fwd = |x: &Tensor, p: &ConvParams| if three_d { conv3d(x, p) } else { conv2d(x, p) };
    let y = fwd(&x, &p)?;
    let w = rand_tensor(y.dims(), &mut rng);
    let g = if three_d {
        conv3d_backward(&x, &p, &w)?
    } else {
        conv2d_backward(&x, &p, &w)?
    };
    let name = format!(
        "{} {:?} {:?}",
        if three_d { "conv3d" } else { "conv2d" },
        padding,
        kernel_dims
    );
    let probe = |x: &Tensor, p: &ConvParams| project(&fwd(x, p).expect("probe keeps the shape"), &w);
    Ok(vec![
        grad_check(format!("{name} input"), |v| probe(&tensor(x.dims(), v), &p), x.data(), g.input.data(), SUITE_TOL),
        grad_check(
            format!("{name} kernel"),
            |v| {
                let mut q = p.clone();
                q.kernel.data_mut().copy_from_slice(v);
                probe(&x, &q)
            },
            p.kernel.data(),
            g.kernel.data(),
            SUITE_TOL,
        ),
        grad_check(
            format!("{name} bias"),
            |v| {
                let mut q = p.clone();
                q.bias.data_mut().copy_from_slice(v);
                probe(&x, &q)
            },
            p.bias.data(),
            g.bias.data(),
            SUITE_TOL,
        ),
    ])
}

/// Convolutions in both padding modes, 2-D and 3-D.
pub fn check_convs() -> Result<Vec<GradCheckReport>> {
    let mut out = Vec::new();
    out.extend(check_conv(false, &[1, 4, 4], &[1, 1, 3, 3], Padding::Same, 1)?);
    out.extend(check_conv(false, &[2, 6, 6], &[3, 2, 3, 3], Padding::Same, 2)?);
    out.extend(check_conv(false, &[2, 5, 6], &[2, 2, 3, 2], Padding::Valid, 3)?);
    out.extend(check_conv(true, &[2, 4, 4, 3], &[2, 2, 3, 3, 3], Padding::Same, 4)?);
    out.extend(check_conv(true, &[1, 4, 5, 4], &[2, 1, 2, 3, 2], Padding::Valid, 5)?);
    Ok(out)
}

/// Pooling, upsampling, concatenation, activations and the loss.
pub fn check_pointwise() -> Result<Vec<GradCheckReport>> {
    let mut out = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = rand_tensor(&[2, 4, 4, 3], &mut rng);
    let (y, idx) = max_pool_spatial(&x)?;
    let w = rand_tensor(y.dims(), &mut rng);
    let g = idx.backward(&w)?;
    out.push(grad_check(
        "max_pool_spatial",
        |v| project(&max_pool_spatial(&tensor(x.dims(), v)).expect("probe keeps the shape").0, &w),
        x.data(),
        g.data(),
        SUITE_TOL,
    ));

    for spatial_only in [true, false] {
        let x = rand_tensor(&[2, 3, 2, 2], &mut rng);
        let y = upsample_nearest(&x, 2, spatial_only)?;
        let w = rand_tensor(y.dims(), &mut rng);
        let g = upsample_nearest_backward(&w, x.dims(), 2, spatial_only)?;
        out.push(grad_check(
            format!("upsample_nearest spatial_only={spatial_only}"),
            |v| project(&upsample_nearest(&tensor(x.dims(), v), 2, spatial_only).expect("probe keeps the shape"), &w),
            x.data(),
            g.data(),
            SUITE_TOL,
        ));
    }

    let a = rand_tensor(&[2, 3, 3], &mut rng);
    let b = rand_tensor(&[1, 3, 3], &mut rng);
    let w = rand_tensor(&[3, 3, 3], &mut rng);
    let (ga, gb) = concat_channels_backward(&w, 2)?;
    out.push(grad_check(
        "concat_channels first",
        |v| project(&concat_channels(&tensor(a.dims(), v), &b).expect("probe keeps the shape"), &w),
        a.data(),
        ga.data(),
        SUITE_TOL,
    ));
    out.push(grad_check(
        "concat_channels second",
        |v| project(&concat_channels(&a, &tensor(b.dims(), v)).expect("probe keeps the shape"), &w),
        b.data(),
        gb.data(),
        SUITE_TOL,
    ));

    // keep relu inputs away from the kink
    let x = Tensor::from_fn(&[8], |_| {
        let v: f64 = rng.gen_range(0.05..2.0);
        if rng.gen_bool(0.5) {
            v
        } else {
            -v
        }
    });
    for act in [Activation::Relu, Activation::Sigmoid, Activation::Tanh, Activation::Linear] {
        let y = act.forward(&x);
        let w = rand_tensor(y.dims(), &mut rng);
        let g = act.backward(&y, &w)?;
        out.push(grad_check(
            format!("{act:?}"),
            |v| project(&act.forward(&tensor(x.dims(), v)), &w),
            x.data(),
            g.data(),
            SUITE_TOL,
        ));
    }

    let p = rand_tensor(&[3, 4], &mut rng);
    let t = rand_tensor(&[3, 4], &mut rng);
    let (_, g) = mse_loss(&p, &t)?;
    out.push(grad_check(
        "mse_loss",
        |v| mse_loss(&tensor(p.dims(), v), &t).expect("probe keeps the shape").0,
        p.data(),
        g.data(),
        SUITE_TOL,
    ));
    Ok(out)
}

/// BPTT through a ConvLSTM sequence, w.r.t. inputs and every gate parameter.
pub fn check_lstm(
    t_len: usize,
    hw: usize,
    cin: usize,
    hidden: usize,
    mode: ReturnMode,
    seed: u64,
) -> Result<Vec<GradCheckReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ConvLstmParams::init(cin, hidden, 3, &mut rng);
    for b in &mut p.b {
        for v in b.data_mut() {
            *v += rng.gen_range(-0.5..0.5);
        }
    }
    let xs: Vec<Tensor> = (0..t_len).map(|_| rand_tensor(&[cin, hw, hw], &mut rng)).collect();
    let outs = forward_sequence(&xs, &p, mode)?;
    let ws: Vec<Tensor> = outs.iter().map(|o| rand_tensor(o.dims(), &mut rng)).collect();
    let (dxs, grads) = backward_sequence(&xs, &p, mode, &ws)?;
    let loss = |xs: &[Tensor], p: &ConvLstmParams| -> f64 {
        forward_sequence(xs, p, mode)
            .expect("probe keeps the shape")
            .iter()
            .zip(&ws)
            .map(|(o, w)| project(o, w))
            .sum()
    };

    let flat_x: Vec<f64> = xs.iter().flat_map(|x| x.data().to_vec()).collect();
    let flat_dx: Vec<f64> = dxs.iter().flat_map(|x| x.data().to_vec()).collect();
    let plane = cin * hw * hw;
    let name = format!("convlstm T={t_len} {mode:?}");
    let inputs = grad_check(
        format!("{name} inputs"),
        |v| {
            let xs: Vec<Tensor> = v.chunks(plane).map(|c| tensor(&[cin, hw, hw], c)).collect();
            loss(&xs, &p)
        },
        &flat_x,
        &flat_dx,
        SUITE_TOL,
    );

    let flat_p: Vec<f64> = p.tensors().flat_map(|t| t.data().to_vec()).collect();
    let flat_g: Vec<f64> = grads.tensors().flat_map(|t| t.data().to_vec()).collect();
    let params = grad_check(
        format!("{name} params"),
        |v| {
            let mut q = p.clone();
            let mut k = 0;
            for t in q.tensors_mut() {
                let n = t.len();
                t.data_mut().copy_from_slice(&v[k..k + n]);
                k += n;
            }
            loss(&xs, &q)
        },
        &flat_p,
        &flat_g,
        SUITE_TOL,
    );
    Ok(vec![inputs, params])
}

/// Sequence lengths 1 to 3 in both return modes.
pub fn check_convlstm() -> Result<Vec<GradCheckReport>> {
    let mut out = Vec::new();
    out.extend(check_lstm(1, 4, 1, 2, ReturnMode::Last, 11)?);
    out.extend(check_lstm(2, 5, 2, 2, ReturnMode::All, 12)?);
    out.extend(check_lstm(3, 4, 2, 2, ReturnMode::Last, 13)?);
    out.extend(check_lstm(3, 4, 2, 2, ReturnMode::All, 14)?);
    out.extend(check_lstm(3, 6, 1, 3, ReturnMode::All, 15)?);
    Ok(out)
}

/// Smallest spec of each architecture that still exercises every branch.
pub fn toy_spec(kind: ModelKind) -> ModelSpec {
    ModelSpec {
        channels: vec![2, 3],
        bottleneck: 3,
        t: 3,
        ..ModelSpec::new(kind)
    }
}

/// Full-model MSE gradient w.r.t. every parameter and the input.
pub fn check_model(spec: ModelSpec, hw: usize, seed: u64) -> Result<Vec<GradCheckReport>> {
    let mut model = Model::build(spec.clone(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
    // Default init shrinks activations layer by layer, leaving input
    // gradients near 1e-7 where central differences are round-off bound.
    // Larger kernels and non-zero biases keep every branch well conditioned.
    for t in model.weights_mut().tensors_mut() {
        if t.ndim() == 1 {
            for v in t.data_mut() {
                *v += rng.gen_range(-0.2..0.2);
            }
        } else {
            t.scale(2.5);
        }
    }
    let input = Tensor::from_fn(&spec.input_dims(hw, hw), |_| rng.gen_range(0.0..1.0));
    let target = Tensor::from_fn(&spec.output_dims(hw, hw), |_| rng.gen_range(0.0..1.0));
    let (y, cache) = model.forward_cached(&input)?;
    let (_, gy) = mse_loss(&y, &target)?;
    let (grads, gx) = model.backward(&cache, &gy)?;

    let name = format!(
        "{} skips={} {:?} {:?}/{:?}",
        spec.kind, spec.skips, spec.skip_mode, spec.hidden_activation, spec.output_activation
    );
    let params = grad_check(
        format!("{name} params"),
        |v| {
            let mut m = model.clone();
            m.weights_mut().set_flat(v);
            m.loss(&input, &target).expect("probe keeps the shape")
        },
        &model.weights().to_flat(),
        &grads.to_flat(),
        SUITE_TOL,
    );
    let inputs = grad_check(
        format!("{name} input"),
        |v| model.loss(&tensor(input.dims(), v), &target).expect("probe keeps the shape"),
        input.data(),
        gx.data(),
        SUITE_TOL,
    );
    Ok(vec![params, inputs])
}

/// Every architecture variant on 8×8 frames with T = 3.
pub fn check_models() -> Result<Vec<GradCheckReport>> {
    use ModelKind::*;
    let variants = [
        (toy_spec(RecurrentUnet), 21),
        (
            ModelSpec {
                skip_mode: SkipMode::LastFrame,
                ..toy_spec(RecurrentUnet)
            },
            22,
        ),
        (
            ModelSpec {
                hidden_activation: Activation::Tanh,
                output_activation: Activation::Sigmoid,
                ..toy_spec(RecurrentUnet)
            },
            23,
        ),
        (toy_spec(Unet2d), 31),
        (
            ModelSpec {
                skips: false,
                hidden_activation: Activation::Tanh,
                ..toy_spec(Unet2d)
            },
            32,
        ),
        (toy_spec(RecurrentAutoencoder), 41),
        (
            ModelSpec {
                hidden_activation: Activation::Tanh,
                ..toy_spec(RecurrentAutoencoder)
            },
            42,
        ),
    ];
    let mut out = Vec::new();
    for (spec, seed) in variants {
        out.extend(check_model(spec, 8, seed)?);
    }
    Ok(out)
}

/// The complete suite: operators, ConvLSTM and all three architectures.
pub fn run_suite() -> Result<Vec<GradCheckReport>> {
    let mut out = check_convs()?;
    out.extend(check_pointwise()?);
    out.extend(check_convlstm()?);
    out.extend(check_models()?);
    Ok(out)
}
