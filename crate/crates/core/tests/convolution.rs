//! Convolutions and the ConvLSTM cell against direct evaluation of their
//! definitions.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use restdyn_core::convlstm::{cell_step, ConvLstmParams, ConvLstmState};
use restdyn_core::ops::{conv_backward_parts, conv_forward_parts, sigmoid, Padding};
use restdyn_core::Tensor;

fn random(dims: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(dims, |_| rng.gen_range(-1.0..1.0))
}

/// Cross-correlation straight from the definition. Input `[c, h, w, t]`,
/// kernel `[o, c, kh, kw, kt]`; zero padding of `(k - 1) / 2` when `same`.
fn direct(input: &Tensor, kernel: &Tensor, bias: &Tensor, same: bool) -> Tensor {
    let [c, h, w, t]: [usize; 4] = input.dims().try_into().unwrap();
    let [o, _, kh, kw, kt]: [usize; 5] = kernel.dims().try_into().unwrap();
    let pad = |k: usize| if same { (k - 1) / 2 } else { 0 };
    let out = |n: usize, k: usize| if same { n } else { n - k + 1 };
    let (ho, wo, to) = (out(h, kh), out(w, kw), out(t, kt));
    let at = |x: &Tensor, idx: [usize; 4], d: [usize; 4]| x.data()[((idx[0] * d[1] + idx[1]) * d[2] + idx[2]) * d[3] + idx[3]];
    Tensor::from_fn(&[o, ho, wo, to], |flat| {
        let (oc, y, x, s) = (flat / (ho * wo * to), flat / (wo * to) % ho, flat / to % wo, flat % to);
        let mut acc = bias.data()[oc];
        for ic in 0..c {
            for dy in 0..kh {
                for dx in 0..kw {
                    for ds in 0..kt {
                        let (yy, xx, ss) = (
                            (y + dy) as isize - pad(kh) as isize,
                            (x + dx) as isize - pad(kw) as isize,
                            (s + ds) as isize - pad(kt) as isize,
                        );
                        if yy < 0 || xx < 0 || ss < 0 || yy >= h as isize || xx >= w as isize || ss >= t as isize {
                            continue;
                        }
                        let kv = kernel.data()[(((oc * c + ic) * kh + dy) * kw + dx) * kt + ds];
                        acc += kv * at(input, [ic, yy as usize, xx as usize, ss as usize], [c, h, w, t]);
                    }
                }
            }
        }
        acc
    })
}

fn dot(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

fn max_diff(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.dims(), b.dims());
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

const GEOMETRIES: [([usize; 4], [usize; 5], bool); 6] = [
    ([3, 6, 5, 7], [4, 3, 3, 3, 3], true),
    ([2, 7, 4, 5], [3, 2, 3, 1, 3], true),
    ([1, 5, 6, 4], [2, 1, 5, 3, 1], true),
    ([3, 6, 5, 7], [2, 3, 3, 2, 4], false),
    ([2, 4, 4, 3], [5, 2, 4, 4, 3], false),
    ([4, 8, 8, 1], [6, 4, 3, 3, 1], true),
];

#[test]
fn conv3d_matches_the_definition() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for (input_dims, kernel_dims, same) in GEOMETRIES {
        let x = random(&input_dims, &mut rng);
        let k = random(&kernel_dims, &mut rng);
        let b = random(&[kernel_dims[0]], &mut rng);
        let padding = if same { Padding::Same } else { Padding::Valid };
        let fast = conv_forward_parts(&x, &k, &b, padding).unwrap();
        let slow = direct(&x, &k, &b, same);
        assert!(max_diff(&fast, &slow) < 1e-12, "{input_dims:?} {kernel_dims:?}");
    }
}

#[test]
fn conv2d_matches_the_definition() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let x = random(&[3, 7, 6], &mut rng);
    let k = random(&[4, 3, 3, 5], &mut rng);
    let b = random(&[4], &mut rng);
    for (padding, same) in [(Padding::Same, true), (Padding::Valid, false)] {
        let fast = conv_forward_parts(&x, &k, &b, padding).unwrap();
        let x4 = Tensor::from_vec(&[3, 7, 6, 1], x.data().to_vec()).unwrap();
        let k5 = Tensor::from_vec(&[4, 3, 3, 5, 1], k.data().to_vec()).unwrap();
        let slow = direct(&x4, &k5, &b, same);
        assert_eq!(fast.len(), slow.len());
        let diff = fast.data().iter().zip(slow.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(diff < 1e-12);
    }
}

/// Convolution is bilinear in (input, kernel), so for any `g`:
/// `<g, conv(x, k)> = <dx, x> = <dk, k>` with zero bias, and the bias
/// gradient is the per-channel sum of `g`.
#[test]
fn backward_is_the_adjoint() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for (input_dims, kernel_dims, same) in GEOMETRIES {
        let x = random(&input_dims, &mut rng);
        let k = random(&kernel_dims, &mut rng);
        let zero = Tensor::zeros(&[kernel_dims[0]]);
        let padding = if same { Padding::Same } else { Padding::Valid };
        let y = conv_forward_parts(&x, &k, &zero, padding).unwrap();
        let g = random(y.dims(), &mut rng);
        let grads = conv_backward_parts(&x, &k, &zero, padding, &g).unwrap();
        let lhs = dot(&g, &y);
        assert!((lhs - dot(&grads.input, &x)).abs() < 1e-10 * lhs.abs().max(1.0));
        assert!((lhs - dot(&grads.kernel, &k)).abs() < 1e-10 * lhs.abs().max(1.0));
        let plane = y.len() / kernel_dims[0];
        for (o, &gb) in grads.bias.data().iter().enumerate() {
            let sum: f64 = g.data()[o * plane..(o + 1) * plane].iter().sum();
            assert!((gb - sum).abs() < 1e-12);
        }
    }
}

#[test]
fn convlstm_cell_matches_per_gate_definition() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let (cin, hidden, hw) = (3, 2, [5, 4]);
    let mut p = ConvLstmParams::init(cin, hidden, 3, &mut rng);
    for b in p.b.iter_mut() {
        *b = random(&[hidden], &mut rng);
    }
    let x = random(&[cin, hw[0], hw[1]], &mut rng);
    let state = ConvLstmState {
        h: random(&[hidden, hw[0], hw[1]], &mut rng),
        c: random(&[hidden, hw[0], hw[1]], &mut rng),
    };
    let next = cell_step(&x, &state, &p).unwrap();

    let as4 = |t: &Tensor| {
        let mut d = t.dims().to_vec();
        d.push(1);
        Tensor::from_vec(&d, t.data().to_vec()).unwrap()
    };
    let zero = Tensor::zeros(&[hidden]);
    let pre: Vec<Vec<f64>> = (0..4)
        .map(|g| {
            let zx = direct(&as4(&x), &as4(&p.w_x[g]), &p.b[g], true);
            let zh = direct(&as4(&state.h), &as4(&p.w_h[g]), &zero, true);
            zx.data().iter().zip(zh.data()).map(|(a, b)| a + b).collect()
        })
        .collect();
    for k in 0..state.c.len() {
        let (i, f, o, g) = (sigmoid(pre[0][k]), sigmoid(pre[1][k]), sigmoid(pre[2][k]), pre[3][k].tanh());
        let c = f * state.c.data()[k] + i * g;
        assert!((next.c.data()[k] - c).abs() < 1e-12);
        assert!((next.h.data()[k] - o * c.tanh()).abs() < 1e-12);
    }
}
