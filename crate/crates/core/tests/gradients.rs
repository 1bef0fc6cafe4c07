//! Analytic gradients against central finite differences.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use restdyn_core::gradcheck::*;
use restdyn_core::ops::*;
use restdyn_core::Tensor;

fn assert_all(reports: Vec<GradCheckReport>) {
    assert!(!reports.is_empty());
    for r in reports {
        assert!(r.passed, "{r}");
    }
}

#[test]
fn convolutions_match_finite_differences() {
    assert_all(check_convs().unwrap());
}

#[test]
fn pointwise_ops_match_finite_differences() {
    assert_all(check_pointwise().unwrap());
}

#[test]
fn convlstm_bptt_matches_finite_differences() {
    assert_all(check_convlstm().unwrap());
}

#[test]
fn full_architectures_match_finite_differences() {
    let reports = check_models().unwrap();
    // params and input for each of the seven variants
    assert_eq!(reports.len(), 14);
    assert_all(reports);
}

#[test]
fn linear_activation_is_exact_on_dyadic_values() {
    // dyadic values keep every term but the probed one exact
    let x = Tensor::from_vec(&[4], vec![0.5, -0.25, 0.125, 0.75]).unwrap();
    let w = Tensor::from_vec(&[4], vec![1.5, -0.5, 0.25, 2.0]).unwrap();
    let lin = Activation::Linear;
    let g = lin.backward(&lin.forward(&x), &w).unwrap();
    let r = grad_check(
        "linear (exact)",
        |v| {
            let y = lin.forward(&Tensor::from_vec(&[4], v.to_vec()).unwrap());
            y.data().iter().zip(w.data()).map(|(a, b)| a * b).sum()
        },
        x.data(),
        g.data(),
        1e-10,
    );
    assert!(r.max_rel_error <= 1e-10, "{r}");
}

#[test]
fn corrupted_gradient_is_caught() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let x = Tensor::from_fn(&[1, 6, 6], |_| rng.gen_range(-1.0..1.0));
    let k = Tensor::from_fn(&[1, 1, 3, 3], |_| rng.gen_range(-1.0..1.0));
    let p = ConvParams::new(k, Tensor::zeros(&[1]), Padding::Same);
    let y = conv2d(&x, &p).unwrap();
    let w = Tensor::from_fn(y.dims(), |_| rng.gen_range(-1.0..1.0));
    let mut g = conv2d_backward(&x, &p, &w).unwrap().kernel;
    g.scale(1.01);
    let r = grad_check(
        "corrupted",
        |v| {
            let mut q = p.clone();
            q.kernel.data_mut().copy_from_slice(v);
            let y = conv2d(&x, &q).unwrap();
            y.data().iter().zip(w.data()).map(|(a, b)| a * b).sum()
        },
        p.kernel.data(),
        g.data(),
        SUITE_TOL,
    );
    assert!(!r.passed, "{r}");
}
