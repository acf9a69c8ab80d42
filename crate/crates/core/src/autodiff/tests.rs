use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::gradcheck::{finite_difference, relative_error};

const FD_STEP: f64 = 1e-5;
const OP_TOL: f64 = 1e-4;

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

#[test]
fn relu_zeroes_negatives() {
    let tape = Tape::new();
    let x = tape.constant(Tensor::from_vec(vec![-1.0, 0.0, 2.0]));
    assert_eq!(x.relu().value().data(), &[0.0, 0.0, 2.0]);
}

#[test]
fn logsumexp_of_two_zeros_is_ln2() {
    let tape = Tape::new();
    let x = tape.constant(Tensor::from_vec(vec![0.0, 0.0]));
    let v = x.logsumexp().unwrap().item();
    assert!((v - std::f64::consts::LN_2).abs() < 1e-15);
    assert!((v - 0.693147).abs() < 1e-6);
}

#[test]
fn logsumexp_does_not_overflow() {
    let tape = Tape::new();
    let x = tape.constant(Tensor::from_vec(vec![1000.0, 1000.0]));
    let v = x.logsumexp().unwrap().item();
    assert!(v.is_finite());
    assert!((v - (1000.0 + std::f64::consts::LN_2)).abs() < 1e-12);
}

#[test]
fn zero_kernel_convolution_is_zero() {
    let tape = Tape::new();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let img: Vec<f64> = (0..784).map(|_| rng.gen::<f64>()).collect();
    let x = tape.constant(t(&[1, 1, 28, 28], &img));
    let w = tape.constant(Tensor::zeros([1, 1, 3, 3]));
    let y = x.conv2d(w, None).unwrap();
    assert_eq!(y.shape(), vec![1, 1, 28, 28]);
    assert!(y.value().data().iter().all(|&v| v == 0.0));
}

#[test]
fn pooling_chain_maps_28_to_3() {
    let tape = Tape::new();
    let x = tape.constant(Tensor::zeros([1, 2, 28, 28]));
    let y = x.maxpool2x2().unwrap().maxpool2x2().unwrap().maxpool2x2().unwrap();
    assert_eq!(y.shape(), vec![1, 2, 3, 3]);
}

#[test]
fn square_gradient_at_three() {
    let tape = Tape::new();
    let x = tape.var(Tensor::from_vec(vec![3.0]));
    let g = tape.backward(x.square().sum()).unwrap();
    assert_eq!(g.wrt(x).data(), &[6.0]);
}

#[test]
fn relu_sum_gradient() {
    let tape = Tape::new();
    let x = tape.var(Tensor::from_vec(vec![-1.0, 2.0]));
    let g = tape.backward(x.relu().sum()).unwrap();
    assert_eq!(g.wrt(x).data(), &[0.0, 1.0]);
}

#[test]
fn backward_rejects_non_scalar_root() {
    let tape = Tape::new();
    let x = tape.var(Tensor::from_vec(vec![1.0, 2.0]));
    assert!(matches!(
        tape.backward(x.exp()),
        Err(crate::Error::NonScalarRoot(_))
    ));
}

#[test]
fn shape_errors_report_both_shapes() {
    let tape = Tape::new();
    let a = tape.var(Tensor::zeros([2, 3]));
    let b = tape.var(Tensor::zeros([4, 5]));
    let msg = a.matmul(b).unwrap_err().to_string();
    assert!(msg.contains("[2, 3]") && msg.contains("[4, 5]"), "{msg}");
    let msg = a.add(b).unwrap_err().to_string();
    assert!(msg.contains("[2, 3]") && msg.contains("[4, 5]"), "{msg}");
}

#[test]
fn detached_values_receive_no_gradient() {
    let tape = Tape::new();
    let x = tape.var(Tensor::from_vec(vec![2.0]));
    let d = x.detach();
    let y = x.mul(d).unwrap().sum();
    let g = tape.backward(y).unwrap();
    // only the tracked factor contributes: d/dx (x * c) = c
    assert_eq!(g.wrt(x).data(), &[2.0]);
    assert!(g.get(d).is_none());
}

#[test]
fn shared_subexpression_accumulates() {
    let tape = Tape::new();
    let x = tape.var(Tensor::from_vec(vec![1.5]));
    let y = x.mul(x).unwrap().add(x).unwrap().sum();
    let g = tape.backward(y).unwrap();
    assert!((g.wrt(x).data()[0] - 4.0).abs() < 1e-15);
}

#[test]
fn forward_is_bit_identical_across_calls() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let a: Vec<f64> = (0..64 * 32).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let b: Vec<f64> = (0..32 * 16).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let run = || {
        let tape = Tape::new();
        let x = tape.constant(t(&[64, 32], &a));
        let w = tape.constant(t(&[32, 16], &b));
        let y = x.matmul(w).unwrap().softmax(1).unwrap();
        y.value().data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}

// ---------------------------------------------------------------------------
// Gradient property tests: every operator against central finite differences.
// ---------------------------------------------------------------------------

fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Values bounded away from zero by `gap`, with random sign.
fn random_away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], gap: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v = rng.gen_range(gap..2.0);
            if rng.gen::<bool>() {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn random_shape(rng: &mut ChaCha8Rng, rank: usize) -> Vec<usize> {
    (0..rank).map(|_| rng.gen_range(1..5)).collect()
}

/// Checks `sum(op(inputs) * w)` for a random projection `w` of the output.
fn check_op(
    seed: u64,
    inputs: Vec<Tensor>,
    op: impl for<'t> Fn(&'t Tape, &[Var<'t>]) -> crate::Result<Var<'t>>,
) -> Result<(), TestCaseError> {
    let out_shape = {
        let tape = Tape::new();
        let vars: Vec<_> = inputs.iter().map(|x| tape.var(x.clone())).collect();
        op(&tape, &vars).unwrap().shape()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xfeed);
    let proj = random(&mut rng, &out_shape, -1.0, 1.0);
    let loss = |xs: &[Tensor]| -> (f64, Vec<Tensor>) {
        let tape = Tape::new();
        let vars: Vec<_> = xs.iter().map(|x| tape.var(x.clone())).collect();
        let y = op(&tape, &vars).unwrap();
        let w = tape.constant(proj.clone());
        let root = y.mul(w).unwrap().sum();
        let g = tape.backward(root).unwrap();
        (root.item(), vars.iter().map(|v| g.wrt(*v)).collect())
    };
    let (_, analytic) = loss(&inputs);
    let numeric = finite_difference(|xs| loss(xs).0, &inputs, FD_STEP);
    let err = relative_error(&analytic, &numeric);
    prop_assert!(err < OP_TOL, "relative error {err}");
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn grad_add_broadcast(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = random_shape(&mut rng, 3);
        let mut s2 = s.clone();
        s2[rng.gen_range(0..3)] = 1;
        let a = random(&mut rng, &s, -2.0, 2.0);
        let b = random(&mut rng, &s2[1..], -2.0, 2.0);
        check_op(seed, vec![a, b], |_, v| v[0].add(v[1]))?;
    }

    #[test]
    fn grad_sub_broadcast(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = random_shape(&mut rng, 2);
        let a = random(&mut rng, &[s[0], 1], -2.0, 2.0);
        let b = random(&mut rng, &s, -2.0, 2.0);
        check_op(seed, vec![a, b], |_, v| v[0].sub(v[1]))?;
    }

    #[test]
    fn grad_mul_broadcast(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = random_shape(&mut rng, 3);
        let a = random(&mut rng, &[s[0], s[1], 1], -2.0, 2.0);
        let b = random(&mut rng, &[s[0], 1, s[2]], -2.0, 2.0);
        check_op(seed, vec![a, b], |_, v| v[0].mul(v[1]))?;
    }

    #[test]
    fn grad_div(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = random_shape(&mut rng, 2);
        let a = random(&mut rng, &s, -2.0, 2.0);
        let b = random_away_from_zero(&mut rng, &[s[1]], 0.5);
        check_op(seed, vec![a, b], |_, v| v[0].div(v[1]))?;
    }

    #[test]
    fn grad_matmul(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (m, k, n) = (rng.gen_range(1..6), rng.gen_range(1..6), rng.gen_range(1..6));
        let a = random(&mut rng, &[m, k], -1.0, 1.0);
        let b = random(&mut rng, &[k, n], -1.0, 1.0);
        check_op(seed, vec![a, b], |_, v| v[0].matmul(v[1]))?;
    }

    #[test]
    fn grad_transpose(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = random_shape(&mut rng, 2);
        check_op(seed, vec![random(&mut rng, &s, -1.0, 1.0)], |_, v| v[0].transpose())?;
    }

    #[test]
    fn grad_conv2d(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (b, cin, cout) = (rng.gen_range(1..3), rng.gen_range(1..3), rng.gen_range(1..3));
        let (h, w) = (rng.gen_range(2..6), rng.gen_range(2..6));
        let x = random(&mut rng, &[b, cin, h, w], -1.0, 1.0);
        let k = random(&mut rng, &[cout, cin, 3, 3], -1.0, 1.0);
        let bias = random(&mut rng, &[cout], -1.0, 1.0);
        check_op(seed, vec![x, k, bias], |_, v| v[0].conv2d(v[1], Some(v[2])))?;
    }

    #[test]
    fn grad_maxpool(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (h, w) = (rng.gen_range(2..8), rng.gen_range(2..8));
        // a random permutation keeps the maxima well separated
        let n = 2 * h * w;
        let mut vals: Vec<f64> = (0..n).map(|i| i as f64 * 0.1).collect();
        for i in (1..n).rev() {
            vals.swap(i, rng.gen_range(0..=i));
        }
        check_op(seed, vec![t(&[1, 2, h, w], &vals)], |_, v| v[0].maxpool2x2())?;
    }

    #[test]
    fn grad_relu(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = random_shape(&mut rng, 2);
        let x = random_away_from_zero(&mut rng, &s, 1e-2);
        check_op(seed, vec![x], |_, v| Ok(v[0].relu()))?;
    }

    #[test]
    fn grad_exp(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = random_shape(&mut rng, 2);
        check_op(seed, vec![random(&mut rng, &s, -2.0, 2.0)], |_, v| Ok(v[0].exp()))?;
    }

    #[test]
    fn grad_log(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = random_shape(&mut rng, 2);
        check_op(seed, vec![random(&mut rng, &s, 0.2, 3.0)], |_, v| Ok(v[0].log()))?;
    }

    #[test]
    fn grad_sqrt(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = random_shape(&mut rng, 2);
        check_op(seed, vec![random(&mut rng, &s, 0.2, 3.0)], |_, v| Ok(v[0].sqrt()))?;
    }

    #[test]
    fn grad_square(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = random_shape(&mut rng, 3);
        check_op(seed, vec![random(&mut rng, &s, -2.0, 2.0)], |_, v| Ok(v[0].square()))?;
    }

    #[test]
    fn grad_clamp(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = random_shape(&mut rng, 2);
        let mut x = random(&mut rng, &s, -3.0, 3.0);
        // keep away from the clamp edges
        x.data_mut().iter_mut().for_each(|v| {
            if (v.abs() - 1.0).abs() < 1e-2 {
                *v += 0.05;
            }
        });
        check_op(seed, vec![x], |_, v| Ok(v[0].clamp(-1.0, 1.0)))?;
    }

    #[test]
    fn grad_scale_and_shift(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = random_shape(&mut rng, 2);
        let c = rng.gen_range(-3.0..3.0);
        check_op(seed, vec![random(&mut rng, &s, -2.0, 2.0)], move |_, v| {
            Ok(v[0].scale(c).add_scalar(1.0).neg())
        })?;
    }

    #[test]
    fn grad_sum_and_mean(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = random_shape(&mut rng, 3);
        let x = random(&mut rng, &s, -2.0, 2.0);
        check_op(seed, vec![x.clone()], |_, v| Ok(v[0].sum()))?;
        check_op(seed, vec![x], |_, v| Ok(v[0].mean()))?;
    }

    #[test]
    fn grad_sum_axis(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = random_shape(&mut rng, 3);
        let axis = rng.gen_range(0..3);
        let keep = rng.gen::<bool>();
        check_op(seed, vec![random(&mut rng, &s, -2.0, 2.0)], move |_, v| v[0].sum_axis(axis, keep))?;
    }

    #[test]
    fn grad_logsumexp(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = random_shape(&mut rng, 3);
        let axis = rng.gen_range(0..3);
        let x = random(&mut rng, &s, -3.0, 3.0);
        check_op(seed, vec![x.clone()], move |_, v| v[0].logsumexp_axis(axis, false))?;
        check_op(seed, vec![x], |_, v| v[0].logsumexp())?;
    }

    #[test]
    fn grad_softmax(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = random_shape(&mut rng, 2);
        let axis = rng.gen_range(0..2);
        check_op(seed, vec![random(&mut rng, &s, -3.0, 3.0)], move |_, v| v[0].softmax(axis))?;
    }

    #[test]
    fn grad_gather(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = random_shape(&mut rng, 3);
        let axis = rng.gen_range(0..3);
        let idx: Vec<usize> = (0..rng.gen_range(1..6)).map(|_| rng.gen_range(0..s[axis])).collect();
        check_op(seed, vec![random(&mut rng, &s, -2.0, 2.0)], move |_, v| v[0].gather(axis, &idx))?;
    }

    #[test]
    fn grad_concat(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = random_shape(&mut rng, 2);
        let axis = rng.gen_range(0..2);
        let mut s2 = s.clone();
        s2[axis] = rng.gen_range(1..4);
        let a = random(&mut rng, &s, -2.0, 2.0);
        let b = random(&mut rng, &s2, -2.0, 2.0);
        check_op(seed, vec![a, b], move |tape, v| tape.concat(&[v[0], v[1], v[0]], axis))?;
    }

    #[test]
    fn grad_reshape(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = random_shape(&mut rng, 2);
        let n = s[0] * s[1];
        check_op(seed, vec![random(&mut rng, &s, -2.0, 2.0)], move |_, v| {
            Ok(v[0].reshape([n])?.square())
        })?;
    }
}
