//! Every tape op checked against central finite differences (the oracle is
//! re-evaluation of the forward pass, never the backward code under test).

use dtgan_autodiff::{gradcheck, scalar, Arr, Tape, TensorId};
use ndarray::IxDyn;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Arr {
    Arr::from_shape_fn(IxDyn(shape), |_| {
        // Box–Muller keeps this test free of rand_distr.
        let u1: f64 = rng.random::<f64>().max(1e-12);
        let u2: f64 = rng.random();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    })
}

const H: f64 = 1e-5;
const TOL: f64 = 1e-6;

#[test]
fn elementwise_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = randn(&mut rng, &[3, 4]);
    let b = randn(&mut rng, &[3, 4]);
    gradcheck::check(
        |t, ids| {
            let s = t.add(ids[0], ids[1]);
            let m = t.mul(s, ids[0]);
            let n = t.neg(m);
            let sc = t.scale(n, 0.7);
            let sh = t.add_scalar(sc, 1.3);
            t.mean_all(sh)
        },
        &[a, b],
        H,
        TOL,
    );
}

#[test]
fn activations() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    // keep values away from the leaky-relu kink
    let mut x = randn(&mut rng, &[24]);
    x.mapv_inplace(|v| if v.abs() < 0.05 { v + 0.1 } else { v });
    for f in [
        (|t: &mut Tape, id: TensorId| t.leaky_relu(id, 0.2)) as fn(&mut Tape, TensorId) -> TensorId,
        |t, id| t.tanh(id),
        |t, id| t.softplus(id),
        |t, id| t.abs(id),
        |t, id| t.square(id),
    ] {
        gradcheck::check(
            |t, ids| {
                let y = f(t, ids[0]);
                t.mean_all(y)
            },
            &[x.clone()],
            H,
            TOL,
        );
    }
}

#[test]
fn reductions_and_shape() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = randn(&mut rng, &[2, 3, 4]);
    let b = randn(&mut rng, &[2, 3, 4]);
    gradcheck::check(
        |t, ids| {
            let d = t.mean_abs_diff(ids[0], ids[1]);
            let s = t.sum_all(ids[0]);
            let ss = t.scale(s, 0.01);
            t.add(d, ss)
        },
        &[a.clone(), b],
        H,
        TOL,
    );
    gradcheck::check(
        |t, ids| {
            let r = t.reshape(ids[0], &[4, 6]);
            let f = t.flatten(r);
            let sq = t.square(f);
            t.mean_all(sq)
        },
        &[a],
        H,
        TOL,
    );
}

#[test]
fn channel_broadcast_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = randn(&mut rng, &[3, 4, 4]);
    let s = randn(&mut rng, &[3]);
    let b = randn(&mut rng, &[3]);
    let n = randn(&mut rng, &[4, 4]);
    gradcheck::check(
        |t, ids| {
            let m = t.mul_channel(ids[0], ids[1]);
            let a = t.add_channel(m, ids[2]);
            let h = t.add_hw(a, ids[3]);
            t.mean_all(h)
        },
        &[x, s, b, n],
        H,
        TOL,
    );
}

#[test]
fn scalar_node_scaling() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = randn(&mut rng, &[2, 3, 3]);
    let s = scalar(0.37);
    gradcheck::check(
        |t, ids| {
            let y = t.mul_scalar_node(ids[0], ids[1]);
            let sq = t.square(y);
            t.mean_all(sq)
        },
        &[x, s],
        H,
        TOL,
    );
}

#[test]
fn linear_map() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let w = randn(&mut rng, &[5, 7]);
    let x = randn(&mut rng, &[7]);
    let b = randn(&mut rng, &[5]);
    gradcheck::check(
        |t, ids| {
            let y = t.linear(ids[0], ids[1], Some(ids[2]));
            let sq = t.square(y);
            t.mean_all(sq)
        },
        &[w, x, b],
        H,
        TOL,
    );
}

#[test]
fn conv2d_stride_and_padding() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for (stride, pad) in [(1usize, 1usize), (1, 0), (2, 1)] {
        let x = randn(&mut rng, &[2, 6, 6]);
        let w = randn(&mut rng, &[3, 2, 3, 3]);
        let b = randn(&mut rng, &[3]);
        gradcheck::check(
            |t, ids| {
                let y = t.conv2d(ids[0], ids[1], Some(ids[2]), stride, pad);
                let sq = t.square(y);
                t.mean_all(sq)
            },
            &[x, w, b],
            H,
            TOL,
        );
    }
}

#[test]
fn resampling_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = randn(&mut rng, &[2, 4, 4]);
    gradcheck::check(
        |t, ids| {
            let up = t.upsample2x(ids[0]);
            let down = t.avgpool2x(up);
            let gap = t.global_avg_pool(down);
            let sq = t.square(gap);
            t.sum_all(sq)
        },
        &[x],
        H,
        TOL,
    );
}

#[test]
fn global_max_pool_and_concat_v() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let x = randn(&mut rng, &[3, 4, 4]);
    gradcheck::check(
        |t, ids| {
            let mx = t.global_max_pool(ids[0]);
            let avg = t.global_avg_pool(ids[0]);
            let cat = t.concat_v(mx, avg);
            let sq = t.square(cat);
            t.mean_all(sq)
        },
        &[x],
        H,
        TOL,
    );
}

#[test]
fn instance_norm_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = randn(&mut rng, &[3, 4, 4]);
    gradcheck::check(
        |t, ids| {
            let y = t.instance_norm(ids[0], 1e-5);
            let sq = t.square(y);
            t.mean_all(sq)
        },
        &[x],
        H,
        1e-5, // normalization divides by std; slightly looser
    );
}

#[test]
fn instance_norm_statistics() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let x = randn(&mut rng, &[4, 5, 5]);
    let mut t = Tape::new();
    let id = t.constant(x);
    let y = t.instance_norm(id, 1e-8);
    let yv = t.value(y);
    for c in 0..4 {
        let plane = yv.index_axis(ndarray::Axis(0), c);
        let mu = plane.sum() / 25.0;
        let var = plane.mapv(|v| (v - mu) * (v - mu)).sum() / 25.0;
        assert!(mu.abs() < 1e-10);
        assert!((var - 1.0).abs() < 1e-6);
    }
}

#[test]
fn split_concat_and_max() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = randn(&mut rng, &[4, 3, 3]);
    let y = randn(&mut rng, &[2, 3, 3]);
    gradcheck::check(
        |t, ids| {
            let lo = t.slice_c(ids[0], 0, 2);
            let hi = t.slice_c(ids[0], 2, 4);
            let m = t.max_elem(lo, ids[1]);
            let cat = t.concat_c(m, hi);
            let sq = t.square(cat);
            t.mean_all(sq)
        },
        &[x, y],
        H,
        TOL,
    );
}

#[test]
fn vector_slice() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let x = randn(&mut rng, &[8]);
    gradcheck::check(
        |t, ids| {
            let a = t.slice_v(ids[0], 0, 4);
            let b = t.slice_v(ids[0], 4, 8);
            let m = t.mul(a, b);
            t.mean_all(m)
        },
        &[x],
        H,
        TOL,
    );
}

#[test]
fn max_of_identical_inputs_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let x = randn(&mut rng, &[3, 2, 2]);
    let mut t = Tape::new();
    let a = t.constant(x.clone());
    let b = t.constant(x.clone());
    let m = t.max_elem(a, b);
    assert_eq!(t.value(m), &x);
}

#[test]
fn log_softmax_and_pick() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let x = randn(&mut rng, &[5]);
    gradcheck::check(
        |t, ids| {
            let ls = t.log_softmax(ids[0]);
            let p = t.pick(ls, 2);
            t.neg(p) // cross-entropy against class 2
        },
        &[x],
        H,
        TOL,
    );
}

#[test]
fn grl_gradient_contract() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let x = randn(&mut rng, &[6]);
    // forward identity
    let mut t = Tape::new();
    let id = t.leaf(x.clone());
    let r = t.grl(id, 1.0);
    assert_eq!(t.value(r), &x);
    // backward: gradient equals minus the plain gradient
    let sq = t.square(r);
    let loss = t.mean_all(sq);
    let g = t.backward(loss);
    let got = g.get(id).unwrap();
    let expect = x.mapv(|v| -2.0 * v / 6.0);
    assert!(gradcheck::max_rel_err(got, &expect) < 1e-12);
}

#[test]
fn grl_twice_is_identity_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let x = randn(&mut rng, &[4]);
    let mut t = Tape::new();
    let id = t.leaf(x.clone());
    let r1 = t.grl(id, 1.0);
    let r2 = t.grl(r1, 1.0);
    let sq = t.square(r2);
    let loss = t.mean_all(sq);
    let g = t.backward(loss);
    let expect = x.mapv(|v| 2.0 * v / 4.0);
    assert!(gradcheck::max_rel_err(g.get(id).unwrap(), &expect) < 1e-12);
}

#[test]
fn backward_twice_from_different_roots() {
    let mut t = Tape::new();
    let a = t.leaf(scalar(2.0));
    let sq = t.square(a);
    let cube = t.mul(sq, a);
    let g1 = t.backward(sq);
    let g2 = t.backward(cube);
    assert_eq!(dtgan_autodiff::scalar_value(g1.get(a).unwrap()), 4.0);
    assert_eq!(dtgan_autodiff::scalar_value(g2.get(a).unwrap()), 12.0);
}
