use ibrar_core::gradcheck::{analytic_grad, finite_diff_check, primitive_suite};
use ibrar_core::losses::{ib_rar_loss, IbLossConfig};
use ibrar_core::{ChannelMask, Graph, Network, NetworkConfig, Tensor, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

#[test]
fn every_primitive_matches_central_differences() {
    for seed in 0..3 {
        for (name, err) in primitive_suite(seed).unwrap() {
            assert!(err <= 1e-4, "{name} (seed {seed}): relative error {err:e}");
        }
    }
}

#[test]
fn sum_of_squares_error_is_tiny() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = random(&mut rng, &[6], -2.0, 2.0);
    let err = finite_diff_check(
        |g: &mut Graph, v: Var| {
            let sq = g.mul(v, v)?;
            Ok(g.sum(sq))
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert!(err <= 1e-6, "{err:e}");
}

#[test]
fn constant_function_has_zero_gradient_and_error() {
    let x = Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
    let f = |g: &mut Graph, v: Var| {
        let z = g.scale(v, 0.0);
        let s = g.sum(z);
        Ok(g.add_scalar(s, 4.0))
    };
    assert_eq!(analytic_grad(&f, &x).unwrap().data(), &[0.0, 0.0, 0.0]);
    assert_eq!(finite_diff_check(f, &x, 1e-5).unwrap(), 0.0);
}

#[test]
fn nan_propagates_into_the_check() {
    let x = Tensor::new(vec![2], vec![-1.0, 2.0]).unwrap();
    let err = finite_diff_check(
        |g: &mut Graph, v: Var| {
            let l = g.log(v);
            Ok(g.sum(l))
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert!(err.is_nan());
}

/// Direct nested-loop convolution with stride 1 and symmetric zero padding.
fn conv_oracle(x: &Tensor, w: &Tensor, b: &[f64], pad: usize) -> Vec<f64> {
    let [n, c, h, wd] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
    let [o, _, k, _] = [w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]];
    let (oh, ow) = (h + 2 * pad - k + 1, wd + 2 * pad - k + 1);
    let xv = |i: usize, ch: usize, r: isize, col: isize| -> f64 {
        if r < 0 || col < 0 || r >= h as isize || col >= wd as isize {
            0.0
        } else {
            x.data()[((i * c + ch) * h + r as usize) * wd + col as usize]
        }
    };
    let mut out = Vec::with_capacity(n * o * oh * ow);
    for i in 0..n {
        for oc in 0..o {
            for r in 0..oh {
                for col in 0..ow {
                    let mut acc = b[oc];
                    for ch in 0..c {
                        for ki in 0..k {
                            for kj in 0..k {
                                let wv = w.data()[((oc * c + ch) * k + ki) * k + kj];
                                acc += wv
                                    * xv(
                                        i,
                                        ch,
                                        r as isize + ki as isize - pad as isize,
                                        col as isize + kj as isize - pad as isize,
                                    );
                            }
                        }
                    }
                    out.push(acc);
                }
            }
        }
    }
    out
}

#[test]
fn conv2d_agrees_with_nested_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for &(n, c, hw, o, k) in &[
        (1, 1, 3, 1, 3),
        (2, 3, 8, 4, 3),
        (2, 3, 8, 2, 1),
        (2, 2, 7, 3, 5),
        (1, 3, 8, 5, 3),
    ] {
        for pad in [0, k / 2] {
            let x = random(&mut rng, &[n, c, hw, hw], -1.0, 1.0);
            let w = random(&mut rng, &[o, c, k, k], -1.0, 1.0);
            let b: Vec<f64> = (0..o).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mut g = Graph::new();
            let (xv, wv) = (g.constant(x.clone()), g.constant(w.clone()));
            let bv = g.constant(Tensor::new(vec![o], b.clone()).unwrap());
            let y = g.conv2d(xv, wv, Some(bv), pad).unwrap();
            let expect = conv_oracle(&x, &w, &b, pad);
            let diff = g
                .value(y)
                .data()
                .iter()
                .zip(&expect)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(diff <= 1e-10, "shape {:?} pad {pad}: {diff:e}", (n, c, hw, o, k));
        }
    }
}

#[test]
fn diamond_graph_sums_both_paths() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random(&mut rng, &[2, 3], 0.2, 1.5);
    let f = |g: &mut Graph, v: Var| {
        let left = g.exp(v);
        let right = g.log(v);
        let right = g.scale(right, 3.0);
        let joined = g.mul(left, right)?;
        let s = g.sum(joined);
        let again = g.sum(v);
        g.add(s, again)
    };
    let err = finite_diff_check(f, &x, 1e-5).unwrap();
    assert!(err <= 1e-6, "{err:e}");
    // d/dx [e^x · 3 ln x + x] = e^x (3 ln x + 3/x) + 1
    let grad = analytic_grad(&f, &x).unwrap();
    for (gv, &xv) in grad.data().iter().zip(x.data()) {
        let expect = xv.exp() * (3.0 * xv.ln() + 3.0 / xv) + 1.0;
        assert!((gv - expect).abs() < 1e-12);
    }
}

fn tiny_net(seed: u64) -> Network {
    Network::new(NetworkConfig::mini_conv_net_tiny([1, 8, 8], 3), seed).unwrap()
}

/// Regularized loss as a function of parameter tensor `which`, with the rest
/// held fixed.
fn loss_wrt_param(net: &Network, which: usize, x: &Tensor, labels: &[usize], cfg: &IbLossConfig) -> f64 {
    let f = |g: &mut Graph, v: Var| {
        let params: Vec<Var> = net
            .params()
            .iter()
            .enumerate()
            .map(|(i, p)| if i == which { v } else { g.constant(p.clone()) })
            .collect();
        let xv = g.constant(x.clone());
        Ok(ib_rar_loss(g, net, &params, xv, labels, cfg)?.total)
    };
    finite_diff_check(f, &net.params()[which], 1e-5).unwrap()
}

#[test]
fn ib_rar_loss_gradients_on_tiny_net() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut net = tiny_net(5);
    let x = random(&mut rng, &[4, 1, 8, 8], 0.0, 1.0);
    let labels = [0, 2, 1, 2];
    let cfg = IbLossConfig {
        alpha: 0.5,
        beta: 1.0,
        ..IbLossConfig::default()
    };
    for which in 0..net.params().len() {
        let err = loss_wrt_param(&net, which, &x, &labels, &cfg);
        assert!(err <= 1e-4, "param {which}: {err:e}");
    }
    let mut keep = vec![true; 16];
    keep[3] = false;
    net.set_mask(ChannelMask::from_parts(keep, 0.0)).unwrap();
    for which in [0, 2, 4] {
        let err = loss_wrt_param(&net, which, &x, &labels, &cfg);
        assert!(err <= 1e-4, "masked, param {which}: {err:e}");
    }
}

#[test]
fn ib_rar_loss_input_gradient_on_tiny_net() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let net = tiny_net(2);
    let x = random(&mut rng, &[4, 1, 8, 8], 0.0, 1.0);
    let labels = [1, 0, 2, 0];
    let cfg = IbLossConfig {
        alpha: 1.0,
        beta: 0.5,
        ..IbLossConfig::default()
    };
    let err = finite_diff_check(
        |g: &mut Graph, v: Var| {
            let params = net.bind(g, false);
            Ok(ib_rar_loss(g, &net, &params, v, &labels, &cfg)?.total)
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert!(err <= 1e-4, "{err:e}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn smooth_compositions_match_differences(seed in 0u64..10_000, rows in 2usize..5, cols in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&mut rng, &[rows, cols], -1.0, 1.0);
        let w = random(&mut rng, &[cols, 3], -1.0, 1.0);
        let err = finite_diff_check(
            |g: &mut Graph, v: Var| {
                let wv = g.constant(w.clone());
                let z = g.matmul(v, wv)?;
                let e = g.exp(z);
                let l = g.log_softmax(e)?;
                let s = g.sum(l);
                let d = g.pairwise_sq_dist(v)?;
                let c = g.center(d)?;
                let t = g.trace(c)?;
                g.add(s, t)
            },
            &x,
            1e-5,
        )
        .unwrap();
        prop_assert!(err <= 1e-4, "{err:e}");
    }

    #[test]
    fn backward_fills_every_requiring_leaf(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = Graph::new();
        let a = g.param(random(&mut rng, &[3, 2], -1.0, 1.0));
        let b = g.param(random(&mut rng, &[2, 4], -1.0, 1.0));
        let c = g.constant(random(&mut rng, &[3, 4], -1.0, 1.0));
        let ab = g.matmul(a, b).unwrap();
        let p = g.mul(ab, c).unwrap();
        let s = g.sum(p);
        g.backward(s).unwrap();
        for v in [a, b] {
            let grad = g.grad(v).unwrap();
            prop_assert_eq!(grad.shape(), g.value(v).shape());
            prop_assert!(grad.data().iter().all(|x| x.is_finite()));
        }
    }
}
