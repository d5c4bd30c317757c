//! Independent oracles for the numeric kernels and autodiff.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use structprune::numerics::{OptimizerKind, OptimizerState, Tape, Tensor, Var};

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for p in 0..k {
                c[i * n + j] += a[i * k + p] * b[p * n + j];
            }
        }
    }
    c
}

#[allow(clippy::too_many_arguments)]
fn naive_conv(
    x: &[f64],
    f: &[f64],
    b: &[f64],
    (batch, cin, h, w): (usize, usize, usize, usize),
    (cout, k): (usize, usize),
    stride: usize,
    pad: usize,
) -> Vec<f64> {
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (w + 2 * pad - k) / stride + 1;
    let mut y = vec![0.0; batch * cout * oh * ow];
    for n in 0..batch {
        for o in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b[o];
                    for c in 0..cin {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy as usize >= h || ix as usize >= w {
                                    continue;
                                }
                                acc += x[((n * cin + c) * h + iy as usize) * w + ix as usize]
                                    * f[((o * cin + c) * k + ky) * k + kx];
                            }
                        }
                    }
                    y[((n * cout + o) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    y
}

#[test]
fn matmul_identity_and_dot() {
    let mut tape = Tape::<f32>::new();
    let a = tape.constant(Tensor::from_f64(&[2, 2], &[1., 0., 0., 1.]).unwrap());
    let b = tape.constant(Tensor::from_f64(&[2, 2], &[5., 6., 7., 8.]).unwrap());
    let c = tape.matmul(a, b).unwrap();
    assert_eq!(tape.value(c).data(), &[5., 6., 7., 8.]);

    let a = tape.constant(Tensor::from_f64(&[1, 2], &[1., 2.]).unwrap());
    let b = tape.constant(Tensor::from_f64(&[2, 1], &[3., 4.]).unwrap());
    let c = tape.matmul(a, b).unwrap();
    assert_eq!(tape.value(c).data(), &[11.]);

    let bad = tape.constant(Tensor::zeros(&[3, 1]));
    assert!(tape.matmul(a, bad).is_err());
}

#[test]
fn matmul_matches_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = random(&[4, 5], &mut rng);
    let b = random(&[5, 3], &mut rng);
    let expect = naive_matmul(a.data(), b.data(), 4, 5, 3);
    let mut tape = Tape::<f32>::new();
    let av = tape.constant(a.cast());
    let bv = tape.constant(b.cast());
    let c = tape.matmul(av, bv).unwrap();
    for (got, want) in tape.value(c).data().iter().zip(&expect) {
        assert!((f64::from(*got) - want).abs() <= 1e-6 * want.abs().max(1.0));
    }
}

#[test]
fn conv_ones_and_geometry() {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(Tensor::ones(&[1, 1, 3, 3]));
    let f = tape.constant(Tensor::ones(&[1, 1, 3, 3]));
    let b = tape.constant(Tensor::zeros(&[1]));
    let y = tape.conv2d(x, f, b, 1, 0).unwrap();
    assert_eq!(tape.value(y).data(), &[9.0]);

    let x = tape.constant(Tensor::ones(&[1, 1, 8, 8]));
    let f = tape.constant(Tensor::ones(&[4, 1, 3, 3]));
    let b = tape.constant(Tensor::zeros(&[4]));
    let y = tape.conv2d(x, f, b, 1, 0).unwrap();
    assert_eq!(tape.value(y).shape(), &[1, 4, 6, 6]);

    let big = tape.constant(Tensor::ones(&[1, 1, 9, 9]));
    assert!(tape.conv2d(x, big, b, 1, 0).is_err());
    assert!(tape.conv2d(x, f, b, 0, 0).is_err());
}

#[test]
fn conv_matches_direct_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for &(stride, pad) in &[(1, 0), (1, 2), (2, 1)] {
        let x = random(&[2, 3, 8, 8], &mut rng);
        let f = random(&[4, 3, 3, 3], &mut rng);
        let b = random(&[4], &mut rng);
        let expect = naive_conv(x.data(), f.data(), b.data(), (2, 3, 8, 8), (4, 3), stride, pad);
        let mut tape = Tape::<f32>::new();
        let (xv, fv, bv) = (
            tape.constant(x.cast()),
            tape.constant(f.cast()),
            tape.constant(b.cast()),
        );
        let y = tape.conv2d(xv, fv, bv, stride, pad).unwrap();
        assert_eq!(tape.value(y).len(), expect.len());
        for (got, want) in tape.value(y).data().iter().zip(&expect) {
            assert!((f64::from(*got) - want).abs() < 1e-5, "{got} vs {want}");
        }
    }
}

#[test]
fn relu_values() {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(Tensor::from_f64(&[3], &[-1., 0., 2.]).unwrap());
    let y = tape.relu(x);
    assert_eq!(tape.value(y).data(), &[0., 0., 2.]);
    let x = tape.constant(Tensor::full(&[5], -0.3));
    let y = tape.relu(x);
    assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
}

#[test]
fn maxpool_values_and_oracle() {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(Tensor::from_f64(&[1, 1, 2, 2], &[1., 2., 3., 4.]).unwrap());
    let y = tape.maxpool2d(x, 2, 2).unwrap();
    assert_eq!(tape.value(y).data(), &[4.]);

    let x = tape.constant(Tensor::full(&[2, 3, 6, 6], 1.5));
    let y = tape.maxpool2d(x, 2, 2).unwrap();
    assert_eq!(tape.value(y).shape(), &[2, 3, 3, 3]);
    assert!(tape.value(y).data().iter().all(|&v| v == 1.5));

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let xr = random(&[2, 2, 7, 7], &mut rng);
    let mut t64 = Tape::<f64>::new();
    let x64 = t64.constant(xr.clone());
    let y = t64.maxpool2d(x64, 3, 2).unwrap();
    let (oh, ow) = (3, 3);
    let d = xr.data();
    for p in 0..4 {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f64::NEG_INFINITY;
                for ky in 0..3 {
                    for kx in 0..3 {
                        best = best.max(d[p * 49 + (oy * 2 + ky) * 7 + ox * 2 + kx]);
                    }
                }
                assert_eq!(t64.value(y).data()[p * 9 + oy * 3 + ox], best);
            }
        }
    }
}

#[test]
fn softmax_xent_analytic_values() {
    let mut tape = Tape::<f64>::new();
    let l = tape.constant(Tensor::zeros(&[3, 10]));
    let loss = tape.softmax_xent(l, &[0, 4, 9]).unwrap();
    assert!((tape.value(loss).item().unwrap() - 10f64.ln()).abs() < 1e-12);

    let mut logits = vec![0.0; 10];
    logits[7] = 1e4;
    let l = tape.constant(Tensor::from_f64(&[1, 10], &logits).unwrap());
    let loss = tape.softmax_xent(l, &[7]).unwrap();
    assert!(tape.value(loss).item().unwrap().abs() < 1e-12);

    assert!(tape.softmax_xent(l, &[10]).is_err());
}

/// Central-difference check of every param of `build` (which maps the
/// recorded params to a scalar loss).
fn grad_check(params: Vec<Tensor<f64>>, build: impl Fn(&mut Tape<f64>, &[Var]) -> Var) {
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let loss = build(&mut tape, &vars);
    let grads = tape.backward(loss).unwrap();

    let eval = |ps: &[Tensor<f64>]| {
        let mut t = Tape::new();
        let vs: Vec<Var> = ps.iter().map(|p| t.param(p.clone())).collect();
        let l = build(&mut t, &vs);
        t.value(l).item().unwrap()
    };
    let h = 1e-6;
    for (pi, p) in params.iter().enumerate() {
        let analytic = grads.get(vars[pi]).expect("param reached");
        for i in 0..p.len() {
            let mut plus = params.clone();
            plus[pi].data_mut()[i] += h;
            let mut minus = params.clone();
            minus[pi].data_mut()[i] -= h;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let an = analytic.data()[i];
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-3);
            assert!(rel < 1e-4, "param {pi}[{i}]: analytic {an} vs fd {fd}");
        }
    }
}

/// Random projection to a scalar so every output element matters.
fn project(tape: &mut Tape<f64>, y: Var, seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = random(tape.value(y).shape(), &mut rng);
    let rv = tape.constant(r);
    let p = tape.mul(y, rv).unwrap();
    tape.sum(p)
}

#[test]
fn gradcheck_matmul() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    grad_check(
        vec![random(&[3, 4], &mut rng), random(&[4, 2], &mut rng)],
        |t, v| {
            let y = t.matmul(v[0], v[1]).unwrap();
            project(t, y, 1)
        },
    );
}

#[test]
fn gradcheck_linear() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    grad_check(
        vec![
            random(&[3, 5], &mut rng),
            random(&[4, 5], &mut rng),
            random(&[4], &mut rng),
        ],
        |t, v| {
            let y = t.linear(v[0], v[1], v[2]).unwrap();
            project(t, y, 2)
        },
    );
}

#[test]
fn gradcheck_conv2d() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for &(stride, pad) in &[(1, 1), (2, 0)] {
        grad_check(
            vec![
                random(&[2, 2, 5, 5], &mut rng),
                random(&[3, 2, 3, 3], &mut rng),
                random(&[3], &mut rng),
            ],
            |t, v| {
                let y = t.conv2d(v[0], v[1], v[2], stride, pad).unwrap();
                project(t, y, 3)
            },
        );
    }
}

#[test]
fn gradcheck_relu() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    // keep values away from the kink
    let x = random(&[4, 6], &mut rng).map(|v| if v.abs() < 0.05 { 0.3 } else { v });
    grad_check(vec![x], |t, v| {
        let y = t.relu(v[0]);
        project(t, y, 4)
    });
}

#[test]
fn gradcheck_maxpool() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    grad_check(vec![random(&[2, 2, 4, 6], &mut rng)], |t, v| {
        let y = t.maxpool2d(v[0], 2, 2).unwrap();
        project(t, y, 5)
    });
}

#[test]
fn gradcheck_softmax_xent() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    grad_check(vec![random(&[4, 10], &mut rng).map(|v| 3.0 * v)], |t, v| {
        t.softmax_xent(v[0], &[1, 9, 0, 4]).unwrap()
    });
}

#[test]
fn gradcheck_two_layer_net() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let x = random(&[5, 6], &mut rng);
    grad_check(
        vec![
            random(&[8, 6], &mut rng),
            random(&[8], &mut rng),
            random(&[3, 8], &mut rng),
            random(&[3], &mut rng),
        ],
        move |t, v| {
            let xv = t.constant(x.clone());
            let h = t.linear(xv, v[0], v[1]).unwrap();
            let h = t.relu(h);
            let o = t.linear(h, v[2], v[3]).unwrap();
            t.softmax_xent(o, &[0, 1, 2, 1, 0]).unwrap()
        },
    );
}

#[test]
fn gradcheck_small_cnn() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let x = random(&[2, 1, 6, 6], &mut rng);
    grad_check(
        vec![
            random(&[2, 1, 3, 3], &mut rng),
            random(&[2], &mut rng),
            random(&[3, 18], &mut rng),
            random(&[3], &mut rng),
        ],
        move |t, v| {
            let xv = t.constant(x.clone());
            let h = t.conv2d(xv, v[0], v[1], 1, 1).unwrap();
            let h = t.relu(h);
            let h = t.maxpool2d(h, 2, 2).unwrap();
            let h = t.flatten(h).unwrap();
            let o = t.linear(h, v[2], v[3]).unwrap();
            t.softmax_xent(o, &[2, 0]).unwrap()
        },
    );
}

fn quadratic_loss(w: &[f64], target: &[f64], scale: &[f64]) -> f64 {
    w.iter()
        .zip(target)
        .zip(scale)
        .map(|((w, t), s)| 0.5 * s * (w - t) * (w - t))
        .sum()
}

fn run_quadratic(kind: OptimizerKind, lr: f64, steps: usize) -> Vec<f64> {
    let target = [1.0, -2.0, 0.5];
    let scale = [1.0, 3.0, 0.5];
    let mut p = vec![Tensor::<f64>::from_f64(&[3], &[4.0, 2.0, -3.0]).unwrap()];
    let mut st = OptimizerState::<f64>::new(kind, 0.0, &[vec![3]]);
    let mut losses = vec![quadratic_loss(p[0].data(), &target, &scale)];
    for _ in 0..steps {
        let g: Vec<f64> = p[0]
            .data()
            .iter()
            .zip(&target)
            .zip(&scale)
            .map(|((w, t), s)| s * (w - t))
            .collect();
        st.step(&mut p, &[Tensor::new(vec![3], g).unwrap()], lr).unwrap();
        losses.push(quadratic_loss(p[0].data(), &target, &scale));
    }
    losses
}

#[test]
fn optimizers_decrease_convex_loss_monotonically() {
    // heavy-ball momentum is only monotone when overdamped: lr * curvature
    // below (1 - sqrt(mu))^2
    for (kind, lr, steps) in [
        (OptimizerKind::nadam_default(), 0.005, 2000),
        (OptimizerKind::Nsgd { momentum: 0.9 }, 5e-4, 5000),
    ] {
        let l = run_quadratic(kind, lr, steps);
        for w in l.windows(2) {
            assert!(w[1] <= w[0], "{kind:?}: {} -> {}", w[0], w[1]);
        }
        assert!(l.last().unwrap() < &(0.5 * l[0]));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn matmul_agrees_with_oracle(m in 1usize..7, k in 1usize..7, n in 1usize..7, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random(&[m, k], &mut rng);
        let b = random(&[k, n], &mut rng);
        let mut tape = Tape::<f64>::new();
        let (av, bv) = (tape.constant(a.clone()), tape.constant(b.clone()));
        let c = tape.matmul(av, bv).unwrap();
        let want = naive_matmul(a.data(), b.data(), m, k, n);
        for (g, w) in tape.value(c).data().iter().zip(&want) {
            prop_assert!((g - w).abs() < 1e-12);
        }
    }

    #[test]
    fn relu_is_idempotent(v in proptest::collection::vec(-5.0f64..5.0, 1..40)) {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::new(vec![v.len()], v).unwrap());
        let a = tape.relu(x);
        let b = tape.relu(a);
        prop_assert_eq!(tape.value(a), tape.value(b));
    }
}
