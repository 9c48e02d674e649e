mod common;

use common::*;
use scratchprune::tensor::{ConvGeometry, Graph, Tensor, TensorError, Var};

fn t64(shape: &[usize], data: Vec<f64>) -> Tensor<f64> {
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Analytic gradient of `build(graph, param)` w.r.t. `param` vs central differences.
fn grad_check(
    shape: &[usize],
    x: &[f64],
    build: impl Fn(&mut Graph<f64>, Var) -> Var,
) -> f64 {
    let mut g = Graph::new();
    let p = g.leaf(t64(shape, x.to_vec()).with_grad());
    let loss = build(&mut g, p);
    let analytic = g.backward(loss, &[p]).unwrap().remove(0).into_data();
    let numeric = central_diff(x, FD_STEP, |probe| {
        let mut g = Graph::new();
        let p = g.leaf(t64(shape, probe.to_vec()));
        let loss = build(&mut g, p);
        g.value(loss).data()[0]
    });
    max_rel_err(&analytic, &numeric)
}

/// Smooth scalar head over any activation: gate, pool, linear, cross-entropy.
fn smooth_head(g: &mut Graph<f64>, y: Var, seed: u64) -> Var {
    let shape = g.value(y).shape().to_vec();
    let mut r = rng(seed);
    if shape.len() == 4 {
        let c = shape[1];
        let gates = g.leaf(t64(&[c], uniform(&mut r, c, 0.5, 1.5)));
        let z = g.gate(y, gates).unwrap();
        let lin = g.global_avg_pool(z).unwrap();
        let w = g.leaf(t64(&[3, c], uniform(&mut r, 3 * c, -1.0, 1.0)));
        let b = g.leaf(t64(&[3], vec![0.1, -0.2, 0.3]));
        let logits = g.linear(lin, w, b).unwrap();
        let labels: Vec<usize> = (0..shape[0]).map(|i| i % 3).collect();
        g.cross_entropy(logits, &labels, 0.0).unwrap()
    } else {
        g.sum(y).unwrap()
    }
}

#[test]
fn conv_scalar_and_identity_cases() {
    let mut g = Graph::<f32>::new();
    let x = g.leaf(Tensor::new([1, 1, 1, 1], vec![2.0]).unwrap());
    let w = g.leaf(Tensor::new([1, 1, 1, 1], vec![3.0]).unwrap());
    let y = g.conv2d(x, w, ConvGeometry::new(1, 0, 1)).unwrap();
    assert_eq!(g.value(y).data(), &[6.0]);

    let mut r = rng(1);
    let data: Vec<f32> = uniform(&mut r, 2 * 4 * 4, -1.0, 1.0).iter().map(|&v| v as f32).collect();
    let x = g.leaf(Tensor::new([1, 2, 4, 4], data.clone()).unwrap());
    let w = g.leaf(Tensor::new([2, 1, 1, 1], vec![1.0, 1.0]).unwrap());
    let y = g.conv2d(x, w, ConvGeometry::new(1, 0, 2)).unwrap();
    assert_eq!(g.value(y).data(), &data[..]);
}

#[test]
fn conv_matches_naive_loops() {
    let mut r = rng(2);
    let x = uniform(&mut r, 3 * 16, -1.0, 1.0);
    let w = uniform(&mut r, 2 * 3 * 9, -1.0, 1.0);
    let (want, want_shape) = naive_conv(&x, [1, 3, 4, 4], &w, [2, 3, 3, 3], 1, 1, 1);
    let mut g = Graph::<f32>::new();
    let xv = g.leaf(Tensor::new([1, 3, 4, 4], x.iter().map(|&v| v as f32).collect()).unwrap());
    let wv = g.leaf(Tensor::new([2, 3, 3, 3], w.iter().map(|&v| v as f32).collect()).unwrap());
    let y = g.conv2d(xv, wv, ConvGeometry::new(1, 1, 1)).unwrap();
    assert_eq!(g.value(y).shape(), &want_shape);
    for (a, b) in g.value(y).data().iter().zip(&want) {
        assert!((*a as f64 - b).abs() < 1e-5, "{a} vs {b}");
    }
}

#[test]
fn conv_strided_grouped_matches_naive_loops() {
    let mut r = rng(3);
    for &(stride, pad, groups, cin, cout) in &[(2, 1, 1, 2, 3), (1, 1, 4, 4, 4), (2, 0, 2, 4, 6)] {
        let x = uniform(&mut r, 2 * cin * 25, -1.0, 1.0);
        let w = uniform(&mut r, cout * (cin / groups) * 9, -1.0, 1.0);
        let (want, shape) = naive_conv(&x, [2, cin, 5, 5], &w, [cout, cin / groups, 3, 3], stride, pad, groups);
        let mut g = Graph::<f64>::new();
        let xv = g.leaf(t64(&[2, cin, 5, 5], x));
        let wv = g.leaf(t64(&[cout, cin / groups, 3, 3], w));
        let y = g.conv2d(xv, wv, ConvGeometry::new(stride, pad, groups)).unwrap();
        assert_eq!(g.value(y).shape(), &shape);
        for (a, b) in g.value(y).data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn conv_errors() {
    let mut g = Graph::<f32>::new();
    let x = g.leaf(Tensor::zeros([1, 3, 4, 4]));
    let w = g.leaf(Tensor::zeros([2, 2, 3, 3]));
    assert!(matches!(g.conv2d(x, w, ConvGeometry::new(1, 1, 1)), Err(TensorError::Dimension { .. })));
    let w = g.leaf(Tensor::zeros([2, 3, 5, 5]));
    assert!(matches!(g.conv2d(x, w, ConvGeometry::new(1, 0, 1)), Err(TensorError::Geometry { .. })));
    let w = g.leaf(Tensor::zeros([2, 1, 1, 1]));
    assert!(matches!(g.conv2d(x, w, ConvGeometry::new(1, 0, 2)), Err(TensorError::Dimension { .. })));
}

#[test]
fn batchnorm_cases() {
    let mut g = Graph::<f32>::new();
    let x = g.leaf(Tensor::full([2, 2, 2, 2], 3.5));
    let gamma = g.leaf(Tensor::full([2], 1.0));
    let beta = g.leaf(Tensor::zeros([2]));
    let (y, stats) = g.batch_norm_train(x, gamma, beta, 1e-5).unwrap();
    assert!(g.value(y).data().iter().all(|v| v.abs() < 1e-6));
    assert_eq!(stats.count, 8);

    let mut r = rng(4);
    let data: Vec<f32> = uniform(&mut r, 16, -2.0, 2.0).iter().map(|&v| v as f32).collect();
    let x = g.leaf(Tensor::new([2, 2, 2, 2], data).unwrap());
    let gamma0 = g.leaf(Tensor::zeros([2]));
    let beta_b = g.leaf(Tensor::new([2], vec![0.7, -1.25]).unwrap());
    let (y, _) = g.batch_norm_train(x, gamma0, beta_b, 1e-5).unwrap();
    for (i, v) in g.value(y).data().iter().enumerate() {
        let want = if (i / 4) % 2 == 0 { 0.7 } else { -1.25 };
        assert_eq!(*v, want);
    }

    let empty = g.leaf(Tensor::zeros([0, 2, 2, 2]));
    assert!(matches!(
        g.batch_norm_train(empty, gamma, beta, 1e-5),
        Err(TensorError::Statistics { .. })
    ));
}

#[test]
fn batchnorm_matches_loop_oracle() {
    let (n, c, inner) = (4, 3, 4);
    let mut r = rng(5);
    let x = uniform(&mut r, n * c * inner, -3.0, 3.0);
    let gamma = uniform(&mut r, c, 0.5, 1.5);
    let beta = uniform(&mut r, c, -0.5, 0.5);
    let eps = 1e-5;
    let mut want = vec![0.0; x.len()];
    for ch in 0..c {
        let vals: Vec<f64> = (0..n).flat_map(|b| (0..inner).map(move |i| (b, i))).map(|(b, i)| x[(b * c + ch) * inner + i]).collect();
        let mu = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / vals.len() as f64;
        for b in 0..n {
            for i in 0..inner {
                let idx = (b * c + ch) * inner + i;
                want[idx] = (x[idx] - mu) / (var + eps).sqrt() * gamma[ch] + beta[ch];
            }
        }
    }
    let mut g = Graph::<f32>::new();
    let f = |v: &Vec<f64>| v.iter().map(|&a| a as f32).collect::<Vec<f32>>();
    let xv = g.leaf(Tensor::new([n, c, 2, 2], f(&x)).unwrap());
    let gv = g.leaf(Tensor::new([c], f(&gamma)).unwrap());
    let bv = g.leaf(Tensor::new([c], f(&beta)).unwrap());
    let (y, _) = g.batch_norm_train(xv, gv, bv, eps).unwrap();
    for (a, b) in g.value(y).data().iter().zip(&want) {
        assert!((*a as f64 - b).abs() < 1e-5, "{a} vs {b}");
    }
}

#[test]
fn gate_identity_and_suppression() {
    let mut r = rng(6);
    let data: Vec<f32> = uniform(&mut r, 24, -1.0, 1.0).iter().map(|&v| v as f32).collect();
    let mut g = Graph::<f32>::new();
    let x = g.leaf(Tensor::new([2, 3, 2, 2], data.clone()).unwrap());
    let ones = g.leaf(Tensor::full([3], 1.0));
    let zeros = g.leaf(Tensor::zeros([3]));
    let y1 = g.gate(x, ones).unwrap();
    assert_eq!(g.value(y1).data(), &data[..]);
    let y0 = g.gate(x, zeros).unwrap();
    assert!(g.value(y0).data().iter().all(|&v| v == 0.0));
    let short = g.leaf(Tensor::zeros([2]));
    assert!(matches!(g.gate(x, short), Err(TensorError::Dimension { .. })));
}

#[test]
fn gate_gradient_matches_finite_differences() {
    let mut r = rng(7);
    let x = uniform(&mut r, 24, -1.0, 1.0);
    let up = uniform(&mut r, 24, -1.0, 1.0);
    let gates = uniform(&mut r, 3, 0.0, 1.0);
    let err = grad_check(&[3], &gates, |g, p| {
        let xv = g.leaf(t64(&[2, 3, 2, 2], x.clone()));
        let y = g.gate(xv, p).unwrap();
        let flat = g.global_avg_pool(y).unwrap();
        let w = g.leaf(t64(&[1, 3], up[..3].to_vec()));
        let b = g.leaf(t64(&[1], vec![0.0]));
        let s = g.linear(flat, w, b).unwrap();
        g.sum(s).unwrap()
    });
    assert!(err < 1e-4, "gate rel err {err}");
}

#[test]
fn cross_entropy_cases() {
    let mut g = Graph::<f64>::new();
    let z = g.leaf(Tensor::zeros([3, 10]));
    let l = g.cross_entropy(z, &[0, 4, 9], 0.0).unwrap();
    assert!((g.value(l).data()[0] - 10f64.ln()).abs() < 1e-12);
    assert!((g.value(l).data()[0] - 2.302585).abs() < 1e-6);

    let mut sat = vec![0.0; 10];
    sat[2] = 1000.0;
    let z = g.leaf(t64(&[1, 10], sat));
    let l = g.cross_entropy(z, &[2], 0.0).unwrap();
    assert!(g.value(l).data()[0].abs() < 1e-9);

    assert!(matches!(g.cross_entropy(z, &[10], 0.0), Err(TensorError::Label { label: 10, classes: 10 })));
}

#[test]
fn cross_entropy_matches_direct_formula() {
    let mut r = rng(8);
    let logits = uniform(&mut r, 20, -3.0, 3.0);
    let labels = [1usize, 4, 0, 2];
    for &eps in &[0.0, 0.1] {
        let mut want = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            let row = &logits[i * 5..(i + 1) * 5];
            let lse = row.iter().map(|v| v.exp()).sum::<f64>().ln();
            for (j, &z) in row.iter().enumerate() {
                let q = if j == y { 1.0 - eps + eps / 5.0 } else { eps / 5.0 };
                want -= q * (z - lse);
            }
        }
        want /= 4.0;
        let mut g = Graph::<f32>::new();
        let z = g.leaf(Tensor::new([4, 5], logits.iter().map(|&v| v as f32).collect()).unwrap());
        let l = g.cross_entropy(z, &labels, eps).unwrap();
        assert!((g.value(l).data()[0] as f64 - want).abs() < 1e-6);
    }
}

#[test]
fn backward_linear_and_disconnected() {
    let mut g = Graph::<f32>::new();
    let x = g.leaf(Tensor::full([2, 3, 2], 0.25).with_grad());
    let other = g.leaf(Tensor::full([4], 1.0).with_grad());
    let s = g.sum(x).unwrap();
    let grads = g.backward(s, &[x, other]).unwrap();
    assert!(grads[0].data().iter().all(|&v| v == 1.0));
    assert_eq!(grads[0].shape(), &[2, 3, 2]);
    assert!(grads[1].data().iter().all(|&v| v == 0.0));

    assert!(matches!(g.backward(x, &[x]), Err(TensorError::Contract(_))));
    let frozen = g.leaf(Tensor::full([1], 1.0));
    assert!(matches!(g.backward(s, &[frozen]), Err(TensorError::Contract(_))));
}

#[test]
fn non_finite_forward_is_an_error() {
    let mut g = Graph::<f32>::new();
    let x = g.leaf(Tensor::new([1, 1, 1, 1], vec![f32::MAX]).unwrap());
    let w = g.leaf(Tensor::new([1, 1, 1, 1], vec![10.0]).unwrap());
    assert!(matches!(g.conv2d(x, w, ConvGeometry::new(1, 0, 1)), Err(TensorError::NonFinite { .. })));
}

/// Twenty random trials per op, each against central differences.
#[test]
fn every_op_passes_finite_difference_oracle() {
    for trial in 0..20u64 {
        let mut r = rng(100 + trial);
        let x = uniform(&mut r, 2 * 4 * 4 * 4, -1.0, 1.0);
        let w = uniform(&mut r, 3 * 4 * 9, -0.5, 0.5);
        let dw = uniform(&mut r, 4 * 9, -0.5, 0.5);
        let gamma = uniform(&mut r, 4, 0.5, 1.5);
        let beta = uniform(&mut r, 4, -0.5, 0.5);
        let xs = [2usize, 4, 4, 4];

        let head = |g: &mut Graph<f64>, y: Var| smooth_head(g, y, trial);

        // conv2d w.r.t. input and weight, dense and depthwise
        let e = grad_check(&xs, &x, |g, p| {
            let wv = g.leaf(t64(&[3, 4, 3, 3], w.clone()));
            let y = g.conv2d(p, wv, ConvGeometry::new(1, 1, 1)).unwrap();
            head(g, y)
        });
        assert!(e < 1e-4, "conv input trial {trial}: {e}");
        let e = grad_check(&[3, 4, 3, 3], &w, |g, p| {
            let xv = g.leaf(t64(&xs, x.clone()));
            let y = g.conv2d(xv, p, ConvGeometry::new(2, 1, 1)).unwrap();
            head(g, y)
        });
        assert!(e < 1e-4, "conv weight trial {trial}: {e}");
        let e = grad_check(&[4, 1, 3, 3], &dw, |g, p| {
            let xv = g.leaf(t64(&xs, x.clone()));
            let y = g.conv2d(xv, p, ConvGeometry::new(1, 1, 4)).unwrap();
            head(g, y)
        });
        assert!(e < 1e-4, "depthwise weight trial {trial}: {e}");

        // batch norm (train and eval) w.r.t. input, gamma, beta
        for train in [true, false] {
            let bn = |g: &mut Graph<f64>, xv: Var, gv: Var, bv: Var| {
                if train {
                    g.batch_norm_train(xv, gv, bv, 1e-5).unwrap().0
                } else {
                    g.batch_norm_eval(xv, gv, bv, &[0.1, -0.2, 0.0, 0.3], &[1.0, 0.5, 2.0, 0.8], 1e-5).unwrap()
                }
            };
            let e = grad_check(&xs, &x, |g, p| {
                let gv = g.leaf(t64(&[4], gamma.clone()));
                let bv = g.leaf(t64(&[4], beta.clone()));
                let y = bn(g, p, gv, bv);
                head(g, y)
            });
            assert!(e < 1e-4, "bn input (train={train}) trial {trial}: {e}");
            let e = grad_check(&[4], &gamma, |g, p| {
                let xv = g.leaf(t64(&xs, x.clone()));
                let bv = g.leaf(t64(&[4], beta.clone()));
                let y = bn(g, xv, p, bv);
                head(g, y)
            });
            assert!(e < 1e-4, "bn gamma trial {trial}: {e}");
            let e = grad_check(&[4], &beta, |g, p| {
                let xv = g.leaf(t64(&xs, x.clone()));
                let gv = g.leaf(t64(&[4], gamma.clone()));
                let y = bn(g, xv, gv, p);
                head(g, y)
            });
            assert!(e < 1e-4, "bn beta trial {trial}: {e}");
        }

        // relu: keep inputs away from the kink
        let xr: Vec<f64> = x.iter().map(|&v| if v.abs() < 0.05 { v + 0.1 } else { v }).collect();
        let e = grad_check(&xs, &xr, |g, p| {
            let y = g.relu(p).unwrap();
            head(g, y)
        });
        assert!(e < 1e-4, "relu trial {trial}: {e}");

        // pooling
        let e = grad_check(&xs, &x, |g, p| {
            let y = g.avg_pool(p, 2).unwrap();
            head(g, y)
        });
        assert!(e < 1e-4, "avg_pool trial {trial}: {e}");

        // residual add
        let e = grad_check(&xs, &x, |g, p| {
            let other = g.leaf(t64(&xs, w.iter().chain(&w).chain(&dw).cycle().take(128).copied().collect()));
            let y = g.add(p, other).unwrap();
            let y = g.add(y, p).unwrap();
            head(g, y)
        });
        assert!(e < 1e-4, "add trial {trial}: {e}");

        // gate w.r.t. gates and input
        let gates = uniform(&mut r, 4, 0.0, 1.0);
        let e = grad_check(&[4], &gates, |g, p| {
            let xv = g.leaf(t64(&xs, x.clone()));
            let y = g.gate(xv, p).unwrap();
            head(g, y)
        });
        assert!(e < 1e-4, "gate trial {trial}: {e}");

        // linear w.r.t. input, weight, bias; cross entropy with smoothing
        let feats = uniform(&mut r, 3 * 5, -1.0, 1.0);
        let lw = uniform(&mut r, 4 * 5, -1.0, 1.0);
        let lb = uniform(&mut r, 4, -0.2, 0.2);
        let labels = [0usize, 3, 1];
        let ce = |g: &mut Graph<f64>, xv: Var, wv: Var, bv: Var| {
            let z = g.linear(xv, wv, bv).unwrap();
            g.cross_entropy(z, &labels, 0.1).unwrap()
        };
        let e = grad_check(&[3, 5], &feats, |g, p| {
            let wv = g.leaf(t64(&[4, 5], lw.clone()));
            let bv = g.leaf(t64(&[4], lb.clone()));
            ce(g, p, wv, bv)
        });
        assert!(e < 1e-4, "linear input trial {trial}: {e}");
        let e = grad_check(&[4, 5], &lw, |g, p| {
            let xv = g.leaf(t64(&[3, 5], feats.clone()));
            let bv = g.leaf(t64(&[4], lb.clone()));
            ce(g, xv, p, bv)
        });
        assert!(e < 1e-4, "linear weight trial {trial}: {e}");
        let e = grad_check(&[4], &lb, |g, p| {
            let xv = g.leaf(t64(&[3, 5], feats.clone()));
            let wv = g.leaf(t64(&[4, 5], lw.clone()));
            ce(g, xv, wv, p)
        });
        assert!(e < 1e-4, "linear bias trial {trial}: {e}");
    }
}

#[test]
fn forward_is_deterministic_and_backward_leaves_weights_untouched() {
    let mut r = rng(9);
    let x: Vec<f32> = uniform(&mut r, 2 * 3 * 4 * 4, -1.0, 1.0).iter().map(|&v| v as f32).collect();
    let w: Vec<f32> = uniform(&mut r, 4 * 3 * 9, -1.0, 1.0).iter().map(|&v| v as f32).collect();
    let weight = Tensor::new([4, 3, 3, 3], w).unwrap();
    let before = weight.clone();
    let run = || {
        let mut g = Graph::<f32>::new();
        let xv = g.leaf(Tensor::new([2, 3, 4, 4], x.clone()).unwrap());
        let wv = g.leaf(weight.clone());
        let gates = g.leaf(Tensor::full([4], 0.5).with_grad());
        let y = g.conv2d(xv, wv, ConvGeometry::new(1, 1, 1)).unwrap();
        let y = g.gate(y, gates).unwrap();
        let s = g.sum(y).unwrap();
        let grads = g.backward(s, &[gates]).unwrap();
        (g.value(y).data().to_vec(), grads[0].data().to_vec())
    };
    let (a, ga) = run();
    let (b, gb) = run();
    assert_eq!(a, b);
    assert_eq!(ga, gb);
    assert_eq!(weight, before);
}
