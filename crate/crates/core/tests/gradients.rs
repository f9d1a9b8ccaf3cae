mod common;

use common::{fd_grad, max_rel_err, normal_matrix, prob_rows, rng};
use crema_core::losses::{joint_loss, label_loss, regularizer, softmax_rows, RegConfig};
use crema_core::model::MlpParams;
use crema_core::rng::{stream_rng, Stream};
use ndarray::{Array1, Array2};
use rand::Rng as _;

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn weights(r: &mut rand_chacha::ChaCha8Rng, b: usize) -> Vec<f64> {
    (0..b).map(|_| r.random::<f64>()).collect()
}

#[test]
fn joint_loss_matches_finite_differences() {
    let mut r = rng(11);
    for case in 0..25 {
        let b = 1 + case % 5;
        let c = 2 + case % 6;
        let l1 = normal_matrix(&mut r, b, c, 1.5);
        let l2 = normal_matrix(&mut r, b, c, 1.5);
        let t = prob_rows(&mut r, b, c);
        let (w1, w2) = (weights(&mut r, b), weights(&mut r, b));
        let reg = RegConfig {
            alpha_prior: r.random::<f64>(),
            alpha_entropy: r.random::<f64>(),
            ..RegConfig::default()
        };
        let g = joint_loss(l1.view(), l2.view(), t.view(), &w1, &w2, &reg).unwrap();
        let n1 = fd_grad(&l1, H, |x| joint_loss(x.view(), l2.view(), t.view(), &w1, &w2, &reg).unwrap().value);
        let n2 = fd_grad(&l2, H, |x| joint_loss(l1.view(), x.view(), t.view(), &w1, &w2, &reg).unwrap().value);
        assert!(max_rel_err(&g.d_logits1, &n1) < TOL, "case {case}: {}", max_rel_err(&g.d_logits1, &n1));
        assert!(max_rel_err(&g.d_logits2, &n2) < TOL, "case {case}: {}", max_rel_err(&g.d_logits2, &n2));
    }
}

#[test]
fn regularizer_matches_finite_differences() {
    let mut r = rng(12);
    for case in 0..20 {
        let (b, c) = (2 + case % 4, 3 + case % 5);
        let l1 = normal_matrix(&mut r, b, c, 2.0);
        let l2 = normal_matrix(&mut r, b, c, 2.0);
        let reg = RegConfig::default();
        let g = regularizer(l1.view(), l2.view(), &reg).unwrap();
        let n1 = fd_grad(&l1, H, |x| regularizer(x.view(), l2.view(), &reg).unwrap().value);
        assert!(max_rel_err(&g.d_logits1, &n1) < TOL);
    }
}

/// Straight-line value of the label loss with ỹ taken as free entries.
fn label_loss_oracle(p1: &Array2<f64>, p2: &Array2<f64>, y: &Array2<f64>) -> f64 {
    let js = |a: &[f64], b: &[f64]| -> f64 {
        let mut s = 0.0;
        for (&x, &z) in a.iter().zip(b) {
            let m = 0.5 * (x + z);
            if x > 0.0 {
                s += 0.5 * x * (x / m).ln();
            }
            if z > 0.0 {
                s += 0.5 * z * (z / m).ln();
            }
        }
        s
    };
    let b = y.nrows();
    let mut total = 0.0;
    for i in 0..b {
        let yi = y.row(i).to_vec();
        total += js(&p1.row(i).to_vec(), &yi) + js(&p2.row(i).to_vec(), &yi);
    }
    total / b as f64
}

#[test]
fn label_loss_matches_finite_differences() {
    let mut r = rng(13);
    for case in 0..25 {
        let (b, c) = (1 + case % 4, 2 + case % 7);
        let l1 = normal_matrix(&mut r, b, c, 1.5);
        let l2 = normal_matrix(&mut r, b, c, 1.5);
        let y = prob_rows(&mut r, b, c);
        let g = label_loss(l1.view(), l2.view(), y.view()).unwrap();
        let n1 = fd_grad(&l1, H, |x| label_loss(x.view(), l2.view(), y.view()).unwrap().value);
        let n2 = fd_grad(&l2, H, |x| label_loss(l1.view(), x.view(), y.view()).unwrap().value);
        assert!(max_rel_err(&g.d_logits1, &n1) < TOL);
        assert!(max_rel_err(&g.d_logits2, &n2) < TOL);

        let (p1, p2) = (softmax_rows(l1.view()).unwrap(), softmax_rows(l2.view()).unwrap());
        assert!((label_loss_oracle(&p1, &p2, &y) - g.value).abs() < 1e-12);
        let ny = fd_grad(&y, 1e-7, |yy| label_loss_oracle(&p1, &p2, yy));
        assert!(max_rel_err(&g.d_soft, &ny) < TOL, "case {case}: {}", max_rel_err(&g.d_soft, &ny));
    }
}

#[test]
fn label_gradient_through_label_logits() {
    // chaining dỹ through the softmax must match differences in logit space
    let mut r = rng(14);
    for _ in 0..20 {
        let (b, c) = (3, 5);
        let l1 = normal_matrix(&mut r, b, c, 1.0);
        let l2 = normal_matrix(&mut r, b, c, 1.0);
        let z = normal_matrix(&mut r, b, c, 1.0);
        let y = softmax_rows(z.view()).unwrap();
        let g = label_loss(l1.view(), l2.view(), y.view()).unwrap();
        let mut chained = Array2::zeros((b, c));
        for i in 0..b {
            let dot: f64 = y.row(i).dot(&g.d_soft.row(i));
            for j in 0..c {
                chained[[i, j]] = y[[i, j]] * (g.d_soft[[i, j]] - dot);
            }
        }
        let nz = fd_grad(&z, H, |zz| {
            let yy = softmax_rows(zz.view()).unwrap();
            label_loss(l1.view(), l2.view(), yy.view()).unwrap().value
        });
        assert!(max_rel_err(&chained, &nz) < TOL);
    }
}

fn mlp_case(seed: u64, sizes: &[usize], batch: usize) -> (MlpParams, Array2<f64>, Array2<f64>) {
    let mut init = stream_rng(seed, Stream::Init, 0);
    let mut p = MlpParams::init(sizes, 0.1, &mut init).unwrap();
    let mut r = rng(seed);
    for b in p.biases.iter_mut() {
        *b = Array1::from_shape_fn(b.len(), |_| r.random::<f64>() - 0.5);
    }
    let x = normal_matrix(&mut r, batch, sizes[0], 1.0);
    let g = normal_matrix(&mut r, batch, *sizes.last().unwrap(), 1.0);
    (p, x, g)
}

#[test]
fn mlp_backward_matches_finite_differences() {
    let shapes: [&[usize]; 4] = [&[3, 4], &[4, 6, 3], &[5, 8, 7, 4], &[6, 16, 16, 2]];
    for case in 0..24u64 {
        let sizes = shapes[case as usize % shapes.len()];
        let (p, x, g) = mlp_case(100 + case, sizes, 1 + case as usize % 5);
        // scalar loss whose logit gradient is exactly g
        let loss = |q: &MlpParams| (q.logits(x.view()).unwrap() * &g).sum();
        let trace = p.forward(x.view()).unwrap();
        let grads = p.backward(&trace, g.view()).unwrap();
        for l in 0..p.weights.len() {
            let nw = fd_grad(&p.weights[l], H, |w| {
                let mut q = p.clone();
                q.weights[l] = w.clone();
                loss(&q)
            });
            assert!(max_rel_err(&grads.weights[l], &nw) < TOL, "case {case} layer {l}");
            let b2 = p.biases[l].clone().insert_axis(ndarray::Axis(0));
            let nb = fd_grad(&b2, H, |b| {
                let mut q = p.clone();
                q.biases[l] = b.row(0).to_owned();
                loss(&q)
            });
            let ab = grads.biases[l].clone().insert_axis(ndarray::Axis(0));
            assert!(max_rel_err(&ab, &nb) < TOL, "case {case} layer {l} bias");
        }
    }
}

#[test]
fn single_linear_layer_has_closed_form_gradient() {
    let mut r = rng(15);
    let w = normal_matrix(&mut r, 4, 3, 1.0);
    let p = MlpParams::from_layers(vec![w], vec![Array1::zeros(3)], 0.01).unwrap();
    let x = normal_matrix(&mut r, 5, 4, 1.0);
    let target = normal_matrix(&mut r, 5, 3, 1.0);
    // L = ½ Σ (logits − target)², so dL/dlogits = logits − target
    let trace = p.forward(x.view()).unwrap();
    let d = trace.logits() - &target;
    let grads = p.backward(&trace, d.view()).unwrap();
    let expected_w = x.t().dot(&d);
    let expected_b = d.sum_axis(ndarray::Axis(0));
    assert!((&grads.weights[0] - &expected_w).iter().all(|v| v.abs() < 1e-12));
    assert!((&grads.biases[0] - &expected_b).iter().all(|v| v.abs() < 1e-12));
}

#[test]
fn forward_matches_naive_recomputation() {
    let (p, x, _) = mlp_case(7, &[5, 7, 6, 3], 4);
    let logits = p.logits(x.view()).unwrap();
    for i in 0..x.nrows() {
        let mut a: Vec<f64> = x.row(i).to_vec();
        for l in 0..p.weights.len() {
            let w = &p.weights[l];
            let mut z = vec![0.0; w.ncols()];
            for (j, zj) in z.iter_mut().enumerate() {
                *zj = p.biases[l][j];
                for (k, ak) in a.iter().enumerate() {
                    *zj += ak * w[[k, j]];
                }
            }
            if l + 1 < p.weights.len() {
                for v in z.iter_mut() {
                    if *v <= 0.0 {
                        *v *= p.slope();
                    }
                }
            }
            a = z;
        }
        for (j, v) in a.iter().enumerate() {
            assert!((logits[[i, j]] - v).abs() < 1e-12);
        }
    }
}
