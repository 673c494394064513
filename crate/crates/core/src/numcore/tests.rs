use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn t2(rows: &[&[f64]]) -> Tensor<f64> {
    let c = rows[0].len();
    Tensor::from_vec(&[rows.len(), c], rows.iter().flat_map(|r| r.iter().copied()).collect()).unwrap()
}

/// Gradient-checks `build` with every input registered as a parameter and the
/// loss `mean(y²)`; returns the worst relative error.
fn check_op(
    inputs: Vec<Tensor<f64>>,
    rng: &mut ChaCha8Rng,
    build: impl Fn(&mut Graph<'_, f64>, &[Var]) -> Result<Var, NumError>,
) -> f64 {
    let mut store = ParamStore::new();
    let ids: Vec<_> = inputs
        .into_iter()
        .enumerate()
        .map(|(i, t)| store.insert(format!("in{i}"), t).unwrap())
        .collect();
    let report = grad_check(&mut store, GRAD_CHECK_EPS, rng, |_| {}, |g| {
        let vars: Vec<_> = ids.iter().map(|&id| g.param(id)).collect();
        let y = build(g, &vars)?;
        let zeros = g.input(Tensor::zeros(g.shape(y)));
        g.mse(y, zeros)
    })
    .unwrap();
    report.max_rel_err()
}

#[test]
fn matmul_identity_and_projector() {
    let store = ParamStore::<f64>::new();
    let mut g = Graph::new(&store);
    let eye = g.input(t2(&[&[1.0, 0.0], &[0.0, 1.0]]));
    let m = g.input(t2(&[&[1.0, 2.0], &[3.0, 4.0]]));
    let y = g.matmul(eye, m).unwrap();
    assert_eq!(g.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);

    let p = g.input(t2(&[&[1.0, 0.0], &[0.0, 0.0]]));
    let b = g.input(t2(&[&[5.0, 6.0], &[7.0, 8.0]]));
    let y = g.matmul(p, b).unwrap();
    assert_eq!(g.value(y).data(), &[5.0, 6.0, 0.0, 0.0]);
}

#[test]
fn matmul_shape_mismatch_is_dimension_error() {
    let store = ParamStore::<f64>::new();
    let mut g = Graph::new(&store);
    let a = g.input(Tensor::zeros(&[2, 3]));
    let b = g.input(Tensor::zeros(&[2, 3]));
    assert!(matches!(g.matmul(a, b), Err(NumError::Dimension { .. })));
}

#[test]
fn matmul_matches_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (a, b) = (rand_tensor(&mut rng, &[5, 7]), rand_tensor(&mut rng, &[7, 3]));
    let store = ParamStore::<f64>::new();
    let mut g = Graph::new(&store);
    let (va, vb) = (g.input(a.clone()), g.input(b.clone()));
    let y = g.matmul(va, vb).unwrap();
    let bt = g.input(b.transpose2().unwrap());
    let yt = g.matmul_nt(va, bt).unwrap();
    for i in 0..5 {
        for j in 0..3 {
            let want: f64 = (0..7).map(|k| a.data()[i * 7 + k] * b.data()[k * 3 + j]).sum();
            assert!((g.value(y).data()[i * 3 + j] - want).abs() < 1e-12);
            assert!((g.value(yt).data()[i * 3 + j] - want).abs() < 1e-12);
        }
    }
}

#[test]
fn matmul_sum_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut store = ParamStore::new();
    let a = store.insert("a", rand_tensor(&mut rng, &[4, 3])).unwrap();
    let b = store.insert("b", rand_tensor(&mut rng, &[3, 2])).unwrap();
    let report = grad_check(&mut store, GRAD_CHECK_EPS, &mut rng, |_| {}, |g| {
        let (va, vb) = (g.param(a), g.param(b));
        let c = g.matmul(va, vb)?;
        g.sum_all(c)
    })
    .unwrap();
    assert!(report.max_rel_err() < 1e-6, "{report:?}");
}

#[test]
fn masked_softmax_examples() {
    let store = ParamStore::<f64>::new();
    let mut g = Graph::new(&store);
    let x = g.input(Tensor::zeros(&[4]));
    let y = g.masked_softmax(x, &[true; 4]).unwrap();
    assert!(g.value(y).data().iter().all(|&v| (v - 0.25).abs() < 1e-15));

    let x = g.input(Tensor::zeros(&[2]));
    let y = g.masked_softmax(x, &[true, false]).unwrap();
    assert!((g.value(y).data()[0] - 1.0).abs() < 1e-15);
    assert!(g.value(y).data()[1] <= 1e-30);

    let x = g.input(Tensor::zeros(&[2, 3]));
    assert_eq!(g.masked_softmax(x, &[false; 3]), Err(NumError::DegenerateRow));
    assert!(matches!(g.masked_softmax(x, &[true; 2]), Err(NumError::Dimension { .. })));
}

#[test]
fn masked_softmax_matches_direct_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = rand_tensor(&mut rng, &[8]).map(|v| 4.0 * v);
    let store = ParamStore::<f64>::new();
    let mut g = Graph::new(&store);
    let vx = g.input(x.clone());
    let y = g.masked_softmax(vx, &[true; 8]).unwrap();
    let denom: f64 = x.data().iter().map(|v| v.exp()).sum();
    for (yv, xv) in g.value(y).data().iter().zip(x.data()) {
        assert!((yv - xv.exp() / denom).abs() < 1e-12);
    }
}

#[test]
fn masked_softmax_rows_normalize_over_valid_positions() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for trial in 0..20 {
        let l = 3 + trial % 9;
        let mut mask: Vec<bool> = (0..l).map(|_| rng.random_bool(0.6)).collect();
        mask[trial % l] = true;
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store);
        let x = g.input(rand_tensor(&mut rng, &[5, l]).map(|v| 10.0 * v));
        let y = g.masked_softmax(x, &mask).unwrap();
        for row in g.value(y).data().chunks(l) {
            let valid: f64 = row.iter().zip(&mask).filter(|(_, &m)| m).map(|(v, _)| v).sum();
            assert!((valid - 1.0).abs() < 1e-9);
            for (v, &m) in row.iter().zip(&mask) {
                if !m {
                    assert!(*v <= 1e-30);
                }
            }
        }
    }
}

#[test]
fn layer_norm_examples() {
    let store = ParamStore::<f64>::new();
    let mut g = Graph::new(&store);
    let gain = g.input(Tensor::full(&[4], 1.0));
    let bias = g.input(Tensor::zeros(&[4]));
    let x = g.input(Tensor::full(&[1, 4], 3.5));
    let y = g.layer_norm(x, gain, bias).unwrap();
    assert!(g.value(y).data().iter().all(|v| v.abs() < 1e-12));

    let gain2 = g.input(Tensor::full(&[2], 1.0));
    let bias2 = g.input(Tensor::zeros(&[2]));
    let x = g.input(Tensor::from_vec(&[2], vec![1.0, -1.0]).unwrap());
    let y = g.layer_norm(x, gain2, bias2).unwrap();
    assert!((g.value(y).data()[0] - 1.0).abs() < 1e-4);
    assert!((g.value(y).data()[1] + 1.0).abs() < 1e-4);

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let gain = g.input(Tensor::full(&[16], 1.0));
    let bias = g.input(Tensor::zeros(&[16]));
    let x = g.input(rand_tensor(&mut rng, &[1, 16]).map(|v| 7.0 * v + 2.0));
    let y = g.layer_norm(x, gain, bias).unwrap();
    let d = g.value(y).data();
    let mean = d.iter().sum::<f64>() / 16.0;
    let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
    assert!(mean.abs() < 1e-10);
    assert!((var - 1.0).abs() < 1e-4);
}

#[test]
fn maxpool_examples() {
    let store = ParamStore::<f64>::new();
    let mut g = Graph::new(&store);
    let x = g.input(Tensor::from_vec(&[2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let y = g.maxpool2d(x, 2).unwrap();
    assert_eq!(g.shape(y), &[1, 1, 1]);
    assert_eq!(g.value(y).data(), &[4.0]);

    let x = g.input(Tensor::full(&[4, 6, 3], 0.7));
    let y = g.maxpool2d(x, 2).unwrap();
    assert_eq!(g.shape(y), &[2, 3, 3]);
    assert!(g.value(y).data().iter().all(|&v| v == 0.7));

    let x = g.input(Tensor::zeros(&[5, 4, 1]));
    assert!(matches!(g.maxpool2d(x, 2), Err(NumError::Dimension { .. })));
}

#[test]
fn maxpool_ties_route_gradient_to_first_in_scan_order() {
    let mut store = ParamStore::<f64>::new();
    let id = store.insert("x", Tensor::from_vec(&[2, 2, 1], vec![0.0, 5.0, 5.0, 5.0]).unwrap()).unwrap();
    let mut g = Graph::new(&store);
    let x = g.param(id);
    let y = g.maxpool2d(x, 2).unwrap();
    let loss = g.sum_all(y).unwrap();
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.get(id).unwrap().data(), &[0.0, 1.0, 0.0, 0.0]);
}

#[test]
fn maxpool_backward_conserves_gradient_mass() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut store = ParamStore::<f64>::new();
    let id = store.insert("x", rand_tensor(&mut rng, &[8, 8, 3])).unwrap();
    let mut g = Graph::new(&store);
    let x = g.param(id);
    let y = g.maxpool2d(x, 4).unwrap();
    // upstream gradient dL/dy for L = mean(y²) is 2y/12
    let zeros = g.input(Tensor::zeros(g.shape(y)));
    let loss = g.mse(y, zeros).unwrap();
    let grads = g.backward(loss).unwrap();
    let upstream: f64 = g.value(y).data().iter().map(|v| 2.0 * v / 12.0).sum();
    let total: f64 = grads.get(id).unwrap().sum();
    assert!((upstream - total).abs() < 1e-12);
}

#[test]
fn maxpool_matches_window_scan_and_gradient_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = rand_tensor(&mut rng, &[8, 8, 1]);
    let store = ParamStore::<f64>::new();
    let mut g = Graph::new(&store);
    let vx = g.input(x.clone());
    let y = g.maxpool2d(vx, 2).unwrap();
    for oy in 0..4 {
        for ox in 0..4 {
            let mut best = f64::NEG_INFINITY;
            for ky in 0..2 {
                for kx in 0..2 {
                    best = best.max(x.data()[(oy * 2 + ky) * 8 + ox * 2 + kx]);
                }
            }
            assert_eq!(g.value(y).data()[oy * 4 + ox], best);
        }
    }
    let err = check_op(vec![x], &mut rng, |g, v| {
        let y = g.maxpool2d(v[0], 2)?;
        g.sum_all(y)
    });
    assert!(err < 1e-6, "{err}");
}

/// Direct scatter of one input pixel through the transposed-convolution
/// geometry (kernel 2s, stride s, padding s/2).
fn conv_t_unit_oracle(w: &Tensor<f64>, s: usize, h: usize, wd: usize, iy: usize, ix: usize) -> Vec<f64> {
    let d = w.shape()[2];
    let k = 2 * s;
    let pad = (s / 2) as isize;
    let (oh, ow) = (h * s, wd * s);
    let mut out = vec![0.0; oh * ow * d];
    for oy in 0..oh as isize {
        for ox in 0..ow as isize {
            let ky = oy + pad - (iy * s) as isize;
            let kx = ox + pad - (ix * s) as isize;
            if (0..k as isize).contains(&ky) && (0..k as isize).contains(&kx) {
                for c in 0..d {
                    out[(oy as usize * ow + ox as usize) * d + c] =
                        w.data()[(ky as usize * k + kx as usize) * d + c];
                }
            }
        }
    }
    out
}

#[test]
fn conv_transpose_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let store = ParamStore::<f64>::new();
    let mut g = Graph::new(&store);
    let x = g.input(rand_tensor(&mut rng, &[3, 2, 4]));
    let w = g.input(Tensor::zeros(&[4, 4, 4]));
    let y = g.conv_transpose2d(x, w, 2).unwrap();
    assert_eq!(g.shape(y), &[6, 4, 4]);
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));

    for s in [2usize, 4] {
        let wt = rand_tensor(&mut rng, &[2 * s, 2 * s, 2]);
        for (iy, ix) in [(0, 0), (1, 2), (3, 3)] {
            let mut xin = Tensor::zeros(&[4, 4, 2]);
            xin.data_mut()[(iy * 4 + ix) * 2] = 1.0;
            xin.data_mut()[(iy * 4 + ix) * 2 + 1] = 1.0;
            let (vx, vw) = (g.input(xin), g.input(wt.clone()));
            let y = g.conv_transpose2d(vx, vw, s).unwrap();
            assert_eq!(g.shape(y), &[4 * s, 4 * s, 2]);
            let want = conv_t_unit_oracle(&wt, s, 4, 4, iy, ix);
            assert_eq!(g.value(y).data(), want.as_slice());
        }
    }

    let w3 = g.input(Tensor::zeros(&[6, 6, 4]));
    assert!(matches!(g.conv_transpose2d(x, w3, 3), Err(NumError::Config(_))));
}

#[test]
fn pointwise_linear_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let store = ParamStore::<f64>::new();
    let mut g = Graph::new(&store);
    let xt = rand_tensor(&mut rng, &[3, 2, 4]);
    let x = g.input(xt.clone());
    let mut eye = Tensor::zeros(&[4, 4]);
    for i in 0..4 {
        eye.data_mut()[i * 5] = 1.0;
    }
    let w = g.input(eye);
    let b = g.input(Tensor::zeros(&[4]));
    let y = g.linear(x, w, Some(b)).unwrap();
    assert_eq!(g.value(y), &xt);

    let w0 = g.input(Tensor::zeros(&[4, 2]));
    let b0 = g.input(Tensor::from_vec(&[2], vec![0.5, -2.0]).unwrap());
    let y = g.linear(x, w0, Some(b0)).unwrap();
    assert_eq!(g.shape(y), &[3, 2, 2]);
    for pair in g.value(y).data().chunks(2) {
        assert_eq!(pair, &[0.5, -2.0]);
    }
    assert!(g.linear(x, b0, None).is_err());
}

#[test]
fn mse_examples() {
    let store = ParamStore::<f64>::new();
    let mut g = Graph::new(&store);
    let a = g.input(Tensor::full(&[2], 1.0));
    let z = g.input(Tensor::zeros(&[2]));
    let l = g.mse(a, a).unwrap();
    assert_eq!(g.value(l).item(), 0.0);
    let l = g.mse(a, z).unwrap();
    assert_eq!(g.value(l).item(), 1.0);
    let bad = g.input(Tensor::zeros(&[3]));
    assert!(g.mse(a, bad).is_err());
}

#[test]
fn every_op_passes_gradient_check_on_random_shapes() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for trial in 0..10 {
        let m = 1 + rng.random_range(1..6);
        let k = 1 + rng.random_range(1..6);
        let n = 1 + rng.random_range(1..6);
        let checks: Vec<(&str, f64)> = vec![
            ("matmul", check_op(vec![rand_tensor(&mut rng, &[m, k]), rand_tensor(&mut rng, &[k, n])], &mut rng, |g, v| g.matmul(v[0], v[1]))),
            ("matmul_nt", check_op(vec![rand_tensor(&mut rng, &[m, k]), rand_tensor(&mut rng, &[n, k])], &mut rng, |g, v| g.matmul_nt(v[0], v[1]))),
            ("linear", check_op(vec![rand_tensor(&mut rng, &[m, 2, k]), rand_tensor(&mut rng, &[k, n]), rand_tensor(&mut rng, &[n])], &mut rng, |g, v| g.linear(v[0], v[1], Some(v[2])))),
            ("gelu", check_op(vec![rand_tensor(&mut rng, &[m, k]).map(|v| 3.0 * v)], &mut rng, |g, v| g.gelu(v[0]))),
            ("layer_norm", check_op(vec![rand_tensor(&mut rng, &[m, k + 2]), rand_tensor(&mut rng, &[k + 2]), rand_tensor(&mut rng, &[k + 2])], &mut rng, |g, v| g.layer_norm(v[0], v[1], v[2]))),
            ("masked_softmax", {
                let mut mask: Vec<bool> = (0..n + 1).map(|_| rng.random_bool(0.7)).collect();
                mask[0] = true;
                check_op(vec![rand_tensor(&mut rng, &[m, n + 1]).map(|v| 2.0 * v)], &mut rng, move |g, v| g.masked_softmax(v[0], &mask))
            }),
            ("attention", {
                let heads = 1 + trial % 2;
                let (l, d) = (m + 1, 2 * heads * (1 + k % 2));
                let mut mask: Vec<bool> = (0..l).map(|_| rng.random_bool(0.7)).collect();
                mask[l - 1] = true;
                check_op(vec![rand_tensor(&mut rng, &[l, d]), rand_tensor(&mut rng, &[l, d]), rand_tensor(&mut rng, &[l, d])], &mut rng, move |g, v| g.attention(v[0], v[1], v[2], &mask, heads))
            }),
            ("maxpool2d", check_op(vec![rand_tensor(&mut rng, &[2 * m, 2 * n, k])], &mut rng, |g, v| g.maxpool2d(v[0], 2))),
            ("transposed_conv2d", {
                let s = if trial % 2 == 0 { 2 } else { 4 };
                check_op(vec![rand_tensor(&mut rng, &[m, n, k]), rand_tensor(&mut rng, &[2 * s, 2 * s, k])], &mut rng, move |g, v| g.conv_transpose2d(v[0], v[1], s))
            }),
            ("mse", check_op(vec![rand_tensor(&mut rng, &[m, n]), rand_tensor(&mut rng, &[m, n])], &mut rng, |g, v| {
                let l = g.mse(v[0], v[1])?;
                g.scale(l, 3.0)
            })),
            ("concat_slice_reshape", check_op(vec![rand_tensor(&mut rng, &[m, k]), rand_tensor(&mut rng, &[n, k])], &mut rng, move |g, v| {
                let c = g.concat_rows(&[v[0], v[1]])?;
                let s = g.slice_rows(c, 1, m + n - 1)?;
                let r = g.reshape(s, &[(m + n - 1) * k])?;
                g.sum(&[r, r])
            })),
        ];
        for (name, err) in checks {
            assert!(err < 1e-6, "trial {trial}: {name} relative error {err}");
        }
    }
}

#[test]
fn quadratic_gradient_is_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut store = ParamStore::new();
    let theta = store.insert("theta", rand_tensor(&mut rng, &[1, 9])).unwrap();
    let report = grad_check(&mut store, GRAD_CHECK_EPS, &mut rng, |_| {}, |g| {
        let t = g.param(theta);
        g.matmul_nt(t, t)
    })
    .unwrap();
    assert!(report.max_rel_err() < 1e-8, "{report:?}");

    let mut g = Graph::new(&store);
    let t = g.param(theta);
    let loss = g.matmul_nt(t, t).unwrap();
    let grads = g.backward(loss).unwrap();
    let want = store.value(theta).map(|v| 2.0 * v);
    assert!(grads.get(theta).unwrap().max_abs_diff(&want) < 1e-15);
}

#[test]
fn corrupted_backward_is_detected() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut store = ParamStore::new();
    let x = store.insert("x", rand_tensor(&mut rng, &[3, 4])).unwrap();
    let w = store.insert("w", rand_tensor(&mut rng, &[4, 2])).unwrap();
    let report = grad_check(
        &mut store,
        GRAD_CHECK_EPS,
        &mut rng,
        |g| g.inject_fault(BackwardFault::ScaleLinearWeightGrad(1.5)),
        |g| {
            let (vx, vw) = (g.param(x), g.param(w));
            let y = g.linear(vx, vw, None)?;
            let z = g.input(Tensor::zeros(g.shape(y)));
            g.mse(y, z)
        },
    )
    .unwrap();
    assert!(report.get("w").unwrap().max_rel_err > 1e-2);
    assert!(report.get("x").unwrap().max_rel_err < 1e-6);
}

#[test]
fn non_finite_loss_aborts_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut store = ParamStore::new();
    let x = store.insert("x", Tensor::full(&[2], f64::MAX)).unwrap();
    let result = grad_check(&mut store, GRAD_CHECK_EPS, &mut rng, |_| {}, |g| {
        let v = g.param(x);
        let z = g.input(Tensor::zeros(&[2]));
        g.mse(v, z)
    });
    assert!(matches!(result, Err(NumError::GradCheck(_))));
}

#[test]
fn backward_visits_nodes_in_reverse_execution_order() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let mut store = ParamStore::new();
    let a = store.insert("a", rand_tensor(&mut rng, &[3, 3])).unwrap();
    let mut g = Graph::new(&store);
    let va = g.param(a);
    let b = g.gelu(va).unwrap();
    let c = g.matmul(b, va).unwrap();
    let d = g.add(c, b).unwrap();
    let loss = g.sum_all(d).unwrap();
    let grads = g.backward(loss).unwrap();
    let order = &grads.visit_order;
    assert_eq!(order, &vec![loss.index(), d.index(), c.index(), b.index(), va.index()]);
}

#[test]
fn operations_are_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let mut store = ParamStore::new();
        let q = store.insert("q", rand_tensor(&mut rng, &[6, 4])).unwrap();
        let mut g = Graph::new(&store);
        let vq = g.param(q);
        let att = g.attention(vq, vq, vq, &[true, true, false, true, true, true], 2).unwrap();
        let loss = g.sum_all(att).unwrap();
        (g.value(att).clone(), g.backward(loss).unwrap().get(q).unwrap().clone())
    };
    assert_eq!(run(), run());
}

#[test]
fn single_precision_attention_ignores_masked_values() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let store = ParamStore::<f32>::new();
    let base = rand_tensor(&mut rng, &[6, 4]).cast::<f32>();
    let mask = [true, true, true, false, false, false];
    let run = |noise: f32| {
        let mut v = base.clone();
        for x in &mut v.data_mut()[12..] {
            *x += noise;
        }
        let mut g = Graph::new(&store);
        let x = g.input(v);
        let att = g.attention(x, x, x, &mask, 2).unwrap();
        g.value(att).data()[..12].to_vec()
    };
    assert_eq!(run(0.0), run(3.7));
}

#[test]
fn fast_exp_f32_tracks_libm() {
    let mut worst = 0.0f64;
    let mut x = -87.0f32;
    while x < 88.0 {
        let (a, b) = (x.fast_exp() as f64, (x as f64).exp());
        worst = worst.max(((a - b) / b).abs());
        x += 0.0137;
    }
    assert!(worst < 5e-7, "worst relative error {worst}");
    assert_eq!((-1e9f32).fast_exp(), 0.0);
    assert_eq!((-100.0f32).fast_exp(), 0.0);
    assert_eq!(0.0f32.fast_exp(), 1.0);
    for u in [-30.0f32, -2.0, -0.3, 0.0, 0.01, 1.5, 40.0] {
        assert!((u.fast_tanh() - u.tanh()).abs() < 2e-7, "tanh({u})");
    }
}
