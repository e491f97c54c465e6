use crossx_core::autodiff::{kl_term, softmax_rows};
use crossx_core::kernels::resize_planes;
use crossx_core::{Graph, Tensor};
use proptest::prelude::*;

fn direct_conv(x: &Tensor, k: &Tensor, stride: usize, pad: usize) -> Tensor {
    let (n, c, h, w) = x.dims4().unwrap();
    let (co, _, kh, kw) = k.dims4().unwrap();
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let mut out = Tensor::zeros(&[n, co, oh, ow]);
    for b in 0..n {
        for o in 0..co {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut acc = 0.0;
                    for ci in 0..c {
                        for dy in 0..kh {
                            for dx in 0..kw {
                                let iy = (y * stride + dy) as isize - pad as isize;
                                let ix = (xx * stride + dx) as isize - pad as isize;
                                if (0..h as isize).contains(&iy) && (0..w as isize).contains(&ix) {
                                    acc += x.at4(b, ci, iy as usize, ix as usize) * k.at4(o, ci, dy, dx);
                                }
                            }
                        }
                    }
                    out.data_mut()[((b * co + o) * oh + y) * ow + xx] = acc;
                }
            }
        }
    }
    out
}

fn vec_in(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-2.0f64..2.0, len)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn bilinear_resize_is_linear(h in 1usize..5, w in 1usize..5, a in -3.0f64..3.0, b in -3.0f64..3.0, seed in any::<u64>()) {
        let n = h * w;
        let mut r = seed;
        let mut next = || { r = r.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407); (r >> 11) as f64 / (1u64 << 53) as f64 - 0.5 };
        let x: Vec<f64> = (0..n).map(|_| next()).collect();
        let y: Vec<f64> = (0..n).map(|_| next()).collect();
        let mix: Vec<f64> = x.iter().zip(&y).map(|(p, q)| a * p + b * q).collect();
        let rx = resize_planes(&x, 1, h, w, 2 * h, 2 * w);
        let ry = resize_planes(&y, 1, h, w, 2 * h, 2 * w);
        let rm = resize_planes(&mix, 1, h, w, 2 * h, 2 * w);
        for i in 0..rm.len() {
            prop_assert!((rm[i] - (a * rx[i] + b * ry[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn resize_preserves_constants(h in 1usize..6, w in 1usize..6, c in -5.0f64..5.0) {
        let out = resize_planes(&vec![c; h * w], 1, h, w, 2 * h, 2 * w);
        prop_assert!(out.iter().all(|v| (v - c).abs() < 1e-12));
    }

    #[test]
    fn softmax_rows_are_distributions(v in vec_in(12)) {
        let p = softmax_rows(&v, 4);
        for row in p.chunks(4) {
            prop_assert!(row.iter().all(|&x| x > 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_is_shift_invariant(v in vec_in(5), shift in -50.0f64..50.0) {
        let a = softmax_rows(&v, 5);
        let shifted: Vec<f64> = v.iter().map(|x| x + shift).collect();
        let b = softmax_rows(&shifted, 5);
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn kl_is_non_negative_and_zero_on_itself(u in vec_in(6), v in vec_in(6)) {
        let p = softmax_rows(&u, 6);
        let q = softmax_rows(&v, 6);
        let pq: f64 = p.iter().zip(&q).map(|(&a, &b)| kl_term(a, b)).sum();
        let pp: f64 = p.iter().map(|&a| kl_term(a, a)).sum();
        prop_assert!(pq >= -1e-15);
        prop_assert!(pp.abs() <= 1e-12);
    }

    #[test]
    fn conv_matches_direct_loops(seed in any::<u64>(), stride in 1usize..3, pad in 0usize..2, h in 3usize..7, w in 3usize..7) {
        let mut r = seed;
        let mut next = || { r = r.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407); (r >> 11) as f64 / (1u64 << 53) as f64 - 0.5 };
        let x = Tensor::from_vec(&[2, 2, h, w], (0..4 * h * w).map(|_| next()).collect());
        let k = Tensor::from_vec(&[3, 2, 3, 3], (0..54).map(|_| next()).collect());
        let mut g = Graph::new();
        let (vx, vk) = (g.constant(x.clone()), g.constant(k.clone()));
        let y = g.conv2d(vx, vk, stride, pad).unwrap();
        let expect = direct_conv(&x, &k, stride, pad);
        prop_assert_eq!(g.shape(y), expect.shape());
        prop_assert!(g.value(y).max_abs_diff(&expect) < 1e-12);
    }

    #[test]
    fn matmul_matches_triple_loop(m in 1usize..6, k in 1usize..6, n in 1usize..6, seed in any::<u64>()) {
        let mut r = seed;
        let mut next = || { r = r.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407); (r >> 11) as f64 / (1u64 << 53) as f64 - 0.5 };
        let a = Tensor::from_vec(&[m, k], (0..m * k).map(|_| next()).collect());
        let b = Tensor::from_vec(&[k, n], (0..k * n).map(|_| next()).collect());
        let mut g = Graph::new();
        let (va, vb) = (g.constant(a.clone()), g.constant(b.clone()));
        let y = g.matmul(va, vb).unwrap();
        for i in 0..m {
            for j in 0..n {
                let expect: f64 = (0..k).map(|t| a.at2(i, t) * b.at2(t, j)).sum();
                prop_assert!((g.value(y).at2(i, j) - expect).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn upsample_doubles_extent_with_half_pixel_centres() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::from_vec(&[1, 1, 1, 2], vec![0.0, 4.0]));
    let y = g.upsample2x(x).unwrap();
    assert_eq!(g.shape(y), &[1, 1, 2, 4]);
    // Output centres at 0.25, 0.75, 1.25, 1.75 of a 2-wide input map to
    // source positions -0.25 (clamped), 0.25, 0.75, 1.25 (clamped).
    assert_eq!(&g.value(y).data()[..4], &[0.0, 1.0, 3.0, 4.0]);
}

#[test]
fn relu_and_sigmoid_values() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::from_vec(&[3], vec![-1.0, 0.0, 2.0]));
    let r = g.relu(x);
    let s = g.sigmoid(x);
    assert_eq!(g.value(r).data(), &[0.0, 0.0, 2.0]);
    assert!((g.value(s).data()[1] - 0.5).abs() < 1e-15);
    assert!((g.value(s).data()[2] - 1.0 / (1.0 + (-2f64).exp())).abs() < 1e-15);
}

#[test]
fn batch_norm_normalizes_each_channel() {
    let mut g = Graph::new();
    let data: Vec<f64> = (0..16).map(|i| (i * i) as f64 * 0.1).collect();
    let x = g.constant(Tensor::from_vec(&[2, 2, 2, 2], data));
    let gamma = g.constant(Tensor::ones(&[2]));
    let beta = g.constant(Tensor::zeros(&[2]));
    let (y, _) = g.batch_norm_train(x, gamma, beta).unwrap();
    let v = g.value(y);
    for c in 0..2 {
        let vals: Vec<f64> = (0..2).flat_map(|n| (0..4).map(move |i| (n, i))).map(|(n, i)| v.data()[(n * 2 + c) * 4 + i]).collect();
        let mean = vals.iter().sum::<f64>() / 8.0;
        let var = vals.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 8.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-3, "{var}");
    }
}

#[test]
fn batch_norm_refuses_single_value_channels() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[1, 2, 1, 1]));
    let gamma = g.constant(Tensor::ones(&[2]));
    let beta = g.constant(Tensor::zeros(&[2]));
    assert!(g.batch_norm_train(x, gamma, beta).is_err());
}

#[test]
fn backward_needs_a_scalar_root() {
    let mut g = Graph::new();
    let x = g.param(Tensor::ones(&[2]));
    let y = g.scale(x, 2.0);
    assert!(g.backward(y).is_err());
}
