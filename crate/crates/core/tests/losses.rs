use approx::assert_abs_diff_eq;
use crossx_core::model::combined_prediction;
use crossx_core::regularizers::{self, correlation_matrix, LossWeights, ObjectiveInputs};
use crossx_core::{Graph, Tensor};

fn c3s_of(s: Tensor) -> f64 {
    let mut g = Graph::new();
    let v = g.constant(s);
    let loss = g.c3s(v).unwrap();
    g.value(loss).item()
}

#[test]
fn c3s_of_identity_is_minus_one() {
    assert_abs_diff_eq!(c3s_of(Tensor::eye(2)), -1.0, epsilon = 1e-15);
}

#[test]
fn c3s_of_all_ones_is_zero() {
    assert_abs_diff_eq!(c3s_of(Tensor::ones(&[2, 2])), 0.0, epsilon = 1e-15);
}

#[test]
fn c3s_rejects_non_square() {
    let mut g = Graph::new();
    let v = g.constant(Tensor::ones(&[2, 3]));
    assert!(g.c3s(v).is_err());
}

#[test]
fn kl_of_certain_against_uniform_is_ln2() {
    let mut g = Graph::new();
    let p = g.constant(Tensor::from_vec(&[1, 2], vec![1.0, 0.0]));
    let q = g.constant(Tensor::from_vec(&[1, 2], vec![0.5, 0.5]));
    let kl = regularizers::kl_regularizer(&mut g, p, q, false).unwrap();
    assert_abs_diff_eq!(g.value(kl).item(), std::f64::consts::LN_2, epsilon = 1e-12);
}

#[test]
fn kl_averages_over_rows() {
    let mut g = Graph::new();
    let p = g.constant(Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.5, 0.5]));
    let q = g.constant(Tensor::from_vec(&[2, 2], vec![0.5, 0.5, 0.5, 0.5]));
    let kl = g.kl_div(p, q, true).unwrap();
    assert_abs_diff_eq!(g.value(kl).item(), std::f64::consts::LN_2 / 2.0, epsilon = 1e-12);
}

#[test]
fn kl_rejects_rows_that_are_not_distributions() {
    let mut g = Graph::new();
    let p = g.constant(Tensor::from_vec(&[1, 2], vec![0.7, 0.7]));
    let q = g.constant(Tensor::from_vec(&[1, 2], vec![0.5, 0.5]));
    assert!(g.kl_div(p, q, false).is_err());
}

#[test]
fn cross_entropy_of_uniform_over_four_is_ln4() {
    let mut g = Graph::new();
    let p = g.constant(Tensor::full(&[3, 4], 0.25));
    let ce = regularizers::cross_entropy(&mut g, p, &[0, 3, 1]).unwrap();
    assert_abs_diff_eq!(g.value(ce).item(), 4f64.ln(), epsilon = 1e-12);
}

#[test]
fn cross_entropy_rejects_out_of_range_labels() {
    let mut g = Graph::new();
    let p = g.constant(Tensor::full(&[1, 4], 0.25));
    assert!(g.cross_entropy(p, &[4]).is_err());
}

#[test]
fn softmax_of_three_and_zero() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::from_vec(&[1, 2], vec![3.0, 0.0]));
    let p = g.softmax(x).unwrap();
    assert_abs_diff_eq!(g.value(p).data()[0], 0.952574, epsilon = 1e-6);
    assert_abs_diff_eq!(g.value(p).data()[1], 0.047426, epsilon = 1e-6);
}

#[test]
fn combined_prediction_sums_logits_before_softmax() {
    let mut g = Graph::new();
    let heads: Vec<Option<_>> = (0..3).map(|_| Some(g.constant(Tensor::from_vec(&[1, 2], vec![3.0, 0.0])))).collect();
    let p = combined_prediction(&mut g, &heads).unwrap();
    assert_abs_diff_eq!(g.value(p).data()[0], 0.999877, epsilon = 1e-6);
    assert_abs_diff_eq!(g.value(p).data()[1], 0.000123, epsilon = 1e-6);
}

#[test]
fn combined_prediction_skips_absent_heads() {
    let mut g = Graph::new();
    let l = g.constant(Tensor::from_vec(&[1, 2], vec![3.0, 0.0]));
    let p = combined_prediction(&mut g, &[Some(l), None, None]).unwrap();
    assert_abs_diff_eq!(g.value(p).data()[0], 0.952574, epsilon = 1e-6);
}

#[test]
fn correlation_matches_pairwise_sum() {
    // Two excitations, three samples, two channels.
    let f = [
        vec![0.6, 0.8, 1.0, 0.0, 0.0, 1.0],
        vec![0.0, 1.0, 0.8, 0.6, 0.6, 0.8],
    ];
    let mut g = Graph::new();
    let vars: Vec<_> = f.iter().map(|d| g.constant(Tensor::from_vec(&[3, 2], d.clone()))).collect();
    let s = correlation_matrix(&mut g, &vars).unwrap();
    let n = 3;
    for p in 0..2 {
        for q in 0..2 {
            let mut acc = 0.0;
            for a in 0..n {
                for b in 0..n {
                    acc += (0..2).map(|c| f[p][a * 2 + c] * f[q][b * 2 + c]).sum::<f64>();
                }
            }
            assert_abs_diff_eq!(g.value(s.s).at2(p, q), acc / (n * n) as f64, epsilon = 1e-12);
        }
    }
}

#[test]
fn objective_adds_weighted_terms() {
    let mut g = Graph::new();
    let data = g.constant(Tensor::scalar(0.5));
    let feats: Vec<_> = (0..2).map(|p| g.constant(Tensor::from_vec(&[1, 2], if p == 0 { vec![1.0, 0.0] } else { vec![0.0, 1.0] }))).collect();
    let s = correlation_matrix(&mut g, &feats).unwrap();
    let pr_l = g.constant(Tensor::from_vec(&[1, 2], vec![1.0, 0.0]));
    let pr_m = g.constant(Tensor::from_vec(&[1, 2], vec![0.5, 0.5]));
    let inputs = ObjectiveInputs { s: [Some(s), None, None], pr: [Some(pr_l), Some(pr_m), None] };
    let weights = LossWeights { gamma: 2.0, gamma1: 0.5, lambda: 3.0, lambda1: 0.5, ..LossWeights::default() };
    let obj = regularizers::total_loss(&mut g, data, &inputs, &weights, true).unwrap();
    // S = I gives c3s = -1; KL = ln 2.
    let expect = 0.5 + 2.0 * 0.5 * -1.0 + 3.0 * 0.5 * std::f64::consts::LN_2;
    assert_abs_diff_eq!(g.value(obj.total).item(), expect, epsilon = 1e-12);
    assert!(obj.c3s[1].is_none() && obj.kl[1].is_none());
}

#[test]
fn negative_weights_are_rejected() {
    let w = LossWeights { lambda2: -0.1, ..LossWeights::default() };
    assert!(w.validate().is_err());
}
