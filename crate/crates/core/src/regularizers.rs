//! Loss terms: classification data term, the cross-semantic correlation
//! regularizer, the cross-layer KL regularizer and the weighted objective.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};

/// `S` (P×P) and the per-excitation batch means (P×C) it is built from.
#[derive(Clone, Copy, Debug)]
pub struct CorrelationMatrix {
    pub s: Var,
    pub means: Var,
}

/// `S[p,p'] = (1/N²) Σ_{n,n'} ⟨f_{p,n}, f_{p',n'}⟩`, computed as the Gram
/// matrix of per-excitation batch means.
pub fn correlation_matrix(g: &mut Graph, features: &[Var]) -> Result<CorrelationMatrix> {
    let first = *features.first().ok_or_else(|| Error::dim("correlation of zero excitations"))?;
    let shape = g.shape(first).to_vec();
    if shape.len() != 2 {
        return Err(Error::dim(format!("pooled features must be [N×C], got {shape:?}")));
    }
    let mut rows = Vec::with_capacity(features.len());
    for &f in features {
        if g.shape(f) != shape.as_slice() {
            return Err(Error::dim(format!("feature shapes {:?} vs {shape:?}", g.shape(f))));
        }
        rows.push(g.mean_rows(f)?);
    }
    let means = g.concat_rows(&rows)?;
    let means_t = g.transpose(means)?;
    let s = g.matmul(means, means_t)?;
    Ok(CorrelationMatrix { s, means })
}

/// `½(‖S‖_F² − 2‖diag S‖²)`.
pub fn c3s_loss(g: &mut Graph, s: &CorrelationMatrix) -> Result<Var> {
    g.c3s(s.s)
}

/// `(1/N) Σ KL(target_n ‖ input_n)`.
pub fn kl_regularizer(g: &mut Graph, target: Var, input: Var, stop_target: bool) -> Result<Var> {
    g.kl_div(target, input, stop_target)
}

pub fn cross_entropy(g: &mut Graph, probs: Var, labels: &[usize]) -> Result<Var> {
    g.cross_entropy(probs, labels)
}

/// Weights of the objective. `gamma`/`lambda` scale the grouped
/// correlation and cross-layer terms; the per-stage weights live inside.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub gamma: f64,
    pub gamma1: f64,
    pub gamma2: f64,
    pub gamma3: f64,
    pub lambda: f64,
    pub lambda1: f64,
    pub lambda2: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { gamma: 1.0, gamma1: 1.0, gamma2: 1.0, gamma3: 1.0, lambda: 1.0, lambda1: 1.0, lambda2: 1.0 }
    }
}

impl LossWeights {
    pub fn zero() -> Self {
        LossWeights { gamma: 0.0, gamma1: 0.0, gamma2: 0.0, gamma3: 0.0, lambda: 0.0, lambda1: 0.0, lambda2: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.gamma, self.gamma1, self.gamma2, self.gamma3, self.lambda, self.lambda1, self.lambda2];
        if all.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::config(format!("loss weights must be finite and non-negative: {self:?}")));
        }
        Ok(())
    }

    /// Weight applied to the correlation term of stage `L`, `L−1`, `G`.
    pub fn c3s_weight(&self, stage: usize) -> f64 {
        self.gamma * [self.gamma1, self.gamma2, self.gamma3][stage]
    }

    /// Weight applied to `KL(Pr_L‖Pr_{L−1})` (0) or `KL(Pr_L‖Pr_G)` (1).
    pub fn kl_weight(&self, which: usize) -> f64 {
        self.lambda * [self.lambda1, self.lambda2][which]
    }
}

/// Everything the objective may consume. Missing pieces drop their terms.
#[derive(Clone, Copy, Debug, Default)]
pub struct ObjectiveInputs {
    /// Correlation matrices for stages `L`, `L−1` and `G`.
    pub s: [Option<CorrelationMatrix>; 3],
    /// Class distributions of the `L`, `L−1` and `G` heads.
    pub pr: [Option<Var>; 3],
}

/// The objective and its unweighted components.
#[derive(Clone, Copy, Debug)]
pub struct Objective {
    pub total: Var,
    pub data: Var,
    pub c3s: [Option<Var>; 3],
    pub kl: [Option<Var>; 2],
}

/// `data + γ Σ γᵢ c3s(Sᵢ) + λ (λ₁ KL(Pr_L‖Pr_{L−1}) + λ₂ KL(Pr_L‖Pr_G))`.
/// `Pr_L` is the reference distribution of both KL terms.
pub fn total_loss(
    g: &mut Graph,
    data: Var,
    inputs: &ObjectiveInputs,
    weights: &LossWeights,
    stop_target: bool,
) -> Result<Objective> {
    weights.validate()?;
    let mut total = data;
    let mut c3s = [None; 3];
    for (i, s) in inputs.s.iter().enumerate() {
        if let Some(s) = s {
            let term = c3s_loss(g, s)?;
            let weighted = g.scale(term, weights.c3s_weight(i));
            total = g.add(total, weighted)?;
            c3s[i] = Some(term);
        }
    }
    let mut kl = [None; 2];
    if let Some(pr_l) = inputs.pr[0] {
        for (which, other) in [inputs.pr[1], inputs.pr[2]].into_iter().enumerate() {
            if let Some(other) = other {
                let term = kl_regularizer(g, pr_l, other, stop_target)?;
                let weighted = g.scale(term, weights.kl_weight(which));
                total = g.add(total, weighted)?;
                kl[which] = Some(term);
            }
        }
    }
    if !g.value(total).is_finite() {
        return Err(Error::Numerical("objective is not finite".into()));
    }
    Ok(Objective { total, data, c3s, kl })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use approx::assert_abs_diff_eq;

    fn c3s_of(s: Tensor) -> f64 {
        let mut g = Graph::new();
        let v = g.constant(s);
        let out = g.c3s(v).unwrap();
        g.value(out).item()
    }

    #[test]
    fn c3s_closed_forms() {
        assert_eq!(c3s_of(Tensor::eye(2)), -1.0);
        assert_eq!(c3s_of(Tensor::ones(&[2, 2])), 0.0);
        assert_eq!(c3s_of(Tensor::zeros(&[3, 3])), 0.0);
    }

    #[test]
    fn correlation_examples() {
        let mut g = Graph::new();
        let unit = Tensor::from_vec(&[1, 3], vec![0.6, 0.0, 0.8]);
        let f1 = g.constant(unit.clone());
        let f2 = g.constant(unit);
        let s = correlation_matrix(&mut g, &[f1, f2]).unwrap();
        for &v in g.value(s.s).data() {
            assert_abs_diff_eq!(v, 1.0, epsilon = 1e-15);
        }

        let e = g.constant(Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]));
        let z = g.constant(Tensor::zeros(&[2, 2]));
        let s = correlation_matrix(&mut g, &[e, z]).unwrap();
        assert_eq!(g.value(s.s).data(), &[0.5, 0.0, 0.0, 0.0]);
        assert_eq!(g.shape(s.means), &[2, 2]);
    }

    #[test]
    fn correlation_rejects_mismatched_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[3, 3]));
        assert!(matches!(correlation_matrix(&mut g, &[a, b]), Err(Error::Dimension(_))));
        assert!(correlation_matrix(&mut g, &[]).is_err());
    }

    #[test]
    fn kl_and_cross_entropy_closed_forms() {
        let mut g = Graph::new();
        let t = g.constant(Tensor::from_vec(&[1, 2], vec![1.0, 0.0]));
        let s = g.constant(Tensor::from_vec(&[1, 2], vec![0.5, 0.5]));
        let kl = kl_regularizer(&mut g, t, s, false).unwrap();
        assert_abs_diff_eq!(g.value(kl).item(), std::f64::consts::LN_2, epsilon = 1e-12);
        let same = kl_regularizer(&mut g, s, s, false).unwrap();
        assert_eq!(g.value(same).item(), 0.0);

        let uniform = g.constant(Tensor::full(&[3, 4], 0.25));
        let ce = cross_entropy(&mut g, uniform, &[0, 1, 3]).unwrap();
        assert_abs_diff_eq!(g.value(ce).item(), 4f64.ln(), epsilon = 1e-12);
        let onehot = g.constant(Tensor::from_vec(&[1, 3], vec![0.0, 1.0, 0.0]));
        let ce = cross_entropy(&mut g, onehot, &[1]).unwrap();
        assert_eq!(g.value(ce).item(), 0.0);
        let half = g.constant(Tensor::from_vec(&[2, 2], vec![0.5, 0.5, 0.5, 0.5]));
        let ce = cross_entropy(&mut g, half, &[0, 1]).unwrap();
        assert_abs_diff_eq!(g.value(ce).item(), std::f64::consts::LN_2, epsilon = 1e-12);
    }

    #[test]
    fn zero_weights_leave_the_data_term() {
        let mut g = Graph::new();
        let data = g.constant(Tensor::scalar(1.25));
        let f = g.constant(Tensor::from_vec(&[2, 2], vec![0.6, 0.8, 1.0, 0.0]));
        let h = g.constant(Tensor::from_vec(&[2, 2], vec![0.0, 1.0, 0.8, 0.6]));
        let s = correlation_matrix(&mut g, &[f, h]).unwrap();
        let p = g.constant(Tensor::from_vec(&[1, 2], vec![0.3, 0.7]));
        let q = g.constant(Tensor::from_vec(&[1, 2], vec![0.6, 0.4]));
        let inputs = ObjectiveInputs { s: [Some(s), Some(s), Some(s)], pr: [Some(p), Some(q), Some(q)] };
        let obj = total_loss(&mut g, data, &inputs, &LossWeights::zero(), false).unwrap();
        assert_eq!(g.value(obj.total).item(), 1.25);
        assert!(obj.c3s.iter().all(Option::is_some) && obj.kl.iter().all(Option::is_some));
    }

    #[test]
    fn negative_weights_are_rejected() {
        let w = LossWeights { gamma2: -0.1, ..LossWeights::default() };
        assert!(w.validate().is_err());
    }
}
