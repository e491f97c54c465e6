//! Architectural blocks: one-squeeze multi-excitation gating, pooled
//! feature heads and the merge of the last two stages into `U^G`.

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::pooling::Pooling;
use crate::tensor::Tensor;

/// Momentum of batch-norm running statistics.
pub const BN_MOMENTUM: f64 = 0.1;

/// Default squeeze reduction ratio of the gating bottleneck.
pub const DEFAULT_REDUCTION: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Uniform initialization in `±gain·√(3 / fan_in)`, i.e. variance
/// `gain² / fan_in`.
pub fn fan_in_uniform<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, gain: f64, rng: &mut R) -> Tensor {
    let bound = gain * (3.0 / fan_in as f64).sqrt();
    Tensor::uniform(shape, -bound, bound, rng)
}

/// Affine parameters and running statistics of one batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormParams {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
}

impl BatchNormParams {
    pub fn new(channels: usize) -> Self {
        BatchNormParams {
            gamma: Tensor::ones(&[channels]),
            beta: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::ones(&[channels]),
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.numel()
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BatchNormVars {
    pub gamma: Var,
    pub beta: Var,
}

impl BatchNormVars {
    pub fn bind(g: &mut Graph, p: &BatchNormParams) -> Self {
        BatchNormVars { gamma: g.param(p.gamma.clone()), beta: g.param(p.beta.clone()) }
    }
}

/// Batch norm; in train mode the running statistics in `state` are updated.
pub fn batch_norm(g: &mut Graph, x: Var, vars: &BatchNormVars, state: &mut BatchNormParams, mode: Mode) -> Result<Var> {
    match mode {
        Mode::Train => {
            let (y, stats) = g.batch_norm_train(x, vars.gamma, vars.beta)?;
            let rm = state.running_mean.data_mut();
            for (r, m) in rm.iter_mut().zip(&stats.mean) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * m;
            }
            let rv = state.running_var.data_mut();
            for (r, v) in rv.iter_mut().zip(&stats.var_unbiased) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v;
            }
            Ok(y)
        }
        Mode::Eval => g.batch_norm_eval(
            x,
            vars.gamma,
            vars.beta,
            state.running_mean.data(),
            state.running_var.data(),
        ),
    }
}

/// Gating weights of one multi-excitation block: per excitation a
/// bottleneck `W1: [C/r × C]` followed by `W2: [C × C/r]`, no biases.
#[derive(Clone, Debug, PartialEq)]
pub struct OsmeParams {
    pub w1: Vec<Tensor>,
    pub w2: Vec<Tensor>,
    pub reduction: usize,
}

impl OsmeParams {
    pub fn new<R: Rng + ?Sized>(channels: usize, excitations: usize, reduction: usize, rng: &mut R) -> Result<Self> {
        if excitations == 0 {
            return Err(Error::config("at least one excitation is required"));
        }
        if reduction == 0 || channels % reduction != 0 {
            return Err(Error::config(format!("{channels} channels not divisible by reduction {reduction}")));
        }
        let hidden = channels / reduction;
        let mut w1 = Vec::with_capacity(excitations);
        let mut w2 = Vec::with_capacity(excitations);
        for _ in 0..excitations {
            w1.push(fan_in_uniform(&[hidden, channels], channels, 1.0, rng));
            w2.push(fan_in_uniform(&[channels, hidden], hidden, 1.0, rng));
        }
        Ok(OsmeParams { w1, w2, reduction })
    }

    /// Build from explicit weights (shapes validated).
    pub fn from_weights(w1: Vec<Tensor>, w2: Vec<Tensor>) -> Result<Self> {
        if w1.is_empty() || w1.len() != w2.len() {
            return Err(Error::dim("need one W1 and one W2 per excitation"));
        }
        let (hidden, channels) = w1[0].dims2()?;
        for (a, b) in w1.iter().zip(&w2) {
            if a.shape() != [hidden, channels] || b.shape() != [channels, hidden] {
                return Err(Error::dim(format!("gating weights {:?} / {:?}", a.shape(), b.shape())));
            }
        }
        Ok(OsmeParams { w1, w2, reduction: channels / hidden })
    }

    pub fn excitations(&self) -> usize {
        self.w1.len()
    }

    pub fn channels(&self) -> usize {
        self.w1[0].shape()[1]
    }
}

#[derive(Clone, Debug)]
pub struct OsmeVars {
    pub w1: Vec<Var>,
    pub w2: Vec<Var>,
    pub channels: usize,
}

impl OsmeVars {
    pub fn bind(g: &mut Graph, p: &OsmeParams) -> Self {
        let mut w1 = Vec::new();
        let mut w2 = Vec::new();
        for (a, b) in p.w1.iter().zip(&p.w2) {
            w1.push(g.param(a.clone()));
            w2.push(g.param(b.clone()));
        }
        OsmeVars { w1, w2, channels: p.channels() }
    }
}

/// Gating coefficients `m^p = σ(W2 relu(W1 z))` for every excitation, where
/// `z` is the spatial mean of `u`. Each entry is `[N×C]`.
pub fn osme_gates(g: &mut Graph, u: Var, params: &OsmeVars) -> Result<Vec<Var>> {
    let (_, c, _, _) = g.value(u).dims4()?;
    if c != params.channels {
        return Err(Error::dim(format!("OSME expects {} channels, input has {c}", params.channels)));
    }
    let z = g.gap(u)?;
    let mut gates = Vec::with_capacity(params.w1.len());
    for (&w1, &w2) in params.w1.iter().zip(&params.w2) {
        let w1t = g.transpose(w1)?;
        let hidden = g.matmul(z, w1t)?;
        let hidden = g.relu(hidden);
        let w2t = g.transpose(w2)?;
        let logits = g.matmul(hidden, w2t)?;
        gates.push(g.sigmoid(logits));
    }
    Ok(gates)
}

/// One squeeze, `P` excitations: returns `U_p = m^p ⊙ U` (channel-wise) for
/// every excitation, each shaped like `u`.
pub fn osme_forward(g: &mut Graph, u: Var, params: &OsmeVars) -> Result<Vec<Var>> {
    let gates = osme_gates(g, u, params)?;
    gates.into_iter().map(|m| g.channel_scale(u, m)).collect()
}

/// Pool `U_p` to `[N×C]`, then optionally ℓ2-normalize each row.
pub fn pooled_head(g: &mut Graph, u_p: Var, pooling: &dyn Pooling, normalize: bool) -> Result<Var> {
    let pooled = pooling.pool(g, u_p)?;
    if normalize {
        g.l2_normalize(pooled)
    } else {
        Ok(pooled)
    }
}

/// Filters of the stage merge: a 1×1 reduction `K1: [C₁×C₂×1×1]`, a 3×3
/// smoothing `K2: [C₁×C₁×3×3]` (pad 1) and a trailing batch norm.
#[derive(Clone, Debug, PartialEq)]
pub struct FpnParams {
    pub k1: Tensor,
    pub k2: Tensor,
    pub bn: BatchNormParams,
}

impl FpnParams {
    pub fn new<R: Rng + ?Sized>(c_top: usize, c_mid: usize, rng: &mut R) -> Self {
        FpnParams {
            k1: fan_in_uniform(&[c_mid, c_top, 1, 1], c_top, 1.0, rng),
            k2: fan_in_uniform(&[c_mid, c_mid, 3, 3], 9 * c_mid, 1.0, rng),
            bn: BatchNormParams::new(c_mid),
        }
    }

    pub fn from_filters(k1: Tensor, k2: Tensor) -> Result<Self> {
        let (c_mid, _, kh, kw) = k1.dims4()?;
        if (kh, kw) != (1, 1) || k2.shape() != [c_mid, c_mid, 3, 3] {
            return Err(Error::dim(format!("merge filters {:?} / {:?}", k1.shape(), k2.shape())));
        }
        Ok(FpnParams { k1, k2, bn: BatchNormParams::new(c_mid) })
    }

    pub fn mid_channels(&self) -> usize {
        self.k1.shape()[0]
    }

    pub fn top_channels(&self) -> usize {
        self.k1.shape()[1]
    }
}

#[derive(Clone, Copy, Debug)]
pub struct FpnVars {
    pub k1: Var,
    pub k2: Var,
    pub bn: BatchNormVars,
}

impl FpnVars {
    pub fn bind(g: &mut Graph, p: &FpnParams) -> Self {
        FpnVars { k1: g.param(p.k1.clone()), k2: g.param(p.k2.clone()), bn: BatchNormVars::bind(g, &p.bn) }
    }
}

/// `BN(K2 ∗ (U_mid + Bilinear×2(K1 ∗ U_top)))`.
pub fn fpn_merge(
    g: &mut Graph,
    u_mid: Var,
    u_top: Var,
    vars: &FpnVars,
    state: &mut BatchNormParams,
    mode: Mode,
) -> Result<Var> {
    let (n1, c1, h1, w1) = g.value(u_mid).dims4()?;
    let (n2, c2, h2, w2) = g.value(u_top).dims4()?;
    if n1 != n2 || h1 != 2 * h2 || w1 != 2 * w2 {
        return Err(Error::dim(format!(
            "merge needs a spatial ratio of exactly 2: mid {:?} vs top {:?}",
            [n1, c1, h1, w1],
            [n2, c2, h2, w2]
        )));
    }
    let k1 = g.shape(vars.k1).to_vec();
    if k1[1] != c2 || k1[0] != c1 {
        return Err(Error::dim(format!("K1 {k1:?} cannot map {c2} channels onto {c1}")));
    }
    let reduced = g.conv2d(u_top, vars.k1, 1, 0)?;
    let up = g.upsample2x(reduced)?;
    let merged = g.add(u_mid, up)?;
    let smoothed = g.conv2d(merged, vars.k2, 1, 1)?;
    batch_norm(g, smoothed, &vars.bn, state, mode)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pooling;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn zero_gates_halve_the_input() {
        let mut r = rng(1);
        let u = Tensor::uniform(&[2, 32, 3, 3], -1.0, 1.0, &mut r);
        let params = OsmeParams::from_weights(
            vec![Tensor::zeros(&[2, 32]); 2],
            vec![Tensor::zeros(&[32, 2]); 2],
        )
        .unwrap();
        let mut g = Graph::new();
        let uv = g.constant(u.clone());
        let vars = OsmeVars::bind(&mut g, &params);
        for out in osme_forward(&mut g, uv, &vars).unwrap() {
            assert_eq!(g.value(out), &u.map(|v| 0.5 * v));
        }
    }

    #[test]
    fn zero_input_gives_zero_maps() {
        let mut r = rng(2);
        let params = OsmeParams::new(32, 3, 16, &mut r).unwrap();
        let mut g = Graph::new();
        let uv = g.constant(Tensor::zeros(&[1, 32, 2, 2]));
        let vars = OsmeVars::bind(&mut g, &params);
        let outs = osme_forward(&mut g, uv, &vars).unwrap();
        assert_eq!(outs.len(), 3);
        for o in outs {
            assert!(g.value(o).data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn channel_mismatch_is_rejected() {
        let mut r = rng(3);
        let params = OsmeParams::new(32, 2, 16, &mut r).unwrap();
        let mut g = Graph::new();
        let uv = g.constant(Tensor::zeros(&[1, 16, 2, 2]));
        let vars = OsmeVars::bind(&mut g, &params);
        assert!(matches!(osme_forward(&mut g, uv, &vars), Err(Error::Dimension(_))));
        assert!(OsmeParams::new(30, 2, 16, &mut r).is_err());
        assert!(OsmeParams::new(32, 0, 16, &mut r).is_err());
    }

    #[test]
    fn pooled_head_constant_map() {
        let mut g = Graph::new();
        for c in [2.0, -3.0] {
            let u = g.constant(Tensor::full(&[1, 4, 3, 3], c));
            let gap = pooling::lookup("gap").unwrap();
            let f = pooled_head(&mut g, u, gap.as_ref(), true).unwrap();
            for &v in g.value(f).data() {
                assert!((v - c / (c.abs() * 2.0)).abs() < 1e-15);
            }
            let raw = pooled_head(&mut g, u, gap.as_ref(), false).unwrap();
            assert!(g.value(raw).data().iter().all(|&v| v == c));
        }
    }

    #[test]
    fn gmp_head_of_peaked_map() {
        let mut data = vec![0.0; 2 * 9];
        data[4] = 7.0;
        data[9 + 2] = 5.0;
        let mut g = Graph::new();
        let u = g.constant(Tensor::from_vec(&[1, 2, 3, 3], data));
        let gmp = pooling::lookup("gmp").unwrap();
        let f = pooled_head(&mut g, u, gmp.as_ref(), false).unwrap();
        assert_eq!(g.value(f).data(), &[7.0, 5.0]);
    }

    #[test]
    fn merge_rejects_bad_ratio() {
        let mut r = rng(4);
        let params = FpnParams::new(8, 4, &mut r);
        let mut state = params.bn.clone();
        let mut g = Graph::new();
        let vars = FpnVars::bind(&mut g, &params);
        let mid = g.constant(Tensor::zeros(&[2, 4, 6, 6]));
        let top = g.constant(Tensor::zeros(&[2, 8, 2, 2]));
        let res = fpn_merge(&mut g, mid, top, &vars, &mut state, Mode::Eval);
        assert!(matches!(res, Err(Error::Dimension(_))));
        let top_wrong_c = g.constant(Tensor::zeros(&[2, 6, 3, 3]));
        let res = fpn_merge(&mut g, mid, top_wrong_c, &vars, &mut state, Mode::Eval);
        assert!(matches!(res, Err(Error::Dimension(_))));
    }

    #[test]
    fn train_mode_updates_running_stats() {
        let mut r = rng(5);
        let mut state = BatchNormParams::new(2);
        let mut g = Graph::new();
        let vars = BatchNormVars::bind(&mut g, &state.clone());
        let x = g.constant(Tensor::uniform(&[4, 2, 3, 3], 1.0, 3.0, &mut r));
        batch_norm(&mut g, x, &vars, &mut state, Mode::Train).unwrap();
        assert!(state.running_mean.data().iter().all(|&m| m > 0.1 && m < 0.3));
        let before = state.clone();
        batch_norm(&mut g, x, &vars, &mut state, Mode::Eval).unwrap();
        assert_eq!(before, state);
    }
}
