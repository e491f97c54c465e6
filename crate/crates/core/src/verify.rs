//! Verification suites run by the command line: finite-difference checks
//! of every differentiable op and of the composed losses, and brute-force
//! oracles for the fast kernels.

use std::collections::HashMap;
use std::sync::{Arc, OnceLock};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{kl_term, softmax_rows, Graph, Var, BN_EPS, LOG_EPS};
use crate::blocks::{self, FpnVars, Mode, OsmeVars, BatchNormParams, BatchNormVars};
use crate::config::CrossXConfig;
use crate::error::{Error, Result};
use crate::gradcheck::{grad_check_many, relative_error, DEFAULT_STEP};
use crate::model::{CrossXModel, TensorKind};
use crate::pooling;
use crate::registry::{Named, Registry};
use crate::regularizers;
use crate::tensor::Tensor;
use crate::train::build_objective;

/// Largest accepted relative error of a gradient check.
pub const GRAD_TOLERANCE: f64 = 1e-4;
/// Largest accepted absolute deviation of an oracle comparison.
pub const ORACLE_TOLERANCE: f64 = 1e-10;
/// Environment variable that injects a known fault, for testing the suites.
pub const FAULT_ENV: &str = "CROSSX_INJECT_FAULT";

/// Deliberate defects the suites must catch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Faults {
    /// Flip the sign of the correlation loss's backward rule.
    pub c3s_loss: bool,
}

impl Faults {
    pub fn parse(spec: &str) -> Result<Self> {
        let mut f = Faults::default();
        for part in spec.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            match part {
                "c3s_loss" => f.c3s_loss = true,
                other => return Err(Error::config(format!("unknown fault '{other}' (known: c3s_loss)"))),
            }
        }
        Ok(f)
    }

    pub fn from_env() -> Result<Self> {
        match std::env::var(FAULT_ENV) {
            Ok(v) => Self::parse(&v),
            Err(_) => Ok(Faults::default()),
        }
    }

    fn c3s(&self, g: &mut Graph, s: Var) -> Result<Var> {
        g.c3s_with_sign(s, if self.c3s_loss { -1.0 } else { 1.0 })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub max_error: f64,
    pub tolerance: f64,
    /// Coordinates or cases compared.
    pub samples: usize,
    /// Set when the check could not run at all.
    pub failure: Option<String>,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.failure.is_none() && self.max_error <= self.tolerance
    }
}

/// One named verification.
pub trait Check: Named + Send + Sync {
    fn tolerance(&self) -> f64;
    /// Worst observed error and the number of samples compared.
    fn measure(&self, faults: Faults) -> Result<(f64, usize)>;
}

struct FnCheck {
    name: &'static str,
    tolerance: f64,
    f: fn(Faults) -> Result<(f64, usize)>,
}

impl Named for FnCheck {
    fn name(&self) -> &str {
        self.name
    }
}

impl Check for FnCheck {
    fn tolerance(&self) -> f64 {
        self.tolerance
    }

    fn measure(&self, faults: Faults) -> Result<(f64, usize)> {
        (self.f)(faults)
    }
}

fn registry(kind: &'static str, tolerance: f64, checks: &[(&'static str, fn(Faults) -> Result<(f64, usize)>)]) -> Registry<dyn Check> {
    let mut r: Registry<dyn Check> = Registry::new(kind);
    for &(name, f) in checks {
        r.register(Arc::new(FnCheck { name, tolerance, f })).expect("unique check names");
    }
    r
}

pub fn run_check(check: &dyn Check, faults: Faults) -> CheckResult {
    let (max_error, samples, failure) = match check.measure(faults) {
        Ok((e, n)) if e.is_finite() => (e, n, None),
        Ok((e, n)) => (e, n, Some("non-finite error".to_string())),
        Err(e) => (f64::INFINITY, 0, Some(e.to_string())),
    };
    CheckResult { name: check.name().to_string(), max_error, tolerance: check.tolerance(), samples, failure }
}

pub fn run_suite(suite: &Registry<dyn Check>, faults: Faults) -> Vec<CheckResult> {
    suite.iter().map(|c| run_check(c.as_ref(), faults)).collect()
}

/// Fixed-width table with one line per check.
pub fn format_table(results: &[CheckResult]) -> String {
    let width = results.iter().map(|r| r.name.len()).max().unwrap_or(5).max(5);
    let mut out = format!("{:<width$}  {:>12}  {:>9}  {:>7}  status\n", "check", "max_error", "tolerance", "samples");
    for r in results {
        let status = match (&r.failure, r.passed()) {
            (Some(f), _) => format!("FAIL ({f})"),
            (None, true) => "ok".to_string(),
            (None, false) => "FAIL".to_string(),
        };
        out.push_str(&format!(
            "{:<width$}  {:>12.3e}  {:>9.0e}  {:>7}  {status}\n",
            r.name, r.max_error, r.tolerance, r.samples
        ));
    }
    out
}

fn rng(tag: &str) -> ChaCha8Rng {
    let seed = tag.bytes().fold(0xC0FF_EEu64, |h, b| h.wrapping_mul(131).wrapping_add(b as u64));
    ChaCha8Rng::seed_from_u64(seed)
}

fn uniform(r: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::uniform(shape, -1.0, 1.0, r)
}

/// Values bounded away from zero, for ops with a kink there.
fn away_from_zero(r: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m: f64 = r.gen_range(0.1..1.0);
            if r.gen::<bool>() {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::from_vec(shape, data)
}

/// Scalar readout `Σ y ⊙ R` with a fixed random `R`, so every output
/// coordinate contributes with a distinct weight.
fn readout(g: &mut Graph, y: Var) -> Result<Var> {
    let shape = g.shape(y).to_vec();
    let mut r = rng(&format!("readout{shape:?}"));
    let w = g.constant(uniform(&mut r, &shape));
    let prod = g.mul(y, w)?;
    Ok(g.sum(prod))
}

fn check_grad<F>(f: F, inputs: &[Tensor]) -> Result<(f64, usize)>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let rep = grad_check_many(f, inputs, DEFAULT_STEP, Some(64))?;
    Ok((rep.max_error(), rep.coords_checked))
}

macro_rules! grad_checks {
    ($($name:literal => $body:expr),* $(,)?) => {
        &[$(($name, $body as fn(Faults) -> Result<(f64, usize)>)),*]
    };
}

fn g_add(_: Faults) -> Result<(f64, usize)> {
    let mut r = rng("add");
    check_grad(|g, v| { let y = g.add(v[0], v[1])?; readout(g, y) }, &[uniform(&mut r, &[2, 3]), uniform(&mut r, &[2, 3])])
}

fn g_sub(_: Faults) -> Result<(f64, usize)> {
    let mut r = rng("sub");
    check_grad(|g, v| { let y = g.sub(v[0], v[1])?; readout(g, y) }, &[uniform(&mut r, &[3, 2]), uniform(&mut r, &[3, 2])])
}

fn g_mul(_: Faults) -> Result<(f64, usize)> {
    let mut r = rng("mul");
    check_grad(|g, v| { let y = g.mul(v[0], v[1])?; readout(g, y) }, &[uniform(&mut r, &[2, 4]), uniform(&mut r, &[2, 4])])
}

fn g_scale(_: Faults) -> Result<(f64, usize)> {
    let mut r = rng("scale");
    check_grad(|g, v| { let y = g.scale(v[0], -1.7); readout(g, y) }, &[uniform(&mut r, &[5])])
}

fn g_sum(_: Faults) -> Result<(f64, usize)> {
    let mut r = rng("sum");
    check_grad(|g, v| { let s = g.sum(v[0]); let y = g.mul(s, s)?; Ok(y) }, &[uniform(&mut r, &[2, 3])])
}

fn g_matmul(_: Faults) -> Result<(f64, usize)> {
    let mut r = rng("matmul");
    check_grad(|g, v| { let y = g.matmul(v[0], v[1])?; readout(g, y) }, &[uniform(&mut r, &[3, 4]), uniform(&mut r, &[4, 2])])
}

fn g_transpose(_: Faults) -> Result<(f64, usize)> {
    let mut r = rng("transpose");
    check_grad(|g, v| { let y = g.transpose(v[0])?; readout(g, y) }, &[uniform(&mut r, &[3, 2])])
}

fn g_add_row_bias(_: Faults) -> Result<(f64, usize)> {
    let mut r = rng("bias");
    check_grad(|g, v| { let y = g.add_row_bias(v[0], v[1])?; readout(g, y) }, &[uniform(&mut r, &[3, 4]), uniform(&mut r, &[4])])
}

fn g_concat_rows(_: Faults) -> Result<(f64, usize)> {
    let mut r = rng("concat_rows");
    check_grad(
        |g, v| { let y = g.concat_rows(&[v[0], v[1]])?; readout(g, y) },
        &[uniform(&mut r, &[1, 2, 2, 2]), uniform(&mut r, &[2, 2, 2, 2])],
    )
}

fn g_concat_cols(_: Faults) -> Result<(f64, usize)> {
    let mut r = rng("concat_cols");
    check_grad(|g, v| { let y = g.concat_cols(&[v[0], v[1]])?; readout(g, y) }, &[uniform(&mut r, &[2, 3]), uniform(&mut r, &[2, 1])])
}

fn g_slice_rows(_: Faults) -> Result<(f64, usize)> {
    let mut r = rng("slice_rows");
    check_grad(|g, v| { let y = g.slice_rows(v[0], 1, 2)?; readout(g, y) }, &[uniform(&mut r, &[4, 3])])
}

fn g_reshape(_: Faults) -> Result<(f64, usize)> {
    let mut r = rng("reshape");
    check_grad(|g, v| { let y = g.reshape(v[0], &[3, 2])?; readout(g, y) }, &[uniform(&mut r, &[2, 3])])
}

fn g_mean_rows(_: Faults) -> Result<(f64, usize)> {
    let mut r = rng("mean_rows");
    check_grad(|g, v| { let y = g.mean_rows(v[0])?; readout(g, y) }, &[uniform(&mut r, &[4, 3])])
}

fn g_conv_s1(_: Faults) -> Result<(f64, usize)> {
    let mut r = rng("conv_s1");
    check_grad(
        |g, v| { let y = g.conv2d(v[0], v[1], 1, 1)?; readout(g, y) },
        &[uniform(&mut r, &[2, 2, 5, 4]), uniform(&mut r, &[3, 2, 3, 3])],
    )
}

fn g_conv_s2(_: Faults) -> Result<(f64, usize)> {
    let mut r = rng("conv_s2");
    check_grad(
        |g, v| { let y = g.conv2d(v[0], v[1], 2, 1)?; readout(g, y) },
        &[uniform(&mut r, &[2, 3, 6, 6]), uniform(&mut r, &[2, 3, 3, 3])],
    )
}

fn g_relu(_: Faults) -> Result<(f64, usize)> {
    let mut r = rng("relu");
    check_grad(|g, v| { let y = g.relu(v[0]); readout(g, y) }, &[away_from_zero(&mut r, &[3, 4])])
}

fn g_sigmoid(_: Faults) -> Result<(f64, usize)> {
    let mut r = rng("sigmoid");
    check_grad(|g, v| { let y = g.sigmoid(v[0]); readout(g, y) }, &[uniform(&mut r, &[3, 4]).map(|x| 4.0 * x)])
}

fn g_gap(_: Faults) -> Result<(f64, usize)> {
    let mut r = rng("gap");
    check_grad(|g, v| { let y = g.gap(v[0])?; readout(g, y) }, &[uniform(&mut r, &[2, 3, 3, 2])])
}

fn g_gmp(_: Faults) -> Result<(f64, usize)> {
    let mut r = rng("gmp");
    check_grad(|g, v| { let y = g.gmp(v[0])?; readout(g, y) }, &[uniform(&mut r, &[2, 3, 3, 2])])
}

fn g_channel_scale(_: Faults) -> Result<(f64, usize)> {
    let mut r = rng("channel_scale");
    check_grad(
        |g, v| { let y = g.channel_scale(v[0], v[1])?; readout(g, y) },
        &[uniform(&mut r, &[2, 3, 2, 2]), uniform(&mut r, &[2, 3])],
    )
}

fn g_upsample(_: Faults) -> Result<(f64, usize)> {
    let mut r = rng("upsample");
    check_grad(|g, v| { let y = g.upsample2x(v[0])?; readout(g, y) }, &[uniform(&mut r, &[1, 2, 3, 4])])
}

fn g_batch_norm(_: Faults) -> Result<(f64, usize)> {
    let mut r = rng("batch_norm");
    check_grad(
        |g, v| { let (y, _) = g.batch_norm_train(v[0], v[1], v[2])?; readout(g, y) },
        &[uniform(&mut r, &[3, 2, 2, 3]), uniform(&mut r, &[2]), uniform(&mut r, &[2])],
    )
}

fn g_l2_normalize(_: Faults) -> Result<(f64, usize)> {
    let mut r = rng("l2_normalize");
    check_grad(|g, v| { let y = g.l2_normalize(v[0])?; readout(g, y) }, &[uniform(&mut r, &[3, 4])])
}

fn g_softmax(_: Faults) -> Result<(f64, usize)> {
    let mut r = rng("softmax");
    check_grad(|g, v| { let y = g.softmax(v[0])?; readout(g, y) }, &[uniform(&mut r, &[3, 4]).map(|x| 3.0 * x)])
}

fn g_kl(_: Faults) -> Result<(f64, usize)> {
    let mut r = rng("kl");
    check_grad(
        |g, v| {
            let t = g.softmax(v[0])?;
            let s = g.softmax(v[1])?;
            g.kl_div(t, s, false)
        },
        &[uniform(&mut r, &[3, 4]).map(|x| 2.0 * x), uniform(&mut r, &[3, 4]).map(|x| 2.0 * x)],
    )
}

/// With the target detached only the input side is differentiated, so the
/// target enters as a constant.
fn g_kl_stop(_: Faults) -> Result<(f64, usize)> {
    let mut r = rng("kl_stop");
    let target = Tensor::from_vec(&[3, 4], softmax_rows(uniform(&mut r, &[3, 4]).map(|x| 2.0 * x).data(), 4));
    check_grad(
        move |g, v| {
            let t = g.constant(target.clone());
            let s = g.softmax(v[0])?;
            g.kl_div(t, s, true)
        },
        &[uniform(&mut r, &[3, 4]).map(|x| 2.0 * x)],
    )
}

fn g_cross_entropy(_: Faults) -> Result<(f64, usize)> {
    let mut r = rng("cross_entropy");
    check_grad(
        |g, v| {
            let p = g.softmax(v[0])?;
            g.cross_entropy(p, &[0, 3, 1])
        },
        &[uniform(&mut r, &[3, 4]).map(|x| 2.0 * x)],
    )
}

fn g_c3s(f: Faults) -> Result<(f64, usize)> {
    let mut r = rng("c3s");
    check_grad(move |g, v| f.c3s(g, v[0]), &[uniform(&mut r, &[3, 3])])
}

fn c3s_pooled(f: Faults, mode: &str) -> Result<(f64, usize)> {
    let pool = pooling::lookup(mode)?;
    let mut r = rng(&format!("c3s_pooled_{mode}"));
    let maps: Vec<Tensor> = (0..3).map(|_| uniform(&mut r, &[4, 5, 3, 3])).collect();
    check_grad(
        move |g, v| {
            let mut feats = Vec::new();
            for &u in v {
                feats.push(blocks::pooled_head(g, u, pool.as_ref(), true)?);
            }
            let s = regularizers::correlation_matrix(g, &feats)?;
            f.c3s(g, s.s)
        },
        &maps,
    )
}

fn g_c3s_gap(f: Faults) -> Result<(f64, usize)> {
    c3s_pooled(f, "gap")
}

fn g_c3s_gmp(f: Faults) -> Result<(f64, usize)> {
    c3s_pooled(f, "gmp")
}

fn g_osme(_: Faults) -> Result<(f64, usize)> {
    let mut r = rng("osme");
    let (c, hid) = (4, 2);
    let inputs = [
        uniform(&mut r, &[2, c, 3, 3]),
        uniform(&mut r, &[hid, c]),
        uniform(&mut r, &[c, hid]),
        uniform(&mut r, &[hid, c]),
        uniform(&mut r, &[c, hid]),
    ];
    check_grad(
        move |g, v| {
            let vars = OsmeVars { w1: vec![v[1], v[3]], w2: vec![v[2], v[4]], channels: c };
            let outs = blocks::osme_forward(g, v[0], &vars)?;
            let cat = g.concat_rows(&outs)?;
            readout(g, cat)
        },
        &inputs,
    )
}

fn g_fpn(_: Faults) -> Result<(f64, usize)> {
    let mut r = rng("fpn");
    let inputs = [
        uniform(&mut r, &[2, 2, 4, 4]),
        uniform(&mut r, &[2, 4, 2, 2]),
        uniform(&mut r, &[2, 4, 1, 1]),
        uniform(&mut r, &[2, 2, 3, 3]),
        uniform(&mut r, &[2]),
        uniform(&mut r, &[2]),
    ];
    check_grad(
        |g, v| {
            let vars = FpnVars { k1: v[2], k2: v[3], bn: BatchNormVars { gamma: v[4], beta: v[5] } };
            let mut state = BatchNormParams::new(2);
            let y = blocks::fpn_merge(g, v[0], v[1], &vars, &mut state, Mode::Train)?;
            readout(g, y)
        },
        &inputs,
    )
}

/// Tiny full model used by the end-to-end objective check.
pub fn toy_config() -> Result<CrossXConfig> {
    let mut cfg = CrossXConfig::default();
    cfg.apply_pairs(&[
        ("stage_channels".into(), "4,8".into()),
        ("reduction".into(), "2".into()),
        ("image_size".into(), "16".into()),
        ("classes".into(), "3".into()),
        ("excitations".into(), "2".into()),
        ("batch_size".into(), "2".into()),
    ])?;
    Ok(cfg)
}

fn objective_value(model: &CrossXModel, cfg: &CrossXConfig, x: &Tensor, labels: &[usize], f: Faults) -> Result<f64> {
    let mut m = model.clone();
    let mut g = Graph::new();
    let (obj, _) = build_objective_with(&mut g, &mut m, cfg, x, labels, f)?;
    Ok(g.value(obj).item())
}

fn build_objective_with(
    g: &mut Graph,
    model: &mut CrossXModel,
    cfg: &CrossXConfig,
    x: &Tensor,
    labels: &[usize],
    f: Faults,
) -> Result<(Var, HashMap<String, Var>)> {
    if !f.c3s_loss {
        let obj = build_objective(g, model, cfg, x, labels, Mode::Train)?;
        return Ok((obj.total, obj.forward.binder.vars.into_iter().collect()));
    }
    // Same objective with the faulty correlation loss swapped in.
    let mut plain = cfg.clone();
    plain.use_c3s = false;
    let obj = build_objective(g, model, &plain, x, labels, Mode::Train)?;
    let mut total = obj.total;
    let w = cfg.effective_weights();
    for (s, feats) in obj.forward.features.iter().enumerate() {
        if let Some(feats) = feats {
            let corr = regularizers::correlation_matrix(g, feats)?;
            let term = f.c3s(g, corr.s)?;
            let weighted = g.scale(term, w.c3s_weight(s));
            total = g.add(total, weighted)?;
        }
    }
    Ok((total, obj.forward.binder.vars.into_iter().collect()))
}

fn g_end_to_end(f: Faults) -> Result<(f64, usize)> {
    let cfg = toy_config()?;
    let model = CrossXModel::new(&cfg)?;
    let mut r = rng("end_to_end");
    let x = Tensor::uniform(&[2, 3, 16, 16], 0.0, 1.0, &mut r);
    let labels = [0, 2];

    let mut g = Graph::new();
    let mut m = model.clone();
    let (total, bound) = build_objective_with(&mut g, &mut m, &cfg, &x, &labels, f)?;
    g.backward(total)?;

    let h = DEFAULT_STEP;
    let mut worst: f64 = 0.0;
    let mut count = 0;
    let mut names = Vec::new();
    model.visit(&mut |name, t, kind| {
        if kind == TensorKind::Param {
            names.push((name.to_string(), t.numel()));
        }
    });
    for (name, numel) in names {
        let var = bound.get(&name).ok_or_else(|| Error::contract(format!("{name} not bound")))?;
        let grad = g.grad(*var);
        let stride = numel.div_ceil(6).max(1);
        for j in (0..numel).step_by(stride) {
            let shifted = |delta: f64| -> Result<f64> {
                let mut m = model.clone();
                m.visit_mut(&mut |n, t, _| {
                    if n == name {
                        t.data_mut()[j] += delta;
                    }
                });
                objective_value(&m, &cfg, &x, &labels, f)
            };
            let numeric = (shifted(h)? - shifted(-h)?) / (2.0 * h);
            worst = worst.max(relative_error(grad.data()[j], numeric));
            count += 1;
        }
    }
    Ok((worst, count))
}

pub fn gradcheck_suite() -> &'static Registry<dyn Check> {
    static SUITE: OnceLock<Registry<dyn Check>> = OnceLock::new();
    SUITE.get_or_init(|| {
        registry(
            "gradient check",
            GRAD_TOLERANCE,
            grad_checks![
                "add" => g_add,
                "sub" => g_sub,
                "mul" => g_mul,
                "scale" => g_scale,
                "sum" => g_sum,
                "matmul" => g_matmul,
                "transpose" => g_transpose,
                "add_row_bias" => g_add_row_bias,
                "concat_rows" => g_concat_rows,
                "concat_cols" => g_concat_cols,
                "slice_rows" => g_slice_rows,
                "reshape" => g_reshape,
                "mean_rows" => g_mean_rows,
                "conv2d_stride1" => g_conv_s1,
                "conv2d_stride2" => g_conv_s2,
                "relu" => g_relu,
                "sigmoid" => g_sigmoid,
                "gap" => g_gap,
                "gmp" => g_gmp,
                "channel_scale" => g_channel_scale,
                "upsample2x" => g_upsample,
                "batch_norm" => g_batch_norm,
                "l2_normalize" => g_l2_normalize,
                "softmax" => g_softmax,
                "kl_div" => g_kl,
                "kl_div_stop_target" => g_kl_stop,
                "cross_entropy" => g_cross_entropy,
                "c3s_loss" => g_c3s,
                "c3s_through_gap" => g_c3s_gap,
                "c3s_through_gmp" => g_c3s_gmp,
                "osme_block" => g_osme,
                "fpn_merge" => g_fpn,
                "objective_end_to_end" => g_end_to_end,
            ],
        )
    })
}

fn naive_matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for t in 0..k {
                out[i * n + j] += a.at2(i, t) * b.at2(t, j);
            }
        }
    }
    Tensor::from_vec(&[m, n], out)
}

fn o_matmul(_: Faults) -> Result<(f64, usize)> {
    let mut r = rng("o_matmul");
    let mut worst: f64 = 0.0;
    let cases = 30;
    for _ in 0..cases {
        let (m, k, n) = (r.gen_range(1..9), r.gen_range(1..9), r.gen_range(1..9));
        let a = uniform(&mut r, &[m, k]);
        let b = uniform(&mut r, &[k, n]);
        let mut g = Graph::new();
        let (va, vb) = (g.constant(a.clone()), g.constant(b.clone()));
        let y = g.matmul(va, vb)?;
        worst = worst.max(g.value(y).max_abs_diff(&naive_matmul(&a, &b)));
    }
    Ok((worst, cases))
}

/// Direct six-loop convolution.
pub fn naive_conv(x: &Tensor, k: &Tensor, stride: usize, pad: usize) -> Tensor {
    let (n, c, h, w) = x.dims4().expect("rank 4");
    let (co, _, kh, kw) = k.dims4().expect("rank 4");
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; n * co * oh * ow];
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
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                    acc += x.at4(b, ci, iy as usize, ix as usize) * k.at4(o, ci, dy, dx);
                                }
                            }
                        }
                    }
                    out[((b * co + o) * oh + y) * ow + xx] = acc;
                }
            }
        }
    }
    Tensor::from_vec(&[n, co, oh, ow], out)
}

fn o_conv(_: Faults) -> Result<(f64, usize)> {
    let mut r = rng("o_conv");
    let mut worst: f64 = 0.0;
    let cases = 30;
    for _ in 0..cases {
        let (n, c, co) = (r.gen_range(1..3), r.gen_range(1..4), r.gen_range(1..4));
        let (h, w) = (r.gen_range(3..9), r.gen_range(3..9));
        let kk = [1, 3][r.gen_range(0..2)];
        let stride = r.gen_range(1..3);
        let pad = r.gen_range(0..2);
        let x = uniform(&mut r, &[n, c, h, w]);
        let k = uniform(&mut r, &[co, c, kk, kk]);
        let mut g = Graph::new();
        let (vx, vk) = (g.constant(x.clone()), g.constant(k.clone()));
        let y = g.conv2d(vx, vk, stride, pad)?;
        let expect = naive_conv(&x, &k, stride, pad);
        if g.shape(y) != expect.shape() {
            return Err(Error::dim(format!("conv shape {:?} vs {:?}", g.shape(y), expect.shape())));
        }
        worst = worst.max(g.value(y).max_abs_diff(&expect));
    }
    Ok((worst, cases))
}

/// Half-pixel bilinear sample of one plane, computed per output pixel.
pub fn naive_bilinear(plane: &[f64], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    let coord = |o: usize, inp: usize, out: usize| {
        let src = ((o as f64 + 0.5) * inp as f64 / out as f64 - 0.5).max(0.0);
        let lo = (src.floor() as usize).min(inp - 1);
        let hi = (lo + 1).min(inp - 1);
        (lo, hi, src - lo as f64)
    };
    let mut out = Vec::with_capacity(oh * ow);
    for y in 0..oh {
        let (y0, y1, fy) = coord(y, h, oh);
        for x in 0..ow {
            let (x0, x1, fx) = coord(x, w, ow);
            let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
            let bot = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
            out.push(top * (1.0 - fy) + bot * fy);
        }
    }
    out
}

fn o_upsample(_: Faults) -> Result<(f64, usize)> {
    let mut r = rng("o_upsample");
    let mut worst: f64 = 0.0;
    let cases = 20;
    for _ in 0..cases {
        let (h, w) = (r.gen_range(1..6), r.gen_range(1..6));
        let x = uniform(&mut r, &[1, 1, h, w]);
        let mut g = Graph::new();
        let v = g.constant(x.clone());
        let y = g.upsample2x(v)?;
        let expect = naive_bilinear(x.data(), h, w, 2 * h, 2 * w);
        for (a, b) in g.value(y).data().iter().zip(&expect) {
            worst = worst.max((a - b).abs());
        }
    }
    Ok((worst, cases))
}

fn o_batch_norm(_: Faults) -> Result<(f64, usize)> {
    let mut r = rng("o_batch_norm");
    let (n, c, h, w) = (3, 2, 2, 3);
    let x = uniform(&mut r, &[n, c, h, w]);
    let gamma = uniform(&mut r, &[c]);
    let beta = uniform(&mut r, &[c]);
    let mut g = Graph::new();
    let (vx, vg, vb) = (g.constant(x.clone()), g.constant(gamma.clone()), g.constant(beta.clone()));
    let (y, stats) = g.batch_norm_train(vx, vg, vb)?;
    let mut worst: f64 = 0.0;
    let m = (n * h * w) as f64;
    for ch in 0..c {
        let vals: Vec<f64> = (0..n).flat_map(|b| (0..h).flat_map(move |i| (0..w).map(move |j| (b, i, j)))).map(|(b, i, j)| x.at4(b, ch, i, j)).collect();
        let mean = vals.iter().sum::<f64>() / m;
        let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m;
        worst = worst.max((stats.mean[ch] - mean).abs());
        worst = worst.max((stats.var_unbiased[ch] - var * m / (m - 1.0)).abs());
        for b in 0..n {
            for i in 0..h {
                for j in 0..w {
                    let expect = gamma.data()[ch] * (x.at4(b, ch, i, j) - mean) / (var + BN_EPS).sqrt() + beta.data()[ch];
                    worst = worst.max((g.value(y).at4(b, ch, i, j) - expect).abs());
                }
            }
        }
    }
    Ok((worst, c))
}

/// `S[p,q] = (1/N²) Σ_{n,n'} ⟨f_{p,n}, f_{q,n'}⟩` by explicit pair sums.
pub fn pair_sum_correlation(features: &[Tensor]) -> Vec<f64> {
    let p = features.len();
    let (n, c) = (features[0].shape()[0], features[0].shape()[1]);
    let mut s = vec![0.0; p * p];
    for a in 0..p {
        for b in 0..p {
            let mut acc = 0.0;
            for i in 0..n {
                for j in 0..n {
                    for k in 0..c {
                        acc += features[a].at2(i, k) * features[b].at2(j, k);
                    }
                }
            }
            s[a * p + b] = acc / (n * n) as f64;
        }
    }
    s
}

fn o_correlation(_: Faults) -> Result<(f64, usize)> {
    let mut r = rng("o_correlation");
    let mut worst: f64 = 0.0;
    let cases = 100;
    for _ in 0..cases {
        let (n, p, c) = (r.gen_range(1..=8), r.gen_range(1..=4), r.gen_range(1..=16));
        let raw: Vec<Tensor> = (0..p).map(|_| uniform(&mut r, &[n, c])).collect();
        let mut g = Graph::new();
        let mut feats = Vec::new();
        let mut normed = Vec::new();
        for t in &raw {
            let v = g.constant(t.clone());
            let f = g.l2_normalize(v)?;
            normed.push(g.value(f).clone());
            feats.push(f);
        }
        let s = regularizers::correlation_matrix(&mut g, &feats)?;
        for (a, b) in g.value(s.s).data().iter().zip(pair_sum_correlation(&normed)) {
            worst = worst.max((a - b).abs());
        }
    }
    Ok((worst, cases))
}

fn o_kl(_: Faults) -> Result<(f64, usize)> {
    let mut r = rng("o_kl");
    let mut worst: f64 = 0.0;
    let cases = 50;
    for _ in 0..cases {
        let (n, k) = (r.gen_range(1..6), r.gen_range(2..7));
        let t = softmax_rows(uniform(&mut r, &[n, k]).map(|x| 3.0 * x).data(), k);
        let s = softmax_rows(uniform(&mut r, &[n, k]).map(|x| 3.0 * x).data(), k);
        let mut per_row = 0.0;
        for row in 0..n {
            let mut acc = 0.0;
            for j in 0..k {
                let (p, q) = (t[row * k + j], s[row * k + j]);
                acc += p * (p.ln() - q.max(LOG_EPS).ln());
            }
            per_row += acc;
        }
        let mut g = Graph::new();
        let (vt, vs) = (g.constant(Tensor::from_vec(&[n, k], t)), g.constant(Tensor::from_vec(&[n, k], s)));
        let kl = g.kl_div(vt, vs, false)?;
        worst = worst.max((g.value(kl).item() - per_row / n as f64).abs());
    }
    Ok((worst, cases))
}

fn o_kl_properties(_: Faults) -> Result<(f64, usize)> {
    let mut r = rng("o_kl_properties");
    let cases = 1000;
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let k = r.gen_range(2..8);
        let p = softmax_rows(uniform(&mut r, &[k]).map(|x| 4.0 * x).data(), k);
        let q = softmax_rows(uniform(&mut r, &[k]).map(|x| 4.0 * x).data(), k);
        let pq: f64 = p.iter().zip(&q).map(|(&a, &b)| kl_term(a, b)).sum();
        let pp: f64 = p.iter().map(|&a| kl_term(a, a)).sum();
        // Negative divergence or nonzero self-divergence both count as error.
        worst = worst.max((-pq).max(0.0)).max(pp.abs());
    }
    Ok((worst, cases))
}

pub fn oracle_suite() -> &'static Registry<dyn Check> {
    static SUITE: OnceLock<Registry<dyn Check>> = OnceLock::new();
    SUITE.get_or_init(|| {
        registry(
            "oracle",
            ORACLE_TOLERANCE,
            grad_checks![
                "matmul_naive" => o_matmul,
                "conv2d_naive" => o_conv,
                "bilinear_naive" => o_upsample,
                "batch_norm_two_pass" => o_batch_norm,
                "correlation_pair_sum" => o_correlation,
                "kl_per_row" => o_kl,
                "kl_nonnegative" => o_kl_properties,
            ],
        )
    })
}
