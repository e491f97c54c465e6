//! The staged toy backbone assembled with the excitation, merge and head
//! blocks into the full network.

use std::collections::HashMap;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::blocks::{
    self, fan_in_uniform, BatchNormParams, BatchNormVars, FpnParams, FpnVars, Mode, OsmeParams, OsmeVars,
};
use crate::config::CrossXConfig;
use crate::error::{Error, Result};
use crate::pooling::{self, Pooling};
use crate::tensor::Tensor;

/// Index of each feature stage in the per-stage arrays below.
pub const STAGE_L: usize = 0;
pub const STAGE_LM1: usize = 1;
pub const STAGE_G: usize = 2;
pub const STAGE_NAMES: [&str; 3] = ["L", "Lm1", "G"];

/// Channels per stage, conv blocks per stage and input resolution. Every
/// stage opens with a stride-2 convolution.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StageSpec {
    pub channels: Vec<usize>,
    pub blocks_per_stage: usize,
    pub input_size: usize,
}

impl StageSpec {
    pub fn downsampling(&self) -> usize {
        1 << self.channels.len()
    }

    /// Spatial extent after stage `i`.
    pub fn stage_size(&self, i: usize) -> usize {
        self.input_size >> (i + 1)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.channels.len();
        if n < 2 {
            return Err(Error::config("the backbone needs at least two stages"));
        }
        if self.channels[n - 1] != 2 * self.channels[n - 2] {
            return Err(Error::config("last stage must double the channels of the one before"));
        }
        if self.input_size % self.downsampling() != 0 {
            return Err(Error::dim(format!(
                "input {} not divisible by total downsampling {}",
                self.input_size,
                self.downsampling()
            )));
        }
        Ok(())
    }
}

/// `conv3×3 → BN → ReLU`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvBn {
    pub kernel: Tensor,
    pub bn: BatchNormParams,
    pub stride: usize,
}

/// Fully connected classifier `x·W + b`, `W: [D×K]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Head {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Head {
    fn new(inputs: usize, classes: usize, rng: &mut ChaCha8Rng) -> Self {
        Head { weight: fan_in_uniform(&[inputs, classes], inputs, 1.0, rng), bias: Tensor::zeros(&[classes]) }
    }

    pub fn inputs(&self) -> usize {
        self.weight.shape()[0]
    }
}

/// Whether a tensor is trained or is a running statistic.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TensorKind {
    Param,
    Buffer,
}

/// Records which graph leaf holds which named parameter.
#[derive(Default)]
pub struct Binder {
    pub vars: Vec<(String, Var)>,
}

impl Binder {
    pub fn bind(&mut self, g: &mut Graph, name: String, t: &Tensor) -> Var {
        let v = g.param(t.clone());
        self.vars.push((name, v));
        v
    }

    pub fn lookup(&self) -> HashMap<&str, Var> {
        self.vars.iter().map(|(n, v)| (n.as_str(), *v)).collect()
    }
}

fn name_seed(seed: u64, name: &str) -> u64 {
    // FNV-1a
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h ^ seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

fn rng_for(seed: u64, name: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(name_seed(seed, name))
}

/// Graph handles produced by one forward pass. Per-stage arrays are
/// indexed by [`STAGE_L`], [`STAGE_LM1`], [`STAGE_G`]; disabled branches
/// are `None`.
pub struct ForwardOutput {
    pub logits: [Option<Var>; 3],
    /// ℓ2-normalized pooled features per excitation.
    pub features: [Option<Vec<Var>>; 3],
    /// Excitation feature maps `U_p` per stage.
    pub maps: [Option<Vec<Var>>; 3],
    pub binder: Binder,
}

#[derive(Clone)]
pub struct CrossXModel {
    pub spec: StageSpec,
    pub classes: usize,
    pub excitations: usize,
    pub stages: Vec<Vec<ConvBn>>,
    pub osme_l: OsmeParams,
    pub osme_lm1: Option<OsmeParams>,
    pub fpn: Option<FpnParams>,
    pub head_l: Head,
    pub head_lm1: Option<Head>,
    pub head_g: Option<Head>,
    pub normalize_head_features: bool,
    pooling_lm1: Arc<dyn Pooling>,
}

impl std::fmt::Debug for CrossXModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("CrossXModel")
            .field("spec", &self.spec)
            .field("classes", &self.classes)
            .field("excitations", &self.excitations)
            .field("lm1_head", &self.head_lm1.is_some())
            .field("fpn", &self.fpn.is_some())
            .field("pool_lm1", &self.pooling_lm1.name())
            .finish()
    }
}

impl CrossXModel {
    /// Fresh model; every tensor is initialized from a stream keyed by
    /// `(cfg.seed, tensor group name)`, so toggling branches leaves the
    /// remaining weights unchanged.
    pub fn new(cfg: &CrossXConfig) -> Result<Self> {
        cfg.validate()?;
        let spec = StageSpec {
            channels: cfg.stage_channels.clone(),
            blocks_per_stage: cfg.blocks_per_stage,
            input_size: cfg.data.image_size,
        };
        spec.validate()?;
        let seed = cfg.seed;
        let classes = cfg.data.classes;
        let p = cfg.excitations;

        let mut stages = Vec::with_capacity(spec.channels.len());
        let mut c_in = crate::data::CHANNELS;
        for (i, &c) in spec.channels.iter().enumerate() {
            let mut blocks = Vec::with_capacity(spec.blocks_per_stage);
            for b in 0..spec.blocks_per_stage {
                let mut rng = rng_for(seed, &format!("backbone.s{i}.b{b}"));
                blocks.push(ConvBn {
                    kernel: fan_in_uniform(&[c, c_in, 3, 3], 9 * c_in, 2f64.sqrt(), &mut rng),
                    bn: BatchNormParams::new(c),
                    stride: if b == 0 { 2 } else { 1 },
                });
                c_in = c;
            }
            stages.push(blocks);
        }
        let n = spec.channels.len();
        let (c_mid, c_top) = (spec.channels[n - 2], spec.channels[n - 1]);
        let osme_l = OsmeParams::new(c_top, p, cfg.reduction, &mut rng_for(seed, "osme.L"))?;
        let need_mid = cfg.use_lm1_head || cfg.use_fpn;
        let osme_lm1 =
            if need_mid { Some(OsmeParams::new(c_mid, p, cfg.reduction, &mut rng_for(seed, "osme.Lm1"))?) } else { None };
        let fpn = cfg.use_fpn.then(|| FpnParams::new(c_top, c_mid, &mut rng_for(seed, "fpn")));
        let head_l = Head::new(p * c_top, classes, &mut rng_for(seed, "head.L"));
        let head_lm1 = cfg.use_lm1_head.then(|| Head::new(p * c_mid, classes, &mut rng_for(seed, "head.Lm1")));
        let head_g = cfg.use_fpn.then(|| Head::new(p * c_mid, classes, &mut rng_for(seed, "head.G")));
        Ok(CrossXModel {
            spec,
            classes,
            excitations: p,
            stages,
            osme_l,
            osme_lm1,
            fpn,
            head_l,
            head_lm1,
            head_g,
            normalize_head_features: cfg.normalize_head_features,
            pooling_lm1: pooling::lookup(&cfg.pool_lm1)?,
        })
    }

    pub fn pooling_lm1(&self) -> &dyn Pooling {
        self.pooling_lm1.as_ref()
    }

    /// Visit every tensor in a fixed order with its canonical name.
    pub fn visit(&self, f: &mut dyn FnMut(&str, &Tensor, TensorKind)) {
        use TensorKind::*;
        for (i, stage) in self.stages.iter().enumerate() {
            for (b, blk) in stage.iter().enumerate() {
                let pre = format!("backbone.s{i}.b{b}");
                f(&format!("{pre}.conv"), &blk.kernel, Param);
                visit_bn(&format!("{pre}.bn"), &blk.bn, f);
            }
        }
        visit_osme("osme.L", &self.osme_l, f);
        if let Some(o) = &self.osme_lm1 {
            visit_osme("osme.Lm1", o, f);
        }
        if let Some(fp) = &self.fpn {
            f("fpn.k1", &fp.k1, Param);
            f("fpn.k2", &fp.k2, Param);
            visit_bn("fpn.bn", &fp.bn, f);
        }
        for (name, head) in self.heads() {
            if let Some(h) = head {
                f(&format!("head.{name}.weight"), &h.weight, Param);
                f(&format!("head.{name}.bias"), &h.bias, Param);
            }
        }
    }

    /// Mutable counterpart of [`CrossXModel::visit`], same order and names.
    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor, TensorKind)) {
        use TensorKind::*;
        for (i, stage) in self.stages.iter_mut().enumerate() {
            for (b, blk) in stage.iter_mut().enumerate() {
                let pre = format!("backbone.s{i}.b{b}");
                f(&format!("{pre}.conv"), &mut blk.kernel, Param);
                visit_bn_mut(&format!("{pre}.bn"), &mut blk.bn, f);
            }
        }
        visit_osme_mut("osme.L", &mut self.osme_l, f);
        if let Some(o) = &mut self.osme_lm1 {
            visit_osme_mut("osme.Lm1", o, f);
        }
        if let Some(fp) = &mut self.fpn {
            f("fpn.k1", &mut fp.k1, Param);
            f("fpn.k2", &mut fp.k2, Param);
            visit_bn_mut("fpn.bn", &mut fp.bn, f);
        }
        let heads = [("L", &mut self.head_l), ];
        for (name, h) in heads {
            f(&format!("head.{name}.weight"), &mut h.weight, Param);
            f(&format!("head.{name}.bias"), &mut h.bias, Param);
        }
        for (name, head) in [("Lm1", &mut self.head_lm1), ("G", &mut self.head_g)] {
            if let Some(h) = head {
                f(&format!("head.{name}.weight"), &mut h.weight, Param);
                f(&format!("head.{name}.bias"), &mut h.bias, Param);
            }
        }
    }

    fn heads(&self) -> [(&'static str, Option<&Head>); 3] {
        [("L", Some(&self.head_l)), ("Lm1", self.head_lm1.as_ref()), ("G", self.head_g.as_ref())]
    }

    /// Names and shapes of trainable tensors, in visit order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        self.visit(&mut |n, t, k| {
            if k == TensorKind::Param {
                out.push((n.to_string(), t.shape().to_vec()));
            }
        });
        out
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes().iter().map(|(_, s)| s.iter().product::<usize>()).sum()
    }

    /// Run the backbone and return the outputs of its last two stages.
    pub fn backbone_forward(&mut self, g: &mut Graph, binder: &mut Binder, x: Var, mode: Mode) -> Result<(Var, Var)> {
        let (_, c, h, w) = g.value(x).dims4()?;
        let down = self.spec.downsampling();
        if h % down != 0 || w % down != 0 {
            return Err(Error::dim(format!("input {h}x{w} not divisible by total downsampling {down}")));
        }
        if c != crate::data::CHANNELS {
            return Err(Error::dim(format!("expected {} input channels, got {c}", crate::data::CHANNELS)));
        }
        let mut cur = x;
        let mut outputs = Vec::with_capacity(self.stages.len());
        for (i, stage) in self.stages.iter_mut().enumerate() {
            for (b, blk) in stage.iter_mut().enumerate() {
                let pre = format!("backbone.s{i}.b{b}");
                let k = binder.bind(g, format!("{pre}.conv"), &blk.kernel);
                let bn = bind_bn(g, binder, &format!("{pre}.bn"), &blk.bn);
                let conv = g.conv2d(cur, k, blk.stride, 1)?;
                let normed = blocks::batch_norm(g, conv, &bn, &mut blk.bn, mode)?;
                cur = g.relu(normed);
            }
            outputs.push(cur);
        }
        let n = outputs.len();
        Ok((outputs[n - 2], outputs[n - 1]))
    }

    /// Full forward pass on a batch of images.
    pub fn forward(&mut self, g: &mut Graph, images: &Tensor, mode: Mode) -> Result<ForwardOutput> {
        let mut binder = Binder::default();
        let x = g.constant(images.clone());
        let (u_mid, u_top) = self.backbone_forward(g, &mut binder, x, mode)?;

        let osme_l = bind_osme(g, &mut binder, "osme.L", &self.osme_l);
        let maps_l = blocks::osme_forward(g, u_top, &osme_l)?;
        let maps_lm1 = match &self.osme_lm1 {
            Some(o) => {
                let vars = bind_osme(g, &mut binder, "osme.Lm1", o);
                Some(blocks::osme_forward(g, u_mid, &vars)?)
            }
            None => None,
        };
        let maps_g = match (&mut self.fpn, &maps_lm1) {
            (Some(fp), Some(mid)) => {
                let vars = FpnVars {
                    k1: binder.bind(g, "fpn.k1".into(), &fp.k1),
                    k2: binder.bind(g, "fpn.k2".into(), &fp.k2),
                    bn: bind_bn(g, &mut binder, "fpn.bn", &fp.bn),
                };
                // All excitations share the merge filters, so they are
                // stacked along the batch axis and merged in one pass.
                let n = g.shape(u_top)[0];
                let mid_all = g.concat_rows(mid)?;
                let top_all = g.concat_rows(&maps_l)?;
                let merged = blocks::fpn_merge(g, mid_all, top_all, &vars, &mut fp.bn, mode)?;
                let mut out = Vec::with_capacity(self.excitations);
                for p in 0..self.excitations {
                    out.push(g.slice_rows(merged, p * n, n)?);
                }
                Some(out)
            }
            _ => None,
        };

        let gap = pooling::lookup("gap")?;
        let mut logits = [None, None, None];
        let mut features = [None, None, None];
        let stage_inputs: [(Option<&Vec<Var>>, Option<&Head>, &dyn Pooling); 3] = [
            (Some(&maps_l), Some(&self.head_l), gap.as_ref()),
            (maps_lm1.as_ref().filter(|_| self.head_lm1.is_some()), self.head_lm1.as_ref(), self.pooling_lm1.as_ref()),
            (maps_g.as_ref(), self.head_g.as_ref(), gap.as_ref()),
        ];
        for (s, (maps, head, pool)) in stage_inputs.into_iter().enumerate() {
            let (Some(maps), Some(head)) = (maps, head) else { continue };
            let mut raw = Vec::with_capacity(maps.len());
            let mut normed = Vec::with_capacity(maps.len());
            for &m in maps {
                let pooled = blocks::pooled_head(g, m, pool, false)?;
                normed.push(g.l2_normalize(pooled)?);
                raw.push(pooled);
            }
            let head_in = if self.normalize_head_features { &normed } else { &raw };
            let concat = g.concat_cols(head_in)?;
            let name = STAGE_NAMES[s];
            let w = binder.bind(g, format!("head.{name}.weight"), &head.weight);
            let b = binder.bind(g, format!("head.{name}.bias"), &head.bias);
            let z = g.matmul(concat, w)?;
            logits[s] = Some(g.add_row_bias(z, b)?);
            features[s] = Some(normed);
        }
        Ok(ForwardOutput { logits, features, maps: [Some(maps_l), maps_lm1, maps_g], binder })
    }
}

fn visit_bn(pre: &str, bn: &BatchNormParams, f: &mut dyn FnMut(&str, &Tensor, TensorKind)) {
    f(&format!("{pre}.gamma"), &bn.gamma, TensorKind::Param);
    f(&format!("{pre}.beta"), &bn.beta, TensorKind::Param);
    f(&format!("{pre}.running_mean"), &bn.running_mean, TensorKind::Buffer);
    f(&format!("{pre}.running_var"), &bn.running_var, TensorKind::Buffer);
}

fn visit_bn_mut(pre: &str, bn: &mut BatchNormParams, f: &mut dyn FnMut(&str, &mut Tensor, TensorKind)) {
    f(&format!("{pre}.gamma"), &mut bn.gamma, TensorKind::Param);
    f(&format!("{pre}.beta"), &mut bn.beta, TensorKind::Param);
    f(&format!("{pre}.running_mean"), &mut bn.running_mean, TensorKind::Buffer);
    f(&format!("{pre}.running_var"), &mut bn.running_var, TensorKind::Buffer);
}

fn visit_osme(pre: &str, o: &OsmeParams, f: &mut dyn FnMut(&str, &Tensor, TensorKind)) {
    for (p, (a, b)) in o.w1.iter().zip(&o.w2).enumerate() {
        f(&format!("{pre}.p{p}.w1"), a, TensorKind::Param);
        f(&format!("{pre}.p{p}.w2"), b, TensorKind::Param);
    }
}

fn visit_osme_mut(pre: &str, o: &mut OsmeParams, f: &mut dyn FnMut(&str, &mut Tensor, TensorKind)) {
    for (p, (a, b)) in o.w1.iter_mut().zip(o.w2.iter_mut()).enumerate() {
        f(&format!("{pre}.p{p}.w1"), a, TensorKind::Param);
        f(&format!("{pre}.p{p}.w2"), b, TensorKind::Param);
    }
}

fn bind_bn(g: &mut Graph, binder: &mut Binder, pre: &str, bn: &BatchNormParams) -> BatchNormVars {
    BatchNormVars {
        gamma: binder.bind(g, format!("{pre}.gamma"), &bn.gamma),
        beta: binder.bind(g, format!("{pre}.beta"), &bn.beta),
    }
}

fn bind_osme(g: &mut Graph, binder: &mut Binder, pre: &str, o: &OsmeParams) -> OsmeVars {
    let mut w1 = Vec::new();
    let mut w2 = Vec::new();
    for (p, (a, b)) in o.w1.iter().zip(&o.w2).enumerate() {
        w1.push(binder.bind(g, format!("{pre}.p{p}.w1"), a));
        w2.push(binder.bind(g, format!("{pre}.p{p}.w2"), b));
    }
    OsmeVars { w1, w2, channels: o.channels() }
}

/// `softmax(Σ available logits)`; absent heads contribute nothing.
pub fn combined_prediction(g: &mut Graph, logits: &[Option<Var>]) -> Result<Var> {
    let mut present = logits.iter().flatten().copied();
    let first = present.next().ok_or_else(|| Error::contract("no logits to combine"))?;
    let mut sum = first;
    for l in present {
        sum = g.add(sum, l)?;
    }
    g.softmax(sum)
}

/// Row-wise argmax, first index on ties.
pub fn argmax_rows(t: &Tensor) -> Vec<usize> {
    let k = t.shape()[1];
    t.data()
        .chunks(k)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}
