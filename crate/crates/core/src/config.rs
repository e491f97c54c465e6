//! Experiment configuration: flat `key = value` files, named presets and
//! the ablation ladder.
//!
//! Recognized keys (unknown keys are rejected):
//!
//! | key | meaning |
//! |-----|---------|
//! | `preset` | start from a named preset (applied first) |
//! | `variant` | ablation toggles by ladder name (applied second) |
//! | `excitations` | excitations per multi-excitation block |
//! | `reduction` | gating bottleneck ratio |
//! | `stage_channels` | comma-separated channels per backbone stage |
//! | `blocks_per_stage` | conv blocks per stage |
//! | `pool_lm1` | pooling mode on stage `L−1` (`gap`/`gmp`) |
//! | `use_c3s`, `use_lm1_head`, `use_fpn`, `use_cl` | branch toggles |
//! | `normalize_head_features` | ℓ2-normalize classifier inputs too |
//! | `kl_stop_grad` | block KL gradients into the reference head |
//! | `gamma`, `gamma1`..`gamma3`, `lambda`, `lambda1`, `lambda2` | loss weights |
//! | `lr`, `momentum`, `weight_decay`, `batch_size`, `epochs`, `decay_period`, `decay_factor`, `flip_prob`, `seed` | optimization |
//! | `classes`, `image_size`, `fine_grained`, `noise`, `train_per_class`, `val_per_class` (count or `auto` for a 10% carve), `test_per_class` | synthetic data |
//! | `export_dataset` | also write the generated splits to the output directory |

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::blocks::DEFAULT_REDUCTION;
use crate::data::SynthSpec;
use crate::error::{Error, Result};
use crate::pooling;
use crate::regularizers::LossWeights;

/// Steps of the ablation ladder, from a plain squeeze-excitation network to
/// the full model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    SeOnly,
    Osme,
    C3s,
    C3sGxp,
    C3sGxpCl,
    C3sGxpFp,
    Full,
}

impl Variant {
    pub const LADDER: [Variant; 7] = [
        Variant::SeOnly,
        Variant::Osme,
        Variant::C3s,
        Variant::C3sGxp,
        Variant::C3sGxpCl,
        Variant::C3sGxpFp,
        Variant::Full,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::SeOnly => "SE",
            Variant::Osme => "OSME",
            Variant::C3s => "C3S",
            Variant::C3sGxp => "C3S+GxP",
            Variant::C3sGxpCl => "C3S+GxP+CL",
            Variant::C3sGxpFp => "C3S+GxP+FP",
            Variant::Full => "C3S+GxP+FP+CL",
        }
    }

    /// Apply this variant's toggles. `SE` also forces a single excitation;
    /// the other variants keep `excitations` as configured, but a single
    /// excitation is bumped back to two.
    pub fn apply(self, cfg: &mut CrossXConfig) {
        let (c3s, lm1, fpn, cl) = match self {
            Variant::SeOnly | Variant::Osme => (false, false, false, false),
            Variant::C3s => (true, false, false, false),
            Variant::C3sGxp => (true, true, false, false),
            Variant::C3sGxpCl => (true, true, false, true),
            Variant::C3sGxpFp => (true, true, true, false),
            Variant::Full => (true, true, true, true),
        };
        cfg.use_c3s = c3s;
        cfg.use_lm1_head = lm1;
        cfg.use_fpn = fpn;
        cfg.use_cl = cl;
        if self == Variant::SeOnly {
            cfg.excitations = 1;
        } else if cfg.excitations < 2 {
            cfg.excitations = 2;
        }
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::LADDER
            .into_iter()
            .find(|v| v.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::config(format!("unknown variant '{s}'")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CrossXConfig {
    pub excitations: usize,
    pub reduction: usize,
    pub stage_channels: Vec<usize>,
    pub blocks_per_stage: usize,
    pub pool_lm1: String,
    pub use_c3s: bool,
    pub use_lm1_head: bool,
    pub use_fpn: bool,
    pub use_cl: bool,
    pub normalize_head_features: bool,
    pub kl_stop_grad: bool,
    pub weights: LossWeights,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub decay_period: usize,
    pub decay_factor: f64,
    pub flip_prob: f64,
    pub seed: u64,
    pub data: SynthSpec,
    pub export_dataset: bool,
}

impl Default for CrossXConfig {
    /// The desk-scale full model with the CUB-Birds / SENet weights.
    fn default() -> Self {
        let mut cfg = CrossXConfig {
            excitations: 2,
            reduction: DEFAULT_REDUCTION,
            stage_channels: vec![16, 32, 64, 128],
            blocks_per_stage: 1,
            pool_lm1: "gmp".into(),
            use_c3s: true,
            use_lm1_head: true,
            use_fpn: true,
            use_cl: true,
            normalize_head_features: false,
            kl_stop_grad: false,
            weights: LossWeights::default(),
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 0.0,
            batch_size: 32,
            epochs: 30,
            decay_period: 15,
            decay_factor: 0.1,
            flip_prob: 0.5,
            seed: 0,
            data: SynthSpec::default(),
            export_dataset: false,
        };
        apply_preset(&mut cfg, "cub-senet-desk").expect("built-in preset");
        cfg
    }
}

/// Hyperparameter rows per (dataset, backbone): `P, γ₁, γ₂, γ₃, λ₁, λ₂`.
const PRESET_TABLE: [(&str, &str, [f64; 6]); 10] = [
    ("nabirds", "senet", [2.0, 0.1, 0.25, 0.5, 1.0, 1.0]),
    ("cub", "senet", [2.0, 1.0, 0.25, 1.0, 1.0, 1.0]),
    ("cars", "senet", [2.0, 1.0, 0.25, 1.0, 1.0, 1.0]),
    ("dogs", "senet", [3.0, 1.0, 0.5, 1.0, 1.0, 1.0]),
    ("aircraft", "senet", [2.0, 0.5, 0.1, 0.1, 1.0, 1.0]),
    ("nabirds", "resnet", [2.0, 0.5, 0.25, 0.5, 1.0, 1.0]),
    ("cub", "resnet", [2.0, 0.5, 0.25, 0.5, 1.0, 1.0]),
    ("cars", "resnet", [2.0, 1.0, 0.25, 1.0, 1.0, 1.0]),
    ("dogs", "resnet", [2.0, 0.01, 0.01, 1.0, 1.0, 1.0]),
    ("aircraft", "resnet", [2.0, 0.5, 0.1, 0.5, 1.0, 1.0]),
];

pub fn preset_names() -> Vec<String> {
    PRESET_TABLE.iter().map(|(d, b, _)| format!("{d}-{b}-desk")).collect()
}

fn apply_preset(cfg: &mut CrossXConfig, name: &str) -> Result<()> {
    let (dataset, _, row) = PRESET_TABLE
        .iter()
        .find(|(d, b, _)| format!("{d}-{b}-desk") == name)
        .ok_or_else(|| Error::config(format!("unknown preset '{name}' (known: {})", preset_names().join(", "))))?;
    let [p, g1, g2, g3, l1, l2] = *row;
    cfg.excitations = p as usize;
    cfg.weights = LossWeights { gamma: 1.0, gamma1: g1, gamma2: g2, gamma3: g3, lambda: 1.0, lambda1: l1, lambda2: l2 };
    cfg.lr = if *dataset == "dogs" { 0.001 } else { 0.01 };
    cfg.pool_lm1 = if matches!(*dataset, "cub" | "nabirds") { "gmp" } else { "gap" }.into();
    Ok(())
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::config(format!("invalid value '{value}' for key '{key}'")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::config(format!("invalid boolean '{value}' for key '{key}'"))),
    }
}

/// Split `key = value` lines; `#` starts a comment.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut pairs = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::config(format!("line {}: expected 'key = value', got '{line}'", lineno + 1)))?;
        pairs.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(pairs)
}

/// Split a `key=value` command-line override.
pub fn parse_override(s: &str) -> Result<(String, String)> {
    let (k, v) = s.split_once('=').ok_or_else(|| Error::config(format!("override '{s}' is not key=value")))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

impl CrossXConfig {
    pub fn preset(name: &str) -> Result<Self> {
        let mut cfg = CrossXConfig::default();
        apply_preset(&mut cfg, name)?;
        Ok(cfg)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = CrossXConfig::default();
        cfg.apply_pairs(&parse_pairs(text)?)?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read config '{}': {e}", path.display())))?;
        Self::from_text(&text)
    }

    /// Apply `key = value` pairs: `preset` first, `variant` second, then the
    /// rest in order. Validates the result.
    pub fn apply_pairs(&mut self, pairs: &[(String, String)]) -> Result<()> {
        for (k, v) in pairs.iter().filter(|(k, _)| k == "preset") {
            apply_preset(self, v).map_err(|e| Error::config(format!("{k}: {e}")))?;
        }
        for (_, v) in pairs.iter().filter(|(k, _)| k == "variant") {
            v.parse::<Variant>()?.apply(self);
        }
        for (k, v) in pairs.iter().filter(|(k, _)| k != "preset" && k != "variant") {
            self.set(k, v)?;
        }
        self.validate()
    }

    fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let w = &mut self.weights;
        let d = &mut self.data;
        match key {
            "excitations" => self.excitations = parse(key, v)?,
            "reduction" => self.reduction = parse(key, v)?,
            "stage_channels" => {
                self.stage_channels = v.split(',').map(|s| parse(key, s.trim())).collect::<Result<_>>()?
            }
            "blocks_per_stage" => self.blocks_per_stage = parse(key, v)?,
            "pool_lm1" => self.pool_lm1 = v.to_string(),
            "use_c3s" => self.use_c3s = parse_bool(key, v)?,
            "use_lm1_head" => self.use_lm1_head = parse_bool(key, v)?,
            "use_fpn" => self.use_fpn = parse_bool(key, v)?,
            "use_cl" => self.use_cl = parse_bool(key, v)?,
            "normalize_head_features" => self.normalize_head_features = parse_bool(key, v)?,
            "kl_stop_grad" => self.kl_stop_grad = parse_bool(key, v)?,
            "gamma" => w.gamma = parse(key, v)?,
            "gamma1" => w.gamma1 = parse(key, v)?,
            "gamma2" => w.gamma2 = parse(key, v)?,
            "gamma3" => w.gamma3 = parse(key, v)?,
            "lambda" => w.lambda = parse(key, v)?,
            "lambda1" => w.lambda1 = parse(key, v)?,
            "lambda2" => w.lambda2 = parse(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "momentum" => self.momentum = parse(key, v)?,
            "weight_decay" => self.weight_decay = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "decay_period" => self.decay_period = parse(key, v)?,
            "decay_factor" => self.decay_factor = parse(key, v)?,
            "flip_prob" => self.flip_prob = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "classes" => d.classes = parse(key, v)?,
            "image_size" => d.image_size = parse(key, v)?,
            "fine_grained" => d.fine_grained = parse_bool(key, v)?,
            "noise" => d.noise = parse(key, v)?,
            "train_per_class" => d.train_per_class = parse(key, v)?,
            "val_per_class" if v == "auto" => d.val_per_class = None,
            "val_per_class" => d.val_per_class = Some(parse(key, v)?),
            "test_per_class" => d.test_per_class = parse(key, v)?,
            "export_dataset" => self.export_dataset = parse_bool(key, v)?,
            _ => return Err(Error::config(format!("unknown config key '{key}'"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::config(m));
        if self.excitations == 0 {
            return bad("excitations must be at least 1".into());
        }
        if self.stage_channels.len() < 2 || self.stage_channels.contains(&0) {
            return bad(format!("need at least two non-empty stages, got {:?}", self.stage_channels));
        }
        let n = self.stage_channels.len();
        let (c_mid, c_top) = (self.stage_channels[n - 2], self.stage_channels[n - 1]);
        if c_top != 2 * c_mid {
            return bad(format!("last stage must have twice the channels of the one before ({c_mid} -> {c_top})"));
        }
        for c in [c_mid, c_top] {
            if self.reduction == 0 || c % self.reduction != 0 {
                return bad(format!("{c} channels not divisible by reduction {}", self.reduction));
            }
        }
        if self.blocks_per_stage == 0 {
            return bad("blocks_per_stage must be at least 1".into());
        }
        pooling::lookup(&self.pool_lm1)?;
        if self.use_cl && !(self.use_lm1_head || self.use_fpn) {
            return bad("use_cl needs the L-1 head or the merged features".into());
        }
        self.weights.validate()?;
        if self.batch_size < 2 {
            return bad("batch_size must be at least 2".into());
        }
        if self.decay_period == 0 {
            return bad("decay_period must be at least 1".into());
        }
        if !(self.lr >= 0.0) || !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) {
            return bad("lr, momentum and weight_decay out of range".into());
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return bad("flip_prob must lie in [0, 1]".into());
        }
        let factor = 1usize << n;
        if self.data.image_size % factor != 0 {
            return bad(format!("image_size {} not divisible by {factor}", self.data.image_size));
        }
        self.data.validate()
    }

    /// Canonical `key = value` rendering covering every key.
    pub fn to_text(&self) -> String {
        let w = &self.weights;
        let d = &self.data;
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("excitations", self.excitations.to_string());
        kv("reduction", self.reduction.to_string());
        kv(
            "stage_channels",
            self.stage_channels.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(","),
        );
        kv("blocks_per_stage", self.blocks_per_stage.to_string());
        kv("pool_lm1", self.pool_lm1.clone());
        kv("use_c3s", self.use_c3s.to_string());
        kv("use_lm1_head", self.use_lm1_head.to_string());
        kv("use_fpn", self.use_fpn.to_string());
        kv("use_cl", self.use_cl.to_string());
        kv("normalize_head_features", self.normalize_head_features.to_string());
        kv("kl_stop_grad", self.kl_stop_grad.to_string());
        kv("gamma", w.gamma.to_string());
        kv("gamma1", w.gamma1.to_string());
        kv("gamma2", w.gamma2.to_string());
        kv("gamma3", w.gamma3.to_string());
        kv("lambda", w.lambda.to_string());
        kv("lambda1", w.lambda1.to_string());
        kv("lambda2", w.lambda2.to_string());
        kv("lr", self.lr.to_string());
        kv("momentum", self.momentum.to_string());
        kv("weight_decay", self.weight_decay.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("epochs", self.epochs.to_string());
        kv("decay_period", self.decay_period.to_string());
        kv("decay_factor", self.decay_factor.to_string());
        kv("flip_prob", self.flip_prob.to_string());
        kv("seed", self.seed.to_string());
        kv("classes", d.classes.to_string());
        kv("image_size", d.image_size.to_string());
        kv("fine_grained", d.fine_grained.to_string());
        kv("noise", d.noise.to_string());
        kv("train_per_class", d.train_per_class.to_string());
        kv("val_per_class", d.val_per_class.map_or("auto".to_string(), |v| v.to_string()));
        kv("test_per_class", d.test_per_class.to_string());
        kv("export_dataset", self.export_dataset.to_string());
        s
    }

    /// SHA-256 of [`CrossXConfig::to_text`].
    pub fn digest(&self) -> [u8; 32] {
        Sha256::digest(self.to_text().as_bytes()).into()
    }

    pub fn effective_weights(&self) -> LossWeights {
        let mut w = self.weights;
        if !self.use_c3s {
            w.gamma1 = 0.0;
            w.gamma2 = 0.0;
            w.gamma3 = 0.0;
        }
        if !self.use_cl {
            w.lambda1 = 0.0;
            w.lambda2 = 0.0;
        }
        w
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cub_senet_preset_matches_table() {
        let cfg = CrossXConfig::preset("cub-senet-desk").unwrap();
        assert_eq!(cfg.excitations, 2);
        let w = cfg.weights;
        assert_eq!((w.gamma1, w.gamma2, w.gamma3, w.lambda1, w.lambda2), (1.0, 0.25, 1.0, 1.0, 1.0));
        assert_eq!((w.gamma, w.lambda), (1.0, 1.0));
        assert_eq!(cfg.lr, 0.01);
        let dogs = CrossXConfig::preset("dogs-senet-desk").unwrap();
        assert_eq!(dogs.excitations, 3);
        assert_eq!(dogs.lr, 0.001);
        let dogs_r = CrossXConfig::preset("dogs-resnet-desk").unwrap();
        assert_eq!((dogs_r.weights.gamma1, dogs_r.weights.gamma2), (0.01, 0.01));
        assert_eq!(preset_names().len(), 10);
    }

    #[test]
    fn parses_keys_and_rejects_unknown() {
        let cfg = CrossXConfig::from_text("# comment\nepochs = 3\nseed=7 # trailing\npool_lm1 = gap\n").unwrap();
        assert_eq!((cfg.epochs, cfg.seed, cfg.pool_lm1.as_str()), (3, 7, "gap"));
        let err = CrossXConfig::from_text("epochz = 3").unwrap_err().to_string();
        assert!(err.contains("epochz"), "{err}");
        assert!(CrossXConfig::from_text("epochs 3").is_err());
        assert!(CrossXConfig::from_text("epochs = three").is_err());
        assert!(CrossXConfig::from_text("pool_lm1 = median").is_err());
    }

    #[test]
    fn preset_applies_before_other_keys() {
        let cfg = CrossXConfig::from_text("gamma1 = 0.3\npreset = dogs-senet-desk\n").unwrap();
        assert_eq!(cfg.weights.gamma1, 0.3);
        assert_eq!(cfg.excitations, 3);
    }

    #[test]
    fn text_round_trips() {
        let mut cfg = CrossXConfig::preset("aircraft-resnet-desk").unwrap();
        cfg.data.val_per_class = Some(3);
        cfg.stage_channels = vec![8, 16, 32, 64];
        cfg.reduction = 8;
        let back = CrossXConfig::from_text(&cfg.to_text()).unwrap();
        assert_eq!(cfg, back);
        assert_eq!(cfg.digest(), back.digest());
    }

    #[test]
    fn validation_catches_inconsistent_toggles() {
        let mut cfg = CrossXConfig::default();
        cfg.use_lm1_head = false;
        cfg.use_fpn = false;
        assert!(cfg.validate().is_err());
        cfg.use_cl = false;
        cfg.validate().unwrap();
        cfg.batch_size = 1;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn variants_by_name() {
        for v in Variant::LADDER {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
            let mut cfg = CrossXConfig::default();
            v.apply(&mut cfg);
            cfg.validate().unwrap();
        }
        let mut cfg = CrossXConfig::default();
        Variant::SeOnly.apply(&mut cfg);
        assert_eq!(cfg.excitations, 1);
        Variant::Full.apply(&mut cfg);
        assert_eq!(cfg.excitations, 2);
    }
}
