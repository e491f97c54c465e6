//! SGD with momentum over the synthetic splits: schedule, update rule,
//! per-epoch metrics and evaluation.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::blocks::Mode;
use crate::checkpoint::Checkpoint;
use crate::config::CrossXConfig;
use crate::data::{self, Dataset, Splits};
use crate::error::{Error, Result};
use crate::model::{argmax_rows, combined_prediction, CrossXModel, ForwardOutput, TensorKind, STAGE_NAMES};
use crate::regularizers::{self, ObjectiveInputs};
use crate::tensor::Tensor;

/// Rows per forward pass during evaluation.
pub const EVAL_BATCH: usize = 100;

/// `base · factor^⌊epoch / period⌋`.
pub fn lr_schedule(epoch: usize, base_lr: f64, period: usize, factor: f64) -> f64 {
    let period = period.max(1);
    base_lr * factor.powi((epoch / period) as i32)
}

/// Classic momentum: `v ← μ·v + g + wd·w; w ← w − lr·v`.
pub fn sgd_step(w: &mut Tensor, v: &mut Tensor, grad: &Tensor, lr: f64, momentum: f64, weight_decay: f64) -> Result<()> {
    if w.shape() != grad.shape() || v.shape() != grad.shape() {
        return Err(Error::dim(format!(
            "sgd shapes: param {:?}, buffer {:?}, grad {:?}",
            w.shape(),
            v.shape(),
            grad.shape()
        )));
    }
    for ((wi, vi), gi) in w.data_mut().iter_mut().zip(v.data_mut()).zip(grad.data()) {
        *vi = momentum * *vi + gi + weight_decay * *wi;
        *wi -= lr * *vi;
    }
    Ok(())
}

/// Zero momentum buffers matching every trainable tensor of `model`.
pub fn zero_momentum(model: &CrossXModel) -> Vec<(String, Tensor)> {
    model.param_shapes().into_iter().map(|(n, s)| (n, Tensor::zeros(&s))).collect()
}

/// Model, optimizer buffers and progress counters.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub model: CrossXModel,
    pub momentum: Vec<(String, Tensor)>,
    pub epoch: usize,
    pub step: u64,
    pub history: Vec<EpochMetrics>,
}

impl TrainState {
    pub fn new(cfg: &CrossXConfig) -> Result<Self> {
        let model = CrossXModel::new(cfg)?;
        let momentum = zero_momentum(&model);
        Ok(TrainState { model, momentum, epoch: 0, step: 0, history: Vec::new() })
    }

    pub fn checkpoint(&self, cfg: &CrossXConfig) -> Checkpoint {
        Checkpoint::capture(&self.model, Some(&self.momentum), cfg.digest(), self.epoch as u32, self.step)
    }

    /// Rebuild from a checkpoint written for `cfg`.
    pub fn from_checkpoint(cfg: &CrossXConfig, ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.digest != cfg.digest() {
            return Err(Error::config("checkpoint was written for a different configuration"));
        }
        let mut model = CrossXModel::new(cfg)?;
        let mut momentum = ckpt.restore(&mut model)?;
        if momentum.is_empty() {
            momentum = zero_momentum(&model);
        }
        Ok(TrainState { model, momentum, epoch: ckpt.epoch as usize, step: ckpt.step, history: Vec::new() })
    }

    /// Apply one update from gradients keyed by parameter name, then round
    /// every stored tensor to single precision.
    pub fn apply_gradients(&mut self, grads: &HashMap<String, Tensor>, lr: f64, cfg: &CrossXConfig) -> Result<()> {
        let mut bad = None;
        self.model.visit(&mut |name, _, _| {
            if bad.is_none() && grads.get(name).is_some_and(|g| !g.is_finite()) {
                bad = Some(name.to_string());
            }
        });
        if let Some(name) = bad {
            return Err(Error::Numerical(format!("non-finite gradient for {name}")));
        }
        let mut momentum: HashMap<String, Tensor> = std::mem::take(&mut self.momentum).into_iter().collect();
        let mut order = Vec::new();
        let mut err = None;
        self.model.visit_mut(&mut |name, t, kind| {
            if kind == TensorKind::Buffer {
                t.round_to_f32();
                return;
            }
            order.push(name.to_string());
            if err.is_some() {
                return;
            }
            let Some(g) = grads.get(name) else { return };
            if !g.is_finite() {
                err = Some(Error::Numerical(format!("non-finite gradient for {name}")));
                return;
            }
            let v = momentum.entry(name.to_string()).or_insert_with(|| Tensor::zeros(t.shape()));
            if let Err(e) = sgd_step(t, v, g, lr, cfg.momentum, cfg.weight_decay) {
                err = Some(e);
                return;
            }
            t.round_to_f32();
            v.round_to_f32();
        });
        self.momentum = order
            .into_iter()
            .map(|n| {
                let t = momentum.remove(&n).unwrap_or_else(|| Tensor::zeros(&[0]));
                (n, t)
            })
            .collect();
        match err {
            Some(e) => Err(e),
            None => {
                self.step += 1;
                Ok(())
            }
        }
    }
}

/// Scalars of one forward/objective evaluation.
#[derive(Clone, Debug, Default)]
pub struct BatchStats {
    pub rows: usize,
    pub total: f64,
    pub data: f64,
    pub c3s: [Option<f64>; 3],
    pub kl: [Option<f64>; 2],
    pub correct: usize,
    pub head_correct: [Option<usize>; 3],
    /// Mean diagonal and mean |off-diagonal| of `S` per stage.
    pub s_stats: [Option<(f64, f64)>; 3],
}

/// Graph handles of the objective on one batch.
pub struct ObjectiveGraph {
    pub forward: ForwardOutput,
    pub total: Var,
    pub stats: BatchStats,
}

fn s_summary(s: &Tensor) -> (f64, f64) {
    let p = s.shape()[0];
    let mut diag = 0.0;
    let mut off = 0.0;
    for i in 0..p {
        for j in 0..p {
            if i == j {
                diag += s.at2(i, j);
            } else {
                off += s.at2(i, j).abs();
            }
        }
    }
    let off_mean = if p > 1 { off / (p * (p - 1)) as f64 } else { 0.0 };
    (diag / p as f64, off_mean)
}

fn count_correct(pred: &Tensor, labels: &[usize]) -> usize {
    argmax_rows(pred).iter().zip(labels).filter(|(a, b)| a == b).count()
}

/// Forward pass plus the configured objective on one batch.
pub fn build_objective(
    g: &mut Graph,
    model: &mut CrossXModel,
    cfg: &CrossXConfig,
    images: &Tensor,
    labels: &[usize],
    mode: Mode,
) -> Result<ObjectiveGraph> {
    let fwd = model.forward(g, images, mode)?;
    let weights = cfg.effective_weights();
    let combined = combined_prediction(g, &fwd.logits)?;
    let data = regularizers::cross_entropy(g, combined, labels)?;

    let mut inputs = ObjectiveInputs::default();
    let mut stats = BatchStats { rows: labels.len(), ..Default::default() };
    for s in 0..3 {
        if let Some(feats) = &fwd.features[s] {
            let corr = regularizers::correlation_matrix(g, feats)?;
            stats.s_stats[s] = Some(s_summary(g.value(corr.s)));
            if cfg.use_c3s {
                inputs.s[s] = Some(corr);
            }
        }
    }
    let mut probs = [None; 3];
    for (s, l) in fwd.logits.iter().enumerate() {
        if let Some(l) = l {
            let p = g.softmax(*l)?;
            probs[s] = Some(p);
            stats.head_correct[s] = Some(count_correct(g.value(p), labels));
        }
    }
    if cfg.use_cl {
        inputs.pr = probs;
    }
    let obj = regularizers::total_loss(g, data, &inputs, &weights, cfg.kl_stop_grad)?;
    stats.total = g.value(obj.total).item();
    stats.data = g.value(obj.data).item();
    for (dst, src) in stats.c3s.iter_mut().zip(obj.c3s) {
        *dst = src.map(|v| g.value(v).item());
    }
    for (dst, src) in stats.kl.iter_mut().zip(obj.kl) {
        *dst = src.map(|v| g.value(v).item());
    }
    stats.correct = count_correct(g.value(combined), labels);
    Ok(ObjectiveGraph { forward: fwd, total: obj.total, stats })
}

/// One optimization step on a batch. Returns the batch statistics.
pub fn train_step(state: &mut TrainState, cfg: &CrossXConfig, images: &Tensor, labels: &[usize], lr: f64) -> Result<BatchStats> {
    let mut g = Graph::new();
    let obj = build_objective(&mut g, &mut state.model, cfg, images, labels, Mode::Train)?;
    g.backward(obj.total)?;
    let grads: HashMap<String, Tensor> =
        obj.forward.binder.vars.iter().map(|(n, v)| (n.clone(), g.grad(*v))).collect();
    state.apply_gradients(&grads, lr, cfg)?;
    Ok(obj.stats)
}

/// Batch order and flip flags of one epoch, a pure function of
/// `(seed, epoch)`.
pub fn epoch_plan(seed: u64, epoch: usize, n: usize, batch: usize, flip_prob: f64) -> Vec<(Vec<usize>, Vec<bool>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xA5A5_5A5A_0F0F_F0F0 ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let mut plan = Vec::new();
    for chunk in order.chunks(batch) {
        // Batch norm needs at least two rows.
        if chunk.len() < 2 {
            continue;
        }
        let flips = chunk.iter().map(|_| rng.gen::<f64>() < flip_prob).collect();
        plan.push((chunk.to_vec(), flips));
    }
    plan
}

/// Accuracy and cross-layer agreement on one split.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    pub count: usize,
    pub accuracy: f64,
    pub head_accuracy: [Option<f64>; 3],
    /// Mean `KL(Pr_L‖Pr_{L−1})` and `KL(Pr_L‖Pr_G)` when both heads exist.
    pub kl: [Option<f64>; 2],
}

/// Eval-mode forward over `ds` without augmentation.
pub fn evaluate(model: &mut CrossXModel, ds: &Dataset) -> Result<EvalReport> {
    if ds.is_empty() {
        return Err(Error::contract("cannot evaluate an empty split"));
    }
    let mut correct = 0;
    let mut head_correct = [None::<usize>; 3];
    let mut kl_sum = [None::<f64>; 2];
    let idx: Vec<usize> = (0..ds.len()).collect();
    for chunk in idx.chunks(EVAL_BATCH) {
        let (images, labels) = ds.batch(chunk, None);
        let mut g = Graph::new();
        let fwd = model.forward(&mut g, &images, Mode::Eval)?;
        let combined = combined_prediction(&mut g, &fwd.logits)?;
        correct += count_correct(g.value(combined), &labels);
        let mut probs = [None; 3];
        for (s, l) in fwd.logits.iter().enumerate() {
            if let Some(l) = l {
                let p = g.softmax(*l)?;
                *head_correct[s].get_or_insert(0) += count_correct(g.value(p), &labels);
                probs[s] = Some(p);
            }
        }
        if let Some(pl) = probs[0] {
            for (which, other) in [probs[1], probs[2]].into_iter().enumerate() {
                if let Some(o) = other {
                    let kl = g.kl_div(pl, o, true)?;
                    *kl_sum[which].get_or_insert(0.0) += g.value(kl).item() * chunk.len() as f64;
                }
            }
        }
    }
    let n = ds.len() as f64;
    Ok(EvalReport {
        count: ds.len(),
        accuracy: correct as f64 / n,
        head_accuracy: head_correct.map(|c| c.map(|c| c as f64 / n)),
        kl: kl_sum.map(|k| k.map(|k| k / n)),
    })
}

/// One row of `metrics.csv`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub loss_total: f64,
    pub loss_data: f64,
    pub c3s: [Option<f64>; 3],
    pub kl: [Option<f64>; 2],
    pub train_acc: f64,
    pub train_head_acc: [Option<f64>; 3],
    pub val: EvalReport,
    pub s_diag: [Option<f64>; 3],
    pub s_offdiag: [Option<f64>; 3],
}

impl EpochMetrics {
    pub fn header() -> String {
        let mut cols = vec!["epoch".to_string(), "lr".into(), "loss_total".into(), "loss_data".into()];
        cols.extend(STAGE_NAMES.iter().map(|s| format!("c3s_{s}")));
        cols.extend(["kl_Lm1".to_string(), "kl_G".into(), "train_acc".into()]);
        cols.extend(STAGE_NAMES.iter().map(|s| format!("train_acc_{s}")));
        cols.push("val_acc".into());
        cols.extend(STAGE_NAMES.iter().map(|s| format!("val_acc_{s}")));
        cols.extend(["val_kl_Lm1".to_string(), "val_kl_G".into()]);
        for s in STAGE_NAMES {
            cols.push(format!("s_diag_{s}"));
            cols.push(format!("s_offdiag_{s}"));
        }
        cols.join(",")
    }

    pub fn to_csv_row(&self) -> String {
        fn opt(v: Option<f64>) -> String {
            v.map(|v| v.to_string()).unwrap_or_default()
        }
        let mut cells = vec![self.epoch.to_string(), self.lr.to_string(), self.loss_total.to_string(), self.loss_data.to_string()];
        cells.extend(self.c3s.iter().map(|v| opt(*v)));
        cells.extend(self.kl.iter().map(|v| opt(*v)));
        cells.push(self.train_acc.to_string());
        cells.extend(self.train_head_acc.iter().map(|v| opt(*v)));
        cells.push(self.val.accuracy.to_string());
        cells.extend(self.val.head_accuracy.iter().map(|v| opt(*v)));
        cells.extend(self.val.kl.iter().map(|v| opt(*v)));
        for s in 0..3 {
            cells.push(opt(self.s_diag[s]));
            cells.push(opt(self.s_offdiag[s]));
        }
        cells.join(",")
    }

    /// `mean |offdiag S| − mean diag S` at stage `s`.
    pub fn s_gap(&self, s: usize) -> Option<f64> {
        Some(self.s_offdiag[s]? - self.s_diag[s]?)
    }

    /// Weighted sum of the logged components under `cfg`.
    pub fn recomputed_total(&self, cfg: &CrossXConfig) -> f64 {
        let w = cfg.effective_weights();
        let mut t = self.loss_data;
        for s in 0..3 {
            t += w.c3s_weight(s) * self.c3s[s].unwrap_or(0.0);
        }
        for k in 0..2 {
            t += w.kl_weight(k) * self.kl[k].unwrap_or(0.0);
        }
        t
    }
}

pub fn metrics_csv(history: &[EpochMetrics]) -> String {
    let mut out = EpochMetrics::header();
    out.push('\n');
    for row in history {
        let _ = writeln!(out, "{}", row.to_csv_row());
    }
    out
}

/// Where and how [`train`] reports.
#[derive(Default)]
pub struct TrainOptions<'a> {
    /// Directory for `metrics.csv`, `best.ckpt` and `last.ckpt`.
    pub out_dir: Option<PathBuf>,
    pub on_epoch: Option<&'a mut dyn FnMut(&EpochMetrics)>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub splits: Splits,
    pub best_val: Option<f64>,
}

fn mean_opt(sum: [Option<f64>; 3], n: f64) -> [Option<f64>; 3] {
    sum.map(|v| v.map(|v| v / n))
}

/// Train from scratch on the synthetic splits described by `cfg`.
pub fn train(cfg: &CrossXConfig, mut opts: TrainOptions<'_>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let splits = data::synth_dataset(&cfg.data, cfg.seed)?;
    let mut state = TrainState::new(cfg)?;
    let out_dir = opts.out_dir.clone();
    if let Some(dir) = &out_dir {
        fs::create_dir_all(dir)?;
        if cfg.export_dataset {
            for (name, ds) in [("train", &splits.train), ("val", &splits.val), ("test", &splits.test)] {
                data::export_dataset(ds, &dir.join("dataset").join(name))?;
            }
        }
        let ckpt = state.checkpoint(cfg);
        ckpt.save(&dir.join("last.ckpt"))?;
        ckpt.save(&dir.join("best.ckpt"))?;
        fs::write(dir.join("metrics.csv"), metrics_csv(&[]))?;
    }
    let mut best_val: Option<f64> = None;
    for epoch in 0..cfg.epochs {
        let lr = lr_schedule(epoch, cfg.lr, cfg.decay_period, cfg.decay_factor);
        let plan = epoch_plan(cfg.seed, epoch, splits.train.len(), cfg.batch_size, cfg.flip_prob);
        let (mut total, mut data_loss) = (0.0, 0.0);
        let mut c3s = [None::<f64>; 3];
        let mut kl = [None::<f64>; 2];
        let mut diag = [None::<f64>; 3];
        let mut off = [None::<f64>; 3];
        let batches = plan.len() as f64;
        for (indices, flips) in &plan {
            let (images, labels) = splits.train.batch(indices, Some(flips));
            let st = train_step(&mut state, cfg, &images, &labels, lr)?;
            total += st.total;
            data_loss += st.data;
            for s in 0..3 {
                if let Some(v) = st.c3s[s] {
                    *c3s[s].get_or_insert(0.0) += v;
                }
                if let Some((d, o)) = st.s_stats[s] {
                    *diag[s].get_or_insert(0.0) += d;
                    *off[s].get_or_insert(0.0) += o;
                }
            }
            for k in 0..2 {
                if let Some(v) = st.kl[k] {
                    *kl[k].get_or_insert(0.0) += v;
                }
            }
        }
        state.epoch = epoch + 1;
        let train_eval = evaluate(&mut state.model, &splits.train)?;
        let val = evaluate(&mut state.model, &splits.val)?;
        let row = EpochMetrics {
            epoch,
            lr,
            loss_total: total / batches,
            loss_data: data_loss / batches,
            c3s: mean_opt(c3s, batches),
            kl: kl.map(|v| v.map(|v| v / batches)),
            train_acc: train_eval.accuracy,
            train_head_acc: train_eval.head_accuracy,
            val,
            s_diag: mean_opt(diag, batches),
            s_offdiag: mean_opt(off, batches),
        };
        if let Some(cb) = opts.on_epoch.as_mut() {
            cb(&row);
        }
        let improved = best_val.map_or(true, |b| row.val.accuracy > b);
        if improved {
            best_val = Some(row.val.accuracy);
        }
        state.history.push(row);
        if let Some(dir) = &out_dir {
            let ckpt = state.checkpoint(cfg);
            ckpt.save(&dir.join("last.ckpt"))?;
            if improved {
                ckpt.save(&dir.join("best.ckpt"))?;
            }
            fs::write(dir.join("metrics.csv"), metrics_csv(&state.history))?;
        }
    }
    Ok(TrainOutcome { state, splits, best_val })
}

/// Write the effective configuration next to run outputs.
pub fn write_effective_config(cfg: &CrossXConfig, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("effective-config.txt"), cfg.to_text())?;
    Ok(())
}
