//! Ablation matrix: the variant ladder crossed with pooling modes and
//! seeds, each trained from scratch and scored on its test split.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use crate::config::{CrossXConfig, Variant};
use crate::error::Result;
use crate::model::STAGE_NAMES;
use crate::train::{self, EvalReport, TrainOptions};

#[derive(Clone, Debug)]
pub struct AblationPlan {
    pub variants: Vec<Variant>,
    pub poolings: Vec<String>,
    pub seeds: Vec<u64>,
}

impl AblationPlan {
    /// Full ladder × {gap, gmp} × `n_seeds` seeds starting at `first_seed`.
    pub fn full(first_seed: u64, n_seeds: usize) -> Self {
        AblationPlan {
            variants: Variant::LADDER.to_vec(),
            poolings: vec!["gap".into(), "gmp".into()],
            seeds: (0..n_seeds as u64).map(|i| first_seed + i).collect(),
        }
    }

    pub fn cells(&self) -> Vec<(Variant, String, u64)> {
        let mut out = Vec::new();
        for &v in &self.variants {
            for p in &self.poolings {
                for &s in &self.seeds {
                    out.push((v, p.clone(), s));
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct AblationRow {
    pub variant: Variant,
    pub pooling: String,
    pub seed: u64,
    pub test: EvalReport,
    /// Wall time of the training run behind this row; zero when the row
    /// reuses an identical run.
    pub seconds: f64,
}

/// Configuration of one cell.
pub fn cell_config(base: &CrossXConfig, variant: Variant, pooling: &str, seed: u64) -> Result<CrossXConfig> {
    let mut cfg = base.clone();
    variant.apply(&mut cfg);
    cfg.pool_lm1 = pooling.to_string();
    cfg.seed = seed;
    cfg.validate()?;
    Ok(cfg)
}

/// Key under which runs are identical: the pooling mode only matters when
/// the penultimate stage has a head.
fn run_key(cfg: &CrossXConfig) -> String {
    let mut c = cfg.clone();
    if !c.use_lm1_head {
        c.pool_lm1 = "gap".into();
    }
    c.to_text()
}

/// Train every cell with up to `threads` concurrent runs. Rows come back in
/// plan order regardless of scheduling.
pub fn run_ablation(
    base: &CrossXConfig,
    plan: &AblationPlan,
    threads: usize,
    out_dir: Option<PathBuf>,
    progress: &(dyn Fn(&AblationRow) + Sync),
) -> Result<Vec<AblationRow>> {
    let cells = plan.cells();
    let configs = cells
        .iter()
        .map(|(v, p, s)| cell_config(base, *v, p, *s))
        .collect::<Result<Vec<_>>>()?;
    let mut unique: Vec<usize> = Vec::new();
    let mut first_of: HashMap<String, usize> = HashMap::new();
    let mut source = Vec::with_capacity(cells.len());
    for (i, cfg) in configs.iter().enumerate() {
        let key = run_key(cfg);
        let idx = *first_of.entry(key).or_insert_with(|| {
            unique.push(i);
            i
        });
        source.push(idx);
    }

    let results: Mutex<HashMap<usize, Result<(EvalReport, f64)>>> = Mutex::new(HashMap::new());
    let next = AtomicUsize::new(0);
    std::thread::scope(|scope| {
        for _ in 0..threads.max(1).min(unique.len().max(1)) {
            scope.spawn(|| loop {
                let j = next.fetch_add(1, Ordering::SeqCst);
                let Some(&i) = unique.get(j) else { break };
                let cfg = &configs[i];
                let (v, p, s) = &cells[i];
                let dir = out_dir.as_ref().map(|d| d.join(format!("{}_{}_{}", v.name().replace('+', "-"), p, s)));
                let start = Instant::now();
                let res = (|| {
                    if let Some(d) = &dir {
                        train::write_effective_config(cfg, d)?;
                    }
                    let mut outcome = train::train(cfg, TrainOptions { out_dir: dir.clone(), on_epoch: None })?;
                    train::evaluate(&mut outcome.state.model, &outcome.splits.test)
                })();
                let secs = start.elapsed().as_secs_f64();
                if let Ok(test) = &res {
                    progress(&AblationRow { variant: *v, pooling: p.clone(), seed: *s, test: test.clone(), seconds: secs });
                }
                results.lock().expect("no poisoned workers").insert(i, res.map(|r| (r, secs)));
            });
        }
    });

    let mut results = results.into_inner().expect("no poisoned workers");
    let mut done: HashMap<usize, (EvalReport, f64)> = HashMap::new();
    for &i in &unique {
        let r = results.remove(&i).expect("every unique cell ran")?;
        done.insert(i, r);
    }
    Ok(cells
        .into_iter()
        .enumerate()
        .map(|(i, (variant, pooling, seed))| {
            let (test, secs) = &done[&source[i]];
            AblationRow { variant, pooling, seed, test: test.clone(), seconds: if source[i] == i { *secs } else { 0.0 } }
        })
        .collect())
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("variant,pooling,seed,test_acc");
    for s in STAGE_NAMES {
        let _ = write!(out, ",test_acc_{s}");
    }
    out.push('\n');
    for r in rows {
        let _ = write!(out, "{},{},{},{}", r.variant.name(), r.pooling, r.seed, r.test.accuracy);
        for h in r.test.head_accuracy {
            out.push(',');
            if let Some(h) = h {
                let _ = write!(out, "{h}");
            }
        }
        out.push('\n');
    }
    out
}

/// Mean test accuracy per variant over all rows of that variant.
pub fn mean_accuracy(rows: &[AblationRow], variant: Variant) -> Option<f64> {
    let accs: Vec<f64> = rows.iter().filter(|r| r.variant == variant).map(|r| r.test.accuracy).collect();
    (!accs.is_empty()).then(|| accs.iter().sum::<f64>() / accs.len() as f64)
}
