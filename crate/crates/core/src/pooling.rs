//! Global spatial pooling strategies, selectable by name.

use std::sync::{Arc, OnceLock};

use crate::autodiff::{Graph, Var};
use crate::error::Result;
use crate::registry::{Named, Registry};

/// Reduces `[N×C×H×W]` feature maps to `[N×C]` descriptors.
pub trait Pooling: Named + Send + Sync {
    fn pool(&self, g: &mut Graph, x: Var) -> Result<Var>;
}

pub struct GlobalAverage;

impl Named for GlobalAverage {
    fn name(&self) -> &str {
        "gap"
    }
}

impl Pooling for GlobalAverage {
    fn pool(&self, g: &mut Graph, x: Var) -> Result<Var> {
        g.gap(x)
    }
}

pub struct GlobalMax;

impl Named for GlobalMax {
    fn name(&self) -> &str {
        "gmp"
    }
}

impl Pooling for GlobalMax {
    fn pool(&self, g: &mut Graph, x: Var) -> Result<Var> {
        g.gmp(x)
    }
}

pub fn builtin() -> &'static Registry<dyn Pooling> {
    static REGISTRY: OnceLock<Registry<dyn Pooling>> = OnceLock::new();
    REGISTRY.get_or_init(|| {
        let mut r: Registry<dyn Pooling> = Registry::new("pooling mode");
        r.register(Arc::new(GlobalAverage)).expect("unique");
        r.register(Arc::new(GlobalMax)).expect("unique");
        r
    })
}

pub fn lookup(name: &str) -> Result<Arc<dyn Pooling>> {
    builtin().get(name)
}
