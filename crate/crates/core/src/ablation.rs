//! Named ablation axes. Each axis switches one component of the pipeline off.

use std::collections::BTreeMap;

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::imle::EULER_MASCHERONI;
use crate::matcher::SolverMode;

/// Resolved switches for one training or evaluation run.
#[derive(Debug, Clone, PartialEq)]
pub struct Plan {
    pub solver_mode: SolverMode,
    /// Build the edge block; off means a vertex-only system.
    pub second_order: bool,
    /// Run the GCN; off means Ẑ := X.
    pub message_passing: bool,
    pub noise_scale: f64,
    pub noise_offset: f64,
    pub alpha: f64,
}

impl Plan {
    /// Switches as configured, before any ablation.
    pub fn from_config(cfg: &TrainConfig) -> Self {
        Plan {
            solver_mode: cfg.solver_mode,
            second_order: cfg.solver_mode != SolverMode::LapOnly,
            message_passing: !cfg.gcn_widths.is_empty(),
            noise_scale: cfg.noise_scale,
            noise_offset: cfg.noise_offset,
            alpha: cfg.alpha,
        }
    }

    /// The configured plan with `cfg.ablation` applied.
    pub fn resolve(cfg: &TrainConfig) -> Result<Self> {
        let mut plan = Plan::from_config(cfg);
        AblationRegistry::default().get(&cfg.ablation)?.apply(&mut plan);
        Ok(plan)
    }
}

pub trait Ablation: Send + Sync {
    fn name(&self) -> &'static str;

    fn apply(&self, plan: &mut Plan);
}

struct Full;
struct NoSecondOrder;
struct NoMessagePassing;
struct NoGumbel;
struct NoLocalSim;

impl Ablation for Full {
    fn name(&self) -> &'static str {
        "full"
    }

    fn apply(&self, _: &mut Plan) {}
}

impl Ablation for NoSecondOrder {
    fn name(&self) -> &'static str {
        "second_order"
    }

    fn apply(&self, plan: &mut Plan) {
        plan.solver_mode = SolverMode::LapOnly;
        plan.second_order = false;
    }
}

impl Ablation for NoMessagePassing {
    fn name(&self) -> &'static str {
        "message_passing"
    }

    fn apply(&self, plan: &mut Plan) {
        plan.message_passing = false;
    }
}

impl Ablation for NoGumbel {
    fn name(&self) -> &'static str {
        "gumbel"
    }

    /// The offset is the Gumbel(0,1) mean, so the unperturbed problem sees the
    /// same average shift as the noisy one.
    fn apply(&self, plan: &mut Plan) {
        plan.noise_scale = 0.0;
        plan.noise_offset = EULER_MASCHERONI;
    }
}

impl Ablation for NoLocalSim {
    fn name(&self) -> &'static str {
        "local_sim"
    }

    fn apply(&self, plan: &mut Plan) {
        plan.alpha = 1.0;
    }
}

pub struct AblationRegistry {
    axes: BTreeMap<&'static str, Box<dyn Ablation>>,
}

impl AblationRegistry {
    pub fn empty() -> Self {
        AblationRegistry { axes: BTreeMap::new() }
    }

    pub fn register(&mut self, axis: Box<dyn Ablation>) {
        self.axes.insert(axis.name(), axis);
    }

    pub fn get(&self, name: &str) -> Result<&dyn Ablation> {
        self.axes
            .get(name)
            .map(Box::as_ref)
            .ok_or_else(|| Error::UnknownName {
                name: name.to_string(),
                known: self.names().join(", "),
            })
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.axes.keys().copied().collect()
    }
}

impl Default for AblationRegistry {
    fn default() -> Self {
        let mut r = AblationRegistry::empty();
        r.register(Box::new(Full));
        r.register(Box::new(NoSecondOrder));
        r.register(Box::new(NoMessagePassing));
        r.register(Box::new(NoGumbel));
        r.register(Box::new(NoLocalSim));
        r
    }
}
