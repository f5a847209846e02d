use std::collections::BTreeMap;

use super::{ExactSolver, HeuristicSolver, LapSolver, Matching, SolverMode};
use crate::affinity::AffinitySystem;
use crate::error::{Error, Result};

/// A matching strategy for [`AffinitySystem`] instances.
pub trait MatchSolver: Send + Sync {
    fn mode(&self) -> SolverMode;

    fn solve(&self, system: &AffinitySystem) -> Result<Matching>;

    fn name(&self) -> &'static str {
        self.mode().name()
    }
}

/// Solvers keyed by name, looked up at runtime from config or CLI.
pub struct SolverRegistry {
    solvers: BTreeMap<&'static str, Box<dyn MatchSolver>>,
}

impl SolverRegistry {
    pub fn empty() -> Self {
        SolverRegistry {
            solvers: BTreeMap::new(),
        }
    }

    /// `exact`, `heuristic` and `lap` with the given settings.
    pub fn with_settings(exact: ExactSolver, heuristic: HeuristicSolver) -> Self {
        let mut r = SolverRegistry::empty();
        r.register(Box::new(exact));
        r.register(Box::new(heuristic));
        r.register(Box::new(LapSolver));
        r
    }

    /// Replaces any solver already registered under the same name.
    pub fn register(&mut self, solver: Box<dyn MatchSolver>) {
        self.solvers.insert(solver.name(), solver);
    }

    pub fn get(&self, name: &str) -> Result<&dyn MatchSolver> {
        self.solvers
            .get(name)
            .map(Box::as_ref)
            .ok_or_else(|| Error::UnknownName {
                name: name.to_string(),
                known: self.names().join(", "),
            })
    }

    pub fn for_mode(&self, mode: SolverMode) -> Result<&dyn MatchSolver> {
        self.get(mode.name())
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.solvers.keys().copied().collect()
    }
}

impl Default for SolverRegistry {
    fn default() -> Self {
        SolverRegistry::with_settings(ExactSolver::default(), HeuristicSolver::default())
    }
}
