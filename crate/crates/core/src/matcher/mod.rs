//! Solvers for the second-order matching problem, selectable by name.

mod exact;
mod heuristic;
mod lap;
mod registry;

pub use exact::{solve_exact, ExactSolver, DEFAULT_EXACT_CAP, DEFAULT_NODE_LIMIT};
pub use heuristic::{solve_heuristic, solve_heuristic_traced, HeuristicSolver, DEFAULT_MAX_ITERS};
pub use lap::{solve_lap, LapSolver};
pub use registry::{MatchSolver, SolverRegistry};

use std::fmt;
use std::str::FromStr;

use ndarray::Array2;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SolverMode {
    Exact,
    Heuristic,
    LapOnly,
}

impl SolverMode {
    pub const ALL: [SolverMode; 3] = [SolverMode::Exact, SolverMode::Heuristic, SolverMode::LapOnly];

    pub fn name(self) -> &'static str {
        match self {
            SolverMode::Exact => "exact",
            SolverMode::Heuristic => "heuristic",
            SolverMode::LapOnly => "lap",
        }
    }
}

impl fmt::Display for SolverMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SolverMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SolverMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::UnknownName {
                name: s.to_string(),
                known: "exact, heuristic, lap".into(),
            })
    }
}

/// One-to-one assignment `source i → target assignment[i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Matching {
    pub assignment: Vec<usize>,
    pub objective: f64,
    pub mode: SolverMode,
}

impl Matching {
    pub fn n(&self) -> usize {
        self.assignment.len()
    }

    pub fn is_permutation(&self) -> bool {
        is_permutation(&self.assignment)
    }

    /// N × N 0/1 indicator with `v[i][assignment[i]] = 1`.
    pub fn indicator(&self) -> Array2<f64> {
        let n = self.n();
        let mut v = Array2::zeros((n, n));
        for (i, &a) in self.assignment.iter().enumerate() {
            v[[i, a]] = 1.0;
        }
        v
    }

    /// Fraction of sources mapped to the same-index target.
    pub fn identity_accuracy(&self) -> f64 {
        let hits = self
            .assignment
            .iter()
            .enumerate()
            .filter(|(i, a)| i == *a)
            .count();
        hits as f64 / self.n().max(1) as f64
    }
}

pub fn is_permutation(assignment: &[usize]) -> bool {
    let n = assignment.len();
    let mut seen = vec![false; n];
    for &a in assignment {
        if a >= n || seen[a] {
            return false;
        }
        seen[a] = true;
    }
    true
}
