use super::lap::lap_assignment;
use super::{Matching, MatchSolver, SolverMode};
use crate::affinity::AffinitySystem;
use crate::error::{Error, Result};

pub const DEFAULT_MAX_ITERS: usize = 1000;

/// LAP seed followed by best-improvement pairwise-swap descent on the full
/// objective.
#[derive(Debug, Clone, Copy)]
pub struct HeuristicSolver {
    pub max_iters: usize,
}

impl Default for HeuristicSolver {
    fn default() -> Self {
        HeuristicSolver {
            max_iters: DEFAULT_MAX_ITERS,
        }
    }
}

pub fn solve_heuristic(system: &AffinitySystem, max_iters: usize) -> Result<Matching> {
    HeuristicSolver { max_iters }.solve(system)
}

/// Like [`solve_heuristic`], also returning the objective after the seed and
/// after every accepted swap.
pub fn solve_heuristic_traced(
    system: &AffinitySystem,
    max_iters: usize,
) -> Result<(Matching, Vec<f64>)> {
    let mut history = Vec::new();
    let assignment = local_search(system, max_iters, Some(&mut history))?;
    Ok((
        Matching {
            objective: system.objective(&assignment),
            assignment,
            mode: SolverMode::Heuristic,
        },
        history,
    ))
}

pub(crate) fn local_search(
    system: &AffinitySystem,
    max_iters: usize,
    mut history: Option<&mut Vec<f64>>,
) -> Result<Vec<usize>> {
    if !system.is_finite() {
        return Err(Error::NonFiniteInput);
    }
    let n = system.n();
    let mut assignment = lap_assignment(&system.c_v)?;
    let mut current = system.objective(&assignment);
    if let Some(h) = history.as_deref_mut() {
        h.push(current);
    }
    if system.edges_s.is_empty() || system.edges_t.is_empty() {
        return Ok(assignment);
    }
    for _ in 0..max_iters {
        let mut best: Option<(usize, usize, f64)> = None;
        let mut best_obj = current - 1e-12 * current.abs().max(1.0);
        for i in 0..n {
            for j in i + 1..n {
                assignment.swap(i, j);
                let obj = system.objective(&assignment);
                assignment.swap(i, j);
                if obj < best_obj {
                    best_obj = obj;
                    best = Some((i, j, obj));
                }
            }
        }
        let Some((i, j, obj)) = best else {
            break;
        };
        assignment.swap(i, j);
        current = obj;
        if let Some(h) = history.as_deref_mut() {
            h.push(current);
        }
    }
    Ok(assignment)
}

impl MatchSolver for HeuristicSolver {
    fn mode(&self) -> SolverMode {
        SolverMode::Heuristic
    }

    fn solve(&self, system: &AffinitySystem) -> Result<Matching> {
        Ok(solve_heuristic_traced(system, self.max_iters)?.0)
    }
}
