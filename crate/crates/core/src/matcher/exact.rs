use ndarray::Array2;

use super::lap::min_cost_assignment;
use super::{Matching, MatchSolver, SolverMode};
use crate::affinity::AffinitySystem;
use crate::error::{Error, Result};

pub const DEFAULT_EXACT_CAP: usize = 10;
pub const DEFAULT_NODE_LIMIT: u64 = 50_000_000;

/// Slack used when comparing bounds and objectives of different summation order.
const TOL: f64 = 1e-9;

/// Depth-first branch and bound over source vertices in index order.
///
/// The bound on the remaining gain is the LAP optimum over unassigned rows
/// and unused columns plus, for every source edge that is not yet fixed, the
/// best edge affinity still reachable (or zero if unused).
#[derive(Debug, Clone, Copy)]
pub struct ExactSolver {
    pub cap: usize,
    pub node_limit: u64,
}

impl Default for ExactSolver {
    fn default() -> Self {
        ExactSolver {
            cap: DEFAULT_EXACT_CAP,
            node_limit: DEFAULT_NODE_LIMIT,
        }
    }
}

pub fn solve_exact(system: &AffinitySystem, node_limit: u64) -> Result<Matching> {
    ExactSolver {
        cap: DEFAULT_EXACT_CAP,
        node_limit,
    }
    .solve(system)
}

struct Search<'a> {
    sys: &'a AffinitySystem,
    n: usize,
    /// For each vertex i, source edges `(es, j)` with `j < i`.
    back_edges: Vec<Vec<(usize, usize)>>,
    assignment: Vec<usize>,
    used: Vec<bool>,
    best: Option<(Vec<usize>, f64)>,
    nodes: u64,
    node_limit: u64,
}

impl Search<'_> {
    fn vertex_bound(&self, depth: usize) -> f64 {
        let free: Vec<usize> = (0..self.n).filter(|&a| !self.used[a]).collect();
        let m = free.len();
        if m == 0 {
            return 0.0;
        }
        let cost = Array2::from_shape_fn((m, m), |(r, c)| -self.sys.c_v[[depth + r, free[c]]]);
        let cols = min_cost_assignment(&cost);
        cols.iter()
            .enumerate()
            .map(|(r, &c)| -cost[[r, c]])
            .sum()
    }

    fn edge_bound(&self, depth: usize) -> f64 {
        let sys = self.sys;
        let mut total = 0.0;
        for (es, &(i, j)) in sys.edges_s.iter().enumerate() {
            if j < depth {
                continue;
            }
            let mut best: f64 = 0.0;
            for (et, &(a, b)) in sys.edges_t.iter().enumerate() {
                let c = sys.c_e[[es, et]];
                if i < depth {
                    let ai = self.assignment[i];
                    if ai == a && !self.used[b] {
                        best = best.max(c);
                    } else if ai == b && !self.used[a] {
                        best = best.max(-c);
                    }
                } else if !self.used[a] && !self.used[b] {
                    best = best.max(c.abs());
                }
            }
            total += best;
        }
        total
    }

    fn consider_leaf(&mut self) {
        let obj = self.sys.objective(&self.assignment);
        let better = match &self.best {
            None => true,
            Some((best, best_obj)) => {
                obj < best_obj - 1e-12
                    || ((obj - best_obj).abs() <= 1e-12 && self.assignment < *best)
            }
        };
        if better {
            self.best = Some((self.assignment.clone(), obj));
        }
    }

    fn dfs(&mut self, depth: usize, gain: f64) -> Result<()> {
        self.nodes += 1;
        if self.nodes > self.node_limit {
            return Err(Error::NodeLimit(self.node_limit));
        }
        if depth == self.n {
            self.consider_leaf();
            return Ok(());
        }
        if let Some((_, best_obj)) = &self.best {
            let bound = gain + self.vertex_bound(depth) + self.edge_bound(depth);
            if bound < -best_obj - TOL {
                return Ok(());
            }
        }
        for a in 0..self.n {
            if self.used[a] {
                continue;
            }
            let mut delta = self.sys.c_v[[depth, a]];
            for &(es, j) in &self.back_edges[depth] {
                if let Some((et, sign)) = self.sys.target_edge(self.assignment[j], a) {
                    delta += f64::from(sign) * self.sys.c_e[[es, et]];
                }
            }
            self.assignment[depth] = a;
            self.used[a] = true;
            self.dfs(depth + 1, gain + delta)?;
            self.used[a] = false;
        }
        Ok(())
    }
}

impl MatchSolver for ExactSolver {
    fn mode(&self) -> SolverMode {
        SolverMode::Exact
    }

    fn solve(&self, system: &AffinitySystem) -> Result<Matching> {
        let n = system.n();
        if n > self.cap {
            return Err(Error::ExactCapExceeded { n, cap: self.cap });
        }
        if !system.is_finite() {
            return Err(Error::NonFiniteInput);
        }
        let mut back_edges = vec![Vec::new(); n];
        for (es, &(i, j)) in system.edges_s.iter().enumerate() {
            back_edges[j].push((es, i));
        }
        let mut search = Search {
            sys: system,
            n,
            back_edges,
            assignment: vec![0; n],
            used: vec![false; n],
            best: None,
            nodes: 0,
            node_limit: self.node_limit,
        };
        // Seed the incumbent so pruning starts at the root.
        let seed = super::heuristic::local_search(system, super::DEFAULT_MAX_ITERS, None)?;
        search.best = Some((seed.clone(), system.objective(&seed)));
        search.dfs(0, 0.0)?;
        let (assignment, objective) = search.best.expect("seeded");
        Ok(Matching {
            assignment,
            objective,
            mode: SolverMode::Exact,
        })
    }
}
