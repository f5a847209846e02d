use ndarray::Array2;

use super::{Matching, MatchSolver, SolverMode};
use crate::affinity::AffinitySystem;
use crate::error::{Error, Result};

/// Minimum-cost perfect assignment by shortest augmenting paths with dual
/// potentials, O(N³). Returns `assignment[row] = col`.
pub(crate) fn min_cost_assignment(cost: &Array2<f64>) -> Vec<usize> {
    let n = cost.nrows();
    if n == 0 {
        return Vec::new();
    }
    // 1-based internal indexing; column 0 is the virtual root.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut row_of = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        row_of[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = row_of[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[[i0 - 1, j - 1]] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[row_of[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if row_of[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            row_of[j0] = row_of[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0; n];
    for j in 1..=n {
        assignment[row_of[j] - 1] = j - 1;
    }
    assignment
}

/// Maximum-affinity one-to-one assignment on the vertex block alone.
pub(crate) fn lap_assignment(c_v: &Array2<f64>) -> Result<Vec<usize>> {
    if !c_v.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFiniteInput);
    }
    Ok(min_cost_assignment(&c_v.mapv(|v| -v)))
}

/// First-order solve of a vertex-affinity matrix.
pub fn solve_lap(c_v: &Array2<f64>) -> Result<Matching> {
    let system = AffinitySystem::vertex_only(c_v.clone())?;
    LapSolver.solve(&system)
}

/// Ignores edge affinities when choosing the assignment; the reported
/// objective still includes them.
#[derive(Debug, Clone, Copy, Default)]
pub struct LapSolver;

impl MatchSolver for LapSolver {
    fn mode(&self) -> SolverMode {
        SolverMode::LapOnly
    }

    fn solve(&self, system: &AffinitySystem) -> Result<Matching> {
        if !system.is_finite() {
            return Err(Error::NonFiniteInput);
        }
        let assignment = lap_assignment(&system.c_v)?;
        Ok(Matching {
            objective: system.objective(&assignment),
            assignment,
            mode: SolverMode::LapOnly,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use ndarray::Array;
    use rand::Rng as _;

    /// All permutations of 0..n in lexicographic order.
    pub(crate) fn permutations(n: usize) -> Vec<Vec<usize>> {
        let mut out = Vec::new();
        let mut cur: Vec<usize> = (0..n).collect();
        loop {
            out.push(cur.clone());
            let Some(i) = (1..n).rev().find(|&i| cur[i - 1] < cur[i]) else {
                return out;
            };
            let j = (i..n).rev().find(|&j| cur[j] > cur[i - 1]).unwrap();
            cur.swap(i - 1, j);
            cur[i..].reverse();
        }
    }

    #[test]
    fn identity_matrix() {
        let m = solve_lap(&Array2::eye(5)).unwrap();
        assert_eq!(m.assignment, vec![0, 1, 2, 3, 4]);
        assert_eq!(m.objective, -5.0);
    }

    #[test]
    fn permutation_of_ones() {
        let perm = [2, 0, 3, 1];
        let mut c = Array2::zeros((4, 4));
        for (i, &a) in perm.iter().enumerate() {
            c[[i, a]] = 1.0;
        }
        assert_eq!(solve_lap(&c).unwrap().assignment, perm.to_vec());
    }

    #[test]
    fn matches_enumeration() {
        let mut g = rng::stream(12, "lap");
        for _ in 0..50 {
            let c = Array::from_shape_fn((5, 5), |_| g.random_range(-1.0..1.0));
            let best = permutations(5)
                .into_iter()
                .map(|p| -(0..5).map(|i| c[[i, p[i]]]).sum::<f64>())
                .fold(f64::INFINITY, f64::min);
            let m = solve_lap(&c).unwrap();
            assert!((m.objective - best).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_non_finite() {
        let mut c = Array2::eye(3);
        c[[1, 2]] = f64::NAN;
        assert!(matches!(solve_lap(&c), Err(Error::NonFiniteInput)));
    }
}
