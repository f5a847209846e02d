use gmssl_core::affinity::AffinitySystem;
use gmssl_core::eval::random_system;
use gmssl_core::matcher::{solve_exact, solve_heuristic, solve_lap, DEFAULT_MAX_ITERS, DEFAULT_NODE_LIMIT};
use gmssl_core::rng;
use gmssl_core::Error;
use ndarray::Array2;

/// Objective recomputed straight from the tables: aligned edge pairs add
/// `c_e`, crossed ones subtract it, and the total is negated.
fn objective(sys: &AffinitySystem, perm: &[usize]) -> f64 {
    let mut score: f64 = perm.iter().enumerate().map(|(i, &a)| sys.c_v[[i, a]]).sum();
    for (x, &(i, j)) in sys.edges_s.iter().enumerate() {
        for (y, &(a, b)) in sys.edges_t.iter().enumerate() {
            if (perm[i], perm[j]) == (a, b) {
                score += sys.c_e[[x, y]];
            } else if (perm[i], perm[j]) == (b, a) {
                score -= sys.c_e[[x, y]];
            }
        }
    }
    -score
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for slot in 0..n {
            let mut q = p.clone();
            q.insert(slot, n - 1);
            out.push(q);
        }
    }
    out
}

fn brute_force(sys: &AffinitySystem) -> f64 {
    permutations(sys.n())
        .iter()
        .map(|p| objective(sys, p))
        .fold(f64::INFINITY, f64::min)
}

#[test]
fn enumeration_sees_every_permutation() {
    let all = permutations(5);
    assert_eq!(all.len(), 120);
    let mut sorted = all.clone();
    sorted.sort();
    sorted.dedup();
    assert_eq!(sorted.len(), 120);
}

#[test]
fn exact_matches_enumeration_on_small_instances() {
    let mut g = rng::stream(11, "solvers");
    for n in 1..=6 {
        for _ in 0..30 {
            let sys = random_system(n, 0.5, &mut g).unwrap();
            let exact = solve_exact(&sys, DEFAULT_NODE_LIMIT).unwrap();
            let best = brute_force(&sys);
            assert!((exact.objective - best).abs() < 1e-9, "n={n}: {} vs {best}", exact.objective);
            assert!((objective(&sys, &exact.assignment) - best).abs() < 1e-9);
        }
    }
}

#[test]
fn heuristic_is_never_better_than_exact() {
    let mut g = rng::stream(12, "solvers");
    for _ in 0..100 {
        let sys = random_system(6, 0.5, &mut g).unwrap();
        let exact = solve_exact(&sys, DEFAULT_NODE_LIMIT).unwrap();
        let heur = solve_heuristic(&sys, DEFAULT_MAX_ITERS).unwrap();
        assert!(heur.objective >= exact.objective - 1e-12);
        assert!((objective(&sys, &heur.assignment) - heur.objective).abs() < 1e-9);
    }
}

#[test]
fn without_edges_all_solvers_agree() {
    let mut g = rng::stream(13, "solvers");
    for n in 1..=8 {
        let sys = random_system(n, 0.0, &mut g).unwrap();
        let lap = solve_lap(&sys.c_v).unwrap();
        let exact = solve_exact(&sys, DEFAULT_NODE_LIMIT).unwrap();
        let heur = solve_heuristic(&sys, DEFAULT_MAX_ITERS).unwrap();
        assert_eq!(lap.objective, exact.objective);
        assert_eq!(heur.objective, exact.objective);
    }
}

#[test]
fn lap_finds_a_planted_optimum() {
    let n = 12;
    let plant: Vec<usize> = (0..n).map(|i| (i * 5) % n).collect();
    let c_v = Array2::from_shape_fn((n, n), |(i, a)| if plant[i] == a { 1.0 } else { -0.1 * ((i * 7 + a * 3) % 5) as f64 });
    let m = solve_lap(&c_v).unwrap();
    assert_eq!(m.assignment, plant);
    assert_eq!(m.objective, -(n as f64));
}

#[test]
fn exact_refuses_graphs_above_the_cap() {
    let sys = random_system(11, 0.3, &mut rng::stream(14, "solvers")).unwrap();
    let err = solve_exact(&sys, DEFAULT_NODE_LIMIT).unwrap_err();
    assert!(matches!(err, Error::ExactCapExceeded { n: 11, cap: 10 }), "{err}");
}
