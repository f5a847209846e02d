//! Perturb-and-solve forward pass and the finite-difference gradient
//! estimator for the matching layer.

use ndarray::Array2;
use rand::Rng as _;

use crate::affinity::AffinitySystem;
use crate::error::{Error, Result};
use crate::matcher::{is_permutation, MatchSolver, Matching};
use crate::rng::Rng;

pub const EULER_MASCHERONI: f64 = 0.577_215_664_901_532_9;
const UNIFORM_CLIP: f64 = 1e-12;

/// Standard Gumbel draws `-ln(-ln u)` with `u` clipped to `(1e-12, 1 - 1e-12)`.
pub fn gumbel_sample(rng: &mut Rng, len: usize) -> Vec<f64> {
    (0..len)
        .map(|_| {
            let u: f64 = rng.random::<f64>().clamp(UNIFORM_CLIP, 1.0 - UNIFORM_CLIP);
            -(-u.ln()).ln()
        })
        .collect()
}

pub fn gumbel_array(rng: &mut Rng, shape: (usize, usize)) -> Array2<f64> {
    Array2::from_shape_vec(shape, gumbel_sample(rng, shape.0 * shape.1)).expect("sized draw")
}

/// The known correspondence; the identity under canonical batch order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GoldMatching {
    pub v_star: Vec<usize>,
}

impl GoldMatching {
    pub fn identity(n: usize) -> Self {
        GoldMatching {
            v_star: (0..n).collect(),
        }
    }

    pub fn new(v_star: Vec<usize>) -> Result<Self> {
        if !is_permutation(&v_star) {
            return Err(Error::contract("gold matching must be a permutation"));
        }
        Ok(GoldMatching { v_star })
    }

    pub fn indicator(&self) -> Array2<f64> {
        indicator(&self.v_star)
    }

    /// `∂L/∂ṽ` of the Hamming loss: `1 - 2·v*`, independent of ṽ.
    pub fn hamming_gradient(&self) -> Array2<f64> {
        self.indicator().mapv(|v| 1.0 - 2.0 * v)
    }
}

fn indicator(assignment: &[usize]) -> Array2<f64> {
    let n = assignment.len();
    let mut v = Array2::zeros((n, n));
    for (i, &a) in assignment.iter().enumerate() {
        v[[i, a]] = 1.0;
    }
    v
}

/// `v̂·(1 - v*) + v*·(1 - v̂)` over the N × N indicators.
pub fn hamming_loss(v_hat: &[usize], gold: &GoldMatching) -> Result<f64> {
    if v_hat.len() != gold.v_star.len() {
        return Err(Error::contract(format!(
            "matching of size {} compared with gold of size {}",
            v_hat.len(),
            gold.v_star.len()
        )));
    }
    let vh = indicator(v_hat);
    let vs = gold.indicator();
    Ok((&vh * &vs.mapv(|x| 1.0 - x)).sum() + (&vs * &vh.mapv(|x| 1.0 - x)).sum())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImleConfig {
    /// Finite-difference step λ.
    pub lambda: f64,
    /// Multiplier on the Gumbel draws; 0 takes the deterministic path.
    pub noise_scale: f64,
    /// Constant added to every affinity (used when noise is disabled).
    pub offset: f64,
}

impl Default for ImleConfig {
    fn default() -> Self {
        ImleConfig {
            lambda: 80.0,
            noise_scale: 1.0,
            offset: 0.0,
        }
    }
}

impl ImleConfig {
    pub fn is_deterministic(&self) -> bool {
        self.noise_scale == 0.0
    }
}

/// Gradients w.r.t. the vertex and edge affinity blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct ImleGrads {
    pub c_v: Array2<f64>,
    pub c_e: Array2<f64>,
}

impl ImleGrads {
    pub fn zeros(system: &AffinitySystem) -> Self {
        ImleGrads {
            c_v: Array2::zeros(system.c_v.dim()),
            c_e: Array2::zeros(system.c_e.dim()),
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.c_v.iter().chain(self.c_e.iter()).copied().collect()
    }
}

/// Signed usage of each `c_e` entry: `+1` aligned, `-1` crossed, 0 unused.
pub fn edge_usage(system: &AffinitySystem, assignment: &[usize]) -> Array2<f64> {
    let mut u = Array2::zeros(system.c_e.dim());
    for e in system.edge_uses(assignment) {
        u[[e.source_edge, e.target_edge]] = f64::from(e.sign);
    }
    u
}

struct Saved {
    perturbed: AffinitySystem,
    v_tilde: Matching,
}

/// What the forward pass keeps for its single backward pass.
pub struct ImleState<'s> {
    solver: &'s dyn MatchSolver,
    lambda: f64,
    pub noise_v: Array2<f64>,
    pub noise_e: Array2<f64>,
    pub deterministic: bool,
    saved: Option<Saved>,
}

/// Solves the perturbed instance `(c_v + ε, c_e + ε')`.
pub fn forward<'s>(
    system: &AffinitySystem,
    solver: &'s dyn MatchSolver,
    config: &ImleConfig,
    rng: &mut Rng,
) -> Result<(Matching, ImleState<'s>)> {
    if !(config.lambda > 0.0) {
        return Err(Error::param(format!("lambda must be positive, got {}", config.lambda)));
    }
    if config.noise_scale < 0.0 {
        return Err(Error::param("noise_scale must be non-negative"));
    }
    let deterministic = config.is_deterministic();
    let (mut noise_v, mut noise_e) = if deterministic {
        (Array2::zeros(system.c_v.dim()), Array2::zeros(system.c_e.dim()))
    } else {
        let nv = gumbel_array(rng, system.c_v.dim()) * config.noise_scale;
        let ne = gumbel_array(rng, system.c_e.dim()) * config.noise_scale;
        (nv, ne)
    };
    if config.offset != 0.0 {
        noise_v += config.offset;
        noise_e += config.offset;
    }
    let perturbed = system.shifted(&noise_v, &noise_e);
    let v_tilde = solver.solve(&perturbed)?;
    Ok((
        v_tilde.clone(),
        ImleState {
            solver,
            lambda: config.lambda,
            noise_v,
            noise_e,
            deterministic,
            saved: Some(Saved { perturbed, v_tilde }),
        },
    ))
}

impl ImleState<'_> {
    pub fn v_tilde(&self) -> Option<&Matching> {
        self.saved.as_ref().map(|s| &s.v_tilde)
    }

    /// Single-sample estimate `(ṽ - GM(θ + ε - λ ∇_ṽ L)) / λ`. The loss
    /// depends on vertices only, so the edge block is not tilted.
    pub fn backward(&mut self, grad_vtilde: &Array2<f64>) -> Result<ImleGrads> {
        let saved = self.saved.take().ok_or(Error::StateConsumed)?;
        if grad_vtilde.dim() != saved.perturbed.c_v.dim() {
            return Err(Error::contract("∇ṽL must be N × N"));
        }
        let mut tilted = saved.perturbed.clone();
        tilted.c_v.scaled_add(-self.lambda, grad_vtilde);
        let v_lambda = self.solver.solve(&tilted)?;
        let inv = 1.0 / self.lambda;
        let c_v = (indicator(&saved.v_tilde.assignment) - indicator(&v_lambda.assignment)) * inv;
        let c_e = (edge_usage(&saved.perturbed, &saved.v_tilde.assignment)
            - edge_usage(&saved.perturbed, &v_lambda.assignment))
            * inv;
        Ok(ImleGrads { c_v, c_e })
    }
}

/// Mean of `samples` independent single-sample estimates for the Hamming loss
/// against `gold`.
pub fn estimate_gradient(
    system: &AffinitySystem,
    solver: &dyn MatchSolver,
    config: &ImleConfig,
    gold: &GoldMatching,
    samples: usize,
    rng: &mut Rng,
) -> Result<ImleGrads> {
    if samples == 0 {
        return Err(Error::param("need at least one IMLE sample"));
    }
    let grad_v = gold.hamming_gradient();
    let mut acc = ImleGrads::zeros(system);
    for _ in 0..samples {
        let (_, mut state) = forward(system, solver, config, rng)?;
        let g = state.backward(&grad_v)?;
        acc.c_v += &g.c_v;
        acc.c_e += &g.c_e;
    }
    let k = 1.0 / samples as f64;
    acc.c_v *= k;
    acc.c_e *= k;
    Ok(acc)
}

/// Unbiased estimate of `∇_θ E[L(GM(θ + s·ε))]` by the score-function
/// identity: each entry averages `(L - L̄)·(1 - e^{-ε})/s`, with `L̄` the loss
/// at the unperturbed optimum as a control variate.
pub fn score_function_gradient(
    system: &AffinitySystem,
    solver: &dyn MatchSolver,
    noise_scale: f64,
    gold: &GoldMatching,
    samples: usize,
    rng: &mut Rng,
) -> Result<ImleGrads> {
    if !(noise_scale > 0.0) || samples == 0 {
        return Err(Error::param("score-function oracle needs noise and samples"));
    }
    let baseline = hamming_loss(&solver.solve(system)?.assignment, gold)?;
    let mut acc = ImleGrads::zeros(system);
    for _ in 0..samples {
        let nv = gumbel_array(rng, system.c_v.dim());
        let ne = gumbel_array(rng, system.c_e.dim());
        let v = solver.solve(&system.shifted(&(&nv * noise_scale), &(&ne * noise_scale)))?;
        let w = hamming_loss(&v.assignment, gold)? - baseline;
        if w != 0.0 {
            acc.c_v.zip_mut_with(&nv, |a, &e| *a += w * (1.0 - (-e).exp()));
            acc.c_e.zip_mut_with(&ne, |a, &e| *a += w * (1.0 - (-e).exp()));
        }
    }
    let k = 1.0 / (samples as f64 * noise_scale);
    acc.c_v *= k;
    acc.c_e *= k;
    Ok(acc)
}

/// Three-vertex probe with every edge present: a gold-leaning diagonal,
/// one near-tie between vertices 1 and 2, and small edge affinities.
pub fn probe_instance() -> AffinitySystem {
    let c_v = ndarray::array![[0.6, 0.1, -0.2], [0.0, 0.3, 0.25], [-0.1, 0.2, 0.3]];
    let edges = vec![(0, 1), (0, 2), (1, 2)];
    let c_e = ndarray::array![[0.2, -0.1, 0.0], [0.1, 0.3, -0.2], [0.0, 0.1, 0.1]];
    AffinitySystem::new(c_v, edges.clone(), edges, c_e).expect("valid probe")
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb).max(1e-300)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matcher::{ExactSolver, HeuristicSolver, LapSolver};
    use crate::rng;
    use ndarray::{array, Array};

    fn all_permutations(n: usize) -> Vec<Vec<usize>> {
        if n == 0 {
            return vec![vec![]];
        }
        let mut out = Vec::new();
        for p in all_permutations(n - 1) {
            for k in 0..n {
                let mut q = p.clone();
                q.insert(k, n - 1);
                out.push(q);
            }
        }
        out
    }

    #[test]
    fn hamming_identities() {
        let gold = GoldMatching::identity(4);
        assert_eq!(hamming_loss(&[0, 1, 2, 3], &gold).unwrap(), 0.0);
        assert_eq!(hamming_loss(&[1, 2, 3, 0], &gold).unwrap(), 8.0);
        assert_eq!(hamming_loss(&[0, 2, 1, 3], &gold).unwrap(), 4.0);
        assert!(matches!(hamming_loss(&[0, 1], &gold), Err(Error::Contract(_))));
        for n in 1..=5 {
            let perms = all_permutations(n);
            for a in &perms {
                let g = GoldMatching::new(a.clone()).unwrap();
                assert_eq!(hamming_loss(a, &g).unwrap(), 0.0);
                for b in &perms {
                    let mismatches = a.iter().zip(b).filter(|(x, y)| x != y).count();
                    assert_eq!(hamming_loss(b, &g).unwrap(), 2.0 * mismatches as f64);
                }
            }
        }
    }

    #[test]
    fn gumbel_is_reproducible() {
        let a = gumbel_sample(&mut rng::stream(1, rng::GUMBEL), 100);
        let b = gumbel_sample(&mut rng::stream(1, rng::GUMBEL), 100);
        assert_eq!(a, b);
        assert!(a.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn zero_noise_matches_plain_solve() {
        let mut g = rng::stream(3, "imle");
        let c_v = Array::from_shape_fn((5, 5), |_| g.random_range(-1.0..1.0));
        let sys = AffinitySystem::vertex_only(c_v).unwrap();
        let cfg = ImleConfig {
            noise_scale: 0.0,
            ..ImleConfig::default()
        };
        let (m, state) = forward(&sys, &LapSolver, &cfg, &mut g).unwrap();
        assert!(state.deterministic);
        assert_eq!(m, LapSolver.solve(&sys).unwrap());
    }

    #[test]
    fn backward_is_single_use_and_zero_for_zero_loss_gradient() {
        let mut g = rng::stream(4, "imle");
        let c_v = Array::from_shape_fn((4, 4), |_| g.random_range(-1.0..1.0));
        let sys = AffinitySystem::new(c_v, vec![(0, 1), (1, 2)], vec![(0, 1), (2, 3)], array![[0.3, -0.2], [0.1, 0.5]])
            .unwrap();
        let solver = HeuristicSolver::default();
        let (_, mut state) = forward(&sys, &solver, &ImleConfig::default(), &mut g).unwrap();
        let grads = state.backward(&Array2::zeros((4, 4))).unwrap();
        assert!(grads.c_v.iter().chain(grads.c_e.iter()).all(|v| *v == 0.0));
        assert!(matches!(
            state.backward(&Array2::zeros((4, 4))),
            Err(Error::StateConsumed)
        ));
    }

    #[test]
    fn single_sample_structure() {
        let mut g = rng::stream(5, "imle");
        let gold = GoldMatching::identity(5);
        let lambda = 80.0;
        let solver = ExactSolver::default();
        for _ in 0..50 {
            let c_v = Array::from_shape_fn((5, 5), |_| g.random_range(-1.0..1.0));
            let edges = vec![(0, 1), (1, 3), (2, 4)];
            let c_e = Array::from_shape_fn((3, 3), |_| g.random_range(-1.0..1.0));
            let sys = AffinitySystem::new(c_v, edges.clone(), edges, c_e).unwrap();
            let cfg = ImleConfig {
                lambda,
                ..ImleConfig::default()
            };
            let (_, mut state) = forward(&sys, &solver, &cfg, &mut g).unwrap();
            let grads = state.backward(&gold.hamming_gradient()).unwrap();
            assert!(grads.c_v.sum().abs() < 1e-12);
            for v in grads.c_v.iter() {
                let k = v * lambda;
                assert!([-1.0, 0.0, 1.0].iter().any(|x| (k - x).abs() < 1e-12));
            }
            for v in grads.c_e.iter() {
                let k = v * lambda;
                assert!((k - k.round()).abs() < 1e-12 && k.abs() <= 2.0);
            }
        }
    }

    #[test]
    fn noiseless_small_lambda_gives_zero_gradient() {
        // Unique optimum with a clear margin: a tiny tilt does not move the solution.
        let c_v = array![[1.0, 0.0, 0.0], [0.0, 0.2, 0.9], [0.0, 0.8, 0.1]];
        let sys = AffinitySystem::vertex_only(c_v).unwrap();
        let cfg = ImleConfig {
            lambda: 1e-3,
            noise_scale: 0.0,
            offset: 0.0,
        };
        let gold = GoldMatching::identity(3);
        let grads = estimate_gradient(&sys, &ExactSolver::default(), &cfg, &gold, 1, &mut rng::stream(0, "x"))
            .unwrap();
        assert!(grads.c_v.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn rejects_non_positive_lambda() {
        let sys = AffinitySystem::vertex_only(Array2::eye(2)).unwrap();
        let cfg = ImleConfig {
            lambda: 0.0,
            ..ImleConfig::default()
        };
        assert!(forward(&sys, &LapSolver, &cfg, &mut rng::stream(0, "x")).is_err());
    }
}
