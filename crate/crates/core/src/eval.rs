//! Matching accuracy, duplicate disambiguation, solver quality and a linear
//! probe on frozen embeddings.

use std::collections::BTreeSet;
use std::fmt;
use std::time::Instant;

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::Rng as _;
use rayon::prelude::*;

use crate::ablation::Plan;
use crate::affinity::AffinitySystem;
use crate::augment::{self, TransformSpec, NORM_MEAN, NORM_STD};
use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::matcher::{solve_exact, solve_heuristic, DEFAULT_MAX_ITERS, DEFAULT_NODE_LIMIT};
use crate::rng::{self, Rng};
use crate::synth::{Corpus, SourceImage};
use crate::trainer::{forward_graph, solver_registry, Model};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchReport {
    pub match_acc: f64,
    /// `None` when the pool holds no duplicate pair.
    pub dup_disambig: Option<f64>,
}

/// Accuracy of the unperturbed solve on one batch, plus the positions of the
/// batch members that were correctly matched.
fn solve_batch(
    model: &Model,
    batch: &[&SourceImage],
    cfg: &TrainConfig,
    plan: &Plan,
    aug: &mut Rng,
) -> Result<Vec<bool>> {
    let fw = forward_graph(model, batch, cfg, plan, aug)?;
    if !fw.system.is_finite() {
        return Err(Error::NumericOverflow("evaluation affinities".into()));
    }
    let registry = solver_registry();
    let m = registry.for_mode(plan.solver_mode)?.solve(&fw.system)?;
    Ok(m.assignment.iter().enumerate().map(|(i, &a)| i == a).collect())
}

/// Batches for the duplicate score: exactly one duplicate pair plus members
/// that share no group with each other.
fn dup_batch(corpus: &Corpus, pool: &[usize], n: usize, rng: &mut Rng) -> Option<(Vec<usize>, [usize; 2])> {
    let mut groups: Vec<Vec<usize>> = Vec::new();
    let mut ids: Vec<u32> = Vec::new();
    for &i in pool {
        if let Some(g) = corpus.images[i].dup_group {
            match ids.iter().position(|&x| x == g) {
                Some(k) => groups[k].push(i),
                None => {
                    ids.push(g);
                    groups.push(vec![i]);
                }
            }
        }
    }
    let pairs: Vec<&Vec<usize>> = groups.iter().filter(|g| g.len() >= 2).collect();
    if pairs.is_empty() {
        return None;
    }
    let chosen = pairs[rng.random_range(0..pairs.len())];
    let mut pick = chosen.clone();
    pick.shuffle(rng);
    let pair = [pick[0], pick[1]];
    let group = corpus.images[pair[0]].dup_group;
    let mut used: BTreeSet<u32> = BTreeSet::new();
    let mut others: Vec<usize> = pool
        .iter()
        .copied()
        .filter(|&i| corpus.images[i].dup_group != group)
        .collect();
    others.shuffle(rng);
    let mut batch = pair.to_vec();
    for i in others {
        if batch.len() == n {
            break;
        }
        if let Some(g) = corpus.images[i].dup_group {
            if !used.insert(g) {
                continue;
            }
        }
        batch.push(i);
    }
    if batch.len() < n {
        return None;
    }
    batch.shuffle(rng);
    Some((batch, pair))
}

/// Averages over `trials` fresh batches from `pool`.
pub fn eval_matching(
    model: &Model,
    corpus: &Corpus,
    pool: &[usize],
    cfg: &TrainConfig,
    plan: &Plan,
    trials: usize,
    seed: u64,
) -> Result<MatchReport> {
    if trials == 0 {
        return Err(Error::param("trials must be at least 1"));
    }
    let n = cfg.batch_size;
    if pool.len() < n {
        return Err(Error::param(format!("pool of {} cannot fill a batch of {n}", pool.len())));
    }
    let accs: Vec<f64> = (0..trials)
        .into_par_iter()
        .map(|t| {
            let mut r = rng::indexed_stream(seed, rng::EVAL, t as u64);
            let idx = crate::synth::sample_indices(pool, &mut r, n)?;
            let batch: Vec<&SourceImage> = idx.iter().map(|&i| &corpus.images[i]).collect();
            let hits = solve_batch(model, &batch, cfg, plan, &mut r)?;
            Ok(hits.iter().filter(|&&h| h).count() as f64 / n as f64)
        })
        .collect::<Result<_>>()?;
    let dup: Vec<Option<f64>> = (0..trials)
        .into_par_iter()
        .map(|t| {
            let mut r = rng::indexed_stream(seed, "eval-dup", t as u64);
            let Some((idx, pair)) = dup_batch(corpus, pool, n, &mut r) else {
                return Ok(None);
            };
            let batch: Vec<&SourceImage> = idx.iter().map(|&i| &corpus.images[i]).collect();
            let hits = solve_batch(model, &batch, cfg, plan, &mut r)?;
            let correct = idx
                .iter()
                .zip(&hits)
                .filter(|(i, h)| pair.contains(i) && **h)
                .count();
            Ok(Some(correct as f64 / 2.0))
        })
        .collect::<Result<_>>()?;
    let dup: Vec<f64> = dup.into_iter().flatten().collect();
    Ok(MatchReport {
        match_acc: accs.iter().sum::<f64>() / trials as f64,
        dup_disambig: (!dup.is_empty()).then(|| dup.iter().sum::<f64>() / dup.len() as f64),
    })
}

/// Random instance: uniform `c_v`, `c_e` in [-1, 1) and edges present with
/// probability `edge_prob`.
pub fn random_system(n: usize, edge_prob: f64, rng: &mut Rng) -> Result<AffinitySystem> {
    let c_v = Array2::from_shape_fn((n, n), |_| rng.random_range(-1.0..1.0));
    let mut edges = || -> Vec<(usize, usize)> {
        let mut e = Vec::new();
        for i in 0..n {
            for j in i + 1..n {
                if rng.random_bool(edge_prob) {
                    e.push((i, j));
                }
            }
        }
        e
    };
    let (es, et) = (edges(), edges());
    let c_e = Array2::from_shape_fn((es.len(), et.len()), |_| rng.random_range(-1.0..1.0));
    AffinitySystem::new(c_v, es, et, c_e)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverQuality {
    /// `(heuristic − exact) / |exact|` per instance.
    pub gaps: Vec<f64>,
    pub mean_gap: f64,
    pub exact_median_ms: f64,
    pub heuristic_median_ms: f64,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let k = v.len();
    if k == 0 {
        0.0
    } else if k % 2 == 1 {
        v[k / 2]
    } else {
        0.5 * (v[k / 2 - 1] + v[k / 2])
    }
}

pub fn solver_quality(n_instances: usize, n: usize, rng: &mut Rng) -> Result<SolverQuality> {
    let mut gaps = Vec::with_capacity(n_instances);
    let mut t_exact = Vec::with_capacity(n_instances);
    let mut t_heur = Vec::with_capacity(n_instances);
    for _ in 0..n_instances {
        let sys = random_system(n, 0.5, rng)?;
        let t0 = Instant::now();
        let exact = solve_exact(&sys, DEFAULT_NODE_LIMIT)?;
        t_exact.push(t0.elapsed().as_secs_f64() * 1e3);
        let t1 = Instant::now();
        let heur = solve_heuristic(&sys, DEFAULT_MAX_ITERS)?;
        t_heur.push(t1.elapsed().as_secs_f64() * 1e3);
        let diff = heur.objective - exact.objective;
        gaps.push(if diff == 0.0 { 0.0 } else { diff / exact.objective.abs() });
    }
    let mean_gap = if gaps.is_empty() { 0.0 } else { gaps.iter().sum::<f64>() / gaps.len() as f64 };
    Ok(SolverQuality {
        gaps,
        mean_gap,
        exact_median_ms: median(t_exact),
        heuristic_median_ms: median(t_heur),
    })
}

/// Encoder embeddings of the unaugmented, normalized images.
pub fn embed_images(model: &Model, images: &[&SourceImage]) -> Result<Array2<f64>> {
    let rows: Vec<Array1<f64>> = images
        .par_iter()
        .map(|img| {
            let spec = TransformSpec {
                normalize: Some((NORM_MEAN, NORM_STD)),
                ..TransformSpec::identity(img.size())
            };
            model.embed(&augment::apply(img, &spec).0)
        })
        .collect::<Result<_>>()?;
    let f = model.embed_dim();
    Ok(Array2::from_shape_fn((rows.len(), f), |(i, k)| rows[i][k]))
}

const PROBE_ITERS: usize = 500;
const PROBE_LR: f64 = 0.5;
const PROBE_L2: f64 = 1e-4;

/// Held-out accuracy of a softmax classifier trained by full-batch gradient
/// descent on standardized features, 80/20 split.
pub fn linear_probe(embeddings: &Array2<f64>, labels: &[u32], split_seed: u64) -> Result<f64> {
    let n = embeddings.nrows();
    if labels.len() != n {
        return Err(Error::contract("one label per embedding row required"));
    }
    let classes: Vec<u32> = labels.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
    if classes.len() < 2 {
        return Err(Error::param("linear probe needs at least two classes"));
    }
    let y: Vec<usize> = labels.iter().map(|l| classes.binary_search(l).expect("present")).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(split_seed, rng::EVAL));
    let cut = ((0.8 * n as f64).round() as usize).clamp(1, n - 1);
    let (train, test) = order.split_at(cut);

    let f = embeddings.ncols();
    let mut mean = Array1::<f64>::zeros(f);
    for &i in train {
        mean += &embeddings.row(i);
    }
    mean /= train.len() as f64;
    let mut std = Array1::<f64>::zeros(f);
    for &i in train {
        let d = &embeddings.row(i) - &mean;
        std += &(&d * &d);
    }
    std.mapv_inplace(|v| (v / train.len() as f64).sqrt().max(1e-8));
    let x = |i: usize| (&embeddings.row(i) - &mean) / &std;
    let xs_train: Vec<Array1<f64>> = train.iter().map(|&i| x(i)).collect();

    let k = classes.len();
    let mut w = Array2::<f64>::zeros((k, f));
    let mut b = Array1::<f64>::zeros(k);
    let softmax = |w: &Array2<f64>, b: &Array1<f64>, xi: &Array1<f64>| -> Array1<f64> {
        let logits = w.dot(xi) + b;
        let m = logits.fold(f64::NEG_INFINITY, |a, &v| a.max(v));
        let e = logits.mapv(|v| (v - m).exp());
        let s = e.sum();
        e / s
    };
    for _ in 0..PROBE_ITERS {
        let mut gw = &w * PROBE_L2;
        let mut gb = Array1::<f64>::zeros(k);
        for (xi, &i) in xs_train.iter().zip(train) {
            let mut p = softmax(&w, &b, xi);
            p[y[i]] -= 1.0;
            for c in 0..k {
                gw.row_mut(c).scaled_add(p[c] / train.len() as f64, xi);
            }
            gb.scaled_add(1.0 / train.len() as f64, &p);
        }
        w.scaled_add(-PROBE_LR, &gw);
        b.scaled_add(-PROBE_LR, &gb);
    }
    let correct = test
        .iter()
        .filter(|&&i| {
            let p = softmax(&w, &b, &x(i));
            let pred = (0..k).max_by(|&a, &c| p[a].total_cmp(&p[c]).then(c.cmp(&a))).expect("k >= 2");
            pred == y[i]
        })
        .count();
    Ok(correct as f64 / test.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub match_acc: f64,
    pub dup_disambig: Option<f64>,
    pub solver_gap: f64,
    pub probe_acc: f64,
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "match_acc={:.6}", self.match_acc)?;
        match self.dup_disambig {
            Some(d) => writeln!(f, "dup_disambig={d:.6}")?,
            None => writeln!(f, "dup_disambig=absent")?,
        }
        writeln!(f, "solver_gap={:.6}", self.solver_gap)?;
        writeln!(f, "probe_acc={:.6}", self.probe_acc)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn probe_separable_and_single_class() {
        let mut r = rng::stream(1, "probe");
        let labels: Vec<u32> = (0..200).map(|i| (i % 3) as u32).collect();
        let emb = Array2::from_shape_fn((200, 4), |(i, k)| {
            let c = labels[i] as usize;
            (if k == c { 3.0 } else { 0.0 }) + r.random_range(-0.3..0.3)
        });
        assert_eq!(linear_probe(&emb, &labels, 5).unwrap(), 1.0);
        assert!(linear_probe(&emb, &vec![1; 200], 5).is_err());
    }

    #[test]
    fn zero_edge_instances_have_zero_gap() {
        let mut r = rng::stream(2, "gap");
        for _ in 0..20 {
            let sys = random_system(6, 0.0, &mut r).unwrap();
            let e = solve_exact(&sys, DEFAULT_NODE_LIMIT).unwrap();
            let h = solve_heuristic(&sys, DEFAULT_MAX_ITERS).unwrap();
            assert_eq!(e.objective, h.objective);
        }
        let q = solver_quality(10, 6, &mut r).unwrap();
        assert!(q.gaps.iter().all(|g| *g >= -1e-9));
    }

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(vec![3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(vec![4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
