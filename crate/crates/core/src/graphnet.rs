//! kNN batch graphs and the shared graph-convolution network.

use ndarray::{Array2, Axis};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Source,
    Target,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchGraph {
    /// Node features X (N × F).
    pub features: Array2<f64>,
    /// Symmetric 0/1 adjacency with zero diagonal.
    pub adjacency: Array2<f64>,
    pub side: Side,
}

impl BatchGraph {
    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.nrows() == 0
    }

    /// Undirected edges as `(i, j)` with `i < j`, lexicographically sorted.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let n = self.len();
        let mut out = Vec::new();
        for i in 0..n {
            for j in i + 1..n {
                if self.adjacency[[i, j]] != 0.0 {
                    out.push((i, j));
                }
            }
        }
        out
    }

    /// `D^{-1/2} (A + I) D^{-1/2}` with degrees taken from `A + I`.
    pub fn propagation(&self) -> Array2<f64> {
        let n = self.len();
        let mut p = &self.adjacency + &Array2::<f64>::eye(n);
        let inv_sqrt: Vec<f64> = p.sum_axis(Axis(1)).iter().map(|d| d.powf(-0.5)).collect();
        for ((i, j), v) in p.indexed_iter_mut() {
            *v *= inv_sqrt[i] * inv_sqrt[j];
        }
        p
    }
}

fn cosine_matrix(x: &Array2<f64>) -> Array2<f64> {
    let norms: Vec<f64> = x
        .outer_iter()
        .map(|r| r.dot(&r).sqrt().max(1e-12))
        .collect();
    let mut sim = x.dot(&x.t());
    for ((i, j), v) in sim.indexed_iter_mut() {
        *v /= norms[i] * norms[j];
    }
    sim
}

/// Directed k-nearest neighbours by cosine distance (ties to the lower
/// index), symmetrized by union.
pub fn knn_graph(x: &Array2<f64>, k: usize, side: Side) -> Result<BatchGraph> {
    let n = x.nrows();
    if k == 0 || n <= k {
        return Err(Error::param(format!("kNN needs N > k >= 1 (N = {n}, k = {k})")));
    }
    let sim = cosine_matrix(x);
    let mut adjacency = Array2::zeros((n, n));
    let mut order: Vec<usize> = Vec::with_capacity(n - 1);
    for i in 0..n {
        order.clear();
        order.extend((0..n).filter(|&j| j != i));
        // Stable sort keeps the lower index first among equal similarities.
        order.sort_by(|&a, &b| sim[[i, b]].total_cmp(&sim[[i, a]]));
        for &j in &order[..k] {
            adjacency[[i, j]] = 1.0;
            adjacency[[j, i]] = 1.0;
        }
    }
    Ok(BatchGraph {
        features: x.clone(),
        adjacency,
        side,
    })
}

/// Layer weights `g_0 .. g_l`, each `[in, out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GcnParams {
    pub layers: Vec<Tensor>,
}

impl GcnParams {
    pub fn init(widths: &[usize], rng: &mut Rng) -> Self {
        let layers = widths
            .windows(2)
            .map(|w| Tensor::glorot_uniform(&[w[0], w[1]], w[0], w[1], rng))
            .collect();
        GcnParams { layers }
    }

    pub fn zeros_like(&self) -> Self {
        GcnParams {
            layers: self.layers.iter().map(Tensor::zeros_like).collect(),
        }
    }

    pub fn tensors(&self) -> Vec<(String, &Tensor)> {
        self.layers
            .iter()
            .enumerate()
            .map(|(k, t)| (format!("layer{k}"), t))
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        self.layers
            .iter_mut()
            .enumerate()
            .map(|(k, t)| (format!("layer{k}"), t))
            .collect()
    }

    fn matrix(t: &Tensor) -> Array2<f64> {
        Array2::from_shape_vec((t.shape[0], t.shape[1]), t.data.clone()).expect("rank-2 tensor")
    }
}

#[derive(Debug, Clone)]
pub struct GcnTrace {
    pub propagation: Array2<f64>,
    /// `P · H_{l-1}` for each layer.
    pub mixed: Vec<Array2<f64>>,
    pub pre: Vec<Array2<f64>>,
    pub output: Array2<f64>,
}

/// `H_l = σ(P H_{l-1} g_{l-1})`, ReLU on hidden layers and identity on the last.
pub fn gcn_forward(graph: &BatchGraph, params: &GcnParams) -> Result<GcnTrace> {
    let propagation = graph.propagation();
    let mut h = graph.features.clone();
    let mut mixed = Vec::with_capacity(params.layers.len());
    let mut pre = Vec::with_capacity(params.layers.len());
    for (l, w) in params.layers.iter().enumerate() {
        if w.shape[0] != h.ncols() {
            return Err(Error::contract(format!(
                "GCN layer {l} expects width {}, got {}",
                w.shape[0],
                h.ncols()
            )));
        }
        let m = propagation.dot(&h);
        let a = m.dot(&GcnParams::matrix(w));
        h = if l + 1 < params.layers.len() {
            a.mapv(|v| v.max(0.0))
        } else {
            a.clone()
        };
        mixed.push(m);
        pre.push(a);
    }
    if !h.iter().all(|v| v.is_finite()) {
        return Err(Error::NumericOverflow("GCN output".into()));
    }
    Ok(GcnTrace {
        propagation,
        mixed,
        pre,
        output: h,
    })
}

/// Returns parameter gradients and the gradient w.r.t. the node features X.
pub fn gcn_backward(
    params: &GcnParams,
    trace: &GcnTrace,
    grad_output: &Array2<f64>,
) -> Result<(GcnParams, Array2<f64>)> {
    if grad_output.dim() != trace.output.dim() {
        return Err(Error::contract("GCN output gradient has the wrong shape"));
    }
    let mut grads = params.zeros_like();
    let mut g = grad_output.clone();
    let layers = params.layers.len();
    for l in (0..layers).rev() {
        if l + 1 < layers {
            g.zip_mut_with(&trace.pre[l], |gv, &p| {
                if p <= 0.0 {
                    *gv = 0.0;
                }
            });
        }
        let gw = trace.mixed[l].t().dot(&g);
        grads.layers[l].data = gw.iter().copied().collect();
        let gm = g.dot(&GcnParams::matrix(&params.layers[l]).t());
        // P is symmetric.
        g = trace.propagation.dot(&gm);
    }
    Ok((grads, g))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use ndarray::array;
    use rand::Rng as _;

    fn random_matrix(n: usize, m: usize, seed: u64) -> Array2<f64> {
        let mut r = rng::stream(seed, "matrix");
        Array2::from_shape_fn((n, m), |_| r.random_range(-1.0..1.0))
    }

    #[test]
    fn equidistant_ties_take_lowest_index() {
        // Orthonormal rows: every pair is at the same cosine distance.
        let x = Array2::<f64>::eye(3);
        let g = knn_graph(&x, 1, Side::Source).unwrap();
        // Directed picks: 0->1, 1->0, 2->0.
        assert_eq!(g.edges(), vec![(0, 1), (0, 2)]);
        assert_eq!(g.adjacency, g.adjacency.t());
    }

    #[test]
    fn identical_rows_pick_lowest_other_indices() {
        let x = Array2::from_elem((6, 3), 0.5);
        let g = knn_graph(&x, 2, Side::Target).unwrap();
        for i in 0..6 {
            let lowest: Vec<usize> = (0..6).filter(|&j| j != i).take(2).collect();
            for j in lowest {
                assert_eq!(g.adjacency[[i, j]], 1.0);
            }
            assert_eq!(g.adjacency[[i, i]], 0.0);
        }
    }

    #[test]
    fn degree_bounds() {
        let x = random_matrix(16, 8, 3);
        let g = knn_graph(&x, 5, Side::Source).unwrap();
        for row in g.adjacency.outer_iter() {
            let d = row.sum();
            assert!((5.0..=15.0).contains(&d), "degree {d}");
        }
        assert_eq!(g.adjacency, g.adjacency.t());
        assert!(knn_graph(&x, 16, Side::Source).is_err());
        assert!(knn_graph(&x, 0, Side::Source).is_err());
    }

    #[test]
    fn propagation_is_symmetric_and_bounded() {
        let g = knn_graph(&random_matrix(10, 4, 5), 3, Side::Source).unwrap();
        let p = g.propagation();
        assert_eq!(p, p.t());
        let with_loops = &g.adjacency + &Array2::<f64>::eye(10);
        for ((i, j), v) in p.indexed_iter() {
            if with_loops[[i, j]] != 0.0 {
                assert!(*v > 0.0 && *v <= 1.0);
            } else {
                assert_eq!(*v, 0.0);
            }
        }
    }

    #[test]
    fn empty_graph_identity_layer_is_identity() {
        let x = random_matrix(4, 3, 9);
        let g = BatchGraph {
            features: x.clone(),
            adjacency: Array2::zeros((4, 4)),
            side: Side::Source,
        };
        let params = GcnParams {
            layers: vec![Tensor::from_vec(&[3, 3], Array2::<f64>::eye(3).into_raw_vec_and_offset().0).unwrap()],
        };
        assert_eq!(gcn_forward(&g, &params).unwrap().output, x);
    }

    #[test]
    fn complete_graph_identical_rows() {
        let x = Array2::from_shape_fn((5, 3), |(_, j)| j as f64 - 1.0);
        let g = BatchGraph {
            features: x,
            adjacency: Array2::from_shape_fn((5, 5), |(i, j)| f64::from(u8::from(i != j))),
            side: Side::Source,
        };
        let params = GcnParams::init(&[3, 4, 2], &mut rng::stream(1, rng::INIT));
        let out = gcn_forward(&g, &params).unwrap().output;
        for row in out.outer_iter() {
            for (a, b) in row.iter().zip(out.row(0).iter()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn matches_dense_evaluation() {
        let x = random_matrix(4, 3, 11);
        let adjacency = array![
            [0.0, 1.0, 0.0, 1.0],
            [1.0, 0.0, 1.0, 0.0],
            [0.0, 1.0, 0.0, 0.0],
            [1.0, 0.0, 0.0, 0.0]
        ];
        let g = BatchGraph {
            features: x.clone(),
            adjacency: adjacency.clone(),
            side: Side::Source,
        };
        let params = GcnParams::init(&[3, 5, 2], &mut rng::stream(2, rng::INIT));
        // Independent straight-line evaluation with explicit degree matrices.
        let a_hat = &adjacency + &Array2::<f64>::eye(4);
        let mut d = Array2::<f64>::zeros((4, 4));
        for i in 0..4 {
            d[[i, i]] = 1.0 / a_hat.row(i).sum().sqrt();
        }
        let p = d.dot(&a_hat).dot(&d);
        let g0 = GcnParams::matrix(&params.layers[0]);
        let g1 = GcnParams::matrix(&params.layers[1]);
        let h1 = p.dot(&x).dot(&g0).mapv(|v| v.max(0.0));
        let expect = p.dot(&h1).dot(&g1);
        let got = gcn_forward(&g, &params).unwrap().output;
        for (a, b) in got.iter().zip(expect.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_upstream_zero_gradients() {
        let g = knn_graph(&random_matrix(6, 4, 1), 2, Side::Source).unwrap();
        let params = GcnParams::init(&[4, 4, 4], &mut rng::stream(2, rng::INIT));
        let trace = gcn_forward(&g, &params).unwrap();
        let (gp, gx) = gcn_backward(&params, &trace, &Array2::zeros((6, 4))).unwrap();
        assert!(gp.layers.iter().all(|t| t.data.iter().all(|v| *v == 0.0)));
        assert_eq!(gx.dim(), (6, 4));
        assert!(gx.iter().all(|v| *v == 0.0));
        assert!(gcn_backward(&params, &trace, &Array2::zeros((6, 3))).is_err());
    }
}
