//! Central-difference checks of the hand-written backward passes.

use ndarray::{Array1, Array2, Array3};
use rand::Rng as _;

use crate::encoder::{self, EncoderConfig, EncoderParams};
use crate::error::Result;
use crate::graphnet::{self, GcnParams, Side};
use crate::rng::{self, Rng};
use crate::tensor::Tensor;

pub const STEP: f64 = 1e-4;

/// Worst elementwise `|analytic − numeric| / (|analytic| + 1e-8)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub max_rel_err: f64,
    pub worst: String,
    pub checked: usize,
}

impl GradReport {
    fn new() -> Self {
        GradReport {
            max_rel_err: 0.0,
            worst: String::new(),
            checked: 0,
        }
    }

    fn record(&mut self, name: &str, analytic: f64, numeric: f64) {
        let rel = (analytic - numeric).abs() / (analytic.abs() + 1e-8);
        self.checked += 1;
        if rel > self.max_rel_err {
            self.max_rel_err = rel;
            self.worst = format!("{name}: analytic {analytic:e} numeric {numeric:e}");
        }
    }
}

fn uniform(r: &mut Rng, shape: (usize, usize)) -> Array2<f64> {
    Array2::from_shape_fn(shape, |_| r.random_range(-1.0..1.0))
}

/// Central difference of `f` along one coordinate of a cloned state.
fn central<S: Clone>(
    state: &S,
    coord: impl Fn(&mut S) -> &mut f64,
    f: impl Fn(&S) -> Result<f64>,
) -> Result<f64> {
    let mut plus = state.clone();
    *coord(&mut plus) += STEP;
    let mut minus = state.clone();
    *coord(&mut minus) -= STEP;
    Ok((f(&plus)? - f(&minus)?) / (2.0 * STEP))
}

/// `L = Σ c·z + Σ d·y` on a small encoder, every parameter and input pixel.
pub fn check_encoder(seed: u64) -> Result<GradReport> {
    let cfg = EncoderConfig {
        canvas: 16,
        channels: vec![3, 4],
        embed_dim: 5,
    };
    let mut r = rng::stream(seed, "gradcheck-encoder");
    let mut params = EncoderParams::init(&cfg, &mut r);
    for (_, t) in params.tensors_mut() {
        for v in &mut t.data {
            *v += r.random_range(-0.05..0.05);
        }
    }
    let view = uniform(&mut r, (16, 16));
    let trace = encoder::forward(&params, &view)?;
    let c: Array1<f64> = (0..trace.z.len()).map(|_| r.random_range(-1.0..1.0)).collect();
    let (d_, rr, ss) = trace.y().dim();
    let d = Array3::from_shape_fn((d_, rr, ss), |_| r.random_range(-1.0..1.0));
    let loss = |p: &EncoderParams, v: &Array2<f64>| -> Result<f64> {
        let t = encoder::forward(p, v)?;
        Ok(t.z.dot(&c) + (t.y() * &d).sum())
    };
    let (grads, grad_in) = encoder::backward(&params, &trace, &d, &c)?;
    let mut report = GradReport::new();
    let analytic: Vec<(String, Tensor)> = grads.tensors().into_iter().map(|(n, t)| (n, t.clone())).collect();
    for (k, (name, g)) in analytic.iter().enumerate() {
        for i in 0..g.len() {
            let numeric = central(&params, |p| &mut p.tensors_mut().swap_remove(k).1.data[i], |p| loss(p, &view))?;
            report.record(&format!("{name}[{i}]"), g.data[i], numeric);
        }
    }
    for ((row, col), &a) in grad_in.indexed_iter() {
        let numeric = central(&view, |v| &mut v[[row, col]], |v| loss(&params, v))?;
        report.record(&format!("input[{row},{col}]"), a, numeric);
    }
    Ok(report)
}

/// `L = Σ R ⊙ Ẑ` on a random 6-node graph, every weight and feature entry.
pub fn check_gcn(seed: u64) -> Result<GradReport> {
    let mut r = rng::stream(seed, "gradcheck-gcn");
    let x = uniform(&mut r, (6, 4));
    let graph = graphnet::knn_graph(&x, 2, Side::Source)?;
    let params = GcnParams::init(&[4, 5, 3], &mut r);
    let weights = uniform(&mut r, (6, 3));
    let loss = |p: &GcnParams, feats: &Array2<f64>| -> Result<f64> {
        let mut g = graph.clone();
        g.features = feats.clone();
        Ok((&graphnet::gcn_forward(&g, p)?.output * &weights).sum())
    };
    let trace = graphnet::gcn_forward(&graph, &params)?;
    let (grads, grad_x) = graphnet::gcn_backward(&params, &trace, &weights)?;
    let mut report = GradReport::new();
    for (l, g) in grads.layers.iter().enumerate() {
        for i in 0..g.len() {
            let numeric = central(&params, |p| &mut p.layers[l].data[i], |p| loss(p, &x))?;
            report.record(&format!("layer{l}[{i}]"), g.data[i], numeric);
        }
    }
    // The graph stays fixed: kNN selection is piecewise constant in X.
    for ((i, k), &a) in grad_x.indexed_iter() {
        let numeric = central(&x, |v| &mut v[[i, k]], |v| loss(&params, v))?;
        report.record(&format!("x[{i},{k}]"), a, numeric);
    }
    Ok(report)
}
