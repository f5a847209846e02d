//! Vertex and edge affinities for the second-order matching problem, with
//! exact backward passes from affinity gradients to embeddings and feature maps.

use std::fmt::Write as _;
use std::str::FromStr;

use ndarray::{Array1, Array2, Array3, ArrayView1, ArrayView2};
use rayon::prelude::*;

use crate::augment::PosMap;
use crate::error::{Error, Result};

pub const COS_EPS: f64 = 1e-12;

/// Cosine similarity; `None` when either vector has (near) zero norm.
pub fn cosine(a: ArrayView1<f64>, b: ArrayView1<f64>) -> Option<f64> {
    cosine_slices(a.as_slice()?, b.as_slice()?)
}

fn cosine_slices(a: &[f64], b: &[f64]) -> Option<f64> {
    let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    let denom = (aa * bb).sqrt();
    (denom >= COS_EPS).then(|| (ab / denom).clamp(-1.0, 1.0))
}

/// Adds `scale · ∂cos(a, b)/∂a` into `ga` and `scale · ∂cos(a, b)/∂b` into `gb`.
fn cosine_grad(a: &[f64], b: &[f64], scale: f64, ga: &mut [f64], gb: &mut [f64]) {
    let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    let denom = (aa * bb).sqrt();
    if denom < COS_EPS {
        return;
    }
    let c = ab / denom;
    for k in 0..a.len() {
        ga[k] += scale * (b[k] / denom - c * a[k] / aa);
        gb[k] += scale * (a[k] / denom - c * b[k] / bb);
    }
}

/// A scalar affinity together with its degeneracy flag.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scored {
    pub value: f64,
    pub degenerate: bool,
}

impl Scored {
    fn from_cosine(c: Option<f64>) -> Self {
        match c {
            Some(value) => Scored {
                value,
                degenerate: false,
            },
            None => Scored {
                value: 0.0,
                degenerate: true,
            },
        }
    }
}

pub fn global_cost(z_s: ArrayView1<f64>, z_t: ArrayView1<f64>) -> Scored {
    Scored::from_cosine(cosine(z_s, z_t))
}

/// Cosine between the edge difference vectors `z_i - z_j` and `z_a - z_b`.
pub fn edge_affinity(
    z_i: ArrayView1<f64>,
    z_j: ArrayView1<f64>,
    z_a: ArrayView1<f64>,
    z_b: ArrayView1<f64>,
) -> Scored {
    let u = &z_i - &z_j;
    let w = &z_a - &z_b;
    Scored::from_cosine(cosine(u.view(), w.view()))
}

pub fn vertex_affinity(global: f64, local_st: f64, local_ts: f64, alpha: f64) -> f64 {
    alpha * global + (1.0 - alpha) * (local_st + local_ts)
}

/// A feature map laid out cell-major with its provenance, ready for
/// nearest-neighbour queries.
#[derive(Debug, Clone)]
pub struct CellView {
    dim: usize,
    /// `cells[k·dim .. (k+1)·dim]` is the feature vector at cell `k`.
    cells: Vec<f64>,
    pos: Vec<Option<[f64; 2]>>,
}

impl CellView {
    pub fn new(y: &Array3<f64>, pos: &PosMap) -> Result<Self> {
        let (d, r, s) = y.dim();
        if pos.dim() != (r, s) {
            return Err(Error::contract(format!(
                "position map {:?} does not match feature grid {r}x{s}",
                pos.dim()
            )));
        }
        let mut cells = vec![0.0; d * r * s];
        for ((c, rr, ss), v) in y.indexed_iter() {
            cells[(rr * s + ss) * d + c] = *v;
        }
        Ok(CellView {
            dim: d,
            cells,
            pos: pos.coords().to_vec(),
        })
    }

    fn len(&self) -> usize {
        self.pos.len()
    }

    fn matrix(&self) -> ArrayView2<'_, f64> {
        ArrayView2::from_shape((self.len(), self.dim), &self.cells).expect("cell-major layout")
    }

    fn cell(&self, k: usize) -> &[f64] {
        &self.cells[k * self.dim..(k + 1) * self.dim]
    }
}

/// Kept `(p, q)` correspondences of one local cost evaluation.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LocalCost {
    pub value: f64,
    /// Every position was masked, so the cost is 0 by convention.
    pub no_overlap: bool,
    pub location_pairs: Vec<(usize, usize)>,
    pub feature_pairs: Vec<(usize, usize)>,
}

fn select_top(mut scored: Vec<(f64, usize, usize)>, gamma: f64) -> (f64, Vec<(usize, usize)>) {
    let keep = ((gamma * scored.len() as f64).ceil() as usize).clamp(1, scored.len());
    // Stable: equal scores keep ascending p.
    scored.sort_by(|a, b| b.0.total_cmp(&a.0));
    scored.truncate(keep);
    let mean = scored.iter().map(|s| s.0).sum::<f64>() / keep as f64;
    (mean, scored.into_iter().map(|(_, p, q)| (p, q)).collect())
}

/// Half location-matched plus half feature-matched mean cosine over the best
/// `gamma` fraction of source cells.
pub fn local_cost_cells(s: &CellView, t: &CellView, gamma: f64) -> LocalCost {
    local_cost_pair(s, t, gamma).0
}

/// `(local(s → t), local(t → s))`, sharing one table of cell distances.
pub fn local_cost_pair(s: &CellView, t: &CellView, gamma: f64) -> (LocalCost, LocalCost) {
    let (ms, mt) = (s.matrix(), t.matrix());
    let gram = ms.dot(&mt.t());
    let sq = |m: &ArrayView2<f64>| -> Vec<f64> { m.outer_iter().map(|r| r.dot(&r)).collect() };
    let (ns, nt) = (sq(&ms), sq(&mt));
    let feat = |p: usize, q: usize| ns[p] + nt[q] - 2.0 * gram[[p, q]];
    let st = one_direction(s, t, gamma, |p, q| feat(p, q));
    let ts = one_direction(t, s, gamma, |q, p| feat(p, q));
    (st, ts)
}

fn one_direction(
    s: &CellView,
    t: &CellView,
    gamma: f64,
    feature_dist: impl Fn(usize, usize) -> f64,
) -> LocalCost {
    let valid_s: Vec<usize> = (0..s.len()).filter(|&p| s.pos[p].is_some()).collect();
    let valid_t: Vec<usize> = (0..t.len()).filter(|&q| t.pos[q].is_some()).collect();
    if valid_s.is_empty() || valid_t.is_empty() {
        return LocalCost {
            no_overlap: true,
            ..LocalCost::default()
        };
    }
    let mut by_location = Vec::with_capacity(valid_s.len());
    let mut by_feature = Vec::with_capacity(valid_s.len());
    for &p in &valid_s {
        let ps = s.pos[p].expect("filtered");
        let (mut best_loc, mut best_loc_d) = (valid_t[0], f64::INFINITY);
        let (mut best_feat, mut best_feat_d) = (valid_t[0], f64::INFINITY);
        for &q in &valid_t {
            let pt = t.pos[q].expect("filtered");
            let dl = (ps[0] - pt[0]).powi(2) + (ps[1] - pt[1]).powi(2);
            if dl < best_loc_d {
                best_loc_d = dl;
                best_loc = q;
            }
            let df = feature_dist(p, q);
            if df < best_feat_d {
                best_feat_d = df;
                best_feat = q;
            }
        }
        let cos = |q: usize| cosine_slices(s.cell(p), t.cell(q)).unwrap_or(0.0);
        by_location.push((cos(best_loc), p, best_loc));
        by_feature.push((cos(best_feat), p, best_feat));
    }
    let (loc, location_pairs) = select_top(by_location, gamma);
    let (feat, feature_pairs) = select_top(by_feature, gamma);
    LocalCost {
        value: 0.5 * (loc + feat),
        no_overlap: false,
        location_pairs,
        feature_pairs,
    }
}

/// Local cost between feature maps `y_s`, `y_t` (D × R × S) whose position
/// maps have already been brought to the R × S grid.
pub fn local_cost(
    y_s: &Array3<f64>,
    y_t: &Array3<f64>,
    pos_s: &PosMap,
    pos_t: &PosMap,
    gamma: f64,
) -> Result<LocalCost> {
    if y_s.dim() != y_t.dim() {
        return Err(Error::contract("feature maps differ in shape"));
    }
    Ok(local_cost_cells(
        &CellView::new(y_s, pos_s)?,
        &CellView::new(y_t, pos_t)?,
        gamma,
    ))
}

/// Adds `scale · ∂local/∂y` for both maps (cell-major gradient buffers).
fn local_cost_backward(
    s: &CellView,
    t: &CellView,
    cost: &LocalCost,
    scale: f64,
    grad_s: &mut [f64],
    grad_t: &mut [f64],
) {
    let d = s.dim;
    for pairs in [&cost.location_pairs, &cost.feature_pairs] {
        if pairs.is_empty() {
            continue;
        }
        let w = 0.5 * scale / pairs.len() as f64;
        for &(p, q) in pairs {
            cosine_grad(
                s.cell(p),
                t.cell(q),
                w,
                &mut grad_s[p * d..(p + 1) * d],
                &mut grad_t[q * d..(q + 1) * d],
            );
        }
    }
}

fn cells_to_map(cells: &[f64], d: usize, r: usize, s: usize) -> Array3<f64> {
    Array3::from_shape_fn((d, r, s), |(c, rr, ss)| cells[(rr * s + ss) * d + c])
}

/// Second-order matching instance: vertex affinities `c_v` (N × N) and edge
/// affinities `c_e` over canonical edge lists.
///
/// `c_e[es][et]` is the affinity of source edge `(i, j)` with target edge
/// `(a, b)` in the aligned orientation `i→a, j→b`. The crossed orientation
/// `i→b, j→a` contributes `-c_e[es][et]`, as the cosine of edge differences does.
#[derive(Debug, Clone, PartialEq)]
pub struct AffinitySystem {
    pub c_v: Array2<f64>,
    pub edges_s: Vec<(usize, usize)>,
    pub edges_t: Vec<(usize, usize)>,
    pub c_e: Array2<f64>,
    target_lookup: Vec<Option<usize>>,
}

/// Use of one `c_e` entry by an assignment: `+1` aligned, `-1` crossed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EdgeUse {
    pub source_edge: usize,
    pub target_edge: usize,
    pub sign: i8,
}

impl AffinitySystem {
    pub fn new(
        c_v: Array2<f64>,
        edges_s: Vec<(usize, usize)>,
        edges_t: Vec<(usize, usize)>,
        c_e: Array2<f64>,
    ) -> Result<Self> {
        let n = c_v.nrows();
        if c_v.ncols() != n {
            return Err(Error::contract("c_v must be square"));
        }
        if c_e.dim() != (edges_s.len(), edges_t.len()) {
            return Err(Error::contract(format!(
                "c_e is {:?}, expected {}x{}",
                c_e.dim(),
                edges_s.len(),
                edges_t.len()
            )));
        }
        for edges in [&edges_s, &edges_t] {
            for w in edges.windows(2) {
                if w[0] >= w[1] {
                    return Err(Error::contract("edge lists must be sorted and unique"));
                }
            }
            if edges.iter().any(|&(i, j)| i >= j || j >= n) {
                return Err(Error::contract("edges must be canonical (i < j < N)"));
            }
        }
        let mut target_lookup = vec![None; n * n];
        for (k, &(a, b)) in edges_t.iter().enumerate() {
            target_lookup[a * n + b] = Some(k);
            target_lookup[b * n + a] = Some(k);
        }
        Ok(AffinitySystem {
            c_v,
            edges_s,
            edges_t,
            c_e,
            target_lookup,
        })
    }

    /// A first-order instance with no edges.
    pub fn vertex_only(c_v: Array2<f64>) -> Result<Self> {
        AffinitySystem::new(c_v, Vec::new(), Vec::new(), Array2::zeros((0, 0)))
    }

    pub fn n(&self) -> usize {
        self.c_v.nrows()
    }

    pub fn is_finite(&self) -> bool {
        self.c_v.iter().chain(self.c_e.iter()).all(|v| v.is_finite())
    }

    /// Target edge index and orientation for the ordered target pair `(a, b)`.
    pub fn target_edge(&self, a: usize, b: usize) -> Option<(usize, i8)> {
        let n = self.n();
        self.target_lookup[a * n + b].map(|k| (k, if a < b { 1 } else { -1 }))
    }

    pub fn edge_uses(&self, assignment: &[usize]) -> Vec<EdgeUse> {
        self.edges_s
            .iter()
            .enumerate()
            .filter_map(|(es, &(i, j))| {
                self.target_edge(assignment[i], assignment[j])
                    .map(|(et, sign)| EdgeUse {
                        source_edge: es,
                        target_edge: et,
                        sign,
                    })
            })
            .collect()
    }

    /// Minimization objective: negative total vertex plus edge affinity.
    pub fn objective(&self, assignment: &[usize]) -> f64 {
        let vertex: f64 = assignment
            .iter()
            .enumerate()
            .map(|(i, &a)| self.c_v[[i, a]])
            .sum();
        let edge: f64 = self
            .edge_uses(assignment)
            .iter()
            .map(|u| f64::from(u.sign) * self.c_e[[u.source_edge, u.target_edge]])
            .sum();
        -vertex - edge
    }

    /// Copy with `c_v + dv` and `c_e + de`.
    pub fn shifted(&self, dv: &Array2<f64>, de: &Array2<f64>) -> Self {
        AffinitySystem {
            c_v: &self.c_v + dv,
            c_e: &self.c_e + de,
            ..self.clone()
        }
    }

    /// Instance text: `N |Es| |Et|`, the N×N vertex block row-major, then one
    /// `si sj ti tj value` line per edge pair.
    pub fn to_instance_string(&self) -> String {
        let n = self.n();
        let mut out = format!("{} {} {}\n", n, self.edges_s.len(), self.edges_t.len());
        for row in self.c_v.outer_iter() {
            let line: Vec<String> = row.iter().map(f64::to_string).collect();
            out.push_str(&line.join(" "));
            out.push('\n');
        }
        for (es, &(i, j)) in self.edges_s.iter().enumerate() {
            for (et, &(a, b)) in self.edges_t.iter().enumerate() {
                writeln!(out, "{i} {j} {a} {b} {}", self.c_e[[es, et]]).expect("String write");
            }
        }
        out
    }
}

impl FromStr for AffinitySystem {
    type Err = Error;

    fn from_str(text: &str) -> Result<Self> {
        let bad = |d: String| Error::format("instance", d);
        let mut lines = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'));
        let header: Vec<usize> = lines
            .next()
            .ok_or_else(|| bad("empty file".into()))?
            .split_whitespace()
            .map(|t| t.parse().map_err(|_| bad(format!("bad header token `{t}`"))))
            .collect::<Result<_>>()?;
        let [n, ns, nt] = header[..] else {
            return Err(bad("header must be `N |Es| |Et|`".into()));
        };
        let mut vertex = Vec::with_capacity(n * n);
        while vertex.len() < n * n {
            let line = lines.next().ok_or_else(|| bad("truncated c_v block".into()))?;
            for t in line.split_whitespace() {
                vertex.push(t.parse::<f64>().map_err(|_| bad(format!("bad value `{t}`")))?);
            }
        }
        if vertex.len() != n * n {
            return Err(bad("c_v block has extra values".into()));
        }
        let c_v = Array2::from_shape_vec((n, n), vertex).expect("n*n values");
        let mut entries = Vec::with_capacity(ns * nt);
        for line in lines {
            let tok: Vec<&str> = line.split_whitespace().collect();
            if tok.len() != 5 {
                return Err(bad(format!("edge line `{line}`")));
            }
            let idx = |k: usize| {
                tok[k]
                    .parse::<usize>()
                    .map_err(|_| bad(format!("edge line `{line}`")))
            };
            let value: f64 = tok[4]
                .parse()
                .map_err(|_| bad(format!("edge line `{line}`")))?;
            entries.push(((idx(0)?, idx(1)?), (idx(2)?, idx(3)?), value));
        }
        if entries.len() != ns * nt {
            return Err(bad(format!(
                "expected {} edge-pair lines, found {}",
                ns * nt,
                entries.len()
            )));
        }
        let mut edges_s: Vec<(usize, usize)> = entries.iter().map(|e| e.0).collect();
        let mut edges_t: Vec<(usize, usize)> = entries.iter().map(|e| e.1).collect();
        for e in [&mut edges_s, &mut edges_t] {
            e.sort_unstable();
            e.dedup();
        }
        if !entries.is_empty() && (edges_s.len() != ns || edges_t.len() != nt) {
            return Err(bad("edge lines do not cover E^s × E^t exactly".into()));
        }
        let mut c_e = Array2::from_elem((edges_s.len(), edges_t.len()), f64::NAN);
        for (se, te, v) in entries {
            let es = edges_s.binary_search(&se).expect("collected above");
            let et = edges_t.binary_search(&te).expect("collected above");
            c_e[[es, et]] = v;
        }
        if c_e.iter().any(|v| v.is_nan()) {
            return Err(bad("duplicate edge-pair lines".into()));
        }
        AffinitySystem::new(c_v, edges_s, edges_t, c_e)
    }
}

/// Inputs to [`build_system`], indexed by batch position.
pub struct AffinityInputs<'a> {
    /// Message-passed embeddings Ẑ^s, Ẑ^t (N × F').
    pub z_s: &'a Array2<f64>,
    pub z_t: &'a Array2<f64>,
    pub edges_s: &'a [(usize, usize)],
    pub edges_t: &'a [(usize, usize)],
    /// Encoder feature maps with feature-resolution position maps; `None`
    /// skips the local term (as when `alpha == 1`).
    pub local: Option<LocalInputs<'a>>,
    pub alpha: f64,
    pub gamma: f64,
}

pub struct LocalInputs<'a> {
    pub y_s: &'a [Array3<f64>],
    pub y_t: &'a [Array3<f64>],
    pub pos_s: &'a [PosMap],
    pub pos_t: &'a [PosMap],
}

/// Saved intermediate results for [`system_backward`].
#[derive(Debug, Clone)]
pub struct AffinityTrace {
    n: usize,
    cells_s: Vec<CellView>,
    cells_t: Vec<CellView>,
    /// `local[i·N + a] = (local(s_i → t_a), local(t_a → s_i))`.
    local: Vec<(LocalCost, LocalCost)>,
    pub degenerate_pairs: usize,
    pub no_overlap_pairs: usize,
}

pub fn build_system(inputs: &AffinityInputs<'_>) -> Result<(AffinitySystem, AffinityTrace)> {
    let n = inputs.z_s.nrows();
    if inputs.z_t.nrows() != n || inputs.z_s.ncols() != inputs.z_t.ncols() {
        return Err(Error::contract("source and target embeddings disagree in shape"));
    }
    if !(0.0..=1.0).contains(&inputs.alpha) {
        return Err(Error::param(format!("alpha {} outside [0, 1]", inputs.alpha)));
    }
    let (cells_s, cells_t, local) = match &inputs.local {
        Some(l) => {
            if [l.y_s.len(), l.y_t.len(), l.pos_s.len(), l.pos_t.len()] != [n; 4] {
                return Err(Error::contract("local inputs do not have N entries"));
            }
            let cells_s = l
                .y_s
                .iter()
                .zip(l.pos_s)
                .map(|(y, p)| CellView::new(y, p))
                .collect::<Result<Vec<_>>>()?;
            let cells_t = l
                .y_t
                .iter()
                .zip(l.pos_t)
                .map(|(y, p)| CellView::new(y, p))
                .collect::<Result<Vec<_>>>()?;
            let local: Vec<(LocalCost, LocalCost)> = (0..n * n)
                .into_par_iter()
                .map(|k| {
                    let (i, a) = (k / n, k % n);
                    local_cost_pair(&cells_s[i], &cells_t[a], inputs.gamma)
                })
                .collect();
            (cells_s, cells_t, local)
        }
        None => (Vec::new(), Vec::new(), Vec::new()),
    };

    let mut degenerate_pairs = 0;
    let mut c_v = Array2::zeros((n, n));
    for i in 0..n {
        for a in 0..n {
            let g = global_cost(inputs.z_s.row(i), inputs.z_t.row(a));
            degenerate_pairs += usize::from(g.degenerate);
            let (lst, lts) = local
                .get(i * n + a)
                .map_or((0.0, 0.0), |(st, ts)| (st.value, ts.value));
            c_v[[i, a]] = vertex_affinity(g.value, lst, lts, inputs.alpha);
        }
    }
    let no_overlap_pairs = local
        .iter()
        .map(|(a, b)| usize::from(a.no_overlap) + usize::from(b.no_overlap))
        .sum();

    let mut c_e = Array2::zeros((inputs.edges_s.len(), inputs.edges_t.len()));
    for (es, &(i, j)) in inputs.edges_s.iter().enumerate() {
        let u = &inputs.z_s.row(i) - &inputs.z_s.row(j);
        for (et, &(a, b)) in inputs.edges_t.iter().enumerate() {
            let w = &inputs.z_t.row(a) - &inputs.z_t.row(b);
            let s = Scored::from_cosine(cosine(u.view(), w.view()));
            degenerate_pairs += usize::from(s.degenerate);
            c_e[[es, et]] = s.value;
        }
    }
    let system = AffinitySystem::new(c_v, inputs.edges_s.to_vec(), inputs.edges_t.to_vec(), c_e)?;
    Ok((
        system,
        AffinityTrace {
            n,
            cells_s,
            cells_t,
            local,
            degenerate_pairs,
            no_overlap_pairs,
        },
    ))
}

/// Gradients of a scalar loss w.r.t. the inputs of [`build_system`].
#[derive(Debug, Clone)]
pub struct AffinityGrads {
    pub z_s: Array2<f64>,
    pub z_t: Array2<f64>,
    /// Empty when the local term was skipped.
    pub y_s: Vec<Array3<f64>>,
    pub y_t: Vec<Array3<f64>>,
}

/// Chains `∂L/∂c_v` and `∂L/∂c_e` back to the embeddings and feature maps.
pub fn system_backward(
    inputs: &AffinityInputs<'_>,
    trace: &AffinityTrace,
    grad_cv: &Array2<f64>,
    grad_ce: &Array2<f64>,
) -> Result<AffinityGrads> {
    let n = trace.n;
    if grad_cv.dim() != (n, n) || grad_ce.dim() != (inputs.edges_s.len(), inputs.edges_t.len()) {
        return Err(Error::contract("affinity gradient shapes do not match the system"));
    }
    let f = inputs.z_s.ncols();
    let mut gz_s = Array2::<f64>::zeros((n, f));
    let mut gz_t = Array2::<f64>::zeros((n, f));
    let has_local = !trace.local.is_empty();
    let cell_len = |c: &CellView| c.cells.len();
    let mut gy_s: Vec<Vec<f64>> = trace.cells_s.iter().map(|c| vec![0.0; cell_len(c)]).collect();
    let mut gy_t: Vec<Vec<f64>> = trace.cells_t.iter().map(|c| vec![0.0; cell_len(c)]).collect();

    let row = |m: &Array2<f64>, i: usize| m.row(i).to_vec();
    for i in 0..n {
        for a in 0..n {
            let g = grad_cv[[i, a]];
            if g == 0.0 {
                continue;
            }
            let (zs, zt) = (row(inputs.z_s, i), row(inputs.z_t, a));
            let mut ga = vec![0.0; f];
            let mut gb = vec![0.0; f];
            cosine_grad(&zs, &zt, g * inputs.alpha, &mut ga, &mut gb);
            for k in 0..f {
                gz_s[[i, k]] += ga[k];
                gz_t[[a, k]] += gb[k];
            }
            if has_local {
                let w = g * (1.0 - inputs.alpha);
                let (st, ts) = &trace.local[i * n + a];
                local_cost_backward(
                    &trace.cells_s[i],
                    &trace.cells_t[a],
                    st,
                    w,
                    &mut gy_s[i],
                    &mut gy_t[a],
                );
                local_cost_backward(
                    &trace.cells_t[a],
                    &trace.cells_s[i],
                    ts,
                    w,
                    &mut gy_t[a],
                    &mut gy_s[i],
                );
            }
        }
    }

    for (es, &(i, j)) in inputs.edges_s.iter().enumerate() {
        for (et, &(a, b)) in inputs.edges_t.iter().enumerate() {
            let g = grad_ce[[es, et]];
            if g == 0.0 {
                continue;
            }
            let u: Vec<f64> = (0..f).map(|k| inputs.z_s[[i, k]] - inputs.z_s[[j, k]]).collect();
            let w: Vec<f64> = (0..f).map(|k| inputs.z_t[[a, k]] - inputs.z_t[[b, k]]).collect();
            let mut gu = vec![0.0; f];
            let mut gw = vec![0.0; f];
            cosine_grad(&u, &w, g, &mut gu, &mut gw);
            for k in 0..f {
                gz_s[[i, k]] += gu[k];
                gz_s[[j, k]] -= gu[k];
                gz_t[[a, k]] += gw[k];
                gz_t[[b, k]] -= gw[k];
            }
        }
    }

    let to_maps = |bufs: Vec<Vec<f64>>, ys: Option<&[Array3<f64>]>| -> Vec<Array3<f64>> {
        match ys {
            Some(ys) => bufs
                .iter()
                .zip(ys)
                .map(|(b, y)| {
                    let (d, r, s) = y.dim();
                    cells_to_map(b, d, r, s)
                })
                .collect(),
            None => Vec::new(),
        }
    };
    let (ys, yt) = match &inputs.local {
        Some(l) => (Some(l.y_s), Some(l.y_t)),
        None => (None, None),
    };
    Ok(AffinityGrads {
        z_s: gz_s,
        z_t: gz_t,
        y_s: to_maps(gy_s, ys),
        y_t: to_maps(gy_t, yt),
    })
}

/// Sum of vertex-affinity magnitudes, used in diagnostics.
pub fn describe(system: &AffinitySystem) -> String {
    let diag: Array1<f64> = (0..system.n()).map(|i| system.c_v[[i, i]]).collect();
    format!(
        "N={} |Es|={} |Et|={} c_v range [{:.4}, {:.4}] mean diag {:.4}",
        system.n(),
        system.edges_s.len(),
        system.edges_t.len(),
        system.c_v.iter().copied().fold(f64::INFINITY, f64::min),
        system.c_v.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        diag.mean().unwrap_or(0.0)
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use ndarray::{array, Array};
    use rand::Rng as _;

    fn random_map(d: usize, r: usize, seed: u64, lo: f64) -> Array3<f64> {
        let mut g = rng::stream(seed, "map");
        Array::from_shape_fn((d, r, r), |_| g.random_range(lo..1.0))
    }

    fn random_vec(f: usize, g: &mut rng::Rng) -> Array1<f64> {
        Array::from_shape_fn(f, |_| g.random_range(-1.0..1.0))
    }

    #[test]
    fn global_cost_cases() {
        let v = array![0.3, -1.2, 2.0];
        assert!((global_cost(v.view(), v.view()).value - 1.0).abs() < 1e-12);
        let neg = -&v;
        assert!((global_cost(v.view(), neg.view()).value + 1.0).abs() < 1e-12);
        let (e1, e2) = (array![1.0, 0.0], array![0.0, 1.0]);
        assert_eq!(global_cost(e1.view(), e2.view()).value, 0.0);
        let zero = array![0.0, 0.0];
        let s = global_cost(zero.view(), zero.view());
        assert_eq!(s.value, 0.0);
        assert!(s.degenerate);
    }

    #[test]
    fn local_cost_identical_maps_is_one() {
        let y = random_map(4, 4, 1, 0.1);
        let pos = PosMap::identity(4, 4);
        let c = local_cost(&y, &y, &pos, &pos, 0.5).unwrap();
        assert!((c.value - 1.0).abs() < 1e-12);
        assert!(c.location_pairs.iter().all(|(p, q)| p == q));
    }

    #[test]
    fn local_cost_orthogonal_features() {
        // Source uses channel 0 only, target channel 1 only.
        let mut ys = Array3::zeros((2, 3, 3));
        let mut yt = Array3::zeros((2, 3, 3));
        ys.index_axis_mut(ndarray::Axis(0), 0).fill(1.0);
        yt.index_axis_mut(ndarray::Axis(0), 1).fill(2.0);
        let pos = PosMap::identity(3, 3);
        let c = local_cost(&ys, &yt, &pos, &pos, 1.0).unwrap();
        assert_eq!(c.value, 0.0);
    }

    #[test]
    fn fully_masked_local_cost_flags() {
        let y = random_map(2, 2, 1, 0.1);
        let masked = PosMap::from_coords(2, 2, vec![None; 4]).unwrap();
        let c = local_cost(&y, &y, &masked, &PosMap::identity(2, 2), 0.5).unwrap();
        assert!(c.no_overlap);
        assert_eq!(c.value, 0.0);
    }

    #[test]
    fn local_cost_channel_permutation_invariance() {
        let ys = random_map(5, 3, 2, -1.0);
        let yt = random_map(5, 3, 3, -1.0);
        let perm = [3, 0, 4, 1, 2];
        let permute = |y: &Array3<f64>| {
            Array3::from_shape_fn(y.dim(), |(c, r, s)| y[[perm[c], r, s]])
        };
        let mut g = rng::stream(4, "pos");
        let pos = |g: &mut rng::Rng| {
            PosMap::from_coords(
                3,
                3,
                (0..9)
                    .map(|_| Some([g.random_range(0.0..63.0), g.random_range(0.0..63.0)]))
                    .collect(),
            )
            .unwrap()
        };
        let (ps, pt) = (pos(&mut g), pos(&mut g));
        let a = local_cost(&ys, &yt, &ps, &pt, 0.5).unwrap().value;
        let b = local_cost(&permute(&ys), &permute(&yt), &ps, &pt, 0.5).unwrap().value;
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn vertex_affinity_blend() {
        assert_eq!(vertex_affinity(0.3, 0.9, -0.4, 1.0), 0.3);
        assert_eq!(vertex_affinity(0.3, 0.9, -0.4, 0.0), 0.9 + -0.4);
        assert!((vertex_affinity(1.0, 1.0, 1.0, 0.8) - 1.2).abs() < 1e-12);
    }

    #[test]
    fn edge_affinity_cases_and_swap_symmetry() {
        let mut g = rng::stream(6, "edge");
        let (zi, zj) = (random_vec(4, &mut g), random_vec(4, &mut g));
        let shift = random_vec(4, &mut g);
        let (za, zb) = (&zi + &shift, &zj + &shift);
        assert!((edge_affinity(zi.view(), zj.view(), za.view(), zb.view()).value - 1.0).abs() < 1e-12);
        assert!((edge_affinity(zi.view(), zj.view(), zb.view(), za.view()).value + 1.0).abs() < 1e-12);
        for _ in 0..50 {
            let v: Vec<Array1<f64>> = (0..4).map(|_| random_vec(6, &mut g)).collect();
            let e1 = edge_affinity(v[0].view(), v[1].view(), v[2].view(), v[3].view()).value;
            let e2 = edge_affinity(v[1].view(), v[0].view(), v[3].view(), v[2].view()).value;
            assert!((e1 - e2).abs() < 1e-12);
        }
        let z = array![1.0, 2.0];
        assert!(edge_affinity(z.view(), z.view(), z.view(), z.view()).degenerate);
    }

    #[test]
    fn objective_orientation() {
        let c_v = Array2::zeros((3, 3));
        let sys =
            AffinitySystem::new(c_v, vec![(0, 1)], vec![(0, 1)], array![[0.25]]).unwrap();
        assert_eq!(sys.objective(&[0, 1, 2]), -0.25);
        assert_eq!(sys.objective(&[1, 0, 2]), 0.25);
        assert_eq!(sys.objective(&[0, 2, 1]), 0.0);
    }

    #[test]
    fn rejects_malformed_systems() {
        let c_v = Array2::zeros((3, 3));
        assert!(AffinitySystem::new(c_v.clone(), vec![(1, 0)], vec![], Array2::zeros((1, 0))).is_err());
        assert!(AffinitySystem::new(c_v.clone(), vec![(0, 3)], vec![], Array2::zeros((1, 0))).is_err());
        assert!(AffinitySystem::new(c_v, vec![(0, 1)], vec![(0, 1)], Array2::zeros((2, 1))).is_err());
    }

    #[test]
    fn instance_text_round_trip() {
        let mut g = rng::stream(5, "inst");
        let c_v = Array::from_shape_fn((4, 4), |_| g.random_range(-1.0..1.0));
        let c_e = Array::from_shape_fn((2, 3), |_| g.random_range(-1.0..1.0));
        let sys = AffinitySystem::new(c_v, vec![(0, 1), (1, 3)], vec![(0, 2), (1, 2), (2, 3)], c_e)
            .unwrap();
        let back: AffinitySystem = sys.to_instance_string().parse().unwrap();
        assert_eq!(back, sys);
        assert!("2 0 0\n1 2 3\n".parse::<AffinitySystem>().is_err());
        assert!("2 1 1\n1 0\n0 1\n".parse::<AffinitySystem>().is_err());
    }

    #[test]
    fn singleton_system() {
        let z = array![[0.6, 0.8]];
        let inputs = AffinityInputs {
            z_s: &z,
            z_t: &z,
            edges_s: &[],
            edges_t: &[],
            local: None,
            alpha: 0.8,
            gamma: 0.5,
        };
        let (sys, _) = build_system(&inputs).unwrap();
        assert_eq!(sys.c_v.dim(), (1, 1));
        assert_eq!(sys.c_e.len(), 0);
    }
}
