//! The training loop: views, encoder, kNN graphs, GCN, affinities, perturbed
//! matching, Hamming loss, manual backward pass and Adam.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, Array3};
use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::ablation::Plan;
use crate::affinity::{self, AffinityInputs, AffinitySystem, AffinityTrace, LocalInputs};
use crate::augment::{self, PosMap, ViewPair};
use crate::checkpoint;
use crate::config::TrainConfig;
use crate::encoder::{self, ConvLayer, EncoderConfig, EncoderParams, ForwardTrace};
use crate::error::{Error, Result};
use crate::graphnet::{self, BatchGraph, GcnParams, GcnTrace, Side};
use crate::imle::{self, GoldMatching, ImleConfig};
use crate::matcher::{ExactSolver, HeuristicSolver, MatchSolver, SolverRegistry};
use crate::optim::{self, AdamState};
use crate::rng;
use crate::synth::{Corpus, SourceImage};
use crate::tensor::Tensor;

pub const METRICS_HEADER: &str = "step\tloss\tmatch_acc\tobjective\tlr";

/// Encoder and message-passing parameters trained together.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub encoder: EncoderParams,
    pub gcn: GcnParams,
}

impl Model {
    pub fn encoder_config(cfg: &TrainConfig) -> EncoderConfig {
        EncoderConfig {
            channels: cfg.channels.clone(),
            embed_dim: cfg.embed_dim,
            ..EncoderConfig::default()
        }
    }

    /// Fresh parameters from the `init` stream, rounded to `f32`.
    pub fn init(cfg: &TrainConfig) -> Self {
        let mut r = rng::stream(cfg.seed, rng::INIT);
        let encoder = EncoderParams::init(&Self::encoder_config(cfg), &mut r);
        let mut widths = vec![cfg.embed_dim];
        widths.extend(&cfg.gcn_widths);
        let gcn = GcnParams::init(&widths, &mut r);
        let mut m = Model { encoder, gcn };
        m.round_to_f32();
        m
    }

    pub fn tensors(&self) -> Vec<(String, &Tensor)> {
        let enc = self.encoder.tensors().into_iter().map(|(n, t)| (format!("enc.{n}"), t));
        let gcn = self.gcn.tensors().into_iter().map(|(n, t)| (format!("gcn.{n}"), t));
        enc.chain(gcn).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let enc = self.encoder.tensors_mut().into_iter().map(|(n, t)| (format!("enc.{n}"), t));
        let gcn = self.gcn.tensors_mut().into_iter().map(|(n, t)| (format!("gcn.{n}"), t));
        enc.chain(gcn).collect()
    }

    pub fn zeros_like(&self) -> Self {
        Model {
            encoder: self.encoder.zeros_like(),
            gcn: self.gcn.zeros_like(),
        }
    }

    pub fn round_to_f32(&mut self) {
        for (_, t) in self.tensors_mut() {
            t.round_to_f32();
        }
    }

    /// Width of the encoder embedding z.
    pub fn embed_dim(&self) -> usize {
        self.encoder.embed_dim()
    }

    /// Rebuilds a model from `enc.*` and `gcn.*` tensors, checking that the
    /// layer shapes chain.
    pub fn from_tensors(named: &[(String, Tensor)]) -> Result<Self> {
        let find = |name: &str| named.iter().find(|(n, _)| n == name).map(|(_, t)| t.clone());
        let bad = |msg: String| Error::format("checkpoint", msg);
        let mut conv = Vec::new();
        let mut in_ch = 1;
        while let Some(weight) = find(&format!("enc.conv{}.weight", conv.len())) {
            let k = conv.len();
            let bias = find(&format!("enc.conv{k}.bias")).ok_or_else(|| bad(format!("enc.conv{k}.bias missing")))?;
            if weight.shape.len() != 4 || weight.shape[1] != in_ch || weight.shape[2..] != [4, 4] || bias.shape != [weight.shape[0]] {
                return Err(bad(format!("conv layer {k} has shape {:?}", weight.shape)));
            }
            in_ch = weight.shape[0];
            conv.push(ConvLayer { weight, bias });
        }
        if conv.is_empty() {
            return Err(bad("no encoder layers".into()));
        }
        let proj_weight = find("enc.proj.weight").ok_or_else(|| bad("enc.proj.weight missing".into()))?;
        let proj_bias = find("enc.proj.bias").ok_or_else(|| bad("enc.proj.bias missing".into()))?;
        if proj_weight.shape.len() != 2 || proj_weight.shape[1] != in_ch || proj_bias.shape != [proj_weight.shape[0]] {
            return Err(bad(format!("projector has shape {:?}", proj_weight.shape)));
        }
        let mut width = proj_weight.shape[0];
        let mut layers = Vec::new();
        while let Some(w) = find(&format!("gcn.layer{}", layers.len())) {
            if w.shape.len() != 2 || w.shape[0] != width {
                return Err(bad(format!("GCN layer {} has shape {:?}", layers.len(), w.shape)));
            }
            width = w.shape[1];
            layers.push(w);
        }
        Ok(Model {
            encoder: EncoderParams {
                conv,
                proj_weight,
                proj_bias,
            },
            gcn: GcnParams { layers },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, &self.tensors())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Model::from_tensors(&checkpoint::load(path)?)
    }

    /// Unit-norm encoder embedding of one view.
    pub fn embed(&self, view: &Array2<f64>) -> Result<Array1<f64>> {
        Ok(encoder::forward(&self.encoder, view)?.z)
    }

    /// Errors unless the layer widths agree with `cfg`.
    pub fn check_config(&self, cfg: &TrainConfig) -> Result<()> {
        let widths: Vec<usize> = self.gcn.layers.iter().map(|w| w.shape[1]).collect();
        let channels: Vec<usize> = self.encoder.conv.iter().map(|l| l.weight.shape[0]).collect();
        if widths != cfg.gcn_widths || channels != cfg.channels || self.embed_dim() != cfg.embed_dim {
            return Err(Error::contract(format!(
                "model architecture (channels {channels:?}, embed {}, gcn {widths:?}) does not match the config",
                self.embed_dim()
            )));
        }
        Ok(())
    }
}

fn stack(rows: &[&Array1<f64>]) -> Array2<f64> {
    let f = rows.first().map_or(0, |r| r.len());
    Array2::from_shape_fn((rows.len(), f), |(i, k)| rows[i][k])
}

/// Everything the forward pass over one graph pair produces.
pub struct GraphForward {
    pub pairs: Vec<ViewPair>,
    pub traces_s: Vec<ForwardTrace>,
    pub traces_t: Vec<ForwardTrace>,
    pub graph_s: BatchGraph,
    pub graph_t: BatchGraph,
    pub gcn_s: Option<GcnTrace>,
    pub gcn_t: Option<GcnTrace>,
    /// Message-passed embeddings (X itself when message passing is off).
    pub z_s: Array2<f64>,
    pub z_t: Array2<f64>,
    pub edges_s: Vec<(usize, usize)>,
    pub edges_t: Vec<(usize, usize)>,
    y_s: Vec<Array3<f64>>,
    y_t: Vec<Array3<f64>>,
    pos_s: Vec<PosMap>,
    pos_t: Vec<PosMap>,
    alpha: f64,
    gamma: f64,
    pub system: AffinitySystem,
    pub affinity_trace: AffinityTrace,
}

impl GraphForward {
    fn inputs(&self) -> AffinityInputs<'_> {
        AffinityInputs {
            z_s: &self.z_s,
            z_t: &self.z_t,
            edges_s: &self.edges_s,
            edges_t: &self.edges_t,
            local: (self.alpha < 1.0).then(|| LocalInputs {
                y_s: &self.y_s,
                y_t: &self.y_t,
                pos_s: &self.pos_s,
                pos_t: &self.pos_t,
            }),
            alpha: self.alpha,
            gamma: self.gamma,
        }
    }
}

/// Views, encoder, graphs, GCN and affinities for one batch.
pub fn forward_graph(
    model: &Model,
    batch: &[&SourceImage],
    cfg: &TrainConfig,
    plan: &Plan,
    aug_rng: &mut rng::Rng,
) -> Result<GraphForward> {
    let pairs = augment::make_view_pairs(batch, aug_rng)?;
    let views: Vec<&Array2<f64>> = pairs.iter().flat_map(|p| [&p.view_s, &p.view_t]).collect();
    let traces: Vec<ForwardTrace> = views
        .par_iter()
        .map(|v| encoder::forward(&model.encoder, v))
        .collect::<Result<_>>()?;
    let mut traces_s = Vec::with_capacity(pairs.len());
    let mut traces_t = Vec::with_capacity(pairs.len());
    for (k, t) in traces.into_iter().enumerate() {
        if k % 2 == 0 { traces_s.push(t) } else { traces_t.push(t) }
    }
    let x_s = stack(&traces_s.iter().map(|t| &t.z).collect::<Vec<_>>());
    let x_t = stack(&traces_t.iter().map(|t| &t.z).collect::<Vec<_>>());
    let graph_s = graphnet::knn_graph(&x_s, cfg.k_neighbors, Side::Source)?;
    let graph_t = graphnet::knn_graph(&x_t, cfg.k_neighbors, Side::Target)?;
    let (gcn_s, gcn_t, z_s, z_t) = if plan.message_passing {
        let (a, b) = rayon::join(
            || graphnet::gcn_forward(&graph_s, &model.gcn),
            || graphnet::gcn_forward(&graph_t, &model.gcn),
        );
        let (a, b) = (a?, b?);
        let (zs, zt) = (a.output.clone(), b.output.clone());
        (Some(a), Some(b), zs, zt)
    } else {
        (None, None, x_s, x_t)
    };
    let (edges_s, edges_t) = if plan.second_order {
        (graph_s.edges(), graph_t.edges())
    } else {
        (Vec::new(), Vec::new())
    };
    let local = plan.alpha < 1.0;
    let cell = Model::encoder_config(cfg).cell();
    let grab = |traces: &[ForwardTrace]| -> Vec<Array3<f64>> {
        if local { traces.iter().map(|t| t.y().clone()).collect() } else { Vec::new() }
    };
    let pos = |side_s: bool| -> Vec<PosMap> {
        if !local {
            return Vec::new();
        }
        pairs
            .iter()
            .map(|p| if side_s { &p.pos_s } else { &p.pos_t }.downsample(cell))
            .collect()
    };
    let (y_s, y_t) = (grab(&traces_s), grab(&traces_t));
    let (pos_s, pos_t) = (pos(true), pos(false));
    let (system, affinity_trace) = affinity::build_system(&AffinityInputs {
        z_s: &z_s,
        z_t: &z_t,
        edges_s: &edges_s,
        edges_t: &edges_t,
        local: local.then(|| LocalInputs {
            y_s: &y_s,
            y_t: &y_t,
            pos_s: &pos_s,
            pos_t: &pos_t,
        }),
        alpha: plan.alpha,
        gamma: cfg.gamma,
    })?;
    Ok(GraphForward {
        pairs,
        traces_s,
        traces_t,
        graph_s,
        graph_t,
        gcn_s,
        gcn_t,
        z_s,
        z_t,
        edges_s,
        edges_t,
        y_s,
        y_t,
        pos_s,
        pos_t,
        alpha: plan.alpha,
        gamma: cfg.gamma,
        system,
        affinity_trace,
    })
}

/// Parameter gradients for a scalar loss with partials w.r.t. `c_v` and `c_e`.
pub fn backward_graph(
    model: &Model,
    fw: &GraphForward,
    grad_cv: &Array2<f64>,
    grad_ce: &Array2<f64>,
) -> Result<Model> {
    let ag = affinity::system_backward(&fw.inputs(), &fw.affinity_trace, grad_cv, grad_ce)?;
    let mut grads = model.zeros_like();
    let (gx_s, gx_t) = match (&fw.gcn_s, &fw.gcn_t) {
        (Some(ts), Some(tt)) => {
            let (gs, xs) = graphnet::gcn_backward(&model.gcn, ts, &ag.z_s)?;
            let (gt, xt) = graphnet::gcn_backward(&model.gcn, tt, &ag.z_t)?;
            for ((a, b), c) in grads.gcn.layers.iter_mut().zip(&gs.layers).zip(&gt.layers) {
                a.add_assign(b);
                a.add_assign(c);
            }
            (xs, xt)
        }
        _ => (ag.z_s, ag.z_t),
    };
    let n = fw.traces_s.len();
    let jobs: Vec<(&ForwardTrace, Array1<f64>, Option<&Array3<f64>>)> = (0..n)
        .map(|i| (&fw.traces_s[i], gx_s.row(i).to_owned(), ag.y_s.get(i)))
        .chain((0..n).map(|i| (&fw.traces_t[i], gx_t.row(i).to_owned(), ag.y_t.get(i))))
        .collect();
    let parts: Vec<EncoderParams> = jobs
        .par_iter()
        .map(|(trace, gz, gy)| {
            let zero;
            let gy = match gy {
                Some(g) => *g,
                None => {
                    zero = Array3::zeros(trace.y().dim());
                    &zero
                }
            };
            let mut g = model.encoder.zeros_like();
            encoder::backward_into(&model.encoder, trace, gy, gz, &mut g, false)?;
            Ok(g)
        })
        .collect::<Result<_>>()?;
    for part in &parts {
        for ((_, a), (_, b)) in grads.encoder.tensors_mut().into_iter().zip(part.tensors()) {
            a.add_assign(b);
        }
    }
    Ok(grads)
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepMetrics {
    pub step: usize,
    pub loss: f64,
    pub match_acc: f64,
    pub objective: f64,
    pub lr: f64,
    pub grad_norm_encoder: f64,
    pub grad_norm_gcn: f64,
}

impl StepMetrics {
    pub fn tsv_line(&self) -> String {
        format!(
            "{}\t{:.6}\t{:.6}\t{:.6}\t{:e}",
            self.step, self.loss, self.match_acc, self.objective, self.lr
        )
    }
}

/// Training state over one corpus.
pub struct Trainer<'c> {
    pub cfg: TrainConfig,
    pub plan: Plan,
    pub model: Model,
    pub adam: AdamState,
    /// Completed update steps.
    pub step: usize,
    corpus: &'c Corpus,
    train_pool: Vec<usize>,
    solvers: SolverRegistry,
    /// Instance text of the last system that produced non-finite values.
    pub last_dump: Option<String>,
}

/// Training and held-out index slices: the held-out slice is the corpus tail.
pub fn split(corpus_len: usize, holdout_fraction: f64) -> (Vec<usize>, Vec<usize>) {
    let held = ((holdout_fraction * corpus_len as f64).round() as usize).min(corpus_len);
    let cut = corpus_len - held;
    ((0..cut).collect(), (cut..corpus_len).collect())
}

pub fn solver_registry() -> SolverRegistry {
    SolverRegistry::with_settings(ExactSolver::default(), HeuristicSolver::default())
}

impl<'c> Trainer<'c> {
    pub fn new(cfg: TrainConfig, corpus: &'c Corpus) -> Result<Self> {
        let model = Model::init(&cfg);
        Trainer::with_model(cfg, corpus, model)
    }

    pub fn with_model(cfg: TrainConfig, corpus: &'c Corpus, model: Model) -> Result<Self> {
        cfg.validate()?;
        model.check_config(&cfg)?;
        let plan = Plan::resolve(&cfg)?;
        let (train_pool, _) = split(corpus.len(), cfg.holdout_fraction);
        if train_pool.len() < cfg.batch_size * cfg.graphs_per_step {
            return Err(Error::param(format!(
                "training split of {} images cannot fill one step",
                train_pool.len()
            )));
        }
        let adam = AdamState::new(model.tensors().into_iter().map(|(_, t)| t));
        Ok(Trainer {
            cfg,
            plan,
            model,
            adam,
            step: 0,
            corpus,
            train_pool,
            solvers: solver_registry(),
            last_dump: None,
        })
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.train_pool.len() / (self.cfg.batch_size * self.cfg.graphs_per_step)
    }

    pub fn total_steps(&self) -> usize {
        self.steps_per_epoch() * self.cfg.epochs
    }

    pub fn solver(&self) -> Result<&dyn MatchSolver> {
        self.solvers.for_mode(self.plan.solver_mode)
    }

    /// Corpus indices of each graph in update step `step` (0-based). Each
    /// epoch walks a fresh shuffle of the training pool.
    pub fn batches_for(&self, step: usize) -> Vec<Vec<usize>> {
        let spe = self.steps_per_epoch();
        let (epoch, within) = (step / spe, step % spe);
        let mut order = self.train_pool.clone();
        order.shuffle(&mut rng::indexed_stream(self.cfg.seed, rng::BATCH, epoch as u64));
        let n = self.cfg.batch_size;
        (0..self.cfg.graphs_per_step)
            .map(|g| {
                let start = (within * self.cfg.graphs_per_step + g) * n;
                order[start..start + n].to_vec()
            })
            .collect()
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        optim::scheduled_lr(self.cfg.lr, self.cfg.lr_halvings, step, self.total_steps())
    }

    /// Runs one update step and returns its metrics.
    pub fn train_step(&mut self) -> Result<StepMetrics> {
        let step = self.step;
        let batches = self.batches_for(step);
        let imle_cfg = ImleConfig {
            lambda: self.cfg.lambda,
            noise_scale: self.plan.noise_scale,
            offset: self.plan.noise_offset,
        };
        let solver = self.solvers.for_mode(self.plan.solver_mode)?;
        let mut total = self.model.zeros_like();
        let (mut loss, mut acc, mut objective) = (0.0, 0.0, 0.0);
        for (g, idx) in batches.iter().enumerate() {
            let stream = (step * self.cfg.graphs_per_step + g) as u64;
            let batch: Vec<&SourceImage> = idx.iter().map(|&i| &self.corpus.images[i]).collect();
            let mut aug = rng::indexed_stream(self.cfg.seed, rng::AUGMENT, stream);
            let fw = forward_graph(&self.model, &batch, &self.cfg, &self.plan, &mut aug)?;
            if !fw.system.is_finite() {
                self.last_dump = Some(fw.system.to_instance_string());
                return Err(Error::NumericOverflow(format!(
                    "affinities at step {}: {}",
                    step + 1,
                    affinity::describe(&fw.system)
                )));
            }
            let gold = GoldMatching::identity(batch.len());
            let mut gum = rng::indexed_stream(self.cfg.seed, rng::GUMBEL, stream);
            let (v_tilde, mut state) = imle::forward(&fw.system, solver, &imle_cfg, &mut gum)?;
            let l = imle::hamming_loss(&v_tilde.assignment, &gold)?;
            if !l.is_finite() {
                self.last_dump = Some(fw.system.to_instance_string());
                return Err(Error::NumericOverflow(format!("loss at step {}", step + 1)));
            }
            let grads = state.backward(&gold.hamming_gradient())?;
            let pg = backward_graph(&self.model, &fw, &grads.c_v, &grads.c_e)?;
            for ((_, a), (_, b)) in total.tensors_mut().into_iter().zip(pg.tensors()) {
                a.add_assign(b);
            }
            loss += l;
            acc += v_tilde.identity_accuracy();
            objective += fw.system.objective(&v_tilde.assignment);
        }
        let k = 1.0 / batches.len() as f64;
        let wd = self.cfg.weight_decay;
        for ((_, g), (_, p)) in total.tensors_mut().into_iter().zip(self.model.tensors()) {
            g.scale(k);
            if wd > 0.0 {
                for (gv, pv) in g.data.iter_mut().zip(&p.data) {
                    *gv += wd * pv;
                }
            }
        }
        if !total.tensors().iter().all(|(_, t)| t.is_finite()) {
            return Err(Error::NumericOverflow(format!("gradients at step {}", step + 1)));
        }
        let grad_norm_encoder = total.encoder.tensors().iter().map(|(_, t)| t.sum_sq()).sum::<f64>().sqrt();
        let grad_norm_gcn = total.gcn.tensors().iter().map(|(_, t)| t.sum_sq()).sum::<f64>().sqrt();
        let lr = self.lr_at(step);
        {
            let grads: Vec<&Tensor> = total.tensors().into_iter().map(|(_, t)| t).collect();
            let mut params: Vec<&mut Tensor> = self.model.tensors_mut().into_iter().map(|(_, t)| t).collect();
            optim::adam_update(&mut params, &grads, &mut self.adam, lr)?;
        }
        self.model.round_to_f32();
        for t in self.adam.m.iter_mut().chain(self.adam.v.iter_mut()) {
            t.round_to_f32();
        }
        self.step += 1;
        Ok(StepMetrics {
            step: self.step,
            loss: loss * k,
            match_acc: acc * k,
            objective: objective * k,
            lr,
            grad_norm_encoder,
            grad_norm_gcn,
        })
    }

    /// Model, Adam moments and the step counter.
    pub fn checkpoint_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out: Vec<(String, Tensor)> = self.model.tensors().into_iter().map(|(n, t)| (n, t.clone())).collect();
        let names: Vec<String> = out.iter().map(|(n, _)| n.clone()).collect();
        for (name, (m, v)) in names.iter().zip(self.adam.m.iter().zip(&self.adam.v)) {
            out.push((format!("adam.m.{name}"), m.clone()));
            out.push((format!("adam.v.{name}"), v.clone()));
        }
        let counter = |v: usize| Tensor::from_vec(&[2], vec![(v >> 20) as f64, (v & 0xF_FFFF) as f64]).expect("two values");
        out.push(("adam.step".into(), counter(self.adam.step as usize)));
        out.push(("train.step".into(), counter(self.step)));
        out
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let named = self.checkpoint_tensors();
        let refs: Vec<(String, &Tensor)> = named.iter().map(|(n, t)| (n.clone(), t)).collect();
        checkpoint::save(path, &refs)
    }

    /// Restores a trainer saved by [`Trainer::save_checkpoint`].
    pub fn resume(cfg: TrainConfig, corpus: &'c Corpus, path: &Path) -> Result<Self> {
        let named = checkpoint::load(path)?;
        let model = Model::from_tensors(&named)?;
        let mut t = Trainer::with_model(cfg, corpus, model)?;
        let find = |name: &str| {
            named
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t.clone())
                .ok_or_else(|| Error::format("checkpoint", format!("{name} missing")))
        };
        let names: Vec<String> = t.model.tensors().into_iter().map(|(n, _)| n).collect();
        for (k, name) in names.iter().enumerate() {
            t.adam.m[k] = find(&format!("adam.m.{name}"))?;
            t.adam.v[k] = find(&format!("adam.v.{name}"))?;
        }
        let counter = |t: Tensor| -> Result<usize> {
            match t.data.as_slice() {
                [hi, lo] => Ok(((*hi as usize) << 20) | *lo as usize),
                _ => Err(Error::format("checkpoint", "bad step counter")),
            }
        };
        t.adam.step = counter(find("adam.step")?)? as u64;
        t.step = counter(find("train.step")?)?;
        Ok(t)
    }

    /// Trains to `total_steps`, appending metric lines to `out/metrics.tsv`
    /// and handing each line to `log`. A numeric failure leaves
    /// `diagnostic.txt` with the offending instance.
    pub fn run(&mut self, out: Option<&Path>, mut log: impl FnMut(&StepMetrics)) -> Result<Vec<StepMetrics>> {
        let mut file = match out {
            Some(dir) => {
                fs::create_dir_all(dir)?;
                let path = dir.join("metrics.tsv");
                let fresh = self.step == 0 || !path.exists();
                let mut f = fs::OpenOptions::new().create(true).append(!fresh).write(true).truncate(fresh).open(&path)?;
                if fresh {
                    writeln!(f, "{METRICS_HEADER}")?;
                }
                Some(f)
            }
            None => None,
        };
        let mut history = Vec::new();
        while self.step < self.total_steps() {
            let m = match self.train_step() {
                Ok(m) => m,
                Err(e) => {
                    if let (Some(dir), Some(dump)) = (out, &self.last_dump) {
                        fs::write(dir.join("diagnostic.txt"), format!("# {e}\n{dump}"))?;
                    }
                    return Err(e);
                }
            };
            if let Some(f) = file.as_mut() {
                writeln!(f, "{}", m.tsv_line())?;
            }
            log(&m);
            if let Some(dir) = out {
                let every = self.cfg.checkpoint_every;
                if every > 0 && self.step % every == 0 {
                    self.save_checkpoint(&checkpoint_path(dir, self.step))?;
                }
            }
            history.push(m);
        }
        if let Some(dir) = out {
            self.save_checkpoint(&dir.join("final.ckpt"))?;
        }
        Ok(history)
    }
}

/// One row of an ablation table.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub axis: String,
    pub match_acc: f64,
    pub dup_disambig: Option<f64>,
    /// Mean Hamming loss over the last epoch.
    pub final_loss: f64,
}

impl AblationRow {
    pub fn tsv_line(&self) -> String {
        let dup = self.dup_disambig.map_or("NA".to_string(), |d| format!("{d:.6}"));
        format!("{}\t{:.6}\t{dup}\t{:.6}", self.axis, self.match_acc, self.final_loss)
    }
}

pub const ABLATION_HEADER: &str = "axis\tmatch_acc\tdup_disambig\tfinal_loss";

/// Trains with `axis` switched off and evaluates on the held-out slice.
/// Metrics go to `out/metrics.tsv` when `out` is given.
pub fn run_ablation(
    cfg: &TrainConfig,
    corpus: &Corpus,
    axis: &str,
    eval_trials: usize,
    out: Option<&Path>,
) -> Result<(AblationRow, Model)> {
    let cfg = TrainConfig {
        ablation: axis.to_string(),
        ..cfg.clone()
    };
    let mut trainer = Trainer::new(cfg.clone(), corpus)?;
    let history = trainer.run(out, |_| {})?;
    let tail = trainer.steps_per_epoch().min(history.len()).max(1);
    let final_loss = history.iter().rev().take(tail).map(|m| m.loss).sum::<f64>() / tail as f64;
    let (_, held) = split(corpus.len(), cfg.holdout_fraction);
    let report = crate::eval::eval_matching(&trainer.model, corpus, &held, &cfg, &trainer.plan, eval_trials, cfg.seed)?;
    Ok((
        AblationRow {
            axis: axis.to_string(),
            match_acc: report.match_acc,
            dup_disambig: report.dup_disambig,
            final_loss,
        },
        trainer.model,
    ))
}

pub fn checkpoint_path(dir: &Path, step: usize) -> PathBuf {
    dir.join(format!("step{step:06}.ckpt"))
}
