//! Training configuration and the flat `key = value` file format.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::matcher::SolverMode;

/// Environment variable that overrides the configured seed.
pub const SEED_ENV: &str = "GMSSL_SEED";

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Images per graph; equals the graph size N.
    pub batch_size: usize,
    pub k_neighbors: usize,
    pub alpha: f64,
    pub lambda: f64,
    pub gamma: f64,
    pub lr: f64,
    pub lr_halvings: usize,
    pub weight_decay: f64,
    pub epochs: usize,
    pub seed: u64,
    pub noise_scale: f64,
    pub noise_offset: f64,
    pub solver_mode: SolverMode,
    pub graphs_per_step: usize,
    /// Write a checkpoint every this many steps; 0 disables periodic saves.
    pub checkpoint_every: usize,
    pub corpus_size: usize,
    pub dup_fraction: f64,
    /// Trailing share of the corpus kept out of training.
    pub holdout_fraction: f64,
    pub channels: Vec<usize>,
    pub embed_dim: usize,
    /// Output widths of the GCN layers.
    pub gcn_widths: Vec<usize>,
    pub ablation: String,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 16,
            k_neighbors: 5,
            alpha: 0.8,
            lambda: 80.0,
            gamma: 0.5,
            lr: 2e-3,
            lr_halvings: 4,
            weight_decay: 0.0,
            epochs: 30,
            seed: 7,
            noise_scale: 1.0,
            noise_offset: 0.0,
            solver_mode: SolverMode::Heuristic,
            graphs_per_step: 1,
            checkpoint_every: 0,
            corpus_size: 2000,
            dup_fraction: 0.0,
            holdout_fraction: 0.2,
            channels: vec![8, 16, 32],
            embed_dim: 32,
            gcn_widths: vec![32, 32],
            ablation: "full".into(),
        }
    }
}

fn list(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("batch_size", self.batch_size),
            ("k_neighbors", self.k_neighbors),
            ("epochs", self.epochs),
            ("graphs_per_step", self.graphs_per_step),
            ("corpus_size", self.corpus_size),
            ("embed_dim", self.embed_dim),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::param(format!("{name} must be positive")));
            }
        }
        if self.k_neighbors >= self.batch_size {
            return Err(Error::param(format!(
                "k_neighbors {} must be below batch_size {}",
                self.k_neighbors, self.batch_size
            )));
        }
        for (name, v) in [("alpha", self.alpha), ("gamma", self.gamma)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::param(format!("{name} = {v} outside [0, 1]")));
            }
        }
        if !(self.gamma > 0.0) {
            return Err(Error::param("gamma must be positive"));
        }
        for (name, v) in [("lambda", self.lambda), ("lr", self.lr)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::param(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.noise_scale >= 0.0) || !self.noise_offset.is_finite() || !(self.weight_decay >= 0.0) {
            return Err(Error::param("noise_scale and weight_decay must be non-negative"));
        }
        if !(0.0..=1.0).contains(&self.dup_fraction) || !(0.0..1.0).contains(&self.holdout_fraction) {
            return Err(Error::param("dup_fraction in [0, 1] and holdout_fraction in [0, 1) required"));
        }
        if self.channels.is_empty() || self.channels.contains(&0) || self.gcn_widths.contains(&0) {
            return Err(Error::param("layer widths must be positive"));
        }
        let (train, held) = self.split_sizes();
        if train < self.batch_size {
            return Err(Error::param(format!(
                "training split of {train} images is smaller than one batch"
            )));
        }
        if held > 0 && held < self.batch_size {
            return Err(Error::param(format!(
                "held-out split of {held} images is smaller than one batch"
            )));
        }
        Ok(())
    }

    /// Sizes of the training and held-out slices.
    pub fn split_sizes(&self) -> (usize, usize) {
        let held = (self.holdout_fraction * self.corpus_size as f64).round() as usize;
        (self.corpus_size - held.min(self.corpus_size), held)
    }

    pub fn steps_per_epoch(&self) -> usize {
        (self.split_sizes().0 / (self.batch_size * self.graphs_per_step)).max(1)
    }

    pub fn total_steps(&self) -> usize {
        self.steps_per_epoch() * self.epochs
    }

    /// Embedding width after message passing.
    pub fn output_dim(&self) -> usize {
        self.gcn_widths.last().copied().unwrap_or(self.embed_dim)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::param(format!("bad value `{value}` for {key}")))
        }
        fn widths(key: &str, value: &str) -> Result<Vec<usize>> {
            if value.is_empty() || value == "none" {
                return Ok(Vec::new());
            }
            value.split(',').map(|v| num(key, v.trim())).collect()
        }
        match key {
            "batch_size" => self.batch_size = num(key, value)?,
            "k_neighbors" => self.k_neighbors = num(key, value)?,
            "alpha" => self.alpha = num(key, value)?,
            "lambda" => self.lambda = num(key, value)?,
            "gamma" => self.gamma = num(key, value)?,
            "lr" => self.lr = num(key, value)?,
            "lr_halvings" => self.lr_halvings = num(key, value)?,
            "weight_decay" => self.weight_decay = num(key, value)?,
            "epochs" => self.epochs = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "noise_scale" => self.noise_scale = num(key, value)?,
            "noise_offset" => self.noise_offset = num(key, value)?,
            "solver_mode" => self.solver_mode = value.parse()?,
            "graphs_per_step" => self.graphs_per_step = num(key, value)?,
            "checkpoint_every" => self.checkpoint_every = num(key, value)?,
            "corpus_size" => self.corpus_size = num(key, value)?,
            "dup_fraction" => self.dup_fraction = num(key, value)?,
            "holdout_fraction" => self.holdout_fraction = num(key, value)?,
            "channels" => self.channels = widths(key, value)?,
            "embed_dim" => self.embed_dim = num(key, value)?,
            "gcn_widths" => self.gcn_widths = widths(key, value)?,
            "ablation" => self.ablation = value.to_string(),
            _ => {
                return Err(Error::UnknownName {
                    name: key.to_string(),
                    known: KEYS.join(", "),
                })
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        fs::read_to_string(path)?.parse()
    }

    /// Applies `GMSSL_SEED` when it is set.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = v
                .trim()
                .parse()
                .map_err(|_| Error::param(format!("{SEED_ENV}={v} is not a seed")))?;
        }
        Ok(())
    }
}

pub const KEYS: [&str; 22] = [
    "batch_size",
    "k_neighbors",
    "alpha",
    "lambda",
    "gamma",
    "lr",
    "lr_halvings",
    "weight_decay",
    "epochs",
    "seed",
    "noise_scale",
    "noise_offset",
    "solver_mode",
    "graphs_per_step",
    "checkpoint_every",
    "corpus_size",
    "dup_fraction",
    "holdout_fraction",
    "channels",
    "embed_dim",
    "gcn_widths",
    "ablation",
];

impl FromStr for TrainConfig {
    type Err = Error;

    /// Starts from the defaults; later lines win.
    fn from_str(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::format("config", format!("line {}: expected key = value", no + 1)))?;
            cfg.set(key.trim(), value.trim())?;
        }
        Ok(cfg)
    }
}

impl fmt::Display for TrainConfig {
    /// Every key with its resolved value; parses back to an equal config.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "batch_size = {}", self.batch_size)?;
        writeln!(f, "k_neighbors = {}", self.k_neighbors)?;
        writeln!(f, "alpha = {:?}", self.alpha)?;
        writeln!(f, "lambda = {:?}", self.lambda)?;
        writeln!(f, "gamma = {:?}", self.gamma)?;
        writeln!(f, "lr = {:?}", self.lr)?;
        writeln!(f, "lr_halvings = {}", self.lr_halvings)?;
        writeln!(f, "weight_decay = {:?}", self.weight_decay)?;
        writeln!(f, "epochs = {}", self.epochs)?;
        writeln!(f, "seed = {}", self.seed)?;
        writeln!(f, "noise_scale = {:?}", self.noise_scale)?;
        writeln!(f, "noise_offset = {:?}", self.noise_offset)?;
        writeln!(f, "solver_mode = {}", self.solver_mode)?;
        writeln!(f, "graphs_per_step = {}", self.graphs_per_step)?;
        writeln!(f, "checkpoint_every = {}", self.checkpoint_every)?;
        writeln!(f, "corpus_size = {}", self.corpus_size)?;
        writeln!(f, "dup_fraction = {:?}", self.dup_fraction)?;
        writeln!(f, "holdout_fraction = {:?}", self.holdout_fraction)?;
        writeln!(f, "channels = {}", list(&self.channels))?;
        writeln!(f, "embed_dim = {}", self.embed_dim)?;
        let gcn = if self.gcn_widths.is_empty() { "none".to_string() } else { list(&self.gcn_widths) };
        writeln!(f, "gcn_widths = {gcn}")?;
        writeln!(f, "ablation = {}", self.ablation)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let cfg = TrainConfig::default();
        cfg.validate().unwrap();
        let back: TrainConfig = cfg.to_string().parse().unwrap();
        assert_eq!(back, cfg);
        assert_eq!(cfg.split_sizes(), (1600, 400));
        assert_eq!(cfg.steps_per_epoch(), 100);
    }

    #[test]
    fn parses_comments_and_overrides() {
        let cfg: TrainConfig = "# desk run\nalpha = 0.5  # blend\n\nsolver_mode = lap\ngcn_widths = 16,8\n"
            .parse()
            .unwrap();
        assert_eq!(cfg.alpha, 0.5);
        assert_eq!(cfg.solver_mode, SolverMode::LapOnly);
        assert_eq!(cfg.gcn_widths, vec![16, 8]);
        assert_eq!(cfg.output_dim(), 8);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(matches!("nope = 1".parse::<TrainConfig>(), Err(Error::UnknownName { .. })));
        assert!("alpha 0.5".parse::<TrainConfig>().is_err());
        assert!("alpha = x".parse::<TrainConfig>().is_err());
        let cfg: TrainConfig = "alpha = 1.5".parse().unwrap();
        assert!(cfg.validate().is_err());
        let cfg: TrainConfig = "k_neighbors = 16".parse().unwrap();
        assert!(cfg.validate().is_err());
    }
}
