//! `gm-ssl`: corpus generation, pretraining, standalone solving, gradient
//! checks, evaluation, ablations and embedding export.

mod manifest;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use gmssl_core::ablation::AblationRegistry;
use gmssl_core::affinity::AffinitySystem;
use gmssl_core::config::TrainConfig;
use gmssl_core::eval::{self, EvalReport};
use gmssl_core::gradcheck;
use gmssl_core::imle::{self, GoldMatching, ImleConfig};
use gmssl_core::matcher::{ExactSolver, SolverMode};
use gmssl_core::rng;
use gmssl_core::synth::{self, Corpus, CANVAS};
use gmssl_core::trainer::{self, Model, Trainer, ABLATION_HEADER, METRICS_HEADER};
use gmssl_core::Error;

use manifest::RunManifest;

/// Largest finite-difference relative error `grad-check` accepts.
const GRAD_TOLERANCE: f64 = 1e-4;

#[derive(Parser)]
#[command(name = "gm-ssl", version, about = "Self-supervised pretraining by second-order graph matching")]
struct Cli {
    /// Cap on worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,

    /// Overrides the config seed and GMSSL_SEED.
    #[arg(long)]
    seed: Option<u64>,

    /// Extra `key=value` overrides, applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic corpus as PGM files plus a manifest.
    GenCorpus {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        dup_fraction: Option<f64>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train the encoder and message-passing network.
    Pretrain {
        #[arg(long)]
        out: PathBuf,
        /// Read the corpus from a `gen-corpus` directory instead of rendering it.
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Solve one instance file.
    Solve {
        #[arg(long)]
        instance: PathBuf,
        #[arg(long, default_value = "heuristic")]
        mode: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// IMLE estimate against a score-function oracle; `--network` adds the
    /// finite-difference check of the encoder and GCN backward passes.
    GradCheck {
        #[arg(long, default_value_t = 3)]
        n: usize,
        #[arg(long, default_value_t = 1000)]
        samples: usize,
        #[arg(long, default_value_t = 80.0)]
        lambda: f64,
        #[arg(long, default_value_t = 100_000)]
        oracle_samples: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        network: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Held-out matching accuracy, duplicate score, solver gap and probe accuracy.
    EvalMatching {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train and evaluate with one component switched off.
    Ablate {
        /// Axis name, or `all`.
        #[arg(long, default_value = "all")]
        axis: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Write one embedding row per corpus image.
    ExportEmbeddings {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

enum Failure {
    Usage(String),
    Core(Error),
    Threshold(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Core(Error::Io(e))
    }
}

type CliResult<T = ()> = Result<T, Failure>;

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::ExactCapExceeded { .. } | Error::NodeLimit(_) => 2,
        Error::NumericOverflow(_) | Error::DegenerateEmbedding | Error::NonFiniteInput => 3,
        _ => 1,
    }
}

fn resolve_config(args: &ConfigArgs) -> CliResult<TrainConfig> {
    let mut cfg = match &args.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    cfg.apply_env()?;
    for kv in &args.sets {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Failure::Usage(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn load_corpus(cfg: &TrainConfig, dir: Option<&Path>) -> CliResult<Corpus> {
    Ok(match dir {
        Some(d) => synth::read_corpus(d, cfg.seed)?,
        None => synth::generate_corpus(cfg.seed, cfg.corpus_size, cfg.dup_fraction)?,
    })
}

fn gen_corpus(out: &Path, count: Option<usize>, dup: Option<f64>, args: &ConfigArgs) -> CliResult {
    let cfg = resolve_config(args)?;
    let corpus = synth::generate_corpus(
        cfg.seed,
        count.unwrap_or(cfg.corpus_size),
        dup.unwrap_or(cfg.dup_fraction),
    )?;
    synth::write_corpus(&corpus, out)?;
    println!("wrote {} images to {}", corpus.len(), out.display());
    Ok(())
}

fn pretrain(out: &Path, corpus_dir: Option<&Path>, epochs: Option<usize>, resume: Option<&Path>, args: &ConfigArgs) -> CliResult {
    let mut cfg = resolve_config(args)?;
    if let Some(e) = epochs {
        cfg.epochs = e;
    }
    cfg.validate()?;
    let corpus = load_corpus(&cfg, corpus_dir)?;
    fs::create_dir_all(out)?;
    RunManifest::new(&cfg, corpus.seed).write(&out.join("manifest.txt"))?;
    let mut trainer = match resume {
        Some(p) => Trainer::resume(cfg, &corpus, p)?,
        None => Trainer::new(cfg, &corpus)?,
    };
    let stdout = std::io::stdout();
    if trainer.step == 0 {
        writeln!(stdout.lock(), "{METRICS_HEADER}")?;
    }
    trainer.run(Some(out), |m| {
        let _ = writeln!(stdout.lock(), "{}", m.tsv_line());
    })?;
    Ok(())
}

fn solve(instance: &Path, mode: &str, out: Option<&Path>) -> CliResult {
    let mode: SolverMode = mode.parse()?;
    let system: AffinitySystem = fs::read_to_string(instance)?.parse()?;
    let registry = trainer::solver_registry();
    let m = registry.for_mode(mode)?.solve(&system)?;
    let assignment: Vec<String> = m.assignment.iter().map(usize::to_string).collect();
    let text = format!("assignment {}\nobjective {}\n", assignment.join(" "), m.objective);
    print!("{text}");
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("solution.txt"), text)?;
    }
    Ok(())
}

fn grad_check(n: usize, samples: usize, lambda: f64, oracle_samples: usize, seed: u64, network: bool, out: Option<&Path>) -> CliResult {
    let system = if n == 3 {
        imle::probe_instance()
    } else {
        eval::random_system(n, 1.0, &mut rng::stream(seed, "grad-check"))?
    };
    let solver = ExactSolver::default();
    let gold = GoldMatching::identity(n);
    let cfg = ImleConfig { lambda, ..ImleConfig::default() };
    let est = imle::estimate_gradient(&system, &solver, &cfg, &gold, samples, &mut rng::stream(seed, rng::GUMBEL))?;
    let oracle = imle::score_function_gradient(&system, &solver, 1.0, &gold, oracle_samples, &mut rng::stream(seed, "oracle"))?;
    let (est, oracle) = (est.flatten(), oracle.flatten());
    let cos = imle::cosine(&est, &oracle);
    let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.5}")).collect::<Vec<_>>().join(" ");
    let mut text = format!("estimate {}\noracle {}\ncosine {cos:.6}\n", fmt(&est), fmt(&oracle));
    let mut worst = 0.0f64;
    if network {
        let enc = gradcheck::check_encoder(seed)?;
        let gcn = gradcheck::check_gcn(seed)?;
        for (name, r) in [("encoder", &enc), ("gcn", &gcn)] {
            text += &format!("{name} checked={} max_rel_err={:e} worst={}\n", r.checked, r.max_rel_err, r.worst);
        }
        worst = enc.max_rel_err.max(gcn.max_rel_err);
    }
    print!("{text}");
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("gradcheck.txt"), &text)?;
    }
    if worst >= GRAD_TOLERANCE {
        return Err(Failure::Threshold(format!("relative error {worst:e} exceeds {GRAD_TOLERANCE:e}")));
    }
    Ok(())
}

fn eval_matching(ckpt: &Path, trials: usize, corpus_dir: Option<&Path>, out: Option<&Path>, args: &ConfigArgs) -> CliResult {
    let cfg = resolve_config(args)?;
    let model = Model::load(ckpt)?;
    model.check_config(&cfg)?;
    let corpus = load_corpus(&cfg, corpus_dir)?;
    let plan = gmssl_core::ablation::Plan::resolve(&cfg)?;
    let (_, held) = trainer::split(corpus.len(), cfg.holdout_fraction);
    let m = eval::eval_matching(&model, &corpus, &held, &cfg, &plan, trials, cfg.seed)?;
    let quality = eval::solver_quality(50, 6, &mut rng::stream(cfg.seed, rng::EVAL))?;
    let images: Vec<_> = corpus.images.iter().collect();
    let emb = eval::embed_images(&model, &images)?;
    let labels: Vec<u32> = corpus.images.iter().map(|i| i.class_tag).collect();
    let probe_acc = eval::linear_probe(&emb, &labels, cfg.seed)?;
    let report = EvalReport {
        match_acc: m.match_acc,
        dup_disambig: m.dup_disambig,
        solver_gap: quality.mean_gap,
        probe_acc,
    };
    print!("{report}");
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("report.txt"), report.to_string())?;
    }
    Ok(())
}

fn ablate(axis: &str, out: &Path, corpus_dir: Option<&Path>, trials: usize, args: &ConfigArgs) -> CliResult {
    let cfg = resolve_config(args)?;
    let axes: Vec<String> = if axis == "all" {
        AblationRegistry::default().names().into_iter().map(String::from).collect()
    } else {
        AblationRegistry::default().get(axis)?;
        vec![axis.to_string()]
    };
    let corpus = load_corpus(&cfg, corpus_dir)?;
    fs::create_dir_all(out)?;
    RunManifest::new(&cfg, corpus.seed).write(&out.join("manifest.txt"))?;
    let mut table = format!("{ABLATION_HEADER}\n");
    println!("{ABLATION_HEADER}");
    for a in &axes {
        let (row, _) = trainer::run_ablation(&cfg, &corpus, a, trials, Some(&out.join(a)))?;
        println!("{}", row.tsv_line());
        table += &row.tsv_line();
        table.push('\n');
        fs::write(out.join("ablation.tsv"), &table)?;
    }
    Ok(())
}

fn export_embeddings(ckpt: &Path, out: &Path, corpus_dir: Option<&Path>, args: &ConfigArgs) -> CliResult {
    let cfg = resolve_config(args)?;
    let model = Model::load(ckpt)?;
    let corpus = load_corpus(&cfg, corpus_dir)?;
    if let Some(img) = corpus.images.iter().find(|i| i.pixels.dim() != (CANVAS, CANVAS)) {
        return Err(Error::Contract(format!(
            "corpus image of shape {:?} does not match the checkpoint's {CANVAS}x{CANVAS} input",
            img.pixels.dim()
        ))
        .into());
    }
    let images: Vec<_> = corpus.images.iter().collect();
    let emb = eval::embed_images(&model, &images)?;
    let mut text = format!("{} {}\n", emb.nrows(), emb.ncols());
    for row in emb.outer_iter() {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
        text += &cells.join(" ");
        text.push('\n');
    }
    fs::create_dir_all(out)?;
    fs::write(out.join("embeddings.txt"), text)?;
    println!("wrote {} embeddings of width {}", emb.nrows(), emb.ncols());
    Ok(())
}

fn run(cli: Cli) -> CliResult {
    if let Some(t) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(t.max(1))
            .build_global()
            .map_err(|e| Failure::Usage(e.to_string()))?;
    }
    match &cli.command {
        Command::GenCorpus { out, count, dup_fraction, cfg } => gen_corpus(out, *count, *dup_fraction, cfg),
        Command::Pretrain { out, corpus, epochs, resume, cfg } => {
            pretrain(out, corpus.as_deref(), *epochs, resume.as_deref(), cfg)
        }
        Command::Solve { instance, mode, out } => solve(instance, mode, out.as_deref()),
        Command::GradCheck { n, samples, lambda, oracle_samples, seed, network, out } => {
            grad_check(*n, *samples, *lambda, *oracle_samples, *seed, *network, out.as_deref())
        }
        Command::EvalMatching { checkpoint, trials, corpus, out, cfg } => {
            eval_matching(checkpoint, *trials, corpus.as_deref(), out.as_deref(), cfg)
        }
        Command::Ablate { axis, out, corpus, trials, cfg } => ablate(axis, out, corpus.as_deref(), *trials, cfg),
        Command::ExportEmbeddings { checkpoint, out, corpus, cfg } => {
            export_embeddings(checkpoint, out, corpus.as_deref(), cfg)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Threshold(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(3)
        }
        Err(Failure::Core(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
