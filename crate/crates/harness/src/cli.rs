//! Command-line front end. `run` maps argv to an exit code: 0 success,
//! 1 usage error, 2 runtime failure.

use std::ffi::OsString;
use std::path::PathBuf;

use afa_core::adversary::LambdaMode;
use afa_core::heads::HeadKind;
use anyhow::{bail, Result};
use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

use crate::config::{Ablation, ExperimentConfig, NoDdMode};
use crate::model::load_checkpoint;
use crate::run;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "afa", version, about = "Adversarial feature augmentation for cross-domain few-shot learning")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub flags: Flags,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Generate the synthetic benchmark and write it to OUT/data.
    GenData,
    /// Train encoder and base-class classifier; writes OUT/pretrain.
    Pretrain,
    /// Adversarial meta-training of one variant; writes OUT/meta-<variant>.
    MetaTrain,
    /// Multi-trial few-shot evaluation of a checkpoint on the target domains.
    Eval,
    /// Train and evaluate every ablation variant; writes OUT/ablation/table.tsv.
    Ablate,
    /// Finite-difference check of every loss path; writes OUT/gradcheck.json.
    Gradcheck,
}

/// Flags override values from `--config`.
#[derive(Debug, Default, clap::Args)]
pub struct Flags {
    /// JSON experiment configuration.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, value_name = "U64")]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// matching, proto or tpn.
    #[arg(long, global = true)]
    pub head: Option<String>,
    /// none, no_dd, no_lg, nonlinear or no_afa.
    #[arg(long, global = true)]
    pub ablation: Option<String>,
    /// dann or const:VALUE.
    #[arg(long, global = true)]
    pub lambda: Option<String>,
    #[arg(long, global = true, value_name = "N")]
    pub trials: Option<usize>,
    /// Meta-training iterations.
    #[arg(long, global = true, value_name = "N")]
    pub iters: Option<usize>,
    #[arg(long, global = true, value_name = "N")]
    pub pretrain_iters: Option<usize>,
    /// Shots per class for training and evaluation.
    #[arg(long, global = true, value_name = "K")]
    pub shots: Option<usize>,
    #[arg(long, global = true, value_name = "N")]
    pub ways: Option<usize>,
    /// Normalize the augmented stream with the original stream's batch statistics.
    #[arg(long, global = true)]
    pub shared_bn_stats: bool,
    /// lg or lc.
    #[arg(long, global = true)]
    pub no_dd_mode: Option<String>,
    /// Checkpoint directory or checkpoint.json to start from (eval requires one).
    #[arg(long, global = true, value_name = "PATH")]
    pub checkpoint: Option<PathBuf>,
    /// Meta-train from a fresh encoder instead of a pretrained one.
    #[arg(long, global = true)]
    pub from_scratch: bool,
    /// Evaluation worker threads (0 = one per core).
    #[arg(long, global = true, value_name = "N")]
    pub workers: Option<usize>,
}

impl Flags {
    pub fn resolve(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(o) = &self.out {
            cfg.out_dir = o.clone();
        }
        if let Some(h) = &self.head {
            cfg.head = h.parse::<HeadKind>()?;
        }
        if let Some(a) = &self.ablation {
            cfg.ablation = a.parse::<Ablation>()?;
        }
        if let Some(l) = &self.lambda {
            cfg.lambda = LambdaMode::parse(l)?;
        }
        if let Some(t) = self.trials {
            cfg.trials = t;
        }
        if let Some(i) = self.iters {
            cfg.iterations = i;
        }
        if let Some(i) = self.pretrain_iters {
            cfg.pretrain_iterations = i;
        }
        if let Some(k) = self.shots {
            cfg.shots = k;
            cfg.eval_shots = vec![k];
        }
        if let Some(n) = self.ways {
            cfg.ways = n;
        }
        if self.shared_bn_stats {
            cfg.shared_bn_stats = true;
        }
        if let Some(m) = &self.no_dd_mode {
            cfg.no_dd_mode = m.parse::<NoDdMode>()?;
        }
        if self.from_scratch {
            cfg.from_scratch = true;
        }
        if let Some(w) = self.workers {
            cfg.workers = w;
        }
        Ok(cfg)
    }
}

fn execute(cli: &Cli) -> Result<()> {
    let mut cfg = cli.flags.resolve()?;
    let out = cfg.out_dir.clone();
    match cli.command {
        Command::GenData => {
            let path = run::gen_data(&cfg, &out)?;
            println!("dataset written to {}", path.display());
        }
        Command::Gradcheck => {
            let report = run::gradcheck(cfg.seed, &out)?;
            for p in &report.paths {
                println!(
                    "{:<18} max_rel_error {:.3e} over {} coordinates {}",
                    p.path,
                    p.max_rel_error,
                    p.coordinates,
                    if p.passed { "ok" } else { "FAILED" }
                );
            }
            let failed: Vec<String> = report
                .failures()
                .iter()
                .map(|p| format!("{} ({:.3e})", p.path, p.max_rel_error))
                .collect();
            if !failed.is_empty() {
                bail!("gradient check failed for {}", failed.join(", "));
            }
        }
        Command::Pretrain => {
            let ds = run::prepare(&mut cfg)?;
            let (_, path) = run::pretrain(&cfg, &ds, &out)?;
            println!("checkpoint written to {}", path.display());
        }
        Command::MetaTrain => {
            let ds = run::prepare(&mut cfg)?;
            let start = run::starting_model(&cfg, &ds, cli.flags.checkpoint.as_deref(), &out)?;
            let (_, path) = run::meta_train(&cfg, &ds, &start, &out)?;
            println!("checkpoint written to {}", path.display());
        }
        Command::Eval => {
            let Some(ckpt) = cli.flags.checkpoint.as_deref() else {
                bail!("eval needs a trained model: pass --checkpoint PATH");
            };
            let ds = run::prepare(&mut cfg)?;
            let (model, _) = load_checkpoint(ckpt)?;
            for s in run::evaluate(&cfg, &ds, &model, &out)? {
                println!(
                    "{}\t{}-shot\t{:.2}% ± {:.2}%",
                    s.domain,
                    s.shots,
                    100.0 * s.mean,
                    100.0 * s.half_width
                );
            }
        }
        Command::Ablate => {
            let ds = run::prepare(&mut cfg)?;
            let start = run::starting_model(&cfg, &ds, cli.flags.checkpoint.as_deref(), &out)?;
            let table = run::ablate(&cfg, &ds, &start, &Ablation::ALL, &out)?;
            print!("{}", table.to_tsv());
            for r in &table.rows {
                if let Some(e) = &r.error {
                    eprintln!("{}: {e}", r.variant);
                }
            }
        }
    }
    Ok(())
}

/// Parses `argv` (including the program name) and runs the command.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e:#}");
            EXIT_RUNTIME
        }
    }
}
