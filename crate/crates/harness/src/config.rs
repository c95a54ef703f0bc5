use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use afa_core::adversary::LambdaMode;
use afa_core::encoder::EncoderConfig;
use afa_core::episodes::{ingest_csv, CsvSchema, Dataset, GeneratorSpec};
use afa_core::heads::HeadKind;
use afa_core::{episodes, CoreError};
use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    None,
    NoDd,
    NoLg,
    Nonlinear,
    NoAfa,
}

impl Ablation {
    pub const ALL: [Ablation; 5] = [
        Ablation::None,
        Ablation::NoDd,
        Ablation::NoLg,
        Ablation::Nonlinear,
        Ablation::NoAfa,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::None => "none",
            Ablation::NoDd => "no_dd",
            Ablation::NoLg => "no_lg",
            Ablation::Nonlinear => "nonlinear",
            Ablation::NoAfa => "no_afa",
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Ablation {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .with_context(|| format!("unknown ablation {s:?} (expected none, no_dd, no_lg, nonlinear or no_afa)"))
    }
}

/// How the no-discriminator variant trains the perturbation parameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoDdMode {
    /// θ_a ascends the gram loss only.
    Lg,
    /// θ_a additionally descends the classification loss.
    Lc,
}

impl FromStr for NoDdMode {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lg" => Ok(NoDdMode::Lg),
            "lc" => Ok(NoDdMode::Lc),
            other => bail!("unknown no-dd mode {other:?} (expected lg or lc)"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSource {
    Synthetic(GeneratorSpec),
    Manifest { path: PathBuf },
    Csv {
        path: PathBuf,
        #[serde(default = "default_label")]
        label: String,
        #[serde(default = "default_domain_col")]
        domain: String,
        #[serde(default)]
        n_base: Option<usize>,
    },
}

fn default_label() -> String {
    "label".into()
}

fn default_domain_col() -> String {
    "domain".into()
}

impl DataSource {
    pub fn load(&self) -> Result<Dataset> {
        Ok(match self {
            DataSource::Synthetic(spec) => episodes::gen_synthetic(spec)?,
            DataSource::Manifest { path } => Dataset::load(path)?,
            DataSource::Csv {
                path,
                label,
                domain,
                n_base,
            } => ingest_csv(
                path,
                &CsvSchema {
                    label: label.clone(),
                    domain: domain.clone(),
                    features: None,
                    n_base: *n_base,
                },
            )?,
        })
    }
}

/// Every knob of a run. Serialized as JSON; CLI flags override fields.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub data: DataSource,
    pub source_domain: String,
    /// Evaluation domains; empty means every domain except the source.
    pub target_domains: Vec<String>,
    pub encoder: EncoderConfig,
    pub head: HeadKind,
    pub ways: usize,
    pub shots: usize,
    pub queries: usize,
    /// Shot settings evaluated by `eval` and `ablate`.
    pub eval_shots: Vec<usize>,
    pub pretrain_iterations: usize,
    pub pretrain_batch: usize,
    pub iterations: usize,
    pub lr: f64,
    pub lambda: LambdaMode,
    pub ablation: Ablation,
    pub no_dd_mode: NoDdMode,
    pub shared_bn_stats: bool,
    /// Apply the perturbation at evaluation time as well.
    pub afa_at_eval: bool,
    pub from_scratch: bool,
    pub trials: usize,
    /// Held-out discriminator accuracy is measured every this many iterations.
    pub probe_every: usize,
    pub workers: usize,
    pub seed: u64,
    pub out_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            data: DataSource::Synthetic(GeneratorSpec::default_benchmark(0)),
            source_domain: "source".into(),
            target_domains: Vec::new(),
            encoder: EncoderConfig::default(),
            head: HeadKind::Matching,
            ways: 5,
            shots: 5,
            queries: 16,
            eval_shots: vec![1, 5],
            pretrain_iterations: 500,
            pretrain_batch: 64,
            iterations: 2000,
            lr: 1e-3,
            lambda: LambdaMode::Dann,
            ablation: Ablation::None,
            no_dd_mode: NoDdMode::Lg,
            shared_bn_stats: false,
            afa_at_eval: false,
            from_scratch: false,
            trials: 200,
            probe_every: 100,
            workers: 0,
            seed: 0,
            out_dir: PathBuf::from("runs"),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<ExperimentConfig> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let cfg: ExperimentConfig =
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations < 1 {
            bail!("iterations must be at least 1");
        }
        if self.trials < 2 {
            bail!("trials must be at least 2");
        }
        if self.ways < 2 || self.shots < 1 || self.queries < 1 {
            bail!("episodes need ways ≥ 2, shots ≥ 1 and queries ≥ 1");
        }
        if self.eval_shots.is_empty() || self.eval_shots.contains(&0) {
            bail!("eval_shots must list positive shot counts");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            bail!("learning rate must be positive");
        }
        if self.pretrain_batch == 0 {
            bail!("pretrain batch must be positive");
        }
        self.encoder.validate()?;
        self.head.validate()?;
        Ok(())
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Source and target domain indices, validated against the dataset.
    pub fn domains(&self, ds: &Dataset) -> Result<(usize, Vec<usize>)> {
        let source = ds.manifest.domain_index(&self.source_domain)?;
        let targets = if self.target_domains.is_empty() {
            (0..ds.manifest.domains.len()).filter(|&d| d != source).collect()
        } else {
            self.target_domains
                .iter()
                .map(|n| ds.manifest.domain_index(n))
                .collect::<std::result::Result<_, CoreError>>()?
        };
        Ok((source, targets))
    }

    /// Fits the encoder's input extents to the dataset's sample shape.
    pub fn adapt_encoder(&mut self, ds: &Dataset) {
        let [c, h, w] = ds.manifest.image_shape;
        self.encoder.in_channels = c;
        self.encoder.height = h;
        self.encoder.width = w;
        if h == 1 || w == 1 {
            self.encoder.pool = false;
        }
    }

    pub fn worker_count(&self) -> usize {
        if self.workers > 0 {
            self.workers
        } else {
            std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
        }
    }
}
