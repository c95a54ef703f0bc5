//! Stage runners that persist their artifacts under an output directory.
//!
//! Layout of `out/`:
//!
//! ```text
//! config.json                  effective configuration
//! data/                        gen-data output (manifest.json + AFAT cells)
//! pretrain/                    checkpoint + metrics.jsonl
//! meta-<variant>/              checkpoint + metrics.jsonl
//! eval/<domain>-<k>shot.jsonl  one TrialRecord per line
//! eval/summary.json
//! ablation/table.tsv           rows = variants, columns = domain × shots
//! ablation/table.json
//! ablation/<variant>/          checkpoint + metrics.jsonl per variant
//! gradcheck.json
//! ```

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use afa_core::episodes::Dataset;
use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use crate::ablation::{eval_columns, run_ablation_suite, AblationTable};
use crate::config::{Ablation, ExperimentConfig};
use crate::eval::{run_eval, EvalSpec, TrialRecord, TrialStats};
use crate::gradcheck::{run_gradcheck, GradcheckReport, LossPath};
use crate::model::{load_checkpoint, save_checkpoint, Model, CHECKPOINT_MANIFEST};
use crate::train::{attach_adversary, fresh_encoder, run_meta_train, run_pretrain, Variant};

/// Line-per-record JSON writer. Records are only ever appended.
pub struct JsonlWriter {
    out: BufWriter<File>,
    path: PathBuf,
}

impl JsonlWriter {
    /// Starts a fresh file at `path`.
    pub fn create(path: &Path) -> Result<JsonlWriter> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        }
        let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
        Ok(JsonlWriter {
            out: BufWriter::new(file),
            path: path.to_path_buf(),
        })
    }

    pub fn append<T: Serialize>(&mut self, record: &T) -> Result<()> {
        serde_json::to_writer(&mut self.out, record)?;
        self.out.write_all(b"\n").with_context(|| format!("writing {}", self.path.display()))
    }

    pub fn finish(mut self) -> Result<()> {
        self.out.flush().with_context(|| format!("writing {}", self.path.display()))
    }
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut w = JsonlWriter::create(path)?;
    for r in records {
        w.append(r)?;
    }
    w.finish()
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, serde_json::to_string_pretty(value)? + "\n").with_context(|| format!("writing {}", path.display()))
}

/// Loads the dataset and fits the encoder input to it.
pub fn prepare(cfg: &mut ExperimentConfig) -> Result<Dataset> {
    cfg.validate()?;
    let ds = cfg.data.load()?;
    cfg.adapt_encoder(&ds);
    cfg.encoder.validate()?;
    cfg.domains(&ds)?;
    Ok(ds)
}

fn save_config(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    write_json(&out.join("config.json"), cfg)
}

pub fn gen_data(cfg: &ExperimentConfig, out: &Path) -> Result<PathBuf> {
    let ds = cfg.data.load()?;
    save_config(cfg, out)?;
    Ok(ds.save(&out.join("data"))?)
}

pub fn pretrain(cfg: &ExperimentConfig, ds: &Dataset, out: &Path) -> Result<(Model, PathBuf)> {
    let (model, log) = run_pretrain(cfg, ds)?;
    let dir = out.join("pretrain");
    let path = save_checkpoint(&dir, &model, "pretrain", &cfg.hash(), cfg.seed)?;
    write_jsonl(&dir.join("metrics.jsonl"), &log)?;
    save_config(cfg, out)?;
    Ok((model, path))
}

/// The encoder meta-training starts from: an explicit checkpoint, else
/// `out/pretrain`, else a pretraining run made now. `from_scratch` skips all
/// of these.
pub fn starting_model(
    cfg: &ExperimentConfig,
    ds: &Dataset,
    checkpoint: Option<&Path>,
    out: &Path,
) -> Result<Model> {
    if cfg.from_scratch {
        return Ok(Model {
            encoder: fresh_encoder(cfg)?,
            afa: None,
            discriminator: None,
            classifier: None,
        });
    }
    let existing = out.join("pretrain").join(CHECKPOINT_MANIFEST);
    let model = match checkpoint {
        Some(p) => load_checkpoint(p)?.0,
        None if existing.exists() => load_checkpoint(&existing)?.0,
        None => pretrain(cfg, ds, out)?.0,
    };
    if model.encoder.config != cfg.encoder {
        bail!("checkpoint encoder {:?} does not match the configured encoder {:?}", model.encoder.config, cfg.encoder);
    }
    Ok(model)
}

pub fn meta_train(cfg: &ExperimentConfig, ds: &Dataset, start: &Model, out: &Path) -> Result<(Model, PathBuf)> {
    let variant = Variant::from_ablation(cfg.ablation, cfg.no_dd_mode);
    let model = attach_adversary(start.encoder.clone(), variant, cfg.seed)?;
    let (model, log) = run_meta_train(cfg, ds, model, variant)?;
    let dir = out.join(format!("meta-{}", cfg.ablation));
    let path = save_checkpoint(&dir, &model, "meta-train", &cfg.hash(), cfg.seed)?;
    write_jsonl(&dir.join("metrics.jsonl"), &log)?;
    save_config(cfg, out)?;
    Ok((model, path))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub domain: String,
    pub shots: usize,
    pub trials: usize,
    pub mean: f64,
    pub std: f64,
    pub half_width: f64,
    pub file: String,
}

pub fn evaluate(cfg: &ExperimentConfig, ds: &Dataset, model: &Model, out: &Path) -> Result<Vec<EvalSummary>> {
    let dir = out.join("eval");
    let mut summary = Vec::new();
    for (domain, col) in eval_columns(cfg, ds)? {
        let stats = run_eval(
            model,
            ds,
            &EvalSpec {
                head: cfg.head,
                domain,
                pool: &ds.manifest.novel,
                ways: cfg.ways,
                shots: col.shots,
                queries: cfg.queries,
                trials: cfg.trials,
                seed: cfg.seed,
                afa_at_eval: cfg.afa_at_eval,
                workers: cfg.worker_count(),
            },
        )?;
        let file = format!("{}-{}shot.jsonl", col.domain, col.shots);
        let records: Vec<TrialRecord> = stats
            .accuracies
            .iter()
            .enumerate()
            .map(|(trial, &accuracy)| TrialRecord {
                trial,
                domain: col.domain.clone(),
                shots: col.shots,
                accuracy,
            })
            .collect();
        write_jsonl(&dir.join(&file), &records)?;
        summary.push(summary_of(&col.domain, col.shots, &stats, file));
    }
    write_json(&dir.join("summary.json"), &summary)?;
    Ok(summary)
}

fn summary_of(domain: &str, shots: usize, s: &TrialStats, file: String) -> EvalSummary {
    EvalSummary {
        domain: domain.to_string(),
        shots,
        trials: s.accuracies.len(),
        mean: s.mean,
        std: s.std,
        half_width: s.half_width,
        file,
    }
}

/// Pretrains once (or reuses `start`), then runs every variant in
/// `variants`. Writes `ablation/table.tsv`, `ablation/table.json` and one
/// checkpoint directory per variant.
pub fn ablate(
    cfg: &ExperimentConfig,
    ds: &Dataset,
    start: &Model,
    variants: &[Ablation],
    out: &Path,
) -> Result<AblationTable> {
    let dir = out.join("ablation");
    let hash = cfg.hash();
    let table = run_ablation_suite(cfg, ds, start, variants, &mut |run| {
        let vdir = dir.join(run.variant.name());
        save_checkpoint(&vdir, run.model, "meta-train", &hash, cfg.seed)?;
        write_jsonl(&vdir.join("metrics.jsonl"), run.log)
    })?;
    fs::write(dir.join("table.tsv"), table.to_tsv()).context("writing ablation table")?;
    write_json(&dir.join("table.json"), &table)?;
    save_config(cfg, out)?;
    Ok(table)
}

pub fn gradcheck(seed: u64, out: &Path) -> Result<GradcheckReport> {
    let report = run_gradcheck(seed, &LossPath::ALL, 20)?;
    write_json(&out.join("gradcheck.json"), &report)?;
    Ok(report)
}
