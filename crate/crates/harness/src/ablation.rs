//! Ablation suite: every variant meta-trained from one pretrained encoder and
//! evaluated on every target domain at every shot setting.

use std::fmt::Write as _;

use afa_core::episodes::Dataset;
use anyhow::Result;
use serde::{Deserialize, Serialize};

use crate::config::{Ablation, ExperimentConfig};
use crate::eval::{run_eval, EvalSpec, TrialStats};
use crate::model::Model;
use crate::train::{attach_adversary, run_meta_train, MetaRecord, Variant};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Column {
    pub domain: String,
    pub shots: usize,
}

impl Column {
    pub fn label(&self) -> String {
        format!("{}/{}-shot", self.domain, self.shots)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Ablation,
    /// One entry per column; empty when the variant failed.
    pub cells: Vec<TrialStats>,
    pub error: Option<String>,
}

impl AblationRow {
    pub fn mean(&self, column: usize) -> Option<f64> {
        self.cells.get(column).map(|s| s.mean)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub seed: u64,
    pub columns: Vec<Column>,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, variant: Ablation) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == variant)
    }

    pub fn column(&self, domain: &str, shots: usize) -> Option<usize> {
        self.columns.iter().position(|c| c.domain == domain && c.shots == shots)
    }

    /// Rows are variants, columns domain × shots; cells are
    /// `accuracy% ± half-width%`.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("variant");
        for c in &self.columns {
            out.push('\t');
            out.push_str(&c.label());
        }
        out.push('\n');
        for r in &self.rows {
            out.push_str(r.variant.name());
            for i in 0..self.columns.len() {
                match r.cells.get(i) {
                    Some(s) => write!(out, "\t{:.2}±{:.2}", 100.0 * s.mean, 100.0 * s.half_width).unwrap(),
                    None => out.push_str("\terror"),
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Per-variant artifacts handed to `on_variant` as each finishes.
pub struct VariantRun<'a> {
    pub variant: Ablation,
    pub model: &'a Model,
    pub log: &'a [MetaRecord],
}

pub fn eval_columns(cfg: &ExperimentConfig, ds: &Dataset) -> Result<Vec<(usize, Column)>> {
    let (_, targets) = cfg.domains(ds)?;
    let mut cols = Vec::new();
    for &d in &targets {
        for &shots in &cfg.eval_shots {
            cols.push((
                d,
                Column {
                    domain: ds.manifest.domains[d].name.clone(),
                    shots,
                },
            ));
        }
    }
    Ok(cols)
}

/// Evaluates `model` on every (target domain, shots) column.
pub fn evaluate_columns(cfg: &ExperimentConfig, ds: &Dataset, model: &Model) -> Result<Vec<TrialStats>> {
    eval_columns(cfg, ds)?
        .into_iter()
        .map(|(domain, col)| {
            run_eval(
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
            )
        })
        .collect()
}

fn run_variant(
    cfg: &ExperimentConfig,
    ds: &Dataset,
    pretrained: &Model,
    ablation: Ablation,
    on_variant: &mut dyn FnMut(VariantRun<'_>) -> Result<()>,
) -> Result<Vec<TrialStats>> {
    let variant = Variant::from_ablation(ablation, cfg.no_dd_mode);
    let model = attach_adversary(pretrained.encoder.clone(), variant, cfg.seed)?;
    let (model, log) = run_meta_train(cfg, ds, model, variant)?;
    on_variant(VariantRun {
        variant: ablation,
        model: &model,
        log: &log,
    })?;
    evaluate_columns(cfg, ds, &model)
}

/// Trains and evaluates `variants` from the same pretrained encoder. A failing
/// variant is recorded in its row and the remaining variants still run.
pub fn run_ablation_suite(
    cfg: &ExperimentConfig,
    ds: &Dataset,
    pretrained: &Model,
    variants: &[Ablation],
    on_variant: &mut dyn FnMut(VariantRun<'_>) -> Result<()>,
) -> Result<AblationTable> {
    let columns = eval_columns(cfg, ds)?.into_iter().map(|(_, c)| c).collect();
    let rows = variants
        .iter()
        .map(|&v| match run_variant(cfg, ds, pretrained, v, on_variant) {
            Ok(cells) => AblationRow {
                variant: v,
                cells,
                error: None,
            },
            Err(e) => AblationRow {
                variant: v,
                cells: Vec::new(),
                error: Some(format!("{e:#}")),
            },
        })
        .collect();
    Ok(AblationTable {
        seed: cfg.seed,
        columns,
        rows,
    })
}
