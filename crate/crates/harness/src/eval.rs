//! Multi-trial few-shot evaluation with 95% confidence half-widths.

use afa_core::encoder::{encode, encode_perturbed};
use afa_core::episodes::{sample_episode, Dataset};
use afa_core::heads::{episode_accuracy, head_probabilities, EpisodeFeatures, HeadKind};
use afa_core::Parameters;
use afa_tensor::{NormMode, Rng, Stream, Tape};
use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use crate::model::Model;

/// Per-trial accuracies with mean and 1.96·std/√T half-width (population
/// standard deviation).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialStats {
    pub accuracies: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    pub half_width: f64,
}

impl TrialStats {
    pub fn from_accuracies(accuracies: Vec<f64>) -> TrialStats {
        let t = accuracies.len() as f64;
        if accuracies.is_empty() {
            return TrialStats {
                accuracies,
                mean: 0.0,
                std: 0.0,
                half_width: 0.0,
            };
        }
        let mean = accuracies.iter().sum::<f64>() / t;
        let var = accuracies.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / t;
        let std = var.sqrt();
        TrialStats {
            mean,
            std,
            half_width: 1.96 * std / t.sqrt(),
            accuracies,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial: usize,
    pub domain: String,
    pub shots: usize,
    pub accuracy: f64,
}

/// What one evaluation covers.
#[derive(Clone, Debug)]
pub struct EvalSpec<'a> {
    pub head: HeadKind,
    pub domain: usize,
    pub pool: &'a [usize],
    pub ways: usize,
    pub shots: usize,
    pub queries: usize,
    pub trials: usize,
    pub seed: u64,
    pub afa_at_eval: bool,
    pub workers: usize,
}

fn trial_accuracy(model: &Model, ds: &Dataset, spec: &EvalSpec<'_>, trial: usize) -> Result<f64> {
    // Keyed on (domain, shots, trial): every variant sees the same episodes.
    let key = ((spec.domain as u64) << 48) ^ ((spec.shots as u64) << 32) ^ trial as u64;
    let mut rng = Rng::new(spec.seed).substream(Stream::Eval, key);
    let ep = sample_episode(ds, spec.pool, spec.domain, spec.ways, spec.shots, spec.queries, &mut rng)?;
    let mut tape = Tape::new();
    let ev = model.encoder.bind(&mut tape);
    let x = tape.constant(ep.all_images());
    let f = match (&model.afa, spec.afa_at_eval) {
        (Some(p), true) => {
            let av = p.bind(&mut tape);
            encode_perturbed(&mut tape, &model.encoder, &ev, (p, &av), x)?
        }
        _ => encode(&mut tape, &model.encoder, &ev, x, NormMode::Eval)?.0,
    };
    let ns = ep.support_labels.len();
    let support = tape.slice_rows(f, 0, ns)?;
    let query = tape.slice_rows(f, ns, ep.query_labels.len())?;
    let probs = head_probabilities(
        &mut tape,
        spec.head,
        &EpisodeFeatures {
            support,
            support_labels: &ep.support_labels,
            query,
            ways: ep.ways,
        },
    )?;
    Ok(episode_accuracy(tape.value(probs), &ep.query_labels))
}

/// Evaluates `spec.trials` independent episodes. Trials are spread over
/// worker threads and merged by index, so the result does not depend on the
/// worker count.
pub fn run_eval(model: &Model, ds: &Dataset, spec: &EvalSpec<'_>) -> Result<TrialStats> {
    let workers = spec.workers.clamp(1, spec.trials.max(1));
    let mut acc = vec![0.0; spec.trials];
    if workers == 1 {
        for (t, slot) in acc.iter_mut().enumerate() {
            *slot = trial_accuracy(model, ds, spec, t)?;
        }
    } else {
        let chunk = spec.trials.div_ceil(workers);
        std::thread::scope(|s| -> Result<()> {
            let handles: Vec<_> = acc
                .chunks_mut(chunk)
                .enumerate()
                .map(|(w, out)| {
                    s.spawn(move || -> Result<()> {
                        for (i, slot) in out.iter_mut().enumerate() {
                            *slot = trial_accuracy(model, ds, spec, w * chunk + i)?;
                        }
                        Ok(())
                    })
                })
                .collect();
            for h in handles {
                h.join().map_err(|_| anyhow::anyhow!("evaluation worker panicked"))??;
            }
            Ok(())
        })
        .context("evaluation")?;
    }
    Ok(TrialStats::from_accuracies(acc))
}

/// Recomputes stats from per-trial JSONL lines.
pub fn stats_from_jsonl(text: &str) -> Result<TrialStats> {
    let acc = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str::<TrialRecord>(l)?.accuracy))
        .collect::<Result<Vec<f64>>>()?;
    Ok(TrialStats::from_accuracies(acc))
}
