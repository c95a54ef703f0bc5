//! Base-class pretraining and adversarial meta-training.

use afa_core::adversary::{
    adversarial_step, combine, domain_loss, lambda_schedule, total_gram_loss, DomainDiscriminator,
    EpisodeLosses, Group, GroupVars, Groups, LossReport, Objective, RoutedGradients,
};
use afa_core::encoder::{
    forward_dual, init_afa, init_conv_perturbation, pretrain_forward, Encoder, ForwardOptions,
    LinearClassifier, Perturbation,
};
use afa_core::episodes::{sample_batch, sample_episode, Dataset, Episode};
use afa_core::heads::{episode_accuracy, episode_loss, head_probabilities, EpisodeFeatures, HeadKind};
use afa_core::params::{adam_step, gradients_for, new_adam};
use afa_core::{CoreError, Parameters};
use afa_tensor::{AdamConfig, NormMode, Rng, Stream, Tape, TensorError};
use anyhow::Result;
use serde::{Deserialize, Serialize};

use crate::config::{Ablation, ExperimentConfig, NoDdMode};
use crate::model::{AfaKind, Model};

const PRETRAIN_STREAM: Stream = Stream::Custom(1);
const PROBE_STREAM: Stream = Stream::Custom(2);

/// What a meta-training run allocates and optimizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Variant {
    pub afa: Option<AfaKind>,
    pub objective: Objective,
}

impl Variant {
    pub fn from_ablation(ablation: Ablation, no_dd_mode: NoDdMode) -> Variant {
        let full = Objective::default();
        match ablation {
            Ablation::None => Variant {
                afa: Some(AfaKind::Affine),
                objective: full,
            },
            Ablation::NoDd => Variant {
                afa: Some(AfaKind::Affine),
                objective: Objective {
                    use_ld: false,
                    route_lc_into_afa: no_dd_mode == NoDdMode::Lc,
                    ..full
                },
            },
            Ablation::NoLg => Variant {
                afa: Some(AfaKind::Affine),
                objective: Objective {
                    use_lg: false,
                    ..full
                },
            },
            Ablation::Nonlinear => Variant {
                afa: Some(AfaKind::Conv),
                objective: full,
            },
            Ablation::NoAfa => Variant {
                afa: None,
                objective: Objective {
                    use_ld: false,
                    use_lg: false,
                    route_lc_into_afa: false,
                },
            },
        }
    }

    pub fn has_discriminator(&self) -> bool {
        self.afa.is_some() && self.objective.use_ld
    }
}

fn non_finite(iteration: usize, e: CoreError) -> anyhow::Error {
    match e {
        CoreError::Tensor(TensorError::NonFinite { .. }) => CoreError::NonFiniteLoss {
            iteration,
            message: e.to_string(),
        }
        .into(),
        other => other.into(),
    }
}

fn afa_sites(encoder: &Encoder) -> Vec<usize> {
    encoder.config.channels.clone()
}

/// Fresh perturbation and discriminator for `variant` on top of `encoder`.
pub fn attach_adversary(encoder: Encoder, variant: Variant, seed: u64) -> Result<Model> {
    let root = Rng::new(seed);
    let sites = afa_sites(&encoder);
    let afa = match variant.afa {
        None => None,
        Some(AfaKind::Affine) => Some(Perturbation::Affine(init_afa(&sites, &mut root.substream(Stream::Init, 2))?)),
        Some(AfaKind::Conv) => Some(Perturbation::Conv(init_conv_perturbation(
            &sites,
            &mut root.substream(Stream::Init, 2),
        )?)),
    };
    let discriminator = if variant.has_discriminator() {
        Some(DomainDiscriminator::zeros(encoder.config.output_channels())?)
    } else {
        None
    };
    Ok(Model {
        encoder,
        afa,
        discriminator,
        classifier: None,
    })
}

pub fn fresh_encoder(cfg: &ExperimentConfig) -> Result<Encoder> {
    Ok(Encoder::init(&cfg.encoder, &mut Rng::new(cfg.seed).substream(Stream::Init, 0))?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainRecord {
    pub iter: usize,
    pub loss: f64,
    pub accuracy: f64,
}

/// Encoder + linear classifier on base classes of the source domain.
pub fn run_pretrain(cfg: &ExperimentConfig, ds: &Dataset) -> Result<(Model, Vec<PretrainRecord>)> {
    let (source, _) = cfg.domains(ds)?;
    let base = ds.manifest.base.clone();
    if base.is_empty() {
        anyhow::bail!("no base classes to pretrain on");
    }
    let root = Rng::new(cfg.seed);
    let mut encoder = fresh_encoder(cfg)?;
    let mut classifier = LinearClassifier::init(
        cfg.encoder.output_channels(),
        base.len(),
        &mut root.substream(Stream::Init, 1),
    )?;
    let adam = AdamConfig::with_lr(cfg.lr);
    let mut enc_opt = new_adam(&encoder, adam);
    let mut cls_opt = new_adam(&classifier, adam);
    let mut log = Vec::with_capacity(cfg.pretrain_iterations);
    for it in 0..cfg.pretrain_iterations {
        let mut rng = root.substream(PRETRAIN_STREAM, it as u64);
        let (x, labels) = sample_batch(ds, &base, source, cfg.pretrain_batch, &mut rng)?;
        let mut tape = Tape::new();
        let ev = encoder.bind(&mut tape);
        let cv = classifier.bind(&mut tape);
        let xv = tape.constant(x);
        let step = (|| -> afa_core::Result<_> {
            let (logits, stats) = pretrain_forward(&mut tape, &encoder, &ev, &cv, xv, NormMode::Train)?;
            let loss = tape.softmax_cross_entropy(logits, &labels)?;
            Ok((logits, stats, loss))
        })();
        let (logits, stats, loss) = step.map_err(|e| non_finite(it, e))?;
        let grads = tape.backward(loss).map_err(|e| non_finite(it, e.into()))?;
        adam_step(&mut encoder, &mut enc_opt, &gradients_for(&grads, &ev))?;
        adam_step(&mut classifier, &mut cls_opt, &gradients_for(&grads, &cv))?;
        encoder.update_running(&stats);
        log.push(PretrainRecord {
            iter: it,
            loss: tape.value(loss).item()?,
            accuracy: episode_accuracy(tape.value(logits), &labels),
        });
    }
    let mut model = Model {
        encoder,
        afa: None,
        discriminator: None,
        classifier: Some(classifier),
    };
    model.round_to_f32();
    Ok((model, log))
}

/// Forward pass and losses of one training episode.
pub struct EpisodeGraph {
    pub tape: Tape,
    pub encoder_vars: Vec<afa_tensor::Var>,
    pub afa_vars: Vec<afa_tensor::Var>,
    pub discriminator_vars: Vec<afa_tensor::Var>,
    pub losses: EpisodeLosses,
    pub report: LossReport,
    pub batch_stats: Vec<afa_tensor::BatchStats>,
    pub accuracy: f64,
}

/// Builds the two-stream graph for `episode`: `L_c` from the augmented
/// features through the head, `L_d` on pooled features of all rows, `L_g`
/// across sites.
pub fn episode_graph(
    model: &Model,
    head: HeadKind,
    objective: Objective,
    shared_bn_stats: bool,
    episode: &Episode,
    lambda: f64,
) -> afa_core::Result<EpisodeGraph> {
    let mut tape = Tape::new();
    let ev = model.encoder.bind(&mut tape);
    let av = model.afa.as_ref().map(|p| p.bind(&mut tape)).unwrap_or_default();
    let dv = model
        .discriminator
        .as_ref()
        .map(|d| d.bind(&mut tape))
        .unwrap_or_default();
    let x = tape.constant(episode.all_images());
    let out = forward_dual(
        &mut tape,
        &model.encoder,
        &ev,
        model.afa.as_ref().map(|p| (p, av.as_slice())),
        x,
        ForwardOptions {
            mode: NormMode::Train,
            shared_bn_stats,
        },
    )?;
    let f = out.features.augmented.unwrap_or(out.features.original);
    let ns = episode.support_labels.len();
    let nq = episode.query_labels.len();
    let support = tape.slice_rows(f, 0, ns)?;
    let query = tape.slice_rows(f, ns, nq)?;
    let probs = head_probabilities(
        &mut tape,
        head,
        &EpisodeFeatures {
            support,
            support_labels: &episode.support_labels,
            query,
            ways: episode.ways,
        },
    )?;
    let accuracy = episode_accuracy(tape.value(probs), &episode.query_labels);
    let l_c = episode_loss(&mut tape, probs, &episode.query_labels)?;

    let mut l_d = None;
    let mut l_g = None;
    let mut acc_domain = None;
    let mut site_gram = Vec::new();
    if let Some(f_a) = out.features.augmented {
        if objective.use_ld && !dv.is_empty() {
            let (l, acc) = domain_loss(&mut tape, out.features.original, f_a, &dv)?;
            l_d = Some(l);
            acc_domain = Some(acc);
        }
        if objective.use_lg {
            let (l, per) = total_gram_loss(&mut tape, &out.features.sites)?;
            l_g = Some(l);
            site_gram = per;
        }
    }
    let l_adv = combine(&mut tape, l_d, l_g)?;
    let value = |v: Option<afa_tensor::Var>| v.map_or(0.0, |v| tape.value(v).item().unwrap_or(f64::NAN));
    let report = LossReport {
        iter: 0,
        l_c: value(Some(l_c)),
        l_d: value(l_d),
        l_g: value(l_g),
        l_total: value(l_adv),
        lambda,
        acc_domain,
        site_gram,
    };
    Ok(EpisodeGraph {
        tape,
        encoder_vars: ev,
        afa_vars: av,
        discriminator_vars: dv,
        losses: EpisodeLosses {
            l_c: Some(l_c),
            l_adv,
        },
        report,
        batch_stats: out.batch_stats,
        accuracy,
    })
}

/// Optimizer state of a meta-training run.
pub struct MetaOptimizers {
    pub encoder: afa_tensor::AdamState,
    pub afa: Option<afa_tensor::AdamState>,
    pub discriminator: Option<afa_tensor::AdamState>,
}

impl MetaOptimizers {
    pub fn new(model: &Model, lr: f64) -> MetaOptimizers {
        let cfg = AdamConfig::with_lr(lr);
        MetaOptimizers {
            encoder: new_adam(&model.encoder, cfg),
            afa: model.afa.as_ref().map(|p| new_adam(p, cfg)),
            discriminator: model.discriminator.as_ref().map(|d| new_adam(d, cfg)),
        }
    }
}

/// Which groups a step may move.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Frozen {
    pub encoder: bool,
    pub afa: bool,
    pub discriminator: bool,
}

/// Routes and applies one adversarial update for a built graph.
pub fn apply_step(
    model: &mut Model,
    opt: &mut MetaOptimizers,
    graph: &EpisodeGraph,
    objective: Objective,
    frozen: Frozen,
) -> afa_core::Result<RoutedGradients> {
    let Model {
        encoder,
        afa,
        discriminator,
        ..
    } = model;
    let mut groups = Groups {
        encoder: Group {
            params: encoder,
            optimizer: &mut opt.encoder,
            frozen: frozen.encoder,
        },
        afa: match (afa.as_mut(), opt.afa.as_mut()) {
            (Some(p), Some(o)) => Some(Group {
                params: p,
                optimizer: o,
                frozen: frozen.afa,
            }),
            _ => None,
        },
        discriminator: match (discriminator.as_mut(), opt.discriminator.as_mut()) {
            (Some(p), Some(o)) => Some(Group {
                params: p,
                optimizer: o,
                frozen: frozen.discriminator,
            }),
            _ => None,
        },
        classifier: None,
    };
    adversarial_step(
        &graph.tape,
        graph.losses,
        GroupVars {
            encoder: &graph.encoder_vars,
            afa: &graph.afa_vars,
            discriminator: &graph.discriminator_vars,
            classifier: &[],
        },
        graph.report.lambda,
        objective,
        &mut groups,
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetaRecord {
    #[serde(flatten)]
    pub loss: LossReport,
    pub acc_query: f64,
    /// Discriminator accuracy on a held-out original/augmented batch.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub probe_acc_domain: Option<f64>,
}

/// Meta-training on source-domain base-class episodes.
pub fn run_meta_train(
    cfg: &ExperimentConfig,
    ds: &Dataset,
    mut model: Model,
    variant: Variant,
) -> Result<(Model, Vec<MetaRecord>)> {
    let (source, _) = cfg.domains(ds)?;
    let base = ds.manifest.base.clone();
    let root = Rng::new(cfg.seed);
    let mut opt = MetaOptimizers::new(&model, cfg.lr);
    let mut log = Vec::with_capacity(cfg.iterations);
    let denom = (cfg.iterations.max(2) - 1) as f64;
    for it in 0..cfg.iterations {
        let lambda = lambda_schedule(it as f64 / denom, cfg.lambda);
        let mut rng = root.substream(Stream::Episodes, it as u64);
        let episode = sample_episode(ds, &base, source, cfg.ways, cfg.shots, cfg.queries, &mut rng)?;
        let graph = episode_graph(&model, cfg.head, variant.objective, cfg.shared_bn_stats, &episode, lambda)
            .map_err(|e| non_finite(it, e))?;
        let mut report = graph.report.clone();
        report.iter = it;
        apply_step(&mut model, &mut opt, &graph, variant.objective, Frozen::default())
            .map_err(|e| non_finite(it, e))?;
        model.encoder.update_running(&graph.batch_stats);
        let probe = if variant.has_discriminator() && cfg.probe_every > 0 && (it + 1) % cfg.probe_every == 0 {
            let mut prng = root.substream(PROBE_STREAM, it as u64);
            let ep = sample_episode(ds, &base, source, cfg.ways, cfg.shots, cfg.queries, &mut prng)?;
            let g = episode_graph(&model, cfg.head, variant.objective, cfg.shared_bn_stats, &ep, lambda)
                .map_err(|e| non_finite(it, e))?;
            g.report.acc_domain
        } else {
            None
        };
        log.push(MetaRecord {
            loss: report,
            acc_query: graph.accuracy,
            probe_acc_domain: probe,
        });
    }
    model.round_to_f32();
    Ok((model, log))
}
