//! Finite-difference checks of every loss path on tiny random instances.

use afa_core::adversary::{combine, domain_loss, random_discriminator, total_gram_loss};
use afa_core::encoder::{forward_dual, init_afa, Encoder, EncoderConfig, ForwardOptions, Perturbation};
use afa_core::heads::{episode_loss, head_probabilities, EpisodeFeatures, HeadKind};
use afa_core::{CoreError, Parameters};
use afa_tensor::{grad_check, Rng, Stream, Tape, Tensor, TensorError, Var};
use anyhow::Result;
use serde::{Deserialize, Serialize};

pub const TOLERANCE: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossPath {
    ClassMatching,
    ClassProto,
    ClassTpn,
    Domain,
    Gram,
    Adversarial,
    Total,
    /// Negative control: features are detached before the head, so the
    /// analytic encoder gradient is wrong by construction.
    CorruptedDetach,
}

impl LossPath {
    pub const ALL: [LossPath; 7] = [
        LossPath::ClassMatching,
        LossPath::ClassProto,
        LossPath::ClassTpn,
        LossPath::Domain,
        LossPath::Gram,
        LossPath::Adversarial,
        LossPath::Total,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossPath::ClassMatching => "L_c(matching)",
            LossPath::ClassProto => "L_c(proto)",
            LossPath::ClassTpn => "L_c(tpn)",
            LossPath::Domain => "L_d",
            LossPath::Gram => "L_g",
            LossPath::Adversarial => "L_D = L_d - L_g",
            LossPath::Total => "L_c - L_D",
            LossPath::CorruptedDetach => "corrupted(detach)",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PathResult {
    pub path: String,
    pub instances: usize,
    pub coordinates: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub seed: u64,
    pub tolerance: f64,
    pub paths: Vec<PathResult>,
    pub passed: bool,
}

impl GradcheckReport {
    pub fn failures(&self) -> Vec<&PathResult> {
        self.paths.iter().filter(|p| !p.passed).collect()
    }
}

fn tiny_encoder() -> EncoderConfig {
    EncoderConfig {
        in_channels: 2,
        height: 4,
        width: 4,
        channels: vec![3, 3],
        pool: true,
    }
}

const WAYS: usize = 2;
const SHOTS: usize = 1;
const QUERIES: usize = 2;

struct Instance {
    encoder: Encoder,
    afa: Perturbation,
    params: Vec<Tensor>,
    n_enc: usize,
    n_afa: usize,
}

fn instance(rng: &mut Rng) -> Result<Instance> {
    let cfg = tiny_encoder();
    let mut encoder = Encoder::init(&cfg, rng)?;
    for b in &mut encoder.blocks {
        let c = b.bn_scale.len();
        b.bn_scale = Tensor::vector(rng.normals(c, 1.0, 0.3))?;
        b.bn_shift = Tensor::vector(rng.normals(b.bn_shift.len(), 0.0, 0.3))?;
    }
    let afa = Perturbation::Affine(init_afa(&cfg.channels, rng)?);
    let disc = random_discriminator(cfg.output_channels(), rng)?;
    let rows = WAYS * (SHOTS + QUERIES);
    let x = Tensor::new(&[rows, 2, 4, 4], rng.normals(rows * 32, 0.0, 1.0))?;
    let mut params: Vec<Tensor> = encoder.named().into_iter().map(|(_, t)| t.clone()).collect();
    let n_enc = params.len();
    params.extend(afa.named().into_iter().map(|(_, t)| t.clone()));
    let n_afa = params.len() - n_enc;
    params.extend(disc.named().into_iter().map(|(_, t)| t.clone()));
    params.push(x);
    Ok(Instance {
        encoder,
        afa,
        params,
        n_enc,
        n_afa,
    })
}

fn to_tensor_error(e: CoreError) -> TensorError {
    match e {
        CoreError::Tensor(t) => t,
        other => panic!("gradient check program is malformed: {other}"),
    }
}

fn program(path: LossPath, inst: &Instance, tape: &mut Tape, vars: &[Var]) -> afa_core::Result<Var> {
    let ev = &vars[..inst.n_enc];
    let av = &vars[inst.n_enc..inst.n_enc + inst.n_afa];
    let dv = &vars[inst.n_enc + inst.n_afa..vars.len() - 1];
    let x = vars[vars.len() - 1];
    let out = forward_dual(tape, &inst.encoder, ev, Some((&inst.afa, av)), x, ForwardOptions::train())?;
    let f_a = out.features.augmented.expect("train mode");
    let class_loss = |tape: &mut Tape, head: HeadKind, f: Var| -> afa_core::Result<Var> {
        let ns = WAYS * SHOTS;
        let support = tape.slice_rows(f, 0, ns)?;
        let query = tape.slice_rows(f, ns, WAYS * QUERIES)?;
        let support_labels: Vec<usize> = (0..WAYS).flat_map(|c| std::iter::repeat_n(c, SHOTS)).collect();
        let query_labels: Vec<usize> = (0..WAYS).flat_map(|c| std::iter::repeat_n(c, QUERIES)).collect();
        let p = head_probabilities(
            tape,
            head,
            &EpisodeFeatures {
                support,
                support_labels: &support_labels,
                query,
                ways: WAYS,
            },
        )?;
        episode_loss(tape, p, &query_labels)
    };
    // The median kernel width is a detached statistic; a fixed width keeps
    // the finite-difference program identical to the differentiated one.
    let tpn = HeadKind::Tpn {
        alpha: 0.99,
        sigma: Some(1.0),
    };
    match path {
        LossPath::ClassMatching => class_loss(tape, HeadKind::Matching, f_a),
        LossPath::ClassProto => class_loss(tape, HeadKind::Proto, f_a),
        LossPath::ClassTpn => class_loss(tape, tpn, f_a),
        LossPath::Domain => Ok(domain_loss(tape, out.features.original, f_a, dv)?.0),
        LossPath::Gram => Ok(total_gram_loss(tape, &out.features.sites)?.0),
        LossPath::Adversarial | LossPath::Total => {
            let (l_d, _) = domain_loss(tape, out.features.original, f_a, dv)?;
            let (l_g, _) = total_gram_loss(tape, &out.features.sites)?;
            let l_adv = combine(tape, Some(l_d), Some(l_g))?.expect("both terms");
            if path == LossPath::Adversarial {
                return Ok(l_adv);
            }
            let l_c = class_loss(tape, HeadKind::Matching, f_a)?;
            Ok(tape.sub(l_c, l_adv)?)
        }
        LossPath::CorruptedDetach => {
            let cut = tape.detach(f_a);
            let sq = tape.square(cut)?;
            let a = tape.add(sq, f_a)?;
            let l = class_loss(tape, HeadKind::Matching, a)?;
            let shifted = tape.scale(l, 1.0)?;
            Ok(shifted)
        }
    }
}

/// Checks one path on `instances` random tiny models.
pub fn check_path(path: LossPath, seed: u64, instances: usize, coords: usize) -> Result<PathResult> {
    let root = Rng::new(seed);
    let mut worst: f64 = 0.0;
    let mut total = 0;
    for i in 0..instances {
        let mut rng = root.substream(Stream::GradCheck, ((path as u64) << 32) | i as u64);
        let inst = instance(&mut rng)?;
        let report = grad_check(
            |tape: &mut Tape, vars: &[Var]| program(path, &inst, tape, vars).map_err(to_tensor_error),
            &inst.params,
            &mut rng,
            coords,
        )?;
        worst = worst.max(report.max_rel_error);
        total += report.coordinates;
    }
    Ok(PathResult {
        path: path.name().to_string(),
        instances,
        coordinates: total,
        max_rel_error: worst,
        passed: worst <= TOLERANCE,
    })
}

pub fn run_gradcheck(seed: u64, paths: &[LossPath], instances: usize) -> Result<GradcheckReport> {
    let results = paths
        .iter()
        .map(|&p| check_path(p, seed, instances, 200))
        .collect::<Result<Vec<_>>>()?;
    let passed = results.iter().all(|r| r.passed);
    Ok(GradcheckReport {
        seed,
        tolerance: TOLERANCE,
        paths: results,
        passed,
    })
}
