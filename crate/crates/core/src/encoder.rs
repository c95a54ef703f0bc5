//! Feature encoder with adversarial feature augmentation (AFA) sites.
//!
//! Each block is `conv3×3 → batch norm (+ learned affine) → [AFA] → ReLU →
//! 2×2 mean pool`. The AFA site sits right after the normalization layer.
//! Training runs two weight-sharing streams: the original stream skips the
//! AFA sites, the augmented stream applies the per-channel perturbation
//! `m^a = γ ⊙ m^o + β` at every site.

use afa_tensor::{softplus, BatchNormState, BatchStats, NormMode, Rng, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::params::Parameters;

/// Standard deviation of the initial AFA scale draw, `softplus(0.5)`.
pub fn gamma_init_std() -> f64 {
    softplus(0.5)
}

/// Standard deviation of the initial AFA bias draw, `softplus(0.3)`.
pub fn beta_init_std() -> f64 {
    softplus(0.3)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    /// Output channels of each block.
    pub channels: Vec<usize>,
    /// 2×2 mean pooling after every block.
    #[serde(default = "default_pool")]
    pub pool: bool,
}

fn default_pool() -> bool {
    true
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            in_channels: 3,
            height: 16,
            width: 16,
            channels: vec![8, 16, 32, 32],
            pool: true,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() {
            return Err(CoreError::config("encoder needs at least one block"));
        }
        if self.in_channels == 0 || self.height == 0 || self.width == 0 {
            return Err(CoreError::config("encoder input extents must be positive"));
        }
        if self.channels.contains(&0) {
            return Err(CoreError::config("block channel counts must be positive"));
        }
        if self.pool {
            let (mut h, mut w) = (self.height, self.width);
            for i in 0..self.channels.len() {
                if h < 2 || w < 2 {
                    return Err(CoreError::config(format!(
                        "spatial extent {h}×{w} too small to pool after block {i}"
                    )));
                }
                h /= 2;
                w /= 2;
            }
        }
        Ok(())
    }

    pub fn output_channels(&self) -> usize {
        *self.channels.last().expect("validated config")
    }

    /// `(C, H, W)` of the feature map at every AFA site.
    pub fn site_shapes(&self) -> Vec<(usize, usize, usize)> {
        let (mut h, mut w) = (self.height, self.width);
        self.channels
            .iter()
            .map(|&c| {
                let s = (c, h, w);
                if self.pool {
                    h /= 2;
                    w /= 2;
                }
                s
            })
            .collect()
    }

    /// Closed-form parameter count: Σ (9·Cin·Cout + 2·Cout).
    pub fn parameter_count(&self) -> usize {
        let mut cin = self.in_channels;
        let mut total = 0;
        for &c in &self.channels {
            total += 9 * cin * c + 2 * c;
            cin = c;
        }
        total
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvBlock {
    pub weight: Tensor,
    pub bn_scale: Tensor,
    pub bn_shift: Tensor,
    pub norm: BatchNormState,
}

/// The feature encoder `E` (parameters θ_e plus batch-norm running stats).
#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub blocks: Vec<ConvBlock>,
}

impl Encoder {
    /// He-normal conv weights (std √(2/fan_in)); BN scale 1, shift 0.
    pub fn init(config: &EncoderConfig, rng: &mut Rng) -> Result<Encoder> {
        config.validate()?;
        let mut cin = config.in_channels;
        let mut blocks = Vec::with_capacity(config.channels.len());
        for &c in &config.channels {
            let fan_in = cin * 9;
            let std = (2.0 / fan_in as f64).sqrt();
            blocks.push(ConvBlock {
                weight: Tensor::new(&[c, cin, 3, 3], rng.normals(c * fan_in, 0.0, std))?,
                bn_scale: Tensor::ones(&[c])?,
                bn_shift: Tensor::zeros(&[c])?,
                norm: BatchNormState::new(c),
            });
            cin = c;
        }
        Ok(Encoder {
            config: config.clone(),
            blocks,
        })
    }

    pub fn update_running(&mut self, stats: &[BatchStats]) {
        for (block, s) in self.blocks.iter_mut().zip(stats) {
            block.norm.update(s);
        }
    }

    /// Running statistics as named tensors (not trainable).
    pub fn buffers(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((
                format!("encoder.block{i}.running_mean"),
                Tensor::vector(b.norm.running_mean.clone()).expect("channels > 0"),
            ));
            out.push((
                format!("encoder.block{i}.running_var"),
                Tensor::vector(b.norm.running_var.clone()).expect("channels > 0"),
            ));
        }
        out
    }

    pub fn load_buffers(&mut self, lookup: &dyn Fn(&str) -> Option<Tensor>) -> Result<()> {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            for (suffix, slot) in [
                ("running_mean", &mut b.norm.running_mean),
                ("running_var", &mut b.norm.running_var),
            ] {
                let name = format!("encoder.block{i}.{suffix}");
                let t = lookup(&name)
                    .ok_or_else(|| CoreError::config(format!("missing buffer {name}")))?;
                if t.len() != slot.len() {
                    return Err(CoreError::config(format!("buffer {name} has wrong length")));
                }
                *slot = t.into_data();
            }
        }
        Ok(())
    }
}

impl Parameters for Encoder {
    fn named(&self) -> Vec<(String, &Tensor)> {
        self.blocks
            .iter()
            .enumerate()
            .flat_map(|(i, b)| {
                [
                    (format!("encoder.block{i}.conv"), &b.weight),
                    (format!("encoder.block{i}.bn_scale"), &b.bn_scale),
                    (format!("encoder.block{i}.bn_shift"), &b.bn_shift),
                ]
            })
            .collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.blocks
            .iter_mut()
            .flat_map(|b| [&mut b.weight, &mut b.bn_scale, &mut b.bn_shift])
            .collect()
    }
}

/// Per-channel perturbation parameters of one AFA site (θ_a).
#[derive(Clone, Debug, PartialEq)]
pub struct AfaLayer {
    pub gamma: Tensor,
    pub beta: Tensor,
}

impl AfaLayer {
    pub fn identity(channels: usize) -> Result<AfaLayer> {
        Ok(AfaLayer {
            gamma: Tensor::ones(&[channels])?,
            beta: Tensor::zeros(&[channels])?,
        })
    }
}

/// γ ~ N(1, softplus(0.5)), β ~ N(0, softplus(0.3)), one layer per site.
///
/// The softplus values are used as standard deviations.
pub fn init_afa(site_channels: &[usize], rng: &mut Rng) -> Result<Vec<AfaLayer>> {
    site_channels
        .iter()
        .map(|&c| {
            Ok(AfaLayer {
                gamma: Tensor::vector(rng.normals(c, 1.0, gamma_init_std()))?,
                beta: Tensor::vector(rng.normals(c, 0.0, beta_init_std()))?,
            })
        })
        .collect()
}

/// Depth-preserving 3×3 kernels for the non-linear ablation: a scaled delta
/// on the channel diagonal (scale drawn like γ) plus small off-centre noise.
pub fn init_conv_perturbation(site_channels: &[usize], rng: &mut Rng) -> Result<Vec<Tensor>> {
    site_channels
        .iter()
        .map(|&c| {
            let mut data = rng.normals(c * c * 9, 0.0, 0.01);
            for ch in 0..c {
                data[(ch * c + ch) * 9 + 4] = rng.normal(1.0, gamma_init_std());
            }
            Ok(Tensor::new(&[c, c, 3, 3], data)?)
        })
        .collect()
}

/// The AFA module: linear per-channel perturbation, or a convolution in
/// its place for the non-linear ablation.
#[derive(Clone, Debug, PartialEq)]
pub enum Perturbation {
    Affine(Vec<AfaLayer>),
    Conv(Vec<Tensor>),
}

impl Perturbation {
    pub fn sites(&self) -> usize {
        match self {
            Perturbation::Affine(l) => l.len(),
            Perturbation::Conv(k) => k.len(),
        }
    }

    pub fn identity(site_channels: &[usize]) -> Result<Perturbation> {
        Ok(Perturbation::Affine(
            site_channels
                .iter()
                .map(|&c| AfaLayer::identity(c))
                .collect::<Result<_>>()?,
        ))
    }
}

impl Parameters for Perturbation {
    fn named(&self) -> Vec<(String, &Tensor)> {
        match self {
            Perturbation::Affine(layers) => layers
                .iter()
                .enumerate()
                .flat_map(|(i, l)| {
                    [
                        (format!("afa.site{i}.gamma"), &l.gamma),
                        (format!("afa.site{i}.beta"), &l.beta),
                    ]
                })
                .collect(),
            Perturbation::Conv(kernels) => kernels
                .iter()
                .enumerate()
                .map(|(i, k)| (format!("afa.site{i}.kernel"), k))
                .collect(),
        }
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            Perturbation::Affine(layers) => layers
                .iter_mut()
                .flat_map(|l| [&mut l.gamma, &mut l.beta])
                .collect(),
            Perturbation::Conv(kernels) => kernels.iter_mut().collect(),
        }
    }
}

/// `m^a[c,h,w] = γ[c] · m^o[c,h,w] + β[c]`.
pub fn afa_apply(tape: &mut Tape, m: Var, gamma: Var, beta: Var) -> Result<Var> {
    let c = match tape.shape(m) {
        [_, c, ..] => *c,
        s => return Err(CoreError::config(format!("afa_apply: bad feature shape {s:?}"))),
    };
    if tape.value(gamma).len() != c || tape.value(beta).len() != c {
        return Err(CoreError::config(format!(
            "afa_apply: {} channels but γ/β of length {}/{}",
            c,
            tape.value(gamma).len(),
            tape.value(beta).len()
        )));
    }
    Ok(tape.channel_affine(m, gamma, beta)?)
}

pub fn afa_apply_nonlinear(tape: &mut Tape, m: Var, kernel: Var) -> Result<Var> {
    Ok(tape.conv2d(m, kernel)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ForwardOptions {
    pub mode: NormMode,
    /// Normalize the augmented stream with the original stream's batch
    /// statistics instead of its own.
    pub shared_bn_stats: bool,
}

impl ForwardOptions {
    pub fn train() -> Self {
        ForwardOptions {
            mode: NormMode::Train,
            shared_bn_stats: false,
        }
    }

    pub fn eval() -> Self {
        ForwardOptions {
            mode: NormMode::Eval,
            shared_bn_stats: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SitePair {
    /// Batch-norm output of the original stream.
    pub original: Var,
    /// AFA output of the augmented stream.
    pub augmented: Var,
}

/// Output of the two-stream encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct DualFeatures {
    pub sites: Vec<SitePair>,
    /// Pooled original features F_o (`N×C_out`).
    pub original: Var,
    /// Pooled augmented features F_a; absent in eval mode or without AFA.
    pub augmented: Option<Var>,
}

/// Output of [`forward_dual`]: features plus the original stream's batch
/// statistics (train mode), to be folded into the running averages.
pub struct ForwardOutput {
    pub features: DualFeatures,
    pub batch_stats: Vec<BatchStats>,
}

struct BlockVars {
    weight: Var,
    scale: Var,
    shift: Var,
}

fn block_vars(encoder: &Encoder, vars: &[Var]) -> Result<Vec<BlockVars>> {
    if vars.len() != 3 * encoder.blocks.len() {
        return Err(CoreError::config(format!(
            "expected {} encoder vars, got {}",
            3 * encoder.blocks.len(),
            vars.len()
        )));
    }
    Ok(vars
        .chunks(3)
        .map(|c| BlockVars {
            weight: c[0],
            scale: c[1],
            shift: c[2],
        })
        .collect())
}

fn perturb(tape: &mut Tape, p: &Perturbation, vars: &[Var], site: usize, m: Var) -> Result<Var> {
    match p {
        Perturbation::Affine(_) => afa_apply(tape, m, vars[2 * site], vars[2 * site + 1]),
        Perturbation::Conv(_) => afa_apply_nonlinear(tape, m, vars[site]),
    }
}

fn finish_block(tape: &mut Tape, m: Var, pool: bool) -> Result<Var> {
    let r = tape.relu(m)?;
    Ok(if pool { tape.avg_pool2(r)? } else { r })
}

/// Two-stream forward pass.
///
/// In train mode with `afa` given, both streams run and the per-site pairs
/// are captured. In eval mode, or without `afa`, only the original stream
/// runs and `augmented` is `None`. `encoder_vars` and `afa`'s vars must come
/// from [`Parameters::bind`] on the same tape.
pub fn forward_dual(
    tape: &mut Tape,
    encoder: &Encoder,
    encoder_vars: &[Var],
    afa: Option<(&Perturbation, &[Var])>,
    x: Var,
    opts: ForwardOptions,
) -> Result<ForwardOutput> {
    let blocks = block_vars(encoder, encoder_vars)?;
    if let Some((p, _)) = afa {
        if p.sites() != encoder.blocks.len() {
            return Err(CoreError::config(format!(
                "{} AFA sites for {} normalization layers",
                p.sites(),
                encoder.blocks.len()
            )));
        }
    }
    let pool = encoder.config.pool;
    let dual = opts.mode == NormMode::Train && afa.is_some();
    let mut h_o = x;
    let mut h_a = x;
    let mut sites = Vec::new();
    let mut batch_stats = Vec::new();
    for (i, (block, bv)) in encoder.blocks.iter().zip(&blocks).enumerate() {
        let c_o = tape.conv2d(h_o, bv.weight)?;
        let n_o = match opts.mode {
            NormMode::Train => {
                let (n, stats) = tape.batch_norm(c_o, c_o)?;
                batch_stats.push(stats);
                n
            }
            NormMode::Eval => block.norm.apply_running(tape, c_o)?,
        };
        let m_o = tape.channel_affine(n_o, bv.scale, bv.shift)?;
        if dual {
            let (p, pvars) = afa.expect("dual implies afa");
            // While the streams have not diverged the pre-AFA activations are
            // the same nodes.
            let m_pre = if h_a == h_o {
                m_o
            } else {
                let c_a = tape.conv2d(h_a, bv.weight)?;
                let source = if opts.shared_bn_stats { c_o } else { c_a };
                let (n_a, _) = tape.batch_norm(c_a, source)?;
                tape.channel_affine(n_a, bv.scale, bv.shift)?
            };
            let m_a = perturb(tape, p, pvars, i, m_pre)?;
            sites.push(SitePair {
                original: m_o,
                augmented: m_a,
            });
            h_a = finish_block(tape, m_a, pool)?;
        }
        h_o = finish_block(tape, m_o, pool)?;
    }
    let original = tape.global_avg_pool(h_o)?;
    let augmented = if dual {
        Some(tape.global_avg_pool(h_a)?)
    } else {
        None
    };
    Ok(ForwardOutput {
        features: DualFeatures {
            sites,
            original,
            augmented,
        },
        batch_stats,
    })
}

/// Single-stream embedding (`N×C_out`), e.g. for evaluation.
pub fn encode(
    tape: &mut Tape,
    encoder: &Encoder,
    encoder_vars: &[Var],
    x: Var,
    mode: NormMode,
) -> Result<(Var, Vec<BatchStats>)> {
    let out = forward_dual(
        tape,
        encoder,
        encoder_vars,
        None,
        x,
        ForwardOptions {
            mode,
            shared_bn_stats: false,
        },
    )?;
    Ok((out.features.original, out.batch_stats))
}

/// Eval-mode single stream with the perturbation applied at every site.
pub fn encode_perturbed(
    tape: &mut Tape,
    encoder: &Encoder,
    encoder_vars: &[Var],
    afa: (&Perturbation, &[Var]),
    x: Var,
) -> Result<Var> {
    let blocks = block_vars(encoder, encoder_vars)?;
    let (p, pvars) = afa;
    let mut h = x;
    for (i, (block, bv)) in encoder.blocks.iter().zip(&blocks).enumerate() {
        let c = tape.conv2d(h, bv.weight)?;
        let n = block.norm.apply_running(tape, c)?;
        let m = tape.channel_affine(n, bv.scale, bv.shift)?;
        let m = perturb(tape, p, pvars, i, m)?;
        h = finish_block(tape, m, encoder.config.pool)?;
    }
    Ok(tape.global_avg_pool(h)?)
}

/// Linear classifier over pooled features used for base-class pretraining.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearClassifier {
    /// `C_out × classes`
    pub weight: Tensor,
    pub bias: Tensor,
}

impl LinearClassifier {
    pub fn init(features: usize, classes: usize, rng: &mut Rng) -> Result<Self> {
        let std = (1.0 / features as f64).sqrt();
        Ok(LinearClassifier {
            weight: Tensor::new(&[features, classes], rng.normals(features * classes, 0.0, std))?,
            bias: Tensor::zeros(&[classes])?,
        })
    }

    pub fn zeros(features: usize, classes: usize) -> Result<Self> {
        Ok(LinearClassifier {
            weight: Tensor::zeros(&[features, classes])?,
            bias: Tensor::zeros(&[classes])?,
        })
    }

    pub fn classes(&self) -> usize {
        self.bias.len()
    }
}

impl Parameters for LinearClassifier {
    fn named(&self) -> Vec<(String, &Tensor)> {
        vec![
            ("classifier.weight".to_string(), &self.weight),
            ("classifier.bias".to_string(), &self.bias),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.weight, &mut self.bias]
    }
}

/// Base-class logits: pooled original features through the linear layer.
/// AFA sites are inactive (identity) during pretraining.
pub fn pretrain_forward(
    tape: &mut Tape,
    encoder: &Encoder,
    encoder_vars: &[Var],
    classifier_vars: &[Var],
    x: Var,
    mode: NormMode,
) -> Result<(Var, Vec<BatchStats>)> {
    let (features, stats) = encode(tape, encoder, encoder_vars, x, mode)?;
    let z = tape.matmul(features, classifier_vars[0])?;
    let logits = tape.add_row_bias(z, classifier_vars[1])?;
    Ok((logits, stats))
}
