//! Domain discriminator, domain and gram-matrix losses, the λ schedule and
//! signed gradient routing for the adversarial min-max update.

use afa_tensor::{AdamState, Gradients, Rng, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::encoder::SitePair;
use crate::error::{CoreError, Result};
use crate::params::{adam_step, gradients_for, Parameters};

/// Logistic regressor `D_d(F) = sigmoid(µᵀF + b)` over pooled features (θ_d).
#[derive(Clone, Debug, PartialEq)]
pub struct DomainDiscriminator {
    /// `C × 1`
    pub weight: Tensor,
    pub bias: Tensor,
}

impl DomainDiscriminator {
    /// Starts at µ = 0, b = 0, i.e. predicting 0.5 everywhere.
    pub fn zeros(features: usize) -> Result<Self> {
        Ok(DomainDiscriminator {
            weight: Tensor::zeros(&[features, 1])?,
            bias: Tensor::zeros(&[1])?,
        })
    }

    pub fn new(mu: Vec<f64>, b: f64) -> Result<Self> {
        let c = mu.len();
        Ok(DomainDiscriminator {
            weight: Tensor::new(&[c, 1], mu)?,
            bias: Tensor::vector(vec![b])?,
        })
    }

    pub fn features(&self) -> usize {
        self.weight.shape()[0]
    }
}

impl Parameters for DomainDiscriminator {
    fn named(&self) -> Vec<(String, &Tensor)> {
        vec![
            ("discriminator.weight".to_string(), &self.weight),
            ("discriminator.bias".to_string(), &self.bias),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.weight, &mut self.bias]
    }
}

/// Probability of "augmented" for each row of `M×C` features, shape `[M]`.
pub fn discriminate(tape: &mut Tape, features: Var, d: &[Var]) -> Result<Var> {
    let c = tape.value(d[0]).shape()[0];
    match tape.shape(features) {
        [_, fc] if *fc == c => {}
        s => {
            return Err(CoreError::config(format!(
                "discriminator expects {c} features, got shape {s:?}"
            )))
        }
    }
    let m = tape.shape(features)[0];
    let z = tape.matmul(features, d[0])?;
    let z = tape.add_row_bias(z, d[1])?;
    let p = tape.sigmoid(z)?;
    Ok(tape.reshape(p, &[m])?)
}

/// Mean BCE over the `2N` rows `[F_o; F_a]` with labels 0 then 1.
///
/// Returns the loss and the fraction of rows classified correctly at
/// threshold 0.5.
pub fn domain_loss(tape: &mut Tape, f_o: Var, f_a: Var, d: &[Var]) -> Result<(Var, f64)> {
    if tape.shape(f_o) != tape.shape(f_a) {
        return Err(CoreError::config(format!(
            "domain_loss: original batch {:?} vs augmented {:?}",
            tape.shape(f_o),
            tape.shape(f_a)
        )));
    }
    let n = tape.shape(f_o)[0];
    let both = tape.concat_rows(f_o, f_a)?;
    let p = discriminate(tape, both, d)?;
    let targets: Vec<f64> = (0..2 * n).map(|i| if i < n { 0.0 } else { 1.0 }).collect();
    let correct = tape
        .value(p)
        .data()
        .iter()
        .zip(&targets)
        .filter(|(&p, &t)| (p > 0.5) == (t > 0.5))
        .count();
    let loss = tape.binary_cross_entropy(p, &targets)?;
    Ok((loss, correct as f64 / (2 * n) as f64))
}

/// `1/(4 S² C²) · Σ (G(m_a) − G(m_o))²` per sample, averaged over samples.
///
/// Accepts `C×H×W` (one sample) or `N×C×H×W`.
pub fn gram_loss(tape: &mut Tape, m_o: Var, m_a: Var) -> Result<Var> {
    if tape.shape(m_o) != tape.shape(m_a) {
        return Err(CoreError::config(format!(
            "gram_loss: shapes {:?} and {:?} differ",
            tape.shape(m_o),
            tape.shape(m_a)
        )));
    }
    let (n, c, s) = match *tape.shape(m_o) {
        [c, h, w] => (1, c, h * w),
        [n, c, h, w] => (n, c, h * w),
        ref other => {
            return Err(CoreError::config(format!(
                "gram_loss: expected a rank-3 or rank-4 feature map, got {other:?}"
            )))
        }
    };
    let g_o = tape.gram_matrix(m_o)?;
    let g_a = tape.gram_matrix(m_a)?;
    let diff = tape.sub(g_a, g_o)?;
    let sq = tape.square(diff)?;
    let total = tape.sum(sq)?;
    let (s, c) = (s as f64, c as f64);
    Ok(tape.scale(total, 1.0 / (4.0 * s * s * c * c * n as f64))?)
}

/// Mean of the per-site gram losses, plus each site's value.
pub fn total_gram_loss(tape: &mut Tape, sites: &[SitePair]) -> Result<(Var, Vec<f64>)> {
    if sites.is_empty() {
        return Err(CoreError::config("total_gram_loss needs at least one AFA site"));
    }
    let mut per_site = Vec::with_capacity(sites.len());
    let mut acc: Option<Var> = None;
    for s in sites {
        let l = gram_loss(tape, s.original, s.augmented)?;
        per_site.push(tape.value(l).item()?);
        acc = Some(match acc {
            None => l,
            Some(a) => tape.add(a, l)?,
        });
    }
    let total = acc.expect("non-empty");
    let mean = tape.scale(total, 1.0 / sites.len() as f64)?;
    Ok((mean, per_site))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", content = "value", rename_all = "snake_case")]
pub enum LambdaMode {
    Dann,
    Const(f64),
}

impl LambdaMode {
    /// Parses `dann` or `const:VALUE`.
    pub fn parse(s: &str) -> Result<LambdaMode> {
        if s == "dann" {
            return Ok(LambdaMode::Dann);
        }
        if let Some(v) = s.strip_prefix("const:") {
            let c: f64 = v
                .parse()
                .map_err(|_| CoreError::config(format!("bad lambda constant {v:?}")))?;
            if !c.is_finite() {
                return Err(CoreError::config("lambda constant must be finite"));
            }
            return Ok(LambdaMode::Const(c));
        }
        Err(CoreError::config(format!(
            "unknown lambda mode {s:?} (expected dann or const:VALUE)"
        )))
    }
}

/// `2/(1+e^{−10p}) − 1` for [`LambdaMode::Dann`]; `p` is clamped to [0, 1].
pub fn lambda_schedule(progress: f64, mode: LambdaMode) -> f64 {
    match mode {
        LambdaMode::Dann => {
            let p = if progress.is_nan() { 0.0 } else { progress.clamp(0.0, 1.0) };
            2.0 / (1.0 + (-10.0 * p).exp()) - 1.0
        }
        LambdaMode::Const(c) => c,
    }
}

/// One line of the meta-training metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub iter: usize,
    #[serde(rename = "L_c")]
    pub l_c: f64,
    #[serde(rename = "L_d")]
    pub l_d: f64,
    #[serde(rename = "L_g")]
    pub l_g: f64,
    #[serde(rename = "L_D")]
    pub l_total: f64,
    pub lambda: f64,
    /// Discriminator accuracy on this step's rows; absent without `D_d`.
    pub acc_domain: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub site_gram: Vec<f64>,
}

/// Which terms enter the adversarial objective.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Objective {
    pub use_ld: bool,
    pub use_lg: bool,
    /// Also route `+∂L_c/∂θ_a` into the perturbation parameters.
    pub route_lc_into_afa: bool,
}

impl Default for Objective {
    fn default() -> Self {
        Objective {
            use_ld: true,
            use_lg: true,
            route_lc_into_afa: false,
        }
    }
}

/// Builds `L_D = L_d − L_g` from whichever terms are enabled.
pub fn combine(tape: &mut Tape, l_d: Option<Var>, l_g: Option<Var>) -> Result<Option<Var>> {
    Ok(match (l_d, l_g) {
        (Some(d), Some(g)) => Some(tape.sub(d, g)?),
        (Some(d), None) => Some(d),
        (None, Some(g)) => Some(tape.scale(g, -1.0)?),
        (None, None) => None,
    })
}

/// Scalar losses of one forward pass, all on the same tape.
#[derive(Clone, Copy, Debug)]
pub struct EpisodeLosses {
    pub l_c: Option<Var>,
    /// `L_D`, already combined.
    pub l_adv: Option<Var>,
}

/// Tape variables of the four parameter groups. Empty slices are allowed.
#[derive(Clone, Copy, Debug)]
pub struct GroupVars<'a> {
    pub encoder: &'a [Var],
    pub afa: &'a [Var],
    pub discriminator: &'a [Var],
    pub classifier: &'a [Var],
}

/// Effective gradients handed to the optimizers (the step moves against them).
#[derive(Clone, Debug, PartialEq)]
pub struct RoutedGradients {
    pub encoder: Vec<Tensor>,
    pub afa: Vec<Tensor>,
    pub discriminator: Vec<Tensor>,
    pub classifier: Vec<Tensor>,
    /// Whether θ_a / θ_d received any routed signal this step. When false
    /// (λ = 0 or no adversarial term) the group's optimizer is not stepped.
    pub afa_active: bool,
    pub discriminator_active: bool,
}

fn zeros_for(tape: &Tape, vars: &[Var]) -> Vec<Tensor> {
    vars.iter().map(|v| Tensor::zeros_like(tape.value(*v))).collect()
}

fn axpy(acc: &mut [Tensor], alpha: f64, g: &[Tensor]) {
    for (a, g) in acc.iter_mut().zip(g) {
        for (x, y) in a.data_mut().iter_mut().zip(g.data()) {
            *x += alpha * y;
        }
    }
}

fn grads(tape: &Tape, root: Option<Var>) -> Result<Option<Gradients>> {
    root.map(|r| tape.backward(r)).transpose().map_err(CoreError::from)
}

/// Signed routing of `∂L_c` and `∂L_D`:
///
/// * θ_c: `∂L_c/∂θ_c`
/// * θ_e: `∂L_c/∂θ_e − λ ∂L_D/∂θ_e`
/// * θ_a: `λ ∂L_D/∂θ_a` (plus `∂L_c/∂θ_a` only if `route_lc_into_afa`)
/// * θ_d: `λ ∂L_D/∂θ_d`
pub fn route_gradients(
    tape: &Tape,
    losses: EpisodeLosses,
    vars: GroupVars<'_>,
    lambda: f64,
    route_lc_into_afa: bool,
) -> Result<RoutedGradients> {
    let mut out = RoutedGradients {
        encoder: zeros_for(tape, vars.encoder),
        afa: zeros_for(tape, vars.afa),
        discriminator: zeros_for(tape, vars.discriminator),
        classifier: zeros_for(tape, vars.classifier),
        afa_active: false,
        discriminator_active: false,
    };
    if let Some(g) = grads(tape, losses.l_c)? {
        axpy(&mut out.encoder, 1.0, &gradients_for(&g, vars.encoder));
        axpy(&mut out.classifier, 1.0, &gradients_for(&g, vars.classifier));
        if route_lc_into_afa {
            axpy(&mut out.afa, 1.0, &gradients_for(&g, vars.afa));
            out.afa_active = true;
        }
    }
    if lambda != 0.0 {
        if let Some(g) = grads(tape, losses.l_adv)? {
            axpy(&mut out.encoder, -lambda, &gradients_for(&g, vars.encoder));
            axpy(&mut out.afa, lambda, &gradients_for(&g, vars.afa));
            axpy(&mut out.discriminator, lambda, &gradients_for(&g, vars.discriminator));
            out.afa_active = true;
            out.discriminator_active = true;
        }
    }
    Ok(out)
}

/// Parameters and optimizer of one group. `frozen` groups are never stepped.
pub struct Group<'a> {
    pub params: &'a mut dyn Parameters,
    pub optimizer: &'a mut AdamState,
    pub frozen: bool,
}

pub struct Groups<'a> {
    pub encoder: Group<'a>,
    pub afa: Option<Group<'a>>,
    pub discriminator: Option<Group<'a>>,
    pub classifier: Option<Group<'a>>,
}

fn step(group: Option<&mut Group<'_>>, grads: &[Tensor]) -> Result<()> {
    match group {
        Some(g) if !g.frozen => adam_step(g.params, g.optimizer, grads),
        _ => Ok(()),
    }
}

/// One Adam step per group from routed gradients.
///
/// θ_a and θ_d are skipped (moments untouched) when inactive.
pub fn apply_routed(groups: &mut Groups<'_>, routed: &RoutedGradients) -> Result<()> {
    step(Some(&mut groups.encoder), &routed.encoder)?;
    step(groups.classifier.as_mut(), &routed.classifier)?;
    if routed.afa_active {
        step(groups.afa.as_mut(), &routed.afa)?;
    }
    if routed.discriminator_active {
        step(groups.discriminator.as_mut(), &routed.discriminator)?;
    }
    Ok(())
}

/// Routes gradients and applies them. Returns the routed gradients so
/// callers can inspect signs.
pub fn adversarial_step(
    tape: &Tape,
    losses: EpisodeLosses,
    vars: GroupVars<'_>,
    lambda: f64,
    objective: Objective,
    groups: &mut Groups<'_>,
) -> Result<RoutedGradients> {
    let routed = route_gradients(tape, losses, vars, lambda, objective.route_lc_into_afa)?;
    apply_routed(groups, &routed)?;
    Ok(routed)
}

/// A random discriminator for tests and gradient checks.
pub fn random_discriminator(features: usize, rng: &mut Rng) -> Result<DomainDiscriminator> {
    DomainDiscriminator::new(rng.normals(features, 0.0, 0.5), rng.normal(0.0, 0.5))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b}");
    }

    #[test]
    fn zero_discriminator_is_half() {
        let mut tape = Tape::new();
        let d = DomainDiscriminator::zeros(3).unwrap();
        let dv = d.bind(&mut tape);
        let f = tape.constant(Tensor::matrix(2, 3, vec![1., 2., 3., -4., 5., 6.]).unwrap());
        let p = discriminate(&mut tape, f, &dv).unwrap();
        assert_eq!(tape.value(p).data(), &[0.5, 0.5]);
    }

    #[test]
    fn discriminator_closed_form() {
        let mut tape = Tape::new();
        let d = DomainDiscriminator::new(vec![1.0, 0.0], 0.0).unwrap();
        let dv = d.bind(&mut tape);
        let f = tape.constant(Tensor::matrix(1, 2, vec![3f64.ln(), 7.0]).unwrap());
        let p = discriminate(&mut tape, f, &dv).unwrap();
        close(tape.value(p).data()[0], 0.75, 1e-12);
        let bad = tape.constant(Tensor::matrix(1, 3, vec![0.0; 3]).unwrap());
        assert!(discriminate(&mut tape, bad, &dv).is_err());
    }

    #[test]
    fn zero_discriminator_domain_loss_is_ln2() {
        let mut tape = Tape::new();
        let d = DomainDiscriminator::zeros(2).unwrap();
        let dv = d.bind(&mut tape);
        let a = tape.constant(Tensor::matrix(2, 2, vec![1., 2., 3., 4.]).unwrap());
        let b = tape.constant(Tensor::matrix(2, 2, vec![0., 1., 3., 9.]).unwrap());
        let (l, _) = domain_loss(&mut tape, a, b, &dv).unwrap();
        close(tape.value(l).item().unwrap(), 2f64.ln(), 1e-15);
        let c = tape.constant(Tensor::matrix(3, 2, vec![0.0; 6]).unwrap());
        assert!(domain_loss(&mut tape, a, c, &dv).is_err());
    }

    #[test]
    fn identical_streams_cannot_beat_ln2() {
        let mut rng = Rng::new(9);
        for _ in 0..20 {
            let mut tape = Tape::new();
            let d = random_discriminator(3, &mut rng).unwrap();
            let dv = d.bind(&mut tape);
            let f = Tensor::matrix(4, 3, rng.normals(12, 0.0, 2.0)).unwrap();
            let a = tape.constant(f.clone());
            let b = tape.constant(f);
            let (l, _) = domain_loss(&mut tape, a, b, &dv).unwrap();
            assert!(tape.value(l).item().unwrap() >= 2f64.ln() - 1e-12);
        }
    }

    #[test]
    fn separable_domains_fit() {
        let mu = vec![1.0, -0.5];
        let mut tape = Tape::new();
        let d = DomainDiscriminator::new(mu.clone(), 0.0).unwrap();
        let dv = d.bind(&mut tape);
        let o: Vec<f64> = (0..3).flat_map(|_| mu.iter().map(|v| -10.0 * v)).collect();
        let a: Vec<f64> = (0..3).flat_map(|_| mu.iter().map(|v| 10.0 * v)).collect();
        let fo = tape.constant(Tensor::matrix(3, 2, o).unwrap());
        let fa = tape.constant(Tensor::matrix(3, 2, a).unwrap());
        let (l, acc) = domain_loss(&mut tape, fo, fa, &dv).unwrap();
        assert!(tape.value(l).item().unwrap() <= 0.01);
        assert_eq!(acc, 1.0);
    }

    #[test]
    fn gram_loss_hand_case() {
        let mut tape = Tape::new();
        let mo = tape.constant(Tensor::zeros(&[2, 1, 2]).unwrap());
        // rows (1,0) and (0,1) → G = I₂
        let ma = tape.constant(Tensor::new(&[2, 1, 2], vec![1., 0., 0., 1.]).unwrap());
        let l = gram_loss(&mut tape, mo, ma).unwrap();
        close(tape.value(l).item().unwrap(), 0.03125, 1e-15);
        let r = gram_loss(&mut tape, ma, mo).unwrap();
        assert_eq!(tape.value(l).item().unwrap(), tape.value(r).item().unwrap());
        let z = gram_loss(&mut tape, ma, ma).unwrap();
        assert_eq!(tape.value(z).item().unwrap(), 0.0);
    }

    #[test]
    fn total_gram_loss_is_site_mean() {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::zeros(&[1, 2, 1, 2]).unwrap());
        let i = tape.constant(Tensor::new(&[1, 2, 1, 2], vec![1., 0., 0., 1.]).unwrap());
        let i2 = tape.constant(Tensor::new(&[1, 2, 1, 2], vec![2f64.sqrt(), 0., 0., 0.]).unwrap());
        let sites = [
            SitePair { original: z, augmented: i },
            SitePair { original: z, augmented: i2 },
        ];
        let (l, per) = total_gram_loss(&mut tape, &sites).unwrap();
        // second site: G = diag(2, 0) → 4/64
        close(per[0], 0.03125, 1e-15);
        close(per[1], 0.0625, 1e-15);
        close(tape.value(l).item().unwrap(), 0.046875, 1e-15);
        let (one, _) = total_gram_loss(&mut tape, &sites[..1]).unwrap();
        close(tape.value(one).item().unwrap(), per[0], 0.0);
        assert!(total_gram_loss(&mut tape, &[]).is_err());
    }

    #[test]
    fn lambda_schedule_values() {
        assert_eq!(lambda_schedule(0.0, LambdaMode::Dann), 0.0);
        close(lambda_schedule(1.0, LambdaMode::Dann), 0.999_909_2, 1e-7);
        close(lambda_schedule(0.5, LambdaMode::Dann), 0.986_614_3, 1e-7);
        assert_eq!(lambda_schedule(-3.0, LambdaMode::Dann), 0.0);
        assert_eq!(lambda_schedule(7.0, LambdaMode::Dann), lambda_schedule(1.0, LambdaMode::Dann));
        assert_eq!(lambda_schedule(0.3, LambdaMode::Const(0.25)), 0.25);
        assert_eq!(LambdaMode::parse("const:0.5").unwrap(), LambdaMode::Const(0.5));
        assert_eq!(LambdaMode::parse("dann").unwrap(), LambdaMode::Dann);
        assert!(LambdaMode::parse("linear").is_err());
    }

    #[test]
    fn loss_report_keys() {
        let r = LossReport {
            iter: 3,
            l_c: 1.0,
            l_d: 0.7,
            l_g: 0.2,
            l_total: 0.5,
            lambda: 0.1,
            acc_domain: Some(0.5),
            site_gram: vec![],
        };
        let v: serde_json::Value = serde_json::to_value(&r).unwrap();
        for k in ["iter", "L_c", "L_d", "L_g", "L_D", "lambda", "acc_domain"] {
            assert!(v.get(k).is_some(), "{k}");
        }
    }
}
