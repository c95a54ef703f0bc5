//! Episodic class discriminators: matching network, prototypical and
//! label-propagation (TPN-lite) heads.

use std::fmt;
use std::str::FromStr;

use afa_tensor::{Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

pub const DEFAULT_TPN_ALPHA: f64 = 0.99;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum HeadKind {
    Matching,
    Proto,
    Tpn {
        alpha: f64,
        /// Fixed kernel width; `None` uses the episode's median
        /// nearest-neighbour distance (treated as a constant).
        #[serde(default)]
        sigma: Option<f64>,
    },
}

impl HeadKind {
    pub fn tpn() -> Self {
        HeadKind::Tpn {
            alpha: DEFAULT_TPN_ALPHA,
            sigma: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let HeadKind::Tpn { alpha, sigma } = *self {
            if !(0.0..1.0).contains(&alpha) {
                return Err(CoreError::config(format!("tpn alpha {alpha} outside [0, 1)")));
            }
            if let Some(s) = sigma {
                if !(s > 0.0 && s.is_finite()) {
                    return Err(CoreError::config(format!("tpn sigma {s} must be positive")));
                }
            }
        }
        Ok(())
    }

    pub fn name(&self) -> &'static str {
        match self {
            HeadKind::Matching => "matching",
            HeadKind::Proto => "proto",
            HeadKind::Tpn { .. } => "tpn",
        }
    }
}

impl fmt::Display for HeadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for HeadKind {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "matching" => Ok(HeadKind::Matching),
            "proto" => Ok(HeadKind::Proto),
            "tpn" => Ok(HeadKind::tpn()),
            other => Err(CoreError::config(format!(
                "unknown head {other:?} (expected matching, proto or tpn)"
            ))),
        }
    }
}

/// Support and query embeddings of one episode on a tape.
#[derive(Clone, Debug)]
pub struct EpisodeFeatures<'a> {
    /// `n·k × D`
    pub support: Var,
    pub support_labels: &'a [usize],
    /// `n·q × D`
    pub query: Var,
    pub ways: usize,
}

fn one_hot(labels: &[usize], n: usize) -> Result<Tensor> {
    let mut data = vec![0.0; labels.len() * n];
    for (i, &l) in labels.iter().enumerate() {
        if l >= n {
            return Err(CoreError::Episode(format!("label {l} outside 0..{n}")));
        }
        data[i * n + l] = 1.0;
    }
    Ok(Tensor::matrix(labels.len(), n, data)?)
}

fn check(tape: &Tape, ep: &EpisodeFeatures<'_>) -> Result<()> {
    let (s, q) = (tape.shape(ep.support), tape.shape(ep.query));
    match (s, q) {
        ([ns, d], [_, dq]) if d == dq && *ns == ep.support_labels.len() => {}
        _ => {
            return Err(CoreError::Episode(format!(
                "support {s:?} / query {q:?} / {} labels are inconsistent",
                ep.support_labels.len()
            )))
        }
    }
    if ep.ways == 0 {
        return Err(CoreError::Episode("episode has zero ways".into()));
    }
    for c in 0..ep.ways {
        if !ep.support_labels.contains(&c) {
            return Err(CoreError::Episode(format!("class {c} has no support samples")));
        }
    }
    Ok(())
}

/// Cosine attention over supports, summed per class.
pub fn matching_head(tape: &mut Tape, ep: &EpisodeFeatures<'_>) -> Result<Var> {
    check(tape, ep)?;
    let y = tape.constant(one_hot(ep.support_labels, ep.ways)?);
    let q = tape.l2_normalize_rows(ep.query)?;
    let s = tape.l2_normalize_rows(ep.support)?;
    let st = tape.transpose(s)?;
    let sims = tape.matmul(q, st)?;
    let attention = tape.softmax_rows(sims)?;
    Ok(tape.matmul(attention, y)?)
}

/// Softmax of negative squared distances to class-mean prototypes.
pub fn proto_head(tape: &mut Tape, ep: &EpisodeFeatures<'_>) -> Result<Var> {
    check(tape, ep)?;
    let n = ep.ways;
    let ns = ep.support_labels.len();
    let mut counts = vec![0usize; n];
    for &l in ep.support_labels {
        counts[l] += 1;
    }
    let mut avg = vec![0.0; n * ns];
    for (j, &l) in ep.support_labels.iter().enumerate() {
        avg[l * ns + j] = 1.0 / counts[l] as f64;
    }
    let avg = tape.constant(Tensor::matrix(n, ns, avg)?);
    let protos = tape.matmul(avg, ep.support)?;
    let d2 = tape.sq_dist(ep.query, protos)?;
    let neg = tape.scale(d2, -1.0)?;
    Ok(tape.softmax_rows(neg)?)
}

fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return 1.0;
    }
    v.sort_by(f64::total_cmp);
    let m = v.len();
    let med = if m % 2 == 1 { v[m / 2] } else { 0.5 * (v[m / 2 - 1] + v[m / 2]) };
    if med > 0.0 {
        med
    } else {
        1.0
    }
}

/// Median of the strictly-upper-triangle pairwise distances.
pub fn median_pairwise_distance(d2: &Tensor) -> f64 {
    let n = d2.shape()[0];
    median(
        (0..n)
            .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
            .map(|(i, j)| d2.data()[i * n + j].max(0.0).sqrt())
            .collect(),
    )
}

/// Median over points of the distance to their nearest other point. This is
/// the default kernel width of the propagation head: it follows the local
/// scale, so the graph stays close to block-diagonal when classes cluster.
pub fn median_nearest_distance(d2: &Tensor) -> f64 {
    let n = d2.shape()[0];
    median(
        (0..n)
            .filter_map(|i| {
                (0..n)
                    .filter(|&j| j != i)
                    .map(|j| d2.data()[i * n + j].max(0.0))
                    .min_by(f64::total_cmp)
                    .map(f64::sqrt)
            })
            .collect(),
    )
}

/// Label propagation `F* = (I − αS)⁻¹ Y` over supports and queries, with
/// a softmax over each query row of `F*`.
pub fn tpn_head(tape: &mut Tape, ep: &EpisodeFeatures<'_>, alpha: f64, sigma: Option<f64>) -> Result<Var> {
    check(tape, ep)?;
    HeadKind::Tpn { alpha, sigma }.validate()?;
    let ns = ep.support_labels.len();
    let nq = tape.shape(ep.query)[0];
    let total = ns + nq;
    let z = tape.concat_rows(ep.support, ep.query)?;
    let d2 = tape.sq_dist(z, z)?;
    let sigma = sigma.unwrap_or_else(|| median_nearest_distance(tape.value(d2)));
    let scaled = tape.scale(d2, -1.0 / (2.0 * sigma * sigma))?;
    let w = tape.exp(scaled)?;
    let mut mask = Tensor::ones(&[total, total])?;
    for i in 0..total {
        mask.data_mut()[i * total + i] = 0.0;
    }
    let mask = tape.constant(mask);
    let w = tape.mul(w, mask)?;
    let s = tape.sym_normalize(w)?;
    let a_s = tape.scale(s, alpha)?;
    let eye = tape.constant(Tensor::eye(total)?);
    let system = tape.sub(eye, a_s)?;
    let mut y = one_hot(ep.support_labels, ep.ways)?.into_data();
    y.resize(total * ep.ways, 0.0);
    let y = tape.constant(Tensor::matrix(total, ep.ways, y)?);
    let f = tape.solve(system, y)?;
    let fq = tape.slice_rows(f, ns, nq)?;
    Ok(tape.softmax_rows(fq)?)
}

/// Query class probabilities `n·q × n` for the chosen head.
pub fn head_probabilities(tape: &mut Tape, kind: HeadKind, ep: &EpisodeFeatures<'_>) -> Result<Var> {
    match kind {
        HeadKind::Matching => matching_head(tape, ep),
        HeadKind::Proto => proto_head(tape, ep),
        HeadKind::Tpn { alpha, sigma } => tpn_head(tape, ep, alpha, sigma),
    }
}

/// Mean negative log probability of the true class (log clamped at 1e-7).
pub fn episode_loss(tape: &mut Tape, probs: Var, labels: &[usize]) -> Result<Var> {
    Ok(tape.nll_prob(probs, labels)?)
}

/// Index of the row maximum; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

pub fn episode_accuracy(probs: &Tensor, labels: &[usize]) -> f64 {
    let n = match probs.shape() {
        [_, n] => *n,
        _ => return 0.0,
    };
    if labels.is_empty() {
        return 0.0;
    }
    let correct = probs
        .data()
        .chunks(n)
        .zip(labels)
        .filter(|(row, &l)| argmax(row) == l)
        .count();
    correct as f64 / labels.len() as f64
}
