use crate::error::{Result, TensorError};
use crate::tape::{GradSink, Op, Tape, Var};
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
pub const NORM_EPS: f64 = 1e-8;

/// `(N, C, H·W)` view of a rank-2 `N×C` or rank-4 `N×C×H×W` tensor.
fn channel_layout(t: &Tensor) -> Option<(usize, usize, usize)> {
    match t.shape() {
        [n, c] => Some((*n, *c, 1)),
        [n, c, h, w] => Some((*n, *c, h * w)),
        _ => None,
    }
}

pub(crate) struct BatchNormSaved {
    pub(crate) x: Var,
    pub(crate) source: Var,
    mean: Vec<f64>,
    inv_std: Vec<f64>,
}

/// Per-channel batch statistics (biased variance) and the count they span.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub count: usize,
}

fn batch_stats(t: &Tensor) -> Result<BatchStats> {
    let (n, c, hw) = channel_layout(t).ok_or_else(|| TensorError::InvalidShape {
        shape: t.shape().to_vec(),
    })?;
    let count = n * hw;
    if count < 2 {
        return Err(TensorError::DegenerateBatch { per_channel: count });
    }
    let d = t.data();
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ch in 0..c {
        let mut s = 0.0;
        for ni in 0..n {
            s += d[(ni * c + ch) * hw..(ni * c + ch + 1) * hw].iter().sum::<f64>();
        }
        let mu = s / count as f64;
        let mut v = 0.0;
        for ni in 0..n {
            v += d[(ni * c + ch) * hw..(ni * c + ch + 1) * hw]
                .iter()
                .map(|x| (x - mu) * (x - mu))
                .sum::<f64>();
        }
        mean[ch] = mu;
        var[ch] = v / count as f64;
    }
    Ok(BatchStats { mean, var, count })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormMode {
    Train,
    Eval,
}

/// Running statistics of one batch-normalization layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormState {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

impl BatchNormState {
    pub fn new(channels: usize) -> Self {
        BatchNormState {
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }

    /// Exponential moving average update (momentum 0.1, unbiased variance).
    pub fn update(&mut self, stats: &BatchStats) {
        let unbias = stats.count as f64 / (stats.count as f64 - 1.0);
        for ch in 0..self.channels() {
            self.running_mean[ch] =
                (1.0 - BN_MOMENTUM) * self.running_mean[ch] + BN_MOMENTUM * stats.mean[ch];
            self.running_var[ch] =
                (1.0 - BN_MOMENTUM) * self.running_var[ch] + BN_MOMENTUM * stats.var[ch] * unbias;
        }
    }

    /// Normalizes `x` without the learned affine part.
    ///
    /// Train mode uses batch statistics and folds them into the running
    /// averages; eval mode applies the running averages.
    pub fn forward(&mut self, tape: &mut Tape, x: Var, mode: NormMode) -> Result<Var> {
        match mode {
            NormMode::Train => {
                let (y, stats) = tape.batch_norm(x, x)?;
                self.update(&stats);
                Ok(y)
            }
            NormMode::Eval => self.apply_running(tape, x),
        }
    }

    pub fn apply_running(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let scale: Vec<f64> = self
            .running_var
            .iter()
            .map(|v| 1.0 / (v + BN_EPS).sqrt())
            .collect();
        let shift: Vec<f64> = self
            .running_mean
            .iter()
            .zip(&scale)
            .map(|(m, s)| -m * s)
            .collect();
        let s = tape.constant(Tensor::vector(scale)?);
        let b = tape.constant(Tensor::vector(shift)?);
        tape.channel_affine(x, s, b)
    }
}

impl Tape {
    /// Train-mode batch normalization of `x` using the batch statistics of
    /// `source` (pass `source == x` for the standard layer).
    ///
    /// Gradients flow through the statistics into `source`.
    pub fn batch_norm(&mut self, x: Var, source: Var) -> Result<(Var, BatchStats)> {
        self.check(x)?;
        self.check(source)?;
        let (xv, sv) = (self.value(x), self.value(source));
        let (xn, c, hw) = channel_layout(xv).ok_or_else(|| TensorError::InvalidShape {
            shape: xv.shape().to_vec(),
        })?;
        match channel_layout(sv) {
            Some((_, sc, shw)) if sc == c && shw == hw => {}
            _ => {
                return Err(TensorError::ShapeMismatch {
                    op: "batch_norm",
                    left: xv.shape().to_vec(),
                    right: sv.shape().to_vec(),
                })
            }
        }
        let stats = batch_stats(sv)?;
        let inv_std: Vec<f64> = stats.var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let mut out = xv.data().to_vec();
        for ni in 0..xn {
            for ch in 0..c {
                let (mu, is) = (stats.mean[ch], inv_std[ch]);
                for v in &mut out[(ni * c + ch) * hw..(ni * c + ch + 1) * hw] {
                    *v = (*v - mu) * is;
                }
            }
        }
        let value = Tensor::from_parts(xv.shape().to_vec(), out);
        let saved = BatchNormSaved {
            x,
            source,
            mean: stats.mean.clone(),
            inv_std,
        };
        let y = self.push(value, Op::BatchNorm(Box::new(saved)))?;
        Ok((y, stats))
    }

    /// `scale[c] · x + shift[c]` for every element of channel `c`.
    pub fn channel_affine(&mut self, x: Var, scale: Var, shift: Var) -> Result<Var> {
        self.check(x)?;
        self.check(scale)?;
        self.check(shift)?;
        let xv = self.value(x);
        let (sv, bv) = (self.value(scale), self.value(shift));
        let (n, c, hw) = channel_layout(xv).ok_or_else(|| TensorError::InvalidShape {
            shape: xv.shape().to_vec(),
        })?;
        if sv.len() != c || bv.len() != c {
            return Err(TensorError::ShapeMismatch {
                op: "channel_affine",
                left: xv.shape().to_vec(),
                right: sv.shape().to_vec(),
            });
        }
        let mut out = xv.data().to_vec();
        for ni in 0..n {
            for ch in 0..c {
                let (g, b) = (sv.data()[ch], bv.data()[ch]);
                for v in &mut out[(ni * c + ch) * hw..(ni * c + ch + 1) * hw] {
                    *v = g * *v + b;
                }
            }
        }
        let value = Tensor::from_parts(xv.shape().to_vec(), out);
        self.push(value, Op::ChannelAffine { x, scale, shift })
    }

    /// Divides each row of an `M×D` matrix by `max(‖row‖, 1e-8)`.
    pub fn l2_normalize_rows(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let av = self.value(a);
        let d = match av.shape() {
            [_, d] => *d,
            s => return Err(TensorError::InvalidShape { shape: s.to_vec() }),
        };
        let mut out = av.data().to_vec();
        let mut norms = Vec::with_capacity(av.len() / d);
        for row in out.chunks_mut(d) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            let denom = norm.max(NORM_EPS);
            row.iter_mut().for_each(|v| *v /= denom);
            norms.push(norm);
        }
        let value = Tensor::from_parts(av.shape().to_vec(), out);
        self.push(value, Op::L2NormalizeRows { a, norms })
    }

    /// Symmetric degree normalization `D^{-1/2} W D^{-1/2}` of a square matrix.
    ///
    /// Rows with zero degree are left as zeros.
    pub fn sym_normalize(&mut self, w: Var) -> Result<Var> {
        self.check(w)?;
        let wv = self.value(w);
        let n = match wv.shape() {
            [r, c] if r == c => *r,
            s => return Err(TensorError::InvalidShape { shape: s.to_vec() }),
        };
        let degrees: Vec<f64> = wv.data().chunks(n).map(|r| r.iter().sum()).collect();
        let r: Vec<f64> = degrees
            .iter()
            .map(|&d| if d > 0.0 { 1.0 / d.sqrt() } else { 0.0 })
            .collect();
        let mut out = wv.data().to_vec();
        for i in 0..n {
            for j in 0..n {
                out[i * n + j] *= r[i] * r[j];
            }
        }
        let value = Tensor::from_parts(vec![n, n], out);
        self.push(value, Op::SymNormalize { w, degrees })
    }

    /// Row-wise softmax of an `M×N` matrix (max-subtracted).
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let av = self.value(a);
        let n = match av.shape() {
            [_, n] => *n,
            s => return Err(TensorError::InvalidShape { shape: s.to_vec() }),
        };
        let mut out = av.data().to_vec();
        for row in out.chunks_mut(n) {
            softmax_in_place(row);
        }
        let value = Tensor::from_parts(av.shape().to_vec(), out);
        self.push(value, Op::SoftmaxRows { a })
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    row.iter_mut().for_each(|v| *v /= total);
}

pub(crate) fn backward(
    tape: &Tape,
    op: &Op,
    out: &Tensor,
    g: &Tensor,
    sink: &mut GradSink,
) -> Result<()> {
    let gd = g.data();
    match op {
        Op::BatchNorm(saved) => {
            let BatchNormSaved {
                x,
                source,
                mean,
                inv_std,
            } = saved.as_ref();
            let xv = tape.value(*x);
            let sv = tape.value(*source);
            let (xn, c, hw) = channel_layout(xv).expect("bn input");
            let (sn, _, _) = channel_layout(sv).expect("bn source");
            let count = (sn * hw) as f64;
            let mut dx = vec![0.0; xv.len()];
            let mut dmean = vec![0.0; c];
            let mut dvar = vec![0.0; c];
            for ni in 0..xn {
                for ch in 0..c {
                    let range = (ni * c + ch) * hw..(ni * c + ch + 1) * hw;
                    let (mu, is) = (mean[ch], inv_std[ch]);
                    let mut gsum = 0.0;
                    let mut gcen = 0.0;
                    for (i, (&gv, &xv)) in gd[range.clone()].iter().zip(&xv.data()[range.clone()]).enumerate() {
                        dx[range.start + i] = gv * is;
                        gsum += gv;
                        gcen += gv * (xv - mu);
                    }
                    dmean[ch] -= gsum * is;
                    // d(inv_std)/d(var) = -inv_std³ / 2
                    dvar[ch] -= 0.5 * gcen * is * is * is;
                }
            }
            if *x == *source {
                add_stat_grads(&mut dx, sv, mean, &dmean, &dvar, c, hw, count);
                sink.add(*x, dx);
            } else {
                sink.add(*x, dx);
                if sink.wants(*source) {
                    let mut ds = vec![0.0; sv.len()];
                    add_stat_grads(&mut ds, sv, mean, &dmean, &dvar, c, hw, count);
                    sink.add(*source, ds);
                }
            }
        }
        Op::ChannelAffine { x, scale, shift } => {
            let xv = tape.value(*x);
            let sv = tape.value(*scale);
            let (n, c, hw) = channel_layout(xv).expect("affine input");
            if sink.wants(*x) {
                let mut dx = gd.to_vec();
                for ni in 0..n {
                    for ch in 0..c {
                        let s = sv.data()[ch];
                        for v in &mut dx[(ni * c + ch) * hw..(ni * c + ch + 1) * hw] {
                            *v *= s;
                        }
                    }
                }
                sink.add(*x, dx);
            }
            if sink.wants(*scale) || sink.wants(*shift) {
                let mut ds = vec![0.0; c];
                let mut db = vec![0.0; c];
                for ni in 0..n {
                    for ch in 0..c {
                        let range = (ni * c + ch) * hw..(ni * c + ch + 1) * hw;
                        for (&gv, &xv) in gd[range.clone()].iter().zip(&xv.data()[range]) {
                            ds[ch] += gv * xv;
                            db[ch] += gv;
                        }
                    }
                }
                sink.add(*scale, ds);
                sink.add(*shift, db);
            }
        }
        Op::L2NormalizeRows { a, norms } => {
            let av = tape.value(*a);
            let d = av.shape()[1];
            let mut da = vec![0.0; av.len()];
            for (r, &norm) in norms.iter().enumerate() {
                let range = r * d..(r + 1) * d;
                let grow = &gd[range.clone()];
                if norm > NORM_EPS {
                    let yrow = &out.data()[range.clone()];
                    let dot: f64 = grow.iter().zip(yrow).map(|(g, y)| g * y).sum();
                    for (i, (&gv, &yv)) in grow.iter().zip(yrow).enumerate() {
                        da[range.start + i] = (gv - dot * yv) / norm;
                    }
                } else {
                    for (i, &gv) in grow.iter().enumerate() {
                        da[range.start + i] = gv / NORM_EPS;
                    }
                }
            }
            sink.add(*a, da);
        }
        Op::SymNormalize { w, degrees } => {
            let wv = tape.value(*w);
            let n = degrees.len();
            let r: Vec<f64> = degrees
                .iter()
                .map(|&d| if d > 0.0 { 1.0 / d.sqrt() } else { 0.0 })
                .collect();
            let mut dw = vec![0.0; n * n];
            let mut dr = vec![0.0; n];
            for i in 0..n {
                for j in 0..n {
                    let gij = gd[i * n + j];
                    let wij = wv.data()[i * n + j];
                    dw[i * n + j] = gij * r[i] * r[j];
                    dr[i] += gij * wij * r[j];
                    dr[j] += gij * wij * r[i];
                }
            }
            for i in 0..n {
                if degrees[i] > 0.0 {
                    // r = d^{-1/2}, dr/dd = -r³/2; d_i = Σ_j W_ij
                    let dd = -0.5 * dr[i] * r[i] * r[i] * r[i];
                    for j in 0..n {
                        dw[i * n + j] += dd;
                    }
                }
            }
            sink.add(*w, dw);
        }
        Op::SoftmaxRows { a } => {
            let n = out.shape()[1];
            let mut da = vec![0.0; out.len()];
            for ((drow, yrow), grow) in da.chunks_mut(n).zip(out.data().chunks(n)).zip(gd.chunks(n)) {
                let dot: f64 = grow.iter().zip(yrow).map(|(g, y)| g * y).sum();
                for ((d, &y), &gv) in drow.iter_mut().zip(yrow).zip(grow) {
                    *d = y * (gv - dot);
                }
            }
            sink.add(*a, da);
        }
        _ => unreachable!("norm backward called for {}", op.name()),
    }
    Ok(())
}

/// Chain rule from per-channel `d mean` / `d var` onto the source elements.
#[allow(clippy::too_many_arguments)]
fn add_stat_grads(
    ds: &mut [f64],
    source: &Tensor,
    mean: &[f64],
    dmean: &[f64],
    dvar: &[f64],
    c: usize,
    hw: usize,
    count: f64,
) {
    let sd = source.data();
    let n = sd.len() / (c * hw);
    for ni in 0..n {
        for ch in 0..c {
            let base = (ni * c + ch) * hw;
            for i in base..base + hw {
                ds[i] += dmean[ch] / count + dvar[ch] * 2.0 * (sd[i] - mean[ch]) / count;
            }
        }
    }
}
