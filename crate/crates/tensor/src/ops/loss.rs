use crate::error::{Result, TensorError};
use crate::ops::norm::softmax_in_place;
use crate::tape::{GradSink, Op, Tape, Var};
use crate::tensor::Tensor;

pub const PROB_CLAMP: f64 = 1e-7;

fn check_labels(labels: &[usize], rows: usize, classes: usize) -> Result<()> {
    if labels.len() != rows {
        return Err(TensorError::LabelCount {
            expected: rows,
            got: labels.len(),
        });
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
        return Err(TensorError::LabelOutOfRange { label, classes });
    }
    Ok(())
}

fn matrix_dims(t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(TensorError::InvalidShape { shape: s.to_vec() }),
    }
}

impl Tape {
    /// Mean over rows of `-log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        self.check(logits)?;
        let lv = self.value(logits);
        let (rows, classes) = matrix_dims(lv)?;
        check_labels(labels, rows, classes)?;
        let mut probs = lv.data().to_vec();
        let mut loss = 0.0;
        for (row, (&label, logit_row)) in probs
            .chunks_mut(classes)
            .zip(labels.iter().zip(lv.data().chunks(classes)))
        {
            let max = logit_row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = logit_row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
            loss += lse - logit_row[label];
            softmax_in_place(row);
        }
        let value = Tensor::scalar(loss / rows as f64);
        self.push(
            value,
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        )
    }

    /// Mean binary cross-entropy of probabilities against 0/1 targets.
    ///
    /// Probabilities are clamped to `[1e-7, 1 - 1e-7]`; the clamp passes no
    /// gradient where it is active.
    pub fn binary_cross_entropy(&mut self, p: Var, targets: &[f64]) -> Result<Var> {
        self.check(p)?;
        let pv = self.value(p);
        if pv.len() != targets.len() {
            return Err(TensorError::LabelCount {
                expected: pv.len(),
                got: targets.len(),
            });
        }
        let total: f64 = pv
            .data()
            .iter()
            .zip(targets)
            .map(|(&p, &y)| {
                let q = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
                -y * q.ln() - (1.0 - y) * (1.0 - q).ln()
            })
            .sum();
        let value = Tensor::scalar(total / targets.len() as f64);
        self.push(
            value,
            Op::BinaryCrossEntropy {
                p,
                targets: targets.to_vec(),
            },
        )
    }

    /// Mean of `-log max(p[row, label], 1e-7)` over rows of a probability matrix.
    pub fn nll_prob(&mut self, p: Var, labels: &[usize]) -> Result<Var> {
        self.check(p)?;
        let pv = self.value(p);
        let (rows, classes) = matrix_dims(pv)?;
        check_labels(labels, rows, classes)?;
        let total: f64 = labels
            .iter()
            .enumerate()
            .map(|(r, &l)| -pv.data()[r * classes + l].max(PROB_CLAMP).ln())
            .sum();
        let value = Tensor::scalar(total / rows as f64);
        self.push(
            value,
            Op::NllProb {
                p,
                labels: labels.to_vec(),
            },
        )
    }
}

pub(crate) fn backward(
    tape: &Tape,
    op: &Op,
    _out: &Tensor,
    g: &Tensor,
    sink: &mut GradSink,
) -> Result<()> {
    let seed = g.data()[0];
    match op {
        Op::SoftmaxCrossEntropy {
            logits,
            labels,
            probs,
        } => {
            let rows = labels.len();
            let classes = probs.len() / rows;
            let scale = seed / rows as f64;
            let mut d: Vec<f64> = probs.iter().map(|p| p * scale).collect();
            for (r, &l) in labels.iter().enumerate() {
                d[r * classes + l] -= scale;
            }
            sink.add(*logits, d);
        }
        Op::BinaryCrossEntropy { p, targets } => {
            let pv = tape.value(*p);
            let m = targets.len() as f64;
            let d = pv
                .data()
                .iter()
                .zip(targets)
                .map(|(&p, &y)| {
                    if !(PROB_CLAMP..=1.0 - PROB_CLAMP).contains(&p) {
                        0.0
                    } else {
                        seed * (-y / p + (1.0 - y) / (1.0 - p)) / m
                    }
                })
                .collect();
            sink.add(*p, d);
        }
        Op::NllProb { p, labels } => {
            let pv = tape.value(*p);
            let rows = labels.len();
            let classes = pv.len() / rows;
            let mut d = vec![0.0; pv.len()];
            for (r, &l) in labels.iter().enumerate() {
                let v = pv.data()[r * classes + l];
                if v > PROB_CLAMP {
                    d[r * classes + l] = -seed / (v * rows as f64);
                }
            }
            sink.add(*p, d);
        }
        _ => unreachable!("loss backward called for {}", op.name()),
    }
    Ok(())
}
