use crate::error::{Result, TensorError};
use crate::tape::{Activation, GradSink, Op, Tape, Var};
use crate::tensor::{volume, Tensor};

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow for large `x`.
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

impl Tape {
    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        self.check(a)?;
        self.check(b)?;
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(TensorError::ShapeMismatch {
                op,
                left: sa.to_vec(),
                right: sb.to_vec(),
            });
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (av, bv) = (self.value(a), self.value(b));
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::from_parts(av.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.zip_with(a, b, |x, y| x + y);
        self.push(v, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.zip_with(a, b, |x, y| x - y);
        self.push(v, Op::Sub { a, b })
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.zip_with(a, b, |x, y| x * y);
        self.push(v, Op::Mul { a, b })
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        self.check(a)?;
        let v = self.value(a).map(|x| x * factor);
        self.push(v, Op::Scale { a, factor })
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let v = self.value(a).map(|x| x * x);
        self.push(v, Op::Square { a })
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let v = self.value(a).map(f64::exp);
        self.push(v, Op::Exp { a })
    }

    pub fn activation(&mut self, a: Var, kind: Activation) -> Result<Var> {
        self.check(a)?;
        let v = match kind {
            Activation::Relu => self.value(a).map(|x| if x > 0.0 { x } else { 0.0 }),
            Activation::Sigmoid => self.value(a).map(sigmoid),
        };
        self.push(v, Op::Activation { a, kind })
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.activation(a, Activation::Relu)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.activation(a, Activation::Sigmoid)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.check(a)?;
        let v = self.value(a).reshape(shape)?;
        self.push(v, Op::Reshape { a })
    }

    /// Adds a length-`P` bias to every row of an `M×P` matrix.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        self.check(x)?;
        self.check(bias)?;
        let (xv, bv) = (self.value(x), self.value(bias));
        let p = match xv.shape() {
            [_, p] if bv.len() == *p => *p,
            _ => {
                return Err(TensorError::ShapeMismatch {
                    op: "add_row_bias",
                    left: xv.shape().to_vec(),
                    right: bv.shape().to_vec(),
                })
            }
        };
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(p) {
            for (v, b) in row.iter_mut().zip(bv.data()) {
                *v += b;
            }
        }
        let v = Tensor::from_parts(xv.shape().to_vec(), data);
        self.push(v, Op::AddRowBias { x, bias })
    }

    /// Concatenates along the leading axis; trailing extents must agree.
    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (av, bv) = (self.value(a), self.value(b));
        if av.rank() == 0 || av.shape()[1..] != bv.shape()[1..] || av.rank() != bv.rank() {
            return Err(TensorError::ShapeMismatch {
                op: "concat_rows",
                left: av.shape().to_vec(),
                right: bv.shape().to_vec(),
            });
        }
        let mut shape = av.shape().to_vec();
        shape[0] += bv.shape()[0];
        let mut data = Vec::with_capacity(av.len() + bv.len());
        data.extend_from_slice(av.data());
        data.extend_from_slice(bv.data());
        self.push(Tensor::from_parts(shape, data), Op::ConcatRows { a, b })
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, count: usize) -> Result<Var> {
        self.check(a)?;
        let v = self.value(a).slice_rows(start, count)?;
        self.push(v, Op::SliceRows { a, start })
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let s = self.value(a).sum();
        self.push(Tensor::scalar(s), Op::Sum { a })
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let av = self.value(a);
        let s = av.sum() / av.len() as f64;
        self.push(Tensor::scalar(s), Op::Mean { a })
    }
}

pub(crate) fn backward(
    tape: &Tape,
    op: &Op,
    out: &Tensor,
    g: &Tensor,
    sink: &mut GradSink,
) -> Result<()> {
    let gd = g.data();
    match *op {
        Op::Add { a, b } => {
            sink.add(a, gd.to_vec());
            sink.add(b, gd.to_vec());
        }
        Op::Sub { a, b } => {
            sink.add(a, gd.to_vec());
            sink.add(b, gd.iter().map(|v| -v).collect());
        }
        Op::Mul { a, b } => {
            let (av, bv) = (tape.value(a).data(), tape.value(b).data());
            if sink.wants(a) {
                sink.add(a, gd.iter().zip(bv).map(|(g, y)| g * y).collect());
            }
            if sink.wants(b) {
                sink.add(b, gd.iter().zip(av).map(|(g, x)| g * x).collect());
            }
        }
        Op::Scale { a, factor } => sink.add(a, gd.iter().map(|g| g * factor).collect()),
        Op::Square { a } => {
            let av = tape.value(a).data();
            sink.add(a, gd.iter().zip(av).map(|(g, x)| 2.0 * g * x).collect());
        }
        Op::Exp { a } => {
            sink.add(a, gd.iter().zip(out.data()).map(|(g, y)| g * y).collect());
        }
        Op::Activation { a, kind } => {
            let grad = match kind {
                Activation::Relu => gd
                    .iter()
                    .zip(tape.value(a).data())
                    .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                    .collect(),
                Activation::Sigmoid => gd
                    .iter()
                    .zip(out.data())
                    .map(|(g, y)| g * y * (1.0 - y))
                    .collect(),
            };
            sink.add(a, grad);
        }
        Op::Reshape { a } => sink.add(a, gd.to_vec()),
        Op::AddRowBias { x, bias } => {
            sink.add(x, gd.to_vec());
            if sink.wants(bias) {
                let p = tape.value(bias).len();
                let mut db = vec![0.0; p];
                for row in gd.chunks(p) {
                    for (d, v) in db.iter_mut().zip(row) {
                        *d += v;
                    }
                }
                sink.add(bias, db);
            }
        }
        Op::ConcatRows { a, b } => {
            let n = tape.value(a).len();
            sink.add(a, gd[..n].to_vec());
            sink.add(b, gd[n..].to_vec());
        }
        Op::SliceRows { a, start } => {
            let av = tape.value(a);
            let row = av.len() / av.shape()[0];
            let mut grad = vec![0.0; av.len()];
            grad[start * row..start * row + gd.len()].copy_from_slice(gd);
            sink.add(a, grad);
        }
        Op::Sum { a } => {
            let n = volume(tape.shape(a));
            sink.add(a, vec![gd[0]; n]);
        }
        Op::Mean { a } => {
            let n = volume(tape.shape(a));
            sink.add(a, vec![gd[0] / n as f64; n]);
        }
        _ => unreachable!("elementwise backward called for {}", op.name()),
    }
    Ok(())
}
