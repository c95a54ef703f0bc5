use crate::error::{Result, TensorError};
use crate::ops::linalg::gemm;
use crate::tape::{GradSink, Op, Tape, Var};
use crate::tensor::Tensor;

/// `(batch, C, S)` view of `C×H×W` (batch 1) or `N×C×H×W` feature maps.
fn gram_layout(t: &Tensor) -> Option<(usize, usize, usize)> {
    match t.shape() {
        [c, h, w] => Some((1, *c, h * w)),
        [n, c, h, w] => Some((*n, *c, h * w)),
        _ => None,
    }
}

impl Tape {
    /// Gram matrix `m̂ m̂ᵀ` of the `C×S` flattening of a feature map.
    ///
    /// `C×H×W` input gives `C×C`; `N×C×H×W` gives one gram matrix per sample
    /// (`N×C×C`). The result is symmetric by construction: only the upper
    /// triangle is computed and mirrored.
    pub fn gram_matrix(&mut self, m: Var) -> Result<Var> {
        self.check(m)?;
        let mv = self.value(m);
        let (n, c, s) = gram_layout(mv).ok_or_else(|| TensorError::InvalidShape {
            shape: mv.shape().to_vec(),
        })?;
        let mut out = vec![0.0; n * c * c];
        for ni in 0..n {
            let flat = &mv.data()[ni * c * s..(ni + 1) * c * s];
            let g = &mut out[ni * c * c..(ni + 1) * c * c];
            gemm(c, s, c, flat, false, flat, true, 0.0, g);
            for i in 0..c {
                for j in 0..i {
                    g[i * c + j] = g[j * c + i];
                }
            }
        }
        let shape = if mv.rank() == 3 { vec![c, c] } else { vec![n, c, c] };
        self.push(Tensor::from_parts(shape, out), Op::Gram { m })
    }

    /// Pairwise squared Euclidean distances between rows of `M×D` and `P×D`.
    pub fn sq_dist(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (av, bv) = (self.value(a), self.value(b));
        let (m, p, d) = match (av.shape(), bv.shape()) {
            ([m, d], [p, d2]) if d == d2 => (*m, *p, *d),
            _ => {
                return Err(TensorError::ShapeMismatch {
                    op: "sq_dist",
                    left: av.shape().to_vec(),
                    right: bv.shape().to_vec(),
                })
            }
        };
        let mut out = vec![0.0; m * p];
        for i in 0..m {
            let ar = &av.data()[i * d..(i + 1) * d];
            for j in 0..p {
                let br = &bv.data()[j * d..(j + 1) * d];
                out[i * p + j] = ar.iter().zip(br).map(|(x, y)| (x - y) * (x - y)).sum();
            }
        }
        self.push(Tensor::from_parts(vec![m, p], out), Op::SqDist { a, b })
    }
}

pub(crate) fn backward(
    tape: &Tape,
    op: &Op,
    _out: &Tensor,
    g: &Tensor,
    sink: &mut GradSink,
) -> Result<()> {
    match *op {
        Op::Gram { m } => {
            // G = X Xᵀ  ⇒  dX = (dG + dGᵀ) X
            let mv = tape.value(m);
            let (n, c, s) = gram_layout(mv).expect("gram input");
            let mut dm = vec![0.0; mv.len()];
            let mut sym = vec![0.0; c * c];
            for ni in 0..n {
                let gg = &g.data()[ni * c * c..(ni + 1) * c * c];
                for i in 0..c {
                    for j in 0..c {
                        sym[i * c + j] = gg[i * c + j] + gg[j * c + i];
                    }
                }
                let flat = &mv.data()[ni * c * s..(ni + 1) * c * s];
                gemm(c, c, s, &sym, false, flat, false, 0.0, &mut dm[ni * c * s..(ni + 1) * c * s]);
            }
            sink.add(m, dm);
        }
        Op::SqDist { a, b } => {
            let (av, bv) = (tape.value(a), tape.value(b));
            let (m, d) = (av.shape()[0], av.shape()[1]);
            let p = bv.shape()[0];
            let gd = g.data();
            let mut da = vec![0.0; m * d];
            let mut db = vec![0.0; p * d];
            for i in 0..m {
                for j in 0..p {
                    let gij = 2.0 * gd[i * p + j];
                    if gij == 0.0 {
                        continue;
                    }
                    for k in 0..d {
                        let diff = av.data()[i * d + k] - bv.data()[j * d + k];
                        da[i * d + k] += gij * diff;
                        db[j * d + k] -= gij * diff;
                    }
                }
            }
            sink.add(a, da);
            sink.add(b, db);
        }
        _ => unreachable!("gram backward called for {}", op.name()),
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_case() {
        let mut tape = Tape::new();
        let m = tape.constant(Tensor::new(&[2, 1, 2], vec![1., 2., 3., 4.]).unwrap());
        let g = tape.gram_matrix(m).unwrap();
        assert_eq!(tape.value(g).shape(), &[2, 2]);
        assert_eq!(tape.value(g).data(), &[5., 11., 11., 25.]);
    }

    #[test]
    fn zero_map_gives_zero_gram() {
        let mut tape = Tape::new();
        let m = tape.constant(Tensor::zeros(&[3, 2, 2]).unwrap());
        let g = tape.gram_matrix(m).unwrap();
        assert_eq!(tape.value(g).data(), &[0.0; 9]);
    }

    #[test]
    fn batched_gram_has_one_matrix_per_sample() {
        let mut tape = Tape::new();
        let m = tape.constant(
            Tensor::new(&[2, 2, 1, 2], vec![1., 2., 3., 4., 1., 0., 0., 1.]).unwrap(),
        );
        let g = tape.gram_matrix(m).unwrap();
        assert_eq!(tape.value(g).shape(), &[2, 2, 2]);
        assert_eq!(tape.value(g).data(), &[5., 11., 11., 25., 1., 0., 0., 1.]);
    }

    #[test]
    fn sq_dist_small_case() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::matrix(1, 2, vec![0., 0.]).unwrap());
        let b = tape.constant(Tensor::matrix(2, 2, vec![1., 0., 3., 4.]).unwrap());
        let d = tape.sq_dist(a, b).unwrap();
        assert_eq!(tape.value(d).data(), &[1., 25.]);
    }
}
