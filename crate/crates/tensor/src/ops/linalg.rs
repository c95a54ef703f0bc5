use crate::error::{Result, TensorError};
use crate::tape::{GradSink, Op, Tape, Var};
use crate::tensor::Tensor;

/// `c = op(a) · op(b) + beta · c` on row-major buffers.
///
/// `a` is stored as `m×k` (or `k×m` when `trans_a`), `b` as `k×n` (or `n×k`
/// when `trans_b`), `c` as `m×n`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the strides above address exactly the asserted buffer sizes and
    // `c` does not alias `a` or `b` (distinct borrows).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn dims2(t: &Tensor) -> Option<(usize, usize)> {
    match t.shape() {
        [r, c] => Some((*r, *c)),
        _ => None,
    }
}

/// LU factorization with partial pivoting of a square row-major matrix.
struct Lu {
    n: usize,
    lu: Vec<f64>,
    perm: Vec<usize>,
}

impl Lu {
    fn factor(a: &[f64], n: usize) -> Result<Lu> {
        let mut lu = a.to_vec();
        let mut perm: Vec<usize> = (0..n).collect();
        let scale = a.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1.0);
        for col in 0..n {
            let pivot = (col..n)
                .max_by(|&i, &j| lu[i * n + col].abs().total_cmp(&lu[j * n + col].abs()))
                .unwrap_or(col);
            if lu[pivot * n + col].abs() <= 1e-14 * scale {
                return Err(TensorError::Singular);
            }
            if pivot != col {
                for j in 0..n {
                    lu.swap(col * n + j, pivot * n + j);
                }
                perm.swap(col, pivot);
            }
            let d = lu[col * n + col];
            for row in col + 1..n {
                let f = lu[row * n + col] / d;
                lu[row * n + col] = f;
                if f != 0.0 {
                    for j in col + 1..n {
                        lu[row * n + j] -= f * lu[col * n + j];
                    }
                }
            }
        }
        Ok(Lu { n, lu, perm })
    }

    /// Solves `A X = B` for `B` with `m` columns.
    fn solve(&self, b: &[f64], m: usize) -> Vec<f64> {
        let n = self.n;
        let mut x = vec![0.0; n * m];
        for (i, &p) in self.perm.iter().enumerate() {
            x[i * m..(i + 1) * m].copy_from_slice(&b[p * m..(p + 1) * m]);
        }
        for i in 0..n {
            for k in 0..i {
                let f = self.lu[i * n + k];
                if f != 0.0 {
                    for j in 0..m {
                        x[i * m + j] -= f * x[k * m + j];
                    }
                }
            }
        }
        for i in (0..n).rev() {
            for k in i + 1..n {
                let f = self.lu[i * n + k];
                if f != 0.0 {
                    for j in 0..m {
                        x[i * m + j] -= f * x[k * m + j];
                    }
                }
            }
            let d = self.lu[i * n + i];
            for j in 0..m {
                x[i * m + j] /= d;
            }
        }
        x
    }
}

fn transpose_data(data: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = data[i * cols + j];
        }
    }
    out
}

/// Solves `A X = B` for square `A` (`n×n`) and `B` (`n×m`).
pub fn solve(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (n, n2) = dims2(a).ok_or_else(|| mismatch("solve", a, b))?;
    let (bn, m) = dims2(b).ok_or_else(|| mismatch("solve", a, b))?;
    if n != n2 || bn != n {
        return Err(mismatch("solve", a, b));
    }
    let lu = Lu::factor(a.data(), n)?;
    Ok(Tensor::from_parts(vec![n, m], lu.solve(b.data(), m)))
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

impl Tape {
    /// Matrix product of `M×K` and `K×P` operands.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (av, bv) = (self.value(a), self.value(b));
        let ((m, k), (k2, p)) = match (dims2(av), dims2(bv)) {
            (Some(x), Some(y)) => (x, y),
            _ => return Err(mismatch("matmul", av, bv)),
        };
        if k != k2 {
            return Err(mismatch("matmul", av, bv));
        }
        let mut out = vec![0.0; m * p];
        gemm(m, k, p, av.data(), false, bv.data(), false, 0.0, &mut out);
        self.push(Tensor::from_parts(vec![m, p], out), Op::MatMul { a, b })
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let av = self.value(a);
        let (r, c) = dims2(av).ok_or_else(|| TensorError::InvalidShape {
            shape: av.shape().to_vec(),
        })?;
        let out = transpose_data(av.data(), r, c);
        self.push(Tensor::from_parts(vec![c, r], out), Op::Transpose { a })
    }

    /// Solution `X` of `A X = B`, differentiable in both `A` and `B`.
    pub fn solve(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let x = solve(self.value(a), self.value(b))?;
        self.push(x, Op::Solve { a, b })
    }
}

pub(crate) fn backward(
    tape: &Tape,
    op: &Op,
    out: &Tensor,
    g: &Tensor,
    sink: &mut GradSink,
) -> Result<()> {
    match *op {
        Op::MatMul { a, b } => {
            let (av, bv) = (tape.value(a), tape.value(b));
            let (m, k) = dims2(av).expect("matmul operand");
            let p = bv.shape()[1];
            if sink.wants(a) {
                let mut da = vec![0.0; m * k];
                gemm(m, p, k, g.data(), false, bv.data(), true, 0.0, &mut da);
                sink.add(a, da);
            }
            if sink.wants(b) {
                let mut db = vec![0.0; k * p];
                gemm(k, m, p, av.data(), true, g.data(), false, 0.0, &mut db);
                sink.add(b, db);
            }
        }
        Op::Transpose { a } => {
            let (r, c) = dims2(tape.value(a)).expect("transpose operand");
            sink.add(a, transpose_data(g.data(), c, r));
        }
        Op::Solve { a, b } => {
            // X = A⁻¹B: dB = A⁻ᵀ G, dA = -dB Xᵀ.
            let av = tape.value(a);
            let n = av.shape()[0];
            let m = out.shape()[1];
            let at = transpose_data(av.data(), n, n);
            let lu = Lu::factor(&at, n)?;
            let db = lu.solve(g.data(), m);
            if sink.wants(a) {
                let mut da = vec![0.0; n * n];
                gemm(n, m, n, &db, false, out.data(), true, 0.0, &mut da);
                da.iter_mut().for_each(|v| *v = -*v);
                sink.add(a, da);
            }
            sink.add(b, db);
        }
        _ => unreachable!("linalg backward called for {}", op.name()),
    }
    Ok(())
}
