use crate::error::{Result, TensorError};
use crate::ops::linalg::gemm;
use crate::tape::{GradSink, Op, Tape, Var};
use crate::tensor::Tensor;

const K: usize = 3;

fn dims4(t: &Tensor) -> Option<[usize; 4]> {
    match t.shape() {
        [n, c, h, w] => Some([*n, *c, *h, *w]),
        _ => None,
    }
}

/// Unfolds 3×3 zero-padded patches into a `(C·9) × (N·H·W)` matrix.
fn im2col(x: &[f64], [n, c, h, w]: [usize; 4]) -> Vec<f64> {
    let hw = h * w;
    let width = n * hw;
    let mut cols = vec![0.0; c * K * K * width];
    for ci in 0..c {
        for ky in 0..K {
            for kx in 0..K {
                let row = (ci * K + ky) * K + kx;
                let dst = &mut cols[row * width..(row + 1) * width];
                for ni in 0..n {
                    let src = &x[(ni * c + ci) * hw..(ni * c + ci + 1) * hw];
                    let dst = &mut dst[ni * hw..(ni + 1) * hw];
                    for y in 0..h {
                        let sy = y as isize + ky as isize - 1;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let sy = sy as usize;
                        for xx in 0..w {
                            let sx = xx as isize + kx as isize - 1;
                            if sx >= 0 && sx < w as isize {
                                dst[y * w + xx] = src[sy * w + sx as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto the image.
fn col2im(cols: &[f64], [n, c, h, w]: [usize; 4]) -> Vec<f64> {
    let hw = h * w;
    let width = n * hw;
    let mut x = vec![0.0; n * c * hw];
    for ci in 0..c {
        for ky in 0..K {
            for kx in 0..K {
                let row = (ci * K + ky) * K + kx;
                let src = &cols[row * width..(row + 1) * width];
                for ni in 0..n {
                    let src = &src[ni * hw..(ni + 1) * hw];
                    let dst = &mut x[(ni * c + ci) * hw..(ni * c + ci + 1) * hw];
                    for y in 0..h {
                        let sy = y as isize + ky as isize - 1;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let sy = sy as usize;
                        for xx in 0..w {
                            let sx = xx as isize + kx as isize - 1;
                            if sx >= 0 && sx < w as isize {
                                dst[sy * w + sx as usize] += src[y * w + xx];
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

impl Tape {
    /// 3×3 cross-correlation, stride 1, zero padding 1.
    ///
    /// `x` is `N×Cin×H×W`, `w` is `Cout×Cin×3×3`; output is `N×Cout×H×W`.
    pub fn conv2d(&mut self, x: Var, w: Var) -> Result<Var> {
        self.check(x)?;
        self.check(w)?;
        let (xv, wv) = (self.value(x), self.value(w));
        let mismatch = || TensorError::ShapeMismatch {
            op: "conv2d",
            left: xv.shape().to_vec(),
            right: wv.shape().to_vec(),
        };
        let xd = dims4(xv).ok_or_else(mismatch)?;
        let wd = dims4(wv).ok_or_else(mismatch)?;
        if wd[1] != xd[1] || wd[2] != K || wd[3] != K {
            return Err(mismatch());
        }
        let [n, cin, h, wid] = xd;
        let cout = wd[0];
        let hw = h * wid;
        let cols = im2col(xv.data(), xd);
        let mut tmp = vec![0.0; cout * n * hw];
        gemm(cout, cin * K * K, n * hw, wv.data(), false, &cols, false, 0.0, &mut tmp);
        let mut out = vec![0.0; n * cout * hw];
        for co in 0..cout {
            for ni in 0..n {
                out[(ni * cout + co) * hw..(ni * cout + co + 1) * hw]
                    .copy_from_slice(&tmp[co * n * hw + ni * hw..co * n * hw + (ni + 1) * hw]);
            }
        }
        let value = Tensor::from_parts(vec![n, cout, h, wid], out);
        self.push(value, Op::Conv2d { x, w, cols })
    }

    /// 2×2 mean pooling with stride 2; odd trailing rows/columns are dropped.
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let xv = self.value(x);
        let [n, c, h, w] = dims4(xv).ok_or_else(|| TensorError::InvalidShape {
            shape: xv.shape().to_vec(),
        })?;
        if h < 2 || w < 2 {
            return Err(TensorError::InvalidShape {
                shape: xv.shape().to_vec(),
            });
        }
        let (oh, ow) = (h / 2, w / 2);
        let src = xv.data();
        let mut out = vec![0.0; n * c * oh * ow];
        for plane in 0..n * c {
            let s = &src[plane * h * w..];
            for y in 0..oh {
                for xx in 0..ow {
                    let (sy, sx) = (2 * y, 2 * xx);
                    out[plane * oh * ow + y * ow + xx] = 0.25
                        * (s[sy * w + sx] + s[sy * w + sx + 1] + s[(sy + 1) * w + sx]
                            + s[(sy + 1) * w + sx + 1]);
                }
            }
        }
        self.push(Tensor::from_parts(vec![n, c, oh, ow], out), Op::AvgPool2 { x })
    }

    /// Spatial mean: `N×C×H×W → N×C`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let xv = self.value(x);
        let [n, c, h, w] = dims4(xv).ok_or_else(|| TensorError::InvalidShape {
            shape: xv.shape().to_vec(),
        })?;
        let hw = h * w;
        let out = xv
            .data()
            .chunks(hw)
            .map(|p| p.iter().sum::<f64>() / hw as f64)
            .collect();
        self.push(Tensor::from_parts(vec![n, c], out), Op::GlobalAvgPool { x })
    }
}

pub(crate) fn backward(
    tape: &Tape,
    op: &Op,
    _out: &Tensor,
    g: &Tensor,
    sink: &mut GradSink,
) -> Result<()> {
    match op {
        Op::Conv2d { x, w, cols } => {
            let (xv, wv) = (tape.value(*x), tape.value(*w));
            let xd = dims4(xv).expect("conv input");
            let [n, cin, h, wid] = xd;
            let cout = wv.shape()[0];
            let hw = h * wid;
            let ck = cin * K * K;
            let gd = g.data();
            let mut gp = vec![0.0; cout * n * hw];
            for co in 0..cout {
                for ni in 0..n {
                    gp[co * n * hw + ni * hw..co * n * hw + (ni + 1) * hw]
                        .copy_from_slice(&gd[(ni * cout + co) * hw..(ni * cout + co + 1) * hw]);
                }
            }
            if sink.wants(*w) {
                let mut dw = vec![0.0; cout * ck];
                gemm(cout, n * hw, ck, &gp, false, cols, true, 0.0, &mut dw);
                sink.add(*w, dw);
            }
            if sink.wants(*x) {
                let mut dcols = vec![0.0; ck * n * hw];
                gemm(ck, cout, n * hw, wv.data(), true, &gp, false, 0.0, &mut dcols);
                sink.add(*x, col2im(&dcols, xd));
            }
        }
        Op::AvgPool2 { x } => {
            let [n, c, h, w] = dims4(tape.value(*x)).expect("pool input");
            let (oh, ow) = (h / 2, w / 2);
            let mut dx = vec![0.0; n * c * h * w];
            for plane in 0..n * c {
                for y in 0..oh {
                    for xx in 0..ow {
                        let v = 0.25 * g.data()[plane * oh * ow + y * ow + xx];
                        let base = plane * h * w;
                        let (sy, sx) = (2 * y, 2 * xx);
                        dx[base + sy * w + sx] += v;
                        dx[base + sy * w + sx + 1] += v;
                        dx[base + (sy + 1) * w + sx] += v;
                        dx[base + (sy + 1) * w + sx + 1] += v;
                    }
                }
            }
            sink.add(*x, dx);
        }
        Op::GlobalAvgPool { x } => {
            let [_, _, h, w] = dims4(tape.value(*x)).expect("pool input");
            let hw = h * w;
            let scale = 1.0 / hw as f64;
            let dx = g
                .data()
                .iter()
                .flat_map(|&v| std::iter::repeat_n(v * scale, hw))
                .collect();
            sink.add(*x, dx);
        }
        _ => unreachable!("conv backward called for {}", op.name()),
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct sliding-window reference.
    fn conv_ref(x: &Tensor, w: &Tensor) -> Vec<f64> {
        let [n, cin, h, wid] = dims4(x).unwrap();
        let cout = w.shape()[0];
        let mut out = vec![0.0; n * cout * h * wid];
        for ni in 0..n {
            for co in 0..cout {
                for y in 0..h as isize {
                    for xx in 0..wid as isize {
                        let mut acc = 0.0;
                        for ci in 0..cin {
                            for ky in 0..3isize {
                                for kx in 0..3isize {
                                    let (sy, sx) = (y + ky - 1, xx + kx - 1);
                                    if sy < 0 || sx < 0 || sy >= h as isize || sx >= wid as isize {
                                        continue;
                                    }
                                    acc += x
                                        .get(&[ni, ci, sy as usize, sx as usize])
                                        .unwrap()
                                        * w.get(&[co, ci, ky as usize, kx as usize]).unwrap();
                                }
                            }
                        }
                        out[((ni * cout + co) * h + y as usize) * wid + xx as usize] = acc;
                    }
                }
            }
        }
        out
    }

    fn delta_kernel() -> Tensor {
        let mut w = Tensor::zeros(&[1, 1, 3, 3]).unwrap();
        w.data_mut()[4] = 1.0;
        w
    }

    #[test]
    fn delta_kernel_is_identity() {
        let mut tape = Tape::new();
        let xt = Tensor::new(&[1, 1, 3, 3], (0..9).map(|v| v as f64).collect()).unwrap();
        let x = tape.constant(xt.clone());
        let w = tape.constant(delta_kernel());
        let y = tape.conv2d(x, w).unwrap();
        assert_eq!(tape.value(y), &xt);
    }

    #[test]
    fn ones_kernel_counts_neighbours() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::ones(&[1, 1, 3, 3]).unwrap());
        let w = tape.constant(Tensor::ones(&[1, 1, 3, 3]).unwrap());
        let y = tape.conv2d(x, w).unwrap();
        assert_eq!(
            tape.value(y).data(),
            &[4., 6., 4., 6., 9., 6., 4., 6., 4.]
        );
        let z = tape.constant(Tensor::zeros(&[1, 1, 3, 3]).unwrap());
        let y = tape.conv2d(x, z).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0; 9]);
    }

    #[test]
    fn matches_sliding_window_reference() {
        let xt = Tensor::new(
            &[2, 3, 4, 5],
            (0..120).map(|v| ((v * 37 % 17) as f64 - 8.0) / 5.0).collect(),
        )
        .unwrap();
        let wt = Tensor::new(
            &[2, 3, 3, 3],
            (0..54).map(|v| ((v * 13 % 11) as f64 - 5.0) / 7.0).collect(),
        )
        .unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(xt.clone());
        let w = tape.constant(wt.clone());
        let y = tape.conv2d(x, w).unwrap();
        for (a, b) in tape.value(y).data().iter().zip(conv_ref(&xt, &wt)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn channel_mismatch_is_an_error() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::ones(&[1, 2, 3, 3]).unwrap());
        let w = tape.constant(Tensor::ones(&[1, 1, 3, 3]).unwrap());
        assert!(matches!(
            tape.conv2d(x, w),
            Err(TensorError::ShapeMismatch { op: "conv2d", .. })
        ));
    }

    #[test]
    fn global_pool_of_constant_map() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[2, 3, 4, 4], 1.5).unwrap());
        let y = tape.global_avg_pool(x).unwrap();
        assert_eq!(tape.value(y).shape(), &[2, 3]);
        assert!(tape.value(y).data().iter().all(|&v| v == 1.5));
    }

    #[test]
    fn avg_pool_halves_extent() {
        let mut tape = Tape::new();
        let x = tape.constant(
            Tensor::new(&[1, 1, 2, 2], vec![1., 2., 3., 6.]).unwrap(),
        );
        let y = tape.avg_pool2(x).unwrap();
        assert_eq!(tape.value(y).data(), &[3.0]);
    }
}
