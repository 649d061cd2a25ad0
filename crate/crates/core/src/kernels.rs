//! Numeric kernels behind the autodiff tape.
//!
//! Each kernel has an explicit-[`Exec`] form (`*_with`) used by the
//! benches and the equivalence tests, and a default form that picks the
//! strategy from the workload size.

use crate::par::{self, Exec};
use crate::tensor::Mat;

/// Rows per partial sum in batch reductions. Fixed so that results do
/// not depend on the worker count.
const REDUCE_CHUNK: usize = 8;

#[inline]
fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `a · b` for `a: r×k`, `b: k×c`.
pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    matmul_with(par::auto(a.rows() * a.cols() * b.cols()), a, b)
}

pub fn matmul_with(exec: Exec, a: &Mat, b: &Mat) -> Mat {
    assert_eq!(a.cols(), b.rows(), "matmul: inner dimension mismatch");
    let (k, c) = b.shape();
    let mut out = Mat::zeros(a.rows(), c);
    par::for_each_row_mut(exec, out.data_mut(), c, |r, row| {
        let ar = a.row(r);
        for kk in 0..k {
            axpy(row, ar[kk], b.row(kk));
        }
    });
    out
}

/// `aᵀ · g` for `a: r×k`, `g: r×c`; the reduction runs over rows in order.
pub fn matmul_at_b(a: &Mat, g: &Mat) -> Mat {
    matmul_at_b_with(par::auto(a.rows() * a.cols() * g.cols()), a, g)
}

pub fn matmul_at_b_with(exec: Exec, a: &Mat, g: &Mat) -> Mat {
    assert_eq!(a.rows(), g.rows(), "matmul_at_b: row mismatch");
    let k = a.cols();
    let c = g.cols();
    let mut out = Mat::zeros(k, c);
    par::for_each_row_mut(exec, out.data_mut(), c, |i, row| {
        for r in 0..a.rows() {
            axpy(row, a.get(r, i), g.row(r));
        }
    });
    out
}

/// `g · bᵀ` for `g: r×c`, `b: k×c`.
pub fn matmul_a_bt(g: &Mat, b: &Mat) -> Mat {
    matmul_a_bt_with(par::auto(g.rows() * g.cols() * b.rows()), g, b)
}

pub fn matmul_a_bt_with(exec: Exec, g: &Mat, b: &Mat) -> Mat {
    assert_eq!(g.cols(), b.cols(), "matmul_a_bt: column mismatch");
    let k = b.rows();
    let mut out = Mat::zeros(g.rows(), k);
    par::for_each_row_mut(exec, out.data_mut(), k, |r, row| {
        let gr = g.row(r);
        for (i, o) in row.iter_mut().enumerate() {
            *o = dot(gr, b.row(i));
        }
    });
    out
}

/// Sums `n` per-chunk partial results produced by `f(chunk_start, chunk_len)`.
fn chunked_sum<F>(exec: Exec, rows: usize, len: usize, f: F) -> Vec<f64>
where
    F: Fn(usize, usize) -> Vec<f64> + Sync + Send,
{
    let chunks = rows.div_ceil(REDUCE_CHUNK);
    let parts = par::map_indexed(exec, chunks, |c| {
        let start = c * REDUCE_CHUNK;
        f(start, REDUCE_CHUNK.min(rows - start))
    });
    let mut total = vec![0.0; len];
    for p in parts {
        for (t, v) in total.iter_mut().zip(&p) {
            *t += v;
        }
    }
    total
}

/// Geometry of a 3×3, stride-1, zero-padded convolution over `h×w` maps.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvShape {
    pub cin: usize,
    pub cout: usize,
    pub h: usize,
    pub w: usize,
}

impl ConvShape {
    pub fn weight_len(&self) -> usize {
        self.cout * self.cin * 9
    }

    fn hw(&self) -> usize {
        self.h * self.w
    }

    /// Valid output ranges `(y0, y1, x0, x1)` for kernel offset `(ky, kx)`.
    #[inline]
    fn window(&self, ky: usize, kx: usize) -> (usize, usize, usize, usize) {
        let y0 = usize::from(ky == 0);
        let y1 = if ky == 2 { self.h - 1 } else { self.h };
        let x0 = usize::from(kx == 0);
        let x1 = if kx == 2 { self.w - 1 } else { self.w };
        (y0, y1, x0, x1)
    }
}

pub fn conv3x3(x: &Mat, weight: &[f64], bias: &[f64], s: ConvShape) -> Mat {
    conv3x3_with(par::auto(x.rows() * s.hw() * s.weight_len()), x, weight, bias, s)
}

pub fn conv3x3_with(exec: Exec, x: &Mat, weight: &[f64], bias: &[f64], s: ConvShape) -> Mat {
    assert_eq!(x.cols(), s.cin * s.hw(), "conv3x3: input width mismatch");
    assert_eq!(weight.len(), s.weight_len(), "conv3x3: weight length mismatch");
    assert_eq!(bias.len(), s.cout, "conv3x3: bias length mismatch");
    let hw = s.hw();
    let mut out = Mat::zeros(x.rows(), s.cout * hw);
    par::for_each_row_mut(exec, out.data_mut(), s.cout * hw, |b, row| {
        let xin = x.row(b);
        for co in 0..s.cout {
            let oc = &mut row[co * hw..(co + 1) * hw];
            oc.fill(bias[co]);
            for ci in 0..s.cin {
                let ic = &xin[ci * hw..(ci + 1) * hw];
                for ky in 0..3 {
                    for kx in 0..3 {
                        let wv = weight[((co * s.cin + ci) * 3 + ky) * 3 + kx];
                        let (y0, y1, x0, x1) = s.window(ky, kx);
                        for y in y0..y1 {
                            let src = (y + ky - 1) * s.w + x0 + kx - 1;
                            axpy(&mut oc[y * s.w + x0..y * s.w + x1], wv, &ic[src..src + x1 - x0]);
                        }
                    }
                }
            }
        }
    });
    out
}

/// Gradient with respect to the convolution input.
pub fn conv3x3_grad_input(g: &Mat, weight: &[f64], s: ConvShape) -> Mat {
    let hw = s.hw();
    let exec = par::auto(g.rows() * hw * s.weight_len());
    let mut dx = Mat::zeros(g.rows(), s.cin * hw);
    par::for_each_row_mut(exec, dx.data_mut(), s.cin * hw, |b, row| {
        let gr = g.row(b);
        for ci in 0..s.cin {
            let dc = &mut row[ci * hw..(ci + 1) * hw];
            for co in 0..s.cout {
                let gc = &gr[co * hw..(co + 1) * hw];
                for ky in 0..3 {
                    for kx in 0..3 {
                        let wv = weight[((co * s.cin + ci) * 3 + ky) * 3 + kx];
                        let (y0, y1, x0, x1) = s.window(ky, kx);
                        for y in y0..y1 {
                            let dst = (y + ky - 1) * s.w + x0 + kx - 1;
                            axpy(&mut dc[dst..dst + x1 - x0], wv, &gc[y * s.w + x0..y * s.w + x1]);
                        }
                    }
                }
            }
        }
    });
    dx
}

/// Gradients with respect to the convolution weight and bias.
pub fn conv3x3_grad_params(x: &Mat, g: &Mat, s: ConvShape) -> (Vec<f64>, Vec<f64>) {
    let hw = s.hw();
    let exec = par::auto(g.rows() * hw * s.weight_len());
    let wl = s.weight_len();
    let total = chunked_sum(exec, x.rows(), wl + s.cout, |start, n| {
        let mut acc = vec![0.0; wl + s.cout];
        for b in start..start + n {
            let xin = x.row(b);
            let gr = g.row(b);
            for co in 0..s.cout {
                let gc = &gr[co * hw..(co + 1) * hw];
                acc[wl + co] += gc.iter().sum::<f64>();
                for ci in 0..s.cin {
                    let ic = &xin[ci * hw..(ci + 1) * hw];
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let (y0, y1, x0, x1) = s.window(ky, kx);
                            let mut sum = 0.0;
                            for y in y0..y1 {
                                let src = (y + ky - 1) * s.w + x0 + kx - 1;
                                sum += dot(&gc[y * s.w + x0..y * s.w + x1], &ic[src..src + x1 - x0]);
                            }
                            acc[((co * s.cin + ci) * 3 + ky) * 3 + kx] += sum;
                        }
                    }
                }
            }
        }
        acc
    });
    let (dw, db) = total.split_at(wl);
    (dw.to_vec(), db.to_vec())
}

/// 2×2 average pooling of `c` maps of size `h×w` (both even).
pub fn avg_pool2(x: &Mat, c: usize, h: usize, w: usize) -> Mat {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Mat::zeros(x.rows(), c * oh * ow);
    for b in 0..x.rows() {
        let xin = x.row(b);
        let o = out.row_mut(b);
        for ch in 0..c {
            for y in 0..oh {
                for xx in 0..ow {
                    let base = ch * h * w + 2 * y * w + 2 * xx;
                    o[ch * oh * ow + y * ow + xx] =
                        0.25 * (xin[base] + xin[base + 1] + xin[base + w] + xin[base + w + 1]);
                }
            }
        }
    }
    out
}

pub fn avg_pool2_grad(g: &Mat, c: usize, h: usize, w: usize) -> Mat {
    let (oh, ow) = (h / 2, w / 2);
    let mut dx = Mat::zeros(g.rows(), c * h * w);
    for b in 0..g.rows() {
        let gr = g.row(b);
        let d = dx.row_mut(b);
        for ch in 0..c {
            for y in 0..oh {
                for xx in 0..ow {
                    let v = 0.25 * gr[ch * oh * ow + y * ow + xx];
                    let base = ch * h * w + 2 * y * w + 2 * xx;
                    d[base] = v;
                    d[base + 1] = v;
                    d[base + w] = v;
                    d[base + w + 1] = v;
                }
            }
        }
    }
    dx
}

/// Nearest-neighbour 2× upsampling of `c` maps of size `h×w`.
pub fn upsample2(x: &Mat, c: usize, h: usize, w: usize) -> Mat {
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = Mat::zeros(x.rows(), c * oh * ow);
    for b in 0..x.rows() {
        let xin = x.row(b);
        let o = out.row_mut(b);
        for ch in 0..c {
            for y in 0..oh {
                for xx in 0..ow {
                    o[ch * oh * ow + y * ow + xx] = xin[ch * h * w + (y / 2) * w + xx / 2];
                }
            }
        }
    }
    out
}

pub fn upsample2_grad(g: &Mat, c: usize, h: usize, w: usize) -> Mat {
    let (oh, ow) = (2 * h, 2 * w);
    let mut dx = Mat::zeros(g.rows(), c * h * w);
    for b in 0..g.rows() {
        let gr = g.row(b);
        let d = dx.row_mut(b);
        for ch in 0..c {
            for y in 0..oh {
                for xx in 0..ow {
                    d[ch * h * w + (y / 2) * w + xx / 2] += gr[ch * oh * ow + y * ow + xx];
                }
            }
        }
    }
    dx
}

/// Shape of a per-sample linear layer: each batch row carries its own
/// `din×dout` weight matrix applied to `n` input vectors.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BatchedLinearShape {
    pub n: usize,
    pub din: usize,
    pub dout: usize,
}

/// `x` has either one row (shared input) or one row per weight row.
pub fn batched_linear(x: &Mat, w: &Mat, bias: &Mat, s: BatchedLinearShape) -> Mat {
    assert_eq!(x.cols(), s.n * s.din, "batched_linear: input width mismatch");
    assert_eq!(w.cols(), s.din * s.dout, "batched_linear: weight width mismatch");
    assert_eq!(bias.cols(), s.dout, "batched_linear: bias width mismatch");
    assert!(x.rows() == 1 || x.rows() == w.rows(), "batched_linear: batch mismatch");
    let exec = par::auto(w.rows() * s.n * s.din * s.dout);
    let mut out = Mat::zeros(w.rows(), s.n * s.dout);
    par::for_each_row_mut(exec, out.data_mut(), s.n * s.dout, |b, row| {
        let xr = x.row(if x.rows() == 1 { 0 } else { b });
        let wr = w.row(b);
        let br = bias.row(b);
        for p in 0..s.n {
            let o = &mut row[p * s.dout..(p + 1) * s.dout];
            o.copy_from_slice(br);
            for i in 0..s.din {
                axpy(o, xr[p * s.din + i], &wr[i * s.dout..(i + 1) * s.dout]);
            }
        }
    });
    out
}

/// Returns `(dx, dw, dbias)`; `dx` is reduced over the batch when the
/// input was shared.
pub fn batched_linear_grad(x: &Mat, w: &Mat, g: &Mat, s: BatchedLinearShape) -> (Mat, Mat, Mat) {
    let exec = par::auto(w.rows() * s.n * s.din * s.dout);
    let rows = w.rows();
    let mut dx_full = Mat::zeros(rows, s.n * s.din);
    par::for_each_row_mut(exec, dx_full.data_mut(), s.n * s.din, |b, row| {
        let wr = w.row(b);
        let gr = g.row(b);
        for p in 0..s.n {
            let gp = &gr[p * s.dout..(p + 1) * s.dout];
            for i in 0..s.din {
                row[p * s.din + i] = dot(gp, &wr[i * s.dout..(i + 1) * s.dout]);
            }
        }
    });
    let mut dw = Mat::zeros(rows, s.din * s.dout);
    par::for_each_row_mut(exec, dw.data_mut(), s.din * s.dout, |b, row| {
        let xr = x.row(if x.rows() == 1 { 0 } else { b });
        let gr = g.row(b);
        for p in 0..s.n {
            let gp = &gr[p * s.dout..(p + 1) * s.dout];
            for i in 0..s.din {
                axpy(&mut row[i * s.dout..(i + 1) * s.dout], xr[p * s.din + i], gp);
            }
        }
    });
    let mut db = Mat::zeros(rows, s.dout);
    for b in 0..rows {
        let gr = g.row(b);
        let d = db.row_mut(b);
        for p in 0..s.n {
            for (dj, gj) in d.iter_mut().zip(&gr[p * s.dout..(p + 1) * s.dout]) {
                *dj += gj;
            }
        }
    }
    let dx = if x.rows() == 1 && rows != 1 {
        let mut acc = Mat::zeros(1, s.n * s.din);
        for b in 0..rows {
            for (a, v) in acc.data_mut().iter_mut().zip(dx_full.row(b)) {
                *a += v;
            }
        }
        acc
    } else {
        dx_full
    };
    (dx, dw, db)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn naive_matmul(a: &Mat, b: &Mat) -> Mat {
        let mut out = Mat::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut s = 0.0;
                for k in 0..a.cols() {
                    s += a.get(i, k) * b.get(k, j);
                }
                out.set(i, j, s);
            }
        }
        out
    }

    fn mat_strategy(r: usize, c: usize) -> impl Strategy<Value = Mat> {
        proptest::collection::vec(-3.0f64..3.0, r * c).prop_map(move |v| Mat::from_vec(r, c, v))
    }

    proptest! {
        #[test]
        fn matmul_matches_naive_and_modes_agree(a in mat_strategy(7, 5), b in mat_strategy(5, 4)) {
            let seq = matmul_with(Exec::Sequential, &a, &b);
            prop_assert!(seq.max_abs_diff(&naive_matmul(&a, &b)) < 1e-12);
            let par = matmul_with(Exec::default(), &a, &b);
            prop_assert_eq!(&seq, &par);
            let at = matmul_at_b_with(Exec::default(), &a, &naive_matmul(&a, &b));
            prop_assert!(at.max_abs_diff(&naive_matmul(&a.transpose(), &naive_matmul(&a, &b))) < 1e-10);
            let abt = matmul_a_bt_with(Exec::default(), &a, &a);
            prop_assert!(abt.max_abs_diff(&naive_matmul(&a, &a.transpose())) < 1e-12);
        }
    }

    #[test]
    fn conv_identity_kernel_copies_input() {
        let s = ConvShape { cin: 1, cout: 1, h: 4, w: 5 };
        let mut w = vec![0.0; 9];
        w[4] = 1.0;
        let x = Mat::from_vec(2, 20, (0..40).map(f64::from).collect());
        let y = conv3x3(&x, &w, &[0.0], s);
        assert_eq!(y, x);
    }

    #[test]
    fn conv_shift_kernel_pads_with_zero() {
        let s = ConvShape { cin: 1, cout: 1, h: 3, w: 3 };
        // out[y][x] = in[y][x-1]
        let mut w = vec![0.0; 9];
        w[3] = 1.0;
        let x = Mat::from_vec(1, 9, (1..=9).map(f64::from).collect());
        let y = conv3x3(&x, &w, &[0.5], s);
        assert_eq!(y.data(), &[0.5, 1.5, 2.5, 0.5, 4.5, 5.5, 0.5, 7.5, 8.5]);
    }

    #[test]
    fn pool_and_upsample_are_adjoint_up_to_scale() {
        let x = Mat::from_vec(1, 2 * 16, (0..32).map(|v| f64::from(v).sin()).collect());
        let y = Mat::from_vec(1, 2 * 4, (0..8).map(|v| f64::from(v).cos()).collect());
        let lhs: f64 = avg_pool2(&x, 2, 4, 4).data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = upsample2(&y, 2, 2, 2).data().iter().zip(x.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - 0.25 * rhs).abs() < 1e-12);
    }
}
