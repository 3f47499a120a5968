//! Strided 2-D convolution and transposed convolution via im2col + GEMM.
//!
//! Layouts: activations `(B, C, H, W)`, conv weights `(OC, C, k, k)`,
//! transposed-conv weights `(C, OC, k, k)`, channel biases `(OC)`.

use ndarray::parallel::prelude::*;
use ndarray::{Array2, ArrayView2, Axis, Ix1, Ix2, Ix4, IxDyn};

use crate::linalg::matmul;
use crate::tape::{Tape, Value, Var};

/// Spatial output size of a convolution along one axis.
pub fn conv2d_output_size(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - kernel) / stride + 1
}

/// Spatial output size of a transposed convolution along one axis.
pub fn conv_transpose2d_output_size(
    input: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    output_pad: usize,
) -> usize {
    stride * (input - 1) + kernel - 2 * pad + output_pad
}

#[derive(Clone, Copy)]
struct Geom {
    b: usize,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    grid_h: usize,
    grid_w: usize,
}

/// Gather k×k patches at each grid position into rows of `(B·gh·gw, C·k·k)`.
fn im2col(x: &Value, k: usize, stride: usize, pad: usize) -> Array2<f64> {
    let xv = x.view().into_dimensionality::<Ix4>().expect("im2col: rank 4");
    let (b, c, h, w) = xv.dim();
    let gh = conv2d_output_size(h, k, stride, pad);
    let gw = conv2d_output_size(w, k, stride, pad);
    let mut cols = Array2::<f64>::zeros((b * gh * gw, c * k * k));
    cols.axis_chunks_iter_mut(Axis(0), gh * gw)
        .into_par_iter()
        .enumerate()
        .for_each(|(bi, mut rows)| {
            let img = xv.index_axis(Axis(0), bi);
            for gy in 0..gh {
                for gx in 0..gw {
                    let mut row = rows.row_mut(gy * gw + gx);
                    for ci in 0..c {
                        for ky in 0..k {
                            let iy = (gy * stride + ky) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..k {
                                let ix = (gx * stride + kx) as isize - pad as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                row[(ci * k + ky) * k + kx] =
                                    img[[ci, iy as usize, ix as usize]];
                            }
                        }
                    }
                }
            }
        });
    cols
}

/// Scatter-add rows of `(B·gh·gw, C·k·k)` back into an image `(B,C,H,W)`.
fn col2im(cols: ArrayView2<'_, f64>, g: Geom) -> Value {
    let mut out = Value::zeros(IxDyn(&[g.b, g.c, g.h, g.w]));
    out.axis_chunks_iter_mut(Axis(0), 1)
        .into_par_iter()
        .enumerate()
        .for_each(|(bi, mut img)| {
            let mut img = img.index_axis_mut(Axis(0), 0);
            for gy in 0..g.grid_h {
                for gx in 0..g.grid_w {
                    let row = cols.row(bi * g.grid_h * g.grid_w + gy * g.grid_w + gx);
                    for ci in 0..g.c {
                        for ky in 0..g.k {
                            let iy = (gy * g.stride + ky) as isize - g.pad as isize;
                            if iy < 0 || iy >= g.h as isize {
                                continue;
                            }
                            for kx in 0..g.k {
                                let ix = (gx * g.stride + kx) as isize - g.pad as isize;
                                if ix < 0 || ix >= g.w as isize {
                                    continue;
                                }
                                img[[ci, iy as usize, ix as usize]] +=
                                    row[(ci * g.k + ky) * g.k + kx];
                            }
                        }
                    }
                }
            }
        });
    out
}

/// `(B,C,H,W)` to rows `(B·H·W, C)`.
fn nchw_to_rows(x: &Value) -> Array2<f64> {
    let xv = x.view().into_dimensionality::<Ix4>().expect("rank 4");
    let (b, c, h, w) = xv.dim();
    let mut rows = Array2::<f64>::zeros((b * h * w, c));
    for bi in 0..b {
        for ci in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    rows[[(bi * h + y) * w + xx, ci]] = xv[[bi, ci, y, xx]];
                }
            }
        }
    }
    rows
}

/// Rows `(B·H·W, C)` to `(B,C,H,W)`.
fn rows_to_nchw(rows: ArrayView2<'_, f64>, b: usize, c: usize, h: usize, w: usize) -> Value {
    let mut out = Value::zeros(IxDyn(&[b, c, h, w]));
    for bi in 0..b {
        for ci in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    out[[bi, ci, y, xx]] = rows[[(bi * h + y) * w + xx, ci]];
                }
            }
        }
    }
    out
}

fn as2(v: &Value) -> ArrayView2<'_, f64> {
    v.view().into_dimensionality::<Ix2>().expect("rank 2")
}

impl Tape {
    /// Strided convolution with channel bias: `x (B,C,H,W)`, `w (OC,C,k,k)`,
    /// `bias (OC)` -> `(B,OC,OH,OW)`.
    pub fn conv2d(&mut self, x: Var, w: Var, bias: Var, stride: usize, pad: usize) -> Var {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        assert_eq!(xs.len(), 4, "conv2d: input must be (B,C,H,W)");
        assert_eq!(ws.len(), 4, "conv2d: weight must be (OC,C,k,k)");
        assert_eq!(xs[1], ws[1], "conv2d: channel mismatch");
        assert_eq!(ws[2], ws[3], "conv2d: kernel must be square");
        let (b, c, h, wdt) = (xs[0], xs[1], xs[2], xs[3]);
        let (oc, k) = (ws[0], ws[2]);
        let oh = conv2d_output_size(h, k, stride, pad);
        let ow = conv2d_output_size(wdt, k, stride, pad);

        let cols = im2col(self.value(x), k, stride, pad); // (B·OH·OW, C·k·k)
        let wmat = crate::ops::reshape_val(self.value(w), &[oc, c * k * k]);
        let mut out_rows = matmul(cols.view(), as2(&wmat).t()); // (R, OC)
        let bv = self
            .value(bias)
            .view()
            .into_dimensionality::<Ix1>()
            .expect("conv2d: bias must be rank 1");
        assert_eq!(bv.len(), oc, "conv2d: bias length mismatch");
        out_rows += &bv;
        let out = rows_to_nchw(out_rows.view(), b, oc, oh, ow);

        let geom = Geom {
            b,
            c,
            h,
            w: wdt,
            k,
            stride,
            pad,
            grid_h: oh,
            grid_w: ow,
        };
        let (nx, nw, nb) = (
            self.needs_grad(x),
            self.needs_grad(w),
            self.needs_grad(bias),
        );
        let needs = nx || nw || nb;
        let cached_cols = if needs && (nw || nx) { Some(cols) } else { None };
        self.push(
            out,
            needs,
            Some(Box::new(move |g, vals| {
                let g_rows = nchw_to_rows(g); // (R, OC)
                let mut contribs = Vec::new();
                if nb {
                    contribs.push((bias.0, g_rows.sum_axis(Axis(0)).into_dyn()));
                }
                if nw {
                    let cols = cached_cols.as_ref().unwrap();
                    let gw = matmul(g_rows.view().t(), cols.view()); // (OC, C·k·k)
                    contribs.push((w.0, crate::ops::reshape_val(&gw.into_dyn(), &[oc, c, k, k])));
                }
                if nx {
                    let wmat = crate::ops::reshape_val(&vals[w.0 as usize], &[oc, c * k * k]);
                    let g_cols = matmul(g_rows.view(), as2(&wmat)); // (R, C·k·k)
                    contribs.push((x.0, col2im(g_cols.view(), geom)));
                }
                contribs
            })),
        )
    }

    /// Transposed convolution with channel bias: `x (B,C,H,W)`,
    /// `w (C,OC,k,k)`, `bias (OC)` -> `(B,OC,OH,OW)` where
    /// `OH = stride·(H-1) + k - 2·pad + output_pad`.
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        bias: Var,
        stride: usize,
        pad: usize,
        output_pad: usize,
    ) -> Var {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        assert_eq!(xs.len(), 4, "conv_transpose2d: input must be (B,C,H,W)");
        assert_eq!(ws.len(), 4, "conv_transpose2d: weight must be (C,OC,k,k)");
        assert_eq!(xs[1], ws[0], "conv_transpose2d: channel mismatch");
        assert_eq!(ws[2], ws[3], "conv_transpose2d: kernel must be square");
        assert!(output_pad < stride, "conv_transpose2d: output_pad < stride");
        let (b, c, h, wdt) = (xs[0], xs[1], xs[2], xs[3]);
        let (oc, k) = (ws[1], ws[2]);
        let oh = conv_transpose2d_output_size(h, k, stride, pad, output_pad);
        let ow = conv_transpose2d_output_size(wdt, k, stride, pad, output_pad);

        let x_rows = nchw_to_rows(self.value(x)); // (B·H·W, C)
        let wmat = crate::ops::reshape_val(self.value(w), &[c, oc * k * k]);
        let patches = matmul(x_rows.view(), as2(&wmat)); // (B·H·W, OC·k·k)
        let geom = Geom {
            b,
            c: oc,
            h: oh,
            w: ow,
            k,
            stride,
            pad,
            grid_h: h,
            grid_w: wdt,
        };
        let mut out = col2im(patches.view(), geom);
        let bv = self
            .value(bias)
            .view()
            .into_dimensionality::<Ix1>()
            .expect("conv_transpose2d: bias must be rank 1");
        assert_eq!(bv.len(), oc, "conv_transpose2d: bias length mismatch");
        for bi in 0..b {
            for ci in 0..oc {
                out.slice_mut(ndarray::s![bi, ci, .., ..]).mapv_inplace({
                    let add = bv[ci];
                    move |v| v + add
                });
            }
        }

        let (nx, nw, nb) = (
            self.needs_grad(x),
            self.needs_grad(w),
            self.needs_grad(bias),
        );
        let needs = nx || nw || nb;
        let cached_x_rows = if needs && nw { Some(x_rows) } else { None };
        self.push(
            out,
            needs,
            Some(Box::new(move |g, vals| {
                let mut contribs = Vec::new();
                if nb {
                    let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
                    let gb = g4.sum_axis(Axis(3)).sum_axis(Axis(2)).sum_axis(Axis(0));
                    contribs.push((bias.0, gb.into_dyn()));
                }
                if nx || nw {
                    let g_patches = im2col(g, k, stride, pad); // (B·H·W, OC·k·k)
                    debug_assert_eq!(g_patches.nrows(), b * h * wdt);
                    if nx {
                        let wmat = crate::ops::reshape_val(&vals[w.0 as usize], &[c, oc * k * k]);
                        let gx_rows = matmul(g_patches.view(), as2(&wmat).t()); // (B·H·W, C)
                        contribs.push((x.0, rows_to_nchw(gx_rows.view(), b, c, h, wdt)));
                    }
                    if nw {
                        let x_rows = cached_x_rows.as_ref().unwrap();
                        let gw = matmul(x_rows.view().t(), g_patches.view()); // (C, OC·k·k)
                        contribs
                            .push((w.0, crate::ops::reshape_val(&gw.into_dyn(), &[c, oc, k, k])));
                    }
                }
                contribs
            })),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;

    #[test]
    fn output_sizes() {
        // k3 s2 p1 halves even sizes; transposed with output_pad 1 doubles.
        assert_eq!(conv2d_output_size(32, 3, 2, 1), 16);
        assert_eq!(conv2d_output_size(8, 3, 2, 1), 4);
        assert_eq!(conv_transpose2d_output_size(16, 3, 2, 1, 1), 32);
        assert_eq!(conv_transpose2d_output_size(4, 3, 2, 1, 1), 8);
    }

    #[test]
    fn conv2d_identity_kernel() {
        // 1x1 kernel with weight 1 and zero bias copies the input.
        let mut t = Tape::new();
        let x = t.constant(Value::from_shape_fn(IxDyn(&[1, 1, 3, 3]), |ix| {
            (ix[2] * 3 + ix[3]) as f64
        }));
        let w = t.constant(Value::from_elem(IxDyn(&[1, 1, 1, 1]), 1.0));
        let b = t.constant(Value::zeros(IxDyn(&[1])));
        let y = t.conv2d(x, w, b, 1, 0);
        assert_eq!(t.value(y), t.value(x));
    }

    #[test]
    fn conv_then_transpose_shapes_roundtrip() {
        let mut t = Tape::new();
        let x = t.constant(Value::from_elem(IxDyn(&[2, 3, 8, 8]), 0.5));
        let w = t.constant(Value::from_elem(IxDyn(&[5, 3, 3, 3]), 0.01));
        let b = t.constant(Value::zeros(IxDyn(&[5])));
        let y = t.conv2d(x, w, b, 2, 1);
        assert_eq!(t.shape(y), &[2, 5, 4, 4]);
        let wt = t.constant(Value::from_elem(IxDyn(&[5, 3, 3, 3]), 0.01));
        let bt = t.constant(Value::zeros(IxDyn(&[3])));
        let z = t.conv_transpose2d(y, wt, bt, 2, 1, 1);
        assert_eq!(t.shape(z), &[2, 3, 8, 8]);
    }
}
