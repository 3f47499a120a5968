//! Elementwise, dense, reduction, and softmax operations.
//!
//! Every op pushes one node; backward closures capture parent ids and
//! whatever small state they need. Ops on constants record no backward
//! rule, so detached subgraphs cost nothing in the reverse pass.

use ndarray::{concatenate, s, Axis, Ix1, Ix2, IxDyn};

use crate::tape::{Tape, Value, Var};

pub(crate) fn reshape_val(v: &Value, shape: &[usize]) -> Value {
    let flat: Vec<f64> = v.as_standard_layout().iter().copied().collect();
    Value::from_shape_vec(IxDyn(shape), flat).expect("reshape: element count mismatch")
}

fn as2(v: &Value) -> ndarray::ArrayView2<'_, f64> {
    v.view()
        .into_dimensionality::<Ix2>()
        .expect("expected a rank-2 tensor")
}

impl Tape {
    fn binary_needs(&self, a: Var, b: Var) -> bool {
        self.needs_grad(a) || self.needs_grad(b)
    }

    /// Elementwise `a + b` (same shape).
    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "add: shape mismatch");
        let out = va + vb;
        let (na, nb) = (self.needs_grad(a), self.needs_grad(b));
        self.push(
            out,
            na || nb,
            Some(Box::new(move |g, _| {
                let mut c = Vec::new();
                if na {
                    c.push((a.0, g.clone()));
                }
                if nb {
                    c.push((b.0, g.clone()));
                }
                c
            })),
        )
    }

    /// Elementwise `a - b` (same shape).
    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "sub: shape mismatch");
        let out = va - vb;
        let (na, nb) = (self.needs_grad(a), self.needs_grad(b));
        self.push(
            out,
            na || nb,
            Some(Box::new(move |g, _| {
                let mut c = Vec::new();
                if na {
                    c.push((a.0, g.clone()));
                }
                if nb {
                    c.push((b.0, -g));
                }
                c
            })),
        )
    }

    /// Elementwise `a * b` (same shape).
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "mul: shape mismatch");
        let out = va * vb;
        let (na, nb) = (self.needs_grad(a), self.needs_grad(b));
        self.push(
            out,
            na || nb,
            Some(Box::new(move |g, vals| {
                let mut c = Vec::new();
                if na {
                    c.push((a.0, g * &vals[b.0 as usize]));
                }
                if nb {
                    c.push((b.0, g * &vals[a.0 as usize]));
                }
                c
            })),
        )
    }

    /// Elementwise `a / b` (same shape, `b` nonzero).
    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "div: shape mismatch");
        let out = va / vb;
        let (na, nb) = (self.needs_grad(a), self.needs_grad(b));
        self.push(
            out,
            na || nb,
            Some(Box::new(move |g, vals| {
                let vb = &vals[b.0 as usize];
                let mut c = Vec::new();
                if na {
                    c.push((a.0, g / vb));
                }
                if nb {
                    let va = &vals[a.0 as usize];
                    c.push((b.0, -(g * va) / (vb * vb)));
                }
                c
            })),
        )
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.mul_scalar(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a) + c;
        let n = self.needs_grad(a);
        self.push(out, n, Some(Box::new(move |g, _| vec![(a.0, g.clone())])))
    }

    pub fn mul_scalar(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a) * c;
        let n = self.needs_grad(a);
        self.push(out, n, Some(Box::new(move |g, _| vec![(a.0, g * c)])))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(f64::exp);
        let n = self.needs_grad(a);
        let id = self.len() as u32;
        self.push(
            out,
            n,
            Some(Box::new(move |g, vals| vec![(a.0, g * &vals[id as usize])])),
        )
    }

    /// Natural log; the input must be strictly positive.
    pub fn ln(&mut self, a: Var) -> Var {
        let va = self.value(a);
        debug_assert!(va.iter().all(|&x| x > 0.0), "ln: nonpositive input");
        let out = va.mapv(f64::ln);
        let n = self.needs_grad(a);
        self.push(
            out,
            n,
            Some(Box::new(move |g, vals| vec![(a.0, g / &vals[a.0 as usize])])),
        )
    }

    pub fn square(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|x| x * x);
        let n = self.needs_grad(a);
        self.push(
            out,
            n,
            Some(Box::new(move |g, vals| {
                vec![(a.0, g * &vals[a.0 as usize] * 2.0)]
            })),
        )
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(f64::tanh);
        let n = self.needs_grad(a);
        let id = self.len() as u32;
        self.push(
            out,
            n,
            Some(Box::new(move |g, vals| {
                let y = &vals[id as usize];
                vec![(a.0, g * &y.mapv(|t| 1.0 - t * t))]
            })),
        )
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(sigmoid_scalar);
        let n = self.needs_grad(a);
        let id = self.len() as u32;
        self.push(
            out,
            n,
            Some(Box::new(move |g, vals| {
                let y = &vals[id as usize];
                vec![(a.0, g * &y.mapv(|s| s * (1.0 - s)))]
            })),
        )
    }

    /// Numerically stable `ln(1 + e^x)`.
    pub fn softplus(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(softplus_scalar);
        let n = self.needs_grad(a);
        self.push(
            out,
            n,
            Some(Box::new(move |g, vals| {
                let x = &vals[a.0 as usize];
                vec![(a.0, g * &x.mapv(sigmoid_scalar))]
            })),
        )
    }

    /// Exponential linear unit.
    pub fn elu(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|x| if x > 0.0 { x } else { x.exp() - 1.0 });
        let n = self.needs_grad(a);
        let id = self.len() as u32;
        self.push(
            out,
            n,
            Some(Box::new(move |g, vals| {
                let y = &vals[id as usize];
                vec![(a.0, g * &y.mapv(|v| if v > 0.0 { 1.0 } else { v + 1.0 }))]
            })),
        )
    }

    /// Elementwise `max(a, c)`; gradient passes only where `a > c`.
    pub fn maximum_scalar(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).mapv(|x| x.max(c));
        let n = self.needs_grad(a);
        self.push(
            out,
            n,
            Some(Box::new(move |g, vals| {
                let x = &vals[a.0 as usize];
                vec![(a.0, g * &x.mapv(|v| if v > c { 1.0 } else { 0.0 }))]
            })),
        )
    }

    /// `A (m,k) · B (k,n)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = crate::linalg::matmul(as2(self.value(a)), as2(self.value(b))).into_dyn();
        let (na, nb) = (self.needs_grad(a), self.needs_grad(b));
        self.push(
            out,
            na || nb,
            Some(Box::new(move |g, vals| {
                let g2 = as2(g);
                let mut c = Vec::new();
                if na {
                    let vb = as2(&vals[b.0 as usize]);
                    c.push((a.0, crate::linalg::matmul(g2, vb.t()).into_dyn()));
                }
                if nb {
                    let va = as2(&vals[a.0 as usize]);
                    c.push((b.0, crate::linalg::matmul(va.t(), g2).into_dyn()));
                }
                c
            })),
        )
    }

    /// `mat (m,n) + row (n)` broadcast over rows (bias add).
    pub fn add_rowvec(&mut self, mat: Var, row: Var) -> Var {
        let m2 = as2(self.value(mat));
        let r1 = self
            .value(row)
            .view()
            .into_dimensionality::<Ix1>()
            .expect("add_rowvec: row must be rank 1");
        assert_eq!(m2.ncols(), r1.len(), "add_rowvec: width mismatch");
        let out = (&m2 + &r1).into_dyn();
        let (na, nb) = (self.needs_grad(mat), self.needs_grad(row));
        self.push(
            out,
            na || nb,
            Some(Box::new(move |g, _| {
                let g2 = as2(g);
                let mut c = Vec::new();
                if na {
                    c.push((mat.0, g.clone()));
                }
                if nb {
                    c.push((row.0, g2.sum_axis(Axis(0)).into_dyn()));
                }
                c
            })),
        )
    }

    /// `mat (m,n) * col (m,1)` broadcast over columns.
    pub fn mul_colvec(&mut self, mat: Var, col: Var) -> Var {
        let m2 = as2(self.value(mat));
        let c2 = as2(self.value(col));
        assert_eq!(c2.ncols(), 1, "mul_colvec: col must be (m,1)");
        assert_eq!(m2.nrows(), c2.nrows(), "mul_colvec: height mismatch");
        let out = (&m2 * &c2.broadcast(m2.dim()).unwrap()).into_dyn();
        let (na, nb) = (self.needs_grad(mat), self.needs_grad(col));
        self.push(
            out,
            na || nb,
            Some(Box::new(move |g, vals| {
                let g2 = as2(g);
                let mut c = Vec::new();
                if na {
                    let cv = as2(&vals[col.0 as usize]);
                    c.push((mat.0, (&g2 * &cv.broadcast(g2.dim()).unwrap()).into_dyn()));
                }
                if nb {
                    let mv = as2(&vals[mat.0 as usize]);
                    let gc = (&g2 * &mv).sum_axis(Axis(1)).insert_axis(Axis(1));
                    c.push((col.0, gc.into_dyn()));
                }
                c
            })),
        )
    }

    /// Concatenate rank-2 tensors along the column axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let views: Vec<_> = parts.iter().map(|&p| as2(self.value(p))).collect();
        let widths: Vec<usize> = views.iter().map(|v| v.ncols()).collect();
        let out = concatenate(Axis(1), &views).expect("concat_cols").into_dyn();
        let ids: Vec<(u32, bool)> = parts
            .iter()
            .map(|&p| (p.0, self.needs_grad(p)))
            .collect();
        let needs = ids.iter().any(|&(_, n)| n);
        self.push(
            out,
            needs,
            Some(Box::new(move |g, _| {
                let g2 = as2(g);
                let mut c = Vec::new();
                let mut lo = 0;
                for (&(id, n), &w) in ids.iter().zip(&widths) {
                    if n {
                        c.push((id, g2.slice(s![.., lo..lo + w]).to_owned().into_dyn()));
                    }
                    lo += w;
                }
                c
            })),
        )
    }

    /// Columns `lo..hi` of a rank-2 tensor.
    pub fn slice_cols(&mut self, a: Var, lo: usize, hi: usize) -> Var {
        let va = as2(self.value(a));
        let (m, n_in) = va.dim();
        assert!(lo <= hi && hi <= n_in, "slice_cols: bad range");
        let out = va.slice(s![.., lo..hi]).to_owned().into_dyn();
        let n = self.needs_grad(a);
        self.push(
            out,
            n,
            Some(Box::new(move |g, _| {
                let mut full = ndarray::Array2::<f64>::zeros((m, n_in));
                full.slice_mut(s![.., lo..hi]).assign(&as2(g));
                vec![(a.0, full.into_dyn())]
            })),
        )
    }

    /// Channels `lo..hi` of a rank-4 `(B,C,H,W)` tensor.
    pub fn slice_chan(&mut self, a: Var, lo: usize, hi: usize) -> Var {
        let va = self.value(a);
        assert_eq!(va.ndim(), 4, "slice_chan: expected rank 4");
        let c_in = va.shape()[1];
        assert!(lo <= hi && hi <= c_in, "slice_chan: bad range");
        let shape: Vec<usize> = va.shape().to_vec();
        let out = va
            .slice_axis(Axis(1), ndarray::Slice::from(lo..hi))
            .to_owned();
        let n = self.needs_grad(a);
        self.push(
            out,
            n,
            Some(Box::new(move |g, _| {
                let mut full = Value::zeros(IxDyn(&shape));
                full.slice_axis_mut(Axis(1), ndarray::Slice::from(lo..hi))
                    .assign(g);
                vec![(a.0, full)]
            })),
        )
    }

    /// Same elements, new shape.
    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let in_shape: Vec<usize> = self.value(a).shape().to_vec();
        let out = reshape_val(self.value(a), shape);
        let n = self.needs_grad(a);
        self.push(
            out,
            n,
            Some(Box::new(move |g, _| vec![(a.0, reshape_val(g, &in_shape))])),
        )
    }

    /// Sum of all elements, as a `[1]` tensor.
    pub fn sum_all(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let shape: Vec<usize> = va.shape().to_vec();
        let out = Value::from_elem(IxDyn(&[1]), va.sum());
        let n = self.needs_grad(a);
        self.push(
            out,
            n,
            Some(Box::new(move |g, _| {
                let gv = g.iter().next().copied().unwrap();
                vec![(a.0, Value::from_elem(IxDyn(&shape), gv))]
            })),
        )
    }

    /// Mean of all elements, as a `[1]` tensor.
    pub fn mean_all(&mut self, a: Var) -> Var {
        let n_elems = self.value(a).len() as f64;
        let s = self.sum_all(a);
        self.mul_scalar(s, 1.0 / n_elems)
    }

    /// Row sums of a rank-2 tensor, shape `(m,1)`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let va = as2(self.value(a));
        let (m, n_in) = va.dim();
        let out = va.sum_axis(Axis(1)).insert_axis(Axis(1)).into_dyn();
        let n = self.needs_grad(a);
        self.push(
            out,
            n,
            Some(Box::new(move |g, _| {
                let g2 = as2(g);
                let full = g2.broadcast((m, n_in)).unwrap().to_owned();
                vec![(a.0, full.into_dyn())]
            })),
        )
    }

    /// Row-wise softmax of a rank-2 tensor.
    pub fn softmax_cols(&mut self, a: Var) -> Var {
        let va = as2(self.value(a));
        let mut out = va.to_owned();
        for mut row in out.rows_mut() {
            let m = row.fold(f64::NEG_INFINITY, |acc, &x| acc.max(x));
            row.mapv_inplace(|x| (x - m).exp());
            let z = row.sum();
            row.mapv_inplace(|x| x / z);
        }
        let n = self.needs_grad(a);
        let id = self.len() as u32;
        self.push(
            out.into_dyn(),
            n,
            Some(Box::new(move |g, vals| {
                let y = as2(&vals[id as usize]);
                let g2 = as2(g);
                let mut gin = g2.to_owned();
                for (mut gr, yr) in gin.rows_mut().into_iter().zip(y.rows()) {
                    let dot: f64 = gr.iter().zip(yr.iter()).map(|(a, b)| a * b).sum();
                    for (ge, &ye) in gr.iter_mut().zip(yr.iter()) {
                        *ge = ye * (*ge - dot);
                    }
                }
                vec![(a.0, gin.into_dyn())]
            })),
        )
    }

    /// Pixelwise softmax over a small set of mask logits, each `(B,1,H,W)`.
    ///
    /// With `zero_background` an implicit constant-zero logit joins the set
    /// as the final channel, so the output masks form a convex combination
    /// with a residual background channel. Output is `(B, K(+1), H, W)`.
    pub fn mask_softmax(&mut self, logits: &[Var], zero_background: bool) -> Var {
        assert!(!logits.is_empty());
        let k = logits.len();
        let shape = self.value(logits[0]).shape().to_vec();
        assert_eq!(shape.len(), 4, "mask_softmax: logits must be (B,1,H,W)");
        assert_eq!(shape[1], 1, "mask_softmax: logits must have one channel");
        for &l in logits {
            assert_eq!(self.value(l).shape(), &shape[..]);
        }
        let (b, h, w) = (shape[0], shape[2], shape[3]);
        let k_out = k + usize::from(zero_background);
        let mut out = Value::zeros(IxDyn(&[b, k_out, h, w]));
        {
            let views: Vec<_> = logits.iter().map(|&l| self.value(l).clone()).collect();
            let px = b * h * w;
            for p in 0..px {
                let (bi, rest) = (p / (h * w), p % (h * w));
                let (hi, wi) = (rest / w, rest % w);
                let mut m = if zero_background { 0.0 } else { f64::NEG_INFINITY };
                for v in &views {
                    m = m.max(v[[bi, 0, hi, wi]]);
                }
                let mut denom = if zero_background { (-m).exp() } else { 0.0 };
                let mut es = Vec::with_capacity(k);
                for v in &views {
                    let e = (v[[bi, 0, hi, wi]] - m).exp();
                    denom += e;
                    es.push(e);
                }
                for (i, e) in es.iter().enumerate() {
                    out[[bi, i, hi, wi]] = e / denom;
                }
                if zero_background {
                    out[[bi, k, hi, wi]] = (-m).exp() / denom;
                }
            }
        }
        let ids: Vec<(u32, bool)> = logits
            .iter()
            .map(|&l| (l.0, self.needs_grad(l)))
            .collect();
        let needs = ids.iter().any(|&(_, n)| n);
        let id = self.len() as u32;
        self.push(
            out,
            needs,
            Some(Box::new(move |g, vals| {
                let y = &vals[id as usize]; // (B, k_out, H, W)
                // s = sum_j g_j * y_j per pixel; grad_i = y_i * (g_i - s)
                let mut s = Value::zeros(IxDyn(&[b, 1, h, w]));
                for j in 0..k_out {
                    for bi in 0..b {
                        for hi in 0..h {
                            for wi in 0..w {
                                s[[bi, 0, hi, wi]] += g[[bi, j, hi, wi]] * y[[bi, j, hi, wi]];
                            }
                        }
                    }
                }
                let mut c = Vec::new();
                for (i, &(lid, n)) in ids.iter().enumerate() {
                    if !n {
                        continue;
                    }
                    let mut gl = Value::zeros(IxDyn(&[b, 1, h, w]));
                    for bi in 0..b {
                        for hi in 0..h {
                            for wi in 0..w {
                                gl[[bi, 0, hi, wi]] = y[[bi, i, hi, wi]]
                                    * (g[[bi, i, hi, wi]] - s[[bi, 0, hi, wi]]);
                            }
                        }
                    }
                    c.push((lid, gl));
                }
                c
            })),
        )
    }

    /// `x (B,C,H,W) * m (B,1,H,W)` broadcast over channels.
    pub fn mul_chan(&mut self, x: Var, m: Var) -> Var {
        let vx = self.value(x);
        let vm = self.value(m);
        assert_eq!(vx.ndim(), 4);
        assert_eq!(vm.ndim(), 4);
        assert_eq!(vm.shape()[1], 1, "mul_chan: mask must have one channel");
        let xs: Vec<usize> = vx.shape().to_vec();
        let out = vx * &vm.broadcast(IxDyn(&xs)).unwrap();
        let (nx, nm) = (self.needs_grad(x), self.needs_grad(m));
        self.push(
            out,
            nx || nm,
            Some(Box::new(move |g, vals| {
                let mut c = Vec::new();
                if nx {
                    let vm = &vals[m.0 as usize];
                    c.push((x.0, g * &vm.broadcast(IxDyn(&xs)).unwrap()));
                }
                if nm {
                    let vx = &vals[x.0 as usize];
                    let prod = g * vx;
                    let gm = prod.sum_axis(Axis(1)).insert_axis(Axis(1));
                    c.push((m.0, gm));
                }
                c
            })),
        )
    }
}

pub(crate) fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus_scalar(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut t = Tape::new();
        let a = t.constant(array![[1.0, 2.0, 3.0], [0.0, 0.0, 0.0]].into_dyn());
        let y = t.softmax_cols(a);
        let v = t.value(y);
        for r in 0..2 {
            let s: f64 = (0..3).map(|c| v[[r, c]]).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        assert!((v[[1, 0]] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn mask_softmax_partitions() {
        let mut t = Tape::new();
        let ls = t.constant(Value::from_elem(IxDyn(&[1, 1, 2, 2]), 0.7));
        let lz = t.constant(Value::from_elem(IxDyn(&[1, 1, 2, 2]), -1.3));
        let m = t.mask_softmax(&[ls, lz], true);
        let v = t.value(m);
        assert_eq!(v.shape(), &[1, 3, 2, 2]);
        for hi in 0..2 {
            for wi in 0..2 {
                let s: f64 = (0..3).map(|c| v[[0, c, hi, wi]]).sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn saturated_mask_softmax() {
        let mut t = Tape::new();
        let ls = t.constant(Value::from_elem(IxDyn(&[1, 1, 1, 1]), 60.0));
        let lz = t.constant(Value::from_elem(IxDyn(&[1, 1, 1, 1]), -60.0));
        let m = t.mask_softmax(&[ls, lz], true);
        let v = t.value(m);
        assert!((v[[0, 0, 0, 0]] - 1.0).abs() < 1e-12);
        assert!(v[[0, 1, 0, 0]] < 1e-12);
        assert!(v[[0, 2, 0, 0]] < 1e-12);
    }

    #[test]
    fn detach_cuts_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(Value::from_elem(IxDyn(&[1]), 2.0));
        let d = t.detach(x);
        let y = t.mul(d, d);
        let loss = t.sum_all(y);
        let g = t.backward(loss);
        assert!(g.get(x).is_none());
    }

    #[test]
    fn backward_accumulates_fanout() {
        let mut t = Tape::new();
        let x = t.leaf(Value::from_elem(IxDyn(&[1]), 3.0));
        let y = t.add(x, x); // y = 2x
        let loss = t.sum_all(y);
        let g = t.backward(loss);
        assert_eq!(g.get(x).unwrap()[[0]], 2.0);
    }
}
