//! Forward operations and the conv2d backward kernel.

use std::sync::Arc;

use crate::error::{Error, Result};

use super::graph::{ConvDims, Graph, Op};
use super::{check_finite, Scalar, Tensor};

fn same_shape<S: Scalar>(op: &'static str, a: &Tensor<S>, b: &Tensor<S>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            op,
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

impl<S: Scalar> Graph<S> {
    /// Elementwise sum; a 1-D rhs is broadcast over the rows of a 2-D lhs.
    pub fn add(&mut self, a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
        let bcast = a.shape().len() == 2 && b.shape().len() == 1 && b.numel() == a.shape()[1];
        if !bcast {
            same_shape("add", a, b)?;
        }
        let mut out = a.values().to_vec();
        if bcast {
            let cols = b.numel();
            for row in out.chunks_exact_mut(cols) {
                for (o, &bv) in row.iter_mut().zip(b.values()) {
                    *o += bv;
                }
            }
        } else {
            for (o, &bv) in out.iter_mut().zip(b.values()) {
                *o += bv;
            }
        }
        check_finite("add", &out)?;
        Ok(self.emit(Op::Add { bcast_rhs: bcast }, &[a, b], a.shape().to_vec(), out))
    }

    pub fn sub(&mut self, a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
        same_shape("sub", a, b)?;
        let out: Vec<S> = a
            .values()
            .iter()
            .zip(b.values())
            .map(|(&x, &y)| x - y)
            .collect();
        check_finite("sub", &out)?;
        Ok(self.emit(Op::Sub, &[a, b], a.shape().to_vec(), out))
    }

    /// Elementwise product of same-shaped tensors.
    pub fn mul(&mut self, a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
        same_shape("mul", a, b)?;
        let out: Vec<S> = a
            .values()
            .iter()
            .zip(b.values())
            .map(|(&x, &y)| x * y)
            .collect();
        check_finite("mul", &out)?;
        Ok(self.emit(Op::Mul, &[a, b], a.shape().to_vec(), out))
    }

    pub fn scale(&mut self, a: &Tensor<S>, c: f64) -> Result<Tensor<S>> {
        let c = S::from_f64(c);
        let out: Vec<S> = a.values().iter().map(|&x| c * x).collect();
        check_finite("scale", &out)?;
        Ok(self.emit(Op::Scale(c), &[a], a.shape().to_vec(), out))
    }

    /// 2-D matrix product `[m,k] @ [k,n]`.
    pub fn matmul(&mut self, a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
        let (ash, bsh) = (a.shape(), b.shape());
        if ash.len() != 2 || bsh.len() != 2 || ash[1] != bsh[0] {
            return Err(Error::shape("matmul", format!("{ash:?} vs {bsh:?}")));
        }
        let (m, k, n) = (ash[0], ash[1], bsh[1]);
        let mut out = vec![S::ZERO; m * n];
        S::gemm(
            m,
            k,
            n,
            S::ONE,
            a.values(),
            k as isize,
            1,
            b.values(),
            n as isize,
            1,
            S::ZERO,
            &mut out,
            n as isize,
            1,
        );
        check_finite("matmul", &out)?;
        Ok(self.emit(Op::Matmul { m, k, n }, &[a, b], vec![m, n], out))
    }

    /// 2-D convolution over NCHW input with zero padding and unit dilation.
    /// Weight layout is `[cout, cin, kh, kw]`; bias, when given, is `[cout]`.
    pub fn conv2d(
        &mut self,
        x: &Tensor<S>,
        w: &Tensor<S>,
        bias: Option<&Tensor<S>>,
        stride: usize,
        pad: usize,
    ) -> Result<Tensor<S>> {
        let (xs, ws) = (x.shape(), w.shape());
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] {
            return Err(Error::shape("conv2d", format!("input {xs:?} vs weight {ws:?}")));
        }
        if stride == 0 {
            return Err(Error::contract("conv2d: stride must be >= 1"));
        }
        let (n, cin, h, w_in) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, kh, kw) = (ws[0], ws[2], ws[3]);
        if h + 2 * pad < kh || w_in + 2 * pad < kw {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {kh}x{kw} exceeds padded input {h}x{w_in} (pad {pad})"),
            ));
        }
        if let Some(b) = bias {
            if b.shape() != [cout] {
                return Err(Error::shape(
                    "conv2d",
                    format!("bias {:?} vs cout {cout}", b.shape()),
                ));
            }
        }
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w_in + 2 * pad - kw) / stride + 1;
        let dims = ConvDims {
            n,
            cin,
            h,
            w: w_in,
            cout,
            kh,
            kw,
            stride,
            pad,
            oh,
            ow,
        };

        let kc = cin * kh * kw;
        let ohw = oh * ow;
        let rows = n * ohw;
        // Patch matrix for the whole batch: cols[q][img * ohw + r'].
        let mut cols = vec![S::ZERO; kc * rows];
        for img in 0..n {
            let x_img = &x.values()[img * cin * h * w_in..(img + 1) * cin * h * w_in];
            im2col(x_img, dims, &mut cols, img * ohw, rows);
        }
        // One GEMM for the batch: out_t[cout][rows] = W @ cols.
        let mut out_t = vec![S::ZERO; cout * rows];
        S::gemm(
            cout,
            kc,
            rows,
            S::ONE,
            w.values(),
            kc as isize,
            1,
            &cols,
            rows as isize,
            1,
            S::ZERO,
            &mut out_t,
            rows as isize,
            1,
        );
        // Scatter to NCHW with fused bias add and finite sweep.
        let mut out = vec![S::ZERO; n * cout * ohw];
        let mut sweep = S::ZERO;
        for img in 0..n {
            for co in 0..cout {
                let src = &out_t[co * rows + img * ohw..co * rows + (img + 1) * ohw];
                let dst = &mut out[(img * cout + co) * ohw..(img * cout + co + 1) * ohw];
                match bias {
                    Some(b) => {
                        let bv = b.values()[co];
                        for (d, &s) in dst.iter_mut().zip(src) {
                            let v = s + bv;
                            sweep += v - v;
                            *d = v;
                        }
                    }
                    None => {
                        for (d, &s) in dst.iter_mut().zip(src) {
                            sweep += s - s;
                            *d = s;
                        }
                    }
                }
            }
        }
        if !sweep.is_finite_value() {
            return Err(Error::NonFinite {
                context: "conv2d".to_string(),
            });
        }
        let mut inputs = vec![x, w];
        if let Some(b) = bias {
            inputs.push(b);
        }
        Ok(self.emit(
            Op::Conv2d {
                dims,
                cols: Arc::new(cols),
            },
            &inputs,
            vec![n, cout, oh, ow],
            out,
        ))
    }

    pub fn relu(&mut self, a: &Tensor<S>) -> Result<Tensor<S>> {
        let out: Vec<S> = a
            .values()
            .iter()
            .map(|&x| x.max_value(S::ZERO))
            .collect();
        Ok(self.emit(Op::Relu, &[a], a.shape().to_vec(), out))
    }

    /// 2x2 max pooling with stride 2 over NCHW input; H and W must be even.
    /// Ties resolve to the lowest linear index.
    pub fn maxpool2x2(&mut self, a: &Tensor<S>) -> Result<Tensor<S>> {
        let s = a.shape();
        if s.len() != 4 || s[2] % 2 != 0 || s[3] % 2 != 0 {
            return Err(Error::shape("maxpool2x2", format!("{s:?}")));
        }
        debug_assert!(a.numel() < u32::MAX as usize);
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let (oh, ow) = (h / 2, w / 2);
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut indices = Vec::with_capacity(n * c * oh * ow);
        let vals = a.values();
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let i00 = base + (2 * oy) * w + 2 * ox;
                    let candidates = [i00, i00 + 1, i00 + w, i00 + w + 1];
                    let mut best = candidates[0];
                    for &i in &candidates[1..] {
                        if vals[i] > vals[best] {
                            best = i;
                        }
                    }
                    out.push(vals[best]);
                    indices.push(best as u32);
                }
            }
        }
        Ok(self.emit(Op::MaxPool2x2 { indices }, &[a], vec![n, c, oh, ow], out))
    }

    /// Mean over all elements, producing a scalar.
    pub fn mean(&mut self, a: &Tensor<S>) -> Result<Tensor<S>> {
        let n = S::from_f64(a.numel() as f64);
        let mut acc = S::ZERO;
        for &v in a.values() {
            acc += v;
        }
        let out = vec![acc / n];
        check_finite("mean", &out)?;
        Ok(self.emit(Op::Mean, &[a], vec![], out))
    }

    /// Sum over all elements, producing a scalar.
    pub fn sum(&mut self, a: &Tensor<S>) -> Result<Tensor<S>> {
        let mut acc = S::ZERO;
        for &v in a.values() {
            acc += v;
        }
        let out = vec![acc];
        check_finite("sum", &out)?;
        Ok(self.emit(Op::Sum, &[a], vec![], out))
    }

    /// Natural log of the input clamped below at 1e-12, so probabilities
    /// touching zero yield a large negative value instead of -inf.
    pub fn log(&mut self, a: &Tensor<S>) -> Result<Tensor<S>> {
        let out: Vec<S> = a
            .values()
            .iter()
            .map(|&x| x.max_value(S::LOG_CLAMP).ln_value())
            .collect();
        check_finite("log", &out)?;
        Ok(self.emit(Op::Log, &[a], a.shape().to_vec(), out))
    }

    pub fn exp(&mut self, a: &Tensor<S>) -> Result<Tensor<S>> {
        let out: Vec<S> = a.values().iter().map(|&x| x.exp_value()).collect();
        check_finite("exp", &out)?;
        Ok(self.emit(Op::Exp, &[a], a.shape().to_vec(), out))
    }

    /// Row-wise softmax of a 2-D tensor, computed with max subtraction.
    pub fn softmax_lastdim(&mut self, a: &Tensor<S>) -> Result<Tensor<S>> {
        let s = a.shape();
        if s.len() != 2 {
            return Err(Error::shape("softmax_lastdim", format!("{s:?}")));
        }
        let cols = s[1];
        let mut out = Vec::with_capacity(a.numel());
        for row in a.values().chunks_exact(cols) {
            let mut mx = row[0];
            for &v in &row[1..] {
                mx = mx.max_value(v);
            }
            let start = out.len();
            let mut denom = S::ZERO;
            for &v in row {
                let e = (v - mx).exp_value();
                denom += e;
                out.push(e);
            }
            for v in &mut out[start..] {
                *v = *v / denom;
            }
        }
        check_finite("softmax_lastdim", &out)?;
        Ok(self.emit(Op::Softmax, &[a], s.to_vec(), out))
    }

    /// Per-row squared L2 norm of a 2-D tensor: `[b, c] -> [b]`.
    pub fn sq_l2_rowwise(&mut self, a: &Tensor<S>) -> Result<Tensor<S>> {
        let s = a.shape();
        if s.len() != 2 {
            return Err(Error::shape("sq_l2_rowwise", format!("{s:?}")));
        }
        let cols = s[1];
        let out: Vec<S> = a
            .values()
            .chunks_exact(cols)
            .map(|row| {
                let mut acc = S::ZERO;
                for &v in row {
                    acc += v * v;
                }
                acc
            })
            .collect();
        check_finite("sq_l2_rowwise", &out)?;
        Ok(self.emit(Op::SqL2Rowwise, &[a], vec![s[0]], out))
    }

    /// Shape change without copying values.
    pub fn reshape(&mut self, a: &Tensor<S>, shape: Vec<usize>) -> Result<Tensor<S>> {
        let numel: usize = shape.iter().product();
        if numel != a.numel() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {shape:?}", a.shape()),
            ));
        }
        Ok(self.emit_shared(Op::Reshape, &[a], shape, Arc::clone(a.values_arc())))
    }
}

/// Writes one image's patches into the batch patch matrix. Layout:
/// `cols[q * total_rows + row_offset + r']` with `q = (c, ky, kx)` and
/// `r' = oy * ow + ox`, so every `(q, image)` block is a contiguous run.
fn im2col<S: Scalar>(x_img: &[S], d: ConvDims, cols: &mut [S], row_offset: usize, total_rows: usize) {
    let ohw = d.oh * d.ow;
    let mut q = 0;
    for c in 0..d.cin {
        let plane = &x_img[c * d.h * d.w..(c + 1) * d.h * d.w];
        for ky in 0..d.kh {
            for kx in 0..d.kw {
                let dst = &mut cols[q * total_rows + row_offset..q * total_rows + row_offset + ohw];
                q += 1;
                for oy in 0..d.oh {
                    let iy = (oy * d.stride + ky) as isize - d.pad as isize;
                    let row = &mut dst[oy * d.ow..(oy + 1) * d.ow];
                    if iy < 0 || iy >= d.h as isize {
                        row.fill(S::ZERO);
                        continue;
                    }
                    let src_row = &plane[iy as usize * d.w..(iy as usize + 1) * d.w];
                    if d.stride == 1 {
                        // Common fast path: a shifted contiguous copy with
                        // zero-filled edges.
                        let shift = kx as isize - d.pad as isize;
                        let (dst_start, src_start) = if shift < 0 {
                            ((-shift) as usize, 0)
                        } else {
                            (0, shift as usize)
                        };
                        let len = d.ow.saturating_sub(dst_start).min(d.w - src_start.min(d.w));
                        row[..dst_start.min(d.ow)].fill(S::ZERO);
                        row[dst_start..dst_start + len]
                            .copy_from_slice(&src_row[src_start..src_start + len]);
                        row[dst_start + len..].fill(S::ZERO);
                    } else {
                        for (ox, o) in row.iter_mut().enumerate() {
                            let ix = (ox * d.stride + kx) as isize - d.pad as isize;
                            *o = if ix < 0 || ix >= d.w as isize {
                                S::ZERO
                            } else {
                                src_row[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }
}

/// Scatters one image's patch-gradient block back into its input gradient.
fn col2im_add<S: Scalar>(
    cols: &[S],
    d: ConvDims,
    dx_img: &mut [S],
    row_offset: usize,
    total_rows: usize,
) {
    let ohw = d.oh * d.ow;
    let mut q = 0;
    for c in 0..d.cin {
        let plane_off = c * d.h * d.w;
        for ky in 0..d.kh {
            for kx in 0..d.kw {
                let src = &cols[q * total_rows + row_offset..q * total_rows + row_offset + ohw];
                q += 1;
                for oy in 0..d.oh {
                    let iy = (oy * d.stride + ky) as isize - d.pad as isize;
                    if iy < 0 || iy >= d.h as isize {
                        continue;
                    }
                    let row_off = plane_off + iy as usize * d.w;
                    let src_row = &src[oy * d.ow..(oy + 1) * d.ow];
                    for (ox, &v) in src_row.iter().enumerate() {
                        let ix = (ox * d.stride + kx) as isize - d.pad as isize;
                        if ix >= 0 && ix < d.w as isize {
                            dx_img[row_off + ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_backward<S: Scalar>(
    graph: &Graph<S>,
    d: ConvDims,
    cols: &Arc<Vec<S>>,
    ins: &[usize],
    g: &[S],
    grads: &mut [Option<Vec<S>>],
) -> Result<()> {
    let w = Arc::clone(&graph.nodes[ins[1]].value);
    let kc = d.cin * d.kh * d.kw;
    let ohw = d.oh * d.ow;
    let rows = d.n * ohw;
    let x_tracked = graph.nodes[ins[0]].tracked;
    let w_tracked = graph.nodes[ins[1]].tracked;
    let b_tracked = ins.len() > 2 && graph.nodes[ins[2]].tracked;

    // Gather dOut from NCHW into [cout, rows] (same layout as the forward
    // intermediate): contiguous per (image, channel) plane.
    let mut g_t = vec![S::ZERO; d.cout * rows];
    for img in 0..d.n {
        for co in 0..d.cout {
            let src = &g[(img * d.cout + co) * ohw..(img * d.cout + co + 1) * ohw];
            g_t[co * rows + img * ohw..co * rows + (img + 1) * ohw].copy_from_slice(src);
        }
    }

    if w_tracked {
        if let Some(dw) = graph.grad_buf(grads, ins[1]) {
            // dW += g_t @ cols^T
            S::gemm(
                d.cout,
                rows,
                kc,
                S::ONE,
                &g_t,
                rows as isize,
                1,
                cols,
                1,
                rows as isize,
                S::ONE,
                dw,
                kc as isize,
                1,
            );
        }
    }
    if b_tracked {
        if let Some(db) = graph.grad_buf(grads, ins[2]) {
            for (co, dbv) in db.iter_mut().enumerate() {
                let mut acc = S::ZERO;
                for &gv in &g_t[co * rows..(co + 1) * rows] {
                    acc += gv;
                }
                *dbv += acc;
            }
        }
    }
    if x_tracked {
        // dcols = W^T @ g_t, then scatter each image block back.
        let mut dcols = vec![S::ZERO; kc * rows];
        S::gemm(
            kc,
            d.cout,
            rows,
            S::ONE,
            &w,
            1,
            kc as isize,
            &g_t,
            rows as isize,
            1,
            S::ZERO,
            &mut dcols,
            rows as isize,
            1,
        );
        if let Some(dx) = graph.grad_buf(grads, ins[0]) {
            for img in 0..d.n {
                let dx_img = &mut dx[img * d.cin * d.h * d.w..(img + 1) * d.cin * d.h * d.w];
                col2im_add(&dcols, d, dx_img, img * ohw, rows);
            }
        }
    }
    Ok(())
}
