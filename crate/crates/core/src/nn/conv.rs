//! 2-D cross-correlation via im2col + GEMM.

use crate::kernels::{gemm_nn, gemm_nt, gemm_tn, Exec};
use crate::tensor::Backward;
use crate::{Error, Result, Scalar, Tensor, Var};

/// `floor((extent + 2·padding − kernel) / stride) + 1`, or an error when the
/// window does not fit.
pub fn conv_output_extent(extent: usize, kernel: usize, stride: usize, padding: usize) -> Result<usize> {
    if kernel == 0 || stride == 0 {
        return Err(Error::invalid("conv2d", "kernel and stride must be positive"));
    }
    let padded = extent + 2 * padding;
    if padded < kernel {
        return Err(Error::invalid(
            "conv2d",
            format!("degenerate output: extent {extent} + 2·{padding} < kernel {kernel}"),
        ));
    }
    Ok((padded - kernel) / stride + 1)
}

#[derive(Clone, Copy)]
struct Geometry {
    c_in: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl Geometry {
    fn rows(&self) -> usize {
        self.c_in * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.ho * self.wo
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    /// Source column range `[lo, hi)` of output columns whose input column
    /// `ow·stride + kw − pad` is in bounds.
    fn valid_cols(&self, kw: usize) -> (usize, usize) {
        let mut lo = 0;
        while lo < self.wo && lo * self.stride + kw < self.pad {
            lo += 1;
        }
        let mut hi = self.wo;
        while hi > lo && (hi - 1) * self.stride + kw >= self.pad + self.w {
            hi -= 1;
        }
        (lo, hi)
    }
}

/// Unfolds one sample `[c_in, h, w]` into `[c_in·k·k, ho·wo]`, row index
/// `(c·k + kh)·k + kw`, zero where the window hangs over the padding.
fn im2col<T: Scalar>(x: &[T], g: &Geometry, cols: &mut [T]) {
    let ncols = g.cols();
    for c in 0..g.c_in {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for kh in 0..g.k {
            for kw in 0..g.k {
                let row = (c * g.k + kh) * g.k + kw;
                let dst = &mut cols[row * ncols..(row + 1) * ncols];
                let (lo, hi) = g.valid_cols(kw);
                for oh in 0..g.ho {
                    let out = &mut dst[oh * g.wo..(oh + 1) * g.wo];
                    let ih = (oh * g.stride + kh) as isize - g.pad as isize;
                    if ih < 0 || ih as usize >= g.h {
                        out.fill(T::zero());
                        continue;
                    }
                    let src = &plane[ih as usize * g.w..(ih as usize + 1) * g.w];
                    out[..lo].fill(T::zero());
                    out[hi..].fill(T::zero());
                    if g.stride == 1 {
                        let start = lo + kw - g.pad;
                        out[lo..hi].copy_from_slice(&src[start..start + (hi - lo)]);
                    } else {
                        for ow in lo..hi {
                            out[ow] = src[ow * g.stride + kw - g.pad];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates columns back onto the input grid.
fn col2im<T: Scalar>(cols: &[T], g: &Geometry, dx: &mut [T]) {
    let ncols = g.cols();
    for c in 0..g.c_in {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for kh in 0..g.k {
            for kw in 0..g.k {
                let row = (c * g.k + kh) * g.k + kw;
                let src = &cols[row * ncols..(row + 1) * ncols];
                let (lo, hi) = g.valid_cols(kw);
                for oh in 0..g.ho {
                    let ih = (oh * g.stride + kh) as isize - g.pad as isize;
                    if ih < 0 || ih as usize >= g.h {
                        continue;
                    }
                    let dst = &mut plane[ih as usize * g.w..(ih as usize + 1) * g.w];
                    for ow in lo..hi {
                        let iw = ow * g.stride + kw - g.pad;
                        dst[iw] = dst[iw] + src[oh * g.wo + ow];
                    }
                }
            }
        }
    }
}

struct Conv2dOp<T> {
    geom: Geometry,
    batch: usize,
    c_out: usize,
    // im2col of every sample; empty for pointwise kernels, which read x
    cols: Vec<T>,
    has_bias: bool,
    exec: Exec,
}

impl<T: Scalar> Backward<T> for Conv2dOp<T> {
    fn name(&self) -> &'static str {
        "conv2d"
    }

    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, grad: &[T], needs: &[bool]) -> Vec<Option<Vec<T>>> {
        let g = &self.geom;
        let (rows, ncols, c_out) = (g.rows(), g.cols(), self.c_out);
        let x = inputs[0].data();
        let w = inputs[1].data();
        let sample_cols = |b: usize| -> &[T] {
            if g.is_pointwise() {
                &x[b * rows * ncols..(b + 1) * rows * ncols]
            } else {
                &self.cols[b * rows * ncols..(b + 1) * rows * ncols]
            }
        };
        let out_len = c_out * ncols;

        let gx = needs[0].then(|| {
            let in_len = g.c_in * g.h * g.w;
            let mut gx = vec![T::zero(); self.batch * in_len];
            let mut dcols = vec![T::zero(); rows * ncols];
            for b in 0..self.batch {
                let dy = &grad[b * out_len..(b + 1) * out_len];
                let dst = &mut gx[b * in_len..(b + 1) * in_len];
                if g.is_pointwise() {
                    gemm_tn(self.exec, rows, c_out, ncols, w, dy, dst);
                } else {
                    dcols.fill(T::zero());
                    gemm_tn(self.exec, rows, c_out, ncols, w, dy, &mut dcols);
                    col2im(&dcols, g, dst);
                }
            }
            gx
        });
        let gw = needs[1].then(|| {
            let mut gw = vec![T::zero(); c_out * rows];
            for b in 0..self.batch {
                let dy = &grad[b * out_len..(b + 1) * out_len];
                gemm_nt(self.exec, c_out, ncols, rows, dy, sample_cols(b), &mut gw);
            }
            gw
        });
        let mut out = vec![gx, gw];
        if self.has_bias {
            out.push(needs[2].then(|| {
                let mut gb = vec![T::zero(); c_out];
                for b in 0..self.batch {
                    for (co, acc) in gb.iter_mut().enumerate() {
                        let start = b * out_len + co * ncols;
                        *acc = *acc + grad[start..start + ncols].iter().copied().sum::<T>();
                    }
                }
                gb
            }));
        }
        out
    }
}

impl<'g, T: Scalar> Var<'g, T> {
    /// Cross-correlation of `[B, C_in, H, W]` with `weight [C_out, C_in, k, k]`
    /// plus an optional per-output-channel `bias`, zero padding.
    pub fn conv2d(
        self,
        weight: Var<'g, T>,
        bias: Option<Var<'g, T>>,
        stride: usize,
        padding: usize,
    ) -> Result<Var<'g, T>> {
        let xv = self.value();
        let wv = weight.value();
        let (xs, ws) = (xv.shape(), wv.shape());
        if xs.len() != 4 || ws.len() != 4 || ws[2] != ws[3] {
            return Err(Error::Shape {
                op: "conv2d",
                lhs: xs.to_vec(),
                rhs: ws.to_vec(),
            });
        }
        if xs[1] != ws[1] {
            return Err(Error::invalid(
                "conv2d",
                format!("channel mismatch: input has {}, weight expects {}", xs[1], ws[1]),
            ));
        }
        let (batch, c_in, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (c_out, k) = (ws[0], ws[2]);
        let ho = conv_output_extent(h, k, stride, padding)?;
        let wo = conv_output_extent(w, k, stride, padding)?;
        let geom = Geometry {
            c_in,
            h,
            w,
            k,
            stride,
            pad: padding,
            ho,
            wo,
        };
        let bv = match bias {
            Some(b) => {
                let bv = b.value();
                if bv.shape() != [c_out] {
                    return Err(Error::Shape {
                        op: "conv2d",
                        lhs: bv.shape().to_vec(),
                        rhs: vec![c_out],
                    });
                }
                Some(bv)
            }
            None => None,
        };

        let exec = self.graph().exec();
        let (rows, ncols) = (geom.rows(), geom.cols());
        let mut cols = Vec::new();
        if !geom.is_pointwise() {
            cols = vec![T::zero(); batch * rows * ncols];
            let in_len = c_in * h * w;
            for b in 0..batch {
                im2col(
                    &xv.data()[b * in_len..(b + 1) * in_len],
                    &geom,
                    &mut cols[b * rows * ncols..(b + 1) * rows * ncols],
                );
            }
        }
        let out_len = c_out * ncols;
        let mut out = vec![T::zero(); batch * out_len];
        for b in 0..batch {
            let src = if geom.is_pointwise() {
                &xv.data()[b * rows * ncols..(b + 1) * rows * ncols]
            } else {
                &cols[b * rows * ncols..(b + 1) * rows * ncols]
            };
            gemm_nn(exec, c_out, rows, ncols, wv.data(), src, &mut out[b * out_len..(b + 1) * out_len]);
        }
        if let Some(bv) = &bv {
            for b in 0..batch {
                for (co, &bias) in bv.data().iter().enumerate() {
                    let start = b * out_len + co * ncols;
                    out[start..start + ncols].iter_mut().for_each(|v| *v = *v + bias);
                }
            }
        }
        let out = Tensor::new(vec![batch, c_out, ho, wo], out)?;
        let op = Conv2dOp {
            geom,
            batch,
            c_out,
            cols,
            has_bias: bias.is_some(),
            exec,
        };
        match bias {
            Some(b) => self.graph().push(out, &[self, weight, b], op),
            None => self.graph().push(out, &[self, weight], op),
        }
    }
}
