use crate::tensor::Backward;
use crate::{Error, Result, Scalar, Tensor, Var};

fn spatial(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() != 4 {
        return Err(Error::invalid(op, format!("expected [B, C, H, W], got {shape:?}")));
    }
    Ok((shape[0] * shape[1], shape[2], shape[3]))
}

struct MaxPoolOp {
    input_len: usize,
    argmax: Vec<usize>,
}

impl<T: Scalar> Backward<T> for MaxPoolOp {
    fn name(&self) -> &'static str {
        "maxpool2d"
    }

    fn backward(&self, _: &[&Tensor<T>], _: &Tensor<T>, grad: &[T], _: &[bool]) -> Vec<Option<Vec<T>>> {
        let mut gx = vec![T::zero(); self.input_len];
        for (&i, &g) in self.argmax.iter().zip(grad) {
            gx[i] = gx[i] + g;
        }
        vec![Some(gx)]
    }
}

struct AvgPoolOp {
    planes: usize,
    h: usize,
    w: usize,
    factor: usize,
}

impl<T: Scalar> Backward<T> for AvgPoolOp {
    fn name(&self) -> &'static str {
        "avgpool2d"
    }

    fn backward(&self, _: &[&Tensor<T>], _: &Tensor<T>, grad: &[T], _: &[bool]) -> Vec<Option<Vec<T>>> {
        let f = self.factor;
        let (ho, wo) = (self.h / f, self.w / f);
        let inv = T::one() / T::of_usize(f * f);
        let mut gx = vec![T::zero(); self.planes * self.h * self.w];
        for p in 0..self.planes {
            for y in 0..self.h {
                for x in 0..self.w {
                    gx[(p * self.h + y) * self.w + x] = grad[(p * ho + y / f) * wo + x / f] * inv;
                }
            }
        }
        vec![Some(gx)]
    }
}

impl<'g, T: Scalar> Var<'g, T> {
    /// 2×2 max pooling with stride 2. Ties go to the first element of the
    /// window in row-major order.
    pub fn maxpool2d(self) -> Result<Var<'g, T>> {
        let xv = self.value();
        let (planes, h, w) = spatial("maxpool2d", xv.shape())?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::invalid("maxpool2d", format!("odd spatial extent {h}×{w}")));
        }
        let (ho, wo) = (h / 2, w / 2);
        let x = xv.data();
        let mut out = Vec::with_capacity(planes * ho * wo);
        let mut argmax = Vec::with_capacity(planes * ho * wo);
        for p in 0..planes {
            for oy in 0..ho {
                for ox in 0..wo {
                    let base = (p * h + 2 * oy) * w + 2 * ox;
                    let mut best = base;
                    for idx in [base + 1, base + w, base + w + 1] {
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                    argmax.push(best);
                    out.push(x[best]);
                }
            }
        }
        let mut shape = xv.shape().to_vec();
        shape[2] = ho;
        shape[3] = wo;
        let out = Tensor::new(shape, out)?;
        self.graph().push(
            out,
            &[self],
            MaxPoolOp {
                input_len: x.len(),
                argmax,
            },
        )
    }

    /// Non-overlapping `factor×factor` average pooling.
    pub fn avgpool2d(self, factor: usize) -> Result<Var<'g, T>> {
        let xv = self.value();
        let (planes, h, w) = spatial("avgpool2d", xv.shape())?;
        if factor == 0 || h % factor != 0 || w % factor != 0 {
            return Err(Error::invalid(
                "avgpool2d",
                format!("factor {factor} does not divide {h}×{w}"),
            ));
        }
        let (ho, wo) = (h / factor, w / factor);
        let inv = T::one() / T::of_usize(factor * factor);
        let x = xv.data();
        let mut out = vec![T::zero(); planes * ho * wo];
        for p in 0..planes {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = T::zero();
                    for dy in 0..factor {
                        let row = (p * h + oy * factor + dy) * w + ox * factor;
                        for dx in 0..factor {
                            acc = acc + x[row + dx];
                        }
                    }
                    out[(p * ho + oy) * wo + ox] = acc * inv;
                }
            }
        }
        let mut shape = xv.shape().to_vec();
        shape[2] = ho;
        shape[3] = wo;
        let out = Tensor::new(shape, out)?;
        self.graph().push(
            out,
            &[self],
            AvgPoolOp {
                planes,
                h,
                w,
                factor,
            },
        )
    }
}
