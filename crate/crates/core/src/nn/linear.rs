use crate::kernels::{gemm_nn, gemm_nt, gemm_tn, Exec};
use crate::tensor::Backward;
use crate::{Error, Result, Scalar, Tensor, Var};

struct LinearOp {
    rows: usize,
    d_in: usize,
    d_out: usize,
    exec: Exec,
}

impl<T: Scalar> Backward<T> for LinearOp {
    fn name(&self) -> &'static str {
        "linear"
    }

    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, grad: &[T], needs: &[bool]) -> Vec<Option<Vec<T>>> {
        let LinearOp { rows, d_in, d_out, exec } = *self;
        let gx = needs[0].then(|| {
            let mut gx = vec![T::zero(); rows * d_in];
            gemm_nt(exec, rows, d_out, d_in, grad, inputs[1].data(), &mut gx);
            gx
        });
        let gw = needs[1].then(|| {
            let mut gw = vec![T::zero(); d_in * d_out];
            gemm_tn(exec, d_in, rows, d_out, inputs[0].data(), grad, &mut gw);
            gw
        });
        let gb = needs[2].then(|| {
            let mut gb = vec![T::zero(); d_out];
            for row in grad.chunks_exact(d_out) {
                gb.iter_mut().zip(row).for_each(|(a, &g)| *a = *a + g);
            }
            gb
        });
        vec![gx, gw, gb]
    }
}

impl<'g, T: Scalar> Var<'g, T> {
    /// Affine map over the last axis: `x[..., D_in] · weight[D_in, D_out] + bias`.
    pub fn linear(self, weight: Var<'g, T>, bias: Var<'g, T>) -> Result<Var<'g, T>> {
        let (xv, wv, bv) = (self.value(), weight.value(), bias.value());
        let (xs, ws) = (xv.shape(), wv.shape());
        let d_in = *xs.last().unwrap_or(&0);
        if ws.len() != 2 || ws[0] != d_in || xs.is_empty() {
            return Err(Error::Shape {
                op: "linear",
                lhs: xs.to_vec(),
                rhs: ws.to_vec(),
            });
        }
        let d_out = ws[1];
        if bv.shape() != [d_out] {
            return Err(Error::Shape {
                op: "linear",
                lhs: bv.shape().to_vec(),
                rhs: vec![d_out],
            });
        }
        let rows = xv.len() / d_in;
        let exec = self.graph().exec();
        let mut out = vec![T::zero(); rows * d_out];
        gemm_nn(exec, rows, d_in, d_out, xv.data(), wv.data(), &mut out);
        for row in out.chunks_exact_mut(d_out) {
            row.iter_mut().zip(bv.data()).for_each(|(o, &b)| *o = *o + b);
        }
        let mut shape = xs.to_vec();
        *shape.last_mut().expect("rank checked above") = d_out;
        let out = Tensor::new(shape, out)?;
        self.graph().push(
            out,
            &[self, weight, bias],
            LinearOp {
                rows,
                d_in,
                d_out,
                exec,
            },
        )
    }
}
