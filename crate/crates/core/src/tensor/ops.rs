//! Core tensor algebra: elementwise arithmetic, matmul, reductions and
//! layout operations (reshape, permute, concat, slice).

use crate::kernels::{gemm_nn, gemm_nt, gemm_tn, Exec};
use crate::tensor::graph::Backward;
use crate::tensor::numel;
use crate::{Error, Result, Scalar, Tensor, Var};

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

/// Splits `shape` around `axis` into (outer, extent, inner) element counts.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

#[derive(Clone, Copy)]
enum Binary {
    Add,
    Sub,
    Mul,
}

struct BinaryOp(Binary);

impl<T: Scalar> Backward<T> for BinaryOp {
    fn name(&self) -> &'static str {
        match self.0 {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
        }
    }

    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, grad: &[T], needs: &[bool]) -> Vec<Option<Vec<T>>> {
        let (a, b) = (inputs[0].data(), inputs[1].data());
        let ga = needs[0].then(|| match self.0 {
            Binary::Add | Binary::Sub => grad.to_vec(),
            Binary::Mul => grad.iter().zip(b).map(|(&g, &y)| g * y).collect(),
        });
        let gb = needs[1].then(|| match self.0 {
            Binary::Add => grad.to_vec(),
            Binary::Sub => grad.iter().map(|&g| -g).collect(),
            Binary::Mul => grad.iter().zip(a).map(|(&g, &x)| g * x).collect(),
        });
        vec![ga, gb]
    }
}

struct ScaleOp<T>(T);

impl<T: Scalar> Backward<T> for ScaleOp<T> {
    fn name(&self) -> &'static str {
        "scalar-mul"
    }

    fn backward(&self, _: &[&Tensor<T>], _: &Tensor<T>, grad: &[T], _: &[bool]) -> Vec<Option<Vec<T>>> {
        vec![Some(grad.iter().map(|&g| g * self.0).collect())]
    }
}

struct ShiftOp;

impl<T: Scalar> Backward<T> for ShiftOp {
    fn name(&self) -> &'static str {
        "scalar-add"
    }

    fn backward(&self, _: &[&Tensor<T>], _: &Tensor<T>, grad: &[T], _: &[bool]) -> Vec<Option<Vec<T>>> {
        vec![Some(grad.to_vec())]
    }
}

/// Matrix product over the last two axes, with identical leading axes.
struct MatMulOp {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    exec: Exec,
}

impl<T: Scalar> Backward<T> for MatMulOp {
    fn name(&self) -> &'static str {
        "matmul"
    }

    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, grad: &[T], needs: &[bool]) -> Vec<Option<Vec<T>>> {
        let MatMulOp { batch, m, k, n, exec } = *self;
        let (a, b) = (inputs[0].data(), inputs[1].data());
        let ga = needs[0].then(|| {
            let mut ga = vec![T::zero(); batch * m * k];
            for s in 0..batch {
                gemm_nt(
                    exec,
                    m,
                    n,
                    k,
                    &grad[s * m * n..(s + 1) * m * n],
                    &b[s * k * n..(s + 1) * k * n],
                    &mut ga[s * m * k..(s + 1) * m * k],
                );
            }
            ga
        });
        let gb = needs[1].then(|| {
            let mut gb = vec![T::zero(); batch * k * n];
            for s in 0..batch {
                gemm_tn(
                    exec,
                    k,
                    m,
                    n,
                    &a[s * m * k..(s + 1) * m * k],
                    &grad[s * m * n..(s + 1) * m * n],
                    &mut gb[s * k * n..(s + 1) * k * n],
                );
            }
            gb
        });
        vec![ga, gb]
    }
}

/// Reduction kind for [`Var::reduce`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduce {
    Sum,
    Mean,
    Max,
}

struct ReduceOp {
    kind: Reduce,
    outer: usize,
    extent: usize,
    inner: usize,
    // flat input index of each output's maximum (Max only)
    argmax: Vec<usize>,
}

impl<T: Scalar> Backward<T> for ReduceOp {
    fn name(&self) -> &'static str {
        match self.kind {
            Reduce::Sum => "sum",
            Reduce::Mean => "mean",
            Reduce::Max => "max",
        }
    }

    fn backward(&self, _: &[&Tensor<T>], _: &Tensor<T>, grad: &[T], _: &[bool]) -> Vec<Option<Vec<T>>> {
        let mut gx = vec![T::zero(); self.outer * self.extent * self.inner];
        match self.kind {
            Reduce::Max => {
                for (&idx, &g) in self.argmax.iter().zip(grad) {
                    gx[idx] = g;
                }
            }
            Reduce::Sum | Reduce::Mean => {
                let scale = if self.kind == Reduce::Mean {
                    T::one() / T::of_usize(self.extent)
                } else {
                    T::one()
                };
                for o in 0..self.outer {
                    for e in 0..self.extent {
                        let base = (o * self.extent + e) * self.inner;
                        let gbase = o * self.inner;
                        for i in 0..self.inner {
                            gx[base + i] = grad[gbase + i] * scale;
                        }
                    }
                }
            }
        }
        vec![Some(gx)]
    }
}

struct ReshapeOp;

impl<T: Scalar> Backward<T> for ReshapeOp {
    fn name(&self) -> &'static str {
        "reshape"
    }

    fn backward(&self, _: &[&Tensor<T>], _: &Tensor<T>, grad: &[T], _: &[bool]) -> Vec<Option<Vec<T>>> {
        vec![Some(grad.to_vec())]
    }
}

/// Gathers `src` (shape `shape`) into the order given by `axes`.
fn permute_data<T: Copy>(src: &[T], shape: &[usize], axes: &[usize]) -> Vec<T> {
    let rank = shape.len();
    let mut strides = vec![1usize; rank];
    for d in (0..rank.saturating_sub(1)).rev() {
        strides[d] = strides[d + 1] * shape[d + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let out_strides: Vec<usize> = axes.iter().map(|&a| strides[a]).collect();
    let total = src.len();
    let mut out = Vec::with_capacity(total);
    if rank == 0 {
        out.extend_from_slice(src);
        return out;
    }
    let last = rank - 1;
    let (last_extent, last_stride) = (out_shape[last], out_strides[last]);
    let mut index = vec![0usize; rank];
    let mut offset = 0usize;
    while out.len() < total {
        for j in 0..last_extent {
            out.push(src[offset + j * last_stride]);
        }
        // advance the odometer over all but the last axis
        let mut d = last;
        loop {
            if d == 0 {
                break;
            }
            d -= 1;
            index[d] += 1;
            offset += out_strides[d];
            if index[d] < out_shape[d] {
                break;
            }
            offset -= out_strides[d] * out_shape[d];
            index[d] = 0;
        }
    }
    out
}

struct PermuteOp {
    out_shape: Vec<usize>,
    inverse: Vec<usize>,
}

impl<T: Scalar> Backward<T> for PermuteOp {
    fn name(&self) -> &'static str {
        "permute"
    }

    fn backward(&self, _: &[&Tensor<T>], _: &Tensor<T>, grad: &[T], _: &[bool]) -> Vec<Option<Vec<T>>> {
        vec![Some(permute_data(grad, &self.out_shape, &self.inverse))]
    }
}

struct ConcatOp {
    outer: usize,
    inner: usize,
    extents: Vec<usize>,
}

impl<T: Scalar> Backward<T> for ConcatOp {
    fn name(&self) -> &'static str {
        "concat"
    }

    fn backward(&self, _: &[&Tensor<T>], _: &Tensor<T>, grad: &[T], needs: &[bool]) -> Vec<Option<Vec<T>>> {
        let total: usize = self.extents.iter().sum();
        let mut offset = 0;
        let mut out = Vec::with_capacity(self.extents.len());
        for (&e, &need) in self.extents.iter().zip(needs) {
            if need {
                let run = e * self.inner;
                let mut g = Vec::with_capacity(self.outer * run);
                for o in 0..self.outer {
                    let start = (o * total + offset) * self.inner;
                    g.extend_from_slice(&grad[start..start + run]);
                }
                out.push(Some(g));
            } else {
                out.push(None);
            }
            offset += e;
        }
        out
    }
}

struct SliceOp {
    outer: usize,
    inner: usize,
    extent: usize,
    start: usize,
    len: usize,
}

impl<T: Scalar> Backward<T> for SliceOp {
    fn name(&self) -> &'static str {
        "slice"
    }

    fn backward(&self, _: &[&Tensor<T>], _: &Tensor<T>, grad: &[T], _: &[bool]) -> Vec<Option<Vec<T>>> {
        let mut g = vec![T::zero(); self.outer * self.extent * self.inner];
        let run = self.len * self.inner;
        for o in 0..self.outer {
            let dst = (o * self.extent + self.start) * self.inner;
            g[dst..dst + run].copy_from_slice(&grad[o * run..(o + 1) * run]);
        }
        vec![Some(g)]
    }
}

impl<'g, T: Scalar> Var<'g, T> {
    fn binary(self, other: Var<'g, T>, kind: Binary) -> Result<Var<'g, T>> {
        let (a, b) = (self.value(), other.value());
        let name = <BinaryOp as Backward<T>>::name(&BinaryOp(kind));
        if a.shape() != b.shape() {
            return Err(shape_err(name, a.shape(), b.shape()));
        }
        let data = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| match kind {
                Binary::Add => x + y,
                Binary::Sub => x - y,
                Binary::Mul => x * y,
            })
            .collect();
        let out = Tensor::new(a.shape().to_vec(), data)?;
        self.graph().push(out, &[self, other], BinaryOp(kind))
    }

    pub fn add(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        self.binary(other, Binary::Add)
    }

    pub fn sub(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        self.binary(other, Binary::Sub)
    }

    pub fn mul(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        self.binary(other, Binary::Mul)
    }

    /// `self · s`.
    pub fn scale(self, s: T) -> Result<Var<'g, T>> {
        let a = self.value();
        let out = Tensor::new(a.shape().to_vec(), a.data().iter().map(|&x| x * s).collect())?;
        self.graph().push(out, &[self], ScaleOp(s))
    }

    /// `self + s`.
    pub fn add_scalar(self, s: T) -> Result<Var<'g, T>> {
        let a = self.value();
        let out = Tensor::new(a.shape().to_vec(), a.data().iter().map(|&x| x + s).collect())?;
        self.graph().push(out, &[self], ShiftOp)
    }

    /// Matrix product `[.., m, k] × [.., k, n] → [.., m, n]`. Leading axes,
    /// when present, must be identical on both operands.
    pub fn matmul(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        let (a, b) = (self.value(), other.value());
        let (sa, sb) = (a.shape(), b.shape());
        let ok = sa.len() >= 2
            && sa.len() == sb.len()
            && sa[..sa.len() - 2] == sb[..sb.len() - 2]
            && sa[sa.len() - 1] == sb[sb.len() - 2];
        if !ok {
            return Err(shape_err("matmul", sa, sb));
        }
        let r = sa.len();
        let (m, k, n) = (sa[r - 2], sa[r - 1], sb[r - 1]);
        let batch = numel(&sa[..r - 2]);
        let exec = self.graph().exec();
        let mut c = vec![T::zero(); batch * m * n];
        for s in 0..batch {
            gemm_nn(
                exec,
                m,
                k,
                n,
                &a.data()[s * m * k..(s + 1) * m * k],
                &b.data()[s * k * n..(s + 1) * k * n],
                &mut c[s * m * n..(s + 1) * m * n],
            );
        }
        let mut shape = sa[..r - 2].to_vec();
        shape.extend([m, n]);
        let out = Tensor::new(shape, c)?;
        self.graph()
            .push(out, &[self, other], MatMulOp { batch, m, k, n, exec })
    }

    /// Reduces along `axis`, or over every element when `axis` is `None`.
    /// The reduced axis is removed from the shape. `Max` routes the gradient
    /// to the first maximum in row-major order.
    pub fn reduce(self, kind: Reduce, axis: Option<usize>) -> Result<Var<'g, T>> {
        let a = self.value();
        let (outer, extent, inner, shape) = match axis {
            None => (1, a.len(), 1, Vec::new()),
            Some(ax) if ax < a.rank() => {
                let (o, e, i) = axis_split(a.shape(), ax);
                let mut s = a.shape().to_vec();
                s.remove(ax);
                (o, e, i, s)
            }
            Some(ax) => {
                return Err(Error::Axis {
                    op: "reduce",
                    axis: ax,
                    rank: a.rank(),
                })
            }
        };
        let x = a.data();
        let mut out = Vec::with_capacity(outer * inner);
        let mut argmax = Vec::new();
        for o in 0..outer {
            for i in 0..inner {
                let at = |e: usize| (o * extent + e) * inner + i;
                match kind {
                    Reduce::Sum | Reduce::Mean => {
                        let mut acc = T::zero();
                        for e in 0..extent {
                            acc = acc + x[at(e)];
                        }
                        if kind == Reduce::Mean {
                            acc = acc / T::of_usize(extent);
                        }
                        out.push(acc);
                    }
                    Reduce::Max => {
                        let mut best = at(0);
                        for e in 1..extent {
                            if x[at(e)] > x[best] {
                                best = at(e);
                            }
                        }
                        argmax.push(best);
                        out.push(x[best]);
                    }
                }
            }
        }
        let out = Tensor::new(shape, out)?;
        self.graph().push(
            out,
            &[self],
            ReduceOp {
                kind,
                outer,
                extent,
                inner,
                argmax,
            },
        )
    }

    pub fn sum(self, axis: Option<usize>) -> Result<Var<'g, T>> {
        self.reduce(Reduce::Sum, axis)
    }

    pub fn mean(self, axis: Option<usize>) -> Result<Var<'g, T>> {
        self.reduce(Reduce::Mean, axis)
    }

    pub fn max(self, axis: Option<usize>) -> Result<Var<'g, T>> {
        self.reduce(Reduce::Max, axis)
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'g, T>> {
        let a = self.value();
        if numel(shape) != a.len() || shape.contains(&0) {
            return Err(shape_err("reshape", a.shape(), shape));
        }
        let out = Tensor::new(shape.to_vec(), a.data().to_vec())?;
        self.graph().push(out, &[self], ReshapeOp)
    }

    /// Reorders axes: output axis `d` is input axis `axes[d]`.
    pub fn permute(self, axes: &[usize]) -> Result<Var<'g, T>> {
        let a = self.value();
        let rank = a.rank();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&x| x >= rank || std::mem::replace(&mut seen[x], true)) {
            return Err(Error::invalid("permute", format!("{axes:?} is not a permutation of rank {rank}")));
        }
        let out_shape: Vec<usize> = axes.iter().map(|&x| a.shape()[x]).collect();
        let mut inverse = vec![0; rank];
        for (d, &x) in axes.iter().enumerate() {
            inverse[x] = d;
        }
        let out = Tensor::new(out_shape.clone(), permute_data(a.data(), a.shape(), axes))?;
        self.graph().push(out, &[self], PermuteOp { out_shape, inverse })
    }

    /// Swaps two axes.
    pub fn transpose(self, a: usize, b: usize) -> Result<Var<'g, T>> {
        let rank = self.shape().len();
        for ax in [a, b] {
            if ax >= rank {
                return Err(Error::Axis {
                    op: "transpose",
                    axis: ax,
                    rank,
                });
            }
        }
        let mut axes: Vec<usize> = (0..rank).collect();
        axes.swap(a, b);
        self.permute(&axes)
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(parts: &[Var<'g, T>], axis: usize) -> Result<Var<'g, T>> {
        let first = parts.first().ok_or(Error::Empty("concat operand list"))?;
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let s0 = values[0].shape();
        if axis >= s0.len() {
            return Err(Error::Axis {
                op: "concat",
                axis,
                rank: s0.len(),
            });
        }
        for v in &values[1..] {
            let s = v.shape();
            if s.len() != s0.len() || s.iter().zip(s0).enumerate().any(|(d, (x, y))| d != axis && x != y) {
                return Err(shape_err("concat", s0, s));
            }
        }
        let (outer, _, inner) = axis_split(s0, axis);
        let extents: Vec<usize> = values.iter().map(|v| v.shape()[axis]).collect();
        let total: usize = extents.iter().sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (v, &e) in values.iter().zip(&extents) {
                let run = e * inner;
                data.extend_from_slice(&v.data()[o * run..(o + 1) * run]);
            }
        }
        let mut shape = s0.to_vec();
        shape[axis] = total;
        let out = Tensor::new(shape, data)?;
        first.graph().push(out, parts, ConcatOp { outer, inner, extents })
    }

    /// Elements `start..start + len` along `axis`.
    pub fn slice(self, axis: usize, start: usize, len: usize) -> Result<Var<'g, T>> {
        let a = self.value();
        if axis >= a.rank() {
            return Err(Error::Axis {
                op: "slice",
                axis,
                rank: a.rank(),
            });
        }
        let (outer, extent, inner) = axis_split(a.shape(), axis);
        if len == 0 || start + len > extent {
            return Err(Error::invalid(
                "slice",
                format!("range {start}..{} outside extent {extent}", start + len),
            ));
        }
        let run = len * inner;
        let mut data = Vec::with_capacity(outer * run);
        for o in 0..outer {
            let src = (o * extent + start) * inner;
            data.extend_from_slice(&a.data()[src..src + run]);
        }
        let mut shape = a.shape().to_vec();
        shape[axis] = len;
        let out = Tensor::new(shape, data)?;
        self.graph().push(
            out,
            &[self],
            SliceOp {
                outer,
                inner,
                extent,
                start,
                len,
            },
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::finite_diff_check;
    use crate::Graph;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), v).unwrap()
    }

    fn triple_loop(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for kk in 0..k {
                    c[i * n + j] += a[i * k + kk] * b[kk * n + j];
                }
            }
        }
        c
    }

    #[test]
    fn matmul_examples() {
        let g = Graph::<f64>::new();
        let id = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let m = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        assert_eq!(id.matmul(m).unwrap().value().data(), &[1.0, 2.0, 3.0, 4.0]);

        let b = [5.0, 6.0, 7.0, 8.0];
        let prod = m.matmul(g.constant(t(&[2, 2], &b))).unwrap();
        let oracle = triple_loop(&[1.0, 2.0, 3.0, 4.0], &b, 2, 2, 2);
        assert_eq!(oracle, vec![19.0, 22.0, 43.0, 50.0]);
        assert_eq!(prod.value().data(), &oracle[..]);

        let z = m.matmul(g.constant(Tensor::zeros([2, 3]))).unwrap();
        assert_eq!(z.value().data(), &[0.0; 6]);
    }

    #[test]
    fn matmul_shape_errors_name_both_shapes() {
        let g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros([2, 3]));
        let b = g.constant(Tensor::zeros([2, 3]));
        let err = a.matmul(b).unwrap_err();
        assert!(err.to_string().contains("[2, 3] vs [2, 3]"), "{err}");
        let c = g.constant(Tensor::zeros([2, 3, 4]));
        let d = g.constant(Tensor::zeros([3, 4, 2]));
        assert!(c.matmul(d).is_err());
    }

    #[test]
    fn batched_matmul_matches_per_slice_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = Tensor::<f64>::randn([3, 2, 4], 1.0, &mut rng);
        let b = Tensor::<f64>::randn([3, 4, 5], 1.0, &mut rng);
        let g = Graph::new();
        let c = g.constant(a.clone()).matmul(g.constant(b.clone())).unwrap().value();
        assert_eq!(c.shape(), &[3, 2, 5]);
        for s in 0..3 {
            let want = triple_loop(&a.data()[s * 8..(s + 1) * 8], &b.data()[s * 20..(s + 1) * 20], 2, 4, 5);
            assert_eq!(&c.data()[s * 10..(s + 1) * 10], &want[..]);
        }
    }

    #[test]
    fn elementwise_examples() {
        let g = Graph::<f64>::new();
        let a = g.constant(t(&[2], &[1.0, 2.0]));
        let b = g.constant(t(&[2], &[3.0, 4.0]));
        assert_eq!(a.add(b).unwrap().value().data(), &[4.0, 6.0]);
        assert_eq!(a.scale(0.0).unwrap().value().data(), &[0.0, 0.0]);
        let x = g.constant(t(&[3], &[1.0, 2.0, 3.0]));
        let want: Vec<f64> = [1.0, 2.0, 3.0].iter().map(|v| v * 2.5).collect();
        assert_eq!(x.scale(2.5).unwrap().value().data(), &want[..]);
        assert!(a.add(x).is_err());
    }

    #[test]
    fn overflow_is_an_error() {
        let g = Graph::<f32>::new();
        let a = g.constant(Tensor::full([1], f32::MAX));
        assert!(matches!(a.scale(2.0), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn reduce_examples() {
        let g = Graph::<f64>::new();
        assert_eq!(g.constant(t(&[3], &[1.0, 2.0, 3.0])).sum(None).unwrap().value().item(), 6.0);
        assert_eq!(g.constant(t(&[2], &[2.0, 4.0])).mean(None).unwrap().value().item(), 3.0);
        let m = g.constant(t(&[2, 2], &[1.0, 5.0, 7.0, 2.0]));
        let r = m.max(Some(1)).unwrap().value();
        assert_eq!(r.shape(), &[2]);
        assert_eq!(r.data(), &[5.0, 7.0]);
        assert!(matches!(m.sum(Some(2)), Err(Error::Axis { .. })));
    }

    #[test]
    fn max_routes_to_first_maximum() {
        let g = Graph::<f64>::new();
        let x = g.input(t(&[2, 3], &[4.0, 4.0, 1.0, 0.0, 2.0, 2.0]));
        let grads = g.backward(x.max(Some(1)).unwrap().sum(None).unwrap()).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn mean_spreads_one_over_n() {
        let g = Graph::<f64>::new();
        let x = g.input(Tensor::zeros([2, 4]));
        let grads = g.backward(x.mean(None).unwrap()).unwrap();
        assert!(grads.get(x).unwrap().data().iter().all(|&v| v == 0.125));
    }

    #[test]
    fn restructure_examples() {
        let g = Graph::<f64>::new();
        let r = g.constant(t(&[4], &[1.0, 2.0, 3.0, 4.0])).reshape(&[2, 2]).unwrap().value();
        assert_eq!((r.shape(), r.data()), (&[2usize, 2][..], &[1.0, 2.0, 3.0, 4.0][..]));

        let a = g.constant(t(&[2, 1], &[1.0, 2.0]));
        let b = g.constant(t(&[2, 1], &[3.0, 4.0]));
        let c = Var::concat(&[a, b], 1).unwrap().value();
        // index map: out[i, j] = parts[j][i, 0]
        let mut want = vec![0.0; 4];
        for i in 0..2 {
            want[i * 2] = [1.0, 2.0][i];
            want[i * 2 + 1] = [3.0, 4.0][i];
        }
        assert_eq!(c.shape(), &[2, 2]);
        assert_eq!(c.data(), &want[..]);
        assert!(g.constant(t(&[4], &[0.0; 4])).reshape(&[3]).is_err());
        assert!(Var::concat(&[a, g.constant(Tensor::zeros([3, 1]))], 1).is_err());
    }

    #[test]
    fn permute_matches_index_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Tensor::<f64>::randn([2, 3, 4], 1.0, &mut rng);
        let g = Graph::new();
        let p = g.constant(x.clone()).permute(&[2, 0, 1]).unwrap().value();
        assert_eq!(p.shape(), &[4, 2, 3]);
        for a in 0..2 {
            for b in 0..3 {
                for c in 0..4 {
                    assert_eq!(p.data()[c * 6 + a * 3 + b], x.data()[a * 12 + b * 4 + c]);
                }
            }
        }
    }

    #[test]
    fn concat_slice_round_trip_gradient_equals_direct_path() {
        fn direct<'g>(g: &'g Graph<f64>, x: Var<'g, f64>, w: &Tensor<f64>) -> Result<Var<'g, f64>> {
            let w = g.constant(w.clone());
            x.mul(x)?.mul(w)?.sum(None)
        }
        fn round_trip<'g>(g: &'g Graph<f64>, x: Var<'g, f64>, w: &Tensor<f64>) -> Result<Var<'g, f64>> {
            let other = g.constant(Tensor::full([2, 5], 0.5));
            let cat = Var::concat(&[other, x], 1)?;
            direct(g, cat.slice(1, 5, 3)?, w)
        }
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a0 = Tensor::<f64>::randn([2, 3], 1.0, &mut rng);
        let w = Tensor::<f64>::randn([2, 3], 1.0, &mut rng);
        let g = Graph::new();
        let x = g.input(a0.clone());
        let gd = g.backward(direct(&g, x, &w).unwrap()).unwrap().get(x).unwrap();
        let x = g.input(a0.clone());
        let gr = g.backward(round_trip(&g, x, &w).unwrap()).unwrap().get(x).unwrap();
        assert_eq!(gd, gr);
        let check = finite_diff_check(|g, x| round_trip(g, x, &w), &a0, 1e-5).unwrap();
        assert!(check.max_rel_error < 1e-7, "{check:?}");
    }

    proptest! {
        #[test]
        fn transpose_is_an_involution(rows in 1usize..6, cols in 1usize..6, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = Tensor::<f64>::randn([rows, cols], 1.0, &mut rng);
            let g = Graph::new();
            let back = g.constant(x.clone()).transpose(0, 1).unwrap().transpose(0, 1).unwrap().value();
            prop_assert_eq!(&*back, &x);
        }

        #[test]
        fn restructuring_preserves_values(a in 1usize..4, b in 1usize..4, c in 1usize..4, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = Tensor::<f64>::randn([a, b, c], 1.0, &mut rng);
            let g = Graph::new();
            let v = g.constant(x.clone());
            let p = v.permute(&[1, 2, 0]).unwrap().reshape(&[b * c * a]).unwrap().value();
            let mut got: Vec<u64> = p.data().iter().map(|v| v.to_bits()).collect();
            let mut want: Vec<u64> = x.data().iter().map(|v| v.to_bits()).collect();
            got.sort_unstable();
            want.sort_unstable();
            prop_assert_eq!(got, want);

            // concat then the complementary slices reproduce the operands
            let y = g.constant(Tensor::<f64>::randn([a, 2, c], 1.0, &mut rng));
            let cat = Var::concat(&[v, y], 1).unwrap();
            prop_assert_eq!(&*cat.slice(1, 0, b).unwrap().value(), &x);
            prop_assert_eq!(cat.slice(1, b, 2).unwrap().value(), y.value());
        }
    }
}
