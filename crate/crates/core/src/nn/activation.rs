use crate::tensor::Backward;
use crate::{Error, Result, Scalar, Tensor, Var};

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

struct ReluOp;

impl<T: Scalar> Backward<T> for ReluOp {
    fn name(&self) -> &'static str {
        "relu"
    }

    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, grad: &[T], _: &[bool]) -> Vec<Option<Vec<T>>> {
        let x = inputs[0].data();
        vec![Some(
            grad.iter()
                .zip(x)
                .map(|(&g, &v)| if v > T::zero() { g } else { T::zero() })
                .collect(),
        )]
    }
}

struct GeluOp;

impl<T: Scalar> Backward<T> for GeluOp {
    fn name(&self) -> &'static str {
        "gelu"
    }

    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, grad: &[T], _: &[bool]) -> Vec<Option<Vec<T>>> {
        let (c, a) = (T::of(SQRT_2_OVER_PI), T::of(GELU_CUBIC));
        let half = T::of(0.5);
        let three = T::of(3.0);
        vec![Some(
            grad.iter()
                .zip(inputs[0].data())
                .map(|(&g, &x)| {
                    let t = (c * (x + a * x * x * x)).tanh();
                    let du = c * (T::one() + three * a * x * x);
                    g * (half * (T::one() + t) + half * x * (T::one() - t * t) * du)
                })
                .collect(),
        )]
    }
}

struct SoftmaxOp {
    dim: usize,
}

impl<T: Scalar> Backward<T> for SoftmaxOp {
    fn name(&self) -> &'static str {
        "softmax"
    }

    fn backward(&self, _: &[&Tensor<T>], output: &Tensor<T>, grad: &[T], _: &[bool]) -> Vec<Option<Vec<T>>> {
        let mut gx = Vec::with_capacity(grad.len());
        for (y, g) in output.data().chunks_exact(self.dim).zip(grad.chunks_exact(self.dim)) {
            let dot: T = y.iter().zip(g).map(|(&a, &b)| a * b).sum();
            gx.extend(y.iter().zip(g).map(|(&a, &b)| a * (b - dot)));
        }
        vec![Some(gx)]
    }
}

/// Row-max-stabilized softmax of one row, written into `out`.
pub(crate) fn softmax_row<T: Scalar>(row: &[T], out: &mut [T]) {
    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut z = T::zero();
    for (o, &v) in out.iter_mut().zip(row) {
        *o = (v - m).exp();
        z = z + *o;
    }
    out.iter_mut().for_each(|o| *o = *o / z);
}

impl<'g, T: Scalar> Var<'g, T> {
    /// `max(0, x)`; the subgradient at 0 is 0.
    pub fn relu(self) -> Result<Var<'g, T>> {
        let xv = self.value();
        let out = xv.data().iter().map(|&v| v.max(T::zero())).collect();
        self.graph().push(Tensor::new(xv.shape().to_vec(), out)?, &[self], ReluOp)
    }

    /// Tanh approximation `0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³)))`.
    pub fn gelu(self) -> Result<Var<'g, T>> {
        let xv = self.value();
        let (c, a, half) = (T::of(SQRT_2_OVER_PI), T::of(GELU_CUBIC), T::of(0.5));
        let out = xv
            .data()
            .iter()
            .map(|&x| half * x * (T::one() + (c * (x + a * x * x * x)).tanh()))
            .collect();
        self.graph().push(Tensor::new(xv.shape().to_vec(), out)?, &[self], GeluOp)
    }

    /// Softmax over the last axis.
    pub fn softmax(self) -> Result<Var<'g, T>> {
        let xv = self.value();
        let dim = *xv.shape().last().ok_or_else(|| Error::invalid("softmax", "rank-0 input"))?;
        let mut out = vec![T::zero(); xv.len()];
        for (row, o) in xv.data().chunks_exact(dim).zip(out.chunks_exact_mut(dim)) {
            softmax_row(row, o);
        }
        self.graph()
            .push(Tensor::new(xv.shape().to_vec(), out)?, &[self], SoftmaxOp { dim })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::testutil::{assert_gradcheck, project};
    use crate::Graph;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn relu_example_and_kink() {
        let g = Graph::<f64>::new();
        let x = g.input(Tensor::from_f64([3], &[-1.0, 0.0, 2.0]).unwrap());
        let y = x.relu().unwrap();
        assert_eq!(y.value().data(), &[0.0, 0.0, 2.0]);
        let gx = g.backward(y.sum(None).unwrap()).unwrap().get(x).unwrap();
        assert_eq!(gx.data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn softmax_examples() {
        let g = Graph::<f64>::new();
        let y = g.constant(Tensor::zeros([2])).softmax().unwrap().value();
        assert_eq!(y.data(), &[0.5, 0.5]);
        let y = g
            .constant(Tensor::from_f64([2], &[0.0, 3f64.ln()]).unwrap())
            .softmax()
            .unwrap()
            .value();
        // e^0 = 1, e^ln3 = 3
        assert!((y.data()[0] - 0.25).abs() < 1e-15 && (y.data()[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn softmax_survives_huge_logits() {
        let g = Graph::<f32>::new();
        let y = g
            .constant(Tensor::from_f64([3], &[1000.0, 1000.0, -1000.0]).unwrap())
            .softmax()
            .unwrap()
            .value();
        assert_eq!(y.data(), &[0.5, 0.5, 0.0]);
    }

    #[test]
    fn gelu_reference_values() {
        let g = Graph::<f64>::new();
        let y = g
            .constant(Tensor::from_f64([3], &[0.0, 1.0, -2.0]).unwrap())
            .gelu()
            .unwrap()
            .value();
        let reference = |x: f64| 0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_CUBIC * x.powi(3))).tanh());
        assert_eq!(y.data()[0], 0.0);
        assert!((y.data()[1] - 0.841_191_990_607_855).abs() < 1e-12);
        assert!((y.data()[2] - reference(-2.0)).abs() < 1e-15);
    }

    #[test]
    fn gradients_match_finite_differences() {
        for seed in 0..20u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = Tensor::<f64>::randn([3, 5], 1.5, &mut rng);
            let one = std::slice::from_ref(&x);
            assert_gradcheck(|g, v| project(g, v[0].relu()?, seed), one);
            assert_gradcheck(|g, v| project(g, v[0].gelu()?, seed), one);
            assert_gradcheck(|g, v| project(g, v[0].softmax()?, seed), one);
        }
    }

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one_and_ignore_shifts(
            v in prop::collection::vec(-30.0f64..30.0, 1..12),
            c in -50.0f64..50.0,
        ) {
            let n = v.len();
            let g = Graph::<f64>::new();
            let x = g.constant(Tensor::from_f64([n], &v).unwrap());
            let y = x.softmax().unwrap().value();
            prop_assert!((y.data().iter().sum::<f64>() - 1.0).abs() < 1e-12);
            let ys = x.add_scalar(c).unwrap().softmax().unwrap().value();
            for (a, b) in y.data().iter().zip(ys.data()) {
                prop_assert!((a - b).abs() < 1e-12);
            }

            let g32 = Graph::<f32>::new();
            let y32 = g32.constant(Tensor::from_f64([n], &v).unwrap()).softmax().unwrap().value();
            prop_assert!((y32.data().iter().sum::<f32>() - 1.0).abs() < 1e-6);
        }
    }
}
