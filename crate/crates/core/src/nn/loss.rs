use crate::tensor::Backward;
use crate::{Error, Result, Scalar, Tensor, Var};

struct CrossEntropyOp {
    classes: usize,
    plane: usize,
    target: Vec<u8>,
}

impl<T: Scalar> Backward<T> for CrossEntropyOp {
    fn name(&self) -> &'static str {
        "cross_entropy"
    }

    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, grad: &[T], _: &[bool]) -> Vec<Option<Vec<T>>> {
        let logits = inputs[0].data();
        let (k, plane) = (self.classes, self.plane);
        let scale = grad[0] / T::of_usize(self.target.len());
        let mut gx = vec![T::zero(); logits.len()];
        for (p, &t) in self.target.iter().enumerate() {
            let (b, s) = (p / plane, p % plane);
            let at = |c: usize| (b * k + c) * plane + s;
            let m = (0..k).map(|c| logits[at(c)]).fold(T::neg_infinity(), T::max);
            let z: T = (0..k).map(|c| (logits[at(c)] - m).exp()).sum();
            for c in 0..k {
                let prob = (logits[at(c)] - m).exp() / z;
                let hot = if c == t as usize { T::one() } else { T::zero() };
                gx[at(c)] = (prob - hot) * scale;
            }
        }
        vec![Some(gx)]
    }
}

impl<'g, T: Scalar> Var<'g, T> {
    /// Mean over pixels of `−log softmax(logits)[target]` for logits
    /// `[B, K, H, W]` and a class map of `B·H·W` indices, computed in the
    /// log-sum-exp form.
    pub fn cross_entropy(self, target: &[u8]) -> Result<Var<'g, T>> {
        let lv = self.value();
        let s = lv.shape();
        if s.len() != 4 {
            return Err(Error::invalid("cross_entropy", format!("expected [B, K, H, W] logits, got {s:?}")));
        }
        let (batch, k, plane) = (s[0], s[1], s[2] * s[3]);
        if target.len() != batch * plane {
            return Err(Error::Shape {
                op: "cross_entropy",
                lhs: vec![batch, s[2], s[3]],
                rhs: vec![target.len()],
            });
        }
        if let Some(&bad) = target.iter().find(|&&t| t as usize >= k) {
            return Err(Error::invalid(
                "cross_entropy",
                format!("class index {bad} out of range for {k} classes"),
            ));
        }
        let x = lv.data();
        let mut total = T::zero();
        for (p, &t) in target.iter().enumerate() {
            let (b, sp) = (p / plane, p % plane);
            let at = |c: usize| (b * k + c) * plane + sp;
            let m = (0..k).map(|c| x[at(c)]).fold(T::neg_infinity(), T::max);
            let lse = m + (0..k).map(|c| (x[at(c)] - m).exp()).sum::<T>().ln();
            total = total + (lse - x[at(t as usize)]);
        }
        let loss = total / T::of_usize(target.len());
        self.graph().push(
            Tensor::scalar(loss),
            &[self],
            CrossEntropyOp {
                classes: k,
                plane,
                target: target.to_vec(),
            },
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::testutil::assert_gradcheck;
    use crate::Graph;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn uniform_logits_give_log_k() {
        let g = Graph::<f64>::new();
        let l = g
            .constant(Tensor::full([1, 4, 2, 2], 0.3))
            .cross_entropy(&[0, 1, 2, 3])
            .unwrap()
            .value()
            .item();
        assert!((l - 4f64.ln()).abs() < 1e-12);
        assert!((l - 1.386294).abs() < 1e-6);
    }

    #[test]
    fn confident_margin_drives_loss_to_zero() {
        let g = Graph::<f64>::new();
        let l = g
            .constant(Tensor::from_f64([1, 2, 1, 1], &[0.0, 60.0]).unwrap())
            .cross_entropy(&[1])
            .unwrap()
            .value()
            .item();
        assert!((0.0..1e-20).contains(&l));
    }

    #[test]
    fn two_pixel_worked_example() {
        // pixel 0 logits [0, 1] target 1; pixel 1 logits [2, 0] target 0;
        // layout [B=1, K=2, H=1, W=2]
        let g = Graph::<f64>::new();
        let l = g
            .constant(Tensor::from_f64([1, 2, 1, 2], &[0.0, 2.0, 1.0, 0.0]).unwrap())
            .cross_entropy(&[1, 0])
            .unwrap()
            .value()
            .item();
        let e = std::f64::consts::E;
        let want = (-(e / (1.0 + e)).ln() - (e * e / (e * e + 1.0)).ln()) / 2.0;
        assert!((l - want).abs() < 1e-14);
    }

    #[test]
    fn out_of_range_class_is_rejected() {
        let g = Graph::<f64>::new();
        let r = g.constant(Tensor::zeros([1, 2, 1, 1])).cross_entropy(&[2]);
        assert!(r.is_err());
    }

    #[test]
    fn loss_is_non_negative_and_gradients_match() {
        for seed in 0..20u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = Tensor::<f64>::randn([2, 3, 2, 3], 2.0, &mut rng);
            let target: Vec<u8> = (0..12).map(|_| rng.random_range(0..3)).collect();
            let g = Graph::new();
            assert!(g.constant(x.clone()).cross_entropy(&target).unwrap().value().item() > 0.0);
            assert_gradcheck(|_, v| v[0].cross_entropy(&target), &[x]);
        }
    }
}
