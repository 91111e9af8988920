use crate::tensor::Backward;
use crate::{Error, Result, Scalar, Tensor, Var};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
pub const LN_EPS: f64 = 1e-5;

/// Batch-norm inference statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormStats<T> {
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    /// weight of the newest batch statistic in the running blend
    pub momentum: f64,
    pub eps: f64,
}

impl<T: Scalar> BatchNormStats<T> {
    pub fn new(channels: usize) -> Self {
        BatchNormStats {
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            momentum: BN_MOMENTUM,
            eps: BN_EPS,
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }
}

/// Training mode normalizes with batch statistics and updates the running
/// statistics; evaluation mode normalizes with the running statistics.
pub enum BatchNormMode<'a, T> {
    Train(&'a mut BatchNormStats<T>),
    Eval(&'a BatchNormStats<T>),
}

struct BatchNormOp<T> {
    channels: usize,
    batch: usize,
    plane: usize,
    xhat: Vec<T>,
    inv_std: Vec<T>,
    training: bool,
}

impl<T: Scalar> Backward<T> for BatchNormOp<T> {
    fn name(&self) -> &'static str {
        "batch_norm2d"
    }

    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, grad: &[T], needs: &[bool]) -> Vec<Option<Vec<T>>> {
        let gamma = inputs[1].data();
        let (c_n, plane) = (self.channels, self.plane);
        let idx = |b: usize, c: usize| (b * c_n + c) * plane;
        let mut sum_dy = vec![T::zero(); c_n];
        let mut sum_dy_xhat = vec![T::zero(); c_n];
        for b in 0..self.batch {
            for c in 0..c_n {
                let s = idx(b, c);
                for i in s..s + plane {
                    sum_dy[c] = sum_dy[c] + grad[i];
                    sum_dy_xhat[c] = sum_dy_xhat[c] + grad[i] * self.xhat[i];
                }
            }
        }
        let gx = needs[0].then(|| {
            let mut gx = vec![T::zero(); grad.len()];
            let n = T::of_usize(self.batch * plane);
            for b in 0..self.batch {
                for c in 0..c_n {
                    let s = idx(b, c);
                    let k = gamma[c] * self.inv_std[c];
                    for i in s..s + plane {
                        gx[i] = if self.training {
                            k / n * (n * grad[i] - sum_dy[c] - self.xhat[i] * sum_dy_xhat[c])
                        } else {
                            k * grad[i]
                        };
                    }
                }
            }
            gx
        });
        vec![gx, needs[1].then_some(sum_dy_xhat), needs[2].then_some(sum_dy)]
    }
}

struct LayerNormOp<T> {
    dim: usize,
    xhat: Vec<T>,
    inv_std: Vec<T>,
}

impl<T: Scalar> Backward<T> for LayerNormOp<T> {
    fn name(&self) -> &'static str {
        "layer_norm"
    }

    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, grad: &[T], needs: &[bool]) -> Vec<Option<Vec<T>>> {
        let gamma = inputs[1].data();
        let d = self.dim;
        let dn = T::of_usize(d);
        let mut gx = needs[0].then(|| vec![T::zero(); grad.len()]);
        let mut gg = vec![T::zero(); d];
        let mut gb = vec![T::zero(); d];
        for (r, &inv) in self.inv_std.iter().enumerate() {
            let row = r * d..(r + 1) * d;
            let (dy, xh) = (&grad[row.clone()], &self.xhat[row.clone()]);
            let mut sum = T::zero();
            let mut sum_x = T::zero();
            for j in 0..d {
                gg[j] = gg[j] + dy[j] * xh[j];
                gb[j] = gb[j] + dy[j];
                let dxh = dy[j] * gamma[j];
                sum = sum + dxh;
                sum_x = sum_x + dxh * xh[j];
            }
            if let Some(gx) = gx.as_mut() {
                for j in 0..d {
                    let dxh = dy[j] * gamma[j];
                    gx[r * d + j] = inv / dn * (dn * dxh - sum - xh[j] * sum_x);
                }
            }
        }
        vec![gx, needs[1].then_some(gg), needs[2].then_some(gb)]
    }
}

impl<'g, T: Scalar> Var<'g, T> {
    /// Per-channel normalization of `[B, C, H, W]` followed by the affine
    /// `gamma·x̂ + beta`.
    pub fn batch_norm2d(
        self,
        gamma: Var<'g, T>,
        beta: Var<'g, T>,
        mode: BatchNormMode<'_, T>,
    ) -> Result<Var<'g, T>> {
        let xv = self.value();
        let s = xv.shape();
        if s.len() != 4 {
            return Err(Error::invalid("batch_norm2d", format!("expected [B, C, H, W], got {s:?}")));
        }
        let (batch, channels, plane) = (s[0], s[1], s[2] * s[3]);
        let (gv, bv) = (gamma.value(), beta.value());
        for p in [&gv, &bv] {
            if p.shape() != [channels] {
                return Err(Error::Shape {
                    op: "batch_norm2d",
                    lhs: p.shape().to_vec(),
                    rhs: vec![channels],
                });
            }
        }
        let x = xv.data();
        let idx = |b: usize, c: usize| (b * channels + c) * plane;
        let training = matches!(mode, BatchNormMode::Train(_));
        let (mean, inv_std) = match mode {
            BatchNormMode::Train(stats) => {
                let n = batch * plane;
                if n < 2 {
                    return Err(Error::invalid(
                        "batch_norm2d",
                        format!("training needs at least 2 values per channel, got {n}"),
                    ));
                }
                if stats.channels() != channels {
                    return Err(Error::Shape {
                        op: "batch_norm2d",
                        lhs: vec![stats.channels()],
                        rhs: vec![channels],
                    });
                }
                let nt = T::of_usize(n);
                let mut mean = vec![T::zero(); channels];
                let mut var = vec![T::zero(); channels];
                for c in 0..channels {
                    let mut acc = T::zero();
                    for b in 0..batch {
                        acc = acc + x[idx(b, c)..idx(b, c) + plane].iter().copied().sum::<T>();
                    }
                    mean[c] = acc / nt;
                    let mut sq = T::zero();
                    for b in 0..batch {
                        for &v in &x[idx(b, c)..idx(b, c) + plane] {
                            let d = v - mean[c];
                            sq = sq + d * d;
                        }
                    }
                    var[c] = sq / nt;
                }
                let m = T::of(stats.momentum);
                let keep = T::one() - m;
                let unbias = nt / T::of_usize(n - 1);
                for c in 0..channels {
                    stats.running_mean[c] = keep * stats.running_mean[c] + m * mean[c];
                    stats.running_var[c] = keep * stats.running_var[c] + m * var[c] * unbias;
                }
                let eps = T::of(stats.eps);
                let inv: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
                (mean, inv)
            }
            BatchNormMode::Eval(stats) => {
                if stats.channels() != channels {
                    return Err(Error::Shape {
                        op: "batch_norm2d",
                        lhs: vec![stats.channels()],
                        rhs: vec![channels],
                    });
                }
                let eps = T::of(stats.eps);
                let inv = stats
                    .running_var
                    .iter()
                    .map(|&v| T::one() / (v.max(T::zero()) + eps).sqrt())
                    .collect();
                (stats.running_mean.clone(), inv)
            }
        };
        let mut xhat = vec![T::zero(); x.len()];
        let mut out = vec![T::zero(); x.len()];
        for b in 0..batch {
            for c in 0..channels {
                let (g, be) = (gv.data()[c], bv.data()[c]);
                for i in idx(b, c)..idx(b, c) + plane {
                    let h = (x[i] - mean[c]) * inv_std[c];
                    xhat[i] = h;
                    out[i] = g * h + be;
                }
            }
        }
        let out = Tensor::new(s.to_vec(), out)?;
        self.graph().push(
            out,
            &[self, gamma, beta],
            BatchNormOp {
                channels,
                batch,
                plane,
                xhat,
                inv_std,
                training,
            },
        )
    }

    /// Normalizes each vector along the last axis, then `gamma·x̂ + beta`.
    pub fn layer_norm(self, gamma: Var<'g, T>, beta: Var<'g, T>, eps: f64) -> Result<Var<'g, T>> {
        let xv = self.value();
        let s = xv.shape();
        let d = *s.last().ok_or_else(|| Error::invalid("layer_norm", "rank-0 input"))?;
        let (gv, bv) = (gamma.value(), beta.value());
        for p in [&gv, &bv] {
            if p.shape() != [d] {
                return Err(Error::Shape {
                    op: "layer_norm",
                    lhs: p.shape().to_vec(),
                    rhs: vec![d],
                });
            }
        }
        let dn = T::of_usize(d);
        let eps = T::of(eps);
        let rows = xv.len() / d;
        let mut xhat = vec![T::zero(); xv.len()];
        let mut out = vec![T::zero(); xv.len()];
        let mut inv_std = Vec::with_capacity(rows);
        for (r, row) in xv.data().chunks_exact(d).enumerate() {
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let inv = T::one() / (var + eps).sqrt();
            inv_std.push(inv);
            for j in 0..d {
                let h = (row[j] - mean) * inv;
                xhat[r * d + j] = h;
                out[r * d + j] = gv.data()[j] * h + bv.data()[j];
            }
        }
        let out = Tensor::new(s.to_vec(), out)?;
        self.graph()
            .push(out, &[self, gamma, beta], LayerNormOp { dim: d, xhat, inv_std })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::testutil::{assert_gradcheck, project};
    use crate::Graph;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn affine(g: &Graph<f64>, c: usize, gamma: f64, beta: f64) -> (Var<'_, f64>, Var<'_, f64>) {
        (g.constant(Tensor::full([c], gamma)), g.constant(Tensor::full([c], beta)))
    }

    #[test]
    fn constant_channel_normalizes_to_zero() {
        let g = Graph::<f64>::new();
        let (ga, be) = affine(&g, 1, 1.0, 0.0);
        let mut stats = BatchNormStats::new(1);
        let y = g
            .constant(Tensor::full([2, 1, 2, 2], 3.0))
            .batch_norm2d(ga, be, BatchNormMode::Train(&mut stats))
            .unwrap()
            .value();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_gamma_yields_beta() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let g = Graph::<f64>::new();
        let (ga, be) = affine(&g, 3, 0.0, 0.25);
        let mut stats = BatchNormStats::new(3);
        let y = g
            .constant(Tensor::randn([2, 3, 2, 2], 1.0, &mut rng))
            .batch_norm2d(ga, be, BatchNormMode::Train(&mut stats))
            .unwrap()
            .value();
        assert!(y.data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn two_values_normalize_to_plus_minus_one() {
        let g = Graph::<f64>::new();
        let (ga, be) = affine(&g, 1, 1.0, 0.0);
        let mut stats = BatchNormStats::new(1);
        stats.eps = 1e-12;
        let y = g
            .constant(Tensor::from_f64([2, 1, 1, 1], &[1.0, 3.0]).unwrap())
            .batch_norm2d(ga, be, BatchNormMode::Train(&mut stats))
            .unwrap()
            .value();
        // mean 2, biased variance 1
        assert!((y.data()[0] + 1.0).abs() < 1e-9 && (y.data()[1] - 1.0).abs() < 1e-9);
        // running stats: 0.9·0 + 0.1·2, 0.9·1 + 0.1·(unbiased 2)
        assert!((stats.running_mean[0] - 0.2).abs() < 1e-15);
        assert!((stats.running_var[0] - 1.1).abs() < 1e-15);
    }

    #[test]
    fn training_needs_two_values_per_channel() {
        let g = Graph::<f64>::new();
        let (ga, be) = affine(&g, 1, 1.0, 0.0);
        let mut stats = BatchNormStats::new(1);
        let r = g
            .constant(Tensor::zeros([1, 1, 1, 1]))
            .batch_norm2d(ga, be, BatchNormMode::Train(&mut stats));
        assert!(r.is_err());
    }

    #[test]
    fn training_output_is_standardized() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let g = Graph::<f32>::new();
        let gamma = g.constant(Tensor::full([4], 1.0));
        let beta = g.constant(Tensor::zeros([4]));
        let mut x = Tensor::<f32>::randn([3, 4, 5, 5], 2.0, &mut rng);
        x.data_mut().iter_mut().for_each(|v| *v += 5.0);
        let mut stats = BatchNormStats::new(4);
        let y = g
            .constant(x)
            .batch_norm2d(gamma, beta, BatchNormMode::Train(&mut stats))
            .unwrap()
            .value();
        for c in 0..4 {
            let vals: Vec<f64> = (0..3)
                .flat_map(|b| y.data()[(b * 4 + c) * 25..(b * 4 + c + 1) * 25].iter().map(|&v| v as f64))
                .collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-5, "{mean}");
            assert!((var - 1.0).abs() < 1e-4, "{var}");
        }
    }

    #[test]
    fn eval_mode_uses_running_statistics() {
        let g = Graph::<f64>::new();
        let (ga, be) = affine(&g, 1, 2.0, 1.0);
        let stats = BatchNormStats {
            running_mean: vec![1.0],
            running_var: vec![4.0],
            momentum: 0.1,
            eps: 0.0,
        };
        let y = g
            .constant(Tensor::from_f64([1, 1, 1, 2], &[1.0, 5.0]).unwrap())
            .batch_norm2d(ga, be, BatchNormMode::Eval(&stats))
            .unwrap()
            .value();
        assert_eq!(y.data(), &[1.0, 5.0]);
    }

    #[test]
    fn layer_norm_examples() {
        let g = Graph::<f64>::new();
        let (ga, be) = affine(&g, 2, 1.0, 0.0);
        let y = g.constant(Tensor::full([3, 2], 7.0)).layer_norm(ga, be, LN_EPS).unwrap().value();
        assert!(y.data().iter().all(|&v| v == 0.0));
        let y = g
            .constant(Tensor::from_f64([1, 2], &[1.0, -1.0]).unwrap())
            .layer_norm(ga, be, 1e-14)
            .unwrap()
            .value();
        assert!((y.data()[0] - 1.0).abs() < 1e-12 && (y.data()[1] + 1.0).abs() < 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let beta = Tensor::<f64>::randn([6], 1.0, &mut rng);
        let beta_mean = beta.data().iter().sum::<f64>() / 6.0;
        let gamma = g.constant(Tensor::full([6], 1.5));
        let y = g
            .constant(Tensor::randn([4, 6], 3.0, &mut rng))
            .layer_norm(gamma, g.constant(beta), LN_EPS)
            .unwrap()
            .value();
        for row in y.data().chunks(6) {
            assert!((row.iter().sum::<f64>() / 6.0 - beta_mean).abs() < 1e-6);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        for seed in 0..20u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = Tensor::<f64>::randn([2, 3, 2, 3], 1.0, &mut rng);
            let gamma = Tensor::<f64>::randn([3], 1.0, &mut rng);
            let beta = Tensor::<f64>::randn([3], 1.0, &mut rng);
            assert_gradcheck(
                |g, v| {
                    let mut stats = BatchNormStats::new(3);
                    project(g, v[0].batch_norm2d(v[1], v[2], BatchNormMode::Train(&mut stats))?, seed)
                },
                &[x.clone(), gamma.clone(), beta.clone()],
            );
            let stats = BatchNormStats {
                running_mean: vec![0.1, -0.2, 0.3],
                running_var: vec![0.5, 1.5, 2.0],
                momentum: 0.1,
                eps: 1e-5,
            };
            assert_gradcheck(
                |g, v| project(g, v[0].batch_norm2d(v[1], v[2], BatchNormMode::Eval(&stats))?, seed),
                &[x, gamma, beta],
            );

            let x = Tensor::<f64>::randn([2, 3, 5], 1.0, &mut rng);
            let gamma = Tensor::<f64>::randn([5], 1.0, &mut rng);
            let beta = Tensor::<f64>::randn([5], 1.0, &mut rng);
            assert_gradcheck(|g, v| project(g, v[0].layer_norm(v[1], v[2], LN_EPS)?, seed), &[x, gamma, beta]);
        }
    }
}
