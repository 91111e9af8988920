use crate::model::{ParamKind, ParamStore};
use crate::tensor::Gradients;
use crate::{Error, Result, Scalar, Tensor};

/// SGD with momentum and weight decay folded into the gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState<T> {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// skip weight decay on normalization affine terms and position
    /// embeddings
    pub exempt_norm_and_position: bool,
    velocity: Vec<Tensor<T>>,
}

impl<T: Scalar> OptimState<T> {
    /// Fresh state with zero velocities mirroring `params`.
    pub fn new(params: &ParamStore<T>, lr: f64, momentum: f64, weight_decay: f64) -> Result<Self> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {lr}")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::Config(format!("momentum must be in [0, 1), got {momentum}")));
        }
        if !(weight_decay >= 0.0 && weight_decay.is_finite()) {
            return Err(Error::Config(format!("weight decay must be non-negative, got {weight_decay}")));
        }
        Ok(OptimState {
            lr,
            momentum,
            weight_decay,
            exempt_norm_and_position: true,
            velocity: params.iter().map(|p| Tensor::zeros(p.value.shape())).collect(),
        })
    }

    pub fn velocity(&self) -> &[Tensor<T>] {
        &self.velocity
    }

    /// Replaces the velocities, checking they mirror `params`.
    pub fn set_velocity(&mut self, params: &ParamStore<T>, velocity: Vec<Tensor<T>>) -> Result<()> {
        self.check(params, &velocity)?;
        self.velocity = velocity;
        Ok(())
    }

    fn check(&self, params: &ParamStore<T>, velocity: &[Tensor<T>]) -> Result<()> {
        if velocity.len() != params.len() {
            return Err(Error::ConfigMismatch(format!(
                "{} velocity buffers for {} parameters",
                velocity.len(),
                params.len()
            )));
        }
        for (p, v) in params.iter().zip(velocity) {
            if p.value.shape() != v.shape() {
                return Err(Error::ConfigMismatch(format!(
                    "velocity of `{}` has shape {:?}, parameter has {:?}",
                    p.name,
                    v.shape(),
                    p.value.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> OptimState<U> {
        OptimState {
            lr: self.lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            exempt_norm_and_position: self.exempt_norm_and_position,
            velocity: self.velocity.iter().map(Tensor::cast).collect(),
        }
    }

    fn decay_for(&self, kind: ParamKind) -> f64 {
        match kind {
            ParamKind::Norm | ParamKind::Position if self.exempt_norm_and_position => 0.0,
            _ => self.weight_decay,
        }
    }
}

/// The update rule on raw buffers: `g = grad + wd·θ; v = m·v + g;
/// θ = θ − lr·v`.
pub fn sgd_update<T: Scalar>(theta: &mut [T], grad: &[T], velocity: &mut [T], lr: f64, momentum: f64, wd: f64) {
    assert!(theta.len() == grad.len() && theta.len() == velocity.len(), "buffer lengths differ");
    let (lr, m, wd) = (T::of(lr), T::of(momentum), T::of(wd));
    for ((t, &g), v) in theta.iter_mut().zip(grad).zip(velocity.iter_mut()) {
        let g = g + wd * *t;
        *v = m * *v + g;
        *t = *t - lr * *v;
    }
}

/// Applies one step to every parameter from the gradients of the pass that
/// registered them (keys are store indices). Consumes the gradients.
pub fn sgd_step<T: Scalar>(params: &mut ParamStore<T>, grads: Gradients<T>, state: &mut OptimState<T>) -> Result<()> {
    state.check(params, &state.velocity)?;
    let mut by_key: Vec<Option<Tensor<T>>> = vec![None; params.len()];
    for (key, g) in grads.params() {
        if let Some(slot) = by_key.get_mut(key) {
            *slot = Some(g);
        }
    }
    for (i, grad) in by_key.into_iter().enumerate() {
        let grad = grad.ok_or_else(|| Error::MissingGrad(params.get(i).name.clone()))?;
        let p = params.get(i);
        if grad.shape() != p.value.shape() {
            return Err(Error::Shape {
                op: "sgd_step",
                lhs: p.value.shape().to_vec(),
                rhs: grad.shape().to_vec(),
            });
        }
        let wd = state.decay_for(p.kind);
        let (lr, momentum) = (state.lr, state.momentum);
        let v = state.velocity[i].data_mut();
        sgd_update(params.value_mut(i).data_mut(), grad.data(), v, lr, momentum, wd);
    }
    Ok(())
}
