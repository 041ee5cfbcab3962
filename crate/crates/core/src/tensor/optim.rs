use indexmap::IndexMap;

use super::{ParamSet, Tensor};
use crate::error::{bail, Result};

/// SGD with heavy-ball momentum and L2 weight decay.
///
/// `v ← μ·v + ∇θ + λ·θ`, `θ ← θ − η·v`. Gradients are cleared after each step.
#[derive(Clone, Debug, PartialEq)]
pub struct Sgd {
    pub momentum: f32,
    pub weight_decay: f32,
    velocity: IndexMap<String, Vec<f32>>,
}

impl Sgd {
    pub fn new(momentum: f32, weight_decay: f32) -> Self {
        Sgd {
            momentum,
            weight_decay,
            velocity: IndexMap::new(),
        }
    }

    /// Applies one update; `lr` gives the learning rate per parameter name.
    pub fn step(&mut self, params: &mut ParamSet, lr: impl Fn(&str) -> f32) -> Result<()> {
        for (name, p) in params.iter() {
            if p.requires_grad && p.grad.is_none() {
                bail!(Usage, "parameter {name:?} has no gradient; run backward first");
            }
        }
        for (name, p) in params.iter_mut() {
            if !p.requires_grad {
                continue;
            }
            let grad = p.grad.take().expect("checked above");
            let rate = lr(name);
            let v = self
                .velocity
                .entry(name.to_string())
                .or_insert_with(|| vec![0.0; grad.len()]);
            for ((theta, vel), g) in p.data_mut().iter_mut().zip(v.iter_mut()).zip(grad) {
                *vel = self.momentum * *vel + g + self.weight_decay * *theta;
                *theta -= rate * *vel;
            }
        }
        Ok(())
    }

    /// Velocity buffers as a parameter set, for checkpointing.
    pub fn state(&self, like: &ParamSet) -> ParamSet {
        let mut out = ParamSet::new();
        for (name, p) in like.iter() {
            let data = self
                .velocity
                .get(name)
                .cloned()
                .unwrap_or_else(|| vec![0.0; p.numel()]);
            out.insert(name, Tensor::new(p.shape(), data).expect("same shape"))
                .expect("unique names");
        }
        out
    }

    pub fn load_state(&mut self, state: &ParamSet) {
        self.velocity = state
            .iter()
            .map(|(n, t)| (n.to_string(), t.data().to_vec()))
            .collect();
    }
}

/// Single-rate convenience wrapper around [`Sgd::step`].
pub fn sgd_step(
    params: &mut ParamSet,
    opt: &mut Sgd,
    lr: f32,
    momentum: f32,
    weight_decay: f32,
) -> Result<()> {
    opt.momentum = momentum;
    opt.weight_decay = weight_decay;
    opt.step(params, |_| lr)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(value: f32, grad: f32) -> ParamSet {
        let mut p = ParamSet::new();
        let mut t = Tensor::new(&[1], vec![value]).unwrap().with_grad(true);
        t.grad = Some(vec![grad]);
        p.insert("w", t).unwrap();
        p
    }

    #[test]
    fn zero_lr_leaves_params() {
        let mut p = one_param(1.5, 3.0);
        let mut opt = Sgd::new(0.9, 1e-4);
        sgd_step(&mut p, &mut opt, 0.0, 0.9, 1e-4).unwrap();
        assert_eq!(p.get("w").unwrap().data(), &[1.5]);
        assert!(p.get("w").unwrap().grad.is_none());
    }

    #[test]
    fn plain_step_is_exact() {
        let mut p = one_param(1.5, 3.0);
        let mut opt = Sgd::new(0.0, 0.0);
        sgd_step(&mut p, &mut opt, 0.1, 0.0, 0.0).unwrap();
        assert_eq!(p.get("w").unwrap().data(), &[1.5 - 0.1 * 3.0]);
    }

    #[test]
    fn two_momentum_steps_unroll() {
        let (theta0, g, lr) = (2.0f32, 0.5f32, 0.1f32);
        let mut p = one_param(theta0, g);
        let mut opt = Sgd::new(0.9, 0.0);
        sgd_step(&mut p, &mut opt, lr, 0.9, 0.0).unwrap();
        p.get_mut("w").unwrap().grad = Some(vec![g]);
        sgd_step(&mut p, &mut opt, lr, 0.9, 0.0).unwrap();
        // v1 = g, v2 = 0.9 g + g
        let expected = theta0 - lr * g - lr * (1.9 * g);
        assert!((p.get("w").unwrap().data()[0] - expected).abs() < 1e-6);
    }

    #[test]
    fn missing_grad_is_usage_error() {
        let mut p = one_param(1.0, 0.0);
        p.get_mut("w").unwrap().grad = None;
        let mut opt = Sgd::new(0.9, 0.0);
        assert!(opt.step(&mut p, |_| 0.1).is_err());
    }
}
