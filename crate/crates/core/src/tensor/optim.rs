//! Stochastic gradient descent with classical momentum.

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// One SGD update:
/// `velocity <- momentum * velocity - lr * grad; param <- param + velocity`.
pub fn sgd_step(
    params: &mut [&mut Tensor],
    grads: &[Tensor],
    velocities: &mut [Tensor],
    lr: Scalar,
    momentum: Scalar,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != velocities.len() {
        return Err(Error::invalid(format!(
            "sgd_step got {} params, {} grads, {} velocities",
            params.len(),
            grads.len(),
            velocities.len()
        )));
    }
    if !(lr >= 0.0) {
        return Err(Error::invalid(format!("learning rate {lr} must be >= 0")));
    }
    if !(0.0..1.0).contains(&momentum) {
        return Err(Error::invalid(format!("momentum {momentum} must be in [0, 1)")));
    }
    for ((p, g), v) in params.iter_mut().zip(grads.iter()).zip(velocities.iter_mut()) {
        if p.shape() != g.shape() || p.shape() != v.shape() {
            return Err(Error::invalid(format!(
                "sgd_step shape mismatch: param {:?}, grad {:?}, velocity {:?}",
                p.shape(),
                g.shape(),
                v.shape()
            )));
        }
        for ((pv, gv), vv) in p
            .data_mut()
            .iter_mut()
            .zip(g.data().iter())
            .zip(v.data_mut().iter_mut())
        {
            *vv = momentum * *vv - lr * gv;
            *pv += *vv;
        }
    }
    Ok(())
}

/// Holds the velocity buffers for a fixed parameter list.
#[derive(Clone, Debug)]
pub struct SgdOptimizer {
    pub lr: Scalar,
    pub momentum: Scalar,
    velocities: Vec<Tensor>,
}

impl SgdOptimizer {
    pub fn new(lr: Scalar, momentum: Scalar, param_shapes: &[&[usize]]) -> Self {
        SgdOptimizer {
            lr,
            momentum,
            velocities: param_shapes.iter().map(|s| Tensor::zeros(s)).collect(),
        }
    }

    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) -> Result<()> {
        sgd_step(params, grads, &mut self.velocities, self.lr, self.momentum)
    }

    pub fn velocities(&self) -> &[Tensor] {
        &self.velocities
    }

    /// Restore velocity buffers (checkpoint resume).
    pub fn set_velocities(&mut self, velocities: Vec<Tensor>) -> Result<()> {
        if velocities.len() != self.velocities.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} velocity tensors, got {}",
                self.velocities.len(),
                velocities.len()
            )));
        }
        self.velocities = velocities;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn momentum_zero_is_vanilla_descent() {
        let mut p = Tensor::scalar(1.0);
        let g = vec![Tensor::scalar(0.5)];
        let mut v = vec![Tensor::scalar(0.0)];
        sgd_step(&mut [&mut p], &g, &mut v, 0.1, 0.0).unwrap();
        assert!((p.data()[0] - 0.95).abs() < 1e-15);
    }

    #[test]
    fn trajectory_matches_scalar_oracle() {
        // Minimize f(x) = x^2 from x = 1 with lr 0.1, momentum 0.9; the
        // oracle is an independent hand-rolled scalar loop.
        let (lr, momentum) = (0.1, 0.9);
        let mut ox = 1.0;
        let mut ov = 0.0;
        let mut oracle = Vec::new();
        for _ in 0..10 {
            let grad = 2.0 * ox;
            ov = momentum * ov - lr * grad;
            ox += ov;
            oracle.push(ox);
        }

        let mut p = Tensor::scalar(1.0);
        let mut opt = SgdOptimizer::new(lr, momentum, &[&[1]]);
        for expected in oracle {
            let g = vec![Tensor::scalar(2.0 * p.data()[0])];
            opt.step(&mut [&mut p], &g).unwrap();
            assert!((p.data()[0] - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn rejects_bad_hyperparameters() {
        let mut p = Tensor::scalar(0.0);
        let g = vec![Tensor::scalar(0.0)];
        let mut v = vec![Tensor::scalar(0.0)];
        assert!(sgd_step(&mut [&mut p], &g, &mut v, -0.1, 0.0).is_err());
        assert!(sgd_step(&mut [&mut p], &g, &mut v, 0.1, 1.0).is_err());
    }

    #[test]
    fn lr_zero_never_moves_parameters() {
        let mut p = Tensor::scalar(2.0);
        let g = vec![Tensor::scalar(5.0)];
        let mut v = vec![Tensor::scalar(0.0)];
        for _ in 0..5 {
            sgd_step(&mut [&mut p], &g, &mut v, 0.0, 0.9).unwrap();
        }
        assert_eq!(p.data()[0], 2.0);
    }
}
