//! Nesterov-accelerated Adam and Nesterov SGD, both with coupled L2 weight
//! decay (`g <- g + wd * w` before any moment update).

use serde::{Deserialize, Serialize};

use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    Nadam { beta1: f64, beta2: f64, eps: f64 },
    Nsgd { momentum: f64 },
}

impl OptimizerKind {
    pub fn nadam_default() -> Self {
        OptimizerKind::Nadam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            OptimizerKind::Nadam { .. } => "nadam",
            OptimizerKind::Nsgd { .. } => "nsgd",
        }
    }
}

/// Per-parameter optimizer buffers.
///
/// `first` holds the first moment (NAdam) or the velocity (Nesterov SGD);
/// `second` holds the NAdam second moment and is empty for SGD.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T = f32> {
    pub kind: OptimizerKind,
    pub weight_decay: f64,
    pub step: u64,
    pub first: Vec<Tensor<T>>,
    pub second: Vec<Tensor<T>>,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(kind: OptimizerKind, weight_decay: f64, shapes: &[Vec<usize>]) -> Self {
        let zeros = || shapes.iter().map(|s| Tensor::zeros(s)).collect::<Vec<_>>();
        let second = match kind {
            OptimizerKind::Nadam { .. } => zeros(),
            OptimizerKind::Nsgd { .. } => Vec::new(),
        };
        Self {
            kind,
            weight_decay,
            step: 0,
            first: zeros(),
            second,
        }
    }

    /// Zeroes every buffer and the step counter.
    pub fn reset(&mut self) {
        let shapes: Vec<_> = self.first.iter().map(|t| t.shape().to_vec()).collect();
        *self = Self::new(self.kind, self.weight_decay, &shapes);
    }

    fn check(&self, params: &[Tensor<T>], grads: &[Tensor<T>], lr: f64) -> Result<()> {
        if !(lr > 0.0) {
            return Err(Error::Usage(format!("learning rate must be > 0, got {lr}")));
        }
        if params.len() != grads.len() || params.len() != self.first.len() {
            return Err(Error::Dimension(format!(
                "{} params, {} grads, {} optimizer slots",
                params.len(),
                grads.len(),
                self.first.len()
            )));
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.first) {
            p.expect_shape(g.shape())?;
            p.expect_shape(m.shape())?;
            g.check_finite("gradient")?;
        }
        Ok(())
    }

    /// One update of every parameter in place.
    pub fn step(&mut self, params: &mut [Tensor<T>], grads: &[Tensor<T>], lr: f64) -> Result<()> {
        self.check(params, grads, lr)?;
        self.step += 1;
        let wd = T::from_f64(self.weight_decay);
        match self.kind {
            OptimizerKind::Nadam { beta1, beta2, eps } => {
                // m  <- b1 m + (1 - b1) g
                // v  <- b2 v + (1 - b2) g^2
                // m_hat = m / (1 - b1^(t+1)),  g_hat = g / (1 - b1^t)
                // m_bar = b1 m_hat + (1 - b1) g_hat
                // w  <- w - lr * m_bar / (sqrt(v / (1 - b2^t)) + eps)
                let t = self.step as i32;
                let c_m = T::from_f64(beta1 / (1.0 - beta1.powi(t + 1)));
                let c_g = T::from_f64((1.0 - beta1) / (1.0 - beta1.powi(t)));
                let c_v = T::from_f64(1.0 / (1.0 - beta2.powi(t)));
                let (b1, b2) = (T::from_f64(beta1), T::from_f64(beta2));
                let (one, lr, eps) = (T::one(), T::from_f64(lr), T::from_f64(eps));
                for (((p, g), m), v) in params
                    .iter_mut()
                    .zip(grads)
                    .zip(self.first.iter_mut())
                    .zip(self.second.iter_mut())
                {
                    let pd = p.data_mut();
                    let md = m.data_mut();
                    let vd = v.data_mut();
                    for i in 0..pd.len() {
                        let gi = g.data()[i] + wd * pd[i];
                        md[i] = b1 * md[i] + (one - b1) * gi;
                        vd[i] = b2 * vd[i] + (one - b2) * gi * gi;
                        let m_bar = c_m * md[i] + c_g * gi;
                        pd[i] = pd[i] - lr * m_bar / ((vd[i] * c_v).sqrt() + eps);
                    }
                }
            }
            OptimizerKind::Nsgd { momentum } => {
                // v <- mu v + g;  w <- w - lr (g + mu v)
                let (mu, lr) = (T::from_f64(momentum), T::from_f64(lr));
                for ((p, g), vel) in params.iter_mut().zip(grads).zip(self.first.iter_mut()) {
                    let pd = p.data_mut();
                    let vd = vel.data_mut();
                    for i in 0..pd.len() {
                        let gi = g.data()[i] + wd * pd[i];
                        vd[i] = mu * vd[i] + gi;
                        pd[i] = pd[i] - lr * (gi + mu * vd[i]);
                    }
                }
            }
        }
        Ok(())
    }
}
