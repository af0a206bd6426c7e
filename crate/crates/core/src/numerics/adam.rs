use crate::error::{Error, Result};
use crate::numerics::tensor::Tensor;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

/// Per-parameter moment estimates plus the shared step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    step: u64,
    first: Vec<Option<Vec<T>>>,
    second: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    /// Number of completed steps.
    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self, i: usize) -> Option<&[T]> {
        self.first.get(i).and_then(|m| m.as_deref())
    }

    pub fn second_moment(&self, i: usize) -> Option<&[T]> {
        self.second.get(i).and_then(|v| v.as_deref())
    }

    /// One bias-corrected Adam update over `params`, reading each tensor's
    /// gradient buffer. Tensors that do not require gradients are left
    /// untouched; a missing buffer counts as a zero gradient.
    pub fn step(&mut self, params: &mut [Tensor<T>]) -> Result<()> {
        if self.first.len() < params.len() {
            self.first.resize(params.len(), None);
            self.second.resize(params.len(), None);
        }
        for (i, p) in params.iter().enumerate() {
            if let Some(g) = p.grad() {
                if g.len() != p.numel() {
                    return Err(Error::dim(format!(
                        "parameter {i}: gradient of length {} for shape {:?}",
                        g.len(),
                        p.shape()
                    )));
                }
            }
            if let Some(m) = &self.first[i] {
                if m.len() != p.numel() {
                    return Err(Error::dim(format!(
                        "parameter {i}: optimizer state of length {} for shape {:?}",
                        m.len(),
                        p.shape()
                    )));
                }
            }
        }

        self.step += 1;
        let t = self.step as i32;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let bias1 = T::lit(1.0 - beta1.powi(t));
        let bias2 = T::lit(1.0 - beta2.powi(t));
        let (lr, b1, b2, eps) = (T::lit(lr), T::lit(beta1), T::lit(beta2), T::lit(eps));

        for (i, p) in params.iter_mut().enumerate() {
            if !p.requires_grad() {
                continue;
            }
            let n = p.numel();
            let grad: Vec<T> = p.grad().map_or_else(|| vec![T::zero(); n], <[T]>::to_vec);
            let m = self.first[i].get_or_insert_with(|| vec![T::zero(); n]);
            let v = self.second[i].get_or_insert_with(|| vec![T::zero(); n]);
            for (((w, &g), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(&grad)
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mi = b1 * *mi + (T::one() - b1) * g;
                *vi = b2 * *vi + (T::one() - b2) * g * g;
                let m_hat = *mi / bias1;
                let v_hat = *vi / bias2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
