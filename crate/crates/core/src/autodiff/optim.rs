use super::tensor::{Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

/// First-order optimizer with L2 regularization added to the gradient.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    weight_decay: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    moments: Vec<(Vec<f64>, Vec<f64>)>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, weight_decay: f64) -> Result<Self, TensorError> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(TensorError::InvalidLearningRate(lr));
        }
        if !(weight_decay >= 0.0 && weight_decay.is_finite()) {
            return Err(TensorError::Invalid(format!(
                "weight decay must be nonnegative, got {weight_decay}"
            )));
        }
        Ok(Self {
            kind,
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments: Vec::new(),
        })
    }

    pub fn sgd(lr: f64, weight_decay: f64) -> Result<Self, TensorError> {
        Self::new(OptimizerKind::Sgd, lr, weight_decay)
    }

    pub fn adam(lr: f64, weight_decay: f64) -> Result<Self, TensorError> {
        Self::new(OptimizerKind::Adam, lr, weight_decay)
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Updates `params` in place. A missing gradient counts as zero.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Option<Tensor>]) -> Result<(), TensorError> {
        if params.len() != grads.len() {
            return Err(TensorError::Invalid(format!(
                "{} parameters but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        for (p, g) in params.iter().zip(grads) {
            if let Some(g) = g {
                if g.shape() != p.shape() {
                    return Err(TensorError::ShapeMismatch {
                        op: "optimizer_step",
                        left: p.shape().to_vec(),
                        right: g.shape().to_vec(),
                    });
                }
            }
        }
        if self.moments.is_empty() && self.kind == OptimizerKind::Adam {
            self.moments = params
                .iter()
                .map(|p| (vec![0.0; p.numel()], vec![0.0; p.numel()]))
                .collect();
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let grad = g.as_ref().map(Tensor::data);
            let values = p.data_mut();
            match self.kind {
                OptimizerKind::Sgd => {
                    for (j, w) in values.iter_mut().enumerate() {
                        let d = grad.map_or(0.0, |g| g[j]) + self.weight_decay * *w;
                        *w -= self.lr * d;
                    }
                }
                OptimizerKind::Adam => {
                    let (m, v) = &mut self.moments[i];
                    for (j, w) in values.iter_mut().enumerate() {
                        let d = grad.map_or(0.0, |g| g[j]) + self.weight_decay * *w;
                        m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * d;
                        v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * d * d;
                        let m_hat = m[j] / bc1;
                        let v_hat = v[j] / bc2;
                        *w -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
                    }
                }
            }
        }
        Ok(())
    }
}
