//! Adam optimizer with bias correction.

use super::{NumericsError, Tensor};

/// Per-parameter-group Adam state (first/second moments and step counter).
#[derive(Debug, Clone)]
pub struct AdamState {
    alpha: f64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
}

impl AdamState {
    /// State for parameters of the given shapes, learning rate `alpha`,
    /// β₁ = 0.9, β₂ = 0.999, ε = 1e-8.
    pub fn new(alpha: f64, shapes: &[Vec<usize>]) -> Self {
        AdamState {
            alpha,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            m: shapes.iter().map(|s| Tensor::zeros(s.clone())).collect(),
            v: shapes.iter().map(|s| Tensor::zeros(s.clone())).collect(),
            t: 0,
        }
    }

    pub fn for_params(alpha: f64, params: &[Tensor]) -> Self {
        let shapes: Vec<Vec<usize>> = params.iter().map(|p| p.shape().to_vec()).collect();
        Self::new(alpha, &shapes)
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    pub fn learning_rate(&self) -> f64 {
        self.alpha
    }

    /// One bias-corrected update, in place.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<(), NumericsError> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(NumericsError::Contract(format!(
                "adam_step: expected {} parameter tensors, got {} params / {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for ((p, g), (m, _v)) in params
            .iter()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            if p.shape() != g.shape() || p.shape() != m.shape() {
                return Err(NumericsError::ShapeMismatch {
                    op: "adam_step",
                    detail: format!(
                        "param {:?} vs grad {:?} vs state {:?}",
                        p.shape(),
                        g.shape(),
                        m.shape()
                    ),
                });
            }
        }
        self.t += 1;
        let t = self.t as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            let pd = p.data_mut();
            let gd = g.data();
            let md = m.data_mut();
            let vd = v.data_mut();
            for i in 0..pd.len() {
                md[i] = self.beta1 * md[i] + (1.0 - self.beta1) * gd[i];
                vd[i] = self.beta2 * vd[i] + (1.0 - self.beta2) * gd[i] * gd[i];
                let m_hat = md[i] / bc1;
                let v_hat = vd[i] / bc2;
                pd[i] -= self.alpha * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
        Ok(())
    }
}
