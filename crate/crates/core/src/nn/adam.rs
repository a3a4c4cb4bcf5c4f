//! Named trainable weights and the Adam update rule.

use super::{Graph, Scalar, Tensor};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum OptimError {
    #[error("parameter `{0}` has no gradient; run backward and accumulate first")]
    MissingGrad(String),
}

/// A trainable tensor with its Adam state. Names are unique within a model
/// and double as checkpoint tensor names.
#[derive(Debug, Clone)]
pub struct Parameter<F: Scalar> {
    pub name: String,
    pub tensor: Tensor<F>,
    pub adam_m: Vec<F>,
    pub adam_v: Vec<F>,
    pub step_count: u64,
}

impl<F: Scalar> Parameter<F> {
    pub fn new(name: impl Into<String>, mut tensor: Tensor<F>) -> Self {
        tensor.requires_grad = true;
        let n = tensor.numel();
        Self {
            name: name.into(),
            tensor,
            adam_m: vec![F::zero(); n],
            adam_v: vec![F::zero(); n],
            step_count: 0,
        }
    }

    /// Add this pass's gradient from `graph` into the parameter, if the
    /// parameter was used in the pass.
    pub fn accumulate_grad(&mut self, graph: &Graph<F>) {
        if let Some(src) = graph.param_grad(&self.name) {
            match &mut self.tensor.grad {
                Some(dst) => {
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d += *s;
                    }
                }
                None => self.tensor.grad = Some(src.to_vec()),
            }
        }
    }

    pub fn clear_grad(&mut self) {
        self.tensor.grad = None;
    }
}

/// Accumulate gradients from a finished backward pass into every parameter
/// of a model that participated in it.
pub fn accumulate_grads<'a, F: Scalar>(
    graph: &Graph<F>,
    params: impl IntoIterator<Item = &'a mut Parameter<F>>,
) {
    for p in params {
        p.accumulate_grad(graph);
    }
}

/// Adam with bias correction. The update consumes and clears gradients.
#[derive(Debug, Clone, Copy)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl Adam {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }

    /// One update over a parameter set. Every parameter must carry a
    /// gradient; otherwise the step is rejected naming the offender and no
    /// parameter is modified.
    pub fn step<'a, F: Scalar>(
        &self,
        params: impl IntoIterator<Item = &'a mut Parameter<F>>,
    ) -> Result<(), OptimError> {
        let params: Vec<&'a mut Parameter<F>> = params.into_iter().collect();
        for p in &params {
            if p.tensor.grad.is_none() {
                return Err(OptimError::MissingGrad(p.name.clone()));
            }
        }
        let b1 = F::from_f64(self.beta1);
        let b2 = F::from_f64(self.beta2);
        let one = F::one();
        for p in params {
            let grad = p.tensor.grad.take().expect("checked above");
            p.step_count += 1;
            let t = p.step_count as i32;
            let corr1 = F::from_f64(1.0 - self.beta1.powi(t));
            let corr2 = F::from_f64(1.0 - self.beta2.powi(t));
            let lr = F::from_f64(self.lr);
            let eps = F::from_f64(self.eps);
            for i in 0..grad.len() {
                let g = grad[i];
                p.adam_m[i] = b1 * p.adam_m[i] + (one - b1) * g;
                p.adam_v[i] = b2 * p.adam_v[i] + (one - b2) * g * g;
                let m_hat = p.adam_m[i] / corr1;
                let v_hat = p.adam_v[i] / corr2;
                p.tensor.values[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
