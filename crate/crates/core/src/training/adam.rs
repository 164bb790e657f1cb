use crate::error::{Error, Result};
use crate::numerics::{ParameterSet, Tensor};

/// First and second moment estimates, one pair per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: u64,
}

impl AdamState {
    pub fn zeros_like(params: &ParameterSet) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }
}

/// Bias-corrected Adam.
#[derive(Clone, Copy, Debug, PartialEq)]
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
    /// One update of `values` from `grads`; `t` is the 1-based step number.
    pub fn apply(&self, values: &mut [Tensor], grads: &[Tensor], state: &mut AdamState, t: u64) -> Result<()> {
        if t == 0 {
            return Err(Error::Contract("Adam step numbers start at 1".into()));
        }
        if values.len() != grads.len() || values.len() != state.m.len() {
            return Err(Error::Contract(format!(
                "Adam state for {} tensors given {} values and {} gradients",
                state.m.len(),
                values.len(),
                grads.len()
            )));
        }
        let bc1 = 1.0 - self.beta1.powi(t as i32);
        let bc2 = 1.0 - self.beta2.powi(t as i32);
        for (((p, g), m), v) in values.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
            if p.shape() != g.shape() || p.shape() != m.shape() {
                return Err(Error::dim("adam", p.shape(), g.shape()));
            }
            for (((pi, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *pi -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        state.step = t;
        Ok(())
    }

    /// Steps using the parameter set's own gradient accumulators.
    pub fn step(&self, params: &mut ParameterSet, state: &mut AdamState) -> Result<()> {
        let t = state.step + 1;
        let (values, grads) = params.values_and_grads_mut();
        self.apply(values, grads, state, t)
    }
}
