//! Classical SGD with momentum: `v <- m*v + g; p <- p - lr*v`.

use indexmap::IndexMap;

use crate::error::{Error, Result};

use super::params::ParameterMap;
use super::tape::Gradients;

/// Per-parameter velocity state.
#[derive(Debug, Clone, Default)]
pub struct SgdState {
    velocity: IndexMap<String, Vec<f64>>,
}

impl SgdState {
    pub fn new() -> SgdState {
        SgdState::default()
    }

    pub fn velocity(&self, name: &str) -> Option<&[f64]> {
        self.velocity.get(name).map(|v| v.as_slice())
    }
}

/// Scale gradients down so their global L2 norm is at most `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_grad_norm(grads: &mut Gradients, max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|(_, g)| g.iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        grads.scale_all(scale);
    }
    norm
}

/// One update step over every entry present in `grads`.
///
/// Entries absent from `grads` are left untouched (parameters and velocity),
/// which is how frozen sub-networks stay frozen.
pub fn sgd_step(
    params: &mut ParameterMap,
    grads: &Gradients,
    lr: f64,
    momentum: f64,
    state: &mut SgdState,
) -> Result<()> {
    for (name, grad) in grads.iter() {
        let tensor = params
            .get_mut(name)
            .ok_or_else(|| Error::protocol(format!("gradient for unknown parameter `{name}`")))?;
        if tensor.len() != grad.len() {
            return Err(Error::ShapeMismatch {
                name: name.to_string(),
                expected: tensor.shape().to_vec(),
                got: vec![grad.len()],
            });
        }
        let velocity = state
            .velocity
            .entry(name.to_string())
            .or_insert_with(|| vec![0.0; grad.len()]);
        let data = tensor.data_mut();
        for i in 0..grad.len() {
            velocity[i] = momentum * velocity[i] + grad[i];
            data[i] -= lr * velocity[i];
        }
    }
    Ok(())
}
