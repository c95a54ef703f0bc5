use afa_tensor::{AdamState, Gradients, Tape, Tensor, Var};

use crate::error::{CoreError, Result};

/// An ordered, named set of trainable tensors.
///
/// The order of [`Parameters::named`] is the binding order used by
/// [`Parameters::bind`], by optimizers and by checkpoints.
pub trait Parameters {
    fn named(&self) -> Vec<(String, &Tensor)>;

    fn tensors_mut(&mut self) -> Vec<&mut Tensor>;

    /// Registers every tensor as a trainable leaf on `tape`.
    fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        self.named()
            .into_iter()
            .map(|(_, t)| tape.param(t.clone()))
            .collect()
    }

    /// Scalar parameter count.
    fn census(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }

    /// Overwrites tensors by name, e.g. from a checkpoint.
    fn load_named(&mut self, lookup: &dyn Fn(&str) -> Option<Tensor>) -> Result<()> {
        let names: Vec<(String, Vec<usize>)> = self
            .named()
            .into_iter()
            .map(|(n, t)| (n, t.shape().to_vec()))
            .collect();
        for ((name, shape), slot) in names.into_iter().zip(self.tensors_mut()) {
            let t = lookup(&name)
                .ok_or_else(|| CoreError::config(format!("missing parameter {name}")))?;
            if t.shape() != shape.as_slice() {
                return Err(CoreError::config(format!(
                    "parameter {name}: expected shape {shape:?}, found {:?}",
                    t.shape()
                )));
            }
            *slot = t;
        }
        Ok(())
    }
}

pub fn gradients_for(grads: &Gradients, vars: &[Var]) -> Vec<Tensor> {
    vars.iter().map(|v| grads.wrt(*v).clone()).collect()
}

/// One Adam step on every tensor of `params`.
pub fn adam_step(params: &mut dyn Parameters, state: &mut AdamState, grads: &[Tensor]) -> Result<()> {
    let refs: Vec<&Tensor> = grads.iter().collect();
    let mut tensors = params.tensors_mut();
    state.update(&mut tensors, &refs)?;
    Ok(())
}

pub fn new_adam(params: &dyn Parameters, config: afa_tensor::AdamConfig) -> AdamState {
    AdamState::new(config, params.named().into_iter().map(|(_, t)| t))
}
