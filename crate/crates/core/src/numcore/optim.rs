use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

/// Momentum SGD with L2 weight decay folded into the velocity.
#[derive(Clone, Debug)]
pub struct OptimState<T = f32> {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Vec<T>>,
}

impl<T: Real> OptimState<T> {
    pub fn new(learning_rate: f64, momentum: f64, weight_decay: f64) -> Self {
        Self {
            learning_rate,
            momentum,
            weight_decay,
            velocity: Vec::new(),
        }
    }

    pub fn velocity(&self, index: usize) -> Option<&[T]> {
        self.velocity.get(index).map(Vec::as_slice)
    }
}

/// `v <- momentum * v + grad + weight_decay * p; p <- p - lr * v`, then clears
/// every gradient. Buffers are created on the first step.
pub fn sgd_step<T: Real>(params: &mut [&mut Tensor<T>], state: &mut OptimState<T>) -> Result<()> {
    if let Some(i) = params.iter().position(|p| p.grad().is_none()) {
        return Err(Error::State(format!("parameter {i} has no gradient")));
    }
    if state.velocity.is_empty() {
        state.velocity = params.iter().map(|p| vec![T::zero(); p.numel()]).collect();
    }
    if state.velocity.len() != params.len()
        || state.velocity.iter().zip(params.iter()).any(|(v, p)| v.len() != p.numel())
    {
        return Err(Error::State("momentum buffers do not match the parameter list".into()));
    }
    let lr = T::from_f64(state.learning_rate);
    let mu = T::from_f64(state.momentum);
    let wd = T::from_f64(state.weight_decay);
    for (p, v) in params.iter_mut().zip(state.velocity.iter_mut()) {
        let grad = p.take_grad().expect("checked above");
        for ((w, vel), g) in p.data_mut().iter_mut().zip(v.iter_mut()).zip(grad) {
            *vel = mu * *vel + g + wd * *w;
            *w = *w - lr * *vel;
        }
    }
    Ok(())
}
