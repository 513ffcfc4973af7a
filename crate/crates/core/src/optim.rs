use crate::error::{Error, Result};
use crate::model::{GradientSet, ModelParams, Tensors};

/// `base_lr * (1 - step / total_steps)^power`.
pub fn poly_lr(base_lr: f64, step: u64, total_steps: u64, power: f64) -> f64 {
    if total_steps == 0 {
        return base_lr;
    }
    let frac = (step.min(total_steps) as f64) / total_steps as f64;
    base_lr * (1.0 - frac).powf(power)
}

/// Plain SGD: `theta -= lr * g`.
pub fn sgd_step(params: &mut ModelParams, grads: &GradientSet, lr: f64, step: u64) -> Result<()> {
    if !(lr > 0.0) {
        return Err(Error::Precondition(format!("learning rate {lr} must be positive")));
    }
    if !grads.is_finite() {
        return Err(Error::NonFiniteGradient { step });
    }
    params.apply_update(grads, [-lr; 4]);
    Ok(())
}

/// SGD with a larger classifier-layer rate and optional heavy-ball momentum.
#[derive(Clone, Debug, PartialEq)]
pub struct Sgd {
    pub head_lr_scale: f64,
    pub momentum: f64,
    pub velocity: Option<Tensors>,
}

impl Sgd {
    pub fn new(head_lr_scale: f64, momentum: f64) -> Self {
        Self {
            head_lr_scale,
            momentum,
            velocity: None,
        }
    }

    pub fn step(&mut self, params: &mut ModelParams, grads: &GradientSet, lr: f64, step: u64) -> Result<()> {
        if !grads.is_finite() {
            return Err(Error::NonFiniteGradient { step });
        }
        let head = lr * self.head_lr_scale;
        let scales = [-lr, -lr, -head, -head];
        if self.momentum == 0.0 {
            params.apply_update(grads, scales);
            return Ok(());
        }
        let v = self.velocity.get_or_insert_with(|| Tensors::zeros(params.arch()));
        v.scale(self.momentum);
        v.add_assign(grads);
        params.apply_update(v, scales);
        Ok(())
    }
}
