//! SGD with momentum and an optional cosine-annealed learning rate.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum LrSchedule {
    Constant,
    /// Anneals from the base rate to exactly 0 at `total_steps`.
    Cosine { total_steps: usize },
}

#[derive(Clone, Debug)]
pub struct OptimizerState {
    velocity: Vec<Tensor>,
    momentum: f64,
    base_lr: f64,
    weight_decay: f64,
    schedule: LrSchedule,
}

impl OptimizerState {
    /// Fresh state with zero velocity for parameters of the given shapes.
    pub fn new(
        shapes: &[&[usize]],
        momentum: f64,
        base_lr: f64,
        schedule: LrSchedule,
    ) -> Result<Self> {
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::Config(format!("momentum {momentum} outside [0, 1)")));
        }
        if !(base_lr >= 0.0) || !base_lr.is_finite() {
            return Err(Error::Config(format!("learning rate {base_lr} must be >= 0")));
        }
        if let LrSchedule::Cosine { total_steps: 0 } = schedule {
            return Err(Error::Config("cosine schedule needs total_steps > 0".into()));
        }
        Ok(Self {
            velocity: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            momentum,
            base_lr,
            weight_decay: 0.0,
            schedule,
        })
    }

    pub fn with_weight_decay(mut self, weight_decay: f64) -> Self {
        self.weight_decay = weight_decay;
        self
    }

    pub fn velocity(&self) -> &[Tensor] {
        &self.velocity
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    /// Learning rate used for `step_index` (0-based).
    pub fn lr_at(&self, step_index: usize) -> f64 {
        match self.schedule {
            LrSchedule::Constant => self.base_lr,
            LrSchedule::Cosine { total_steps } => {
                let progress = step_index.min(total_steps) as f64 / total_steps as f64;
                0.5 * self.base_lr * (1.0 + (std::f64::consts::PI * progress).cos())
            }
        }
    }
}

/// One momentum step: `v <- momentum * v + g`, `p <- p - lr * v`.
/// With weight decay, `g` is replaced by `g + weight_decay * p`.
pub fn sgd_step(
    params: &mut [&mut Tensor],
    grads: &[Tensor],
    state: &mut OptimizerState,
    step_index: usize,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.velocity.len() {
        return shape_err(
            "sgd_step",
            format!(
                "{} params, {} grads, {} velocity buffers",
                params.len(),
                grads.len(),
                state.velocity.len()
            ),
        );
    }
    for (i, ((p, g), v)) in params.iter().zip(grads).zip(&state.velocity).enumerate() {
        if p.shape() != g.shape() || p.shape() != v.shape() {
            return shape_err(
                "sgd_step",
                format!(
                    "parameter {i}: param {:?}, grad {:?}, velocity {:?}",
                    p.shape(),
                    g.shape(),
                    v.shape()
                ),
            );
        }
    }
    let lr = state.lr_at(step_index);
    let (mu, wd) = (state.momentum, state.weight_decay);
    for ((p, g), v) in params.iter_mut().zip(grads).zip(state.velocity.iter_mut()) {
        for ((pv, &gv), vv) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(v.data_mut().iter_mut())
        {
            let grad = if wd == 0.0 { gv } else { gv + wd * *pv };
            *vv = mu * *vv + grad;
            *pv -= lr * *vv;
        }
    }
    Ok(())
}
