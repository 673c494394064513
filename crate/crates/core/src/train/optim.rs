use crate::numcore::{ParamStore, Scalar, Tensor};

use super::TrainError;

pub const DEFAULT_LR_START: f64 = 1e-4;
pub const DEFAULT_LR_END: f64 = 1e-5;

/// Cosine decay from `start` at step 0 to `end` at `total`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CosineSchedule {
    pub start: f64,
    pub end: f64,
    pub total: usize,
}

impl CosineSchedule {
    pub fn new(total: usize) -> Self {
        CosineSchedule { start: DEFAULT_LR_START, end: DEFAULT_LR_END, total }
    }

    pub fn lr(&self, step: usize) -> Result<f64, TrainError> {
        if step > self.total {
            return Err(TrainError::StepOutOfRange { step, total: self.total });
        }
        if self.total == 0 {
            return Ok(self.start);
        }
        let phase = std::f64::consts::PI * step as f64 / self.total as f64;
        Ok(self.end + 0.5 * (self.start - self.end) * (1.0 + phase.cos()))
    }
}

/// Learning rate of the default schedule.
pub fn cosine_lr(step: usize, total_steps: usize) -> Result<f64, TrainError> {
    CosineSchedule::new(total_steps).lr(step)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Moment estimates for every parameter of a store, in store order.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub step: u64,
    pub adam: AdamConfig,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(store: &ParamStore<T>, adam: AdamConfig) -> Self {
        let zeros = || store.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect();
        OptimizerState { m: zeros(), v: zeros(), step: 0, adam }
    }
}

/// What [`adam_step`] did.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepOutcome {
    Applied,
    /// A gradient entry was not finite; nothing changed.
    Skipped,
}

/// One bias-corrected Adam update from the `grad` fields of `store`.
/// Parameters for which `frozen` returns true keep their values (their
/// moments are left untouched).
pub fn adam_step<T: Scalar>(
    store: &mut ParamStore<T>,
    state: &mut OptimizerState<T>,
    lr: f64,
    frozen: impl Fn(&str) -> bool,
) -> Result<StepOutcome, TrainError> {
    if state.m.len() != store.len() {
        return Err(TrainError::StateMismatch { state: state.m.len(), params: store.len() });
    }
    if store.iter().any(|(_, p)| !p.grad.is_finite()) {
        log::warn!("non-finite gradient at optimizer step {}; update skipped", state.step + 1);
        return Ok(StepOutcome::Skipped);
    }
    state.step += 1;
    let AdamConfig { beta1, beta2, eps } = state.adam;
    let c1 = 1.0 - beta1.powi(state.step as i32);
    let c2 = 1.0 - beta2.powi(state.step as i32);
    let (b1, b2) = (T::lit(beta1), T::lit(beta2));
    let (one_b1, one_b2) = (T::lit(1.0 - beta1), T::lit(1.0 - beta2));
    let (step_size, c2_sqrt, eps) = (T::lit(lr / c1), T::lit(c2.sqrt()), T::lit(eps));
    for (i, p) in store.iter_mut().enumerate() {
        if p.value.shape() != state.m[i].shape() {
            return Err(TrainError::StateMismatch { state: state.m[i].numel(), params: p.value.numel() });
        }
        if frozen(&p.name) {
            continue;
        }
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        let (theta, grad) = (p.value.data_mut(), p.grad.data());
        for j in 0..theta.len() {
            let g = grad[j];
            m[j] = b1 * m[j] + one_b1 * g;
            v[j] = b2 * v[j] + one_b2 * g * g;
            // m̂/(√v̂ + ε) with the bias corrections folded into the step size
            theta[j] = theta[j] - step_size * m[j] / (v[j].sqrt() / c2_sqrt + eps);
        }
    }
    Ok(StepOutcome::Applied)
}
