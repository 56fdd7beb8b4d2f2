//! Named parameter storage and the Adam optimizer.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::tensor::NumericsError;

/// One learnable tensor. Storage is shared with forward-graph leaves; the
/// optimizer copies-on-write when a graph still holds the old values.
#[derive(Debug, Clone)]
pub struct Param {
    pub shape: Vec<usize>,
    pub data: Arc<Vec<f64>>,
}

impl Param {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Named map from tensor path (e.g. `layer.3.ff.wi_0`) to its values.
/// Iteration order is the sorted path order used everywhere (checkpoints,
/// gradient application), so results never depend on insertion order.
#[derive(Debug, Clone, Default)]
pub struct ParameterSet {
    params: BTreeMap<String, Param>,
    pub rng_seed: u64,
}

impl ParameterSet {
    pub fn new(rng_seed: u64) -> Self {
        ParameterSet {
            params: BTreeMap::new(),
            rng_seed,
        }
    }

    pub fn insert(&mut self, path: &str, shape: Vec<usize>, data: Vec<f64>) {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.params.insert(
            path.to_string(),
            Param {
                shape,
                data: Arc::new(data),
            },
        );
    }

    pub fn get(&self, path: &str) -> Option<&Param> {
        self.params.get(path)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param)> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar elements across all parameters.
    pub fn element_count(&self) -> u64 {
        self.params.values().map(|p| p.numel() as u64).sum()
    }
}

/// Gradients keyed by parameter path, in the same order as the set.
pub type NamedGradients = BTreeMap<String, Vec<f64>>;

/// Learning-rate schedule descriptor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrSchedule {
    Constant {
        lr: f64,
    },
    /// Linear warmup to `peak_lr` over `warmup_steps`, then decay
    /// proportional to `1/sqrt(step)`.
    InverseSqrt {
        peak_lr: f64,
        warmup_steps: u64,
    },
}

impl LrSchedule {
    /// Learning rate for 1-based step `step`.
    pub fn lr_at(&self, step: u64) -> f64 {
        match *self {
            LrSchedule::Constant { lr } => lr,
            LrSchedule::InverseSqrt {
                peak_lr,
                warmup_steps,
            } => {
                let step = step.max(1) as f64;
                let warmup = warmup_steps.max(1) as f64;
                peak_lr * (step / warmup).min((warmup / step).sqrt())
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Per-parameter Adam moments plus the step counter and schedule.
pub struct OptimizerState {
    moments: BTreeMap<String, Moments>,
    pub step: u64,
    pub schedule: LrSchedule,
    pub config: AdamConfig,
}

impl OptimizerState {
    pub fn new(schedule: LrSchedule, config: AdamConfig) -> Self {
        OptimizerState {
            moments: BTreeMap::new(),
            step: 0,
            schedule,
            config,
        }
    }

    /// Learning rate the next `optimizer_step` call will apply.
    pub fn next_lr(&self) -> f64 {
        self.schedule.lr_at(self.step + 1)
    }
}

/// One Adam update with bias correction. Every parameter must have a
/// gradient; the update visits parameters in sorted path order.
pub fn optimizer_step(
    params: &mut ParameterSet,
    state: &mut OptimizerState,
    grads: &NamedGradients,
    lr: f64,
) -> Result<(), NumericsError> {
    for (path, param) in params.params.iter() {
        let grad = grads.get(path).ok_or_else(|| NumericsError::Invalid {
            op: "optimizer_step",
            msg: format!("missing gradient for parameter {path}"),
        })?;
        if grad.len() != param.numel() {
            return Err(NumericsError::BadData {
                op: "optimizer_step",
                shape: param.shape.clone(),
                expected: param.numel(),
                got: grad.len(),
            });
        }
    }

    state.step += 1;
    let t = state.step;
    let AdamConfig { beta1, beta2, eps } = state.config;
    let bc1 = 1.0 - beta1.powi(t as i32);
    let bc2 = 1.0 - beta2.powi(t as i32);

    for (path, param) in params.params.iter_mut() {
        let grad = &grads[path];
        let moments = state.moments.entry(path.clone()).or_insert_with(|| Moments {
            m: vec![0.0; grad.len()],
            v: vec![0.0; grad.len()],
        });
        let data = Arc::make_mut(&mut param.data);
        for i in 0..grad.len() {
            let g = grad[i];
            moments.m[i] = beta1 * moments.m[i] + (1.0 - beta1) * g;
            moments.v[i] = beta2 * moments.v[i] + (1.0 - beta2) * g * g;
            let m_hat = moments.m[i] / bc1;
            let v_hat = moments.v[i] / bc2;
            data[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_param_set(value: f64) -> ParameterSet {
        let mut p = ParameterSet::new(0);
        p.insert("w", vec![1], vec![value]);
        p
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut params = single_param_set(1.25);
        let mut state = OptimizerState::new(LrSchedule::Constant { lr: 0.1 }, AdamConfig::default());
        let mut grads = NamedGradients::new();
        grads.insert("w".into(), vec![0.0]);
        for _ in 0..10 {
            optimizer_step(&mut params, &mut state, &grads, 0.1).unwrap();
        }
        assert_eq!(params.get("w").unwrap().data[0], 1.25);
    }

    #[test]
    fn constant_gradient_update_magnitude_approaches_lr() {
        let mut params = single_param_set(0.0);
        let mut state = OptimizerState::new(LrSchedule::Constant { lr: 0.1 }, AdamConfig::default());
        let mut grads = NamedGradients::new();
        grads.insert("w".into(), vec![0.5]);
        let mut prev = params.get("w").unwrap().data[0];
        let mut last_update = 0.0;
        for _ in 0..2000 {
            optimizer_step(&mut params, &mut state, &grads, 0.1).unwrap();
            let cur = params.get("w").unwrap().data[0];
            last_update = (cur - prev).abs();
            prev = cur;
        }
        assert!(
            (last_update - 0.1).abs() < 1e-3,
            "update magnitude {last_update} should approach lr"
        );
    }

    #[test]
    fn missing_gradient_rejected() {
        let mut params = single_param_set(1.0);
        let mut state = OptimizerState::new(LrSchedule::Constant { lr: 0.1 }, AdamConfig::default());
        let grads = NamedGradients::new();
        assert!(optimizer_step(&mut params, &mut state, &grads, 0.1).is_err());
    }

    #[test]
    fn inverse_sqrt_schedule_shape() {
        let s = LrSchedule::InverseSqrt {
            peak_lr: 1e-2,
            warmup_steps: 100,
        };
        assert!((s.lr_at(50) - 5e-3).abs() < 1e-12);
        assert!((s.lr_at(100) - 1e-2).abs() < 1e-12);
        assert!((s.lr_at(400) - 5e-3).abs() < 1e-12);
        assert!(s.lr_at(1) > 0.0);
    }
}
