//! Parameters, AdamW, and the cosine learning-rate schedule.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{GradStore, NnError, Result, Tensor};

/// A named, trainable buffer with AdamW moment state.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<f64>,
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub step: u64,
}

impl Parameter {
    fn new(name: String, shape: Vec<usize>, value: Vec<f64>) -> Parameter {
        let n = value.len();
        Parameter { name, shape, value, first_moment: vec![0.0; n], second_moment: vec![0.0; n], step: 0 }
    }
}

/// Handle into a [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub usize);

/// Ordered collection of parameters; the order fixes optimizer and
/// checkpoint determinism.
#[derive(Debug, Default, Clone)]
pub struct ParamSet {
    params: Vec<Parameter>,
}

impl ParamSet {
    pub fn new() -> ParamSet {
        ParamSet::default()
    }

    pub fn add(&mut self, name: &str, shape: &[usize], value: Vec<f64>) -> ParamId {
        assert_eq!(shape.iter().product::<usize>(), value.len(), "parameter {name}: shape/value mismatch");
        assert!(
            !self.params.iter().any(|p| p.name == name),
            "duplicate parameter name {name}"
        );
        self.params.push(Parameter::new(name.to_string(), shape.to_vec(), value));
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn total_values(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Overwrite values by name (shape-checked); used by checkpoint
    /// restore. Unknown names in `values` are an error; parameters not
    /// mentioned keep their current values.
    pub fn load_values(&mut self, values: &[(String, Vec<usize>, Vec<f64>)]) -> Result<()> {
        for (name, shape, value) in values {
            let id = self
                .find(name)
                .ok_or_else(|| NnError::Optimizer(format!("unknown parameter {name}")))?;
            let p = &mut self.params[id.0];
            if &p.shape != shape {
                return Err(NnError::Optimizer(format!(
                    "parameter {name}: shape {:?} in file, {:?} in model",
                    shape, p.shape
                )));
            }
            p.value = value.clone();
        }
        Ok(())
    }

    /// Fresh leaf variables mirroring every parameter, for one forward
    /// pass.
    pub fn bind(&self) -> Result<Bindings> {
        let tensors = self
            .params
            .iter()
            .map(|p| Tensor::var(p.value.clone(), &p.shape))
            .collect::<Result<Vec<_>>>()?;
        Ok(Bindings { tensors })
    }
}

/// Leaf tensors for one forward pass, aligned with the [`ParamSet`].
pub struct Bindings {
    tensors: Vec<Tensor>,
}

impl Bindings {
    pub fn tensor(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 1e-2 }
    }
}

/// One AdamW step over every parameter.
///
/// Decoupled decay is applied first (`p *= 1 - lr*wd`), then the
/// bias-corrected moment update. Parameters the loss never reached get
/// zero gradients and are still decayed.
pub fn adamw_step(set: &mut ParamSet, bindings: &Bindings, grads: &GradStore, lr: f64, cfg: &AdamConfig) -> Result<()> {
    if bindings.len() != set.len() {
        return Err(NnError::Optimizer(format!(
            "bindings cover {} parameters, set has {}",
            bindings.len(),
            set.len()
        )));
    }
    for (i, p) in set.params.iter_mut().enumerate() {
        let g = grads.grad_or_zeros(&bindings.tensors[i]);
        if g.len() != p.value.len() {
            return Err(NnError::Optimizer(format!("gradient size mismatch for {}", p.name)));
        }
        p.step += 1;
        let bc1 = 1.0 - cfg.beta1.powi(p.step as i32);
        let bc2 = 1.0 - cfg.beta2.powi(p.step as i32);
        for ((v, m2), (m1, &gi)) in p
            .value
            .iter_mut()
            .zip(p.second_moment.iter_mut())
            .zip(p.first_moment.iter_mut().zip(g.iter()))
        {
            *v -= lr * cfg.weight_decay * *v;
            *m1 = cfg.beta1 * *m1 + (1.0 - cfg.beta1) * gi;
            *m2 = cfg.beta2 * *m2 + (1.0 - cfg.beta2) * gi * gi;
            let mhat = *m1 / bc1;
            let vhat = *m2 / bc2;
            *v -= lr * mhat / (vhat.sqrt() + cfg.eps);
            if !v.is_finite() {
                return Err(NnError::NonFinite { op: "adamw_step" });
            }
        }
    }
    Ok(())
}

/// Cosine annealing from `base_lr` at step 0 to `min_lr` at
/// `total_steps`.
pub fn cosine_lr(step: u64, total_steps: u64, base_lr: f64, min_lr: f64) -> Result<f64> {
    if step > total_steps || total_steps == 0 {
        return Err(NnError::Schedule { step, total: total_steps });
    }
    let phase = std::f64::consts::PI * step as f64 / total_steps as f64;
    Ok(min_lr + 0.5 * (base_lr - min_lr) * (1.0 + phase.cos()))
}

/// Kaiming-uniform fan-in initialization: U(-b, b) with b = sqrt(6/fan_in).
pub fn kaiming_uniform(count: usize, fan_in: usize, rng: &mut impl Rng) -> Vec<f64> {
    let bound = (6.0 / fan_in as f64).sqrt();
    (0..count).map(|_| rng.gen_range(-bound..bound)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::backward;

    fn run_step(set: &mut ParamSet, grad_value: f64, lr: f64, wd: f64) {
        // Build loss = grad_value * p summed, so dloss/dp = grad_value.
        let bindings = set.bind().unwrap();
        let t = bindings.tensor(ParamId(0));
        let c = Tensor::from_vec(vec![grad_value; t.numel()], t.shape()).unwrap();
        let loss = t.mul(&c).unwrap().reshape(&[t.numel()]).unwrap().sum_axis(0, false).unwrap();
        let grads = backward(&loss).unwrap();
        let cfg = AdamConfig { weight_decay: wd, ..AdamConfig::default() };
        adamw_step(set, &bindings, &grads, lr, &cfg).unwrap();
    }

    #[test]
    fn zero_grad_zero_decay_leaves_params_unchanged() {
        let mut set = ParamSet::new();
        set.add("w", &[2], vec![1.5, -0.5]);
        run_step(&mut set, 0.0, 0.1, 0.0);
        assert_eq!(set.get(ParamId(0)).value, vec![1.5, -0.5]);
    }

    #[test]
    fn hand_computed_first_step() {
        // w=1, grad=1, lr=0.1, wd=0: bias-corrected mhat=1, vhat=1,
        // so w -> 1 - 0.1/(1+1e-8) ~ 0.9.
        let mut set = ParamSet::new();
        set.add("w", &[1], vec![1.0]);
        run_step(&mut set, 1.0, 0.1, 0.0);
        let w = set.get(ParamId(0)).value[0];
        assert!((w - 0.9).abs() < 1e-7, "w = {w}");
    }

    #[test]
    fn decay_only_step() {
        let mut set = ParamSet::new();
        set.add("w", &[1], vec![2.0]);
        run_step(&mut set, 0.0, 0.1, 0.01);
        let w = set.get(ParamId(0)).value[0];
        assert!((w - 2.0 * (1.0 - 0.001)).abs() < 1e-12, "w = {w}");
    }

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(cosine_lr(0, 100, 0.002, 0.0).unwrap(), 0.002);
        assert!(cosine_lr(100, 100, 0.002, 0.0).unwrap().abs() < 1e-18);
        let mid = cosine_lr(50, 100, 0.002, 0.001).unwrap();
        assert!((mid - 0.0015).abs() < 1e-15);
        assert!(cosine_lr(101, 100, 0.002, 0.0).is_err());
    }

    #[test]
    fn optimizer_is_deterministic() {
        let mut a = ParamSet::new();
        a.add("w", &[3], vec![0.3, -0.2, 0.9]);
        let mut b = a.clone();
        for _ in 0..5 {
            run_step(&mut a, 0.7, 0.01, 0.01);
            run_step(&mut b, 0.7, 0.01, 0.01);
        }
        assert_eq!(a.get(ParamId(0)).value, b.get(ParamId(0)).value);
    }
}
