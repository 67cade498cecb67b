use std::collections::BTreeMap;

use super::tensor::Tensor;
use super::EngineError;

/// A named tensor together with its Adam moment estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub value: Tensor,
    pub first_moment: Tensor,
    pub second_moment: Tensor,
    /// Non-trainable entries (running statistics) are stored alongside but
    /// never receive gradients.
    pub trainable: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParameterStore {
    params: BTreeMap<String, Parameter>,
    step: u64,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) {
        let shape = value.shape().to_vec();
        self.params.insert(
            name.into(),
            Parameter { value, first_moment: Tensor::zeros(&shape), second_moment: Tensor::zeros(&shape), trainable },
        );
    }

    pub fn get(&self, name: &str) -> Option<&Parameter> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Parameter> {
        self.params.get_mut(name)
    }

    pub fn value(&self, name: &str) -> Result<&Tensor, EngineError> {
        self.get(name).map(|p| &p.value).ok_or_else(|| EngineError::UnknownParameter(name.to_string()))
    }

    pub fn set_value(&mut self, name: &str, value: Tensor) -> Result<(), EngineError> {
        let p = self.params.get_mut(name).ok_or_else(|| EngineError::UnknownParameter(name.to_string()))?;
        if p.value.shape() != value.shape() {
            return Err(EngineError::ShapeMismatch {
                op: "set_value",
                detail: format!("{name}: {:?} vs {:?}", p.value.shape(), value.shape()),
            });
        }
        p.value = value;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Parameter)> {
        self.params.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn set_step(&mut self, step: u64) {
        self.step = step;
    }

    pub(crate) fn insert_raw(&mut self, name: String, param: Parameter) {
        self.params.insert(name, param);
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.params.values().filter(|p| p.trainable).map(|p| p.value.len()).sum()
    }

    /// One bias-corrected Adam update. Parameters without an entry in
    /// `grads` are left untouched, but the step counter advances once.
    pub fn adam_step(&mut self, grads: &BTreeMap<String, Tensor>, cfg: &AdamConfig) -> Result<(), EngineError> {
        for (name, g) in grads {
            let p = self.params.get(name).ok_or_else(|| EngineError::UnknownParameter(name.clone()))?;
            if p.value.shape() != g.shape() {
                return Err(EngineError::ShapeMismatch {
                    op: "adam_step",
                    detail: format!("{name}: parameter {:?} gradient {:?}", p.value.shape(), g.shape()),
                });
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - cfg.beta1.powi(t);
        let c2 = 1.0 - cfg.beta2.powi(t);
        for (name, g) in grads {
            let p = self.params.get_mut(name).expect("checked above");
            if !p.trainable {
                continue;
            }
            let m = p.first_moment.data_mut();
            let v = p.second_moment.data_mut();
            let x = p.value.data_mut();
            for (((xi, mi), vi), &gi) in x.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g.data()) {
                *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
                *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
                let mhat = *mi / c1;
                let vhat = *vi / c2;
                *xi -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
            }
        }
        Ok(())
    }
}
