//! Named parameter storage and the AdamW optimizer.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Index of a parameter inside a [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Ordered, named collection of learnable tensors. Registration order is
/// the canonical order for checkpoints and gradient reduction, so it must
/// be deterministic.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    names: Vec<String>,
    values: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name}"
        );
        self.index.insert(name.clone(), self.values.len());
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(|s| s.as_str()).zip(self.values.iter())
    }

    /// Replace a value wholesale (checkpoint load); shapes must agree.
    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        if self.values[id.0].shape() != value.shape() {
            return Err(Error::Shape {
                op: "param_set",
                lhs: self.values[id.0].shape().to_vec(),
                rhs: value.shape().to_vec(),
            });
        }
        self.values[id.0] = value;
        Ok(())
    }
}

/// Per-step gradient accumulator aligned with a [`ParamSet`].
#[derive(Debug, Clone)]
pub struct GradStore {
    grads: Vec<Option<Tensor>>,
}

impl GradStore {
    pub fn for_params(params: &ParamSet) -> Self {
        GradStore {
            grads: vec![None; params.len()],
        }
    }

    pub fn accumulate(&mut self, id: ParamId, g: Tensor) {
        match &mut self.grads[id.0] {
            Some(acc) => acc.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    pub fn scale(&mut self, c: f64) {
        for g in self.grads.iter_mut().flatten() {
            g.scale_assign(c);
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads[id.0].as_ref()
    }

    /// Merge another accumulator (ordered reduction across workers).
    pub fn merge(&mut self, other: GradStore) {
        for (slot, g) in self.grads.iter_mut().zip(other.grads) {
            if let Some(g) = g {
                match slot {
                    Some(acc) => acc.add_assign(&g),
                    none => *none = Some(g),
                }
            }
        }
    }

    pub fn clear(&mut self) {
        for g in &mut self.grads {
            *g = None;
        }
    }
}

/// One optimizer group: a learning rate, decay setting and member params.
#[derive(Debug, Clone)]
pub struct AdamGroup {
    pub lr: f64,
    pub weight_decay: f64,
    pub params: Vec<ParamId>,
}

/// AdamW with decoupled weight decay over independent parameter groups.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    groups: Vec<AdamGroup>,
    m: HashMap<usize, Tensor>,
    v: HashMap<usize, Tensor>,
    step_count: u64,
}

impl AdamW {
    pub fn new(groups: Vec<AdamGroup>) -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            groups,
            m: HashMap::new(),
            v: HashMap::new(),
            step_count: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// Apply one update from the accumulated gradients, then clear them.
    pub fn step(&mut self, params: &mut ParamSet, grads: &mut GradStore) -> Result<()> {
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for group in &self.groups {
            for &pid in &group.params {
                let g = grads.get(pid).ok_or_else(|| {
                    Error::InvalidArgument(format!(
                        "missing gradient for parameter {}",
                        params.name(pid)
                    ))
                })?;
                let g = g.clone();
                let p = params.get_mut(pid);
                let m = self
                    .m
                    .entry(pid.0)
                    .or_insert_with(|| Tensor::zeros(p.shape()));
                let v = self
                    .v
                    .entry(pid.0)
                    .or_insert_with(|| Tensor::zeros(p.shape()));
                for k in 0..p.numel() {
                    let gk = g.data()[k];
                    let mk = self.beta1 * m.data()[k] + (1.0 - self.beta1) * gk;
                    let vk = self.beta2 * v.data()[k] + (1.0 - self.beta2) * gk * gk;
                    m.data_mut()[k] = mk;
                    v.data_mut()[k] = vk;
                    let mhat = mk / bc1;
                    let vhat = vk / bc2;
                    let decayed = p.data()[k] * (1.0 - group.lr * group.weight_decay);
                    p.data_mut()[k] = decayed - group.lr * mhat / (vhat.sqrt() + self.eps);
                }
            }
        }
        grads.clear();
        Ok(())
    }
}
