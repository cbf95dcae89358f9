use std::fmt;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major matrix of `f64`. Vectors are stored as `1 × n`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: [usize; 2],
    values: Vec<f64>,
}

impl Tensor {
    pub fn new(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != rows * cols {
            return Err(Error::shape(
                "tensor",
                format!("{} values for shape {rows}x{cols}", values.len()),
            ));
        }
        Ok(Self {
            shape: [rows, cols],
            values,
        })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            shape: [rows, cols],
            values: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            shape: [rows, cols],
            values: vec![value; rows * cols],
        }
    }

    pub fn row(values: Vec<f64>) -> Self {
        Self {
            shape: [1, values.len()],
            values,
        }
    }

    /// Uniform samples in `[-bound, bound)`.
    pub fn uniform<R: Rng + ?Sized>(rows: usize, cols: usize, bound: f64, rng: &mut R) -> Self {
        let values = (0..rows * cols)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        Self {
            shape: [rows, cols],
            values,
        }
    }

    /// Glorot-uniform initialization for a `fan_in × fan_out` weight.
    pub fn glorot<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        Self::uniform(fan_in, fan_out, bound, rng)
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        self.shape[1]
    }

    pub fn shape(&self) -> [usize; 2] {
        self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn row_slice(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.values[r * c..(r + 1) * c]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.cols() + c]
    }
}

/// Transformation applied to a parameter's gradient between backward and
/// the optimizer step.
#[derive(Clone)]
pub enum GradHook {
    /// Multiplies every entry in output column `j` by `factors[j]`. For a
    /// `fan_in × fan_out` weight this scales all incoming weights of unit `j`.
    ScaleUnits(Vec<f64>),
    Custom(Arc<dyn Fn(&mut Tensor) + Send + Sync>),
}

impl GradHook {
    pub fn apply(&self, grad: &mut Tensor) {
        match self {
            GradHook::ScaleUnits(factors) => {
                let cols = grad.cols();
                debug_assert_eq!(cols, factors.len());
                for row in grad.values_mut().chunks_mut(cols) {
                    for (g, f) in row.iter_mut().zip(factors) {
                        *g *= f;
                    }
                }
            }
            GradHook::Custom(f) => {
                let shape = grad.shape();
                f(grad);
                assert_eq!(shape, grad.shape(), "grad hook changed gradient shape");
            }
        }
    }
}

impl fmt::Debug for GradHook {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GradHook::ScaleUnits(v) => f.debug_tuple("ScaleUnits").field(&v.len()).finish(),
            GradHook::Custom(_) => f.write_str("Custom(..)"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Parameter {
    pub tensor: Tensor,
    pub grad: Option<Tensor>,
    pub hook: Option<GradHook>,
}

/// Arena owning every trainable tensor of a model. Components refer to their
/// parameters through [`ParamId`]s, so a single graph can read parameters of
/// the knowledge base, attention blocks and heads at once.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
}

/// Stores compare by parameter values only; gradients and hooks are
/// transient.
impl PartialEq for ParamStore {
    fn eq(&self, other: &Self) -> bool {
        self.tensors().eq(other.tensors())
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, tensor: Tensor) -> ParamId {
        self.params.push(Parameter {
            tensor,
            grad: None,
            hook: None,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].tensor
    }

    pub fn param(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn set_hook(&mut self, id: ParamId, hook: Option<GradHook>) {
        self.params[id.0].hook = hook;
    }

    pub fn clear_hooks(&mut self) {
        for p in &mut self.params {
            p.hook = None;
        }
    }

    pub fn grad(&self, id: ParamId) -> Option<&Tensor> {
        self.params[id.0].grad.as_ref()
    }

    /// Adds `grads` into the stored gradients, then runs each touched
    /// parameter's hook.
    pub fn load_gradients(&mut self, grads: super::Gradients) {
        for (id, g) in grads.into_iter() {
            let p = &mut self.params[id.0];
            let mut g = Tensor::new(p.tensor.rows(), p.tensor.cols(), g)
                .expect("gradient shape matches parameter");
            if let Some(prev) = p.grad.take() {
                for (a, b) in g.values_mut().iter_mut().zip(prev.values()) {
                    *a += b;
                }
            }
            if let Some(hook) = &p.hook {
                hook.apply(&mut g);
            }
            p.grad = Some(g);
        }
    }

    /// `value ← value − lr · grad` for every listed parameter, then clears
    /// all gradients.
    pub fn sgd_step(&mut self, ids: &[ParamId], lr: f64) -> Result<()> {
        if let Some(missing) = ids.iter().find(|id| self.params[id.0].grad.is_none()) {
            return Err(Error::State(format!(
                "parameter {} has no gradient",
                missing.0
            )));
        }
        for id in ids {
            let p = &mut self.params[id.0];
            let grad = p.grad.as_ref().expect("checked above");
            for (v, g) in p.tensor.values_mut().iter_mut().zip(grad.values()) {
                *v -= lr * g;
            }
        }
        self.zero_grad();
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    pub fn snapshot(&self, ids: &[ParamId]) -> Vec<Tensor> {
        ids.iter().map(|id| self.get(*id).clone()).collect()
    }

    pub fn restore(&mut self, ids: &[ParamId], snapshot: &[Tensor]) {
        for (id, t) in ids.iter().zip(snapshot) {
            self.params[id.0].tensor = t.clone();
        }
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.params.iter().map(|p| &p.tensor)
    }

    pub fn from_tensors(tensors: Vec<Tensor>) -> Self {
        Self {
            params: tensors
                .into_iter()
                .map(|tensor| Parameter {
                    tensor,
                    grad: None,
                    hook: None,
                })
                .collect(),
        }
    }
}

impl Serialize for ParamStore {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_seq(self.tensors())
    }
}

impl<'de> Deserialize<'de> for ParamStore {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        Vec::<Tensor>::deserialize(d).map(Self::from_tensors)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with_grad(value: f64, grad: f64) -> (ParamStore, ParamId) {
        let mut store = ParamStore::new();
        let id = store.add(Tensor::row(vec![value]));
        store.params[id.0].grad = Some(Tensor::row(vec![grad]));
        (store, id)
    }

    #[test]
    fn sgd_zero_grad_leaves_value() {
        let (mut store, id) = store_with_grad(1.25, 0.0);
        store.sgd_step(&[id], 0.05).unwrap();
        assert_eq!(store.get(id).values(), &[1.25]);
    }

    #[test]
    fn sgd_update_rule() {
        let (mut store, id) = store_with_grad(1.0, 2.0);
        store.sgd_step(&[id], 0.05).unwrap();
        assert!((store.get(id).values()[0] - 0.9).abs() < 1e-15);
        assert!(store.grad(id).is_none());
    }

    #[test]
    fn sgd_missing_grad_is_state_error() {
        let mut store = ParamStore::new();
        let id = store.add(Tensor::row(vec![1.0]));
        assert!(matches!(store.sgd_step(&[id], 0.1), Err(Error::State(_))));
    }

    #[test]
    fn zeroing_hook_freezes_entries() {
        let mut store = ParamStore::new();
        let id = store.add(Tensor::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        store.set_hook(id, Some(GradHook::ScaleUnits(vec![0.0, 1.0])));
        let mut grads = crate::autodiff::Gradients::default();
        grads.insert(id, vec![1.0; 4]);
        store.load_gradients(grads);
        store.sgd_step(&[id], 0.5).unwrap();
        assert_eq!(store.get(id).values(), &[1.0, 1.5, 3.0, 3.5]);
    }

    #[test]
    fn tensor_rejects_bad_length() {
        assert!(matches!(Tensor::new(2, 3, vec![0.0; 5]), Err(Error::Shape { .. })));
    }
}
