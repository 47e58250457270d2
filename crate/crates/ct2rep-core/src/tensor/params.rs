use std::collections::BTreeMap;

use super::{Result, TensorError};
use crate::rng::Rng;

/// Handle to a named parameter in a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub grad: Option<Vec<f64>>,
}

impl Param {
    pub fn numel(&self) -> usize {
        self.data.len()
    }
}

/// Named, ordered collection of trainable tensors. Insertion order is the
/// canonical order for checkpoint serialization and optimizer state.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    index: BTreeMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn total_values(&self) -> usize {
        self.params.iter().map(|p| p.numel()).sum()
    }

    pub fn add(&mut self, name: &str, shape: Vec<usize>, data: Vec<f64>) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(TensorError::DuplicateParam { name: name.into() });
        }
        assert_eq!(
            data.len(),
            shape.iter().product::<usize>(),
            "param {name}: data/shape mismatch"
        );
        let id = self.params.len();
        self.index.insert(name.to_string(), id);
        self.params.push(Param {
            name: name.to_string(),
            shape,
            data,
            grad: None,
        });
        Ok(ParamId(id))
    }

    /// Linear-map weight, uniform in (-1/sqrt(fan_in), +1/sqrt(fan_in)).
    /// Layout is `[fan_in, fan_out]` for `y = x @ W`.
    pub fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize, rng: &mut Rng) -> ParamId {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| rng.uniform(-bound, bound))
            .collect();
        self.add(name, vec![fan_in, fan_out], data)
            .expect("unique param name")
    }

    /// Bias vector, zero-initialized.
    pub fn zeros(&mut self, name: &str, shape: Vec<usize>) -> ParamId {
        let n = shape.iter().product();
        self.add(name, shape, vec![0.0; n]).expect("unique param name")
    }

    pub fn ones(&mut self, name: &str, shape: Vec<usize>) -> ParamId {
        let n = shape.iter().product();
        self.add(name, shape, vec![1.0; n]).expect("unique param name")
    }

    /// Embedding-style table, normal(0, 0.02).
    pub fn embedding(&mut self, name: &str, shape: Vec<usize>, rng: &mut Rng) -> ParamId {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.normal(0.0, 0.02)).collect();
        self.add(name, shape, data).expect("unique param name")
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn id_by_name(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Param)> {
        self.params
            .iter_mut()
            .enumerate()
            .map(|(i, p)| (ParamId(i), p))
    }

    pub(crate) fn accumulate_grad(&mut self, id: ParamId, delta: &[f64]) {
        let p = &mut self.params[id.0];
        let grad = p.grad.get_or_insert_with(|| vec![0.0; delta.len()]);
        for (g, d) in grad.iter_mut().zip(delta) {
            *g += d;
        }
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// Overwrite a parameter's values (used by tests to force reductions).
    pub fn set_data(&mut self, id: ParamId, data: Vec<f64>) {
        assert_eq!(self.params[id.0].data.len(), data.len());
        self.params[id.0].data = data;
    }
}
