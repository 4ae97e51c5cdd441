use std::collections::HashMap;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Named, ordered parameter matrices. Vectors are stored as `1 x n`.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<S> {
    names: Vec<String>,
    values: Vec<Array2<S>>,
    index: HashMap<String, usize>,
}

impl<S> Default for ParamStore<S> {
    fn default() -> Self {
        ParamStore {
            names: Vec::new(),
            values: Vec::new(),
            index: HashMap::new(),
        }
    }
}

impl<S: Real> ParamStore<S> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Array2<S>) -> ParamId {
        let name = name.into();
        if let Some(&i) = self.index.get(&name) {
            self.values[i] = value;
            return ParamId(i);
        }
        let id = self.values.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Array2<S> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array2<S> {
        &mut self.values[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Array2<S>)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    pub fn values(&self) -> &[Array2<S>] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Array2<S>] {
        &mut self.values
    }

    pub fn num_elements(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    /// Same names and shapes, all zeros.
    pub fn zeros_like(&self) -> Self {
        let mut out = self.clone();
        out.values.iter_mut().for_each(|v| v.fill(S::zero()));
        out
    }

    pub fn cast<T: Real>(&self) -> ParamStore<T> {
        ParamStore {
            names: self.names.clone(),
            values: self
                .values
                .iter()
                .map(|v| v.mapv(|x| T::of(x.as_f64())))
                .collect(),
            index: self.index.clone(),
        }
    }

    /// Checks that `other` has the same names and shapes in the same order.
    pub fn check_compatible<T>(&self, other: &ParamStore<T>) -> Result<()> {
        if self.names != other.names {
            return Err(Error::invalid("parameter names differ"));
        }
        for (i, (a, b)) in self.values.iter().zip(&other.values).enumerate() {
            if a.dim() != b.dim() {
                return Err(Error::invalid(format!(
                    "parameter {} has shape {:?} vs {:?}",
                    self.names[i],
                    a.dim(),
                    b.dim()
                )));
            }
        }
        Ok(())
    }
}

/// Gradients aligned with a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGrads<S> {
    pub values: Vec<Array2<S>>,
}

impl<S: Real> ParamGrads<S> {
    pub fn zeros_for(params: &ParamStore<S>) -> Self {
        ParamGrads {
            values: params
                .values()
                .iter()
                .map(|v| Array2::zeros(v.raw_dim()))
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &ParamGrads<S>) {
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: S) {
        for v in &mut self.values {
            v.mapv_inplace(|x| x * s);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.iter().all(|x| x.is_finite()))
    }

    pub fn max_abs_diff(&self, other: &ParamGrads<S>) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .flat_map(|(a, b)| a.iter().zip(b.iter()).map(|(x, y)| (*x - *y).abs().as_f64()))
            .fold(0.0, f64::max)
    }
}
