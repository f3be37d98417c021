//! Ordered, named parameter collections.

use indexmap::IndexMap;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Insertion-ordered map from parameter name to tensor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Params<T> {
    map: IndexMap<String, Tensor<T>>,
}

/// Name and shape of one parameter, as stored in checkpoint descriptors.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
}

impl<T: Scalar> Default for Params<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Params<T> {
    pub fn new() -> Self {
        Self { map: IndexMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.map.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.map.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.map.get_mut(name)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.map.get_index_of(name)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(String::as_str)
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor<T>> {
        self.map.values()
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.map.values_mut()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn element_count(&self) -> usize {
        self.map.values().map(Tensor::len).sum()
    }

    pub fn map_indexed(&self, mut f: impl FnMut(usize, &Tensor<T>) -> Tensor<T>) -> Self {
        let map = self.map.iter().enumerate().map(|(i, (k, v))| (k.clone(), f(i, v))).collect();
        Self { map }
    }

    pub fn zeros_like(&self) -> Self {
        self.map_indexed(|_, t| Tensor::zeros(t.shape()))
    }

    pub fn cast<U: Scalar>(&self) -> Params<U> {
        Params { map: self.map.iter().map(|(k, v)| (k.clone(), v.cast())).collect() }
    }

    pub fn all_finite(&self) -> bool {
        self.map.values().all(Tensor::all_finite)
    }

    /// Adds `other` element-wise (shapes must agree).
    pub fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.map.values_mut().zip(other.map.values()) {
            a.add_assign(b);
        }
    }

    pub fn scale_assign(&mut self, k: T) {
        for t in self.map.values_mut() {
            t.scale_assign(k);
        }
    }

    /// Sub-collection of every parameter whose name starts with `prefix`.
    pub fn with_prefix(&self, prefix: &str) -> Self {
        let map = self
            .map
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        Self { map }
    }

    pub fn extend(&mut self, other: Params<T>) {
        self.map.extend(other.map);
    }

    pub fn specs(&self) -> Vec<ParamSpec> {
        self.map
            .iter()
            .map(|(k, v)| ParamSpec { name: k.clone(), shape: v.shape().to_vec() })
            .collect()
    }

    pub fn flatten(&self) -> Vec<T> {
        self.map.values().flat_map(|t| t.data().iter().copied()).collect()
    }

    pub fn from_flat(specs: &[ParamSpec], flat: &[T]) -> Result<Self> {
        let total: usize = specs.iter().map(|s| s.shape.iter().product::<usize>()).sum();
        if total != flat.len() {
            return Err(Error::Shape(format!(
                "descriptor needs {total} parameters, payload has {}",
                flat.len()
            )));
        }
        let mut map = IndexMap::new();
        let mut off = 0;
        for s in specs {
            let n: usize = s.shape.iter().product();
            map.insert(s.name.clone(), Tensor::from_vec(&s.shape, flat[off..off + n].to_vec())?);
            off += n;
        }
        Ok(Self { map })
    }
}

/// Gaussian init with standard deviation `gain / sqrt(fan_in)`.
pub fn scaled_normal<T: Scalar>(rng: &mut impl Rng, shape: &[usize], fan_in: usize, gain: f64) -> Tensor<T> {
    let std = gain / (fan_in.max(1) as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            T::c(z * std)
        })
        .collect();
    Tensor::from_vec(shape, data).expect("init shape")
}
