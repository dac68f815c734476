use serde::Serialize;

use super::scalar::Scalar;
use super::LearnError;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self, LearnError> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(LearnError::ShapeMismatch {
                expected: shape,
                got: vec![data.len()],
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![T::zero(); n],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Row `i` along the leading dimension.
    pub fn row(&self, i: usize) -> &[T] {
        let stride: usize = self.shape[1..].iter().product();
        &self.data[i * stride..(i + 1) * stride]
    }
}

/// Name and shape of one parameter tensor.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
}

impl ParamSpec {
    pub fn new(name: impl Into<String>, shape: &[usize]) -> Self {
        Self {
            name: name.into(),
            shape: shape.to_vec(),
        }
    }

    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// All parameters of a model in one flat buffer, in spec order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    specs: Vec<ParamSpec>,
    offsets: Vec<usize>,
    pub data: Vec<T>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn zeros(specs: Vec<ParamSpec>) -> Self {
        let mut offsets = Vec::with_capacity(specs.len() + 1);
        let mut total = 0;
        for s in &specs {
            offsets.push(total);
            total += s.len();
        }
        offsets.push(total);
        Self {
            specs,
            offsets,
            data: vec![T::zero(); total],
        }
    }

    pub fn with_data(specs: Vec<ParamSpec>, data: Vec<T>) -> Result<Self, LearnError> {
        let mut store = Self::zeros(specs);
        if data.len() != store.data.len() {
            return Err(LearnError::ShapeMismatch {
                expected: vec![store.data.len()],
                got: vec![data.len()],
            });
        }
        store.data = data;
        Ok(store)
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn count(&self) -> usize {
        self.data.len()
    }

    pub fn range(&self, i: usize) -> std::ops::Range<usize> {
        self.offsets[i]..self.offsets[i + 1]
    }

    pub fn get(&self, i: usize) -> &[T] {
        &self.data[self.range(i)]
    }

    pub fn get_mut(&mut self, i: usize) -> &mut [T] {
        let r = self.range(i);
        &mut self.data[r]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.specs.iter().position(|s| s.name == name)
    }

    /// He-normal weights (`std = sqrt(2 / fan_in)`), zero biases. A spec is
    /// a bias when its name ends in `.b`; fan-in is the product of all but
    /// the leading dimension.
    pub fn he_init(&mut self, rng: &mut crate::rng::SeededRng) {
        for i in 0..self.specs.len() {
            if self.specs[i].name.ends_with(".b") {
                continue;
            }
            let fan_in: usize = self.specs[i].shape[1..].iter().product();
            let std = (2.0 / fan_in as f64).sqrt();
            for v in self.get_mut(i) {
                *v = T::from_f64(rng.normal() * std);
            }
        }
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            specs: self.specs.clone(),
            offsets: self.offsets.clone(),
            data: self.data.iter().map(|v| U::from_f64(Scalar::to_f64(*v))).collect(),
        }
    }
}

/// A batch of `(N, 3, S, S)` images, validated against a model's input size.
pub fn check_batch<T: Scalar>(batch: &Tensor<T>, size: usize) -> Result<usize, LearnError> {
    match batch.shape.as_slice() {
        [n, 3, h, w] if *h == size && *w == size => Ok(*n),
        _ => Err(LearnError::ShapeMismatch {
            expected: vec![0, 3, size, size],
            got: batch.shape.clone(),
        }),
    }
}
