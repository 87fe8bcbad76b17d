use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major `f64` array.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() || shape.iter().any(|&d| d == 0) {
            return Err(Error::shape(shape, &[data.len()]));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self::vector(vec![v])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Row-major flat offset of a multi-index.
    pub fn offset(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.shape.len());
        index
            .iter()
            .zip(&self.shape)
            .fold(0, |acc, (&i, &d)| acc * d + i)
    }

    pub fn get(&self, index: &[usize]) -> f64 {
        self.data[self.offset(index)]
    }
}

/// A trainable tensor together with its gradient accumulator.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        let grad = Tensor::zeros(value.shape());
        Self {
            name: name.into(),
            value,
            grad,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }

    pub fn accumulate(&mut self, g: &[f64]) {
        debug_assert_eq!(g.len(), self.grad.len());
        for (a, b) in self.grad.data_mut().iter_mut().zip(g) {
            *a += b;
        }
    }
}

/// Ordered collection of parameters addressed by index.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet {
    params: Vec<Parameter>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_params(params: Vec<Parameter>) -> Self {
        Self { params }
    }

    pub fn into_params(self) -> Vec<Parameter> {
        self.params
    }

    pub fn push(&mut self, p: Parameter) -> usize {
        self.params.push(p);
        self.params.len() - 1
    }

    pub fn get(&self, i: usize) -> &Parameter {
        &self.params[i]
    }

    pub fn value(&self, i: usize) -> &[f64] {
        self.params[i].value.data()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Parameter> {
        self.params.iter()
    }

    pub fn as_mut_slice(&mut self) -> &mut [Parameter] {
        &mut self.params
    }

    pub fn as_slice(&self) -> &[Parameter] {
        &self.params
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(Parameter::zero_grad);
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Adds a gradient buffer into the parameters' accumulators.
    pub fn accumulate(&mut self, grads: &GradSet) {
        for (p, g) in self.params.iter_mut().zip(&grads.bufs) {
            p.accumulate(g);
        }
    }

    pub fn grads(&self) -> GradSet {
        GradSet {
            bufs: self.params.iter().map(|p| p.grad.data().to_vec()).collect(),
        }
    }
}

/// Gradient buffers shaped like a [`ParamSet`], used for per-item accumulation
/// before an ordered reduction.
#[derive(Debug, Clone, PartialEq)]
pub struct GradSet {
    bufs: Vec<Vec<f64>>,
}

impl GradSet {
    pub fn zeros_like(params: &ParamSet) -> Self {
        Self {
            bufs: params.iter().map(|p| vec![0.0; p.value.len()]).collect(),
        }
    }

    pub fn buf(&self, i: usize) -> &[f64] {
        &self.bufs[i]
    }

    pub fn buf_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.bufs[i]
    }

    /// Two disjoint mutable buffers at once.
    pub fn pair_mut(&mut self, a: usize, b: usize) -> (&mut [f64], &mut [f64]) {
        assert_ne!(a, b);
        if a < b {
            let (lo, hi) = self.bufs.split_at_mut(b);
            (&mut lo[a], &mut hi[0])
        } else {
            let (lo, hi) = self.bufs.split_at_mut(a);
            (&mut hi[0], &mut lo[b])
        }
    }

    pub fn add_assign(&mut self, other: &GradSet) {
        for (a, b) in self.bufs.iter_mut().zip(&other.bufs) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for b in &mut self.bufs {
            b.iter_mut().for_each(|x| *x *= s);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.bufs.iter().flatten().all(|x| x.is_finite())
    }

    pub fn iter(&self) -> impl Iterator<Item = &[f64]> {
        self.bufs.iter().map(Vec::as_slice)
    }
}

/// Sums gradient sets in slice order.
pub fn reduce_ordered(parts: Vec<GradSet>, params: &ParamSet) -> GradSet {
    let mut total = GradSet::zeros_like(params);
    for p in &parts {
        total.add_assign(p);
    }
    total
}
