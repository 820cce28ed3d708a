//! Dense rank-4 feature maps, named parameter tensors and the reverse-mode
//! tape that ties them together.

pub mod init;
pub mod kernels;
pub mod optim;
pub mod parallel;
pub mod tape;

use std::collections::HashMap;
use std::fmt;

use crate::error::{Error, Result};

pub use init::{xavier_bound, xavier_init, xavier_uniform};
pub use optim::Sgd;
pub use tape::{Tape, Var};

/// Activations laid out as `(batch, channels, height, width)`, row-major.
#[derive(Clone, PartialEq)]
pub struct FeatureMap {
    shape: [usize; 4],
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
}

impl fmt::Debug for FeatureMap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FeatureMap")
            .field("shape", &self.shape)
            .field("has_grad", &self.grad.is_some())
            .finish()
    }
}

impl FeatureMap {
    pub fn zeros(shape: [usize; 4]) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: [usize; 4], value: f64) -> Self {
        Self {
            shape,
            data: vec![value; shape.iter().product()],
            grad: None,
        }
    }

    pub fn from_vec(shape: [usize; 4], data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(Error::shape(
                "feature map",
                format!("{} values for shape {:?}", data.len(), shape),
            ));
        }
        Ok(Self {
            shape,
            data,
            grad: None,
        })
    }

    pub fn from_fn(shape: [usize; 4], mut f: impl FnMut(usize, usize, usize, usize) -> f64) -> Self {
        let [b, c, h, w] = shape;
        let mut data = Vec::with_capacity(b * c * h * w);
        for bi in 0..b {
            for ci in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        data.push(f(bi, ci, y, x));
                    }
                }
            }
        }
        Self {
            shape,
            data,
            grad: None,
        }
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    pub fn channels(&self) -> usize {
        self.shape[1]
    }

    pub fn height(&self) -> usize {
        self.shape[2]
    }

    pub fn width(&self) -> usize {
        self.shape[3]
    }

    pub fn plane(&self) -> usize {
        self.shape[2] * self.shape[3]
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

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Vec<f64>) -> Result<()> {
        if grad.len() != self.data.len() {
            return Err(Error::shape("grad", "gradient buffer length differs from values"));
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    pub fn offset(&self, b: usize, c: usize, y: usize, x: usize) -> usize {
        ((b * self.shape[1] + c) * self.shape[2] + y) * self.shape[3] + x
    }

    pub fn at(&self, b: usize, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.offset(b, c, y, x)]
    }

    /// One `(height, width)` plane.
    pub fn channel(&self, b: usize, c: usize) -> &[f64] {
        let p = self.plane();
        let start = (b * self.shape[1] + c) * p;
        &self.data[start..start + p]
    }

    /// One batch item, all channels.
    pub fn item(&self, b: usize) -> &[f64] {
        let n = self.shape[1] * self.plane();
        &self.data[b * n..(b + 1) * n]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Copies the listed batch items into a new map.
    pub fn select_batch(&self, items: &[usize]) -> FeatureMap {
        let n = self.shape[1] * self.plane();
        let mut data = Vec::with_capacity(items.len() * n);
        for &b in items {
            data.extend_from_slice(&self.data[b * n..(b + 1) * n]);
        }
        FeatureMap {
            shape: [items.len(), self.shape[1], self.shape[2], self.shape[3]],
            data,
            grad: None,
        }
    }

    /// Stacks single-item maps along the batch axis.
    pub fn stack(items: &[&FeatureMap]) -> Result<FeatureMap> {
        let first = items.first().ok_or_else(|| Error::shape("stack", "no inputs"))?;
        let [_, c, h, w] = first.shape;
        let mut data = Vec::new();
        let mut b = 0;
        for m in items {
            if m.shape[1..] != [c, h, w] {
                return Err(Error::shape("stack", format!("{:?} vs {:?}", m.shape, first.shape)));
            }
            b += m.shape[0];
            data.extend_from_slice(&m.data);
        }
        FeatureMap::from_vec([b, c, h, w], data)
    }
}

/// Handle of a parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// A learnable tensor with an accumulating gradient buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
    pub grad: Vec<f64>,
}

impl ParamTensor {
    pub fn zeros(name: impl Into<String>, shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            name: name.into(),
            shape: shape.to_vec(),
            values: vec![0.0; n],
            grad: vec![0.0; n],
        }
    }

    pub fn from_values(name: impl Into<String>, shape: &[usize], values: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if values.len() != n {
            return Err(Error::shape(
                "param",
                format!("{} values for shape {:?}", values.len(), shape),
            ));
        }
        Ok(Self {
            name: name.into(),
            shape: shape.to_vec(),
            grad: vec![0.0; n],
            values,
        })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }
}

/// Ordered collection of every learnable tensor of a model.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<ParamTensor>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a tensor. Names must be unique.
    pub fn insert(&mut self, param: ParamTensor) -> ParamId {
        assert!(
            !self.by_name.contains_key(&param.name),
            "duplicate parameter name {}",
            param.name
        );
        let id = ParamId(self.params.len());
        self.by_name.insert(param.name.clone(), id);
        self.params.push(param);
        id
    }

    pub fn get(&self, id: ParamId) -> &ParamTensor {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ParamTensor {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = &ParamTensor> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut ParamTensor> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn zero_grads(&mut self) {
        self.params.iter_mut().for_each(ParamTensor::zero_grad);
    }

    pub fn total_len(&self) -> usize {
        self.params.iter().map(ParamTensor::len).sum()
    }
}
