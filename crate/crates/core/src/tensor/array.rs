use crate::error::{Error, Result};

/// Dense row-major array of `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct NdArray {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl NdArray {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape("NdArray::new", format!("shape {shape:?} holds {n} values, got {}", data.len())));
        }
        Ok(NdArray { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        let n = shape.iter().product();
        NdArray { shape: shape.to_vec(), data: vec![v; n] }
    }

    pub fn scalar(v: f64) -> Self {
        NdArray { shape: Vec::new(), data: vec![v] }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        NdArray { shape: vec![data.len()], data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// The single value of a one-element array.
    ///
    /// Panics if the array holds more than one value.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on array of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn reshaped(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::shape("reshape", format!("cannot view {:?} as {:?}", self.shape, shape)));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        NdArray { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_map(&self, other: &NdArray, f: impl Fn(f64, f64) -> f64) -> Self {
        debug_assert_eq!(self.shape, other.shape);
        NdArray { shape: self.shape.clone(), data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect() }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn sq_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Rows `start..start + len` along the leading axis.
    pub fn slice_leading(&self, start: usize, len: usize) -> Result<Self> {
        let Some((&n, rest)) = self.shape.split_first() else {
            return Err(Error::shape("slice_leading", "scalar has no leading axis"));
        };
        if start + len > n {
            return Err(Error::shape("slice_leading", format!("{start}+{len} exceeds {n}")));
        }
        let row: usize = rest.iter().product();
        let mut shape = self.shape.clone();
        shape[0] = len;
        Ok(NdArray { shape, data: self.data[start * row..(start + len) * row].to_vec() })
    }

    /// Stacks arrays of identical shape along a new leading axis, or
    /// concatenates along the existing leading axis when `concat` is set.
    pub fn stack(parts: &[&NdArray], concat: bool) -> Result<Self> {
        let first = parts.first().ok_or_else(|| Error::shape("stack", "no arrays"))?;
        let inner = if concat { &first.shape[1..] } else { &first.shape[..] };
        let mut lead = 0;
        let mut data = Vec::new();
        for p in parts {
            let p_inner = if concat { &p.shape[1..] } else { &p.shape[..] };
            if p_inner != inner {
                return Err(Error::shape("stack", format!("{:?} vs {:?}", first.shape, p.shape)));
            }
            lead += if concat { p.shape[0] } else { 1 };
            data.extend_from_slice(&p.data);
        }
        let mut shape = vec![lead];
        shape.extend_from_slice(inner);
        Ok(NdArray { shape, data })
    }
}
