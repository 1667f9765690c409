//! Dense row-major `f64` tensors and integer class maps.

use std::fmt;

use crate::error::{Error, Result};

/// Dense rank-N array of `f64` in row-major order.
///
/// Tensors are plain values: operations never mutate their inputs.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::shape(
                "Tensor::new",
                format!("extents must be positive, got {shape:?}"),
            ));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(
                "Tensor::new",
                format!("shape {shape:?} needs {numel} elements, got {}", data.len()),
            ));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Internal constructor for callers that already guarantee the invariant.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Tensor::from_parts(shape.to_vec(), vec![value; numel])
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor::full(shape, 0.0)
    }

    pub fn scalar(value: f64) -> Self {
        Tensor::from_parts(vec![1], vec![value])
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let numel: usize = shape.iter().product();
        Tensor::from_parts(shape.to_vec(), (0..numel).map(&mut f).collect())
    }

    pub fn zeros_like(&self) -> Self {
        Tensor::zeros(&self.shape)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// The single element of a one-element tensor.
    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [b, c, h, w] => Ok((b, c, h, w)),
            _ => Err(Error::shape(
                "dims4",
                format!("expected a B×C×H×W tensor, got {:?}", self.shape),
            )),
        }
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        Tensor::new(shape, self.data)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Tensor::from_parts(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// `self += other` elementwise; shapes must already agree.
    pub(crate) fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Image `b` of a batched tensor as a tensor with leading extent 1.
    pub fn batch_item(&self, b: usize) -> Result<Tensor> {
        let n = self.shape[0];
        if b >= n {
            return Err(Error::shape(
                "batch_item",
                format!("index {b} out of range for batch of {n}"),
            ));
        }
        let stride = self.numel() / n;
        let mut shape = self.shape.clone();
        shape[0] = 1;
        Ok(Tensor::from_parts(
            shape,
            self.data[b * stride..(b + 1) * stride].to_vec(),
        ))
    }

    /// Concatenate along the leading axis. Remaining extents must agree.
    pub fn stack(items: &[Tensor]) -> Result<Tensor> {
        let first = items
            .first()
            .ok_or_else(|| Error::shape("stack", "no tensors to stack"))?;
        let tail = &first.shape[1..];
        let mut data = Vec::with_capacity(first.numel() * items.len());
        let mut lead = 0;
        for t in items {
            if &t.shape[1..] != tail {
                return Err(Error::shape(
                    "stack",
                    format!("{:?} vs {:?}", first.shape, t.shape),
                ));
            }
            lead += t.shape[0];
            data.extend_from_slice(&t.data);
        }
        let mut shape = first.shape.clone();
        shape[0] = lead;
        Ok(Tensor::from_parts(shape, data))
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const SHOWN: usize = 8;
        write!(f, "Tensor{:?}[", self.shape)?;
        for (i, v) in self.data.iter().take(SHOWN).enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{v}")?;
        }
        if self.data.len() > SHOWN {
            write!(f, ", …")?;
        }
        write!(f, "]")
    }
}

/// Label id excluded from losses and metrics.
pub const IGNORE_ID: u8 = 255;

/// Integer class map of shape B×H×W (one class id per pixel).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassMap {
    batch: usize,
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl ClassMap {
    pub fn new(batch: usize, height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if batch == 0 || height == 0 || width == 0 {
            return Err(Error::shape("ClassMap::new", "extents must be positive"));
        }
        if data.len() != batch * height * width {
            return Err(Error::shape(
                "ClassMap::new",
                format!(
                    "{batch}×{height}×{width} needs {} ids, got {}",
                    batch * height * width,
                    data.len()
                ),
            ));
        }
        Ok(ClassMap {
            batch,
            height,
            width,
            data,
        })
    }

    pub fn filled(batch: usize, height: usize, width: usize, id: u8) -> Self {
        ClassMap {
            batch,
            height,
            width,
            data: vec![id; batch * height * width],
        }
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.batch, self.height, self.width)
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, b: usize, y: usize, x: usize) -> u8 {
        self.data[(b * self.height + y) * self.width + x]
    }

    pub fn batch_item(&self, b: usize) -> ClassMap {
        let n = self.height * self.width;
        ClassMap {
            batch: 1,
            height: self.height,
            width: self.width,
            data: self.data[b * n..(b + 1) * n].to_vec(),
        }
    }

    pub fn stack(items: &[ClassMap]) -> Result<ClassMap> {
        let first = items
            .first()
            .ok_or_else(|| Error::shape("ClassMap::stack", "no maps to stack"))?;
        let mut data = Vec::new();
        let mut batch = 0;
        for m in items {
            if (m.height, m.width) != (first.height, first.width) {
                return Err(Error::shape(
                    "ClassMap::stack",
                    format!(
                        "{}×{} vs {}×{}",
                        first.height, first.width, m.height, m.width
                    ),
                ));
            }
            batch += m.batch;
            data.extend_from_slice(&m.data);
        }
        ClassMap::new(batch, first.height, first.width, data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_mismatched_data_length() {
        assert!(Tensor::new(&[2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(&[0, 3], vec![]).is_err());
        assert!(Tensor::new(&[2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn stack_and_split_batches() {
        let a = Tensor::full(&[1, 2, 2, 2], 1.0);
        let b = Tensor::full(&[1, 2, 2, 2], 2.0);
        let s = Tensor::stack(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(s.shape(), &[2, 2, 2, 2]);
        assert_eq!(s.batch_item(0).unwrap(), a);
        assert_eq!(s.batch_item(1).unwrap(), b);
        assert!(s.batch_item(2).is_err());
    }

    #[test]
    fn class_map_indexing() {
        let m = ClassMap::new(2, 1, 2, vec![0, 1, 2, 3]).unwrap();
        assert_eq!(m.get(1, 0, 1), 3);
        assert_eq!(m.batch_item(1).data(), &[2, 3]);
        assert!(ClassMap::new(1, 2, 2, vec![0; 3]).is_err());
    }
}
