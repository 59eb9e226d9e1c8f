//! Dense row-major `f32` tensors and the forward-pass primitives used by the
//! autoencoder.
//!
//! Rank-3 feature maps are laid out `H×W×C`, rank-4 batches `N×H×W×C`, and
//! rank-2 tensors double as row-major matrices (one embedding per row).

mod ops;

pub use ops::{
    batchnorm_infer, concat_channels, conv2d, global_avg_pool, leaky_relu, maxpool2,
    maxpool_same, sigmoid, upsample2, BatchNormParams, ConvParams,
};

use crate::error::{Error, Result};

pub const MAX_RANK: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f32>,
}

pub(crate) fn checked_volume(dims: &[usize]) -> Result<usize> {
    if dims.is_empty() || dims.len() > MAX_RANK {
        return Err(Error::InvalidDims {
            dims: dims.to_vec(),
            reason: format!("rank must be between 1 and {MAX_RANK}"),
        });
    }
    if dims.contains(&0) {
        return Err(Error::InvalidDims {
            dims: dims.to_vec(),
            reason: "every dim must be at least 1".into(),
        });
    }
    dims.iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::InvalidDims {
            dims: dims.to_vec(),
            reason: "element count overflows".into(),
        })
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let volume = checked_volume(&dims)?;
        if volume != data.len() {
            return Err(Error::InvalidDims {
                dims,
                reason: format!("expected {volume} elements, got {}", data.len()),
            });
        }
        Ok(Tensor { dims, data })
    }

    pub fn filled(dims: Vec<usize>, value: f32) -> Result<Self> {
        let volume = checked_volume(&dims)?;
        Ok(Tensor {
            dims,
            data: vec![value; volume],
        })
    }

    pub fn zeros(dims: Vec<usize>) -> Result<Self> {
        Self::filled(dims, 0.0)
    }

    /// Builds a rank-1 tensor.
    pub fn vector(data: Vec<f32>) -> Result<Self> {
        Self::new(vec![data.len()], data)
    }

    /// Builds a `rows.len() × dim` matrix. All rows must share one length.
    pub fn from_rows<R: AsRef<[f32]>>(rows: &[R]) -> Result<Self> {
        let first = rows.first().ok_or(Error::Empty("from_rows"))?;
        let dim = first.as_ref().len();
        let mut data = Vec::with_capacity(rows.len() * dim);
        for (i, row) in rows.iter().enumerate() {
            let row = row.as_ref();
            if row.len() != dim {
                return Err(Error::shape(
                    "from_rows",
                    format!("row {i} has length {}, expected {dim}", row.len()),
                ));
            }
            data.extend_from_slice(row);
        }
        Self::new(vec![rows.len(), dim], data)
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn reshape(self, dims: Vec<usize>) -> Result<Self> {
        Self::new(dims, self.data)
    }

    /// Number of sub-tensors along the leading axis.
    pub fn outer_len(&self) -> usize {
        self.dims[0]
    }

    /// Element count of one sub-tensor along the leading axis.
    pub fn inner_len(&self) -> usize {
        self.dims[1..].iter().product()
    }

    /// Borrow sub-tensor `i` along the leading axis (a row, for matrices).
    pub fn row(&self, i: usize) -> &[f32] {
        let stride = self.inner_len();
        &self.data[i * stride..(i + 1) * stride]
    }

    pub fn rows(&self) -> std::slice::ChunksExact<'_, f32> {
        self.data.chunks_exact(self.inner_len())
    }

    /// Copy sub-tensor `i` along the leading axis out as its own tensor.
    pub fn slab(&self, i: usize) -> Result<Tensor> {
        if self.rank() < 2 {
            return Err(Error::InvalidDims {
                dims: self.dims.clone(),
                reason: "slab needs rank >= 2".into(),
            });
        }
        if i >= self.outer_len() {
            return Err(Error::InvalidParam(format!(
                "slab index {i} out of range for leading dim {}",
                self.outer_len()
            )));
        }
        Tensor::new(self.dims[1..].to_vec(), self.row(i).to_vec())
    }

    /// Stack equally shaped tensors along a new leading axis.
    pub fn stack(items: &[Tensor]) -> Result<Tensor> {
        let first = items.first().ok_or(Error::Empty("stack"))?;
        let mut dims = Vec::with_capacity(first.rank() + 1);
        dims.push(items.len());
        dims.extend_from_slice(first.dims());
        let mut data = Vec::with_capacity(items.len() * first.len());
        for (i, t) in items.iter().enumerate() {
            if t.dims != first.dims {
                return Err(Error::shape(
                    "stack",
                    format!("item {i} has dims {:?}, expected {:?}", t.dims, first.dims),
                ));
            }
            data.extend_from_slice(&t.data);
        }
        Tensor::new(dims, data)
    }

    /// `(rows, cols)` of a rank-2 tensor.
    pub fn matrix_dims(&self, op: &'static str) -> Result<(usize, usize)> {
        match *self.dims.as_slice() {
            [r, c] => Ok((r, c)),
            _ => Err(Error::shape(
                op,
                format!("expected a matrix, got dims {:?}", self.dims),
            )),
        }
    }

    /// `(H, W, C)` of a rank-3 tensor.
    pub fn hwc(&self, op: &'static str) -> Result<(usize, usize, usize)> {
        match *self.dims.as_slice() {
            [h, w, c] => Ok((h, w, c)),
            _ => Err(Error::shape(
                op,
                format!("expected H×W×C, got dims {:?}", self.dims),
            )),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_dims() {
        assert!(Tensor::new(vec![], vec![]).is_err());
        assert!(Tensor::new(vec![2, 0], vec![]).is_err());
        assert!(Tensor::new(vec![1, 1, 1, 1, 1], vec![0.0]).is_err());
        assert!(Tensor::new(vec![2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::new(vec![usize::MAX, 2], vec![]).is_err());
    }

    #[test]
    fn rows_and_slabs() {
        let t = Tensor::new(vec![2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        assert_eq!(t.row(1), &[4., 5., 6.]);
        assert_eq!(t.rows().count(), 2);
        assert_eq!(t.slab(0).unwrap().dims(), &[3]);
        assert!(t.slab(2).is_err());

        let stacked = Tensor::stack(&[t.slab(0).unwrap(), t.slab(1).unwrap()]).unwrap();
        assert_eq!(stacked, t);
    }

    #[test]
    fn from_rows_checks_lengths() {
        assert!(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0]]).is_err());
        let m = Tensor::from_rows(&[[1.0f32, 2.0], [3.0, 4.0]]).unwrap();
        assert_eq!(m.matrix_dims("t").unwrap(), (2, 2));
    }
}
