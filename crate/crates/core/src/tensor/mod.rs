//! Dense values, dynamic tensors and the numeric kernels that run over them.
//!
//! All storage is row-major `f64` with the batch dimension leading, so the
//! per-vertex slice of a batched value is always contiguous.

mod copy;
mod kernels;
mod matmul;

pub use copy::{batched_copy, CopyPair};
pub use kernels::{apply_kernel, FusedArg, FusedKernel, FusedStep, KernelOp, WriteMode};

use crate::error::TensorError;

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn check_shape(shape: &[usize]) -> Result<(), TensorError> {
    if shape.is_empty() || shape.contains(&0) {
        return Err(TensorError::InvalidShape(shape.to_vec()));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseTensor {
    dims: Vec<usize>,
    data: Vec<f64>,
}

impl DenseTensor {
    pub fn zeros(dims: &[usize]) -> Result<Self, TensorError> {
        check_shape(dims)?;
        Ok(Self {
            dims: dims.to_vec(),
            data: vec![0.0; numel(dims)],
        })
    }

    pub fn from_vec(dims: &[usize], data: Vec<f64>) -> Result<Self, TensorError> {
        check_shape(dims)?;
        if data.len() != numel(dims) {
            return Err(TensorError::LengthMismatch {
                dims: dims.to_vec(),
                len: data.len(),
            });
        }
        Ok(Self {
            dims: dims.to_vec(),
            data,
        })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn fill(&mut self, value: f64) {
        self.data.fill(value);
    }

    /// Leading dim is the batch.
    pub fn view(&self) -> TensorView<'_> {
        TensorView::batched(self.dims[0], &self.dims[1..], &self.data)
    }

    pub fn view_mut(&mut self) -> TensorViewMut<'_> {
        TensorViewMut::batched(self.dims[0], &self.dims[1..], &mut self.data)
    }

    /// The whole tensor as a single unbatched operand (model parameters).
    pub fn as_param(&self) -> TensorView<'_> {
        TensorView::unbatched(&self.dims, &self.data)
    }

    pub fn as_param_mut(&mut self) -> TensorViewMut<'_> {
        TensorViewMut::unbatched(&self.dims, &mut self.data)
    }
}

/// Read-only window over contiguous storage.
///
/// `rows` is `Some(bs)` for batched operands and `None` for parameters, which
/// broadcast over the batch.
#[derive(Debug, Clone, Copy)]
pub struct TensorView<'a> {
    pub rows: Option<usize>,
    pub shape: &'a [usize],
    pub data: &'a [f64],
}

#[derive(Debug)]
pub struct TensorViewMut<'a> {
    pub rows: Option<usize>,
    pub shape: &'a [usize],
    pub data: &'a mut [f64],
}

impl<'a> TensorView<'a> {
    pub fn batched(rows: usize, shape: &'a [usize], data: &'a [f64]) -> Self {
        debug_assert_eq!(rows * numel(shape), data.len());
        Self {
            rows: Some(rows),
            shape,
            data,
        }
    }

    pub fn unbatched(shape: &'a [usize], data: &'a [f64]) -> Self {
        debug_assert_eq!(numel(shape), data.len());
        Self {
            rows: None,
            shape,
            data,
        }
    }

    pub fn dims(&self) -> Vec<usize> {
        let mut dims = Vec::with_capacity(self.shape.len() + 1);
        dims.extend(self.rows);
        dims.extend_from_slice(self.shape);
        dims
    }

    /// Elements per batch row.
    pub fn cols(&self) -> usize {
        numel(self.shape)
    }
}

impl<'a> TensorViewMut<'a> {
    pub fn batched(rows: usize, shape: &'a [usize], data: &'a mut [f64]) -> Self {
        debug_assert_eq!(rows * numel(shape), data.len());
        Self {
            rows: Some(rows),
            shape,
            data,
        }
    }

    pub fn unbatched(shape: &'a [usize], data: &'a mut [f64]) -> Self {
        debug_assert_eq!(numel(shape), data.len());
        Self {
            rows: None,
            shape,
            data,
        }
    }

    pub fn dims(&self) -> Vec<usize> {
        let mut dims = Vec::with_capacity(self.shape.len() + 1);
        dims.extend(self.rows);
        dims.extend_from_slice(self.shape);
        dims
    }

    pub fn cols(&self) -> usize {
        numel(self.shape)
    }

    pub fn as_view(&self) -> TensorView<'_> {
        TensorView {
            rows: self.rows,
            shape: self.shape,
            data: self.data,
        }
    }
}

/// A growable buffer viewed through `(shape, bs, offset)`.
///
/// Each batching task appends `bs` rows at `offset`; the scheduler moves the
/// offset forward after the task and back again during the backward pass.
#[derive(Debug, Clone)]
pub struct DynamicTensor {
    shape: Vec<usize>,
    bs: usize,
    offset: usize,
    buf: Vec<f64>,
    growable: bool,
}

impl DynamicTensor {
    pub fn alloc(shape: &[usize], initial_capacity: usize) -> Result<Self, TensorError> {
        check_shape(shape)?;
        Ok(Self {
            shape: shape.to_vec(),
            bs: 0,
            offset: 0,
            buf: vec![0.0; initial_capacity],
            growable: true,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    /// Elements per row, `∏ shape`.
    pub fn row_len(&self) -> usize {
        numel(&self.shape)
    }

    pub fn bs(&self) -> usize {
        self.bs
    }

    pub fn offset(&self) -> usize {
        self.offset
    }

    pub fn capacity(&self) -> usize {
        self.buf.len()
    }

    pub fn set_growable(&mut self, growable: bool) {
        self.growable = growable;
    }

    pub fn set_bs(&mut self, bs: usize) {
        self.bs = bs;
    }

    pub(crate) fn set_offset(&mut self, offset: usize) {
        self.offset = offset;
    }

    fn window_end(&self) -> usize {
        self.offset + self.bs * self.row_len()
    }

    /// Grows the buffer by doubling until it holds `elements`, zero-filling
    /// the new tail.
    pub fn ensure_capacity(&mut self, elements: usize) -> Result<(), TensorError> {
        if elements <= self.buf.len() {
            return Ok(());
        }
        if !self.growable {
            return Err(TensorError::Bounds {
                start: self.offset,
                end: elements,
                capacity: self.buf.len(),
            });
        }
        let mut cap = self.buf.len().max(1);
        while cap < elements {
            cap *= 2;
        }
        self.buf.resize(cap, 0.0);
        Ok(())
    }

    pub fn view(&self) -> Result<TensorView<'_>, TensorError> {
        let end = self.window_end();
        if end > self.buf.len() {
            return Err(TensorError::Bounds {
                start: self.offset,
                end,
                capacity: self.buf.len(),
            });
        }
        Ok(TensorView::batched(
            self.bs,
            &self.shape,
            &self.buf[self.offset..end],
        ))
    }

    /// Mutable view of the current window, growing the buffer when allowed.
    pub fn view_mut(&mut self) -> Result<TensorViewMut<'_>, TensorError> {
        let end = self.window_end();
        self.ensure_capacity(end)?;
        Ok(TensorViewMut::batched(
            self.bs,
            &self.shape,
            &mut self.buf[self.offset..end],
        ))
    }

    pub(crate) fn window_mut(&mut self) -> Result<&mut [f64], TensorError> {
        let end = self.window_end();
        self.ensure_capacity(end)?;
        Ok(&mut self.buf[self.offset..end])
    }

    /// Storage for rows `[0, rows)` regardless of the current window.
    pub fn rows(&self, rows: usize) -> &[f64] {
        &self.buf[..rows * self.row_len()]
    }

    pub(crate) fn zero_rows(&mut self, rows: usize) {
        let n = (rows * self.row_len()).min(self.buf.len());
        self.buf[..n].fill(0.0);
    }

    pub(crate) fn take_buffer(&mut self) -> Vec<f64> {
        std::mem::take(&mut self.buf)
    }

    pub(crate) fn restore_buffer(&mut self, buf: Vec<f64>) {
        self.buf = buf;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn alloc_starts_empty() {
        let dt = DynamicTensor::alloc(&[4], 16).unwrap();
        assert_eq!(dt.capacity(), 16);
        assert_eq!(dt.offset(), 0);
        assert_eq!(dt.bs(), 0);
        assert!(dt.rows(4).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn alloc_rejects_zero_dim() {
        assert_eq!(
            DynamicTensor::alloc(&[2, 0], 4).unwrap_err(),
            TensorError::InvalidShape(vec![2, 0])
        );
        assert!(DynamicTensor::alloc(&[], 4).is_err());
    }

    #[test]
    fn view_grows_buffer_preserving_contents() {
        let mut dt = DynamicTensor::alloc(&[8], 16).unwrap();
        dt.buf[3] = 7.0;
        dt.set_offset(16);
        dt.set_bs(3);
        let v = dt.view_mut().unwrap();
        assert_eq!(v.dims(), vec![3, 8]);
        assert!(dt.capacity() >= 40);
        assert_eq!(dt.rows(1)[3], 7.0);
        assert!(dt.buf[16..].iter().all(|&x| x == 0.0));
    }

    #[test]
    fn view_windows() {
        let mut dt = DynamicTensor::alloc(&[4], 32).unwrap();
        dt.set_offset(20);
        dt.set_bs(3);
        let v = dt.view().unwrap();
        assert_eq!(v.dims(), vec![3, 4]);
        assert_eq!(v.data.len(), 12);

        let mut sq = DynamicTensor::alloc(&[2, 2], 4).unwrap();
        sq.set_bs(1);
        assert_eq!(sq.view().unwrap().dims(), vec![1, 2, 2]);

        let mut empty = DynamicTensor::alloc(&[4], 0).unwrap();
        empty.set_bs(0);
        let v = empty.view().unwrap();
        assert_eq!(v.dims(), vec![0, 4]);
        assert!(v.data.is_empty());
    }

    #[test]
    fn zero_length_view_on_empty_buffer() {
        let mut dt = DynamicTensor::alloc(&[2, 3], 0).unwrap();
        dt.set_bs(0);
        assert_eq!(dt.view_mut().unwrap().data.len(), 0);
    }

    #[test]
    fn fixed_buffer_reports_bounds() {
        let mut dt = DynamicTensor::alloc(&[4], 8).unwrap();
        dt.set_growable(false);
        dt.set_bs(3);
        assert!(matches!(dt.view_mut(), Err(TensorError::Bounds { .. })));
        assert!(matches!(dt.view(), Err(TensorError::Bounds { .. })));
    }

    #[test]
    fn dense_validates_length() {
        assert!(DenseTensor::from_vec(&[2, 2], vec![1.0; 3]).is_err());
        let t = DenseTensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(t.view().dims(), vec![2, 2]);
        assert_eq!(t.as_param().rows, None);
    }
}
