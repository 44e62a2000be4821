//! Dense row-major f64 tensors with an optional gradient buffer.
//!
//! Tensors are plain values: operations that build a compute graph live in
//! [`crate::graph`]. The canonical shape order throughout the crate is
//! batch x tokens x channels for token tensors and batch x channels x
//! height x width for images.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    /// Builds a tensor, checking that the extents multiply out to the data
    /// length and that every value is finite.
    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::dim(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                n,
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::numeric(format!(
                "non-finite value {} at flat index {}",
                data[i], i
            )));
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    /// Constructor for operator outputs: skips the finiteness scan (inputs
    /// are already finite; training loops check losses every step).
    pub(crate) fn from_vec_internal(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn filled(shape: Vec<usize>, value: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; n],
            requires_grad: false,
            grad: None,
        }
    }

    /// Rank-0 scalar.
    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn requires_grad(mut self, yes: bool) -> Self {
        self.requires_grad = yes;
        self
    }

    pub fn requires_grad_flag(&self) -> bool {
        self.requires_grad
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// The accumulated gradient, if backward has populated it.
    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub(crate) fn set_grad(&mut self, grad: Option<Vec<f64>>) {
        if let Some(g) = &grad {
            debug_assert_eq!(g.len(), self.data.len());
        }
        self.grad = grad;
    }

    /// Value of a rank-0 (or single-element) tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(Error::dim(format!(
                "item() on tensor of shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Row-major strides for a shape.
pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Numpy-style broadcast of two shapes (right-aligned, extents must match or
/// be 1).
pub fn broadcast_shapes(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() {
            1
        } else {
            a[i - (rank - a.len())]
        };
        let db = if i < rank - b.len() {
            1
        } else {
            b[i - (rank - b.len())]
        };
        if da != db && da != 1 && db != 1 {
            return Err(Error::dim(format!(
                "cannot broadcast shapes {:?} and {:?}",
                a, b
            )));
        }
        out[i] = da.max(db);
    }
    Ok(out)
}

/// Strides for reading `shape` as if broadcast to `out_shape`: broadcast axes
/// get stride 0.
pub fn broadcast_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let own = strides(shape);
    let pad = out_shape.len() - shape.len();
    let mut s = vec![0usize; out_shape.len()];
    for i in 0..shape.len() {
        s[pad + i] = if shape[i] == 1 { 0 } else { own[i] };
    }
    s
}

/// Walks a multi-dimensional index range while incrementally maintaining a
/// flat offset per stride set, so per-element cost stays O(1) amortized.
pub struct StrideWalker {
    shape: Vec<usize>,
    strides: Vec<Vec<usize>>,
    index: Vec<usize>,
    offsets: Vec<usize>,
    done: bool,
}

impl StrideWalker {
    pub fn new(shape: &[usize], strides: Vec<Vec<usize>>) -> Self {
        StrideWalker {
            shape: shape.to_vec(),
            offsets: vec![0; strides.len()],
            strides,
            index: vec![0; shape.len()],
            done: shape.iter().any(|&e| e == 0),
        }
    }

    #[inline]
    pub fn done(&self) -> bool {
        self.done
    }

    #[inline]
    pub fn offset(&self, which: usize) -> usize {
        self.offsets[which]
    }

    #[inline]
    pub fn advance(&mut self) {
        if self.done {
            return;
        }
        for axis in (0..self.shape.len()).rev() {
            self.index[axis] += 1;
            if self.index[axis] < self.shape[axis] {
                for (o, s) in self.offsets.iter_mut().zip(self.strides.iter()) {
                    *o += s[axis];
                }
                return;
            }
            self.index[axis] = 0;
            for (o, s) in self.offsets.iter_mut().zip(self.strides.iter()) {
                *o -= s[axis] * (self.shape[axis] - 1);
            }
        }
        self.done = true;
    }
}

/// Odometer over a multi-dimensional index range. Yields flat offsets into
/// one or more buffers given per-buffer strides.
pub struct Odometer<'a> {
    shape: &'a [usize],
    index: Vec<usize>,
    done: bool,
}

impl<'a> Odometer<'a> {
    pub fn new(shape: &'a [usize]) -> Self {
        Odometer {
            shape,
            index: vec![0; shape.len()],
            done: shape.iter().any(|&e| e == 0),
        }
    }

    /// Current multi-index, or None when exhausted.
    pub fn index(&self) -> Option<&[usize]> {
        if self.done {
            None
        } else {
            Some(&self.index)
        }
    }

    pub fn offset(&self, strides: &[usize]) -> usize {
        self.index
            .iter()
            .zip(strides.iter())
            .map(|(i, s)| i * s)
            .sum()
    }

    pub fn advance(&mut self) {
        if self.done {
            return;
        }
        for axis in (0..self.shape.len()).rev() {
            self.index[axis] += 1;
            if self.index[axis] < self.shape[axis] {
                return;
            }
            self.index[axis] = 0;
        }
        self.done = true;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_extents() {
        assert!(Tensor::from_vec(vec![2, 3], vec![0.0; 6]).is_ok());
        let err = Tensor::from_vec(vec![2, 3], vec![0.0; 5]).unwrap_err();
        assert!(matches!(err, Error::Dim(_)));
    }

    #[test]
    fn from_vec_rejects_non_finite() {
        let err = Tensor::from_vec(vec![2], vec![1.0, f64::NAN]).unwrap_err();
        assert!(matches!(err, Error::Numeric(_)));
    }

    #[test]
    fn scalar_has_empty_shape() {
        let t = Tensor::scalar(3.5);
        assert!(t.shape().is_empty());
        assert_eq!(t.item().unwrap(), 3.5);
    }

    #[test]
    fn broadcast_rules() {
        assert_eq!(
            broadcast_shapes(&[4, 1, 3], &[2, 3]).unwrap(),
            vec![4, 2, 3]
        );
        assert_eq!(broadcast_shapes(&[5], &[2, 5]).unwrap(), vec![2, 5]);
        assert!(broadcast_shapes(&[2, 3], &[4, 3]).is_err());
    }

    #[test]
    fn odometer_walks_row_major() {
        let shape = [2usize, 3usize];
        let st = strides(&shape);
        let mut odo = Odometer::new(&shape);
        let mut seen = Vec::new();
        while odo.index().is_some() {
            seen.push(odo.offset(&st));
            odo.advance();
        }
        assert_eq!(seen, vec![0, 1, 2, 3, 4, 5]);
    }
}
