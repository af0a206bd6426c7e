use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Dense row-major array with an optional gradient buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        if numel(&shape) != data.len() {
            return Err(Error::dim(format!(
                "shape {:?} holds {} values but {} were given",
                shape,
                numel(&shape),
                data.len()
            )));
        }
        Ok(Self {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let n = numel(&shape);
        Self {
            shape,
            data: vec![T::zero(); n],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Self {
        let mut t = Self::zeros(shape);
        t.data.iter_mut().for_each(|x| *x = value);
        t
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    /// Builds a 2-D tensor from equal-length rows.
    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::dim("ragged rows"));
        }
        Self::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn with_requires_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, requires_grad: bool) {
        self.requires_grad = requires_grad;
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    /// Clears the gradient buffer to zeros (allocating it if needed).
    pub fn zero_grad(&mut self) {
        match &mut self.grad {
            Some(g) => g.iter_mut().for_each(|x| *x = T::zero()),
            None => self.grad = Some(vec![T::zero(); self.data.len()]),
        }
    }

    /// Adds `scale * g` into the gradient buffer.
    pub fn accumulate_grad(&mut self, g: &[T], scale: T) -> Result<()> {
        if g.len() != self.data.len() {
            return Err(Error::dim(format!(
                "gradient of length {} for tensor of shape {:?}",
                g.len(),
                self.shape
            )));
        }
        let buf = self
            .grad
            .get_or_insert_with(|| vec![T::zero(); self.data.len()]);
        for (b, &x) in buf.iter_mut().zip(g) {
            *b += scale * x;
        }
        Ok(())
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    pub fn reshape(mut self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        if numel(&shape) != self.data.len() {
            return Err(Error::dim(format!(
                "cannot reshape {:?} into {:?}",
                self.shape, shape
            )));
        }
        self.shape = shape;
        self.grad = None;
        Ok(self)
    }

    /// Rows and columns of a 2-D tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::dim(format!("expected a 2-D tensor, got shape {s:?}"))),
        }
    }

    pub fn row(&self, i: usize) -> &[T] {
        let cols = *self.shape.last().unwrap_or(&1);
        &self.data[i * cols..(i + 1) * cols]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Elementwise conversion to another scalar type.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|&x| U::from_f64(x.to_f64_lossy()).unwrap_or_else(U::nan))
                .collect(),
            requires_grad: self.requires_grad,
            grad: None,
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
            requires_grad: false,
            grad: None,
        }
    }

    /// Plain (untracked) matrix product.
    pub fn matmul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        let (m, k) = self.dims2()?;
        let (k2, n) = other.dims2()?;
        if k != k2 {
            return Err(Error::dim(format!(
                "matmul of {:?} by {:?}: inner dimensions differ",
                self.shape, other.shape
            )));
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            T::one(),
            &self.data,
            k as isize,
            1,
            &other.data,
            n as isize,
            1,
            T::zero(),
            &mut out,
        );
        Tensor::new(vec![m, n], out)
    }

    pub fn transpose(&self) -> Result<Tensor<T>> {
        let (m, n) = self.dims2()?;
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Tensor::new(vec![n, m], out)
    }
}
