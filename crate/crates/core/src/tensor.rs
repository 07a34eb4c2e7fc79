//! Dense row-major `f64` arrays.

use crate::error::{shape_err, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; len],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(shape_err!(
                "shape {:?} needs {} elements, got {}",
                shape,
                len,
                data.len()
            ));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
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

    /// `(n, c, h, w)` of a rank-4 tensor.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(shape_err!("expected rank-4 tensor, got {:?}", self.shape)),
        }
    }

    /// `(rows, cols)` of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(shape_err!("expected rank-2 tensor, got {:?}", self.shape)),
        }
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let len: usize = shape.iter().product();
        if len != self.data.len() {
            return Err(shape_err!(
                "cannot reshape {:?} into {:?}",
                self.shape,
                shape
            ));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Channel `c` of image `n` in a rank-4 tensor.
    pub fn plane(&self, n: usize, c: usize) -> &[f64] {
        let (_, ch, h, w) = self.dims4().expect("rank-4 tensor");
        let hw = h * w;
        let start = (n * ch + c) * hw;
        &self.data[start..start + hw]
    }

    /// Image `n` of a rank-4 tensor as a new `1 × C × H × W` tensor.
    pub fn image(&self, n: usize) -> Tensor {
        let (_, c, h, w) = self.dims4().expect("rank-4 tensor");
        let len = c * h * w;
        Tensor {
            shape: vec![1, c, h, w],
            data: self.data[n * len..(n + 1) * len].to_vec(),
        }
    }

    /// Stacks equally shaped `1 × C × H × W` tensors along the batch axis.
    pub fn stack(images: &[Tensor]) -> Result<Tensor> {
        let first = images
            .first()
            .ok_or_else(|| shape_err!("cannot stack an empty list"))?;
        let (_, c, h, w) = first.dims4()?;
        let mut data = Vec::with_capacity(images.len() * c * h * w);
        for img in images {
            if img.shape != [1, c, h, w] {
                return Err(shape_err!(
                    "stack: expected [1, {c}, {h}, {w}], got {:?}",
                    img.shape
                ));
            }
            data.extend_from_slice(&img.data);
        }
        Ok(Tensor {
            shape: vec![images.len(), c, h, w],
            data,
        })
    }
}
