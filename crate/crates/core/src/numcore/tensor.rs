use crate::error::{shape_err, Result};

/// Dense row-major tensor of `f64` with optional gradient storage.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

pub(crate) fn check_shape(shape: &[usize]) -> Result<()> {
    if shape.contains(&0) {
        return Err(shape_err(format!("zero-sized dimension in {shape:?}")));
    }
    Ok(())
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        check_shape(shape)?;
        if numel(shape) != data.len() {
            return Err(shape_err(format!(
                "shape {shape:?} needs {} elements, got {}",
                numel(shape),
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        assert!(shape.iter().all(|&d| d > 0), "zero-sized dimension in {shape:?}");
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel(shape)],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn scalar(value: f64) -> Self {
        Self::full(&[1], value)
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let mut t = Self::zeros(shape);
        t.data.iter_mut().enumerate().for_each(|(i, v)| *v = f(i));
        t
    }

    pub fn with_requires_grad(mut self, on: bool) -> Self {
        self.requires_grad = on;
        self
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

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Adds `g` into the stored gradient; gradients accumulate until
    /// [`Tensor::zero_grad`] is called.
    pub fn accumulate_grad(&mut self, g: &[f64]) -> Result<()> {
        if g.len() != self.data.len() {
            return Err(shape_err(format!(
                "gradient of length {} for tensor of shape {:?}",
                g.len(),
                self.shape
            )));
        }
        match &mut self.grad {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            None => self.grad = Some(g.to_vec()),
        }
        Ok(())
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        check_shape(shape)?;
        if numel(shape) != self.data.len() {
            return Err(shape_err(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    fn flat_index(&self, index: &[usize]) -> usize {
        assert_eq!(index.len(), self.shape.len(), "index rank mismatch");
        index.iter().zip(&self.shape).fold(0, |acc, (&i, &d)| {
            assert!(i < d, "index {index:?} out of bounds for {:?}", self.shape);
            acc * d + i
        })
    }

    pub fn at(&self, index: &[usize]) -> f64 {
        self.data[self.flat_index(index)]
    }

    pub fn set(&mut self, index: &[usize], value: f64) {
        let i = self.flat_index(index);
        self.data[i] = value;
    }

    /// Largest elementwise absolute difference; shapes must agree.
    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "shape mismatch in max_abs_diff");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Transpose of a rank-2 tensor.
    pub fn transpose2(&self) -> Result<Tensor> {
        let [r, c] = self.shape[..] else {
            return Err(shape_err(format!("transpose2 needs rank 2, got {:?}", self.shape)));
        };
        Ok(Tensor::from_fn(&[c, r], |i| {
            let (j, k) = (i / r, i % r);
            self.data[k * c + j]
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_shapes() {
        assert!(Tensor::new(&[2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::new(&[0, 2], vec![]).is_err());
        assert!(Tensor::zeros(&[2, 3]).reshape(&[3, 3]).is_err());
    }

    #[test]
    fn grads_accumulate_until_zeroed() {
        let mut t = Tensor::zeros(&[2]).with_requires_grad(true);
        t.accumulate_grad(&[1.0, 2.0]).unwrap();
        t.accumulate_grad(&[1.0, 2.0]).unwrap();
        assert_eq!(t.grad().unwrap(), &[2.0, 4.0]);
        t.zero_grad();
        assert!(t.grad().is_none());
        assert!(t.accumulate_grad(&[1.0]).is_err());
    }

    #[test]
    fn indexing_is_row_major() {
        let t = Tensor::new(&[2, 3], (0..6).map(f64::from).collect()).unwrap();
        assert_eq!(t.at(&[1, 2]), 5.0);
        assert_eq!(t.transpose2().unwrap().at(&[2, 1]), 5.0);
    }
}
