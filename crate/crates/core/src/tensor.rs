use crate::error::{Error, Result};
use crate::rng::Rng;

/// Dense row-major array of `f64` with an optional gradient buffer.
///
/// A "scalar" is a tensor of shape `[1]`; rank-0 shapes are not used.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

pub(crate) fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() || shape.contains(&0) {
        return Err(Error::InvalidShape(shape.to_vec()));
    }
    Ok(shape.iter().product())
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let n = check_shape(shape)?;
        if n != data.len() {
            return Err(Error::ElementCount {
                from: vec![data.len()],
                to: shape.to_vec(),
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn full(shape: &[usize], value: f64) -> Result<Self> {
        let n = check_shape(shape)?;
        Tensor::new(shape, vec![value; n])
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Tensor::full(shape, 0.0)
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    /// Standard-normal entries drawn from `rng` in row-major order.
    pub fn randn(shape: &[usize], rng: &mut Rng) -> Result<Self> {
        let n = check_shape(shape)?;
        let data = (0..n).map(|_| rng.normal()).collect();
        Tensor::new(shape, data)
    }

    pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut Rng) -> Result<Self> {
        let n = check_shape(shape)?;
        let data = (0..n).map(|_| rng.uniform_range(lo, hi)).collect();
        Tensor::new(shape, data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
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

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(Error::NonScalarLoss(self.shape.clone()));
        }
        Ok(self.data[0])
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    /// Turning gradients on allocates a zeroed buffer; turning them off drops it.
    pub fn set_requires_grad(&mut self, on: bool) {
        self.requires_grad = on;
        self.grad = on.then(|| vec![0.0; self.data.len()]);
    }

    pub fn with_grad(mut self) -> Self {
        self.set_requires_grad(true);
        self
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn grad_mut(&mut self) -> Option<&mut [f64]> {
        self.grad.as_deref_mut()
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// Adds `delta` into the gradient buffer. No-op unless gradients are on.
    pub fn accumulate_grad(&mut self, delta: &[f64]) -> Result<()> {
        let Some(g) = self.grad.as_mut() else {
            return Ok(());
        };
        if g.len() != delta.len() {
            return Err(Error::ShapeMismatch {
                op: "accumulate_grad",
                lhs: vec![g.len()],
                rhs: vec![delta.len()],
            });
        }
        g.iter_mut().zip(delta).for_each(|(a, b)| *a += b);
        Ok(())
    }

    /// Copy with gradient state stripped.
    pub fn detached(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.clone(),
            requires_grad: false,
            grad: None,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite()) && self.grad.as_ref().is_none_or(|g| g.iter().all(|v| v.is_finite()))
    }

    pub fn check_finite(&self, op: &'static str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite { op })
        }
    }

    /// Row-major strides for the current shape.
    pub fn strides(&self) -> Vec<usize> {
        strides(&self.shape)
    }
}

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_fills_every_element() {
        let t = Tensor::full(&[2, 2], 0.0).unwrap();
        assert_eq!(t.data(), &[0.0; 4]);
        assert!(!t.requires_grad());
        let t = Tensor::full(&[3], 1.0).unwrap();
        assert_eq!(t.data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn degenerate_shapes_rejected() {
        assert!(matches!(Tensor::full(&[2, 0], 1.0), Err(Error::InvalidShape(_))));
        assert!(matches!(Tensor::full(&[], 1.0), Err(Error::InvalidShape(_))));
    }

    #[test]
    fn randn_is_seeded() {
        let a = Tensor::randn(&[4], &mut Rng::new(1)).unwrap();
        let b = Tensor::randn(&[4], &mut Rng::new(1)).unwrap();
        assert_eq!(a, b);

        let mut rng = Rng::new(1);
        let first = Tensor::randn(&[2], &mut rng).unwrap();
        let second = Tensor::randn(&[2], &mut rng).unwrap();
        assert_ne!(first, second);
    }

    #[test]
    fn randn_mean_near_zero() {
        let t = Tensor::randn(&[100_000], &mut Rng::new(7)).unwrap();
        let mean = t.data().iter().sum::<f64>() / t.numel() as f64;
        assert!(mean.abs() < 0.02, "mean {mean}");
        let var = t.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / t.numel() as f64;
        assert!((var - 1.0).abs() < 0.02, "var {var}");
    }

    #[test]
    fn grad_buffer_tracks_flag() {
        let mut t = Tensor::full(&[3], 1.0).unwrap();
        assert!(t.grad().is_none());
        t.set_requires_grad(true);
        assert_eq!(t.grad().unwrap(), &[0.0; 3]);
        t.accumulate_grad(&[1.0, 2.0, 3.0]).unwrap();
        t.accumulate_grad(&[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(t.grad().unwrap(), &[2.0, 4.0, 6.0]);
        t.zero_grad();
        assert_eq!(t.grad().unwrap(), &[0.0; 3]);
    }

    #[test]
    fn validity_check_spots_nan() {
        let mut t = Tensor::full(&[2], 1.0).unwrap();
        assert!(t.is_finite());
        t.data_mut()[1] = f64::NAN;
        assert!(matches!(t.check_finite("x"), Err(Error::NonFinite { op: "x" })));
    }

    #[test]
    fn row_major_strides() {
        assert_eq!(strides(&[2, 3, 4]), vec![12, 4, 1]);
        assert_eq!(strides(&[5]), vec![1]);
    }
}
