//! Dense row-major `f64` tensors.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// How to populate a freshly created tensor.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Fill {
    Const(f64),
    /// Uniform samples in `[low, high)` from a ChaCha8 stream seeded with `seed`.
    Uniform {
        seed: u64,
        low: f64,
        high: f64,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

pub(crate) fn check_dims(shape: &[usize]) -> Result<()> {
    if shape.contains(&0) {
        return Err(Error::InvalidShape { shape: shape.to_vec(), reason: "every dimension must be at least 1".into() });
    }
    Ok(())
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        check_dims(shape)?;
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::InvalidShape {
                shape: shape.to_vec(),
                reason: format!("expects {numel} values, got {}", data.len()),
            });
        }
        Ok(Tensor { shape: shape.to_vec(), data, requires_grad: false, grad: None })
    }

    pub fn create(shape: &[usize], fill: Fill) -> Result<Self> {
        check_dims(shape)?;
        let numel: usize = shape.iter().product();
        let data = match fill {
            Fill::Const(v) => vec![v; numel],
            Fill::Uniform { seed, low, high } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                (0..numel).map(|_| low + (high - low) * rng.random::<f64>()).collect()
            }
        };
        Tensor::new(shape, data)
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Tensor::create(shape, Fill::Const(0.0))
    }

    pub fn full(shape: &[usize], value: f64) -> Result<Self> {
        Tensor::create(shape, Fill::Const(value))
    }

    pub fn uniform(shape: &[usize], seed: u64, low: f64, high: f64) -> Result<Self> {
        Tensor::create(shape, Fill::Uniform { seed, low, high })
    }

    pub fn scalar(value: f64) -> Self {
        Tensor { shape: vec![1], data: vec![value], requires_grad: false, grad: None }
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

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.is_scalar() {
            Ok(self.data[0])
        } else {
            Err(Error::Contract(format!("item() on tensor of shape {:?}", self.shape)))
        }
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn with_requires_grad(mut self, flag: bool) -> Self {
        self.requires_grad = flag;
        self
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        self.requires_grad = flag;
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    /// Adds `delta` into the gradient buffer, creating it on first use.
    pub fn accumulate_grad(&mut self, delta: &[f64]) -> Result<()> {
        if delta.len() != self.data.len() {
            return Err(Error::mismatch("accumulate_grad", &self.shape, &[delta.len()]));
        }
        match &mut self.grad {
            Some(g) => g.iter_mut().zip(delta).for_each(|(a, b)| *a += b),
            None => self.grad = Some(delta.to_vec()),
        }
        Ok(())
    }

    pub fn take_grad(&mut self) -> Option<Vec<f64>> {
        self.grad.take()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        check_dims(shape)?;
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::mismatch("reshape", &self.shape, shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Slice `index` along the leading axis.
    pub fn select(&self, index: usize) -> Result<Tensor> {
        let lead = self.shape[0];
        if index >= lead {
            return Err(Error::Contract(format!("index {index} out of range for leading dim {lead}")));
        }
        let inner = self.data.len() / lead;
        let shape = if self.shape.len() == 1 { vec![1] } else { self.shape[1..].to_vec() };
        Tensor::new(&shape, self.data[index * inner..(index + 1) * inner].to_vec())
    }

    /// Stack equally shaped tensors along a new leading axis.
    pub fn stack(items: &[Tensor]) -> Result<Tensor> {
        let first = items.first().ok_or_else(|| Error::Contract("stack of an empty list".into()))?;
        let mut data = Vec::with_capacity(first.numel() * items.len());
        for t in items {
            if t.shape != first.shape {
                return Err(Error::mismatch("stack", &first.shape, &t.shape));
            }
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        Tensor::new(&shape, data)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::mismatch("max_abs_diff", &self.shape, &other.shape));
        }
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_fill() {
        let t = Tensor::create(&[2, 3], Fill::Const(0.0)).unwrap();
        assert_eq!(t.shape(), &[2, 3]);
        assert_eq!(t.data(), &[0.0; 6]);
    }

    #[test]
    fn scalar_fill() {
        let t = Tensor::create(&[1], Fill::Const(7.5)).unwrap();
        assert_eq!(t.data(), &[7.5]);
    }

    #[test]
    fn seeded_uniform_is_reproducible() {
        let fill = Fill::Uniform { seed: 42, low: 0.0, high: 1.0 };
        let a = Tensor::create(&[4], fill).unwrap();
        let b = Tensor::create(&[4], fill).unwrap();
        let bytes = |t: &Tensor| -> Vec<u8> { t.data().iter().flat_map(|v| v.to_le_bytes()).collect() };
        assert_eq!(bytes(&a), bytes(&b));
        assert!(a.data().iter().all(|&v| (0.0..1.0).contains(&v)));
    }

    #[test]
    fn zero_dim_rejected() {
        assert!(matches!(Tensor::zeros(&[2, 0]), Err(Error::InvalidShape { .. })));
    }

    #[test]
    fn length_mismatch_rejected() {
        assert!(Tensor::new(&[2, 2], vec![1.0; 3]).is_err());
    }

    #[test]
    fn grad_accumulates() {
        let mut t = Tensor::zeros(&[2]).unwrap();
        t.accumulate_grad(&[1.0, 2.0]).unwrap();
        t.accumulate_grad(&[1.0, 2.0]).unwrap();
        assert_eq!(t.grad(), Some(&[2.0, 4.0][..]));
    }

    #[test]
    fn select_and_stack_invert() {
        let t = Tensor::uniform(&[3, 2, 2], 1, -1.0, 1.0).unwrap();
        let parts: Vec<_> = (0..3).map(|i| t.select(i).unwrap()).collect();
        assert_eq!(Tensor::stack(&parts).unwrap(), t);
    }
}
