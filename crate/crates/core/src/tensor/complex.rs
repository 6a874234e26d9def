use super::Tensor;
use crate::scalar::Scalar;

/// Complex tensor as two real tensors of identical shape. Only the DFT path
/// produces these; ops stay on the real tensors so gradients flow through
/// both components.
#[derive(Clone, Debug)]
pub struct ComplexPair<T: Scalar> {
    pub re: Tensor<T>,
    pub im: Tensor<T>,
}

impl<T: Scalar> ComplexPair<T> {
    pub fn new(re: Tensor<T>, im: Tensor<T>) -> Self {
        assert_eq!(
            re.shape(),
            im.shape(),
            "complex parts disagree: {:?} vs {:?}",
            re.shape(),
            im.shape()
        );
        ComplexPair { re, im }
    }

    pub fn shape(&self) -> &[usize] {
        self.re.shape()
    }

    pub fn conj(&self) -> ComplexPair<T> {
        ComplexPair {
            re: self.re.clone(),
            im: self.im.neg(),
        }
    }

    pub fn detach(&self) -> ComplexPair<T> {
        ComplexPair {
            re: self.re.detach(),
            im: self.im.detach(),
        }
    }

    /// Elementwise multiply by a real tensor (broadcast rules of `mul`).
    pub fn mul_real(&self, m: &Tensor<T>) -> crate::error::Result<ComplexPair<T>> {
        Ok(ComplexPair {
            re: self.re.mul(m)?,
            im: self.im.mul(m)?,
        })
    }
}
