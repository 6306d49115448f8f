//! Parameter tensors and shape helpers.

use std::rc::Rc;

use crate::rng::Rng;
use crate::scalar::Scalar;

/// A persistent parameter: lives across steps, staged onto the tape as a
/// leaf each forward pass. Data is behind an `Rc` so staging is a refcount
/// bump; the optimizer takes `make_mut` after the tape is dropped.
#[derive(Debug, Clone)]
pub struct PTensor<E: Scalar> {
    pub shape: Vec<usize>,
    pub data: Rc<Vec<E>>,
    pub trainable: bool,
}

impl<E: Scalar> PTensor<E> {
    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: Rc::new(vec![E::ZERO; shape.iter().product()]),
            trainable: true,
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<E>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len());
        Self {
            shape: shape.to_vec(),
            data: Rc::new(data),
            trainable: true,
        }
    }

    /// Normal(0, std) init drawn from the given stream.
    pub fn randn(shape: &[usize], std: f64, rng: &mut Rng) -> Self {
        let n: usize = shape.iter().product();
        let data: Vec<E> = (0..n).map(|_| E::from_f64(rng.normal() * std)).collect();
        Self {
            shape: shape.to_vec(),
            data: Rc::new(data),
            trainable: true,
        }
    }

    pub fn identity(dim: usize) -> Self {
        let mut data = vec![E::ZERO; dim * dim];
        for i in 0..dim {
            data[i * dim + i] = E::ONE;
        }
        Self {
            shape: vec![dim, dim],
            data: Rc::new(data),
            trainable: true,
        }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn frozen(mut self) -> Self {
        self.trainable = false;
        self
    }

    pub fn values_mut(&mut self) -> &mut [E] {
        Rc::make_mut(&mut self.data).as_mut_slice()
    }

    /// Raw little-endian bytes, used by checkpointing and hashing.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.data.len() * E::DTYPE.size_bytes());
        for &v in self.data.iter() {
            v.to_le_bytes(&mut out);
        }
        out
    }

    pub fn from_bytes(shape: &[usize], bytes: &[u8]) -> Self {
        let w = E::DTYPE.size_bytes();
        assert_eq!(bytes.len(), shape.iter().product::<usize>() * w);
        let data: Vec<E> = bytes.chunks_exact(w).map(E::from_le_slice).collect();
        Self::from_vec(shape, data)
    }
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Row-major strides for a contiguous layout.
pub fn contiguous_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}
