//! Domain value types shared by every stage. Constructors validate the
//! invariants once, so downstream code can rely on them.

use autodiff::{Scalar, Tensor};
use ndarray::{ArrayD, IxDyn};

use super::error::{InpaintError, Result};

/// A batch of images, laid out B×C×H×W with values in [-1, 1] (up to a tiny
/// numeric tolerance) and all entries finite. The inner tensor may carry
/// autodiff history; wrapping does not detach it.
#[derive(Clone, Debug)]
pub struct ImageTensor<F: Scalar> {
    tensor: Tensor<F>,
}

const RANGE_TOL: f64 = 1e-4;

impl<F: Scalar> ImageTensor<F> {
    pub fn new(tensor: Tensor<F>) -> Result<Self> {
        if tensor.ndim() != 4 {
            return Err(InpaintError::Shape(format!(
                "image tensor must be B x C x H x W, got {:?}",
                tensor.shape()
            )));
        }
        let bound = F::from_f64(1.0 + RANGE_TOL);
        for &v in tensor.data().iter() {
            if !v.is_finite() {
                return Err(InpaintError::Invalid("non-finite image value".into()));
            }
            if v.abs() > bound {
                return Err(InpaintError::Invalid(format!(
                    "image value {v} outside [-1, 1]"
                )));
            }
        }
        Ok(ImageTensor { tensor })
    }

    pub fn from_array(data: ArrayD<F>) -> Result<Self> {
        Self::new(Tensor::constant(data))
    }

    pub fn zeros(b: usize, c: usize, h: usize, w: usize) -> Self {
        ImageTensor {
            tensor: Tensor::zeros(&[b, c, h, w]),
        }
    }

    pub fn tensor(&self) -> &Tensor<F> {
        &self.tensor
    }

    pub fn into_tensor(self) -> Tensor<F> {
        self.tensor
    }

    pub fn batch(&self) -> usize {
        self.tensor.shape()[0]
    }

    pub fn channels(&self) -> usize {
        self.tensor.shape()[1]
    }

    pub fn height(&self) -> usize {
        self.tensor.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.tensor.shape()[3]
    }
}

/// A binary validity map, B×1×H×W. Entry 1 marks a valid (kept) pixel and 0
/// a hole (erased) pixel; entries are exactly 0.0 or 1.0.
#[derive(Clone, Debug)]
pub struct Mask<F: Scalar> {
    tensor: Tensor<F>,
}

impl<F: Scalar> Mask<F> {
    pub fn new(tensor: Tensor<F>) -> Result<Self> {
        if tensor.ndim() != 4 || tensor.shape()[1] != 1 {
            return Err(InpaintError::Shape(format!(
                "mask must be B x 1 x H x W, got {:?}",
                tensor.shape()
            )));
        }
        for &v in tensor.data().iter() {
            if v != F::zero() && v != F::one() {
                return Err(InpaintError::Invalid(format!(
                    "mask entry {v} is not exactly 0 or 1"
                )));
            }
        }
        Ok(Mask { tensor })
    }

    pub fn from_array(data: ArrayD<F>) -> Result<Self> {
        Self::new(Tensor::constant(data))
    }

    pub fn all_valid(b: usize, h: usize, w: usize) -> Self {
        Mask {
            tensor: Tensor::ones(&[b, 1, h, w]),
        }
    }

    pub fn tensor(&self) -> &Tensor<F> {
        &self.tensor
    }

    pub fn batch(&self) -> usize {
        self.tensor.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.tensor.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.tensor.shape()[3]
    }
}

/// Per-layer style vectors in the extended latent space: B×L×D, one
/// independent D-vector per modulated synthesis layer.
#[derive(Clone, Debug)]
pub struct StyleCode<F: Scalar> {
    tensor: Tensor<F>,
}

impl<F: Scalar> StyleCode<F> {
    pub fn new(tensor: Tensor<F>) -> Result<Self> {
        if tensor.ndim() != 3 {
            return Err(InpaintError::Shape(format!(
                "style code must be B x L x D, got {:?}",
                tensor.shape()
            )));
        }
        if tensor.data().iter().any(|v| !v.is_finite()) {
            return Err(InpaintError::Invalid("non-finite style code".into()));
        }
        Ok(StyleCode { tensor })
    }

    pub fn zeros(b: usize, layers: usize, dim: usize) -> Self {
        StyleCode {
            tensor: Tensor::zeros(&[b, layers, dim]),
        }
    }

    pub fn tensor(&self) -> &Tensor<F> {
        &self.tensor
    }

    pub fn batch(&self) -> usize {
        self.tensor.shape()[0]
    }

    pub fn layers(&self) -> usize {
        self.tensor.shape()[1]
    }

    pub fn dim(&self) -> usize {
        self.tensor.shape()[2]
    }
}

/// Orthonormal latent directions with their (descending) eigenvalues, as
/// produced by closed-form factorization of the decoder's style-affine
/// weights.
#[derive(Clone, Debug)]
pub struct SemanticDirections<F: Scalar> {
    /// D×n; column i is the i'th strongest direction.
    pub directions: ndarray::Array2<F>,
    /// n descending nonnegative eigenvalues of AᵀA.
    pub eigenvalues: Vec<F>,
    /// Layer range [start, end) of the decoder the factorization covered.
    pub source_layers: (usize, usize),
}

impl<F: Scalar> SemanticDirections<F> {
    pub fn count(&self) -> usize {
        self.directions.ncols()
    }

    pub fn dim(&self) -> usize {
        self.directions.nrows()
    }

    /// Checks orthonormality and eigenvalue ordering, returning the largest
    /// deviation from directionsᵀ·directions = I.
    pub fn validate(&self) -> Result<f64> {
        let g = self.directions.t().dot(&self.directions);
        let n = self.count();
        let mut worst = 0.0f64;
        for i in 0..n {
            for j in 0..n {
                let want = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((g[[i, j]].to_f64() - want).abs());
            }
        }
        if worst >= 1e-5 {
            return Err(InpaintError::Invalid(format!(
                "directions not orthonormal: max deviation {worst:.3e}"
            )));
        }
        for w in self.eigenvalues.windows(2) {
            if w[1] > w[0] {
                return Err(InpaintError::Invalid(
                    "eigenvalues not descending".into(),
                ));
            }
        }
        if self.eigenvalues.iter().any(|&e| e < F::zero()) {
            return Err(InpaintError::Invalid("negative eigenvalue".into()));
        }
        Ok(worst)
    }
}

/// Convenience: a constant image tensor filled with one value.
pub fn const_image<F: Scalar>(b: usize, c: usize, h: usize, w: usize, v: F) -> ImageTensor<F> {
    ImageTensor {
        tensor: Tensor::constant(ArrayD::from_elem(IxDyn(&[b, c, h, w]), v)),
    }
}
