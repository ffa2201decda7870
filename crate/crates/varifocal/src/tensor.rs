//! Dense row-major tensors over `f32` or `f64`.
//!
//! Every array the networks touch — input images, feature maps, weights,
//! gradients — is a [`Tensor`]. Data is a reference-counted flat buffer, so
//! cloning a tensor is cheap and copy-on-write kicks in only when a shared
//! buffer is mutated.
//!
//! ```
//! use varifocal::tensor::Tensor;
//!
//! let t = Tensor::<f32>::from_vec(vec![2, 3], vec![0., 1., 2., 3., 4., 5.]).unwrap();
//! assert_eq!(t.shape(), &[2, 3]);
//! assert_eq!(t.data()[4], 4.0);
//! ```

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::sync::Arc;

use num_traits::{Float, NumAssignOps};

use crate::error::{Error, Result};

/// Element type code, used by the checkpoint container.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn code(self) -> u8 {
        match self {
            Dtype::F32 => 1,
            Dtype::F64 => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            1 => Some(Dtype::F32),
            2 => Some(Dtype::F64),
            _ => None,
        }
    }
}

/// Scalar element of a tensor. Implemented for `f32` and `f64`.
///
/// Training runs in `f32`; gradient checking switches the whole graph to
/// `f64` because central-difference tolerances are unreachable in single
/// precision.
pub trait Element:
    Float + NumAssignOps + Sum + Send + Sync + Debug + Display + Default + 'static
{
    const DTYPE: Dtype;

    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;

    /// `c[m,n] = alpha * a[m,k] @ b[k,n] + beta * c` with explicit strides.
    ///
    /// # Safety
    /// Pointers must cover the strided extents, and `c` must not alias `a`/`b`.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

impl Element for f32 {
    const DTYPE: Dtype = Dtype::F32;

    fn from_f64(x: f64) -> Self {
        x as f32
    }

    fn to_f64(self) -> f64 {
        self as f64
    }

    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Element for f64 {
    const DTYPE: Dtype = Dtype::F64;

    fn from_f64(x: f64) -> Self {
        x
    }

    fn to_f64(self) -> f64 {
        self
    }

    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// Dense row-major n-dimensional array.
#[derive(Clone)]
pub struct Tensor<E: Element> {
    shape: Vec<usize>,
    data: Arc<Vec<E>>,
}

impl<E: Element> Debug for Tensor<E> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.len() <= 16 {
            write!(f, " {:?}", self.data())
        } else {
            write!(f, " [{} values]", self.len())
        }
    }
}

impl<E: Element> Tensor<E> {
    /// Builds a tensor from a shape and a row-major value buffer.
    pub fn from_vec(shape: Vec<usize>, data: Vec<E>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(format!(
                "shape {:?} wants {} values, got {}",
                shape,
                n,
                data.len()
            )));
        }
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::shape(format!("zero extent in shape {shape:?}")));
        }
        Ok(Self {
            shape,
            data: Arc::new(data),
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: Arc::new(vec![E::zero(); n]),
        }
    }

    pub fn filled(shape: &[usize], value: E) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: Arc::new(vec![value; n]),
        }
    }

    /// 0-d style scalar stored as a `[1]` tensor.
    pub fn scalar(value: E) -> Self {
        Self::filled(&[1], value)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[E] {
        &self.data
    }

    /// Mutable access; clones the buffer first if it is shared.
    pub fn data_mut(&mut self) -> &mut [E] {
        Arc::make_mut(&mut self.data)
    }

    /// Reinterprets the buffer under a new shape of identical volume.
    pub fn reshaped(&self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.len() {
            return Err(Error::shape(format!(
                "cannot reshape {:?} ({} values) to {:?}",
                self.shape,
                self.len(),
                shape
            )));
        }
        Ok(Self {
            shape,
            data: Arc::clone(&self.data),
        })
    }

    /// The single value of a `[1]` tensor.
    pub fn item(&self) -> Result<E> {
        if self.len() != 1 {
            return Err(Error::shape(format!(
                "item() on tensor of shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    /// Errors if any value is NaN or infinite.
    pub fn check_finite(&self, context: &str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite(context.to_string()))
        }
    }

    /// Elementwise `self += rhs` (shapes must match).
    pub fn add_assign(&mut self, rhs: &Tensor<E>) -> Result<()> {
        if self.shape != rhs.shape {
            return Err(Error::shape(format!(
                "add_assign {:?} vs {:?}",
                self.shape, rhs.shape
            )));
        }
        let dst = self.data_mut();
        for (d, s) in dst.iter_mut().zip(rhs.data.iter()) {
            *d += *s;
        }
        Ok(())
    }

    pub fn fill(&mut self, value: E) {
        for v in self.data_mut() {
            *v = value;
        }
    }

    pub fn map(&self, f: impl Fn(E) -> E) -> Self {
        Self {
            shape: self.shape.clone(),
            data: Arc::new(self.data.iter().map(|&v| f(v)).collect()),
        }
    }

    /// Sum of all elements accumulated in f64 for reproducible reductions.
    pub fn sum_f64(&self) -> f64 {
        self.data.iter().map(|v| v.to_f64()).sum()
    }

    /// Converts every element through f64 into another precision.
    pub fn cast<T: Element>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::new(self.data.iter().map(|v| T::from_f64(v.to_f64())).collect()),
        }
    }

    /// True when both tensors have identical shape and bit-identical values.
    pub fn bit_eq(&self, other: &Tensor<E>) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| a.to_f64().to_bits() == b.to_f64().to_bits())
    }
}

/// Checks that `got` equals `want`, with an operation name for the message.
pub(crate) fn expect_shape(op: &str, got: &[usize], want: &[usize]) -> Result<()> {
    if got == want {
        Ok(())
    } else {
        Err(Error::shape(format!("{op}: expected {want:?}, got {got:?}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_validates_volume() {
        assert!(Tensor::<f32>::from_vec(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::<f32>::from_vec(vec![2, 0], vec![]).is_err());
        let t = Tensor::<f32>::from_vec(vec![2, 2], vec![1.0; 4]).unwrap();
        assert_eq!(t.len(), 4);
    }

    #[test]
    fn clone_is_shared_until_mutated() {
        let mut a = Tensor::<f32>::filled(&[4], 1.0);
        let b = a.clone();
        a.data_mut()[0] = 7.0;
        assert_eq!(b.data()[0], 1.0);
        assert_eq!(a.data()[0], 7.0);
    }

    #[test]
    fn finite_check_flags_nan() {
        let t = Tensor::<f64>::from_vec(vec![2], vec![1.0, f64::NAN]).unwrap();
        assert!(t.check_finite("test").is_err());
        let t = Tensor::<f64>::from_vec(vec![2], vec![1.0, 2.0]).unwrap();
        assert!(t.check_finite("test").is_ok());
    }

    #[test]
    fn reshape_preserves_data() {
        let t = Tensor::<f32>::from_vec(vec![2, 3], vec![0., 1., 2., 3., 4., 5.]).unwrap();
        let r = t.reshaped(vec![3, 2]).unwrap();
        assert_eq!(r.shape(), &[3, 2]);
        assert_eq!(r.data(), t.data());
        assert!(t.reshaped(vec![4, 2]).is_err());
    }
}
