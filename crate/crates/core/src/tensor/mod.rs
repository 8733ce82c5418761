//! Dense N-d arrays and a reverse-mode tape over them.
//!
//! [`Tensor`] is a plain row-major array. Differentiable computation happens
//! through [`Var`] handles recorded on a [`Tape`]; every op keeps the inputs it
//! needs for the reverse pass alive through shared buffers, so inference on an
//! untracking tape frees intermediates as soon as their handles drop.

mod conv;
mod ops;
mod tape;

use std::fmt::Debug;

pub use conv::BatchStats;
pub use ops::{normal_cdf, normal_pdf, GATHER_ZERO};
pub use tape::{Tape, Var};

use crate::error::{Error, Result};

/// Scalar type a tape can run in. Implemented for `f32` (training default)
/// and `f64` (gradient checks).
pub trait Real:
    num_traits::Float
    + num_traits::FromPrimitive
    + num_traits::ToPrimitive
    + Default
    + Debug
    + Send
    + Sync
    + std::iter::Sum
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + 'static
{
    /// `c = a * b + beta * c` over strided matrices.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        a_strides: (isize, isize),
        b: &[Self],
        b_strides: (isize, isize),
        beta: Self,
        c: &mut [Self],
        c_strides: (isize, isize),
    );

    /// [`Real::gemm`] through a raw output pointer.
    ///
    /// # Safety
    /// `c` must be valid for writes at every strided position of the
    /// `m x n` output, and initialized there unless `beta` is zero.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        a_strides: (isize, isize),
        b: &[Self],
        b_strides: (isize, isize),
        beta: Self,
        c: *mut Self,
        c_strides: (isize, isize),
    );

    /// `exp` for hot loops. Exact for `f64`; within a few ulp for `f32`,
    /// where it is branch-free so element loops vectorize.
    fn fast_exp(self) -> Self {
        self.exp()
    }

    fn c(x: f64) -> Self {
        Self::from_f64(x).unwrap()
    }

    fn f64(self) -> f64 {
        self.to_f64().unwrap()
    }
}

fn strided_extent(rows: usize, cols: usize, (rs, cs): (isize, isize)) -> usize {
    if rows == 0 || cols == 0 {
        return 0;
    }
    ((rows - 1) as isize * rs + (cols - 1) as isize * cs) as usize + 1
}

macro_rules! impl_real {
    ($t:ty, $gemm:path $(, $extra:item)*) => {
        impl Real for $t {
            $($extra)*

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                a_strides: (isize, isize),
                b: &[Self],
                b_strides: (isize, isize),
                beta: Self,
                c: &mut [Self],
                c_strides: (isize, isize),
            ) {
                assert!(c.len() >= strided_extent(m, n, c_strides));
                // SAFETY: `c` is a live slice covering every strided write.
                unsafe { Self::gemm_raw(m, k, n, a, a_strides, b, b_strides, beta, c.as_mut_ptr(), c_strides) }
            }

            unsafe fn gemm_raw(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                a_strides: (isize, isize),
                b: &[Self],
                b_strides: (isize, isize),
                beta: Self,
                c: *mut Self,
                c_strides: (isize, isize),
            ) {
                assert!(a.len() >= strided_extent(m, k, a_strides));
                assert!(b.len() >= strided_extent(k, n, b_strides));
                // SAFETY: operand reads stay inside the slices checked above;
                // the caller vouches for `c`.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        a_strides.0,
                        a_strides.1,
                        b.as_ptr(),
                        b_strides.0,
                        b_strides.1,
                        beta,
                        c,
                        c_strides.0,
                        c_strides.1,
                    );
                }
            }
        }
    };
}

impl_real!(
    f32,
    matrixmultiply::sgemm,
    #[inline]
    fn fast_exp(self) -> f32 {
        // Round-to-nearest through the 1.5 * 2^23 shifter, then a degree-6
        // polynomial on the reduced argument.
        const SHIFTER: f32 = 12_582_912.0;
        let x = self.clamp(-87.0, 88.0);
        let t = x * std::f32::consts::LOG2_E + SHIFTER;
        let n = (t.to_bits() as i32) - (SHIFTER.to_bits() as i32);
        let k = t - SHIFTER;
        let r = x - k * 0.693_359_4 + k * 2.121_944_4e-4;
        let mut p = 1.987_569_1e-4_f32;
        p = p * r + 1.398_199_9e-3;
        p = p * r + 8.333_452e-3;
        p = p * r + 4.166_579_6e-2;
        p = p * r + 1.666_666_5e-1;
        p = p * r + 5e-1;
        let y = (p * r * r + r + 1.0) * f32::from_bits(((n + 127) as u32) << 23);
        if self < -87.0 {
            0.0
        } else {
            y
        }
    }
);
impl_real!(f64, matrixmultiply::dgemm);

/// Operands of one block of [`fresh_gemm`]: `a`, its strides, `b`, its strides.
pub(crate) type GemmOperands<'a, F> = (&'a [F], (isize, isize), &'a [F], (isize, isize));

/// `batch` products `op(a_i) * op(b_i)`, each `m x n`, stored back to back
/// with `c_strides` (row- or column-major) inside each block. The output is
/// written once by the GEMM instead of being zero-filled first.
pub(crate) fn fresh_gemm<'a, F: Real>(
    batch: usize,
    (m, k, n): (usize, usize, usize),
    c_strides: (isize, isize),
    mut operands: impl FnMut(usize) -> GemmOperands<'a, F>,
) -> Vec<F> {
    let block = m * n;
    if k == 0 || block == 0 {
        return vec![F::zero(); batch * block];
    }
    // Both layouts visit each of the `m * n` slots exactly once.
    assert!(c_strides == (n as isize, 1) || c_strides == (1, m as isize));
    let mut c: Vec<F> = Vec::with_capacity(batch * block);
    for i in 0..batch {
        let (a, sa, b, sb) = operands(i);
        // SAFETY: block `i` lies inside the reserved capacity.
        unsafe {
            F::gemm_raw(
                m,
                k,
                n,
                a,
                sa,
                b,
                sb,
                F::zero(),
                c.as_mut_ptr().add(i * block),
                c_strides,
            );
        }
    }
    // SAFETY: with beta = 0 and k > 0 every slot of every block was written.
    unsafe { c.set_len(batch * block) };
    c
}

/// Row-major dense array.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<F> {
    shape: Vec<usize>,
    data: Vec<F>,
}

impl<F: Real> Tensor<F> {
    pub fn new(shape: &[usize], data: Vec<F>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {:?} holds {} scalars, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, F::zero())
    }

    pub fn full(shape: &[usize], value: F) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> F) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn scalar(value: F) -> Self {
        Self {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} into {:?}",
                self.shape, shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Converts between scalar precisions.
    pub fn cast<G: Real>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| G::c(v.f64())).collect(),
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor<F>) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.f64() - b.f64()).abs())
            .fold(0.0, f64::max)
    }
}

pub(crate) fn check_same_shape(op: &str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::Shape(format!("{op}: shapes {a:?} and {b:?} differ")));
    }
    Ok(())
}
