use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_like::NumLike;
use serde::{Deserialize, Serialize};

/// Storage precision of a tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn name(self) -> &'static str {
        match self {
            DType::F32 => "f32",
            DType::F64 => "f64",
        }
    }

    pub fn size_of(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

mod num_like {
    pub trait NumLike:
        Copy
        + PartialOrd
        + std::ops::Add<Output = Self>
        + std::ops::Sub<Output = Self>
        + std::ops::Mul<Output = Self>
        + std::ops::Div<Output = Self>
        + std::ops::Neg<Output = Self>
        + std::ops::AddAssign
        + std::ops::SubAssign
        + std::ops::MulAssign
    {
    }
    impl NumLike for f32 {}
    impl NumLike for f64 {}
}

/// Floating-point element type of a [`Tensor`](super::Tensor).
///
/// Implemented for `f32` (training and inference) and `f64` (gradient checks).
pub trait Element: NumLike + Default + Debug + Display + Send + Sync + Sum + 'static {
    const DTYPE: DType;
    const ZERO: Self;
    const ONE: Self;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn sqrt(self) -> Self;
    fn abs(self) -> Self;
    fn is_finite(self) -> bool;
    fn max(self, other: Self) -> Self;
    fn min(self, other: Self) -> Self;
    fn erf(self) -> Self;

    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;

    /// `C = alpha * A * B + beta * C` on strided row/column layouts.
    ///
    /// # Safety
    /// Every pointer must be valid for the extents and strides given.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
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

macro_rules! impl_element {
    ($t:ty, $dtype:expr, $gemm:path, $erf:path) => {
        impl Element for $t {
            const DTYPE: DType = $dtype;
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;

            #[inline]
            fn from_f64(v: f64) -> Self {
                v as $t
            }
            #[inline]
            fn to_f64(self) -> f64 {
                self as f64
            }
            #[inline]
            fn exp(self) -> Self {
                <$t>::exp(self)
            }
            #[inline]
            fn sqrt(self) -> Self {
                <$t>::sqrt(self)
            }
            #[inline]
            fn abs(self) -> Self {
                <$t>::abs(self)
            }
            #[inline]
            fn is_finite(self) -> bool {
                <$t>::is_finite(self)
            }
            #[inline]
            fn max(self, other: Self) -> Self {
                <$t>::max(self, other)
            }
            #[inline]
            fn min(self, other: Self) -> Self {
                <$t>::min(self, other)
            }
            #[inline]
            fn erf(self) -> Self {
                $erf(self)
            }
            fn write_le(self, out: &mut Vec<u8>) {
                out.extend_from_slice(&self.to_le_bytes());
            }
            fn read_le(bytes: &[u8]) -> Self {
                <$t>::from_le_bytes(bytes.try_into().expect("element byte width"))
            }
            unsafe fn gemm_raw(
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
                $gemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
            }
        }
    };
}

impl_element!(f32, DType::F32, matrixmultiply::sgemm, libm::erff);
impl_element!(f64, DType::F64, matrixmultiply::dgemm, libm::erf);

/// Row-major / transposed view of a matrix stored in a slice.
#[derive(Clone, Copy, Debug)]
pub(crate) struct MatLayout {
    pub offset: usize,
    pub rs: isize,
    pub cs: isize,
}

impl MatLayout {
    pub fn row_major(offset: usize, cols: usize) -> Self {
        MatLayout {
            offset,
            rs: cols as isize,
            cs: 1,
        }
    }

    /// Transposed view of a row-major `rows x cols` block.
    pub fn transposed(offset: usize, cols: usize) -> Self {
        MatLayout {
            offset,
            rs: 1,
            cs: cols as isize,
        }
    }

    pub fn strided(offset: usize, rs: usize, cs: usize) -> Self {
        MatLayout {
            offset,
            rs: rs as isize,
            cs: cs as isize,
        }
    }

    fn last_index(&self, rows: usize, cols: usize) -> usize {
        if rows == 0 || cols == 0 {
            return self.offset;
        }
        self.offset + (rows - 1) * self.rs as usize + (cols - 1) * self.cs as usize
    }
}

/// Bounds-checked GEMM: `c[m x n] = alpha * a[m x k] * b[k x n] + beta * c`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<E: Element>(
    m: usize,
    k: usize,
    n: usize,
    alpha: E,
    a: &[E],
    la: MatLayout,
    b: &[E],
    lb: MatLayout,
    beta: E,
    c: &mut [E],
    lc: MatLayout,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(k == 0 || la.last_index(m, k) < a.len(), "gemm: A out of bounds");
    assert!(k == 0 || lb.last_index(k, n) < b.len(), "gemm: B out of bounds");
    assert!(lc.last_index(m, n) < c.len(), "gemm: C out of bounds");
    // SAFETY: extents and strides were bounds-checked above.
    unsafe {
        E::gemm_raw(
            m,
            k,
            n,
            alpha,
            a.as_ptr().add(la.offset),
            la.rs,
            la.cs,
            b.as_ptr().add(lb.offset),
            lb.rs,
            lb.cs,
            beta,
            c.as_mut_ptr().add(lc.offset),
            lc.rs,
            lc.cs,
        )
    }
}
