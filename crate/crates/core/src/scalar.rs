//! Floating-point scalar abstraction shared by every numeric kernel.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating point element type: `f32` or `f64`.
///
/// Besides the arithmetic bounds, each implementor supplies a strided
/// general matrix multiply so the heavy kernels can dispatch to an
/// optimized implementation without knowing the concrete type.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// `c <- alpha * a * b + beta * c` over strided row/column layouts.
    ///
    /// `a` is `m x k`, `b` is `k x n`, `c` is `m x n`; strides are in
    /// elements. Callers must guarantee every addressed element is in
    /// bounds, which [`gemm`] checks before delegating here.
    #[allow(clippy::too_many_arguments)]
    fn gemm_strided(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        a_strides: (usize, usize),
        b: &[Self],
        b_strides: (usize, usize),
        beta: Self,
        c: &mut [Self],
        c_strides: (usize, usize),
    );

    /// Replaces every element with its exponential.
    fn exp_in_place(xs: &mut [Self]) {
        xs.iter_mut().for_each(|x| *x = x.exp());
    }

    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).expect("f64 is representable in every Scalar")
    }

    fn to_f64_lossless(self) -> f64 {
        self.to_f64().expect("Scalar always widens to f64")
    }
}

macro_rules! impl_scalar {
    ($t:ty, $kernel:ident, $exp:ident) => {
        impl Scalar for $t {
            fn exp_in_place(xs: &mut [Self]) {
                $exp(xs)
            }

            fn gemm_strided(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                a_strides: (usize, usize),
                b: &[Self],
                b_strides: (usize, usize),
                beta: Self,
                c: &mut [Self],
                c_strides: (usize, usize),
            ) {
                if m == 0 || n == 0 {
                    return;
                }
                // SAFETY: `gemm` verified that the largest addressed offset of
                // each operand lies inside its slice.
                unsafe {
                    matrixmultiply::$kernel(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        a_strides.0 as isize,
                        a_strides.1 as isize,
                        b.as_ptr(),
                        b_strides.0 as isize,
                        b_strides.1 as isize,
                        beta,
                        c.as_mut_ptr(),
                        c_strides.0 as isize,
                        c_strides.1 as isize,
                    );
                }
            }
        }
    };
}

impl_scalar!(f32, sgemm, exp_f32_slice);
impl_scalar!(f64, dgemm, exp_f64_slice);

/// Single-precision counterpart of [`exp_f64_slice`], within 2 ulp of
/// the correctly rounded result. Inputs below `-87.3` flush to zero.
pub fn exp_f32_slice(xs: &mut [f32]) {
    #[cfg(target_arch = "x86_64")]
    {
        if std::arch::is_x86_feature_detected!("avx2") {
            // SAFETY: the feature was detected at runtime.
            unsafe { exp_f32_avx2(xs) };
            return;
        }
    }
    exp_f32_kernel(xs);
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn exp_f32_avx2(xs: &mut [f32]) {
    exp_f32_kernel(xs)
}

#[inline(always)]
fn exp_f32_kernel(xs: &mut [f32]) {
    const LOG2E: f32 = std::f32::consts::LOG2_E;
    const LN2_HI: f32 = 0.693_145_75;
    const LN2_LO: f32 = 1.428_606_8e-6;
    const ROUND: f32 = 12_582_912.0;
    const C: [f32; 8] = [1.0, 1.0, 1.0 / 2.0, 1.0 / 6.0, 1.0 / 24.0, 1.0 / 120.0, 1.0 / 720.0, 1.0 / 5040.0];
    for x in xs.iter_mut() {
        let v = *x;
        let clamped = v.clamp(-87.3, 88.8);
        let shifted = clamped * LOG2E + ROUND;
        let n = shifted - ROUND;
        let r = (clamped - n * LN2_HI) - n * LN2_LO;
        let r2 = r * r;
        // Estrin's scheme keeps the dependency chain short.
        let p01 = C[0] + C[1] * r;
        let p23 = C[2] + C[3] * r;
        let p45 = C[4] + C[5] * r;
        let p67 = C[6] + C[7] * r;
        let p = (p01 + p23 * r2) + (p45 + p67 * r2) * (r2 * r2);
        let k = shifted.to_bits() as i32 - ROUND.to_bits() as i32;
        // Two factors so that both 2^-126 and 2^128 stay representable.
        let lo = k >> 1;
        let y = p * f32::from_bits(((lo + 127) as u32) << 23) * f32::from_bits(((k - lo + 127) as u32) << 23);
        *x = if v < -87.3 {
            0.0
        } else if v > 88.8 {
            f32::INFINITY
        } else {
            y
        };
    }
}

/// Exponential of every element, accurate to a few ulp.
///
/// Range reduction `x = n ln2 + r` with `|r| <= ln2 / 2`, a degree-13 Taylor
/// polynomial for `e^r`, and an exponent-field scale by `2^n`. Inputs below
/// `-708` flush to zero; inputs above `709` saturate to infinity; NaN stays NaN.
/// The loop body is branch-free so it vectorizes.
pub fn exp_f64_slice(xs: &mut [f64]) {
    #[cfg(target_arch = "x86_64")]
    {
        if std::arch::is_x86_feature_detected!("avx2") {
            // SAFETY: the feature was detected at runtime.
            unsafe { exp_f64_avx2(xs) };
            return;
        }
    }
    exp_f64_kernel(xs);
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn exp_f64_avx2(xs: &mut [f64]) {
    exp_f64_kernel(xs)
}

#[inline(always)]
fn exp_f64_kernel(xs: &mut [f64]) {
    const LOG2E: f64 = std::f64::consts::LOG2_E;
    const LN2_HI: f64 = 6.931_471_803_691_238e-1;
    const LN2_LO: f64 = 1.908_214_929_270_587_7e-10;
    // 1.5 * 2^52: adding and subtracting rounds to the nearest integer.
    const ROUND: f64 = 6_755_399_441_055_744.0;
    const INV_FACT: [f64; 14] = [
        1.0,
        1.0,
        1.0 / 2.0,
        1.0 / 6.0,
        1.0 / 24.0,
        1.0 / 120.0,
        1.0 / 720.0,
        1.0 / 5040.0,
        1.0 / 40320.0,
        1.0 / 362880.0,
        1.0 / 3628800.0,
        1.0 / 39916800.0,
        1.0 / 479001600.0,
        1.0 / 6227020800.0,
    ];
    for x in xs.iter_mut() {
        let v = *x;
        let clamped = v.clamp(-708.0, 709.0);
        let shifted = clamped * LOG2E + ROUND;
        let n = shifted - ROUND;
        let r = (clamped - n * LN2_HI) - n * LN2_LO;
        // Estrin's scheme keeps the dependency chain short.
        let c = &INV_FACT;
        let (r2, r4) = (r * r, (r * r) * (r * r));
        let q: [f64; 7] = std::array::from_fn(|j| c[2 * j] + c[2 * j + 1] * r);
        let s01 = q[0] + q[1] * r2;
        let s23 = q[2] + q[3] * r2;
        let s45 = q[4] + q[5] * r2;
        let p = (s01 + s23 * r4) + (s45 + q[6] * r4) * (r4 * r4);
        // `shifted` and ROUND share an exponent, so their bit patterns differ by n.
        let k = shifted.to_bits() as i64 - ROUND.to_bits() as i64;
        let scale = f64::from_bits(((k + 1023) as u64) << 52);
        let y = p * scale;
        *x = if v < -708.0 {
            0.0
        } else if v > 709.0 {
            f64::INFINITY
        } else {
            y
        };
    }
}

fn max_offset(rows: usize, cols: usize, strides: (usize, usize)) -> usize {
    if rows == 0 || cols == 0 {
        0
    } else {
        (rows - 1) * strides.0 + (cols - 1) * strides.1
    }
}

/// Operand view for [`gemm`]: a row-major buffer that may be read transposed.
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a, T> {
    pub data: &'a [T],
    pub rows: usize,
    pub cols: usize,
    pub transposed: bool,
}

impl<'a, T> MatRef<'a, T> {
    /// Row-major `rows x cols` buffer.
    pub fn new(data: &'a [T], rows: usize, cols: usize) -> Self {
        MatRef { data, rows, cols, transposed: false }
    }

    /// The transpose of a row-major `rows x cols` buffer.
    pub fn t(self) -> Self {
        MatRef { transposed: !self.transposed, ..self }
    }

    fn logical(&self) -> (usize, usize) {
        if self.transposed {
            (self.cols, self.rows)
        } else {
            (self.rows, self.cols)
        }
    }

    fn strides(&self) -> (usize, usize) {
        if self.transposed {
            (1, self.cols)
        } else {
            (self.cols, 1)
        }
    }
}

/// `c <- alpha * op(a) * op(b) + beta * c` with `c` row-major `m x n`.
pub(crate) fn gemm<T: Scalar>(alpha: T, a: MatRef<'_, T>, b: MatRef<'_, T>, beta: T, c: &mut [T]) {
    let (m, k) = a.logical();
    let (k2, n) = b.logical();
    assert_eq!(k, k2, "gemm inner dimensions disagree");
    assert!(a.data.len() >= a.rows * a.cols && b.data.len() >= b.rows * b.cols);
    assert!(c.len() >= m * n, "gemm output buffer too small");
    if k == 0 {
        for v in c[..m * n].iter_mut() {
            *v = if beta == T::zero() { T::zero() } else { *v * beta };
        }
        return;
    }
    debug_assert!(max_offset(m, k, a.strides()) < a.data.len());
    debug_assert!(max_offset(k, n, b.strides()) < b.data.len());
    T::gemm_strided(m, k, n, alpha, a.data, a.strides(), b.data, b.strides(), beta, c, (n, 1));
}
