//! Scalar abstraction and matrix multiplication.
//!
//! All model math is generic over [`Real`] so the same forward/backward
//! code runs in f32 (training) and f64 (gradient verification). Matrix
//! products go through OpenBLAS when the system library can be loaded,
//! and fall back to ndarray's built-in matmul otherwise. Both backends
//! are deterministic run-to-run on the same machine; results are *not*
//! guaranteed identical across backends, so reproducibility claims are
//! always per-backend.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayView2, ArrayViewMut2};
use std::ffi::c_void;
use std::fmt::{Debug, Display};
use std::sync::OnceLock;

#[allow(non_camel_case_types)]
type sgemm_fn = unsafe extern "C" fn(
    i32, i32, i32, i32, i32, i32, f32, *const f32, i32, *const f32, i32, f32, *mut f32, i32,
);
#[allow(non_camel_case_types)]
type dgemm_fn = unsafe extern "C" fn(
    i32, i32, i32, i32, i32, i32, f64, *const f64, i32, *const f64, i32, f64, *mut f64, i32,
);

struct Blas {
    sgemm: sgemm_fn,
    dgemm: dgemm_fn,
}

// Safety: the function pointers target a shared library that stays loaded
// for the process lifetime (we never dlclose).
unsafe impl Send for Blas {}
unsafe impl Sync for Blas {}

const CBLAS_ROW_MAJOR: i32 = 101;
const CBLAS_NO_TRANS: i32 = 111;
const CBLAS_TRANS: i32 = 112;

static BLAS: OnceLock<Option<Blas>> = OnceLock::new();

fn load_blas() -> Option<Blas> {
    if std::env::var_os("TRACKLAB_NO_BLAS").is_some() {
        return None;
    }
    // OpenBLAS reads these during its constructor, which runs at dlopen
    // time, so they must be in place before the library is mapped. The
    // core-type hint matters: under VMs that report a generic CPU model,
    // OpenBLAS's own detection can pick kernels several times slower than
    // the hardware supports. User-provided values always win.
    if std::env::var_os("OPENBLAS_NUM_THREADS").is_none() {
        std::env::set_var("OPENBLAS_NUM_THREADS", "1");
    }
    #[cfg(target_arch = "x86_64")]
    if std::env::var_os("OPENBLAS_CORETYPE").is_none()
        && is_x86_feature_detected!("avx512f")
        && is_x86_feature_detected!("avx512dq")
        && is_x86_feature_detected!("avx512bw")
        && is_x86_feature_detected!("avx512vl")
    {
        std::env::set_var("OPENBLAS_CORETYPE", "SKYLAKEX");
    }
    unsafe {
        let mut handle: *mut c_void = std::ptr::null_mut();
        for name in [c"libopenblas.so.0", c"libopenblas.so", c"libopenblasp.so.0"] {
            handle = libc::dlopen(name.as_ptr(), libc::RTLD_NOW | libc::RTLD_LOCAL);
            if !handle.is_null() {
                break;
            }
        }
        if handle.is_null() {
            return None;
        }
        let s = libc::dlsym(handle, c"cblas_sgemm".as_ptr());
        let d = libc::dlsym(handle, c"cblas_dgemm".as_ptr());
        if s.is_null() || d.is_null() {
            return None;
        }
        Some(Blas {
            sgemm: std::mem::transmute::<*mut c_void, sgemm_fn>(s),
            dgemm: std::mem::transmute::<*mut c_void, dgemm_fn>(d),
        })
    }
}

fn blas() -> Option<&'static Blas> {
    BLAS.get_or_init(|| {
        tune_malloc();
        load_blas()
    })
    .as_ref()
}

/// Activation buffers are tens of megabytes and are allocated and
/// dropped once per layer call. Under glibc's default thresholds those
/// allocations go through mmap and are returned to the kernel on free,
/// so every training step repays the same page faults. Raising the
/// thresholds keeps the buffers cached in the heap; the high-water RSS
/// equals one step's working set, which is well under the memory
/// budget. Harmless where unsupported.
fn tune_malloc() {
    #[cfg(target_os = "linux")]
    unsafe {
        libc::mallopt(libc::M_MMAP_THRESHOLD, 1 << 30);
        libc::mallopt(libc::M_TRIM_THRESHOLD, 1 << 30);
    }
}

/// Whether matrix products are running on the loaded BLAS.
pub fn has_blas() -> bool {
    blas().is_some()
}

/// Number of independent accumulators in reduction loops. Fixing the
/// lane count pins the summation order (so results do not depend on
/// what the autovectorizer picks) while leaving the loops in a shape
/// the compiler reliably turns into vector code.
pub const LANES: usize = 8;

#[inline]
pub fn lane_total<F: Real>(acc: [F; LANES]) -> F {
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]))
}

/// Sum with a fixed lane-parallel order.
#[inline]
pub fn lane_sum<F: Real>(xs: &[F]) -> F {
    let main = xs.len() - xs.len() % LANES;
    let mut acc = [F::zero(); LANES];
    for c in xs[..main].chunks_exact(LANES) {
        for i in 0..LANES {
            acc[i] = acc[i] + c[i];
        }
    }
    let mut total = lane_total(acc);
    for &v in &xs[main..] {
        total = total + v;
    }
    total
}

/// Dot product with a fixed lane-parallel order.
#[inline]
pub fn lane_dot<F: Real>(a: &[F], b: &[F]) -> F {
    debug_assert_eq!(a.len(), b.len());
    let main = a.len() - a.len() % LANES;
    let mut acc = [F::zero(); LANES];
    for (ca, cb) in a[..main].chunks_exact(LANES).zip(b[..main].chunks_exact(LANES)) {
        for i in 0..LANES {
            acc[i] = acc[i] + ca[i] * cb[i];
        }
    }
    let mut total = lane_total(acc);
    for (&va, &vb) in a[main..].iter().zip(b[main..].iter()) {
        total = total + va * vb;
    }
    total
}

/// Sum of squared differences with a fixed lane-parallel order.
#[inline]
pub fn lane_sq_diff<F: Real>(a: &[F], b: &[F]) -> F {
    debug_assert_eq!(a.len(), b.len());
    let main = a.len() - a.len() % LANES;
    let mut acc = [F::zero(); LANES];
    for (ca, cb) in a[..main].chunks_exact(LANES).zip(b[..main].chunks_exact(LANES)) {
        for i in 0..LANES {
            let d = ca[i] - cb[i];
            acc[i] = acc[i] + d * d;
        }
    }
    let mut total = lane_total(acc);
    for (&va, &vb) in a[main..].iter().zip(b[main..].iter()) {
        let d = va - vb;
        total = total + d * d;
    }
    total
}

/// Flattens a 2-D view to its backing slice, copying only when the view
/// is not contiguous. Every hot-path caller passes standard-layout
/// arrays, so the copy is a cold fallback rather than a cost.
pub fn flat<'a, 'v: 'a, F: Real>(
    x: &ArrayView2<'v, F>,
    scratch: &'a mut Option<Array2<F>>,
) -> &'a [F] {
    match x.to_slice() {
        Some(s) => s,
        None => scratch
            .insert(x.to_owned())
            .as_slice()
            .expect("owned arrays are standard layout"),
    }
}

/// Scalar type for model math: f32 for training speed, f64 for gradient
/// verification. Fast transcendentals may be approximate in f32 (bounded
/// relative error, deterministic) and are exact library calls in f64.
pub trait Real:
    num_traits::Float
    + ndarray::LinalgScalar
    + Send
    + Sync
    + Debug
    + Display
    + Default
    + std::iter::Sum
    + 'static
{
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
    fn from_f32(x: f32) -> Self;
    fn to_f32(self) -> f32;
    fn exp_fast(self) -> Self;
    fn tanh_fast(self) -> Self;
    /// Row-major GEMM: C = alpha * op(A) * op(B) + beta * C.
    #[allow(clippy::too_many_arguments)]
    fn gemm_raw(
        m: usize,
        n: usize,
        k: usize,
        alpha: Self,
        a: *const Self,
        lda: usize,
        ta: bool,
        b: *const Self,
        ldb: usize,
        tb: bool,
        beta: Self,
        c: *mut Self,
        ldc: usize,
    );
}

/// Fast f32 exp: range-reduced polynomial (Cephes coefficients). Max
/// relative error is a few 1e-7; arguments outside the finite range of
/// f32 exp are clamped rather than overflowed.
#[inline]
fn exp_f32(x: f32) -> f32 {
    const LOG2E: f32 = 1.442695040888963;
    const LN2_HI: f32 = 0.693359375;
    const LN2_LO: f32 = -2.12194440e-4;
    // Upper clamp keeps the reduced exponent k <= 127 so the scale stays
    // a finite float; exp(88) ~ 1.7e38 is already near the f32 ceiling.
    let x = x.clamp(-87.3, 88.0);
    // Ties-even rounding maps to a single vector instruction; either
    // rounding gives a reduced argument within half an ln 2 of zero.
    let k = (x * LOG2E).round_ties_even();
    let r = x - k * LN2_HI - k * LN2_LO;
    let mut p = 1.9875691500e-4_f32;
    p = p * r + 1.3981999507e-3;
    p = p * r + 8.3334519073e-3;
    p = p * r + 4.1665795894e-2;
    p = p * r + 1.6666665459e-1;
    p = p * r + 5.0000001201e-1;
    let poly = p * r * r + r + 1.0;
    let scale = f32::from_bits((((k as i32) + 127) << 23) as u32);
    poly * scale
}

#[inline]
fn tanh_f32(x: f32) -> f32 {
    // tanh(x) = 1 - 2/(e^{2x}+1). The clamp saturates past f32 tanh
    // resolution (2/(e^18+1) rounds to 0 against 1.0) and keeps the
    // function branch-free so elementwise loops over it vectorize.
    let x = x.clamp(-9.01, 9.01);
    1.0 - 2.0 / (exp_f32(2.0 * x) + 1.0)
}

impl Real for f32 {
    #[inline]
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self as f64
    }
    #[inline]
    fn from_f32(x: f32) -> Self {
        x
    }
    #[inline]
    fn to_f32(self) -> f32 {
        self
    }
    #[inline]
    fn exp_fast(self) -> Self {
        exp_f32(self)
    }
    #[inline]
    fn tanh_fast(self) -> Self {
        tanh_f32(self)
    }

    fn gemm_raw(
        m: usize,
        n: usize,
        k: usize,
        alpha: Self,
        a: *const Self,
        lda: usize,
        ta: bool,
        b: *const Self,
        ldb: usize,
        tb: bool,
        beta: Self,
        c: *mut Self,
        ldc: usize,
    ) {
        if let Some(bl) = blas() {
            unsafe {
                (bl.sgemm)(
                    CBLAS_ROW_MAJOR,
                    if ta { CBLAS_TRANS } else { CBLAS_NO_TRANS },
                    if tb { CBLAS_TRANS } else { CBLAS_NO_TRANS },
                    m as i32,
                    n as i32,
                    k as i32,
                    alpha,
                    a,
                    lda as i32,
                    b,
                    ldb as i32,
                    beta,
                    c,
                    ldc as i32,
                );
            }
        } else {
            fallback_gemm(m, n, k, alpha, a, lda, ta, b, ldb, tb, beta, c, ldc);
        }
    }
}

impl Real for f64 {
    #[inline]
    fn from_f64(x: f64) -> Self {
        x
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self
    }
    #[inline]
    fn from_f32(x: f32) -> Self {
        x as f64
    }
    #[inline]
    fn to_f32(self) -> f32 {
        self as f32
    }
    #[inline]
    fn exp_fast(self) -> Self {
        self.exp()
    }
    #[inline]
    fn tanh_fast(self) -> Self {
        self.tanh()
    }

    fn gemm_raw(
        m: usize,
        n: usize,
        k: usize,
        alpha: Self,
        a: *const Self,
        lda: usize,
        ta: bool,
        b: *const Self,
        ldb: usize,
        tb: bool,
        beta: Self,
        c: *mut Self,
        ldc: usize,
    ) {
        if let Some(bl) = blas() {
            unsafe {
                (bl.dgemm)(
                    CBLAS_ROW_MAJOR,
                    if ta { CBLAS_TRANS } else { CBLAS_NO_TRANS },
                    if tb { CBLAS_TRANS } else { CBLAS_NO_TRANS },
                    m as i32,
                    n as i32,
                    k as i32,
                    alpha,
                    a,
                    lda as i32,
                    b,
                    ldb as i32,
                    beta,
                    c,
                    ldc as i32,
                );
            }
        } else {
            fallback_gemm(m, n, k, alpha, a, lda, ta, b, ldb, tb, beta, c, ldc);
        }
    }
}

/// ndarray-backed GEMM used when no BLAS is available.
#[allow(clippy::too_many_arguments)]
fn fallback_gemm<F: Real>(
    m: usize,
    n: usize,
    k: usize,
    alpha: F,
    a: *const F,
    lda: usize,
    ta: bool,
    b: *const F,
    ldb: usize,
    tb: bool,
    beta: F,
    c: *mut F,
    ldc: usize,
) {
    use ndarray::ShapeBuilder;
    unsafe {
        let av = if ta {
            ArrayView2::from_shape_ptr((k, m).strides((lda, 1)), a).reversed_axes()
        } else {
            ArrayView2::from_shape_ptr((m, k).strides((lda, 1)), a)
        };
        let bv = if tb {
            ArrayView2::from_shape_ptr((n, k).strides((ldb, 1)), b).reversed_axes()
        } else {
            ArrayView2::from_shape_ptr((k, n).strides((ldb, 1)), b)
        };
        let mut cv = ArrayViewMut2::from_shape_ptr((m, n).strides((ldc, 1)), c);
        general_mat_mul(alpha, &av, &bv, beta, &mut cv);
    }
}

/// C = alpha * op(A) * op(B) + beta * C over ndarray views.
///
/// Views must have unit stride along their last axis (plain row-major
/// matrices or row-aligned column slices of them). `ta`/`tb` select the
/// transposed operand, e.g. `gemm(one, dy, false, w, true, zero, dx)`
/// computes dX = dY * W^T.
pub fn gemm<F: Real>(
    alpha: F,
    a: &ArrayView2<F>,
    ta: bool,
    b: &ArrayView2<F>,
    tb: bool,
    beta: F,
    c: &mut ArrayViewMut2<F>,
) {
    let (m, ka) = if ta {
        (a.ncols(), a.nrows())
    } else {
        (a.nrows(), a.ncols())
    };
    let (kb, n) = if tb {
        (b.ncols(), b.nrows())
    } else {
        (b.nrows(), b.ncols())
    };
    assert_eq!(ka, kb, "gemm inner dimensions disagree");
    assert_eq!((c.nrows(), c.ncols()), (m, n), "gemm output shape mismatch");
    if m == 0 || n == 0 {
        return;
    }
    if ka == 0 {
        // Empty contraction: C = beta * C without touching BLAS (empty
        // views may carry degenerate strides).
        if beta == F::zero() {
            c.fill(F::zero());
        } else if beta != F::one() {
            c.mapv_inplace(|v| v * beta);
        }
        return;
    }
    assert_eq!(a.strides()[1], 1, "gemm operand A must be row-contiguous");
    assert_eq!(b.strides()[1], 1, "gemm operand B must be row-contiguous");
    assert_eq!(c.strides()[1], 1, "gemm output must be row-contiguous");
    F::gemm_raw(
        m,
        n,
        ka,
        alpha,
        a.as_ptr(),
        a.strides()[0] as usize,
        ta,
        b.as_ptr(),
        b.strides()[0] as usize,
        tb,
        beta,
        c.as_mut_ptr(),
        c.strides()[0] as usize,
    );
}
