//! Plain slice kernels shared by forward and backward passes.
//!
//! On x86-64 the matrix kernels also have an AVX2 build selected at run time.
//! Both builds perform the same operations in the same order, so results are
//! bit-identical.

#[cfg(target_arch = "x86_64")]
fn has_avx2() -> bool {
    use std::sync::OnceLock;
    static AVX2: OnceLock<bool> = OnceLock::new();
    *AVX2.get_or_init(|| std::arch::is_x86_feature_detected!("avx2"))
}

macro_rules! dispatched {
    ($(#[$doc:meta])* $name:ident, $body:ident, $avx:ident, ($($arg:ident: $ty:ty),*)) => {
        #[cfg(target_arch = "x86_64")]
        #[target_feature(enable = "avx2")]
        unsafe fn $avx($($arg: $ty),*) {
            $body($($arg),*)
        }

        $(#[$doc])*
        pub(crate) fn $name($($arg: $ty),*) {
            #[cfg(target_arch = "x86_64")]
            if has_avx2() {
                // SAFETY: the CPU supports AVX2, checked above.
                return unsafe { $avx($($arg),*) };
            }
            $body($($arg),*)
        }
    };
}

dispatched!(
    /// `out[m,n] += a[m,k] * b[k,n]`
    matmul_acc, matmul_acc_body, matmul_acc_avx2,
    (a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize)
);
dispatched!(
    /// `out[m,k] += g[m,n] * b[k,n]^T`
    matmul_nt_acc, matmul_nt_acc_body, matmul_nt_acc_avx2,
    (g: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize)
);
dispatched!(
    /// `out[k,n] += a[m,k]^T * g[m,n]`
    matmul_tn_acc, matmul_tn_acc_body, matmul_tn_acc_avx2,
    (a: &[f64], g: &[f64], out: &mut [f64], m: usize, k: usize, n: usize)
);

#[inline(always)]
fn matmul_acc_body(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    // Register tile of 4 rows x 8 columns; every output still accumulates its
    // products in increasing `p` order.
    const R: usize = 4;
    const C: usize = 8;
    let mut i = 0;
    while i + R <= m {
        let mut j = 0;
        while j + C <= n {
            let mut acc = [[0.0f64; C]; R];
            for (r, acc_r) in acc.iter_mut().enumerate() {
                acc_r.copy_from_slice(&out[(i + r) * n + j..(i + r) * n + j + C]);
            }
            for p in 0..k {
                let b_blk: &[f64; C] = b[p * n + j..p * n + j + C].try_into().expect("tile");
                for (r, acc_r) in acc.iter_mut().enumerate() {
                    let av = a[(i + r) * k + p];
                    for c in 0..C {
                        acc_r[c] += av * b_blk[c];
                    }
                }
            }
            for (r, acc_r) in acc.iter().enumerate() {
                out[(i + r) * n + j..(i + r) * n + j + C].copy_from_slice(acc_r);
            }
            j += C;
        }
        if j < n {
            matmul_acc_strip(a, b, out, i..i + R, j..n, k, n);
        }
        i += R;
    }
    if i < m {
        matmul_acc_strip(a, b, out, i..m, 0..n, k, n);
    }
}

#[inline(always)]
fn matmul_acc_strip(
    a: &[f64],
    b: &[f64],
    out: &mut [f64],
    rows: std::ops::Range<usize>,
    cols: std::ops::Range<usize>,
    k: usize,
    n: usize,
) {
    for i in rows {
        let out_row = &mut out[i * n + cols.start..i * n + cols.end];
        for p in 0..k {
            let av = a[i * k + p];
            let b_row = &b[p * n + cols.start..p * n + cols.end];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

#[inline(always)]
fn matmul_nt_acc_body(g: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    let bt = transpose(&b[..k * n], k, n);
    matmul_acc_body(g, &bt, out, m, n, k);
}

#[inline(always)]
fn matmul_tn_acc_body(a: &[f64], g: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    let at = transpose(&a[..m * k], m, k);
    matmul_acc_body(&at, g, out, k, m, n);
}

#[inline(always)]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in chunks * 4..a.len() {
        s += a[i] * b[i];
    }
    s
}

pub(crate) fn transpose(src: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; src.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = src[r * cols + c];
        }
    }
    out
}

pub(crate) fn add_assign(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Softmax of `x` restricted to entries where `allowed` is true; other outputs are 0.
/// Returns `false` if no entry is allowed.
pub(crate) fn masked_softmax_row(x: &[f64], allowed: &[bool], out: &mut [f64]) -> bool {
    let mut max = f64::NEG_INFINITY;
    for (&v, &a) in x.iter().zip(allowed) {
        if a && v > max {
            max = v;
        }
    }
    if max == f64::NEG_INFINITY {
        return false;
    }
    let mut sum = 0.0;
    for ((o, &v), &a) in out.iter_mut().zip(x).zip(allowed) {
        *o = if a { (v - max).exp() } else { 0.0 };
        sum += *o;
    }
    let inv = 1.0 / sum;
    for o in out.iter_mut() {
        *o *= inv;
    }
    true
}

/// Numerically stable softmax of a full row.
pub fn softmax(x: &[f64]) -> Vec<f64> {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2))
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2));
    let pdf = FRAC_1_SQRT_2PI * (-0.5 * x * x).exp();
    cdf + x * pdf
}
