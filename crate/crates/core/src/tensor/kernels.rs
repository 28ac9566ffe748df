//! Slice-level numeric kernels shared by the tape ops and the cached
//! inference path, so both produce the same arithmetic.

use super::Scalar;

/// Strided view descriptor: `(row_stride, col_stride)`.
pub type Strides = (isize, isize);

/// Row-major, untransposed strides for a matrix with `cols` columns.
pub fn rm(cols: usize) -> Strides {
    (cols as isize, 1)
}

/// Strides reading a row-major `rows×cols` matrix as its transpose.
pub fn rm_t(cols: usize) -> Strides {
    (1, cols as isize)
}

/// `c (m×n, row-major) = a·b + (accumulate ? c : 0)` for strided `a` (m×k) and `b` (k×n).
#[allow(clippy::too_many_arguments)]
pub fn gemm<S: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[S],
    sa: Strides,
    b: &[S],
    sb: Strides,
    c: &mut [S],
    accumulate: bool,
) {
    assert!(c.len() >= m * n);
    assert!(max_offset(m, k, sa) < a.len().max(1) || m * k == 0);
    assert!(max_offset(k, n, sb) < b.len().max(1) || k * n == 0);
    let beta = if accumulate { S::one() } else { S::zero() };
    if k == 0 {
        if !accumulate {
            c[..m * n].iter_mut().for_each(|x| *x = S::zero());
        }
        return;
    }
    // SAFETY: bounds checked above; c is contiguous row-major m×n.
    unsafe {
        S::gemm_raw(
            m,
            k,
            n,
            S::one(),
            a.as_ptr(),
            sa.0,
            sa.1,
            b.as_ptr(),
            sb.0,
            sb.1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn max_offset(rows: usize, cols: usize, s: Strides) -> usize {
    if rows == 0 || cols == 0 {
        return 0;
    }
    ((rows - 1) as isize * s.0 + (cols - 1) as isize * s.1) as usize
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh-approximated GELU.
pub fn gelu<S: Scalar>(x: S) -> S {
    let c = S::from_f64_lossy(GELU_C);
    let a = S::from_f64_lossy(GELU_A);
    let half = S::from_f64_lossy(0.5);
    half * x * (S::one() + (c * (x + a * x * x * x)).tanh())
}

pub fn gelu_grad<S: Scalar>(x: S) -> S {
    let c = S::from_f64_lossy(GELU_C);
    let a = S::from_f64_lossy(GELU_A);
    let half = S::from_f64_lossy(0.5);
    let three = S::from_f64_lossy(3.0);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (S::one() + t) + half * x * (S::one() - t * t) * c * (S::one() + three * a * x * x)
}

/// Normalizes `x` in place to zero mean / unit variance and applies the affine
/// map; returns `1/sqrt(var + eps)`. `xhat` receives the pre-affine values.
pub fn layer_norm_row<S: Scalar>(
    x: &[S],
    gain: &[S],
    bias: &[S],
    eps: S,
    out: &mut [S],
    xhat: &mut [S],
) -> S {
    let n = S::from_usize(x.len()).unwrap();
    let mean = x.iter().copied().sum::<S>() / n;
    let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / n;
    let inv_std = S::one() / (var + eps).sqrt();
    for i in 0..x.len() {
        let h = (x[i] - mean) * inv_std;
        xhat[i] = h;
        out[i] = h * gain[i] + bias[i];
    }
    inv_std
}

/// In-place numerically stable softmax over `row[..valid]`; entries past
/// `valid` are set to zero.
pub fn softmax_row<S: Scalar>(row: &mut [S], valid: usize) {
    let valid = valid.min(row.len());
    let max = row[..valid]
        .iter()
        .copied()
        .fold(S::neg_infinity(), S::max);
    let mut total = S::zero();
    for v in row[..valid].iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row[..valid].iter_mut() {
        *v /= total;
    }
    for v in row[valid..].iter_mut() {
        *v = S::zero();
    }
}

/// `log(sum(exp(row)))` with max subtraction.
pub fn log_sum_exp<S: Scalar>(row: &[S]) -> S {
    let max = row.iter().copied().fold(S::neg_infinity(), S::max);
    let total: S = row.iter().map(|&v| (v - max).exp()).sum();
    max + total.ln()
}

pub fn add_row_bias<S: Scalar>(x: &mut [S], bias: &[S]) {
    let c = bias.len();
    for row in x.chunks_mut(c) {
        for (v, b) in row.iter_mut().zip(bias) {
            *v += *b;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_transposed_views() {
        // a: 2x3, b: 2x3 -> a·bᵀ = 2x2
        let a = [1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [1.0f64, 0.0, 1.0, 0.0, 1.0, 0.0];
        let mut c = [0.0f64; 4];
        gemm(2, 3, 2, &a, rm(3), &b, rm_t(3), &mut c, false);
        assert_eq!(c, [4.0, 2.0, 10.0, 5.0]);
        gemm(2, 3, 2, &a, rm(3), &b, rm_t(3), &mut c, true);
        assert_eq!(c, [8.0, 4.0, 20.0, 10.0]);
    }

    #[test]
    fn softmax_masks_tail() {
        let mut r = [0.0f64, 0.0, 5.0];
        softmax_row(&mut r, 2);
        assert_eq!(r, [0.5, 0.5, 0.0]);
    }

    #[test]
    fn gelu_matches_known_values() {
        assert_eq!(gelu(0.0f64), 0.0);
        assert!((gelu(1.0f64) - 0.841_191_990_607_477_2).abs() < 1e-12);
        assert!((gelu(-1.0f64) + 0.158_808_009_392_522_8).abs() < 1e-12);
    }
}
