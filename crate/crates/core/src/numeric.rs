//! Shared numeric kernels.
//!
//! Every routine here is the single source of truth for its operation: the
//! plain scoring/loss paths and the autograd forward pass both call these,
//! which is what makes recorded values bit-identical to unrecorded ones.
//! All reductions run in a fixed sequential order so results are
//! reproducible across runs and thread counts.

use crate::matrix::Mat;

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0;
    for k in 0..a.len() {
        acc += a[k] * b[k];
    }
    acc
}

#[inline]
pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Plain cosine similarity with a zero-vector guard (returns 0 when either
/// norm vanishes). Used by the baseline aggregation modes.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = norm2(a);
    let nb = norm2(b);
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot(a, b) / (na * nb)
}

/// C = A · B
pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    assert_eq!(a.cols(), b.rows(), "matmul: inner dims");
    let mut out = Mat::zeros(a.rows(), b.cols());
    for i in 0..a.rows() {
        let ar = a.row(i);
        for j in 0..b.cols() {
            let mut acc = 0.0;
            for k in 0..a.cols() {
                acc += ar[k] * b.get(k, j);
            }
            out.set(i, j, acc);
        }
    }
    out
}

/// C = A · Bᵀ (rows of A against rows of B).
pub fn matmul_nt(a: &Mat, b: &Mat) -> Mat {
    assert_eq!(a.cols(), b.cols(), "matmul_nt: inner dims");
    let mut out = Mat::zeros(a.rows(), b.rows());
    for i in 0..a.rows() {
        let ar = a.row(i);
        for j in 0..b.rows() {
            out.set(i, j, dot(ar, b.row(j)));
        }
    }
    out
}

/// C = Aᵀ · B
pub fn matmul_tn(a: &Mat, b: &Mat) -> Mat {
    assert_eq!(a.rows(), b.rows(), "matmul_tn: inner dims");
    let mut out = Mat::zeros(a.cols(), b.cols());
    for i in 0..a.cols() {
        for j in 0..b.cols() {
            let mut acc = 0.0;
            for k in 0..a.rows() {
                acc += a.get(k, i) * b.get(k, j);
            }
            out.set(i, j, acc);
        }
    }
    out
}

/// Per-column L2 norms, `sqrt(sum_i x_ij^2 + eps)`.
pub fn col_l2_norms(x: &Mat, eps: f64) -> Vec<f64> {
    let mut norms = vec![0.0; x.cols()];
    for j in 0..x.cols() {
        let mut ss = 0.0;
        for i in 0..x.rows() {
            let v = x.get(i, j);
            ss += v * v;
        }
        norms[j] = (ss + eps).sqrt();
    }
    norms
}

/// Divides each column by its guarded L2 norm. Columns whose guarded norm
/// is exactly zero (possible only with eps = 0) map to zero.
pub fn col_l2_normalize(x: &Mat, eps: f64) -> Mat {
    let norms = col_l2_norms(x, eps);
    let mut out = Mat::zeros(x.rows(), x.cols());
    for i in 0..x.rows() {
        for j in 0..x.cols() {
            let n = norms[j];
            out.set(i, j, if n > 0.0 { x.get(i, j) / n } else { 0.0 });
        }
    }
    out
}

/// Row-wise softmax of `x / temp`, computed with max subtraction.
pub fn row_softmax(x: &Mat, temp: f64) -> Mat {
    let mut out = Mat::zeros(x.rows(), x.cols());
    for i in 0..x.rows() {
        let row = x.row(i);
        let z: Vec<f64> = row.iter().map(|&v| v / temp).collect();
        let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = z.iter().map(|&v| (v - m).exp()).collect();
        let sum: f64 = e.iter().sum();
        for (j, ej) in e.iter().enumerate() {
            out.set(i, j, ej / sum);
        }
    }
    out
}

/// Row-wise log-softmax of `x / temp`.
pub fn row_log_softmax(x: &Mat, temp: f64) -> Mat {
    let mut out = Mat::zeros(x.rows(), x.cols());
    for i in 0..x.rows() {
        let row = x.row(i);
        let z: Vec<f64> = row.iter().map(|&v| v / temp).collect();
        let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = z.iter().map(|&v| (v - m).exp()).sum();
        let lse = m + sum.ln();
        for (j, &zj) in z.iter().enumerate() {
            out.set(i, j, zj - lse);
        }
    }
    out
}

/// Row-wise `log sum_j exp(x_ij / temp)` as a column vector.
pub fn row_lse(x: &Mat, temp: f64) -> Mat {
    let mut out = Mat::zeros(x.rows(), 1);
    for i in 0..x.rows() {
        let z: Vec<f64> = x.row(i).iter().map(|&v| v / temp).collect();
        let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = z.iter().map(|&v| (v - m).exp()).sum();
        out.set(i, 0, m + sum.ln());
    }
    out
}

/// Row-wise `log sum_{j != i} exp(x_ij / temp)` for a square matrix;
/// the diagonal entry of each row is excluded from the sum.
pub fn row_lse_offdiag(x: &Mat, temp: f64) -> Mat {
    assert_eq!(x.rows(), x.cols(), "row_lse_offdiag: square input");
    assert!(x.rows() >= 2, "row_lse_offdiag: needs at least 2 columns");
    let mut out = Mat::zeros(x.rows(), 1);
    for i in 0..x.rows() {
        let row = x.row(i);
        let mut m = f64::NEG_INFINITY;
        for (j, &v) in row.iter().enumerate() {
            if j != i {
                m = m.max(v / temp);
            }
        }
        let mut sum = 0.0;
        for (j, &v) in row.iter().enumerate() {
            if j != i {
                sum += (v / temp - m).exp();
            }
        }
        out.set(i, 0, m + sum.ln());
    }
    out
}

/// Cosine of corresponding rows of `a` and `b`, with `eps` added to each
/// norm in the denominator. A zero denominator (eps = 0 with a zero row)
/// maps to 0.
pub fn rows_cosine(a: &Mat, b: &Mat, eps: f64) -> Mat {
    assert_eq!(a.shape(), b.shape(), "rows_cosine: shape mismatch");
    let mut out = Mat::zeros(a.rows(), 1);
    for i in 0..a.rows() {
        let ar = a.row(i);
        let br = b.row(i);
        let denom = (norm2(ar) + eps) * (norm2(br) + eps);
        let v = if denom > 0.0 { dot(ar, br) / denom } else { 0.0 };
        out.set(i, 0, v);
    }
    out
}

/// `(1/lambda) * log sum_i exp(lambda * x_i)` with max subtraction.
pub fn lse(xs: &[f64], lambda: f64) -> f64 {
    assert!(!xs.is_empty(), "lse: empty input");
    let z: Vec<f64> = xs.iter().map(|&v| lambda * v).collect();
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = z.iter().map(|&v| (v - m).exp()).sum();
    (m + sum.ln()) / lambda
}

/// `softmax(scale * x)` over a flat slice; the adjoint of [`lse`].
pub fn scaled_softmax(xs: &[f64], scale: f64) -> Vec<f64> {
    let z: Vec<f64> = xs.iter().map(|&v| scale * v).collect();
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|&v| (v - m).exp()).collect();
    let sum: f64 = e.iter().sum();
    e.iter().map(|&v| v / sum).collect()
}

/// `scale * x + shift` elementwise; `shift = None` means zero.
pub fn affine(x: &Mat, scale: f64, shift: Option<&Mat>) -> Mat {
    if let Some(s) = shift {
        assert_eq!(x.shape(), s.shape(), "affine: shift shape");
        let data = x
            .data()
            .iter()
            .zip(s.data())
            .map(|(&v, &b)| v * scale + b)
            .collect();
        Mat::new(x.rows(), x.cols(), data)
    } else {
        x.map(|v| v * scale)
    }
}

pub fn add_elem(a: &Mat, b: &Mat) -> Mat {
    assert_eq!(a.shape(), b.shape(), "add_elem: shape");
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect();
    Mat::new(a.rows(), a.cols(), data)
}

pub fn sub_elem(a: &Mat, b: &Mat) -> Mat {
    assert_eq!(a.shape(), b.shape(), "sub_elem: shape");
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x - y).collect();
    Mat::new(a.rows(), a.cols(), data)
}

pub fn mul_elem(a: &Mat, b: &Mat) -> Mat {
    assert_eq!(a.shape(), b.shape(), "mul_elem: shape");
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x * y).collect();
    Mat::new(a.rows(), a.cols(), data)
}

pub fn exp_elem(x: &Mat) -> Mat {
    x.map(f64::exp)
}

pub fn ln_elem(x: &Mat) -> Mat {
    x.map(f64::ln)
}

pub fn relu(x: &Mat) -> Mat {
    x.map(|v| if v > 0.0 { v } else { 0.0 })
}

/// Adds a 1×n row vector to every row of an m×n matrix.
pub fn add_row(x: &Mat, row: &Mat) -> Mat {
    assert_eq!(row.rows(), 1, "add_row: bias must be 1 x n");
    assert_eq!(x.cols(), row.cols(), "add_row: width mismatch");
    let mut out = x.clone();
    for i in 0..x.rows() {
        let r = out.row_mut(i);
        for (j, v) in r.iter_mut().enumerate() {
            *v += row.get(0, j);
        }
    }
    out
}

/// Column sums as a 1×n row vector (adjoint of [`add_row`]).
pub fn col_sums(x: &Mat) -> Mat {
    let mut out = Mat::zeros(1, x.cols());
    for i in 0..x.rows() {
        for j in 0..x.cols() {
            out.set(0, j, out.get(0, j) + x.get(i, j));
        }
    }
    out
}

/// Main diagonal of a square matrix as an n×1 column vector.
pub fn diag(x: &Mat) -> Mat {
    assert_eq!(x.rows(), x.cols(), "diag: square input");
    let mut out = Mat::zeros(x.rows(), 1);
    for i in 0..x.rows() {
        out.set(i, 0, x.get(i, i));
    }
    out
}

pub fn sum_all(x: &Mat) -> f64 {
    let mut acc = 0.0;
    for &v in x.data() {
        acc += v;
    }
    acc
}
