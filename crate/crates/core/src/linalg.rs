//! Plain (untaped) dense linear algebra on row-major buffers.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Number of jittered retries after the unjittered attempt.
pub const JITTER_RETRIES: usize = 5;
/// First jitter, relative to the mean of the diagonal.
pub const JITTER_START: f64 = 1e-10;

/// `c = a·b + beta·c` with arbitrary row/column strides on `a` and `b`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    c: &mut [f64],
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in c.iter_mut() {
            *v *= beta;
        }
        return;
    }
    assert!(c.len() >= m * n);
    // SAFETY: the caller-supplied strides address `a` as m×k and `b` as k×n;
    // the asserts below bound the largest index touched by each operand.
    assert!((m - 1) * rsa + (k - 1) * csa < a.len());
    assert!((k - 1) * rsb + (n - 1) * csb < b.len());
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Unjittered Cholesky factorisation of the symmetric part of `a` (n×n).
/// Returns the failing pivot on a non-positive pivot.
fn cholesky_raw(a: &[f64], n: usize, jitter: f64) -> std::result::Result<Vec<f64>, usize> {
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let aij = 0.5 * (a[i * n + j] + a[j * n + i]);
            let mut s = if i == j { aij + jitter } else { aij };
            let (ri, rj) = (&l[i * n..i * n + j], &l[j * n..j * n + j]);
            for k in 0..j {
                s -= ri[k] * rj[k];
            }
            if i == j {
                if !(s > 0.0) || !s.is_finite() {
                    return Err(i);
                }
                l[i * n + i] = s.sqrt();
            } else {
                l[i * n + j] = s / l[j * n + j];
            }
        }
    }
    Ok(l)
}

/// Cholesky factor `L` (lower, positive diagonal) of the symmetric part of `a`,
/// retrying with growing diagonal jitter. Returns `(L, jitter)`.
pub fn cholesky_jittered(a: &[f64], n: usize) -> Result<(Vec<f64>, f64)> {
    let mut pivot = match cholesky_raw(a, n, 0.0) {
        Ok(l) => return Ok((l, 0.0)),
        Err(p) => p,
    };
    let mean_diag = if n == 0 {
        0.0
    } else {
        (0..n).map(|i| a[i * n + i]).sum::<f64>() / n as f64
    };
    let mut jitter = JITTER_START * mean_diag.abs().max(f64::MIN_POSITIVE);
    for _ in 0..JITTER_RETRIES {
        match cholesky_raw(a, n, jitter) {
            Ok(l) => return Ok((l, jitter)),
            Err(p) => pivot = p,
        }
        jitter *= 10.0;
    }
    Err(Error::NotPositiveDefinite { pivot })
}

pub fn cholesky(a: &Tensor) -> Result<Tensor> {
    let n = square_dim(a, "cholesky")?;
    let (l, _) = cholesky_jittered(a.data(), n)?;
    Tensor::matrix(n, n, l)
}

pub(crate) fn square_dim(a: &Tensor, op: &'static str) -> Result<usize> {
    if a.ndim() != 2 || a.rows() != a.cols() {
        return Err(Error::InvalidShape {
            op,
            msg: format!("expected a square matrix, got {:?}", a.shape()),
        });
    }
    Ok(a.rows())
}

/// Solve `L X = B` for lower-triangular `L` (n×n), `B` n×m, in place.
pub fn solve_lower_in_place(l: &[f64], n: usize, b: &mut [f64], m: usize) {
    for i in 0..n {
        let (done, rest) = b.split_at_mut(i * m);
        let row = &mut rest[..m];
        for k in 0..i {
            let lik = l[i * n + k];
            if lik != 0.0 {
                let xk = &done[k * m..(k + 1) * m];
                for (r, x) in row.iter_mut().zip(xk) {
                    *r -= lik * x;
                }
            }
        }
        let d = l[i * n + i];
        for r in row.iter_mut() {
            *r /= d;
        }
    }
}

/// Solve `Lᵀ X = B` for lower-triangular `L` (n×n), `B` n×m, in place.
pub fn solve_lower_transpose_in_place(l: &[f64], n: usize, b: &mut [f64], m: usize) {
    for i in (0..n).rev() {
        let (head, tail) = b.split_at_mut((i + 1) * m);
        let row = &mut head[i * m..];
        for k in i + 1..n {
            let lki = l[k * n + i];
            if lki != 0.0 {
                let xk = &tail[(k - i - 1) * m..(k - i) * m];
                for (r, x) in row.iter_mut().zip(xk) {
                    *r -= lki * x;
                }
            }
        }
        let d = l[i * n + i];
        for r in row.iter_mut() {
            *r /= d;
        }
    }
}

/// Log-density of `N(y; mean, cov)` for a dense covariance, via Cholesky.
pub fn mvn_logpdf(y: &[f64], mean: &[f64], cov: &Tensor) -> Result<f64> {
    let n = square_dim(cov, "mvn_logpdf")?;
    if y.len() != n || mean.len() != n {
        return Err(Error::ShapeMismatch {
            op: "mvn_logpdf",
            lhs: vec![y.len(), mean.len()],
            rhs: cov.shape().to_vec(),
        });
    }
    let (l, _) = cholesky_jittered(cov.data(), n)?;
    let mut r: Vec<f64> = y.iter().zip(mean).map(|(a, b)| a - b).collect();
    solve_lower_in_place(&l, n, &mut r, 1);
    let quad: f64 = r.iter().map(|v| v * v).sum();
    let logdet: f64 = (0..n).map(|i| l[i * n + i].ln()).sum::<f64>() * 2.0;
    Ok(-0.5 * (quad + logdet + n as f64 * (2.0 * std::f64::consts::PI).ln()))
}
