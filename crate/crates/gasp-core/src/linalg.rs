//! Small dense linear algebra: 3-vectors and 3x3 matrices for camera
//! geometry, orthonormal matrix generation for weight initialization, a
//! one-sided Jacobi SVD used by the correspondence-head initializer, and
//! the serial row-major matrix kernels the training path runs on.
//!
//! Everything here is deterministic: fixed loop orders make repeated runs
//! bit-identical, and the SVD applies a fixed ordering (singular values
//! descending, ties by original column index) and a fixed sign convention
//! (first nonzero component of each right-singular vector is positive), so
//! repeated runs produce identical factors.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::rng::DetRng;
use crate::scalar;

/// Column 3-vector.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Vec3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Vec3 {
    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn zero() -> Self {
        Self::new(0.0, 0.0, 0.0)
    }

    pub fn dot(self, o: Self) -> f64 {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn cross(self, o: Self) -> Self {
        Self::new(
            self.y * o.z - self.z * o.y,
            self.z * o.x - self.x * o.z,
            self.x * o.y - self.y * o.x,
        )
    }

    pub fn norm(self) -> f64 {
        scalar::sqrt(self.dot(self))
    }

    pub fn normalized(self) -> Self {
        let n = self.norm();
        self.scale(1.0 / n)
    }

    pub fn scale(self, s: f64) -> Self {
        Self::new(self.x * s, self.y * s, self.z * s)
    }

    pub fn add(self, o: Self) -> Self {
        Self::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }

    pub fn sub(self, o: Self) -> Self {
        Self::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

/// Row-major 3x3 matrix.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Mat3 {
    pub m: [[f64; 3]; 3],
}

impl Mat3 {
    pub const fn new(m: [[f64; 3]; 3]) -> Self {
        Self { m }
    }

    pub fn identity() -> Self {
        Self::new([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
    }

    /// Builds a matrix whose rows are the given vectors.
    pub fn from_rows(r0: Vec3, r1: Vec3, r2: Vec3) -> Self {
        Self::new([
            [r0.x, r0.y, r0.z],
            [r1.x, r1.y, r1.z],
            [r2.x, r2.y, r2.z],
        ])
    }

    pub fn row(&self, i: usize) -> Vec3 {
        Vec3::new(self.m[i][0], self.m[i][1], self.m[i][2])
    }

    pub fn mul_vec(&self, v: Vec3) -> Vec3 {
        Vec3::new(self.row(0).dot(v), self.row(1).dot(v), self.row(2).dot(v))
    }

    pub fn mul_mat(&self, o: &Mat3) -> Mat3 {
        let mut r = [[0.0; 3]; 3];
        for (i, row) in r.iter_mut().enumerate() {
            for (j, cell) in row.iter_mut().enumerate() {
                *cell = (0..3).map(|k| self.m[i][k] * o.m[k][j]).sum();
            }
        }
        Mat3::new(r)
    }

    pub fn transpose(&self) -> Mat3 {
        let mut r = [[0.0; 3]; 3];
        for (i, row) in r.iter_mut().enumerate() {
            for (j, cell) in row.iter_mut().enumerate() {
                *cell = self.m[j][i];
            }
        }
        Mat3::new(r)
    }

    pub fn det(&self) -> f64 {
        let m = &self.m;
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }

    /// Inverse via the adjugate. Returns `None` when the determinant's
    /// magnitude is below `1e-12` times the largest entry magnitude cubed.
    pub fn inverse(&self) -> Option<Mat3> {
        let d = self.det();
        let scale = self
            .m
            .iter()
            .flatten()
            .fold(0.0f64, |a, &x| a.max(scalar::abs(x)))
            .max(1.0);
        if scalar::abs(d) <= 1e-12 * scale * scale * scale {
            return None;
        }
        let m = &self.m;
        let inv_d = 1.0 / d;
        let mut r = [[0.0; 3]; 3];
        for (i, row) in r.iter_mut().enumerate() {
            for (j, cell) in row.iter_mut().enumerate() {
                // Cofactor of (j, i), transposed into (i, j).
                let (a, b) = ((j + 1) % 3, (j + 2) % 3);
                let (c, e) = ((i + 1) % 3, (i + 2) % 3);
                *cell = (m[a][c] * m[b][e] - m[a][e] * m[b][c]) * inv_d;
            }
        }
        Some(Mat3::new(r))
    }
}

/// Samples an `n x n` matrix with orthonormal columns (and rows), row-major.
///
/// Gaussian entries followed by two rounds of modified Gram-Schmidt; the
/// double pass keeps column orthogonality near machine precision.
pub fn random_orthogonal(n: usize, rng: &mut DetRng) -> Vec<f64> {
    let mut a: Vec<f64> = (0..n * n).map(|_| rng.sample(StandardNormal)).collect();
    for _ in 0..2 {
        for j in 0..n {
            for k in 0..j {
                let dot: f64 = (0..n).map(|i| a[i * n + j] * a[i * n + k]).sum();
                for i in 0..n {
                    a[i * n + j] -= dot * a[i * n + k];
                }
            }
            let norm = scalar::sqrt((0..n).map(|i| a[i * n + j] * a[i * n + j]).sum::<f64>());
            for i in 0..n {
                a[i * n + j] /= norm;
            }
        }
    }
    a
}

/// Samples a `rows x cols` matrix that is a slice of a random orthogonal
/// `max(rows, cols)` square, so the smaller dimension stays orthonormal.
pub fn random_semi_orthogonal(rows: usize, cols: usize, rng: &mut DetRng) -> Vec<f64> {
    let n = rows.max(cols);
    let q = random_orthogonal(n, rng);
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        out[i * cols..(i + 1) * cols].copy_from_slice(&q[i * n..i * n + cols]);
    }
    out
}

/// Thin singular value decomposition `A = U diag(sigma) V^T`.
#[derive(Debug, Clone)]
pub struct Svd {
    /// `m x n`, row-major; columns with zero singular value are zero.
    pub u: Vec<f64>,
    /// Singular values, descending; ties keep original column order.
    pub sigma: Vec<f64>,
    /// `n x n`, row-major; column `j` is the right-singular vector for
    /// `sigma[j]`, sign-fixed so its first component over `1e-12` in
    /// magnitude is positive. Always a full orthonormal basis: columns past
    /// the rank span the null space of `A`.
    pub v: Vec<f64>,
}

/// One-sided Jacobi SVD of a row-major `m x n` matrix with `m >= n`.
///
/// Rotates column pairs until all are mutually orthogonal, which converges
/// unconditionally and makes no accuracy compromises at these sizes. The
/// result is deterministic for identical input bits.
pub fn svd(a: &[f64], m: usize, n: usize) -> Svd {
    assert_eq!(a.len(), m * n, "matrix buffer does not match dimensions");
    assert!(m >= n, "one-sided Jacobi expects at least as many rows as columns");
    let mut b = a.to_vec();
    let mut v = vec![0.0; n * n];
    for j in 0..n {
        v[j * n + j] = 1.0;
    }

    let col_dot = |buf: &[f64], p: usize, q: usize, rows: usize, cols: usize| -> f64 {
        (0..rows).map(|i| buf[i * cols + p] * buf[i * cols + q]).sum()
    };

    for _sweep in 0..60 {
        let mut rotated = false;
        for p in 0..n {
            for q in (p + 1)..n {
                let alpha = col_dot(&b, p, p, m, n);
                let beta = col_dot(&b, q, q, m, n);
                let gamma = col_dot(&b, p, q, m, n);
                if alpha * beta == 0.0 || scalar::abs(gamma) <= 1e-15 * scalar::sqrt(alpha * beta)
                {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = {
                    let s = if zeta >= 0.0 { 1.0 } else { -1.0 };
                    s / (scalar::abs(zeta) + scalar::sqrt(1.0 + zeta * zeta))
                };
                let c = 1.0 / scalar::sqrt(1.0 + t * t);
                let s = c * t;
                for i in 0..m {
                    let bp = b[i * n + p];
                    let bq = b[i * n + q];
                    b[i * n + p] = c * bp - s * bq;
                    b[i * n + q] = s * bp + c * bq;
                }
                for i in 0..n {
                    let vp = v[i * n + p];
                    let vq = v[i * n + q];
                    v[i * n + p] = c * vp - s * vq;
                    v[i * n + q] = s * vp + c * vq;
                }
            }
        }
        if !rotated {
            break;
        }
    }

    let mut sigma: Vec<f64> = (0..n)
        .map(|j| scalar::sqrt(col_dot(&b, j, j, m, n)))
        .collect();

    // Descending order, stable in the original column index.
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&x, &y| sigma[y].partial_cmp(&sigma[x]).unwrap().then(x.cmp(&y)));

    let mut u = vec![0.0; m * n];
    let mut v_sorted = vec![0.0; n * n];
    let mut sigma_sorted = vec![0.0; n];
    for (dst, &src) in order.iter().enumerate() {
        sigma_sorted[dst] = sigma[src];
        // Sign convention keyed on the right-singular vector.
        let mut flip = 1.0;
        for i in 0..n {
            let x = v[i * n + src];
            if scalar::abs(x) > 1e-12 {
                if x < 0.0 {
                    flip = -1.0;
                }
                break;
            }
        }
        for i in 0..n {
            v_sorted[i * n + dst] = flip * v[i * n + src];
        }
        if sigma[src] > 0.0 {
            let inv = flip / sigma[src];
            for i in 0..m {
                u[i * n + dst] = b[i * n + src] * inv;
            }
        }
    }
    sigma = sigma_sorted;

    Svd {
        u,
        sigma,
        v: v_sorted,
    }
}

/// `c += a * b` (row-major, `a` is `m x k`, `b` is `k x n`), or `c = a * b`
/// when `acc` is false. The i-k-j loop order keeps both streamed operands
/// sequential in memory.
pub fn matmul(c: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize, acc: bool) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if !acc {
        c.fill(0.0);
    }
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// `c += a * b^T` (`a` is `m x k`, `b` is `n x k`), or assignment when
/// `acc` is false. Each output entry is a dot product of two rows.
pub fn matmul_nt(c: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize, acc: bool) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let dot: f64 = arow.iter().zip(brow).map(|(&x, &y)| x * y).sum();
            let dst = &mut c[i * n + j];
            *dst = if acc { *dst + dot } else { dot };
        }
    }
}

/// `c += a^T * b` (`a` is `k x m`, `b` is `k x n`), or assignment when
/// `acc` is false. Sweeps rows of both inputs, accumulating rank-1 updates.
pub fn matmul_tn(c: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize, acc: bool) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if !acc {
        c.fill(0.0);
    }
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let crow = &mut c[i * n..(i + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}
