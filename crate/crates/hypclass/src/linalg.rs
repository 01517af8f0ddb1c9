//! Small dense linear algebra: LU, column-pivoted QR (rank, kernel,
//! least squares), and a real nonsymmetric eigenvalue solver built from
//! balancing, Householder Hessenberg reduction, and Francis double-shift
//! QR iteration. Everything here targets matrices of order <= 64.

use crate::error::{Error, Result};
use num_complex::Complex64;

/// Row-major dense matrix of `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Mat::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        let c = if r > 0 { rows[0].len() } else { 0 };
        let mut m = Mat::zeros(r, c);
        for (i, row) in rows.iter().enumerate() {
            assert_eq!(row.len(), c, "ragged rows");
            for (j, v) in row.iter().enumerate() {
                m[(i, j)] = *v;
            }
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn col(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn transpose(&self) -> Mat {
        let mut t = Mat::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    pub fn matmul(&self, other: &Mat) -> Mat {
        assert_eq!(self.cols, other.rows, "dimension mismatch");
        let mut out = Mat::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a == 0.0 {
                    continue;
                }
                for j in 0..other.cols {
                    out[(i, j)] += a * other[(k, j)];
                }
            }
        }
        out
    }

    pub fn matvec(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(self.cols, v.len());
        (0..self.rows)
            .map(|i| self.row(i).iter().zip(v).map(|(a, b)| a * b).sum())
            .collect()
    }

    pub fn scale(&self, s: f64) -> Mat {
        let mut m = self.clone();
        for v in &mut m.data {
            *v *= s;
        }
        m
    }

    pub fn add(&self, other: &Mat) -> Mat {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        let mut m = self.clone();
        for (a, b) in m.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
        m
    }

    pub fn sub(&self, other: &Mat) -> Mat {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        let mut m = self.clone();
        for (a, b) in m.data.iter_mut().zip(&other.data) {
            *a -= *b;
        }
        m
    }

    /// Max absolute entry.
    pub fn norm_max(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Frobenius norm.
    pub fn norm_fro(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Max deviation from antisymmetry.
    pub fn skew_defect(&self) -> f64 {
        let mut d: f64 = 0.0;
        for i in 0..self.rows {
            for j in 0..self.cols {
                d = d.max((self[(i, j)] + self[(j, i)]).abs());
            }
        }
        d
    }

    pub fn submatrix(&self, r0: usize, r1: usize, c0: usize, c1: usize) -> Mat {
        let mut m = Mat::zeros(r1 - r0, c1 - c0);
        for i in r0..r1 {
            for j in c0..c1 {
                m[(i - r0, j - c0)] = self[(i, j)];
            }
        }
        m
    }
}

impl std::ops::Index<(usize, usize)> for Mat {
    type Output = f64;
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Mat {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

// ---------------------------------------------------------------------------
// LU decomposition
// ---------------------------------------------------------------------------

/// LU with partial pivoting. Returns (packed LU, pivot rows, sign of permutation).
fn lu_decompose(a: &Mat) -> Result<(Mat, Vec<usize>, f64)> {
    let n = a.rows;
    assert_eq!(a.rows, a.cols, "LU requires a square matrix");
    let mut lu = a.clone();
    let mut piv: Vec<usize> = (0..n).collect();
    let mut sign = 1.0;
    for k in 0..n {
        let mut p = k;
        let mut max = lu[(k, k)].abs();
        for i in k + 1..n {
            if lu[(i, k)].abs() > max {
                max = lu[(i, k)].abs();
                p = i;
            }
        }
        if max == 0.0 {
            return Err(Error::Singular(format!("zero pivot at column {k}")));
        }
        if p != k {
            for j in 0..n {
                let t = lu[(k, j)];
                lu[(k, j)] = lu[(p, j)];
                lu[(p, j)] = t;
            }
            piv.swap(k, p);
            sign = -sign;
        }
        for i in k + 1..n {
            let f = lu[(i, k)] / lu[(k, k)];
            lu[(i, k)] = f;
            for j in k + 1..n {
                lu[(i, j)] -= f * lu[(k, j)];
            }
        }
    }
    Ok((lu, piv, sign))
}

/// Solve a square linear system by LU with partial pivoting.
pub fn solve(a: &Mat, b: &[f64]) -> Result<Vec<f64>> {
    let (lu, piv, _) = lu_decompose(a)?;
    let n = a.rows;
    let mut x: Vec<f64> = piv.iter().map(|&p| b[p]).collect();
    for i in 1..n {
        for j in 0..i {
            x[i] -= lu[(i, j)] * x[j];
        }
    }
    for i in (0..n).rev() {
        for j in i + 1..n {
            x[i] -= lu[(i, j)] * x[j];
        }
        x[i] /= lu[(i, i)];
    }
    Ok(x)
}

pub fn det(a: &Mat) -> f64 {
    match lu_decompose(a) {
        Ok((lu, _, sign)) => {
            let mut d = sign;
            for i in 0..a.rows {
                d *= lu[(i, i)];
            }
            d
        }
        Err(_) => 0.0,
    }
}

// ---------------------------------------------------------------------------
// Column-pivoted QR
// ---------------------------------------------------------------------------

/// Householder QR with column pivoting. Pivot ties break toward the lowest
/// column index so factorizations are deterministic.
pub struct ColPivQr {
    /// Packed factors: R in the upper triangle, Householder vectors below.
    qr: Mat,
    /// Householder scalars.
    tau: Vec<f64>,
    /// Column permutation: `perm[k]` is the original index of pivot column k.
    pub perm: Vec<usize>,
    /// |R[k][k]| in decreasing order; used as singular-value proxies.
    pub rdiag: Vec<f64>,
}

impl ColPivQr {
    pub fn new(a: &Mat) -> Self {
        let m = a.rows;
        let n = a.cols;
        let kmax = m.min(n);
        let mut qr = a.clone();
        let mut tau = vec![0.0; kmax];
        let mut perm: Vec<usize> = (0..n).collect();
        let mut colnorm: Vec<f64> = (0..n).map(|j| norm(&qr.col(j))).collect();

        for k in 0..kmax {
            // pivot: strictly greater norm wins, so ties keep the lowest index
            let mut p = k;
            for j in k + 1..n {
                if colnorm[j] > colnorm[p] {
                    p = j;
                }
            }
            if p != k {
                for i in 0..m {
                    let t = qr[(i, k)];
                    qr[(i, k)] = qr[(i, p)];
                    qr[(i, p)] = t;
                }
                perm.swap(k, p);
                colnorm.swap(k, p);
            }
            // Householder vector for column k
            let mut nrm = 0.0f64;
            for i in k..m {
                nrm = nrm.hypot(qr[(i, k)]);
            }
            if nrm == 0.0 {
                tau[k] = 0.0;
                continue;
            }
            let alpha = if qr[(k, k)] >= 0.0 { -nrm } else { nrm };
            for i in k..m {
                qr[(i, k)] /= -alpha;
            }
            qr[(k, k)] += 1.0;
            tau[k] = qr[(k, k)];
            // apply to remaining columns
            for j in k + 1..n {
                let mut s = 0.0;
                for i in k..m {
                    s += qr[(i, k)] * qr[(i, j)];
                }
                s = -s / qr[(k, k)];
                for i in k..m {
                    qr[(i, j)] += s * qr[(i, k)];
                }
            }
            qr[(k, k)] = alpha;
            // downdate column norms
            for j in k + 1..n {
                colnorm[j] = (k + 1..m).map(|i| qr[(i, j)] * qr[(i, j)]).sum::<f64>().sqrt();
            }
        }
        let rdiag = (0..kmax).map(|k| qr[(k, k)].abs()).collect();
        ColPivQr { qr, tau, perm, rdiag }
    }

    /// Numeric rank: count of |R[k][k]| >= tol_rel * |R[0][0]|.
    pub fn rank(&self, tol_rel: f64) -> usize {
        let sigma_max = self.rdiag.first().copied().unwrap_or(0.0);
        if sigma_max == 0.0 {
            return 0;
        }
        self.rdiag.iter().take_while(|&&r| r >= tol_rel * sigma_max).count()
    }

    /// True when consecutive diagonal ratios fall inside the ambiguous band
    /// around the rank cutoff.
    pub fn rank_ambiguous(&self, lo: f64, hi: f64) -> bool {
        let sigma_max = self.rdiag.first().copied().unwrap_or(0.0);
        if sigma_max == 0.0 {
            return false;
        }
        self.rdiag.iter().any(|&r| {
            let ratio = r / sigma_max;
            ratio > lo && ratio < hi
        })
    }

    /// Apply Q^T to a vector (length = rows).
    fn qt_mul(&self, b: &[f64]) -> Vec<f64> {
        let m = self.qr.rows;
        let mut y = b.to_vec();
        for k in 0..self.tau.len() {
            if self.tau[k] == 0.0 {
                continue;
            }
            // reconstruct v_k: v[k] = tau[k] was stored transiently; the packed
            // scheme keeps v below the diagonal with v[k] = tau[k]
            let mut s = self.tau[k] * y[k];
            for i in k + 1..m {
                s += self.qr[(i, k)] * y[i];
            }
            s = -s / self.tau[k];
            y[k] += s * self.tau[k];
            for i in k + 1..m {
                y[i] += s * self.qr[(i, k)];
            }
        }
        y
    }

    /// Minimum-residual solution with zeros on the trailing permuted
    /// coordinates (basic least-squares solution at the given rank).
    pub fn solve_least_squares(&self, b: &[f64], rank: usize) -> Vec<f64> {
        let n = self.qr.cols;
        let y = self.qt_mul(b);
        let mut z = vec![0.0; n];
        for i in (0..rank).rev() {
            let mut s = y[i];
            for j in i + 1..rank {
                s -= self.r_entry(i, j) * z[j];
            }
            z[i] = s / self.r_entry(i, i);
        }
        // undo permutation
        let mut x = vec![0.0; n];
        for k in 0..n {
            x[self.perm[k]] = z[k];
        }
        x
    }

    fn r_entry(&self, i: usize, j: usize) -> f64 {
        if i <= j {
            self.qr[(i, j)]
        } else {
            0.0
        }
    }

    /// Orthonormal basis of the numerical null space at the given rank.
    /// Columns of the returned matrix span ker(A).
    pub fn kernel(&self, rank: usize) -> Mat {
        let n = self.qr.cols;
        let nul = n - rank;
        let mut basis = Mat::zeros(n, nul);
        for (col, free) in (rank..n).enumerate() {
            // solve R11 * w = -R12[:, free]
            let mut w = vec![0.0; rank];
            for i in (0..rank).rev() {
                let mut s = -self.r_entry(i, free);
                for j in i + 1..rank {
                    s -= self.r_entry(i, j) * w[j];
                }
                w[i] = s / self.r_entry(i, i);
            }
            for i in 0..rank {
                basis[(self.perm[i], col)] = w[i];
            }
            basis[(self.perm[free], col)] = 1.0;
        }
        orthonormalize_columns(&basis)
    }
}

/// Modified Gram-Schmidt with re-orthogonalization. Zero columns are dropped,
/// so the result can have fewer columns than the input.
pub fn orthonormalize_columns(a: &Mat) -> Mat {
    let m = a.rows;
    let mut cols: Vec<Vec<f64>> = Vec::new();
    for j in 0..a.cols {
        let mut v = a.col(j);
        for _ in 0..2 {
            for u in &cols {
                let c = dot(u, &v);
                for i in 0..m {
                    v[i] -= c * u[i];
                }
            }
        }
        let n = norm(&v);
        if n > 1e-13 {
            for x in &mut v {
                *x /= n;
            }
            cols.push(v);
        }
    }
    let mut out = Mat::zeros(m, cols.len());
    for (j, c) in cols.iter().enumerate() {
        for i in 0..m {
            out[(i, j)] = c[i];
        }
    }
    out
}

/// Relative rank cutoff shared by the rank-revealing paths.
pub const RANK_TOL: f64 = 1e-9;
/// Ambiguity band for rank warnings.
pub const RANK_AMBIG_LO: f64 = 1e-11;
pub const RANK_AMBIG_HI: f64 = 1e-7;

/// Numeric rank with the crate-wide cutoff.
pub fn rank(a: &Mat) -> usize {
    ColPivQr::new(a).rank(RANK_TOL)
}

/// Least squares fit of `a x = b` (possibly rank deficient).
pub fn least_squares(a: &Mat, b: &[f64]) -> Vec<f64> {
    let qr = ColPivQr::new(a);
    let r = qr.rank(RANK_TOL);
    qr.solve_least_squares(b, r)
}

// ---------------------------------------------------------------------------
// Eigenvalues of a real general matrix
// ---------------------------------------------------------------------------

/// Parlett-Reinsch balancing; similarity transform, eigenvalues preserved.
fn balance(a: &mut Mat) {
    let n = a.rows;
    let radix = 2.0f64;
    let sq = radix * radix;
    let mut done = false;
    let mut sweeps = 0;
    while !done && sweeps < 100 {
        done = true;
        sweeps += 1;
        for i in 0..n {
            let mut c: f64 = (0..n).filter(|&j| j != i).map(|j| a[(j, i)].abs()).sum();
            let r: f64 = (0..n).filter(|&j| j != i).map(|j| a[(i, j)].abs()).sum();
            if c == 0.0 || r == 0.0 {
                continue;
            }
            let s = c + r;
            let mut f = 1.0;
            let mut g = r / radix;
            while c < g {
                f *= radix;
                c *= sq;
            }
            g = r * radix;
            while c >= g {
                f /= radix;
                c /= sq;
            }
            if (c + r) / f < 0.95 * s {
                done = false;
                let ginv = 1.0 / f;
                for j in 0..n {
                    a[(i, j)] *= ginv;
                }
                for j in 0..n {
                    a[(j, i)] *= f;
                }
            }
        }
    }
}

/// Householder reduction to upper Hessenberg form (in place).
fn hessenberg(h: &mut Mat) {
    let n = h.rows;
    if n < 3 {
        return;
    }
    let mut ort = vec![0.0; n];
    for m in 1..n - 1 {
        let scale: f64 = (m..n).map(|i| h[(i, m - 1)].abs()).sum();
        if scale == 0.0 {
            continue;
        }
        let mut hsum = 0.0;
        for i in (m..n).rev() {
            ort[i] = h[(i, m - 1)] / scale;
            hsum += ort[i] * ort[i];
        }
        let mut g = hsum.sqrt();
        if ort[m] > 0.0 {
            g = -g;
        }
        hsum -= ort[m] * g;
        ort[m] -= g;
        // apply Householder similarity transform H <- (I - u u^T / h) H (I - u u^T / h)
        for j in m..n {
            let mut f = 0.0;
            for i in (m..n).rev() {
                f += ort[i] * h[(i, j)];
            }
            f /= hsum;
            for i in m..n {
                h[(i, j)] -= f * ort[i];
            }
        }
        for i in 0..n {
            let mut f = 0.0;
            for j in (m..n).rev() {
                f += ort[j] * h[(i, j)];
            }
            f /= hsum;
            for j in m..n {
                h[(i, j)] -= f * ort[j];
            }
        }
        h[(m, m - 1)] = scale * g;
        for i in m + 1..n {
            h[(i, m - 1)] = 0.0;
        }
    }
}

/// Eigenvalues of a real general matrix by Francis double-shift QR on the
/// Hessenberg form. Matrices of order greater than 64 are rejected.
pub fn eigenvalues(a: &Mat) -> Result<Vec<Complex64>> {
    assert_eq!(a.rows, a.cols, "eigenvalues require a square matrix");
    let nn = a.rows;
    if nn > 64 {
        return Err(Error::Invalid(format!("matrix order {nn} exceeds 64")));
    }
    if nn == 0 {
        return Ok(Vec::new());
    }
    let mut h = a.clone();
    balance(&mut h);
    hessenberg(&mut h);
    hqr_eigenvalues(&mut h)
}

/// Francis double-shift QR on an upper Hessenberg matrix (EISPACK hqr).
fn hqr_eigenvalues(h: &mut Mat) -> Result<Vec<Complex64>> {
    let nn = h.rows;
    let eps = f64::EPSILON;
    let mut d = vec![0.0f64; nn];
    let mut e = vec![0.0f64; nn];

    let mut norm: f64 = 0.0;
    for i in 0..nn {
        for j in i.saturating_sub(1)..nn {
            norm += h[(i, j)].abs();
        }
    }
    if norm == 0.0 {
        return Ok(vec![Complex64::new(0.0, 0.0); nn]);
    }

    let low = 0isize;
    let mut n = nn as isize - 1;
    let mut exshift = 0.0;
    let mut iter = 0usize;
    let mut total_iter = 0usize;
    let max_total = 60 * nn.max(1);

    let (mut p, mut q, mut r) = (0.0f64, 0.0f64, 0.0f64);
    let (mut s, mut z, mut w, mut x, mut y): (f64, f64, f64, f64, f64);

    while n >= low {
        if total_iter > max_total {
            return Err(Error::EigenNonConvergence { iterations: total_iter });
        }
        // find a small subdiagonal element
        let mut l = n;
        while l > low {
            s = h[((l - 1) as usize, (l - 1) as usize)].abs() + h[(l as usize, l as usize)].abs();
            if s == 0.0 {
                s = norm;
            }
            if h[(l as usize, (l - 1) as usize)].abs() < eps * s {
                break;
            }
            l -= 1;
        }

        if l == n {
            // single root
            let un = n as usize;
            h[(un, un)] += exshift;
            d[un] = h[(un, un)];
            e[un] = 0.0;
            n -= 1;
            iter = 0;
        } else if l == n - 1 {
            // double root
            let un = n as usize;
            w = h[(un, un - 1)] * h[(un - 1, un)];
            p = (h[(un - 1, un - 1)] - h[(un, un)]) / 2.0;
            q = p * p + w;
            z = q.abs().sqrt();
            h[(un, un)] += exshift;
            h[(un - 1, un - 1)] += exshift;
            x = h[(un, un)];
            if q >= 0.0 {
                z = if p >= 0.0 { p + z } else { p - z };
                d[un - 1] = x + z;
                d[un] = d[un - 1];
                if z != 0.0 {
                    d[un] = x - w / z;
                }
                e[un - 1] = 0.0;
                e[un] = 0.0;
            } else {
                d[un - 1] = x + p;
                d[un] = x + p;
                e[un - 1] = z;
                e[un] = -z;
            }
            n -= 2;
            iter = 0;
        } else {
            // form shift
            let un = n as usize;
            x = h[(un, un)];
            y = 0.0;
            w = 0.0;
            if l < n {
                y = h[(un - 1, un - 1)];
                w = h[(un, un - 1)] * h[(un - 1, un)];
            }
            if iter == 10 {
                exshift += x;
                for i in low..=n {
                    let ui = i as usize;
                    h[(ui, ui)] -= x;
                }
                s = h[(un, un - 1)].abs() + h[(un - 1, un - 2)].abs();
                x = 0.75 * s;
                y = x;
                w = -0.4375 * s * s;
            }
            if iter == 30 {
                s = (y - x) / 2.0;
                s = s * s + w;
                if s > 0.0 {
                    s = s.sqrt();
                    if y < x {
                        s = -s;
                    }
                    s = x - w / ((y - x) / 2.0 + s);
                    for i in low..=n {
                        let ui = i as usize;
                        h[(ui, ui)] -= s;
                    }
                    exshift += s;
                    x = 0.964;
                    y = x;
                    w = x;
                }
            }
            iter += 1;
            total_iter += 1;

            // two consecutive small subdiagonals
            let mut m = n - 2;
            while m >= l {
                let um = m as usize;
                z = h[(um, um)];
                r = x - z;
                s = y - z;
                p = (r * s - w) / h[(um + 1, um)] + h[(um, um + 1)];
                q = h[(um + 1, um + 1)] - z - r - s;
                r = h[(um + 2, um + 1)];
                s = p.abs() + q.abs() + r.abs();
                p /= s;
                q /= s;
                r /= s;
                if m == l {
                    break;
                }
                if h[(um, um - 1)].abs() * (q.abs() + r.abs())
                    < eps
                        * (p.abs()
                            * (h[(um - 1, um - 1)].abs() + z.abs() + h[(um + 1, um + 1)].abs()))
                {
                    break;
                }
                m -= 1;
            }
            for i in m + 2..=n {
                let ui = i as usize;
                h[(ui, ui - 2)] = 0.0;
                if i > m + 2 {
                    h[(ui, ui - 3)] = 0.0;
                }
            }

            // double QR step on rows l..n, columns m..n
            for k in m..n {
                let uk = k as usize;
                let notlast = k != n - 1;
                if k != m {
                    p = h[(uk, uk - 1)];
                    q = h[(uk + 1, uk - 1)];
                    r = if notlast { h[(uk + 2, uk - 1)] } else { 0.0 };
                    x = p.abs() + q.abs() + r.abs();
                    if x == 0.0 {
                        continue;
                    }
                    p /= x;
                    q /= x;
                    r /= x;
                }
                s = (p * p + q * q + r * r).sqrt();
                if p < 0.0 {
                    s = -s;
                }
                if s != 0.0 {
                    if k != m {
                        h[(uk, uk - 1)] = -s * x;
                    } else if l != m {
                        h[(uk, uk - 1)] = -h[(uk, uk - 1)];
                    }
                    p += s;
                    x = p / s;
                    y = q / s;
                    z = r / s;
                    q /= p;
                    r /= p;

                    for j in uk..nn {
                        p = h[(uk, j)] + q * h[(uk + 1, j)];
                        if notlast {
                            p += r * h[(uk + 2, j)];
                        }
                        h[(uk, j)] -= p * x;
                        h[(uk + 1, j)] -= p * y;
                        if notlast {
                            h[(uk + 2, j)] -= p * z;
                        }
                    }
                    let imax = n.min(k + 3) as usize;
                    for i in 0..=imax {
                        p = x * h[(i, uk)] + y * h[(i, uk + 1)];
                        if notlast {
                            p += z * h[(i, uk + 2)];
                        }
                        h[(i, uk)] -= p;
                        h[(i, uk + 1)] -= p * q;
                        if notlast {
                            h[(i, uk + 2)] -= p * r;
                        }
                    }
                }
            }
        }
    }

    Ok(d.into_iter().zip(e).map(|(re, im)| Complex64::new(re, im)).collect())
}

/// Characteristic polynomial coefficients of `a` by the Faddeev-LeVerrier
/// recurrence. Returns monic coefficients `c` with
/// `det(lambda I - A) = lambda^n + c[0] lambda^(n-1) + ... + c[n-1]`.
pub fn charpoly(a: &Mat) -> Vec<f64> {
    let n = a.rows;
    let mut m = a.clone();
    let mut coeffs = Vec::with_capacity(n);
    for k in 1..=n {
        // M_1 = A, M_k = A (M_{k-1} + c_{k-1} I)
        if k > 1 {
            let c = *coeffs.last().unwrap();
            let mut shifted = m.clone();
            for i in 0..n {
                shifted[(i, i)] += c;
            }
            m = a.matmul(&shifted);
        }
        let trace: f64 = (0..n).map(|i| m[(i, i)]).sum();
        coeffs.push(-trace / k as f64);
    }
    coeffs
}

/// Least-squares slope of `log |y|` against `log |x|`. Pairs with tiny
/// entries are dropped; `None` when fewer than two usable pairs remain.
pub fn log_log_slope(pairs: &[(f64, f64)]) -> Option<f64> {
    let pts: Vec<(f64, f64)> = pairs
        .iter()
        .filter(|(x, y)| x.abs() > 1e-300 && y.abs() > 1e-300)
        .map(|(x, y)| (x.abs().ln(), y.abs().ln()))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let sx: f64 = pts.iter().map(|(x, _)| x).sum();
    let sy: f64 = pts.iter().map(|(_, y)| y).sum();
    let sxx: f64 = pts.iter().map(|(x, _)| x * x).sum();
    let sxy: f64 = pts.iter().map(|(x, y)| x * y).sum();
    let denom = n * sxx - sx * sx;
    if denom.abs() < 1e-300 {
        return None;
    }
    Some((n * sxy - sx * sy) / denom)
}

/// Directed + reversed max-min distance between two complex spectra.
pub fn hausdorff(a: &[Complex64], b: &[Complex64]) -> f64 {
    if a.is_empty() && b.is_empty() {
        return 0.0;
    }
    if a.is_empty() || b.is_empty() {
        return f64::INFINITY;
    }
    let one_way = |p: &[Complex64], q: &[Complex64]| {
        p.iter()
            .map(|x| q.iter().map(|y| (x - y).norm()).fold(f64::INFINITY, f64::min))
            .fold(0.0f64, f64::max)
    };
    one_way(a, b).max(one_way(b, a))
}

/// Multiply out monic polynomial factors given as root-coefficient lists.
/// Each factor is a coefficient vector highest-degree-first, e.g. a monic
/// quadratic is `[1.0, p, q]`.
pub fn poly_mul(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; a.len() + b.len() - 1];
    for (i, x) in a.iter().enumerate() {
        for (j, y) in b.iter().enumerate() {
            out[i + j] += x * y;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn approx(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn solve_and_det() {
        let a = Mat::from_rows(&[vec![2.0, 1.0], vec![1.0, 3.0]]);
        let x = solve(&a, &[5.0, 10.0]).unwrap();
        assert!(approx(x[0], 1.0, 1e-12));
        assert!(approx(x[1], 3.0, 1e-12));
        assert!(approx(det(&a), 5.0, 1e-12));
    }

    #[test]
    fn qr_rank_and_kernel() {
        // rank-2 matrix with known kernel (1, 1, -1)/sqrt(3)
        let a = Mat::from_rows(&[
            vec![1.0, 0.0, 1.0],
            vec![0.0, 1.0, 1.0],
            vec![1.0, 1.0, 2.0],
        ]);
        let qr = ColPivQr::new(&a);
        assert_eq!(qr.rank(RANK_TOL), 2);
        let k = qr.kernel(2);
        assert_eq!(k.cols(), 1);
        let v = k.col(0);
        let av = a.matvec(&v);
        assert!(norm(&av) < 1e-10);
        assert!(approx(norm(&v), 1.0, 1e-12));
    }

    #[test]
    fn least_squares_overdetermined() {
        // fit y = 2x + 1 exactly
        let a = Mat::from_rows(&[vec![0.0, 1.0], vec![1.0, 1.0], vec![2.0, 1.0]]);
        let x = least_squares(&a, &[1.0, 3.0, 5.0]);
        assert!(approx(x[0], 2.0, 1e-10));
        assert!(approx(x[1], 1.0, 1e-10));
    }

    #[test]
    fn eigen_rotation_block() {
        let a = Mat::from_rows(&[vec![0.0, 1.0], vec![-1.0, 0.0]]);
        let mut eig = eigenvalues(&a).unwrap();
        eig.sort_by(|p, q| p.im.partial_cmp(&q.im).unwrap());
        assert!(approx(eig[0].im, -1.0, 1e-12) && approx(eig[0].re, 0.0, 1e-12));
        assert!(approx(eig[1].im, 1.0, 1e-12) && approx(eig[1].re, 0.0, 1e-12));
    }

    #[test]
    fn eigen_zero_matrix() {
        let eig = eigenvalues(&Mat::zeros(5, 5)).unwrap();
        assert!(eig.iter().all(|l| l.norm() == 0.0));
    }

    #[test]
    fn eigen_companion_cubic() {
        // companion of lambda^3 - 6 lambda^2 + 11 lambda - 6 = (l-1)(l-2)(l-3)
        let a = Mat::from_rows(&[
            vec![6.0, -11.0, 6.0],
            vec![1.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0],
        ]);
        let mut eig = eigenvalues(&a).unwrap();
        eig.sort_by(|p, q| p.re.partial_cmp(&q.re).unwrap());
        for (got, want) in eig.iter().zip([1.0, 2.0, 3.0]) {
            assert!(approx(got.re, want, 1e-9), "{got} vs {want}");
            assert!(got.im.abs() < 1e-9);
        }
    }

    #[test]
    fn eigen_matches_charpoly_roots() {
        // cross-check: eigenvalues are roots of the Faddeev-LeVerrier polynomial
        let a = Mat::from_rows(&[
            vec![0.3, -1.2, 0.5, 0.0],
            vec![2.0, 0.1, -0.4, 0.7],
            vec![0.0, 1.5, -0.2, 0.3],
            vec![0.9, 0.0, 1.1, 0.4],
        ]);
        let cs = charpoly(&a);
        let eig = eigenvalues(&a).unwrap();
        for l in eig {
            let mut p = Complex64::new(1.0, 0.0);
            for c in &cs {
                p = p * l + c;
            }
            assert!(p.norm() < 1e-7 * (1.0 + l.norm().powi(4)), "residual {p}");
        }
    }

    #[test]
    fn charpoly_known() {
        let a = Mat::from_rows(&[vec![2.0, 0.0], vec![0.0, 3.0]]);
        // (l-2)(l-3) = l^2 - 5l + 6
        let cs = charpoly(&a);
        assert!(approx(cs[0], -5.0, 1e-12));
        assert!(approx(cs[1], 6.0, 1e-12));
    }

    #[test]
    fn hausdorff_basic() {
        let a = [Complex64::new(0.0, 1.0), Complex64::new(0.0, -1.0)];
        let b = [Complex64::new(0.0, 1.0), Complex64::new(0.0, -1.0)];
        assert_eq!(hausdorff(&a, &b), 0.0);
        let c = [Complex64::new(0.5, 1.0), Complex64::new(0.0, -1.0)];
        assert!(approx(hausdorff(&a, &c), 0.5, 1e-12));
    }

    #[test]
    fn skew_rank_even() {
        let a = Mat::from_rows(&[
            vec![0.0, 1.0, 0.0],
            vec![-1.0, 0.0, 2.0],
            vec![0.0, -2.0, 0.0],
        ]);
        assert_eq!(rank(&a), 2);
    }
}
