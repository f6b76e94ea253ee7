//! Dense complex linear algebra, state metrics, Haar sampling and Uhlmann
//! isometries.
//!
//! Matrices are small (total dimension bounded by [`dim_cap`]) so everything
//! is dense and row-major. Eigenvalues use cyclic Jacobi; singular values use
//! one-sided Jacobi, which keeps relative accuracy on tiny singular values.

use std::ops::{Add, Index, IndexMut, Mul, Neg, Sub};

use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::qstate::RegisterLayout;
use crate::{Error, Result};

pub type C64 = Complex64;

/// Seeded random stream used everywhere randomness is needed.
pub type Rng = ChaCha20Rng;

pub fn rng_from_seed(seed: u64) -> Rng {
    ChaCha20Rng::seed_from_u64(seed)
}

/// Relative eigenvalue cut below which a spectrum entry counts as zero.
pub const ZERO_REL: f64 = 1e-10;

const DEFAULT_DIM_CAP: usize = 64;

/// Maximum total dimension accepted by [`kron`] and state builders.
/// `HSRD_DIM_CAP` overrides the default of 64.
pub fn dim_cap() -> usize {
    std::env::var("HSRD_DIM_CAP")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&v| v > 0)
        .unwrap_or(DEFAULT_DIM_CAP)
}

pub fn log2(x: f64) -> f64 {
    x.log2()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CMatrix {
    rows: usize,
    cols: usize,
    data: Vec<C64>,
}

impl CMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        CMatrix { rows, cols, data: vec![C64::new(0.0, 0.0); rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = C64::new(1.0, 0.0);
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<C64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} entries for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        if data.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
            return Err(Error::Shape("non-finite entry".into()));
        }
        Ok(CMatrix { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> C64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        CMatrix { rows, cols, data }
    }

    pub fn from_real_diag(d: &[f64]) -> Self {
        let mut m = Self::zeros(d.len(), d.len());
        for (i, &x) in d.iter().enumerate() {
            m[(i, i)] = C64::new(x, 0.0);
        }
        m
    }

    pub fn from_real(rows: usize, cols: usize, vals: &[f64]) -> Result<Self> {
        Self::from_vec(rows, cols, vals.iter().map(|&x| C64::new(x, 0.0)).collect())
    }

    /// Column vector.
    pub fn column(v: &[C64]) -> Self {
        CMatrix { rows: v.len(), cols: 1, data: v.to_vec() }
    }

    /// Projector |v><v| (no normalization).
    pub fn outer(v: &[C64]) -> Self {
        Self::from_fn(v.len(), v.len(), |i, j| v[i] * v[j].conj())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn data(&self) -> &[C64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<C64> {
        self.data
    }

    pub fn adjoint(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self[(j, i)].conj())
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    pub fn conj(&self) -> Self {
        CMatrix { rows: self.rows, cols: self.cols, data: self.data.iter().map(|z| z.conj()).collect() }
    }

    pub fn scale(&self, s: f64) -> Self {
        self.scale_c(C64::new(s, 0.0))
    }

    pub fn scale_c(&self, s: C64) -> Self {
        CMatrix { rows: self.rows, cols: self.cols, data: self.data.iter().map(|z| z * s).collect() }
    }

    pub fn trace(&self) -> C64 {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).sum()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().map(|z| z.norm()).fold(0.0, f64::max)
    }

    pub fn matmul(&self, other: &CMatrix) -> Result<CMatrix> {
        if self.cols != other.rows {
            return Err(Error::Shape(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        Ok(self.mul_unchecked(other))
    }

    fn mul_unchecked(&self, other: &CMatrix) -> CMatrix {
        let mut out = CMatrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a.re == 0.0 && a.im == 0.0 {
                    continue;
                }
                let row = &other.data[k * other.cols..(k + 1) * other.cols];
                let dst = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (d, b) in dst.iter_mut().zip(row) {
                    *d += a * b;
                }
            }
        }
        out
    }

    /// Matrix-vector product.
    pub fn apply(&self, v: &[C64]) -> Vec<C64> {
        assert_eq!(v.len(), self.cols, "vector length mismatch");
        (0..self.rows)
            .map(|i| self.data[i * self.cols..(i + 1) * self.cols].iter().zip(v).map(|(a, b)| a * b).sum())
            .collect()
    }

    /// Real inner product Re Tr(A† B).
    pub fn inner_re(&self, other: &CMatrix) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| (a.conj() * b).re).sum()
    }

    pub fn hermitian_error(&self) -> f64 {
        if !self.is_square() {
            return f64::INFINITY;
        }
        let mut e: f64 = 0.0;
        for i in 0..self.rows {
            for j in i..self.cols {
                e = e.max((self[(i, j)] - self[(j, i)].conj()).norm());
            }
        }
        e
    }

    pub fn is_hermitian(&self, tol: f64) -> bool {
        self.hermitian_error() <= tol
    }

    /// (M + M†)/2.
    pub fn hermitian_part(&self) -> CMatrix {
        Self::from_fn(self.rows, self.cols, |i, j| (self[(i, j)] + self[(j, i)].conj()) * 0.5)
    }

    pub fn diag_real(&self) -> Vec<f64> {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)].re).collect()
    }

    /// Copies `sub` into this matrix at the given offset.
    pub fn set_block(&mut self, r0: usize, c0: usize, sub: &CMatrix) {
        for i in 0..sub.rows {
            for j in 0..sub.cols {
                self[(r0 + i, c0 + j)] = sub[(i, j)];
            }
        }
    }

    pub fn block(&self, r0: usize, c0: usize, rows: usize, cols: usize) -> CMatrix {
        Self::from_fn(rows, cols, |i, j| self[(r0 + i, c0 + j)])
    }

    pub fn column_vec(&self, j: usize) -> Vec<C64> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }
}

impl Index<(usize, usize)> for CMatrix {
    type Output = C64;
    fn index(&self, (i, j): (usize, usize)) -> &C64 {
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for CMatrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut C64 {
        &mut self.data[i * self.cols + j]
    }
}

impl Add for &CMatrix {
    type Output = CMatrix;
    fn add(self, rhs: &CMatrix) -> CMatrix {
        assert_eq!((self.rows, self.cols), (rhs.rows, rhs.cols), "shape mismatch in add");
        CMatrix { rows: self.rows, cols: self.cols, data: self.data.iter().zip(&rhs.data).map(|(a, b)| a + b).collect() }
    }
}

impl Sub for &CMatrix {
    type Output = CMatrix;
    fn sub(self, rhs: &CMatrix) -> CMatrix {
        assert_eq!((self.rows, self.cols), (rhs.rows, rhs.cols), "shape mismatch in sub");
        CMatrix { rows: self.rows, cols: self.cols, data: self.data.iter().zip(&rhs.data).map(|(a, b)| a - b).collect() }
    }
}

impl Mul for &CMatrix {
    type Output = CMatrix;
    fn mul(self, rhs: &CMatrix) -> CMatrix {
        assert_eq!(self.cols, rhs.rows, "shape mismatch in mul");
        self.mul_unchecked(rhs)
    }
}

impl Neg for &CMatrix {
    type Output = CMatrix;
    fn neg(self) -> CMatrix {
        self.scale(-1.0)
    }
}

// ---------------------------------------------------------------------------
// Tensor structure
// ---------------------------------------------------------------------------

/// Kronecker product, refusing results larger than [`dim_cap`].
pub fn kron(a: &CMatrix, b: &CMatrix) -> Result<CMatrix> {
    let cap = dim_cap();
    let (r, c) = (a.rows * b.rows, a.cols * b.cols);
    if r.max(c) > cap {
        return Err(Error::Dimension(format!("kron result {r}x{c} exceeds cap {cap}")));
    }
    Ok(kron_raw(a, b))
}

/// Kronecker product without the cap check, for internal plumbing that
/// manages its own size budget.
pub(crate) fn kron_raw(a: &CMatrix, b: &CMatrix) -> CMatrix {
    let (r, c) = (a.rows * b.rows, a.cols * b.cols);
    let mut out = CMatrix::zeros(r, c);
    for i in 0..a.rows {
        for j in 0..a.cols {
            let x = a[(i, j)];
            if x.re == 0.0 && x.im == 0.0 {
                continue;
            }
            for k in 0..b.rows {
                for l in 0..b.cols {
                    out[(i * b.rows + k, j * b.cols + l)] = x * b[(k, l)];
                }
            }
        }
    }
    out
}

pub fn kron_vec(a: &[C64], b: &[C64]) -> Vec<C64> {
    let mut out = Vec::with_capacity(a.len() * b.len());
    for x in a {
        for y in b {
            out.push(x * y);
        }
    }
    out
}

fn strides(dims: &[usize]) -> Vec<usize> {
    let mut s = vec![1; dims.len()];
    for i in (0..dims.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * dims[i + 1];
    }
    s
}

/// Offsets (in the full index space) of every multi-index over `subs`,
/// enumerated row-major in the order given.
fn sub_offsets(dims: &[usize], subs: &[usize]) -> Vec<usize> {
    let st = strides(dims);
    let mut offs = vec![0usize];
    for &s in subs {
        let mut next = Vec::with_capacity(offs.len() * dims[s]);
        for &o in &offs {
            for k in 0..dims[s] {
                next.push(o + k * st[s]);
            }
        }
        offs = next;
    }
    offs
}

fn check_subsystems(dims: &[usize], keep: &[usize]) -> Result<()> {
    let mut seen = vec![false; dims.len()];
    for &k in keep {
        if k >= dims.len() || seen[k] {
            return Err(Error::Layout(format!("bad subsystem index {k} for {} subsystems", dims.len())));
        }
        seen[k] = true;
    }
    Ok(())
}

/// Partial trace over every subsystem not in `keep`; kept subsystems appear
/// in the order listed (so this also permutes).
pub fn partial_trace_dims(m: &CMatrix, dims: &[usize], keep: &[usize]) -> Result<CMatrix> {
    let total: usize = dims.iter().product();
    if m.rows != total || m.cols != total {
        return Err(Error::Layout(format!("state is {}x{}, layout dimension {total}", m.rows, m.cols)));
    }
    check_subsystems(dims, keep)?;
    let traced: Vec<usize> = (0..dims.len()).filter(|i| !keep.contains(i)).collect();
    let ko = sub_offsets(dims, keep);
    let to = sub_offsets(dims, &traced);
    let n = ko.len();
    let mut out = CMatrix::zeros(n, n);
    for (i, &oi) in ko.iter().enumerate() {
        for (j, &oj) in ko.iter().enumerate() {
            let mut acc = C64::new(0.0, 0.0);
            for &t in &to {
                acc += m[(oi + t, oj + t)];
            }
            out[(i, j)] = acc;
        }
    }
    Ok(out)
}

/// Partial trace addressed by subsystem names.
pub fn partial_trace(m: &CMatrix, layout: &RegisterLayout, keep: &[&str]) -> Result<CMatrix> {
    let idx = layout.indices(keep)?;
    partial_trace_dims(m, &layout.dims(), &idx)
}

/// Reduced density operator of a pure vector.
pub fn reduce_pure(psi: &[C64], dims: &[usize], keep: &[usize]) -> Result<CMatrix> {
    let total: usize = dims.iter().product();
    if psi.len() != total {
        return Err(Error::Layout(format!("vector length {} vs layout dimension {total}", psi.len())));
    }
    check_subsystems(dims, keep)?;
    let traced: Vec<usize> = (0..dims.len()).filter(|i| !keep.contains(i)).collect();
    let ko = sub_offsets(dims, keep);
    let to = sub_offsets(dims, &traced);
    // Matrix view: rows = kept, cols = traced.
    let n = ko.len();
    let mut out = CMatrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let mut acc = C64::new(0.0, 0.0);
            for &t in &to {
                acc += psi[ko[i] + t] * psi[ko[j] + t].conj();
            }
            out[(i, j)] = acc;
            out[(j, i)] = acc.conj();
        }
    }
    Ok(out)
}

/// Reorders the tensor factors of a vector.
pub fn permute_vector(psi: &[C64], dims: &[usize], order: &[usize]) -> Result<Vec<C64>> {
    if order.len() != dims.len() {
        return Err(Error::Layout("permutation must list every subsystem".into()));
    }
    check_subsystems(dims, order)?;
    let offs = sub_offsets(dims, order);
    Ok(offs.iter().map(|&o| psi[o]).collect())
}

/// Reorders the tensor factors of an operator.
pub fn permute_operator(m: &CMatrix, dims: &[usize], order: &[usize]) -> Result<CMatrix> {
    if order.len() != dims.len() {
        return Err(Error::Layout("permutation must list every subsystem".into()));
    }
    partial_trace_dims(m, dims, order)
}

// ---------------------------------------------------------------------------
// Spectral routines
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct HermEigen {
    /// Sorted descending.
    pub values: Vec<f64>,
    /// Eigenvectors as columns, matching `values`.
    pub vectors: CMatrix,
}

impl HermEigen {
    pub fn reconstruct(&self) -> CMatrix {
        herm_from_spectrum(&self.vectors, &self.values)
    }
}

/// V diag(w) V†.
pub fn herm_from_spectrum(v: &CMatrix, w: &[f64]) -> CMatrix {
    let n = v.rows;
    let mut out = CMatrix::zeros(n, n);
    for (k, &wk) in w.iter().enumerate() {
        if wk == 0.0 {
            continue;
        }
        for i in 0..n {
            let a = v[(i, k)] * wk;
            for j in 0..n {
                out[(i, j)] += a * v[(j, k)].conj();
            }
        }
    }
    out
}

/// Cyclic Jacobi eigendecomposition of a Hermitian matrix.
pub fn hermitian_eig(m: &CMatrix) -> Result<HermEigen> {
    if !m.is_square() {
        return Err(Error::Shape(format!("{}x{} matrix is not square", m.rows, m.cols)));
    }
    let scale = m.frobenius_norm().max(1.0);
    let herr = m.hermitian_error();
    if herr > 1e-10 * scale {
        return Err(Error::Shape(format!("matrix is not Hermitian (deviation {herr:.3e})")));
    }
    let n = m.rows;
    let mut a = m.hermitian_part();
    for i in 0..n {
        a[(i, i)] = C64::new(a[(i, i)].re, 0.0);
    }
    let mut v = CMatrix::identity(n);
    let fro = a.frobenius_norm();
    for _sweep in 0..100 {
        let mut off = 0.0;
        for p in 0..n {
            for q in (p + 1)..n {
                off += a[(p, q)].norm_sqr();
            }
        }
        if off.sqrt() <= 1e-16 * fro || off == 0.0 {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let g = a[(p, q)];
                let gabs = g.norm();
                if gabs <= 1e-300 {
                    continue;
                }
                let app = a[(p, p)].re;
                let aqq = a[(q, q)].re;
                if gabs < 1e-18 * (app.abs() + aqq.abs()) {
                    a[(p, q)] = C64::new(0.0, 0.0);
                    a[(q, p)] = C64::new(0.0, 0.0);
                    continue;
                }
                let ph = g / gabs; // e^{i phi}
                let tau = (aqq - app) / (2.0 * gabs);
                let t = if tau >= 0.0 { 1.0 / (tau + (1.0 + tau * tau).sqrt()) } else { -1.0 / (-tau + (1.0 + tau * tau).sqrt()) };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                let emi = ph.conj();
                // A <- A J with J = [[c, s], [-s e^{-i phi}, c e^{-i phi}]] on (p, q).
                for k in 0..n {
                    let akp = a[(k, p)];
                    let akq = a[(k, q)];
                    a[(k, p)] = akp * c - akq * emi * s;
                    a[(k, q)] = akp * s + akq * emi * c;
                }
                // A <- J† A.
                for k in 0..n {
                    let apk = a[(p, k)];
                    let aqk = a[(q, k)];
                    a[(p, k)] = apk * c - aqk * ph * s;
                    a[(q, k)] = apk * s + aqk * ph * c;
                }
                a[(p, q)] = C64::new(0.0, 0.0);
                a[(q, p)] = C64::new(0.0, 0.0);
                a[(p, p)] = C64::new(a[(p, p)].re, 0.0);
                a[(q, q)] = C64::new(a[(q, q)].re, 0.0);
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = vkp * c - vkq * emi * s;
                    v[(k, q)] = vkp * s + vkq * emi * c;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[(j, j)].re.partial_cmp(&a[(i, i)].re).unwrap_or(std::cmp::Ordering::Equal));
    let values = order.iter().map(|&i| a[(i, i)].re).collect();
    let vectors = CMatrix::from_fn(n, n, |r, c| v[(r, order[c])]);
    Ok(HermEigen { values, vectors })
}

/// Zero threshold for a spectrum: `ZERO_REL` times the largest magnitude.
pub fn zero_cut(values: &[f64]) -> f64 {
    let m = values.iter().fold(0.0f64, |acc, &x| acc.max(x.abs()));
    ZERO_REL * m
}

/// Applies `f` to the eigenvalues of a Hermitian matrix.
pub fn herm_fn(m: &CMatrix, f: impl Fn(f64) -> f64) -> Result<CMatrix> {
    let e = hermitian_eig(m)?;
    let w: Vec<f64> = e.values.iter().map(|&x| f(x)).collect();
    Ok(herm_from_spectrum(&e.vectors, &w))
}

/// Square root of a PSD matrix; eigenvalues below the zero cut are dropped.
pub fn sqrt_psd(m: &CMatrix) -> Result<CMatrix> {
    let e = hermitian_eig(m)?;
    let cut = zero_cut(&e.values);
    let w: Vec<f64> = e.values.iter().map(|&x| if x > cut { x.sqrt() } else { 0.0 }).collect();
    Ok(herm_from_spectrum(&e.vectors, &w))
}

/// Pseudo-inverse square root on the support.
pub fn pinv_sqrt_psd(m: &CMatrix) -> Result<CMatrix> {
    let e = hermitian_eig(m)?;
    let cut = zero_cut(&e.values);
    let w: Vec<f64> = e.values.iter().map(|&x| if x > cut { 1.0 / x.sqrt() } else { 0.0 }).collect();
    Ok(herm_from_spectrum(&e.vectors, &w))
}

/// Orthogonal projector onto the support.
pub fn support_projector(m: &CMatrix) -> Result<CMatrix> {
    let e = hermitian_eig(m)?;
    let cut = zero_cut(&e.values);
    let w: Vec<f64> = e.values.iter().map(|&x| if x > cut { 1.0 } else { 0.0 }).collect();
    Ok(herm_from_spectrum(&e.vectors, &w))
}

/// Thin singular value decomposition M = U diag(s) V†.
#[derive(Clone, Debug)]
pub struct Svd {
    pub u: CMatrix,
    /// Sorted descending, length min(rows, cols).
    pub s: Vec<f64>,
    pub v: CMatrix,
}

/// One-sided Jacobi SVD. Columns of `u` belonging to zero singular values
/// are completed to an orthonormal set.
pub fn svd(m: &CMatrix) -> Svd {
    if m.rows < m.cols {
        let t = svd(&m.adjoint());
        return Svd { u: t.v, s: t.s, v: t.u };
    }
    let (rows, n) = (m.rows, m.cols);
    let mut a = m.clone();
    let mut v = CMatrix::identity(n);
    for _sweep in 0..80 {
        let mut rotated = false;
        for p in 0..n {
            for q in (p + 1)..n {
                let mut alpha = 0.0;
                let mut beta = 0.0;
                let mut gamma = C64::new(0.0, 0.0);
                for k in 0..rows {
                    let x = a[(k, p)];
                    let y = a[(k, q)];
                    alpha += x.norm_sqr();
                    beta += y.norm_sqr();
                    gamma += x.conj() * y;
                }
                let gabs = gamma.norm();
                if gabs <= 1e-15 * (alpha * beta).sqrt() || gabs == 0.0 {
                    continue;
                }
                rotated = true;
                let ph = gamma / gabs;
                let emi = ph.conj();
                let tau = (beta - alpha) / (2.0 * gabs);
                let t = if tau >= 0.0 { 1.0 / (tau + (1.0 + tau * tau).sqrt()) } else { -1.0 / (-tau + (1.0 + tau * tau).sqrt()) };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                for k in 0..rows {
                    let x = a[(k, p)];
                    let y = a[(k, q)];
                    a[(k, p)] = x * c - y * emi * s;
                    a[(k, q)] = x * s + y * emi * c;
                }
                for k in 0..n {
                    let x = v[(k, p)];
                    let y = v[(k, q)];
                    v[(k, p)] = x * c - y * emi * s;
                    v[(k, q)] = x * s + y * emi * c;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let norms: Vec<f64> = (0..n).map(|j| (0..rows).map(|k| a[(k, j)].norm_sqr()).sum::<f64>().sqrt()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| norms[j].partial_cmp(&norms[i]).unwrap_or(std::cmp::Ordering::Equal));
    let s: Vec<f64> = order.iter().map(|&j| norms[j]).collect();
    let smax = s.first().copied().unwrap_or(0.0);
    let mut u = CMatrix::zeros(rows, n);
    let mut filled = 0;
    for (c, &j) in order.iter().enumerate() {
        if norms[j] > 1e-14 * smax.max(1e-300) && norms[j] > 0.0 {
            for k in 0..rows {
                u[(k, c)] = a[(k, j)] / norms[j];
            }
            filled = c + 1;
        } else {
            break;
        }
    }
    let u = complete_columns(&u, filled, n);
    let v = CMatrix::from_fn(n, n, |r, c| v[(r, order[c])]);
    Svd { u, s, v }
}

/// Keeps the first `k` orthonormal columns of `m` and fills columns
/// `k..ncols` with an orthonormal completion.
pub fn complete_columns(m: &CMatrix, k: usize, ncols: usize) -> CMatrix {
    let rows = m.rows;
    let mut cols: Vec<Vec<C64>> = (0..k).map(|j| m.column_vec(j)).collect();
    let mut e = 0;
    while cols.len() < ncols && e < rows {
        let mut w = vec![C64::new(0.0, 0.0); rows];
        w[e] = C64::new(1.0, 0.0);
        e += 1;
        for _pass in 0..2 {
            for c in &cols {
                let ov: C64 = c.iter().zip(&w).map(|(a, b)| a.conj() * b).sum();
                for (wi, ci) in w.iter_mut().zip(c) {
                    *wi -= ov * ci;
                }
            }
        }
        let nrm = w.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
        if nrm > 1e-8 {
            cols.push(w.iter().map(|z| z / nrm).collect());
        }
    }
    CMatrix::from_fn(rows, ncols, |i, j| if j < cols.len() { cols[j][i] } else { C64::new(0.0, 0.0) })
}

pub fn singular_values(m: &CMatrix) -> Vec<f64> {
    svd(m).s
}

/// Sum of singular values.
pub fn trace_norm(m: &CMatrix) -> f64 {
    if m.is_square() && m.is_hermitian(1e-13 * m.max_abs().max(1e-300)) {
        if let Ok(e) = hermitian_eig(m) {
            return e.values.iter().map(|x| x.abs()).sum();
        }
    }
    singular_values(m).iter().sum()
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// ½‖ρ−σ‖₁.
    pub trace_distance: f64,
    pub generalized_fidelity: f64,
    pub purified_distance: f64,
}

/// Checks PSD within -1e-9 and trace at most 1 + 1e-9.
pub fn check_subnormalized(m: &CMatrix, what: &str) -> Result<()> {
    let e = hermitian_eig(m).map_err(|err| Error::NotAState(format!("{what}: {err}")))?;
    let min = e.values.last().copied().unwrap_or(0.0);
    if min < -1e-9 {
        return Err(Error::NotAState(format!("{what} has eigenvalue {min:.3e}")));
    }
    let tr = m.trace().re;
    if tr > 1.0 + 1e-9 {
        return Err(Error::NotAState(format!("{what} has trace {tr}")));
    }
    Ok(())
}

/// Fidelity ‖√ρ√σ‖₁ (no sub-normalization correction).
pub fn fidelity(rho: &CMatrix, sigma: &CMatrix) -> Result<f64> {
    let a = sqrt_psd(rho)?;
    let b = sqrt_psd(sigma)?;
    Ok(trace_norm(&a.matmul(&b)?))
}

pub fn generalized_fidelity(rho: &CMatrix, sigma: &CMatrix) -> Result<f64> {
    let f = fidelity(rho, sigma)?;
    let a = (1.0 - rho.trace().re).max(0.0);
    let b = (1.0 - sigma.trace().re).max(0.0);
    Ok(f + (a * b).sqrt())
}

pub fn metrics(rho: &CMatrix, sigma: &CMatrix) -> Result<Metrics> {
    if rho.rows != sigma.rows || !rho.is_square() || !sigma.is_square() {
        return Err(Error::Shape("metrics needs two square operators of equal size".into()));
    }
    check_subnormalized(rho, "rho")?;
    check_subnormalized(sigma, "sigma")?;
    let td = 0.5 * trace_norm(&(rho - sigma));
    let fbar = generalized_fidelity(rho, sigma)?.min(1.0);
    Ok(Metrics { trace_distance: td, generalized_fidelity: fbar, purified_distance: (1.0 - fbar * fbar).max(0.0).sqrt() })
}

pub fn purified_distance(rho: &CMatrix, sigma: &CMatrix) -> Result<f64> {
    Ok(metrics(rho, sigma)?.purified_distance)
}

// ---------------------------------------------------------------------------
// Purification, sampling, Uhlmann
// ---------------------------------------------------------------------------

/// Pure vector on system ⊗ mirror; the mirror index follows the eigenbasis.
#[derive(Clone, Debug)]
pub struct Purification {
    pub vector: Vec<C64>,
    pub sys_dim: usize,
    pub mirror_dim: usize,
}

/// Purification with a mirror of the same dimension as the system.
pub fn purify(rho: &CMatrix) -> Result<Purification> {
    purify_with(rho, false)
}

/// Purification whose mirror only spans the support (dimension = rank).
pub fn purify_compact(rho: &CMatrix) -> Result<Purification> {
    purify_with(rho, true)
}

fn purify_with(rho: &CMatrix, compact: bool) -> Result<Purification> {
    let e = hermitian_eig(rho)?;
    let n = rho.rows;
    let cut = zero_cut(&e.values);
    let kept: Vec<usize> = if compact {
        let r: Vec<usize> = (0..n).filter(|&k| e.values[k] > cut).collect();
        if r.is_empty() {
            vec![0]
        } else {
            r
        }
    } else {
        (0..n).collect()
    };
    let m = kept.len();
    let mut vector = vec![C64::new(0.0, 0.0); n * m];
    for (slot, &k) in kept.iter().enumerate() {
        let lam = e.values[k];
        if lam <= cut {
            continue;
        }
        let amp = lam.sqrt();
        for i in 0..n {
            vector[i * m + slot] = e.vectors[(i, k)] * amp;
        }
    }
    Ok(Purification { vector, sys_dim: n, mirror_dim: m })
}

fn complex_gaussian(rng: &mut Rng) -> C64 {
    let re: f64 = StandardNormal.sample(rng);
    let im: f64 = StandardNormal.sample(rng);
    C64::new(re, im) * std::f64::consts::FRAC_1_SQRT_2
}

/// Haar-random unitary from a Ginibre matrix via QR with phase correction.
pub fn sample_haar_unitary(d: usize, rng: &mut Rng) -> Result<CMatrix> {
    if d == 0 {
        return Err(Error::Dimension("Haar unitary needs d >= 1".into()));
    }
    let g = CMatrix::from_fn(d, d, |_, _| complex_gaussian(rng));
    let mut q: Vec<Vec<C64>> = Vec::with_capacity(d);
    let mut rdiag = Vec::with_capacity(d);
    for j in 0..d {
        let mut w = g.column_vec(j);
        let mut r_jj = C64::new(0.0, 0.0);
        // Two Gram-Schmidt passes keep orthogonality at machine precision.
        for _pass in 0..2 {
            for c in &q {
                let ov: C64 = c.iter().zip(&w).map(|(a, b)| a.conj() * b).sum();
                for (wi, ci) in w.iter_mut().zip(c) {
                    *wi -= ov * ci;
                }
            }
        }
        let nrm = w.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
        r_jj += nrm;
        q.push(w.iter().map(|z| z / nrm).collect());
        rdiag.push(r_jj);
    }
    Ok(CMatrix::from_fn(d, d, |i, j| q[j][i] * (rdiag[j] / rdiag[j].norm())))
}

pub fn random_pure_state(d: usize, rng: &mut Rng) -> Vec<C64> {
    let v: Vec<C64> = (0..d).map(|_| complex_gaussian(rng)).collect();
    let n = v.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
    v.into_iter().map(|z| z / n).collect()
}

/// Random density operator of the given rank (induced measure).
pub fn random_density(d: usize, rank: usize, rng: &mut Rng) -> CMatrix {
    let g = CMatrix::from_fn(d, rank.max(1), |_, _| complex_gaussian(rng));
    let m = &g * &g.adjoint();
    let tr = m.trace().re;
    m.scale(1.0 / tr)
}

pub fn random_hermitian(d: usize, rng: &mut Rng) -> CMatrix {
    let g = CMatrix::from_fn(d, d, |_, _| complex_gaussian(rng));
    g.hermitian_part()
}

/// Result of matching two purifications on shared subsystems.
#[derive(Clone, Debug)]
pub struct UhlmannIsometry {
    /// Maps the complement of `psi_a` into the complement of `psi_b`.
    pub isometry: CMatrix,
    /// |<psi_b| (I ⊗ V) |psi_a>|.
    pub overlap: f64,
    pub complement_dims_a: Vec<usize>,
    pub complement_dims_b: Vec<usize>,
    /// False when the target complement is smaller than the source one, in
    /// which case `isometry` is only a partial isometry.
    pub is_isometry: bool,
}

/// Singular values of the cross-overlap operator below this are treated as
/// zero and completed arbitrarily.
pub const UHLMANN_RANK_CUT: f64 = 1e-9;

/// Finds V on the complement of `shared_a` maximizing |<psi_b|(I⊗V)|psi_a>|.
/// `shared_a[k]` in `psi_a` is matched with `shared_b[k]` in `psi_b`.
pub fn uhlmann_isometry(
    psi_a: &[C64],
    dims_a: &[usize],
    shared_a: &[usize],
    psi_b: &[C64],
    dims_b: &[usize],
    shared_b: &[usize],
) -> Result<UhlmannIsometry> {
    if shared_a.len() != shared_b.len() {
        return Err(Error::Layout("shared subsystem lists differ in length".into()));
    }
    check_subsystems(dims_a, shared_a)?;
    check_subsystems(dims_b, shared_b)?;
    for (&i, &j) in shared_a.iter().zip(shared_b) {
        if dims_a[i] != dims_b[j] {
            return Err(Error::Layout(format!("shared dims differ: {} vs {}", dims_a[i], dims_b[j])));
        }
    }
    if psi_a.len() != dims_a.iter().product::<usize>() || psi_b.len() != dims_b.iter().product::<usize>() {
        return Err(Error::Layout("vector length does not match dims".into()));
    }
    let comp_a: Vec<usize> = (0..dims_a.len()).filter(|i| !shared_a.contains(i)).collect();
    let comp_b: Vec<usize> = (0..dims_b.len()).filter(|i| !shared_b.contains(i)).collect();
    let order_a: Vec<usize> = shared_a.iter().chain(&comp_a).copied().collect();
    let order_b: Vec<usize> = shared_b.iter().chain(&comp_b).copied().collect();
    let va = permute_vector(psi_a, dims_a, &order_a)?;
    let vb = permute_vector(psi_b, dims_b, &order_b)?;
    let ds: usize = shared_a.iter().map(|&i| dims_a[i]).product();
    let ea: usize = comp_a.iter().map(|&i| dims_a[i]).product();
    let eb: usize = comp_b.iter().map(|&i| dims_b[i]).product();
    // psi_a = sum A[s,e] |s>|e>; overlap = Tr(V K) with K = A^T conj(B).
    let a = CMatrix::from_vec(ds, ea, va)?;
    let b = CMatrix::from_vec(ds, eb, vb)?;
    let k = &a.transpose() * &b.conj();
    let dec = svd(&k);
    let rank_cut = UHLMANN_RANK_CUT;
    let r = dec.s.iter().filter(|&&x| x > rank_cut).count();
    // K = U S W†: U is ea x kk, W is eb x kk.
    // After the top-r directions, prefer the support of the source
    // complement so that V keeps psi_a's norm whenever eb allows it.
    let supp = svd(&a.transpose());
    let smax = supp.s.first().copied().unwrap_or(0.0);
    let mut cols: Vec<Vec<C64>> = (0..r).map(|j| dec.u.column_vec(j)).collect();
    for (j, &sv) in supp.s.iter().enumerate() {
        if sv <= rank_cut * smax.max(1.0) || cols.len() >= ea.min(eb) {
            break;
        }
        let mut x = supp.u.column_vec(j);
        for _pass in 0..2 {
            for c in &cols {
                let ov = vdot(c, &x);
                for (xi, ci) in x.iter_mut().zip(c) {
                    *xi -= ov * ci;
                }
            }
        }
        let nrm = vec_norm(&x);
        if nrm > 1e-8 {
            cols.push(x.iter().map(|z| z / nrm).collect());
        }
    }
    let k0 = cols.len();
    let seeded = CMatrix::from_fn(ea, k0, |i, j| cols[j][i]);
    let u = complete_columns(&seeded, k0, ea);
    let w = complete_columns(&dec.v, r, ea.min(eb));
    let cols = ea.min(eb);
    let mut v = CMatrix::zeros(eb, ea);
    for c in 0..cols {
        for i in 0..eb {
            let wi = w[(i, c)];
            if wi.re == 0.0 && wi.im == 0.0 {
                continue;
            }
            for j in 0..ea {
                v[(i, j)] += wi * u[(j, c)].conj();
            }
        }
    }
    let overlap = dec.s.iter().take(r).sum();
    Ok(UhlmannIsometry {
        isometry: v,
        overlap,
        complement_dims_a: comp_a.iter().map(|&i| dims_a[i]).collect(),
        complement_dims_b: comp_b.iter().map(|&i| dims_b[i]).collect(),
        is_isometry: eb >= ea,
    })
}

/// Applies `op` to the listed subsystems of a vector; the acted-on factors
/// are replaced in place by the operator's output factor of dimension
/// `op.rows()` (appearing where the first listed subsystem was).
pub fn apply_on_subsystems(psi: &[C64], dims: &[usize], targets: &[usize], op: &CMatrix) -> Result<(Vec<C64>, Vec<usize>)> {
    check_subsystems(dims, targets)?;
    let din: usize = targets.iter().map(|&i| dims[i]).product();
    if op.cols != din {
        return Err(Error::Layout(format!("operator acts on dimension {}, subsystems have {din}", op.cols)));
    }
    let rest: Vec<usize> = (0..dims.len()).filter(|i| !targets.contains(i)).collect();
    let to = sub_offsets(dims, targets);
    let ro = sub_offsets(dims, &rest);
    let dout = op.rows;
    // Output layout: rest subsystems in order, with the new factor inserted
    // at the position of the first target.
    let first = *targets.iter().min().unwrap_or(&0);
    let before: Vec<usize> = rest.iter().copied().filter(|&i| i < first).collect();
    let after: Vec<usize> = rest.iter().copied().filter(|&i| i > first).collect();
    let mut new_dims: Vec<usize> = before.iter().map(|&i| dims[i]).collect();
    new_dims.push(dout);
    new_dims.extend(after.iter().map(|&i| dims[i]));
    let db: usize = before.iter().map(|&i| dims[i]).product();
    let da: usize = after.iter().map(|&i| dims[i]).product();
    let mut out = vec![C64::new(0.0, 0.0); db * dout * da];
    // ro enumerates (before, after) row-major since rest is sorted.
    for (ri, &roff) in ro.iter().enumerate() {
        let (bi, ai) = (ri / da, ri % da);
        let input: Vec<C64> = to.iter().map(|&t| psi[roff + t]).collect();
        let res = op.apply(&input);
        for (o, val) in res.into_iter().enumerate() {
            out[(bi * dout + o) * da + ai] = val;
        }
    }
    Ok((out, new_dims))
}

pub fn vec_norm(v: &[C64]) -> f64 {
    v.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
}

pub fn vdot(a: &[C64], b: &[C64]) -> C64 {
    a.iter().zip(b).map(|(x, y)| x.conj() * y).sum()
}

/// Completely positive map stored as a Stinespring operator
/// V : in → out ⊗ env, with the environment as the last factor.
///
/// Trace-preserving maps have V†V = I; trace non-increasing ones only need
/// V†V ≤ I.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Channel {
    pub in_dims: Vec<usize>,
    pub out_dims: Vec<usize>,
    pub env_dim: usize,
    pub stinespring: CMatrix,
}

impl Channel {
    pub fn new(in_dims: Vec<usize>, out_dims: Vec<usize>, env_dim: usize, v: CMatrix) -> Result<Self> {
        let din: usize = in_dims.iter().product();
        let dout: usize = out_dims.iter().product();
        if v.cols != din || v.rows != dout * env_dim || din == 0 || dout == 0 || env_dim == 0 {
            return Err(Error::Shape(format!(
                "Stinespring operator is {}x{}, expected {}x{din}",
                v.rows,
                v.cols,
                dout * env_dim
            )));
        }
        let ch = Channel { in_dims, out_dims, env_dim, stinespring: v };
        let g = &ch.stinespring.adjoint() * &ch.stinespring;
        let top = hermitian_eig(&g)?.values[0];
        if top > 1.0 + 1e-9 {
            return Err(Error::Validation(format!("map increases trace (largest eigenvalue of V†V is {top})")));
        }
        Ok(ch)
    }

    /// Stacks Kraus operators K_k (out x in) into V = Σ_k K_k ⊗ |k⟩.
    pub fn from_kraus(in_dims: Vec<usize>, out_dims: Vec<usize>, kraus: &[CMatrix]) -> Result<Self> {
        let din: usize = in_dims.iter().product();
        let dout: usize = out_dims.iter().product();
        let n = kraus.len().max(1);
        let mut v = CMatrix::zeros(dout * n, din);
        for (k, op) in kraus.iter().enumerate() {
            if op.rows != dout || op.cols != din {
                return Err(Error::Shape(format!("Kraus operator {k} is {}x{}, expected {dout}x{din}", op.rows, op.cols)));
            }
            for i in 0..dout {
                for j in 0..din {
                    v[(i * n + k, j)] = op[(i, j)];
                }
            }
        }
        Channel::new(in_dims, out_dims, n, v)
    }

    pub fn identity(dims: Vec<usize>) -> Self {
        let d: usize = dims.iter().product();
        Channel { in_dims: dims.clone(), out_dims: dims, env_dim: 1, stinespring: CMatrix::identity(d) }
    }

    /// Traces out every input factor not listed in `keep` (kept factors keep
    /// their order).
    pub fn partial_trace(in_dims: Vec<usize>, keep: &[usize]) -> Result<Self> {
        check_subsystems(&in_dims, keep)?;
        let traced: Vec<usize> = (0..in_dims.len()).filter(|i| !keep.contains(i)).collect();
        let order: Vec<usize> = keep.iter().chain(&traced).copied().collect();
        let d: usize = in_dims.iter().product();
        // The permutation matrix sending |i⟩ to its reordered index.
        let mut v = CMatrix::zeros(d, d);
        for j in 0..d {
            let mut e = vec![C64::new(0.0, 0.0); d];
            e[j] = C64::new(1.0, 0.0);
            let p = permute_vector(&e, &in_dims, &order)?;
            for (i, z) in p.into_iter().enumerate() {
                if z.re != 0.0 {
                    v[(i, j)] = z;
                }
            }
        }
        let out_dims: Vec<usize> = keep.iter().map(|&i| in_dims[i]).collect();
        let env: usize = traced.iter().map(|&i| in_dims[i]).product();
        Ok(Channel { in_dims, out_dims, env_dim: env, stinespring: v })
    }

    pub fn in_dim(&self) -> usize {
        self.in_dims.iter().product()
    }

    pub fn out_dim(&self) -> usize {
        self.out_dims.iter().product()
    }

    pub fn is_trace_preserving(&self, tol: f64) -> bool {
        let g = &self.stinespring.adjoint() * &self.stinespring;
        (&g - &CMatrix::identity(self.in_dim())).max_abs() <= tol
    }

    pub fn kraus(&self) -> Vec<CMatrix> {
        let (dout, din, n) = (self.out_dim(), self.in_dim(), self.env_dim);
        (0..n)
            .map(|k| CMatrix::from_fn(dout, din, |i, j| self.stinespring[(i * n + k, j)]))
            .collect()
    }

    /// The map onto the environment, with the output traced instead.
    pub fn complementary(&self) -> Channel {
        let (dout, din, n) = (self.out_dim(), self.in_dim(), self.env_dim);
        let v = CMatrix::from_fn(n * dout, din, |r, j| {
            let (k, i) = (r / dout, r % dout);
            self.stinespring[(i * n + k, j)]
        });
        Channel { in_dims: self.in_dims.clone(), out_dims: vec![n], env_dim: dout, stinespring: v }
    }

    /// Output density operator for an input operator on the full input.
    pub fn apply(&self, rho: &CMatrix) -> Result<CMatrix> {
        if rho.rows != self.in_dim() || !rho.is_square() {
            return Err(Error::Shape(format!("input is {}x{}, channel takes {}", rho.rows, rho.cols, self.in_dim())));
        }
        let big = &(&self.stinespring * rho) * &self.stinespring.adjoint();
        partial_trace_dims(&big, &[self.out_dim(), self.env_dim], &[0])
    }

    /// Applies V to the listed factors of a vector. The targets are replaced
    /// by the output factors (at the position of the first target) and the
    /// environment is appended as a new last factor.
    pub fn apply_vector(&self, psi: &[C64], dims: &[usize], targets: &[usize]) -> Result<(Vec<C64>, Vec<usize>)> {
        let tdims: Vec<usize> = targets.iter().map(|&t| dims.get(t).copied().unwrap_or(0)).collect();
        if tdims != self.in_dims {
            return Err(Error::Layout(format!("channel input dims {:?} do not match targets {:?}", self.in_dims, tdims)));
        }
        let (v, nd) = apply_on_subsystems(psi, dims, targets, &self.stinespring)?;
        let pos = *targets.iter().min().expect("nonempty targets");
        let mut split: Vec<usize> = nd[..pos].to_vec();
        split.extend(&self.out_dims);
        split.push(self.env_dim);
        split.extend(&nd[pos + 1..]);
        let env_at = pos + self.out_dims.len();
        let mut order: Vec<usize> = (0..split.len()).filter(|&i| i != env_at).collect();
        order.push(env_at);
        let out = permute_vector(&v, &split, &order)?;
        let new_dims: Vec<usize> = order.iter().map(|&i| split[i]).collect();
        Ok((out, new_dims))
    }

    /// Choi state (id ⊗ T)(Φ) on in' ⊗ out, with Φ normalized.
    pub fn choi(&self) -> Result<CMatrix> {
        let din = self.in_dim();
        let dims = [din, din];
        let mut phi = vec![C64::new(0.0, 0.0); din * din];
        let s = 1.0 / (din as f64).sqrt();
        for i in 0..din {
            phi[i * din + i] = C64::new(s, 0.0);
        }
        let (v, nd) = self.apply_vector_flat(&phi, &dims, 1)?;
        // nd = [din, dout, env]
        reduce_pure(&v, &nd, &[0, 1])
    }

    fn apply_vector_flat(&self, psi: &[C64], dims: &[usize], target: usize) -> Result<(Vec<C64>, Vec<usize>)> {
        let (v, mut nd) = apply_on_subsystems(psi, dims, &[target], &self.stinespring)?;
        let d = nd[target];
        nd[target] = self.out_dim();
        nd.insert(target + 1, d / self.out_dim());
        Ok((v, nd))
    }

    /// Sequential composition: `self` first, then `next`.
    pub fn then(&self, next: &Channel) -> Result<Channel> {
        if self.out_dim() != next.in_dim() {
            return Err(Error::Shape(format!("cannot compose output {} with input {}", self.out_dim(), next.in_dim())));
        }
        let mut ks = Vec::new();
        for a in self.kraus() {
            for b in next.kraus() {
                ks.push(&b * &a);
            }
        }
        Channel::from_kraus(self.in_dims.clone(), next.out_dims.clone(), &ks)
    }
}
