//! Small dense semidefinite programs over complex Hermitian matrices.
//!
//! Problems are stated with matrix variables and affine constraints given as
//! closures; the closures are probed on a real basis of each variable to get
//! the coefficient operators, so any linear map (partial traces, Kronecker
//! embeddings, block assembly) can be used directly.
//!
//! Internally the problem becomes
//!
//! ```text
//!   minimize  cᵀy   subject to  F₀ + Σᵢ yᵢ Fᵢ ⪰ 0   (block diagonal)
//! ```
//!
//! after eliminating equality constraints, and is solved by an infeasible
//! primal-dual path-following method with Nesterov-Todd scaling and a
//! Mehrotra predictor-corrector step. The Schur complement system is
//! factored by dense Cholesky.

use crate::numkit::{hermitian_eig, herm_from_spectrum, CMatrix, C64};
use crate::{Error, Result};

pub const DEFAULT_TOL: f64 = 1e-7;
pub const MAX_ITER: usize = 200;

/// Iteration limit; `HSRD_SDP_MAX_ITER` overrides [`MAX_ITER`].
pub fn max_iter() -> usize {
    std::env::var("HSRD_SDP_MAX_ITER")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&v| v > 0)
        .unwrap_or(MAX_ITER)
}
/// Cap on the summed dimension of all semidefinite blocks.
pub const MAX_BLOCK_DIM: usize = 128;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct VarId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VarKind {
    /// Free Hermitian matrix.
    Hermitian,
    /// Hermitian matrix constrained to be PSD.
    Psd,
    /// Free complex rectangular matrix.
    Complex,
}

#[derive(Clone, Debug)]
pub struct VarSpec {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub kind: VarKind,
}

impl VarSpec {
    fn nparams(&self) -> usize {
        match self.kind {
            VarKind::Hermitian | VarKind::Psd => self.rows * self.rows,
            VarKind::Complex => 2 * self.rows * self.cols,
        }
    }

    /// k-th real basis element.
    fn basis(&self, k: usize) -> CMatrix {
        let mut m = CMatrix::zeros(self.rows, self.cols);
        match self.kind {
            VarKind::Hermitian | VarKind::Psd => {
                let n = self.rows;
                if k < n {
                    m[(k, k)] = C64::new(1.0, 0.0);
                } else {
                    let off = k - n;
                    let pair = off / 2;
                    let (i, j) = upper_pair(n, pair);
                    if off % 2 == 0 {
                        m[(i, j)] = C64::new(1.0, 0.0);
                        m[(j, i)] = C64::new(1.0, 0.0);
                    } else {
                        m[(i, j)] = C64::new(0.0, 1.0);
                        m[(j, i)] = C64::new(0.0, -1.0);
                    }
                }
            }
            VarKind::Complex => {
                let cell = k / 2;
                let (i, j) = (cell / self.cols, cell % self.cols);
                m[(i, j)] = if k % 2 == 0 { C64::new(1.0, 0.0) } else { C64::new(0.0, 1.0) };
            }
        }
        m
    }

    /// Rebuilds the matrix from its parameters.
    fn assemble(&self, y: &[f64]) -> CMatrix {
        let mut m = CMatrix::zeros(self.rows, self.cols);
        for (k, &v) in y.iter().enumerate() {
            if v != 0.0 {
                let b = self.basis(k);
                m = &m + &b.scale(v);
            }
        }
        m
    }
}

/// (i, j) with i < j for the p-th strictly upper entry, row-major.
fn upper_pair(n: usize, p: usize) -> (usize, usize) {
    let mut rem = p;
    for i in 0..n {
        let len = n - i - 1;
        if rem < len {
            return (i, i + 1 + rem);
        }
        rem -= len;
    }
    unreachable!("pair index out of range")
}

pub type AffineMap = Box<dyn Fn(&[CMatrix]) -> CMatrix + Send + Sync>;
pub type LinearForm = Box<dyn Fn(&[CMatrix]) -> f64 + Send + Sync>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Relation {
    /// map(X) ⪰ 0.
    Psd,
    /// map(X) = 0.
    Zero,
}

pub struct Constraint {
    pub name: String,
    pub relation: Relation,
    map: AffineMap,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Sense {
    Minimize,
    Maximize,
}

/// Block semidefinite program with matrix variables.
pub struct SdpProblem {
    vars: Vec<VarSpec>,
    constraints: Vec<Constraint>,
    objective: Option<(Sense, LinearForm)>,
}

impl Default for SdpProblem {
    fn default() -> Self {
        Self::new()
    }
}

impl SdpProblem {
    pub fn new() -> Self {
        SdpProblem { vars: Vec::new(), constraints: Vec::new(), objective: None }
    }

    fn add_var(&mut self, name: &str, rows: usize, cols: usize, kind: VarKind) -> VarId {
        self.vars.push(VarSpec { name: name.to_string(), rows, cols, kind });
        VarId(self.vars.len() - 1)
    }

    pub fn hermitian(&mut self, name: &str, n: usize) -> VarId {
        self.add_var(name, n, n, VarKind::Hermitian)
    }

    pub fn psd(&mut self, name: &str, n: usize) -> VarId {
        self.add_var(name, n, n, VarKind::Psd)
    }

    pub fn complex(&mut self, name: &str, rows: usize, cols: usize) -> VarId {
        self.add_var(name, rows, cols, VarKind::Complex)
    }

    /// Free real scalar, stored as a 1x1 Hermitian matrix.
    pub fn scalar(&mut self, name: &str) -> VarId {
        self.add_var(name, 1, 1, VarKind::Hermitian)
    }

    pub fn vars(&self) -> &[VarSpec] {
        &self.vars
    }

    /// Requires `map(X) ⪰ 0`; `map` must be affine and Hermitian-valued.
    pub fn require_psd(&mut self, name: &str, map: impl Fn(&[CMatrix]) -> CMatrix + Send + Sync + 'static) {
        self.constraints.push(Constraint { name: name.to_string(), relation: Relation::Psd, map: Box::new(map) });
    }

    /// Requires `map(X) = 0`; `map` must be affine and Hermitian-valued.
    pub fn require_zero(&mut self, name: &str, map: impl Fn(&[CMatrix]) -> CMatrix + Send + Sync + 'static) {
        self.constraints.push(Constraint { name: name.to_string(), relation: Relation::Zero, map: Box::new(map) });
    }

    pub fn minimize(&mut self, f: impl Fn(&[CMatrix]) -> f64 + Send + Sync + 'static) {
        self.objective = Some((Sense::Minimize, Box::new(f)));
    }

    pub fn maximize(&mut self, f: impl Fn(&[CMatrix]) -> f64 + Send + Sync + 'static) {
        self.objective = Some((Sense::Maximize, Box::new(f)));
    }

    pub fn constraints(&self) -> &[Constraint] {
        &self.constraints
    }

    /// Short text description used in error reports.
    pub fn dump(&self) -> String {
        let vars: Vec<String> = self.vars.iter().map(|v| format!("{}:{}x{}:{:?}", v.name, v.rows, v.cols, v.kind)).collect();
        let cons: Vec<String> = self.constraints.iter().map(|c| format!("{}:{:?}", c.name, c.relation)).collect();
        format!("vars [{}] constraints [{}]", vars.join(", "), cons.join(", "))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SdpStatus {
    Optimal,
    Infeasible,
    MaxIterations,
}

#[derive(Clone, Debug)]
pub struct SdpSolution {
    /// Objective value in the user's sense.
    pub value: f64,
    /// Variable values, indexed by [`VarId`].
    pub primal: Vec<CMatrix>,
    pub status: SdpStatus,
    /// Relative duality gap |p − d| / (1 + |p| + |d|).
    pub gap: f64,
    /// Relative residual of the multiplier equations.
    pub primal_residual: f64,
    /// Relative residual of the conic constraints.
    pub dual_residual: f64,
    pub iterations: usize,
    /// Multipliers of the semidefinite constraints, in constraint order.
    pub multipliers: Vec<CMatrix>,
}

impl SdpSolution {
    pub fn var(&self, v: VarId) -> &CMatrix {
        &self.primal[v.0]
    }
}

// ---------------------------------------------------------------------------
// Compilation to the LMI standard form
// ---------------------------------------------------------------------------

type Sparse = Vec<(usize, usize, C64)>;

struct Lmi {
    dims: Vec<usize>,
    /// Constant term per block.
    f0: Vec<CMatrix>,
    /// For each parameter: list of (block, entries).
    fi: Vec<Vec<(usize, Sparse)>>,
    c: Vec<f64>,
    /// Objective offset from eliminated equalities.
    c0: f64,
}

struct Compiled {
    lmi: Lmi,
    /// Full parameter vector = y0 + N z.
    y0: Vec<f64>,
    null: Vec<Vec<f64>>,
    psd_constraints: Vec<usize>,
}

fn param_offsets(vars: &[VarSpec]) -> (Vec<usize>, usize) {
    let mut offs = Vec::with_capacity(vars.len());
    let mut m = 0;
    for v in vars {
        offs.push(m);
        m += v.nparams();
    }
    (offs, m)
}

fn hermitian_coords(m: &CMatrix) -> Vec<f64> {
    let n = m.rows();
    let mut out = Vec::with_capacity(n * n);
    for i in 0..n {
        out.push(m[(i, i)].re);
    }
    for i in 0..n {
        for j in (i + 1)..n {
            out.push(m[(i, j)].re);
            out.push(m[(i, j)].im);
        }
    }
    out
}

fn sparsify(m: &CMatrix) -> Sparse {
    let mut s = Vec::new();
    for i in 0..m.rows() {
        for j in 0..m.cols() {
            let z = m[(i, j)];
            if z.re != 0.0 || z.im != 0.0 {
                s.push((i, j, z));
            }
        }
    }
    s
}

fn compile(p: &SdpProblem) -> Result<Compiled> {
    let (sense, obj) = p.objective.as_ref().ok_or_else(|| Error::Domain("problem has no objective".into()))?;
    let sign = if *sense == Sense::Minimize { 1.0 } else { -1.0 };
    let (offs, m) = param_offsets(&p.vars);
    let zeros: Vec<CMatrix> = p.vars.iter().map(|v| CMatrix::zeros(v.rows, v.cols)).collect();

    // Implicit PSD constraints for Psd variables come first.
    struct Raw {
        f0: CMatrix,
        cols: Vec<CMatrix>,
        relation: Relation,
    }
    let probe = |f: &dyn Fn(&[CMatrix]) -> CMatrix, name: &str, relation: Relation| -> Result<Raw> {
        let f0 = f(&zeros);
        if !f0.is_square() {
            return Err(Error::Shape(format!("constraint {name} is not square")));
        }
        let tol = 1e-12 * f0.max_abs().max(1.0);
        if !f0.is_hermitian(tol) {
            return Err(Error::Shape(format!("constraint {name} is not Hermitian")));
        }
        let mut cols = Vec::with_capacity(m);
        let mut vals = zeros.clone();
        for (vi, v) in p.vars.iter().enumerate() {
            for k in 0..v.nparams() {
                vals[vi] = v.basis(k);
                let fk = &f(&vals) - &f0;
                if !fk.is_hermitian(1e-12 * fk.max_abs().max(1.0)) {
                    return Err(Error::Shape(format!("constraint {name} is not Hermitian in {}", v.name)));
                }
                cols.push(fk);
            }
            vals[vi] = zeros[vi].clone();
        }
        Ok(Raw { f0, cols, relation })
    };
    let mut raws = Vec::new();
    for (vi, v) in p.vars.iter().enumerate() {
        if v.kind == VarKind::Psd {
            let f = move |x: &[CMatrix]| x[vi].clone();
            raws.push(probe(&f, &format!("{} >= 0", v.name), Relation::Psd)?);
        }
    }
    let n_implicit = raws.len();
    for c in &p.constraints {
        raws.push(probe(&*c.map, &c.name, c.relation)?);
    }

    // Objective coefficients.
    let o0 = obj(&zeros);
    let mut cvec = vec![0.0; m];
    {
        let mut vals = zeros.clone();
        for (vi, v) in p.vars.iter().enumerate() {
            for k in 0..v.nparams() {
                vals[vi] = v.basis(k);
                cvec[offs[vi] + k] = sign * (obj(&vals) - o0);
            }
            vals[vi] = zeros[vi].clone();
        }
    }

    // Equalities: E y = g, eliminated through a null-space basis.
    let mut erows: Vec<Vec<f64>> = Vec::new();
    let mut g: Vec<f64> = Vec::new();
    for r in raws.iter().filter(|r| r.relation == Relation::Zero) {
        let base = hermitian_coords(&r.f0);
        let cols: Vec<Vec<f64>> = r.cols.iter().map(hermitian_coords).collect();
        for (row, b) in base.iter().enumerate() {
            erows.push(cols.iter().map(|c| c[row]).collect());
            g.push(-b);
        }
    }
    let (y0, null) = if erows.is_empty() {
        let null = (0..m).map(|i| (0..m).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect();
        (vec![0.0; m], null)
    } else {
        match affine_solution_space(&erows, &g, m) {
            Some(s) => s,
            None => return Err(Error::Domain("INFEASIBLE_EQUALITIES".into())),
        }
    };
    let nz = null.len();

    let mut dims = Vec::new();
    let mut f0s = Vec::new();
    let mut fi: Vec<Vec<(usize, Sparse)>> = vec![Vec::new(); nz];
    let mut psd_constraints = Vec::new();
    for (ri, r) in raws.iter().enumerate() {
        if r.relation != Relation::Psd {
            continue;
        }
        if ri >= n_implicit {
            psd_constraints.push(ri - n_implicit);
        }
        let b = dims.len();
        dims.push(r.f0.rows());
        let mut f0 = r.f0.clone();
        for (k, &yk) in y0.iter().enumerate() {
            if yk != 0.0 {
                f0 = &f0 + &r.cols[k].scale(yk);
            }
        }
        f0s.push(f0.hermitian_part());
        for (j, nv) in null.iter().enumerate() {
            let mut acc = CMatrix::zeros(r.f0.rows(), r.f0.rows());
            for (k, &w) in nv.iter().enumerate() {
                if w != 0.0 {
                    acc = &acc + &r.cols[k].scale(w);
                }
            }
            let s = sparsify(&acc);
            if !s.is_empty() {
                fi[j].push((b, s));
            }
        }
    }
    let total: usize = dims.iter().sum();
    if total > MAX_BLOCK_DIM {
        return Err(Error::Dimension(format!("semidefinite blocks total {total} > {MAX_BLOCK_DIM}")));
    }
    let c: Vec<f64> = null.iter().map(|nv| nv.iter().zip(&cvec).map(|(a, b)| a * b).sum()).collect();
    let c0 = y0.iter().zip(&cvec).map(|(a, b)| a * b).sum::<f64>() + sign * o0;
    Ok(Compiled { lmi: Lmi { dims, f0: f0s, fi, c, c0 }, y0, null, psd_constraints })
}

/// Solves E y = g by Gauss-Jordan elimination; returns a particular
/// solution and an orthogonal basis of the null space, or None when the
/// system is inconsistent.
fn affine_solution_space(e: &[Vec<f64>], g: &[f64], m: usize) -> Option<(Vec<f64>, Vec<Vec<f64>>)> {
    let mut a: Vec<Vec<f64>> = e.iter().zip(g).map(|(r, &gi)| r.iter().copied().chain(std::iter::once(gi)).collect()).collect();
    let rows = a.len();
    let scale = a.iter().flat_map(|r| r.iter()).fold(0.0f64, |s, x| s.max(x.abs())).max(1.0);
    let tol = 1e-11 * scale;
    let mut pivots = Vec::new();
    let mut r = 0;
    for col in 0..m {
        if r == rows {
            break;
        }
        let (best, val) = (r..rows).map(|i| (i, a[i][col].abs())).fold((r, -1.0), |acc, x| if x.1 > acc.1 { x } else { acc });
        if val <= tol {
            continue;
        }
        a.swap(r, best);
        let piv = a[r][col];
        for x in a[r].iter_mut() {
            *x /= piv;
        }
        for i in 0..rows {
            if i != r && a[i][col] != 0.0 {
                let f = a[i][col];
                for k in 0..=m {
                    a[i][k] -= f * a[r][k];
                }
            }
        }
        pivots.push(col);
        r += 1;
    }
    for row in a.iter().skip(r) {
        if row[m].abs() > 1e-9 * scale {
            return None;
        }
    }
    let mut y0 = vec![0.0; m];
    for (i, &pc) in pivots.iter().enumerate() {
        y0[pc] = a[i][m];
    }
    let free: Vec<usize> = (0..m).filter(|c| !pivots.contains(c)).collect();
    let mut null: Vec<Vec<f64>> = Vec::new();
    for &fc in &free {
        let mut v = vec![0.0; m];
        v[fc] = 1.0;
        for (i, &pc) in pivots.iter().enumerate() {
            v[pc] = -a[i][fc];
        }
        // Orthonormalize for conditioning of the reduced problem.
        for u in &null {
            let d: f64 = u.iter().zip(&v).map(|(x, y)| x * y).sum();
            for (vi, ui) in v.iter_mut().zip(u) {
                *vi -= d * ui;
            }
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-12 {
            null.push(v.iter().map(|x| x / n).collect());
        }
    }
    Some((y0, null))
}

// ---------------------------------------------------------------------------
// Interior-point iteration
// ---------------------------------------------------------------------------

/// Solves the problem to relative gap and residuals below `tol`.
pub fn solve(p: &SdpProblem, tol: f64) -> Result<SdpSolution> {
    if !(tol >= 1e-9) {
        return Err(Error::Domain(format!("tolerance {tol} below 1e-9")));
    }
    let comp = match compile(p) {
        Ok(c) => c,
        Err(Error::Domain(msg)) if msg == "INFEASIBLE_EQUALITIES" => {
            return Ok(SdpSolution {
                value: f64::NAN,
                primal: p.vars.iter().map(|v| CMatrix::zeros(v.rows, v.cols)).collect(),
                status: SdpStatus::Infeasible,
                gap: f64::INFINITY,
                primal_residual: f64::INFINITY,
                dual_residual: f64::INFINITY,
                iterations: 0,
                multipliers: Vec::new(),
            })
        }
        Err(e) => return Err(e),
    };
    let ipm = run_ipm(&comp.lmi, tol);
    // Map back to user variables.
    let m_full = comp.y0.len();
    let mut yfull = comp.y0.clone();
    for (j, nv) in comp.null.iter().enumerate() {
        for k in 0..m_full {
            yfull[k] += nv[k] * ipm.y[j];
        }
    }
    let (offs, _) = param_offsets(&p.vars);
    let primal: Vec<CMatrix> = p.vars.iter().enumerate().map(|(vi, v)| v.assemble(&yfull[offs[vi]..offs[vi] + v.nparams()])).collect();
    let sign = match p.objective.as_ref().map(|o| o.0) {
        Some(Sense::Maximize) => -1.0,
        _ => 1.0,
    };
    let internal = ipm.y.iter().zip(&comp.lmi.c).map(|(a, b)| a * b).sum::<f64>() + comp.lmi.c0;
    let n_implicit = comp.lmi.dims.len() - comp.psd_constraints.len();
    let multipliers = ipm.x.into_iter().skip(n_implicit).collect();
    Ok(SdpSolution {
        value: sign * internal,
        primal,
        status: ipm.status,
        gap: ipm.gap,
        primal_residual: ipm.pinf,
        dual_residual: ipm.dinf,
        iterations: ipm.iterations,
        multipliers,
    })
}

struct IpmResult {
    y: Vec<f64>,
    x: Vec<CMatrix>,
    status: SdpStatus,
    gap: f64,
    pinf: f64,
    dinf: f64,
    iterations: usize,
}

/// Per-block Nesterov-Todd scaling data.
struct Scaling {
    g: CMatrix,
    ginv: CMatrix,
    w: CMatrix,
    d: Vec<f64>,
}

fn nt_scaling(x: &CMatrix, z: &CMatrix) -> Option<Scaling> {
    let ex = hermitian_eig(&x.hermitian_part()).ok()?;
    if ex.values.iter().any(|&v| !(v > 0.0)) {
        return None;
    }
    let xh = herm_from_spectrum(&ex.vectors, &ex.values.iter().map(|v| v.sqrt()).collect::<Vec<_>>());
    let xhi = herm_from_spectrum(&ex.vectors, &ex.values.iter().map(|v| 1.0 / v.sqrt()).collect::<Vec<_>>());
    let mid = (&(&xh * z) * &xh).hermitian_part();
    let em = hermitian_eig(&mid).ok()?;
    if em.values.iter().any(|&v| !(v > 0.0)) {
        return None;
    }
    let q = &em.vectors;
    let n = x.rows();
    let l14: Vec<f64> = em.values.iter().map(|v| v.powf(0.25)).collect();
    let g = CMatrix::from_fn(n, n, |i, j| {
        let mut acc = C64::new(0.0, 0.0);
        for k in 0..n {
            acc += xh[(i, k)] * q[(k, j)];
        }
        acc / l14[j]
    });
    let qa_xhi = &q.adjoint() * &xhi;
    let ginv = CMatrix::from_fn(n, n, |i, j| qa_xhi[(i, j)] * l14[i]);
    let w = (&g * &g.adjoint()).hermitian_part();
    let d = em.values.iter().map(|v| v.sqrt()).collect();
    Some(Scaling { g, ginv, w, d })
}

fn blocks_inner(a: &[CMatrix], b: &[CMatrix]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x.inner_re(y)).sum()
}

fn blocks_norm(a: &[CMatrix]) -> f64 {
    a.iter().map(|x| x.frobenius_norm().powi(2)).sum::<f64>().sqrt()
}

impl Lmi {
    /// Σ y_i F_i.
    fn apply(&self, y: &[f64]) -> Vec<CMatrix> {
        let mut out: Vec<CMatrix> = self.dims.iter().map(|&d| CMatrix::zeros(d, d)).collect();
        for (i, parts) in self.fi.iter().enumerate() {
            if y[i] == 0.0 {
                continue;
            }
            for (b, ents) in parts {
                for &(r, s, z) in ents {
                    out[*b][(r, s)] += z * y[i];
                }
            }
        }
        out
    }

    /// (⟨F_i, X⟩)_i.
    fn adjoint(&self, x: &[CMatrix]) -> Vec<f64> {
        self.fi
            .iter()
            .map(|parts| {
                let mut acc = 0.0;
                for (b, ents) in parts {
                    for &(r, s, z) in ents {
                        // Re Tr(F X) = Σ_rs Re(F_rs X_sr).
                        acc += (z * x[*b][(s, r)]).re;
                    }
                }
                acc
            })
            .collect()
    }
}

fn cholesky(a: &[f64], n: usize) -> Option<Vec<f64>> {
    let mut l = vec![0.0; n * n];
    for j in 0..n {
        let mut d = a[j * n + j];
        for k in 0..j {
            d -= l[j * n + k] * l[j * n + k];
        }
        if !(d > 0.0) {
            return None;
        }
        let dj = d.sqrt();
        l[j * n + j] = dj;
        for i in (j + 1)..n {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            l[i * n + j] = s / dj;
        }
    }
    Some(l)
}

fn chol_solve(l: &[f64], n: usize, b: &[f64]) -> Vec<f64> {
    let mut y = b.to_vec();
    for i in 0..n {
        let mut s = y[i];
        for k in 0..i {
            s -= l[i * n + k] * y[k];
        }
        y[i] = s / l[i * n + i];
    }
    for i in (0..n).rev() {
        let mut s = y[i];
        for k in (i + 1)..n {
            s -= l[k * n + i] * y[k];
        }
        y[i] = s / l[i * n + i];
    }
    y
}

/// Largest step in [0, ∞) keeping D + α Δ ⪰ 0 (D diagonal positive).
fn max_step(d: &[f64], delta: &CMatrix) -> f64 {
    let n = d.len();
    let s = CMatrix::from_fn(n, n, |i, j| delta[(i, j)] / (d[i] * d[j]).sqrt());
    match hermitian_eig(&s.hermitian_part()) {
        Ok(e) => {
            let lmin = *e.values.last().unwrap_or(&0.0);
            if lmin < 0.0 {
                -1.0 / lmin
            } else {
                f64::INFINITY
            }
        }
        Err(_) => 0.0,
    }
}

fn run_ipm(lmi: &Lmi, tol: f64) -> IpmResult {
    // Standard form: C = F0, A_i = −F_i, b = −c; primal X, dual (y, Z).
    let m = lmi.c.len();
    let nb = lmi.dims.len();
    let ntot: usize = lmi.dims.iter().sum();
    let b: Vec<f64> = lmi.c.iter().map(|v| -v).collect();
    let cnorm = blocks_norm(&lmi.f0);
    let bnorm = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    let anorm: Vec<f64> = lmi.fi.iter().map(|parts| parts.iter().flat_map(|(_, e)| e.iter().map(|t| t.2.norm_sqr())).sum::<f64>().sqrt()).collect();
    let amax = anorm.iter().fold(0.0f64, |a, &v| a.max(v));
    let sq = (ntot as f64).sqrt();
    let mut xi: f64 = 10.0f64.max(sq);
    for (i, &an) in anorm.iter().enumerate() {
        xi = xi.max((1.0 + b[i].abs()) / (1.0 + an));
    }
    let eta = 10.0f64.max(sq).max(amax).max(cnorm);

    let mut x: Vec<CMatrix> = lmi.dims.iter().map(|&d| CMatrix::identity(d).scale(xi)).collect();
    let mut z: Vec<CMatrix> = lmi.dims.iter().map(|&d| CMatrix::identity(d).scale(eta)).collect();
    let mut y = vec![0.0; m];

    // Block membership for Schur assembly.
    let mut by_block: Vec<Vec<(usize, usize)>> = vec![Vec::new(); nb];
    for (i, parts) in lmi.fi.iter().enumerate() {
        for (pi, (bk, _)) in parts.iter().enumerate() {
            by_block[*bk].push((i, pi));
        }
    }

    let mut best: Option<(f64, Vec<f64>, Vec<CMatrix>, f64, f64, f64)> = None;
    let mut status = SdpStatus::MaxIterations;
    let (mut gap, mut pinf, mut dinf) = (f64::INFINITY, f64::INFINITY, f64::INFINITY);
    let mut iterations = 0;
    let mut stall = 0;

    for it in 0..max_iter() {
        iterations = it;
        // Residuals. A(X)_i = −⟨F_i, X⟩; Aᵀy = −Σ y_i F_i.
        let ax: Vec<f64> = lmi.adjoint(&x).iter().map(|v| -v).collect();
        let rp: Vec<f64> = b.iter().zip(&ax).map(|(bi, ai)| bi - ai).collect();
        let fy = lmi.apply(&y);
        // Rd = C − Z − Aᵀy = F0 + Σ y F − Z.
        let rd: Vec<CMatrix> = (0..nb).map(|k| &(&lmi.f0[k] + &fy[k]) - &z[k]).collect();
        let pobj = blocks_inner(&lmi.f0, &x);
        let dobj: f64 = b.iter().zip(&y).map(|(a, c)| a * c).sum();
        let xz = blocks_inner(&x, &z);
        let mu = xz / ntot as f64;
        gap = (pobj - dobj).abs() / (1.0 + pobj.abs() + dobj.abs());
        let gap_xz = xz.abs() / (1.0 + pobj.abs() + dobj.abs());
        pinf = rp.iter().map(|v| v * v).sum::<f64>().sqrt() / (1.0 + bnorm);
        dinf = blocks_norm(&rd) / (1.0 + cnorm);
        let merit = gap.max(gap_xz).max(pinf).max(dinf);
        if best.as_ref().map(|bst| merit < bst.0).unwrap_or(true) {
            best = Some((merit, y.clone(), x.clone(), gap, pinf, dinf));
        }
        if gap <= tol && gap_xz <= tol && pinf <= tol && dinf <= tol {
            status = SdpStatus::Optimal;
            break;
        }
        // Infeasibility certificates along diverging iterates.
        let xnorm = blocks_norm(&x);
        if -pobj > 0.0 && xnorm > 1e6 {
            let scale = -pobj;
            let res = ax.iter().map(|v| v * v).sum::<f64>().sqrt() / scale;
            if res < 1e-8 * (1.0 + amax) {
                status = SdpStatus::Infeasible;
                break;
            }
        }
        let ynorm = y.iter().map(|v| v * v).sum::<f64>().sqrt();
        if dobj > 0.0 && ynorm > 1e6 {
            // Direction y with Σ y F ⪰ 0 and cᵀy < 0: objective unbounded.
            let fyn: Vec<CMatrix> = fy.iter().map(|f| f.scale(1.0 / dobj)).collect();
            let mut worst: f64 = 0.0;
            for f in &fyn {
                if let Ok(e) = hermitian_eig(&f.hermitian_part()) {
                    worst = worst.min(*e.values.last().unwrap_or(&0.0));
                }
            }
            if worst > -1e-8 {
                status = SdpStatus::Infeasible;
                break;
            }
        }

        let mut scal = Vec::with_capacity(nb);
        for k in 0..nb {
            match nt_scaling(&x[k], &z[k]) {
                Some(s) => scal.push(s),
                None => break,
            }
        }
        if scal.len() < nb {
            break;
        }

        // Schur complement M_ij = ⟨A_i, W A_j W⟩ = ⟨F_i, W F_j W⟩.
        let mut mm = vec![0.0; m * m];
        for (bk, members) in by_block.iter().enumerate() {
            let w = &scal[bk].w;
            let n = lmi.dims[bk];
            for &(j, pj) in members {
                let ents = &lmi.fi[j][pj].1;
                // P = W F_j W.
                let mut pmat = CMatrix::zeros(n, n);
                for &(r, s, zc) in ents {
                    for a in 0..n {
                        let war = w[(a, r)] * zc;
                        if war.re == 0.0 && war.im == 0.0 {
                            continue;
                        }
                        for c in 0..n {
                            pmat[(a, c)] += war * w[(s, c)];
                        }
                    }
                }
                for &(i, pi) in members {
                    if i < j {
                        continue;
                    }
                    let mut acc = 0.0;
                    for &(r, s, zc) in &lmi.fi[i][pi].1 {
                        acc += (zc * pmat[(s, r)]).re;
                    }
                    mm[i * m + j] += acc;
                }
            }
        }
        for i in 0..m {
            for j in 0..i {
                mm[j * m + i] = mm[i * m + j];
            }
        }
        let diag_max = (0..m).map(|i| mm[i * m + i]).fold(0.0f64, f64::max).max(1e-300);
        let mut l = None;
        let mut reg = 0.0;
        for _ in 0..8 {
            let mut mr = mm.clone();
            for i in 0..m {
                mr[i * m + i] += reg;
            }
            l = cholesky(&mr, m);
            if l.is_some() {
                break;
            }
            reg = if reg == 0.0 { 1e-14 * diag_max } else { reg * 100.0 };
        }
        let Some(l) = l else { break };

        // W Rd W, shared by both solves.
        let wrdw: Vec<CMatrix> = (0..nb).map(|k| &(&scal[k].w * &rd[k]) * &scal[k].w).collect();
        let a_wrdw: Vec<f64> = lmi.adjoint(&wrdw).iter().map(|v| -v).collect();

        let direction = |rc: &[CMatrix]| -> (Vec<f64>, Vec<CMatrix>, Vec<CMatrix>) {
            let a_rc: Vec<f64> = lmi.adjoint(rc).iter().map(|v| -v).collect();
            let rhs: Vec<f64> = (0..m).map(|i| rp[i] - a_rc[i] + a_wrdw[i]).collect();
            let dy = chol_solve(&l, m, &rhs);
            // ΔZ = Rd − AᵀΔy = Rd + Σ Δy F.
            let fdy = lmi.apply(&dy);
            let dz: Vec<CMatrix> = (0..nb).map(|k| (&rd[k] + &fdy[k]).hermitian_part()).collect();
            let dx: Vec<CMatrix> = (0..nb).map(|k| (&rc[k] - &(&(&scal[k].w * &dz[k]) * &scal[k].w)).hermitian_part()).collect();
            (dy, dx, dz)
        };
        let scaled = |dx: &[CMatrix], dz: &[CMatrix]| -> (Vec<CMatrix>, Vec<CMatrix>) {
            let sx = (0..nb).map(|k| (&(&scal[k].ginv * &dx[k]) * &scal[k].ginv.adjoint()).hermitian_part()).collect();
            let sz = (0..nb).map(|k| (&(&scal[k].g.adjoint() * &dz[k]) * &scal[k].g).hermitian_part()).collect();
            (sx, sz)
        };
        let steps = |sx: &[CMatrix], sz: &[CMatrix]| -> (f64, f64) {
            let mut ap = f64::INFINITY;
            let mut ad = f64::INFINITY;
            for k in 0..nb {
                ap = ap.min(max_step(&scal[k].d, &sx[k]));
                ad = ad.min(max_step(&scal[k].d, &sz[k]));
            }
            (ap, ad)
        };

        // Predictor.
        let rc_aff: Vec<CMatrix> = x.iter().map(|xk| xk.scale(-1.0)).collect();
        let (_dy_a, dx_a, dz_a) = direction(&rc_aff);
        let (sx_a, sz_a) = scaled(&dx_a, &dz_a);
        let (ap_a, ad_a) = steps(&sx_a, &sz_a);
        let ap_a = ap_a.min(1.0);
        let ad_a = ad_a.min(1.0);
        let xz_aff: f64 = (0..nb).map(|k| (&x[k] + &dx_a[k].scale(ap_a)).inner_re(&(&z[k] + &dz_a[k].scale(ad_a)))).sum();
        let ratio = (xz_aff / xz).clamp(0.0, 1.0);
        let sigma = if mu > 0.0 { ratio.powi(3).clamp(0.0, 1.0) } else { 0.0 };

        // Corrector: D T + T D = 2σμ I − 2D² − (ΔX̃ΔZ̃ + ΔZ̃ΔX̃).
        let mut rc = Vec::with_capacity(nb);
        for k in 0..nb {
            let d = &scal[k].d;
            let n = d.len();
            let cross = &(&sx_a[k] * &sz_a[k]) + &(&sz_a[k] * &sx_a[k]);
            let t = CMatrix::from_fn(n, n, |i, j| {
                let mut v = -cross[(i, j)];
                if i == j {
                    v += C64::new(2.0 * sigma * mu - 2.0 * d[i] * d[i], 0.0);
                }
                v / (d[i] + d[j])
            });
            rc.push((&(&scal[k].g * &t) * &scal[k].g.adjoint()).hermitian_part());
        }
        let (dy, dx, dz) = direction(&rc);
        let (sx, sz) = scaled(&dx, &dz);
        let (ap, ad) = steps(&sx, &sz);
        let tau = if it < 5 { 0.9 } else { 0.98 };
        let ap = (tau * ap).min(1.0);
        let ad = (tau * ad).min(1.0);
        if ap < 1e-10 && ad < 1e-10 {
            stall += 1;
            if stall > 3 {
                break;
            }
        } else {
            stall = 0;
        }
        for k in 0..nb {
            x[k] = (&x[k] + &dx[k].scale(ap)).hermitian_part();
            z[k] = (&z[k] + &dz[k].scale(ad)).hermitian_part();
        }
        for i in 0..m {
            y[i] += ad * dy[i];
        }
        iterations = it + 1;
    }
    if status == SdpStatus::MaxIterations {
        if let Some((_, by, bx, g, p, d)) = best {
            y = by;
            x = bx;
            gap = g;
            pinf = p;
            dinf = d;
        }
    }
    IpmResult { y, x, status, gap, pinf, dinf, iterations }
}

/// Fidelity ‖√ρ√σ‖₁ as the optimum of max Re Tr X over [[ρ, X], [X†, σ]] ⪰ 0.
pub fn fidelity_sdp(rho: &CMatrix, sigma: &CMatrix, tol: f64) -> Result<SdpSolution> {
    let n = rho.rows();
    let mut p = SdpProblem::new();
    let xv = p.complex("X", n, n);
    let (r, s) = (rho.clone(), sigma.clone());
    p.require_psd("fidelity block", move |v| {
        let mut m = CMatrix::zeros(2 * n, 2 * n);
        m.set_block(0, 0, &r);
        m.set_block(0, n, &v[xv.0]);
        m.set_block(n, 0, &v[xv.0].adjoint());
        m.set_block(n, n, &s);
        m
    });
    p.maximize(move |v| v[xv.0].trace().re);
    solve(&p, tol)
}
