//! One-shot and von Neumann conditional entropies.
//!
//! All logarithms are base 2. The min-entropy is the negative log of
//!
//! ```text
//!   min Tr Y   s.t.   I_A ⊗ Y ⪰ ρ_AB
//! ```
//!
//! and its smooth version optimizes jointly over sub-normalized `ρ̂` in the
//! purified-distance ball, with the fidelity constraint written as a 2x2 block
//! matrix inequality. Max-entropies are never computed directly: they are the
//! negated min-entropies of a purification, conditioned on the purifying
//! mirror system.

use serde::{Deserialize, Serialize};

use crate::numkit::{self, hermitian_eig, kron_raw, reduce_pure, zero_cut, CMatrix};
use crate::qstate::{HybridSource, LabeledState};
use crate::sdp::{self, SdpProblem, SdpStatus};
use crate::{Error, Result};

/// Solver tolerance for entropy programs.
pub const ENTROPY_TOL: f64 = 1e-8;

/// An iterate that stopped on the iteration cap is still accepted when all
/// its residuals are below this.
const ACCEPT_RESIDUAL: f64 = 1e-6;

fn check_eps(eps: f64) -> Result<()> {
    if !(0.0..1.0).contains(&eps) {
        return Err(Error::Domain(format!("smoothing parameter {eps} outside [0, 1)")));
    }
    Ok(())
}

fn check_partition(state: &LabeledState, a: &[&str], b: &[&str]) -> Result<()> {
    for n in a {
        if b.contains(n) {
            return Err(Error::Domain(format!("{n} is both target and conditioning")));
        }
    }
    state.layout.indices(a)?;
    state.layout.indices(b)?;
    Ok(())
}

/// ρ on A⊗B with the requested grouping, plus (d_A, d_B). An empty list
/// stands for a one-dimensional system.
fn grouped(state: &LabeledState, a: &[&str], b: &[&str]) -> Result<(CMatrix, usize, usize)> {
    check_partition(state, a, b)?;
    let names: Vec<&str> = a.iter().chain(b).copied().collect();
    if names.is_empty() {
        return Ok((CMatrix::from_real_diag(&[state.trace()]), 1, 1));
    }
    let red = state.reduce(&names)?;
    let da = state.layout.dim_of(a)?;
    let db = state.layout.dim_of(b)?;
    Ok((red.matrix, da, db))
}

fn accept(sol: &sdp::SdpSolution, p: &SdpProblem) -> Result<f64> {
    let ok = match sol.status {
        SdpStatus::Optimal => true,
        SdpStatus::MaxIterations => sol.gap.max(sol.primal_residual).max(sol.dual_residual) <= ACCEPT_RESIDUAL,
        SdpStatus::Infeasible => false,
    };
    if !ok {
        return Err(Error::Solver(format!(
            "status {:?}, gap {:.2e}, residuals {:.2e}/{:.2e}; problem: {}",
            sol.status,
            sol.gap,
            sol.primal_residual,
            sol.dual_residual,
            p.dump()
        )));
    }
    Ok(sol.value)
}

// ---------------------------------------------------------------------------
// Matrix-level programs
// ---------------------------------------------------------------------------

/// min Tr Y subject to I_A ⊗ Y ⪰ ρ, for ρ on A⊗B.
pub fn min_trace_dominating(rho: &CMatrix, da: usize, db: usize) -> Result<f64> {
    let mut p = SdpProblem::new();
    let y = p.hermitian("Y", db);
    let r = rho.clone();
    let ia = CMatrix::identity(da);
    p.require_psd("I⊗Y − ρ", move |v| &kron_raw(&ia, &v[y.0]) - &r);
    p.minimize(move |v| v[y.0].trace().re);
    let sol = sdp::solve(&p, ENTROPY_TOL)?;
    accept(&sol, &p)
}

/// H_min(A|B) of an operator on A⊗B.
pub fn hmin_matrix(rho: &CMatrix, da: usize, db: usize) -> Result<f64> {
    if rho.trace().re <= 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(-min_trace_dominating(rho, da, db)?.log2())
}

/// Smooth H_min^ε(A|B) of an operator on A⊗B.
pub fn smooth_hmin_matrix(rho: &CMatrix, da: usize, db: usize, eps: f64) -> Result<f64> {
    check_eps(eps)?;
    if eps == 0.0 {
        return hmin_matrix(rho, da, db);
    }
    let n = da * db;
    let tr = rho.trace().re;
    if tr <= 0.0 {
        return Ok(f64::INFINITY);
    }
    // Fidelity with ρ only sees ρ's support: write ρ = V Λ V†.
    let e = hermitian_eig(rho)?;
    let cut = zero_cut(&e.values);
    let kept: Vec<usize> = (0..n).filter(|&k| e.values[k] > cut).collect();
    let r = kept.len();
    let lam = CMatrix::from_real_diag(&kept.iter().map(|&k| e.values[k]).collect::<Vec<_>>());
    let vsup = CMatrix::from_fn(n, r, |i, j| e.vectors[(i, kept[j])]);
    let t = (1.0 - eps * eps).sqrt();
    let slack = 1.0 - tr;
    let subnormalized = slack > 1e-12;

    let mut p = SdpProblem::new();
    let rhat = p.psd("rho_hat", n);
    let y = p.hermitian("Y", db);
    let x = p.complex("X", r, n);
    let s = if subnormalized { Some(p.scalar("s")) } else { None };
    let ia = CMatrix::identity(da);
    p.require_psd("I⊗Y − ρ̂", move |v| &kron_raw(&ia, &v[y.0]) - &v[rhat.0]);
    let lam_c = lam.clone();
    p.require_psd("fidelity block", move |v| {
        let mut m = CMatrix::zeros(r + n, r + n);
        m.set_block(0, 0, &lam_c);
        m.set_block(0, r, &v[x.0]);
        m.set_block(r, 0, &v[x.0].adjoint());
        m.set_block(r, r, &v[rhat.0]);
        m
    });
    let vs = vsup.clone();
    p.require_psd("fidelity bound", move |v| {
        let mut f = (&v[x.0] * &vs).trace().re - t;
        if let Some(s) = s {
            f += v[s.0][(0, 0)].re;
        }
        CMatrix::from_real_diag(&[f])
    });
    match s {
        // √((1 − Tr ρ)(1 − Tr ρ̂)) ≥ s via a 2x2 block.
        Some(s) => p.require_psd("normalization slack", move |v| {
            let sv = v[s.0][(0, 0)].re;
            CMatrix::from_real(2, 2, &[slack, sv, sv, 1.0 - v[rhat.0].trace().re]).expect("2x2")
        }),
        None => p.require_psd("Tr ρ̂ ≤ 1", move |v| CMatrix::from_real_diag(&[1.0 - v[rhat.0].trace().re])),
    }
    p.minimize(move |v| v[y.0].trace().re);
    let sol = sdp::solve(&p, ENTROPY_TOL)?;
    let val = accept(&sol, &p)?;
    if val <= 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(-val.log2())
}

/// Purification of ρ_AB, returned as ρ_AM with M the eigenbasis mirror.
fn mirror_conditional(rho: &CMatrix, da: usize, db: usize) -> Result<(CMatrix, usize)> {
    let pur = numkit::purify_compact(rho)?;
    let m = pur.mirror_dim;
    let ram = reduce_pure(&pur.vector, &[da, db, m], &[0, 2])?;
    Ok((ram, m))
}

/// H_max(A|B) of an operator on A⊗B, by duality.
pub fn hmax_matrix(rho: &CMatrix, da: usize, db: usize) -> Result<f64> {
    smooth_hmax_matrix(rho, da, db, 0.0)
}

/// Smooth H_max^ε(A|B) of an operator on A⊗B, by duality.
pub fn smooth_hmax_matrix(rho: &CMatrix, da: usize, db: usize, eps: f64) -> Result<f64> {
    check_eps(eps)?;
    let (ram, m) = mirror_conditional(rho, da, db)?;
    Ok(-smooth_hmin_matrix(&ram, da, m, eps)?)
}

// ---------------------------------------------------------------------------
// State-level operations
// ---------------------------------------------------------------------------

pub fn hmin_cond(state: &LabeledState, a: &[&str], b: &[&str]) -> Result<f64> {
    let (rho, da, db) = grouped(state, a, b)?;
    hmin_matrix(&rho, da, db)
}

/// Value of H_min(A|B)_{ρ|σ}; −∞ when the support of ρ is not inside that
/// of I ⊗ σ.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum FixedValue {
    Finite(f64),
    NegInfinity,
}

impl FixedValue {
    pub fn as_f64(&self) -> f64 {
        match self {
            FixedValue::Finite(v) => *v,
            FixedValue::NegInfinity => f64::NEG_INFINITY,
        }
    }
}

pub fn hmin_cond_fixed(state: &LabeledState, a: &[&str], b: &[&str], sigma: &CMatrix) -> Result<FixedValue> {
    let (rho, da, db) = grouped(state, a, b)?;
    if sigma.rows() != db || !sigma.is_square() {
        return Err(Error::Shape(format!("sigma must be {db}x{db}")));
    }
    let is = kron_raw(&CMatrix::identity(da), sigma);
    let proj = numkit::support_projector(&is)?;
    let inside = &(&proj * &rho) * &proj;
    let outside = (&rho - &inside).max_abs();
    if outside > 1e-9 * rho.max_abs().max(1e-300) {
        return Ok(FixedValue::NegInfinity);
    }
    let w = numkit::pinv_sqrt_psd(&is)?;
    let m = (&(&w * &rho) * &w).hermitian_part();
    let lmax = hermitian_eig(&m)?.values[0];
    if lmax <= 0.0 {
        return Ok(FixedValue::Finite(f64::INFINITY));
    }
    Ok(FixedValue::Finite(-lmax.log2()))
}

/// One block of a classical-quantum state Σ_k p_k ρ_k ⊗ |k⟩⟨k|.
#[derive(Clone, Debug)]
pub struct CqBlock {
    pub p: f64,
    /// Normalized state on A⊗B.
    pub rho: CMatrix,
    pub da: usize,
    pub db: usize,
}

/// −log Σ_k p_k 2^{−H_min(A|B)_{ρ_k}}.
pub fn hmin_cond_cq_oracle(blocks: &[CqBlock]) -> Result<f64> {
    let total: f64 = blocks.iter().map(|b| b.p).sum();
    if total > 1.0 + 1e-9 || blocks.iter().any(|b| b.p < 0.0) {
        return Err(Error::Domain(format!("block weights sum to {total}")));
    }
    let mut acc = 0.0;
    for b in blocks {
        if b.p == 0.0 {
            continue;
        }
        let h = hmin_matrix(&b.rho, b.da, b.db)?;
        acc += b.p * (-h).exp2();
    }
    Ok(-acc.log2())
}

/// Combines CQ blocks into one operator on A⊗B⊗K (K last).
pub fn assemble_cq(blocks: &[CqBlock]) -> Result<CMatrix> {
    let Some(first) = blocks.first() else {
        return Err(Error::Domain("no blocks".into()));
    };
    let (da, db, k) = (first.da, first.db, blocks.len());
    let mut out = CMatrix::zeros(da * db * k, da * db * k);
    for (j, b) in blocks.iter().enumerate() {
        if b.da != da || b.db != db {
            return Err(Error::Shape("blocks differ in dimension".into()));
        }
        let mut proj = CMatrix::zeros(k, k);
        proj[(j, j)] = numkit::C64::new(b.p, 0.0);
        out = &out + &kron_raw(&b.rho, &proj);
    }
    Ok(out)
}

pub fn hmax_cond(state: &LabeledState, a: &[&str], b: &[&str]) -> Result<f64> {
    let (rho, da, db) = grouped(state, a, b)?;
    hmax_matrix(&rho, da, db)
}

pub fn smooth_hmin(state: &LabeledState, a: &[&str], b: &[&str], eps: f64) -> Result<f64> {
    check_eps(eps)?;
    let (rho, da, db) = grouped(state, a, b)?;
    smooth_hmin_matrix(&rho, da, db, eps)
}

pub fn smooth_hmax(state: &LabeledState, a: &[&str], b: &[&str], eps: f64) -> Result<f64> {
    check_eps(eps)?;
    let (rho, da, db) = grouped(state, a, b)?;
    smooth_hmax_matrix(&rho, da, db, eps)
}

/// log₂ of the smallest rank of a projection capturing weight ≥ 1 − ε.
pub fn hmax_prime_matrix(rho: &CMatrix, eps: f64) -> Result<f64> {
    check_eps(eps)?;
    let e = hermitian_eig(rho)?;
    let cut = zero_cut(&e.values);
    let target = 1.0 - eps - 1e-12;
    let mut mass = 0.0;
    let mut k = 0;
    for &v in &e.values {
        if mass >= target {
            break;
        }
        if v <= cut {
            break;
        }
        mass += v;
        k += 1;
    }
    Ok((k.max(1) as f64).log2())
}

pub fn hmax_prime(state: &LabeledState, a: &[&str], eps: f64) -> Result<f64> {
    let (rho, _, _) = grouped(state, a, &[])?;
    hmax_prime_matrix(&rho, eps)
}

pub fn h_star(state: &LabeledState, a: &[&str], b: &[&str], iota: f64, kappa: f64) -> Result<f64> {
    let (rho, da, db) = grouped(state, a, b)?;
    let hmin = smooth_hmin_matrix(&rho, da, db, iota)?;
    let hmax = smooth_hmax_matrix(&rho, da, db, kappa)?;
    Ok(hmin.max(hmax))
}

/// H_min^ε(A|B) − H_min^ε(A|BC).
pub fn i_min_tilde(state: &LabeledState, a: &[&str], c: &[&str], b: &[&str], eps: f64) -> Result<f64> {
    let bc: Vec<&str> = b.iter().chain(c).copied().collect();
    Ok(smooth_hmin(state, a, b, eps)? - smooth_hmin(state, a, &bc, eps)?)
}

/// f(x) = −log₂(1 − √(1 − x²)) for 0 < x ≤ 1.
pub fn f_eps(x: f64) -> Result<f64> {
    if !(x > 0.0 && x <= 1.0) {
        return Err(Error::Domain(format!("f is defined on (0, 1], got {x}")));
    }
    Ok(-(1.0 - (1.0 - x * x).sqrt()).log2())
}

// ---------------------------------------------------------------------------
// von Neumann quantities
// ---------------------------------------------------------------------------

/// −Tr ρ log ρ with 0 log 0 = 0.
pub fn vn_entropy_matrix(rho: &CMatrix) -> Result<f64> {
    let e = hermitian_eig(rho)?;
    let cut = zero_cut(&e.values);
    Ok(e.values.iter().filter(|&&v| v > cut).map(|&v| -v * v.log2()).sum())
}

pub fn vn_entropy(state: &LabeledState, a: &[&str]) -> Result<f64> {
    if a.is_empty() {
        return Ok(0.0);
    }
    vn_entropy_matrix(&state.reduce(a)?.matrix)
}

/// H(A|B) = H(AB) − H(B).
pub fn vn_cond(state: &LabeledState, a: &[&str], b: &[&str]) -> Result<f64> {
    check_partition(state, a, b)?;
    let ab: Vec<&str> = a.iter().chain(b).copied().collect();
    Ok(vn_entropy(state, &ab)? - vn_entropy(state, b)?)
}

/// I(A:B) = H(A) − H(A|B).
pub fn vn_mutual(state: &LabeledState, a: &[&str], b: &[&str]) -> Result<f64> {
    Ok(vn_entropy(state, a)? - vn_cond(state, a, b)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Quantity {
    Hmin,
    Hmax,
    HmaxPrime,
    HStar { iota: f64, kappa: f64 },
    /// Conditional min mutual information; `extra` names the system C in
    /// Ĩ(A:C|B).
    IMinTilde { extra: Vec<String> },
    VonNeumannH,
    VonNeumannMi,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntropyQuery {
    pub target: Vec<String>,
    pub conditioning: Vec<String>,
    pub eps: f64,
    pub quantity: Quantity,
}

impl EntropyQuery {
    pub fn new(target: &[&str], conditioning: &[&str], eps: f64, quantity: Quantity) -> Result<Self> {
        let q = EntropyQuery {
            target: target.iter().map(|s| s.to_string()).collect(),
            conditioning: conditioning.iter().map(|s| s.to_string()).collect(),
            eps,
            quantity,
        };
        q.validate()?;
        Ok(q)
    }

    pub fn validate(&self) -> Result<()> {
        check_eps(self.eps)?;
        for t in &self.target {
            if self.conditioning.contains(t) {
                return Err(Error::Domain(format!("{t} is both target and conditioning")));
            }
        }
        Ok(())
    }
}

/// Evaluates any supported quantity.
pub fn evaluate(state: &LabeledState, q: &EntropyQuery) -> Result<f64> {
    q.validate()?;
    let a: Vec<&str> = q.target.iter().map(String::as_str).collect();
    let b: Vec<&str> = q.conditioning.iter().map(String::as_str).collect();
    match &q.quantity {
        Quantity::Hmin => smooth_hmin(state, &a, &b, q.eps),
        Quantity::Hmax => smooth_hmax(state, &a, &b, q.eps),
        Quantity::HmaxPrime => {
            if !b.is_empty() {
                return Err(Error::Domain("hmax_prime takes no conditioning".into()));
            }
            hmax_prime(state, &a, q.eps)
        }
        Quantity::HStar { iota, kappa } => h_star(state, &a, &b, *iota, *kappa),
        Quantity::IMinTilde { extra } => {
            let c: Vec<&str> = extra.iter().map(String::as_str).collect();
            i_min_tilde(state, &a, &c, &b, q.eps)
        }
        Quantity::VonNeumannH => von_neumann(state, q),
        Quantity::VonNeumannMi => von_neumann(state, q),
    }
}

/// H(A|B) (or H(A) when B is empty) and I(A:B).
pub fn von_neumann(state: &LabeledState, q: &EntropyQuery) -> Result<f64> {
    let a: Vec<&str> = q.target.iter().map(String::as_str).collect();
    let b: Vec<&str> = q.conditioning.iter().map(String::as_str).collect();
    match q.quantity {
        Quantity::VonNeumannMi => vn_mutual(state, &a, &b),
        _ => vn_cond(state, &a, &b),
    }
}

/// Per-copy smooth entropies of `n` copies, n = 1..=n_max.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AepPoint {
    pub n: usize,
    pub hmin_per_copy: f64,
    pub hmax_per_copy: f64,
    pub von_neumann: f64,
}

/// Trend of (1/n) H_min^ε and (1/n) H_max^ε towards H(A|B) on a source.
/// Diagnostic only: no limit is asserted.
pub fn fqaep_trend(source: &HybridSource, a: &[&str], b: &[&str], eps: f64, n_max: usize) -> Result<Vec<AepPoint>> {
    let names: Vec<&str> = a.iter().chain(b).copied().collect();
    let base = source.marginal(&names)?;
    let h = vn_cond(&base, a, b)?;
    let mut out = Vec::new();
    for n in 1..=n_max {
        let src = source.n_copies(n)?;
        let st = src.marginal(&names)?;
        let nf = n as f64;
        out.push(AepPoint {
            n,
            hmin_per_copy: smooth_hmin(&st, a, b, eps)? / nf,
            hmax_per_copy: smooth_hmax(&st, a, b, eps)? / nf,
            von_neumann: h,
        });
    }
    Ok(out)
}
