//! Rate-region inequality systems over (c, q, e, e0).
//!
//! Every bound is a list of rows `coeffs · (c, q, e, e0) ≥ rhs` (or `=`),
//! with the right-hand sides computed from smooth or von Neumann entropies of
//! the source. Register names are the single letters A B C R X Y Z; a
//! system such as "BYCZ" is the joint register.

use std::cell::RefCell;
use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::entropy::{self, f_eps};
use crate::numkit::{self, Channel, CMatrix, C64};
use crate::qstate::{HybridSource, Kind, LabeledState, RateTuple, RegisterLayout, Subsystem};
use crate::{Error, Result};

/// Slack below which a row counts as violated.
pub const CHECK_TOL: f64 = 1e-9;

/// Formats a number with 6 decimals (ties to even), without a negative zero.
pub fn fmt6(x: f64) -> String {
    if x.is_infinite() {
        return if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    let s = format!("{x:.6}");
    if s == "-0.000000" {
        "0.000000".into()
    } else {
        s
    }
}

pub fn round6(x: f64) -> f64 {
    fmt6(x).parse().unwrap_or(x)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Resource {
    C,
    Q,
    E,
    E0,
}

impl Resource {
    fn index(self) -> usize {
        match self {
            Resource::C => 0,
            Resource::Q => 1,
            Resource::E => 2,
            Resource::E0 => 3,
        }
    }

    fn symbol(self) -> &'static str {
        ["c", "q", "e", "e0"][self.index()]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Relation {
    #[serde(rename = ">=")]
    Geq,
    #[serde(rename = "=")]
    Eq,
}

impl fmt::Display for Relation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Relation::Geq => ">=",
            Relation::Eq => "=",
        })
    }
}

/// Left-hand sides used by the bounds.
const LHS_FORMS: [(&str, [f64; 4]); 7] = [
    ("c+2q", [1.0, 2.0, 0.0, 0.0]),
    ("c+q+e", [1.0, 1.0, 1.0, 0.0]),
    ("q+e", [0.0, 1.0, 1.0, 0.0]),
    ("e0", [0.0, 0.0, 0.0, 1.0]),
    ("c+q-e", [1.0, 1.0, -1.0, 0.0]),
    ("q-e", [0.0, 1.0, -1.0, 0.0]),
    ("c", [1.0, 0.0, 0.0, 0.0]),
];

fn lhs(name: &str) -> [f64; 4] {
    LHS_FORMS.iter().find(|(n, _)| *n == name).map(|(_, c)| *c).expect("known left-hand side")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Inequality {
    pub label: String,
    pub lhs: String,
    pub coeffs: [f64; 4],
    pub relation: Relation,
    pub rhs: f64,
    /// Smoothing parameters and other constants entering the right-hand side.
    pub params: Vec<(String, f64)>,
}

impl Inequality {
    fn geq(label: &str, rhs: f64, params: Vec<(String, f64)>) -> Self {
        Inequality { label: label.into(), lhs: label.into(), coeffs: lhs(label), relation: Relation::Geq, rhs, params }
    }

    pub fn lhs_value(&self, t: &RateTuple) -> f64 {
        self.coeffs.iter().zip(t.as_array()).map(|(a, b)| a * b).sum()
    }

    fn params_text(&self) -> String {
        self.params.iter().map(|(k, v)| format!("{k}={}", fmt6(*v))).collect::<Vec<_>>().join(";")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    /// Which result the rows come from, e.g. "direct".
    pub provenance: String,
    pub achievability: bool,
    pub eps: Option<f64>,
    pub delta: Option<f64>,
    pub inequalities: Vec<Inequality>,
    /// Resources pinned to zero (scenario constraints and d_C = 1 branches).
    pub fixed_zero: Vec<Resource>,
    /// Error within which tuples satisfying the rows are achievable.
    pub error_budget: Option<f64>,
    pub notes: Vec<String>,
}

impl BoundReport {
    fn new(provenance: &str, achievability: bool, eps: Option<f64>, delta: Option<f64>) -> Self {
        BoundReport {
            provenance: provenance.into(),
            achievability,
            eps,
            delta,
            inequalities: Vec::new(),
            fixed_zero: Vec::new(),
            error_budget: None,
            notes: Vec::new(),
        }
    }

    pub fn get(&self, label: &str) -> Option<&Inequality> {
        self.inequalities.iter().find(|i| i.label == label)
    }

    pub fn rhs(&self, label: &str) -> Option<f64> {
        self.get(label).map(|i| i.rhs)
    }

    fn push(&mut self, row: Inequality) -> Result<()> {
        if !row.rhs.is_finite() {
            return Err(Error::Numerical(format!("non-finite right-hand side for {}", row.label)));
        }
        if self.get(&row.label).is_some() {
            return Err(Error::Numerical(format!("duplicate label {}", row.label)));
        }
        self.inequalities.push(row);
        Ok(())
    }

    /// CSV table: label, lhs, relation, rhs, params.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["label", "lhs", "relation", "rhs", "params"])?;
        for i in &self.inequalities {
            w.write_record([i.label.as_str(), i.lhs.as_str(), &i.relation.to_string(), &fmt6(i.rhs), &i.params_text()])?;
        }
        for r in &self.fixed_zero {
            w.write_record(["fixed", r.symbol(), "=", &fmt6(0.0), ""])?;
        }
        if let Some(b) = self.error_budget {
            w.write_record(["error_budget", "error", "<=", &fmt6(b), ""])?;
        }
        for n in &self.notes {
            w.write_record(["note", n.as_str(), "", "", ""])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    /// JSON document with every number rounded to 6 decimals.
    pub fn to_json(&self) -> String {
        let mut r = self.clone();
        r.eps = r.eps.map(round6);
        r.delta = r.delta.map(round6);
        r.error_budget = r.error_budget.map(round6);
        for i in r.inequalities.iter_mut() {
            i.rhs = round6(i.rhs);
            for p in i.params.iter_mut() {
                p.1 = round6(p.1);
            }
        }
        serde_json::to_string_pretty(&r).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

// ---------------------------------------------------------------------------
// Entropy evaluation with caching
// ---------------------------------------------------------------------------

const REGISTERS: [&str; 7] = ["A", "B", "C", "R", "X", "Y", "Z"];

/// Evaluates entropies of a source, optionally treating some registers as
/// absent. Values are cached per (quantity, systems, smoothing).
pub struct Evaluator<'a> {
    source: &'a HybridSource,
    removed: Vec<&'static str>,
    cache: RefCell<HashMap<String, f64>>,
}

impl<'a> Evaluator<'a> {
    pub fn new(source: &'a HybridSource) -> Self {
        Evaluator { source, removed: Vec::new(), cache: RefCell::new(HashMap::new()) }
    }

    /// Drops the listed registers from every system before evaluation. The
    /// registers must be one-dimensional.
    pub fn without(source: &'a HybridSource, removed: &[&'static str]) -> Result<Self> {
        for r in removed {
            if !source.is_trivial(r) {
                return Err(Error::Scenario(format!("register {r} must be one-dimensional (has dimension {})", source.dims().get(r)?)));
            }
        }
        Ok(Evaluator { source, removed: removed.to_vec(), cache: RefCell::new(HashMap::new()) })
    }

    pub fn source(&self) -> &HybridSource {
        self.source
    }

    fn names(&self, sys: &str) -> Result<Vec<&'static str>> {
        let mut out = Vec::new();
        for ch in sys.chars() {
            let s = ch.to_string();
            let Some(r) = REGISTERS.iter().find(|r| **r == s) else {
                return Err(Error::Layout(format!("unknown register {ch} in {sys}")));
            };
            if out.contains(r) {
                return Err(Error::Layout(format!("register {ch} repeated in {sys}")));
            }
            if !self.removed.contains(r) {
                out.push(*r);
            }
        }
        Ok(out)
    }

    fn state(&self, a: &[&str], b: &[&str]) -> Result<(CMatrix, usize, usize)> {
        let all: Vec<&str> = a.iter().chain(b).copied().collect();
        if all.is_empty() {
            return Ok((CMatrix::identity(1), 1, 1));
        }
        let st = self.source.marginal(&all)?;
        let da = st.layout.dim_of(a)?;
        let db = st.layout.dim_of(b)?;
        Ok((st.matrix, da, db))
    }

    fn cached(&self, key: String, f: impl FnOnce() -> Result<f64>) -> Result<f64> {
        if let Some(v) = self.cache.borrow().get(&key) {
            return Ok(*v);
        }
        let v = f()?;
        self.cache.borrow_mut().insert(key, v);
        Ok(v)
    }

    pub fn hmin(&self, a: &str, b: &str, eps: f64) -> Result<f64> {
        let (na, nb) = (self.names(a)?, self.names(b)?);
        let key = format!("hmin|{}|{}|{:e}", na.concat(), nb.concat(), eps);
        self.cached(key, || {
            let (m, da, db) = self.state(&na, &nb)?;
            entropy::smooth_hmin_matrix(&m, da, db, eps)
        })
    }

    pub fn hmax(&self, a: &str, b: &str, eps: f64) -> Result<f64> {
        let (na, nb) = (self.names(a)?, self.names(b)?);
        let key = format!("hmax|{}|{}|{:e}", na.concat(), nb.concat(), eps);
        self.cached(key, || {
            let (m, da, db) = self.state(&na, &nb)?;
            entropy::smooth_hmax_matrix(&m, da, db, eps)
        })
    }

    pub fn hmax_prime(&self, a: &str, eps: f64) -> Result<f64> {
        let na = self.names(a)?;
        let key = format!("hmaxp|{}|{:e}", na.concat(), eps);
        self.cached(key, || {
            let (m, _, _) = self.state(&na, &[])?;
            entropy::hmax_prime_matrix(&m, eps)
        })
    }

    /// max of the smooth min- and max-entropies.
    pub fn h_star(&self, a: &str, b: &str, iota: f64, kappa: f64) -> Result<f64> {
        Ok(self.hmin(a, b, iota)?.max(self.hmax(a, b, kappa)?))
    }

    /// von Neumann H(A|B).
    pub fn h(&self, a: &str, b: &str) -> Result<f64> {
        let (na, nb) = (self.names(a)?, self.names(b)?);
        let key = format!("vn|{}|{}", na.concat(), nb.concat());
        self.cached(key, || {
            let (m, da, db) = self.state(&na, &nb)?;
            let hab = entropy::vn_entropy_matrix(&m)?;
            let hb = if db == 1 {
                0.0
            } else {
                entropy::vn_entropy_matrix(&numkit::partial_trace_dims(&m, &[da, db], &[1])?)?
            };
            Ok(hab - hb)
        })
    }

    /// von Neumann I(A:B) = H(A) − H(A|B).
    pub fn mi(&self, a: &str, b: &str) -> Result<f64> {
        Ok(self.h(a, "")? - self.h(a, b)?)
    }

    fn dc(&self) -> usize {
        self.source.dims().c
    }
}

fn check_open_unit(name: &str, x: f64) -> Result<()> {
    if !(x > 0.0 && x < 1.0) {
        return Err(Error::Domain(format!("{name} must lie in (0, 1), got {x}")));
    }
    Ok(())
}

fn p(name: &str, v: f64) -> (String, f64) {
    (name.to_string(), v)
}

// ---------------------------------------------------------------------------
// One-shot direct bounds
// ---------------------------------------------------------------------------

/// One-shot direct bound with 3ε/2 and ε/2 smoothing.
pub fn direct_bound(source: &HybridSource, eps: f64, delta: f64) -> Result<BoundReport> {
    direct_with(&Evaluator::new(source), eps, delta)
}

pub fn direct_with(ev: &Evaluator, eps: f64, delta: f64) -> Result<BoundReport> {
    check_open_unit("eps", eps)?;
    check_open_unit("delta", delta)?;
    let mut r = BoundReport::new("direct", true, Some(eps), Some(delta));
    let (lg2, lg4) = ((delta * delta / 2.0).log2(), (delta.powi(4) / 2.0).log2());
    if ev.dc() == 1 {
        let h = ev.hmax("Z", "BY", eps)?;
        r.push(Inequality::geq("c", h - lg2, vec![p("eps", eps), p("Hmax(Z|BY)", h)]))?;
        r.fixed_zero = vec![Resource::Q, Resource::E, Resource::E0];
        r.error_budget = Some(delta);
        r.notes.push("d_C = 1: only classical communication is used".into());
        return Ok(r);
    }
    let (e1, e2) = (1.5 * eps, 0.5 * eps);
    if e1 >= 1.0 {
        return Err(Error::Domain(format!("smoothing 3*eps/2 = {e1} must be below 1")));
    }
    let hmax_czby = ev.hmax("CZ", "BY", e2)?;
    let h_i = ev.h_star("C", "AXYZ", e1, e2)? + hmax_czby;
    let hmax_cbxyz = ev.hmax("C", "BXYZ", e2)?;
    let h_ii = ev.hmax("C", "AXZ", e2)? + hmax_cbxyz;
    r.push(Inequality::geq("c+2q", h_i.max(h_ii) - lg4, vec![p("iota", e1), p("kappa", e2), p("H_I", h_i), p("H_II", h_ii)]))?;
    r.push(Inequality::geq("c+q+e", hmax_czby - lg2, vec![p("kappa", e2)]))?;
    r.push(Inequality::geq("q+e", hmax_cbxyz - 2.0 * delta.log2(), vec![p("kappa", e2)]))?;
    let eps_p = eps * eps / 8.0;
    let e0 = 0.5 * (ev.hmax_prime("C", eps_p)? - ev.hmax("C", "BXYZ", e1)?) + delta.log2();
    r.push(Inequality::geq("e0", e0, vec![p("eps_prime", eps_p), p("iota", e1)]))?;
    r.error_budget = Some(4.0 * (12.0 * eps + 6.0 * delta).sqrt() + std::f64::consts::SQRT_2 * eps);
    Ok(r)
}

/// Bound built directly from partial bi-decoupling (single smoothing ε),
/// including the equality fixing e0.
pub fn bidecoupling_direct_bound(source: &HybridSource, eps: f64, delta: f64) -> Result<BoundReport> {
    bidecoupling_direct_with(&Evaluator::new(source), eps, delta)
}

pub fn bidecoupling_direct_with(ev: &Evaluator, eps: f64, delta: f64) -> Result<BoundReport> {
    check_open_unit("eps", eps)?;
    check_open_unit("delta", delta)?;
    let mut r = BoundReport::new("bidecoupling-direct", true, Some(eps), Some(delta));
    let lg2 = (delta * delta / 2.0).log2();
    let ld2 = 2.0 * delta.log2();
    if ev.dc() == 1 {
        let h = ev.hmax("Z", "AX", eps)?.max(ev.hmax("Z", "BY", eps)?);
        r.push(Inequality::geq("c", h - lg2, vec![p("eps", eps)]))?;
        r.fixed_zero = vec![Resource::Q, Resource::E, Resource::E0];
        r.error_budget = Some(delta);
        return Ok(r);
    }
    let ps = || vec![p("eps", eps)];
    r.push(Inequality::geq("c+q-e", ev.hmax("CZ", "AX", eps)? - lg2, ps()))?;
    r.push(Inequality::geq("q-e", ev.hmax("C", "AXYZ", eps)? - ld2, ps()))?;
    r.push(Inequality::geq("c+q+e", ev.hmax("CZ", "BY", eps)? - lg2, ps()))?;
    r.push(Inequality::geq("q+e", ev.hmax("C", "BXYZ", eps)? - ld2, ps()))?;
    let log_dc = (ev.dc() as f64).log2();
    r.push(Inequality {
        label: "e0".into(),
        lhs: "e0+(q+e)/2".into(),
        coeffs: [0.0, 0.5, 0.5, 1.0],
        relation: Relation::Eq,
        rhs: 0.5 * log_dc,
        params: vec![p("log_dC", log_dc)],
    })?;
    r.error_budget = Some(4.0 * (12.0 * eps + 6.0 * delta).sqrt());
    Ok(r)
}

/// Bound obtained after adding teleportation and dense coding (single
/// smoothing ε).
pub fn tpdc_direct_bound(source: &HybridSource, eps: f64, delta: f64) -> Result<BoundReport> {
    let ev = Evaluator::new(source);
    check_open_unit("eps", eps)?;
    check_open_unit("delta", delta)?;
    let mut r = BoundReport::new("tpdc-direct", true, Some(eps), Some(delta));
    let (lg2, lg4) = ((delta * delta / 2.0).log2(), (delta.powi(4) / 2.0).log2());
    if ev.dc() == 1 {
        r.push(Inequality::geq("c", ev.hmax("Z", "BY", eps)? - lg2, vec![p("eps", eps)]))?;
        r.fixed_zero = vec![Resource::Q, Resource::E, Resource::E0];
        r.error_budget = Some(delta);
        return Ok(r);
    }
    let hmax_czby = ev.hmax("CZ", "BY", eps)?;
    let hmax_cbxyz = ev.hmax("C", "BXYZ", eps)?;
    let h_i = ev.h_star("C", "AXYZ", eps, eps)? + hmax_czby;
    let h_ii = ev.hmax("C", "AXZ", eps)? + hmax_cbxyz;
    r.push(Inequality::geq("c+2q", h_i.max(h_ii) - lg4, vec![p("eps", eps), p("H_I", h_i), p("H_II", h_ii)]))?;
    r.push(Inequality::geq("c+q+e", hmax_czby - lg2, vec![p("eps", eps)]))?;
    r.push(Inequality::geq("q+e", hmax_cbxyz - 2.0 * delta.log2(), vec![p("eps", eps)]))?;
    let e0 = 0.5 * ((ev.dc() as f64).log2() - hmax_cbxyz) + delta.log2();
    r.push(Inequality::geq("e0", e0, vec![p("eps", eps)]))?;
    r.error_budget = Some(4.0 * (12.0 * eps + 6.0 * delta).sqrt());
    Ok(r)
}

// ---------------------------------------------------------------------------
// Converse
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeltaStatus {
    Zero,
    NonnegativeUnknown,
}

/// The correction term of the converse vanishes without classical side
/// information at the decoder, or with neither A nor C.
pub fn delta_structural_zero(source: &HybridSource) -> DeltaStatus {
    let d = source.dims();
    if d.y == 1 || (d.a == 1 && d.c == 1) {
        DeltaStatus::Zero
    } else {
        DeltaStatus::NonnegativeUnknown
    }
}

/// One-shot converse bound. Rows whose smoothing parameter reaches 1 are
/// vacuous and left out with a note.
pub fn converse_bound(source: &HybridSource, eps: f64, delta: f64) -> Result<BoundReport> {
    converse_with(&Evaluator::new(source), eps, delta)
}

pub fn converse_with(ev: &Evaluator, eps: f64, delta: f64) -> Result<BoundReport> {
    check_open_unit("eps", eps)?;
    if !(0.0..1.0).contains(&delta) {
        return Err(Error::Domain(format!("delta must lie in [0, 1), got {delta}")));
    }
    let mut r = BoundReport::new("converse", false, Some(eps), Some(delta));
    let f = f_eps(eps)?;
    let s1 = 12.0 * eps + 6.0 * delta.sqrt();
    let s2 = 11.0 * eps + 8.0 * delta.sqrt();
    let ok1 = s1 < 1.0;
    let ok2 = s2 < 1.0;
    if !ok1 {
        r.notes.push(format!("smoothing 12*eps+6*sqrt(delta) = {} >= 1: rows using it omitted", fmt6(s1)));
    }
    if !ok2 {
        r.notes.push(format!("smoothing 11*eps+8*sqrt(delta) = {} >= 1: rows using it omitted", fmt6(s2)));
    }
    let delta_zero = delta_structural_zero(ev.source()) == DeltaStatus::Zero;

    let mut cands = Vec::new();
    let mut params = vec![p("eps", eps), p("f", f)];
    if ok1 {
        let h1 = ev.hmin("AC", "XYZ", eps)? - ev.hmax("A", "XYZ", eps)? + ev.hmin("BYCZ", "", eps)? - ev.hmin("BY", "", s1)?;
        params.push(p("H'_I", h1));
        params.push(p("s1", s1));
        cands.push(h1);
    }
    if ok2 {
        let h2 = ev.hmin("AXCZ", "", eps)? - ev.hmax("AXZ", "", eps)? + ev.hmin("BC", "XYZ", eps)? - ev.hmin("B", "XYZ", s2)?;
        params.push(p("H'_II", h2));
        params.push(p("s2", s2));
        if delta_zero {
            params.push(p("Delta", 0.0));
            cands.push(h2);
        } else {
            r.notes.push(format!("Delta not evaluated: c+2q uses H'_I only (H'_II = {} attached without Delta)", fmt6(h2)));
        }
    }
    if cands.is_empty() {
        r.notes.push("c+2q row omitted: no admissible term".into());
    } else {
        let m = cands.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        r.push(Inequality::geq("c+2q", m - 6.0 * f, params))?;
    }
    if ok1 {
        let v = ev.hmin("BYCZ", "", eps)? - ev.hmin("BY", "", s1)? - f;
        r.push(Inequality::geq("c+q+e", v, vec![p("eps", eps), p("s1", s1), p("f", f)]))?;
    }
    if ok2 {
        let v = ev.hmin("BC", "XYZ", eps)? - ev.hmin("B", "XYZ", s2)? - 2.0 * f;
        r.push(Inequality::geq("q+e", v, vec![p("eps", eps), p("s2", s2), p("f", f)]))?;
    }
    Ok(r)
}

// ---------------------------------------------------------------------------
// Asymptotic region
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AsymptoticRegion {
    pub inner: BoundReport,
    pub outer: BoundReport,
}

pub fn asymptotic_region(source: &HybridSource) -> Result<AsymptoticRegion> {
    asymptotic_with(&Evaluator::new(source))
}

pub fn asymptotic_with(ev: &Evaluator) -> Result<AsymptoticRegion> {
    let h_czby = ev.h("CZ", "BY")?;
    let h_cbxyz = ev.h("C", "BXYZ")?;
    let h_i = ev.h("C", "AXYZ")? + h_czby;
    let h_ii = ev.h("C", "AXZ")? + h_cbxyz;
    let both = vec![p("H_I", h_i), p("H_II", h_ii)];

    let mut inner = BoundReport::new("asymptotic-inner", true, None, None);
    inner.push(Inequality::geq("c+2q", h_i.max(h_ii), both.clone()))?;
    inner.push(Inequality::geq("c+q+e", h_czby, vec![]))?;
    inner.push(Inequality::geq("q+e", h_cbxyz, vec![]))?;
    inner.push(Inequality::geq("e0", 0.5 * ev.mi("C", "BXYZ")?, vec![]))?;

    let mut outer = BoundReport::new("asymptotic-outer", false, None, None);
    let c2q = if delta_structural_zero(ev.source()) == DeltaStatus::Zero {
        h_i.max(h_ii)
    } else {
        outer.notes.push(format!("Delta not evaluated: c+2q uses H_I only (H_II = {} attached without Delta)", fmt6(h_ii)));
        h_i
    };
    outer.push(Inequality::geq("c+2q", c2q, both))?;
    outer.push(Inequality::geq("c+q+e", h_czby, vec![]))?;
    outer.push(Inequality::geq("q+e", h_cbxyz, vec![]))?;
    Ok(AsymptoticRegion { inner, outer })
}

// ---------------------------------------------------------------------------
// Teleportation / dense coding and tuple checks
// ---------------------------------------------------------------------------

/// (c, q, e, e0) ↦ (c+2λ−2μ, q−λ+μ, e+λ+μ, e0_new).
pub fn tpdc_extend(t: &RateTuple, lambda: f64, mu: f64, e0_new: f64) -> Result<RateTuple> {
    const TOL: f64 = 1e-12;
    if lambda < 0.0 || mu < 0.0 {
        return Err(Error::Domain(format!("lambda and mu must be nonnegative, got {lambda}, {mu}")));
    }
    let d = lambda - mu;
    if d < -t.c / 2.0 - TOL || d > t.q + TOL {
        return Err(Error::Domain(format!("lambda - mu = {d} outside [-c/2, q] = [{}, {}]", -t.c / 2.0, t.q)));
    }
    if e0_new < t.e0 - TOL {
        return Err(Error::Domain(format!("new catalytic entanglement {e0_new} below {}", t.e0)));
    }
    RateTuple::new((t.c + 2.0 * d).max(0.0), (t.q - d).max(0.0), t.e + lambda + mu, e0_new)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TupleCheck {
    pub label: String,
    pub satisfied: bool,
    /// LHS − RHS.
    pub slack: f64,
}

pub fn check_tuple(report: &BoundReport, t: &RateTuple) -> Vec<TupleCheck> {
    let mut out: Vec<TupleCheck> = report
        .inequalities
        .iter()
        .map(|i| {
            let slack = i.lhs_value(t) - i.rhs;
            let satisfied = match i.relation {
                Relation::Geq => slack >= -CHECK_TOL,
                Relation::Eq => slack.abs() <= CHECK_TOL,
            };
            TupleCheck { label: i.label.clone(), satisfied, slack }
        })
        .collect();
    for r in &report.fixed_zero {
        let v = t.as_array()[r.index()];
        out.push(TupleCheck { label: format!("{}=0", r.symbol()), satisfied: v.abs() <= CHECK_TOL, slack: -v.abs() });
    }
    out
}

pub fn all_satisfied(checks: &[TupleCheck]) -> bool {
    checks.iter().all(|c| c.satisfied)
}

// ---------------------------------------------------------------------------
// Scenario reductions
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioId {
    Fqsr,
    FqSlepianWolf,
    StateSplitting,
    StateMerging,
    CdcQsi,
    QdcCsi,
    ClassicalSlepianWolf,
    QsrCsiDecoder,
}

impl ScenarioId {
    pub const ALL: [ScenarioId; 8] = [
        ScenarioId::Fqsr,
        ScenarioId::FqSlepianWolf,
        ScenarioId::StateSplitting,
        ScenarioId::StateMerging,
        ScenarioId::CdcQsi,
        ScenarioId::QdcCsi,
        ScenarioId::ClassicalSlepianWolf,
        ScenarioId::QsrCsiDecoder,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ScenarioId::Fqsr => "fqsr",
            ScenarioId::FqSlepianWolf => "fq_slepian_wolf",
            ScenarioId::StateSplitting => "state_splitting",
            ScenarioId::StateMerging => "state_merging",
            ScenarioId::CdcQsi => "cdc_qsi",
            ScenarioId::QdcCsi => "qdc_csi",
            ScenarioId::ClassicalSlepianWolf => "classical_slepian_wolf",
            ScenarioId::QsrCsiDecoder => "qsr_csi_decoder",
        }
    }

    /// Registers that must be one-dimensional.
    pub fn trivial_registers(self) -> &'static [&'static str] {
        match self {
            ScenarioId::Fqsr => &["X", "Y", "Z"],
            ScenarioId::FqSlepianWolf => &["X", "Y", "Z", "A"],
            ScenarioId::StateSplitting => &["X", "Y", "Z", "B"],
            ScenarioId::StateMerging => &["X", "Y", "Z", "A"],
            ScenarioId::CdcQsi => &["A", "X", "Y", "C"],
            ScenarioId::QdcCsi => &["A", "X", "Z", "B"],
            ScenarioId::ClassicalSlepianWolf => &["A", "X", "B", "C"],
            ScenarioId::QsrCsiDecoder => &["X", "Z"],
        }
    }

    pub fn zero_resources(self) -> &'static [Resource] {
        match self {
            ScenarioId::StateMerging => &[Resource::Q],
            ScenarioId::CdcQsi | ScenarioId::ClassicalSlepianWolf => &[Resource::Q, Resource::E, Resource::E0],
            _ => &[Resource::C],
        }
    }
}

impl FromStr for ScenarioId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ScenarioId::ALL
            .iter()
            .copied()
            .find(|id| id.name() == s)
            .ok_or_else(|| Error::Scenario(format!("unknown scenario {s}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub id: ScenarioId,
    pub zero_resources: Vec<Resource>,
}

impl ScenarioSpec {
    pub fn new(id: ScenarioId) -> Self {
        ScenarioSpec { id, zero_resources: id.zero_resources().to_vec() }
    }

    /// Names the first register that breaks the scenario's pattern.
    pub fn check(&self, source: &HybridSource) -> Result<()> {
        for r in self.id.trivial_registers() {
            let d = source.dims().get(r)?;
            if d != 1 {
                return Err(Error::Scenario(format!("scenario {} needs register {r} trivial, found dimension {d}", self.id.name())));
            }
        }
        Ok(())
    }
}

/// Closed-form asymptotic expression from the literature, with the row of
/// the inner region it should reproduce.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClosedForm {
    pub name: String,
    pub expression: String,
    pub value: f64,
    pub row: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioReport {
    pub scenario: ScenarioId,
    pub direct: BoundReport,
    pub converse: BoundReport,
    pub asymptotic: AsymptoticRegion,
    pub closed_forms: Vec<ClosedForm>,
}

fn pin(report: &mut BoundReport, spec: &ScenarioSpec) {
    for r in &spec.zero_resources {
        if !report.fixed_zero.contains(r) {
            report.fixed_zero.push(*r);
        }
    }
    report.provenance = format!("{}:{}", spec.id.name(), report.provenance);
}

/// Evaluates the general bounds with the scenario's trivial registers
/// removed from every entropy, and attaches closed-form asymptotic values.
pub fn reduce_scenario(source: &HybridSource, spec: &ScenarioSpec, eps: f64, delta: f64) -> Result<ScenarioReport> {
    spec.check(source)?;
    let ev = Evaluator::without(source, spec.id.trivial_registers())?;
    let mut direct = direct_with(&ev, eps, delta)?;
    let mut converse = converse_with(&ev, eps, delta)?;
    let mut asymptotic = asymptotic_with(&ev)?;
    pin(&mut direct, spec);
    pin(&mut converse, spec);
    pin(&mut asymptotic.inner, spec);
    pin(&mut asymptotic.outer, spec);
    let closed_forms = closed_forms(source, spec.id)?;
    Ok(ScenarioReport { scenario: spec.id, direct, converse, asymptotic, closed_forms })
}

/// Literature expressions, evaluated from von Neumann entropies of explicit
/// marginals (independently of the region formulas).
fn closed_forms(source: &HybridSource, id: ScenarioId) -> Result<Vec<ClosedForm>> {
    let h = |a: &[&str], b: &[&str]| -> Result<f64> {
        let names: Vec<&str> = a.iter().chain(b).copied().collect();
        let st = source.marginal(&names)?;
        entropy::vn_cond(&st, a, b)
    };
    let cf = |name: &str, expr: &str, value: f64, row: Option<&str>| ClosedForm {
        name: name.into(),
        expression: expr.into(),
        value,
        row: row.map(String::from),
    };
    let out = match id {
        ScenarioId::Fqsr => vec![
            cf("2q", "H(C|A)+H(C|B)", h(&["C"], &["A"])? + h(&["C"], &["B"])?, Some("c+2q")),
            cf("q+e", "H(C|B)", h(&["C"], &["B"])?, Some("q+e")),
        ],
        ScenarioId::FqSlepianWolf => vec![
            cf("2q", "H(C)+H(C|B)", h(&["C"], &[])? + h(&["C"], &["B"])?, Some("c+2q")),
            cf("q+e", "H(C|B)", h(&["C"], &["B"])?, Some("q+e")),
        ],
        ScenarioId::StateSplitting => {
            let (hc, hca) = (h(&["C"], &[])?, h(&["C"], &["A"])?);
            vec![
                cf("2q", "H(C|A)+H(C)", hca + hc, Some("c+2q")),
                cf("q+e", "H(C)", hc, Some("q+e")),
                cf("q_pair", "(H(C)+H(C|A))/2", 0.5 * (hc + hca), None),
                cf("e_pair", "(H(C)-H(C|A))/2", 0.5 * (hc - hca), None),
            ]
        }
        ScenarioId::StateMerging => vec![
            cf("c", "H(C)+H(C|B)", h(&["C"], &[])? + h(&["C"], &["B"])?, Some("c+2q")),
            cf("e", "H(C|B)", h(&["C"], &["B"])?, Some("q+e")),
        ],
        ScenarioId::CdcQsi => vec![cf("c", "H(Z|B)", h(&["Z"], &["B"])?, Some("c+q+e"))],
        ScenarioId::QdcCsi => vec![cf("2q", "H(C)+H(C|Y)", h(&["C"], &[])? + h(&["C"], &["Y"])?, Some("c+2q"))],
        ScenarioId::ClassicalSlepianWolf => vec![cf("c", "H(Z|Y)", h(&["Z"], &["Y"])?, Some("c+q+e"))],
        ScenarioId::QsrCsiDecoder => {
            let hcby = h(&["C"], &["B", "Y"])?;
            let icby = h(&["C"], &[])? - hcby;
            vec![
                cf("2q", "H(C|A)+H(C|BY)", h(&["C"], &["A"])? + hcby, Some("c+2q")),
                cf("q+e", "H(C|BY)", hcby, Some("q+e")),
                cf("e0", "I(C:BY)/2", 0.5 * icby, Some("e0")),
            ]
        }
    };
    Ok(out)
}

// ---------------------------------------------------------------------------
// Correction term for a user-supplied map
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeltaEvaluation {
    /// Ĩ_min at smoothing 7ε+4√δ of G_A and Y' given M_A A X' Z'.
    pub value: f64,
    pub smoothing: f64,
    /// Purified distance to the product form, using ω_xyz equal to the
    /// G_A M_A marginal of each classical block.
    pub distance: f64,
    pub decoupling_ok: bool,
}

/// Evaluates the correction term's objective for one map F: A X C Z →
/// A G_A M_A, whose output must be diagonal in M_A.
pub fn delta_for_map(source: &HybridSource, f: &Channel, eps: f64, delta: f64) -> Result<DeltaEvaluation> {
    let d = *source.dims();
    if f.in_dims != [d.a, d.x, d.c, d.z] {
        return Err(Error::Layout(format!("map must act on A X C Z with dims {:?}, got {:?}", [d.a, d.x, d.c, d.z], f.in_dims)));
    }
    if f.out_dims.len() != 3 || f.out_dims[0] != d.a {
        return Err(Error::Layout(format!("map must output A G M with d_A = {}, got {:?}", d.a, f.out_dims)));
    }
    if !f.is_trace_preserving(1e-9) {
        return Err(Error::Validation("map is not trace preserving".into()));
    }
    let (dg, dm) = (f.out_dims[1], f.out_dims[2]);
    check_m_diagonal(f, dm)?;
    check_open_unit("eps", eps)?;
    if !(0.0..1.0).contains(&delta) {
        return Err(Error::Domain(format!("delta must lie in [0, 1), got {delta}")));
    }
    let s = 7.0 * eps + 4.0 * delta.sqrt();
    if s >= 1.0 {
        return Err(Error::Domain(format!("smoothing 7*eps+4*sqrt(delta) = {s} must be below 1")));
    }

    // F(Ψ_s) on G M A X' Z' Y' (block diagonal in the primed copies).
    let dout = dg * dm * d.a;
    let n = dout * d.x * d.z * d.y;
    let cap = numkit::dim_cap();
    if n > cap {
        return Err(Error::Dimension(format!("map output with classical copies has dimension {n} above cap {cap}")));
    }
    let mut big = CMatrix::zeros(n, n);
    let mut fid = 0.0;
    for e in source.entries() {
        // |x⟩|z⟩|ψ⟩ laid out as A X C Z B R.
        let mut v = vec![C64::new(0.0, 0.0); d.a * d.x * d.c * d.z * d.b * d.r];
        for (idx, amp) in e.psi.iter().enumerate() {
            let (a, rest) = (idx / (d.b * d.c * d.r), idx % (d.b * d.c * d.r));
            let (b, rest) = (rest / (d.c * d.r), rest % (d.c * d.r));
            let (c, r) = (rest / d.r, rest % d.r);
            let pos = ((((a * d.x + e.x) * d.c + c) * d.z + e.z) * d.b + b) * d.r + r;
            v[pos] = *amp;
        }
        let (out, nd) = f.apply_vector(&v, &[d.a, d.x, d.c, d.z, d.b, d.r], &[0, 1, 2, 3])?;
        // nd = [A, G, M, B, R, env]
        let agm = numkit::reduce_pure(&out, &nd, &[1, 2, 0])?;
        let label = (e.x * d.z + e.z) * d.y + e.y;
        big.set_block(label * dout, label * dout, &agm.scale(e.p));

        let agmr = numkit::reduce_pure(&out, &nd, &[0, 4, 1, 2])?;
        let ar = numkit::reduce_pure(&e.psi, &[d.a, d.b, d.c, d.r], &[0, 3])?;
        let omega = numkit::partial_trace_dims(&agmr, &[d.a, d.r, dg, dm], &[2, 3])?;
        let product = numkit::kron(&ar, &omega)?;
        fid += e.p * numkit::fidelity(&agmr, &product)?;
    }
    let layout = RegisterLayout::new(vec![
        Subsystem::new("G", dg, Kind::Quantum),
        Subsystem::new("M", dm, Kind::Classical),
        Subsystem::new("A", d.a, Kind::Quantum),
        Subsystem::new("X'", d.x, Kind::Classical),
        Subsystem::new("Z'", d.z, Kind::Classical),
        Subsystem::new("Y'", d.y, Kind::Classical),
    ])?;
    let st = LabeledState::new_unchecked(big.hermitian_part(), layout)?;
    let value = entropy::i_min_tilde(&st, &["G"], &["Y'"], &["M", "A", "X'", "Z'"], s)?;
    let distance = (1.0 - fid.min(1.0).powi(2)).max(0.0).sqrt();
    Ok(DeltaEvaluation { value, smoothing: s, distance, decoupling_ok: distance <= 2.0 * delta.sqrt() + 1e-9 })
}

/// Output diagonal in M for every input, checked on the Choi operator.
fn check_m_diagonal(f: &Channel, dm: usize) -> Result<()> {
    let choi = f.choi()?;
    let mut worst: f64 = 0.0;
    let n = choi.rows();
    for i in 0..n {
        for j in 0..n {
            if i % dm != j % dm {
                worst = worst.max(choi[(i, j)].norm());
            }
        }
    }
    if worst > 1e-9 {
        return Err(Error::Validation(format!("map output is not diagonal in M (off-diagonal {worst:.2e})")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::rng_from_seed;
    use crate::qstate::{max_entangled, SourceDims};

    fn merging_source() -> HybridSource {
        let dims = SourceDims { b: 2, c: 2, ..SourceDims::trivial() };
        HybridSource::pure(dims, max_entangled(2).unwrap()).unwrap()
    }

    #[test]
    fn fmt6_rounds_and_cleans_sign() {
        assert_eq!(fmt6(-1e-9), "0.000000");
        assert_eq!(fmt6(5.643856189774724), "5.643856");
        assert_eq!(fmt6(0.0000125), "0.000013");
    }

    #[test]
    fn merging_direct_rows() {
        let r = direct_bound(&merging_source(), 1e-4, 0.1).unwrap();
        let want = -1.0 - 2.0 * 0.1f64.log2();
        assert!((r.rhs("q+e").unwrap() - want).abs() < 1e-3, "{}", r.rhs("q+e").unwrap());
        assert_eq!(r.inequalities.len(), 4);
        assert!(r.error_budget.unwrap() > 0.0);
    }

    #[test]
    fn trivial_c_gives_single_row() {
        let dims = SourceDims { b: 2, z: 2, ..SourceDims::trivial() };
        let mut rng = rng_from_seed(3);
        let src = HybridSource::random(dims, &mut rng).unwrap();
        let r = direct_bound(&src, 0.1, 0.1).unwrap();
        assert_eq!(r.inequalities.len(), 1);
        assert_eq!(r.inequalities[0].label, "c");
        assert_eq!(r.fixed_zero.len(), 3);
        let p1 = bidecoupling_direct_bound(&src, 0.1, 0.1).unwrap();
        assert_eq!(p1.inequalities.len(), 1);
    }

    #[test]
    fn merging_converse_values() {
        let eps = 0.01;
        let r = converse_bound(&merging_source(), eps, 0.0).unwrap();
        let src = merging_source();
        let ev = Evaluator::new(&src);
        let want = ev.hmin("BC", "", eps).unwrap() - ev.hmin("B", "", 0.12).unwrap() - f_eps(eps).unwrap();
        assert!((r.rhs("c+q+e").unwrap() - want).abs() < 1e-9);
        // sign sanity at small smoothing: H_min(BC) ≈ 0, H_min(B) ≈ 1.
        assert!(ev.hmin("BC", "", 1e-6).unwrap().abs() < 1e-4);
        assert!((ev.hmin("B", "", 1e-6).unwrap() - 1.0).abs() < 1e-4);
        assert_eq!(delta_structural_zero(&src), DeltaStatus::Zero);
        assert!(r.notes.iter().all(|n| !n.contains("not evaluated")));
    }

    #[test]
    fn converse_marks_unevaluated_delta() {
        let dims = SourceDims { a: 2, c: 2, y: 2, ..SourceDims::trivial() };
        let mut rng = rng_from_seed(5);
        let src = HybridSource::random(dims, &mut rng).unwrap();
        assert_eq!(delta_structural_zero(&src), DeltaStatus::NonnegativeUnknown);
        let r = converse_bound(&src, 0.01, 0.0).unwrap();
        assert!(r.notes.iter().any(|n| n.contains("Delta not evaluated")));
        let big = converse_bound(&src, 0.05, 0.1).unwrap();
        assert!(big.get("c+q+e").is_none() && big.notes.iter().any(|n| n.contains("omitted")));
    }

    #[test]
    fn asymptotic_examples() {
        let m = asymptotic_region(&merging_source()).unwrap();
        assert!(m.inner.rhs("c+2q").unwrap().abs() < 1e-9);
        assert!((m.inner.rhs("q+e").unwrap() + 1.0).abs() < 1e-9);
        // C maximally mixed with A, B trivial.
        let dims = SourceDims { c: 2, r: 2, ..SourceDims::trivial() };
        let src = HybridSource::pure(dims, max_entangled(2).unwrap()).unwrap();
        let a = asymptotic_region(&src).unwrap();
        assert!((a.inner.rhs("c+2q").unwrap() - 2.0).abs() < 1e-9);
    }

    #[test]
    fn tpdc_examples() {
        let t = RateTuple::new(0.0, 2.0, 0.0, 0.0).unwrap();
        assert_eq!(tpdc_extend(&t, 1.0, 0.0, 0.0).unwrap(), RateTuple::new(2.0, 1.0, 1.0, 0.0).unwrap());
        let u = tpdc_extend(&t, 0.5, 0.5, 0.0).unwrap();
        assert_eq!((u.c, u.q, u.e), (0.0, 2.0, 1.0));
        assert!(tpdc_extend(&t, 3.0, 0.0, 0.0).is_err());
        assert!(tpdc_extend(&t, 0.0, 0.0, -1.0).is_err());
    }

    #[test]
    fn check_tuple_cases() {
        let r = asymptotic_region(&merging_source()).unwrap().inner;
        let far = RateTuple::new(10.0, 10.0, 10.0, 10.0).unwrap();
        assert!(all_satisfied(&check_tuple(&r, &far)));
        let low = RateTuple::new(10.0, 0.0, -2.0, 10.0).unwrap();
        let c = check_tuple(&r, &low);
        assert!(!c.iter().find(|x| x.label == "q+e").unwrap().satisfied);
        let edge = RateTuple::new(10.0, 0.0, r.rhs("q+e").unwrap(), 10.0).unwrap();
        let c = check_tuple(&r, &edge);
        assert!(c.iter().find(|x| x.label == "q+e").unwrap().slack.abs() <= 1e-9);
    }

    #[test]
    fn scenario_pattern_errors_name_register() {
        let dims = SourceDims { a: 2, b: 2, c: 2, ..SourceDims::trivial() };
        let mut rng = rng_from_seed(7);
        let src = HybridSource::random(dims, &mut rng).unwrap();
        let err = reduce_scenario(&src, &ScenarioSpec::new(ScenarioId::StateMerging), 0.1, 0.1).unwrap_err();
        assert!(err.to_string().contains("register A"));
        assert_eq!("cdc_qsi".parse::<ScenarioId>().unwrap(), ScenarioId::CdcQsi);
        assert!("nope".parse::<ScenarioId>().is_err());
    }

    #[test]
    fn report_serialization() {
        let r = direct_bound(&merging_source(), 0.05, 0.05).unwrap();
        let csv = r.to_csv().unwrap();
        assert!(csv.starts_with("label,lhs,relation,rhs,params"));
        assert_eq!(csv.lines().count(), 1 + 4 + 1);
        let back = BoundReport::from_json(&r.to_json()).unwrap();
        assert_eq!(back.inequalities.len(), 4);
        assert!((back.rhs("q+e").unwrap() - r.rhs("q+e").unwrap()).abs() <= 5e-7);
    }

    #[test]
    fn delta_for_product_map_is_zero() {
        let dims = SourceDims { a: 2, c: 2, y: 2, r: 2, ..SourceDims::trivial() };
        let mut rng = rng_from_seed(9);
        let src = HybridSource::random(dims, &mut rng).unwrap();
        // Trace out C, output fixed |0⟩ on G and M.
        let mut kraus = Vec::new();
        for c in 0..2 {
            let k = CMatrix::from_fn(2 * 2 * 2, 2 * 2, |o, i| {
                let (a_out, gm) = (o / 4, o % 4);
                let (a_in, c_in) = (i / 2, i % 2);
                if gm == 0 && a_out == a_in && c_in == c {
                    C64::new(1.0, 0.0)
                } else {
                    C64::new(0.0, 0.0)
                }
            });
            kraus.push(k);
        }
        let f = Channel::from_kraus(vec![2, 1, 2, 1], vec![2, 2, 2], &kraus).unwrap();
        let r = delta_for_map(&src, &f, 0.01, 0.0).unwrap();
        assert!(r.value.abs() < 1e-5, "{}", r.value);
        assert!(r.decoupling_ok);
    }
}
