//! Register layouts, labeled density operators and hybrid sources.
//!
//! A hybrid source is an ensemble `{p_xyz, |ψ_xyz⟩}` with classical labels
//! X, Y, Z and pure states on A, B, C, R. Its density operator lives on the
//! fixed register order X, Y, Z, A, B, C, R, T where T is a classical copy of
//! the joint label `xyz`.

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::numkit::{self, dim_cap, kron_vec, reduce_pure, CMatrix, Rng, C64};
use crate::{Error, Result};

/// Canonical register order of a source state.
pub const SOURCE_ORDER: [&str; 8] = ["X", "Y", "Z", "A", "B", "C", "R", "T"];

const NORM_TOL: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Kind {
    Classical,
    Quantum,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Subsystem {
    pub name: String,
    pub dim: usize,
    pub kind: Kind,
}

impl Subsystem {
    pub fn new(name: &str, dim: usize, kind: Kind) -> Self {
        Subsystem { name: name.to_string(), dim, kind }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegisterLayout {
    subsystems: Vec<Subsystem>,
}

impl RegisterLayout {
    pub fn new(subsystems: Vec<Subsystem>) -> Result<Self> {
        let mut seen = HashSet::new();
        for s in &subsystems {
            if s.dim == 0 {
                return Err(Error::Layout(format!("subsystem {} has dimension 0", s.name)));
            }
            if !seen.insert(s.name.clone()) {
                return Err(Error::Layout(format!("duplicate subsystem name {}", s.name)));
            }
        }
        Ok(RegisterLayout { subsystems })
    }

    pub fn subsystems(&self) -> &[Subsystem] {
        &self.subsystems
    }

    pub fn len(&self) -> usize {
        self.subsystems.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subsystems.is_empty()
    }

    pub fn dims(&self) -> Vec<usize> {
        self.subsystems.iter().map(|s| s.dim).collect()
    }

    pub fn names(&self) -> Vec<&str> {
        self.subsystems.iter().map(|s| s.name.as_str()).collect()
    }

    pub fn total_dim(&self) -> usize {
        self.subsystems.iter().map(|s| s.dim).product()
    }

    pub fn index(&self, name: &str) -> Result<usize> {
        self.subsystems
            .iter()
            .position(|s| s.name == name)
            .ok_or_else(|| Error::Layout(format!("unknown subsystem {name}")))
    }

    pub fn indices(&self, names: &[&str]) -> Result<Vec<usize>> {
        let idx: Vec<usize> = names.iter().map(|n| self.index(n)).collect::<Result<_>>()?;
        let uniq: HashSet<_> = idx.iter().collect();
        if uniq.len() != idx.len() {
            return Err(Error::Layout("subsystem listed twice".into()));
        }
        Ok(idx)
    }

    pub fn get(&self, name: &str) -> Result<&Subsystem> {
        Ok(&self.subsystems[self.index(name)?])
    }

    pub fn dim_of(&self, names: &[&str]) -> Result<usize> {
        Ok(self.indices(names)?.iter().map(|&i| self.subsystems[i].dim).product())
    }

    /// Sub-layout with the named subsystems in the given order.
    pub fn select(&self, names: &[&str]) -> Result<RegisterLayout> {
        let idx = self.indices(names)?;
        Ok(RegisterLayout { subsystems: idx.iter().map(|&i| self.subsystems[i].clone()).collect() })
    }
}

/// A density operator together with its register layout.
#[derive(Clone, Debug)]
pub struct LabeledState {
    pub matrix: CMatrix,
    pub layout: RegisterLayout,
}

impl LabeledState {
    /// Validates PSD, trace and classical-diagonal invariants.
    pub fn new(matrix: CMatrix, layout: RegisterLayout) -> Result<Self> {
        let st = Self::new_unchecked(matrix, layout)?;
        numkit::check_subnormalized(&st.matrix, "state")?;
        for (k, s) in st.layout.subsystems.iter().enumerate() {
            if s.kind == Kind::Classical {
                let off = st.off_diagonal_mass(k);
                if off > 1e-9 {
                    return Err(Error::NotAState(format!("classical register {} has coherence {off:.3e}", s.name)));
                }
            }
        }
        Ok(st)
    }

    /// Only checks that the matrix matches the layout.
    pub fn new_unchecked(matrix: CMatrix, layout: RegisterLayout) -> Result<Self> {
        let n = layout.total_dim();
        if matrix.rows() != n || matrix.cols() != n {
            return Err(Error::Layout(format!("{}x{} matrix for layout of dimension {n}", matrix.rows(), matrix.cols())));
        }
        Ok(LabeledState { matrix, layout })
    }

    /// Largest magnitude of entries that are off-diagonal in subsystem `k`.
    fn off_diagonal_mass(&self, k: usize) -> f64 {
        let dims = self.layout.dims();
        let stride: usize = dims[k + 1..].iter().product();
        let d = dims[k];
        let n = self.matrix.rows();
        let mut worst: f64 = 0.0;
        for i in 0..n {
            for j in 0..n {
                if (i / stride) % d != (j / stride) % d {
                    worst = worst.max(self.matrix[(i, j)].norm());
                }
            }
        }
        worst
    }

    /// Partial trace keeping the named subsystems, in the given order.
    pub fn reduce(&self, keep: &[&str]) -> Result<LabeledState> {
        let idx = self.layout.indices(keep)?;
        let m = numkit::partial_trace_dims(&self.matrix, &self.layout.dims(), &idx)?;
        Ok(LabeledState { matrix: m, layout: self.layout.select(keep)? })
    }

    pub fn trace(&self) -> f64 {
        self.matrix.trace().re
    }
}

/// Completely dephases one subsystem in its computational basis.
pub fn dephase(state: &LabeledState, name: &str) -> Result<LabeledState> {
    let k = state.layout.index(name)?;
    let dims = state.layout.dims();
    let stride: usize = dims[k + 1..].iter().product();
    let d = dims[k];
    let n = state.matrix.rows();
    let m = CMatrix::from_fn(n, n, |i, j| {
        if (i / stride) % d == (j / stride) % d {
            state.matrix[(i, j)]
        } else {
            C64::new(0.0, 0.0)
        }
    });
    let mut layout = state.layout.clone();
    layout.subsystems[k].kind = Kind::Classical;
    Ok(LabeledState { matrix: m, layout })
}

/// |Φ_r⟩ = r^{-1/2} Σ_k |k⟩|k⟩.
pub fn max_entangled(r: usize) -> Result<Vec<C64>> {
    if r == 0 {
        return Err(Error::Dimension("Schmidt rank must be at least 1".into()));
    }
    let a = 1.0 / (r as f64).sqrt();
    let mut v = vec![C64::new(0.0, 0.0); r * r];
    for k in 0..r {
        v[k * r + k] = C64::new(a, 0.0);
    }
    Ok(v)
}

/// Resource rates in bits: classical c, quantum q, net entanglement e and
/// catalytic entanglement e0.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateTuple {
    pub c: f64,
    pub q: f64,
    pub e: f64,
    pub e0: f64,
}

impl RateTuple {
    pub fn new(c: f64, q: f64, e: f64, e0: f64) -> Result<Self> {
        let t = RateTuple { c, q, e, e0 };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        for (n, v) in [("c", self.c), ("q", self.q), ("e", self.e), ("e0", self.e0)] {
            if !v.is_finite() {
                return Err(Error::Domain(format!("rate {n} is not finite")));
            }
        }
        for (n, v) in [("c", self.c), ("q", self.q), ("e0", self.e0)] {
            if v < -1e-12 {
                return Err(Error::Domain(format!("rate {n} = {v} is negative")));
            }
        }
        Ok(())
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.c, self.q, self.e, self.e0]
    }
}

// ---------------------------------------------------------------------------
// Hybrid sources
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceDims {
    #[serde(rename = "A", alias = "a")]
    pub a: usize,
    #[serde(rename = "B", alias = "b")]
    pub b: usize,
    #[serde(rename = "C", alias = "c")]
    pub c: usize,
    #[serde(rename = "R", alias = "r")]
    pub r: usize,
    #[serde(rename = "X", alias = "x")]
    pub x: usize,
    #[serde(rename = "Y", alias = "y")]
    pub y: usize,
    #[serde(rename = "Z", alias = "z")]
    pub z: usize,
}

impl SourceDims {
    pub fn trivial() -> Self {
        SourceDims { a: 1, b: 1, c: 1, r: 1, x: 1, y: 1, z: 1 }
    }

    /// Dimension of a named register, T included.
    pub fn get(&self, name: &str) -> Result<usize> {
        Ok(match name {
            "A" => self.a,
            "B" => self.b,
            "C" => self.c,
            "R" => self.r,
            "X" => self.x,
            "Y" => self.y,
            "Z" => self.z,
            "T" => self.x * self.y * self.z,
            _ => return Err(Error::Layout(format!("unknown source register {name}"))),
        })
    }

    pub fn psi_len(&self) -> usize {
        self.a * self.b * self.c * self.r
    }

    /// Product of the seven register dimensions (the copy T not counted).
    pub fn total(&self) -> usize {
        self.psi_len() * self.x * self.y * self.z
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct PsiJson {
    re: Vec<f64>,
    im: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct EntryJson {
    x: usize,
    y: usize,
    z: usize,
    p: f64,
    psi: PsiJson,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct SourceJson {
    dims: SourceDims,
    entries: Vec<EntryJson>,
}

/// One ensemble member: label, probability and a pure state on A⊗B⊗C⊗R.
#[derive(Clone, Debug, PartialEq)]
pub struct SourceEntry {
    pub x: usize,
    pub y: usize,
    pub z: usize,
    pub p: f64,
    pub psi: Vec<C64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HybridSource {
    dims: SourceDims,
    entries: Vec<SourceEntry>,
}

impl HybridSource {
    /// Validates the ensemble; zero-probability entries are dropped.
    pub fn new(dims: SourceDims, entries: Vec<SourceEntry>) -> Result<Self> {
        for (n, d) in [("A", dims.a), ("B", dims.b), ("C", dims.c), ("R", dims.r), ("X", dims.x), ("Y", dims.y), ("Z", dims.z)] {
            if d == 0 {
                return Err(Error::Validation(format!("dimension of {n} must be at least 1")));
            }
        }
        let mut seen = HashSet::new();
        let mut kept = Vec::with_capacity(entries.len());
        let mut total = 0.0;
        for (i, e) in entries.into_iter().enumerate() {
            if e.x >= dims.x || e.y >= dims.y || e.z >= dims.z {
                return Err(Error::Validation(format!("entry {i}: label ({},{},{}) out of range", e.x, e.y, e.z)));
            }
            if !seen.insert((e.x, e.y, e.z)) {
                return Err(Error::Validation(format!("entry {i}: duplicate label ({},{},{})", e.x, e.y, e.z)));
            }
            if !e.p.is_finite() || e.p < 0.0 {
                return Err(Error::Validation(format!("entry {i}: invalid probability {}", e.p)));
            }
            if e.psi.len() != dims.psi_len() {
                return Err(Error::Validation(format!("entry {i}: psi has length {}, expected {}", e.psi.len(), dims.psi_len())));
            }
            if e.psi.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
                return Err(Error::Validation(format!("entry {i}: psi has non-finite amplitude")));
            }
            let nrm = numkit::vec_norm(&e.psi);
            if (nrm * nrm - 1.0).abs() > NORM_TOL {
                return Err(Error::Validation(format!("entry {i}: psi has squared norm {}", nrm * nrm)));
            }
            total += e.p;
            if e.p > 0.0 {
                kept.push(e);
            }
        }
        if (total - 1.0).abs() > NORM_TOL {
            return Err(Error::Validation(format!("probabilities sum to {total}")));
        }
        Ok(HybridSource { dims, entries: kept })
    }

    /// Single-label source with pure state `psi` on ABCR.
    pub fn pure(dims: SourceDims, psi: Vec<C64>) -> Result<Self> {
        let d = SourceDims { x: 1, y: 1, z: 1, ..dims };
        Self::new(d, vec![SourceEntry { x: 0, y: 0, z: 0, p: 1.0, psi }])
    }

    pub fn dims(&self) -> &SourceDims {
        &self.dims
    }

    pub fn entries(&self) -> &[SourceEntry] {
        &self.entries
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let raw: SourceJson = serde_json::from_str(text)?;
        let entries = raw
            .entries
            .into_iter()
            .enumerate()
            .map(|(i, e)| {
                if e.psi.re.len() != e.psi.im.len() {
                    return Err(Error::Validation(format!("entry {i}: psi.re and psi.im differ in length")));
                }
                let psi = e.psi.re.iter().zip(&e.psi.im).map(|(&r, &m)| C64::new(r, m)).collect();
                Ok(SourceEntry { x: e.x, y: e.y, z: e.z, p: e.p, psi })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(raw.dims, entries)
    }

    pub fn to_json(&self) -> String {
        let raw = SourceJson {
            dims: self.dims,
            entries: self
                .entries
                .iter()
                .map(|e| EntryJson {
                    x: e.x,
                    y: e.y,
                    z: e.z,
                    p: e.p,
                    psi: PsiJson { re: e.psi.iter().map(|z| z.re).collect(), im: e.psi.iter().map(|z| z.im).collect() },
                })
                .collect(),
        };
        serde_json::to_string_pretty(&raw).expect("source serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn t_index(&self, x: usize, y: usize, z: usize) -> usize {
        (x * self.dims.y + y) * self.dims.z + z
    }

    /// Full layout X, Y, Z, A, B, C, R, T.
    pub fn layout(&self) -> RegisterLayout {
        let d = &self.dims;
        let subs = vec![
            Subsystem::new("X", d.x, Kind::Classical),
            Subsystem::new("Y", d.y, Kind::Classical),
            Subsystem::new("Z", d.z, Kind::Classical),
            Subsystem::new("A", d.a, Kind::Quantum),
            Subsystem::new("B", d.b, Kind::Quantum),
            Subsystem::new("C", d.c, Kind::Quantum),
            Subsystem::new("R", d.r, Kind::Quantum),
            Subsystem::new("T", d.x * d.y * d.z, Kind::Classical),
        ];
        RegisterLayout::new(subs).expect("source layout is valid")
    }

    fn check_cap(&self) -> Result<usize> {
        let n = self.layout().total_dim();
        let cap = dim_cap();
        if n > cap {
            return Err(Error::Dimension(format!("source state dimension {n} exceeds cap {cap}")));
        }
        Ok(n)
    }

    /// Index of (x, y, z, abcr, t) in the full space.
    fn full_index(&self, e: &SourceEntry, q: usize) -> usize {
        let d = &self.dims;
        let xyz = (e.x * d.y + e.y) * d.z + e.z;
        let dt = d.x * d.y * d.z;
        (xyz * d.psi_len() + q) * dt + xyz
    }

    /// Density operator Σ p |xyz⟩⟨xyz| ⊗ ψ_xyz ⊗ |xyz⟩⟨xyz|_T.
    pub fn build_source(&self) -> Result<LabeledState> {
        let n = self.check_cap()?;
        let mut m = CMatrix::zeros(n, n);
        for e in &self.entries {
            for (i, a) in e.psi.iter().enumerate() {
                for (j, b) in e.psi.iter().enumerate() {
                    m[(self.full_index(e, i), self.full_index(e, j))] += a * b.conj() * e.p;
                }
            }
        }
        Ok(LabeledState { matrix: m, layout: self.layout() })
    }

    /// |Ψ⟩ = Σ √p |x⟩|y⟩|z⟩|ψ_xyz⟩|xyz⟩_T, with an all-quantum layout.
    pub fn build_purified_source(&self) -> Result<(Vec<C64>, RegisterLayout)> {
        let n = self.check_cap()?;
        let mut v = vec![C64::new(0.0, 0.0); n];
        for e in &self.entries {
            let s = e.p.sqrt();
            for (i, a) in e.psi.iter().enumerate() {
                v[self.full_index(e, i)] += a * s;
            }
        }
        let mut layout = self.layout();
        for s in layout.subsystems.iter_mut() {
            s.kind = Kind::Quantum;
        }
        Ok((v, layout))
    }

    /// Reduced source state on the named registers, in the given order.
    ///
    /// Computed blockwise from the ensemble, so it does not need the full
    /// state to fit under the dimension cap.
    pub fn marginal(&self, names: &[&str]) -> Result<LabeledState> {
        let full = self.layout();
        let sel = full.select(names)?;
        let classical: Vec<&str> = names.iter().copied().filter(|n| matches!(*n, "X" | "Y" | "Z" | "T")).collect();
        let quantum: Vec<&str> = names.iter().copied().filter(|n| matches!(*n, "A" | "B" | "C" | "R")).collect();
        let qpos = |n: &str| ["A", "B", "C", "R"].iter().position(|m| *m == n).expect("quantum name");
        let qdims = [self.dims.a, self.dims.b, self.dims.c, self.dims.r];
        let qkeep: Vec<usize> = quantum.iter().map(|n| qpos(n)).collect();
        let dq: usize = qkeep.iter().map(|&k| qdims[k]).product();
        let dl: usize = classical.iter().map(|n| self.dims.get(n).unwrap()).product();
        let n = dl * dq;
        if n > 4096 {
            return Err(Error::Dimension(format!("marginal of dimension {n} is too large")));
        }
        let mut m = CMatrix::zeros(n, n);
        for e in &self.entries {
            let mut label = 0;
            for c in &classical {
                let (d, v) = match *c {
                    "X" => (self.dims.x, e.x),
                    "Y" => (self.dims.y, e.y),
                    "Z" => (self.dims.z, e.z),
                    _ => (self.dims.x * self.dims.y * self.dims.z, self.t_index(e.x, e.y, e.z)),
                };
                label = label * d + v;
            }
            let rq = reduce_pure(&e.psi, &qdims, &qkeep)?;
            for i in 0..dq {
                for j in 0..dq {
                    m[(label * dq + i, label * dq + j)] += rq[(i, j)] * e.p;
                }
            }
        }
        // Stored as (classical..., quantum...); move to the requested order.
        let stored: Vec<&str> = classical.iter().chain(&quantum).copied().collect();
        let stored_dims: Vec<usize> = stored.iter().map(|s| self.dims.get(s).unwrap()).collect();
        let order: Vec<usize> = names.iter().map(|nm| stored.iter().position(|s| s == nm).unwrap()).collect();
        let m = numkit::permute_operator(&m, &stored_dims, &order)?;
        Ok(LabeledState { matrix: m, layout: sel })
    }

    /// True when the named register has dimension one.
    pub fn is_trivial(&self, name: &str) -> bool {
        self.dims.get(name).map(|d| d == 1).unwrap_or(false)
    }

    /// n-fold tensor power; labels combine row-major, copy k is the k-th
    /// digit of every register.
    pub fn n_copies(&self, n: usize) -> Result<HybridSource> {
        if n == 0 {
            return Err(Error::Domain("n must be at least 1".into()));
        }
        let d = self.dims;
        let p = |v: usize| v.checked_pow(n as u32).ok_or_else(|| Error::Dimension("dimension overflow".into()));
        let nd = SourceDims { a: p(d.a)?, b: p(d.b)?, c: p(d.c)?, r: p(d.r)?, x: p(d.x)?, y: p(d.y)?, z: p(d.z)? };
        let cap = dim_cap();
        if nd.total() > cap {
            return Err(Error::Dimension(format!("{n} copies have total dimension {} above cap {cap}", nd.total())));
        }
        let mut entries: Vec<SourceEntry> = vec![SourceEntry { x: 0, y: 0, z: 0, p: 1.0, psi: vec![C64::new(1.0, 0.0)] }];
        let mut cur = SourceDims::trivial();
        for _ in 0..n {
            let mut next = Vec::with_capacity(entries.len() * self.entries.len());
            for a in &entries {
                for b in &self.entries {
                    let raw = kron_vec(&a.psi, &b.psi);
                    // raw order: A1 B1 C1 R1 A2 B2 C2 R2 -> A1A2 B1B2 C1C2 R1R2.
                    let dims8 = [cur.a, cur.b, cur.c, cur.r, d.a, d.b, d.c, d.r];
                    let psi = numkit::permute_vector(&raw, &dims8, &[0, 4, 1, 5, 2, 6, 3, 7])?;
                    next.push(SourceEntry { x: a.x * d.x + b.x, y: a.y * d.y + b.y, z: a.z * d.z + b.z, p: a.p * b.p, psi });
                }
            }
            entries = next;
            cur = SourceDims { a: cur.a * d.a, b: cur.b * d.b, c: cur.c * d.c, r: cur.r * d.r, x: cur.x * d.x, y: cur.y * d.y, z: cur.z * d.z };
        }
        // Products of normalized data can drift by an ulp; renormalize.
        let tot: f64 = entries.iter().map(|e| e.p).sum();
        for e in entries.iter_mut() {
            e.p /= tot;
        }
        HybridSource::new(nd, entries)
    }

    /// Random source with every label present; ψ_xyz Haar-random on ABCR.
    pub fn random(dims: SourceDims, rng: &mut Rng) -> Result<Self> {
        use rand::Rng as _;
        let mut entries = Vec::new();
        let mut weights = Vec::new();
        for x in 0..dims.x {
            for y in 0..dims.y {
                for z in 0..dims.z {
                    let w: f64 = 0.1 + rng.random::<f64>();
                    weights.push(w);
                    entries.push(SourceEntry { x, y, z, p: 0.0, psi: numkit::random_pure_state(dims.psi_len(), rng) });
                }
            }
        }
        let tot: f64 = weights.iter().sum();
        for (e, w) in entries.iter_mut().zip(&weights) {
            e.p = w / tot;
        }
        Self::new(dims, entries)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::rng_from_seed;

    fn bell_cr() -> HybridSource {
        let dims = SourceDims { c: 2, r: 2, ..SourceDims::trivial() };
        HybridSource::pure(dims, max_entangled(2).unwrap()).unwrap()
    }

    #[test]
    fn layout_rejects_duplicates_and_zero_dims() {
        let s = Subsystem::new("A", 2, Kind::Quantum);
        assert!(RegisterLayout::new(vec![s.clone(), s.clone()]).is_err());
        assert!(RegisterLayout::new(vec![Subsystem::new("A", 0, Kind::Quantum)]).is_err());
        let l = RegisterLayout::new(vec![s]).unwrap();
        assert!(matches!(l.index("Q"), Err(Error::Layout(_))));
    }

    #[test]
    fn bell_source_is_rank_one() {
        let st = bell_cr().build_source().unwrap();
        let ev = numkit::hermitian_eig(&st.matrix).unwrap().values;
        assert!((ev[0] - 1.0).abs() < 1e-12 && ev[1].abs() < 1e-12);
        assert!(LabeledState::new(st.matrix.clone(), st.layout.clone()).is_ok());
    }

    #[test]
    fn two_orthogonal_labels_give_rank_two() {
        let dims = SourceDims { z: 2, c: 2, ..SourceDims::trivial() };
        let e0 = SourceEntry { x: 0, y: 0, z: 0, p: 0.5, psi: vec![C64::new(1.0, 0.0), C64::new(0.0, 0.0)] };
        let e1 = SourceEntry { x: 0, y: 0, z: 1, p: 0.5, psi: vec![C64::new(0.0, 0.0), C64::new(1.0, 0.0)] };
        let s = HybridSource::new(dims, vec![e0, e1]).unwrap();
        let st = s.build_source().unwrap();
        let ev = numkit::hermitian_eig(&st.matrix).unwrap().values;
        assert_eq!(ev.iter().filter(|&&v| v > 1e-12).count(), 2);
        assert!((st.trace() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn validation_errors_name_the_entry() {
        let dims = SourceDims { c: 2, ..SourceDims::trivial() };
        let bad = SourceEntry { x: 0, y: 0, z: 0, p: 1.0, psi: vec![C64::new(1.0, 0.0), C64::new(1.0, 0.0)] };
        let err = HybridSource::new(dims, vec![bad]).unwrap_err().to_string();
        assert!(err.contains("entry 0"), "{err}");
        let zero = SourceEntry { x: 0, y: 0, z: 0, p: 0.0, psi: vec![C64::new(1.0, 0.0), C64::new(0.0, 0.0)] };
        let one = SourceEntry { x: 0, y: 0, z: 0, p: 1.0, psi: vec![C64::new(1.0, 0.0), C64::new(0.0, 0.0)] };
        assert!(HybridSource::new(dims, vec![zero.clone(), one]).is_err(), "duplicate label rejected");
        let dims2 = SourceDims { z: 2, c: 2, ..SourceDims::trivial() };
        let one_z1 = SourceEntry { z: 1, p: 1.0, ..zero.clone() };
        let s = HybridSource::new(dims2, vec![zero, one_z1]).unwrap();
        assert_eq!(s.entries().len(), 1);
    }

    #[test]
    fn dephasing_classical_registers_is_identity() {
        let mut rng = rng_from_seed(21);
        let dims = SourceDims { x: 2, z: 2, a: 2, c: 2, ..SourceDims::trivial() };
        let s = HybridSource::random(dims, &mut rng).unwrap();
        let st = s.build_source().unwrap();
        let mut d = st.clone();
        for n in ["X", "Y", "Z", "T"] {
            d = dephase(&d, n).unwrap();
        }
        assert!((&d.matrix - &st.matrix).max_abs() < 1e-15);
    }

    #[test]
    fn purified_source_dephases_to_source() {
        let mut rng = rng_from_seed(22);
        for _ in 0..10 {
            let dims = SourceDims { x: 2, y: 1, z: 2, a: 1, b: 2, c: 2, r: 1 };
            let s = HybridSource::random(dims, &mut rng).unwrap();
            let (v, layout) = s.build_purified_source().unwrap();
            let pure = LabeledState::new_unchecked(CMatrix::outer(&v), layout).unwrap();
            let dep = dephase(&pure, "T").unwrap();
            let st = s.build_source().unwrap();
            assert!((&dep.matrix - &st.matrix).max_abs() < 1e-10);
        }
    }

    #[test]
    fn marginal_matches_partial_trace() {
        let mut rng = rng_from_seed(23);
        let dims = SourceDims { x: 2, y: 1, z: 2, a: 1, b: 2, c: 2, r: 1 };
        let s = HybridSource::random(dims, &mut rng).unwrap();
        let st = s.build_source().unwrap();
        for names in [vec!["C", "Z"], vec!["B", "Y", "C"], vec!["T", "C"], vec!["Z", "X", "B"]] {
            let a = s.marginal(&names).unwrap();
            let b = st.reduce(&names).unwrap();
            assert!((&a.matrix - &b.matrix).max_abs() < 1e-12, "{names:?}");
        }
    }

    #[test]
    fn max_entangled_marginals() {
        let v = max_entangled(1).unwrap();
        assert_eq!(v, vec![C64::new(1.0, 0.0)]);
        let v = max_entangled(2).unwrap();
        let r = reduce_pure(&v, &[2, 2], &[0]).unwrap();
        assert!((&r - &CMatrix::from_real_diag(&[0.5, 0.5])).max_abs() < 1e-15);
    }

    #[test]
    fn dephase_half_of_bell_pair() {
        let v = max_entangled(2).unwrap();
        let layout = RegisterLayout::new(vec![Subsystem::new("A", 2, Kind::Quantum), Subsystem::new("B", 2, Kind::Quantum)]).unwrap();
        let st = LabeledState::new(CMatrix::outer(&v), layout).unwrap();
        let d = dephase(&st, "A").unwrap();
        let want = CMatrix::from_real_diag(&[0.5, 0.0, 0.0, 0.5]);
        assert!((&d.matrix - &want).max_abs() < 1e-15);
        assert!(dephase(&st, "Q").is_err());
    }

    #[test]
    fn n_copies_structure() {
        let s = bell_cr();
        assert_eq!(s.n_copies(1).unwrap(), s);
        let two = s.n_copies(2).unwrap();
        assert_eq!(two.dims().c, 4);
        assert_eq!(two.entries().len(), 1);
        assert!((two.entries()[0].p - 1.0).abs() < 1e-15);
    }

    #[test]
    fn json_round_trip() {
        let mut rng = rng_from_seed(24);
        let dims = SourceDims { x: 2, c: 2, b: 2, ..SourceDims::trivial() };
        let s = HybridSource::random(dims, &mut rng).unwrap();
        let back = HybridSource::from_json(&s.to_json()).unwrap();
        assert_eq!(back, s);
    }
}
