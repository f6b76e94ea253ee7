//! Explicit encoder/decoder pairs: construction from a partial
//! bi-decoupling pair (σ, U) via Uhlmann isometries, simulation against the
//! redistribution error criterion, and converse audits.
//!
//! Register conventions. Encoder: in [A, X, C, Z, E_A], out [A, X, Q, M, F_A].
//! Decoder: in [B, Y, Q, M, E_B], out [B, Y, C, Z, F_B]. The resource
//! entanglement Φ on E_A E_B has dimension 2^{e+e0} and the returned one on
//! F_A F_B has dimension 2^{e0}.

use serde::{Deserialize, Serialize};

use crate::decouple::{self, BidecouplingConditions, BlockUnitary, PermutationUnitary, StructuredState};
use crate::numkit::{self, CMatrix, Channel, C64};
use crate::qstate::{self, HybridSource, LabeledState, RateTuple, SourceDims, SourceEntry};
use crate::region::{self, BoundReport, Evaluator, TupleCheck};
use crate::{Error, Result};

/// Trace preservation tolerance for encoders and decoders.
pub const TP_TOL: f64 = 1e-9;
/// Largest allowed off-diagonal weight in M of an encoder output.
pub const M_DIAG_TOL: f64 = 1e-9;
/// Largest register dimension a plan may request.
const MAX_PLAN_DIM: usize = 4096;
/// Eigenvalues below this are dropped when completing Kraus sets.
const KRAUS_CUT: f64 = 1e-13;

fn c0() -> C64 {
    C64::new(0.0, 0.0)
}

fn flat(dims: &[usize], ix: &[usize]) -> usize {
    dims.iter().zip(ix).fold(0, |acc, (d, i)| acc * d + i)
}

// ---------------------------------------------------------------------------
// Named pure vectors
// ---------------------------------------------------------------------------

/// Pure vector with named tensor factors.
#[derive(Clone, Debug)]
pub struct NamedVector {
    pub amplitudes: Vec<C64>,
    pub names: Vec<String>,
    pub dims: Vec<usize>,
}

impl NamedVector {
    fn zeros(names: &[&str], dims: Vec<usize>) -> Self {
        let n = dims.iter().product();
        NamedVector { amplitudes: vec![c0(); n], names: names.iter().map(|s| s.to_string()).collect(), dims }
    }

    pub fn position(&self, name: &str) -> Result<usize> {
        self.names.iter().position(|n| n == name).ok_or_else(|| Error::Layout(format!("no register {name} in {:?}", self.names)))
    }

    pub fn positions(&self, names: &[&str]) -> Result<Vec<usize>> {
        names.iter().map(|n| self.position(n)).collect()
    }

    pub fn dim(&self, name: &str) -> Result<usize> {
        Ok(self.dims[self.position(name)?])
    }

    pub fn norm(&self) -> f64 {
        numkit::vec_norm(&self.amplitudes)
    }

    /// Reorders the factors; `order` must name every factor once.
    pub fn permuted(&self, order: &[&str]) -> Result<Self> {
        if order.len() != self.names.len() {
            return Err(Error::Layout(format!("permutation {order:?} does not cover {:?}", self.names)));
        }
        let idx = self.positions(order)?;
        let v = numkit::permute_vector(&self.amplitudes, &self.dims, &idx)?;
        Ok(NamedVector { amplitudes: v, names: order.iter().map(|s| s.to_string()).collect(), dims: idx.iter().map(|&i| self.dims[i]).collect() })
    }

    /// Projects a factor onto a basis vector and drops it (unnormalized).
    pub fn fixed(&self, name: &str, value: usize) -> Result<Self> {
        let p = self.position(name)?;
        if value >= self.dims[p] {
            return Err(Error::Layout(format!("value {value} out of range for {name}")));
        }
        let rest: Vec<&str> = self.names.iter().filter(|n| *n != name).map(|s| s.as_str()).collect();
        let mut order = vec![name];
        order.extend(&rest);
        let w = self.permuted(&order)?;
        let len = w.amplitudes.len() / w.dims[0];
        Ok(NamedVector {
            amplitudes: w.amplitudes[value * len..(value + 1) * len].to_vec(),
            names: rest.iter().map(|s| s.to_string()).collect(),
            dims: w.dims[1..].to_vec(),
        })
    }

    /// Replaces one factor by several whose dimensions multiply to it.
    pub fn split(&self, name: &str, parts: &[(&str, usize)]) -> Result<Self> {
        let p = self.position(name)?;
        let prod: usize = parts.iter().map(|x| x.1).product();
        if prod != self.dims[p] {
            return Err(Error::Layout(format!("cannot split {name} of dimension {} into {parts:?}", self.dims[p])));
        }
        let mut out = self.clone();
        out.names.splice(p..=p, parts.iter().map(|x| x.0.to_string()));
        out.dims.splice(p..=p, parts.iter().map(|x| x.1));
        Ok(out)
    }

    /// Appends the factors of `other`.
    pub fn tensor(&self, other: &NamedVector) -> Self {
        let mut names = self.names.clone();
        names.extend(other.names.iter().cloned());
        let mut dims = self.dims.clone();
        dims.extend(&other.dims);
        NamedVector { amplitudes: numkit::kron_vec(&self.amplitudes, &other.amplitudes), names, dims }
    }

    /// Reduced density operator on the listed factors, in that order.
    pub fn reduced(&self, keep: &[&str]) -> Result<CMatrix> {
        let idx = self.positions(keep)?;
        let rest: Vec<usize> = (0..self.dims.len()).filter(|i| !idx.contains(i)).collect();
        let order: Vec<usize> = idx.iter().chain(&rest).copied().collect();
        let v = numkit::permute_vector(&self.amplitudes, &self.dims, &order)?;
        let nd: Vec<usize> = order.iter().map(|&i| self.dims[i]).collect();
        numkit::reduce_pure(&v, &nd, &(0..idx.len()).collect::<Vec<_>>())
    }
}

fn max_entangled_named(a: &str, b: &str, d: usize) -> Result<NamedVector> {
    Ok(NamedVector { amplitudes: qstate::max_entangled(d)?, names: vec![a.into(), b.into()], dims: vec![d, d] })
}

// ---------------------------------------------------------------------------
// Protocols
// ---------------------------------------------------------------------------

/// Register dimensions (2^c, 2^q, 2^{e+e0}, 2^{e0}).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResourceDims {
    pub m: usize,
    pub q: usize,
    pub e: usize,
    pub f: usize,
}

impl ResourceDims {
    pub fn tuple(&self) -> Result<RateTuple> {
        let l = |d: usize| (d as f64).log2();
        RateTuple::new(l(self.m), l(self.q), l(self.e) - l(self.f), l(self.f))
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RedistProtocol {
    pub name: String,
    pub encoder: Channel,
    pub decoder: Channel,
    pub dims: ResourceDims,
}

impl RedistProtocol {
    /// Checks register dimensions and trace preservation.
    pub fn new(name: &str, src: &SourceDims, encoder: Channel, decoder: Channel, dims: ResourceDims) -> Result<Self> {
        let d = src;
        let want = [
            ("encoder input", encoder.in_dims.clone(), vec![d.a, d.x, d.c, d.z, dims.e]),
            ("encoder output", encoder.out_dims.clone(), vec![d.a, d.x, dims.q, dims.m, dims.f]),
            ("decoder input", decoder.in_dims.clone(), vec![d.b, d.y, dims.q, dims.m, dims.e]),
            ("decoder output", decoder.out_dims.clone(), vec![d.b, d.y, d.c, d.z, dims.f]),
        ];
        for (what, got, exp) in want {
            if got != exp {
                return Err(Error::Layout(format!("{what} dims {got:?}, expected {exp:?}")));
            }
        }
        for (what, ch) in [("encoder", &encoder), ("decoder", &decoder)] {
            if !ch.is_trace_preserving(TP_TOL) {
                return Err(Error::Validation(format!("{what} is not trace-preserving")));
            }
        }
        Ok(RedistProtocol { name: name.to_string(), encoder, decoder, dims })
    }

    pub fn tuple(&self) -> Result<RateTuple> {
        self.dims.tuple()
    }
}

/// Sends C on Q and the dephased Z on M.
pub fn identity_protocol(src: &HybridSource) -> Result<RedistProtocol> {
    scrambled_identity(src, &CMatrix::identity(src.dims().c))
}

/// Identity protocol with a unitary applied to C before sending and undone
/// after receiving.
pub fn scrambled_identity(src: &HybridSource, u: &CMatrix) -> Result<RedistProtocol> {
    let d = *src.dims();
    if u.rows() != d.c || u.cols() != d.c {
        return Err(Error::Shape(format!("unitary must be {}x{}", d.c, d.c)));
    }
    let dims5 = vec![d.a, d.x, d.c, d.z, 1];
    let ax = d.a * d.x;
    let kraus: Vec<CMatrix> = (0..d.z)
        .map(|z| {
            let mut k = CMatrix::zeros(ax * d.c * d.z, ax * d.c * d.z);
            for s in 0..ax {
                for c1 in 0..d.c {
                    for c2 in 0..d.c {
                        k[((s * d.c + c1) * d.z + z, (s * d.c + c2) * d.z + z)] = u[(c1, c2)];
                    }
                }
            }
            k
        })
        .collect();
    let enc = Channel::from_kraus(dims5.clone(), dims5, &kraus)?;
    let by = d.b * d.y;
    let ua = u.adjoint();
    let mut k = CMatrix::zeros(by * d.c * d.z, by * d.c * d.z);
    for s in 0..by {
        for c1 in 0..d.c {
            for c2 in 0..d.c {
                for z in 0..d.z {
                    k[((s * d.c + c1) * d.z + z, (s * d.c + c2) * d.z + z)] = ua[(c1, c2)];
                }
            }
        }
    }
    let dec = Channel::from_kraus(vec![d.b, d.y, d.c, d.z, 1], vec![d.b, d.y, d.c, d.z, 1], &[k])?;
    let name = if (u - &CMatrix::identity(d.c)).max_abs() == 0.0 { "identity" } else { "scrambled-identity" };
    RedistProtocol::new(name, &d, enc, dec, ResourceDims { m: d.z, q: d.c, e: 1, f: 1 })
}

/// Identity protocol whose decoder first depolarizes Q with probability p.
pub fn noisy_identity(src: &HybridSource, p: f64) -> Result<RedistProtocol> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Domain(format!("noise probability {p} outside [0, 1]")));
    }
    let base = identity_protocol(src)?;
    let d = *src.dims();
    let dq = d.c;
    let n = (dq * dq) as f64;
    let mut ks = Vec::new();
    for a in 0..dq {
        for b in 0..dq {
            let w = if a == 0 && b == 0 { 1.0 - p + p / n } else { p / n };
            ks.push(weyl(dq, a, b).scale(w.sqrt()));
        }
    }
    let dep = Channel::from_kraus(vec![dq], vec![dq], &ks)?;
    let lifted = lift(&dep, &[d.b, d.y, dq, d.z, 1], &[2])?;
    let dec = lifted.then(&base.decoder)?;
    RedistProtocol::new("noisy-identity", &d, base.encoder, dec, base.dims)
}

/// Discards Ĉ at the encoder and prepares ξ on C⊗Z at the decoder.
pub fn trace_and_replace(src: &HybridSource, xi: &CMatrix) -> Result<RedistProtocol> {
    let d = *src.dims();
    let dcz = d.c * d.z;
    if xi.rows() != dcz || !xi.is_square() {
        return Err(Error::Shape(format!("replacement state must be {dcz}x{dcz}")));
    }
    numkit::check_subnormalized(xi, "replacement state")?;
    let enc = reshape(&Channel::partial_trace(vec![d.a, d.x, d.c, d.z, 1], &[0, 1, 4])?, None, Some(vec![d.a, d.x, 1, 1, 1]))?;
    let e = numkit::hermitian_eig(xi)?;
    let by = d.b * d.y;
    let mut ks = Vec::new();
    for (i, &l) in e.values.iter().enumerate() {
        if l <= KRAUS_CUT {
            continue;
        }
        let v = e.vectors.column_vec(i);
        ks.push(CMatrix::from_fn(by * dcz, by, |r, c| if r / dcz == c { v[r % dcz] * l.sqrt() } else { c0() }));
    }
    let dec = Channel::from_kraus(vec![d.b, d.y, 1, 1, 1], vec![d.b, d.y, d.c, d.z, 1], &ks)?;
    RedistProtocol::new("trace-and-replace", &d, enc, dec, ResourceDims { m: 1, q: 1, e: 1, f: 1 })
}

// ---------------------------------------------------------------------------
// Channel plumbing
// ---------------------------------------------------------------------------

/// `ch` acting on the `targets` factors of a system with factor dims `dims`.
/// Output factors follow [`Channel::apply_vector`]: the channel outputs
/// replace the targets at the first target position.
fn lift(ch: &Channel, dims: &[usize], targets: &[usize]) -> Result<Channel> {
    let din: usize = dims.iter().product();
    let mut cols = Vec::with_capacity(din);
    let mut out_dims = Vec::new();
    for j in 0..din {
        let mut e = vec![c0(); din];
        e[j] = C64::new(1.0, 0.0);
        let (v, nd) = ch.apply_vector(&e, dims, targets)?;
        out_dims = nd;
        cols.push(v);
    }
    let env = out_dims.pop().expect("environment factor");
    let rows = cols[0].len();
    let v = CMatrix::from_fn(rows, din, |i, j| cols[j][i]);
    Ok(Channel { in_dims: dims.to_vec(), out_dims, env_dim: env, stinespring: v })
}

fn reshape(ch: &Channel, in_dims: Option<Vec<usize>>, out_dims: Option<Vec<usize>>) -> Result<Channel> {
    let mut out = ch.clone();
    if let Some(d) = in_dims {
        if d.iter().product::<usize>() != ch.in_dim() {
            return Err(Error::Layout(format!("cannot reshape input {:?} to {d:?}", ch.in_dims)));
        }
        out.in_dims = d;
    }
    if let Some(d) = out_dims {
        if d.iter().product::<usize>() != ch.out_dim() {
            return Err(Error::Layout(format!("cannot reshape output {:?} to {d:?}", ch.out_dims)));
        }
        out.out_dims = d;
    }
    Ok(out)
}

fn permutation(dims: &[usize], order: &[usize]) -> Result<Channel> {
    Channel::partial_trace(dims.to_vec(), order)
}

/// Sequential composition followed by Kraus-rank compression.
fn compose(first: &Channel, next: &Channel) -> Result<Channel> {
    let ks_a = first.kraus();
    let ks_b = next.kraus();
    let mut ks = Vec::with_capacity(ks_a.len() * ks_b.len());
    for a in &ks_a {
        for b in &ks_b {
            let k = b * a;
            if k.max_abs() > 0.0 {
                ks.push(k);
            }
        }
    }
    if ks.is_empty() {
        ks.push(CMatrix::zeros(next.out_dim(), first.in_dim()));
    }
    let ch = kraus_channel(first.in_dims.clone(), next.out_dims.clone(), &ks);
    compress(&ch)
}

fn kraus_channel(in_dims: Vec<usize>, out_dims: Vec<usize>, ks: &[CMatrix]) -> Channel {
    let din: usize = in_dims.iter().product();
    let dout: usize = out_dims.iter().product();
    let n = ks.len();
    let mut v = CMatrix::zeros(dout * n, din);
    for (k, op) in ks.iter().enumerate() {
        for i in 0..dout {
            for j in 0..din {
                v[(i * n + k, j)] = op[(i, j)];
            }
        }
    }
    Channel { in_dims, out_dims, env_dim: n, stinespring: v }
}

/// Replaces the Kraus set by an equivalent one of minimal size when the
/// environment is larger than needed.
fn compress(ch: &Channel) -> Result<Channel> {
    let n = ch.env_dim;
    if n <= 16 {
        return Ok(ch.clone());
    }
    let ks = ch.kraus();
    // H_kl = Tr(K_k† K_l); directions in its kernel are zero combinations.
    let h = CMatrix::from_fn(n, n, |k, l| ks[k].data().iter().zip(ks[l].data()).map(|(a, b)| a.conj() * b).sum());
    let e = numkit::hermitian_eig(&h)?;
    let top = e.values.first().copied().unwrap_or(0.0);
    let mut out = Vec::new();
    for (i, &lam) in e.values.iter().enumerate() {
        if lam <= 1e-14 * top.max(1e-300) {
            continue;
        }
        let u = e.vectors.column_vec(i);
        let mut k = CMatrix::zeros(ch.out_dim(), ch.in_dim());
        for (kk, op) in ks.iter().enumerate() {
            let w = u[kk].conj();
            if w.norm() == 0.0 {
                continue;
            }
            k = &k + &op.scale_c(w);
        }
        out.push(k);
    }
    if out.len() >= n {
        return Ok(ch.clone());
    }
    Ok(kraus_channel(ch.in_dims.clone(), ch.out_dims.clone(), &out))
}

/// X^a Z^b on C^d.
fn weyl(d: usize, a: usize, b: usize) -> CMatrix {
    let w = 2.0 * std::f64::consts::PI / d as f64;
    CMatrix::from_fn(d, d, |r, c| if r == (c + a) % d { C64::from_polar(1.0, w * (b * c) as f64) } else { c0() })
}

/// Measurement of a pair in the basis (X^a Z^b ⊗ I)|Φ⟩ with outcome (a, b)
/// written to a classical register of dimension d².
fn bell_measurement(d: usize) -> Channel {
    let n = d * d;
    let s = 1.0 / (d as f64).sqrt();
    let mut v = CMatrix::zeros(n * n, n);
    for a in 0..d {
        for b in 0..d {
            let ab = a * d + b;
            let w = weyl(d, a, b);
            // |Φ_ab⟩ = d^{-1/2} Σ_e X^aZ^b|e⟩|e⟩.
            for e in 0..d {
                for q in 0..d {
                    let amp = w[(q, e)] * s;
                    if amp.norm() > 0.0 {
                        v[(ab * n + ab, q * d + e)] = amp.conj();
                    }
                }
            }
        }
    }
    Channel { in_dims: vec![d, d], out_dims: vec![n], env_dim: n, stinespring: v }
}

/// Reads (a, b) from a classical register and applies X^a Z^b to a qudit.
fn controlled_weyl(d: usize) -> Channel {
    let n = d * d;
    let mut v = CMatrix::zeros(d * n, n * d);
    for m in 0..n {
        let w = weyl(d, m / d, m % d);
        for q in 0..d {
            for e in 0..d {
                v[(q * n + m, m * d + e)] = w[(q, e)];
            }
        }
    }
    Channel { in_dims: vec![n, d], out_dims: vec![d], env_dim: n, stinespring: v }
}

/// Replaces `lambda` qubits of Q by teleportation: 2λ classical bits on M
/// and λ extra ebits. Rates move by (+2λ, −λ, +λ, 0).
pub fn teleport_wrap(p: &RedistProtocol, src: &SourceDims, lambda: usize) -> Result<RedistProtocol> {
    if lambda == 0 {
        return Ok(p.clone());
    }
    let dt = 1usize << lambda;
    let r = p.dims;
    if r.q % dt != 0 {
        return Err(Error::Plan(format!("cannot teleport {lambda} qubits of a {}-dimensional Q", r.q)));
    }
    let qr = r.q / dt;
    let d = src;
    // Encoder: run the old encoder, then Bell-measure Q_t with the new E_A half.
    let e1 = lift(&p.encoder, &[d.a, d.x, d.c, d.z, r.e, dt], &[0, 1, 2, 3, 4])?;
    let e1 = reshape(&e1, None, Some(vec![d.a, d.x, dt, qr, r.m, r.f, dt]))?;
    let e2 = lift(&bell_measurement(dt), &e1.out_dims, &[2, 6])?;
    let e3 = permutation(&e2.out_dims, &[0, 1, 3, 4, 2, 5])?;
    let enc = compose(&compose(&e1, &e2)?, &e3)?;
    let enc = reshape(&enc, Some(vec![d.a, d.x, d.c, d.z, r.e * dt]), Some(vec![d.a, d.x, qr, r.m * dt * dt, r.f]))?;
    // Decoder: correct the new E_B half into Q_t, then run the old decoder.
    let in_dims = vec![d.b, d.y, qr, r.m, dt * dt, r.e, dt];
    let d1 = lift(&controlled_weyl(dt), &in_dims, &[4, 6])?;
    let d2 = permutation(&d1.out_dims, &[0, 1, 4, 2, 3, 5])?;
    let d3 = reshape(&p.decoder, Some(vec![d.b, d.y, dt, qr, r.m, r.e]), None)?;
    let dec = compose(&compose(&d1, &d2)?, &d3)?;
    let dec = reshape(&dec, Some(vec![d.b, d.y, qr, r.m * dt * dt, r.e * dt]), None)?;
    let dims = ResourceDims { m: r.m * dt * dt, q: qr, e: r.e * dt, f: r.f };
    RedistProtocol::new(&format!("{}+tp{lambda}", p.name), d, enc, dec, dims)
}

/// Replaces 2μ classical bits of M by dense coding: μ qubits on Q and μ
/// extra ebits. Rates move by (−2μ, +μ, +μ, 0).
pub fn dense_code_wrap(p: &RedistProtocol, src: &SourceDims, mu: usize) -> Result<RedistProtocol> {
    if mu == 0 {
        return Ok(p.clone());
    }
    let dd = 1usize << mu;
    let r = p.dims;
    if r.m % (dd * dd) != 0 {
        return Err(Error::Plan(format!("cannot dense-code {} bits of a {}-dimensional M", 2 * mu, r.m)));
    }
    let mr = r.m / (dd * dd);
    let d = src;
    let e1 = lift(&p.encoder, &[d.a, d.x, d.c, d.z, r.e, dd], &[0, 1, 2, 3, 4])?;
    let e1 = reshape(&e1, None, Some(vec![d.a, d.x, r.q, dd * dd, mr, r.f, dd]))?;
    let e2 = lift(&controlled_weyl(dd), &e1.out_dims, &[3, 6])?;
    let e3 = permutation(&e2.out_dims, &[0, 1, 3, 2, 4, 5])?;
    let enc = compose(&compose(&e1, &e2)?, &e3)?;
    let enc = reshape(&enc, Some(vec![d.a, d.x, d.c, d.z, r.e * dd]), Some(vec![d.a, d.x, dd * r.q, mr, r.f]))?;
    let in_dims = vec![d.b, d.y, dd, r.q, mr, r.e, dd];
    let d1 = lift(&bell_measurement(dd), &in_dims, &[2, 6])?;
    let d2 = permutation(&d1.out_dims, &[0, 1, 3, 2, 4, 5])?;
    let d3 = reshape(&p.decoder, Some(vec![d.b, d.y, r.q, dd * dd, mr, r.e]), None)?;
    let dec = compose(&compose(&d1, &d2)?, &d3)?;
    let dec = reshape(&dec, Some(vec![d.b, d.y, dd * r.q, mr, r.e * dd]), None)?;
    let dims = ResourceDims { m: mr, q: dd * r.q, e: r.e * dd, f: r.f };
    RedistProtocol::new(&format!("{}+dc{mu}", p.name), d, enc, dec, dims)
}

/// Protocol-level counterpart of the teleportation/dense-coding extension:
/// dense coding of μ units first, then teleportation of λ units.
pub fn tpdc_protocol(p: &RedistProtocol, src: &SourceDims, lambda: usize, mu: usize) -> Result<RedistProtocol> {
    let dc = dense_code_wrap(p, src, mu)?;
    teleport_wrap(&dc, src, lambda)
}

/// Adds k ebits that are passed through untouched (catalytic entanglement).
pub fn with_catalyst(p: &RedistProtocol, src: &SourceDims, k: usize) -> Result<RedistProtocol> {
    if k == 0 {
        return Ok(p.clone());
    }
    let dk = 1usize << k;
    let (d, r) = (src, p.dims);
    let enc = lift(&p.encoder, &[d.a, d.x, d.c, d.z, r.e, dk], &[0, 1, 2, 3, 4])?;
    let enc = reshape(&enc, Some(vec![d.a, d.x, d.c, d.z, r.e * dk]), Some(vec![d.a, d.x, r.q, r.m, r.f * dk]))?;
    let dec = lift(&p.decoder, &[d.b, d.y, r.q, r.m, r.e, dk], &[0, 1, 2, 3, 4])?;
    let dec = reshape(&dec, Some(vec![d.b, d.y, r.q, r.m, r.e * dk]), Some(vec![d.b, d.y, d.c, d.z, r.f * dk]))?;
    let dims = ResourceDims { e: r.e * dk, f: r.f * dk, ..r };
    RedistProtocol::new(&format!("{}+cat{k}", p.name), d, enc, dec, dims)
}

/// Creates k ebits by sending halves of locally prepared pairs over Q.
/// Rates move by (0, +k, −k, +k).
pub fn with_generated_pairs(p: &RedistProtocol, src: &SourceDims, k: usize) -> Result<RedistProtocol> {
    if k == 0 {
        return Ok(p.clone());
    }
    let dk = 1usize << k;
    let (d, r) = (src, p.dims);
    let phi = qstate::max_entangled(dk)?;
    // Encoder ⊗ |Φ⟩ on (Q_g, F_g), appended before the environment.
    let (dout, n) = (p.encoder.out_dim(), p.encoder.env_dim);
    let mut v = CMatrix::zeros(dout * dk * dk * n, p.encoder.in_dim());
    for o in 0..dout {
        for s in 0..dk * dk {
            for kk in 0..n {
                for i in 0..p.encoder.in_dim() {
                    let x = p.encoder.stinespring[(o * n + kk, i)];
                    if x.norm() > 0.0 {
                        v[((o * dk * dk + s) * n + kk, i)] = x * phi[s];
                    }
                }
            }
        }
    }
    let e1 = Channel { in_dims: p.encoder.in_dims.clone(), out_dims: vec![d.a, d.x, r.q, r.m, r.f, dk, dk], env_dim: n, stinespring: v };
    let e2 = permutation(&e1.out_dims, &[0, 1, 5, 2, 3, 4, 6])?;
    let enc = reshape(&compose(&e1, &e2)?, None, Some(vec![d.a, d.x, dk * r.q, r.m, r.f * dk]))?;
    let d1 = permutation(&[d.b, d.y, dk, r.q, r.m, r.e], &[0, 1, 3, 4, 5, 2])?;
    let d2 = lift(&p.decoder, &d1.out_dims, &[0, 1, 2, 3, 4])?;
    let dec = compose(&d1, &d2)?;
    let dec = reshape(&dec, Some(vec![d.b, d.y, dk * r.q, r.m, r.e]), Some(vec![d.b, d.y, d.c, d.z, r.f * dk]))?;
    let dims = ResourceDims { q: dk * r.q, f: r.f * dk, ..r };
    RedistProtocol::new(&format!("{}+gen{k}", p.name), d, enc, dec, dims)
}

// ---------------------------------------------------------------------------
// Running protocols
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ConstructionInfo {
    pub eps: f64,
    pub delta: f64,
    /// Traced distances of the selected (σ, U) for the two channels.
    pub lhs: [f64; 2],
    /// Summed Uhlmann overlaps for V and W.
    pub overlaps: [f64; 2],
    /// Σ_i 2√(1−F_i²) + (1−F_i²) over the two Uhlmann steps.
    pub chain_bound: f64,
    pub tries: usize,
    pub hypotheses_hold: bool,
    pub sigma: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProtocolReport {
    pub protocol: String,
    pub achieved_error: f64,
    /// 4√(12ε+6δ) for constructed protocols.
    pub budget: Option<f64>,
    pub tuple: RateTuple,
    pub dims: ResourceDims,
    pub seeds: Vec<u64>,
    pub m_offdiagonal: Option<f64>,
    pub construction: Option<ConstructionInfo>,
}

impl ProtocolReport {
    pub fn to_json(&self) -> String {
        let mut v = serde_json::to_value(self).expect("report serializes");
        round_json(&mut v);
        serde_json::to_string_pretty(&v).expect("json value serializes")
    }

    pub fn within_budget(&self) -> Option<bool> {
        self.budget.map(|b| self.achieved_error <= b + 1e-9)
    }
}

fn round_json(v: &mut serde_json::Value) {
    match v {
        serde_json::Value::Number(n) => {
            if let Some(x) = n.as_f64() {
                if !n.is_i64() && !n.is_u64() {
                    *v = serde_json::json!(region::round6(x));
                }
            }
        }
        serde_json::Value::Array(a) => a.iter_mut().for_each(round_json),
        serde_json::Value::Object(o) => o.values_mut().for_each(round_json),
        _ => {}
    }
}

/// Replaces a large environment by a compact one of dimension at most the
/// rest of the system.
fn shrink_env(w: Vec<C64>, d_rest: usize, d_env: usize) -> Result<(Vec<C64>, usize)> {
    if d_env <= d_rest {
        return Ok((w, d_env));
    }
    let m = CMatrix::from_vec(d_rest, d_env, w)?;
    let rho = &m * &m.adjoint();
    let e = numkit::hermitian_eig(&rho)?;
    let keep: Vec<usize> = (0..d_rest).filter(|&i| e.values[i] > 1e-15).collect();
    let r = keep.len().max(1);
    let mut out = vec![c0(); d_rest * r];
    for (k, &i) in keep.iter().enumerate() {
        let s = e.values[i].sqrt();
        for row in 0..d_rest {
            out[row * r + k] = e.vectors[(row, i)] * s;
        }
    }
    Ok((out, r))
}

/// ‖Tr_env |w⟩⟨w| − |t⟩⟨t|‖₁ for w on out ⊗ env.
fn mixed_pure_distance(w: &[C64], d_out: usize, d_env: usize, t: &[C64]) -> Result<f64> {
    let m = CMatrix::from_vec(d_out, d_env, w.to_vec())?;
    if d_out <= d_env + 1 {
        let rho = &(&m * &m.adjoint()) - &CMatrix::outer(t);
        return Ok(numkit::trace_norm(&rho));
    }
    // Nonzero spectrum of B D B† with B = [W | t], D = diag(1, …, 1, −1)
    // equals that of G^{1/2} D G^{1/2}, G = B†B.
    let k = d_env + 1;
    let b = CMatrix::from_fn(d_out, k, |i, j| if j < d_env { m[(i, j)] } else { t[i] });
    let g = &b.adjoint() * &b;
    let sg = numkit::sqrt_psd(&g.hermitian_part())?;
    let dmat = CMatrix::from_fn(k, k, |i, j| if i != j { c0() } else if i < d_env { C64::new(1.0, 0.0) } else { C64::new(-1.0, 0.0) });
    let h = &(&sg * &dmat) * &sg;
    Ok(numkit::hermitian_eig(&h.hermitian_part())?.values.iter().map(|x| x.abs()).sum())
}

fn check_protocol_dims(src: &HybridSource, p: &RedistProtocol) -> Result<()> {
    let d = src.dims();
    let r = p.dims;
    let exp_in = vec![d.a, d.x, d.c, d.z, r.e];
    let exp_out = vec![d.b, d.y, d.c, d.z, r.f];
    if p.encoder.in_dims != exp_in || p.decoder.out_dims != exp_out || p.decoder.in_dims != vec![d.b, d.y, r.q, r.m, r.e] {
        return Err(Error::Layout(format!(
            "protocol registers {:?} → {:?} do not fit source dims {:?}",
            p.encoder.in_dims, p.decoder.out_dims, d
        )));
    }
    Ok(())
}

/// Error of one ensemble member: ‖D∘E(ψ_xyz ⊗ Φ) − ψ_xyz ⊗ Φ'‖₁.
fn entry_error(src: &HybridSource, e: &SourceEntry, p: &RedistProtocol) -> Result<f64> {
    let d = src.dims();
    let r = p.dims;
    let dims = vec![d.a, d.x, d.b, d.y, d.c, d.z, d.r, r.e, r.e];
    let mut v = vec![c0(); dims.iter().product()];
    let s = 1.0 / (r.e as f64).sqrt();
    for a in 0..d.a {
        for b in 0..d.b {
            for c in 0..d.c {
                for rr in 0..d.r {
                    let amp = e.psi[((a * d.b + b) * d.c + c) * d.r + rr];
                    if amp.norm() == 0.0 {
                        continue;
                    }
                    for i in 0..r.e {
                        v[flat(&dims, &[a, e.x, b, e.y, c, e.z, rr, i, i])] = amp * s;
                    }
                }
            }
        }
    }
    // After the encoder: [A, X, Q, M, F_A, B, Y, R, E_B, envE].
    let (v, nd) = p.encoder.apply_vector(&v, &dims, &[0, 1, 4, 5, 7])?;
    let rest: usize = nd[..nd.len() - 1].iter().product();
    let (v, env_e) = shrink_env(v, rest, *nd.last().expect("env"))?;
    let mut nd = nd;
    *nd.last_mut().expect("env") = env_e;
    // After the decoder: [A, X, B, Y, C, Z, F_B, F_A, R, envE, envD].
    let (v, nd) = p.decoder.apply_vector(&v, &nd, &[5, 6, 2, 3, 8])?;
    let order = [0, 1, 2, 3, 4, 5, 8, 7, 6, 9, 10];
    let v = numkit::permute_vector(&v, &nd, &order)?;
    let nd: Vec<usize> = order.iter().map(|&i| nd[i]).collect();
    let d_out: usize = nd[..9].iter().product();
    let d_env = nd[9] * nd[10];
    let (v, d_env) = shrink_env(v, d_out, d_env)?;
    let tdims = vec![d.a, d.x, d.b, d.y, d.c, d.z, d.r, r.f, r.f];
    let mut t = vec![c0(); d_out];
    let sf = 1.0 / (r.f as f64).sqrt();
    for a in 0..d.a {
        for b in 0..d.b {
            for c in 0..d.c {
                for rr in 0..d.r {
                    let amp = e.psi[((a * d.b + b) * d.c + c) * d.r + rr];
                    for i in 0..r.f {
                        t[flat(&tdims, &[a, e.x, b, e.y, c, e.z, rr, i, i])] = amp * sf;
                    }
                }
            }
        }
    }
    mixed_pure_distance(&v, d_out, d_env, &t)
}

/// ‖D∘E(Ψ_s ⊗ Φ_{2^{e+e0}}) − Ψ_s ⊗ Φ_{2^{e0}}‖₁. Both sides are block
/// diagonal in the label copy T, so the norm splits over ensemble members.
pub fn run_protocol(src: &HybridSource, p: &RedistProtocol) -> Result<ProtocolReport> {
    check_protocol_dims(src, p)?;
    let mut err = 0.0;
    for e in src.entries() {
        err += e.p * entry_error(src, e, p)?;
    }
    Ok(ProtocolReport {
        protocol: p.name.clone(),
        achieved_error: err.clamp(0.0, 2.0),
        budget: None,
        tuple: p.tuple()?,
        dims: p.dims,
        seeds: Vec::new(),
        m_offdiagonal: None,
        construction: None,
    })
}

/// Largest Frobenius norm of the M-off-diagonal part of (E ⊗ id)(φ) over
/// random pure probes φ on input ⊗ reference.
pub fn m_offdiagonal_mass(p: &RedistProtocol, probes: usize, seed: u64) -> Result<f64> {
    let enc = &p.encoder;
    let din = enc.in_dim();
    let dm = enc.out_dims[3];
    let pre: usize = enc.out_dims[..3].iter().product();
    let post = enc.out_dims[4];
    let n = enc.env_dim;
    let mut worst: f64 = 0.0;
    for i in 0..probes {
        let mut rng = decouple::sample_rng(seed, i);
        let phi = numkit::random_pure_state(din * din, &mut rng);
        let (w, _) = numkit::apply_on_subsystems(&phi, &[din, din], &[0], &enc.stinespring)?;
        // w is indexed by ((pre, m, post, env), ref).
        let rows = pre * post * din;
        let blocks: Vec<CMatrix> = (0..dm)
            .map(|m| {
                CMatrix::from_fn(rows, n, |row, k| {
                    let (pp, rest) = (row / (post * din), row % (post * din));
                    let (fo, rf) = (rest / din, rest % din);
                    let o = (pp * dm + m) * post + fo;
                    w[(o * n + k) * din + rf]
                })
            })
            .collect();
        let grams: Vec<CMatrix> = blocks.iter().map(|b| &b.adjoint() * b).collect();
        let mut tot = 0.0;
        for a in 0..dm {
            for b in 0..dm {
                if a != b {
                    // ‖X_a X_b†‖_F² = Tr(G_a G_b).
                    tot += (&grams[a] * &grams[b]).trace().re.max(0.0);
                }
            }
        }
        worst = worst.max(tot.sqrt());
    }
    Ok(worst)
}

// ---------------------------------------------------------------------------
// Construction
// ---------------------------------------------------------------------------

/// Register assignment C ≅ C₁C₂C₃, Z ≅ Z_L Z_R for a dyadic rate tuple.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DimensionPlan {
    pub d_m: usize,
    pub d_q: usize,
    pub d_e: usize,
    pub d_f: usize,
    /// C₁ ≅ E_B, C₂ ≅ F_A, C₃ ≅ Q.
    pub d_c1: usize,
    pub d_c2: usize,
    pub d_c3: usize,
    pub j_l: usize,
    /// Z_R ≅ M.
    pub j_r: usize,
}

impl DimensionPlan {
    /// Size of the padded label register Z_L Z_R.
    pub fn j(&self) -> usize {
        self.j_l * self.j_r
    }

    pub fn d_c(&self) -> [usize; 3] {
        [self.d_c1, self.d_c2, self.d_c3]
    }
}

fn integral_bits(v: f64, what: &str) -> std::result::Result<usize, String> {
    let n = v.round();
    if (v - n).abs() > 1e-9 || n < 0.0 {
        return Err(format!("{what} = {v} is not a nonnegative integer"));
    }
    Ok(n as usize)
}

/// Assigns registers for a tuple with integral c, q, e+e0, e0 and
/// q + e + 2e0 = log d_C. Z is padded to a multiple of 2^c.
pub fn dimension_plan(src: &HybridSource, t: &RateTuple) -> Result<DimensionPlan> {
    t.validate()?;
    let parts = [(t.c, "c"), (t.q, "q"), (t.e + t.e0, "e+e0"), (t.e0, "e0")];
    let mut bits = [0usize; 4];
    let mut bad = Vec::new();
    for (k, (v, n)) in parts.iter().enumerate() {
        match integral_bits(*v, n) {
            Ok(b) => bits[k] = b,
            Err(m) => bad.push(m),
        }
    }
    if !bad.is_empty() {
        let up = |x: f64| x.max(0.0).ceil();
        let (c, q, ee0, e0) = (up(t.c), up(t.q), up(t.e + t.e0), up(t.e0));
        return Err(Error::Plan(format!(
            "{}; nearest integral tuple (c,q,e,e0) = ({c},{q},{},{e0})",
            bad.join("; "),
            ee0 - e0
        )));
    }
    let dim = |b: usize| -> Result<usize> {
        if b >= 13 || (1usize << b) > MAX_PLAN_DIM {
            return Err(Error::Dimension(format!("register of {b} qubits exceeds the plan limit")));
        }
        Ok(1usize << b)
    };
    let (d_m, d_q, d_e, d_f) = (dim(bits[0])?, dim(bits[1])?, dim(bits[2])?, dim(bits[3])?);
    let dc = src.dims().c;
    if d_e * d_f * d_q != dc {
        return Err(Error::Plan(format!(
            "q + e + 2e0 = {} but log d_C = {}",
            t.q + t.e + 2.0 * t.e0,
            (dc as f64).log2()
        )));
    }
    let dz = src.dims().z;
    let j_l = dz.div_ceil(d_m);
    Ok(DimensionPlan { d_m, d_q, d_e, d_f, d_c1: d_e, d_c2: d_f, d_c3: d_q, j_l, j_r: d_m })
}

/// Ψ_σ = Σ √p |x⟩|y⟩|σ(z)⟩^Z |z⟩^{Z''} |ψ_xyz⟩^{ABC''R} |xyz⟩^T with
/// factors [A, X, B, Y, Cpp, Zpp, R, T, Z]; Z has dimension |σ| ≥ d_Z.
pub fn build_psi_sigma(src: &HybridSource, sigma: &PermutationUnitary) -> Result<NamedVector> {
    let d = *src.dims();
    let j = sigma.sigma.len();
    if j < d.z {
        return Err(Error::Layout(format!("permutation on {j} labels cannot act on d_Z = {}", d.z)));
    }
    let dt = d.x * d.y * d.z;
    let names = ["A", "X", "B", "Y", "Cpp", "Zpp", "R", "T", "Z"];
    let mut out = NamedVector::zeros(&names, vec![d.a, d.x, d.b, d.y, d.c, d.z, d.r, dt, j]);
    for e in src.entries() {
        let s = e.p.sqrt();
        let t = src.t_index(e.x, e.y, e.z);
        for a in 0..d.a {
            for b in 0..d.b {
                for c in 0..d.c {
                    for r in 0..d.r {
                        let amp = e.psi[((a * d.b + b) * d.c + c) * d.r + r];
                        out.amplitudes[flat(&out.dims, &[a, e.x, b, e.y, c, e.z, r, t, sigma.sigma[e.z]])] += amp * s;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Ψ_{σ,1} = Ψ_σ ⊗ φ₁^{A1 C1} and Ψ_{σ,2} = Ψ_σ ⊗ φ₂^{B2 C2}, with Z split
/// into Z_L Z_R.
pub fn build_purifications(src: &HybridSource, sigma: &PermutationUnitary, plan: &DimensionPlan) -> Result<(NamedVector, NamedVector)> {
    if sigma.sigma.len() != plan.j() {
        return Err(Error::Layout(format!("permutation has {} labels, plan needs {}", sigma.sigma.len(), plan.j())));
    }
    let ps = build_psi_sigma(src, sigma)?.split("Z", &[("ZL", plan.j_l), ("ZR", plan.j_r)])?;
    let p1 = ps.tensor(&max_entangled_named("A1", "C1", plan.d_c1)?);
    let p2 = ps.tensor(&max_entangled_named("B2", "C2", plan.d_c2)?);
    Ok((p1, p2))
}

/// G_σ ∘ U applied to the purified source (Z padded to the plan), with
/// factors [A, X, B, Y, C1, C2, C3, R, T, ZL, ZR].
pub fn rotated_source(src: &HybridSource, sigma: &PermutationUnitary, u: &BlockUnitary, plan: &DimensionPlan) -> Result<NamedVector> {
    let d = *src.dims();
    let j = plan.j();
    if sigma.sigma.len() != j || u.j() != j || u.dc() != d.c {
        return Err(Error::Layout("permutation or block unitary does not match the plan".into()));
    }
    let dt = d.x * d.y * d.z;
    let names = ["A", "X", "B", "Y", "C", "R", "T", "Z"];
    let mut out = NamedVector::zeros(&names, vec![d.a, d.x, d.b, d.y, d.c, d.r, dt, j]);
    for e in src.entries() {
        let s = e.p.sqrt();
        let t = src.t_index(e.x, e.y, e.z);
        let uz = &u.blocks[e.z];
        for a in 0..d.a {
            for b in 0..d.b {
                for r in 0..d.r {
                    for c2 in 0..d.c {
                        let mut amp = c0();
                        for c in 0..d.c {
                            amp += uz[(c2, c)] * e.psi[((a * d.b + b) * d.c + c) * d.r + r];
                        }
                        out.amplitudes[flat(&out.dims, &[a, e.x, b, e.y, c2, r, t, sigma.sigma[e.z]])] += amp * s;
                    }
                }
            }
        }
    }
    out.split("C", &[("C1", plan.d_c1), ("C2", plan.d_c2), ("C3", plan.d_c3)])?.split("Z", &[("ZL", plan.j_l), ("ZR", plan.j_r)])
}

/// Purified source on [K, C, S₁ = AX, S₂ = BY, S₃ = R X'Y'] with K the
/// padded label register standing for both Z and its copy Z'.
fn structured_vector(src: &HybridSource, j: usize) -> (Vec<C64>, [usize; 5]) {
    let d = *src.dims();
    let dims = [j, d.c, d.a * d.x, d.b * d.y, d.r * d.x * d.y];
    let mut v = vec![c0(); dims.iter().product()];
    for e in src.entries() {
        let s = e.p.sqrt();
        for a in 0..d.a {
            for b in 0..d.b {
                for c in 0..d.c {
                    for r in 0..d.r {
                        let amp = e.psi[((a * d.b + b) * d.c + c) * d.r + r];
                        let s1 = a * d.x + e.x;
                        let s2 = b * d.y + e.y;
                        let s3 = (r * d.x + e.x) * d.y + e.y;
                        v[flat(&dims, &[e.z, c, s1, s2, s3])] += amp * s;
                    }
                }
            }
        }
    }
    (v, dims)
}

/// Restricts S to the support of its marginal (an isometry on S, which
/// leaves every distance used by the search unchanged).
fn compress_s(psi: &StructuredState) -> Result<StructuredState> {
    let rho_s = numkit::partial_trace_dims(&psi.matrix, &[psi.j * psi.dc, psi.ds], &[1])?;
    let e = numkit::hermitian_eig(&rho_s)?;
    let top = e.values.first().copied().unwrap_or(0.0);
    let keep: Vec<usize> = (0..psi.ds).filter(|&i| e.values[i] > 1e-13 * top.max(1e-300)).collect();
    if keep.len() == psi.ds {
        return Ok(psi.clone());
    }
    let r = keep.len().max(1);
    let w = CMatrix::from_fn(psi.ds, r, |i, k| if k < keep.len() { e.vectors[(i, keep[k])] } else { c0() });
    let big = numkit::kron_raw(&CMatrix::identity(psi.j * psi.dc), &w);
    let m = &(&big.adjoint() * &psi.matrix) * &big;
    StructuredState::new(psi.j, psi.dc, r, m.hermitian_part())
}

/// The two traced states searched over: S₁ traced (kept Z_L C₁) and S₂
/// traced (kept Z_L C₂).
pub fn traced_structured_states(src: &HybridSource, plan: &DimensionPlan) -> Result<[StructuredState; 2]> {
    let (v, dims) = structured_vector(src, plan.j());
    let dc = src.dims().c;
    let m1 = numkit::reduce_pure(&v, &dims, &[0, 1, 3, 4])?;
    let m2 = numkit::reduce_pure(&v, &dims, &[0, 1, 2, 4])?;
    let s1 = StructuredState::new(plan.j(), dc, dims[3] * dims[4], m1.hermitian_part())?;
    let s2 = StructuredState::new(plan.j(), dc, dims[2] * dims[4], m2.hermitian_part())?;
    Ok([compress_s(&s1)?, compress_s(&s2)?])
}

/// Dimension conditions of partial bi-decoupling for the purified source.
/// The four conditional min-entropies of Ψ are obtained by duality from
/// max-entropies of source marginals: H_min(ZC|Z'S₂S₃) = −H_max(ZC|AX),
/// its dephased version = −H_max(C|AXZ), and likewise with BY.
pub fn source_conditions(src: &HybridSource, plan: &DimensionPlan, delta: f64) -> Result<BidecouplingConditions> {
    let ev = Evaluator::new(src);
    let h = [
        -ev.hmax("ZC", "AX", 0.0)?,
        -ev.hmax("C", "AXZ", 0.0)?,
        -ev.hmax("ZC", "BY", 0.0)?,
        -ev.hmax("C", "BYZ", 0.0)?,
    ];
    Ok(BidecouplingConditions::evaluate(plan.d_c(), plan.j_r, delta, h))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum PairSearch {
    Found { sigma: PermutationUnitary, u: BlockUnitary, lhs: [f64; 2], tries: usize },
    Exhausted { tries: usize, best_max: f64 },
}

/// Samples (σ, U) with the seeded streams of [`decouple::draw_pair`] until
/// both traced distances are within 12ε+6δ.
pub fn select_pair(src: &HybridSource, plan: &DimensionPlan, eps: f64, delta: f64, seed: u64, max_tries: usize) -> Result<PairSearch> {
    let [p1, p2] = traced_structured_states(src, plan)?;
    let (a1, a2) = (decouple::averaged_structured(&p1), decouple::averaged_structured(&p2));
    let dims = vec![plan.j_l, plan.j_r, plan.d_c1, plan.d_c2, plan.d_c3];
    let ch1 = Channel::partial_trace(dims.clone(), &[0, 2])?;
    let ch2 = Channel::partial_trace(dims, &[0, 3])?;
    let target = 12.0 * eps + 6.0 * delta;
    let mut best = f64::INFINITY;
    for t in 0..max_tries {
        let (sigma, u) = decouple::draw_pair(seed, t, plan.j(), src.dims().c)?;
        let l1 = decouple::lhs_with_average(&p1, &a1, &u, &sigma, &ch1)?;
        let l2 = decouple::lhs_with_average(&p2, &a2, &u, &sigma, &ch2)?;
        best = best.min(l1.max(l2));
        if l1 <= target && l2 <= target {
            return Ok(PairSearch::Found { sigma, u, lhs: [l1, l2], tries: t + 1 });
        }
    }
    Ok(PairSearch::Exhausted { tries: max_tries, best_max: best })
}

/// Uhlmann isometry between two vectors for one value of Z_R. Returns the
/// matrix from the ordered complement of `a` to that of `b`, and the
/// overlap.
fn block_uhlmann(a: &NamedVector, a_order: &[&str], b: &NamedVector, b_order: &[&str], n_shared: usize) -> Result<(CMatrix, f64)> {
    let a = a.permuted(a_order)?;
    let b = b.permuted(b_order)?;
    let shared: Vec<usize> = (0..n_shared).collect();
    let r = numkit::uhlmann_isometry(&a.amplitudes, &a.dims, &shared, &b.amplitudes, &b.dims, &shared)?;
    if !r.overlap.is_finite() {
        return Err(Error::Numerical("Uhlmann overlap is not finite".into()));
    }
    Ok((r.isometry, r.overlap))
}

/// Adds failure Kraus operators |out0⟩⟨g|√λ for the defect I − V†V of a
/// partial isometry restricted to the given input columns.
fn defect_kraus(v_cols: &CMatrix) -> Result<Vec<(Vec<C64>, f64)>> {
    let n = v_cols.cols();
    let g = &v_cols.adjoint() * v_cols;
    let defect = &CMatrix::identity(n) - &g;
    let e = numkit::hermitian_eig(&defect.hermitian_part())?;
    if e.values.last().copied().unwrap_or(0.0) < -1e-8 {
        return Err(Error::Numerical("Uhlmann map is not a contraction".into()));
    }
    Ok((0..n).filter(|&i| e.values[i] > KRAUS_CUT).map(|i| (e.vectors.column_vec(i), e.values[i])).collect())
}

/// Encoder Tr_{Z_L} ∘ V_σ ∘ dephase(Z'') and decoder Tr_{Z_R} ∘ W, with V
/// and W computed blockwise in Z_R from the two purification pairs.
pub fn derive_encoder_decoder(
    src: &HybridSource,
    sigma: &PermutationUnitary,
    u: &BlockUnitary,
    plan: &DimensionPlan,
) -> Result<(RedistProtocol, [f64; 2])> {
    let d = *src.dims();
    let (p1, p2) = build_purifications(src, sigma, plan)?;
    let rot = rotated_source(src, sigma, u, plan)?;
    let (c1, c2, c3, jr) = (plan.d_c1, plan.d_c2, plan.d_c3, plan.j_r);
    // Encoder: V_zr maps [Cpp, Zpp, A, X, A1] to [C2, C3, A, X].
    let a1_order = ["C1", "ZL", "B", "Y", "R", "T", "Cpp", "Zpp", "A", "X", "A1"];
    let b1_order = ["C1", "ZL", "B", "Y", "R", "T", "C2", "C3", "A", "X"];
    let in_e = [d.a, d.x, d.c, d.z, c1];
    let out_e = [d.a, d.x, c3, jr, c2];
    let din_e: usize = in_e.iter().product();
    let dout_e: usize = out_e.iter().product();
    let mut vs = Vec::with_capacity(jr);
    let mut overlap_v = 0.0;
    for zr in 0..jr {
        let (v, ov) = block_uhlmann(&p1.fixed("ZR", zr)?, &a1_order, &rot.fixed("ZR", zr)?, &b1_order, 6)?;
        overlap_v += ov;
        vs.push(v);
    }
    let mut enc_k: Vec<CMatrix> = Vec::new();
    let col_dims = [d.c, d.z, d.a, d.x, c1];
    let row_dims = [c2, c3, d.a, d.x];
    for z in 0..d.z {
        let zr = sigma.sigma[z] % jr;
        let v = &vs[zr];
        let mut k = CMatrix::zeros(dout_e, din_e);
        let sub_n = d.c * d.a * d.x * c1;
        let mut sub = CMatrix::zeros(v.rows(), sub_n);
        for c in 0..d.c {
            for a in 0..d.a {
                for x in 0..d.x {
                    for e in 0..c1 {
                        let col = flat(&col_dims, &[c, z, a, x, e]);
                        let sc = flat(&[d.c, d.a, d.x, c1], &[c, a, x, e]);
                        let inp = flat(&in_e, &[a, x, c, z, e]);
                        for q2 in 0..c2 {
                            for q3 in 0..c3 {
                                for a2 in 0..d.a {
                                    for x2 in 0..d.x {
                                        let row = flat(&row_dims, &[q2, q3, a2, x2]);
                                        let val = v[(row, col)];
                                        sub[(row, sc)] = val;
                                        k[(flat(&out_e, &[a2, x2, q3, zr, q2]), inp)] = val;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        enc_k.push(k);
        for (g, lam) in defect_kraus(&sub)? {
            let mut kf = CMatrix::zeros(dout_e, din_e);
            let out0 = flat(&out_e, &[0, 0, 0, zr, 0]);
            for c in 0..d.c {
                for a in 0..d.a {
                    for x in 0..d.x {
                        for e in 0..c1 {
                            let sc = flat(&[d.c, d.a, d.x, c1], &[c, a, x, e]);
                            kf[(out0, flat(&in_e, &[a, x, c, z, e]))] = g[sc].conj() * lam.sqrt();
                        }
                    }
                }
            }
            enc_k.push(kf);
        }
    }
    let enc = compress(&kraus_channel(in_e.to_vec(), out_e.to_vec(), &enc_k))?;
    // Decoder: W_zr maps [C1, C3, B, Y] to [Cpp, Zpp, B, Y, B2].
    let a2_order = ["C2", "ZL", "A", "X", "R", "T", "C1", "C3", "B", "Y"];
    let b2_order = ["C2", "ZL", "A", "X", "R", "T", "Cpp", "Zpp", "B", "Y", "B2"];
    let in_d = [d.b, d.y, c3, jr, c1];
    let out_d = [d.b, d.y, d.c, d.z, c2];
    let din_d: usize = in_d.iter().product();
    let dout_d: usize = out_d.iter().product();
    let wcol = [c1, c3, d.b, d.y];
    let wrow = [d.c, d.z, d.b, d.y, c2];
    let mut dec_k: Vec<CMatrix> = Vec::new();
    let mut overlap_w = 0.0;
    for m in 0..jr {
        let (w, ov) = block_uhlmann(&rot.fixed("ZR", m)?, &a2_order, &p2.fixed("ZR", m)?, &b2_order, 6)?;
        overlap_w += ov;
        let mut k = CMatrix::zeros(dout_d, din_d);
        for e in 0..c1 {
            for q3 in 0..c3 {
                for b in 0..d.b {
                    for y in 0..d.y {
                        let col = flat(&wcol, &[e, q3, b, y]);
                        let inp = flat(&in_d, &[b, y, q3, m, e]);
                        for c in 0..d.c {
                            for z in 0..d.z {
                                for b2 in 0..d.b {
                                    for y2 in 0..d.y {
                                        for f in 0..c2 {
                                            let val = w[(flat(&wrow, &[c, z, b2, y2, f]), col)];
                                            k[(flat(&out_d, &[b2, y2, c, z, f]), inp)] = val;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        dec_k.push(k);
        for (g, lam) in defect_kraus(&w)? {
            let mut kf = CMatrix::zeros(dout_d, din_d);
            for e in 0..c1 {
                for q3 in 0..c3 {
                    for b in 0..d.b {
                        for y in 0..d.y {
                            kf[(0, flat(&in_d, &[b, y, q3, m, e]))] = g[flat(&wcol, &[e, q3, b, y])].conj() * lam.sqrt();
                        }
                    }
                }
            }
            dec_k.push(kf);
        }
    }
    let dec = compress(&kraus_channel(in_d.to_vec(), out_d.to_vec(), &dec_k))?;
    let dims = ResourceDims { m: plan.d_m, q: plan.d_q, e: plan.d_e, f: plan.d_f };
    let p = RedistProtocol::new("constructed", &d, enc, dec, dims)?;
    Ok((p, [overlap_v, overlap_w]))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConstructParams {
    pub tuple: RateTuple,
    pub eps: f64,
    pub delta: f64,
    pub seed: u64,
    pub max_tries: usize,
    pub probes: usize,
}

impl ConstructParams {
    pub fn new(tuple: RateTuple, eps: f64, delta: f64, seed: u64) -> Self {
        ConstructParams { tuple, eps, delta, seed, max_tries: 100, probes: 20 }
    }
}

#[derive(Clone, Debug)]
pub struct Construction {
    pub protocol: RedistProtocol,
    pub plan: DimensionPlan,
    pub conditions: BidecouplingConditions,
    pub report: ProtocolReport,
}

/// Plans registers, selects (σ, U), derives the encoder and decoder and
/// runs the result. Fails with a plan error when no pair is found.
pub fn construct_protocol(src: &HybridSource, params: &ConstructParams) -> Result<Construction> {
    let (eps, delta) = (params.eps, params.delta);
    if !(0.0..1.0).contains(&eps) || !(delta > 0.0 && delta <= 1.0) {
        return Err(Error::Domain(format!("need 0 ≤ ε < 1 and 0 < δ ≤ 1, got ε = {eps}, δ = {delta}")));
    }
    let plan = dimension_plan(src, &params.tuple)?;
    let conditions = source_conditions(src, &plan, delta)?;
    let (sigma, u, lhs, tries) = match select_pair(src, &plan, eps, delta, params.seed, params.max_tries)? {
        PairSearch::Found { sigma, u, lhs, tries } => (sigma, u, lhs, tries),
        PairSearch::Exhausted { tries, best_max } => {
            return Err(Error::Plan(format!(
                "no (sigma, U) within 12eps+6delta = {} after {tries} tries (best max distance {})",
                region::fmt6(12.0 * eps + 6.0 * delta),
                region::fmt6(best_max)
            )))
        }
    };
    let (protocol, overlaps) = derive_encoder_decoder(src, &sigma, &u, &plan)?;
    let mut report = run_protocol(src, &protocol)?;
    let step = |f: f64| {
        let loss = (1.0 - f * f).max(0.0);
        2.0 * loss.sqrt() + loss
    };
    report.budget = Some(4.0 * (12.0 * eps + 6.0 * delta).sqrt());
    report.seeds = vec![params.seed];
    report.m_offdiagonal = Some(m_offdiagonal_mass(&protocol, params.probes, params.seed ^ 0x9e37_79b9)?);
    report.construction = Some(ConstructionInfo {
        eps,
        delta,
        lhs,
        overlaps,
        chain_bound: step(overlaps[0]) + step(overlaps[1]),
        tries,
        hypotheses_hold: conditions.all_hold(),
        sigma: sigma.sigma.clone(),
    });
    Ok(Construction { protocol, plan, conditions, report })
}

// ---------------------------------------------------------------------------
// Projection and converse audit
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct ProjectedSource {
    /// Projected ensemble, renormalized so it is a valid source.
    pub source: HybridSource,
    /// Tr Ψ_{s,Π}.
    pub weight: f64,
    pub rank: usize,
    /// Projector Π on C.
    pub projector: CMatrix,
    /// The sub-normalized projected state Ψ_{s,Π} on the full source layout.
    pub state: Option<LabeledState>,
}

/// Projects C onto the top 2^{H_max'^{ε²/8}(C)} eigenvectors of its marginal.
pub fn project_source(src: &HybridSource, eps: f64) -> Result<ProjectedSource> {
    if !(eps > 0.0 && eps < 1.0) {
        return Err(Error::Domain(format!("need 0 < ε < 1, got {eps}")));
    }
    let d = *src.dims();
    let rho_c = src.marginal(&["C"])?.matrix;
    let k = crate::entropy::hmax_prime_matrix(&rho_c, eps * eps / 8.0)?.exp2().round() as usize;
    let e = numkit::hermitian_eig(&rho_c)?;
    let proj = CMatrix::from_fn(d.c, d.c, |i, j| (0..k).map(|t| e.vectors[(i, t)] * e.vectors[(j, t)].conj()).sum());
    let mut entries = Vec::new();
    let mut weight = 0.0;
    for en in src.entries() {
        let mut psi = vec![c0(); en.psi.len()];
        for a in 0..d.a {
            for b in 0..d.b {
                for r in 0..d.r {
                    for c2 in 0..d.c {
                        let mut amp = c0();
                        for c in 0..d.c {
                            amp += proj[(c2, c)] * en.psi[((a * d.b + b) * d.c + c) * d.r + r];
                        }
                        psi[((a * d.b + b) * d.c + c2) * d.r + r] = amp;
                    }
                }
            }
        }
        let nrm = numkit::vec_norm(&psi);
        weight += en.p * nrm * nrm;
        entries.push((en.x, en.y, en.z, en.p * nrm * nrm, psi, nrm));
    }
    let state = match src.build_source() {
        Ok(full) => {
            let sub: Vec<SourceEntry> =
                entries.iter().filter(|x| x.5 > 0.0).map(|x| SourceEntry { x: x.0, y: x.1, z: x.2, p: x.3, psi: x.4.iter().map(|a| a / x.5).collect() }).collect();
            let mut m = CMatrix::zeros(full.matrix.rows(), full.matrix.cols());
            let tmp = HybridSource::new(d, sub.iter().map(|s| SourceEntry { p: s.p / weight, ..s.clone() }).collect())?;
            let st = tmp.build_source()?;
            for i in 0..m.rows() {
                for j in 0..m.cols() {
                    m[(i, j)] = st.matrix[(i, j)] * weight;
                }
            }
            Some(LabeledState::new_unchecked(m, full.layout)?)
        }
        Err(Error::Dimension(_)) => None,
        Err(e) => return Err(e),
    };
    let kept: Vec<SourceEntry> = entries
        .into_iter()
        .filter(|x| x.5 > 1e-15)
        .map(|(x, y, z, p, psi, nrm)| SourceEntry { x, y, z, p: p / weight, psi: psi.iter().map(|a| a / nrm).collect() })
        .collect();
    Ok(ProjectedSource { source: HybridSource::new(d, kept)?, weight, rank: k, projector: proj, state })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub protocol: String,
    pub tuple: RateTuple,
    pub eps: f64,
    /// Measured error used as δ.
    pub delta: f64,
    pub bound: BoundReport,
    pub checks: Vec<TupleCheck>,
    pub violations: usize,
}

/// Measured errors below this are audited as δ = 0.
pub const AUDIT_ZERO: f64 = 1e-10;

/// Runs the protocol, evaluates the converse at the measured δ and checks
/// the protocol's tuple against it.
pub fn audit_converse(src: &HybridSource, p: &RedistProtocol, eps: f64) -> Result<AuditReport> {
    let run = run_protocol(src, p)?;
    let delta = if run.achieved_error < AUDIT_ZERO { 0.0 } else { run.achieved_error };
    let bound = region::converse_bound(src, eps, delta)?;
    let checks = region::check_tuple(&bound, &run.tuple);
    let violations = checks.iter().filter(|c| !c.satisfied).count();
    Ok(AuditReport { protocol: p.name.clone(), tuple: run.tuple, eps, delta, bound, checks, violations })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::rng_from_seed;
    use crate::qstate::SourceDims;

    fn cz(re: f64) -> C64 {
        C64::new(re, 0.0)
    }

    /// GHZ on ABC with X = Y = Z a shared uniform bit.
    fn ghz_labelled() -> HybridSource {
        let dims = SourceDims { a: 2, b: 2, c: 2, x: 2, y: 2, z: 2, ..SourceDims::trivial() };
        let s = 0.5f64.sqrt();
        let mut psi = vec![cz(0.0); 8];
        psi[0] = cz(s);
        psi[7] = cz(s);
        let entries = (0..2).map(|k| SourceEntry { x: k, y: k, z: k, p: 0.5, psi: psi.clone() }).collect();
        HybridSource::new(dims, entries).unwrap()
    }

    fn random_source(dims: SourceDims, seed: u64) -> HybridSource {
        HybridSource::random(dims, &mut rng_from_seed(seed)).unwrap()
    }

    #[test]
    fn plan_examples() {
        let s2 = random_source(SourceDims { b: 2, c: 2, ..SourceDims::trivial() }, 1);
        let p = dimension_plan(&s2, &RateTuple::new(0.0, 1.0, 0.0, 0.0).unwrap()).unwrap();
        assert_eq!((p.d_c1, p.d_c2, p.d_c3, p.j_r), (1, 1, 2, 1));
        let s4 = random_source(SourceDims { b: 2, c: 4, ..SourceDims::trivial() }, 2);
        let p = dimension_plan(&s4, &RateTuple::new(0.0, 1.0, 1.0, 0.0).unwrap()).unwrap();
        assert_eq!((p.d_c1, p.d_c3), (2, 2));
        let bad = dimension_plan(&s4, &RateTuple::new(0.0, 1.0, 0.0, 0.0).unwrap());
        assert!(matches!(bad, Err(Error::Plan(_))));
        let frac = dimension_plan(&s4, &RateTuple::new(0.5, 1.0, 1.0, 0.0).unwrap());
        match frac {
            Err(Error::Plan(m)) => assert!(m.contains("(1,1,1,0)"), "{m}"),
            other => panic!("expected plan error, got {other:?}"),
        }
    }

    #[test]
    fn psi_sigma_reproduces_copy_and_permutation() {
        let src = random_source(SourceDims { b: 2, c: 2, z: 3, ..SourceDims::trivial() }, 3);
        let sigma = PermutationUnitary::new(vec![2, 0, 1]).unwrap();
        let ps = build_psi_sigma(&src, &sigma).unwrap();
        // Independent route: purified source, copy Z, then permute the copy.
        let (v, layout) = src.build_purified_source().unwrap();
        let dims = layout.dims(); // X Y Z A B C R T
        let copy = CMatrix::from_fn(9, 3, |r, c| if r == c * 3 + sigma.sigma[c] { cz(1.0) } else { cz(0.0) });
        let (w, nd) = numkit::apply_on_subsystems(&v, &dims, &[2], &copy).unwrap();
        let nv = NamedVector { amplitudes: w, names: ["X", "Y", "ZZ", "A", "B", "C", "R", "T"].iter().map(|s| s.to_string()).collect(), dims: nd };
        let nv = nv.split("ZZ", &[("Zpp", 3), ("Z", 3)]).unwrap();
        let nv = nv.permuted(&["A", "X", "B", "Y", "C", "Zpp", "R", "T", "Z"]).unwrap();
        let diff: f64 = nv.amplitudes.iter().zip(&ps.amplitudes).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max);
        assert!(diff < 1e-10, "{diff}");
        // Marginal on everything but Z is unchanged by σ.
        let id = build_psi_sigma(&src, &PermutationUnitary::identity(3)).unwrap();
        let keep = ["A", "X", "B", "Y", "Cpp", "Zpp", "R", "T"];
        let d = &ps.reduced(&keep).unwrap() - &id.reduced(&keep).unwrap();
        assert!(d.max_abs() < 1e-10);
    }

    #[test]
    fn purification_marginals_match_averaged_state() {
        let src = random_source(SourceDims { a: 2, b: 2, c: 2, z: 2, ..SourceDims::trivial() }, 4);
        let plan = dimension_plan(&src, &RateTuple::new(1.0, 0.0, 1.0, 0.0).unwrap()).unwrap();
        assert_eq!((plan.d_c1, plan.d_c2, plan.d_c3), (2, 1, 1));
        let sigma = PermutationUnitary::new(vec![1, 0]).unwrap();
        let (p1, _) = build_purifications(&src, &sigma, &plan).unwrap();
        // Marginal on C1 Z_L B̂ R̂ Z' must be Tr_{Z_R C2 C3} G_σ(Ψ_av); with
        // a trivial Z_L and R this is π^{C1} ⊗ Σ_z p_z ψ_z^B ⊗ |z⟩⟨z|^{Z'}.
        let got = p1.reduced(&["C1", "B", "T"]).unwrap();
        let [s1, _] = traced_structured_states(&src, &plan).unwrap();
        let av = decouple::averaged_structured(&s1);
        let ch = Channel::partial_trace(vec![plan.j_l, plan.j_r, 2, 1, 1], &[0, 2]).unwrap();
        let want = decouple::transformed_output(&av, &BlockUnitary::identity(2, 2), &sigma, &ch).unwrap();
        // `want` is on Z' ⊗ C1 ⊗ S (S compressed); compare spectra.
        let mut g = numkit::hermitian_eig(&got).unwrap().values;
        let mut w = numkit::hermitian_eig(&want).unwrap().values;
        g.retain(|x| *x > 1e-12);
        w.retain(|x| *x > 1e-12);
        assert_eq!(g.len(), w.len());
        for (a, b) in g.iter().zip(&w) {
            assert!((a - b).abs() < 1e-10);
        }
        assert!((got.trace().re - 1.0).abs() < 1e-10);
    }

    #[test]
    fn source_conditions_match_structured_sdp() {
        let src = random_source(SourceDims { a: 2, b: 2, c: 2, z: 2, ..SourceDims::trivial() }, 5);
        let plan = dimension_plan(&src, &RateTuple::new(1.0, 1.0, 0.0, 0.0).unwrap()).unwrap();
        let c = source_conditions(&src, &plan, 0.5).unwrap();
        let (v, dims) = structured_vector(&src, plan.j());
        let m1 = numkit::reduce_pure(&v, &dims, &[0, 1, 3, 4]).unwrap();
        let s1 = StructuredState::new(2, 2, dims[3] * dims[4], m1.hermitian_part()).unwrap();
        let m2 = numkit::reduce_pure(&v, &dims, &[0, 1, 2, 4]).unwrap();
        let s2 = StructuredState::new(2, 2, dims[2] * dims[4], m2.hermitian_part()).unwrap();
        let direct = [
            decouple::hmin_structured(&s1).unwrap(),
            decouple::hmin_structured_dephased(&s1).unwrap(),
            decouple::hmin_structured(&s2).unwrap(),
            decouple::hmin_structured_dephased(&s2).unwrap(),
        ];
        let dual = [c.hmin_s2s3, c.hmin_s2s3_dephased, c.hmin_s1s3, c.hmin_s1s3_dephased];
        for (a, b) in direct.iter().zip(&dual) {
            assert!((a - b).abs() < 1e-5, "{direct:?} vs {dual:?}");
        }
    }

    #[test]
    fn identity_protocol_is_exact_and_m_diagonal() {
        let src = random_source(SourceDims { a: 2, b: 2, c: 2, x: 2, z: 2, ..SourceDims::trivial() }, 6);
        let p = identity_protocol(&src).unwrap();
        let rep = run_protocol(&src, &p).unwrap();
        assert!(rep.achieved_error < 1e-10, "{}", rep.achieved_error);
        assert_eq!(rep.tuple.as_array(), [1.0, 1.0, 0.0, 0.0]);
        assert!(m_offdiagonal_mass(&p, 20, 1).unwrap() < M_DIAG_TOL);
    }

    #[test]
    fn undephased_encoder_is_flagged() {
        let src = random_source(SourceDims { b: 2, c: 2, z: 2, ..SourceDims::trivial() }, 7);
        let p = identity_protocol(&src).unwrap();
        let bad = RedistProtocol { encoder: Channel::identity(p.encoder.in_dims.clone()), ..p };
        assert!(m_offdiagonal_mass(&bad, 5, 1).unwrap() > 1e-3);
    }

    #[test]
    fn trace_and_replace_matches_direct_distance() {
        let src = random_source(SourceDims { a: 2, b: 2, c: 2, ..SourceDims::trivial() }, 8);
        let xi = numkit::random_density(2, 2, &mut rng_from_seed(9));
        let p = trace_and_replace(&src, &xi).unwrap();
        let rep = run_protocol(&src, &p).unwrap();
        // ‖Ψ_s − Ψ_s^{ÂB̂R̂} ⊗ ξ‖₁ on the full layout X Y Z A B C R T.
        let st = src.build_source().unwrap();
        let dims = st.layout.dims();
        let rest = numkit::partial_trace_dims(&st.matrix, &dims, &[0, 1, 2, 3, 4, 6, 7]).unwrap();
        let prod = numkit::kron_raw(&rest, &xi);
        let mut ord_dims = dims.clone();
        ord_dims.remove(5);
        ord_dims.push(2);
        let back = numkit::permute_operator(&prod, &ord_dims, &[0, 1, 2, 3, 4, 7, 5, 6]).unwrap();
        let want = numkit::trace_norm(&(&st.matrix - &back));
        assert!((rep.achieved_error - want).abs() < 1e-9, "{} vs {want}", rep.achieved_error);
    }

    #[test]
    fn teleportation_and_dense_coding_preserve_exactness() {
        let src = random_source(SourceDims { a: 2, b: 2, c: 2, z: 4, ..SourceDims::trivial() }, 10);
        let id = identity_protocol(&src).unwrap();
        let d = *src.dims();
        let tp = teleport_wrap(&id, &d, 1).unwrap();
        assert_eq!(tp.tuple().unwrap().as_array(), [4.0, 0.0, 1.0, 0.0]);
        assert!(run_protocol(&src, &tp).unwrap().achieved_error < 1e-9);
        let dc = dense_code_wrap(&id, &d, 1).unwrap();
        assert_eq!(dc.tuple().unwrap().as_array(), [0.0, 2.0, 1.0, 0.0]);
        assert!(run_protocol(&src, &dc).unwrap().achieved_error < 1e-9);
        let both = tpdc_protocol(&id, &d, 1, 1).unwrap();
        let want = region::tpdc_extend(&id.tuple().unwrap(), 1.0, 1.0, 0.0).unwrap();
        assert_eq!(both.tuple().unwrap(), want);
        assert!(run_protocol(&src, &both).unwrap().achieved_error < 1e-9);
        for p in [&tp, &dc, &both] {
            assert!(m_offdiagonal_mass(p, 5, 2).unwrap() < M_DIAG_TOL, "{}", p.name);
        }
    }

    #[test]
    fn catalyst_and_generated_pairs_are_exact() {
        let src = random_source(SourceDims { a: 2, b: 2, c: 2, ..SourceDims::trivial() }, 11);
        let d = *src.dims();
        let id = identity_protocol(&src).unwrap();
        let cat = with_catalyst(&id, &d, 1).unwrap();
        assert_eq!(cat.tuple().unwrap().as_array(), [0.0, 1.0, 0.0, 1.0]);
        assert!(run_protocol(&src, &cat).unwrap().achieved_error < 1e-9);
        let gen = with_generated_pairs(&id, &d, 1).unwrap();
        assert_eq!(gen.tuple().unwrap().as_array(), [0.0, 2.0, -1.0, 1.0]);
        assert!(run_protocol(&src, &gen).unwrap().achieved_error < 1e-9);
    }

    #[test]
    fn noisy_identity_error_matches_depolarizing_formula() {
        // Pure source with C maximally entangled with B: the depolarized
        // output is (1−p)Φ + p π⊗π, at trace distance 2p(1 − 1/d²) from Φ.
        let dims = SourceDims { b: 2, c: 2, ..SourceDims::trivial() };
        let src = HybridSource::pure(dims, qstate::max_entangled(2).unwrap()).unwrap();
        let p = noisy_identity(&src, 0.2).unwrap();
        let e = run_protocol(&src, &p).unwrap().achieved_error;
        assert!((e - 2.0 * 0.2 * 0.75).abs() < 1e-9, "{e}");
    }

    #[test]
    fn constructed_protocol_on_labelled_ghz() {
        let src = ghz_labelled();
        let t = RateTuple::new(1.0, 1.0, 0.0, 0.0).unwrap();
        let c = construct_protocol(&src, &ConstructParams::new(t, 0.0, 0.9, 7)).unwrap();
        assert!(c.conditions.all_hold(), "{:?}", c.conditions);
        let r = &c.report;
        let info = r.construction.as_ref().unwrap();
        assert!(r.achieved_error < 1e-8, "{}", r.achieved_error);
        assert!(r.achieved_error <= info.chain_bound + 1e-9);
        assert!(r.m_offdiagonal.unwrap() < M_DIAG_TOL);
        assert!(r.within_budget().unwrap());
    }

    #[test]
    fn constructed_protocol_respects_uhlmann_chain() {
        for seed in 0..3 {
            let src = random_source(SourceDims { a: 2, b: 2, c: 2, z: 2, ..SourceDims::trivial() }, 20 + seed);
            let t = RateTuple::new(0.0, 1.0, 0.0, 0.0).unwrap();
            let c = construct_protocol(&src, &ConstructParams::new(t, 0.0, 1.0, seed)).unwrap();
            let info = c.report.construction.clone().unwrap();
            for k in 0..2 {
                // Fuchs–van de Graaf: F ≥ 1 − L/2 for the shared marginals.
                assert!(info.overlaps[k] >= 1.0 - info.lhs[k] / 2.0 - 1e-8, "{info:?}");
            }
            assert!(c.report.achieved_error <= info.chain_bound + 1e-8, "{} > {}", c.report.achieved_error, info.chain_bound);
            assert!(c.report.m_offdiagonal.unwrap() < M_DIAG_TOL);
        }
    }

    #[test]
    fn projection_examples() {
        // Eigenvalues (0.97, 0.03) on C with ε²/8 = 0.03125 truncate to rank 1.
        let dims = SourceDims { c: 2, r: 2, ..SourceDims::trivial() };
        let psi = vec![cz(0.97f64.sqrt()), cz(0.0), cz(0.0), cz(0.03f64.sqrt())];
        let src = HybridSource::pure(dims, psi).unwrap();
        let pr = project_source(&src, 0.5).unwrap();
        assert_eq!(pr.rank, 1);
        assert!((pr.weight - 0.97).abs() < 1e-12);
        let tiny = project_source(&src, 1e-3).unwrap();
        assert_eq!(tiny.rank, 2);
        assert!((tiny.weight - 1.0).abs() < 1e-12);
        for seed in 0..5 {
            let s = random_source(SourceDims { b: 2, c: 3, x: 2, ..SourceDims::trivial() }, 30 + seed);
            for eps in [0.3, 0.6, 0.9] {
                let pr = project_source(&s, eps).unwrap();
                let full = s.build_source().unwrap().matrix;
                let m = numkit::metrics(&full, &pr.state.as_ref().unwrap().matrix).unwrap();
                assert!(m.purified_distance <= eps / 2.0 + 1e-9, "P = {} at ε = {eps}", m.purified_distance);
                assert!(m.trace_distance <= eps / 2f64.sqrt() + 1e-9);
            }
        }
    }

    #[test]
    fn identity_audit_has_no_violations() {
        let src = random_source(SourceDims { a: 2, b: 2, c: 2, z: 2, ..SourceDims::trivial() }, 12);
        let p = identity_protocol(&src).unwrap();
        let a = audit_converse(&src, &p, 0.01).unwrap();
        assert_eq!(a.delta, 0.0);
        assert_eq!(a.violations, 0, "{:?}", a.checks);
    }
}
