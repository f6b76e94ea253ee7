//! Randomized partial decoupling: block-diagonal Haar unitaries, random
//! permutations of the classical label, the averaged state, the distance
//! from it after a channel, and the unsmoothed upper bound on that distance.
//!
//! States have the form Ψ = Σ_jk |j⟩⟨k|^Z ⊗ ψ_jk^{CS} ⊗ |j⟩⟨k|^{Z'}. Since Z'
//! copies Z, Ψ is stored on the support K ⊗ C ⊗ S with K ≅ Z ≅ Z', which
//! keeps every program at dimension J·d_C·d_S.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::entropy;
use crate::numkit::{self, rng_from_seed, CMatrix, Channel, Rng, C64};
use crate::qstate::{Kind, LabeledState, RegisterLayout, Subsystem};
use crate::sdp::{self, SdpProblem, SdpStatus};
use crate::{Error, Result};

const STRUCTURE_TOL: f64 = 1e-10;

// ---------------------------------------------------------------------------
// Random unitaries
// ---------------------------------------------------------------------------

/// U = Σ_j |j⟩⟨j| ⊗ U_j on Z ⊗ C.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockUnitary {
    pub blocks: Vec<CMatrix>,
}

impl BlockUnitary {
    pub fn identity(j: usize, dc: usize) -> Self {
        BlockUnitary { blocks: vec![CMatrix::identity(dc); j] }
    }

    pub fn j(&self) -> usize {
        self.blocks.len()
    }

    pub fn dc(&self) -> usize {
        self.blocks.first().map_or(1, |b| b.rows())
    }

    pub fn assemble(&self) -> CMatrix {
        let dc = self.dc();
        let mut u = CMatrix::zeros(self.j() * dc, self.j() * dc);
        for (j, b) in self.blocks.iter().enumerate() {
            u.set_block(j * dc, j * dc, b);
        }
        u
    }
}

pub fn sample_block_unitary(j: usize, dc: usize, rng: &mut Rng) -> Result<BlockUnitary> {
    if j == 0 || dc == 0 {
        return Err(Error::Dimension(format!("block unitary needs J, d_C >= 1, got {j}, {dc}")));
    }
    let blocks = (0..j).map(|_| numkit::sample_haar_unitary(dc, rng)).collect::<Result<_>>()?;
    Ok(BlockUnitary { blocks })
}

/// G_σ = Σ_j |σ(j)⟩⟨j|.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PermutationUnitary {
    pub sigma: Vec<usize>,
}

impl PermutationUnitary {
    pub fn identity(j: usize) -> Self {
        PermutationUnitary { sigma: (0..j).collect() }
    }

    pub fn new(sigma: Vec<usize>) -> Result<Self> {
        let mut seen = vec![false; sigma.len()];
        for &s in &sigma {
            if s >= sigma.len() || seen[s] {
                return Err(Error::Validation(format!("{sigma:?} is not a permutation")));
            }
            seen[s] = true;
        }
        Ok(PermutationUnitary { sigma })
    }

    pub fn inverse(&self) -> Self {
        let mut inv = vec![0; self.sigma.len()];
        for (j, &s) in self.sigma.iter().enumerate() {
            inv[s] = j;
        }
        PermutationUnitary { sigma: inv }
    }

    /// self ∘ other.
    pub fn compose(&self, other: &PermutationUnitary) -> Self {
        PermutationUnitary { sigma: other.sigma.iter().map(|&j| self.sigma[j]).collect() }
    }

    pub fn assemble(&self) -> CMatrix {
        let n = self.sigma.len();
        let mut g = CMatrix::zeros(n, n);
        for (j, &s) in self.sigma.iter().enumerate() {
            g[(s, j)] = C64::new(1.0, 0.0);
        }
        g
    }
}

/// Uniform permutation by Fisher–Yates.
pub fn sample_permutation(j: usize, rng: &mut Rng) -> PermutationUnitary {
    let mut sigma: Vec<usize> = (0..j).collect();
    sigma.shuffle(rng);
    PermutationUnitary { sigma }
}

// ---------------------------------------------------------------------------
// Structured states
// ---------------------------------------------------------------------------

/// Ψ restricted to its support K ⊗ C ⊗ S; block (j, k) is ψ_jk.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StructuredState {
    pub j: usize,
    pub dc: usize,
    pub ds: usize,
    pub matrix: CMatrix,
}

impl StructuredState {
    pub fn new(j: usize, dc: usize, ds: usize, matrix: CMatrix) -> Result<Self> {
        let n = j * dc * ds;
        if n == 0 || matrix.rows() != n || !matrix.is_square() {
            return Err(Error::Shape(format!("structured state needs a {n}x{n} matrix, got {}x{}", matrix.rows(), matrix.cols())));
        }
        numkit::check_subnormalized(&matrix, "structured state")?;
        Ok(StructuredState { j, dc, ds, matrix: matrix.hermitian_part() })
    }

    /// Random instance: a Haar-random pure state on K C S E with E traced.
    pub fn random(j: usize, dc: usize, ds: usize, env: usize, rng: &mut Rng) -> Result<Self> {
        let n = j * dc * ds;
        let v = numkit::random_pure_state(n * env.max(1), rng);
        let m = numkit::reduce_pure(&v, &[n, env.max(1)], &[0])?;
        StructuredState::new(j, dc, ds, m)
    }

    pub fn block(&self, j: usize, k: usize) -> CMatrix {
        let b = self.dc * self.ds;
        self.matrix.block(j * b, k * b, b, b)
    }

    pub fn weights(&self) -> Vec<f64> {
        (0..self.j).map(|j| self.block(j, j).trace().re).collect()
    }

    /// C(Ψ): the off-diagonal blocks removed.
    pub fn dephased(&self) -> StructuredState {
        let b = self.dc * self.ds;
        let mut m = CMatrix::zeros(self.matrix.rows(), self.matrix.cols());
        for j in 0..self.j {
            m.set_block(j * b, j * b, &self.block(j, j));
        }
        StructuredState { matrix: m, ..self.clone() }
    }

    /// Traces the S factors not in `keep`, where S = ⊗ s_dims.
    pub fn trace_s(&self, s_dims: &[usize], keep: &[usize]) -> Result<StructuredState> {
        if s_dims.iter().product::<usize>() != self.ds {
            return Err(Error::Layout(format!("S factors {s_dims:?} do not multiply to {}", self.ds)));
        }
        let mut dims = vec![self.j, self.dc];
        dims.extend(s_dims);
        let mut k = vec![0, 1];
        k.extend(keep.iter().map(|i| i + 2));
        let m = numkit::partial_trace_dims(&self.matrix, &dims, &k)?;
        let ds = keep.iter().map(|&i| s_dims[i]).product();
        Ok(StructuredState { j: self.j, dc: self.dc, ds, matrix: m })
    }

    /// Full operator on Z ⊗ C ⊗ Z' ⊗ S.
    pub fn to_labeled(&self) -> Result<LabeledState> {
        let (j, dc, ds) = (self.j, self.dc, self.ds);
        let n = j * dc * j * ds;
        let cap = numkit::dim_cap();
        if n > cap {
            return Err(Error::Dimension(format!("full state dimension {n} above cap {cap}")));
        }
        let idx = |z: usize, c: usize, s: usize| ((z * dc + c) * j + z) * ds + s;
        let mut m = CMatrix::zeros(n, n);
        for r in 0..j * dc * ds {
            let (zr, cr, sr) = (r / (dc * ds), (r / ds) % dc, r % ds);
            for col in 0..j * dc * ds {
                let (zc, cc, sc) = (col / (dc * ds), (col / ds) % dc, col % ds);
                m[(idx(zr, cr, sr), idx(zc, cc, sc))] = self.matrix[(r, col)];
            }
        }
        LabeledState::new_unchecked(m, structured_layout(j, dc, ds)?)
    }

    /// Reads an operator on Z C Z' S, rejecting weight outside the support
    /// where Z and Z' agree.
    pub fn from_labeled(state: &LabeledState) -> Result<Self> {
        let names = state.layout.names();
        if names != ["Z", "C", "Z'", "S"] {
            return Err(Error::Layout(format!("expected registers Z C Z' S, got {names:?}")));
        }
        let d = state.layout.dims();
        let (j, dc, j2, ds) = (d[0], d[1], d[2], d[3]);
        if j != j2 {
            return Err(Error::Layout(format!("Z and Z' differ in dimension: {j} vs {j2}")));
        }
        let n = state.matrix.rows();
        let split = |i: usize| (i / (dc * j * ds), (i / (j * ds)) % dc, (i / ds) % j, i % ds);
        let mut worst: f64 = 0.0;
        for r in 0..n {
            let (z, _, zp, _) = split(r);
            for c in 0..n {
                let (w, _, wp, _) = split(c);
                if z != zp || w != wp {
                    worst = worst.max(state.matrix[(r, c)].norm());
                }
            }
        }
        if worst > STRUCTURE_TOL {
            return Err(Error::Validation(format!("state has weight {worst:.2e} where Z and Z' disagree")));
        }
        let m = CMatrix::from_fn(j * dc * ds, j * dc * ds, |r, c| {
            let (zr, cr, sr) = (r / (dc * ds), (r / ds) % dc, r % ds);
            let (zc, cc, sc) = (c / (dc * ds), (c / ds) % dc, c % ds);
            state.matrix[(((zr * dc + cr) * j + zr) * ds + sr, ((zc * dc + cc) * j + zc) * ds + sc)]
        });
        StructuredState::new(j, dc, ds, m)
    }
}

fn structured_layout(j: usize, dc: usize, ds: usize) -> Result<RegisterLayout> {
    RegisterLayout::new(vec![
        Subsystem::new("Z", j, Kind::Classical),
        Subsystem::new("C", dc, Kind::Quantum),
        Subsystem::new("Z'", j, Kind::Classical),
        Subsystem::new("S", ds, Kind::Quantum),
    ])
}

/// Ψ_av = Σ_j p_j |j⟩⟨j| ⊗ π^C ⊗ ψ_j^S ⊗ |j⟩⟨j|, computed exactly.
pub fn averaged_structured(psi: &StructuredState) -> StructuredState {
    let b = psi.dc * psi.ds;
    let mut m = CMatrix::zeros(psi.matrix.rows(), psi.matrix.cols());
    let pi = CMatrix::identity(psi.dc).scale(1.0 / psi.dc as f64);
    for j in 0..psi.j {
        let s = numkit::partial_trace_dims(&psi.block(j, j), &[psi.dc, psi.ds], &[1]).expect("block dims");
        m.set_block(j * b, j * b, &numkit::kron_raw(&pi, &s));
    }
    StructuredState { matrix: m, ..psi.clone() }
}

/// Averaged state of an operator on Z C Z' S.
pub fn averaged_state(state: &LabeledState) -> Result<LabeledState> {
    averaged_structured(&StructuredState::from_labeled(state)?).to_labeled()
}

// ---------------------------------------------------------------------------
// Entropies of structured states
// ---------------------------------------------------------------------------

/// min Σ_j Tr Y_j subject to Σ_j |j⟩⟨j| ⊗ I_C ⊗ Y_j ⪰ Ψ on K C S. Equals
/// min Tr Y over I_{ZC} ⊗ Y ⪰ Ψ on the full space, since Ψ is invariant
/// under opposite phases on Z and Z' (so Y may be taken block diagonal in
/// Z') and I ⊗ Y does not couple the support to its complement.
fn structured_min_trace(psi: &StructuredState) -> Result<f64> {
    let (j, dc, ds) = (psi.j, psi.dc, psi.ds);
    if j == 1 {
        return entropy::min_trace_dominating(&psi.matrix, dc, ds);
    }
    let mut p = SdpProblem::new();
    let ys: Vec<_> = (0..j).map(|k| p.hermitian(&format!("Y{k}"), ds)).collect();
    let ic = CMatrix::identity(dc);
    let rho = psi.matrix.clone();
    let yc = ys.clone();
    p.require_psd("ΣI⊗Y_j − Ψ", move |v| {
        let b = dc * ds;
        let mut m = CMatrix::zeros(j * b, j * b);
        for (k, y) in yc.iter().enumerate() {
            m.set_block(k * b, k * b, &numkit::kron_raw(&ic, &v[y.0]));
        }
        &m - &rho
    });
    p.minimize(move |v| ys.iter().map(|y| v[y.0].trace().re).sum());
    let sol = sdp::solve(&p, entropy::ENTROPY_TOL)?;
    let ok = match sol.status {
        SdpStatus::Optimal => true,
        SdpStatus::MaxIterations => sol.gap.max(sol.primal_residual).max(sol.dual_residual) <= 1e-6,
        SdpStatus::Infeasible => false,
    };
    if !ok {
        return Err(Error::Solver(format!("structured program ended with {:?}; problem: {}", sol.status, p.dump())));
    }
    Ok(sol.value)
}

fn neg_log(x: f64) -> f64 {
    if x <= 0.0 {
        f64::INFINITY
    } else {
        -x.log2()
    }
}

/// H_min(Ĉ|Ŝ)_Ψ with Ĉ = ZC, Ŝ = Z'S.
pub fn hmin_structured(psi: &StructuredState) -> Result<f64> {
    Ok(neg_log(structured_min_trace(psi)?))
}

/// H_min(Ĉ|Ŝ)_{C(Ψ)}: with Z dephased the program splits per label.
pub fn hmin_structured_dephased(psi: &StructuredState) -> Result<f64> {
    let mut total = 0.0;
    for j in 0..psi.j {
        let b = psi.block(j, j);
        if b.trace().re > 0.0 {
            total += entropy::min_trace_dominating(&b, psi.dc, psi.ds)?;
        }
    }
    Ok(neg_log(total))
}

/// Purification of the dephased Choi state of the complementary map,
/// Σ_j J^{-1/2} |j⟩^Z |j⟩^{Z̃} |v_j⟩^{C E F} with v_j = (I ⊗ V_j)|Φ_r⟩, where V_j is
/// the Stinespring block for input label j (E = output, F = environment).
fn choi_vectors(ch: &Channel, j: usize, dc: usize) -> Vec<Vec<C64>> {
    let rows = ch.stinespring.rows();
    let s = 1.0 / (dc as f64).sqrt();
    (0..j)
        .map(|z| {
            let mut v = vec![C64::new(0.0, 0.0); dc * rows];
            for c in 0..dc {
                for r in 0..rows {
                    v[c * rows + r] = ch.stinespring[(r, z * dc + c)] * s;
                }
            }
            v
        })
        .collect()
}

/// H_max(Ĉ|F)_{C(τ)} and H_max(C|FZ)_{C(τ)} for the Choi state τ of the
/// complementary map, via duality with the kept output E.
pub fn choi_hmax_pair(ch: &Channel, j: usize, dc: usize) -> Result<(f64, f64)> {
    if ch.in_dim() != j * dc {
        return Err(Error::Layout(format!("channel input dimension {} differs from J*d_C = {}", ch.in_dim(), j * dc)));
    }
    let de = ch.out_dim();
    let df = ch.env_dim;
    let vs = choi_vectors(ch, j, dc);
    let b = dc * de;
    let mut m = CMatrix::zeros(j * b, j * b);
    let jf = j as f64;
    for (a, va) in vs.iter().enumerate() {
        for (k, vk) in vs.iter().enumerate() {
            // Tr_F |v_a⟩⟨v_k| on C ⊗ E.
            let blk = CMatrix::from_fn(b, b, |r, c| {
                (0..df).map(|f| va[r * df + f] * vk[c * df + f].conj()).sum::<C64>() / jf
            });
            m.set_block(a * b, k * b, &blk);
        }
    }
    let psi = StructuredState { j, dc, ds: de, matrix: m };
    let h_zc = -hmin_structured(&psi)?;
    let mut total = 0.0;
    for a in 0..j {
        let blk = psi.block(a, a);
        if blk.trace().re > 0.0 {
            total += entropy::min_trace_dominating(&blk, dc, de)?;
        }
    }
    Ok((h_zc, total.log2()))
}

// ---------------------------------------------------------------------------
// Distance and bound
// ---------------------------------------------------------------------------

/// T ∘ G_σ ∘ U applied to Ψ, as an operator on Z' ⊗ E ⊗ S.
pub fn transformed_output(psi: &StructuredState, u: &BlockUnitary, sigma: &PermutationUnitary, ch: &Channel) -> Result<CMatrix> {
    let (j, dc, ds) = (psi.j, psi.dc, psi.ds);
    if u.j() != j || u.dc() != dc || sigma.sigma.len() != j || ch.in_dim() != j * dc {
        return Err(Error::Layout(format!(
            "dimension mismatch: state J={j}, d_C={dc}; unitary J={}, d_C={}; permutation {}; channel input {}",
            u.j(),
            u.dc(),
            sigma.sigma.len(),
            ch.in_dim()
        )));
    }
    let (de, df) = (ch.out_dim(), ch.env_dim);
    let is = CMatrix::identity(ds);
    // W_j = V_{σ(j)} U_j, lifted to act on C ⊗ S.
    let ws: Vec<CMatrix> = (0..j)
        .map(|z| {
            let vz = ch.stinespring.block(0, sigma.sigma[z] * dc, de * df, dc);
            numkit::kron_raw(&(&vz * &u.blocks[z]), &is)
        })
        .collect();
    let b = de * ds;
    let mut out = CMatrix::zeros(j * b, j * b);
    for a in 0..j {
        for k in 0..j {
            let blk = psi.block(a, k);
            if blk.max_abs() == 0.0 {
                continue;
            }
            let full = &(&ws[a] * &blk) * &ws[k].adjoint();
            // full acts on E ⊗ F ⊗ S; trace F.
            let red = numkit::partial_trace_dims(&full, &[de, df, ds], &[0, 2])?;
            out.set_block(a * b, k * b, &red);
        }
    }
    Ok(out)
}

/// ‖T∘G_σ∘U(Ψ) − T∘G_σ(Ψ_av)‖₁.
pub fn decoupling_lhs(psi: &StructuredState, u: &BlockUnitary, sigma: &PermutationUnitary, ch: &Channel) -> Result<f64> {
    let av = averaged_structured(psi);
    lhs_with_average(psi, &av, u, sigma, ch)
}

/// Same as [`decoupling_lhs`] with a precomputed averaged state.
pub fn lhs_with_average(psi: &StructuredState, av: &StructuredState, u: &BlockUnitary, sigma: &PermutationUnitary, ch: &Channel) -> Result<f64> {
    let a = transformed_output(psi, u, sigma, ch)?;
    let id = BlockUnitary::identity(psi.j, psi.dc);
    let b = transformed_output(av, &id, sigma, ch)?;
    Ok(numkit::trace_norm(&(&a - &b)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecouplingBound {
    pub hmin_psi: f64,
    pub hmin_dephased: f64,
    pub hmax_chat_f: f64,
    pub hmax_c_fz: f64,
    pub h_i: f64,
    /// Absent when d_C = 1.
    pub h_ii: Option<f64>,
    pub value: f64,
}

/// 2^{−H_I/2} + 2^{−H_II/2} with unsmoothed exponents (second term only for
/// d_C ≥ 2).
pub fn decoupling_bound(psi: &StructuredState, ch: &Channel) -> Result<DecouplingBound> {
    if psi.j < 2 {
        return Err(Error::Domain(format!("the bound needs J >= 2, got {}", psi.j)));
    }
    let (hmax_chat_f, hmax_c_fz) = choi_hmax_pair(ch, psi.j, psi.dc)?;
    let hmin_psi = hmin_structured(psi)?;
    let hmin_dephased = hmin_structured_dephased(psi)?;
    let h_i = ((psi.j - 1) as f64).log2() + hmin_psi - hmax_chat_f;
    let h_ii = (psi.dc >= 2).then(|| hmin_dephased - hmax_c_fz);
    let value = 2f64.powf(-h_i / 2.0) + h_ii.map_or(0.0, |h| 2f64.powf(-h / 2.0));
    Ok(DecouplingBound { hmin_psi, hmin_dephased, hmax_chat_f, hmax_c_fz, h_i, h_ii, value })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleStats {
    pub mean: f64,
    pub min: f64,
    pub max: f64,
    pub samples: usize,
    pub seed: u64,
}

/// Per-sample random stream: sample i draws from stream i of the seed.
pub fn sample_rng(seed: u64, i: usize) -> Rng {
    let mut r = rng_from_seed(seed);
    r.set_stream(i as u64);
    r
}

fn parallel_map<T: Send>(n: usize, f: impl Fn(usize) -> Result<T> + Sync) -> Result<Vec<T>> {
    let threads = std::thread::available_parallelism().map_or(1, |t| t.get()).min(n.max(1));
    let chunk = n.div_ceil(threads.max(1)).max(1);
    let f = &f;
    let parts: Vec<Result<Vec<T>>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..n)
            .step_by(chunk)
            .map(|start| s.spawn(move || (start..(start + chunk).min(n)).map(f).collect::<Result<Vec<T>>>()))
            .collect();
        handles.into_iter().map(|h| h.join().expect("sample thread")).collect()
    });
    let mut out = Vec::with_capacity(n);
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// Draws (σ, U) for sample i.
pub fn draw_pair(seed: u64, i: usize, j: usize, dc: usize) -> Result<(PermutationUnitary, BlockUnitary)> {
    let mut rng = sample_rng(seed, i);
    let sigma = sample_permutation(j, &mut rng);
    let u = sample_block_unitary(j, dc, &mut rng)?;
    Ok((sigma, u))
}

/// Empirical mean of the distance over random (σ, U).
pub fn empirical_lhs(psi: &StructuredState, ch: &Channel, samples: usize, seed: u64) -> Result<SampleStats> {
    if samples == 0 {
        return Err(Error::Domain("sample count must be positive".into()));
    }
    let av = averaged_structured(psi);
    let vals = parallel_map(samples, |i| {
        let (sigma, u) = draw_pair(seed, i, psi.j, psi.dc)?;
        lhs_with_average(psi, &av, &u, &sigma, ch)
    })?;
    Ok(SampleStats {
        mean: vals.iter().sum::<f64>() / samples as f64,
        min: vals.iter().copied().fold(f64::INFINITY, f64::min),
        max: vals.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        samples,
        seed,
    })
}

// ---------------------------------------------------------------------------
// Partial-trace case and bi-decoupling
// ---------------------------------------------------------------------------

/// Z = Z_L Z_R, C = C₁C₂C₃, S = S₁S₂S₃.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoupleConfig {
    pub j_l: usize,
    pub j_r: usize,
    pub d_c: [usize; 3],
    pub d_s: [usize; 3],
    /// Dimension of the traced environment for random instances.
    #[serde(default = "default_env")]
    pub env: usize,
    #[serde(default)]
    pub eps: f64,
    pub delta: f64,
    #[serde(default = "default_samples")]
    pub samples: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_env() -> usize {
    1
}

fn default_samples() -> usize {
    200
}

impl DecoupleConfig {
    pub fn j(&self) -> usize {
        self.j_l * self.j_r
    }

    pub fn dc(&self) -> usize {
        self.d_c.iter().product()
    }

    pub fn ds(&self) -> usize {
        self.d_s.iter().product()
    }

    /// The support dimension J·d_C·d_S is checked against the cap.
    pub fn validate(&self) -> Result<()> {
        let all = [self.j_l, self.j_r, self.d_c[0], self.d_c[1], self.d_c[2], self.d_s[0], self.d_s[1], self.d_s[2], self.env];
        if all.contains(&0) {
            return Err(Error::Dimension("all dimensions must be at least 1".into()));
        }
        let n = self.j() * self.dc() * self.ds();
        let cap = numkit::dim_cap();
        if n > cap {
            return Err(Error::Dimension(format!("J*d_C*d_S = {n} above cap {cap}")));
        }
        if !(0.0..1.0).contains(&self.eps) || !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::Domain(format!("need 0 <= eps < 1 and 0 < delta < 1, got {}, {}", self.eps, self.delta)));
        }
        if self.samples == 0 {
            return Err(Error::Domain("sample count must be positive".into()));
        }
        Ok(())
    }

    pub fn random_state(&self) -> Result<StructuredState> {
        self.validate()?;
        let mut rng = rng_from_seed(self.seed ^ 0x5eed_0f5a);
        StructuredState::random(self.j(), self.dc(), self.ds(), self.env, &mut rng)
    }

    /// Tr over Z_R and the C factors not in `keep_c`.
    pub fn trace_channel(&self, keep_c: usize) -> Result<Channel> {
        let dims = vec![self.j_l, self.j_r, self.d_c[0], self.d_c[1], self.d_c[2]];
        Channel::partial_trace(dims, &[0, 2 + keep_c])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartialTraceReport {
    pub hmin_psi: f64,
    pub hmin_dephased: f64,
    pub size_cond: bool,
    /// None when d_C = 1 (the condition is dropped).
    pub dephased_cond: Option<bool>,
    pub hypothesis_met: bool,
    pub stats: SampleStats,
    pub target: f64,
    pub within_target: bool,
}

/// Tr_{Z_R C_R} with C_L = C₁ and C_R = C₂C₃; conditions evaluated with
/// unsmoothed entropies, which suffices for any ε ≥ 0.
pub fn verify_partial_trace_case(cfg: &DecoupleConfig, psi: &StructuredState) -> Result<PartialTraceReport> {
    cfg.validate()?;
    check_state_dims(cfg, psi)?;
    let hmin_psi = hmin_structured(psi)?;
    let hmin_dephased = hmin_structured_dephased(psi)?;
    let (dcl, dc, dzr) = (cfg.d_c[0] as f64, cfg.dc() as f64, cfg.j_r as f64);
    let size_cond = (dcl * dcl / (dzr * dc)).log2() <= hmin_psi + (cfg.delta * cfg.delta / 2.0).log2();
    let dephased_cond = (cfg.dc() >= 2).then(|| (dcl * dcl / dc).log2() <= hmin_dephased + 2.0 * cfg.delta.log2());
    let hypothesis_met = size_cond && dephased_cond.unwrap_or(true);
    let ch = cfg.trace_channel(0)?;
    let stats = empirical_lhs(psi, &ch, cfg.samples, cfg.seed)?;
    let target = 4.0 * cfg.eps + 2.0 * cfg.delta;
    Ok(PartialTraceReport { hmin_psi, hmin_dephased, size_cond, dephased_cond, hypothesis_met, within_target: stats.mean <= target, stats, target })
}

fn check_state_dims(cfg: &DecoupleConfig, psi: &StructuredState) -> Result<()> {
    if psi.j != cfg.j() || psi.dc != cfg.dc() || psi.ds != cfg.ds() {
        return Err(Error::Layout(format!(
            "state dims (J={}, d_C={}, d_S={}) do not match config (J={}, d_C={}, d_S={})",
            psi.j,
            psi.dc,
            psi.ds,
            cfg.j(),
            cfg.dc(),
            cfg.ds()
        )));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BidecouplingConditions {
    pub hmin_s2s3: f64,
    pub hmin_s2s3_dephased: f64,
    pub hmin_s1s3: f64,
    pub hmin_s1s3_dephased: f64,
    /// The four dimension conditions; the second and fourth are None when d_C = 1.
    pub flags: [Option<bool>; 4],
}

impl BidecouplingConditions {
    pub fn all_hold(&self) -> bool {
        self.flags.iter().all(|f| f.unwrap_or(true))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum BidecouplingOutcome {
    Found { sigma: PermutationUnitary, u: BlockUnitary, lhs: [f64; 2], tries: usize, conditions: BidecouplingConditions },
    HypothesisUnmet { conditions: BidecouplingConditions },
    Exhausted { tries: usize, best_max: f64, mean_lhs: [f64; 2], conditions: BidecouplingConditions },
}

pub fn bidecoupling_conditions(cfg: &DecoupleConfig, psi: &StructuredState) -> Result<BidecouplingConditions> {
    cfg.validate()?;
    check_state_dims(cfg, psi)?;
    let s23 = psi.trace_s(&cfg.d_s, &[1, 2])?;
    let s13 = psi.trace_s(&cfg.d_s, &[0, 2])?;
    let (h23, h13) = (hmin_structured(&s23)?, hmin_structured(&s13)?);
    let (h23d, h13d) = (hmin_structured_dephased(&s23)?, hmin_structured_dephased(&s13)?);
    Ok(BidecouplingConditions::evaluate(cfg.d_c, cfg.j_r, cfg.delta, [h23, h23d, h13, h13d]))
}

impl BidecouplingConditions {
    /// Applies the four dimension conditions to precomputed entropies
    /// [H(S2S3), H(S2S3) dephased, H(S1S3), H(S1S3) dephased].
    pub fn evaluate(d_c: [usize; 3], j_r: usize, delta: f64, h: [f64; 4]) -> Self {
        let dc = (d_c[0] * d_c[1] * d_c[2]) as f64;
        let dzr = j_r as f64;
        let (l2h, l2) = ((delta * delta / 2.0).log2(), 2.0 * delta.log2());
        let quantum = dc >= 2.0;
        let cond = |dk: usize, h: f64, hd: f64| {
            let dk = dk as f64;
            ((dk * dk / (dzr * dc)).log2() <= h + l2h, quantum.then(|| (dk * dk / dc).log2() <= hd + l2))
        };
        let (f1, f2) = cond(d_c[0], h[0], h[1]);
        let (f3, f4) = cond(d_c[1], h[2], h[3]);
        BidecouplingConditions {
            hmin_s2s3: h[0],
            hmin_s2s3_dephased: h[1],
            hmin_s1s3: h[2],
            hmin_s1s3_dephased: h[3],
            flags: [Some(f1), f2, Some(f3), f4],
        }
    }
}

/// Samples (σ, U) until both traced distances are within 12ε+6δ.
pub fn find_bidecoupling_pair(cfg: &DecoupleConfig, psi: &StructuredState, max_tries: usize) -> Result<BidecouplingOutcome> {
    let conditions = bidecoupling_conditions(cfg, psi)?;
    if !conditions.all_hold() {
        return Ok(BidecouplingOutcome::HypothesisUnmet { conditions });
    }
    let target = 12.0 * cfg.eps + 6.0 * cfg.delta;
    // Keep Z_L C₁ with S₁ traced, and Z_L C₂ with S₂ traced.
    let psi1 = psi.trace_s(&cfg.d_s, &[1, 2])?;
    let psi2 = psi.trace_s(&cfg.d_s, &[0, 2])?;
    let (av1, av2) = (averaged_structured(&psi1), averaged_structured(&psi2));
    let (ch1, ch2) = (cfg.trace_channel(0)?, cfg.trace_channel(1)?);
    let mut best = f64::INFINITY;
    let mut sums = [0.0; 2];
    for t in 0..max_tries {
        let (sigma, u) = draw_pair(cfg.seed, t, cfg.j(), cfg.dc())?;
        let l1 = lhs_with_average(&psi1, &av1, &u, &sigma, &ch1)?;
        let l2 = lhs_with_average(&psi2, &av2, &u, &sigma, &ch2)?;
        sums[0] += l1;
        sums[1] += l2;
        best = best.min(l1.max(l2));
        if l1 <= target && l2 <= target {
            return Ok(BidecouplingOutcome::Found { sigma, u, lhs: [l1, l2], tries: t + 1, conditions });
        }
    }
    let n = max_tries.max(1) as f64;
    Ok(BidecouplingOutcome::Exhausted { tries: max_tries, best_max: best, mean_lhs: [sums[0] / n, sums[1] / n], conditions })
}

// ---------------------------------------------------------------------------
// Batch report
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchRow {
    pub config: usize,
    pub check: String,
    pub conditions: String,
    pub empirical_mean: f64,
    pub bound: f64,
    pub margin: f64,
}

fn flag(name: &str, f: Option<bool>) -> Option<String> {
    f.map(|b| format!("{name}={b}"))
}

/// Runs the three checks for each configuration on its seeded random
/// instance: the general bound with the partial-trace channel, the
/// partial-trace hypotheses, and the bi-decoupling search.
pub fn run_batch(configs: &[DecoupleConfig], max_tries: usize) -> Result<Vec<BatchRow>> {
    let mut rows = Vec::new();
    for (id, cfg) in configs.iter().enumerate() {
        let psi = cfg.random_state()?;
        let ch = cfg.trace_channel(0)?;
        if cfg.j() >= 2 {
            let b = decoupling_bound(&psi, &ch)?;
            let s = empirical_lhs(&psi, &ch, cfg.samples, cfg.seed)?;
            rows.push(BatchRow { config: id, check: "randomized".into(), conditions: "-".into(), empirical_mean: s.mean, bound: b.value, margin: b.value - s.mean });
        }
        let r = verify_partial_trace_case(cfg, &psi)?;
        let cond = if r.hypothesis_met {
            [flag("size_cond", Some(r.size_cond)), flag("dephased_cond", r.dephased_cond)].into_iter().flatten().collect::<Vec<_>>().join(";")
        } else {
            "hypothesis unmet".into()
        };
        rows.push(BatchRow { config: id, check: "partial_trace".into(), conditions: cond, empirical_mean: r.stats.mean, bound: r.target, margin: r.target - r.stats.mean });
        let target = 12.0 * cfg.eps + 6.0 * cfg.delta;
        match find_bidecoupling_pair(cfg, &psi, max_tries)? {
            BidecouplingOutcome::Found { lhs, tries, .. } => rows.push(BatchRow {
                config: id,
                check: "bidecoupling".into(),
                conditions: format!("found after {tries}"),
                empirical_mean: lhs[0].max(lhs[1]),
                bound: target,
                margin: target - lhs[0].max(lhs[1]),
            }),
            BidecouplingOutcome::HypothesisUnmet { .. } => rows.push(BatchRow {
                config: id,
                check: "bidecoupling".into(),
                conditions: "hypothesis unmet".into(),
                empirical_mean: f64::NAN,
                bound: target,
                margin: f64::NAN,
            }),
            BidecouplingOutcome::Exhausted { tries, best_max, .. } => rows.push(BatchRow {
                config: id,
                check: "bidecoupling".into(),
                conditions: format!("exhausted after {tries}"),
                empirical_mean: best_max,
                bound: target,
                margin: target - best_max,
            }),
        }
    }
    Ok(rows)
}

pub fn batch_csv(rows: &[BatchRow]) -> Result<String> {
    let num = |x: f64| if x.is_nan() { "nan".to_string() } else { crate::region::fmt6(x) };
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["config", "check", "conditions", "empirical_mean", "bound", "margin"])?;
    for r in rows {
        w.write_record([r.config.to_string(), r.check.clone(), r.conditions.clone(), num(r.empirical_mean), num(r.bound), num(r.margin)])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_isometry_channel(din: usize, de: usize, df: usize, rng: &mut Rng) -> Channel {
        let u = numkit::sample_haar_unitary(de * df, rng).unwrap();
        let v = u.block(0, 0, de * df, din);
        Channel::new(vec![din], vec![de], df, v).unwrap()
    }

    #[test]
    fn block_unitary_commutes_with_label() {
        let mut rng = rng_from_seed(1);
        let u = sample_block_unitary(3, 2, &mut rng).unwrap().assemble();
        let lab = CMatrix::from_real_diag(&[0.0, 0.0, 1.0, 1.0, 2.0, 2.0]);
        assert!((&(&u * &lab) - &(&lab * &u)).max_abs() <= 1e-12);
        assert!((&(&u.adjoint() * &u) - &CMatrix::identity(6)).max_abs() <= 1e-12);
        let d1 = sample_block_unitary(2, 1, &mut rng).unwrap().assemble();
        assert!(d1[(0, 1)].norm() == 0.0 && (d1[(0, 0)].norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn permutations_compose_and_are_uniform() {
        let mut rng = rng_from_seed(2);
        assert_eq!(sample_permutation(1, &mut rng).sigma, vec![0]);
        let s = sample_permutation(5, &mut rng);
        assert_eq!(s.compose(&s.inverse()), PermutationUnitary::identity(5));
        assert_eq!(&s.assemble() * &s.inverse().assemble(), CMatrix::identity(5));
        let mut counts = std::collections::HashMap::new();
        for _ in 0..6000 {
            *counts.entry(sample_permutation(3, &mut rng).sigma).or_insert(0usize) += 1;
        }
        assert_eq!(counts.len(), 6);
        // Each frequency within 0.05 of 1/6, and χ² (5 dof) below its 0.001 quantile.
        let mut chi2 = 0.0;
        for c in counts.values() {
            assert!((*c as f64 / 6000.0 - 1.0 / 6.0).abs() <= 0.05, "{c}");
            chi2 += (*c as f64 - 1000.0).powi(2) / 1000.0;
        }
        assert!(chi2 < 20.515, "{chi2}");
    }

    #[test]
    fn averaged_state_matches_monte_carlo() {
        let mut rng = rng_from_seed(3);
        let psi = StructuredState::random(2, 2, 2, 2, &mut rng).unwrap();
        let av = averaged_structured(&psi);
        let mut acc = CMatrix::zeros(8, 8);
        let n = 500;
        for _ in 0..n {
            let u = sample_block_unitary(2, 2, &mut rng).unwrap();
            let ul = numkit::kron_raw(&u.assemble(), &CMatrix::identity(2));
            acc = &acc + &(&(&ul * &psi.matrix) * &ul.adjoint());
        }
        let mc = acc.scale(1.0 / n as f64);
        assert!(numkit::trace_norm(&(&mc - &av.matrix)) / 2.0 <= 0.05);
        // J = 1 gives π ⊗ ψ^S.
        let one = StructuredState::random(1, 2, 2, 2, &mut rng).unwrap();
        let s = numkit::partial_trace_dims(&one.matrix, &[2, 2], &[1]).unwrap();
        let want = numkit::kron_raw(&CMatrix::identity(2).scale(0.5), &s);
        assert!((&averaged_structured(&one).matrix - &want).max_abs() <= 1e-12);
    }

    #[test]
    fn labeled_roundtrip_and_structure_check() {
        let mut rng = rng_from_seed(4);
        let psi = StructuredState::random(2, 2, 1, 2, &mut rng).unwrap();
        let full = psi.to_labeled().unwrap();
        assert_eq!(StructuredState::from_labeled(&full).unwrap(), psi);
        let av = averaged_state(&full).unwrap();
        assert!((&av.matrix - &averaged_structured(&psi).to_labeled().unwrap().matrix).max_abs() <= 1e-12);
        let mut bad = full.clone();
        bad.matrix = numkit::random_density(8, 8, &mut rng);
        assert!(matches!(StructuredState::from_labeled(&bad), Err(Error::Validation(_))));
    }

    #[test]
    fn structured_hmin_matches_full_program() {
        let mut rng = rng_from_seed(5);
        for &(j, dc, ds) in &[(2, 2, 1), (2, 1, 2), (3, 2, 1)] {
            let psi = StructuredState::random(j, dc, ds, 2, &mut rng).unwrap();
            let full = psi.to_labeled().unwrap();
            let want = entropy::hmin_matrix(&full.matrix, j * dc, j * ds).unwrap();
            assert!((hmin_structured(&psi).unwrap() - want).abs() <= 1e-5);
            let deph = psi.dephased().to_labeled().unwrap();
            let want_d = entropy::hmin_matrix(&deph.matrix, j * dc, j * ds).unwrap();
            assert!((hmin_structured_dephased(&psi).unwrap() - want_d).abs() <= 1e-5);
        }
    }

    #[test]
    fn choi_entropies_match_full_program() {
        let mut rng = rng_from_seed(6);
        let (j, dc) = (2, 2);
        let ch = random_isometry_channel(j * dc, 2, 2, &mut rng);
        let (h_zc, h_c) = choi_hmax_pair(&ch, j, dc).unwrap();
        // τ on Ĉ F from the complementary map, then Z dephased.
        let tau = ch.complementary().choi().unwrap();
        let layout = RegisterLayout::new(vec![
            Subsystem::new("Z", j, Kind::Classical),
            Subsystem::new("C", dc, Kind::Quantum),
            Subsystem::new("F", 2, Kind::Quantum),
        ])
        .unwrap();
        let st = crate::qstate::dephase(&LabeledState::new_unchecked(tau, layout).unwrap(), "Z").unwrap();
        let want = entropy::hmax_cond(&st, &["Z", "C"], &["F"]).unwrap();
        assert!((h_zc - want).abs() <= 1e-5, "{h_zc} vs {want}");
        let want_c = entropy::hmax_cond(&st, &["C"], &["F", "Z"]).unwrap();
        assert!((h_c - want_c).abs() <= 1e-5, "{h_c} vs {want_c}");
    }

    #[test]
    fn partial_trace_bound_matches_closed_form() {
        let cfg = DecoupleConfig { j_l: 2, j_r: 2, d_c: [2, 2, 1], d_s: [1, 1, 2], env: 2, eps: 0.0, delta: 0.3, samples: 10, seed: 3 };
        let psi = cfg.random_state().unwrap();
        let b = decoupling_bound(&psi, &cfg.trace_channel(0).unwrap()).unwrap();
        // H_max values: log d_{Z_L} + log d_{C_L} − log d_{C_R} and log d_{C_L} − log d_{C_R}.
        assert!((b.hmax_chat_f - 1.0).abs() <= 1e-6, "{}", b.hmax_chat_f);
        assert!(b.hmax_c_fz.abs() <= 1e-6, "{}", b.hmax_c_fz);
    }

    #[test]
    fn trivial_cases_give_zero_distance() {
        let mut rng = rng_from_seed(7);
        let psi = StructuredState::random(2, 2, 2, 1, &mut rng).unwrap();
        let full_trace = Channel::partial_trace(vec![2, 2], &[]).unwrap();
        let (s, u) = draw_pair(1, 0, 2, 2).unwrap();
        assert!(decoupling_lhs(&psi, &u, &s, &full_trace).unwrap() <= 1e-12);
        let av = averaged_structured(&psi);
        let id = Channel::identity(vec![4]);
        let lhs = decoupling_lhs(&av, &BlockUnitary::identity(2, 2), &s, &id).unwrap();
        assert!(lhs <= 1e-12);
        let r = decoupling_lhs(&psi, &u, &s, &id).unwrap();
        assert!((0.0..=2.0 + 1e-12).contains(&r));
    }

    #[test]
    fn single_term_when_c_trivial() {
        let mut rng = rng_from_seed(8);
        let psi = StructuredState::random(2, 1, 2, 2, &mut rng).unwrap();
        let b = decoupling_bound(&psi, &Channel::identity(vec![2])).unwrap();
        assert!(b.h_ii.is_none());
        assert!((b.value - 2f64.powf(-b.h_i / 2.0)).abs() < 1e-15);
    }

    #[test]
    fn empirical_mean_is_seed_deterministic() {
        let cfg = DecoupleConfig { j_l: 2, j_r: 1, d_c: [2, 1, 1], d_s: [1, 1, 2], env: 2, eps: 0.0, delta: 0.3, samples: 16, seed: 11 };
        let psi = cfg.random_state().unwrap();
        let ch = Channel::identity(vec![4]);
        let a = empirical_lhs(&psi, &ch, 16, 11).unwrap();
        let b = empirical_lhs(&psi, &ch, 16, 11).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn unmet_hypotheses_skip_search() {
        let cfg = DecoupleConfig { j_l: 1, j_r: 2, d_c: [2, 2, 1], d_s: [2, 2, 1], env: 1, eps: 0.0, delta: 0.01, samples: 4, seed: 1 };
        let psi = cfg.random_state().unwrap();
        assert!(matches!(find_bidecoupling_pair(&cfg, &psi, 5).unwrap(), BidecouplingOutcome::HypothesisUnmet { .. }));
        let r = verify_partial_trace_case(&cfg, &psi).unwrap();
        assert!(!r.hypothesis_met);
    }
}
