//! Acceptance suite. Each test prints one `criterion N: PASS|FAIL` line with
//! the measured quantity and asserts the criterion.

use std::time::Instant;

use hsrd::entropy::{
    self, assemble_cq, hmax_cond, hmin_cond, hmin_cond_cq_oracle, smooth_hmax, smooth_hmin, CqBlock,
};
use hsrd::numkit::{
    self, kron, random_density, random_pure_state, rng_from_seed, sample_haar_unitary, CMatrix, Channel, Rng,
    C64,
};
use hsrd::qstate::{Kind, LabeledState, RegisterLayout, Subsystem};
use rand::Rng as _;

fn report(n: usize, pass: bool, detail: &str) {
    println!("criterion {n}: {} {detail}", if pass { "PASS" } else { "FAIL" });
}

fn layout(regs: &[(&str, usize)]) -> RegisterLayout {
    RegisterLayout::new(regs.iter().map(|&(n, d)| Subsystem::new(n, d, Kind::Quantum)).collect()).unwrap()
}

fn state(m: CMatrix, regs: &[(&str, usize)]) -> LabeledState {
    LabeledState::new(m, layout(regs)).unwrap()
}

fn pure(psi: &[C64], regs: &[(&str, usize)]) -> LabeledState {
    state(CMatrix::outer(psi), regs)
}

fn random_state(regs: &[(&str, usize)], rng: &mut Rng) -> LabeledState {
    let d: usize = regs.iter().map(|r| r.1).product();
    let rank = rng.random_range(1..=d);
    state(random_density(d, rank, rng), regs)
}

fn dirichlet(k: usize, rng: &mut Rng) -> Vec<f64> {
    let w: Vec<f64> = (0..k).map(|_| -rng.random::<f64>().max(1e-12).ln()).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

// ---------------------------------------------------------------------------
// 1. SDP against the CQ closed formula
// ---------------------------------------------------------------------------

#[test]
fn criterion_01_cq_oracle() {
    let mut rng = rng_from_seed(101);
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let da = rng.random_range(1..=3);
        let db = rng.random_range(1..=3);
        let k = rng.random_range(1..=4);
        let p = dirichlet(k, &mut rng);
        let blocks: Vec<CqBlock> = p
            .iter()
            .map(|&p| {
                let rank = rng.random_range(1..=da * db);
                CqBlock { p, rho: random_density(da * db, rank, &mut rng), da, db }
            })
            .collect();
        let oracle = hmin_cond_cq_oracle(&blocks).unwrap();
        let st = state(assemble_cq(&blocks).unwrap(), &[("A", da), ("B", db), ("K", k)]);
        let sdp = hmin_cond(&st, &["A"], &["B", "K"]).unwrap();
        worst = worst.max((sdp - oracle).abs());
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = worst <= 1e-5 && secs < 60.0;
    report(1, pass, &format!("100 CQ states, max |diff| {worst:.2e} (tol 1e-5), {secs:.1} s (limit 60 s)"));
    assert!(pass);
}

// ---------------------------------------------------------------------------
// 2. Duality on tripartite pure states
// ---------------------------------------------------------------------------

#[test]
fn criterion_02_duality() {
    let mut rng = rng_from_seed(202);
    let mut worst: f64 = 0.0;
    let mut count = 0;
    for _ in 0..100 {
        let regs = [("A", rng.random_range(1..=3)), ("B", rng.random_range(1..=3)), ("C", rng.random_range(1..=3))];
        let d = regs.iter().map(|r| r.1).product();
        let st = pure(&random_pure_state(d, &mut rng), &regs);
        for eps in [0.0, 0.1] {
            let hmax = smooth_hmax(&st, &["A"], &["B"], eps).unwrap();
            let hmin = smooth_hmin(&st, &["A"], &["C"], eps).unwrap();
            worst = worst.max((hmax + hmin).abs());
            count += 1;
        }
    }
    let pass = worst <= 1e-4;
    report(2, pass, &format!("{count} evaluations, max |Hmax(A|B)+Hmin(A|C)| {worst:.2e} (tol 1e-4)"));
    assert!(pass);
}

// ---------------------------------------------------------------------------
// 4. Closed values
// ---------------------------------------------------------------------------

#[test]
fn criterion_04_closed_values() {
    let phi = hsrd::qstate::max_entangled(2).unwrap();
    let bell = pure(&phi, &[("A", 2), ("B", 2)]);
    let mut errs = vec![
        ("Hmin(A|B) Phi2", hmin_cond(&bell, &["A"], &["B"]).unwrap() + 1.0),
        ("Hmax(A|B) Phi2", hmax_cond(&bell, &["A"], &["B"]).unwrap() + 1.0),
    ];
    for d in 2..=6 {
        let mixed = state(CMatrix::identity(d).scale(1.0 / d as f64), &[("A", d)]);
        errs.push(("Hmin(A) maximally mixed", hmin_cond(&mixed, &["A"], &[]).unwrap() - (d as f64).log2()));
    }
    let worst = errs.iter().fold(0.0f64, |w, e| w.max(e.1.abs()));
    let pass = worst <= 1e-6;
    let detail: Vec<String> = errs.iter().map(|(n, e)| format!("{n} err {e:.1e}")).collect();
    report(4, pass, &format!("max err {worst:.2e} (tol 1e-6): {}", detail.join(", ")));
    assert!(pass);
}

// ---------------------------------------------------------------------------
// 3. Entropy property battery
// ---------------------------------------------------------------------------

const SLACK: f64 = 1e-4 + entropy::ENTROPY_TOL;

#[derive(Default)]
struct Battery {
    states: usize,
    checks: usize,
    violations: Vec<String>,
}

impl Battery {
    fn le(&mut self, what: &str, a: f64, b: f64) {
        self.checks += 1;
        if a > b + SLACK {
            self.violations.push(format!("{what}: {a:.6} > {b:.6}"));
        }
    }

    fn eq(&mut self, what: &str, a: f64, b: f64) {
        self.checks += 1;
        if (a - b).abs() > SLACK {
            self.violations.push(format!("{what}: {a:.6} != {b:.6}"));
        }
    }
}

fn isometry(din: usize, dout: usize, rng: &mut Rng) -> CMatrix {
    sample_haar_unitary(dout, rng).unwrap().block(0, 0, dout, din)
}

fn conjugate(rho: &CMatrix, v: &CMatrix) -> CMatrix {
    &(v * rho) * &v.adjoint()
}

fn chain_f(eps: f64) -> f64 {
    -(1.0 - (1.0 - eps * eps).sqrt()).log2()
}

#[test]
fn criterion_03_property_battery() {
    let mut rng = rng_from_seed(303);
    let mut b = Battery::default();
    let start = Instant::now();

    // Chain rules at ε = ε' = ε'' = 0.05.
    let e = 0.05;
    let f = chain_f(e);
    for _ in 0..200 {
        let st = random_state(&[("A", 2), ("B", 2), ("C", 2)], &mut rng);
        let big = smooth_hmin(&st, &["A", "B"], &["C"], e + e + 2.0 * e).unwrap();
        let hb = smooth_hmin(&st, &["B"], &["C"], e).unwrap();
        let ha = smooth_hmin(&st, &["A"], &["B", "C"], e).unwrap();
        b.le("chain rule min-min-min", hb + ha - f, big);
        let hab = smooth_hmin(&st, &["A", "B"], &["C"], e).unwrap();
        let hmaxb = smooth_hmax(&st, &["B"], &["C"], e).unwrap();
        let ha_big = smooth_hmin(&st, &["A"], &["B", "C"], e + e + 2.0 * e).unwrap();
        b.le("chain rule min-max-min", hab, hmaxb + ha_big + 2.0 * f);
        b.states += 1;
    }

    // von Neumann sandwich.
    for _ in 0..100 {
        let regs = [("A", rng.random_range(1..=3)), ("B", rng.random_range(1..=3))];
        let st = random_state(&regs, &mut rng);
        let h = entropy::vn_cond(&st, &["A"], &["B"]).unwrap();
        b.le("Hmin <= H", hmin_cond(&st, &["A"], &["B"]).unwrap(), h);
        b.le("H <= Hmax", h, hmax_cond(&st, &["A"], &["B"]).unwrap());
        b.states += 1;
    }

    // Dimension bounds.
    for _ in 0..40 {
        let (da, db): (usize, usize) = (rng.random_range(1..=3), rng.random_range(1..=2));
        let st = random_state(&[("A", da), ("B", db), ("C", 2)], &mut rng);
        let la = (da as f64).log2();
        for eps in [0.0, 0.05] {
            b.le("-log dA <= Hmin", -la, smooth_hmin(&st, &["A"], &["B"], eps).unwrap());
            b.le("Hmax <= log dA", smooth_hmax(&st, &["A"], &["B"], eps).unwrap(), la);
        }
        let lhs = smooth_hmin(&st, &["A", "B"], &["C"], 0.05).unwrap();
        let rhs = smooth_hmin(&st, &["A"], &["C"], 0.05).unwrap() + (db as f64).log2();
        b.le("Hmin(AB|C) <= Hmin(A|C) + log dB", lhs, rhs);
        b.states += 1;
    }

    // Monotonicity under a channel B -> D given by a random Stinespring isometry.
    for _ in 0..30 {
        let st = random_state(&[("A", 2), ("B", 2)], &mut rng);
        let (dd, env) = (rng.random_range(1..=3), rng.random_range(1..=3));
        let (dd, env) = if dd * env < 2 { (2, 1) } else { (dd, env) };
        let v = kron(&CMatrix::identity(2), &isometry(2, dd * env, &mut rng)).unwrap();
        let ch = Channel::new(vec![2, 2], vec![2, dd], env, v).unwrap();
        let out = state(ch.apply(&st.matrix).unwrap(), &[("A", 2), ("D", dd)]);
        for eps in [0.0, 0.05] {
            b.le(
                "monotonicity",
                smooth_hmin(&st, &["A"], &["B"], eps).unwrap(),
                smooth_hmin(&out, &["A"], &["D"], eps).unwrap(),
            );
        }
        b.states += 1;
    }

    // Isometric invariance.
    for _ in 0..20 {
        let st = random_state(&[("A", 2), ("B", 2)], &mut rng);
        let w = kron(&isometry(2, 3, &mut rng), &isometry(2, 3, &mut rng)).unwrap();
        let out = state(conjugate(&st.matrix, &w), &[("A", 3), ("B", 3)]);
        for eps in [0.0, 0.05] {
            b.eq(
                "isometric invariance min",
                smooth_hmin(&st, &["A"], &["B"], eps).unwrap(),
                smooth_hmin(&out, &["A"], &["B"], eps).unwrap(),
            );
            b.eq(
                "isometric invariance max",
                smooth_hmax(&st, &["A"], &["B"], eps).unwrap(),
                smooth_hmax(&out, &["A"], &["B"], eps).unwrap(),
            );
        }
        b.states += 1;
    }

    // Superadditivity and additivity on products.
    for _ in 0..20 {
        let r1 = state(random_density(4, rng.random_range(1..=2), &mut rng), &[("A", 2), ("B", 2)]);
        let r2 = state(random_density(4, rng.random_range(1..=2), &mut rng), &[("C", 2), ("D", 2)]);
        let prod = state(kron(&r1.matrix, &r2.matrix).unwrap(), &[("A", 2), ("B", 2), ("C", 2), ("D", 2)]);
        for eps in [0.0, 0.05] {
            let joint = smooth_hmin(&prod, &["A", "C"], &["B", "D"], 2.0 * eps).unwrap();
            let sum = smooth_hmin(&r1, &["A"], &["B"], eps).unwrap() + smooth_hmin(&r2, &["C"], &["D"], eps).unwrap();
            b.le("superadditivity", sum, joint);
        }
        let joint = hmax_cond(&prod, &["A", "C"], &["B", "D"]).unwrap();
        let sum = hmax_cond(&r1, &["A"], &["B"]).unwrap() + hmax_cond(&r2, &["C"], &["D"]).unwrap();
        b.eq("Hmax additivity", joint, sum);
        b.states += 2;
    }

    // Continuity: σ = (1−t)ρ + tτ lies at purified distance δ from ρ.
    for _ in 0..20 {
        let st = random_state(&[("A", 2), ("B", 2)], &mut rng);
        let tau = random_density(4, 4, &mut rng);
        let t = rng.random_range(0.02..0.3);
        let sigma = state(&st.matrix.scale(1.0 - t) + &tau.scale(t), &[("A", 2), ("B", 2)]);
        let delta = numkit::purified_distance(&st.matrix, &sigma.matrix).unwrap();
        let eps = 0.05;
        b.le(
            "continuity",
            smooth_hmin(&sigma, &["A"], &["B"], eps).unwrap(),
            smooth_hmin(&st, &["A"], &["B"], eps + delta).unwrap(),
        );
        b.states += 1;
    }

    // CQ collapse on classically coherent K1 K2.
    for _ in 0..20 {
        let p = dirichlet(2, &mut rng);
        let mut m = CMatrix::zeros(16, 16);
        for (k, &pk) in p.iter().enumerate() {
            let mut kk = CMatrix::zeros(4, 4);
            kk[(3 * k, 3 * k)] = C64::new(pk, 0.0);
            m = &m + &kron(&random_density(4, rng.random_range(1..=4), &mut rng), &kk).unwrap();
        }
        let st = state(m, &[("A", 2), ("B", 2), ("K1", 2), ("K2", 2)]);
        for eps in [0.0, 0.05] {
            let full = smooth_hmin(&st, &["A", "K1"], &["B", "K2"], eps).unwrap();
            b.eq("CQ collapse min K2", full, smooth_hmin(&st, &["A"], &["B", "K2"], eps).unwrap());
            b.eq("CQ collapse min K1", full, smooth_hmin(&st, &["A"], &["B", "K1"], eps).unwrap());
            let full = smooth_hmax(&st, &["A", "K1"], &["B", "K2"], eps).unwrap();
            b.eq("CQ collapse max K2", full, smooth_hmax(&st, &["A"], &["B", "K2"], eps).unwrap());
            b.eq("CQ collapse max K1", full, smooth_hmax(&st, &["A"], &["B", "K1"], eps).unwrap());
        }
        b.states += 1;
    }

    // Decoupled CQ states Σ p_k ρ_k ⊗ σ_k ⊗ |k⟩⟨k|.
    for _ in 0..15 {
        let k = rng.random_range(2..=3);
        let p = dirichlet(k, &mut rng);
        let mut m = CMatrix::zeros(4 * k, 4 * k);
        for (j, &pj) in p.iter().enumerate() {
            let mut proj = CMatrix::zeros(k, k);
            proj[(j, j)] = C64::new(pj, 0.0);
            let rho = random_density(2, rng.random_range(1..=2), &mut rng);
            let sig = random_density(2, rng.random_range(1..=2), &mut rng);
            m = &m + &kron(&kron(&rho, &sig).unwrap(), &proj).unwrap();
        }
        let st = state(m, &[("A", 2), ("C", 2), ("K", k)]);
        for eps in [0.0, 0.05] {
            let hk = smooth_hmin(&st, &["A"], &["K"], eps).unwrap();
            b.eq("decoupled CQ", smooth_hmin(&st, &["A"], &["C", "K"], eps).unwrap(), hk);
            b.le("decoupled CQ non-negative", 0.0, hk);
        }
        b.states += 1;
    }

    // Classically labelled pure ensembles.
    for _ in 0..15 {
        let k = 2;
        let p = dirichlet(k, &mut rng);
        let mut tri = CMatrix::zeros(8 * k, 8 * k);
        let mut bi = CMatrix::zeros(4 * k, 4 * k);
        for (j, &pj) in p.iter().enumerate() {
            let mut proj = CMatrix::zeros(k, k);
            proj[(j, j)] = C64::new(pj, 0.0);
            let psi = CMatrix::outer(&random_pure_state(8, &mut rng));
            tri = &tri + &kron(&psi, &proj).unwrap();
            let phi = CMatrix::outer(&random_pure_state(4, &mut rng));
            bi = &bi + &kron(&phi, &proj).unwrap();
        }
        let tri = state(tri, &[("A", 2), ("B", 2), ("C", 2), ("K", k)]);
        let bi = state(bi, &[("A", 2), ("B", 2), ("K", k)]);
        for eps in [0.0, 0.05] {
            b.eq(
                "labelled duality",
                smooth_hmax(&tri, &["A"], &["B", "K"], eps).unwrap(),
                -smooth_hmin(&tri, &["A"], &["C", "K"], eps).unwrap(),
            );
            b.eq(
                "labelled symmetry",
                smooth_hmin(&bi, &["A"], &["K"], eps).unwrap(),
                smooth_hmin(&bi, &["B"], &["K"], eps).unwrap(),
            );
        }
        b.states += 2;
    }

    // One-dimensional A.
    for _ in 0..20 {
        let db = rng.random_range(1..=3);
        let st = random_state(&[("A", 1), ("B", db)], &mut rng);
        for eps in [0.05f64, 0.1, 0.2] {
            let edge = (1.0 - 2.0 * eps).log2();
            let hmin = smooth_hmin(&st, &["A"], &["B"], eps).unwrap();
            let hmax = smooth_hmax(&st, &["A"], &["B"], eps).unwrap();
            b.le("one-dim Hmin >= 0", 0.0, hmin);
            b.le("one-dim Hmin <= -log(1-2e)", hmin, -edge);
            b.le("one-dim Hmax <= 0", hmax, 0.0);
            b.le("one-dim Hmax >= log(1-2e)", edge, hmax);
        }
        b.states += 1;
    }

    // Monotone in the smoothing parameter.
    for _ in 0..20 {
        let st = random_state(&[("A", 2), ("B", 2)], &mut rng);
        let grid = [0.0, 0.05, 0.1, 0.2];
        let mins: Vec<f64> = grid.iter().map(|&e| smooth_hmin(&st, &["A"], &["B"], e).unwrap()).collect();
        let maxs: Vec<f64> = grid.iter().map(|&e| smooth_hmax(&st, &["A"], &["B"], e).unwrap()).collect();
        for w in 0..grid.len() - 1 {
            b.le("Hmin non-decreasing in eps", mins[w], mins[w + 1]);
            b.le("Hmax non-increasing in eps", maxs[w + 1], maxs[w]);
        }
        b.states += 1;
    }

    let secs = start.elapsed().as_secs_f64();
    for v in b.violations.iter().take(10) {
        println!("  violation: {v}");
    }
    let pass = b.violations.is_empty() && b.states >= 500;
    report(
        3,
        pass,
        &format!(
            "{} states, {} checks, {} violations beyond {SLACK:.1e}, {secs:.1} s",
            b.states,
            b.checks,
            b.violations.len()
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------------------
// 5. Decoupling bound against Haar sampling
// ---------------------------------------------------------------------------

#[test]
fn criterion_05_decoupling() {
    use hsrd::decouple::{decoupling_bound, empirical_lhs, StructuredState};
    let start = Instant::now();
    let mut rows = Vec::new();
    let mut seed = 500;
    for j in [2usize, 4] {
        for dc in [2usize, 4] {
            let n = j * dc;
            for variant in 0..5 {
                seed += 1;
                let mut rng = rng_from_seed(seed);
                let (ds, env, ch) = match variant {
                    0 => (1, 1, Channel::partial_trace(vec![j, dc], &[0]).unwrap()),
                    1 => (2, 2, Channel::partial_trace(vec![j, dc], &[1]).unwrap()),
                    2 => (1, 3, Channel::partial_trace(vec![j, dc], &[0]).unwrap()),
                    3 => (2, 1, Channel::new(vec![n], vec![2], n.div_ceil(2), isometry(n, 2 * n.div_ceil(2), &mut rng)).unwrap()),
                    _ => (1, 2, Channel::new(vec![n], vec![4], n.div_ceil(4), isometry(n, 4 * n.div_ceil(4), &mut rng)).unwrap()),
                };
                let psi = StructuredState::random(j, dc, ds, env, &mut rng).unwrap();
                let bound = decoupling_bound(&psi, &ch).unwrap().value;
                let stats = empirical_lhs(&psi, &ch, 200, seed).unwrap();
                rows.push((j, dc, ds, env, variant, stats.mean, bound));
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let mut ok = true;
    for &(j, dc, ds, env, variant, mean, bound) in &rows {
        ok &= mean <= bound;
        println!("  J={j} d_C={dc} d_S={ds} env={env} channel={variant}: mean {mean:.6} bound {bound:.6} margin {:.6}", bound - mean);
    }
    let min_margin = rows.iter().map(|r| r.6 - r.5).fold(f64::INFINITY, f64::min);
    let pass = ok && rows.len() >= 20 && secs < 300.0;
    report(5, pass, &format!("{} configs x 200 samples, min margin {min_margin:.4}, {secs:.1} s (limit 300 s)", rows.len()));
    assert!(pass);
}

// ---------------------------------------------------------------------------
// 6. Bi-decoupling pair search
// ---------------------------------------------------------------------------

#[test]
fn criterion_06_bidecoupling_search() {
    use hsrd::decouple::{bidecoupling_conditions, find_bidecoupling_pair, BidecouplingOutcome, DecoupleConfig};
    // (j_l, j_r, d_c, d_s, env); instances are random states of these shapes
    // for which all four dimension conditions hold at δ = 0.3.
    let families = [
        (1, 2, [1, 1, 4], [1, 1, 1], 256),
        (1, 2, [1, 1, 8], [1, 2, 1], 16),
        (1, 4, [1, 1, 8], [1, 1, 1], 8),
        (1, 2, [1, 1, 8], [2, 2, 1], 16),
    ];
    let start = Instant::now();
    let (mut instances, mut found, mut drawn) = (0, 0, 0);
    let mut tries_used = Vec::new();
    let mut seed = 600;
    while instances < 20 && drawn < 200 {
        let (j_l, j_r, d_c, d_s, env) = families[drawn % families.len()];
        drawn += 1;
        seed += 1;
        let cfg = DecoupleConfig { j_l, j_r, d_c, d_s, env, eps: 0.0, delta: 0.3, samples: 1, seed };
        let psi = cfg.random_state().unwrap();
        if !bidecoupling_conditions(&cfg, &psi).unwrap().all_hold() {
            continue;
        }
        instances += 1;
        match find_bidecoupling_pair(&cfg, &psi, 100).unwrap() {
            BidecouplingOutcome::Found { tries, .. } => {
                found += 1;
                tries_used.push(tries);
            }
            BidecouplingOutcome::Exhausted { best_max, .. } => println!("  seed {seed}: exhausted, best max distance {best_max:.4}"),
            BidecouplingOutcome::HypothesisUnmet { .. } => unreachable!("conditions checked above"),
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let rate = found as f64 / instances.max(1) as f64;
    let max_tries = tries_used.iter().copied().max().unwrap_or(0);
    let pass = instances == 20 && rate >= 0.95;
    report(
        6,
        pass,
        &format!(
            "{found}/{instances} instances found within 100 tries (need 95%), {drawn} drawn, max tries {max_tries}, {secs:.1} s"
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------------------
// 7. End-to-end construction
// ---------------------------------------------------------------------------

use hsrd::qstate::{HybridSource, RateTuple, SourceDims, SourceEntry};

/// cos θ|000⟩ + e^{iφ_k} sin θ|111⟩ on ABC with X = Y = Z = k.
fn ghz_labelled(theta: f64, p0: f64, phases: [f64; 2]) -> HybridSource {
    let dims = SourceDims { a: 2, b: 2, c: 2, x: 2, y: 2, z: 2, ..SourceDims::trivial() };
    let entries = (0..2)
        .map(|k| {
            let mut psi = vec![C64::new(0.0, 0.0); 8];
            psi[0] = C64::new(theta.cos(), 0.0);
            psi[7] = C64::from_polar(theta.sin(), phases[k]);
            SourceEntry { x: k, y: k, z: k, p: if k == 0 { p0 } else { 1.0 - p0 }, psi }
        })
        .collect();
    HybridSource::new(dims, entries).unwrap()
}

fn random_source(dims: SourceDims, seed: u64) -> HybridSource {
    HybridSource::random(dims, &mut rng_from_seed(seed)).unwrap()
}

fn tuple(t: [f64; 4]) -> RateTuple {
    RateTuple::new(t[0], t[1], t[2], t[3]).unwrap()
}

#[test]
fn criterion_07_end_to_end() {
    use hsrd::protocol::{construct_protocol, ConstructParams};
    use std::f64::consts::FRAC_PI_4;
    let quantum = SourceDims { a: 2, b: 2, c: 2, r: 2, ..SourceDims::trivial() };
    let labelled = SourceDims { a: 2, b: 2, c: 2, z: 2, ..SourceDims::trivial() };
    let cases = [
        ("ghz", ghz_labelled(FRAC_PI_4, 0.5, [0.0, 0.0]), [1.0, 1.0, 0.0, 0.0], 0.9),
        ("ghz-amplitudes", ghz_labelled(0.6, 0.3, [0.0, 0.0]), [1.0, 1.0, 0.0, 0.0], 0.01),
        ("ghz-phases", ghz_labelled(0.9, 0.5, [0.4, 2.0]), [1.0, 1.0, 0.0, 0.0], 0.01),
        ("random-abcr", random_source(quantum, 70), [0.0, 1.0, 0.0, 0.0], 0.01),
        ("random-abcz", random_source(labelled, 71), [1.0, 1.0, 0.0, 0.0], 0.01),
        ("random-abcr-merge", random_source(quantum, 72), [0.0, 0.0, 1.0, 0.0], 0.3),
        ("random-abcz-merge", random_source(labelled, 73), [1.0, 0.0, 1.0, 0.0], 0.3),
    ];
    let mut ok = true;
    let mut worst_secs: f64 = 0.0;
    for (name, src, t, delta) in &cases {
        assert_eq!(src.dims().c, 2);
        assert!(src.dims().total() <= 64);
        let start = Instant::now();
        let c = construct_protocol(src, &ConstructParams::new(tuple(*t), 0.0, *delta, 7)).unwrap();
        let secs = start.elapsed().as_secs_f64();
        worst_secs = worst_secs.max(secs);
        let budget = 4.0 * (6.0 * delta).sqrt();
        let info = c.report.construction.as_ref().unwrap();
        let good = c.report.achieved_error <= budget && c.report.achieved_error <= info.chain_bound + 1e-9 && secs < 300.0;
        ok &= good;
        println!(
            "  {name}: tuple {t:?}, delta {delta}, error {:.6}, budget {budget:.4}, chain bound {:.4}, conditions hold {}, {secs:.2} s",
            c.report.achieved_error, info.chain_bound, info.hypotheses_hold
        );
    }
    let pass = ok && cases.len() >= 5;
    report(7, pass, &format!("{} sources with d_C = 2, all within 4*sqrt(12eps+6delta), slowest {worst_secs:.2} s (limit 300 s)", cases.len()));
    assert!(pass);
}

// ---------------------------------------------------------------------------
// 8. Converse audit of valid protocols
// ---------------------------------------------------------------------------

#[test]
fn criterion_08_converse_audit() {
    use hsrd::protocol::{
        audit_converse, dense_code_wrap, identity_protocol, noisy_identity, scrambled_identity, teleport_wrap,
        with_catalyst, with_generated_pairs, RedistProtocol,
    };
    let sources = [
        SourceDims { b: 2, c: 2, r: 2, ..SourceDims::trivial() },
        SourceDims { a: 2, b: 2, c: 2, ..SourceDims::trivial() },
        SourceDims { b: 2, c: 2, z: 2, ..SourceDims::trivial() },
        SourceDims { a: 2, b: 2, c: 2, z: 2, ..SourceDims::trivial() },
        SourceDims { b: 2, c: 2, y: 2, z: 2, ..SourceDims::trivial() },
    ];
    let start = Instant::now();
    let (mut audited, mut violations, mut rows) = (0, 0, 0);
    for (k, dims) in sources.iter().enumerate() {
        let src = random_source(*dims, 80 + k as u64);
        let d = *src.dims();
        let mut rng = rng_from_seed(800 + k as u64);
        let id = identity_protocol(&src).unwrap();
        let u = sample_haar_unitary(d.c, &mut rng).unwrap();
        let scr = scrambled_identity(&src, &u).unwrap();
        let tp = teleport_wrap(&id, &d, 1).unwrap();
        let protocols: Vec<RedistProtocol> = vec![
            id.clone(),
            scr.clone(),
            noisy_identity(&src, 0.002).unwrap(),
            tp.clone(),
            with_catalyst(&id, &d, 1).unwrap(),
            with_generated_pairs(&id, &d, 1).unwrap(),
            with_catalyst(&tp, &d, 1).unwrap(),
            dense_code_wrap(&tp, &d, 1).unwrap(),
            teleport_wrap(&scr, &d, 1).unwrap(),
            with_catalyst(&with_generated_pairs(&id, &d, 1).unwrap(), &d, 1).unwrap(),
        ];
        for p in &protocols {
            let a = audit_converse(&src, p, 0.05).unwrap();
            audited += 1;
            rows += a.checks.len();
            violations += a.violations;
            if a.violations > 0 {
                for c in a.checks.iter().filter(|c| !c.satisfied) {
                    println!("  violation: source {k}, {}, row {} slack {:.6}", a.protocol, c.label, c.slack);
                }
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = audited >= 50 && violations == 0;
    report(8, pass, &format!("{audited} protocols, {rows} converse rows checked, {violations} violations, {secs:.1} s"));
    assert!(pass);
}

// ---------------------------------------------------------------------------
// 9. Scenario reductions
// ---------------------------------------------------------------------------

fn scenario_dims(id: hsrd::region::ScenarioId) -> SourceDims {
    use hsrd::region::ScenarioId::*;
    let t = SourceDims::trivial();
    match id {
        Fqsr => SourceDims { a: 2, b: 2, c: 2, r: 2, ..t },
        FqSlepianWolf => SourceDims { b: 2, c: 2, r: 2, ..t },
        StateSplitting => SourceDims { a: 2, c: 2, r: 2, ..t },
        StateMerging => SourceDims { b: 2, c: 2, r: 2, ..t },
        CdcQsi => SourceDims { b: 2, z: 2, r: 2, ..t },
        QdcCsi => SourceDims { c: 2, y: 2, r: 2, ..t },
        ClassicalSlepianWolf => SourceDims { y: 2, z: 2, ..t },
        QsrCsiDecoder => SourceDims { a: 2, b: 2, c: 2, y: 2, ..t },
    }
}

fn compare_rows(
    what: &str,
    reduced: &hsrd::region::BoundReport,
    general: &hsrd::region::BoundReport,
    worst: &mut f64,
    problems: &mut Vec<String>,
) {
    let labels = |r: &hsrd::region::BoundReport| r.inequalities.iter().map(|i| i.label.clone()).collect::<Vec<_>>();
    if labels(reduced) != labels(general) {
        problems.push(format!("{what}: rows {:?} vs {:?}", labels(reduced), labels(general)));
        return;
    }
    for (a, b) in reduced.inequalities.iter().zip(&general.inequalities) {
        let diff = (a.rhs - b.rhs).abs();
        *worst = worst.max(diff);
        if diff > 1e-6 || a.coeffs != b.coeffs || a.relation != b.relation {
            problems.push(format!("{what} {}: {} vs {}", a.label, a.rhs, b.rhs));
        }
    }
}

#[test]
fn criterion_09_scenario_reductions() {
    use hsrd::region::{asymptotic_region, converse_bound, direct_bound, reduce_scenario, ScenarioId, ScenarioSpec};
    let (eps, delta) = (0.05, 0.05);
    let start = Instant::now();
    let (mut worst, mut worst_cf) = (0.0f64, 0.0f64);
    let mut problems = Vec::new();
    let (mut sources, mut closed) = (0, 0);
    for (s, id) in ScenarioId::ALL.iter().enumerate() {
        let spec = ScenarioSpec::new(*id);
        for i in 0..10 {
            let src = random_source(scenario_dims(*id), 900 + 10 * s as u64 + i);
            let red = reduce_scenario(&src, &spec, eps, delta).unwrap();
            let tag = format!("{} #{i}", id.name());
            compare_rows(&format!("{tag} direct"), &red.direct, &direct_bound(&src, eps, delta).unwrap(), &mut worst, &mut problems);
            compare_rows(&format!("{tag} converse"), &red.converse, &converse_bound(&src, eps, delta).unwrap(), &mut worst, &mut problems);
            let asym = asymptotic_region(&src).unwrap();
            compare_rows(&format!("{tag} inner"), &red.asymptotic.inner, &asym.inner, &mut worst, &mut problems);
            compare_rows(&format!("{tag} outer"), &red.asymptotic.outer, &asym.outer, &mut worst, &mut problems);
            for cf in &red.closed_forms {
                let Some(row) = &cf.row else { continue };
                match red.asymptotic.inner.rhs(row) {
                    Some(v) => {
                        let diff = (v - cf.value).abs();
                        worst_cf = worst_cf.max(diff);
                        closed += 1;
                        if diff > 1e-6 {
                            problems.push(format!("{tag} closed form {} = {}: {} vs row {row} {v}", cf.name, cf.expression, cf.value));
                        }
                    }
                    None => problems.push(format!("{tag}: closed form {} names missing row {row}", cf.name)),
                }
            }
            sources += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    for p in problems.iter().take(10) {
        println!("  mismatch: {p}");
    }
    let pass = problems.is_empty() && sources == 80;
    report(
        9,
        pass,
        &format!(
            "8 scenarios x 10 sources, max row diff {worst:.2e}, {closed} closed forms max diff {worst_cf:.2e} (tol 1e-6), {secs:.1} s"
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------------------
// 10. CLI determinism, formats and exit codes
// ---------------------------------------------------------------------------

fn hsrd_cli(args: &[&str], env: &[(&str, &str)]) -> (i32, Vec<u8>, String) {
    let mut cmd = std::process::Command::new(env!("CARGO_BIN_EXE_hsrd"));
    cmd.args(args);
    for (k, v) in env {
        cmd.env(k, v);
    }
    let out = cmd.output().unwrap();
    (out.status.code().unwrap_or(-1), out.stdout, String::from_utf8_lossy(&out.stderr).into_owned())
}

#[test]
fn criterion_10_cli() {
    let dir = tempfile::tempdir().unwrap();
    let path = |name: &str| dir.path().join(name).to_string_lossy().into_owned();
    let mut problems = Vec::new();

    // JSON source round trip, in memory and through a file.
    let src = random_source(SourceDims { a: 2, b: 2, c: 2, y: 2, z: 2, ..SourceDims::trivial() }, 1000);
    let text = src.to_json();
    if HybridSource::from_json(&text).unwrap() != src {
        problems.push("source JSON round trip changed the source".to_string());
    }
    let state_file = path("source.json");
    src.save(std::path::Path::new(&state_file)).unwrap();
    if HybridSource::load(std::path::Path::new(&state_file)).unwrap() != src {
        problems.push("source file round trip changed the source".to_string());
    }
    let bound = hsrd::region::direct_bound(&src, 0.05, 0.05).unwrap();
    // Reports are written rounded to 6 decimals; the written form is a fixed point.
    let written = bound.to_json();
    if hsrd::region::BoundReport::from_json(&written).unwrap().to_json() != written {
        problems.push("bound report JSON is not stable under a round trip".to_string());
    }

    // Fixed-seed reruns give identical bytes.
    let cfg = r#"[{"j_l": 1, "j_r": 2, "d_c": [1, 1, 4], "d_s": [1, 1, 1], "env": 4, "delta": 0.3, "samples": 50},
                  {"j_l": 2, "j_r": 1, "d_c": [2, 1, 1], "d_s": [1, 1, 1], "env": 2, "delta": 0.5, "samples": 50}]"#;
    std::fs::write(path("cfg.json"), cfg).unwrap();
    let runs: Vec<&[&str]> = vec![
        &["decouple", "--config", "CFG", "--seed", "7"],
        &["sweep", "--state", "SRC", "--x", "q:0:2:0.5", "--y", "e:0:1:0.5", "--fixed", "c=1,e0=0"],
        &["region", "direct", "--state", "SMALL"],
        &["protocol", "run", "--state", "SRC", "--tuple", "1,1,0,0"],
    ];
    let (cfg_file, src_file, small_file) = (path("cfg.json"), state_file.clone(), path("small.json"));
    let small = random_source(SourceDims { b: 2, c: 2, z: 2, ..SourceDims::trivial() }, 1001);
    small.save(std::path::Path::new(&small_file)).unwrap();
    for r in &runs {
        let args: Vec<&str> = r.iter().map(|a| match *a {
            "CFG" => cfg_file.as_str(),
            "SRC" => src_file.as_str(),
            "SMALL" => small_file.as_str(),
            other => other,
        }).collect();
        let (c1, o1, e1) = hsrd_cli(&args, &[]);
        let (c2, o2, _) = hsrd_cli(&args, &[]);
        if c1 != 0 || c2 != 0 || o1 != o2 || o1.is_empty() {
            problems.push(format!("{}: exit {c1}/{c2}, identical {} ({e1})", r[0], o1 == o2));
        }
    }

    // Exit-code contract.
    let bell = concat!(env!("CARGO_MANIFEST_DIR"), "/../../data/bell.json");
    let codes: Vec<(&str, Vec<&str>, Vec<(&str, &str)>, i32)> = vec![
        ("success", vec!["entropy", "--state", bell, "--quantity", "hmin", "--systems", "C|B"], vec![], 0),
        ("malformed systems", vec!["entropy", "--state", bell, "--quantity", "hmin", "--systems", "C|B|A"], vec![], 2),
        ("missing file", vec!["entropy", "--state", "/nonexistent.json", "--quantity", "hmin", "--systems", "C|B"], vec![], 2),
        ("unknown flag", vec!["entropy", "--bogus"], vec![], 2),
        ("dimension cap", vec!["decouple", "--config", &cfg_file], vec![("HSRD_DIM_CAP", "4")], 2),
        ("solver failure", vec!["entropy", "--state", bell, "--quantity", "hmin", "--systems", "C|B"], vec![("HSRD_SDP_MAX_ITER", "1")], 3),
        ("plan failure", vec!["protocol", "run", "--state", bell, "--tuple", "0.5,1,0,0"], vec![], 4),
    ];
    for (what, args, env, want) in &codes {
        let (code, _, err) = hsrd_cli(args, env);
        if code != *want {
            problems.push(format!("{what}: exit {code}, expected {want} ({})", err.trim()));
        }
    }

    for p in &problems {
        println!("  problem: {p}");
    }
    let pass = problems.is_empty();
    report(10, pass, &format!("{} reruns byte-identical, JSON round trips, {} exit-code cases", runs.len(), codes.len()));
    assert!(pass);
}
