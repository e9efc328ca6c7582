//! Discrete-harmonic map production: projected gradient descent on the
//! energy, local harmonic replacement on ball regions, and sweepout
//! tightening with a width estimate.
//!
//! The descent direction is the tension field itself: with the exact
//! discrete gradient `dE(u)(V) = −Σ w ⟨Δ_h u, V⟩`, stepping along
//! `T = P_u Δ_h u` decreases energy at rate `‖T‖²_{L²}` to first order, so
//! an Armijo backtracking line search starting from the heat-flow-stable
//! step `η₀ = ¼·min(h_a, h_b)²` is monotone and unconditionally safe.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fields::TorusMap;
use crate::num::pairwise_sum;

/// Default sup-norm tension tolerance declaring a map discrete-harmonic.
pub const SOLVE_TOL: f64 = 1e-8;
/// Default iteration cap for the full-torus solve.
pub const SOLVE_MAX_ITERS: usize = 50_000;
/// Default cap on the energy inside the replacement balls.
pub const ENERGY_CAP: f64 = 0.3;
/// Diagnostic small-energy threshold for the post-replacement gradient
/// bound (logged, never enforced).
pub const EPS_SU: f64 = 0.5;
/// Endpoint degeneracy threshold for sweepouts: endpoint samples must have
/// area ≤ this (times max(1, E)), which admits constant and circle-valued
/// maps alike.
pub const ENDPOINT_TOL: f64 = 1e-6;

/// Options for [`solve_harmonic`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolveOptions {
    /// Stop when the tension sup-norm falls to this.
    pub tol: f64,
    /// Iteration cap; hitting it returns the best iterate, `converged: false`.
    pub max_iters: usize,
    /// Initial trial step; default ¼·min(h_a, h_b)².
    pub eta0: Option<f64>,
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions { tol: SOLVE_TOL, max_iters: SOLVE_MAX_ITERS, eta0: None }
    }
}

/// Outcome of a descent run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolveReport {
    pub iterations: usize,
    /// Tension sup-norm at the returned iterate.
    pub final_tension_norm: f64,
    pub final_energy: f64,
    /// True exactly when `final_tension_norm ≤ tol`.
    pub converged: bool,
    /// Energy after each accepted step (index 0 = input energy).
    pub energy_trace: Vec<f64>,
}

/// A metric ball on the torus: center in lattice coordinates `(a, b)` of
/// the unit square, radius in the flat metric of `T_τ`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ball {
    pub center: (f64, f64),
    pub radius: f64,
}

impl Ball {
    pub fn validate(&self) -> Result<()> {
        let (a, b) = self.center;
        if !a.is_finite() || !b.is_finite() {
            return Err(Error::ConfigViolation("ball center must be finite".into()));
        }
        if !(self.radius > 0.0 && self.radius < 1.0) {
            return Err(Error::BadRadius(self.radius));
        }
        Ok(())
    }
}

/// Geodesic distance on `T_τ` between two points given in lattice
/// coordinates: minimum over the nine nearest lattice translates of
/// `|Δa + Δb·τ|`.
pub fn torus_distance(tau: num_complex::Complex64, p: (f64, f64), q: (f64, f64)) -> f64 {
    torus_chart(tau, p, q).norm()
}

/// Minimal-length representative of `p - center` in the lattice chart:
/// the complex number `Δa + τ·Δb` over all unit-cell shifts of the
/// difference, i.e. the local conformal coordinate of `p` centered at
/// `center`. Its modulus is [`torus_distance`].
pub fn torus_chart(
    tau: num_complex::Complex64,
    p: (f64, f64),
    center: (f64, f64),
) -> num_complex::Complex64 {
    let da0 = p.0 - center.0;
    let db0 = p.1 - center.1;
    let mut best = num_complex::Complex64::new(f64::INFINITY, 0.0);
    let mut best_norm = f64::INFINITY;
    for sa in [-1.0, 0.0, 1.0] {
        for sb in [-1.0, 0.0, 1.0] {
            let da = da0 - da0.round() + sa;
            let db = db0 - db0.round() + sb;
            let z = num_complex::Complex64::new(da + db * tau.re, db * tau.im);
            let n = z.norm();
            if n < best_norm {
                best_norm = n;
                best = z;
            }
        }
    }
    best
}

/// Descend the energy from `u0` until the tension sup-norm reaches
/// `opts.tol`. Accepted steps never increase the energy; on hitting the
/// iteration cap the best iterate is returned with `converged: false`.
pub fn solve_harmonic(u0: &TorusMap, opts: &SolveOptions) -> Result<(TorusMap, SolveReport)> {
    descend(u0, opts, None)
}

/// Shared descent core. When `mask` is given, only nodes with `mask[idx]`
/// move (the rest act as Dirichlet boundary data).
fn descend(
    u0: &TorusMap,
    opts: &SolveOptions,
    mask: Option<&[bool]>,
) -> Result<(TorusMap, SolveReport)> {
    let nd = u0.dim();
    let (na, nb) = u0.grid();
    let target = u0.target().clone();
    let w = u0.weight();
    let ha = 1.0 / na as f64;
    let hb = 1.0 / nb as f64;
    // Spectral bound on the discrete operator; steps must stay strictly
    // inside the forward-Euler stability interval (2/λ_max) or the highest
    // modes ring forever instead of decaying.
    let m = u0.metric();
    let lam_bound =
        4.0 * (m.caa / (ha * ha) + m.cbb / (hb * hb) + m.cab.abs() / (ha * hb));
    let eta_stable = 1.8 / lam_bound;
    let eta0 = opts.eta0.unwrap_or(0.25 * ha.min(hb) * ha.min(hb)).min(eta_stable);
    let eta_max = eta_stable;

    let mut cur = u0.nodes().to_vec();
    let mut energy = u0.energy_of_nodes(&cur);
    let mut trace = vec![energy];
    let mut eta = eta0;

    let tension_of = |nodes: &[f64]| -> (Vec<f64>, f64, f64) {
        let lap = u0.laplacian_of(nodes);
        let mut t = vec![0.0; lap.len()];
        let mut sup: f64 = 0.0;
        let mut l2: Vec<f64> = Vec::with_capacity(na * nb);
        for idx in 0..na * nb {
            let off = idx * nd;
            let masked = mask.map(|m| !m[idx]).unwrap_or(false);
            if masked {
                l2.push(0.0);
                continue;
            }
            target.tangent_project_into(
                &nodes[off..off + nd],
                &lap[off..off + nd],
                &mut t[off..off + nd],
            );
            let n2: f64 = t[off..off + nd].iter().map(|x| x * x).sum();
            sup = sup.max(n2.sqrt());
            l2.push(n2);
        }
        let l2w = w * pairwise_sum(&l2);
        (t, sup, l2w)
    };

    let mut iterations = 0;
    let mut final_sup;
    loop {
        let (t, sup, l2w) = tension_of(&cur);
        final_sup = sup;
        if sup <= opts.tol {
            break;
        }
        if iterations >= opts.max_iters {
            break;
        }
        // Armijo backtracking along the tension direction.
        let mut accepted = false;
        let mut trial = vec![0.0; cur.len()];
        while eta > 1e-18 * eta0 {
            let mut left_tube = false;
            for idx in 0..na * nb {
                let off = idx * nd;
                if mask.map(|m| !m[idx]).unwrap_or(false) {
                    trial[off..off + nd].copy_from_slice(&cur[off..off + nd]);
                    continue;
                }
                let probe: Vec<f64> =
                    (0..nd).map(|k| cur[off + k] + eta * t[off + k]).collect();
                match target.project_into(&probe, &mut trial[off..off + nd]) {
                    Ok(()) => {}
                    Err(Error::OutsideTube { .. }) => {
                        left_tube = true;
                        break;
                    }
                    Err(e) => return Err(e),
                }
            }
            if !left_tube {
                let e_new = u0.energy_of_nodes(&trial);
                // Sufficient-decrease test with an ulp-scale slack: once the
                // predicted decrease sinks below the rounding floor of the
                // total energy, the comparison is pure noise and the plain
                // heat-flow step is accepted as-is.
                let floor = 1e-14 * (1.0 + energy.abs());
                if e_new <= energy - 0.25 * eta * l2w + floor {
                    std::mem::swap(&mut cur, &mut trial);
                    energy = e_new;
                    trace.push(energy);
                    accepted = true;
                    break;
                }
            }
            eta *= 0.5;
        }
        if !accepted {
            return Err(Error::StepUnderflow { iter: iterations, energy });
        }
        eta = (2.0 * eta).min(eta_max);
        iterations += 1;
    }

    let out = TorusMap::from_projected(u0.mark(), target, na, nb, cur);
    let report = SolveReport {
        iterations,
        final_tension_norm: final_sup,
        final_energy: energy,
        converged: final_sup <= opts.tol,
        energy_trace: trace,
    };
    Ok((out, report))
}

/// Energy restricted to the quadrature cells whose base node lies in the
/// union of the balls.
pub fn local_energy(u: &TorusMap, balls: &[Ball]) -> f64 {
    let (na, nb) = u.grid();
    let tau = u.tau();
    let mask: Vec<bool> = (0..na * nb)
        .map(|idx| {
            let p = (
                (idx / nb) as f64 / na as f64,
                (idx % nb) as f64 / nb as f64,
            );
            balls.iter().any(|ball| torus_distance(tau, p, ball.center) < ball.radius)
        })
        .collect();
    masked_energy(u, &mask)
}

/// Energy of the quadrature cells selected by `mask` (base-node rule).
pub(crate) fn masked_energy(u: &TorusMap, mask: &[bool]) -> f64 {
    masked_quadratic(u, u.nodes(), mask)
}

/// The energy quadrature of an arbitrary node block `nodes` (same grid and
/// metric as `u`), restricted to the cells selected by `mask`. With
/// `nodes = u.nodes()` this is the masked energy; with a difference block it
/// gives `½ ∫ |∇(x - y)|²` over the masked region.
pub(crate) fn masked_quadratic(u: &TorusMap, nodes: &[f64], mask: &[bool]) -> f64 {
    let nd = u.dim();
    let (na, nb) = u.grid();
    debug_assert_eq!(nodes.len(), na * nb * nd);
    let m = u.metric();
    let ha = 1.0 / na as f64;
    let hb = 1.0 / nb as f64;
    let saa = m.caa / (ha * ha);
    let sbb = m.cbb / (hb * hb);
    let sab = m.cab / (ha * hb);
    let mut cells = Vec::with_capacity(na * nb);
    for i in 0..na {
        let ip = (i + 1) % na;
        let im = (i + na - 1) % na;
        for j in 0..nb {
            if !mask[i * nb + j] {
                cells.push(0.0);
                continue;
            }
            let jp = (j + 1) % nb;
            let jm = (j + nb - 1) % nb;
            let o = (i * nb + j) * nd;
            let oa = (ip * nb + j) * nd;
            let ob = (i * nb + jp) * nd;
            let oma = (im * nb + j) * nd;
            let omb = (i * nb + jm) * nd;
            let mut eaa = 0.0;
            let mut ebb = 0.0;
            let mut eabp = 0.0;
            let mut eabm = 0.0;
            for k in 0..nd {
                let dxa = nodes[oa + k] - nodes[o + k];
                let dxb = nodes[ob + k] - nodes[o + k];
                let dxam = nodes[o + k] - nodes[oma + k];
                let dxbm = nodes[o + k] - nodes[omb + k];
                eaa += dxa * dxa;
                ebb += dxb * dxb;
                eabp += dxa * dxb;
                eabm += dxam * dxbm;
            }
            cells.push(saa * eaa + sbb * ebb + sab * (eabp + eabm));
        }
    }
    0.5 * u.weight() * pairwise_sum(&cells)
}

/// Per-cell energy density field (base-node cells): entry `i·nb + j` is the
/// cell's contribution to the total energy, so the entries sum to
/// `u.energy()` up to summation order.
pub(crate) fn cell_energy_field(u: &TorusMap) -> Vec<f64> {
    let nd = u.dim();
    let (na, nb) = u.grid();
    let nodes = u.nodes();
    let m = u.metric();
    let ha = 1.0 / na as f64;
    let hb = 1.0 / nb as f64;
    let saa = m.caa / (ha * ha);
    let sbb = m.cbb / (hb * hb);
    let sab = m.cab / (ha * hb);
    let half_w = 0.5 * u.weight();
    let mut cells = vec![0.0; na * nb];
    cells.par_chunks_mut(nb).enumerate().for_each(|(i, row)| {
        let ip = (i + 1) % na;
        let im = (i + na - 1) % na;
        for (j, slot) in row.iter_mut().enumerate() {
            let jp = (j + 1) % nb;
            let jm = (j + nb - 1) % nb;
            let o = (i * nb + j) * nd;
            let oa = (ip * nb + j) * nd;
            let ob = (i * nb + jp) * nd;
            let oma = (im * nb + j) * nd;
            let omb = (i * nb + jm) * nd;
            let mut eaa = 0.0;
            let mut ebb = 0.0;
            let mut eabp = 0.0;
            let mut eabm = 0.0;
            for k in 0..nd {
                let dxa = nodes[oa + k] - nodes[o + k];
                let dxb = nodes[ob + k] - nodes[o + k];
                let dxam = nodes[o + k] - nodes[oma + k];
                let dxbm = nodes[o + k] - nodes[omb + k];
                eaa += dxa * dxa;
                ebb += dxb * dxb;
                eabp += dxa * dxb;
                eabm += dxam * dxbm;
            }
            *slot = half_w * (saa * eaa + sbb * ebb + sab * (eabp + eabm));
        }
    });
    cells
}

/// Replace `u` inside each ball by the interior energy minimizer with the
/// ball's boundary values (local Dirichlet solve); nodes outside the balls
/// are bitwise unchanged and the total energy never increases.
///
/// Preconditions: balls pairwise disjoint on `T_τ`; energy inside the
/// union at most `cap`.
pub fn harmonic_replace(u: &TorusMap, balls: &[Ball], cap: f64) -> Result<TorusMap> {
    for ball in balls {
        ball.validate()?;
    }
    let tau = u.tau();
    for i in 0..balls.len() {
        for j in i + 1..balls.len() {
            let dist = torus_distance(tau, balls[i].center, balls[j].center);
            let sum = balls[i].radius + balls[j].radius;
            if dist <= sum {
                return Err(Error::BallsOverlap { i, j, dist, sum });
            }
        }
    }
    if balls.is_empty() {
        return Ok(u.clone());
    }
    let energy = local_energy(u, balls);
    if energy > cap {
        return Err(Error::EnergyCapExceeded { energy, cap });
    }

    let (na, nb) = u.grid();
    let mut current = u.clone();
    for ball in balls {
        // Interior mask of this ball.
        let mask: Vec<bool> = (0..na * nb)
            .map(|idx| {
                let p = (
                    (idx / nb) as f64 / na as f64,
                    (idx % nb) as f64 / nb as f64,
                );
                torus_distance(tau, p, ball.center) < ball.radius
            })
            .collect();
        let interior = mask.iter().filter(|&&m| m).count();
        if interior == 0 {
            continue;
        }
        if interior == na * nb {
            return Err(Error::ConfigViolation(format!(
                "ball at {:?} with radius {} swallows the whole grid",
                ball.center, ball.radius
            )));
        }
        let before = current.energy();
        let opts = SolveOptions { tol: SOLVE_TOL, max_iters: SOLVE_MAX_ITERS, eta0: None };
        let (next, report) = descend(&current, &opts, Some(&mask))?;
        if !report.converged {
            return Err(Error::NonConvergence(format!(
                "local replacement stalled at tension {:.3e} after {} iterations",
                report.final_tension_norm, report.iterations
            )));
        }
        debug_assert!(report.final_energy <= before + 1e-12 * before.max(1.0));
        replacement_diagnostic(&next, ball);
        current = next;
    }
    Ok(current)
}

/// Small-energy gradient bound diagnostic: on balls with energy below
/// [`EPS_SU`], the discrete gradient at the center should obey
/// `|∇u|²(center) ≲ (energy/ε_su)/r²`. Logged only.
fn replacement_diagnostic(u: &TorusMap, ball: &Ball) {
    let e = local_energy(u, &[*ball]);
    if e >= EPS_SU {
        return;
    }
    let (na, nb) = u.grid();
    let i = (ball.center.0.rem_euclid(1.0) * na as f64).round() as usize % na;
    let j = (ball.center.1.rem_euclid(1.0) * nb as f64).round() as usize % nb;
    let nd = u.dim();
    let c = u.node(i, j);
    let east = u.node(i + 1, j);
    let north = u.node(i, j + 1);
    let mut grad2 = 0.0;
    for k in 0..nd {
        let da = (east[k] - c[k]) * na as f64;
        let db = (north[k] - c[k]) * nb as f64;
        grad2 += da * da + db * db;
    }
    let bound = (e / EPS_SU) / (ball.radius * ball.radius);
    log::debug!(
        "replacement ball at {:?}: energy {e:.3e}, |∇u|²(center) = {grad2:.3e}, bound scale {bound:.3e}",
        ball.center
    );
}

/// A one-parameter family of maps over [0, 1] with degenerate endpoints.
#[derive(Debug, Clone)]
pub struct Sweepout {
    samples: Vec<(f64, TorusMap)>,
}

impl Sweepout {
    /// Validate and wrap: strictly increasing parameters spanning [0, 1],
    /// one shared target and grid, and endpoint samples of negligible area
    /// (constant and circle-valued maps both qualify).
    pub fn new(samples: Vec<(f64, TorusMap)>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::EmptyInput("sweepout has no samples".into()));
        }
        let t0 = samples[0].0;
        let t1 = samples[samples.len() - 1].0;
        if t0 != 0.0 || t1 != 1.0 {
            return Err(Error::ConfigViolation(format!(
                "sweepout must span [0,1], got [{t0}, {t1}]"
            )));
        }
        for w in samples.windows(2) {
            if w[1].0 <= w[0].0 {
                return Err(Error::ConfigViolation(format!(
                    "sweepout parameters must increase strictly: {} then {}",
                    w[0].0, w[1].0
                )));
            }
        }
        let target = samples[0].1.target().clone();
        let grid = samples[0].1.grid();
        for (_, u) in &samples {
            if *u.target() != target {
                return Err(Error::ConfigViolation("sweepout samples mix targets".into()));
            }
            if u.grid() != grid {
                return Err(Error::ConfigViolation("sweepout samples mix grid sizes".into()));
            }
        }
        for idx in [0, samples.len() - 1] {
            let u = &samples[idx].1;
            let area = u.area();
            let scale = u.energy().max(1.0);
            if area > ENDPOINT_TOL * scale {
                return Err(Error::ConfigViolation(format!(
                    "endpoint sample {idx} has area {area:.3e}; endpoints must be degenerate \
                     (constant or circle-valued)"
                )));
            }
        }
        Ok(Sweepout { samples })
    }

    pub fn samples(&self) -> &[(f64, TorusMap)] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn energies(&self) -> Vec<f64> {
        self.samples.iter().map(|(_, u)| u.energy()).collect()
    }

    pub fn max_energy(&self) -> f64 {
        self.energies().into_iter().fold(0.0, f64::max)
    }

    /// Replace the map at sample `idx`, revalidating endpoints.
    pub fn with_sample(&self, idx: usize, u: TorusMap) -> Result<Sweepout> {
        let mut samples = self.samples.clone();
        samples[idx].1 = u;
        Sweepout::new(samples)
    }
}

/// Options for [`tighten`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TightenOptions {
    /// Rounds of replacement sweeps.
    pub rounds: usize,
    /// Samples with energy ≥ (1 − slack)·max get tightened each round.
    pub slack: f64,
    /// Radius of the cover balls (⅛ by convention).
    pub ball_radius: f64,
    /// Per-ball energy cap forwarded to [`harmonic_replace`].
    pub cap: f64,
}

impl Default for TightenOptions {
    fn default() -> Self {
        TightenOptions { rounds: 1, slack: 0.25, ball_radius: 0.125, cap: ENERGY_CAP }
    }
}

/// Staggered disjoint covers of the unit square by balls of the given
/// radius: a 2×2 pattern repeated at four offsets covers every point.
fn staggered_covers(radius: f64) -> Vec<Vec<Ball>> {
    let offsets = [(0.0, 0.0), (0.25, 0.0), (0.0, 0.25), (0.25, 0.25)];
    offsets
        .iter()
        .map(|(oa, ob)| {
            let mut cover = Vec::new();
            for i in 0..2 {
                for j in 0..2 {
                    cover.push(Ball {
                        center: (
                            (0.25 + 0.5 * i as f64 + oa).rem_euclid(1.0),
                            (0.25 + 0.5 * j as f64 + ob).rem_euclid(1.0),
                        ),
                        radius,
                    });
                }
            }
            cover
        })
        .collect()
}

/// Lower the peak energy of a sweepout by rounds of local harmonic
/// replacement on a fixed staggered ball cover. Returns the tightened
/// sweepout and the max energy after each round.
pub fn tighten(sw: &Sweepout, opts: &TightenOptions) -> Result<(Sweepout, Vec<f64>)> {
    let covers = staggered_covers(opts.ball_radius);
    let mut current = sw.clone();
    let mut round_max = Vec::with_capacity(opts.rounds);
    for _ in 0..opts.rounds {
        let energies = current.energies();
        let peak = energies.iter().cloned().fold(0.0, f64::max);
        let threshold = (1.0 - opts.slack) * peak;
        let mut samples = current.samples.clone();
        for (k, (_, u)) in samples.iter_mut().enumerate() {
            if energies[k] < threshold || energies[k] == 0.0 {
                continue;
            }
            let mut v = u.clone();
            for cover in &covers {
                // Skip covers whose local energy violates the cap rather
                // than failing the whole round.
                match harmonic_replace(&v, cover, opts.cap) {
                    Ok(next) => v = next,
                    Err(Error::EnergyCapExceeded { .. }) => continue,
                    Err(e) => return Err(e),
                }
            }
            debug_assert!(v.energy() <= u.energy() + 1e-12 * u.energy().max(1.0));
            *u = v;
        }
        current = Sweepout { samples };
        round_max.push(current.max_energy());
    }
    Ok((current, round_max))
}

/// Width upper bound: the smallest over the given sweepouts of the largest
/// sample energy.
pub fn width_estimate(sweepouts: &[Sweepout]) -> Result<f64> {
    if sweepouts.is_empty() {
        return Err(Error::EmptyInput("width estimate needs at least one sweepout".into()));
    }
    Ok(sweepouts.iter().map(|s| s.max_energy()).fold(f64::INFINITY, f64::min))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::{Section, SectionFlavor};
    use crate::moduli::Mark;
    use crate::num::rng_from_seed;
    use crate::targets::TargetManifold;
    use rand::Rng;
    use std::f64::consts::PI;

    fn mark_i() -> Mark {
        Mark::new(0.0, 1.0)
    }

    fn clifford(n: usize) -> TorusMap {
        let r = 1.0 / 2f64.sqrt();
        TorusMap::from_fn(mark_i(), TargetManifold::unit_s3(), n, n, |a, b| {
            vec![
                r * (2.0 * PI * a).cos(),
                r * (2.0 * PI * a).sin(),
                r * (2.0 * PI * b).cos(),
                r * (2.0 * PI * b).sin(),
            ]
        })
        .unwrap()
    }

    fn noisy_clifford(n: usize, amp: f64, seed: u64) -> TorusMap {
        let u = clifford(n);
        let mut rng = rng_from_seed(seed);
        let ambient = Section {
            flavor: SectionFlavor::Ambient,
            values: (0..u.nodes().len()).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        };
        let tangential = ambient.tangentialize(&u);
        u.perturb(&tangential, amp).unwrap()
    }

    /// Hopf-style rotation family sweeping between the two great circles
    /// through the product torus; endpoints are circle-valued (area 0).
    fn rotation_sweepout(n: usize, samples: usize, winding: usize) -> Sweepout {
        let target = TargetManifold::unit_s3();
        let list: Vec<(f64, TorusMap)> = (0..samples)
            .map(|k| {
                let t = k as f64 / (samples - 1) as f64;
                let theta = 0.5 * PI * t;
                let (c, s) = (theta.cos(), theta.sin());
                let w = winding as f64;
                let u = TorusMap::from_fn(mark_i(), target.clone(), n, n, |a, b| {
                    vec![
                        c * (2.0 * PI * w * a).cos(),
                        c * (2.0 * PI * w * a).sin(),
                        s * (2.0 * PI * w * b).cos(),
                        s * (2.0 * PI * w * b).sin(),
                    ]
                })
                .unwrap();
                (t, u)
            })
            .collect();
        Sweepout::new(list).unwrap()
    }

    #[test]
    fn torus_distance_is_periodic_metric() {
        let tau = num_complex::Complex64::new(0.0, 1.0);
        assert!((torus_distance(tau, (0.1, 0.1), (0.1, 0.1))).abs() < 1e-15);
        assert!((torus_distance(tau, (0.05, 0.0), (0.95, 0.0)) - 0.1).abs() < 1e-12);
        let d = torus_distance(tau, (0.0, 0.0), (0.5, 0.5));
        assert!((d - (0.5f64 * 0.5 + 0.5 * 0.5).sqrt()).abs() < 1e-12);
        // Skew torus: the b-offset picks up Re τ.
        let skew = num_complex::Complex64::new(0.5, 1.0);
        let d = torus_distance(skew, (0.0, 0.0), (0.5, 0.0));
        assert!((d - 0.5).abs() < 1e-12);
        let d = torus_distance(skew, (0.0, 0.0), (0.0, 0.5));
        // Candidates: |0.25 + 0.5i| via the shift a−1… min over shifts.
        let direct = (0.25f64 * 0.25 + 0.25).sqrt();
        let shifted = (0.75f64 * 0.75 + 0.25).sqrt();
        assert!((d - direct.min(shifted)).abs() < 1e-12);
    }

    #[test]
    fn harmonic_input_is_a_fixed_point() {
        let u = clifford(32);
        let (v, report) = solve_harmonic(&u, &SolveOptions::default()).unwrap();
        assert!(report.converged);
        assert_eq!(report.iterations, 0);
        assert_eq!(u.nodes(), v.nodes());
        let c = TorusMap::from_fn(mark_i(), TargetManifold::unit_s3(), 8, 8, |_, _| {
            vec![1.0, 0.0, 0.0, 0.0]
        })
        .unwrap();
        let (_, report) = solve_harmonic(&c, &SolveOptions::default()).unwrap();
        assert!(report.converged);
        assert_eq!(report.iterations, 0);
    }

    /// Product-of-circles maps into a flat product target. These are
    /// energy minimizers in their homotopy class (nonpositively curved
    /// target), hence stable: descent from a small perturbation must come
    /// back to the same energy level.
    fn product_map(n: usize, r1: f64, r2: f64) -> TorusMap {
        let target = TargetManifold::CliffordProduct { r1, r2 };
        TorusMap::from_fn(mark_i(), target, n, n, |a, b| {
            vec![
                r1 * (2.0 * PI * a).cos(),
                r1 * (2.0 * PI * a).sin(),
                r2 * (2.0 * PI * b).cos(),
                r2 * (2.0 * PI * b).sin(),
            ]
        })
        .unwrap()
    }

    #[test]
    fn descent_recovers_stable_product_map_from_noise() {
        let n = 64;
        let u_star = product_map(n, 1.0, 1.0);
        let q = n as f64 * (PI / n as f64).sin();
        let golden = 2.0 * q * q * 2.0;
        assert!((u_star.energy() - golden).abs() <= 1e-10 * golden);

        let mut rng = rng_from_seed(57);
        let ambient = Section {
            flavor: SectionFlavor::Ambient,
            values: (0..u_star.nodes().len()).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        };
        let tangential = ambient.tangentialize(&u_star);
        let u0 = u_star.perturb(&tangential, 1e-2).unwrap();
        assert!(u0.energy() > golden);

        let opts = SolveOptions { tol: 1e-7, max_iters: 80_000, eta0: None };
        let (u, report) = solve_harmonic(&u0, &opts).unwrap();
        assert!(report.converged, "stalled at tension {}", report.final_tension_norm);
        assert!(u.tension_sup() <= 1e-7);
        // The limit is u_star up to circle rotations, which leave the
        // energy untouched.
        assert!(
            (report.final_energy - golden).abs() <= 1e-6 * golden,
            "final energy {} vs minimizer level {golden}",
            report.final_energy
        );
        for w in report.energy_trace.windows(2) {
            assert!(w[1] <= w[0] + 1e-12 * w[0].max(1.0));
        }
    }

    /// The product torus inside the round 3-sphere is an energy saddle:
    /// descent from a generic tangential perturbation escapes downhill and
    /// lands on some lower critical point (constant or circle-valued). The
    /// solver must stay monotone and still converge to a harmonic limit.
    #[test]
    fn descent_from_energy_saddle_escapes_downhill() {
        let n = 32;
        let u0 = noisy_clifford(n, 1e-2, 57);
        let start = u0.energy();
        let opts = SolveOptions { tol: 1e-7, max_iters: 80_000, eta0: None };
        let (u, report) = solve_harmonic(&u0, &opts).unwrap();
        assert!(report.converged, "stalled at tension {}", report.final_tension_norm);
        assert!(u.tension_sup() <= 1e-7);
        assert!(report.final_energy < start);
        for w in report.energy_trace.windows(2) {
            assert!(w[1] <= w[0] + 1e-12 * w[0].max(1.0));
        }
    }

    #[test]
    fn replace_on_empty_ball_list_is_identity() {
        let u = noisy_clifford(16, 1e-2, 3);
        let v = harmonic_replace(&u, &[], ENERGY_CAP).unwrap();
        assert_eq!(u.nodes(), v.nodes());
    }

    #[test]
    fn replace_leaves_harmonic_maps_unchanged() {
        // Low-radius product circles keep the ball energy under the
        // default small-energy cap.
        let u = product_map(32, 0.05, 0.05);
        let ball = Ball { center: (0.3, 0.4), radius: 0.125 };
        let v = harmonic_replace(&u, &[ball], ENERGY_CAP).unwrap();
        for (a, b) in u.nodes().iter().zip(v.nodes()) {
            assert!((a - b).abs() <= 1e-10);
        }
    }

    #[test]
    fn replace_decreases_energy_of_a_spike_and_is_local() {
        let n = 32;
        let u = TorusMap::from_fn(mark_i(), TargetManifold::unit_s3(), n, n, |_, _| {
            vec![1.0, 0.0, 0.0, 0.0]
        })
        .unwrap();
        // Displace one node inside the ball and reproject.
        let mut nodes = u.nodes().to_vec();
        let idx = u.offset(n / 4, n / 4);
        let spiked: Vec<f64> = {
            let node = &nodes[idx..idx + 4];
            let probe = [node[0] + 0.15, node[1] - 0.08, node[2] + 0.1, node[3]];
            u.target().project(&probe).unwrap()
        };
        nodes[idx..idx + 4].copy_from_slice(&spiked);
        let spiky = u.with_nodes(nodes).unwrap();
        let ball = Ball { center: (0.25, 0.25), radius: 0.125 };
        let tau = spiky.tau();
        let before = spiky.energy();
        let v = harmonic_replace(&spiky, &[ball], ENERGY_CAP).unwrap();
        assert!(v.energy() < before - 1e-6, "energy {} → {}", before, v.energy());
        // Locality: nodes outside the ball are bitwise untouched.
        let nd = spiky.dim();
        for i in 0..n {
            for j in 0..n {
                let p = (i as f64 / n as f64, j as f64 / n as f64);
                if torus_distance(tau, p, ball.center) >= ball.radius {
                    let off = spiky.offset(i, j);
                    assert_eq!(
                        &spiky.nodes()[off..off + nd],
                        &v.nodes()[off..off + nd],
                        "node ({i},{j}) outside the ball moved"
                    );
                }
            }
        }
    }

    #[test]
    fn replace_rejects_overlap_and_energy_cap() {
        let u = clifford(16);
        let b1 = Ball { center: (0.2, 0.2), radius: 0.2 };
        let b2 = Ball { center: (0.45, 0.2), radius: 0.2 };
        assert!(matches!(
            harmonic_replace(&u, &[b1, b2], ENERGY_CAP),
            Err(Error::BallsOverlap { .. })
        ));
        let ball = Ball { center: (0.5, 0.5), radius: 0.3 };
        assert!(matches!(
            harmonic_replace(&u, &[ball], 1e-6),
            Err(Error::EnergyCapExceeded { .. })
        ));
        assert!(matches!(
            harmonic_replace(&u, &[Ball { center: (0.5, 0.5), radius: 1.5 }], 1.0),
            Err(Error::BadRadius(_))
        ));
    }

    #[test]
    fn local_energy_splits_the_total() {
        let u = noisy_clifford(16, 5e-3, 9);
        let b = Ball { center: (0.25, 0.25), radius: 0.2 };
        let inside = local_energy(&u, &[b]);
        assert!(inside > 0.0 && inside < u.energy());
        // Complement via an explicit mask.
        let (na, nb) = u.grid();
        let mask: Vec<bool> = (0..na * nb)
            .map(|idx| {
                let p = ((idx / nb) as f64 / na as f64, (idx % nb) as f64 / nb as f64);
                torus_distance(u.tau(), p, b.center) >= b.radius
            })
            .collect();
        let outside = masked_energy(&u, &mask);
        assert!((inside + outside - u.energy()).abs() <= 1e-12 * u.energy());
    }

    #[test]
    fn sweepout_validation_enforces_degenerate_endpoints() {
        let sw = rotation_sweepout(16, 5, 1);
        assert_eq!(sw.len(), 5);
        // A sweepout "ending" at the Clifford torus has non-degenerate area.
        let n = 16;
        let samples: Vec<(f64, TorusMap)> = vec![
            (0.0, rotation_sweepout(n, 3, 1).samples()[0].1.clone()),
            (1.0, clifford(n)),
        ];
        assert!(matches!(Sweepout::new(samples), Err(Error::ConfigViolation(_))));
        // Parameter misuse.
        let u = rotation_sweepout(n, 3, 1).samples()[0].1.clone();
        assert!(Sweepout::new(vec![(0.2, u.clone()), (1.0, u.clone())]).is_err());
        assert!(Sweepout::new(vec![]).is_err());
    }

    #[test]
    fn width_of_rotation_sweepout_is_the_clifford_level() {
        let sw = rotation_sweepout(64, 9, 1);
        let w = width_estimate(&[sw.clone()]).unwrap();
        let exact = 2.0 * PI * PI;
        assert!(
            (w - exact).abs() <= 2e-2,
            "width estimate {w} vs continuum level {exact}"
        );
        // Energy along this family is constant: max attained at midpoint too.
        let worse = rotation_sweepout(64, 9, 2);
        assert!(worse.max_energy() > w + 1.0);
        let both = width_estimate(&[sw, worse]).unwrap();
        assert!((both - w).abs() <= 1e-14);
        assert!(width_estimate(&[]).is_err());
    }

    #[test]
    fn tighten_is_monotone_and_fixes_constants() {
        // All-degenerate sweepout: unchanged, max 0 … use constant maps.
        let n = 16;
        let target = TargetManifold::unit_s3();
        let constant = TorusMap::from_fn(mark_i(), target.clone(), n, n, |_, _| {
            vec![1.0, 0.0, 0.0, 0.0]
        })
        .unwrap();
        let sw = Sweepout::new(vec![
            (0.0, constant.clone()),
            (0.5, constant.clone()),
            (1.0, constant.clone()),
        ])
        .unwrap();
        let (tight, maxes) = tighten(&sw, &TightenOptions::default()).unwrap();
        assert_eq!(maxes, vec![0.0]);
        for ((_, a), (_, b)) in sw.samples().iter().zip(tight.samples()) {
            assert_eq!(a.nodes(), b.nodes());
        }

        // Low-energy bump in the middle sample: the cover balls all sit
        // under the small-energy cap, so replacement fires and the peak
        // drops. A second round keeps it monotone.
        let nb = 32;
        let bump = TorusMap::from_fn(mark_i(), target.clone(), nb, nb, |a, b| {
            let da = a - 0.5;
            let db = b - 0.5;
            let g = 0.15 * (-(da * da + db * db) / (0.12 * 0.12)).exp();
            vec![1.0, g, 0.0, 0.0]
        })
        .unwrap();
        let flat = TorusMap::from_fn(mark_i(), target, nb, nb, |_, _| {
            vec![1.0, 0.0, 0.0, 0.0]
        })
        .unwrap();
        let noisy =
            Sweepout::new(vec![(0.0, flat.clone()), (0.5, bump), (1.0, flat)]).unwrap();
        let before = noisy.max_energy();
        assert!(before > 0.01 && before < ENERGY_CAP);
        let opts = TightenOptions { rounds: 2, ..TightenOptions::default() };
        let (_, maxes) = tighten(&noisy, &opts).unwrap();
        assert!(
            maxes[0] < before - 1e-4,
            "first round should smooth the bump: {before} → {}",
            maxes[0]
        );
        assert!(maxes[1] <= maxes[0] + 1e-12 * maxes[0].max(1.0));
    }
}
