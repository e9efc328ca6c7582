//! Constructed reference maps, glued fixtures, and simple sweepouts.
//!
//! The glued fixtures graft spherical profiles onto a harmonic background
//! through the same local charts, Möbius rescalings, and logarithmic cutoffs
//! that the certificate machinery uses, so every fixture comes with a matching
//! bubble collection and configuration. Each fixture also carries a
//! [`DefectBudget`]: an upper bound on its certified distance computed from
//! the construction parameters alone. The budget integrates closed-form
//! pointwise envelopes of the glued profile with an upper Riemann rule — it
//! never measures the map that was actually built, so a budget check is an
//! independent validation of the certificate, not a tautology.

use std::f64::consts::PI;

use num_complex::Complex64;
use rayon::prelude::*;

use crate::bubbles::{
    build_surrogate_fields, cutoff_profile, cylinder_chart, fd_gradient, fd_hessian, solve_small,
    BubbleCollection, BubbleConfig, CutoffProfile, Mobius, SphereBasis, SphereField, SphereMap,
    SurrogatePack, TransplantBases,
};
use crate::error::{Error, Result};
use crate::fields::{MetricCoeffs, Section, SectionFlavor, TorusMap};
use crate::interp::{Boundary, Spline2D};
use crate::moduli::Mark;
use crate::num::norm;
use crate::solver::{masked_quadratic, torus_chart, torus_distance, Ball, Sweepout};
use crate::spectrum::{small_symmetric_eigen, unstable_basis, IndexOptions, UnstableBasis};
use crate::targets::TargetManifold;

// ---------------------------------------------------------------------------
// Reference maps
// ---------------------------------------------------------------------------

const GRID_MIN: usize = 16;
const GRID_MAX: usize = 4096;

fn check_grid(n: usize) -> Result<()> {
    if !(GRID_MIN..=GRID_MAX).contains(&n) {
        return Err(Error::ConfigViolation(format!(
            "fixture grid {n} outside [{GRID_MIN}, {GRID_MAX}]"
        )));
    }
    Ok(())
}

fn clifford_value(a: f64, b: f64) -> Vec<f64> {
    let r = 0.5f64.sqrt();
    vec![
        r * (2.0 * PI * a).cos(),
        r * (2.0 * PI * a).sin(),
        r * (2.0 * PI * b).cos(),
        r * (2.0 * PI * b).sin(),
    ]
}

fn great_circle_value(a: f64, _b: f64) -> Vec<f64> {
    vec![(2.0 * PI * a).cos(), (2.0 * PI * a).sin(), 0.0, 0.0]
}

/// Stereographic parametrization of the unit two-sphere inside `S³ ⊂ R⁴`
/// (fourth coordinate zero, `w = ∞ ↦ −e₃`).
fn equatorial_point(w: Complex64) -> Vec<f64> {
    let n2 = w.norm_sqr();
    let t = 1.0 + n2;
    vec![2.0 * w.re / t, 2.0 * w.im / t, (1.0 - n2) / t, 0.0]
}

/// The flat embedded torus of square conformal type: both grid directions wrap
/// orthogonal great circles of radius `1/√2`. Harmonic, energy `4π²·½·2 = 2π²·2`,
/// and discretely harmonic on any equal-sided grid.
pub fn clifford(n: usize) -> Result<TorusMap> {
    check_grid(n)?;
    TorusMap::from_fn(Mark::new(0.0, 1.0), TargetManifold::unit_s3(), n, n, clifford_value)
}

/// The rank-one map wrapping the first great circle once in the `a`
/// direction; harmonic with a one-dimensional image.
pub fn great_circle(n: usize) -> Result<TorusMap> {
    check_grid(n)?;
    TorusMap::from_fn(Mark::new(0.0, 1.0), TargetManifold::unit_s3(), n, n, great_circle_value)
}

/// The conformal cylinder-to-sphere map on the torus of modulus `i·h_mod`:
/// the exponential chart composed with the stereographic sphere. As
/// `h_mod → ∞` it degenerates to a full bubble; at finite `h_mod` it misses
/// two polar caps of energy `16π/(1+e^{2π·h_mod})`.
pub fn cylinder_body(n: usize, h_mod: f64) -> Result<TorusMap> {
    check_grid(n)?;
    if !(h_mod > 0.05 && h_mod.is_finite()) {
        return Err(Error::DegenerateMark(format!("cylinder modulus {h_mod}")));
    }
    let tau = Complex64::new(0.0, h_mod);
    TorusMap::from_fn(Mark::new(0.0, h_mod), TargetManifold::unit_s3(), n, n, |a, b| {
        equatorial_point(cylinder_chart(tau, a, b))
    })
}

// ---------------------------------------------------------------------------
// Graft construction
// ---------------------------------------------------------------------------

/// Parameters of one grafted bubble: where it sits, the cutoff transition
/// radius, the concentration scale, and an amplitude multiplier on the
/// deviation (1 = the full profile).
#[derive(Debug, Clone)]
pub struct GraftSpec {
    pub center: (f64, f64),
    pub ball_radius: f64,
    pub scale: f64,
    pub amplitude: f64,
}

impl GraftSpec {
    fn validate(&self) -> Result<()> {
        if !(self.ball_radius > 0.0 && self.ball_radius < 1.0) {
            return Err(Error::BadRadius(self.ball_radius));
        }
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(Error::ConfigViolation(format!("graft scale {}", self.scale)));
        }
        if !(self.amplitude.is_finite() && self.amplitude >= 0.0 && self.amplitude <= 1.0) {
            return Err(Error::ConfigViolation(format!("graft amplitude {}", self.amplitude)));
        }
        Ok(())
    }
}

/// One grafted layer, fully instantiated: the sphere profile, the Möbius
/// rescaling actually used to build the map (which a dialed fixture may
/// detune from the one recorded in the certificate configuration), the
/// cutoff, and the matching value at infinity.
struct Layer {
    center: (f64, f64),
    radius: f64,
    amplitude: f64,
    sphere: SphereMap,
    shrink_built: Mobius,
    profile: CutoffProfile,
    pole: Vec<f64>,
}

impl Layer {
    fn new(target: &TargetManifold, spec: &GraftSpec, built_scale: f64, pole: &[f64]) -> Result<Layer> {
        spec.validate()?;
        let sphere = SphereMap::equatorial(target, Some(pole))?;
        Ok(Layer {
            center: spec.center,
            radius: spec.ball_radius,
            amplitude: spec.amplitude,
            pole: sphere.value_at_infinity(),
            shrink_built: Mobius::shrink(built_scale)?,
            profile: cutoff_profile(spec.ball_radius)?,
            sphere,
        })
    }
}

/// Ambient (unprojected) value of the background plus all graft deviations.
fn ambient_value<B>(tau: Complex64, base: &B, layers: &[Layer], a: f64, b: f64) -> Vec<f64>
where
    B: Fn(f64, f64) -> Vec<f64> + ?Sized,
{
    let mut y = base(a, b);
    let one = Complex64::new(1.0, 0.0);
    let mut v = vec![0.0; y.len()];
    for l in layers {
        let rho = torus_distance(tau, (a, b), l.center);
        if rho >= l.radius {
            continue;
        }
        let zeta = 1.0 - l.profile.eval(rho);
        if zeta <= 0.0 {
            continue;
        }
        let z = torus_chart(tau, (a, b), l.center);
        let (num, den) = l.shrink_built.map_frac(z, one);
        l.sphere.eval_frac(num, den, &mut v);
        let s = l.amplitude * zeta;
        for (yk, (vk, pk)) in y.iter_mut().zip(v.iter().zip(&l.pole)) {
            *yk += s * (vk - pk);
        }
    }
    y
}

/// Build the node block of the glued map: background plus deviations, then a
/// single projection back onto the target.
fn glued_nodes<B>(
    tau: Complex64,
    target: &TargetManifold,
    na: usize,
    nb: usize,
    base: &B,
    layers: &[Layer],
) -> Result<Vec<f64>>
where
    B: Fn(f64, f64) -> Vec<f64> + Sync + ?Sized,
{
    let nd = base(0.0, 0.0).len();
    let mut nodes = vec![0.0; na * nb * nd];
    nodes
        .par_chunks_mut(nb * nd)
        .enumerate()
        .try_for_each(|(i, row)| -> Result<()> {
            let a = i as f64 / na as f64;
            for j in 0..nb {
                let b = j as f64 / nb as f64;
                let y = ambient_value(tau, base, layers, a, b);
                target.project_into(&y, &mut row[j * nd..(j + 1) * nd])?;
            }
            Ok(())
        })?;
    Ok(nodes)
}

// ---------------------------------------------------------------------------
// The a-priori defect budget
// ---------------------------------------------------------------------------

/// Upper bound on each certified-distance term of a constructed fixture,
/// computed from construction parameters only. The certificate takes the
/// maximum of its terms, so the budget's headline number does too.
#[derive(Debug, Clone, Copy)]
pub struct DefectBudget {
    /// Modulus mismatch term (zero when the fixture shares the body's mark).
    pub mark: f64,
    /// Body closeness: difference outside the balls plus the body's energy
    /// leak into them (torus case), or the cylinder tail (degenerate case).
    pub body: f64,
    /// Sum over grafted bubbles of difference-plus-tail terms.
    pub bubbles: f64,
    /// Energy over the cutoff annuli.
    pub neck: f64,
}

impl DefectBudget {
    pub fn total(&self) -> f64 {
        self.mark.max(self.body).max(self.bubbles).max(self.neck)
    }
}

const SAFETY: f64 = 1.02;
const PAD_BG: f64 = 1.02;
const PAD_TAIL: f64 = 1.10;
const PAD_CAPS: f64 = 1.30;
const BUDGET_CELLS: usize = 4096;
/// Validity guard for the sharper projection-difference envelope.
const KAPPA_NEAR: f64 = 0.45;
/// Validity guard for the plain projection-derivative envelope.
const KAPPA_FAR: f64 = 0.97;

/// Operator-norm envelope of the derivative of the nearest-point projection
/// onto the unit sphere at distance `d` from it: `‖dΠ_y‖ ≤ 1/(1−d)`.
fn dpi_norm(d: f64) -> f64 {
    if d >= KAPPA_FAR {
        f64::INFINITY
    } else {
        1.0 / (1.0 - d)
    }
}

/// Envelope of `‖dΠ_y − dΠ_v‖` for `v` on the unit sphere and `|y−v| ≤ κ`:
/// `κ/(1−κ)` from the radial factor plus `4κ/(1−κ)²` from the rank-one part.
fn dpi_diff(kappa: f64) -> f64 {
    if kappa >= KAPPA_NEAR {
        f64::INFINITY
    } else {
        let q = 1.0 - kappa;
        kappa / q + 4.0 * kappa / (q * q)
    }
}

/// Upper Riemann sum of `∫ f(ρ)·2πρ dρ` over `[lo, hi]`: per cell, the
/// largest of three samples times the outer circumference, padded by a
/// safety factor for sub-cell variation.
fn upper_annulus_integral<F: Fn(f64) -> f64>(lo: f64, hi: f64, f: F) -> f64 {
    if hi <= lo {
        return 0.0;
    }
    let step = (hi - lo) / BUDGET_CELLS as f64;
    let mut total = 0.0;
    for c in 0..BUDGET_CELLS {
        let a = lo + c as f64 * step;
        let b = a + step;
        let sup = f(a).max(f(0.5 * (a + b))).max(f(b));
        total += sup * 2.0 * PI * b * step;
        if !total.is_finite() {
            return f64::INFINITY;
        }
    }
    total * SAFETY
}

/// Radial envelope of the background gradient seen by one graft: constant
/// for first-layer grafts; for a graft nested inside another bubble's
/// plateau, the host bubble's gradient at the sites the radius can reach.
#[derive(Debug, Clone, Copy)]
enum BgProfile {
    Const(f64),
    /// `body + amp·|∇v_{lam}|(dist − ρ)·pad`, for a host bubble centered
    /// `dist` away.
    Radial { body: f64, amp: f64, lam: f64, dist: f64, pad: f64 },
}

impl BgProfile {
    fn sup(&self, rho: f64) -> f64 {
        match *self {
            BgProfile::Const(g) => g,
            BgProfile::Radial { body, amp, lam, dist, pad } => {
                let s = (dist - rho).max(lam * 1e-3);
                body + amp * pad * 2.0 * 2f64.sqrt() * lam / (lam * lam + s * s)
            }
        }
    }

    /// Exact integral of the envelope from 0 to `rho` (drift of the
    /// background value across the graft).
    fn drift(&self, rho: f64) -> f64 {
        match *self {
            BgProfile::Const(g) => g * rho,
            BgProfile::Radial { body, amp, lam, dist, pad } => {
                let hi = (dist / lam).atan();
                let lo = ((dist - rho).max(lam * 1e-3) / lam).atan();
                body * rho + amp * pad * 2.0 * 2f64.sqrt() * (hi - lo)
            }
        }
    }
}

/// Everything the budget needs to know about one graft. `lam_built` may
/// differ from `lam_cert` for dialed fixtures that are certified against the
/// undetuned configuration.
struct GraftEnvelope {
    r_cfg: f64,
    lam_cert: f64,
    lam_built: f64,
    amp: f64,
    bg: BgProfile,
    /// Distance of the ambient background value at the graft center from the
    /// chosen pole (zero when the background is exactly on the target there).
    pole_gap: f64,
    /// Sup over the ball of the background's own distance from the target.
    dist_bg: f64,
    /// Disks fully carved out of this graft's difference region (center
    /// distance, radius) — they surface in the tail instead.
    holes: Vec<(f64, f64)>,
    profile: CutoffProfile,
    pad_disc_cert: f64,
    pad_disc_built: f64,
    kpad: f64,
}

struct GraftTerms {
    diff: f64,
    tail: f64,
    neck: f64,
    ring: f64,
}

/// Grid-derived constants entering the discrete allowances.
#[derive(Debug, Clone, Copy)]
struct GridData {
    w: f64,
    cell_form: f64,
    min_edge: f64,
    h: f64,
    kpad: f64,
}

impl GridData {
    fn new(tau: Complex64, na: usize, nb: usize) -> GridData {
        let m = MetricCoeffs::new(tau);
        let ea = 1.0 / na as f64;
        let eb = tau.norm() / nb as f64;
        GridData {
            w: 1.0 / (na as f64 * nb as f64),
            cell_form: m.caa + m.cbb + 2.0 * m.cab.abs(),
            min_edge: ea.min(eb),
            h: ea.max(eb),
            kpad: ea.hypot(eb),
        }
    }
}

/// First-difference overshoot pad for sampling a profile of inner scale
/// `lam` on a grid of cell size `h`.
fn pad_disc(h: f64, lam: f64) -> f64 {
    1.0 + 8.0 * (h / lam) * (h / lam)
}

fn chord(lam: f64, rho: f64) -> f64 {
    2.0 * lam / (lam * lam + rho * rho).sqrt()
}

fn grad_profile(lam: f64, rho: f64) -> f64 {
    2.0 * 2f64.sqrt() * lam / (lam * lam + rho * rho)
}

impl GraftEnvelope {
    fn zeta(&self, rho: f64) -> f64 {
        1.0 - self.profile.eval(rho.max(0.0))
    }

    /// Cutoff value padded to its largest over the mask-uncertainty window.
    fn zeta_hi(&self, rho: f64) -> f64 {
        self.zeta(rho - self.kpad)
    }

    /// Cutoff value padded to its smallest over the window.
    fn zeta_lo(&self, rho: f64) -> f64 {
        self.zeta(rho + self.kpad)
    }

    /// Sup of `|ζ'|` over the window around `rho` (the cutoff transition is
    /// `1/(ρ·|log r|)` on `[r², r]` and zero elsewhere).
    fn dzeta_hi(&self, rho: f64, r_built: f64) -> f64 {
        let lo = (rho - self.kpad).max(r_built * r_built);
        let hi = (rho + self.kpad).min(r_built);
        if hi <= lo {
            0.0
        } else {
            1.0 / (lo.max(1e-12) * r_built.ln().abs())
        }
    }

    fn chord_built_hi(&self, rho: f64) -> f64 {
        chord(self.lam_built, (rho - self.kpad).max(0.0))
    }

    /// Polar-angle mismatch between the built and certified profiles.
    fn angle_mismatch(&self, rho: f64) -> f64 {
        if self.lam_built == self.lam_cert {
            return 0.0;
        }
        let r = (rho - self.kpad).max(0.0);
        if r < 1e-9 {
            return 2.0 * r * (self.lam_built - self.lam_cert).abs()
                / (self.lam_built * self.lam_cert);
        }
        2.0 * ((self.lam_built / r).atan() - (self.lam_cert / r).atan()).abs()
    }

    /// Gradient envelope of the difference between the built and certified
    /// profiles (zero when they agree).
    fn grad_mismatch(&self, rho: f64) -> f64 {
        if self.lam_built == self.lam_cert {
            return 0.0;
        }
        let r = (rho - self.kpad).max(0.0);
        let dth = self.angle_mismatch(rho);
        let radial = (grad_profile(self.lam_built, r) - grad_profile(self.lam_cert, r)).abs()
            / 2f64.sqrt();
        let rot = grad_profile(self.lam_cert, r) / 2f64.sqrt() * dth;
        let angular = if r < 1e-9 {
            2.0 * (self.lam_built - self.lam_cert).abs() / (self.lam_built * self.lam_cert)
        } else {
            dth / r
        };
        (radial + rot + angular) * self.pad_disc_built.max(self.pad_disc_cert)
    }

    /// Pointwise distance envelope between the ambient glued value and the
    /// certified profile point at radius `rho`.
    fn kappa(&self, rho: f64) -> f64 {
        let az = self.amp * self.zeta_lo(rho);
        self.bg.drift(rho) * PAD_BG
            + self.pole_gap
            + self.angle_mismatch(rho)
            + (1.0 - az).max(0.0) * self.chord_built_hi(rho)
    }

    fn terms(&self, grid: &GridData, r_built: f64) -> GraftTerms {
        let kpad = self.kpad;
        let gv_c = |rho: f64| grad_profile(self.lam_cert, rho) * self.pad_disc_cert;
        let gv_b = |rho: f64| grad_profile(self.lam_built, rho) * self.pad_disc_built;

        let near = |rho: f64| {
            let k = self.kappa(rho);
            let az = self.amp * self.zeta_lo(rho);
            dpi_diff(k) * gv_c(rho)
                + dpi_norm(k.min(KAPPA_FAR))
                    * (self.bg.sup(rho) * PAD_BG
                        + (1.0 - az).max(0.0) * gv_b(rho)
                        + self.amp * self.dzeta_hi(rho, r_built) * self.chord_built_hi(rho)
                        + self.grad_mismatch(rho))
        };
        let far = |rho: f64| {
            let dev = self.dist_bg + self.amp * self.zeta_hi(rho) * self.chord_built_hi(rho);
            let d = dev.min(self.kappa(rho));
            dpi_norm(d)
                * (self.bg.sup(rho) * PAD_BG
                    + self.amp
                        * (self.zeta_hi(rho) * gv_b(rho)
                            + self.dzeta_hi(rho, r_built) * self.chord_built_hi(rho)))
                + gv_c(rho)
        };
        let omega_hi = self.r_cfg * self.r_cfg + kpad;
        let diff = upper_annulus_integral(0.0, omega_hi, |rho| {
            let n = near(rho);
            let f = far(rho);
            let m = n.min(f);
            m * m
        });

        // Everything the certified sphere carries beyond the pulled-back
        // difference region: the cap outside the core disk, plus any carved
        // hole, plus a chart-granularity allowance folded into the pad.
        let r2 = (self.r_cfg * self.r_cfg - 2.0 * kpad).max(0.0);
        let tail_cap = if r2 <= 0.0 {
            8.0 * PI * SAFETY
        } else {
            let ratio = r2 / self.lam_cert;
            8.0 * PI / (1.0 + ratio * ratio) * PAD_TAIL
        };
        let mut tail = tail_cap;
        for &(dist, r_hole) in &self.holes {
            let sep = (dist - r_hole - kpad).max(self.lam_cert);
            let g = grad_profile(self.lam_cert, sep);
            tail += g * g * PI * (r_hole + kpad) * (r_hole + kpad) * SAFETY;
        }

        let neck_fn = |rho: f64| {
            let dev = self.dist_bg + self.amp * self.zeta_hi(rho) * self.chord_built_hi(rho);
            let g = dpi_norm(dev)
                * (self.bg.sup(rho) * PAD_BG
                    + self.amp
                        * (self.dzeta_hi(rho, r_built) * self.chord_built_hi(rho)
                            + self.zeta_hi(rho) * gv_b(rho)));
            g * g
        };
        let neck = upper_annulus_integral(
            (self.r_cfg * self.r_cfg - kpad).max(0.0),
            self.r_cfg + kpad,
            neck_fn,
        );

        // Cells straddling the certificate ball boundary: bounded by the
        // residual deviation there (zero once the certificate radius clears
        // the construction radius by a cell diagonal).
        let rho_ring = (self.r_cfg - 2.0 * kpad).max(1e-9);
        let delta = 1.2 * self.amp * self.zeta(rho_ring) * chord(self.lam_built, rho_ring);
        let n_ring = (2.0 * PI * (self.r_cfg + 2.0 * grid.h) / grid.min_edge) * 1.3 + 16.0;
        let ring = n_ring * grid.w * grid.cell_form * 4.0 * delta * delta;

        GraftTerms { diff, tail, neck, ring }
    }
}

/// Assemble a torus-case budget: harmonic body of known gradient bounds plus
/// grafted bubbles.
fn budget_torus(
    grid: &GridData,
    body_gsq_sup: f64,
    body_gsq_total: f64,
    envs: &[(GraftEnvelope, f64)],
) -> DefectBudget {
    let mut ring_sum = 0.0;
    let mut leak = 0.0;
    let mut bubbles = 0.0;
    let mut neck_sum = 0.0;
    for (env, r_built) in envs {
        let t = env.terms(grid, *r_built);
        ring_sum += t.ring;
        bubbles += t.diff.sqrt() + t.tail.sqrt();
        neck_sum += t.neck;
        let rk = env.r_cfg + grid.kpad;
        leak += (body_gsq_sup * PI * rk * rk * SAFETY).min(body_gsq_total);
    }
    DefectBudget {
        mark: 0.0,
        body: 3.0 * (ring_sum.sqrt() + leak.sqrt()),
        bubbles: 3.0 * bubbles,
        neck: 3.0 * neck_sum.sqrt(),
    }
}

/// Assemble a degenerate-case budget: cylinder body with polar caps, plus
/// grafted bubbles whose balls punch holes into the body's covered region.
fn budget_cylinder(
    grid: &GridData,
    h_mod: f64,
    ball_gsq_sups: &[f64],
    envs: &[(GraftEnvelope, f64)],
) -> DefectBudget {
    let mut ring_sum = 0.0;
    let mut bubbles = 0.0;
    let mut neck_sum = 0.0;
    let mut body_tail = 16.0 * PI / (1.0 + (2.0 * PI * h_mod).exp()) * PAD_CAPS;
    for ((env, r_built), gsq) in envs.iter().zip(ball_gsq_sups) {
        let t = env.terms(grid, *r_built);
        ring_sum += t.ring;
        bubbles += t.diff.sqrt() + t.tail.sqrt();
        neck_sum += t.neck;
        let rk = env.r_cfg + grid.kpad;
        body_tail += gsq * PI * rk * rk * SAFETY;
    }
    DefectBudget {
        mark: 0.0,
        body: 3.0 * (ring_sum.sqrt() + body_tail.sqrt()),
        bubbles: 3.0 * bubbles,
        neck: 3.0 * neck_sum.sqrt(),
    }
}

// ---------------------------------------------------------------------------
// Glued fixtures
// ---------------------------------------------------------------------------

/// A constructed map bundled with the collection and configuration it was
/// glued from and the a-priori budget on its certified distance.
#[derive(Debug)]
pub struct GluedFixture {
    pub map: TorusMap,
    pub collection: BubbleCollection,
    pub config: BubbleConfig,
    pub budget: DefectBudget,
}

/// Squared flat-gradient bound of the square-type embedded torus: both
/// directions contribute `2π²`, so `|∇u|² = 4π²` everywhere.
const CLIFFORD_GSQ: f64 = 4.0 * PI * PI;

fn clifford_graft_fixture(n: usize, spec: &GraftSpec, scale_mult: f64) -> Result<GluedFixture> {
    check_grid(n)?;
    spec.validate()?;
    if !(scale_mult >= 1.0 && scale_mult.is_finite()) {
        return Err(Error::ConfigViolation(format!("scale multiplier {scale_mult} below 1")));
    }
    let target = TargetManifold::unit_s3();
    let tau = Complex64::new(0.0, 1.0);
    let body = clifford(n)?;

    let pole = clifford_value(spec.center.0, spec.center.1);
    let lam_built = spec.scale * scale_mult;
    let layer = Layer::new(&target, spec, lam_built, &pole)?;
    let sphere_for_coll = SphereMap::equatorial(&target, Some(&pole))?;

    let nodes = glued_nodes(tau, &target, n, n, &clifford_value, std::slice::from_ref(&layer))?;
    let map = TorusMap::new(Mark::new(0.0, 1.0), target, n, n, nodes)?;

    let collection = BubbleCollection::new(Some(body), vec![sphere_for_coll], false)?;
    let config = BubbleConfig {
        balls: vec![Ball { center: spec.center, radius: spec.ball_radius }],
        d0: (0.0, 0.0),
        ds: vec![Mobius::shrink(spec.scale)?],
    };

    let grid = GridData::new(tau, n, n);
    let env = GraftEnvelope {
        r_cfg: spec.ball_radius,
        lam_cert: spec.scale,
        lam_built,
        amp: spec.amplitude,
        bg: BgProfile::Const(CLIFFORD_GSQ.sqrt()),
        pole_gap: 0.0,
        dist_bg: 0.0,
        holes: Vec::new(),
        profile: cutoff_profile(spec.ball_radius)?,
        pad_disc_cert: pad_disc(grid.h, spec.scale),
        pad_disc_built: pad_disc(grid.h, lam_built),
        kpad: grid.kpad,
    };
    let budget =
        budget_torus(&grid, CLIFFORD_GSQ * 1.001, CLIFFORD_GSQ, &[(env, spec.ball_radius)]);
    Ok(GluedFixture { map, collection, config, budget })
}

/// Graft one bubble onto the square-type embedded torus. The certificate
/// configuration records exactly the construction parameters.
pub fn glued_body_bubble(n: usize, spec: &GraftSpec) -> Result<GluedFixture> {
    clifford_graft_fixture(n, spec, 1.0)
}

/// Same construction, but built with the concentration scale detuned by
/// `scale_mult ≥ 1` while the certificate still records the base scale. At
/// `scale_mult = 1` this is [`glued_body_bubble`]; as the multiplier grows
/// the certified distance grows continuously.
pub fn glued_body_bubble_scaled(n: usize, spec: &GraftSpec, scale_mult: f64) -> Result<GluedFixture> {
    clifford_graft_fixture(n, spec, scale_mult)
}

/// Two grafted bubbles, the second nested inside the first one's plateau
/// core. Exercises the nesting rules of the configuration, the carved
/// difference regions, and the hole terms in the host bubble's tail.
pub fn glued_nested_pair(n: usize) -> Result<GluedFixture> {
    check_grid(n)?;
    let target = TargetManifold::unit_s3();
    let tau = Complex64::new(0.0, 1.0);
    let body = clifford(n)?;
    let grid = GridData::new(tau, n, n);

    let outer = GraftSpec {
        center: (0.5, 0.5),
        ball_radius: 0.6,
        scale: 8.0 / n as f64,
        amplitude: 1.0,
    };
    let sep = 0.21;
    let inner = GraftSpec {
        center: (0.5 + sep, 0.5),
        ball_radius: 0.145,
        scale: 5.5 / n as f64,
        amplitude: 1.0,
    };
    let nest_margin = outer.ball_radius * outer.ball_radius - (sep + inner.ball_radius);
    if nest_margin < 0.0 {
        return Err(Error::ConfigViolation(format!(
            "inner ball leaves the outer plateau by {:.3e}",
            -nest_margin
        )));
    }

    let outer_pole = clifford_value(outer.center.0, outer.center.1);
    let outer_layer = Layer::new(&target, &outer, outer.scale, &outer_pole)?;

    // The inner pole is the glued host's own value at the inner center,
    // evaluated in closed form and projected.
    let host = |a: f64, b: f64| {
        ambient_value(tau, &clifford_value, std::slice::from_ref(&outer_layer), a, b)
    };
    let raw = host(inner.center.0, inner.center.1);
    let mut inner_pole = vec![0.0; raw.len()];
    target.project_into(&raw, &mut inner_pole)?;
    let pole_gap = raw
        .iter()
        .zip(&inner_pole)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let inner_layer = Layer::new(&target, &inner, inner.scale, &inner_pole)?;

    let layers = [outer_layer, inner_layer];
    let nodes = glued_nodes(tau, &target, n, n, &clifford_value, &layers)?;
    let spheres = vec![
        SphereMap::equatorial(&target, Some(&outer_pole))?,
        SphereMap::equatorial(&target, Some(&inner_pole))?,
    ];
    let map = TorusMap::new(Mark::new(0.0, 1.0), target, n, n, nodes)?;
    let collection = BubbleCollection::new(Some(body), spheres, false)?;
    let config = BubbleConfig {
        balls: vec![
            Ball { center: outer.center, radius: outer.ball_radius },
            Ball { center: inner.center, radius: inner.ball_radius },
        ],
        d0: (0.0, 0.0),
        ds: vec![Mobius::shrink(outer.scale)?, Mobius::shrink(inner.scale)?],
    };

    let outer_env = GraftEnvelope {
        r_cfg: outer.ball_radius,
        lam_cert: outer.scale,
        lam_built: outer.scale,
        amp: 1.0,
        bg: BgProfile::Const(CLIFFORD_GSQ.sqrt()),
        pole_gap: 0.0,
        dist_bg: 0.0,
        holes: vec![(sep, inner.ball_radius)],
        profile: cutoff_profile(outer.ball_radius)?,
        pad_disc_cert: pad_disc(grid.h, outer.scale),
        pad_disc_built: pad_disc(grid.h, outer.scale),
        kpad: grid.kpad,
    };
    let sep_lo = (sep - inner.ball_radius - grid.kpad).max(outer.scale);
    let inner_env = GraftEnvelope {
        r_cfg: inner.ball_radius,
        lam_cert: inner.scale,
        lam_built: inner.scale,
        amp: 1.0,
        bg: BgProfile::Radial {
            body: CLIFFORD_GSQ.sqrt() * PAD_BG,
            amp: 1.0,
            lam: outer.scale,
            dist: sep,
            pad: 1.05,
        },
        pole_gap: pole_gap * 1.0001 + 1e-12,
        dist_bg: chord(outer.scale, sep_lo),
        holes: Vec::new(),
        profile: cutoff_profile(inner.ball_radius)?,
        pad_disc_cert: pad_disc(grid.h, inner.scale),
        pad_disc_built: pad_disc(grid.h, inner.scale),
        kpad: grid.kpad,
    };
    let budget = budget_torus(
        &grid,
        CLIFFORD_GSQ * 1.001,
        CLIFFORD_GSQ,
        &[(outer_env, outer.ball_radius), (inner_env, inner.ball_radius)],
    );
    Ok(GluedFixture { map, collection, config, budget })
}

/// The cylinder body on a tall torus, optionally with one grafted bubble.
/// The degenerate-body certificate compares the map against the cylinder
/// sphere with no torus body.
pub fn glued_cylinder(n: usize, h_mod: f64, graft: Option<&GraftSpec>) -> Result<GluedFixture> {
    check_grid(n)?;
    if !(h_mod > 0.05 && h_mod.is_finite()) {
        return Err(Error::DegenerateMark(format!("cylinder modulus {h_mod}")));
    }
    let target = TargetManifold::unit_s3();
    let tau = Complex64::new(0.0, h_mod);
    let grid = GridData::new(tau, n, n);
    let base = move |a: f64, b: f64| equatorial_point(cylinder_chart(tau, a, b));

    let mut spheres = vec![SphereMap::equatorial(&target, None)?];
    let mut ds = vec![Mobius::identity()];
    let mut balls = Vec::new();
    let mut layers = Vec::new();
    let mut envs = Vec::new();
    let mut ball_sups = Vec::new();

    if let Some(spec) = graft {
        spec.validate()?;
        let pole = base(spec.center.0, spec.center.1);
        layers.push(Layer::new(&target, spec, spec.scale, &pole)?);
        spheres.push(SphereMap::equatorial(&target, Some(&pole))?);
        ds.push(Mobius::shrink(spec.scale)?);
        balls.push(Ball { center: spec.center, radius: spec.ball_radius });

        // Cylinder gradient over the ball: `32π²·x/(1+x)²` at `x = |w|²`,
        // with `log|w|` covering an interval of half-width `2π(r+pad)`
        // around the center value.
        let log_c = PI * h_mod * (1.0 - 2.0 * spec.center.1);
        let half = 2.0 * PI * (spec.ball_radius + grid.kpad);
        let (llo, lhi) = (log_c - half, log_c + half);
        let q = if llo <= 0.0 && 0.0 <= lhi {
            0.25
        } else {
            let x_near_one = if llo > 0.0 { (2.0 * llo).exp() } else { (2.0 * lhi).exp() };
            x_near_one / ((1.0 + x_near_one) * (1.0 + x_near_one))
        };
        let gsq = 32.0 * PI * PI * q * 1.05;
        ball_sups.push(gsq);
        envs.push((
            GraftEnvelope {
                r_cfg: spec.ball_radius,
                lam_cert: spec.scale,
                lam_built: spec.scale,
                amp: spec.amplitude,
                bg: BgProfile::Const(gsq.sqrt()),
                pole_gap: 0.0,
                dist_bg: 0.0,
                holes: Vec::new(),
                profile: cutoff_profile(spec.ball_radius)?,
                pad_disc_cert: pad_disc(grid.h, spec.scale),
                pad_disc_built: pad_disc(grid.h, spec.scale),
                kpad: grid.kpad,
            },
            spec.ball_radius,
        ));
    }

    let nodes = glued_nodes(tau, &target, n, n, &base, &layers)?;
    let map = TorusMap::new(Mark::new(0.0, h_mod), target, n, n, nodes)?;
    let collection = BubbleCollection::new(None, spheres, true)?;
    let config = BubbleConfig { balls, d0: (0.0, 0.0), ds };
    let budget = budget_cylinder(&grid, h_mod, &ball_sups, &envs);
    Ok(GluedFixture { map, collection, config, budget })
}

// ---------------------------------------------------------------------------
// Unstable fixtures: glued map + transplant bases + Newton alignment
// ---------------------------------------------------------------------------

/// Knobs for [`unstable_body_bubble`].
#[derive(Debug, Clone)]
pub struct UnstableOptions {
    /// Grid of the coarse body eigenproblem whose sections get prolonged.
    pub coarse_grid: usize,
    /// How many body directions to carry.
    pub body_directions: usize,
    /// Amplitude of the constant normal field on the bubble sphere.
    pub bubble_amplitude: f64,
    /// Newton steps aligning the glued map to the surrogate's critical point.
    pub align_steps: usize,
    /// Stop the alignment once the coefficient gradient drops below this.
    pub residual_tol: f64,
    /// Fraction of the measured concavity kept as the carried band constant;
    /// the complement is the margin left for Hessian drift across the
    /// coefficient ball.
    pub c0_safety: f64,
}

impl Default for UnstableOptions {
    fn default() -> Self {
        UnstableOptions {
            coarse_grid: 32,
            body_directions: 1,
            bubble_amplitude: 0.06,
            align_steps: 10,
            residual_tol: 1e-5,
            c0_safety: 0.9,
        }
    }
}

/// A glued fixture bundled with transplant bases and aligned so the
/// surrogate's interior maximum sits at the origin of coefficient space.
#[derive(Debug)]
pub struct UnstableFixture {
    pub fixture: GluedFixture,
    pub bases: TransplantBases,
    /// Total coefficient shift applied by the alignment.
    pub shift: Vec<f64>,
    /// Coefficient-gradient norm left after the alignment.
    pub residual: f64,
    /// Additional certified-distance allowance consumed by the alignment:
    /// three times the gradient norm of the applied shift field.
    pub shift_allowance: f64,
    /// Eigenvalues of the coefficient Hessian of the surrogate at the
    /// aligned origin; the carried band constant is calibrated from these.
    pub hessian_eigs: Vec<f64>,
}

/// Generalized cross product of three 4-vectors: the direction orthogonal to
/// all of them.
fn cross4(x: &[f64], y: &[f64], z: &[f64]) -> Vec<f64> {
    let det3 = |c0: usize, c1: usize, c2: usize| -> f64 {
        x[c0] * (y[c1] * z[c2] - y[c2] * z[c1]) - x[c1] * (y[c0] * z[c2] - y[c2] * z[c0])
            + x[c2] * (y[c0] * z[c1] - y[c1] * z[c0])
    };
    vec![det3(1, 2, 3), -det3(0, 2, 3), det3(0, 1, 3), -det3(0, 1, 2)]
}

/// Resample coarse-grid sections onto the fixture's grid by periodic spline
/// evaluation and re-project them tangentially. No renormalization: the
/// prolongation preserves the sections' scale, so the coarse concavity
/// constant stays meaningful.
fn prolong_sections(coarse: &UnstableBasis, coarse_grid: usize, fine: &TorusMap) -> Result<Vec<Section>> {
    let (na, nb) = fine.grid();
    let nd = fine.dim();
    let cg = coarse_grid as f64;
    let mut out = Vec::with_capacity(coarse.sections.len());
    for sec in &coarse.sections {
        let spline =
            Spline2D::fit(&sec.values, coarse_grid, coarse_grid, nd, Boundary::Periodic, Boundary::Periodic);
        let mut values = vec![0.0; na * nb * nd];
        values.par_chunks_mut(nb * nd).enumerate().for_each(|(i, row)| {
            let a = i as f64 / na as f64;
            for j in 0..nb {
                let b = j as f64 / nb as f64;
                spline.eval_into(a * cg, b * cg, &mut row[j * nd..(j + 1) * nd]);
            }
        });
        let raw = Section { flavor: SectionFlavor::Ambient, values };
        out.push(raw.tangentialize(fine));
    }
    Ok(out)
}

/// Build a glued body-bubble fixture together with transplant bases that are
/// honestly unstable for both parts: the body directions come from a coarse
/// eigenproblem on the embedded torus, the bubble direction is a constant
/// multiple of the normal completing the bubble's equatorial 3-space. A few
/// Newton steps in coefficient space then re-center the glued map on the
/// surrogate's maximum.
pub fn unstable_body_bubble(
    n: usize,
    spec: &GraftSpec,
    opts: &UnstableOptions,
) -> Result<UnstableFixture> {
    let fixture = glued_body_bubble(n, spec)?;
    let coarse_map = clifford(opts.coarse_grid)?;
    let coarse = unstable_basis(&coarse_map, opts.body_directions, &IndexOptions::default())?;
    let sections = prolong_sections(&coarse, opts.coarse_grid, &fixture.map)?;
    let body_basis = UnstableBasis { sections, c0: coarse.c0 };

    let sphere = &fixture.collection.spheres()[0];
    let one = Complex64::new(1.0, 0.0);
    let zero = Complex64::new(0.0, 0.0);
    let mut v1 = vec![0.0; 4];
    let mut v2 = vec![0.0; 4];
    let mut v3 = vec![0.0; 4];
    sphere.eval_frac(one, one, &mut v1);
    sphere.eval_frac(Complex64::new(0.0, 1.0), one, &mut v2);
    sphere.eval_frac(zero, one, &mut v3);
    let mut normal = cross4(&v1, &v2, &v3);
    let nn = norm(&normal);
    if !(nn > 1e-9) {
        return Err(Error::EigFailure("degenerate bubble frame for the normal field".into()));
    }
    for x in &mut normal {
        *x *= opts.bubble_amplitude / nn;
    }
    let mut bases = TransplantBases {
        body: Some(body_basis),
        spheres: vec![SphereBasis {
            fields: vec![SphereField::constant(&normal)],
            c0: coarse.c0,
        }],
    };

    let k = bases.k();
    let geom = fixture.config.validate(fixture.map.tau(), &fixture.collection)?;
    let fields =
        build_surrogate_fields(&fixture.map, &fixture.collection, &fixture.config, &geom, &bases)?;
    let pack = SurrogatePack {
        fields,
        k,
        c0: bases.c0(),
        m: vec![0.0; k],
        e_at_m: 0.0,
    };

    let mut u = fixture.map.clone();
    let mut shift = vec![0.0; k];
    let origin = vec![0.0; k];
    let fd = 1e-3;
    let mut residual = f64::INFINITY;
    for _ in 0..opts.align_steps {
        let mut energy = |s: &[f64]| pack.energy_at(&u, s);
        let g = fd_gradient(&mut energy, &origin, fd)?;
        residual = norm(&g);
        if residual <= opts.residual_tol {
            break;
        }
        let mut h = fd_hessian(&mut energy, &origin, fd)?;
        let mut step: Vec<f64> = g.iter().map(|x| -x).collect();
        solve_small(&mut h, &mut step)?;
        let sn = norm(&step);
        if sn > 0.5 {
            for x in &mut step {
                *x *= 0.5 / sn;
            }
        }
        u = pack.perturbed(&u, &step)?;
        for (total, s) in shift.iter_mut().zip(&step) {
            *total += s;
        }
    }

    let all = vec![true; n * n];
    let mut shift_allowance = 0.0;
    for (si, f) in shift.iter().zip(&pack.fields) {
        let gsq = 2.0 * masked_quadratic(&u, &f.values, &all);
        shift_allowance += si.abs() * gsq.sqrt();
    }
    shift_allowance *= 3.0;

    // Calibrate the carried band constant against the measured coefficient
    // Hessian at the aligned origin. The silencing ramps absorb most of the
    // raw sections' decrease, so the coarse-basis constant would overstate
    // the concavity of the assembled frame by an order of magnitude.
    let hess = {
        let mut energy = |s: &[f64]| pack.energy_at(&u, s);
        fd_hessian(&mut energy, &origin, fd)?
    };
    let (mu, _) = small_symmetric_eigen(&hess)?;
    let weakest = mu.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let strongest = mu.iter().cloned().fold(f64::INFINITY, f64::min);
    if !(weakest < 0.0) {
        return Err(Error::EigFailure(format!(
            "assembled frame is not a decrease frame (top Hessian eigenvalue {weakest:.3e})"
        )));
    }
    let c0 = (opts.c0_safety * weakest.abs().min(1.0 / strongest.abs())).clamp(1e-12, 1.0 - 1e-12);
    if let Some(b) = bases.body.as_mut() {
        b.c0 = c0;
    }
    for s in bases.spheres.iter_mut() {
        s.c0 = c0;
    }

    Ok(UnstableFixture {
        fixture: GluedFixture {
            map: u,
            collection: fixture.collection,
            config: fixture.config,
            budget: fixture.budget,
        },
        bases,
        shift,
        residual,
        shift_allowance,
        hessian_eigs: mu,
    })
}

// ---------------------------------------------------------------------------
// Sweepouts
// ---------------------------------------------------------------------------

/// A tent sweepout from a constant map up to `mid` and back down: each node
/// travels its great-circle arc from a fixed base point, so every sample
/// stays exactly on the sphere. Both endpoints are constants (zero area) and
/// the peak is `mid` itself. `samples` must be odd and at least 3.
pub fn linear_sweepout(mid: &TorusMap, samples: usize) -> Result<Sweepout> {
    if samples < 3 || samples % 2 == 0 {
        return Err(Error::ConfigViolation(format!(
            "tent sweepout needs an odd sample count ≥ 3, got {samples}"
        )));
    }
    let radius = match mid.target() {
        TargetManifold::RoundSphere { radius, .. } => *radius,
        _ => {
            return Err(Error::ConfigViolation(
                "tent sweepout interpolates along great circles and needs a round-sphere target"
                    .into(),
            ))
        }
    };
    let nd = mid.dim();
    let n_nodes = mid.node_count();

    // Base point: the coordinate axis staying farthest from all node values
    // (and their antipodes), so every great-circle arc is well conditioned.
    let mut best_axis = usize::MAX;
    let mut best_score = f64::INFINITY;
    for axis in 0..nd {
        let mut score = 0.0f64;
        for idx in 0..n_nodes {
            let c = mid.nodes()[idx * nd + axis].abs() / radius;
            score = score.max(c);
        }
        if score < best_score {
            best_score = score;
            best_axis = axis;
        }
    }
    if best_score > 0.99 {
        return Err(Error::NoCandidate(format!(
            "no coordinate axis clears the map's values (closest alignment {best_score:.4})"
        )));
    }
    let mut pole = vec![0.0; nd];
    pole[best_axis] = radius;

    let mark = mid.mark();
    let (na, nb) = mid.grid();
    let mut out: Vec<(f64, TorusMap)> = Vec::with_capacity(samples);
    for s in 0..samples {
        let t = s as f64 / (samples - 1) as f64;
        let c = 1.0 - (2.0 * t - 1.0).abs();
        let map = if c <= 0.0 {
            let p = pole.clone();
            TorusMap::from_fn(mark, mid.target().clone(), na, nb, |_, _| p.clone())?
        } else if c >= 1.0 {
            mid.clone()
        } else {
            let mut nodes = vec![0.0; n_nodes * nd];
            nodes.par_chunks_mut(nd).enumerate().for_each(|(idx, out_node)| {
                let u = &mid.nodes()[idx * nd..(idx + 1) * nd];
                let cosphi = (u[best_axis] / radius).clamp(-1.0, 1.0);
                let phi = cosphi.acos();
                let sinphi = phi.sin();
                let (wa, wb) = if sinphi < 1e-12 {
                    (1.0 - c, c)
                } else {
                    ((((1.0 - c) * phi).sin()) / sinphi, ((c * phi).sin()) / sinphi)
                };
                for d in 0..nd {
                    out_node[d] = wa * pole[d] + wb * u[d];
                }
            });
            TorusMap::new(mark, mid.target().clone(), na, nb, nodes)?
        };
        out.push((t, map));
    }
    Sweepout::new(out)
}

// ---------------------------------------------------------------------------
// Registry
// ---------------------------------------------------------------------------

/// Size knobs shared by the named fixtures.
#[derive(Debug, Clone)]
pub struct FixtureParams {
    pub grid: usize,
    pub samples: usize,
    pub h_mod: f64,
}

impl Default for FixtureParams {
    fn default() -> Self {
        FixtureParams { grid: 128, samples: 17, h_mod: 1.5 }
    }
}

/// What a named fixture produces.
#[derive(Debug)]
pub enum FixtureOutput {
    Map(TorusMap),
    Path(Sweepout),
    Glued(Box<GluedFixture>),
}

/// Default graft proportions for a grid of `n` cells per side: the scale
/// spans six cells and the cutoff radius keeps the core resolvable.
pub fn default_graft(n: usize) -> GraftSpec {
    let lam = 6.0 / n as f64;
    GraftSpec {
        center: (0.5, 0.5),
        ball_radius: (4.2 * lam).sqrt().max(0.22),
        scale: lam,
        amplitude: 1.0,
    }
}

/// Build a fixture by name: `clifford`, `great_circle`, `glued_body_bubble`,
/// or `linear_sweepout`.
pub fn make_fixture(name: &str, params: &FixtureParams) -> Result<FixtureOutput> {
    match name {
        "clifford" => Ok(FixtureOutput::Map(clifford(params.grid)?)),
        "great_circle" => Ok(FixtureOutput::Map(great_circle(params.grid)?)),
        "glued_body_bubble" => {
            let spec = default_graft(params.grid);
            Ok(FixtureOutput::Glued(Box::new(glued_body_bubble(params.grid, &spec)?)))
        }
        "linear_sweepout" => {
            Ok(FixtureOutput::Path(linear_sweepout(&clifford(params.grid)?, params.samples)?))
        }
        other => Err(Error::UnknownFixture(other.into())),
    }
}

// ---------------------------------------------------------------------------
