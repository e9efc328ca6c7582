//! Bubble-tree limit collections and the gluing-distance certificate.
//!
//! A nearly-degenerate torus map decomposes into a *body* map plus finitely
//! many *sphere* maps concentrated on small balls. This module provides:
//!
//! * [`SphereMap`] / [`SphereField`] — sphere-valued maps and ambient vector
//!   fields in two stereographic disk charts;
//! * [`BubbleCollection`] — a body map (or a degenerate cylinder body, which
//!   is itself a sphere map seen through an exponential chart) plus bubbles;
//! * [`BubbleConfig`] — concentration balls, circle shifts and Möbius maps
//!   tying the collection to a concrete map, with the nesting rules;
//! * [`bubble_defect`] — the certified distance: the smallest `ε` such that
//!   all closeness inequalities hold with margin `ε/3` (plus the modulus
//!   term), computed by deterministic quadrature;
//! * [`find_config`] — a heuristic search for a good configuration;
//! * [`transplant`] — carries unstable directions of the limit maps onto the
//!   nearby map through logarithmic cutoffs, producing a [`SurrogatePack`]
//!   whose restricted energy is uniformly concave on a coefficient ball;
//! * [`separation_check`] — measures (energy excess, defect) of a perturbed
//!   map for the separation diagnostics.

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fields::{Section, SectionFlavor, TorusMap};
use crate::interp::{Boundary, Spline2D};
use crate::num::{pairwise_sum, rng_from_seed};
use crate::solver::{masked_quadratic, torus_chart, torus_distance, Ball};
use crate::spectrum::{small_symmetric_eigen, UnstableBasis};
use crate::targets::TargetManifold;
use rand::Rng;

/// Agreement required between the two stereographic charts on their overlap.
pub const OVERLAP_TOL: f64 = 1e-8;
/// Möbius matrices must have determinant 1 within this tolerance.
pub const MOBIUS_DET_TOL: f64 = 1e-8;
/// Beyond this squared Frobenius norm (= condition number for det-1
/// matrices) a Möbius map is rejected as numerically unusable.
pub const MOBIUS_COND_MAX: f64 = 1e6;
/// Radius of the square chart domains; evaluation happens on the unit disk
/// of each chart, so the band `1 < |z| < CHART_RADIUS` is pure margin.
pub const CHART_RADIUS: f64 = 1.2;
/// Default nodes per chart side.
pub const CHART_RES: usize = 321;
/// Default admission threshold on the defect for [`transplant`].
pub const EPS_UNSTABLE: f64 = 20.0;
/// Band and envelope slack used by the transplant verification.
pub const BAND_TOL: f64 = 1e-3;
/// Relative envelope slack (scaled by the energy magnitude).
pub const ENVELOPE_TOL: f64 = 1e-3;

// ---------------------------------------------------------------------------
// Logarithmic cutoff profile
// ---------------------------------------------------------------------------

/// The radial profile `η(ρ)`: `0` on `[0, r²]`, `2 − log ρ / log r` on
/// `[r², r]`, `1` beyond. Its squared-gradient integral over the annulus is
/// `2π/|log r|`, independent of how small the annulus is.
#[derive(Debug, Clone, Copy)]
pub struct CutoffProfile {
    r: f64,
}

/// Build the profile for transition radius `r ∈ (0, 1)`.
pub fn cutoff_profile(r: f64) -> Result<CutoffProfile> {
    if !(r > 0.0 && r < 1.0) || !r.is_finite() {
        return Err(Error::BadRadius(r));
    }
    Ok(CutoffProfile { r })
}

impl CutoffProfile {
    pub fn radius(&self) -> f64 {
        self.r
    }

    /// Value at distance `rho ≥ 0`.
    pub fn eval(&self, rho: f64) -> f64 {
        let r2 = self.r * self.r;
        if rho <= r2 {
            0.0
        } else if rho >= self.r {
            1.0
        } else {
            2.0 - rho.ln() / self.r.ln()
        }
    }

    /// Exact squared-gradient integral `∫ |∇η|² = 2π / |log r|`.
    pub fn grad_sq_exact(&self) -> f64 {
        -2.0 * std::f64::consts::PI / self.r.ln()
    }
}

/// Discrete squared-gradient integral of the profile on a polar grid with
/// `n_r` logarithmically spaced radial cells across the transition annulus
/// (padded by one plateau cell on each side) and `n_theta` angular cells.
/// Finite differences in the radial direction, midpoint quadrature.
pub fn cutoff_grad_sq(profile: &CutoffProfile, n_r: usize, n_theta: usize) -> f64 {
    assert!(n_r >= 2 && n_theta >= 1, "quadrature needs at least 2×1 cells");
    let r = profile.radius();
    // Log-spaced radii spanning [r²·(1-pad), r·(1+pad)] so the plateau cells
    // at both ends enter the sum (with zero contribution).
    let lo = (r * r * 0.9).ln();
    let hi = (r * 1.1).min(1.0).max(r * 1.0001).ln();
    let mut ring = Vec::with_capacity(n_r);
    let mut rho_prev = lo.exp();
    let mut z_prev = profile.eval(rho_prev);
    for i in 1..=n_r {
        let rho = (lo + (hi - lo) * i as f64 / n_r as f64).exp();
        let z = profile.eval(rho);
        let drho = rho - rho_prev;
        let mid = 0.5 * (rho + rho_prev);
        let slope = (z - z_prev) / drho;
        ring.push(slope * slope * mid * drho);
        rho_prev = rho;
        z_prev = z;
    }
    let radial = pairwise_sum(&ring);
    // The profile is radially symmetric; each angular cell contributes the
    // same amount Δθ·radial.
    let dtheta = 2.0 * std::f64::consts::PI / n_theta as f64;
    let cells: Vec<f64> = std::iter::repeat(dtheta * radial).take(n_theta).collect();
    pairwise_sum(&cells)
}

// ---------------------------------------------------------------------------
// Möbius maps
// ---------------------------------------------------------------------------

/// A determinant-one complex 2×2 matrix acting on the extended plane by
/// `z ↦ (a z + b) / (c z + d)`, used projectively so the point at infinity
/// needs no special casing.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mobius {
    pub a: Complex64,
    pub b: Complex64,
    pub c: Complex64,
    pub d: Complex64,
}

/// Serialized form: `[[re, im]; 4]` in `a, b, c, d` order.
#[derive(Serialize, Deserialize)]
struct MobiusRepr([[f64; 2]; 4]);

impl Serialize for Mobius {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        MobiusRepr([
            [self.a.re, self.a.im],
            [self.b.re, self.b.im],
            [self.c.re, self.c.im],
            [self.d.re, self.d.im],
        ])
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for Mobius {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let MobiusRepr(m) = MobiusRepr::deserialize(d)?;
        Ok(Mobius {
            a: Complex64::new(m[0][0], m[0][1]),
            b: Complex64::new(m[1][0], m[1][1]),
            c: Complex64::new(m[2][0], m[2][1]),
            d: Complex64::new(m[3][0], m[3][1]),
        })
    }
}

impl Mobius {
    pub fn identity() -> Self {
        Mobius {
            a: Complex64::new(1.0, 0.0),
            b: Complex64::new(0.0, 0.0),
            c: Complex64::new(0.0, 0.0),
            d: Complex64::new(1.0, 0.0),
        }
    }

    /// The rescaling `z ↦ z / λ` as a determinant-one matrix, `λ > 0`.
    pub fn shrink(lambda: f64) -> Result<Self> {
        if !(lambda > 0.0) || !lambda.is_finite() {
            return Err(Error::ConfigViolation(format!("scale {lambda} must be positive")));
        }
        let s = lambda.sqrt();
        Ok(Mobius {
            a: Complex64::new(1.0 / s, 0.0),
            b: Complex64::new(0.0, 0.0),
            c: Complex64::new(0.0, 0.0),
            d: Complex64::new(s, 0.0),
        })
    }

    /// `z ↦ e^{σ + iφ} z` as a determinant-one matrix (cylinder symmetry).
    pub fn cylinder_twist(sigma: f64, phi: f64) -> Self {
        let h = Complex64::new(sigma / 2.0, phi / 2.0).exp();
        Mobius {
            a: h,
            b: Complex64::new(0.0, 0.0),
            c: Complex64::new(0.0, 0.0),
            d: h.inv(),
        }
    }

    pub fn det(&self) -> Complex64 {
        self.a * self.d - self.b * self.c
    }

    /// Squared Frobenius norm; for determinant-one matrices this equals the
    /// spectral condition number up to a factor ≤ 2.
    pub fn cond(&self) -> f64 {
        self.a.norm_sqr() + self.b.norm_sqr() + self.c.norm_sqr() + self.d.norm_sqr()
    }

    /// Check the determinant and conditioning contracts.
    pub fn validate(&self) -> Result<()> {
        let det = self.det();
        if (det - Complex64::new(1.0, 0.0)).norm() > MOBIUS_DET_TOL {
            return Err(Error::ConfigViolation(format!(
                "Möbius determinant {det} is not 1"
            )));
        }
        let cond = self.cond();
        if !(cond <= MOBIUS_COND_MAX) {
            return Err(Error::ChartOverflow(format!(
                "Möbius condition {cond:.3e} exceeds {MOBIUS_COND_MAX:.1e}"
            )));
        }
        Ok(())
    }

    /// Rescale so the determinant is exactly 1 (principal square root).
    pub fn normalized(&self) -> Result<Self> {
        let det = self.det();
        if det.norm() < 1e-300 {
            return Err(Error::ConfigViolation("Möbius matrix is singular".into()));
        }
        let s = det.sqrt();
        Ok(Mobius { a: self.a / s, b: self.b / s, c: self.c / s, d: self.d / s })
    }

    /// Projective action on `z = num/den`: returns the image numerator and
    /// denominator. Never divides, so the pole and infinity are exact.
    #[inline]
    pub fn map_frac(&self, num: Complex64, den: Complex64) -> (Complex64, Complex64) {
        (self.a * num + self.b * den, self.c * num + self.d * den)
    }

    /// Affine evaluation for finite points; returns `None` at the pole.
    pub fn apply(&self, z: Complex64) -> Option<Complex64> {
        let den = self.c * z + self.d;
        if den.norm() < 1e-150 {
            None
        } else {
            Some((self.a * z + self.b) / den)
        }
    }

    pub fn inverse(&self) -> Self {
        Mobius { a: self.d, b: -self.b, c: -self.c, d: self.a }
    }

    /// Image of the circle `|z − p| = r` (a circle again whenever it avoids
    /// the pole). Returns center and radius of the image.
    pub fn circle_image(&self, p: Complex64, r: f64) -> Result<(Complex64, f64)> {
        if self.c.norm() < 1e-150 {
            // Affine map z ↦ (a z + b)/d.
            let scale = self.a / self.d;
            return Ok(((self.a * p + self.b) / self.d, scale.norm() * r));
        }
        // D(z) = a/c − (1/c²)·1/(z + d/c)   (using det = 1).
        let shift = self.d / self.c;
        let p1 = p + shift;
        let denom = p1.norm_sqr() - r * r;
        if denom.abs() < 1e-14 * (p1.norm_sqr() + r * r) {
            return Err(Error::ChartOverflow(
                "circle passes through the Möbius pole".into(),
            ));
        }
        let center_inv = p1.conj() / denom;
        let r_inv = r / denom.abs();
        let m = -1.0 / (self.c * self.c);
        Ok((self.a / self.c + m * center_inv, m.norm() * r_inv))
    }
}

// ---------------------------------------------------------------------------
// Sphere-valued maps and ambient fields in two stereographic charts
// ---------------------------------------------------------------------------

/// Closed-form equatorial data: `v(z) = rot · ρ·Π_S⁻¹(z)` with the sphere
/// embedded in the first three ambient coordinates.
#[derive(Debug, Clone)]
struct EquatorialData {
    /// Row-major `nd × nd` orthogonal matrix.
    rot: Vec<f64>,
    radius: f64,
}

/// A map `S² → M` stored as values over two square chart grids (the identity
/// chart `z` and the inverted chart `w = 1/z`), with an optional closed form
/// for exact evaluation.
#[derive(Debug, Clone)]
pub struct SphereMap {
    target: TargetManifold,
    res: usize,
    chart_radius: f64,
    north: Vec<f64>,
    south: Vec<f64>,
    north_spline: Spline2D,
    south_spline: Spline2D,
    analytic: Option<EquatorialData>,
}

/// Shared chart sampling: fill an `res×res×nd` block over `[−R, R]²`.
fn sample_chart<F>(res: usize, radius: f64, nd: usize, f: F) -> Vec<f64>
where
    F: Fn(Complex64) -> Vec<f64> + Sync,
{
    let mut block = vec![0.0; res * res * nd];
    let step = 2.0 * radius / (res - 1) as f64;
    block
        .par_chunks_mut(res * nd)
        .enumerate()
        .for_each(|(i, row)| {
            let x = -radius + step * i as f64;
            for j in 0..res {
                let y = -radius + step * j as f64;
                let v = f(Complex64::new(x, y));
                debug_assert_eq!(v.len(), nd);
                row[j * nd..(j + 1) * nd].copy_from_slice(&v);
            }
        });
    block
}

/// Energy of one chart over its unit disk by cell quadrature, restricted to
/// the cells where `keep` holds. Cells straddling the disk boundary or the
/// `keep` region boundary are weighted by a subsampled inside fraction.
fn chart_energy_masked<K: Fn(f64, f64) -> bool>(
    block: &[f64],
    res: usize,
    radius: f64,
    nd: usize,
    keep: K,
) -> f64 {
    let h = 2.0 * radius / (res - 1) as f64;
    let mut cells = Vec::with_capacity((res - 1) * (res - 1));
    for i in 0..res - 1 {
        let x0 = -radius + h * i as f64;
        for j in 0..res - 1 {
            let y0 = -radius + h * j as f64;
            // Quick classification by cell-corner radii.
            let r00 = x0.hypot(y0);
            let r11 = (x0 + h).hypot(y0 + h);
            let r01 = x0.hypot(y0 + h);
            let r10 = (x0 + h).hypot(y0);
            let rmin = r00.min(r11).min(r01).min(r10);
            let rmax = r00.max(r11).max(r01).max(r10);
            if rmin >= 1.0 {
                cells.push(0.0);
                continue;
            }
            let disk_straddle = rmax > 1.0;
            // Probe the keep-region at the center and the four corners.
            let kc = keep(x0 + 0.5 * h, y0 + 0.5 * h);
            let keep_mixed = [
                keep(x0, y0),
                keep(x0 + h, y0),
                keep(x0, y0 + h),
                keep(x0 + h, y0 + h),
            ]
            .iter()
            .any(|&k| k != kc);
            let frac = if !disk_straddle && !keep_mixed {
                if kc {
                    1.0
                } else {
                    cells.push(0.0);
                    continue;
                }
            } else {
                // Boundary cell: 8×8 subsample of the joint inside fraction.
                let mut inside = 0usize;
                for si in 0..8 {
                    let xs = x0 + (si as f64 + 0.5) * h / 8.0;
                    for sj in 0..8 {
                        let ys = y0 + (sj as f64 + 0.5) * h / 8.0;
                        if xs.hypot(ys) <= 1.0 && keep(xs, ys) {
                            inside += 1;
                        }
                    }
                }
                if inside == 0 {
                    cells.push(0.0);
                    continue;
                }
                inside as f64 / 64.0
            };
            let o00 = (i * res + j) * nd;
            let o10 = ((i + 1) * res + j) * nd;
            let o01 = (i * res + j + 1) * nd;
            let o11 = ((i + 1) * res + j + 1) * nd;
            let mut gaa = 0.0;
            let mut gbb = 0.0;
            for k in 0..nd {
                let da0 = block[o10 + k] - block[o00 + k];
                let da1 = block[o11 + k] - block[o01 + k];
                let db0 = block[o01 + k] - block[o00 + k];
                let db1 = block[o11 + k] - block[o10 + k];
                gaa += 0.5 * (da0 * da0 + da1 * da1);
                gbb += 0.5 * (db0 * db0 + db1 * db1);
            }
            // (|∂x v|² + |∂y v|²)·h² with the differences already over h.
            cells.push(0.5 * frac * (gaa + gbb));
        }
    }
    pairwise_sum(&cells)
}

/// Full-disk chart energy.
fn chart_energy(block: &[f64], res: usize, radius: f64, nd: usize) -> f64 {
    chart_energy_masked(block, res, radius, nd, |_, _| true)
}

impl SphereMap {
    /// Compare the two chart splines directly on rings straddling the
    /// dispatch circle `|z| = 1` (both charts are valid there).
    fn validate_overlap(&self) -> Result<()> {
        let nd = self.dim();
        let scale = (self.res - 1) as f64 / (2.0 * self.chart_radius);
        let mut vn = vec![0.0; nd];
        let mut vs = vec![0.0; nd];
        for &ring in &[0.95f64, 1.0, 1.05] {
            for t in 0..96 {
                let ang = 2.0 * std::f64::consts::PI * (t as f64 + 0.37) / 96.0;
                let z = Complex64::from_polar(ring, ang);
                let w = z.inv();
                self.north_spline.eval_into(
                    (z.re + self.chart_radius) * scale,
                    (z.im + self.chart_radius) * scale,
                    &mut vn,
                );
                self.south_spline.eval_into(
                    (w.re + self.chart_radius) * scale,
                    (w.im + self.chart_radius) * scale,
                    &mut vs,
                );
                let mut diff: f64 = 0.0;
                for k in 0..nd {
                    diff = diff.max((vn[k] - vs[k]).abs());
                }
                if diff > OVERLAP_TOL {
                    return Err(Error::ConfigViolation(format!(
                        "chart overlap mismatch {diff:.3e} at |z| = {ring}"
                    )));
                }
            }
        }
        Ok(())
    }
}

impl SphereMap {
    /// Sample a sphere map from its two chart expressions: `north(z)` for the
    /// identity chart and `south(w) = v(1/w)` for the inverted chart. Every
    /// sample is projected onto the target; the charts must agree on their
    /// overlap within [`OVERLAP_TOL`].
    pub fn from_fns<FN, FS>(
        target: TargetManifold,
        res: usize,
        north_fn: FN,
        south_fn: FS,
    ) -> Result<Self>
    where
        FN: Fn(Complex64) -> Vec<f64> + Sync,
        FS: Fn(Complex64) -> Vec<f64> + Sync,
    {
        target.validate()?;
        if res < 16 {
            return Err(Error::ConfigViolation(format!(
                "chart resolution {res} below the minimum 16"
            )));
        }
        let nd = target.ambient_dim();
        let radius = CHART_RADIUS;
        let north = sample_chart(res, radius, nd, |z| {
            let raw = north_fn(z);
            target.project(&raw).unwrap_or(raw)
        });
        let south = sample_chart(res, radius, nd, |z| {
            let raw = south_fn(z);
            target.project(&raw).unwrap_or(raw)
        });
        // Validate the samples landed on the manifold (projection succeeded).
        for (idx, node) in north.chunks(nd).chain(south.chunks(nd)).enumerate() {
            if !target.is_on(node, 1e-7) {
                return Err(Error::NotOnManifold {
                    index: idx,
                    dist: target.surface_distance(node).unwrap_or(f64::INFINITY),
                    tol: 1e-7,
                });
            }
        }
        let north_spline = Spline2D::fit(&north, res, res, nd, Boundary::Natural, Boundary::Natural);
        let south_spline = Spline2D::fit(&south, res, res, nd, Boundary::Natural, Boundary::Natural);
        let map = SphereMap {
            target,
            res,
            chart_radius: radius,
            north,
            south,
            north_spline,
            south_spline,
            analytic: None,
        };
        map.validate_overlap()?;
        Ok(map)
    }

    /// The degree-one equatorial sphere: the inverse stereographic embedding
    /// into the first three ambient coordinates of a round-sphere target,
    /// optionally rotated so the value at `z = ∞` lands on `pole_to`.
    /// Energy is `4πρ²` exactly and the map is harmonic and conformal.
    pub fn equatorial(target: &TargetManifold, pole_to: Option<&[f64]>) -> Result<Self> {
        let radius = match target {
            TargetManifold::RoundSphere { radius, .. } => *radius,
            _ => {
                return Err(Error::ConfigViolation(
                    "equatorial bubbles need a round-sphere target".into(),
                ))
            }
        };
        let nd = target.ambient_dim();
        if nd < 3 {
            return Err(Error::ConfigViolation(
                "equatorial bubbles need ambient dimension at least 3".into(),
            ));
        }
        // Base value at infinity: ρ·(0, 0, −1, 0, ..).
        let rot = match pole_to {
            None => identity_matrix(nd),
            Some(p) => {
                if p.len() != nd {
                    return Err(Error::ConfigViolation(format!(
                        "pole target has {} components, ambient needs {nd}",
                        p.len()
                    )));
                }
                if !target.is_on(p, 1e-8) {
                    return Err(Error::ConfigViolation(
                        "pole target is not on the sphere".into(),
                    ));
                }
                let mut from = vec![0.0; nd];
                from[2] = -1.0;
                let mut to = p.to_vec();
                let n = crate::num::norm(&to);
                for x in to.iter_mut() {
                    *x /= n;
                }
                rotation_between(&from, &to)
            }
        };
        let data = EquatorialData { rot, radius };
        let north_fn = {
            let data = data.clone();
            move |z: Complex64| equatorial_frac(&data, z, Complex64::new(1.0, 0.0))
        };
        let south_fn = {
            let data = data.clone();
            move |w: Complex64| equatorial_frac(&data, Complex64::new(1.0, 0.0), w)
        };
        let res = CHART_RES;
        let north = sample_chart(res, CHART_RADIUS, nd, north_fn);
        let south = sample_chart(res, CHART_RADIUS, nd, south_fn);
        let north_spline = Spline2D::fit(&north, res, res, nd, Boundary::Natural, Boundary::Natural);
        let south_spline = Spline2D::fit(&south, res, res, nd, Boundary::Natural, Boundary::Natural);
        Ok(SphereMap {
            target: target.clone(),
            res,
            chart_radius: CHART_RADIUS,
            north,
            south,
            north_spline,
            south_spline,
            analytic: Some(data),
        })
    }

    pub fn target(&self) -> &TargetManifold {
        &self.target
    }

    pub fn dim(&self) -> usize {
        self.target.ambient_dim()
    }

    pub fn chart_res(&self) -> usize {
        self.res
    }

    /// Evaluate at the projective point `z = num/den` (so `den = 0` is the
    /// point at infinity). Closed-form maps evaluate exactly; sampled maps
    /// interpolate the chart containing the point in its unit disk.
    pub fn eval_frac(&self, num: Complex64, den: Complex64, out: &mut [f64]) {
        if let Some(data) = &self.analytic {
            let v = equatorial_frac(data, num, den);
            out.copy_from_slice(&v);
            return;
        }
        let nd = self.dim();
        let scale = (self.res - 1) as f64 / (2.0 * self.chart_radius);
        if num.norm_sqr() <= den.norm_sqr() {
            let z = num / den;
            let gx = (z.re + self.chart_radius) * scale;
            let gy = (z.im + self.chart_radius) * scale;
            self.north_spline.eval_into(gx, gy, &mut out[..nd]);
        } else {
            let w = den / num;
            let gx = (w.re + self.chart_radius) * scale;
            let gy = (w.im + self.chart_radius) * scale;
            self.south_spline.eval_into(gx, gy, &mut out[..nd]);
        }
    }

    /// Value at a finite chart point.
    pub fn eval(&self, z: Complex64, out: &mut [f64]) {
        self.eval_frac(z, Complex64::new(1.0, 0.0), out)
    }

    /// Value at the point at infinity of the identity chart.
    pub fn value_at_infinity(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        self.eval_frac(Complex64::new(1.0, 0.0), Complex64::new(0.0, 0.0), &mut out);
        out
    }

    /// Dirichlet energy `½ ∫ |∇v|²` over the whole sphere, split across the
    /// two chart unit disks (conformal invariance makes the flat chart
    /// integrand exact).
    pub fn energy(&self) -> f64 {
        let nd = self.dim();
        chart_energy(&self.north, self.res, self.chart_radius, nd)
            + chart_energy(&self.south, self.res, self.chart_radius, nd)
    }

    /// The squared-gradient integral `∫ |∇v|² = 2 E(v)`; exact for the
    /// closed-form equatorial maps.
    pub fn grad_sq_total(&self) -> f64 {
        if let Some(data) = &self.analytic {
            return 8.0 * std::f64::consts::PI * data.radius * data.radius;
        }
        2.0 * self.energy()
    }

    /// `∫ |∇v|²` over the part of the sphere where `covered` (a predicate on
    /// projective chart points) fails, by masked chart quadrature with
    /// subsampling along the region boundary.
    pub fn grad_sq_uncovered<C: Fn(Complex64, Complex64) -> bool>(&self, covered: C) -> f64 {
        let nd = self.dim();
        let one = Complex64::new(1.0, 0.0);
        let north = chart_energy_masked(&self.north, self.res, self.chart_radius, nd, |x, y| {
            !covered(Complex64::new(x, y), one)
        });
        let south = chart_energy_masked(&self.south, self.res, self.chart_radius, nd, |x, y| {
            !covered(one, Complex64::new(x, y))
        });
        2.0 * (north + south)
    }
}

fn identity_matrix(nd: usize) -> Vec<f64> {
    let mut m = vec![0.0; nd * nd];
    for i in 0..nd {
        m[i * nd + i] = 1.0;
    }
    m
}

/// Rotation carrying unit vector `from` to unit vector `to`, acting as the
/// identity on the orthogonal complement of their span.
fn rotation_between(from: &[f64], to: &[f64]) -> Vec<f64> {
    let nd = from.len();
    let c = crate::num::dot(from, to);
    // Orthonormalize `to` against `from`.
    let mut w: Vec<f64> = to.iter().zip(from).map(|(t, f)| t - c * f).collect();
    let wn = crate::num::norm(&w);
    if wn < 1e-12 {
        if c > 0.0 {
            return identity_matrix(nd);
        }
        // Antipodal: rotate by π in the plane spanned by `from` and a fixed
        // unit vector orthogonal to it (deterministic choice).
        let mut e = vec![0.0; nd];
        let pick = (0..nd)
            .min_by(|&i, &j| from[i].abs().partial_cmp(&from[j].abs()).unwrap())
            .unwrap();
        e[pick] = 1.0;
        let d = crate::num::dot(&e, from);
        for (ei, fi) in e.iter_mut().zip(from) {
            *ei -= d * fi;
        }
        let en = crate::num::norm(&e);
        for ei in e.iter_mut() {
            *ei /= en;
        }
        // Rotation by π in span{from, e}: negates both, fixes the rest.
        let mut m = identity_matrix(nd);
        for i in 0..nd {
            for j in 0..nd {
                m[i * nd + j] += -2.0 * from[i] * from[j] - 2.0 * e[i] * e[j];
            }
        }
        return m;
    }
    for wi in w.iter_mut() {
        *wi /= wn;
    }
    let s = wn; // sin of the angle, given |to| = 1
    let mut m = identity_matrix(nd);
    // R = I + (c−1)(f f^T + w w^T) + s (w f^T − f w^T)
    for i in 0..nd {
        for j in 0..nd {
            m[i * nd + j] += (c - 1.0) * (from[i] * from[j] + w[i] * w[j])
                + s * (w[i] * from[j] - from[i] * w[j]);
        }
    }
    m
}

/// Closed-form equatorial evaluation at the projective point `num/den`:
/// all components are rational in `(num, den)`, exact at infinity.
fn equatorial_frac(data: &EquatorialData, num: Complex64, den: Complex64) -> Vec<f64> {
    let nd = (data.rot.len() as f64).sqrt() as usize;
    let nn = num.norm_sqr();
    let dd = den.norm_sqr();
    let cross = num * den.conj();
    let total = nn + dd;
    let base = [
        2.0 * cross.re / total,
        2.0 * cross.im / total,
        (dd - nn) / total,
    ];
    let mut out = vec![0.0; nd];
    for i in 0..nd {
        let mut acc = 0.0;
        for (j, b) in base.iter().enumerate() {
            acc += data.rot[i * nd + j] * b;
        }
        out[i] = data.radius * acc;
    }
    out
}

/// An ambient vector field along a sphere map, in the same two-chart storage
/// (values are not constrained to the target's tangent spaces).
#[derive(Debug, Clone)]
pub struct SphereField {
    dim: usize,
    res: usize,
    chart_radius: f64,
    north_spline: Spline2D,
    south_spline: Spline2D,
}

impl SphereField {
    pub fn from_fns<FN, FS>(dim: usize, res: usize, north_fn: FN, south_fn: FS) -> Result<Self>
    where
        FN: Fn(Complex64) -> Vec<f64> + Sync,
        FS: Fn(Complex64) -> Vec<f64> + Sync,
    {
        if res < 8 {
            return Err(Error::ConfigViolation(format!(
                "field chart resolution {res} below the minimum 8"
            )));
        }
        let north = sample_chart(res, CHART_RADIUS, dim, north_fn);
        let south = sample_chart(res, CHART_RADIUS, dim, south_fn);
        let north_spline = Spline2D::fit(&north, res, res, dim, Boundary::Natural, Boundary::Natural);
        let south_spline = Spline2D::fit(&south, res, res, dim, Boundary::Natural, Boundary::Natural);
        Ok(SphereField { dim, res, chart_radius: CHART_RADIUS, north_spline, south_spline })
    }

    /// A constant ambient field (splines reproduce constants exactly).
    pub fn constant(v: &[f64]) -> Self {
        let dim = v.len();
        let vv = v.to_vec();
        let vv2 = v.to_vec();
        SphereField::from_fns(dim, 8, move |_| vv.clone(), move |_| vv2.clone())
            .expect("constant field construction cannot fail")
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn eval_frac(&self, num: Complex64, den: Complex64, out: &mut [f64]) {
        let scale = (self.res - 1) as f64 / (2.0 * self.chart_radius);
        if num.norm_sqr() <= den.norm_sqr() {
            let z = num / den;
            self.north_spline.eval_into(
                (z.re + self.chart_radius) * scale,
                (z.im + self.chart_radius) * scale,
                out,
            );
        } else {
            let w = den / num;
            self.south_spline.eval_into(
                (w.re + self.chart_radius) * scale,
                (w.im + self.chart_radius) * scale,
                out,
            );
        }
    }
}

// ---------------------------------------------------------------------------
// Collections and configurations
// ---------------------------------------------------------------------------

/// Which chart carries the body map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BodyCase {
    /// Body is a torus map (moduli converged).
    Torus,
    /// Body is degenerate: the first sphere map, read through the
    /// exponential chart of the cylinder `S¹ × [−L, L]`.
    Cylinder,
}

/// A bubble-tree limit: an optional torus body plus finitely many sphere
/// maps into the same target.
#[derive(Debug, Clone)]
pub struct BubbleCollection {
    body: Option<TorusMap>,
    spheres: Vec<SphereMap>,
    body_degenerate: bool,
}

impl BubbleCollection {
    pub fn new(
        body: Option<TorusMap>,
        spheres: Vec<SphereMap>,
        body_degenerate: bool,
    ) -> Result<Self> {
        if body.is_some() == body_degenerate {
            return Err(Error::ConfigViolation(
                "a collection carries a torus body exactly when it is not degenerate".into(),
            ));
        }
        if body_degenerate && spheres.is_empty() {
            return Err(Error::ConfigViolation(
                "a degenerate collection needs at least the cylinder body sphere".into(),
            ));
        }
        let target = match (&body, spheres.first()) {
            (Some(b), _) => b.target().clone(),
            (None, Some(s)) => s.target().clone(),
            (None, None) => {
                return Err(Error::ConfigViolation("empty collection".into()));
            }
        };
        for s in &spheres {
            if *s.target() != target {
                return Err(Error::ConfigViolation(
                    "all maps of a collection must share one target".into(),
                ));
            }
        }
        Ok(BubbleCollection { body, spheres, body_degenerate })
    }

    pub fn case(&self) -> BodyCase {
        if self.body_degenerate {
            BodyCase::Cylinder
        } else {
            BodyCase::Torus
        }
    }

    pub fn body(&self) -> Option<&TorusMap> {
        self.body.as_ref()
    }

    pub fn spheres(&self) -> &[SphereMap] {
        &self.spheres
    }

    pub fn target(&self) -> TargetManifold {
        match (&self.body, self.spheres.first()) {
            (Some(b), _) => b.target().clone(),
            (None, Some(s)) => s.target().clone(),
            _ => unreachable!("validated at construction"),
        }
    }

    /// Number of sphere maps that sit over concentration balls (in the
    /// degenerate case the first sphere is the body and has no ball).
    pub fn ball_count(&self) -> usize {
        match self.case() {
            BodyCase::Torus => self.spheres.len(),
            BodyCase::Cylinder => self.spheres.len() - 1,
        }
    }
}

/// Concentration balls, circle shifts of the body and one Möbius map per
/// sphere, tying a [`BubbleCollection`] to a concrete map.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BubbleConfig {
    /// One ball per bubble sphere, in the order of the collection's bubble
    /// spheres (i.e. skipping the degenerate body sphere in Case 2).
    pub balls: Vec<Ball>,
    /// Circle shifts `(s_a, s_b)` composing the body map with a torus
    /// translation (Case 1 only; ignored in Case 2).
    pub d0: (f64, f64),
    /// One Möbius map per sphere of the collection, acting on the local
    /// conformal coordinate centered at the sphere's ball (bubbles) or on
    /// the exponential cylinder chart (degenerate body sphere).
    pub ds: Vec<Mobius>,
}

/// Derived containment structure of a validated configuration.
#[derive(Debug, Clone)]
pub struct ConfigGeometry {
    /// `contained[j]` lists the ball indices `i` with
    /// `B_{r_i}(x_i) ⊆ B_{r_j²}(x_j)`.
    pub contained: Vec<Vec<usize>>,
}

impl BubbleConfig {
    /// Empty configuration (body-only matching).
    pub fn empty() -> Self {
        BubbleConfig { balls: Vec::new(), d0: (0.0, 0.0), ds: Vec::new() }
    }

    /// Validate counts, ball ranges, Möbius contracts and the nesting rule:
    /// any two intersecting balls must satisfy the square-radius containment
    /// (which makes the derived annular domains pairwise disjoint).
    pub fn validate(&self, tau: Complex64, coll: &BubbleCollection) -> Result<ConfigGeometry> {
        if self.ds.len() != coll.spheres().len() {
            return Err(Error::ConfigViolation(format!(
                "{} Möbius maps for {} spheres",
                self.ds.len(),
                coll.spheres().len()
            )));
        }
        if self.balls.len() != coll.ball_count() {
            return Err(Error::ConfigViolation(format!(
                "{} balls for {} bubble spheres",
                self.balls.len(),
                coll.ball_count()
            )));
        }
        for ball in &self.balls {
            ball.validate()?;
        }
        for m in &self.ds {
            m.validate()?;
        }
        if !(self.d0.0.is_finite() && self.d0.1.is_finite()) {
            return Err(Error::ConfigViolation("circle shifts must be finite".into()));
        }
        let n = self.balls.len();
        let mut contained = vec![Vec::new(); n];
        for j in 0..n {
            let bj = &self.balls[j];
            for i in 0..n {
                if i == j {
                    continue;
                }
                let bi = &self.balls[i];
                let dist = torus_distance(tau, bi.center, bj.center);
                let inside_j2 = dist + bi.radius <= bj.radius * bj.radius + 1e-12;
                if inside_j2 {
                    contained[j].push(i);
                }
            }
        }
        for i in 0..n {
            for j in i + 1..n {
                let bi = &self.balls[i];
                let bj = &self.balls[j];
                let dist = torus_distance(tau, bi.center, bj.center);
                if dist >= bi.radius + bj.radius - 1e-12 {
                    continue; // disjoint
                }
                let i_in_j = contained[j].contains(&i);
                let j_in_i = contained[i].contains(&j);
                if !i_in_j && !j_in_i {
                    return Err(Error::ConfigViolation(format!(
                        "balls {i} and {j} intersect without square-radius containment \
                         (distance {dist:.4}, radii {:.4}, {:.4})",
                        bi.radius, bj.radius
                    )));
                }
            }
        }
        Ok(ConfigGeometry { contained })
    }
}

// ---------------------------------------------------------------------------
// Domain masks and quadrature helpers
// ---------------------------------------------------------------------------

/// Cell-membership masks for the defect quadrature (base-node cells, tested
/// at cell centers).
struct DomainMasks {
    /// Complement of all balls.
    outside: Vec<bool>,
    /// Union of all balls.
    union_balls: Vec<bool>,
    /// Per ball: the inner square-radius ball minus every contained ball.
    omega: Vec<Vec<bool>>,
    /// Union of the annuli between each ball and its square-radius core.
    neck: Vec<bool>,
}

fn build_masks(u: &TorusMap, cfg: &BubbleConfig, geom: &ConfigGeometry) -> DomainMasks {
    let (na, nb) = u.grid();
    let tau = u.tau();
    let n_cells = na * nb;
    let nballs = cfg.balls.len();
    let mut outside = vec![true; n_cells];
    let mut union_balls = vec![false; n_cells];
    let mut omega = vec![vec![false; n_cells]; nballs];
    let mut neck = vec![false; n_cells];
    let mut dists = vec![0.0; nballs];
    for i in 0..na {
        let a = (i as f64 + 0.5) / na as f64;
        for j in 0..nb {
            let b = (j as f64 + 0.5) / nb as f64;
            let idx = i * nb + j;
            for (k, ball) in cfg.balls.iter().enumerate() {
                dists[k] = torus_distance(tau, (a, b), ball.center);
            }
            for (k, ball) in cfg.balls.iter().enumerate() {
                let r = ball.radius;
                let d = dists[k];
                if d < r {
                    outside[idx] = false;
                    union_balls[idx] = true;
                    if d >= r * r {
                        neck[idx] = true;
                    }
                }
                if d < r * r {
                    let mut excluded = false;
                    for &l in &geom.contained[k] {
                        if dists[l] < cfg.balls[l].radius {
                            excluded = true;
                            break;
                        }
                    }
                    if !excluded {
                        omega[k][idx] = true;
                    }
                }
            }
        }
    }
    DomainMasks { outside, union_balls, omega, neck }
}

/// Squared-gradient integral `∫ |∇x|²` of the node block over masked cells.
fn grad_sq_masked(u: &TorusMap, nodes: &[f64], mask: &[bool]) -> f64 {
    2.0 * masked_quadratic(u, nodes, mask)
}

/// Sample the body map composed with the circle shift on `u`'s grid.
fn sample_shifted_body(u: &TorusMap, body: &TorusMap, d0: (f64, f64)) -> Vec<f64> {
    let (na, nb) = u.grid();
    let (ba, bb) = body.grid();
    let nd = u.dim();
    let spline = Spline2D::fit(body.nodes(), ba, bb, nd, Boundary::Periodic, Boundary::Periodic);
    let mut out = vec![0.0; na * nb * nd];
    out.par_chunks_mut(nb * nd).enumerate().for_each(|(i, row)| {
        let a = i as f64 / na as f64 + d0.0;
        for j in 0..nb {
            let b = j as f64 / nb as f64 + d0.1;
            spline.eval_into(a * ba as f64, b * bb as f64, &mut row[j * nd..(j + 1) * nd]);
        }
    });
    out
}

/// Sample `sphere ∘ D ∘ (local chart at center)` on every node of `u`.
fn sample_bubble(u: &TorusMap, sphere: &SphereMap, d: &Mobius, center: (f64, f64)) -> Vec<f64> {
    let (na, nb) = u.grid();
    let nd = u.dim();
    let tau = u.tau();
    let mut out = vec![0.0; na * nb * nd];
    out.par_chunks_mut(nb * nd).enumerate().for_each(|(i, row)| {
        let a = i as f64 / na as f64;
        for j in 0..nb {
            let b = j as f64 / nb as f64;
            let z = torus_chart(tau, (a, b), center);
            let (num, den) = d.map_frac(z, Complex64::new(1.0, 0.0));
            sphere.eval_frac(num, den, &mut row[j * nd..(j + 1) * nd]);
        }
    });
    out
}

/// The exponential cylinder chart: `w(a, b) = exp(2πi(a + τ b) + π Im τ)`,
/// holomorphic in the lattice coordinate, with `|w|` spanning
/// `[e^{−π Im τ}, e^{π Im τ}]` symmetrically.
pub fn cylinder_chart(tau: Complex64, a: f64, b: f64) -> Complex64 {
    let two_pi = 2.0 * std::f64::consts::PI;
    let log_w = Complex64::new(
        std::f64::consts::PI * tau.im - two_pi * tau.im * b,
        two_pi * (a + tau.re * b),
    );
    log_w.exp()
}

/// Sample `sphere ∘ D ∘ (cylinder chart)` on every node of `u`.
fn sample_cylinder_body(u: &TorusMap, sphere: &SphereMap, d: &Mobius) -> Vec<f64> {
    let (na, nb) = u.grid();
    let nd = u.dim();
    let tau = u.tau();
    let mut out = vec![0.0; na * nb * nd];
    out.par_chunks_mut(nb * nd).enumerate().for_each(|(i, row)| {
        let a = i as f64 / na as f64;
        for j in 0..nb {
            let b = j as f64 / nb as f64;
            let w = cylinder_chart(tau, a, b);
            let (num, den) = d.map_frac(w, Complex64::new(1.0, 0.0));
            sphere.eval_frac(num, den, &mut row[j * nd..(j + 1) * nd]);
        }
    });
    out
}

fn diff_block(x: &[f64], y: &[f64]) -> Vec<f64> {
    x.iter().zip(y).map(|(a, b)| a - b).collect()
}

/// Does the projective sphere-chart point pull back (through the inverse
/// Möbius map and the local torus chart at `center`) into a masked cell?
fn bubble_point_covered(
    num: Complex64,
    den: Complex64,
    dinv: &Mobius,
    tau: Complex64,
    center: (f64, f64),
    na: usize,
    nb: usize,
    mask: &[bool],
) -> bool {
    let (zn, zd) = dinv.map_frac(num, den);
    // Effectively infinite preimages lie outside any bounded chart region.
    if zn.norm_sqr() >= 0.25 * zd.norm_sqr() {
        return false;
    }
    let z = zn / zd;
    // The embedded ball is the minimal-representative disk, so |z| < ½ is
    // the injectivity range of the local chart.
    let db = z.im / tau.im;
    let da = z.re - tau.re * db;
    let a = (center.0 + da).rem_euclid(1.0);
    let b = (center.1 + db).rem_euclid(1.0);
    let ci = ((a * na as f64).floor() as usize).min(na - 1);
    let cj = ((b * nb as f64).floor() as usize).min(nb - 1);
    mask[ci * nb + cj]
}

/// Does the projective sphere-chart point pull back (through the inverse
/// Möbius map and the exponential cylinder chart) into a masked cell?
fn cylinder_point_covered(
    num: Complex64,
    den: Complex64,
    dinv: &Mobius,
    tau: Complex64,
    na: usize,
    nb: usize,
    mask: &[bool],
) -> bool {
    let (wn, wd) = dinv.map_frac(num, den);
    if wd.norm_sqr() * 1e30 <= wn.norm_sqr() || wn.norm_sqr() == 0.0 {
        return false; // the poles of the cylinder are never covered
    }
    let w = wn / wd;
    let y = tau.im;
    let two_pi = 2.0 * std::f64::consts::PI;
    let b = (std::f64::consts::PI * y - w.norm().ln()) / (two_pi * y);
    if !(0.0..1.0).contains(&b) {
        return false; // beyond the ends of the unrolled cylinder
    }
    let a = (w.arg() / two_pi - tau.re * b).rem_euclid(1.0);
    let ci = ((a * na as f64).floor() as usize).min(na - 1);
    let cj = ((b * nb as f64).floor() as usize).min(nb - 1);
    mask[ci * nb + cj]
}

// ---------------------------------------------------------------------------
// The defect certificate
// ---------------------------------------------------------------------------

/// Grid samples of the comparison maps; they depend on the configuration's
/// centers, shifts and Möbius maps but not on the ball radii, so a search
/// can reuse them across radius candidates.
struct DefectSamples {
    /// Torus case: the shifted body on `u`'s grid.
    body: Option<Vec<f64>>,
    /// Per bubble sphere, `v_k ∘ D_k ∘ (chart)` on `u`'s grid (in the
    /// degenerate case the first entry is the cylinder body).
    bubbles: Vec<Vec<f64>>,
}

fn collect_samples(u: &TorusMap, coll: &BubbleCollection, cfg: &BubbleConfig) -> DefectSamples {
    match coll.case() {
        BodyCase::Torus => DefectSamples {
            body: Some(sample_shifted_body(u, coll.body().expect("torus body"), cfg.d0)),
            bubbles: coll
                .spheres()
                .iter()
                .enumerate()
                .map(|(k, s)| sample_bubble(u, s, &cfg.ds[k], cfg.balls[k].center))
                .collect(),
        },
        BodyCase::Cylinder => {
            let mut bubbles = Vec::with_capacity(coll.spheres().len());
            bubbles.push(sample_cylinder_body(u, &coll.spheres()[0], &cfg.ds[0]));
            for (k, s) in coll.spheres().iter().enumerate().skip(1) {
                bubbles.push(sample_bubble(u, s, &cfg.ds[k], cfg.balls[k - 1].center));
            }
            DefectSamples { body: None, bubbles }
        }
    }
}

/// Score a validated configuration from precomputed samples.
fn defect_from_samples(
    u: &TorusMap,
    coll: &BubbleCollection,
    cfg: &BubbleConfig,
    geom: &ConfigGeometry,
    samples: &DefectSamples,
) -> f64 {
    let masks = build_masks(u, cfg, geom);
    let (na, nb) = u.grid();
    let tau = u.tau();
    let mut terms: Vec<f64> = Vec::new();

    let (body_term, bubble_range) = match coll.case() {
        BodyCase::Torus => {
            let body = coll.body().expect("torus case carries a body");
            terms.push((u.tau() - body.tau()).norm());
            let w0 = samples.body.as_ref().expect("torus samples carry a body block");
            let diff = diff_block(u.nodes(), w0);
            let g_diff = grad_sq_masked(u, &diff, &masks.outside);
            let g_leak = grad_sq_masked(u, w0, &masks.union_balls);
            (g_diff.sqrt() + g_leak.sqrt(), 0..coll.spheres().len())
        }
        BodyCase::Cylinder => {
            let body_sphere = &coll.spheres()[0];
            let w1 = &samples.bubbles[0];
            let diff = diff_block(u.nodes(), w1);
            let g_diff = grad_sq_masked(u, &diff, &masks.outside);
            let dinv = cfg.ds[0].inverse();
            let tail = body_sphere.grad_sq_uncovered(|num, den| {
                cylinder_point_covered(num, den, &dinv, tau, na, nb, &masks.outside)
            });
            (g_diff.sqrt() + tail.sqrt(), 1..coll.spheres().len())
        }
    };
    terms.push(3.0 * body_term);

    let ds_offset = bubble_range.start;
    let mut bubble_term = 0.0;
    for sj in bubble_range {
        let k = sj - ds_offset;
        let sphere = &coll.spheres()[sj];
        let vk = &samples.bubbles[sj];
        let diff = diff_block(u.nodes(), vk);
        let g_diff = grad_sq_masked(u, &diff, &masks.omega[k]);
        let dinv = cfg.ds[sj].inverse();
        let center = cfg.balls[k].center;
        let tail = sphere.grad_sq_uncovered(|num, den| {
            bubble_point_covered(num, den, &dinv, tau, center, na, nb, &masks.omega[k])
        });
        bubble_term += g_diff.sqrt() + tail.sqrt();
    }
    terms.push(3.0 * bubble_term);

    let g_neck = grad_sq_masked(u, u.nodes(), &masks.neck);
    terms.push(3.0 * g_neck.sqrt());

    terms.iter().fold(0.0f64, |m, &t| m.max(t))
}

/// Certified bubble-tree distance of `u` to the collection under the given
/// configuration: the maximum of the modulus mismatch (torus case) and three
/// times each closeness term (body difference + body leak, bubble
/// differences + bubble tails, neck energy), each term being the square root
/// of a squared-gradient integral over its domain. `defect < ε` certifies
/// the bubble-tree distance `< ε`.
pub fn bubble_defect(u: &TorusMap, coll: &BubbleCollection, cfg: &BubbleConfig) -> Result<f64> {
    let geom = cfg.validate(u.tau(), coll)?;
    if coll.target() != *u.target() {
        return Err(Error::ConfigViolation(
            "map and collection have different targets".into(),
        ));
    }
    let samples = collect_samples(u, coll, cfg);
    Ok(defect_from_samples(u, coll, cfg, &geom, &samples))
}

// ---------------------------------------------------------------------------
// Heuristic configuration search
// ---------------------------------------------------------------------------

/// Energy concentration blob found by the dyadic search.
#[derive(Debug, Clone)]
struct Blob {
    center: (f64, f64),
    /// Concentration scale: radius capturing half the expected energy.
    lambda: f64,
}

/// Summed-area table over the doubled (wrap-padded) cell-energy grid.
struct PrefixTable {
    nb: usize,
    sums: Vec<f64>,
}

impl PrefixTable {
    fn build(cells: &[f64], na: usize, nb: usize) -> Self {
        let wa = 2 * na;
        let wb = 2 * nb;
        let mut sums = vec![0.0; (wa + 1) * (wb + 1)];
        for i in 0..wa {
            for j in 0..wb {
                let v = cells[(i % na) * nb + (j % nb)];
                sums[(i + 1) * (wb + 1) + (j + 1)] = v
                    + sums[i * (wb + 1) + (j + 1)]
                    + sums[(i + 1) * (wb + 1) + j]
                    - sums[i * (wb + 1) + j];
            }
        }
        PrefixTable { nb, sums }
    }

    /// Sum over the wrapped index window `[i0, i0+li) × [j0, j0+lj)` with
    /// `li ≤ na`, `lj ≤ nb`, `i0 ∈ [0, na)`, `j0 ∈ [0, nb)`.
    fn window(&self, i0: usize, j0: usize, li: usize, lj: usize) -> f64 {
        let wb = 2 * self.nb;
        let q = |i: usize, j: usize| self.sums[i * (wb + 1) + j];
        q(i0 + li, j0 + lj) - q(i0, j0 + lj) - q(i0 + li, j0) + q(i0, j0)
    }
}

/// Detect up to `count` energy concentrations, removing each found window.
fn detect_blobs(u: &TorusMap, count: usize, expected: &[f64]) -> Vec<Blob> {
    let (na, nb) = u.grid();
    let mut cells = crate::solver::cell_energy_field(u);
    let mut blobs = Vec::new();
    let tau = u.tau();
    let min_expected = expected.iter().cloned().fold(f64::INFINITY, f64::min);
    for _ in 0..count {
        let table = PrefixTable::build(&cells, na, nb);
        let total = table.window(0, 0, na, nb);
        let mut found: Option<(usize, usize, usize)> = None;
        // Smallest dyadic half-width whose best window concentrates a
        // substantial share of a bubble's energy. The window must also beat
        // the diffuse background by a clear factor, otherwise a spread-out
        // map would pass the absolute threshold at coarse scales.
        'scales: for exp in (2..=6).rev() {
            // half-width = na / 2^exp cells
            let li = (na >> exp).max(2);
            let lj = (nb >> exp).max(2);
            let area_frac = (4 * li * lj) as f64 / (na * nb) as f64;
            let mut best = 0.0;
            let mut best_at = (0usize, 0usize);
            for i0 in 0..na {
                for j0 in 0..nb {
                    let s = table.window(i0, j0, 2 * li, 2 * lj);
                    if s > best {
                        best = s;
                        best_at = (i0, j0);
                    }
                }
            }
            if best >= 0.35 * min_expected && best >= 3.0 * area_frac * total {
                found = Some((best_at.0, best_at.1, exp));
                break 'scales;
            }
        }
        let Some((i0, j0, exp)) = found else {
            break;
        };
        let li = (na >> exp).max(2);
        let lj = (nb >> exp).max(2);
        // Energy centroid inside the window (coordinates relative to the
        // window origin to respect wrapping).
        let mut mass = 0.0;
        let mut ca = 0.0;
        let mut cb = 0.0;
        for di in 0..2 * li {
            for dj in 0..2 * lj {
                let i = (i0 + di) % na;
                let j = (j0 + dj) % nb;
                let e = cells[i * nb + j];
                mass += e;
                ca += e * (di as f64 + 0.5);
                cb += e * (dj as f64 + 0.5);
            }
        }
        if mass <= 0.0 {
            break;
        }
        let center = (
            ((i0 as f64 + ca / mass) / na as f64).rem_euclid(1.0),
            ((j0 as f64 + cb / mass) / nb as f64).rem_euclid(1.0),
        );
        // Radial half-energy scale around the centroid.
        let target_half = 0.5 * min_expected;
        let radius = 2.0 * (li.max(lj)) as f64 / na as f64;
        let mut acc = vec![0.0f64; (radius / (0.25 / na as f64)) as usize + 2];
        let step = 0.25 / na as f64;
        for i in 0..na {
            let a = (i as f64 + 0.5) / na as f64;
            for j in 0..nb {
                let b = (j as f64 + 0.5) / nb as f64;
                let d = torus_distance(tau, (a, b), center);
                if d < radius {
                    let bin = (d / step) as usize;
                    if bin < acc.len() {
                        acc[bin] += cells[i * nb + j];
                    }
                }
            }
        }
        let mut cum = 0.0;
        let mut lambda = radius;
        for (bin, v) in acc.iter().enumerate() {
            cum += v;
            if cum >= target_half {
                lambda = (bin as f64 + 1.0) * step;
                break;
            }
        }
        // Blank the window so the next pass finds the next blob.
        for di in 0..2 * li {
            for dj in 0..2 * lj {
                let i = (i0 + di) % na;
                let j = (j0 + dj) % nb;
                cells[i * nb + j] = 0.0;
            }
        }
        blobs.push(Blob { center, lambda });
    }
    blobs
}

/// Fit the circle shifts by discrete cross-correlation of `u` against the
/// body over a coarse shift grid, refined by a local descent and a final
/// parabolic fit. Cells under `skip` are excluded from the objective.
fn fit_circle_shifts(u: &TorusMap, body: &TorusMap, skip: &[bool]) -> (f64, f64) {
    let (na, nb) = u.grid();
    let (ba, bb) = body.grid();
    let nd = u.dim();
    let spline = Spline2D::fit(body.nodes(), ba, bb, nd, Boundary::Periodic, Boundary::Periodic);
    let stride = (na / 64).max(1);
    let sub = (na / 48).max(1);
    let objective = |sa: f64, sb: f64| -> f64 {
        let mut acc = 0.0;
        let mut val = vec![0.0; nd];
        let mut i = 0;
        while i < na {
            let a = i as f64 / na as f64;
            let mut j = 0;
            while j < nb {
                if !skip[i * nb + j] {
                    let b = j as f64 / nb as f64;
                    spline.eval_into((a + sa) * ba as f64, (b + sb) * bb as f64, &mut val);
                    let node = u.node(i, j);
                    for k in 0..nd {
                        let d = node[k] - val[k];
                        acc += d * d;
                    }
                }
                j += sub;
            }
            i += sub;
        }
        acc
    };
    let mut best = (0usize, 0usize);
    let mut best_val = f64::INFINITY;
    let mut p = 0;
    while p < na {
        let mut q = 0;
        while q < nb {
            let v = objective(p as f64 / na as f64, q as f64 / nb as f64);
            if v < best_val {
                best_val = v;
                best = (p, q);
            }
            q += stride;
        }
        p += stride;
    }
    // Single-node hill climb from the coarse best.
    let mut bi = best.0 as i64;
    let mut bj = best.1 as i64;
    for _ in 0..(2 * stride).max(4) {
        let mut improved = false;
        for (di, dj) in [(-1i64, 0i64), (1, 0), (0, -1), (0, 1)] {
            let ci = (bi + di).rem_euclid(na as i64);
            let cj = (bj + dj).rem_euclid(nb as i64);
            let v = objective(ci as f64 / na as f64, cj as f64 / nb as f64);
            if v + 1e-15 < best_val {
                best_val = v;
                bi = ci;
                bj = cj;
                improved = true;
            }
        }
        if !improved {
            break;
        }
    }
    // Parabolic sub-grid refinement per axis.
    let refine = |center: i64, axis: usize| -> f64 {
        let h = 1.0 / (if axis == 0 { na } else { nb }) as f64;
        let at = |t: i64| -> f64 {
            let (sa, sb) = if axis == 0 {
                (t as f64 * h, bj as f64 / nb as f64)
            } else {
                (bi as f64 / na as f64, t as f64 * h)
            };
            objective(sa, sb)
        };
        let fm = at(center - 1);
        let f0 = at(center);
        let fp = at(center + 1);
        let denom = fm - 2.0 * f0 + fp;
        let delta = if denom.abs() < 1e-300 { 0.0 } else { 0.5 * (fm - fp) / denom };
        (center as f64 + delta.clamp(-0.5, 0.5)) * h
    };
    let sa = refine(bi, 0).rem_euclid(1.0);
    let sb = refine(bj, 1).rem_euclid(1.0);
    (sa, sb)
}

/// Fit the cylinder-body Möbius by a coarse scan over twist and log-scale.
fn fit_cylinder_twist(u: &TorusMap, sphere: &SphereMap) -> Mobius {
    let (na, nb) = u.grid();
    let nd = u.dim();
    let tau = u.tau();
    let sub = (na / 48).max(1);
    let objective = |m: &Mobius| -> f64 {
        let mut acc = 0.0;
        let mut val = vec![0.0; nd];
        let mut i = 0;
        while i < na {
            let a = i as f64 / na as f64;
            let mut j = 0;
            while j < nb {
                let b = j as f64 / nb as f64;
                let w = cylinder_chart(tau, a, b);
                let (num, den) = m.map_frac(w, Complex64::new(1.0, 0.0));
                sphere.eval_frac(num, den, &mut val);
                let node = u.node(i, j);
                for k in 0..nd {
                    let d = node[k] - val[k];
                    acc += d * d;
                }
                j += sub;
            }
            i += sub;
        }
        acc
    };
    let mut best = Mobius::identity();
    let mut best_val = f64::INFINITY;
    for ti in -3i32..=3 {
        let sigma = 0.2 * ti as f64;
        for pi in 0..64 {
            let phi = 2.0 * std::f64::consts::PI * pi as f64 / 64.0;
            let m = Mobius::cylinder_twist(sigma, phi);
            let v = objective(&m);
            if v < best_val {
                best_val = v;
                best = m;
            }
        }
    }
    best
}

/// Per-bubble radius candidates for one blob assignment, including
/// nesting-aware pairs derived from the blob geometry.
fn radius_combos(
    tau: Complex64,
    centers: &[(f64, f64)],
    lambdas: &[f64],
) -> Vec<Vec<f64>> {
    let n = centers.len();
    let base = |lambda: f64| -> Vec<f64> {
        let mut out = Vec::new();
        for c in [2.0, 6.0, 12.0, 24.0] {
            let r = (c * lambda).sqrt();
            if r < 0.49 && r * r > 1.5 * lambda {
                out.push(r);
            }
        }
        if out.is_empty() {
            out.push((4.0 * lambda).sqrt().min(0.45));
        }
        out
    };
    let per_ball: Vec<Vec<f64>> = lambdas.iter().map(|&l| base(l)).collect();
    let mut combos: Vec<Vec<f64>> = Vec::new();
    let mut picks = vec![0usize; n];
    loop {
        combos.push((0..n).map(|k| per_ball[k][picks[k]]).collect());
        let mut carry = true;
        for k in 0..n {
            if carry {
                picks[k] += 1;
                if picks[k] == per_ball[k].len() {
                    picks[k] = 0;
                } else {
                    carry = false;
                }
            }
        }
        if n == 0 || carry {
            break;
        }
    }
    // Nesting-aware pairs: for close blobs, one ball's square-radius core
    // must contain the other ball entirely.
    if n == 2 {
        let d = torus_distance(tau, centers[0], centers[1]);
        for (outer, inner) in [(0usize, 1usize), (1, 0)] {
            for &ri in &per_ball[inner] {
                let need = d + ri;
                if need >= 0.49 {
                    continue;
                }
                for grow in [1.05f64, 1.3] {
                    let ro = (grow * need).sqrt().min(0.7);
                    if ro * ro >= need && ro > ri {
                        let mut combo = vec![0.0; 2];
                        combo[outer] = ro;
                        combo[inner] = ri;
                        combos.push(combo);
                    }
                }
            }
        }
    }
    combos
}

/// Heuristic configuration search: locate energy concentrations at dyadic
/// scales, fit per-bubble Möbius maps from the concentration scale, fit the
/// body circle shifts by cross-correlation, and return the candidate
/// configuration minimizing [`bubble_defect`]. No optimality guarantee.
pub fn find_config(u: &TorusMap, coll: &BubbleCollection) -> Result<BubbleConfig> {
    if coll.target() != *u.target() {
        return Err(Error::ConfigViolation(
            "map and collection have different targets".into(),
        ));
    }
    let n_bubbles = coll.ball_count();
    let (na, nb) = u.grid();
    let tau = u.tau();

    // Expected bubble energies (E = ½ ∫|∇v|²).
    let bubble_spheres: Vec<&SphereMap> = match coll.case() {
        BodyCase::Torus => coll.spheres().iter().collect(),
        BodyCase::Cylinder => coll.spheres().iter().skip(1).collect(),
    };
    let expected: Vec<f64> = bubble_spheres.iter().map(|s| 0.5 * s.grad_sq_total()).collect();

    let blobs = if n_bubbles > 0 {
        let blobs = detect_blobs(u, n_bubbles, &expected);
        if blobs.len() < n_bubbles {
            return Err(Error::NoCandidate(format!(
                "found {} energy concentrations, collection needs {}",
                blobs.len(),
                n_bubbles
            )));
        }
        blobs
    } else {
        Vec::new()
    };

    // Skip mask for the shift fit: blank a window around every blob large
    // enough to cover any candidate ball.
    let mut skip = vec![false; na * nb];
    for blob in &blobs {
        let cover = (24.0 * blob.lambda).sqrt().min(0.49);
        for i in 0..na {
            let a = (i as f64 + 0.5) / na as f64;
            for j in 0..nb {
                let b = (j as f64 + 0.5) / nb as f64;
                if torus_distance(tau, (a, b), blob.center) < cover {
                    skip[i * nb + j] = true;
                }
            }
        }
    }

    let d0 = match coll.case() {
        BodyCase::Torus => fit_circle_shifts(u, coll.body().unwrap(), &skip),
        BodyCase::Cylinder => (0.0, 0.0),
    };
    let body_mobius = match coll.case() {
        BodyCase::Torus => None,
        BodyCase::Cylinder => Some(fit_cylinder_twist(u, &coll.spheres()[0])),
    };

    // Blob-to-sphere assignments: all permutations for up to 3 bubbles.
    let perms: Vec<Vec<usize>> = match n_bubbles {
        0 => vec![vec![]],
        1 => vec![vec![0]],
        2 => vec![vec![0, 1], vec![1, 0]],
        3 => vec![
            vec![0, 1, 2],
            vec![0, 2, 1],
            vec![1, 0, 2],
            vec![1, 2, 0],
            vec![2, 0, 1],
            vec![2, 1, 0],
        ],
        _ => vec![(0..n_bubbles).collect()],
    };

    let mut best: Option<(f64, BubbleConfig)> = None;
    for perm in &perms {
        let centers: Vec<(f64, f64)> = perm.iter().map(|&bi| blobs[bi].center).collect();
        let lambdas: Vec<f64> = perm.iter().map(|&bi| blobs[bi].lambda).collect();
        let mut ds = Vec::with_capacity(coll.spheres().len());
        if let Some(m) = &body_mobius {
            ds.push(*m);
        }
        let mut scales_ok = true;
        for &l in &lambdas {
            match Mobius::shrink(l) {
                Ok(m) => ds.push(m),
                Err(_) => scales_ok = false,
            }
        }
        if !scales_ok {
            continue;
        }
        // Samples depend only on centers, shifts and Möbius maps, so compute
        // them once per assignment with placeholder radii.
        let probe = BubbleConfig {
            balls: centers
                .iter()
                .map(|&c| Ball { center: c, radius: 0.25 })
                .collect(),
            d0,
            ds: ds.clone(),
        };
        let samples = collect_samples(u, coll, &probe);
        for combo in radius_combos(tau, &centers, &lambdas) {
            let cfg = BubbleConfig {
                balls: centers
                    .iter()
                    .zip(&combo)
                    .map(|(&c, &r)| Ball { center: c, radius: r })
                    .collect(),
                d0,
                ds: ds.clone(),
            };
            let Ok(geom) = cfg.validate(tau, coll) else {
                continue;
            };
            let score = defect_from_samples(u, coll, &cfg, &geom, &samples);
            // Ties break by candidate order, which is deterministic.
            if best.as_ref().map_or(true, |(bs, _)| score < *bs) {
                best = Some((score, cfg));
            }
        }
    }
    match best {
        Some((_, cfg)) => Ok(cfg),
        None => Err(Error::NoCandidate(
            "no candidate configuration satisfied the nesting rules".into(),
        )),
    }
}

// ---------------------------------------------------------------------------
// Transplanted unstable directions
// ---------------------------------------------------------------------------

/// Unstable directions of each limit map, to be transplanted onto the
/// nearby map: an optional body basis (tangential sections on the body's
/// grid) and one optional basis of ambient fields per sphere.
#[derive(Debug, Clone, Default)]
pub struct TransplantBases {
    pub body: Option<UnstableBasis>,
    /// One entry per sphere of the collection (may be empty bases).
    pub spheres: Vec<SphereBasis>,
}

/// Unstable fields of one sphere map over its plane chart, scaled so the
/// restricted energy Hessian sits in the `(−1/(2c₀), −2c₀)` band.
#[derive(Debug, Clone)]
pub struct SphereBasis {
    pub fields: Vec<SphereField>,
    pub c0: f64,
}

impl TransplantBases {
    pub fn body_only(basis: UnstableBasis, n_spheres: usize) -> Self {
        TransplantBases {
            body: Some(basis),
            spheres: (0..n_spheres).map(|_| SphereBasis { fields: Vec::new(), c0: 1.0 }).collect(),
        }
    }

    pub fn k(&self) -> usize {
        self.body.as_ref().map_or(0, |b| b.sections.len())
            + self.spheres.iter().map(|s| s.fields.len()).sum::<usize>()
    }

    /// Combined concavity constant: the smallest over contributing parts.
    pub fn c0(&self) -> f64 {
        let mut c = 1.0f64;
        if let Some(b) = &self.body {
            if !b.sections.is_empty() {
                c = c.min(b.c0);
            }
        }
        for s in &self.spheres {
            if !s.fields.is_empty() {
                c = c.min(s.c0);
            }
        }
        c
    }
}

/// Options for [`transplant`].
#[derive(Debug, Clone)]
pub struct TransplantOptions {
    /// Admission threshold on the defect.
    pub eps_unstable: f64,
    /// Number of random coefficient samples for the envelope check.
    pub n_samples: usize,
    /// How many of those samples also get a finite-difference Hessian.
    pub hessian_samples: usize,
    /// Finite-difference step in coefficient space.
    pub fd_step: f64,
    /// Band slack and envelope slack (relative to the energy scale).
    pub band_tol: f64,
    pub envelope_tol: f64,
    pub seed: u64,
}

impl Default for TransplantOptions {
    fn default() -> Self {
        TransplantOptions {
            eps_unstable: EPS_UNSTABLE,
            n_samples: 200,
            hessian_samples: 16,
            fd_step: 1e-3,
            band_tol: BAND_TOL,
            envelope_tol: ENVELOPE_TOL,
            seed: 0xb0bb1e,
        }
    }
}

/// The transplanted concave energy surrogate: ambient fields on the map's
/// grid spanning a `k`-dimensional coefficient ball on which the energy is
/// uniformly concave, with its maximizer and maximal value.
#[derive(Debug, Clone)]
pub struct SurrogatePack {
    pub fields: Vec<Section>,
    pub k: usize,
    pub c0: f64,
    pub m: Vec<f64>,
    pub e_at_m: f64,
}

impl SurrogatePack {
    /// The projected perturbed map `Π(u + Σ s_i X̃_i)`.
    pub fn perturbed(&self, u: &TorusMap, s: &[f64]) -> Result<TorusMap> {
        assert_eq!(s.len(), self.k, "coefficient dimension mismatch");
        let nd = u.dim();
        let mut nodes = u.nodes().to_vec();
        for (si, f) in s.iter().zip(&self.fields) {
            crate::num::axpy(*si, &f.values, &mut nodes);
        }
        let target = u.target();
        let mut out = vec![0.0; nodes.len()];
        for (idx, chunk) in nodes.chunks(nd).enumerate() {
            target
                .project_into(chunk, &mut out[idx * nd..(idx + 1) * nd])
                .map_err(|_| Error::LeftTube {
                    index: idx,
                    dist: target.surface_distance(chunk).unwrap_or(f64::INFINITY),
                })?;
        }
        u.with_nodes(out)
    }

    /// The restricted energy `E_u(s)`.
    pub fn energy_at(&self, u: &TorusMap, s: &[f64]) -> Result<f64> {
        Ok(self.perturbed(u, s)?.energy())
    }
}

/// Deterministic sample of `n` points in the closed unit ball of `R^k`
/// (plus the origin as the first sample).
pub fn sample_ball(k: usize, n: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = rng_from_seed(seed);
    let mut out = vec![vec![0.0; k]];
    while out.len() <= n {
        let s: Vec<f64> = (0..k).map(|_| rng.gen_range(-1.0..1.0)).collect();
        if crate::num::dot(&s, &s) <= 1.0 {
            out.push(s);
        }
    }
    out
}

/// Solve a small dense linear system in place (partial pivoting).
pub(crate) fn solve_small(a: &mut [Vec<f64>], b: &mut [f64]) -> Result<()> {
    let n = b.len();
    for col in 0..n {
        let mut piv = col;
        for r in col + 1..n {
            if a[r][col].abs() > a[piv][col].abs() {
                piv = r;
            }
        }
        if a[piv][col].abs() < 1e-300 {
            return Err(Error::EigFailure("singular Hessian in Newton step".into()));
        }
        a.swap(col, piv);
        b.swap(col, piv);
        for r in col + 1..n {
            let f = a[r][col] / a[col][col];
            for c in col..n {
                a[r][c] -= f * a[col][c];
            }
            b[r] -= f * b[col];
        }
    }
    for col in (0..n).rev() {
        let mut acc = b[col];
        for c in col + 1..n {
            acc -= a[col][c] * b[c];
        }
        b[col] = acc / a[col][col];
    }
    Ok(())
}

/// Finite-difference Hessian of `f` at `s`.
pub(crate) fn fd_hessian<F: FnMut(&[f64]) -> Result<f64>>(
    f: &mut F,
    s: &[f64],
    h: f64,
) -> Result<Vec<Vec<f64>>> {
    let k = s.len();
    let mut hess = vec![vec![0.0; k]; k];
    let f0 = f(s)?;
    let mut sp = s.to_vec();
    for i in 0..k {
        sp.copy_from_slice(s);
        sp[i] = s[i] + h;
        let fp = f(&sp)?;
        sp[i] = s[i] - h;
        let fm = f(&sp)?;
        hess[i][i] = (fp - 2.0 * f0 + fm) / (h * h);
    }
    for i in 0..k {
        for j in i + 1..k {
            sp.copy_from_slice(s);
            sp[i] += h;
            sp[j] += h;
            let fpp = f(&sp)?;
            sp[j] -= 2.0 * h;
            let fpm = f(&sp)?;
            sp[i] -= 2.0 * h;
            let fmm = f(&sp)?;
            sp[j] += 2.0 * h;
            let fmp = f(&sp)?;
            let v = (fpp - fpm - fmp + fmm) / (4.0 * h * h);
            hess[i][j] = v;
            hess[j][i] = v;
        }
    }
    Ok(hess)
}

/// Finite-difference gradient of `f` at `s`.
pub(crate) fn fd_gradient<F: FnMut(&[f64]) -> Result<f64>>(
    f: &mut F,
    s: &[f64],
    h: f64,
) -> Result<Vec<f64>> {
    let k = s.len();
    let mut g = vec![0.0; k];
    let mut sp = s.to_vec();
    for i in 0..k {
        sp.copy_from_slice(s);
        sp[i] = s[i] + h;
        let fp = f(&sp)?;
        sp[i] = s[i] - h;
        let fm = f(&sp)?;
        g[i] = (fp - fm) / (2.0 * h);
    }
    Ok(g)
}

/// Build the transplanted fields, verify uniform concavity on the sampled
/// coefficient ball and locate the unique maximizer.
///
/// The body fields are the body basis sections carried through the circle
/// shift and silenced inside every concentration ball by the logarithmic
/// cutoff; each sphere basis is carried through its Möbius chart, confined
/// to its ball and silenced inside contained balls. In the degenerate case
/// the first sphere's fields ride the cylinder chart and are silenced inside
/// all balls.
pub fn transplant(
    u: &TorusMap,
    coll: &BubbleCollection,
    cfg: &BubbleConfig,
    bases: &TransplantBases,
    opts: &TransplantOptions,
) -> Result<SurrogatePack> {
    let geom = cfg.validate(u.tau(), coll)?;
    if bases.spheres.len() != coll.spheres().len() {
        return Err(Error::ConfigViolation(format!(
            "{} sphere bases for {} spheres",
            bases.spheres.len(),
            coll.spheres().len()
        )));
    }
    if coll.case() == BodyCase::Cylinder {
        if bases.body.as_ref().map_or(false, |b| !b.sections.is_empty()) {
            return Err(Error::ConfigViolation(
                "a degenerate collection has no torus body basis".into(),
            ));
        }
    } else if bases.body.as_ref().map_or(false, |b| !b.sections.is_empty())
        && coll.body().is_none()
    {
        return Err(Error::ConfigViolation("body basis without a body map".into()));
    }

    let defect = bubble_defect(u, coll, cfg)?;
    if defect >= opts.eps_unstable {
        return Err(Error::DefectTooLarge { defect, threshold: opts.eps_unstable });
    }

    let k = bases.k();
    if k == 0 {
        return Ok(SurrogatePack {
            fields: Vec::new(),
            k: 0,
            c0: 1.0,
            m: Vec::new(),
            e_at_m: u.energy(),
        });
    }
    let c0 = bases.c0();
    if !(c0 > 0.0 && c0 < 1.0) {
        return Err(Error::ConfigViolation(format!(
            "concavity constant c0 = {c0} must lie in (0, 1)"
        )));
    }

    let fields = build_surrogate_fields(u, coll, cfg, &geom, bases)?;
    debug_assert_eq!(fields.len(), k);

    let mut pack = SurrogatePack { fields, k, c0, m: vec![0.0; k], e_at_m: 0.0 };

    let mut energy_at = |s: &[f64]| -> Result<f64> { pack_energy(&pack, u, s) };

    // Band verification on a deterministic sample of the coefficient ball.
    let samples = sample_ball(k, opts.n_samples, opts.seed);
    let lo = -1.0 / c0 - opts.band_tol;
    let hi = -c0 + opts.band_tol;
    for s in samples.iter().take(opts.hessian_samples.max(1)) {
        let hess = fd_hessian(&mut energy_at, s, opts.fd_step)?;
        let (evals, _) = small_symmetric_eigen(&hess)?;
        for &ev in &evals {
            if ev < lo || ev > hi {
                return Err(Error::ConcavityFailure { at: s.clone(), eig: ev, lo, hi });
            }
        }
    }

    // Concave maximization (Newton with FD derivatives) from the origin.
    let mut m = vec![0.0; k];
    for _ in 0..12 {
        let g = fd_gradient(&mut energy_at, &m, opts.fd_step)?;
        let gnorm = crate::num::norm(&g);
        if gnorm <= 1e-8 {
            break;
        }
        let mut hess = fd_hessian(&mut energy_at, &m, opts.fd_step)?;
        let mut step: Vec<f64> = g.iter().map(|x| -x).collect();
        solve_small(&mut hess, &mut step)?;
        for (mi, si) in m.iter_mut().zip(&step) {
            *mi += si;
        }
        let norm_m = crate::num::norm(&m);
        if norm_m > 1.0 - 1e-9 {
            for mi in m.iter_mut() {
                *mi *= (1.0 - 1e-9) / norm_m;
            }
        }
    }
    let e_at_m = energy_at(&m)?;
    let m_norm = crate::num::norm(&m);
    let m_cap = c0 / 10.0f64.sqrt();
    if m_norm >= m_cap {
        return Err(Error::NonConvergence(format!(
            "surrogate maximum at |m| = {m_norm:.3e} outside the admissible ball {m_cap:.3e}"
        )));
    }

    // Envelope verification at every sample.
    let tol = opts.envelope_tol * e_at_m.abs().max(1.0);
    for s in &samples {
        let e = energy_at(s)?;
        let d2: f64 = s
            .iter()
            .zip(&m)
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        let upper = e_at_m - 0.5 * c0 * d2 + tol;
        let lower = e_at_m - 0.5 / c0 * d2 - tol;
        if e > upper || e < lower {
            return Err(Error::ConcavityFailure {
                at: s.clone(),
                eig: e,
                lo: lower,
                hi: upper,
            });
        }
    }

    pack.m = m;
    pack.e_at_m = e_at_m;
    Ok(pack)
}

/// Build the cutoff-transplanted ambient fields of the surrogate: resampled
/// body sections under the circle shifts times rising ramps over every ball,
/// and sphere fields composed with the Möbius charts times the descending
/// ramp of their own ball and rising ramps of contained balls.
pub(crate) fn build_surrogate_fields(
    u: &TorusMap,
    coll: &BubbleCollection,
    cfg: &BubbleConfig,
    geom: &ConfigGeometry,
    bases: &TransplantBases,
) -> Result<Vec<Section>> {
    let (na, nb) = u.grid();
    let nd = u.dim();
    let tau = u.tau();
    let n_nodes = na * nb;

    // Node-level cutoff data shared by all fields.
    let profiles: Vec<CutoffProfile> =
        cfg.balls.iter().map(|b| cutoff_profile(b.radius)).collect::<Result<_>>()?;
    let mut node_dist = vec![0.0f64; n_nodes * cfg.balls.len().max(1)];
    if !cfg.balls.is_empty() {
        for i in 0..na {
            let a = i as f64 / na as f64;
            for j in 0..nb {
                let b = j as f64 / nb as f64;
                for (kk, ball) in cfg.balls.iter().enumerate() {
                    node_dist[(i * nb + j) * cfg.balls.len() + kk] =
                        torus_distance(tau, (a, b), ball.center);
                }
            }
        }
    }
    let nballs = cfg.balls.len();
    let rising = |node: usize, ball: usize| -> f64 {
        profiles[ball].eval(node_dist[node * nballs + ball])
    };

    let mut fields: Vec<Section> = Vec::with_capacity(bases.k());

    // Body fields: shifted section values times the product of rising
    // cutoffs over every ball.
    if let Some(body_basis) = &bases.body {
        if !body_basis.sections.is_empty() {
            let body = coll.body().expect("validated above");
            let (ba, bb) = body.grid();
            for section in &body_basis.sections {
                let spline = Spline2D::fit(
                    &section.values,
                    ba,
                    bb,
                    nd,
                    Boundary::Periodic,
                    Boundary::Periodic,
                );
                let mut values = vec![0.0; n_nodes * nd];
                values.par_chunks_mut(nb * nd).enumerate().for_each(|(i, row)| {
                    let a = i as f64 / na as f64 + cfg.d0.0;
                    for j in 0..nb {
                        let b = j as f64 / nb as f64 + cfg.d0.1;
                        spline.eval_into(
                            a * ba as f64,
                            b * bb as f64,
                            &mut row[j * nd..(j + 1) * nd],
                        );
                    }
                });
                for node in 0..n_nodes {
                    let mut zeta = 1.0;
                    for ball in 0..nballs {
                        zeta *= rising(node, ball);
                    }
                    for x in values[node * nd..(node + 1) * nd].iter_mut() {
                        *x *= zeta;
                    }
                }
                fields.push(Section { flavor: SectionFlavor::Ambient, values });
            }
        }
    }

    // Sphere fields.
    let ds_offset = match coll.case() {
        BodyCase::Torus => 0,
        BodyCase::Cylinder => 1,
    };
    for (sj, sphere_basis) in bases.spheres.iter().enumerate() {
        if sphere_basis.fields.is_empty() {
            continue;
        }
        let is_cyl_body = coll.case() == BodyCase::Cylinder && sj == 0;
        let ball_idx = if is_cyl_body { usize::MAX } else { sj - ds_offset };
        let mobius = &cfg.ds[sj];
        for field in &sphere_basis.fields {
            if field.dim() != nd {
                return Err(Error::ConfigViolation(
                    "sphere field dimension differs from the ambient dimension".into(),
                ));
            }
            let mut values = vec![0.0; n_nodes * nd];
            values.par_chunks_mut(nb * nd).enumerate().for_each(|(i, row)| {
                let a = i as f64 / na as f64;
                for j in 0..nb {
                    let b = j as f64 / nb as f64;
                    let out = &mut row[j * nd..(j + 1) * nd];
                    if is_cyl_body {
                        let w = cylinder_chart(tau, a, b);
                        let (num, den) = mobius.map_frac(w, Complex64::new(1.0, 0.0));
                        field.eval_frac(num, den, out);
                    } else {
                        let z = torus_chart(tau, (a, b), cfg.balls[ball_idx].center);
                        let (num, den) = mobius.map_frac(z, Complex64::new(1.0, 0.0));
                        field.eval_frac(num, den, out);
                    }
                }
            });
            for node in 0..n_nodes {
                let mut zeta = 1.0;
                if is_cyl_body {
                    for ball in 0..nballs {
                        zeta *= rising(node, ball);
                    }
                } else {
                    // Descending cutoff on the own ball...
                    zeta *= 1.0 - rising(node, ball_idx);
                    // ...and rising cutoffs on contained balls.
                    for &l in &geom.contained[ball_idx] {
                        zeta *= rising(node, l);
                    }
                }
                for x in values[node * nd..(node + 1) * nd].iter_mut() {
                    *x *= zeta;
                }
            }
            fields.push(Section { flavor: SectionFlavor::Ambient, values });
        }
    }
    Ok(fields)
}

/// Free-function energy evaluation used before the pack is fully built
/// (no borrow of the final `m`/`e_at_m`).
fn pack_energy(pack: &SurrogatePack, u: &TorusMap, s: &[f64]) -> Result<f64> {
    pack.energy_at(u, s)
}

/// Perturb `u` along the pack at coefficients `s` and measure the pair
/// (energy excess over `E(u)`, defect of the perturbed map under the same
/// collection and configuration).
pub fn separation_check(
    u: &TorusMap,
    coll: &BubbleCollection,
    cfg: &BubbleConfig,
    pack: &SurrogatePack,
    s: &[f64],
) -> Result<(f64, f64)> {
    let perturbed = pack.perturbed(u, s)?;
    let excess = perturbed.energy() - u.energy();
    let defect = bubble_defect(&perturbed, coll, cfg)?;
    Ok((excess, defect))
}

#[cfg(test)]
mod tests;
