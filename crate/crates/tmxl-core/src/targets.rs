//! Closed family of embedded target manifolds `M ⊂ R^N`.
//!
//! Every target exposes the nearest-point projection `Π` on a tube
//! neighborhood `M_δ`, together with the pieces of its differential calculus
//! the rest of the crate needs:
//!
//! * `dΠ_u = P_u`, the orthogonal projector onto `T_u M`;
//! * `HessΠ_u`, the second derivative of `Π`; restricted to tangent pairs it
//!   equals `−A_u`, where `A` is the second-fundamental-form term appearing
//!   in the Euler–Lagrange equation `Δu + A(u)(∇u,∇u) = 0` (on the radius-ρ
//!   sphere `A(v,w) = ⟨v,w⟩ u / ρ²`);
//! * the curvature tensor `R` of the induced metric, with the sign fixed by
//!   `R(x,y)z = ⟨y,z⟩x − ⟨x,z⟩y` on the unit sphere.
//!
//! Projections are exact for spheres and circle products and computed by a
//! Newton iteration on the Lagrange multiplier for ellipsoids.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::num::dot;

/// Residual tolerance for the ellipsoid projection Newton iteration.
pub const NEWTON_TOL: f64 = 1e-12;
/// Iteration cap for the ellipsoid projection Newton iteration.
pub const NEWTON_MAX_ITERS: usize = 50;
/// Maximum admissible relative normal component for "tangent" arguments.
pub const TANGENT_TOL: f64 = 1e-8;
/// Step used for finite-difference Hessians of `Π` where no closed form is
/// implemented (ellipsoid with arbitrary, possibly normal, arguments).
/// Large enough that f64 roundoff (~ε/h²) stays below Richardson truncation.
const HESS_FD_STEP: f64 = 1e-4;

/// An embedded target manifold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TargetManifold {
    /// Round sphere of the given radius in `R^{ambient_dim}`.
    RoundSphere { radius: f64, ambient_dim: usize },
    /// Product of two circles `S¹(r1) × S¹(r2) ⊂ R⁴` (flat torus).
    CliffordProduct { r1: f64, r2: f64 },
    /// Ellipsoid `Σ x_i²/a_i² = 1` in `R^{len(semi_axes)}`.
    Ellipsoid { semi_axes: Vec<f64> },
}

impl TargetManifold {
    /// Unit sphere `S³ ⊂ R⁴`, the workhorse target.
    pub fn unit_s3() -> Self {
        TargetManifold::RoundSphere { radius: 1.0, ambient_dim: 4 }
    }

    /// Check the parameters describe a genuine manifold.
    pub fn validate(&self) -> Result<()> {
        match self {
            TargetManifold::RoundSphere { radius, ambient_dim } => {
                if !radius.is_finite() || *radius <= 0.0 {
                    return Err(Error::Parse(format!("sphere radius must be positive, got {radius}")));
                }
                if *ambient_dim < 2 {
                    return Err(Error::Parse(format!("sphere ambient dimension must be ≥ 2, got {ambient_dim}")));
                }
            }
            TargetManifold::CliffordProduct { r1, r2 } => {
                for r in [r1, r2] {
                    if !r.is_finite() || *r <= 0.0 {
                        return Err(Error::Parse(format!("circle radius must be positive, got {r}")));
                    }
                }
            }
            TargetManifold::Ellipsoid { semi_axes } => {
                if semi_axes.len() < 2 {
                    return Err(Error::Parse("ellipsoid needs at least 2 semi-axes".into()));
                }
                for a in semi_axes {
                    if !a.is_finite() || *a <= 0.0 {
                        return Err(Error::Parse(format!("semi-axis must be positive, got {a}")));
                    }
                }
            }
        }
        Ok(())
    }

    /// Dimension of the ambient Euclidean space.
    pub fn ambient_dim(&self) -> usize {
        match self {
            TargetManifold::RoundSphere { ambient_dim, .. } => *ambient_dim,
            TargetManifold::CliffordProduct { .. } => 4,
            TargetManifold::Ellipsoid { semi_axes } => semi_axes.len(),
        }
    }

    /// Intrinsic dimension of the manifold.
    pub fn dim(&self) -> usize {
        match self {
            TargetManifold::RoundSphere { ambient_dim, .. } => ambient_dim - 1,
            TargetManifold::CliffordProduct { .. } => 2,
            TargetManifold::Ellipsoid { semi_axes } => semi_axes.len() - 1,
        }
    }

    /// Codimension in the ambient space.
    pub fn codim(&self) -> usize {
        self.ambient_dim() - self.dim()
    }

    /// Radius δ of the tube `M_δ` on which the nearest-point projection is
    /// used: half the smallest focal distance of the family.
    pub fn tube_radius(&self) -> f64 {
        match self {
            TargetManifold::RoundSphere { radius, .. } => 0.5 * radius,
            TargetManifold::CliffordProduct { r1, r2 } => 0.5 * r1.min(*r2),
            TargetManifold::Ellipsoid { semi_axes } => {
                0.5 * semi_axes.iter().cloned().fold(f64::INFINITY, f64::min)
            }
        }
    }

    /// Distance from `x` to the surface. For the ellipsoid this runs the
    /// projection Newton iteration.
    pub fn surface_distance(&self, x: &[f64]) -> Result<f64> {
        match self {
            TargetManifold::RoundSphere { radius, .. } => Ok((norm(x) - radius).abs()),
            TargetManifold::CliffordProduct { r1, r2 } => {
                let d1 = x[0].hypot(x[1]) - r1;
                let d2 = x[2].hypot(x[3]) - r2;
                Ok(d1.hypot(d2))
            }
            TargetManifold::Ellipsoid { .. } => {
                let mut y = vec![0.0; x.len()];
                self.project_raw(x, &mut y)?;
                Ok(dist(x, &y))
            }
        }
    }

    /// Nearest-point projection `Π(x)`, restricted to the tube `M_δ`.
    pub fn project(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.ambient_dim()];
        self.project_into(x, &mut out)?;
        Ok(out)
    }

    /// Allocation-free nearest-point projection with tube check.
    pub fn project_into(&self, x: &[f64], out: &mut [f64]) -> Result<()> {
        debug_assert_eq!(x.len(), self.ambient_dim());
        self.project_raw(x, out)?;
        let d = dist(x, out);
        let tube = self.tube_radius();
        if d >= tube {
            return Err(Error::OutsideTube { dist: d, tube });
        }
        Ok(())
    }

    /// Projection without the tube-radius check (used by `surface_distance`).
    fn project_raw(&self, x: &[f64], out: &mut [f64]) -> Result<()> {
        match self {
            TargetManifold::RoundSphere { radius, .. } => {
                let n = norm(x);
                if n < 1e-300 {
                    return Err(Error::OutsideTube { dist: *radius, tube: self.tube_radius() });
                }
                let c = radius / n;
                for (o, xi) in out.iter_mut().zip(x) {
                    *o = c * xi;
                }
                Ok(())
            }
            TargetManifold::CliffordProduct { r1, r2 } => {
                for (k, r) in [(0usize, *r1), (2usize, *r2)] {
                    let n = x[k].hypot(x[k + 1]);
                    if n < 1e-300 {
                        return Err(Error::OutsideTube { dist: r, tube: self.tube_radius() });
                    }
                    let c = r / n;
                    out[k] = c * x[k];
                    out[k + 1] = c * x[k + 1];
                }
                Ok(())
            }
            TargetManifold::Ellipsoid { semi_axes } => project_ellipsoid(semi_axes, x, out),
        }
    }

    /// Is `x` on the manifold up to `tol`?
    pub fn is_on(&self, x: &[f64], tol: f64) -> bool {
        self.surface_distance(x).map(|d| d <= tol).unwrap_or(false)
    }

    /// Orthonormal basis of the normal space at `u ∈ M`.
    pub fn normal_frame(&self, u: &[f64]) -> Vec<Vec<f64>> {
        match self {
            TargetManifold::RoundSphere { radius, .. } => {
                vec![u.iter().map(|x| x / radius).collect()]
            }
            TargetManifold::CliffordProduct { r1, r2 } => vec![
                vec![u[0] / r1, u[1] / r1, 0.0, 0.0],
                vec![0.0, 0.0, u[2] / r2, u[3] / r2],
            ],
            TargetManifold::Ellipsoid { semi_axes } => {
                let mut g: Vec<f64> = u.iter().zip(semi_axes).map(|(x, a)| x / (a * a)).collect();
                let gn = norm(&g);
                for v in &mut g {
                    *v /= gn;
                }
                vec![g]
            }
        }
    }

    /// Tangential projection `P_u v` (equals `dΠ_u v` on the manifold).
    pub fn tangent_project(&self, u: &[f64], v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; v.len()];
        self.tangent_project_into(u, v, &mut out);
        out
    }

    /// Allocation-free tangential projection.
    pub fn tangent_project_into(&self, u: &[f64], v: &[f64], out: &mut [f64]) {
        match self {
            TargetManifold::RoundSphere { radius, .. } => {
                let c = dot(u, v) / (radius * radius);
                for i in 0..v.len() {
                    out[i] = v[i] - c * u[i];
                }
            }
            TargetManifold::CliffordProduct { r1, r2 } => {
                let c1 = (u[0] * v[0] + u[1] * v[1]) / (r1 * r1);
                let c2 = (u[2] * v[2] + u[3] * v[3]) / (r2 * r2);
                out[0] = v[0] - c1 * u[0];
                out[1] = v[1] - c1 * u[1];
                out[2] = v[2] - c2 * u[2];
                out[3] = v[3] - c2 * u[3];
            }
            TargetManifold::Ellipsoid { semi_axes } => {
                let mut g2 = 0.0;
                let mut gv = 0.0;
                for i in 0..u.len() {
                    let a2 = semi_axes[i] * semi_axes[i];
                    let gi = u[i] / a2;
                    g2 += gi * gi;
                    gv += gi * v[i];
                }
                let c = gv / g2;
                for i in 0..v.len() {
                    let a2 = semi_axes[i] * semi_axes[i];
                    out[i] = v[i] - c * u[i] / a2;
                }
            }
        }
    }

    /// Deterministic orthonormal frame of `T_u M`.
    ///
    /// Spheres and ellipsoids use a Householder reflector against the unit
    /// normal; the circle product has a global analytic frame.
    pub fn tangent_frame(&self, u: &[f64]) -> Vec<Vec<f64>> {
        match self {
            TargetManifold::CliffordProduct { r1, r2 } => vec![
                vec![-u[1] / r1, u[0] / r1, 0.0, 0.0],
                vec![0.0, 0.0, -u[3] / r2, u[2] / r2],
            ],
            _ => {
                let n = &self.normal_frame(u)[0];
                householder_complement(n)
            }
        }
    }

    /// Full second derivative `HessΠ_u(v, w)` of the projection at `u ∈ M`,
    /// for arbitrary ambient `v, w`.
    ///
    /// Closed form for spheres and circle products; Richardson-extrapolated
    /// finite differences of `Π` for the ellipsoid.
    pub fn hess_projection(&self, u: &[f64], v: &[f64], w: &[f64]) -> Vec<f64> {
        match self {
            TargetManifold::RoundSphere { radius, .. } => {
                let nd = self.ambient_dim();
                let mut out = vec![0.0; nd];
                sphere_hess(*radius, u, v, w, 0, nd, &mut out);
                out
            }
            TargetManifold::CliffordProduct { r1, r2 } => {
                let mut out = vec![0.0; 4];
                sphere_hess(*r1, u, v, w, 0, 2, &mut out);
                sphere_hess(*r2, u, v, w, 2, 2, &mut out);
                out
            }
            TargetManifold::Ellipsoid { .. } => self.hess_projection_fd(u, v, w),
        }
    }

    /// Finite-difference mixed second directional derivative of `Π`.
    fn hess_projection_fd(&self, u: &[f64], v: &[f64], w: &[f64]) -> Vec<f64> {
        let nd = self.ambient_dim();
        let mut out = vec![0.0; nd];
        let probe = |s: f64, t: f64| -> Vec<f64> {
            let x: Vec<f64> = (0..nd).map(|i| u[i] + s * v[i] + t * w[i]).collect();
            let mut y = vec![0.0; nd];
            self.project_raw(&x, &mut y).expect("projection in tube");
            y
        };
        let h = HESS_FD_STEP;
        for level in 0..2 {
            let hh = h / (1 << level) as f64;
            let pp = probe(hh, hh);
            let pm = probe(hh, -hh);
            let mp = probe(-hh, hh);
            let mm = probe(-hh, -hh);
            for i in 0..nd {
                let d = (pp[i] - pm[i] - mp[i] + mm[i]) / (4.0 * hh * hh);
                if level == 0 {
                    out[i] = d;
                } else {
                    out[i] = (4.0 * d - out[i]) / 3.0;
                }
            }
        }
        out
    }

    /// `HessΠ_u(v, w)` for **tangent** `v, w`, written into `out`.
    ///
    /// This is the hot path of the second-variation machinery and has a
    /// closed form for every target (it equals `−A_u(v, w)`).
    pub fn hess_pair_into(&self, u: &[f64], v: &[f64], w: &[f64], out: &mut [f64]) {
        match self {
            TargetManifold::RoundSphere { radius, .. } => {
                let c = -dot(v, w) / (radius * radius);
                for i in 0..u.len() {
                    out[i] = c * u[i];
                }
            }
            TargetManifold::CliffordProduct { r1, r2 } => {
                let c1 = -(v[0] * w[0] + v[1] * w[1]) / (r1 * r1);
                let c2 = -(v[2] * w[2] + v[3] * w[3]) / (r2 * r2);
                out[0] = c1 * u[0];
                out[1] = c1 * u[1];
                out[2] = c2 * u[2];
                out[3] = c2 * u[3];
            }
            TargetManifold::Ellipsoid { semi_axes } => {
                // −A(v,w) = −⟨v/a², w⟩ n/|g| with g = u/a², n = g/|g|.
                let mut g2 = 0.0;
                let mut vw = 0.0;
                for i in 0..u.len() {
                    let a2 = semi_axes[i] * semi_axes[i];
                    let gi = u[i] / a2;
                    g2 += gi * gi;
                    vw += v[i] * w[i] / a2;
                }
                let c = -vw / g2;
                for i in 0..u.len() {
                    let a2 = semi_axes[i] * semi_axes[i];
                    out[i] = c * u[i] / a2;
                }
            }
        }
    }

    /// Tangential adjoint of the pair Hessian in its second slot: for
    /// tangent `v` this returns the tangent vector `m` with
    /// `⟨m, w⟩ = ⟨c, HessΠ_u(v, w)⟩` for every tangent `w`.
    pub fn hess_pair_adjoint(&self, u: &[f64], c: &[f64], v: &[f64], out: &mut [f64]) {
        match self {
            TargetManifold::RoundSphere { radius, .. } => {
                let s = -dot(c, u) / (radius * radius);
                for i in 0..u.len() {
                    out[i] = s * v[i];
                }
            }
            TargetManifold::CliffordProduct { r1, r2 } => {
                let s1 = -(c[0] * u[0] + c[1] * u[1]) / (r1 * r1);
                let s2 = -(c[2] * u[2] + c[3] * u[3]) / (r2 * r2);
                out[0] = s1 * v[0];
                out[1] = s1 * v[1];
                out[2] = s2 * v[2];
                out[3] = s2 * v[3];
            }
            TargetManifold::Ellipsoid { semi_axes } => {
                // ⟨c, −A(v,w)⟩ = −⟨c,n⟩⟨v/a², w⟩/|g|: the raw gradient is
                // −(⟨c,n⟩/|g|)·v/a², projected back to the tangent space.
                let mut g2 = 0.0;
                let mut cg = 0.0;
                for i in 0..u.len() {
                    let a2 = semi_axes[i] * semi_axes[i];
                    let gi = u[i] / a2;
                    g2 += gi * gi;
                    cg += c[i] * gi;
                }
                let s = -cg / g2;
                let raw: Vec<f64> = (0..u.len())
                    .map(|i| s * v[i] / (semi_axes[i] * semi_axes[i]))
                    .collect();
                self.tangent_project_into(u, &raw, out);
            }
        }
    }

    /// Second fundamental form `A_u(v, w) = −HessΠ_u(v, w)` for tangent
    /// `v, w`. Errors with [`Error::NotTangent`] if an argument has a
    /// relative normal component above [`TANGENT_TOL`].
    pub fn second_fundamental_form(&self, u: &[f64], v: &[f64], w: &[f64]) -> Result<Vec<f64>> {
        for (index, vec) in [v, w].into_iter().enumerate() {
            let p = self.tangent_project(u, vec);
            let normal = dist(vec, &p);
            let scale = norm(vec).max(1.0);
            if normal > TANGENT_TOL * scale {
                return Err(Error::NotTangent { index, normal });
            }
        }
        let mut out = vec![0.0; self.ambient_dim()];
        self.hess_pair_into(u, v, w, &mut out);
        for o in &mut out {
            *o = -*o;
        }
        Ok(out)
    }

    /// Curvature tensor `R(x, y) z` of `M` at `u` (tangent arguments).
    pub fn riemann_curvature(&self, u: &[f64], x: &[f64], y: &[f64], z: &[f64]) -> Vec<f64> {
        match self {
            TargetManifold::RoundSphere { radius, .. } => {
                let c = 1.0 / (radius * radius);
                let yz = dot(y, z);
                let xz = dot(x, z);
                (0..x.len()).map(|i| c * (yz * x[i] - xz * y[i])).collect()
            }
            TargetManifold::CliffordProduct { .. } => vec![0.0; 4],
            TargetManifold::Ellipsoid { semi_axes } => {
                // Hypersurface Gauss equation: R(x,y)z = h(y,z) Sx − h(x,z) Sy
                // with shape operator S v = −P ∂_v n and h(v,w) = ⟨S v, w⟩.
                let n = &self.normal_frame(u)[0];
                let g: Vec<f64> = u.iter().zip(semi_axes).map(|(xi, a)| xi / (a * a)).collect();
                let gn = norm(&g);
                let shape = |v: &[f64]| -> Vec<f64> {
                    let va: Vec<f64> =
                        v.iter().zip(semi_axes).map(|(vi, a)| vi / (a * a)).collect();
                    let c = dot(n, &va);
                    (0..v.len()).map(|i| -(va[i] - c * n[i]) / gn).collect()
                };
                let sx = shape(x);
                let sy = shape(y);
                let hyz = dot(&sy, z);
                let hxz = dot(&sx, z);
                (0..x.len()).map(|i| hyz * sx[i] - hxz * sy[i]).collect()
            }
        }
    }
}

/// HessΠ of a radius-ρ sphere occupying coordinates `[off, off+len)`:
/// `−(1/ρ)[⟨n,w⟩ P v + ⟨n,v⟩ P w + ⟨P v, P w⟩ n]` with `n = u/ρ`.
fn sphere_hess(
    radius: f64,
    u: &[f64],
    v: &[f64],
    w: &[f64],
    off: usize,
    len: usize,
    out: &mut [f64],
) {
    let r = radius;
    let mut nv = 0.0;
    let mut nw = 0.0;
    for i in off..off + len {
        nv += u[i] * v[i];
        nw += u[i] * w[i];
    }
    nv /= r;
    nw /= r;
    let mut pvpw = 0.0;
    for i in off..off + len {
        let ni = u[i] / r;
        let pv = v[i] - nv * ni;
        let pw = w[i] - nw * ni;
        pvpw += pv * pw;
    }
    for i in off..off + len {
        let ni = u[i] / r;
        let pv = v[i] - nv * ni;
        let pw = w[i] - nw * ni;
        out[i] = -(nw * pv + nv * pw + pvpw * ni) / r;
    }
}

/// Orthonormal basis of the hyperplane orthogonal to the unit vector `n`,
/// via the Householder reflector exchanging `n` and `∓e_N`.
fn householder_complement(n: &[f64]) -> Vec<Vec<f64>> {
    let nd = n.len();
    let last = nd - 1;
    let sign = if n[last] >= 0.0 { 1.0 } else { -1.0 };
    let mut v = n.to_vec();
    v[last] += sign;
    let vn2 = dot(&v, &v);
    (0..last)
        .map(|i| {
            let c = 2.0 * v[i] / vn2;
            let mut e: Vec<f64> = (0..nd).map(|j| -c * v[j]).collect();
            e[i] += 1.0;
            e
        })
        .collect()
}

/// Nearest point on the ellipsoid via Newton on the Lagrange multiplier:
/// `y_i = a_i² x_i / (a_i² + λ)` with `g(λ) = Σ y_i²/a_i² − 1 = 0`.
fn project_ellipsoid(semi_axes: &[f64], x: &[f64], out: &mut [f64]) -> Result<()> {
    let a2: Vec<f64> = semi_axes.iter().map(|a| a * a).collect();
    let min_a2 = a2.iter().cloned().fold(f64::INFINITY, f64::min);
    let eval = |lambda: f64| -> (f64, f64) {
        let mut g = -1.0;
        let mut dg = 0.0;
        for i in 0..x.len() {
            let d = a2[i] + lambda;
            let t = a2[i] * x[i] * x[i];
            g += t / (d * d);
            dg += -2.0 * t / (d * d * d);
        }
        (g, dg)
    };
    let mut lambda = 0.0f64;
    let mut converged = false;
    for _ in 0..NEWTON_MAX_ITERS {
        let (g, dg) = eval(lambda);
        if g.abs() <= NEWTON_TOL {
            converged = true;
            break;
        }
        if dg == 0.0 || !dg.is_finite() {
            return Err(Error::NonConvergence(
                "ellipsoid projection: singular Newton step".into(),
            ));
        }
        let mut step = -g / dg;
        // Keep λ on the nearest-point branch λ > −min a².
        let floor = -0.9 * min_a2;
        if lambda + step < floor {
            step = floor - lambda;
        }
        lambda += step;
        if step.abs() <= 1e-15 * (1.0 + lambda.abs()) {
            converged = eval(lambda).0.abs() <= 1e-9;
            break;
        }
    }
    if !converged && eval(lambda).0.abs() > 1e-9 {
        return Err(Error::NonConvergence(format!(
            "ellipsoid projection Newton residual {:.3e} after {} iterations",
            eval(lambda).0,
            NEWTON_MAX_ITERS
        )));
    }
    for i in 0..x.len() {
        out[i] = a2[i] * x[i] / (a2[i] + lambda);
    }
    Ok(())
}

fn norm(x: &[f64]) -> f64 {
    dot(x, x).sqrt()
}

fn dist(x: &[f64], y: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..x.len() {
        let d = x[i] - y[i];
        s += d * d;
    }
    s.sqrt()
}
