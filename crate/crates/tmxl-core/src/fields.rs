//! Discretized maps `u: T_τ → M ⊂ R^N` and vector fields along them.
//!
//! # Grid and metric
//!
//! Maps are stored on a doubly periodic `n_a × n_b` grid over the unit
//! square, node `(i, j)` sitting at lattice coordinates `(a, b) = (i/n_a,
//! j/n_b)`; the embedding into the torus is `z = a + b·τ`. Pulling the flat
//! metric of `C/(Z + τZ)` back to the unit square turns the Dirichlet
//! energy into
//!
//! ```text
//! E(u) = ½ ∫ [ c_aa |u_a|² + 2 c_ab ⟨u_a, u_b⟩ + c_bb |u_b|² ] da db
//! c_aa = |τ|²/Im τ,   c_ab = −Re τ/Im τ,   c_bb = 1/Im τ
//! ```
//!
//! which is elliptic for every mark (`c_ab² − c_aa c_bb = −1`).
//!
//! # Discretization
//!
//! Derivatives are forward differences on grid edges, with the cross term
//! symmetrized over the two difference orientations:
//!
//! ```text
//! E_h(u) = ½ Σ_{ij} w [ c_aa|D⁺_a u|² + c_bb|D⁺_b u|²
//!                       + c_ab(⟨D⁺_a u, D⁺_b u⟩ + ⟨D⁻_a u, D⁻_b u⟩) ]
//! ```
//!
//! with uniform weight `w = 1/(n_a n_b)`. This quadratic form has an exact
//! discrete gradient `dE_h(u)(v) = −Σ w ⟨Δ_h u, v⟩` for the operator
//!
//! ```text
//! Δ_h = c_aa D⁻_a D⁺_a + c_bb D⁻_b D⁺_b + c_ab (D⁻_a D⁺_b + D⁺_a D⁻_b),
//! ```
//!
//! so discrete criticality, the tension field, second variations, and the
//! spectral machinery all refer to one single energy. Node-centered central
//! differences are deliberately avoided: they decouple even and odd
//! sublattices, polluting the second-variation spectrum with checkerboard
//! modes and stalling gradient descent.

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::moduli::Mark;
use crate::num::pairwise_sum;
use crate::targets::TargetManifold;

/// Maximum distance of a stored node from the target surface.
pub const NODE_TOL: f64 = 1e-9;
/// Maximum relative normal component for tangential sections.
pub const SECTION_TANGENT_TOL: f64 = 1e-9;
/// Finite-difference step for energy variations.
pub const VARIATION_STEP: f64 = 1e-4;
/// Smallest admissible grid extent per axis.
pub const MIN_GRID: usize = 8;

/// Metric coefficients of the mark-pulled-back flat metric on the unit
/// square, plus the conformal chart data.
#[derive(Debug, Clone, Copy)]
pub struct MetricCoeffs {
    pub caa: f64,
    pub cab: f64,
    pub cbb: f64,
    pub re_tau: f64,
    pub im_tau: f64,
}

impl MetricCoeffs {
    pub fn new(tau: Complex64) -> Self {
        let im = tau.im;
        MetricCoeffs {
            caa: tau.norm_sqr() / im,
            cab: -tau.re / im,
            cbb: 1.0 / im,
            re_tau: tau.re,
            im_tau: im,
        }
    }
}

/// A discrete map from the torus `T_τ` into an embedded target.
#[derive(Debug, Clone, PartialEq)]
pub struct TorusMap {
    mark: Mark,
    target: TargetManifold,
    na: usize,
    nb: usize,
    /// Row-major node block: component `k` of node `(i, j)` lives at
    /// `(i·n_b + j)·N + k`.
    nodes: Vec<f64>,
}

/// Whether a section is constrained to the tangent bundle along its base
/// map or free in the ambient space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SectionFlavor {
    Ambient,
    Tangential,
}

/// A vector field along a [`TorusMap`], stored on the same grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Section {
    pub flavor: SectionFlavor,
    pub values: Vec<f64>,
}

impl TorusMap {
    /// Build a map from a raw node block, validating the grid shape and the
    /// on-manifold invariant.
    pub fn new(
        mark: Mark,
        target: TargetManifold,
        na: usize,
        nb: usize,
        nodes: Vec<f64>,
    ) -> Result<Self> {
        mark.validate()?;
        target.validate()?;
        if na < MIN_GRID || nb < MIN_GRID {
            return Err(Error::ConfigViolation(format!(
                "grid {na}×{nb} below the minimum {MIN_GRID} per axis"
            )));
        }
        let nd = target.ambient_dim();
        if nodes.len() != na * nb * nd {
            return Err(Error::ConfigViolation(format!(
                "node block has {} floats, expected {}×{}×{}",
                nodes.len(),
                na,
                nb,
                nd
            )));
        }
        let map = TorusMap { mark, target, na, nb, nodes };
        map.check_on_manifold()?;
        Ok(map)
    }

    /// Internal constructor for node blocks that are already projected.
    pub(crate) fn from_projected(
        mark: Mark,
        target: TargetManifold,
        na: usize,
        nb: usize,
        nodes: Vec<f64>,
    ) -> Self {
        debug_assert_eq!(nodes.len(), na * nb * target.ambient_dim());
        TorusMap { mark, target, na, nb, nodes }
    }

    /// Sample a smooth function of lattice coordinates and project every
    /// node onto the target.
    pub fn from_fn<F>(
        mark: Mark,
        target: TargetManifold,
        na: usize,
        nb: usize,
        f: F,
    ) -> Result<Self>
    where
        F: Fn(f64, f64) -> Vec<f64>,
    {
        mark.validate()?;
        target.validate()?;
        if na < MIN_GRID || nb < MIN_GRID {
            return Err(Error::ConfigViolation(format!(
                "grid {na}×{nb} below the minimum {MIN_GRID} per axis"
            )));
        }
        let nd = target.ambient_dim();
        let mut nodes = vec![0.0; na * nb * nd];
        for i in 0..na {
            let a = i as f64 / na as f64;
            for j in 0..nb {
                let b = j as f64 / nb as f64;
                let x = f(a, b);
                if x.len() != nd {
                    return Err(Error::ConfigViolation(format!(
                        "sampler returned {} components, target needs {nd}",
                        x.len()
                    )));
                }
                let off = (i * nb + j) * nd;
                target.project_into(&x, &mut nodes[off..off + nd])?;
            }
        }
        Ok(TorusMap { mark, target, na, nb, nodes })
    }

    fn check_on_manifold(&self) -> Result<()> {
        let nd = self.dim();
        for idx in 0..self.na * self.nb {
            let node = &self.nodes[idx * nd..(idx + 1) * nd];
            let dist = self.target.surface_distance(node)?;
            if dist > NODE_TOL {
                return Err(Error::NotOnManifold { index: idx, dist, tol: NODE_TOL });
            }
        }
        Ok(())
    }

    pub fn mark(&self) -> Mark {
        self.mark
    }

    pub fn tau(&self) -> Complex64 {
        self.mark.tau
    }

    pub fn target(&self) -> &TargetManifold {
        &self.target
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.na, self.nb)
    }

    /// Ambient dimension N.
    pub fn dim(&self) -> usize {
        self.target.ambient_dim()
    }

    pub fn node_count(&self) -> usize {
        self.na * self.nb
    }

    /// Quadrature weight of one node.
    pub fn weight(&self) -> f64 {
        1.0 / (self.na as f64 * self.nb as f64)
    }

    pub fn metric(&self) -> MetricCoeffs {
        MetricCoeffs::new(self.mark.tau)
    }

    /// Flat offset of node `(i, j)` (indices taken mod grid).
    #[inline]
    pub fn offset(&self, i: usize, j: usize) -> usize {
        ((i % self.na) * self.nb + (j % self.nb)) * self.dim()
    }

    pub fn node(&self, i: usize, j: usize) -> &[f64] {
        let off = self.offset(i, j);
        &self.nodes[off..off + self.dim()]
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    /// Replace the node block (same grid), re-validating the invariants.
    pub fn with_nodes(&self, nodes: Vec<f64>) -> Result<Self> {
        TorusMap::new(self.mark, self.target.clone(), self.na, self.nb, nodes)
    }

    /// Replace the mark, keeping the node block verbatim. This realizes the
    /// affine identification of the two tori in lattice coordinates (the
    /// linear map fixing 1 and exchanging the second lattice generators is
    /// the identity on the unit square).
    pub fn with_mark(&self, mark: Mark) -> Result<Self> {
        mark.validate()?;
        let mut out = self.clone();
        out.mark = mark;
        Ok(out)
    }

    /// Reindex nodes by an integer grid translation `(i, j) ↦ (i+p, j+q)`;
    /// a discrete isometry of the torus, so every energy quantity is
    /// preserved.
    pub fn grid_shift(&self, p: i64, q: i64) -> Self {
        let nd = self.dim();
        let (na, nb) = (self.na as i64, self.nb as i64);
        let mut nodes = vec![0.0; self.nodes.len()];
        for i in 0..self.na {
            let si = ((i as i64 + p).rem_euclid(na)) as usize;
            for j in 0..self.nb {
                let sj = ((j as i64 + q).rem_euclid(nb)) as usize;
                let src = self.offset(si, sj);
                let dst = (i * self.nb + j) * nd;
                nodes[dst..dst + nd].copy_from_slice(&self.nodes[src..src + nd]);
            }
        }
        TorusMap { mark: self.mark, target: self.target.clone(), na: self.na, nb: self.nb, nodes }
    }

    /// Dirichlet energy of the stored map.
    pub fn energy(&self) -> f64 {
        self.energy_of_nodes(&self.nodes)
    }

    /// Energy quadrature applied to an arbitrary node block on this map's
    /// grid and mark (the block need not lie on the target).
    pub fn energy_of_nodes(&self, nodes: &[f64]) -> f64 {
        0.5 * self.bilinear_of(nodes, nodes)
    }

    /// The symmetric bilinear form 𝒬 with `𝒬(u, u) = 2·E_h(u)` and
    /// `𝒬(x, y) = −Σ w ⟨Δ_h x, y⟩` (discrete integration by parts is exact).
    pub fn energy_bilinear(&self, x: &[f64], y: &[f64]) -> f64 {
        self.bilinear_of(x, y)
    }

    fn bilinear_of(&self, x: &[f64], y: &[f64]) -> f64 {
        debug_assert_eq!(x.len(), self.nodes.len());
        debug_assert_eq!(y.len(), self.nodes.len());
        let nd = self.dim();
        let (na, nb) = (self.na, self.nb);
        let m = self.metric();
        let ha = 1.0 / na as f64;
        let hb = 1.0 / nb as f64;
        let w = self.weight();
        // Per-edge scalings: D⁺ terms carry 1/h each.
        let saa = m.caa / (ha * ha);
        let sbb = m.cbb / (hb * hb);
        let sab = m.cab / (ha * hb);
        let row = |i: usize| -> f64 {
            let ip = (i + 1) % na;
            let im = (i + na - 1) % na;
            let mut acc = vec![0.0; nb];
            for (j, slot) in acc.iter_mut().enumerate() {
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
                    let dxa = x[oa + k] - x[o + k];
                    let dxb = x[ob + k] - x[o + k];
                    let dya = y[oa + k] - y[o + k];
                    let dyb = y[ob + k] - y[o + k];
                    let dxam = x[o + k] - x[oma + k];
                    let dxbm = x[o + k] - x[omb + k];
                    let dyam = y[o + k] - y[oma + k];
                    let dybm = y[o + k] - y[omb + k];
                    eaa += dxa * dya;
                    ebb += dxb * dyb;
                    eabp += dxa * dyb + dxb * dya;
                    eabm += dxam * dybm + dxbm * dyam;
                }
                *slot = saa * eaa + sbb * ebb + 0.5 * sab * (eabp + eabm);
            }
            pairwise_sum(&acc)
        };
        let rows: Vec<f64> = (0..na).into_par_iter().map(row).collect();
        w * pairwise_sum(&rows)
    }

    /// Ambient discrete Laplace–Beltrami image `Δ_h u` (no tangential
    /// projection), satisfying `dE_h(u)(v) = −Σ w ⟨Δ_h u, v⟩` exactly.
    pub fn laplacian(&self) -> Vec<f64> {
        self.laplacian_of(&self.nodes)
    }

    /// `Δ_h` applied to an arbitrary node block on this grid.
    pub fn laplacian_of(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.nodes.len());
        let nd = self.dim();
        let (na, nb) = (self.na, self.nb);
        let m = self.metric();
        let ha = 1.0 / na as f64;
        let hb = 1.0 / nb as f64;
        let saa = m.caa / (ha * ha);
        let sbb = m.cbb / (hb * hb);
        let sab = m.cab / (ha * hb);
        let mut out = vec![0.0; x.len()];
        out.par_chunks_mut(nb * nd).enumerate().for_each(|(i, chunk)| {
            let ip = (i + 1) % na;
            let im = (i + na - 1) % na;
            for j in 0..nb {
                let jp = (j + 1) % nb;
                let jm = (j + nb - 1) % nb;
                let o = (i * nb + j) * nd;
                let oa = (ip * nb + j) * nd;
                let oma = (im * nb + j) * nd;
                let ob = (i * nb + jp) * nd;
                let omb = (i * nb + jm) * nd;
                // Mixed stencil D⁻aD⁺b + D⁺aD⁻b.
                let opp = (ip * nb + jm) * nd; // (i+1, j−1)
                let omm = (im * nb + jp) * nd; // (i−1, j+1)
                for k in 0..nd {
                    let laa = x[oa + k] - 2.0 * x[o + k] + x[oma + k];
                    let lbb = x[ob + k] - 2.0 * x[o + k] + x[omb + k];
                    // D⁻aD⁺b x = x(i,j+1) − x(i,j) − x(i−1,j+1) + x(i−1,j)
                    let m1 = x[ob + k] - x[o + k] - x[omm + k] + x[oma + k];
                    // D⁺aD⁻b x = x(i+1,j) − x(i+1,j−1) − x(i,j) + x(i,j−1)
                    let m2 = x[oa + k] - x[opp + k] - x[o + k] + x[omb + k];
                    chunk[j * nd + k] = saa * laa + sbb * lbb + sab * (m1 + m2);
                }
            }
        });
        out
    }

    /// Tension field `P_u(Δ_h u)`: the tangential part of the discrete
    /// Laplacian, equal (in the continuum) to `Δu + A(u)(∇u, ∇u)`. Vanishes
    /// exactly at discrete-harmonic maps.
    pub fn tension(&self) -> Section {
        let lap = self.laplacian();
        let nd = self.dim();
        let mut values = vec![0.0; lap.len()];
        values
            .par_chunks_mut(nd)
            .zip(lap.par_chunks(nd))
            .zip(self.nodes.par_chunks(nd))
            .for_each(|((out, l), u)| {
                self.target.tangent_project_into(u, l, out);
            });
        Section { flavor: SectionFlavor::Tangential, values }
    }

    /// Supremum node norm of the tension field (the discrete-harmonicity
    /// residual).
    pub fn tension_sup(&self) -> f64 {
        let t = self.tension();
        let nd = self.dim();
        t.values
            .chunks(nd)
            .map(|v| v.iter().map(|x| x * x).sum::<f64>().sqrt())
            .fold(0.0, f64::max)
    }

    /// Area of the image (counting multiplicity): quadrature of
    /// `√(|u_x|²|u_y|² − ⟨u_x,u_y⟩²)` in the conformal chart
    /// `u_x = u_a`, `u_y = (u_b − Re τ · u_a)/Im τ`, `dx dy = Im τ da db`.
    pub fn area(&self) -> f64 {
        let nd = self.dim();
        let (na, nb) = (self.na, self.nb);
        let m = self.metric();
        let ha = 1.0 / na as f64;
        let hb = 1.0 / nb as f64;
        let w = self.weight() * m.im_tau;
        let nodes = &self.nodes;
        let row = |i: usize| -> f64 {
            let ip = (i + 1) % na;
            let mut acc = vec![0.0; nb];
            for (j, slot) in acc.iter_mut().enumerate() {
                let jp = (j + 1) % nb;
                let o = (i * nb + j) * nd;
                let oa = (ip * nb + j) * nd;
                let ob = (i * nb + jp) * nd;
                let mut xx = 0.0;
                let mut yy = 0.0;
                let mut xy = 0.0;
                for k in 0..nd {
                    let ux = (nodes[oa + k] - nodes[o + k]) / ha;
                    let ub = (nodes[ob + k] - nodes[o + k]) / hb;
                    let uy = (ub - m.re_tau * ux) / m.im_tau;
                    xx += ux * ux;
                    yy += uy * uy;
                    xy += ux * uy;
                }
                *slot = (xx * yy - xy * xy).max(0.0).sqrt();
            }
            pairwise_sum(&acc)
        };
        let rows: Vec<f64> = (0..na).into_par_iter().map(row).collect();
        w * pairwise_sum(&rows)
    }

    /// Node-wise projected perturbation `Π(u + s·X)`.
    pub fn perturb(&self, x: &Section, s: f64) -> Result<TorusMap> {
        debug_assert_eq!(x.values.len(), self.nodes.len());
        if s == 0.0 {
            return Ok(self.clone());
        }
        let nd = self.dim();
        let mut nodes = vec![0.0; self.nodes.len()];
        let mut probe = vec![0.0; nd];
        for idx in 0..self.node_count() {
            let off = idx * nd;
            for k in 0..nd {
                probe[k] = self.nodes[off + k] + s * x.values[off + k];
            }
            self.target.project_into(&probe, &mut nodes[off..off + nd]).map_err(|e| match e {
                Error::OutsideTube { dist, .. } => Error::LeftTube { index: idx, dist },
                other => other,
            })?;
        }
        Ok(TorusMap {
            mark: self.mark,
            target: self.target.clone(),
            na: self.na,
            nb: self.nb,
            nodes,
        })
    }

    /// Energy along the projected perturbation, `s ↦ E(Π(u + sX))`.
    pub fn energy_along(&self, x: &Section, s: f64) -> Result<f64> {
        Ok(self.perturb(x, s)?.energy())
    }

    /// First and second variations of the energy under projected
    /// perturbations: `(dE/ds, d²E/ds², d²E/ds dt)` at `s = t = 0` for the
    /// family `E(Π(u + sX + tY))`, via Richardson-extrapolated central
    /// differences with step [`VARIATION_STEP`].
    pub fn variation_derivatives(&self, x: &Section, y: &Section) -> Result<(f64, f64, f64)> {
        self.require_tangential(x, 0)?;
        self.require_tangential(y, 1)?;
        let h = VARIATION_STEP;
        let ex = |s: f64| -> Result<f64> { self.energy_along(x, s) };
        let d1 = crate::num::try_central_d1(ex, h)?;
        let d2 = crate::num::try_central_d2(|s| self.energy_along(x, s), self.energy(), h)?;
        let d11 = crate::num::try_central_d11(
            |s, t| {
                let mut combo = vec![0.0; self.nodes.len()];
                for k in 0..combo.len() {
                    combo[k] = s * x.values[k] + t * y.values[k];
                }
                let sec = Section { flavor: SectionFlavor::Ambient, values: combo };
                self.energy_along(&sec, 1.0)
            },
            h,
        )?;
        Ok((d1, d2, d11))
    }

    fn require_tangential(&self, s: &Section, which: usize) -> Result<()> {
        if s.flavor != SectionFlavor::Tangential {
            return Err(Error::NotTangent { index: which, normal: f64::NAN });
        }
        s.check_tangential(self)
    }
}

/// Pull a map back along the affine identification of `T_{τ₂}` with the
/// map's own torus: node values are reused verbatim and only the stored
/// mark changes.
pub fn iota_pullback(u: &TorusMap, tau2: Mark) -> Result<TorusMap> {
    u.with_mark(tau2)
}

impl Section {
    pub fn zeros(map: &TorusMap, flavor: SectionFlavor) -> Self {
        Section { flavor, values: vec![0.0; map.nodes().len()] }
    }

    /// Sample an ambient-valued function of lattice coordinates.
    pub fn from_fn<F>(map: &TorusMap, flavor: SectionFlavor, f: F) -> Result<Self>
    where
        F: Fn(f64, f64) -> Vec<f64>,
    {
        let nd = map.dim();
        let (na, nb) = map.grid();
        let mut values = vec![0.0; na * nb * nd];
        for i in 0..na {
            let a = i as f64 / na as f64;
            for j in 0..nb {
                let b = j as f64 / nb as f64;
                let v = f(a, b);
                if v.len() != nd {
                    return Err(Error::ConfigViolation(format!(
                        "section sampler returned {} components, need {nd}",
                        v.len()
                    )));
                }
                let off = (i * nb + j) * nd;
                values[off..off + nd].copy_from_slice(&v);
            }
        }
        let s = Section { flavor, values };
        if flavor == SectionFlavor::Tangential {
            s.check_tangential(map)?;
        }
        Ok(s)
    }

    /// Project an ambient section fiber-wise onto the tangent bundle.
    pub fn tangentialize(&self, map: &TorusMap) -> Section {
        let nd = map.dim();
        let mut values = vec![0.0; self.values.len()];
        for idx in 0..map.node_count() {
            let off = idx * nd;
            map.target().tangent_project_into(
                map.nodes()[off..off + nd].as_ref(),
                &self.values[off..off + nd],
                &mut values[off..off + nd],
            );
        }
        Section { flavor: SectionFlavor::Tangential, values }
    }

    /// Verify the tangency invariant against the base map.
    pub fn check_tangential(&self, map: &TorusMap) -> Result<()> {
        let nd = map.dim();
        for idx in 0..map.node_count() {
            let off = idx * nd;
            let v = &self.values[off..off + nd];
            let p = map.target().tangent_project(&map.nodes()[off..off + nd], v);
            let mut normal2 = 0.0;
            let mut norm2 = 0.0;
            for k in 0..nd {
                let d = v[k] - p[k];
                normal2 += d * d;
                norm2 += v[k] * v[k];
            }
            let scale = norm2.sqrt().max(1.0);
            if normal2.sqrt() > SECTION_TANGENT_TOL * scale {
                return Err(Error::NotTangent { index: idx, normal: normal2.sqrt() });
            }
        }
        Ok(())
    }

    /// Quadrature L² norm squared: `Σ w |X|²`.
    pub fn l2_norm_sq(&self, map: &TorusMap) -> f64 {
        let sums: Vec<f64> = self
            .values
            .par_chunks(map.dim() * map.grid().1)
            .map(|row| {
                let sq: Vec<f64> = row.iter().map(|v| v * v).collect();
                pairwise_sum(&sq)
            })
            .collect();
        map.weight() * pairwise_sum(&sums)
    }

    /// Quadrature L² inner product `Σ w ⟨X, Y⟩`.
    pub fn l2_inner(&self, other: &Section, map: &TorusMap) -> f64 {
        let nbnd = map.dim() * map.grid().1;
        let sums: Vec<f64> = self
            .values
            .par_chunks(nbnd)
            .zip(other.values.par_chunks(nbnd))
            .map(|(r1, r2)| {
                let prods: Vec<f64> = r1.iter().zip(r2).map(|(a, b)| a * b).collect();
                pairwise_sum(&prods)
            })
            .collect();
        map.weight() * pairwise_sum(&sums)
    }

    pub fn scale(&mut self, c: f64) {
        for v in &mut self.values {
            *v *= c;
        }
    }

    /// `self += c · other`.
    pub fn axpy(&mut self, c: f64, other: &Section) {
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += c * b;
        }
    }

    pub fn sup_norm(&self, nd: usize) -> f64 {
        self.values
            .chunks(nd)
            .map(|v| v.iter().map(|x| x * x).sum::<f64>().sqrt())
            .fold(0.0, f64::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::num::rng_from_seed;
    use rand::Rng;
    use std::f64::consts::PI;

    fn s3() -> TargetManifold {
        TargetManifold::unit_s3()
    }

    fn mark_i() -> Mark {
        Mark::new(0.0, 1.0)
    }

    /// Clifford-style product torus inside the unit 3-sphere.
    fn clifford(n: usize, mark: Mark) -> TorusMap {
        let r = 1.0 / 2f64.sqrt();
        TorusMap::from_fn(mark, s3(), n, n, |a, b| {
            vec![
                r * (2.0 * PI * a).cos(),
                r * (2.0 * PI * a).sin(),
                r * (2.0 * PI * b).cos(),
                r * (2.0 * PI * b).sin(),
            ]
        })
        .unwrap()
    }

    /// Rank-one map wrapping the first great circle.
    fn great_circle(n: usize) -> TorusMap {
        TorusMap::from_fn(mark_i(), s3(), n, n, |a, _| {
            vec![(2.0 * PI * a).cos(), (2.0 * PI * a).sin(), 0.0, 0.0]
        })
        .unwrap()
    }

    /// A smooth non-harmonic sphere-valued map for generic tests.
    fn wavy(n: usize, mark: Mark) -> TorusMap {
        TorusMap::from_fn(mark, s3(), n, n, |a, b| {
            let t = 2.0 * PI * a;
            let s = 2.0 * PI * b;
            let v = [
                1.0 + 0.3 * t.cos() + 0.1 * (t + s).sin(),
                0.4 * t.sin() * s.cos(),
                0.5 * s.sin() + 0.2 * (2.0 * t).cos(),
                0.8 + 0.1 * (s - t).cos(),
            ];
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.iter().map(|x| x / n).collect()
        })
        .unwrap()
    }

    fn random_tangential(map: &TorusMap, seed: u64) -> Section {
        let mut rng = rng_from_seed(seed);
        let ambient = Section {
            flavor: SectionFlavor::Ambient,
            values: (0..map.nodes().len()).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        };
        ambient.tangentialize(map)
    }

    #[test]
    fn constant_map_has_zero_energy_area_tension() {
        let u = TorusMap::from_fn(mark_i(), s3(), 8, 8, |_, _| vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(u.energy(), 0.0);
        assert_eq!(u.area(), 0.0);
        assert_eq!(u.tension_sup(), 0.0);
    }

    #[test]
    fn clifford_energy_matches_closed_form() {
        for n in [16usize, 64, 128] {
            let u = clifford(n, mark_i());
            let e = u.energy();
            let x = PI / n as f64;
            let closed = 2.0 * (n as f64 * x.sin()).powi(2) / 1.0; // 2 n² sin²(π/n)
            assert!(
                (e - closed).abs() <= 1e-10 * closed,
                "n = {n}: energy {e} vs closed form {closed}"
            );
        }
        // 0.1% of the continuum value 2π² at 128².
        let e = clifford(128, mark_i()).energy();
        let exact = 2.0 * PI * PI;
        assert!((e - exact).abs() <= 1e-3 * exact, "{e} vs {exact}");
    }

    #[test]
    fn great_circle_energy_and_area() {
        let u = great_circle(128);
        let exact = 2.0 * PI * PI;
        assert!((u.energy() - exact).abs() <= 1e-3 * exact);
        // Rank-one differential: zero area exactly.
        assert_eq!(u.area(), 0.0);
    }

    #[test]
    fn clifford_is_conformal_so_area_equals_energy() {
        for mark in [mark_i(), Mark::new(0.0, 2.0)] {
            let u = clifford(64, mark);
            let (e, a) = (u.energy(), u.area());
            // At τ = i the map is discretely conformal: exact equality.
            if mark.tau.im == 1.0 {
                assert!((e - a).abs() <= 1e-12 * e, "energy {e} vs area {a}");
            } else {
                assert!(a <= e + 1e-9);
            }
        }
    }

    #[test]
    fn area_never_exceeds_energy() {
        let mut rng = rng_from_seed(17);
        for trial in 0..5 {
            let mark = Mark::new(rng.gen_range(-0.4..0.4), rng.gen_range(0.7..2.0));
            let u = wavy(16 + 8 * trial, mark);
            assert!(
                u.area() <= u.energy() + 1e-9,
                "area {} > energy {}",
                u.area(),
                u.energy()
            );
        }
    }

    #[test]
    fn harmonic_fixtures_have_vanishing_tension() {
        // Both analytic fixtures are exact discrete critical points, so the
        // residual is pure floating-point noise.
        let u = clifford(128, mark_i());
        assert!(u.tension_sup() <= 1e-9, "clifford tension {}", u.tension_sup());
        let g = great_circle(128);
        assert!(g.tension_sup() <= 1e-9, "great-circle tension {}", g.tension_sup());
        // And stays so on a skew torus for the circle map (constant in b).
        let skew = TorusMap::from_fn(Mark::new(0.3, 1.1), s3(), 64, 64, |a, _| {
            vec![(2.0 * PI * a).cos(), (2.0 * PI * a).sin(), 0.0, 0.0]
        })
        .unwrap();
        assert!(skew.tension_sup() <= 1e-9, "skew tension {}", skew.tension_sup());
    }

    #[test]
    fn tension_detects_non_harmonic_maps() {
        let u = wavy(32, mark_i());
        assert!(u.tension_sup() > 1e-2);
    }

    #[test]
    fn discrete_gradient_is_exact_for_the_quadratic_energy() {
        // E_h is quadratic in the nodes, so the central difference along any
        // ambient direction is exactly the linear form −Σ w ⟨Δ_h u, v⟩.
        let u = wavy(24, Mark::new(0.25, 1.3));
        let mut rng = rng_from_seed(23);
        let v: Vec<f64> = (0..u.nodes().len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let h = 1e-3;
        let plus: Vec<f64> =
            u.nodes().iter().zip(&v).map(|(a, b)| a + h * b).collect();
        let minus: Vec<f64> =
            u.nodes().iter().zip(&v).map(|(a, b)| a - h * b).collect();
        let fd = (u.energy_of_nodes(&plus) - u.energy_of_nodes(&minus)) / (2.0 * h);
        let lap = u.laplacian();
        let w = u.weight();
        let pairing: f64 = -w * lap.iter().zip(&v).map(|(a, b)| a * b).sum::<f64>();
        assert!(
            (fd - pairing).abs() <= 1e-9 * (1.0 + fd.abs()),
            "finite difference {fd} vs exact gradient pairing {pairing}"
        );
        // And the bilinear form is the same pairing: 𝒬(u, v) = −Σw⟨Δu, v⟩.
        let q = u.energy_bilinear(u.nodes(), &v);
        assert!((q - pairing).abs() <= 1e-9 * (1.0 + q.abs()));
    }

    #[test]
    fn bilinear_form_polarizes_the_energy() {
        let u = wavy(16, mark_i());
        let mut rng = rng_from_seed(29);
        let x: Vec<f64> = (0..u.nodes().len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let y: Vec<f64> = (0..u.nodes().len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let qxy = u.energy_bilinear(&x, &y);
        let qyx = u.energy_bilinear(&y, &x);
        assert!((qxy - qyx).abs() <= 1e-12 * (1.0 + qxy.abs()), "symmetry");
        let sum: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a + b).collect();
        let expand = 0.5 * (u.energy_bilinear(&sum, &sum) - u.energy_bilinear(&x, &x)
            - u.energy_bilinear(&y, &y));
        assert!((qxy - expand).abs() <= 1e-9 * (1.0 + qxy.abs()), "polarization identity");
        assert!((u.energy_bilinear(&x, &x) - 2.0 * u.energy_of_nodes(&x)).abs() <= 1e-12 * (1.0 + qxy.abs()));
    }

    #[test]
    fn quadrature_error_decays_quadratically() {
        let energies: Vec<f64> = [16usize, 32, 64, 128]
            .iter()
            .map(|&n| wavy(n, Mark::new(0.2, 0.9)).energy())
            .collect();
        let d1 = (energies[1] - energies[0]).abs();
        let d2 = (energies[2] - energies[1]).abs();
        let d3 = (energies[3] - energies[2]).abs();
        assert!(d2 <= 0.35 * d1, "expected ~4× decay, got {d1} → {d2}");
        assert!(d3 <= 0.35 * d2, "expected ~4× decay, got {d2} → {d3}");
    }

    #[test]
    fn energy_is_exactly_invariant_under_grid_shifts() {
        let u = wavy(32, Mark::new(0.15, 1.4));
        let e = u.energy();
        for (p, q) in [(1i64, 0i64), (0, 1), (7, 13), (-3, 5)] {
            let v = u.grid_shift(p, q);
            let ev = v.energy();
            assert!((e - ev).abs() <= 1e-12 * e.max(1.0), "shift ({p},{q}): {e} vs {ev}");
            assert!((u.area() - v.area()).abs() <= 1e-12 * u.area().max(1.0));
        }
    }

    #[test]
    fn energy_agrees_across_modular_reindexings() {
        // T: lattice {1, τ+1}; same geometric map via the skew reindexing
        // u'(i,j) = u(i+j, j).
        let n = 64usize;
        let tau = Complex64::new(0.0, 1.0);
        let u = clifford(n, mark_i());
        let nd = u.dim();
        let mut nodes = vec![0.0; u.nodes().len()];
        for i in 0..n {
            for j in 0..n {
                let src = u.offset((i + j) % n, j);
                let dst = (i * n + j) * nd;
                nodes[dst..dst + nd].copy_from_slice(&u.nodes()[src..src + nd]);
            }
        }
        let shifted = TorusMap::new(
            Mark { tau: tau + 1.0 },
            s3(),
            n,
            n,
            nodes,
        )
        .unwrap();
        let (e1, e2) = (u.energy(), shifted.energy());
        assert!(
            (e1 - e2).abs() <= 1e-3 * e1,
            "modular T-reindexing changed energy: {e1} vs {e2}"
        );

        // S: τ = i is fixed by the inversion; the reindexing swaps the axes
        // with one orientation reversed, u'(i,j) = u(j, −i). Exact discrete
        // symmetry of the quadrature.
        let mut nodes = vec![0.0; u.nodes().len()];
        for i in 0..n {
            for j in 0..n {
                let src = u.offset(j, (n - i) % n);
                let dst = (i * n + j) * nd;
                nodes[dst..dst + nd].copy_from_slice(&u.nodes()[src..src + nd]);
            }
        }
        let swapped = TorusMap::new(mark_i(), s3(), n, n, nodes).unwrap();
        let e3 = swapped.energy();
        assert!((e1 - e3).abs() <= 1e-12 * e1, "modular S-reindexing: {e1} vs {e3}");
    }

    #[test]
    fn iota_pullback_reuses_nodes_and_round_trips() {
        let u = clifford(16, mark_i());
        let tau2 = Mark::new(0.0, 2.0);
        let v = iota_pullback(&u, tau2).unwrap();
        assert_eq!(u.nodes(), v.nodes());
        assert_eq!(v.mark(), tau2);
        // Energy changes per the metric coefficients: at τ = 2i the a- and
        // b-derivative energies rescale by 2 and ½ respectively.
        let x = PI / 16.0;
        let q = 2.0 * (16.0 * x.sin()).powi(2); // per-direction derivative mass ·2
        let expect = 0.5 * q * (2.0 + 0.5);
        assert!((v.energy() - expect).abs() <= 1e-10 * expect, "{} vs {expect}", v.energy());
        let back = iota_pullback(&v, u.mark()).unwrap();
        assert_eq!(back.nodes(), u.nodes());
        assert_eq!(back.mark(), u.mark());
        // Degenerate τ' = τ leaves everything identical.
        let same = iota_pullback(&u, u.mark()).unwrap();
        assert_eq!(same, u);
    }

    #[test]
    fn perturb_at_zero_returns_the_map_exactly() {
        let u = clifford(16, mark_i());
        let x = random_tangential(&u, 31);
        let v = u.perturb(&x, 0.0).unwrap();
        assert_eq!(u, v);
    }

    #[test]
    fn normal_perturbation_on_sphere_projects_back() {
        let u = clifford(16, mark_i());
        // X = u is the outward normal field on the unit sphere.
        let x = Section { flavor: SectionFlavor::Ambient, values: u.nodes().to_vec() };
        let v = u.perturb(&x, 0.2).unwrap();
        for (a, b) in u.nodes().iter().zip(v.nodes()) {
            assert!((a - b).abs() <= 1e-14, "radial motion must renormalize away");
        }
    }

    #[test]
    fn perturb_reports_tube_exit() {
        let u = clifford(16, mark_i());
        let x = Section { flavor: SectionFlavor::Ambient, values: u.nodes().to_vec() };
        // u − 1.0·u = 0: far outside the tube.
        let err = u.perturb(&x, -1.0).unwrap_err();
        assert!(matches!(err, Error::LeftTube { .. }), "{err:?}");
    }

    #[test]
    fn first_variation_vanishes_at_harmonic_maps() {
        let u = clifford(64, mark_i());
        let x = random_tangential(&u, 37);
        let (d1, _, _) = u.variation_derivatives(&x, &x).unwrap();
        let scale = x.l2_norm_sq(&u).sqrt() * u.energy().sqrt();
        assert!(d1.abs() <= 1e-6 * scale.max(1.0), "dE/ds = {d1}");
    }

    #[test]
    fn mixed_variation_reduces_to_second_on_diagonal() {
        let u = clifford(24, mark_i());
        let x = random_tangential(&u, 41);
        let (_, d2, d11) = u.variation_derivatives(&x, &x).unwrap();
        assert!(
            (d2 - d11).abs() <= 1e-6 * (1.0 + d2.abs()),
            "d²/ds² = {d2} vs d²/dsdt = {d11}"
        );
    }

    #[test]
    fn variation_requires_tangential_sections() {
        let u = clifford(16, mark_i());
        let x = Section { flavor: SectionFlavor::Ambient, values: u.nodes().to_vec() };
        assert!(matches!(
            u.variation_derivatives(&x, &x),
            Err(Error::NotTangent { .. })
        ));
        // Mislabelled flavor is caught by the node-wise check.
        let bad = Section { flavor: SectionFlavor::Tangential, values: u.nodes().to_vec() };
        assert!(matches!(
            u.variation_derivatives(&bad, &bad),
            Err(Error::NotTangent { .. })
        ));
    }

    #[test]
    fn projected_energy_has_cubic_taylor_remainder() {
        let u = clifford(32, mark_i());
        let x = random_tangential(&u, 43);
        let e0 = u.energy();
        let (d1, d2, _) = u.variation_derivatives(&x, &x).unwrap();
        let resid = |s: f64| -> f64 {
            let e = u.energy_along(&x, s).unwrap();
            (e - (e0 + s * d1 + 0.5 * s * s * d2)).abs()
        };
        let r1 = resid(0.02);
        let r2 = resid(0.01);
        let r3 = resid(0.005);
        // Cubic structure: halving s divides the remainder by ~8.
        assert!(r2 <= r1 / 8.0 * 1.6 + 1e-12, "remainders {r1}, {r2}");
        assert!(r3 <= r2 / 8.0 * 1.6 + 1e-12, "remainders {r2}, {r3}");
    }

    #[test]
    fn map_construction_validates_invariants() {
        // Too-coarse grid.
        assert!(matches!(
            TorusMap::from_fn(mark_i(), s3(), 4, 8, |_, _| vec![1.0, 0.0, 0.0, 0.0]),
            Err(Error::ConfigViolation(_))
        ));
        // Off-manifold nodes.
        let n = 8;
        let nodes = vec![0.7; n * n * 4];
        assert!(matches!(
            TorusMap::new(mark_i(), s3(), n, n, nodes),
            Err(Error::NotOnManifold { .. })
        ));
        // Wrong node count.
        assert!(matches!(
            TorusMap::new(mark_i(), s3(), n, n, vec![0.0; 12]),
            Err(Error::ConfigViolation(_))
        ));
        // Degenerate mark.
        assert!(
            TorusMap::from_fn(Mark::new(0.0, 0.0), s3(), 8, 8, |_, _| vec![1.0, 0.0, 0.0, 0.0])
                .is_err()
        );
    }

    #[test]
    fn section_l2_accounting() {
        let u = clifford(16, mark_i());
        let mut x = Section::from_fn(&u, SectionFlavor::Ambient, |_, _| vec![1.0, 0.0, 0.0, 0.0])
            .unwrap();
        assert!((x.l2_norm_sq(&u) - 1.0).abs() < 1e-12);
        let y = Section::from_fn(&u, SectionFlavor::Ambient, |_, _| vec![0.0, 2.0, 0.0, 0.0])
            .unwrap();
        assert!((x.l2_inner(&y, &u)).abs() < 1e-15);
        x.axpy(0.5, &y);
        assert!((x.l2_norm_sq(&u) - 2.0).abs() < 1e-12);
        x.scale(2.0);
        assert!((x.l2_norm_sq(&u) - 8.0).abs() < 1e-12);
        assert!((x.sup_norm(4) - 8f64.sqrt()).abs() < 1e-12);
    }
}
