//! Second variation of the energy: the index form, the Jacobi operator,
//! Morse index / nullity via symmetric eigensolves, and extraction of
//! rescaled unstable directions normalized for the concave surrogate
//! machinery.
//!
//! The index form is realized as the **exact** mixed second derivative of
//! the discrete energy under projected perturbations,
//! `I(X, Y) = 𝒬(X, Y) + 𝒬(u, HessΠ_u(X, Y))`, where `𝒬` is the energy's
//! bilinear form. Exactness (rather than a separate quadrature of the
//! curvature-term formula) buys three things at once: symmetry to rounding,
//! machine-level agreement with finite differences of the actual energy,
//! and an adjoint-consistent operator `J` with `⟨J V, W⟩_{L²} = I(V, W)`
//! identically for tangential `W`.

use faer::Side;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fields::{Section, SectionFlavor, TorusMap};
use crate::num::rng_from_seed;

/// Default sup-tension threshold below which a map counts as harmonic for
/// spectral purposes (warning-level unless `strict_harmonic`).
pub const HARMONIC_TOL: f64 = 1e-6;
/// `λ_tol = LAMBDA_TOL_FACTOR × (spectral scale)` separates negative, null
/// and positive eigenvalues; discretization smears continuum zero modes.
pub const LAMBDA_TOL_FACTOR: f64 = 1e-6;
/// Node-count bound for the dense eigensolver path.
pub const DENSE_NODE_LIMIT: usize = 48 * 48;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EigMode {
    Auto,
    Dense,
    Iterative,
}

/// Options for [`morse_index`] and [`unstable_basis`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IndexOptions {
    /// Sup-tension threshold for the harmonicity check.
    pub harmonic_tol: f64,
    /// Escalate the harmonicity check from a log warning to an error.
    pub strict_harmonic: bool,
    /// Override the automatic `λ_tol` (default `1e−6 ×` spectral scale).
    pub lambda_tol: Option<f64>,
    pub mode: EigMode,
    /// Subspace dimension for the iterative path; must exceed the size of
    /// the negative + null cluster.
    pub subspace: usize,
    /// Iteration cap for the inner conjugate-gradient solves of the
    /// shift-inverted operator (iterative path).
    pub cg_max_iters: usize,
    pub max_sweeps: usize,
    /// Seed for the iterative path's starting block.
    pub seed: u64,
    /// Grids with at most this many nodes use the dense path under `Auto`.
    pub dense_node_limit: usize,
}

impl Default for IndexOptions {
    fn default() -> Self {
        IndexOptions {
            harmonic_tol: HARMONIC_TOL,
            strict_harmonic: false,
            lambda_tol: None,
            mode: EigMode::Auto,
            subspace: 32,
            cg_max_iters: 600,
            max_sweeps: 40,
            seed: 0x5eed_cafe,
            dense_node_limit: DENSE_NODE_LIMIT,
        }
    }
}

/// Spectral summary of the second variation at a harmonic map.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IndexReport {
    /// Ascending resolved eigenvalues (the full spectrum on the dense
    /// path; the resolved low cluster on the iterative path).
    pub eigenvalues: Vec<f64>,
    /// Count of eigenvalues below `−λ_tol`.
    pub index: usize,
    /// Count of eigenvalues in `[−λ_tol, λ_tol]`.
    pub nullity: usize,
    pub lambda_tol: f64,
    /// Total dimension of the tangential-section space.
    pub dimension: usize,
    /// How many eigenvalues were resolved (= `eigenvalues.len()`).
    pub computed: usize,
}

/// The `k` most-unstable directions, rescaled so the energy Hessian in
/// these coordinates has spectrum inside `(−1/(2c₀), −2c₀)`.
#[derive(Debug, Clone)]
pub struct UnstableBasis {
    pub sections: Vec<Section>,
    pub c0: f64,
}

fn warn_if_not_harmonic(u: &TorusMap, tol: f64, strict: bool) -> Result<()> {
    let sup = u.tension_sup();
    if sup > tol {
        if strict {
            return Err(Error::NotHarmonic { sup, tol });
        }
        log::warn!("second-variation input has tension sup {sup:.3e} > {tol:.3e}");
    }
    Ok(())
}

/// Nodewise `HessΠ_u(X, Y)` as a raw value vector.
fn hess_pair_values(u: &TorusMap, xv: &[f64], yv: &[f64]) -> Vec<f64> {
    let nd = u.dim();
    let nodes = u.nodes();
    let mut h = vec![0.0; xv.len()];
    for off in (0..xv.len()).step_by(nd) {
        u.target().hess_pair_into(
            &nodes[off..off + nd],
            &xv[off..off + nd],
            &yv[off..off + nd],
            &mut h[off..off + nd],
        );
    }
    h
}

fn index_form_values(u: &TorusMap, xv: &[f64], yv: &[f64]) -> f64 {
    let h = hess_pair_values(u, xv, yv);
    u.energy_bilinear(xv, yv) + u.energy_bilinear(u.nodes(), &h)
}

/// Second variation `I(X, Y) = d²/ds dt E(Π(u + sX + tY))|₀` for
/// tangential sections; symmetric and bilinear.
pub fn index_form(u: &TorusMap, x: &Section, y: &Section) -> Result<f64> {
    x.check_tangential(u)?;
    y.check_tangential(u)?;
    warn_if_not_harmonic(u, HARMONIC_TOL, false)?;
    Ok(index_form_values(u, &x.values, &y.values))
}

/// `J(V)` on raw values: `P(−Δ_h V) − M_{Δ_h u}(V)` with the pair-Hessian
/// adjoint `M`; satisfies `⟨J V, W⟩_{L²} = I(V, W)` exactly for tangential
/// `V, W`.
fn jacobi_values(u: &TorusMap, lap_u: &[f64], vv: &[f64]) -> Vec<f64> {
    let nd = u.dim();
    let nodes = u.nodes();
    let lap_v = u.laplacian_of(vv);
    let mut out = vec![0.0; vv.len()];
    let mut adj = vec![0.0; nd];
    let mut neg = vec![0.0; nd];
    for off in (0..vv.len()).step_by(nd) {
        let un = &nodes[off..off + nd];
        for k in 0..nd {
            neg[k] = -lap_v[off + k];
        }
        u.target().tangent_project_into(un, &neg, &mut out[off..off + nd]);
        u.target().hess_pair_adjoint(un, &lap_u[off..off + nd], &vv[off..off + nd], &mut adj);
        for k in 0..nd {
            out[off + k] -= adj[k];
        }
    }
    out
}

/// Jacobi operator applied to a tangential section.
pub fn jacobi_apply(u: &TorusMap, v: &Section) -> Result<Section> {
    v.check_tangential(u)?;
    warn_if_not_harmonic(u, HARMONIC_TOL, false)?;
    let lap_u = u.laplacian();
    Ok(Section { flavor: SectionFlavor::Tangential, values: jacobi_values(u, &lap_u, &v.values) })
}

/// The spectral problem in nodal tangent-frame coordinates. The frames are
/// orthonormal per node, so the L² Gram matrix is `w·Id` and the
/// generalized problem reduces to a standard symmetric one.
struct FrameOperator<'a> {
    u: &'a TorusMap,
    lap_u: Vec<f64>,
    /// `n_nodes × dim_m` frame vectors, each of length `nd`, flattened.
    frames: Vec<f64>,
    n_nodes: usize,
    dim_m: usize,
    nd: usize,
}

impl<'a> FrameOperator<'a> {
    fn new(u: &'a TorusMap) -> Self {
        let (na, nb) = u.grid();
        let n_nodes = na * nb;
        let nd = u.dim();
        let dim_m = u.target().dim();
        let mut frames = vec![0.0; n_nodes * dim_m * nd];
        for p in 0..n_nodes {
            let off = p * nd;
            let fr = u.target().tangent_frame(&u.nodes()[off..off + nd]);
            for (alpha, f) in fr.iter().enumerate() {
                let dst = (p * dim_m + alpha) * nd;
                frames[dst..dst + nd].copy_from_slice(f);
            }
        }
        FrameOperator { u, lap_u: u.laplacian(), frames, n_nodes, dim_m, nd }
    }

    fn dim(&self) -> usize {
        self.n_nodes * self.dim_m
    }

    fn coeffs_to_values(&self, c: &[f64]) -> Vec<f64> {
        let mut v = vec![0.0; self.n_nodes * self.nd];
        for p in 0..self.n_nodes {
            for alpha in 0..self.dim_m {
                let s = c[p * self.dim_m + alpha];
                if s == 0.0 {
                    continue;
                }
                let src = (p * self.dim_m + alpha) * self.nd;
                for k in 0..self.nd {
                    v[p * self.nd + k] += s * self.frames[src + k];
                }
            }
        }
        v
    }

    fn values_to_coeffs(&self, v: &[f64]) -> Vec<f64> {
        let mut c = vec![0.0; self.dim()];
        for p in 0..self.n_nodes {
            for alpha in 0..self.dim_m {
                let src = (p * self.dim_m + alpha) * self.nd;
                let mut acc = 0.0;
                for k in 0..self.nd {
                    acc += v[p * self.nd + k] * self.frames[src + k];
                }
                c[p * self.dim_m + alpha] = acc;
            }
        }
        c
    }

    /// The symmetric matrix action `c ↦ A c` with
    /// `A = (frames)ᵀ J (frames)`; eigenvalues of `A` are the generalized
    /// eigenvalues of the index form against the L² Gram matrix.
    fn apply(&self, c: &[f64]) -> Vec<f64> {
        let v = self.coeffs_to_values(c);
        let jv = jacobi_values(self.u, &self.lap_u, &v);
        self.values_to_coeffs(&jv)
    }
}

struct EigOut {
    /// Ascending resolved eigenvalues.
    evals: Vec<f64>,
    /// Coefficient vectors for the lowest resolved eigenvalues (at most
    /// `KEEP_VECTORS` on the dense path).
    vecs: Vec<Vec<f64>>,
    /// Spectral scale used for `λ_tol`.
    scale: f64,
    dimension: usize,
}

const KEEP_VECTORS: usize = 64;

fn dense_eigensolve(op: &FrameOperator) -> Result<EigOut> {
    let dim = op.dim();
    let mut cols = Vec::with_capacity(dim);
    let mut e = vec![0.0; dim];
    for j in 0..dim {
        e[j] = 1.0;
        cols.push(op.apply(&e));
        e[j] = 0.0;
    }
    let a = faer::Mat::from_fn(dim, dim, |i, j| 0.5 * (cols[j][i] + cols[i][j]));
    let evd = a
        .self_adjoint_eigen(Side::Lower)
        .map_err(|e| Error::EigFailure(format!("dense solve failed: {e:?}")))?;
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&i, &j| evd.S()[i].partial_cmp(&evd.S()[j]).unwrap());
    let evals: Vec<f64> = order.iter().map(|&i| evd.S()[i]).collect();
    let keep = KEEP_VECTORS.min(dim);
    let vecs: Vec<Vec<f64>> = order[..keep]
        .iter()
        .map(|&col| (0..dim).map(|r| evd.U()[(r, col)]).collect())
        .collect();
    let scale = evals
        .first()
        .map(|lo| lo.abs())
        .unwrap_or(0.0)
        .max(evals.last().map(|hi| hi.abs()).unwrap_or(0.0));
    Ok(EigOut { evals, vecs, scale, dimension: dim })
}

fn mgs(cols: &mut [Vec<f64>]) {
    for i in 0..cols.len() {
        for _pass in 0..2 {
            for j in 0..i {
                let d: f64 = cols[i].iter().zip(&cols[j]).map(|(a, b)| a * b).sum();
                let (head, tail) = cols.split_at_mut(i);
                for (x, y) in tail[0].iter_mut().zip(&head[j]) {
                    *x -= d * y;
                }
            }
        }
        let n: f64 = cols[i].iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 0.0 {
            for x in cols[i].iter_mut() {
                *x /= n;
            }
        }
    }
}

/// Conjugate gradients for the shifted positive-definite operator
/// `x ↦ A x − σ x` (σ strictly below the spectrum).
fn cg_shifted(
    op: &FrameOperator,
    sigma: f64,
    rhs: &[f64],
    max_iters: usize,
    tol_rel: f64,
) -> Result<Vec<f64>> {
    let dim = rhs.len();
    let mut x = vec![0.0; dim];
    let mut r = rhs.to_vec();
    let mut p = r.clone();
    let rhs_norm: f64 = rhs.iter().map(|v| v * v).sum::<f64>().sqrt();
    if rhs_norm == 0.0 {
        return Ok(x);
    }
    let mut rr: f64 = r.iter().map(|v| v * v).sum();
    for _ in 0..max_iters {
        let ap_raw = op.apply(&p);
        let ap: Vec<f64> = ap_raw.iter().zip(&p).map(|(a, pv)| a - sigma * pv).collect();
        let pap: f64 = p.iter().zip(&ap).map(|(a, b)| a * b).sum();
        if pap <= 0.0 {
            return Err(Error::EigFailure(format!(
                "shifted operator lost definiteness (pᵀ(A−σ)p = {pap:.3e}); bad shift {sigma}"
            )));
        }
        let alpha = rr / pap;
        for i in 0..dim {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        let rr_new: f64 = r.iter().map(|v| v * v).sum();
        if rr_new.sqrt() <= tol_rel * rhs_norm {
            return Ok(x);
        }
        let beta = rr_new / rr;
        rr = rr_new;
        for i in 0..dim {
            p[i] = r[i] + beta * p[i];
        }
    }
    Err(Error::EigFailure(format!(
        "inner CG failed to reach {tol_rel:.1e} within {max_iters} iterations"
    )))
}

pub(crate) fn small_symmetric_eigen(b: &[Vec<f64>]) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    let q = b.len();
    let m = faer::Mat::from_fn(q, q, |i, j| 0.5 * (b[i][j] + b[j][i]));
    let evd = m
        .self_adjoint_eigen(Side::Lower)
        .map_err(|e| Error::EigFailure(format!("projected solve failed: {e:?}")))?;
    let mut order: Vec<usize> = (0..q).collect();
    order.sort_by(|&i, &j| evd.S()[i].partial_cmp(&evd.S()[j]).unwrap());
    let evals: Vec<f64> = order.iter().map(|&i| evd.S()[i]).collect();
    let vecs: Vec<Vec<f64>> =
        order.iter().map(|&col| (0..q).map(|r| evd.U()[(r, col)]).collect()).collect();
    Ok((evals, vecs))
}

/// Shift-invert subspace iteration resolving the negative + null cluster
/// of the spectrum without assembling the matrix: with σ strictly below
/// the spectrum, `(A − σ)⁻¹` maps the most-negative eigenvalues to the
/// largest ones and the null cluster to the next tier, so block power
/// iteration with inner CG solves converges both.
fn iterative_eigensolve(op: &FrameOperator, opts: &IndexOptions) -> Result<EigOut> {
    let dim = op.dim();
    let q = opts.subspace.min(dim);
    let mut rng = rng_from_seed(opts.seed);

    // Upper spectral bound by power iteration.
    let mut v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut lam_max = 1.0;
    for _ in 0..80 {
        let av = op.apply(&v);
        let n: f64 = av.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n == 0.0 {
            break;
        }
        lam_max = n;
        v = av.into_iter().map(|x| x / n).collect();
    }
    let b = 1.1 * lam_max + 1.0;
    // Lower bound via the reflected operator b·I − A (its top eigenvalue
    // is b − λ_min).
    let mut w: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut refl_max = 1.0;
    for _ in 0..80 {
        let aw = op.apply(&w);
        let bw: Vec<f64> = w.iter().zip(&aw).map(|(x, a)| b * x - a).collect();
        let n: f64 = bw.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n == 0.0 {
            break;
        }
        refl_max = n;
        w = bw.into_iter().map(|x| x / n).collect();
    }
    let lam_min = b - refl_max;
    let sigma = lam_min - 0.5 * lam_min.abs() - 1.0;

    let scale = b;
    let lambda_tol = opts.lambda_tol.unwrap_or(LAMBDA_TOL_FACTOR * scale);
    let res_tol = 0.1 * lambda_tol;
    let sentinel = 10.0 * lambda_tol;

    let mut x: Vec<Vec<f64>> =
        (0..q).map(|_| (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
    mgs(&mut x);

    let mut prev_counts: Option<(usize, usize)> = None;
    for _sweep in 0..opts.max_sweeps {
        for col in x.iter_mut() {
            *col = cg_shifted(op, sigma, col, opts.cg_max_iters, 1e-10)?;
        }
        mgs(&mut x);
        mgs(&mut x);
        let ax: Vec<Vec<f64>> = x.iter().map(|c| op.apply(c)).collect();
        let proj: Vec<Vec<f64>> = (0..q)
            .map(|i| (0..q).map(|j| x[i].iter().zip(&ax[j]).map(|(a, c)| a * c).sum()).collect())
            .collect();
        let (theta, u_small) = small_symmetric_eigen(&proj)?;
        // Rotate the block and its image.
        let rotate = |block: &[Vec<f64>]| -> Vec<Vec<f64>> {
            (0..q)
                .map(|new| {
                    let mut col = vec![0.0; dim];
                    for old in 0..q {
                        let s = u_small[new][old];
                        for (dst, src) in col.iter_mut().zip(&block[old]) {
                            *dst += s * src;
                        }
                    }
                    col
                })
                .collect()
        };
        let xr = rotate(&x);
        let axr = rotate(&ax);
        let residuals: Vec<f64> = (0..q)
            .map(|i| {
                axr[i]
                    .iter()
                    .zip(&xr[i])
                    .map(|(a, xv)| (a - theta[i] * xv) * (a - theta[i] * xv))
                    .sum::<f64>()
                    .sqrt()
            })
            .collect();
        x = xr;

        let low: Vec<usize> = (0..q).filter(|&i| theta[i] <= sentinel).collect();
        let all_low_converged = low.iter().all(|&i| residuals[i] <= res_tol);
        let index = low.iter().filter(|&&i| theta[i] < -lambda_tol).count();
        let nullity = low.iter().filter(|&&i| theta[i].abs() <= lambda_tol).count();
        let saturated = low.len() == q;
        if all_low_converged && !saturated && prev_counts == Some((index, nullity)) {
            let evals: Vec<f64> = low.iter().map(|&i| theta[i]).collect();
            let vecs: Vec<Vec<f64>> = low.iter().map(|&i| std::mem::take(&mut x[i])).collect();
            return Ok(EigOut { evals, vecs, scale, dimension: dim });
        }
        if saturated {
            return Err(Error::EigFailure(format!(
                "subspace of dimension {q} saturated by the low cluster; increase `subspace`"
            )));
        }
        prev_counts = Some((index, nullity));
    }
    Err(Error::EigFailure(format!(
        "low cluster not resolved within {} filter sweeps",
        opts.max_sweeps
    )))
}

fn eigensolve(u: &TorusMap, opts: &IndexOptions) -> Result<EigOut> {
    let op = FrameOperator::new(u);
    let dense = match opts.mode {
        EigMode::Dense => true,
        EigMode::Iterative => false,
        EigMode::Auto => op.n_nodes <= opts.dense_node_limit,
    };
    if dense {
        dense_eigensolve(&op)
    } else {
        iterative_eigensolve(&op, opts)
    }
}

fn counts(evals: &[f64], lambda_tol: f64) -> (usize, usize) {
    let index = evals.iter().filter(|&&l| l < -lambda_tol).count();
    let nullity = evals.iter().filter(|&&l| l.abs() <= lambda_tol).count();
    (index, nullity)
}

/// Morse index and nullity of the energy at a harmonic map.
pub fn morse_index(u: &TorusMap, opts: &IndexOptions) -> Result<IndexReport> {
    warn_if_not_harmonic(u, opts.harmonic_tol, opts.strict_harmonic)?;
    let out = eigensolve(u, opts)?;
    let lambda_tol = opts.lambda_tol.unwrap_or(LAMBDA_TOL_FACTOR * out.scale);
    let (index, nullity) = counts(&out.evals, lambda_tol);
    Ok(IndexReport {
        computed: out.evals.len(),
        eigenvalues: out.evals,
        index,
        nullity,
        lambda_tol,
        dimension: out.dimension,
    })
}

/// The `k` most-negative eigensections, rescaled so the coordinate Hessian
/// of `s ↦ E(Π(u + Σ sᵢ Xᵢ))` at 0 has spectrum inside `(−1/(2c₀), −2c₀)`,
/// with `c₀` maximal (bracketing search) minus a safety factor.
pub fn unstable_basis(u: &TorusMap, k: usize, opts: &IndexOptions) -> Result<UnstableBasis> {
    if k == 0 {
        return Ok(UnstableBasis { sections: Vec::new(), c0: 1.0 });
    }
    warn_if_not_harmonic(u, opts.harmonic_tol, opts.strict_harmonic)?;
    let out = eigensolve(u, opts)?;
    let lambda_tol = opts.lambda_tol.unwrap_or(LAMBDA_TOL_FACTOR * out.scale);
    let (index, _) = counts(&out.evals, lambda_tol);
    if index < k {
        return Err(Error::InsufficientIndex { found: index, needed: k });
    }
    let op = FrameOperator::new(u);
    let w = u.weight();
    // L²-normalized eigensections.
    let phis: Vec<Vec<f64>> = out.vecs[..k]
        .iter()
        .map(|c| {
            let mut v = op.coeffs_to_values(c);
            let inv = 1.0 / w.sqrt();
            for x in v.iter_mut() {
                *x *= inv;
            }
            v
        })
        .collect();
    let form: Vec<Vec<f64>> =
        (0..k).map(|i| (0..k).map(|j| index_form_values(u, &phis[i], &phis[j])).collect()).collect();
    for i in 0..k {
        if form[i][i] >= 0.0 {
            return Err(Error::EigFailure(format!(
                "eigensection {i} is not a decrease direction (I = {:.3e})",
                form[i][i]
            )));
        }
    }
    // Rescale to unit diagonal and re-read the Hessian spectrum.
    let scales: Vec<f64> = (0..k).map(|i| 1.0 / form[i][i].abs().sqrt()).collect();
    let hess: Vec<Vec<f64>> =
        (0..k).map(|i| (0..k).map(|j| form[i][j] * scales[i] * scales[j]).collect()).collect();
    let (mu, _) = small_symmetric_eigen(&hess)?;
    if mu.last().map(|m| *m >= 0.0).unwrap_or(true) {
        return Err(Error::EigFailure("rescaled Hessian is not negative definite".into()));
    }
    // Largest c₀ with every μ inside (−1/(2c₀), −2c₀).
    let band_ok = |c0: f64| mu.iter().all(|m| *m > -1.0 / (2.0 * c0) && *m < -2.0 * c0);
    let mut lo = 1e-12;
    let mut hi = 1.0;
    if !band_ok(lo) {
        return Err(Error::EigFailure("Hessian spectrum admits no band constant".into()));
    }
    for _ in 0..80 {
        let mid = 0.5 * (lo + hi);
        if band_ok(mid) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let c0 = (0.999 * lo).clamp(1e-12, 1.0 - 1e-12);
    let sections = phis
        .into_iter()
        .zip(&scales)
        .map(|(mut v, s)| {
            for x in v.iter_mut() {
                *x *= s;
            }
            Section { flavor: SectionFlavor::Tangential, values: v }
        })
        .collect();
    Ok(UnstableBasis { sections, c0 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::moduli::Mark;
    use crate::targets::TargetManifold;
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

    fn great_circle(n: usize) -> TorusMap {
        TorusMap::from_fn(mark_i(), TargetManifold::unit_s3(), n, n, |a, _| {
            vec![(2.0 * PI * a).cos(), (2.0 * PI * a).sin(), 0.0, 0.0]
        })
        .unwrap()
    }

    fn product_identity(n: usize) -> TorusMap {
        TorusMap::from_fn(mark_i(), TargetManifold::CliffordProduct { r1: 1.0, r2: 1.0 }, n, n, |a, b| {
            vec![
                (2.0 * PI * a).cos(),
                (2.0 * PI * a).sin(),
                (2.0 * PI * b).cos(),
                (2.0 * PI * b).sin(),
            ]
        })
        .unwrap()
    }

    fn random_tangential(u: &TorusMap, seed: u64) -> Section {
        let mut rng = rng_from_seed(seed);
        let amb = Section {
            flavor: SectionFlavor::Ambient,
            values: (0..u.nodes().len()).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        };
        amb.tangentialize(u)
    }

    #[test]
    fn form_is_symmetric_bilinear_and_vanishes_at_zero() {
        let u = clifford(16);
        let x = random_tangential(&u, 1);
        let y = random_tangential(&u, 2);
        let z = random_tangential(&u, 3);
        let ixy = index_form(&u, &x, &y).unwrap();
        let iyx = index_form(&u, &y, &x).unwrap();
        let scale = ixy.abs().max(1.0);
        assert!((ixy - iyx).abs() <= 1e-12 * scale);
        // Bilinearity.
        let mut combo = x.clone();
        combo.scale(0.7);
        combo.axpy(-1.3, &y);
        let lhs = index_form(&u, &combo, &z).unwrap();
        let rhs = 0.7 * index_form(&u, &x, &z).unwrap() - 1.3 * index_form(&u, &y, &z).unwrap();
        assert!((lhs - rhs).abs() <= 1e-9 * rhs.abs().max(1.0));
        let zero = Section::zeros(&u, SectionFlavor::Tangential);
        assert_eq!(index_form(&u, &zero, &y).unwrap(), 0.0);
    }

    #[test]
    fn flat_target_form_is_positive_semidefinite() {
        let u = product_identity(16);
        assert!(u.tension_sup() <= 1e-9);
        for seed in 0..10 {
            let x = random_tangential(&u, 100 + seed);
            let i = index_form(&u, &x, &x).unwrap();
            assert!(i >= -1e-9 * (1.0 + i.abs()), "I(X,X) = {i} < 0 on a flat target");
        }
        // Constant map: constant sections are null, generic ones positive.
        let c = TorusMap::from_fn(
            mark_i(),
            TargetManifold::CliffordProduct { r1: 1.0, r2: 1.0 },
            12,
            12,
            |_, _| vec![1.0, 0.0, 1.0, 0.0],
        )
        .unwrap();
        let constant = Section::from_fn(&c, SectionFlavor::Tangential, |_, _| {
            vec![0.0, 1.0, 0.0, -0.5]
        })
        .unwrap();
        let i0 = index_form(&c, &constant, &constant).unwrap();
        assert!(i0.abs() <= 1e-12);
        let x = random_tangential(&c, 7);
        assert!(index_form(&c, &x, &x).unwrap() > 0.0);
    }

    #[test]
    fn form_matches_fd_second_derivative() {
        let u = clifford(24);
        for seed in 0..5 {
            let x = random_tangential(&u, 200 + seed);
            let (d1, d2, _) = u.variation_derivatives(&x, &x).unwrap();
            let i = index_form(&u, &x, &x).unwrap();
            assert!(d1.abs() <= 1e-6 * u.energy());
            assert!(
                (d2 - i).abs() <= 1e-4 * i.abs().max(1e-6),
                "FD {d2} vs form {i}"
            );
        }
    }

    #[test]
    fn operator_is_dual_to_the_form() {
        let u = clifford(16);
        for seed in 0..5 {
            let v = random_tangential(&u, 300 + seed);
            let w = random_tangential(&u, 400 + seed);
            let jv = jacobi_apply(&u, &v).unwrap();
            let lhs = jv.l2_inner(&w, &u);
            let rhs = index_form(&u, &v, &w).unwrap();
            assert!(
                (lhs - rhs).abs() <= 1e-10 * rhs.abs().max(1.0),
                "⟨J V, W⟩ = {lhs} vs I(V,W) = {rhs}"
            );
        }
        // Linearity to rounding.
        let v = random_tangential(&u, 310);
        let w = random_tangential(&u, 410);
        let mut combo = v.clone();
        combo.scale(2.0);
        combo.axpy(3.0, &w);
        let mut jc = jacobi_apply(&u, &v).unwrap();
        jc.scale(2.0);
        jc.axpy(3.0, &jacobi_apply(&u, &w).unwrap());
        let direct = jacobi_apply(&u, &combo).unwrap();
        for (a, b) in jc.values.iter().zip(&direct.values) {
            assert!((a - b).abs() <= 1e-10);
        }
        // Constant sections on the constant flat-target map are in the kernel.
        let c = TorusMap::from_fn(
            mark_i(),
            TargetManifold::CliffordProduct { r1: 1.0, r2: 1.0 },
            12,
            12,
            |_, _| vec![1.0, 0.0, 0.0, 1.0],
        )
        .unwrap();
        let constant = Section::from_fn(&c, SectionFlavor::Tangential, |_, _| {
            vec![0.0, 1.0, 0.0, 0.0]
        })
        .unwrap();
        let jc = jacobi_apply(&c, &constant).unwrap();
        assert!(jc.sup_norm(c.dim()) <= 1e-12);
    }

    #[test]
    fn constant_product_map_has_index_zero_nullity_dim_m() {
        let c = TorusMap::from_fn(
            mark_i(),
            TargetManifold::CliffordProduct { r1: 1.0, r2: 1.0 },
            12,
            12,
            |_, _| vec![1.0, 0.0, 0.0, 1.0],
        )
        .unwrap();
        let report = morse_index(&c, &IndexOptions::default()).unwrap();
        assert_eq!(report.index, 0);
        assert_eq!(report.nullity, 2);
        assert_eq!(report.dimension, 12 * 12 * 2);
        assert_eq!(report.computed, report.dimension);
        for w in report.eigenvalues.windows(2) {
            assert!(w[0] <= w[1]);
        }
    }

    #[test]
    fn great_circle_is_unstable() {
        let u = great_circle(16);
        // Explicit decrease direction: the constant field toward a pole
        // orthogonal to the circle's plane (tangential since ⟨e₄, u⟩ = 0).
        let shrink = Section::from_fn(&u, SectionFlavor::Tangential, |_, _| {
            vec![0.0, 0.0, 0.0, 1.0]
        })
        .unwrap();
        let i = index_form(&u, &shrink, &shrink).unwrap();
        assert!(i < 0.0, "shrink direction should decrease energy, I = {i}");
        let report = morse_index(&u, &IndexOptions::default()).unwrap();
        assert!(report.index >= 1);
        // Rayleigh bound: the lowest eigenvalue is at most the quotient of
        // the explicit direction.
        let quot = i / shrink.l2_norm_sq(&u);
        assert!(report.eigenvalues[0] <= quot + 1e-9 * quot.abs());
    }

    #[test]
    fn clifford_counts_are_grid_stable() {
        let r12 = morse_index(&clifford(12), &IndexOptions::default()).unwrap();
        let r16 = morse_index(&clifford(16), &IndexOptions::default()).unwrap();
        assert_eq!(r12.index, r16.index, "index drifted between grids");
        assert_eq!(r12.nullity, r16.nullity, "nullity drifted between grids");
        assert!(r12.index >= 1);
        assert!(r12.nullity >= 6, "product-torus isometry orbit gives ≥ 6 null modes");
    }

    #[test]
    fn iterative_path_matches_dense() {
        let u = clifford(16);
        let dense = morse_index(&u, &IndexOptions { mode: EigMode::Dense, ..Default::default() })
            .unwrap();
        let iter = morse_index(
            &u,
            &IndexOptions { mode: EigMode::Iterative, ..Default::default() },
        )
        .unwrap();
        assert_eq!(dense.index, iter.index);
        assert_eq!(dense.nullity, iter.nullity);
        let m = dense.index + dense.nullity;
        assert!(iter.eigenvalues.len() >= m);
        for i in 0..m {
            // Ritz values carry at most a residual-sized error; compare at
            // the λ_tol scale that separates the count buckets.
            let tol = 1e-3 * dense.eigenvalues[i].abs().max(1.0);
            assert!(
                (dense.eigenvalues[i] - iter.eigenvalues[i]).abs() <= tol,
                "eigenvalue {i}: dense {} vs iterative {}",
                dense.eigenvalues[i],
                iter.eigenvalues[i]
            );
        }
    }

    #[test]
    fn unstable_basis_is_normalized_into_the_band() {
        let u = great_circle(16);
        let report = morse_index(&u, &IndexOptions::default()).unwrap();
        let k = report.index.min(2).max(1);
        let basis = unstable_basis(&u, k, &IndexOptions::default()).unwrap();
        assert_eq!(basis.sections.len(), k);
        assert!(basis.c0 > 0.0 && basis.c0 < 1.0);
        for x in &basis.sections {
            let (_, d2, _) = u.variation_derivatives(x, x).unwrap();
            let lo = -1.0 / (2.0 * basis.c0) - 5e-4;
            let hi = -2.0 * basis.c0 + 5e-4;
            assert!(
                d2 > lo && d2 < hi,
                "FD Hessian {d2} outside band ({lo}, {hi}) at c0 = {}",
                basis.c0
            );
        }
        // Contract edges.
        let empty = unstable_basis(&u, 0, &IndexOptions::default()).unwrap();
        assert!(empty.sections.is_empty());
        assert_eq!(empty.c0, 1.0);
        assert!(matches!(
            unstable_basis(&u, report.index + 1, &IndexOptions::default()),
            Err(Error::InsufficientIndex { .. })
        ));
    }
}
