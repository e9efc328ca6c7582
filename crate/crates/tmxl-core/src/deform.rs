//! Pushing one-parameter families off concave energy peaks.
//!
//! The coefficient ball of a transplanted frame ([`SurrogatePack`]) carries
//! the flow `ṡ = −(1 − |s|²)∇E(s)`: energy decreases along every orbit, the
//! unit sphere is invariant, and any start away from the interior maximum
//! eventually undercuts the center energy by a fixed fraction of the
//! concavity constant. [`ball_flow`] integrates that flow, [`select_configs`]
//! certifies how close each sample of a family sits to a bubble collection
//! and stitches neighbouring certificates together, and [`deform_sweepout`]
//! combines the two: it perturbs the close-by samples along a circle in
//! coefficient space chosen away from the maximizers, lets the flow carry
//! them downhill, and reports the achieved separation. [`homotopy_check`]
//! audits that the result stays nodewise deformable back onto the input.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bubbles::{
    bubble_defect, fd_gradient, find_config, transplant, BubbleCollection, BubbleConfig, Mobius,
    SurrogatePack, TransplantBases, TransplantOptions,
};
use crate::error::{Error, Result};
use crate::fields::TorusMap;
use crate::num::{dot, norm};
use crate::solver::{Ball, Sweepout};

// ---------------------------------------------------------------------------
// The ball flow
// ---------------------------------------------------------------------------

/// The energy functional a ball flow descends.
pub enum FlowEnergy<'a> {
    /// Restricted energy of a transplanted frame over a concrete map:
    /// `E(s) = E(Π(u + Σ sᵢ X̃ᵢ))`, with finite-difference gradients.
    Surrogate { pack: &'a SurrogatePack, map: &'a TorusMap },
    /// The radial paraboloid `E(s) = peak − curvature·|s|²` with closed-form
    /// gradients; the flow then solves a scalar ODE exactly, which makes
    /// this the integrator's reference case.
    Quadratic { k: usize, peak: f64, curvature: f64 },
}

impl FlowEnergy<'_> {
    /// Coefficient dimension.
    pub fn dim(&self) -> usize {
        match self {
            FlowEnergy::Surrogate { pack, .. } => pack.k,
            FlowEnergy::Quadratic { k, .. } => *k,
        }
    }

    /// Evaluate the energy at a coefficient point.
    pub fn eval(&self, s: &[f64]) -> Result<f64> {
        match self {
            FlowEnergy::Surrogate { pack, map } => pack.energy_at(map, s),
            FlowEnergy::Quadratic { peak, curvature, .. } => Ok(peak - curvature * dot(s, s)),
        }
    }

    fn grad(&self, s: &[f64], fd: f64) -> Result<Vec<f64>> {
        match self {
            FlowEnergy::Surrogate { pack, map } => {
                let mut f = |x: &[f64]| pack.energy_at(map, x);
                fd_gradient(&mut f, s, fd)
            }
            FlowEnergy::Quadratic { curvature, .. } => {
                Ok(s.iter().map(|x| -2.0 * curvature * x).collect())
            }
        }
    }
}

/// Integrator knobs for [`ball_flow`].
#[derive(Debug, Clone)]
pub struct FlowOptions {
    /// Initial step size.
    pub step: f64,
    /// Give up ([`Error::StepUnderflow`]) once halving pushes a step below this.
    pub min_step: f64,
    /// Finite-difference step for surrogate gradients.
    pub fd_step: f64,
    /// Hard cap on accepted steps.
    pub max_steps: usize,
}

impl Default for FlowOptions {
    fn default() -> Self {
        FlowOptions { step: 0.05, min_step: 1e-9, fd_step: 1e-3, max_steps: 100_000 }
    }
}

/// An integrated orbit of the ball flow: times, coefficient states and their
/// energies, non-increasing by construction.
#[derive(Debug, Clone)]
pub struct FlowTrace {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    pub energies: Vec<f64>,
}

impl FlowTrace {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn terminal_state(&self) -> &[f64] {
        self.states.last().expect("a trace always holds its start")
    }

    pub fn terminal_energy(&self) -> f64 {
        *self.energies.last().expect("a trace always holds its start")
    }

    pub fn terminal_time(&self) -> f64 {
        *self.times.last().expect("a trace always holds its start")
    }
}

/// How far outside the closed unit ball a state may ever step.
const BALL_SLACK: f64 = 1e-12;

fn velocity(energy: &FlowEnergy, s: &[f64], fd: f64) -> Result<Vec<f64>> {
    let g = energy.grad(s, fd)?;
    let factor = -(1.0 - dot(s, s));
    Ok(g.iter().map(|x| factor * x).collect())
}

/// Advance an existing trace to `t_end` with embedded RK4 steps, halving on
/// any energy increase or ball exit.
fn integrate_to(energy: &FlowEnergy, trace: &mut FlowTrace, t_end: f64, opts: &FlowOptions) -> Result<()> {
    let mut t = trace.terminal_time();
    let mut s = trace.terminal_state().to_vec();
    let mut e = trace.terminal_energy();
    let scale = e.abs().max(1.0);
    let mut h = opts.step;
    let mut steps = 0usize;
    while t < t_end - 1e-15 {
        let h_try = h.min(t_end - t);
        let k1 = velocity(energy, &s, opts.fd_step)?;
        let s2: Vec<f64> = s.iter().zip(&k1).map(|(x, v)| x + 0.5 * h_try * v).collect();
        let k2 = velocity(energy, &s2, opts.fd_step)?;
        let s3: Vec<f64> = s.iter().zip(&k2).map(|(x, v)| x + 0.5 * h_try * v).collect();
        let k3 = velocity(energy, &s3, opts.fd_step)?;
        let s4: Vec<f64> = s.iter().zip(&k3).map(|(x, v)| x + h_try * v).collect();
        let k4 = velocity(energy, &s4, opts.fd_step)?;
        let next: Vec<f64> = (0..s.len())
            .map(|i| s[i] + h_try / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
            .collect();
        let e_next = energy.eval(&next)?;
        let inside = norm(&next) <= 1.0 + BALL_SLACK;
        if e_next <= e + 1e-12 * scale && inside {
            t += h_try;
            s = next;
            e = e_next.min(e);
            trace.times.push(t);
            trace.states.push(s.clone());
            trace.energies.push(e);
            h = (h * 2.0).min(opts.step);
            steps += 1;
            if steps > opts.max_steps {
                return Err(Error::StepUnderflow { iter: steps, energy: e });
            }
        } else {
            h *= 0.5;
            if h < opts.min_step {
                return Err(Error::StepUnderflow { iter: steps, energy: e });
            }
        }
    }
    Ok(())
}

/// Integrate `ṡ = −(1 − |s|²)∇E(s)` from `s0` for duration `t_end`.
///
/// The returned trace starts at `s0`, its energies are non-increasing, and
/// every state stays inside the closed unit ball (up to `1e−12` roundoff):
/// the factor `1 − |s|²` vanishes on the sphere, so the boundary is
/// invariant and orbits never cross it.
pub fn ball_flow(
    energy: &FlowEnergy,
    s0: &[f64],
    t_end: f64,
    opts: &FlowOptions,
) -> Result<FlowTrace> {
    if s0.len() != energy.dim() {
        return Err(Error::ConfigViolation(format!(
            "flow start has dimension {}, the energy expects {}",
            s0.len(),
            energy.dim()
        )));
    }
    let r = norm(s0);
    if r > 1.0 + BALL_SLACK {
        return Err(Error::ConfigViolation(format!(
            "flow start |s0| = {r} lies outside the closed unit ball"
        )));
    }
    if !(t_end >= 0.0) || !t_end.is_finite() {
        return Err(Error::ConfigViolation(format!("flow duration {t_end} must be finite and ≥ 0")));
    }
    let mut start = s0.to_vec();
    if r > 1.0 {
        for x in &mut start {
            *x /= r;
        }
    }
    let e0 = energy.eval(&start)?;
    let mut trace = FlowTrace { times: vec![0.0], states: vec![start], energies: vec![e0] };
    integrate_to(energy, &mut trace, t_end, opts)?;
    Ok(trace)
}

/// Flow from `s0` and keep doubling the duration until the terminal energy
/// undercuts `E(0) − c0/10`; returns the achieved duration and full trace.
///
/// Termination is guaranteed when the energy is concave with constant `c0`
/// over the ball, the maximizer sits within `c0/√10` of the origin and
/// `s0` keeps a positive distance from it: the orbit then drifts to the unit
/// sphere where the energy sits at least `c0(1 − |m|)²/2` below the maximum,
/// which is more than the requested gap.
pub fn flow_decrease_search(
    energy: &FlowEnergy,
    s0: &[f64],
    c0: f64,
    t_cap: f64,
    opts: &FlowOptions,
) -> Result<(f64, FlowTrace)> {
    if !(c0 > 0.0 && c0 < 1.0) {
        return Err(Error::ConfigViolation(format!("concavity constant {c0} must lie in (0,1)")));
    }
    let origin = vec![0.0; energy.dim()];
    let target = energy.eval(&origin)? - c0 / 10.0;
    let mut trace = ball_flow(energy, s0, 0.0, opts)?;
    let mut t = 1.0f64.min(t_cap);
    loop {
        integrate_to(energy, &mut trace, t, opts)?;
        if trace.terminal_energy() < target {
            return Ok((t, trace));
        }
        if t >= t_cap {
            return Err(Error::NonConvergence(format!(
                "flow failed to undercut the center energy by c0/10 = {:.3e} within duration {t_cap} \
                 (terminal gap {:.3e})",
                c0 / 10.0,
                trace.terminal_energy() - target
            )));
        }
        t = (2.0 * t).min(t_cap);
    }
}

// ---------------------------------------------------------------------------
// Per-sample certificates along a family
// ---------------------------------------------------------------------------

/// The data [`deform_sweepout`] runs on: per-sample certificates of
/// closeness to a collection, the marked close and very-close sample sets,
/// the modulation weights, and (once the deformation ran) the coefficient
/// path with its clearance and the flow duration.
#[derive(Debug, Clone)]
pub struct DeformPlan {
    /// Certified defect per sample (`f64::INFINITY` where no configuration
    /// was found).
    pub defects: Vec<f64>,
    /// The certifying configuration per sample, where one was found.
    pub configs: Vec<Option<BubbleConfig>>,
    /// Samples with defect below the threshold.
    pub in_eps: Vec<bool>,
    /// Samples with defect below half the threshold.
    pub in_half_eps: Vec<bool>,
    /// Modulation weight per sample: 1 on the half-threshold set, 0 outside
    /// the threshold set, ramping linearly in between within each run.
    pub cutoff: Vec<f64>,
    /// Coefficient-space anchor per deformed sample.
    pub path: Vec<Option<Vec<f64>>>,
    /// Half the minimal clearance between the anchors and the maximizers.
    pub kappa: f64,
    /// Flow duration applied to the deformed samples.
    pub flow_time: f64,
}

/// Wrap a displacement to the shortest representative in `[−½, ½)`.
fn wrap_half(x: f64) -> f64 {
    x - x.round()
}

fn lerp_config(left: &BubbleConfig, right: &BubbleConfig, theta: f64) -> Result<BubbleConfig> {
    if left.balls.len() != right.balls.len() || left.ds.len() != right.ds.len() {
        return Err(Error::ConfigViolation(
            "interpolation requires configurations of identical shape".into(),
        ));
    }
    let balls = left
        .balls
        .iter()
        .zip(&right.balls)
        .map(|(a, b)| Ball {
            center: (
                a.center.0 + theta * wrap_half(b.center.0 - a.center.0),
                a.center.1 + theta * wrap_half(b.center.1 - a.center.1),
            ),
            radius: a.radius + theta * (b.radius - a.radius),
        })
        .collect();
    let d0 = (
        left.d0.0 + theta * wrap_half(right.d0.0 - left.d0.0),
        left.d0.1 + theta * wrap_half(right.d0.1 - left.d0.1),
    );
    let mut ds = Vec::with_capacity(left.ds.len());
    for (a, b) in left.ds.iter().zip(&right.ds) {
        let raw = Mobius {
            a: a.a + theta * (b.a - a.a),
            b: a.b + theta * (b.b - a.b),
            c: a.c + theta * (b.c - a.c),
            d: a.d + theta * (b.d - a.d),
        };
        ds.push(raw.normalized()?);
    }
    Ok(BubbleConfig { balls, d0, ds })
}

/// Modulation weights: 1 on the half-threshold samples, 0 outside the
/// threshold set, and within each run of threshold samples a ramp that
/// balances the index distance to the nearest half-threshold sample against
/// the distance to the run's edge. Runs without any half-threshold sample
/// stay at 0.
fn cutoff_weights(in_eps: &[bool], in_half: &[bool]) -> Vec<f64> {
    let n = in_eps.len();
    let mut c = vec![0.0; n];
    let mut i = 0;
    while i < n {
        if !in_eps[i] {
            i += 1;
            continue;
        }
        let start = i;
        while i < n && in_eps[i] {
            i += 1;
        }
        let end = i; // run is [start, end)
        let halves: Vec<usize> = (start..end).filter(|&j| in_half[j]).collect();
        if halves.is_empty() {
            continue;
        }
        for j in start..end {
            if in_half[j] {
                c[j] = 1.0;
            } else {
                let dh = halves.iter().map(|&h| h.abs_diff(j)).min().expect("nonempty") as f64;
                let de = (j - start + 1).min(end - j) as f64;
                c[j] = de / (de + dh);
            }
        }
    }
    c
}

/// Certify every sample of the family against the collection, mark the
/// threshold and half-threshold sets, and audit that neighbouring
/// certificates interpolate: for each adjacent pair of marked samples the
/// halfway configuration (balls, shifts and Möbius parameters interpolated
/// linearly, the latter re-normalized) must still certify both neighbours
/// below the threshold, otherwise [`Error::InterpolationGap`] is returned.
pub fn select_configs(sw: &Sweepout, coll: &BubbleCollection, eps: f64) -> Result<DeformPlan> {
    if !(eps > 0.0) || !eps.is_finite() {
        return Err(Error::ConfigViolation(format!("threshold {eps} must be positive")));
    }
    let n = sw.len();
    let mut defects = vec![f64::INFINITY; n];
    let mut configs: Vec<Option<BubbleConfig>> = vec![None; n];
    for (j, (_, u)) in sw.samples().iter().enumerate() {
        match find_config(u, coll) {
            Ok(cfg) => match bubble_defect(u, coll, &cfg) {
                Ok(d) => {
                    defects[j] = d;
                    configs[j] = Some(cfg);
                }
                Err(_) => {}
            },
            Err(_) => {}
        }
    }
    let in_eps: Vec<bool> = defects.iter().map(|d| *d < eps).collect();
    let in_half_eps: Vec<bool> = defects.iter().map(|d| *d < 0.5 * eps).collect();

    for j in 0..n.saturating_sub(1) {
        if !(in_eps[j] && in_eps[j + 1]) {
            continue;
        }
        let left = configs[j].as_ref().expect("marked samples carry configs");
        let right = configs[j + 1].as_ref().expect("marked samples carry configs");
        let mid = match lerp_config(left, right, 0.5) {
            Ok(cfg) => cfg,
            Err(_) => {
                return Err(Error::InterpolationGap {
                    left: j,
                    right: j + 1,
                    defect: f64::INFINITY,
                    threshold: eps,
                });
            }
        };
        for idx in [j, j + 1] {
            let u = &sw.samples()[idx].1;
            let d = match bubble_defect(u, coll, &mid) {
                Ok(d) => d,
                Err(_) => f64::INFINITY,
            };
            if d >= eps {
                return Err(Error::InterpolationGap {
                    left: j,
                    right: j + 1,
                    defect: d,
                    threshold: eps,
                });
            }
        }
    }

    let cutoff = cutoff_weights(&in_eps, &in_half_eps);
    Ok(DeformPlan {
        defects,
        configs,
        in_eps,
        in_half_eps,
        cutoff,
        path: vec![None; n],
        kappa: 0.0,
        flow_time: 0.0,
    })
}

// ---------------------------------------------------------------------------
// The sweepout deformation
// ---------------------------------------------------------------------------

/// Knobs for [`deform_sweepout`].
#[derive(Debug, Clone)]
pub struct DeformOptions {
    /// Flow integrator settings.
    pub flow: FlowOptions,
    /// Settings forwarded to the per-sample transplant (the admission
    /// threshold is raised to the deformation threshold automatically).
    pub transplant: TransplantOptions,
    /// Phase candidates tried when placing the coefficient circle away from
    /// the maximizers.
    pub phases: usize,
    /// Hard cap for the doubling search on the flow duration.
    pub flow_time_cap: f64,
    /// Flow duration used when no sample qualifies for the guaranteed
    /// decrease search.
    pub fallback_time: f64,
}

impl Default for DeformOptions {
    fn default() -> Self {
        DeformOptions {
            flow: FlowOptions::default(),
            transplant: TransplantOptions::default(),
            phases: 64,
            flow_time_cap: 4096.0,
            fallback_time: 1.0,
        }
    }
}

/// Outcome summary of [`deform_sweepout`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DeformReport {
    pub max_energy_before: f64,
    pub max_energy_after: f64,
    /// Smallest certified defect over the output samples: the measured
    /// separation the deformation achieved.
    pub min_defect_after: f64,
    pub flow_time: f64,
    /// Half the minimal clearance between the coefficient anchors and the
    /// surrogate maximizers.
    pub kappa: f64,
    pub eps: f64,
    pub level: usize,
    pub samples_in_eps: usize,
    pub samples_deformed: usize,
}

/// Deform the family off the collection: every sample certified closer than
/// `eps` is perturbed along its transplanted frame to a point of a circle of
/// radius `1/2^{level+1}` (first two coefficients, phased to clear the
/// maximizers), modulated by the run cutoff, and carried downhill by the
/// ball flow for a shared duration found by the doubling search. Endpoints
/// are never touched; the output max energy may not exceed the input's; the
/// report carries the smallest certified defect of the output.
///
/// Requires at least two transplanted directions ([`Error::IndexTooLow`]):
/// with one direction the circle degenerates and no clearance exists.
pub fn deform_sweepout(
    sw: &Sweepout,
    coll: &BubbleCollection,
    bases: &TransplantBases,
    eps: f64,
    level: usize,
    opts: &DeformOptions,
) -> Result<(Sweepout, DeformReport)> {
    let k = bases.k();
    if k < 2 {
        return Err(Error::IndexTooLow(k));
    }
    let mut plan = select_configs(sw, coll, eps)?;
    let n = sw.len();
    let max_before = sw.max_energy();

    let marked: Vec<usize> =
        (1..n.saturating_sub(1)).filter(|&j| plan.in_eps[j] && plan.cutoff[j] > 0.0).collect();
    if marked.is_empty() {
        let report = DeformReport {
            max_energy_before: max_before,
            max_energy_after: max_before,
            min_defect_after: plan.defects.iter().cloned().fold(f64::INFINITY, f64::min),
            flow_time: 0.0,
            kappa: 0.0,
            eps,
            level,
            samples_in_eps: plan.in_eps.iter().filter(|b| **b).count(),
            samples_deformed: 0,
        };
        return Ok((sw.clone(), report));
    }

    // Transplant a frame at every marked sample.
    let mut topts = opts.transplant.clone();
    topts.eps_unstable = topts.eps_unstable.max(eps);
    let mut packs: Vec<Option<SurrogatePack>> = vec![None; n];
    for &j in &marked {
        let cfg = plan.configs[j].as_ref().expect("marked samples carry configs");
        let pack = transplant(&sw.samples()[j].1, coll, cfg, bases, &topts)?;
        packs[j] = Some(pack);
    }

    // Anchor circle in the first two coefficients, phased for clearance.
    let radius = 0.5f64.powi(level as i32 + 1);
    let count = marked.len();
    let angle = |rank: usize, phase: f64| phase + 2.0 * std::f64::consts::PI * rank as f64 / count as f64;
    let anchor = |rank: usize, phase: f64| -> Vec<f64> {
        let mut p = vec![0.0; k];
        let th = angle(rank, phase);
        p[0] = radius * th.cos();
        p[1] = radius * th.sin();
        p
    };
    let clearance = |phase: f64| -> f64 {
        marked
            .iter()
            .enumerate()
            .map(|(rank, &j)| {
                let p = anchor(rank, phase);
                let m = &packs[j].as_ref().expect("transplanted").m;
                p.iter().zip(m).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
            })
            .fold(f64::INFINITY, f64::min)
    };
    let mut best_phase = 0.0;
    let mut best_clear = f64::NEG_INFINITY;
    for i in 0..opts.phases.max(1) {
        let phase = 2.0 * std::f64::consts::PI * i as f64 / opts.phases.max(1) as f64;
        let c = clearance(phase);
        if c > best_clear {
            best_clear = c;
            best_phase = phase;
        }
    }
    if !(best_clear > 0.0) {
        return Err(Error::NoCandidate(format!(
            "no phase clears the maximizer curve at level {level}"
        )));
    }
    let kappa = 0.5 * best_clear;
    for (rank, &j) in marked.iter().enumerate() {
        plan.path[j] = Some(anchor(rank, best_phase));
    }
    plan.kappa = kappa;

    // Shared flow duration: doubling search at the hottest fully-modulated
    // sample, where the start keeps distance ≥ 2κ ≥ κ from the maximizer.
    let c0 = bases.c0();
    let search_at = marked
        .iter()
        .filter(|&&j| plan.cutoff[j] >= 1.0)
        .max_by(|&&a, &&b| {
            let ea = sw.samples()[a].1.energy();
            let eb = sw.samples()[b].1.energy();
            ea.partial_cmp(&eb).expect("finite energies")
        })
        .copied();
    let flow_time = match search_at {
        Some(j) => {
            let pack = packs[j].as_ref().expect("transplanted");
            let energy = FlowEnergy::Surrogate { pack, map: &sw.samples()[j].1 };
            let s0 = plan.path[j].as_ref().expect("anchored").clone();
            let (t, _) = flow_decrease_search(&energy, &s0, c0, opts.flow_time_cap, &opts.flow)?;
            t
        }
        None => opts.fallback_time,
    };
    plan.flow_time = flow_time;

    // Flow every marked sample from its modulated anchor and rebuild.
    let mut samples: Vec<(f64, TorusMap)> = sw.samples().to_vec();
    for (rank, &j) in marked.iter().enumerate() {
        let _ = rank;
        let pack = packs[j].as_ref().expect("transplanted");
        let u = &sw.samples()[j].1;
        let energy = FlowEnergy::Surrogate { pack, map: u };
        let s0: Vec<f64> =
            plan.path[j].as_ref().expect("anchored").iter().map(|x| x * plan.cutoff[j]).collect();
        let trace = ball_flow(&energy, &s0, flow_time, &opts.flow)?;
        samples[j].1 = pack.perturbed(u, trace.terminal_state())?;
    }
    let out = Sweepout::new(samples)?;

    let max_after = out.max_energy();
    if max_after > max_before + 1e-9 {
        return Err(Error::NonConvergence(format!(
            "deformation raised the max energy from {max_before} to {max_after}"
        )));
    }

    // Measured separation: certified defects of the output.
    let mut min_defect = f64::INFINITY;
    for j in 0..n {
        let d = if marked.contains(&j) {
            let cfg = plan.configs[j].as_ref().expect("marked samples carry configs");
            bubble_defect(&out.samples()[j].1, coll, cfg).unwrap_or(f64::INFINITY)
        } else {
            plan.defects[j]
        };
        min_defect = min_defect.min(d);
    }

    let report = DeformReport {
        max_energy_before: max_before,
        max_energy_after: max_after,
        min_defect_after: min_defect,
        flow_time,
        kappa,
        eps,
        level,
        samples_in_eps: plan.in_eps.iter().filter(|b| **b).count(),
        samples_deformed: marked.len(),
    };
    Ok((out, report))
}

// ---------------------------------------------------------------------------
// Homotopy audit
// ---------------------------------------------------------------------------

/// Fractions of the straight segment audited per node.
const SEGMENT_CHECKS: [f64; 3] = [0.25, 0.5, 0.75];

/// Audit that two families on the same sample grid deform into each other:
/// endpoints must coincide exactly and, for every sample, the straight-line
/// interpolant between the two node fields must stay within the target's
/// projection tube (so its projection is a genuine nodewise homotopy).
/// Returns `false` on endpoint mismatch; a tube violation reports the sample
/// and node through [`Error::TubeEscape`].
pub fn homotopy_check(sw: &Sweepout, sw2: &Sweepout) -> Result<bool> {
    if sw.len() != sw2.len() {
        return Err(Error::ConfigViolation(format!(
            "families sample [0,1] with {} and {} points",
            sw.len(),
            sw2.len()
        )));
    }
    for ((ta, ua), (tb, ub)) in sw.samples().iter().zip(sw2.samples()) {
        if ta != tb {
            return Err(Error::ConfigViolation(format!(
                "sample parameters differ: {ta} vs {tb}"
            )));
        }
        if ua.grid() != ub.grid() || ua.target() != ub.target() {
            return Err(Error::ConfigViolation(
                "families mix grids or targets".into(),
            ));
        }
    }
    let last = sw.len() - 1;
    for idx in [0, last] {
        if sw.samples()[idx].1.nodes() != sw2.samples()[idx].1.nodes() {
            return Ok(false);
        }
    }
    for (j, ((_, ua), (_, ub))) in sw.samples().iter().zip(sw2.samples()).enumerate() {
        let target = ua.target();
        let nd = ua.dim();
        let a = ua.nodes();
        let b = ub.nodes();
        let n_nodes = a.len() / nd;
        let bad = (0..n_nodes).into_par_iter().find_first(|&node| {
            let mut y = vec![0.0; nd];
            let mut out = vec![0.0; nd];
            for &theta in &SEGMENT_CHECKS {
                for d in 0..nd {
                    y[d] = (1.0 - theta) * a[node * nd + d] + theta * b[node * nd + d];
                }
                if target.project_into(&y, &mut out).is_err() {
                    return true;
                }
            }
            false
        });
        if let Some(node) = bad {
            return Err(Error::TubeEscape { sample: j, node });
        }
    }
    Ok(true)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bubbles::BubbleCollection;
    use crate::fixtures::{
        clifford, default_graft, glued_body_bubble, linear_sweepout, unstable_body_bubble,
        GraftSpec, UnstableOptions,
    };

    fn quadratic_radius(r0: f64, curvature: f64, t: f64) -> f64 {
        // ṙ = 2·curvature·r(1 − r²) separates to r/√(1−r²) = g·e^{2·curvature·t}.
        let g = r0 / (1.0 - r0 * r0).sqrt();
        let big = g * (2.0 * curvature * t).exp();
        big / (1.0 + big * big).sqrt()
    }

    #[test]
    fn quadratic_flow_matches_the_closed_form_radial_orbit() {
        let energy = FlowEnergy::Quadratic { k: 2, peak: 3.0, curvature: 1.0 };
        let opts = FlowOptions { step: 0.01, ..FlowOptions::default() };
        let s0 = [0.3, 0.0];
        let trace = ball_flow(&energy, &s0, 1.25, &opts).expect("flow");
        for (t, s) in trace.times.iter().zip(&trace.states) {
            let want = quadratic_radius(0.3, 1.0, *t);
            assert!(
                (norm(s) - want).abs() <= 1e-6,
                "radius {} vs closed form {want} at t = {t}",
                norm(s)
            );
        }
        for w in trace.energies.windows(2) {
            assert!(w[1] <= w[0] + 1e-12, "energy increased: {} -> {}", w[0], w[1]);
        }
        for s in &trace.states {
            assert!(norm(s) < 1.0, "orbit left the open ball");
        }
    }

    #[test]
    fn flow_is_stationary_at_the_critical_point_and_respects_the_ball() {
        let energy = FlowEnergy::Quadratic { k: 3, peak: 1.0, curvature: 2.0 };
        let opts = FlowOptions::default();
        let trace = ball_flow(&energy, &[0.0, 0.0, 0.0], 2.0, &opts).expect("flow");
        assert!(norm(trace.terminal_state()) <= 1e-12, "origin is critical for the field");

        let r = 0.999;
        let trace = ball_flow(&energy, &[r, 0.0, 0.0], 5.0, &opts).expect("flow");
        for s in &trace.states {
            assert!(norm(s) <= 1.0 + 1e-12);
        }
        assert!(norm(trace.terminal_state()) > r, "outward drift stalled");
    }

    #[test]
    fn decrease_search_terminates_for_both_clearances() {
        let energy = FlowEnergy::Quadratic { k: 2, peak: 2.0, curvature: 0.4 };
        let opts = FlowOptions::default();
        for kappa in [0.1, 0.2] {
            let s0 = [kappa, 0.0];
            let (t, trace) =
                flow_decrease_search(&energy, &s0, 0.5, 4096.0, &opts).expect("search");
            assert!(trace.terminal_energy() < 2.0 - 0.05, "gap not achieved at t = {t}");
        }
    }

    #[test]
    fn surrogate_flow_achieves_the_guaranteed_drop() {
        let n = 64;
        let spec = GraftSpec {
            center: (0.5, 0.5),
            ball_radius: 0.28,
            scale: 3.0 / n as f64,
            amplitude: 1.0,
        };
        let fx = unstable_body_bubble(n, &spec, &UnstableOptions::default()).expect("fixture");
        let cfg = fx.fixture.config.clone();
        let geom = cfg.validate(fx.fixture.map.tau(), &fx.fixture.collection).expect("geometry");
        let fields = crate::bubbles::build_surrogate_fields(
            &fx.fixture.map,
            &fx.fixture.collection,
            &cfg,
            &geom,
            &fx.bases,
        )
        .expect("fields");
        let pack = SurrogatePack {
            fields,
            k: fx.bases.k(),
            c0: fx.bases.c0(),
            m: vec![0.0; fx.bases.k()],
            e_at_m: 0.0,
        };
        let energy = FlowEnergy::Surrogate { pack: &pack, map: &fx.fixture.map };
        let s0 = [0.3, 0.0];
        let (t, trace) =
            flow_decrease_search(&energy, &s0, pack.c0, 4096.0, &FlowOptions::default())
                .expect("search");
        let e0 = energy.eval(&[0.0, 0.0]).expect("center energy");
        assert!(
            trace.terminal_energy() < e0 - pack.c0 / 10.0,
            "no drop at t = {t}: {} vs {}",
            trace.terminal_energy(),
            e0
        );
    }

    fn glued_test_collection(n: usize) -> (Sweepout, BubbleCollection) {
        let spec = default_graft(n);
        let fx = glued_body_bubble(n, &spec).expect("fixture");
        let sw = linear_sweepout(&fx.map, 9).expect("sweepout");
        (sw, fx.collection)
    }

    #[test]
    fn far_sweepout_yields_an_empty_marked_set_and_identity_deformation() {
        let n = 32;
        let u = clifford(n).expect("map");
        let sw = linear_sweepout(&u, 5).expect("sweepout");
        let spec = default_graft(n);
        let fx = glued_body_bubble(n, &spec).expect("fixture");
        let plan = select_configs(&sw, &fx.collection, 1e-3).expect("plan");
        assert!(plan.in_eps.iter().all(|b| !b), "nothing certifies below 1e-3");
        assert!(plan.cutoff.iter().all(|c| *c == 0.0));

        let fxu =
            unstable_body_bubble(n, &spec, &UnstableOptions::default()).expect("unstable fixture");
        let (out, report) =
            deform_sweepout(&sw, &fx.collection, &fxu.bases, 1e-3, 2, &DeformOptions::default())
                .expect("deform");
        assert_eq!(report.samples_deformed, 0);
        assert_eq!(report.flow_time, 0.0);
        for ((_, a), (_, b)) in sw.samples().iter().zip(out.samples()) {
            assert_eq!(a.nodes(), b.nodes(), "identity deformation must be bitwise");
        }
    }

    #[test]
    fn deform_refuses_a_single_direction_frame() {
        let (sw, coll) = glued_test_collection(32);
        let bases = TransplantBases {
            body: Some(crate::spectrum::UnstableBasis {
                sections: vec![crate::fields::Section {
                    flavor: crate::fields::SectionFlavor::Tangential,
                    values: vec![0.0; 32 * 32 * 4],
                }],
                c0: 0.5,
            }),
            spheres: vec![crate::bubbles::SphereBasis { fields: Vec::new(), c0: 1.0 }],
        };
        match deform_sweepout(&sw, &coll, &bases, 1.0, 2, &DeformOptions::default()) {
            Err(Error::IndexTooLow(k)) => assert_eq!(k, 1),
            other => panic!("expected the low-index refusal, got {other:?}"),
        }
    }

    #[test]
    fn homotopy_audit_accepts_identity_and_flags_antipodes() {
        let (sw, _) = glued_test_collection(32);
        assert!(homotopy_check(&sw, &sw).expect("identity"));

        let mid = sw.len() / 2;
        let flipped: Vec<f64> = sw.samples()[mid].1.nodes().iter().map(|x| -x).collect();
        let u2 = sw.samples()[mid].1.with_nodes(flipped).expect("antipodal map");
        let sw2 = sw.with_sample(mid, u2).expect("replaced");
        match homotopy_check(&sw, &sw2) {
            Err(Error::TubeEscape { sample, .. }) => assert_eq!(sample, mid),
            other => panic!("expected a tube escape, got {other:?}"),
        }

        // An endpoint swap is detected as inequality, not an error.
        let other_pole: Vec<f64> = sw.samples()[0]
            .1
            .nodes()
            .chunks(4)
            .flat_map(|_| [0.0, 1.0, 0.0, 0.0])
            .collect();
        let u3 = sw.samples()[0].1.with_nodes(other_pole).expect("constant map");
        let sw3 = sw.with_sample(0, u3).expect("replaced");
        assert!(!homotopy_check(&sw, &sw3).expect("flag"), "endpoint mismatch must flag false");
    }

    #[test]
    fn interpolated_neighbours_certify_below_the_threshold() {
        let n = 64;
        let spec = GraftSpec {
            center: (0.5, 0.5),
            ball_radius: 0.28,
            scale: 3.0 / n as f64,
            amplitude: 1.0,
        };
        let fx = glued_body_bubble(n, &spec).expect("fixture");
        let shifted_spec = GraftSpec { center: (0.5 + 1.0 / n as f64, 0.5), ..spec };
        let fx2 = glued_body_bubble(n, &shifted_spec).expect("fixture");
        let pole = {
            let nodes: Vec<f64> = fx
                .map
                .nodes()
                .chunks(4)
                .flat_map(|_| [0.0, 0.0, 0.0, 1.0])
                .collect();
            fx.map.with_nodes(nodes).expect("constant pole map")
        };
        let sw = Sweepout::new(vec![
            (0.0, pole.clone()),
            (0.45, fx.map.clone()),
            (0.55, fx2.map.clone()),
            (1.0, pole),
        ])
        .expect("sweepout");
        let d1 = bubble_defect(&fx.map, &fx.collection, &fx.config).expect("defect");
        let eps = 1.5 * d1;
        let plan = select_configs(&sw, &fx.collection, eps).expect("plan");
        assert!(plan.in_eps[1] && plan.in_eps[2], "both glued samples must be marked");
        assert!(!plan.in_eps[0] && !plan.in_eps[3], "poles are far from the collection");
    }

    #[test]
    fn deformation_end_to_end_on_a_two_direction_frame() {
        let n = 64;
        let spec = GraftSpec {
            center: (0.5, 0.5),
            ball_radius: 0.28,
            scale: 3.0 / n as f64,
            amplitude: 1.0,
        };
        let fxu = unstable_body_bubble(n, &spec, &UnstableOptions::default()).expect("fixture");
        let sw = linear_sweepout(&fxu.fixture.map, 9).expect("sweepout");
        let mid = sw.len() / 2;
        let d_mid = bubble_defect(
            &sw.samples()[mid].1,
            &fxu.fixture.collection,
            &fxu.fixture.config,
        )
        .expect("defect");
        let eps = 1.2 * d_mid;
        let (out, report) = deform_sweepout(
            &sw,
            &fxu.fixture.collection,
            &fxu.bases,
            eps,
            2,
            &DeformOptions::default(),
        )
        .expect("deform");
        assert!(report.samples_deformed >= 1, "the glued sample must deform");
        assert!(report.kappa > 0.0);
        assert!(report.flow_time > 0.0);
        assert!(
            report.max_energy_after <= report.max_energy_before + 1e-9,
            "max energy grew: {} -> {}",
            report.max_energy_before,
            report.max_energy_after
        );
        assert!(report.min_defect_after > 0.0);
        assert!(homotopy_check(&sw, &out).expect("audit"), "deformation must stay homotopic");
        assert_ne!(
            sw.samples()[mid].1.nodes(),
            out.samples()[mid].1.nodes(),
            "the deformed middle sample must move"
        );
    }
}
