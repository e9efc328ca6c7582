//! Error taxonomy shared by the whole crate.
//!
//! Errors split into two classes that callers (notably the CLI) map to
//! distinct exit codes: **contract** errors mean the input violated a
//! documented precondition; **numerical** errors mean a well-posed
//! computation failed to converge or left its validity region.

use thiserror::Error;

/// Coarse classification used for process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    /// Caller broke a precondition (malformed input, bad arguments).
    Contract,
    /// A numerical procedure failed (non-convergence, region escape).
    Numerical,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("point is outside the projection tube of the target (distance {dist:.3e}, tube {tube:.3e})")]
    OutsideTube { dist: f64, tube: f64 },

    #[error("iteration failed to converge: {0}")]
    NonConvergence(String),

    #[error("node {index} is off the target manifold by {dist:.3e} (tolerance {tol:.3e})")]
    NotOnManifold { index: usize, dist: f64, tol: f64 },

    #[error("section is not tangential at node {index} (normal part {normal:.3e})")]
    NotTangent { index: usize, normal: f64 },

    #[error("modulus is degenerate: {0}")]
    DegenerateMark(String),

    #[error("perturbed map left the projection tube at node {index} (distance {dist:.3e})")]
    LeftTube { index: usize, dist: f64 },

    #[error("maximum iteration count {0} exceeded")]
    MaxIters(usize),

    #[error("balls {i} and {j} overlap (distance {dist:.3e} < {sum:.3e})")]
    BallsOverlap { i: usize, j: usize, dist: f64, sum: f64 },

    #[error("energy {energy:.3e} on the replacement region exceeds the cap {cap:.3e}")]
    EnergyCapExceeded { energy: f64, cap: f64 },

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("map is not harmonic (tension sup-norm {sup:.3e} exceeds {tol:.3e})")]
    NotHarmonic { sup: f64, tol: f64 },

    #[error("eigensolver failed: {0}")]
    EigFailure(String),

    #[error("map has index {found}, but {needed} unstable directions were requested")]
    InsufficientIndex { found: usize, needed: usize },

    #[error("ball radius {0} is outside the admissible range (0, 1)")]
    BadRadius(f64),

    #[error("bubble configuration violates the nesting rules: {0}")]
    ConfigViolation(String),

    #[error("chart overflow: {0}")]
    ChartOverflow(String),

    #[error("no admissible candidate found: {0}")]
    NoCandidate(String),

    #[error("second derivative left the concavity band at s = {at:?}: eigenvalue {eig:.6e} outside [{lo:.6e}, {hi:.6e}]")]
    ConcavityFailure { at: Vec<f64>, eig: f64, lo: f64, hi: f64 },

    #[error("bubble defect {defect:.3e} exceeds the transplant threshold {threshold:.3e}")]
    DefectTooLarge { defect: f64, threshold: f64 },

    #[error("line-search step underflowed at iteration {iter} (energy {energy:.12e})")]
    StepUnderflow { iter: usize, energy: f64 },

    #[error("configuration interpolation gap between samples {left} and {right} (defect {defect:.3e} > {threshold:.3e})")]
    InterpolationGap { left: usize, right: usize, defect: f64, threshold: f64 },

    #[error("deformation requires at least two unstable directions, got k = {0}")]
    IndexTooLow(usize),

    #[error("homotopy interpolant escapes the projection tube at sample {sample}, node {node}")]
    TubeEscape { sample: usize, node: usize },

    #[error("unknown fixture `{0}`")]
    UnknownFixture(String),

    #[error("malformed input: {0}")]
    Parse(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Which exit-code class this error belongs to.
    pub fn class(&self) -> ErrorClass {
        use Error::*;
        match self {
            OutsideTube { .. }
            | NotOnManifold { .. }
            | NotTangent { .. }
            | DegenerateMark(_)
            | BallsOverlap { .. }
            | EmptyInput(_)
            | BadRadius(_)
            | ConfigViolation(_)
            | InsufficientIndex { .. }
            | IndexTooLow(_)
            | UnknownFixture(_)
            | Parse(_)
            | Io(_) => ErrorClass::Contract,
            NonConvergence(_)
            | LeftTube { .. }
            | MaxIters(_)
            | EnergyCapExceeded { .. }
            | NotHarmonic { .. }
            | EigFailure(_)
            | ChartOverflow(_)
            | NoCandidate(_)
            | ConcavityFailure { .. }
            | DefectTooLarge { .. }
            | StepUnderflow { .. }
            | InterpolationGap { .. }
            | TubeEscape { .. } => ErrorClass::Numerical,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
