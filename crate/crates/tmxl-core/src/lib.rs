//! Numerical toolkit for harmonic maps from flat tori into embedded targets.
//!
//! A map `u : T_tau -> M ⊂ R^N` is stored on a periodic `n_a × n_b` grid over
//! the unit square, with the torus `T_tau = C / (Z + tau Z)` carried by its
//! modulus `tau` in the upper half plane. The crate provides, in dependency
//! order:
//!
//! * [`targets`] — the closed family of target manifolds (round spheres,
//!   products of circles, ellipsoids) with nearest-point projection, its
//!   first/second derivatives, second fundamental form and curvature;
//! * [`moduli`] — modulus reduction to a canonical fundamental domain and
//!   bookkeeping for paths of moduli;
//! * [`fields`] — torus maps and sections of the pulled-back tangent bundle:
//!   energy, area, tension, projected perturbation, variation derivatives;
//! * [`solver`] — projected gradient descent to harmonicity, local harmonic
//!   replacement on balls, sweepout tightening and width estimates;
//! * [`spectrum`] — second-variation form, Jacobi operator, Morse index and
//!   nullity, and normalized bases of unstable directions;
//! * [`bubbles`] — bubble-tree limit collections, the gluing-distance defect
//!   certificate, configuration search, logarithmic cutoffs, and the
//!   cutoff-transplantation of unstable directions onto nearby maps;
//! * [`deform`] — the constrained ball flow on coefficient space and the
//!   sweepout deformation that pushes energy down near a limit collection;
//! * [`fixtures`] — deterministic constructions used by tests and the CLI;
//! * [`io`] — file formats (map files, sweepout manifests, collections).
//!
//! All floating-point reductions use fixed-shape pairwise summation so that
//! results are independent of thread count; every randomized routine takes an
//! explicit seed.

pub mod bubbles;
pub mod deform;
pub mod error;
pub mod fields;
pub mod fixtures;
mod interp;
pub mod io;
pub mod moduli;
pub mod num;
pub mod solver;
pub mod spectrum;
pub mod targets;

pub use error::{Error, ErrorClass, Result};
