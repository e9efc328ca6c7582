//! Conformal marks τ ∈ 𝕳, the modular group, and reduction to the
//! fundamental domain.
//!
//! A mark τ (upper half-plane) fixes the flat torus `T_τ = C/(Z + τZ)`.
//! Two marks describe conformally equivalent tori exactly when they lie in
//! the same PSL(2,Z)-orbit. [`reduce`] moves a mark into the canonical
//! fundamental domain
//!
//! ```text
//! 𝓜 = { |τ| ≥ 1, −½ < Re τ ≤ ½, and Re τ ≥ 0 whenever |τ| = 1 }
//! ```
//!
//! by the classical alternation of translations `T: τ ↦ τ+1` and the
//! inversion `S: τ ↦ −1/τ`, recording the group word and its integer
//! matrix. The boundary convention (right half of each identified boundary
//! pair kept) makes the reduction a genuine function.

use num_complex::Complex64;
use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use std::fmt;

use crate::error::{Error, Result};

pub use crate::fields::iota_pullback;

/// Marks with Im τ at or below this are rejected as degenerate.
pub const DEGENERATE_IM: f64 = 1e-9;
/// Default height threshold above which a path of marks counts as
/// degenerating (escaping every compact set of 𝓜).
pub const DEFAULT_H_MAX: f64 = 50.0;
/// Required agreement between the recorded matrix action and the reduced
/// mark.
pub const MOEBIUS_TOL: f64 = 1e-10;
/// Slack used for boundary decisions of the fundamental domain.
const BOUNDARY_EPS: f64 = 1e-13;
/// Safety cap on reduction steps (the alternation terminates long before).
const MAX_REDUCE_ITERS: usize = 10_000;

/// A conformal structure on the torus: τ in the upper half-plane.
///
/// Serialized as the pair `[re, im]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mark {
    pub tau: Complex64,
}

impl Mark {
    pub fn new(re: f64, im: f64) -> Self {
        Mark { tau: Complex64::new(re, im) }
    }

    /// Validity: finite coordinates with Im τ above the degeneracy floor.
    pub fn validate(&self) -> Result<()> {
        if !self.tau.re.is_finite() || !self.tau.im.is_finite() {
            return Err(Error::Parse(format!("mark must be finite, got {}", self.tau)));
        }
        if self.tau.im <= DEGENERATE_IM {
            return Err(Error::DegenerateMark(format!(
                "Im τ = {:.3e} ≤ {DEGENERATE_IM:.0e}",
                self.tau.im
            )));
        }
        Ok(())
    }
}

impl Serialize for Mark {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        [self.tau.re, self.tau.im].serialize(s)
    }
}

impl<'de> Deserialize<'de> for Mark {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let [re, im] = <[f64; 2]>::deserialize(d)?;
        if !(im > 0.0) {
            return Err(D::Error::custom(format!("mark needs Im τ > 0, got {im}")));
        }
        Ok(Mark::new(re, im))
    }
}

/// Integer matrix `[[a, b], [c, d]]` with determinant 1, acting on 𝕳 by
/// `τ ↦ (aτ + b)/(cτ + d)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sl2 {
    pub a: i64,
    pub b: i64,
    pub c: i64,
    pub d: i64,
}

impl Sl2 {
    pub const IDENTITY: Sl2 = Sl2 { a: 1, b: 0, c: 0, d: 1 };
    /// The inversion `S: τ ↦ −1/τ`.
    pub const S: Sl2 = Sl2 { a: 0, b: -1, c: 1, d: 0 };

    /// The translation power `T^k: τ ↦ τ + k`.
    pub fn t(k: i64) -> Sl2 {
        Sl2 { a: 1, b: k, c: 0, d: 1 }
    }

    pub fn det(&self) -> i64 {
        self.a * self.d - self.b * self.c
    }

    /// Matrix product (composition of Möbius maps).
    pub fn mul(&self, rhs: &Sl2) -> Sl2 {
        Sl2 {
            a: self.a * rhs.a + self.b * rhs.c,
            b: self.a * rhs.b + self.b * rhs.d,
            c: self.c * rhs.a + self.d * rhs.c,
            d: self.c * rhs.b + self.d * rhs.d,
        }
    }

    pub fn inverse(&self) -> Sl2 {
        // det = 1 ⇒ inverse = [[d, −b], [−c, a]].
        Sl2 { a: self.d, b: -self.b, c: -self.c, d: self.a }
    }

    /// Möbius action on the upper half-plane.
    pub fn apply(&self, tau: Complex64) -> Complex64 {
        let num = Complex64::new(self.a as f64, 0.0) * tau + Complex64::new(self.b as f64, 0.0);
        let den = Complex64::new(self.c as f64, 0.0) * tau + Complex64::new(self.d as f64, 0.0);
        num / den
    }
}

/// One factor of a modular word: the inversion or a translation power.
/// `T(k)` abbreviates the k-fold product of the unit translation (or its
/// inverse for negative k).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", content = "k", rename_all = "snake_case")]
pub enum WordAtom {
    S,
    T(i64),
}

impl WordAtom {
    pub fn matrix(&self) -> Sl2 {
        match self {
            WordAtom::S => Sl2::S,
            WordAtom::T(k) => Sl2::t(*k),
        }
    }
}

/// A word in the modular group, stored in the order the factors are applied
/// to the input mark (leftmost entry acts first).
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Word(pub Vec<WordAtom>);

impl Word {
    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Total letter count with `T(k)` weighted by `|k|`.
    pub fn letter_len(&self) -> u64 {
        self.0
            .iter()
            .map(|a| match a {
                WordAtom::S => 1,
                WordAtom::T(k) => k.unsigned_abs(),
            })
            .sum()
    }

    /// Product of the atom matrices respecting application order (the atom
    /// applied last is the leftmost factor of the product).
    pub fn matrix(&self) -> Sl2 {
        let mut m = Sl2::IDENTITY;
        for atom in &self.0 {
            m = atom.matrix().mul(&m);
        }
        m
    }
}

impl fmt::Display for Word {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0.is_empty() {
            return write!(f, "1");
        }
        let mut first = true;
        for atom in &self.0 {
            if !first {
                write!(f, " ")?;
            }
            first = false;
            match atom {
                WordAtom::S => write!(f, "S")?,
                WordAtom::T(1) => write!(f, "T")?,
                WordAtom::T(k) => write!(f, "T^{k}")?,
            }
        }
        Ok(())
    }
}

/// Result of moving a mark into the fundamental domain.
#[derive(Debug, Clone, PartialEq)]
pub struct ReducedMark {
    /// The canonical representative in 𝓜.
    pub tau_reduced: Complex64,
    /// Group word applied to the input, in application order.
    pub word: Word,
    /// Integer matrix of the word; `matrix · τ_input = tau_reduced`.
    pub matrix: Sl2,
}

/// Is `z` in the canonical fundamental domain (up to `tol`)?
pub fn in_fundamental_domain(z: Complex64, tol: f64) -> bool {
    if z.im <= 0.0 {
        return false;
    }
    let n = z.norm();
    if n < 1.0 - tol {
        return false;
    }
    if z.re <= -0.5 - tol || z.re > 0.5 + tol {
        return false;
    }
    if (n - 1.0).abs() <= tol && z.re < -tol {
        return false;
    }
    true
}

/// Reduce a mark to the fundamental domain by the T/S alternation,
/// recording the modular word and verifying the recorded matrix action
/// reproduces the result within [`MOEBIUS_TOL`].
pub fn reduce(mark: Mark) -> Result<ReducedMark> {
    mark.validate()?;
    let tau = mark.tau;
    let mut z = tau;
    let mut word: Vec<WordAtom> = Vec::new();
    let mut matrix = Sl2::IDENTITY;
    let push = |atom: WordAtom, word: &mut Vec<WordAtom>, matrix: &mut Sl2| {
        word.push(atom);
        *matrix = atom.matrix().mul(matrix);
    };
    let mut done = false;
    for _ in 0..MAX_REDUCE_ITERS {
        // Translate Re into [−½, ½).
        let k = (z.re + 0.5).floor();
        if k != 0.0 {
            if k.abs() >= 9.0e15 {
                return Err(Error::Parse(format!("mark Re τ = {} too large to reduce", tau.re)));
            }
            z.re -= k;
            push(WordAtom::T(-(k as i64)), &mut word, &mut matrix);
        }
        if z.norm_sqr() < 1.0 - BOUNDARY_EPS {
            // Invert: −1/z = −z̄ / |z|².
            let n2 = z.norm_sqr();
            z = Complex64::new(-z.re / n2, z.im / n2);
            push(WordAtom::S, &mut word, &mut matrix);
        } else {
            done = true;
            break;
        }
    }
    if !done {
        return Err(Error::NonConvergence(format!(
            "mark reduction did not terminate within {MAX_REDUCE_ITERS} steps for τ = {tau}"
        )));
    }
    // Boundary convention: Re = −½ is traded for Re = +½ …
    if z.re <= -0.5 + BOUNDARY_EPS {
        z.re += 1.0;
        push(WordAtom::T(1), &mut word, &mut matrix);
    }
    // … and on the unit arc the right half (Re ≥ 0) is canonical.
    if (z.norm_sqr() - 1.0).abs() <= 2.0 * BOUNDARY_EPS && z.re < -BOUNDARY_EPS {
        let n2 = z.norm_sqr();
        z = Complex64::new(-z.re / n2, z.im / n2);
        push(WordAtom::S, &mut word, &mut matrix);
        // The inversion can land exactly on Re = +½ already; nothing more.
    }
    if !in_fundamental_domain(z, 1e-12) {
        return Err(Error::NonConvergence(format!(
            "reduction of τ = {tau} produced {z} outside the fundamental domain"
        )));
    }
    debug_assert_eq!(matrix.det(), 1);
    let via_matrix = matrix.apply(tau);
    if (via_matrix - z).norm() > MOEBIUS_TOL {
        return Err(Error::NonConvergence(format!(
            "matrix action {via_matrix} disagrees with reduced mark {z}"
        )));
    }
    Ok(ReducedMark { tau_reduced: z, word: Word(word), matrix })
}

/// Limiting behavior of a path of (reduced) marks.
#[derive(Debug, Clone, PartialEq)]
pub enum MarkMode {
    /// The marks stay in a compact region; the final value is reported.
    Converging(Complex64),
    /// The marks escape upward (thin torus / cylinder limit).
    Degenerating,
}

/// Classify a nonempty sequence of reduced marks: degenerating when the
/// final height exceeds `h_max` without having decayed from the start,
/// converging (to the last value) otherwise.
pub fn classify_mode(path: &[Complex64], h_max: f64) -> Result<MarkMode> {
    let (first, last) = match (path.first(), path.last()) {
        (Some(f), Some(l)) => (*f, *l),
        _ => return Err(Error::EmptyInput("classify_mode needs at least one mark".into())),
    };
    if last.im > h_max && last.im >= first.im {
        Ok(MarkMode::Degenerating)
    } else {
        Ok(MarkMode::Converging(last))
    }
}

/// A continuous family of marks sampled over [0, 1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarkPath {
    /// Strictly increasing parameters from 0 to 1 with their marks.
    pub samples: Vec<(f64, Mark)>,
}

impl MarkPath {
    pub fn validate(&self) -> Result<()> {
        if self.samples.is_empty() {
            return Err(Error::EmptyInput("mark path has no samples".into()));
        }
        for (_, m) in &self.samples {
            m.validate()?;
        }
        let t0 = self.samples[0].0;
        let t1 = self.samples[self.samples.len() - 1].0;
        if t0 != 0.0 || t1 != 1.0 {
            return Err(Error::ConfigViolation(format!(
                "mark path must span [0,1], got [{t0}, {t1}]"
            )));
        }
        for w in self.samples.windows(2) {
            if w[1].0 <= w[0].0 {
                return Err(Error::ConfigViolation(format!(
                    "mark path parameters must increase strictly: {} then {}",
                    w[0].0, w[1].0
                )));
            }
        }
        Ok(())
    }

    /// Largest jump |Δτ| between adjacent samples.
    pub fn continuity_modulus(&self) -> f64 {
        self.samples
            .windows(2)
            .map(|w| (w[1].1.tau - w[0].1.tau).norm())
            .fold(0.0, f64::max)
    }
}

/// Parse a mark from `"re,im"` (CLI form) or `"a+bi"` complex literals
/// (`i`, `2i`, `0.5+0.866i`, `1-0.3i` …).
pub fn parse_tau(s: &str) -> Result<Complex64> {
    let s = s.trim();
    if s.is_empty() {
        return Err(Error::Parse("empty mark".into()));
    }
    let tau = if let Some((re, im)) = s.split_once(',') {
        let re: f64 = re.trim().parse().map_err(|e| Error::Parse(format!("bad Re τ {re:?}: {e}")))?;
        let im: f64 = im.trim().parse().map_err(|e| Error::Parse(format!("bad Im τ {im:?}: {e}")))?;
        Complex64::new(re, im)
    } else if let Some(body) = s.strip_suffix(['i', 'I']) {
        // Split into real and imaginary parts on the last sign that is not
        // an exponent sign and not leading.
        let bytes = body.as_bytes();
        let mut split = None;
        for idx in (1..bytes.len()).rev() {
            let b = bytes[idx];
            if (b == b'+' || b == b'-') && !matches!(bytes[idx - 1], b'e' | b'E') {
                split = Some(idx);
                break;
            }
        }
        match split {
            Some(idx) => {
                let (re_s, im_s) = body.split_at(idx);
                let re: f64 = re_s
                    .trim()
                    .parse()
                    .map_err(|e| Error::Parse(format!("bad Re τ {re_s:?}: {e}")))?;
                let im_s = im_s.trim();
                let im: f64 = match im_s {
                    "+" => 1.0,
                    "-" => -1.0,
                    _ => im_s.parse().map_err(|e| Error::Parse(format!("bad Im τ {im_s:?}: {e}")))?,
                };
                Complex64::new(re, im)
            }
            None => {
                let body = body.trim();
                let im: f64 = match body {
                    "" | "+" => 1.0,
                    "-" => -1.0,
                    _ => body.parse().map_err(|e| Error::Parse(format!("bad Im τ {body:?}: {e}")))?,
                };
                Complex64::new(0.0, im)
            }
        }
    } else {
        return Err(Error::Parse(format!(
            "mark {s:?} must look like \"re,im\" or \"a+bi\""
        )));
    };
    if !tau.re.is_finite() || !tau.im.is_finite() {
        return Err(Error::Parse(format!("mark {s:?} is not finite")));
    }
    if tau.im <= 0.0 {
        return Err(Error::Parse(format!("mark {s:?} needs Im τ > 0")));
    }
    Ok(tau)
}
