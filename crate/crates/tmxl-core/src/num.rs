//! Deterministic numeric helpers: pairwise summation, small-vector algebra,
//! seeded RNG construction, and scalar finite differences.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Pairwise (cascade) summation with a fixed recursion shape.
///
/// The reduction tree depends only on the slice length, never on thread
/// count or chunk scheduling, so repeated runs produce bit-identical sums.
/// Error grows like O(log n · eps) instead of O(n · eps) for naive sums.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    const BASE: usize = 64;
    fn go(xs: &[f64]) -> f64 {
        if xs.len() <= BASE {
            let mut acc = 0.0;
            for &x in xs {
                acc += x;
            }
            acc
        } else {
            let mid = xs.len() / 2;
            go(&xs[..mid]) + go(&xs[mid..])
        }
    }
    go(xs)
}

/// Dot product of equal-length slices (plain sequential accumulation; used
/// for small vectors where determinism is trivial).
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut s = 0.0;
    for (x, y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}

/// Euclidean norm of a small vector.
pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `y += c * x` for small vectors.
pub fn axpy(c: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += c * xi;
    }
}

/// Deterministic RNG from a 64-bit seed.
pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Two-level Richardson extrapolation of a central first difference.
///
/// `f` is evaluated at ±h and ±h/2; the h² error term cancels.
pub fn central_d1<F: FnMut(f64) -> f64>(mut f: F, h: f64) -> f64 {
    let d = |f: &mut F, h: f64| (f(h) - f(-h)) / (2.0 * h);
    let coarse = d(&mut f, h);
    let fine = d(&mut f, 0.5 * h);
    (4.0 * fine - coarse) / 3.0
}

/// Two-level Richardson extrapolation of a central second difference.
pub fn central_d2<F: FnMut(f64) -> f64>(mut f: F, h: f64) -> f64 {
    let f0 = f(0.0);
    let d = |f: &mut F, h: f64, f0: f64| (f(h) - 2.0 * f0 + f(-h)) / (h * h);
    let coarse = d(&mut f, h, f0);
    let fine = d(&mut f, 0.5 * h, f0);
    (4.0 * fine - coarse) / 3.0
}

/// Two-level Richardson extrapolation of the mixed second difference
/// d²f/(ds dt) at the origin of a two-parameter family.
pub fn central_d11<F: FnMut(f64, f64) -> f64>(mut f: F, h: f64) -> f64 {
    let d = |f: &mut F, h: f64| (f(h, h) - f(h, -h) - f(-h, h) + f(-h, -h)) / (4.0 * h * h);
    let coarse = d(&mut f, h);
    let fine = d(&mut f, 0.5 * h);
    (4.0 * fine - coarse) / 3.0
}

/// Fallible twin of [`central_d1`]: probe failures abort the stencil.
pub fn try_central_d1<E, F: FnMut(f64) -> Result<f64, E>>(mut f: F, h: f64) -> Result<f64, E> {
    let mut d = |h: f64| -> Result<f64, E> { Ok((f(h)? - f(-h)?) / (2.0 * h)) };
    let coarse = d(h)?;
    let fine = d(0.5 * h)?;
    Ok((4.0 * fine - coarse) / 3.0)
}

/// Fallible twin of [`central_d2`]; `f0` is the (precomputed) center value.
pub fn try_central_d2<E, F: FnMut(f64) -> Result<f64, E>>(
    mut f: F,
    f0: f64,
    h: f64,
) -> Result<f64, E> {
    let mut d = |h: f64| -> Result<f64, E> { Ok((f(h)? - 2.0 * f0 + f(-h)?) / (h * h)) };
    let coarse = d(h)?;
    let fine = d(0.5 * h)?;
    Ok((4.0 * fine - coarse) / 3.0)
}

/// Fallible twin of [`central_d11`].
pub fn try_central_d11<E, F: FnMut(f64, f64) -> Result<f64, E>>(
    mut f: F,
    h: f64,
) -> Result<f64, E> {
    let mut d = |h: f64| -> Result<f64, E> {
        Ok((f(h, h)? - f(h, -h)? - f(-h, h)? + f(-h, -h)?) / (4.0 * h * h))
    };
    let coarse = d(h)?;
    let fine = d(0.5 * h)?;
    Ok((4.0 * fine - coarse) / 3.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pairwise_matches_naive_on_small_input() {
        let xs: Vec<f64> = (0..1000).map(|i| (i as f64).sin()).collect();
        let naive: f64 = xs.iter().sum();
        assert!((pairwise_sum(&xs) - naive).abs() < 1e-9);
    }

    #[test]
    fn pairwise_is_shape_stable() {
        let xs: Vec<f64> = (0..4097).map(|i| 1.0 / (1.0 + i as f64)).collect();
        let a = pairwise_sum(&xs);
        let b = pairwise_sum(&xs);
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn richardson_derivatives_are_accurate() {
        let f = |x: f64| (1.3 * x).exp() * (0.7 + x).sin();
        let fp = |x: f64| 1.3 * (1.3 * x).exp() * (0.7 + x).sin() + (1.3 * x).exp() * (0.7 + x).cos();
        let d1 = central_d1(|h| f(h), 1e-4);
        assert!((d1 - fp(0.0)).abs() < 1e-10);
        let g = |s: f64, t: f64| (s * t + 0.3 * s * s - 0.1 * t * t).exp();
        let d11 = central_d11(g, 1e-4);
        assert!((d11 - 1.0).abs() < 1e-8, "mixed derivative {d11}");
    }
}
