//! Small numeric helpers shared across modules.

use rayon::prelude::*;

/// Percentile of a sorted slice using linear interpolation between closest
/// ranks: rank = p * (n - 1), value = x[floor] + frac * (x[floor+1] - x[floor]).
///
/// `p` is a fraction in [0, 1]. Panics on an empty slice.
pub(crate) fn percentile_sorted(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty(), "percentile of empty slice");
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let rank = p.clamp(0.0, 1.0) * (n - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    let frac = rank - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

/// Deterministic parallel sum: fixed-size chunks are summed serially, the
/// per-chunk partials are then folded in chunk order. The result is bitwise
/// identical for any thread count.
pub(crate) fn det_sum(values: &[f64]) -> f64 {
    const CHUNK: usize = 4096;
    if values.len() <= CHUNK {
        return values.iter().sum();
    }
    values
        .par_chunks(CHUNK)
        .map(|c| c.iter().sum::<f64>())
        .collect::<Vec<_>>()
        .iter()
        .sum()
}

/// Deterministic parallel sum of a function mapped over index pairs of two
/// slices. Same chunking scheme as [`det_sum`].
pub(crate) fn det_sum2(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64 + Sync) -> f64 {
    const CHUNK: usize = 4096;
    assert_eq!(a.len(), b.len());
    if a.len() <= CHUNK {
        return a.iter().zip(b).map(|(&x, &y)| f(x, y)).sum();
    }
    a.par_chunks(CHUNK)
        .zip(b.par_chunks(CHUNK))
        .map(|(ca, cb)| ca.iter().zip(cb).map(|(&x, &y)| f(x, y)).sum::<f64>())
        .collect::<Vec<_>>()
        .iter()
        .sum()
}
