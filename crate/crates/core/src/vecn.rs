//! Small helpers for state/control vectors represented as `&[f64]`.

/// Euclidean norm.
pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Dot product. Panics on length mismatch (callers validate dimensions).
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `out = a + s * b`.
pub fn add_scaled(a: &[f64], s: f64, b: &[f64], out: &mut [f64]) {
    for i in 0..a.len() {
        out[i] = a[i] + s * b[i];
    }
}

pub fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

pub fn all_finite(v: &[f64]) -> bool {
    v.iter().all(|x| x.is_finite())
}

/// Deterministic 64-bit fold of a float vector's bit pattern, used to seed
/// per-point RNGs so results do not depend on evaluation order.
pub fn bits_fold(v: &[f64]) -> u64 {
    let mut h: u64 = 0x9e37_79b9_7f4a_7c15;
    for x in v {
        h ^= x.to_bits();
        h = h.wrapping_mul(0xbf58_476d_1ce4_e5b9);
        h ^= h >> 31;
    }
    h
}

/// Evenly spaced values including both endpoints (`count >= 2`), or the
/// midpoint when `count == 1`.
pub fn linspace(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    match count {
        0 => Vec::new(),
        1 => vec![0.5 * (lo + hi)],
        _ => (0..count)
            .map(|i| lo + (hi - lo) * (i as f64) / ((count - 1) as f64))
            .collect(),
    }
}

/// 17-significant-digit formatting; round-trip safe for f64.
pub fn fmt_f64(x: f64) -> String {
    format!("{:.16e}", x)
}
