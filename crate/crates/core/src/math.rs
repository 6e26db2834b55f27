//! Small numeric helpers shared by the inference modules.

/// Tolerance used when checking that user-supplied probability vectors and
/// table columns are normalized. Inputs are never renormalized silently.
pub const PROB_TOL: f64 = 1e-12;

/// Log of a sum of exponentials, stable under large negative inputs.
/// Returns negative infinity for an empty slice or all-(-inf) input.
pub fn logsumexp(values: &[f64]) -> f64 {
    let mut hi = f64::NEG_INFINITY;
    for &v in values {
        if v > hi {
            hi = v;
        }
    }
    if hi == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let sum: f64 = values.iter().map(|&v| (v - hi).exp()).sum();
    hi + sum.ln()
}

/// `x * ln(x / y)` with the conventions `0 * ln(0 / y) = 0` for any `y`
/// and `x * ln(x / 0) = +inf` for `x > 0`.
#[inline]
pub fn xlog_ratio(x: f64, y: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else if y == 0.0 {
        f64::INFINITY
    } else {
        x * (x / y).ln()
    }
}

/// KL divergence between two distributions over the same support.
/// The caller is responsible for the slices having equal length.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    debug_assert_eq!(p.len(), q.len());
    p.iter().zip(q).map(|(&a, &b)| xlog_ratio(a, b)).sum()
}

/// Normalizes `v` in place and returns the pre-normalization sum.
/// Leaves `v` untouched when the sum is zero so the caller can decide.
pub fn normalize(v: &mut [f64]) -> f64 {
    let sum: f64 = v.iter().sum();
    if sum > 0.0 {
        for x in v.iter_mut() {
            *x /= sum;
        }
    }
    sum
}

/// Index into a column-major `rows x cols` matrix.
#[inline(always)]
pub fn cm(k: usize, l: usize, rows: usize) -> usize {
    l * rows + k
}

/// Advances `digits` as a mixed-radix odometer (last digit fastest).
/// Returns false once the counter wraps back to all zeros.
pub fn increment_mixed_radix(digits: &mut [usize], radices: &[usize]) -> bool {
    for i in (0..digits.len()).rev() {
        digits[i] += 1;
        if digits[i] < radices[i] {
            return true;
        }
        digits[i] = 0;
    }
    false
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives the seed for run `index` of an experiment from the master seed.
/// The scheme is a fixed mixing function, so derived seeds are stable across
/// runs and platforms; runs may therefore execute in any order or in parallel.
pub fn derive_seed(master: u64, index: u64) -> u64 {
    splitmix64(master ^ splitmix64(index.wrapping_add(0xA076_1D64_78BD_642F)))
}
