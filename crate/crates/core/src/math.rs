//! Max-shifted log-sum-exp and softmax helpers.
//!
//! Every function takes an optional masked index. The masked entry is treated
//! as if its logit were `-inf`: it receives zero probability and does not
//! contribute to the normalizer.

/// Stable `log Σ exp(x_i)` over the unmasked entries.
pub fn logsumexp(xs: &[f64], masked: Option<usize>) -> f64 {
    let max = xs
        .iter()
        .enumerate()
        .filter(|(i, _)| Some(*i) != masked)
        .map(|(_, &x)| x)
        .fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    let sum: f64 = xs
        .iter()
        .enumerate()
        .filter(|(i, _)| Some(*i) != masked)
        .map(|(_, &x)| (x - max).exp())
        .sum();
    max + sum.ln()
}

/// Softmax over the unmasked entries; the masked entry is set to 0.
pub fn softmax(xs: &[f64], masked: Option<usize>) -> Vec<f64> {
    let lse = logsumexp(xs, masked);
    xs.iter()
        .enumerate()
        .map(|(i, &x)| if Some(i) == masked { 0.0 } else { (x - lse).exp() })
        .collect()
}

pub fn l2_norm(xs: &[f64]) -> f64 {
    xs.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Mixes a base seed with two stream coordinates into an independent seed.
pub fn derive_seed(base: u64, a: u64, b: u64) -> u64 {
    fn splitmix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    splitmix(splitmix(splitmix(base) ^ a.wrapping_mul(0xD6E8_FEB8_6659_FD93)) ^ b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn logsumexp_matches_direct_sum() {
        assert_abs_diff_eq!(logsumexp(&[0.0, 0.0], None), 2f64.ln(), epsilon = 1e-15);
        assert_abs_diff_eq!(logsumexp(&[1.0, 0.0], None), (1f64.exp() + 1.0).ln(), epsilon = 1e-15);
    }

    #[test]
    fn logsumexp_does_not_overflow() {
        assert_abs_diff_eq!(logsumexp(&[1000.0, 1000.0], None), 1000.0 + 2f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn masked_entry_is_ignored() {
        let p = softmax(&[5.0, 0.0, 0.0], Some(0));
        assert_eq!(p[0], 0.0);
        assert_abs_diff_eq!(p[1], 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(logsumexp(&[5.0, 0.0, 0.0], Some(0)), 2f64.ln(), epsilon = 1e-15);
    }

    #[test]
    fn derived_seeds_differ() {
        assert_ne!(derive_seed(1, 0, 0), derive_seed(1, 0, 1));
        assert_ne!(derive_seed(1, 0, 1), derive_seed(1, 1, 0));
        assert_eq!(derive_seed(7, 3, 4), derive_seed(7, 3, 4));
    }
}
