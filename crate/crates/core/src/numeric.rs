//! Summation helpers used for every score aggregate.
//!
//! Means are computed from a compensated (Neumaier) sum carried as a
//! double-double pair and divided with an FMA remainder correction, so the
//! mean of `m` copies of `x` is exactly `x` and order-of-summation error
//! stays far below the tolerances the scores are checked against.

/// Compensated sum, returned as `(hi, lo)` with `hi + lo` the running total.
fn neumaier(values: impl IntoIterator<Item = f64>) -> (f64, f64) {
    let mut sum = 0.0f64;
    let mut comp = 0.0f64;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    // renormalise so |lo| <= ulp(hi)/2
    let hi = sum + comp;
    let lo = comp - (hi - sum);
    (hi, lo)
}

pub fn sum(values: &[f64]) -> f64 {
    let (hi, lo) = neumaier(values.iter().copied());
    hi + lo
}

/// Arithmetic mean; `NaN` for an empty slice.
pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let n = values.len() as f64;
    let (hi, lo) = neumaier(values.iter().copied());
    let q = hi / n;
    // exact remainder of hi - q*n
    let r = (-q).mul_add(n, hi) + lo;
    q + r / n
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_of_copies_is_exact() {
        for v in 2..=64u32 {
            let x = -(v as f64).ln();
            for m in [1usize, 2, 3, 5, 7, 10, 33, 100, 999, 4096, 10_007] {
                assert_eq!(mean(&vec![x; m]), x, "V={v} m={m}");
            }
        }
    }

    #[test]
    fn mean_basic() {
        assert!((mean(&[-0.2, -0.4]) + 0.3).abs() < 1e-16);
        assert!(mean(&[]).is_nan());
        assert_eq!(mean(&[1.0, 2.0, 3.0, 4.0]), 2.5);
    }

    #[test]
    fn sum_cancellation() {
        assert_eq!(sum(&[1e16, 1.0, -1e16]), 1.0);
    }
}
