//! Small numeric helpers shared across modules.

/// Fixed-order pairwise (tree) summation. Deterministic for a given input
/// order and independent of chunking/thread count, unlike a running sum whose
/// rounding depends on accumulation order.
pub(crate) fn pairwise_sum(xs: &[f64]) -> f64 {
    match xs.len() {
        0 => 0.0,
        1 => xs[0],
        2 => xs[0] + xs[1],
        n => {
            let mid = n / 2;
            pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
        }
    }
}

pub(crate) fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    pairwise_sum(xs) / xs.len() as f64
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let products: Vec<f64> = a.iter().zip(b).map(|(x, y)| x * y).collect();
    pairwise_sum(&products)
}

pub(crate) fn inf_norm(xs: &[f64]) -> f64 {
    xs.iter().fold(0.0, |acc, x| acc.max(x.abs()))
}

/// Index of the largest element; ties resolve to the smallest index.
pub(crate) fn argmax(xs: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &x) in xs.iter().enumerate() {
        match best {
            None => best = Some(i),
            Some(b) if x > xs[b] => best = Some(i),
            _ => {}
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pairwise_sum_matches_exact_on_integers() {
        let xs: Vec<f64> = (1..=1000).map(|i| i as f64).collect();
        assert_eq!(pairwise_sum(&xs), 500_500.0);
    }

    #[test]
    fn pairwise_sum_is_split_invariant() {
        // the same slice must produce the same bits regardless of how a
        // caller might have chunked the work
        let xs: Vec<f64> = (0..101).map(|i| (i as f64 * 0.37).sin() / 7.0).collect();
        let total = pairwise_sum(&xs);
        assert_eq!(total, pairwise_sum(&xs));
        assert!((total - xs.iter().sum::<f64>()).abs() < 1e-12);
    }

    #[test]
    fn mean_of_empty_is_nan() {
        assert!(mean(&[]).is_nan());
        assert_eq!(mean(&[2.0, 4.0]), 3.0);
    }

    #[test]
    fn inf_norm_takes_largest_magnitude() {
        assert_eq!(inf_norm(&[0.5, -3.0, 2.0]), 3.0);
        assert_eq!(inf_norm(&[]), 0.0);
    }

    #[test]
    fn argmax_breaks_ties_toward_smallest_index() {
        assert_eq!(argmax(&[0.1, 0.7, 0.7, 0.2]), Some(1));
        assert_eq!(argmax(&[3.0]), Some(0));
        assert_eq!(argmax(&[]), None);
    }
}
