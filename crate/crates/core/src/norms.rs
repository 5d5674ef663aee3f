//! Site-weighted vector norms over the M-vector of per-site values.

use crate::error::{Error, Result};

fn check(a: &[f64], weights: &[f64]) -> Result<()> {
    if a.len() != weights.len() {
        return Err(Error::dim(format!(
            "vector of length {} with {} weights",
            a.len(),
            weights.len()
        )));
    }
    Ok(())
}

/// `Σₘ wₘ |aₘ|`.
pub fn weighted_l1_norm(a: &[f64], weights: &[f64]) -> Result<f64> {
    check(a, weights)?;
    Ok(a.iter().zip(weights).map(|(x, w)| w * x.abs()).sum())
}

/// `√(Σₘ wₘ aₘ²)`.
pub fn weighted_l2_norm(a: &[f64], weights: &[f64]) -> Result<f64> {
    check(a, weights)?;
    Ok(weighted_l2_unchecked(a, weights))
}

pub(crate) fn weighted_l2_unchecked(a: &[f64], weights: &[f64]) -> f64 {
    a.iter()
        .zip(weights)
        .map(|(x, w)| w * x * x)
        .sum::<f64>()
        .sqrt()
}

/// Weights `nₘ / N` for a list of site sample sizes.
pub fn weights_from_counts(counts: &[usize]) -> Result<Vec<f64>> {
    let total: usize = counts.iter().sum();
    if counts.is_empty() || counts.contains(&0) {
        return Err(Error::invalid("site sample sizes must be positive"));
    }
    Ok(counts.iter().map(|&n| n as f64 / total as f64).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn examples() {
        assert_eq!(weighted_l1_norm(&[2.0, -2.0], &[0.5, 0.5]).unwrap(), 2.0);
        assert_eq!(weighted_l1_norm(&[0.0; 3], &[0.2, 0.3, 0.5]).unwrap(), 0.0);
        // 0.2·1 + 0.3·2 + 0.5·3
        let v = weighted_l1_norm(&[1.0, 2.0, 3.0], &[0.2, 0.3, 0.5]).unwrap();
        assert!((v - 2.3).abs() < 1e-15);

        assert_eq!(weighted_l2_norm(&[3.0, -3.0], &[0.5, 0.5]).unwrap(), 3.0);
        let v = weighted_l2_norm(&[1.0, 0.0], &[0.5, 0.5]).unwrap();
        assert!((v - 0.5f64.sqrt()).abs() < 1e-15);
        assert_eq!(weighted_l2_norm(&[0.0, 0.0], &[0.5, 0.5]).unwrap(), 0.0);
    }

    #[test]
    fn length_mismatch() {
        assert!(matches!(
            weighted_l1_norm(&[1.0], &[0.5, 0.5]),
            Err(Error::Dimension(_))
        ));
        assert!(weighted_l2_norm(&[1.0, 2.0, 3.0], &[1.0]).is_err());
    }

    fn vec_and_weights() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
        (1usize..8).prop_flat_map(|m| {
            (
                prop::collection::vec(-1e3f64..1e3, m),
                prop::collection::vec(1usize..500, m),
            )
                .prop_map(|(a, counts)| (a, weights_from_counts(&counts).unwrap()))
        })
    }

    proptest! {
        #[test]
        fn jensen_ordering((a, w) in vec_and_weights()) {
            let l1 = weighted_l1_norm(&a, &w).unwrap();
            let l2 = weighted_l2_norm(&a, &w).unwrap();
            prop_assert!(l1 <= l2 * (1.0 + 1e-12) + 1e-300);
        }

        #[test]
        fn absolute_homogeneity((a, w) in vec_and_weights(), c in -50.0f64..50.0) {
            let scaled: Vec<f64> = a.iter().map(|x| c * x).collect();
            for f in [weighted_l1_norm, weighted_l2_norm] {
                let lhs = f(&scaled, &w).unwrap();
                let rhs = c.abs() * f(&a, &w).unwrap();
                prop_assert!((lhs - rhs).abs() <= 1e-10 * (1.0 + rhs));
            }
        }
    }
}
