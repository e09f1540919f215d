use ndarray::ArrayView2;
use rayon::prelude::*;

use super::knn::KnnIndex;
use crate::embedding::EmbeddingSet;
use crate::error::{Error, Result};

/// Stabilized particle estimate of the cross-entropy `H(rho_pi, rho_E)`:
/// `mean_i ln(1 + mean_{m nearest} ||z_i - z_E||)`. Additive constants of
/// the underlying estimator are dropped.
pub fn particle_cross_entropy(
    pi: ArrayView2<'_, f32>,
    expert: ArrayView2<'_, f32>,
    m: usize,
) -> Result<f64> {
    if pi.nrows() == 0 || expert.nrows() == 0 {
        return Err(Error::EmptyDataset);
    }
    let index = KnnIndex::new(expert);
    let terms: Vec<f64> = (0..pi.nrows())
        .into_par_iter()
        .map(|i| {
            let nb = index.query(pi.row(i), m)?;
            let mean = nb.iter().map(|n| n.distance).sum::<f64>() / m as f64;
            Ok(mean.ln_1p())
        })
        .collect::<Result<_>>()?;
    Ok(terms.iter().sum::<f64>() / terms.len() as f64)
}

pub fn particle_cross_entropy_sets(
    pi: &EmbeddingSet,
    expert: &EmbeddingSet,
    m: usize,
) -> Result<f64> {
    particle_cross_entropy(pi.vectors.view(), expert.vectors.view(), m)
}

/// Volume of a `d`-ball of radius `r`: `pi^{d/2} / Gamma(d/2 + 1) r^d`.
pub fn hypersphere_volume(radius: f64, d: usize) -> f64 {
    assert!(
        d >= 1 && radius >= 0.0,
        "hypersphere_volume needs d >= 1 and radius >= 0"
    );
    if radius == 0.0 {
        return 0.0;
    }
    let h = d as f64 / 2.0;
    (h * std::f64::consts::PI.ln() - libm::lgamma(h + 1.0) + d as f64 * radius.ln()).exp()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;
    use std::f64::consts::PI;

    #[test]
    fn ball_volumes() {
        assert!((hypersphere_volume(1.0, 2) - PI).abs() < 1e-12);
        assert!((hypersphere_volume(1.0, 3) - 4.0 * PI / 3.0).abs() < 1e-12);
        assert!((hypersphere_volume(2.0, 1) - 4.0).abs() < 1e-12);
        assert_eq!(hypersphere_volume(0.0, 5), 0.0);
        // Recurrence V_d(1) = 2 pi / d * V_{d-2}(1).
        for d in 3..30 {
            let lhs = hypersphere_volume(1.0, d);
            let rhs = 2.0 * PI / d as f64 * hypersphere_volume(1.0, d - 2);
            assert!((lhs / rhs - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn identical_sets_give_zero() {
        let z = arr2(&[[1.0f32, 0.0], [0.0, 1.0], [0.6, 0.8]]);
        assert_eq!(particle_cross_entropy(z.view(), z.view(), 1).unwrap(), 0.0);
    }

    #[test]
    fn empty_sets_rejected() {
        let z = arr2(&[[1.0f32, 0.0]]);
        let empty = ndarray::Array2::<f32>::zeros((0, 2));
        assert!(particle_cross_entropy(empty.view(), z.view(), 1).is_err());
        assert!(particle_cross_entropy(z.view(), empty.view(), 1).is_err());
    }
}
