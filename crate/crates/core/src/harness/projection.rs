use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};

/// Top-2 principal-direction projection of a set of embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct Projection {
    /// `[n, 2]`, zero mean per column.
    pub coords: Array2<f64>,
    /// Unit loadings, one row per axis; the largest-magnitude entry of each is positive.
    pub components: Array2<f64>,
    pub explained_variance: [f64; 2],
    /// Fewer than two nonzero directions; the missing axes are zero.
    pub padded: bool,
}

/// Deterministic PCA onto two axes. Needs at least 3 points.
pub fn pca_2d(x: ArrayView2<'_, f32>) -> Result<Projection> {
    let (n, d) = x.dim();
    if n < 3 {
        return Err(Error::config(format!(
            "projection needs at least 3 embeddings, got {n}"
        )));
    }
    let mut centered = DMatrix::<f64>::zeros(n, d);
    for j in 0..d {
        let m = x.column(j).iter().map(|&v| v as f64).sum::<f64>() / n as f64;
        for i in 0..n {
            centered[(i, j)] = x[[i, j]] as f64 - m;
        }
    }
    let cov = centered.transpose() * &centered / n as f64;
    let eig = SymmetricEigen::new(cov.clone());
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .total_cmp(&eig.eigenvalues[a])
            .then(a.cmp(&b))
    });
    let tol = 1e-10 * cov.trace().max(f64::MIN_POSITIVE);
    let mut components = Array2::<f64>::zeros((2, d));
    let mut explained = [0.0; 2];
    let mut padded = false;
    for (axis, &k) in order.iter().take(2).enumerate() {
        let lambda = eig.eigenvalues[k];
        if lambda <= tol {
            padded = true;
            continue;
        }
        let v = eig.eigenvectors.column(k);
        let lead = (0..d).fold(
            0,
            |best, j| if v[j].abs() > v[best].abs() { j } else { best },
        );
        let sign = if v[lead] < 0.0 { -1.0 } else { 1.0 };
        for j in 0..d {
            components[[axis, j]] = sign * v[j];
        }
        explained[axis] = lambda;
    }
    if d < 2 {
        padded = true;
    }
    if padded {
        log::warn!("embeddings span fewer than two directions; padding the projection with zeros");
    }
    let mut coords = Array2::<f64>::zeros((n, 2));
    for i in 0..n {
        for axis in 0..2 {
            coords[[i, axis]] = (0..d)
                .map(|j| centered[(i, j)] * components[[axis, j]])
                .sum();
        }
    }
    Ok(Projection {
        coords,
        components,
        explained_variance: explained,
        padded,
    })
}

/// Area under the ROC curve of `scores` for the positive class, with ties
/// counted as one half (Mann-Whitney statistic).
pub fn roc_auc(scores: &[f64], positive: &[bool]) -> Result<f64> {
    assert_eq!(scores.len(), positive.len(), "roc_auc: length mismatch");
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::config("AUC needs both classes"));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Midranks over tie groups.
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += idx[i..=j].iter().filter(|&&k| positive[k]).count() as f64 * mid;
        i = j + 1;
    }
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// L2-regularized logistic regression on standardized features.
#[derive(Clone, Debug, PartialEq)]
pub struct LogisticModel {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    /// `[bias, w_1, ..., w_d]` in standardized units.
    pub weights: Vec<f64>,
}

impl LogisticModel {
    /// Newton's method with an L2 penalty of 1e-4.
    pub fn fit(x: &Array2<f64>, y: &[bool]) -> Result<Self> {
        let (n, d) = x.dim();
        if n != y.len() || n == 0 {
            return Err(Error::config("logistic fit needs one label per row"));
        }
        let mut mean = vec![0.0; d];
        let mut scale = vec![1.0; d];
        for j in 0..d {
            let col = x.column(j);
            let m = col.sum() / n as f64;
            let sd = (col.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n as f64).sqrt();
            mean[j] = m;
            if sd > 0.0 {
                scale[j] = sd;
            }
        }
        let feats = design(x, &mean, &scale);
        let l2 = 1e-4;
        let mut w = nalgebra::DVector::<f64>::zeros(d + 1);
        for _ in 0..100 {
            let z = &feats * &w;
            let p = z.map(|v| 1.0 / (1.0 + (-v).exp()));
            let mut grad = nalgebra::DVector::<f64>::zeros(d + 1);
            let mut hess = DMatrix::<f64>::identity(d + 1, d + 1) * l2;
            for i in 0..n {
                let r = p[i] - if y[i] { 1.0 } else { 0.0 };
                let s = p[i] * (1.0 - p[i]);
                let row = feats.row(i);
                grad += row.transpose() * r;
                hess += row.transpose() * row * s;
            }
            grad += &w * l2;
            let Some(step) = hess.lu().solve(&grad) else {
                break;
            };
            w -= &step;
            if step.norm() < 1e-10 {
                break;
            }
        }
        Ok(LogisticModel {
            mean,
            scale,
            weights: w.iter().copied().collect(),
        })
    }

    /// Log-odds of the positive class per row.
    pub fn decision(&self, x: &Array2<f64>) -> Vec<f64> {
        let w = nalgebra::DVector::from_column_slice(&self.weights);
        (design(x, &self.mean, &self.scale) * w)
            .iter()
            .copied()
            .collect()
    }
}

fn design(x: &Array2<f64>, mean: &[f64], scale: &[f64]) -> DMatrix<f64> {
    let (n, d) = x.dim();
    let mut feats = DMatrix::<f64>::from_element(n, d + 1, 1.0);
    for j in 0..d {
        for i in 0..n {
            feats[(i, j + 1)] = (x[[i, j]] - mean[j]) / scale[j];
        }
    }
    feats
}

/// In-sample AUC of a logistic classifier on the given features.
pub fn logistic_auc(x: &Array2<f64>, y: &[bool]) -> Result<f64> {
    roc_auc(&LogisticModel::fit(x, y)?.decision(x), y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;

    #[test]
    fn auc_by_pair_counting() {
        let s = [0.1, 0.4, 0.35, 0.8, 0.4];
        let y = [false, false, true, true, true];
        // Oracle: fraction of (pos, neg) pairs ranked correctly, ties 1/2.
        let mut good = 0.0;
        let mut total = 0.0;
        for i in 0..5 {
            for j in 0..5 {
                if y[i] && !y[j] {
                    total += 1.0;
                    good += if s[i] > s[j] {
                        1.0
                    } else if s[i] == s[j] {
                        0.5
                    } else {
                        0.0
                    };
                }
            }
        }
        assert!((roc_auc(&s, &y).unwrap() - good / total).abs() < 1e-12);
        assert!(roc_auc(&s, &[true; 5]).is_err());
    }

    #[test]
    fn projection_is_centered_and_signed() {
        let x = arr2(&[
            [1.0f32, 0.0, 2.0],
            [2.0, 1.0, 0.0],
            [0.0, -1.0, 1.0],
            [3.0, 0.5, -1.0],
            [1.0, 0.0, 2.0],
        ]);
        let p = pca_2d(x.view()).unwrap();
        for axis in 0..2 {
            assert!(p.coords.column(axis).sum().abs() < 1e-12);
            let c = p.components.row(axis);
            let lead = c
                .iter()
                .fold(0.0f64, |a, &v| if v.abs() > a.abs() { v } else { a });
            assert!(lead > 0.0);
        }
        // Duplicated points project to the same coordinates.
        assert_eq!(p.coords.row(0), p.coords.row(4));
        assert!(p.explained_variance[0] >= p.explained_variance[1]);
        assert!(!p.padded);
    }

    #[test]
    fn collinear_points_pad_second_axis() {
        let x = arr2(&[[0.0f32, 0.0], [1.0, 1.0], [2.0, 2.0], [3.0, 3.0]]);
        let p = pca_2d(x.view()).unwrap();
        assert!(p.padded);
        assert!(p.coords.column(1).iter().all(|&v| v == 0.0));
        assert!(pca_2d(x.slice(ndarray::s![..2, ..])).is_err());
    }

    #[test]
    fn separable_clusters_score_one() {
        let mut x = Array2::<f64>::zeros((40, 2));
        let mut y = vec![false; 40];
        for i in 0..40 {
            let pos = i % 2 == 0;
            y[i] = pos;
            x[[i, 0]] = if pos { 2.0 } else { -2.0 } + (i as f64 * 0.37).sin();
            x[[i, 1]] = (i as f64 * 1.3).cos();
        }
        assert_eq!(logistic_auc(&x, &y).unwrap(), 1.0);
        // Scoring new points uses the training standardization.
        let model = LogisticModel::fit(&x, &y).unwrap();
        let probe = ndarray::arr2(&[[3.0, 0.0], [-3.0, 0.0]]);
        let s = model.decision(&probe);
        assert!(s[0] > 0.0 && s[1] < 0.0);
    }
}
