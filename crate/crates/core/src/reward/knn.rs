use std::cmp::Ordering;

use ndarray::{Array2, ArrayView1, ArrayView2};

use crate::embedding::EmbeddingSet;
use crate::error::{Error, Result};

/// One search hit: Euclidean distance to the point at `index`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Neighbor {
    pub distance: f64,
    pub index: usize,
}

fn by_distance_then_index(a: &Neighbor, b: &Neighbor) -> Ordering {
    a.distance
        .total_cmp(&b.distance)
        .then(a.index.cmp(&b.index))
}

/// Exact nearest-neighbor search over a fixed point set. Distances are
/// accumulated in `f64`.
#[derive(Clone, Debug)]
pub struct KnnIndex {
    points: Array2<f64>,
}

impl KnnIndex {
    pub fn new(points: ArrayView2<'_, f32>) -> Self {
        KnnIndex {
            points: points.mapv(f64::from),
        }
    }

    pub fn from_embeddings(set: &EmbeddingSet) -> Self {
        Self::new(set.vectors.view())
    }

    pub fn len(&self) -> usize {
        self.points.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.points.ncols()
    }

    /// The `m` closest points in ascending distance; equal distances are
    /// ordered by point index.
    pub fn query(&self, q: ArrayView1<'_, f32>, m: usize) -> Result<Vec<Neighbor>> {
        if m == 0 || m > self.len() {
            return Err(Error::NeighborCount {
                m,
                available: self.len(),
            });
        }
        if q.len() != self.dim() {
            return Err(Error::Shape {
                layer: "knn".into(),
                expected: format!("query of dim {}", self.dim()),
                got: format!("dim {}", q.len()),
            });
        }
        let q: Vec<f64> = q.iter().map(|&v| v as f64).collect();
        let mut all: Vec<Neighbor> = self
            .points
            .rows()
            .into_iter()
            .enumerate()
            .map(|(index, p)| {
                let sq: f64 = p.iter().zip(&q).map(|(a, b)| (a - b) * (a - b)).sum();
                Neighbor {
                    distance: sq.sqrt(),
                    index,
                }
            })
            .collect();
        if m < all.len() {
            all.select_nth_unstable_by(m - 1, by_distance_then_index);
            all.truncate(m);
        }
        all.sort_unstable_by(by_distance_then_index);
        Ok(all)
    }
}

/// Top-`m` expert neighbors of a single query.
pub fn knn(query: ArrayView1<'_, f32>, expert: &EmbeddingSet, m: usize) -> Result<Vec<Neighbor>> {
    KnnIndex::from_embeddings(expert).query(query, m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;

    #[test]
    fn self_distance_and_ties() {
        let pts = arr2(&[[1.0f32, 0.0], [0.0, 1.0], [1.0, 0.0], [-1.0, 0.0]]);
        let idx = KnnIndex::new(pts.view());
        let r = idx.query(pts.row(0), 4).unwrap();
        assert_eq!(
            r[0],
            Neighbor {
                distance: 0.0,
                index: 0
            }
        );
        assert_eq!(
            r[1],
            Neighbor {
                distance: 0.0,
                index: 2
            }
        );
        assert_eq!(r[3].index, 3);
        assert_eq!(r[3].distance, 2.0);
        assert!(r.windows(2).all(|w| w[0].distance <= w[1].distance));
    }

    #[test]
    fn neighbor_count_checked() {
        let pts = arr2(&[[1.0f32, 0.0]]);
        let idx = KnnIndex::new(pts.view());
        assert!(matches!(
            idx.query(pts.row(0), 2),
            Err(Error::NeighborCount { m: 2, available: 1 })
        ));
        assert!(idx.query(pts.row(0), 0).is_err());
    }
}
