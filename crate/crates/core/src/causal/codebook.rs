//! K-means codebook over training visual features and global-feature
//! sampling from it.

use ndarray::{Array2, ArrayView1, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{validation, Result};

pub const MAX_ITERS: usize = 100;
pub const SHIFT_TOL: f64 = 1e-4;
pub const DEFAULT_RESTARTS: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VisualCodebook {
    /// `K × d`
    pub centroids: Array2<f64>,
    pub learnable: bool,
}

impl VisualCodebook {
    pub fn k(&self) -> usize {
        self.centroids.nrows()
    }
}

/// Result of one Lloyd run.
#[derive(Clone, Debug)]
pub struct KMeansFit {
    pub centroids: Array2<f64>,
    pub assignments: Vec<usize>,
    /// SSE after every assignment step.
    pub sse_history: Vec<f64>,
}

impl KMeansFit {
    pub fn sse(&self) -> f64 {
        *self.sse_history.last().expect("at least one iteration")
    }
}

fn sq_dist(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(point: ArrayView1<f64>, centroids: &Array2<f64>) -> (usize, f64) {
    centroids
        .rows()
        .into_iter()
        .enumerate()
        .map(|(j, c)| (j, sq_dist(point, c)))
        .fold((0, f64::INFINITY), |best, cur| if cur.1 < best.1 { cur } else { best })
}

fn plus_plus_init<R: Rng>(points: &Array2<f64>, k: usize, rng: &mut R) -> Array2<f64> {
    let m = points.nrows();
    let mut chosen = vec![rng.random_range(0..m)];
    let mut d2: Vec<f64> = points
        .rows()
        .into_iter()
        .map(|p| sq_dist(p, points.row(chosen[0])))
        .collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total <= 0.0 {
            // every point coincides with a chosen centroid
            (0..m).find(|i| !chosen.contains(i)).unwrap_or(0)
        } else {
            let mut target = rng.random::<f64>() * total;
            let mut pick = m - 1;
            for (i, &w) in d2.iter().enumerate() {
                if target < w {
                    pick = i;
                    break;
                }
                target -= w;
            }
            pick
        };
        chosen.push(next);
        for (i, p) in points.rows().into_iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(p, points.row(next)));
        }
    }
    points.select(Axis(0), &chosen)
}

/// One Lloyd run from a k-means++ start. Empty clusters keep their centroid.
pub fn lloyd<R: Rng>(points: &Array2<f64>, k: usize, rng: &mut R) -> KMeansFit {
    let mut centroids = plus_plus_init(points, k, rng);
    let mut sse_history = Vec::new();
    let mut assignments = vec![0; points.nrows()];
    for _ in 0..MAX_ITERS {
        let mut sse = 0.0;
        for (i, p) in points.rows().into_iter().enumerate() {
            let (j, d) = nearest(p, &centroids);
            assignments[i] = j;
            sse += d;
        }
        sse_history.push(sse);

        let mut sums = Array2::<f64>::zeros(centroids.dim());
        let mut counts = vec![0usize; k];
        for (i, p) in points.rows().into_iter().enumerate() {
            let mut row = sums.row_mut(assignments[i]);
            row += &p;
            counts[assignments[i]] += 1;
        }
        let mut shift: f64 = 0.0;
        for j in 0..k {
            if counts[j] == 0 {
                continue;
            }
            let new = &sums.row(j) / counts[j] as f64;
            shift = shift.max(sq_dist(new.view(), centroids.row(j)).sqrt());
            centroids.row_mut(j).assign(&new);
        }
        if shift < SHIFT_TOL {
            break;
        }
    }
    // final assignment against the settled centroids
    let mut sse = 0.0;
    for (i, p) in points.rows().into_iter().enumerate() {
        let (j, d) = nearest(p, &centroids);
        assignments[i] = j;
        sse += d;
    }
    sse_history.push(sse);
    KMeansFit {
        centroids,
        assignments,
        sse_history,
    }
}

/// Best of `restarts` Lloyd runs, deterministic given `seed`.
pub fn kmeans(points: &Array2<f64>, k: usize, seed: u64, restarts: usize) -> Result<KMeansFit> {
    let m = points.nrows();
    if k == 0 {
        return Err(validation("codebook size K must be positive"));
    }
    if m < k {
        return Err(validation(format!("{m} feature vectors cannot seed {k} centroids")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<KMeansFit> = None;
    for _ in 0..restarts.max(1) {
        let fit = lloyd(points, k, &mut rng);
        if best.as_ref().is_none_or(|b| fit.sse() < b.sse()) {
            best = Some(fit);
        }
    }
    Ok(best.expect("at least one restart"))
}

pub fn build_codebook(features: &Array2<f64>, k: usize, seed: u64) -> Result<VisualCodebook> {
    let fit = kmeans(features, k, seed, DEFAULT_RESTARTS)?;
    Ok(VisualCodebook {
        centroids: fit.centroids,
        learnable: true,
    })
}

/// Draws `n` centroid indices uniformly with replacement.
pub fn sample_indices<R: Rng + ?Sized>(k: usize, n: usize, rng: &mut R) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(0..k)).collect()
}

/// `n` rows drawn uniformly with replacement from the centroids.
pub fn sample_global(codebook: &VisualCodebook, n: usize, seed: u64) -> Result<Array2<f64>> {
    if codebook.k() == 0 {
        return Err(validation("cannot sample from an empty codebook"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let idx = sample_indices(codebook.k(), n, &mut rng);
    Ok(codebook.centroids.select(Axis(0), &idx))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn two_obvious_clusters() {
        let pts = array![[0.0, 0.0], [0.0, 1.0], [10.0, 0.0], [10.0, 1.0]];
        let cb = build_codebook(&pts, 2, 7).unwrap();
        let mut rows: Vec<Vec<f64>> = cb.centroids.rows().into_iter().map(|r| r.to_vec()).collect();
        rows.sort_by(|a, b| a[0].partial_cmp(&b[0]).unwrap());
        assert_eq!(rows, vec![vec![0.0, 0.5], vec![10.0, 0.5]]);
    }

    #[test]
    fn k_equals_m_gives_zero_sse() {
        let pts = array![[0.0, 0.0], [3.0, 1.0], [-2.0, 5.0]];
        let fit = kmeans(&pts, 3, 1, 1).unwrap();
        assert_eq!(fit.sse(), 0.0);
    }

    #[test]
    fn too_few_points() {
        let pts = array![[0.0, 0.0]];
        assert!(build_codebook(&pts, 2, 0).is_err());
    }

    #[test]
    fn sampling() {
        let cb = VisualCodebook {
            centroids: array![[1.0, 2.0]],
            learnable: true,
        };
        let s = sample_global(&cb, 5, 3).unwrap();
        assert_eq!(s.dim(), (5, 2));
        assert!(s.rows().into_iter().all(|r| r.to_vec() == vec![1.0, 2.0]));
        let empty = VisualCodebook {
            centroids: Array2::zeros((0, 2)),
            learnable: true,
        };
        assert!(sample_global(&empty, 1, 0).is_err());
        let cb3 = VisualCodebook {
            centroids: array![[0.0], [1.0], [2.0]],
            learnable: true,
        };
        assert_eq!(sample_global(&cb3, 8, 11).unwrap(), sample_global(&cb3, 8, 11).unwrap());
    }
}
