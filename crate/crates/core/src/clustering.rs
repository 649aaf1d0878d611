//! Row assignment by K-means and per-row count statistics.

use nalgebra::{Matrix3, Point3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MAX_ITERATIONS: usize = 100;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ClusterError {
    #[error("K must be at least 1")]
    InvalidK,
    #[error("{points} points cannot form {k} clusters")]
    TooFewPoints { points: usize, k: usize },
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("need at least two rows, got {0}")]
    TooFewRows(usize),
    #[error("zero variance in correlation input")]
    ZeroVariance,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RowAssignment {
    pub fruit_index: usize,
    pub row_label: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RowClustering {
    pub assignments: Vec<RowAssignment>,
    /// Mean 3-D position of each row, indexed by label.
    pub centroids: Vec<Point3<f64>>,
    /// Unit horizontal direction across the rows; labels increase along it.
    pub cross_row_axis: Vector3<f64>,
    /// Clustering objective after each assignment step.
    pub objective_history: Vec<f64>,
}

impl RowClustering {
    pub fn labels(&self) -> Vec<usize> {
        self.assignments.iter().map(|a| a.row_label).collect()
    }
}

struct Lloyd {
    labels: Vec<usize>,
    centers: Vec<f64>,
    history: Vec<f64>,
}

fn sq(x: f64) -> f64 {
    x * x
}

fn nearest(x: f64, centers: &[f64]) -> usize {
    let mut best = 0;
    for (c, &m) in centers.iter().enumerate() {
        if sq(x - m) < sq(x - centers[best]) {
            best = c;
        }
    }
    best
}

/// Seeding by squared-distance sampling.
fn seed_centers<R: Rng>(values: &[f64], k: usize, rng: &mut R) -> Vec<f64> {
    let mut centers = vec![values[rng.random_range(0..values.len())]];
    while centers.len() < k {
        let d2: Vec<f64> = values
            .iter()
            .map(|&x| centers.iter().map(|&c| sq(x - c)).fold(f64::INFINITY, f64::min))
            .collect();
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = d2.len() - 1;
            for (i, &w) in d2.iter().enumerate() {
                if target < w {
                    chosen = i;
                    break;
                }
                target -= w;
            }
            chosen
        } else {
            rng.random_range(0..values.len())
        };
        centers.push(values[pick]);
    }
    centers
}

/// Lloyd iterations on scalar values.
fn lloyd_1d(values: &[f64], k: usize, seed: u64) -> Lloyd {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers = seed_centers(values, k, &mut rng);
    let mut labels: Vec<usize> = Vec::new();
    let mut history = Vec::new();

    for _ in 0..MAX_ITERATIONS {
        let next: Vec<usize> = values.iter().map(|&x| nearest(x, &centers)).collect();
        let objective: f64 = values.iter().zip(&next).map(|(&x, &l)| sq(x - centers[l])).sum();
        history.push(objective);
        if next == labels {
            break;
        }
        labels = next;

        let mut sums = vec![0.0; k];
        let mut counts = vec![0usize; k];
        for (&x, &l) in values.iter().zip(&labels) {
            sums[l] += x;
            counts[l] += 1;
        }
        for c in 0..k {
            if counts[c] > 0 {
                centers[c] = sums[c] / counts[c] as f64;
            }
        }
        // Empty clusters take the point farthest from its own center.
        for c in 0..k {
            if counts[c] == 0 {
                let far = (0..values.len())
                    .max_by(|&a, &b| {
                        sq(values[a] - centers[labels[a]]).total_cmp(&sq(values[b] - centers[labels[b]]))
                    })
                    .expect("non-empty input");
                centers[c] = values[far];
            }
        }
    }
    Lloyd {
        labels,
        centers,
        history,
    }
}

/// Two dominant principal axes of the cloud, i.e. the ground plane of an
/// orchard whose vertical extent is smaller than its horizontal extent.
fn ground_axes(points: &[Point3<f64>]) -> [Vector3<f64>; 2] {
    let n = points.len() as f64;
    let mean = points.iter().map(|p| p.coords).sum::<Vector3<f64>>() / n;
    let mut cov = Matrix3::zeros();
    for p in points {
        let d = p.coords - mean;
        cov += d * d.transpose();
    }
    let eig = cov.symmetric_eigen();
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    [0, 1].map(|i| canonical_sign(eig.eigenvectors.column(order[i]).into_owned()))
}

/// Flips `v` so its largest-magnitude component is positive.
fn canonical_sign(v: Vector3<f64>) -> Vector3<f64> {
    let big = v.iamax();
    if v[big] < 0.0 {
        -v
    } else {
        v
    }
}

/// Assigns points to `k` orchard rows.
///
/// The cloud is reduced to its ground plane; of the two horizontal principal
/// axes, the one along which `k` clusters separate best (lowest ratio of
/// within-cluster to total scatter) is taken as the cross-row axis, and
/// K-means runs on the coordinate along it. Labels are ordered by row
/// position along that axis.
pub fn kmeans_rows(points: &[Point3<f64>], k: usize, seed: u64) -> Result<RowClustering, ClusterError> {
    if k == 0 {
        return Err(ClusterError::InvalidK);
    }
    if points.len() < k {
        return Err(ClusterError::TooFewPoints {
            points: points.len(),
            k,
        });
    }

    let axes = if points.len() >= 3 {
        ground_axes(points)
    } else {
        [Vector3::x(), Vector3::y()]
    };
    let mut best: Option<(f64, Vector3<f64>, Lloyd)> = None;
    for axis in axes {
        let values: Vec<f64> = points.iter().map(|p| p.coords.dot(&axis)).collect();
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        let total: f64 = values.iter().map(|&x| sq(x - mean)).sum();
        let run = lloyd_1d(&values, k, seed);
        let within = *run.history.last().expect("at least one iteration");
        let score = if total > 0.0 { within / total } else { 0.0 };
        if best.as_ref().is_none_or(|(s, _, _)| score < *s) {
            best = Some((score, axis, run));
        }
    }
    let (_, axis, run) = best.expect("two candidate axes");

    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| run.centers[a].total_cmp(&run.centers[b]));
    let mut relabel = vec![0; k];
    for (new, &old) in order.iter().enumerate() {
        relabel[old] = new;
    }

    let assignments: Vec<RowAssignment> = run
        .labels
        .iter()
        .enumerate()
        .map(|(i, &l)| RowAssignment {
            fruit_index: i,
            row_label: relabel[l],
        })
        .collect();

    let mut sums = vec![Vector3::zeros(); k];
    let mut counts = vec![0usize; k];
    for a in &assignments {
        sums[a.row_label] += points[a.fruit_index].coords;
        counts[a.row_label] += 1;
    }
    let centroids = sums
        .iter()
        .zip(&counts)
        .map(|(s, &c)| Point3::from(if c > 0 { s / c as f64 } else { *s }))
        .collect();

    Ok(RowClustering {
        assignments,
        centroids,
        cross_row_axis: axis,
        objective_history: run.history,
    })
}

/// Histogram of row labels, indexed by label up to the largest one present.
pub fn row_counts(assignments: &[RowAssignment]) -> Vec<usize> {
    let Some(max) = assignments.iter().map(|a| a.row_label).max() else {
        return Vec::new();
    };
    let mut counts = vec![0; max + 1];
    for a in assignments {
        counts[a.row_label] += 1;
    }
    counts
}

/// Sample Pearson correlation coefficient.
pub fn pearson_correlation(counts: &[f64], yields: &[f64]) -> Result<f64, ClusterError> {
    if counts.len() != yields.len() {
        return Err(ClusterError::LengthMismatch(counts.len(), yields.len()));
    }
    if counts.len() < 2 {
        return Err(ClusterError::TooFewRows(counts.len()));
    }
    let n = counts.len() as f64;
    let mx = counts.iter().sum::<f64>() / n;
    let my = yields.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&x, &y) in counts.iter().zip(yields) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(ClusterError::ZeroVariance);
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::{Distribution, Normal};

    fn blob(rng: &mut ChaCha8Rng, x: f64, n: usize) -> Vec<Point3<f64>> {
        let noise = Normal::new(0.0, 0.5).unwrap();
        (0..n)
            .map(|_| Point3::new(x + noise.sample(rng), noise.sample(rng), noise.sample(rng)))
            .collect()
    }

    #[test]
    fn two_separated_clusters() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut pts = blob(&mut rng, 0.0, 10);
        pts.extend(blob(&mut rng, 100.0, 10));
        let c = kmeans_rows(&pts, 2, 7).unwrap();
        let labels = c.labels();
        assert!(labels[..10].iter().all(|&l| l == 0));
        assert!(labels[10..].iter().all(|&l| l == 1));
        assert_eq!(row_counts(&c.assignments), vec![10, 10]);
    }

    #[test]
    fn single_cluster_centroid_is_mean() {
        let pts = vec![
            Point3::new(0.0, 0.0, 0.0),
            Point3::new(2.0, 0.0, 1.0),
            Point3::new(1.0, 3.0, 2.0),
        ];
        let c = kmeans_rows(&pts, 1, 0).unwrap();
        assert!(c.labels().iter().all(|&l| l == 0));
        assert!((c.centroids[0] - Point3::new(1.0, 1.0, 1.0)).norm() < 1e-12);
    }

    #[test]
    fn errors() {
        assert_eq!(kmeans_rows(&[], 0, 0), Err(ClusterError::InvalidK));
        assert_eq!(
            kmeans_rows(&[Point3::origin()], 2, 0),
            Err(ClusterError::TooFewPoints { points: 1, k: 2 })
        );
        assert!(row_counts(&[]).is_empty());
        assert_eq!(pearson_correlation(&[1.0, 1.0], &[1.0, 2.0]), Err(ClusterError::ZeroVariance));
        assert_eq!(pearson_correlation(&[1.0], &[1.0]), Err(ClusterError::TooFewRows(1)));
        assert_eq!(
            pearson_correlation(&[1.0, 2.0], &[1.0]),
            Err(ClusterError::LengthMismatch(2, 1))
        );
    }

    #[test]
    fn elongated_rows_split_across_not_along() {
        // Rows 40 m long, 3 m apart: splitting along the rows would give a
        // lower 2-D objective, the row structure must still win.
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut pts = Vec::new();
        let mut truth = Vec::new();
        for row in 0..4 {
            for _ in 0..30 {
                pts.push(Point3::new(
                    rng.random_range(0.0..40.0),
                    3.0 * row as f64 + rng.random_range(-0.4..0.4),
                    rng.random_range(1.0..3.0),
                ));
                truth.push(row);
            }
        }
        let c = kmeans_rows(&pts, 4, 1).unwrap();
        assert_eq!(c.labels(), truth);
        assert!(c.cross_row_axis.y.abs() > 0.99);
    }

    #[test]
    fn pearson_fixtures() {
        let x = [1.0, 2.0, 3.0, 4.0, 5.0];
        let y = [2.0, 4.0, 6.0, 8.0, 10.0];
        assert!((pearson_correlation(&x, &y).unwrap() - 1.0).abs() <= 1e-12);
        assert!((pearson_correlation(&x, &x).unwrap() - 1.0).abs() <= 1e-12);
        let neg: Vec<f64> = x.iter().map(|v| 7.0 - v).collect();
        assert!((pearson_correlation(&x, &neg).unwrap() + 1.0).abs() <= 1e-12);
    }

    proptest! {
        #[test]
        fn objective_never_increases(
            values in proptest::collection::vec((-50.0f64..50.0, -50.0f64..50.0, 0.0f64..3.0), 8..60),
            k in 1usize..6,
            seed in 0u64..1000,
        ) {
            let pts: Vec<Point3<f64>> = values.iter().map(|&(x, y, z)| Point3::new(x, y, z)).collect();
            let c = kmeans_rows(&pts, k, seed).unwrap();
            for w in c.objective_history.windows(2) {
                prop_assert!(w[1] <= w[0] * (1.0 + 1e-12) + 1e-9);
            }
            prop_assert_eq!(c, kmeans_rows(&pts, k, seed).unwrap());
        }

        #[test]
        fn pearson_affine_invariant(
            data in proptest::collection::vec((0.0f64..100.0, 0.0f64..100.0), 3..20),
            a in 0.1f64..10.0,
            b in -100.0f64..100.0,
        ) {
            let x: Vec<f64> = data.iter().map(|d| d.0).collect();
            let y: Vec<f64> = data.iter().map(|d| d.1).collect();
            if let Ok(r) = pearson_correlation(&x, &y) {
                let xt: Vec<f64> = x.iter().map(|v| a * v + b).collect();
                let r2 = pearson_correlation(&xt, &y).unwrap();
                prop_assert!((r - r2).abs() <= 1e-12);
            }
        }
    }
}
