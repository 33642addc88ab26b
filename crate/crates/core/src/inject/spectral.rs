use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Tolerance on the Frobenius norm of the subspace residual `MQ - Q(QᵀMQ)`.
pub const SUBSPACE_TOL: f64 = 1e-8;
pub const MAX_SUBSPACE_ITERS: usize = 5000;
pub const KMEANS_MAX_ITERS: usize = 100;
pub const KMEANS_TOL: f64 = 1e-6;

/// Spectral embedding of an undirected simple graph: an orthonormal basis of
/// the `k` eigenvectors of `L = I - D^{-1/2} A D^{-1/2}` with the smallest
/// eigenvalues, one row per node, each row scaled to unit length. Isolated
/// nodes get the zero row.
///
/// Orthogonal iteration runs on `2I - L`, whose spectrum lies in `[0, 2]` and
/// whose dominant subspace is the wanted one.
pub fn spectral_embedding(adjacency: &[Vec<usize>], k: usize, seed: u64) -> Vec<Vec<f64>> {
    let n = adjacency.len();
    let inv_sqrt_deg: Vec<f64> = adjacency
        .iter()
        .map(|nb| if nb.is_empty() { 0.0 } else { 1.0 / (nb.len() as f64).sqrt() })
        .collect();
    // y = (I + D^{-1/2} A D^{-1/2}) x, column-major blocks of length n
    let apply = |x: &[f64], y: &mut [f64]| {
        for col in 0..k {
            let xs = &x[col * n..(col + 1) * n];
            let ys = &mut y[col * n..(col + 1) * n];
            for i in 0..n {
                let mut acc = 0.0;
                for &j in &adjacency[i] {
                    acc += inv_sqrt_deg[j] * xs[j];
                }
                ys[i] = xs[i] + inv_sqrt_deg[i] * acc;
            }
        }
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut q: Vec<f64> = (0..n * k).map(|_| rng.gen_range(-1.0..1.0)).collect();
    orthonormalize(&mut q, n, k, &mut rng);
    let mut y = vec![0.0; n * k];
    for _ in 0..MAX_SUBSPACE_ITERS {
        apply(&q, &mut y);
        if residual(&q, &y, n, k) <= SUBSPACE_TOL {
            break;
        }
        std::mem::swap(&mut q, &mut y);
        orthonormalize(&mut q, n, k, &mut rng);
    }

    (0..n)
        .map(|i| {
            let mut row: Vec<f64> = (0..k).map(|c| q[c * n + i]).collect();
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if !adjacency[i].is_empty() && norm > 1e-12 {
                row.iter_mut().for_each(|v| *v /= norm);
            } else {
                row.iter_mut().for_each(|v| *v = 0.0);
            }
            row
        })
        .collect()
}

/// `||Y - Q (QᵀY)||_F` for column-major `n x k` blocks.
fn residual(q: &[f64], y: &[f64], n: usize, k: usize) -> f64 {
    let mut r = y.to_vec();
    for a in 0..k {
        for b in 0..k {
            let coef: f64 = (0..n).map(|i| q[a * n + i] * y[b * n + i]).sum();
            for i in 0..n {
                r[b * n + i] -= q[a * n + i] * coef;
            }
        }
    }
    r.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Modified Gram–Schmidt with one re-orthogonalization pass. Columns that
/// collapse are replaced by fresh random directions.
fn orthonormalize(q: &mut [f64], n: usize, k: usize, rng: &mut ChaCha8Rng) {
    for c in 0..k {
        for attempt in 0..4 {
            for _pass in 0..2 {
                for p in 0..c {
                    let dot: f64 = (0..n).map(|i| q[p * n + i] * q[c * n + i]).sum();
                    for i in 0..n {
                        q[c * n + i] -= dot * q[p * n + i];
                    }
                }
            }
            let norm = (0..n).map(|i| q[c * n + i].powi(2)).sum::<f64>().sqrt();
            if norm > 1e-10 || attempt == 3 {
                let norm = norm.max(f64::MIN_POSITIVE);
                (0..n).for_each(|i| q[c * n + i] /= norm);
                break;
            }
            (0..n).for_each(|i| q[c * n + i] = rng.gen_range(-1.0..1.0));
        }
    }
}

/// Seeded k-means with k-means++ initialization. Returns the label of each
/// point and the final centers.
pub fn kmeans(points: &[Vec<f64>], k: usize, seed: u64) -> (Vec<usize>, Vec<Vec<f64>>) {
    let n = points.len();
    if n == 0 || k == 0 {
        return (vec![0; n], Vec::new());
    }
    let dim = points[0].len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dist2 = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();

    let mut centers: Vec<Vec<f64>> = vec![points[rng.gen_range(0..n)].clone()];
    let mut nearest: Vec<f64> = points.iter().map(|p| dist2(p, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = nearest.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.gen_range(0.0..total);
            let mut chosen = n - 1;
            for (i, &d) in nearest.iter().enumerate() {
                if target < d {
                    chosen = i;
                    break;
                }
                target -= d;
            }
            chosen
        } else {
            rng.gen_range(0..n)
        };
        centers.push(points[pick].clone());
        let c = centers.last().unwrap();
        for (i, p) in points.iter().enumerate() {
            nearest[i] = nearest[i].min(dist2(p, c));
        }
    }

    let assign = |centers: &[Vec<f64>]| -> Vec<usize> { points.iter().map(|p| nearest_center(p, centers)).collect() };

    let mut labels = assign(&centers);
    for _ in 0..KMEANS_MAX_ITERS {
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &l) in points.iter().zip(&labels) {
            counts[l] += 1;
            sums[l].iter_mut().zip(p).for_each(|(s, v)| *s += v);
        }
        let mut shift: f64 = 0.0;
        for c in 0..k {
            let new_center = if counts[c] > 0 {
                sums[c].iter().map(|s| s / counts[c] as f64).collect()
            } else {
                // empty cluster: move to the point farthest from its center
                let far = (0..n)
                    .max_by(|&a, &b| {
                        let da = dist2(&points[a], &centers[labels[a]]);
                        let db = dist2(&points[b], &centers[labels[b]]);
                        da.total_cmp(&db)
                    })
                    .unwrap();
                points[far].clone()
            };
            shift = shift.max(dist2(&new_center, &centers[c]).sqrt());
            centers[c] = new_center;
        }
        labels = assign(&centers);
        if shift <= KMEANS_TOL {
            break;
        }
    }
    (labels, centers)
}

/// Index of the center closest to `p` (first on ties).
pub fn nearest_center(p: &[f64], centers: &[Vec<f64>]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (c, center) in centers.iter().enumerate() {
        let d: f64 = p.iter().zip(center).map(|(x, y)| (x - y) * (x - y)).sum();
        if d < best_d {
            best_d = d;
            best = c;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kmeans_separates_obvious_blobs() {
        let mut pts = Vec::new();
        for i in 0..10 {
            pts.push(vec![0.0 + 0.01 * i as f64, 0.0]);
            pts.push(vec![5.0, 5.0 + 0.01 * i as f64]);
        }
        let (labels, _) = kmeans(&pts, 2, 11);
        for pair in labels.chunks(2) {
            assert_ne!(pair[0], pair[1]);
        }
        assert!(labels.iter().step_by(2).all(|&l| l == labels[0]));
    }

    #[test]
    fn kmeans_with_fewer_distinct_points_than_k() {
        let pts = vec![vec![1.0, 0.0]; 4];
        let (labels, centers) = kmeans(&pts, 3, 0);
        assert_eq!(centers.len(), 3);
        assert_eq!(labels.len(), 4);
        assert!(labels.iter().all(|&l| l < 3));
    }

    #[test]
    fn embedding_rows_are_unit_or_zero() {
        // path 0-1-2-3 plus isolated node 4
        let adj = vec![vec![1], vec![0, 2], vec![1, 3], vec![2], vec![]];
        let emb = spectral_embedding(&adj, 2, 5);
        for (i, row) in emb.iter().enumerate() {
            let norm: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if i == 4 {
                assert_eq!(norm, 0.0);
            } else {
                assert!((norm - 1.0).abs() < 1e-9);
            }
        }
    }
}
