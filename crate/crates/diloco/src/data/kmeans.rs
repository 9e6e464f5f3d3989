//! Lloyd's k-means with k-means++ seeding, used for distribution-based
//! sharding. Point assignment is data-parallel; every reduction runs in
//! fixed point order, so clustering is deterministic for a given stream.

use crate::par;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Sample an index with probability proportional to `weights`; uniform when
/// all weights are zero (duplicate points).
fn weighted_pick(weights: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return rng.gen_range(0..weights.len());
    }
    let r = rng.gen_range(0.0..total);
    let mut acc = 0.0;
    for (i, &w) in weights.iter().enumerate() {
        acc += w;
        if r < acc {
            return i;
        }
    }
    weights.len() - 1
}

fn kmeans_pp_init(features: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut centroids = Vec::with_capacity(k);
    centroids.push(features[rng.gen_range(0..features.len())].clone());
    let mut d2: Vec<f64> = features.iter().map(|f| dist2(f, &centroids[0])).collect();
    while centroids.len() < k {
        let next = features[weighted_pick(&d2, rng)].clone();
        for (d, f) in d2.iter_mut().zip(features) {
            *d = d.min(dist2(f, &next));
        }
        centroids.push(next);
    }
    centroids
}

/// Cluster `features` into `k` groups; returns a cluster index per point.
/// Runs at most `iters` Lloyd iterations, stopping early on convergence.
/// Empty clusters are repaired by stealing the farthest point of the
/// largest cluster.
pub fn kmeans(features: &[Vec<f64>], k: usize, iters: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    assert!(k >= 1 && features.len() >= k, "need at least k points");
    assert!(iters >= 1);
    let mut centroids = kmeans_pp_init(features, k, rng);
    let mut assignments = vec![0usize; features.len()];
    for _ in 0..iters {
        let new: Vec<usize> = par::map_indexed(features.len(), |i| {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (c, centroid) in centroids.iter().enumerate() {
                let d = dist2(&features[i], centroid);
                if d < best_d {
                    best_d = d;
                    best = c;
                }
            }
            best
        });
        let mut new = new;
        repair_empty_clusters(features, &centroids, &mut new, k);
        let converged = new == assignments;
        assignments = new;

        let dim = features[0].len();
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (f, &c) in features.iter().zip(&assignments) {
            counts[c] += 1;
            for (s, x) in sums[c].iter_mut().zip(f) {
                *s += x;
            }
        }
        for (c, sum) in sums.iter_mut().enumerate() {
            if counts[c] > 0 {
                let inv = 1.0 / counts[c] as f64;
                sum.iter_mut().for_each(|x| *x *= inv);
            }
        }
        centroids = sums;
        if converged {
            break;
        }
    }
    assignments
}

fn repair_empty_clusters(features: &[Vec<f64>], centroids: &[Vec<f64>], assignments: &mut [usize], k: usize) {
    loop {
        let mut counts = vec![0usize; k];
        for &a in assignments.iter() {
            counts[a] += 1;
        }
        let Some(empty) = counts.iter().position(|&c| c == 0) else {
            return;
        };
        let largest = counts
            .iter()
            .enumerate()
            .max_by_key(|&(c, &n)| (n, std::cmp::Reverse(c)))
            .map(|(c, _)| c)
            .expect("k >= 1");
        let mut farthest = usize::MAX;
        let mut far_d = -1.0;
        for (i, &a) in assignments.iter().enumerate() {
            if a == largest {
                let d = dist2(&features[i], &centroids[largest]);
                if d > far_d {
                    far_d = d;
                    farthest = i;
                }
            }
        }
        assignments[farthest] = empty;
    }
}

/// Clustering cost: sum of squared distances from each point to its
/// cluster's mean. Exposed for tests.
pub fn objective(features: &[Vec<f64>], assignments: &[usize], k: usize) -> f64 {
    let dim = features[0].len();
    let mut sums = vec![vec![0.0; dim]; k];
    let mut counts = vec![0usize; k];
    for (f, &c) in features.iter().zip(assignments) {
        counts[c] += 1;
        for (s, x) in sums[c].iter_mut().zip(f) {
            *s += x;
        }
    }
    for (c, sum) in sums.iter_mut().enumerate() {
        if counts[c] > 0 {
            let inv = 1.0 / counts[c] as f64;
            sum.iter_mut().for_each(|x| *x *= inv);
        }
    }
    features.iter().zip(assignments).map(|(f, &c)| dist2(f, &sums[c])).sum()
}
