use super::{ClusterError, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KMeansConfig {
    pub restarts: usize,
    pub max_iter: usize,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        Self {
            restarts: 10,
            max_iter: 300,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KMeansFit {
    pub centroids: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub inertia: f64,
    /// Inertia after every assignment step of the winning restart.
    pub inertia_trace: Vec<f64>,
    pub iterations: usize,
    pub restart: usize,
}

pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest centroid; ties go to the lowest index.
pub fn nearest(centroids: &[Vec<f64>], p: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, c) in centroids.iter().enumerate() {
        let d = sq_dist(c, p);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

pub fn inertia(points: &[Vec<f64>], centroids: &[Vec<f64>], labels: &[usize]) -> f64 {
    points.iter().zip(labels).map(|(p, &l)| sq_dist(p, &centroids[l])).sum()
}

fn plus_plus(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut centroids = vec![points[rng.random_range(0..points.len())].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let idx = if total <= 0.0 {
            rng.random_range(0..points.len())
        } else {
            let mut target = rng.random_range(0.0..total);
            let mut pick = points.len() - 1;
            for (i, &w) in d2.iter().enumerate() {
                if target < w {
                    pick = i;
                    break;
                }
                target -= w;
            }
            pick
        };
        let c = points[idx].clone();
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, &c));
        }
        centroids.push(c);
    }
    centroids
}

/// Lloyd iterations from the given centroids. An emptied cluster keeps its
/// previous centroid.
pub fn lloyd(points: &[Vec<f64>], mut centroids: Vec<Vec<f64>>, max_iter: usize) -> KMeansFit {
    let k = centroids.len();
    let dim = points[0].len();
    let mut labels: Vec<usize> = points.iter().map(|p| nearest(&centroids, p).0).collect();
    let mut trace = vec![inertia(points, &centroids, &labels)];
    let mut iterations = 0;
    while iterations < max_iter {
        iterations += 1;
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &l) in points.iter().zip(&labels) {
            counts[l] += 1;
            for (s, v) in sums[l].iter_mut().zip(p) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                centroids[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
        let next: Vec<usize> = points.iter().map(|p| nearest(&centroids, p).0).collect();
        trace.push(inertia(points, &centroids, &next));
        let stable = next == labels;
        labels = next;
        if stable {
            break;
        }
    }
    KMeansFit {
        inertia: *trace.last().expect("trace is never empty"),
        centroids,
        labels,
        inertia_trace: trace,
        iterations,
        restart: 0,
    }
}

/// Hartigan single-point moves after Lloyd: a point leaves its cluster when
/// `n_b / (n_b + 1) * |x - c_b|^2 < n_a / (n_a - 1) * |x - c_a|^2`, which
/// strictly lowers the inertia. Appends one trace entry per pass that moved
/// a point; the result is also a Lloyd fixed point.
pub fn hartigan(points: &[Vec<f64>], mut fit: KMeansFit, max_passes: usize) -> KMeansFit {
    let k = fit.centroids.len();
    let dim = points[0].len();
    let mut counts = vec![0usize; k];
    let mut sums = vec![vec![0.0; dim]; k];
    for (p, &l) in points.iter().zip(&fit.labels) {
        counts[l] += 1;
        for (s, v) in sums[l].iter_mut().zip(p) {
            *s += v;
        }
    }
    let centroid = |sum: &[f64], n: usize| -> Vec<f64> { sum.iter().map(|s| s / n as f64).collect() };
    for c in 0..k {
        if counts[c] > 0 {
            fit.centroids[c] = centroid(&sums[c], counts[c]);
        }
    }
    for _ in 0..max_passes {
        let mut moved = false;
        for (i, p) in points.iter().enumerate() {
            let a = fit.labels[i];
            if counts[a] < 2 {
                continue;
            }
            let stay = counts[a] as f64 / (counts[a] - 1) as f64 * sq_dist(p, &fit.centroids[a]);
            let mut best = (a, stay);
            for b in (0..k).filter(|&b| b != a) {
                let cost = counts[b] as f64 / (counts[b] + 1) as f64 * sq_dist(p, &fit.centroids[b]);
                if cost < best.1 {
                    best = (b, cost);
                }
            }
            let b = best.0;
            if b == a || stay - best.1 <= 1e-12 * stay.max(1e-300) {
                continue;
            }
            for (j, v) in p.iter().enumerate() {
                sums[a][j] -= v;
                sums[b][j] += v;
            }
            counts[a] -= 1;
            counts[b] += 1;
            fit.centroids[a] = centroid(&sums[a], counts[a]);
            fit.centroids[b] = centroid(&sums[b], counts[b]);
            fit.labels[i] = b;
            moved = true;
        }
        if !moved {
            break;
        }
        fit.inertia_trace.push(inertia(points, &fit.centroids, &fit.labels));
    }
    fit.inertia = inertia(points, &fit.centroids, &fit.labels);
    if let Some(last) = fit.inertia_trace.last_mut() {
        *last = fit.inertia;
    }
    fit
}

/// k-means++ seeding, `restarts` independent Lloyd runs refined by
/// [`hartigan`] (in parallel, each seeded from `seed` and its index), lowest
/// inertia wins, ties to the earliest restart.
pub fn fit_kmeans(points: &[Vec<f64>], k: usize, seed: u64, cfg: &KMeansConfig) -> Result<KMeansFit> {
    if k == 0 || points.len() < k {
        return Err(ClusterError::TooFew { n: points.len(), k });
    }
    let dim = points[0].len();
    if points.iter().any(|p| p.len() != dim) {
        return Err(ClusterError::Dimension("ragged point set".into()));
    }
    let fits: Vec<KMeansFit> = (0..cfg.restarts.max(1))
        .into_par_iter()
        .map(|r| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(r as u64);
            let init = plus_plus(points, k, &mut rng);
            KMeansFit {
                restart: r,
                ..hartigan(points, lloyd(points, init, cfg.max_iter), cfg.max_iter)
            }
        })
        .collect();
    Ok(fits
        .into_iter()
        .reduce(|best, f| if f.inertia < best.inertia { f } else { best })
        .expect("at least one restart"))
}
