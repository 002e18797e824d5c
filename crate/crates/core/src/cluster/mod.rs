//! PCA to two dimensions, K-means partitioning and per-cluster
//! characterization of structure profiles.

mod kmeans;
mod pca;

pub use kmeans::{fit_kmeans, hartigan, inertia, lloyd, nearest, KMeansConfig, KMeansFit};
pub use pca::{fit_pca, PcaModel};

use crate::profiler::{StructureProfile, LABELS};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;
use thiserror::Error;

pub const DEFAULT_SAMPLE_SIZE: usize = 100;

#[derive(Debug, Error)]
pub enum ClusterError {
    #[error("need at least {k} points, got {n}")]
    TooFew { n: usize, k: usize },
    #[error("degenerate data: {0}")]
    Degenerate(String),
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("duplicate slice id {0}")]
    DuplicateSlice(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("cluster artifact: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, ClusterError>;

/// Fitted projection, partition and characterization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterModel {
    pub labels: Vec<String>,
    pub pca: PcaModel,
    pub centroids: Vec<Vec<f64>>,
    pub assignments: BTreeMap<String, usize>,
    /// Mean sampled profile per cluster; `None` for an empty cluster.
    pub characterization: Vec<Option<Vec<f64>>>,
    pub sample_size: usize,
    pub counts: Vec<usize>,
    pub inertia: f64,
    pub inertia_trace: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusterConfig {
    pub k: usize,
    pub sample_size: usize,
    pub kmeans: KMeansConfig,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        Self {
            k: 3,
            sample_size: DEFAULT_SAMPLE_SIZE,
            kmeans: KMeansConfig::default(),
        }
    }
}

/// Projects through `pca` and returns the nearest centroid (ties to lowest id).
pub fn assign(pca: &PcaModel, centroids: &[Vec<f64>], profile: &StructureProfile) -> usize {
    nearest(centroids, &pca.project(&profile.probs)).0
}

/// Per-cluster mean over a uniform sample without replacement of at most
/// `sample_size` members.
pub fn characterize(
    labels: &[usize],
    profiles: &[StructureProfile],
    k: usize,
    sample_size: usize,
    seed: u64,
) -> Vec<Option<Vec<f64>>> {
    (0..k)
        .map(|c| {
            let members: Vec<usize> = labels
                .iter()
                .enumerate()
                .filter(|(_, &l)| l == c)
                .map(|(i, _)| i)
                .collect();
            if members.is_empty() {
                log::warn!("cluster {c} is empty; characterization row omitted");
                return None;
            }
            let chosen: Vec<usize> = if members.len() <= sample_size {
                members
            } else {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(c as u64);
                let mut idx = rand::seq::index::sample(&mut rng, members.len(), sample_size).into_vec();
                idx.sort_unstable();
                idx.into_iter().map(|i| members[i]).collect()
            };
            let dim = profiles[chosen[0]].probs.len();
            let mut row = vec![0.0; dim];
            for &i in &chosen {
                for (r, p) in row.iter_mut().zip(&profiles[i].probs) {
                    *r += p;
                }
            }
            row.iter_mut().for_each(|r| *r /= chosen.len() as f64);
            Some(row)
        })
        .collect()
}

/// PCA(2) + K-means + characterization. Cluster ids are canonicalized by
/// sorting centroids on the first principal coordinate.
pub fn fit_clusters(profiles: &[StructureProfile], cfg: &ClusterConfig, seed: u64) -> Result<ClusterModel> {
    let mut seen = std::collections::HashSet::new();
    if let Some(dup) = profiles.iter().find(|p| !seen.insert(p.slice_id.as_str())) {
        return Err(ClusterError::DuplicateSlice(dup.slice_id.clone()));
    }
    let data: Vec<Vec<f64>> = profiles.iter().map(|p| p.probs.clone()).collect();
    let pca = fit_pca(&data, 2)?;
    let points: Vec<Vec<f64>> = data.iter().map(|x| pca.project(x)).collect();
    let fit = fit_kmeans(&points, cfg.k, seed, &cfg.kmeans)?;
    let mut order: Vec<usize> = (0..cfg.k).collect();
    order.sort_by(|&a, &b| {
        let (ca, cb) = (&fit.centroids[a], &fit.centroids[b]);
        ca[0].total_cmp(&cb[0]).then(ca[1].total_cmp(&cb[1])).then(a.cmp(&b))
    });
    let centroids: Vec<Vec<f64>> = order.iter().map(|&i| fit.centroids[i].clone()).collect();
    let labels: Vec<usize> = points.iter().map(|p| nearest(&centroids, p).0).collect();
    let mut counts = vec![0; cfg.k];
    for &l in &labels {
        counts[l] += 1;
    }
    let characterization = characterize(&labels, profiles, cfg.k, cfg.sample_size, seed);
    Ok(ClusterModel {
        labels: LABELS.iter().map(|s| s.to_string()).collect(),
        assignments: profiles
            .iter()
            .zip(&labels)
            .map(|(p, &l)| (p.slice_id.clone(), l))
            .collect(),
        inertia: inertia(&points, &centroids, &labels),
        inertia_trace: fit.inertia_trace,
        pca,
        centroids,
        characterization,
        sample_size: cfg.sample_size,
        counts,
    })
}

impl ClusterModel {
    pub fn assign(&self, profile: &StructureProfile) -> usize {
        assign(&self.pca, &self.centroids, profile)
    }

    pub fn k(&self) -> usize {
        self.centroids.len()
    }

    /// Top `n` labels of a cluster's characterization row, most probable first.
    pub fn top_labels(&self, cluster: usize, n: usize) -> Vec<(String, f64)> {
        let Some(Some(row)) = self.characterization.get(cluster) else {
            return Vec::new();
        };
        let mut idx: Vec<usize> = (0..row.len()).collect();
        idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
        idx.into_iter()
            .take(n)
            .map(|i| (self.labels[i].clone(), row[i]))
            .collect()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, serde_json::to_string_pretty(self)?).map_err(|source| ClusterError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ClusterError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Fraction of points whose cluster's majority truth label matches their own.
pub fn purity(assigned: &[usize], truth: &[usize]) -> f64 {
    if assigned.is_empty() {
        return 0.0;
    }
    let mut table: BTreeMap<usize, BTreeMap<usize, usize>> = BTreeMap::new();
    for (&a, &t) in assigned.iter().zip(truth) {
        *table.entry(a).or_default().entry(t).or_default() += 1;
    }
    let majority: usize = table.values().map(|m| m.values().copied().max().unwrap_or(0)).sum();
    majority as f64 / assigned.len() as f64
}
