//! Per-task k-means over frozen CLS features and the resulting domain
//! posterior.
//!
//! Centroid file layout (little-endian): magic `P2G-KM`, u32 version, u32 T,
//! u32 K, u32 D, f64 τ_d, then T·K·D f32 values, then a CRC-32 over
//! everything before it.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const CENTROID_MAGIC: &[u8; 6] = b"P2G-KM";
pub const CENTROID_VERSION: u32 = 1;
const WHAT: &str = "centroid bank";
const MAX_ITERS: usize = 100;
/// Posterior entries below this are reported as exactly zero.
pub const POSTERIOR_FLOOR: f64 = 1e-100;

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(p: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.iter().enumerate() {
        let d = sq_dist(p, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

/// Within-cluster sum of squared distances to the nearest centroid.
pub fn within_cluster_sse(points: &[Vec<f64>], centroids: &[Vec<f64>]) -> f64 {
    points.iter().map(|p| nearest(p, centroids).1).sum()
}

/// Result of [`fit_centroids`], with the SSE after every Lloyd iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct KMeansFit {
    pub centroids: Vec<Vec<f64>>,
    pub sse_history: Vec<f64>,
    pub iterations: usize,
}

/// k-means++ seeding, then Lloyd iterations until the assignment stops
/// changing or 100 iterations pass. Empty clusters are moved to the point
/// farthest from its centroid.
pub fn fit_centroids(features: &[Vec<f64>], k: usize, seed: u64) -> Result<KMeansFit> {
    let n = features.len();
    if k == 0 || n < k {
        return Err(Error::TooFewPoints { n, k });
    }
    let dim = features[0].len();
    if features.iter().any(|f| f.len() != dim || f.iter().any(|v| !v.is_finite())) {
        return Err(Error::Shape("k-means features must be finite rows of one width".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = vec![features[rng.random_range(0..n)].clone()];
    let mut d2: Vec<f64> = features.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut r = rng.random_range(0.0..total);
            let mut idx = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if r < d {
                    idx = i;
                    break;
                }
                r -= d;
            }
            idx
        } else {
            rng.random_range(0..n)
        };
        centroids.push(features[pick].clone());
        for (p, d) in features.iter().zip(d2.iter_mut()) {
            *d = d.min(sq_dist(p, centroids.last().expect("just pushed")));
        }
    }

    let mut assign: Vec<usize> = features.iter().map(|p| nearest(p, &centroids).0).collect();
    let mut sse_history = Vec::new();
    let mut iterations = 0;
    for _ in 0..MAX_ITERS {
        iterations += 1;
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &a) in features.iter().zip(&assign) {
            counts[a] += 1;
            for (s, v) in sums[a].iter_mut().zip(p) {
                *s += v;
            }
        }
        for j in 0..k {
            if counts[j] > 0 {
                centroids[j] = sums[j].iter().map(|s| s / counts[j] as f64).collect();
            }
        }
        for j in 0..k {
            if counts[j] == 0 {
                let far = (0..n)
                    .max_by(|&a, &b| {
                        let da = nearest(&features[a], &centroids).1;
                        let db = nearest(&features[b], &centroids).1;
                        da.total_cmp(&db).then(b.cmp(&a))
                    })
                    .expect("n >= k >= 1");
                centroids[j] = features[far].clone();
            }
        }
        let next: Vec<usize> = features.iter().map(|p| nearest(p, &centroids).0).collect();
        sse_history.push(within_cluster_sse(features, &centroids));
        if next == assign {
            break;
        }
        assign = next;
    }
    Ok(KMeansFit {
        centroids,
        sse_history,
        iterations,
    })
}

/// Centroids of every task plus the shared distance temperature.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainCentroidBank {
    k: usize,
    dim: usize,
    tau: f64,
    tasks: Vec<Vec<Vec<f64>>>,
}

/// Median of all pairwise squared centroid distances, or 1 when there are
/// none or the median is zero.
pub fn median_pairwise_sq_distance(centroids: &[&[f64]]) -> f64 {
    let mut d = Vec::new();
    for i in 0..centroids.len() {
        for j in i + 1..centroids.len() {
            d.push(sq_dist(centroids[i], centroids[j]));
        }
    }
    if d.is_empty() {
        return 1.0;
    }
    d.sort_by(f64::total_cmp);
    let m = d.len();
    let med = if m % 2 == 1 { d[m / 2] } else { 0.5 * (d[m / 2 - 1] + d[m / 2]) };
    if med > 0.0 && med.is_finite() {
        med
    } else {
        1.0
    }
}

/// How τ_d is chosen.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TauMode {
    /// Recomputed from all centroids after every append.
    Median,
    Fixed(f64),
}

impl DomainCentroidBank {
    pub fn new(k: usize, dim: usize) -> Self {
        Self {
            k,
            dim,
            tau: 1.0,
            tasks: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn task(&self, i: usize) -> &[Vec<f64>] {
        &self.tasks[i]
    }

    pub fn append(&mut self, centroids: Vec<Vec<f64>>, tau: TauMode) -> Result<()> {
        if centroids.len() != self.k || centroids.iter().any(|c| c.len() != self.dim) {
            return Err(Error::Shape(format!(
                "expected {} centroids of width {}",
                self.k, self.dim
            )));
        }
        self.tasks.push(centroids);
        self.tau = match tau {
            TauMode::Fixed(t) if t > 0.0 => t,
            TauMode::Fixed(t) => return Err(Error::Config(format!("tau_d {t} must be positive"))),
            TauMode::Median => {
                let all: Vec<&[f64]> = self.tasks.iter().flatten().map(|c| c.as_slice()).collect();
                median_pairwise_sq_distance(&all)
            }
        };
        Ok(())
    }

    /// Minimum squared distance from `feature` to each task's centroids.
    pub fn distances(&self, feature: &[f64]) -> Result<Vec<f64>> {
        if self.tasks.is_empty() {
            return Err(Error::EmptyCentroidBank);
        }
        if feature.len() != self.dim {
            return Err(Error::Shape(format!("feature width {} vs {}", feature.len(), self.dim)));
        }
        Ok(self.tasks.iter().map(|cs| nearest(feature, cs).1).collect())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CENTROID_MAGIC);
        for v in [CENTROID_VERSION, self.tasks.len() as u32, self.k as u32, self.dim as u32] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&self.tau.to_le_bytes());
        for v in self.tasks.iter().flatten().flatten() {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let head = CENTROID_MAGIC.len() + 16 + 8;
        if bytes.len() < CENTROID_MAGIC.len() || &bytes[..CENTROID_MAGIC.len()] != CENTROID_MAGIC {
            return Err(Error::BadMagic { what: WHAT });
        }
        if bytes.len() < head + 4 {
            return Err(Error::Truncated { what: WHAT });
        }
        let word = |i: usize| {
            let o = CENTROID_MAGIC.len() + 4 * i;
            u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes")) as usize
        };
        if word(0) as u32 != CENTROID_VERSION {
            return Err(Error::VersionMismatch {
                what: WHAT,
                found: word(0) as u32,
            });
        }
        let (t, k, dim) = (word(1), word(2), word(3));
        if bytes.len() != head + t * k * dim * 4 + 4 {
            return Err(Error::Truncated { what: WHAT });
        }
        let body = &bytes[..bytes.len() - 4];
        let crc = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().expect("4 bytes"));
        if crc32fast::hash(body) != crc {
            return Err(Error::ChecksumMismatch { what: WHAT, task: None });
        }
        let tau = f64::from_le_bytes(bytes[head - 8..head].try_into().expect("8 bytes"));
        let floats: Vec<f64> = body[head..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        let mut tasks = Vec::with_capacity(t);
        for task in floats.chunks(k * dim.max(1)).take(t) {
            tasks.push(task.chunks(dim.max(1)).map(|c| c.to_vec()).collect());
        }
        Ok(Self { k, dim, tau, tasks })
    }
}

pub fn save_centroids(bank: &DomainCentroidBank, path: &Path) -> Result<()> {
    std::fs::write(path, bank.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_centroids(path: &Path) -> Result<DomainCentroidBank> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    DomainCentroidBank::from_bytes(&bytes)
}

/// Probability vector over tasks; entries sum to one.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainPosterior {
    pub w: Vec<f64>,
}

impl DomainPosterior {
    /// `softmax(−d/τ)`, entries below [`POSTERIOR_FLOOR`] set to zero.
    pub fn from_distances(d: &[f64], tau: f64) -> Result<Self> {
        if d.is_empty() {
            return Err(Error::EmptyCentroidBank);
        }
        let logits: Vec<f64> = d.iter().map(|x| -x / tau).collect();
        let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut w: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
        let s: f64 = w.iter().sum();
        for x in &mut w {
            *x /= s;
            if *x < POSTERIOR_FLOOR {
                *x = 0.0;
            }
        }
        let s: f64 = w.iter().sum();
        w.iter_mut().for_each(|x| *x /= s);
        Ok(Self { w })
    }

    /// Index of the largest weight, lowest index on ties.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &x) in self.w.iter().enumerate() {
            if x > self.w[best] {
                best = i;
            }
        }
        best
    }
}

pub fn domain_posterior(feature: &[f64], bank: &DomainCentroidBank) -> Result<DomainPosterior> {
    DomainPosterior::from_distances(&bank.distances(feature)?, bank.tau())
}
