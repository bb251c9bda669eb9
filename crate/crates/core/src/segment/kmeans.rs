//! Lloyd's k-means with k-means++ seeding.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const MAX_ITERATIONS: usize = 100;

#[derive(Debug, Clone, PartialEq)]
pub struct KMeans<const D: usize> {
    pub labels: Vec<usize>,
    pub centroids: Vec<[f64; D]>,
    /// Within-cluster sum of squares after each assignment step.
    pub objective_history: Vec<f64>,
    pub iterations: usize,
    /// `k` exceeded the number of points and was reduced.
    pub k_clamped: bool,
}

impl<const D: usize> KMeans<D> {
    pub fn k(&self) -> usize {
        self.centroids.len()
    }

    pub fn objective(&self) -> f64 {
        self.objective_history.last().copied().unwrap_or(0.0)
    }
}

#[inline]
fn dist2<const D: usize>(a: &[f64; D], b: &[f64; D]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest centroid; ties go to the lowest index.
fn nearest<const D: usize>(p: &[f64; D], centroids: &[[f64; D]]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.iter().enumerate() {
        let d = dist2(p, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn seed_plus_plus<const D: usize>(features: &[[f64; D]], k: usize, rng: &mut ChaCha8Rng) -> Vec<[f64; D]> {
    let n = features.len();
    let mut centroids = vec![features[rng.random_range(0..n)]];
    let mut d2: Vec<f64> = features.iter().map(|p| dist2(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut idx = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if target < w {
                    idx = i;
                    break;
                }
                target -= w;
            }
            idx
        } else {
            rng.random_range(0..n)
        };
        let c = features[pick];
        for (w, p) in d2.iter_mut().zip(features) {
            *w = w.min(dist2(p, &c));
        }
        centroids.push(c);
    }
    centroids
}

/// One k-means run. `k` larger than the number of points is clamped.
pub fn kmeans<const D: usize>(features: &[[f64; D]], k: usize, seed: u64) -> Result<KMeans<D>> {
    if k == 0 {
        return Err(Error::InvalidConfig("k must be at least 1".into()));
    }
    if features.is_empty() {
        return Err(Error::InsufficientSamples { got: 0, need: 1 });
    }
    if features.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite);
    }
    let k_clamped = k > features.len();
    let k = k.min(features.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = seed_plus_plus(features, k, &mut rng);
    let mut labels = vec![usize::MAX; features.len()];
    let mut history = Vec::new();
    let mut iterations = 0;
    loop {
        let mut changed = false;
        let mut objective = 0.0;
        for (p, label) in features.iter().zip(labels.iter_mut()) {
            let (j, d) = nearest(p, &centroids);
            objective += d;
            if *label != j {
                *label = j;
                changed = true;
            }
        }
        history.push(objective);
        if !changed || iterations == MAX_ITERATIONS {
            break;
        }
        iterations += 1;
        let mut sums = vec![[0.0; D]; k];
        let mut counts = vec![0usize; k];
        for (p, &j) in features.iter().zip(&labels) {
            counts[j] += 1;
            for (s, v) in sums[j].iter_mut().zip(p) {
                *s += v;
            }
        }
        for j in 0..k {
            // empty clusters keep their centroid
            if counts[j] > 0 {
                centroids[j] = sums[j].map(|s| s / counts[j] as f64);
            }
        }
    }
    Ok(KMeans {
        labels,
        centroids,
        objective_history: history,
        iterations,
        k_clamped,
    })
}

/// Best of several seeded runs by final objective.
pub fn kmeans_restarts<const D: usize>(
    features: &[[f64; D]],
    k: usize,
    seed: u64,
    restarts: usize,
) -> Result<KMeans<D>> {
    let mut best: Option<KMeans<D>> = None;
    for r in 0..restarts.max(1) as u64 {
        let run = kmeans(features, k, seed.wrapping_add(r.wrapping_mul(0x9E37_79B9_7F4A_7C15)))?;
        if best.as_ref().is_none_or(|b| run.objective() < b.objective()) {
            best = Some(run);
        }
    }
    Ok(best.expect("at least one run"))
}
