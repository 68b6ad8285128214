//! Lloyd's k-means with k-means++ seeding and restarts, used to give
//! meta-training tasks pseudo domain labels.

use itertools::Itertools;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, TanoError};
use crate::rng::{rng_for, stream};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct KMeansConfig {
    pub k: usize,
    pub restarts: usize,
    pub max_iter: usize,
    pub seed: u64,
}

impl KMeansConfig {
    pub fn new(k: usize, seed: u64) -> Self {
        KMeansConfig {
            k,
            restarts: 10,
            max_iter: 100,
            seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KMeansFit {
    /// Cluster of each point, `0..k`.
    pub labels: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    /// Within-cluster sum of squares.
    pub inertia: f64,
    /// Objective after each assignment step of the winning restart.
    pub history: Vec<f64>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest centroid; ties resolve to the lowest index.
pub fn nearest_centroid(point: &[f64], centroids: &[Vec<f64>]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, c) in centroids.iter().enumerate() {
        let d = sq_dist(point, c);
        if d < best_d {
            best = i;
            best_d = d;
        }
    }
    best
}

fn plus_plus(points: &[Vec<f64>], k: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let mut centroids = vec![points[rng.random_range(0..points.len())].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.random_range(0.0..total);
            let mut chosen = points.len() - 1;
            for (i, &w) in d2.iter().enumerate() {
                if target < w {
                    chosen = i;
                    break;
                }
                target -= w;
            }
            chosen
        } else {
            rng.random_range(0..points.len())
        };
        centroids.push(points[next].clone());
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, centroids.last().expect("just pushed")));
        }
    }
    centroids
}

fn lloyd(points: &[Vec<f64>], mut centroids: Vec<Vec<f64>>, max_iter: usize) -> KMeansFit {
    let k = centroids.len();
    let dim = points[0].len();
    let mut labels: Vec<usize> = points
        .iter()
        .map(|p| nearest_centroid(p, &centroids))
        .collect();
    let inertia_of = |labels: &[usize], centroids: &[Vec<f64>]| -> f64 {
        points
            .iter()
            .zip(labels)
            .map(|(p, &l)| sq_dist(p, &centroids[l]))
            .sum()
    };
    let mut history = vec![inertia_of(&labels, &centroids)];
    for _ in 0..max_iter {
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &l) in points.iter().zip(&labels) {
            counts[l] += 1;
            sums[l].iter_mut().zip(p).for_each(|(s, v)| *s += v);
        }
        for c in 0..k {
            if counts[c] > 0 {
                centroids[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
        // Empty clusters restart at the point farthest from its centroid.
        for c in 0..k {
            if counts[c] == 0 {
                let far = (0..points.len())
                    .max_by(|&a, &b| {
                        sq_dist(&points[a], &centroids[labels[a]])
                            .total_cmp(&sq_dist(&points[b], &centroids[labels[b]]))
                    })
                    .expect("non-empty");
                centroids[c] = points[far].clone();
                labels[far] = c;
            }
        }
        let next: Vec<usize> = points
            .iter()
            .map(|p| nearest_centroid(p, &centroids))
            .collect();
        let changed = next != labels;
        labels = next;
        history.push(inertia_of(&labels, &centroids));
        if !changed {
            break;
        }
    }
    KMeansFit {
        inertia: *history.last().expect("at least one entry"),
        labels,
        centroids,
        history,
    }
}

pub fn kmeans(points: &[Vec<f64>], config: &KMeansConfig) -> Result<KMeansFit> {
    if config.k == 0 {
        return Err(TanoError::invalid("k-means needs k >= 1"));
    }
    if points.len() < config.k {
        return Err(TanoError::invalid(format!(
            "{} points for {} clusters",
            points.len(),
            config.k
        )));
    }
    let dim = points[0].len();
    if points.iter().any(|p| p.len() != dim) {
        return Err(TanoError::dim("k-means points differ in dimension"));
    }
    let mut best: Option<KMeansFit> = None;
    for restart in 0..config.restarts.max(1) {
        let mut rng = rng_for(config.seed, stream::KMEANS, restart as u64);
        let init = plus_plus(points, config.k, &mut rng);
        let fit = lloyd(points, init, config.max_iter);
        if best.as_ref().is_none_or(|b| fit.inertia < b.inertia) {
            best = Some(fit);
        }
    }
    Ok(best.expect("at least one restart"))
}

/// Fraction of items whose predicted cluster maps to their true label under
/// the best one-to-one relabeling (exhaustive over permutations).
pub fn matching_accuracy(pred: &[usize], truth: &[usize]) -> f64 {
    if pred.is_empty() {
        return 0.0;
    }
    let k = pred.iter().chain(truth).max().map_or(0, |m| m + 1);
    let mut table = vec![vec![0usize; k]; k];
    for (&p, &t) in pred.iter().zip(truth) {
        table[p][t] += 1;
    }
    let best = (0..k)
        .permutations(k)
        .map(|perm| (0..k).map(|p| table[p][perm[p]]).sum::<usize>())
        .max()
        .unwrap_or(0);
    best as f64 / pred.len() as f64
}

/// Share of items belonging to their cluster's majority label.
pub fn purity(pred: &[usize], truth: &[usize]) -> f64 {
    if pred.is_empty() {
        return 0.0;
    }
    let k = pred.iter().chain(truth).max().map_or(0, |m| m + 1);
    let mut table = vec![vec![0usize; k]; k];
    for (&p, &t) in pred.iter().zip(truth) {
        table[p][t] += 1;
    }
    table
        .iter()
        .map(|row| row.iter().max().copied().unwrap_or(0))
        .sum::<usize>() as f64
        / pred.len() as f64
}
