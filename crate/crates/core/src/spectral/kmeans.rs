//! Lloyd's k-means with greedy k-means++ seeding and deterministic restarts.

use rand::Rng as _;
use rayon::prelude::*;

use super::SpectralError;
use crate::seed::{derive_seed, rng_from_seed, Rng, STREAM_KMEANS};

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    pub labels: Vec<usize>,
    /// Within-cluster sum of squared distances.
    pub inertia: f64,
    pub empty_clusters: usize,
    /// Restart that produced this labelling.
    pub restart: usize,
    pub iterations: usize,
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(point: &[f64], centers: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, center) in centers.iter().enumerate() {
        let d = dist2(point, center);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn sample_weighted(weights: &[f64], total: f64, rng: &mut Rng) -> usize {
    let target = rng.random::<f64>() * total;
    let mut acc = 0.0;
    for (i, &w) in weights.iter().enumerate() {
        acc += w;
        if acc > target {
            return i;
        }
    }
    // Rounding can leave `target` just above the running sum.
    weights
        .iter()
        .rposition(|&w| w > 0.0)
        .unwrap_or(weights.len() - 1)
}

/// Greedy k-means++: each new center is the best of `2 + ln k` D²-sampled candidates.
fn seed_centers(points: &[Vec<f64>], k: usize, rng: &mut Rng) -> Vec<Vec<f64>> {
    let n = points.len();
    let trials = 2 + (k as f64).ln().floor() as usize;
    let first = rng.random_range(0..n);
    let mut centers = vec![points[first].clone()];
    let mut closest: Vec<f64> = points.iter().map(|p| dist2(p, &points[first])).collect();
    while centers.len() < k {
        let potential: f64 = closest.iter().sum();
        let pick = if potential <= 0.0 {
            rng.random_range(0..n)
        } else {
            let mut best: Option<(usize, f64)> = None;
            for _ in 0..trials {
                let cand = sample_weighted(&closest, potential, rng);
                let pot: f64 = points
                    .iter()
                    .zip(&closest)
                    .map(|(p, &c)| c.min(dist2(p, &points[cand])))
                    .sum();
                if best.is_none_or(|(_, b)| pot < b) {
                    best = Some((cand, pot));
                }
            }
            best.expect("at least one trial").0
        };
        for (c, p) in closest.iter_mut().zip(points) {
            *c = c.min(dist2(p, &points[pick]));
        }
        centers.push(points[pick].clone());
    }
    centers
}

fn centroids(
    points: &[Vec<f64>],
    labels: &[usize],
    k: usize,
    previous: &[Vec<f64>],
) -> Vec<Vec<f64>> {
    let dim = points[0].len();
    let mut sums = vec![vec![0.0; dim]; k];
    let mut counts = vec![0usize; k];
    for (p, &l) in points.iter().zip(labels) {
        counts[l] += 1;
        sums[l].iter_mut().zip(p).for_each(|(s, x)| *s += x);
    }
    sums.into_iter()
        .zip(counts)
        .enumerate()
        .map(|(c, (s, count))| {
            if count == 0 {
                previous[c].clone()
            } else {
                s.into_iter().map(|x| x / count as f64).collect()
            }
        })
        .collect()
}

/// Moves the point farthest from its center into each empty cluster.
fn relocate_empty(points: &[Vec<f64>], labels: &mut [usize], centers: &mut [Vec<f64>]) {
    let k = centers.len();
    let mut counts = vec![0usize; k];
    labels.iter().for_each(|&l| counts[l] += 1);
    for c in 0..k {
        if counts[c] > 0 {
            continue;
        }
        let mut best: Option<(usize, f64)> = None;
        for (i, p) in points.iter().enumerate() {
            if counts[labels[i]] < 2 {
                continue;
            }
            let d = dist2(p, &centers[labels[i]]);
            if best.is_none_or(|(_, b)| d > b) {
                best = Some((i, d));
            }
        }
        let Some((i, _)) = best else { return };
        counts[labels[i]] -= 1;
        counts[c] = 1;
        labels[i] = c;
        centers[c] = points[i].clone();
    }
}

fn single_run(
    points: &[Vec<f64>],
    k: usize,
    max_iters: usize,
    seed: u64,
    restart: usize,
) -> KMeansResult {
    let mut rng = rng_from_seed(seed);
    let mut centers = seed_centers(points, k, &mut rng);
    let mut labels: Vec<usize> = points.iter().map(|p| nearest(p, &centers).0).collect();
    let mut iterations = 0;
    loop {
        relocate_empty(points, &mut labels, &mut centers);
        centers = centroids(points, &labels, k, &centers);
        iterations += 1;
        if iterations >= max_iters {
            break;
        }
        let mut next: Vec<usize> = points.iter().map(|p| nearest(p, &centers).0).collect();
        relocate_empty(points, &mut next, &mut centers.clone());
        if next == labels {
            break;
        }
        labels = next;
    }
    let inertia = points
        .iter()
        .zip(&labels)
        .map(|(p, &l)| dist2(p, &centers[l]))
        .sum();
    let mut counts = vec![0usize; k];
    labels.iter().for_each(|&l| counts[l] += 1);
    KMeansResult {
        labels,
        inertia,
        empty_clusters: counts.iter().filter(|&&c| c == 0).count(),
        restart,
        iterations,
    }
}

/// Best of `restarts` independent runs by inertia, ties broken by restart index.
pub fn kmeans(
    points: &[Vec<f64>],
    k: usize,
    restarts: usize,
    max_iters: usize,
    seed: u64,
) -> Result<KMeansResult, SpectralError> {
    if k == 0 || points.len() < k {
        return Err(SpectralError::TooFewPoints {
            points: points.len(),
            k,
        });
    }
    if restarts == 0 || max_iters == 0 {
        return Err(SpectralError::InvalidConfig(
            "k-means needs at least one restart and one iteration".into(),
        ));
    }
    let runs: Vec<KMeansResult> = (0..restarts)
        .into_par_iter()
        .map(|r| {
            single_run(
                points,
                k,
                max_iters,
                derive_seed(seed, STREAM_KMEANS, r as u64),
                r,
            )
        })
        .collect();
    Ok(runs
        .into_iter()
        .min_by(|a, b| {
            a.inertia
                .total_cmp(&b.inertia)
                .then(a.restart.cmp(&b.restart))
        })
        .expect("restarts >= 1"))
}
