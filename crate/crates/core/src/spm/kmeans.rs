//! Lloyd's k-means with k-means++ seeding and best-of-N restarts.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KMeansParams {
    pub k: usize,
    pub seed: u64,
    pub max_iters: usize,
    pub restarts: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansFit {
    /// Cluster id per point.
    pub assignments: Vec<usize>,
    /// One centroid per populated cluster slot; empty slots hold `None`.
    pub centroids: Vec<Option<Vec<f64>>>,
    /// Within-cluster sum of squared distances.
    pub wcss: f64,
    /// Fewer distinct points than `k`: some clusters are necessarily empty.
    pub degenerate: bool,
    /// Restart that produced this fit.
    pub restart: usize,
    pub iterations: usize,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Per-restart RNG seed (splitmix64 finalizer over `seed + restart`).
fn restart_seed(seed: u64, restart: usize) -> u64 {
    let mut z = seed.wrapping_add((restart as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Cluster `points` (row-major, `dim` values each).
pub fn kmeans_points(points: &[f64], dim: usize, params: &KMeansParams) -> Result<KMeansFit> {
    if dim == 0 || points.len() % dim != 0 {
        return Err(Error::ShapeMismatch(format!(
            "{} values are not a whole number of {dim}-d points",
            points.len()
        )));
    }
    if params.k == 0 || params.restarts == 0 {
        return Err(Error::InvalidArgument(
            "k and restarts must be positive".into(),
        ));
    }
    if points.is_empty() {
        return Err(Error::InvalidArgument("no points to cluster".into()));
    }
    let mut best: Option<KMeansFit> = None;
    for r in 0..params.restarts {
        let mut rng = ChaCha8Rng::seed_from_u64(restart_seed(params.seed, r));
        let mut fit = lloyd(points, dim, params, &mut rng);
        fit.restart = r;
        if best.as_ref().is_none_or(|b| fit.wcss < b.wcss) {
            best = Some(fit);
        }
    }
    Ok(best.expect("at least one restart"))
}

/// k-means++: first centre uniform, then proportional to squared distance to
/// the nearest chosen centre. Stops early once every point coincides with a
/// centre.
fn seed_centres(points: &[f64], dim: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = points.len() / dim;
    let pt = |i: usize| &points[i * dim..(i + 1) * dim];
    let first = rng.random_range(0..n);
    let mut centres = vec![pt(first).to_vec()];
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(pt(i), &centres[0])).collect();
    while centres.len() < k {
        let total: f64 = d2.iter().sum();
        if total <= 0.0 {
            break;
        }
        let mut target = rng.random_range(0.0..total);
        let mut pick = None;
        for (i, &d) in d2.iter().enumerate() {
            if d <= 0.0 {
                continue;
            }
            pick = Some(i);
            if target < d {
                break;
            }
            target -= d;
        }
        let c = pt(pick.expect("positive total mass")).to_vec();
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(pt(i), &c));
        }
        centres.push(c);
    }
    centres
}

fn lloyd(points: &[f64], dim: usize, params: &KMeansParams, rng: &mut ChaCha8Rng) -> KMeansFit {
    let n = points.len() / dim;
    let k = params.k;
    let pt = |i: usize| &points[i * dim..(i + 1) * dim];
    let seeded = seed_centres(points, dim, k, rng);
    let degenerate = seeded.len() < k;
    let mut centroids: Vec<Option<Vec<f64>>> = seeded.into_iter().map(Some).collect();
    centroids.resize(k, None);

    let mut assignments = vec![usize::MAX; n];
    let mut iterations = 0;
    while iterations < params.max_iters {
        iterations += 1;
        let mut changed = false;
        for (i, slot) in assignments.iter_mut().enumerate() {
            let p = pt(i);
            let mut best = (usize::MAX, f64::INFINITY);
            for (j, c) in centroids.iter().enumerate() {
                if let Some(c) = c {
                    let d = sq_dist(p, c);
                    if d < best.1 {
                        best = (j, d);
                    }
                }
            }
            if *slot != best.0 {
                *slot = best.0;
                changed = true;
            }
        }

        let mut counts = vec![0usize; k];
        for &a in &assignments {
            counts[a] += 1;
        }
        if !degenerate {
            // move the point farthest from its centroid into each empty slot
            for j in 0..k {
                if counts[j] > 0 {
                    continue;
                }
                let far = (0..n)
                    .filter(|&i| counts[assignments[i]] > 1)
                    .map(|i| {
                        let c = centroids[assignments[i]]
                            .as_ref()
                            .expect("assigned centroid");
                        (i, sq_dist(pt(i), c))
                    })
                    .fold(None, |acc: Option<(usize, f64)>, (i, d)| match acc {
                        Some((_, bd)) if bd >= d => acc,
                        _ => Some((i, d)),
                    });
                if let Some((i, d)) = far {
                    if d > 0.0 {
                        counts[assignments[i]] -= 1;
                        assignments[i] = j;
                        counts[j] = 1;
                        changed = true;
                    }
                }
            }
        }

        let mut sums = vec![0.0; k * dim];
        for (i, &a) in assignments.iter().enumerate() {
            for (s, v) in sums[a * dim..(a + 1) * dim].iter_mut().zip(pt(i)) {
                *s += v;
            }
        }
        for j in 0..k {
            centroids[j] = (counts[j] > 0).then(|| {
                sums[j * dim..(j + 1) * dim]
                    .iter()
                    .map(|s| s / counts[j] as f64)
                    .collect()
            });
        }
        if !changed {
            break;
        }
    }

    transfer_refine(
        points,
        dim,
        &mut assignments,
        &mut centroids,
        params.max_iters,
    );
    let wcss = assignments
        .iter()
        .enumerate()
        .map(|(i, &a)| sq_dist(pt(i), centroids[a].as_ref().expect("populated")))
        .sum();
    KMeansFit {
        assignments,
        centroids,
        wcss,
        degenerate,
        restart: 0,
        iterations,
    }
}

/// Single-point transfers after Lloyd has converged. Moving point `x` from
/// cluster `a` (size `n_a > 1`) to `b` changes the WCSS by
/// `n_b/(n_b+1)·|x−c_b|² − n_a/(n_a−1)·|x−c_a|²`; any negative change is
/// applied at once with exact centroid updates. Lloyd fixed points are not
/// necessarily stable under such moves, so this escapes some of its local
/// minima and never increases the WCSS.
fn transfer_refine(
    points: &[f64],
    dim: usize,
    assignments: &mut [usize],
    centroids: &mut [Option<Vec<f64>>],
    max_sweeps: usize,
) {
    let n = assignments.len();
    let mut counts = vec![0usize; centroids.len()];
    for &a in assignments.iter() {
        counts[a] += 1;
    }
    for _ in 0..max_sweeps {
        let mut moved = false;
        for i in 0..n {
            let p = &points[i * dim..(i + 1) * dim];
            let a = assignments[i];
            if counts[a] < 2 {
                continue;
            }
            let na = counts[a] as f64;
            let ca = centroids[a].as_ref().expect("populated");
            let removal = na / (na - 1.0) * sq_dist(p, ca);
            let mut best: Option<(usize, f64)> = None;
            for (b, cb) in centroids.iter().enumerate() {
                let Some(cb) = cb else { continue };
                if b == a {
                    continue;
                }
                let nb = counts[b] as f64;
                let delta = nb / (nb + 1.0) * sq_dist(p, cb) - removal;
                // relative margin keeps roundoff from cycling a point
                if delta < -1e-12 * removal.max(f64::MIN_POSITIVE)
                    && best.is_none_or(|(_, d)| delta < d)
                {
                    best = Some((b, delta));
                }
            }
            let Some((b, _)) = best else { continue };
            let nb = counts[b] as f64;
            for (c, v) in centroids[a].as_mut().expect("populated").iter_mut().zip(p) {
                *c = (*c * na - v) / (na - 1.0);
            }
            for (c, v) in centroids[b].as_mut().expect("populated").iter_mut().zip(p) {
                *c = (*c * nb + v) / (nb + 1.0);
            }
            counts[a] -= 1;
            counts[b] += 1;
            assignments[i] = b;
            moved = true;
        }
        if !moved {
            break;
        }
    }
    // recompute means exactly so the reported WCSS carries no drift
    for (j, c) in centroids.iter_mut().enumerate() {
        if counts[j] == 0 {
            continue;
        }
        let mut sum = vec![0.0; dim];
        for (i, _) in assignments.iter().enumerate().filter(|(_, &a)| a == j) {
            for (s, v) in sum.iter_mut().zip(&points[i * dim..(i + 1) * dim]) {
                *s += v;
            }
        }
        *c = Some(sum.into_iter().map(|s| s / counts[j] as f64).collect());
    }
}

/// WCSS of an arbitrary assignment with centroids at the cluster means.
pub fn wcss_of(points: &[f64], dim: usize, assignments: &[usize], k: usize) -> f64 {
    let mut sums = vec![0.0; k * dim];
    let mut counts = vec![0usize; k];
    for (i, &a) in assignments.iter().enumerate() {
        counts[a] += 1;
        for d in 0..dim {
            sums[a * dim + d] += points[i * dim + d];
        }
    }
    assignments
        .iter()
        .enumerate()
        .map(|(i, &a)| {
            (0..dim)
                .map(|d| {
                    let m = sums[a * dim + d] / counts[a] as f64;
                    (points[i * dim + d] - m).powi(2)
                })
                .sum::<f64>()
        })
        .sum()
}
