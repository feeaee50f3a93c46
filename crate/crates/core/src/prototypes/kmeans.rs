//! Lloyd's algorithm with k-means++ seeding and best-of-restarts selection.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansFit {
    /// `[k, d]` row-major, not normalized.
    pub centroids: Vec<f64>,
    pub inertia: f64,
    /// Inertia after each assignment step of the winning restart.
    pub history: Vec<f64>,
    /// Fewer points than clusters: every centroid is the sample mean.
    pub degenerate: bool,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(p: &[f64], centroids: &[f64], d: usize) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.chunks(d).enumerate() {
        let dist = sq_dist(p, c);
        if dist < best.1 {
            best = (j, dist);
        }
    }
    best
}

fn mean(points: &[f64], d: usize) -> Vec<f64> {
    let n = points.len() / d;
    let mut m = vec![0.0; d];
    for p in points.chunks(d) {
        for (a, &b) in m.iter_mut().zip(p) {
            *a += b;
        }
    }
    m.iter_mut().for_each(|v| *v /= n as f64);
    m
}

fn kmeans_pp<R: Rng>(points: &[f64], d: usize, k: usize, rng: &mut R) -> Vec<f64> {
    let n = points.len() / d;
    let mut centroids = Vec::with_capacity(k * d);
    let first = rng.gen_range(0..n);
    centroids.extend_from_slice(&points[first * d..(first + 1) * d]);
    let mut dist: Vec<f64> = points.chunks(d).map(|p| sq_dist(p, &centroids[..d])).collect();
    for _ in 1..k {
        let total: f64 = dist.iter().sum();
        let pick = if total > 0.0 {
            let mut r = rng.gen::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &w) in dist.iter().enumerate() {
                if r < w {
                    chosen = i;
                    break;
                }
                r -= w;
            }
            chosen
        } else {
            rng.gen_range(0..n)
        };
        let c = points[pick * d..(pick + 1) * d].to_vec();
        for (di, p) in dist.iter_mut().zip(points.chunks(d)) {
            *di = di.min(sq_dist(p, &c));
        }
        centroids.extend(c);
    }
    centroids
}

fn lloyd(points: &[f64], d: usize, mut centroids: Vec<f64>, max_iter: usize) -> (Vec<f64>, f64, Vec<f64>) {
    let n = points.len() / d;
    let k = centroids.len() / d;
    let mut assign = vec![usize::MAX; n];
    let mut history = Vec::new();
    for _ in 0..max_iter.max(1) {
        let mut changed = false;
        let mut inertia = 0.0;
        for (i, p) in points.chunks(d).enumerate() {
            let (j, dist) = nearest(p, &centroids, d);
            inertia += dist;
            if assign[i] != j {
                assign[i] = j;
                changed = true;
            }
        }
        history.push(inertia);
        if !changed {
            break;
        }
        let mut sums = vec![0.0; k * d];
        let mut counts = vec![0usize; k];
        for (p, &j) in points.chunks(d).zip(&assign) {
            counts[j] += 1;
            for (s, &v) in sums[j * d..(j + 1) * d].iter_mut().zip(p) {
                *s += v;
            }
        }
        for j in 0..k {
            // an empty cluster keeps its previous centroid
            if counts[j] > 0 {
                for t in 0..d {
                    centroids[j * d + t] = sums[j * d + t] / counts[j] as f64;
                }
            }
        }
    }
    hartigan(points, d, &mut centroids, &mut assign, &mut history);
    let inertia = points
        .chunks(d)
        .map(|p| nearest(p, &centroids, d).1)
        .sum();
    (centroids, inertia, history)
}

/// Single-point refinement after Lloyd: move a point from cluster `a` to
/// `b` whenever `n_b/(n_b+1)|x-c_b|^2 < n_a/(n_a-1)|x-c_a|^2`, updating
/// both means in place. Each move strictly lowers the inertia, and many
/// Lloyd fixed points are not stable under it.
fn hartigan(points: &[f64], d: usize, centroids: &mut [f64], assign: &mut [usize], history: &mut Vec<f64>) {
    let k = centroids.len() / d;
    let mut counts = vec![0usize; k];
    for &a in assign.iter() {
        counts[a] += 1;
    }
    // Lloyd's last pass left the means consistent with `assign` unless a
    // cluster emptied; recompute to be safe.
    let mut sums = vec![0.0; k * d];
    for (p, &a) in points.chunks(d).zip(assign.iter()) {
        for (s, &v) in sums[a * d..(a + 1) * d].iter_mut().zip(p) {
            *s += v;
        }
    }
    for j in 0..k {
        if counts[j] > 0 {
            for t in 0..d {
                centroids[j * d + t] = sums[j * d + t] / counts[j] as f64;
            }
        }
    }
    loop {
        let mut moved = false;
        for (i, p) in points.chunks(d).enumerate() {
            let a = assign[i];
            if counts[a] <= 1 {
                continue;
            }
            let na = counts[a] as f64;
            let cost_out = na / (na - 1.0) * sq_dist(p, &centroids[a * d..(a + 1) * d]);
            let mut best = (a, cost_out);
            for b in (0..k).filter(|&b| b != a) {
                let nb = counts[b] as f64;
                let cost_in = nb / (nb + 1.0) * sq_dist(p, &centroids[b * d..(b + 1) * d]);
                if cost_in < best.1 - 1e-12 * cost_out.max(1e-300) {
                    best = (b, cost_in);
                }
            }
            let b = best.0;
            if b == a {
                continue;
            }
            let nb = counts[b] as f64;
            for t in 0..d {
                let ca = &mut centroids[a * d + t];
                *ca = (*ca * na - p[t]) / (na - 1.0);
                let cb = &mut centroids[b * d + t];
                *cb = (*cb * nb + p[t]) / (nb + 1.0);
            }
            counts[a] -= 1;
            counts[b] += 1;
            assign[i] = b;
            moved = true;
        }
        if !moved {
            break;
        }
        history.push(points.chunks(d).zip(assign.iter()).map(|(p, &a)| sq_dist(p, &centroids[a * d..(a + 1) * d])).sum());
    }
}

/// Clusters `points` (row-major, width `d`) into `k` groups, keeping the
/// restart with the lowest inertia (earliest on ties).
pub fn kmeans(points: &[f64], d: usize, k: usize, seed: u64, restarts: usize, max_iter: usize) -> Result<KMeansFit> {
    if k == 0 {
        return Err(Error::InvalidArgument("K must be at least 1".into()));
    }
    if d == 0 || points.len() % d != 0 {
        return Err(Error::Shape(format!("{} values with width {d}", points.len())));
    }
    let n = points.len() / d;
    if n == 0 {
        return Err(Error::InvalidArgument("k-means on an empty set".into()));
    }
    if n < k {
        let m = mean(points, d);
        let inertia = points.chunks(d).map(|p| sq_dist(p, &m)).sum();
        return Ok(KMeansFit {
            centroids: m.repeat(k),
            inertia,
            history: vec![inertia],
            degenerate: true,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<KMeansFit> = None;
    for _ in 0..restarts.max(1) {
        let init = kmeans_pp(points, d, k, &mut rng);
        let (centroids, inertia, history) = lloyd(points, d, init, max_iter);
        if best.as_ref().map_or(true, |b| inertia < b.inertia) {
            best = Some(KMeansFit {
                centroids,
                inertia,
                history,
                degenerate: false,
            });
        }
    }
    Ok(best.expect("at least one restart"))
}
