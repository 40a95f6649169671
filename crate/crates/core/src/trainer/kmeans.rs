use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Iteration cap for Lloyd's algorithm.
pub const MAX_ITERATIONS: usize = 300;

#[derive(Clone, Debug, PartialEq)]
pub struct KMeans {
    pub assignments: Vec<usize>,
    /// `k x dim`, row-major.
    pub centers: Vec<f64>,
    pub k: usize,
    pub dim: usize,
    /// Within-cluster sum of squares after each assignment step.
    pub objective: Vec<f64>,
    pub converged: bool,
}

impl KMeans {
    pub fn center(&self, k: usize) -> &[f64] {
        &self.centers[k * self.dim..(k + 1) * self.dim]
    }

    pub fn final_objective(&self) -> f64 {
        self.objective.last().copied().unwrap_or(0.0)
    }
}

pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index and squared distance of the closest center, ties to the lower index.
pub(crate) fn nearest(point: &[f64], centers: &[f64], dim: usize) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (k, c) in centers.chunks(dim).enumerate() {
        let d = sq_dist(point, c);
        if d < best.1 {
            best = (k, d);
        }
    }
    best
}

fn plus_plus_init(data: &[f64], n: usize, dim: usize, k: usize, rng: &mut Rng) -> Vec<f64> {
    let mut centers = Vec::with_capacity(k * dim);
    let first = rng.random_range(0..n);
    centers.extend_from_slice(&data[first * dim..(first + 1) * dim]);
    let mut d2: Vec<f64> = data.chunks(dim).map(|p| sq_dist(p, &centers[..dim])).collect();
    for _ in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random_range(0.0..total);
            let mut chosen = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if d > 0.0 && target < d {
                    chosen = i;
                    break;
                }
                target -= d;
            }
            // guard against rounding landing on a zero-weight tail
            while d2[chosen] == 0.0 && chosen > 0 {
                chosen -= 1;
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        let c = &data[pick * dim..(pick + 1) * dim];
        for (slot, p) in d2.iter_mut().zip(data.chunks(dim)) {
            *slot = slot.min(sq_dist(p, c));
        }
        centers.extend_from_slice(c);
    }
    centers
}

/// Lloyd's algorithm from a k-means++ start. Stops at an assignment fixpoint
/// or after [`MAX_ITERATIONS`]. A cluster that loses all its points is
/// reseeded at the point farthest from its current center.
pub fn kmeans(data: &[f64], n: usize, dim: usize, k: usize, rng: &mut Rng) -> Result<KMeans> {
    if dim == 0 || data.len() != n * dim {
        return Err(Error::dim(
            "kmeans",
            format!("{} values for {n} points of width {dim}", data.len()),
        ));
    }
    if k == 0 || n < k {
        return Err(Error::Parameter(format!(
            "k-means needs 1 <= K <= points, got K = {k} for {n} points"
        )));
    }
    let mut centers = plus_plus_init(data, n, dim, k, rng);
    let mut assignments = vec![usize::MAX; n];
    let mut objective = Vec::new();
    let mut converged = false;
    for _ in 0..MAX_ITERATIONS {
        let mut changed = false;
        let mut total = 0.0;
        for (i, p) in data.chunks(dim).enumerate() {
            let (c, d) = nearest(p, &centers, dim);
            total += d;
            if assignments[i] != c {
                assignments[i] = c;
                changed = true;
            }
        }
        objective.push(total);
        if !changed {
            converged = true;
            break;
        }
        update_centers(data, dim, k, &mut assignments, &mut centers);
    }
    Ok(KMeans {
        assignments,
        centers,
        k,
        dim,
        objective,
        converged,
    })
}

fn update_centers(data: &[f64], dim: usize, k: usize, assignments: &mut [usize], centers: &mut [f64]) {
    let mut counts = vec![0usize; k];
    let mut sums = vec![0.0; k * dim];
    for (p, &a) in data.chunks(dim).zip(assignments.iter()) {
        counts[a] += 1;
        sums[a * dim..(a + 1) * dim]
            .iter_mut()
            .zip(p)
            .for_each(|(s, v)| *s += v);
    }
    for c in 0..k {
        if counts[c] > 0 {
            let n = counts[c] as f64;
            for (dst, s) in centers[c * dim..(c + 1) * dim].iter_mut().zip(&sums[c * dim..]) {
                *dst = s / n;
            }
        }
    }
    for c in 0..k {
        if counts[c] > 0 {
            continue;
        }
        // farthest point from its own (updated) center, taken from a cluster
        // that can spare it
        let mut far = None;
        let mut far_d = -1.0;
        for (i, p) in data.chunks(dim).enumerate() {
            let a = assignments[i];
            if counts[a] < 2 {
                continue;
            }
            let d = sq_dist(p, &centers[a * dim..(a + 1) * dim]);
            if d > far_d {
                far_d = d;
                far = Some(i);
            }
        }
        let Some(i) = far else { continue };
        counts[assignments[i]] -= 1;
        counts[c] = 1;
        assignments[i] = c;
        centers[c * dim..(c + 1) * dim].copy_from_slice(&data[i * dim..(i + 1) * dim]);
    }
}

/// Best of `restarts` runs by final objective; earlier runs win ties.
pub fn kmeans_restarts(data: &[f64], n: usize, dim: usize, k: usize, restarts: usize, rng: &mut Rng) -> Result<KMeans> {
    let mut best: Option<KMeans> = None;
    for _ in 0..restarts.max(1) {
        let run = kmeans(data, n, dim, k, rng)?;
        if best
            .as_ref()
            .is_none_or(|b| run.final_objective() < b.final_objective())
        {
            best = Some(run);
        }
    }
    Ok(best.expect("at least one run"))
}

/// High-confidence selection: squared distances to the nearest center, the
/// `round(lambda * n)` closest points overall (ties to the lower index),
/// grouped by assigned cluster.
#[derive(Clone, Debug, PartialEq)]
pub struct Confidence {
    pub distances: Vec<f64>,
    pub groups: Vec<Vec<usize>>,
}

impl Confidence {
    pub fn selected(&self) -> usize {
        self.groups.iter().map(Vec::len).sum()
    }
}

pub fn confidence_select(data: &[f64], clusters: &KMeans, lambda: f64) -> Result<Confidence> {
    if !(lambda > 0.0 && lambda <= 1.0) {
        return Err(Error::Parameter(format!(
            "confidence ratio must lie in (0, 1], got {lambda}"
        )));
    }
    let dim = clusters.dim;
    let distances: Vec<f64> = data.chunks(dim).map(|p| nearest(p, &clusters.centers, dim).1).collect();
    let n = distances.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| distances[a].total_cmp(&distances[b]).then(a.cmp(&b)));
    let keep = (lambda * n as f64).round() as usize;
    let mut groups = vec![Vec::new(); clusters.k];
    for &i in &order[..keep.min(n)] {
        groups[clusters.assignments[i]].push(i);
    }
    groups.iter_mut().for_each(|g| g.sort_unstable());
    Ok(Confidence { distances, groups })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn k_equal_to_n_is_exact() {
        let data = [0.0, 1.0, 5.0, 9.0, 2.0];
        let mut r = rng::stream(1, 0);
        let km = kmeans(&data, 5, 1, 5, &mut r).unwrap();
        assert_eq!(km.final_objective(), 0.0);
        let mut seen = km.assignments.clone();
        seen.sort_unstable();
        assert_eq!(seen, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn rejects_too_many_clusters() {
        let mut r = rng::stream(1, 0);
        assert!(kmeans(&[0.0, 1.0], 2, 1, 3, &mut r).is_err());
        assert!(kmeans(&[0.0, 1.0], 2, 1, 0, &mut r).is_err());
    }

    #[test]
    fn duplicate_points_still_yield_k_centers() {
        let data = [1.0; 6];
        let mut r = rng::stream(2, 0);
        let km = kmeans(&data, 6, 1, 3, &mut r).unwrap();
        assert_eq!(km.centers.len(), 3);
        assert_eq!(km.final_objective(), 0.0);
    }

    #[test]
    fn empty_cluster_is_reseeded() {
        // two centers start on the same far point; one must be reseeded
        let data = [0.0, 0.1, 10.0, 10.1];
        let mut centers = vec![0.05, 0.05];
        let mut assignments = vec![0, 0, 0, 0];
        update_centers(&data, 1, 2, &mut assignments, &mut centers);
        assert_eq!(assignments.iter().filter(|&&a| a == 1).count(), 1);
    }

    #[test]
    fn selection_takes_closest_points() {
        let km = KMeans {
            assignments: vec![0, 0, 1, 1],
            centers: vec![0.0, 10.0],
            k: 2,
            dim: 1,
            objective: vec![],
            converged: true,
        };
        let data = [0.0, 3.0, 10.0, 11.0];
        let c = confidence_select(&data, &km, 0.5).unwrap();
        assert_eq!(c.distances, vec![0.0, 9.0, 0.0, 1.0]);
        assert_eq!(c.groups, vec![vec![0], vec![2]]);
        let all = confidence_select(&data, &km, 1.0).unwrap();
        assert_eq!(all.groups, vec![vec![0, 1], vec![2, 3]]);
        assert!(confidence_select(&data, &km, 0.0).is_err());
        assert!(confidence_select(&data, &km, 1.5).is_err());
    }
}
