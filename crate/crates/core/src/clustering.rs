//! K-means clustering: Lloyd iterations with k-means++ seeding and
//! independent restarts, keeping the restart with the lowest objective.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::distance::squared_euclidean;
use crate::embedding::EmbeddingMatrix;
use crate::error::{Error, Result};
use crate::par;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KMeansConfig {
    pub k: usize,
    pub n_restarts: usize,
    pub max_iters: usize,
    /// Stop once the relative objective improvement of an iteration drops below this.
    pub rel_tol: f64,
    pub seed: u64,
}

impl KMeansConfig {
    pub fn new(k: usize, seed: u64) -> Self {
        Self {
            k,
            n_restarts: 10,
            max_iters: 300,
            rel_tol: 1e-6,
            seed,
        }
    }

    pub fn with_restarts(mut self, n_restarts: usize) -> Self {
        self.n_restarts = n_restarts;
        self
    }

    pub fn validate(&self, n_points: usize) -> Result<()> {
        if self.k == 0 || self.n_restarts == 0 || self.max_iters == 0 {
            return Err(Error::Config(format!(
                "k, n_restarts and max_iters must be >= 1 (got {}, {}, {})",
                self.k, self.n_restarts, self.max_iters
            )));
        }
        if !(self.rel_tol >= 0.0 && self.rel_tol.is_finite()) {
            return Err(Error::Config(format!("rel_tol must be finite and >= 0, got {}", self.rel_tol)));
        }
        if self.k > n_points {
            return Err(Error::Config(format!(
                "k = {} exceeds the number of points ({n_points})",
                self.k
            )));
        }
        Ok(())
    }
}

/// Result of a K-means fit: the winning restart's partition and centroids.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterAssignment {
    pub assignments: Vec<usize>,
    /// `k × dim`, row-major.
    pub centroids: Vec<f64>,
    pub k: usize,
    pub dim: usize,
    /// Sum of squared Euclidean distances to the assigned centroid.
    pub objective: f64,
    pub iterations: usize,
    /// Objective after each Lloyd iteration of the winning restart.
    pub objective_trace: Vec<f64>,
    /// Final objective of every restart, by restart index.
    pub restart_objectives: Vec<f64>,
    pub best_restart: usize,
}

impl ClusterAssignment {
    pub fn centroid(&self, j: usize) -> &[f64] {
        &self.centroids[j * self.dim..(j + 1) * self.dim]
    }

    pub fn labels_u32(&self) -> Vec<u32> {
        self.assignments.iter().map(|&a| a as u32).collect()
    }
}

struct Restart {
    assignments: Vec<usize>,
    centroids: Vec<f64>,
    objective: f64,
    trace: Vec<f64>,
}

pub fn kmeans_fit(data: &EmbeddingMatrix, config: &KMeansConfig) -> Result<ClusterAssignment> {
    config.validate(data.n_points())?;
    let restarts = par::map_range(config.n_restarts, |r| run_restart(data, config, r));

    let mut best = 0;
    for (r, run) in restarts.iter().enumerate().skip(1) {
        if run.objective < restarts[best].objective {
            best = r;
        }
    }
    let restart_objectives = restarts.iter().map(|r| r.objective).collect();
    let winner = restarts.into_iter().nth(best).expect("at least one restart");
    Ok(ClusterAssignment {
        assignments: winner.assignments,
        centroids: winner.centroids,
        k: config.k,
        dim: data.dim(),
        objective: winner.objective,
        iterations: winner.trace.len(),
        objective_trace: winner.trace,
        restart_objectives,
        best_restart: best,
    })
}

/// Recomputes Σ‖x − centroid(assign(x))‖² for an assignment against `data`.
pub fn kmeans_objective(data: &EmbeddingMatrix, assignment: &ClusterAssignment) -> Result<f64> {
    if assignment.assignments.len() != data.n_points()
        || assignment.dim != data.dim()
        || assignment.centroids.len() != assignment.k * assignment.dim
    {
        return Err(Error::Shape(format!(
            "assignment for {} points in {} dims does not match {}x{} data",
            assignment.assignments.len(),
            assignment.dim,
            data.n_points(),
            data.dim()
        )));
    }
    if let Some(&bad) = assignment.assignments.iter().find(|&&a| a >= assignment.k) {
        return Err(Error::Shape(format!("cluster id {bad} outside [0, {})", assignment.k)));
    }
    Ok(objective(data, &assignment.assignments, &assignment.centroids))
}

fn objective(data: &EmbeddingMatrix, assignments: &[usize], centroids: &[f64]) -> f64 {
    let d = data.dim();
    data.rows()
        .zip(assignments)
        .map(|(x, &a)| squared_euclidean(x, &centroids[a * d..(a + 1) * d]))
        .sum()
}

fn restart_rng(seed: u64, restart: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(restart as u64);
    rng
}

/// D² seeding: first centre uniform, then each next centre drawn with
/// probability proportional to its squared distance to the nearest chosen one.
fn kmeanspp_init(data: &EmbeddingMatrix, k: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = data.n_points();
    let mut centroids = Vec::with_capacity(k * data.dim());
    let first = rng.gen_range(0..n);
    centroids.extend_from_slice(data.row(first));
    let mut d2: Vec<f64> = data.rows().map(|x| squared_euclidean(x, data.row(first))).collect();

    for _ in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.gen::<f64>() * total;
            let mut acc = 0.0;
            let mut chosen = None;
            for (i, &w) in d2.iter().enumerate() {
                if w <= 0.0 {
                    continue;
                }
                acc += w;
                chosen = Some(i);
                if acc > target {
                    break;
                }
            }
            chosen.expect("positive total implies a positive weight")
        } else {
            rng.gen_range(0..n)
        };
        centroids.extend_from_slice(data.row(pick));
        for (i, x) in data.rows().enumerate() {
            d2[i] = d2[i].min(squared_euclidean(x, data.row(pick)));
        }
    }
    centroids
}

/// Nearest centroid per point; ties go to the lowest cluster id.
fn assign(data: &EmbeddingMatrix, centroids: &[f64], k: usize, out: &mut [usize], dist: &mut [f64]) {
    let d = data.dim();
    for (i, x) in data.rows().enumerate() {
        let mut best = 0;
        let mut best_d = squared_euclidean(x, &centroids[..d]);
        for j in 1..k {
            let dj = squared_euclidean(x, &centroids[j * d..(j + 1) * d]);
            if dj < best_d {
                best = j;
                best_d = dj;
            }
        }
        out[i] = best;
        dist[i] = best_d;
    }
}

/// Gives every empty cluster the point farthest from its own centroid
/// (taken only from clusters that keep at least one member).
fn repair_empty(
    data: &EmbeddingMatrix,
    centroids: &mut [f64],
    k: usize,
    assignments: &mut [usize],
    dist: &mut [f64],
) {
    let d = data.dim();
    let mut counts = vec![0usize; k];
    for &a in assignments.iter() {
        counts[a] += 1;
    }
    for j in 0..k {
        if counts[j] > 0 {
            continue;
        }
        let mut far: Option<usize> = None;
        for i in 0..assignments.len() {
            if counts[assignments[i]] > 1 && far.is_none_or(|f| dist[i] > dist[f]) {
                far = Some(i);
            }
        }
        let Some(p) = far else { break };
        counts[assignments[p]] -= 1;
        counts[j] = 1;
        assignments[p] = j;
        dist[p] = 0.0;
        centroids[j * d..(j + 1) * d].copy_from_slice(data.row(p));
    }
}

fn update_centroids(data: &EmbeddingMatrix, assignments: &[usize], k: usize, centroids: &mut [f64]) {
    let d = data.dim();
    let mut sums = vec![0.0; k * d];
    let mut counts = vec![0usize; k];
    for (x, &a) in data.rows().zip(assignments) {
        counts[a] += 1;
        for (s, v) in sums[a * d..(a + 1) * d].iter_mut().zip(x) {
            *s += v;
        }
    }
    for j in 0..k {
        // An empty cluster (only possible with duplicate points) keeps its centre.
        if counts[j] == 0 {
            continue;
        }
        let c = counts[j] as f64;
        for (dst, s) in centroids[j * d..(j + 1) * d].iter_mut().zip(&sums[j * d..(j + 1) * d]) {
            *dst = s / c;
        }
    }
}

fn run_restart(data: &EmbeddingMatrix, config: &KMeansConfig, restart: usize) -> Restart {
    let k = config.k;
    let n = data.n_points();
    let mut rng = restart_rng(config.seed, restart);
    let mut centroids = kmeanspp_init(data, k, &mut rng);
    let mut assignments = vec![0usize; n];
    let mut dist = vec![0.0; n];
    let mut trace: Vec<f64> = Vec::new();

    for _ in 0..config.max_iters {
        assign(data, &centroids, k, &mut assignments, &mut dist);
        repair_empty(data, &mut centroids, k, &mut assignments, &mut dist);
        update_centroids(data, &assignments, k, &mut centroids);
        let obj = objective(data, &assignments, &centroids);
        let prev = trace.last().copied();
        if let Some(p) = prev {
            debug_assert!(
                obj <= p * (1.0 + 1e-12) + 1e-12,
                "Lloyd objective increased: {p} -> {obj}"
            );
        }
        trace.push(obj);
        if let Some(p) = prev {
            if p - obj <= config.rel_tol * p {
                break;
            }
        }
    }

    Restart {
        assignments,
        centroids,
        objective: *trace.last().expect("max_iters >= 1"),
        trace,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, StandardNormal};

    fn matrix(rows: &[Vec<f64>]) -> EmbeddingMatrix {
        EmbeddingMatrix::from_rows(0, rows).unwrap()
    }

    fn random_matrix(n: usize, d: usize, seed: u64) -> EmbeddingMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = (0..n * d).map(|_| StandardNormal.sample(&mut rng)).collect();
        EmbeddingMatrix::new(0, n, d, v).unwrap()
    }

    #[test]
    fn k_distinct_points_have_zero_objective() {
        let data = matrix(&[vec![0.0, 0.0], vec![5.0, 1.0], vec![-3.0, 2.0]]);
        let fit = kmeans_fit(&data, &KMeansConfig::new(3, 1)).unwrap();
        assert_eq!(fit.objective, 0.0);
        let mut seen = fit.assignments.clone();
        seen.sort_unstable();
        assert_eq!(seen, vec![0, 1, 2]);
        for (i, &a) in fit.assignments.iter().enumerate() {
            assert_eq!(fit.centroid(a), data.row(i));
        }
    }

    #[test]
    fn k_larger_than_n_is_config_error() {
        let data = matrix(&[vec![0.0], vec![1.0]]);
        assert!(matches!(
            kmeans_fit(&data, &KMeansConfig::new(3, 0)),
            Err(Error::Config(_))
        ));
        let mut cfg = KMeansConfig::new(1, 0);
        cfg.n_restarts = 0;
        assert!(matches!(kmeans_fit(&data, &cfg), Err(Error::Config(_))));
    }

    #[test]
    fn deterministic_under_seed() {
        let data = random_matrix(60, 4, 9);
        let cfg = KMeansConfig::new(4, 42);
        let a = kmeans_fit(&data, &cfg).unwrap();
        let b = kmeans_fit(&data, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.objective.to_bits(), b.objective.to_bits());
    }

    #[test]
    fn objective_helper() {
        let data = matrix(&[vec![2.0, 0.0]]);
        let fit = ClusterAssignment {
            assignments: vec![0],
            centroids: vec![0.0, 0.0],
            k: 1,
            dim: 2,
            objective: 4.0,
            iterations: 1,
            objective_trace: vec![4.0],
            restart_objectives: vec![4.0],
            best_restart: 0,
        };
        assert_eq!(kmeans_objective(&data, &fit).unwrap(), 4.0);

        let mut bad = fit.clone();
        bad.dim = 3;
        assert!(matches!(kmeans_objective(&data, &bad), Err(Error::Shape(_))));
    }

    #[test]
    fn objective_matches_double_loop_and_centroids_are_means() {
        for seed in 0..10 {
            let data = random_matrix(40, 3, seed);
            let fit = kmeans_fit(&data, &KMeansConfig::new(3, seed)).unwrap();
            let mut direct = 0.0;
            for i in 0..data.n_points() {
                for j in 0..data.dim() {
                    let diff = data.row(i)[j] - fit.centroid(fit.assignments[i])[j];
                    direct += diff * diff;
                }
            }
            assert!((fit.objective - direct).abs() <= 1e-9 * direct.max(1.0));
            for c in 0..fit.k {
                let members: Vec<_> = (0..40).filter(|&i| fit.assignments[i] == c).collect();
                assert!(!members.is_empty());
                for j in 0..data.dim() {
                    let mean = members.iter().map(|&i| data.row(i)[j]).sum::<f64>()
                        / members.len() as f64;
                    assert!((mean - fit.centroid(c)[j]).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn restart_dominance_and_monotone_trace() {
        let data = random_matrix(80, 2, 3);
        let fit = kmeans_fit(&data, &KMeansConfig::new(5, 11).with_restarts(8)).unwrap();
        for &o in &fit.restart_objectives {
            assert!(fit.objective <= o);
        }
        assert_eq!(fit.restart_objectives[fit.best_restart], fit.objective);
        assert!(fit.objective_trace.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn duplicate_points_keep_k_clusters_when_possible() {
        let data = matrix(&[vec![0.0], vec![0.0], vec![0.0], vec![1.0]]);
        let fit = kmeans_fit(&data, &KMeansConfig::new(3, 5)).unwrap();
        assert!(fit.assignments.iter().all(|&a| a < 3));
        let used: std::collections::BTreeSet<_> = fit.assignments.iter().collect();
        assert_eq!(used.len(), 3);
    }
}
