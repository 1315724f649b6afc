//! kNN purity: the mean, over points, of the fraction of a point's nearest
//! neighbours (itself excluded) that share its class.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::distance::squared_euclidean;
use crate::embedding::{EmbeddingMatrix, LabelVector};
use crate::error::{Error, Result};
use crate::par;

/// How many neighbours each point looks at.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(tag = "k_mode", rename_all = "snake_case")]
pub enum KnnConfig {
    /// `k(x)` = number of points in `x`'s class.
    #[default]
    PerClassCount,
    /// The same `k` for every point, capped at `n - 1`.
    Fixed { fixed_k: usize },
}

fn validate(data: &EmbeddingMatrix, labels: &LabelVector, config: &KnnConfig) -> Result<BTreeMap<u32, usize>> {
    if labels.len() != data.n_points() {
        return Err(Error::Shape(format!(
            "{} labels for {} points",
            labels.len(),
            data.n_points()
        )));
    }
    if data.n_points() < 2 {
        return Err(Error::Config("kNN purity needs at least 2 points".into()));
    }
    let counts = labels.class_counts();
    match config {
        KnnConfig::PerClassCount => {
            if let Some((c, _)) = counts.iter().find(|(_, &n)| n < 2) {
                return Err(Error::Config(format!(
                    "class {c} has a single point; per-class k needs at least 2"
                )));
            }
        }
        KnnConfig::Fixed { fixed_k } if *fixed_k == 0 => {
            return Err(Error::Config("fixed_k must be >= 1".into()));
        }
        KnnConfig::Fixed { .. } => {}
    }
    Ok(counts)
}

fn neighbour_count(config: &KnnConfig, class_size: usize, n: usize) -> usize {
    let k = match config {
        KnnConfig::PerClassCount => class_size,
        KnnConfig::Fixed { fixed_k } => *fixed_k,
    };
    k.min(n - 1)
}

/// Mean of `same_i / k_i`, summing integer hits per distinct `k` first so
/// that uniform cases (e.g. all classes equal size) divide exactly once.
fn mean_fraction(hits: impl IntoIterator<Item = (usize, usize)>, n: usize) -> f64 {
    let mut by_k: BTreeMap<usize, usize> = BTreeMap::new();
    for (same, k) in hits {
        *by_k.entry(k).or_default() += same;
    }
    by_k.iter().map(|(&k, &same)| same as f64 / k as f64).sum::<f64>() / n as f64
}

#[inline]
fn by_distance_then_index(a: &(f64, usize), b: &(f64, usize)) -> Ordering {
    a.0.total_cmp(&b.0).then(a.1.cmp(&b.1))
}

/// Exact kNN purity. Distance ties are broken by the lower point index.
pub fn knn_purity(data: &EmbeddingMatrix, labels: &LabelVector, config: &KnnConfig) -> Result<f64> {
    let counts = validate(data, labels, config)?;
    let n = data.n_points();
    let y = labels.as_slice();

    let hits = par::map_range(n, |i| {
        let k = neighbour_count(config, counts[&y[i]], n);
        let xi = data.row(i);
        let mut cand: Vec<(f64, usize)> = (0..n)
            .filter(|&j| j != i)
            .map(|j| (squared_euclidean(xi, data.row(j)), j))
            .collect();
        if k < cand.len() {
            cand.select_nth_unstable_by(k - 1, by_distance_then_index);
        }
        let same = cand[..k].iter().filter(|(_, j)| y[*j] == y[i]).count();
        (same, k)
    });
    Ok(mean_fraction(hits, n))
}

/// Reference implementation: full pairwise distance table, then a stable
/// full sort of every row. Quadratic memory; meant for checking `knn_purity`.
pub fn exhaustive_knn_oracle(
    data: &EmbeddingMatrix,
    labels: &LabelVector,
    config: &KnnConfig,
) -> Result<f64> {
    let counts = validate(data, labels, config)?;
    let n = data.n_points();
    let d = data.dim();
    let y = labels.as_slice();

    let mut table = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let mut s = 0.0;
            for f in 0..d {
                let diff = data.row(i)[f] - data.row(j)[f];
                s += diff * diff;
            }
            table[i * n + j] = s;
        }
    }

    let mut hits = Vec::with_capacity(n);
    for i in 0..n {
        let mut order: Vec<usize> = (0..n).filter(|&j| j != i).collect();
        // Stable: equal distances stay in ascending index order.
        order.sort_by(|&a, &b| table[i * n + a].total_cmp(&table[i * n + b]));
        let k = neighbour_count(config, counts[&y[i]], n);
        let same = order[..k].iter().filter(|&&j| y[j] == y[i]).count();
        hits.push((same, k));
    }
    Ok(mean_fraction(hits, n))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn line(xs: &[f64]) -> EmbeddingMatrix {
        EmbeddingMatrix::new(0, xs.len(), 1, xs.to_vec()).unwrap()
    }

    #[test]
    fn separated_equal_classes_give_n_minus_one_over_n() {
        // Two classes of 5, radius 1, centres 100 apart.
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for (c, centre) in [(0u32, 0.0), (1, 100.0)] {
            for p in 0..5 {
                let a = p as f64 * 1.2566;
                rows.push(vec![centre + a.cos(), a.sin()]);
                labels.push(c);
            }
        }
        let data = EmbeddingMatrix::from_rows(0, &rows).unwrap();
        let labels = LabelVector::new(labels);
        let v = knn_purity(&data, &labels, &KnnConfig::PerClassCount).unwrap();
        assert_eq!(v, 0.8);
        assert_eq!(exhaustive_knn_oracle(&data, &labels, &KnnConfig::PerClassCount).unwrap(), 0.8);
    }

    #[test]
    fn single_class_is_pure() {
        let data = line(&[3.0, -1.0, 8.0, 0.5]);
        let labels = LabelVector::new(vec![2; 4]);
        for k in 1..=3 {
            let v = knn_purity(&data, &labels, &KnnConfig::Fixed { fixed_k: k }).unwrap();
            assert_eq!(v, 1.0);
        }
        assert_eq!(knn_purity(&data, &labels, &KnnConfig::PerClassCount).unwrap(), 1.0);
    }

    #[test]
    fn collinear_ties_follow_lower_index() {
        // Points 0,1,2,3 on a line; middle points are equidistant from both sides.
        let data = line(&[0.0, 1.0, 2.0, 3.0]);
        let labels = LabelVector::new(vec![0, 0, 1, 1]);
        // k=1: p0->p1 (same), p1->p0 (tie with p2, lower index), p2->p1 (tie, lower index, other class), p3->p2.
        let fixed = KnnConfig::Fixed { fixed_k: 1 };
        assert_eq!(knn_purity(&data, &labels, &fixed).unwrap(), 0.75);
        assert_eq!(exhaustive_knn_oracle(&data, &labels, &fixed).unwrap(), 0.75);
        // Per-class k=2: every point gets exactly one same-class neighbour.
        let per = KnnConfig::PerClassCount;
        assert_eq!(knn_purity(&data, &labels, &per).unwrap(), 0.5);
        assert_eq!(exhaustive_knn_oracle(&data, &labels, &per).unwrap(), 0.5);
    }

    #[test]
    fn single_pair() {
        let data = line(&[0.0, 1.0]);
        let labels = LabelVector::new(vec![4, 4]);
        let fixed = KnnConfig::Fixed { fixed_k: 1 };
        assert_eq!(knn_purity(&data, &labels, &fixed).unwrap(), 1.0);
        assert_eq!(exhaustive_knn_oracle(&data, &labels, &fixed).unwrap(), 1.0);
    }

    #[test]
    fn errors() {
        let data = line(&[0.0, 1.0, 2.0]);
        let lonely = LabelVector::new(vec![0, 0, 1]);
        assert!(matches!(
            knn_purity(&data, &lonely, &KnnConfig::PerClassCount),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            knn_purity(&data, &lonely, &KnnConfig::Fixed { fixed_k: 0 }),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            knn_purity(&line(&[1.0]), &LabelVector::new(vec![0]), &KnnConfig::Fixed { fixed_k: 1 }),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            knn_purity(&data, &LabelVector::new(vec![0, 0]), &KnnConfig::PerClassCount),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn random_gaussian_layout_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let noise = Normal::new(0.0, 1.0).unwrap();
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for c in 0..3u32 {
            for _ in 0..20 {
                rows.push((0..4).map(|f| noise.sample(&mut rng) + if f == 0 { 2.0 * c as f64 } else { 0.0 }).collect());
                labels.push(c);
            }
        }
        let data = EmbeddingMatrix::from_rows(0, &rows).unwrap();
        let labels = LabelVector::new(labels);
        for cfg in [KnnConfig::PerClassCount, KnnConfig::Fixed { fixed_k: 7 }] {
            let fast = knn_purity(&data, &labels, &cfg).unwrap();
            let slow = exhaustive_knn_oracle(&data, &labels, &cfg).unwrap();
            assert!((fast - slow).abs() <= 1e-12);
            assert!(fast > 1.0 / 3.0);
        }
    }

    #[test]
    fn config_json_shape() {
        let fixed: KnnConfig = serde_json::from_str(r#"{"k_mode":"fixed","fixed_k":4}"#).unwrap();
        assert_eq!(fixed, KnnConfig::Fixed { fixed_k: 4 });
        let per: KnnConfig = serde_json::from_str(r#"{"k_mode":"per_class_count"}"#).unwrap();
        assert_eq!(per, KnnConfig::PerClassCount);
    }
}
