//! Per-layer generalization scores for each metric and split, aggregated
//! across seeds, with the best layer per (metric, split).

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::agreement::nmi_labels;
use crate::clustering::{kmeans_fit, KMeansConfig};
use crate::embedding::{LabeledRun, Split};
use crate::error::{Error, Result};
use crate::knn::{knn_purity, KnnConfig};
use crate::par;
use crate::probe::{run_probe, ProbeConfig};
use crate::seed::derive_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricKind {
    Nmi,
    Knn,
    Lpr,
}

impl MetricKind {
    pub const ALL: [MetricKind; 3] = [MetricKind::Nmi, MetricKind::Knn, MetricKind::Lpr];

    pub fn as_str(self) -> &'static str {
        match self {
            MetricKind::Nmi => "nmi",
            MetricKind::Knn => "knn",
            MetricKind::Lpr => "lpr",
        }
    }

    pub fn display_name(self) -> &'static str {
        match self {
            MetricKind::Nmi => "NMI",
            MetricKind::Knn => "kNN",
            MetricKind::Lpr => "LPr",
        }
    }
}

impl fmt::Display for MetricKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for MetricKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "nmi" => Ok(MetricKind::Nmi),
            "knn" => Ok(MetricKind::Knn),
            "lpr" => Ok(MetricKind::Lpr),
            other => Err(Error::Config(format!(
                "unknown metric '{other}' (expected nmi, knn or lpr)"
            ))),
        }
    }
}

/// K-means settings for the NMI metric; `k` always equals the split's class count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KMeansSettings {
    pub n_restarts: usize,
    pub max_iters: usize,
    pub rel_tol: f64,
    pub seed: u64,
}

impl Default for KMeansSettings {
    fn default() -> Self {
        let d = KMeansConfig::new(1, 0);
        Self {
            n_restarts: d.n_restarts,
            max_iters: d.max_iters,
            rel_tol: d.rel_tol,
            seed: d.seed,
        }
    }
}

impl KMeansSettings {
    pub fn with_k(&self, k: usize, seed: u64) -> KMeansConfig {
        KMeansConfig {
            k,
            n_restarts: self.n_restarts,
            max_iters: self.max_iters,
            rel_tol: self.rel_tol,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisConfig {
    pub metrics: Vec<MetricKind>,
    pub kmeans: KMeansSettings,
    pub knn: KnnConfig,
    pub probe: ProbeConfig,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            metrics: MetricKind::ALL.to_vec(),
            kmeans: KMeansSettings::default(),
            knn: KnnConfig::default(),
            probe: ProbeConfig::default(),
        }
    }
}

fn split_tag(split: Split) -> u64 {
    match split {
        Split::Seen => 0,
        Split::Unseen => 1,
    }
}

/// One metric evaluated on one layer of one split-restricted run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellValue {
    pub value: f64,
    pub n_points: usize,
    pub n_classes: usize,
}

/// Scores `layer` of a run already restricted to one split's classes. Random
/// streams depend on the run seed and split only, so identical layers score
/// identically.
fn score_subset(
    sub: &LabeledRun,
    layer: u32,
    split: Split,
    metric: MetricKind,
    config: &AnalysisConfig,
) -> Result<CellValue> {
    let data = sub.layer(layer)?;
    let labels = sub.labels();
    let classes = labels.classes();
    if classes.len() < 2 {
        return Err(Error::Config(format!(
            "{split} split has {} class(es) present; at least 2 are needed",
            classes.len()
        )));
    }
    let run_seed = sub.manifest().seed;
    let value = match metric {
        MetricKind::Nmi => {
            let seed = derive_seed(&[config.kmeans.seed, run_seed, split_tag(split)]);
            let fit = kmeans_fit(data, &config.kmeans.with_k(classes.len(), seed))?;
            nmi_labels(labels.as_slice(), &fit.labels_u32())?
        }
        MetricKind::Knn => knn_purity(data, labels, &config.knn)?,
        MetricKind::Lpr => {
            let probe = ProbeConfig {
                seed: derive_seed(&[config.probe.seed, run_seed, split_tag(split)]),
                ..config.probe.clone()
            };
            run_probe(data, labels, &probe)?.accuracy
        }
    };
    Ok(CellValue {
        value,
        n_points: sub.n_points(),
        n_classes: classes.len(),
    })
}

pub fn g_layer(
    run: &LabeledRun,
    layer: u32,
    split: Split,
    metric: MetricKind,
    config: &AnalysisConfig,
) -> Result<f64> {
    let sub = run.subset_split(split)?;
    score_subset(&sub, layer, split, metric, config).map(|c| c.value)
}

/// NMI between K-means clusters (K = number of classes in the split) and the
/// true labels of that split's points at one layer.
pub fn g_nmi_layer(run: &LabeledRun, layer: u32, split: Split, kmeans: &KMeansSettings) -> Result<f64> {
    let config = AnalysisConfig {
        kmeans: kmeans.clone(),
        ..AnalysisConfig::default()
    };
    g_layer(run, layer, split, MetricKind::Nmi, &config)
}

pub fn g_knn_layer(run: &LabeledRun, layer: u32, split: Split, knn: &KnnConfig) -> Result<f64> {
    let config = AnalysisConfig {
        knn: *knn,
        ..AnalysisConfig::default()
    };
    g_layer(run, layer, split, MetricKind::Knn, &config)
}

pub fn g_lpr_layer(run: &LabeledRun, layer: u32, split: Split, probe: &ProbeConfig) -> Result<f64> {
    let config = AnalysisConfig {
        probe: probe.clone(),
        ..AnalysisConfig::default()
    };
    g_layer(run, layer, split, MetricKind::Lpr, &config)
}

/// Per-seed values and their aggregate for one (layer, metric, split).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileCell {
    pub layer: u32,
    pub metric: MetricKind,
    pub split: Split,
    /// One value per run, in run order.
    pub values: Vec<f64>,
    pub mean: f64,
    /// Population standard deviation across runs.
    pub std: f64,
    pub n_points: Vec<usize>,
    pub n_classes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryEntry {
    pub metric: MetricKind,
    pub split: Split,
    /// Shallowest layer attaining `g_max`.
    pub best_layer: u32,
    /// Maximum over layers of the across-seed mean.
    pub g_max: f64,
    /// Across-seed std at `best_layer`.
    pub std_at_best: f64,
    /// Each seed's own maximum over layers, and where it occurs.
    pub per_seed_max: Vec<f64>,
    pub per_seed_best_layer: Vec<u32>,
    pub per_seed_max_mean: f64,
    pub per_seed_max_std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneralizationProfile {
    pub model: String,
    pub dataset: String,
    pub seeds: Vec<u64>,
    pub layers: Vec<u32>,
    pub cells: Vec<ProfileCell>,
    pub summary: Vec<SummaryEntry>,
}

impl GeneralizationProfile {
    pub fn cell(&self, layer: u32, metric: MetricKind, split: Split) -> Option<&ProfileCell> {
        self.cells
            .iter()
            .find(|c| c.layer == layer && c.metric == metric && c.split == split)
    }

    pub fn summary_for(&self, metric: MetricKind, split: Split) -> Option<&SummaryEntry> {
        self.summary.iter().find(|s| s.metric == metric && s.split == split)
    }

    /// `(layer, mean)` in layer order.
    pub fn means(&self, metric: MetricKind, split: Split) -> Vec<(u32, f64)> {
        self.layers
            .iter()
            .filter_map(|&l| self.cell(l, metric, split).map(|c| (l, c.mean)))
            .collect()
    }

    pub fn best_layer(&self, metric: MetricKind, split: Split) -> Option<u32> {
        self.summary_for(metric, split).map(|s| s.best_layer)
    }
}

/// Mean and population std. Equal inputs give exactly that value and 0.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let first = values[0];
    let mean = first + values.iter().map(|v| v - first).sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// First index of the maximum (ties go to the earlier entry).
fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Evaluates every (layer, metric, split, seed) cell and aggregates.
///
/// The unseen split is always scored; the seen split only when every run has
/// at least two seen classes present.
pub fn profile(runs: &[LabeledRun], config: &AnalysisConfig) -> Result<GeneralizationProfile> {
    let first = runs
        .first()
        .ok_or_else(|| Error::Config("profile needs at least one run".into()))?;
    let layers = first.layer_indices();
    let (model, dataset) = (&first.manifest().model_name, &first.manifest().dataset_name);
    for run in &runs[1..] {
        if run.layer_indices() != layers {
            return Err(Error::Shape(format!(
                "seed {} has layers {:?}, seed {} has {:?}",
                run.manifest().seed,
                run.layer_indices(),
                first.manifest().seed,
                layers
            )));
        }
        if &run.manifest().model_name != model || &run.manifest().dataset_name != dataset {
            return Err(Error::Config(format!(
                "runs mix {model}/{dataset} with {}/{}",
                run.manifest().model_name,
                run.manifest().dataset_name
            )));
        }
    }
    if config.metrics.is_empty() {
        return Err(Error::Config("no metrics selected".into()));
    }
    let mut metrics = config.metrics.clone();
    metrics.sort_unstable();
    metrics.dedup();

    let has_two_seen = |r: &LabeledRun| {
        let present = r.labels().classes();
        present.iter().filter(|c| r.split().seen().contains(c)).count() >= 2
    };
    let splits: Vec<Split> = if runs.iter().all(has_two_seen) {
        vec![Split::Seen, Split::Unseen]
    } else {
        vec![Split::Unseen]
    };

    // subsets[split_pos][run_pos]
    let subsets: Vec<Vec<LabeledRun>> = splits
        .iter()
        .map(|&s| {
            runs.iter()
                .map(|r| {
                    r.subset_split(s)
                        .map_err(|e| e.context(format!("{model}/{dataset} seed {}", r.manifest().seed)))
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;

    let mut grid = Vec::new();
    for (li, _) in layers.iter().enumerate() {
        for (mi, _) in metrics.iter().enumerate() {
            for (si, _) in splits.iter().enumerate() {
                for ri in 0..runs.len() {
                    grid.push((li, mi, si, ri));
                }
            }
        }
    }
    let results = par::map_slice(&grid, |&(li, mi, si, ri)| {
        let (layer, metric, split) = (layers[li], metrics[mi], splits[si]);
        score_subset(&subsets[si][ri], layer, split, metric, config).map_err(|e| {
            e.context(format!(
                "{model}/{dataset} seed {} layer {layer} {metric} {split}",
                runs[ri].manifest().seed
            ))
        })
    });
    let values: Vec<CellValue> = results.into_iter().collect::<Result<_>>()?;

    let n_runs = runs.len();
    let cells: Vec<ProfileCell> = values
        .chunks(n_runs)
        .zip(grid.iter().step_by(n_runs))
        .map(|(chunk, &(li, mi, si, _))| {
            let v: Vec<f64> = chunk.iter().map(|c| c.value).collect();
            let (mean, std) = mean_std(&v);
            ProfileCell {
                layer: layers[li],
                metric: metrics[mi],
                split: splits[si],
                values: v,
                mean,
                std,
                n_points: chunk.iter().map(|c| c.n_points).collect(),
                n_classes: chunk[0].n_classes,
            }
        })
        .collect();

    let mut summary = Vec::new();
    for &metric in &metrics {
        for &split in &splits {
            let row: Vec<&ProfileCell> = cells
                .iter()
                .filter(|c| c.metric == metric && c.split == split)
                .collect();
            let means: Vec<f64> = row.iter().map(|c| c.mean).collect();
            let best = argmax(&means);
            let mut per_seed_max = Vec::with_capacity(n_runs);
            let mut per_seed_best_layer = Vec::with_capacity(n_runs);
            for r in 0..n_runs {
                let seed_values: Vec<f64> = row.iter().map(|c| c.values[r]).collect();
                let b = argmax(&seed_values);
                per_seed_max.push(seed_values[b]);
                per_seed_best_layer.push(row[b].layer);
            }
            let (per_seed_max_mean, per_seed_max_std) = mean_std(&per_seed_max);
            summary.push(SummaryEntry {
                metric,
                split,
                best_layer: row[best].layer,
                g_max: means[best],
                std_at_best: row[best].std,
                per_seed_max,
                per_seed_best_layer,
                per_seed_max_mean,
                per_seed_max_std,
            });
        }
    }

    Ok(GeneralizationProfile {
        model: model.clone(),
        dataset: dataset.clone(),
        seeds: runs.iter().map(|r| r.manifest().seed).collect(),
        layers,
        cells,
        summary,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{gen_layer_sweep, LayerSeparation, LayerSweepSpec};

    fn sweep(unseen: &[f64], seed: u64, points_per_class: usize) -> LabeledRun {
        gen_layer_sweep(&LayerSweepSpec {
            model: "toy".into(),
            dataset: "blobs".into(),
            seen_classes: 3,
            unseen_classes: 3,
            points_per_class,
            dim: 8,
            layers: unseen
                .iter()
                .map(|&u| LayerSeparation { seen: u + 6.0, unseen: u, seed: None })
                .collect(),
            seed,
        })
        .unwrap()
    }

    fn small_config() -> AnalysisConfig {
        AnalysisConfig {
            probe: ProbeConfig {
                train_count: 30,
                test_count: 15,
                ..ProbeConfig::default()
            },
            ..AnalysisConfig::default()
        }
    }

    #[test]
    fn mean_std_is_exact_for_equal_values() {
        assert_eq!(mean_std(&[0.1, 0.1, 0.1]), (0.1, 0.0));
        let (m, s) = mean_std(&[1.0, 3.0]);
        assert_eq!((m, s), (2.0, 1.0));
    }

    #[test]
    fn argmax_prefers_shallower_layer() {
        assert_eq!(argmax(&[0.5, 0.9, 0.9, 0.1]), 1);
    }

    #[test]
    fn separated_blobs_score_perfectly() {
        let run = sweep(&[40.0], 1, 20);
        let cfg = small_config();
        assert_eq!(g_nmi_layer(&run, 0, Split::Unseen, &cfg.kmeans).unwrap(), 1.0);
        let knn = g_knn_layer(&run, 0, Split::Unseen, &KnnConfig::PerClassCount).unwrap();
        assert!((knn - 19.0 / 20.0).abs() < 1e-12);
        assert!(g_lpr_layer(&run, 0, Split::Unseen, &cfg.probe).unwrap() >= 0.99);
    }

    #[test]
    fn identical_seeds_have_zero_spread() {
        let runs = vec![sweep(&[1.0, 3.0], 5, 15), sweep(&[1.0, 3.0], 5, 15), sweep(&[1.0, 3.0], 5, 15)];
        let p = profile(&runs, &small_config()).unwrap();
        assert_eq!(p.cells.len(), 2 * 3 * 2);
        for c in &p.cells {
            assert_eq!(c.std, 0.0, "{c:?}");
            assert_eq!(c.values.len(), 3);
            assert_eq!(c.n_points, vec![45, 45, 45]);
        }
    }

    #[test]
    fn single_run_mean_is_the_value() {
        let p = profile(&[sweep(&[2.0], 3, 15)], &small_config()).unwrap();
        for c in &p.cells {
            assert_eq!(c.mean, c.values[0]);
            assert_eq!(c.std, 0.0);
        }
        for s in &p.summary {
            assert_eq!(s.g_max, s.per_seed_max[0]);
        }
    }

    #[test]
    fn g_max_is_max_of_means() {
        let runs = vec![sweep(&[0.5, 4.0, 1.0], 1, 15), sweep(&[0.5, 4.0, 1.0], 2, 15)];
        let p = profile(&runs, &small_config()).unwrap();
        for s in &p.summary {
            let means = p.means(s.metric, s.split);
            let max = means.iter().map(|m| m.1).fold(f64::NEG_INFINITY, f64::max);
            assert_eq!(s.g_max, max);
            assert_eq!(p.cell(s.best_layer, s.metric, s.split).unwrap().mean, max);
        }
    }

    #[test]
    fn inconsistent_runs_rejected() {
        let a = sweep(&[1.0, 2.0], 1, 10);
        let b = sweep(&[1.0], 2, 10);
        assert!(matches!(profile(&[a, b], &small_config()), Err(Error::Shape(_))));
        assert!(matches!(profile(&[], &small_config()), Err(Error::Config(_))));
    }

    #[test]
    fn metric_errors_carry_cell_context() {
        let run = sweep(&[1.0], 1, 10);
        // Default probe wants 860 points; this run has 30 per split.
        let err = profile(&[run], &AnalysisConfig::default()).unwrap_err();
        assert!(matches!(err.root(), Error::Config(_)));
        assert!(err.to_string().contains("layer 0 lpr"), "{err}");
    }

    #[test]
    fn parse_metric_names() {
        assert_eq!("LPR".parse::<MetricKind>().unwrap(), MetricKind::Lpr);
        assert!("ari".parse::<MetricKind>().is_err());
    }
}
