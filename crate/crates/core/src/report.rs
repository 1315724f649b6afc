//! File-level commands: analyze, synth, prune-depth and viz.
//!
//! Everything written here is deterministic. Floats go through [`round_sig`]
//! (9 significant digits) before being printed, so reruns are byte-identical.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::embedding::{LabeledRun, Split};
use crate::error::{Error, Result, ResultExt};
use crate::index::{profile, AnalysisConfig, GeneralizationProfile, MetricKind};
use crate::manifest::{load_run, save_run, RunManifest};
use crate::pca::{pca_project, PcaProjection};
use crate::synth::{gen_layer_sweep, LayerSweepSpec};

pub const SIG_DIGITS: usize = 9;
pub const MANIFEST_NAME: &str = "manifest.json";

/// Rounds to [`SIG_DIGITS`] significant digits.
pub fn round_sig(x: f64) -> f64 {
    if x == 0.0 || !x.is_finite() {
        return x;
    }
    format!("{:.*e}", SIG_DIGITS - 1, x).parse().unwrap_or(x)
}

/// Shortest decimal that round-trips the rounded value.
pub fn fmt_sig(x: f64) -> String {
    let r = round_sig(x);
    if r == 0.0 {
        "0".into()
    } else {
        format!("{r}")
    }
}

fn round_json(v: &mut Value) {
    match v {
        Value::Number(n) if n.is_f64() => {
            if let Some(r) = n.as_f64().map(round_sig).and_then(serde_json::Number::from_f64) {
                *n = r;
            }
        }
        Value::Array(items) => items.iter_mut().for_each(round_json),
        Value::Object(map) => map.values_mut().for_each(round_json),
        _ => {}
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn csv_bytes(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    // Writing into memory cannot fail.
    w.write_record(header).expect("in-memory csv");
    for row in rows {
        w.write_record(&row).expect("in-memory csv");
    }
    w.into_inner().expect("in-memory csv")
}

fn file_safe(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() || "-_.".contains(c) { c } else { '_' })
        .collect()
}

// ---------------------------------------------------------------- config

/// Builds the analysis config: defaults, then the JSON file (deep-merged),
/// then each `path.to.field=value` override. Override values are parsed as
/// JSON when possible and taken as strings otherwise.
pub fn load_config(file: Option<&Path>, overrides: &[String]) -> Result<AnalysisConfig> {
    let mut value = serde_json::to_value(AnalysisConfig::default()).expect("default config serializes");
    if let Some(path) = file {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let patch: Value = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        if !patch.is_object() {
            return Err(Error::Config(format!("{}: expected a JSON object", path.display())));
        }
        merge(&mut value, patch);
    }
    for o in overrides {
        apply_override(&mut value, o)?;
    }
    serde_json::from_value(value).map_err(|e| Error::Config(format!("invalid config: {e}")))
}

fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn apply_override(root: &mut Value, spec: &str) -> Result<()> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("--set '{spec}': expected path=value")))?;
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(Error::Config(format!("--set '{spec}': empty path segment")));
    }
    let parsed = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    for key in &keys[..keys.len() - 1] {
        let map = node
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("--set '{spec}': '{key}' is not inside an object")))?;
        node = map
            .entry(key.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    node.as_object_mut()
        .ok_or_else(|| Error::Config(format!("--set '{spec}': parent is not an object")))?
        .insert(keys[keys.len() - 1].to_string(), parsed);
    Ok(())
}

// ---------------------------------------------------------------- analyze

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunEcho {
    pub manifest_path: String,
    pub manifest: RunManifest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportGroup {
    pub runs: Vec<RunEcho>,
    pub profile: GeneralizationProfile,
}

/// Contents of `report.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub tool: String,
    pub config: AnalysisConfig,
    pub groups: Vec<ReportGroup>,
}

impl Report {
    pub fn to_json(&self) -> String {
        let mut v = serde_json::to_value(self).expect("report serializes");
        round_json(&mut v);
        let mut s = serde_json::to_string_pretty(&v).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: not a report: {e}", path.display())))
    }

    /// Picks one (model, dataset) group; required when there is more than one.
    pub fn group(&self, model: Option<&str>, dataset: Option<&str>) -> Result<&GeneralizationProfile> {
        let hits: Vec<&GeneralizationProfile> = self
            .groups
            .iter()
            .map(|g| &g.profile)
            .filter(|p| model.is_none_or(|m| p.model == m) && dataset.is_none_or(|d| p.dataset == d))
            .collect();
        match hits.as_slice() {
            [one] => Ok(one),
            [] => Err(Error::Config(format!(
                "no group matches model={model:?} dataset={dataset:?}; available: {}",
                self.group_names()
            ))),
            _ => Err(Error::Config(format!(
                "report has several groups ({}); pick one with --model/--dataset",
                self.group_names()
            ))),
        }
    }

    fn group_names(&self) -> String {
        self.groups
            .iter()
            .map(|g| format!("{}/{}", g.profile.model, g.profile.dataset))
            .collect::<Vec<_>>()
            .join(", ")
    }
}

#[derive(Debug, Clone)]
pub struct AnalyzeOptions {
    pub manifests: Vec<PathBuf>,
    pub out_dir: PathBuf,
    pub config: AnalysisConfig,
    pub pca: bool,
}

#[derive(Debug, Clone)]
pub struct AnalyzeOutput {
    pub report: Report,
    pub files: Vec<PathBuf>,
}

/// Loads every manifest, profiles each (model, dataset) group and writes
/// `profile.csv`, `summary.csv`, `summary.md`, `report.json` and, unless
/// disabled, per-layer PCA coordinates under `pca/`.
pub fn analyze(opts: &AnalyzeOptions) -> Result<AnalyzeOutput> {
    if opts.manifests.is_empty() {
        return Err(Error::Config("no manifests given".into()));
    }
    let mut groups: BTreeMap<(String, String), Vec<(PathBuf, LabeledRun)>> = BTreeMap::new();
    for path in &opts.manifests {
        let run = load_run(path)?;
        let key = (run.manifest().model_name.clone(), run.manifest().dataset_name.clone());
        groups.entry(key).or_default().push((path.clone(), run));
    }

    let mut report = Report {
        tool: format!("layergauge {}", env!("CARGO_PKG_VERSION")),
        config: opts.config.clone(),
        groups: Vec::new(),
    };
    let mut pca_files = Vec::new();
    for entries in groups.values() {
        let runs: Vec<LabeledRun> = entries.iter().map(|(_, r)| r.clone()).collect();
        let prof = profile(&runs, &opts.config)?;
        if opts.pca {
            for (_, run) in entries {
                pca_files.extend(export_run_pca(run, &prof, &opts.out_dir)?);
            }
        }
        report.groups.push(ReportGroup {
            runs: entries
                .iter()
                .map(|(p, r)| RunEcho {
                    manifest_path: p.display().to_string(),
                    manifest: r.manifest().clone(),
                })
                .collect(),
            profile: prof,
        });
    }

    let out = &opts.out_dir;
    let profiles: Vec<&GeneralizationProfile> = report.groups.iter().map(|g| &g.profile).collect();
    let mut files = vec![
        out.join("profile.csv"),
        out.join("summary.csv"),
        out.join("summary.md"),
        out.join("report.json"),
    ];
    write_file(&files[0], &profile_csv(&profiles))?;
    write_file(&files[1], &summary_csv(&profiles))?;
    write_file(&files[2], summary_markdown(&profiles).as_bytes())?;
    write_file(&files[3], report.to_json().as_bytes())?;
    files.extend(pca_files);
    Ok(AnalyzeOutput { report, files })
}

pub fn profile_csv(profiles: &[&GeneralizationProfile]) -> Vec<u8> {
    let mut rows = Vec::new();
    for p in profiles {
        for c in &p.cells {
            for (r, (&v, &n)) in c.values.iter().zip(&c.n_points).enumerate() {
                rows.push(vec![
                    p.model.clone(),
                    p.dataset.clone(),
                    c.layer.to_string(),
                    c.metric.to_string(),
                    c.split.to_string(),
                    p.seeds[r].to_string(),
                    fmt_sig(v),
                    fmt_sig(c.mean),
                    fmt_sig(c.std),
                    n.to_string(),
                ]);
            }
        }
    }
    csv_bytes(
        &["model", "dataset", "layer", "metric", "split", "seed", "value", "mean", "std", "n_points"],
        rows,
    )
}

pub fn summary_csv(profiles: &[&GeneralizationProfile]) -> Vec<u8> {
    let rows = profiles.iter().flat_map(|p| {
        p.summary.iter().map(move |s| {
            vec![
                p.model.clone(),
                p.dataset.clone(),
                s.metric.to_string(),
                s.split.to_string(),
                s.best_layer.to_string(),
                fmt_sig(s.g_max),
                fmt_sig(s.std_at_best),
            ]
        })
    });
    csv_bytes(&["model", "dataset", "metric", "split", "best_layer", "g_max", "std"], rows)
}

/// One table per dataset: a column per model, a row per (metric, split).
/// Each cell reads `g_max ± std (layer)`; the row maximum is bold.
pub fn summary_markdown(profiles: &[&GeneralizationProfile]) -> String {
    let mut by_dataset: BTreeMap<&str, Vec<&GeneralizationProfile>> = BTreeMap::new();
    for p in profiles {
        by_dataset.entry(&p.dataset).or_default().push(p);
    }
    let mut md = String::from("# Generalization summary\n");
    for (dataset, models) in by_dataset {
        md.push_str(&format!("\n## {dataset}\n\n"));
        md.push_str("Best layer mean over seeds: g_max ± std (layer).\n\n| g |");
        for p in &models {
            md.push_str(&format!(" {} |", p.model));
        }
        md.push_str("\n|---|");
        md.push_str(&"---|".repeat(models.len()));
        md.push('\n');
        for metric in MetricKind::ALL {
            for split in Split::ALL {
                let entries: Vec<_> = models.iter().map(|p| p.summary_for(metric, split)).collect();
                if entries.iter().all(Option::is_none) {
                    continue;
                }
                let best = entries
                    .iter()
                    .flatten()
                    .map(|s| round3(s.g_max))
                    .fold(f64::NEG_INFINITY, f64::max);
                md.push_str(&format!("| {} {} |", metric.display_name(), split));
                for e in entries {
                    match e {
                        Some(s) => {
                            let cell = format!("{:.3} ± {:.3} ({})", s.g_max, s.std_at_best, s.best_layer);
                            if round3(s.g_max) == best && models.len() > 1 {
                                md.push_str(&format!(" **{cell}** |"));
                            } else {
                                md.push_str(&format!(" {cell} |"));
                            }
                        }
                        None => md.push_str(" n/a |"),
                    }
                }
                md.push('\n');
            }
        }
        md.push_str("\nPer-seed maxima: mean ± std of each seed's own best layer value.\n\n");
        md.push_str("| model | g | mean ± std | best layers |\n|---|---|---|---|\n");
        for p in &models {
            for s in &p.summary {
                let layers: Vec<String> = s.per_seed_best_layer.iter().map(u32::to_string).collect();
                md.push_str(&format!(
                    "| {} | {} {} | {:.3} ± {:.3} | {} |\n",
                    p.model,
                    s.metric.display_name(),
                    s.split,
                    s.per_seed_max_mean,
                    s.per_seed_max_std,
                    layers.join(", ")
                ));
            }
        }
    }
    md
}

fn round3(x: f64) -> f64 {
    (x * 1000.0).round() / 1000.0
}

fn export_run_pca(run: &LabeledRun, prof: &GeneralizationProfile, out: &Path) -> Result<Vec<PathBuf>> {
    let m = run.manifest();
    let dir = out
        .join("pca")
        .join(file_safe(&format!("{}__{}", m.model_name, m.dataset_name)));
    let splits: Vec<Split> = Split::ALL
        .into_iter()
        .filter(|&s| prof.cells.iter().any(|c| c.split == s))
        .collect();
    let mut files = Vec::new();
    for split in splits {
        let sub = run.subset_split(split)?;
        for &layer in &prof.layers {
            let proj = pca_project(sub.layer(layer)?, 2)
                .context_with(|| format!("PCA of seed {} layer {layer} {split}", m.seed))?;
            let path = dir.join(format!("seed{}_layer{layer:02}_{split}.csv", m.seed));
            write_file(&path, &scatter_csv(&proj, &sub))?;
            files.push(path);
        }
    }
    Ok(files)
}

fn scatter_csv(proj: &PcaProjection, run: &LabeledRun) -> Vec<u8> {
    let labels = run.labels();
    let rows = (0..proj.coordinates.len() / proj.n_components).map(|i| {
        let p = proj.point(i);
        let label = labels.as_slice()[i];
        vec![fmt_sig(p[0]), fmt_sig(p[1]), label.to_string(), labels.name_of(label)]
    });
    csv_bytes(&["pc1", "pc2", "label", "class_name"], rows)
}

// ---------------------------------------------------------------- synth

/// Generates one synthetic run from a sweep spec file into `out_dir`.
pub fn synth(spec_path: &Path, out_dir: &Path, seed: Option<u64>) -> Result<PathBuf> {
    let text = fs::read_to_string(spec_path).map_err(|e| Error::io(spec_path, e))?;
    let mut spec = LayerSweepSpec::from_json(&text).context_with(|| spec_path.display().to_string())?;
    if let Some(s) = seed {
        spec.seed = s;
    }
    let run = gen_layer_sweep(&spec)?;
    save_run(&run, out_dir, MANIFEST_NAME)
}

// ---------------------------------------------------------------- prune-depth

#[derive(Debug, Clone, PartialEq)]
pub struct PruneRecommendation {
    pub layer: u32,
    /// Layers kept (through `layer`) over total layers.
    pub depth_fraction: f64,
    pub layers_kept: usize,
    pub n_layers: usize,
    pub g_max: f64,
    pub threshold: f64,
    pub mean_at_layer: f64,
}

/// Shallowest layer whose mean score reaches `(1 - slack) * g_max`.
pub fn prune_depth(prof: &GeneralizationProfile, metric: MetricKind, split: Split, slack: f64) -> Result<PruneRecommendation> {
    if !(0.0..=1.0).contains(&slack) {
        return Err(Error::Config(format!("slack must be in [0, 1], got {slack}")));
    }
    let means = prof.means(metric, split);
    let summary = prof.summary_for(metric, split).filter(|_| !means.is_empty()).ok_or_else(|| {
        Error::Config(format!(
            "report for {}/{} has no {metric} {split} results",
            prof.model, prof.dataset
        ))
    })?;
    let threshold = (1.0 - slack) * summary.g_max;
    let (pos, &(layer, mean)) = means
        .iter()
        .enumerate()
        .find(|(_, (_, m))| *m >= threshold)
        .expect("the best layer always meets the threshold");
    Ok(PruneRecommendation {
        layer,
        depth_fraction: (pos + 1) as f64 / prof.layers.len() as f64,
        layers_kept: pos + 1,
        n_layers: prof.layers.len(),
        g_max: summary.g_max,
        threshold,
        mean_at_layer: mean,
    })
}

// ---------------------------------------------------------------- viz

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceSidecar {
    pub model: String,
    pub dataset: String,
    pub seed: u64,
    pub layer: u32,
    pub split: Split,
    pub n_points: usize,
    pub explained_variance: Vec<f64>,
    pub explained_variance_ratio: Vec<f64>,
}

/// Writes a two-component PCA scatter of one layer and split to `out`, plus
/// `<stem>.variance.json` next to it. Returns both paths.
pub fn viz(manifest: &Path, layer: u32, split: Split, out: &Path) -> Result<(PathBuf, PathBuf)> {
    let run = load_run(manifest)?;
    let sub = run.subset_split(split).context_with(|| manifest.display().to_string())?;
    let data = sub.layer(layer).context_with(|| manifest.display().to_string())?;
    let proj = pca_project(data, 2).context_with(|| format!("PCA of layer {layer} {split}"))?;
    write_file(out, &scatter_csv(&proj, &sub))?;

    let m = run.manifest();
    let sidecar = VarianceSidecar {
        model: m.model_name.clone(),
        dataset: m.dataset_name.clone(),
        seed: m.seed,
        layer,
        split,
        n_points: sub.n_points(),
        explained_variance: proj.explained_variance.clone(),
        explained_variance_ratio: proj.explained_variance_ratio.clone(),
    };
    let mut v = serde_json::to_value(&sidecar).expect("sidecar serializes");
    round_json(&mut v);
    let stem = out.file_stem().map_or_else(|| "scatter".into(), |s| s.to_string_lossy().into_owned());
    let side_path = out.with_file_name(format!("{stem}.variance.json"));
    let mut text = serde_json::to_string_pretty(&v).expect("sidecar serializes");
    text.push('\n');
    write_file(&side_path, text.as_bytes())?;
    Ok((out.to_path_buf(), side_path))
}
