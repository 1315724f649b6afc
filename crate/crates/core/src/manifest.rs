//! Run manifests: one JSON document per model × dataset × seed.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::embedding::{LabelVector, LabeledRun, SplitSpec};
use crate::error::{Error, Result, ResultExt};
use crate::format::{read_embedding_file, save_embedding_file};
use crate::par;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunManifest {
    #[serde(rename = "model")]
    pub model_name: String,
    #[serde(rename = "dataset")]
    pub dataset_name: String,
    pub seed: u64,
    pub seen_classes: Vec<u32>,
    pub unseen_classes: Vec<u32>,
    /// Layer files in layer order, relative to the manifest's directory.
    #[serde(rename = "layers")]
    pub layer_files: Vec<String>,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub notes: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_names: Option<BTreeMap<u32, String>>,
    /// Any other keys (e.g. the extractor's pooling choice), kept for provenance.
    #[serde(flatten)]
    pub extra: BTreeMap<String, serde_json::Value>,
}

impl RunManifest {
    pub fn split_spec(&self) -> Result<SplitSpec> {
        SplitSpec::new(
            self.seen_classes.iter().copied(),
            self.unseen_classes.iter().copied(),
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_files.is_empty() {
            return Err(Error::Config("manifest lists no layer files".into()));
        }
        self.split_spec().map(|_| ())
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serializes");
        s.push('\n');
        s
    }
}

pub fn load_manifest(path: &Path) -> Result<RunManifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let manifest: RunManifest = serde_json::from_str(&text)
        .map_err(|e| Error::Config(format!("{}: invalid manifest: {e}", path.display())))?;
    manifest
        .validate()
        .context_with(|| path.display().to_string())?;
    Ok(manifest)
}

fn resolve(base: &Path, file: &str) -> PathBuf {
    let p = Path::new(file);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Loads a manifest and every layer file it references.
///
/// Labels come from the layer files; every file that carries labels must
/// agree with the first one. CSV layers take their position as layer index.
pub fn load_run(manifest_path: &Path) -> Result<LabeledRun> {
    let manifest = load_manifest(manifest_path)?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let paths: Vec<(usize, PathBuf)> = manifest
        .layer_files
        .iter()
        .enumerate()
        .map(|(i, f)| (i, resolve(base, f)))
        .collect();
    let files = par::map_slice(&paths, |(i, p)| {
        read_embedding_file(p, *i as u32).context_with(|| format!("layer {i}"))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()
    .context_with(|| manifest_path.display().to_string())?;

    let mut labels: Option<(usize, LabelVector)> = None;
    for (i, f) in files.iter().enumerate() {
        if let Some(l) = &f.labels {
            match &labels {
                None => labels = Some((i, l.clone())),
                Some((first, existing)) if existing != l => {
                    return Err(Error::Data(format!(
                        "labels in {} disagree with labels in {}",
                        paths[i].1.display(),
                        paths[*first].1.display()
                    ))
                    .context(manifest_path.display().to_string()));
                }
                Some(_) => {}
            }
        }
    }
    let (_, labels) = labels.ok_or_else(|| {
        Error::Data("no layer file carries labels".into())
            .context(manifest_path.display().to_string())
    })?;
    let labels = labels.with_class_names(manifest.class_names.clone());
    let split = manifest.split_spec()?;
    let layers = files.into_iter().map(|f| f.matrix).collect();
    LabeledRun::new(manifest, layers, labels, split)
        .context_with(|| manifest_path.display().to_string())
}

/// Writes every layer as EMB1 (with labels) under `dir`, using the file
/// names listed in the run's manifest, then writes the manifest itself.
pub fn save_run(run: &LabeledRun, dir: &Path, manifest_name: &str) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = run.manifest();
    if manifest.layer_files.len() != run.layers().len() {
        return Err(Error::Shape(format!(
            "manifest lists {} files for {} layers",
            manifest.layer_files.len(),
            run.layers().len()
        )));
    }
    for (layer, file) in run.layers().iter().zip(&manifest.layer_files) {
        save_embedding_file(layer, Some(run.labels()), &resolve(dir, file))?;
    }
    let path = dir.join(manifest_name);
    fs::write(&path, manifest.to_json()).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}
