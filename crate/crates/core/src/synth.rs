//! Synthetic labeled runs with a known per-layer separability profile.
//!
//! Class centroids sit on a regular simplex whose edge length is the
//! requested separation; points get isotropic unit-variance Gaussian noise.

use serde::{Deserialize, Serialize};

use rand_distr::{Distribution, StandardNormal};

use crate::embedding::{EmbeddingMatrix, LabelVector, LabeledRun, SplitSpec};
use crate::error::{Error, Result, ResultExt};
use crate::manifest::RunManifest;
use crate::seed::rng_from;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureSpec {
    pub n_classes: usize,
    pub points_per_class: usize,
    pub dim: usize,
    /// Inter-centroid distance in units of the within-class standard deviation.
    pub separation: f64,
    pub seed: u64,
}

impl MixtureSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 2 {
            return Err(Error::Config(format!("n_classes must be >= 2, got {}", self.n_classes)));
        }
        if self.points_per_class < 2 {
            return Err(Error::Config(format!(
                "points_per_class must be >= 2, got {}",
                self.points_per_class
            )));
        }
        if self.dim < 2 {
            return Err(Error::Config(format!("dim must be >= 2, got {}", self.dim)));
        }
        if !(self.separation >= 0.0 && self.separation.is_finite()) {
            return Err(Error::Config(format!(
                "separation must be finite and >= 0, got {}",
                self.separation
            )));
        }
        if self.n_classes > self.dim + 1 {
            return Err(Error::Config(format!(
                "n_classes = {} exceeds dim + 1 = {}: a regular simplex of that many vertices does not fit",
                self.n_classes,
                self.dim + 1
            )));
        }
        Ok(())
    }
}

/// Vertices of a regular simplex with `n` vertices and the given edge length,
/// centred at the origin, in the first `n - 1` coordinates of `dim`-space.
///
/// Uses the Helmert basis of the sum-zero subspace: vertex `i` has coordinate
/// `h_k[i]` along `h_k = (1, .., 1, -k, 0, ..) / sqrt(k (k + 1))`.
pub fn simplex_centroids(n: usize, dim: usize, edge: f64) -> Vec<f64> {
    assert!(n >= 1 && n <= dim + 1, "simplex does not fit");
    let scale = edge / std::f64::consts::SQRT_2;
    let mut out = vec![0.0; n * dim];
    for k in 1..n {
        let norm = ((k * (k + 1)) as f64).sqrt();
        for i in 0..n {
            let h = match i.cmp(&k) {
                std::cmp::Ordering::Less => 1.0,
                std::cmp::Ordering::Equal => -(k as f64),
                std::cmp::Ordering::Greater => 0.0,
            };
            out[i * dim + (k - 1)] = scale * h / norm;
        }
    }
    out
}

fn mixture_values(spec: &MixtureSpec, noise_seed: &[u64]) -> Vec<f64> {
    let centroids = simplex_centroids(spec.n_classes, spec.dim, spec.separation);
    let mut rng = rng_from(noise_seed);
    let mut values = Vec::with_capacity(spec.n_classes * spec.points_per_class * spec.dim);
    for c in 0..spec.n_classes {
        let centre = &centroids[c * spec.dim..(c + 1) * spec.dim];
        for _ in 0..spec.points_per_class {
            for &m in centre {
                let z: f64 = StandardNormal.sample(&mut rng);
                // Stored at f32 precision so the in-memory run equals its EMB1 file.
                values.push(f64::from((m + z) as f32));
            }
        }
    }
    values
}

/// Class-major points with labels `0..n_classes`.
pub fn gen_gaussian_mixture(spec: &MixtureSpec) -> Result<(EmbeddingMatrix, LabelVector)> {
    spec.validate()?;
    let values = mixture_values(spec, &[spec.seed]);
    let n = spec.n_classes * spec.points_per_class;
    let labels = (0..spec.n_classes as u32)
        .flat_map(|c| std::iter::repeat_n(c, spec.points_per_class))
        .collect();
    Ok((EmbeddingMatrix::new(0, n, spec.dim, values)?, LabelVector::new(labels)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerSeparation {
    pub seen: f64,
    pub unseen: f64,
    /// Noise seed for this layer; defaults to the sweep seed, so layers share
    /// noise and differ only in centroid spread.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerSweepSpec {
    #[serde(default = "default_model")]
    pub model: String,
    #[serde(default = "default_dataset")]
    pub dataset: String,
    /// Number of seen classes (0 or >= 2); they take ids `0..seen_classes`.
    pub seen_classes: usize,
    /// Number of unseen classes (>= 2); ids follow the seen ones.
    pub unseen_classes: usize,
    pub points_per_class: usize,
    pub dim: usize,
    pub layers: Vec<LayerSeparation>,
    pub seed: u64,
}

fn default_model() -> String {
    "synthetic".into()
}

fn default_dataset() -> String {
    "gaussian-sweep".into()
}

impl LayerSweepSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        let spec: Self = serde_json::from_str(text)
            .map_err(|e| Error::Config(format!("invalid sweep spec: {e}")))?;
        spec.validate()?;
        Ok(spec)
    }

    fn group(&self, n_classes: usize, separation: f64, seed: u64) -> MixtureSpec {
        MixtureSpec {
            n_classes,
            points_per_class: self.points_per_class,
            dim: self.dim,
            separation,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Config("layers: at least one layer is required".into()));
        }
        if self.seen_classes == 1 {
            return Err(Error::Config("seen_classes: must be 0 or >= 2".into()));
        }
        if self.unseen_classes < 2 {
            return Err(Error::Config("unseen_classes: must be >= 2".into()));
        }
        for (i, l) in self.layers.iter().enumerate() {
            let field = |name: &str| format!("layers[{i}].{name}");
            if self.seen_classes > 0 {
                self.group(self.seen_classes, l.seen, self.seed)
                    .validate()
                    .context_with(|| field("seen"))?;
            }
            self.group(self.unseen_classes, l.unseen, self.seed)
                .validate()
                .context_with(|| field("unseen"))?;
        }
        Ok(())
    }

    pub fn layer_file(i: usize) -> String {
        format!("layer_{i:02}.emb")
    }
}

/// Builds one run: every layer holds the same points (seen classes first,
/// then unseen), spread according to that layer's separations.
pub fn gen_layer_sweep(spec: &LayerSweepSpec) -> Result<LabeledRun> {
    spec.validate()?;
    let (s, u) = (spec.seen_classes, spec.unseen_classes);
    let mut layers = Vec::with_capacity(spec.layers.len());
    for (i, sep) in spec.layers.iter().enumerate() {
        let noise = sep.seed.unwrap_or(spec.seed);
        let mut values = Vec::new();
        if s > 0 {
            values.extend(mixture_values(&spec.group(s, sep.seen, noise), &[noise, 0]));
        }
        values.extend(mixture_values(&spec.group(u, sep.unseen, noise), &[noise, 1]));
        let n = (s + u) * spec.points_per_class;
        layers.push(EmbeddingMatrix::new(i as u32, n, spec.dim, values)?);
    }
    let labels = LabelVector::new(
        (0..(s + u) as u32)
            .flat_map(|c| std::iter::repeat_n(c, spec.points_per_class))
            .collect(),
    );
    let planned: Vec<String> = spec
        .layers
        .iter()
        .map(|l| format!("{}/{}", l.seen, l.unseen))
        .collect();
    let manifest = RunManifest {
        model_name: spec.model.clone(),
        dataset_name: spec.dataset.clone(),
        seed: spec.seed,
        seen_classes: (0..s as u32).collect(),
        unseen_classes: (s as u32..(s + u) as u32).collect(),
        layer_files: (0..spec.layers.len()).map(LayerSweepSpec::layer_file).collect(),
        notes: format!(
            "synthetic layer sweep; {} points/class, dim {}; planned separations seen/unseen per layer: {}",
            spec.points_per_class,
            spec.dim,
            planned.join(", ")
        ),
        class_names: None,
        extra: Default::default(),
    };
    let split = SplitSpec::new(manifest.seen_classes.clone(), manifest.unseen_classes.clone())?;
    LabeledRun::new(manifest, layers, labels, split)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distance::squared_euclidean;

    fn sweep(layers: &[(f64, f64)]) -> LayerSweepSpec {
        LayerSweepSpec {
            model: "m".into(),
            dataset: "d".into(),
            seen_classes: 3,
            unseen_classes: 2,
            points_per_class: 4,
            dim: 3,
            layers: layers
                .iter()
                .map(|&(seen, unseen)| LayerSeparation { seen, unseen, seed: None })
                .collect(),
            seed: 9,
        }
    }

    #[test]
    fn simplex_is_regular_and_centred() {
        for n in 2..7 {
            let c = simplex_centroids(n, 8, 3.0);
            for i in 0..n {
                for j in 0..i {
                    let d = squared_euclidean(&c[i * 8..(i + 1) * 8], &c[j * 8..(j + 1) * 8]).sqrt();
                    assert!((d - 3.0).abs() < 1e-12);
                }
            }
            for f in 0..8 {
                let s: f64 = (0..n).map(|i| c[i * 8 + f]).sum();
                assert!(s.abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mixture_is_deterministic_and_validated() {
        let spec = MixtureSpec {
            n_classes: 4,
            points_per_class: 5,
            dim: 3,
            separation: 2.0,
            seed: 1,
        };
        let (a, la) = gen_gaussian_mixture(&spec).unwrap();
        let (b, lb) = gen_gaussian_mixture(&spec).unwrap();
        assert_eq!(a, b);
        assert_eq!(la, lb);
        assert_eq!(la.class_counts().len(), 4);

        let err = gen_gaussian_mixture(&MixtureSpec { n_classes: 5, ..spec.clone() }).unwrap_err();
        assert!(err.to_string().contains("simplex"));
        assert!(gen_gaussian_mixture(&MixtureSpec { separation: -1.0, ..spec }).is_err());
    }

    #[test]
    fn sweep_layout() {
        let run = gen_layer_sweep(&sweep(&[(5.0, 1.0), (6.0, 2.0)])).unwrap();
        assert_eq!(run.layers().len(), 2);
        assert_eq!(run.n_points(), 20);
        assert_eq!(run.split().seen().len(), 3);
        assert_eq!(run.split().unseen().iter().copied().collect::<Vec<_>>(), vec![3, 4]);
        assert_eq!(run.manifest().layer_files, vec!["layer_00.emb", "layer_01.emb"]);
        assert!(run.manifest().notes.contains("5/1, 6/2"));
    }

    #[test]
    fn identical_layers_are_identical() {
        let run = gen_layer_sweep(&sweep(&[(4.0, 2.0), (4.0, 2.0)])).unwrap();
        assert_eq!(run.layers()[0].values(), run.layers()[1].values());
    }

    #[test]
    fn spec_errors_name_the_field() {
        let mut bad = sweep(&[(1.0, 1.0)]);
        bad.unseen_classes = 5;
        let err = gen_layer_sweep(&bad).unwrap_err();
        assert!(err.to_string().contains("layers[0].unseen"), "{err}");
        assert!(err.to_string().contains("simplex"), "{err}");

        let err = LayerSweepSpec::from_json(r#"{"seen_classes": 2}"#).unwrap_err();
        assert!(err.to_string().contains("unseen_classes"), "{err}");
        let err = LayerSweepSpec::from_json(
            r#"{"seen_classes":2,"unseen_classes":2,"points_per_class":3,"dim":2,"layers":[],"seed":0}"#,
        )
        .unwrap_err();
        assert!(err.to_string().contains("layers"), "{err}");
    }
}
