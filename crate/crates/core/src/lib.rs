//! Per-layer generalization analysis of neural-network embeddings.
//!
//! Three label-aware scores are computed on each layer's embeddings of
//! held-out classes: NMI between K-means clusters and labels, kNN purity, and
//! linear-probe accuracy. [`index::profile`] evaluates all of them across
//! layers and seeds.

pub mod agreement;
pub mod clustering;
pub mod distance;
pub mod embedding;
pub mod error;
pub mod format;
pub mod index;
pub mod knn;
pub mod manifest;
pub mod par;
pub mod pca;
pub mod probe;
pub mod report;
pub mod seed;
pub mod synth;

pub use agreement::{confusion_matrix, nmi, nmi_labels, ConfusionMatrix};
pub use clustering::{kmeans_fit, ClusterAssignment, KMeansConfig};
pub use embedding::{EmbeddingMatrix, LabelVector, LabeledRun, Split, SplitSpec};
pub use error::{Error, Result};
pub use index::{profile, AnalysisConfig, GeneralizationProfile, MetricKind};
pub use knn::{knn_purity, KnnConfig};
pub use manifest::{load_run, RunManifest};
pub use pca::{pca_project, PcaProjection};
pub use probe::{run_probe, ProbeConfig};
