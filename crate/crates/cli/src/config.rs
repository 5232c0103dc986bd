//! TOML run configuration. Every key mirrors a command-line flag; flags
//! win on conflict.
//!
//! ```toml
//! corpus = "data/planted"
//! encoder = "birnn"
//! similarity = "additive"
//! seed = 1
//!
//! [train]
//! epochs = 5
//!
//! [search]
//! iterations = 300
//! ```

use std::path::{Path, PathBuf};

use audit_core::model::{EncoderKind, SimilarityKind};
use audit_core::report::ExperimentSpec;
use serde::Deserialize;

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub corpus: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub encoder: Option<EncoderKind>,
    pub similarity: Option<SimilarityKind>,
    pub embedding_dim: Option<usize>,
    pub hidden_dim: Option<usize>,
    pub eps: Option<f64>,
    pub k: Option<usize>,
    pub perms: Option<usize>,
    pub seed: Option<u64>,
    pub heatmaps: Option<usize>,
    pub heatmap_rescale: Option<bool>,
    pub max_instances: Option<usize>,
    pub threads: Option<usize>,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub search: SearchSection,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: Option<usize>,
    pub learning_rate: Option<f64>,
    pub beta1: Option<f64>,
    pub beta2: Option<f64>,
    pub epsilon: Option<f64>,
    pub l2_lambda: Option<f64>,
    pub batch_size: Option<usize>,
    pub patience: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchSection {
    pub lambda: Option<f64>,
    pub learning_rate: Option<f64>,
    pub iterations: Option<usize>,
    pub patience: Option<usize>,
    pub tolerance: Option<f64>,
    pub init_noise: Option<f64>,
    pub antithetic: Option<bool>,
    pub max_restarts: Option<usize>,
    pub line_search: Option<bool>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        toml::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
    }

    /// Overlays this file onto `spec`.
    pub fn apply(self, spec: &mut ExperimentSpec) {
        macro_rules! set {
            ($($src:expr => $dst:expr),* $(,)?) => {$(
                if let Some(v) = $src { $dst = v; }
            )*};
        }
        set! {
            self.corpus => spec.corpus,
            self.out => spec.out,
            self.encoder => spec.encoder,
            self.similarity => spec.similarity,
            self.embedding_dim => spec.embedding_dim,
            self.hidden_dim => spec.hidden_dim,
            self.k => spec.search.k,
            self.perms => spec.perms,
            self.seed => spec.seed,
            self.heatmaps => spec.heatmaps,
            self.heatmap_rescale => spec.heatmap_rescale,
            self.train.epochs => spec.train.epochs,
            self.train.learning_rate => spec.train.learning_rate,
            self.train.beta1 => spec.train.beta1,
            self.train.beta2 => spec.train.beta2,
            self.train.epsilon => spec.train.epsilon,
            self.train.l2_lambda => spec.train.l2_lambda,
            self.train.batch_size => spec.train.batch_size,
            self.search.lambda => spec.search.lambda,
            self.search.learning_rate => spec.search.learning_rate,
            self.search.iterations => spec.search.iterations,
            self.search.patience => spec.search.patience,
            self.search.tolerance => spec.search.tolerance,
            self.search.init_noise => spec.search.init_noise,
            self.search.antithetic => spec.search.antithetic,
            self.search.max_restarts => spec.search.max_restarts,
            self.search.line_search => spec.search.line_search,
        }
        if self.checkpoint.is_some() {
            spec.checkpoint = self.checkpoint;
        }
        if self.eps.is_some() {
            spec.eps = self.eps;
        }
        if self.max_instances.is_some() {
            spec.max_instances = self.max_instances;
        }
        if self.threads.is_some() {
            spec.threads = self.threads;
        }
        if self.train.patience.is_some() {
            spec.train.patience = self.train.patience;
        }
    }
}
