use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::heatmap::{heatmap_document, render_heatmap, render_heatmap_pair};
use super::histogram::{emit_histogram, Histogram};
use crate::counterfactual::{
    adversarial_search, epsilon_for_task, instance_seed, median, permutation_experiment, AdversarialConfig,
    AdversarialResult, Adversary, PermutationResult,
};
use crate::data::{load_corpus, Corpus, Instance, TaskKind};
use crate::importance::{
    aggregate_correlations, correlate, gradient_importance, loo_importance, CorrelationSummary, ImportanceRecord, Stat,
};
use crate::metrics::TauVariant;
use crate::model::{EncoderKind, ForwardTrace, Model, ModelConfig, SimilarityKind};
use crate::training::{evaluate, train_model, EpochRecord, MetricKind, TrainConfig};

pub const REPORT_SCHEMA_VERSION: u32 = 1;
/// Bins of the ε-max JSD histogram over `[0, 0.7]`.
pub const JSD_BINS: usize = 14;
pub const JSD_RANGE: (f64, f64) = (0.0, 0.7);
/// Written into the output directory when a run aborts after producing
/// some files.
pub const PARTIAL_MARKER: &str = "PARTIAL";

const ADVERSARIAL_SALT: u64 = 0x5eed_ad7e;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Analysis {
    Importance,
    Permutation,
    Adversarial,
}

impl Analysis {
    pub const ALL: [Analysis; 3] = [Analysis::Importance, Analysis::Permutation, Analysis::Adversarial];
}

impl std::str::FromStr for Analysis {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "importance" => Ok(Self::Importance),
            "permutation" | "permute" => Ok(Self::Permutation),
            "adversarial" => Ok(Self::Adversarial),
            _ => Err(format!("unknown analysis `{s}`")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Load,
    Train,
    Evaluate,
    Importance,
    Permutation,
    Adversarial,
    Write,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Load => "load",
            Stage::Train => "train",
            Stage::Evaluate => "evaluate",
            Stage::Importance => "importance",
            Stage::Permutation => "permutation",
            Stage::Adversarial => "adversarial",
            Stage::Write => "write",
        })
    }
}

fn on_instance(instance: &Option<String>) -> String {
    instance.as_ref().map(|i| format!(" on instance {i}")).unwrap_or_default()
}

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid experiment: {0}")]
    InvalidSpec(String),
    #[error("{stage} stage failed{}: {source}", on_instance(.instance))]
    Stage {
        stage: Stage,
        instance: Option<String>,
        #[source]
        source: Box<dyn std::error::Error + Send + Sync>,
    },
}

impl ExperimentError {
    fn at(stage: Stage, source: impl Into<Box<dyn std::error::Error + Send + Sync>>) -> Self {
        ExperimentError::Stage {
            stage,
            instance: None,
            source: source.into(),
        }
    }

    fn on(stage: Stage, id: &str, source: impl Into<Box<dyn std::error::Error + Send + Sync>>) -> Self {
        ExperimentError::Stage {
            stage,
            instance: Some(id.to_owned()),
            source: source.into(),
        }
    }

    pub fn stage(&self) -> Option<Stage> {
        match self {
            ExperimentError::Stage { stage, .. } => Some(*stage),
            ExperimentError::InvalidSpec(_) => None,
        }
    }
}

/// Everything that determines a run. `seed` drives model initialization,
/// shuffling and every per-instance search (it overrides `train.seed`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub corpus: PathBuf,
    pub encoder: EncoderKind,
    pub similarity: SimilarityKind,
    pub embedding_dim: usize,
    pub hidden_dim: usize,
    pub train: TrainConfig,
    /// Skip training and analyse this checkpoint.
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
    pub analyses: BTreeSet<Analysis>,
    /// Overrides the task default (0.01 classification, 0.05 otherwise).
    #[serde(default)]
    pub eps: Option<f64>,
    pub search: AdversarialConfig,
    pub perms: usize,
    #[serde(default)]
    pub tau_variant: TauVariant,
    /// Instances (in id order) to render heatmaps for.
    pub heatmaps: usize,
    #[serde(default)]
    pub heatmap_rescale: bool,
    /// Analyse only the first N test instances in id order.
    #[serde(default)]
    pub max_instances: Option<usize>,
    /// Worker threads; defaults to the number of cores.
    #[serde(default)]
    pub threads: Option<usize>,
    pub out: PathBuf,
    pub seed: u64,
}

impl ExperimentSpec {
    pub fn new(corpus: impl Into<PathBuf>, out: impl Into<PathBuf>) -> Self {
        Self {
            corpus: corpus.into(),
            encoder: EncoderKind::Birnn,
            similarity: SimilarityKind::Additive,
            embedding_dim: 64,
            hidden_dim: 32,
            train: TrainConfig::default(),
            checkpoint: None,
            analyses: Analysis::ALL.into_iter().collect(),
            eps: None,
            search: AdversarialConfig::default(),
            perms: 100,
            tau_variant: TauVariant::B,
            heatmaps: 10,
            heatmap_rescale: false,
            max_instances: None,
            threads: None,
            out: out.into(),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        let bad = |m: String| Err(ExperimentError::InvalidSpec(m));
        if self.analyses.is_empty() {
            return bad("select at least one analysis".into());
        }
        if !self.corpus.exists() {
            return bad(format!("corpus {} does not exist", self.corpus.display()));
        }
        if let Some(c) = &self.checkpoint {
            if !c.exists() {
                return bad(format!("checkpoint {} does not exist", c.display()));
            }
        }
        if let Some(eps) = self.eps {
            if !(eps >= 0.0) {
                return bad(format!("eps must be non-negative, got {eps}"));
            }
        }
        if self.embedding_dim == 0 || self.hidden_dim == 0 {
            return bad("embedding and hidden dimensions must be positive".into());
        }
        if self.perms == 0 {
            return bad("perms must be at least 1".into());
        }
        if self.threads == Some(0) {
            return bad("threads must be at least 1".into());
        }
        if self.max_instances == Some(0) {
            return bad("max_instances must be at least 1".into());
        }
        self.search.validate().map_err(|e| ExperimentError::InvalidSpec(e.to_string()))?;
        self.train.validate().map_err(|e| ExperimentError::InvalidSpec(e.to_string()))?;
        Ok(())
    }

    /// SHA-256 over the settings that affect results (the output directory
    /// and thread count are left out).
    pub fn config_hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("spec serializes");
        if let Some(obj) = v.as_object_mut() {
            obj.remove("out");
            obj.remove("threads");
        }
        hex(&Sha256::digest(v.to_string().as_bytes()))
    }

    fn has(&self, a: Analysis) -> bool {
        self.analyses.contains(&a)
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub tool_version: String,
    pub seed: u64,
    pub config_hash: String,
    pub corpus_digest: String,
    pub task: TaskKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub label_names: Option<Vec<String>>,
    pub train_size: usize,
    pub test_size: usize,
    pub analysed_instances: usize,
    pub encoder: EncoderKind,
    pub similarity: SimilarityKind,
    pub embedding_dim: usize,
    pub hidden_dim: usize,
    pub analyses: Vec<Analysis>,
    pub trained: bool,
    pub tau_variant: TauVariant,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eps: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub perms: Option<usize>,
    /// Adversarial search settings (iterations, restarts, initialization).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub search: Option<AdversarialConfig>,
    pub heatmap_rescale: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Performance {
    pub metric: MetricKind,
    pub value: f64,
    /// F1 with no predicted positives.
    pub undefined: bool,
    pub accuracy: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub history: Vec<EpochRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PermutationSummary {
    pub instances: usize,
    pub single_token: usize,
    pub median_delta_y_med: f64,
    pub delta_y_med: Stat,
    /// Keyed by predicted class.
    pub per_class: BTreeMap<usize, Stat>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdversarialSummary {
    pub instances: usize,
    pub single_token: usize,
    pub eps: f64,
    pub eps_max_jsd: Stat,
    pub per_class: BTreeMap<usize, Stat>,
    /// Reported candidates violating ε (excluded from ε-max JSD).
    pub infeasible_candidates: usize,
    /// Instances with no feasible candidate.
    pub no_feasible: usize,
    pub restarts: usize,
    pub iterations: Stat,
    /// Share of instances whose penalized objective never went down.
    pub monotone_fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScatterPoint {
    pub id: String,
    pub class: usize,
    pub x: f64,
    pub y: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PlotData {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tau_g_histogram: Option<Histogram>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eps_max_jsd_histogram: Option<Histogram>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_alpha_vs_delta_y_med: Option<Vec<ScatterPoint>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_alpha_vs_eps_max_jsd: Option<Vec<ScatterPoint>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub schema_version: u32,
    pub metadata: RunMetadata,
    pub performance: Performance,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub importance: Option<CorrelationSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub permutation: Option<PermutationSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub adversarial: Option<AdversarialSummary>,
    pub plots: PlotData,
    /// Output files by role, relative to the output directory.
    pub files: BTreeMap<String, String>,
}

impl Report {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    /// Parses a report, rejecting schema versions this build does not know.
    pub fn from_json(text: &str) -> Result<Self, String> {
        let v: serde_json::Value = serde_json::from_str(text).map_err(|e| e.to_string())?;
        match v.get("schema_version").and_then(|s| s.as_u64()) {
            Some(n) if n == REPORT_SCHEMA_VERSION as u64 => {}
            Some(n) => return Err(format!("unsupported report schema version {n}")),
            None => return Err("report has no schema_version".into()),
        }
        serde_json::from_value(v).map_err(|e| e.to_string())
    }
}

/// One line of `records/counterfactual.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CounterfactualRecord {
    pub id: String,
    pub class: usize,
    pub max_alpha: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub perms: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta_y_med: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eps: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eps_max_jsd: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adversaries: Option<Vec<Adversary>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub iterations: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub restarts: Option<usize>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub single_token: bool,
}

fn corpus_digest(corpus: &Corpus) -> String {
    let mut h = Sha256::new();
    h.update(serde_json::to_string(&corpus.meta).expect("meta serializes").as_bytes());
    for tok in corpus.vocab.tokens() {
        h.update(tok.as_bytes());
        h.update(b"\n");
    }
    for split in [&corpus.train, &corpus.test] {
        for inst in split {
            h.update(serde_json::to_string(inst).expect("instance serializes").as_bytes());
            h.update(b"\n");
        }
    }
    hex(&h.finalize())
}

fn safe_name(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.' { c } else { '_' })
        .collect()
}

fn write_file(out: &Path, rel: &str, contents: &str) -> Result<(), ExperimentError> {
    let path = out.join(rel);
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| ExperimentError::at(Stage::Write, format!("{}: {e}", parent.display())))?;
    }
    fs::write(&path, contents).map_err(|e| ExperimentError::at(Stage::Write, format!("{}: {e}", path.display())))
}

fn jsonl<T: Serialize>(items: &[T]) -> String {
    let mut out = String::new();
    for item in items {
        out.push_str(&serde_json::to_string(item).expect("record serializes"));
        out.push('\n');
    }
    out
}

fn scatter_csv(points: &[ScatterPoint], x: &str, y: &str) -> String {
    let mut out = format!("id,class,{x},{y}\n");
    for p in points {
        out.push_str(&format!("{},{},{},{}\n", p.id, p.class, p.x, p.y));
    }
    out
}

fn median_or_zero(values: &[f64]) -> f64 {
    median(values).unwrap_or(0.0)
}

fn stat_or_empty(values: &[f64]) -> Stat {
    Stat::of(values).unwrap_or(Stat {
        count: 0,
        mean: 0.0,
        std: 0.0,
    })
}

fn per_class(points: &[ScatterPoint]) -> BTreeMap<usize, Stat> {
    let mut by: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for p in points {
        by.entry(p.class).or_default().push(p.y);
    }
    by.into_iter().map(|(c, v)| (c, stat_or_empty(&v))).collect()
}

/// Trains (or loads) a model, runs the selected analyses over the test
/// split and writes `report.json`, `records/*.jsonl`, `plots/*.csv`,
/// `heatmaps/*.html`, `model.json` and (when trained) `history.csv`.
///
/// Output is a pure function of the spec: records are sorted by instance
/// id and every random draw is seeded per instance. A failed run leaves a
/// `PARTIAL` file naming the failing stage.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<Report, ExperimentError> {
    spec.validate()?;
    fs::create_dir_all(&spec.out).map_err(|e| ExperimentError::at(Stage::Write, format!("{}: {e}", spec.out.display())))?;
    let marker = spec.out.join(PARTIAL_MARKER);
    if marker.exists() {
        fs::remove_file(&marker).map_err(|e| ExperimentError::at(Stage::Write, e))?;
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(spec.threads.unwrap_or(0))
        .build()
        .map_err(|e| ExperimentError::at(Stage::Load, e))?;
    let result = pool.install(|| run(spec));
    if let Err(e) = &result {
        let _ = fs::write(&marker, format!("{e}\n"));
    }
    result
}

fn run(spec: &ExperimentSpec) -> Result<Report, ExperimentError> {
    let out = spec.out.as_path();
    let corpus = load_corpus(&spec.corpus).map_err(|e| ExperimentError::at(Stage::Load, e))?;
    let task = corpus.task();
    let mut files = BTreeMap::new();

    let (model, history) = match &spec.checkpoint {
        Some(path) => {
            let model = Model::load(path).map_err(|e| ExperimentError::at(Stage::Load, e))?;
            if model.config.vocab_size != corpus.vocab.len() || model.config.num_classes != corpus.num_labels() {
                return Err(ExperimentError::at(
                    Stage::Load,
                    format!(
                        "checkpoint expects vocab {} / {} classes, corpus has {} / {}",
                        model.config.vocab_size,
                        model.config.num_classes,
                        corpus.vocab.len(),
                        corpus.num_labels()
                    ),
                ));
            }
            (model, Vec::new())
        }
        None => {
            let config = ModelConfig::for_corpus(&corpus, spec.encoder, spec.similarity)
                .with_dims(spec.embedding_dim, spec.hidden_dim)
                .with_seed(spec.seed);
            let train = TrainConfig {
                seed: spec.seed,
                ..spec.train.clone()
            };
            let (model, history) = train_model(&corpus, &config, &train).map_err(|e| ExperimentError::at(Stage::Train, e))?;
            write_file(out, "history.csv", &history.to_csv())?;
            files.insert("history".to_owned(), "history.csv".to_owned());
            (model, history.records)
        }
    };
    write_file(out, "model.json", &model.to_json())?;
    files.insert("model".to_owned(), "model.json".to_owned());

    let evaluation = evaluate(&model, &corpus.test, task).map_err(|e| ExperimentError::at(Stage::Evaluate, e))?;
    let performance = Performance {
        metric: evaluation.kind,
        value: evaluation.value,
        undefined: evaluation.undefined,
        accuracy: evaluation.accuracy,
        history,
    };

    let mut instances: Vec<&Instance> = corpus.test.iter().collect();
    instances.sort_by(|a, b| a.id.cmp(&b.id));
    if let Some(n) = spec.max_instances {
        instances.truncate(n);
    }
    let traces: Vec<ForwardTrace> = instances
        .par_iter()
        .map(|i| model.forward(i).map_err(|e| ExperimentError::on(Stage::Evaluate, &i.id, e)))
        .collect::<Result<_, _>>()?;

    let mut plots = PlotData::default();

    let importance = if spec.has(Analysis::Importance) {
        let records: Vec<ImportanceRecord> = instances
            .par_iter()
            .zip(&traces)
            .map(|(inst, trace)| {
                let tag = |e| ExperimentError::on(Stage::Importance, &inst.id, e);
                let g = gradient_importance(&model, trace).map_err(tag)?;
                let loo = loo_importance(&model, trace).map_err(tag)?;
                correlate(&inst.id, trace.predicted(), inst.label, &trace.alpha, &g, loo.as_deref(), spec.tau_variant)
                    .map_err(tag)
            })
            .collect::<Result<_, _>>()?;
        let summary = aggregate_correlations(&records).map_err(|e| ExperimentError::at(Stage::Importance, e))?;
        write_file(out, "records/importance.jsonl", &jsonl(&records))?;
        write_file(out, "plots/tau_g_histogram.csv", &summary.tau_g_histogram.to_csv())?;
        files.insert("importance_records".to_owned(), "records/importance.jsonl".to_owned());
        files.insert("tau_g_histogram".to_owned(), "plots/tau_g_histogram.csv".to_owned());
        plots.tau_g_histogram = Some(summary.tau_g_histogram.clone());
        Some(summary)
    } else {
        None
    };

    let permutations: Option<Vec<PermutationResult>> = if spec.has(Analysis::Permutation) {
        Some(
            instances
                .par_iter()
                .zip(&traces)
                .map(|(inst, trace)| {
                    permutation_experiment(&model, trace, &inst.id, spec.perms, instance_seed(spec.seed, &inst.id))
                        .map_err(|e| ExperimentError::on(Stage::Permutation, &inst.id, e))
                })
                .collect::<Result<_, _>>()?,
        )
    } else {
        None
    };

    let eps = spec.eps.unwrap_or_else(|| epsilon_for_task(task));
    let adversarial: Option<Vec<AdversarialResult>> = if spec.has(Analysis::Adversarial) {
        Some(
            instances
                .par_iter()
                .zip(&traces)
                .map(|(inst, trace)| {
                    let seed = instance_seed(spec.seed ^ ADVERSARIAL_SALT, &inst.id);
                    adversarial_search(&model, trace, &inst.id, eps, &spec.search, seed)
                        .map_err(|e| ExperimentError::on(Stage::Adversarial, &inst.id, e))
                })
                .collect::<Result<_, _>>()?,
        )
    } else {
        None
    };

    let classes: Vec<usize> = traces.iter().map(ForwardTrace::predicted).collect();
    let mut permutation_summary = None;
    if let Some(perms) = &permutations {
        let points: Vec<ScatterPoint> = perms
            .iter()
            .zip(&classes)
            .map(|(p, &class)| ScatterPoint {
                id: p.id.clone(),
                class,
                x: p.max_alpha,
                y: p.delta_y_med,
            })
            .collect();
        let meds: Vec<f64> = points.iter().map(|p| p.y).collect();
        permutation_summary = Some(PermutationSummary {
            instances: perms.len(),
            single_token: perms.iter().filter(|p| p.single_token).count(),
            median_delta_y_med: median_or_zero(&meds),
            delta_y_med: stat_or_empty(&meds),
            per_class: per_class(&points),
        });
        write_file(out, "plots/max_alpha_vs_delta_y_med.csv", &scatter_csv(&points, "max_alpha", "delta_y_med"))?;
        files.insert("max_alpha_vs_delta_y_med".to_owned(), "plots/max_alpha_vs_delta_y_med.csv".to_owned());
        plots.max_alpha_vs_delta_y_med = Some(points);
    }
    let mut adversarial_summary = None;
    if let Some(adv) = &adversarial {
        let points: Vec<ScatterPoint> = adv
            .iter()
            .zip(&classes)
            .map(|(a, &class)| ScatterPoint {
                id: a.id.clone(),
                class,
                x: a.max_alpha,
                y: a.eps_max_jsd,
            })
            .collect();
        let jsds: Vec<f64> = points.iter().map(|p| p.y).collect();
        let searched: Vec<&AdversarialResult> = adv.iter().filter(|a| !a.single_token).collect();
        let iterations: Vec<f64> = searched.iter().map(|a| a.iterations as f64).collect();
        let monotone = searched.iter().filter(|a| a.objective_decreases == 0).count();
        let histogram = emit_histogram(&jsds, JSD_BINS, JSD_RANGE.0, JSD_RANGE.1);
        adversarial_summary = Some(AdversarialSummary {
            instances: adv.len(),
            single_token: adv.len() - searched.len(),
            eps,
            eps_max_jsd: stat_or_empty(&jsds),
            per_class: per_class(&points),
            infeasible_candidates: adv.iter().map(|a| a.adversaries.iter().filter(|c| c.tvd > eps).count()).sum(),
            no_feasible: adv.iter().filter(|a| a.feasible().next().is_none()).count(),
            restarts: adv.iter().map(|a| a.restarts).sum(),
            iterations: stat_or_empty(&iterations),
            monotone_fraction: if searched.is_empty() {
                1.0
            } else {
                monotone as f64 / searched.len() as f64
            },
        });
        write_file(out, "plots/eps_max_jsd_histogram.csv", &histogram.to_csv())?;
        write_file(out, "plots/max_alpha_vs_eps_max_jsd.csv", &scatter_csv(&points, "max_alpha", "eps_max_jsd"))?;
        files.insert("eps_max_jsd_histogram".to_owned(), "plots/eps_max_jsd_histogram.csv".to_owned());
        files.insert("max_alpha_vs_eps_max_jsd".to_owned(), "plots/max_alpha_vs_eps_max_jsd.csv".to_owned());
        plots.eps_max_jsd_histogram = Some(histogram);
        plots.max_alpha_vs_eps_max_jsd = Some(points);
    }

    if permutations.is_some() || adversarial.is_some() {
        let records: Vec<CounterfactualRecord> = (0..instances.len())
            .map(|i| {
                let p = permutations.as_ref().map(|v| &v[i]);
                let a = adversarial.as_ref().map(|v| &v[i]);
                CounterfactualRecord {
                    id: instances[i].id.clone(),
                    class: classes[i],
                    max_alpha: traces[i].max_alpha(),
                    perms: p.map(|p| p.perms),
                    delta_y_med: p.map(|p| p.delta_y_med),
                    eps: a.map(|a| a.eps),
                    k: a.map(|a| a.k),
                    eps_max_jsd: a.map(|a| a.eps_max_jsd),
                    adversaries: a.map(|a| a.adversaries.clone()),
                    iterations: a.map(|a| a.iterations),
                    restarts: a.map(|a| a.restarts),
                    single_token: traces[i].len() < 2,
                }
            })
            .collect();
        write_file(out, "records/counterfactual.jsonl", &jsonl(&records))?;
        files.insert("counterfactual_records".to_owned(), "records/counterfactual.jsonl".to_owned());
    }

    for (i, inst) in instances.iter().take(spec.heatmaps).enumerate() {
        let tokens = corpus
            .vocab
            .decode_all(&inst.tokens)
            .map_err(|e| ExperimentError::on(Stage::Write, &inst.id, e))?;
        let trace = &traces[i];
        let mut fragments = Vec::new();
        if let Some(q) = &inst.query {
            let q = corpus.vocab.decode_all(q).map_err(|e| ExperimentError::on(Stage::Write, &inst.id, e))?;
            fragments.push(format!("<p>Query: {}</p>", q.join(" ").replace('<', "&lt;")));
        }
        let best = adversarial
            .as_ref()
            .filter(|v| !v[i].single_token)
            .and_then(|v| v[i].feasible().max_by(|x, y| x.jsd.total_cmp(&y.jsd)));
        let label = corpus.meta.label_names.as_ref().and_then(|n| n.get(classes[i])).cloned().unwrap_or_else(|| classes[i].to_string());
        let fragment = match best {
            Some(adv) => render_heatmap_pair(&tokens, &trace.alpha, &adv.alpha, adv.tvd, spec.heatmap_rescale),
            None => render_heatmap(&tokens, &trace.alpha, Some(&format!("predicted: {label}")), spec.heatmap_rescale),
        }
        .map_err(|e| ExperimentError::on(Stage::Write, &inst.id, e))?;
        fragments.push(fragment);
        let rel = format!("heatmaps/{}.html", safe_name(&inst.id));
        write_file(out, &rel, &heatmap_document(&inst.id, &fragments))?;
        files.insert(format!("heatmap:{}", inst.id), rel);
    }

    let report = Report {
        schema_version: REPORT_SCHEMA_VERSION,
        metadata: RunMetadata {
            tool_version: env!("CARGO_PKG_VERSION").to_owned(),
            seed: spec.seed,
            config_hash: spec.config_hash(),
            corpus_digest: corpus_digest(&corpus),
            task,
            label_names: corpus.meta.label_names.clone(),
            train_size: corpus.train.len(),
            test_size: corpus.test.len(),
            analysed_instances: instances.len(),
            encoder: model.config.encoder,
            similarity: model.config.similarity,
            embedding_dim: model.config.embedding_dim,
            hidden_dim: model.config.hidden_dim,
            analyses: spec.analyses.iter().copied().collect(),
            trained: spec.checkpoint.is_none(),
            tau_variant: spec.tau_variant,
            eps: adversarial.is_some().then_some(eps),
            perms: permutations.is_some().then_some(spec.perms),
            search: adversarial.is_some().then(|| spec.search.clone()),
            heatmap_rescale: spec.heatmap_rescale,
        },
        performance,
        importance,
        permutation: permutation_summary,
        adversarial: adversarial_summary,
        plots,
        files,
    };
    write_file(out, "report.json", &report.to_json())?;
    Ok(report)
}

/// Checks an output directory: the report parses under the current schema,
/// every referenced file exists, and every id in the plot data has a
/// per-instance record.
pub fn verify_outputs(dir: &Path) -> Result<Report, String> {
    let text = fs::read_to_string(dir.join("report.json")).map_err(|e| format!("report.json: {e}"))?;
    let report = Report::from_json(&text)?;
    for rel in report.files.values() {
        if !dir.join(rel).is_file() {
            return Err(format!("missing output file {rel}"));
        }
    }
    let ids_in = |role: &str| -> Result<BTreeSet<String>, String> {
        let rel = report.files.get(role).ok_or_else(|| format!("no {role} file"))?;
        let text = fs::read_to_string(dir.join(rel)).map_err(|e| format!("{rel}: {e}"))?;
        text.lines()
            .map(|l| {
                serde_json::from_str::<serde_json::Value>(l)
                    .map_err(|e| format!("{rel}: {e}"))?
                    .get("id")
                    .and_then(|v| v.as_str())
                    .map(str::to_owned)
                    .ok_or_else(|| format!("{rel}: record without id"))
            })
            .collect()
    };
    let mut scatter: Vec<&ScatterPoint> = Vec::new();
    scatter.extend(report.plots.max_alpha_vs_delta_y_med.iter().flatten());
    scatter.extend(report.plots.max_alpha_vs_eps_max_jsd.iter().flatten());
    if !scatter.is_empty() {
        let ids = ids_in("counterfactual_records")?;
        if let Some(p) = scatter.iter().find(|p| !ids.contains(&p.id)) {
            return Err(format!("plot point {} has no record", p.id));
        }
    }
    if let Some(summary) = &report.importance {
        let ids = ids_in("importance_records")?;
        if ids.len() != summary.overall.records {
            return Err(format!("importance summary covers {} records, file has {}", summary.overall.records, ids.len()));
        }
    }
    Ok(report)
}
