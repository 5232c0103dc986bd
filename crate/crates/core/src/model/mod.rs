//! Attention-equipped text model: embedding, encoder, similarity, attention
//! and a dense decoder over the attention-pooled hidden state.
//!
//! Vectors are rows: a hidden state `h_t` is a `[1, m]` row and layers compute
//! `h · W + b`. All shape bookkeeping lives in [`ModelConfig`]; the graph is
//! built by the private `build` module so training, analysis and plain
//! inference share one code path.

pub(crate) mod build;

#[cfg(test)]
mod tests;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{self, AutodiffError, Graph, Tensor, Var};
use crate::data::{Corpus, Instance, TaskKind};
use build::{Batch, BuildOptions};

pub const CHECKPOINT_FORMAT: &str = "attention-audit-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// How far an attention vector may stray from the simplex before decode
/// rejects it.
pub const SIMPLEX_SLACK: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("token id {id} outside vocabulary of {vocab}")]
    TokenOutOfRange { id: usize, vocab: usize },
    #[error("empty token sequence")]
    EmptySequence,
    #[error("query-conditioned model needs a query for every instance")]
    MissingQuery,
    #[error("missing parameter `{0}`")]
    MissingParameter(String),
    #[error("parameter `{name}` has shape {got:?}, expected {expected:?}")]
    ParameterShape {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("attention is not a distribution: {0}")]
    NotOnSimplex(String),
    #[error("bad checkpoint: {0}")]
    Checkpoint(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderKind {
    Average,
    Birnn,
    Conv,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SimilarityKind {
    Additive,
    #[serde(alias = "dot")]
    ScaledDot,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputActivation {
    Sigmoid,
    Softmax,
}

impl std::str::FromStr for EncoderKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "average" => Ok(Self::Average),
            "birnn" | "lstm" => Ok(Self::Birnn),
            "conv" | "cnn" => Ok(Self::Conv),
            _ => Err(format!("unknown encoder `{s}`")),
        }
    }
}

impl std::str::FromStr for SimilarityKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "additive" => Ok(Self::Additive),
            "dot" | "scaled-dot" => Ok(Self::ScaledDot),
            _ => Err(format!("unknown similarity `{s}`")),
        }
    }
}

impl std::fmt::Display for EncoderKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Average => "average",
            Self::Birnn => "birnn",
            Self::Conv => "conv",
        })
    }
}

impl std::fmt::Display for SimilarityKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Additive => "additive",
            Self::ScaledDot => "dot",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderKind,
    pub similarity: SimilarityKind,
    pub vocab_size: usize,
    pub embedding_dim: usize,
    pub hidden_dim: usize,
    /// Size of the output distribution; 2 for binary classification.
    pub num_classes: usize,
    pub output: OutputActivation,
    /// Whether attention is conditioned on an encoded query.
    pub conditioned: bool,
    pub conv_kernels: Vec<usize>,
    pub conv_filters: Vec<usize>,
    pub seed: u64,
}

impl ModelConfig {
    /// Desk-scale defaults: d = 64, m = 32, conv kernels [1, 3] with 16
    /// filters each.
    pub fn new(
        encoder: EncoderKind,
        similarity: SimilarityKind,
        vocab_size: usize,
        num_classes: usize,
        conditioned: bool,
    ) -> Self {
        let output = if num_classes == 2 && !conditioned {
            OutputActivation::Sigmoid
        } else {
            OutputActivation::Softmax
        };
        Self {
            encoder,
            similarity,
            vocab_size,
            embedding_dim: 64,
            hidden_dim: 32,
            num_classes,
            output,
            conditioned,
            conv_kernels: vec![1, 3],
            conv_filters: vec![16, 16],
            seed: 0,
        }
    }

    pub fn for_corpus(corpus: &Corpus, encoder: EncoderKind, similarity: SimilarityKind) -> Self {
        let task = corpus.task();
        let mut c = Self::new(
            encoder,
            similarity,
            corpus.vocab.len(),
            corpus.num_labels(),
            task.is_conditioned(),
        );
        if task == TaskKind::BinaryClassification {
            c.output = OutputActivation::Sigmoid;
        }
        c
    }

    /// Full-size dimensions: d = 300, m = 128, kernels [1, 3, 5, 7]. Filters
    /// are split evenly so the concatenation is still m wide.
    pub fn paper_scale(mut self) -> Self {
        self.embedding_dim = 300;
        self.hidden_dim = 128;
        self.conv_kernels = vec![1, 3, 5, 7];
        self.conv_filters = vec![32; 4];
        self
    }

    pub fn with_dims(mut self, embedding_dim: usize, hidden_dim: usize) -> Self {
        self.embedding_dim = embedding_dim;
        self.hidden_dim = hidden_dim;
        if self.conv_filters.iter().sum::<usize>() != hidden_dim {
            let k = self.conv_kernels.len().max(1);
            let mut filters = vec![hidden_dim / k; k];
            filters[0] += hidden_dim % k;
            self.conv_filters = filters;
        }
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::InvalidConfig(m));
        if self.vocab_size == 0 || self.embedding_dim == 0 || self.hidden_dim == 0 || self.num_classes == 0 {
            return bad("vocabulary size, dimensions and output arity must be at least 1".into());
        }
        if self.output == OutputActivation::Sigmoid && self.num_classes != 2 {
            return bad(format!("sigmoid output needs 2 classes, got {}", self.num_classes));
        }
        match self.encoder {
            EncoderKind::Birnn if self.hidden_dim % 2 != 0 => {
                bad(format!("birnn hidden size must be even, got {}", self.hidden_dim))
            }
            EncoderKind::Conv => {
                if self.conv_kernels.is_empty() || self.conv_kernels.len() != self.conv_filters.len() {
                    return bad("conv kernels and filter counts must be non-empty and paired".into());
                }
                if let Some(w) = self.conv_kernels.iter().find(|&&w| w % 2 == 0) {
                    return bad(format!("conv kernel widths must be odd, got {w}"));
                }
                if self.conv_filters.contains(&0) {
                    return bad("conv filter counts must be positive".into());
                }
                let total: usize = self.conv_filters.iter().sum();
                if total != self.hidden_dim {
                    return bad(format!("conv filters sum to {total}, hidden size is {}", self.hidden_dim));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    fn decoder_width(&self) -> usize {
        match self.output {
            OutputActivation::Sigmoid => 1,
            OutputActivation::Softmax => self.num_classes,
        }
    }
}

#[derive(Clone, Copy, Debug)]
enum Init {
    Normal,
    Uniform(f64),
    Zeros,
    /// LSTM gate bias: zero except +1 on the forget block.
    LstmBias,
}

fn encoder_shapes(config: &ModelConfig, prefix: &str, out: &mut Vec<(String, Vec<usize>, Init)>) {
    let (d, m) = (config.embedding_dim, config.hidden_dim);
    match config.encoder {
        EncoderKind::Average => {
            out.push((format!("{prefix}.proj.weight"), vec![d, m], Init::Uniform(1.0 / (d as f64).sqrt())));
            out.push((format!("{prefix}.proj.bias"), vec![1, m], Init::Zeros));
        }
        EncoderKind::Birnn => {
            let hd = m / 2;
            let r = 1.0 / (m as f64).sqrt();
            for dir in ["fwd", "bwd"] {
                out.push((format!("{prefix}.{dir}.w_ih"), vec![d, 4 * hd], Init::Uniform(r)));
                out.push((format!("{prefix}.{dir}.w_hh"), vec![hd, 4 * hd], Init::Uniform(r)));
                out.push((format!("{prefix}.{dir}.bias"), vec![1, 4 * hd], Init::LstmBias));
            }
        }
        EncoderKind::Conv => {
            for (j, (&w, &f)) in config.conv_kernels.iter().zip(&config.conv_filters).enumerate() {
                let fan_in = w * d;
                out.push((
                    format!("{prefix}.conv{j}.weight"),
                    vec![fan_in, f],
                    Init::Uniform(1.0 / (fan_in as f64).sqrt()),
                ));
                out.push((format!("{prefix}.conv{j}.bias"), vec![1, f], Init::Zeros));
            }
        }
    }
}

/// Every parameter of a config, in initialization order.
fn parameter_layout(config: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let m = config.hidden_dim;
    let r = 1.0 / (m as f64).sqrt();
    let mut out = vec![("embedding".to_owned(), vec![config.vocab_size, config.embedding_dim], Init::Normal)];
    encoder_shapes(config, "enc", &mut out);
    if config.conditioned {
        encoder_shapes(config, "query", &mut out);
    }
    match config.similarity {
        SimilarityKind::Additive => {
            out.push(("attn.w1".into(), vec![m, m], Init::Uniform(r)));
            out.push(("attn.w2".into(), vec![m, m], Init::Uniform(r)));
            out.push(("attn.v".into(), vec![m, 1], Init::Uniform(r)));
        }
        SimilarityKind::ScaledDot if !config.conditioned => {
            // without a query, a zero Q would pin attention to uniform
            out.push(("attn.query".into(), vec![1, m], Init::Uniform(r)));
        }
        SimilarityKind::ScaledDot => {}
    }
    let k = config.decoder_width();
    out.push(("dec.weight".into(), vec![m, k], Init::Uniform(r)));
    out.push(("dec.bias".into(), vec![1, k], Init::Zeros));
    out
}

/// Named parameter tensors.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Parameters(BTreeMap<String, Tensor>);

impl Parameters {
    pub fn init(config: &ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut map = BTreeMap::new();
        for (name, shape, init) in parameter_layout(config) {
            let n: usize = shape.iter().product();
            let data: Vec<f64> = match init {
                Init::Normal => (0..n).map(|_| rng.sample(StandardNormal)).collect(),
                Init::Uniform(r) => (0..n).map(|_| rng.random_range(-r..=r)).collect(),
                Init::Zeros => vec![0.0; n],
                Init::LstmBias => {
                    let hd = n / 4;
                    (0..n).map(|i| if (hd..2 * hd).contains(&i) { 1.0 } else { 0.0 }).collect()
                }
            };
            map.insert(name, Tensor::new(shape, data)?);
        }
        Ok(Self(map))
    }

    pub fn get(&self, name: &str) -> Result<&Tensor, ModelError> {
        self.0.get(name).ok_or_else(|| ModelError::MissingParameter(name.to_owned()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor, ModelError> {
        self.0
            .get_mut(name)
            .ok_or_else(|| ModelError::MissingParameter(name.to_owned()))
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Option<Tensor> {
        self.0.insert(name.into(), value)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.0.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.0.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.0.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Total number of scalars.
    pub fn size(&self) -> usize {
        self.0.values().map(Tensor::numel).sum()
    }

    pub fn squared_norm(&self) -> f64 {
        self.0.values().flat_map(|t| t.data()).map(|x| x * x).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.0.values().all(Tensor::all_finite)
    }

    /// All parameters as one `[1, size]` row, in name order.
    pub fn flatten(&self) -> Tensor {
        Tensor::row(self.0.values().flat_map(|t| t.data().iter().copied()).collect())
    }

    /// Parameter variables carved out of a flat `[1, size]` row of `g`, the
    /// inverse of [`Parameters::flatten`].
    pub(crate) fn unflatten_vars(&self, g: &mut Graph, flat: Var) -> Result<BTreeMap<String, Var>, ModelError> {
        let mut vars = BTreeMap::new();
        let mut offset = 0;
        for (name, t) in &self.0 {
            let n = t.numel();
            let part = g.slice(flat, 1, offset, offset + n)?;
            vars.insert(name.clone(), g.reshape(part, t.shape())?);
            offset += n;
        }
        Ok(vars)
    }

    /// Checks that names and shapes match `config` exactly.
    pub fn check_layout(&self, config: &ModelConfig) -> Result<(), ModelError> {
        let layout = parameter_layout(config);
        for (name, shape, _) in &layout {
            let t = self.get(name)?;
            if t.shape() != shape.as_slice() {
                return Err(ModelError::ParameterShape {
                    name: name.clone(),
                    expected: shape.clone(),
                    got: t.shape().to_vec(),
                });
            }
        }
        if let Some(extra) = self.names().find(|n| !layout.iter().any(|(l, _, _)| l == n)) {
            return Err(ModelError::Checkpoint(format!("unexpected parameter `{extra}`")));
        }
        Ok(())
    }
}

/// Everything computed on the way from tokens to the output distribution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForwardTrace {
    pub tokens: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub query_tokens: Option<Vec<usize>>,
    /// `[T, d]`
    pub embedded: Tensor,
    /// `[T, m]`
    pub hidden: Tensor,
    /// Query summary Q (the learned query for unconditioned dot attention).
    pub query: Vec<f64>,
    pub scores: Vec<f64>,
    pub alpha: Vec<f64>,
    /// h_α
    pub context: Vec<f64>,
    /// Output distribution; a sigmoid probability p is stored as [1 − p, p].
    pub output: Vec<f64>,
}

impl ForwardTrace {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn predicted(&self) -> usize {
        argmax(&self.output)
    }

    pub fn max_alpha(&self) -> f64 {
        self.alpha.iter().copied().fold(0.0, f64::max)
    }
}

/// Index of the largest entry; the first one on ties.
pub fn argmax(values: &[f64]) -> usize {
    values
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
        .0
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    version: u32,
    config: ModelConfig,
    parameters: Parameters,
}

/// A configuration together with its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: Parameters,
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self, ModelError> {
        let params = Parameters::init(&config)?;
        Ok(Self { config, params })
    }

    pub fn from_parts(config: ModelConfig, params: Parameters) -> Result<Self, ModelError> {
        config.validate()?;
        params.check_layout(&config)?;
        Ok(Self { config, params })
    }

    pub(crate) fn build(
        &self,
        g: &mut Graph,
        docs: Vec<&[usize]>,
        queries: Option<Vec<&[usize]>>,
        opts: BuildOptions,
    ) -> Result<build::Built, ModelError> {
        let vars = build::register(g, &self.params, opts.track_params);
        self.build_with_vars(g, &vars, docs, queries, opts)
    }

    pub(crate) fn build_with_vars(
        &self,
        g: &mut Graph,
        vars: &BTreeMap<String, Var>,
        docs: Vec<&[usize]>,
        queries: Option<Vec<&[usize]>>,
        opts: BuildOptions,
    ) -> Result<build::Built, ModelError> {
        let queries = if self.config.conditioned { queries } else { None };
        build::build(g, &self.config, vars, &Batch { docs, queries }, opts)
    }

    pub(crate) fn build_instances(
        &self,
        g: &mut Graph,
        instances: &[&Instance],
        opts: BuildOptions,
    ) -> Result<build::Built, ModelError> {
        let docs = instances.iter().map(|i| i.tokens.as_slice()).collect();
        let queries = instances
            .iter()
            .map(|i| i.query.as_deref())
            .collect::<Option<Vec<_>>>();
        self.build(g, docs, queries, opts)
    }

    pub fn forward(&self, instance: &Instance) -> Result<ForwardTrace, ModelError> {
        self.forward_tokens(&instance.tokens, instance.query.as_deref())
    }

    pub fn forward_tokens(&self, tokens: &[usize], query: Option<&[usize]>) -> Result<ForwardTrace, ModelError> {
        let mut g = Graph::new();
        let built = self.build(&mut g, vec![tokens], query.map(|q| vec![q]), BuildOptions::default())?;
        Ok(self.traces(&g, &built, &[tokens], &[query])?.remove(0))
    }

    /// Forward pass over a padded batch; traces come back unpadded and equal
    /// to one-at-a-time [`Model::forward`] up to rounding.
    pub fn forward_batch(&self, instances: &[&Instance]) -> Result<Vec<ForwardTrace>, ModelError> {
        if instances.is_empty() {
            return Ok(Vec::new());
        }
        let mut g = Graph::new();
        let built = self.build_instances(&mut g, instances, BuildOptions::default())?;
        let docs: Vec<&[usize]> = instances.iter().map(|i| i.tokens.as_slice()).collect();
        let queries: Vec<Option<&[usize]>> = instances.iter().map(|i| i.query.as_deref()).collect();
        self.traces(&g, &built, &docs, &queries)
    }

    fn traces(
        &self,
        g: &Graph,
        built: &build::Built,
        docs: &[&[usize]],
        queries: &[Option<&[usize]>],
    ) -> Result<Vec<ForwardTrace>, ModelError> {
        let t_max = built.t_max;
        let rows = |v: Var, i: usize, len: usize| -> Result<Tensor, ModelError> {
            let t = g.value(v)?;
            let cols = t.cols();
            let start = i * t_max * cols;
            Ok(Tensor::new(vec![len, cols], t.data()[start..start + len * cols].to_vec())?)
        };
        let mut out = Vec::with_capacity(docs.len());
        for (i, (&len, tokens)) in built.lens.iter().zip(docs).enumerate() {
            let hidden = rows(built.hidden, i, len)?;
            let alpha = g.value(built.alpha)?.row_slice(i)[..len].to_vec();
            let output = decode(&hidden, &alpha, &self.params, self.config.output)?;
            out.push(ForwardTrace {
                tokens: tokens.to_vec(),
                query_tokens: if self.config.conditioned {
                    queries[i].map(<[usize]>::to_vec)
                } else {
                    None
                },
                embedded: rows(built.embedded, i, len)?,
                hidden,
                query: g.value(built.query)?.row_slice(i).to_vec(),
                scores: g.value(built.scores)?.row_slice(i)[..len].to_vec(),
                alpha,
                context: g.value(built.context)?.row_slice(i).to_vec(),
                output,
            });
        }
        Ok(out)
    }

    /// Output for hidden states `hidden` pooled with an arbitrary `alpha`.
    pub fn decode(&self, hidden: &Tensor, alpha: &[f64]) -> Result<Vec<f64>, ModelError> {
        decode(hidden, alpha, &self.params, self.config.output)
    }

    /// Decoder parameters as constants of `g`, for graphs that start from
    /// frozen hidden states.
    pub(crate) fn decoder_vars(&self, g: &mut Graph) -> Result<BTreeMap<String, Var>, ModelError> {
        let mut vars = BTreeMap::new();
        for name in ["dec.weight", "dec.bias"] {
            vars.insert(name.to_owned(), g.constant(self.params.get(name)?.clone()));
        }
        Ok(vars)
    }

    pub fn to_json(&self) -> String {
        let ck = Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            parameters: self.params.clone(),
        };
        serde_json::to_string(&ck).expect("serializing a checkpoint")
    }

    pub fn from_json(text: &str) -> Result<Self, ModelError> {
        let ck: Checkpoint = serde_json::from_str(text).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
            return Err(ModelError::Checkpoint(format!(
                "unsupported format {} v{}",
                ck.format, ck.version
            )));
        }
        if !ck.parameters.all_finite() {
            return Err(ModelError::Checkpoint("non-finite parameter".into()));
        }
        Self::from_parts(ck.config, ck.parameters)
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        fs::write(path, self.to_json()).map_err(|source| ModelError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let text = fs::read_to_string(path).map_err(|source| ModelError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_json(&text)
    }
}

/// Rows `tokens[t]` of the embedding matrix.
pub fn embed(tokens: &[usize], embedding: &Tensor) -> Result<Tensor, ModelError> {
    let vocab = embedding.rows();
    if let Some(&id) = tokens.iter().find(|&&t| t >= vocab) {
        return Err(ModelError::TokenOutOfRange { id, vocab });
    }
    let mut g = Graph::new();
    let e = g.constant(embedding.clone());
    let x = g.gather_rows(e, tokens)?;
    Ok(g.value(x)?.clone())
}

/// `relu(x_e · W + b)`, position by position.
pub fn encode_average(x_e: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor, ModelError> {
    let mut g = Graph::new();
    let x = g.constant(x_e.clone());
    let w = g.constant(weight.clone());
    let b = g.constant(bias.clone());
    let h = build::average_layer(&mut g, x, w, b)?;
    Ok(g.value(h)?.clone())
}

/// Weights of one LSTM direction; gate blocks ordered i, f, g, o.
#[derive(Clone, Copy, Debug)]
pub struct LstmWeights<'a> {
    pub w_ih: &'a Tensor,
    pub w_hh: &'a Tensor,
    pub bias: &'a Tensor,
}

impl<'a> LstmWeights<'a> {
    pub fn from_params(params: &'a Parameters, prefix: &str) -> Result<Self, ModelError> {
        Ok(Self {
            w_ih: params.get(&format!("{prefix}.w_ih"))?,
            w_hh: params.get(&format!("{prefix}.w_hh"))?,
            bias: params.get(&format!("{prefix}.bias"))?,
        })
    }

    fn vars(&self, g: &mut Graph) -> [Var; 3] {
        [
            g.constant(self.w_ih.clone()),
            g.constant(self.w_hh.clone()),
            g.constant(self.bias.clone()),
        ]
    }
}

/// Concatenated forward and backward LSTM states at every position.
pub fn encode_birnn(x_e: &Tensor, fwd: LstmWeights<'_>, bwd: LstmWeights<'_>) -> Result<Tensor, ModelError> {
    let t = x_e.rows();
    if t == 0 {
        return Err(ModelError::EmptySequence);
    }
    let mut g = Graph::new();
    let x = g.constant(x_e.clone());
    let (f, b) = (fwd.vars(&mut g), bwd.vars(&mut g));
    let h = build::birnn_layer(&mut g, x, &[t], t, f, b)?;
    Ok(g.value(h)?.clone())
}

#[derive(Clone, Copy, Debug)]
pub struct ConvKernel<'a> {
    pub width: usize,
    /// `[width · d, filters]`; row block `j` multiplies the token at offset
    /// `j − width / 2`.
    pub weight: &'a Tensor,
    pub bias: &'a Tensor,
}

pub fn encode_conv(x_e: &Tensor, kernels: &[ConvKernel<'_>]) -> Result<Tensor, ModelError> {
    let t = x_e.rows();
    if t == 0 {
        return Err(ModelError::EmptySequence);
    }
    if kernels.is_empty() || kernels.iter().any(|k| k.width % 2 == 0) {
        return Err(ModelError::InvalidConfig("conv kernels must be non-empty with odd widths".into()));
    }
    let mut g = Graph::new();
    let x = g.constant(x_e.clone());
    let ks: Vec<(usize, Var, Var)> = kernels
        .iter()
        .map(|k| (k.width, g.constant(k.weight.clone()), g.constant(k.bias.clone())))
        .collect();
    let h = build::conv_layer(&mut g, x, &[t], t, &ks)?;
    Ok(g.value(h)?.clone())
}

/// Attention scores φ(h_t, Q) for every position. Additive similarity reads
/// `attn.w1`, `attn.w2` and `attn.v` from `params`; scaled dot needs none.
pub fn similarity(h: &Tensor, q: &[f64], kind: SimilarityKind, params: &Parameters) -> Result<Vec<f64>, ModelError> {
    let (t, m) = (h.rows(), h.cols());
    if q.len() != m {
        return Err(AutodiffError::ShapeMismatch {
            op: "similarity",
            detail: format!("query of {} for hidden size {m}", q.len()),
        }
        .into());
    }
    let mut g = Graph::new();
    let hv = g.constant(h.clone());
    let qv = g.constant(Tensor::row(q.to_vec()));
    let mut vars = BTreeMap::new();
    if kind == SimilarityKind::Additive {
        for name in ["attn.w1", "attn.w2", "attn.v"] {
            vars.insert(name.to_owned(), g.constant(params.get(name)?.clone()));
        }
    }
    let s = build::similarity(&mut g, kind, &vars, hv, qv, 1, t, m)?;
    Ok(g.value(s)?.data().to_vec())
}

/// Softmax over the unmasked scores; masked positions get exactly zero.
pub fn attend(scores: &[f64], mask: &[bool]) -> Result<Vec<f64>, ModelError> {
    let mut g = Graph::new();
    let s = g.constant(Tensor::row(scores.to_vec()));
    let a = g.masked_softmax(s, mask)?;
    Ok(g.value(a)?.data().to_vec())
}

/// `ŷ = σ(θ · h_α)` with `h_α = Σ_t α_t h_t`, for any `alpha` on the simplex.
///
/// Each pooled coordinate sums its products in sorted order, so the result
/// depends on the multiset of `α_t · h_t` terms and not on their positions:
/// permuting `alpha` over identical hidden rows gives a bit-identical output.
pub fn decode(
    hidden: &Tensor,
    alpha: &[f64],
    params: &Parameters,
    activation: OutputActivation,
) -> Result<Vec<f64>, ModelError> {
    let (t, m) = (hidden.rows(), hidden.cols());
    if alpha.len() != t {
        return Err(ModelError::NotOnSimplex(format!("{} weights for {t} positions", alpha.len())));
    }
    let total: f64 = alpha.iter().sum();
    if (total - 1.0).abs() > SIMPLEX_SLACK || alpha.iter().any(|&a| !(a >= -SIMPLEX_SLACK)) {
        return Err(ModelError::NotOnSimplex(format!("weights sum to {total}")));
    }
    let w = params.get("dec.weight")?;
    let b = params.get("dec.bias")?;
    if w.rows() != m {
        return Err(ModelError::ParameterShape {
            name: "dec.weight".into(),
            expected: vec![m, w.cols()],
            got: w.shape().to_vec(),
        });
    }
    let mut terms = vec![0.0; t];
    let context: Vec<f64> = (0..m)
        .map(|c| {
            for (k, term) in terms.iter_mut().enumerate() {
                *term = alpha[k] * hidden.get(k, c);
            }
            terms.sort_by(f64::total_cmp);
            terms.iter().sum()
        })
        .collect();
    let z: Vec<f64> = (0..w.cols())
        .map(|j| b.data()[j] + (0..m).map(|c| context[c] * w.get(c, j)).sum::<f64>())
        .collect();
    Ok(match activation {
        OutputActivation::Sigmoid => vec![autodiff::sigmoid(-z[0]), autodiff::sigmoid(z[0])],
        OutputActivation::Softmax => {
            let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
            let s: f64 = e.iter().sum();
            e.into_iter().map(|v| v / s).collect()
        }
    })
}
