use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use audit_core::data::{generate_babi1, generate_planted, load_corpus, BabiConfig, PlantedConfig};
use audit_core::model::{EncoderKind, Model, ModelConfig, SimilarityKind};
use audit_core::report::{
    heatmap_document, render_heatmap, render_heatmap_pair, run_experiment, Analysis, CounterfactualRecord,
    ExperimentError, ExperimentSpec, Report,
};
use audit_core::training::{evaluate, train_model, TrainConfig};
use clap::{Args, Parser, Subcommand, ValueEnum};
use thiserror::Error;

mod config;

use config::FileConfig;

#[derive(Parser)]
#[command(name = "audit", version, about = "Train attention models and audit their attention weights")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write model.json and history.csv
    Train(RunArgs),
    /// Gradient and leave-one-out importance vs attention
    Importance(RunArgs),
    /// Randomly permuted attention
    Permute(RunArgs),
    /// Adversarial attention search
    Adversarial(RunArgs),
    /// Every analysis, one report
    Report(RunArgs),
    /// Render attention heatmaps for test instances
    Heatmap(HeatmapArgs),
    /// Write a synthetic corpus
    Generate(GenerateArgs),
}

#[derive(Args)]
struct RunArgs {
    /// TOML file whose keys mirror these flags
    #[arg(long)]
    config: Option<PathBuf>,
    /// Corpus directory or JSONL file
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Analyse this model instead of training one
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, value_parser = parse_encoder)]
    encoder: Option<EncoderKind>,
    #[arg(long, value_parser = parse_similarity)]
    similarity: Option<SimilarityKind>,
    #[arg(long)]
    embedding_dim: Option<usize>,
    #[arg(long)]
    hidden_dim: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Output tolerance for adversarial search (default by task)
    #[arg(long)]
    eps: Option<f64>,
    /// Adversarial candidates per instance
    #[arg(long)]
    k: Option<usize>,
    /// Permutations per instance
    #[arg(long)]
    perms: Option<usize>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    heatmaps: Option<usize>,
    /// Scale heatmap shading by each instance's maximum weight
    #[arg(long)]
    heatmap_rescale: bool,
    #[arg(long)]
    max_instances: Option<usize>,
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Args)]
struct HeatmapArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// counterfactual.jsonl; adds the best feasible adversary to each page
    #[arg(long)]
    records: Option<PathBuf>,
    /// Only these instances (repeatable); default is the first --limit by id
    #[arg(long)]
    id: Vec<String>,
    #[arg(long, default_value_t = 10)]
    limit: usize,
    #[arg(long)]
    heatmap_rescale: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum CorpusKind {
    Planted,
    Babi,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long, value_enum)]
    kind: CorpusKind,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    train_size: Option<usize>,
    #[arg(long)]
    test_size: Option<usize>,
    /// Planted: tokens per document
    #[arg(long)]
    length: Option<usize>,
    /// Planted: filler vocabulary size
    #[arg(long)]
    vocab_size: Option<usize>,
    /// Planted: P(signal token | positive)
    #[arg(long)]
    precision: Option<f64>,
    /// bAbI: sentences per story
    #[arg(long)]
    sentences: Option<usize>,
}

fn parse_encoder(s: &str) -> Result<EncoderKind, String> {
    s.parse()
}

fn parse_similarity(s: &str) -> Result<SimilarityKind, String> {
    s.parse()
}

#[derive(Debug, Error)]
enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }
}

impl From<ExperimentError> for CliError {
    fn from(e: ExperimentError) -> Self {
        match e {
            ExperimentError::InvalidSpec(_) => CliError::Config(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

impl RunArgs {
    fn spec(&self, analyses: &[Analysis]) -> Result<ExperimentSpec, CliError> {
        let mut spec = ExperimentSpec::new("", "audit-out");
        if let Some(path) = &self.config {
            FileConfig::load(path).map_err(CliError::Config)?.apply(&mut spec);
        }
        macro_rules! flag {
            ($($src:ident => $dst:expr),* $(,)?) => {$(
                if let Some(v) = self.$src.clone() { $dst = v; }
            )*};
        }
        flag! {
            corpus => spec.corpus,
            out => spec.out,
            encoder => spec.encoder,
            similarity => spec.similarity,
            embedding_dim => spec.embedding_dim,
            hidden_dim => spec.hidden_dim,
            epochs => spec.train.epochs,
            k => spec.search.k,
            perms => spec.perms,
            iterations => spec.search.iterations,
            seed => spec.seed,
            heatmaps => spec.heatmaps,
        }
        if self.checkpoint.is_some() {
            spec.checkpoint = self.checkpoint.clone();
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
        spec.heatmap_rescale |= self.heatmap_rescale;
        if spec.corpus.as_os_str().is_empty() {
            return Err(CliError::Config("no corpus given (--corpus or `corpus` in --config)".into()));
        }
        spec.analyses = analyses.iter().copied().collect();
        Ok(spec)
    }
}

fn train(args: &RunArgs) -> Result<(), CliError> {
    // validation needs at least one analysis; training ignores the set
    let spec = args.spec(&Analysis::ALL)?;
    spec.validate()?;
    let corpus = load_corpus(&spec.corpus).map_err(runtime)?;
    let model_config = ModelConfig::for_corpus(&corpus, spec.encoder, spec.similarity)
        .with_dims(spec.embedding_dim, spec.hidden_dim)
        .with_seed(spec.seed);
    model_config.validate().map_err(|e| CliError::Config(e.to_string()))?;
    let train_config = TrainConfig {
        seed: spec.seed,
        ..spec.train.clone()
    };
    let (model, history) = train_model(&corpus, &model_config, &train_config).map_err(runtime)?;
    fs::create_dir_all(&spec.out).map_err(runtime)?;
    model.save(&spec.out.join("model.json")).map_err(runtime)?;
    fs::write(spec.out.join("history.csv"), history.to_csv()).map_err(runtime)?;
    let eval = evaluate(&model, &corpus.test, corpus.task()).map_err(runtime)?;
    println!(
        "{} {:?} = {:.4} (accuracy {:.4}) -> {}",
        corpus.task(),
        eval.kind,
        eval.value,
        eval.accuracy,
        spec.out.join("model.json").display()
    );
    Ok(())
}

fn summarize(report: &Report) -> String {
    let mut parts = vec![format!("{:?} {:.4}", report.performance.metric, report.performance.value)];
    if let Some(i) = &report.importance {
        if let Some(s) = &i.overall.tau_g {
            parts.push(format!("mean tau_g {:.3}", s.mean));
        }
    }
    if let Some(p) = &report.permutation {
        parts.push(format!("median delta_y_med {:.4}", p.median_delta_y_med));
    }
    if let Some(a) = &report.adversarial {
        parts.push(format!("mean eps-max JSD {:.3}", a.eps_max_jsd.mean));
    }
    parts.join(", ")
}

fn analyse(args: &RunArgs, analyses: &[Analysis]) -> Result<(), CliError> {
    let spec = args.spec(analyses)?;
    let report = run_experiment(&spec)?;
    println!("{} -> {}", summarize(&report), spec.out.join("report.json").display());
    Ok(())
}

fn heatmap(args: &HeatmapArgs) -> Result<(), CliError> {
    for p in [&args.corpus, &args.checkpoint] {
        if !p.exists() {
            return Err(CliError::Config(format!("{} does not exist", p.display())));
        }
    }
    let corpus = load_corpus(&args.corpus).map_err(runtime)?;
    let model = Model::load(&args.checkpoint).map_err(runtime)?;
    let records: BTreeMap<String, CounterfactualRecord> = match &args.records {
        Some(path) => read_records(path)?,
        None => BTreeMap::new(),
    };
    let mut instances: Vec<_> = if args.id.is_empty() {
        let mut all: Vec<_> = corpus.test.iter().collect();
        all.sort_by(|a, b| a.id.cmp(&b.id));
        all.truncate(args.limit);
        all
    } else {
        args.id
            .iter()
            .map(|id| corpus.find_test(id).ok_or_else(|| CliError::Config(format!("no test instance `{id}`"))))
            .collect::<Result<_, _>>()?
    };
    instances.dedup_by(|a, b| a.id == b.id);
    fs::create_dir_all(&args.out).map_err(runtime)?;
    for inst in instances {
        let trace = model.forward(inst).map_err(runtime)?;
        let tokens = corpus.vocab.decode_all(&inst.tokens).map_err(runtime)?;
        let best = records.get(&inst.id).filter(|r| !r.single_token).and_then(|r| {
            let eps = r.eps?;
            r.adversaries
                .as_ref()?
                .iter()
                .filter(|a| a.tvd <= eps)
                .max_by(|x, y| x.jsd.total_cmp(&y.jsd))
                .cloned()
        });
        let fragment = match best {
            Some(adv) => render_heatmap_pair(&tokens, &trace.alpha, &adv.alpha, adv.tvd, args.heatmap_rescale),
            None => render_heatmap(&tokens, &trace.alpha, None, args.heatmap_rescale),
        }
        .map_err(runtime)?;
        let name: String = inst
            .id
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() || "-_.".contains(c) { c } else { '_' })
            .collect();
        let path = args.out.join(format!("{name}.html"));
        fs::write(&path, heatmap_document(&inst.id, &[fragment])).map_err(runtime)?;
        println!("{}", path.display());
    }
    Ok(())
}

fn read_records(path: &Path) -> Result<BTreeMap<String, CounterfactualRecord>, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str::<CounterfactualRecord>(l)
                .map(|r| (r.id.clone(), r))
                .map_err(|e| runtime(format!("{}:{}: {e}", path.display(), i + 1)))
        })
        .collect()
}

fn generate(args: &GenerateArgs) -> Result<(), CliError> {
    let generated = match args.kind {
        CorpusKind::Planted => {
            let d = PlantedConfig::default();
            generate_planted(&PlantedConfig {
                vocab_size: args.vocab_size.unwrap_or(d.vocab_size),
                length: args.length.unwrap_or(d.length),
                signal_precision: args.precision.unwrap_or(d.signal_precision),
                train_size: args.train_size.unwrap_or(d.train_size),
                test_size: args.test_size.unwrap_or(d.test_size),
                seed: args.seed,
            })
        }
        CorpusKind::Babi => {
            let d = BabiConfig::default();
            generate_babi1(&BabiConfig {
                train_size: args.train_size.unwrap_or(d.train_size),
                test_size: args.test_size.unwrap_or(d.test_size),
                sentences: args.sentences.unwrap_or(d.sentences),
                seed: args.seed,
            })
        }
    }
    .map_err(|e| CliError::Config(e.to_string()))?;
    let corpus = generated.write(&args.out).map_err(runtime)?;
    println!(
        "{} train / {} test, vocabulary {} -> {}",
        corpus.train.len(),
        corpus.test.len(),
        corpus.vocab.len(),
        args.out.display()
    );
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train(a) => train(a),
        Command::Importance(a) => analyse(a, &[Analysis::Importance]),
        Command::Permute(a) => analyse(a, &[Analysis::Permutation]),
        Command::Adversarial(a) => analyse(a, &[Analysis::Adversarial]),
        Command::Report(a) => analyse(a, &Analysis::ALL),
        Command::Heatmap(a) => heatmap(a),
        Command::Generate(a) => generate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
