//! Corpora: vocabulary, JSONL files and the synthetic generators.
//!
//! A corpus on disk is a directory holding `corpus.json` (task metadata),
//! `train.jsonl`, `test.jsonl` and a derived `vocab.txt`. Each JSONL line is
//! `{"id": str, "tokens": [str], "query": [str] (optional), "label": int}`.
//! A single JSONL file is also accepted; lines may then carry
//! `"split": "test"` and everything else is training data.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use thiserror::Error;

pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";
pub const NUMERIC_TOKEN: &str = "qqq";
pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const NUMERIC_ID: usize = 2;

pub const CORPUS_FORMAT: &str = "attention-audit-corpus";
pub const CORPUS_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: malformed record: {message}")]
    Malformed { path: PathBuf, line: usize, message: String },
    #[error("{path}:{line}: empty document")]
    EmptyDocument { path: PathBuf, line: usize },
    #[error("{path}:{line}: label {label} outside 0..{num_labels}")]
    LabelOutOfRange {
        path: PathBuf,
        line: usize,
        label: usize,
        num_labels: usize,
    },
    #[error("token id {id} outside vocabulary of {size}")]
    UnknownId { id: usize, size: usize },
    #[error("infeasible generator config: {0}")]
    InfeasibleConfig(String),
    #[error("training split is empty")]
    EmptyTrainSplit,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// What the labels mean and how the model is scored.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    BinaryClassification,
    Qa,
    NliStyle,
}

impl TaskKind {
    pub fn is_conditioned(self) -> bool {
        !matches!(self, TaskKind::BinaryClassification)
    }
}

impl std::fmt::Display for TaskKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TaskKind::BinaryClassification => "binary-classification",
            TaskKind::Qa => "qa",
            TaskKind::NliStyle => "nli-style",
        })
    }
}

impl std::str::FromStr for TaskKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "binary-classification" | "classification" | "binary" => Ok(TaskKind::BinaryClassification),
            "qa" => Ok(TaskKind::Qa),
            "nli-style" | "nli" => Ok(TaskKind::NliStyle),
            other => Err(format!("unknown task kind `{other}`")),
        }
    }
}

/// Splits on whitespace.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_owned).collect()
}

/// Any token containing a numeric character collapses to `qqq`.
pub fn normalize_token(token: &str) -> &str {
    if token.chars().any(char::is_numeric) {
        NUMERIC_TOKEN
    } else {
        token
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::new()
    }
}

impl Vocabulary {
    /// Vocabulary holding only the reserved tokens.
    pub fn new() -> Self {
        let mut v = Self {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        for t in [PAD_TOKEN, UNK_TOKEN, NUMERIC_TOKEN] {
            v.insert(t);
        }
        v
    }

    fn insert(&mut self, token: &str) -> usize {
        if let Some(&id) = self.index.get(token) {
            return id;
        }
        let id = self.tokens.len();
        self.tokens.push(token.to_owned());
        self.index.insert(token.to_owned(), id);
        id
    }

    /// Adds a raw token (after numeric collapse) and returns its id.
    pub fn add(&mut self, token: &str) -> usize {
        self.insert(normalize_token(token))
    }

    /// Id of a raw token; unseen tokens map to the unknown id.
    pub fn encode(&self, token: &str) -> usize {
        self.index.get(normalize_token(token)).copied().unwrap_or(UNK_ID)
    }

    pub fn decode(&self, id: usize) -> Result<&str, DataError> {
        self.tokens.get(id).map(String::as_str).ok_or(DataError::UnknownId {
            id,
            size: self.tokens.len(),
        })
    }

    pub fn decode_all(&self, ids: &[usize]) -> Result<Vec<String>, DataError> {
        ids.iter().map(|&i| self.decode(i).map(str::to_owned)).collect()
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// One token per line; the id is the line number.
    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        let mut text = self.tokens.join("\n");
        text.push('\n');
        fs::write(path, text).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self, DataError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let mut v = Self {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        for line in text.lines() {
            v.insert(line);
        }
        Ok(v)
    }
}

/// One line of a corpus file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawInstance {
    pub id: String,
    pub tokens: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub query: Option<Vec<String>>,
    pub label: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    pub id: String,
    pub tokens: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub query: Option<Vec<usize>>,
    pub label: usize,
}

impl Instance {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Copy with the token at `position` removed.
    pub fn without_token(&self, position: usize) -> Instance {
        let mut tokens = self.tokens.clone();
        tokens.remove(position);
        Instance {
            id: self.id.clone(),
            tokens,
            query: self.query.clone(),
            label: self.label,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusMeta {
    pub format: String,
    pub version: u32,
    pub task: TaskKind,
    pub num_labels: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label_names: Option<Vec<String>>,
}

impl CorpusMeta {
    pub fn new(task: TaskKind, num_labels: usize) -> Self {
        Self {
            format: CORPUS_FORMAT.into(),
            version: CORPUS_VERSION,
            task,
            num_labels,
            label_names: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Corpus {
    pub meta: CorpusMeta,
    pub vocab: Vocabulary,
    pub train: Vec<Instance>,
    pub test: Vec<Instance>,
}

impl Corpus {
    /// Builds the vocabulary from the training split, then encodes both
    /// splits (test tokens unseen in training become `<unk>`).
    pub fn from_raw(meta: CorpusMeta, train: &[RawInstance], test: &[RawInstance]) -> Result<Self, DataError> {
        if train.is_empty() {
            return Err(DataError::EmptyTrainSplit);
        }
        let mut vocab = Vocabulary::new();
        for r in train {
            for t in r.tokens.iter().chain(r.query.iter().flatten()) {
                vocab.add(t);
            }
        }
        let encode = |r: &RawInstance| Instance {
            id: r.id.clone(),
            tokens: r.tokens.iter().map(|t| vocab.encode(t)).collect(),
            query: r.query.as_ref().map(|q| q.iter().map(|t| vocab.encode(t)).collect()),
            label: r.label,
        };
        let train = train.iter().map(encode).collect();
        let test = test.iter().map(encode).collect();
        Ok(Self {
            meta,
            vocab,
            train,
            test,
        })
    }

    pub fn task(&self) -> TaskKind {
        self.meta.task
    }

    pub fn num_labels(&self) -> usize {
        self.meta.num_labels
    }

    pub fn find_test(&self, id: &str) -> Option<&Instance> {
        self.test.iter().find(|i| i.id == id)
    }
}

fn parse_jsonl(path: &Path, num_labels: Option<usize>) -> Result<Vec<RawInstance>, DataError> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line_no = n + 1;
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawInstance = serde_json::from_str(&line).map_err(|e| DataError::Malformed {
            path: path.to_path_buf(),
            line: line_no,
            message: e.to_string(),
        })?;
        if raw.tokens.is_empty() {
            return Err(DataError::EmptyDocument {
                path: path.to_path_buf(),
                line: line_no,
            });
        }
        if raw.query.as_ref().is_some_and(Vec::is_empty) {
            return Err(DataError::Malformed {
                path: path.to_path_buf(),
                line: line_no,
                message: "empty query".into(),
            });
        }
        if let Some(k) = num_labels {
            if raw.label >= k {
                return Err(DataError::LabelOutOfRange {
                    path: path.to_path_buf(),
                    line: line_no,
                    label: raw.label,
                    num_labels: k,
                });
            }
        }
        out.push(raw);
    }
    Ok(out)
}

/// Loads a corpus directory, or a single JSONL file.
pub fn load_corpus(path: &Path) -> Result<Corpus, DataError> {
    if path.is_dir() {
        let meta_path = path.join("corpus.json");
        let text = fs::read_to_string(&meta_path).map_err(io_err(&meta_path))?;
        let meta: CorpusMeta = serde_json::from_str(&text).map_err(|e| DataError::Malformed {
            path: meta_path.clone(),
            line: 1,
            message: e.to_string(),
        })?;
        let train = parse_jsonl(&path.join("train.jsonl"), Some(meta.num_labels))?;
        let test_path = path.join("test.jsonl");
        let test = if test_path.exists() {
            parse_jsonl(&test_path, Some(meta.num_labels))?
        } else {
            Vec::new()
        };
        Corpus::from_raw(meta, &train, &test)
    } else {
        let all = parse_jsonl(path, None)?;
        let (test, train): (Vec<_>, Vec<_>) = all.into_iter().partition(|r| r.split.as_deref() == Some("test"));
        let conditioned = train.iter().chain(&test).any(|r| r.query.is_some());
        let max_label = train.iter().chain(&test).map(|r| r.label).max().unwrap_or(0);
        let task = if conditioned {
            TaskKind::Qa
        } else {
            TaskKind::BinaryClassification
        };
        Corpus::from_raw(CorpusMeta::new(task, (max_label + 1).max(2)), &train, &test)
    }
}

fn write_jsonl(path: &Path, rows: &[RawInstance]) -> Result<(), DataError> {
    let mut buf = Vec::new();
    for r in rows {
        serde_json::to_writer(&mut buf, r).expect("serializing a corpus record");
        buf.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(io_err(path))?;
    f.write_all(&buf).map_err(io_err(path))
}

/// Writes a corpus directory (metadata, both splits and the vocabulary) and
/// returns the encoded corpus.
pub fn write_corpus(
    dir: &Path,
    meta: &CorpusMeta,
    train: &[RawInstance],
    test: &[RawInstance],
) -> Result<Corpus, DataError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let meta_path = dir.join("corpus.json");
    let text = serde_json::to_string_pretty(meta).expect("serializing corpus metadata");
    fs::write(&meta_path, text + "\n").map_err(io_err(&meta_path))?;
    write_jsonl(&dir.join("train.jsonl"), train)?;
    write_jsonl(&dir.join("test.jsonl"), test)?;
    let corpus = Corpus::from_raw(meta.clone(), train, test)?;
    corpus.vocab.save(&dir.join("vocab.txt"))?;
    Ok(corpus)
}

/// A generated corpus, before encoding.
#[derive(Clone, Debug)]
pub struct GeneratedCorpus {
    pub meta: CorpusMeta,
    pub train: Vec<RawInstance>,
    pub test: Vec<RawInstance>,
}

impl GeneratedCorpus {
    pub fn encode(&self) -> Result<Corpus, DataError> {
        Corpus::from_raw(self.meta.clone(), &self.train, &self.test)
    }

    pub fn write(&self, dir: &Path) -> Result<Corpus, DataError> {
        write_corpus(dir, &self.meta, &self.train, &self.test)
    }
}

pub const SIGNAL_TOKEN: &str = "signal";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlantedConfig {
    /// Number of distinct filler words.
    pub vocab_size: usize,
    pub length: usize,
    /// Probability that a positive instance carries the signal token; a
    /// negative carries it with the complementary probability.
    pub signal_precision: f64,
    pub train_size: usize,
    pub test_size: usize,
    pub seed: u64,
}

impl Default for PlantedConfig {
    fn default() -> Self {
        Self {
            vocab_size: 100,
            length: 20,
            signal_precision: 0.9,
            train_size: 2000,
            test_size: 500,
            seed: 0,
        }
    }
}

/// Letters-only filler names, so numeric collapse never merges them.
pub fn filler_word(mut i: usize) -> String {
    let mut letters = Vec::new();
    loop {
        letters.push(b'a' + (i % 26) as u8);
        i /= 26;
        if i == 0 {
            break;
        }
    }
    letters.reverse();
    format!("w{}", String::from_utf8(letters).expect("ascii"))
}

/// Binary corpus where a single designated token signals the positive class.
pub fn generate_planted(config: &PlantedConfig) -> Result<GeneratedCorpus, DataError> {
    let p = config.signal_precision;
    if !(p > 0.5 && p <= 1.0) {
        return Err(DataError::InfeasibleConfig(format!("signal precision {p} outside (0.5, 1]")));
    }
    if config.length < 2 {
        return Err(DataError::InfeasibleConfig("length must be at least 2".into()));
    }
    if config.vocab_size == 0 || config.train_size == 0 {
        return Err(DataError::InfeasibleConfig("empty vocabulary or training split".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let fillers: Vec<String> = (0..config.vocab_size).map(filler_word).collect();
    let mut split = |prefix: &str, n: usize| {
        let mut labels: Vec<usize> = (0..n).map(|i| usize::from(i < n / 2)).collect();
        labels.shuffle(&mut rng);
        labels
            .into_iter()
            .enumerate()
            .map(|(i, label)| {
                let mut tokens: Vec<String> = (0..config.length)
                    .map(|_| fillers[rng.random_range(0..fillers.len())].clone())
                    .collect();
                let carry = if label == 1 { p } else { 1.0 - p };
                if rng.random_bool(carry) {
                    let pos = rng.random_range(0..config.length);
                    tokens[pos] = SIGNAL_TOKEN.to_owned();
                }
                RawInstance {
                    id: format!("{prefix}-{i:06}"),
                    tokens,
                    query: None,
                    label,
                    split: None,
                }
            })
            .collect::<Vec<_>>()
    };
    let train = split("train", config.train_size);
    let test = split("test", config.test_size);
    let mut meta = CorpusMeta::new(TaskKind::BinaryClassification, 2);
    meta.label_names = Some(vec!["negative".into(), "positive".into()]);
    Ok(GeneratedCorpus { meta, train, test })
}

pub const BABI_ENTITIES: [&str; 4] = ["Mary", "John", "Sandra", "Daniel"];
pub const BABI_LOCATIONS: [&str; 6] = ["bathroom", "bedroom", "garden", "hallway", "kitchen", "office"];
pub const BABI_VERBS: [&str; 4] = ["travelled", "moved", "went", "journeyed"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BabiConfig {
    pub train_size: usize,
    pub test_size: usize,
    /// Sentences per story.
    pub sentences: usize,
    pub seed: u64,
}

impl Default for BabiConfig {
    fn default() -> Self {
        Self {
            train_size: 10_000,
            test_size: 1_000,
            sentences: 2,
            seed: 0,
        }
    }
}

/// Where `entity` is at the end of a story made of
/// `<entity> <verb> to the <location> .` sentences.
pub fn babi_answer(story: &[String], entity: &str) -> Option<usize> {
    let mut answer = None;
    for sentence in story.split(|t| t == ".") {
        if sentence.first().map(String::as_str) == Some(entity) {
            if let Some(loc) = sentence.last() {
                answer = BABI_LOCATIONS.iter().position(|l| l == loc);
            }
        }
    }
    answer
}

/// Single-supporting-fact stories with a `Where is X ?` query; the label is
/// the index of the queried entity's final location.
pub fn generate_babi1(config: &BabiConfig) -> Result<GeneratedCorpus, DataError> {
    if config.train_size == 0 || config.sentences == 0 {
        return Err(DataError::InfeasibleConfig("empty training split or story".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut split = |prefix: &str, n: usize| {
        (0..n)
            .map(|i| {
                let mut story = Vec::new();
                let mut subjects = Vec::new();
                for _ in 0..config.sentences {
                    let who = BABI_ENTITIES[rng.random_range(0..BABI_ENTITIES.len())];
                    let verb = BABI_VERBS[rng.random_range(0..BABI_VERBS.len())];
                    let loc = BABI_LOCATIONS[rng.random_range(0..BABI_LOCATIONS.len())];
                    story.extend([who, verb, "to", "the", loc, "."].map(str::to_owned));
                    subjects.push(who);
                }
                let asked = subjects[rng.random_range(0..subjects.len())];
                let label = babi_answer(&story, asked).expect("queried entity appears in the story");
                RawInstance {
                    id: format!("{prefix}-{i:06}"),
                    tokens: story,
                    query: Some(["Where", "is", asked, "?"].map(str::to_owned).to_vec()),
                    label,
                    split: None,
                }
            })
            .collect::<Vec<_>>()
    };
    let train = split("train", config.train_size);
    let test = split("test", config.test_size);
    let mut meta = CorpusMeta::new(TaskKind::Qa, BABI_LOCATIONS.len());
    meta.label_names = Some(BABI_LOCATIONS.map(str::to_owned).to_vec());
    Ok(GeneratedCorpus { meta, train, test })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn strings(s: &str) -> Vec<String> {
        tokenize(s)
    }

    #[test]
    fn numeric_tokens_collapse() {
        assert_eq!(normalize_token("x9y"), "qqq");
        assert_eq!(normalize_token("2019"), "qqq");
        assert_eq!(normalize_token("garden"), "garden");
        let mut v = Vocabulary::new();
        assert_eq!(v.add("x9y"), NUMERIC_ID);
        assert_eq!(v.encode("42"), NUMERIC_ID);
    }

    #[test]
    fn unseen_test_word_is_unknown() {
        let train = vec![RawInstance {
            id: "a".into(),
            tokens: strings("good movie"),
            query: None,
            label: 1,
            split: None,
        }];
        let test = vec![RawInstance {
            id: "b".into(),
            tokens: strings("bad movie"),
            query: None,
            label: 0,
            split: None,
        }];
        let c = Corpus::from_raw(CorpusMeta::new(TaskKind::BinaryClassification, 2), &train, &test).unwrap();
        assert_eq!(c.test[0].tokens[0], UNK_ID);
        assert_eq!(c.test[0].tokens[1], c.train[0].tokens[1]);
    }

    #[test]
    fn two_line_file_loads() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        fs::write(
            &path,
            "{\"id\": \"1\", \"tokens\": [\"a\", \"x9y\"], \"label\": 0}\n{\"id\": \"2\", \"tokens\": [\"b\"], \"label\": 1}\n",
        )
        .unwrap();
        let c = load_corpus(&path).unwrap();
        assert_eq!(c.train.len(), 2);
        assert_eq!(c.vocab.decode(c.train[0].tokens[1]).unwrap(), "qqq");
        assert_eq!(c.task(), TaskKind::BinaryClassification);
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        fs::write(&path, "{\"id\": \"1\", \"tokens\": [\"a\"], \"label\": 0}\n{\"id\": 2}\n").unwrap();
        match load_corpus(&path) {
            Err(DataError::Malformed { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
        fs::write(&path, "{\"id\": \"1\", \"tokens\": [], \"label\": 0}\n").unwrap();
        assert!(matches!(load_corpus(&path), Err(DataError::EmptyDocument { line: 1, .. })));
    }

    #[test]
    fn directory_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let g = generate_babi1(&BabiConfig {
            train_size: 20,
            test_size: 5,
            sentences: 2,
            seed: 1,
        })
        .unwrap();
        let written = g.write(dir.path()).unwrap();
        let loaded = load_corpus(dir.path()).unwrap();
        assert_eq!(written.train, loaded.train);
        assert_eq!(written.test, loaded.test);
        assert_eq!(Vocabulary::load(&dir.path().join("vocab.txt")).unwrap(), loaded.vocab);
    }

    #[test]
    fn planted_precision_one_is_exact() {
        let g = generate_planted(&PlantedConfig {
            signal_precision: 1.0,
            train_size: 200,
            test_size: 50,
            ..Default::default()
        })
        .unwrap();
        for r in g.train.iter().chain(&g.test) {
            let has = r.tokens.iter().filter(|t| *t == SIGNAL_TOKEN).count();
            assert_eq!(has, r.label);
        }
        let positives = g.train.iter().filter(|r| r.label == 1).count();
        assert_eq!(positives, 100);
    }

    #[test]
    fn planted_rejects_boundary_precision() {
        for p in [0.5, 0.3, 1.2] {
            let cfg = PlantedConfig {
                signal_precision: p,
                ..Default::default()
            };
            assert!(matches!(generate_planted(&cfg), Err(DataError::InfeasibleConfig(_))));
        }
        let short = PlantedConfig {
            length: 1,
            ..Default::default()
        };
        assert!(generate_planted(&short).is_err());
    }

    #[test]
    fn planted_bayes_rule_accuracy_matches_precision() {
        let precision = 0.8;
        let g = generate_planted(&PlantedConfig {
            signal_precision: precision,
            train_size: 4000,
            test_size: 10,
            seed: 5,
            ..Default::default()
        })
        .unwrap();
        let n = g.train.len() as f64;
        let correct = g
            .train
            .iter()
            .filter(|r| usize::from(r.tokens.iter().any(|t| t == SIGNAL_TOKEN)) == r.label)
            .count() as f64;
        // binomial 99.9% band around the analytic Bayes accuracy
        let sd = (precision * (1.0 - precision) / n).sqrt();
        assert!((correct / n - precision).abs() < 3.3 * sd, "{}", correct / n);
    }

    #[test]
    fn generators_are_seed_deterministic() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let cfg = PlantedConfig {
            train_size: 50,
            test_size: 10,
            seed: 9,
            ..Default::default()
        };
        generate_planted(&cfg).unwrap().write(a.path()).unwrap();
        generate_planted(&cfg).unwrap().write(b.path()).unwrap();
        for f in ["corpus.json", "train.jsonl", "test.jsonl", "vocab.txt"] {
            assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap());
        }
    }

    #[test]
    fn babi_example_story() {
        let story = strings("John travelled to the garden . Sandra travelled to the garden");
        assert_eq!(babi_answer(&story, "Sandra"), Some(2));
        assert_eq!(BABI_LOCATIONS[2], "garden");
        let story = strings("John went to the office . John moved to the kitchen .");
        assert_eq!(babi_answer(&story, "John"), Some(4));
        assert_eq!(babi_answer(&story, "Mary"), None);
    }

    #[test]
    fn babi_labels_are_uniform() {
        let g = generate_babi1(&BabiConfig {
            train_size: 10_000,
            test_size: 1,
            sentences: 2,
            seed: 3,
        })
        .unwrap();
        let mut counts = [0usize; 6];
        for r in &g.train {
            counts[r.label] += 1;
            assert_eq!(Some(r.label), babi_answer(&r.tokens, &r.query.as_ref().unwrap()[2]));
        }
        let n: f64 = 10_000.0;
        let p: f64 = 1.0 / 6.0;
        let sd = (n * p * (1.0 - p)).sqrt();
        for c in counts {
            assert!((c as f64 - n * p).abs() < 3.0 * sd, "{counts:?}");
        }
        let c = g.encode().unwrap();
        assert!(c.vocab.len() <= 40);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn generated_instances_are_valid(
            vocab_size in 1usize..30,
            length in 2usize..12,
            precision in 0.51f64..=1.0,
            seed in 0u64..1000,
        ) {
            let g = generate_planted(&PlantedConfig { vocab_size, length, signal_precision: precision, train_size: 30, test_size: 7, seed }).unwrap();
            let c = g.encode().unwrap();
            for inst in c.train.iter().chain(&c.test) {
                prop_assert_eq!(inst.tokens.len(), length);
                prop_assert!(inst.tokens.iter().all(|&t| t < c.vocab.len()));
                prop_assert!(inst.label < 2);
            }
            for id in 0..c.vocab.len() {
                let tok = c.vocab.decode(id).unwrap().to_owned();
                prop_assert_eq!(c.vocab.encode(&tok), id);
            }
        }
    }
}
