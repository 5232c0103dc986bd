//! Maximum-likelihood training with Adam and ℓ2 regularization, and the
//! per-task evaluation metrics.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{check_gradients, AutodiffError, Graph, GradientCheck, Tensor, Var};
use crate::data::{Corpus, Instance, TaskKind};
use crate::model::build::{BuildOptions, Built};
use crate::model::{ForwardTrace, Model, ModelConfig, ModelError, Parameters};

/// Floor applied to the probability of the gold label before the log.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("label {label} outside 0..{classes}")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("training split is empty")]
    EmptySplit,
    #[error("training diverged in epoch {epoch}: loss is {loss}")]
    Diverged { epoch: usize, loss: f64 },
}

impl From<AutodiffError> for TrainError {
    fn from(e: AutodiffError) -> Self {
        TrainError::Model(e.into())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub l2_lambda: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Stop once the test metric has not improved for this many epochs.
    #[serde(default)]
    pub patience: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            l2_lambda: 1e-5,
            epochs: 10,
            batch_size: 1,
            seed: 0,
            patience: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.to_owned()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning rate must be positive");
        }
        if !(self.l2_lambda >= 0.0 && self.l2_lambda.is_finite()) {
            return bad("l2 lambda must be non-negative");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("Adam betas must lie in [0, 1)");
        }
        if !(self.epsilon > 0.0) {
            return bad("Adam epsilon must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch size must be at least 1");
        }
        Ok(())
    }
}

/// `−ln ŷ[label] + λ Σ p²`, with `ŷ[label]` floored at [`PROB_FLOOR`].
pub fn loss(trace: &ForwardTrace, label: usize, params: &Parameters, l2_lambda: f64) -> Result<f64, TrainError> {
    let p = *trace.output.get(label).ok_or(TrainError::LabelOutOfRange {
        label,
        classes: trace.output.len(),
    })?;
    if p < PROB_FLOOR {
        log::warn!("gold-label probability {p:e} clamped to {PROB_FLOOR:e}");
    }
    Ok(-p.max(PROB_FLOOR).ln() + l2_lambda * params.squared_norm())
}

/// Mean negative log-likelihood over the batch plus the ℓ2 penalty.
pub(crate) fn loss_node(
    g: &mut Graph,
    built: &Built,
    labels: &[usize],
    params: &BTreeMap<String, Var>,
    l2_lambda: f64,
) -> Result<Var, TrainError> {
    let out = g.value(built.output)?;
    let (b, k) = (out.rows(), out.cols());
    if let Some(&label) = labels.iter().find(|&&l| l >= k) {
        return Err(TrainError::LabelOutOfRange { label, classes: k });
    }
    let flat = g.reshape(built.output, &[b * k, 1])?;
    let idx: Vec<usize> = labels.iter().enumerate().map(|(i, &l)| i * k + l).collect();
    let picked = g.gather_rows(flat, &idx)?;
    let picked = g.clamp_min(picked, PROB_FLOOR)?;
    let logs = g.log(picked)?;
    let total = g.sum(logs)?;
    let mut loss = g.scale(total, -1.0 / b as f64)?;
    if l2_lambda > 0.0 {
        for &p in params.values() {
            let sq = g.mul(p, p)?;
            let s = g.sum(sq)?;
            let s = g.scale(s, l2_lambda)?;
            loss = g.add(loss, s)?;
        }
    }
    Ok(loss)
}

/// Batch loss and its gradient with respect to every parameter.
pub fn loss_and_gradients(
    model: &Model,
    batch: &[&Instance],
    l2_lambda: f64,
) -> Result<(f64, BTreeMap<String, Tensor>), TrainError> {
    let mut g = Graph::new();
    let opts = BuildOptions {
        track_params: true,
        ..Default::default()
    };
    let built = model.build_instances(&mut g, batch, opts)?;
    let labels: Vec<usize> = batch.iter().map(|i| i.label).collect();
    let loss = loss_node(&mut g, &built, &labels, &built.params, l2_lambda)?;
    g.backward(loss)?;
    let value = g.value(loss)?.item();
    let mut grads = BTreeMap::new();
    for (name, &v) in &built.params {
        grads.insert(name.clone(), g.grad(v)?.clone());
    }
    Ok((value, grads))
}

/// Central-difference check of the full training loss (likelihood plus ℓ2)
/// with respect to every parameter of `model`.
pub fn check_loss_gradient(
    model: &Model,
    instance: &Instance,
    l2_lambda: f64,
    step: f64,
) -> Result<GradientCheck, TrainError> {
    let unwrap = |e: TrainError| match e {
        TrainError::Model(ModelError::Autodiff(a)) => a,
        other => AutodiffError::InvalidArgument(other.to_string()),
    };
    let check = check_gradients(
        |g, flat| {
            let vars = model
                .params
                .unflatten_vars(g, flat)
                .map_err(|e| unwrap(e.into()))?;
            let built = model
                .build_with_vars(
                    g,
                    &vars,
                    vec![&instance.tokens],
                    instance.query.as_deref().map(|q| vec![q]),
                    BuildOptions::default(),
                )
                .map_err(|e| unwrap(e.into()))?;
            loss_node(g, &built, &[instance.label], &vars, l2_lambda).map_err(unwrap)
        },
        &model.params.flatten(),
        step,
    )?;
    Ok(check)
}

/// First and second moment estimates for Adam.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

/// One bias-corrected Adam update. Parameters without a gradient entry are
/// left alone.
pub fn adam_step(
    params: &mut Parameters,
    grads: &BTreeMap<String, Tensor>,
    state: &mut AdamState,
    config: &TrainConfig,
) -> Result<(), TrainError> {
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - config.beta1.powi(t);
    let c2 = 1.0 - config.beta2.powi(t);
    for (name, p) in params.iter_mut() {
        let Some(g) = grads.get(name) else { continue };
        if g.shape() != p.shape() {
            return Err(ModelError::ParameterShape {
                name: name.clone(),
                expected: p.shape().to_vec(),
                got: g.shape().to_vec(),
            }
            .into());
        }
        let m = state.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.numel()]);
        let v = state.v.entry(name.clone()).or_insert_with(|| vec![0.0; g.numel()]);
        for (((x, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mi = config.beta1 * *mi + (1.0 - config.beta1) * gi;
            *vi = config.beta2 * *vi + (1.0 - config.beta2) * gi * gi;
            let m_hat = *mi / c1;
            let v_hat = *vi / c2;
            *x -= config.learning_rate * m_hat / (v_hat.sqrt() + config.epsilon);
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MetricKind {
    /// F1 of the positive class.
    F1,
    Accuracy,
    MicroF1,
}

impl MetricKind {
    pub fn for_task(task: TaskKind) -> Self {
        match task {
            TaskKind::BinaryClassification => Self::F1,
            TaskKind::Qa => Self::Accuracy,
            TaskKind::NliStyle => Self::MicroF1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub kind: MetricKind,
    pub value: f64,
    /// Set when F1 had no predicted positives and was reported as 0.
    pub undefined: bool,
    pub accuracy: f64,
    pub predictions: Vec<usize>,
}

/// F1 from confusion counts; `(0, true)` when nothing was predicted positive.
pub fn f1_from_counts(tp: usize, fp: usize, fn_: usize) -> (f64, bool) {
    if tp + fp == 0 {
        return (0.0, true);
    }
    if tp == 0 {
        return (0.0, false);
    }
    let precision = tp as f64 / (tp + fp) as f64;
    let recall = tp as f64 / (tp + fn_) as f64;
    (2.0 * precision * recall / (precision + recall), false)
}

/// Task metric from predictions and gold labels.
pub fn score(predictions: &[usize], labels: &[usize], kind: MetricKind) -> Evaluation {
    let n = labels.len().max(1) as f64;
    let correct = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    let accuracy = correct as f64 / n;
    let (value, undefined) = match kind {
        MetricKind::F1 => {
            let count = |pred: usize, gold: usize| {
                predictions
                    .iter()
                    .zip(labels)
                    .filter(|&(&p, &l)| p == pred && l == gold)
                    .count()
            };
            f1_from_counts(count(1, 1), count(1, 0), count(0, 1))
        }
        MetricKind::Accuracy => (accuracy, false),
        // single-label multi-class: every error is one FP and one FN
        MetricKind::MicroF1 => {
            let wrong = labels.len() - correct;
            f1_from_counts(correct, wrong, wrong)
        }
    };
    Evaluation {
        kind,
        value,
        undefined,
        accuracy,
        predictions: predictions.to_vec(),
    }
}

/// Forward traces for a split, in order, using the rayon pool.
pub fn predict(model: &Model, split: &[Instance]) -> Result<Vec<ForwardTrace>, ModelError> {
    split.par_iter().map(|i| model.forward(i)).collect()
}

pub fn evaluate(model: &Model, split: &[Instance], task: TaskKind) -> Result<Evaluation, TrainError> {
    if split.is_empty() {
        return Err(TrainError::EmptySplit);
    }
    let traces = predict(model, split)?;
    let predictions: Vec<usize> = traces.iter().map(ForwardTrace::predicted).collect();
    let labels: Vec<usize> = split.iter().map(|i| i.label).collect();
    Ok(score(&predictions, &labels, MetricKind::for_task(task)))
}

/// Mean loss over a split (ℓ2 term included).
pub fn mean_loss(model: &Model, split: &[Instance], l2_lambda: f64) -> Result<f64, TrainError> {
    if split.is_empty() {
        return Err(TrainError::EmptySplit);
    }
    let nll: Vec<f64> = split
        .par_iter()
        .map(|i| -> Result<f64, TrainError> {
            let t = model.forward(i)?;
            loss(&t, i.label, &model.params, 0.0)
        })
        .collect::<Result<_, _>>()?;
    Ok(nll.iter().sum::<f64>() / nll.len() as f64 + l2_lambda * model.params.squared_norm())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub test_metric: Option<f64>,
}

/// Per-epoch metrics; epoch 0 is the untrained model.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,test_metric\n");
        for r in &self.records {
            let metric = r.test_metric.map(|m| m.to_string()).unwrap_or_default();
            let _ = writeln!(out, "{},{},{}", r.epoch, r.train_loss, metric);
        }
        out
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.records.last()
    }
}

fn epoch_record(model: &Model, corpus: &Corpus, epoch: usize, l2: f64) -> Result<EpochRecord, TrainError> {
    let train_loss = mean_loss(model, &corpus.train, l2)?;
    if !train_loss.is_finite() {
        return Err(TrainError::Diverged { epoch, loss: train_loss });
    }
    let test_metric = if corpus.test.is_empty() {
        None
    } else {
        Some(evaluate(model, &corpus.test, corpus.task())?.value)
    };
    Ok(EpochRecord {
        epoch,
        train_loss,
        test_metric,
    })
}

/// Trains a fresh model. Deterministic given both seeds: parameter init uses
/// the model seed, shuffling uses the training seed.
pub fn train_model(
    corpus: &Corpus,
    model_config: &ModelConfig,
    config: &TrainConfig,
) -> Result<(Model, TrainHistory), TrainError> {
    let model = Model::new(model_config.clone())?;
    train_from(model, corpus, config)
}

/// Continues training an existing model.
pub fn train_from(mut model: Model, corpus: &Corpus, config: &TrainConfig) -> Result<(Model, TrainHistory), TrainError> {
    config.validate()?;
    if corpus.train.is_empty() {
        return Err(TrainError::EmptySplit);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut state = AdamState::default();
    let mut history = TrainHistory::default();
    history.records.push(epoch_record(&model, corpus, 0, config.l2_lambda)?);
    let mut order: Vec<usize> = (0..corpus.train.len()).collect();
    let mut best = f64::NEG_INFINITY;
    let mut stale = 0;
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&Instance> = chunk.iter().map(|&i| &corpus.train[i]).collect();
            let (loss, grads) = loss_and_gradients(&model, &batch, config.l2_lambda)?;
            if !loss.is_finite() {
                return Err(TrainError::Diverged { epoch, loss });
            }
            adam_step(&mut model.params, &grads, &mut state, config)?;
        }
        let record = epoch_record(&model, corpus, epoch, config.l2_lambda)?;
        log::info!(
            "epoch {epoch}: train loss {:.4}, test metric {:?}",
            record.train_loss,
            record.test_metric
        );
        let metric = record.test_metric;
        history.records.push(record);
        if let (Some(patience), Some(m)) = (config.patience, metric) {
            if m > best {
                best = m;
                stale = 0;
            } else {
                stale += 1;
                if stale >= patience {
                    break;
                }
            }
        }
    }
    Ok((model, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_babi1, generate_planted, BabiConfig, PlantedConfig};
    use crate::model::{EncoderKind, SimilarityKind};
    use proptest::prelude::*;

    fn planted(precision: f64, n: usize, seed: u64) -> Corpus {
        generate_planted(&PlantedConfig {
            vocab_size: 30,
            length: 8,
            signal_precision: precision,
            train_size: n,
            test_size: 200,
            seed,
        })
        .unwrap()
        .encode()
        .unwrap()
    }

    fn tiny_model(corpus: &Corpus, encoder: EncoderKind) -> ModelConfig {
        ModelConfig::for_corpus(corpus, encoder, SimilarityKind::Additive).with_dims(16, 8)
    }

    #[test]
    fn loss_examples() {
        let model = Model::new(ModelConfig::new(EncoderKind::Average, SimilarityKind::Additive, 5, 2, false)).unwrap();
        let mut t = model.forward_tokens(&[1, 2], None).unwrap();
        t.output = vec![0.5, 0.5];
        assert!((loss(&t, 0, &model.params, 0.0).unwrap() - 2f64.ln()).abs() < 1e-15);
        t.output = vec![0.0, 1.0];
        assert_eq!(loss(&t, 1, &model.params, 0.0).unwrap(), 0.0);
        assert!((loss(&t, 0, &model.params, 0.0).unwrap() - (-PROB_FLOOR.ln())).abs() < 1e-12);
        assert!(matches!(loss(&t, 2, &model.params, 0.0), Err(TrainError::LabelOutOfRange { .. })));
        // ℓ2 grows the loss monotonically in λ
        let a = loss(&t, 1, &model.params, 1e-5).unwrap();
        let b = loss(&t, 1, &model.params, 1e-3).unwrap();
        assert!(0.0 < a && a < b);
    }

    #[test]
    fn graph_loss_matches_trace_loss() {
        let corpus = planted(0.9, 20, 1);
        let model = Model::new(tiny_model(&corpus, EncoderKind::Birnn)).unwrap();
        let inst = &corpus.train[3];
        let (l, _) = loss_and_gradients(&model, &[inst], 1e-4).unwrap();
        let t = model.forward(inst).unwrap();
        assert!((l - loss(&t, inst.label, &model.params, 1e-4).unwrap()).abs() < 1e-10);
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let corpus = planted(0.9, 10, 2);
        for encoder in [EncoderKind::Average, EncoderKind::Birnn, EncoderKind::Conv] {
            let config = tiny_model(&corpus, encoder).with_dims(4, 4);
            let mut config = config;
            config.conv_filters = vec![2, 2];
            let model = Model::new(config).unwrap();
            let check = check_loss_gradient(&model, &corpus.train[0], 1e-2, 1e-5).unwrap();
            assert!(check.max_relative_error < 1e-4, "{encoder:?}: {}", check.max_relative_error);
        }
    }

    #[test]
    fn adam_zero_gradient_is_a_no_op() {
        let mut p = Parameters::default();
        p.insert("w", Tensor::row(vec![1.0, -2.0]));
        let before = p.clone();
        let mut grads = BTreeMap::new();
        grads.insert("w".to_owned(), Tensor::row(vec![0.0, 0.0]));
        let mut state = AdamState::default();
        adam_step(&mut p, &grads, &mut state, &TrainConfig::default()).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        let mut p = Parameters::default();
        p.insert("w", Tensor::row(vec![1.0, 1.0, 1.0]));
        let mut grads = BTreeMap::new();
        grads.insert("w".to_owned(), Tensor::row(vec![0.3, -20.0, 1e-3]));
        let config = TrainConfig::default();
        adam_step(&mut p, &grads, &mut AdamState::default(), &config).unwrap();
        let w = p.get("w").unwrap().data();
        for (x, sign) in w.iter().zip([-1.0, 1.0, -1.0]) {
            assert!((x - (1.0 + sign * config.learning_rate)).abs() < 1e-7, "{x}");
        }
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut p = Parameters::default();
        p.insert("x", Tensor::scalar(0.05));
        let config = TrainConfig {
            learning_rate: 0.01,
            ..Default::default()
        };
        let mut state = AdamState::default();
        for _ in 0..100 {
            let x = p.get("x").unwrap().item();
            let mut grads = BTreeMap::new();
            grads.insert("x".to_owned(), Tensor::scalar(2.0 * x));
            adam_step(&mut p, &grads, &mut state, &config).unwrap();
        }
        assert!(p.get("x").unwrap().item().abs() < 1e-3);
        assert_eq!(state.step, 100);
    }

    #[test]
    fn f1_examples() {
        assert_eq!(f1_from_counts(1, 1, 1), (0.5, false));
        assert_eq!(f1_from_counts(0, 0, 5), (0.0, true));
        let perfect = score(&[1, 0, 1, 0], &[1, 0, 1, 0], MetricKind::F1);
        assert_eq!((perfect.value, perfect.undefined), (1.0, false));
        let none = score(&[0, 0, 0, 0], &[1, 0, 1, 0], MetricKind::F1);
        assert_eq!((none.value, none.undefined), (0.0, true));
        // TP=1, FP=1, FN=1, TN=1
        let e = score(&[1, 1, 0, 0], &[1, 0, 1, 0], MetricKind::F1);
        assert_eq!(e.value, 0.5);
        let e = score(&[0, 2, 1, 1], &[0, 2, 2, 1], MetricKind::MicroF1);
        assert_eq!(e.value, 0.75);
        assert_eq!(score(&[0, 2, 1, 1], &[0, 2, 2, 1], MetricKind::Accuracy).value, 0.75);
    }

    #[test]
    fn untrained_model_is_near_chance() {
        let corpus = planted(1.0, 20, 3);
        let config = TrainConfig {
            epochs: 0,
            ..Default::default()
        };
        let (model, history) = train_model(&corpus, &tiny_model(&corpus, EncoderKind::Average), &config).unwrap();
        assert_eq!(history.records.len(), 1);
        let e = evaluate(&model, &corpus.test, corpus.task()).unwrap();
        // 99% binomial band around 0.5 for n = 200
        let band = 2.576 * (0.25f64 / 200.0).sqrt();
        assert!((e.accuracy - 0.5).abs() < band, "{}", e.accuracy);
    }

    #[test]
    fn planted_average_model_learns_signal() {
        let corpus = planted(1.0, 400, 4);
        let config = TrainConfig {
            epochs: 6,
            learning_rate: 5e-3,
            seed: 4,
            ..Default::default()
        };
        let (model, history) = train_model(&corpus, &tiny_model(&corpus, EncoderKind::Average), &config).unwrap();
        let first = history.records.first().unwrap();
        let last = history.last().unwrap();
        assert!(last.train_loss < first.train_loss);
        let e = evaluate(&model, &corpus.test, corpus.task()).unwrap();
        assert!(e.accuracy >= 0.99, "{}", e.accuracy);
        let positive = corpus.test.iter().find(|i| i.label == 1).unwrap();
        assert_eq!(model.forward(positive).unwrap().predicted(), 1);
        assert!(history.to_csv().starts_with("epoch,train_loss,test_metric\n0,"));
    }

    #[test]
    fn training_is_bit_deterministic() {
        let corpus = planted(0.9, 60, 5);
        let config = TrainConfig {
            epochs: 2,
            batch_size: 4,
            seed: 9,
            ..Default::default()
        };
        let mc = tiny_model(&corpus, EncoderKind::Birnn).with_seed(2);
        let (a, ha) = train_model(&corpus, &mc, &config).unwrap();
        let (b, hb) = train_model(&corpus, &mc, &config).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(ha, hb);
    }

    #[test]
    fn single_story_corpus_is_learnable() {
        let mut g = generate_babi1(&BabiConfig {
            train_size: 1,
            test_size: 0,
            sentences: 2,
            seed: 7,
        })
        .unwrap();
        g.test = g.train.clone();
        let corpus = g.encode().unwrap();
        let mc = ModelConfig::for_corpus(&corpus, EncoderKind::Birnn, SimilarityKind::Additive).with_dims(8, 8);
        let config = TrainConfig {
            epochs: 60,
            learning_rate: 0.05,
            ..Default::default()
        };
        let (model, _) = train_model(&corpus, &mc, &config).unwrap();
        assert_eq!(evaluate(&model, &corpus.test, corpus.task()).unwrap().value, 1.0);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        for bad in [
            TrainConfig {
                learning_rate: 0.0,
                ..Default::default()
            },
            TrainConfig {
                l2_lambda: -1.0,
                ..Default::default()
            },
            TrainConfig {
                batch_size: 0,
                ..Default::default()
            },
        ] {
            assert!(matches!(bad.validate(), Err(TrainError::InvalidConfig(_))));
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn f1_stays_in_unit_interval(tp in 0usize..50, fp in 0usize..50, fn_ in 0usize..50) {
            let (f, undefined) = f1_from_counts(tp, fp, fn_);
            prop_assert!((0.0..=1.0).contains(&f));
            prop_assert_eq!(undefined, tp + fp == 0);
        }
    }
}
