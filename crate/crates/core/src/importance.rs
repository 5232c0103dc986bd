//! Gradient and leave-one-out feature importance, and their rank
//! correlation with attention.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Graph;
use crate::data::Instance;
use crate::metrics::{kendall_p_value, kendall_tau_variant, tvd, MetricError, TauVariant};
use crate::model::build::BuildOptions;
use crate::model::{ForwardTrace, Model, ModelError};
use crate::report::{emit_histogram, Histogram};

/// Significance level for the fraction-significant column.
pub const SIGNIFICANCE: f64 = 0.05;

#[derive(Debug, Error)]
pub enum ImportanceError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("non-finite gradient at position {position}")]
    NonFinite { position: usize },
    #[error("length mismatch: alpha {alpha}, gradient {g}, leave-one-out {loo}")]
    LengthMismatch { alpha: usize, g: usize, loo: usize },
    #[error("no records to aggregate")]
    Empty,
}

impl From<crate::autodiff::AutodiffError> for ImportanceError {
    fn from(e: crate::autodiff::AutodiffError) -> Self {
        ImportanceError::Model(e.into())
    }
}

/// `g_t = |E[tokens_t] · ∂ŷ[c]/∂x_e,t|` for the predicted class `c`, with
/// the attention weights held fixed. This is the derivative with respect to
/// the active one-hot coordinate, since `x_e,t = onehot_t · E`.
pub fn gradient_importance(model: &Model, trace: &ForwardTrace) -> Result<Vec<f64>, ImportanceError> {
    gradient_importance_with(model, trace, true)
}

pub(crate) fn gradient_importance_with(
    model: &Model,
    trace: &ForwardTrace,
    detach_attention: bool,
) -> Result<Vec<f64>, ImportanceError> {
    let mut g = Graph::new();
    let opts = BuildOptions {
        track_params: false,
        embeddings_as_leaf: true,
        detach_attention,
    };
    let built = model.build(
        &mut g,
        vec![&trace.tokens],
        trace.query_tokens.as_deref().map(|q| vec![q]),
        opts,
    )?;
    let class = trace.predicted();
    let target = g.slice(built.output, 1, class, class + 1)?;
    let target = g.sum(target)?;
    g.backward(target)?;
    let x = g.value(built.embedded)?;
    let grad = g.grad(built.embedded)?;
    (0..trace.len())
        .map(|t| {
            let v: f64 = x.row_slice(t).iter().zip(grad.row_slice(t)).map(|(a, b)| a * b).sum();
            if v.is_finite() {
                Ok(v.abs())
            } else {
                Err(ImportanceError::NonFinite { position: t })
            }
        })
        .collect()
}

/// `Δŷ_t = TVD(ŷ(x_{−t}), ŷ(x))`, re-encoding the shortened sequence.
/// `None` for a single-token input, where removal leaves nothing.
pub fn loo_importance(model: &Model, trace: &ForwardTrace) -> Result<Option<Vec<f64>>, ImportanceError> {
    if trace.len() < 2 {
        return Ok(None);
    }
    let mut out = Vec::with_capacity(trace.len());
    for t in 0..trace.len() {
        let mut tokens = trace.tokens.clone();
        tokens.remove(t);
        let reduced = model.forward_tokens(&tokens, trace.query_tokens.as_deref())?;
        out.push(tvd(&reduced.output, &trace.output)?);
    }
    Ok(Some(out))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImportanceRecord {
    pub id: String,
    /// Predicted class.
    pub class: usize,
    pub label: usize,
    pub tau_g: Option<f64>,
    pub tau_loo: Option<f64>,
    pub tau_g_loo: Option<f64>,
    pub p_g: Option<f64>,
    pub p_loo: Option<f64>,
    pub p_g_loo: Option<f64>,
    /// Set for single-token inputs, which have no leave-one-out scores.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub loo_excluded: bool,
    pub g: Vec<f64>,
    pub loo: Option<Vec<f64>>,
    pub alpha: Vec<f64>,
}

fn tau_and_p(a: &[f64], b: &[f64], variant: TauVariant) -> Result<(Option<f64>, Option<f64>), MetricError> {
    if a.len() < 2 {
        return Ok((None, None));
    }
    let tau = kendall_tau_variant(a, b, variant)?;
    let p = if tau.is_some() { kendall_p_value(a, b)? } else { None };
    Ok((tau, p))
}

/// Kendall τ of attention against both importance measures, and of the two
/// measures against each other.
pub fn correlate(
    id: &str,
    class: usize,
    label: usize,
    alpha: &[f64],
    g: &[f64],
    loo: Option<&[f64]>,
    variant: TauVariant,
) -> Result<ImportanceRecord, ImportanceError> {
    let loo_len = loo.map_or(alpha.len(), <[f64]>::len);
    if alpha.len() != g.len() || loo_len != alpha.len() {
        return Err(ImportanceError::LengthMismatch {
            alpha: alpha.len(),
            g: g.len(),
            loo: loo_len,
        });
    }
    let (tau_g, p_g) = tau_and_p(alpha, g, variant)?;
    let ((tau_loo, p_loo), (tau_g_loo, p_g_loo)) = match loo {
        Some(l) => (tau_and_p(alpha, l, variant)?, tau_and_p(g, l, variant)?),
        None => ((None, None), (None, None)),
    };
    Ok(ImportanceRecord {
        id: id.to_owned(),
        class,
        label,
        tau_g,
        tau_loo,
        tau_g_loo,
        p_g,
        p_loo,
        p_g_loo,
        loo_excluded: loo.is_none(),
        g: g.to_vec(),
        loo: loo.map(<[f64]>::to_vec),
        alpha: alpha.to_vec(),
    })
}

/// Full importance record for one instance.
pub fn analyze_instance(model: &Model, instance: &Instance, variant: TauVariant) -> Result<ImportanceRecord, ImportanceError> {
    let trace = model.forward(instance)?;
    let g = gradient_importance(model, &trace)?;
    let loo = loo_importance(model, &trace)?;
    correlate(
        &instance.id,
        trace.predicted(),
        instance.label,
        &trace.alpha,
        &g,
        loo.as_deref(),
        variant,
    )
}

/// Records for every instance, computed in parallel and returned in input
/// order.
pub fn analyze_split(
    model: &Model,
    instances: &[Instance],
    variant: TauVariant,
) -> Result<Vec<ImportanceRecord>, ImportanceError> {
    instances
        .par_iter()
        .map(|i| analyze_instance(model, i, variant))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub count: usize,
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
}

impl Stat {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Some(Self {
            count: values.len(),
            mean,
            std: var.sqrt(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub records: usize,
    pub tau_g: Option<Stat>,
    pub tau_loo: Option<Stat>,
    pub tau_g_loo: Option<Stat>,
    /// Fraction of defined τ_g with p < 0.05.
    pub sig_frac_g: Option<f64>,
    pub sig_frac_loo: Option<f64>,
    /// mean[τ(g, loo) − τ(α, loo)]
    pub diff_g_loo_vs_alpha_loo: Option<Stat>,
    /// mean[τ(g, loo) − τ(α, g)]
    pub diff_g_loo_vs_alpha_g: Option<Stat>,
    pub undefined_tau_g: usize,
    pub undefined_tau_loo: usize,
    pub loo_excluded: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationSummary {
    pub overall: GroupSummary,
    /// Keyed by predicted class.
    pub per_class: BTreeMap<usize, GroupSummary>,
    pub tau_g_histogram: Histogram,
}

pub const TAU_BINS: usize = 20;

fn summarize(records: &[&ImportanceRecord]) -> GroupSummary {
    let defined = |f: fn(&ImportanceRecord) -> Option<f64>| -> Vec<f64> { records.iter().filter_map(|r| f(r)).collect() };
    let sig = |f: fn(&ImportanceRecord) -> Option<f64>| -> Option<f64> {
        let ps: Vec<f64> = records.iter().filter_map(|r| f(r)).collect();
        (!ps.is_empty()).then(|| ps.iter().filter(|&&p| p < SIGNIFICANCE).count() as f64 / ps.len() as f64)
    };
    let diff = |other: fn(&ImportanceRecord) -> Option<f64>| -> Vec<f64> {
        records
            .iter()
            .filter_map(|r| Some(r.tau_g_loo? - other(r)?))
            .collect()
    };
    GroupSummary {
        records: records.len(),
        tau_g: Stat::of(&defined(|r| r.tau_g)),
        tau_loo: Stat::of(&defined(|r| r.tau_loo)),
        tau_g_loo: Stat::of(&defined(|r| r.tau_g_loo)),
        sig_frac_g: sig(|r| r.p_g),
        sig_frac_loo: sig(|r| r.p_loo),
        diff_g_loo_vs_alpha_loo: Stat::of(&diff(|r| r.tau_loo)),
        diff_g_loo_vs_alpha_g: Stat::of(&diff(|r| r.tau_g)),
        undefined_tau_g: records.iter().filter(|r| r.tau_g.is_none()).count(),
        undefined_tau_loo: records.iter().filter(|r| !r.loo_excluded && r.tau_loo.is_none()).count(),
        loo_excluded: records.iter().filter(|r| r.loo_excluded).count(),
    }
}

/// Table-style summary of a set of records, overall and per predicted
/// class. Undefined τ values are left out of means and counted instead.
pub fn aggregate_correlations(records: &[ImportanceRecord]) -> Result<CorrelationSummary, ImportanceError> {
    if records.is_empty() {
        return Err(ImportanceError::Empty);
    }
    let all: Vec<&ImportanceRecord> = records.iter().collect();
    let mut by_class: BTreeMap<usize, Vec<&ImportanceRecord>> = BTreeMap::new();
    for r in records {
        by_class.entry(r.class).or_default().push(r);
    }
    let taus: Vec<f64> = records.iter().filter_map(|r| r.tau_g).collect();
    Ok(CorrelationSummary {
        overall: summarize(&all),
        per_class: by_class.iter().map(|(&c, rs)| (c, summarize(rs))).collect(),
        tau_g_histogram: emit_histogram(&taus, TAU_BINS, -1.0, 1.0),
    })
}
