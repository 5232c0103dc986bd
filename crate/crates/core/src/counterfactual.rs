//! Counterfactual attention: permuted weights and adversarial distributions
//! evaluated on frozen hidden states.
//!
//! Adversarial search maximizes
//! `Σ_i JSD(α_i, α̂) + 1/(k(k−1)) Σ_{i<j} JSD(α_i, α_j) − λ/k Σ_i max(0, TVD_i − ε)`
//! over per-candidate logits with Adam. Two post-processing steps follow,
//! both checked against the exact (non-relaxed) constraint:
//!
//! * each candidate is moved along the ray from α̂ through it to the largest
//!   step that keeps `TVD ≤ ε`. JSD to α̂ is convex with its minimum at α̂, so
//!   it only grows along the ray; an infeasible candidate is pulled back
//!   toward α̂ the same way;
//! * a candidate is then moved toward a few simplex vertices (its own peak,
//!   the position it gained most on, the position α̂ weights least) when that
//!   raises its JSD and stays feasible.
//!
//! Candidates that still violate ε never count toward ε-max JSD.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution as _, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Graph, Tensor, Var};
use crate::data::TaskKind;
use crate::metrics::{jsd, tvd, MetricError};
use crate::model::{build, ForwardTrace, Model, ModelError, Parameters};
use crate::training::{adam_step, AdamState, TrainConfig};

/// Floor inside logarithms of the graph-side JSD.
const LOG_FLOOR: f64 = 1e-300;
/// Bisection steps for the ray and vertex line searches.
const LINE_SEARCH_STEPS: usize = 60;

#[derive(Debug, Error)]
pub enum CounterfactualError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("invalid search config: {0}")]
    InvalidConfig(String),
    #[error("adversarial search diverged after {restarts} restarts (last step {learning_rate}, iteration {iteration})")]
    Diverged {
        restarts: usize,
        learning_rate: f64,
        iteration: usize,
    },
}

impl From<AutodiffError> for CounterfactualError {
    fn from(e: AutodiffError) -> Self {
        CounterfactualError::Model(e.into())
    }
}

/// Output-change tolerance: 0.01 for text classification, 0.05 for QA and
/// query-conditioned tasks.
pub fn epsilon_for_task(task: TaskKind) -> f64 {
    match task {
        TaskKind::BinaryClassification => 0.01,
        TaskKind::Qa | TaskKind::NliStyle => 0.05,
    }
}

/// Seed for one instance, independent of processing order.
pub fn instance_seed(base: u64, id: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(base.to_le_bytes());
    h.update(id.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

/// Median; the mean of the middle two for an even count.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { (v[n / 2 - 1] + v[n / 2]) / 2.0 })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PermutationResult {
    pub id: String,
    pub max_alpha: f64,
    pub delta_y_med: f64,
    pub perms: usize,
    /// Single-token input: only the identity permutation exists.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub single_token: bool,
}

/// Output change when α̂ is randomly permuted over the frozen hidden states;
/// reports the median TVD over `perms` uniform permutations.
pub fn permutation_experiment(
    model: &Model,
    trace: &ForwardTrace,
    id: &str,
    perms: usize,
    seed: u64,
) -> Result<PermutationResult, CounterfactualError> {
    if perms == 0 {
        return Err(CounterfactualError::InvalidConfig("permutation count must be at least 1".into()));
    }
    let deltas = permutation_deltas(model, trace, perms, seed)?;
    Ok(PermutationResult {
        id: id.to_owned(),
        max_alpha: trace.max_alpha(),
        delta_y_med: median(&deltas).unwrap_or(0.0),
        perms,
        single_token: trace.len() < 2,
    })
}

/// Per-permutation output changes.
pub fn permutation_deltas(
    model: &Model,
    trace: &ForwardTrace,
    perms: usize,
    seed: u64,
) -> Result<Vec<f64>, CounterfactualError> {
    use rand::seq::SliceRandom;
    if trace.len() < 2 {
        return Ok(vec![0.0; perms]);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..trace.len()).collect();
    let mut out = Vec::with_capacity(perms);
    for _ in 0..perms {
        order.shuffle(&mut rng);
        let permuted: Vec<f64> = order.iter().map(|&i| trace.alpha[i]).collect();
        let y = model.decode(&trace.hidden, &permuted)?;
        out.push(tvd(&y, &trace.output)?);
    }
    Ok(out)
}

/// `Σ_i JSD(α_i, α̂) + 1/(k(k−1)) Σ_{i<j} JSD(α_i, α_j)`; the pairwise term
/// is dropped for `k = 1`.
pub fn adversarial_objective(candidates: &[Vec<f64>], alpha_hat: &[f64]) -> Result<f64, CounterfactualError> {
    let k = candidates.len();
    let mut total = 0.0;
    for c in candidates {
        total += jsd(c, alpha_hat)?;
    }
    if k > 1 {
        let mut pairs = 0.0;
        for i in 0..k {
            for j in i + 1..k {
                pairs += jsd(&candidates[i], &candidates[j])?;
            }
        }
        total += pairs / (k * (k - 1)) as f64;
    }
    Ok(total)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdversarialConfig {
    pub k: usize,
    /// Penalty weight on constraint violations.
    pub lambda: f64,
    pub learning_rate: f64,
    pub iterations: usize,
    /// Stop when the objective improves by less than `tolerance` over this
    /// many iterations.
    pub patience: usize,
    pub tolerance: f64,
    /// Standard deviation of the Gaussian logit noise at initialization.
    pub init_noise: f64,
    /// Pair candidates with mirrored noise so the search leaves α̂ in
    /// opposite directions.
    pub antithetic: bool,
    /// Step-size reductions allowed after a non-finite objective.
    pub max_restarts: usize,
    /// Ray and vertex line searches after the optimizer.
    pub line_search: bool,
}

impl Default for AdversarialConfig {
    fn default() -> Self {
        Self {
            k: 5,
            lambda: 500.0,
            learning_rate: 0.01,
            iterations: 500,
            patience: 25,
            tolerance: 1e-6,
            init_noise: 0.5,
            antithetic: true,
            max_restarts: 3,
            line_search: true,
        }
    }
}

impl AdversarialConfig {
    pub fn validate(&self) -> Result<(), CounterfactualError> {
        let bad = |m: &str| Err(CounterfactualError::InvalidConfig(m.to_owned()));
        if self.k == 0 {
            return bad("k must be at least 1");
        }
        if !(self.learning_rate > 0.0) || !(self.lambda >= 0.0) || !(self.init_noise >= 0.0) {
            return bad("step size must be positive, lambda and noise non-negative");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adversary {
    pub alpha: Vec<f64>,
    /// Δŷ: TVD of the output to the original.
    pub tvd: f64,
    /// Δα: JSD to the original attention.
    pub jsd: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdversarialResult {
    pub id: String,
    pub eps: f64,
    pub k: usize,
    pub max_alpha: f64,
    pub eps_max_jsd: f64,
    pub adversaries: Vec<Adversary>,
    pub iterations: usize,
    pub restarts: usize,
    /// Optimizer steps after which the penalized objective went down.
    pub objective_decreases: usize,
    /// Penalized objective after each optimizer step.
    #[serde(skip)]
    pub trajectory: Vec<f64>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub single_token: bool,
}

impl AdversarialResult {
    pub fn feasible(&self) -> impl Iterator<Item = &Adversary> {
        let eps = self.eps;
        self.adversaries.iter().filter(move |a| a.tvd <= eps)
    }
}

/// Graph-side JSD between two `[1, T]` rows.
fn jsd_node(g: &mut Graph, p: Var, q: Var) -> Result<Var, AutodiffError> {
    let s = g.add(p, q)?;
    let m = g.scale(s, 0.5)?;
    let m = g.clamp_min(m, LOG_FLOOR)?;
    let lm = g.log(m)?;
    let mut total = None;
    for x in [p, q] {
        let xc = g.clamp_min(x, LOG_FLOOR)?;
        let lx = g.log(xc)?;
        let d = g.sub(lx, lm)?;
        let prod = g.mul(x, d)?;
        let kl = g.sum(prod)?;
        total = Some(match total {
            None => kl,
            Some(t) => g.add(t, kl)?,
        });
    }
    g.scale(total.expect("two terms"), 0.5)
}

struct Problem<'a> {
    model: &'a Model,
    hidden: &'a Tensor,
    y_hat: &'a [f64],
    alpha_hat: &'a [f64],
    eps: f64,
    lambda: f64,
}

impl Problem<'_> {
    /// Penalized objective and its gradient with respect to the logits.
    fn evaluate(&self, logits: &Tensor) -> Result<(f64, Tensor), CounterfactualError> {
        let k = logits.rows();
        let mut g = Graph::new();
        let z = g.param(logits.clone());
        let alpha = g.softmax(z)?;
        let h = g.constant(self.hidden.clone());
        let a_hat = g.constant(Tensor::row(self.alpha_hat.to_vec()));
        let mut rows = Vec::with_capacity(k);
        let mut ctx = Vec::with_capacity(k);
        for i in 0..k {
            let a = g.slice(alpha, 0, i, i + 1)?;
            ctx.push(g.matmul(a, h)?);
            rows.push(a);
        }
        let ctx = g.concat(&ctx, 0)?;
        let vars = self.model.decoder_vars(&mut g)?;
        let y = build::decode(&mut g, self.model.config.output, &vars, ctx)?;

        let y_hat = g.constant(Tensor::row(self.y_hat.to_vec()));
        let diff = g.sub(y, y_hat)?;
        let diff = g.abs(diff)?;
        let ones = g.constant(Tensor::full(&[self.y_hat.len(), 1], 0.5));
        let tvds = g.matmul(diff, ones)?;
        let eps = g.constant(Tensor::scalar(self.eps));
        let over = g.sub(tvds, eps)?;
        let over = g.relu(over)?;
        let penalty = g.sum(over)?;
        let penalty = g.scale(penalty, self.lambda / k as f64)?;

        let mut f = None;
        for &a in &rows {
            let d = jsd_node(&mut g, a, a_hat)?;
            f = Some(match f {
                None => d,
                Some(t) => g.add(t, d)?,
            });
        }
        let mut f = f.expect("k >= 1");
        if k > 1 {
            let mut pairs = Vec::new();
            for i in 0..k {
                for j in i + 1..k {
                    pairs.push(jsd_node(&mut g, rows[i], rows[j])?);
                }
            }
            let cat = g.concat(&pairs, 1)?;
            let s = g.sum(cat)?;
            let s = g.scale(s, 1.0 / (k * (k - 1)) as f64)?;
            f = g.add(f, s)?;
        }
        let objective = g.sub(f, penalty)?;
        g.backward(objective)?;
        Ok((g.value(objective)?.item(), g.grad(z)?.clone()))
    }

    fn measure(&self, alpha: &[f64]) -> Result<Adversary, CounterfactualError> {
        let y = self.model.decode(self.hidden, alpha)?;
        Ok(Adversary {
            alpha: alpha.to_vec(),
            tvd: tvd(&y, self.y_hat)?,
            jsd: jsd(alpha, self.alpha_hat)?,
        })
    }

    /// Largest `s` in `[lo, hi]` with `point(s)` feasible, given `point(lo)`
    /// feasible.
    fn furthest_feasible(
        &self,
        point: impl Fn(f64) -> Vec<f64>,
        mut lo: f64,
        mut hi: f64,
    ) -> Result<Adversary, CounterfactualError> {
        let top = self.measure(&point(hi))?;
        if top.tvd <= self.eps {
            return Ok(top);
        }
        let mut best = self.measure(&point(lo))?;
        for _ in 0..LINE_SEARCH_STEPS {
            let mid = 0.5 * (lo + hi);
            let cand = self.measure(&point(mid))?;
            if cand.tvd <= self.eps {
                lo = mid;
                best = cand;
            } else {
                hi = mid;
            }
        }
        Ok(best)
    }

    fn refine(&self, alpha: &[f64]) -> Result<Adversary, CounterfactualError> {
        let start = self.measure(alpha)?;
        let dir: Vec<f64> = alpha.iter().zip(self.alpha_hat).map(|(a, b)| a - b).collect();
        if dir.iter().all(|&d| d == 0.0) {
            return Ok(start);
        }
        let along = |s: f64| -> Vec<f64> {
            let mut p: Vec<f64> = self.alpha_hat.iter().zip(&dir).map(|(b, d)| (b + s * d).max(0.0)).collect();
            let z: f64 = p.iter().sum();
            p.iter_mut().for_each(|v| *v /= z);
            p
        };
        // step at which the ray leaves the simplex
        let s_max = self
            .alpha_hat
            .iter()
            .zip(&dir)
            .filter(|(_, &d)| d < 0.0)
            .map(|(&b, &d)| -b / d)
            .fold(f64::INFINITY, f64::min);
        let mut best = if start.tvd <= self.eps {
            self.furthest_feasible(along, 1.0, s_max.max(1.0))?
        } else {
            self.furthest_feasible(along, 0.0, 1.0)?
        };
        if best.jsd < start.jsd && start.tvd <= self.eps {
            best = start;
        }

        // candidate vertices: the candidate's own peak, the position it moved
        // toward most, and the position α̂ neglects most (the JSD maximizer
        // when the decoder ignores α)
        let gain: Vec<f64> = best.alpha.iter().zip(self.alpha_hat).map(|(a, b)| a - b).collect();
        let neglect: Vec<f64> = self.alpha_hat.iter().map(|v| -v).collect();
        let mut vertices = vec![
            crate::model::argmax(&best.alpha),
            crate::model::argmax(&gain),
            crate::model::argmax(&neglect),
        ];
        vertices.dedup();
        let base = best.alpha.clone();
        for top in vertices {
            let toward = |s: f64| -> Vec<f64> {
                base.iter()
                    .enumerate()
                    .map(|(i, &a)| (1.0 - s) * a + if i == top { s } else { 0.0 })
                    .collect()
            };
            let vertex = self.furthest_feasible(toward, 0.0, 1.0)?;
            if vertex.tvd <= self.eps && vertex.jsd > best.jsd {
                best = vertex;
            }
        }
        Ok(best)
    }
}

fn softmax_rows(logits: &Tensor) -> Vec<Vec<f64>> {
    (0..logits.rows())
        .map(|r| {
            let row = logits.row_slice(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
            let s: f64 = e.iter().sum();
            e.into_iter().map(|v| v / s).collect()
        })
        .collect()
}

/// Searches for `k` attention distributions far from α̂ (in JSD) whose
/// outputs stay within `eps` TVD of the original.
pub fn adversarial_search(
    model: &Model,
    trace: &ForwardTrace,
    id: &str,
    eps: f64,
    config: &AdversarialConfig,
    seed: u64,
) -> Result<AdversarialResult, CounterfactualError> {
    config.validate()?;
    if !(eps >= 0.0) {
        return Err(CounterfactualError::InvalidConfig(format!("eps must be non-negative, got {eps}")));
    }
    let k = config.k;
    let t = trace.len();
    let problem = Problem {
        model,
        hidden: &trace.hidden,
        y_hat: &trace.output,
        alpha_hat: &trace.alpha,
        eps,
        lambda: config.lambda,
    };
    if t < 2 {
        let only = problem.measure(&trace.alpha)?;
        return Ok(AdversarialResult {
            id: id.to_owned(),
            eps,
            k,
            max_alpha: trace.max_alpha(),
            eps_max_jsd: 0.0,
            adversaries: vec![only; k],
            iterations: 0,
            restarts: 0,
            objective_decreases: 0,
            trajectory: Vec::new(),
            single_token: true,
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, config.init_noise).expect("noise is non-negative");
    let mut init = Vec::with_capacity(k * t);
    let mut previous: Vec<f64> = Vec::new();
    for i in 0..k {
        let noise: Vec<f64> = if config.antithetic && i % 2 == 1 {
            previous.iter().map(|v| -v).collect()
        } else {
            (0..t).map(|_| normal.sample(&mut rng)).collect()
        };
        init.extend(trace.alpha.iter().zip(&noise).map(|(a, n)| (a + 1e-8).ln() + n));
        previous = noise;
    }
    let init = Tensor::new(vec![k, t], init)?;

    let mut learning_rate = config.learning_rate;
    let mut restarts = 0;
    let (logits, trajectory) = loop {
        match optimize(&problem, &init, learning_rate, config) {
            Ok(done) => break done,
            Err(iteration) => {
                if restarts >= config.max_restarts {
                    return Err(CounterfactualError::Diverged {
                        restarts,
                        learning_rate,
                        iteration,
                    });
                }
                log::warn!("adversarial search for {id} diverged at iteration {iteration}; restarting");
                restarts += 1;
                learning_rate /= 10.0;
            }
        }
    };

    let mut adversaries = Vec::with_capacity(k);
    for alpha in softmax_rows(&logits) {
        adversaries.push(if config.line_search {
            problem.refine(&alpha)?
        } else {
            problem.measure(&alpha)?
        });
    }
    let eps_max_jsd = adversaries
        .iter()
        .filter(|a| a.tvd <= eps)
        .map(|a| a.jsd)
        .fold(0.0, f64::max);
    let objective_decreases = trajectory.windows(2).filter(|w| w[1] < w[0]).count();
    Ok(AdversarialResult {
        id: id.to_owned(),
        eps,
        k,
        max_alpha: trace.max_alpha(),
        eps_max_jsd,
        adversaries,
        iterations: trajectory.len(),
        restarts,
        objective_decreases,
        trajectory,
        single_token: false,
    })
}

/// Adam ascent on the penalized objective. `Err(iteration)` on a non-finite
/// objective or gradient.
fn optimize(
    problem: &Problem<'_>,
    init: &Tensor,
    learning_rate: f64,
    config: &AdversarialConfig,
) -> Result<(Tensor, Vec<f64>), usize> {
    let mut params = Parameters::default();
    params.insert("logits", init.clone());
    let adam = TrainConfig {
        learning_rate,
        l2_lambda: 0.0,
        ..Default::default()
    };
    let mut state = AdamState::default();
    let mut trajectory = Vec::with_capacity(config.iterations);
    for it in 0..config.iterations {
        let logits = params.get("logits").expect("inserted above");
        let (value, grad) = problem.evaluate(logits).map_err(|_| it)?;
        if !value.is_finite() || !grad.all_finite() {
            return Err(it);
        }
        // ascend: Adam minimizes, so hand it the negated gradient
        let grads = std::iter::once(("logits".to_owned(), grad.map(|v| -v))).collect();
        adam_step(&mut params, &grads, &mut state, &adam).map_err(|_| it)?;
        trajectory.push(value);
        let n = trajectory.len();
        if n > config.patience && trajectory[n - 1] - trajectory[n - 1 - config.patience] < config.tolerance {
            break;
        }
    }
    let logits = params.get("logits").expect("inserted above").clone();
    if !logits.all_finite() {
        return Err(trajectory.len());
    }
    Ok((logits, trajectory))
}

/// Copy of `trace` whose hidden states are all replaced by their mean row;
/// α̂ is kept and the output recomputed, so the decoder sees identical
/// states at every position.
pub fn with_tied_hidden(model: &Model, trace: &ForwardTrace) -> Result<ForwardTrace, CounterfactualError> {
    let (t, m) = (trace.hidden.rows(), trace.hidden.cols());
    let mean: Vec<f64> = (0..m)
        .map(|c| (0..t).map(|r| trace.hidden.get(r, c)).sum::<f64>() / t as f64)
        .collect();
    let hidden = Tensor::from_rows(&vec![mean.clone(); t])?;
    let output = model.decode(&hidden, &trace.alpha)?;
    Ok(ForwardTrace {
        hidden,
        context: mean,
        output,
        ..trace.clone()
    })
}
