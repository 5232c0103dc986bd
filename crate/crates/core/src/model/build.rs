//! Graph construction for a padded batch.
//!
//! Sequences are laid out row-wise: row `b * t_max + t` holds position `t` of
//! sequence `b`. A batch of one is the unpadded case. Padding never leaks into
//! real positions: convolution taps past a sequence end read a zero row, the
//! LSTM carries its state unchanged across padded steps, and attention masks
//! padded positions out.

use std::collections::BTreeMap;

use super::{EncoderKind, ModelConfig, ModelError, OutputActivation, Parameters, SimilarityKind};
use crate::autodiff::{Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, Default)]
pub struct BuildOptions {
    /// Register parameters as gradient-tracked leaves (ignored when the
    /// caller supplies its own parameter variables).
    pub track_params: bool,
    /// Make the document embeddings a gradient-tracked leaf.
    pub embeddings_as_leaf: bool,
    /// Cut gradient flow through the attention weights.
    pub detach_attention: bool,
}

/// Handles into a built graph.
pub struct Built {
    pub params: BTreeMap<String, Var>,
    pub embedded: Var,
    pub hidden: Var,
    pub query: Var,
    pub scores: Var,
    pub alpha: Var,
    pub context: Var,
    pub output: Var,
    pub t_max: usize,
    pub lens: Vec<usize>,
}

pub struct Batch<'a> {
    pub docs: Vec<&'a [usize]>,
    pub queries: Option<Vec<&'a [usize]>>,
}

fn pad(seqs: &[&[usize]]) -> (Vec<usize>, Vec<usize>, usize) {
    let t_max = seqs.iter().map(|s| s.len()).max().unwrap_or(0);
    let mut ids = Vec::with_capacity(seqs.len() * t_max);
    for s in seqs {
        ids.extend_from_slice(s);
        ids.extend(std::iter::repeat_n(0, t_max - s.len()));
    }
    (ids, seqs.iter().map(|s| s.len()).collect(), t_max)
}

fn var(params: &BTreeMap<String, Var>, name: &str) -> Result<Var, ModelError> {
    params
        .get(name)
        .copied()
        .ok_or_else(|| ModelError::MissingParameter(name.to_owned()))
}

/// Parameters as leaves of `g`.
pub fn register(g: &mut Graph, params: &Parameters, track: bool) -> BTreeMap<String, Var> {
    params
        .iter()
        .map(|(name, t)| {
            let v = if track { g.param(t.clone()) } else { g.constant(t.clone()) };
            (name.clone(), v)
        })
        .collect()
}

pub fn build(
    g: &mut Graph,
    config: &ModelConfig,
    vars: &BTreeMap<String, Var>,
    batch: &Batch<'_>,
    opts: BuildOptions,
) -> Result<Built, ModelError> {
    if batch.docs.is_empty() || batch.docs.iter().any(|d| d.is_empty()) {
        return Err(ModelError::EmptySequence);
    }
    let vocab = config.vocab_size;
    let check_ids = |ids: &[usize]| match ids.iter().find(|&&i| i >= vocab) {
        Some(&id) => Err(ModelError::TokenOutOfRange { id, vocab }),
        None => Ok(()),
    };

    let (ids, lens, t_max) = pad(&batch.docs);
    check_ids(&ids)?;
    let emb = var(vars, "embedding")?;
    let embedded = if opts.embeddings_as_leaf {
        let looked_up = g.gather_rows(emb, &ids)?;
        let value = g.value(looked_up)?.clone();
        g.param(value)
    } else {
        g.gather_rows(emb, &ids)?
    };
    let hidden = encode(g, config, vars, "enc", embedded, &lens, t_max)?;
    let b = lens.len();
    let m = config.hidden_dim;

    let query = match (&batch.queries, config.conditioned) {
        (Some(qs), true) => {
            if qs.len() != b || qs.iter().any(|q| q.is_empty()) {
                return Err(ModelError::MissingQuery);
            }
            let (qids, qlens, qt) = pad(qs);
            check_ids(&qids)?;
            let qe = g.gather_rows(emb, &qids)?;
            let qh = encode(g, config, vars, "query", qe, &qlens, qt)?;
            summarize(g, config.encoder, qh, &qlens, qt, m)?
        }
        (None, true) => return Err(ModelError::MissingQuery),
        (_, false) => match config.similarity {
            SimilarityKind::ScaledDot => {
                let learned = var(vars, "attn.query")?;
                g.gather_rows(learned, &vec![0; b])?
            }
            SimilarityKind::Additive => g.constant(Tensor::zeros(&[b, m])),
        },
    };

    let scores = similarity(g, config.similarity, vars, hidden, query, b, t_max, m)?;
    let mask: Vec<bool> = lens.iter().flat_map(|&l| (0..t_max).map(move |t| t < l)).collect();
    let mut alpha = g.masked_softmax(scores, &mask)?;
    if opts.detach_attention {
        alpha = g.detach(alpha)?;
    }

    let context = if b == 1 {
        g.matmul(alpha, hidden)?
    } else {
        let mut rows = Vec::with_capacity(b);
        for i in 0..b {
            let a = g.slice(alpha, 0, i, i + 1)?;
            let h = g.slice(hidden, 0, i * t_max, (i + 1) * t_max)?;
            rows.push(g.matmul(a, h)?);
        }
        g.concat(&rows, 0)?
    };
    let output = decode(g, config.output, vars, context)?;

    Ok(Built {
        params: vars.clone(),
        embedded,
        hidden,
        query,
        scores,
        alpha,
        context,
        output,
        t_max,
        lens,
    })
}

/// Output distribution from pooled context rows.
pub fn decode(
    g: &mut Graph,
    activation: OutputActivation,
    vars: &BTreeMap<String, Var>,
    context: Var,
) -> Result<Var, ModelError> {
    let w = var(vars, "dec.weight")?;
    let bias = var(vars, "dec.bias")?;
    let z = g.matmul(context, w)?;
    let z = g.add(z, bias)?;
    Ok(match activation {
        OutputActivation::Sigmoid => {
            let neg = g.scale(z, -1.0)?;
            let p0 = g.sigmoid(neg)?;
            let p1 = g.sigmoid(z)?;
            g.concat(&[p0, p1], 1)?
        }
        OutputActivation::Softmax => g.softmax(z)?,
    })
}

pub fn encode(
    g: &mut Graph,
    config: &ModelConfig,
    vars: &BTreeMap<String, Var>,
    prefix: &str,
    x: Var,
    lens: &[usize],
    t_max: usize,
) -> Result<Var, ModelError> {
    match config.encoder {
        EncoderKind::Average => {
            let w = var(vars, &format!("{prefix}.proj.weight"))?;
            let b = var(vars, &format!("{prefix}.proj.bias"))?;
            average_layer(g, x, w, b)
        }
        EncoderKind::Birnn => {
            let dir = |d: &str| -> Result<[Var; 3], ModelError> {
                Ok([
                    var(vars, &format!("{prefix}.{d}.w_ih"))?,
                    var(vars, &format!("{prefix}.{d}.w_hh"))?,
                    var(vars, &format!("{prefix}.{d}.bias"))?,
                ])
            };
            birnn_layer(g, x, lens, t_max, dir("fwd")?, dir("bwd")?)
        }
        EncoderKind::Conv => {
            let mut kernels = Vec::with_capacity(config.conv_kernels.len());
            for (j, &width) in config.conv_kernels.iter().enumerate() {
                kernels.push((
                    width,
                    var(vars, &format!("{prefix}.conv{j}.weight"))?,
                    var(vars, &format!("{prefix}.conv{j}.bias"))?,
                ));
            }
            conv_layer(g, x, lens, t_max, &kernels)
        }
    }
}

pub fn average_layer(g: &mut Graph, x: Var, w: Var, b: Var) -> Result<Var, ModelError> {
    let z = g.matmul(x, w)?;
    let z = g.add(z, b)?;
    Ok(g.relu(z)?)
}

/// One LSTM direction over a padded batch; returns the state at every step.
/// Gate blocks are ordered input, forget, candidate, output.
fn lstm_direction(
    g: &mut Graph,
    x: Var,
    lens: &[usize],
    t_max: usize,
    [w_ih, w_hh, bias]: [Var; 3],
    reverse: bool,
) -> Result<Vec<Var>, ModelError> {
    let b = lens.len();
    let hd = g.value(w_hh)?.rows();
    let mut h = g.constant(Tensor::zeros(&[b, hd]));
    let mut c = g.constant(Tensor::zeros(&[b, hd]));
    let mut states = vec![h; t_max];
    let steps: Vec<usize> = if reverse {
        (0..t_max).rev().collect()
    } else {
        (0..t_max).collect()
    };
    for t in steps {
        let rows: Vec<usize> = (0..b).map(|i| i * t_max + t).collect();
        let xt = g.gather_rows(x, &rows)?;
        let a = g.matmul(xt, w_ih)?;
        let r = g.matmul(h, w_hh)?;
        let z = g.add(a, r)?;
        let z = g.add(z, bias)?;
        let zi = g.slice(z, 1, 0, hd)?;
        let zf = g.slice(z, 1, hd, 2 * hd)?;
        let zg = g.slice(z, 1, 2 * hd, 3 * hd)?;
        let zo = g.slice(z, 1, 3 * hd, 4 * hd)?;
        let i = g.sigmoid(zi)?;
        let f = g.sigmoid(zf)?;
        let cand = g.tanh(zg)?;
        let o = g.sigmoid(zo)?;
        let keep = g.mul(f, c)?;
        let write = g.mul(i, cand)?;
        let c_new = g.add(keep, write)?;
        let tc = g.tanh(c_new)?;
        let h_new = g.mul(o, tc)?;
        if lens.iter().all(|&l| t < l) {
            h = h_new;
            c = c_new;
        } else {
            // padded step: carry the previous state through unchanged
            let mask: Vec<f64> = lens
                .iter()
                .flat_map(|&l| std::iter::repeat_n(if t < l { 1.0 } else { 0.0 }, hd))
                .collect();
            let mask = g.constant(Tensor::new(vec![b, hd], mask)?);
            let dh = g.sub(h_new, h)?;
            let dh = g.mul(mask, dh)?;
            h = g.add(h, dh)?;
            let dc = g.sub(c_new, c)?;
            let dc = g.mul(mask, dc)?;
            c = g.add(c, dc)?;
        }
        states[t] = h;
    }
    Ok(states)
}

pub fn birnn_layer(
    g: &mut Graph,
    x: Var,
    lens: &[usize],
    t_max: usize,
    fwd: [Var; 3],
    bwd: [Var; 3],
) -> Result<Var, ModelError> {
    let b = lens.len();
    let f = lstm_direction(g, x, lens, t_max, fwd, false)?;
    let r = lstm_direction(g, x, lens, t_max, bwd, true)?;
    let mut steps = Vec::with_capacity(t_max);
    for t in 0..t_max {
        steps.push(g.concat(&[f[t], r[t]], 1)?);
    }
    let stacked = g.concat(&steps, 0)?;
    if b == 1 {
        return Ok(stacked);
    }
    // stacked row t*b + i -> layout row i*t_max + t
    let order: Vec<usize> = (0..b).flat_map(|i| (0..t_max).map(move |t| t * b + i)).collect();
    Ok(g.gather_rows(stacked, &order)?)
}

/// "Same" convolutions, one block of filters per odd kernel width, with
/// per-sequence zero padding.
pub fn conv_layer(
    g: &mut Graph,
    x: Var,
    lens: &[usize],
    t_max: usize,
    kernels: &[(usize, Var, Var)],
) -> Result<Var, ModelError> {
    let d = g.value(x)?.cols();
    let zero_row = lens.len() * t_max;
    let zero = g.constant(Tensor::zeros(&[1, d]));
    let padded = g.concat(&[x, zero], 0)?;
    let mut blocks = Vec::with_capacity(kernels.len());
    for &(width, w, bias) in kernels {
        let half = (width / 2) as isize;
        let mut idx = Vec::with_capacity(zero_row * width);
        for (i, &len) in lens.iter().enumerate() {
            for t in 0..t_max {
                for o in -half..=half {
                    let s = t as isize + o;
                    idx.push(if s >= 0 && (s as usize) < len {
                        i * t_max + s as usize
                    } else {
                        zero_row
                    });
                }
            }
        }
        let windows = g.gather_rows(padded, &idx)?;
        let windows = g.reshape(windows, &[zero_row, width * d])?;
        let z = g.matmul(windows, w)?;
        blocks.push(g.add(z, bias)?);
    }
    let z = if blocks.len() == 1 {
        blocks[0]
    } else {
        g.concat(&blocks, 1)?
    };
    Ok(g.relu(z)?)
}

/// Query summary per sequence: BiLSTM takes the last forward state and the
/// first backward state; the other encoders mean-pool their rows.
pub fn summarize(
    g: &mut Graph,
    kind: EncoderKind,
    h: Var,
    lens: &[usize],
    t_max: usize,
    m: usize,
) -> Result<Var, ModelError> {
    let b = lens.len();
    match kind {
        EncoderKind::Birnn => {
            let last: Vec<usize> = lens.iter().enumerate().map(|(i, &l)| i * t_max + l - 1).collect();
            let first: Vec<usize> = (0..b).map(|i| i * t_max).collect();
            let hl = g.gather_rows(h, &last)?;
            let hf = g.gather_rows(h, &first)?;
            let fwd = g.slice(hl, 1, 0, m / 2)?;
            let bwd = g.slice(hf, 1, m / 2, m)?;
            Ok(g.concat(&[fwd, bwd], 1)?)
        }
        EncoderKind::Average | EncoderKind::Conv => {
            let mut pool = vec![0.0; b * b * t_max];
            for (i, &l) in lens.iter().enumerate() {
                for t in 0..l {
                    pool[i * b * t_max + i * t_max + t] = 1.0 / l as f64;
                }
            }
            let pool = g.constant(Tensor::new(vec![b, b * t_max], pool)?);
            Ok(g.matmul(pool, h)?)
        }
    }
}

/// Scores of shape `[b, t_max]`.
#[allow(clippy::too_many_arguments)]
pub fn similarity(
    g: &mut Graph,
    kind: SimilarityKind,
    vars: &BTreeMap<String, Var>,
    h: Var,
    q: Var,
    b: usize,
    t_max: usize,
    m: usize,
) -> Result<Var, ModelError> {
    let spread: Vec<usize> = (0..b).flat_map(|i| std::iter::repeat_n(i, t_max)).collect();
    let flat = match kind {
        SimilarityKind::Additive => {
            let w1 = var(vars, "attn.w1")?;
            let w2 = var(vars, "attn.w2")?;
            let v = var(vars, "attn.v")?;
            let a = g.matmul(h, w1)?;
            let qw = g.matmul(q, w2)?;
            let qw = g.gather_rows(qw, &spread)?;
            let s = g.add(a, qw)?;
            let s = g.tanh(s)?;
            g.matmul(s, v)?
        }
        SimilarityKind::ScaledDot => {
            let qs = g.gather_rows(q, &spread)?;
            let prod = g.mul(h, qs)?;
            let ones = g.constant(Tensor::full(&[m, 1], 1.0));
            let dot = g.matmul(prod, ones)?;
            g.scale(dot, 1.0 / (m as f64).sqrt())?
        }
    };
    Ok(g.reshape(flat, &[b, t_max])?)
}
