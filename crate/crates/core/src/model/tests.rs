use super::*;
use crate::autodiff::check_gradients;
use crate::metrics::tvd;
use proptest::prelude::*;
use rand::Rng;

fn random_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.random_range(-scale..scale)).collect();
    Tensor::matrix(rows, cols, data).unwrap()
}

fn small_config(encoder: EncoderKind, similarity: SimilarityKind, conditioned: bool) -> ModelConfig {
    let classes = if conditioned { 3 } else { 2 };
    let mut c = ModelConfig::new(encoder, similarity, 12, classes, conditioned).with_dims(4, 4);
    c.conv_kernels = vec![1, 3];
    c.conv_filters = vec![2, 2];
    c
}

fn combos() -> Vec<(EncoderKind, SimilarityKind)> {
    let mut out = Vec::new();
    for e in [EncoderKind::Average, EncoderKind::Birnn, EncoderKind::Conv] {
        for s in [SimilarityKind::Additive, SimilarityKind::ScaledDot] {
            out.push((e, s));
        }
    }
    out
}

fn instance(tokens: &[usize], query: Option<&[usize]>) -> Instance {
    Instance {
        id: "x".into(),
        tokens: tokens.to_vec(),
        query: query.map(<[usize]>::to_vec),
        label: 0,
    }
}

#[test]
fn embed_looks_up_rows() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let e = random_tensor(&mut rng, 6, 3, 1.0);
    let x = embed(&[2, 5, 2], &e).unwrap();
    assert_eq!(x.row_slice(0), e.row_slice(2));
    assert_eq!(x.row_slice(1), e.row_slice(5));
    assert_eq!(x.row_slice(2), e.row_slice(2));
    let x = embed(&[0, 0], &e).unwrap();
    assert_eq!(x.row_slice(0), x.row_slice(1));
    assert!(matches!(embed(&[6], &e), Err(ModelError::TokenOutOfRange { id: 6, vocab: 6 })));
}

#[test]
fn average_encoder_matches_dense_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (t, d, m) = (5, 4, 3);
    let x = random_tensor(&mut rng, t, d, 1.0);
    let w = random_tensor(&mut rng, d, m, 1.0);
    let b = random_tensor(&mut rng, 1, m, 1.0);
    let h = encode_average(&x, &w, &b).unwrap();
    for r in 0..t {
        for c in 0..m {
            let mut acc = 0.0;
            for k in 0..d {
                acc += x.get(r, k) * w.get(k, c);
            }
            assert_eq!(h.get(r, c), (acc + b.data()[c]).max(0.0));
        }
    }
    let zero = encode_average(&x, &Tensor::zeros(&[d, m]), &Tensor::zeros(&[1, m])).unwrap();
    assert!(zero.data().iter().all(|&v| v == 0.0));
    let neg = encode_average(&x, &Tensor::zeros(&[d, m]), &Tensor::full(&[1, m], -1.0)).unwrap();
    assert!(neg.data().iter().all(|&v| v == 0.0));
    assert!(encode_average(&x, &Tensor::zeros(&[d + 1, m]), &b).is_err());
}

#[test]
fn zero_lstm_gives_zero_states() {
    let x = Tensor::full(&[4, 3], 0.7);
    let w_ih = Tensor::zeros(&[3, 8]);
    let w_hh = Tensor::zeros(&[2, 8]);
    let bias = Tensor::zeros(&[1, 8]);
    let lw = LstmWeights {
        w_ih: &w_ih,
        w_hh: &w_hh,
        bias: &bias,
    };
    let h = encode_birnn(&x, lw, lw).unwrap();
    assert_eq!(h.shape(), &[4, 4]);
    assert!(h.data().iter().all(|&v| v == 0.0));
}

#[test]
fn single_step_lstm_directions_agree() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random_tensor(&mut rng, 1, 3, 1.0);
    let w_ih = random_tensor(&mut rng, 3, 8, 0.5);
    let w_hh = random_tensor(&mut rng, 2, 8, 0.5);
    let bias = random_tensor(&mut rng, 1, 8, 0.5);
    let lw = LstmWeights {
        w_ih: &w_ih,
        w_hh: &w_hh,
        bias: &bias,
    };
    let h = encode_birnn(&x, lw, lw).unwrap();
    assert_eq!(h.data()[..2], h.data()[2..]);
}

/// Scalar-loop LSTM used as an independent oracle.
fn lstm_oracle(x: &Tensor, w_ih: &Tensor, w_hh: &Tensor, bias: &Tensor, reverse: bool) -> Vec<Vec<f64>> {
    let hd = w_hh.rows();
    let t = x.rows();
    let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
    let mut h = vec![0.0; hd];
    let mut c = vec![0.0; hd];
    let mut out = vec![vec![]; t];
    let order: Vec<usize> = if reverse { (0..t).rev().collect() } else { (0..t).collect() };
    for s in order {
        let z: Vec<f64> = (0..4 * hd)
            .map(|j| {
                bias.data()[j]
                    + (0..x.cols()).map(|k| x.get(s, k) * w_ih.get(k, j)).sum::<f64>()
                    + (0..hd).map(|k| h[k] * w_hh.get(k, j)).sum::<f64>()
            })
            .collect();
        for u in 0..hd {
            c[u] = sig(z[hd + u]) * c[u] + sig(z[u]) * z[2 * hd + u].tanh();
            h[u] = sig(z[3 * hd + u]) * c[u].tanh();
        }
        out[s] = h.clone();
    }
    out
}

#[test]
fn birnn_matches_scalar_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = random_tensor(&mut rng, 5, 3, 1.0);
    let p: Vec<Tensor> = [(3, 12), (3, 12), (1, 12), (3, 12), (3, 12), (1, 12)]
        .iter()
        .map(|&(r, c)| random_tensor(&mut rng, r, c, 0.6))
        .collect();
    let f = LstmWeights {
        w_ih: &p[0],
        w_hh: &p[1],
        bias: &p[2],
    };
    let b = LstmWeights {
        w_ih: &p[3],
        w_hh: &p[4],
        bias: &p[5],
    };
    let h = encode_birnn(&x, f, b).unwrap();
    let of = lstm_oracle(&x, &p[0], &p[1], &p[2], false);
    let ob = lstm_oracle(&x, &p[3], &p[4], &p[5], true);
    for t in 0..5 {
        for u in 0..3 {
            assert!((h.get(t, u) - of[t][u]).abs() < 1e-12);
            assert!((h.get(t, 3 + u) - ob[t][u]).abs() < 1e-12);
        }
    }
}

#[test]
fn birnn_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let p: Vec<Tensor> = [(2, 8), (2, 8), (1, 8), (2, 8), (2, 8), (1, 8)]
        .iter()
        .map(|&(r, c)| random_tensor(&mut rng, r, c, 0.8))
        .collect();
    let x = random_tensor(&mut rng, 3, 2, 1.0);
    let check = check_gradients(
        |g, x| {
            let f = [g.constant(p[0].clone()), g.constant(p[1].clone()), g.constant(p[2].clone())];
            let b = [g.constant(p[3].clone()), g.constant(p[4].clone()), g.constant(p[5].clone())];
            let h = build::birnn_layer(g, x, &[3], 3, f, b).map_err(|e| match e {
                ModelError::Autodiff(a) => a,
                other => panic!("{other}"),
            })?;
            g.sum(h)
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert!(check.max_relative_error < 1e-4, "{check:?}");
}

fn conv_oracle(x: &Tensor, width: usize, w: &Tensor, b: &Tensor) -> Vec<Vec<f64>> {
    let (t, d) = (x.rows(), x.cols());
    let half = (width / 2) as isize;
    (0..t)
        .map(|r| {
            (0..w.cols())
                .map(|f| {
                    let mut acc = 0.0;
                    for (j, o) in (-half..=half).enumerate() {
                        let s = r as isize + o;
                        for k in 0..d {
                            let xv = if s >= 0 && (s as usize) < t { x.get(s as usize, k) } else { 0.0 };
                            acc += xv * w.get(j * d + k, f);
                        }
                    }
                    acc + b.data()[f]
                })
                .collect()
        })
        .collect()
}

#[test]
fn conv_encoder_matches_sliding_window() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = random_tensor(&mut rng, 6, 3, 1.0);
    let w1 = random_tensor(&mut rng, 3, 2, 1.0);
    let b1 = random_tensor(&mut rng, 1, 2, 1.0);
    let w3 = random_tensor(&mut rng, 9, 3, 1.0);
    let b3 = random_tensor(&mut rng, 1, 3, 1.0);
    let w5 = random_tensor(&mut rng, 15, 1, 1.0);
    let b5 = random_tensor(&mut rng, 1, 1, 1.0);
    let kernels = [
        ConvKernel {
            width: 1,
            weight: &w1,
            bias: &b1,
        },
        ConvKernel {
            width: 3,
            weight: &w3,
            bias: &b3,
        },
        ConvKernel {
            width: 5,
            weight: &w5,
            bias: &b5,
        },
    ];
    let h = encode_conv(&x, &kernels).unwrap();
    assert_eq!(h.shape(), &[6, 6]);
    let parts = [conv_oracle(&x, 1, &w1, &b1), conv_oracle(&x, 3, &w3, &b3), conv_oracle(&x, 5, &w5, &b5)];
    for t in 0..6 {
        let expected: Vec<f64> = parts.iter().flat_map(|p| p[t].iter().map(|v| v.max(0.0))).collect();
        assert_eq!(h.row_slice(t), expected.as_slice());
    }
    // kernel wider than the sequence still yields T positions
    let short = random_tensor(&mut rng, 2, 3, 1.0);
    assert_eq!(encode_conv(&short, &kernels[2..]).unwrap().shape(), &[2, 1]);
}

#[test]
fn conv_trivial_kernels() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = random_tensor(&mut rng, 4, 3, 1.0);
    let mut eye = Tensor::zeros(&[3, 3]);
    for i in 0..3 {
        eye.data_mut()[i * 3 + i] = 1.0;
    }
    let zb = Tensor::zeros(&[1, 3]);
    let k = [ConvKernel {
        width: 1,
        weight: &eye,
        bias: &zb,
    }];
    assert_eq!(encode_conv(&x, &k).unwrap(), x.map(|v| v.max(0.0)));
    let zw = Tensor::zeros(&[9, 3]);
    let k = [ConvKernel {
        width: 3,
        weight: &zw,
        bias: &zb,
    }];
    assert!(encode_conv(&x, &k).unwrap().data().iter().all(|&v| v == 0.0));
    let k = [ConvKernel {
        width: 2,
        weight: &zw,
        bias: &zb,
    }];
    assert!(encode_conv(&x, &k).is_err());
}

#[test]
fn similarity_examples() {
    let h = Tensor::column(vec![2.0, -1.0]);
    let p = Parameters::default();
    assert_eq!(similarity(&h, &[3.0], SimilarityKind::ScaledDot, &p).unwrap(), vec![6.0, -3.0]);

    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut p = Parameters::default();
    p.insert("attn.w1", random_tensor(&mut rng, 3, 3, 1.0));
    p.insert("attn.w2", random_tensor(&mut rng, 3, 3, 1.0));
    p.insert("attn.v", Tensor::zeros(&[3, 1]));
    let h = random_tensor(&mut rng, 4, 3, 1.0);
    let s = similarity(&h, &[0.3, -0.2, 0.9], SimilarityKind::Additive, &p).unwrap();
    assert_eq!(s, vec![0.0; 4]);

    let tied = Tensor::from_rows(&vec![vec![0.4, -1.0, 2.0]; 5]).unwrap();
    let s = similarity(&tied, &[1.0, 2.0, 3.0], SimilarityKind::ScaledDot, &p).unwrap();
    assert!(s.iter().all(|&v| v == s[0]));
    assert!(similarity(&tied, &[1.0], SimilarityKind::ScaledDot, &p).is_err());
}

#[test]
fn additive_similarity_matches_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (w1, w2, v) = (
        random_tensor(&mut rng, 3, 3, 1.0),
        random_tensor(&mut rng, 3, 3, 1.0),
        random_tensor(&mut rng, 3, 1, 1.0),
    );
    let mut p = Parameters::default();
    p.insert("attn.w1", w1.clone());
    p.insert("attn.w2", w2.clone());
    p.insert("attn.v", v.clone());
    let h = random_tensor(&mut rng, 4, 3, 1.0);
    let q = [0.5, -0.1, 0.2];
    let s = similarity(&h, &q, SimilarityKind::Additive, &p).unwrap();
    for t in 0..4 {
        let expected: f64 = (0..3)
            .map(|j| {
                let pre: f64 = (0..3).map(|k| h.get(t, k) * w1.get(k, j) + q[k] * w2.get(k, j)).sum();
                v.data()[j] * pre.tanh()
            })
            .sum();
        assert!((s[t] - expected).abs() < 1e-12);
    }
}

#[test]
fn attend_examples() {
    assert_eq!(attend(&[0.3; 4], &[true; 4]).unwrap(), vec![0.25; 4]);
    let a = attend(&[50.0, 0.0, 0.0], &[true; 3]).unwrap();
    assert!(a[0] > 1.0 - 1e-9);
    let a = attend(&[1f64.ln(), 2f64.ln(), 3f64.ln()], &[true; 3]).unwrap();
    for (x, y) in a.iter().zip([1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0]) {
        assert!((x - y).abs() < 1e-15);
    }
    let a = attend(&[1.0, 5.0, 2.0], &[true, false, true]).unwrap();
    assert_eq!(a[1], 0.0);
    assert!(attend(&[1.0, 2.0], &[false, false]).is_err());
}

fn decoder_params(rng: &mut ChaCha8Rng, m: usize, k: usize) -> Parameters {
    let mut p = Parameters::default();
    p.insert("dec.weight", random_tensor(rng, m, k, 1.0));
    p.insert("dec.bias", random_tensor(rng, 1, k, 1.0));
    p
}

#[test]
fn decode_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let h = random_tensor(&mut rng, 4, 3, 1.0);
    let p = decoder_params(&mut rng, 3, 1);
    let y = decode(&h, &[0.0, 0.0, 1.0, 0.0], &p, OutputActivation::Sigmoid).unwrap();
    let z: f64 = p.get("dec.bias").unwrap().data()[0]
        + (0..3).map(|c| h.get(2, c) * p.get("dec.weight").unwrap().data()[c]).sum::<f64>();
    assert!((y[1] - 1.0 / (1.0 + (-z).exp())).abs() < 1e-15);
    assert!((y[0] + y[1] - 1.0).abs() < 1e-15);

    let mut zero = Parameters::default();
    zero.insert("dec.weight", Tensor::zeros(&[3, 1]));
    zero.insert("dec.bias", Tensor::zeros(&[1, 1]));
    assert_eq!(decode(&h, &[0.25; 4], &zero, OutputActivation::Sigmoid).unwrap(), vec![0.5, 0.5]);

    assert!(matches!(
        decode(&h, &[0.5, 0.6, 0.0, 0.0], &p, OutputActivation::Sigmoid),
        Err(ModelError::NotOnSimplex(_))
    ));
    assert!(decode(&h, &[1.0], &p, OutputActivation::Sigmoid).is_err());
}

#[test]
fn decode_ignores_attention_over_tied_states() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let tied = Tensor::from_rows(&vec![vec![0.3, -1.2, 0.8]; 6]).unwrap();
    let p = decoder_params(&mut rng, 3, 4);
    let base = decode(&tied, &[1.0 / 6.0; 6], &p, OutputActivation::Softmax).unwrap();
    for _ in 0..20 {
        let raw: Vec<f64> = (0..6).map(|_| rng.random_range(0.0..1.0)).collect();
        let s: f64 = raw.iter().sum();
        let a: Vec<f64> = raw.iter().map(|v| v / s).collect();
        let y = decode(&tied, &a, &p, OutputActivation::Softmax).unwrap();
        assert!(tvd(&y, &base).unwrap() < 1e-12);
        // permutations of the same weights agree bit for bit
        let mut rev = a.clone();
        rev.reverse();
        assert_eq!(decode(&tied, &rev, &p, OutputActivation::Softmax).unwrap(), y);
    }
}

#[test]
fn binary_tvd_is_probability_gap() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let h = random_tensor(&mut rng, 3, 2, 2.0);
    let p = decoder_params(&mut rng, 2, 1);
    let y1 = decode(&h, &[0.7, 0.2, 0.1], &p, OutputActivation::Sigmoid).unwrap();
    let y2 = decode(&h, &[0.1, 0.1, 0.8], &p, OutputActivation::Sigmoid).unwrap();
    assert!((tvd(&y1, &y2).unwrap() - (y1[1] - y2[1]).abs()).abs() < 1e-15);
}

#[test]
fn decode_is_linear_in_alpha_before_activation() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let h = random_tensor(&mut rng, 4, 3, 1.0);
    let p = decoder_params(&mut rng, 3, 1);
    let logit = |a: &[f64]| {
        let y = decode(&h, a, &p, OutputActivation::Sigmoid).unwrap();
        (y[1] / y[0]).ln()
    };
    let a1 = [0.1, 0.2, 0.3, 0.4];
    let a2 = [0.6, 0.1, 0.1, 0.2];
    let mid: Vec<f64> = a1.iter().zip(&a2).map(|(x, y)| (x + y) / 2.0).collect();
    assert!((logit(&mid) - (logit(&a1) + logit(&a2)) / 2.0).abs() < 1e-9);
}

#[test]
fn forward_trace_invariants_and_determinism() {
    for (e, s) in combos() {
        for conditioned in [false, true] {
            let model = Model::new(small_config(e, s, conditioned).with_seed(3)).unwrap();
            let inst = instance(&[3, 4, 5, 4, 11], conditioned.then_some(&[6, 7][..]));
            let a = model.forward(&inst).unwrap();
            let b = Model::new(small_config(e, s, conditioned).with_seed(3))
                .unwrap()
                .forward(&inst)
                .unwrap();
            assert_eq!(a, b);
            assert!((a.alpha.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!((a.output.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!(a.alpha.iter().chain(&a.output).all(|&v| v >= 0.0));
            assert_eq!(a.hidden.shape(), &[5, 4]);
            assert_eq!(a.output.len(), if conditioned { 3 } else { 2 });
            assert_eq!(a.query.len(), 4);
            if !conditioned && s == SimilarityKind::Additive {
                assert_eq!(a.query, vec![0.0; 4]);
            }
        }
    }
}

#[test]
fn forward_errors() {
    let model = Model::new(small_config(EncoderKind::Birnn, SimilarityKind::Additive, true)).unwrap();
    assert!(matches!(model.forward(&instance(&[1, 2], None)), Err(ModelError::MissingQuery)));
    assert!(matches!(model.forward(&instance(&[], Some(&[1]))), Err(ModelError::EmptySequence)));
    assert!(matches!(
        model.forward(&instance(&[99], Some(&[1]))),
        Err(ModelError::TokenOutOfRange { id: 99, .. })
    ));
}

#[test]
fn config_validation() {
    let c = small_config(EncoderKind::Birnn, SimilarityKind::Additive, false).with_dims(4, 5);
    assert!(c.validate().is_err());
    let mut c = small_config(EncoderKind::Conv, SimilarityKind::Additive, false);
    c.conv_filters = vec![2, 3];
    assert!(c.validate().is_err());
    c.conv_filters = vec![2, 2];
    c.conv_kernels = vec![1, 4];
    assert!(c.validate().is_err());
    let mut c = small_config(EncoderKind::Average, SimilarityKind::Additive, false);
    c.num_classes = 3;
    assert!(c.validate().is_err());
    let p = ModelConfig::new(EncoderKind::Conv, SimilarityKind::Additive, 10, 2, false).paper_scale();
    assert!(p.validate().is_ok());
    assert_eq!((p.embedding_dim, p.hidden_dim), (300, 128));
}

#[test]
fn lstm_forget_bias_starts_at_one() {
    let model = Model::new(small_config(EncoderKind::Birnn, SimilarityKind::Additive, false)).unwrap();
    let b = model.params.get("enc.fwd.bias").unwrap();
    assert_eq!(b.data(), &[0., 0., 1., 1., 0., 0., 0., 0.]);
}

#[test]
fn padded_batch_matches_single_instances() {
    let docs: [&[usize]; 4] = [&[3, 4, 5], &[6], &[7, 8, 9, 10, 11, 3], &[4, 4]];
    let queries: [&[usize]; 4] = [&[1, 2], &[5, 6, 7], &[8], &[9, 9]];
    for (e, s) in combos() {
        for conditioned in [false, true] {
            let model = Model::new(small_config(e, s, conditioned).with_seed(17)).unwrap();
            let insts: Vec<Instance> = docs
                .iter()
                .zip(queries)
                .map(|(d, q)| instance(d, conditioned.then_some(q)))
                .collect();
            let refs: Vec<&Instance> = insts.iter().collect();
            let batched = model.forward_batch(&refs).unwrap();
            for (inst, bt) in insts.iter().zip(&batched) {
                let single = model.forward(inst).unwrap();
                let close = |a: &[f64], b: &[f64]| a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-10);
                assert!(close(single.hidden.data(), bt.hidden.data()), "{e:?} {s:?} hidden");
                assert!(close(&single.query, &bt.query), "{e:?} {s:?} query");
                assert!(close(&single.alpha, &bt.alpha), "{e:?} {s:?} alpha");
                assert!(close(&single.output, &bt.output), "{e:?} {s:?} output");
            }
        }
    }
}

#[test]
fn encoder_locality() {
    let base = [3, 4, 5, 6, 7, 8, 9];
    let mut changed = base;
    changed[3] = 11;
    for e in [EncoderKind::Average, EncoderKind::Conv, EncoderKind::Birnn] {
        let model = Model::new(small_config(e, SimilarityKind::Additive, false)).unwrap();
        let a = model.forward_tokens(&base, None).unwrap().hidden;
        let b = model.forward_tokens(&changed, None).unwrap().hidden;
        let reach = match e {
            EncoderKind::Average => 0,
            EncoderKind::Conv => 1,
            EncoderKind::Birnn => usize::MAX,
        };
        for s in 0..base.len() {
            let same = a.row_slice(s) == b.row_slice(s);
            if s.abs_diff(3) > reach {
                assert!(same, "{e:?} position {s} changed");
            }
        }
        if e == EncoderKind::Birnn {
            // both directions carry the change
            assert_ne!(a.row_slice(0)[2..], b.row_slice(0)[2..]);
            assert_ne!(a.row_slice(6)[..2], b.row_slice(6)[..2]);
            assert_eq!(a.row_slice(0)[..2], b.row_slice(0)[..2]);
        }
    }
}

#[test]
fn full_model_gradients_match_finite_differences() {
    for (e, s) in combos() {
        for conditioned in [false, true] {
            let model = Model::new(small_config(e, s, conditioned).with_seed(21)).unwrap();
            let tokens = [3usize, 7, 1, 9];
            let query = [4usize, 5, 2];
            let check = check_gradients(
                |g, flat| {
                    let vars = model.params.unflatten_vars(g, flat).map_err(|e| match e {
                        ModelError::Autodiff(a) => a,
                        other => panic!("{other}"),
                    })?;
                    let built = model
                        .build_with_vars(g, &vars, vec![&tokens], Some(vec![&query]), BuildOptions::default())
                        .map_err(|e| match e {
                            ModelError::Autodiff(a) => a,
                            other => panic!("{other}"),
                        })?;
                    let p = g.slice(built.output, 1, 1, 2)?;
                    let p = g.clamp_min(p, 1e-12)?;
                    let l = g.log(p)?;
                    g.scale(l, -1.0)
                },
                &model.params.flatten(),
                1e-5,
            )
            .unwrap();
            assert!(check.max_relative_error < 1e-4, "{e:?} {s:?} {conditioned}: {}", check.max_relative_error);
        }
    }
}

#[test]
fn checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.json");
    for (e, s) in combos() {
        let model = Model::new(small_config(e, s, true).with_seed(5)).unwrap();
        model.save(&path).unwrap();
        assert_eq!(Model::load(&path).unwrap(), model);
    }
    let model = Model::new(small_config(EncoderKind::Average, SimilarityKind::Additive, false)).unwrap();
    let mut text = model.to_json();
    text = text.replace(CHECKPOINT_FORMAT, "something-else");
    assert!(matches!(Model::from_json(&text), Err(ModelError::Checkpoint(_))));
    let mut bad = model.clone();
    bad.params.insert("dec.bias", Tensor::zeros(&[1, 3]));
    assert!(matches!(Model::from_json(&bad.to_json()), Err(ModelError::ParameterShape { .. })));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn attend_is_permutation_equivariant(
        scores in proptest::collection::vec(-20.0f64..20.0, 1..12),
        seed in 0u64..1000,
    ) {
        use rand::seq::SliceRandom;
        let mut perm: Vec<usize> = (0..scores.len()).collect();
        perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let a = attend(&scores, &vec![true; scores.len()]).unwrap();
        let permuted: Vec<f64> = perm.iter().map(|&i| scores[i]).collect();
        let b = attend(&permuted, &vec![true; scores.len()]).unwrap();
        for (k, &i) in perm.iter().enumerate() {
            prop_assert!((b[k] - a[i]).abs() < 1e-15);
        }
    }

    #[test]
    fn forward_output_is_distribution(
        tokens in proptest::collection::vec(0usize..12, 1..9),
        seed in 0u64..50,
        which in 0usize..6,
    ) {
        let (e, s) = combos()[which];
        let model = Model::new(small_config(e, s, false).with_seed(seed)).unwrap();
        let t = model.forward_tokens(&tokens, None).unwrap();
        prop_assert!((t.output.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        prop_assert!((t.alpha.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        prop_assert_eq!(t.alpha.len(), tokens.len());
    }
}
