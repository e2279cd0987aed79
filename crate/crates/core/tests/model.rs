//! The transformer forward pass against a plain matrix transcript of the same
//! weights, and gradient reach over every parameter.

use lfd_core::model::{teacher_input, Arch, BoundParams, Model, ModelConfig, ParameterSet};
use lfd_core::objectives::graph;
use lfd_core::tensor::Tape;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Mat = Vec<Vec<f64>>;

fn weight(p: &ParameterSet, name: &str) -> Mat {
    let t = p.get(name).unwrap();
    let cols = t.shape()[1];
    t.data().chunks(cols).map(<[f64]>::to_vec).collect()
}

fn vector(p: &ParameterSet, name: &str) -> Vec<f64> {
    p.get(name).unwrap().data().to_vec()
}

fn matmul(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .map(|row| {
            (0..b[0].len())
                .map(|j| row.iter().zip(b).map(|(x, brow)| x * brow[j]).sum())
                .collect()
        })
        .collect()
}

fn transpose(a: &Mat) -> Mat {
    (0..a[0].len())
        .map(|j| a.iter().map(|r| r[j]).collect())
        .collect()
}

fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect())
        .collect()
}

fn linear(p: &ParameterSet, x: &Mat, prefix: &str) -> Mat {
    let b = vector(p, &format!("{prefix}.bias"));
    matmul(x, &weight(p, &format!("{prefix}.weight")))
        .into_iter()
        .map(|r| r.iter().zip(&b).map(|(v, c)| v + c).collect())
        .collect()
}

fn layer_norm(p: &ParameterSet, x: &Mat, prefix: &str) -> Mat {
    let g = vector(p, &format!("{prefix}.gain"));
    let b = vector(p, &format!("{prefix}.bias"));
    x.iter()
        .map(|r| {
            let n = r.len() as f64;
            let mean = r.iter().sum::<f64>() / n;
            let var = r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            r.iter()
                .enumerate()
                .map(|(i, v)| (v - mean) / (var + 1e-5).sqrt() * g[i] + b[i])
                .collect()
        })
        .collect()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

fn softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn attention(
    p: &ParameterSet,
    q_in: &Mat,
    kv_in: &Mat,
    prefix: &str,
    heads: usize,
    causal: bool,
) -> Mat {
    let q = linear(p, q_in, &format!("{prefix}.query"));
    let k = linear(p, kv_in, &format!("{prefix}.key"));
    let v = linear(p, kv_in, &format!("{prefix}.value"));
    let hd = q[0].len() / heads;
    let mut cat = vec![Vec::new(); q.len()];
    for h in 0..heads {
        let cols =
            |m: &Mat| -> Mat { m.iter().map(|r| r[h * hd..(h + 1) * hd].to_vec()).collect() };
        let (qh, kh, vh) = (cols(&q), cols(&k), cols(&v));
        let scores = matmul(&qh, &transpose(&kh));
        for (i, row) in scores.iter().enumerate() {
            let masked: Vec<f64> = row
                .iter()
                .enumerate()
                .map(|(j, s)| {
                    if causal && j > i {
                        f64::NEG_INFINITY
                    } else {
                        s / (hd as f64).sqrt()
                    }
                })
                .collect();
            let w = softmax(&masked);
            for d in 0..hd {
                cat[i].push(w.iter().zip(&vh).map(|(a, vr)| a * vr[d]).sum());
            }
        }
    }
    linear(p, &cat, &format!("{prefix}.out"))
}

fn block(p: &ParameterSet, h: Mat, lp: &str, causal: bool, memory: Option<&Mat>) -> Mat {
    let n = layer_norm(p, &h, &format!("{lp}.norm_attn"));
    let mut h = add(&h, &attention(p, &n, &n, &format!("{lp}.attn"), 2, causal));
    if let Some(mem) = memory {
        let n = layer_norm(p, &h, &format!("{lp}.norm_cross"));
        h = add(&h, &attention(p, &n, mem, &format!("{lp}.cross"), 2, false));
    }
    let n = layer_norm(p, &h, &format!("{lp}.norm_ffn"));
    let up: Mat = linear(p, &n, &format!("{lp}.ffn.up"))
        .into_iter()
        .map(|r| r.into_iter().map(gelu).collect())
        .collect();
    add(&h, &linear(p, &up, &format!("{lp}.ffn.down")))
}

fn embed(p: &ParameterSet, tokens: &[usize]) -> Mat {
    let (tok, pos) = (weight(p, "embed.tokens"), weight(p, "embed.positions"));
    tokens
        .iter()
        .enumerate()
        .map(|(i, &t)| tok[t].iter().zip(&pos[i]).map(|(a, b)| a + b).collect())
        .collect()
}

fn log_softmax(logits: Mat) -> Mat {
    logits
        .iter()
        .map(|r| softmax(r).into_iter().map(f64::ln).collect())
        .collect()
}

fn oracle(arch: Arch, p: &ParameterSet, x: &[usize], y_in: &[usize]) -> Mat {
    match arch {
        Arch::DecoderOnly => {
            let stream: Vec<usize> = x.iter().chain(y_in).copied().collect();
            let h = block(p, embed(p, &stream), "decoder.0", true, None);
            let h = layer_norm(p, &h, "decoder.norm_final");
            let h = h[x.len()..].to_vec();
            log_softmax(matmul(&h, &transpose(&weight(p, "embed.tokens"))))
        }
        Arch::EncoderDecoder => {
            let m = block(p, embed(p, x), "encoder.0", false, None);
            let m = layer_norm(p, &m, "encoder.norm_final");
            let h = block(p, embed(p, y_in), "decoder.0", true, Some(&m));
            let h = layer_norm(p, &h, "decoder.norm_final");
            log_softmax(linear(p, &h, "lm_head"))
        }
    }
}

fn small(arch: Arch, seed: u64) -> (Model, ParameterSet) {
    let model = Model::new(ModelConfig {
        arch,
        layers: 1,
        model_dim: 8,
        heads: 2,
        ffn_dim: 16,
        vocab_size: 5,
        max_positions: 12,
        dropout_rate: 0.1,
        init_std: 0.5,
        seed,
    })
    .unwrap();
    let mut params = model.init_parameters();
    // Move gains and biases off their initial constants.
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
    for (_, t) in params.values_mut().unwrap() {
        t.data_mut()
            .iter_mut()
            .for_each(|v| *v += rng.gen_range(-0.2..0.2));
    }
    (model, params)
}

#[test]
fn forward_matches_matrix_transcript() {
    for arch in [Arch::DecoderOnly, Arch::EncoderDecoder] {
        let (model, params) = small(arch, 7);
        let (x, y) = (vec![4, 3, 1], vec![2, 0, 4, 4]);
        let got = model.score(&params, &x, &y).unwrap();
        let want = oracle(arch, &params, &x, &teacher_input(&y));
        assert_eq!(got.rows(), want.len());
        for (t, row) in want.iter().enumerate() {
            for (v, w) in row.iter().enumerate() {
                assert!(
                    (got.get(t, v) - w).abs() < 1e-12,
                    "{arch:?} ({t},{v}): {} vs {w}",
                    got.get(t, v)
                );
            }
        }
    }
}

#[test]
fn every_parameter_receives_gradient() {
    for arch in [Arch::DecoderOnly, Arch::EncoderDecoder] {
        let (model, params) = small(arch, 3);
        let (x, y) = (vec![3, 4], vec![4, 2, 3, 0, 1]);
        let mut tape = Tape::new();
        let bound = BoundParams::bind(&mut tape, &params).unwrap();
        let logp = model
            .forward_on_tape(&mut tape, &bound, &x, &teacher_input(&y), None)
            .unwrap();
        let loss = graph::mle(&mut tape, logp, &y).unwrap();
        let grads = tape.backward(loss).unwrap();
        for (name, var) in bound.iter() {
            // Rows of unused positions and tokens stay zero; one live entry suffices.
            let g = grads
                .get(var)
                .unwrap_or_else(|| panic!("{arch:?}: no gradient for {name}"));
            assert!(
                g.data().iter().any(|&v| v != 0.0),
                "{arch:?}: zero gradient for {name}"
            );
            assert!(g.is_finite());
        }
    }
}
