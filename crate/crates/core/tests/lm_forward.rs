mod common;

use common::{compensated_sum, rng, tiny_config, tiny_lm};
use ppc_core::lm::{
    generate_cached, generate_full, DecodeConfig, IncrementalDecoder, LMConfig, LanguageModel, PrefixState, TokenId,
};
use ppc_core::Tensor;
use proptest::prelude::*;
use rand::Rng;

fn row(t: &Tensor<f64>, i: usize) -> Vec<f64> {
    t.row(i).to_vec()
}

fn vec_mat(x: &[f64], w: &Tensor<f64>) -> Vec<f64> {
    (0..w.cols())
        .map(|j| compensated_sum(x.iter().enumerate().map(|(i, &v)| v * w.at(i, j))))
        .collect()
}

fn layer_norm(x: &[f64], g: &Tensor<f64>, b: &Tensor<f64>) -> Vec<f64> {
    let n = x.len() as f64;
    let mu = compensated_sum(x.iter().copied()) / n;
    let var = compensated_sum(x.iter().map(|v| (v - mu) * (v - mu))) / n;
    let inv = 1.0 / (var + 1e-5).sqrt();
    x.iter()
        .enumerate()
        .map(|(j, v)| (v - mu) * inv * g.data()[j] + b.data()[j])
        .collect()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

/// Straight-line forward of a one-layer model, written independently of
/// the tape.
fn reference_logits(lm: &LanguageModel<f64>, prefix: Option<&PrefixState<f64>>, tokens: &[TokenId]) -> Vec<Vec<f64>> {
    let cfg = lm.config();
    let (d, heads) = (cfg.d_model, cfg.n_heads);
    let dh = d / heads;
    let layer = &lm.layers[0];
    let x: Vec<Vec<f64>> = tokens
        .iter()
        .enumerate()
        .map(|(i, &t)| {
            let e = row(&lm.tok_emb, t as usize);
            let p = row(&lm.pos_emb, i);
            e.iter().zip(&p).map(|(a, b)| a + b).collect()
        })
        .collect();
    let a: Vec<Vec<f64>> = x.iter().map(|r| layer_norm(r, &layer.ln1_g, &layer.ln1_b)).collect();
    let q: Vec<Vec<f64>> = a.iter().map(|r| vec_mat(r, &layer.wq)).collect();
    let mut k: Vec<Vec<f64>> = Vec::new();
    let mut v: Vec<Vec<f64>> = Vec::new();
    if let Some(p) = prefix {
        for s in 0..p.len() {
            k.push(row(p.slot(0, 0), s));
            v.push(row(p.slot(0, 1), s));
        }
    }
    let past = k.len();
    k.extend(a.iter().map(|r| vec_mat(r, &layer.wk)));
    v.extend(a.iter().map(|r| vec_mat(r, &layer.wv)));

    let mut out = Vec::new();
    for i in 0..tokens.len() {
        let visible = past + i + 1;
        let mut merged = vec![0.0; d];
        for h in 0..heads {
            let cols = h * dh..(h + 1) * dh;
            let scores: Vec<f64> = (0..visible)
                .map(|j| compensated_sum(cols.clone().map(|c| q[i][c] * k[j][c])) / (dh as f64).sqrt())
                .collect();
            let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
            let z = compensated_sum(e.iter().copied());
            for c in cols {
                merged[c] = compensated_sum((0..visible).map(|j| e[j] / z * v[j][c]));
            }
        }
        let attn = vec_mat(&merged, &layer.wo);
        let hres: Vec<f64> = x[i].iter().zip(&attn).map(|(a, b)| a + b).collect();
        let f = layer_norm(&hres, &layer.ln2_g, &layer.ln2_b);
        let f: Vec<f64> = vec_mat(&f, &layer.w1)
            .iter()
            .zip(layer.b1.data())
            .map(|(a, b)| gelu(a + b))
            .collect();
        let f: Vec<f64> = vec_mat(&f, &layer.w2)
            .iter()
            .zip(layer.b2.data())
            .map(|(a, b)| a + b)
            .collect();
        let y: Vec<f64> = hres.iter().zip(&f).map(|(a, b)| a + b).collect();
        let hidden = layer_norm(&y, &lm.lnf_g, &lm.lnf_b);
        out.push(vec_mat(&hidden, &lm.w_out));
    }
    out
}

fn one_layer(prefix_len: usize, seed: u64) -> LanguageModel<f64> {
    let cfg = LMConfig {
        vocab_size: 7,
        d_model: 4,
        n_layers: 1,
        n_heads: 2,
        d_ff: 6,
        context_len: 8,
        prefix_len,
    };
    let mut lm = LanguageModel::init(cfg, seed).unwrap();
    // Non-trivial norms and biases so every parameter matters.
    let mut r = rng(seed + 100);
    for t in lm.params_mut() {
        for x in t.data_mut() {
            *x += r.random_range(-0.3..0.3);
        }
    }
    lm
}

#[test]
fn one_layer_forward_matches_straight_line_reference() {
    for seed in 0..5 {
        let lm = one_layer(0, seed);
        let tokens = [3, 5];
        let (logits, _) = lm.view().forward(&tokens).unwrap();
        let expected = reference_logits(&lm, None, &tokens);
        for (i, exp) in expected.iter().enumerate() {
            for (a, b) in logits.row(i).iter().zip(exp) {
                assert!((a - b).abs() < 1e-10, "seed {seed} position {i}: {a} vs {b}");
            }
        }
    }
}

#[test]
fn one_layer_prefix_forward_matches_reference() {
    let lm = one_layer(2, 9);
    let prefix = PrefixState::random(lm.config(), 0.8, &mut rng(3));
    let tokens = [1, 6];
    let (logits, cache) = lm.view().with_prefix(&prefix).unwrap().forward(&tokens).unwrap();
    let expected = reference_logits(&lm, Some(&prefix), &tokens);
    for (i, exp) in expected.iter().enumerate() {
        for (a, b) in logits.row(i).iter().zip(exp) {
            assert!((a - b).abs() < 1e-10);
        }
    }
    assert_eq!(cache.positions(), 4);
    assert_eq!(cache.prefix_len, 2);
}

#[test]
fn init_is_reproducible_and_seed_sensitive() {
    let cfg = tiny_config(17, 3);
    let a = LanguageModel::<f64>::init(cfg, 4).unwrap();
    let b = LanguageModel::<f64>::init(cfg, 4).unwrap();
    let c = LanguageModel::<f64>::init(cfg, 5).unwrap();
    assert_eq!(a, b);
    assert_ne!(a.tok_emb.data(), c.tok_emb.data());
    assert_eq!(a.w_out.shape(), &[8, 17]);
}

#[test]
fn empty_prefix_is_bit_identical_to_bare_model() {
    let lm = tiny_lm(13, 0, 2);
    let empty = PrefixState::zeros(lm.config());
    let tokens = [1, 4, 9, 2, 7];
    let (bare, _) = lm.view().forward(&tokens).unwrap();
    let (with, _) = lm.view().with_prefix(&empty).unwrap().forward(&tokens).unwrap();
    let bits = |t: &Tensor<f64>| t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&bare), bits(&with));
}

#[test]
fn zero_prefix_still_changes_logits() {
    let lm = tiny_lm(13, 4, 2);
    let zeros = PrefixState::zeros(lm.config());
    let tokens = [1, 4, 9];
    let (bare, _) = lm.view().forward(&tokens).unwrap();
    let (with, _) = lm.view().with_prefix(&zeros).unwrap().forward(&tokens).unwrap();
    assert_ne!(bare.data(), with.data());
}

#[test]
fn every_content_position_attends_to_all_ten_slots() {
    let cfg = LMConfig {
        prefix_len: 10,
        ..tiny_config(13, 10)
    };
    let lm = LanguageModel::<f64>::init(cfg, 6).unwrap();
    let base = PrefixState::random(&cfg, 0.5, &mut rng(1));
    let tokens = [1, 3, 5, 7, 9];
    let (ref_logits, cache) = lm.view().with_prefix(&base).unwrap().forward(&tokens).unwrap();
    assert_eq!(cache.positions(), 15);
    let flat = base.flatten();
    let d = cfg.d_model;
    for slot in 0..10 {
        let mut moved = base.clone();
        let mut f = flat.clone();
        // Value row of this slot in the first layer.
        let offset = 10 * d + slot * d;
        f[offset] += 1.0;
        moved.assign_flat(&f).unwrap();
        let (logits, _) = lm.view().with_prefix(&moved).unwrap().forward(&tokens).unwrap();
        for i in 0..tokens.len() {
            assert_ne!(
                logits.row(i),
                ref_logits.row(i),
                "slot {slot} invisible at position {i}"
            );
        }
    }
}

#[test]
fn cached_decoding_matches_recomputation() {
    for seed in 0..4 {
        let lm = tiny_lm(19, 3, seed);
        let prefix = PrefixState::random(lm.config(), 0.5, &mut rng(seed));
        for decode in [
            DecodeConfig::greedy(12),
            DecodeConfig {
                max_new_tokens: 12,
                seed: seed + 7,
                ..DecodeConfig::default()
            },
        ] {
            let view = lm.view().with_prefix(&prefix).unwrap();
            let full = generate_full(view, &[1, 2], &decode).unwrap();
            let cached = generate_cached(view, &[1, 2], &decode).unwrap();
            assert_eq!(full, cached);
        }
    }
}

#[test]
fn incremental_logits_match_full_forward() {
    let lm = tiny_lm(19, 3, 8);
    let prefix = PrefixState::random(lm.config(), 0.5, &mut rng(8));
    let view = lm.view().with_prefix(&prefix).unwrap();
    let tokens: Vec<TokenId> = vec![1, 5, 9, 12, 3, 3];
    let mut dec = IncrementalDecoder::new(view);
    for i in 0..tokens.len() {
        let inc = dec.feed(&tokens[i..=i]).unwrap();
        let full = view.next_logits(&tokens[..=i]).unwrap();
        for (a, b) in inc.iter().zip(&full) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn forward_is_deterministic() {
    let lm = tiny_lm(11, 2, 1);
    let a = lm.view().forward(&[1, 2, 3]).unwrap();
    let b = lm.view().forward(&[1, 2, 3]).unwrap();
    assert_eq!(a, b);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn logits_ignore_later_tokens(
        tokens in prop::collection::vec(0u32..11, 2..10),
        replacement in prop::collection::vec(0u32..11, 10),
        cut in 0usize..9,
    ) {
        let lm = tiny_lm(11, 2, 3);
        let prefix = PrefixState::random(lm.config(), 0.5, &mut rng(2));
        let view = lm.view().with_prefix(&prefix).unwrap();
        let t = cut % tokens.len();
        let mut changed = tokens.clone();
        for (i, x) in changed.iter_mut().enumerate().skip(t + 1) {
            *x = replacement[i];
        }
        let (a, _) = view.forward(&tokens).unwrap();
        let (b, _) = view.forward(&changed).unwrap();
        for i in 0..=t {
            prop_assert_eq!(a.row(i), b.row(i));
        }
    }

    #[test]
    fn logits_rows_normalize(tokens in prop::collection::vec(0u32..11, 1..12)) {
        let lm = tiny_lm(11, 0, 4);
        let (logits, _) = lm.view().forward(&tokens).unwrap();
        for i in 0..tokens.len() {
            let s: f64 = ppc_core::tape::softmax(logits.row(i)).iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-9);
        }
    }
}
