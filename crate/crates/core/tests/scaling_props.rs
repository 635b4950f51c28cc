use ftkn_core::geometry::{Box7, PAD_ID};
use ftkn_core::graph::Graph;
use ftkn_core::memory::point_id;
use ftkn_core::params::ParamStore;
use ftkn_core::scaling::{
    ad_mhsa, condense_lengths, gather_head_rows, gumbel_gates, gumbel_mask_scores, keep_count, logistic_noise,
    random_select, select_topk, supervised_score, supervised_target, token_scores, AdaptiveScalingLayer, Scorer,
    ScoringContext, SspCondenser, TokenSequence, Tokens,
};
use ftkn_core::tensor::{sigmoid, Tensor};
use ftkn_core::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_tokens(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Tensor {
    Tensor::matrix(n, d, (0..n * d).map(|_| rng.random_range(-1.5..1.5)).collect())
}

fn layer(seed: u64, d: usize, heads: usize, scorer: Scorer) -> (ParamStore, AdaptiveScalingLayer) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let l = AdaptiveScalingLayer::new(&mut store, "s", d, heads, 2 * d, scorer, &mut rng).unwrap();
    (store, l)
}

fn ids_with_padding(n: usize, padded: &[bool]) -> Vec<i64> {
    (0..n).map(|i| if padded[i] { PAD_ID } else { point_id(0, i) }).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn compressed_rows_equal_full_attention_rows(
        seed in 0u64..10_000,
        n in 1usize..40,
        beta in 0.05f64..1.0,
        pad_frac in 0.0f64..0.6,
    ) {
        let (store, l) = layer(seed, 8, 2, Scorer::Adaptive);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
        let mut padded: Vec<bool> = (0..n).map(|_| rng.random_bool(pad_frac)).collect();
        padded[0] = false;
        let x = random_tokens(&mut rng, n, 8);
        let mut g = Graph::inference(&store);
        let xv = g.constant(x);
        let tokens = Tokens { x: xv, point_ids: ids_with_padding(n, &padded), frames: vec![0; n], labels: None };
        let full = l.forward_full(&mut g, &tokens, false).unwrap();
        let keep = keep_count(n, beta);
        let mut ctx = ScoringContext::new(Scorer::Adaptive, &mut rng);
        let out = l.forward(&mut g, &tokens, keep, &mut ctx).unwrap();
        prop_assert_eq!(out.kept.len(), keep);
        prop_assert!(out.kept.windows(2).all(|w| w[0] < w[1]));
        let expected = g.value(full).gather_rows(&out.kept).unwrap();
        prop_assert!(g.value(out.tokens.x).max_abs_diff(&expected) <= 1e-12);
        let valid = padded.iter().filter(|p| !**p).count();
        for &i in &out.kept {
            prop_assert!(out.scores[i] < 1.0);
            if keep <= valid {
                prop_assert!(!padded[i], "padding kept while real tokens remain");
                prop_assert!(out.scores[i] > 0.0);
            }
        }
    }

    #[test]
    fn selection_is_permutation_equivariant(seed in 0u64..10_000, n in 2usize..24) {
        let (store, l) = layer(seed, 8, 2, Scorer::Adaptive);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 2);
        let x = random_tokens(&mut rng, n, 8);
        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let ids: Vec<i64> = (0..n).map(|i| point_id(0, i)).collect();
        let run = |x: Tensor, ids: Vec<i64>, rng: &mut ChaCha8Rng| {
            let mut g = Graph::inference(&store);
            let xv = g.constant(x);
            let tokens = Tokens { x: xv, point_ids: ids, frames: vec![0; n], labels: None };
            let mut ctx = ScoringContext::new(Scorer::Adaptive, rng);
            let out = l.forward(&mut g, &tokens, n.div_ceil(2), &mut ctx).unwrap();
            (out.scores, out.tokens.point_ids)
        };
        let (s0, kept0) = run(x.clone(), ids.clone(), &mut rng);
        let px = x.gather_rows(&perm).unwrap();
        let pids: Vec<i64> = perm.iter().map(|&i| ids[i]).collect();
        let (s1, kept1) = run(px, pids, &mut rng);
        for (j, &i) in perm.iter().enumerate() {
            prop_assert!((s1[j] - s0[i]).abs() < 1e-12);
        }
        let mut sorted0 = s0.clone();
        sorted0.sort_by(|a, b| b.total_cmp(a));
        let k = n.div_ceil(2);
        if k < n && (sorted0[k - 1] - sorted0[k]).abs() > 1e-9 {
            let mut a = kept0.clone();
            let mut b = kept1.clone();
            a.sort_unstable();
            b.sort_unstable();
            prop_assert_eq!(a, b);
        }
    }

    #[test]
    fn layer_lengths_follow_the_closed_form(n in 1usize..500, p in 1u64..10, layers in 1usize..6) {
        let beta = p as f64 / 10.0;
        let got = condense_lengths(n, 1, beta, Some(layers)).unwrap();
        for (l, &len) in got.iter().enumerate() {
            let num = (n as u128) * (p as u128).pow(l as u32 + 1);
            let den = 10u128.pow(l as u32 + 1);
            let exact = num.div_ceil(den).max(1) as usize;
            prop_assert_eq!(len, exact);
        }
    }

    #[test]
    fn supervised_score_is_monotone(a in 0.0f64..3.0, b in 0.0f64..3.0, eta in 0.01f64..0.99) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(supervised_target(lo, eta) >= supervised_target(hi, eta));
        let y = supervised_target(a, eta);
        prop_assert!((0.0..=1.0).contains(&y));
    }

    #[test]
    fn topk_keeps_the_best(scores in proptest::collection::vec(0.0f64..1.0, 1..50), frac in 0.0f64..1.0) {
        let k = ((scores.len() as f64 * frac) as usize).min(scores.len());
        let kept = select_topk(&scores, k).unwrap();
        prop_assert_eq!(kept.len(), k);
        let worst_kept = kept.iter().map(|&i| scores[i]).fold(f64::INFINITY, f64::min);
        for i in 0..scores.len() {
            if !kept.contains(&i) {
                prop_assert!(scores[i] <= worst_kept);
            }
        }
    }
}

#[test]
fn scores_match_a_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..20 {
        let (h, nq, nk) = (3, 5, 5);
        let maps = Tensor::matrix(h * nq, nk, (0..h * nq * nk).map(|_| rng.random_range(0.0..1.0)).collect());
        let mask: Vec<bool> = (0..nk).map(|i| i != 2).collect();
        let s = token_scores(&maps, h, &mask).unwrap();
        for i in 0..nk {
            let mut total = 0.0;
            for j in 0..nq {
                let mut m = f64::NEG_INFINITY;
                for hh in 0..h {
                    m = m.max(maps.at(hh * nq + j, i));
                }
                total += m;
            }
            let want = if mask[i] { 1.0 / (1.0 + (-total).exp()) } else { 0.0 };
            assert!((s[i] - want).abs() < 1e-15);
        }
        let idx = [4, 0, 2];
        let g = gather_head_rows(&maps, h, &idx).unwrap();
        for hh in 0..h {
            for (r, &i) in idx.iter().enumerate() {
                for c in 0..nk {
                    assert_eq!(g.at(hh * idx.len() + r, c), maps.at(hh * nq + i, c));
                }
            }
        }
    }
}

#[test]
fn gather_identity_and_last_row() {
    let a = Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0], &[5.0, 6.0]]);
    assert_eq!(gather_head_rows(&a, 1, &[0, 1, 2]).unwrap(), a);
    assert_eq!(gather_head_rows(&a, 1, &[2]).unwrap().data(), &[5.0, 6.0]);
}

#[test]
fn no_compression_equals_standard_block() {
    let (store, l) = layer(9, 8, 2, Scorer::Adaptive);
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let x = random_tokens(&mut rng, 12, 8);
    let seq = TokenSequence::new(x.clone(), (0..12).map(|i| point_id(3, i)).collect(), 3).unwrap();
    let (out, kept) = ad_mhsa(&store, &l, &seq, 1.0, &mut rng).unwrap();
    assert_eq!(kept, (0..12).collect::<Vec<_>>());
    let mut g = Graph::inference(&store);
    let xv = g.constant(x);
    let tokens = Tokens { x: xv, point_ids: seq.point_ids.clone(), frames: vec![3; 12], labels: None };
    let full = l.forward_full(&mut g, &tokens, false).unwrap();
    assert_eq!(&out.features, g.value(full));
    assert_eq!(out.point_ids, seq.point_ids);
}

#[test]
fn default_sequence_halves() {
    let (store, l) = layer(11, 16, 4, Scorer::Adaptive);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let seq = TokenSequence::new(random_tokens(&mut rng, 192, 16), (0..192).map(|i| point_id(0, i)).collect(), 0).unwrap();
    let (out, kept) = ad_mhsa(&store, &l, &seq, 0.5, &mut rng).unwrap();
    assert_eq!(out.len(), 96);
    assert_eq!(kept.len(), 96);
}

#[test]
fn ssp_trace_and_survivors() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut store = ParamStore::new();
    let lengths = condense_lengths(192, 48, 0.5, None).unwrap();
    let ssp = SspCondenser::new(&mut store, "ssp", 16, 4, 32, Scorer::Adaptive, lengths, &mut rng).unwrap();
    let mut g = Graph::inference(&store);
    let x = g.constant(random_tokens(&mut rng, 192, 16));
    let ids: Vec<i64> = (0..192).map(|i| point_id(5, i * 2)).collect();
    let tokens = Tokens { x, point_ids: ids.clone(), frames: vec![0; 192], labels: None };
    let mut ctx = ScoringContext::new(Scorer::Adaptive, &mut rng);
    let out = ssp.forward(&mut g, tokens, &mut ctx).unwrap();
    assert_eq!(out.trace, vec![192, 96, 48]);
    let mut survivors = out.tokens.point_ids.clone();
    assert!(survivors.iter().all(|id| ids.contains(id)));
    survivors.dedup();
    assert_eq!(survivors.len(), 48);
    assert_eq!(out.kept.iter().map(|&i| ids[i]).collect::<Vec<_>>(), out.tokens.point_ids);
}

#[test]
fn all_padding_is_an_empty_region() {
    let (store, l) = layer(14, 8, 2, Scorer::Adaptive);
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let mut g = Graph::inference(&store);
    let x = g.constant(Tensor::zeros(vec![4, 8]));
    let tokens = Tokens { x, point_ids: vec![PAD_ID; 4], frames: vec![0; 4], labels: None };
    let mut ctx = ScoringContext::new(Scorer::Adaptive, &mut rng);
    assert_eq!(l.forward(&mut g, &tokens, 2, &mut ctx).unwrap_err(), Error::EmptyRegion);
    ctx.allow_empty = true;
    assert_eq!(l.forward(&mut g, &tokens, 2, &mut ctx).unwrap().tokens.len(), 2);
}

#[test]
fn supervised_score_examples_and_continuity() {
    assert_eq!(supervised_target(0.7, 0.2), 1.0);
    assert_eq!(supervised_target(1.3, 0.2), 0.0);
    assert!((supervised_target(1.1, 0.2) - 0.25).abs() < 1e-12);
    for edge in [0.8, 1.2] {
        let gap = (supervised_target(edge - 1e-12, 0.2) - supervised_target(edge + 1e-12, 0.2)).abs();
        assert!(gap < 1e-9, "jump {gap} at {edge}");
    }
    let b = Box7::new([0.0; 3], [2.0, 2.0, 2.0], 0.0).unwrap();
    assert_eq!(supervised_score([0.5, 0.0, 0.0], &b, 0.2), 1.0);
    assert!((supervised_score([1.1, 0.0, 0.0], &b, 0.2) - 0.25).abs() < 1e-12);
}

#[test]
fn gumbel_gate_expectation_matches_the_logit_probability() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let logits = [-1.5, -0.2, 0.0, 0.7, 2.0];
    let draws = 100_000;
    let mut counts = [0usize; 5];
    for _ in 0..draws {
        let noise: Vec<f64> = logits.iter().map(|_| logistic_noise(&mut rng)).collect();
        let (_, hard) = gumbel_gates(&logits, &noise, 1.0);
        for (c, h) in counts.iter_mut().zip(hard) {
            *c += h as usize;
        }
    }
    for (l, c) in logits.iter().zip(counts) {
        let freq = c as f64 / draws as f64;
        // softmax over (keep, drop) logits (l, 0) at temperature 1
        assert!((freq - sigmoid(*l)).abs() < 1e-2, "logit {l}: {freq}");
    }
}

#[test]
fn gumbel_limits_and_inference_determinism() {
    let logits = [0.3, -0.4, 1.2, -2.0];
    let noise = [0.1, 0.2, -0.5, 1.0];
    let (soft, hard) = gumbel_gates(&logits, &noise, 1e-6);
    for (s, h) in soft.iter().zip(&hard) {
        assert!((s - h).abs() < 1e-12);
    }
    let (_, hard0) = gumbel_gates(&logits, &[0.0; 4], 1e-6);
    assert_eq!(hard0, vec![1.0, 0.0, 1.0, 0.0]);
    let mut r1 = ChaCha8Rng::seed_from_u64(1);
    let mut r2 = ChaCha8Rng::seed_from_u64(999);
    let a = gumbel_mask_scores(&logits, 2, 1.0, false, &mut r1).unwrap();
    let b = gumbel_mask_scores(&logits, 2, 1.0, false, &mut r2).unwrap();
    assert_eq!(a, b);
    assert_eq!(a, vec![true, false, true, false]);
    assert!(gumbel_mask_scores(&logits, 2, 0.0, true, &mut r1).is_err());
}

#[test]
fn gumbel_layer_trains_and_infers() {
    let (store, l) = layer(17, 8, 2, Scorer::GumbelMask);
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let x = random_tokens(&mut rng, 10, 8);
    let ids: Vec<i64> = (0..10).map(|i| point_id(0, i)).collect();
    let mut g = Graph::new(&store);
    let xv = g.constant(x.clone());
    let tokens = Tokens { x: xv, point_ids: ids.clone(), frames: vec![0; 10], labels: None };
    let mut ctx = ScoringContext::new(Scorer::GumbelMask, &mut rng);
    let out = l.forward(&mut g, &tokens, 5, &mut ctx).unwrap();
    let s = g.sum(out.tokens.x);
    let grads = g.backward(s).unwrap();
    let head = l.score_head.as_ref().unwrap();
    assert!(grads.params().any(|(id, gr)| id == head.weight && gr.iter().any(|v| *v != 0.0)));
    let infer = |rng: &mut ChaCha8Rng| {
        let mut g = Graph::inference(&store);
        let xv = g.constant(x.clone());
        let tokens = Tokens { x: xv, point_ids: ids.clone(), frames: vec![0; 10], labels: None };
        let mut ctx = ScoringContext::new(Scorer::GumbelMask, rng);
        l.forward(&mut g, &tokens, 5, &mut ctx).unwrap().kept
    };
    assert_eq!(infer(&mut ChaCha8Rng::seed_from_u64(1)), infer(&mut ChaCha8Rng::seed_from_u64(2)));
}

#[test]
fn random_selection_is_uniform() {
    let mask = vec![true; 10];
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    assert_eq!(random_select(&mask, 10, &mut rng).unwrap(), (0..10).collect::<Vec<_>>());
    let a = random_select(&mask, 4, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    let b = random_select(&mask, 4, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    assert_eq!(a, b);
    let mut mask = vec![true; 12];
    mask[3] = false;
    mask[7] = false;
    let trials = 10_000;
    let mut counts = [0usize; 12];
    for _ in 0..trials {
        let kept = random_select(&mask, 4, &mut rng).unwrap();
        assert!(kept.windows(2).all(|w| w[0] < w[1]));
        for i in kept {
            counts[i] += 1;
        }
    }
    assert_eq!(counts[3] + counts[7], 0);
    let p = 4.0 / 10.0;
    let mean = trials as f64 * p;
    let sigma = (trials as f64 * p * (1.0 - p)).sqrt();
    for (i, &c) in counts.iter().enumerate() {
        if mask[i] {
            assert!((c as f64 - mean).abs() <= 3.0 * sigma, "token {i}: {c}");
        }
    }
    let short = random_select(&[true, false, true, false], 3, &mut rng).unwrap();
    assert_eq!(short, vec![0, 1, 2]);
}
