//! Central finite-difference gradient checking and the standard suite of
//! checks covering every differentiable op and composite block.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::decoder::{refinement_loss, DetectionHead, DualDecoder, LossConfig, RefineTarget};
use crate::error::Result;
use crate::fusion::{FusionSchedule, GroupStrategy, Igf, MspCondenser};
use crate::geometry::{Box7, PointSet, PAD_ID};
use crate::graph::{Graph, Var};
use crate::layers::{LayerNorm, Linear, Mlp, MultiHeadAttention};
use crate::memory::point_id;
use crate::model::{FasterModel, FrameSample, ModelConfig, ProposalSample};
use crate::params::{ParamId, ParamStore};
use crate::scaling::{AdaptiveScalingLayer, Scorer, ScoringContext, Tokens};
use crate::tensor::Tensor;

/// Finite-difference step.
pub const STEP: f64 = 1e-5;
/// Coordinates checked per tensor; larger tensors are subsampled.
pub const MAX_COORDS: usize = 40;
/// Acceptance threshold on the relative error.
pub const TOLERANCE: f64 = 1e-5;

fn norm(v: &[f64]) -> f64 {
    libm::sqrt(v.iter().map(|a| a * a).sum())
}

fn coords(rng: &mut ChaCha8Rng, len: usize) -> Vec<usize> {
    if len <= MAX_COORDS {
        (0..len).collect()
    } else {
        let mut v = index::sample(rng, len, MAX_COORDS).into_vec();
        v.sort_unstable();
        v
    }
}

/// Worst per-tensor relative error of the analytic gradient of `f`.
///
/// The output of `f` is contracted with a random weighting. Every input
/// and every parameter of `store` is checked with central differences.
/// Each tensor's error is `||a - n|| / max(||a||, ||n||, floor)` over its
/// checked coordinates, with `floor = max(1e-6, 1e-3 * largest tensor
/// gradient norm)`; the floor absorbs difference roundoff (about 1e-11) on
/// gradients that are exactly zero or orders of magnitude below the rest.
pub fn grad_check<F>(store: &ParamStore, inputs: &[Tensor], seed: u64, f: F) -> Result<f64>
where
    F: Fn(&mut Graph<'_>, &[Var]) -> Result<Var>,
{
    Ok(grad_report(store, inputs, seed, f)?.into_iter().map(|(_, e)| e).fold(0.0, f64::max))
}

/// Per-tensor errors behind [`grad_check`], inputs first.
pub fn grad_report<F>(store: &ParamStore, inputs: &[Tensor], seed: u64, f: F) -> Result<Vec<(String, f64)>>
where
    F: Fn(&mut Graph<'_>, &[Var]) -> Result<Var>,
{
    let mut r = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut g = Graph::new(store);
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let w: Vec<f64> = (0..g.value(out).len()).map(|_| r.random_range(-1.0..1.0)).collect();
    let grads = g.backward_with(out, &w)?;
    let input_grads: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| grads.wrt(v).map_or(vec![0.0; t.len()], <[f64]>::to_vec))
        .collect();
    let param_grads: BTreeMap<ParamId, Vec<f64>> = grads.params().map(|(id, gr)| (id, gr.to_vec())).collect();
    drop(g);

    let eval = |store: &ParamStore, inputs: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new(store);
        let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).data().iter().zip(&w).map(|(a, b)| a * b).sum())
    };

    let mut checked: Vec<(String, Vec<f64>, Vec<f64>)> = Vec::new();
    for (i, t) in inputs.iter().enumerate() {
        let idx = coords(&mut r, t.len());
        let mut numeric = Vec::with_capacity(idx.len());
        for &c in &idx {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[c] += STEP;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[c] -= STEP;
            numeric.push((eval(store, &plus)? - eval(store, &minus)?) / (2.0 * STEP));
        }
        let analytic = idx.iter().map(|&c| input_grads[i][c]).collect();
        checked.push((format!("input {i}"), analytic, numeric));
    }
    for (id, p) in store.iter() {
        let idx = coords(&mut r, p.tensor.len());
        let mut numeric = Vec::with_capacity(idx.len());
        for &c in &idx {
            let mut plus = store.clone();
            plus.tensor_mut(id).data_mut()[c] += STEP;
            let mut minus = store.clone();
            minus.tensor_mut(id).data_mut()[c] -= STEP;
            numeric.push((eval(&plus, inputs)? - eval(&minus, inputs)?) / (2.0 * STEP));
        }
        let analytic = idx.iter().map(|&c| param_grads.get(&id).map_or(0.0, |g| g[c])).collect();
        checked.push((p.name.clone(), analytic, numeric));
    }
    let scale = checked.iter().map(|(_, a, n)| norm(a).max(norm(n))).fold(0.0, f64::max);
    let floor = (1e-3 * scale).max(1e-6);
    Ok(checked
        .into_iter()
        .map(|(name, a, n)| {
            let diff: Vec<f64> = a.iter().zip(&n).map(|(x, y)| x - y).collect();
            (name, norm(&diff) / norm(&a).max(norm(&n)).max(floor))
        })
        .collect())
}

/// One named check, run per seed.
pub struct CheckCase {
    pub name: &'static str,
    pub run: fn(u64) -> Result<f64>,
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn tensors(seed: u64, shapes: &[(usize, usize)]) -> Vec<Tensor> {
    let mut r = rng(seed);
    shapes
        .iter()
        .map(|&(a, b)| Tensor::matrix(a, b, (0..a * b).map(|_| r.random_range(-1.0..1.0)).collect()))
        .collect()
}

fn inputs_only<F>(seed: u64, shapes: &[(usize, usize)], f: F) -> Result<f64>
where
    F: Fn(&mut Graph<'_>, &[Var]) -> Result<Var>,
{
    grad_check(&ParamStore::new(), &tensors(seed, shapes), seed, f)
}

fn with_params<T>(seed: u64, build: impl FnOnce(&mut ParamStore, &mut ChaCha8Rng) -> Result<T>) -> Result<(ParamStore, T)> {
    let mut r = rng(seed + 1000);
    let mut store = ParamStore::new();
    let m = build(&mut store, &mut r)?;
    Ok((store, m))
}

fn token_ids(n: usize, padded: &[usize]) -> Vec<i64> {
    (0..n).map(|i| if padded.contains(&i) { PAD_ID } else { point_id(0, i) }).collect()
}

fn scaling_case(scorer: Scorer, seed: u64) -> Result<f64> {
    let (store, layer) = with_params(seed, |s, r| AdaptiveScalingLayer::new(s, "s", 4, 2, 8, scorer, r))?;
    let labels: Vec<f64> = (0..6).map(|i| (i % 3) as f64 / 2.0).collect();
    grad_check(&store, &tensors(seed, &[(6, 4)]), seed, |g, v| {
        let tokens = Tokens { x: v[0], point_ids: token_ids(6, &[4]), frames: vec![0; 6], labels: Some(labels.clone()) };
        let mut r = rng(seed + 7);
        let mut ctx = ScoringContext::new(scorer, &mut r);
        let out = layer.forward(g, &tokens, 3, &mut ctx)?;
        let flat = g.reshape(out.tokens.x, 1, 12)?;
        let mut parts = vec![flat];
        parts.extend(ctx.aux_losses.iter().copied());
        g.concat_cols(&parts)
    })
}

fn tiny_sample(cfg: &ModelConfig, seed: u64) -> Result<ProposalSample> {
    let mut r = rng(seed);
    let b = Box7::new([3.0, 1.0, 0.5], [4.0, 2.0, 1.5], 0.2)?;
    let mut pts = |frame: usize, n: usize| {
        let mut s = PointSet::new(cfg.extra_dim);
        for i in 0..n {
            let p = [
                b.center[0] + r.random_range(-2.0..2.0),
                b.center[1] + r.random_range(-1.0..1.0),
                r.random_range(0.0..1.2),
            ];
            let e = r.random_range(0.0..1.0);
            s.push(p, &[e], 0.0, point_id(frame, i));
        }
        s
    };
    let current = pts(0, cfg.current_samples());
    let history = (1..cfg.frames)
        .map(|t| FrameSample { points: pts(t, cfg.k), reference: b, delta_t: 0.1 * t as f64, labels: None })
        .collect();
    Ok(ProposalSample { proposal: b, current, current_labels: None, history })
}

/// Every differentiable op and composite block.
pub fn suite() -> Vec<CheckCase> {
    vec![
        CheckCase { name: "linear", run: |s| inputs_only(s, &[(3, 4), (4, 5), (1, 5)], |g, v| g.linear(v[0], v[1], Some(v[2]))) },
        CheckCase { name: "matmul", run: |s| inputs_only(s, &[(3, 4), (4, 2)], |g, v| g.matmul(v[0], v[1])) },
        CheckCase { name: "add_broadcast", run: |s| inputs_only(s, &[(3, 4), (1, 4)], |g, v| g.add(v[0], v[1])) },
        CheckCase { name: "add", run: |s| inputs_only(s, &[(3, 4), (3, 4)], |g, v| g.add(v[0], v[1])) },
        CheckCase { name: "scale", run: |s| inputs_only(s, &[(3, 4)], |g, v| Ok(g.scale(v[0], -1.7))) },
        CheckCase {
            name: "add_const",
            run: |s| inputs_only(s, &[(2, 3)], |g, v| g.add_const(v[0], &[0.1, 0.2, 0.3, -0.4, 0.5, 0.6])),
        },
        CheckCase { name: "relu", run: |s| inputs_only(s, &[(4, 5)], |g, v| Ok(g.relu(v[0]))) },
        CheckCase { name: "sigmoid", run: |s| inputs_only(s, &[(4, 5)], |g, v| Ok(g.sigmoid(v[0]))) },
        CheckCase { name: "mask_rows", run: |s| inputs_only(s, &[(4, 3)], |g, v| g.mask_rows(v[0], &[true, false, true, true])) },
        CheckCase { name: "softmax_rows", run: |s| inputs_only(s, &[(4, 5)], |g, v| Ok(g.softmax_rows(v[0]))) },
        CheckCase { name: "layer_norm", run: |s| inputs_only(s, &[(3, 6), (1, 6), (1, 6)], |g, v| g.layer_norm(v[0], v[1], v[2])) },
        CheckCase { name: "max_pool_rows", run: |s| inputs_only(s, &[(5, 3)], |g, v| g.max_pool_rows(v[0])) },
        CheckCase { name: "gather_rows", run: |s| inputs_only(s, &[(4, 3)], |g, v| g.gather_rows(v[0], &[3, 0, 3, 1])) },
        CheckCase { name: "concat_cols", run: |s| inputs_only(s, &[(3, 2), (3, 4)], |g, v| g.concat_cols(&[v[0], v[1]])) },
        CheckCase { name: "concat_rows", run: |s| inputs_only(s, &[(2, 3), (4, 3)], |g, v| g.concat_rows(&[v[0], v[1]])) },
        CheckCase {
            name: "reshape",
            run: |s| {
                inputs_only(s, &[(1, 6)], |g, v| {
                    let r = g.reshape(v[0], 3, 2)?;
                    g.gather_rows(r, &[2, 0])
                })
            },
        },
        CheckCase {
            name: "attention_maps",
            run: |s| {
                inputs_only(s, &[(3, 4), (5, 4)], |g, v| {
                    g.attention_maps(v[0], v[1], 2, Some(&[true, true, false, true, true]), None)
                })
            },
        },
        CheckCase {
            name: "attention_maps_gated",
            run: |s| {
                let mut t = tensors(s, &[(3, 4), (5, 4)]);
                let mut r = rng(s + 100);
                t.push(Tensor::matrix(5, 1, (0..5).map(|_| r.random_range(0.2..1.0)).collect()));
                grad_check(&ParamStore::new(), &t, s, |g, v| g.attention_maps(v[0], v[1], 2, None, Some(v[2])))
            },
        },
        CheckCase {
            name: "attention_apply",
            run: |s| {
                inputs_only(s, &[(3, 4), (5, 4), (5, 4)], |g, v| {
                    let m = g.attention_maps(v[0], v[1], 2, Some(&[true, false, true, true, true]), None)?;
                    g.attention_apply(m, v[2], 2, &[2, 0])
                })
            },
        },
        CheckCase { name: "sum", run: |s| inputs_only(s, &[(3, 3)], |g, v| Ok(g.sum(v[0]))) },
        CheckCase {
            name: "bce_with_logits",
            run: |s| inputs_only(s, &[(4, 1)], |g, v| g.bce_with_logits(v[0], &[0.0, 1.0, 0.3, 0.75])),
        },
        CheckCase {
            name: "smooth_l1",
            run: |s| {
                let mut r = rng(s);
                let x: Vec<f64> = (0..6)
                    .map(|i| {
                        let sign = if i % 2 == 0 { 1.0 } else { -1.0 };
                        let mag = if i < 3 { r.random_range(0.0..0.08) } else { r.random_range(0.2..2.0) };
                        sign * mag
                    })
                    .collect();
                grad_check(&ParamStore::new(), &[Tensor::matrix(1, 6, x)], s, |g, v| g.smooth_l1(v[0], &[0.0; 6], 1.0 / 9.0))
            },
        },
        CheckCase {
            name: "Linear",
            run: |s| {
                let (store, l) = with_params(s, |st, r| Linear::new(st, "l", 4, 3, r))?;
                grad_check(&store, &tensors(s, &[(2, 4)]), s, |g, v| l.forward(g, v[0]))
            },
        },
        CheckCase {
            name: "LayerNorm",
            run: |s| {
                let (store, l) = with_params(s, |st, r| LayerNorm::new(st, "n", 5, r))?;
                grad_check(&store, &tensors(s, &[(3, 5)]), s, |g, v| l.forward(g, v[0]))
            },
        },
        CheckCase {
            name: "Mlp",
            run: |s| {
                let (store, l) = with_params(s, |st, r| Mlp::new(st, "m", 4, 6, 3, r))?;
                grad_check(&store, &tensors(s, &[(3, 4)]), s, |g, v| l.forward(g, v[0]))
            },
        },
        CheckCase {
            name: "MultiHeadAttention",
            run: |s| {
                let (store, a) = with_params(s, |st, r| MultiHeadAttention::new(st, "a", 4, 2, r))?;
                grad_check(&store, &tensors(s, &[(3, 4), (5, 4)]), s, |g, v| {
                    Ok(a.forward(g, v[0], v[1], v[1], Some(&[true, true, true, false, true]))?.0)
                })
            },
        },
        CheckCase { name: "Ad-MHSA adaptive", run: |s| scaling_case(Scorer::Adaptive, s) },
        CheckCase { name: "Ad-MHSA supervised", run: |s| scaling_case(Scorer::Supervised, s) },
        CheckCase { name: "Ad-MHSA random", run: |s| scaling_case(Scorer::Random, s) },
        CheckCase {
            name: "IGF",
            run: |s| {
                let (store, igf) = with_params(s, |st, r| Igf::new(st, "igf", 3, 4, r))?;
                grad_check(&store, &tensors(s, &[(2, 4), (2, 4), (2, 4)]), s, |g, v| igf.forward(g, v))
            },
        },
        CheckCase {
            name: "MSP condenser",
            run: |s| {
                let (store, msp) = with_params(s, |st, r| {
                    let schedule = FusionSchedule::default_for(4, 2, 0.5, 4);
                    MspCondenser::new(st, "msp", &schedule, GroupStrategy::EqualStride, 4, 4, 4, 2, 8, Scorer::Adaptive, r)
                })?;
                grad_check(&store, &tensors(s, &[(4, 4), (4, 4), (4, 4), (4, 4)]), s, |g, v| {
                    let seqs = v
                        .iter()
                        .enumerate()
                        .map(|(f, &x)| Tokens {
                            x,
                            point_ids: (0..4).map(|i| point_id(f, i)).collect(),
                            frames: vec![f; 4],
                            labels: None,
                        })
                        .collect();
                    let mut r = rng(s);
                    let mut ctx = ScoringContext::new(Scorer::Adaptive, &mut r);
                    Ok(msp.forward(g, seqs, true, &mut ctx)?.tokens.x)
                })
            },
        },
        CheckCase {
            name: "dual decoder + loss",
            run: |s| {
                let (store, (dec, head)) =
                    with_params(s, |st, r| Ok((DualDecoder::new(st, "d", 4, 2, r)?, DetectionHead::new(st, "h", 4, r)?)))?;
                let proposal = Box7::new([1.0, 2.0, 0.5], [4.0, 2.0, 1.5], 0.3)?;
                let gt = Box7::new([1.3, 2.2, 0.4], [4.4, 1.8, 1.6], 0.1)?;
                grad_check(&store, &tensors(s, &[(5, 4), (3, 4)]), s, |g, v| {
                    let (_, q_m) = dec.forward(g, v[0], &[true, true, false, true, true], v[1], &[true; 3], true, true)?;
                    let h = head.forward(g, q_m)?;
                    let target = RefineTarget { iou: 0.7, gt: Some(gt) };
                    Ok(refinement_loss(g, h, &proposal, &target, &LossConfig::default())?.0)
                })
            },
        },
        CheckCase {
            name: "full model loss",
            run: |s| {
                let cfg = ModelConfig { d_model: 4, heads: 2, k: 2, oversample: 2, frames: 2, groups: 1, k_out: 2, ..ModelConfig::default() };
                let model = FasterModel::new(cfg.clone(), s)?;
                let sample = tiny_sample(&cfg, s)?;
                let gt = Box7::new([3.2, 1.1, 0.6], [4.2, 2.1, 1.4], 0.25)?;
                grad_check(&model.store, &[], s, |g, _| {
                    let mut r = rng(s);
                    let mut ctx = ScoringContext::new(Scorer::Adaptive, &mut r);
                    Ok(model.loss(g, &sample, &RefineTarget { iou: 0.8, gt: Some(gt) }, &mut ctx)?.0)
                })
            },
        },
    ]
}
