//! Adaptive scaling: attention-derived contribution scores, top-k token
//! selection, and the sequence-shortening attention block built on them.
//!
//! A scaling layer computes full self-attention maps over its input, turns
//! them into one contribution score per token, keeps the `N_s` best tokens
//! and evaluates the attention output only for those rows. The kept rows
//! are identical to the same rows of an uncompressed attention block.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::index;
use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Box7, PAD_ID};
use crate::graph::{Graph, Var};
use crate::layers::{LayerNorm, Linear, Mlp, MultiHeadAttention};
use crate::params::ParamStore;
use crate::tensor::{sigmoid, Tensor};

/// How a scaling layer ranks tokens.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scorer {
    /// Attention received, aggregated over heads and queries.
    #[default]
    Adaptive,
    /// A learned per-token head supervised by point-in-box targets.
    Supervised,
    /// Learned binary gates sampled with Gumbel noise during training.
    GumbelMask,
    /// Uniform random choice among real tokens.
    Random,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingConfig {
    pub heads: usize,
    pub keep_ratio: f64,
    pub scorer: Scorer,
    pub layers: usize,
}

/// Feature rows with their point provenance.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence {
    pub features: Tensor,
    pub point_ids: Vec<i64>,
    pub frame_index: usize,
}

impl TokenSequence {
    pub fn new(features: Tensor, point_ids: Vec<i64>, frame_index: usize) -> Result<Self> {
        if features.rows() != point_ids.len() {
            return Err(Error::Dimension {
                op: "token_sequence",
                detail: format!("{} rows, {} ids", features.rows(), point_ids.len()),
            });
        }
        Ok(Self { features, point_ids, frame_index })
    }

    pub fn len(&self) -> usize {
        self.point_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.point_ids.is_empty()
    }

    pub fn pad_mask(&self) -> Vec<bool> {
        self.point_ids.iter().map(|&i| i != PAD_ID).collect()
    }
}

/// Token rows living on a [`Graph`].
#[derive(Clone, Debug)]
pub struct Tokens {
    pub x: Var,
    pub point_ids: Vec<i64>,
    pub frames: Vec<usize>,
    /// Per-token point-in-box targets, present when a supervised scorer trains.
    pub labels: Option<Vec<f64>>,
}

impl Tokens {
    pub fn len(&self) -> usize {
        self.point_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.point_ids.is_empty()
    }

    pub fn pad_mask(&self) -> Vec<bool> {
        self.point_ids.iter().map(|&i| i != PAD_ID).collect()
    }

    /// Bookkeeping for rows `idx` of this sequence; `x` must be supplied.
    pub fn select_meta(&self, idx: &[usize], x: Var) -> Tokens {
        Tokens {
            x,
            point_ids: idx.iter().map(|&i| self.point_ids[i]).collect(),
            frames: idx.iter().map(|&i| self.frames[i]).collect(),
            labels: self.labels.as_ref().map(|l| idx.iter().map(|&i| l[i]).collect()),
        }
    }

    pub fn to_sequence(&self, g: &Graph<'_>) -> TokenSequence {
        TokenSequence {
            features: g.value(self.x).clone(),
            point_ids: self.point_ids.clone(),
            frame_index: self.frames.first().copied().unwrap_or(0),
        }
    }
}

/// Number of rows kept at ratio `beta`: `ceil(beta * n)`, at least 1.
pub fn keep_count(n: usize, beta: f64) -> usize {
    let x = beta * n as f64;
    (libm::ceil(x - 1e-9) as usize).clamp(1, n.max(1))
}

/// Contribution scores from stacked head maps `(H * N) x N`:
/// `S_i = sigmoid(sum_j max_h A_h[j, i])`, i.e. the attention each token
/// receives as a key. Padded tokens score 0.
pub fn token_scores(maps: &Tensor, heads: usize, pad_mask: &[bool]) -> Result<Vec<f64>> {
    let (hn, nk) = maps.dims2();
    if heads == 0 || hn % heads != 0 {
        return Err(Error::Config(format!("{heads} heads do not divide {hn} map rows")));
    }
    if pad_mask.len() != nk {
        return Err(Error::Dimension { op: "token_scores", detail: format!("{} flags, {nk} keys", pad_mask.len()) });
    }
    let nq = hn / heads;
    let a = maps.data();
    let mut totals = vec![0.0; nk];
    for j in 0..nq {
        for (i, t) in totals.iter_mut().enumerate() {
            let mut best = f64::NEG_INFINITY;
            for h in 0..heads {
                best = best.max(a[(h * nq + j) * nk + i]);
            }
            *t += best;
        }
    }
    Ok(totals
        .into_iter()
        .zip(pad_mask)
        .map(|(t, &valid)| if valid { sigmoid(t) } else { 0.0 })
        .collect())
}

/// Indices of the `n_s` highest scores, ties toward the lower index,
/// returned in ascending index order.
pub fn select_topk(scores: &[f64], n_s: usize) -> Result<Vec<usize>> {
    if n_s > scores.len() {
        return Err(Error::Config(format!("cannot keep {n_s} of {} tokens", scores.len())));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut kept = order[..n_s].to_vec();
    kept.sort_unstable();
    Ok(kept)
}

/// Row gather `A*[i, :] = A[I[i], :]`.
pub fn gather_rows(a: &Tensor, idx: &[usize]) -> Result<Tensor> {
    a.gather_rows(idx)
}

/// Row gather applied to every head of stacked `(H * N) x M` maps.
pub fn gather_head_rows(maps: &Tensor, heads: usize, idx: &[usize]) -> Result<Tensor> {
    let nq = maps.rows() / heads.max(1);
    let rows: Vec<usize> = (0..heads).flat_map(|h| idx.iter().map(move |&i| h * nq + i)).collect();
    if idx.iter().any(|&i| i >= nq) {
        return Err(Error::Dimension { op: "gather_head_rows", detail: format!("index beyond {nq}") });
    }
    maps.gather_rows(&rows)
}

/// Smallest uniform scale `a` of `gt` whose scaled box still contains `p`.
pub fn containment_scale(point: [f64; 3], gt: &Box7) -> f64 {
    let l = gt.to_local(point);
    (0..3).map(|i| l[i].abs() / (0.5 * gt.size[i])).fold(0.0, f64::max)
}

/// Soft point-in-box target with transition band `eta` around the surface.
pub fn supervised_target(a: f64, eta: f64) -> f64 {
    if a < 1.0 - eta {
        1.0
    } else if a > 1.0 + eta {
        0.0
    } else {
        (1.0 + eta - a) / (2.0 * eta)
    }
}

pub fn supervised_score(point: [f64; 3], gt: &Box7, eta: f64) -> f64 {
    supervised_target(containment_scale(point, gt), eta)
}

/// Logistic noise: the difference of two standard Gumbel draws.
pub fn logistic_noise<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    let u: f64 = rng.random_range(1e-12..1.0 - 1e-12);
    libm::log(u) - libm::log(1.0 - u)
}

/// Binary Gumbel-softmax gates for keep logits. Returns `(soft, hard)` with
/// `soft = sigmoid((logit + noise) / tau)` and `hard = [soft > 0.5]`.
pub fn gumbel_gates(logits: &[f64], noise: &[f64], tau: f64) -> (Vec<f64>, Vec<f64>) {
    let soft: Vec<f64> = logits.iter().zip(noise).map(|(l, n)| sigmoid((l + n) / tau)).collect();
    let hard = logits
        .iter()
        .zip(noise)
        .map(|(l, n)| if l + n > 0.0 { 1.0 } else { 0.0 })
        .collect();
    (soft, hard)
}

/// Keep decisions from gate logits. Training draws Gumbel noise; inference
/// keeps the `n_s` highest logits deterministically.
pub fn gumbel_mask_scores<R: Rng + ?Sized>(
    logits: &[f64],
    n_s: usize,
    tau: f64,
    training: bool,
    rng: &mut R,
) -> Result<Vec<bool>> {
    if !(tau > 0.0) {
        return Err(Error::Config("gumbel temperature must be positive".into()));
    }
    if training {
        let noise: Vec<f64> = logits.iter().map(|_| logistic_noise(rng)).collect();
        let (_, hard) = gumbel_gates(logits, &noise, tau);
        Ok(hard.into_iter().map(|h| h > 0.5).collect())
    } else {
        let kept = select_topk(logits, n_s)?;
        let mut out = vec![false; logits.len()];
        kept.into_iter().for_each(|i| out[i] = true);
        Ok(out)
    }
}

/// Uniform choice of `n_s` real tokens, ascending; padding fills any shortfall.
pub fn random_select<R: Rng + ?Sized>(pad_mask: &[bool], n_s: usize, rng: &mut R) -> Result<Vec<usize>> {
    if n_s > pad_mask.len() {
        return Err(Error::Config(format!("cannot keep {n_s} of {} tokens", pad_mask.len())));
    }
    let real: Vec<usize> = (0..pad_mask.len()).filter(|&i| pad_mask[i]).collect();
    let mut kept: Vec<usize> = if real.len() <= n_s {
        let mut k = real.clone();
        k.extend((0..pad_mask.len()).filter(|&i| !pad_mask[i]).take(n_s - real.len()));
        k
    } else {
        index::sample(rng, real.len(), n_s).into_iter().map(|i| real[i]).collect()
    };
    kept.sort_unstable();
    Ok(kept)
}

/// Per-forward state shared by the scaling layers.
pub struct ScoringContext<'r> {
    pub scorer: Scorer,
    pub tau: f64,
    pub rng: &'r mut dyn RngCore,
    /// Treat an all-padding sequence as unmasked instead of failing.
    pub allow_empty: bool,
    pub aux_losses: Vec<Var>,
}

impl<'r> ScoringContext<'r> {
    pub fn new(scorer: Scorer, rng: &'r mut dyn RngCore) -> Self {
        Self { scorer, tau: 1.0, rng, allow_empty: false, aux_losses: Vec::new() }
    }
}

/// Output of one scaling layer.
#[derive(Clone, Debug)]
pub struct ScaledTokens {
    pub tokens: Tokens,
    /// Positions of the kept rows in the layer input, ascending.
    pub kept: Vec<usize>,
    pub scores: Vec<f64>,
}

/// Attention block that keeps only its highest-scoring rows:
/// attention, gather, residual with the gathered input, norm, FFN, norm.
#[derive(Clone, Debug)]
pub struct AdaptiveScalingLayer {
    pub attn: MultiHeadAttention,
    pub norm1: LayerNorm,
    pub ffn: Mlp,
    pub norm2: LayerNorm,
    pub score_head: Option<Linear>,
    pub scorer: Scorer,
}

impl AdaptiveScalingLayer {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d_model: usize,
        heads: usize,
        ffn_hidden: usize,
        scorer: Scorer,
        rng: &mut R,
    ) -> Result<Self> {
        let score_head = match scorer {
            Scorer::Supervised | Scorer::GumbelMask => {
                Some(Linear::new(store, &format!("{name}.score"), d_model, 1, rng)?)
            }
            _ => None,
        };
        Ok(Self {
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), d_model, heads, rng)?,
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), d_model, rng)?,
            ffn: Mlp::new(store, &format!("{name}.ffn"), d_model, ffn_hidden, d_model, rng)?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), d_model, rng)?,
            score_head,
            scorer,
        })
    }

    fn effective_mask(tokens: &Tokens, allow_empty: bool) -> Result<Vec<bool>> {
        let mask = tokens.pad_mask();
        if mask.iter().any(|&m| m) {
            Ok(mask)
        } else if allow_empty {
            Ok(vec![true; mask.len()])
        } else {
            Err(Error::EmptyRegion)
        }
    }

    fn finish(&self, g: &mut Graph<'_>, x: Var, attn_out: Var, rows: &[usize]) -> Result<Var> {
        let xs = g.gather_rows(x, rows)?;
        let h = g.add(xs, attn_out)?;
        let h = self.norm1.forward(g, h)?;
        let f = self.ffn.forward(g, h)?;
        let o = g.add(h, f)?;
        self.norm2.forward(g, o)
    }

    /// Keep `keep` rows of `input`.
    pub fn forward(
        &self,
        g: &mut Graph<'_>,
        input: &Tokens,
        keep: usize,
        ctx: &mut ScoringContext<'_>,
    ) -> Result<ScaledTokens> {
        let n = input.len();
        if keep == 0 || keep > n {
            return Err(Error::Config(format!("cannot keep {keep} of {n} tokens")));
        }
        let mask = Self::effective_mask(input, ctx.allow_empty)?;
        let x = input.x;
        let (maps, scores, kept) = match self.scorer {
            Scorer::Adaptive => {
                let m = self.attn.maps(g, x, x, x, Some(&mask), None)?;
                let scores = token_scores(g.value(m.maps), self.attn.heads, &mask)?;
                let kept = select_topk(&scores, keep)?;
                (m, scores, kept)
            }
            Scorer::Supervised => {
                let head = self.score_head.as_ref().ok_or_else(|| Error::Logic("missing score head".into()))?;
                let logits = head.forward(g, x)?;
                let scores = masked_sigmoid(g.value(logits).data(), &mask);
                if g.is_training() {
                    if let Some(labels) = &input.labels {
                        let real: Vec<usize> = (0..n).filter(|&i| mask[i] && input.point_ids[i] != PAD_ID).collect();
                        if !real.is_empty() {
                            let sel = g.gather_rows(logits, &real)?;
                            let targets: Vec<f64> = real.iter().map(|&i| labels[i]).collect();
                            let l = g.bce_with_logits(sel, &targets)?;
                            let l = g.scale(l, 1.0 / real.len() as f64);
                            ctx.aux_losses.push(l);
                        }
                    }
                }
                let kept = select_topk(&scores, keep)?;
                let m = self.attn.maps(g, x, x, x, Some(&mask), None)?;
                (m, scores, kept)
            }
            Scorer::GumbelMask => {
                let head = self.score_head.as_ref().ok_or_else(|| Error::Logic("missing score head".into()))?;
                let logits = head.forward(g, x)?;
                let lv = g.value(logits).data().to_vec();
                let scores = masked_sigmoid(&lv, &mask);
                let gate = if g.is_training() {
                    let noise: Vec<f64> = (0..n).map(|_| logistic_noise(&mut *ctx.rng)).collect();
                    let (soft, mut hard) = gumbel_gates(&lv, &noise, ctx.tau);
                    for (h, &m) in hard.iter_mut().zip(&mask) {
                        if !m {
                            *h = 0.0;
                        }
                    }
                    if !hard.iter().any(|&h| h > 0.0) {
                        let best = (0..n)
                            .filter(|&i| mask[i])
                            .max_by(|&a, &b| soft[a].total_cmp(&soft[b]).then(b.cmp(&a)))
                            .unwrap_or(0);
                        hard[best] = 1.0;
                    }
                    let z = g.add_const(logits, &noise)?;
                    let z = g.scale(z, 1.0 / ctx.tau);
                    let s = g.sigmoid(z);
                    Some(g.straight_through(s, &hard)?)
                } else {
                    None
                };
                let kept = select_topk(&scores, keep)?;
                let m = self.attn.maps(g, x, x, x, Some(&mask), gate)?;
                (m, scores, kept)
            }
            Scorer::Random => {
                let m = self.attn.maps(g, x, x, x, Some(&mask), None)?;
                let kept = random_select(&input.pad_mask(), keep, &mut *ctx.rng)?;
                let scores = mask.iter().map(|&v| if v { 0.5 } else { 0.0 }).collect();
                (m, scores, kept)
            }
        };
        let attn_out = self.attn.apply(g, &maps, &kept)?;
        let out = self.finish(g, x, attn_out, &kept)?;
        Ok(ScaledTokens { tokens: input.select_meta(&kept, out), kept, scores })
    }

    /// The uncompressed block: every row is kept. Reference for the
    /// row-subset property.
    pub fn forward_full(&self, g: &mut Graph<'_>, input: &Tokens, allow_empty: bool) -> Result<Var> {
        let mask = Self::effective_mask(input, allow_empty)?;
        let x = input.x;
        let m = self.attn.maps(g, x, x, x, Some(&mask), None)?;
        let rows: Vec<usize> = (0..input.len()).collect();
        let attn_out = self.attn.apply(g, &m, &rows)?;
        self.finish(g, x, attn_out, &rows)
    }
}

fn masked_sigmoid(logits: &[f64], mask: &[bool]) -> Vec<f64> {
    logits
        .iter()
        .zip(mask)
        .map(|(&l, &m)| if m { sigmoid(l).max(f64::MIN_POSITIVE) } else { 0.0 })
        .collect()
}

/// Target lengths of a progressive condensation from `n` rows.
///
/// With `layers = Some(L)` the schedule has `L` steps of length
/// `ceil(beta^l * n)`. Otherwise steps continue until the next length would
/// reach `target`, and the last step lands on `target` exactly.
pub fn condense_lengths(n: usize, target: usize, beta: f64, layers: Option<usize>) -> Result<Vec<usize>> {
    if !(beta > 0.0 && beta <= 1.0) {
        return Err(Error::Config(format!("keep ratio {beta} outside (0, 1]")));
    }
    if target == 0 || target > n {
        return Err(Error::Config(format!("cannot condense {n} tokens to {target}")));
    }
    let mut out = Vec::new();
    match layers {
        Some(l) => {
            for step in 1..=l {
                out.push(keep_count(n, libm::pow(beta, step as f64)));
            }
        }
        None => {
            if target == n {
                return Ok(out);
            }
            if beta >= 1.0 {
                return Err(Error::Config("keep ratio 1 never shortens the sequence".into()));
            }
            let mut step = 1;
            loop {
                let len = keep_count(n, libm::pow(beta, step as f64));
                if len <= target {
                    out.push(target);
                    break;
                }
                out.push(len);
                step += 1;
            }
        }
    }
    Ok(out)
}

/// Stacked scaling layers shortening the current-frame sequence.
#[derive(Clone, Debug)]
pub struct SspCondenser {
    pub layers: Vec<AdaptiveScalingLayer>,
    pub lengths: Vec<usize>,
}

/// Result of [`SspCondenser::forward`].
#[derive(Clone, Debug)]
pub struct Condensed {
    pub tokens: Tokens,
    /// Surviving positions in the original input, ascending.
    pub kept: Vec<usize>,
    /// Sequence length before the first and after every layer.
    pub trace: Vec<usize>,
}

impl SspCondenser {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d_model: usize,
        heads: usize,
        ffn_hidden: usize,
        scorer: Scorer,
        lengths: Vec<usize>,
        rng: &mut R,
    ) -> Result<Self> {
        let layers = (0..lengths.len())
            .map(|i| AdaptiveScalingLayer::new(store, &format!("{name}.{i}"), d_model, heads, ffn_hidden, scorer, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { layers, lengths })
    }

    pub fn forward(&self, g: &mut Graph<'_>, input: Tokens, ctx: &mut ScoringContext<'_>) -> Result<Condensed> {
        let mut trace = vec![input.len()];
        let mut kept: Vec<usize> = (0..input.len()).collect();
        let mut cur = input;
        for (layer, &len) in self.layers.iter().zip(&self.lengths) {
            let out = layer.forward(g, &cur, len, ctx)?;
            kept = out.kept.iter().map(|&i| kept[i]).collect();
            cur = out.tokens;
            trace.push(cur.len());
        }
        Ok(Condensed { tokens: cur, kept, trace })
    }
}

/// Run one scaling layer on a value-level sequence (inference graph).
pub fn ad_mhsa(
    store: &ParamStore,
    layer: &AdaptiveScalingLayer,
    seq: &TokenSequence,
    keep_ratio: f64,
    rng: &mut dyn RngCore,
) -> Result<(TokenSequence, Vec<usize>)> {
    let mut g = Graph::inference(store);
    let x = g.constant(seq.features.clone());
    let tokens = Tokens {
        x,
        point_ids: seq.point_ids.clone(),
        frames: vec![seq.frame_index; seq.len()],
        labels: None,
    };
    let keep = keep_count(seq.len(), keep_ratio);
    let mut ctx = ScoringContext::new(layer.scorer, rng);
    let out = layer.forward(&mut g, &tokens, keep, &mut ctx)?;
    let mut s = out.tokens.to_sequence(&g);
    s.frame_index = seq.frame_index;
    Ok((s, out.kept))
}
