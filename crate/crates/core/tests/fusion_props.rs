use ftkn_core::fusion::{group_split, FusionSchedule, GroupStrategy, Igf, MspCondenser};
use ftkn_core::graph::Graph;
use ftkn_core::memory::{point_id, split_point_id};
use ftkn_core::params::ParamStore;
use ftkn_core::scaling::{Scorer, ScoringContext, Tokens};
use ftkn_core::tensor::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Independent re-statement of the default schedule, returning
/// (sequence count, length) after each scale and each fusion.
fn simulate(t: usize, g: usize, beta: f64, k: usize, k_out: usize) -> Vec<(usize, usize)> {
    let ceil_keep = |n: usize| -> usize { ((beta * n as f64 - 1e-9).ceil() as usize).max(1) };
    let mut out = vec![];
    if t == 1 {
        out.push((1, k_out));
        return out;
    }
    let mut counts = vec![t];
    let first = if t % g == 0 && t / g >= 2 { g } else { 1 };
    counts.push(first);
    if first > 1 {
        counts.push(1);
    }
    let mut len = k;
    for w in counts.windows(2) {
        len = ceil_keep(len);
        out.push((w[0], len));
        len = len * w[0] / w[1];
        out.push((w[1], len));
    }
    out.push((1, k_out));
    out
}

proptest! {
    #[test]
    fn schedule_matches_the_simulator(
        t in prop::sample::select(vec![1usize, 2, 4, 8, 12, 16, 24, 32]),
        g in prop::sample::select(vec![1usize, 2, 4, 8]),
        beta in prop::sample::select(vec![0.3, 0.4, 0.5, 0.6]),
        k in 4usize..64,
    ) {
        let sched = FusionSchedule::default_for(t, g, beta, k);
        let sim = simulate(t, g, beta, k, k);
        match sched.trace(t, k) {
            Ok(trace) => prop_assert_eq!(trace, sim),
            Err(_) => prop_assert!(sim.iter().rev().nth(1).is_some_and(|s| s.1 < k)),
        }
    }

    #[test]
    fn equal_stride_groups_are_regular(g in 1usize..8, per in 1usize..6) {
        let t = g * per;
        let plan = group_split(t, g, GroupStrategy::EqualStride).unwrap();
        let mut seen = vec![0; t];
        for grp in &plan.groups {
            prop_assert_eq!(grp.len(), per);
            prop_assert!(grp.windows(2).all(|w| w[1] - w[0] == g));
            for &i in grp {
                seen[i] += 1;
            }
        }
        prop_assert!(seen.iter().all(|&c| c == 1));
        let c = group_split(t, g, GroupStrategy::Contiguous).unwrap();
        let flat: Vec<usize> = c.groups.concat();
        prop_assert_eq!(flat, (0..t).collect::<Vec<_>>());
    }
}

fn igf(seed: u64, group: usize, d: usize) -> (ParamStore, Igf) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let m = Igf::new(&mut store, "igf", group, d, &mut rng).unwrap();
    (store, m)
}

fn rand_t(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
    Tensor::matrix(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect())
}

#[test]
fn igf_output_shape() {
    let (store, m) = igf(1, 4, 256);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut g = Graph::inference(&store);
    let seqs: Vec<_> = (0..4).map(|_| g.constant(rand_t(&mut rng, 24, 256))).collect();
    let out = m.forward(&mut g, &seqs).unwrap();
    assert_eq!(g.dims(out), (96, 256));
    let bad = g.constant(rand_t(&mut rng, 23, 256));
    assert!(m.forward(&mut g, &[seqs[0], seqs[1], seqs[2], bad]).is_err());
}

#[test]
fn igf_is_invariant_to_order_within_a_sequence() {
    let (store, m) = igf(3, 3, 8);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let ts: Vec<Tensor> = (0..3).map(|_| rand_t(&mut rng, 5, 8)).collect();
    let perm = [3, 0, 4, 1, 2];
    let mut g = Graph::inference(&store);
    let a: Vec<_> = ts.iter().map(|t| g.constant(t.clone())).collect();
    let out_a = m.forward(&mut g, &a).unwrap();
    let mut b = a.clone();
    b[1] = g.constant(ts[1].gather_rows(&perm).unwrap());
    let out_b = m.forward(&mut g, &b).unwrap();
    let va = g.value(out_a);
    let vb = g.value(out_b);
    for r in 0..15 {
        let src = if (5..10).contains(&r) { 5 + perm[r - 5] } else { r };
        for c in 0..8 {
            assert!((vb.at(r, c) - va.at(src, c)).abs() < 1e-12);
        }
    }
}

#[test]
fn igf_maps_zeros_to_zeros() {
    let (mut store, m) = igf(5, 2, 6);
    let linear_ids: Vec<_> = store.iter().filter(|(_, p)| !p.name.ends_with(".gain")).map(|(id, _)| id).collect();
    for id in linear_ids {
        store.tensor_mut(id).data_mut().fill(0.0);
    }
    let mut g = Graph::inference(&store);
    let z: Vec<_> = (0..2).map(|_| g.constant(Tensor::zeros(vec![3, 6]))).collect();
    let out = m.forward(&mut g, &z).unwrap();
    assert!(g.value(out).data().iter().all(|v| v.abs() < 1e-12));
}

fn msp_run(seed: u64, t: usize, g_count: usize, k: usize) -> (Vec<(usize, usize)>, Vec<i64>, Tensor) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let schedule = FusionSchedule::default_for(t, g_count, 0.5, k);
    let msp = MspCondenser::new(&mut store, "msp", &schedule, GroupStrategy::EqualStride, t, k, 8, 2, 16, Scorer::Adaptive, &mut rng)
        .unwrap();
    let mut g = Graph::inference(&store);
    let seqs = (0..t)
        .map(|f| Tokens {
            x: g.constant(rand_t(&mut rng, k, 8)),
            point_ids: (0..k).map(|i| point_id(f, 3 * i)).collect(),
            frames: vec![f; k],
            labels: None,
        })
        .collect();
    let mut ctx = ScoringContext::new(Scorer::Adaptive, &mut rng);
    let out = msp.forward(&mut g, seqs, true, &mut ctx).unwrap();
    (out.trace, out.tokens.point_ids.clone(), g.value(out.tokens.x).clone())
}

#[test]
fn msp_trace_provenance_and_determinism() {
    let (trace, ids, x) = msp_run(7, 8, 4, 16);
    assert_eq!(trace, vec![(8, 8), (4, 16), (4, 8), (1, 32), (1, 16)]);
    assert_eq!(ids.len(), 16);
    for id in &ids {
        let (f, r) = split_point_id(*id).unwrap();
        assert!(f < 8 && r % 3 == 0 && r / 3 < 16);
    }
    let (trace2, ids2, x2) = msp_run(7, 8, 4, 16);
    assert_eq!((trace, ids), (trace2, ids2));
    assert_eq!(x, x2);
    let (trace4, _, _) = msp_run(8, 4, 4, 12);
    assert_eq!(trace4, vec![(4, 6), (1, 24), (1, 12)]);
    let (trace1, _, _) = msp_run(9, 1, 4, 12);
    assert_eq!(trace1, vec![(1, 12)]);
}
