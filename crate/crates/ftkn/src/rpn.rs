//! Stand-in region proposal network: jittered ground truth with misses
//! and false positives.

use std::f64::consts::PI;

use ftkn_core::geometry::Box7;
use rand::Rng;
use rand_distr::{Distribution, Normal, Poisson};

use crate::config::RpnConfig;
use crate::seeds;

const FP_RANGE: (f64, f64) = (5.0, 35.0);

/// Proposals for one frame: kept boxes in ground-truth order, then false
/// positives.
pub fn mock_rpn(gt: &[Box7], cfg: &RpnConfig, seed: u64) -> Vec<Box7> {
    let mut rng = seeds::rng(seed, "rpn", &[]);
    let n = |s: f64| Normal::new(0.0, s.max(0.0)).expect("finite sigma");
    let (nxyz, nsize, nyaw, nvel) = (n(cfg.sigma_xyz), n(cfg.sigma_size), n(cfg.sigma_yaw), n(cfg.sigma_velocity));
    let mut out = Vec::with_capacity(gt.len() + 2);
    for b in gt {
        if rng.random::<f64>() >= cfg.recall {
            continue;
        }
        let dc = [nxyz.sample(&mut rng), nxyz.sample(&mut rng), nxyz.sample(&mut rng)];
        let ds = [nsize.sample(&mut rng), nsize.sample(&mut rng), nsize.sample(&mut rng)];
        let dyaw = nyaw.sample(&mut rng);
        let v = b.velocity_or_zero();
        let dv = [nvel.sample(&mut rng), nvel.sample(&mut rng)];
        let center = [b.center[0] + dc[0], b.center[1] + dc[1], b.center[2] + dc[2]];
        let size = [b.size[0] * ds[0].exp(), b.size[1] * ds[1].exp(), b.size[2] * ds[2].exp()];
        let err = dc.iter().chain(&ds).map(|x| x * x).sum::<f64>().sqrt() + dyaw.abs();
        let p = Box7::new(center, size, b.yaw + dyaw)
            .expect("jittered box stays valid")
            .with_velocity([v[0] + dv[0], v[1] + dv[1]])
            .with_class(b.class_id)
            .with_score(1.0 / (1.0 + err));
        out.push(p);
    }
    let fp = Poisson::new(cfg.fp_rate.max(1e-12)).map_or(0.0, |p| p.sample(&mut rng)) as usize;
    let fp = if cfg.fp_rate > 0.0 { fp } else { 0 };
    for _ in 0..fp {
        let r = rng.random_range(FP_RANGE.0..FP_RANGE.1);
        let a = rng.random_range(-PI..PI);
        let size = [4.5, 1.9, 1.6].map(|s: f64| s * rng.random_range(0.8..1.2));
        let b = Box7::new([r * a.cos(), r * a.sin(), size[2] / 2.0], size, rng.random_range(-PI..PI))
            .expect("positive size")
            .with_velocity([nvel.sample(&mut rng), nvel.sample(&mut rng)])
            .with_score(rng.random_range(0.05..0.5));
        out.push(b);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gt(n: usize) -> Vec<Box7> {
        (0..n)
            .map(|i| Box7::new([i as f64 * 10.0, 0.0, 0.8], [4.0, 2.0, 1.6], 0.3).unwrap().with_velocity([1.0, 0.0]))
            .collect()
    }

    #[test]
    fn noiseless_proposals_are_the_ground_truth() {
        let cfg = RpnConfig { sigma_xyz: 0.0, sigma_size: 0.0, sigma_yaw: 0.0, sigma_velocity: 0.0, recall: 1.0, fp_rate: 0.0 };
        let g = gt(5);
        assert_eq!(mock_rpn(&g, &cfg, 1), g);
    }

    #[test]
    fn recall_fraction_is_statistically_right() {
        let cfg = RpnConfig { recall: 0.8, fp_rate: 0.0, ..RpnConfig::default() };
        let g = gt(10_000);
        let kept = mock_rpn(&g, &cfg, 2).len() as f64 / 1e4;
        assert!((kept - 0.8).abs() <= 0.02, "{kept}");
    }

    #[test]
    fn seeded() {
        let cfg = RpnConfig::default();
        let g = gt(8);
        assert_eq!(mock_rpn(&g, &cfg, 3), mock_rpn(&g, &cfg, 3));
        assert_ne!(mock_rpn(&g, &cfg, 3), mock_rpn(&g, &cfg, 4));
    }
}
