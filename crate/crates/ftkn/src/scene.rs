//! Synthetic multi-frame lidar scenes.
//!
//! Objects move with constant velocity plus a Gaussian velocity
//! perturbation per frame. Each visible surface receives points at a
//! density that falls off with the square of the range to the sensor at
//! the origin; background clutter is spread uniformly over a disc.

use std::f64::consts::PI;

use ftkn_core::geometry::{Box7, PointSet};
use ftkn_core::memory::point_id;
use rand::Rng;
use rand_distr::{Distribution, Normal, Poisson};
use rayon::prelude::*;

use crate::config::SceneConfig;
use crate::seeds;

pub const CLASS_NAMES: [&str; 3] = ["car", "pedestrian", "cyclist"];
const CLASS_WEIGHTS: [f64; 3] = [0.6, 0.2, 0.2];
const CLASS_SIZES: [[f64; 3]; 3] = [[4.5, 1.9, 1.6], [0.8, 0.7, 1.75], [1.8, 0.7, 1.7]];

#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub index: usize,
    /// One extra feature per point: intensity.
    pub cloud: PointSet,
    /// Ground truth in a fixed object order shared by every frame.
    pub boxes: Vec<Box7>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub frames: Vec<Frame>,
}

impl Scene {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

#[derive(Clone, Debug)]
struct Object {
    class_id: u32,
    size: [f64; 3],
    center: [f64; 3],
    velocity: [f64; 2],
    yaw: f64,
    moving: bool,
}

/// Visible surface area used for point density: four sides and the top.
pub fn surface_area(size: [f64; 3]) -> f64 {
    2.0 * (size[0] + size[1]) * size[2] + size[0] * size[1]
}

/// Mean number of surface points of a box of `size` at horizontal `range`.
pub fn expected_points(cfg: &SceneConfig, size: [f64; 3], range: f64) -> f64 {
    let r = range.max(1.0);
    cfg.density * surface_area(size) * (cfg.reference_range / r).powi(2)
}

/// Points on the visible surfaces of `b`, count drawn from a Poisson law
/// around [`expected_points`] and clamped to the configured range.
pub fn object_points<R: Rng + ?Sized>(cfg: &SceneConfig, b: &Box7, rng: &mut R) -> Vec<([f64; 3], f64)> {
    let range = b.center[0].hypot(b.center[1]);
    let lambda = expected_points(cfg, b.size, range);
    let n = Poisson::new(lambda.max(1e-9)).map_or(0.0, |p| p.sample(rng)) as usize;
    let n = n.clamp(cfg.min_points, cfg.max_points);
    let [l, w, h] = b.size;
    let faces = [w * h, w * h, l * h, l * h, l * w];
    let total: f64 = faces.iter().sum();
    let noise = Normal::new(0.0, cfg.point_noise.max(0.0)).expect("finite noise");
    (0..n)
        .map(|_| {
            let mut pick = rng.random::<f64>() * total;
            let mut face = faces.len() - 1;
            for (i, a) in faces.iter().enumerate() {
                if pick < *a {
                    face = i;
                    break;
                }
                pick -= a;
            }
            let u = rng.random::<f64>() - 0.5;
            let v = rng.random::<f64>() - 0.5;
            let local = match face {
                0 => [l / 2.0, u * w, v * h],
                1 => [-l / 2.0, u * w, v * h],
                2 => [u * l, w / 2.0, v * h],
                3 => [u * l, -w / 2.0, v * h],
                _ => [u * l, v * w, h / 2.0],
            };
            let mut p = b.to_world(local);
            for c in &mut p {
                *c += noise.sample(rng);
            }
            (p, rng.random_range(0.4..1.0))
        })
        .collect()
}

fn spawn<R: Rng + ?Sized>(cfg: &SceneConfig, rng: &mut R) -> Object {
    let u: f64 = rng.random();
    let mut class_id = 0;
    let mut acc = 0.0;
    for (i, w) in CLASS_WEIGHTS.iter().enumerate() {
        acc += w;
        if u < acc {
            class_id = i;
            break;
        }
    }
    let base = CLASS_SIZES[class_id];
    let size = base.map(|s| s * rng.random_range(0.9..1.1));
    let range = rng.random_range(cfg.range_min..cfg.range_max);
    let theta = rng.random_range(-PI..PI);
    let moving = rng.random::<f64>() >= cfg.static_fraction;
    let speed_cap = match class_id {
        0 => cfg.max_speed,
        1 => cfg.max_speed.min(1.8),
        _ => cfg.max_speed.min(6.0),
    };
    let heading = rng.random_range(-PI..PI);
    let speed = if moving { rng.random_range(0.3 * speed_cap..speed_cap) } else { 0.0 };
    Object {
        class_id: class_id as u32,
        size,
        center: [range * theta.cos(), range * theta.sin(), size[2] / 2.0],
        velocity: [speed * heading.cos(), speed * heading.sin()],
        yaw: heading,
        moving,
    }
}

fn far_apart(a: &Object, b: &Object, frames: usize, dt: f64) -> bool {
    let reach = |o: &Object| 0.5 * o.size[0].hypot(o.size[1]);
    let gap = reach(a) + reach(b) + 0.5;
    [0.0, frames as f64 * dt].iter().all(|&t| {
        let dx = (a.center[0] + a.velocity[0] * t) - (b.center[0] + b.velocity[0] * t);
        let dy = (a.center[1] + a.velocity[1] * t) - (b.center[1] + b.velocity[1] * t);
        dx.hypot(dy) > gap
    })
}

/// Deterministic scene for `seed`.
pub fn generate_scene(cfg: &SceneConfig, seed: u64) -> Scene {
    let mut rng = seeds::rng(seed, "scene", &[]);
    let count = rng.random_range(cfg.objects_min..=cfg.objects_max);
    let mut objects: Vec<Object> = Vec::with_capacity(count);
    for _ in 0..count {
        for _ in 0..50 {
            let o = spawn(cfg, &mut rng);
            if objects.iter().all(|p| far_apart(p, &o, cfg.frames, cfg.frame_dt)) {
                objects.push(o);
                break;
            }
        }
    }
    let jitter = Normal::new(0.0, cfg.velocity_jitter.max(0.0)).expect("finite jitter");
    let mut frames = Vec::with_capacity(cfg.frames);
    for f in 0..cfg.frames {
        let boxes: Vec<Box7> = objects
            .iter()
            .map(|o| {
                Box7::new(o.center, o.size, o.yaw)
                    .expect("positive sizes")
                    .with_velocity(o.velocity)
                    .with_class(o.class_id)
            })
            .collect();
        let mut cloud = PointSet::new(1);
        for b in &boxes {
            for (p, intensity) in object_points(cfg, b, &mut rng) {
                let row = cloud.len();
                cloud.push(p, &[intensity], 0.0, point_id(f, row));
            }
        }
        let area = PI * cfg.area_radius * cfg.area_radius;
        let n_clutter = Poisson::new((cfg.clutter_density * area).max(1e-9)).map_or(0.0, |p| p.sample(&mut rng)) as usize;
        for _ in 0..n_clutter {
            let r = cfg.area_radius * rng.random::<f64>().sqrt();
            let a = rng.random_range(-PI..PI);
            let p = [r * a.cos(), r * a.sin(), rng.random_range(-0.3..2.0)];
            let intensity = rng.random_range(0.0..0.4);
            if boxes.iter().any(|b| b.contains(p)) {
                continue;
            }
            let row = cloud.len();
            cloud.push(p, &[intensity], 0.0, point_id(f, row));
        }
        frames.push(Frame { index: f, cloud, boxes });
        for o in objects.iter_mut().filter(|o| o.moving) {
            o.center[0] += o.velocity[0] * cfg.frame_dt;
            o.center[1] += o.velocity[1] * cfg.frame_dt;
            o.velocity[0] += jitter.sample(&mut rng);
            o.velocity[1] += jitter.sample(&mut rng);
            o.yaw = o.velocity[1].atan2(o.velocity[0]);
        }
    }
    Scene { frames }
}

/// Seed of scene `index` in the split `split` of a run.
pub fn scene_seed(run_seed: u64, split: &str, index: usize) -> u64 {
    seeds::derive(run_seed, split, &[index as u64])
}

/// `count` scenes of one split, generated in parallel.
pub fn generate_split(cfg: &SceneConfig, run_seed: u64, split: &str, count: usize) -> Vec<Scene> {
    (0..count).into_par_iter().map(|i| generate_scene(cfg, scene_seed(run_seed, split, i))).collect()
}

/// Number of points of `cloud` inside `b`.
pub fn points_in_box(cloud: &PointSet, b: &Box7) -> usize {
    cloud.coords.iter().filter(|p| b.contains(**p)).count()
}
