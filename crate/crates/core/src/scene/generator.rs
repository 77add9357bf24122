//! Procedural scenes standing in for detector output on real images.
//!
//! Every instance carries an appearance vector built from a class prototype
//! shared by all scenes of a world (seeded by `world_seed`), plus per-instance
//! noise. Non-person instances are either active or inactive; the state adds
//! or subtracts a fixed state prototype, so near-but-inactive objects look
//! like positives geometrically and differ only in appearance. Labels come
//! from [`super::rules`].

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::geometry::BBox;
use super::rules::{derive_interactions, RuleParams, VerbIds};
use super::{FeatureGrid, Instance, Scene, SceneError, SceneTruth, PERSON_CLASS};
use crate::structure::{layout_map, LayoutLabel};

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorConfig {
    pub num_scenes: usize,
    pub min_instances: usize,
    pub max_instances: usize,
    pub min_humans: usize,
    pub max_humans: usize,
    /// Includes the person class (id 0).
    pub num_object_classes: usize,
    pub num_interactions: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub d_app: usize,
    pub d_grid: usize,
    pub app_noise: f64,
    pub state_strength: f64,
    pub grid_noise: f64,
    /// Std-dev of the detection box jitter, in normalized units.
    pub jitter: f64,
    pub near_dist: f64,
    pub hold_overlap: f64,
    pub p_active: f64,
    /// Probability that an object is placed next to a person.
    pub p_near: f64,
    /// Probability that a near object is placed inside the person box.
    pub p_inside: f64,
    /// Per person, probability of planting a marker in the union-only region
    /// of one of its engaged pairs.
    pub p_marker: f64,
    /// Probability of one extra marker in a uniformly random cell.
    pub p_stray_marker: f64,
    /// Seeds the class and state prototypes shared by all splits.
    pub world_seed: u64,
    /// Band the fraction of positive candidate pairs is expected to fall in.
    pub positive_rate_band: (f64, f64),
    /// Minimum gap between P(look | holds elsewhere) and P(look | holds nothing).
    pub context_margin: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            num_scenes: 500,
            min_instances: 4,
            max_instances: 10,
            min_humans: 1,
            max_humans: 3,
            num_object_classes: 8,
            num_interactions: 10,
            grid_h: 16,
            grid_w: 16,
            d_app: 256,
            d_grid: 16,
            app_noise: 0.5,
            state_strength: 0.6,
            grid_noise: 0.1,
            jitter: 0.01,
            near_dist: 0.3,
            hold_overlap: 0.5,
            p_active: 0.6,
            p_near: 0.6,
            p_inside: 0.35,
            p_marker: 0.6,
            p_stray_marker: 0.3,
            world_seed: 0,
            positive_rate_band: (0.05, 0.6),
            context_margin: 0.2,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<(), SceneError> {
        let bad = |m: &str| Err(SceneError::Config(m.to_string()));
        if self.num_object_classes < 2 {
            return bad("num_object_classes must be at least 2 (person plus one object class)");
        }
        if VerbIds::new(self.num_interactions).is_none() {
            return bad("num_interactions must exceed the 5 reserved rule classes");
        }
        if self.min_instances < 2 || self.min_instances > self.max_instances {
            return bad("instance range must satisfy 2 <= min_instances <= max_instances");
        }
        if self.min_humans < 1 || self.min_humans > self.max_humans || self.max_humans > self.min_instances {
            return bad("human range must satisfy 1 <= min_humans <= max_humans <= min_instances");
        }
        if self.grid_h == 0 || self.grid_w == 0 {
            return bad("grid dimensions must be positive");
        }
        if self.d_app == 0 {
            return bad("d_app must be positive");
        }
        if self.d_grid < self.num_object_classes + 1 {
            return bad("d_grid must hold one channel per object class plus the marker channel");
        }
        let probs = [self.p_active, self.p_near, self.p_inside, self.p_marker, self.p_stray_marker];
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return bad("probabilities must lie in [0, 1]");
        }
        if [self.app_noise, self.grid_noise, self.jitter, self.state_strength].iter().any(|v| *v < 0.0) {
            return bad("noise levels must be non-negative");
        }
        Ok(())
    }

    pub fn rule_params(&self) -> RuleParams {
        RuleParams {
            num_interactions: self.num_interactions,
            near_dist: self.near_dist,
            hold_overlap: self.hold_overlap,
            grid_h: self.grid_h,
            grid_w: self.grid_w,
        }
    }

    pub fn marker_channel(&self) -> usize {
        self.num_object_classes
    }
}

struct World {
    class_protos: Vec<Vec<f64>>,
    state_proto: Vec<f64>,
}

impl World {
    fn new(cfg: &GeneratorConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.world_seed ^ 0x05ee_d0fc_1a55);
        let unit = Normal::new(0.0, 1.0).expect("unit normal");
        let vec = |rng: &mut ChaCha8Rng| (0..cfg.d_app).map(|_| unit.sample(rng)).collect::<Vec<f64>>();
        let class_protos = (0..cfg.num_object_classes).map(|_| vec(&mut rng)).collect();
        let state_proto = vec(&mut rng);
        Self {
            class_protos,
            state_proto,
        }
    }
}

fn clamp_box(cx: f64, cy: f64, w: f64, h: f64) -> BBox {
    let w = w.min(1.0);
    let h = h.min(1.0);
    let x1 = (cx - w / 2.0).clamp(0.0, 1.0 - w);
    let y1 = (cy - h / 2.0).clamp(0.0, 1.0 - h);
    BBox {
        x1,
        y1,
        x2: x1 + w,
        y2: y1 + h,
    }
}

fn jitter_box<R: Rng>(b: &BBox, sigma: f64, rng: &mut R) -> BBox {
    if sigma == 0.0 {
        return *b;
    }
    let n = Normal::new(0.0, sigma).expect("sigma >= 0");
    let min_size = 1e-3;
    let x1 = (b.x1 + n.sample(rng)).clamp(0.0, 1.0 - min_size);
    let y1 = (b.y1 + n.sample(rng)).clamp(0.0, 1.0 - min_size);
    let x2 = (b.x2 + n.sample(rng)).clamp(x1 + min_size, 1.0);
    let y2 = (b.y2 + n.sample(rng)).clamp(y1 + min_size, 1.0);
    BBox { x1, y1, x2, y2 }
}

fn generate_scene(cfg: &GeneratorConfig, world: &World, scene_id: u64, rng: &mut ChaCha8Rng) -> Scene {
    let n = rng.random_range(cfg.min_instances..=cfg.max_instances);
    let n_h = rng.random_range(cfg.min_humans..=cfg.max_humans.min(n));
    let mut classes = Vec::with_capacity(n);
    let mut boxes: Vec<BBox> = Vec::with_capacity(n);
    let mut active = Vec::with_capacity(n);

    for _ in 0..n_h {
        let (w, h) = (rng.random_range(0.12..0.3), rng.random_range(0.25..0.5));
        let (cx, cy) = (rng.random_range(0.0..1.0), rng.random_range(0.0..1.0));
        boxes.push(clamp_box(cx, cy, w, h));
        classes.push(PERSON_CLASS);
        active.push(true);
    }
    let spread = Normal::new(0.0, cfg.near_dist * 0.5).expect("positive spread");
    for _ in n_h..n {
        let class = rng.random_range(1..cfg.num_object_classes);
        let (mut w, mut h): (f64, f64) = (rng.random_range(0.05..0.2), rng.random_range(0.05..0.2));
        let (cx, cy) = if rng.random_bool(cfg.p_near) {
            let anchor = boxes[rng.random_range(0..n_h)];
            if rng.random_bool(cfg.p_inside) {
                w = w.min(anchor.width() * 0.8);
                h = h.min(anchor.height() * 0.8);
                (
                    rng.random_range(anchor.x1 + w / 2.0..=anchor.x2 - w / 2.0),
                    rng.random_range(anchor.y1 + h / 2.0..=anchor.y2 - h / 2.0),
                )
            } else {
                let (ax, ay) = anchor.center();
                (ax + spread.sample(rng), ay + spread.sample(rng))
            }
        } else {
            (rng.random_range(0.0..1.0), rng.random_range(0.0..1.0))
        };
        boxes.push(clamp_box(cx, cy, w, h));
        classes.push(class);
        active.push(rng.random_bool(cfg.p_active));
    }

    let noise = Normal::new(0.0, cfg.app_noise.max(0.0)).expect("noise");
    let instances: Vec<Instance> = (0..n)
        .map(|i| {
            let is_human = classes[i] == PERSON_CLASS;
            let sign = if active[i] { 1.0 } else { -1.0 };
            let feature = (0..cfg.d_app)
                .map(|k| {
                    let state = if is_human { 0.0 } else { sign * cfg.state_strength * world.state_proto[k] };
                    world.class_protos[classes[i]][k] + state + noise.sample(rng)
                })
                .collect();
            Instance {
                bbox: jitter_box(&boxes[i], cfg.jitter, rng),
                class_id: classes[i],
                is_human,
                feature,
                det_score: rng.random_range(0.7..1.0),
            }
        })
        .collect();

    let mut truth = SceneTruth {
        boxes,
        active,
        markers: Vec::new(),
    };
    let rules = cfg.rule_params();
    for h in 0..n_h {
        if !rng.random_bool(cfg.p_marker) {
            continue;
        }
        let engaged: Vec<usize> = (n_h..n)
            .filter(|&o| {
                let (hx, hy) = truth.boxes[h].center();
                let (ox, oy) = truth.boxes[o].center();
                truth.active[o] && ((hx - ox).powi(2) + (hy - oy).powi(2)).sqrt() < rules.near_dist
            })
            .collect();
        if let Some(&o) = engaged.choose(rng) {
            let map = layout_map(&truth.boxes[h], &truth.boxes[o], cfg.grid_h, cfg.grid_w);
            let union_cells: Vec<usize> = (0..map.cells.len())
                .filter(|&c| map.cells[c] == LayoutLabel::Union)
                .collect();
            if let Some(&c) = union_cells.choose(rng) {
                let cell = (c / cfg.grid_w, c % cfg.grid_w);
                if !truth.markers.contains(&cell) {
                    truth.markers.push(cell);
                }
            }
        }
    }
    if rng.random_bool(cfg.p_stray_marker) {
        let cell = (rng.random_range(0..cfg.grid_h), rng.random_range(0..cfg.grid_w));
        if !truth.markers.contains(&cell) {
            truth.markers.push(cell);
        }
    }

    let feature_grid = render_grid(cfg, &instances, &truth, rng);
    let gt = derive_interactions(&instances, &truth, &rules);
    Scene {
        scene_id,
        instances,
        gt,
        feature_grid,
        truth,
    }
}

fn render_grid(cfg: &GeneratorConfig, instances: &[Instance], truth: &SceneTruth, rng: &mut ChaCha8Rng) -> FeatureGrid {
    let (h, w, d) = (cfg.grid_h, cfg.grid_w, cfg.d_grid);
    let noise = Normal::new(0.0, cfg.grid_noise.max(0.0)).expect("noise");
    let mut data = vec![0.0; h * w * d];
    for row in 0..h {
        let y = (row as f64 + 0.5) / h as f64;
        for col in 0..w {
            let x = (col as f64 + 0.5) / w as f64;
            let cell = &mut data[(row * w + col) * d..(row * w + col + 1) * d];
            for (inst, b) in instances.iter().zip(&truth.boxes) {
                if b.contains_point(x, y) {
                    cell[inst.class_id] = 1.0;
                }
            }
            if truth.markers.contains(&(row, col)) {
                cell[cfg.marker_channel()] = 1.0;
            }
            for v in cell.iter_mut() {
                *v += noise.sample(rng);
            }
        }
    }
    FeatureGrid { h, w, d, data }
}

/// `cfg.num_scenes` scenes; identical for identical `(cfg, seed)`.
pub fn generate_dataset(cfg: &GeneratorConfig, seed: u64) -> Result<Vec<Scene>, SceneError> {
    cfg.validate()?;
    let world = World::new(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..cfg.num_scenes as u64)
        .map(|id| generate_scene(cfg, &world, id, &mut rng))
        .collect())
}
