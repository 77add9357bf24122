//! Matching and AP references.

use std::collections::HashSet;

use hoi_core::eval::Prediction;
use hoi_core::scene::{BBox, GeneratorConfig, GtInteraction};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn oracle_iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    let area = |x: &BBox| (x.x2 - x.x1) * (x.y2 - x.y1);
    inter / (area(a) + area(b) - inter)
}

pub fn small_world(n: usize, jitter: f64) -> GeneratorConfig {
    GeneratorConfig {
        num_scenes: n,
        min_instances: 2,
        max_instances: 6,
        min_humans: 1,
        max_humans: 2,
        d_app: 2,
        grid_h: 4,
        grid_w: 4,
        jitter,
        ..GeneratorConfig::default()
    }
}

pub fn b(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
    BBox { x1, y1, x2, y2 }
}

/// Greedy matcher written against plain index loops.
pub fn oracle_map(preds: &[Prediction], gts: &[Vec<GtInteraction>], num_classes: usize) -> (Vec<Option<f64>>, f64) {
    let mut aps = Vec::new();
    for c in 0..num_classes {
        let total: usize = gts.iter().map(|g| g.iter().filter(|t| t.interaction_classes.contains(&c)).count()).sum();
        let mut idx: Vec<usize> = (0..preds.len()).filter(|&i| preds[i].interaction_class == c).collect();
        // stable sort keeps emission order among equal keys
        idx.sort_by(|&a, &b| {
            preds[b]
                .score
                .partial_cmp(&preds[a].score)
                .unwrap()
                .then(preds[a].scene.cmp(&preds[b].scene))
        });
        let mut used: HashSet<(usize, usize)> = HashSet::new();
        let mut hits = Vec::new();
        for &i in &idx {
            let p = &preds[i];
            let mut best: Option<(usize, f64)> = None;
            for (gi, g) in gts[p.scene].iter().enumerate() {
                if used.contains(&(p.scene, gi)) || !g.interaction_classes.contains(&c) || g.object_class != p.object_class {
                    continue;
                }
                let (hi, oi) = (oracle_iou(&p.human_box, &g.human_box), oracle_iou(&p.object_box, &g.object_box));
                if hi > 0.5 && oi > 0.5 && best.is_none_or(|(_, q)| hi.min(oi) > q) {
                    best = Some((gi, hi.min(oi)));
                }
            }
            if let Some((gi, _)) = best {
                used.insert((p.scene, gi));
            }
            hits.push(best.is_some());
        }
        if total == 0 {
            aps.push(None);
            continue;
        }
        let n = hits.len();
        let prec: Vec<f64> = (0..n).map(|k| hits[..=k].iter().filter(|&&h| h).count() as f64 / (k + 1) as f64).collect();
        let rec: Vec<f64> = (0..n).map(|k| hits[..=k].iter().filter(|&&h| h).count() as f64 / total as f64).collect();
        let mut ap = 0.0;
        for k in 0..n {
            let prev = if k == 0 { 0.0 } else { rec[k - 1] };
            if rec[k] > prev {
                let best_after = prec[k..].iter().cloned().fold(0.0, f64::max);
                ap += (rec[k] - prev) * best_after;
            }
        }
        aps.push(Some(ap));
    }
    let with_gt: Vec<f64> = aps.iter().flatten().copied().collect();
    let map = if with_gt.is_empty() { 0.0 } else { with_gt.iter().sum::<f64>() / with_gt.len() as f64 };
    (aps, map)
}

pub fn noisy_predictions(gts: &[Vec<GtInteraction>], rng: &mut ChaCha8Rng, num_classes: usize) -> Vec<Prediction> {
    let mut preds = Vec::new();
    let jitter = |bx: &BBox, rng: &mut ChaCha8Rng| {
        let s = 0.06;
        let x1 = (bx.x1 + rng.random_range(-s..s)).clamp(0.0, 0.98);
        let y1 = (bx.y1 + rng.random_range(-s..s)).clamp(0.0, 0.98);
        b(x1, y1, (bx.x2 + rng.random_range(-s..s)).clamp(x1 + 0.01, 1.0), (bx.y2 + rng.random_range(-s..s)).clamp(y1 + 0.01, 1.0))
    };
    for (k, g) in gts.iter().enumerate() {
        for t in g {
            for _ in 0..rng.random_range(0..3) {
                preds.push(Prediction {
                    scene: k,
                    human_box: jitter(&t.human_box, rng),
                    object_box: jitter(&t.object_box, rng),
                    object_class: if rng.random_bool(0.9) { t.object_class } else { 1 },
                    interaction_class: if rng.random_bool(0.7) {
                        *t.interaction_classes.iter().next().unwrap()
                    } else {
                        rng.random_range(0..num_classes)
                    },
                    score: (rng.random_range(0..20) as f64) / 20.0 + 0.01,
                });
            }
        }
    }
    preds
}
