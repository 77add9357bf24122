//! Ranked HOI triplets and average-precision evaluation.

use std::cmp::Ordering;

use crate::scene::{iou, BBox, GtInteraction};

/// One scored ⟨human, object, interaction⟩ triplet.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    /// Index of the scene within the evaluated split.
    pub scene: usize,
    pub human_box: BBox,
    pub object_box: BBox,
    pub object_class: usize,
    pub interaction_class: usize,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassReport {
    pub class: usize,
    pub num_gt: usize,
    pub ap: f64,
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub classes: Vec<ClassReport>,
    /// Mean AP over classes with at least one ground-truth instance.
    pub map: f64,
}

impl EvalReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("class,num_gt,ap\n");
        for c in &self.classes {
            s.push_str(&format!("{},{},{}\n", c.class, c.num_gt, c.ap));
        }
        s.push_str(&format!("mAP,,{}\n", self.map));
        s
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("{:>6} {:>7} {:>8}\n", "class", "num_gt", "AP");
        for c in &self.classes {
            s.push_str(&format!("{:>6} {:>7} {:>8.4}\n", c.class, c.num_gt, c.ap));
        }
        s.push_str(&format!("mAP = {:.4}\n", self.map));
        s
    }
}

/// All-point interpolated AP of a ranked list of hit flags against `num_gt`
/// positives, with the precision and recall after each entry.
pub fn average_precision(hits: &[bool], num_gt: usize) -> (f64, Vec<f64>, Vec<f64>) {
    let mut precision = Vec::with_capacity(hits.len());
    let mut recall = Vec::with_capacity(hits.len());
    let mut tp = 0usize;
    for (k, &hit) in hits.iter().enumerate() {
        tp += usize::from(hit);
        precision.push(tp as f64 / (k + 1) as f64);
        recall.push(if num_gt == 0 { 0.0 } else { tp as f64 / num_gt as f64 });
    }
    if num_gt == 0 {
        return (0.0, precision, recall);
    }
    let mut envelope = precision.clone();
    for k in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[k] = envelope[k].max(envelope[k + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for k in 0..hits.len() {
        if recall[k] > prev_recall {
            ap += (recall[k] - prev_recall) * envelope[k];
            prev_recall = recall[k];
        }
    }
    (ap, precision, recall)
}

/// AP of binary `labels` ranked by descending `scores`, ties to the lower index.
pub fn binary_average_precision(scores: &[f64], labels: &[bool]) -> f64 {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let hits: Vec<bool> = order.iter().map(|&i| labels[i]).collect();
    average_precision(&hits, labels.iter().filter(|&&l| l).count()).0
}

/// Per-class AP with greedy matching.
///
/// Predictions are visited by descending score, ties by scene then position
/// in `preds`. Each takes the unmatched ground truth of its scene, object
/// class and interaction class whose smaller box IoU is largest, provided
/// both IoUs exceed `iou_thr`.
pub fn evaluate(preds: &[Prediction], gts: &[Vec<GtInteraction>], num_classes: usize, iou_thr: f64) -> EvalReport {
    let mut classes = Vec::with_capacity(num_classes);
    for c in 0..num_classes {
        let mut matched: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
        let num_gt = gts
            .iter()
            .flatten()
            .filter(|g| g.interaction_classes.contains(&c))
            .count();
        let mut order: Vec<usize> = (0..preds.len()).filter(|&i| preds[i].interaction_class == c).collect();
        order.sort_by(|&a, &b| {
            preds[b]
                .score
                .total_cmp(&preds[a].score)
                .then(preds[a].scene.cmp(&preds[b].scene))
                .then(a.cmp(&b))
        });
        let hits: Vec<bool> = order
            .iter()
            .map(|&i| {
                let p = &preds[i];
                let Some(scene_gt) = gts.get(p.scene) else {
                    return false;
                };
                let mut best: Option<(usize, f64)> = None;
                for (g_idx, g) in scene_gt.iter().enumerate() {
                    if matched[p.scene][g_idx] || g.object_class != p.object_class || !g.interaction_classes.contains(&c) {
                        continue;
                    }
                    let hi = iou(&p.human_box, &g.human_box);
                    let oi = iou(&p.object_box, &g.object_box);
                    if hi <= iou_thr || oi <= iou_thr {
                        continue;
                    }
                    let q = hi.min(oi);
                    if best.is_none_or(|(_, b)| q.partial_cmp(&b) == Some(Ordering::Greater)) {
                        best = Some((g_idx, q));
                    }
                }
                match best {
                    Some((g_idx, _)) => {
                        matched[p.scene][g_idx] = true;
                        true
                    }
                    None => false,
                }
            })
            .collect();
        let (ap, precision, recall) = average_precision(&hits, num_gt);
        classes.push(ClassReport {
            class: c,
            num_gt,
            ap,
            precision,
            recall,
        });
    }
    let with_gt: Vec<f64> = classes.iter().filter(|c| c.num_gt > 0).map(|c| c.ap).collect();
    let map = if with_gt.is_empty() {
        0.0
    } else {
        with_gt.iter().sum::<f64>() / with_gt.len() as f64
    };
    EvalReport { classes, map }
}
