//! Interaction proposals: candidate human-object pairs, their fused features,
//! interactiveness scoring, ground-truth labeling, negative sampling and
//! top-K selection.

use std::collections::BTreeSet;

use rand::seq::index::sample;
use rand::Rng;

use crate::autodiff::{binary_focal_loss, FocalParams, Mlp2, ParamId, ParamStore, Tape, Tensor, TensorError, Var};
use crate::scene::{iou, BBox, GtInteraction, Scene};
use crate::structure::{spatial_feature, SpatialFeature};

/// A human paired with another instance of the same scene.
#[derive(Clone, Debug, PartialEq)]
pub struct CandidatePair {
    pub human_idx: usize,
    pub object_idx: usize,
    pub human_box: BBox,
    pub object_box: BBox,
    pub object_class: usize,
    /// `human.feature ++ object.feature ++ spatial_feature`. The linguistic
    /// part is appended on the tape because its table is learned.
    pub static_feature: Vec<f64>,
    pub gt_interactive: bool,
    pub gt_interaction_classes: BTreeSet<usize>,
    pub score: f64,
}

/// Width of the fused pair feature.
pub fn pair_feature_width(d_app: usize, d_ling: usize) -> usize {
    2 * d_app + SpatialFeature::LEN + d_ling
}

/// One pair per (human, other instance); other humans count as objects.
pub fn build_pairs(scene: &Scene) -> Vec<CandidatePair> {
    let mut pairs = Vec::new();
    for (h, hi) in scene.instances.iter().enumerate().filter(|(_, i)| i.is_human) {
        for (o, oi) in scene.instances.iter().enumerate() {
            if o == h {
                continue;
            }
            let mut feature = Vec::with_capacity(hi.feature.len() * 2 + SpatialFeature::LEN);
            feature.extend_from_slice(&hi.feature);
            feature.extend_from_slice(&oi.feature);
            feature.extend_from_slice(&spatial_feature(&hi.bbox, &oi.bbox).0);
            pairs.push(CandidatePair {
                human_idx: h,
                object_idx: o,
                human_box: hi.bbox,
                object_box: oi.bbox,
                object_class: oi.class_id,
                static_feature: feature,
                gt_interactive: false,
                gt_interaction_classes: BTreeSet::new(),
                score: 0.0,
            });
        }
    }
    pairs
}

/// Marks a pair interactive when both of its boxes overlap some ground-truth
/// triplet's boxes by more than `iou_thr`; its classes are the union over all
/// such triplets.
pub fn label_pairs(pairs: &mut [CandidatePair], gt: &[GtInteraction], iou_thr: f64) {
    for p in pairs.iter_mut() {
        let mut classes = BTreeSet::new();
        let mut hit = false;
        for g in gt {
            if iou(&p.human_box, &g.human_box) > iou_thr && iou(&p.object_box, &g.object_box) > iou_thr {
                hit = true;
                classes.extend(g.interaction_classes.iter().copied());
            }
        }
        p.gt_interactive = hit;
        p.gt_interaction_classes = classes;
    }
}

/// Learned linguistic table and interactiveness head.
#[derive(Clone, Debug)]
pub struct IpnParams {
    pub ling: ParamId,
    pub head: Mlp2,
    pub d_ling: usize,
}

impl IpnParams {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        num_object_classes: usize,
        d_app: usize,
        d_ling: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        let ling = store.add("ipn.ling", Tensor::normal(&[num_object_classes, d_ling], 0.1, rng));
        let head = Mlp2::new(store, "ipn.head", pair_feature_width(d_app, d_ling), hidden, 1, rng);
        Self { ling, head, d_ling }
    }
}

/// Fused `[P × (2·d_app + 8 + d_ling)]` features of `pairs`.
pub fn pair_features(
    tape: &mut Tape,
    store: &ParamStore,
    ipn: &IpnParams,
    static_features: &Tensor,
    object_classes: &[usize],
) -> Result<Var, TensorError> {
    let fixed = tape.constant(static_features.clone());
    let table = tape.param(store, ipn.ling);
    let ling = tape.embedding(table, object_classes)?;
    tape.concat_cols(&[fixed, ling])
}

/// Row-stacks the static features of `pairs`.
pub fn static_matrix(pairs: &[CandidatePair]) -> Result<Tensor, TensorError> {
    let width = pairs.first().map_or(0, |p| p.static_feature.len());
    let data: Vec<f64> = pairs.iter().flat_map(|p| p.static_feature.iter().copied()).collect();
    Tensor::matrix(pairs.len(), width, data)
}

/// `[P × 1]` interactiveness probabilities.
pub fn interactiveness_forward(
    tape: &mut Tape,
    store: &ParamStore,
    ipn: &IpnParams,
    features: Var,
) -> Result<Var, TensorError> {
    let logits = ipn.head.forward(tape, store, features)?;
    Ok(tape.sigmoid(logits))
}

fn negatives_allowed(num_pos: usize, budget: usize, max_neg_ratio: f64) -> usize {
    let room = budget - num_pos;
    if num_pos == 0 {
        room
    } else {
        room.min((max_neg_ratio * num_pos as f64).floor() as usize)
    }
}

fn positives_within(labels: &[bool], budget: usize) -> Vec<usize> {
    (0..labels.len()).filter(|&i| labels[i]).take(budget).collect()
}

/// Training subset: positives (lowest indices first) up to `budget`, then the
/// highest-scoring negatives, at most `max_neg_ratio` per positive when any
/// positive exists. Returned indices are ascending.
pub fn hard_mine(labels: &[bool], scores: &[f64], budget: usize, max_neg_ratio: f64) -> Vec<usize> {
    let mut keep = positives_within(labels, budget);
    let mut negs: Vec<usize> = (0..labels.len()).filter(|&i| !labels[i]).collect();
    negs.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    negs.truncate(negatives_allowed(keep.len(), budget, max_neg_ratio));
    keep.extend(negs);
    keep.sort_unstable();
    keep
}

/// Same budget as [`hard_mine`] but negatives drawn uniformly at random.
pub fn random_sample<R: Rng + ?Sized>(labels: &[bool], budget: usize, max_neg_ratio: f64, rng: &mut R) -> Vec<usize> {
    let mut keep = positives_within(labels, budget);
    let negs: Vec<usize> = (0..labels.len()).filter(|&i| !labels[i]).collect();
    let take = negatives_allowed(keep.len(), budget, max_neg_ratio).min(negs.len());
    keep.extend(sample(rng, negs.len(), take).into_iter().map(|k| negs[k]));
    keep.sort_unstable();
    keep
}

/// Focal loss of the sampled scores, normalized by the number of positives
/// (at least one).
pub fn proposal_loss(
    tape: &mut Tape,
    scores: Var,
    sampled: &[usize],
    labels: &[bool],
    focal: FocalParams,
) -> Result<Var, TensorError> {
    let picked = tape.index_rows(scores, sampled)?;
    let targets: Vec<f64> = sampled.iter().map(|&i| f64::from(u8::from(labels[i]))).collect();
    let total = tape.focal_sum(picked, &targets, focal.gamma, focal.alpha)?;
    let positives = targets.iter().sum::<f64>().max(1.0);
    Ok(tape.scale(total, 1.0 / positives))
}

/// Plain-number version of [`proposal_loss`].
pub fn proposal_loss_value(scores: &[f64], sampled: &[usize], labels: &[bool], focal: FocalParams) -> f64 {
    let positives = sampled.iter().filter(|&&i| labels[i]).count().max(1) as f64;
    sampled
        .iter()
        .map(|&i| binary_focal_loss(scores[i], f64::from(u8::from(labels[i])), focal.gamma, focal.alpha))
        .sum::<f64>()
        / positives
}

/// Indices of the `k` highest scores, descending, ties to the lower index.
pub fn topk_select(scores: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(k);
    order
}
