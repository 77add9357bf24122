//! Training with gradient accumulation, prediction and split evaluation.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::autodiff::{AdamW, AdamWConfig, FocalParams, ParamStore, Tape, Tensor, TensorError, Var};
use crate::eval::{binary_average_precision, evaluate, EvalReport, Prediction};
use crate::proposal::{
    build_pairs, hard_mine, interactiveness_forward, label_pairs, pair_feature_width, pair_features,
    proposal_loss, random_sample, static_matrix, topk_select, CandidatePair, IpnParams,
};
use crate::scene::{GtInteraction, Scene};
use crate::structure::{dependency_matrix, layout_map, position_encoding, StructureError};
use crate::transformer::{
    classification_loss, model_forward, total_loss, ForwardStats, ModelConfig, ModelParams, ProposalBatch,
    VariantFlags,
};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Structure(#[from] StructureError),
    #[error("training set is empty")]
    EmptyDataset,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(
        "non-finite loss at epoch {epoch}, scene {scene_id}: L_proposal={l_proposal}, L_cls={l_cls}, \
         max |param| = {max_param}"
    )]
    NonFinite {
        epoch: usize,
        scene_id: u64,
        l_proposal: f64,
        l_cls: f64,
        max_param: f64,
    },
}

/// Rows of the component-contribution grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    /// Random negative sampling, no decoder layers.
    Base,
    /// Hard mining, no decoder layers.
    Hm,
    /// Hard mining and a vanilla decoder.
    Tr,
    /// Hard mining, structured self-attention only.
    TrSs,
    /// Hard mining, structured cross-attention only.
    TrSc,
    /// Hard mining and both structured attentions.
    Full,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Base,
        Variant::Hm,
        Variant::Tr,
        Variant::TrSs,
        Variant::TrSc,
        Variant::Full,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Base => "base",
            Variant::Hm => "hm",
            Variant::Tr => "tr",
            Variant::TrSs => "tr-ss",
            Variant::TrSc => "tr-sc",
            Variant::Full => "full",
        }
    }

    pub fn flags(self) -> VariantFlags {
        let tr = |ss, sc| VariantFlags {
            use_transformer: true,
            structured_self: ss,
            structured_cross: sc,
        };
        match self {
            Variant::Base | Variant::Hm => VariantFlags::BASE,
            Variant::Tr => tr(false, false),
            Variant::TrSs => tr(true, false),
            Variant::TrSc => tr(false, true),
            Variant::Full => VariantFlags::FULL,
        }
    }

    pub fn hard_mining(self) -> bool {
        self != Variant::Base
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "stip" => Ok(Variant::Full),
            _ => Variant::ALL
                .into_iter()
                .find(|v| v.name() == s)
                .ok_or_else(|| format!("unknown variant `{s}` (base, hm, tr, tr-ss, tr-sc, full)")),
        }
    }
}

/// How interactiveness and class probability combine into a ranking score.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScoreStrategy {
    Product,
    ClassOnly,
    /// Product further multiplied by both detection scores.
    WithDetections,
}

impl FromStr for ScoreStrategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "product" => Ok(Self::Product),
            "class-only" => Ok(Self::ClassOnly),
            "with-det" => Ok(Self::WithDetections),
            _ => Err(format!("unknown scoring `{s}` (product, class-only, with-det)")),
        }
    }
}

impl fmt::Display for ScoreStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Product => "product",
            Self::ClassOnly => "class-only",
            Self::WithDetections => "with-det",
        })
    }
}

/// Shapes of every learned component.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelSetup {
    pub num_object_classes: usize,
    pub d_app: usize,
    pub d_ling: usize,
    pub ipn_hidden: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub model: ModelConfig,
}

impl ModelSetup {
    pub fn validate(&self) -> Result<(), String> {
        self.model.validate()?;
        if self.model.pair_width != pair_feature_width(self.d_app, self.d_ling) {
            return Err("pair_width must equal 2*d_app + 8 + d_ling".into());
        }
        if self.grid_h * self.grid_w == 0 {
            return Err("grid must have at least one cell".into());
        }
        Ok(())
    }
}

/// Interactiveness head and decoder, bound to one parameter store.
#[derive(Clone, Debug)]
pub struct Stip {
    pub setup: ModelSetup,
    pub ipn: IpnParams,
    pub model: ModelParams,
    /// Position encoding of the grid, `[H·W × d_model]`.
    pub pos: Tensor,
}

impl Stip {
    /// Registers freshly initialized parameters in a new store.
    pub fn init(setup: &ModelSetup, seed: u64) -> Result<(Self, ParamStore), TrainError> {
        setup.validate().map_err(TrainError::Config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x1a17_5eed);
        let mut store = ParamStore::new();
        let ipn = IpnParams::new(
            &mut store,
            setup.num_object_classes,
            setup.d_app,
            setup.d_ling,
            setup.ipn_hidden,
            &mut rng,
        );
        let model = ModelParams::new(&mut store, &setup.model, &mut rng);
        let pos = position_encoding(setup.grid_h, setup.grid_w, setup.model.d_model)?;
        Ok((
            Self {
                setup: setup.clone(),
                ipn,
                model,
                pos,
            },
            store,
        ))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub variant: Variant,
    /// Proposals kept for the decoder.
    pub top_k: usize,
    /// Pair budget of the negative sampler.
    pub train_pairs: usize,
    pub max_neg_ratio: f64,
    pub focal: FocalParams,
    pub adam: AdamWConfig,
    /// Scenes per optimizer step.
    pub batch: usize,
    pub epochs: usize,
    pub seed: u64,
    pub w_proposal: f64,
    pub w_cls: f64,
    pub iou_thr: f64,
    pub score_floor: f64,
    pub scoring: ScoreStrategy,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Full,
            top_k: 32,
            train_pairs: 32,
            max_neg_ratio: 3.0,
            focal: FocalParams::default(),
            adam: AdamWConfig::default(),
            batch: 8,
            epochs: 30,
            seed: 0,
            w_proposal: 1.0,
            w_cls: 1.0,
            iou_thr: 0.5,
            score_floor: 1e-4,
            scoring: ScoreStrategy::Product,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.top_k == 0 || self.train_pairs == 0 {
            return Err("top_k and train_pairs must be at least 1".into());
        }
        if self.adam.lr.is_nan() || self.adam.lr < 0.0 {
            return Err("lr must be non-negative".into());
        }
        if self.batch == 0 {
            return Err("batch must be at least 1".into());
        }
        if self.max_neg_ratio < 0.0 {
            return Err("max_neg_ratio must be non-negative".into());
        }
        if !(self.focal.alpha > 0.0 && self.focal.alpha <= 1.0) || self.focal.gamma < 0.0 {
            return Err("focal alpha must lie in (0, 1] and gamma be non-negative".into());
        }
        Ok(())
    }
}

/// A scene with its candidate pairs labeled and its static inputs built.
#[derive(Clone, Debug)]
pub struct PreparedScene {
    pub scene_id: u64,
    pub pairs: Vec<CandidatePair>,
    pub static_features: Tensor,
    pub object_classes: Vec<usize>,
    pub labels: Vec<bool>,
    /// Per pair, the layout label index of every grid cell.
    pub layouts: Vec<Vec<usize>>,
    pub grid: Tensor,
    pub gt: Vec<GtInteraction>,
    pub det_scores: Vec<f64>,
}

impl PreparedScene {
    pub fn new(scene: &Scene, iou_thr: f64) -> Result<Self, TrainError> {
        let mut pairs = build_pairs(scene);
        label_pairs(&mut pairs, &scene.gt, iou_thr);
        let grid = &scene.feature_grid;
        let layouts = pairs
            .iter()
            .map(|p| {
                layout_map(&p.human_box, &p.object_box, grid.h, grid.w)
                    .cells
                    .iter()
                    .map(|l| l.index())
                    .collect()
            })
            .collect();
        Ok(Self {
            scene_id: scene.scene_id,
            static_features: static_matrix(&pairs)?,
            object_classes: pairs.iter().map(|p| p.object_class).collect(),
            labels: pairs.iter().map(|p| p.gt_interactive).collect(),
            layouts,
            grid: Tensor::matrix(grid.cells(), grid.d, grid.data.clone())?,
            gt: scene.gt.clone(),
            det_scores: scene.instances.iter().map(|i| i.det_score).collect(),
            pairs,
        })
    }
}

pub fn prepare_scenes(scenes: &[Scene], iou_thr: f64) -> Result<Vec<PreparedScene>, TrainError> {
    scenes.par_iter().map(|s| PreparedScene::new(s, iou_thr)).collect()
}

enum Sampler<'a> {
    Hard,
    Random(&'a mut ChaCha8Rng),
    All,
}

/// Values produced by one scene pass.
#[derive(Clone, Debug)]
pub struct SceneOutput {
    /// Interactiveness of every candidate pair.
    pub pair_scores: Vec<f64>,
    /// Selected proposals, best first.
    pub topk: Vec<usize>,
    /// `[K × C]` class probabilities of the selected proposals.
    pub probs: Vec<f64>,
    pub l_proposal: f64,
    pub l_cls: f64,
    pub stats: ForwardStats,
}

fn scene_pass(
    tape: &mut Tape,
    store: &ParamStore,
    stip: &Stip,
    cfg: &TrainConfig,
    scene: &PreparedScene,
    sampler: Sampler<'_>,
) -> Result<(SceneOutput, Var), TrainError> {
    let flags = cfg.variant.flags();
    let c = stip.setup.model.num_classes;
    let feats = pair_features(tape, store, &stip.ipn, &scene.static_features, &scene.object_classes)?;
    let scores = interactiveness_forward(tape, store, &stip.ipn, feats)?;
    let pair_scores = tape.value(scores).data().to_vec();
    let sampled = match sampler {
        Sampler::Hard => hard_mine(&scene.labels, &pair_scores, cfg.train_pairs, cfg.max_neg_ratio),
        Sampler::Random(rng) => random_sample(&scene.labels, cfg.train_pairs, cfg.max_neg_ratio, rng),
        Sampler::All => (0..scene.pairs.len()).collect(),
    };
    let l_prop = proposal_loss(tape, scores, &sampled, &scene.labels, cfg.focal)?;

    let topk = topk_select(&pair_scores, cfg.top_k);
    let selected = tape.index_rows(feats, &topk)?;
    let ids: Vec<(usize, usize)> = topk
        .iter()
        .map(|&i| (scene.pairs[i].human_idx, scene.pairs[i].object_idx))
        .collect();
    let dep = dependency_matrix(&ids)?;
    let layouts: Vec<Vec<usize>> = if flags.structured_cross {
        topk.iter().map(|&i| scene.layouts[i].clone()).collect()
    } else {
        Vec::new()
    };
    let batch = ProposalBatch {
        features: selected,
        dep: &dep,
        layouts: &layouts,
        grid: &scene.grid,
        pos: &stip.pos,
    };
    let mut stats = ForwardStats::default();
    let logits = model_forward(tape, store, &stip.setup.model, &stip.model, flags, &batch, &mut stats)?;
    let probs = tape.sigmoid(logits);
    let mut targets = vec![0.0; topk.len() * c];
    for (r, &i) in topk.iter().enumerate() {
        for &k in &scene.pairs[i].gt_interaction_classes {
            if k < c {
                targets[r * c + k] = 1.0;
            }
        }
    }
    let l_cls = classification_loss(tape, probs, &targets, cfg.focal)?;
    let total = total_loss(tape, l_prop, l_cls, cfg.w_proposal, cfg.w_cls)?;
    let out = SceneOutput {
        pair_scores,
        topk,
        probs: tape.value(probs).data().to_vec(),
        l_proposal: tape.value(l_prop).item(),
        l_cls: tape.value(l_cls).item(),
        stats,
    };
    Ok((out, total))
}

/// `L_STIP` of one scene with every candidate pair in the proposal loss.
pub fn scene_objective(
    tape: &mut Tape,
    store: &ParamStore,
    stip: &Stip,
    cfg: &TrainConfig,
    scene: &PreparedScene,
) -> Result<(SceneOutput, Var), TrainError> {
    scene_pass(tape, store, stip, cfg, scene, Sampler::All)
}

/// Inference pass; losses are computed over all candidate pairs.
pub fn run_scene(store: &ParamStore, stip: &Stip, cfg: &TrainConfig, scene: &PreparedScene) -> Result<SceneOutput, TrainError> {
    let mut tape = Tape::inference();
    Ok(scene_pass(&mut tape, store, stip, cfg, scene, Sampler::All)?.0)
}

/// Ranked triplets of one scene; `scene_index` is stored in each prediction.
pub fn predictions_from(
    out: &SceneOutput,
    scene: &PreparedScene,
    scene_index: usize,
    num_classes: usize,
    cfg: &TrainConfig,
) -> Vec<Prediction> {
    let mut preds = Vec::new();
    for (r, &i) in out.topk.iter().enumerate() {
        let pair = &scene.pairs[i];
        let z = out.pair_scores[i];
        for c in 0..num_classes {
            let y = out.probs[r * num_classes + c];
            let score = match cfg.scoring {
                ScoreStrategy::Product => z * y,
                ScoreStrategy::ClassOnly => y,
                ScoreStrategy::WithDetections => {
                    z * y * scene.det_scores[pair.human_idx] * scene.det_scores[pair.object_idx]
                }
            };
            if score >= cfg.score_floor {
                preds.push(Prediction {
                    scene: scene_index,
                    human_box: pair.human_box,
                    object_box: pair.object_box,
                    object_class: pair.object_class,
                    interaction_class: c,
                    score,
                });
            }
        }
    }
    preds
}

pub fn predict(
    store: &ParamStore,
    stip: &Stip,
    cfg: &TrainConfig,
    scene: &PreparedScene,
    scene_index: usize,
) -> Result<Vec<Prediction>, TrainError> {
    if scene.pairs.is_empty() {
        return Ok(Vec::new());
    }
    let out = run_scene(store, stip, cfg, scene)?;
    Ok(predictions_from(&out, scene, scene_index, stip.setup.model.num_classes, cfg))
}

#[derive(Clone, Debug)]
pub struct SplitEval {
    pub l_proposal: f64,
    pub l_cls: f64,
    pub l_total: f64,
    pub report: EvalReport,
    pub interactiveness_ap: f64,
    pub attention_ops: usize,
    pub num_predictions: usize,
}

/// Evaluates a split, fanning scenes out over the current rayon pool.
pub fn evaluate_split(
    store: &ParamStore,
    stip: &Stip,
    cfg: &TrainConfig,
    scenes: &[PreparedScene],
) -> Result<SplitEval, TrainError> {
    let c = stip.setup.model.num_classes;
    let outputs: Vec<Option<SceneOutput>> = scenes
        .par_iter()
        .map(|s| {
            if s.pairs.is_empty() {
                Ok(None)
            } else {
                run_scene(store, stip, cfg, s).map(Some)
            }
        })
        .collect::<Result<_, _>>()?;
    let mut preds = Vec::new();
    let (mut lp, mut lc, mut n, mut ops) = (0.0, 0.0, 0usize, 0usize);
    let mut pair_scores = Vec::new();
    let mut pair_labels = Vec::new();
    for (k, (out, scene)) in outputs.iter().zip(scenes).enumerate() {
        let Some(out) = out else { continue };
        preds.extend(predictions_from(out, scene, k, c, cfg));
        lp += out.l_proposal;
        lc += out.l_cls;
        n += 1;
        ops += out.stats.attention_ops;
        pair_scores.extend_from_slice(&out.pair_scores);
        pair_labels.extend_from_slice(&scene.labels);
    }
    let gts: Vec<Vec<GtInteraction>> = scenes.iter().map(|s| s.gt.clone()).collect();
    let report = evaluate(&preds, &gts, c, cfg.iou_thr);
    let denom = n.max(1) as f64;
    let (l_proposal, l_cls) = (lp / denom, lc / denom);
    Ok(SplitEval {
        l_proposal,
        l_cls,
        l_total: cfg.w_proposal * l_proposal + cfg.w_cls * l_cls,
        report,
        interactiveness_ap: binary_average_precision(&pair_scores, &pair_labels),
        attention_ops: ops,
        num_predictions: preds.len(),
    })
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub epoch: usize,
    pub split: &'static str,
    pub l_proposal: f64,
    pub l_cls: f64,
    pub l_total: f64,
    pub map: Option<f64>,
}

pub const METRICS_HEADER: &str = "epoch,split,L_proposal,L_cls,L_STIP,mAP";

impl MetricsRow {
    pub fn csv_line(&self) -> String {
        let map = self.map.map_or(String::new(), |m| m.to_string());
        format!(
            "{},{},{},{},{},{}",
            self.epoch, self.split, self.l_proposal, self.l_cls, self.l_total, map
        )
    }
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.csv_line());
        s.push('\n');
    }
    s
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters of the epoch with the best validation mAP (the last
    /// epoch when there is no validation split).
    pub best: ParamStore,
    pub last: ParamStore,
    pub best_epoch: usize,
    pub best_val_map: Option<f64>,
    pub metrics: Vec<MetricsRow>,
    pub attention_ops: usize,
}

/// Trains `store` in place on `train`, validating on `val` after every epoch.
///
/// `on_epoch` receives each epoch's metrics rows as they are produced.
pub fn train(
    stip: &Stip,
    store: ParamStore,
    train_set: &[PreparedScene],
    val_set: &[PreparedScene],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&[MetricsRow]),
) -> Result<TrainOutcome, TrainError> {
    cfg.validate().map_err(TrainError::Config)?;
    let usable: Vec<usize> = (0..train_set.len()).filter(|&i| !train_set[i].pairs.is_empty()).collect();
    if usable.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut store = store;
    let mut opt = AdamW::new(cfg.adam, &store);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut acc: Vec<Option<Tensor>> = vec![None; store.len()];
    let mut pending = 0usize;
    let mut metrics = Vec::new();
    let mut best: Option<(f64, usize, ParamStore)> = None;
    let mut attention_ops = 0usize;
    let sampler_hard = cfg.variant.hard_mining();

    let flush = |store: &mut ParamStore, opt: &mut AdamW, acc: &mut Vec<Option<Tensor>>, pending: &mut usize| {
        if *pending == 0 {
            return;
        }
        let inv = 1.0 / *pending as f64;
        for g in acc.iter_mut().flatten() {
            g.scale_assign(inv);
        }
        opt.step(store, acc);
        acc.iter_mut().for_each(|g| *g = None);
        *pending = 0;
    };

    for epoch in 1..=cfg.epochs {
        let mut order = usable.clone();
        order.shuffle(&mut rng);
        let (mut lp, mut lc) = (0.0, 0.0);
        for &si in &order {
            let scene = &train_set[si];
            let mut tape = Tape::new();
            let sampler = if sampler_hard { Sampler::Hard } else { Sampler::Random(&mut rng) };
            let (out, total) = scene_pass(&mut tape, &store, stip, cfg, scene, sampler)?;
            if !out.l_proposal.is_finite() || !out.l_cls.is_finite() {
                let max_param = store
                    .iter()
                    .flat_map(|(_, _, t)| t.data().iter().map(|v| v.abs()))
                    .fold(0.0, f64::max);
                return Err(TrainError::NonFinite {
                    epoch,
                    scene_id: scene.scene_id,
                    l_proposal: out.l_proposal,
                    l_cls: out.l_cls,
                    max_param,
                });
            }
            attention_ops += out.stats.attention_ops;
            lp += out.l_proposal;
            lc += out.l_cls;
            let mut grads = tape.backward(total)?;
            for (pid, var) in tape.bound_params() {
                if let Some(g) = grads.take(var) {
                    match &mut acc[pid.index()] {
                        Some(a) => a.add_assign(&g),
                        slot @ None => *slot = Some(g),
                    }
                }
            }
            pending += 1;
            if pending == cfg.batch {
                flush(&mut store, &mut opt, &mut acc, &mut pending);
            }
        }
        flush(&mut store, &mut opt, &mut acc, &mut pending);

        let n = order.len() as f64;
        let (lp, lc) = (lp / n, lc / n);
        let mut rows = vec![MetricsRow {
            epoch,
            split: "train",
            l_proposal: lp,
            l_cls: lc,
            l_total: cfg.w_proposal * lp + cfg.w_cls * lc,
            map: None,
        }];
        if !val_set.is_empty() {
            let v = evaluate_split(&store, stip, cfg, val_set)?;
            rows.push(MetricsRow {
                epoch,
                split: "val",
                l_proposal: v.l_proposal,
                l_cls: v.l_cls,
                l_total: v.l_total,
                map: Some(v.report.map),
            });
            if best.as_ref().is_none_or(|(m, _, _)| v.report.map > *m) {
                best = Some((v.report.map, epoch, store.clone()));
            }
        }
        on_epoch(&rows);
        metrics.extend(rows);
    }

    let (best_val_map, best_epoch, best_store) = match best {
        Some((m, e, s)) => (Some(m), e, s),
        None => (None, cfg.epochs, store.clone()),
    };
    Ok(TrainOutcome {
        best: best_store,
        last: store,
        best_epoch,
        best_val_map,
        metrics,
        attention_ops,
    })
}
