//! Finite-difference checks of every differentiable operation and of a
//! complete one-layer model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::gradcheck::{check_gradients, check_store_gradients, weighted_sum, GradCheckConfig, GradCheckReport};
use crate::autodiff::{mlp2, ParamStore, Tape, Tensor, TensorError, Var};
use crate::proposal::{interactiveness_forward, pair_features, proposal_loss, IpnParams};
use crate::scene::{generate_dataset, GeneratorConfig};
use crate::structure::dependency_matrix;
use crate::train::{scene_objective, ModelSetup, PreparedScene, Stip, TrainConfig, Variant};
use crate::transformer::{
    decoder_layer, structure_cross_attention, structure_self_attention, vanilla_attention, AttnWeights,
    DecoderInputs, ForwardStats, LayerParams, ModelConfig, VariantFlags,
};

fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::uniform(shape, -2.0, 2.0, rng)
}

fn probs(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::uniform(shape, 0.05, 0.95, rng)
}

/// Small dimensions used by the structured checks.
fn toy_config(d: usize) -> ModelConfig {
    ModelConfig {
        pair_width: d,
        d_grid: 3,
        d_model: d,
        heads: 1,
        d_dep: 4,
        d_lay: 4,
        ffn_hidden: d,
        num_layers: 1,
        num_classes: 4,
        pre_norm: false,
        prior: 0.1,
    }
}

/// Store holding random values for a [`LayerParams`], with nonzero biases.
fn toy_layer(cfg: &ModelConfig, seed: u64) -> (ParamStore, LayerParams) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let layer = LayerParams::new(&mut store, "l", cfg, &mut rng);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        for v in store.get_mut(id).data_mut() {
            *v += rng.random_range(-0.3..0.3);
        }
    }
    (store, layer)
}

/// Tiny end-to-end fixture: one generated scene and a one-layer model.
pub fn toy_model(variant: Variant) -> Result<(Stip, ParamStore, PreparedScene, TrainConfig), crate::train::TrainError> {
    let gen = GeneratorConfig {
        num_scenes: 12,
        min_instances: 3,
        max_instances: 4,
        min_humans: 1,
        max_humans: 2,
        num_object_classes: 3,
        num_interactions: 6,
        grid_h: 4,
        grid_w: 4,
        d_app: 4,
        d_grid: 4,
        ..GeneratorConfig::default()
    };
    let scenes = generate_dataset(&gen, 5).map_err(|e| crate::train::TrainError::Config(e.to_string()))?;
    let prepared: Vec<PreparedScene> = scenes
        .iter()
        .map(|s| PreparedScene::new(s, 0.5))
        .collect::<Result<_, _>>()?;
    let scene = prepared
        .into_iter()
        .find(|s| s.pairs.len() >= 3 && s.labels.iter().any(|&l| l))
        .ok_or_else(|| crate::train::TrainError::Config("no suitable toy scene".into()))?;
    let setup = ModelSetup {
        num_object_classes: 3,
        d_app: 4,
        d_ling: 4,
        ipn_hidden: 8,
        grid_h: 4,
        grid_w: 4,
        model: ModelConfig {
            pair_width: crate::proposal::pair_feature_width(4, 4),
            d_grid: 4,
            d_model: 8,
            heads: 1,
            d_dep: 4,
            d_lay: 4,
            ffn_hidden: 8,
            num_layers: 1,
            num_classes: 6,
            pre_norm: false,
            prior: 0.3,
        },
    };
    let (stip, store) = Stip::init(&setup, 11)?;
    let cfg = TrainConfig {
        variant,
        top_k: 3,
        train_pairs: 3,
        ..TrainConfig::default()
    };
    Ok((stip, store, scene, cfg))
}

type Check = Box<dyn Fn(GradCheckConfig) -> Result<GradCheckReport, TensorError>>;

fn op_checks() -> Vec<Check> {
    let mut v: Vec<Check> = Vec::new();
    macro_rules! leaf_check {
        ($name:literal, $seed:expr, |$rng:ident| $inputs:expr, |$tape:ident, $x:ident| $body:expr) => {
            v.push(Box::new(move |cfg| {
                let mut $rng = ChaCha8Rng::seed_from_u64($seed);
                let inputs: Vec<Tensor> = $inputs;
                let out_w = {
                    let mut t = Tape::inference();
                    let vars: Vec<Var> = inputs.iter().map(|x| t.constant(x.clone())).collect();
                    let $tape = &mut t;
                    let $x = &vars;
                    let o: Var = $body?;
                    rand_t(&mut $rng, $tape.value(o).shape())
                };
                check_gradients($name, &inputs, &[], cfg, |$tape, $x| {
                    let o: Var = $body?;
                    weighted_sum($tape, o, &out_w)
                })
            }));
        };
    }
    leaf_check!("matmul", 1, |r| vec![rand_t(&mut r, &[3, 4]), rand_t(&mut r, &[4, 2])], |t, x| t
        .matmul(x[0], x[1]));
    leaf_check!("transpose", 2, |r| vec![rand_t(&mut r, &[3, 2])], |t, x| t.transpose(x[0]));
    leaf_check!("add", 3, |r| vec![rand_t(&mut r, &[2, 3]), rand_t(&mut r, &[2, 3])], |t, x| t.add(x[0], x[1]));
    leaf_check!("sub", 4, |r| vec![rand_t(&mut r, &[2, 3]), rand_t(&mut r, &[2, 3])], |t, x| t.sub(x[0], x[1]));
    leaf_check!("mul", 5, |r| vec![rand_t(&mut r, &[2, 3]), rand_t(&mut r, &[2, 3])], |t, x| t.mul(x[0], x[1]));
    leaf_check!("add_bias", 6, |r| vec![rand_t(&mut r, &[3, 4]), rand_t(&mut r, &[4])], |t, x| t
        .add_bias(x[0], x[1]));
    leaf_check!("scalar_mul", 7, |r| vec![rand_t(&mut r, &[2, 3])], |t, x| Ok::<_, TensorError>(t.scale(x[0], -1.7)));
    leaf_check!("relu", 8, |r| vec![rand_t(&mut r, &[3, 4])], |t, x| Ok::<_, TensorError>(t.relu(x[0])));
    leaf_check!("sigmoid", 9, |r| vec![rand_t(&mut r, &[3, 4])], |t, x| Ok::<_, TensorError>(t.sigmoid(x[0])));
    leaf_check!("softmax_rows", 10, |r| vec![rand_t(&mut r, &[3, 5])], |t, x| t.softmax_rows(x[0]));
    leaf_check!("concat_last_dim", 11, |r| vec![rand_t(&mut r, &[2, 3]), rand_t(&mut r, &[2, 2])], |t, x| t
        .concat_cols(&[x[0], x[1]]));
    leaf_check!("slice_cols", 12, |r| vec![rand_t(&mut r, &[3, 5])], |t, x| t.slice_cols(x[0], 1, 3));
    leaf_check!("slice_rows", 13, |r| vec![rand_t(&mut r, &[5, 3])], |t, x| t.slice_rows(x[0], 2, 2));
    leaf_check!("embedding_lookup", 14, |r| vec![rand_t(&mut r, &[4, 3])], |t, x| t.embedding(x[0], &[2, 0, 2, 3]));
    leaf_check!("pair_add", 15, |r| vec![rand_t(&mut r, &[3, 4]), rand_t(&mut r, &[2, 4])], |t, x| t
        .pair_add(x[0], x[1]));
    leaf_check!("gather_cols", 16, |r| vec![rand_t(&mut r, &[2, 5])], |t, x| t.gather_cols(
        x[0],
        &[4, 0, 0, 1, 3, 3],
        3
    ));
    leaf_check!("layer_norm", 17, |r| vec![rand_t(&mut r, &[3, 5]), rand_t(&mut r, &[5]), rand_t(&mut r, &[5])], |t, x| t
        .layer_norm(x[0], x[1], x[2], 1e-5));
    leaf_check!("sum", 18, |r| vec![rand_t(&mut r, &[3, 2])], |t, x| Ok::<_, TensorError>(t.sum(x[0])));
    leaf_check!("mean", 19, |r| vec![rand_t(&mut r, &[3, 2])], |t, x| Ok::<_, TensorError>(t.mean(x[0])));
    leaf_check!("focal_loss", 20, |r| vec![probs(&mut r, &[2, 3])], |t, x| t.focal_sum(
        x[0],
        &[1.0, 0.0, 0.0, 1.0, 1.0, 0.0],
        2.0,
        0.25
    ));
    leaf_check!(
        "mlp2",
        21,
        |r| vec![
            rand_t(&mut r, &[3, 4]),
            rand_t(&mut r, &[4, 5]),
            rand_t(&mut r, &[5]),
            rand_t(&mut r, &[5, 2]),
            rand_t(&mut r, &[2])
        ],
        |t, x| mlp2(t, x[0], x[1], x[2], x[3], x[4])
    );
    v
}

fn composite_checks() -> Vec<Check> {
    let mut v: Vec<Check> = Vec::new();

    v.push(Box::new(|cfg| {
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        let mut store = ParamStore::new();
        let ipn = IpnParams::new(&mut store, 3, 3, 2, 4, &mut rng);
        let feats = rand_t(&mut rng, &[5, 14]);
        let classes = [0, 1, 2, 2, 1];
        let labels = [true, false, true, false, false];
        check_store_gradients("proposal_loss(sigmoid+focal)", &store, cfg, |tape, s| {
            let f = pair_features(tape, s, &ipn, &feats, &classes)?;
            let z = interactiveness_forward(tape, s, &ipn, f)?;
            proposal_loss(tape, z, &[0, 1, 2, 3, 4], &labels, Default::default())
        })
    }));

    v.push(Box::new(|cfg| {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let mut store = ParamStore::new();
        let w = AttnWeights::new(&mut store, "a", 8, &mut rng);
        let q = rand_t(&mut rng, &[4, 8]);
        let kv = rand_t(&mut rng, &[5, 8]);
        let out_w = rand_t(&mut rng, &[4, 8]);
        check_store_gradients("vanilla_attention", &store, cfg, |tape, s| {
            let qv = tape.constant(q.clone());
            let k = tape.constant(kv.clone());
            let a = vanilla_attention(tape, s, &w, qv, k, k, 2)?;
            weighted_sum(tape, a.output, &out_w)
        })
    }));

    v.push(Box::new(|cfg| {
        let mcfg = toy_config(8);
        let (store, layer) = toy_layer(&mcfg, 32);
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let q = rand_t(&mut rng, &[3, 8]);
        let dep = dependency_matrix(&[(0, 1), (0, 2), (2, 0)]).map_err(|_| TensorError::Empty("dep"))?;
        let out_w = rand_t(&mut rng, &[3, 8]);
        check_store_gradients("structure_self_attention", &store, cfg, |tape, s| {
            let qv = tape.leaf(q.clone(), true);
            let a = structure_self_attention(tape, s, &layer.self_attn, &layer.psi, layer.e_dep, qv, &dep, 1)?;
            weighted_sum(tape, a.output, &out_w)
        })
    }));

    v.push(Box::new(|cfg| {
        let mcfg = toy_config(8);
        let (store, layer) = toy_layer(&mcfg, 34);
        let mut rng = ChaCha8Rng::seed_from_u64(35);
        let q = rand_t(&mut rng, &[2, 8]);
        let mem = rand_t(&mut rng, &[16, 8]);
        let pos = rand_t(&mut rng, &[16, 8]);
        let layouts: Vec<Vec<usize>> = (0..2).map(|_| (0..16).map(|_| rng.random_range(0..5)).collect()).collect();
        let out_w = rand_t(&mut rng, &[2, 8]);
        check_store_gradients("structure_cross_attention", &store, cfg, |tape, s| {
            let qv = tape.constant(q.clone());
            let m = tape.constant(mem.clone());
            let p = tape.constant(pos.clone());
            let a = structure_cross_attention(tape, s, &layer.cross_attn, &layer.phi, layer.e_lay, qv, m, p, &layouts, 2)?;
            weighted_sum(tape, a.output, &out_w)
        })
    }));

    v.push(Box::new(|cfg| {
        let mcfg = toy_config(8);
        let (store, layer) = toy_layer(&mcfg, 36);
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        let q = rand_t(&mut rng, &[3, 8]);
        let mem = rand_t(&mut rng, &[16, 8]);
        let pos = rand_t(&mut rng, &[16, 8]);
        let dep = dependency_matrix(&[(0, 1), (1, 0), (0, 2)]).map_err(|_| TensorError::Empty("dep"))?;
        let layouts: Vec<Vec<usize>> = (0..3).map(|_| (0..16).map(|_| rng.random_range(0..5)).collect()).collect();
        let out_w = rand_t(&mut rng, &[3, 8]);
        check_store_gradients("decoder_layer", &store, cfg, |tape, s| {
            let qv = tape.constant(q.clone());
            let inputs = DecoderInputs {
                dep: &dep,
                memory: tape.constant(mem.clone()),
                pos: tape.constant(pos.clone()),
                layouts: &layouts,
            };
            let mut stats = ForwardStats::default();
            let o = decoder_layer(tape, s, &mcfg, &layer, VariantFlags::FULL, qv, &inputs, &mut stats)?;
            weighted_sum(tape, o, &out_w)
        })
    }));

    v.push(Box::new(|cfg| {
        let (stip, store, scene, tcfg) =
            toy_model(Variant::Full).map_err(|_| TensorError::Empty("toy model"))?;
        check_store_gradients("full model L_STIP (L=1)", &store, cfg, |tape, s| {
            scene_objective(tape, s, &stip, &tcfg, &scene)
                .map(|(_, v)| v)
                .map_err(|e| match e {
                    crate::train::TrainError::Tensor(t) => t,
                    _ => TensorError::Empty("scene objective"),
                })
        })
    }));
    v
}

/// Runs every check and returns one report per check.
pub fn run_suite(cfg: GradCheckConfig) -> Result<Vec<GradCheckReport>, TensorError> {
    op_checks()
        .into_iter()
        .chain(composite_checks())
        .map(|check| check(cfg))
        .collect()
}
