//! Decoder over interaction proposals with vanilla or structure-aware
//! attention, the interaction classifier and the classification loss.
//!
//! Structure terms are evaluated through a label table. For self-attention
//! the first layer of `ψ(concat(q_j, E_dep[t]))` splits into `q_j W1q` and
//! `E_dep[t] W1e + b1`; all `K·6` combinations form a table `Ψ` and
//! `e_ij = q_i·(k_j + Ψ[j, dep_ij]) / √d_key` is read off `Q·Ψᵀ` with a
//! column gather. Cross-attention does the same with `φ`, the `n·5`
//! (cell, layout label) combinations and the per-query layout labels.

use rand::Rng;

use crate::autodiff::{FocalParams, LayerNorm, Linear, Mlp2, ParamId, ParamStore, Tape, Tensor, TensorError, Var};
use crate::structure::{DependencyLabel, DependencyMatrix, LayoutLabel};

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Width of the fused pair feature fed to the input projection.
    pub pair_width: usize,
    pub d_grid: usize,
    pub d_model: usize,
    pub heads: usize,
    pub d_dep: usize,
    pub d_lay: usize,
    pub ffn_hidden: usize,
    pub num_layers: usize,
    pub num_classes: usize,
    pub pre_norm: bool,
    /// Initial classifier bias, as a probability.
    pub prior: f64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.d_model == 0 || self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return Err("d_model must be a positive multiple of heads".into());
        }
        if !self.d_model.is_multiple_of(4) {
            return Err("d_model must be divisible by 4 for the position encoding".into());
        }
        if self.num_classes == 0 || self.pair_width == 0 || self.d_grid == 0 {
            return Err("num_classes, pair_width and d_grid must be positive".into());
        }
        if !(self.prior > 0.0 && self.prior < 1.0) {
            return Err("prior must lie in (0, 1)".into());
        }
        Ok(())
    }

    pub fn d_key(&self) -> usize {
        self.d_model / self.heads
    }
}

/// Which attention modules run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct VariantFlags {
    pub use_transformer: bool,
    pub structured_self: bool,
    pub structured_cross: bool,
}

impl VariantFlags {
    pub const BASE: Self = Self {
        use_transformer: false,
        structured_self: false,
        structured_cross: false,
    };
    pub const FULL: Self = Self {
        use_transformer: true,
        structured_self: true,
        structured_cross: true,
    };

    pub fn validate(&self) -> Result<(), String> {
        if !self.use_transformer && (self.structured_self || self.structured_cross) {
            return Err("structured attention requires the transformer".into());
        }
        Ok(())
    }
}

/// Query, key and value projections of one attention module.
#[derive(Clone, Copy, Debug)]
pub struct AttnWeights {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
}

impl AttnWeights {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, d: usize, rng: &mut R) -> Self {
        Self {
            q: Linear::new(store, &format!("{name}.q"), d, d, rng),
            k: Linear::new(store, &format!("{name}.k"), d, d, rng),
            v: Linear::new(store, &format!("{name}.v"), d, d, rng),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerParams {
    pub self_attn: AttnWeights,
    pub self_out: Linear,
    pub cross_attn: AttnWeights,
    pub cross_out: Linear,
    /// `[6 × d_dep]`.
    pub e_dep: ParamId,
    /// `[5 × d_lay]`.
    pub e_lay: ParamId,
    /// `d_model + d_dep → d_model → d_model`.
    pub psi: Mlp2,
    /// `d_model + d_lay → d_model → d_model`.
    pub phi: Mlp2,
    pub ffn: Mlp2,
    pub ln_self: LayerNorm,
    pub ln_cross: LayerNorm,
    pub ln_ffn: LayerNorm,
}

impl LayerParams {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, cfg: &ModelConfig, rng: &mut R) -> Self {
        let d = cfg.d_model;
        Self {
            self_attn: AttnWeights::new(store, &format!("{name}.self"), d, rng),
            self_out: Linear::new(store, &format!("{name}.self.o"), d, d, rng),
            cross_attn: AttnWeights::new(store, &format!("{name}.cross"), d, rng),
            cross_out: Linear::new(store, &format!("{name}.cross.o"), d, d, rng),
            e_dep: store.add(
                format!("{name}.e_dep"),
                Tensor::normal(&[DependencyLabel::COUNT, cfg.d_dep], 1.0, rng),
            ),
            e_lay: store.add(
                format!("{name}.e_lay"),
                Tensor::normal(&[LayoutLabel::COUNT, cfg.d_lay], 1.0, rng),
            ),
            psi: Mlp2::new(store, &format!("{name}.psi"), d + cfg.d_dep, d, d, rng),
            phi: Mlp2::new(store, &format!("{name}.phi"), d + cfg.d_lay, d, d, rng),
            ffn: Mlp2::new(store, &format!("{name}.ffn"), d, cfg.ffn_hidden, d, rng),
            ln_self: LayerNorm::new(store, &format!("{name}.ln_self"), d),
            ln_cross: LayerNorm::new(store, &format!("{name}.ln_cross"), d),
            ln_ffn: LayerNorm::new(store, &format!("{name}.ln_ffn"), d),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ModelParams {
    pub input: Linear,
    pub grid: Linear,
    pub layers: Vec<LayerParams>,
    pub classifier: Mlp2,
}

impl ModelParams {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut R) -> Self {
        let d = cfg.d_model;
        let input = Linear::new(store, "model.input", cfg.pair_width, d, rng);
        let grid = Linear::new(store, "model.grid", cfg.d_grid, d, rng);
        let layers = (0..cfg.num_layers)
            .map(|l| LayerParams::new(store, &format!("model.layer{l}"), cfg, rng))
            .collect();
        let classifier = Mlp2::new(store, "model.cls", d, d, cfg.num_classes, rng);
        let logit = (cfg.prior / (1.0 - cfg.prior)).ln();
        store.get_mut(classifier.b2).data_mut().fill(logit);
        Self {
            input,
            grid,
            layers,
            classifier,
        }
    }
}

/// Counters filled during a forward pass.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ForwardStats {
    pub attention_ops: usize,
}

/// Attention output `[m × d]` and one `[m × n]` weight matrix per head.
#[derive(Clone, Debug)]
pub struct Attention {
    pub output: Var,
    pub weights: Vec<Var>,
}

/// Label-indexed key offsets: row `j * labels + t` of `table` is added to
/// key `j` whenever the query's label for `j` is `t`; `idx[i * n + j]` is
/// that row for query `i`.
struct KeyOffsets<'a> {
    table: Var,
    idx: &'a [usize],
}

fn cols(tape: &mut Tape, x: Var, h: usize, dk: usize, heads: usize) -> Result<Var, TensorError> {
    if heads == 1 {
        Ok(x)
    } else {
        tape.slice_cols(x, h * dk, dk)
    }
}

fn attend(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    offsets: Option<KeyOffsets<'_>>,
    heads: usize,
) -> Result<Attention, TensorError> {
    let d = tape.value(q).cols();
    let n = tape.value(k).rows();
    let dk = d / heads;
    let scale = 1.0 / (dk as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    let mut weights = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = cols(tape, q, h, dk, heads)?;
        let kh = cols(tape, k, h, dk, heads)?;
        let vh = cols(tape, v, h, dk, heads)?;
        let kt = tape.transpose(kh)?;
        let mut e = tape.matmul(qh, kt)?;
        if let Some(off) = &offsets {
            let th = cols(tape, off.table, h, dk, heads)?;
            let tt = tape.transpose(th)?;
            let s = tape.matmul(qh, tt)?;
            let g = tape.gather_cols(s, off.idx, n)?;
            e = tape.add(e, g)?;
        }
        let e = tape.scale(e, scale);
        let a = tape.softmax_rows(e)?;
        outs.push(tape.matmul(a, vh)?);
        weights.push(a);
    }
    let output = if heads == 1 { outs[0] } else { tape.concat_cols(&outs)? };
    Ok(Attention { output, weights })
}

/// Scaled dot-product attention of `queries` over `keys`/`values`.
pub fn vanilla_attention(
    tape: &mut Tape,
    store: &ParamStore,
    w: &AttnWeights,
    queries: Var,
    keys: Var,
    values: Var,
    heads: usize,
) -> Result<Attention, TensorError> {
    let q = w.q.forward(tape, store, queries)?;
    let k = w.k.forward(tape, store, keys)?;
    let v = w.v.forward(tape, store, values)?;
    attend(tape, q, k, v, None, heads)
}

/// Table of `mlp(concat(x_j, emb[t]))` for all rows `j` of `x` and all
/// rows `t` of `emb`, laid out as row `j * T + t`.
fn label_table(
    tape: &mut Tape,
    store: &ParamStore,
    mlp: &Mlp2,
    emb: ParamId,
    x: Var,
) -> Result<Var, TensorError> {
    let d = tape.value(x).cols();
    let w1 = tape.param(store, mlp.w1);
    let b1 = tape.param(store, mlp.b1);
    let w2 = tape.param(store, mlp.w2);
    let b2 = tape.param(store, mlp.b2);
    let e = tape.param(store, emb);
    let rows = tape.value(w1).rows();
    let w1x = tape.slice_rows(w1, 0, d)?;
    let w1e = tape.slice_rows(w1, d, rows - d)?;
    let a = tape.matmul(x, w1x)?;
    let b = tape.matmul(e, w1e)?;
    let b = tape.add_bias(b, b1)?;
    let hidden = tape.pair_add(a, b)?;
    let hidden = tape.relu(hidden);
    let out = tape.matmul(hidden, w2)?;
    tape.add_bias(out, b2)
}

/// Self-attention among proposals whose keys carry
/// `ψ(concat(q_j, E_dep[dep_ij]))`. Values are unchanged.
pub fn structure_self_attention(
    tape: &mut Tape,
    store: &ParamStore,
    w: &AttnWeights,
    psi: &Mlp2,
    e_dep: ParamId,
    queries: Var,
    dep: &DependencyMatrix,
    heads: usize,
) -> Result<Attention, TensorError> {
    let k_rows = tape.value(queries).rows();
    if dep.k != k_rows {
        return Err(TensorError::Shape {
            op: "structure_self_attention",
            lhs: vec![k_rows],
            rhs: vec![dep.k, dep.k],
        });
    }
    let q = w.q.forward(tape, store, queries)?;
    let k = w.k.forward(tape, store, queries)?;
    let v = w.v.forward(tape, store, queries)?;
    let table = label_table(tape, store, psi, e_dep, queries)?;
    let t = DependencyLabel::COUNT;
    let idx: Vec<usize> = (0..k_rows * k_rows)
        .map(|ij| (ij % k_rows) * t + dep.labels[ij].index())
        .collect();
    attend(tape, q, k, v, Some(KeyOffsets { table, idx: &idx }), heads)
}

/// Cross-attention from proposals to grid cells with per-query keys
/// `W_k x_j + pos_j + φ(concat(x_j, E_lay[l_ij]))`.
///
/// `layouts[i][j]` is the layout label index of query `i` at cell `j`.
#[allow(clippy::too_many_arguments)]
pub fn structure_cross_attention(
    tape: &mut Tape,
    store: &ParamStore,
    w: &AttnWeights,
    phi: &Mlp2,
    e_lay: ParamId,
    queries: Var,
    memory: Var,
    pos: Var,
    layouts: &[Vec<usize>],
    heads: usize,
) -> Result<Attention, TensorError> {
    let m = tape.value(queries).rows();
    let n = tape.value(memory).rows();
    if layouts.len() != m || layouts.iter().any(|l| l.len() != n) {
        return Err(TensorError::Shape {
            op: "structure_cross_attention",
            lhs: vec![m, n],
            rhs: vec![layouts.len(), layouts.first().map_or(0, Vec::len)],
        });
    }
    let q = w.q.forward(tape, store, queries)?;
    let k = w.k.forward(tape, store, memory)?;
    let k = tape.add(k, pos)?;
    let v = w.v.forward(tape, store, memory)?;
    let table = label_table(tape, store, phi, e_lay, memory)?;
    let t = LayoutLabel::COUNT;
    let idx: Vec<usize> = layouts
        .iter()
        .flat_map(|row| row.iter().enumerate().map(move |(j, &l)| j * t + l))
        .collect();
    attend(tape, q, k, v, Some(KeyOffsets { table, idx: &idx }), heads)
}

/// Per-scene structure consumed by the decoder.
#[derive(Clone, Debug)]
pub struct DecoderInputs<'a> {
    pub dep: &'a DependencyMatrix,
    /// Projected grid `[n × d_model]`.
    pub memory: Var,
    pub pos: Var,
    pub layouts: &'a [Vec<usize>],
}

#[allow(clippy::too_many_arguments)]
fn residual(
    tape: &mut Tape,
    store: &ParamStore,
    cfg: &ModelConfig,
    ln: &LayerNorm,
    x: Var,
    sub: impl FnOnce(&mut Tape, Var) -> Result<Var, TensorError>,
) -> Result<Var, TensorError> {
    if cfg.pre_norm {
        let normed = ln.forward(tape, store, x)?;
        let y = sub(tape, normed)?;
        tape.add(x, y)
    } else {
        let y = sub(tape, x)?;
        let s = tape.add(x, y)?;
        ln.forward(tape, store, s)
    }
}

/// Self-attention, cross-attention and feed-forward blocks, each with a
/// residual connection and layer norm.
pub fn decoder_layer(
    tape: &mut Tape,
    store: &ParamStore,
    cfg: &ModelConfig,
    p: &LayerParams,
    flags: VariantFlags,
    x: Var,
    inputs: &DecoderInputs<'_>,
    stats: &mut ForwardStats,
) -> Result<Var, TensorError> {
    let heads = cfg.heads;
    let x = residual(tape, store, cfg, &p.ln_self, x, |tape, q| {
        stats.attention_ops += 1;
        let a = if flags.structured_self {
            structure_self_attention(tape, store, &p.self_attn, &p.psi, p.e_dep, q, inputs.dep, heads)?
        } else {
            vanilla_attention(tape, store, &p.self_attn, q, q, q, heads)?
        };
        p.self_out.forward(tape, store, a.output)
    })?;
    let x = residual(tape, store, cfg, &p.ln_cross, x, |tape, q| {
        stats.attention_ops += 1;
        let a = if flags.structured_cross {
            structure_cross_attention(
                tape,
                store,
                &p.cross_attn,
                &p.phi,
                p.e_lay,
                q,
                inputs.memory,
                inputs.pos,
                inputs.layouts,
                heads,
            )?
        } else {
            vanilla_attention(tape, store, &p.cross_attn, q, inputs.memory, inputs.memory, heads)?
        };
        p.cross_out.forward(tape, store, a.output)
    })?;
    residual(tape, store, cfg, &p.ln_ffn, x, |tape, q| p.ffn.forward(tape, store, q))
}

/// Everything `model_forward` reads about one scene's proposals.
#[derive(Clone, Debug)]
pub struct ProposalBatch<'a> {
    /// Fused pair features of the selected proposals, `[K × pair_width]`.
    pub features: Var,
    pub dep: &'a DependencyMatrix,
    pub layouts: &'a [Vec<usize>],
    /// Raw grid `[n × d_grid]`.
    pub grid: &'a Tensor,
    /// Position encoding `[n × d_model]`.
    pub pos: &'a Tensor,
}

/// `[K × C]` logits.
pub fn model_forward(
    tape: &mut Tape,
    store: &ParamStore,
    cfg: &ModelConfig,
    params: &ModelParams,
    flags: VariantFlags,
    batch: &ProposalBatch<'_>,
    stats: &mut ForwardStats,
) -> Result<Var, TensorError> {
    let mut x = params.input.forward(tape, store, batch.features)?;
    if flags.use_transformer && !params.layers.is_empty() {
        let grid = tape.constant(batch.grid.clone());
        let memory = params.grid.forward(tape, store, grid)?;
        let pos = tape.constant(batch.pos.clone());
        let inputs = DecoderInputs {
            dep: batch.dep,
            memory,
            pos,
            layouts: batch.layouts,
        };
        for layer in &params.layers {
            x = decoder_layer(tape, store, cfg, layer, flags, x, &inputs, stats)?;
        }
    }
    params.classifier.forward(tape, store, x)
}

/// Focal loss over all proposal-class cells, normalized by the number of
/// positive cells (at least one).
pub fn classification_loss(
    tape: &mut Tape,
    probs: Var,
    targets: &[f64],
    focal: FocalParams,
) -> Result<Var, TensorError> {
    let total = tape.focal_sum(probs, targets, focal.gamma, focal.alpha)?;
    let positives = targets.iter().sum::<f64>().max(1.0);
    Ok(tape.scale(total, 1.0 / positives))
}

/// Weighted sum of the two objectives.
pub fn total_loss(
    tape: &mut Tape,
    l_proposal: Var,
    l_cls: Var,
    w_proposal: f64,
    w_cls: f64,
) -> Result<Var, TensorError> {
    let a = tape.scale(l_proposal, w_proposal);
    let b = tape.scale(l_cls, w_cls);
    tape.add(a, b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(d: usize) -> (ParamStore, AttnWeights) {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let w = AttnWeights::new(&mut store, "a", d, &mut rng);
        (store, w)
    }

    #[test]
    fn single_key_returns_its_value() {
        let (store, w) = setup(4);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut tape = Tape::new();
        let q = tape.constant(Tensor::normal(&[3, 4], 1.0, &mut rng));
        let kv = tape.constant(Tensor::normal(&[1, 4], 1.0, &mut rng));
        let a = vanilla_attention(&mut tape, &store, &w, q, kv, kv, 1).unwrap();
        let v = w.v.forward(&mut tape, &store, kv).unwrap();
        let out = tape.value(a.output);
        for i in 0..3 {
            assert_eq!(out.row(i), tape.value(v).row(0));
        }
    }

    #[test]
    fn identical_keys_attend_uniformly() {
        let (store, w) = setup(4);
        let mut tape = Tape::new();
        let q = tape.constant(Tensor::from_rows(&[vec![1.0, 2.0, 3.0, 4.0], vec![-1.0, 0.0, 0.5, 2.0]]));
        let kv = tape.constant(Tensor::from_rows(&vec![vec![0.3, -0.2, 0.1, 0.9]; 4]));
        let a = vanilla_attention(&mut tape, &store, &w, q, kv, kv, 2).unwrap();
        for wv in a.weights {
            for x in tape.value(wv).data() {
                assert!((x - 0.25).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn structured_flags_need_transformer() {
        let bad = VariantFlags {
            use_transformer: false,
            structured_self: true,
            structured_cross: false,
        };
        assert!(bad.validate().is_err());
        assert!(VariantFlags::FULL.validate().is_ok());
    }
}
