//! Loop-based attention references.

use hoi_core::autodiff::{Linear, Mlp2, ParamId, ParamStore, Tensor};
use hoi_core::scene::BBox;
use hoi_core::structure::{dependency_matrix, layout_map, DependencyMatrix};
use hoi_core::transformer::{AttnWeights, LayerParams, ModelConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Mat = Vec<Vec<f64>>;

pub fn to_mat(t: &Tensor) -> Mat {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

pub fn affine(x: &[f64], w: &Tensor, b: &Tensor) -> Vec<f64> {
    (0..w.cols())
        .map(|c| {
            let mut s = b.data()[c];
            for (r, xv) in x.iter().enumerate() {
                s += xv * w.get2(r, c);
            }
            s
        })
        .collect()
}

pub fn lin(store: &ParamStore, l: &Linear, x: &[f64]) -> Vec<f64> {
    affine(x, store.get(l.w), store.get(l.b))
}

pub fn mlp(store: &ParamStore, m: &Mlp2, x: &[f64]) -> Vec<f64> {
    let h: Vec<f64> = affine(x, store.get(m.w1), store.get(m.b1)).into_iter().map(|v| v.max(0.0)).collect();
    affine(&h, store.get(m.w2), store.get(m.b2))
}

pub fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

/// Attention of every query over per-query key lists, looping per head.
pub fn naive_attend(q: &Mat, keys: &[Mat], v: &Mat, heads: usize) -> (Mat, Vec<Mat>) {
    let d = q[0].len();
    let dk = d / heads;
    let mut out = vec![vec![0.0; d]; q.len()];
    let mut weights = vec![vec![vec![0.0; v.len()]; q.len()]; heads];
    for h in 0..heads {
        let cols = h * dk..(h + 1) * dk;
        for i in 0..q.len() {
            let e: Vec<f64> = (0..v.len())
                .map(|j| {
                    let mut s = 0.0;
                    for c in cols.clone() {
                        s += q[i][c] * keys[i][j][c];
                    }
                    s / (dk as f64).sqrt()
                })
                .collect();
            let m = e.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let ex: Vec<f64> = e.iter().map(|x| (x - m).exp()).collect();
            let z: f64 = ex.iter().sum();
            for j in 0..v.len() {
                let a = ex[j] / z;
                weights[h][i][j] = a;
                for c in cols.clone() {
                    out[i][c] += a * v[j][c];
                }
            }
        }
    }
    (out, weights)
}

pub fn max_diff(a: &Mat, b: &Tensor) -> f64 {
    let mut m: f64 = 0.0;
    for (i, row) in a.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            m = m.max((v - b.get2(i, j)).abs());
        }
    }
    m
}

pub fn layer(d: usize, seed: u64) -> (ParamStore, LayerParams) {
    let cfg = ModelConfig {
        pair_width: d,
        d_grid: 3,
        d_model: d,
        heads: 1,
        d_dep: 4,
        d_lay: 5,
        ffn_hidden: d,
        num_layers: 1,
        num_classes: 3,
        pre_norm: false,
        prior: 0.1,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let p = LayerParams::new(&mut store, "l", &cfg, &mut rng);
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        for v in store.get_mut(id).data_mut() {
            *v += rng.random_range(-0.2..0.2);
        }
    }
    (store, p)
}

pub fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
    Tensor::uniform(&[r, c], -1.0, 1.0, rng)
}

pub fn naive_vanilla(store: &ParamStore, w: &AttnWeights, q: &Mat, kv: &Mat, heads: usize) -> (Mat, Vec<Mat>) {
    let qp: Mat = q.iter().map(|x| lin(store, &w.q, x)).collect();
    let kp: Mat = kv.iter().map(|x| lin(store, &w.k, x)).collect();
    let vp: Mat = kv.iter().map(|x| lin(store, &w.v, x)).collect();
    naive_attend(&qp, &vec![kp; q.len()], &vp, heads)
}

pub fn naive_self(store: &ParamStore, p: &LayerParams, q: &Mat, dep: &DependencyMatrix, heads: usize) -> Mat {
    let e_dep = to_mat(store.get(p.e_dep));
    let qp: Mat = q.iter().map(|x| lin(store, &p.self_attn.q, x)).collect();
    let vp: Mat = q.iter().map(|x| lin(store, &p.self_attn.v, x)).collect();
    let keys: Vec<Mat> = (0..q.len())
        .map(|i| {
            (0..q.len())
                .map(|j| {
                    let base = lin(store, &p.self_attn.k, &q[j]);
                    let mut input = q[j].clone();
                    input.extend_from_slice(&e_dep[dep.get(i, j).index()]);
                    add(&base, &mlp(store, &p.psi, &input))
                })
                .collect()
        })
        .collect();
    naive_attend(&qp, &keys, &vp, heads).0
}

pub fn naive_cross(
    store: &ParamStore,
    p: &LayerParams,
    q: &Mat,
    mem: &Mat,
    pos: &Mat,
    layouts: &[Vec<usize>],
    heads: usize,
) -> Mat {
    let e_lay = to_mat(store.get(p.e_lay));
    let qp: Mat = q.iter().map(|x| lin(store, &p.cross_attn.q, x)).collect();
    let vp: Mat = mem.iter().map(|x| lin(store, &p.cross_attn.v, x)).collect();
    let keys: Vec<Mat> = (0..q.len())
        .map(|i| {
            (0..mem.len())
                .map(|j| {
                    let base = add(&lin(store, &p.cross_attn.k, &mem[j]), &pos[j]);
                    let mut input = mem[j].clone();
                    input.extend_from_slice(&e_lay[layouts[i][j]]);
                    add(&base, &mlp(store, &p.phi, &input))
                })
                .collect()
        })
        .collect();
    naive_attend(&qp, &keys, &vp, heads).0
}

pub fn toy_dep() -> DependencyMatrix {
    dependency_matrix(&[(0, 1), (0, 2), (2, 0), (3, 1)]).unwrap()
}

pub fn random_layouts(rng: &mut ChaCha8Rng, k: usize, h: usize, w: usize) -> Vec<Vec<usize>> {
    (0..k)
        .map(|_| {
            let mut b = || {
                let (x1, y1) = (rng.random_range(0.0..0.6), rng.random_range(0.0..0.6));
                BBox {
                    x1,
                    y1,
                    x2: x1 + rng.random_range(0.1..0.4),
                    y2: y1 + rng.random_range(0.1..0.4),
                }
            };
            let (hb, ob) = (b(), b());
            layout_map(&hb, &ob, h, w).cells.iter().map(|l| l.index()).collect()
        })
        .collect()
}
