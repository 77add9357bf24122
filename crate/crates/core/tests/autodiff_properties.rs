use hoi_core::autodiff::gradcheck::{check_gradients, weighted_sum, GradCheckConfig};
use hoi_core::autodiff::{binary_focal_loss, AdamW, AdamWConfig, ParamStore, Tape, Tensor};
use hoi_core::gradsuite::run_suite;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn tensor(shape: &[usize], seed: u64) -> Tensor {
    Tensor::uniform(shape, -2.0, 2.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn fd() -> GradCheckConfig {
    GradCheckConfig {
        step: 1e-5,
        tolerance: 1e-6,
        floor: 1e-3,
    }
}

#[test]
fn matmul_gradients_match_finite_differences() {
    let inputs = [tensor(&[3, 4], 1), tensor(&[4, 5], 2), tensor(&[3, 5], 3)];
    let r = check_gradients("matmul", &inputs, &[false, false, true], fd(), |t, v| {
        let y = t.matmul(v[0], v[1])?;
        weighted_sum(t, y, &inputs[2])
    })
    .unwrap();
    assert!(r.passed, "{}", r.line());
    assert_eq!(r.entries, 12 + 20);
}

#[test]
fn diamond_graph_accumulates_both_paths() {
    // y = a*b + a*a with a used on two branches
    let mut tape = Tape::new();
    let a = tape.leaf(Tensor::scalar(3.0), true);
    let b = tape.leaf(Tensor::scalar(-2.0), true);
    let ab = tape.mul(a, b).unwrap();
    let aa = tape.mul(a, a).unwrap();
    let y = tape.add(ab, aa).unwrap();
    let g = tape.backward(y).unwrap();
    assert_eq!(g.get(a).unwrap().item(), -2.0 + 6.0);
    assert_eq!(g.get(b).unwrap().item(), 3.0);
}

#[test]
fn adamw_drives_quadratic_to_origin() {
    let mut store = ParamStore::new();
    let w = store.add("w", Tensor::new(vec![2], vec![1.5, -0.7]).unwrap());
    let mut opt = AdamW::new(
        AdamWConfig {
            lr: 0.05,
            weight_decay: 0.0,
            ..AdamWConfig::default()
        },
        &store,
    );
    for step in 0..200 {
        opt.config.lr = 0.05 * (1.0 - step as f64 / 200.0);
        let mut tape = Tape::new();
        let v = tape.param(&store, w);
        let sq = tape.mul(v, v).unwrap();
        let loss = tape.sum(sq);
        let mut g = tape.backward(loss).unwrap();
        opt.step(&mut store, &[g.take(v)]);
    }
    assert_eq!(opt.steps(), 200);
    assert!(store.get(w).norm() < 1e-3, "|w| = {}", store.get(w).norm());
}

#[test]
fn zero_learning_rate_leaves_parameters() {
    let mut store = ParamStore::new();
    let w = store.add("w", tensor(&[3, 3], 4));
    let before = store.get(w).clone();
    let mut opt = AdamW::new(
        AdamWConfig {
            lr: 0.0,
            ..AdamWConfig::default()
        },
        &store,
    );
    for _ in 0..5 {
        opt.step(&mut store, &[Some(tensor(&[3, 3], 5))]);
    }
    assert_eq!(store.get(w), &before);
}

#[test]
fn focal_spot_values() {
    assert!((binary_focal_loss(0.5, 1.0, 2.0, 1.0) - 0.25 * 2f64.ln()).abs() < 1e-9);
    for p in [0.1f64, 0.3, 0.5, 0.9] {
        let half_bce = -0.5 * p.ln();
        assert!((binary_focal_loss(p, 1.0, 0.0, 0.5) - half_bce).abs() < 1e-12);
        let half_bce = -0.5 * (1.0 - p).ln();
        assert!((binary_focal_loss(p, 0.0, 0.0, 0.5) - half_bce).abs() < 1e-12);
    }
    assert!(binary_focal_loss(0.0, 1.0, 2.0, 0.25).is_finite());
    assert!(binary_focal_loss(1.0, 0.0, 2.0, 0.25).is_finite());
}

#[test]
fn full_gradient_suite_passes() {
    let reports = run_suite(GradCheckConfig::default()).unwrap();
    assert!(reports.len() >= 20);
    for r in &reports {
        assert!(r.passed, "{}", r.line());
    }
}

fn run_once(seed: u64) -> Vec<f64> {
    let x = tensor(&[4, 6], seed);
    let w = tensor(&[6, 6], seed + 1);
    let mut tape = Tape::new();
    let xv = tape.leaf(x, true);
    let wv = tape.leaf(w, true);
    let h = tape.matmul(xv, wv).unwrap();
    let s = tape.softmax_rows(h).unwrap();
    let l = tape.sum(s);
    let m = tape.mul(h, s).unwrap();
    let m = tape.sum(m);
    let out = tape.add(l, m).unwrap();
    let g = tape.backward(out).unwrap();
    let mut v = g.get(xv).unwrap().data().to_vec();
    v.extend(g.get(wv).unwrap().data());
    v
}

#[test]
fn backward_is_deterministic() {
    let a = run_once(11);
    let b = run_once(11);
    assert_eq!(a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
}

fn cfg() -> GradCheckConfig {
    GradCheckConfig {
        step: 1e-5,
        tolerance: 1e-4,
        floor: 1e-5,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn softmax_rows_sum_to_one(seed in any::<u64>(), r in 1usize..6, c in 1usize..8, scale in 0.1f64..50.0) {
        let x = Tensor::uniform(&[r, c], -scale, scale, &mut ChaCha8Rng::seed_from_u64(seed));
        let mut tape = Tape::inference();
        let v = tape.constant(x);
        let s = tape.softmax_rows(v).unwrap();
        let t = tape.value(s);
        for i in 0..r {
            prop_assert!((t.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(t.row(i).iter().all(|&p| p >= 0.0));
        }
    }

    #[test]
    fn random_graph_gradients_match(seed in any::<u64>(), r in 1usize..4, c in 2usize..5) {
        let inputs = [tensor(&[r, c], seed), tensor(&[c, c], seed ^ 1), tensor(&[c], seed ^ 2), tensor(&[r, c], seed ^ 3)];
        let rep = check_gradients("graph", &inputs, &[false, false, false, true], cfg(), |t, v| {
            let h = t.matmul(v[0], v[1])?;
            let h = t.add_bias(h, v[2])?;
            let s = t.sigmoid(h);
            let sm = t.softmax_rows(h)?;
            let p = t.mul(s, sm)?;
            let q = t.scale(p, 1.7);
            let q = t.sub(q, v[0])?;
            weighted_sum(t, q, &inputs[3])
        }).unwrap();
        prop_assert!(rep.passed, "{}", rep.line());
    }

    #[test]
    fn layer_norm_and_gather_gradients_match(seed in any::<u64>(), r in 1usize..4) {
        let c = 4;
        let idx: Vec<usize> = (0..r * 3).map(|k| (k * 7 + seed as usize) % c).collect();
        let inputs = [tensor(&[r, c], seed), tensor(&[c], seed ^ 5), tensor(&[c], seed ^ 6), tensor(&[r, 3], seed ^ 7)];
        let rep = check_gradients("ln+gather", &inputs, &[false, false, false, true], cfg(), |t, v| {
            let n = t.layer_norm(v[0], v[1], v[2], 1e-5)?;
            let g = t.gather_cols(n, &idx, 3)?;
            weighted_sum(t, g, &inputs[3])
        }).unwrap();
        prop_assert!(rep.passed, "{}", rep.line());
    }

    #[test]
    fn concat_slice_pair_add_gradients_match(seed in any::<u64>(), ra in 1usize..4, rb in 1usize..4) {
        let inputs = [tensor(&[ra, 3], seed), tensor(&[rb, 3], seed ^ 9), tensor(&[ra * rb, 5], seed ^ 10)];
        let rep = check_gradients("pair", &inputs, &[false, false, true], cfg(), |t, v| {
            let p = t.pair_add(v[0], v[1])?;
            let r = t.relu(p);
            let cat = t.concat_cols(&[p, r])?;
            let s = t.slice_cols(cat, 1, 5)?;
            weighted_sum(t, s, &inputs[2])
        }).unwrap();
        prop_assert!(rep.passed, "{}", rep.line());
    }

    #[test]
    fn focal_sum_gradient_matches(seed in any::<u64>(), n in 1usize..8) {
        let logits = tensor(&[n, 1], seed);
        let targets: Vec<f64> = (0..n).map(|k| ((seed >> k) & 1) as f64).collect();
        let rep = check_gradients("focal", &[logits], &[false], cfg(), |t, v| {
            let p = t.sigmoid(v[0]);
            t.focal_sum(p, &targets, 2.0, 0.25)
        }).unwrap();
        prop_assert!(rep.passed, "{}", rep.line());
    }
}
