//! End-to-end acceptance run: one PASS/FAIL line per criterion.

#[path = "../../core/tests/oracles/mod.rs"]
mod oracles;

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::Instant;

use hoi_core::autodiff::{binary_focal_loss, ParamStore, Tape, Tensor};
use hoi_core::config::RunConfig;
use hoi_core::eval::{evaluate, Prediction};
use hoi_core::proposal::{build_pairs, label_pairs};
use hoi_core::scene::{generate_dataset, load_scenes, save_scenes, GeneratorConfig, GtInteraction};
use hoi_core::structure::{dependency_label, dependency_matrix, layout_map};
use hoi_core::train::{evaluate_split, prepare_scenes, train, Stip};
use hoi_core::transformer::{structure_cross_attention, structure_self_attention, vanilla_attention};
use oracles::attention::*;
use oracles::eval::*;
use oracles::structure::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Verdict {
    Verdict { pass, detail }
}

fn hoi(args: &[&str]) -> (bool, String) {
    let o = Command::new(env!("CARGO_BIN_EXE_hoi")).args(args).output().expect("spawn hoi");
    if !o.status.success() {
        eprintln!("{}", String::from_utf8_lossy(&o.stderr));
    }
    (o.status.success(), String::from_utf8_lossy(&o.stdout).into_owned())
}

fn repo_file(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").join(rel)
}

fn threads() -> String {
    std::thread::available_parallelism().map_or(1, |n| n.get()).min(4).to_string()
}

fn gradient_suite() -> Verdict {
    let t = Instant::now();
    let (ok, out) = hoi(&["gradcheck", "--tolerance", "1e-4", "--step", "1e-5"]);
    let secs = t.elapsed().as_secs_f64();
    let lines: Vec<&str> = out.lines().filter(|l| l.starts_with("PASS") || l.starts_with("FAIL")).collect();
    let failed = lines.iter().filter(|l| l.starts_with("FAIL")).count();
    let full_model = lines.iter().any(|l| l.starts_with("PASS full model") && l.contains("L=1"));
    verdict(
        ok && failed == 0 && full_model && secs < 60.0,
        format!("{} checks, {failed} failed, full 1-layer model checked={full_model}, {secs:.1}s", lines.len()),
    )
}

fn structure_oracles() -> Verdict {
    let mut agree = 0;
    let mut total = 0;
    for h1 in 0..4 {
        for o1 in 0..4 {
            for h2 in 0..4 {
                for o2 in 0..4 {
                    if h1 == o1 || h2 == o2 {
                        continue;
                    }
                    total += 1;
                    let got = dependency_label((h1, o1), (h2, o2)).map(|l| l.index()).ok();
                    agree += usize::from(got == Some(naive_dependency((h1, o1), (h2, o2))));
                }
            }
        }
    }
    let gcfg = GeneratorConfig {
        num_scenes: 1000,
        d_app: 2,
        grid_h: 4,
        grid_w: 4,
        ..GeneratorConfig::default()
    };
    let mut transpose_ok = true;
    for s in generate_dataset(&gcfg, 41).unwrap() {
        let ids: Vec<(usize, usize)> = build_pairs(&s).iter().map(|p| (p.human_idx, p.object_idx)).collect();
        let m = dependency_matrix(&ids).unwrap();
        for i in 0..m.k {
            for j in 0..m.k {
                let (a, b) = (m.get(i, j).index(), m.get(j, i).index());
                transpose_ok &= match a {
                    3 => b == 4,
                    4 => b == 3,
                    _ => a == b,
                };
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut layout_ok = 0;
    for _ in 0..1000 {
        let (hb, ob) = (random_box(&mut rng), random_box(&mut rng));
        let got: Vec<i64> = layout_map(&hb, &ob, 16, 16).counts().iter().map(|&c| c as i64).collect();
        layout_ok += usize::from(got == analytic_counts(&hb, &ob, 16, 16));
    }
    verdict(
        agree == total && transpose_ok && layout_ok == 1000,
        format!("dependency {agree}/{total}, transpose law on 1000 scenes={transpose_ok}, layout counts {layout_ok}/1000"),
    )
}

fn attention_equivalences() -> Verdict {
    let mut worst: f64 = 0.0;
    let mut bitwise = true;
    for heads in [1, 2] {
        let mut rng = ChaCha8Rng::seed_from_u64(heads as u64);
        let (store, p) = layer(8, 2);
        let q = rand_mat(&mut rng, 4, 8);
        let mem = rand_mat(&mut rng, 16, 8);
        let pos = rand_mat(&mut rng, 16, 8);
        let layouts = random_layouts(&mut rng, 4, 4, 4);
        let dep = toy_dep();
        let mut tape = Tape::inference();
        let (qv, mv, pv) = (tape.constant(q.clone()), tape.constant(mem.clone()), tape.constant(pos.clone()));

        let v = vanilla_attention(&mut tape, &store, &p.self_attn, qv, qv, qv, heads).unwrap();
        let (vo, _) = naive_vanilla(&store, &p.self_attn, &to_mat(&q), &to_mat(&q), heads);
        worst = worst.max(max_diff(&vo, tape.value(v.output)));
        let s = structure_self_attention(&mut tape, &store, &p.self_attn, &p.psi, p.e_dep, qv, &dep, heads).unwrap();
        worst = worst.max(max_diff(&naive_self(&store, &p, &to_mat(&q), &dep, heads), tape.value(s.output)));
        let c = structure_cross_attention(&mut tape, &store, &p.cross_attn, &p.phi, p.e_lay, qv, mv, pv, &layouts, heads)
            .unwrap();
        let oracle = naive_cross(&store, &p, &to_mat(&q), &to_mat(&mem), &to_mat(&pos), &layouts, heads);
        worst = worst.max(max_diff(&oracle, tape.value(c.output)));

        let mut zeroed = store.clone();
        p.psi.zero(&mut zeroed);
        p.phi.zero(&mut zeroed);
        let mut tape = Tape::inference();
        let (qv, mv) = (tape.constant(q), tape.constant(mem));
        let zero = tape.constant(Tensor::zeros(&[16, 8]));
        let s = structure_self_attention(&mut tape, &zeroed, &p.self_attn, &p.psi, p.e_dep, qv, &dep, heads).unwrap();
        let v = vanilla_attention(&mut tape, &zeroed, &p.self_attn, qv, qv, qv, heads).unwrap();
        bitwise &= tape.value(s.output) == tape.value(v.output);
        let c = structure_cross_attention(&mut tape, &zeroed, &p.cross_attn, &p.phi, p.e_lay, qv, mv, zero, &layouts, heads)
            .unwrap();
        let v = vanilla_attention(&mut tape, &zeroed, &p.cross_attn, qv, mv, mv, heads).unwrap();
        bitwise &= tape.value(c.output) == tape.value(v.output);
    }
    verdict(
        bitwise && worst <= 1e-10,
        format!("zeroed structure equals vanilla bitwise={bitwise}, max oracle error {worst:.2e}"),
    )
}

fn focal_arithmetic() -> Verdict {
    let spot = (binary_focal_loss(0.5, 1.0, 2.0, 1.0) - 0.25 * 2f64.ln()).abs();
    let mut bce: f64 = 0.0;
    for p in [0.05f64, 0.2, 0.5, 0.8, 0.95] {
        bce = bce.max((binary_focal_loss(p, 1.0, 0.0, 0.5) + 0.5 * p.ln()).abs());
        bce = bce.max((binary_focal_loss(p, 0.0, 0.0, 0.5) + 0.5 * (1.0 - p).ln()).abs());
    }
    verdict(
        spot <= 1e-9 && bce <= 1e-9,
        format!("spot value error {spot:.1e}, half-BCE error {bce:.1e}"),
    )
}

fn matching_and_eval() -> Verdict {
    let scenes = generate_dataset(&small_world(1000, 0.08), 3).unwrap();
    let mut label_ok = true;
    for s in &scenes {
        let mut pairs = build_pairs(s);
        label_pairs(&mut pairs, &s.gt, 0.5);
        for p in &pairs {
            let hits: Vec<&GtInteraction> = s
                .gt
                .iter()
                .filter(|g| oracle_iou(&p.human_box, &g.human_box) > 0.5 && oracle_iou(&p.object_box, &g.object_box) > 0.5)
                .collect();
            let classes: std::collections::BTreeSet<usize> =
                hits.iter().flat_map(|g| g.interaction_classes.iter().copied()).collect();
            label_ok &= p.gt_interactive == !hits.is_empty() && p.gt_interaction_classes == classes;
        }
    }

    let eval_scenes = generate_dataset(&small_world(1000, 0.01), 8).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (mut ap_ok, mut monotone_ok) = (true, true);
    for chunk in eval_scenes.chunks(10) {
        let gts: Vec<Vec<GtInteraction>> = chunk.iter().map(|s| s.gt.clone()).collect();
        let preds = noisy_predictions(&gts, &mut rng, 10);
        let r = evaluate(&preds, &gts, 10, 0.5);
        let (_, map) = oracle_map(&preds, &gts, 10);
        ap_ok &= (r.map - map).abs() < 1e-12;
        let moved: Vec<Prediction> =
            preds.iter().map(|p| Prediction { score: (3.0 * p.score).exp(), ..p.clone() }).collect();
        monotone_ok &= evaluate(&moved, &gts, 10, 0.5).map == r.map;
    }

    let g = |h: [f64; 4], o: [f64; 4]| GtInteraction {
        human_box: b(h[0], h[1], h[2], h[3]),
        object_box: b(o[0], o[1], o[2], o[3]),
        object_class: 1,
        interaction_classes: [0usize].into_iter().collect(),
    };
    let (g1, g2) = (g([0.0, 0.0, 0.4, 0.4], [0.5, 0.5, 0.7, 0.7]), g([0.5, 0.0, 0.9, 0.4], [0.1, 0.6, 0.3, 0.9]));
    let pred = |t: &GtInteraction, score| Prediction {
        scene: 0,
        human_box: t.human_box,
        object_box: t.object_box,
        object_class: 1,
        interaction_class: 0,
        score,
    };
    let hand = vec![pred(&g1, 0.9), pred(&g1, 0.8), pred(&g2, 0.7)];
    let gts = vec![vec![g1.clone(), g2.clone()]];
    let hand_ap = evaluate(&hand, &gts, 1, 0.5).map;
    let hand_ok = (hand_ap - oracle_map(&hand, &gts, 1).1).abs() < 1e-12 && (hand_ap - (0.5 + 1.0 / 3.0)).abs() < 1e-12;

    verdict(
        label_ok && ap_ok && monotone_ok && hand_ok,
        format!(
            "label_pairs on 1000 scenes={label_ok}, AP vs brute force on 1000 scenes={ap_ok}, hand PR case={hand_ok}, monotone invariance={monotone_ok}"
        ),
    )
}

/// Shared benchmark data for the ablation and the sweeps.
fn bench_data(root: &Path) -> PathBuf {
    let data = root.join("data");
    std::fs::create_dir_all(&data).unwrap();
    let cfg = repo_file("configs/bench-data.cfg");
    let (ok, _) = hoi(&["gen-data", "--out", data.to_str().unwrap(), "--config", cfg.to_str().unwrap(), "--seed", "7"]);
    assert!(ok, "gen-data failed");
    data
}

/// `label -> (per-seed mAP, mean mAP)` from an ablation CSV.
fn read_results(path: &Path) -> BTreeMap<String, (BTreeMap<String, f64>, f64)> {
    let mut out: BTreeMap<String, (BTreeMap<String, f64>, f64)> = BTreeMap::new();
    for line in std::fs::read_to_string(path).unwrap().lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        let map: f64 = f[2].parse().unwrap();
        let entry = out.entry(f[0].to_string()).or_default();
        if f[1] == "mean" {
            entry.1 = map;
        } else {
            entry.0.insert(f[1].to_string(), map);
        }
    }
    out
}

fn run_grid(data: &Path, out: &Path, extra: &[&str]) -> (bool, f64) {
    std::fs::create_dir_all(out).unwrap();
    let cfg = repo_file("configs/bench-train.cfg");
    let threads = threads();
    let mut args = vec![
        "ablation",
        "--data",
        data.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--config",
        cfg.to_str().unwrap(),
        "--seeds",
        "0,1,2",
        "--threads",
        &threads,
    ];
    args.extend_from_slice(extra);
    let t = Instant::now();
    let (ok, text) = hoi(&args);
    print!("{text}");
    (ok, t.elapsed().as_secs_f64())
}

fn ablation_ordering(root: &Path) -> Verdict {
    let data = bench_data(root);
    let out = root.join("ablation");
    let (ok, secs) = run_grid(&data, &out, &[]);
    if !ok {
        return verdict(false, "ablation command failed".into());
    }
    let r = read_results(&out.join("ablation.csv"));
    let chain = ["base", "hm", "tr", "full"];
    let mean = |v: &str| r[v].1;
    let mean_ok = chain.windows(2).all(|w| mean(w[0]) <= mean(w[1]));
    let gap = 100.0 * (mean("full") - mean("tr"));
    let seeds_ok = ["0", "1", "2"]
        .iter()
        .filter(|s| chain.windows(2).all(|w| r[w[0]].0[**s] <= r[w[1]].0[**s]))
        .count();
    let means: Vec<String> = chain.iter().map(|v| format!("{v}={:.2}", 100.0 * mean(v))).collect();
    verdict(
        mean_ok && gap >= 2.0 && seeds_ok >= 2 && secs <= 900.0,
        format!(
            "mean mAP {}, full-tr={gap:.2}, ordering in {seeds_ok}/3 seeds, {secs:.0}s on {} thread(s)",
            means.join(" "),
            threads()
        ),
    )
}

fn sweep_shape(root: &Path) -> Verdict {
    let data = root.join("data");
    let out = root.join("sweeps");
    let (ok_k, _) = run_grid(&data, &out, &["--sweep", "K=8,32"]);
    let (ok_l, _) = run_grid(&data, &out, &["--sweep", "L=0..2"]);
    if !(ok_k && ok_l) {
        return verdict(false, "sweep command failed".into());
    }
    let k = read_results(&out.join("sweep_k.csv"));
    let l = read_results(&out.join("sweep_layers.csv"));
    let (k8, k32) = (k["k=8"].1, k["k=32"].1);
    let l0 = l["layers=0"].1;
    let deeper: Vec<f64> = ["layers=1", "layers=2"].iter().map(|x| l[*x].1).collect();
    let pass = k32 >= k8 && deeper.iter().all(|&m| m > l0);
    verdict(
        pass,
        format!(
            "K=8 {:.2} vs K=32 {:.2}; L=0 {:.2} vs L=1 {:.2}, L=2 {:.2}",
            100.0 * k8,
            100.0 * k32,
            100.0 * l0,
            100.0 * deeper[0],
            100.0 * deeper[1]
        ),
    )
}

fn determinism_and_persistence(root: &Path) -> Verdict {
    let data = root.join("small");
    std::fs::create_dir_all(&data).unwrap();
    let small = [
        "--set", "scenes=40", "--set", "val_scenes=10", "--set", "test_scenes=10", "--set", "d_app=8", "--set", "grid_h=4",
        "--set", "grid_w=4",
    ];
    let mut args = vec!["gen-data", "--out", data.to_str().unwrap(), "--seed", "5"];
    args.extend_from_slice(&small);
    assert!(hoi(&args).0);
    let train_once = |name: &str| {
        let out = root.join(name);
        let args = [
            "train", "--data", data.to_str().unwrap(), "--out", out.to_str().unwrap(), "--epochs", "3", "--layers", "1",
            "--d-model", "16", "--k", "8", "--lr", "0.001", "--seed", "4", "--set", "d_ling=8",
        ];
        assert!(hoi(&args).0);
        std::fs::read(out.join("metrics.csv")).unwrap()
    };
    let csv_same = train_once("run_a") == train_once("run_b");

    let mut cfg = RunConfig::default();
    cfg.generator.d_app = 8;
    cfg.generator.grid_h = 4;
    cfg.generator.grid_w = 4;
    (cfg.d_ling, cfg.d_model, cfg.layers, cfg.top_k, cfg.train_pairs, cfg.epochs, cfg.lr) = (8, 16, 1, 8, 8, 2, 1e-3);
    let tr = prepare_scenes(&load_scenes(&data.join("train.jsonl")).unwrap(), 0.5).unwrap();
    let te = prepare_scenes(&load_scenes(&data.join("test.jsonl")).unwrap(), 0.5).unwrap();
    let (stip, store) = Stip::init(&cfg.model_setup(), 0).unwrap();
    let outcome = train(&stip, store, &tr, &[], &cfg.train_config(), |_| {}).unwrap();
    let ckpt = root.join("ckpt");
    outcome.best.save(&ckpt).unwrap();
    let (_, mut fresh) = Stip::init(&cfg.model_setup(), 1).unwrap();
    fresh.copy_from(&ParamStore::load(&ckpt).unwrap()).unwrap();
    let a = evaluate_split(&outcome.best, &stip, &cfg.train_config(), &te).unwrap().report.map;
    let b = evaluate_split(&fresh, &stip, &cfg.train_config(), &te).unwrap().report.map;
    let ckpt_same = a.to_bits() == b.to_bits();

    let scenes = generate_dataset(&GeneratorConfig { num_scenes: 50, ..GeneratorConfig::default() }, 2).unwrap();
    let file = root.join("roundtrip.jsonl");
    save_scenes(&file, &scenes).unwrap();
    let roundtrip = load_scenes(&file).unwrap() == scenes;
    verdict(
        csv_same && ckpt_same && roundtrip,
        format!("metrics CSV identical={csv_same}, checkpoint mAP exact={ckpt_same} ({a:.4}), dataset round-trip={roundtrip}"),
    )
}

fn main() -> ExitCode {
    let root = tempfile::tempdir().unwrap();
    let dir = root.path().to_path_buf();
    let criteria: Vec<(&str, Box<dyn Fn() -> Verdict>)> = vec![
        ("gradient suite", Box::new(gradient_suite)),
        ("structure oracles", Box::new(structure_oracles)),
        ("attention equivalences", Box::new(attention_equivalences)),
        ("focal arithmetic", Box::new(focal_arithmetic)),
        ("matching and evaluation", Box::new(matching_and_eval)),
        ("ablation ordering", Box::new({
            let d = dir.clone();
            move || ablation_ordering(&d)
        })),
        ("sweep shape", Box::new({
            let d = dir.clone();
            move || sweep_shape(&d)
        })),
        ("determinism and persistence", Box::new({
            let d = dir.clone();
            move || determinism_and_persistence(&d)
        })),
    ];
    let mut lines = Vec::new();
    for (n, (name, check)) in criteria.iter().enumerate() {
        let t = Instant::now();
        let v = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
            let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
            verdict(false, format!("panicked: {}", msg.unwrap_or_default()))
        });
        let line = format!(
            "{} criterion {} ({name}): {} [{:.1}s]",
            if v.pass { "PASS" } else { "FAIL" },
            n + 1,
            v.detail,
            t.elapsed().as_secs_f64()
        );
        println!("{line}");
        lines.push((v.pass, line));
    }
    println!("\nacceptance summary");
    for (_, line) in &lines {
        println!("{line}");
    }
    if lines.iter().all(|(p, _)| *p) {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
