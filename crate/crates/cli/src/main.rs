mod settings;

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use hoi_core::ablation::{ablation_jobs, results_csv, results_table, run_jobs, Splits, Sweep};
use hoi_core::autodiff::gradcheck::GradCheckConfig;
use hoi_core::autodiff::ParamStore;
use hoi_core::config::RunConfig;
use hoi_core::gradsuite::run_suite;
use hoi_core::proposal::{build_pairs, label_pairs, topk_select};
use hoi_core::scene::{generate_dataset, load_scenes, save_scenes, Scene};
use hoi_core::structure::{dependency_matrix, layout_map};
use hoi_core::train::{evaluate_split, metrics_csv, prepare_scenes, run_scene, train, PreparedScene, Stip, Variant, METRICS_HEADER};

use settings::{data_file, parse_sets, Layered, DATA_CONFIG};

const CHECKPOINT_CONFIG: &str = "config.txt";

#[derive(Parser)]
#[command(name = "hoi", version, about = "Two-phase human-object interaction detection on synthetic scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate train/val/test scene files.
    GenData(GenDataArgs),
    /// Train a model and write a checkpoint and metrics log.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Train and compare model variants, or sweep one knob.
    Ablation(AblationArgs),
    /// Run the finite-difference gradient suite.
    Gradcheck(GradcheckArgs),
    /// Dump the dependency matrix and layout maps of one scene.
    InspectScene(InspectArgs),
}

#[derive(Args, Clone)]
struct Common {
    /// key=value config file, applied over the defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override any knob, e.g. --set d_model=64 (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for evaluation and parallel runs.
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Args, Clone, Default)]
struct ModelFlags {
    /// base, hm, tr, tr-ss, tr-sc or full.
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Decoder layers.
    #[arg(long)]
    layers: Option<usize>,
    /// Proposal count and sampler budget.
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    d_model: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
}

impl ModelFlags {
    fn pairs(&self) -> Vec<(String, String)> {
        let mut out = Vec::new();
        let mut push = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                out.push((k.to_string(), v));
            }
        };
        push("variant", self.variant.clone());
        push("epochs", self.epochs.map(|v| v.to_string()));
        push("layers", self.layers.map(|v| v.to_string()));
        push("k", self.k.map(|v| v.to_string()));
        push("lr", self.lr.map(|v| v.to_string()));
        push("batch", self.batch.map(|v| v.to_string()));
        push("d_model", self.d_model.map(|v| v.to_string()));
        push("heads", self.heads.map(|v| v.to_string()));
        out
    }
}

#[derive(Args)]
struct GenDataArgs {
    /// Existing output directory.
    #[arg(long)]
    out: PathBuf,
    /// Training scenes.
    #[arg(long)]
    scenes: Option<usize>,
    #[arg(long)]
    val_scenes: Option<usize>,
    #[arg(long)]
    test_scenes: Option<usize>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct TrainArgs {
    /// Directory written by gen-data.
    #[arg(long)]
    data: PathBuf,
    /// Output directory for the checkpoint and metrics.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    model: ModelFlags,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    /// CSV report path (default: <checkpoint>/eval_<split>.csv).
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct AblationArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated training seeds.
    #[arg(long, default_value = "0,1,2")]
    seeds: String,
    /// Comma-separated variants (default: all six).
    #[arg(long)]
    variants: Option<String>,
    /// Sweep one knob instead of the variants, e.g. K=8,16,32,64 or L=0..8.
    #[arg(long)]
    sweep: Option<String>,
    #[command(flatten)]
    model: ModelFlags,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
    #[arg(long, default_value_t = 1e-5)]
    step: f64,
}

#[derive(Args)]
struct InspectArgs {
    /// A scene file, or a gen-data directory (its test split is used).
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 0)]
    scene: usize,
    #[arg(long)]
    out: PathBuf,
    /// Proposals to show (default: top_k).
    #[arg(long)]
    k: Option<usize>,
    /// Rank proposals with this checkpoint instead of pair order.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[command(flatten)]
    common: Common,
}

enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

type CmdResult = Result<(), Failure>;

trait Classify<T> {
    fn usage(self) -> Result<T, Failure>;
    fn runtime(self) -> Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> Classify<T> for Result<T, E> {
    fn usage(self) -> Result<T, Failure> {
        self.map_err(|e| Failure::Usage(e.into()))
    }
    fn runtime(self) -> Result<T, Failure> {
        self.map_err(|e| Failure::Runtime(e.into()))
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Ablation(a) => cmd_ablation(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::InspectScene(a) => cmd_inspect(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

/// Layers `extra` (a data or checkpoint config, if present), `--config`,
/// then command-line pairs over the defaults, validates, prints the banner
/// and sizes the thread pool.
fn configure(
    command: &str,
    extra: Option<(&Path, &'static str)>,
    common: &Common,
    mut cli_pairs: Vec<(String, String)>,
) -> Result<RunConfig, Failure> {
    let mut layered = Layered::new();
    if let Some((path, source)) = extra {
        if path.is_file() {
            layered.apply_file(path, source).usage()?;
        }
    }
    if let Some(path) = &common.config {
        if !path.is_file() {
            return Err(Failure::Usage(anyhow!("config file {} does not exist", path.display())));
        }
        layered.apply_file(path, "file").usage()?;
    }
    if let Some(s) = common.seed {
        cli_pairs.push(("seed".into(), s.to_string()));
    }
    if let Some(t) = common.threads {
        cli_pairs.push(("threads".into(), t.to_string()));
    }
    cli_pairs.extend(parse_sets(&common.set).map_err(|e| Failure::Usage(anyhow!(e)))?);
    layered.apply_pairs(&cli_pairs, "cli").usage()?;
    layered.cfg.validate().usage()?;
    eprint!("{}", layered.banner(command));
    rayon::ThreadPoolBuilder::new()
        .num_threads(layered.cfg.threads)
        .build_global()
        .ok();
    Ok(layered.cfg)
}

fn load_split(dir: &Path, split: &str) -> Result<Vec<Scene>, Failure> {
    let path = data_file(dir, split);
    if !path.is_file() {
        return Err(Failure::Runtime(anyhow!("missing dataset file {}", path.display())));
    }
    load_scenes(&path).runtime()
}

fn check_dims(cfg: &RunConfig, scenes: &[Scene]) -> Result<(), Failure> {
    for s in scenes {
        let g = &s.feature_grid;
        let d_app = s.instances.first().map_or(cfg.generator.d_app, |i| i.feature.len());
        if d_app != cfg.generator.d_app || g.h != cfg.generator.grid_h || g.w != cfg.generator.grid_w || g.d != cfg.generator.d_grid {
            return Err(Failure::Usage(anyhow!(
                "scene {} has d_app={d_app}, grid {}x{}x{}, but the configuration says d_app={}, grid {}x{}x{}",
                s.scene_id,
                g.h,
                g.w,
                g.d,
                cfg.generator.d_app,
                cfg.generator.grid_h,
                cfg.generator.grid_w,
                cfg.generator.d_grid
            )));
        }
    }
    Ok(())
}

fn gen_data(a: GenDataArgs) -> CmdResult {
    if !a.out.is_dir() {
        return Err(Failure::Usage(anyhow!("output directory {} does not exist", a.out.display())));
    }
    let mut pairs = Vec::new();
    for (k, v) in [("scenes", a.scenes), ("val_scenes", a.val_scenes), ("test_scenes", a.test_scenes)] {
        if let Some(v) = v {
            pairs.push((k.to_string(), v.to_string()));
        }
    }
    let cfg = configure("gen-data", None, &a.common, pairs)?;
    let splits = [
        ("train", cfg.scenes, cfg.seed),
        ("val", cfg.val_scenes, cfg.seed.wrapping_add(1)),
        ("test", cfg.test_scenes, cfg.seed.wrapping_add(2)),
    ];
    let (lo, hi) = cfg.generator.positive_rate_band;
    for (name, n, seed) in splits {
        let scenes = generate_dataset(&cfg.split_generator(n), seed).usage()?;
        save_scenes(&data_file(&a.out, name), &scenes).runtime()?;
        let (mut num_pairs, mut positives) = (0usize, 0usize);
        for s in &scenes {
            let mut p = build_pairs(s);
            label_pairs(&mut p, &s.gt, cfg.iou_thr);
            num_pairs += p.len();
            positives += p.iter().filter(|p| p.gt_interactive).count();
        }
        let rate = positives as f64 / num_pairs.max(1) as f64;
        let band = if (lo..=hi).contains(&rate) { "within" } else { "OUTSIDE" };
        println!(
            "{name:<5} scenes={:<5} pairs={num_pairs:<6} positives={positives:<6} positive_rate={rate:.4} ({band} band [{lo}, {hi}])",
            scenes.len()
        );
    }
    fs::write(a.out.join(DATA_CONFIG), cfg.to_kv()).runtime()?;
    Ok(())
}

fn prepare(cfg: &RunConfig, scenes: &[Scene]) -> Result<Vec<PreparedScene>, Failure> {
    check_dims(cfg, scenes)?;
    prepare_scenes(scenes, cfg.iou_thr).runtime()
}

fn save_checkpoint(dir: &Path, store: &ParamStore, cfg: &RunConfig) -> Result<(), Failure> {
    store.save(dir).runtime()?;
    fs::write(dir.join(CHECKPOINT_CONFIG), cfg.to_kv()).runtime()
}

fn cmd_train(a: TrainArgs) -> CmdResult {
    let data_cfg = a.data.join(DATA_CONFIG);
    let cfg = configure("train", Some((&data_cfg, "data")), &a.common, a.model.pairs())?;
    let train_set = prepare(&cfg, &load_split(&a.data, "train")?)?;
    let val_path = data_file(&a.data, "val");
    let val_set = if val_path.is_file() {
        prepare(&cfg, &load_split(&a.data, "val")?)?
    } else {
        Vec::new()
    };
    fs::create_dir_all(&a.out)
        .with_context(|| format!("creating {}", a.out.display()))
        .runtime()?;
    let metrics_path = a.out.join("metrics.csv");
    let mut log = File::create(&metrics_path)
        .with_context(|| format!("creating {}", metrics_path.display()))
        .runtime()?;
    writeln!(log, "{METRICS_HEADER}").runtime()?;
    let mut log = OpenOptions::new().append(true).open(&metrics_path).runtime()?;

    let (stip, store) = Stip::init(&cfg.model_setup(), cfg.seed).usage()?;
    let tcfg = cfg.train_config();
    let start = Instant::now();
    let mut write_err = None;
    let outcome = train(&stip, store, &train_set, &val_set, &tcfg, |rows| {
        for r in rows {
            println!(
                "epoch {:>3} {:<5} L_proposal={:.5} L_cls={:.5} L_STIP={:.5}{}",
                r.epoch,
                r.split,
                r.l_proposal,
                r.l_cls,
                r.l_total,
                r.map.map_or(String::new(), |m| format!(" mAP={m:.4}"))
            );
            if let Err(e) = writeln!(log, "{}", r.csv_line()) {
                write_err.get_or_insert(e);
            }
        }
    })
    .runtime()?;
    if let Some(e) = write_err {
        return Err(Failure::Runtime(e.into()));
    }
    let ckpt = a.out.join("checkpoint");
    save_checkpoint(&ckpt, &outcome.best, &cfg)?;
    println!(
        "trained {} epochs in {:.1}s; best epoch {} (val mAP {}); checkpoint {}",
        tcfg.epochs,
        start.elapsed().as_secs_f64(),
        outcome.best_epoch,
        outcome.best_val_map.map_or("n/a".to_string(), |m| format!("{m:.4}")),
        ckpt.display()
    );
    println!("attention_ops={}", outcome.attention_ops);
    let test_path = data_file(&a.data, "test");
    if test_path.is_file() {
        let test = prepare(&cfg, &load_split(&a.data, "test")?)?;
        let r = evaluate_split(&outcome.best, &stip, &tcfg, &test).runtime()?;
        println!("test mAP={:.4} interactiveness_AP={:.4}", r.report.map, r.interactiveness_ap);
    }
    debug_assert_eq!(metrics_csv(&outcome.metrics).lines().count(), outcome.metrics.len() + 1);
    Ok(())
}

fn load_checkpoint(dir: &Path, cfg: &RunConfig) -> Result<(Stip, ParamStore), Failure> {
    if !dir.is_dir() {
        return Err(Failure::Runtime(anyhow!("checkpoint directory {} does not exist", dir.display())));
    }
    let (stip, mut store) = Stip::init(&cfg.model_setup(), cfg.seed).usage()?;
    let loaded = ParamStore::load(dir).runtime()?;
    store
        .copy_from(&loaded)
        .with_context(|| format!("checkpoint {} does not match the configured model", dir.display()))
        .runtime()?;
    Ok((stip, store))
}

fn cmd_eval(a: EvalArgs) -> CmdResult {
    let ckpt_cfg = a.checkpoint.join(CHECKPOINT_CONFIG);
    let cfg = configure("eval", Some((&ckpt_cfg, "checkpoint")), &a.common, Vec::new())?;
    let (stip, store) = load_checkpoint(&a.checkpoint, &cfg)?;
    let scenes = prepare(&cfg, &load_split(&a.data, &a.split)?)?;
    let r = evaluate_split(&store, &stip, &cfg.train_config(), &scenes).runtime()?;
    print!("{}", r.report.to_text());
    println!("interactiveness_AP = {:.4}", r.interactiveness_ap);
    println!("attention_ops = {}", r.attention_ops);
    let out = a.out.unwrap_or_else(|| a.checkpoint.join(format!("eval_{}.csv", a.split)));
    fs::write(&out, r.report.to_csv())
        .with_context(|| format!("writing {}", out.display()))
        .runtime()?;
    Ok(())
}

fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> Result<Vec<T>, Failure> {
    s.split(',')
        .filter(|x| !x.trim().is_empty())
        .map(|x| {
            x.trim()
                .parse()
                .map_err(|_| Failure::Usage(anyhow!("invalid {what} `{x}`")))
        })
        .collect()
}

fn cmd_ablation(a: AblationArgs) -> CmdResult {
    let data_cfg = a.data.join(DATA_CONFIG);
    let cfg = configure("ablation", Some((&data_cfg, "data")), &a.common, a.model.pairs())?;
    let seeds: Vec<u64> = parse_list(&a.seeds, "seed")?;
    if seeds.is_empty() {
        return Err(Failure::Usage(anyhow!("--seeds is empty")));
    }
    let (jobs, stem) = match &a.sweep {
        Some(arg) => {
            let sweep = Sweep::parse(arg).map_err(|e| Failure::Usage(anyhow!(e)))?;
            let jobs = sweep.jobs(&cfg, &seeds).map_err(|e| Failure::Usage(anyhow!(e)))?;
            for (_, c) in &jobs {
                c.validate().usage()?;
            }
            (jobs, format!("sweep_{}", sweep.key))
        }
        None => {
            let variants: Vec<Variant> = match &a.variants {
                Some(v) => v
                    .split(',')
                    .map(|x| x.trim().parse().map_err(|e: String| Failure::Usage(anyhow!(e))))
                    .collect::<Result<_, _>>()?,
                None => Variant::ALL.to_vec(),
            };
            (ablation_jobs(&cfg, &variants, &seeds), "ablation".to_string())
        }
    };
    let train_set = prepare(&cfg, &load_split(&a.data, "train")?)?;
    let val_set = prepare(&cfg, &load_split(&a.data, "val")?)?;
    let test_set = prepare(&cfg, &load_split(&a.data, "test")?)?;
    fs::create_dir_all(&a.out).runtime()?;
    let start = Instant::now();
    let results = run_jobs(
        &jobs,
        Splits {
            train: &train_set,
            val: &val_set,
            test: &test_set,
        },
    )
    .runtime()?;
    let table = results_table(&results);
    print!("{table}");
    println!("{} runs in {:.1}s", results.len(), start.elapsed().as_secs_f64());
    fs::write(a.out.join(format!("{stem}.txt")), &table).runtime()?;
    fs::write(a.out.join(format!("{stem}.csv")), results_csv(&results)).runtime()?;
    Ok(())
}

fn cmd_gradcheck(a: GradcheckArgs) -> CmdResult {
    let cfg = GradCheckConfig {
        step: a.step,
        tolerance: a.tolerance,
        ..GradCheckConfig::default()
    };
    let start = Instant::now();
    let reports = run_suite(cfg).runtime()?;
    for r in &reports {
        println!("{}", r.line());
    }
    let failed = reports.iter().filter(|r| !r.passed).count();
    println!(
        "{} checks, {} failed, {:.2}s",
        reports.len(),
        failed,
        start.elapsed().as_secs_f64()
    );
    if failed > 0 {
        return Err(Failure::Runtime(anyhow!("{failed} gradient checks failed")));
    }
    Ok(())
}

fn cmd_inspect(a: InspectArgs) -> CmdResult {
    let (file, data_cfg) = if a.data.is_dir() {
        (data_file(&a.data, "test"), a.data.join(DATA_CONFIG))
    } else {
        (a.data.clone(), a.data.with_file_name(DATA_CONFIG))
    };
    let extra = match &a.checkpoint {
        Some(c) => (c.join(CHECKPOINT_CONFIG), "checkpoint"),
        None => (data_cfg, "data"),
    };
    let cfg = configure("inspect-scene", Some((&extra.0, extra.1)), &a.common, Vec::new())?;
    if !file.is_file() {
        return Err(Failure::Runtime(anyhow!("missing scene file {}", file.display())));
    }
    let scenes = load_scenes(&file).runtime()?;
    let scene = scenes
        .get(a.scene)
        .ok_or_else(|| Failure::Usage(anyhow!("scene index {} out of range ({} scenes)", a.scene, scenes.len())))?;
    let k = a.k.unwrap_or(cfg.top_k);
    let mut pairs = build_pairs(scene);
    label_pairs(&mut pairs, &scene.gt, cfg.iou_thr);
    let chosen: Vec<usize> = match &a.checkpoint {
        Some(dir) => {
            let (stip, store) = load_checkpoint(dir, &cfg)?;
            check_dims(&cfg, std::slice::from_ref(scene))?;
            let prepared = PreparedScene::new(scene, cfg.iou_thr).runtime()?;
            let mut tcfg = cfg.train_config();
            tcfg.top_k = k;
            run_scene(&store, &stip, &tcfg, &prepared).runtime()?.topk
        }
        None => topk_select(&vec![0.0; pairs.len()], k),
    };
    fs::create_dir_all(&a.out).runtime()?;
    let ids: Vec<(usize, usize)> = chosen.iter().map(|&i| (pairs[i].human_idx, pairs[i].object_idx)).collect();
    let dep = dependency_matrix(&ids).runtime()?;
    fs::write(a.out.join("dependency.txt"), dep.to_text()).runtime()?;
    println!(
        "scene {} ({} instances, {} gt triplets): {} proposals",
        scene.scene_id,
        scene.instances.len(),
        scene.gt.len(),
        chosen.len()
    );
    println!("dependency matrix:");
    print!("{}", dep.to_text());
    let (h, w) = (scene.feature_grid.h, scene.feature_grid.w);
    for (r, &i) in chosen.iter().enumerate() {
        let p = &pairs[i];
        let map = layout_map(&p.human_box, &p.object_box, h, w);
        let name = format!("layout_{r:02}.pgm");
        fs::write(a.out.join(&name), map.to_pgm()).runtime()?;
        let c = map.counts();
        println!(
            "proposal {r}: human={} object={} interactive={} classes={:?} {name} counts[bg,union,human,object,inter]={c:?}",
            p.human_idx, p.object_idx, p.gt_interactive, p.gt_interaction_classes
        );
    }
    Ok(())
}
