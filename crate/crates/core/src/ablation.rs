//! Variant grids and hyperparameter sweeps over a fixed dataset.

use rayon::prelude::*;

use crate::config::RunConfig;
use crate::train::{evaluate_split, train, PreparedScene, Stip, TrainError, Variant};

/// Train/validation/test splits shared by every run of a grid.
#[derive(Clone, Copy, Debug)]
pub struct Splits<'a> {
    pub train: &'a [PreparedScene],
    pub val: &'a [PreparedScene],
    pub test: &'a [PreparedScene],
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunResult {
    pub label: String,
    pub seed: u64,
    pub test_map: f64,
    pub interactiveness_ap: f64,
    pub best_epoch: usize,
    /// Attention modules executed during training.
    pub attention_ops: usize,
}

/// Trains one configuration and evaluates its best checkpoint on the test split.
pub fn run_one(cfg: &RunConfig, label: &str, splits: Splits<'_>) -> Result<RunResult, TrainError> {
    cfg.validate().map_err(|e| TrainError::Config(e.to_string()))?;
    let setup = cfg.model_setup();
    let (stip, store) = Stip::init(&setup, cfg.seed)?;
    let tcfg = cfg.train_config();
    let outcome = train(&stip, store, splits.train, splits.val, &tcfg, |_| {})?;
    let test = evaluate_split(&outcome.best, &stip, &tcfg, splits.test)?;
    Ok(RunResult {
        label: label.to_string(),
        seed: cfg.seed,
        test_map: test.report.map,
        interactiveness_ap: test.interactiveness_ap,
        best_epoch: outcome.best_epoch,
        attention_ops: outcome.attention_ops,
    })
}

/// Runs `(label, config)` jobs, possibly concurrently; results keep job order.
pub fn run_jobs(jobs: &[(String, RunConfig)], splits: Splits<'_>) -> Result<Vec<RunResult>, TrainError> {
    jobs.par_iter().map(|(label, cfg)| run_one(cfg, label, splits)).collect()
}

pub fn ablation_jobs(base: &RunConfig, variants: &[Variant], seeds: &[u64]) -> Vec<(String, RunConfig)> {
    let mut jobs = Vec::new();
    for &v in variants {
        for &s in seeds {
            let mut cfg = base.clone();
            cfg.variant = v;
            cfg.seed = s;
            jobs.push((v.name().to_string(), cfg));
        }
    }
    jobs
}

/// A swept knob and its values.
#[derive(Clone, Debug, PartialEq)]
pub struct Sweep {
    pub key: String,
    pub values: Vec<String>,
}

impl Sweep {
    /// Parses `KEY=v1,v2,...` or `KEY=a..b` (inclusive integer range).
    pub fn parse(arg: &str) -> Result<Self, String> {
        let (key, vals) = arg
            .split_once('=')
            .ok_or_else(|| format!("sweep `{arg}` must look like KEY=v1,v2 or KEY=a..b"))?;
        let values: Vec<String> = if let Some((a, b)) = vals.split_once("..") {
            let a: usize = a.trim().parse().map_err(|_| format!("bad range start in `{arg}`"))?;
            let b: usize = b.trim().parse().map_err(|_| format!("bad range end in `{arg}`"))?;
            if a > b {
                return Err(format!("empty range in `{arg}`"));
            }
            (a..=b).map(|v| v.to_string()).collect()
        } else {
            vals.split(',').map(|v| v.trim().to_string()).filter(|v| !v.is_empty()).collect()
        };
        if values.is_empty() {
            return Err(format!("no values in `{arg}`"));
        }
        let key = match key.trim() {
            "K" | "k" => "k".to_string(),
            "L" | "l" => "layers".to_string(),
            other => other.to_string(),
        };
        Ok(Self { key, values })
    }

    pub fn jobs(&self, base: &RunConfig, seeds: &[u64]) -> Result<Vec<(String, RunConfig)>, String> {
        let mut jobs = Vec::new();
        for v in &self.values {
            for &s in seeds {
                let mut cfg = base.clone();
                cfg.set(&self.key, v).map_err(|e| e.to_string())?;
                cfg.seed = s;
                jobs.push((format!("{}={v}", self.key), cfg));
            }
        }
        Ok(jobs)
    }
}

/// Mean of `test_map` per label, in first-seen label order.
pub fn means(results: &[RunResult]) -> Vec<(String, f64, f64)> {
    let mut labels: Vec<&str> = Vec::new();
    for r in results {
        if !labels.contains(&r.label.as_str()) {
            labels.push(&r.label);
        }
    }
    labels
        .into_iter()
        .map(|l| {
            let rows: Vec<&RunResult> = results.iter().filter(|r| r.label == l).collect();
            let n = rows.len() as f64;
            let map = rows.iter().map(|r| r.test_map).sum::<f64>() / n;
            let iap = rows.iter().map(|r| r.interactiveness_ap).sum::<f64>() / n;
            (l.to_string(), map, iap)
        })
        .collect()
}

pub fn results_csv(results: &[RunResult]) -> String {
    let mut s = String::from("label,seed,test_mAP,interactiveness_AP,best_epoch,attention_ops\n");
    for r in results {
        s.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.label, r.seed, r.test_map, r.interactiveness_ap, r.best_epoch, r.attention_ops
        ));
    }
    for (label, map, iap) in means(results) {
        s.push_str(&format!("{label},mean,{map},{iap},,\n"));
    }
    s
}

/// Aligned table: one row per label, one column per seed, then the mean.
pub fn results_table(results: &[RunResult]) -> String {
    let mut seeds: Vec<u64> = Vec::new();
    for r in results {
        if !seeds.contains(&r.seed) {
            seeds.push(r.seed);
        }
    }
    let width = results.iter().map(|r| r.label.len()).max().unwrap_or(5).max(7);
    let mut s = format!("{:<width$}", "variant");
    for seed in &seeds {
        s.push_str(&format!(" {:>9}", format!("seed{seed}")));
    }
    s.push_str(&format!(" {:>9} {:>9}\n", "mean mAP", "mean iAP"));
    for (label, map, iap) in means(results) {
        s.push_str(&format!("{label:<width$}"));
        for seed in &seeds {
            match results.iter().find(|r| r.label == label && r.seed == *seed) {
                Some(r) => s.push_str(&format!(" {:>9.2}", 100.0 * r.test_map)),
                None => s.push_str(&format!(" {:>9}", "-")),
            }
        }
        s.push_str(&format!(" {:>9.2} {:>9.2}\n", 100.0 * map, 100.0 * iap));
    }
    s
}
