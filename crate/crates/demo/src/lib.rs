//! Browser demo. Each operation has a plain Rust form returning a serializable
//! result and a `wasm_bindgen` wrapper that hands JSON to the page.

use dflora::config::ExperimentConfig;
use dflora::optim::{minimize, random_search, BenchmarkObjective, OptimizerKind};
use dflora::orchestrator::{run, GenerationRecord, Method};
use dflora::seeds::derive_seed;
use dflora::subspace::{projection_std, InitMode, ProjectionTensor, RI_STD};
use dflora::{Error, Result};
use serde::Serialize;
use wasm_bindgen::prelude::*;

/// Largest search budget the page may request; keeps a run to a few seconds.
pub const MAX_MINI_BUDGET: usize = 3000;

#[derive(Clone, Debug, Serialize)]
pub struct BenchCurve {
    pub evaluations: Vec<u64>,
    pub best: Vec<f64>,
    /// Best of the same number of uniform samples.
    pub random_best: f64,
}

pub fn bench_curve(optimizer: &str, objective: &str, dim: usize, evals: usize, seed: u64) -> Result<BenchCurve> {
    let kind: OptimizerKind = optimizer.parse()?;
    let obj = BenchmarkObjective::new(objective.parse()?, dim)?;
    if evals > 50_000 {
        return Err(Error::InvalidArgument("at most 50000 evaluations in the demo".into()));
    }
    let m = minimize(kind, &obj, evals, seed)?;
    Ok(BenchCurve {
        evaluations: m.trace.iter().map(|r| r.evals_used).collect(),
        best: m.trace.iter().map(|r| r.best_fitness).collect(),
        random_best: random_search(&obj, evals, derive_seed(seed, 0xba5e)),
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct Histogram {
    pub lo: f64,
    pub width: f64,
    pub counts: Vec<usize>,
    pub target_std: f64,
    pub measured_std: f64,
    pub entries: usize,
}

/// Samples one projection tensor and bins its entries over ±4 target stds.
pub fn projection_histogram(init: &str, sigma_hat: f64, d: usize, rows: usize, seed: u64, bins: usize) -> Result<Histogram> {
    if bins == 0 || bins > 400 || rows.saturating_mul(d) > 400_000 {
        return Err(Error::InvalidArgument("1..=400 bins and at most 400000 entries".into()));
    }
    let std = match init.parse::<InitMode>()? {
        InitMode::Ril => projection_std(1.0, sigma_hat, d, 1.0)?,
        InitMode::Ri => RI_STD,
    };
    let g = ProjectionTensor::with_std(rows, d, std, seed)?;
    let e = g.entries();
    let mean = e.iter().sum::<f64>() / e.len() as f64;
    let measured_std = (e.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / e.len() as f64).sqrt();
    let lo = -4.0 * std;
    let width = 8.0 * std / bins as f64;
    let mut counts = vec![0; bins];
    for &x in e {
        let b = ((x - lo) / width).floor();
        if b >= 0.0 && (b as usize) < bins {
            counts[b as usize] += 1;
        }
    }
    Ok(Histogram {
        lo,
        width,
        counts,
        target_std: std,
        measured_std,
        entries: e.len(),
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct MiniRun {
    pub baseline_train: f64,
    pub baseline_dev: f64,
    pub train_accuracy: f64,
    pub dev_accuracy: f64,
    pub test_accuracy: Option<f64>,
    pub consumed: usize,
    pub records: Vec<GenerationRecord>,
}

/// A small search on the generated keyword task.
pub fn mini_run(method: &str, d: usize, budget: usize, seed: u64) -> Result<MiniRun> {
    if budget > MAX_MINI_BUDGET {
        return Err(Error::InvalidArgument(format!("at most {MAX_MINI_BUDGET} evaluations in the demo")));
    }
    let mut cfg = ExperimentConfig::default();
    cfg.optimizer.method = method.parse()?;
    cfg.optimizer.population = match cfg.optimizer.method {
        Method::CLora => 10,
        Method::FLora => 5,
    };
    cfg.subspace.d = d;
    cfg.run.budget = budget;
    cfg.run.seeds.data = seed;
    cfg.run.seeds.optimizer = seed;
    cfg.validate()?;
    let prepared = cfg.prepare()?;
    let report = run(&cfg.run_config(), &prepared.model, prepared.data(), |_| {})?;
    let s = report.summary;
    Ok(MiniRun {
        baseline_train: s.baseline_train.accuracy,
        baseline_dev: s.baseline_dev.accuracy,
        train_accuracy: s.train.accuracy,
        dev_accuracy: s.dev.accuracy,
        test_accuracy: s.test.map(|t| t.accuracy),
        consumed: s.consumed,
        records: report.records,
    })
}

fn to_js<T: Serialize>(r: Result<T>) -> std::result::Result<String, JsValue> {
    let value = r.map_err(|e| JsValue::from_str(&e.to_string()))?;
    serde_json::to_string(&value).map_err(|e| JsValue::from_str(&e.to_string()))
}

#[wasm_bindgen(js_name = benchCurve)]
pub fn bench_curve_js(optimizer: &str, objective: &str, dim: usize, evals: usize, seed: u32) -> std::result::Result<String, JsValue> {
    to_js(bench_curve(optimizer, objective, dim, evals, seed as u64))
}

#[wasm_bindgen(js_name = projectionHistogram)]
pub fn projection_histogram_js(
    init: &str,
    sigma_hat: f64,
    d: usize,
    rows: usize,
    seed: u32,
    bins: usize,
) -> std::result::Result<String, JsValue> {
    to_js(projection_histogram(init, sigma_hat, d, rows, seed as u64, bins))
}

#[wasm_bindgen(js_name = miniRun)]
pub fn mini_run_js(method: &str, d: usize, budget: usize, seed: u32) -> std::result::Result<String, JsValue> {
    to_js(mini_run(method, d, budget, seed as u64))
}
