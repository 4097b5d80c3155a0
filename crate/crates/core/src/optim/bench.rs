//! Benchmark objectives and a budgeted minimization loop for validating the
//! optimizers on their own.

use std::f64::consts::PI;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{CmaState, FwaConfig, FwaState, Optimizer, OptimizerKind};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Benchmark {
    Sphere,
    Rastrigin,
    Rosenbrock,
}

impl Benchmark {
    pub fn eval(self, x: &[f64]) -> f64 {
        match self {
            Benchmark::Sphere => x.iter().map(|v| v * v).sum(),
            Benchmark::Rastrigin => {
                10.0 * x.len() as f64 + x.iter().map(|v| v * v - 10.0 * (2.0 * PI * v).cos()).sum::<f64>()
            }
            Benchmark::Rosenbrock => x
                .windows(2)
                .map(|w| 100.0 * (w[1] - w[0] * w[0]).powi(2) + (1.0 - w[0]).powi(2))
                .sum(),
        }
    }

    /// Conventional per-coordinate search domain.
    pub fn domain(self) -> (f64, f64) {
        match self {
            Benchmark::Sphere => (-5.0, 5.0),
            Benchmark::Rastrigin => (-5.12, 5.12),
            Benchmark::Rosenbrock => (-2.048, 2.048),
        }
    }

    /// Point where the global minimum 0 is attained.
    pub fn optimum(self, dim: usize) -> Vec<f64> {
        match self {
            Benchmark::Sphere | Benchmark::Rastrigin => vec![0.0; dim],
            Benchmark::Rosenbrock => vec![1.0; dim],
        }
    }
}

impl std::str::FromStr for Benchmark {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sphere" => Ok(Benchmark::Sphere),
            "rastrigin" => Ok(Benchmark::Rastrigin),
            "rosenbrock" => Ok(Benchmark::Rosenbrock),
            other => Err(Error::invalid(format!("unknown benchmark '{other}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkObjective {
    pub name: Benchmark,
    pub dim: usize,
}

impl BenchmarkObjective {
    pub fn new(name: Benchmark, dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("benchmark dimension must be positive"));
        }
        if name == Benchmark::Rosenbrock && dim < 2 {
            return Err(Error::invalid("rosenbrock needs at least two dimensions"));
        }
        Ok(BenchmarkObjective { name, dim })
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        self.name.eval(x)
    }
}

/// Knobs for [`minimize`]; defaults mirror the subspace-search population sizes.
#[derive(Clone, Debug, PartialEq)]
pub struct MinimizeOptions {
    pub cma_population: usize,
    /// Initial step size as a fraction of the domain width.
    pub cma_sigma_fraction: f64,
    pub fireworks: usize,
    pub sparks: usize,
    pub spark_bounds: (usize, usize),
    /// Initial amplitude as a fraction of the domain width.
    pub fwa_amplitude_fraction: f64,
    pub fwa_min_amplitude: f64,
}

impl Default for MinimizeOptions {
    fn default() -> Self {
        MinimizeOptions {
            cma_population: 20,
            cma_sigma_fraction: 0.3,
            fireworks: 5,
            sparks: 15,
            spark_bounds: (1, 10),
            fwa_amplitude_fraction: 0.5,
            fwa_min_amplitude: 1e-9,
        }
    }
}

/// One generation of a minimization trace.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub generation: u64,
    pub evals_used: u64,
    pub best_fitness: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Minimized {
    pub best_point: Vec<f64>,
    pub best_fitness: f64,
    pub trace: Vec<TraceRow>,
    pub evaluations: u64,
}

impl Minimized {
    /// Tab-separated `generation, evals_used, best_fitness`, one line per generation.
    pub fn write_trace<W: Write>(&self, mut out: W) -> Result<()> {
        for row in &self.trace {
            writeln!(out, "{}\t{}\t{:e}", row.generation, row.evals_used, row.best_fitness)?;
        }
        Ok(())
    }
}

pub fn build_optimizer(
    kind: OptimizerKind,
    objective: &BenchmarkObjective,
    max_evals: usize,
    options: &MinimizeOptions,
    seed: u64,
) -> Result<Optimizer> {
    let (lo, hi) = objective.name.domain();
    let width = hi - lo;
    match kind {
        OptimizerKind::Cma => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x05ee_d0f5_ca1e);
            let mean = (0..objective.dim).map(|_| rng.random_range(lo..=hi)).collect();
            let state = CmaState::new(
                objective.dim,
                options.cma_population,
                mean,
                options.cma_sigma_fraction * width,
                seed,
            )?;
            Ok(Optimizer::Cma(state))
        }
        OptimizerKind::Fwa => {
            let amp = options.fwa_amplitude_fraction * width;
            let gen_size = options.fireworks + options.sparks;
            let cfg = FwaConfig::with_box(
                objective.dim,
                options.fireworks,
                options.sparks,
                options.spark_bounds,
                (options.fwa_min_amplitude, width),
                lo,
                hi,
            )
            .initial_amplitude(amp)
            .horizon((max_evals / gen_size.max(1)) as u64);
            Ok(Optimizer::Fwa(FwaState::new(cfg, seed)?))
        }
    }
}

/// Runs ask/tell until the next generation would exceed `max_evals`.
pub fn minimize(
    kind: OptimizerKind,
    objective: &BenchmarkObjective,
    max_evals: usize,
    seed: u64,
) -> Result<Minimized> {
    minimize_with(kind, objective, max_evals, seed, &MinimizeOptions::default(), |_| {})
}

/// [`minimize`] with explicit options and a hook called with the optimizer after every tell.
pub fn minimize_with(
    kind: OptimizerKind,
    objective: &BenchmarkObjective,
    max_evals: usize,
    seed: u64,
    options: &MinimizeOptions,
    mut after_tell: impl FnMut(&Optimizer),
) -> Result<Minimized> {
    let mut opt = build_optimizer(kind, objective, max_evals, options, seed)?;
    let gen_size = opt.generation_size();
    if max_evals < gen_size {
        return Err(Error::invalid(format!(
            "evaluation budget {max_evals} is below one generation ({gen_size})"
        )));
    }
    let mut evals = 0u64;
    let mut trace = Vec::new();
    let mut best: Option<(Vec<f64>, f64)> = None;
    while evals as usize + gen_size <= max_evals {
        let batch = opt.ask();
        let fitness: Vec<f64> = batch.candidates.iter().map(|c| objective.eval(c)).collect();
        evals += fitness.len() as u64;
        opt.tell(&batch, &fitness)?;
        after_tell(&opt);
        if let Some((x, f)) = opt.best() {
            if best.as_ref().is_none_or(|(_, b)| f < *b) {
                best = Some((x.to_vec(), f));
            }
        }
        trace.push(TraceRow {
            generation: opt.generation(),
            evals_used: evals,
            best_fitness: best.as_ref().map(|b| b.1).unwrap_or(f64::INFINITY),
        });
    }
    let (best_point, best_fitness) = best.expect("at least one generation ran");
    Ok(Minimized {
        best_point,
        best_fitness,
        trace,
        evaluations: evals,
    })
}

/// Best of `evals` uniform samples over the objective's domain.
pub fn random_search(objective: &BenchmarkObjective, evals: usize, seed: u64) -> f64 {
    let (lo, hi) = objective.name.domain();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = vec![0.0; objective.dim];
    let mut best = f64::INFINITY;
    for _ in 0..evals {
        x.iter_mut().for_each(|v| *v = rng.random_range(lo..=hi));
        best = best.min(objective.eval(&x));
    }
    best
}
