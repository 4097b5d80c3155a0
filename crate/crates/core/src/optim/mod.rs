//! Derivative-free optimizers behind an ask/tell interface.
//!
//! Objectives only ever hand back a fitness per candidate; lower is better.

pub mod bench;
pub mod cma;
pub mod fwa;

use serde::{Deserialize, Serialize};

pub use bench::{minimize, random_search, Benchmark, BenchmarkObjective, MinimizeOptions, Minimized, TraceRow};
pub use cma::CmaState;
pub use fwa::{FwaConfig, FwaState};

use crate::error::{Error, Result};

/// Candidates proposed by one `ask`.
#[derive(Clone, Debug, PartialEq)]
pub struct AskBatch {
    pub candidates: Vec<Vec<f64>>,
    pub generation: u64,
}

impl AskBatch {
    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Cma,
    Fwa,
}

impl std::str::FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "cma" | "cma-es" | "cmaes" => Ok(OptimizerKind::Cma),
            "fwa" | "lotfwa" | "fireworks" => Ok(OptimizerKind::Fwa),
            other => Err(Error::invalid(format!("unknown optimizer '{other}'"))),
        }
    }
}

/// Either optimizer, driven the same way.
#[derive(Clone, Debug)]
pub enum Optimizer {
    Cma(CmaState),
    Fwa(FwaState),
}

impl Optimizer {
    pub fn dim(&self) -> usize {
        match self {
            Optimizer::Cma(s) => s.dim(),
            Optimizer::Fwa(s) => s.dim(),
        }
    }

    /// Candidates per generation.
    pub fn generation_size(&self) -> usize {
        match self {
            Optimizer::Cma(s) => s.lambda(),
            Optimizer::Fwa(s) => s.config().generation_size(),
        }
    }

    pub fn generation(&self) -> u64 {
        match self {
            Optimizer::Cma(s) => s.generation(),
            Optimizer::Fwa(s) => s.generation(),
        }
    }

    pub fn ask(&mut self) -> AskBatch {
        match self {
            Optimizer::Cma(s) => s.ask(),
            Optimizer::Fwa(s) => s.ask(),
        }
    }

    pub fn tell(&mut self, batch: &AskBatch, fitnesses: &[f64]) -> Result<()> {
        match self {
            Optimizer::Cma(s) => s.tell(batch, fitnesses),
            Optimizer::Fwa(s) => s.tell(batch, fitnesses),
        }
    }

    pub fn best(&self) -> Option<(&[f64], f64)> {
        match self {
            Optimizer::Cma(s) => s.best(),
            Optimizer::Fwa(s) => s.best(),
        }
    }
}

pub(crate) fn check_tell(batch: &AskBatch, fitnesses: &[f64], dim: usize) -> Result<()> {
    if fitnesses.len() != batch.candidates.len() {
        return Err(Error::invalid(format!(
            "{} fitness values for {} candidates",
            fitnesses.len(),
            batch.candidates.len()
        )));
    }
    if let Some(c) = batch.candidates.iter().find(|c| c.len() != dim) {
        return Err(Error::invalid(format!("candidate of length {} in a {dim}-dimensional search", c.len())));
    }
    if let Some((index, &value)) = fitnesses.iter().enumerate().find(|(_, v)| !v.is_finite()) {
        return Err(Error::NonFiniteFitness { index, value });
    }
    Ok(())
}

/// Indices sorted by ascending key; equal keys keep index order.
pub(crate) fn ranking(keys: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..keys.len()).collect();
    order.sort_by(|&a, &b| keys[a].total_cmp(&keys[b]));
    order
}
