//! Fireworks algorithm with a loser-out tournament.
//!
//! Each generation every firework explodes into a rank-dependent number of
//! sparks drawn uniformly from its amplitude box. The best point of each
//! cluster (the firework itself included) becomes the next firework. A firework
//! whose fitness, extrapolated with its last improvement over the remaining
//! generations, still cannot reach the global best is restarted uniformly in
//! the search box.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{check_tell, ranking, AskBatch};
use crate::error::{Error, Result};

pub const AMPLIFY: f64 = 1.2;
pub const REDUCE: f64 = 0.9;

#[derive(Clone, Debug, PartialEq)]
pub struct FwaConfig {
    pub dim: usize,
    pub n_fireworks: usize,
    /// Total sparks per generation, shared across fireworks.
    pub spark_budget: usize,
    pub spark_bounds: (usize, usize),
    pub amplitude_bounds: (f64, f64),
    pub initial_amplitude: f64,
    pub search_bounds: Vec<(f64, f64)>,
    /// Expected number of generations; `None` means unbounded, in which case
    /// any firework that still improves is kept.
    pub horizon: Option<u64>,
    /// Firework 0 starts here instead of at a uniform sample.
    pub anchor: Option<Vec<f64>>,
}

impl FwaConfig {
    pub fn new(
        dim: usize,
        n_fireworks: usize,
        spark_budget: usize,
        spark_bounds: (usize, usize),
        amplitude_bounds: (f64, f64),
        search_bounds: Vec<(f64, f64)>,
    ) -> Self {
        FwaConfig {
            dim,
            n_fireworks,
            spark_budget,
            spark_bounds,
            amplitude_bounds,
            initial_amplitude: amplitude_bounds.1,
            search_bounds,
            horizon: None,
            anchor: None,
        }
    }

    /// Same `(lo, hi)` on every coordinate.
    pub fn with_box(
        dim: usize,
        n_fireworks: usize,
        spark_budget: usize,
        spark_bounds: (usize, usize),
        amplitude_bounds: (f64, f64),
        lo: f64,
        hi: f64,
    ) -> Self {
        Self::new(dim, n_fireworks, spark_budget, spark_bounds, amplitude_bounds, vec![(lo, hi); dim])
    }

    pub fn initial_amplitude(mut self, a: f64) -> Self {
        self.initial_amplitude = a;
        self
    }

    pub fn horizon(mut self, generations: u64) -> Self {
        self.horizon = Some(generations);
        self
    }

    pub fn anchor(mut self, start: Vec<f64>) -> Self {
        self.anchor = Some(start);
        self
    }

    pub fn generation_size(&self) -> usize {
        self.n_fireworks + self.spark_budget
    }

    fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::invalid("FWA dimension must be positive"));
        }
        if self.n_fireworks == 0 {
            return Err(Error::invalid("FWA needs at least one firework"));
        }
        if self.spark_budget < self.n_fireworks {
            return Err(Error::invalid(format!(
                "spark budget {} is smaller than the firework count {}",
                self.spark_budget, self.n_fireworks
            )));
        }
        let (smin, smax) = self.spark_bounds;
        if smin == 0 || smin > smax {
            return Err(Error::invalid(format!("malformed spark bounds ({smin}, {smax})")));
        }
        if smin * self.n_fireworks > self.spark_budget || smax * self.n_fireworks < self.spark_budget {
            return Err(Error::invalid(format!(
                "spark budget {} cannot be split over {} fireworks within ({smin}, {smax})",
                self.spark_budget, self.n_fireworks
            )));
        }
        let (amin, amax) = self.amplitude_bounds;
        if !(amin > 0.0 && amin <= amax && amax.is_finite()) {
            return Err(Error::invalid(format!("malformed amplitude bounds ({amin}, {amax})")));
        }
        if !(self.initial_amplitude >= amin && self.initial_amplitude <= amax) {
            return Err(Error::invalid(format!(
                "initial amplitude {} outside ({amin}, {amax})",
                self.initial_amplitude
            )));
        }
        if self.search_bounds.len() != self.dim {
            return Err(Error::invalid(format!(
                "{} search bounds given for dimension {}",
                self.search_bounds.len(),
                self.dim
            )));
        }
        if let Some(i) = self
            .search_bounds
            .iter()
            .position(|&(lo, hi)| !(lo.is_finite() && hi.is_finite() && lo < hi))
        {
            return Err(Error::invalid(format!("malformed search bounds at coordinate {i}")));
        }
        if let Some(anchor) = &self.anchor {
            if anchor.len() != self.dim {
                return Err(Error::invalid("anchor length does not match dimension"));
            }
            if anchor
                .iter()
                .zip(&self.search_bounds)
                .any(|(x, &(lo, hi))| !(*x >= lo && *x <= hi))
            {
                return Err(Error::invalid("anchor lies outside the search bounds"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Firework {
    pub position: Vec<f64>,
    /// `None` until the position has been evaluated.
    pub fitness: Option<f64>,
    pub amplitude: f64,
    pub personal_best: f64,
    /// Fitness gained in the last generation.
    pub progress: f64,
    /// Generations since the last (re)start.
    pub age: u64,
    pub restarts: u32,
}

#[derive(Clone, Debug)]
pub struct FwaState {
    config: FwaConfig,
    fireworks: Vec<Firework>,
    /// Spark counts used by the outstanding batch, by firework.
    layout: Vec<usize>,
    generation: u64,
    best: Option<(Vec<f64>, f64)>,
    rng: ChaCha8Rng,
}

impl FwaState {
    pub fn new(config: FwaConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let fireworks = (0..config.n_fireworks)
            .map(|i| {
                let position = match (&config.anchor, i) {
                    (Some(a), 0) => a.clone(),
                    _ => uniform_point(&config.search_bounds, &mut rng),
                };
                Firework {
                    position,
                    fitness: None,
                    amplitude: config.initial_amplitude,
                    personal_best: f64::INFINITY,
                    progress: 0.0,
                    age: 0,
                    restarts: 0,
                }
            })
            .collect();
        Ok(FwaState {
            config,
            fireworks,
            layout: Vec::new(),
            generation: 0,
            best: None,
            rng,
        })
    }

    pub fn config(&self) -> &FwaConfig {
        &self.config
    }

    pub fn fireworks(&self) -> &[Firework] {
        &self.fireworks
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    pub fn best(&self) -> Option<(&[f64], f64)> {
        self.best.as_ref().map(|(x, f)| (x.as_slice(), *f))
    }

    /// Spark count per firework for the current fitness ranking.
    pub fn spark_counts(&self) -> Vec<usize> {
        let keys: Vec<f64> = self
            .fireworks
            .iter()
            .map(|f| f.fitness.unwrap_or(f64::INFINITY))
            .collect();
        allocate_sparks(&keys, self.config.spark_budget, self.config.spark_bounds)
    }

    /// Firework positions first, then each firework's sparks in firework order.
    pub fn ask(&mut self) -> AskBatch {
        let counts = self.spark_counts();
        let mut candidates: Vec<Vec<f64>> = self.fireworks.iter().map(|f| f.position.clone()).collect();
        for (fw, &count) in self.fireworks.iter().zip(&counts) {
            for _ in 0..count {
                let spark = fw
                    .position
                    .iter()
                    .zip(&self.config.search_bounds)
                    .map(|(&x, &(lo, hi))| {
                        let offset = self.rng.random_range(-fw.amplitude..=fw.amplitude);
                        (x + offset).clamp(lo, hi)
                    })
                    .collect();
                candidates.push(spark);
            }
        }
        self.layout = counts;
        AskBatch {
            candidates,
            generation: self.generation,
        }
    }

    pub fn tell(&mut self, batch: &AskBatch, fitnesses: &[f64]) -> Result<()> {
        check_tell(batch, fitnesses, self.config.dim)?;
        let n = self.fireworks.len();
        let expected = n + self.layout.iter().sum::<usize>();
        if self.layout.is_empty() || batch.generation != self.generation {
            return Err(Error::invalid(format!(
                "batch from generation {} does not match the outstanding ask (generation {})",
                batch.generation, self.generation
            )));
        }
        if batch.candidates.len() != expected {
            return Err(Error::invalid(format!(
                "FWA expects {expected} candidates, got {}",
                batch.candidates.len()
            )));
        }

        let order = ranking(fitnesses);
        let top = order[0];
        if self.best.as_ref().is_none_or(|(_, f)| fitnesses[top] < *f) {
            self.best = Some((batch.candidates[top].clone(), fitnesses[top]));
        }

        let (amin, amax) = self.config.amplitude_bounds;
        let mut offset = n;
        for (i, fw) in self.fireworks.iter_mut().enumerate() {
            let own = fitnesses[i];
            let count = self.layout[i];
            let mut best_idx = i;
            for k in offset..offset + count {
                if fitnesses[k] < fitnesses[best_idx] {
                    best_idx = k;
                }
            }
            offset += count;

            let new_fit = fitnesses[best_idx];
            if fw.fitness.is_some() {
                fw.amplitude = if new_fit < own { fw.amplitude * AMPLIFY } else { fw.amplitude * REDUCE };
                fw.amplitude = fw.amplitude.clamp(amin, amax);
            }
            fw.progress = match fw.fitness {
                Some(prev) => (prev - new_fit).max(0.0),
                None => 0.0,
            };
            if best_idx != i {
                fw.position = batch.candidates[best_idx].clone();
            }
            fw.fitness = Some(new_fit);
            fw.personal_best = fw.personal_best.min(new_fit);
            fw.age += 1;
        }

        let global = self.best.as_ref().map(|(_, f)| *f).unwrap_or(f64::INFINITY);
        let remaining = self
            .config
            .horizon
            .map(|h| h.saturating_sub(self.generation + 1) as f64);
        for fw in &mut self.fireworks {
            let Some(fit) = fw.fitness else { continue };
            // A fresh firework has no progress measurement yet.
            if fw.age < 2 || fit <= global {
                continue;
            }
            let loser = match remaining {
                Some(r) => fit - fw.progress * r > global,
                None => fw.progress <= 0.0,
            };
            if loser {
                fw.position = uniform_point(&self.config.search_bounds, &mut self.rng);
                fw.fitness = None;
                fw.amplitude = self.config.initial_amplitude;
                fw.progress = 0.0;
                fw.age = 0;
                fw.restarts += 1;
            }
        }

        self.layout.clear();
        self.generation += 1;
        Ok(())
    }
}

fn uniform_point(bounds: &[(f64, f64)], rng: &mut ChaCha8Rng) -> Vec<f64> {
    bounds.iter().map(|&(lo, hi)| rng.random_range(lo..=hi)).collect()
}

/// Splits `budget` sparks over fireworks with weights `1 / rank` (rank 1 is
/// the lowest key, ties by index), keeping every count within `bounds` and the
/// total exactly equal to `budget`. Counts are non-increasing in rank.
pub fn allocate_sparks(keys: &[f64], budget: usize, bounds: (usize, usize)) -> Vec<usize> {
    let n = keys.len();
    let (lo, hi) = bounds;
    let order = ranking(keys);
    let harmonic: f64 = (1..=n).map(|r| 1.0 / r as f64).sum();
    // by_rank[r] is the count for the firework ranked r (0-based).
    let mut by_rank: Vec<usize> = (0..n)
        .map(|r| {
            let ideal = budget as f64 / ((r + 1) as f64 * harmonic);
            (ideal.floor() as usize).clamp(lo, hi)
        })
        .collect();
    // Leftovers go round-robin from the best rank, surpluses are removed
    // round-robin from the worst; both keep counts non-increasing in rank.
    let mut total: usize = by_rank.iter().sum();
    let mut r = 0;
    while total < budget && by_rank.iter().any(|&c| c < hi) {
        if by_rank[r] < hi {
            by_rank[r] += 1;
            total += 1;
        }
        r = (r + 1) % n;
    }
    let mut r = n - 1;
    while total > budget && by_rank.iter().any(|&c| c > lo) {
        if by_rank[r] > lo {
            by_rank[r] -= 1;
            total -= 1;
        }
        r = if r == 0 { n - 1 } else { r - 1 };
    }
    let mut counts = vec![0; n];
    for (r, &idx) in order.iter().enumerate() {
        counts[idx] = by_rank[r];
    }
    counts
}
