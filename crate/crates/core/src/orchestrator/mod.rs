//! Layer-by-layer subspace search under a forward-call budget.
//!
//! Each hidden layer owns one optimizer over its concatenated subspace vector.
//! Sweeps visit the layers in order; a visit is one ask, one train-loss
//! evaluation per candidate with every other layer held at its current best,
//! and one tell.

mod probe;
mod synth;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use probe::{logistic_probe, ProbeResult};
pub use synth::{synth_task, SynthOptions, SynthTask};

use crate::backbone::{FrozenModel, LowRankPair, Target};
use crate::error::{Error, Result};
use crate::optim::{CmaState, FwaConfig, FwaState, Optimizer};
use crate::seeds::derive_seed;
use crate::subspace::{projection_std, InitMode, LayerSubspace, RI_STD};
use crate::task::{EncodedSet, EvalResult, PreparedTask};
use crate::tensors::NamedTensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Method {
    /// CMA-ES in the subspace.
    #[default]
    #[serde(rename = "c_lora")]
    CLora,
    /// Loser-out fireworks in the subspace.
    #[serde(rename = "f_lora")]
    FLora,
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "c_lora" | "clora" | "cma" => Ok(Method::CLora),
            "f_lora" | "flora" | "fwa" => Ok(Method::FLora),
            _ => Err(Error::Parse(format!("unknown method '{s}'"))),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::CLora => "c_lora",
            Method::FLora => "f_lora",
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerOrder {
    #[default]
    BottomUp,
    TopDown,
}

impl FromStr for LayerOrder {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bottom_up" => Ok(LayerOrder::BottomUp),
            "top_down" => Ok(LayerOrder::TopDown),
            _ => Err(Error::Parse(format!("unknown layer order '{s}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Seeds {
    pub model: u64,
    pub data: u64,
    pub optimizer: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Seeds {
            model: 7,
            data: 0,
            optimizer: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub method: Method,
    /// Subspace dimension per projection role.
    pub d: usize,
    /// LoRA rank.
    pub r: usize,
    pub targets: Vec<Target>,
    /// Total train-loss evaluations allowed.
    pub budget: usize,
    /// CMA-ES λ, or the number of fireworks.
    pub population: usize,
    /// Sparks per generation shared by the fireworks.
    pub sparks: usize,
    pub spark_bounds: (usize, usize),
    /// Per-coordinate search box for the fireworks.
    pub fwa_bound: f64,
    /// Initial explosion amplitude.
    pub fwa_amplitude: f64,
    pub layer_order: LayerOrder,
    /// Candidate evaluations without a dev-accuracy gain before stopping.
    pub patience: usize,
    pub alpha: f64,
    pub sigma_z: f64,
    pub init: InitMode,
    pub seeds: Seeds,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            method: Method::CLora,
            d: 500,
            r: 2,
            targets: vec![Target::Q, Target::K],
            budget: 6000,
            population: 20,
            sparks: 15,
            spark_bounds: (1, 10),
            fwa_bound: 5.0,
            fwa_amplitude: 1.0,
            layer_order: LayerOrder::BottomUp,
            patience: 1500,
            alpha: 1.0,
            sigma_z: 1.0,
            init: InitMode::Ril,
            seeds: Seeds::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.d > 100_000 {
            return Err(Error::invalid(format!("subspace dimension {} outside 1..=100000", self.d)));
        }
        if self.r == 0 {
            return Err(Error::invalid("rank must be positive"));
        }
        if self.targets.is_empty() {
            return Err(Error::invalid("at least one target weight is required"));
        }
        if self.budget == 0 {
            return Err(Error::invalid("budget must be positive"));
        }
        if self.patience == 0 {
            return Err(Error::invalid("patience must be positive"));
        }
        match self.method {
            Method::CLora if self.population < 2 => {
                return Err(Error::invalid("CMA-ES needs a population of at least 2"));
            }
            Method::FLora if self.population == 0 => {
                return Err(Error::invalid("at least one firework is required"));
            }
            _ => {}
        }
        for (name, v) in [
            ("alpha", self.alpha),
            ("sigma_z", self.sigma_z),
            ("fwa_bound", self.fwa_bound),
            ("fwa_amplitude", self.fwa_amplitude),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("{name} must be positive")));
            }
        }
        Ok(())
    }

    /// Candidates evaluated per generation.
    pub fn generation_size(&self) -> usize {
        match self.method {
            Method::CLora => self.population,
            Method::FLora => self.population + self.sparks,
        }
    }

    /// Searchable parameters per layer, independent of `r`.
    pub fn search_dim(&self) -> usize {
        2 * self.targets.len() * self.d
    }

    fn layer_sequence(&self, layers: usize) -> Vec<usize> {
        match self.layer_order {
            LayerOrder::BottomUp => (0..layers).collect(),
            LayerOrder::TopDown => (0..layers).rev().collect(),
        }
    }
}

/// Evaluations consumed in total and per layer.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunBudget {
    pub total: usize,
    pub consumed: usize,
    pub ledger: Vec<usize>,
}

impl RunBudget {
    pub fn new(total: usize, layers: usize) -> Self {
        RunBudget {
            total,
            consumed: 0,
            ledger: vec![0; layers],
        }
    }

    pub fn remaining(&self) -> usize {
        self.total - self.consumed
    }

    pub fn charge(&mut self, layer: usize, n: usize) -> Result<()> {
        if n > self.remaining() {
            return Err(Error::BudgetExceeded {
                requested: n,
                remaining: self.remaining(),
            });
        }
        if layer >= self.ledger.len() {
            return Err(Error::invalid(format!("layer {layer} out of range")));
        }
        self.consumed += n;
        self.ledger[layer] += n;
        Ok(())
    }
}

/// One line of `trace.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub step: usize,
    pub layer: usize,
    pub layer_generation: u64,
    pub generation_best_loss: f64,
    /// Train loss of the accepted configuration after this generation.
    pub train_loss: f64,
    pub dev_loss: f64,
    pub dev_accuracy: f64,
    pub best_dev_accuracy: f64,
    pub consumed: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub method: Method,
    pub generations: usize,
    pub consumed: usize,
    pub ledger: Vec<usize>,
    pub stopped_early: bool,
    pub best_dev_step: Option<usize>,
    pub sigma_hat: Vec<f64>,
    pub projection_std: Vec<f64>,
    pub baseline_train: EvalResult,
    pub baseline_dev: EvalResult,
    pub train: EvalResult,
    pub dev: EvalResult,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test: Option<EvalResult>,
    pub wall_clock_secs: f64,
}

#[derive(Clone, Debug)]
pub struct RunReport {
    pub records: Vec<GenerationRecord>,
    pub summary: RunSummary,
    /// Best-on-dev subspace vector of every layer.
    pub vectors: Vec<Vec<f64>>,
    pub subspaces: Vec<LayerSubspace>,
}

impl RunReport {
    pub fn trace_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }

    /// Final subspace vectors, projections and materialized deltas.
    pub fn tensors(&self) -> Result<Vec<NamedTensor>> {
        let mut out = Vec::new();
        for (l, (m, s)) in self.vectors.iter().zip(&self.subspaces).enumerate() {
            out.push(NamedTensor::new(format!("search.layer.{l}.m"), vec![m.len()], m.clone())?);
            out.extend(s.tensors());
            for pair in s.materialize(m)? {
                let t = pair.target;
                out.push(NamedTensor::new(
                    format!("delta.layer.{l}.{t}.A"),
                    vec![pair.a.rows(), pair.a.cols()],
                    pair.a.as_slice().to_vec(),
                )?);
                out.push(NamedTensor::new(
                    format!("delta.layer.{l}.{t}.B"),
                    vec![pair.b.rows(), pair.b.cols()],
                    pair.b.as_slice().to_vec(),
                )?);
            }
        }
        Ok(out)
    }
}

/// Train, dev and optional test data already rendered for the model.
#[derive(Clone, Copy, Debug)]
pub struct RunData<'a> {
    pub task: &'a PreparedTask,
    pub train: &'a EncodedSet,
    pub dev: &'a EncodedSet,
    pub test: Option<&'a EncodedSet>,
}

/// Mutable search state for one run; [`run`] drives it to completion.
pub struct Trainer<'a> {
    model: &'a FrozenModel,
    data: RunData<'a>,
    subspaces: Vec<LayerSubspace>,
    optimizers: Vec<Optimizer>,
    current: Vec<Vec<f64>>,
    current_pairs: Vec<Vec<LowRankPair>>,
    current_loss: f64,
    budget: RunBudget,
    sigma_hat: Vec<f64>,
    projection_std: Vec<f64>,
}

impl<'a> Trainer<'a> {
    pub fn new(config: &RunConfig, model: &'a FrozenModel, data: RunData<'a>) -> Result<Self> {
        config.validate()?;
        if data.train.is_empty() || data.dev.is_empty() {
            return Err(Error::invalid("train and dev sets must be non-empty"));
        }
        if data.task.vocab.len() > model.vocab_size() {
            return Err(Error::invalid(format!(
                "task vocabulary of {} exceeds the model's {}",
                data.task.vocab.len(),
                model.vocab_size()
            )));
        }
        let layers = model.num_layers();
        let gen = config.generation_size();
        if config.budget < layers * gen {
            return Err(Error::invalid(format!(
                "budget {} is below one sweep of {layers} layers x {gen} candidates",
                config.budget
            )));
        }
        let sigma_hat = model
            .collect_hidden_stats(&data.train.tokens)
            .map_err(|e| e.context("hidden-state statistics on the train set"))?
            .per_layer_std;
        let projection_std = sigma_hat
            .iter()
            .map(|&s| match config.init {
                InitMode::Ril => projection_std(config.alpha, s, config.d, config.sigma_z),
                InitMode::Ri => Ok(RI_STD),
            })
            .collect::<Result<Vec<_>>>()?;
        let projection_seed = derive_seed(config.seeds.optimizer, 0x9e0);
        let subspaces = (0..layers)
            .map(|l| {
                LayerSubspace::new(
                    l,
                    &config.targets,
                    config.d,
                    config.r,
                    model.hidden(),
                    model.attn_dim(),
                    projection_std[l],
                    projection_seed,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let dim = config.search_dim();
        let visits = (config.budget / gen / layers) as u64;
        let optimizers = (0..layers)
            .map(|l| {
                let seed = derive_seed(config.seeds.optimizer, 1 + l as u64);
                build_optimizer(config, dim, visits, seed).map_err(|e| e.context(format!("layer {l} optimizer")))
            })
            .collect::<Result<Vec<_>>>()?;
        let current = vec![vec![0.0; dim]; layers];
        let current_pairs = subspaces
            .iter()
            .zip(&current)
            .map(|(s, m)| s.materialize(m))
            .collect::<Result<Vec<_>>>()?;
        Ok(Trainer {
            model,
            data,
            subspaces,
            optimizers,
            current,
            current_pairs,
            current_loss: f64::INFINITY,
            budget: RunBudget::new(config.budget, layers),
            sigma_hat,
            projection_std,
        })
    }

    pub fn budget(&self) -> &RunBudget {
        &self.budget
    }

    pub fn subspaces(&self) -> &[LayerSubspace] {
        &self.subspaces
    }

    pub fn current(&self) -> &[Vec<f64>] {
        &self.current
    }

    pub fn sigma_hat(&self) -> &[f64] {
        &self.sigma_hat
    }

    pub fn projection_std(&self) -> &[f64] {
        &self.projection_std
    }

    /// Deltas of every layer's current best, with `layer` replaced by `m`.
    pub fn deltas_with(&self, layer: usize, m: &[f64]) -> Result<Vec<LowRankPair>> {
        let subspace = self
            .subspaces
            .get(layer)
            .ok_or_else(|| Error::invalid(format!("layer {layer} out of range")))?;
        let mut deltas: Vec<LowRankPair> = self
            .current_pairs
            .iter()
            .enumerate()
            .filter(|(l, _)| *l != layer)
            .flat_map(|(_, p)| p.iter().cloned())
            .collect();
        deltas.extend(subspace.materialize(m)?);
        Ok(deltas)
    }

    /// Train loss of one candidate for `layer`; costs one evaluation.
    pub fn evaluate_candidate(&mut self, layer: usize, m: &[f64]) -> Result<f64> {
        Ok(self.evaluate_batch(layer, std::slice::from_ref(&m.to_vec()))?[0])
    }

    fn evaluate_batch(&mut self, layer: usize, candidates: &[Vec<f64>]) -> Result<Vec<f64>> {
        self.budget.charge(layer, candidates.len())?;
        let below: Vec<LowRankPair> = self.current_pairs[..layer].iter().flatten().cloned().collect();
        let cache = self.model.cache_inputs(&below, &self.data.train.tokens, layer)?;
        candidates
            .iter()
            .map(|m| {
                let deltas = self.deltas_with(layer, m)?;
                let logits = self.model.forward_cached(&deltas, &cache)?;
                Ok(self.data.task.score(&logits, &self.data.train.labels)?.loss)
            })
            .collect()
    }

    fn score_set(&self, deltas: &[LowRankPair], set: &EncodedSet) -> Result<EvalResult> {
        let logits = self.model.forward(deltas, &set.tokens)?;
        self.data.task.score(&logits, &set.labels)
    }

    fn accept(&mut self, layer: usize, m: Vec<f64>, loss: f64) -> Result<()> {
        self.current_pairs[layer] = self.subspaces[layer].materialize(&m)?;
        self.current[layer] = m;
        self.current_loss = loss;
        Ok(())
    }
}

fn build_optimizer(config: &RunConfig, dim: usize, visits: u64, seed: u64) -> Result<Optimizer> {
    match config.method {
        Method::CLora => Ok(Optimizer::Cma(CmaState::new(
            dim,
            config.population,
            vec![0.0; dim],
            config.sigma_z,
            seed,
        )?)),
        Method::FLora => {
            let b = config.fwa_bound;
            let amp = config.fwa_amplitude.min(b);
            let fwa = FwaConfig::with_box(
                dim,
                config.population,
                config.sparks,
                config.spark_bounds,
                (1e-9 * amp, 2.0 * b),
                -b,
                b,
            )
            .initial_amplitude(amp)
            .horizon(visits.max(1))
            .anchor(vec![0.0; dim]);
            Ok(Optimizer::Fwa(FwaState::new(fwa, seed)?))
        }
    }
}

/// Runs the full search. `on_generation` sees each trace record as it is produced.
pub fn run(
    config: &RunConfig,
    model: &FrozenModel,
    data: RunData<'_>,
    mut on_generation: impl FnMut(&GenerationRecord),
) -> Result<RunReport> {
    let started = Stopwatch::start();
    let mut t = Trainer::new(config, model, data)?;
    let layers = model.num_layers();
    let gen = config.generation_size();
    let zero_deltas: Vec<LowRankPair> = Vec::new();
    let baseline_train = t.score_set(&zero_deltas, data.train)?;
    let baseline_dev = t.score_set(&zero_deltas, data.dev)?;

    let mut records = Vec::new();
    let mut best_dev: Option<(f64, f64, usize)> = None;
    let mut best_vectors = t.current.clone();
    let mut since_improvement = 0usize;
    let mut stopped_early = false;
    let order = config.layer_sequence(layers);
    'sweeps: loop {
        for &layer in &order {
            if t.budget.remaining() < gen {
                break 'sweeps;
            }
            let ctx = |e: Error| e.context(format!("layer {layer}"));
            let batch = t.optimizers[layer].ask();
            let losses = t.evaluate_batch(layer, &batch.candidates).map_err(ctx)?;
            t.optimizers[layer].tell(&batch, &losses).map_err(ctx)?;
            let (best_i, &gen_best) = losses
                .iter()
                .enumerate()
                .min_by(|a, b| a.1.total_cmp(b.1))
                .expect("non-empty generation");
            let candidate = batch.candidates[best_i].clone();
            let dev = t.score_set(&t.deltas_with(layer, &candidate).map_err(ctx)?, data.dev)?;
            let improved_acc = best_dev.is_none_or(|(acc, _, _)| dev.accuracy > acc);
            let better = best_dev.is_none_or(|(acc, train_loss, _)| {
                dev.accuracy > acc || (dev.accuracy == acc && gen_best < train_loss)
            });
            if better {
                best_dev = Some((dev.accuracy, gen_best, records.len()));
                best_vectors = t.current.clone();
                best_vectors[layer] = candidate.clone();
            }
            if improved_acc {
                since_improvement = 0;
            } else {
                since_improvement += losses.len();
            }
            if gen_best < t.current_loss {
                t.accept(layer, candidate, gen_best).map_err(ctx)?;
            }
            let record = GenerationRecord {
                step: records.len(),
                layer,
                layer_generation: t.optimizers[layer].generation(),
                generation_best_loss: gen_best,
                train_loss: t.current_loss,
                dev_loss: dev.loss,
                dev_accuracy: dev.accuracy,
                best_dev_accuracy: best_dev.map_or(dev.accuracy, |b| b.0),
                consumed: t.budget.consumed,
            };
            on_generation(&record);
            records.push(record);
            if since_improvement >= config.patience {
                stopped_early = true;
                break 'sweeps;
            }
        }
    }

    let final_deltas = t
        .subspaces
        .iter()
        .zip(&best_vectors)
        .map(|(s, m)| s.materialize(m))
        .collect::<Result<Vec<_>>>()?
        .concat();
    let train = t.score_set(&final_deltas, data.train)?;
    let dev = t.score_set(&final_deltas, data.dev)?;
    let test = data.test.map(|s| t.score_set(&final_deltas, s)).transpose()?;
    let summary = RunSummary {
        method: config.method,
        generations: records.len(),
        consumed: t.budget.consumed,
        ledger: t.budget.ledger.clone(),
        stopped_early,
        best_dev_step: best_dev.map(|b| b.2),
        sigma_hat: t.sigma_hat.clone(),
        projection_std: t.projection_std.clone(),
        baseline_train,
        baseline_dev,
        train,
        dev,
        test,
        wall_clock_secs: started.secs(),
    };
    Ok(RunReport {
        records,
        summary,
        vectors: best_vectors,
        subspaces: t.subspaces,
    })
}

/// Wall-clock timer; reads zero where the platform has no clock (browser wasm).
struct Stopwatch(#[cfg(not(all(target_arch = "wasm32", target_os = "unknown")))] std::time::Instant);

impl Stopwatch {
    fn start() -> Self {
        Stopwatch(
            #[cfg(not(all(target_arch = "wasm32", target_os = "unknown")))]
            std::time::Instant::now(),
        )
    }

    fn secs(&self) -> f64 {
        #[cfg(not(all(target_arch = "wasm32", target_os = "unknown")))]
        return self.0.elapsed().as_secs_f64();
        #[cfg(all(target_arch = "wasm32", target_os = "unknown"))]
        0.0
    }
}
