//! Experiment configuration: one JSON document with `model`, `task`,
//! `subspace`, `optimizer` and `run` sections, plus `key=value` overrides.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::backbone::{FrozenModel, ModelConfig, Target};
use crate::error::{Error, Result};
use crate::orchestrator::{synth_task, LayerOrder, Method, RunConfig, SynthOptions};
use crate::subspace::InitMode;
use crate::task::{
    load_corpus, sample_few_shot, EncodedSet, LossKind, Pattern, PreparedTask, Prompt, Schema, MASK_ID,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub num_layers: usize,
    pub hidden: usize,
    pub attn_dim: usize,
    pub num_heads: usize,
    pub ff_dim: usize,
    pub max_seq_len: usize,
    pub init_scale: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::default();
        ModelSection {
            num_layers: m.num_layers,
            hidden: m.hidden,
            attn_dim: m.attn_dim,
            num_heads: m.num_heads,
            ff_dim: m.ff_dim,
            max_seq_len: m.max_seq_len,
            init_scale: m.init_scale,
        }
    }
}

impl ModelSection {
    /// Full model config for a vocabulary of `vocab_size` words.
    pub fn model_config(&self, vocab_size: usize, seed: u64) -> ModelConfig {
        ModelConfig {
            num_layers: self.num_layers,
            hidden: self.hidden,
            attn_dim: self.attn_dim,
            num_heads: self.num_heads,
            ff_dim: self.ff_dim,
            vocab_size,
            max_seq_len: self.max_seq_len,
            mask_token: MASK_ID,
            init_scale: self.init_scale,
            seed,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskSource {
    #[default]
    Synthetic,
    Corpus,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSection {
    /// Relative paths resolve against the config file's directory.
    pub path: PathBuf,
    pub schema: Schema,
    pub num_classes: usize,
    pub pattern: Pattern,
    pub verbalizer: BTreeMap<String, String>,
    #[serde(default = "default_shots")]
    pub shots: usize,
    /// Separate test corpus; without one, the instances left after sampling are used.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_path: Option<PathBuf>,
}

impl CorpusSection {
    pub fn prompt(&self) -> Prompt {
        Prompt {
            pattern: self.pattern.clone(),
            verbalizer: self.verbalizer.clone(),
        }
    }
}

fn default_shots() -> usize {
    16
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskSection {
    pub source: TaskSource,
    pub loss: LossKind,
    /// Report binary F1 with class 1 as positive.
    pub f1: bool,
    pub synthetic: SynthOptions,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub corpus: Option<CorpusSection>,
}

impl Default for TaskSection {
    fn default() -> Self {
        TaskSection {
            source: TaskSource::Synthetic,
            loss: LossKind::CrossEntropy,
            f1: false,
            synthetic: SynthOptions::default(),
            corpus: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SubspaceSection {
    pub d: usize,
    pub r: usize,
    pub targets: Vec<Target>,
    pub alpha: f64,
    pub sigma_z: f64,
    pub init: InitMode,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerSection {
    pub method: Method,
    pub population: usize,
    pub sparks: usize,
    pub spark_bounds: (usize, usize),
    pub fwa_bound: f64,
    pub fwa_amplitude: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub budget: usize,
    pub layer_order: LayerOrder,
    pub patience: usize,
    pub seeds: crate::orchestrator::Seeds,
}

macro_rules! defaults_from_run_config {
    ($($section:ident { $($field:ident),* }),*) => {
        $(impl Default for $section {
            fn default() -> Self {
                let c = RunConfig::default();
                $section { $($field: c.$field),* }
            }
        })*
    };
}

defaults_from_run_config!(
    SubspaceSection { d, r, targets, alpha, sigma_z, init },
    OptimizerSection { method, population, sparks, spark_bounds, fwa_bound, fwa_amplitude },
    RunSection { budget, layer_order, patience, seeds }
);

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelSection,
    pub task: TaskSection,
    pub subspace: SubspaceSection,
    pub optimizer: OptimizerSection,
    pub run: RunSection,
}

/// Short override names that are not leaf names.
const ALIASES: &[(&str, &str)] = &[("pop", "optimizer.population"), ("seed", "run.seeds.optimizer")];

impl ExperimentConfig {
    /// Reads a config file, or the defaults when `path` is `None`, then applies overrides.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut value = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| Error::invalid(format!("cannot read config {}: {e}", p.display())))?;
                serde_json::from_str::<Value>(&text).map_err(|e| Error::Parse(format!("{}: {e}", p.display())))?
            }
            None => serde_json::to_value(ExperimentConfig::default())?,
        };
        // Fill omitted sections so overrides can address any default key.
        let defaults = serde_json::to_value(ExperimentConfig::default())?;
        merge_missing(&mut value, &defaults);
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let mut config: ExperimentConfig =
            serde_json::from_value(value).map_err(|e| Error::Parse(format!("config: {e}")))?;
        if let (Some(p), Some(c)) = (path, config.task.corpus.as_mut()) {
            let base = p.parent().unwrap_or(Path::new("."));
            c.path = resolve(base, &c.path);
            c.test_path = c.test_path.as_deref().map(|t| resolve(base, t));
        }
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        self.run_config().validate()?;
        if self.task.source == TaskSource::Corpus && self.task.corpus.is_none() {
            return Err(Error::invalid("task.source is 'corpus' but no task.corpus section is given"));
        }
        self.model.model_config(MASK_ID as usize + 1, 0).validate()
    }

    pub fn run_config(&self) -> RunConfig {
        let (s, o, r) = (&self.subspace, &self.optimizer, &self.run);
        RunConfig {
            method: o.method,
            d: s.d,
            r: s.r,
            targets: s.targets.clone(),
            budget: r.budget,
            population: o.population,
            sparks: o.sparks,
            spark_bounds: o.spark_bounds,
            fwa_bound: o.fwa_bound,
            fwa_amplitude: o.fwa_amplitude,
            layer_order: r.layer_order,
            patience: r.patience,
            alpha: s.alpha,
            sigma_z: s.sigma_z,
            init: s.init,
            seeds: r.seeds.clone(),
        }
    }

    /// Builds the frozen model and the rendered train/dev/test sets.
    pub fn prepare(&self) -> Result<Prepared> {
        let seeds = &self.run.seeds;
        match self.task.source {
            TaskSource::Synthetic => {
                let template = self.model.model_config(MASK_ID as usize + 1, seeds.model);
                let mut t = synth_task(seeds.data, &self.task.synthetic, &template)
                    .map_err(|e| e.context("generating the synthetic task"))?;
                t.task.loss = self.task.loss;
                t.task.report_f1 = self.task.f1;
                if self.task.f1 && self.task.synthetic.num_classes != 2 {
                    return Err(Error::invalid("F1 is defined here for binary tasks only"));
                }
                Ok(Prepared {
                    model: t.model,
                    task: t.task,
                    train: t.train,
                    dev: t.dev,
                    test: Some(t.test),
                })
            }
            TaskSource::Corpus => {
                let c = self.task.corpus.as_ref().expect("validated");
                let corpus = load_corpus(&c.path, c.schema, c.num_classes)?;
                let task = PreparedTask::from_prompt(
                    &corpus,
                    &c.prompt(),
                    self.model.max_seq_len,
                    self.task.loss,
                    self.task.f1,
                )?;
                let split = sample_few_shot(&corpus, c.shots, seeds.data)?;
                let test_instances = match &c.test_path {
                    Some(p) => load_corpus(p, c.schema, c.num_classes)?.instances,
                    None => split.rest.clone(),
                };
                let model = FrozenModel::new(self.model.model_config(task.vocab.len(), seeds.model))?;
                Ok(Prepared {
                    train: task.encode(&split.train)?,
                    dev: task.encode(&split.dev)?,
                    test: if test_instances.is_empty() {
                        None
                    } else {
                        Some(task.encode(&test_instances)?)
                    },
                    model,
                    task,
                })
            }
        }
    }
}

/// Model plus rendered data, ready for [`crate::orchestrator::run`].
#[derive(Clone, Debug)]
pub struct Prepared {
    pub model: FrozenModel,
    pub task: PreparedTask,
    pub train: EncodedSet,
    pub dev: EncodedSet,
    pub test: Option<EncodedSet>,
}

impl Prepared {
    pub fn data(&self) -> crate::orchestrator::RunData<'_> {
        crate::orchestrator::RunData {
            task: &self.task,
            train: &self.train,
            dev: &self.dev,
            test: self.test.as_ref(),
        }
    }
}

fn merge_missing(value: &mut Value, defaults: &Value) {
    if let (Value::Object(v), Value::Object(d)) = (value, defaults) {
        for (k, dv) in d {
            match v.get_mut(k) {
                Some(existing) => merge_missing(existing, dv),
                None => {
                    v.insert(k.clone(), dv.clone());
                }
            }
        }
    }
}

/// Applies `path=value`. `path` is dotted (`optimizer.method`), a leaf name that
/// occurs once in the document (`method`), or an alias (`pop`). The value is
/// read as JSON when it parses, otherwise as a string.
fn resolve(base: &Path, rel: &Path) -> PathBuf {
    let joined = base.join(rel);
    std::fs::canonicalize(&joined).unwrap_or(joined)
}

pub fn apply_override(doc: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Parse(format!("override '{assignment}' is not key=value")))?;
    let key = key.trim();
    let key = ALIASES.iter().find(|(a, _)| *a == key).map_or(key, |(_, full)| full);
    let path: Vec<String> = if key.contains('.') {
        key.split('.').map(String::from).collect()
    } else {
        let mut hits = Vec::new();
        find_leaf(doc, key, &mut Vec::new(), &mut hits);
        match hits.len() {
            1 => hits.pop().expect("one hit"),
            0 => return Err(Error::Parse(format!("unknown config key '{key}'"))),
            _ => {
                let names: Vec<String> = hits.iter().map(|h| h.join(".")).collect();
                return Err(Error::Parse(format!("key '{key}' is ambiguous: {}", names.join(", "))));
            }
        }
    };
    let value = serde_json::from_str::<Value>(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut cursor = doc;
    for (i, part) in path.iter().enumerate() {
        let obj = cursor
            .as_object_mut()
            .ok_or_else(|| Error::Parse(format!("'{}' is not a section", path[..i].join("."))))?;
        if i + 1 == path.len() {
            if !obj.contains_key(part) && !key.starts_with("task.corpus") {
                return Err(Error::Parse(format!("unknown config key '{key}'")));
            }
            obj.insert(part.clone(), value);
            return Ok(());
        }
        cursor = obj.entry(part.clone()).or_insert_with(|| Value::Object(Default::default()));
    }
    Ok(())
}

fn find_leaf(v: &Value, key: &str, prefix: &mut Vec<String>, hits: &mut Vec<Vec<String>>) {
    if let Value::Object(map) = v {
        for (k, child) in map {
            prefix.push(k.clone());
            if k == key {
                hits.push(prefix.clone());
            }
            find_leaf(child, key, prefix, hits);
            prefix.pop();
        }
    }
}
