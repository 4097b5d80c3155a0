//! Generated keyword-spotting task over a random frozen encoder.
//!
//! Each sentence is filler words plus one keyword of its class, followed by
//! the prompt "it was <mask> .". Keywords are the pool words that push the
//! frozen readout hardest toward their class's label word when they fill the
//! whole text. Inside real sentences the keyword is diluted by fillers, so the
//! untouched model sits near chance until attention is steered toward it.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::probe::{logistic_probe, ProbeResult};
use crate::backbone::{FrozenModel, ModelConfig};
use crate::error::{Error, Result};
use crate::seeds::derive_seed;
use crate::task::{
    sample_few_shot, Corpus, EncodedSet, EvalResult, FewShotSplit, Instance, LossKind, Pattern, PreparedTask, Prompt,
    Schema, Verbalizer, Vocab, MASK, MASK_ID,
};

const LABEL_WORDS: [&str; 6] = ["bad", "great", "okay", "awful", "fine", "superb"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthOptions {
    pub num_classes: usize,
    /// Few-shot instances per class in train and in dev.
    pub shots: usize,
    pub corpus_size: usize,
    pub keywords_per_class: usize,
    pub keyword_pool: usize,
    pub filler_words: usize,
    /// Filler words per sentence; larger dilutes the keyword more.
    pub difficulty: usize,
    /// Highest zero-delta accuracy accepted for a generated task.
    pub max_baseline: f64,
    /// Lowest probe accuracy accepted for a generated task.
    pub min_probe: f64,
    pub max_attempts: usize,
}

impl Default for SynthOptions {
    fn default() -> Self {
        SynthOptions {
            num_classes: 2,
            shots: 16,
            corpus_size: 400,
            keywords_per_class: 1,
            keyword_pool: 16,
            filler_words: 24,
            difficulty: 2,
            max_baseline: 0.6,
            min_probe: 0.95,
            max_attempts: 32,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SynthTask {
    pub model: FrozenModel,
    pub corpus: Corpus,
    pub prompt: Prompt,
    pub task: PreparedTask,
    pub split: FewShotSplit,
    pub train: EncodedSet,
    pub dev: EncodedSet,
    pub test: EncodedSet,
    /// `keywords[c]` are the words that signal class `c`.
    pub keywords: Vec<Vec<String>>,
    /// Zero-delta accuracy on the whole corpus.
    pub baseline: EvalResult,
    /// Linear probe on frozen mask features over the whole corpus.
    pub probe: ProbeResult,
    pub attempt: usize,
}

/// Deterministic per `seed` and `model.seed`; `model.vocab_size` and
/// `model.mask_token` are replaced by the generated vocabulary's. Retries with
/// fresh sub-seeds until the task is near chance for the frozen model yet
/// linearly solvable from its features.
pub fn synth_task(seed: u64, options: &SynthOptions, model: &ModelConfig) -> Result<SynthTask> {
    validate(options, model)?;
    let mut last = String::new();
    for attempt in 0..options.max_attempts {
        let t = generate(derive_seed(seed, attempt as u64), options, model, attempt)?;
        if t.baseline.accuracy <= options.max_baseline && t.probe.train_accuracy >= options.min_probe {
            return Ok(t);
        }
        last = format!(
            "baseline {:.3}, probe {:.3}",
            t.baseline.accuracy, t.probe.train_accuracy
        );
    }
    Err(Error::invalid(format!(
        "no acceptable task in {} attempts (last: {last})",
        options.max_attempts
    )))
}

fn validate(o: &SynthOptions, model: &ModelConfig) -> Result<()> {
    if o.num_classes < 2 || o.num_classes > LABEL_WORDS.len() {
        return Err(Error::invalid(format!("synthetic tasks support 2..={} classes", LABEL_WORDS.len())));
    }
    if o.keywords_per_class == 0 || o.keywords_per_class * o.num_classes > o.keyword_pool {
        return Err(Error::invalid("keyword pool too small for the requested keywords"));
    }
    if o.filler_words == 0 || o.max_attempts == 0 {
        return Err(Error::invalid("filler vocabulary and attempt count must be positive"));
    }
    if o.corpus_size < 2 * o.shots * o.num_classes + o.num_classes {
        return Err(Error::invalid("corpus too small for the few-shot split"));
    }
    if o.difficulty + 1 + 4 > model.max_seq_len {
        return Err(Error::invalid("sentences would not fit the model's sequence length"));
    }
    Ok(())
}

fn generate(seed: u64, o: &SynthOptions, model: &ModelConfig, attempt: usize) -> Result<SynthTask> {
    let fillers: Vec<String> = (0..o.filler_words).map(|i| format!("w{i:02}")).collect();
    let pool: Vec<String> = (0..o.keyword_pool).map(|i| format!("k{i:02}")).collect();
    let label_words: Vec<&str> = LABEL_WORDS[..o.num_classes].to_vec();
    let pattern = Pattern::new(&["text", "it", "was", MASK, "."])?;
    let mut words: Vec<String> = fillers
        .iter()
        .chain(&pool)
        .cloned()
        .chain(label_words.iter().map(|s| s.to_string()))
        .chain(["it", "was", "."].map(String::from))
        .collect();
    words.sort();
    let vocab = Vocab::from_words(&words);
    let model_config = ModelConfig {
        vocab_size: vocab.len(),
        mask_token: MASK_ID,
        seed: derive_seed(model.seed, seed),
        ..model.clone()
    };
    let model = FrozenModel::new(model_config)?;
    let verbalizer = Verbalizer::new(&label_words, &vocab)?;
    let prompt = Prompt {
        pattern: pattern.clone(),
        verbalizer: label_words
            .iter()
            .enumerate()
            .map(|(c, w)| (c.to_string(), w.to_string()))
            .collect(),
    };
    let task = PreparedTask::new(
        vocab.clone(),
        pattern,
        verbalizer.clone(),
        model.config().max_seq_len,
        LossKind::CrossEntropy,
        false,
    )?;

    let keywords = pick_keywords(&model, &task, &pool, o)?;

    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 2));
    let instances: Vec<Instance> = (0..o.corpus_size)
        .map(|i| {
            let label = i % o.num_classes;
            let mut text: Vec<&str> = (0..o.difficulty)
                .map(|_| fillers.choose(&mut rng).expect("fillers").as_str())
                .collect();
            let kw = keywords[label].choose(&mut rng).expect("keywords").as_str();
            text.insert(rng.random_range(0..=text.len()), kw);
            Instance {
                label,
                fields: vec![text.join(" ")],
            }
        })
        .collect();
    let corpus = Corpus::new(Schema::SingleSentence, o.num_classes, instances)?;

    let all = task.encode(&corpus.instances)?;
    let logits = model.forward(&[], &all.tokens)?;
    let baseline = task.score(&logits, &all.labels)?;
    let features = model.mask_features(&[], &all.tokens)?;
    let probe = logistic_probe(&features, &all.labels, o.num_classes, 300)?;

    let split = sample_few_shot(&corpus, o.shots, derive_seed(seed, 3))?;
    let train = task.encode(&split.train)?;
    let dev = task.encode(&split.dev)?;
    let test = task.encode(&split.rest)?;
    Ok(SynthTask {
        model,
        corpus,
        prompt,
        task,
        split,
        train,
        dev,
        test,
        keywords,
        baseline,
        probe,
        attempt,
    })
}

/// For each class, the pool words whose saturated sentence favors that class most.
fn pick_keywords(model: &FrozenModel, task: &PreparedTask, pool: &[String], o: &SynthOptions) -> Result<Vec<Vec<String>>> {
    let probes: Vec<Instance> = pool
        .iter()
        .map(|w| Instance {
            label: 0,
            fields: vec![vec![w.as_str(); o.difficulty + 1].join(" ")],
        })
        .collect();
    let enc = task.encode(&probes)?;
    let logits = model.forward(&[], &enc.tokens)?;
    let ids = task.verbalizer.token_ids();
    // margin[w][c]: how far class c leads the strongest other class.
    let margin: Vec<Vec<f64>> = (0..pool.len())
        .map(|w| {
            let row = logits.row(w);
            let s: Vec<f64> = ids.iter().map(|&t| row[t as usize]).collect();
            (0..s.len())
                .map(|c| {
                    let rival = (0..s.len())
                        .filter(|&j| j != c)
                        .map(|j| s[j])
                        .fold(f64::NEG_INFINITY, f64::max);
                    s[c] - rival
                })
                .collect()
        })
        .collect();
    let mut used = vec![false; pool.len()];
    let mut out = vec![Vec::new(); o.num_classes];
    for _ in 0..o.keywords_per_class {
        for (c, class_words) in out.iter_mut().enumerate() {
            let w = (0..pool.len())
                .filter(|&w| !used[w])
                .max_by(|&a, &b| margin[a][c].total_cmp(&margin[b][c]))
                .expect("pool larger than keyword count");
            used[w] = true;
            class_words.push(pool[w].clone());
        }
    }
    Ok(out)
}
