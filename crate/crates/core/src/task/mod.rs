//! Few-shot classification data: corpora, prompts, label words and scoring.

mod corpus;
mod metrics;
mod template;
mod vocab;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

pub use corpus::{load_corpus, parse_corpus, sample_few_shot, Corpus, FewShotSplit, Instance, Schema};
pub use metrics::{loss_and_metrics, EvalResult, LossKind};
pub use template::{label_words, render, Pattern, Rendered, Segment, Verbalizer};
pub use vocab::{Vocab, MASK, MASK_ID, PAD, PAD_ID, UNK, UNK_ID};

use crate::error::{Error, Result};

/// Prompt and label words in the `{"pattern": [...], "verbalizer": {...}}` form.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Prompt {
    pub pattern: Pattern,
    pub verbalizer: BTreeMap<String, String>,
}

impl Prompt {
    pub fn sst2() -> Self {
        Prompt {
            pattern: Pattern::new(&["text", "It", "was", "<mask>", "."]).expect("valid pattern"),
            verbalizer: [("0", "bad"), ("1", "great")]
                .into_iter()
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .collect(),
        }
    }
}

/// Sorted vocabulary covering the corpus, the pattern literals and the label words.
pub fn build_vocab(corpus: &Corpus, prompt: &Prompt) -> Result<Vocab> {
    let mut words = BTreeSet::new();
    for inst in &corpus.instances {
        for f in &inst.fields {
            words.extend(vocab::split(f));
        }
    }
    words.extend(prompt.pattern.literals().map(str::to_string));
    for w in label_words(&prompt.verbalizer)? {
        words.insert(vocab::normalize(&w));
    }
    for reserved in [PAD, UNK, MASK] {
        words.remove(reserved);
    }
    Ok(Vocab::from_words(words))
}

/// A corpus-independent bundle that turns instances into model input.
#[derive(Clone, Debug)]
pub struct PreparedTask {
    pub vocab: Vocab,
    pub pattern: Pattern,
    pub verbalizer: Verbalizer,
    pub max_seq_len: usize,
    pub loss: LossKind,
    pub report_f1: bool,
}

impl PreparedTask {
    pub fn new(
        vocab: Vocab,
        pattern: Pattern,
        verbalizer: Verbalizer,
        max_seq_len: usize,
        loss: LossKind,
        report_f1: bool,
    ) -> Result<Self> {
        if report_f1 && verbalizer.num_classes() != 2 {
            return Err(Error::invalid("F1 is defined here for binary tasks only"));
        }
        Ok(PreparedTask {
            vocab,
            pattern,
            verbalizer,
            max_seq_len,
            loss,
            report_f1,
        })
    }

    pub fn from_prompt(
        corpus: &Corpus,
        prompt: &Prompt,
        max_seq_len: usize,
        loss: LossKind,
        report_f1: bool,
    ) -> Result<Self> {
        prompt.pattern.check_schema(corpus.schema)?;
        let vocab = build_vocab(corpus, prompt)?;
        let verbalizer = Verbalizer::from_map(&prompt.verbalizer, &vocab)?;
        if verbalizer.num_classes() != corpus.num_classes {
            return Err(Error::invalid(format!(
                "verbalizer has {} classes, corpus has {}",
                verbalizer.num_classes(),
                corpus.num_classes
            )));
        }
        PreparedTask::new(vocab, prompt.pattern.clone(), verbalizer, max_seq_len, loss, report_f1)
    }

    pub fn encode(&self, instances: &[Instance]) -> Result<EncodedSet> {
        let mut tokens = Vec::with_capacity(instances.len());
        let mut labels = Vec::with_capacity(instances.len());
        for (i, inst) in instances.iter().enumerate() {
            if inst.label >= self.verbalizer.num_classes() {
                return Err(Error::invalid(format!("instance {i} has unknown label {}", inst.label)));
            }
            let r = render(inst, &self.pattern, &self.vocab, self.max_seq_len)
                .map_err(|e| e.context(format!("rendering instance {i}")))?;
            tokens.push(r.tokens);
            labels.push(inst.label);
        }
        Ok(EncodedSet { tokens, labels })
    }

    pub fn score(&self, logits: &crate::linalg::Matrix, labels: &[usize]) -> Result<EvalResult> {
        loss_and_metrics(logits, labels, &self.verbalizer, self.loss, self.report_f1)
    }
}

/// Rendered token sequences with their labels.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncodedSet {
    pub tokens: Vec<Vec<u32>>,
    pub labels: Vec<usize>,
}

impl EncodedSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vocab_covers_prompt_and_is_sorted() {
        let c = parse_corpus("label\ttext\n0\tDull plot\n1\tfine acting\n", Schema::SingleSentence, 2).unwrap();
        let p = Prompt::sst2();
        let v = build_vocab(&c, &p).unwrap();
        for w in ["dull", "plot", "fine", "acting", "it", "was", ".", "bad", "great"] {
            assert!(v.get(w).is_some(), "{w}");
        }
        assert_eq!(v.len(), 3 + 9);
        let words: Vec<&str> = (3..v.len() as u32).map(|i| v.word(i).unwrap()).collect();
        let mut sorted = words.clone();
        sorted.sort_unstable();
        assert_eq!(words, sorted);
    }

    #[test]
    fn encode_places_one_mask() {
        let c = parse_corpus("label\ttext\n0\tdull plot\n1\tfine acting\n", Schema::SingleSentence, 2).unwrap();
        let t = PreparedTask::from_prompt(&c, &Prompt::sst2(), 16, LossKind::CrossEntropy, true).unwrap();
        let enc = t.encode(&c.instances).unwrap();
        assert_eq!(enc.labels, vec![0, 1]);
        for seq in &enc.tokens {
            assert_eq!(seq.iter().filter(|&&t| t == MASK_ID).count(), 1);
        }
    }

    #[test]
    fn prompt_json_form() {
        let p: Prompt =
            serde_json::from_str(r#"{"pattern":["text","It","was","<mask>","."],"verbalizer":{"0":"bad","1":"great"}}"#)
                .unwrap();
        assert_eq!(p, Prompt::sst2());
    }
}
