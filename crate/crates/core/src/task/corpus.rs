//! Tab-separated corpora and class-balanced few-shot splits.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schema {
    /// `label  text`
    SingleSentence,
    /// `label  text1  text2`
    SentencePair,
}

impl Schema {
    pub fn field_count(self) -> usize {
        match self {
            Schema::SingleSentence => 1,
            Schema::SentencePair => 2,
        }
    }

    fn header(self) -> &'static [&'static str] {
        match self {
            Schema::SingleSentence => &["label", "text"],
            Schema::SentencePair => &["label", "text1", "text2"],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Instance {
    pub label: usize,
    pub fields: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub schema: Schema,
    pub num_classes: usize,
    pub instances: Vec<Instance>,
}

impl Corpus {
    pub fn new(schema: Schema, num_classes: usize, instances: Vec<Instance>) -> Result<Self> {
        if num_classes == 0 {
            return Err(Error::invalid("a task needs at least one class"));
        }
        for (i, inst) in instances.iter().enumerate() {
            if inst.label >= num_classes {
                return Err(Error::invalid(format!("instance {i} has unknown label {}", inst.label)));
            }
            if inst.fields.len() != schema.field_count() {
                return Err(Error::invalid(format!(
                    "instance {i} has {} text fields, schema needs {}",
                    inst.fields.len(),
                    schema.field_count()
                )));
            }
        }
        Ok(Corpus {
            schema,
            num_classes,
            instances,
        })
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for inst in &self.instances {
            counts[inst.label] += 1;
        }
        counts
    }

    /// Writes the corpus back out in the format [`parse_corpus`] reads.
    pub fn to_tsv(&self) -> String {
        let mut out = self.schema.header().join("\t");
        out.push('\n');
        for inst in &self.instances {
            out.push_str(&inst.label.to_string());
            for f in &inst.fields {
                out.push('\t');
                out.push_str(f);
            }
            out.push('\n');
        }
        out
    }
}

pub fn load_corpus(path: &Path, schema: Schema, num_classes: usize) -> Result<Corpus> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::from(e).context(format!("reading {}", path.display())))?;
    parse_corpus(&text, schema, num_classes).map_err(|e| e.context(path.display().to_string()))
}

/// Parses a TSV corpus whose first line is the schema header. All malformed
/// rows are reported together, by 1-based line number.
pub fn parse_corpus(text: &str, schema: Schema, num_classes: usize) -> Result<Corpus> {
    let mut lines = text.lines().enumerate();
    let header = loop {
        match lines.next() {
            Some((_, l)) if l.trim().is_empty() => continue,
            Some((_, l)) => break l,
            None => return Err(Error::Parse("corpus is empty".into())),
        }
    };
    let cols: Vec<&str> = header.split('\t').map(str::trim).collect();
    if cols != schema.header() {
        return Err(Error::Parse(format!(
            "expected header '{}', found '{}'",
            schema.header().join("\\t"),
            header
        )));
    }
    let width = schema.field_count() + 1;
    let mut instances = Vec::new();
    let mut malformed = Vec::new();
    let mut unknown = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let line_no = i + 1;
        let parts: Vec<&str> = line.split('\t').collect();
        if parts.len() != width {
            malformed.push(line_no);
            continue;
        }
        match parts[0].trim().parse::<usize>() {
            Ok(label) if label < num_classes => instances.push(Instance {
                label,
                fields: parts[1..].iter().map(|s| s.to_string()).collect(),
            }),
            Ok(_) => unknown.push(line_no),
            Err(_) => malformed.push(line_no),
        }
    }
    if !malformed.is_empty() {
        return Err(Error::Parse(format!("malformed rows at lines {}", join(&malformed))));
    }
    if !unknown.is_empty() {
        return Err(Error::Parse(format!(
            "labels outside 0..{num_classes} at lines {}",
            join(&unknown)
        )));
    }
    Corpus::new(schema, num_classes, instances)
}

fn join(lines: &[usize]) -> String {
    lines.iter().map(|l| l.to_string()).collect::<Vec<_>>().join(", ")
}

/// Class-balanced train/dev split plus everything left over.
#[derive(Clone, Debug, PartialEq)]
pub struct FewShotSplit {
    pub train: Vec<Instance>,
    pub dev: Vec<Instance>,
    /// Instances not drawn into train or dev, usable as a test set.
    pub rest: Vec<Instance>,
    pub n_per_class: usize,
    pub num_classes: usize,
}

/// Draws `n` train and `n` dev instances per class without overlap.
pub fn sample_few_shot(corpus: &Corpus, n: usize, seed: u64) -> Result<FewShotSplit> {
    if n == 0 {
        return Err(Error::invalid("few-shot size must be positive"));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); corpus.num_classes];
    for (i, inst) in corpus.instances.iter().enumerate() {
        by_class[inst.label].push(i);
    }
    if let Some((class, have)) = by_class
        .iter()
        .enumerate()
        .map(|(c, v)| (c, v.len()))
        .find(|&(_, len)| len < 2 * n)
    {
        return Err(Error::invalid(format!(
            "class {class} has {have} instances, {} needed for {n}-shot train and dev",
            2 * n
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train_idx = Vec::new();
    let mut dev_idx = Vec::new();
    let mut used = vec![false; corpus.len()];
    for idx in &mut by_class {
        idx.shuffle(&mut rng);
        train_idx.extend_from_slice(&idx[..n]);
        dev_idx.extend_from_slice(&idx[n..2 * n]);
        for &i in &idx[..2 * n] {
            used[i] = true;
        }
    }
    train_idx.shuffle(&mut rng);
    dev_idx.shuffle(&mut rng);
    let pick = |idx: &[usize]| idx.iter().map(|&i| corpus.instances[i].clone()).collect::<Vec<_>>();
    let rest = corpus
        .instances
        .iter()
        .zip(&used)
        .filter(|(_, &u)| !u)
        .map(|(inst, _)| inst.clone())
        .collect();
    Ok(FewShotSplit {
        train: pick(&train_idx),
        dev: pick(&dev_idx),
        rest,
        n_per_class: n,
        num_classes: corpus.num_classes,
    })
}
