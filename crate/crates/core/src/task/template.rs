//! Patterns, verbalizers and prompt rendering.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::corpus::{Instance, Schema};
use super::vocab::{self, Vocab, MASK, MASK_ID};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Segment {
    /// Index into the instance's text fields.
    Slot(usize),
    Literal(String),
}

/// Ordered text slots and literal words with exactly one `<mask>`, e.g.
/// `["text", "It", "was", "<mask>", "."]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Pattern {
    segments: Vec<Segment>,
    raw: Vec<String>,
}

impl Pattern {
    pub fn new<S: AsRef<str>>(parts: &[S]) -> Result<Self> {
        let raw: Vec<String> = parts.iter().map(|s| s.as_ref().to_string()).collect();
        let mut segments = Vec::new();
        let mut masks = 0;
        for part in &raw {
            match part.as_str() {
                "text" | "text1" => segments.push(Segment::Slot(0)),
                "text2" => segments.push(Segment::Slot(1)),
                lit => {
                    for w in lit.split_whitespace() {
                        if w == MASK {
                            masks += 1;
                        }
                        segments.push(Segment::Literal(vocab::normalize(w)));
                    }
                }
            }
        }
        if masks != 1 {
            return Err(Error::invalid(format!("pattern needs exactly one {MASK}, found {masks}")));
        }
        let has_text = raw.iter().any(|p| p == "text");
        let has_pair = raw.iter().any(|p| p == "text1" || p == "text2");
        if has_text && has_pair {
            return Err(Error::invalid("pattern mixes 'text' with 'text1'/'text2'"));
        }
        Ok(Pattern { segments, raw })
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    /// Literal words, mask included.
    pub fn literals(&self) -> impl Iterator<Item = &str> {
        self.segments.iter().filter_map(|s| match s {
            Segment::Literal(w) => Some(w.as_str()),
            Segment::Slot(_) => None,
        })
    }

    pub fn literal_len(&self) -> usize {
        self.literals().count()
    }

    /// Checks that the slots are exactly those the schema provides.
    pub fn check_schema(&self, schema: Schema) -> Result<()> {
        let want: &[&str] = match schema {
            Schema::SingleSentence => &["text"],
            Schema::SentencePair => &["text1", "text2"],
        };
        let mut have: Vec<&str> = self
            .raw
            .iter()
            .map(String::as_str)
            .filter(|p| matches!(*p, "text" | "text1" | "text2"))
            .collect();
        have.sort_unstable();
        have.dedup();
        if have != want {
            return Err(Error::invalid(format!(
                "pattern slots {:?} do not match schema {:?}",
                have, schema
            )));
        }
        Ok(())
    }
}

impl TryFrom<Vec<String>> for Pattern {
    type Error = Error;

    fn try_from(parts: Vec<String>) -> Result<Self> {
        Pattern::new(&parts)
    }
}

impl From<Pattern> for Vec<String> {
    fn from(p: Pattern) -> Self {
        p.raw
    }
}

/// Injective map from class id to a single vocabulary token.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Verbalizer {
    words: Vec<String>,
    ids: Vec<u32>,
}

impl Verbalizer {
    /// `words[c]` is the label word of class `c`.
    pub fn new<S: AsRef<str>>(words: &[S], vocab: &Vocab) -> Result<Self> {
        if words.is_empty() {
            return Err(Error::invalid("verbalizer is empty"));
        }
        let mut ids = Vec::with_capacity(words.len());
        let mut norm = Vec::with_capacity(words.len());
        for (class, w) in words.iter().enumerate() {
            let w = w.as_ref();
            if w.split_whitespace().count() != 1 {
                return Err(Error::invalid(format!(
                    "label word '{w}' for class {class} must be a single token"
                )));
            }
            let id = vocab
                .get(w)
                .ok_or_else(|| Error::invalid(format!("label word '{w}' for class {class} is not in the vocabulary")))?;
            if id <= MASK_ID {
                return Err(Error::invalid(format!("label word '{w}' is a reserved token")));
            }
            if let Some(other) = ids.iter().position(|&o| o == id) {
                return Err(Error::invalid(format!(
                    "classes {other} and {class} share the label word '{w}'"
                )));
            }
            ids.push(id);
            norm.push(vocab::normalize(w));
        }
        Ok(Verbalizer { words: norm, ids })
    }

    /// Accepts the `{"0": "bad", "1": "great"}` form.
    pub fn from_map(map: &BTreeMap<String, String>, vocab: &Vocab) -> Result<Self> {
        let words = label_words(map)?;
        Verbalizer::new(&words, vocab)
    }

    /// Builds a verbalizer straight from token ids, for generated vocabularies.
    pub fn from_token_ids(ids: Vec<u32>) -> Result<Self> {
        if ids.is_empty() {
            return Err(Error::invalid("verbalizer is empty"));
        }
        for (i, t) in ids.iter().enumerate() {
            if ids[..i].contains(t) {
                return Err(Error::invalid(format!("token {t} is used by two classes")));
            }
        }
        let words = ids.iter().map(|t| format!("#{t}")).collect();
        Ok(Verbalizer { words, ids })
    }

    pub fn num_classes(&self) -> usize {
        self.ids.len()
    }

    pub fn token_ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }
}

/// Orders a `{"class id": word}` map by class id, requiring ids `0..n`.
pub fn label_words(map: &BTreeMap<String, String>) -> Result<Vec<String>> {
    let mut pairs = Vec::with_capacity(map.len());
    for (k, v) in map {
        let class: usize = k
            .trim()
            .parse()
            .map_err(|_| Error::Parse(format!("verbalizer key '{k}' is not a class id")))?;
        pairs.push((class, v.clone()));
    }
    pairs.sort_by_key(|p| p.0);
    for (expected, (class, _)) in pairs.iter().enumerate() {
        if *class != expected {
            return Err(Error::invalid(format!("verbalizer is missing class {expected}")));
        }
    }
    Ok(pairs.into_iter().map(|p| p.1).collect())
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Rendered {
    pub tokens: Vec<u32>,
    pub mask_position: usize,
}

/// Fills the pattern with the instance's fields. When the result exceeds
/// `max_len`, the longest text field loses tokens from its right end first.
pub fn render(instance: &Instance, pattern: &Pattern, vocab: &Vocab, max_len: usize) -> Result<Rendered> {
    let literal_len = pattern.literal_len();
    if literal_len > max_len {
        return Err(Error::invalid(format!(
            "pattern literals need {literal_len} tokens, limit is {max_len}"
        )));
    }
    let mut fields: Vec<Vec<u32>> = instance.fields.iter().map(|f| vocab.tokenize(f)).collect();
    for seg in pattern.segments() {
        if let Segment::Slot(i) = seg {
            if *i >= fields.len() {
                return Err(Error::invalid(format!("pattern uses text field {} the instance lacks", i + 1)));
            }
        }
    }
    let slot_uses = |i: usize| pattern.segments().iter().filter(|s| **s == Segment::Slot(i)).count();
    let uses: Vec<usize> = (0..fields.len()).map(slot_uses).collect();
    let mut total = literal_len + fields.iter().zip(&uses).map(|(f, u)| f.len() * u).sum::<usize>();
    while total > max_len {
        let longest = (0..fields.len())
            .filter(|&i| uses[i] > 0 && !fields[i].is_empty())
            .max_by_key(|&i| (fields[i].len(), std::cmp::Reverse(i)))
            .expect("literals fit, so some field can shrink");
        fields[longest].pop();
        total -= uses[longest];
    }
    let mut tokens = Vec::with_capacity(total);
    let mut mask_position = 0;
    for seg in pattern.segments() {
        match seg {
            Segment::Slot(i) => tokens.extend_from_slice(&fields[*i]),
            Segment::Literal(w) => {
                let id = vocab.get(w).unwrap_or(vocab::UNK_ID);
                if id == MASK_ID {
                    mask_position = tokens.len();
                }
                tokens.push(id);
            }
        }
    }
    Ok(Rendered { tokens, mask_position })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> Vocab {
        Vocab::from_words(["great", "movie", "it", "was", ".", "bad", "?", ",", "yes", "no", "a", "b"])
    }

    fn single(text: &str) -> Instance {
        Instance {
            label: 1,
            fields: vec![text.into()],
        }
    }

    fn words(v: &Vocab, r: &Rendered) -> Vec<String> {
        r.tokens.iter().map(|&t| v.word(t).unwrap().to_string()).collect()
    }

    #[test]
    fn single_sentence_pattern() {
        let v = vocab();
        let p = Pattern::new(&["text", "It", "was", "<mask>", "."]).unwrap();
        p.check_schema(Schema::SingleSentence).unwrap();
        let r = render(&single("great movie"), &p, &v, 32).unwrap();
        assert_eq!(words(&v, &r), ["great", "movie", "it", "was", "<mask>", "."]);
        assert_eq!(r.mask_position, 4);
        assert_eq!(r, render(&single("great movie"), &p, &v, 32).unwrap());
    }

    #[test]
    fn sentence_pair_pattern() {
        let v = vocab();
        let p = Pattern::new(&["text1", "?", "<mask>", ",", "text2"]).unwrap();
        p.check_schema(Schema::SentencePair).unwrap();
        assert!(p.check_schema(Schema::SingleSentence).is_err());
        let inst = Instance {
            label: 0,
            fields: vec!["a".into(), "b".into()],
        };
        let r = render(&inst, &p, &v, 32).unwrap();
        assert_eq!(words(&v, &r), ["a", "?", "<mask>", ",", "b"]);
        assert_eq!(r.mask_position, 2);
    }

    #[test]
    fn empty_text_leaves_literals() {
        let v = vocab();
        let p = Pattern::new(&["text", "It", "was", "<mask>", "."]).unwrap();
        let r = render(&single(""), &p, &v, 32).unwrap();
        assert_eq!(words(&v, &r), ["it", "was", "<mask>", "."]);
        assert_eq!(r.mask_position, 2);
    }

    #[test]
    fn truncates_text_from_the_right() {
        let v = vocab();
        let p = Pattern::new(&["text", "It", "was", "<mask>", "."]).unwrap();
        let r = render(&single("a b great movie bad"), &p, &v, 7).unwrap();
        assert_eq!(words(&v, &r), ["a", "b", "great", "it", "was", "<mask>", "."]);
        assert!(render(&single("a"), &p, &v, 3).is_err());
        let r = render(&single("a b"), &p, &v, 4).unwrap();
        assert_eq!(words(&v, &r), ["it", "was", "<mask>", "."]);
    }

    #[test]
    fn pair_truncation_shrinks_longest_field() {
        let v = vocab();
        let p = Pattern::new(&["text1", "?", "<mask>", ",", "text2"]).unwrap();
        let inst = Instance {
            label: 0,
            fields: vec!["a b great movie".into(), "yes no".into()],
        };
        let r = render(&inst, &p, &v, 7).unwrap();
        assert_eq!(words(&v, &r), ["a", "b", "?", "<mask>", ",", "yes", "no"]);
    }

    #[test]
    fn pattern_validation() {
        assert!(Pattern::new(&["text", "It", "was", "."]).is_err());
        assert!(Pattern::new(&["text", "<mask>", "<mask>"]).is_err());
        assert!(Pattern::new(&["text", "text1", "<mask>"]).is_err());
        let p: Pattern = serde_json::from_str(r#"["text","It was <mask> ."]"#).unwrap();
        assert_eq!(p.literal_len(), 4);
        assert_eq!(serde_json::to_string(&p).unwrap(), r#"["text","It was <mask> ."]"#);
    }

    #[test]
    fn verbalizer_validation() {
        let v = vocab();
        let mut map = BTreeMap::new();
        map.insert("0".to_string(), "bad".to_string());
        map.insert("1".to_string(), "Great".to_string());
        let verb = Verbalizer::from_map(&map, &v).unwrap();
        assert_eq!(verb.token_ids(), &[v.get("bad").unwrap(), v.get("great").unwrap()]);
        assert!(Verbalizer::new(&["bad", "bad"], &v).is_err());
        assert!(Verbalizer::new(&["bad", "terrible"], &v).is_err());
        assert!(Verbalizer::new(&["bad", "very good"], &v).is_err());
        assert!(Verbalizer::new(&["bad", "<mask>"], &v).is_err());
        map.insert("3".to_string(), "no".to_string());
        assert!(Verbalizer::from_map(&map, &v).is_err());
    }
}
