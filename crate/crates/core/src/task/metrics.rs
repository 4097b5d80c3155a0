use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::template::Verbalizer;
use crate::error::{Error, Result};
use crate::linalg::Matrix;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    #[default]
    CrossEntropy,
    /// Multi-class margin loss, `max(0, 1 + max_{j != y} s_j - s_y)`.
    Hinge,
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "cross_entropy" | "ce" => Ok(LossKind::CrossEntropy),
            "hinge" => Ok(LossKind::Hinge),
            _ => Err(Error::Parse(format!("unknown loss '{s}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub loss: f64,
    pub accuracy: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub f1: Option<f64>,
    pub correct: usize,
    pub count: usize,
}

/// Scores vocabulary logits (one row per instance) against the verbalizer's
/// columns only. Ties in the argmax go to the lower class id.
pub fn loss_and_metrics(
    logits: &Matrix,
    labels: &[usize],
    verbalizer: &Verbalizer,
    loss: LossKind,
    with_f1: bool,
) -> Result<EvalResult> {
    if logits.rows() != labels.len() {
        return Err(Error::invalid(format!(
            "{} logit rows for {} labels",
            logits.rows(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::invalid("cannot score an empty batch"));
    }
    let classes = verbalizer.num_classes();
    if let Some(&t) = verbalizer.token_ids().iter().find(|&&t| t as usize >= logits.cols()) {
        return Err(Error::invalid(format!("label token {t} outside {} logit columns", logits.cols())));
    }
    if let Some(&y) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::invalid(format!("label {y} outside {classes} classes")));
    }
    let mut total = 0.0;
    let mut correct = 0;
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    let mut scores = vec![0.0; classes];
    for (i, &y) in labels.iter().enumerate() {
        let row = logits.row(i);
        for (s, &t) in scores.iter_mut().zip(verbalizer.token_ids()) {
            *s = row[t as usize];
        }
        total += match loss {
            LossKind::CrossEntropy => cross_entropy(&scores, y),
            LossKind::Hinge => hinge(&scores, y),
        };
        let pred = argmax(&scores);
        if pred == y {
            correct += 1;
        }
        match (pred == 1, y == 1) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    let n = labels.len();
    let f1 = with_f1.then(|| {
        let denom = 2 * tp + fp + fn_;
        if denom == 0 {
            0.0
        } else {
            2.0 * tp as f64 / denom as f64
        }
    });
    Ok(EvalResult {
        loss: total / n as f64,
        accuracy: correct as f64 / n as f64,
        f1,
        correct,
        count: n,
    })
}

fn cross_entropy(scores: &[f64], y: usize) -> f64 {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + scores.iter().map(|s| (s - max).exp()).sum::<f64>().ln();
    (lse - scores[y]).max(0.0)
}

fn hinge(scores: &[f64], y: usize) -> f64 {
    let rival = scores
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != y)
        .map(|(_, &s)| s)
        .fold(f64::NEG_INFINITY, f64::max);
    (1.0 + rival - scores[y]).max(0.0)
}

fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::task::Vocab;

    fn setup() -> (Vocab, Verbalizer) {
        // ids: 3 = "bad", 4 = "great"; V = 5 with the reserved tokens.
        let v = Vocab::from_words(["bad", "great"]);
        let verb = Verbalizer::new(&["bad", "great"], &v).unwrap();
        (v, verb)
    }

    #[test]
    fn uniform_logits_give_ln2() {
        let (_, verb) = setup();
        let logits = Matrix::from_vec(3, 5, vec![0.25; 15]).unwrap();
        let r = loss_and_metrics(&logits, &[0, 1, 1], &verb, LossKind::CrossEntropy, false).unwrap();
        assert!((r.loss - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(r.correct, 1);
        assert!(r.f1.is_none());
    }

    #[test]
    fn dominant_correct_column() {
        let (_, verb) = setup();
        let logits = Matrix::from_vec(2, 5, vec![0., 0., 0., 1e9, 0., 0., 0., 0., 0., 1e9]).unwrap();
        let r = loss_and_metrics(&logits, &[0, 1], &verb, LossKind::CrossEntropy, true).unwrap();
        assert_eq!(r.loss, 0.0);
        assert_eq!(r.accuracy, 1.0);
        assert_eq!(r.f1, Some(1.0));
    }

    #[test]
    fn hand_computed_batch() {
        // V = 4 with label tokens at columns 1 and 3.
        let verb = Verbalizer::from_token_ids(vec![1, 3]).unwrap();
        #[rustfmt::skip]
        let logits = Matrix::from_vec(3, 4, vec![
            9.0, 2.0, -4.0, 0.0,
            0.0, 1.0,  7.0, 1.0,
            5.0, 0.5,  0.0, -0.5,
        ]).unwrap();
        let labels = [1, 0, 1];
        // Per-row losses: softplus(s_other - s_true).
        // row0: ln(1 + e^{2}) = 2.126928011042972
        // row1: ln(1 + e^{0}) = 0.6931471805599453
        // row2: ln(1 + e^{1}) = 1.3132616875182228
        let expected = (2.126_928_011_042_972 + std::f64::consts::LN_2 + 1.313_261_687_518_222_8) / 3.0;
        let r = loss_and_metrics(&logits, &labels, &verb, LossKind::CrossEntropy, true).unwrap();
        assert!((r.loss - expected).abs() < 1e-14, "{}", r.loss);
        // Predictions 0, 0 (tie), 0.
        assert_eq!(r.correct, 1);
        assert!((r.accuracy - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(r.f1, Some(0.0));
        let h = loss_and_metrics(&logits, &labels, &verb, LossKind::Hinge, false).unwrap();
        assert!((h.loss - (3.0 + 1.0 + 2.0) / 3.0).abs() < 1e-15);
    }

    #[test]
    fn binary_f1() {
        let (_, verb) = setup();
        // predictions: 1, 1, 0, 0 ; labels: 1, 0, 1, 0 -> tp 1, fp 1, fn 1
        #[rustfmt::skip]
        let logits = Matrix::from_vec(4, 5, vec![
            0., 0., 0., 0., 1.,
            0., 0., 0., 0., 1.,
            0., 0., 0., 1., 0.,
            0., 0., 0., 1., 0.,
        ]).unwrap();
        let r = loss_and_metrics(&logits, &[1, 0, 1, 0], &verb, LossKind::CrossEntropy, true).unwrap();
        assert_eq!(r.f1, Some(0.5));
        assert_eq!(r.accuracy, 0.5);
    }

    #[test]
    fn shape_errors() {
        let (_, verb) = setup();
        let logits = Matrix::zeros(2, 5);
        assert!(loss_and_metrics(&logits, &[0], &verb, LossKind::CrossEntropy, false).is_err());
        assert!(loss_and_metrics(&logits, &[0, 2], &verb, LossKind::CrossEntropy, false).is_err());
        assert!(loss_and_metrics(&Matrix::zeros(2, 4), &[0, 1], &verb, LossKind::CrossEntropy, false).is_err());
    }
}
