use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub train_accuracy: f64,
    pub final_loss: f64,
}

/// Multinomial logistic regression fitted by full-batch gradient descent on
/// standardized features. Reports how well the classes can be read off linearly.
pub fn logistic_probe(features: &Matrix, labels: &[usize], classes: usize, iterations: usize) -> Result<ProbeResult> {
    let (n, f) = features.shape();
    if n != labels.len() || n == 0 {
        return Err(Error::invalid("probe needs one label per feature row"));
    }
    if classes < 2 || labels.iter().any(|&y| y >= classes) {
        return Err(Error::invalid("probe labels must lie in 0..classes with classes >= 2"));
    }
    let mut x = features.clone();
    for j in 0..f {
        let mean = (0..n).map(|i| x.get(i, j)).sum::<f64>() / n as f64;
        let var = (0..n).map(|i| (x.get(i, j) - mean).powi(2)).sum::<f64>() / n as f64;
        let sd = if var > 1e-24 { var.sqrt() } else { 1.0 };
        for i in 0..n {
            x.set(i, j, (x.get(i, j) - mean) / sd);
        }
    }
    let lr = 0.5;
    let l2 = 1e-4;
    // Weights `classes × (f + 1)`, bias last.
    let mut w = vec![0.0; classes * (f + 1)];
    let mut grad = vec![0.0; w.len()];
    let mut probs = vec![0.0; classes];
    let mut loss = 0.0;
    for _ in 0..iterations {
        grad.iter_mut().for_each(|g| *g = 0.0);
        loss = 0.0;
        for i in 0..n {
            let row = x.row(i);
            for (c, p) in probs.iter_mut().enumerate() {
                let wc = &w[c * (f + 1)..(c + 1) * (f + 1)];
                *p = wc[f] + row.iter().zip(wc).map(|(a, b)| a * b).sum::<f64>();
            }
            let max = probs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = probs.iter().map(|s| (s - max).exp()).sum();
            loss += max + z.ln() - probs[labels[i]];
            for (c, p) in probs.iter_mut().enumerate() {
                let e = (*p - max).exp() / z - if c == labels[i] { 1.0 } else { 0.0 };
                let gc = &mut grad[c * (f + 1)..(c + 1) * (f + 1)];
                for (g, a) in gc.iter_mut().zip(row) {
                    *g += e * a;
                }
                gc[f] += e;
            }
        }
        for (wi, gi) in w.iter_mut().zip(&grad) {
            *wi -= lr * (gi / n as f64 + l2 * *wi);
        }
        loss /= n as f64;
    }
    let mut correct = 0;
    for (i, &label) in labels.iter().enumerate() {
        let row = x.row(i);
        let score = |c: usize| {
            let wc = &w[c * (f + 1)..(c + 1) * (f + 1)];
            wc[f] + row.iter().zip(wc).map(|(a, b)| a * b).sum::<f64>()
        };
        let pred = (0..classes).fold(0, |best, c| if score(c) > score(best) { c } else { best });
        if pred == label {
            correct += 1;
        }
    }
    Ok(ProbeResult {
        train_accuracy: correct as f64 / n as f64,
        final_loss: loss,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn separable_clusters_are_fit() {
        let x = Matrix::from_fn(40, 3, |i, j| match j {
            0 => (if i % 2 == 0 { -1.0 } else { 1.0 }) + 0.01 * i as f64,
            _ => (i * j) as f64 % 5.0,
        });
        let y: Vec<usize> = (0..40).map(|i| i % 2).collect();
        let r = logistic_probe(&x, &y, 2, 500).unwrap();
        assert_eq!(r.train_accuracy, 1.0);
    }

    #[test]
    fn constant_features_stay_at_chance() {
        let x = Matrix::from_vec(4, 2, vec![1.0; 8]).unwrap();
        let r = logistic_probe(&x, &[0, 1, 0, 1], 2, 200).unwrap();
        assert_eq!(r.train_accuracy, 0.5);
        assert!((r.final_loss - std::f64::consts::LN_2).abs() < 1e-9);
    }
}
