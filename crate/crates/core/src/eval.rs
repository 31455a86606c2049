use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::nn::{Mode, Network};
use crate::tensor::{no_grad, Element};

const EVAL_BATCH: usize = 256;

#[derive(Debug, Clone, PartialEq)]
pub struct EvalResult {
    pub accuracy: f64,
    pub correct: usize,
    pub n: usize,
    /// Accuracy per dataset label; `NaN` for labels absent from the set.
    pub per_class: Vec<f64>,
    pub per_class_count: Vec<usize>,
}

/// Index of the largest entry; the first one wins ties.
pub fn argmax<T: PartialOrd + Copy>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Scores row-major `[n, k]` logits against `labels`. `label_map[j]` is the
/// dataset label predicted by output `j` (identity when `None`).
pub fn score_logits<T: PartialOrd + Copy>(logits: &[T], k: usize, labels: &[usize], classes: usize, label_map: Option<&[usize]>) -> Result<EvalResult> {
    if labels.is_empty() {
        return Err(Error::Data("cannot evaluate an empty dataset".into()));
    }
    if logits.len() != labels.len() * k {
        return Err(Error::Shape {
            context: "logits".into(),
            expected: vec![labels.len(), k],
            got: vec![logits.len()],
        });
    }
    let mut hits = vec![0usize; classes];
    let mut counts = vec![0usize; classes];
    for (i, &y) in labels.iter().enumerate() {
        let j = argmax(&logits[i * k..(i + 1) * k]);
        let pred = label_map.map_or(j, |m| m[j]);
        counts[y] += 1;
        if pred == y {
            hits[y] += 1;
        }
    }
    let correct = hits.iter().sum();
    Ok(EvalResult {
        accuracy: correct as f64 / labels.len() as f64,
        correct,
        n: labels.len(),
        per_class: hits.iter().zip(&counts).map(|(&h, &c)| if c == 0 { f64::NAN } else { h as f64 / c as f64 }).collect(),
        per_class_count: counts,
    })
}

/// Eval-mode accuracy of `net` on `ds`.
pub fn evaluate<T: Element>(net: &Network<T>, ds: &LabeledDataset, label_map: Option<&[usize]>) -> Result<EvalResult> {
    if ds.is_empty() {
        return Err(Error::Data("cannot evaluate an empty dataset".into()));
    }
    let mut logits = Vec::with_capacity(ds.len() * ds.num_classes());
    let mut k = 0;
    no_grad(|| -> Result<()> {
        let idx: Vec<usize> = (0..ds.len()).collect();
        for chunk in idx.chunks(EVAL_BATCH) {
            let out = net.logits(&ds.batch::<T>(chunk), Mode::Eval)?;
            k = out.shape()[1];
            logits.extend(out.data().iter().copied());
        }
        Ok(())
    })?;
    score_logits(&logits, k, &ds.labels, ds.num_classes(), label_map)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aggregate {
    pub mean: f64,
    /// Sample standard deviation (n − 1) over √n.
    pub stderr: f64,
    pub n: usize,
}

pub fn aggregate(values: &[f64]) -> Result<Aggregate> {
    let n = values.len();
    if n < 2 {
        return Err(Error::Param(format!("standard error needs at least 2 results, got {n}")));
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    Ok(Aggregate {
        mean,
        stderr: (var / n as f64).sqrt(),
        n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argmax_first_tie() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0, 2.0]), 1);
        assert_eq!(argmax(&[0.0, 0.0]), 0);
    }

    #[test]
    fn constant_predictor_on_balanced_set() {
        let labels: Vec<usize> = (0..50).map(|i| i % 5).collect();
        let logits: Vec<f32> = labels.iter().flat_map(|_| [1.0, 0.0, 0.0, 0.0, 0.0]).collect();
        let r = score_logits(&logits, 5, &labels, 5, None).unwrap();
        assert_eq!(r.accuracy, 0.2);
        assert_eq!(r.per_class, vec![1.0, 0.0, 0.0, 0.0, 0.0]);
        let perfect: Vec<f32> = labels.iter().flat_map(|&y| (0..5).map(move |j| if j == y { 1.0 } else { 0.0 })).collect();
        assert_eq!(score_logits(&perfect, 5, &labels, 5, None).unwrap().accuracy, 1.0);
    }

    #[test]
    fn label_map_applies() {
        let r = score_logits(&[0.0, 1.0, 1.0, 0.0], 2, &[0, 1], 2, Some(&[1, 0])).unwrap();
        assert_eq!(r.accuracy, 1.0);
        assert!(score_logits::<f32>(&[], 2, &[], 2, None).is_err());
    }

    #[test]
    fn aggregate_reference() {
        let a = aggregate(&[0.9, 0.94]).unwrap();
        assert!((a.mean - 0.92).abs() < 1e-12);
        assert!((a.stderr - 0.02).abs() < 1e-12);
        assert_eq!(aggregate(&[0.5, 0.5, 0.5]).unwrap().stderr, 0.0);
        assert!(aggregate(&[0.5]).is_err());
    }
}
