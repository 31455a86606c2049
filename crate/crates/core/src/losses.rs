//! Training objectives. Every loss is mean-reduced over its batch.

use crate::error::{Error, Result};
use crate::tensor::{add, l2_normalize_rows, log_sigmoid, log_softmax, matmul, mean, pick, scale, segment_mean, softmax_entropy, transpose, Element, Tensor};

/// Mean negative log-likelihood of `labels` under `softmax(logits)`.
pub fn supervised_ce<T: Element>(logits: &Tensor<T>, labels: &[usize]) -> Result<Tensor<T>> {
    metric_logits_ce(logits, labels, 1.0)
}

fn metric_logits_ce<T: Element>(logits: &Tensor<T>, labels: &[usize], tau: f64) -> Result<Tensor<T>> {
    let lp = log_softmax(logits, tau)?;
    Ok(scale(&mean(&pick(&lp, labels)?), -1.0))
}

/// Discriminator objective: source scores labeled real, target fake.
/// `-mean(log σ(s)) - mean(log σ(-t))`.
pub fn domain_loss_d<T: Element>(src_logits: &Tensor<T>, tgt_logits: &Tensor<T>) -> Result<Tensor<T>> {
    let real = mean(&log_sigmoid(src_logits));
    let fake = mean(&log_sigmoid(&scale(tgt_logits, -1.0)));
    Ok(scale(&add(&real, &fake)?, -1.0))
}

/// Encoder objective with inverted labels:
/// `-mean(log σ(-s)) - mean(log σ(t))`.
pub fn domain_loss_e<T: Element>(src_logits: &Tensor<T>, tgt_logits: &Tensor<T>) -> Result<Tensor<T>> {
    domain_loss_d(tgt_logits, src_logits)
}

/// `query · normalize(support)ᵀ`: rows of `support` are scaled to unit norm,
/// the queries are not. Shapes `[n, d] × [c, d] → [n, c]`.
pub fn similarity<T: Element>(query: &Tensor<T>, support: &Tensor<T>) -> Result<Tensor<T>> {
    Ok(matmul(query, &transpose(&l2_normalize_rows(support)?)?)?)
}

/// Per-class mean embeddings `[classes, d]`; every class needs a member.
pub fn prototypes<T: Element>(embeddings: &Tensor<T>, labels: &[usize], classes: usize) -> Result<Tensor<T>> {
    Ok(segment_mean(embeddings, labels, classes)?)
}

/// Mean entropy of `softmax(similarity(q, support) / tau)` over the queries.
/// An empty query batch contributes 0.
pub fn entropy_transfer<T: Element>(queries: &Tensor<T>, support: &Tensor<T>, tau: f64) -> Result<Tensor<T>> {
    if tau <= 0.0 || tau.is_nan() {
        return Err(Error::Param(format!("temperature must be positive, got {tau}")));
    }
    if queries.shape().first() == Some(&0) {
        return Ok(Tensor::scalar(T::zero()));
    }
    Ok(mean(&softmax_entropy(&similarity(queries, support)?, tau)?))
}

/// Cross entropy with similarity-to-prototype scores as logits.
pub fn metric_ce<T: Element>(queries: &Tensor<T>, labels: &[usize], prototypes: &Tensor<T>, tau: f64) -> Result<Tensor<T>> {
    let classes = prototypes.shape().first().copied().unwrap_or(0);
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::Param(format!("no prototype for class {bad} ({classes} prototypes)")));
    }
    metric_logits_ce(&similarity(queries, prototypes)?, labels, tau)
}

/// The three semantic-transfer terms and their unweighted sum.
pub struct SemanticTerms<T: Element> {
    /// Entropy of unlabeled targets against source supports.
    pub src: Tensor<T>,
    /// Metric cross entropy of labeled targets against target prototypes.
    pub sup: Tensor<T>,
    /// Entropy of unlabeled targets against target prototypes.
    pub unsup: Tensor<T>,
    pub total: Tensor<T>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SemanticConfig {
    pub tau_st: f64,
    pub tau_tt: f64,
    /// Detach target prototypes from the graph.
    pub stop_grad_prototypes: bool,
}

impl Default for SemanticConfig {
    fn default() -> Self {
        SemanticConfig {
            tau_st: 2.0,
            tau_tt: 1.0,
            stop_grad_prototypes: false,
        }
    }
}

/// Semantic transfer loss. Target prototypes are the class means of
/// `labeled`; `unlabeled` may have zero rows, which leaves only the metric
/// cross entropy term.
pub fn semantic_total<T: Element>(
    src_support: &Tensor<T>,
    labeled: &Tensor<T>,
    labels: &[usize],
    unlabeled: &Tensor<T>,
    classes: usize,
    cfg: SemanticConfig,
) -> Result<SemanticTerms<T>> {
    let protos = prototypes(labeled, labels, classes)?;
    let protos = if cfg.stop_grad_prototypes { protos.detach() } else { protos };
    let src = entropy_transfer(unlabeled, src_support, cfg.tau_st)?;
    let sup = metric_ce(labeled, labels, &protos, 1.0)?;
    let unsup = entropy_transfer(unlabeled, &protos, cfg.tau_tt)?;
    let total = add(&add(&src, &sup)?, &unsup)?;
    Ok(SemanticTerms { src, sup, unsup, total })
}

/// `sup + alpha·dt_e + beta·st`.
pub fn total_objective<T: Element>(sup: &Tensor<T>, dt_e: &Tensor<T>, st: &Tensor<T>, alpha: f64, beta: f64) -> Result<Tensor<T>> {
    if !(alpha >= 0.0 && beta >= 0.0) {
        return Err(Error::Param(format!("loss weights must be non-negative, got α={alpha} β={beta}")));
    }
    Ok(add(&add(sup, &scale(dt_e, alpha))?, &scale(st, beta))?)
}

/// Scalar loss values of one step, in nats.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossReport {
    pub sup: f64,
    pub dt_d: f64,
    pub dt_e: f64,
    pub st_src: f64,
    pub st_sup: f64,
    pub st_unsup: f64,
    pub total: f64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::param(shape, (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap()
    }

    fn ref_ce(logits: &[f64], k: usize, labels: &[usize]) -> f64 {
        let n = labels.len();
        (0..n)
            .map(|i| {
                let row = &logits[i * k..(i + 1) * k];
                let lse = row.iter().map(|v| v.exp()).sum::<f64>().ln();
                lse - row[labels[i]]
            })
            .sum::<f64>()
            / n as f64
    }

    #[test]
    fn ce_identities() {
        let ln5 = 5f64.ln();
        assert!((supervised_ce(&t(&[2, 5], &[0.3; 10]), &[1, 4]).unwrap().item() - ln5).abs() <= 1e-12);
        let mut v = vec![0.0; 5];
        v[2] = 50.0;
        assert!(supervised_ce(&t(&[1, 5], &v), &[2]).unwrap().item() <= 1e-6);
        assert!(supervised_ce(&t(&[1, 5], &v), &[5]).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(&mut rng, &[6, 4]);
        let labels = [0, 3, 2, 1, 1, 0];
        assert!((supervised_ce(&x, &labels).unwrap().item() - ref_ce(&x.to_vec(), 4, &labels)).abs() <= 1e-12);
    }

    #[test]
    fn domain_loss_identities() {
        let z = t(&[3], &[0.0; 3]);
        let ln2 = 2f64.ln();
        let d = domain_loss_d(&z, &z).unwrap().item();
        let e = domain_loss_e(&z, &z).unwrap().item();
        assert!((d - 2.0 * ln2).abs() <= 1e-12);
        assert!((d + e - 4.0 * ln2).abs() <= 1e-12);
        assert!(domain_loss_d(&t(&[2], &[50.0; 2]), &t(&[2], &[-50.0; 2])).unwrap().item() <= 1e-6);
        let (s, g) = ([0.3, -1.7], [2.2, -0.4, 0.9]);
        let want = -(s.iter().map(|&x: &f64| (1.0 / (1.0 + (-x).exp())).ln()).sum::<f64>() / 2.0)
            - g.iter().map(|&x: &f64| (1.0 - 1.0 / (1.0 + (-x).exp())).ln()).sum::<f64>() / 3.0;
        assert!((domain_loss_d(&t(&[2], &s), &t(&[3], &g)).unwrap().item() - want).abs() <= 1e-12);
    }

    #[test]
    fn similarity_basics() {
        let eye = t(&[3, 3], &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        let q = t(&[1, 3], &[0.0, 1.0, 0.0]);
        assert_eq!(similarity(&q, &eye).unwrap().to_vec(), vec![0.0, 1.0, 0.0]);
        let s = t(&[2, 2], &[3.0, 4.0, 0.0, 2.0]);
        let q = t(&[1, 2], &[2.0, 1.0]);
        let q2 = t(&[1, 2], &[4.0, 2.0]);
        let a = similarity(&q, &s).unwrap().to_vec();
        let b = similarity(&q2, &s).unwrap().to_vec();
        assert!((a[0] - 2.0).abs() < 1e-12 && (a[1] - 1.0).abs() < 1e-12);
        assert_eq!(b, a.iter().map(|v| 2.0 * v).collect::<Vec<_>>());
        assert!(similarity(&q, &t(&[1, 2], &[0.0, 0.0])).is_err());
    }

    #[test]
    fn entropy_transfer_cases() {
        let support = t(&[5, 3], &(0..15).map(|v| (v as f64 * 0.7).sin() + 0.1).collect::<Vec<_>>());
        let zero = t(&[4, 3], &[0.0; 12]);
        assert!((entropy_transfer(&zero, &support, 2.0).unwrap().item() - 5f64.ln()).abs() <= 1e-12);
        let eye = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        assert!(entropy_transfer(&t(&[1, 2], &[1.0, 0.0]), &eye, 0.01).unwrap().item() <= 0.01);
        assert!(entropy_transfer(&zero, &support, 0.0).is_err());
        assert_eq!(entropy_transfer(&Tensor::<f64>::zeros(&[0, 3]), &support, 1.0).unwrap().item(), 0.0);
    }

    #[test]
    fn semantic_total_reduces_without_unlabeled() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let src = random(&mut rng, &[5, 4]);
        let lab = random(&mut rng, &[10, 4]);
        let labels: Vec<usize> = (0..10).map(|i| i % 5).collect();
        let terms = semantic_total(&src, &lab, &labels, &Tensor::zeros(&[0, 4]), 5, SemanticConfig::default()).unwrap();
        let protos = prototypes(&lab, &labels, 5).unwrap();
        assert_eq!(terms.total.item(), metric_ce(&lab, &labels, &protos, 1.0).unwrap().item());
    }

    #[test]
    fn objective_weights() {
        let (a, b, c) = (t(&[], &[1.5]), t(&[], &[0.7]), t(&[], &[2.0]));
        assert_eq!(total_objective(&a, &b, &c, 0.0, 0.0).unwrap().item(), 1.5);
        assert!((total_objective(&a, &b, &c, 0.1, 0.1).unwrap().item() - (1.5 + 0.07 + 0.2)).abs() <= 1e-12);
        assert!(total_objective(&a, &b, &c, -0.1, 0.0).is_err());
    }
}
