//! Prototypical-network head: class prototypes and squared-Euclidean logits.

use crate::autodiff::{Tape, Target, Var};
use crate::coordinator::{coordinator_loss, coordinator_loss_on_tape, DomainWeights};
use crate::error::{Result, TanoError};
use crate::tensor::Tensor;

/// `N_w × (N_w·N_s)` matrix whose row `c` averages the support rows labeled `c`.
fn averaging_matrix(labels: &[usize], n_way: usize, n_shot: usize) -> Result<Tensor> {
    if labels.len() != n_way * n_shot {
        return Err(TanoError::invalid(format!(
            "{} support labels for a {n_way}-way {n_shot}-shot set",
            labels.len()
        )));
    }
    let mut counts = vec![0usize; n_way];
    for &l in labels {
        if l >= n_way {
            return Err(TanoError::invalid(format!(
                "support label {l} outside 0..{n_way}"
            )));
        }
        counts[l] += 1;
    }
    if let Some(c) = counts.iter().position(|&k| k != n_shot) {
        return Err(TanoError::invalid(format!(
            "class {c} has {} support examples, expected {n_shot}",
            counts[c]
        )));
    }
    let n = labels.len();
    let mut a = vec![0.0; n_way * n];
    for (i, &l) in labels.iter().enumerate() {
        a[l * n + i] = 1.0 / n_shot as f64;
    }
    Tensor::new([n_way, n], a)
}

pub fn compute_prototypes(
    support: &Tensor,
    labels: &[usize],
    n_way: usize,
    n_shot: usize,
) -> Result<Tensor> {
    let (n, d) = support.dims2()?;
    let avg = averaging_matrix(labels, n_way, n_shot)?;
    let mut out = vec![0.0; n_way * d];
    for (i, &l) in labels.iter().enumerate().take(n) {
        for t in 0..d {
            out[l * d + t] += support.data()[i * d + t];
        }
    }
    out.iter_mut().for_each(|v| *v /= n_shot as f64);
    debug_assert_eq!(avg.shape()[1], n);
    Tensor::new([n_way, d], out)
}

pub fn prototypes_on_tape(
    tape: &mut Tape,
    support: Var,
    labels: &[usize],
    n_way: usize,
    n_shot: usize,
) -> Result<Var> {
    let avg = averaging_matrix(labels, n_way, n_shot)?;
    let a = tape.constant(avg);
    tape.matmul(a, support)
}

/// Negative squared distances `B × N_w`.
pub fn classify_query(queries: &Tensor, prototypes: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::no_grad();
    let q = tape.constant(queries.clone());
    let p = tape.constant(prototypes.clone());
    let l = tape.neg_sq_dist(q, p)?;
    Ok(tape.value(l).clone())
}

/// Row-wise argmax (lowest index on ties).
pub fn predictions(logits: &Tensor) -> Result<Vec<usize>> {
    let (b, _) = logits.dims2()?;
    Ok((0..b)
        .map(|i| crate::coordinator::argmax(logits.row(i)))
        .collect())
}

/// Percentage of correct predictions.
pub fn accuracy(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    let preds = predictions(logits)?;
    if preds.len() != labels.len() || preds.is_empty() {
        return Err(TanoError::dim("prediction/label count mismatch"));
    }
    let hits = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(100.0 * hits as f64 / labels.len() as f64)
}

/// `v_r · (query cross-entropy + coord_weight · coordinator cross-entropy)`.
pub fn episode_loss_on_tape(
    tape: &mut Tape,
    query_logits: Var,
    query_labels: &[usize],
    coordinator_logits: Option<Var>,
    domain_label: usize,
    v_r: f64,
    coord_weight: f64,
) -> Result<Var> {
    if !(v_r > 0.0) {
        return Err(TanoError::invalid(format!(
            "domain loss weight v_r = {v_r} must be > 0"
        )));
    }
    let mut loss = tape.cross_entropy(query_logits, Target::Classes(query_labels))?;
    if let Some(cl) = coordinator_logits {
        if let Some(c) = coordinator_loss_on_tape(tape, cl, domain_label)? {
            let c = tape.scale(c, coord_weight);
            loss = tape.add(loss, c)?;
        }
    }
    Ok(tape.scale(loss, v_r))
}

/// Plain-value form of the episode objective.
pub fn episode_loss(
    query_logits: &Tensor,
    query_labels: &[usize],
    w_hat: &DomainWeights,
    domain_label: usize,
    v_r: f64,
) -> Result<f64> {
    if !(v_r > 0.0) {
        return Err(TanoError::invalid(format!(
            "domain loss weight v_r = {v_r} must be > 0"
        )));
    }
    let mut tape = Tape::no_grad();
    let l = tape.constant(query_logits.clone());
    let ce = tape.cross_entropy(l, Target::Classes(query_labels))?;
    let mut w = vec![0.0; w_hat.len()];
    *w.get_mut(domain_label)
        .ok_or_else(|| TanoError::invalid(format!("domain label {domain_label} out of range")))? =
        1.0;
    Ok(v_r * (tape.value(ce).item()? + coordinator_loss(w_hat, &w)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn prototype_examples() {
        let s = m(&[&[0.0, 0.0], &[5.0, 1.0], &[2.0, 2.0], &[1.0, 1.0]]);
        let p = compute_prototypes(&s, &[0, 1, 0, 1], 2, 2).unwrap();
        assert_eq!(p.data(), &[1.0, 1.0, 3.0, 1.0]);
        let one = m(&[&[1.0, 2.0], &[3.0, 4.0]]);
        assert_eq!(compute_prototypes(&one, &[0, 1], 2, 1).unwrap(), one);
        let swapped = m(&[&[2.0, 2.0], &[1.0, 1.0], &[0.0, 0.0], &[5.0, 1.0]]);
        assert_eq!(
            compute_prototypes(&swapped, &[0, 1, 0, 1], 2, 2).unwrap(),
            p
        );
        let err = compute_prototypes(&s, &[0, 0, 0, 1], 2, 2)
            .unwrap_err()
            .to_string();
        assert!(err.contains("class 0"), "{err}");
    }

    #[test]
    fn tape_prototypes_match_plain() {
        let s = m(&[&[0.5, -1.0], &[2.0, 0.0], &[1.5, 3.0], &[-2.0, 1.0]]);
        let mut tape = Tape::no_grad();
        let v = tape.constant(s.clone());
        let p = prototypes_on_tape(&mut tape, v, &[1, 0, 1, 0], 2, 2).unwrap();
        assert_eq!(
            tape.value(p),
            &compute_prototypes(&s, &[1, 0, 1, 0], 2, 2).unwrap()
        );
    }

    #[test]
    fn classify_examples() {
        let protos = m(&[&[0.0, 0.0], &[3.0, 4.0]]);
        let logits = classify_query(&m(&[&[0.0, 0.0]]), &protos).unwrap();
        assert_eq!(logits.data(), &[0.0, -25.0]);
        let three = m(&[&[1.0, 0.0], &[-1.0, 0.0], &[0.0, 1.0]]);
        let at2 = classify_query(&m(&[&[0.0, 1.0]]), &three).unwrap();
        assert_eq!(predictions(&at2).unwrap(), vec![2]);
        assert_eq!(at2.data()[2], 0.0);
        let centre = classify_query(&m(&[&[0.0, 0.0]]), &three).unwrap();
        assert!(centre.data().iter().all(|&v| v == -1.0));
    }

    #[test]
    fn loss_examples() {
        let uniform = Tensor::zeros([10, 5]);
        let labels: Vec<usize> = (0..10).map(|i| i % 5).collect();
        let w = DomainWeights::new(vec![0.25; 4]).unwrap();
        let l = episode_loss(&uniform, &labels, &w, 2, 1.0).unwrap();
        assert!((l - (5f64.ln() + 4f64.ln())).abs() < 1e-12);
        assert!((l - 2.996).abs() < 1e-3);
        let doubled = episode_loss(&uniform, &labels, &w, 2, 2.0).unwrap();
        assert_eq!(doubled, 2.0 * l);
        assert!(episode_loss(&uniform, &labels, &w, 2, 0.0).is_err());

        let mut sharp = vec![-1e3; 10];
        sharp[0] = 0.0;
        sharp[6] = 0.0;
        let perfect = Tensor::new([2, 5], sharp).unwrap();
        let one_hot = DomainWeights::one_hot(1, 4).unwrap();
        assert!(episode_loss(&perfect, &[0, 1], &one_hot, 1, 1.0).unwrap() < 1e-12);
    }
}
