//! Central-difference verification of the full episode gradient.
//!
//! The encoder is piecewise smooth: ReLU and max pooling switch branches on a
//! measure-zero set. A perturbation of `±h` that crosses such a switch makes
//! the difference quotient meaningless, so every probe records the network's
//! branch pattern at `θ−h`, `θ` and `θ+h` and only scores elements whose
//! pattern is constant on that interval. Elements that do straddle a switch
//! are counted and re-probed with a much smaller step.
//!
//! Some gradients are exactly zero: prototype logits depend only on
//! differences of embeddings, so a last-layer β whose channel stays active
//! on the whole batch cannot change the loss. A relative error between two
//! round-off values is meaningless, so elements whose analytic and numeric
//! values both sit below the difference quotient's resolution are scored by
//! absolute error instead.

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::data::Episode;
use crate::encoder::encode_traced;
use crate::error::Result;
use crate::normalization::BnMode;
use crate::rng::{rng_for, stream};
use crate::tensor::max_pool2_forward;

use super::meta::{episode_gradients, trainable_params};
use super::Model;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeGradCheck {
    pub h: f64,
    /// Elements probed at step `h` on a smooth interval.
    pub checked: usize,
    /// Worst `|a − n| / (|a| + |n| + 1e-12)` over those elements.
    pub max_rel_error: f64,
    pub worst: String,
    /// Resolution of the difference quotient, `ε_mach · max(|L|, 1) / h`.
    pub resolution: f64,
    /// Elements with `|a| + |n| < 1000 · resolution`, excluded from the
    /// relative error.
    pub unresolved: usize,
    /// Worst `|a − n|` over the unresolved elements.
    pub unresolved_abs_error: f64,
    /// Elements whose `±h` interval crossed a ReLU or pooling switch.
    pub straddling: usize,
    /// Worst relative error of the straddling elements re-probed at `h / 100`
    /// (0 if none, or if the smaller interval still straddles).
    pub straddling_rel_error: f64,
}

/// ReLU signs and max-pool winners of every layer on both forward passes.
fn branch_pattern(model: &Model, episode: &Episode, routed: usize) -> Result<Vec<usize>> {
    let mut out = Vec::new();
    let mut record = |post_bn: &[crate::tensor::Tensor]| {
        for z in post_bn {
            let relu: Vec<f64> = z.data().iter().map(|v| v.max(0.0)).collect();
            out.extend(z.data().iter().map(|&v| (v > 0.0) as usize));
            out.extend(max_pool2_forward(&relu, z.shape()).2);
        }
    };
    let (_, pooled) = encode_traced(
        &episode.pooled_images(),
        &model.encoder,
        &model.bank.workers[routed],
        BnMode::Train,
    )?;
    record(&pooled.post_bn);
    if model.num_domains() > 1 {
        let (emb, support) = encode_traced(
            &episode.support_images,
            &model.encoder,
            model.bank.global(),
            BnMode::Eval,
        )?;
        record(&support.post_bn);
        let (n, d) = emb.dims2()?;
        let c = &model.coordinator;
        let hidden = c.b1.len();
        for j in 0..hidden {
            let mut a = c.b1.data()[j];
            for t in 0..d {
                let mean = (0..n).map(|i| emb.data()[i * d + t]).sum::<f64>() / n as f64;
                a += mean * c.w1.data()[t * hidden + j];
            }
            out.push((a > 0.0) as usize);
        }
    }
    Ok(out)
}

/// Probes `per_tensor` random elements of every trainable tensor.
pub fn episode_grad_check(
    model: &Model,
    episode: &Episode,
    label: usize,
    h: f64,
    per_tensor: usize,
    seed: u64,
) -> Result<EpisodeGradCheck> {
    let (v_r, coord_w) = (1.0, 1.0);
    let grads = episode_gradients(model, episode, label, v_r, coord_w)?;
    let analytic = grads.flat();
    let routed = grads.routed;
    let base_pattern = branch_pattern(model, episode, routed)?;

    let mut probe_model = model.clone();
    let names: Vec<String> = trainable_params(&mut probe_model, routed)
        .into_iter()
        .map(|(n, _)| n)
        .collect();
    // Loss and branch pattern with element `i` of tensor `t` shifted by `delta`.
    let mut shifted = |t: usize, i: usize, delta: f64| -> Result<(f64, bool)> {
        let orig = {
            let mut params = trainable_params(&mut probe_model, routed);
            let orig = params[t].1[i];
            params[t].1[i] = orig + delta;
            orig
        };
        let loss =
            episode_gradients(&probe_model, episode, label, v_r, coord_w).map(|g| g.metrics.loss);
        let same = branch_pattern(&probe_model, episode, routed).map(|p| p == base_pattern);
        trainable_params(&mut probe_model, routed)[t].1[i] = orig;
        Ok((loss?, same?))
    };

    let resolution = f64::EPSILON * grads.metrics.loss.abs().max(1.0) / h;
    let mut report = EpisodeGradCheck {
        h,
        checked: 0,
        resolution,
        unresolved: 0,
        unresolved_abs_error: 0.0,
        max_rel_error: 0.0,
        worst: String::new(),
        straddling: 0,
        straddling_rel_error: 0.0,
    };
    let mut rng = rng_for(seed, stream::GRADCHECK, 0);
    for (t, grad) in analytic.iter().enumerate() {
        for i in sample(&mut rng, grad.len(), per_tensor.min(grad.len())) {
            let rel = |step: f64, plus: f64, minus: f64| {
                let numeric = (plus - minus) / (2.0 * step);
                (
                    numeric,
                    (grad[i] - numeric).abs() / (grad[i].abs() + numeric.abs() + 1e-12),
                )
            };
            let (plus, smooth_plus) = shifted(t, i, h)?;
            let (minus, smooth_minus) = shifted(t, i, -h)?;
            if smooth_plus && smooth_minus {
                let (numeric, err) = rel(h, plus, minus);
                if grad[i].abs() + numeric.abs() < 1e3 * resolution {
                    report.unresolved += 1;
                    report.unresolved_abs_error =
                        report.unresolved_abs_error.max((grad[i] - numeric).abs());
                    continue;
                }
                report.checked += 1;
                if err > report.max_rel_error {
                    report.max_rel_error = err;
                    report.worst = format!(
                        "{}[{i}]: analytic {:e}, numeric {numeric:e}",
                        names[t], grad[i]
                    );
                }
                continue;
            }
            report.straddling += 1;
            let small = h / 100.0;
            let (plus, smooth_plus) = shifted(t, i, small)?;
            let (minus, smooth_minus) = shifted(t, i, -small)?;
            if smooth_plus && smooth_minus {
                report.straddling_rel_error =
                    report.straddling_rel_error.max(rel(small, plus, minus).1);
            }
        }
    }
    Ok(report)
}
