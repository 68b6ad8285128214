//! Normalization geometry of a trained bank: sphere residuals, per-domain
//! statistics under global vs matched workers, and the cost of swapping
//! running statistics between domains.

use log::info;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, EpisodeShape, Protocol, Split};
use crate::encoder::encode_traced;
use crate::error::{Result, TanoError};
use crate::normalization::{
    channel_values, compute_batch_stats, sphere_residual, BnMode, GroupWorker,
};
use crate::tensor::Tensor;
use crate::training::Checkpoint;

use super::{infer_episode, test_episode, EvalSettings, InferenceMode};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalysisConfig {
    /// Images per domain for the statistics and residuals.
    pub images_per_domain: usize,
    /// Episodes per ordered domain pair in the swap experiment.
    pub episodes: usize,
    pub shape: EpisodeShape,
    pub seed: u64,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        AnalysisConfig {
            images_per_domain: 64,
            episodes: 50,
            shape: EpisodeShape::new(5, 1, 15),
            seed: 0,
        }
    }
}

/// Worst sphere residuals of one worker's layer over all channels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerResidual {
    pub worker: usize,
    pub layer: usize,
    /// `max_c |‖(ẑ−β)/γ‖² − m·σ²/(σ²+ε)| / m`.
    pub relative_identity: f64,
    /// `max_c |‖(ẑ−β)/γ‖² − m| / m`.
    pub radius_gap: f64,
}

/// Per-domain channel statistics of one layer's BN input under one routing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerDomainStats {
    pub layer: usize,
    /// `pre_mean[d][c]`, `pre_var[d][c]` of the conv output entering BN.
    pub pre_mean: Vec<Vec<f64>>,
    pub pre_var: Vec<Vec<f64>>,
    /// Channel means after normalization with the routed worker's running
    /// statistics (before γ, β): `(mean − μ_run)/√(σ²_run + ε)`.
    pub normalized_mean: Vec<Vec<f64>>,
    /// Channel-averaged spread (max − min over domains) of `normalized_mean`.
    pub cross_domain_gap: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SwapOutcome {
    /// Domain whose running statistics were swapped in.
    pub source: usize,
    /// Domain the episodes come from.
    pub target: usize,
    pub matched: f64,
    pub swapped: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub domains: Vec<usize>,
    /// Worker matched to each domain in `domains`.
    pub matched_workers: Vec<usize>,
    pub residuals: Vec<LayerResidual>,
    pub global_stats: Vec<LayerDomainStats>,
    pub matched_stats: Vec<LayerDomainStats>,
    pub swaps: Vec<SwapOutcome>,
}

impl AnalysisReport {
    pub fn max_relative_identity(&self) -> f64 {
        self.residuals
            .iter()
            .map(|r| r.relative_identity)
            .fold(0.0, f64::max)
    }

    /// Mean accuracy drop (matched − swapped) over all swapped pairs.
    pub fn mean_swap_drop(&self) -> f64 {
        if self.swaps.is_empty() {
            return 0.0;
        }
        self.swaps
            .iter()
            .map(|s| s.matched - s.swapped)
            .sum::<f64>()
            / self.swaps.len() as f64
    }
}

fn domain_images(dataset: &Dataset, domain: usize, n: usize) -> Result<Tensor> {
    let classes = dataset.manifest.classes_in(Split::Novel);
    let mut items = Vec::with_capacity(n);
    for i in 0..n {
        let c = classes[i % classes.len()];
        let idx = i / classes.len();
        if idx >= dataset.count(domain, c) {
            return Err(TanoError::invalid(format!(
                "domain {domain} has too few images for the analysis"
            )));
        }
        items.push((domain, c, idx));
    }
    Ok(dataset.stack(&items))
}

fn residuals_for(
    worker: &GroupWorker,
    trace: &crate::encoder::EncodeTrace,
) -> Result<Vec<LayerResidual>> {
    let mut out = Vec::new();
    for (j, layer) in worker.layers.iter().enumerate() {
        let stats = compute_batch_stats(&trace.pre_bn[j])?;
        let (mut ident, mut gap) = (0.0f64, 0.0f64);
        for c in 0..layer.channels() {
            let z_hat = channel_values(&trace.post_bn[j], c)?;
            let r = sphere_residual(
                &z_hat,
                layer.gamma[c],
                layer.beta[c],
                stats.var[c],
                layer.epsilon,
            )?;
            ident = ident.max(r.identity / r.m as f64);
            gap = gap.max(r.radius_gap);
        }
        out.push(LayerResidual {
            worker: worker.index,
            layer: j,
            relative_identity: ident,
            radius_gap: gap,
        });
    }
    Ok(out)
}

/// Channel statistics of every layer for each domain, each domain encoded
/// (eval mode) with `worker_of(d)`.
fn stats_under(
    ckpt: &Checkpoint,
    images: &[Tensor],
    workers: &[&GroupWorker],
) -> Result<Vec<LayerDomainStats>> {
    let traces = images
        .iter()
        .zip(workers)
        .map(|(x, w)| encode_traced(x, &ckpt.model.encoder, w, BnMode::Eval).map(|(_, t)| t))
        .collect::<Result<Vec<_>>>()?;
    let n_layers = traces[0].pre_bn.len();
    let mut out = Vec::with_capacity(n_layers);
    for j in 0..n_layers {
        let mut pre_mean = Vec::new();
        let mut pre_var = Vec::new();
        let mut normalized_mean = Vec::new();
        for (t, w) in traces.iter().zip(workers) {
            let s = compute_batch_stats(&t.pre_bn[j])?;
            let l = &w.layers[j];
            normalized_mean.push(
                (0..s.mean.len())
                    .map(|c| {
                        (s.mean[c] - l.running_mean[c]) / (l.running_var[c] + l.epsilon).sqrt()
                    })
                    .collect::<Vec<f64>>(),
            );
            pre_mean.push(s.mean);
            pre_var.push(s.var);
        }
        let channels = normalized_mean[0].len();
        let gap = (0..channels)
            .map(|c| {
                let vals = normalized_mean.iter().map(|v| v[c]);
                vals.clone().fold(f64::NEG_INFINITY, f64::max) - vals.fold(f64::INFINITY, f64::min)
            })
            .sum::<f64>()
            / channels as f64;
        out.push(LayerDomainStats {
            layer: j,
            pre_mean,
            pre_var,
            normalized_mean,
            cross_domain_gap: gap,
        });
    }
    Ok(out)
}

/// Geometry report for a meta-trained checkpoint over its training domains.
pub fn emit_analysis_report(
    ckpt: &Checkpoint,
    dataset: &Dataset,
    config: &AnalysisConfig,
) -> Result<AnalysisReport> {
    let state = ckpt.state().ok_or_else(|| {
        TanoError::invalid("analysis needs a meta-trained checkpoint with training state")
    })?;
    let model = &ckpt.model;
    let domains = state.train_domains.clone();
    let matched_workers = domains
        .iter()
        .map(|&d| {
            state
                .worker_for_domain(d)
                .expect("training domain has a worker")
        })
        .collect::<Vec<_>>();
    let images = domains
        .iter()
        .map(|&d| domain_images(dataset, d, config.images_per_domain))
        .collect::<Result<Vec<_>>>()?;

    let mut residuals = Vec::new();
    for (x, &r) in images.iter().zip(&matched_workers) {
        let w = &model.bank.workers[r];
        let (_, trace) = encode_traced(x, &model.encoder, w, BnMode::Train)?;
        residuals.extend(residuals_for(w, &trace)?);
    }
    let pooled = Tensor::concat_rows(&images.iter().collect::<Vec<_>>())?;
    let (_, trace) = encode_traced(&pooled, &model.encoder, model.bank.global(), BnMode::Train)?;
    residuals.extend(residuals_for(model.bank.global(), &trace)?);

    let global = vec![model.bank.global(); domains.len()];
    let matched: Vec<&GroupWorker> = matched_workers
        .iter()
        .map(|&r| &model.bank.workers[r])
        .collect();
    let global_stats = stats_under(ckpt, &images, &global)?;
    let matched_stats = stats_under(ckpt, &images, &matched)?;

    let mut swaps = Vec::new();
    for (ti, &target) in domains.iter().enumerate() {
        let settings = EvalSettings {
            shape: config.shape,
            ..EvalSettings::new(
                Protocol::Standard { domain: target },
                config.episodes,
                config.seed,
            )
        };
        let episodes = (0..config.episodes)
            .map(|i| test_episode(dataset, &settings, i))
            .collect::<Result<Vec<_>>>()?;
        let own = matched_workers[ti];
        let matched_acc = mean_accuracy(model, &episodes, InferenceMode::Forced(own), None)?;
        for (si, &source) in domains.iter().enumerate() {
            let other = matched_workers[si];
            if source == target || other == own {
                continue;
            }
            let mut swapped = model.bank.workers[own].clone();
            for (l, src) in swapped
                .layers
                .iter_mut()
                .zip(&model.bank.workers[other].layers)
            {
                l.running_mean = src.running_mean.clone();
                l.running_var = src.running_var.clone();
            }
            let swapped_acc =
                mean_accuracy(model, &episodes, InferenceMode::Forced(own), Some(&swapped))?;
            swaps.push(SwapOutcome {
                source,
                target,
                matched: matched_acc,
                swapped: swapped_acc,
            });
        }
    }
    let report = AnalysisReport {
        domains,
        matched_workers,
        residuals,
        global_stats,
        matched_stats,
        swaps,
    };
    info!(
        "analysis: max relative sphere residual {:.2e}, mean swap drop {:.2} points",
        report.max_relative_identity(),
        report.mean_swap_drop()
    );
    Ok(report)
}

fn mean_accuracy(
    model: &crate::training::Model,
    episodes: &[crate::data::Episode],
    mode: InferenceMode,
    worker: Option<&GroupWorker>,
) -> Result<f64> {
    let mut total = 0.0;
    for ep in episodes {
        total += match worker {
            Some(w) => super::accuracy_with_worker(model, w, ep)?,
            None => infer_episode(model, ep, mode)?.accuracy,
        };
    }
    Ok(total / episodes.len() as f64)
}
