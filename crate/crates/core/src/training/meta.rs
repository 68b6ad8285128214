//! Episodic meta-training of encoder, coordinator and worker bank.

use std::path::PathBuf;

use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::coordinator::{argmax, coordinator_logits, CoordinatorVars};
use crate::data::kmeans::{kmeans, matching_accuracy, purity, KMeansConfig};
use crate::data::{sample_episode, Dataset, Episode, Phase, Split};
use crate::encoder::{encode, encode_on_tape, kernel_vars, WorkerVars};
use crate::error::{Result, TanoError};
use crate::evaluation::{infer_episode, InferenceMode};
use crate::metric::{episode_loss_on_tape, prototypes_on_tape};
use crate::normalization::BnMode;
use crate::rng::{rng_for, stream};
use crate::tensor::Tensor;

use super::checkpoint::Checkpoint;
use super::{cosine_lr, sgd_tensor, sgd_vec, Model, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub loss: f64,
    /// Train-mode query accuracy on the step's own episode, in percent.
    pub query_accuracy: f64,
    /// Whether the coordinator's argmax agreed with the routing label
    /// (`None` with a single worker).
    pub coordinator_correct: Option<bool>,
}

/// One SGD step on `episode`, routed to worker `label` (teacher forcing).
///
/// Pass (a) embeds the support set with the global worker, using its stored
/// statistics, and feeds the coordinator. Pass (b) embeds support and query
/// with the label worker in train mode. The step updates the conv kernels,
/// the coordinator, and γ/β of the label and global workers. Only the label
/// worker's running statistics move.
pub fn meta_train_step(
    model: &mut Model,
    episode: &Episode,
    label: usize,
    lr: f64,
    v_r: f64,
    coordinator_weight: f64,
) -> Result<StepMetrics> {
    let g = episode_gradients(model, episode, label, v_r, coordinator_weight)?;
    for (k, gk) in model.encoder.kernels.iter_mut().zip(&g.kernels) {
        sgd_tensor(k, gk, lr);
    }
    if let Some(gc) = &g.coordinator {
        for (t, gt) in model.coordinator.tensors_mut().into_iter().zip(gc) {
            sgd_tensor(t, gt, lr);
        }
    }
    let global = model.bank.global_index();
    let mut update_affine = |worker: usize, grads: &[(Vec<f64>, Vec<f64>)]| {
        for (layer, (gg, gb)) in model.bank.workers[worker].layers.iter_mut().zip(grads) {
            sgd_vec(&mut layer.gamma, &Tensor::vector(gg.clone()), lr);
            sgd_vec(&mut layer.beta, &Tensor::vector(gb.clone()), lr);
        }
    };
    update_affine(g.routed, &g.routed_affine);
    if let Some(ga) = &g.global_affine {
        update_affine(global, ga);
    }
    for (layer, s) in model.bank.workers[g.routed].layers.iter_mut().zip(&g.stats) {
        layer.update_running_stats(s)?;
    }
    if model.num_domains() == 1 {
        let layers = model.bank.global().layers.clone();
        model.bank.workers[0].layers = layers;
    }
    Ok(g.metrics)
}

/// Loss, metrics and parameter gradients of one episode; the model is not changed.
#[derive(Clone, Debug)]
pub struct EpisodeGradients {
    pub metrics: StepMetrics,
    /// Worker in the loss path: `label`, or the global worker when `R = 1`.
    pub routed: usize,
    pub kernels: Vec<Tensor>,
    /// `None` with a single worker (no coordinator pass).
    pub coordinator: Option<[Tensor; 4]>,
    /// `(∂γ, ∂β)` per layer of the routed worker.
    pub routed_affine: Vec<(Vec<f64>, Vec<f64>)>,
    pub global_affine: Option<Vec<(Vec<f64>, Vec<f64>)>>,
    /// Train-mode batch statistics of the routed worker.
    pub stats: Vec<crate::normalization::BatchStats>,
}

impl EpisodeGradients {
    /// Gradients in the order of [`trainable_params`].
    pub fn flat(&self) -> Vec<Vec<f64>> {
        let mut out: Vec<Vec<f64>> = self.kernels.iter().map(|k| k.data().to_vec()).collect();
        if let Some(c) = &self.coordinator {
            out.extend(c.iter().map(|t| t.data().to_vec()));
        }
        for affine in std::iter::once(&self.routed_affine).chain(self.global_affine.as_ref()) {
            for (gg, gb) in affine {
                out.push(gg.clone());
                out.push(gb.clone());
            }
        }
        out
    }
}

/// Every parameter a step on `routed` trains, as `(name, values)`, in the
/// order of [`EpisodeGradients::flat`].
pub fn trainable_params(model: &mut Model, routed: usize) -> Vec<(String, &mut [f64])> {
    let r = model.num_domains();
    let g = model.bank.global_index();
    let mut out: Vec<(String, &mut [f64])> = Vec::new();
    for (j, k) in model.encoder.kernels.iter_mut().enumerate() {
        out.push((format!("encoder.conv{j}"), k.data_mut()));
    }
    if r > 1 {
        let names = ["w1", "b1", "w2", "b2"];
        for (n, t) in names.iter().zip(model.coordinator.tensors_mut()) {
            out.push((format!("coordinator.{n}"), t.data_mut()));
        }
    }
    let (workers, global) = model.bank.workers.split_at_mut(g);
    if routed != g {
        push_affine(&mut out, routed, &mut workers[routed].layers);
    }
    push_affine(&mut out, g, &mut global[0].layers);
    out
}

fn push_affine<'a>(
    out: &mut Vec<(String, &'a mut [f64])>,
    w: usize,
    layers: &'a mut [crate::normalization::BnLayerParams],
) {
    for (j, l) in layers.iter_mut().enumerate() {
        out.push((format!("worker{w}.bn{j}.gamma"), l.gamma.as_mut_slice()));
        out.push((format!("worker{w}.bn{j}.beta"), l.beta.as_mut_slice()));
    }
}

pub fn episode_gradients(
    model: &Model,
    episode: &Episode,
    label: usize,
    v_r: f64,
    coordinator_weight: f64,
) -> Result<EpisodeGradients> {
    let r = model.num_domains();
    if label >= r {
        return Err(TanoError::invalid(format!(
            "routing label {label} outside {r} workers"
        )));
    }
    let g = model.bank.global_index();
    // With one worker the label worker is the global worker itself.
    let routed = if r == 1 { g } else { label };
    let shape = episode.shape;

    let mut tape = Tape::new();
    let kernels = kernel_vars(&mut tape, &model.encoder, true);
    let routed_vars = WorkerVars::leaves(&mut tape, &model.bank.workers[routed]);
    let mut global_vars = None;
    let mut coord = None;
    if r > 1 {
        let support = tape.constant(episode.support_images.clone());
        let gv = WorkerVars::leaves(&mut tape, model.bank.global());
        let (emb, _) = encode_on_tape(
            &mut tape,
            support,
            &kernels,
            model.bank.global(),
            &gv,
            BnMode::Eval,
            None,
        )?;
        let cv = CoordinatorVars::record(&mut tape, &model.coordinator, true);
        let logits = coordinator_logits(&mut tape, emb, &cv)?;
        global_vars = Some(gv);
        coord = Some((cv, logits));
    }

    let pooled = tape.constant(episode.pooled_images());
    let (emb, stats) = encode_on_tape(
        &mut tape,
        pooled,
        &kernels,
        &model.bank.workers[routed],
        &routed_vars,
        BnMode::Train,
        None,
    )?;
    let n_support = shape.support_len();
    let support_emb = tape.rows(emb, 0, n_support)?;
    let query_emb = tape.rows(emb, n_support, n_support + shape.query_len())?;
    let protos = prototypes_on_tape(
        &mut tape,
        support_emb,
        &episode.support_labels,
        shape.n_way,
        shape.n_shot,
    )?;
    let logits = tape.neg_sq_dist(query_emb, protos)?;
    let loss = episode_loss_on_tape(
        &mut tape,
        logits,
        &episode.query_labels,
        coord.map(|(_, l)| l),
        label,
        v_r,
        coordinator_weight,
    )?;
    let loss_value = tape.value(loss).item()?;
    if !loss_value.is_finite() {
        return Err(TanoError::Numeric(format!(
            "meta-training loss is {loss_value} on episode {}",
            replay_descriptor(episode)
        )));
    }
    let query_accuracy = crate::metric::accuracy(tape.value(logits), &episode.query_labels)?;
    let coordinator_correct = coord.map(|(_, l)| argmax(tape.value(l).data()) == label);

    let grads = tape.backward(loss)?;
    if !grads.all_finite() {
        return Err(TanoError::Numeric(format!(
            "non-finite gradient on episode {}",
            replay_descriptor(episode)
        )));
    }
    let kernel_grads = model
        .encoder
        .kernels
        .iter()
        .zip(&kernels)
        .map(|(k, v)| grads.get_or_zeros(*v, k))
        .collect();
    let coordinator = coord.map(|(cv, _)| {
        let ts = model.coordinator.tensors();
        let vs = cv.as_array();
        [0, 1, 2, 3].map(|i| grads.get_or_zeros(vs[i], ts[i]))
    });
    let affine = |worker: usize, vars: &WorkerVars| {
        model.bank.workers[worker]
            .layers
            .iter()
            .enumerate()
            .map(|(j, layer)| {
                let like = Tensor::zeros([layer.channels()]);
                (
                    grads.get_or_zeros(vars.gammas[j], &like).into_data(),
                    grads.get_or_zeros(vars.betas[j], &like).into_data(),
                )
            })
            .collect::<Vec<_>>()
    };
    Ok(EpisodeGradients {
        metrics: StepMetrics {
            loss: loss_value,
            query_accuracy,
            coordinator_correct,
        },
        routed,
        kernels: kernel_grads,
        coordinator,
        routed_affine: affine(routed, &routed_vars),
        global_affine: global_vars.as_ref().map(|gv| affine(g, gv)),
        stats,
    })
}

fn replay_descriptor(episode: &Episode) -> String {
    serde_json::json!({
        "domain": episode.domain,
        "classes": episode.classes,
        "support": episode.support_items,
        "query": episode.query_items,
    })
    .to_string()
}

/// k-means pseudo domain labels of the training tasks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabels {
    pub centroids: Vec<Vec<f64>>,
    /// One label per training step.
    pub labels: Vec<usize>,
    /// Agreement with true domains under the best relabeling, in `[0, 1]`.
    pub matching_accuracy: f64,
    pub purity: f64,
    /// Majority cluster of each training domain, aligned with `TrainState::train_domains`.
    pub cluster_of_domain: Vec<usize>,
}

impl PseudoLabels {
    /// Nearest centroid of a task feature; ties go to the lower index.
    pub fn assign(&self, feature: &[f64]) -> usize {
        crate::data::kmeans::nearest_centroid(feature, &self.centroids)
    }
}

/// Mean global-worker embedding of the support set, with stored statistics.
pub fn task_feature(model: &Model, episode: &Episode) -> Result<Vec<f64>> {
    let (emb, _) = encode(
        &episode.support_images,
        &model.encoder,
        model.bank.global(),
        BnMode::Eval,
    )?;
    let (n, d) = emb.dims2()?;
    Ok((0..d)
        .map(|j| (0..n).map(|i| emb.row(i)[j]).sum::<f64>() / n as f64)
        .collect())
}

pub fn training_episode(dataset: &Dataset, config: &TrainConfig, step: usize) -> Result<Episode> {
    let mut rng = rng_for(config.seed, stream::META_TRAIN, step as u64);
    sample_episode(
        dataset,
        Split::Base,
        config.protocol,
        Phase::Train,
        config.shape,
        &mut rng,
    )
}

pub fn validation_episode(
    dataset: &Dataset,
    config: &TrainConfig,
    index: usize,
) -> Result<Episode> {
    let mut rng = rng_for(config.seed, stream::VALIDATION, index as u64);
    sample_episode(
        dataset,
        Split::Val,
        config.protocol,
        Phase::Train,
        config.shape,
        &mut rng,
    )
}

/// Clusters every training task of the run with the current (pretrained) model.
pub fn compute_pseudo_labels(
    model: &Model,
    dataset: &Dataset,
    config: &TrainConfig,
    k: usize,
) -> Result<PseudoLabels> {
    let total = config.total_steps();
    let mut features = Vec::with_capacity(total);
    let mut truth = Vec::with_capacity(total);
    for step in 0..total {
        let ep = training_episode(dataset, config, step)?;
        features.push(task_feature(model, &ep)?);
        truth.push(ep.domain);
    }
    let fit = kmeans(&features, &KMeansConfig::new(k, config.seed))?;
    let dense_truth = densify(&truth);
    let domains = dense_truth.iter().max().map_or(0, |m| m + 1);
    let cluster_of_domain = (0..domains)
        .map(|d| {
            let mut votes = vec![0usize; k];
            for (&t, &l) in dense_truth.iter().zip(&fit.labels) {
                if t == d {
                    votes[l] += 1;
                }
            }
            // Lowest cluster wins ties.
            (0..k).rev().max_by_key(|&c| votes[c]).unwrap_or(0)
        })
        .collect();
    let out = PseudoLabels {
        cluster_of_domain,
        matching_accuracy: matching_accuracy(&fit.labels, &dense_truth),
        purity: purity(&fit.labels, &dense_truth),
        centroids: fit.centroids,
        labels: fit.labels,
    };
    info!(
        "pseudo labels: {total} tasks, purity {:.3}, matched agreement {:.3}",
        out.purity, out.matching_accuracy
    );
    Ok(out)
}

/// Maps arbitrary ids onto `0..n` in order of first appearance of the sorted set.
fn densify(ids: &[usize]) -> Vec<usize> {
    let mut uniq: Vec<usize> = ids.to_vec();
    uniq.sort_unstable();
    uniq.dedup();
    ids.iter()
        .map(|i| uniq.binary_search(i).expect("present"))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based count of completed epochs.
    pub epoch: usize,
    pub mean_loss: f64,
    pub train_accuracy: f64,
    pub coordinator_accuracy: Option<f64>,
    pub val_accuracy: f64,
    pub lr: f64,
}

/// Everything besides the weights needed to continue a run exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub epoch: usize,
    pub step: usize,
    pub num_workers: usize,
    pub train_domains: Vec<usize>,
    pub pseudo: Option<PseudoLabels>,
    pub initial_val_accuracy: f64,
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
    pub history: Vec<EpochRecord>,
}

impl TrainState {
    /// The worker a task from `domain` is meant to use, if `domain` was seen in training.
    pub fn worker_for_domain(&self, domain: usize) -> Option<usize> {
        let pos = self.train_domains.iter().position(|&d| d == domain)?;
        match &self.pseudo {
            Some(p) => p.cluster_of_domain.get(pos).copied(),
            None if self.num_workers == 1 => Some(0),
            None => Some(pos),
        }
    }

    /// Worker that step `step` is routed to.
    pub fn routing_label(&self, step: usize, episode: &Episode) -> Result<usize> {
        match &self.pseudo {
            Some(p) => p
                .labels
                .get(step)
                .copied()
                .ok_or_else(|| TanoError::invalid(format!("no pseudo label for step {step}"))),
            None => self.worker_for_domain(episode.domain).ok_or_else(|| {
                TanoError::invalid(format!(
                    "domain {} is not a training domain",
                    episode.domain
                ))
            }),
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Checkpoint directory: the best model at the top level, the latest
    /// epoch under `resume/`.
    pub out: Option<PathBuf>,
    /// Continue from `out/resume` instead of starting afresh.
    pub resume: bool,
    /// Stop after this many completed epochs (the run stays resumable).
    pub stop_after: Option<usize>,
}

pub fn validation_accuracy(model: &Model, dataset: &Dataset, config: &TrainConfig) -> Result<f64> {
    if config.val_episodes == 0 {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for i in 0..config.val_episodes {
        let ep = validation_episode(dataset, config, i)?;
        total += infer_episode(model, &ep, InferenceMode::Hard)?.accuracy;
    }
    Ok(total / config.val_episodes as f64)
}

/// Meta-trains `init` (normally built from a pretrained backbone) and
/// returns the checkpoint with the best validation accuracy.
pub fn meta_train_loop(
    dataset: &Dataset,
    init: &Model,
    config: &TrainConfig,
    options: &RunOptions,
) -> Result<Checkpoint> {
    config.validate()?;
    let r = config.effective_workers(dataset.num_domains())?;
    if init.num_domains() != r {
        return Err(TanoError::invalid(format!(
            "initial model has {} workers, the configuration needs {r}",
            init.num_domains()
        )));
    }
    let resume_dir = options.out.as_ref().map(|o| o.join("resume"));
    let (mut model, mut state, mut best) = match (&resume_dir, options.resume) {
        (Some(dir), true) => {
            let last = Checkpoint::load(dir)?;
            if last.config() != Some(config) {
                return Err(TanoError::invalid(
                    "resume checkpoint was written with a different configuration",
                ));
            }
            let best = Checkpoint::load(options.out.as_ref().expect("resume dir implies out"))?;
            let state = last
                .state()
                .cloned()
                .ok_or_else(|| TanoError::invalid("resume checkpoint has no training state"))?;
            info!("resuming after epoch {} (step {})", state.epoch, state.step);
            (last.model, state, best.model)
        }
        (None, true) => return Err(TanoError::invalid("resuming needs a checkpoint directory")),
        _ => {
            let pseudo = if config.pseudo_labels && r > 1 {
                Some(compute_pseudo_labels(init, dataset, config, r)?)
            } else {
                None
            };
            let initial_val = validation_accuracy(init, dataset, config)?;
            info!("validation accuracy before meta-training: {initial_val:.2}%");
            let state = TrainState {
                epoch: 0,
                step: 0,
                num_workers: r,
                train_domains: config.train_domains(dataset.num_domains())?,
                pseudo,
                initial_val_accuracy: initial_val,
                best_epoch: 0,
                best_val_accuracy: initial_val,
                history: Vec::new(),
            };
            (init.clone(), state, init.clone())
        }
    };

    let total = config.total_steps();
    while state.epoch < config.epochs {
        if options.stop_after.is_some_and(|s| state.epoch >= s) {
            break;
        }
        let (mut loss_sum, mut acc_sum, mut coord_hits, mut coord_n) = (0.0, 0.0, 0usize, 0usize);
        let mut lr = config.lr0;
        for _ in 0..config.episodes_per_epoch {
            let step = state.step;
            let episode = training_episode(dataset, config, step)?;
            let label = state.routing_label(step, &episode)?;
            lr = cosine_lr(step, total, config.lr0, config.lr_min);
            let m = meta_train_step(
                &mut model,
                &episode,
                label,
                lr,
                config.v(label),
                config.coordinator_weight,
            )
            .map_err(|e| e.in_stage(&format!("meta-train step {step}"), config.seed))?;
            loss_sum += m.loss;
            acc_sum += m.query_accuracy;
            if let Some(c) = m.coordinator_correct {
                coord_n += 1;
                coord_hits += c as usize;
            }
            state.step += 1;
        }
        state.epoch += 1;
        let val = validation_accuracy(&model, dataset, config)?;
        let n = config.episodes_per_epoch as f64;
        let record = EpochRecord {
            epoch: state.epoch,
            mean_loss: loss_sum / n,
            train_accuracy: acc_sum / n,
            coordinator_accuracy: (coord_n > 0).then(|| 100.0 * coord_hits as f64 / coord_n as f64),
            val_accuracy: val,
            lr,
        };
        info!(
            "epoch {}: loss {:.4}, train acc {:.2}%, val acc {:.2}%",
            record.epoch, record.mean_loss, record.train_accuracy, record.val_accuracy
        );
        state.history.push(record);
        if val > state.best_val_accuracy {
            state.best_val_accuracy = val;
            state.best_epoch = state.epoch;
            best = model.clone();
            if let Some(out) = &options.out {
                Checkpoint::meta(best.clone(), config.clone(), state.clone()).save(out)?;
            }
        }
        if let Some(dir) = &resume_dir {
            Checkpoint::meta(model.clone(), config.clone(), state.clone()).save(dir)?;
        }
    }
    if state.best_epoch == 0 {
        warn!("no epoch improved on the initial validation accuracy; keeping the initial model");
    }
    let result = Checkpoint::meta(best, config.clone(), state);
    if let Some(out) = &options.out {
        result.save(out)?;
    }
    Ok(result)
}
