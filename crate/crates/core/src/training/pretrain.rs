//! Supervised backbone pretraining on joint (domain, class) labels.

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Target};
use crate::data::{Dataset, Split};
use crate::encoder::{
    bn_channels, encode_on_tape, encoder_init, kernel_vars, EncoderWeights, WorkerVars, EMBED_DIM,
};
use crate::error::{Result, TanoError};
use crate::normalization::{BnMode, GroupWorker, DEFAULT_EPSILON, DEFAULT_MOMENTUM};
use crate::rng::{rng_for, stream};
use crate::tensor::Tensor;

use super::{sgd_tensor, sgd_vec};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub epsilon: f64,
    pub momentum: f64,
    /// Domains to pool; empty means all of them.
    pub domains: Vec<usize>,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 10,
            lr: 0.01,
            batch_size: 64,
            seed: 0,
            epsilon: DEFAULT_EPSILON,
            momentum: DEFAULT_MOMENTUM,
            domains: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainEpoch {
    pub epoch: usize,
    pub mean_loss: f64,
    /// Train-mode accuracy over the epoch, in percent.
    pub accuracy: f64,
}

/// The retained part of a pretrained network; the classification head is dropped.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pretrained {
    pub config: PretrainConfig,
    pub encoder: EncoderWeights,
    pub global: GroupWorker,
    pub joint_classes: usize,
    pub history: Vec<PretrainEpoch>,
}

/// Trains the encoder and a BN worker with a linear softmax head over every
/// base class of every pooled domain, each (domain, class) pair its own label.
pub fn pretrain_backbone(dataset: &Dataset, config: &PretrainConfig) -> Result<Pretrained> {
    if !(config.lr > 0.0 && config.lr.is_finite()) || config.batch_size < 2 || config.epochs == 0 {
        return Err(TanoError::invalid(
            "pretraining needs lr > 0, batch size >= 2 and >= 1 epoch",
        ));
    }
    let domains: Vec<usize> = if config.domains.is_empty() {
        (0..dataset.num_domains()).collect()
    } else {
        config.domains.clone()
    };
    if let Some(&d) = domains.iter().find(|&&d| d >= dataset.num_domains()) {
        return Err(TanoError::invalid(format!(
            "pretraining domain {d} not in dataset"
        )));
    }
    let base = dataset.manifest.classes_in(Split::Base);
    if base.is_empty() {
        return Err(TanoError::invalid("base split is empty"));
    }
    let joint = domains.len() * base.len();
    let mut items = Vec::new();
    for (di, &d) in domains.iter().enumerate() {
        for (ci, &c) in base.iter().enumerate() {
            for i in 0..dataset.count(d, c) {
                items.push(((d, c, i), di * base.len() + ci));
            }
        }
    }

    let mut encoder = encoder_init(config.seed);
    let mut global = GroupWorker::new(0, &bn_channels(), config.epsilon, config.momentum);
    let mut head_rng = rng_for(config.seed, stream::HEAD_INIT, 0);
    let limit = (6.0 / (EMBED_DIM + joint) as f64).sqrt();
    let mut head_w = Tensor::new(
        [EMBED_DIM, joint],
        (0..EMBED_DIM * joint)
            .map(|_| head_rng.random_range(-limit..limit))
            .collect(),
    )?;
    let mut head_b = Tensor::zeros([joint]);

    let mut history = Vec::with_capacity(config.epochs);
    let mut initial_loss = None;
    let mut diverged_epochs = 0;
    for epoch in 0..config.epochs {
        let mut order = items.clone();
        order.shuffle(&mut rng_for(config.seed, stream::PRETRAIN, epoch as u64));
        let (mut loss_sum, mut hits, mut seen) = (0.0, 0usize, 0usize);
        for batch in order.chunks(config.batch_size) {
            let refs: Vec<(usize, usize, usize)> = batch.iter().map(|(it, _)| *it).collect();
            let labels: Vec<usize> = batch.iter().map(|(_, l)| *l).collect();
            let mut tape = Tape::new();
            let x = tape.constant(dataset.stack(&refs));
            let kernels = kernel_vars(&mut tape, &encoder, true);
            let wv = WorkerVars::leaves(&mut tape, &global);
            let (emb, stats) =
                encode_on_tape(&mut tape, x, &kernels, &global, &wv, BnMode::Train, None)?;
            let hw = tape.leaf(head_w.clone());
            let hb = tape.leaf(head_b.clone());
            let logits = tape.matmul(emb, hw)?;
            let logits = tape.add_row_bias(logits, hb)?;
            let loss = tape.cross_entropy(logits, Target::Classes(&labels))?;
            let loss_value = tape.value(loss).item()?;
            if !loss_value.is_finite() {
                return Err(TanoError::Numeric(format!(
                    "pretraining loss became {loss_value} in epoch {epoch}"
                )));
            }
            let preds = crate::metric::predictions(tape.value(logits))?;
            hits += preds.iter().zip(&labels).filter(|(p, l)| p == l).count();
            seen += labels.len();
            loss_sum += loss_value * labels.len() as f64;
            initial_loss.get_or_insert(loss_value);

            let grads = tape.backward(loss)?;
            if !grads.all_finite() {
                return Err(TanoError::Numeric(format!(
                    "non-finite gradient in pretraining epoch {epoch}"
                )));
            }
            for (k, v) in encoder.kernels.iter_mut().zip(&kernels) {
                sgd_tensor(k, &grads.get_or_zeros(*v, k), config.lr);
            }
            for (j, layer) in global.layers.iter_mut().enumerate() {
                let c = Tensor::zeros([layer.channels()]);
                sgd_vec(
                    &mut layer.gamma,
                    &grads.get_or_zeros(wv.gammas[j], &c),
                    config.lr,
                );
                sgd_vec(
                    &mut layer.beta,
                    &grads.get_or_zeros(wv.betas[j], &c),
                    config.lr,
                );
                layer.update_running_stats(&stats[j])?;
            }
            let (gw, gb) = (
                grads.get_or_zeros(hw, &head_w),
                grads.get_or_zeros(hb, &head_b),
            );
            sgd_tensor(&mut head_w, &gw, config.lr);
            sgd_tensor(&mut head_b, &gb, config.lr);
        }
        let record = PretrainEpoch {
            epoch,
            mean_loss: loss_sum / seen as f64,
            accuracy: 100.0 * hits as f64 / seen as f64,
        };
        info!(
            "pretrain epoch {epoch}: loss {:.4}, accuracy {:.1}%",
            record.mean_loss, record.accuracy
        );
        let start = initial_loss.expect("at least one batch");
        if record.mean_loss > 10.0 * start {
            diverged_epochs += 1;
            debug!(
                "epoch loss {} exceeds 10× the initial {start}",
                record.mean_loss
            );
            if diverged_epochs >= 3 {
                return Err(TanoError::Numeric(format!(
                    "pretraining diverged: epoch loss {:.4} above 10× the initial {start:.4} for 3 epochs (lr {})",
                    record.mean_loss, config.lr
                )));
            }
        } else {
            diverged_epochs = 0;
        }
        history.push(record);
    }
    Ok(Pretrained {
        config: config.clone(),
        encoder,
        global,
        joint_classes: joint,
        history,
    })
}
