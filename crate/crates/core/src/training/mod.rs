//! Backbone pretraining, episodic meta-training and checkpoints.

pub mod checkpoint;
pub mod gradcheck;
pub mod meta;
pub mod pretrain;

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::coordinator::CoordinatorWeights;
use crate::data::{EpisodeShape, Phase, Protocol};
use crate::encoder::{bn_channels, encoder_init, EncoderWeights, EMBED_DIM};
use crate::error::{Result, TanoError};
use crate::normalization::{GroupWorker, GroupWorkerBank, DEFAULT_EPSILON, DEFAULT_MOMENTUM};
use crate::tensor::Tensor;

pub use checkpoint::{
    hash_dir, load_pretrained, model_hash, save_pretrained, Checkpoint, CheckpointManifest,
    MultiModels,
};
pub use gradcheck::{episode_grad_check, EpisodeGradCheck};
pub use meta::{
    episode_gradients, meta_train_loop, meta_train_step, EpochRecord, PseudoLabels, RunOptions,
    StepMetrics, TrainState,
};
pub use pretrain::{pretrain_backbone, PretrainConfig, Pretrained};

/// Cosine annealing from `lr0` at `t = 0` to `lr_min` at `t = total`;
/// steps past the end stay at `lr_min`.
pub fn cosine_lr(t: usize, total: usize, lr0: f64, lr_min: f64) -> f64 {
    if total == 0 || t >= total {
        return lr_min;
    }
    lr_min + 0.5 * (lr0 - lr_min) * (1.0 + (PI * t as f64 / total as f64).cos())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr0: f64,
    pub lr_min: f64,
    pub epochs: usize,
    pub episodes_per_epoch: usize,
    pub shape: EpisodeShape,
    /// Per-worker loss weights; empty means all 1.
    pub v_r: Vec<f64>,
    pub momentum: f64,
    pub epsilon: f64,
    pub seed: u64,
    /// Requested number of domain workers `R`; see [`TrainConfig::effective_workers`].
    pub num_workers: usize,
    pub pseudo_labels: bool,
    pub coordinator_weight: f64,
    pub protocol: Protocol,
    pub val_episodes: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 0.001,
            lr_min: 0.0,
            epochs: 40,
            episodes_per_epoch: 100,
            shape: EpisodeShape::new(5, 1, 15),
            v_r: Vec::new(),
            momentum: DEFAULT_MOMENTUM,
            epsilon: DEFAULT_EPSILON,
            seed: 0,
            num_workers: 4,
            pseudo_labels: true,
            coordinator_weight: 1.0,
            protocol: Protocol::Intra,
            val_episodes: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [("lr0", self.lr0), ("momentum", self.momentum)];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(TanoError::invalid(format!("{name} = {v} must be positive")));
            }
        }
        if !(self.lr_min >= 0.0 && self.lr_min <= self.lr0) {
            return Err(TanoError::invalid(format!(
                "lr_min = {} must lie in [0, lr0]",
                self.lr_min
            )));
        }
        if self.momentum > 1.0 {
            return Err(TanoError::invalid("BN momentum must be <= 1"));
        }
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(TanoError::invalid(format!(
                "epsilon = {} must be >= 0",
                self.epsilon
            )));
        }
        if !(self.coordinator_weight >= 0.0 && self.coordinator_weight.is_finite()) {
            return Err(TanoError::invalid("coordinator loss weight must be >= 0"));
        }
        if self.v_r.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
            return Err(TanoError::invalid("every v_r must be > 0"));
        }
        if self.num_workers == 0 {
            return Err(TanoError::invalid("at least one worker is required"));
        }
        if self.epochs == 0 || self.episodes_per_epoch == 0 {
            return Err(TanoError::invalid(
                "epochs and episodes per epoch must be positive",
            ));
        }
        Ok(())
    }

    /// Domains meta-training samples from.
    pub fn train_domains(&self, num_domains: usize) -> Result<Vec<usize>> {
        self.protocol.domains(num_domains, Phase::Train)
    }

    /// Number of domain workers actually built. A single training domain
    /// collapses to one worker, and there are never more workers than
    /// training domains. One worker is always allowed (the common model).
    pub fn effective_workers(&self, num_domains: usize) -> Result<usize> {
        let seen = self.train_domains(num_domains)?.len();
        if !self.pseudo_labels && self.num_workers != seen && self.num_workers > 1 {
            return Err(TanoError::invalid(format!(
                "true domain labels need one worker per training domain ({seen}), got {}",
                self.num_workers
            )));
        }
        Ok(self.num_workers.min(seen))
    }

    pub fn v(&self, r: usize) -> f64 {
        self.v_r.get(r).copied().unwrap_or(1.0)
    }

    pub fn total_steps(&self) -> usize {
        self.epochs * self.episodes_per_epoch
    }
}

/// Encoder, coordinator and worker bank: everything inference needs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub encoder: EncoderWeights,
    pub coordinator: CoordinatorWeights,
    pub bank: GroupWorkerBank,
}

impl Model {
    /// Freshly initialised encoder and bank (the "untrained" reference).
    pub fn random(seed: u64, num_domains: usize) -> Result<Model> {
        Ok(Model {
            encoder: encoder_init(seed),
            coordinator: CoordinatorWeights::init(seed, EMBED_DIM, num_domains),
            bank: GroupWorkerBank::new(
                num_domains,
                &bn_channels(),
                DEFAULT_EPSILON,
                DEFAULT_MOMENTUM,
            )?,
        })
    }

    /// Every worker (domain and global) starts as a copy of the pretrained
    /// global worker, with the given BN hyperparameters.
    pub fn from_pretrained(
        encoder: &EncoderWeights,
        global: &GroupWorker,
        num_domains: usize,
        seed: u64,
        epsilon: f64,
        momentum: f64,
    ) -> Result<Model> {
        let mut bank = GroupWorkerBank::new(num_domains, &bn_channels(), epsilon, momentum)?;
        for w in &mut bank.workers {
            for (dst, src) in w.layers.iter_mut().zip(&global.layers) {
                *dst = crate::normalization::BnLayerParams {
                    epsilon,
                    momentum,
                    ..src.clone()
                };
            }
        }
        Ok(Model {
            encoder: encoder.clone(),
            coordinator: CoordinatorWeights::init(seed, EMBED_DIM, num_domains),
            bank,
        })
    }

    pub fn num_domains(&self) -> usize {
        self.bank.num_domains
    }

    /// Named parameter tensors in a fixed order (checkpoint layout and hashing).
    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (j, k) in self.encoder.kernels.iter().enumerate() {
            out.push((format!("encoder.conv{j}"), k.clone()));
        }
        let names = ["w1", "b1", "w2", "b2"];
        for (n, t) in names.iter().zip(self.coordinator.tensors()) {
            out.push((format!("coordinator.{n}"), t.clone()));
        }
        for w in &self.bank.workers {
            out.extend(worker_tensors(w));
        }
        out
    }
}

pub(crate) fn worker_tensors(w: &GroupWorker) -> Vec<(String, Tensor)> {
    let mut out = Vec::new();
    for (j, l) in w.layers.iter().enumerate() {
        let p = format!("worker{}.bn{j}", w.index);
        out.push((format!("{p}.gamma"), Tensor::vector(l.gamma.clone())));
        out.push((format!("{p}.beta"), Tensor::vector(l.beta.clone())));
        out.push((
            format!("{p}.running_mean"),
            Tensor::vector(l.running_mean.clone()),
        ));
        out.push((
            format!("{p}.running_var"),
            Tensor::vector(l.running_var.clone()),
        ));
    }
    out
}

pub(crate) fn sgd_tensor(param: &mut Tensor, grad: &Tensor, lr: f64) {
    param
        .data_mut()
        .iter_mut()
        .zip(grad.data())
        .for_each(|(p, g)| *p -= lr * g);
}

pub(crate) fn sgd_vec(param: &mut [f64], grad: &Tensor, lr: f64) {
    param
        .iter_mut()
        .zip(grad.data())
        .for_each(|(p, g)| *p -= lr * g);
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(cosine_lr(0, 100, 0.001, 0.0), 0.001);
        assert_eq!(cosine_lr(100, 100, 0.001, 0.0), 0.0);
        assert!((cosine_lr(50, 100, 0.001, 0.0) - 0.0005).abs() < 1e-15);
        assert_eq!(cosine_lr(250, 100, 0.001, 1e-5), 1e-5);
        let lrs: Vec<f64> = (0..=100).map(|t| cosine_lr(t, 100, 0.1, 0.0)).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn worker_counts_follow_protocol() {
        let mut c = TrainConfig::default();
        assert_eq!(c.effective_workers(4).unwrap(), 4);
        c.protocol = Protocol::Out { holdout: 2 };
        assert_eq!(c.effective_workers(4).unwrap(), 3);
        c.protocol = Protocol::Standard { domain: 1 };
        assert_eq!(c.effective_workers(4).unwrap(), 1);
        c.protocol = Protocol::Intra;
        c.pseudo_labels = false;
        c.num_workers = 3;
        assert!(c.effective_workers(4).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = [
            TrainConfig {
                lr0: 0.0,
                ..Default::default()
            },
            TrainConfig {
                v_r: vec![1.0, -1.0],
                ..Default::default()
            },
            TrainConfig {
                epsilon: -1.0,
                ..Default::default()
            },
            TrainConfig {
                epochs: 0,
                ..Default::default()
            },
        ];
        for c in bad {
            assert!(matches!(c.validate(), Err(TanoError::Validation(_))));
        }
    }
}
