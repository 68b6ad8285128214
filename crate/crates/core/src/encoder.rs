//! Three conv → BN → ReLU → max-pool blocks over 16×16 RGB images.
//!
//! The encoder owns only the convolution kernels. BN parameters are supplied
//! per forward pass by a [`GroupWorker`], which is how a single set of conv
//! weights serves every domain.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Result, TanoError};
use crate::normalization::{bn_forward, BatchStats, BnMode, GroupWorker};
use crate::rng::{rng_for, stream};
use crate::tensor::Tensor;

pub const IMAGE_SIZE: usize = 16;
pub const IMAGE_CHANNELS: usize = 3;
pub const BLOCK_CHANNELS: [usize; 3] = [16, 32, 32];
pub const KERNEL_SIZE: usize = 3;
pub const NUM_BN_LAYERS: usize = BLOCK_CHANNELS.len();
/// 32 channels × 2 × 2 after three halvings of 16×16.
pub const EMBED_DIM: usize = 128;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderWeights {
    /// One `O×C×3×3` kernel per block.
    pub kernels: Vec<Tensor>,
}

/// Glorot-uniform kernels, reproducible from `seed`.
pub fn encoder_init(seed: u64) -> EncoderWeights {
    let mut rng = rng_for(seed, stream::ENCODER_INIT, 0);
    let mut in_c = IMAGE_CHANNELS;
    let mut kernels = Vec::with_capacity(NUM_BN_LAYERS);
    for &out_c in &BLOCK_CHANNELS {
        let area = KERNEL_SIZE * KERNEL_SIZE;
        let limit = (6.0 / ((in_c * area + out_c * area) as f64)).sqrt();
        let n = out_c * in_c * area;
        let data = (0..n).map(|_| rng.random_range(-limit..limit)).collect();
        kernels.push(Tensor::new([out_c, in_c, KERNEL_SIZE, KERNEL_SIZE], data).expect("shape"));
        in_c = out_c;
    }
    EncoderWeights { kernels }
}

/// BN channel count of every layer, in order.
pub fn bn_channels() -> Vec<usize> {
    BLOCK_CHANNELS.to_vec()
}

/// Tape handles for a worker's γ and β, one pair per BN layer.
#[derive(Clone, Debug)]
pub struct WorkerVars {
    pub gammas: Vec<Var>,
    pub betas: Vec<Var>,
}

impl WorkerVars {
    pub fn leaves(tape: &mut Tape, worker: &GroupWorker) -> Self {
        Self::record(tape, worker, true)
    }

    pub fn constants(tape: &mut Tape, worker: &GroupWorker) -> Self {
        Self::record(tape, worker, false)
    }

    fn record(tape: &mut Tape, worker: &GroupWorker, trainable: bool) -> Self {
        let mut gammas = Vec::new();
        let mut betas = Vec::new();
        for layer in &worker.layers {
            let g = Tensor::vector(layer.gamma.clone());
            let b = Tensor::vector(layer.beta.clone());
            if trainable {
                gammas.push(tape.leaf(g));
                betas.push(tape.leaf(b));
            } else {
                gammas.push(tape.constant(g));
                betas.push(tape.constant(b));
            }
        }
        WorkerVars { gammas, betas }
    }
}

pub fn kernel_vars(tape: &mut Tape, weights: &EncoderWeights, trainable: bool) -> Vec<Var> {
    weights
        .kernels
        .iter()
        .map(|k| {
            if trainable {
                tape.leaf(k.clone())
            } else {
                tape.constant(k.clone())
            }
        })
        .collect()
}

pub fn check_images(images: &Tensor) -> Result<()> {
    let (_, c, h, w) = images.dims4()?;
    if c != IMAGE_CHANNELS || h != IMAGE_SIZE || w != IMAGE_SIZE {
        return Err(TanoError::dim(format!(
            "encoder expects B×{IMAGE_CHANNELS}×{IMAGE_SIZE}×{IMAGE_SIZE} images, got {:?}",
            images.shape()
        )));
    }
    Ok(())
}

/// Per-layer activations captured during a forward pass.
#[derive(Clone, Debug, Default)]
pub struct EncodeTrace {
    /// Conv outputs entering each BN layer.
    pub pre_bn: Vec<Tensor>,
    /// BN outputs (before ReLU).
    pub post_bn: Vec<Tensor>,
}

/// Records the encoder on `tape`. In train mode the returned batch statistics
/// are the pending running-stat updates for `worker`.
pub fn encode_on_tape(
    tape: &mut Tape,
    images: Var,
    kernels: &[Var],
    worker: &GroupWorker,
    worker_vars: &WorkerVars,
    mode: BnMode,
    mut trace: Option<&mut EncodeTrace>,
) -> Result<(Var, Vec<BatchStats>)> {
    check_images(tape.value(images))?;
    if worker.num_layers() != NUM_BN_LAYERS || kernels.len() != NUM_BN_LAYERS {
        return Err(TanoError::dim(format!(
            "encoder has {NUM_BN_LAYERS} BN slots, worker supplies {}",
            worker.num_layers()
        )));
    }
    let mut x = images;
    let mut stats = Vec::with_capacity(NUM_BN_LAYERS);
    for j in 0..NUM_BN_LAYERS {
        let z = tape.conv2d(x, kernels[j], 1, KERNEL_SIZE / 2)?;
        let (bn, s) = bn_forward(
            tape,
            z,
            worker_vars.gammas[j],
            worker_vars.betas[j],
            &worker.layers[j],
            mode,
        )?;
        if let Some(t) = trace.as_deref_mut() {
            t.pre_bn.push(tape.value(z).clone());
            t.post_bn.push(tape.value(bn).clone());
        }
        stats.extend(s);
        let r = tape.relu(bn);
        x = tape.max_pool2(r)?;
    }
    Ok((tape.flatten(x)?, stats))
}

/// Embeddings without gradients.
pub fn encode(
    images: &Tensor,
    weights: &EncoderWeights,
    worker: &GroupWorker,
    mode: BnMode,
) -> Result<(Tensor, Vec<BatchStats>)> {
    let mut tape = Tape::no_grad();
    let x = tape.constant(images.clone());
    let kernels = kernel_vars(&mut tape, weights, false);
    let wv = WorkerVars::constants(&mut tape, worker);
    let (emb, stats) = encode_on_tape(&mut tape, x, &kernels, worker, &wv, mode, None)?;
    Ok((tape.value(emb).clone(), stats))
}

/// Like [`encode`] but also returns per-layer activations.
pub fn encode_traced(
    images: &Tensor,
    weights: &EncoderWeights,
    worker: &GroupWorker,
    mode: BnMode,
) -> Result<(Tensor, EncodeTrace)> {
    let mut tape = Tape::no_grad();
    let x = tape.constant(images.clone());
    let kernels = kernel_vars(&mut tape, weights, false);
    let wv = WorkerVars::constants(&mut tape, worker);
    let mut trace = EncodeTrace::default();
    let (emb, _) = encode_on_tape(&mut tape, x, &kernels, worker, &wv, mode, Some(&mut trace))?;
    Ok((tape.value(emb).clone(), trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::normalization::{GroupWorkerBank, DEFAULT_EPSILON, DEFAULT_MOMENTUM};

    fn images(n: usize, seed: u64) -> Tensor {
        let mut rng = rng_for(seed, 99, 0);
        let len = n * IMAGE_CHANNELS * IMAGE_SIZE * IMAGE_SIZE;
        Tensor::new(
            [n, IMAGE_CHANNELS, IMAGE_SIZE, IMAGE_SIZE],
            (0..len).map(|_| rng.random()).collect(),
        )
        .unwrap()
    }

    fn worker() -> GroupWorker {
        GroupWorker::new(0, &bn_channels(), DEFAULT_EPSILON, DEFAULT_MOMENTUM)
    }

    #[test]
    fn init_is_seeded_and_glorot_scaled() {
        let a = encoder_init(3);
        assert_eq!(a, encoder_init(3));
        assert_ne!(a, encoder_init(4));
        let mut in_c = IMAGE_CHANNELS;
        for (k, &out_c) in a.kernels.iter().zip(&BLOCK_CHANNELS) {
            let n = k.len() as f64;
            let mean = k.data().iter().sum::<f64>() / n;
            let var = k.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let expected = 2.0 / ((in_c + out_c) * 9) as f64;
            assert!(
                var < 3.0 * expected && var > expected / 3.0,
                "{var} vs {expected}"
            );
            in_c = out_c;
        }
    }

    #[test]
    fn output_is_b_by_128_in_both_modes() {
        let w = encoder_init(0);
        for n in [1, 2, 7] {
            for mode in [BnMode::Train, BnMode::Eval] {
                let (e, stats) = encode(&images(n.max(2), 1), &w, &worker(), mode).unwrap();
                assert_eq!(e.shape(), &[n.max(2), EMBED_DIM]);
                assert_eq!(stats.len(), if mode == BnMode::Train { 3 } else { 0 });
            }
        }
    }

    #[test]
    fn wrong_image_size_is_rejected() {
        let w = encoder_init(0);
        let bad = Tensor::zeros([2, 3, 8, 8]);
        assert!(matches!(
            encode(&bad, &w, &worker(), BnMode::Eval),
            Err(TanoError::Dimension(_))
        ));
    }

    #[test]
    fn identical_workers_identical_embeddings_and_beta_propagates() {
        let w = encoder_init(5);
        let bank =
            GroupWorkerBank::new(2, &bn_channels(), DEFAULT_EPSILON, DEFAULT_MOMENTUM).unwrap();
        let x = images(4, 2);
        let (a, _) = encode(&x, &w, &bank.workers[0], BnMode::Train).unwrap();
        let (b, _) = encode(&x, &w, &bank.workers[1], BnMode::Train).unwrap();
        assert_eq!(a, b);
        let mut shifted = bank.workers[1].clone();
        shifted.layers[0].beta.iter_mut().for_each(|v| *v += 0.5);
        let (c, _) = encode(&x, &w, &shifted, BnMode::Train).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn eval_mode_is_batch_independent() {
        let w = encoder_init(7);
        let mut wk = worker();
        wk.layers[1].running_mean.iter_mut().for_each(|v| *v = 0.2);
        let batch = images(20, 3);
        let (all, _) = encode(&batch, &w, &wk, BnMode::Eval).unwrap();
        let single = batch.slice_rows(6, 7).unwrap();
        let (one, _) = encode(&single, &w, &wk, BnMode::Eval).unwrap();
        for (a, b) in all.row(6).iter().zip(one.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
