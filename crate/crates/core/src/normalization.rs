//! Batch normalization whose parameters live in a bank of Group Workers.
//!
//! The bank holds `R` domain workers followed by one global worker. Each worker
//! carries a full set of per-layer BN parameters (γ, β, running mean, running
//! variance), so switching a network between domains is a matter of handing a
//! different worker to the forward pass.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Result, TanoError};
use crate::tensor::Tensor;

pub const DEFAULT_EPSILON: f64 = 1e-5;
pub const DEFAULT_MOMENTUM: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BnLayerParams {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    /// Variance, not standard deviation.
    pub running_var: Vec<f64>,
    pub epsilon: f64,
    pub momentum: f64,
}

impl BnLayerParams {
    /// γ = 1, β = 0, μ = 0, σ² = 1.
    pub fn new(channels: usize, epsilon: f64, momentum: f64) -> Self {
        BnLayerParams {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            epsilon,
            momentum,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.channels();
        if self.beta.len() != c || self.running_mean.len() != c || self.running_var.len() != c {
            return Err(TanoError::invalid("BN parameter vectors differ in length"));
        }
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(TanoError::invalid(format!(
                "epsilon {} must be >= 0",
                self.epsilon
            )));
        }
        if self.running_var.iter().any(|&v| v < 0.0) {
            return Err(TanoError::invalid("negative running variance"));
        }
        Ok(())
    }

    /// Exponential moving average towards `stats`; γ and β are untouched.
    pub fn update_running_stats(&mut self, stats: &BatchStats) -> Result<()> {
        if stats.mean.len() != self.channels() {
            return Err(TanoError::dim(format!(
                "batch stats for {} channels, layer has {}",
                stats.mean.len(),
                self.channels()
            )));
        }
        let m = self.momentum;
        for c in 0..self.channels() {
            self.running_mean[c] = (1.0 - m) * self.running_mean[c] + m * stats.mean[c];
            self.running_var[c] = (1.0 - m) * self.running_var[c] + m * stats.var[c];
        }
        Ok(())
    }
}

/// Per-channel statistics over the normalization set (all positions sharing a channel).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased (divisor `count`).
    pub var: Vec<f64>,
    /// Elements per channel, `N·H·W`.
    pub count: usize,
}

/// `(N, C, positions per sample)` for `N×C` or `N×C×H×W` tensors.
fn channel_layout(shape: &[usize]) -> Result<(usize, usize, usize)> {
    match shape {
        [n, c] => Ok((*n, *c, 1)),
        [n, c, h, w] => Ok((*n, *c, h * w)),
        _ => Err(TanoError::dim(format!(
            "batch norm expects N×C or N×C×H×W, got {shape:?}"
        ))),
    }
}

pub fn compute_batch_stats(z: &Tensor) -> Result<BatchStats> {
    let (n, c, plane) = channel_layout(z.shape())?;
    let count = n * plane;
    if count == 0 {
        return Err(TanoError::invalid("batch statistics over an empty batch"));
    }
    let data = z.data();
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ch in 0..c {
        let mut s = 0.0;
        for ni in 0..n {
            let base = (ni * c + ch) * plane;
            s += data[base..base + plane].iter().sum::<f64>();
        }
        let mu = s / count as f64;
        let mut sq = 0.0;
        for ni in 0..n {
            let base = (ni * c + ch) * plane;
            sq += data[base..base + plane]
                .iter()
                .map(|v| (v - mu) * (v - mu))
                .sum::<f64>();
        }
        mean[ch] = mu;
        var[ch] = sq / count as f64;
    }
    Ok(BatchStats { mean, var, count })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum BnMode {
    /// Normalize with the statistics of the current batch.
    Train,
    /// Normalize with the running statistics, treated as constants.
    Eval,
}

/// `(γ/σ)(z − μ) + β` per channel with `σ = sqrt(var + ε)`. Returns the output,
/// the normalized values `(z − μ)/σ`, and per-channel `1/σ`.
fn normalize(
    z: &Tensor,
    gamma: &[f64],
    beta: &[f64],
    mean: &[f64],
    var: &[f64],
    eps: f64,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (n, c, plane) = channel_layout(z.shape()).expect("validated by caller");
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let mut out = vec![0.0; z.len()];
    let mut xhat = vec![0.0; z.len()];
    for ni in 0..n {
        for ch in 0..c {
            let base = (ni * c + ch) * plane;
            for i in base..base + plane {
                let x = (z.data()[i] - mean[ch]) * inv_std[ch];
                xhat[i] = x;
                out[i] = gamma[ch] * x + beta[ch];
            }
        }
    }
    (out, xhat, inv_std)
}

fn check_channels(z: &Tensor, params: &BnLayerParams) -> Result<()> {
    let (_, c, _) = channel_layout(z.shape())?;
    if c != params.channels() {
        return Err(TanoError::dim(format!(
            "input has {c} channels, BN layer has {}",
            params.channels()
        )));
    }
    Ok(())
}

/// Applies one BN layer without recording gradients.
pub fn bn_apply(z: &Tensor, params: &BnLayerParams, mode: BnMode) -> Result<Tensor> {
    check_channels(z, params)?;
    let (mean, var) = match mode {
        BnMode::Train => {
            let s = compute_batch_stats(z)?;
            (s.mean, s.var)
        }
        BnMode::Eval => (params.running_mean.clone(), params.running_var.clone()),
    };
    let (out, _, _) = normalize(z, &params.gamma, &params.beta, &mean, &var, params.epsilon);
    Tensor::new(z.shape(), out)
}

/// Records one BN layer on the tape. `gamma` and `beta` are vars of length `C`;
/// `params` supplies ε and, in eval mode, the running statistics.
///
/// In train mode the batch statistics are returned so the caller can fold
/// them into the worker's running averages.
pub fn bn_forward(
    tape: &mut Tape,
    z: Var,
    gamma: Var,
    beta: Var,
    params: &BnLayerParams,
    mode: BnMode,
) -> Result<(Var, Option<BatchStats>)> {
    let zt = tape.value(z);
    check_channels(zt, params)?;
    let (n, c, plane) = channel_layout(zt.shape())?;
    let g = tape.value(gamma).data().to_vec();
    let b = tape.value(beta).data().to_vec();
    if g.len() != c || b.len() != c {
        return Err(TanoError::dim(
            "gamma/beta length differs from channel count",
        ));
    }
    let (mean, var, stats) = match mode {
        BnMode::Train => {
            let s = compute_batch_stats(zt)?;
            (s.mean.clone(), s.var.clone(), Some(s))
        }
        BnMode::Eval => (
            params.running_mean.clone(),
            params.running_var.clone(),
            None,
        ),
    };
    let (out, xhat, inv_std) = normalize(zt, &g, &b, &mean, &var, params.epsilon);
    let out = Tensor::new(zt.shape(), out)?;
    let m = (n * plane) as f64;
    let var = tape.push_op(out, &[z, gamma, beta], move |grad| {
        let mut gz = vec![0.0; grad.len()];
        let mut gg = vec![0.0; c];
        let mut gb = vec![0.0; c];
        for ni in 0..n {
            for ch in 0..c {
                let base = (ni * c + ch) * plane;
                for i in base..base + plane {
                    gg[ch] += grad[i] * xhat[i];
                    gb[ch] += grad[i];
                }
            }
        }
        for ni in 0..n {
            for ch in 0..c {
                let base = (ni * c + ch) * plane;
                let scale = g[ch] * inv_std[ch];
                for i in base..base + plane {
                    gz[i] = match mode {
                        BnMode::Eval => scale * grad[i],
                        BnMode::Train => scale * (grad[i] - gb[ch] / m - xhat[i] * gg[ch] / m),
                    };
                }
            }
        }
        vec![gz, gg, gb]
    });
    Ok((var, stats))
}

/// One complete set of BN parameters for every BN layer of the encoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupWorker {
    /// Position in the bank; the global worker sits at index `R`.
    pub index: usize,
    pub layers: Vec<BnLayerParams>,
}

impl GroupWorker {
    pub fn new(index: usize, channels: &[usize], epsilon: f64, momentum: f64) -> Self {
        GroupWorker {
            index,
            layers: channels
                .iter()
                .map(|&c| BnLayerParams::new(c, epsilon, momentum))
                .collect(),
        }
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }
}

/// `R` domain workers followed by the global worker.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupWorkerBank {
    pub workers: Vec<GroupWorker>,
    pub num_domains: usize,
}

impl GroupWorkerBank {
    /// All `R + 1` workers start identical.
    pub fn new(
        num_domains: usize,
        channels: &[usize],
        epsilon: f64,
        momentum: f64,
    ) -> Result<Self> {
        if num_domains == 0 {
            return Err(TanoError::invalid(
                "a bank needs at least one domain worker",
            ));
        }
        let workers = (0..=num_domains)
            .map(|r| GroupWorker::new(r, channels, epsilon, momentum))
            .collect();
        Ok(GroupWorkerBank {
            workers,
            num_domains,
        })
    }

    pub fn global_index(&self) -> usize {
        self.num_domains
    }

    pub fn global(&self) -> &GroupWorker {
        &self.workers[self.num_domains]
    }

    pub fn global_mut(&mut self) -> &mut GroupWorker {
        &mut self.workers[self.num_domains]
    }

    pub fn worker(&self, r: usize) -> Result<&GroupWorker> {
        self.workers.get(r).ok_or_else(|| {
            TanoError::invalid(format!("no worker {r} in a bank of {}", self.workers.len()))
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.workers.len() != self.num_domains + 1 {
            return Err(TanoError::invalid(format!(
                "bank with {} domains holds {} workers",
                self.num_domains,
                self.workers.len()
            )));
        }
        let j = self.workers[0].num_layers();
        for w in &self.workers {
            if w.num_layers() != j {
                return Err(TanoError::invalid("workers disagree on layer count"));
            }
            w.layers.iter().try_for_each(BnLayerParams::validate)?;
        }
        Ok(())
    }
}

/// How running variances combine when blending workers.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum VarianceBlend {
    /// `Σ w_r σ²_r`.
    #[default]
    Linear,
    /// Variance of the mixture: `Σ w_r (σ²_r + μ_r²) − μ²`.
    Mixture,
}

/// Convex combination of the `R` domain workers. The bank is not modified.
pub fn blend_workers(
    bank: &GroupWorkerBank,
    weights: &[f64],
    rule: VarianceBlend,
) -> Result<GroupWorker> {
    if weights.len() != bank.num_domains {
        return Err(TanoError::invalid(format!(
            "{} blend weights for {} domain workers",
            weights.len(),
            bank.num_domains
        )));
    }
    let total: f64 = weights.iter().sum();
    if (total - 1.0).abs() > 1e-9 || weights.iter().any(|&w| w < 0.0) {
        return Err(TanoError::invalid(format!(
            "blend weights must be nonnegative and sum to 1, got sum {total}"
        )));
    }
    let template = &bank.workers[0];
    let mut layers = Vec::with_capacity(template.num_layers());
    for j in 0..template.num_layers() {
        let c = template.layers[j].channels();
        let mut out = BnLayerParams {
            gamma: vec![0.0; c],
            beta: vec![0.0; c],
            running_mean: vec![0.0; c],
            running_var: vec![0.0; c],
            ..template.layers[j].clone()
        };
        let mut second_moment = vec![0.0; c];
        for (r, &w) in weights.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            let src = &bank.workers[r].layers[j];
            for ch in 0..c {
                out.gamma[ch] += w * src.gamma[ch];
                out.beta[ch] += w * src.beta[ch];
                out.running_mean[ch] += w * src.running_mean[ch];
                out.running_var[ch] += w * src.running_var[ch];
                second_moment[ch] += w * (src.running_var[ch] + src.running_mean[ch].powi(2));
            }
        }
        if rule == VarianceBlend::Mixture {
            for ch in 0..c {
                out.running_var[ch] = (second_moment[ch] - out.running_mean[ch].powi(2)).max(0.0);
            }
        }
        layers.push(out);
    }
    // Exact copy for one-hot weights, including the linear rule's rounding.
    if let Some(r) = weights.iter().position(|&w| w == 1.0) {
        return Ok(GroupWorker {
            index: r,
            layers: bank.workers[r].layers.clone(),
        });
    }
    Ok(GroupWorker {
        index: bank.workers.len(),
        layers,
    })
}

/// Replaces the running statistics with those of `target_batch`, keeping γ and β.
pub fn adabn_adapt(params: &BnLayerParams, target_batch: &Tensor) -> Result<BnLayerParams> {
    check_channels(target_batch, params)?;
    let stats = compute_batch_stats(target_batch)?;
    if stats.count < 32 {
        warn!(
            "AdaBN adapting from only {} elements per channel; statistics will be noisy",
            stats.count
        );
    }
    Ok(BnLayerParams {
        running_mean: stats.mean,
        running_var: stats.var,
        ..params.clone()
    })
}

/// How far one channel's normalized vector sits from its predicted sphere.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SphereResidual {
    /// `| ‖(ẑ−β)/γ‖² − m·var/(var+ε) |`; zero up to rounding for any ε.
    pub identity: f64,
    /// `| ‖(ẑ−β)/γ‖² − m | / m`, the gap to radius `√m` caused by ε.
    pub radius_gap: f64,
    pub m: usize,
}

/// Checks one channel of a train-mode BN output against the sphere of radius
/// `√m` (scaled by γ, centred at β).
pub fn sphere_residual(
    z_hat: &[f64],
    gamma: f64,
    beta: f64,
    batch_var: f64,
    epsilon: f64,
) -> Result<SphereResidual> {
    if gamma == 0.0 {
        return Err(TanoError::invalid(
            "gamma = 0 collapses the sphere to a point",
        ));
    }
    let m = z_hat.len();
    if m == 0 {
        return Err(TanoError::invalid("sphere residual of an empty channel"));
    }
    let norm_sq: f64 = z_hat.iter().map(|v| ((v - beta) / gamma).powi(2)).sum();
    let mf = m as f64;
    let predicted = if batch_var + epsilon == 0.0 {
        0.0
    } else {
        mf * batch_var / (batch_var + epsilon)
    };
    Ok(SphereResidual {
        identity: (norm_sq - predicted).abs(),
        radius_gap: (norm_sq - mf).abs() / mf,
        m,
    })
}

/// All values of channel `c` of an `N×C` or `N×C×H×W` tensor.
pub fn channel_values(z: &Tensor, c: usize) -> Result<Vec<f64>> {
    let (n, channels, plane) = channel_layout(z.shape())?;
    if c >= channels {
        return Err(TanoError::dim(format!("channel {c} of {channels}")));
    }
    let mut out = Vec::with_capacity(n * plane);
    for ni in 0..n {
        let base = (ni * channels + c) * plane;
        out.extend_from_slice(&z.data()[base..base + plane]);
    }
    Ok(out)
}
