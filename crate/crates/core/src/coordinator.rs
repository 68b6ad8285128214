//! The Group Coordinator: a small MLP that reads the mean global-worker
//! embedding of a support set and predicts which domain worker to use.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Target, Var};
use crate::error::{Result, TanoError};
use crate::rng::{rng_for, stream};
use crate::tensor::{self, Tensor};

pub const HIDDEN_WIDTH: usize = 64;

/// `d → 64 → R` with ReLU in between; softmax is applied by the callers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoordinatorWeights {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

fn glorot(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| rng.random_range(-limit..limit))
        .collect();
    Tensor::new([fan_in, fan_out], data).expect("shape")
}

impl CoordinatorWeights {
    pub fn init(seed: u64, embed_dim: usize, num_domains: usize) -> Self {
        let mut rng = rng_for(seed, stream::COORDINATOR_INIT, 0);
        CoordinatorWeights {
            w1: glorot(&mut rng, embed_dim, HIDDEN_WIDTH),
            b1: Tensor::zeros([HIDDEN_WIDTH]),
            w2: glorot(&mut rng, HIDDEN_WIDTH, num_domains),
            b2: Tensor::zeros([num_domains]),
        }
    }

    pub fn zeros(embed_dim: usize, num_domains: usize) -> Self {
        CoordinatorWeights {
            w1: Tensor::zeros([embed_dim, HIDDEN_WIDTH]),
            b1: Tensor::zeros([HIDDEN_WIDTH]),
            w2: Tensor::zeros([HIDDEN_WIDTH, num_domains]),
            b2: Tensor::zeros([num_domains]),
        }
    }

    pub fn num_domains(&self) -> usize {
        self.b2.len()
    }

    pub fn tensors(&self) -> [&Tensor; 4] {
        [&self.w1, &self.b1, &self.w2, &self.b2]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 4] {
        [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }
}

#[derive(Clone, Copy, Debug)]
pub struct CoordinatorVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl CoordinatorVars {
    pub fn record(tape: &mut Tape, weights: &CoordinatorWeights, trainable: bool) -> Self {
        let mut put = |t: &Tensor| {
            if trainable {
                tape.leaf(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        CoordinatorVars {
            w1: put(&weights.w1),
            b1: put(&weights.b1),
            w2: put(&weights.w2),
            b2: put(&weights.b2),
        }
    }

    pub fn as_array(&self) -> [Var; 4] {
        [self.w1, self.b1, self.w2, self.b2]
    }
}

/// Mean-pools the support embeddings and returns the `1×R` coordinator logits.
pub fn coordinator_logits(
    tape: &mut Tape,
    support_embeddings: Var,
    vars: &CoordinatorVars,
) -> Result<Var> {
    let (n, _) = tape.value(support_embeddings).dims2()?;
    if n == 0 {
        return Err(TanoError::invalid(
            "coordinator needs a non-empty support set",
        ));
    }
    let pooled = tape.mean_rows(support_embeddings)?;
    let h = tape.matmul(pooled, vars.w1)?;
    let h = tape.add_row_bias(h, vars.b1)?;
    let h = tape.relu(h);
    let o = tape.matmul(h, vars.w2)?;
    tape.add_row_bias(o, vars.b2)
}

/// Coordinator output: a distribution over the `R` domain workers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainWeights {
    pub w_hat: Vec<f64>,
}

impl DomainWeights {
    pub fn new(w_hat: Vec<f64>) -> Result<Self> {
        let sum: f64 = w_hat.iter().sum();
        if w_hat.is_empty()
            || (sum - 1.0).abs() > 1e-9
            || w_hat.iter().any(|&w| !(0.0..=1.0).contains(&w))
        {
            return Err(TanoError::invalid(format!(
                "domain weights must lie in [0,1] and sum to 1, got {w_hat:?}"
            )));
        }
        Ok(DomainWeights { w_hat })
    }

    pub fn from_logits(logits: &[f64]) -> Result<Self> {
        let p = tensor::softmax_along(logits, &[logits.len()], 0, false)?;
        DomainWeights::new(p)
    }

    pub fn one_hot(r: usize, num_domains: usize) -> Result<Self> {
        if r >= num_domains {
            return Err(TanoError::invalid(format!(
                "domain {r} out of range for {num_domains}"
            )));
        }
        let mut w = vec![0.0; num_domains];
        w[r] = 1.0;
        DomainWeights::new(w)
    }

    pub fn len(&self) -> usize {
        self.w_hat.len()
    }

    pub fn is_empty(&self) -> bool {
        self.w_hat.is_empty()
    }

    /// Index of the largest weight; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        argmax(&self.w_hat)
    }
}

pub(crate) fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub fn coordinate(
    support_embeddings: &Tensor,
    weights: &CoordinatorWeights,
) -> Result<DomainWeights> {
    let mut tape = Tape::no_grad();
    let s = tape.constant(support_embeddings.clone());
    let vars = CoordinatorVars::record(&mut tape, weights, false);
    let logits = coordinator_logits(&mut tape, s, &vars)?;
    DomainWeights::from_logits(tape.value(logits).data())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SelectionMode {
    Hard,
    Blend,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorkerSelection {
    pub mode: SelectionMode,
    /// Chosen worker indices, strongest first.
    pub workers: Vec<usize>,
    /// Renormalized weights aligned with `workers`.
    pub weights: Vec<f64>,
    pub k: usize,
}

impl WorkerSelection {
    /// Weights spread back over all `R` workers (zeros for unselected ones).
    pub fn dense_weights(&self, num_domains: usize) -> Vec<f64> {
        let mut out = vec![0.0; num_domains];
        for (&r, &w) in self.workers.iter().zip(&self.weights) {
            out[r] = w;
        }
        out
    }
}

pub fn select_worker(w: &DomainWeights, k: usize, mode: SelectionMode) -> Result<WorkerSelection> {
    let r = w.len();
    if k == 0 || k > r {
        return Err(TanoError::invalid(format!("k = {k} outside 1..={r}")));
    }
    match mode {
        SelectionMode::Hard => Ok(WorkerSelection {
            mode,
            workers: vec![w.argmax()],
            weights: vec![1.0],
            k: 1,
        }),
        SelectionMode::Blend => {
            let mut order: Vec<usize> = (0..r).collect();
            // Stable sort keeps lower indices first among equal weights.
            order.sort_by(|&a, &b| w.w_hat[b].total_cmp(&w.w_hat[a]));
            order.truncate(k);
            let mass: f64 = order.iter().map(|&i| w.w_hat[i]).sum();
            let weights = if mass > 0.0 {
                order.iter().map(|&i| w.w_hat[i] / mass).collect()
            } else {
                vec![1.0 / k as f64; k]
            };
            Ok(WorkerSelection {
                mode,
                workers: order,
                weights,
                k,
            })
        }
    }
}

/// `−Σ_r w_r log ŵ_r` for a one-hot (or soft) label `w`.
pub fn coordinator_loss(w_hat: &DomainWeights, w: &[f64]) -> Result<f64> {
    if w.len() != w_hat.len() {
        return Err(TanoError::dim(format!(
            "label over {} domains, prediction over {}",
            w.len(),
            w_hat.len()
        )));
    }
    if w.iter().all(|&v| v == 0.0) {
        return Err(TanoError::invalid("domain label is all zeros"));
    }
    Ok(-w
        .iter()
        .zip(&w_hat.w_hat)
        .filter(|(t, _)| **t != 0.0)
        .map(|(t, p)| t * p.max(f64::MIN_POSITIVE).ln())
        .sum::<f64>())
}

/// Coordinator cross-entropy on the tape, taken from logits for stability.
/// Returns `None` for a single-domain bank, where the term is identically zero.
pub fn coordinator_loss_on_tape(tape: &mut Tape, logits: Var, label: usize) -> Result<Option<Var>> {
    let (_, r) = tape.value(logits).dims2()?;
    if r == 1 {
        return Ok(None);
    }
    tape.cross_entropy(logits, Target::Classes(&[label]))
        .map(Some)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn weights(v: &[f64]) -> DomainWeights {
        DomainWeights::new(v.to_vec()).unwrap()
    }

    #[test]
    fn zero_network_is_uniform() {
        let cw = CoordinatorWeights::zeros(8, 4);
        let emb = Tensor::new([3, 8], (0..24).map(|i| i as f64).collect()).unwrap();
        let w = coordinate(&emb, &cw).unwrap();
        assert_eq!(w.w_hat, vec![0.25; 4]);
    }

    #[test]
    fn permutation_invariant() {
        let cw = CoordinatorWeights::init(1, 6, 3);
        let rows: Vec<Vec<f64>> = (0..5)
            .map(|i| (0..6).map(|j| ((i * 6 + j) as f64).sin()).collect())
            .collect();
        let a = coordinate(&Tensor::from_rows(&rows).unwrap(), &cw).unwrap();
        let mut rev = rows.clone();
        rev.reverse();
        let b = coordinate(&Tensor::from_rows(&rev).unwrap(), &cw).unwrap();
        for (x, y) in a.w_hat.iter().zip(&b.w_hat) {
            assert!((x - y).abs() < 1e-14);
        }
        assert!(coordinate(&Tensor::zeros([0, 6]), &cw).is_err());
    }

    #[test]
    fn selection_examples() {
        let hard = select_worker(&weights(&[0.1, 0.7, 0.1, 0.1]), 1, SelectionMode::Hard).unwrap();
        assert_eq!(hard.workers, vec![1]);
        let tie = select_worker(&weights(&[0.4, 0.4, 0.1, 0.1]), 1, SelectionMode::Hard).unwrap();
        assert_eq!(tie.workers, vec![0]);
        let blend =
            select_worker(&weights(&[0.5, 0.3, 0.15, 0.05]), 2, SelectionMode::Blend).unwrap();
        assert_eq!(blend.workers, vec![0, 1]);
        assert!(
            (blend.weights[0] - 0.625).abs() < 1e-15 && (blend.weights[1] - 0.375).abs() < 1e-15
        );
        assert!(select_worker(&weights(&[0.5, 0.5]), 3, SelectionMode::Blend).is_err());
        assert!(select_worker(&weights(&[0.5, 0.5]), 0, SelectionMode::Hard).is_err());
    }

    #[test]
    fn loss_examples() {
        let w = [1.0, 0.0, 0.0, 0.0];
        assert!(coordinator_loss(&weights(&w), &w).unwrap().abs() < 1e-15);
        let u = coordinator_loss(&weights(&[0.25; 4]), &[0.0, 0.0, 1.0, 0.0]).unwrap();
        assert!((u - 4f64.ln()).abs() < 1e-15);
        let l = coordinator_loss(&weights(&[0.7, 0.1, 0.1, 0.1]), &w).unwrap();
        assert!((l - 0.356_674_943_938_732_4).abs() < 1e-12);
        assert!(coordinator_loss(&weights(&[0.25; 4]), &[0.0; 4]).is_err());
    }
}
