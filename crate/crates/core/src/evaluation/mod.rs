//! Episodic evaluation: inference modes, confidence intervals, reports.

pub mod analysis;
pub mod experiment;

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::coordinator::{coordinate, select_worker, DomainWeights, SelectionMode};
use crate::data::{sample_episode, Dataset, Episode, EpisodeShape, Phase, Protocol, Split};
use crate::encoder::{encode, encode_traced};
use crate::error::{Result, TanoError};
use crate::metric::{accuracy, classify_query, compute_prototypes};
use crate::normalization::{adabn_adapt, blend_workers, BnMode, GroupWorker, VarianceBlend};
use crate::rng::{rng_for, stream};
use crate::training::checkpoint::MultiModels;
use crate::training::{model_hash, Checkpoint, Model};

pub use analysis::{emit_analysis_report, AnalysisConfig, AnalysisReport};
pub use experiment::{run_experiment, ExperimentConfig, ExperimentResult};

/// How the second forward pass picks its BN worker.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum InferenceMode {
    /// Coordinator argmax.
    Hard,
    /// Coordinator top-`k` blend of the domain workers.
    Blend { k: usize, rule: VarianceBlend },
    /// A fixed domain worker, bypassing the coordinator.
    Forced(usize),
    /// The global worker only.
    Global,
    /// The global worker with running statistics re-estimated on the
    /// episode's support ∪ query images.
    AdaBn,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Inference {
    /// Query accuracy in percent.
    pub accuracy: f64,
    pub domain_weights: Option<DomainWeights>,
}

/// Coordinator output for a support set, embedded with the global worker.
pub fn route(model: &Model, support_images: &crate::tensor::Tensor) -> Result<DomainWeights> {
    let (emb, _) = encode(
        support_images,
        &model.encoder,
        model.bank.global(),
        BnMode::Eval,
    )?;
    coordinate(&emb, &model.coordinator)
}

/// Prototype classification of the episode's queries with one worker in eval mode.
pub fn accuracy_with_worker(model: &Model, worker: &GroupWorker, episode: &Episode) -> Result<f64> {
    let shape = episode.shape;
    let (emb, _) = encode(
        &episode.pooled_images(),
        &model.encoder,
        worker,
        BnMode::Eval,
    )?;
    let support = emb.slice_rows(0, shape.support_len())?;
    let query = emb.slice_rows(shape.support_len(), shape.support_len() + shape.query_len())?;
    let protos = compute_prototypes(&support, &episode.support_labels, shape.n_way, shape.n_shot)?;
    accuracy(&classify_query(&query, &protos)?, &episode.query_labels)
}

/// Re-estimates every BN layer's running statistics on `images`, layer by
/// layer (each layer sees inputs normalized by the already-adapted layers).
pub fn adapt_worker(
    model: &Model,
    worker: &GroupWorker,
    images: &crate::tensor::Tensor,
) -> Result<GroupWorker> {
    let (_, trace) = encode_traced(images, &model.encoder, worker, BnMode::Train)?;
    let layers = worker
        .layers
        .iter()
        .zip(&trace.pre_bn)
        .map(|(l, z)| adabn_adapt(l, z))
        .collect::<Result<Vec<_>>>()?;
    Ok(GroupWorker {
        index: worker.index,
        layers,
    })
}

pub fn infer_episode(model: &Model, episode: &Episode, mode: InferenceMode) -> Result<Inference> {
    let (worker, weights) = match mode {
        InferenceMode::Hard => {
            let w = route(model, &episode.support_images)?;
            (model.bank.worker(w.argmax())?.clone(), Some(w))
        }
        InferenceMode::Blend { k, rule } => {
            let w = route(model, &episode.support_images)?;
            let sel = select_worker(&w, k, SelectionMode::Blend)?;
            let blended =
                blend_workers(&model.bank, &sel.dense_weights(model.num_domains()), rule)?;
            (blended, Some(w))
        }
        InferenceMode::Forced(r) => {
            if r >= model.num_domains() {
                return Err(TanoError::invalid(format!(
                    "forced worker {r} outside {} workers",
                    model.num_domains()
                )));
            }
            (model.bank.workers[r].clone(), None)
        }
        InferenceMode::Global => (model.bank.global().clone(), None),
        InferenceMode::AdaBn => (
            adapt_worker(model, model.bank.global(), &episode.pooled_images())?,
            None,
        ),
    };
    Ok(Inference {
        accuracy: accuracy_with_worker(model, &worker, episode)?,
        domain_weights: weights,
    })
}

/// Mean and 95% normal-approximation half-width, `1.96·s/√n` with the
/// sample standard deviation.
pub fn confidence_interval(values: &[f64]) -> Result<(f64, f64)> {
    let n = values.len();
    if n < 2 {
        return Err(TanoError::invalid(format!(
            "a confidence interval needs >= 2 values, got {n}"
        )));
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    Ok((mean, 1.96 * var.sqrt() / (n as f64).sqrt()))
}

/// Report rows always appear in this order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvalMode {
    TanoHard,
    TanoBlend,
    Common,
    Multi,
    AdaBn,
    /// TANO with the coordinator replaced by the true domain's worker.
    TanoOracle,
}

impl EvalMode {
    pub const ALL: [EvalMode; 6] = [
        EvalMode::TanoHard,
        EvalMode::TanoBlend,
        EvalMode::Common,
        EvalMode::Multi,
        EvalMode::AdaBn,
        EvalMode::TanoOracle,
    ];

    pub fn name(self) -> &'static str {
        match self {
            EvalMode::TanoHard => "tano-hard",
            EvalMode::TanoBlend => "tano-blend",
            EvalMode::Common => "common",
            EvalMode::Multi => "multi",
            EvalMode::AdaBn => "adabn",
            EvalMode::TanoOracle => "tano-oracle",
        }
    }

    pub fn parse(s: &str) -> Result<EvalMode> {
        EvalMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| TanoError::invalid(format!("unknown evaluation mode `{s}`")))
    }
}

/// The models an evaluation may draw on; each mode needs one of them.
#[derive(Clone, Debug, Default)]
pub struct ModelSet {
    pub tano: Option<Checkpoint>,
    pub common: Option<Checkpoint>,
    pub multi: Option<MultiModels>,
}

impl ModelSet {
    fn tano(&self) -> Result<&Checkpoint> {
        self.tano
            .as_ref()
            .ok_or_else(|| TanoError::invalid("this mode needs a TANO checkpoint"))
    }

    fn common(&self) -> Result<&Checkpoint> {
        self.common
            .as_ref()
            .ok_or_else(|| TanoError::invalid("this mode needs a common-model checkpoint"))
    }

    fn multi(&self) -> Result<&MultiModels> {
        self.multi
            .as_ref()
            .ok_or_else(|| TanoError::invalid("this mode needs a multi-model checkpoint"))
    }

    /// Parameter hashes of every model present, for the report's config hash.
    pub fn hashes(&self) -> Vec<String> {
        let mut out = Vec::new();
        out.extend(self.tano.iter().map(|c| model_hash(&c.model)));
        out.extend(self.common.iter().map(|c| model_hash(&c.model)));
        if let Some(m) = &self.multi {
            out.extend(m.members.iter().map(|c| model_hash(&c.model)));
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSettings {
    pub protocol: Protocol,
    pub shape: EpisodeShape,
    pub episodes: usize,
    pub seed: u64,
    /// Workers blended in `tano-blend`; 0 means all of them.
    pub blend_k: usize,
    pub blend_rule: VarianceBlend,
}

impl EvalSettings {
    pub fn new(protocol: Protocol, episodes: usize, seed: u64) -> Self {
        EvalSettings {
            protocol,
            shape: EpisodeShape::new(5, 1, 15),
            episodes,
            seed,
            blend_k: 0,
            blend_rule: VarianceBlend::Linear,
        }
    }
}

/// Test episode `index`; every mode sees the same episodes for a given seed.
pub fn test_episode(dataset: &Dataset, settings: &EvalSettings, index: usize) -> Result<Episode> {
    let mut rng = rng_for(settings.seed, stream::EVALUATION, index as u64);
    sample_episode(
        dataset,
        Split::Novel,
        settings.protocol,
        Phase::Test,
        settings.shape,
        &mut rng,
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainStat {
    pub domain: usize,
    pub episodes: usize,
    pub mean: f64,
    pub ci95: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub mode: EvalMode,
    pub per_domain: Vec<DomainStat>,
    pub mean: f64,
    pub ci95: f64,
    /// Percentage of episodes whose coordinator argmax picked the domain's
    /// own worker (TANO modes on seen domains only).
    pub coordinator_accuracy: Option<f64>,
    pub episode_domains: Vec<usize>,
    pub episode_accuracies: Vec<f64>,
}

impl EvalRow {
    fn from_episodes(
        mode: EvalMode,
        domains: Vec<usize>,
        accs: Vec<f64>,
        coordinator_accuracy: Option<f64>,
    ) -> Result<EvalRow> {
        let (mean, ci95) = confidence_interval(&accs)?;
        let mut ids = domains.clone();
        ids.sort_unstable();
        ids.dedup();
        let per_domain = ids
            .into_iter()
            .map(|d| {
                let v: Vec<f64> = domains
                    .iter()
                    .zip(&accs)
                    .filter(|(x, _)| **x == d)
                    .map(|(_, a)| *a)
                    .collect();
                let (mean, ci95) = if v.len() >= 2 {
                    confidence_interval(&v)?
                } else {
                    (v[0], f64::NAN)
                };
                Ok(DomainStat {
                    domain: d,
                    episodes: v.len(),
                    mean,
                    ci95,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(EvalRow {
            mode,
            per_domain,
            mean,
            ci95,
            coordinator_accuracy,
            episode_domains: domains,
            episode_accuracies: accs,
        })
    }
}

/// Evaluates `mode` on `settings.episodes` novel-class test episodes.
/// Episodes run in parallel; results are ordered by episode index.
pub fn evaluate_episodes(
    models: &ModelSet,
    dataset: &Dataset,
    mode: EvalMode,
    settings: &EvalSettings,
) -> Result<EvalRow> {
    settings
        .protocol
        .domains(dataset.num_domains(), Phase::Test)?;
    if let Protocol::Out { .. } = settings.protocol {
        if mode == EvalMode::Multi || mode == EvalMode::TanoOracle {
            return Err(TanoError::invalid(format!(
                "{} needs a model of the test domain, which the out-of-domain protocol holds out",
                mode.name()
            )));
        }
    }
    let outcomes: Vec<(usize, f64, Option<bool>)> = (0..settings.episodes)
        .into_par_iter()
        .map(|i| {
            let ep = test_episode(dataset, settings, i)?;
            evaluate_one(models, &ep, mode, settings).map(|(a, hit)| (ep.domain, a, hit))
        })
        .collect::<Result<Vec<_>>>()?;
    let hits: Vec<bool> = outcomes.iter().filter_map(|o| o.2).collect();
    let coordinator_accuracy = (!hits.is_empty())
        .then(|| 100.0 * hits.iter().filter(|h| **h).count() as f64 / hits.len() as f64);
    EvalRow::from_episodes(
        mode,
        outcomes.iter().map(|o| o.0).collect(),
        outcomes.iter().map(|o| o.1).collect(),
        coordinator_accuracy,
    )
}

fn evaluate_one(
    models: &ModelSet,
    ep: &Episode,
    mode: EvalMode,
    settings: &EvalSettings,
) -> Result<(f64, Option<bool>)> {
    let expected_worker =
        |ckpt: &Checkpoint| ckpt.state().and_then(|s| s.worker_for_domain(ep.domain));
    match mode {
        EvalMode::TanoHard | EvalMode::TanoBlend => {
            let ckpt = models.tano()?;
            let m = &ckpt.model;
            let inference = if mode == EvalMode::TanoHard {
                InferenceMode::Hard
            } else {
                let k = if settings.blend_k == 0 {
                    m.num_domains()
                } else {
                    settings.blend_k
                };
                InferenceMode::Blend {
                    k,
                    rule: settings.blend_rule,
                }
            };
            let out = infer_episode(m, ep, inference)?;
            let hit = expected_worker(ckpt)
                .zip(out.domain_weights.as_ref())
                .map(|(r, w)| w.argmax() == r);
            Ok((out.accuracy, hit))
        }
        EvalMode::TanoOracle => {
            let ckpt = models.tano()?;
            let r = expected_worker(ckpt).ok_or_else(|| {
                TanoError::invalid(format!("domain {} has no trained worker", ep.domain))
            })?;
            Ok((
                infer_episode(&ckpt.model, ep, InferenceMode::Forced(r))?.accuracy,
                None,
            ))
        }
        EvalMode::Common => Ok((
            infer_episode(&models.common()?.model, ep, InferenceMode::Global)?.accuracy,
            None,
        )),
        EvalMode::AdaBn => Ok((
            infer_episode(&models.common()?.model, ep, InferenceMode::AdaBn)?.accuracy,
            None,
        )),
        EvalMode::Multi => {
            let m = models.multi()?.model_for(ep.domain)?;
            Ok((infer_episode(m, ep, InferenceMode::Global)?.accuracy, None))
        }
    }
}

/// Accuracy of every single-domain model on every domain, plus TANO per domain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrossDomainMatrix {
    pub domains: Vec<usize>,
    /// `accuracy[i][j]`: model of `domains[i]` on test episodes of `domains[j]`.
    pub accuracy: Vec<Vec<f64>>,
    pub ci95: Vec<Vec<f64>>,
    /// TANO-hard on the same episodes of each domain, when available.
    pub tano: Option<Vec<f64>>,
}

pub fn cross_domain_matrix(
    models: &ModelSet,
    dataset: &Dataset,
    base: &EvalSettings,
) -> Result<CrossDomainMatrix> {
    let multi = models.multi()?;
    let mut accuracy = Vec::new();
    let mut ci95 = Vec::new();
    let single = |models: &ModelSet, mode: EvalMode, d: usize| {
        let s = EvalSettings {
            protocol: Protocol::Standard { domain: d },
            ..base.clone()
        };
        evaluate_episodes(models, dataset, mode, &s)
    };
    for member in &multi.members {
        let as_common = ModelSet {
            common: Some(member.clone()),
            ..Default::default()
        };
        let mut row = Vec::new();
        let mut row_ci = Vec::new();
        for &d in &multi.domains {
            let r = single(&as_common, EvalMode::Common, d)?;
            row.push(r.mean);
            row_ci.push(r.ci95);
        }
        accuracy.push(row);
        ci95.push(row_ci);
    }
    let tano = match &models.tano {
        Some(_) => Some(
            multi
                .domains
                .iter()
                .map(|&d| single(models, EvalMode::TanoHard, d).map(|r| r.mean))
                .collect::<Result<Vec<_>>>()?,
        ),
        None => None,
    };
    Ok(CrossDomainMatrix {
        domains: multi.domains.clone(),
        accuracy,
        ci95,
        tano,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub protocol: Protocol,
    pub settings: EvalSettings,
    pub config_hash: String,
    pub rows: Vec<EvalRow>,
    pub cross_domain: Option<CrossDomainMatrix>,
}

impl EvalReport {
    pub fn row(&self, mode: EvalMode) -> Option<&EvalRow> {
        self.rows.iter().find(|r| r.mode == mode)
    }

    /// SHA-256 of the report's JSON form.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(
            serde_json::to_vec(self).expect("report serializes"),
        ))
    }

    /// Aligned plain-text table: one row per mode, one column per domain, then the mean.
    pub fn to_table(&self) -> String {
        let mut domains: Vec<usize> = self
            .rows
            .iter()
            .flat_map(|r| r.per_domain.iter().map(|d| d.domain))
            .collect();
        domains.sort_unstable();
        domains.dedup();
        let mut out = String::new();
        let _ = writeln!(
            out,
            "protocol {} | {} episodes | seed {}",
            self.protocol, self.settings.episodes, self.settings.seed
        );
        let _ = write!(out, "{:<12}", "mode");
        for d in &domains {
            let _ = write!(out, "{:>16}", format!("D{d}"));
        }
        let _ = writeln!(out, "{:>16}{:>8}", "mean", "coord");
        for row in &self.rows {
            let _ = write!(out, "{:<12}", row.mode.name());
            for d in &domains {
                let cell = row
                    .per_domain
                    .iter()
                    .find(|s| s.domain == *d)
                    .map_or("-".to_string(), |s| format!("{:.2}±{:.2}", s.mean, s.ci95));
                let _ = write!(out, "{cell:>16}");
            }
            let coord = row
                .coordinator_accuracy
                .map_or("-".to_string(), |c| format!("{c:.1}"));
            let _ = writeln!(
                out,
                "{:>16}{coord:>8}",
                format!("{:.2}±{:.2}", row.mean, row.ci95)
            );
        }
        if let Some(m) = &self.cross_domain {
            let _ = writeln!(
                out,
                "\ncross-domain (row: model's domain, column: test domain)"
            );
            let _ = write!(out, "{:<12}", "");
            for d in &m.domains {
                let _ = write!(out, "{:>10}", format!("D{d}"));
            }
            let _ = writeln!(out);
            for (i, row) in m.accuracy.iter().enumerate() {
                let _ = write!(out, "{:<12}", format!("multi D{}", m.domains[i]));
                for v in row {
                    let _ = write!(out, "{v:>10.2}");
                }
                let _ = writeln!(out);
            }
            if let Some(t) = &m.tano {
                let _ = write!(out, "{:<12}", "tano-hard");
                for v in t {
                    let _ = write!(out, "{v:>10.2}");
                }
                let _ = writeln!(out);
            }
        }
        out
    }
}

/// Evaluates `modes` (reported in [`EvalMode::ALL`] order) and, when
/// `multi` is among them and single-domain models exist, the cross-domain matrix.
pub fn evaluate_report(
    models: &ModelSet,
    dataset: &Dataset,
    modes: &[EvalMode],
    settings: &EvalSettings,
) -> Result<EvalReport> {
    let mut ordered: Vec<EvalMode> = modes.to_vec();
    ordered.sort();
    ordered.dedup();
    let rows = ordered
        .iter()
        .map(|&m| evaluate_episodes(models, dataset, m, settings))
        .collect::<Result<Vec<_>>>()?;
    let cross_domain = if ordered.contains(&EvalMode::Multi) {
        Some(cross_domain_matrix(models, dataset, settings)?)
    } else {
        None
    };
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(settings).expect("settings serialize"));
    h.update(serde_json::to_vec(&ordered).expect("modes serialize"));
    for m in models.hashes() {
        h.update(m.as_bytes());
    }
    Ok(EvalReport {
        protocol: settings.protocol,
        settings: settings.clone(),
        config_hash: hex::encode(h.finalize()),
        rows,
        cross_domain,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn interval_examples() {
        let (m, h) = confidence_interval(&[0.7; 10]).unwrap();
        assert!((m - 0.7).abs() < 1e-15 && h < 1e-15, "{m} {h}");
        let (m, h) = confidence_interval(&[0.0, 1.0]).unwrap();
        assert_eq!(m, 0.5);
        assert!((h - 1.96 * 0.5f64.sqrt() / 2f64.sqrt()).abs() < 1e-12);
        assert!((h - 0.98).abs() < 1e-3);
        assert!(confidence_interval(&[1.0]).is_err());
    }

    #[test]
    fn interval_shrinks_with_root_n() {
        let base = [0.2, 0.4, 0.9, 0.1];
        let big: Vec<f64> = base.iter().cycle().take(16).copied().collect();
        let (_, h4) = confidence_interval(&base).unwrap();
        let (_, h16) = confidence_interval(&big).unwrap();
        // Same population spread; the sample std differs only via n-1.
        let s4 = h4 * 2.0 / 1.96;
        let s16 = h16 * 4.0 / 1.96;
        let expected = h4 / 2.0 * (s16 / s4);
        assert!((h16 - expected).abs() < 1e-12);
    }

    #[test]
    fn mode_names_round_trip() {
        for m in EvalMode::ALL {
            assert_eq!(EvalMode::parse(m.name()).unwrap(), m);
        }
        assert!(EvalMode::parse("bogus").is_err());
    }
}
