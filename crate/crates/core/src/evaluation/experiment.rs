//! End-to-end orchestration: generate → pretrain → pseudo-label →
//! meta-train (TANO and baselines) → evaluate → report.

use std::path::Path;

use log::info;
use serde::{Deserialize, Serialize};

use crate::data::format::{write_dataset, write_json};
use crate::data::{generate_synthetic_domains, Dataset, GenerateConfig, Protocol};
use crate::error::{Result, TanoError};
use crate::normalization::VarianceBlend;
use crate::training::checkpoint::MultiModels;
use crate::training::{
    meta_train_loop, pretrain_backbone, save_pretrained, Checkpoint, Model, PretrainConfig,
    Pretrained, RunOptions, TrainConfig,
};

use super::{
    emit_analysis_report, evaluate_report, AnalysisConfig, AnalysisReport, EvalMode, EvalReport,
    EvalSettings, ModelSet,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub data: GenerateConfig,
    pub pretrain: PretrainConfig,
    /// TANO's meta-training; the baselines reuse it with one worker.
    pub train: TrainConfig,
    pub modes: Vec<EvalMode>,
    pub eval_episodes: usize,
    pub eval_seed: u64,
    pub blend_k: usize,
    pub blend_rule: VarianceBlend,
    pub analysis: Option<AnalysisConfig>,
}

impl ExperimentConfig {
    pub fn new(protocol: Protocol, seed: u64) -> Self {
        ExperimentConfig {
            data: GenerateConfig {
                seed,
                ..Default::default()
            },
            pretrain: PretrainConfig {
                seed,
                ..Default::default()
            },
            train: TrainConfig {
                seed,
                protocol,
                ..Default::default()
            },
            modes: default_modes(protocol),
            eval_episodes: 300,
            eval_seed: seed,
            blend_k: 0,
            blend_rule: VarianceBlend::Linear,
            analysis: None,
        }
    }

    pub fn eval_settings(&self) -> EvalSettings {
        EvalSettings {
            shape: self.train.shape,
            blend_k: self.blend_k,
            blend_rule: self.blend_rule,
            ..EvalSettings::new(self.train.protocol, self.eval_episodes, self.eval_seed)
        }
    }
}

/// Modes each protocol supports: everything within seen domains; no
/// single-domain models or oracle for a held-out domain.
pub fn default_modes(protocol: Protocol) -> Vec<EvalMode> {
    match protocol {
        Protocol::Out { .. } => vec![
            EvalMode::TanoHard,
            EvalMode::TanoBlend,
            EvalMode::Common,
            EvalMode::AdaBn,
        ],
        _ => vec![
            EvalMode::TanoHard,
            EvalMode::TanoBlend,
            EvalMode::Common,
            EvalMode::Multi,
            EvalMode::AdaBn,
        ],
    }
}

pub struct ExperimentResult {
    pub pretrained: Pretrained,
    pub models: ModelSet,
    pub report: EvalReport,
    pub analysis: Option<AnalysisReport>,
}

/// Single-worker (common-model) variant of a training configuration.
pub fn common_config(train: &TrainConfig) -> TrainConfig {
    TrainConfig {
        num_workers: 1,
        pseudo_labels: false,
        ..train.clone()
    }
}

pub fn train_model(
    dataset: &Dataset,
    pretrained: &Pretrained,
    config: &TrainConfig,
    out: Option<&Path>,
) -> Result<Checkpoint> {
    let r = config.effective_workers(dataset.num_domains())?;
    let init = Model::from_pretrained(
        &pretrained.encoder,
        &pretrained.global,
        r,
        config.seed,
        config.epsilon,
        config.momentum,
    )?;
    let options = RunOptions {
        out: out.map(Path::to_path_buf),
        ..Default::default()
    };
    meta_train_loop(dataset, &init, config, &options)
}

/// One single-domain model per training domain of `train`, each initialised
/// from the same pretrained backbone.
pub fn train_multi(
    dataset: &Dataset,
    pretrained: &Pretrained,
    train: &TrainConfig,
    out: Option<&Path>,
) -> Result<MultiModels> {
    let domains = train.train_domains(dataset.num_domains())?;
    let mut members = Vec::with_capacity(domains.len());
    for &d in &domains {
        info!("training the single-domain model of domain {d}");
        let cfg = TrainConfig {
            protocol: Protocol::Standard { domain: d },
            ..common_config(train)
        };
        members.push(train_model(dataset, pretrained, &cfg, None)?);
    }
    let multi = MultiModels { domains, members };
    if let Some(dir) = out {
        multi.save(dir)?;
    }
    Ok(multi)
}

/// Runs every stage; with `out`, writes the dataset, checkpoints,
/// `report.json`, `report.txt` and (if configured) `analysis.json`.
pub fn run_experiment(
    config: &ExperimentConfig,
    dataset: Option<Dataset>,
    out: Option<&Path>,
) -> Result<ExperimentResult> {
    let seed = config.train.seed;
    let stage = |name: &'static str| move |e: TanoError| e.in_stage(name, seed);
    let dataset = match dataset {
        Some(d) => d,
        None => generate_synthetic_domains(&config.data).map_err(stage("generate"))?,
    };
    if let Some(dir) = out {
        write_dataset(&dataset, &dir.join("data")).map_err(stage("generate"))?;
        write_json(&dir.join("experiment.json"), config).map_err(stage("generate"))?;
    }
    let train_domains = config
        .train
        .train_domains(dataset.num_domains())
        .map_err(stage("pretrain"))?;
    let pretrain_cfg = PretrainConfig {
        domains: train_domains,
        ..config.pretrain.clone()
    };
    let pretrained = pretrain_backbone(&dataset, &pretrain_cfg).map_err(stage("pretrain"))?;
    let ckpt_dir = out.map(|d| d.join("checkpoints"));
    if let Some(dir) = &ckpt_dir {
        save_pretrained(&pretrained, &dir.join("pretrained")).map_err(stage("pretrain"))?;
    }

    let needs = |modes: &[EvalMode]| config.modes.iter().any(|m| modes.contains(m));
    let mut models = ModelSet::default();
    if needs(&[
        EvalMode::TanoHard,
        EvalMode::TanoBlend,
        EvalMode::TanoOracle,
    ]) {
        let dir = ckpt_dir.as_ref().map(|d| d.join("tano"));
        models.tano = Some(
            train_model(&dataset, &pretrained, &config.train, dir.as_deref())
                .map_err(stage("meta-train tano"))?,
        );
    }
    if needs(&[EvalMode::Common, EvalMode::AdaBn]) {
        let cfg = common_config(&config.train);
        let same_as_tano = models.tano.as_ref().filter(|t| {
            t.model.num_domains() == 1 && t.config().is_some_and(|c| common_config(c) == cfg)
        });
        models.common = match same_as_tano {
            Some(t) => Some(t.clone()),
            None => {
                let dir = ckpt_dir.as_ref().map(|d| d.join("common"));
                Some(
                    train_model(&dataset, &pretrained, &cfg, dir.as_deref())
                        .map_err(stage("meta-train common"))?,
                )
            }
        };
    }
    if needs(&[EvalMode::Multi]) {
        let dir = ckpt_dir.as_ref().map(|d| d.join("multi"));
        models.multi = Some(
            train_multi(&dataset, &pretrained, &config.train, dir.as_deref())
                .map_err(stage("meta-train multi"))?,
        );
    }

    let report = evaluate_report(&models, &dataset, &config.modes, &config.eval_settings())
        .map_err(stage("evaluate"))?;
    info!("\n{}", report.to_table());
    let analysis = match (&config.analysis, &models.tano) {
        (Some(a), Some(t)) => Some(emit_analysis_report(t, &dataset, a).map_err(stage("analyze"))?),
        _ => None,
    };
    if let Some(dir) = out {
        write_json(&dir.join("report.json"), &report).map_err(stage("report"))?;
        crate::data::format::write_file(&dir.join("report.txt"), report.to_table().as_bytes())
            .map_err(stage("report"))?;
        if let Some(a) = &analysis {
            write_json(&dir.join("analysis.json"), a).map_err(stage("report"))?;
        }
    }
    Ok(ExperimentResult {
        pretrained,
        models,
        report,
        analysis,
    })
}
