use std::sync::OnceLock;

use tano_core::data::{generate_synthetic_domains, Dataset, GenerateConfig, Protocol};
use tano_core::evaluation::experiment::{common_config, train_model};
use tano_core::evaluation::{
    emit_analysis_report, evaluate_episodes, run_experiment, AnalysisConfig, EvalMode,
    EvalSettings, ExperimentConfig, ModelSet,
};
use tano_core::training::checkpoint::model_hash;
use tano_core::training::{pretrain_backbone, PretrainConfig, Pretrained, TrainConfig};

fn dataset() -> &'static Dataset {
    static DATA: OnceLock<Dataset> = OnceLock::new();
    DATA.get_or_init(|| {
        generate_synthetic_domains(&GenerateConfig {
            per_class: 20,
            seed: 8,
            ..Default::default()
        })
        .unwrap()
    })
}

fn pretrained() -> &'static Pretrained {
    static PRE: OnceLock<Pretrained> = OnceLock::new();
    PRE.get_or_init(|| {
        pretrain_backbone(
            dataset(),
            &PretrainConfig {
                epochs: 3,
                seed: 8,
                ..Default::default()
            },
        )
        .unwrap()
    })
}

fn tiny(protocol: Protocol) -> TrainConfig {
    TrainConfig {
        lr0: 0.01,
        epochs: 2,
        episodes_per_epoch: 20,
        val_episodes: 10,
        seed: 8,
        protocol,
        ..Default::default()
    }
}

#[test]
fn single_worker_tano_is_the_common_model() {
    let protocol = Protocol::Standard { domain: 1 };
    let tano = train_model(dataset(), pretrained(), &tiny(protocol), None).unwrap();
    let common = train_model(
        dataset(),
        pretrained(),
        &common_config(&tiny(protocol)),
        None,
    )
    .unwrap();
    assert_eq!(tano.model.num_domains(), 1);
    assert_eq!(model_hash(&tano.model), model_hash(&common.model));

    let models = ModelSet {
        tano: Some(tano),
        common: Some(common),
        multi: None,
    };
    let settings = EvalSettings::new(protocol, 40, 1);
    let hard = evaluate_episodes(&models, dataset(), EvalMode::TanoHard, &settings).unwrap();
    let plain = evaluate_episodes(&models, dataset(), EvalMode::Common, &settings).unwrap();
    assert_eq!(hard.episode_accuracies, plain.episode_accuracies);
}

#[test]
fn standard_protocol_runs_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = ExperimentConfig::new(Protocol::Standard { domain: 2 }, 4);
    config.data.per_class = 20;
    config.pretrain.epochs = 2;
    config.train = TrainConfig {
        seed: 4,
        ..tiny(Protocol::Standard { domain: 2 })
    };
    config.eval_episodes = 40;
    let result = run_experiment(&config, None, Some(dir.path())).unwrap();
    for file in [
        "report.json",
        "report.txt",
        "experiment.json",
        "data/manifest.json",
        "checkpoints/tano/manifest.json",
    ] {
        assert!(dir.path().join(file).is_file(), "{file} missing");
    }
    let row = result.report.row(EvalMode::TanoHard).unwrap();
    assert!(row.per_domain.iter().all(|d| d.domain == 2));
    assert!(row.mean - row.ci95 > 20.0, "{} ± {}", row.mean, row.ci95);
}

#[test]
fn analysis_report_is_consistent() {
    let ckpt = train_model(dataset(), pretrained(), &tiny(Protocol::Intra), None).unwrap();
    let config = AnalysisConfig {
        images_per_domain: 32,
        episodes: 8,
        seed: 2,
        ..Default::default()
    };
    let report = emit_analysis_report(&ckpt, dataset(), &config).unwrap();
    assert_eq!(report.domains, vec![0, 1, 2, 3]);
    let mut workers = report.matched_workers.clone();
    workers.sort_unstable();
    workers.dedup();
    assert_eq!(
        workers.len(),
        4,
        "domains share a worker: {:?}",
        report.matched_workers
    );
    // Three layers for each matched worker plus the global one.
    assert_eq!(report.residuals.len(), 3 * 5);
    assert!(report.max_relative_identity() < 1e-10);
    assert_eq!(report.swaps.len(), 12);
    for s in &report.swaps {
        assert!((0.0..=100.0).contains(&s.matched) && (0.0..=100.0).contains(&s.swapped));
    }
    for stats in [&report.global_stats, &report.matched_stats] {
        assert_eq!(stats.len(), 3);
        assert!(stats
            .iter()
            .all(|l| l.pre_mean.len() == 4 && l.cross_domain_gap >= 0.0));
    }
    // Both routings see the same conv inputs at the first layer.
    assert_eq!(
        report.global_stats[0].pre_mean,
        report.matched_stats[0].pre_mean
    );
    assert_eq!(
        emit_analysis_report(&ckpt, dataset(), &config).unwrap(),
        report
    );
}
