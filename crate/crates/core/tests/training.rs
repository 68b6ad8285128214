use tano_core::data::{
    sample_episode, Dataset, EpisodeShape, GenerateConfig, Phase, Protocol, Split,
};
use tano_core::rng::rng_for;
use tano_core::training::checkpoint::model_hash;
use tano_core::training::meta::{meta_train_step, training_episode};
use tano_core::training::{
    hash_dir, load_pretrained, meta_train_loop, pretrain_backbone, save_pretrained, Checkpoint,
    Model, PretrainConfig, RunOptions, TrainConfig,
};
use tano_core::{TanoError, Tensor};

fn dataset() -> Dataset {
    tano_core::data::generate_synthetic_domains(&GenerateConfig {
        per_class: 20,
        seed: 5,
        ..Default::default()
    })
    .unwrap()
}

fn episode(data: &Dataset, index: u64) -> tano_core::data::Episode {
    let mut rng = rng_for(9, 0, index);
    sample_episode(
        data,
        Split::Base,
        Protocol::Intra,
        Phase::Train,
        EpisodeShape::new(5, 1, 15),
        &mut rng,
    )
    .unwrap()
}

fn hash_of(tensors: &[(String, Tensor)], prefix: &str) -> Vec<(String, Vec<u64>)> {
    tensors
        .iter()
        .filter(|(n, _)| n.starts_with(prefix))
        .map(|(n, t)| (n.clone(), t.data().iter().map(|v| v.to_bits()).collect()))
        .collect()
}

#[test]
fn small_step_descends_on_its_own_episode() {
    let data = dataset();
    let ep = episode(&data, 1);
    let mut model = Model::random(4, 4).unwrap();
    let before = meta_train_step(&mut model.clone(), &ep, 2, 0.0, 1.0, 1.0)
        .unwrap()
        .loss;
    meta_train_step(&mut model, &ep, 2, 1e-4, 1.0, 1.0).unwrap();
    let after = meta_train_step(&mut model.clone(), &ep, 2, 0.0, 1.0, 1.0)
        .unwrap()
        .loss;
    assert!(after < before, "{after} !< {before}");
}

#[test]
fn a_step_touches_only_its_parameters() {
    let data = dataset();
    let ep = episode(&data, 2);
    let mut model = Model::random(5, 4).unwrap();
    let before = model.named_tensors();
    meta_train_step(&mut model, &ep, 1, 0.05, 1.0, 1.0).unwrap();
    let after = model.named_tensors();
    for untouched in [
        "worker0.",
        "worker2.",
        "worker3.",
        "worker4.bn0.running",
        "worker4.bn1.running",
        "worker4.bn2.running",
    ] {
        assert_eq!(
            hash_of(&before, untouched),
            hash_of(&after, untouched),
            "{untouched} changed"
        );
    }
    for touched in [
        "encoder.",
        "coordinator.",
        "worker1.",
        "worker4.bn0.gamma",
        "worker4.bn2.beta",
    ] {
        let (b, a) = (hash_of(&before, touched), hash_of(&after, touched));
        for ((name, x), (_, y)) in b.iter().zip(&a) {
            // Each tensor under these prefixes moves (running stats included for the label worker).
            assert_ne!(x, y, "{name} did not change");
        }
    }
}

#[test]
fn single_worker_step_keeps_worker_and_global_identical() {
    let data = dataset();
    let mut model = Model::random(6, 1).unwrap();
    for i in 0..3 {
        meta_train_step(&mut model, &episode(&data, i), 0, 0.05, 1.0, 1.0).unwrap();
    }
    assert_eq!(model.bank.workers[0].layers, model.bank.global().layers);
    assert_ne!(
        model.bank.global().layers,
        Model::random(6, 1).unwrap().bank.global().layers
    );
}

#[test]
fn non_finite_loss_aborts_with_replay_info() {
    let data = dataset();
    let mut ep = episode(&data, 3);
    ep.query_images.data_mut()[0] = f64::NAN;
    let mut model = Model::random(7, 4).unwrap();
    let err = meta_train_step(&mut model, &ep, 0, 0.01, 1.0, 1.0).unwrap_err();
    assert!(
        matches!(err, TanoError::Numeric(ref m) if m.contains("\"support\"")),
        "{err}"
    );
    assert_eq!(err.exit_code(), 3);
}

fn quick_pretrain(data: &Dataset, seed: u64) -> tano_core::training::Pretrained {
    pretrain_backbone(
        data,
        &PretrainConfig {
            epochs: 5,
            lr: 0.01,
            seed,
            ..Default::default()
        },
    )
    .unwrap()
}

#[test]
fn pretraining_learns_and_is_seeded() {
    let data = dataset();
    let a = quick_pretrain(&data, 1);
    let losses: Vec<f64> = a.history.iter().map(|h| h.mean_loss).collect();
    assert!(losses.windows(2).all(|w| w[1] < w[0]), "{losses:?}");
    let chance = 100.0 / a.joint_classes as f64;
    assert_eq!(a.joint_classes, 40);
    assert!(a.history.last().unwrap().accuracy > 2.0 * chance);
    assert_eq!(a, quick_pretrain(&data, 1));

    let dir = tempfile::tempdir().unwrap();
    save_pretrained(&a, dir.path()).unwrap();
    assert_eq!(load_pretrained(dir.path()).unwrap(), a);
}

fn tiny_config() -> TrainConfig {
    TrainConfig {
        epochs: 3,
        episodes_per_epoch: 4,
        val_episodes: 4,
        lr0: 0.01,
        seed: 11,
        ..Default::default()
    }
}

fn init_model(data: &Dataset, config: &TrainConfig) -> Model {
    let p = quick_pretrain(data, 2);
    let r = config.effective_workers(data.num_domains()).unwrap();
    Model::from_pretrained(
        &p.encoder,
        &p.global,
        r,
        config.seed,
        config.epsilon,
        config.momentum,
    )
    .unwrap()
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let data = dataset();
    let config = tiny_config();
    let init = init_model(&data, &config);

    let full_dir = tempfile::tempdir().unwrap();
    let full = meta_train_loop(
        &data,
        &init,
        &config,
        &RunOptions {
            out: Some(full_dir.path().to_path_buf()),
            ..Default::default()
        },
    )
    .unwrap();

    let split_dir = tempfile::tempdir().unwrap();
    let mut options = RunOptions {
        out: Some(split_dir.path().to_path_buf()),
        stop_after: Some(1),
        ..Default::default()
    };
    let partial = meta_train_loop(&data, &init, &config, &options).unwrap();
    assert_eq!(partial.state().unwrap().epoch, 1);
    options.stop_after = None;
    options.resume = true;
    let resumed = meta_train_loop(&data, &init, &config, &options).unwrap();

    assert_eq!(resumed, full);
    assert_eq!(model_hash(&resumed.model), model_hash(&full.model));
    assert_eq!(
        hash_dir(split_dir.path()).unwrap(),
        hash_dir(full_dir.path()).unwrap()
    );
    assert_eq!(Checkpoint::load(full_dir.path()).unwrap(), full);
    assert!(full.state().unwrap().pseudo.is_some());
}

#[test]
fn identical_runs_hash_identically() {
    let data = dataset();
    let config = TrainConfig {
        epochs: 1,
        ..tiny_config()
    };
    let init = init_model(&data, &config);
    let run = || {
        let dir = tempfile::tempdir().unwrap();
        let options = RunOptions {
            out: Some(dir.path().to_path_buf()),
            ..Default::default()
        };
        meta_train_loop(&data, &init, &config, &options).unwrap();
        hash_dir(dir.path()).unwrap()
    };
    assert_eq!(run(), run());
}

#[test]
fn corrupted_checkpoint_is_rejected() {
    let data = dataset();
    let config = TrainConfig {
        epochs: 1,
        pseudo_labels: false,
        ..tiny_config()
    };
    let init = init_model(&data, &config);
    let dir = tempfile::tempdir().unwrap();
    let options = RunOptions {
        out: Some(dir.path().to_path_buf()),
        ..Default::default()
    };
    meta_train_loop(&data, &init, &config, &options).unwrap();

    let blob = dir.path().join("params").join("coordinator.w1.tano");
    let mut bytes = std::fs::read(&blob).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 0x40;
    std::fs::write(&blob, &bytes).unwrap();
    let err = Checkpoint::load(dir.path()).unwrap_err();
    assert!(matches!(err, TanoError::Format { .. }), "{err}");
    assert_eq!(err.exit_code(), 4);

    std::fs::write(&blob, &bytes[..30]).unwrap();
    assert_eq!(Checkpoint::load(dir.path()).unwrap_err().exit_code(), 4);
}

#[test]
fn training_episodes_are_reproducible() {
    let data = dataset();
    let config = tiny_config();
    let a = training_episode(&data, &config, 17).unwrap();
    let b = training_episode(&data, &config, 17).unwrap();
    assert_eq!(a.support_items, b.support_items);
    assert_eq!(a.query_items, b.query_items);
    assert_eq!(a.domain, b.domain);
}
