//! `tano`: data generation, pretraining, meta-training, evaluation and
//! analysis for task-aware batch normalization.

use std::io::IsTerminal;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};

use tano_core::data::format::{read_dataset, write_dataset, write_json};
use tano_core::data::{generate_synthetic_domains, EpisodeShape, GenerateConfig, Protocol};
use tano_core::evaluation::{
    emit_analysis_report, evaluate_report, run_experiment, AnalysisConfig, EvalMode, EvalSettings,
    ExperimentConfig, ModelSet,
};
use tano_core::normalization::VarianceBlend;
use tano_core::training::checkpoint::{read_manifest, CheckpointKind};
use tano_core::training::meta::RunOptions;
use tano_core::training::{
    load_pretrained, meta_train_loop, pretrain_backbone, save_pretrained, Checkpoint, Model,
    MultiModels, PretrainConfig, TrainConfig,
};
use tano_core::{Result, TanoError};

#[derive(Parser, Debug)]
#[command(
    name = "tano",
    version,
    about = "Task-aware batch normalization for multi-domain few-shot learning"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render the synthetic multi-domain dataset to a directory.
    GenData(GenDataArgs),
    /// Pretrain the backbone on joint (domain, class) labels.
    Pretrain(PretrainArgs),
    /// Episodic meta-training from a pretrained backbone.
    MetaTrain(MetaTrainArgs),
    /// Evaluate checkpoints on test episodes.
    Eval(EvalArgs),
    /// Normalization-geometry report for a trained checkpoint.
    Analyze(AnalyzeArgs),
    /// Every stage end to end, with all artifacts under one directory.
    Run(RunArgs),
}

#[derive(Args, Debug)]
struct SeedArg {
    /// Seed for all randomness; required unless running interactively.
    #[arg(long)]
    seed: Option<u64>,
}

impl SeedArg {
    fn resolve(&self) -> Result<u64> {
        match self.seed {
            Some(s) => Ok(s),
            None if std::io::stdin().is_terminal() && std::io::stdout().is_terminal() => {
                warn!("no --seed given; using 0");
                Ok(0)
            }
            None => Err(TanoError::invalid(
                "--seed is required in non-interactive use",
            )),
        }
    }
}

#[derive(Args, Debug)]
struct ProtocolArgs {
    #[arg(long, value_enum, default_value = "intra")]
    protocol: ProtocolName,
    /// Held-out domain (out) or the single domain (standard).
    #[arg(long)]
    holdout: Option<usize>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ProtocolName {
    Standard,
    Intra,
    Out,
}

impl ProtocolArgs {
    fn protocol(&self) -> Result<Protocol> {
        let name = match self.protocol {
            ProtocolName::Standard => "standard",
            ProtocolName::Intra => "intra",
            ProtocolName::Out => "out",
        };
        Protocol::parse(name, self.holdout)
    }
}

#[derive(Args, Debug)]
struct ShapeArgs {
    #[arg(long, default_value_t = 5)]
    ways: usize,
    #[arg(long, default_value_t = 1)]
    shots: usize,
    #[arg(long, default_value_t = 15)]
    queries: usize,
}

impl ShapeArgs {
    fn shape(&self) -> EpisodeShape {
        EpisodeShape::new(self.ways, self.shots, self.queries)
    }
}

#[derive(Args, Debug)]
struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    seed: SeedArg,
    #[arg(long, default_value_t = 4)]
    domains: usize,
    #[arg(long, default_value_t = 20)]
    classes: usize,
    #[arg(long, default_value_t = 50)]
    per_class: usize,
}

#[derive(Args, Debug)]
struct PretrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    seed: SeedArg,
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    #[arg(long, default_value_t = 0.01)]
    lr: f64,
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
    /// Leave a domain out of pretraining (for the out-of-domain protocol).
    #[arg(long)]
    exclude: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum ModelKind {
    /// Worker bank routed by the coordinator.
    Tano,
    /// One worker shared by every domain.
    Common,
    /// One independently trained model per training domain.
    Multi,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Toggle {
    On,
    Off,
}

#[derive(Args, Debug)]
struct MetaTrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// Pretrained checkpoint directory.
    #[arg(long)]
    init: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    protocol: ProtocolArgs,
    #[command(flatten)]
    shape: ShapeArgs,
    #[command(flatten)]
    seed: SeedArg,
    #[arg(long, value_enum, default_value = "tano")]
    model: ModelKind,
    #[arg(long, default_value_t = 40)]
    epochs: usize,
    #[arg(long, default_value_t = 100)]
    episodes: usize,
    #[arg(long, default_value_t = 0.001)]
    lr: f64,
    #[arg(long, default_value_t = 4)]
    workers: usize,
    #[arg(long, value_enum, default_value = "on")]
    pseudo_labels: Toggle,
    #[arg(long, default_value_t = 1.0)]
    coordinator_weight: f64,
    /// Validation episodes per epoch for checkpoint selection.
    #[arg(long, default_value_t = 100)]
    val_episodes: usize,
    /// Continue from `OUT/resume`.
    #[arg(long)]
    resume: bool,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Primary checkpoint: a TANO, common or multi-model directory.
    #[arg(long)]
    ckpt: PathBuf,
    /// Common-model checkpoint for `common`/`adabn` when `--ckpt` is a TANO bank.
    #[arg(long)]
    common: Option<PathBuf>,
    /// Multi-model directory for `multi`.
    #[arg(long)]
    multi: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    protocol: ProtocolArgs,
    /// Comma-separated: tano-hard, tano-blend, common, multi, adabn, tano-oracle.
    #[arg(long, value_delimiter = ',', default_value = "tano-hard")]
    mode: Vec<String>,
    #[command(flatten)]
    shape: ShapeArgs,
    #[arg(long, default_value_t = 300)]
    episodes: usize,
    #[command(flatten)]
    seed: SeedArg,
    /// Workers blended by `tano-blend`; 0 blends all.
    #[arg(long, default_value_t = 0)]
    blend_k: usize,
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct AnalyzeArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    json: PathBuf,
    #[command(flatten)]
    seed: SeedArg,
    #[arg(long, default_value_t = 64)]
    images_per_domain: usize,
    /// Episodes per ordered domain pair in the statistics-swap test.
    #[arg(long, default_value_t = 50)]
    episodes: usize,
}

#[derive(Args, Debug)]
struct RunArgs {
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    protocol: ProtocolArgs,
    #[command(flatten)]
    seed: SeedArg,
    #[arg(long, default_value_t = 50)]
    per_class: usize,
    #[arg(long, default_value_t = 10)]
    pretrain_epochs: usize,
    #[arg(long, default_value_t = 40)]
    epochs: usize,
    #[arg(long, default_value_t = 100)]
    episodes: usize,
    #[arg(long, default_value_t = 100)]
    val_episodes: usize,
    #[arg(long, default_value_t = 0.001)]
    lr: f64,
    #[arg(long, default_value_t = 1.0)]
    coordinator_weight: f64,
    #[arg(long, default_value_t = 300)]
    eval_episodes: usize,
    /// Comma-separated evaluation modes; defaults to every mode the protocol supports.
    #[arg(long, value_delimiter = ',')]
    mode: Vec<String>,
    /// Also write the geometry report for the TANO model.
    #[arg(long)]
    analyze: bool,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::GenData(a) => gen_data(a),
        Command::Pretrain(a) => pretrain(a),
        Command::MetaTrain(a) => meta_train(a),
        Command::Eval(a) => eval(a),
        Command::Analyze(a) => analyze(a),
        Command::Run(a) => run(a),
    }
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    let config = GenerateConfig {
        num_domains: a.domains,
        num_classes: a.classes,
        per_class: a.per_class,
        seed: a.seed.resolve()?,
    };
    let dataset = generate_synthetic_domains(&config)?;
    write_dataset(&dataset, &a.out)?;
    info!(
        "wrote {} domains × {} classes × {} images to {}",
        a.domains,
        a.classes,
        a.per_class,
        a.out.display()
    );
    Ok(())
}

fn pretrain(a: PretrainArgs) -> Result<()> {
    let dataset = read_dataset(&a.data)?;
    let domains = match a.exclude {
        Some(x) if x >= dataset.num_domains() => {
            return Err(TanoError::invalid(format!(
                "cannot exclude domain {x} of {}",
                dataset.num_domains()
            )))
        }
        Some(x) => (0..dataset.num_domains()).filter(|&d| d != x).collect(),
        None => Vec::new(),
    };
    let config = PretrainConfig {
        epochs: a.epochs,
        lr: a.lr,
        batch_size: a.batch_size,
        seed: a.seed.resolve()?,
        domains,
        ..Default::default()
    };
    let pretrained = pretrain_backbone(&dataset, &config)?;
    for h in &pretrained.history {
        println!(
            "epoch {:>3}  loss {:.4}  accuracy {:.2}%",
            h.epoch, h.mean_loss, h.accuracy
        );
    }
    save_pretrained(&pretrained, &a.out)
}

fn meta_train(a: MetaTrainArgs) -> Result<()> {
    let dataset = read_dataset(&a.data)?;
    let pretrained = load_pretrained(&a.init)?;
    let mut config = TrainConfig {
        lr0: a.lr,
        epochs: a.epochs,
        episodes_per_epoch: a.episodes,
        shape: a.shape.shape(),
        seed: a.seed.resolve()?,
        num_workers: a.workers,
        pseudo_labels: matches!(a.pseudo_labels, Toggle::On),
        coordinator_weight: a.coordinator_weight,
        protocol: a.protocol.protocol()?,
        val_episodes: a.val_episodes,
        ..Default::default()
    };
    if a.model != ModelKind::Tano {
        config.num_workers = 1;
        config.pseudo_labels = false;
    }
    config.validate()?;

    let train_one = |config: &TrainConfig, out: &Path| -> Result<Checkpoint> {
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
            out: Some(out.to_path_buf()),
            resume: a.resume,
            stop_after: None,
        };
        meta_train_loop(&dataset, &init, config, &options)
    };

    if a.model == ModelKind::Multi {
        let domains = config.train_domains(dataset.num_domains())?;
        let mut members = Vec::with_capacity(domains.len());
        for &d in &domains {
            info!("training the single-domain model of domain {d}");
            let member = TrainConfig {
                protocol: Protocol::Standard { domain: d },
                ..config.clone()
            };
            members.push(train_one(&member, &MultiModels::member_dir(&a.out, d))?);
        }
        let multi = MultiModels { domains, members };
        return multi.save(&a.out);
    }
    let ckpt = train_one(&config, &a.out)?;
    if let Some(state) = ckpt.state() {
        for h in &state.history {
            println!(
                "epoch {:>3}  loss {:.4}  train {:.2}%  val {:.2}%  lr {:.2e}",
                h.epoch, h.mean_loss, h.train_accuracy, h.val_accuracy, h.lr
            );
        }
        println!(
            "best epoch {} (val {:.2}%)",
            state.best_epoch, state.best_val_accuracy
        );
    }
    Ok(())
}

/// Loads `dir` into the slot its manifest declares.
fn load_into(models: &mut ModelSet, dir: &Path, common_slot: bool) -> Result<()> {
    match read_manifest(dir)?.kind {
        CheckpointKind::Multi => models.multi = Some(MultiModels::load(dir)?),
        CheckpointKind::MetaTrained => {
            let ckpt = Checkpoint::load(dir)?;
            if common_slot {
                models.common = Some(ckpt);
            } else {
                models.tano = Some(ckpt);
            }
        }
        CheckpointKind::Pretrained => {
            return Err(TanoError::invalid(format!(
                "{} is a pretrained backbone; meta-train it first",
                dir.display()
            )))
        }
    }
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let dataset = read_dataset(&a.data)?;
    let modes = a
        .mode
        .iter()
        .map(|m| EvalMode::parse(m))
        .collect::<Result<Vec<_>>>()?;
    let mut models = ModelSet::default();
    load_into(&mut models, &a.ckpt, false)?;
    if let Some(dir) = &a.common {
        load_into(&mut models, dir, true)?;
    }
    if let Some(dir) = &a.multi {
        load_into(&mut models, dir, false)?;
    }
    // A single-worker checkpoint passed as --ckpt serves as the common model.
    if models.common.is_none() {
        models.common = models.tano.clone().filter(|t| t.model.num_domains() == 1);
    }
    let settings = EvalSettings {
        shape: a.shape.shape(),
        blend_k: a.blend_k,
        blend_rule: VarianceBlend::Linear,
        ..EvalSettings::new(a.protocol.protocol()?, a.episodes, a.seed.resolve()?)
    };
    let report = evaluate_report(&models, &dataset, &modes, &settings)?;
    print!("{}", report.to_table());
    if let Some(path) = &a.json {
        write_json(path, &report)?;
    }
    Ok(())
}

fn analyze(a: AnalyzeArgs) -> Result<()> {
    let dataset = read_dataset(&a.data)?;
    let ckpt = Checkpoint::load(&a.ckpt)?;
    let config = AnalysisConfig {
        images_per_domain: a.images_per_domain,
        episodes: a.episodes,
        seed: a.seed.resolve()?,
        ..Default::default()
    };
    let report = emit_analysis_report(&ckpt, &dataset, &config)?;
    println!(
        "max relative sphere residual {:.3e}",
        report.max_relative_identity()
    );
    println!(
        "mean accuracy drop under swapped statistics {:.2} points",
        report.mean_swap_drop()
    );
    write_json(&a.json, &report)
}

fn run(a: RunArgs) -> Result<()> {
    let seed = a.seed.resolve()?;
    let protocol = a.protocol.protocol()?;
    let mut config = ExperimentConfig::new(protocol, seed);
    config.data.per_class = a.per_class;
    config.pretrain.epochs = a.pretrain_epochs;
    config.train.epochs = a.epochs;
    config.train.episodes_per_epoch = a.episodes;
    config.train.val_episodes = a.val_episodes;
    config.train.lr0 = a.lr;
    config.train.coordinator_weight = a.coordinator_weight;
    config.eval_episodes = a.eval_episodes;
    if !a.mode.is_empty() {
        config.modes = a
            .mode
            .iter()
            .map(|m| EvalMode::parse(m))
            .collect::<Result<Vec<_>>>()?;
    }
    if a.analyze {
        config.analysis = Some(AnalysisConfig {
            seed,
            ..Default::default()
        });
    }
    let result = run_experiment(&config, None, Some(&a.out))?;
    print!("{}", result.report.to_table());
    if let Some(r) = &result.analysis {
        println!(
            "max relative sphere residual {:.3e}",
            r.max_relative_identity()
        );
        println!(
            "mean accuracy drop under swapped statistics {:.2} points",
            r.mean_swap_drop()
        );
    }
    Ok(())
}
