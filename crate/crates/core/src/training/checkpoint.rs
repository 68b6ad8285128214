//! Checkpoint directories: `manifest.json` plus one version-2 blob per
//! parameter tensor under `params/`, each pinned by its SHA-256.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::coordinator::CoordinatorWeights;
use crate::data::format::{
    decode_tensor_blob, read_file, read_json, tensor_blob_bytes, write_file, write_json,
};
use crate::encoder::{EncoderWeights, NUM_BN_LAYERS};
use crate::error::{Result, TanoError};
use crate::normalization::{BnLayerParams, GroupWorker, GroupWorkerBank};
use crate::tensor::Tensor;

use super::meta::TrainState;
use super::pretrain::{PretrainConfig, PretrainEpoch, Pretrained};
use super::{worker_tensors, Model, TrainConfig};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CheckpointKind {
    Pretrained,
    MetaTrained,
    /// One meta-trained single-domain model per `domain_{r}/` subdirectory.
    Multi,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainRecord {
    pub config: PretrainConfig,
    pub joint_classes: usize,
    pub history: Vec<PretrainEpoch>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub config: TrainConfig,
    pub state: TrainState,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub kind: CheckpointKind,
    pub num_domains: usize,
    pub epsilon: f64,
    pub momentum: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pretrain: Option<PretrainRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<TrainRecord>,
    /// Domains of the members of a multi-model checkpoint.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub members: Vec<usize>,
    pub params: Vec<ParamEntry>,
}

fn manifest_path(dir: &Path) -> std::path::PathBuf {
    dir.join("manifest.json")
}

pub fn read_manifest(dir: &Path) -> Result<CheckpointManifest> {
    let m: CheckpointManifest = read_json(&manifest_path(dir))?;
    if m.format_version != CHECKPOINT_VERSION {
        return Err(TanoError::format(
            manifest_path(dir),
            0,
            format!("unsupported checkpoint version {}", m.format_version),
        ));
    }
    Ok(m)
}

/// Writes the tensors, then the manifest, so a manifest never points at
/// missing parameters.
fn save_dir(
    dir: &Path,
    mut manifest: CheckpointManifest,
    tensors: &[(String, Tensor)],
) -> Result<()> {
    manifest.params.clear();
    for (name, t) in tensors {
        let bytes = tensor_blob_bytes(t)?;
        write_file(&dir.join("params").join(format!("{name}.tano")), &bytes)?;
        manifest.params.push(ParamEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            sha256: hex::encode(Sha256::digest(&bytes)),
        });
    }
    write_json(&manifest_path(dir), &manifest)
}

fn load_tensors(dir: &Path, manifest: &CheckpointManifest) -> Result<HashMap<String, Tensor>> {
    let mut out = HashMap::new();
    for p in &manifest.params {
        let path = dir.join("params").join(format!("{}.tano", p.name));
        let bytes = read_file(&path)?;
        let t = decode_tensor_blob(&path, &bytes, &p.shape)?;
        if hex::encode(Sha256::digest(&bytes)) != p.sha256 {
            return Err(TanoError::format(
                &path,
                0,
                "checksum does not match the manifest",
            ));
        }
        out.insert(p.name.clone(), t);
    }
    Ok(out)
}

fn take(map: &mut HashMap<String, Tensor>, name: &str) -> Result<Tensor> {
    map.remove(name)
        .ok_or_else(|| TanoError::invalid(format!("checkpoint lacks parameter `{name}`")))
}

fn take_worker(
    map: &mut HashMap<String, Tensor>,
    index: usize,
    epsilon: f64,
    momentum: f64,
) -> Result<GroupWorker> {
    let mut layers = Vec::with_capacity(NUM_BN_LAYERS);
    for j in 0..NUM_BN_LAYERS {
        let p = format!("worker{index}.bn{j}");
        let layer = BnLayerParams {
            gamma: take(map, &format!("{p}.gamma"))?.into_data(),
            beta: take(map, &format!("{p}.beta"))?.into_data(),
            running_mean: take(map, &format!("{p}.running_mean"))?.into_data(),
            running_var: take(map, &format!("{p}.running_var"))?.into_data(),
            epsilon,
            momentum,
        };
        layer.validate()?;
        layers.push(layer);
    }
    Ok(GroupWorker { index, layers })
}

fn take_encoder(map: &mut HashMap<String, Tensor>) -> Result<EncoderWeights> {
    Ok(EncoderWeights {
        kernels: (0..NUM_BN_LAYERS)
            .map(|j| take(map, &format!("encoder.conv{j}")))
            .collect::<Result<_>>()?,
    })
}

fn bn_hyper(worker: &GroupWorker) -> (f64, f64) {
    worker.layers.first().map_or(
        (
            crate::normalization::DEFAULT_EPSILON,
            crate::normalization::DEFAULT_MOMENTUM,
        ),
        |l| (l.epsilon, l.momentum),
    )
}

pub fn save_pretrained(p: &Pretrained, dir: &Path) -> Result<()> {
    let (epsilon, momentum) = bn_hyper(&p.global);
    let mut tensors: Vec<(String, Tensor)> = p
        .encoder
        .kernels
        .iter()
        .enumerate()
        .map(|(j, k)| (format!("encoder.conv{j}"), k.clone()))
        .collect();
    tensors.extend(worker_tensors(&GroupWorker {
        index: 0,
        layers: p.global.layers.clone(),
    }));
    let manifest = CheckpointManifest {
        format_version: CHECKPOINT_VERSION,
        kind: CheckpointKind::Pretrained,
        num_domains: 0,
        epsilon,
        momentum,
        pretrain: Some(PretrainRecord {
            config: p.config.clone(),
            joint_classes: p.joint_classes,
            history: p.history.clone(),
        }),
        train: None,
        members: Vec::new(),
        params: Vec::new(),
    };
    save_dir(dir, manifest, &tensors)
}

pub fn load_pretrained(dir: &Path) -> Result<Pretrained> {
    let m = read_manifest(dir)?;
    if m.kind != CheckpointKind::Pretrained {
        return Err(TanoError::invalid(format!(
            "{} is not a pretrained checkpoint",
            dir.display()
        )));
    }
    let record = m.pretrain.clone().ok_or_else(|| {
        TanoError::format(
            manifest_path(dir),
            0,
            "pretrained checkpoint without its record",
        )
    })?;
    let mut map = load_tensors(dir, &m)?;
    Ok(Pretrained {
        config: record.config,
        encoder: take_encoder(&mut map)?,
        global: take_worker(&mut map, 0, m.epsilon, m.momentum)?,
        joint_classes: record.joint_classes,
        history: record.history,
    })
}

/// A meta-trained model with its configuration and training state.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub train: Option<TrainRecord>,
}

impl Checkpoint {
    pub fn meta(model: Model, config: TrainConfig, state: TrainState) -> Self {
        Checkpoint {
            model,
            train: Some(TrainRecord { config, state }),
        }
    }

    pub fn config(&self) -> Option<&TrainConfig> {
        self.train.as_ref().map(|t| &t.config)
    }

    pub fn state(&self) -> Option<&TrainState> {
        self.train.as_ref().map(|t| &t.state)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let (epsilon, momentum) = bn_hyper(self.model.bank.global());
        let manifest = CheckpointManifest {
            format_version: CHECKPOINT_VERSION,
            kind: CheckpointKind::MetaTrained,
            num_domains: self.model.num_domains(),
            epsilon,
            momentum,
            pretrain: None,
            train: self.train.clone(),
            members: Vec::new(),
            params: Vec::new(),
        };
        save_dir(dir, manifest, &self.model.named_tensors())
    }

    pub fn load(dir: &Path) -> Result<Checkpoint> {
        let m = read_manifest(dir)?;
        if m.kind != CheckpointKind::MetaTrained {
            return Err(TanoError::invalid(format!(
                "{} holds a {:?} checkpoint, expected a meta-trained one",
                dir.display(),
                m.kind
            )));
        }
        let mut map = load_tensors(dir, &m)?;
        let encoder = take_encoder(&mut map)?;
        let coordinator = CoordinatorWeights {
            w1: take(&mut map, "coordinator.w1")?,
            b1: take(&mut map, "coordinator.b1")?,
            w2: take(&mut map, "coordinator.w2")?,
            b2: take(&mut map, "coordinator.b2")?,
        };
        let workers = (0..=m.num_domains)
            .map(|r| take_worker(&mut map, r, m.epsilon, m.momentum))
            .collect::<Result<Vec<_>>>()?;
        let bank = GroupWorkerBank {
            workers,
            num_domains: m.num_domains,
        };
        bank.validate()?;
        if coordinator.num_domains() != m.num_domains {
            return Err(TanoError::format(
                manifest_path(dir),
                0,
                "coordinator width differs from worker count",
            ));
        }
        Ok(Checkpoint {
            model: Model {
                encoder,
                coordinator,
                bank,
            },
            train: m.train,
        })
    }
}

/// Independently trained single-domain models, one per domain.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiModels {
    pub domains: Vec<usize>,
    pub members: Vec<Checkpoint>,
}

impl MultiModels {
    pub fn member_dir(dir: &Path, domain: usize) -> std::path::PathBuf {
        dir.join(format!("domain_{domain}"))
    }

    pub fn model_for(&self, domain: usize) -> Result<&Model> {
        self.domains
            .iter()
            .position(|&d| d == domain)
            .map(|i| &self.members[i].model)
            .ok_or_else(|| {
                TanoError::invalid(format!("no single-domain model for domain {domain}"))
            })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        for (&d, m) in self.domains.iter().zip(&self.members) {
            m.save(&Self::member_dir(dir, d))?;
        }
        let manifest = CheckpointManifest {
            format_version: CHECKPOINT_VERSION,
            kind: CheckpointKind::Multi,
            num_domains: 1,
            epsilon: 0.0,
            momentum: 0.0,
            pretrain: None,
            train: None,
            members: self.domains.clone(),
            params: Vec::new(),
        };
        write_json(&manifest_path(dir), &manifest)
    }

    pub fn load(dir: &Path) -> Result<MultiModels> {
        let m = read_manifest(dir)?;
        if m.kind != CheckpointKind::Multi {
            return Err(TanoError::invalid(format!(
                "{} is not a multi-model checkpoint",
                dir.display()
            )));
        }
        let members = m
            .members
            .iter()
            .map(|&d| Checkpoint::load(&Self::member_dir(dir, d)))
            .collect::<Result<Vec<_>>>()?;
        Ok(MultiModels {
            domains: m.members,
            members,
        })
    }
}

/// SHA-256 over every file below `dir` (relative path and contents, in
/// sorted path order).
pub fn hash_dir(dir: &Path) -> Result<String> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<std::path::PathBuf>) -> Result<()> {
        let entries = fs::read_dir(dir).map_err(|e| TanoError::io(dir, e))?;
        for entry in entries {
            let path = entry.map_err(|e| TanoError::io(dir, e))?.path();
            if path.is_dir() {
                walk(root, &path, out)?;
            } else {
                out.push(path.strip_prefix(root).expect("below root").to_path_buf());
            }
        }
        Ok(())
    }
    let mut files = Vec::new();
    walk(dir, dir, &mut files)?;
    files.sort();
    let mut h = Sha256::new();
    for rel in files {
        let bytes = read_file(&dir.join(&rel))?;
        h.update(rel.to_string_lossy().as_bytes());
        h.update([0]);
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(&bytes);
    }
    Ok(hex::encode(h.finalize()))
}

/// SHA-256 of a model's parameters, independent of any file layout.
pub fn model_hash(model: &Model) -> String {
    let mut h = Sha256::new();
    for (name, t) in model.named_tensors() {
        h.update(name.as_bytes());
        for v in t.data() {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}
