//! Synthetic multi-domain few-shot data: generation, on-disk format,
//! episode sampling and k-means pseudo-domain labels.

pub mod domains;
pub mod episode;
pub mod format;
pub mod kmeans;
pub mod shapes;

use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use domains::DomainSpec;
pub use episode::{sample_episode, Episode, EpisodeShape, Phase, Protocol};
pub use shapes::ShapeKind;

use crate::encoder::{IMAGE_CHANNELS, IMAGE_SIZE};
use crate::error::{Result, TanoError};
use crate::rng::{rng_for, stream};
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;
pub const MIN_CLASSES_PER_SPLIT: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Base,
    Val,
    Novel,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Base => "base",
            Split::Val => "val",
            Split::Novel => "novel",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassInfo {
    pub class_id: usize,
    pub shape_kind: ShapeKind,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub seed: u64,
    pub image_size: usize,
    pub channels: usize,
    pub domains: Vec<DomainSpec>,
    pub classes: Vec<ClassInfo>,
    /// `counts[domain][class]`.
    pub counts: Vec<Vec<usize>>,
}

impl DatasetManifest {
    pub fn num_domains(&self) -> usize {
        self.domains.len()
    }

    pub fn classes_in(&self, split: Split) -> Vec<usize> {
        self.classes
            .iter()
            .filter(|c| c.split == split)
            .map(|c| c.class_id)
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.format_version != FORMAT_VERSION {
            return Err(TanoError::invalid(format!(
                "unsupported dataset format version {}",
                self.format_version
            )));
        }
        if self.image_size != IMAGE_SIZE || self.channels != IMAGE_CHANNELS {
            return Err(TanoError::invalid(
                "dataset image geometry differs from the encoder's",
            ));
        }
        if self.counts.len() != self.domains.len()
            || self.counts.iter().any(|c| c.len() != self.classes.len())
        {
            return Err(TanoError::invalid(
                "count table does not match domains × classes",
            ));
        }
        for (i, c) in self.classes.iter().enumerate() {
            if c.class_id != i {
                return Err(TanoError::invalid("class ids must be 0..n in order"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerateConfig {
    pub num_domains: usize,
    pub num_classes: usize,
    pub per_class: usize,
    pub seed: u64,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        GenerateConfig {
            num_domains: 4,
            num_classes: 20,
            per_class: 50,
            seed: 0,
        }
    }
}

/// Images held as `f32` in `[0, 1]`, exactly as stored on disk.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    /// One blob per `(domain, class)`, indexed `domain * num_classes + class`.
    blobs: Vec<Vec<f32>>,
}

pub const IMAGE_LEN: usize = IMAGE_CHANNELS * IMAGE_SIZE * IMAGE_SIZE;

impl Dataset {
    pub fn from_parts(manifest: DatasetManifest, blobs: Vec<Vec<f32>>) -> Result<Self> {
        manifest.validate()?;
        let n_classes = manifest.classes.len();
        if blobs.len() != manifest.num_domains() * n_classes {
            return Err(TanoError::invalid(
                "blob count does not match domains × classes",
            ));
        }
        for (i, b) in blobs.iter().enumerate() {
            let expected = manifest.counts[i / n_classes][i % n_classes] * IMAGE_LEN;
            if b.len() != expected {
                return Err(TanoError::invalid(format!(
                    "blob {i} holds {} values, expected {expected}",
                    b.len()
                )));
            }
        }
        Ok(Dataset { manifest, blobs })
    }

    pub fn num_domains(&self) -> usize {
        self.manifest.num_domains()
    }

    pub fn num_classes(&self) -> usize {
        self.manifest.classes.len()
    }

    pub fn count(&self, domain: usize, class: usize) -> usize {
        self.manifest.counts[domain][class]
    }

    pub fn blob(&self, domain: usize, class: usize) -> &[f32] {
        &self.blobs[domain * self.num_classes() + class]
    }

    pub fn image(&self, domain: usize, class: usize, index: usize) -> &[f32] {
        &self.blob(domain, class)[index * IMAGE_LEN..(index + 1) * IMAGE_LEN]
    }

    /// Stacks `(domain, class, index)` images into a `B×3×16×16` tensor.
    pub fn stack(&self, items: &[(usize, usize, usize)]) -> Tensor {
        let mut data = Vec::with_capacity(items.len() * IMAGE_LEN);
        for &(d, c, i) in items {
            data.extend(self.image(d, c, i).iter().map(|&v| v as f64));
        }
        Tensor::new([items.len(), IMAGE_CHANNELS, IMAGE_SIZE, IMAGE_SIZE], data)
            .expect("image geometry")
    }
}

/// Splits `n` classes into base/val/novel in 2:1:1 proportions.
pub fn class_splits(n: usize) -> Result<Vec<Split>> {
    let val = n / 4;
    let novel = n / 4;
    let base = n - val - novel;
    if base.min(val).min(novel) < MIN_CLASSES_PER_SPLIT {
        return Err(TanoError::invalid(format!(
            "{n} classes give a {base}/{val}/{novel} split; every split needs >= {MIN_CLASSES_PER_SPLIT}"
        )));
    }
    Ok((0..n)
        .map(|i| {
            if i < base {
                Split::Base
            } else if i < base + val {
                Split::Val
            } else {
                Split::Novel
            }
        })
        .collect())
}

pub fn generate_synthetic_domains(config: &GenerateConfig) -> Result<Dataset> {
    let domains: Vec<DomainSpec> = (0..config.num_domains).map(DomainSpec::preset).collect();
    generate_with_domains(&domains, config)
}

pub fn generate_with_domains(domains: &[DomainSpec], config: &GenerateConfig) -> Result<Dataset> {
    if config.num_classes > ShapeKind::ALL.len() {
        return Err(TanoError::invalid(format!(
            "{} classes requested but only {} shape kinds exist",
            config.num_classes,
            ShapeKind::ALL.len()
        )));
    }
    if domains.is_empty() {
        return Err(TanoError::invalid("at least one domain is required"));
    }
    if config.per_class == 0 {
        return Err(TanoError::invalid("images per class must be positive"));
    }
    let splits = class_splits(config.num_classes)?;
    let classes: Vec<ClassInfo> = (0..config.num_classes)
        .map(|i| ClassInfo {
            class_id: i,
            shape_kind: ShapeKind::ALL[i],
            split: splits[i],
        })
        .collect();
    let n_classes = classes.len();
    let blobs: Vec<Vec<f32>> = (0..domains.len() * n_classes)
        .into_par_iter()
        .map(|cell| {
            let (d, c) = (cell / n_classes, cell % n_classes);
            let mut rng = rng_for(config.seed, stream::DATA, cell as u64);
            let mut blob = Vec::with_capacity(config.per_class * IMAGE_LEN);
            for _ in 0..config.per_class {
                blob.extend(domains[d].render(classes[c].shape_kind, &mut rng));
            }
            blob
        })
        .collect();
    let manifest = DatasetManifest {
        format_version: FORMAT_VERSION,
        seed: config.seed,
        image_size: IMAGE_SIZE,
        channels: IMAGE_CHANNELS,
        domains: domains.to_vec(),
        classes,
        counts: vec![vec![config.per_class; n_classes]; domains.len()],
    };
    Dataset::from_parts(manifest, blobs)
}

/// Per-image channel means, the raw-pixel domain signature.
pub fn channel_means(image: &[f32]) -> [f64; 3] {
    let plane = IMAGE_SIZE * IMAGE_SIZE;
    [0, 1, 2].map(|c| {
        image[c * plane..(c + 1) * plane]
            .iter()
            .map(|&v| v as f64)
            .sum::<f64>()
            / plane as f64
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> Dataset {
        generate_synthetic_domains(&GenerateConfig {
            per_class: 12,
            seed: 11,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn generation_is_seeded() {
        let a = small();
        assert_eq!(a, small());
        let b = generate_synthetic_domains(&GenerateConfig {
            per_class: 12,
            seed: 12,
            ..Default::default()
        })
        .unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn splits_are_disjoint_and_large_enough() {
        let d = small();
        let m = &d.manifest;
        let (b, v, n) = (
            m.classes_in(Split::Base),
            m.classes_in(Split::Val),
            m.classes_in(Split::Novel),
        );
        assert_eq!((b.len(), v.len(), n.len()), (10, 5, 5));
        assert!(b.iter().all(|c| !v.contains(c) && !n.contains(c)));
        assert!(v.iter().all(|c| !n.contains(c)));
        assert!(class_splits(16).is_err());
    }

    #[test]
    fn too_many_classes_rejected() {
        let cfg = GenerateConfig {
            num_classes: 24,
            ..Default::default()
        };
        assert!(matches!(
            generate_synthetic_domains(&cfg),
            Err(TanoError::Validation(_))
        ));
    }

    #[test]
    fn pixels_in_unit_interval() {
        let d = small();
        for dom in 0..d.num_domains() {
            assert!(d.blob(dom, 3).iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}
