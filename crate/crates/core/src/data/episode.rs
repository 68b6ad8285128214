//! N-way K-shot episode sampling under the standard, intra-domain and
//! out-of-domain protocols.

use std::fmt;
use std::str::FromStr;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Dataset, Split};
use crate::error::{Result, TanoError};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Protocol {
    /// A single domain for both meta-training and meta-testing.
    Standard { domain: usize },
    /// All domains seen in meta-training; tasks at test time come from any of them.
    Intra,
    /// `holdout` is never sampled during meta-training and is the only test domain.
    Out { holdout: usize },
}

impl Protocol {
    pub fn name(&self) -> &'static str {
        match self {
            Protocol::Standard { .. } => "standard",
            Protocol::Intra => "intra",
            Protocol::Out { .. } => "out",
        }
    }

    /// Parses `standard`, `intra` or `out`; `domain` is the standard-protocol
    /// domain or the held-out one.
    pub fn parse(name: &str, domain: Option<usize>) -> Result<Protocol> {
        match name {
            "standard" => Ok(Protocol::Standard {
                domain: domain.unwrap_or(0),
            }),
            "intra" => Ok(Protocol::Intra),
            "out" => domain
                .map(|holdout| Protocol::Out { holdout })
                .ok_or_else(|| {
                    TanoError::invalid("out-of-domain protocol needs a held-out domain")
                }),
            other => Err(TanoError::invalid(format!("unknown protocol `{other}`"))),
        }
    }

    /// Domains admissible in `phase`.
    pub fn domains(&self, num_domains: usize, phase: Phase) -> Result<Vec<usize>> {
        let check = |d: usize| {
            if d >= num_domains {
                Err(TanoError::invalid(format!(
                    "domain {d} not in a dataset of {num_domains} domains"
                )))
            } else {
                Ok(())
            }
        };
        match *self {
            Protocol::Standard { domain } => {
                check(domain)?;
                Ok(vec![domain])
            }
            Protocol::Intra => Ok((0..num_domains).collect()),
            Protocol::Out { holdout } => {
                check(holdout)?;
                if num_domains < 2 {
                    return Err(TanoError::invalid(
                        "out-of-domain protocol needs at least two domains",
                    ));
                }
                Ok(match phase {
                    Phase::Train => (0..num_domains).filter(|&d| d != holdout).collect(),
                    Phase::Test => vec![holdout],
                })
            }
        }
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Protocol::Standard { domain } => write!(f, "standard(domain {domain})"),
            Protocol::Intra => f.write_str("intra"),
            Protocol::Out { holdout } => write!(f, "out(holdout {holdout})"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    Train,
    Test,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeShape {
    pub n_way: usize,
    pub n_shot: usize,
    pub n_query: usize,
}

impl EpisodeShape {
    pub fn new(n_way: usize, n_shot: usize, n_query: usize) -> Self {
        EpisodeShape {
            n_way,
            n_shot,
            n_query,
        }
    }

    pub fn support_len(&self) -> usize {
        self.n_way * self.n_shot
    }

    pub fn query_len(&self) -> usize {
        self.n_way * self.n_query
    }
}

impl FromStr for EpisodeShape {
    type Err = TanoError;

    /// `"5w1s15q"`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || TanoError::invalid(format!("episode shape `{s}` is not like 5w1s15q"));
        let (w, rest) = s.split_once('w').ok_or_else(bad)?;
        let (k, rest) = rest.split_once('s').ok_or_else(bad)?;
        let q = rest.strip_suffix('q').ok_or_else(bad)?;
        Ok(EpisodeShape::new(
            w.parse().map_err(|_| bad())?,
            k.parse().map_err(|_| bad())?,
            q.parse().map_err(|_| bad())?,
        ))
    }
}

/// One few-shot task drawn from a single domain.
#[derive(Clone, Debug)]
pub struct Episode {
    pub support_images: Tensor,
    /// Episode-local labels `0..n_way`, class-major.
    pub support_labels: Vec<usize>,
    pub query_images: Tensor,
    pub query_labels: Vec<usize>,
    pub domain: usize,
    pub pseudo_domain: Option<usize>,
    /// Dataset class id of each episode label.
    pub classes: Vec<usize>,
    /// `(class id, image index)` of every support and query item.
    pub support_items: Vec<(usize, usize)>,
    pub query_items: Vec<(usize, usize)>,
    pub shape: EpisodeShape,
}

impl Episode {
    /// Support followed by query, as one batch.
    pub fn pooled_images(&self) -> Tensor {
        Tensor::concat_rows(&[&self.support_images, &self.query_images])
            .expect("same image geometry")
    }

    /// The label used for worker routing: pseudo label when present, else the true domain.
    pub fn routing_label(&self) -> usize {
        self.pseudo_domain.unwrap_or(self.domain)
    }
}

pub fn sample_episode(
    dataset: &Dataset,
    split: Split,
    protocol: Protocol,
    phase: Phase,
    shape: EpisodeShape,
    rng: &mut impl Rng,
) -> Result<Episode> {
    if shape.n_way < 2 || shape.n_shot == 0 || shape.n_query == 0 {
        return Err(TanoError::invalid(format!(
            "degenerate episode shape {shape:?}"
        )));
    }
    let domains = protocol.domains(dataset.num_domains(), phase)?;
    let pool = dataset.manifest.classes_in(split);
    if pool.len() < shape.n_way {
        return Err(TanoError::invalid(format!(
            "{split} split has {} classes, episode needs {}",
            pool.len(),
            shape.n_way
        )));
    }
    let domain = *domains
        .choose(rng)
        .expect("protocol yields at least one domain");
    let classes: Vec<usize> = pool.choose_multiple(rng, shape.n_way).copied().collect();
    let need = shape.n_shot + shape.n_query;
    let mut support_items = Vec::with_capacity(shape.support_len());
    let mut query_items = Vec::with_capacity(shape.query_len());
    let mut query_by_class = Vec::with_capacity(shape.n_way);
    for &c in &classes {
        let available = dataset.count(domain, c);
        if available < need {
            return Err(TanoError::invalid(format!(
                "class {c} in domain {domain} has {available} images, episode needs {need}"
            )));
        }
        let picks = rand::seq::index::sample(rng, available, need).into_vec();
        support_items.extend(picks[..shape.n_shot].iter().map(|&i| (c, i)));
        query_by_class.push(picks[shape.n_shot..].to_vec());
    }
    for (label, picks) in query_by_class.iter().enumerate() {
        query_items.extend(picks.iter().map(|&i| (classes[label], i)));
    }
    let mut query_order: Vec<usize> = (0..query_items.len()).collect();
    query_order.shuffle(rng);
    let query_items: Vec<(usize, usize)> = query_order.iter().map(|&i| query_items[i]).collect();
    let label_of = |c: usize| classes.iter().position(|&k| k == c).expect("sampled class");

    let stack = |items: &[(usize, usize)]| {
        let full: Vec<(usize, usize, usize)> = items.iter().map(|&(c, i)| (domain, c, i)).collect();
        dataset.stack(&full)
    };
    Ok(Episode {
        support_images: stack(&support_items),
        support_labels: support_items.iter().map(|&(c, _)| label_of(c)).collect(),
        query_images: stack(&query_items),
        query_labels: query_items.iter().map(|&(c, _)| label_of(c)).collect(),
        domain,
        pseudo_domain: None,
        classes,
        support_items,
        query_items,
        shape,
    })
}
