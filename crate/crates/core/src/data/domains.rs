//! Rendering styles that define the synthetic domains.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::shapes::ShapeKind;
use crate::encoder::{IMAGE_CHANNELS, IMAGE_SIZE};

pub type Rgb = [f64; 3];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Background {
    Flat {
        color: Rgb,
    },
    /// Vertical ramp from `top` to `bottom`.
    Gradient {
        top: Rgb,
        bottom: Rgb,
    },
    Checker {
        a: Rgb,
        b: Rgb,
        cell: usize,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Noise {
    Gaussian { sigma: f64 },
    SaltPepper { p: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub domain_id: usize,
    pub name: String,
    pub background: Background,
    pub foreground: Rgb,
    /// Per-channel multiplier applied to the composed image.
    pub channel_scale: Rgb,
    /// Uniform brightness jitter applied per image.
    pub color_jitter: f64,
    pub noise: Noise,
    /// Invert intensities after composition.
    pub invert: bool,
    /// Per-channel intensity of a class-independent distractor shape added
    /// to every image.
    #[serde(default)]
    pub clutter: Rgb,
}

impl DomainSpec {
    /// The built-in domains. Ids beyond the four presets reuse a preset with
    /// rotated color channels.
    pub fn preset(domain_id: usize) -> DomainSpec {
        // Every preset has the same shape contrast (≈0.5) but carries it in
        // a different channel, and draws a random distractor shape into a
        // channel that is signal elsewhere: which channel to trust is a
        // property of the domain.
        let mut spec = match domain_id % 4 {
            0 => DomainSpec {
                domain_id,
                name: "ember".into(),
                background: Background::Flat {
                    color: [0.12, 0.2, 0.32],
                },
                foreground: [0.67, 0.2, 0.32],
                channel_scale: [1.0, 1.0, 1.0],
                color_jitter: 0.08,
                noise: Noise::Gaussian { sigma: 0.1 },
                invert: false,
                clutter: [0.0, 0.3, 0.0],
            },
            1 => DomainSpec {
                domain_id,
                name: "frost".into(),
                background: Background::Gradient {
                    top: [0.2, 0.3, 0.25],
                    bottom: [0.3, 0.2, 0.15],
                },
                foreground: [0.25, 0.25, 0.75],
                channel_scale: [1.0, 1.0, 1.0],
                color_jitter: 0.08,
                noise: Noise::Gaussian { sigma: 0.1 },
                invert: true,
                clutter: [0.3, 0.0, 0.0],
            },
            2 => DomainSpec {
                domain_id,
                name: "moss".into(),
                background: Background::Checker {
                    a: [0.35, 0.12, 0.15],
                    b: [0.35, 0.27, 0.15],
                    cell: 4,
                },
                foreground: [0.35, 0.7, 0.15],
                channel_scale: [1.0, 1.0, 1.0],
                color_jitter: 0.08,
                noise: Noise::SaltPepper { p: 0.06 },
                invert: false,
                clutter: [0.3, 0.0, 0.3],
            },
            _ => DomainSpec {
                domain_id,
                name: "haze".into(),
                background: Background::Flat {
                    color: [0.7, 0.4, 0.3],
                },
                foreground: [0.2, 0.4, 0.3],
                channel_scale: [1.0, 1.0, 1.0],
                color_jitter: 0.08,
                noise: Noise::Gaussian { sigma: 0.1 },
                invert: false,
                clutter: [0.0, 0.0, 0.3],
            },
        };
        let rot = (domain_id / 4) % 3;
        if rot > 0 {
            let rotate = |c: Rgb| [c[rot % 3], c[(rot + 1) % 3], c[(rot + 2) % 3]];
            spec.foreground = rotate(spec.foreground);
            spec.clutter = rotate(spec.clutter);
            spec.background = match spec.background {
                Background::Flat { color } => Background::Flat {
                    color: rotate(color),
                },
                Background::Gradient { top, bottom } => Background::Gradient {
                    top: rotate(top),
                    bottom: rotate(bottom),
                },
                Background::Checker { a, b, cell } => Background::Checker {
                    a: rotate(a),
                    b: rotate(b),
                    cell,
                },
            };
            spec.name = format!("{}-{rot}", spec.name);
        }
        spec
    }

    fn background_at(&self, x: usize, y: usize) -> Rgb {
        match &self.background {
            Background::Flat { color } => *color,
            Background::Gradient { top, bottom } => {
                let t = y as f64 / (IMAGE_SIZE - 1) as f64;
                [0, 1, 2].map(|c| top[c] * (1.0 - t) + bottom[c] * t)
            }
            Background::Checker { a, b, cell } => {
                if ((x / cell) + (y / cell)).is_multiple_of(2) {
                    *a
                } else {
                    *b
                }
            }
        }
    }

    /// Renders one `3×16×16` image (channel-major) with values in `[0, 1]`.
    pub fn render(&self, shape: ShapeKind, rng: &mut impl Rng) -> Vec<f32> {
        let main = Placement::sample(rng, 0.65..1.05, 0.4, 0.2);
        let fg_shift = rng.random_range(-self.color_jitter..=self.color_jitter);
        let bg_shift = rng.random_range(-self.color_jitter..=self.color_jitter);
        let distractor = (self.clutter != [0.0; 3]).then(|| {
            let kind = ShapeKind::ALL[rng.random_range(0..ShapeKind::ALL.len())];
            (
                kind,
                Placement::sample(rng, 0.5..0.9, std::f64::consts::PI, 0.35),
            )
        });
        let gauss = Normal::new(0.0, 1.0).expect("unit normal");

        let plane = IMAGE_SIZE * IMAGE_SIZE;
        let mut img = vec![0f32; IMAGE_CHANNELS * plane];
        for y in 0..IMAGE_SIZE {
            for x in 0..IMAGE_SIZE {
                let cover = main.coverage(shape, x, y);
                let clutter = distractor.map_or(0.0, |(kind, at)| at.coverage(kind, x, y));
                let bg = self.background_at(x, y);
                let noise_draw = match self.noise {
                    Noise::Gaussian { sigma } => Some(sigma * gauss.sample(rng)),
                    Noise::SaltPepper { p } => {
                        if rng.random_bool(p) {
                            Some(if rng.random_bool(0.5) { 10.0 } else { -10.0 })
                        } else {
                            None
                        }
                    }
                };
                for c in 0..IMAGE_CHANNELS {
                    let b = bg[c] + bg_shift;
                    let f = self.foreground[c] + fg_shift;
                    let mut v = (b * (1.0 - cover) + f * cover + self.clutter[c] * clutter)
                        * self.channel_scale[c];
                    if self.invert {
                        v = 1.0 - v;
                    }
                    if let Some(n) = noise_draw {
                        v += n;
                    }
                    img[c * plane + y * IMAGE_SIZE + x] = v.clamp(0.0, 1.0) as f32;
                }
            }
        }
        img
    }
}

/// Pose of a rendered shape in normalized `[-1, 1]²` image coordinates.
#[derive(Clone, Copy, Debug)]
struct Placement {
    scale: f64,
    sin: f64,
    cos: f64,
    tx: f64,
    ty: f64,
}

impl Placement {
    fn sample(
        rng: &mut impl Rng,
        scale: std::ops::Range<f64>,
        max_theta: f64,
        max_shift: f64,
    ) -> Placement {
        let scale = rng.random_range(scale);
        let (sin, cos) = rng.random_range(-max_theta..max_theta).sin_cos();
        let tx = rng.random_range(-max_shift..max_shift);
        let ty = rng.random_range(-max_shift..max_shift);
        Placement {
            scale,
            sin,
            cos,
            tx,
            ty,
        }
    }

    /// Fraction of pixel `(x, y)` covered by `shape`, 2×2 supersampled.
    fn coverage(&self, shape: ShapeKind, x: usize, y: usize) -> f64 {
        let half = IMAGE_SIZE as f64 / 2.0;
        let mut cover = 0.0;
        for sy in 0..2 {
            for sx in 0..2 {
                let px = (x as f64 + 0.25 + 0.5 * sx as f64) / half - 1.0 - self.tx;
                let py = (y as f64 + 0.25 + 0.5 * sy as f64) / half - 1.0 - self.ty;
                let u = (self.cos * px + self.sin * py) / self.scale;
                let v = (-self.sin * px + self.cos * py) / self.scale;
                cover += shape.contains(u, v) as u8 as f64 * 0.25;
            }
        }
        cover
    }
}
