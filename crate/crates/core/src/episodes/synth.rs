//! Procedural class patterns and domain transforms.
//!
//! A sample's pattern depends only on `(class, index)`, so the same sample
//! index rendered under two domains differs by the domain transform alone.

use std::f64::consts::PI;

use afa_tensor::{Rng, Stream};
use serde::{Deserialize, Serialize};

use super::dataset::{split_base_novel, ClassEntry, Dataset, DatasetManifest, DomainEntry};
use crate::error::{CoreError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Blob,
    Stripe,
    Ring,
    Checker,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassSpec {
    pub id: usize,
    pub family: Family,
    /// Radians.
    pub orientation: f64,
    /// Relative size, in (0, 2].
    pub scale: f64,
    /// Cycles per image width.
    pub frequency: f64,
    /// Foreground colour, one weight per channel.
    pub color: [f64; 3],
}

impl ClassSpec {
    pub fn validate(&self) -> Result<()> {
        let ok = self.scale > 0.0
            && self.scale <= 2.0
            && self.frequency > 0.0
            && self.frequency <= 8.0
            && self.orientation.is_finite()
            && self.color.iter().all(|c| c.is_finite() && c.abs() <= 2.0);
        if ok {
            Ok(())
        } else {
            Err(CoreError::config(format!("class {} parameters outside generator bounds", self.id)))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub id: usize,
    pub name: String,
    /// Row-major 3×3 channel mixing.
    pub mixing: [f64; 9],
    pub gain: [f64; 3],
    pub offset: [f64; 3],
    pub noise_std: f64,
    /// Cycles per image width of the additive background texture; 0 disables.
    pub texture_freq: f64,
    #[serde(default)]
    pub texture_amplitude: f64,
    pub seed: u64,
}

const IDENTITY: [f64; 9] = [1., 0., 0., 0., 1., 0., 0., 0., 1.];

fn det3(m: &[f64; 9]) -> f64 {
    m[0] * (m[4] * m[8] - m[5] * m[7]) - m[1] * (m[3] * m[8] - m[5] * m[6])
        + m[2] * (m[3] * m[7] - m[4] * m[6])
}

impl DomainSpec {
    pub fn identity(id: usize, name: &str) -> DomainSpec {
        DomainSpec {
            id,
            name: name.to_string(),
            mixing: IDENTITY,
            gain: [1.0; 3],
            offset: [0.0; 3],
            noise_std: 0.0,
            texture_freq: 0.0,
            texture_amplitude: 0.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if det3(&self.mixing).abs() < 1e-3 {
            return Err(CoreError::config(format!("domain {}: mixing matrix is singular", self.name)));
        }
        if !self.noise_std.is_finite() || self.noise_std < 0.0 {
            return Err(CoreError::config(format!("domain {}: noise std must be ≥ 0", self.name)));
        }
        if self.texture_freq < 0.0 {
            return Err(CoreError::config(format!("domain {}: negative texture frequency", self.name)));
        }
        Ok(())
    }

    /// Transformed copy of a raw `3×H×W` render of sample `(class, index)`.
    pub fn apply(&self, raw: &[f64], h: usize, w: usize, class: usize, index: usize) -> Vec<f64> {
        let s = h * w;
        let mut out = vec![0.0; 3 * s];
        for c in 0..3 {
            for p in 0..s {
                let mixed: f64 = (0..3).map(|j| self.mixing[c * 3 + j] * raw[j * s + p]).sum();
                out[c * s + p] = self.gain[c] * mixed + self.offset[c];
            }
        }
        let mut rng = Rng::new(self.seed).substream(Stream::Data, cell_key(class, index));
        if self.texture_freq > 0.0 && self.texture_amplitude != 0.0 {
            let angle = rng.uniform_range(0.0, PI);
            let phase = rng.uniform_range(0.0, 2.0 * PI);
            let (ca, sa) = (angle.cos(), angle.sin());
            for y in 0..h {
                for x in 0..w {
                    let u = (x as f64 * ca + y as f64 * sa) / w as f64;
                    let t = self.texture_amplitude * (2.0 * PI * self.texture_freq * u + phase).sin();
                    for c in 0..3 {
                        out[c * s + y * w + x] += t * [1.0, 0.6, -0.4][c];
                    }
                }
            }
        }
        if self.noise_std > 0.0 {
            for v in out.iter_mut() {
                *v += rng.normal(0.0, self.noise_std);
            }
        }
        out
    }
}

fn cell_key(class: usize, index: usize) -> u64 {
    ((class as u64) << 32) | index as u64
}

/// Raw `3×H×W` render of sample `index` of a class; domain-independent.
pub fn render(spec: &ClassSpec, h: usize, w: usize, seed: u64, index: usize) -> Vec<f64> {
    let mut rng = Rng::new(seed).substream(Stream::Custom(spec.id as u64), index as u64);
    let theta = spec.orientation + rng.normal(0.0, 0.25);
    let freq = spec.frequency * rng.uniform_range(0.85, 1.15);
    let phase = rng.uniform_range(0.0, 2.0 * PI);
    let cx = 0.5 + rng.normal(0.0, 0.08);
    let cy = 0.5 + rng.normal(0.0, 0.08);
    let contrast = rng.uniform_range(0.7, 1.3);
    let (ct, st) = (theta.cos(), theta.sin());
    let s = h * w;
    let mut pattern = vec![0.0; s];
    for y in 0..h {
        for x in 0..w {
            let fx = (x as f64 + 0.5) / w as f64 - cx;
            let fy = (y as f64 + 0.5) / h as f64 - cy;
            let u = fx * ct + fy * st;
            let v = -fx * st + fy * ct;
            let val = match spec.family {
                Family::Blob => {
                    let r = 0.18 * spec.scale;
                    let e = (u / r).powi(2) + (v / (0.5 * r * (1.0 + 1.0 / freq))).powi(2);
                    (-0.5 * e).exp()
                }
                Family::Stripe => 0.5 + 0.5 * (2.0 * PI * freq * u + phase).sin(),
                Family::Ring => {
                    let r = (u * u + v * v).sqrt() / spec.scale;
                    0.5 + 0.5 * (2.0 * PI * freq * r + phase).cos()
                }
                Family::Checker => {
                    let a = (2.0 * PI * freq * u / 2.0 + phase).sin();
                    let b = (2.0 * PI * freq * v / 2.0).sin();
                    0.5 + 0.5 * (3.0 * a * b).tanh()
                }
            };
            pattern[y * w + x] = contrast * val;
        }
    }
    let mut out = vec![0.0; 3 * s];
    for c in 0..3 {
        for p in 0..s {
            out[c * s + p] = spec.color[c] * pattern[p] + 0.05 * rng.normal(0.0, 1.0);
        }
    }
    out
}

/// Missing fields in a serialized spec fall back to the default benchmark.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorSpec {
    pub height: usize,
    pub width: usize,
    pub classes: Vec<ClassSpec>,
    pub domains: Vec<DomainSpec>,
    pub samples_per_cell: usize,
    pub n_base: usize,
    pub seed: u64,
}

/// Twelve classes over four pattern families with distinct colours.
pub fn default_classes() -> Vec<ClassSpec> {
    let families = [Family::Stripe, Family::Ring, Family::Checker, Family::Blob];
    let colors = [
        [1.0, 0.3, 0.2],
        [0.2, 1.0, 0.4],
        [0.3, 0.4, 1.0],
        [0.9, 0.9, 0.1],
        [0.8, 0.2, 0.9],
    ];
    (0..12)
        .map(|i| ClassSpec {
            id: i,
            family: families[i % 4],
            orientation: (i as f64) * PI / 7.0,
            scale: 0.8 + 0.1 * (i % 3) as f64,
            frequency: 1.5 + 0.5 * ((i * 3) % 5) as f64,
            color: colors[(i * 2) % 5],
        })
        .collect()
}

/// Source (identity), near (mild shift) and far (strong shift with texture).
pub fn default_domains() -> Vec<DomainSpec> {
    vec![
        DomainSpec::identity(0, "source"),
        DomainSpec {
            id: 1,
            name: "near".into(),
            mixing: [0.9, 0.1, 0.0, 0.05, 0.85, 0.1, 0.0, 0.15, 0.9],
            gain: [1.1, 0.9, 1.0],
            offset: [0.1, -0.05, 0.05],
            noise_std: 0.1,
            texture_freq: 0.0,
            texture_amplitude: 0.0,
            seed: 101,
        },
        DomainSpec {
            id: 2,
            name: "far".into(),
            mixing: [0.2, 0.7, 0.1, 0.1, 0.2, 0.7, 0.7, 0.1, 0.3],
            gain: [1.6, 0.6, 1.3],
            offset: [0.4, -0.3, 0.2],
            noise_std: 0.25,
            texture_freq: 1.5,
            texture_amplitude: 0.35,
            seed: 202,
        },
    ]
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        GeneratorSpec::default_benchmark(0)
    }
}

impl GeneratorSpec {
    pub fn default_benchmark(seed: u64) -> GeneratorSpec {
        GeneratorSpec {
            height: 16,
            width: 16,
            classes: default_classes(),
            domains: default_domains(),
            samples_per_cell: 60,
            n_base: 7,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes.len() < 10 {
            return Err(CoreError::config("generator needs at least 10 classes"));
        }
        if self.domains.len() < 2 {
            return Err(CoreError::config("generator needs at least 2 domains"));
        }
        if self.samples_per_cell == 0 || self.height == 0 || self.width == 0 {
            return Err(CoreError::config("generator extents must be positive"));
        }
        for (i, c) in self.classes.iter().enumerate() {
            if c.id != i {
                return Err(CoreError::config("class ids must be 0..n in order"));
            }
            c.validate()?;
        }
        for (i, d) in self.domains.iter().enumerate() {
            if d.id != i {
                return Err(CoreError::config("domain ids must be 0..n in order"));
            }
            d.validate()?;
        }
        Ok(())
    }
}

/// Renders every (domain, class, index) sample. Pure in `spec`.
pub fn gen_synthetic(spec: &GeneratorSpec) -> Result<Dataset> {
    spec.validate()?;
    let (base, novel) = split_base_novel(spec.classes.len(), spec.n_base)?;
    let (h, w) = (spec.height, spec.width);
    let raws: Vec<Vec<Vec<f64>>> = spec
        .classes
        .iter()
        .map(|c| (0..spec.samples_per_cell).map(|i| render(c, h, w, spec.seed, i)).collect())
        .collect();
    let cells = spec
        .domains
        .iter()
        .map(|d| {
            raws.iter()
                .enumerate()
                .map(|(c, samples)| {
                    samples
                        .iter()
                        .enumerate()
                        .flat_map(|(i, raw)| d.apply(raw, h, w, c, i))
                        .collect()
                })
                .collect()
        })
        .collect();
    let manifest = DatasetManifest {
        image_shape: [3, h, w],
        classes: spec
            .classes
            .iter()
            .map(|c| ClassEntry {
                id: c.id,
                name: format!("{:?}{}", c.family, c.id).to_lowercase(),
            })
            .collect(),
        base,
        novel,
        domains: spec
            .domains
            .iter()
            .map(|d| DomainEntry {
                id: d.id,
                name: d.name.clone(),
            })
            .collect(),
        samples_per_cell: Some(spec.samples_per_cell),
        files: Vec::new(),
        generator: Some(serde_json::to_value(spec).expect("spec serializes")),
    };
    Dataset::new(manifest, cells)
}
