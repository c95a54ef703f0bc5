//! Parameter groups of a run and their on-disk checkpoint form.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use afa_core::adversary::DomainDiscriminator;
use afa_core::encoder::{EncoderConfig, Encoder, LinearClassifier, Perturbation};
use afa_core::Parameters;
use afa_tensor::{load_tensor_file, save_tensor_file, Tensor};
use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

pub const CHECKPOINT_MANIFEST: &str = "checkpoint.json";

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub encoder: Encoder,
    pub afa: Option<Perturbation>,
    pub discriminator: Option<DomainDiscriminator>,
    pub classifier: Option<LinearClassifier>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AfaKind {
    Affine,
    Conv,
}

impl Model {
    /// Every named tensor: trainable parameters first, then buffers.
    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out: Vec<(String, Tensor)> = self
            .encoder
            .named()
            .into_iter()
            .map(|(n, t)| (n, t.clone()))
            .collect();
        let mut push = |p: Option<&dyn Parameters>| {
            if let Some(p) = p {
                out.extend(p.named().into_iter().map(|(n, t)| (n, t.clone())));
            }
        };
        push(self.afa.as_ref().map(|p| p as &dyn Parameters));
        push(self.discriminator.as_ref().map(|p| p as &dyn Parameters));
        push(self.classifier.as_ref().map(|p| p as &dyn Parameters));
        out.extend(self.encoder.buffers());
        out
    }

    /// Trainable scalar count per group: (encoder, afa, discriminator, classifier).
    pub fn census(&self) -> (usize, usize, usize, usize) {
        (
            self.encoder.census(),
            self.afa.as_ref().map_or(0, |p| p.census()),
            self.discriminator.as_ref().map_or(0, |p| p.census()),
            self.classifier.as_ref().map_or(0, |p| p.census()),
        )
    }

    /// Rounds every tensor through f32 so the in-memory model equals what a
    /// checkpoint round trip yields.
    pub fn round_to_f32(&mut self) {
        let round = |t: &mut Tensor| {
            for v in t.data_mut() {
                *v = *v as f32 as f64;
            }
        };
        for t in self.encoder.tensors_mut() {
            round(t);
        }
        for b in &mut self.encoder.blocks {
            for v in b.norm.running_mean.iter_mut().chain(b.norm.running_var.iter_mut()) {
                *v = *v as f32 as f64;
            }
        }
        if let Some(p) = &mut self.afa {
            p.tensors_mut().into_iter().for_each(round);
        }
        if let Some(p) = &mut self.discriminator {
            p.tensors_mut().into_iter().for_each(round);
        }
        if let Some(p) = &mut self.classifier {
            p.tensors_mut().into_iter().for_each(round);
        }
    }

    fn afa_kind(&self) -> Option<AfaKind> {
        self.afa.as_ref().map(|p| match p {
            Perturbation::Affine(_) => AfaKind::Affine,
            Perturbation::Conv(_) => AfaKind::Conv,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub file: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: u32,
    pub stage: String,
    pub config_hash: String,
    pub seed: u64,
    pub encoder: EncoderConfig,
    pub afa: Option<AfaKind>,
    pub discriminator: bool,
    /// Output width of the base-class classifier, if present.
    pub classifier_classes: Option<usize>,
    pub tensors: Vec<TensorEntry>,
}

/// Writes `checkpoint.json` and one AFAT file per tensor into `dir`.
pub fn save_checkpoint(dir: &Path, model: &Model, stage: &str, config_hash: &str, seed: u64) -> Result<PathBuf> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut tensors = Vec::new();
    for (name, t) in model.named_tensors() {
        let file = format!("{name}.afat");
        save_tensor_file(dir.join(&file), &t)?;
        tensors.push(TensorEntry {
            name,
            file,
            shape: t.shape().to_vec(),
        });
    }
    let manifest = CheckpointManifest {
        format: 1,
        stage: stage.to_string(),
        config_hash: config_hash.to_string(),
        seed,
        encoder: model.encoder.config.clone(),
        afa: model.afa_kind(),
        discriminator: model.discriminator.is_some(),
        classifier_classes: model.classifier.as_ref().map(|c| c.classes()),
        tensors,
    };
    let path = dir.join(CHECKPOINT_MANIFEST);
    fs::write(&path, serde_json::to_string_pretty(&manifest)?)
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(path)
}

pub fn load_checkpoint(path: &Path) -> Result<(Model, CheckpointManifest)> {
    let manifest_path = if path.is_dir() { path.join(CHECKPOINT_MANIFEST) } else { path.to_path_buf() };
    let dir = manifest_path.parent().unwrap_or(Path::new(".")).to_path_buf();
    let text = fs::read_to_string(&manifest_path)
        .with_context(|| format!("reading checkpoint {}", manifest_path.display()))?;
    let manifest: CheckpointManifest =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", manifest_path.display()))?;
    if manifest.format != 1 {
        bail!("unsupported checkpoint format {}", manifest.format);
    }
    let mut tensors = BTreeMap::new();
    for e in &manifest.tensors {
        let t = load_tensor_file(dir.join(&e.file))?;
        if t.shape() != e.shape.as_slice() {
            bail!("{}: shape {:?} does not match manifest {:?}", e.file, t.shape(), e.shape);
        }
        tensors.insert(e.name.clone(), t);
    }
    let lookup = |n: &str| tensors.get(n).cloned();

    let mut rng = afa_tensor::Rng::new(0);
    let mut encoder = Encoder::init(&manifest.encoder, &mut rng)?;
    encoder.load_named(&lookup)?;
    encoder.load_buffers(&lookup)?;
    let sites: Vec<usize> = manifest.encoder.channels.clone();
    let afa = match manifest.afa {
        None => None,
        Some(AfaKind::Affine) => {
            let mut p = Perturbation::identity(&sites)?;
            p.load_named(&lookup)?;
            Some(p)
        }
        Some(AfaKind::Conv) => {
            let mut p = Perturbation::Conv(
                sites
                    .iter()
                    .map(|&c| Tensor::zeros(&[c, c, 3, 3]))
                    .collect::<afa_tensor::Result<_>>()?,
            );
            p.load_named(&lookup)?;
            Some(p)
        }
    };
    let discriminator = if manifest.discriminator {
        let mut d = DomainDiscriminator::zeros(manifest.encoder.output_channels())?;
        d.load_named(&lookup)?;
        Some(d)
    } else {
        None
    };
    let classifier = match manifest.classifier_classes {
        Some(k) => {
            let mut c = LinearClassifier::zeros(manifest.encoder.output_channels(), k)?;
            c.load_named(&lookup)?;
            Some(c)
        }
        None => None,
    };
    Ok((
        Model {
            encoder,
            afa,
            discriminator,
            classifier,
        },
        manifest,
    ))
}
