//! Checkpoint directories: `weights.bin` (little-endian f64 parameters then
//! buffers, layer by layer) plus a `manifest.toml` sidecar.

use std::fmt;
use std::path::Path;

use invguard_nn::{Architecture, Network};
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{
    DiscriminatorHandle, EmbeddingHandle, EncoderHandle, FamilyTag, FeatureExtractorHandle, GeneratorHandle,
};
use crate::image::{ImageShape, ImageTensor};
use crate::latent::{sample_latent, LatentSpec};
use crate::rng::seeded;
use crate::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;
const PROBE_SEED: u64 = 0x5EED_0F_9B0B;
const PROBE_BATCH: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Generator,
    Encoder,
    FeatureExtractor,
    Embedding,
    Discriminator,
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ModelKind::Generator => "generator",
            ModelKind::Encoder => "encoder",
            ModelKind::FeatureExtractor => "feature_extractor",
            ModelKind::Embedding => "embedding",
            ModelKind::Discriminator => "discriminator",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub kind: ModelKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub family: Option<FamilyTag>,
    /// `(H, W, C)` of the image side (generator output or model input).
    pub image_shape: [usize; 3],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latent_dim: Option<usize>,
    pub output_len: usize,
    pub seed: u64,
    /// sha256 of `weights.bin`.
    pub content_hash: String,
    /// sha256 of the model outputs on the fixed probe batch.
    pub probe_hash: String,
    pub architecture: Architecture,
}

impl CheckpointManifest {
    pub fn image_shape(&self) -> ImageShape {
        (self.image_shape[0], self.image_shape[1], self.image_shape[2])
    }
}

/// A model that can be written to and restored from a checkpoint directory.
pub trait Checkpointable: Sized {
    const KIND: ModelKind;
    fn network(&self) -> &Network;
    fn image_shape(&self) -> ImageShape;
    fn family(&self) -> Option<FamilyTag> {
        None
    }
    fn latent_dim(&self) -> Option<usize> {
        None
    }
    fn rebuild(manifest: &CheckpointManifest, net: Network) -> Result<Self>;
}

fn probe_input(kind: ModelKind, manifest_shape: ImageShape, latent_dim: Option<usize>) -> Result<invguard_nn::Tensor> {
    if kind == ModelKind::Generator {
        let dim = latent_dim.ok_or_else(|| Error::Format("generator manifest lacks latent_dim".into()))?;
        let z = sample_latent(&LatentSpec::gaussian(dim)?, PROBE_BATCH, PROBE_SEED)?;
        return super::latents_to_tensor(&z, dim);
    }
    let mut rng = seeded(PROBE_SEED);
    let (h, w, c) = manifest_shape;
    let images: Vec<ImageTensor> = (0..PROBE_BATCH)
        .map(|_| ImageTensor::new(manifest_shape, (0..h * w * c).map(|_| rng.gen::<f64>()).collect()))
        .collect::<Result<_>>()?;
    ImageTensor::to_batch(&images)
}

fn probe_hash<T: Checkpointable>(model: &T) -> Result<String> {
    let x = probe_input(T::KIND, model.image_shape(), model.latent_dim())?;
    let out = model.network().infer(&x)?;
    Ok(hash_f64(out.data()))
}

pub(crate) fn hash_f64(values: &[f64]) -> String {
    let mut h = Sha256::new();
    for v in values {
        h.update(v.to_le_bytes());
    }
    hex::encode(h.finalize())
}

pub fn save_checkpoint<T: Checkpointable>(model: &T, seed: u64, dir: &Path) -> Result<CheckpointManifest> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let bytes = model.network().to_bytes();
    let (h, w, c) = model.image_shape();
    let manifest = CheckpointManifest {
        format_version: FORMAT_VERSION,
        kind: T::KIND,
        family: model.family(),
        image_shape: [h, w, c],
        latent_dim: model.latent_dim(),
        output_len: model.network().output_len(),
        seed,
        content_hash: hex::encode(Sha256::digest(&bytes)),
        probe_hash: probe_hash(model)?,
        architecture: model.network().architecture(),
    };
    let weights = dir.join("weights.bin");
    std::fs::write(&weights, &bytes).map_err(|e| Error::io(&weights, e))?;
    let text = toml::to_string(&manifest).map_err(|e| Error::Format(e.to_string()))?;
    let path = dir.join("manifest.toml");
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<CheckpointManifest> {
    let path = dir.join("manifest.toml");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let m: CheckpointManifest = toml::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    if m.format_version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint format version {}",
            m.format_version
        )));
    }
    Ok(m)
}

/// Loads and verifies a checkpoint: kind, weight hash and probe-output hash.
pub fn load_checkpoint<T: Checkpointable>(dir: &Path) -> Result<T> {
    let manifest = read_manifest(dir)?;
    if manifest.kind != T::KIND {
        return Err(Error::KindMismatch {
            expected: T::KIND.to_string(),
            found: manifest.kind.to_string(),
        });
    }
    let weights = dir.join("weights.bin");
    let bytes = std::fs::read(&weights).map_err(|e| Error::io(&weights, e))?;
    let found = hex::encode(Sha256::digest(&bytes));
    if found != manifest.content_hash {
        return Err(Error::HashMismatch {
            path: weights,
            expected: manifest.content_hash.clone(),
            found,
        });
    }
    let net = Network::from_bytes(&manifest.architecture, &bytes)?;
    let model = T::rebuild(&manifest, net)?;
    let probe = probe_hash(&model)?;
    if probe != manifest.probe_hash {
        return Err(Error::HashMismatch {
            path: dir.join("manifest.toml"),
            expected: manifest.probe_hash.clone(),
            found: probe,
        });
    }
    Ok(model)
}

impl Checkpointable for GeneratorHandle {
    const KIND: ModelKind = ModelKind::Generator;
    fn network(&self) -> &Network {
        &self.net
    }
    fn image_shape(&self) -> ImageShape {
        self.output_shape
    }
    fn family(&self) -> Option<FamilyTag> {
        Some(self.family)
    }
    fn latent_dim(&self) -> Option<usize> {
        Some(self.latent_spec.dim)
    }
    fn rebuild(m: &CheckpointManifest, net: Network) -> Result<Self> {
        let dim = m.latent_dim.ok_or_else(|| Error::Format("generator manifest lacks latent_dim".into()))?;
        let family = m.family.ok_or_else(|| Error::Format("generator manifest lacks family".into()))?;
        GeneratorHandle::new(net, LatentSpec::gaussian(dim)?, m.image_shape(), family)
    }
}

impl Checkpointable for EncoderHandle {
    const KIND: ModelKind = ModelKind::Encoder;
    fn network(&self) -> &Network {
        &self.net
    }
    fn image_shape(&self) -> ImageShape {
        self.input_shape
    }
    fn latent_dim(&self) -> Option<usize> {
        Some(self.latent_spec.dim)
    }
    fn rebuild(m: &CheckpointManifest, net: Network) -> Result<Self> {
        let dim = m.latent_dim.ok_or_else(|| Error::Format("encoder manifest lacks latent_dim".into()))?;
        EncoderHandle::new(net, m.image_shape(), LatentSpec::gaussian(dim)?)
    }
}

impl Checkpointable for FeatureExtractorHandle {
    const KIND: ModelKind = ModelKind::FeatureExtractor;
    fn network(&self) -> &Network {
        &self.net
    }
    fn image_shape(&self) -> ImageShape {
        self.input_shape
    }
    fn rebuild(m: &CheckpointManifest, net: Network) -> Result<Self> {
        FeatureExtractorHandle::new(net, m.image_shape())
    }
}

impl Checkpointable for EmbeddingHandle {
    const KIND: ModelKind = ModelKind::Embedding;
    fn network(&self) -> &Network {
        &self.inner.net
    }
    fn image_shape(&self) -> ImageShape {
        self.inner.input_shape
    }
    fn rebuild(m: &CheckpointManifest, net: Network) -> Result<Self> {
        EmbeddingHandle::new(net, m.image_shape())
    }
}

impl Checkpointable for DiscriminatorHandle {
    const KIND: ModelKind = ModelKind::Discriminator;
    fn network(&self) -> &Network {
        &self.net
    }
    fn image_shape(&self) -> ImageShape {
        self.input_shape
    }
    fn rebuild(m: &CheckpointManifest, net: Network) -> Result<Self> {
        DiscriminatorHandle::new(net, m.image_shape())
    }
}
