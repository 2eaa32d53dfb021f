//! The desk model zoo: sprite dataset, DCGAN, identity embedder, cloak
//! feature extractor, perceptual network, target encoder and the two
//! shadow encoders, with optional on-disk caching per component.
//!
//! A cached component is reused only when its key (its own config plus the
//! content hashes of everything it was trained from) matches.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cloaks::{steal_encoder, train_shadow_encoder_v0, ShadowEncoderConfig, StealConfig};
use crate::dataset::{render_sprites, FaceDataset, SpriteConfig};
use crate::metrics::{calibrate_on_images, ThresholdCalibration};
use crate::models::{
    load_checkpoint, save_checkpoint, train_classifier, train_gan, train_target_encoder, Checkpointable,
    ClassifierConfig, DiscriminatorHandle, EmbeddingHandle, EncoderHandle, EncoderLossWeights,
    EncoderTrainingConfig, FeatureExtractorHandle, GanConfig, GeneratorHandle,
};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZooConfig {
    pub sprites: SpriteConfig,
    pub gan: GanConfig,
    /// Identity embedder used for matching.
    pub embedder: ClassifierConfig,
    /// Cloak feature extractor `F`.
    pub features: ClassifierConfig,
    /// Perceptual network of the inversion objective.
    pub percept: ClassifierConfig,
    pub encoder: EncoderTrainingConfig,
    pub encoder_weights: EncoderLossWeights,
    pub shadow: ShadowEncoderConfig,
    pub steal: StealConfig,
    pub calibration_pairs: usize,
    pub calibration_seed: u64,
}

impl Default for ZooConfig {
    fn default() -> Self {
        Self {
            sprites: SpriteConfig::default(),
            gan: GanConfig {
                epochs: 200,
                ..GanConfig::default()
            },
            embedder: ClassifierConfig {
                seed: 11,
                ..ClassifierConfig::default()
            },
            features: ClassifierConfig {
                seed: 12,
                ..ClassifierConfig::default()
            },
            percept: ClassifierConfig {
                seed: 13,
                ..ClassifierConfig::default()
            },
            encoder: EncoderTrainingConfig {
                seed: 14,
                ..EncoderTrainingConfig::default()
            },
            encoder_weights: EncoderLossWeights::default(),
            shadow: ShadowEncoderConfig {
                seed: 15,
                ..ShadowEncoderConfig::default()
            },
            steal: StealConfig {
                seed: 16,
                ..StealConfig::default()
            },
            calibration_pairs: 200,
            calibration_seed: 17,
        }
    }
}

#[derive(Debug, Clone)]
pub struct DeskZoo {
    pub dataset: FaceDataset,
    pub generator: GeneratorHandle,
    pub discriminator: DiscriminatorHandle,
    pub embedder: EmbeddingHandle,
    pub features: FeatureExtractorHandle,
    pub percept: FeatureExtractorHandle,
    pub target_encoder: EncoderHandle,
    /// Gray-box shadow encoder trained on `(G_t(z), z)` pairs.
    pub shadow_encoder: EncoderHandle,
    /// Black-box copy of the target encoder.
    pub stolen_encoder: EncoderHandle,
    pub shadow_generator: GeneratorHandle,
    pub calibration: ThresholdCalibration,
}

struct Cache {
    root: Option<PathBuf>,
}

fn key_of<C: Serialize>(config: &C, upstream: &[&str]) -> Result<String> {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(config).map_err(|e| Error::Format(e.to_string()))?);
    for u in upstream {
        h.update(u.as_bytes());
    }
    Ok(hex::encode(h.finalize()))
}

fn weights_hash<T: Checkpointable>(model: &T) -> String {
    hex::encode(Sha256::digest(model.network().to_bytes()))
}

impl Cache {
    fn dir(&self, name: &str) -> Option<PathBuf> {
        self.root.as_ref().map(|r| r.join(name))
    }

    fn fresh(&self, name: &str, key: &str) -> Option<PathBuf> {
        let dir = self.dir(name)?;
        let stored = fs::read_to_string(dir.join("key.txt")).ok()?;
        (stored.trim() == key).then_some(dir)
    }

    /// Loads the named models when the key matches, otherwise trains and
    /// stores them.
    fn models<F>(&self, name: &str, key: &str, parts: &[&str], train: F) -> Result<Vec<PathBuf>>
    where
        F: FnOnce(&Path) -> Result<()>,
    {
        if let Some(dir) = self.fresh(name, key) {
            if parts.iter().all(|p| dir.join(p).join("manifest.toml").exists()) {
                info!("zoo: reusing {name}");
                return Ok(parts.iter().map(|p| dir.join(p)).collect());
            }
        }
        let dir = self
            .dir(name)
            .ok_or_else(|| Error::InvalidArgument("cache directory required".into()))?;
        let _ = fs::remove_dir_all(&dir);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let start = Instant::now();
        train(&dir)?;
        fs::write(dir.join("key.txt"), key).map_err(|e| Error::io(&dir, e))?;
        info!("zoo: trained {name} in {:.1}s", start.elapsed().as_secs_f64());
        Ok(parts.iter().map(|p| dir.join(p)).collect())
    }
}

fn classifier_pair(
    dataset: &FaceDataset,
    labels: &[usize],
    cfg: &ClassifierConfig,
) -> Result<crate::models::TrainedClassifier> {
    train_classifier(&dataset.images, labels, cfg)
}

/// Builds every zoo component, reusing cached checkpoints under `cache`
/// when given. Without a cache everything is trained in memory.
pub fn build_zoo(cfg: &ZooConfig, cache: Option<&Path>) -> Result<DeskZoo> {
    let dataset = render_sprites(&cfg.sprites)?;
    let shape = dataset
        .shape()
        .ok_or_else(|| Error::InvalidArgument("sprite dataset is empty".into()))?;
    let labels = dataset
        .identities
        .clone()
        .ok_or_else(|| Error::InvalidArgument("sprite dataset has no identities".into()))?;
    let data_key = key_of(&cfg.sprites, &[])?;

    match cache {
        None => build_in_memory(cfg, dataset, labels),
        Some(root) => {
            fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
            let cache = Cache {
                root: Some(root.to_path_buf()),
            };

            let gan_key = key_of(&cfg.gan, &[&data_key])?;
            let p = cache.models("gan", &gan_key, &["generator", "discriminator"], |dir| {
                let (g, d, _) = train_gan(&dataset.images, &cfg.gan)?;
                save_checkpoint(&g, cfg.gan.seed, &dir.join("generator"))?;
                save_checkpoint(&d, cfg.gan.seed, &dir.join("discriminator"))?;
                Ok(())
            })?;
            let generator: GeneratorHandle = load_checkpoint(&p[0])?;
            let discriminator: DiscriminatorHandle = load_checkpoint(&p[1])?;

            let classifier = |name: &str, c: &ClassifierConfig, embedding: bool| -> Result<PathBuf> {
                let key = key_of(c, &[&data_key, name])?;
                let p = cache.models(name, &key, &["model"], |dir| {
                    let t = classifier_pair(&dataset, &labels, c)?;
                    if embedding {
                        save_checkpoint(&t.embedding(shape)?, c.seed, &dir.join("model"))?;
                    } else {
                        save_checkpoint(&t.features(shape)?, c.seed, &dir.join("model"))?;
                    }
                    Ok(())
                })?;
                Ok(p[0].clone())
            };
            let embedder: EmbeddingHandle = load_checkpoint(&classifier("embedder", &cfg.embedder, true)?)?;
            let features: FeatureExtractorHandle = load_checkpoint(&classifier("features", &cfg.features, false)?)?;
            let percept: FeatureExtractorHandle = load_checkpoint(&classifier("percept", &cfg.percept, false)?)?;

            let g_hash = weights_hash(&generator);
            let enc_key = key_of(
                &(&cfg.encoder, &cfg.encoder_weights),
                &[&data_key, &g_hash, &weights_hash(&discriminator), &weights_hash(&percept)],
            )?;
            let p = cache.models("target_encoder", &enc_key, &["model"], |dir| {
                let t = train_target_encoder(
                    &generator,
                    &discriminator,
                    &dataset.images,
                    &percept,
                    cfg.encoder_weights,
                    &cfg.encoder,
                    None,
                )?;
                save_checkpoint(&t.encoder, cfg.encoder.seed, &dir.join("model"))?;
                Ok(())
            })?;
            let target_encoder: EncoderHandle = load_checkpoint(&p[0])?;

            let shadow_key = key_of(&cfg.shadow, &[&g_hash])?;
            let p = cache.models("shadow_encoder", &shadow_key, &["model"], |dir| {
                let t = train_shadow_encoder_v0(&generator, &cfg.shadow)?;
                save_checkpoint(&t.encoder, cfg.shadow.seed, &dir.join("model"))?;
                Ok(())
            })?;
            let shadow_encoder: EncoderHandle = load_checkpoint(&p[0])?;

            let steal_key = key_of(&cfg.steal, &[&weights_hash(&target_encoder)])?;
            let p = cache.models("stolen_encoder", &steal_key, &["encoder", "generator"], |dir| {
                let t = steal_encoder(&target_encoder, &cfg.steal)?;
                save_checkpoint(&t.encoder, cfg.steal.seed, &dir.join("encoder"))?;
                save_checkpoint(&t.shadow_generator, cfg.steal.seed, &dir.join("generator"))?;
                Ok(())
            })?;
            let stolen_encoder: EncoderHandle = load_checkpoint(&p[0])?;
            let shadow_generator: GeneratorHandle = load_checkpoint(&p[1])?;

            let calibration =
                calibrate_on_images(&embedder, &dataset.images, &labels, cfg.calibration_pairs, cfg.calibration_seed)?;
            Ok(DeskZoo {
                dataset,
                generator,
                discriminator,
                embedder,
                features,
                percept,
                target_encoder,
                shadow_encoder,
                stolen_encoder,
                shadow_generator,
                calibration,
            })
        }
    }
}

fn build_in_memory(cfg: &ZooConfig, dataset: FaceDataset, labels: Vec<usize>) -> Result<DeskZoo> {
    let shape = dataset.shape().expect("checked non-empty");
    let (generator, discriminator, _) = train_gan(&dataset.images, &cfg.gan)?;
    let embedder = classifier_pair(&dataset, &labels, &cfg.embedder)?.embedding(shape)?;
    let features = classifier_pair(&dataset, &labels, &cfg.features)?.features(shape)?;
    let percept = classifier_pair(&dataset, &labels, &cfg.percept)?.features(shape)?;
    let target_encoder = train_target_encoder(
        &generator,
        &discriminator,
        &dataset.images,
        &percept,
        cfg.encoder_weights,
        &cfg.encoder,
        None,
    )?
    .encoder;
    let shadow_encoder = train_shadow_encoder_v0(&generator, &cfg.shadow)?.encoder;
    let stolen = steal_encoder(&target_encoder, &cfg.steal)?;
    let calibration =
        calibrate_on_images(&embedder, &dataset.images, &labels, cfg.calibration_pairs, cfg.calibration_seed)?;
    Ok(DeskZoo {
        dataset,
        generator,
        discriminator,
        embedder,
        features,
        percept,
        target_encoder,
        shadow_encoder,
        stolen_encoder: stolen.encoder,
        shadow_generator: stolen.shadow_generator,
        calibration,
    })
}
