use invguard_nn::{sigmoid, Adam, AdamConfig, Mode, Network, Tensor};
use log::debug;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{arch, latents_to_tensor, DiscriminatorHandle, FamilyTag, FeatureExtractorHandle, GeneratorHandle};
use crate::image::{ImageShape, ImageTensor};
use crate::latent::{sample_latent, LatentSpec};
use crate::rng::{derive_seed, seeded};
use crate::{Error, Result};

pub(crate) const BN_MOMENTUM: f64 = 0.1;

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub(crate) fn ensure_finite(stage: &str, value: f64) -> Result<()> {
    if !value.is_finite() {
        return Err(Error::NonFinite {
            stage: stage.into(),
            detail: format!("loss became {value}"),
        });
    }
    Ok(())
}

pub(crate) fn adam_for(net: &Network, config: AdamConfig) -> Adam {
    Adam::new(config, &net.params().iter().map(|p| p.len()).collect::<Vec<_>>())
}

pub(crate) fn check_dataset(images: &[ImageTensor], shape: ImageShape) -> Result<()> {
    if images.is_empty() {
        return Err(Error::InvalidArgument("empty dataset".into()));
    }
    if let Some(bad) = images.iter().find(|i| i.shape() != shape) {
        return Err(Error::Shape(format!(
            "dataset image {:?} does not match configured {shape:?}",
            bad.shape()
        )));
    }
    Ok(())
}

pub(crate) fn gather(images: &[ImageTensor], idx: &[usize]) -> Result<Tensor> {
    let picked: Vec<ImageTensor> = idx.iter().map(|&i| images[i].clone()).collect();
    ImageTensor::to_batch(&picked)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum GanArchitecture {
    Dcgan {
        generator_width: usize,
        discriminator_width: usize,
    },
    /// For low-dimensional point data stored as `1 x 1 x C` images.
    Mlp { hidden: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GanConfig {
    pub resolution: ImageShape,
    pub latent_dim: usize,
    pub architecture: GanArchitecture,
    pub family: FamilyTag,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub seed: u64,
}

impl Default for GanConfig {
    fn default() -> Self {
        Self {
            resolution: (32, 32, 3),
            latent_dim: 100,
            architecture: GanArchitecture::Dcgan {
                generator_width: 16,
                discriminator_width: 16,
            },
            family: FamilyTag::DcganLike,
            epochs: 20,
            batch_size: 32,
            learning_rate: 2e-4,
            beta1: 0.5,
            seed: 0,
        }
    }
}

/// Per-epoch mean losses.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GanTrace {
    pub discriminator_loss: Vec<f64>,
    pub generator_loss: Vec<f64>,
}

impl GanConfig {
    /// Untrained generator and discriminator for this configuration.
    pub fn initial_models(&self) -> Result<(GeneratorHandle, DiscriminatorHandle)> {
        let mut rng = seeded(self.seed);
        let (ga, da) = match self.architecture {
            GanArchitecture::Dcgan {
                generator_width,
                discriminator_width,
            } => (
                arch::dcgan_generator(self.latent_dim, self.resolution, generator_width)?,
                arch::discriminator(self.resolution, discriminator_width)?,
            ),
            GanArchitecture::Mlp { hidden } => (
                arch::mlp_generator(self.latent_dim, self.resolution, hidden),
                arch::mlp_discriminator(self.resolution, hidden),
            ),
        };
        let g = GeneratorHandle::new(
            Network::new(&ga, &mut rng)?,
            LatentSpec::gaussian(self.latent_dim)?,
            self.resolution,
            self.family,
        )?;
        let d = DiscriminatorHandle::new(Network::new(&da, &mut rng)?, self.resolution)?;
        Ok((g, d))
    }
}

/// Re-estimates batch-norm running statistics from one large train-mode
/// batch of generated samples.
pub fn recalibrate_batch_norm(g: &mut GeneratorHandle, samples: usize, seed: u64) -> Result<()> {
    let z = sample_latent(g.latent_spec(), samples.max(2), seed)?;
    let t = latents_to_tensor(&z, g.latent_spec().dim)?;
    let (_, trace) = g.network().forward(&t, Mode::Train)?;
    g.network_mut().commit_batch_stats(&trace, 1.0);
    Ok(())
}

/// Adversarial training with the non-saturating logistic loss.
pub fn train_gan(
    dataset: &[ImageTensor],
    config: &GanConfig,
) -> Result<(GeneratorHandle, DiscriminatorHandle, GanTrace)> {
    check_dataset(dataset, config.resolution)?;
    if config.batch_size < 2 {
        return Err(Error::InvalidArgument("GAN batch size must be at least 2".into()));
    }
    let (mut g, mut d) = config.initial_models()?;
    let adam = AdamConfig {
        lr: config.learning_rate,
        beta1: config.beta1,
        ..AdamConfig::default()
    };
    let mut opt_g = adam_for(g.network(), adam);
    let mut opt_d = adam_for(d.network(), adam);
    let mut rng = seeded(derive_seed(config.seed, 1));
    let mut trace = GanTrace::default();
    let dim = config.latent_dim;
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut step = 0u64;
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let (mut d_sum, mut g_sum, mut batches) = (0.0, 0.0, 0usize);
        for chunk in order.chunks(config.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let b = chunk.len();
            let real = gather(dataset, chunk)?;

            // Discriminator step.
            let z = latents_to_tensor(&sample_latent(g.latent_spec(), b, derive_seed(derive_seed(config.seed, 10), step))?, dim)?;
            let (fake, _) = g.network().forward(&z, Mode::Train)?;
            let (lr_real, tr_real) = d.network().forward(&real, Mode::Train)?;
            let (lr_fake, tr_fake) = d.network().forward(&fake, Mode::Train)?;
            let mut d_loss = 0.0;
            let gr: Vec<f64> = lr_real
                .data()
                .iter()
                .map(|&l| {
                    d_loss += softplus(-l);
                    -sigmoid(-l) / b as f64
                })
                .collect();
            let gf: Vec<f64> = lr_fake
                .data()
                .iter()
                .map(|&l| {
                    d_loss += softplus(l);
                    sigmoid(l) / b as f64
                })
                .collect();
            d_loss /= b as f64;
            ensure_finite("train_gan discriminator", d_loss)?;
            let (_, mut grads) = d.network().backward_full(&tr_real, &Tensor::new(vec![b, 1], gr)?)?;
            let (_, gfake) = d.network().backward_full(&tr_fake, &Tensor::new(vec![b, 1], gf)?)?;
            grads.add_scaled(&gfake, 1.0);
            opt_d.step(d.network_mut().params_mut(), &grads.0);

            // Generator step.
            let z = latents_to_tensor(&sample_latent(g.latent_spec(), b, derive_seed(derive_seed(config.seed, 11), step))?, dim)?;
            let (fake, g_trace) = g.network().forward(&z, Mode::Train)?;
            let (logits, d_trace) = d.network().forward(&fake, Mode::Train)?;
            let mut g_loss = 0.0;
            let gl: Vec<f64> = logits
                .data()
                .iter()
                .map(|&l| {
                    g_loss += softplus(-l);
                    -sigmoid(-l) / b as f64
                })
                .collect();
            g_loss /= b as f64;
            ensure_finite("train_gan generator", g_loss)?;
            let dx = d.network().backward(&d_trace, &Tensor::new(vec![b, 1], gl)?)?;
            let (_, ggrads) = g.network().backward_full(&g_trace, &dx)?;
            g.network_mut().commit_batch_stats(&g_trace, BN_MOMENTUM);
            opt_g.step(g.network_mut().params_mut(), &ggrads.0);

            d_sum += d_loss;
            g_sum += g_loss;
            batches += 1;
            step += 1;
        }
        let n = batches.max(1) as f64;
        trace.discriminator_loss.push(d_sum / n);
        trace.generator_loss.push(g_sum / n);
        debug!("gan epoch {epoch}: d {:.4} g {:.4}", d_sum / n, g_sum / n);
    }
    if config.epochs > 0 && g.network().layers().iter().any(|l| matches!(l.spec(), invguard_nn::LayerSpec::BatchNorm { .. })) {
        recalibrate_batch_norm(&mut g, 512, derive_seed(config.seed, 3))?;
    }
    Ok((g, d, trace))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifierConfig {
    pub feature_dim: usize,
    pub base_width: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Random shifts, flips, brightness jitter and pixel noise.
    pub augment: bool,
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            feature_dim: 64,
            base_width: 16,
            epochs: 15,
            batch_size: 32,
            learning_rate: 1e-3,
            augment: true,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainedClassifier {
    /// Full network including the classification head.
    pub network: Network,
    pub loss_trace: Vec<f64>,
    pub train_accuracy: f64,
}

impl TrainedClassifier {
    /// Penultimate-layer embedding trunk.
    pub fn features(&self, shape: ImageShape) -> Result<FeatureExtractorHandle> {
        let n = self.network.layers().len();
        FeatureExtractorHandle::new(self.network.truncated(n - 1)?, shape)
    }

    pub fn embedding(&self, shape: ImageShape) -> Result<super::EmbeddingHandle> {
        let n = self.network.layers().len();
        super::EmbeddingHandle::new(self.network.truncated(n - 1)?, shape)
    }
}

fn augment(img: &ImageTensor, rng: &mut impl Rng) -> ImageTensor {
    let (h, w, c) = img.shape();
    let dx: isize = rng.gen_range(-2..=2);
    let dy: isize = rng.gen_range(-2..=2);
    let flip = rng.gen_bool(0.5);
    let gain: f64 = rng.gen_range(0.9..1.1);
    let mut out = ImageTensor::filled((h, w, c), 0.0);
    for y in 0..h {
        for x in 0..w {
            let sx = (x as isize - dx).clamp(0, w as isize - 1) as usize;
            let sx = if flip { w - 1 - sx } else { sx };
            let sy = (y as isize - dy).clamp(0, h as isize - 1) as usize;
            for ch in 0..c {
                let noise: f64 = rng.gen_range(-0.02..0.02);
                out.set(y, x, ch, (img.get(sy, sx, ch) * gain + noise).clamp(0.0, 1.0));
            }
        }
    }
    out
}

/// Cross-entropy training of an identity classifier.
pub fn train_classifier(images: &[ImageTensor], labels: &[usize], config: &ClassifierConfig) -> Result<TrainedClassifier> {
    let shape = images
        .first()
        .map(|i| i.shape())
        .ok_or_else(|| Error::InvalidArgument("empty dataset".into()))?;
    check_dataset(images, shape)?;
    if labels.len() != images.len() {
        return Err(Error::InvalidArgument(format!(
            "{} labels for {} images",
            labels.len(),
            images.len()
        )));
    }
    let classes = labels.iter().max().map(|m| m + 1).unwrap_or(0);
    if classes < 2 {
        return Err(Error::InvalidArgument("classifier needs at least two classes".into()));
    }
    let mut rng = seeded(config.seed);
    let arch = arch::classifier(shape, config.feature_dim, classes, config.base_width)?;
    let mut net = Network::new(&arch, &mut rng)?;
    let mut opt = adam_for(&net, AdamConfig::with_lr(config.learning_rate));
    let mut order: Vec<usize> = (0..images.len()).collect();
    let mut loss_trace = Vec::with_capacity(config.epochs);
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        let (mut total, mut count) = (0.0, 0usize);
        for chunk in order.chunks(config.batch_size.max(1)) {
            let batch: Vec<ImageTensor> = chunk
                .iter()
                .map(|&i| if config.augment { augment(&images[i], &mut rng) } else { images[i].clone() })
                .collect();
            let x = ImageTensor::to_batch(&batch)?;
            let (logits, trace) = net.forward(&x, Mode::Train)?;
            let mut grad = vec![0.0; logits.len()];
            for (k, &i) in chunk.iter().enumerate() {
                let row = logits.item(k);
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
                total += z.ln() + m - row[labels[i]];
                for (j, v) in row.iter().enumerate() {
                    let p = (v - m).exp() / z;
                    grad[k * classes + j] = (p - f64::from(u8::from(j == labels[i]))) / chunk.len() as f64;
                }
            }
            count += chunk.len();
            let (_, grads) = net.backward_full(&trace, &Tensor::new(logits.shape().to_vec(), grad)?)?;
            opt.step(net.params_mut(), &grads.0);
        }
        let mean = total / count.max(1) as f64;
        ensure_finite("train_classifier", mean)?;
        loss_trace.push(mean);
    }
    let logits = net.infer(&ImageTensor::to_batch(images)?)?;
    let correct = (0..images.len())
        .filter(|&k| {
            let row = logits.item(k);
            let arg = row
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |acc, (j, &v)| if v > acc.1 { (j, v) } else { acc })
                .0;
            arg == labels[k]
        })
        .count();
    Ok(TrainedClassifier {
        network: net,
        loss_trace,
        train_accuracy: correct as f64 / images.len() as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softplus_is_stable() {
        assert!((softplus(0.0) - 2f64.ln()).abs() < 1e-12);
        assert!((softplus(800.0) - 800.0).abs() < 1e-9);
        assert!(softplus(-800.0) >= 0.0);
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let cfg = GanConfig {
            resolution: (8, 8, 3),
            latent_dim: 4,
            architecture: GanArchitecture::Dcgan {
                generator_width: 4,
                discriminator_width: 4,
            },
            epochs: 0,
            ..GanConfig::default()
        };
        let data = vec![ImageTensor::filled((8, 8, 3), 0.5); 4];
        let (g, d, trace) = train_gan(&data, &cfg).unwrap();
        let (g0, d0) = cfg.initial_models().unwrap();
        assert_eq!(g, g0);
        assert_eq!(d, d0);
        assert!(trace.generator_loss.is_empty());
    }

    #[test]
    fn rejects_empty_and_mismatched_datasets() {
        let cfg = GanConfig {
            resolution: (8, 8, 3),
            ..GanConfig::default()
        };
        assert!(train_gan(&[], &cfg).is_err());
        assert!(train_gan(&[ImageTensor::filled((4, 4, 3), 0.0)], &cfg).is_err());
    }

    #[test]
    fn classifier_learns_separable_colors() {
        let mut images = Vec::new();
        let mut labels = Vec::new();
        for k in 0..12 {
            let label = k % 2;
            images.push(ImageTensor::filled((8, 8, 3), 0.2 + 0.6 * label as f64));
            labels.push(label);
        }
        let cfg = ClassifierConfig {
            feature_dim: 8,
            base_width: 4,
            epochs: 40,
            batch_size: 4,
            learning_rate: 1e-2,
            augment: false,
            ..ClassifierConfig::default()
        };
        let c = train_classifier(&images, &labels, &cfg).unwrap();
        assert_eq!(c.train_accuracy, 1.0);
        assert!(c.loss_trace.last().unwrap() < &c.loss_trace[0]);
        assert_eq!(c.features((8, 8, 3)).unwrap().feature_dim(), 8);
    }
}
