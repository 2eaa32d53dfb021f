//! Shadow encoders for the gray-box (v0) and black-box (v3) cloaks.

use invguard_nn::{AdamConfig, Mode, Network, Tensor};
use log::debug;
use serde::{Deserialize, Serialize};

use crate::image::ImageTensor;
use crate::latent::{sample_latent, LatentSpec};
use crate::losses::{cosine_unchecked, similarity_grad_into, similarity_unchecked};
use crate::models::training::{adam_for, ensure_finite, BN_MOMENTUM};
use crate::models::{arch, latents_to_tensor, EncoderHandle, FamilyTag, GeneratorHandle};
use crate::rng::{derive_seed, seeded};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ShadowEncoderConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub base_width: usize,
    pub seed: u64,
}

impl Default for ShadowEncoderConfig {
    fn default() -> Self {
        Self {
            steps: 1500,
            batch_size: 32,
            learning_rate: 1e-3,
            base_width: 16,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ShadowTraining {
    pub encoder: EncoderHandle,
    /// Mean batch similarity loss per step.
    pub loss_trace: Vec<f64>,
}

fn check_batch(batch: usize) -> Result<()> {
    if batch == 0 {
        return Err(Error::InvalidArgument("batch size must be positive".into()));
    }
    Ok(())
}

fn mean_cosine(a: &Tensor, b: &Tensor) -> f64 {
    (0..a.batch()).map(|i| cosine_unchecked(a.item(i), b.item(i))).sum::<f64>() / a.batch() as f64
}

/// Mean cosine between `e(G(z))` and `z` over `n` fresh codes.
pub fn latent_agreement(e: &EncoderHandle, g: &GeneratorHandle, n: usize, seed: u64) -> Result<f64> {
    let z = latents_to_tensor(&sample_latent(g.latent_spec(), n, seed)?, g.latent_spec().dim)?;
    let x = g.network().infer(&z)?;
    Ok(mean_cosine(&e.network().infer(&x)?, &z))
}

/// Mean cosine between two encoders' outputs on the same probes.
pub fn encoder_agreement(a: &EncoderHandle, b: &EncoderHandle, probes: &[ImageTensor]) -> Result<f64> {
    let x = ImageTensor::to_batch(probes)?;
    Ok(mean_cosine(&a.network().infer(&x)?, &b.network().infer(&x)?))
}

/// Batch similarity loss `mean_i sim(pred_i, target_i)` and its gradient
/// with respect to `pred`.
fn similarity_batch(pred: &Tensor, target: &Tensor, scale: f64) -> (f64, Vec<f64>) {
    let b = pred.batch();
    let d = pred.item_len();
    let mut grad = vec![0.0; pred.len()];
    let mut loss = 0.0;
    for i in 0..b {
        loss += similarity_unchecked(pred.item(i), target.item(i));
        similarity_grad_into(pred.item(i), target.item(i), scale / b as f64, &mut grad[i * d..(i + 1) * d]);
    }
    (loss / b as f64, grad)
}

/// Fits a fresh encoder on `(G_t(z), z)` pairs drawn on the fly, minimizing
/// `sim(E_s(G_t(z)), z)`.
pub fn train_shadow_encoder_v0(g_t: &GeneratorHandle, config: &ShadowEncoderConfig) -> Result<ShadowTraining> {
    check_batch(config.batch_size)?;
    let shape = g_t.output_shape();
    let spec = *g_t.latent_spec();
    let mut rng = seeded(config.seed);
    let a = arch::encoder(shape, spec.dim, config.base_width)?;
    let mut encoder = EncoderHandle::new(Network::new(&a, &mut rng)?, shape, spec)?;
    let mut opt = adam_for(encoder.network(), AdamConfig::with_lr(config.learning_rate));
    let mut loss_trace = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let z = latents_to_tensor(
            &sample_latent(&spec, config.batch_size, derive_seed(config.seed, 1 + step as u64))?,
            spec.dim,
        )?;
        let x = g_t.network().infer(&z)?;
        let (pred, trace) = encoder.network().forward(&x, Mode::Train)?;
        let (loss, grad) = similarity_batch(&pred, &z, 1.0);
        ensure_finite("train_shadow_encoder_v0", loss)?;
        let (_, grads) = encoder.network().backward_full(&trace, &Tensor::new(pred.shape().to_vec(), grad)?)?;
        opt.step(encoder.network_mut().params_mut(), &grads.0);
        loss_trace.push(loss);
        if step % 100 == 0 {
            debug!("shadow encoder step {step}: {loss:.5}");
        }
    }
    Ok(ShadowTraining { encoder, loss_trace })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StealConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub encoder_learning_rate: f64,
    pub generator_learning_rate: f64,
    pub encoder_width: usize,
    pub generator_width: usize,
    /// Input width of the shadow generator's noise.
    pub noise_dim: usize,
    pub seed: u64,
}

impl Default for StealConfig {
    fn default() -> Self {
        Self {
            steps: 1500,
            batch_size: 32,
            encoder_learning_rate: 1e-3,
            generator_learning_rate: 2e-4,
            encoder_width: 16,
            generator_width: 16,
            noise_dim: 64,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct StolenEncoder {
    pub encoder: EncoderHandle,
    pub shadow_generator: GeneratorHandle,
    pub encoder_loss: Vec<f64>,
    pub generator_loss: Vec<f64>,
}

/// Data-free stealing with query access to `e_t` only. The shadow encoder
/// minimizes `sim(E_s(G_s(n)), E_t(G_s(n)))` while the shadow generator
/// maximizes it, steering queries toward inputs where the copies disagree.
/// Target outputs are labels: no gradient flows through `e_t`.
pub fn steal_encoder(e_t: &EncoderHandle, config: &StealConfig) -> Result<StolenEncoder> {
    check_batch(config.batch_size)?;
    let shape = e_t.input_shape();
    let spec = *e_t.latent_spec();
    let noise = LatentSpec::gaussian(config.noise_dim)?;
    let mut rng = seeded(config.seed);
    let ea = arch::encoder(shape, spec.dim, config.encoder_width)?;
    let mut encoder = EncoderHandle::new(Network::new(&ea, &mut rng)?, shape, spec)?;
    let ga = arch::shadow_generator(config.noise_dim, shape, config.generator_width)?;
    let mut shadow = GeneratorHandle::new(Network::new(&ga, &mut rng)?, noise, shape, FamilyTag::DcganLike)?;
    let mut opt_e = adam_for(encoder.network(), AdamConfig::with_lr(config.encoder_learning_rate));
    let mut opt_g = adam_for(
        shadow.network(),
        AdamConfig {
            beta1: 0.5,
            ..AdamConfig::with_lr(config.generator_learning_rate)
        },
    );
    let mut encoder_loss = Vec::with_capacity(config.steps);
    let mut generator_loss = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let n = latents_to_tensor(
            &sample_latent(&noise, config.batch_size, derive_seed(config.seed, 1 + step as u64))?,
            config.noise_dim,
        )?;

        // Encoder step on detached queries.
        let (x, g_trace) = shadow.network().forward(&n, Mode::Train)?;
        let labels = e_t.network().infer(&x)?;
        let (pred, e_trace) = encoder.network().forward(&x, Mode::Train)?;
        let (loss_e, grad) = similarity_batch(&pred, &labels, 1.0);
        ensure_finite("steal_encoder encoder", loss_e)?;
        let (_, grads) = encoder.network().backward_full(&e_trace, &Tensor::new(pred.shape().to_vec(), grad)?)?;
        opt_e.step(encoder.network_mut().params_mut(), &grads.0);

        // Generator step against the updated encoder.
        let (pred, e_trace) = encoder.network().forward(&x, Mode::Train)?;
        let (sim, grad) = similarity_batch(&pred, &labels, -1.0);
        ensure_finite("steal_encoder generator", sim)?;
        let dx = encoder.network().backward(&e_trace, &Tensor::new(pred.shape().to_vec(), grad)?)?;
        let (_, ggrads) = shadow.network().backward_full(&g_trace, &dx)?;
        shadow.network_mut().commit_batch_stats(&g_trace, BN_MOMENTUM);
        opt_g.step(shadow.network_mut().params_mut(), &ggrads.0);

        encoder_loss.push(loss_e);
        generator_loss.push(-sim);
        if step % 100 == 0 {
            debug!("steal step {step}: encoder {loss_e:.5} generator {:.5}", -sim);
        }
    }
    Ok(StolenEncoder {
        encoder,
        shadow_generator: shadow,
        encoder_loss,
        generator_loss,
    })
}
