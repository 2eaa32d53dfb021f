use invguard_nn::{sigmoid, AdamConfig, Mode, Network, Tensor};
use log::debug;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::training::{adam_for, check_dataset, ensure_finite, gather, softplus};
use super::{arch, DiscriminatorHandle, EncoderHandle, FeatureExtractorHandle, GeneratorHandle};
use crate::image::ImageTensor;
use crate::rng::seeded;
use crate::{Error, Result};

/// Weights of the encoder objective: pixel reconstruction plus
/// `lambda_vgg` times the perceptual term minus `lambda_adv` times the
/// discriminator score, with an R1 penalty of weight `gamma` on the
/// discriminator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderLossWeights {
    pub lambda_vgg: f64,
    pub lambda_adv: f64,
    pub gamma: f64,
}

impl Default for EncoderLossWeights {
    fn default() -> Self {
        Self {
            lambda_vgg: 5e-5,
            lambda_adv: 0.1,
            gamma: 10.0,
        }
    }
}

impl EncoderLossWeights {
    pub fn validate(&self) -> Result<()> {
        if [self.lambda_vgg, self.lambda_adv, self.gamma]
            .iter()
            .any(|v| !v.is_finite() || *v < 0.0)
        {
            return Err(Error::InvalidArgument(format!("encoder loss weights must be >= 0: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderTrainingConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub base_width: usize,
    pub seed: u64,
}

impl Default for EncoderTrainingConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 32,
            learning_rate: 1e-3,
            base_width: 16,
            seed: 0,
        }
    }
}

/// Per-epoch means of each loss component.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EncoderTrace {
    pub total: Vec<f64>,
    pub pixel: Vec<f64>,
    pub feature: Vec<f64>,
    pub adversarial: Vec<f64>,
    pub discriminator: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainedEncoder {
    pub encoder: EncoderHandle,
    pub discriminator: DiscriminatorHandle,
    pub trace: EncoderTrace,
}

/// Trains an encoder into `g`'s latent space against a jointly updated
/// discriminator. When `init` is given, training continues from it.
pub fn train_target_encoder(
    g: &GeneratorHandle,
    d: &DiscriminatorHandle,
    dataset: &[ImageTensor],
    percept: &FeatureExtractorHandle,
    weights: EncoderLossWeights,
    config: &EncoderTrainingConfig,
    init: Option<&EncoderHandle>,
) -> Result<TrainedEncoder> {
    weights.validate()?;
    let shape = g.output_shape();
    check_dataset(dataset, shape)?;
    if d.input_shape() != shape || percept.input_shape() != shape {
        return Err(Error::Shape("discriminator/perceptual input must match generator output".into()));
    }
    let mut rng = seeded(config.seed);
    let mut encoder = match init {
        Some(e) => {
            if e.input_shape() != shape || e.latent_spec() != g.latent_spec() {
                return Err(Error::Shape("initial encoder does not fit the generator".into()));
            }
            e.clone()
        }
        None => {
            let a = arch::encoder(shape, g.latent_spec().dim, config.base_width)?;
            EncoderHandle::new(Network::new(&a, &mut rng)?, shape, *g.latent_spec())?
        }
    };
    let mut disc = d.clone();
    let adam = AdamConfig::with_lr(config.learning_rate);
    let mut opt_e = adam_for(encoder.network(), adam);
    let mut opt_d = adam_for(disc.network(), adam);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut trace = EncoderTrace::default();
    let pixels = dataset[0].len() as f64;
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut sums = [0.0f64; 5];
        let mut batches = 0usize;
        for chunk in order.chunks(config.batch_size.max(1)) {
            let b = chunk.len();
            let bf = b as f64;
            let x = gather(dataset, chunk)?;
            let (z, e_trace) = encoder.network().forward(&x, Mode::Train)?;
            let (x_rec, g_trace) = g.forward(&z)?;

            let mut pixel = 0.0;
            let mut grad: Vec<f64> = x_rec
                .data()
                .iter()
                .zip(x.data())
                .map(|(r, t)| {
                    pixel += (r - t) * (r - t);
                    2.0 * (r - t) / (pixels * bf)
                })
                .collect();
            pixel /= pixels * bf;

            let mut feature = 0.0;
            if weights.lambda_vgg > 0.0 {
                let (f_rec, p_trace) = percept.forward(&x_rec)?;
                let f_real = percept.network().infer(&x)?;
                let fd = percept.feature_dim() as f64;
                let gf: Vec<f64> = f_rec
                    .data()
                    .iter()
                    .zip(f_real.data())
                    .map(|(r, t)| {
                        feature += (r - t) * (r - t);
                        weights.lambda_vgg * 2.0 * (r - t) / (fd * bf)
                    })
                    .collect();
                feature /= fd * bf;
                let dx = percept.backward(&p_trace, &Tensor::new(f_rec.shape().to_vec(), gf)?)?;
                grad.iter_mut().zip(dx.data()).for_each(|(a, b)| *a += b);
            }

            let mut adversarial = 0.0;
            if weights.lambda_adv > 0.0 {
                let (logits, d_trace) = disc.network().forward(&x_rec, Mode::Train)?;
                let gl: Vec<f64> = logits
                    .data()
                    .iter()
                    .map(|&l| {
                        adversarial += softplus(-l);
                        -weights.lambda_adv * sigmoid(-l) / bf
                    })
                    .collect();
                adversarial /= bf;
                let dx = disc.network().backward(&d_trace, &Tensor::new(vec![b, 1], gl)?)?;
                grad.iter_mut().zip(dx.data()).for_each(|(a, b)| *a += b);
            }

            let total = pixel + weights.lambda_vgg * feature + weights.lambda_adv * adversarial;
            ensure_finite("train_target_encoder", total)?;
            let dz = g.backward(&g_trace, &Tensor::new(x_rec.shape().to_vec(), grad)?)?;
            let (_, e_grads) = encoder.network().backward_full(&e_trace, &dz)?;
            opt_e.step(encoder.network_mut().params_mut(), &e_grads.0);

            let d_loss = if weights.lambda_adv > 0.0 {
                discriminator_step(&mut disc, &mut opt_d, &x, &x_rec, weights.gamma)?
            } else {
                0.0
            };
            for (s, v) in sums.iter_mut().zip([total, pixel, feature, adversarial, d_loss]) {
                *s += v;
            }
            batches += 1;
        }
        let n = batches.max(1) as f64;
        trace.total.push(sums[0] / n);
        trace.pixel.push(sums[1] / n);
        trace.feature.push(sums[2] / n);
        trace.adversarial.push(sums[3] / n);
        trace.discriminator.push(sums[4] / n);
        debug!("encoder epoch: total {:.5} pixel {:.5}", sums[0] / n, sums[1] / n);
    }
    Ok(TrainedEncoder {
        encoder,
        discriminator: disc,
        trace,
    })
}

/// One discriminator update on `softplus(D(fake)) + softplus(-D(real)) +
/// gamma/2 |grad_x D(real)|^2`. The penalty's parameter gradient is a
/// central difference of parameter gradients along the input gradient.
fn discriminator_step(
    disc: &mut DiscriminatorHandle,
    opt: &mut invguard_nn::Adam,
    real: &Tensor,
    fake: &Tensor,
    gamma: f64,
) -> Result<f64> {
    let b = real.batch();
    let bf = b as f64;
    let net = disc.network();
    let (lr, tr) = net.forward(real, Mode::Train)?;
    let (lf, tf) = net.forward(fake, Mode::Train)?;
    let mut loss = 0.0;
    let gr: Vec<f64> = lr
        .data()
        .iter()
        .map(|&l| {
            loss += softplus(-l);
            -sigmoid(-l) / bf
        })
        .collect();
    let gf: Vec<f64> = lf
        .data()
        .iter()
        .map(|&l| {
            loss += softplus(l);
            sigmoid(l) / bf
        })
        .collect();
    loss /= bf;
    let (_, mut grads) = net.backward_full(&tr, &Tensor::new(vec![b, 1], gr)?)?;
    let (_, g2) = net.backward_full(&tf, &Tensor::new(vec![b, 1], gf)?)?;
    grads.add_scaled(&g2, 1.0);

    if gamma > 0.0 {
        let ones = Tensor::new(vec![b, 1], vec![1.0; b])?;
        let gx = net.backward(&tr, &ones)?;
        let penalty = gx.data().iter().map(|v| v * v).sum::<f64>() / bf;
        loss += 0.5 * gamma * penalty;
        let scale = gx.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if scale > 0.0 {
            let h = 1e-4 / scale;
            let plus = real.zip_map(&gx, |a, g| a + h * g)?;
            let minus = real.zip_map(&gx, |a, g| a - h * g)?;
            let (_, tp) = net.forward(&plus, Mode::Train)?;
            let (_, tm) = net.forward(&minus, Mode::Train)?;
            let (_, gp) = net.backward_full(&tp, &ones)?;
            let (_, gm) = net.backward_full(&tm, &ones)?;
            let k = gamma / bf / (2.0 * h);
            grads.add_scaled(&gp, k);
            grads.add_scaled(&gm, -k);
        }
    }
    ensure_finite("train_target_encoder discriminator", loss)?;
    opt.step(disc.network_mut().params_mut(), &grads.0);
    Ok(loss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::latent::{sample_latent, LatentSpec};
    use crate::models::FamilyTag;

    fn setup() -> (GeneratorHandle, DiscriminatorHandle, FeatureExtractorHandle, Vec<ImageTensor>) {
        let shape = (8, 8, 3);
        let mut rng = seeded(4);
        let g = GeneratorHandle::new(
            Network::new(&arch::dcgan_generator(6, shape, 4).unwrap(), &mut rng).unwrap(),
            LatentSpec::gaussian(6).unwrap(),
            shape,
            FamilyTag::DcganLike,
        )
        .unwrap();
        let d = DiscriminatorHandle::new(Network::new(&arch::discriminator(shape, 4).unwrap(), &mut rng).unwrap(), shape)
            .unwrap();
        let p = FeatureExtractorHandle::new(Network::new(&arch::encoder(shape, 5, 4).unwrap(), &mut rng).unwrap(), shape)
            .unwrap();
        let z = sample_latent(g.latent_spec(), 16, 1).unwrap();
        let data = g.generate_batch(&z).unwrap();
        (g, d, p, data)
    }

    #[test]
    fn paper_defaults() {
        let w = EncoderLossWeights::default();
        assert_eq!((w.lambda_vgg, w.lambda_adv, w.gamma), (5e-5, 0.1, 10.0));
    }

    #[test]
    fn zero_weights_reduce_to_pixel_loss() {
        let (g, d, p, data) = setup();
        let w = EncoderLossWeights {
            lambda_vgg: 0.0,
            lambda_adv: 0.0,
            gamma: 10.0,
        };
        let cfg = EncoderTrainingConfig {
            epochs: 3,
            batch_size: 8,
            base_width: 4,
            ..Default::default()
        };
        let t = train_target_encoder(&g, &d, &data, &p, w, &cfg, None).unwrap();
        assert_eq!(t.trace.total, t.trace.pixel);
    }

    #[test]
    fn full_objective_trains_and_reduces_pixel_error() {
        let (g, d, p, data) = setup();
        let cfg = EncoderTrainingConfig {
            epochs: 25,
            batch_size: 8,
            base_width: 4,
            learning_rate: 3e-3,
            ..Default::default()
        };
        let t = train_target_encoder(&g, &d, &data, &p, EncoderLossWeights::default(), &cfg, None).unwrap();
        assert!(t.trace.pixel.last().unwrap() < &t.trace.pixel[0]);
        assert!(t.trace.discriminator.iter().all(|v| v.is_finite()));
        assert_ne!(t.discriminator, d);
    }

    #[test]
    fn penalty_gradient_matches_finite_differences() {
        // Parameter gradient of gamma/2 * mean |grad_x D|^2 against a direct
        // central difference over one parameter.
        let (_, d, _, data) = setup();
        let real = ImageTensor::to_batch(&data[..4]).unwrap();
        let penalty = |net: &Network| {
            let (_, tr) = net.forward(&real, Mode::Train).unwrap();
            let ones = Tensor::new(vec![4, 1], vec![1.0; 4]).unwrap();
            let gx = net.backward(&tr, &ones).unwrap();
            gx.data().iter().map(|v| v * v).sum::<f64>() / 4.0
        };
        let net = d.network();
        let (_, tr) = net.forward(&real, Mode::Train).unwrap();
        let ones = Tensor::new(vec![4, 1], vec![1.0; 4]).unwrap();
        let gx = net.backward(&tr, &ones).unwrap();
        let scale = gx.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let h = 1e-4 / scale;
        let (_, tp) = net.forward(&real.zip_map(&gx, |a, g| a + h * g).unwrap(), Mode::Train).unwrap();
        let (_, tm) = net.forward(&real.zip_map(&gx, |a, g| a - h * g).unwrap(), Mode::Train).unwrap();
        let (_, gp) = net.backward_full(&tp, &ones).unwrap();
        let (_, gm) = net.backward_full(&tm, &ones).unwrap();
        // d/dtheta (mean |g|^2) = 2/N * [..]/(2h)
        for (layer, idx) in [(0usize, 3usize), (0, 10), (2, 1)] {
            let analytic = 2.0 / 4.0 * (gp.0[layer][idx] - gm.0[layer][idx]) / (2.0 * h);
            let eps = 1e-6;
            let mut a = net.clone();
            a.params_mut()[layer][idx] += eps;
            let mut b = net.clone();
            b.params_mut()[layer][idx] -= eps;
            let numeric = (penalty(&a) - penalty(&b)) / (2.0 * eps);
            assert!(
                (analytic - numeric).abs() <= 1e-4 * numeric.abs().max(1e-3),
                "param ({layer},{idx}): {analytic} vs {numeric}"
            );
        }
    }
}
