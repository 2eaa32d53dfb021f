//! Optimization-based and hybrid GAN inversion.
//!
//! The objective is `w_p * mse(P(G(z)), P(x)) + w_pix * mse(G(z), x)` over
//! the latent code `z`, minimized with Adam. Several targets are inverted
//! as one batch; every model runs in eval mode, so each target's
//! trajectory is independent of its batch mates.

use std::io::Write;
use std::path::Path;

use invguard_nn::{Adam, AdamConfig, Tensor};
use serde::{Deserialize, Serialize};

use crate::image::ImageTensor;
use crate::latent::{sample_latent, LatentCode, LatentSpec};
use crate::models::{latents_to_tensor, tensor_to_latents, EncoderHandle, FeatureExtractorHandle, GeneratorHandle};
use crate::rng::derive_seed;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    Gaussian,
    Zeros,
    Encoder,
}

/// `(perceptual, pixel)` weights of the reconstruction objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub perceptual: f64,
    pub pixel: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            perceptual: 1.0,
            pixel: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        if !ok(self.perceptual) || !ok(self.pixel) || (self.perceptual == 0.0 && self.pixel == 0.0) {
            return Err(Error::InvalidArgument(format!(
                "loss weights must be >= 0 and not both zero: {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InversionConfig {
    pub iterations: usize,
    pub init_mode: InitMode,
    /// Adam step size on `z`.
    pub learning_rate: f64,
    pub loss_weights: LossWeights,
    pub seed: u64,
}

impl InversionConfig {
    /// 500 Adam steps from a Gaussian draw.
    pub fn optimization() -> Self {
        Self {
            iterations: 500,
            init_mode: InitMode::Gaussian,
            learning_rate: 0.01,
            loss_weights: LossWeights::default(),
            seed: 0,
        }
    }

    /// 100 Adam steps from the encoder's prediction.
    pub fn hybrid() -> Self {
        Self {
            iterations: 100,
            init_mode: InitMode::Encoder,
            ..Self::optimization()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.loss_weights.validate()?;
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument("inversion learning rate must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossPoint {
    pub iteration: usize,
    pub total: f64,
    pub perceptual: f64,
    pub pixel: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InversionResult {
    pub z_star: LatentCode,
    pub reconstruction: ImageTensor,
    /// One entry per iteration plus the initial point.
    pub loss_trace: Vec<LossPoint>,
}

impl InversionResult {
    pub fn initial_loss(&self) -> f64 {
        self.loss_trace[0].total
    }

    pub fn final_loss(&self) -> f64 {
        self.loss_trace[self.loss_trace.len() - 1].total
    }
}

/// Weighted perceptual + pixel MSE between two images.
pub fn reconstruction_objective(
    x: &ImageTensor,
    x_prime: &ImageTensor,
    percept: Option<&FeatureExtractorHandle>,
    weights: LossWeights,
) -> Result<f64> {
    weights.validate()?;
    x.ensure_same_shape(x_prime)?;
    let mut total = 0.0;
    if weights.pixel > 0.0 {
        total += weights.pixel * crate::losses::mse(x.data(), x_prime.data())?;
    }
    if weights.perceptual > 0.0 {
        let p = percept.ok_or_else(|| Error::InvalidArgument("perceptual weight set but no perceptual network".into()))?;
        let f = p.extract_batch(&[x.clone(), x_prime.clone()])?;
        total += weights.perceptual * crate::losses::mse(&f[0], &f[1])?;
    }
    Ok(total)
}

pub fn init_latent(
    mode: InitMode,
    spec: &LatentSpec,
    encoder: Option<&EncoderHandle>,
    x: Option<&ImageTensor>,
    seed: u64,
) -> Result<LatentCode> {
    match mode {
        InitMode::Gaussian => Ok(sample_latent(spec, 1, seed)?.remove(0)),
        InitMode::Zeros => Ok(LatentCode::zeros(spec.dim)),
        InitMode::Encoder => {
            let (e, x) = encoder
                .zip(x)
                .ok_or_else(|| Error::InvalidArgument("encoder initialization needs an encoder and an image".into()))?;
            if e.latent_spec().dim != spec.dim {
                return Err(Error::Shape(format!(
                    "encoder produces {}-dim codes, latent space has {}",
                    e.latent_spec().dim,
                    spec.dim
                )));
            }
            e.encode(x)
        }
    }
}

/// Initial codes for a batch; Gaussian draws use the stream
/// `derive_seed(seed, i)` for the `i`-th target.
pub fn init_latents(
    mode: InitMode,
    spec: &LatentSpec,
    encoder: Option<&EncoderHandle>,
    targets: &[ImageTensor],
    seed: u64,
) -> Result<Vec<LatentCode>> {
    match mode {
        InitMode::Encoder => {
            let e = encoder.ok_or_else(|| Error::InvalidArgument("encoder initialization needs an encoder".into()))?;
            init_latent(mode, spec, Some(e), targets.first(), seed)?;
            e.encode_batch(targets)
        }
        _ => (0..targets.len())
            .map(|i| init_latent(mode, spec, None, None, derive_seed(seed, i as u64)))
            .collect(),
    }
}

/// Inverts one image from a Gaussian or zero initialization.
pub fn invert_optimize(
    g: &GeneratorHandle,
    x: &ImageTensor,
    percept: Option<&FeatureExtractorHandle>,
    cfg: &InversionConfig,
) -> Result<InversionResult> {
    if cfg.init_mode == InitMode::Encoder {
        return Err(Error::InvalidArgument("invert_optimize takes gaussian or zeros initialization".into()));
    }
    Ok(invert_batch(g, std::slice::from_ref(x), percept, None, cfg)?.remove(0))
}

/// Inverts one image starting from the encoder's prediction.
pub fn invert_hybrid(
    g: &GeneratorHandle,
    e: &EncoderHandle,
    x: &ImageTensor,
    percept: Option<&FeatureExtractorHandle>,
    cfg: &InversionConfig,
) -> Result<InversionResult> {
    let cfg = InversionConfig {
        init_mode: InitMode::Encoder,
        ..cfg.clone()
    };
    Ok(invert_batch(g, std::slice::from_ref(x), percept, Some(e), &cfg)?.remove(0))
}

/// Batched inversion with the configured initialization.
pub fn invert_batch(
    g: &GeneratorHandle,
    targets: &[ImageTensor],
    percept: Option<&FeatureExtractorHandle>,
    encoder: Option<&EncoderHandle>,
    cfg: &InversionConfig,
) -> Result<Vec<InversionResult>> {
    cfg.validate()?;
    let inits = init_latents(cfg.init_mode, g.latent_spec(), encoder, targets, cfg.seed)?;
    invert_from(g, targets, percept, inits, cfg)
}

struct Evaluation {
    perceptual: Vec<f64>,
    pixel: Vec<f64>,
    grad: Option<Tensor>,
}

/// Batched Adam descent on `z` from explicit starting codes.
pub fn invert_from(
    g: &GeneratorHandle,
    targets: &[ImageTensor],
    percept: Option<&FeatureExtractorHandle>,
    inits: Vec<LatentCode>,
    cfg: &InversionConfig,
) -> Result<Vec<InversionResult>> {
    Ok(invert_with_snapshots(g, targets, percept, inits, cfg, &[])?.0)
}

/// Latent codes of a batch after a given number of steps.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub iteration: usize,
    pub codes: Vec<LatentCode>,
}

/// [`invert_from`] that also records the codes after each listed step
/// count. A snapshot at `k` equals the result of a `k`-iteration run.
pub fn invert_with_snapshots(
    g: &GeneratorHandle,
    targets: &[ImageTensor],
    percept: Option<&FeatureExtractorHandle>,
    inits: Vec<LatentCode>,
    cfg: &InversionConfig,
    snapshot_at: &[usize],
) -> Result<(Vec<InversionResult>, Vec<Snapshot>)> {
    cfg.validate()?;
    if let Some(k) = snapshot_at.iter().find(|&&k| k > cfg.iterations) {
        return Err(Error::InvalidArgument(format!(
            "snapshot at {k} beyond {} iterations",
            cfg.iterations
        )));
    }
    let mut snapshots = Vec::new();
    if targets.is_empty() || inits.len() != targets.len() {
        return Err(Error::InvalidArgument(format!(
            "{} initial codes for {} targets",
            inits.len(),
            targets.len()
        )));
    }
    for x in targets {
        if x.shape() != g.output_shape() {
            return Err(Error::Shape(format!(
                "target {:?} does not match generator output {:?}",
                x.shape(),
                g.output_shape()
            )));
        }
    }
    let w = cfg.loss_weights;
    let percept = if w.perceptual > 0.0 {
        Some(percept.ok_or_else(|| Error::InvalidArgument("perceptual weight set but no perceptual network".into()))?)
    } else {
        None
    };
    let x_batch = ImageTensor::to_batch(targets)?;
    let x_feat = match percept {
        Some(p) => Some(p.network().infer(&x_batch)?),
        None => None,
    };
    let dim = g.latent_spec().dim;
    let n = targets.len();
    let mut z = latents_to_tensor(&inits, dim)?;
    let mut adam = Adam::new(AdamConfig::with_lr(cfg.learning_rate), &[z.len()]);
    let mut traces: Vec<Vec<LossPoint>> = vec![Vec::with_capacity(cfg.iterations + 1); n];

    let evaluate = |z: &Tensor, want_grad: bool| -> Result<Evaluation> {
        let (img, g_trace) = g.forward(z)?;
        let mut pixel = vec![0.0; n];
        let mut grad = vec![0.0; img.len()];
        for i in 0..n {
            let (a, b) = (img.item(i), x_batch.item(i));
            pixel[i] = crate::losses::mse_unchecked(a, b);
            if want_grad && w.pixel > 0.0 {
                crate::losses::mse_grad_into(a, b, w.pixel, &mut grad[i * a.len()..(i + 1) * a.len()]);
            }
        }
        let mut perceptual = vec![0.0; n];
        if let (Some(p), Some(xf)) = (percept, x_feat.as_ref()) {
            let (f, p_trace) = p.forward(&img)?;
            let mut gf = vec![0.0; f.len()];
            let fd = f.item_len();
            for i in 0..n {
                perceptual[i] = crate::losses::mse_unchecked(f.item(i), xf.item(i));
                if want_grad {
                    crate::losses::mse_grad_into(f.item(i), xf.item(i), w.perceptual, &mut gf[i * fd..(i + 1) * fd]);
                }
            }
            if want_grad {
                let dx = p.backward(&p_trace, &Tensor::new(f.shape().to_vec(), gf)?)?;
                grad.iter_mut().zip(dx.data()).for_each(|(a, b)| *a += b);
            }
        }
        let grad = if want_grad {
            Some(g.backward(&g_trace, &Tensor::new(img.shape().to_vec(), grad)?)?)
        } else {
            None
        };
        Ok(Evaluation { perceptual, pixel, grad })
    };

    for it in 0..=cfg.iterations {
        if snapshot_at.contains(&it) {
            snapshots.push(Snapshot {
                iteration: it,
                codes: tensor_to_latents(&z),
            });
        }
        let last = it == cfg.iterations;
        let ev = evaluate(&z, !last)?;
        for i in 0..n {
            let total = w.perceptual * ev.perceptual[i] + w.pixel * ev.pixel[i];
            traces[i].push(LossPoint {
                iteration: it,
                total,
                perceptual: ev.perceptual[i],
                pixel: ev.pixel[i],
            });
            if !total.is_finite() {
                return Err(Error::NonFinite {
                    stage: "inversion".into(),
                    detail: format!("target {i} at iteration {it}: trace {:?}", traces[i]),
                });
            }
        }
        if let Some(grad) = ev.grad {
            if !grad.all_finite() {
                return Err(Error::NonFinite {
                    stage: "inversion".into(),
                    detail: format!("gradient at iteration {it}"),
                });
            }
            adam.step(vec![z.data_mut()], &[grad.into_data()]);
        }
    }
    let codes = tensor_to_latents(&z);
    let recon = g.generate_batch(&codes)?;
    let results = codes
        .into_iter()
        .zip(recon)
        .zip(traces)
        .map(|((z_star, reconstruction), loss_trace)| InversionResult {
            z_star,
            reconstruction,
            loss_trace,
        })
        .collect();
    Ok((results, snapshots))
}

/// Writes `iteration,total,perceptual,pixel` rows.
pub fn write_trace(path: &Path, trace: &[LossPoint]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut text = String::from("iteration,total,perceptual,pixel\n");
    for p in trace {
        text.push_str(&format!("{},{:e},{:e},{:e}\n", p.iteration, p.total, p.perceptual, p.pixel));
    }
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}
