//! Adaptive adversaries that try to undo a cloak: noise overwriting, box
//! filter purification, longer inversion, and encoder retraining on a
//! poisoned mix.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::image::ImageTensor;
use crate::inversion::{init_latents, invert_with_snapshots, InversionConfig, InversionResult};
use crate::models::{
    train_target_encoder, DiscriminatorHandle, EncoderHandle, EncoderLossWeights, EncoderTrainingConfig,
    FeatureExtractorHandle, GeneratorHandle, TrainedEncoder,
};
use crate::rng::seeded;
use crate::{Error, Result};

pub const MAX_ITERATIONS: usize = 5000;
pub const MAX_SIGMA: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "strategy", rename_all = "snake_case")]
pub enum AdaptiveStrategy {
    Overwrite { sigmas: Vec<f64> },
    Purify { widths: Vec<usize> },
    MoreIterations { iterations: Vec<usize> },
    EncoderEnhancement { cloaked_counts: Vec<usize> },
}

impl AdaptiveStrategy {
    pub fn name(&self) -> &'static str {
        match self {
            AdaptiveStrategy::Overwrite { .. } => "overwrite",
            AdaptiveStrategy::Purify { .. } => "purify",
            AdaptiveStrategy::MoreIterations { .. } => "more_iterations",
            AdaptiveStrategy::EncoderEnhancement { .. } => "encoder_enhancement",
        }
    }

    /// Sweep values as reported, in order.
    pub fn parameters(&self) -> Vec<f64> {
        match self {
            AdaptiveStrategy::Overwrite { sigmas } => sigmas.clone(),
            AdaptiveStrategy::Purify { widths } => widths.iter().map(|&w| w as f64).collect(),
            AdaptiveStrategy::MoreIterations { iterations } => iterations.iter().map(|&i| i as f64).collect(),
            AdaptiveStrategy::EncoderEnhancement { cloaked_counts } => cloaked_counts.iter().map(|&c| c as f64).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptiveConfig {
    #[serde(flatten)]
    pub strategy: AdaptiveStrategy,
    pub seed: u64,
}

impl AdaptiveConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if self.strategy.parameters().is_empty() {
            return bad(format!("{} sweep has no parameters", self.strategy.name()));
        }
        match &self.strategy {
            AdaptiveStrategy::Overwrite { sigmas } => {
                if let Some(s) = sigmas.iter().find(|s| !(0.0..=MAX_SIGMA).contains(*s)) {
                    return bad(format!("overwrite sigma {s} outside [0, {MAX_SIGMA}]"));
                }
            }
            AdaptiveStrategy::Purify { widths } => {
                if let Some(w) = widths.iter().find(|w| **w % 2 == 0) {
                    return bad(format!("purify width {w} must be odd and >= 1"));
                }
            }
            AdaptiveStrategy::MoreIterations { iterations } => {
                if let Some(i) = iterations.iter().find(|i| **i > MAX_ITERATIONS) {
                    return bad(format!("{i} iterations exceed {MAX_ITERATIONS}"));
                }
            }
            AdaptiveStrategy::EncoderEnhancement { .. } => {}
        }
        Ok(())
    }
}

/// `clip(x̂ + N(0, σ²))`. The result may leave the cloak's budget.
pub fn overwrite_cloak(xhat: &ImageTensor, sigma: f64, seed: u64) -> Result<ImageTensor> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidArgument(format!("overwrite sigma {sigma} must be >= 0")));
    }
    if sigma == 0.0 {
        return Ok(xhat.clone());
    }
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let mut rng = seeded(seed);
    let mut out = xhat.clone();
    for v in out.data_mut() {
        *v += normal.sample(&mut rng);
    }
    Ok(out.clip_unit())
}

/// Mean over a `width x width` neighbourhood with edge padding.
pub fn purify(xhat: &ImageTensor, width: usize) -> Result<ImageTensor> {
    if width % 2 == 0 {
        return Err(Error::InvalidArgument(format!("purify width {width} must be odd and >= 1")));
    }
    if width == 1 {
        return Ok(xhat.clone());
    }
    let (h, w, c) = xhat.shape();
    let r = (width / 2) as isize;
    let clamp = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;
    let area = (width * width) as f64;
    let mut out = xhat.clone();
    for ch in 0..c {
        let plane = xhat.plane(ch);
        for y in 0..h {
            for x in 0..w {
                let mut s = 0.0;
                for dy in -r..=r {
                    let row = clamp(y as isize + dy, h) * w;
                    for dx in -r..=r {
                        s += plane[row + clamp(x as isize + dx, w)];
                    }
                }
                out.set(y, x, ch, s / area);
            }
        }
    }
    Ok(out.clip_unit())
}

/// Inversion with an enlarged budget of up to [`MAX_ITERATIONS`] steps.
pub fn invert_extended(
    g: &GeneratorHandle,
    encoder: Option<&EncoderHandle>,
    xhats: &[ImageTensor],
    percept: Option<&FeatureExtractorHandle>,
    cfg: &InversionConfig,
    iterations: usize,
) -> Result<Vec<InversionResult>> {
    Ok(extended_run(g, encoder, xhats, percept, cfg, iterations, &[])?.0)
}

/// Reconstructions after each requested iteration count, from one run of
/// the largest count.
pub fn invert_extended_curve(
    g: &GeneratorHandle,
    encoder: Option<&EncoderHandle>,
    xhats: &[ImageTensor],
    percept: Option<&FeatureExtractorHandle>,
    cfg: &InversionConfig,
    iterations: &[usize],
) -> Result<Vec<(usize, Vec<ImageTensor>)>> {
    let longest = iterations.iter().copied().max().ok_or_else(|| Error::InvalidArgument("no iteration counts".into()))?;
    let (_, snaps) = extended_run(g, encoder, xhats, percept, cfg, longest, iterations)?;
    iterations
        .iter()
        .map(|&k| {
            let snap = snaps.iter().find(|s| s.iteration == k).expect("snapshot recorded");
            Ok((k, g.generate_batch(&snap.codes)?))
        })
        .collect()
}

fn extended_run(
    g: &GeneratorHandle,
    encoder: Option<&EncoderHandle>,
    xhats: &[ImageTensor],
    percept: Option<&FeatureExtractorHandle>,
    cfg: &InversionConfig,
    iterations: usize,
    snapshot_at: &[usize],
) -> Result<(Vec<InversionResult>, Vec<crate::inversion::Snapshot>)> {
    if iterations > MAX_ITERATIONS {
        return Err(Error::InvalidArgument(format!("{iterations} iterations exceed {MAX_ITERATIONS}")));
    }
    let cfg = InversionConfig {
        iterations,
        ..cfg.clone()
    };
    let inits = init_latents(cfg.init_mode, g.latent_spec(), encoder, xhats, cfg.seed)?;
    invert_with_snapshots(g, xhats, percept, inits, &cfg, snapshot_at)
}

/// Continues training `e_t` with the encoder objective on `clean` followed
/// by `cloaked`. An empty cloaked set is plain continued training.
#[allow(clippy::too_many_arguments)]
pub fn retrain_encoder(
    e_t: &EncoderHandle,
    g: &GeneratorHandle,
    d: &DiscriminatorHandle,
    percept: &FeatureExtractorHandle,
    clean: &[ImageTensor],
    cloaked: &[ImageTensor],
    weights: EncoderLossWeights,
    config: &EncoderTrainingConfig,
) -> Result<TrainedEncoder> {
    if clean.is_empty() {
        return Err(Error::InvalidArgument("retraining needs clean images".into()));
    }
    let mix: Vec<ImageTensor> = clean.iter().chain(cloaked).cloned().collect();
    train_target_encoder(g, d, &mix, percept, weights, config, Some(e_t))
}
