//! Cloak searches: sign-gradient ascent on a deviation objective under an
//! L∞ budget, with every iterate clipped back into `[0, 1]`.
//!
//! | scenario | latent term                         | typical adversary |
//! |----------|-------------------------------------|-------------------|
//! | v0       | away from the inverted anchor, E_s  | optimization      |
//! | v1, v4   | none (feature deviation only)       | optimization / hybrid |
//! | v2       | toward zero through the target E_t  | hybrid            |
//! | v3       | toward zero through a stolen E_s    | hybrid            |

mod objective;
mod schedule;
mod shadow;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::image::{clip_unit as clip_value, ImageTensor};
use crate::inversion::{invert_batch, InversionConfig};
use crate::latent::LatentCode;
use crate::models::{EncoderHandle, FeatureExtractorHandle, GeneratorHandle};
use crate::rng::{derive_seed, seeded};
use crate::{Error, Result};

pub use objective::{CloakObjective, LatentTerm};
pub use schedule::{
    budget_for, default_kappa_grid, grid_search_kappa, table_kappa, BudgetSchedule, KappaSearch, LEVELS,
};
pub use shadow::{
    encoder_agreement, latent_agreement, steal_encoder, train_shadow_encoder_v0, ShadowEncoderConfig, ShadowTraining,
    StealConfig, StolenEncoder,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    V0,
    V1,
    V2,
    V3,
    V4,
}

impl Scenario {
    pub const ALL: [Scenario; 5] = [Scenario::V0, Scenario::V1, Scenario::V2, Scenario::V3, Scenario::V4];

    pub fn as_str(self) -> &'static str {
        match self {
            Scenario::V0 => "v0",
            Scenario::V1 => "v1",
            Scenario::V2 => "v2",
            Scenario::V3 => "v3",
            Scenario::V4 => "v4",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown cloak scenario {s:?}")))
    }

    /// Whether the cloak targets hybrid (encoder-initialized) inversion.
    pub fn against_hybrid(self) -> bool {
        matches!(self, Scenario::V2 | Scenario::V3 | Scenario::V4)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CloakConfig {
    pub epsilon: f64,
    pub kappa: f64,
    pub iterations: usize,
    pub scenario: Scenario,
    /// Sign-step size; `None` means `epsilon / 10`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step_size: Option<f64>,
    pub seed: u64,
}

impl CloakConfig {
    pub fn new(scenario: Scenario, epsilon: f64, kappa: f64) -> Self {
        Self {
            epsilon,
            kappa,
            iterations: 500,
            scenario,
            step_size: None,
            seed: 0,
        }
    }

    pub fn step(&self) -> f64 {
        self.step_size.unwrap_or(self.epsilon / 10.0)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon <= 0.2) {
            return Err(Error::InvalidArgument(format!("epsilon {} outside (0, 0.2]", self.epsilon)));
        }
        if !(0.0..=1.0).contains(&self.kappa) {
            return Err(Error::InvalidArgument(format!("kappa {} outside [0, 1]", self.kappa)));
        }
        if !(self.step() > 0.0 && self.step().is_finite()) {
            return Err(Error::InvalidArgument("cloak step size must be positive".into()));
        }
        Ok(())
    }

    fn expect(&self, allowed: &[Scenario]) -> Result<()> {
        if !allowed.contains(&self.scenario) {
            return Err(Error::InvalidArgument(format!(
                "scenario {} not valid here (expected one of {:?})",
                self.scenario.as_str(),
                allowed
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CloakResult {
    pub cloaked: ImageTensor,
    /// `cloaked - x`.
    pub delta: ImageTensor,
    /// Objective before the first step and after every step.
    pub objective_trace: Vec<f64>,
    pub config_used: CloakConfig,
}

impl CloakResult {
    pub fn max_abs_delta(&self) -> f64 {
        self.delta.data().iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn record(&self) -> CloakRecord {
        CloakRecord {
            epsilon: self.config_used.epsilon,
            kappa: self.config_used.kappa,
            scenario: self.config_used.scenario,
            iterations: self.config_used.iterations,
            final_objective: *self.objective_trace.last().unwrap_or(&f64::NAN),
            max_abs_delta: self.max_abs_delta(),
        }
    }
}

/// Per-image sidecar written next to cloaked images.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CloakRecord {
    pub epsilon: f64,
    pub kappa: f64,
    pub scenario: Scenario,
    pub iterations: usize,
    pub final_objective: f64,
    pub max_abs_delta: f64,
}

/// Clamps every entry into `[-epsilon, epsilon]`.
pub fn project_linf(delta: &[f64], epsilon: f64) -> Vec<f64> {
    delta.iter().map(|d| d.clamp(-epsilon, epsilon)).collect()
}

pub fn clip_unit(x: &ImageTensor) -> ImageTensor {
    x.clip_unit()
}

/// 8-bit quantization of `xhat` that stays inside the budget around `x`:
/// any rounding that would leave the ball is pulled one level toward `x`.
pub fn quantize_within_budget(x: &ImageTensor, xhat: &ImageTensor, epsilon: f64) -> Result<ImageTensor> {
    x.ensure_same_shape(xhat)?;
    let mut out = xhat.clone();
    for (o, &orig) in out.data_mut().iter_mut().zip(x.data()) {
        let mut q = (clip_value(*o) * 255.0).round() / 255.0;
        while (q - orig).abs() > epsilon + 1e-12 {
            q -= (q - orig).signum() / 255.0;
        }
        *o = clip_value(q);
    }
    Ok(out)
}

/// Runs the projected sign-gradient search for a batch of images. Image `i`
/// draws its initial perturbation from the stream `derive_seed(seed, i)`.
pub fn cloak_with_objective(xs: &[ImageTensor], objective: &CloakObjective, cfg: &CloakConfig) -> Result<Vec<CloakResult>> {
    cfg.validate()?;
    if xs.is_empty() {
        return Err(Error::InvalidArgument("no images to cloak".into()));
    }
    let shape = xs[0].shape();
    if xs.iter().any(|x| x.shape() != shape) || objective.features.input_shape() != shape {
        return Err(Error::Shape(format!(
            "cloak inputs must all be {:?}",
            objective.features.input_shape()
        )));
    }
    let eps = cfg.epsilon;
    let step = cfg.step();
    let x = ImageTensor::to_batch(xs)?;
    let per = x.item_len();
    let mut delta = vec![0.0; x.len()];
    for i in 0..xs.len() {
        let mut rng = seeded(derive_seed(cfg.seed, i as u64));
        for d in &mut delta[i * per..(i + 1) * per] {
            let v: f64 = StandardNormal.sample(&mut rng);
            *d = v.clamp(-eps, eps);
        }
    }
    let mut xhat = x.clone();
    let apply = |xhat: &mut invguard_nn::Tensor, delta: &mut [f64]| {
        for ((h, d), &orig) in xhat.data_mut().iter_mut().zip(delta.iter_mut()).zip(x.data()) {
            *h = clip_value(orig + *d);
            *d = *h - orig;
        }
    };
    apply(&mut xhat, &mut delta);
    let f_ref = objective.reference_features(&x)?;
    let mut traces: Vec<Vec<f64>> = vec![Vec::with_capacity(cfg.iterations + 1); xs.len()];
    for it in 0..=cfg.iterations {
        let last = it == cfg.iterations;
        let (values, grad) = objective.evaluate(&xhat, &f_ref, 0, !last)?;
        for (t, v) in traces.iter_mut().zip(&values) {
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    stage: "cloak search".into(),
                    detail: format!("objective {v} at iteration {it}"),
                });
            }
            t.push(*v);
        }
        if let Some(g) = grad {
            for (d, gv) in delta.iter_mut().zip(g.data()) {
                let s = if *gv > 0.0 {
                    1.0
                } else if *gv < 0.0 {
                    -1.0
                } else {
                    0.0
                };
                *d = (*d + step * s).clamp(-eps, eps);
            }
            apply(&mut xhat, &mut delta);
        }
    }
    let cloaked = ImageTensor::from_batch(&xhat, shape)?;
    Ok(cloaked
        .into_iter()
        .enumerate()
        .zip(traces)
        .map(|((i, c), objective_trace)| CloakResult {
            delta: ImageTensor::new(shape, delta[i * per..(i + 1) * per].to_vec()).expect("same shape"),
            cloaked: c,
            objective_trace,
            config_used: cfg.clone(),
        })
        .collect())
}

/// Cloak v1 / v4: feature deviation only.
pub fn cloak_feature_only(x: &ImageTensor, f: &FeatureExtractorHandle, cfg: &CloakConfig) -> Result<CloakResult> {
    Ok(cloak_feature_only_batch(std::slice::from_ref(x), f, cfg)?.remove(0))
}

pub fn cloak_feature_only_batch(xs: &[ImageTensor], f: &FeatureExtractorHandle, cfg: &CloakConfig) -> Result<Vec<CloakResult>> {
    cfg.expect(&[Scenario::V1, Scenario::V4])?;
    cloak_with_objective(xs, &CloakObjective::feature_only(f), cfg)
}

/// Anchor codes for Cloak v0: the defender's own inversion of each image,
/// computed once before the search.
pub fn v0_anchors(
    g_t: &GeneratorHandle,
    xs: &[ImageTensor],
    f: &FeatureExtractorHandle,
    inversion: &InversionConfig,
) -> Result<Vec<LatentCode>> {
    Ok(invert_batch(g_t, xs, Some(f), None, inversion)?
        .into_iter()
        .map(|r| r.z_star)
        .collect())
}

/// Cloak v0 with the anchor computed by a default optimization inversion.
pub fn cloak_v0(
    x: &ImageTensor,
    g_t: &GeneratorHandle,
    e_s: &EncoderHandle,
    f: &FeatureExtractorHandle,
    cfg: &CloakConfig,
) -> Result<CloakResult> {
    let inv = InversionConfig {
        seed: cfg.seed,
        ..InversionConfig::optimization()
    };
    let anchors = v0_anchors(g_t, std::slice::from_ref(x), f, &inv)?;
    Ok(cloak_v0_batch(std::slice::from_ref(x), anchors, e_s, f, cfg)?.remove(0))
}

pub fn cloak_v0_batch(
    xs: &[ImageTensor],
    anchors: Vec<LatentCode>,
    e_s: &EncoderHandle,
    f: &FeatureExtractorHandle,
    cfg: &CloakConfig,
) -> Result<Vec<CloakResult>> {
    cfg.expect(&[Scenario::V0])?;
    if anchors.len() != xs.len() {
        return Err(Error::InvalidArgument(format!("{} anchors for {} images", anchors.len(), xs.len())));
    }
    let objective = CloakObjective {
        features: f,
        latent: LatentTerm::Anchor { encoder: e_s, anchors },
        kappa: cfg.kappa,
    };
    cloak_with_objective(xs, &objective, cfg)
}

/// Cloak v2: drive the white-box target encoder's output toward zero.
pub fn cloak_v2(x: &ImageTensor, e_t: &EncoderHandle, f: &FeatureExtractorHandle, cfg: &CloakConfig) -> Result<CloakResult> {
    Ok(cloak_zero_batch(std::slice::from_ref(x), e_t, f, cfg, Scenario::V2)?.remove(0))
}

pub fn cloak_v2_batch(xs: &[ImageTensor], e_t: &EncoderHandle, f: &FeatureExtractorHandle, cfg: &CloakConfig) -> Result<Vec<CloakResult>> {
    cloak_zero_batch(xs, e_t, f, cfg, Scenario::V2)
}

/// Cloak v3: the v2 objective through a stolen encoder.
pub fn cloak_v3(x: &ImageTensor, e_s: &EncoderHandle, f: &FeatureExtractorHandle, cfg: &CloakConfig) -> Result<CloakResult> {
    Ok(cloak_zero_batch(std::slice::from_ref(x), e_s, f, cfg, Scenario::V3)?.remove(0))
}

pub fn cloak_v3_batch(xs: &[ImageTensor], e_s: &EncoderHandle, f: &FeatureExtractorHandle, cfg: &CloakConfig) -> Result<Vec<CloakResult>> {
    cloak_zero_batch(xs, e_s, f, cfg, Scenario::V3)
}

fn cloak_zero_batch(
    xs: &[ImageTensor],
    encoder: &EncoderHandle,
    f: &FeatureExtractorHandle,
    cfg: &CloakConfig,
    scenario: Scenario,
) -> Result<Vec<CloakResult>> {
    cfg.expect(&[scenario])?;
    let objective = CloakObjective {
        features: f,
        latent: LatentTerm::Zero { encoder },
        kappa: cfg.kappa,
    };
    cloak_with_objective(xs, &objective, cfg)
}
