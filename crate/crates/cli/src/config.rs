//! Run configuration: a versioned TOML document naming one pipeline, its
//! inputs and its parameters.

use std::fmt;
use std::path::{Path, PathBuf};

use invguard::adversaries::{AdaptiveConfig, AdaptiveStrategy};
use invguard::cloaks::{table_kappa, budget_for, Scenario, ShadowEncoderConfig, StealConfig, LEVELS};
use invguard::distortions::DistortionKind;
use invguard::inversion::{InitMode, InversionConfig, LossWeights};
use invguard::models::{ClassifierConfig, FamilyTag, EncoderLossWeights, EncoderTrainingConfig, GanConfig};
use serde::{Deserialize, Serialize};

pub const SCHEMA_VERSION: u32 = 1;
pub const DEFAULT_CLOAK_ITERATIONS: usize = 500;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pipeline {
    TrainGan,
    TrainEncoder,
    StealEncoder,
    TrainClassifier,
    Invert,
    Cloak,
    Distort,
    Adapt,
    Edit,
    Evaluate,
    Report,
}

impl Pipeline {
    pub fn as_str(self) -> &'static str {
        match self {
            Pipeline::TrainGan => "train-gan",
            Pipeline::TrainEncoder => "train-encoder",
            Pipeline::StealEncoder => "steal-encoder",
            Pipeline::TrainClassifier => "train-classifier",
            Pipeline::Invert => "invert",
            Pipeline::Cloak => "cloak",
            Pipeline::Distort => "distort",
            Pipeline::Adapt => "adapt",
            Pipeline::Edit => "edit",
            Pipeline::Evaluate => "evaluate",
            Pipeline::Report => "report",
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelPaths {
    pub generator: Option<PathBuf>,
    pub discriminator: Option<PathBuf>,
    pub encoder: Option<PathBuf>,
    /// v0 shadow encoder or the stolen encoder for v3.
    pub shadow_encoder: Option<PathBuf>,
    /// Cloak feature extractor.
    pub features: Option<PathBuf>,
    /// Perceptual network of the inversion objective.
    pub percept: Option<PathBuf>,
    /// Identity embedder used for matching.
    pub embedder: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InversionMode {
    Optimization,
    Hybrid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InversionSection {
    pub mode: InversionMode,
    /// Defaults to 500 for optimization and 100 for hybrid.
    pub iterations: Option<usize>,
    pub init: Option<InitMode>,
    pub learning_rate: f64,
    pub loss_weights: LossWeights,
}

impl Default for InversionSection {
    fn default() -> Self {
        Self {
            mode: InversionMode::Optimization,
            iterations: None,
            init: None,
            learning_rate: InversionConfig::optimization().learning_rate,
            loss_weights: LossWeights::default(),
        }
    }
}

impl InversionSection {
    pub fn to_config(&self, seed: u64) -> InversionConfig {
        let base = match self.mode {
            InversionMode::Optimization => InversionConfig::optimization(),
            InversionMode::Hybrid => InversionConfig::hybrid(),
        };
        InversionConfig {
            iterations: self.iterations.unwrap_or(base.iterations),
            init_mode: self.init.unwrap_or(base.init_mode),
            learning_rate: self.learning_rate,
            loss_weights: self.loss_weights,
            seed,
        }
    }

    fn fill(&mut self) {
        let cfg = self.to_config(0);
        self.iterations = Some(cfg.iterations);
        self.init = Some(cfg.init_mode);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KappaPolicy {
    Fixed,
    Table,
    Grid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CloakSection {
    pub scenario: Scenario,
    pub levels: Vec<usize>,
    pub kappa_policy: KappaPolicy,
    /// Used by the fixed policy.
    pub kappa: Option<f64>,
    pub kappa_grid: Vec<f64>,
    pub iterations: usize,
    /// Budget schedule and κ table to use.
    pub family: FamilyTag,
    /// Invert the cloaked images and score them per level.
    pub evaluate: bool,
}

impl Default for CloakSection {
    fn default() -> Self {
        Self {
            scenario: Scenario::V1,
            levels: (0..LEVELS).collect(),
            kappa_policy: KappaPolicy::Table,
            kappa: None,
            kappa_grid: invguard::cloaks::default_kappa_grid(),
            iterations: DEFAULT_CLOAK_ITERATIONS,
            family: FamilyTag::DcganLike,
            evaluate: false,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistortSection {
    pub kind: Option<DistortionKind>,
    /// Defaults to the kind's standard grid.
    pub magnitudes: Option<Vec<f64>>,
    pub evaluate: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdaptSection {
    #[serde(flatten)]
    pub strategy: Option<AdaptiveStrategy>,
    /// Clean originals of the cloaked images in `dataset`.
    pub reference: Option<PathBuf>,
    /// Clean training images for encoder retraining.
    pub clean: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EditSection {
    /// An attribute from the dataset's `attributes.csv`, or `brightness`
    /// to label generated samples by mean intensity.
    pub attribute: String,
    pub condition: Option<String>,
    pub samples: usize,
    pub alphas: Vec<f64>,
    pub edits: usize,
}

impl Default for EditSection {
    fn default() -> Self {
        Self {
            attribute: "brightness".into(),
            condition: None,
            samples: 400,
            alphas: vec![-3.0, -1.5, 0.0, 1.5, 3.0],
            edits: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateSection {
    pub targets: Option<PathBuf>,
    pub reconstructions: Option<PathBuf>,
    /// Released images; defaults to the targets.
    pub modified: Option<PathBuf>,
    /// Images with `identities.csv` for threshold calibration.
    pub calibration: Option<PathBuf>,
    pub calibration_pairs: usize,
}

impl Default for EvaluateSection {
    fn default() -> Self {
        Self {
            targets: None,
            reconstructions: None,
            modified: None,
            calibration: None,
            calibration_pairs: 200,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportSection {
    /// Evaluation report files (`evaluation.toml`) to plot together.
    pub inputs: Vec<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub pipeline: Pipeline,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub dataset: Option<PathBuf>,
    /// Cap on images taken from the dataset, in name order.
    #[serde(default)]
    pub limit: Option<usize>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "yes")]
    pub deterministic: bool,
    #[serde(default)]
    pub models: ModelPaths,
    #[serde(default)]
    pub gan: GanConfig,
    #[serde(default)]
    pub classifier: ClassifierConfig,
    #[serde(default)]
    pub encoder: EncoderTrainingConfig,
    #[serde(default)]
    pub encoder_weights: EncoderLossWeights,
    #[serde(default)]
    pub shadow: ShadowEncoderConfig,
    #[serde(default)]
    pub steal: StealConfig,
    #[serde(default)]
    pub inversion: InversionSection,
    #[serde(default)]
    pub cloak: CloakSection,
    #[serde(default)]
    pub distort: DistortSection,
    #[serde(default)]
    pub adapt: AdaptSection,
    #[serde(default)]
    pub edit: EditSection,
    #[serde(default)]
    pub evaluate: EvaluateSection,
    #[serde(default)]
    pub report: ReportSection,
}

fn yes() -> bool {
    true
}

/// One problem found while validating a config, tied to a field path.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigError {
    pub field: String,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

struct Errors(Vec<ConfigError>);

impl Errors {
    /// Several stages may check the same field; report each problem once.
    fn push(&mut self, field: &str, message: impl Into<String>) {
        let e = ConfigError {
            field: field.to_string(),
            message: message.into(),
        };
        if !self.0.contains(&e) {
            self.0.push(e);
        }
    }

    fn require_path(&mut self, field: &str, path: Option<&PathBuf>) {
        match path {
            None => self.push(field, "required for this pipeline"),
            Some(p) if !p.exists() => self.push(field, format!("{} does not exist", p.display())),
            Some(_) => {}
        }
    }

    fn optional_path(&mut self, field: &str, path: Option<&PathBuf>) {
        if let Some(p) = path {
            if !p.exists() {
                self.push(field, format!("{} does not exist", p.display()));
            }
        }
    }
}

/// Parses and checks a config, collecting every problem instead of
/// stopping at the first. Relative paths resolve against `base`. On success
/// the returned config has all defaults filled in.
pub fn validate_config(raw: &str, base: &Path) -> Result<RunConfig, Vec<ConfigError>> {
    let mut cfg: RunConfig = toml::from_str(raw).map_err(|e| {
        vec![ConfigError {
            field: "<document>".into(),
            message: e.message().to_string(),
        }]
    })?;
    resolve_paths(&mut cfg, base);
    let mut errs = Errors(Vec::new());
    check(&cfg, &mut errs);
    if errs.0.is_empty() {
        fill_defaults(&mut cfg);
        Ok(cfg)
    } else {
        Err(errs.0)
    }
}

fn resolve_paths(cfg: &mut RunConfig, base: &Path) {
    let fix = |p: &mut PathBuf| {
        if p.is_relative() {
            *p = base.join(&*p);
        }
    };
    fix(&mut cfg.output_dir);
    let m = &mut cfg.models;
    for p in [
        &mut cfg.dataset,
        &mut m.generator,
        &mut m.discriminator,
        &mut m.encoder,
        &mut m.shadow_encoder,
        &mut m.features,
        &mut m.percept,
        &mut m.embedder,
        &mut cfg.adapt.reference,
        &mut cfg.adapt.clean,
        &mut cfg.evaluate.targets,
        &mut cfg.evaluate.reconstructions,
        &mut cfg.evaluate.modified,
        &mut cfg.evaluate.calibration,
    ]
    .into_iter()
    .flatten()
    {
        fix(p);
    }
    for p in &mut cfg.report.inputs {
        fix(p);
    }
}

fn needs_inversion_models(cfg: &RunConfig, errs: &mut Errors) {
    errs.require_path("models.generator", cfg.models.generator.as_ref());
    if cfg.inversion.to_config(0).loss_weights.perceptual > 0.0 {
        errs.require_path("models.percept", cfg.models.percept.as_ref());
    } else {
        errs.optional_path("models.percept", cfg.models.percept.as_ref());
    }
    if cfg.inversion.to_config(0).init_mode == InitMode::Encoder {
        errs.require_path("models.encoder", cfg.models.encoder.as_ref());
    }
}

fn needs_scoring(cfg: &RunConfig, errs: &mut Errors) {
    errs.require_path("models.embedder", cfg.models.embedder.as_ref());
    errs.require_path("evaluate.calibration", cfg.evaluate.calibration.as_ref());
}

fn check(cfg: &RunConfig, errs: &mut Errors) {
    if cfg.schema_version != SCHEMA_VERSION {
        errs.push(
            "schema_version",
            format!("unsupported version {} (expected {SCHEMA_VERSION})", cfg.schema_version),
        );
    }
    if cfg.limit == Some(0) {
        errs.push("limit", "must be at least 1");
    }
    let inv = cfg.inversion.to_config(0);
    if let Err(e) = inv.validate() {
        errs.push("inversion", e.to_string());
    }
    if let Err(e) = cfg.encoder_weights.validate() {
        errs.push("encoder_weights", e.to_string());
    }
    let m = &cfg.models;
    match cfg.pipeline {
        Pipeline::TrainGan | Pipeline::TrainClassifier => {
            errs.require_path("dataset", cfg.dataset.as_ref());
        }
        Pipeline::TrainEncoder => {
            errs.require_path("dataset", cfg.dataset.as_ref());
            errs.require_path("models.generator", m.generator.as_ref());
            errs.require_path("models.discriminator", m.discriminator.as_ref());
            errs.require_path("models.percept", m.percept.as_ref());
        }
        Pipeline::StealEncoder => {
            // A target encoder means black-box stealing; a generator alone
            // means a gray-box shadow encoder trained on its samples.
            if m.encoder.is_some() {
                errs.require_path("models.encoder", m.encoder.as_ref());
            } else {
                errs.require_path("models.generator", m.generator.as_ref());
            }
        }
        Pipeline::Invert => {
            errs.require_path("dataset", cfg.dataset.as_ref());
            needs_inversion_models(cfg, errs);
        }
        Pipeline::Cloak => {
            errs.require_path("dataset", cfg.dataset.as_ref());
            check_cloak(cfg, errs);
        }
        Pipeline::Distort => {
            errs.require_path("dataset", cfg.dataset.as_ref());
            match cfg.distort.kind {
                None => errs.push("distort.kind", "required for this pipeline"),
                Some(kind) => {
                    if let Some(ms) = &cfg.distort.magnitudes {
                        if ms.is_empty() {
                            errs.push("distort.magnitudes", "must not be empty");
                        }
                        for &mag in ms {
                            if let Err(e) = invguard::distortions::DistortionSpec::new(kind, mag).validate() {
                                errs.push("distort.magnitudes", e.to_string());
                            }
                        }
                    }
                }
            }
            if cfg.distort.evaluate {
                needs_inversion_models(cfg, errs);
                needs_scoring(cfg, errs);
            }
        }
        Pipeline::Adapt => {
            errs.require_path("dataset", cfg.dataset.as_ref());
            errs.require_path("adapt.reference", cfg.adapt.reference.as_ref());
            needs_inversion_models(cfg, errs);
            needs_scoring(cfg, errs);
            match &cfg.adapt.strategy {
                None => errs.push("adapt.strategy", "required for this pipeline"),
                Some(s) => {
                    let a = AdaptiveConfig {
                        strategy: s.clone(),
                        seed: cfg.seed,
                    };
                    if let Err(e) = a.validate() {
                        errs.push("adapt", e.to_string());
                    }
                    if matches!(s, AdaptiveStrategy::EncoderEnhancement { .. }) {
                        errs.require_path("adapt.clean", cfg.adapt.clean.as_ref());
                        errs.require_path("models.encoder", m.encoder.as_ref());
                        errs.require_path("models.discriminator", m.discriminator.as_ref());
                        errs.require_path("models.percept", m.percept.as_ref());
                    }
                }
            }
        }
        Pipeline::Edit => {
            errs.require_path("models.generator", m.generator.as_ref());
            let synthetic = |a: &str| a == "brightness";
            let needs_data = !synthetic(&cfg.edit.attribute)
                || cfg.edit.condition.as_deref().is_some_and(|c| !synthetic(c));
            if needs_data {
                errs.require_path("dataset", cfg.dataset.as_ref());
            }
            if cfg.edit.samples < 2 {
                errs.push("edit.samples", "need at least two samples");
            }
            if cfg.edit.alphas.is_empty() {
                errs.push("edit.alphas", "must not be empty");
            }
        }
        Pipeline::Evaluate => {
            errs.require_path("evaluate.targets", cfg.evaluate.targets.as_ref());
            errs.require_path("evaluate.reconstructions", cfg.evaluate.reconstructions.as_ref());
            errs.optional_path("evaluate.modified", cfg.evaluate.modified.as_ref());
            needs_scoring(cfg, errs);
        }
        Pipeline::Report => {
            if cfg.report.inputs.is_empty() {
                errs.push("report.inputs", "required for this pipeline");
            }
            for (i, p) in cfg.report.inputs.iter().enumerate() {
                errs.optional_path(&format!("report.inputs[{i}]"), Some(p));
            }
        }
    }
}

fn check_cloak(cfg: &RunConfig, errs: &mut Errors) {
    let c = &cfg.cloak;
    let m = &cfg.models;
    if c.levels.is_empty() {
        errs.push("cloak.levels", "must not be empty");
    }
    if let Some(l) = c.levels.iter().find(|&&l| l >= LEVELS) {
        errs.push("cloak.levels", format!("level {l} outside 0..={}", LEVELS - 1));
    }
    if let Some(k) = c.kappa {
        if !(0.0..=1.0).contains(&k) {
            errs.push("cloak.kappa", format!("{k} outside [0, 1]"));
        }
    }
    if let Some(k) = c.kappa_grid.iter().find(|k| !(0.0..=1.0).contains(*k)) {
        errs.push("cloak.kappa_grid", format!("{k} outside [0, 1]"));
    }
    let has_latent = matches!(c.scenario, Scenario::V0 | Scenario::V2 | Scenario::V3);
    if let Err(e) = budget_for(c.family, 0) {
        errs.push("cloak.family", e.to_string());
    } else if c.kappa_policy == KappaPolicy::Table && has_latent && table_kappa(c.family, c.scenario, 0).is_none() {
        errs.push("cloak.kappa_policy", "no κ table for this family");
    }
    match c.kappa_policy {
        KappaPolicy::Fixed if c.kappa.is_none() && has_latent => {
            errs.push("cloak.kappa", "required by the fixed policy");
        }
        KappaPolicy::Grid => {
            if c.kappa_grid.is_empty() {
                errs.push("cloak.kappa_grid", "must not be empty");
            }
            if has_latent && !c.evaluate {
                errs.push("cloak.evaluate", "the grid policy scores candidates and needs evaluate = true");
            }
        }
        _ => {}
    }
    errs.require_path("models.features", m.features.as_ref());
    match c.scenario {
        Scenario::V0 => {
            errs.require_path("models.generator", m.generator.as_ref());
            errs.require_path("models.shadow_encoder", m.shadow_encoder.as_ref());
        }
        Scenario::V2 => errs.require_path("models.encoder", m.encoder.as_ref()),
        Scenario::V3 => errs.require_path("models.shadow_encoder", m.shadow_encoder.as_ref()),
        Scenario::V1 | Scenario::V4 => {}
    }
    if c.evaluate {
        needs_inversion_models(cfg, errs);
        needs_scoring(cfg, errs);
    }
}

fn fill_defaults(cfg: &mut RunConfig) {
    cfg.inversion.fill();
    if cfg.pipeline == Pipeline::Distort && cfg.distort.magnitudes.is_none() {
        cfg.distort.magnitudes = cfg.distort.kind.map(|k| k.default_grid());
    }
}

impl RunConfig {
    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}
