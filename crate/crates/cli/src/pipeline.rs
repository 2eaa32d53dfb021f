//! Pipeline execution. Every file a run writes is hashed into the report.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use invguard::adversaries::{
    invert_extended_curve, overwrite_cloak, purify, retrain_encoder, AdaptiveStrategy,
};
use invguard::cloaks::{
    budget_for, cloak_feature_only_batch, cloak_v0_batch, cloak_v2_batch, cloak_v3_batch, grid_search_kappa,
    quantize_within_budget, steal_encoder, table_kappa, train_shadow_encoder_v0, v0_anchors, CloakConfig,
    CloakRecord, Scenario,
};
use invguard::dataset::FaceDataset;
use invguard::distortions::{apply_distortion, DistortionSpec};
use invguard::image::ImageTensor;
use invguard::inversion::{invert_batch, write_trace, InitMode, InversionConfig, InversionResult};
use invguard::latent_edit::{conditional_semantic, edit_latent, fit_boundary, SemanticDirection};
use invguard::metrics::{calibrate_on_images, utility_summary, ThresholdCalibration, UtilitySummary};
use invguard::models::{
    load_checkpoint, save_checkpoint, train_classifier, train_gan, train_target_encoder, Checkpointable,
    DiscriminatorHandle, EmbeddingHandle, EncoderHandle, FeatureExtractorHandle, GeneratorHandle,
};
use invguard::report::{evaluate_row, EvaluationReport};
use invguard::rng::derive_seed;
use invguard::{sample_latent, LatentCode};
use log::info;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{KappaPolicy, Pipeline, RunConfig};
use crate::plots;

/// A failed stage, named so the driver can report where a run broke.
#[derive(Debug)]
pub struct StageError {
    pub stage: String,
    pub source: invguard::Error,
}

impl std::fmt::Display for StageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "stage {}: {}", self.stage, self.source)
    }
}

impl std::error::Error for StageError {}

type StageResult<T> = std::result::Result<T, StageError>;

trait Stage<T> {
    fn stage(self, name: &str) -> StageResult<T>;
}

impl<T> Stage<T> for invguard::Result<T> {
    fn stage(self, name: &str) -> StageResult<T> {
        self.map_err(|source| StageError {
            stage: name.to_string(),
            source,
        })
    }
}

fn io_err(path: &Path, e: std::io::Error) -> invguard::Error {
    invguard::Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    /// Relative to the output directory.
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub stage: String,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CloakLevel {
    pub level: usize,
    pub epsilon: f64,
    pub kappa: f64,
    pub images: usize,
    pub max_abs_delta: f64,
    pub mean_final_objective: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtilityRow {
    pub parameter: f64,
    pub utility: UtilitySummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub run_id: String,
    pub pipeline: String,
    /// The validated config with defaults filled, as TOML.
    pub config: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub evaluations: Vec<EvaluationReport>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub cloak_levels: Vec<CloakLevel>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub utility: Vec<UtilityRow>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
    pub artifacts: Vec<Artifact>,
    pub timings: Vec<Timing>,
}

impl RunReport {
    /// The report without wall-clock timings, for reproducibility checks.
    pub fn without_timings(&self) -> Self {
        Self {
            timings: Vec::new(),
            ..self.clone()
        }
    }
}

struct Run<'a> {
    cfg: &'a RunConfig,
    out: PathBuf,
    report: RunReport,
}

impl<'a> Run<'a> {
    fn path(&self, rel: &str) -> PathBuf {
        self.out.join(rel)
    }

    fn record(&mut self, rel: &str) -> invguard::Result<()> {
        let p = self.path(rel);
        let bytes = fs::read(&p).map_err(|e| io_err(&p, e))?;
        self.report.artifacts.push(Artifact {
            path: rel.to_string(),
            sha256: hex::encode(Sha256::digest(&bytes)),
        });
        Ok(())
    }

    fn write_text(&mut self, rel: &str, text: &str) -> invguard::Result<()> {
        let p = self.path(rel);
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
        }
        fs::write(&p, text).map_err(|e| io_err(&p, e))?;
        self.record(rel)
    }

    fn write_png(&mut self, rel: &str, img: &ImageTensor) -> invguard::Result<()> {
        let p = self.path(rel);
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
        }
        img.save_png(&p)?;
        self.record(rel)
    }

    fn write_toml<T: Serialize>(&mut self, rel: &str, value: &T) -> invguard::Result<()> {
        let text = toml::to_string_pretty(value).map_err(|e| invguard::Error::Format(e.to_string()))?;
        self.write_text(rel, &text)
    }

    fn save_model<T: Checkpointable>(&mut self, rel: &str, model: &T, seed: u64) -> invguard::Result<()> {
        save_checkpoint(model, seed, &self.path(rel))?;
        self.record(&format!("{rel}/weights.bin"))?;
        self.record(&format!("{rel}/manifest.toml"))
    }

    fn timed<T>(&mut self, stage: &str, f: impl FnOnce(&mut Self) -> StageResult<T>) -> StageResult<T> {
        let start = Instant::now();
        let out = f(self)?;
        let seconds = start.elapsed().as_secs_f64();
        info!("{stage}: {seconds:.1}s");
        self.report.timings.push(Timing {
            stage: stage.to_string(),
            seconds,
        });
        Ok(out)
    }

    fn dataset(&self) -> invguard::Result<FaceDataset> {
        let dir = self.cfg.dataset.as_ref().expect("validated");
        load_limited(dir, self.cfg.limit)
    }

    fn model<T: Checkpointable>(&self, path: &Option<PathBuf>) -> invguard::Result<T> {
        load_checkpoint(path.as_ref().expect("validated"))
    }

    fn optional_model<T: Checkpointable>(&self, path: &Option<PathBuf>) -> invguard::Result<Option<T>> {
        path.as_ref().map(|p| load_checkpoint(p)).transpose()
    }

    fn scorer(&self) -> invguard::Result<Scorer> {
        let embedder: EmbeddingHandle = self.model(&self.cfg.models.embedder)?;
        let data = load_limited(self.cfg.evaluate.calibration.as_ref().expect("validated"), None)?;
        let ids = data.identities.as_ref().ok_or_else(|| {
            invguard::Error::InvalidArgument("calibration set needs identities.csv".into())
        })?;
        let calibration = calibrate_on_images(
            &embedder,
            &data.images,
            ids,
            self.cfg.evaluate.calibration_pairs,
            derive_seed(self.cfg.seed, 0xCA1),
        )?;
        Ok(Scorer { embedder, calibration })
    }

    fn inverter(&self) -> invguard::Result<Inverter> {
        let cfg = self.cfg.inversion.to_config(self.cfg.seed);
        Ok(Inverter {
            generator: self.model(&self.cfg.models.generator)?,
            percept: self.optional_model(&self.cfg.models.percept)?,
            encoder: if cfg.init_mode == InitMode::Encoder {
                Some(self.model(&self.cfg.models.encoder)?)
            } else {
                None
            },
            cfg,
        })
    }
}

struct Scorer {
    embedder: EmbeddingHandle,
    calibration: ThresholdCalibration,
}

struct Inverter {
    generator: GeneratorHandle,
    percept: Option<FeatureExtractorHandle>,
    encoder: Option<EncoderHandle>,
    cfg: InversionConfig,
}

impl Inverter {
    fn run(&self, xs: &[ImageTensor]) -> invguard::Result<Vec<InversionResult>> {
        self.run_with(xs, self.encoder.as_ref())
    }

    fn run_with(&self, xs: &[ImageTensor], encoder: Option<&EncoderHandle>) -> invguard::Result<Vec<InversionResult>> {
        invert_batch(&self.generator, xs, self.percept.as_ref(), encoder, &self.cfg)
    }

    fn reconstruct(&self, xs: &[ImageTensor]) -> invguard::Result<Vec<ImageTensor>> {
        Ok(self.run(xs)?.into_iter().map(|r| r.reconstruction).collect())
    }
}

pub fn load_limited(dir: &Path, limit: Option<usize>) -> invguard::Result<FaceDataset> {
    let mut d = FaceDataset::load_dir(dir)?;
    if let Some(n) = limit {
        d.images.truncate(n);
        d.filenames.truncate(n);
        if let Some(ids) = &mut d.identities {
            ids.truncate(n);
        }
    }
    Ok(d)
}

/// Stable identifier derived from the validated config.
pub fn run_id(cfg: &RunConfig) -> String {
    hex::encode(&Sha256::digest(cfg.to_toml().as_bytes())[..8])
}

pub const REPORT_FILE: &str = "report.toml";

/// Runs a validated config and writes `report.toml` into its output
/// directory.
pub fn run_pipeline(cfg: &RunConfig) -> StageResult<RunReport> {
    let out = cfg.output_dir.clone();
    fs::create_dir_all(&out).map_err(|e| io_err(&out, e)).stage("setup")?;
    let mut run = Run {
        cfg,
        out,
        report: RunReport {
            run_id: run_id(cfg),
            pipeline: cfg.pipeline.as_str().to_string(),
            config: cfg.to_toml(),
            evaluations: Vec::new(),
            cloak_levels: Vec::new(),
            utility: Vec::new(),
            notes: Vec::new(),
            artifacts: Vec::new(),
            timings: Vec::new(),
        },
    };
    match cfg.pipeline {
        Pipeline::TrainGan => train_gan_stage(&mut run)?,
        Pipeline::TrainClassifier => train_classifier_stage(&mut run)?,
        Pipeline::TrainEncoder => train_encoder_stage(&mut run)?,
        Pipeline::StealEncoder => steal_stage(&mut run)?,
        Pipeline::Invert => invert_stage(&mut run)?,
        Pipeline::Cloak => cloak_stage(&mut run)?,
        Pipeline::Distort => distort_stage(&mut run)?,
        Pipeline::Adapt => adapt_stage(&mut run)?,
        Pipeline::Edit => edit_stage(&mut run)?,
        Pipeline::Evaluate => evaluate_stage(&mut run)?,
        Pipeline::Report => report_stage(&mut run)?,
    }
    let report = run.report;
    let text = toml::to_string_pretty(&report)
        .map_err(|e| invguard::Error::Format(e.to_string()))
        .stage("report")?;
    let p = cfg.output_dir.join(REPORT_FILE);
    fs::write(&p, text).map_err(|e| io_err(&p, e)).stage("report")?;
    Ok(report)
}

fn train_gan_stage(run: &mut Run) -> StageResult<()> {
    let data = run.dataset().stage("load")?;
    let (g, d, trace) = run.timed("train-gan", |r| train_gan(&data.images, &r.cfg.gan).stage("train-gan"))?;
    let seed = run.cfg.gan.seed;
    run.save_model("generator", &g, seed).stage("save")?;
    run.save_model("discriminator", &d, seed).stage("save")?;
    run.write_toml("trace.toml", &trace).stage("save")?;
    let z = sample_latent(g.latent_spec(), 16, derive_seed(seed, 0x5A)).stage("samples")?;
    for (i, img) in g.generate_batch(&z).stage("samples")?.iter().enumerate() {
        run.write_png(&format!("samples/{i:04}.png"), img).stage("samples")?;
    }
    Ok(())
}

fn train_classifier_stage(run: &mut Run) -> StageResult<()> {
    let data = run.dataset().stage("load")?;
    let ids = data
        .identities
        .clone()
        .ok_or_else(|| invguard::Error::InvalidArgument("dataset needs identities.csv".into()))
        .stage("load")?;
    let shape = data.shape().expect("non-empty");
    let t = run.timed("train-classifier", |r| {
        train_classifier(&data.images, &ids, &r.cfg.classifier).stage("train-classifier")
    })?;
    let seed = run.cfg.classifier.seed;
    run.save_model("embedder", &t.embedding(shape).stage("save")?, seed).stage("save")?;
    run.save_model("features", &t.features(shape).stage("save")?, seed).stage("save")?;
    run.report.notes.push(format!("training accuracy {:.4}", t.train_accuracy));
    Ok(())
}

fn train_encoder_stage(run: &mut Run) -> StageResult<()> {
    let data = run.dataset().stage("load")?;
    let m = &run.cfg.models;
    let g: GeneratorHandle = run.model(&m.generator).stage("load")?;
    let d: DiscriminatorHandle = run.model(&m.discriminator).stage("load")?;
    let p: FeatureExtractorHandle = run.model(&m.percept).stage("load")?;
    let init: Option<EncoderHandle> = run.optional_model(&m.encoder).stage("load")?;
    let t = run.timed("train-encoder", |r| {
        train_target_encoder(&g, &d, &data.images, &p, r.cfg.encoder_weights, &r.cfg.encoder, init.as_ref())
            .stage("train-encoder")
    })?;
    run.save_model("encoder", &t.encoder, run.cfg.encoder.seed).stage("save")?;
    run.save_model("encoder_discriminator", &t.discriminator, run.cfg.encoder.seed).stage("save")?;
    run.write_toml("trace.toml", &t.trace).stage("save")
}

fn steal_stage(run: &mut Run) -> StageResult<()> {
    let m = &run.cfg.models;
    if m.encoder.is_some() {
        let e_t: EncoderHandle = run.model(&m.encoder).stage("load")?;
        let s = run.timed("steal-encoder", |r| steal_encoder(&e_t, &r.cfg.steal).stage("steal-encoder"))?;
        let seed = run.cfg.steal.seed;
        run.save_model("shadow_encoder", &s.encoder, seed).stage("save")?;
        run.save_model("shadow_generator", &s.shadow_generator, seed).stage("save")?;
        #[derive(Serialize)]
        struct Losses<'a> {
            encoder: &'a [f64],
            generator: &'a [f64],
        }
        run.write_toml(
            "trace.toml",
            &Losses {
                encoder: &s.encoder_loss,
                generator: &s.generator_loss,
            },
        )
        .stage("save")
    } else {
        let g: GeneratorHandle = run.model(&m.generator).stage("load")?;
        let s = run.timed("shadow-encoder", |r| {
            train_shadow_encoder_v0(&g, &r.cfg.shadow).stage("shadow-encoder")
        })?;
        run.save_model("shadow_encoder", &s.encoder, run.cfg.shadow.seed).stage("save")?;
        #[derive(Serialize)]
        struct Losses<'a> {
            loss: &'a [f64],
        }
        run.write_toml("trace.toml", &Losses { loss: &s.loss_trace }).stage("save")
    }
}

fn invert_stage(run: &mut Run) -> StageResult<()> {
    let data = run.dataset().stage("load")?;
    let inv = run.inverter().stage("load")?;
    let results = run.timed("invert", |_| inv.run(&data.images).stage("invert"))?;
    #[derive(Serialize)]
    struct Code<'a> {
        file: &'a str,
        z: &'a [f64],
        initial_loss: f64,
        final_loss: f64,
    }
    #[derive(Serialize)]
    struct Codes<'a> {
        codes: Vec<Code<'a>>,
    }
    for (name, r) in data.filenames.iter().zip(&results) {
        run.write_png(&format!("reconstructions/{name}"), &r.reconstruction).stage("save")?;
        let rel = format!("traces/{}.csv", name.trim_end_matches(".png"));
        write_trace(&run.path(&rel), &r.loss_trace).stage("save")?;
        run.record(&rel).stage("save")?;
    }
    let codes = Codes {
        codes: data
            .filenames
            .iter()
            .zip(&results)
            .map(|(file, r)| Code {
                file,
                z: r.z_star.as_slice(),
                initial_loss: r.initial_loss(),
                final_loss: r.final_loss(),
            })
            .collect(),
    };
    run.write_toml("latents.toml", &codes).stage("save")?;
    if run.cfg.models.embedder.is_some() && run.cfg.evaluate.calibration.is_some() {
        let scorer = run.scorer().stage("calibrate")?;
        let recon: Vec<ImageTensor> = results.into_iter().map(|r| r.reconstruction).collect();
        let mut ev = EvaluationReport::new(run.report.run_id.clone(), &scorer.calibration);
        ev.rows.push(
            evaluate_row("invert", None, 0.0, &scorer.embedder, &scorer.calibration, &data.images, &data.images, &recon)
                .stage("evaluate")?,
        );
        finish_evaluation(run, ev, "parameter")?;
    }
    Ok(())
}

struct CloakModels {
    features: FeatureExtractorHandle,
    generator: Option<GeneratorHandle>,
    encoder: Option<EncoderHandle>,
    shadow: Option<EncoderHandle>,
    anchors: Option<Vec<LatentCode>>,
}

impl CloakModels {
    fn cloak(&self, xs: &[ImageTensor], cfg: &CloakConfig) -> invguard::Result<Vec<invguard::cloaks::CloakResult>> {
        match cfg.scenario {
            Scenario::V0 => cloak_v0_batch(
                xs,
                self.anchors.clone().expect("anchors computed"),
                self.shadow.as_ref().expect("validated"),
                &self.features,
                cfg,
            ),
            Scenario::V1 | Scenario::V4 => cloak_feature_only_batch(xs, &self.features, cfg),
            Scenario::V2 => cloak_v2_batch(xs, self.encoder.as_ref().expect("validated"), &self.features, cfg),
            Scenario::V3 => cloak_v3_batch(xs, self.shadow.as_ref().expect("validated"), &self.features, cfg),
        }
    }
}

fn cloak_stage(run: &mut Run) -> StageResult<()> {
    let data = run.dataset().stage("load")?;
    let c = run.cfg.cloak.clone();
    let m = &run.cfg.models;
    let mut models = CloakModels {
        features: run.model(&m.features).stage("load")?,
        generator: run.optional_model(&m.generator).stage("load")?,
        encoder: if c.scenario == Scenario::V2 {
            Some(run.model(&m.encoder).stage("load")?)
        } else {
            None
        },
        shadow: if matches!(c.scenario, Scenario::V0 | Scenario::V3) {
            Some(run.model(&m.shadow_encoder).stage("load")?)
        } else {
            None
        },
        anchors: None,
    };
    if c.scenario == Scenario::V0 {
        let g = models.generator.as_ref().expect("validated");
        let inv = InversionConfig {
            seed: run.cfg.seed,
            ..InversionConfig::optimization()
        };
        let anchors = run.timed("anchors", |_| {
            v0_anchors(g, &data.images, &models.features, &inv).stage("anchors")
        })?;
        models.anchors = Some(anchors);
    }
    let scoring = if c.evaluate {
        Some((run.inverter().stage("load")?, run.scorer().stage("calibrate")?))
    } else {
        None
    };
    let mut ev = scoring
        .as_ref()
        .map(|(_, s)| EvaluationReport::new(run.report.run_id.clone(), &s.calibration));
    let has_latent = matches!(c.scenario, Scenario::V0 | Scenario::V2 | Scenario::V3);
    for &level in &c.levels {
        let eps = budget_for(c.family, level).stage("cloak")?;
        let mut base = CloakConfig {
            iterations: c.iterations,
            seed: derive_seed(run.cfg.seed, level as u64),
            ..CloakConfig::new(c.scenario, eps, 0.0)
        };
        let kappa = if !has_latent {
            0.0
        } else {
            match c.kappa_policy {
                KappaPolicy::Fixed => c.kappa.expect("validated"),
                KappaPolicy::Table => table_kappa(c.family, c.scenario, level).expect("validated"),
                KappaPolicy::Grid => {
                    let (inv, scorer) = scoring.as_ref().expect("validated");
                    let search = run.timed(&format!("kappa-grid-{level}"), |_| {
                        grid_search_kappa(
                            &data.images,
                            &c.kappa_grid,
                            |xs, k| {
                                let cfg = CloakConfig { kappa: k, ..base.clone() };
                                Ok(models.cloak(xs, &cfg)?.into_iter().map(|r| r.cloaked).collect())
                            },
                            |xs, cloaked| {
                                let recon = inv.reconstruct(cloaked)?;
                                invguard::metrics::matching_rate(&scorer.embedder, xs, &recon, &scorer.calibration)
                            },
                        )
                        .stage("kappa-grid")
                    })?;
                    run.report.notes.push(format!("level {level}: grid κ scores {:?}", search.scores));
                    search.kappa
                }
            }
        };
        base.kappa = kappa;
        let results = run.timed(&format!("cloak-{level}"), |_| models.cloak(&data.images, &base).stage("cloak"))?;
        let mut released = Vec::with_capacity(results.len());
        let mut max_abs = 0.0f64;
        let mut objective = 0.0;
        for ((name, x), r) in data.filenames.iter().zip(&data.images).zip(&results) {
            let q = quantize_within_budget(x, &r.cloaked, eps).stage("quantize")?;
            max_abs = max_abs.max(q.linf_distance(x).stage("quantize")?);
            objective += r.objective_trace.last().copied().unwrap_or(f64::NAN);
            run.write_png(&format!("level_{level}/{name}"), &q).stage("save")?;
            #[derive(Serialize)]
            struct Sidecar<'a> {
                source: &'a str,
                // Derived seeds overflow TOML's signed integers.
                seed: String,
                #[serde(flatten)]
                record: CloakRecord,
            }
            let sidecar = Sidecar {
                source: name,
                seed: base.seed.to_string(),
                record: r.record(),
            };
            run.write_toml(&format!("level_{level}/{}.toml", name.trim_end_matches(".png")), &sidecar)
                .stage("save")?;
            released.push(q);
        }
        run.report.cloak_levels.push(CloakLevel {
            level,
            epsilon: eps,
            kappa,
            images: results.len(),
            max_abs_delta: max_abs,
            mean_final_objective: objective / results.len() as f64,
        });
        if let (Some((inv, scorer)), Some(ev)) = (&scoring, &mut ev) {
            let recon = run.timed(&format!("invert-{level}"), |_| inv.reconstruct(&released).stage("invert"))?;
            ev.rows.push(
                evaluate_row(
                    &format!("level {level}"),
                    Some(level),
                    eps,
                    &scorer.embedder,
                    &scorer.calibration,
                    &data.images,
                    &released,
                    &recon,
                )
                .stage("evaluate")?,
            );
        }
    }
    if let Some(ev) = ev {
        finish_evaluation(run, ev, "budget ε")?;
    }
    Ok(())
}

fn distort_stage(run: &mut Run) -> StageResult<()> {
    let data = run.dataset().stage("load")?;
    let kind = run.cfg.distort.kind.expect("validated");
    let mags = run.cfg.distort.magnitudes.clone().expect("defaults filled");
    let scoring = if run.cfg.distort.evaluate {
        Some((run.inverter().stage("load")?, run.scorer().stage("calibrate")?))
    } else {
        None
    };
    let mut ev = scoring
        .as_ref()
        .map(|(_, s)| EvaluationReport::new(run.report.run_id.clone(), &s.calibration));
    for (k, &mag) in mags.iter().enumerate() {
        let out = data
            .images
            .iter()
            .enumerate()
            .map(|(i, x)| {
                let spec = DistortionSpec {
                    seed: run.cfg.seed + i as u64,
                    ..DistortionSpec::new(kind, mag)
                };
                apply_distortion(x, &spec)
            })
            .collect::<invguard::Result<Vec<_>>>()
            .stage("distort")?;
        for (name, img) in data.filenames.iter().zip(&out) {
            run.write_png(&format!("{}_{k}/{name}", kind.as_str()), img).stage("save")?;
        }
        run.report.utility.push(UtilityRow {
            parameter: mag,
            utility: utility_summary(&data.images, &out).stage("utility")?,
        });
        if let (Some((inv, scorer)), Some(ev)) = (&scoring, &mut ev) {
            let recon = inv.reconstruct(&out).stage("invert")?;
            ev.rows.push(
                evaluate_row(
                    &format!("{} {mag}", kind.as_str()),
                    None,
                    mag,
                    &scorer.embedder,
                    &scorer.calibration,
                    &data.images,
                    &out,
                    &recon,
                )
                .stage("evaluate")?,
            );
        }
    }
    if let Some(ev) = ev {
        finish_evaluation(run, ev, kind.as_str())?;
    }
    Ok(())
}

fn adapt_stage(run: &mut Run) -> StageResult<()> {
    let cloaked = run.dataset().stage("load")?;
    let reference = load_limited(run.cfg.adapt.reference.as_ref().expect("validated"), run.cfg.limit).stage("load")?;
    if reference.len() != cloaked.len() {
        return Err(invguard::Error::InvalidArgument(format!(
            "{} cloaked images but {} references",
            cloaked.len(),
            reference.len()
        )))
        .stage("load");
    }
    let inv = run.inverter().stage("load")?;
    let scorer = run.scorer().stage("calibrate")?;
    let strategy = run.cfg.adapt.strategy.clone().expect("validated");
    let xs = &reference.images;
    let xhats = &cloaked.images;
    let mut ev = EvaluationReport::new(run.report.run_id.clone(), &scorer.calibration);
    let name = strategy.name();
    let push = |ev: &mut EvaluationReport, param: f64, modified: &[ImageTensor], recon: &[ImageTensor]| {
        ev.rows.push(
            evaluate_row(
                &format!("{name} {param}"),
                None,
                param,
                &scorer.embedder,
                &scorer.calibration,
                xs,
                modified,
                recon,
            )
            .stage("evaluate")?,
        );
        Ok::<_, StageError>(())
    };
    let seed = run.cfg.seed;
    match &strategy {
        AdaptiveStrategy::Overwrite { sigmas } => {
            for &s in sigmas {
                let over = xhats
                    .iter()
                    .enumerate()
                    .map(|(i, x)| overwrite_cloak(x, s, derive_seed(seed, i as u64)))
                    .collect::<invguard::Result<Vec<_>>>()
                    .stage("overwrite")?;
                let recon = inv.reconstruct(&over).stage("invert")?;
                push(&mut ev, s, &over, &recon)?;
            }
        }
        AdaptiveStrategy::Purify { widths } => {
            for &w in widths {
                let p = xhats.iter().map(|x| purify(x, w)).collect::<invguard::Result<Vec<_>>>().stage("purify")?;
                let recon = inv.reconstruct(&p).stage("invert")?;
                push(&mut ev, w as f64, &p, &recon)?;
            }
        }
        AdaptiveStrategy::MoreIterations { iterations } => {
            let curve = run.timed("more-iterations", |_| {
                invert_extended_curve(&inv.generator, inv.encoder.as_ref(), xhats, inv.percept.as_ref(), &inv.cfg, iterations)
                    .stage("invert")
            })?;
            for (k, recon) in curve {
                push(&mut ev, k as f64, xhats, &recon)?;
            }
        }
        AdaptiveStrategy::EncoderEnhancement { cloaked_counts } => {
            let m = &run.cfg.models;
            let e_t: EncoderHandle = run.model(&m.encoder).stage("load")?;
            let d: DiscriminatorHandle = run.model(&m.discriminator).stage("load")?;
            let p: FeatureExtractorHandle = run.model(&m.percept).stage("load")?;
            let clean = load_limited(run.cfg.adapt.clean.as_ref().expect("validated"), None).stage("load")?;
            for &count in cloaked_counts {
                if count > xhats.len() {
                    return Err(invguard::Error::InvalidArgument(format!(
                        "{count} poisoned images requested but only {} cloaked",
                        xhats.len()
                    )))
                    .stage("retrain");
                }
                let cfg = run.cfg.encoder.clone();
                let weights = run.cfg.encoder_weights;
                let t = run.timed(&format!("retrain-{count}"), |_| {
                    retrain_encoder(&e_t, &inv.generator, &d, &p, &clean.images, &xhats[..count], weights, &cfg)
                        .stage("retrain")
                })?;
                let recon: Vec<ImageTensor> = inv
                    .run_with(xhats, Some(&t.encoder))
                    .stage("invert")?
                    .into_iter()
                    .map(|r| r.reconstruction)
                    .collect();
                push(&mut ev, count as f64, xhats, &recon)?;
            }
        }
    }
    finish_evaluation(run, ev, name)
}

fn brightness_labels(images: &[ImageTensor]) -> Vec<u8> {
    let means: Vec<f64> = images.iter().map(|x| x.data().iter().sum::<f64>() / x.len() as f64).collect();
    let mut sorted = means.clone();
    sorted.sort_by(f64::total_cmp);
    let median = sorted[sorted.len() / 2];
    means.iter().map(|&m| u8::from(m >= median)).collect()
}

fn edit_stage(run: &mut Run) -> StageResult<()> {
    let g: GeneratorHandle = run.model(&run.cfg.models.generator).stage("load")?;
    let e = run.cfg.edit.clone();
    let uses_data = e.attribute != "brightness" || e.condition.as_deref().is_some_and(|c| c != "brightness");
    // Latents with known images: fresh samples, or inverted dataset images
    // when a dataset attribute is involved.
    let (latents, images, data) = if uses_data {
        let data = run.dataset().stage("load")?;
        let inv = run.inverter().stage("load")?;
        let res = run.timed("invert", |_| inv.run(&data.images).stage("invert"))?;
        let z: Vec<LatentCode> = res.iter().map(|r| r.z_star.clone()).collect();
        (z, data.images.clone(), Some(data))
    } else {
        let z = sample_latent(g.latent_spec(), e.samples, derive_seed(run.cfg.seed, 0xED)).stage("sample")?;
        let imgs = g.generate_batch(&z).stage("sample")?;
        (z, imgs, None)
    };
    let labels_for = |attr: &str| -> invguard::Result<(Vec<LatentCode>, Vec<u8>)> {
        if attr == "brightness" {
            return Ok((latents.clone(), brightness_labels(&images)));
        }
        let data = data.as_ref().expect("dataset loaded");
        let map = data.attribute_labels(attr);
        let (z, y): (Vec<_>, Vec<_>) = map.iter().map(|(&i, &l)| (latents[i].clone(), l)).unzip();
        Ok((z, y))
    };
    let (z, y) = labels_for(&e.attribute).stage("labels")?;
    let primary = fit_boundary(&z, &y, &e.attribute).stage("fit")?;
    let direction: SemanticDirection = match &e.condition {
        Some(c) => {
            let (zc, yc) = labels_for(c).stage("labels")?;
            let cond = fit_boundary(&zc, &yc, c).stage("fit")?;
            run.write_toml("condition_direction.toml", &cond).stage("save")?;
            conditional_semantic(&primary, &cond).stage("fit")?
        }
        None => primary,
    };
    if !direction.reliable {
        run.report.notes.push(format!(
            "direction {:?} unreliable: training accuracy {:.3}",
            direction.attribute_tag, direction.training_accuracy
        ));
    }
    run.write_toml("direction.toml", &direction).stage("save")?;
    for (i, z0) in latents.iter().take(e.edits).enumerate() {
        let edited = e
            .alphas
            .iter()
            .map(|&a| edit_latent(z0, &direction, a))
            .collect::<invguard::Result<Vec<_>>>()
            .stage("edit")?;
        for (k, img) in g.generate_batch(&edited).stage("edit")?.iter().enumerate() {
            run.write_png(&format!("edits/{i:04}_{k}.png"), img).stage("save")?;
        }
    }
    Ok(())
}

fn evaluate_stage(run: &mut Run) -> StageResult<()> {
    let ev_cfg = &run.cfg.evaluate;
    let targets = load_limited(ev_cfg.targets.as_ref().expect("validated"), run.cfg.limit).stage("load")?;
    let recon = load_limited(ev_cfg.reconstructions.as_ref().expect("validated"), run.cfg.limit).stage("load")?;
    let modified = match &ev_cfg.modified {
        Some(p) => load_limited(p, run.cfg.limit).stage("load")?.images,
        None => targets.images.clone(),
    };
    let scorer = run.scorer().stage("calibrate")?;
    let mut ev = EvaluationReport::new(run.report.run_id.clone(), &scorer.calibration);
    ev.rows.push(
        evaluate_row(
            "evaluate",
            None,
            0.0,
            &scorer.embedder,
            &scorer.calibration,
            &targets.images,
            &modified,
            &recon.images,
        )
        .stage("evaluate")?,
    );
    finish_evaluation(run, ev, "parameter")
}

fn finish_evaluation(run: &mut Run, ev: EvaluationReport, x_label: &str) -> StageResult<()> {
    run.write_text("evaluation.toml", &ev.to_toml().stage("report")?).stage("report")?;
    let reports = std::slice::from_ref(&ev);
    let svg = plots::matching_curve(reports, x_label).stage("plot")?;
    run.write_text("matching_rate.svg", &svg).stage("plot")?;
    let svg = plots::utility_scatter(reports).stage("plot")?;
    run.write_text("utility.svg", &svg).stage("plot")?;
    run.report.evaluations.push(ev);
    Ok(())
}

fn report_stage(run: &mut Run) -> StageResult<()> {
    let reports = run
        .cfg
        .report
        .inputs
        .iter()
        .map(|p| {
            let text = fs::read_to_string(p).map_err(|e| io_err(p, e))?;
            EvaluationReport::from_toml(&text)
        })
        .collect::<invguard::Result<Vec<_>>>()
        .stage("load")?;
    let svg = plots::matching_curve(&reports, "parameter").stage("plot")?;
    run.write_text("matching_rate.svg", &svg).stage("plot")?;
    let svg = plots::utility_scatter(&reports).stage("plot")?;
    run.write_text("utility.svg", &svg).stage("plot")?;
    run.report.evaluations = reports;
    Ok(())
}
