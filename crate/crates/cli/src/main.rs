use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use invguard::dataset::{render_sprites, SpriteConfig};
use invguard_cli::{run_pipeline, validate_config, Pipeline, RunConfig};

const CONFIG_ERROR: u8 = 1;
const STAGE_FAILURE: u8 = 2;

#[derive(Parser)]
#[command(name = "invguard", version, about = "GAN inversion, inversion cloaks and their evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render the procedural sprite-face dataset into a directory.
    Sprites {
        out: PathBuf,
        #[arg(long, default_value_t = 40)]
        identities: usize,
        #[arg(long, default_value_t = 20)]
        per_identity: usize,
        #[arg(long, default_value_t = 32)]
        resolution: usize,
        #[arg(long, default_value_t = 2024)]
        seed: u64,
    },
    /// Check a config and print it with defaults filled in.
    Validate { config: PathBuf },
    /// Run whichever pipeline the config names.
    Run { config: PathBuf },
    TrainGan { config: PathBuf },
    TrainEncoder { config: PathBuf },
    StealEncoder { config: PathBuf },
    TrainClassifier { config: PathBuf },
    Invert { config: PathBuf },
    Cloak { config: PathBuf },
    Distort { config: PathBuf },
    Adapt { config: PathBuf },
    Edit { config: PathBuf },
    Evaluate { config: PathBuf },
    Report { config: PathBuf },
}

fn load(path: &Path) -> Result<RunConfig, ExitCode> {
    let raw = std::fs::read_to_string(path).map_err(|e| {
        eprintln!("error: cannot read {}: {e}", path.display());
        ExitCode::from(CONFIG_ERROR)
    })?;
    let base = path.parent().unwrap_or(Path::new("."));
    validate_config(&raw, base).map_err(|errs| {
        for e in errs {
            eprintln!("config error: {e}");
        }
        ExitCode::from(CONFIG_ERROR)
    })
}

fn execute(path: &Path, expected: Option<Pipeline>) -> ExitCode {
    let cfg = match load(path) {
        Ok(c) => c,
        Err(code) => return code,
    };
    if let Some(p) = expected {
        if p != cfg.pipeline {
            eprintln!(
                "config error: pipeline: config names {:?} but the {} subcommand was used",
                cfg.pipeline.as_str(),
                p.as_str()
            );
            return ExitCode::from(CONFIG_ERROR);
        }
    }
    match run_pipeline(&cfg) {
        Ok(report) => {
            println!(
                "run {} ({}) wrote {} files to {}",
                report.run_id,
                report.pipeline,
                report.artifacts.len(),
                cfg.output_dir.display()
            );
            for ev in &report.evaluations {
                for row in &ev.rows {
                    println!(
                        "  {:<24} matching rate {:.3}  ssim {:.4}  psnr {:.2}",
                        row.label, row.matching_rate, row.utility.ssim.mean, row.utility.psnr.mean
                    );
                }
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(STAGE_FAILURE)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let (path, expected) = match cli.command {
        Command::Validate { config } => {
            return match load(&config) {
                Ok(cfg) => {
                    print!("{}", cfg.to_toml());
                    ExitCode::SUCCESS
                }
                Err(code) => code,
            };
        }
        Command::Sprites {
            out,
            identities,
            per_identity,
            resolution,
            seed,
        } => {
            let cfg = SpriteConfig {
                resolution,
                identities,
                images_per_identity: per_identity,
                seed,
            };
            return match render_sprites(&cfg).and_then(|d| d.save_dir(&out).map(|_| d.len())) {
                Ok(n) => {
                    println!("wrote {n} sprites to {}", out.display());
                    ExitCode::SUCCESS
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    ExitCode::from(STAGE_FAILURE)
                }
            };
        }
        Command::Run { config } => (config, None),
        Command::TrainGan { config } => (config, Some(Pipeline::TrainGan)),
        Command::TrainEncoder { config } => (config, Some(Pipeline::TrainEncoder)),
        Command::StealEncoder { config } => (config, Some(Pipeline::StealEncoder)),
        Command::TrainClassifier { config } => (config, Some(Pipeline::TrainClassifier)),
        Command::Invert { config } => (config, Some(Pipeline::Invert)),
        Command::Cloak { config } => (config, Some(Pipeline::Cloak)),
        Command::Distort { config } => (config, Some(Pipeline::Distort)),
        Command::Adapt { config } => (config, Some(Pipeline::Adapt)),
        Command::Edit { config } => (config, Some(Pipeline::Edit)),
        Command::Evaluate { config } => (config, Some(Pipeline::Evaluate)),
        Command::Report { config } => (config, Some(Pipeline::Report)),
    };
    execute(&path, expected)
}
