use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use log::info;

use pdsm_core::config::RunConfig;
use pdsm_core::pipeline::{fit_pipeline, run_benchmark, EvalMode, PipelineBundle};
use pdsm_core::synthsite::{generate_cohort, load_images, CohortManifest};
use pdsm_core::Error;

#[derive(Parser)]
#[command(
    name = "pdsm",
    version,
    about = "Pseudo-domain specific models for longitudinal outcome prediction"
)]
struct Cli {
    /// Flat JSON config with dotted keys; omitted keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[arg(long, global = true, default_value_t = 42)]
    seed: u64,

    /// Worker threads; results do not depend on this.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,

    /// Output directory (cohort, bundle or report location).
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic cohort with train/test manifests.
    Generate,
    /// Fit a bundle on a training manifest.
    Fit {
        #[arg(long)]
        manifest: PathBuf,
        /// Overrides `cluster.k`.
        #[arg(long)]
        k: Option<usize>,
    },
    /// Evaluate a bundle on a test manifest.
    Evaluate {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_enum, default_value_t = Mode::Pdsm)]
        mode: Mode,
    },
    /// Generate, fit and evaluate all modes for each seed.
    Benchmark {
        #[arg(long, value_delimiter = ',', default_value = "42")]
        seeds: Vec<u64>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
#[value(rename_all = "snake_case")]
enum Mode {
    Pdsm,
    SingleModel,
    SingleVisit,
}

impl From<Mode> for EvalMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Pdsm => EvalMode::Pdsm,
            Mode::SingleModel => EvalMode::SingleModel,
            Mode::SingleVisit => EvalMode::SingleVisit,
        }
    }
}

fn load_config(cli: &Cli) -> pdsm_core::Result<RunConfig> {
    let config = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    Ok(config)
}

fn require_out(out: &Option<PathBuf>) -> pdsm_core::Result<&Path> {
    out.as_deref().ok_or_else(|| Error::Config {
        key: "--out".into(),
        message: "this command needs an output directory".into(),
    })
}

fn write_file(path: &Path, contents: &str) -> pdsm_core::Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> pdsm_core::Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn run(cli: &Cli) -> pdsm_core::Result<()> {
    if cli.threads == 0 {
        return Err(Error::Config {
            key: "--threads".into(),
            message: "must be at least 1".into(),
        });
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads)
        .build_global()
        .map_err(|e| Error::invalid(format!("thread pool: {e}")))?;

    let mut config = load_config(cli)?;
    if let Command::Fit { k: Some(k), .. } = &cli.command {
        config.cluster.k = *k;
        config.validate()?;
    }
    info!("seed {}, threads {}", cli.seed, cli.threads);
    info!("resolved config:\n{}", config.to_json());

    match &cli.command {
        Command::Generate => {
            let out = require_out(&cli.out)?;
            let cohort = generate_cohort(&config.cohort, cli.seed)?;
            cohort.write(out)?;
            info!("cohort written to {}", out.display());
        }
        Command::Fit { manifest, .. } => {
            let out = require_out(&cli.out)?;
            let manifest = CohortManifest::read(manifest)?;
            let images = load_images(&manifest)?;
            let bundle = fit_pipeline(&manifest, &images, &config, cli.seed)?;
            bundle.save(out)?;
            info!("bundle with {} PDSMs written to {}", bundle.k(), out.display());
        }
        Command::Evaluate { bundle, manifest, mode } => {
            let bundle = PipelineBundle::load(bundle)?;
            let manifest = CohortManifest::read(manifest)?;
            let images = load_images(&manifest)?;
            let report = bundle.evaluate(&manifest, &images, (*mode).into())?;
            let text = report.to_text();
            match &cli.out {
                Some(out) => {
                    create_dir(out)?;
                    let stem = format!("report_{}", report.mode.as_str());
                    write_file(&out.join(format!("{stem}.json")), &serde_json_pretty(&report)?)?;
                    write_file(&out.join(format!("{stem}.txt")), &text)?;
                }
                None => print!("{text}"),
            }
        }
        Command::Benchmark { seeds } => {
            let table = run_benchmark(&config, seeds)?;
            let text = table.to_text();
            if let Some(out) = &cli.out {
                create_dir(out)?;
                write_file(&out.join("benchmark.json"), &table.to_json())?;
                write_file(&out.join("benchmark.txt"), &text)?;
            }
            print!("{text}");
        }
    }
    Ok(())
}

fn serde_json_pretty<T: serde::Serialize>(value: &T) -> pdsm_core::Result<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
