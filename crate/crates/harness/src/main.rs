use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use vql_core::pipeline::{finalize_3d, run_video, PipelineConfig, TrackOutput};
use vql_harness::metrics::{eval_2d, eval_3d, EvalReport, Thresholds3D};
use vql_harness::scenario::{generate, Preset, Scenario};
use vql_harness::{io, selfcheck, Error, Result};

/// Memory-driven visual query localization on synthetic desk-scale scenarios.
///
/// Set EAGLE_THREADS to cap the worker threads (default: one per core).
#[derive(Parser)]
#[command(name = "vql", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scenario.
    Gen {
        #[arg(long)]
        seed: u64,
        #[arg(long, value_enum)]
        preset: Preset,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the 2D pipeline over a scenario and write the track.
    Run2d {
        #[arg(long)]
        scenario: PathBuf,
        /// Pipeline settings; omitted fields keep their defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Lift a 2D track into 3D using the scenario's cameras.
    Run3d {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        track: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a track against the scenario's ground truth.
    Eval {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        track: PathBuf,
        /// Also report displacement metrics (needs a run3d track).
        #[arg(long)]
        metrics_3d: bool,
        /// Largest displacement error counted as a 3D success.
        #[arg(long, default_value_t = Thresholds3D::default().max_l2)]
        max_l2: f64,
        /// Largest displacement angle (radians) counted as a 3D success.
        #[arg(long, default_value_t = Thresholds3D::default().max_angle)]
        max_angle: f64,
        /// Print the report as JSON.
        #[arg(long)]
        json: bool,
    },
    /// Run the built-in reference checks.
    Selfcheck {
        /// Only run checks whose name contains this text.
        #[arg(long)]
        filter: Option<String>,
        #[arg(long)]
        json: bool,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match configure_threads().and_then(|()| dispatch(cli.command)) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn configure_threads() -> Result<()> {
    let Some(raw) = std::env::var_os("EAGLE_THREADS") else {
        return Ok(());
    };
    let n = raw
        .to_str()
        .and_then(|s| s.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Validation(format!("EAGLE_THREADS must be a positive integer, got {raw:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Validation(format!("cannot size the thread pool: {e}")))
}

fn read_scenario(path: &Path) -> Result<Scenario> {
    let s: Scenario = io::read(path, io::SCENARIO)?;
    s.validate()?;
    Ok(s)
}

fn read_config(path: Option<&Path>) -> Result<PipelineConfig> {
    let cfg = match path {
        Some(p) => io::read(p, io::CONFIG)?,
        None => PipelineConfig::default(),
    };
    cfg.validate()?;
    Ok(cfg)
}

fn read_track(path: &Path, scenario: &Scenario) -> Result<TrackOutput> {
    let t: TrackOutput = io::read(path, io::TRACK)?;
    if let Some(f) = t.frames.iter().find(|f| f.frame_index >= scenario.frames.len()) {
        return Err(Error::Validation(format!(
            "{}: frame {} is past the scenario's {} frames",
            path.display(),
            f.frame_index,
            scenario.frames.len()
        )));
    }
    Ok(t)
}

fn dispatch(command: Command) -> Result<ExitCode> {
    match command {
        Command::Gen { seed, preset, out } => {
            io::write(&out, io::SCENARIO, &generate(seed, preset)?)?;
        }
        Command::Run2d { scenario, config, out } => {
            let s = read_scenario(&scenario)?;
            let cfg = read_config(config.as_deref())?;
            let track = run_video(&s.query, s.features(), &cfg)?;
            io::write(&out, io::TRACK, &track)?;
        }
        Command::Run3d { scenario, track, config, out } => {
            let s = read_scenario(&scenario)?;
            let t = read_track(&track, &s)?;
            let cfg = read_config(config.as_deref())?;
            let lifted = finalize_3d(&t, &s.cameras(), &s.alignment_pairs, &cfg)?;
            io::write(&out, io::TRACK, &lifted)?;
        }
        Command::Eval { scenario, track, metrics_3d, max_l2, max_angle, json } => {
            let s = read_scenario(&scenario)?;
            let t = read_track(&track, &s)?;
            if !(max_l2 > 0.0 && max_angle > 0.0) {
                return Err(Error::Validation("success gates must be positive".into()));
            }
            let report = EvalReport {
                metrics_2d: eval_2d(&t, &s),
                metrics_3d: metrics_3d.then(|| eval_3d(&t, &s, &Thresholds3D { max_l2, max_angle })),
            };
            if json {
                print!("{}", io::to_string(io::REPORT, &report));
            } else {
                print!("{report}");
            }
        }
        Command::Selfcheck { filter, json } => {
            let reports = selfcheck::run(filter.as_deref());
            if reports.is_empty() {
                return Err(Error::Validation(format!("no check matches {:?}", filter.unwrap_or_default())));
            }
            let failed = reports.iter().filter(|r| !r.passed).count();
            if json {
                println!("{}", serde_json::to_string(&reports).expect("reports always serialize"));
            } else {
                for r in &reports {
                    let tag = if r.passed { "PASS" } else { "FAIL" };
                    println!("{tag} {:<34} {:>7.2}s  {}", r.name, r.seconds, r.detail);
                }
                println!("{} checks, {failed} failed", reports.len());
            }
            if failed > 0 {
                return Ok(ExitCode::from(1));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}
