mod artifacts;
mod config;
mod runs;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;
use sha2::{Digest, Sha256};

use artifacts::{Outputs, TOOLKIT_VERSION};
use config::ExperimentConfig;

/// Simulator and analysis toolkit for flux-pumped single-photon emission.
#[derive(Parser)]
#[command(name = "photonsim", version, disable_version_flag = true)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Execute the experiment described by a config file.
    Run(JobArgs),
    /// Validate a config file without running anything.
    Verify(JobArgs),
    /// Print the toolkit version.
    Version,
}

#[derive(Args)]
struct JobArgs {
    /// Path to a JSON experiment config.
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides output_dir from the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// RNG seed; overrides the seed from the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker thread count (defaults to all cores).
    #[arg(long)]
    threads: Option<usize>,
}

const EXIT_CONFIG: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;

fn fail(code: u8, stage: &str, detail: serde_json::Value) -> ExitCode {
    let doc = json!({
        "status": "error",
        "stage": stage,
        "detail": detail,
        "toolkit_version": TOOLKIT_VERSION,
    });
    eprintln!("{doc}");
    ExitCode::from(code)
}

/// Loads and validates the config; on any problem prints the error JSON and
/// returns the exit code instead.
fn load(args: &JobArgs) -> Result<(ExperimentConfig, String), ExitCode> {
    let raw = match std::fs::read(&args.config) {
        Ok(b) => b,
        Err(e) => {
            return Err(fail(
                EXIT_CONFIG,
                "config",
                json!({"message": format!("cannot read {}: {e}", args.config.display())}),
            ))
        }
    };
    let sha = format!("{:x}", Sha256::digest(&raw));
    let text = match String::from_utf8(raw) {
        Ok(t) => t,
        Err(_) => {
            return Err(fail(
                EXIT_CONFIG,
                "config",
                json!({"message": "config is not valid UTF-8"}),
            ))
        }
    };
    let cfg = match ExperimentConfig::from_json(&text) {
        Ok(c) => c,
        Err(msg) => return Err(fail(EXIT_CONFIG, "config", json!({"message": msg}))),
    };
    let violations = cfg.check();
    if !violations.is_empty() {
        return Err(fail(
            EXIT_CONFIG,
            "config",
            json!({"message": "config violates constraints", "violations": violations}),
        ));
    }
    Ok((cfg, sha))
}

fn main() -> ExitCode {
    match Cli::parse().cmd {
        Cmd::Version => {
            println!("photonsim {TOOLKIT_VERSION}");
            ExitCode::SUCCESS
        }
        Cmd::Verify(args) => {
            let (cfg, sha) = match load(&args) {
                Ok(v) => v,
                Err(code) => return code,
            };
            let doc = json!({
                "status": "ok",
                "kind": cfg.run.kind(),
                "seed": args.seed.unwrap_or(cfg.seed),
                "config_sha256": sha,
                "toolkit_version": TOOLKIT_VERSION,
            });
            println!("{doc}");
            ExitCode::SUCCESS
        }
        Cmd::Run(args) => {
            let (cfg, sha) = match load(&args) {
                Ok(v) => v,
                Err(code) => return code,
            };
            let dir = match args.out.clone().or_else(|| cfg.output_dir.clone()) {
                Some(d) => d,
                None => {
                    return fail(
                        EXIT_CONFIG,
                        "config",
                        json!({
                            "message": "no output directory: set output_dir in the config or pass --out",
                            "violations": [{"name": "output_dir_missing"}],
                        }),
                    )
                }
            };
            if let Some(n) = args.threads {
                // A second initialization attempt is harmless; keep the
                // default pool in that case.
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
            let seed = args.seed.unwrap_or(cfg.seed);
            let params = cfg.device.to_params();
            let out = match Outputs::create(&dir, &sha, seed) {
                Ok(o) => o,
                Err(e) => {
                    return fail(
                        EXIT_NUMERICAL,
                        "io",
                        json!({"message": format!("cannot create {}: {e}", dir.display())}),
                    )
                }
            };
            match runs::execute(&cfg, &params, seed, &out) {
                Ok(()) => ExitCode::SUCCESS,
                Err(e) => fail(EXIT_NUMERICAL, "run", json!({"message": e.to_string()})),
            }
        }
    }
}
