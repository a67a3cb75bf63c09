use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Serialize;

use rankjump::absorbing::{self, BoundsQuery};
use rankjump::experiment::{self, load_config, preset, ExperimentConfig};
use rankjump::landscape::{classify_minimum, converge, ClassifyOptions};
use rankjump::linnet::init_gaussian;
use rankjump::optimizer::derive_seed;
use rankjump::verify;
use rankjump::{Error, Result};

#[derive(Parser)]
#[command(name = "rankjump", version, about = "Deep linear networks on matrix completion: SGD dynamics, absorbing sets and landscape probes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment described by a TOML config.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated seed list overriding the config.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        /// Output directory; defaults to the config's `out`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run one of the built-in presets (fig1 to fig4).
    Preset {
        #[arg(value_parser = experiment::PRESETS)]
        name: String,
        #[arg(long, required_unless_present = "print_config")]
        out: Option<PathBuf>,
        /// Run seeds 0..N instead of the preset's seeds.
        #[arg(long)]
        seeds: Option<u64>,
        /// Print the preset as TOML and exit.
        #[arg(long)]
        print_config: bool,
    },
    /// Print closure and reachability constants as JSON.
    Bounds {
        #[arg(long)]
        lambda: f64,
        #[arg(long)]
        depth: usize,
        /// Norm cap C.
        #[arg(long)]
        cap: f64,
        /// Largest squared observed target entry.
        #[arg(long, default_value_t = 1.0)]
        c1: f64,
        /// Largest weight dimension.
        #[arg(long, default_value_t = 2)]
        n: usize,
        /// min(d_in, d_out); defaults to `n`.
        #[arg(long)]
        n_min: Option<usize>,
        #[arg(long, default_value_t = 1)]
        r: usize,
        #[arg(long, default_value_t = 1e-3)]
        eps1: f64,
        #[arg(long, default_value_t = 0.4)]
        eps2: f64,
        /// Soft-rank knee; defaults to its ceiling.
        #[arg(long)]
        alpha: Option<f64>,
        /// Step size for the reachability times; defaults to the closure ceiling.
        #[arg(long)]
        eta: Option<f64>,
        /// Initial max squared layer norm; defaults to `cap`.
        #[arg(long)]
        c0: Option<f64>,
    },
    /// Converge full-batch descent from each seed's initialization and classify the minimum.
    Landscape {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        /// Leave the weights out of the JSON.
        #[arg(long)]
        no_params: bool,
    },
    /// Run the oracle suites.
    Verify {
        #[arg(long, default_value_t = 20)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Serialize)]
struct LandscapeEntry {
    seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    report: Option<serde_json::Value>,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    let s = serde_json::to_string_pretty(value).map_err(|e| Error::Serialize(e.to_string()))?;
    println!("{s}");
    Ok(())
}

fn run_and_report(cfg: &ExperimentConfig, out: &std::path::Path) -> Result<()> {
    let summary = experiment::run_experiment(cfg, out)?;
    for c in &summary.cells {
        println!("{}: {}/{} seeds jumped, {} diverged", c.cell, c.jumps, c.seeds, c.diverged);
    }
    println!("artifacts in {}", out.display());
    Ok(())
}

fn landscape(cfg: &ExperimentConfig, no_params: bool) -> Result<Vec<LandscapeEntry>> {
    let lc = cfg.landscape.clone().unwrap_or_default();
    let lambda = lc
        .lambda
        .unwrap_or_else(|| cfg.schedule.last().map(|s| s.lambda).unwrap_or(0.0));
    let p = cfg.problem.build()?;
    let arch = cfg.arch.build(&p)?;
    let opts = ClassifyOptions {
        rank_tol: cfg.rank_tol,
        stationarity_tol: (10.0 * lc.grad_tol).max(1e-8),
        hessian: Some((lc.hessian_probes, lc.hessian_iters, 0)),
    };
    let mut out = Vec::new();
    for &seed in &cfg.seeds {
        let theta0 = init_gaussian(&arch, cfg.init.scale, derive_seed(seed, 0))?;
        let result = converge(&theta0, &p, lambda, lc.eta, lc.grad_tol, lc.max_steps)
            .and_then(|c| classify_minimum(&c.params, &p, lambda, cfg.problem.r_star(), &opts));
        out.push(match result {
            Ok(report) => {
                let mut report = serde_json::to_value(&report).map_err(|e| Error::Serialize(e.to_string()))?;
                if no_params {
                    if let Some(obj) = report.as_object_mut() {
                        obj.remove("params");
                    }
                }
                LandscapeEntry {
                    seed,
                    report: Some(report),
                    error: None,
                }
            }
            Err(e) => LandscapeEntry {
                seed,
                report: None,
                error: Some(e.to_string()),
            },
        });
    }
    Ok(out)
}

fn dispatch(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Run { config, seeds, out } => {
            let mut cfg = load_config(&config)?;
            if let Some(s) = seeds {
                cfg.seeds = s;
            }
            let out = out
                .or_else(|| cfg.out.clone())
                .ok_or_else(|| Error::Usage("no output directory: pass --out or set `out` in the config".into()))?;
            run_and_report(&cfg, &out)?;
        }
        Command::Preset {
            name,
            out,
            seeds,
            print_config,
        } => {
            let mut cfg = preset(&name)?;
            if let Some(n) = seeds {
                cfg.seeds = (0..n).collect();
            }
            if print_config {
                print!("{}", cfg.to_toml_string()?);
            } else if let Some(out) = out {
                run_and_report(&cfg, &out)?;
            }
        }
        Command::Bounds {
            lambda,
            depth,
            cap,
            c1,
            n,
            n_min,
            r,
            eps1,
            eps2,
            alpha,
            eta,
            c0,
        } => {
            let q = BoundsQuery {
                lambda,
                depth,
                c1,
                n,
                n_min: n_min.unwrap_or(n),
                r,
                eps1,
                eps2,
                cap_c: cap,
                alpha,
                eta,
                c0,
            };
            print_json(&absorbing::bounds(&q)?)?;
        }
        Command::Landscape {
            config,
            seeds,
            no_params,
        } => {
            let mut cfg = load_config(&config)?;
            if let Some(s) = seeds {
                cfg.seeds = s;
            }
            print_json(&landscape(&cfg, no_params)?)?;
        }
        Command::Verify { trials, seed } => {
            let suites = verify::run_all(trials, seed)?;
            print_json(&suites)?;
            return Ok(suites.iter().all(|s| s.passed));
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
