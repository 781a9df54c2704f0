//! `semfwi` command line: data generation, codec training, both studies,
//! plotting and the oracle suites.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use semfwi::codec::Scheme;
use semfwi::harness::{self, CommRow, ExperimentConfig, ImagingSummaryRow};
use semfwi::{plot, verify};

#[derive(Parser)]
#[command(name = "semfwi", version, about = "Decentralized FWI with learned semantic communication")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML experiment config; built-in desk defaults when omitted.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    /// Override a config value, e.g. `--set imaging.runs=3`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Comma-separated scheme ids replacing the configured scheme lists.
    #[arg(long, global = true, value_delimiter = ',')]
    schemes: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Run perfect-link rollouts and write the train/eval datasets.
    GenData,
    /// Train every codec the configured schemes need.
    Train,
    /// Semantic-variable NMSE over the SNR sweep on held-out samples.
    EvalComm,
    /// ATC-FWI with every scheme in the loop.
    EvalImaging,
    /// Render a study CSV as SVG line charts.
    Plot {
        /// `comm.csv` or `imaging_summary.csv`.
        input: PathBuf,
        /// Output directory; defaults to the input's directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run every oracle suite that needs no trained artifacts.
    Gradcheck,
    /// Variational MI bound against exact conditional MI on random joints.
    MiOracle {
        #[arg(long, default_value_t = 100)]
        joints: usize,
    },
}

fn load_config(c: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &c.config {
        Some(p) => ExperimentConfig::load(p, &c.overrides).with_context(|| format!("reading config {}", p.display()))?,
        None => ExperimentConfig::from_toml("", &c.overrides)?,
    };
    if !c.schemes.is_empty() {
        let schemes = c.schemes.iter().map(|s| s.parse::<Scheme>()).collect::<Result<Vec<_>, _>>()?;
        cfg.comm.schemes = schemes.clone();
        cfg.imaging.schemes = schemes;
    }
    Ok(cfg)
}

fn report(results: &[verify::OracleResult]) -> bool {
    for r in results {
        println!("{}", r.line());
    }
    results.iter().all(|r| r.passed)
}

fn write_charts(charts: Vec<(String, String)>, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut out = Vec::new();
    for (stem, svg) in charts {
        let p = dir.join(format!("{stem}.svg"));
        std::fs::write(&p, svg)?;
        println!("wrote {}", p.display());
        out.push(p);
    }
    Ok(out)
}

fn run(cli: Cli) -> Result<bool> {
    let cfg = load_config(&cli.common)?;
    let results = cfg.results_dir();
    match cli.command {
        Command::GenData => {
            let s = harness::gen_data(&cfg)?;
            println!("{} raw samples", s.raw_samples);
            for (split, round, n) in &s.counts {
                println!("{split} {round}: {n} samples");
            }
            harness::write_bundle(&cfg, "gen-data", &[])?;
        }
        Command::Train => {
            for r in harness::train_all(&cfg)? {
                println!(
                    "{} {} N={}: {} samples, loss {:.4} -> {:.4}",
                    r.scheme,
                    r.round.name(),
                    r.n_tx,
                    r.samples,
                    r.losses.first().copied().unwrap_or(f64::NAN),
                    r.losses.last().copied().unwrap_or(f64::NAN)
                );
            }
            harness::write_bundle(&cfg, "train", &[results.join("train_log.csv")])?;
        }
        Command::EvalComm => {
            let rows = harness::run_comm_study(&cfg)?;
            for r in &rows {
                println!("{} N={} {:<18} {:>6.1} dB  nmse {:.4e} +- {:.1e}", r.round, r.n_tx, r.scheme, r.snr_db, r.mean_nmse, r.halfwidth);
            }
            harness::write_bundle(&cfg, "eval-comm", &[results.join("comm.csv")])?;
        }
        Command::EvalImaging => {
            let out = harness::run_imaging_study(&cfg)?;
            let last = cfg.imaging.iterations;
            for r in out.summary.iter().filter(|r| r.iteration == last) {
                println!("{:<9} {:<18} final mean nmse {:.4e} +- {:.1e}", r.topology, r.scheme, r.mean_nmse, r.halfwidth);
            }
            let files = ["imaging.csv", "imaging_summary.csv", "imaging_maps.csv"].map(|f| results.join(f));
            harness::write_bundle(&cfg, "eval-imaging", &files)?;
        }
        Command::Plot { input, out } => {
            let dir = out.unwrap_or_else(|| input.parent().map(Path::to_path_buf).unwrap_or_default());
            let header = std::fs::read_to_string(&input).with_context(|| format!("reading {}", input.display()))?;
            let header = header.lines().next().unwrap_or_default();
            let charts = if header.contains("snr_db") {
                plot::comm_charts(&harness::read_rows::<CommRow>(&input)?)
            } else if header.contains("mean_cost") {
                plot::imaging_charts(&harness::read_rows::<ImagingSummaryRow>(&input)?)
            } else {
                bail!("{} is neither a comm nor an imaging summary CSV", input.display());
            };
            write_charts(charts, &dir)?;
        }
        Command::Gradcheck => {
            let res = verify::run_all(cfg.seed)?;
            std::fs::create_dir_all(&results)?;
            let path = results.join("gradcheck.json");
            std::fs::write(&path, serde_json::to_string_pretty(&res)?)?;
            harness::write_bundle(&cfg, "gradcheck", &[])?;
            return Ok(report(&res));
        }
        Command::MiOracle { joints } => {
            let r = verify::mi_bound(joints, cfg.seed)?;
            return Ok(report(&[r]));
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("error: oracle checks failed");
            ExitCode::FAILURE
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
