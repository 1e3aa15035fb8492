//! `micrank` command-line tool.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;

use micrank::commands::{self, RankMethod, MANIFEST_FILE};
use micrank::config::RunConfig;
use micrank::ltr::Strategy;
use micrank::manifest::Manifest;
use micrank::trainer::RelevanceMetric;
use micrank::verify::{run_verify, Fault};
use micrank::Error;

/// Environment variable holding the default worker thread count.
const THREADS_ENV: &str = "MICRANK_THREADS";

#[derive(Parser)]
#[command(
    name = "micrank",
    version,
    about = "Learning-to-rank microphone channel selection"
)]
struct Cli {
    /// Worker threads (default: $MICRANK_THREADS, else all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArg {
    /// TOML run configuration; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// How manifest relevance values are read.
    #[arg(long, value_parser = parse_metric)]
    relevance_metric: Option<RelevanceMetric>,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic multi-microphone dataset.
    Simulate {
        #[command(flatten)]
        cfg: ConfigArg,
        #[arg(long)]
        out: PathBuf,
        /// Number of utterances.
        #[arg(long)]
        n: Option<usize>,
        /// Seed of the first utterance.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        speech_dir: Option<PathBuf>,
        #[arg(long)]
        noise_dir: Option<PathBuf>,
        /// Mute the point noise source.
        #[arg(long)]
        no_noise: bool,
    },
    /// Train a channel ranker.
    Train {
        #[command(flatten)]
        cfg: ConfigArg,
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        valid: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_parser = parse_strategy)]
        strategy: Option<Strategy>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        /// Continue from the state saved in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Rank the channels of every manifest record.
    Rank {
        #[command(flatten)]
        cfg: ConfigArg,
        #[arg(long)]
        manifest: PathBuf,
        /// micrank:<ckpt>, ev[:weights], cd-blind, cd-informed,
        /// entropy:<dir>, sdr, closest or random:<seed>.
        #[arg(long, value_parser = parse_method)]
        method: RankMethod,
        /// JSON-lines output file (default: standard output).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare rankings against manifest relevance.
    Evaluate {
        #[command(flatten)]
        cfg: ConfigArg,
        #[arg(long)]
        manifest: PathBuf,
        /// Rankings files produced by `rank`, one method each.
        #[arg(long, num_args = 1.., required = true)]
        rankings: Vec<PathBuf>,
        #[arg(long)]
        k: Option<usize>,
        /// Directory for report.json (and details.csv with --csv).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        csv: bool,
    },
    /// Tune envelope-variance band weights on a labelled manifest.
    FitEv {
        #[command(flatten)]
        cfg: ConfigArg,
        #[arg(long)]
        manifest: PathBuf,
        /// Output JSON weights file.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the fast verification suite.
    Verify {
        /// Perturb the analytic gradient to exercise the failure path.
        #[arg(long, hide = true)]
        inject_gradient_fault: bool,
    },
}

fn parse_strategy(s: &str) -> Result<Strategy, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_metric(s: &str) -> Result<RelevanceMetric, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_method(s: &str) -> Result<RankMethod, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

impl ConfigArg {
    fn load(&self) -> micrank::Result<RunConfig> {
        let mut cfg = RunConfig::load_or_default(self.config.as_deref())?;
        if let Some(m) = self.relevance_metric {
            cfg.relevance_metric = m;
        }
        Ok(cfg)
    }
}

fn create_file(path: &Path) -> micrank::Result<std::fs::File> {
    std::fs::File::create(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn run(cli: Cli) -> micrank::Result<bool> {
    match cli.command {
        Command::Simulate {
            cfg,
            out,
            n,
            seed,
            speech_dir,
            noise_dir,
            no_noise,
        } => {
            let mut c = cfg.load()?;
            c.simulate.n = n.unwrap_or(c.simulate.n);
            c.simulate.seed = seed.unwrap_or(c.simulate.seed);
            c.simulate.speech_dir = speech_dir.or(c.simulate.speech_dir);
            c.simulate.noise_dir = noise_dir.or(c.simulate.noise_dir);
            c.scene.noise &= !no_noise;
            commands::simulate(&c, &out)?;
            println!("{}", out.join(MANIFEST_FILE).display());
        }
        Command::Train {
            cfg,
            train,
            valid,
            out,
            strategy,
            epochs,
            lr,
            seed,
            resume,
        } => {
            let mut c = cfg.load()?;
            c.trainer.strategy = strategy.unwrap_or(c.trainer.strategy);
            c.trainer.epochs = epochs.unwrap_or(c.trainer.epochs);
            c.trainer.lr = lr.unwrap_or(c.trainer.lr);
            c.trainer.seed = seed.unwrap_or(c.trainer.seed);
            let state = commands::train(&c, &train, &valid, &out, resume)?;
            println!(
                "best validation metric {:.4} at epoch {}",
                state.best_metric, state.best_epoch
            );
        }
        Command::Rank {
            cfg,
            manifest,
            method,
            out,
        } => {
            let c = cfg.load()?;
            let m = Manifest::load(&manifest)?;
            let rankings = commands::rank(&m, &method)?;
            match out {
                Some(path) => {
                    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                        c.write_resolved(dir)?;
                    }
                    let mut f = std::io::BufWriter::new(create_file(&path)?);
                    commands::write_rankings(&rankings, &mut f)?;
                    f.flush().map_err(|e| Error::Io { path, source: e })?;
                }
                None => commands::write_rankings(&rankings, &mut std::io::stdout().lock())?,
            }
        }
        Command::Evaluate {
            cfg,
            manifest,
            rankings,
            k,
            out,
            csv,
        } => {
            let mut c = cfg.load()?;
            c.eval.k = k.unwrap_or(c.eval.k);
            c.eval.csv |= csv;
            let m = Manifest::load(&manifest)?;
            let report = commands::evaluate_files(&m, &rankings, &c)?;
            print!("{}", report.table());
            if let Some(dir) = out {
                commands::write_report(&report, &c, &dir)?;
            }
        }
        Command::FitEv { cfg, manifest, out } => {
            let c = cfg.load()?;
            let m = Manifest::load(&manifest)?;
            let (weights, history) = commands::fit_ev(&m, &c)?;
            info!(
                "EV loss {:.4} -> {:.4}",
                history.first().copied().unwrap_or(f64::NAN),
                history.last().copied().unwrap_or(f64::NAN)
            );
            let json = serde_json::to_string_pretty(&weights)?;
            std::fs::write(&out, json + "\n").map_err(|e| Error::Io {
                path: out,
                source: e,
            })?;
        }
        Command::Verify {
            inject_gradient_fault,
        } => {
            let fault = if inject_gradient_fault {
                Fault::Gradient
            } else {
                Fault::None
            };
            let report = run_verify(fault)?;
            for c in &report.checks {
                println!("{c}");
            }
            println!("parameter census total: {}", report.census_total);
            println!("verification finished in {:.1} s", report.seconds);
            return Ok(report.passed());
        }
    }
    Ok(true)
}

fn init_threads(flag: Option<usize>) -> Result<(), String> {
    let n = match flag {
        Some(n) => Some(n),
        None => match std::env::var(THREADS_ENV) {
            Ok(v) => Some(
                v.parse()
                    .map_err(|_| format!("{THREADS_ENV}={v} is not a thread count"))?,
            ),
            Err(_) => None,
        },
    };
    if let Some(n) = n.filter(|&n| n > 0) {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| e.to_string())?;
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Err(e) = init_threads(cli.threads) {
        eprintln!("error: {e}");
        return ExitCode::from(2);
    }
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
