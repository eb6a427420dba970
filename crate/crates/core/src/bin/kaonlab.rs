use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use kaonlab::config::{ConfigError, ExperimentConfig, ModeSelection};
use kaonlab::event::{self, EventAccounting};
use kaonlab::pipeline::{self, PipelineError};
use kaonlab::validate;
use kaonlab::GaussianPacket;

#[derive(Parser)]
#[command(
    name = "kaonlab",
    version,
    about = "Kaon decay vertex retrodiction with spreading pion wave packets"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML experiment configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set packet.sigma0_m=1e-14`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig, ConfigError> {
        ExperimentConfig::load(self.config.as_deref(), &self.overrides)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Classical,
    Bohmian,
    Both,
}

impl From<ModeArg> for ModeSelection {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Classical => ModeSelection::Classical,
            ModeArg::Bohmian => ModeSelection::Bohmian,
            ModeArg::Both => ModeSelection::Both,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Pion packet width σ(t) as CSV.
    Spread {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value_t = 1e-15)]
        t_min: f64,
        #[arg(long, default_value_t = 1e-7)]
        t_max: f64,
        #[arg(long, default_value_t = 41)]
        points: usize,
        /// Output file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate decay events as JSON lines.
    Simulate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Reconstruct detected π⁺π⁻ events into a results CSV.
    Reconstruct {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        events: PathBuf,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare classical and Bohmian results for the same events.
    Analyze {
        #[arg(long, num_args = 1..=2, required = true)]
        results: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Full simulate → reconstruct → classify run into the configured output directory.
    Run {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Run the oracle suites.
    Validate {
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
}

enum Failure {
    Config(String),
    Runtime(String),
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Config(e.to_string())
    }
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        if e.is_config_error() {
            Failure::Config(e.to_string())
        } else {
            Failure::Runtime(e.to_string())
        }
    }
}

fn runtime(context: &Path) -> impl FnOnce(std::fmt::Arguments) -> Failure + '_ {
    move |args| Failure::Runtime(format!("{}: {args}", context.display()))
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Spread {
            cfg,
            t_min,
            t_max,
            points,
            out,
        } => {
            let cfg = cfg.load()?;
            if !(t_min > 0.0 && t_max > t_min && points > 0) {
                return Err(Failure::Config(
                    "need 0 < t_min < t_max and points ≥ 1".into(),
                ));
            }
            let c = cfg.constants();
            let packet =
                GaussianPacket::with_hbar(0.0, 0.0, cfg.packet.sigma0_m, c.pion_mass, c.hbar)
                    .map_err(|e| Failure::Config(e.to_string()))?;
            let rows = pipeline::spread_table(&packet, &pipeline::log_times(t_min, t_max, points));
            match out {
                Some(path) => {
                    let mut f = std::fs::File::create(&path)
                        .map_err(|e| runtime(&path)(format_args!("{e}")))?;
                    pipeline::write_spread_csv(&mut f, &rows)
                        .map_err(|e| runtime(&path)(format_args!("{e}")))?;
                }
                None => {
                    pipeline::write_spread_csv(&mut std::io::stdout().lock(), &rows)
                        .map_err(|e| Failure::Runtime(e.to_string()))?;
                }
            }
        }
        Command::Simulate { cfg, out } => {
            let cfg = cfg.load()?;
            let setup = cfg.simulation_setup()?;
            let events = event::simulate(&setup, cfg.events, cfg.seed);
            event::write_events(&out, &events).map_err(|e| runtime(&out)(format_args!("{e}")))?;
            let acc = EventAccounting::tally(&events);
            println!(
                "{} events: {} detected pi+pi-, {} other modes, {} lost",
                acc.generated,
                acc.detected_two_pion,
                acc.other_mode,
                acc.lost()
            );
        }
        Command::Reconstruct {
            cfg,
            events,
            mode,
            out,
        } => {
            let cfg = cfg.load()?;
            let evs =
                event::read_events(&events).map_err(|e| runtime(&events)(format_args!("{e}")))?;
            let selection = mode
                .map(ModeSelection::from)
                .unwrap_or(cfg.reconstruction.mode);
            let rows = pipeline::reconstruct_configured(&cfg, &evs, selection);
            pipeline::write_results(&out, &rows)?;
            for m in pipeline::modes(selection) {
                let r = pipeline::ClassificationReport::from_rows(m, &rows);
                println!(
                    "{m}: {}/{} reconstructed, ambiguous rate {:.4}, misidentification rate {:.4}",
                    r.n_reconstructed,
                    r.n_events,
                    r.ambiguous_rate(),
                    r.misidentification_rate()
                );
            }
        }
        Command::Analyze { results, out } => {
            let mut rows = Vec::new();
            for path in &results {
                rows.extend(pipeline::read_results(path)?);
            }
            let cmp = pipeline::compare_modes(&rows)?;
            let summary = pipeline::write_comparison(&out, &cmp)?;
            for m in &cmp.metrics {
                println!(
                    "{}: classical {:.4}, bohmian {:.4}, difference {:.4} [{:.4}, {:.4}]",
                    m.metric, m.classical, m.bohmian, m.difference, m.ci_low, m.ci_high
                );
            }
            println!("summary written to {}", summary.display());
        }
        Command::Run { cfg } => {
            let cfg = cfg.load()?;
            let outcome = pipeline::run_pipeline(&cfg)?;
            print!(
                "{}",
                std::fs::read_to_string(&outcome.summary_path).unwrap_or_default()
            );
        }
        Command::Validate { seed } => {
            let checks = validate::run_all(seed);
            let mut failed = 0;
            for c in &checks {
                println!(
                    "{} {}: {:e} (threshold {:e})",
                    if c.passed { "PASS" } else { "FAIL" },
                    c.name,
                    c.metric,
                    c.threshold
                );
                failed += usize::from(!c.passed);
            }
            if failed > 0 {
                return Err(Failure::Runtime(format!("{failed} oracle check(s) failed")));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(m)) => {
            eprintln!("config error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(3)
        }
    }
}
