use std::fs::File;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::DMatrix;
use serde_json::json;

use wfapc_core::jacobi::ControllerModel;
use wfapc_core::plant::greedy_power;
use wfapc_core::sim::reference::{load_or_generate_reference, synthetic_signal};
use wfapc_core::sim::report::{read_traces, report_metrics, summary, write_report};
use wfapc_core::sim::{run_centralized_oracle, run_closed_loop, SimConfig, SimulationReport};
use wfapc_core::topology::build_layout;

#[derive(Parser)]
#[command(name = "wfapc", version, about = "Wind farm active power control with distributed MPC")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the distributed controller against the wake plant.
    Simulate(RunArgs),
    /// Run the same loop with one centralized QP per sample.
    Oracle(RunArgs),
    /// Write the linearization point and subsystem matrices as JSON.
    Linearize {
        #[command(flatten)]
        source: ConfigArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate the reference signal, one sample per line.
    Reference {
        #[command(flatten)]
        source: ConfigArgs,
        /// Write P_ref in W instead of the normalized signal.
        #[arg(long)]
        watts: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Recompute metrics from a trace file.
    Report {
        /// Path to traces.csv.
        traces: PathBuf,
        #[arg(long, default_value_t = 0.01)]
        ct_min: f64,
        #[arg(long, default_value_t = 8.0 / 9.0)]
        ct_max: f64,
        /// Greedy power in W, to express RMSE as a fraction.
        #[arg(long)]
        greedy_power: Option<f64>,
    },
    /// Print a preset configuration.
    Config {
        #[arg(long, value_enum, default_value_t = Preset::TenTurbine)]
        preset: Preset,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    #[value(name = "10t")]
    TenTurbine,
    #[value(name = "64t")]
    SixtyFourTurbine,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML configuration; defaults to the chosen preset.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Preset::TenTurbine, conflicts_with = "config")]
    preset: Preset,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    horizon: Option<usize>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    samples: Option<usize>,
}

impl ConfigArgs {
    fn load(&self) -> Result<SimConfig> {
        let mut c = match &self.config {
            Some(p) => SimConfig::load(p)?,
            None => match self.preset {
                Preset::TenTurbine => SimConfig::ten_turbine(),
                Preset::SixtyFourTurbine => SimConfig::sixty_four_turbine(),
            },
        };
        if let Some(s) = self.seed {
            c.reference.seed = s;
        }
        if let Some(w) = self.workers {
            c.control.workers = w;
        }
        if let Some(h) = self.horizon {
            c.control.horizon = h;
        }
        if let Some(g) = self.gamma {
            c.reference.gamma = g;
        }
        if let Some(n) = self.samples {
            c.simulation.samples = n;
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    source: ConfigArgs,
    /// Directory for traces and metadata.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Exit with status 3 if any sample hit the Jacobi iteration cap.
    #[arg(long)]
    strict: bool,
}

const EXIT_VALIDATION: u8 = 1;
const EXIT_RUNTIME: u8 = 2;
const EXIT_NONCONVERGED: u8 = 3;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            let validation = e
                .chain()
                .filter_map(|c| c.downcast_ref::<wfapc_core::Error>())
                .any(|c| c.is_validation());
            ExitCode::from(if validation { EXIT_VALIDATION } else { EXIT_RUNTIME })
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Simulate(args) => run_loop(args, false),
        Command::Oracle(args) => run_loop(args, true),
        Command::Linearize { source, out } => {
            let c = source.load()?;
            emit(out.as_deref(), &serde_json::to_string_pretty(&linearize(&c)?)?)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Reference { source, watts, out } => {
            let c = source.load()?;
            let text = if watts {
                let layout = build_layout(&c.farm)?;
                let pg = greedy_power(&layout, &c.plant_params())?;
                let r = load_or_generate_reference(
                    c.reference.file.as_deref(),
                    c.reference.gamma,
                    c.reference.base,
                    pg,
                    c.simulation.samples,
                    c.reference.seed,
                )?;
                lines(&r.samples)
            } else {
                lines(&synthetic_signal(c.simulation.samples, c.reference.seed))
            };
            emit(out.as_deref(), &text)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Report {
            traces,
            ct_min,
            ct_max,
            greedy_power,
        } => {
            let f = File::open(&traces).with_context(|| format!("opening {}", traces.display()))?;
            let records = read_traces(BufReader::new(f))?;
            let m = report_metrics(&records, ct_min, ct_max);
            let mut v = serde_json::to_value(m)?;
            if let Some(pg) = greedy_power {
                v["rmse_fraction_of_greedy"] = json!(m.rmse / pg);
            }
            emit(None, &format!("{}\n", serde_json::to_string_pretty(&v)?))?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Config { preset } => {
            let c = match preset {
                Preset::TenTurbine => SimConfig::ten_turbine(),
                Preset::SixtyFourTurbine => SimConfig::sixty_four_turbine(),
            };
            emit(None, &c.to_toml())?;
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn run_loop(args: RunArgs, centralized: bool) -> Result<ExitCode> {
    let c = args.source.load()?;
    let report: SimulationReport = if centralized {
        run_centralized_oracle(&c)?
    } else {
        run_closed_loop(&c)?
    };
    let files = write_report(&report, &args.out)?;
    let mut text = summary(&report);
    for f in files {
        text.push_str(&format!("wrote {}\n", f.display()));
    }
    emit(None, &text)?;
    if args.strict && report.nonconverged_steps > 0 {
        eprintln!("{} samples hit the iteration cap", report.nonconverged_steps);
        return Ok(ExitCode::from(EXIT_NONCONVERGED));
    }
    Ok(ExitCode::SUCCESS)
}

fn lines(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x}\n")).collect()
}

fn emit(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => std::fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => match std::io::stdout().write_all(text.as_bytes()) {
            // a closed pipe (e.g. `| head`) is not an error
            Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
            r => Ok(r?),
        },
    }
}

/// Nonzero entries as `[row, col, value]`.
fn triplets(m: &DMatrix<f64>) -> serde_json::Value {
    let mut out = Vec::new();
    for c in 0..m.ncols() {
        for r in 0..m.nrows() {
            if m[(r, c)] != 0.0 {
                out.push(json!([r, c, m[(r, c)]]));
            }
        }
    }
    json!({ "rows": m.nrows(), "cols": m.ncols(), "entries": out })
}

fn linearize(c: &SimConfig) -> Result<serde_json::Value> {
    let layout = build_layout(&c.farm)?;
    let point = c.control_model.linearization_ct.resolve(layout.turbines())?;
    let m = ControllerModel::new(
        &layout,
        &c.control_model.params(),
        &point,
        c.control_model.constants(),
        c.control.horizon,
        c.control_model.state_budget,
    )?;
    let subsystems: Vec<_> = m
        .subsystems
        .iter()
        .map(|s| {
            json!({
                "turbine": s.turbine,
                "states": s.nx(),
                "a_self": triplets(&s.a_self),
                "a_up": s.a_up.as_ref().map(triplets),
                "b": s.b.iter().collect::<Vec<_>>(),
                "c": s.c.iter().collect::<Vec<_>>(),
                "state_bias": s.state_bias.iter().collect::<Vec<_>>(),
                "output_bias": s.output_bias,
            })
        })
        .collect();
    Ok(json!({ "model": m.fused, "subsystems": subsystems }))
}
